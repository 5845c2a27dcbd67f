//! Training losses: weighted cross entropy plus the frame-to-frame
//! inconsistency penalty, with squared and absolute difference variants.
//!
//! All functions here are pure. The inconsistency masks (validity, ground
//! truth consistency, and the "at least one prediction correct" gate) are
//! treated as constants for differentiation; gradients flow only through the
//! probability difference term.

use crate::error::{Error, Result};
use crate::tensor::TensorBase;

pub type Tensor = TensorBase<f64>;

/// Reserved label marking pixels excluded from all losses and metrics.
pub const IGNORE: u8 = 255;

const LOG_CLAMP: f64 = 1e-12;

/// Ground-truth labels over a scene, `[T,M,N]`, entries in `0..num_classes`
/// or [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(frames: usize, height: usize, width: usize, fill: u8) -> Self {
        LabelVolume { frames, height, width, data: vec![fill; frames * height * width] }
    }

    pub fn from_vec(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != frames * height * width {
            return Err(Error::ShapeMismatch(format!(
                "label data length {} != {}x{}x{}",
                data.len(),
                frames,
                height,
                width
            )));
        }
        Ok(LabelVolume { frames, height, width, data })
    }

    #[inline]
    pub fn get(&self, t: usize, m: usize, n: usize) -> u8 {
        self.data[(t * self.height + m) * self.width + n]
    }

    #[inline]
    pub fn set(&mut self, t: usize, m: usize, n: usize, v: u8) {
        self.data[(t * self.height + m) * self.width + n] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        &self.data[t * self.height * self.width..(t + 1) * self.height * self.width]
    }

    /// Checks that every entry is a valid class id or IGNORE.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (k, &v) in self.data.iter().enumerate() {
            if v != IGNORE && v as usize >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "label value {} at flat index {} (classes: {})",
                    v, k, num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel class probabilities over a scene, `[T,M,N,S]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVolume {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    data: Vec<f64>,
}

impl PredictionVolume {
    pub fn zeros(frames: usize, height: usize, width: usize, classes: usize) -> Self {
        PredictionVolume {
            frames,
            height,
            width,
            classes,
            data: vec![0.0; frames * height * width * classes],
        }
    }

    pub fn from_vec(
        frames: usize,
        height: usize,
        width: usize,
        classes: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != frames * height * width * classes {
            return Err(Error::ShapeMismatch(format!(
                "prediction data length {} != {}x{}x{}x{}",
                data.len(),
                frames,
                height,
                width,
                classes
            )));
        }
        Ok(PredictionVolume { frames, height, width, classes, data })
    }

    #[inline]
    pub fn offset(&self, t: usize, m: usize, n: usize) -> usize {
        ((t * self.height + m) * self.width + n) * self.classes
    }

    #[inline]
    pub fn get(&self, t: usize, m: usize, n: usize, s: usize) -> f64 {
        self.data[self.offset(t, m, n) + s]
    }

    #[inline]
    pub fn pixel(&self, t: usize, m: usize, n: usize) -> &[f64] {
        let o = self.offset(t, m, n);
        &self.data[o..o + self.classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Copies one frame of `[S,M,N]` probabilities into the `[T,M,N,S]`
    /// layout.
    pub fn set_frame(&mut self, t: usize, frame: &Tensor) -> Result<()> {
        if frame.shape() != [self.classes, self.height, self.width] {
            return Err(Error::ShapeMismatch(format!(
                "frame shape {:?}, expected [{},{},{}]",
                frame.shape(),
                self.classes,
                self.height,
                self.width
            )));
        }
        let plane = self.height * self.width;
        for m in 0..self.height {
            for n in 0..self.width {
                let o = self.offset(t, m, n);
                for s in 0..self.classes {
                    self.data[o + s] = frame.data()[s * plane + m * self.width + n];
                }
            }
        }
        Ok(())
    }

    /// Inverse of `set_frame`: gradient volume slice back to `[S,M,N]`.
    pub fn frame_tensor(&self, t: usize) -> Tensor {
        let plane = self.height * self.width;
        let mut out = Tensor::zeros(&[self.classes, self.height, self.width]);
        for m in 0..self.height {
            for n in 0..self.width {
                let o = self.offset(t, m, n);
                for s in 0..self.classes {
                    out.data_mut()[s * plane + m * self.width + n] = self.data[o + s];
                }
            }
        }
        out
    }

    /// Per-pixel argmax labels; ties break toward the lowest class index.
    pub fn argmax_labels(&self) -> LabelVolume {
        let mut labels = LabelVolume::new(self.frames, self.height, self.width, 0);
        for t in 0..self.frames {
            for m in 0..self.height {
                for n in 0..self.width {
                    labels.set(t, m, n, argmax(self.pixel(t, m, n)) as u8);
                }
            }
        }
        labels
    }
}

/// Argmax with ties broken toward the lowest index.
#[inline]
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// The indicator function: 1 if the condition holds, else 0.
#[inline]
pub fn indicator(condition: bool) -> u32 {
    condition as u32
}

/// 1 iff at least one of the two predictions matches its ground truth label.
#[inline]
pub fn psi(s1: usize, p1: &[f64], s2: usize, p2: &[f64]) -> u32 {
    (indicator(s1 == argmax(p1)) + indicator(s2 == argmax(p2))).min(1)
}

/// Shared validity/consistency predicate over a consecutive frame pair:
/// pixel is labeled at both t and t+1 and the label does not change.
#[inline]
pub fn validity_pair_check(labels: &LabelVolume, t: usize, m: usize, n: usize) -> bool {
    let a = labels.get(t, m, n);
    let b = labels.get(t + 1, m, n);
    a != IGNORE && b != IGNORE && a == b
}

/// Count of valid, ground-truth-consistent pixel pairs (the loss normalizer
/// and the temporal metrics' denominator).
pub fn omega_norm(labels: &LabelVolume) -> Result<u64> {
    if labels.frames < 2 {
        return Err(Error::InvalidArgument("omega_norm needs at least 2 frames".into()));
    }
    let mut count = 0u64;
    for t in 0..labels.frames - 1 {
        for m in 0..labels.height {
            for n in 0..labels.width {
                if validity_pair_check(labels, t, m, n) {
                    count += 1;
                }
            }
        }
    }
    Ok(count)
}

/// Valid, consistent, and correctly-predicted gate at one pixel pair.
pub fn omega_vcc(
    labels: &LabelVolume,
    preds: &PredictionVolume,
    t: usize,
    m: usize,
    n: usize,
) -> u32 {
    if !validity_pair_check(labels, t, m, n) {
        return 0;
    }
    let s1 = labels.get(t, m, n) as usize;
    let s2 = labels.get(t + 1, m, n) as usize;
    psi(s1, preds.pixel(t, m, n), s2, preds.pixel(t + 1, m, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difference {
    Squared,
    Absolute,
}

impl Difference {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "squared" | "sq" => Ok(Difference::Squared),
            "absolute" | "abs" => Ok(Difference::Absolute),
            other => Err(Error::InvalidConfig(format!("unknown difference variant '{}'", other))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub lambda_ce: f64,
    pub lambda_incons: f64,
    pub difference: Difference,
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_ce: 1.0,
            lambda_incons: 10.0,
            difference: Difference::Squared,
            class_weights: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_ce < 0.0 || self.lambda_incons < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| v <= 0.0) {
                return Err(Error::InvalidConfig("class weights must be strictly positive".into()));
            }
        }
        Ok(())
    }
}

/// Precomputed constant masks for the inconsistency term: for every pair
/// (t, m, n) the vcc gate and the true class. Frozen during gradient checks.
#[derive(Debug, Clone)]
pub struct InconsMasks {
    pub omega_norm: u64,
    /// (t, m, n, true_class) for every pixel pair with vcc = 1.
    pub active: Vec<(usize, usize, usize, usize)>,
}

pub fn compute_masks(preds: &PredictionVolume, labels: &LabelVolume) -> Result<InconsMasks> {
    if labels.frames != preds.frames
        || labels.height != preds.height
        || labels.width != preds.width
    {
        return Err(Error::ShapeMismatch("prediction/label volume mismatch".into()));
    }
    if labels.frames < 2 {
        return Err(Error::InvalidArgument("inconsistency loss needs at least 2 frames".into()));
    }
    let norm = omega_norm(labels)?;
    let mut active = Vec::new();
    for t in 0..labels.frames - 1 {
        for m in 0..labels.height {
            for n in 0..labels.width {
                if omega_vcc(labels, preds, t, m, n) == 1 {
                    active.push((t, m, n, labels.get(t, m, n) as usize));
                }
            }
        }
    }
    Ok(InconsMasks { omega_norm: norm, active })
}

/// Eq. 2 with precomputed masks.
pub fn inconsistency_loss_with_masks(
    preds: &PredictionVolume,
    masks: &InconsMasks,
    difference: Difference,
) -> f64 {
    if masks.omega_norm == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for &(t, m, n, s) in &masks.active {
        let d = preds.get(t, m, n, s) - preds.get(t + 1, m, n, s);
        total += match difference {
            Difference::Squared => d * d,
            Difference::Absolute => d.abs(),
        };
    }
    total / masks.omega_norm as f64
}

/// Masked, normalized difference of true-class probabilities between
/// consecutive frames. Returns 0 (with no error) when no pixel pair
/// qualifies.
pub fn inconsistency_loss(
    preds: &PredictionVolume,
    labels: &LabelVolume,
    difference: Difference,
) -> Result<f64> {
    let masks = compute_masks(preds, labels)?;
    Ok(inconsistency_loss_with_masks(preds, &masks, difference))
}

/// Mean over valid pixels of the weighted negative log true-class
/// probability, log clamped at `ln(1e-12)`.
pub fn cross_entropy(
    preds: &PredictionVolume,
    labels: &LabelVolume,
    weights: Option<&[f64]>,
) -> Result<f64> {
    if labels.frames != preds.frames
        || labels.height != preds.height
        || labels.width != preds.width
    {
        return Err(Error::ShapeMismatch("prediction/label volume mismatch".into()));
    }
    if let Some(w) = weights {
        if w.len() != preds.classes {
            return Err(Error::ShapeMismatch(format!(
                "{} class weights for {} classes",
                w.len(),
                preds.classes
            )));
        }
    }
    let mut total = 0.0;
    let mut count = 0u64;
    for t in 0..labels.frames {
        for m in 0..labels.height {
            for n in 0..labels.width {
                let s = labels.get(t, m, n);
                if s == IGNORE {
                    continue;
                }
                let p = preds.get(t, m, n, s as usize).max(LOG_CLAMP);
                let w = weights.map_or(1.0, |w| w[s as usize]);
                total -= w * p.ln();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "cross entropy undefined: every pixel is IGNORE".into(),
        ));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub ce: f64,
    pub incons: f64,
}

/// Eq. 1: weighted sum of cross entropy and inconsistency loss.
pub fn total_loss(
    preds: &PredictionVolume,
    labels: &LabelVolume,
    config: &LossConfig,
) -> Result<LossComponents> {
    config.validate()?;
    let ce = cross_entropy(preds, labels, config.class_weights.as_deref())?;
    let incons = if preds.frames >= 2 {
        inconsistency_loss(preds, labels, config.difference)?
    } else {
        0.0
    };
    Ok(LossComponents {
        total: config.lambda_ce * ce + config.lambda_incons * incons,
        ce,
        incons,
    })
}

/// Loss value plus its gradient with respect to the probability volume. The
/// masks may be supplied to freeze them (finite-difference checks); when
/// absent they are computed at the given predictions.
pub fn total_loss_grad(
    preds: &PredictionVolume,
    labels: &LabelVolume,
    config: &LossConfig,
    frozen_masks: Option<&InconsMasks>,
) -> Result<(LossComponents, PredictionVolume)> {
    config.validate()?;
    let mut grad =
        PredictionVolume::zeros(preds.frames, preds.height, preds.width, preds.classes);

    // cross entropy part
    let mut ce_total = 0.0;
    let mut count = 0u64;
    for t in 0..labels.frames {
        for m in 0..labels.height {
            for n in 0..labels.width {
                let s = labels.get(t, m, n);
                if s == IGNORE {
                    continue;
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "cross entropy undefined: every pixel is IGNORE".into(),
        ));
    }
    for t in 0..labels.frames {
        for m in 0..labels.height {
            for n in 0..labels.width {
                let s = labels.get(t, m, n);
                if s == IGNORE {
                    continue;
                }
                let w = config.class_weights.as_ref().map_or(1.0, |w| w[s as usize]);
                let p = preds.get(t, m, n, s as usize);
                let clamped = p.max(LOG_CLAMP);
                ce_total -= w * clamped.ln();
                if p > LOG_CLAMP {
                    let o = grad.offset(t, m, n) + s as usize;
                    grad.data_mut()[o] -= config.lambda_ce * w / (p * count as f64);
                }
            }
        }
    }
    let ce = ce_total / count as f64;

    // inconsistency part
    let computed;
    let masks = match frozen_masks {
        Some(m) => m,
        None => {
            computed = compute_masks(preds, labels)?;
            &computed
        }
    };
    let incons = inconsistency_loss_with_masks(preds, masks, config.difference);
    if masks.omega_norm > 0 {
        let scale = config.lambda_incons / masks.omega_norm as f64;
        for &(t, m, n, s) in &masks.active {
            let d = preds.get(t, m, n, s) - preds.get(t + 1, m, n, s);
            let dd = match config.difference {
                Difference::Squared => 2.0 * d,
                Difference::Absolute => {
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
            };
            let o1 = grad.offset(t, m, n) + s;
            let o2 = grad.offset(t + 1, m, n) + s;
            grad.data_mut()[o1] += scale * dd;
            grad.data_mut()[o2] -= scale * dd;
        }
    }

    Ok((
        LossComponents {
            total: config.lambda_ce * ce + config.lambda_incons * incons,
            ce,
            incons,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_pixel_volume(p1: [f64; 2], p2: [f64; 2]) -> PredictionVolume {
        PredictionVolume::from_vec(2, 1, 1, 2, vec![p1[0], p1[1], p2[0], p2[1]]).unwrap()
    }

    #[test]
    fn indicator_basics() {
        assert_eq!(indicator(true), 1);
        assert_eq!(indicator(false), 0);
        assert_eq!(indicator(3 == 3), 1);
    }

    #[test]
    fn psi_cases() {
        assert_eq!(psi(0, &[0.9, 0.1], 0, &[0.4, 0.6]), 1); // first correct
        assert_eq!(psi(0, &[0.1, 0.9], 0, &[0.4, 0.6]), 0); // both wrong
        assert_eq!(psi(0, &[0.9, 0.1], 0, &[0.8, 0.2]), 1); // both correct, clamped
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.6, 0.6]), 1);
    }

    #[test]
    fn omega_norm_hand_case() {
        // frame1 = [[1,2],[1,IGNORE]], frame2 = [[1,2],[3,1]] -> 2 pairs
        let labels =
            LabelVolume::from_vec(2, 2, 2, vec![1, 2, 1, IGNORE, 1, 2, 3, 1]).unwrap();
        assert_eq!(omega_norm(&labels).unwrap(), 2);
    }

    #[test]
    fn omega_norm_constant_and_ignore() {
        let labels = LabelVolume::new(3, 4, 4, 2);
        assert_eq!(omega_norm(&labels).unwrap(), 32);
        let ignored = LabelVolume::new(3, 4, 4, IGNORE);
        assert_eq!(omega_norm(&ignored).unwrap(), 0);
        assert!(omega_norm(&LabelVolume::new(1, 2, 2, 0)).is_err());
    }

    #[test]
    fn omega_vcc_cases() {
        let labels = LabelVolume::new(2, 1, 1, 0);
        let preds = single_pixel_volume([0.9, 0.1], [0.4, 0.6]);
        assert_eq!(omega_vcc(&labels, &preds, 0, 0, 0), 1);

        // ground truth changes between frames
        let moving = LabelVolume::from_vec(2, 1, 1, vec![0, 1]).unwrap();
        assert_eq!(omega_vcc(&moving, &preds, 0, 0, 0), 0);

        // IGNORE at t
        let ignored = LabelVolume::from_vec(2, 1, 1, vec![IGNORE, 0]).unwrap();
        assert_eq!(omega_vcc(&ignored, &preds, 0, 0, 0), 0);
    }

    #[test]
    fn inconsistency_single_pixel_worked_example() {
        let labels = LabelVolume::new(2, 1, 1, 0);
        let preds = single_pixel_volume([0.9, 0.1], [0.4, 0.6]);
        let sq = inconsistency_loss(&preds, &labels, Difference::Squared).unwrap();
        let ab = inconsistency_loss(&preds, &labels, Difference::Absolute).unwrap();
        assert!((sq - 0.25).abs() < 1e-15);
        assert!((ab - 0.5).abs() < 1e-15);
    }

    #[test]
    fn inconsistency_gated_off_when_both_wrong() {
        let labels = LabelVolume::new(2, 1, 1, 0);
        let preds = single_pixel_volume([0.1, 0.9], [0.4, 0.6]);
        let loss = inconsistency_loss(&preds, &labels, Difference::Squared).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn inconsistency_zero_for_time_constant_predictions() {
        let labels = LabelVolume::new(2, 2, 2, 1);
        let mut preds = PredictionVolume::zeros(2, 2, 2, 3);
        for t in 0..2 {
            for m in 0..2 {
                for n in 0..2 {
                    let o = preds.offset(t, m, n);
                    preds.data_mut()[o..o + 3].copy_from_slice(&[0.2, 0.7, 0.1]);
                }
            }
        }
        assert_eq!(inconsistency_loss(&preds, &labels, Difference::Squared).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        // probability 1 on the true class -> 0
        let labels = LabelVolume::new(1, 1, 1, 0);
        let perfect = PredictionVolume::from_vec(1, 1, 1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&perfect, &labels, None).unwrap(), 0.0);

        // uniform two-class -> ln 2
        let uniform = PredictionVolume::from_vec(1, 1, 1, 2, vec![0.5, 0.5]).unwrap();
        let ce = cross_entropy(&uniform, &labels, None).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);

        // doubling the weight of the only class doubles the loss
        let ce2 = cross_entropy(&uniform, &labels, Some(&[2.0, 1.0])).unwrap();
        assert!((ce2 - 2.0 * ce).abs() < 1e-15);

        // all IGNORE -> error
        let ignored = LabelVolume::new(1, 1, 1, IGNORE);
        assert!(cross_entropy(&uniform, &ignored, None).is_err());
    }

    #[test]
    fn total_loss_composition() {
        let labels = LabelVolume::new(2, 1, 1, 0);
        let preds = single_pixel_volume([0.9, 0.1], [0.4, 0.6]);
        let config = LossConfig { lambda_ce: 1.0, lambda_incons: 10.0, ..Default::default() };
        let out = total_loss(&preds, &labels, &config).unwrap();
        let ce = -(0.9f64.ln() + 0.4f64.ln()) / 2.0;
        assert!((out.ce - ce).abs() < 1e-15);
        assert!((out.incons - 0.25).abs() < 1e-15);
        assert!((out.total - (ce + 2.5)).abs() < 1e-14);

        // lambda_incons = 0 -> pure cross entropy
        let ce_only = LossConfig { lambda_incons: 0.0, ..config };
        let out = total_loss(&preds, &labels, &ce_only).unwrap();
        assert_eq!(out.total, out.ce);
    }

    #[test]
    fn perfect_constant_prediction_has_zero_loss() {
        let labels = LabelVolume::new(3, 2, 2, 1);
        let mut preds = PredictionVolume::zeros(3, 2, 2, 2);
        for k in 0..preds.data().len() / 2 {
            preds.data_mut()[2 * k + 1] = 1.0;
        }
        let out = total_loss(&preds, &labels, &LossConfig::default()).unwrap();
        assert_eq!(out.total, 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use crate::gradcheck::grad_check;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for seed in 0..3u8 {
            let (t, h, w, s) = (2, 4, 4, 3);
            // random labels with a sprinkling of IGNORE
            let mut labels = LabelVolume::new(t, h, w, 0);
            for v in labels.data_mut() {
                let r: u8 = rand::Rng::gen_range(&mut rng, 0..10);
                *v = if r == 9 { IGNORE } else { r % s as u8 };
            }
            // random simplex predictions
            let logits = Tensor::uniform(&[t * h * w * s], 1.5, &mut rng);
            let mut preds = PredictionVolume::zeros(t, h, w, s);
            for px in 0..t * h * w {
                let chunk = &logits.data()[px * s..(px + 1) * s];
                let mx = chunk.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = chunk.iter().map(|v| (v - mx).exp()).collect();
                let total: f64 = exps.iter().sum();
                for (k, e) in exps.iter().enumerate() {
                    preds.data_mut()[px * s + k] = e / total;
                }
            }
            let config = LossConfig {
                lambda_incons: 10.0,
                difference: if seed % 2 == 0 { Difference::Squared } else { Difference::Absolute },
                ..Default::default()
            };
            let masks = compute_masks(&preds, &labels).unwrap();
            let (_, grad) = total_loss_grad(&preds, &labels, &config, Some(&masks)).unwrap();
            let x = Tensor::from_vec(&[t * h * w * s], preds.data().to_vec()).unwrap();
            let g = Tensor::from_vec(&[t * h * w * s], grad.data().to_vec()).unwrap();
            let labels2 = labels.clone();
            let cfg2 = config.clone();
            let masks2 = masks.clone();
            let err = grad_check(
                move |xt| {
                    let pv =
                        PredictionVolume::from_vec(t, h, w, s, xt.data().to_vec()).unwrap();
                    let ce = cross_entropy(&pv, &labels2, cfg2.class_weights.as_deref())?;
                    let inc = inconsistency_loss_with_masks(&pv, &masks2, cfg2.difference);
                    Ok(cfg2.lambda_ce * ce + cfg2.lambda_incons * inc)
                },
                &g,
                &x,
                1e-6,
                None,
            )
            .unwrap();
            assert!(err <= 1e-4, "seed {} err {}", seed, err);
        }
    }
}
