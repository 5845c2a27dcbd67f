//! Evaluation metrics: mIoU, pixel accuracy, and the temporal consistency
//! pair (Cons, ConsW), plus binary inconsistency maps for visualization.
//!
//! The temporal metrics share their denominator predicate with the loss
//! normalizer (`losses::validity_pair_check` / `omega_norm`): a pixel pair
//! qualifies when it is labeled at both frames and the label does not change.

use crate::error::{Error, Result};
use crate::losses::{argmax, omega_norm, validity_pair_check, LabelVolume, PredictionVolume, IGNORE};

/// How the temporal denominator is formed: `Raw` uses the validity/consistency
/// predicate directly; `Dilated` additionally excludes pixels within one step
/// (3x3 dilation) of any ground-truth change or invalid pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistencyMode {
    Raw,
    Dilated,
}

impl ConsistencyMode {
    pub fn label(self) -> &'static str {
        match self {
            ConsistencyMode::Raw => "raw",
            ConsistencyMode::Dilated => "dilated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "raw" => Ok(ConsistencyMode::Raw),
            "dilated" => Ok(ConsistencyMode::Dilated),
            other => Err(Error::InvalidConfig(format!("unknown consistency mode '{}'", other))),
        }
    }
}

/// Square confusion matrix over valid pixels; rows = ground truth, columns =
/// prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    #[inline]
    pub fn bump(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Accumulates prediction/GT pairs over valid pixels only.
pub fn confusion_matrix(
    pred_labels: &LabelVolume,
    labels: &LabelVolume,
    classes: usize,
) -> Result<ConfusionMatrix> {
    if pred_labels.frames != labels.frames
        || pred_labels.height != labels.height
        || pred_labels.width != labels.width
    {
        return Err(Error::ShapeMismatch("prediction/label volume mismatch".into()));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &g) in pred_labels.data().iter().zip(labels.data()) {
        if g == IGNORE {
            continue;
        }
        if g as usize >= classes || (p != IGNORE && p as usize >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {} or prediction {} out of range for {} classes",
                g, p, classes
            )));
        }
        if p == IGNORE {
            return Err(Error::InvalidArgument("IGNORE in predicted labels".into()));
        }
        cm.bump(g as usize, p as usize);
    }
    Ok(cm)
}

/// Mean intersection-over-union and overall accuracy, in percent. Classes
/// absent from both ground truth and prediction are excluded from the mean.
pub fn miou_acc(cm: &ConfusionMatrix) -> Result<(f64, f64, Vec<Option<f64>>)> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    let mut per_class = Vec::with_capacity(cm.classes);
    let mut iou_sum = 0.0;
    let mut iou_count = 0u32;
    let mut trace = 0u64;
    for c in 0..cm.classes {
        let tp = cm.get(c, c);
        trace += tp;
        let row: u64 = (0..cm.classes).map(|k| cm.get(c, k)).sum();
        let col: u64 = (0..cm.classes).map(|k| cm.get(k, c)).sum();
        if row == 0 && col == 0 {
            per_class.push(None);
            continue;
        }
        let iou = tp as f64 / (row + col - tp) as f64;
        per_class.push(Some(100.0 * iou));
        iou_sum += iou;
        iou_count += 1;
    }
    let miou = 100.0 * iou_sum / iou_count as f64;
    let acc = 100.0 * trace as f64 / total as f64;
    Ok((miou, acc, per_class))
}

/// Counts over qualifying pixel pairs: (denominator, consistently predicted,
/// consistently but wrongly predicted).
pub fn consistency_counts(
    preds: &PredictionVolume,
    labels: &LabelVolume,
    mode: ConsistencyMode,
) -> Result<(u64, u64, u64)> {
    if labels.frames != preds.frames
        || labels.height != preds.height
        || labels.width != preds.width
    {
        return Err(Error::ShapeMismatch("prediction/label volume mismatch".into()));
    }
    if labels.frames < 2 {
        return Err(Error::InvalidArgument("temporal metrics need at least 2 frames".into()));
    }
    let (mut denom, mut cons, mut cons_wrong) = (0u64, 0u64, 0u64);
    for t in 0..labels.frames - 1 {
        let excluded = match mode {
            ConsistencyMode::Raw => None,
            ConsistencyMode::Dilated => Some(gt_change_mask(labels, t)),
        };
        for m in 0..labels.height {
            for n in 0..labels.width {
                let qualifies = match &excluded {
                    None => validity_pair_check(labels, t, m, n),
                    Some(mask) => !mask[m * labels.width + n],
                };
                if !qualifies {
                    continue;
                }
                denom += 1;
                let a = argmax(preds.pixel(t, m, n));
                let b = argmax(preds.pixel(t + 1, m, n));
                if a == b {
                    cons += 1;
                    if a != labels.get(t, m, n) as usize {
                        cons_wrong += 1;
                    }
                }
            }
        }
    }
    Ok((denom, cons, cons_wrong))
}

/// (Cons %, ConsW %) over GT-consistent valid pixel pairs.
pub fn consistency(
    preds: &PredictionVolume,
    labels: &LabelVolume,
    mode: ConsistencyMode,
) -> Result<(f64, f64)> {
    let (denom, cons, cons_wrong) = consistency_counts(preds, labels, mode)?;
    if denom == 0 {
        return Err(Error::InvalidArgument(
            "no valid, GT-consistent pixel pairs (empty denominator)".into(),
        ));
    }
    Ok((100.0 * cons as f64 / denom as f64, 100.0 * cons_wrong as f64 / denom as f64))
}

/// Binary mask of ground-truth change between frames t and t+1 (changed or
/// invalid at either frame), dilated once with a 3x3 square element.
pub fn gt_change_mask(labels: &LabelVolume, t: usize) -> Vec<bool> {
    let (h, w) = (labels.height, labels.width);
    let mut raw = vec![false; h * w];
    for m in 0..h {
        for n in 0..w {
            raw[m * w + n] = !validity_pair_check(labels, t, m, n);
        }
    }
    dilate3x3(&raw, h, w)
}

fn dilate3x3(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for m in 0..h {
        for n in 0..w {
            if !mask[m * w + n] {
                continue;
            }
            for dm in -1i64..=1 {
                for dn in -1i64..=1 {
                    let (mm, nn) = (m as i64 + dm, n as i64 + dn);
                    if mm >= 0 && mm < h as i64 && nn >= 0 && nn < w as i64 {
                        out[mm as usize * w + nn as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Per-pair visualization masks: where the prediction flips between frames t
/// and t+1, and where the ground truth changes (dilated).
pub fn inconsistency_maps(
    preds: &PredictionVolume,
    labels: &LabelVolume,
    t: usize,
) -> Result<(Vec<bool>, Vec<bool>)> {
    if t + 1 >= preds.frames {
        return Err(Error::InvalidArgument(format!(
            "frame pair index {} out of range (T = {})",
            t, preds.frames
        )));
    }
    if labels.frames != preds.frames
        || labels.height != preds.height
        || labels.width != preds.width
    {
        return Err(Error::ShapeMismatch("prediction/label volume mismatch".into()));
    }
    let (h, w) = (preds.height, preds.width);
    let mut pred_incons = vec![false; h * w];
    for m in 0..h {
        for n in 0..w {
            pred_incons[m * w + n] =
                argmax(preds.pixel(t, m, n)) != argmax(preds.pixel(t + 1, m, n));
        }
    }
    Ok((pred_incons, gt_change_mask(labels, t)))
}

/// Aggregated evaluation over a set of scenes.
#[derive(Debug, Clone)]
pub struct EvalAccumulator {
    pub classes: usize,
    pub mode: ConsistencyMode,
    /// Label of the ground-truth coverage used for the spatial metrics
    /// ("dense" or "sparse(stride)"), recorded in the report.
    pub gt_coverage: String,
    cm: ConfusionMatrix,
    valid: u64,
    gt_consistent: u64,
    pred_consistent: u64,
    pred_consistent_wrong: u64,
    scenes: u64,
}

impl EvalAccumulator {
    pub fn new(classes: usize, mode: ConsistencyMode) -> Self {
        EvalAccumulator {
            classes,
            mode,
            gt_coverage: "dense".into(),
            cm: ConfusionMatrix::new(classes),
            valid: 0,
            gt_consistent: 0,
            pred_consistent: 0,
            pred_consistent_wrong: 0,
            scenes: 0,
        }
    }

    /// Adds one scene. `spatial_labels` drives the confusion matrix (possibly
    /// a sparse view); `temporal_labels` drives the consistency denominator.
    pub fn add_scene_split(
        &mut self,
        preds: &PredictionVolume,
        spatial_labels: &LabelVolume,
        temporal_labels: &LabelVolume,
    ) -> Result<()> {
        let pred_labels = preds.argmax_labels();
        let cm = confusion_matrix(&pred_labels, spatial_labels, self.classes)?;
        self.valid += cm.total();
        self.cm.merge(&cm);
        let (denom, cons, wrong) = consistency_counts(preds, temporal_labels, self.mode)?;
        debug_assert_eq!(
            self.mode.label() != "raw" || denom == omega_norm(temporal_labels)?,
            true
        );
        self.gt_consistent += denom;
        self.pred_consistent += cons;
        self.pred_consistent_wrong += wrong;
        self.scenes += 1;
        Ok(())
    }

    pub fn add_scene(&mut self, preds: &PredictionVolume, labels: &LabelVolume) -> Result<()> {
        self.add_scene_split(preds, labels, labels)
    }

    pub fn finalize(&self) -> Result<EvalReport> {
        if self.scenes == 0 {
            return Err(Error::InvalidArgument("no scenes evaluated".into()));
        }
        let (miou, acc, per_class_iou) = miou_acc(&self.cm)?;
        if self.gt_consistent == 0 {
            return Err(Error::InvalidArgument(
                "no valid, GT-consistent pixel pairs across all scenes".into(),
            ));
        }
        let cons = 100.0 * self.pred_consistent as f64 / self.gt_consistent as f64;
        let consw = 100.0 * self.pred_consistent_wrong as f64 / self.gt_consistent as f64;
        Ok(EvalReport {
            miou,
            acc,
            cons,
            consw,
            per_class_iou,
            valid: self.valid,
            gt_consistent: self.gt_consistent,
            pred_consistent: self.pred_consistent,
            pred_consistent_wrong: self.pred_consistent_wrong,
            scenes_evaluated: self.scenes,
            consistency_mode: self.mode,
            gt_coverage: self.gt_coverage.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub acc: f64,
    pub cons: f64,
    pub consw: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub valid: u64,
    pub gt_consistent: u64,
    pub pred_consistent: u64,
    pub pred_consistent_wrong: u64,
    pub scenes_evaluated: u64,
    pub consistency_mode: ConsistencyMode,
    pub gt_coverage: String,
}

impl EvalReport {
    /// Machine-readable key=value block; deterministic formatting.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("scenes={}\n", self.scenes_evaluated));
        s.push_str(&format!("gt_coverage={}\n", self.gt_coverage));
        s.push_str(&format!("consistency_mode={}\n", self.consistency_mode.label()));
        s.push_str(&format!("valid_pixels={}\n", self.valid));
        s.push_str(&format!("gt_consistent_pairs={}\n", self.gt_consistent));
        s.push_str(&format!("pred_consistent_pairs={}\n", self.pred_consistent));
        s.push_str(&format!("pred_consistent_wrong_pairs={}\n", self.pred_consistent_wrong));
        s.push_str(&format!("miou={:.6}\n", self.miou));
        s.push_str(&format!("acc={:.6}\n", self.acc));
        s.push_str(&format!("cons={:.6}\n", self.cons));
        s.push_str(&format!("consw={:.6}\n", self.consw));
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => s.push_str(&format!("iou_class_{}={:.6}\n", c, v)),
                None => s.push_str(&format!("iou_class_{}=absent\n", c)),
            }
        }
        s
    }

    /// Human-readable table row plus counts.
    pub fn to_text(&self) -> String {
        format!(
            "scenes: {}  gt: {} ({})\nmIoU {:.2}  Acc {:.2}  Cons {:.2}  ConsW {:.2}\n",
            self.scenes_evaluated,
            self.gt_coverage,
            self.consistency_mode.label(),
            self.miou,
            self.acc,
            self.cons,
            self.consw
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_preds(labels: &LabelVolume, classes: usize) -> PredictionVolume {
        let mut p = PredictionVolume::zeros(labels.frames, labels.height, labels.width, classes);
        for t in 0..labels.frames {
            for m in 0..labels.height {
                for n in 0..labels.width {
                    let s = labels.get(t, m, n);
                    let s = if s == IGNORE { 0 } else { s as usize };
                    let o = p.offset(t, m, n);
                    p.data_mut()[o + s] = 1.0;
                }
            }
        }
        p
    }

    #[test]
    fn confusion_perfect_is_diagonal() {
        let mut labels = LabelVolume::new(1, 2, 2, 0);
        labels.set(0, 0, 1, 1);
        labels.set(0, 1, 0, 2);
        let cm = confusion_matrix(&labels, &labels, 3).unwrap();
        assert_eq!(cm.get(0, 0), 2);
        assert_eq!(cm.get(1, 1), 1);
        assert_eq!(cm.get(2, 2), 1);
        assert_eq!(cm.total(), 4);
        let (miou, acc, _) = miou_acc(&cm).unwrap();
        assert_eq!((miou, acc), (100.0, 100.0));
    }

    #[test]
    fn confusion_ignores_ignore() {
        let labels = LabelVolume::new(1, 2, 2, IGNORE);
        let preds = LabelVolume::new(1, 2, 2, 0);
        let cm = confusion_matrix(&preds, &labels, 3).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(miou_acc(&cm).is_err());
    }

    #[test]
    fn miou_binary_closed_form() {
        // fg: 50 TP, 25 FN (gt fg, pred bg), 25 FP; bg: 100 TN
        let mut cm = ConfusionMatrix::new(2);
        for _ in 0..50 {
            cm.bump(1, 1);
        }
        for _ in 0..25 {
            cm.bump(1, 0);
        }
        for _ in 0..25 {
            cm.bump(0, 1);
        }
        for _ in 0..100 {
            cm.bump(0, 0);
        }
        let (miou, acc, per_class) = miou_acc(&cm).unwrap();
        let iou_fg = 50.0 / 100.0;
        let iou_bg = 100.0 / 150.0;
        assert!((miou - 100.0 * (iou_fg + iou_bg) / 2.0).abs() < 1e-12);
        assert!((acc - 75.0).abs() < 1e-12);
        assert!((per_class[1].unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn miou_excludes_absent_classes() {
        let mut cm = ConfusionMatrix::new(3);
        cm.bump(0, 0);
        cm.bump(1, 1);
        let (miou, _, per_class) = miou_acc(&cm).unwrap();
        assert_eq!(miou, 100.0);
        assert!(per_class[2].is_none());
    }

    #[test]
    fn consistency_constant_prediction() {
        let labels = LabelVolume::new(3, 2, 2, 1);
        // constant in time, always class 0 (wrong everywhere)
        let pred_labels = LabelVolume::new(3, 2, 2, 0);
        let preds = one_hot_preds(&pred_labels, 2);
        let (cons, consw) = consistency(&preds, &labels, ConsistencyMode::Raw).unwrap();
        assert_eq!(cons, 100.0);
        assert_eq!(consw, 100.0);
    }

    #[test]
    fn consistency_hand_case_one_flip() {
        // T=2, 2x2; one pixel IGNORE at t=0 -> 3 qualifying pairs; one
        // prediction flips -> cons = 2/3.
        let mut labels = LabelVolume::new(2, 2, 2, 1);
        labels.set(0, 1, 1, IGNORE);
        let mut pred_labels = LabelVolume::new(2, 2, 2, 1);
        pred_labels.set(1, 0, 0, 0);
        let preds = one_hot_preds(&pred_labels, 2);
        let (denom, cons, _) =
            consistency_counts(&preds, &labels, ConsistencyMode::Raw).unwrap();
        assert_eq!((denom, cons), (3, 2));
        let (pct, _) = consistency(&preds, &labels, ConsistencyMode::Raw).unwrap();
        assert!((pct - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn raw_denominator_equals_omega_norm() {
        let mut labels = LabelVolume::new(3, 4, 4, 2);
        labels.set(0, 1, 1, IGNORE);
        labels.set(1, 2, 2, 0);
        labels.set(2, 3, 3, 1);
        let preds = one_hot_preds(&labels, 3);
        let (denom, _, _) = consistency_counts(&preds, &labels, ConsistencyMode::Raw).unwrap();
        assert_eq!(denom, omega_norm(&labels).unwrap());
    }

    #[test]
    fn dilated_mode_shrinks_denominator() {
        let mut labels = LabelVolume::new(2, 5, 5, 1);
        labels.set(1, 2, 2, 0); // one changed pixel
        let preds = one_hot_preds(&labels, 2);
        let (raw, _, _) = consistency_counts(&preds, &labels, ConsistencyMode::Raw).unwrap();
        let (dil, _, _) = consistency_counts(&preds, &labels, ConsistencyMode::Dilated).unwrap();
        assert_eq!(raw, 24);
        assert_eq!(dil, 25 - 9);
    }

    #[test]
    fn inconsistency_map_cases() {
        let mut labels = LabelVolume::new(2, 5, 5, 1);
        let preds = one_hot_preds(&labels, 2);
        let (pm, gm) = inconsistency_maps(&preds, &labels, 0).unwrap();
        assert!(pm.iter().all(|&v| !v));
        assert!(gm.iter().all(|&v| !v));

        labels.set(1, 2, 2, 0);
        let (_, gm) = inconsistency_maps(&preds, &labels, 0).unwrap();
        let white: Vec<usize> = gm.iter().enumerate().filter(|(_, &v)| v).map(|(k, _)| k).collect();
        let expected: Vec<usize> = (1..=3)
            .flat_map(|m| (1..=3).map(move |n| m * 5 + n))
            .collect();
        assert_eq!(white, expected);

        assert!(inconsistency_maps(&preds, &labels, 1).is_err());
    }

    #[test]
    fn metrics_invariant_under_class_relabeling() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (t, h, w, s) = (3, 4, 4, 4);
        let mut labels = LabelVolume::new(t, h, w, 0);
        for v in labels.data_mut() {
            *v = rng.gen_range(0..s as u8);
        }
        let mut preds = PredictionVolume::zeros(t, h, w, s);
        for v in preds.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let perm = [2usize, 0, 3, 1];

        let mut labels2 = labels.clone();
        for v in labels2.data_mut() {
            *v = perm[*v as usize] as u8;
        }
        let mut preds2 = PredictionVolume::zeros(t, h, w, s);
        for px in 0..t * h * w {
            for c in 0..s {
                preds2.data_mut()[px * s + perm[c]] = preds.data()[px * s + c];
            }
        }

        let mut acc1 = EvalAccumulator::new(s, ConsistencyMode::Raw);
        acc1.add_scene(&preds, &labels).unwrap();
        let r1 = acc1.finalize().unwrap();
        let mut acc2 = EvalAccumulator::new(s, ConsistencyMode::Raw);
        acc2.add_scene(&preds2, &labels2).unwrap();
        let r2 = acc2.finalize().unwrap();
        assert!((r1.miou - r2.miou).abs() < 1e-12);
        assert!((r1.acc - r2.acc).abs() < 1e-12);
        assert_eq!(r1.cons, r2.cons);
        assert_eq!(r1.consw, r2.consw);
    }

    #[test]
    fn report_is_deterministic_and_well_formed() {
        let labels = LabelVolume::new(2, 2, 2, 1);
        let preds = one_hot_preds(&labels, 2);
        let build = || {
            let mut acc = EvalAccumulator::new(2, ConsistencyMode::Raw);
            acc.add_scene(&preds, &labels).unwrap();
            acc.finalize().unwrap()
        };
        let a = build();
        let b = build();
        assert_eq!(a.to_key_values(), b.to_key_values());
        assert!(a.to_key_values().contains("cons=100.000000"));
        assert!(a.consw <= a.cons);
        assert_eq!(a.miou, 100.0);
        assert_eq!(a.consw, 0.0);
    }
}
