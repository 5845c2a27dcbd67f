//! Network architectures: SSNet (dilated conv stack), VSSNet (SSNet with the
//! last conv replaced by a ConvLSTM), and MiniEsp, an ESP-style
//! encoder-decoder with four optional ConvLSTM placements (L1a-L1d).
//!
//! MiniEsp decoder widths are derived from the class count so that the four
//! placements, with their per-position default filter sizes (L1a 7x7,
//! L1b 3x3, L1c 5x5, L1d 9x9), have pairwise parameter counts within 10% —
//! the comparisons between positions are then about placement, not capacity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::convlstm::{
    param_count, step, zero_state, CellVars, ConvLstmCell, ConvLstmConfig, LstmState,
    StateActivation, Variant,
};
use crate::error::{Error, Result};
use crate::kernels::ConvKind;
use crate::losses::PredictionVolume;
use crate::tape::Var;
use crate::tensor::DualTensorBase;
use crate::{DualTensor, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    SsNet,
    VssNet,
    MiniEsp,
}

impl Architecture {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ssnet" => Ok(Architecture::SsNet),
            "vssnet" => Ok(Architecture::VssNet),
            "miniesp" | "mini-esp" => Ok(Architecture::MiniEsp),
            other => Err(Error::InvalidConfig(format!("unknown architecture '{}'", other))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Architecture::SsNet => "SSNet",
            Architecture::VssNet => "VSSNet",
            Architecture::MiniEsp => "MiniEsp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LstmPosition {
    None,
    L1a,
    L1b,
    L1c,
    L1d,
}

impl LstmPosition {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(LstmPosition::None),
            "l1a" => Ok(LstmPosition::L1a),
            "l1b" => Ok(LstmPosition::L1b),
            "l1c" => Ok(LstmPosition::L1c),
            "l1d" => Ok(LstmPosition::L1d),
            other => Err(Error::InvalidConfig(format!("unknown lstm position '{}'", other))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LstmPosition::None => "None",
            LstmPosition::L1a => "L1a",
            LstmPosition::L1b => "L1b",
            LstmPosition::L1c => "L1c",
            LstmPosition::L1d => "L1d",
        }
    }

    /// Per-position default filter size, chosen so placements are
    /// parameter-matched.
    pub fn default_filter(self) -> usize {
        match self {
            LstmPosition::None => 3,
            LstmPosition::L1a => 7,
            LstmPosition::L1b => 3,
            LstmPosition::L1c => 5,
            LstmPosition::L1d => 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub lstm_position: LstmPosition,
    /// Filter size of the recurrent cell; None picks the per-position (or
    /// architecture) default.
    pub lstm_filter: Option<usize>,
    pub lstm_variant: Variant,
    pub state_activation: StateActivation,
    pub num_classes: usize,
    pub base_channels: usize,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, num_classes: usize) -> Self {
        ModelSpec {
            architecture,
            lstm_position: LstmPosition::None,
            lstm_filter: None,
            lstm_variant: Variant::Standard,
            state_activation: StateActivation::Prelu,
            num_classes,
            base_channels: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.base_channels == 0 {
            return Err(Error::InvalidConfig("num_classes and base_channels must be positive".into()));
        }
        if let Some(f) = self.lstm_filter {
            if f % 2 == 0 || f == 0 {
                return Err(Error::InvalidConfig(format!("lstm_filter must be odd, got {}", f)));
            }
        }
        match self.architecture {
            Architecture::SsNet | Architecture::VssNet => {
                if self.lstm_position != LstmPosition::None {
                    return Err(Error::InvalidConfig(format!(
                        "{} does not take an lstm_position (the VSSNet cell is implicit)",
                        self.architecture.label()
                    )));
                }
            }
            Architecture::MiniEsp => {}
        }
        // the depthwise variants need equal in/out channels, which only the
        // L1a placement and the VSSNet feature-level cell provide
        if self.lstm_variant != Variant::Standard {
            let ok = matches!(self.architecture, Architecture::VssNet)
                || (self.architecture == Architecture::MiniEsp
                    && self.lstm_position == LstmPosition::L1a);
            if !ok {
                return Err(Error::InvalidConfig(
                    "depthwise ConvLSTM variants require equal channels: use VSSNet or MiniEsp L1a"
                        .into(),
                ));
            }
        }
        Ok(())
    }

    /// Flat key=value block (one pair per line), embedded in checkpoints and
    /// reports.
    pub fn to_block(&self) -> String {
        let filter = self.effective_lstm_filter();
        format!(
            "architecture={}\nlstm_position={}\nlstm_filter={}\nlstm_variant={}\nstate_activation={}\nnum_classes={}\nbase_channels={}\n",
            self.architecture.label(),
            self.lstm_position.label(),
            filter,
            self.lstm_variant.label(),
            match self.state_activation {
                StateActivation::Tanh => "tanh",
                StateActivation::Prelu => "prelu",
            },
            self.num_classes,
            self.base_channels
        )
    }

    /// Parses key=value pairs separated by commas or newlines. Unknown keys
    /// are rejected; `architecture` and `num_classes` are required.
    pub fn parse(text: &str) -> Result<Self> {
        let mut architecture = None;
        let mut spec_fields: Vec<(String, String)> = Vec::new();
        for raw in text.split(|c| c == ',' || c == '\n') {
            let pair = raw.trim();
            if pair.is_empty() {
                continue;
            }
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got '{}'", pair)))?;
            if k.trim() == "architecture" {
                architecture = Some(Architecture::parse(v.trim())?);
            } else {
                spec_fields.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        let architecture = architecture
            .ok_or_else(|| Error::InvalidConfig("model spec is missing 'architecture'".into()))?;
        let mut spec = ModelSpec::new(architecture, 0);
        let mut have_classes = false;
        for (k, v) in spec_fields {
            match k.as_str() {
                "lstm_position" => spec.lstm_position = LstmPosition::parse(&v)?,
                "lstm_filter" => {
                    spec.lstm_filter = Some(v.parse().map_err(|_| {
                        Error::InvalidConfig(format!("bad lstm_filter '{}'", v))
                    })?)
                }
                "lstm_variant" => spec.lstm_variant = Variant::parse(&v)?,
                "state_activation" => {
                    spec.state_activation = match v.to_ascii_lowercase().as_str() {
                        "tanh" => StateActivation::Tanh,
                        "prelu" => StateActivation::Prelu,
                        other => {
                            return Err(Error::InvalidConfig(format!(
                                "unknown state_activation '{}'",
                                other
                            )))
                        }
                    }
                }
                "num_classes" => {
                    spec.num_classes = v
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("bad num_classes '{}'", v)))?;
                    have_classes = true;
                }
                "base_channels" => {
                    spec.base_channels = v
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("bad base_channels '{}'", v)))?
                }
                other => {
                    return Err(Error::InvalidConfig(format!("unknown model spec key '{}'", other)))
                }
            }
        }
        if !have_classes {
            return Err(Error::InvalidConfig("model spec is missing 'num_classes'".into()));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn effective_lstm_filter(&self) -> usize {
        self.lstm_filter.unwrap_or(match self.architecture {
            Architecture::VssNet => 3,
            _ => self.lstm_position.default_filter(),
        })
    }

    pub fn has_cell(&self) -> bool {
        self.architecture == Architecture::VssNet || self.lstm_position != LstmPosition::None
    }
}

/// MiniEsp channel widths derived from the class count (see module docs).
#[derive(Debug, Clone, Copy)]
pub struct EspWidths {
    /// encoder width at full and half resolution
    pub w1: usize,
    /// encoder width at quarter resolution
    pub w2: usize,
    /// deepest decoder reduction output (quarter res)
    pub d_deep: usize,
    /// mid decoder reduction output (half res)
    pub d_mid: usize,
    /// pre-classifier mixing width (full res)
    pub mix: usize,
}

pub fn esp_widths(num_classes: usize) -> EspWidths {
    let s = num_classes as f64;
    let mult4 = |x: f64| (4.0 * (x / 4.0).round()).max(4.0) as usize;
    EspWidths {
        w1: mult4(2.42 * s),
        w2: mult4(1.92 * s),
        d_deep: ((s / 2.0).round() as usize).max(1),
        d_mid: num_classes,
        mix: (9.89 * s).round() as usize,
    }
}

#[derive(Debug, Clone)]
enum Piece {
    Conv { name: String, weight: DualTensor, bias: DualTensor, dilation: usize },
    Prelu { name: String, slope: DualTensor },
}

impl Piece {
    fn named(&self) -> Vec<(String, &DualTensor)> {
        match self {
            Piece::Conv { name, weight, bias, .. } => vec![
                (format!("{name}.weight"), weight),
                (format!("{name}.bias"), bias),
            ],
            Piece::Prelu { name, slope } => vec![(format!("{name}.prelu"), slope)],
        }
    }

    fn named_mut(&mut self) -> Vec<(String, &mut DualTensor)> {
        match self {
            Piece::Conv { name, weight, bias, .. } => vec![
                (format!("{name}.weight"), weight),
                (format!("{name}.bias"), bias),
            ],
            Piece::Prelu { name, slope } => vec![(format!("{name}.prelu"), slope)],
        }
    }
}

#[derive(Debug, Clone)]
enum PieceVars {
    Conv { w: Var, b: Var, dilation: usize },
    Prelu { slope: Var },
}

/// Tape handles for all model parameters; create one per tape with `bind`.
pub struct ModelVars {
    pieces: Vec<PieceVars>,
    cell: Option<CellVars>,
    fuse: Option<Var>,
}

/// A built network: ordered conv/activation pieces plus an optional
/// recurrent cell. Parameter names are stable for a fixed spec.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pieces: Vec<Piece>,
    pub cell: Option<ConvLstmCell>,
    /// VSSNet only: per-channel gain on the cell's residual contribution
    /// (`proj(x + gain ⊙ h)`). Small init keeps a warm-started model close
    /// to its single-frame encoder until the cell has learned something.
    fuse: Option<DualTensor>,
}

/// Sequentially consumes bound pieces in the order `build` created them.
struct Cursor<'a> {
    vars: &'a [PieceVars],
    k: usize,
}

impl<'a> Cursor<'a> {
    fn conv(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &self.vars[self.k] {
            PieceVars::Conv { w, b, dilation } => {
                self.k += 1;
                tape.conv2d(x, *w, Some(*b), *dilation, ConvKind::Full)
            }
            PieceVars::Prelu { .. } => unreachable!("piece order mismatch"),
        }
    }

    fn prelu(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &self.vars[self.k] {
            PieceVars::Prelu { slope } => {
                self.k += 1;
                tape.prelu(x, *slope)
            }
            PieceVars::Conv { .. } => unreachable!("piece order mismatch"),
        }
    }

    fn conv_prelu(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.conv(tape, x)?;
        self.prelu(tape, y)
    }
}

struct Builder {
    pieces: Vec<Piece>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv(&mut self, name: &str, c: usize, d: usize, f: usize, dilation: usize) {
        let fan_in = c * f * f;
        let limit = (1.0 / fan_in as f64).sqrt();
        self.pieces.push(Piece::Conv {
            name: name.to_string(),
            weight: DualTensorBase::new(Tensor::uniform(&[d, c, f, f], limit, &mut self.rng)),
            bias: DualTensorBase::new(Tensor::zeros(&[d])),
            dilation,
        });
    }

    fn prelu(&mut self, name: &str, d: usize) {
        self.pieces.push(Piece::Prelu {
            name: name.to_string(),
            slope: DualTensorBase::new(Tensor::filled(&[d], 0.25)),
        });
    }

    fn conv_prelu(&mut self, name: &str, c: usize, d: usize, f: usize, dilation: usize) {
        self.conv(name, c, d, f, dilation);
        self.prelu(name, d);
    }
}

impl Model {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut b = Builder { pieces: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
        let s = spec.num_classes;
        let bc = spec.base_channels;
        let mut cell_cfg: Option<ConvLstmConfig> = None;
        let filter = spec.effective_lstm_filter();
        let cell_config = |c: usize, d: usize| ConvLstmConfig {
            in_channels: c,
            out_channels: d,
            filter_h: filter,
            filter_w: filter,
            variant: spec.lstm_variant,
            state_activation: spec.state_activation,
        };

        match spec.architecture {
            Architecture::SsNet => {
                let dil = [1usize, 1, 2, 2, 4, 4];
                for (i, &d) in dil.iter().enumerate() {
                    let c = if i == 0 { 3 } else { bc };
                    b.conv_prelu(&format!("conv{}", i + 1), c, bc, 3, d);
                }
                b.conv("proj", bc, s, 1, 1);
            }
            Architecture::VssNet => {
                // same encoder as SSNet so a single-frame checkpoint
                // warm-starts every non-temporal parameter exactly
                let dil = [1usize, 1, 2, 2, 4, 4];
                for (i, &d) in dil.iter().enumerate() {
                    let c = if i == 0 { 3 } else { bc };
                    b.conv_prelu(&format!("conv{}", i + 1), c, bc, 3, d);
                }
                cell_cfg = Some(cell_config(bc, bc));
                b.conv("proj", bc, s, 1, 1);
            }
            Architecture::MiniEsp => {
                let w = esp_widths(s);
                b.conv_prelu("stem", 3, w.w1, 3, 1);
                for k in 1..=2 {
                    build_esp_block(&mut b, &format!("esp1_{}", k), w.w1);
                }
                b.conv_prelu("trans", w.w1, w.w2, 1, 1);
                for k in 1..=3 {
                    build_esp_block(&mut b, &format!("esp2_{}", k), w.w2);
                }
                // decoder: deepest 1x1 reduction (@/4)
                if spec.lstm_position == LstmPosition::L1d {
                    cell_cfg = Some(cell_config(w.w2, w.d_deep));
                } else {
                    b.conv_prelu("red_deep", w.w2, w.d_deep, 1, 1);
                }
                // mid 1x1 reduction after upsample + skip concat (@/2)
                if spec.lstm_position == LstmPosition::L1c {
                    cell_cfg = Some(cell_config(w.d_deep + w.w1, w.d_mid));
                } else {
                    b.conv_prelu("red_mid", w.d_deep + w.w1, w.d_mid, 1, 1);
                }
                // full-resolution mixing and classification
                b.conv_prelu("mix", w.d_mid + w.w1, w.mix, 3, 1);
                if spec.lstm_position == LstmPosition::L1b {
                    cell_cfg = Some(cell_config(w.mix, s));
                } else {
                    b.conv("classifier", w.mix, s, 1, 1);
                }
                if spec.lstm_position == LstmPosition::L1a {
                    cell_cfg = Some(cell_config(s, s));
                }
            }
        }
        let cell = match cell_cfg {
            Some(cfg) => Some(ConvLstmCell::new(cfg, &mut b.rng)?),
            None => None,
        };
        let fuse = match spec.architecture {
            // zero init: a fresh or warm-started VSSNet behaves exactly like
            // its encoder until the optimizer grows the cell's contribution
            Architecture::VssNet => Some(DualTensorBase::new(Tensor::zeros(&[bc]))),
            _ => None,
        };
        Ok(Model { spec: spec.clone(), pieces: b.pieces, cell, fuse })
    }

    pub fn named_params(&self) -> Vec<(String, &DualTensor)> {
        let mut out = Vec::new();
        for p in &self.pieces {
            out.extend(p.named());
        }
        if let Some(cell) = &self.cell {
            out.extend(cell.named_params("lstm."));
        }
        if let Some(fuse) = &self.fuse {
            out.push(("fuse.gain".to_string(), fuse));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut DualTensor)> {
        let mut out = Vec::new();
        for p in &mut self.pieces {
            out.extend(p.named_mut());
        }
        if let Some(cell) = &mut self.cell {
            out.extend(cell.named_params_mut("lstm."));
        }
        if let Some(fuse) = &mut self.fuse {
            out.push(("fuse.gain".to_string(), fuse));
        }
        out
    }

    /// Total learnable scalar count (including activation slopes).
    pub fn total_params(&self) -> u64 {
        self.named_params().iter().map(|(_, t)| t.value.len() as u64).sum()
    }

    /// Parameter count of the recurrent cell per the closed forms (excludes
    /// its activation slope), if the model has one.
    pub fn cell_param_count(&self) -> Option<u64> {
        self.cell.as_ref().map(|c| param_count(&c.config))
    }

    /// Inserts every parameter as a tape leaf. `trainable` selects, by
    /// parameter name, which leaves request gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> ModelVars {
        let mut pieces = Vec::with_capacity(self.pieces.len());
        for p in &self.pieces {
            match p {
                Piece::Conv { name, weight, bias, dilation } => {
                    let w = tape.leaf(weight.value.clone(), trainable(&format!("{name}.weight")));
                    let bv = tape.leaf(bias.value.clone(), trainable(&format!("{name}.bias")));
                    pieces.push(PieceVars::Conv { w, b: bv, dilation: *dilation });
                }
                Piece::Prelu { name, slope } => {
                    let sv = tape.leaf(slope.value.clone(), trainable(&format!("{name}.prelu")));
                    pieces.push(PieceVars::Prelu { slope: sv });
                }
            }
        }
        let cell = self
            .cell
            .as_ref()
            .map(|c| CellVars::bind(c, tape, "lstm.", trainable));
        let fuse = self
            .fuse
            .as_ref()
            .map(|f| tape.leaf(f.value.clone(), trainable("fuse.gain")));
        ModelVars { pieces, cell, fuse }
    }

    /// Pairs every gradient-requiring bound leaf with its parameter name, in
    /// `named_params` order (used to route tape gradients into DualTensors).
    pub fn bound_names(&self, vars: &ModelVars) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (p, pv) in self.pieces.iter().zip(&vars.pieces) {
            match (p, pv) {
                (Piece::Conv { name, .. }, PieceVars::Conv { w, b, .. }) => {
                    out.push((format!("{name}.weight"), *w));
                    out.push((format!("{name}.bias"), *b));
                }
                (Piece::Prelu { name, .. }, PieceVars::Prelu { slope }) => {
                    out.push((format!("{name}.prelu"), *slope));
                }
                _ => unreachable!("piece order mismatch"),
            }
        }
        if let Some(cv) = &vars.cell {
            out.extend(cv.named("lstm."));
        }
        if let Some(f) = vars.fuse {
            out.push(("fuse.gain".to_string(), f));
        }
        out
    }

    fn run_cell(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        x: Var,
        state: &mut Option<LstmState>,
    ) -> Result<Var> {
        let cell = self.cell.as_ref().expect("cell present");
        let cv = vars.cell.as_ref().expect("cell bound");
        if state.is_none() {
            let sh = tape.value(x).shape().to_vec();
            *state = Some(zero_state(tape, cell.config.out_channels, sh[1], sh[2]));
        }
        let new_state = step(cell, tape, cv, x, state.unwrap())?;
        *state = Some(new_state);
        Ok(new_state.hidden)
    }

    /// One frame through the network; returns logits `[S,M,N]`. `state` is
    /// threaded across frames of a scene and must start as `None`.
    pub fn forward_frame(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        x: Var,
        state: &mut Option<LstmState>,
    ) -> Result<Var> {
        let sh = tape.value(x).shape().to_vec();
        if sh.len() != 3 || sh[0] != 3 {
            return Err(Error::ShapeMismatch(format!("frame shape {:?}, expected [3,M,N]", sh)));
        }
        let mut cur = Cursor { vars: &vars.pieces, k: 0 };
        match self.spec.architecture {
            Architecture::SsNet => {
                let mut h = x;
                for _ in 0..6 {
                    h = cur.conv_prelu(tape, h)?;
                }
                cur.conv(tape, h)
            }
            Architecture::VssNet => {
                let mut h = x;
                for _ in 0..6 {
                    h = cur.conv_prelu(tape, h)?;
                }
                let cell_out = self.run_cell(tape, vars, h, state)?;
                let gain = vars.fuse.expect("fuse gain bound");
                let scaled = tape.channel_scale(cell_out, gain)?;
                h = tape.add(h, scaled)?;
                cur.conv(tape, h)
            }
            Architecture::MiniEsp => {
                if sh[1] % 4 != 0 || sh[2] % 4 != 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "MiniEsp needs spatial dims divisible by 4, got {}x{}",
                        sh[1], sh[2]
                    )));
                }
                let skip_full = cur.conv_prelu(tape, x)?; // stem @full
                let mut h = tape.down2(skip_full)?;
                for _ in 0..2 {
                    h = forward_esp_block(tape, &mut cur, h)?;
                }
                let skip_half = h;
                h = tape.down2(h)?;
                h = cur.conv_prelu(tape, h)?; // trans
                for _ in 0..3 {
                    h = forward_esp_block(tape, &mut cur, h)?;
                }
                h = if self.spec.lstm_position == LstmPosition::L1d {
                    self.run_cell(tape, vars, h, state)?
                } else {
                    cur.conv_prelu(tape, h)?
                };
                h = tape.up2(h)?;
                h = tape.concat_channels(&[h, skip_half])?;
                h = if self.spec.lstm_position == LstmPosition::L1c {
                    self.run_cell(tape, vars, h, state)?
                } else {
                    cur.conv_prelu(tape, h)?
                };
                h = tape.up2(h)?;
                h = tape.concat_channels(&[h, skip_full])?;
                h = cur.conv_prelu(tape, h)?; // mix
                h = if self.spec.lstm_position == LstmPosition::L1b {
                    self.run_cell(tape, vars, h, state)?
                } else {
                    cur.conv(tape, h)?
                };
                if self.spec.lstm_position == LstmPosition::L1a {
                    h = self.run_cell(tape, vars, h, state)?;
                }
                Ok(h)
            }
        }
    }

    /// Full sequence on one tape (training mode): returns the tape, the
    /// per-frame probability nodes (softmax outputs, the seeding points for
    /// the loss gradient), and the assembled prediction volume.
    pub fn forward_sequence_train(
        &self,
        frames: &[Tensor],
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<(Tape, ModelVars, Vec<Var>, PredictionVolume)> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("empty frame sequence".into()));
        }
        let sh = frames[0].shape().to_vec();
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, trainable);
        let mut state = None;
        let mut prob_vars = Vec::with_capacity(frames.len());
        let mut volume =
            PredictionVolume::zeros(frames.len(), sh[1], sh[2], self.spec.num_classes);
        for (t, frame) in frames.iter().enumerate() {
            let x = tape.leaf(frame.clone(), false);
            let logits = self.forward_frame(&mut tape, &vars, x, &mut state)?;
            let probs = tape.softmax_channels(logits)?;
            volume.set_frame(t, tape.value(probs))?;
            prob_vars.push(probs);
        }
        Ok((tape, vars, prob_vars, volume))
    }

    /// Sequence evaluation with one short-lived tape per frame (bounded
    /// memory); recurrent state values are carried across tapes.
    pub fn forward_sequence_eval(&self, frames: &[Tensor]) -> Result<PredictionVolume> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("empty frame sequence".into()));
        }
        let sh = frames[0].shape().to_vec();
        let mut volume =
            PredictionVolume::zeros(frames.len(), sh[1], sh[2], self.spec.num_classes);
        let mut carried: Option<(Tensor, Tensor)> = None;
        for (t, frame) in frames.iter().enumerate() {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, &|_| false);
            let mut state = carried.take().map(|(h, c)| LstmState {
                hidden: tape.leaf(h, false),
                cell: tape.leaf(c, false),
            });
            let x = tape.leaf(frame.clone(), false);
            let logits = self.forward_frame(&mut tape, &vars, x, &mut state)?;
            let probs = tape.softmax_channels(logits)?;
            volume.set_frame(t, tape.value(probs))?;
            carried = state
                .map(|s| (tape.value(s.hidden).clone(), tape.value(s.cell).clone()));
        }
        Ok(volume)
    }
}

/// ESP-style block: 1x1 reduce to w/4, three parallel 3x3 convs with
/// dilations {1,2,4}, hierarchical additive fusion, concat with the reduce
/// output, PReLU. Maps w -> w channels at constant resolution.
fn build_esp_block(b: &mut Builder, name: &str, w: usize) {
    let d = w / 4;
    assert!(d > 0 && w % 4 == 0, "ESP width must be a positive multiple of 4");
    b.conv(&format!("{name}.reduce"), w, d, 1, 1);
    for (k, dil) in [1usize, 2, 4].iter().enumerate() {
        b.conv(&format!("{name}.branch{}", k + 1), d, d, 3, *dil);
    }
    b.prelu(&format!("{name}.out"), w);
}

fn forward_esp_block(tape: &mut Tape, cur: &mut Cursor, x: Var) -> Result<Var> {
    let r = cur.conv(tape, x)?;
    let b1 = cur.conv(tape, r)?;
    let b2 = cur.conv(tape, r)?;
    let b3 = cur.conv(tape, r)?;
    let f2 = tape.add(b1, b2)?;
    let f3 = tape.add(f2, b3)?;
    let cat = tape.concat_channels(&[r, b1, f2, f3])?;
    cur.prelu(tape, cat)
}
