//! Convolutional LSTM cell with peephole connections, in three convolution
//! variants, plus exact closed-form parameter accounting.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::ConvKind;
use crate::tape::Var;
use crate::tensor::{DualTensorBase, TensorBase};
use crate::{DualTensor, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Standard,
    DepthwiseSeparable,
    DepthwiseShared,
}

impl Variant {
    pub fn conv_kind(self) -> ConvKind {
        match self {
            Variant::Standard => ConvKind::Full,
            Variant::DepthwiseSeparable => ConvKind::Depthwise,
            Variant::DepthwiseShared => ConvKind::DepthwiseShared,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" | "std" => Ok(Variant::Standard),
            "depthwiseseparable" | "separable" | "ds" => Ok(Variant::DepthwiseSeparable),
            "depthwiseshared" | "shared" | "dsw" => Ok(Variant::DepthwiseShared),
            other => Err(Error::InvalidConfig(format!("unknown ConvLSTM variant '{}'", other))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Standard => "Standard",
            Variant::DepthwiseSeparable => "DepthwiseSeparable",
            Variant::DepthwiseShared => "DepthwiseShared",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateActivation {
    Tanh,
    Prelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLstmConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub filter_h: usize,
    pub filter_w: usize,
    pub variant: Variant,
    pub state_activation: StateActivation,
}

impl ConvLstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig("ConvLSTM channels must be positive".into()));
        }
        if self.filter_h % 2 == 0 || self.filter_w % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "ConvLSTM filter must be odd, got {}x{}",
                self.filter_h, self.filter_w
            )));
        }
        if self.variant != Variant::Standard && self.in_channels != self.out_channels {
            return Err(Error::InvalidConfig(
                "depthwise ConvLSTM variants require equal input and output channels".into(),
            ));
        }
        Ok(())
    }
}

/// Closed-form learnable parameter count per variant. The PReLU slope, when
/// present, is deliberately not included here.
pub fn param_count(config: &ConvLstmConfig) -> u64 {
    let c = config.in_channels as u64;
    let d = config.out_channels as u64;
    let pq = (config.filter_h * config.filter_w) as u64;
    match config.variant {
        Variant::Standard => 4 * (c + d) * pq * d + 7 * d,
        Variant::DepthwiseSeparable => 8 * c * pq + 7 * c,
        Variant::DepthwiseShared => 8 * pq + 7,
    }
}

/// ConvLSTM cell: four gates, each fed by an input convolution and a hidden
/// convolution, three elementwise peephole connections, and per-gate biases.
/// For the weight-sharing variant, biases and peepholes are single shared
/// scalars broadcast over the channels.
#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    pub config: ConvLstmConfig,
    pub w_xi: DualTensor,
    pub w_hi: DualTensor,
    pub w_xf: DualTensor,
    pub w_hf: DualTensor,
    pub w_xc: DualTensor,
    pub w_hc: DualTensor,
    pub w_xo: DualTensor,
    pub w_ho: DualTensor,
    pub b_i: DualTensor,
    pub b_f: DualTensor,
    pub b_c: DualTensor,
    pub b_o: DualTensor,
    pub w_ci: DualTensor,
    pub w_cf: DualTensor,
    pub w_co: DualTensor,
    pub prelu_slope: Option<DualTensor>,
}

impl ConvLstmCell {
    pub fn new(config: ConvLstmConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (c, d) = (config.in_channels, config.out_channels);
        let (p, q) = (config.filter_h, config.filter_w);
        let (x_shape, h_shape, fan_x, fan_h): (Vec<usize>, Vec<usize>, usize, usize) =
            match config.variant {
                Variant::Standard => (vec![d, c, p, q], vec![d, d, p, q], c * p * q, d * p * q),
                Variant::DepthwiseSeparable => (vec![d, p, q], vec![d, p, q], p * q, p * q),
                Variant::DepthwiseShared => (vec![1, p, q], vec![1, p, q], p * q, p * q),
            };
        let vec_len = if config.variant == Variant::DepthwiseShared { 1 } else { d };
        let lim_x = (1.0 / fan_x as f64).sqrt();
        let lim_h = (1.0 / fan_h as f64).sqrt();
        let mut wx = || DualTensorBase::new(TensorBase::uniform(&x_shape, lim_x, rng));
        let w_xi = wx();
        let w_xf = wx();
        let w_xc = wx();
        let w_xo = wx();
        let mut wh = || DualTensorBase::new(TensorBase::uniform(&h_shape, lim_h, rng));
        let w_hi = wh();
        let w_hf = wh();
        let w_hc = wh();
        let w_ho = wh();
        let zero_vec = || DualTensorBase::new(Tensor::zeros(&[vec_len]));
        let prelu_slope = match config.state_activation {
            StateActivation::Prelu => Some(DualTensorBase::new(Tensor::filled(&[d], 0.25))),
            StateActivation::Tanh => None,
        };
        Ok(ConvLstmCell {
            config,
            w_xi,
            w_hi,
            w_xf,
            w_hf,
            w_xc,
            w_hc,
            w_xo,
            w_ho,
            b_i: zero_vec(),
            // forget gate open at init so memory survives early training
            b_f: DualTensorBase::new(Tensor::filled(&[vec_len], 1.0)),
            b_c: zero_vec(),
            b_o: zero_vec(),
            w_ci: zero_vec(),
            w_cf: zero_vec(),
            w_co: zero_vec(),
            prelu_slope,
        })
    }

    /// Named views over every learnable tensor, prefixed so the training
    /// loop can freeze or select them ("lstm.W_xi", ...).
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &DualTensor)> {
        let mut out: Vec<(String, &DualTensor)> = vec![
            (format!("{prefix}W_xi"), &self.w_xi),
            (format!("{prefix}W_hi"), &self.w_hi),
            (format!("{prefix}W_xf"), &self.w_xf),
            (format!("{prefix}W_hf"), &self.w_hf),
            (format!("{prefix}W_xc"), &self.w_xc),
            (format!("{prefix}W_hc"), &self.w_hc),
            (format!("{prefix}W_xo"), &self.w_xo),
            (format!("{prefix}W_ho"), &self.w_ho),
            (format!("{prefix}b_i"), &self.b_i),
            (format!("{prefix}b_f"), &self.b_f),
            (format!("{prefix}b_c"), &self.b_c),
            (format!("{prefix}b_o"), &self.b_o),
            (format!("{prefix}W_ci"), &self.w_ci),
            (format!("{prefix}W_cf"), &self.w_cf),
            (format!("{prefix}W_co"), &self.w_co),
        ];
        if let Some(s) = &self.prelu_slope {
            out.push((format!("{prefix}prelu"), s));
        }
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut DualTensor)> {
        let mut out: Vec<(String, &mut DualTensor)> = vec![
            (format!("{prefix}W_xi"), &mut self.w_xi),
            (format!("{prefix}W_hi"), &mut self.w_hi),
            (format!("{prefix}W_xf"), &mut self.w_xf),
            (format!("{prefix}W_hf"), &mut self.w_hf),
            (format!("{prefix}W_xc"), &mut self.w_xc),
            (format!("{prefix}W_hc"), &mut self.w_hc),
            (format!("{prefix}W_xo"), &mut self.w_xo),
            (format!("{prefix}W_ho"), &mut self.w_ho),
            (format!("{prefix}b_i"), &mut self.b_i),
            (format!("{prefix}b_f"), &mut self.b_f),
            (format!("{prefix}b_c"), &mut self.b_c),
            (format!("{prefix}b_o"), &mut self.b_o),
            (format!("{prefix}W_ci"), &mut self.w_ci),
            (format!("{prefix}W_cf"), &mut self.w_cf),
            (format!("{prefix}W_co"), &mut self.w_co),
        ];
        if let Some(s) = &mut self.prelu_slope {
            out.push((format!("{prefix}prelu"), s));
        }
        out
    }

    /// Learnable scalar count by enumeration, excluding the PReLU slope.
    pub fn enumerate_params(&self) -> u64 {
        self.named_params("")
            .iter()
            .filter(|(n, _)| n != "prelu")
            .map(|(_, t)| t.value.len() as u64)
            .sum()
    }
}

/// Tape handles for one cell's parameters.
#[derive(Debug, Clone)]
pub struct CellVars {
    pub w_xi: Var,
    pub w_hi: Var,
    pub w_xf: Var,
    pub w_hf: Var,
    pub w_xc: Var,
    pub w_hc: Var,
    pub w_xo: Var,
    pub w_ho: Var,
    pub b_i: Var,
    pub b_f: Var,
    pub b_c: Var,
    pub b_o: Var,
    pub w_ci: Var,
    pub w_cf: Var,
    pub w_co: Var,
    pub prelu_slope: Option<Var>,
}

impl CellVars {
    /// Inserts every cell parameter as a tape leaf; `trainable` decides by
    /// name (same names as `named_params`) whether gradients are requested.
    pub fn bind(
        cell: &ConvLstmCell,
        tape: &mut Tape,
        prefix: &str,
        trainable: &dyn Fn(&str) -> bool,
    ) -> CellVars {
        let mut leaf = |name: &str, t: &DualTensor| {
            tape.leaf(t.value.clone(), trainable(&format!("{prefix}{name}")))
        };
        CellVars {
            w_xi: leaf("W_xi", &cell.w_xi),
            w_hi: leaf("W_hi", &cell.w_hi),
            w_xf: leaf("W_xf", &cell.w_xf),
            w_hf: leaf("W_hf", &cell.w_hf),
            w_xc: leaf("W_xc", &cell.w_xc),
            w_hc: leaf("W_hc", &cell.w_hc),
            w_xo: leaf("W_xo", &cell.w_xo),
            w_ho: leaf("W_ho", &cell.w_ho),
            b_i: leaf("b_i", &cell.b_i),
            b_f: leaf("b_f", &cell.b_f),
            b_c: leaf("b_c", &cell.b_c),
            b_o: leaf("b_o", &cell.b_o),
            w_ci: leaf("W_ci", &cell.w_ci),
            w_cf: leaf("W_cf", &cell.w_cf),
            w_co: leaf("W_co", &cell.w_co),
            prelu_slope: cell.prelu_slope.as_ref().map(|s| leaf("prelu", s)),
        }
    }

    /// Collects `(name, var)` pairs in the same order as `named_params`.
    pub fn named(&self, prefix: &str) -> Vec<(String, Var)> {
        let mut out = vec![
            (format!("{prefix}W_xi"), self.w_xi),
            (format!("{prefix}W_hi"), self.w_hi),
            (format!("{prefix}W_xf"), self.w_xf),
            (format!("{prefix}W_hf"), self.w_hf),
            (format!("{prefix}W_xc"), self.w_xc),
            (format!("{prefix}W_hc"), self.w_hc),
            (format!("{prefix}W_xo"), self.w_xo),
            (format!("{prefix}W_ho"), self.w_ho),
            (format!("{prefix}b_i"), self.b_i),
            (format!("{prefix}b_f"), self.b_f),
            (format!("{prefix}b_c"), self.b_c),
            (format!("{prefix}b_o"), self.b_o),
            (format!("{prefix}W_ci"), self.w_ci),
            (format!("{prefix}W_cf"), self.w_cf),
            (format!("{prefix}W_co"), self.w_co),
        ];
        if let Some(s) = self.prelu_slope {
            out.push((format!("{prefix}prelu"), s));
        }
        out
    }
}

/// Hidden and cell state carried between time steps. Reset to zero at every
/// scene boundary.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

pub fn zero_state(tape: &mut Tape, channels: usize, height: usize, width: usize) -> LstmState {
    let h = tape.leaf(Tensor::zeros(&[channels, height, width]), false);
    let c = tape.leaf(Tensor::zeros(&[channels, height, width]), false);
    LstmState { hidden: h, cell: c }
}

/// Broadcasts a per-gate vector to the channel count (identity except for
/// the weight-sharing variant, whose vectors are shared scalars).
fn gate_vec(tape: &mut Tape, v: Var, channels: usize) -> Result<Var> {
    if tape.value(v).len() == channels {
        Ok(v)
    } else {
        tape.repeat(v, channels)
    }
}

/// One recurrent step. Returns the new hidden output and state.
pub fn step(
    cell: &ConvLstmCell,
    tape: &mut Tape,
    vars: &CellVars,
    x: Var,
    state: LstmState,
) -> Result<LstmState> {
    let cfg = &cell.config;
    let kind = cfg.variant.conv_kind();
    let d = cfg.out_channels;
    let xs = tape.value(x).shape();
    if xs.len() != 3 || xs[0] != cfg.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "ConvLSTM input shape {:?}, expected [{},M,N]",
            xs, cfg.in_channels
        )));
    }
    let hs = tape.value(state.hidden).shape();
    if hs != [d, xs[1], xs[2]] {
        return Err(Error::ShapeMismatch(format!(
            "ConvLSTM state shape {:?}, expected [{},{},{}]",
            hs, d, xs[1], xs[2]
        )));
    }

    let b_i = gate_vec(tape, vars.b_i, d)?;
    let b_f = gate_vec(tape, vars.b_f, d)?;
    let b_c = gate_vec(tape, vars.b_c, d)?;
    let b_o = gate_vec(tape, vars.b_o, d)?;
    let w_ci = gate_vec(tape, vars.w_ci, d)?;
    let w_cf = gate_vec(tape, vars.w_cf, d)?;
    let w_co = gate_vec(tape, vars.w_co, d)?;

    // i = sigma(conv(W_xi, x) + conv(W_hi, h) + W_ci o c + b_i)
    let xi = tape.conv2d(x, vars.w_xi, Some(b_i), 1, kind)?;
    let hi = tape.conv2d(state.hidden, vars.w_hi, None, 1, kind)?;
    let pre = tape.add(xi, hi)?;
    let peep = tape.channel_scale(state.cell, w_ci)?;
    let pre = tape.add(pre, peep)?;
    let gate_i = tape.sigmoid(pre);

    // f = sigma(conv(W_xf, x) + conv(W_hf, h) + W_cf o c + b_f)
    let xf = tape.conv2d(x, vars.w_xf, Some(b_f), 1, kind)?;
    let hf = tape.conv2d(state.hidden, vars.w_hf, None, 1, kind)?;
    let pre = tape.add(xf, hf)?;
    let peep = tape.channel_scale(state.cell, w_cf)?;
    let pre = tape.add(pre, peep)?;
    let gate_f = tape.sigmoid(pre);

    // c' = f o c + i o tanh(conv(W_xc, x) + conv(W_hc, h) + b_c)
    let xc = tape.conv2d(x, vars.w_xc, Some(b_c), 1, kind)?;
    let hc = tape.conv2d(state.hidden, vars.w_hc, None, 1, kind)?;
    let cand = tape.add(xc, hc)?;
    let cand = tape.tanh(cand);
    let keep = tape.mul(gate_f, state.cell)?;
    let write = tape.mul(gate_i, cand)?;
    let c_new = tape.add(keep, write)?;

    // o = sigma(conv(W_xo, x) + conv(W_ho, h) + W_co o c' + b_o)
    let xo = tape.conv2d(x, vars.w_xo, Some(b_o), 1, kind)?;
    let ho = tape.conv2d(state.hidden, vars.w_ho, None, 1, kind)?;
    let pre = tape.add(xo, ho)?;
    let peep = tape.channel_scale(c_new, w_co)?;
    let pre = tape.add(pre, peep)?;
    let gate_o = tape.sigmoid(pre);

    // h' = o o act(c')
    let activated = match cfg.state_activation {
        StateActivation::Tanh => tape.tanh(c_new),
        StateActivation::Prelu => {
            let slope = vars.prelu_slope.expect("prelu slope bound");
            tape.prelu(c_new, slope)?
        }
    };
    let h_new = tape.mul(gate_o, activated)?;
    Ok(LstmState { hidden: h_new, cell: c_new })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(variant: Variant, c: usize, d: usize, f: usize) -> ConvLstmConfig {
        ConvLstmConfig {
            in_channels: c,
            out_channels: d,
            filter_h: f,
            filter_w: f,
            variant,
            state_activation: StateActivation::Tanh,
        }
    }

    #[test]
    fn appendix_parameter_goldens() {
        assert_eq!(param_count(&config(Variant::Standard, 19, 19, 3)), 26_125);
        assert_eq!(param_count(&config(Variant::DepthwiseSeparable, 19, 19, 3)), 1_501);
        assert_eq!(param_count(&config(Variant::DepthwiseShared, 19, 19, 3)), 79);
    }

    #[test]
    fn enumeration_matches_closed_form_across_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(c, d) in &[(1usize, 1usize), (2, 3), (4, 4), (19, 19), (8, 8)] {
            for &f in &[1usize, 3, 5] {
                let cfg = config(Variant::Standard, c, d, f);
                let cell = ConvLstmCell::new(cfg, &mut rng).unwrap();
                assert_eq!(cell.enumerate_params(), param_count(&cfg), "{cfg:?}");
                if c == d {
                    for variant in [Variant::DepthwiseSeparable, Variant::DepthwiseShared] {
                        let cfg = config(variant, c, d, f);
                        let cell = ConvLstmCell::new(cfg, &mut rng).unwrap();
                        assert_eq!(cell.enumerate_params(), param_count(&cfg), "{cfg:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_requires_equal_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ConvLstmCell::new(config(Variant::DepthwiseSeparable, 2, 3, 3), &mut rng).is_err());
        assert!(ConvLstmCell::new(config(Variant::DepthwiseShared, 2, 3, 3), &mut rng).is_err());
    }

    fn zeroed_cell(cfg: ConvLstmConfig) -> ConvLstmCell {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cell = ConvLstmCell::new(cfg, &mut rng).unwrap();
        for (_, p) in cell.named_params_mut("") {
            p.value.fill(0.0);
        }
        cell
    }

    #[test]
    fn zero_everything_gives_zero_output() {
        let mut cell = zeroed_cell(config(Variant::Standard, 2, 3, 3));
        cell.b_f.value.fill(1.0);
        let mut tape = Tape::new();
        let vars = CellVars::bind(&cell, &mut tape, "", &|_| false);
        let x = tape.leaf(Tensor::zeros(&[2, 4, 4]), false);
        let state = zero_state(&mut tape, 3, 4, 4);
        let out = step(&cell, &mut tape, &vars, x, state).unwrap();
        assert!(tape.value(out.hidden).iter().all(|&v| v == 0.0));
        assert!(tape.value(out.cell).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_cell_hand_evaluation() {
        // C=D=1, 1x1 filters, only W_xc = 1, b_i = +20 (input gate saturated
        // open), zero state, x = 0.5.
        let mut cell = zeroed_cell(config(Variant::Standard, 1, 1, 1));
        cell.w_xc.value.fill(1.0);
        cell.b_i.value.fill(20.0);
        let mut tape = Tape::new();
        let vars = CellVars::bind(&cell, &mut tape, "", &|_| false);
        let x = tape.leaf(Tensor::filled(&[1, 1, 1], 0.5), false);
        let state = zero_state(&mut tape, 1, 1, 1);
        let out = step(&cell, &mut tape, &vars, x, state).unwrap();
        let c = tape.value(out.cell).data()[0];
        let h = tape.value(out.hidden).data()[0];
        assert!((c - 0.5f64.tanh()).abs() < 1e-9, "c = {c}");
        assert!((h - 0.5 * c.tanh()).abs() < 1e-9, "h = {h}");
        assert!((h - 0.2160).abs() < 5e-4);
    }

    #[test]
    fn forget_gate_closed_means_stateless() {
        // hidden and peephole weights zero, b_f = -20: output depends only
        // on the current input.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cell = ConvLstmCell::new(config(Variant::Standard, 2, 2, 3), &mut rng).unwrap();
        for name in ["W_hi", "W_hf", "W_hc", "W_ho"] {
            for (n, p) in cell.named_params_mut("") {
                if n == name {
                    p.value.fill(0.0);
                }
            }
        }
        cell.b_f.value.fill(-20.0);
        let x_data = Tensor::uniform(&[2, 4, 4], 1.0, &mut rng);

        let run = |state_fill: f64| {
            let mut tape = Tape::new();
            let vars = CellVars::bind(&cell, &mut tape, "", &|_| false);
            let x = tape.leaf(x_data.clone(), false);
            let h0 = tape.leaf(Tensor::filled(&[2, 4, 4], state_fill), false);
            let c0 = tape.leaf(Tensor::filled(&[2, 4, 4], state_fill), false);
            let out = step(&cell, &mut tape, &vars, x, LstmState { hidden: h0, cell: c0 }).unwrap();
            tape.value(out.hidden).clone()
        };
        let a = run(0.0);
        let b = run(0.7);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn memory_preserved_with_input_gate_closed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cell = ConvLstmCell::new(config(Variant::Standard, 2, 2, 3), &mut rng).unwrap();
        cell.b_i.value.fill(-40.0);
        cell.b_f.value.fill(40.0);
        cell.w_cf.value.fill(0.0);
        cell.w_ci.value.fill(0.0);
        cell.w_xi.value.fill(0.0);
        cell.w_xf.value.fill(0.0);
        let mut tape = Tape::new();
        let vars = CellVars::bind(&cell, &mut tape, "", &|_| false);
        let x = tape.leaf(Tensor::uniform(&[2, 4, 4], 1.0, &mut rng), false);
        let c0_data = Tensor::uniform(&[2, 4, 4], 0.5, &mut rng);
        let h0 = tape.leaf(Tensor::zeros(&[2, 4, 4]), false);
        let c0 = tape.leaf(c0_data.clone(), false);
        let out = step(&cell, &mut tape, &vars, x, LstmState { hidden: h0, cell: c0 }).unwrap();
        for (a, b) in tape.value(out.cell).iter().zip(c0_data.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gradients_flow_through_chained_steps() {
        use crate::gradcheck::grad_check;
        for variant in [Variant::Standard, Variant::DepthwiseSeparable, Variant::DepthwiseShared] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let cfg = config(variant, 2, 2, 3);
            let cell = ConvLstmCell::new(cfg, &mut rng).unwrap();
            let inputs: Vec<Tensor> =
                (0..3).map(|_| Tensor::uniform(&[2, 4, 4], 1.0, &mut rng)).collect();

            let run = |w_xi: &Tensor| -> (f64, Option<Tensor>) {
                let mut cell = cell.clone();
                cell.w_xi.value = w_xi.clone();
                let mut tape = Tape::new();
                let vars = CellVars::bind(&cell, &mut tape, "", &|n| n == "W_xi");
                let mut state = zero_state(&mut tape, 2, 4, 4);
                let mut acc = None;
                for frame in &inputs {
                    let x = tape.leaf(frame.clone(), false);
                    state = step(&cell, &mut tape, &vars, x, state).unwrap();
                    let sq = tape.square(state.hidden);
                    let s = tape.sum(sq);
                    acc = Some(match acc {
                        None => s,
                        Some(prev) => tape.add(prev, s).unwrap(),
                    });
                }
                let loss = acc.unwrap();
                let value = tape.value(loss).data()[0];
                let grads = tape.backward(&[(loss, Tensor::scalar(1.0))]).unwrap();
                (value, grads.get(vars.w_xi).cloned())
            };

            let x0 = cell.w_xi.value.clone();
            let (_, analytic) = run(&x0);
            let err = grad_check(|w| Ok(run(w).0), &analytic.unwrap(), &x0, 1e-5, None).unwrap();
            assert!(err <= 1e-4, "{variant:?} err {err}");
        }
    }
}
