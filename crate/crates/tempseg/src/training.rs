//! Deterministic training loop: one scene per step, full backpropagation
//! through all frames of the scene, global-norm gradient clipping, Adam or
//! SGD-with-momentum updates, optional LSTM-only phase, and bitwise-exact
//! checkpoint/resume.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::datagen::Scene;
use crate::error::{Error, Result};
use crate::losses::{total_loss_grad, LossComponents, LossConfig};
use crate::metrics::{ConsistencyMode, EvalAccumulator, EvalReport};
use crate::models::{Model, ModelSpec};
use crate::tape::Var;
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Full,
    LstmOnly,
}

impl Phase {
    pub fn trains(&self, name: &str) -> bool {
        match self {
            Phase::Full => true,
            // the fuse gain is part of the temporal pathway, not the encoder
            Phase::LstmOnly => name.starts_with("lstm.") || name.starts_with("fuse."),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Phase::Full),
            "lstmonly" | "lstm-only" | "lstm_only" => Ok(Phase::LstmOnly),
            other => Err(Error::InvalidConfig(format!("unknown phase '{}'", other))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// multiplicative decay applied per epoch (1.0 = constant)
    pub lr_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub phase: Phase,
    pub clip_norm: f64,
    /// epochs between validation reports; 0 disables
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            optimizer: OptimizerKind::default(),
            learning_rate: 1e-3,
            lr_decay: 1.0,
            seed: 0,
            loss: LossConfig::default(),
            phase: Phase::Full,
            clip_norm: 5.0,
            eval_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 && self.learning_rate != 0.0 {
            return Err(Error::InvalidConfig("learning rate must be >= 0".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::InvalidConfig("clip norm must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_decay) || self.lr_decay == 0.0 {
            return Err(Error::InvalidConfig("lr_decay must be in (0, 1]".into()));
        }
        self.loss.validate()
    }
}

/// First-moment / second-moment (or momentum) slots per parameter, in
/// `named_params` order.
#[derive(Debug, Clone)]
struct OptState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub lines: Vec<String>,
    pub epochs: Vec<LossComponents>,
    pub reports: Vec<(usize, EvalReport)>,
}

impl TrainLog {
    fn push(&mut self, line: String) {
        self.lines.push(line);
    }
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub epoch: usize,
    opt: OptState,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let n = model.named_params().len();
        let m = model.named_params().iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let v = (0..n)
            .zip(model.named_params())
            .map(|(_, (_, p))| Tensor::zeros(p.value.shape()))
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer { model, config, epoch: 0, opt: OptState { step: 0, m, v }, rng })
    }

    /// Runs epochs `self.epoch .. config.epochs`.
    pub fn run(&mut self, train: &[Scene], val: Option<&[Scene]>) -> Result<TrainLog> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let mut log = TrainLog::default();
        while self.epoch < self.config.epochs {
            let lr = self.config.learning_rate * self.config.lr_decay.powi(self.epoch as i32);
            let mut order: Vec<usize> = (0..train.len()).collect();
            // Fisher-Yates on the persistent rng (state survives resume)
            for i in (1..order.len()).rev() {
                let j = self.rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut sums = LossComponents { total: 0.0, ce: 0.0, incons: 0.0 };
            for &k in &order {
                let comps = self.train_scene(&train[k], lr).map_err(|e| match e {
                    Error::NonFinite(msg) => Error::Diverged(format!(
                        "scene {} epoch {}: {}",
                        k, self.epoch, msg
                    )),
                    other => other,
                })?;
                sums.total += comps.total;
                sums.ce += comps.ce;
                sums.incons += comps.incons;
            }
            let n = train.len() as f64;
            let mean =
                LossComponents { total: sums.total / n, ce: sums.ce / n, incons: sums.incons / n };
            log.push(format!(
                "epoch {}: ce={:.6} incons={:.6} total={:.6}",
                self.epoch, mean.ce, mean.incons, mean.total
            ));
            log.epochs.push(mean);
            self.epoch += 1;
            if let (Some(val), true) = (val, self.config.eval_interval > 0) {
                if self.epoch % self.config.eval_interval == 0 || self.epoch == self.config.epochs
                {
                    let report = evaluate(&self.model, val, ConsistencyMode::Raw)?;
                    log.push(report.to_key_values());
                    log.reports.push((self.epoch, report));
                }
            }
        }
        Ok(log)
    }

    fn train_scene(&mut self, scene: &Scene, lr: f64) -> Result<LossComponents> {
        let phase = self.config.phase;
        let (tape, vars, prob_vars, volume) = self
            .model
            .forward_sequence_train(&scene.frames, &|name| phase.trains(name))?;
        let (comps, grad) = total_loss_grad(&volume, &scene.labels, &self.config.loss, None)?;
        if !comps.total.is_finite() {
            return Err(Error::NonFinite(format!("loss {}", comps.total)));
        }
        let seeds: Vec<(Var, Tensor)> = prob_vars
            .iter()
            .enumerate()
            .map(|(t, &v)| (v, grad.frame_tensor(t)))
            .collect();
        let grads = tape.backward(&seeds)?;

        // route tape gradients into the parameter grad buffers
        let bound = self.model.bound_names(&vars);
        {
            let mut params = self.model.named_params_mut();
            for ((name, var), (pname, dual)) in bound.iter().zip(params.iter_mut()) {
                debug_assert_eq!(name, pname);
                dual.zero_grad();
                if let Some(g) = grads.get(*var) {
                    dual.grad.add_assign(g);
                }
            }
        }

        // global-norm clipping over trainable parameters only; the step is
        // exactly the unclipped step whenever the norm is within the limit
        let sq: f64 = self
            .model
            .named_params()
            .iter()
            .filter(|(n, _)| phase.trains(n))
            .map(|(_, p)| p.grad.sq_norm())
            .sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {}", norm)));
        }
        let scale = if norm > self.config.clip_norm { self.config.clip_norm / norm } else { 1.0 };

        self.opt.step += 1;
        let step = self.opt.step;
        let optimizer = self.config.optimizer;
        let mut params = self.model.named_params_mut();
        for (k, (name, dual)) in params.iter_mut().enumerate() {
            if !phase.trains(name) {
                continue;
            }
            match optimizer {
                OptimizerKind::Sgd { momentum } => {
                    let m = &mut self.opt.m[k];
                    for ((mv, g), p) in m
                        .data_mut()
                        .iter_mut()
                        .zip(dual.grad.data())
                        .zip(dual.value.data_mut())
                    {
                        *mv = momentum * *mv + scale * g;
                        *p -= lr * *mv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, epsilon } => {
                    let bc1 = 1.0 - beta1.powi(step as i32);
                    let bc2 = 1.0 - beta2.powi(step as i32);
                    let (m, v) = (&mut self.opt.m[k], &mut self.opt.v[k]);
                    for (((mv, vv), g), p) in m
                        .data_mut()
                        .iter_mut()
                        .zip(v.data_mut())
                        .zip(dual.grad.data())
                        .zip(dual.value.data_mut())
                    {
                        let g = scale * g;
                        *mv = beta1 * *mv + (1.0 - beta1) * g;
                        *vv = beta2 * *vv + (1.0 - beta2) * g * g;
                        let mh = *mv / bc1;
                        let vh = *vv / bc2;
                        *p -= lr * mh / (vh.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(comps)
    }

    /// Serializes parameters, optimizer state, counters, and the shuffle RNG.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (k, (name, dual)) in self.model.named_params().iter().enumerate() {
            tensors.push((name.clone(), dual.value.clone()));
            tensors.push((format!("opt.m.{}", name), self.opt.m[k].clone()));
            tensors.push((format!("opt.v.{}", name), self.opt.v[k].clone()));
        }
        Checkpoint {
            spec_block: self.model.spec.to_block(),
            epoch: self.epoch as u32,
            step: self.opt.step,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Rebuilds a trainer from a checkpoint; training continues bitwise as
    /// if it had never stopped.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let spec = ModelSpec::parse(&ckpt.spec_block)?;
        let mut model = Model::build(&spec, 0)?;
        load_params(&mut model, ckpt)?;
        let mut trainer = Trainer::new(model, config)?;
        for (k, (name, _)) in trainer.model.named_params().iter().enumerate() {
            let m = ckpt
                .tensor(&format!("opt.m.{}", name))
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint missing opt.m.{}", name)))?;
            let v = ckpt
                .tensor(&format!("opt.v.{}", name))
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint missing opt.v.{}", name)))?;
            trainer.opt.m[k] = m.clone();
            trainer.opt.v[k] = v.clone();
        }
        trainer.opt.step = ckpt.step;
        trainer.epoch = ckpt.epoch as usize;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
        rng.set_word_pos(ckpt.rng_word_pos);
        trainer.rng = rng;
        Ok(trainer)
    }
}

/// Overwrites model parameter values from checkpoint tensors (exact names).
pub fn load_params(model: &mut Model, ckpt: &Checkpoint) -> Result<()> {
    for (name, dual) in model.named_params_mut() {
        let t = ckpt
            .tensor(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint missing tensor '{}'", name)))?;
        if t.shape() != dual.value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint tensor '{}' has shape {:?}, model expects {:?}",
                name,
                t.shape(),
                dual.value.shape()
            )));
        }
        dual.value = t.clone();
    }
    Ok(())
}

/// Builds a model directly from a checkpoint (evaluation path).
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    let spec = ModelSpec::parse(&ckpt.spec_block)?;
    let mut model = Model::build(&spec, 0)?;
    load_params(&mut model, ckpt)?;
    Ok(model)
}

/// Copies parameters with matching names and shapes from `source` into
/// `target` (warm start across specs, e.g. reusing a pretrained encoder).
pub fn warm_start(target: &mut Model, source: &Checkpoint) -> usize {
    let mut copied = 0;
    for (name, dual) in target.named_params_mut() {
        if let Some(t) = source.tensor(&name) {
            if t.shape() == dual.value.shape() {
                dual.value = t.clone();
                copied += 1;
            }
        }
    }
    copied
}

/// Evaluates a model over scenes with dense ground truth.
pub fn evaluate(model: &Model, scenes: &[Scene], mode: ConsistencyMode) -> Result<EvalReport> {
    let mut acc = EvalAccumulator::new(model.spec.num_classes, mode);
    for scene in scenes {
        let preds = model.forward_sequence_eval(&scene.frames)?;
        acc.add_scene(&preds, &scene.labels)?;
    }
    acc.finalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, SceneConfig};
    use crate::models::Architecture;

    fn tiny_dataset(scenes: usize, frames: usize) -> Vec<Scene> {
        let config = SceneConfig {
            frames,
            height: 16,
            width: 16,
            num_classes: 4,
            min_shapes: 2,
            max_shapes: 3,
            noise_sigma: 0.02,
            ..Default::default()
        };
        generate_dataset(&config, scenes, "train").unwrap().scenes
    }

    fn tiny_spec(arch: Architecture) -> ModelSpec {
        let mut spec = ModelSpec::new(arch, 4);
        spec.base_channels = 4;
        spec
    }

    fn params_snapshot(model: &Model) -> Vec<(String, Tensor)> {
        model.named_params().iter().map(|(n, p)| (n.clone(), p.value.clone())).collect()
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let scenes = tiny_dataset(2, 3);
        let model = Model::build(&tiny_spec(Architecture::SsNet), 0).unwrap();
        let before = params_snapshot(&model);
        let config = TrainConfig { epochs: 2, learning_rate: 0.0, ..Default::default() };
        let mut trainer = Trainer::new(model, config).unwrap();
        let log = trainer.run(&scenes, None).unwrap();
        assert_eq!(params_snapshot(&trainer.model), before);
        assert_eq!(log.epochs[0].total, log.epochs[1].total);
    }

    #[test]
    fn lstm_only_freezes_everything_else() {
        let scenes = tiny_dataset(2, 3);
        let model = Model::build(&tiny_spec(Architecture::VssNet), 0).unwrap();
        let before = params_snapshot(&model);
        let config = TrainConfig { epochs: 1, phase: Phase::LstmOnly, ..Default::default() };
        let mut trainer = Trainer::new(model, config).unwrap();
        trainer.run(&scenes, None).unwrap();
        let after = params_snapshot(&trainer.model);
        let mut lstm_changed = false;
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            if name.starts_with("lstm.") || name.starts_with("fuse.") {
                lstm_changed |= a != b;
            } else {
                assert_eq!(a, b, "frozen parameter '{}' changed", name);
            }
        }
        assert!(lstm_changed);
    }

    #[test]
    fn cross_entropy_decreases_early() {
        let scenes = tiny_dataset(5, 3);
        let model = Model::build(&tiny_spec(Architecture::SsNet), 1).unwrap();
        let config = TrainConfig {
            epochs: 5,
            loss: LossConfig { lambda_incons: 0.0, ..Default::default() },
            ..Default::default()
        };
        let mut trainer = Trainer::new(model, config).unwrap();
        let log = trainer.run(&scenes, None).unwrap();
        for k in 1..5 {
            assert!(
                log.epochs[k].ce < log.epochs[k - 1].ce,
                "ce did not decrease at epoch {}: {:?}",
                k,
                log.epochs.iter().map(|e| e.ce).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn training_is_deterministic() {
        let scenes = tiny_dataset(3, 3);
        let run = || {
            let model = Model::build(&tiny_spec(Architecture::SsNet), 2).unwrap();
            let mut trainer =
                Trainer::new(model, TrainConfig { epochs: 2, ..Default::default() }).unwrap();
            trainer.run(&scenes, None).unwrap();
            let mut buf = Vec::new();
            trainer.checkpoint().write(&mut buf).unwrap();
            buf
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_is_bitwise_equivalent() {
        let scenes = tiny_dataset(3, 3);
        let full = {
            let model = Model::build(&tiny_spec(Architecture::VssNet), 3).unwrap();
            let mut trainer =
                Trainer::new(model, TrainConfig { epochs: 4, ..Default::default() }).unwrap();
            trainer.run(&scenes, None).unwrap();
            let mut buf = Vec::new();
            trainer.checkpoint().write(&mut buf).unwrap();
            buf
        };
        let resumed = {
            let model = Model::build(&tiny_spec(Architecture::VssNet), 3).unwrap();
            let mut trainer =
                Trainer::new(model, TrainConfig { epochs: 2, ..Default::default() }).unwrap();
            trainer.run(&scenes, None).unwrap();
            let ckpt = trainer.checkpoint();
            let mut buf = Vec::new();
            ckpt.write(&mut buf).unwrap();
            let ckpt2 = Checkpoint::read(&mut buf.as_slice()).unwrap();
            let mut trainer2 = Trainer::from_checkpoint(
                &ckpt2,
                TrainConfig { epochs: 4, ..Default::default() },
            )
            .unwrap();
            trainer2.run(&scenes, None).unwrap();
            let mut out = Vec::new();
            trainer2.checkpoint().write(&mut out).unwrap();
            out
        };
        assert_eq!(full, resumed);
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward() {
        let scenes = tiny_dataset(1, 2);
        let model = Model::build(&tiny_spec(Architecture::VssNet), 4).unwrap();
        let trainer = Trainer::new(model, TrainConfig::default()).unwrap();
        let ckpt = trainer.checkpoint();
        let restored = model_from_checkpoint(&ckpt).unwrap();
        let a = trainer.model.forward_sequence_eval(&scenes[0].frames).unwrap();
        let b = restored.forward_sequence_eval(&scenes[0].frames).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn evaluate_produces_report() {
        let scenes = tiny_dataset(2, 3);
        let model = Model::build(&tiny_spec(Architecture::SsNet), 5).unwrap();
        let r1 = evaluate(&model, &scenes, ConsistencyMode::Raw).unwrap();
        let r2 = evaluate(&model, &scenes, ConsistencyMode::Raw).unwrap();
        assert_eq!(r1.to_key_values(), r2.to_key_values());
        assert_eq!(r1.scenes_evaluated, 2);
    }
}
