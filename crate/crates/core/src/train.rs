//! Single-scene-per-step training loop with decoupled weight decay.

use crate::config::{RunConfig, TrainSettings};
use crate::data::{Dataset, Scene};
use crate::decoder::{forward_on_tape, is_embedding, DecoderParams, ForwardSpec};
use crate::matching::{layer_losses, MatchError};
use crate::mp::{build_mp_part, MpError};
use crate::seeds;
use crate::tensor::{Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

const TAG_INIT: u64 = 21;
const TAG_ORDER: u64 = 22;
const TAG_MP: u64 = 23;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("training split is empty")]
    EmptySplit,
    #[error("config: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Loss(#[from] MatchError),
    #[error(transparent)]
    Mp(#[from] MpError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainError {
    /// Whether the error stems from non-finite values.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. }
                | TrainError::Tensor(TensorError::NonFinite(_))
                | TrainError::Loss(MatchError::NonFinite { .. })
                | TrainError::Loss(MatchError::Tensor(TensorError::NonFinite(_)))
        )
    }
}

/// Learning rate after the multistep schedule.
pub fn learning_rate(t: &TrainSettings, step: usize) -> f64 {
    let decays = t.decay_steps.iter().filter(|&&s| step >= s).count();
    t.learning_rate * t.decay_factor.powi(decays as i32)
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &DecoderParams) -> Self {
        let named = params.weights.named();
        Self {
            m: named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            decay: named.iter().map(|(n, _)| !is_embedding(n)).collect(),
            t: 0,
        }
    }

    /// One update; `grads` follow the parameter order of `named()`.
    pub fn step(&mut self, params: &mut DecoderParams, grads: &[Vec<f64>], lr: f64, s: &TrainSettings) {
        self.t += 1;
        let bc1 = 1.0 - s.beta1.powi(self.t);
        let bc2 = 1.0 - s.beta2.powi(self.t);
        let mut idx = 0;
        params.weights.visit_mut(&mut |_, p: &mut Tensor| {
            let (m, v, g) = (&mut self.m[idx], &mut self.v[idx], &grads[idx]);
            let decay = if self.decay[idx] { lr * s.weight_decay } else { 0.0 };
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * g[k];
                v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= decay * *w;
                *w -= lr * mh / (vh.sqrt() + s.eps);
            }
            idx += 1;
        });
    }
}

/// Training and held-out scene index ranges.
pub fn split(dataset: &Dataset, eval_fraction: f64) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let n = dataset.scenes.len();
    let held = ((n as f64 * eval_fraction).round() as usize).clamp(usize::from(n > 1), n);
    (0..n - held, n - held..n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DecoderParams,
    pub step_losses: Vec<f64>,
    /// Mean loss per pass over the training split (the last may be partial).
    pub epoch_losses: Vec<f64>,
}

/// Loss and parameter gradients for one scene.
pub fn scene_gradients(
    cfg: &RunConfig,
    params: &DecoderParams,
    dataset: &Dataset,
    scene: &Scene,
    mp_seed: u64,
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let mp_cfg = cfg.mp_config()?;
    let part = match &mp_cfg {
        Some(c) => Some(build_mp_part(scene, &params.dims, c, mp_seed)?).filter(|p| !p.is_empty()),
        None => None,
    };
    let inputs = part.as_ref().map(|p| p.to_inputs(params.dims.num_queries));
    let pyramid = dataset.features(scene);
    let spec = ForwardSpec {
        pyramid: &pyramid,
        mp: inputs.as_ref(),
    };
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let out = forward_on_tape(&mut tape, &w, &params.dims, &spec)?;
    let loss = layer_losses(&mut tape, &out, scene, part.as_ref(), cfg.variant.loss_mode(), &cfg.loss)?;
    tape.backward(loss.total)?;
    let grads = w
        .named()
        .into_iter()
        .map(|(_, v)| tape.grad(*v).expect("parameter leaf").to_vec())
        .collect();
    Ok((loss.value, grads))
}

/// Trains from the seeded initialization on the training split.
pub fn train(
    cfg: &RunConfig,
    dataset: &Dataset,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let (train_range, _) = split(dataset, cfg.train.eval_fraction);
    if train_range.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let mut params = DecoderParams::init(cfg.model, seeds::derive(&[cfg.seed, TAG_INIT]));
    let mut opt = AdamW::new(&params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[cfg.seed, TAG_ORDER]));
    let mut order: Vec<usize> = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.train.steps);
    let mut epoch_losses = Vec::new();
    let mut epoch_sum = 0.0;
    let mut epoch_len = 0usize;

    for step in 0..cfg.train.steps {
        if order.is_empty() {
            if epoch_len > 0 {
                epoch_losses.push(epoch_sum / epoch_len as f64);
                (epoch_sum, epoch_len) = (0.0, 0);
            }
            order = train_range.clone().collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled above");
        let scene = &dataset.scenes[idx];
        let mp_seed = seeds::derive(&[cfg.seed, TAG_MP, step as u64]);
        let (loss, grads) = match scene_gradients(cfg, &params, dataset, scene, mp_seed) {
            Err(e) if e.is_numeric() => return Err(TrainError::NonFinite { step }),
            r => r?,
        };
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite { step });
        }
        let lr = learning_rate(&cfg.train, step);
        opt.step(&mut params, &grads, lr, &cfg.train);
        if !params.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        step_losses.push(loss);
        epoch_sum += loss;
        epoch_len += 1;
        on_step(&StepLog { step, loss, lr });
    }
    if epoch_len > 0 {
        epoch_losses.push(epoch_sum / epoch_len as f64);
    }
    Ok(TrainOutcome {
        params,
        step_losses,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::data::SynthConfig;
    use crate::decoder::ModelDims;

    fn tiny(variant: Variant, steps: usize) -> (RunConfig, Dataset) {
        let synth = SynthConfig {
            height: 8,
            width: 8,
            min_size: 2,
            max_size: 4,
            max_instances: 3,
            feature_dim: 8,
            num_scenes: 6,
            ..Default::default()
        };
        let cfg = RunConfig {
            synth: synth.clone(),
            model: ModelDims {
                num_queries: 4,
                num_layers: 3,
                dim: 8,
                ffn_dim: 8,
                num_categories: 4,
            },
            train: TrainSettings {
                steps,
                learning_rate: 1e-2,
                decay_steps: vec![],
                ..Default::default()
            },
            variant,
            ..Default::default()
        };
        (cfg, Dataset::generate(&synth).unwrap())
    }

    #[test]
    fn schedule_decays_at_points() {
        let t = TrainSettings::default();
        assert_eq!(learning_rate(&t, 0), 1e-4);
        assert!((learning_rate(&t, 900) - 1e-5).abs() < 1e-18);
        assert!((learning_rate(&t, 999) - 1e-6).abs() < 1e-19);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut params = DecoderParams::init(ModelDims::default(), 0);
        let before = params.clone();
        let mut opt = AdamW::new(&params);
        let grads: Vec<Vec<f64>> = params.weights.named().iter().map(|(_, t)| vec![1.0; t.numel()]).collect();
        let s = TrainSettings {
            weight_decay: 0.0,
            ..Default::default()
        };
        opt.step(&mut params, &grads, 1e-3, &s);
        for ((_, a), (_, b)) in before.weights.named().iter().zip(params.weights.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y - 1e-3).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn weight_decay_skips_embeddings() {
        let mut params = DecoderParams::init(ModelDims::default(), 0);
        let before = params.clone();
        let mut opt = AdamW::new(&params);
        let grads: Vec<Vec<f64>> = params.weights.named().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        opt.step(&mut params, &grads, 1.0, &TrainSettings::default());
        let (a, b) = (before.weights.named(), params.weights.named());
        for ((name, x), (_, y)) in a.iter().zip(&b) {
            if is_embedding(name) {
                assert_eq!(x, y);
            } else {
                let expected: Vec<f64> = x.data().iter().map(|v| v - 0.05 * v).collect();
                assert_eq!(y.data(), &expected[..], "{name}");
            }
        }
    }

    #[test]
    fn split_holds_out_tail() {
        let (_, ds) = tiny(Variant::Baseline, 1);
        let (tr, ev) = split(&ds, 0.2);
        assert_eq!((tr, ev), (0..5, 5..6));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        for variant in [Variant::Baseline, Variant::MpAllNoises, Variant::NaiveAuxLoss] {
            let (cfg, ds) = tiny(variant, 40);
            let a = train(&cfg, &ds, |_| {}).unwrap();
            let b = train(&cfg, &ds, |_| {}).unwrap();
            assert_eq!(a.params, b.params);
            assert_eq!(a.step_losses, b.step_losses);
            let first: f64 = a.step_losses[..5].iter().sum();
            let last: f64 = a.step_losses[35..].iter().sum();
            assert!(last < first, "{variant}: {first} -> {last}");
            assert_eq!(a.epoch_losses.len(), 8);
        }
    }

    #[test]
    fn diverging_run_reports_step() {
        let (mut cfg, ds) = tiny(Variant::Baseline, 50);
        cfg.train.learning_rate = 1e300;
        match train(&cfg, &ds, |_| {}) {
            Err(TrainError::NonFinite { step }) => assert!(step < 50),
            other => panic!("{other:?}"),
        }
    }
}
