//! Held-out evaluation and the layer-wise analysis table.

use crate::data::{Dataset, Scene};
use crate::decoder::{full_forward, inference_forward, DecoderParams, ForwardSpec, LayerOutputs};
use crate::matching::{cost_matrix, hungarian, match_layers, LossWeights, MatchError};
use crate::metrics::{
    ap_lite, detections, miou_layerwise, util_layerwise, util_mp_hard, ApLite, Detection, MatchingVectors,
    MetricsError,
};
use crate::mp::{build_mp_part, MpConfig, MpError};
use crate::tensor::TensorError;
use rayon::prelude::*;
use thiserror::Error;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "MPSEG_THREADS";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("model/dataset mismatch: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Mp(#[from] MpError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Per-scene diagnostics of the matching part.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEval {
    pub miou: Vec<f64>,
    /// `None` for scenes without instances.
    pub util: Option<Vec<f64>>,
    pub detections: Vec<Detection>,
}

/// Aggregated evaluation over a scene set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scenes: usize,
    /// Mean mIoU-L for passes `1..=L`.
    pub miou: Vec<f64>,
    /// Mean Util for passes `0..=L` over scenes with at least one instance.
    pub util: Vec<f64>,
    pub ap: ApLite,
    /// Final-pass Util is 1 on every scene where `N ≥ O > 0`.
    pub final_util_forced: bool,
}

pub fn check_compatible(params: &DecoderParams, dataset: &Dataset) -> Result<(), EvalError> {
    let (d, c) = (&params.dims, &dataset.config);
    if d.dim != c.feature_dim {
        return Err(EvalError::Incompatible(format!(
            "model dim {} vs feature_dim {}",
            d.dim, c.feature_dim
        )));
    }
    if d.num_categories != c.num_categories {
        return Err(EvalError::Incompatible(format!(
            "model has {} categories, dataset {}",
            d.num_categories, c.num_categories
        )));
    }
    Ok(())
}

/// Runs `f` inside a pool capped by `MPSEG_THREADS` when set.
pub fn with_threads<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T, EvalError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| EvalError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

fn scene_eval(outputs: &LayerOutputs, scene: &Scene, w: &LossWeights) -> Result<SceneEval, EvalError> {
    let miou = miou_layerwise(outputs);
    let util = if scene.instances.is_empty() {
        None
    } else {
        let v = MatchingVectors::from_assignments(&match_layers(outputs, scene, w)?);
        Some(util_layerwise(&v, scene.instances.len())?)
    };
    Ok(SceneEval {
        miou,
        util,
        detections: detections(outputs),
    })
}

/// Evaluates the matching part with MP disabled, in parallel over scenes and
/// merged in scene order. `forward` selects the forward implementation.
pub fn evaluate_with(
    params: &DecoderParams,
    dataset: &Dataset,
    scenes: &[usize],
    w: &LossWeights,
    forward: &(dyn Fn(&Dataset, &Scene, &DecoderParams) -> Result<LayerOutputs, EvalError> + Sync),
) -> Result<Evaluation, EvalError> {
    if scenes.is_empty() {
        return Err(EvalError::Empty("no scenes selected"));
    }
    check_compatible(params, dataset)?;
    let per_scene: Vec<SceneEval> = with_threads(|| {
        scenes
            .par_iter()
            .map(|&i| {
                let scene = &dataset.scenes[i];
                scene_eval(&forward(dataset, scene, params)?, scene, w)
            })
            .collect::<Result<Vec<_>, EvalError>>()
    })??;

    let layers = params.dims.num_layers;
    let mut miou = vec![0.0; layers];
    let mut util = vec![0.0; layers + 1];
    let mut counted = 0usize;
    let mut forced = true;
    for (s, &i) in per_scene.iter().zip(scenes) {
        for (acc, v) in miou.iter_mut().zip(&s.miou) {
            *acc += v;
        }
        if let Some(u) = &s.util {
            counted += 1;
            for (acc, v) in util.iter_mut().zip(u) {
                *acc += v;
            }
            if params.dims.num_queries >= dataset.scenes[i].instances.len() {
                forced &= u[layers] == 1.0;
            }
        }
    }
    miou.iter_mut().for_each(|v| *v /= per_scene.len() as f64);
    if counted > 0 {
        util.iter_mut().for_each(|v| *v /= counted as f64);
    }
    let dets: Vec<Vec<Detection>> = per_scene.into_iter().map(|s| s.detections).collect();
    let picked: Vec<Scene> = scenes.iter().map(|&i| dataset.scenes[i].clone()).collect();
    Ok(Evaluation {
        scenes: scenes.len(),
        miou,
        util,
        ap: ap_lite(&dets, &picked)?,
        final_util_forced: forced,
    })
}

/// Evaluation through the tape-free inference forward.
pub fn evaluate(
    params: &DecoderParams,
    dataset: &Dataset,
    scenes: &[usize],
    w: &LossWeights,
) -> Result<Evaluation, EvalError> {
    evaluate_with(params, dataset, scenes, w, &|ds, scene, p| {
        Ok(inference_forward(&ds.features(scene), p))
    })
}

/// Evaluation through the training forward with the MP part switched off.
pub fn evaluate_training_path(
    params: &DecoderParams,
    dataset: &Dataset,
    scenes: &[usize],
    w: &LossWeights,
) -> Result<Evaluation, EvalError> {
    evaluate_with(params, dataset, scenes, w, &|ds, scene, p| {
        let pyramid = ds.features(scene);
        Ok(full_forward(&ForwardSpec { pyramid: &pyramid, mp: None }, p)?)
    })
}

/// Table-1 style rows: matching part plus MP-part Util under hard and
/// bipartite assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub matching: Evaluation,
    /// Passes `0..=L`.
    pub mp_util_hard: Vec<f64>,
    pub mp_util_bipartite: Vec<f64>,
}

/// MP-part Util for one scene: hard assignment, and per-group bipartite
/// matching averaged over groups.
fn mp_scene_util(
    params: &DecoderParams,
    dataset: &Dataset,
    scene: &Scene,
    mp_cfg: &MpConfig,
    w: &LossWeights,
    seed: u64,
) -> Result<Option<(Vec<f64>, Vec<f64>)>, EvalError> {
    let part = build_mp_part(scene, &params.dims, mp_cfg, seed)?;
    if part.is_empty() {
        return Ok(None);
    }
    let inputs = part.to_inputs(params.dims.num_queries);
    let pyramid = dataset.features(scene);
    let out = full_forward(
        &ForwardSpec {
            pyramid: &pyramid,
            mp: Some(&inputs),
        },
        params,
    )?;
    let passes = out.layers.len();
    let hard = util_mp_hard(&part.assignment(), passes - 1)?;
    let n = out.n_match;
    let mut bip = vec![0.0; passes];
    let mut start = n;
    for &size in &part.group_sizes {
        let group_scene = Scene {
            instances: scene.instances[..size].to_vec(),
            ..scene.clone()
        };
        let mut layers = Vec::with_capacity(passes);
        for l in &out.layers {
            let rows = |t: &crate::tensor::Tensor| {
                let c = t.cols();
                crate::tensor::Tensor::matrix(size, c, t.data()[start * c..(start + size) * c].to_vec())
            };
            let pred = crate::decoder::LayerPrediction {
                mask_logits: rows(&l.mask_logits)?,
                class_logits: rows(&l.class_logits)?,
            };
            layers.push(hungarian(&cost_matrix(&pred, size, &group_scene, w)?)?);
        }
        let u = util_layerwise(&MatchingVectors::from_assignments(&layers), size)?;
        for (acc, v) in bip.iter_mut().zip(u) {
            *acc += v;
        }
        start += size;
    }
    bip.iter_mut().for_each(|v| *v /= part.group_sizes.len() as f64);
    Ok(Some((vec![hard; passes], bip)))
}

pub fn analyze(
    params: &DecoderParams,
    dataset: &Dataset,
    scenes: &[usize],
    mp_cfg: &MpConfig,
    w: &LossWeights,
    seed: u64,
) -> Result<Analysis, EvalError> {
    let matching = evaluate(params, dataset, scenes, w)?;
    let rows: Vec<Option<(Vec<f64>, Vec<f64>)>> = with_threads(|| {
        scenes
            .par_iter()
            .map(|&i| {
                let s = crate::seeds::derive(&[seed, i as u64]);
                mp_scene_util(params, dataset, &dataset.scenes[i], mp_cfg, w, s)
            })
            .collect::<Result<Vec<_>, EvalError>>()
    })??;
    let passes = params.dims.num_layers + 1;
    let (mut hard, mut bip, mut count) = (vec![0.0; passes], vec![0.0; passes], 0usize);
    for (h, b) in rows.into_iter().flatten() {
        count += 1;
        for k in 0..passes {
            hard[k] += h[k];
            bip[k] += b[k];
        }
    }
    if count == 0 {
        return Err(EvalError::Empty("no scene has instances"));
    }
    hard.iter_mut().chain(bip.iter_mut()).for_each(|v| *v /= count as f64);
    Ok(Analysis {
        matching,
        mp_util_hard: hard,
        mp_util_bipartite: bip,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthConfig;
    use crate::decoder::ModelDims;

    fn setup() -> (DecoderParams, Dataset) {
        let synth = SynthConfig {
            height: 8,
            width: 8,
            min_size: 2,
            max_size: 4,
            feature_dim: 8,
            num_scenes: 6,
            ..Default::default()
        };
        let dims = ModelDims {
            num_queries: 8,
            num_layers: 3,
            dim: 8,
            ffn_dim: 8,
            num_categories: 4,
        };
        (DecoderParams::init(dims, 1), Dataset::generate(&synth).unwrap())
    }

    #[test]
    fn inference_and_training_paths_agree() {
        let (p, ds) = setup();
        let idx: Vec<usize> = (0..6).collect();
        let w = LossWeights::default();
        let a = evaluate(&p, &ds, &idx, &w).unwrap();
        let b = evaluate_training_path(&p, &ds, &idx, &w).unwrap();
        assert_eq!(a, b);
        assert!(a.final_util_forced);
        assert_eq!(a.util.last(), Some(&1.0));
        assert_eq!(a.miou.len(), 3);
    }

    #[test]
    fn empty_selection_and_mismatch_fail() {
        let (p, ds) = setup();
        let w = LossWeights::default();
        assert!(matches!(evaluate(&p, &ds, &[], &w), Err(EvalError::Empty(_))));
        let other = DecoderParams::init(
            ModelDims {
                dim: 16,
                ..p.dims
            },
            0,
        );
        assert!(matches!(evaluate(&other, &ds, &[0], &w), Err(EvalError::Incompatible(_))));
    }

    #[test]
    fn analysis_hard_util_is_one() {
        let (p, ds) = setup();
        let mp = MpConfig {
            label_flip_ratio: 0.0,
            noise: crate::maskops::NoiseSpec {
                kind: crate::maskops::NoiseKind::None,
                ..MpConfig::default().noise
            },
            ..Default::default()
        };
        let a = analyze(&p, &ds, &[0, 1, 2], &mp, &LossWeights::default(), 0).unwrap();
        assert_eq!(a.mp_util_hard, vec![1.0; 4]);
        assert_eq!(a.mp_util_bipartite[3], 1.0);
        assert!(a.mp_util_bipartite.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
