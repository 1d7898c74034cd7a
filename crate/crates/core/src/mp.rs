//! Construction of the mask-piloted (MP) query part.
//!
//! Each GT instance is repeated over `n_g = ⌊n_q / n_o⌋` groups. An MP query
//! starts from its instance's class embedding (flipped to another category
//! with probability `λ_l`) and, in every piloted layer, attends through an
//! independently noised copy of the instance's GT mask instead of its own
//! previous prediction. Its predictions are assigned to that instance
//! directly, without matching.

use crate::data::{scale_extents, Scene};
use crate::decoder::{ModelDims, MpInputs, MpQueries};
use crate::maskops::{resize_nearest, to_attention_block, MaskError, NoiseKind, NoiseSpec};
use crate::seeds;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const TAG_LABEL: u64 = 11;
const TAG_MASK: u64 = 12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MpError {
    #[error("invalid MP config field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpConfig {
    pub enabled: bool,
    /// MP query budget `n_q`.
    pub num_queries: usize,
    /// Label flipping ratio `λ_l`.
    pub label_flip_ratio: f64,
    /// Mask noise; `noise.point_ratio` is `λ_p`.
    pub noise: NoiseSpec,
    /// 1-based layers that receive GT masks; `None` means every layer.
    pub layers: Option<Vec<usize>>,
}

impl Default for MpConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            num_queries: 20,
            label_flip_ratio: 0.2,
            noise: NoiseSpec {
                kind: NoiseKind::Point,
                point_ratio: 0.2,
                scale_range: (0.8, 1.2),
            },
            layers: None,
        }
    }
}

impl MpConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<(), MpError> {
        let err = |field, message: &str| MpError::Config {
            field,
            message: message.to_string(),
        };
        if self.num_queries == 0 {
            return Err(err("num_queries", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.label_flip_ratio) {
            return Err(err("label_flip_ratio", "must lie in [0, 1]"));
        }
        self.noise.validate()?;
        if let Some(layers) = &self.layers {
            if layers.iter().any(|&l| l == 0 || l > num_layers) {
                return Err(err("layers", "entries must lie in 1..=num_layers"));
            }
        }
        Ok(())
    }

    pub fn pilots_layer(&self, layer: usize) -> bool {
        self.layers.as_ref().is_none_or(|ls| ls.contains(&layer))
    }
}

/// `⌊n_q / n_o⌋` groups; 0 objects give no groups and more objects than
/// queries give a single truncated group.
pub fn dynamic_groups(n_q: usize, n_o: usize) -> usize {
    match n_o {
        0 => 0,
        o if o > n_q => 1,
        o => n_q / o,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MpQuery {
    pub group: usize,
    /// Index of the GT instance this query is assigned to.
    pub instance: usize,
    /// Category of that instance.
    pub gt_category: usize,
    /// Category whose embedding seeds the query (after label flipping).
    pub query_category: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpPart {
    pub num_groups: usize,
    pub group_sizes: Vec<usize>,
    pub queries: Vec<MpQuery>,
    /// `overrides[layer − 1][j]`, blocking grid at that layer's scale.
    pub overrides: Vec<Vec<Option<Vec<bool>>>>,
}

impl MpPart {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Hard assignment: MP query index → GT instance index.
    pub fn assignment(&self) -> Vec<usize> {
        self.queries.iter().map(|q| q.instance).collect()
    }

    /// Decoder inputs for this part appended after `n_match` matching queries.
    pub fn to_inputs(&self, n_match: usize) -> MpInputs {
        MpInputs {
            queries: MpQueries::Categories(self.queries.iter().map(|q| q.query_category).collect()),
            overrides: self.overrides.clone(),
            self_block: build_self_block(n_match, &self.group_sizes),
        }
    }
}

/// Self-attention blocking grid over `n_match + Σ group_sizes` queries.
/// Matching queries see only matching queries; MP queries see the matching
/// part and their own group.
pub fn build_self_block(n_match: usize, group_sizes: &[usize]) -> Vec<bool> {
    let total = n_match + group_sizes.iter().sum::<usize>();
    // group id per query; None for the matching part
    let mut group = vec![None; n_match];
    for (g, &s) in group_sizes.iter().enumerate() {
        group.extend(std::iter::repeat_n(Some(g), s));
    }
    let mut block = vec![false; total * total];
    for r in 0..total {
        for c in 0..total {
            block[r * total + c] = match (group[r], group[c]) {
                (None, Some(_)) => true,
                (Some(a), Some(b)) => a != b,
                _ => false,
            };
        }
    }
    block
}

/// Builds the MP part for `scene`. Deterministic in `seed`.
pub fn build_mp_part(
    scene: &Scene,
    dims: &ModelDims,
    cfg: &MpConfig,
    seed: u64,
) -> Result<MpPart, MpError> {
    cfg.validate(dims.num_layers)?;
    let n_o = scene.instances.len();
    let num_groups = dynamic_groups(cfg.num_queries, n_o);
    let per_group = n_o.min(cfg.num_queries);
    let k = dims.num_categories;

    let mut label_rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[seed, TAG_LABEL]));
    let mut queries = Vec::with_capacity(num_groups * per_group);
    for group in 0..num_groups {
        for (instance, inst) in scene.instances.iter().take(per_group).enumerate() {
            let flip: f64 = label_rng.gen();
            let query_category = if flip < cfg.label_flip_ratio && k > 1 {
                let o = label_rng.gen_range(0..k - 1);
                if o >= inst.category {
                    o + 1
                } else {
                    o
                }
            } else {
                inst.category
            };
            queries.push(MpQuery {
                group,
                instance,
                gt_category: inst.category,
                query_category,
            });
        }
    }

    let extents = scale_extents(scene.height, scene.width);
    let mut overrides = Vec::with_capacity(dims.num_layers);
    for layer in 1..=dims.num_layers {
        if !cfg.pilots_layer(layer) {
            overrides.push(vec![None; queries.len()]);
            continue;
        }
        let (h, w) = extents[ModelDims::scale_of_layer(layer)];
        let mut row = Vec::with_capacity(queries.len());
        for q in &queries {
            let gt = &scene.instances[q.instance].mask;
            let s = seeds::derive(&[seed, TAG_MASK, layer as u64, q.group as u64, q.instance as u64]);
            let noised = cfg.noise.apply(gt, s)?;
            row.push(Some(to_attention_block(&resize_nearest(&noised, h, w))));
        }
        overrides.push(row);
    }

    Ok(MpPart {
        num_groups,
        group_sizes: vec![per_group; num_groups],
        queries,
        overrides,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SynthConfig};

    fn dims() -> ModelDims {
        ModelDims::default()
    }

    #[test]
    fn dynamic_group_examples() {
        assert_eq!(dynamic_groups(100, 7), 14);
        assert_eq!(dynamic_groups(100, 100), 1);
        assert_eq!(dynamic_groups(20, 0), 0);
        assert_eq!(dynamic_groups(5, 9), 1);
    }

    #[test]
    fn empty_scene_gives_empty_part() {
        let mut scene = generate_scene(&SynthConfig::default(), 0).unwrap();
        scene.instances.clear();
        let part = build_mp_part(&scene, &dims(), &MpConfig::default(), 1).unwrap();
        assert!(part.is_empty());
        assert_eq!(part.num_groups, 0);
    }

    #[test]
    fn more_objects_than_budget_truncates() {
        let cfg = SynthConfig {
            min_instances: 6,
            max_instances: 6,
            ..Default::default()
        };
        let scene = generate_scene(&cfg, 2).unwrap();
        let mp = MpConfig {
            num_queries: 4,
            ..Default::default()
        };
        let part = build_mp_part(&scene, &dims(), &mp, 3).unwrap();
        assert_eq!(part.num_groups, 1);
        assert_eq!(part.assignment(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn noiseless_part_reproduces_gt() {
        let scene = generate_scene(&SynthConfig::default(), 5).unwrap();
        let mp = MpConfig {
            label_flip_ratio: 0.0,
            noise: NoiseSpec {
                point_ratio: 0.0,
                ..MpConfig::default().noise
            },
            ..Default::default()
        };
        let part = build_mp_part(&scene, &dims(), &mp, 9).unwrap();
        let n_o = scene.instances.len();
        assert_eq!(part.num_groups, 20 / n_o);
        for (j, q) in part.queries.iter().enumerate() {
            assert_eq!(q.query_category, scene.instances[q.instance].category);
            assert_eq!(q.instance, j % n_o);
            assert_eq!(q.group, j / n_o);
            for layer in 1..=9 {
                let (h, w) = scale_extents(32, 32)[ModelDims::scale_of_layer(layer)];
                let expected = to_attention_block(&resize_nearest(&scene.instances[q.instance].mask, h, w));
                assert_eq!(part.overrides[layer - 1][j].as_ref().unwrap(), &expected);
            }
        }
    }

    #[test]
    fn forced_flip_with_two_categories() {
        let synth = SynthConfig {
            num_categories: 2,
            ..Default::default()
        };
        let d = ModelDims {
            num_categories: 2,
            ..dims()
        };
        for index in 0..20 {
            let scene = generate_scene(&synth, index).unwrap();
            let mp = MpConfig {
                label_flip_ratio: 1.0,
                ..Default::default()
            };
            let part = build_mp_part(&scene, &d, &mp, index as u64).unwrap();
            for q in &part.queries {
                assert_eq!(q.query_category, 1 - q.gt_category);
            }
        }
    }

    #[test]
    fn flips_never_pick_own_category_and_follow_ratio() {
        let scene = generate_scene(&SynthConfig::default(), 1).unwrap();
        let mut flips = 0usize;
        let mut total = 0usize;
        for seed in 0..400 {
            let part = build_mp_part(&scene, &dims(), &MpConfig::default(), seed).unwrap();
            for q in &part.queries {
                total += 1;
                flips += (q.query_category != q.gt_category) as usize;
                assert!(q.query_category < 4);
            }
        }
        let rate = flips as f64 / total as f64;
        assert!((rate - 0.2).abs() < 0.03, "flip rate {rate}");
    }

    #[test]
    fn partial_layers_use_previous_prediction() {
        let scene = generate_scene(&SynthConfig::default(), 3).unwrap();
        let mp = MpConfig {
            layers: Some(vec![1, 2, 3]),
            ..Default::default()
        };
        let part = build_mp_part(&scene, &dims(), &mp, 0).unwrap();
        for layer in 1..=9 {
            let all_some = part.overrides[layer - 1].iter().all(Option::is_some);
            let all_none = part.overrides[layer - 1].iter().all(Option::is_none);
            assert!(if layer <= 3 { all_some } else { all_none });
        }
        let bad = MpConfig {
            layers: Some(vec![0]),
            ..Default::default()
        };
        assert!(build_mp_part(&scene, &dims(), &bad, 0).is_err());
    }

    #[test]
    fn independent_noise_per_layer_golden() {
        let synth = SynthConfig {
            min_instances: 1,
            max_instances: 1,
            ..Default::default()
        };
        let scene = generate_scene(&synth, 4).unwrap();
        // layers 3 and 6 share the 32x32 scale, so their grids are comparable
        let mp = MpConfig {
            layers: Some(vec![3, 6]),
            ..Default::default()
        };
        let part = build_mp_part(&scene, &dims(), &mp, 42).unwrap();
        let a = part.overrides[2][0].as_ref().unwrap();
        let b = part.overrides[5][0].as_ref().unwrap();
        assert_ne!(a, b);
        let render = |g: &[bool]| -> String {
            g.iter().map(|&blocked| if blocked { '0' } else { '1' }).collect()
        };
        let golden = include_str!("../tests/golden/mp_layers_3_6_seed42.txt");
        let mut lines = golden.lines();
        assert_eq!(render(a), lines.next().unwrap());
        assert_eq!(render(b), lines.next().unwrap());
    }

    #[test]
    fn self_block_examples() {
        assert_eq!(build_self_block(3, &[]), vec![false; 9]);
        let b = build_self_block(2, &[2, 2]);
        let t = 6;
        let blocked: Vec<Vec<usize>> = (0..t)
            .map(|r| (0..t).filter(|&c| b[r * t + c]).collect())
            .collect();
        assert_eq!(
            blocked,
            vec![
                vec![2, 3, 4, 5],
                vec![2, 3, 4, 5],
                vec![4, 5],
                vec![4, 5],
                vec![2, 3],
                vec![2, 3]
            ]
        );
        assert_eq!(build_self_block(0, &[1]), vec![false]);
    }
}
