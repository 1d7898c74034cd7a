//! Layer-wise consistency metrics, AP-lite and the refinement-threshold
//! analysis.

use crate::data::Scene;
use crate::decoder::LayerOutputs;
use crate::kernels;
use crate::maskops::{iou, BinaryMask};
use crate::matching::Assignment;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("{0}")]
    Empty(&'static str),
    #[error("length mismatch in {what}: {left} vs {right}")]
    Length {
        what: &'static str,
        left: usize,
        right: usize,
    },
}

/// Per-query GT index (or `None`) for every prediction pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchingVectors {
    pub layers: Vec<Vec<Option<usize>>>,
}

impl MatchingVectors {
    pub fn from_assignments(a: &[Assignment]) -> Self {
        Self {
            layers: a.iter().map(|x| x.matches.clone()).collect(),
        }
    }

    /// Indices written as `-1` for unmatched queries.
    pub fn as_signed(&self) -> Vec<Vec<i64>> {
        self.layers
            .iter()
            .map(|l| l.iter().map(|v| v.map_or(-1, |g| g as i64)).collect())
            .collect()
    }
}

/// mIoU-L for passes `1..=L`: mean over matching queries of the IoU between
/// the binarized masks of consecutive passes.
pub fn miou_layerwise(outputs: &LayerOutputs) -> Vec<f64> {
    let n = outputs.n_match;
    let masks: Vec<Vec<BinaryMask>> = (0..outputs.layers.len())
        .map(|l| (0..n).map(|q| outputs.binary_mask(l, q)).collect())
        .collect();
    (1..masks.len())
        .map(|i| {
            let total: f64 = (0..n)
                .map(|q| iou(&masks[i - 1][q], &masks[i][q]).expect("same extents"))
                .sum();
            total / n as f64
        })
        .collect()
}

/// Util for every pass: matches that agree with the last pass, over `O`.
pub fn util_layerwise(v: &MatchingVectors, num_gt: usize) -> Result<Vec<f64>, MetricsError> {
    if num_gt == 0 {
        return Err(MetricsError::Empty("Util needs at least one GT instance"));
    }
    let last = v.layers.last().ok_or(MetricsError::Empty("no layers"))?;
    v.layers
        .iter()
        .map(|layer| {
            if layer.len() != last.len() {
                return Err(MetricsError::Length {
                    what: "matching vectors",
                    left: layer.len(),
                    right: last.len(),
                });
            }
            let agree = layer
                .iter()
                .zip(last)
                .filter(|(a, b)| a.is_some() && a == b)
                .count();
            Ok(agree as f64 / num_gt as f64)
        })
        .collect()
}

/// Util of the hard-assigned MP part. Every MP query keeps its GT target at
/// every pass, so the fraction of queries agreeing with the last pass is 1.
pub fn util_mp_hard(assignment: &[usize], num_layers: usize) -> Result<f64, MetricsError> {
    if assignment.is_empty() {
        return Err(MetricsError::Empty("MP part is empty"));
    }
    let v = MatchingVectors {
        layers: vec![assignment.iter().copied().map(Some).collect(); num_layers + 1],
    };
    let per_layer = util_layerwise(&v, assignment.len())?;
    Ok(per_layer.into_iter().fold(f64::INFINITY, f64::min))
}

/// One scored mask prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub category: usize,
    pub score: f64,
    pub mask: BinaryMask,
}

/// Final-pass detections of the matching queries: most likely non-background
/// class, scored by class probability times mean foreground probability.
/// Queries with an empty mask are dropped.
pub fn detections(outputs: &LayerOutputs) -> Vec<Detection> {
    let last = outputs.layers.len() - 1;
    let pred = &outputs.layers[last];
    let classes = pred.class_logits.cols();
    let mut probs = pred.class_logits.data()[..outputs.n_match * classes].to_vec();
    kernels::softmax_rows(&mut probs, classes);
    (0..outputs.n_match)
        .filter_map(|q| {
            let p = &probs[q * classes..(q + 1) * classes - 1];
            let (category, &pc) = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))?;
            let logits = outputs.mask_row(last, q);
            let mask = outputs.binary_mask(last, q);
            let fg: Vec<f64> = logits
                .iter()
                .filter(|&&x| x > 0.0)
                .map(|&x| kernels::sigmoid(x))
                .collect();
            if fg.is_empty() {
                return None;
            }
            let mask_score = fg.iter().sum::<f64>() / fg.len() as f64;
            Some(Detection {
                category,
                score: pc * mask_score,
                mask,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApLite {
    pub ap50: f64,
    pub ap75: f64,
    pub mean: f64,
}

/// AP at one IoU threshold: greedy matching by descending score, 101-point
/// interpolated precision, averaged over categories that have GT.
pub fn average_precision(
    detections: &[Vec<Detection>],
    scenes: &[Scene],
    threshold: f64,
) -> Result<f64, MetricsError> {
    if detections.len() != scenes.len() {
        return Err(MetricsError::Length {
            what: "detections vs scenes",
            left: detections.len(),
            right: scenes.len(),
        });
    }
    let num_categories = scenes
        .iter()
        .flat_map(|s| s.instances.iter().map(|i| i.category + 1))
        .chain(detections.iter().flatten().map(|d| d.category + 1))
        .max()
        .unwrap_or(0);
    let mut aps = Vec::new();
    for c in 0..num_categories {
        let num_gt: usize = scenes
            .iter()
            .map(|s| s.instances.iter().filter(|i| i.category == c).count())
            .sum();
        if num_gt == 0 {
            continue;
        }
        let mut ranked: Vec<(f64, usize, &BinaryMask)> = detections
            .iter()
            .enumerate()
            .flat_map(|(s, ds)| {
                ds.iter()
                    .filter(|d| d.category == c)
                    .map(move |d| (d.score, s, &d.mask))
            })
            .collect();
        // stable: ties keep scene and query order
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut used: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.instances.len()]).collect();
        let mut tp = 0usize;
        let mut curve = Vec::with_capacity(ranked.len());
        for (rank, (_, s, mask)) in ranked.iter().enumerate() {
            let mut best: Option<(f64, usize)> = None;
            for (g, inst) in scenes[*s].instances.iter().enumerate() {
                if inst.category != c || used[*s][g] {
                    continue;
                }
                let v = iou(mask, &inst.mask).expect("same extents");
                if v >= threshold && best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, g));
                }
            }
            if let Some((_, g)) = best {
                used[*s][g] = true;
                tp += 1;
            }
            curve.push((tp as f64 / num_gt as f64, tp as f64 / (rank + 1) as f64));
        }
        let mut sum = 0.0;
        for r in 0..=100 {
            let recall = r as f64 / 100.0;
            let p = curve
                .iter()
                .filter(|(rc, _)| *rc >= recall - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            sum += p;
        }
        aps.push(sum / 101.0);
    }
    if aps.is_empty() {
        return Ok(0.0);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn ap_lite(detections: &[Vec<Detection>], scenes: &[Scene]) -> Result<ApLite, MetricsError> {
    let ap50 = average_precision(detections, scenes, 0.5)?;
    let ap75 = average_precision(detections, scenes, 0.75)?;
    Ok(ApLite {
        ap50,
        ap75,
        mean: (ap50 + ap75) / 2.0,
    })
}

/// Pixels of a two-category region used in the refinement analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementInput {
    pub features: Vec<Vec<f64>>,
    /// `false` for `C₀`, `true` for `C₁`.
    pub in_c1: Vec<bool>,
    pub in_m0: Vec<bool>,
    /// Attention weight of each pixel; only pixels inside `M₀` are used.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementBounds {
    /// `[T₀, T₁]`: dot products between same-category pixels.
    pub intra: (f64, f64),
    /// `[t₀, t₁]`: dot products between pixels of different categories.
    pub inter: (f64, f64),
    pub sum_alpha: f64,
    pub sum_beta: f64,
    /// `(T₀ − t₁)/(T₁ − t₀)`, defined only when `T₁ > t₀`.
    pub ratio_bound: Option<f64>,
    /// `Σβ/Σα < (T₀ − t₁)/(T₁ − t₀)`.
    pub condition: bool,
    /// Thresholds `thresh` with every `C₀` score `≥ thresh` and every `C₁`
    /// score `< thresh` guaranteed by the bounds: `(t₁Σα + T₁Σβ, T₀Σα + t₀Σβ]`.
    pub interval: Option<(f64, f64)>,
    /// `T₀ ≤ t₁`: the two dot-product ranges overlap.
    pub partial: bool,
    /// Separating threshold found by scanning the actual scores.
    pub scanned_threshold: Option<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    kernels::dot(a, b)
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

pub fn refinement_bounds(input: &RefinementInput) -> Result<RefinementBounds, MetricsError> {
    let n = input.features.len();
    for (what, len) in [
        ("in_c1", input.in_c1.len()),
        ("in_m0", input.in_m0.len()),
        ("weights", input.weights.len()),
    ] {
        if len != n {
            return Err(MetricsError::Length {
                what,
                left: len,
                right: n,
            });
        }
    }
    let m0: Vec<usize> = (0..n).filter(|&i| input.in_m0[i]).collect();
    if !m0.iter().any(|&i| !input.in_c1[i]) || !m0.iter().any(|&i| input.in_c1[i]) {
        return Err(MetricsError::Empty("M0 must intersect both categories"));
    }
    if m0.iter().any(|&i| input.weights[i] < 0.0) {
        return Err(MetricsError::Empty("attention weights must be nonnegative"));
    }

    let pairs = |same: bool| {
        m0.iter().flat_map(move |&i| {
            (0..n)
                .filter(move |&k| (input.in_c1[i] == input.in_c1[k]) == same)
                .map(move |k| dot(&input.features[i], &input.features[k]))
        })
    };
    let intra = min_max(pairs(true));
    let inter = min_max(pairs(false));
    let (big_t0, big_t1) = intra;
    let (t0, t1) = inter;

    let sum_alpha: f64 = m0.iter().filter(|&&i| !input.in_c1[i]).map(|&i| input.weights[i]).sum();
    let sum_beta: f64 = m0.iter().filter(|&&i| input.in_c1[i]).map(|&i| input.weights[i]).sum();

    let ratio_bound = (big_t1 > t0).then(|| (big_t0 - t1) / (big_t1 - t0));
    let condition = match ratio_bound {
        Some(b) if sum_alpha > 0.0 => sum_beta / sum_alpha < b,
        _ => false,
    };
    let c1_upper = t1 * sum_alpha + big_t1 * sum_beta;
    let c0_lower = big_t0 * sum_alpha + t0 * sum_beta;
    let interval = (c0_lower > c1_upper).then_some((c1_upper, c0_lower));

    let scores: Vec<(f64, bool)> = (0..n)
        .map(|k| {
            let s = m0
                .iter()
                .map(|&i| input.weights[i] * dot(&input.features[i], &input.features[k]))
                .sum();
            (s, input.in_c1[k])
        })
        .collect();
    Ok(RefinementBounds {
        intra,
        inter,
        sum_alpha,
        sum_beta,
        ratio_bound,
        condition,
        interval,
        partial: big_t0 <= t1,
        scanned_threshold: scan_threshold(&scores),
    })
}

/// Smallest candidate threshold (taken from the scores themselves) that puts
/// every `C₀` score at or above it and every `C₁` score below it.
fn scan_threshold(scores: &[(f64, bool)]) -> Option<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let c1_total = sorted.iter().filter(|s| s.1).count();
    // (C0, C1) counts strictly below the current candidate
    let (mut c0_below, mut c1_below) = (0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let thresh = sorted[i].0;
        if c0_below == 0 && c1_below == c1_total {
            return Some(thresh);
        }
        while i < sorted.len() && sorted[i].0 == thresh {
            if sorted[i].1 {
                c1_below += 1;
            } else {
                c0_below += 1;
            }
            i += 1;
        }
    }
    None
}

/// Attention-mass ratio `Σβ/Σα` next to the area ratio `|β|/|α|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightRatio {
    pub weight_ratio: f64,
    pub area_ratio: f64,
}

pub fn unbiased_weight_ratio(alpha: &[f64], beta: &[f64]) -> Result<WeightRatio, MetricsError> {
    if alpha.is_empty() {
        return Err(MetricsError::Empty("M0 ∩ C0 is empty"));
    }
    let sa: f64 = alpha.iter().sum();
    let sb: f64 = beta.iter().sum();
    Ok(WeightRatio {
        weight_ratio: sb / sa,
        area_ratio: beta.len() as f64 / alpha.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Instance;
    use crate::decoder::LayerPrediction;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn outputs(masks_per_layer: Vec<Vec<Vec<f64>>>, hw: (usize, usize)) -> LayerOutputs {
        let n = masks_per_layer[0].len();
        LayerOutputs {
            layers: masks_per_layer
                .into_iter()
                .map(|m| LayerPrediction {
                    mask_logits: Tensor::from_rows(&m).unwrap(),
                    class_logits: Tensor::zeros(vec![n, 3]),
                })
                .collect(),
            n_match: n,
            n_mp: 0,
            height: hw.0,
            width: hw.1,
        }
    }

    fn logits(bits: &[u8]) -> Vec<f64> {
        bits.iter().map(|&b| if b == 1 { 5.0 } else { -5.0 }).collect()
    }

    #[test]
    fn miou_examples() {
        let a = logits(&[1, 1, 0, 0]);
        let b = logits(&[0, 0, 1, 1]);
        let same = outputs(vec![vec![a.clone(), b.clone()]; 3], (2, 2));
        assert_eq!(miou_layerwise(&same), vec![1.0, 1.0]);
        let swapped = outputs(vec![vec![a.clone(), b.clone()], vec![b.clone(), a.clone()]], (2, 2));
        assert_eq!(miou_layerwise(&swapped), vec![0.0]);
        let third = outputs(
            vec![
                vec![a.clone(), logits(&[1, 0, 0, 0])],
                vec![a.clone(), logits(&[1, 1, 1, 0])],
            ],
            (2, 2),
        );
        assert!((miou_layerwise(&third)[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    fn mv(layers: &[&[i64]]) -> MatchingVectors {
        MatchingVectors {
            layers: layers
                .iter()
                .map(|l| l.iter().map(|&v| (v >= 0).then_some(v as usize)).collect())
                .collect(),
        }
    }

    #[test]
    fn util_examples() {
        let v = mv(&[&[0, 1, -1], &[0, 1, -1]]);
        assert_eq!(util_layerwise(&v, 2).unwrap(), vec![1.0, 1.0]);
        let v = mv(&[&[-1, -1, -1], &[0, 1, -1]]);
        assert_eq!(util_layerwise(&v, 2).unwrap()[0], 0.0);
        let v = mv(&[&[0, 2, -1, 1], &[0, 1, -1, 2]]);
        assert!((util_layerwise(&v, 3).unwrap()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!(util_layerwise(&v, 0).is_err());
        assert_eq!(mv(&[&[0, -1, 2]]).as_signed(), vec![vec![0, -1, 2]]);
    }

    #[test]
    fn util_mp_hard_is_one() {
        assert_eq!(util_mp_hard(&[0, 1, 2, 0, 1, 2], 9).unwrap(), 1.0);
        assert_eq!(util_mp_hard(&[0], 9).unwrap(), 1.0);
        assert!(util_mp_hard(&[], 9).is_err());
    }

    proptest! {
        #[test]
        fn util_and_miou_invariant_under_query_permutation(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let layers: Vec<Vec<Option<usize>>> = (0..4)
                .map(|_| (0..n).map(|_| { let g: i64 = rng.gen_range(-1..3); (g >= 0).then_some(g as usize) }).collect())
                .collect();
            let masks: Vec<Vec<Vec<f64>>> = (0..4)
                .map(|_| (0..n).map(|_| (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
                .collect();
            let perm = [3usize, 0, 4, 1, 2];
            let pl: Vec<Vec<Option<usize>>> = layers.iter().map(|l| perm.iter().map(|&p| l[p]).collect()).collect();
            let pm: Vec<Vec<Vec<f64>>> = masks.iter().map(|l| perm.iter().map(|&p| l[p].clone()).collect()).collect();
            let a = util_layerwise(&MatchingVectors { layers }, 3).unwrap();
            let b = util_layerwise(&MatchingVectors { layers: pl }, 3).unwrap();
            prop_assert_eq!(a, b);
            let ma = miou_layerwise(&outputs(masks, (3, 3)));
            let mb = miou_layerwise(&outputs(pm, (3, 3)));
            for (x, y) in ma.iter().zip(&mb) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(x));
            }
        }
    }

    fn scene(instances: Vec<(usize, BinaryMask)>) -> Scene {
        Scene {
            index: 0,
            height: 4,
            width: 4,
            instances: instances
                .into_iter()
                .map(|(category, mask)| Instance { category, mask })
                .collect(),
        }
    }

    fn block(y0: usize, x0: usize) -> BinaryMask {
        BinaryMask::from_fn(4, 4, |y, x| (y0..y0 + 2).contains(&y) && (x0..x0 + 2).contains(&x))
    }

    #[test]
    fn ap_examples() {
        let s = scene(vec![(0, block(0, 0)), (1, block(2, 2))]);
        let perfect: Vec<Detection> = s
            .instances
            .iter()
            .map(|i| Detection {
                category: i.category,
                score: 0.9,
                mask: i.mask.clone(),
            })
            .collect();
        let ap = ap_lite(&[perfect], std::slice::from_ref(&s)).unwrap();
        assert_eq!((ap.ap50, ap.ap75), (1.0, 1.0));
        let ap = ap_lite(&[vec![]], std::slice::from_ref(&s)).unwrap();
        assert_eq!((ap.ap50, ap.ap75), (0.0, 0.0));

        let two = scene(vec![(0, block(0, 0)), (0, block(2, 2))]);
        let one = vec![Detection {
            category: 0,
            score: 0.9,
            mask: block(0, 0),
        }];
        let ap = average_precision(&[one], &[two], 0.5).unwrap();
        // 101-point interpolation: recall levels 0..=0.5 carry precision 1
        assert_eq!(ap, 51.0 / 101.0);
        assert!((ap - 0.5).abs() < 0.01);
    }

    #[test]
    fn ap_is_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = scene(vec![(0, block(0, 0)), (1, block(2, 2)), (0, block(0, 2))]);
            let dets: Vec<Detection> = (0..4)
                .map(|_| Detection {
                    category: rng.gen_range(0..2),
                    score: rng.gen(),
                    mask: BinaryMask::from_bits(4, 4, (0..16).map(|_| rng.gen_bool(0.4)).collect()).unwrap(),
                })
                .collect();
            let ap = ap_lite(&[dets], &[s]).unwrap();
            assert!(ap.ap50 >= ap.ap75);
            assert!((0.0..=1.0).contains(&ap.ap50));
        }
    }

    fn orthonormal_input(c0: usize, c1: usize, m0_c0: usize, m0_c1: usize) -> RefinementInput {
        let n = c0 + c1;
        let in_c1: Vec<bool> = (0..n).map(|i| i >= c0).collect();
        let features = in_c1
            .iter()
            .map(|&b| if b { vec![0.0, 1.0] } else { vec![1.0, 0.0] })
            .collect();
        let in_m0: Vec<bool> = (0..n).map(|i| i < m0_c0 || (i >= c0 && i < c0 + m0_c1)).collect();
        let w = 1.0 / (m0_c0 + m0_c1) as f64;
        RefinementInput {
            features,
            in_c1,
            weights: in_m0.iter().map(|&m| if m { w } else { 0.0 }).collect(),
            in_m0,
        }
    }

    #[test]
    fn refinement_orthonormal_case() {
        let r = refinement_bounds(&orthonormal_input(12, 12, 10, 5)).unwrap();
        assert_eq!(r.intra, (1.0, 1.0));
        assert_eq!(r.inter, (0.0, 0.0));
        assert_eq!(r.ratio_bound, Some(1.0));
        assert!(r.condition && !r.partial);
        let (lo, hi) = r.interval.unwrap();
        assert!(lo < hi);
        assert!(r.scanned_threshold.is_some());
    }

    #[test]
    fn refinement_identical_features() {
        let mut input = orthonormal_input(6, 6, 4, 4);
        input.features = vec![vec![0.6, 0.8]; 12];
        let r = refinement_bounds(&input).unwrap();
        assert_eq!(r.intra, r.inter);
        assert!(!r.condition);
        assert!(r.interval.is_none());
        assert!(r.scanned_threshold.is_none());
        let mut bad = orthonormal_input(6, 6, 4, 0);
        bad.in_m0[8] = false;
        assert!(refinement_bounds(&bad).is_err());
    }

    #[test]
    fn refinement_implication_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let d = 8;
        let mut held = 0;
        for _ in 0..1000 {
            let c0 = rng.gen_range(2..10);
            let c1 = rng.gen_range(2..10);
            let centre: [Vec<f64>; 2] = std::array::from_fn(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect());
            let spread: f64 = rng.gen_range(0.05..1.5);
            let in_c1: Vec<bool> = (0..c0 + c1).map(|i| i >= c0).collect();
            let features = in_c1
                .iter()
                .map(|&b| {
                    centre[b as usize]
                        .iter()
                        .map(|&m| m + spread * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            let mut in_m0: Vec<bool> = (0..c0 + c1).map(|_| rng.gen_bool(0.6)).collect();
            in_m0[0] = true;
            in_m0[c0] = true;
            let weights = (0..c0 + c1).map(|_| rng.gen_range(0.0..1.0)).collect();
            let r = refinement_bounds(&RefinementInput {
                features,
                in_c1,
                in_m0,
                weights,
            })
            .unwrap();
            if r.condition && r.intra.0 > r.inter.1 {
                held += 1;
                assert!(r.scanned_threshold.is_some(), "{r:?}");
            }
        }
        assert!(held > 0);
    }

    #[test]
    fn weight_ratio_examples() {
        let w = 1.0 / 15.0;
        let r = unbiased_weight_ratio(&[w; 10], &[w; 5]).unwrap();
        assert_eq!(r.weight_ratio, 0.5);
        assert_eq!(r.area_ratio, 0.5);
        let r = unbiased_weight_ratio(&[0.1; 10], &[0.0; 5]).unwrap();
        assert_eq!(r.weight_ratio, 0.0);
    }

    proptest! {
        #[test]
        fn constant_weights_match_area_ratio(a in 1usize..60, b in 0usize..60, w in 1e-3f64..1.0) {
            let r = unbiased_weight_ratio(&vec![w; a], &vec![w; b]).unwrap();
            prop_assert!((r.weight_ratio - r.area_ratio).abs() <= 1e-12 * r.area_ratio.max(1.0));
        }
    }
}
