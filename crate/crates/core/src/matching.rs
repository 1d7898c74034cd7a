//! Bipartite matching, set-prediction costs and per-layer losses.

use crate::data::Scene;
use crate::decoder::{LayerOutputs, LayerPrediction, TapeOutputs};
use crate::kernels;
use crate::maskops::BinaryMask;
use crate::mp::MpPart;
use crate::tensor::{dice_value, Tape, TensorError, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchError {
    #[error("non-finite cost at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("cost matrix has {len} entries, expected {rows}x{cols}")]
    BadMatrix { rows: usize, cols: usize, len: usize },
    #[error("mask extent mismatch: prediction has {pred} pixels, target {target}")]
    Extent { pred: usize, target: usize },
    #[error("inconsistent loss inputs: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MatchError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            bce: 5.0,
            dice: 5.0,
            no_object: 0.1,
        }
    }
}

/// How the matching part is assigned across layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Independent bipartite matching at every layer.
    #[default]
    PerLayer,
    /// Match once at the final layer and reuse it everywhere.
    FixedLastLayer,
    /// Per-layer matching plus a mask loss between adjacent layers.
    ConsistencyAux,
}

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MatchError::BadMatrix {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn transpose(&self) -> Self {
        let data = (0..self.cols)
            .flat_map(|c| (0..self.rows).map(move |r| (r, c)))
            .map(|(r, c)| self.get(r, c))
            .collect();
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// Query → GT assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub matches: Vec<Option<usize>>,
    pub cost: f64,
}

impl Assignment {
    fn from_matches(cost: &CostMatrix, matches: Vec<Option<usize>>) -> Self {
        let total = matches
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| cost.get(r, c)))
            .sum();
        Self {
            matches,
            cost: total,
        }
    }

    /// `(query, gt)` pairs in query order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.matches
            .iter()
            .enumerate()
            .filter_map(|(q, g)| g.map(|g| (q, g)))
            .collect()
    }

    pub fn matched_count(&self) -> usize {
        self.matches.iter().flatten().count()
    }

    /// Inverse map: GT index → query index.
    pub fn gt_to_query(&self, num_gt: usize) -> Vec<Option<usize>> {
        let mut inv = vec![None; num_gt];
        for (q, g) in self.pairs() {
            inv[g] = Some(q);
        }
        inv
    }
}

fn check_finite(cost: &CostMatrix) -> Result<()> {
    match cost.data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(MatchError::NonFinite {
            row: i / cost.cols,
            col: i % cost.cols,
        }),
        None => Ok(()),
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs (shortest augmenting
/// paths with potentials, O(n²m)).
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    check_finite(cost)?;
    if cost.rows == 0 || cost.cols == 0 {
        return Ok(Assignment {
            matches: vec![None; cost.rows],
            cost: 0.0,
        });
    }
    if cost.rows > cost.cols {
        let t = hungarian(&cost.transpose())?;
        let mut matches = vec![None; cost.rows];
        for (c, r) in t.pairs() {
            matches[r] = Some(c);
        }
        return Ok(Assignment::from_matches(cost, matches));
    }

    let (n, m) = (cost.rows, cost.cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: 1-based row matched to column j; column 0 is the virtual root
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut matches = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            matches[p[j] - 1] = Some(j - 1);
        }
    }
    Ok(Assignment::from_matches(cost, matches))
}

/// Exhaustive minimum over all injective assignments. Reference for tests.
pub fn brute_force_assignment(cost: &CostMatrix) -> Result<Assignment> {
    check_finite(cost)?;
    let swap = cost.rows > cost.cols;
    let (n, m) = if swap {
        (cost.cols, cost.rows)
    } else {
        (cost.rows, cost.cols)
    };
    let mut best: Option<Assignment> = None;
    let mut pick = Vec::with_capacity(n);
    let mut used = vec![false; m];

    fn rec(
        depth: usize,
        n: usize,
        m: usize,
        swap: bool,
        cost: &CostMatrix,
        pick: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut Option<Assignment>,
    ) {
        if depth == n {
            let mut matches = vec![None; cost.rows];
            for (a, &b) in pick.iter().enumerate() {
                if swap {
                    matches[b] = Some(a);
                } else {
                    matches[a] = Some(b);
                }
            }
            let cand = Assignment::from_matches(cost, matches);
            if best.as_ref().is_none_or(|b| cand.cost < b.cost) {
                *best = Some(cand);
            }
            return;
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                pick.push(j);
                rec(depth + 1, n, m, swap, cost, pick, used, best);
                pick.pop();
                used[j] = false;
            }
        }
    }

    rec(0, n, m, swap, cost, &mut pick, &mut used, &mut best);
    Ok(best.unwrap_or(Assignment {
        matches: vec![None; cost.rows],
        cost: 0.0,
    }))
}

/// `(BCE, dice)` of one mask prediction against a GT mask.
pub fn mask_losses(logits: &[f64], gt: &BinaryMask) -> Result<(f64, f64)> {
    let t = gt.to_f64();
    if t.len() != logits.len() {
        return Err(MatchError::Extent {
            pred: logits.len(),
            target: t.len(),
        });
    }
    let bce = logits
        .iter()
        .zip(&t)
        .map(|(&x, &y)| kernels::softplus(x) - x * y)
        .sum::<f64>()
        / t.len() as f64;
    Ok((bce, dice_value(logits, &t)))
}

/// Matching cost between the first `rows` queries of `pred` and every GT
/// instance of `scene`.
pub fn cost_matrix(
    pred: &LayerPrediction,
    rows: usize,
    scene: &Scene,
    w: &LossWeights,
) -> Result<CostMatrix> {
    let cols = scene.instances.len();
    let classes = pred.class_logits.cols();
    let mut probs = pred.class_logits.data()[..rows * classes].to_vec();
    kernels::softmax_rows(&mut probs, classes);
    let mut data = Vec::with_capacity(rows * cols);
    for q in 0..rows {
        let logits = pred.mask_logits.row(q);
        for inst in &scene.instances {
            if inst.category >= classes {
                return Err(MatchError::Inconsistent(format!(
                    "category {} outside {} classes",
                    inst.category, classes
                )));
            }
            let (bce, dice) = mask_losses(logits, &inst.mask)?;
            data.push(-w.class * probs[q * classes + inst.category] + w.bce * bce + w.dice * dice);
        }
    }
    let cost = CostMatrix::new(rows, cols, data)?;
    check_finite(&cost)?;
    Ok(cost)
}

/// Scalar loss on the tape plus diagnostics.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Var,
    pub value: f64,
    /// Per-layer loss values, index 0 is the pre-decoder prediction.
    pub per_layer: Vec<f64>,
    /// Matching-part assignment used at each layer.
    pub assignments: Vec<Assignment>,
}

fn gather_targets(scene: &Scene, gts: &[usize]) -> Vec<f64> {
    gts.iter()
        .flat_map(|&g| scene.instances[g].mask.to_f64())
        .collect()
}

/// Class and mask loss of `rows` of one prediction pass against their GT.
/// Rows without a GT (`None`) get the no-object label at weight `no_object`.
fn part_loss(
    tape: &mut Tape,
    masks: Var,
    classes: Var,
    scene: &Scene,
    targets: &[Option<usize>],
    w: &LossWeights,
) -> Result<Var> {
    let no_object = tape.value(classes).cols() - 1;
    let labels: Vec<usize> = targets
        .iter()
        .map(|t| t.map_or(no_object, |g| scene.instances[g].category))
        .collect();
    let weights: Vec<f64> = targets
        .iter()
        .map(|t| if t.is_some() { 1.0 } else { w.no_object })
        .collect();
    let ce = tape.cross_entropy_rows(classes, &labels, &weights)?;
    let mut loss = tape.scale(ce, w.class);

    let (rows, gts): (Vec<usize>, Vec<usize>) = targets
        .iter()
        .enumerate()
        .filter_map(|(r, t)| t.map(|g| (r, g)))
        .unzip();
    if !rows.is_empty() {
        let picked = tape.select_rows(masks, &rows)?;
        let target = gather_targets(scene, &gts);
        let bce = tape.bce_with_logits(picked, &target)?;
        let dice = tape.dice_rows(picked, &target)?;
        let bce = tape.scale(bce, w.bce);
        let dice = tape.scale(dice, w.dice);
        loss = tape.add(loss, bce)?;
        loss = tape.add(loss, dice)?;
    }
    Ok(loss)
}

fn rows_of(tape: &mut Tape, v: Var, start: usize, end: usize, total: usize) -> Result<Var> {
    if start == 0 && end == total {
        Ok(v)
    } else {
        Ok(tape.slice_rows(v, start, end)?)
    }
}

/// Total training loss over every prediction pass and both query parts.
pub fn layer_losses(
    tape: &mut Tape,
    out: &TapeOutputs,
    scene: &Scene,
    mp: Option<&MpPart>,
    mode: LossMode,
    w: &LossWeights,
) -> Result<LossOutput> {
    let n = out.n_match;
    let n_mp = mp.map_or(0, MpPart::len);
    if n_mp != out.n_mp {
        return Err(MatchError::Inconsistent(format!(
            "outputs carry {} MP queries, MP part has {}",
            out.n_mp, n_mp
        )));
    }
    if scene.height != out.height || scene.width != out.width {
        return Err(MatchError::Extent {
            pred: out.height * out.width,
            target: scene.height * scene.width,
        });
    }
    let total_rows = n + n_mp;
    let values = out.values(tape);

    let assignments: Vec<Assignment> = match mode {
        LossMode::FixedLastLayer => {
            let last = values.layers.len() - 1;
            let a = hungarian(&cost_matrix(&values.layers[last], n, scene, w)?)?;
            vec![a; values.layers.len()]
        }
        LossMode::PerLayer | LossMode::ConsistencyAux => values
            .layers
            .iter()
            .map(|l| hungarian(&cost_matrix(l, n, scene, w)?))
            .collect::<Result<_>>()?,
    };

    let mut total: Option<Var> = None;
    let mut per_layer = Vec::with_capacity(out.layers.len());
    for (i, &(masks, classes)) in out.layers.iter().enumerate() {
        let m_masks = rows_of(tape, masks, 0, n, total_rows)?;
        let m_cls = rows_of(tape, classes, 0, n, total_rows)?;
        let mut layer = part_loss(tape, m_masks, m_cls, scene, &assignments[i].matches, w)?;

        if let Some(part) = mp.filter(|p| !p.is_empty()) {
            let p_masks = tape.slice_rows(masks, n, total_rows)?;
            let p_cls = tape.slice_rows(classes, n, total_rows)?;
            let targets: Vec<Option<usize>> = part.assignment().into_iter().map(Some).collect();
            let l = part_loss(tape, p_masks, p_cls, scene, &targets, w)?;
            layer = tape.add(layer, l)?;
        }

        if mode == LossMode::ConsistencyAux && i > 0 {
            let prev = values.layers[i - 1].mask_logits.data();
            let hw = out.height * out.width;
            let target: Vec<f64> = prev[..n * hw]
                .iter()
                .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                .collect();
            let bce = tape.bce_with_logits(m_masks, &target)?;
            let dice = tape.dice_rows(m_masks, &target)?;
            let bce = tape.scale(bce, w.bce);
            let dice = tape.scale(dice, w.dice);
            layer = tape.add(layer, bce)?;
            layer = tape.add(layer, dice)?;
        }

        per_layer.push(tape.value(layer).data()[0]);
        total = Some(match total {
            Some(t) => tape.add(t, layer)?,
            None => layer,
        });
    }
    let total = total.ok_or_else(|| MatchError::Inconsistent("no prediction passes".into()))?;
    let value = tape.value(total).data()[0];
    if !value.is_finite() {
        return Err(TensorError::NonFinite("training loss").into());
    }
    Ok(LossOutput {
        total,
        value,
        per_layer,
        assignments,
    })
}

/// Loss value for already computed outputs.
pub fn loss_value(
    outputs: &LayerOutputs,
    scene: &Scene,
    mp: Option<&MpPart>,
    mode: LossMode,
    w: &LossWeights,
) -> Result<(f64, Vec<Assignment>)> {
    let mut tape = Tape::new();
    let layers = outputs
        .layers
        .iter()
        .map(|l| {
            (
                tape.constant(l.mask_logits.clone()),
                tape.constant(l.class_logits.clone()),
            )
        })
        .collect();
    let out = TapeOutputs {
        layers,
        n_match: outputs.n_match,
        n_mp: outputs.n_mp,
        height: outputs.height,
        width: outputs.width,
    };
    let l = layer_losses(&mut tape, &out, scene, mp, mode, w)?;
    Ok((l.value, l.assignments))
}

/// Matching of the matching part at every prediction pass, as used for
/// evaluation.
pub fn match_layers(outputs: &LayerOutputs, scene: &Scene, w: &LossWeights) -> Result<Vec<Assignment>> {
    outputs
        .layers
        .iter()
        .map(|l| hungarian(&cost_matrix(l, outputs.n_match, scene, w)?))
        .collect()
}
