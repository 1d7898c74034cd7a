//! Masked-attention transformer decoder.
//!
//! Layer `i` (1-based) attends to pyramid scale `(i − 1) mod 3`, coarse to
//! fine. Each layer runs masked cross-attention, then self-attention, then a
//! feed-forward block, each followed by a residual add and layer
//! normalization. Shared heads produce class and mask logits before the first
//! layer and after every layer. A query's cross-attention mask at layer `i` is
//! its own binarized prediction from layer `i − 1`, unless the forward spec
//! supplies an override for it.

use crate::data::FeaturePyramid;
use crate::kernels::{self, BLOCKED_LOGIT};
use crate::maskops::{resize_nearest, to_attention_block, BinaryMask};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Number of pyramid scales the layers cycle through.
pub const NUM_SCALES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub num_queries: usize,
    pub num_layers: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub num_categories: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            num_queries: 20,
            num_layers: 9,
            dim: 32,
            ffn_dim: 64,
            num_categories: 4,
        }
    }
}

impl ModelDims {
    /// Scale index attended by 1-based layer `layer`.
    pub fn scale_of_layer(layer: usize) -> usize {
        (layer - 1) % NUM_SCALES
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub cross: Attention<T>,
    pub cross_norm: Norm<T>,
    pub self_attn: Attention<T>,
    pub self_norm: Norm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: Norm<T>,
}

/// All decoder weights. `T = Tensor` for storage, `T = Var` once bound to a
/// tape.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights<T> {
    pub query_embed: T,
    pub class_embed: T,
    pub layers: Vec<LayerParams<T>>,
    pub head_norm: Norm<T>,
    pub class_head: Linear<T>,
    pub mask_mlp_in: Linear<T>,
    pub mask_mlp_out: Linear<T>,
}

type Visitor<'f, 'a, T, U> = dyn FnMut(&str, &'a T) -> U + 'f;
type VisitorMut<'f, T> = dyn FnMut(&str, &mut T) + 'f;

impl<T> Linear<T> {
    fn map<'a, U>(&'a self, p: &str, f: &mut Visitor<'_, 'a, T, U>) -> Linear<U> {
        Linear {
            w: f(&format!("{p}.w"), &self.w),
            b: f(&format!("{p}.b"), &self.b),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut VisitorMut<'_, T>) {
        f(&format!("{p}.w"), &mut self.w);
        f(&format!("{p}.b"), &mut self.b);
    }
}

impl<T> Norm<T> {
    fn map<'a, U>(&'a self, p: &str, f: &mut Visitor<'_, 'a, T, U>) -> Norm<U> {
        Norm {
            gamma: f(&format!("{p}.gamma"), &self.gamma),
            beta: f(&format!("{p}.beta"), &self.beta),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut VisitorMut<'_, T>) {
        f(&format!("{p}.gamma"), &mut self.gamma);
        f(&format!("{p}.beta"), &mut self.beta);
    }
}

impl<T> Attention<T> {
    fn map<'a, U>(&'a self, p: &str, f: &mut Visitor<'_, 'a, T, U>) -> Attention<U> {
        Attention {
            q: self.q.map(&format!("{p}.q"), f),
            k: self.k.map(&format!("{p}.k"), f),
            v: self.v.map(&format!("{p}.v"), f),
            o: self.o.map(&format!("{p}.o"), f),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut VisitorMut<'_, T>) {
        self.q.visit_mut(&format!("{p}.q"), f);
        self.k.visit_mut(&format!("{p}.k"), f);
        self.v.visit_mut(&format!("{p}.v"), f);
        self.o.visit_mut(&format!("{p}.o"), f);
    }
}

impl<T> LayerParams<T> {
    pub fn map<'a, U>(&'a self, p: &str, f: &mut Visitor<'_, 'a, T, U>) -> LayerParams<U> {
        LayerParams {
            cross: self.cross.map(&format!("{p}.cross"), f),
            cross_norm: self.cross_norm.map(&format!("{p}.cross_norm"), f),
            self_attn: self.self_attn.map(&format!("{p}.self_attn"), f),
            self_norm: self.self_norm.map(&format!("{p}.self_norm"), f),
            ffn_in: self.ffn_in.map(&format!("{p}.ffn_in"), f),
            ffn_out: self.ffn_out.map(&format!("{p}.ffn_out"), f),
            ffn_norm: self.ffn_norm.map(&format!("{p}.ffn_norm"), f),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut VisitorMut<'_, T>) {
        self.cross.visit_mut(&format!("{p}.cross"), f);
        self.cross_norm.visit_mut(&format!("{p}.cross_norm"), f);
        self.self_attn.visit_mut(&format!("{p}.self_attn"), f);
        self.self_norm.visit_mut(&format!("{p}.self_norm"), f);
        self.ffn_in.visit_mut(&format!("{p}.ffn_in"), f);
        self.ffn_out.visit_mut(&format!("{p}.ffn_out"), f);
        self.ffn_norm.visit_mut(&format!("{p}.ffn_norm"), f);
    }
}

impl<T> DecoderWeights<T> {
    /// Applies `f` to every parameter in a fixed order, with its dotted name.
    pub fn map<'a, U>(&'a self, f: &mut Visitor<'_, 'a, T, U>) -> DecoderWeights<U> {
        DecoderWeights {
            query_embed: f("query_embed", &self.query_embed),
            class_embed: f("class_embed", &self.class_embed),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("layers.{i}"), f))
                .collect(),
            head_norm: self.head_norm.map("head_norm", f),
            class_head: self.class_head.map("class_head", f),
            mask_mlp_in: self.mask_mlp_in.map("mask_mlp_in", f),
            mask_mlp_out: self.mask_mlp_out.map("mask_mlp_out", f),
        }
    }

    /// Mutable visit in the same order as [`DecoderWeights::map`].
    pub fn visit_mut(&mut self, f: &mut VisitorMut<'_, T>) {
        f("query_embed", &mut self.query_embed);
        f("class_embed", &mut self.class_embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{i}"), f);
        }
        self.head_norm.visit_mut("head_norm", f);
        self.class_head.visit_mut("class_head", f);
        self.mask_mlp_in.visit_mut("mask_mlp_in", f);
        self.mask_mlp_out.visit_mut("mask_mlp_out", f);
    }

    /// Parameters with their names, in [`DecoderWeights::map`] order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name.to_string(), t)));
        out
    }
}

/// Whether a parameter is an embedding table (exempt from weight decay).
pub fn is_embedding(name: &str) -> bool {
    name == "query_embed" || name == "class_embed"
}

/// Stored decoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub dims: ModelDims,
    pub weights: DecoderWeights<Tensor>,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive dims")
}

fn linear_init(rng: &mut ChaCha8Rng, i: usize, o: usize) -> Linear<Tensor> {
    Linear {
        w: xavier(rng, i, o),
        b: Tensor::zeros(vec![o]),
    }
}

fn norm_init(d: usize) -> Norm<Tensor> {
    Norm {
        gamma: Tensor::vector(vec![1.0; d]),
        beta: Tensor::zeros(vec![d]),
    }
}

fn attention_init(rng: &mut ChaCha8Rng, d: usize) -> Attention<Tensor> {
    Attention {
        q: linear_init(rng, d, d),
        k: linear_init(rng, d, d),
        v: linear_init(rng, d, d),
        o: linear_init(rng, d, d),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

impl DecoderParams {
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.dim;
        let weights = DecoderWeights {
            query_embed: gaussian(&mut rng, dims.num_queries, d),
            class_embed: gaussian(&mut rng, dims.num_categories, d),
            layers: (0..dims.num_layers)
                .map(|_| LayerParams {
                    cross: attention_init(&mut rng, d),
                    cross_norm: norm_init(d),
                    self_attn: attention_init(&mut rng, d),
                    self_norm: norm_init(d),
                    ffn_in: linear_init(&mut rng, d, dims.ffn_dim),
                    ffn_out: linear_init(&mut rng, dims.ffn_dim, d),
                    ffn_norm: norm_init(d),
                })
                .collect(),
            head_norm: norm_init(d),
            class_head: linear_init(&mut rng, d, dims.num_categories + 1),
            mask_mlp_in: linear_init(&mut rng, d, d),
            mask_mlp_out: linear_init(&mut rng, d, d),
        };
        Self { dims, weights }
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> DecoderWeights<Var> {
        self.weights.map(&mut |_, t| tape.param(t.clone()))
    }

    /// Registers every tensor as a constant leaf.
    pub fn bind_constant(&self, tape: &mut Tape) -> DecoderWeights<Var> {
        self.weights.map(&mut |_, t| tape.constant(t.clone()))
    }
}

/// Initial content of the mask-piloted queries.
#[derive(Debug, Clone, PartialEq)]
pub enum MpQueries {
    /// Rows of the class-embedding table.
    Categories(Vec<usize>),
    /// Arbitrary vectors, one row per query.
    Raw(Tensor),
}

impl MpQueries {
    pub fn len(&self) -> usize {
        match self {
            MpQueries::Categories(c) => c.len(),
            MpQueries::Raw(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Extra queries appended after the matching part.
#[derive(Debug, Clone, PartialEq)]
pub struct MpInputs {
    pub queries: MpQueries,
    /// `overrides[layer − 1][j]`: cross-attention blocking grid at that
    /// layer's scale for MP query `j`, or `None` to use its own previous
    /// prediction.
    pub overrides: Vec<Vec<Option<Vec<bool>>>>,
    /// Self-attention blocking grid over all `N + M` queries, row-major.
    pub self_block: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardSpec<'a> {
    pub pyramid: &'a FeaturePyramid,
    pub mp: Option<&'a MpInputs>,
}

/// Mask and class logits of one prediction pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrediction {
    /// `queries × (H·W)` at base resolution.
    pub mask_logits: Tensor,
    /// `queries × (K + 1)`; the last column is no-object.
    pub class_logits: Tensor,
}

/// Predictions before the first layer (index 0) and after each layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutputs {
    pub layers: Vec<LayerPrediction>,
    pub n_match: usize,
    pub n_mp: usize,
    pub height: usize,
    pub width: usize,
}

impl LayerOutputs {
    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn mask_row(&self, layer: usize, query: usize) -> &[f64] {
        self.layers[layer].mask_logits.row(query)
    }

    pub fn binary_mask(&self, layer: usize, query: usize) -> BinaryMask {
        BinaryMask::from_logits(self.height, self.width, self.mask_row(layer, query))
    }

    /// Copy restricted to the first `n_match` queries.
    pub fn matching_part(&self) -> LayerOutputs {
        let keep = |t: &Tensor| {
            let c = t.cols();
            Tensor::matrix(self.n_match, c, t.data()[..self.n_match * c].to_vec())
                .expect("non-empty matching part")
        };
        LayerOutputs {
            layers: self
                .layers
                .iter()
                .map(|l| LayerPrediction {
                    mask_logits: keep(&l.mask_logits),
                    class_logits: keep(&l.class_logits),
                })
                .collect(),
            n_match: self.n_match,
            n_mp: 0,
            height: self.height,
            width: self.width,
        }
    }
}

/// Tape handles for every prediction pass.
#[derive(Debug, Clone)]
pub struct TapeOutputs {
    /// `(mask_logits, class_logits)` per pass.
    pub layers: Vec<(Var, Var)>,
    pub n_match: usize,
    pub n_mp: usize,
    pub height: usize,
    pub width: usize,
}

impl TapeOutputs {
    pub fn values(&self, tape: &Tape) -> LayerOutputs {
        LayerOutputs {
            layers: self
                .layers
                .iter()
                .map(|(m, c)| LayerPrediction {
                    mask_logits: tape.value(*m).clone(),
                    class_logits: tape.value(*c).clone(),
                })
                .collect(),
            n_match: self.n_match,
            n_mp: self.n_mp,
            height: self.height,
            width: self.width,
        }
    }
}

pub fn linear(tape: &mut Tape, x: Var, p: &Linear<Var>) -> Result<Var> {
    let y = tape.matmul(x, p.w)?;
    tape.add(y, p.b)
}

/// Single-head scaled dot-product attention of `queries` over `context`.
pub fn attention(
    tape: &mut Tape,
    queries: Var,
    context: Var,
    p: &Attention<Var>,
    block: Option<&[bool]>,
) -> Result<Var> {
    let q = linear(tape, queries, &p.q)?;
    let k = linear(tape, context, &p.k)?;
    let v = linear(tape, context, &p.v)?;
    let d = tape.shape(q)[1];
    let scores = tape.matmul_nt(q, k)?;
    let mut scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    if let Some(block) = block {
        scores = tape.masked_fill(scores, block, BLOCKED_LOGIT)?;
    }
    let weights = tape.softmax_lastdim(scores)?;
    let ctx = tape.matmul(weights, v)?;
    linear(tape, ctx, &p.o)
}

fn residual_norm(tape: &mut Tape, x: Var, delta: Var, n: &Norm<Var>) -> Result<Var> {
    let s = tape.add(x, delta)?;
    tape.layer_norm_affine(s, n.gamma, n.beta)
}

/// One decoder layer: masked cross-attention over `features` (`P × d`),
/// self-attention under `self_block`, then the feed-forward block.
pub fn decoder_layer(
    tape: &mut Tape,
    queries: Var,
    features: Var,
    cross_block: &[bool],
    self_block: Option<&[bool]>,
    p: &LayerParams<Var>,
) -> Result<Var> {
    let nq = tape.shape(queries)[0];
    let np = tape.shape(features)[0];
    if cross_block.len() != nq * np {
        return Err(TensorError::ShapeMismatch {
            op: "decoder_layer cross block",
            lhs: vec![nq, np],
            rhs: vec![cross_block.len()],
        });
    }
    if let Some(sb) = self_block {
        if sb.len() != nq * nq {
            return Err(TensorError::ShapeMismatch {
                op: "decoder_layer self block",
                lhs: vec![nq, nq],
                rhs: vec![sb.len()],
            });
        }
    }
    let c = attention(tape, queries, features, &p.cross, Some(cross_block))?;
    let q = residual_norm(tape, queries, c, &p.cross_norm)?;
    let s = attention(tape, q, q, &p.self_attn, self_block)?;
    let q = residual_norm(tape, q, s, &p.self_norm)?;
    let h = linear(tape, q, &p.ffn_in)?;
    let h = tape.relu(h);
    let h = linear(tape, h, &p.ffn_out)?;
    residual_norm(tape, q, h, &p.ffn_norm)
}

/// `logits[n, p] = MLP(query_n) · pixel_embed[p]`.
pub fn mask_head(
    tape: &mut Tape,
    queries: Var,
    pixel_embed: Var,
    mlp_in: &Linear<Var>,
    mlp_out: &Linear<Var>,
) -> Result<Var> {
    let h = linear(tape, queries, mlp_in)?;
    let h = tape.relu(h);
    let e = linear(tape, h, mlp_out)?;
    tape.matmul_nt(e, pixel_embed)
}

/// Shared prediction heads: normalization, then class and mask logits.
pub fn predict(
    tape: &mut Tape,
    queries: Var,
    pixel_embed: Var,
    w: &DecoderWeights<Var>,
) -> Result<(Var, Var)> {
    let qn = tape.layer_norm_affine(queries, w.head_norm.gamma, w.head_norm.beta)?;
    let cls = linear(tape, qn, &w.class_head)?;
    let masks = mask_head(tape, qn, pixel_embed, &w.mask_mlp_in, &w.mask_mlp_out)?;
    Ok((masks, cls))
}

/// Binarizes one query's base-resolution logits at `sigmoid > 0.5`, resizes
/// to the target scale and converts to a blocking grid (empty masks block
/// nothing).
pub fn binarize_for_attention(
    logits: &[f64],
    base: (usize, usize),
    target: (usize, usize),
) -> Vec<bool> {
    let m = BinaryMask::from_logits(base.0, base.1, logits);
    to_attention_block(&resize_nearest(&m, target.0, target.1))
}

pub(crate) fn feature_tensor(map: &crate::data::FeatureMap) -> Tensor {
    Tensor::matrix(map.pixels(), map.dim, map.data.clone()).expect("non-empty feature map")
}

/// Runs the decoder on a tape with already bound weights.
pub fn forward_on_tape(
    tape: &mut Tape,
    w: &DecoderWeights<Var>,
    dims: &ModelDims,
    spec: &ForwardSpec<'_>,
) -> Result<TapeOutputs> {
    let pyr = spec.pyramid;
    if pyr.dim() != dims.dim {
        return Err(TensorError::ShapeMismatch {
            op: "forward feature dim",
            lhs: vec![dims.dim],
            rhs: vec![pyr.dim()],
        });
    }
    let base = (pyr.scales[2].height, pyr.scales[2].width);
    let n_match = dims.num_queries;
    let n_mp = spec.mp.map_or(0, |m| m.queries.len());
    let total = n_match + n_mp;

    let features: Vec<Var> = pyr
        .scales
        .iter()
        .map(|s| tape.constant(feature_tensor(s)))
        .collect();
    let pixel = features[2];

    let mut q = w.query_embed;
    let mut self_block = None;
    if let Some(mp) = spec.mp.filter(|m| !m.queries.is_empty()) {
        let mq = match &mp.queries {
            MpQueries::Categories(c) => tape.select_rows(w.class_embed, c)?,
            MpQueries::Raw(t) => tape.constant(t.clone()),
        };
        q = tape.concat_rows(&[q, mq])?;
        if mp.overrides.len() != dims.num_layers {
            return Err(TensorError::ShapeMismatch {
                op: "forward overrides",
                lhs: vec![dims.num_layers],
                rhs: vec![mp.overrides.len()],
            });
        }
        self_block = Some(mp.self_block.as_slice());
    }

    let mut layers = Vec::with_capacity(dims.num_layers + 1);
    layers.push(predict(tape, q, pixel, w)?);
    for layer in 1..=dims.num_layers {
        let scale = ModelDims::scale_of_layer(layer);
        let target = (pyr.scales[scale].height, pyr.scales[scale].width);
        let prev = tape.value(layers[layer - 1].0).clone();
        let mut block = Vec::with_capacity(total * target.0 * target.1);
        for r in 0..total {
            let over = spec
                .mp
                .filter(|_| r >= n_match)
                .and_then(|mp| mp.overrides[layer - 1][r - n_match].as_ref());
            match over {
                Some(grid) => {
                    if grid.len() != target.0 * target.1 {
                        return Err(TensorError::ShapeMismatch {
                            op: "override grid",
                            lhs: vec![target.0, target.1],
                            rhs: vec![grid.len()],
                        });
                    }
                    block.extend_from_slice(grid);
                }
                None => block.extend(binarize_for_attention(prev.row(r), base, target)),
            }
        }
        q = decoder_layer(tape, q, features[scale], &block, self_block, &w.layers[layer - 1])?;
        layers.push(predict(tape, q, pixel, w)?);
    }
    Ok(TapeOutputs {
        layers,
        n_match,
        n_mp,
        height: base.0,
        width: base.1,
    })
}

/// Pure forward pass; builds and discards its own tape.
pub fn full_forward(spec: &ForwardSpec<'_>, params: &DecoderParams) -> Result<LayerOutputs> {
    let mut tape = Tape::new();
    let w = params.bind_constant(&mut tape);
    let out = forward_on_tape(&mut tape, &w, &params.dims, spec)?;
    Ok(out.values(&tape))
}

/// Tape-free forward over the matching queries only. Shares every arithmetic
/// kernel with [`forward_on_tape`] and reproduces its matching-part outputs
/// bit for bit.
pub fn inference_forward(pyramid: &FeaturePyramid, params: &DecoderParams) -> LayerOutputs {
    let w = &params.weights;
    let dims = &params.dims;
    let d = dims.dim;
    let base = (pyramid.scales[2].height, pyramid.scales[2].width);
    let n = dims.num_queries;

    let lin = |x: &[f64], rows: usize, p: &Linear<Tensor>| {
        let (i, o) = (p.w.shape()[0], p.w.shape()[1]);
        let mut y = kernels::matmul(x, p.w.data(), rows, i, o);
        kernels::add_row_bias(&mut y, p.b.data());
        y
    };
    let norm = |x: &[f64], p: &Norm<Tensor>| {
        let (mut y, _) = kernels::layer_norm_rows(x, d);
        kernels::affine_rows(&mut y, p.gamma.data(), p.beta.data());
        y
    };
    let attend = |q_in: &[f64], rows: usize, ctx: &[f64], ctx_rows: usize, p: &Attention<Tensor>, block: Option<&[bool]>| {
        let q = lin(q_in, rows, &p.q);
        let k = lin(ctx, ctx_rows, &p.k);
        let v = lin(ctx, ctx_rows, &p.v);
        let mut s = kernels::matmul_nt(&q, &k, rows, d, ctx_rows);
        kernels::scale_in_place(&mut s, 1.0 / (d as f64).sqrt());
        if let Some(b) = block {
            kernels::masked_fill_in_place(&mut s, b, BLOCKED_LOGIT);
        }
        kernels::softmax_rows(&mut s, ctx_rows);
        let c = kernels::matmul(&s, &v, rows, ctx_rows, d);
        lin(&c, rows, &p.o)
    };
    let heads = |q: &[f64]| {
        let qn = norm(q, &w.head_norm);
        let cls = lin(&qn, n, &w.class_head);
        let mut h = lin(&qn, n, &w.mask_mlp_in);
        kernels::relu_in_place(&mut h);
        let e = lin(&h, n, &w.mask_mlp_out);
        let pix = pyramid.pixel_embed();
        let masks = kernels::matmul_nt(&e, &pix.data, n, d, pix.pixels());
        LayerPrediction {
            mask_logits: Tensor::matrix(n, pix.pixels(), masks).expect("dims"),
            class_logits: Tensor::matrix(n, dims.num_categories + 1, cls).expect("dims"),
        }
    };

    let mut q = w.query_embed.data().to_vec();
    let mut layers = vec![heads(&q)];
    for layer in 1..=dims.num_layers {
        let scale = ModelDims::scale_of_layer(layer);
        let fm = &pyramid.scales[scale];
        let p = &w.layers[layer - 1];
        let prev = &layers[layer - 1].mask_logits;
        let block: Vec<bool> = (0..n)
            .flat_map(|r| binarize_for_attention(prev.row(r), base, (fm.height, fm.width)))
            .collect();
        let c = attend(&q, n, &fm.data, fm.pixels(), &p.cross, Some(&block));
        let mut x = q.clone();
        kernels::add_in_place(&mut x, &c);
        q = norm(&x, &p.cross_norm);
        let s = attend(&q, n, &q, n, &p.self_attn, None);
        let mut x = q.clone();
        kernels::add_in_place(&mut x, &s);
        q = norm(&x, &p.self_norm);
        let mut h = lin(&q, n, &p.ffn_in);
        kernels::relu_in_place(&mut h);
        let h = lin(&h, n, &p.ffn_out);
        let mut x = q.clone();
        kernels::add_in_place(&mut x, &h);
        q = norm(&x, &p.ffn_norm);
        layers.push(heads(&q));
    }
    LayerOutputs {
        layers,
        n_match: n,
        n_mp: 0,
        height: base.0,
        width: base.1,
    }
}
