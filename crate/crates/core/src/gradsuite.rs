//! Finite-difference suite over every differentiable operation, the decoder
//! building blocks and an end-to-end loss.

use crate::data::{generate_scene, synth_features, SynthConfig};
use crate::decoder::{decoder_layer, forward_on_tape, mask_head, DecoderParams, ForwardSpec, Linear, ModelDims};
use crate::gradcheck::{check_gradient, random_tensor};
use crate::matching::{layer_losses, LossMode, LossWeights, MatchError};
use crate::mp::{build_mp_part, MpConfig};
use crate::tensor::{Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Body = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Projects a non-scalar output onto fixed random weights.
fn project(t: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = t.constant(weights.clone());
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

fn unary(rng: &mut ChaCha8Rng, shape: Vec<usize>, op: fn(&mut Tape, Var) -> Result<Var>) -> (Vec<Tensor>, Body) {
    let x = random_tensor(rng, shape.clone());
    let w = random_tensor(rng, shape);
    (vec![x], Box::new(move |t, v| {
        let y = op(t, v[0])?;
        project(t, y, &w)
    }))
}

fn binary(
    rng: &mut ChaCha8Rng,
    a: Vec<usize>,
    b: Vec<usize>,
    out: Vec<usize>,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> (Vec<Tensor>, Body) {
    let inputs = vec![random_tensor(rng, a), random_tensor(rng, b)];
    let w = random_tensor(rng, out);
    (inputs, Box::new(move |t, v| {
        let y = op(t, v[0], v[1])?;
        project(t, y, &w)
    }))
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Body)> {
    let mut out: Vec<(&'static str, Vec<Tensor>, Body)> = Vec::new();
    let mut push = |name, (i, b): (Vec<Tensor>, Body)| out.push((name, i, b));

    push("matmul", binary(rng, vec![3, 4], vec![4, 2], vec![3, 2], |t, a, b| t.matmul(a, b)));
    push("matmul_nt", binary(rng, vec![3, 4], vec![5, 4], vec![3, 5], |t, a, b| t.matmul_nt(a, b)));
    push("add", binary(rng, vec![3, 4], vec![3, 4], vec![3, 4], |t, a, b| t.add(a, b)));
    push("add_row_broadcast", binary(rng, vec![3, 4], vec![4], vec![3, 4], |t, a, b| t.add(a, b)));
    push("mul", binary(rng, vec![3, 4], vec![3, 4], vec![3, 4], |t, a, b| t.mul(a, b)));
    push("mul_scalar_broadcast", binary(rng, vec![3, 4], vec![1], vec![3, 4], |t, a, b| t.mul(a, b)));
    push("scale", unary(rng, vec![3, 4], |t, a| Ok(t.scale(a, -1.7))));
    push("add_scalar", unary(rng, vec![3, 4], |t, a| Ok(t.add_scalar(a, 0.3))));
    push("relu", unary(rng, vec![4, 5], |t, a| Ok(t.relu(a))));
    push("sigmoid", unary(rng, vec![4, 5], |t, a| Ok(t.sigmoid(a))));
    push("layer_norm", unary(rng, vec![3, 6], |t, a| Ok(t.layer_norm(a))));
    push("softmax", unary(rng, vec![3, 5], |t, a| t.softmax_lastdim(a)));
    push("masked_fill_softmax", unary(rng, vec![2, 2], |t, a| {
        let m = t.masked_fill(a, &[false, true, true, false], crate::kernels::BLOCKED_LOGIT)?;
        t.softmax_lastdim(m)
    }));
    push("sum", (vec![random_tensor(rng, vec![3, 3])], Box::new(|t: &mut Tape, v: &[Var]| {
        let s = t.sigmoid(v[0]);
        Ok(t.sum(s))
    }) as Body));
    push("mean", (vec![random_tensor(rng, vec![3, 3])], Box::new(|t: &mut Tape, v: &[Var]| {
        let s = t.sigmoid(v[0]);
        Ok(t.mean(s))
    }) as Body));
    push("select_rows", {
        let x = random_tensor(rng, vec![4, 3]);
        let w = random_tensor(rng, vec![3, 3]);
        (vec![x], Box::new(move |t: &mut Tape, v: &[Var]| {
            let s = t.select_rows(v[0], &[2, 0, 2])?;
            project(t, s, &w)
        }) as Body)
    });
    push("slice_rows", (vec![random_tensor(rng, vec![4, 3])], Box::new(|t: &mut Tape, v: &[Var]| {
        let s = t.slice_rows(v[0], 1, 3)?;
        let s = t.sigmoid(s);
        Ok(t.sum(s))
    }) as Body));
    push("concat_rows", binary(rng, vec![2, 3], vec![1, 3], vec![3, 3], |t, a, b| t.concat_rows(&[a, b])));

    let ln = {
        let inputs = vec![random_tensor(rng, vec![3, 5]), random_tensor(rng, vec![5]), random_tensor(rng, vec![5])];
        let w = random_tensor(rng, vec![3, 5]);
        (inputs, Box::new(move |t: &mut Tape, v: &[Var]| {
            let y = t.layer_norm_affine(v[0], v[1], v[2])?;
            project(t, y, &w)
        }) as Body)
    };
    push("layer_norm_affine", ln);

    let target: Vec<f64> = (0..12).map(|i| f64::from(i % 3 == 0)).collect();
    let tgt = target.clone();
    push("bce_with_logits", (vec![random_tensor(rng, vec![3, 4])], Box::new(move |t: &mut Tape, v: &[Var]| t.bce_with_logits(v[0], &tgt)) as Body));
    let tgt = target;
    push("dice_rows", (vec![random_tensor(rng, vec![3, 4])], Box::new(move |t: &mut Tape, v: &[Var]| t.dice_rows(v[0], &tgt)) as Body));
    push("cross_entropy_rows", (vec![random_tensor(rng, vec![3, 4])], Box::new(|t: &mut Tape, v: &[Var]| t.cross_entropy_rows(v[0], &[3, 0, 1], &[0.1, 1.0, 1.0])) as Body));

    let d = 4;
    let layer = DecoderParams::init(
        ModelDims {
            num_queries: 3,
            num_layers: 1,
            dim: d,
            ffn_dim: 6,
            num_categories: 2,
        },
        rand::Rng::gen(rng),
    )
    .weights
    .layers
    .remove(0);
    let mut inputs: Vec<Tensor> = Vec::new();
    layer.map("l", &mut |_, t| inputs.push(t.clone()));
    inputs.push(random_tensor(rng, vec![3, d]));
    inputs.push(random_tensor(rng, vec![5, d]));
    let w = random_tensor(rng, vec![3, d]);
    let cross: Vec<bool> = (0..15).map(|i| i % 4 == 1).collect();
    let selfb = vec![false, true, false, false, false, true, false, false, false];
    push("decoder_layer", (inputs, Box::new(move |t: &mut Tape, v: &[Var]| {
        let mut it = v.iter().copied();
        let p = layer.map("l", &mut |_, _| it.next().expect("layer param"));
        let q = it.next().expect("queries");
        let f = it.next().expect("features");
        let y = decoder_layer(t, q, f, &cross, Some(&selfb), &p)?;
        project(t, y, &w)
    }) as Body));

    let inputs = vec![
        random_tensor(rng, vec![3, d]),
        random_tensor(rng, vec![6, d]),
        random_tensor(rng, vec![d, 5]),
        random_tensor(rng, vec![5]),
        random_tensor(rng, vec![5, d]),
        random_tensor(rng, vec![d]),
    ];
    let w = random_tensor(rng, vec![3, 6]);
    push("mask_head", (inputs, Box::new(move |t: &mut Tape, v: &[Var]| {
        let a = Linear { w: v[2], b: v[3] };
        let b = Linear { w: v[4], b: v[5] };
        let y = mask_head(t, v[0], v[1], &a, &b)?;
        project(t, y, &w)
    }) as Body));
    out
}

/// End-to-end loss on one 8×8 scene through a 2-layer decoder with an MP part.
fn end_to_end(mode: LossMode) -> (Vec<Tensor>, Body) {
    let synth = SynthConfig {
        height: 8,
        width: 8,
        min_size: 2,
        max_size: 4,
        min_instances: 2,
        max_instances: 2,
        feature_dim: 4,
        num_categories: 2,
        ..Default::default()
    };
    let scene = generate_scene(&synth, 0).expect("valid synth config");
    let pyramid = synth_features(&scene, &synth);
    let dims = ModelDims {
        num_queries: 3,
        num_layers: 2,
        dim: 4,
        ffn_dim: 6,
        num_categories: 2,
    };
    let params = DecoderParams::init(dims, 9);
    let mp_cfg = MpConfig {
        num_queries: 4,
        ..Default::default()
    };
    let part = build_mp_part(&scene, &dims, &mp_cfg, 3).expect("valid MP config");
    let inputs_mp = part.to_inputs(dims.num_queries);
    let inputs = params.weights.named().into_iter().map(|(_, t)| t.clone()).collect();
    let w = LossWeights::default();
    (inputs, Box::new(move |tape: &mut Tape, vars: &[Var]| {
        let mut it = vars.iter().copied();
        let wv = params.weights.map(&mut |_, _| it.next().expect("param"));
        let spec = ForwardSpec {
            pyramid: &pyramid,
            mp: Some(&inputs_mp),
        };
        let out = forward_on_tape(tape, &wv, &dims, &spec)?;
        match layer_losses(tape, &out, &scene, Some(&part), mode, &w) {
            Ok(l) => Ok(l.total),
            Err(MatchError::Tensor(e)) => Err(e),
            Err(e) => panic!("loss setup: {e}"),
        }
    }))
}

/// Runs every check; deterministic in `seed`.
pub fn run_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = cases(&mut rng);
    let (i, b) = end_to_end(LossMode::PerLayer);
    all.push(("end_to_end_loss", i, b));
    let (i, b) = end_to_end(LossMode::ConsistencyAux);
    all.push(("end_to_end_loss_aux", i, b));
    all.into_iter()
        .map(|(name, inputs, body)| {
            let err = match check_gradient(&inputs, |t, v| body(t, v)) {
                Ok(r) => r.max_rel_error,
                Err(_) => f64::INFINITY,
            };
            CheckOutcome {
                name: name.to_string(),
                max_rel_error: err,
                passed: err < TOLERANCE,
            }
        })
        .collect()
}
