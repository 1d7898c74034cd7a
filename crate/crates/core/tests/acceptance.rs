//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 4 and 5 are empirical benchmark trends; they are reported but do
//! not fail the run. Every other criterion is enforced. Set
//! `MPSEG_ACCEPTANCE_QUICK=1` to skip the 12-run benchmark.

use mpseg::config::{RunConfig, Variant};
use mpseg::data::{generate_scene, Dataset, SynthConfig};
use mpseg::decoder::{full_forward, inference_forward, DecoderParams, ForwardSpec, MpInputs, MpQueries};
use mpseg::eval::{analyze, evaluate, evaluate_training_path, Evaluation};
use mpseg::gradsuite;
use mpseg::maskops::{max_point_flips, point_noise, resize_nearest, shift_noise_with_offset, to_attention_block, BinaryMask, NoiseKind, NoiseSpec};
use mpseg::matching::{brute_force_assignment, hungarian, CostMatrix, LossWeights};
use mpseg::metrics::unbiased_weight_ratio;
use mpseg::mp::{build_mp_part, MpConfig};
use mpseg::report::MetricsReport;
use mpseg::study::{run_study, StudyConfig, WeightKind};
use mpseg::tensor::Tensor;
use mpseg::train::{split, train};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::process::Command;
use std::time::Instant;

const SEEDS: [u64; 3] = [0, 1, 2];
const BENCH_VARIANTS: [Variant; 4] = [
    Variant::Baseline,
    Variant::MpAllNoises,
    Variant::MpAllLayers,
    Variant::MpFirstLayer,
];

#[derive(Default)]
struct Ledger {
    lines: Vec<(String, bool, bool)>,
}

impl Ledger {
    fn record(&mut self, id: &str, enforced: bool, pass: bool, detail: String) {
        println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((id.to_string(), enforced, pass));
    }

    fn skip(&mut self, id: &str, why: &str) {
        println!("SKIP {id}: {why}");
    }
}

struct Run {
    variant: Variant,
    params: DecoderParams,
    eval: Evaluation,
}

fn reference_config(variant: Variant, seed: u64) -> RunConfig {
    RunConfig {
        variant,
        seed,
        ..Default::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn median_curve(runs: &[&Run], f: impl Fn(&Evaluation) -> &Vec<f64>) -> Vec<f64> {
    let len = f(&runs[0].eval).len();
    (0..len).map(|i| median(runs.iter().map(|r| f(&r.eval)[i]).collect())).collect()
}

fn pct(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{:.1}", 100.0 * x)).collect();
    format!("[{}]", parts.join(", "))
}

fn non_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0])
}

fn criterion_1(l: &mut Ledger) {
    let t = Instant::now();
    let r = gradsuite::run_suite(0);
    let secs = t.elapsed().as_secs_f64();
    let worst = r.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = r.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let has_e2e = r.iter().any(|c| c.name == "end_to_end_loss");
    l.record(
        "1 gradient suite",
        true,
        failed.is_empty() && has_e2e && secs < 120.0,
        format!(
            "{} checks, worst rel err {worst:.2e} (< {:e}), failed {failed:?}, {secs:.1}s (< 120s)",
            r.len(),
            gradsuite::TOLERANCE
        ),
    );
}

fn criterion_2(l: &mut Ledger) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for k in 0..200 {
        let rows = rng.gen_range(1..=7);
        let cols = rng.gen_range(1..=7);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| if k % 4 == 0 { f64::from(rng.gen_range(0..4)) } else { rng.gen_range(-5.0..5.0) })
            .collect();
        let m = CostMatrix::new(rows, cols, data).unwrap();
        if hungarian(&m).unwrap().cost != brute_force_assignment(&m).unwrap().cost {
            mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    l.record(
        "2 hungarian oracle",
        true,
        mismatches == 0 && secs < 10.0,
        format!("200 matrices up to 7x7, {mismatches} cost mismatches, {secs:.2}s (< 10s)"),
    );
}

fn criterion_3(l: &mut Ledger, runs: &[Run], ds: &Dataset, scenes: &[usize]) {
    let forced = runs.iter().all(|r| r.eval.final_util_forced);
    let clean = MpConfig {
        noise: NoiseSpec::default(),
        label_flip_ratio: 0.0,
        ..Default::default()
    };
    let mut hard_ok = true;
    let mut bip_min: f64 = 1.0;
    for r in runs.iter().filter(|r| r.variant.uses_mp()) {
        let a = analyze(&r.params, ds, scenes, &clean, &LossWeights::default(), 0).unwrap();
        hard_ok &= a.mp_util_hard.iter().all(|&u| u == 1.0);
        bip_min = bip_min.min(a.mp_util_bipartite.iter().copied().fold(1.0, f64::min));
    }
    l.record(
        "3 forced Util values",
        true,
        forced && hard_ok,
        format!(
            "final-layer Util = 100% on every scene for {} runs: {forced}; MP hard-assignment Util = 100% at every layer: {hard_ok} (bipartite min {:.1}%)",
            runs.len(),
            100.0 * bip_min
        ),
    );
}

fn criterion_4_5(l: &mut Ledger, runs: &[Run], secs: f64) {
    let by = |v: Variant| runs.iter().filter(|r| r.variant == v).collect::<Vec<_>>();
    let (base, noises, all, first) = (
        by(Variant::Baseline),
        by(Variant::MpAllNoises),
        by(Variant::MpAllLayers),
        by(Variant::MpFirstLayer),
    );
    let miou = |r: &[&Run]| median_curve(r, |e| &e.miou);
    let util = |r: &[&Run]| median_curve(r, |e| &e.util);
    for (name, r) in [("baseline", &base), ("mp-all+noises", &noises), ("mp-all-layers", &all), ("mp-first-layer", &first)] {
        println!("  {name:<15} mIoU-L^1..L {}", pct(&miou(r)));
        println!("  {name:<15} Util^0..L   {}", pct(&util(r)));
    }

    let (bm, bu) = (miou(&base), util(&base));
    let ok_a = non_decreasing(&bm) && non_decreasing(&bu[1..]);
    l.record(
        "4a baseline layer trend",
        false,
        ok_a,
        format!("median mIoU-L^i and Util^i non-decreasing over i = 1..L: mIoU {}, Util {}", non_decreasing(&bm), non_decreasing(&bu[1..])),
    );

    let (nm, nu) = (miou(&noises), util(&noises));
    let du = 100.0 * (nu[1] - bu[1]);
    let dm = 100.0 * (nm[0] - bm[0]);
    l.record(
        "4b mp-all+noises vs baseline at layer 1",
        false,
        du >= 10.0 && dm >= 10.0,
        format!(
            "Util^1 {:.1} -> {:.1} ({du:+.1}, need >= +10); mIoU-L^1 {:.1} -> {:.1} ({dm:+.1}, need >= +10)",
            100.0 * bu[1],
            100.0 * nu[1],
            100.0 * bm[0],
            100.0 * nm[0]
        ),
    );

    // mIoU-L^i for i = 4..=9 sits at indices 3..=8
    let late = |m: &[f64]| m[3..].iter().sum::<f64>() / (m.len() - 3) as f64;
    let (la, lf) = (late(&miou(&all)), late(&miou(&first)));
    l.record(
        "4c mp-all-layers vs mp-first-layer",
        false,
        la >= lf,
        format!("mean mIoU-L over layers 4..9: {:.2} vs {:.2}", 100.0 * la, 100.0 * lf),
    );
    l.record(
        "4d benchmark runtime",
        false,
        secs < 45.0 * 60.0,
        format!("12 runs x 1000 steps plus evaluation in {:.1} min (< 45)", secs / 60.0),
    );

    let ap = |r: &[&Run]| median(r.iter().map(|x| x.eval.ap.mean).collect());
    let ap50 = |r: &[&Run]| median(r.iter().map(|x| x.eval.ap.ap50).collect());
    let (ab, an) = (ap(&base), ap(&noises));
    l.record(
        "5 AP-lite gain",
        false,
        an >= ab + 0.03,
        format!(
            "median AP-lite (mean of 0.5/0.75) {ab:.4} -> {an:.4} ({:+.4}, need >= +0.03); AP50 {:.4} -> {:.4}",
            an - ab,
            ap50(&base),
            ap50(&noises)
        ),
    );
}

fn criterion_6(l: &mut Ledger, runs: &[Run], ds: &Dataset, scenes: &[usize]) {
    let w = LossWeights::default();
    let mut same_reports = true;
    let mut same_outputs = true;
    for r in runs {
        let a = evaluate(&r.params, ds, scenes, &w).unwrap();
        let b = evaluate_training_path(&r.params, ds, scenes, &w).unwrap();
        let text = |e: Evaluation| {
            MetricsReport {
                variant: r.variant.to_string(),
                seed: 0,
                config_hash: String::new(),
                steps: 0,
                epoch_losses: vec![],
                eval: e,
            }
            .to_text()
        };
        same_reports &= text(a) == text(b);
        for &i in scenes.iter().take(10) {
            let pyr = ds.features(&ds.scenes[i]);
            let x = inference_forward(&pyr, &r.params);
            let y = full_forward(&ForwardSpec { pyramid: &pyr, mp: None }, &r.params).unwrap();
            same_outputs &= x == y;
        }
    }
    l.record(
        "6 inference-path equality",
        true,
        same_reports && same_outputs,
        format!(
            "{} checkpoints: reports byte-identical {same_reports}; raw outputs bit-identical {same_outputs}",
            runs.len()
        ),
    );
}

fn criterion_7(l: &mut Ledger, params: &DecoderParams, ds: &Dataset, scenes: &[usize]) {
    let dims = params.dims;
    let cfg = MpConfig {
        noise: NoiseSpec {
            kind: NoiseKind::Point,
            ..NoiseSpec::default()
        },
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut checked, mut leaks) = (0, 0);
    for &i in scenes.iter().take(20) {
        let scene = &ds.scenes[i];
        let part = build_mp_part(scene, &dims, &cfg, i as u64).unwrap();
        if part.is_empty() {
            continue;
        }
        let pyr = ds.features(scene);
        let plain = inference_forward(&pyr, params);
        let real = part.to_inputs(dims.num_queries);
        for _ in 0..3 {
            let m = part.len();
            let arbitrary = MpInputs {
                queries: MpQueries::Raw(
                    Tensor::matrix(m, dims.dim, (0..m * dims.dim).map(|_| rng.gen_range(-50.0..50.0)).collect()).unwrap(),
                ),
                overrides: real
                    .overrides
                    .iter()
                    .map(|layer| {
                        layer
                            .iter()
                            .map(|g| {
                                let len = g.as_ref().map_or(0, Vec::len);
                                (len > 0 && rng.gen_bool(0.8)).then(|| (0..len).map(|_| rng.gen_bool(0.5)).collect())
                            })
                            .collect()
                    })
                    .collect(),
                self_block: real.self_block.clone(),
            };
            for mp in [&real, &arbitrary] {
                let out = full_forward(&ForwardSpec { pyramid: &pyr, mp: Some(mp) }, params).unwrap();
                checked += 1;
                if out.matching_part() != plain {
                    leaks += 1;
                }
            }
        }
    }
    l.record(
        "7 leakage isolation",
        true,
        checked > 0 && leaks == 0,
        format!("{checked} forwards with real and arbitrary MP content, {leaks} changed the matching part"),
    );
}

fn criterion_8(l: &mut Ledger) {
    let mut total = 0;
    let mut counter = 0;
    let mut guaranteed = 0;
    for (weights, dominant) in [(WeightKind::Softmax, false), (WeightKind::Uniform, false), (WeightKind::Softmax, true)] {
        let cfg = StudyConfig {
            sigmas: vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0],
            samples_per_sigma: 200,
            weights,
            dominant_c0: dominant,
            seed: 8,
            ..Default::default()
        };
        for s in run_study(&cfg).unwrap() {
            total += 1;
            guaranteed += usize::from(s.guaranteed());
            counter += usize::from(s.guaranteed() && !s.threshold_exists());
        }
    }
    // constant weights 2^-k: sums are exact, so the ratios must agree bit for bit
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let mut exact = true;
    for _ in 0..1000 {
        let (a, b) = (rng.gen_range(1..=40usize), rng.gen_range(0..=40usize));
        let w = 0.5f64.powi(rng.gen_range(0..12));
        let r = unbiased_weight_ratio(&vec![w; a], &vec![w; b]).unwrap();
        exact &= r.weight_ratio == r.area_ratio;
    }
    l.record(
        "8 refinement oracle",
        true,
        total >= 1000 && counter == 0 && guaranteed > 0 && exact,
        format!(
            "{total} instances, {guaranteed} with condition and T0 > t1, {counter} counterexamples; constant-weight ratio equals area ratio exactly: {exact}"
        ),
    );
}

fn criterion_9(l: &mut Ledger) {
    // point noise on an area-50 rectangle, ratio 0.2: counts 0..=10
    let rect = BinaryMask::from_fn(16, 16, |y, x| (3..8).contains(&y) && (3..13).contains(&x));
    let max = max_point_flips(rect.area(), 0.2);
    let mut hist = vec![0usize; max + 1];
    let mut out_of_range = 0;
    let draws = 10_000;
    // sub-seeds derived the way the MP part derives them
    for k in 0..draws {
        let f = point_noise(&rect, 0.2, mpseg::seeds::derive(&[9, k as u64])).unwrap().hamming(&rect);
        match hist.get_mut(f) {
            Some(h) => *h += 1,
            None => out_of_range += 1,
        }
    }
    let expected = draws as f64 / hist.len() as f64;
    let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((hist.len() - 1) as f64).unwrap().cdf(chi2);

    // shift noise over synthetic instances, including ones touching the border
    let synth = SynthConfig::default();
    let mut shift_draws = 0;
    let mut outside = 0;
    let mut clipped_outside = 0;
    'outer: for s in 0.. {
        let scene = generate_scene(&synth, s).unwrap();
        for inst in &scene.instances {
            let bb = inst.mask.bbox().unwrap();
            let (cy, cx) = inst.mask.centroid().unwrap();
            for k in 0..20u64 {
                let (out, (dy, dx)) = shift_noise_with_offset(&inst.mask, s as u64 * 1000 + k).unwrap();
                shift_draws += 1;
                if !bb.strictly_contains(cy + dy as f64, cx + dx as f64) {
                    outside += 1;
                }
                if out.centroid().is_none_or(|(y, x)| !bb.strictly_contains(y, x)) {
                    clipped_outside += 1;
                }
                if shift_draws >= 10_000 {
                    break 'outer;
                }
            }
        }
    }

    // zero noise ratios reproduce the exact ground truth
    let dims = mpseg::decoder::ModelDims::default();
    let zero = MpConfig {
        label_flip_ratio: 0.0,
        noise: NoiseSpec {
            kind: NoiseKind::Point,
            point_ratio: 0.0,
            ..NoiseSpec::default()
        },
        ..Default::default()
    };
    let scales = synth.scale_extents();
    let mut exact = true;
    for s in 0..50 {
        let scene = generate_scene(&synth, s).unwrap();
        let part = build_mp_part(&scene, &dims, &zero, 1000 + s as u64).unwrap();
        exact &= part.queries.iter().all(|q| q.query_category == q.gt_category);
        for (layer, grids) in part.overrides.iter().enumerate() {
            let (h, w) = scales[mpseg::decoder::ModelDims::scale_of_layer(layer + 1)];
            for (q, g) in part.queries.iter().zip(grids) {
                let want = to_attention_block(&resize_nearest(&scene.instances[q.instance].mask, h, w));
                exact &= g.as_ref() == Some(&want);
            }
        }
    }
    l.record(
        "9 noise statistics",
        true,
        out_of_range == 0 && p > 0.01 && outside == 0 && exact,
        format!(
            "point flips uniform on 0..={max}: chi2 {chi2:.2}, p = {p:.3} (> 0.01), {out_of_range} out of range; \
shifted centroid outside bbox in {outside}/{shift_draws} draws (after border clipping: {clipped_outside}); \
zero ratios reproduce GT exactly: {exact}"
        ),
    );
}

fn criterion_10(l: &mut Ledger) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = r#"{"synth": {"num_scenes": 30}, "train": {"steps": 25, "decay_steps": [20]},
                  "variant": "mp-all+noises"}"#;
    std::fs::write(d.join("cfg.json"), cfg).unwrap();
    let run = |args: &[&str], threads: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_mpseg"))
            .args(args)
            .current_dir(d)
            .env("RUST_LOG", "warn")
            .env("MPSEG_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    let files = ["metrics.txt", "layers.csv", "checkpoint.bin", "config.json"];
    let mut train_runs = Vec::new();
    let mut eval_runs = Vec::new();
    for threads in ["1", "3"] {
        run(&["train", "--config", "cfg.json", "--out", "t"], threads);
        train_runs.push(files.map(|f| std::fs::read(d.join("t").join(f)).unwrap()));
        let out = run(&["eval", "--config", "cfg.json", "--checkpoint", "t/checkpoint.bin", "--out", "e"], threads);
        eval_runs.push((out, std::fs::read(d.join("e/metrics.txt")).unwrap()));
    }
    let same_train = train_runs[0] == train_runs[1];
    let same_eval = eval_runs[0] == eval_runs[1];
    l.record(
        "10 determinism",
        true,
        same_train && same_eval,
        format!("train artifacts byte-identical across runs: {same_train}; eval output byte-identical: {same_eval}"),
    );
}

/// Short runs used when the benchmark is skipped.
fn quick_runs(ds: &Dataset) -> Vec<Run> {
    let scenes: Vec<usize> = split(ds, 0.2).1.collect();
    [Variant::Baseline, Variant::MpAllNoises]
        .into_iter()
        .map(|variant| {
            let mut cfg = reference_config(variant, 0);
            cfg.train.steps = 40;
            let params = train(&cfg, ds, |_| {}).unwrap().params;
            let eval = evaluate(&params, ds, &scenes, &cfg.loss).unwrap();
            Run { variant, params, eval }
        })
        .collect()
}

fn benchmark(ds: &Dataset) -> (Vec<Run>, f64) {
    let t = Instant::now();
    let scenes: Vec<usize> = split(ds, 0.2).1.collect();
    let mut runs = Vec::new();
    for seed in SEEDS {
        for variant in BENCH_VARIANTS {
            let cfg = reference_config(variant, seed);
            let r = Instant::now();
            let params = train(&cfg, ds, |_| {}).unwrap().params;
            let eval = evaluate(&params, ds, &scenes, &cfg.loss).unwrap();
            println!(
                "  trained {variant} seed {seed} in {:.0}s: AP-lite {:.4}, Util^1 {:.1}, mIoU-L^1 {:.1}",
                r.elapsed().as_secs_f64(),
                eval.ap.mean,
                100.0 * eval.util[1],
                100.0 * eval.miou[0]
            );
            runs.push(Run { variant, params, eval });
        }
    }
    (runs, t.elapsed().as_secs_f64())
}

fn main() {
    // cargo passes harness flags such as --nocapture; a filter that excludes
    // this target skips the run
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let quick = std::env::var("MPSEG_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let mut l = Ledger::default();
    criterion_1(&mut l);
    criterion_2(&mut l);

    let cfg = reference_config(Variant::Baseline, 0);
    let ds = Dataset::generate(&cfg.synth).unwrap();
    let scenes: Vec<usize> = split(&ds, 0.2).1.collect();
    let (runs, bench_secs) = if quick {
        (quick_runs(&ds), None)
    } else {
        println!("reference benchmark: 4 variants x 3 seeds x 1000 steps, {} scenes", ds.scenes.len());
        let (r, s) = benchmark(&ds);
        (r, Some(s))
    };
    criterion_3(&mut l, &runs, &ds, &scenes);
    match bench_secs {
        Some(s) => criterion_4_5(&mut l, &runs, s),
        None => {
            l.skip("4 Table 1 trend", "MPSEG_ACCEPTANCE_QUICK=1");
            l.skip("5 AP-lite gain", "MPSEG_ACCEPTANCE_QUICK=1");
        }
    }
    criterion_6(&mut l, &runs, &ds, &scenes);
    let mp_model = &runs.iter().find(|r| r.variant == Variant::MpAllNoises).unwrap().params;
    criterion_7(&mut l, mp_model, &ds, &scenes);
    criterion_8(&mut l);
    criterion_9(&mut l);
    criterion_10(&mut l);

    let passed = l.lines.iter().filter(|x| x.2).count();
    let enforced_failures: Vec<&str> = l.lines.iter().filter(|x| x.1 && !x.2).map(|x| x.0.as_str()).collect();
    println!("acceptance: {passed}/{} lines passed; enforced failures: {enforced_failures:?}", l.lines.len());
    if !enforced_failures.is_empty() {
        std::process::exit(1);
    }
}
