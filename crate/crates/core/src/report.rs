//! Stable text and CSV renderings of evaluation results.

use crate::eval::{Analysis, Evaluation};
use std::fmt::Write;

/// Everything written after a run. Ratios are stored in [0, 1] and
/// printed as percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub eval: Evaluation,
}

fn pct(v: f64) -> String {
    format!("{:.6}", 100.0 * v)
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let e = &self.eval;
        writeln!(s, "mpseg-metrics v1").unwrap();
        writeln!(s, "variant: {}", self.variant).unwrap();
        writeln!(s, "seed: {}", self.seed).unwrap();
        writeln!(s, "config_hash: {}", self.config_hash).unwrap();
        writeln!(s, "steps: {}", self.steps).unwrap();
        writeln!(s, "eval_scenes: {}", e.scenes).unwrap();
        for (i, l) in self.epoch_losses.iter().enumerate() {
            writeln!(s, "epoch_loss.{i}: {l:.6}").unwrap();
        }
        writeln!(s, "ap50: {}", pct(e.ap.ap50)).unwrap();
        writeln!(s, "ap75: {}", pct(e.ap.ap75)).unwrap();
        writeln!(s, "ap_mean: {}", pct(e.ap.mean)).unwrap();
        for (i, u) in e.util.iter().enumerate() {
            writeln!(s, "util.{i}: {}", pct(*u)).unwrap();
        }
        for (i, m) in e.miou.iter().enumerate() {
            writeln!(s, "miou_l.{}: {}", i + 1, pct(*m)).unwrap();
        }
        writeln!(s, "final_util_forced: {}", e.final_util_forced).unwrap();
        s
    }

    /// `layer,miou_l,util`; layer 0 has no mIoU-L.
    pub fn to_csv(&self) -> String {
        layer_csv(&self.eval)
    }
}

pub fn layer_csv(e: &Evaluation) -> String {
    let mut s = String::from("layer,miou_l,util\n");
    for (i, u) in e.util.iter().enumerate() {
        let m = if i == 0 { String::new() } else { pct(e.miou[i - 1]) };
        writeln!(s, "{i},{m},{}", pct(*u)).unwrap();
    }
    s
}

/// Text table in the layout of a layer-wise consistency table.
pub fn analysis_table(a: &Analysis) -> String {
    let passes = a.mp_util_hard.len();
    let mut s = String::new();
    write!(s, "{:<22}", "layer").unwrap();
    for i in 0..passes {
        write!(s, "{i:>7}").unwrap();
    }
    s.push('\n');
    let mut row = |label: &str, vals: &[Option<f64>]| {
        write!(s, "{label:<22}").unwrap();
        for v in vals {
            match v {
                Some(v) => write!(s, "{:>7.1}", 100.0 * v).unwrap(),
                None => write!(s, "{:>7}", "-").unwrap(),
            }
        }
        s.push('\n');
    };
    let miou: Vec<Option<f64>> = std::iter::once(None)
        .chain(a.matching.miou.iter().copied().map(Some))
        .collect();
    row("mIoU-L", &miou);
    row("Util", &a.matching.util.iter().copied().map(Some).collect::<Vec<_>>());
    row("Util (MP, hard)", &a.mp_util_hard.iter().copied().map(Some).collect::<Vec<_>>());
    row("Util* (MP, bipartite)", &a.mp_util_bipartite.iter().copied().map(Some).collect::<Vec<_>>());
    s
}

/// `layer,miou_l,util,mp_util_hard,mp_util_bipartite`.
pub fn analysis_csv(a: &Analysis) -> String {
    let mut s = String::from("layer,miou_l,util,mp_util_hard,mp_util_bipartite\n");
    for i in 0..a.mp_util_hard.len() {
        let m = if i == 0 { String::new() } else { pct(a.matching.miou[i - 1]) };
        writeln!(
            s,
            "{i},{m},{},{},{}",
            pct(a.matching.util[i]),
            pct(a.mp_util_hard[i]),
            pct(a.mp_util_bipartite[i])
        )
        .unwrap();
    }
    s
}
