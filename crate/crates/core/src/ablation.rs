//! The KD-composition ablation grid: rows a0–a3 (R2R) and b0–b3 (R2L).

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::PreparedDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::model::PlaceModel;
use crate::registry::Strategies;
use crate::retrieval::RecallReport;
use crate::training::{EpochMetrics, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AblationRow {
    pub label: &'static str,
    pub mode: &'static str,
    pub use_le: bool,
    pub use_fdd: bool,
    pub use_rd: bool,
}

const fn row(label: &'static str, mode: &'static str, use_le: bool, use_fdd: bool, use_rd: bool) -> AblationRow {
    AblationRow {
        label,
        mode,
        use_le,
        use_fdd,
        use_rd,
    }
}

pub const ABLATION_ROWS: [AblationRow; 8] = [
    row("a0", "student_r2r", false, false, false),
    row("a1", "student_r2r", true, false, false),
    row("a2", "student_r2r", true, true, false),
    row("a3", "student_r2r", true, true, true),
    row("b0", "student_r2l", false, false, false),
    row("b1", "student_r2l", true, false, false),
    row("b2", "student_r2l", true, true, false),
    row("b3", "student_r2l", true, false, true),
];

pub fn ablation_row(label: &str) -> Result<AblationRow> {
    ABLATION_ROWS
        .iter()
        .find(|r| r.label == label)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation row `{label}`")))
}

impl AblationRow {
    /// `base` with this row's mode and flags applied. Rows without enhancement
    /// fall back to raw radar input; b2 is the one R2L row allowed feature distillation.
    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            mode: self.mode.into(),
            use_le: self.use_le,
            use_fdd: self.use_fdd,
            use_rd: self.use_rd,
            enhancement: if self.use_le {
                if base.enhancement == "raw" {
                    "local".into()
                } else {
                    base.enhancement.clone()
                }
            } else {
                "raw".into()
            },
            allow_r2l_fdd: self.mode == "student_r2l" && self.use_fdd,
            seed,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub report: RecallReport,
    pub final_epoch: Option<EpochMetrics>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub retrieval: &'static str,
    pub runs: Vec<SeedRun>,
}

impl AblationResult {
    /// Median over seeds of Recall@n.
    pub fn median_recall(&self, n: usize) -> f64 {
        let mut v: Vec<f64> = self.runs.iter().filter_map(|r| r.report.at(n)).collect();
        v.sort_by(f64::total_cmp);
        match v.len() {
            0 => f64::NAN,
            k if k % 2 == 1 => v[k / 2],
            k => 0.5 * (v[k / 2 - 1] + v[k / 2]),
        }
    }
}

/// Trains one student per (row, seed) against the frozen `teacher` and evaluates it.
pub fn run_ablation(
    rows: &[AblationRow],
    seeds: &[u64],
    base: &TrainConfig,
    strategies: &Strategies,
    data: &PreparedDataset,
    teacher: &PlaceModel,
    opts: &EvalOptions,
) -> Result<Vec<AblationResult>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..rows.len()).flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(r, seed)| {
            let cfg = rows[r].apply(base, seed);
            let mut trainer = Trainer::new(cfg, strategies, data, Some(teacher))?;
            let history = trainer.train(None)?;
            let pair = trainer.mode().retrieval();
            let report = evaluate(trainer.student(), data, pair, opts)?;
            log::info!("ablation {} seed {seed}: R@1 {:.3}", rows[r].label, report.at(1).unwrap_or(f64::NAN));
            Ok((
                r,
                pair.label(),
                SeedRun {
                    seed,
                    report,
                    final_epoch: history.last().copied(),
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut results: Vec<AblationResult> = rows
        .iter()
        .map(|&row| AblationResult {
            row,
            retrieval: "",
            runs: Vec::new(),
        })
        .collect();
    for (r, label, run) in runs {
        results[r].retrieval = label;
        results[r].runs.push(run);
    }
    Ok(results)
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        "-"
    }
}

/// Fixed-width table; recall columns are medians over seeds, in percent.
pub fn render_ablation_table(results: &[AblationResult], cutoffs: &[usize]) -> String {
    let mut out = String::from("row | modality | L_E | L_FDD | L_RD | seeds");
    for n in cutoffs {
        out.push_str(&format!(" | {:>6}", format!("R@{n}")));
    }
    out.push('\n');
    out.push_str(&"-".repeat(44 + 9 * cutoffs.len()));
    out.push('\n');
    for r in results {
        out.push_str(&format!(
            "{:<3} | {:<8} | {:^3} | {:^5} | {:^4} | {:>5}",
            r.row.label,
            r.retrieval,
            mark(r.row.use_le),
            mark(r.row.use_fdd),
            mark(r.row.use_rd),
            r.runs.len()
        ));
        for &n in cutoffs {
            out.push_str(&format!(" | {:>6.1}", 100.0 * r.median_recall(n)));
        }
        out.push('\n');
    }
    out
}

/// One line per (row, seed) with fractional recalls.
pub fn ablation_csv(results: &[AblationResult], cutoffs: &[usize]) -> String {
    let mut out = String::from("row,modality,use_le,use_fdd,use_rd,seed");
    for n in cutoffs {
        out.push_str(&format!(",recall_at_{n}"));
    }
    out.push('\n');
    for r in results {
        for run in &r.runs {
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                r.row.label, r.retrieval, r.row.use_le, r.row.use_fdd, r.row.use_rd, run.seed
            ));
            for &n in cutoffs {
                out.push_str(&format!(",{:.6}", run.report.at(n).unwrap_or(f64::NAN)));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_row_yields_a_valid_config() {
        let s = Strategies::builtin();
        let base = TrainConfig::default();
        for r in ABLATION_ROWS {
            let c = r.apply(&base, 3);
            c.validate(&s).unwrap_or_else(|e| panic!("{}: {e}", r.label));
        }
        assert!(ablation_row("b2").unwrap().apply(&base, 0).allow_r2l_fdd);
        assert!(!ablation_row("b3").unwrap().apply(&base, 0).allow_r2l_fdd);
        assert!(ablation_row("c1").is_err());
    }
}
