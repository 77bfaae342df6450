//! Cross-product of runs with per-cell failure isolation.

use std::fmt::Write as _;
use std::fs;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, SweepConfig, TrainerKind};
use super::run::{run, RunReport};
use crate::data::SubsetName;
use crate::error::{Error, Result};
use crate::metrics::MetricTriple;
use crate::models::ModelKind;

pub const SWEEP_FILE: &str = "sweep.jsonl";
pub const TABLE_FILE: &str = "sweep_table.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub record: String,
    pub subset: SubsetName,
    pub model: ModelKind,
    pub trainer: TrainerKind,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<MetricTriple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<MetricTriple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_corrected: Option<MetricTriple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_corrected: Option<MetricTriple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CellRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Run every cell through `runner`; a failing cell becomes an error record
/// and the sweep moves on.
pub fn sweep_with<F>(cfg: &SweepConfig, mut runner: F) -> Result<Vec<CellRecord>>
where
    F: FnMut(&RunConfig) -> Result<RunReport>,
{
    let cells = cfg.cells();
    if cells.is_empty() {
        return Err(Error::Usage("sweep has no cells".into()));
    }
    Ok(cells
        .iter()
        .map(|c| {
            let mut rec = CellRecord {
                record: "cell".into(),
                subset: c.subset,
                model: c.model,
                trainer: c.trainer,
                status: "ok".into(),
                mean: None,
                std: None,
                mean_corrected: None,
                std_corrected: None,
                error: None,
            };
            match runner(c) {
                Ok(r) => {
                    rec.mean = Some(r.aggregate.mean);
                    rec.std = Some(r.aggregate.std);
                    rec.mean_corrected = r.aggregate.mean_corrected;
                    rec.std_corrected = r.aggregate.std_corrected;
                }
                Err(e) => {
                    log::error!("{}-{}-{} failed: {e}", c.subset, c.model, c.trainer);
                    rec.status = "error".into();
                    rec.error = Some(e.to_string());
                }
            }
            rec
        })
        .collect())
}

fn cell(m: Option<(f64, f64)>) -> String {
    match m {
        Some((mean, std)) => format!("{mean:.2} ± {std:.2}"),
        None => "-".into(),
    }
}

/// Text table: one row per (model, trainer, metric), one column per subset.
pub fn render_table(cfg: &SweepConfig, cells: &[CellRecord]) -> String {
    type Pick = fn(&MetricTriple) -> f64;
    let metrics: [(&str, Pick, bool); 6] = [
        ("RMSE", |m| m.rmse, false),
        ("RMSE*", |m| m.rmse, true),
        ("MAE", |m| m.mae, false),
        ("MAE*", |m| m.mae, true),
        ("Score", |m| m.score, false),
        ("Score*", |m| m.score, true),
    ];
    let width = 20;
    let mut out = format!("{:<18}", "method / metric");
    for s in &cfg.subsets {
        write!(out, "{:>width$}", s.as_str()).unwrap();
    }
    out.push('\n');
    for &model in &cfg.models {
        for &trainer in &cfg.trainers {
            for (name, pick, starred) in metrics {
                let label = format!("{}-{} {name}", model.short_name().to_uppercase(), trainer.as_str().to_uppercase());
                write!(out, "{label:<18}").unwrap();
                for &subset in &cfg.subsets {
                    let c = cells
                        .iter()
                        .find(|c| c.subset == subset && c.model == model && c.trainer == trainer);
                    let v = c.and_then(|c| {
                        if starred {
                            c.mean_corrected.zip(c.std_corrected)
                        } else {
                            c.mean.zip(c.std)
                        }
                    });
                    let text = match c {
                        Some(c) if !c.is_ok() => "error".to_string(),
                        _ => cell(v.map(|(m, s)| (pick(&m), pick(&s)))),
                    };
                    write!(out, "{text:>width$}").unwrap();
                }
                out.push('\n');
            }
        }
    }
    out
}

/// Run the whole sweep and write `sweep.jsonl` and `sweep_table.txt` into the base output directory.
pub fn sweep(cfg: &SweepConfig) -> Result<Vec<CellRecord>> {
    let cells = sweep_with(cfg, run)?;
    let dir = &cfg.base.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut lines = String::new();
    for c in &cells {
        lines.push_str(&serde_json::to_string(c).expect("cell record serialises"));
        lines.push('\n');
    }
    let p = dir.join(SWEEP_FILE);
    fs::write(&p, lines).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    let p = dir.join(TABLE_FILE);
    fs::write(&p, render_table(cfg, &cells)).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    Ok(cells)
}
