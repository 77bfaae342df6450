//! Raw data behind a prior/posterior/predictive plot for one weight and one test sample.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::{network_for, posterior_path, read_report, PosteriorFile};
use crate::data::{load_prepared, SampleSource, Selection};
use crate::error::{Error, Result};
use crate::models::Architecture;
use crate::predict::PosteriorSource;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorRecord {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distributions {
    pub source: PosteriorSource,
    pub point_estimate: bool,
    pub seed: u64,
    pub weight_index: usize,
    /// Parameter block and flat offset within it.
    pub weight_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorRecord>,
    pub weight_values: Vec<f64>,
    pub sample_index: usize,
    pub unit_id: u32,
    pub true_rul: f64,
    pub predictions: Vec<f64>,
}

/// Collect the member values of weight `weight_index` and the member
/// predictions for test sample `sample_index` of the run at `report`.
pub fn emit_distributions(
    report: &Path,
    seed: Option<u64>,
    weight_index: usize,
    sample_index: usize,
    cache_dir: Option<&Path>,
) -> Result<Distributions> {
    let rep = read_report(report)?;
    let cfg = rep.aggregate.config;
    let seed = match seed {
        Some(s) if cfg.seeds.contains(&s) => s,
        Some(s) => return Err(Error::Usage(format!("seed {s} is not part of this run"))),
        None => cfg.seeds[0],
    };
    let dir = report.parent().unwrap_or(Path::new("."));
    let path = posterior_path(dir, seed);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let post: PosteriorFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;

    let data = load_prepared(&cfg.data_dir, &cfg.subset_config(), cache_dir)?;
    let network = network_for(&cfg, &data)?;
    let d = network.layout().dim();
    if weight_index >= d {
        return Err(Error::Usage(format!("weight index {weight_index} out of range (D = {d})")));
    }
    if sample_index >= data.test.len() {
        return Err(Error::Usage(format!(
            "sample index {sample_index} out of range ({} test samples)",
            data.test.len()
        )));
    }
    let entry = network
        .layout()
        .entries()
        .iter()
        .find(|e| e.range().contains(&weight_index))
        .expect("layout covers every index");
    let ensemble = post.ensemble(&network, cfg.eval_draws)?;
    let by_member = ensemble.predict_all(&network, &Selection::new(&data.test, vec![sample_index]))?;
    let (unit_id, _) = data.test.provenance(sample_index);
    Ok(Distributions {
        source: post.source,
        point_estimate: post.source == PosteriorSource::Point,
        seed,
        weight_index,
        weight_name: format!("{}[{}]", entry.name, weight_index - entry.offset),
        prior: post.prior_std.map(|std| PriorRecord { mean: 0.0, std }),
        weight_values: ensemble.members().iter().map(|m| m.values()[weight_index]).collect(),
        sample_index,
        unit_id,
        true_rul: data.test.target_values()[sample_index],
        predictions: by_member.into_iter().map(|p| p[0]).collect(),
    })
}
