//! One experiment: every seed of one (subset, model, trainer) combination.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, TrainerKind};
use crate::autodiff::{ParamLayout, ParamVector};
use crate::data::{load_prepared, PreparedData, SampleSource};
use crate::error::{Error, Result};
use crate::metrics::MetricTriple;
use crate::models::{Architecture, ModelSpec, Network};
use crate::predict::{
    correct, estimate_p_late, write_prediction_table, PosteriorEnsemble, PosteriorSource,
    PredictiveSummary,
};
use crate::rng::{SeedStreams, Stream};
use crate::trainers::{train_backprop, train_bbb, train_svgd, GaussianSurrogate, ParticleSet, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub record: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub final_train_loss: f64,
    pub metrics: MetricTriple,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_late: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected: Option<MetricTriple>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub record: String,
    pub schema_version: u32,
    pub toolkit_version: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub mean: MetricTriple,
    /// Population standard deviation across seeds.
    pub std: MetricTriple,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_corrected: Option<MetricTriple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_corrected: Option<MetricTriple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_late: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub seeds: Vec<SeedRecord>,
    pub aggregate: AggregateRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub seed: Option<u64>,
    pub phase: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntryRecord {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Trained posterior of one seed, as written to `posterior_seed<N>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorFile {
    pub source: PosteriorSource,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_std: Option<f64>,
    pub layout: Vec<LayoutEntryRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
}

pub fn posterior_path(dir: &Path, seed: u64) -> std::path::PathBuf {
    dir.join(format!("posterior_seed{seed}.json"))
}

pub fn predictions_path(dir: &Path, seed: u64) -> std::path::PathBuf {
    dir.join(format!("predictions_seed{seed}.csv"))
}

fn layout_records(layout: &ParamLayout) -> Vec<LayoutEntryRecord> {
    layout
        .entries()
        .iter()
        .map(|e| LayoutEntryRecord {
            name: e.name.clone(),
            shape: e.shape.clone(),
        })
        .collect()
}

pub fn network_for(cfg: &RunConfig, data: &PreparedData) -> Result<Network> {
    let dropout = if cfg.trainer == TrainerKind::Bp { cfg.train.dropout } else { 0.0 };
    let spec = ModelSpec::new(cfg.model, data.config.window, data.config.n_features()).with_dropout(dropout);
    Network::new(spec)
}

impl PosteriorFile {
    /// Rebuild the evaluation ensemble. Surrogate draws come from the seed's
    /// evaluation stream, so they match the ones used for the report.
    pub fn ensemble(&self, network: &Network, eval_draws: usize) -> Result<PosteriorEnsemble> {
        let layout = network.layout();
        if layout_records(layout) != self.layout {
            return Err(Error::Data("posterior file does not match the configured network".into()));
        }
        let vec = |v: &Vec<f64>| ParamVector::new(std::sync::Arc::clone(layout), v.clone());
        let missing = || Error::Data(format!("{:?} posterior file is missing its parameters", self.source));
        match self.source {
            PosteriorSource::Point => {
                let m = self.members.as_ref().and_then(|m| m.first()).ok_or_else(missing)?;
                Ok(PosteriorEnsemble::point(vec(m)?))
            }
            PosteriorSource::Svgd => {
                let m = self.members.as_ref().ok_or_else(missing)?;
                let set = ParticleSet::new(m.iter().map(vec).collect::<Result<_>>()?)?;
                Ok(PosteriorEnsemble::from_particles(set))
            }
            PosteriorSource::Bbb => {
                let (mu, rho) = self.mu.as_ref().zip(self.rho.as_ref()).ok_or_else(missing)?;
                let q = GaussianSurrogate::new(std::sync::Arc::clone(layout), mu.clone(), rho.clone())?;
                let mut rng = SeedStreams::new(self.seed).stream(Stream::Evaluation);
                PosteriorEnsemble::from_surrogate(&q, eval_draws, &mut rng)
            }
        }
    }
}

struct SeedOutcome {
    record: SeedRecord,
    posterior: PosteriorFile,
    table: Vec<u8>,
    timings: Vec<TimingRecord>,
}

fn timed<T>(timings: &mut Vec<TimingRecord>, seed: Option<u64>, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_phase(phase))?;
    timings.push(TimingRecord {
        seed,
        phase: phase.to_string(),
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(out)
}

fn run_seed(cfg: &RunConfig, data: &PreparedData, network: &Network, seed: u64) -> Result<SeedOutcome> {
    let mut timings = Vec::new();
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let s = Some(seed);
    let layout = layout_records(network.layout());
    let (posterior, final_loss) = timed(&mut timings, s, "train", || {
        Ok(match cfg.trainer {
            TrainerKind::Bp => {
                let t = train_backprop(network, &data.train, &tc)?;
                let file = PosteriorFile {
                    source: PosteriorSource::Point,
                    seed,
                    prior_std: None,
                    layout: layout.clone(),
                    members: Some(vec![t.result.into_values()]),
                    mu: None,
                    rho: None,
                };
                (file, t.trace.epoch_loss.last().copied())
            }
            TrainerKind::Bbb => {
                let t = train_bbb(network, &data.train, &tc)?;
                let file = PosteriorFile {
                    source: PosteriorSource::Bbb,
                    seed,
                    prior_std: Some(tc.prior_std),
                    layout: layout.clone(),
                    members: None,
                    mu: Some(t.result.mu),
                    rho: Some(t.result.rho),
                };
                (file, t.trace.epoch_loss.last().copied())
            }
            TrainerKind::Svgd => {
                let t = train_svgd(network, &data.train, &tc)?;
                let file = PosteriorFile {
                    source: PosteriorSource::Svgd,
                    seed,
                    prior_std: Some(tc.prior_std),
                    layout: layout.clone(),
                    members: Some(t.result.into_particles().into_iter().map(ParamVector::into_values).collect()),
                    mu: None,
                    rho: None,
                };
                (file, t.trace.epoch_loss.last().copied())
            }
        })
    })?;

    let ensemble = posterior.ensemble(network, cfg.eval_draws)?;
    let test_truth = data.test.target_values();
    let summary = timed(&mut timings, s, "evaluate", || {
        if data.test.is_empty() {
            return Err(Error::Data("test set is empty".into()));
        }
        PredictiveSummary::evaluate(&ensemble, network, &data.test)
    })?;
    let metrics = MetricTriple::evaluate(&summary.mean, test_truth)?;

    let (p_late, corrected, corrected_mean) = if cfg.trainer.is_bayesian() {
        let p = timed(&mut timings, s, "p_late", || {
            let train = PredictiveSummary::evaluate(&ensemble, network, &data.train)?;
            estimate_p_late(&train.mean, data.train.target_values())
        })?;
        let c = correct(&summary, p.p_late, cfg.correction_k)?;
        let m = MetricTriple::evaluate(&c, test_truth)?;
        (Some(p.p_late), Some(m), c)
    } else {
        (None, None, summary.mean.clone())
    };

    let mut table = Vec::new();
    write_prediction_table(&mut table, &data.test, &summary, &corrected_mean)?;
    let record = SeedRecord {
        record: "seed".into(),
        seed,
        n_train: data.train.len(),
        n_test: data.test.len(),
        final_train_loss: final_loss.unwrap_or(f64::NAN),
        metrics,
        p_late,
        corrected,
    };
    Ok(SeedOutcome {
        record,
        posterior,
        table,
        timings,
    })
}

fn population_mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate(triples: &[MetricTriple]) -> (MetricTriple, MetricTriple) {
    let (rm, rs) = population_mean_std(triples.iter().map(|t| t.rmse));
    let (mm, ms) = population_mean_std(triples.iter().map(|t| t.mae));
    let (sm, ss) = population_mean_std(triples.iter().map(|t| t.score));
    (
        MetricTriple {
            rmse: rm,
            mae: mm,
            score: sm,
        },
        MetricTriple {
            rmse: rs,
            mae: ms,
            score: ss,
        },
    )
}

fn check_finite_report(report: &RunReport) -> Result<()> {
    let value = serde_json::to_value(&report.aggregate).expect("aggregate serialises");
    let seeds = serde_json::to_value(&report.seeds).expect("seed records serialise");
    fn walk(v: &serde_json::Value) -> bool {
        match v {
            serde_json::Value::Null => false,
            serde_json::Value::Array(a) => a.iter().all(walk),
            serde_json::Value::Object(o) => o.values().all(walk),
            _ => true,
        }
    }
    // serde_json writes non-finite floats as null.
    if walk(&value) && walk(&seeds) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "report" })
    }
}

/// Assemble the report from per-seed records.
pub fn build_report(cfg: &RunConfig, seeds: Vec<SeedRecord>) -> Result<RunReport> {
    if seeds.is_empty() {
        return Err(Error::Usage("no seeds were run".into()));
    }
    let raw: Vec<MetricTriple> = seeds.iter().map(|s| s.metrics).collect();
    let (mean, std) = aggregate(&raw);
    let corrected: Option<Vec<MetricTriple>> = seeds.iter().map(|s| s.corrected).collect();
    let (mean_corrected, std_corrected) = match corrected {
        Some(c) if cfg.trainer.is_bayesian() => {
            let (m, s) = aggregate(&c);
            (Some(m), Some(s))
        }
        _ => (None, None),
    };
    let p_late: Option<Vec<f64>> = seeds.iter().map(|s| s.p_late).collect();
    let report = RunReport {
        aggregate: AggregateRecord {
            record: "aggregate".into(),
            schema_version: SCHEMA_VERSION,
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            seeds: seeds.iter().map(|s| s.seed).collect(),
            mean,
            std,
            mean_corrected,
            std_corrected,
            p_late: p_late.filter(|_| cfg.trainer.is_bayesian()),
        },
        seeds,
    };
    check_finite_report(&report)?;
    Ok(report)
}

pub fn report_lines(report: &RunReport) -> String {
    let mut out = String::new();
    for s in &report.seeds {
        out.push_str(&serde_json::to_string(s).expect("seed record serialises"));
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(&report.aggregate).expect("aggregate serialises"));
    out.push('\n');
    out
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut seeds = Vec::new();
    let mut aggregate = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        };
        let v: serde_json::Value = serde_json::from_str(line).map_err(parse_err)?;
        match v.get("record").and_then(|r| r.as_str()) {
            Some("seed") => seeds.push(serde_json::from_value(v).map_err(parse_err)?),
            Some("aggregate") => aggregate = Some(serde_json::from_value(v).map_err(parse_err)?),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "unknown record type".into(),
                })
            }
        }
    }
    let aggregate: AggregateRecord =
        aggregate.ok_or_else(|| Error::Data(format!("{} has no aggregate record", path.display())))?;
    if aggregate.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "report schema {} is not supported (expected {SCHEMA_VERSION})",
            aggregate.schema_version
        )));
    }
    Ok(RunReport { seeds, aggregate })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Train and evaluate every seed, then write the report, prediction tables,
/// posteriors and timings into `cfg.out_dir`.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let data = timed(&mut timings, None, "preprocess", || {
        load_prepared(&cfg.data_dir, &cfg.subset_config(), cfg.cache_dir.as_deref())
    })?;
    log::info!(
        "{}: {} training windows, {} test windows",
        cfg.subset,
        data.train.len(),
        data.test.len()
    );
    let network = network_for(cfg, &data).map_err(|e| e.in_phase("model"))?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(format!("creating {}", cfg.out_dir.display()), e))?;

    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        log::info!("{} {}-{} seed {seed}", cfg.subset, cfg.model, cfg.trainer);
        let out = run_seed(cfg, &data, &network, seed).map_err(|e| e.in_phase(format!("seed {seed}")))?;
        write_file(&predictions_path(&cfg.out_dir, seed), &out.table)?;
        let post = serde_json::to_vec(&out.posterior).expect("posterior serialises");
        write_file(&posterior_path(&cfg.out_dir, seed), &post)?;
        timings.extend(out.timings);
        records.push(out.record);
    }
    let report = build_report(cfg, records)?;
    write_file(&cfg.out_dir.join(REPORT_FILE), report_lines(&report).as_bytes())?;
    let mut t = String::new();
    for r in &timings {
        t.push_str(&serde_json::to_string(r).expect("timing serialises"));
        t.push('\n');
    }
    write_file(&cfg.out_dir.join(TIMINGS_FILE), t.as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seed: u64, rmse: f64, corrected: Option<f64>) -> SeedRecord {
        let m = |r| MetricTriple {
            rmse: r,
            mae: r / 2.0,
            score: r * 10.0,
        };
        SeedRecord {
            record: "seed".into(),
            seed,
            n_train: 1,
            n_test: 1,
            final_train_loss: 0.5,
            metrics: m(rmse),
            p_late: corrected.map(|_| 0.25),
            corrected: corrected.map(m),
        }
    }

    #[test]
    fn single_seed_has_zero_std() {
        let cfg = RunConfig::default();
        let r = build_report(&cfg, vec![rec(0, 12.0, Some(11.0))]).unwrap();
        assert_eq!(r.aggregate.std.rmse, 0.0);
        assert_eq!(r.aggregate.std_corrected.unwrap().score, 0.0);
    }

    #[test]
    fn backprop_report_omits_starred_metrics() {
        let cfg = RunConfig {
            trainer: TrainerKind::Bp,
            ..RunConfig::default()
        };
        let r = build_report(&cfg, vec![rec(0, 12.0, None), rec(1, 14.0, None)]).unwrap();
        assert_eq!(r.aggregate.mean.rmse, 13.0);
        assert_eq!(r.aggregate.std.rmse, 1.0);
        let text = report_lines(&r);
        assert!(!text.contains("corrected"));
        assert!(!text.contains("p_late"));
    }

    #[test]
    fn report_round_trips_and_rejects_nan() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let r = build_report(&cfg, vec![rec(3, 12.0, Some(11.0))]).unwrap();
        let p = dir.path().join(REPORT_FILE);
        fs::write(&p, report_lines(&r)).unwrap();
        let back = read_report(&p).unwrap();
        assert_eq!(back.seeds, r.seeds);
        assert_eq!(back.aggregate.mean, r.aggregate.mean);
        assert!(matches!(
            build_report(&cfg, vec![rec(0, f64::NAN, Some(1.0))]),
            Err(Error::NonFinite { .. })
        ));
    }
}
