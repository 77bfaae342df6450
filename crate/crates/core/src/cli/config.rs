//! Flat `key = value` configuration with command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{SubsetConfig, SubsetName};
use crate::error::{Error, Result};
use crate::models::ModelKind;
use crate::predict::BBB_EVAL_DRAWS;
use crate::trainers::TrainConfig;

/// Environment variable naming the default C-MAPSS directory.
pub const DATA_DIR_ENV: &str = "RULBNN_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainerKind {
    Bp,
    Bbb,
    Svgd,
}

impl TrainerKind {
    pub const ALL: [TrainerKind; 3] = [TrainerKind::Bp, TrainerKind::Bbb, TrainerKind::Svgd];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainerKind::Bp => "bp",
            TrainerKind::Bbb => "bbb",
            TrainerKind::Svgd => "svgd",
        }
    }

    pub fn is_bayesian(self) -> bool {
        self != TrainerKind::Bp
    }
}

impl fmt::Display for TrainerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bp" => Ok(TrainerKind::Bp),
            "bbb" => Ok(TrainerKind::Bbb),
            "svgd" => Ok(TrainerKind::Svgd),
            _ => Err(Error::Config(format!("unknown trainer {s:?} (expected bp, bbb or svgd)"))),
        }
    }
}

/// Seeds as `a..b` (inclusive) or a comma-separated list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("invalid seed list {s:?}"));
    let s = s.trim();
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| t.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    Ok(seeds)
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

/// Everything one `run` needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub subset: SubsetName,
    pub model: ModelKind,
    pub trainer: TrainerKind,
    pub seeds: Vec<u64>,
    pub data_dir: PathBuf,
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub cache_dir: Option<PathBuf>,
    /// Overrides the subset's reference window length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    pub train: TrainConfig,
    /// Late-prediction correction factor.
    pub correction_k: f64,
    /// Surrogate draws used to evaluate Bayes by Backprop.
    pub eval_draws: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            subset: SubsetName::FD001,
            model: ModelKind::Dense3,
            trainer: TrainerKind::Svgd,
            seeds: (0..10).collect(),
            data_dir: std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from),
            out_dir: PathBuf::from("out"),
            cache_dir: None,
            window: None,
            train: TrainConfig::default(),
            correction_k: 1.0,
            eval_draws: BBB_EVAL_DRAWS,
        }
    }
}

impl RunConfig {
    /// Set one key. Unknown keys are configuration errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key.trim() {
            "subset" => self.subset = v.parse()?,
            "model" => self.model = v.parse()?,
            "trainer" => self.trainer = v.parse()?,
            "seeds" => self.seeds = parse_seeds(v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "cache_dir" => self.cache_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "window" => self.window = Some(parse_num(key, v)?),
            "correction_k" => self.correction_k = parse_num(key, v)?,
            "eval_draws" => self.eval_draws = parse_num(key, v)?,
            "epochs" => t.epochs = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "learning_rate" => t.learning_rate = parse_num(key, v)?,
            "decay_epoch" => t.decay_epoch = parse_num(key, v)?,
            "decay_factor" => t.decay_factor = parse_num(key, v)?,
            "huber_delta" => t.huber_delta = parse_num(key, v)?,
            "mc_samples" => t.mc_samples = parse_num(key, v)?,
            "particles" => t.particles = parse_num(key, v)?,
            "prior_std" => t.prior_std = parse_num(key, v)?,
            "dropout" => t.dropout = parse_num(key, v)?,
            "surrogate_rho" => t.surrogate_rho = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.apply(k, v)?;
        }
        Ok(())
    }

    pub fn subset_config(&self) -> SubsetConfig {
        let mut c = SubsetConfig::reference(self.subset);
        if let Some(w) = self.window {
            c.window = w;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.window == Some(0) {
            return Err(Error::Config("window must be positive".into()));
        }
        if !(self.correction_k > 0.0) {
            return Err(Error::Config(format!("correction_k must be > 0, got {}", self.correction_k)));
        }
        if self.eval_draws == 0 {
            return Err(Error::Config("eval_draws must be positive".into()));
        }
        self.train.validate()
    }
}

/// Parsed `key = value` lines; `#` starts a comment.
pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_pairs(&text, path)
}

pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected key = value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// A cross-product of subsets, models and trainers over one base configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub base: RunConfig,
    pub subsets: Vec<SubsetName>,
    pub models: Vec<ModelKind>,
    pub trainers: Vec<TrainerKind>,
}

fn parse_list<T: FromStr<Err = Error>>(key: &str, v: &str) -> Result<Vec<T>> {
    let items: Vec<T> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Usage(format!("sweep list {key:?} is empty")));
    }
    Ok(items)
}

impl SweepConfig {
    /// Build from `key = value` pairs. `subsets`, `models` and `trainers` are
    /// comma lists defaulting to everything; other keys go to the base run.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = SweepConfig {
            base: RunConfig::default(),
            subsets: SubsetName::ALL.to_vec(),
            models: vec![ModelKind::Dense3, ModelKind::Conv2Pool2],
            trainers: TrainerKind::ALL.to_vec(),
        };
        for (k, v) in pairs {
            match k.as_str() {
                "subsets" => cfg.subsets = parse_list(k, v)?,
                "models" => cfg.models = parse_list(k, v)?,
                "trainers" => cfg.trainers = parse_list(k, v)?,
                _ => cfg.base.apply(k, v)?,
            }
        }
        Ok(cfg)
    }

    pub fn cells(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &subset in &self.subsets {
            for &model in &self.models {
                for &trainer in &self.trainers {
                    let mut c = self.base.clone();
                    c.subset = subset;
                    c.model = model;
                    c.trainer = trainer;
                    c.out_dir = self.base.out_dir.join(format!("{subset}_{model}_{trainer}"));
                    out.push(c);
                }
            }
        }
        out
    }
}
