//! Posterior-predictive summaries and the late-prediction correction
//! `mu* = mu - p_late * k * sigma`.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamVector;
use crate::data::{SampleSource, WindowedDataset};
use crate::error::{Error, Result};
use crate::models::{predict, Architecture, Dropout};
use crate::rng::StreamRng;
use crate::trainers::{GaussianSurrogate, ParticleSet};

/// Draws taken from a Bayes-by-Backprop surrogate at evaluation time.
pub const BBB_EVAL_DRAWS: usize = 100;

/// Samples per forward pass when evaluating large sets.
const EVAL_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorSource {
    Svgd,
    Bbb,
    Point,
}

/// Weight samples standing in for the posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorEnsemble {
    source: PosteriorSource,
    members: Vec<ParamVector>,
}

impl PosteriorEnsemble {
    pub fn point(params: ParamVector) -> Self {
        PosteriorEnsemble {
            source: PosteriorSource::Point,
            members: vec![params],
        }
    }

    pub fn from_particles(set: ParticleSet) -> Self {
        PosteriorEnsemble {
            source: PosteriorSource::Svgd,
            members: set.into_particles(),
        }
    }

    pub fn from_surrogate<R: Rng + ?Sized>(q: &GaussianSurrogate, draws: usize, rng: &mut R) -> Result<Self> {
        if draws == 0 {
            return Err(Error::Config("need at least one surrogate draw".into()));
        }
        Ok(PosteriorEnsemble {
            source: PosteriorSource::Bbb,
            members: (0..draws).map(|_| q.sample(rng)).collect(),
        })
    }

    pub fn source(&self) -> PosteriorSource {
        self.source
    }

    pub fn members(&self) -> &[ParamVector] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Member-major predictions `[member][sample]` with dropout inactive.
    pub fn predict_all<A: Architecture>(&self, arch: &A, data: &dyn SampleSource) -> Result<Vec<Vec<f64>>> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let batches: Vec<_> = idx.chunks(EVAL_CHUNK).map(|c| data.gather(c).0).collect();
        self.members
            .par_iter()
            .map(|w| {
                let mut out = Vec::with_capacity(data.len());
                for x in &batches {
                    out.extend(predict(arch, w, x, None::<&mut Dropout<'_, StreamRng>>)?);
                }
                Ok(out)
            })
            .collect()
    }
}

/// Per-sample ensemble statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSummary {
    /// `[sample][member]`.
    pub members: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Population standard deviation over members.
    pub std: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    // Shifting by the first member keeps identical members at exactly zero spread.
    let x0 = xs[0];
    let n = xs.len() as f64;
    let shift = xs.iter().map(|x| x - x0).sum::<f64>() / n;
    let mean = x0 + shift;
    let var = xs.iter().map(|x| (x - x0 - shift).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl PredictiveSummary {
    /// Summarise member-major predictions.
    pub fn from_members(by_member: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = by_member.first() else {
            return Err(Error::Usage("predictive summary of an empty ensemble".into()));
        };
        let n = first.len();
        if let Some(m) = by_member.iter().find(|m| m.len() != n) {
            return Err(Error::Shape {
                op: "predictive_summary",
                lhs: vec![n],
                rhs: vec![m.len()],
            });
        }
        let members: Vec<Vec<f64>> = (0..n).map(|i| by_member.iter().map(|m| m[i]).collect()).collect();
        let (mean, std) = members.iter().map(|xs| mean_std(xs)).unzip();
        Ok(PredictiveSummary { members, mean, std })
    }

    pub fn evaluate<A: Architecture>(ens: &PosteriorEnsemble, arch: &A, data: &dyn SampleSource) -> Result<Self> {
        Self::from_members(&ens.predict_all(arch, data)?)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatePredictionRate {
    pub p_late: f64,
    pub n: usize,
}

/// Fraction of samples whose predictive mean strictly exceeds the target.
pub fn estimate_p_late(mean: &[f64], targets: &[f64]) -> Result<LatePredictionRate> {
    if mean.is_empty() {
        return Err(Error::Data("p_late needs a non-empty held-out set".into()));
    }
    if mean.len() != targets.len() {
        return Err(Error::Shape {
            op: "estimate_p_late",
            lhs: vec![mean.len()],
            rhs: vec![targets.len()],
        });
    }
    let late = mean.iter().zip(targets).filter(|(m, t)| m > t).count();
    Ok(LatePredictionRate {
        p_late: late as f64 / mean.len() as f64,
        n: mean.len(),
    })
}

/// `mu - p_late * k * sigma` per sample.
pub fn correct(summary: &PredictiveSummary, p_late: f64, k: f64) -> Result<Vec<f64>> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::Config(format!("correction factor k must be > 0, got {k}")));
    }
    if !(0.0..=1.0).contains(&p_late) {
        return Err(Error::Config(format!("p_late must be in [0, 1], got {p_late}")));
    }
    Ok(summary
        .mean
        .iter()
        .zip(&summary.std)
        .map(|(m, s)| m - p_late * k * s)
        .collect())
}

/// Write the per-sample prediction table as CSV.
pub fn write_prediction_table<W: Write>(
    out: &mut W,
    test: &WindowedDataset,
    summary: &PredictiveSummary,
    corrected: &[f64],
) -> Result<()> {
    let io = |e| Error::io("writing prediction table", e);
    let m = summary.members.first().map_or(0, Vec::len);
    let mut header = String::from("unit_id,true_rul,mean,std,corrected_mean");
    for j in 0..m {
        header.push_str(&format!(",member_{j}"));
    }
    writeln!(out, "{header}").map_err(io)?;
    let truth = test.target_values();
    for i in 0..summary.len() {
        let (unit, _) = test.provenance(i);
        let mut line = format!(
            "{unit},{},{},{},{}",
            truth[i], summary.mean[i], summary.std[i], corrected[i]
        );
        for v in &summary.members[i] {
            line.push_str(&format!(",{v}"));
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    Ok(())
}
