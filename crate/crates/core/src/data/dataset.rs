use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::cmapss::CmapssSubset;
use super::preprocess::{
    select_features, window_test, window_train, FeatureMatrix, NormStats, SubsetConfig,
};

/// Indexed collection of `T x F` samples with scalar targets.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(T, F)` of one sample.
    fn sample_shape(&self) -> (usize, usize);

    /// Stack the requested samples into a `[B, T, F]` tensor with their targets.
    fn gather(&self, indices: &[usize]) -> (Tensor, Vec<f64>);

    fn targets(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.gather(&[i]).1[0])
            .collect()
    }
}

/// A view of some samples of another source, in the given order.
pub struct Selection<'a> {
    inner: &'a dyn SampleSource,
    indices: Vec<usize>,
}

impl<'a> Selection<'a> {
    pub fn new(inner: &'a dyn SampleSource, indices: Vec<usize>) -> Self {
        debug_assert!(indices.iter().all(|&i| i < inner.len()));
        Selection { inner, indices }
    }
}

impl SampleSource for Selection<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn sample_shape(&self) -> (usize, usize) {
        self.inner.sample_shape()
    }

    fn gather(&self, indices: &[usize]) -> (Tensor, Vec<f64>) {
        let mapped: Vec<usize> = indices.iter().map(|&i| self.indices[i]).collect();
        self.inner.gather(&mapped)
    }
}

/// A normalised trajectory kept whole so that overlapping windows share storage.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTrajectory {
    pub unit_id: u32,
    pub cycles: Vec<u32>,
    pub features: FeatureMatrix,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRef {
    pub trajectory: u32,
    pub start: u32,
}

/// Windowed samples with rectified targets and `(unit, end cycle)` provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    window: usize,
    features: usize,
    trajectories: Vec<StoredTrajectory>,
    samples: Vec<SampleRef>,
    targets: Vec<f64>,
}

impl WindowedDataset {
    pub fn empty(window: usize, features: usize) -> Self {
        WindowedDataset {
            window,
            features,
            trajectories: Vec::new(),
            samples: Vec::new(),
            targets: Vec::new(),
        }
    }

    /// Build from standalone `T x F` samples (row-major), one pseudo-unit each.
    pub fn from_samples(window: usize, features: usize, samples: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        let mut ds = Self::empty(window, features);
        for (i, (x, y)) in samples.into_iter().enumerate() {
            if x.len() != window * features {
                return Err(Error::Shape {
                    op: "from_samples",
                    lhs: vec![window, features],
                    rhs: vec![x.len()],
                });
            }
            let t = ds.push_trajectory(StoredTrajectory {
                unit_id: i as u32 + 1,
                cycles: (1..=window as u32).collect(),
                features: FeatureMatrix {
                    rows: window,
                    cols: features,
                    data: x,
                },
            });
            ds.push_sample(t, 0, y);
        }
        Ok(ds)
    }

    pub fn push_trajectory(&mut self, t: StoredTrajectory) -> u32 {
        debug_assert_eq!(t.features.cols, self.features);
        self.trajectories.push(t);
        (self.trajectories.len() - 1) as u32
    }

    pub fn push_sample(&mut self, trajectory: u32, start: usize, target: f64) {
        debug_assert!(start + self.window <= self.trajectories[trajectory as usize].features.rows);
        self.samples.push(SampleRef {
            trajectory,
            start: start as u32,
        });
        self.targets.push(target);
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn n_features(&self) -> usize {
        self.features
    }

    pub fn trajectories(&self) -> &[StoredTrajectory] {
        &self.trajectories
    }

    pub fn samples(&self) -> &[SampleRef] {
        &self.samples
    }

    pub fn target_values(&self) -> &[f64] {
        &self.targets
    }

    /// Row-major `T x F` view of sample `i`.
    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.samples[i];
        self.trajectories[s.trajectory as usize]
            .features
            .rows_slice(s.start as usize, self.window)
    }

    /// `(unit id, cycle of the last row)` of sample `i`.
    pub fn provenance(&self, i: usize) -> (u32, u32) {
        let s = self.samples[i];
        let t = &self.trajectories[s.trajectory as usize];
        (t.unit_id, t.cycles[s.start as usize + self.window - 1])
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).collect()
    }
}

impl SampleSource for WindowedDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn sample_shape(&self) -> (usize, usize) {
        (self.window, self.features)
    }

    fn gather(&self, indices: &[usize]) -> (Tensor, Vec<f64>) {
        let per = self.window * self.features;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            targets.push(self.targets[i]);
        }
        let x = Tensor::new(vec![indices.len(), self.window, self.features], data)
            .expect("gathered batch is non-empty");
        (x, targets)
    }

    fn targets(&self) -> Vec<f64> {
        self.targets.clone()
    }
}

/// Normalised, windowed train and test sets of one subset.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub config: SubsetConfig,
    pub stats: NormStats,
    pub train: WindowedDataset,
    pub test: WindowedDataset,
}

fn stored(unit_id: u32, cycles: Vec<u32>, features: FeatureMatrix) -> StoredTrajectory {
    StoredTrajectory {
        unit_id,
        cycles,
        features,
    }
}

/// Feature selection, normalisation (fitted on the training split only),
/// windowing and target rectification.
pub fn prepare(raw: &CmapssSubset, config: &SubsetConfig) -> Result<PreparedData> {
    let (t, f) = (config.window, config.n_features());
    let train_feats: Vec<FeatureMatrix> = raw
        .train
        .iter()
        .map(|tr| select_features(tr, config.features))
        .collect();
    let stats = NormStats::fit(&train_feats)?;

    let mut train = WindowedDataset::empty(t, f);
    for (tr, m) in raw.train.iter().zip(&train_feats) {
        let windows = window_train(m.rows, t, config.r_early);
        if windows.is_empty() {
            log::warn!("training unit {} has {} < {} cycles; discarded", tr.unit_id, m.rows, t);
            continue;
        }
        let cycles = tr.rows.iter().map(|r| r.cycle).collect();
        let idx = train.push_trajectory(stored(tr.unit_id, cycles, stats.apply(m)?));
        for w in windows {
            train.push_sample(idx, w.start, w.target);
        }
    }

    let mut test = WindowedDataset::empty(t, f);
    for (tr, &rul) in raw.test.iter().zip(&raw.test_rul) {
        let m = select_features(tr, config.features);
        match window_test(m.rows, t, rul, config.r_early)? {
            Some(w) => {
                let cycles = tr.rows.iter().map(|r| r.cycle).collect();
                let idx = test.push_trajectory(stored(tr.unit_id, cycles, stats.apply(&m)?));
                test.push_sample(idx, w.start, w.target);
            }
            None => log::warn!("test unit {} has {} < {} cycles; discarded", tr.unit_id, m.rows, t),
        }
    }
    if train.is_empty() {
        return Err(Error::Data(format!(
            "{}: no training trajectory reaches the window size {t}",
            config.name
        )));
    }
    Ok(PreparedData {
        config: *config,
        stats,
        train,
        test,
    })
}
