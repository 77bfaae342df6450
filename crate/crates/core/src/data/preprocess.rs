//! Feature selection, min-max normalisation, windowing and target rectification.

use serde::{Deserialize, Serialize};

use super::cmapss::{RawTrajectory, SubsetName, N_SENSORS, N_SETTINGS};
use crate::error::{Error, Result};

/// Piece-wise linear RUL ceiling.
pub const R_EARLY: f64 = 125.0;

/// 1-based sensor indices kept for the single-condition subsets.
pub const SELECTED_SENSORS: [usize; 14] = [2, 3, 4, 7, 8, 9, 11, 12, 13, 14, 15, 17, 20, 21];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSet {
    /// The 14 informative sensors, no operational settings.
    Sensors14,
    /// Operational settings 1-3 followed by sensors 1-21.
    All24,
}

impl FeatureSet {
    pub fn len(self) -> usize {
        match self {
            FeatureSet::Sensors14 => SELECTED_SENSORS.len(),
            FeatureSet::All24 => N_SETTINGS + N_SENSORS,
        }
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn column_names(self) -> Vec<String> {
        match self {
            FeatureSet::Sensors14 => SELECTED_SENSORS.iter().map(|s| format!("s{s}")).collect(),
            FeatureSet::All24 => (1..=N_SETTINGS)
                .map(|i| format!("os{i}"))
                .chain((1..=N_SENSORS).map(|i| format!("s{i}")))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetConfig {
    pub name: SubsetName,
    pub window: usize,
    pub features: FeatureSet,
    pub r_early: f64,
}

impl SubsetConfig {
    /// Reference preprocessing constants for a subset.
    pub fn reference(name: SubsetName) -> Self {
        let (window, features) = match name {
            SubsetName::FD001 | SubsetName::FD003 => (30, FeatureSet::Sensors14),
            SubsetName::FD002 => (20, FeatureSet::All24),
            SubsetName::FD004 => (15, FeatureSet::All24),
        };
        SubsetConfig {
            name,
            window,
            features,
            r_early: R_EARLY,
        }
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }
}

/// Row-major `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows `start..start + len` as one contiguous slice.
    pub fn rows_slice(&self, start: usize, len: usize) -> &[f64] {
        &self.data[start * self.cols..(start + len) * self.cols]
    }
}

pub fn select_features(traj: &RawTrajectory, features: FeatureSet) -> FeatureMatrix {
    let cols = features.len();
    let mut data = Vec::with_capacity(traj.len() * cols);
    for r in &traj.rows {
        match features {
            FeatureSet::Sensors14 => data.extend(SELECTED_SENSORS.iter().map(|&s| r.sensors[s - 1])),
            FeatureSet::All24 => {
                data.extend_from_slice(&r.settings);
                data.extend_from_slice(&r.sensors);
            }
        }
    }
    FeatureMatrix {
        rows: traj.len(),
        cols,
        data,
    }
}

/// Per-feature extrema of the training trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn fit(matrices: &[FeatureMatrix]) -> Result<Self> {
        let cols = matrices
            .first()
            .map(|m| m.cols)
            .ok_or_else(|| Error::Data("cannot fit normalisation on zero trajectories".into()))?;
        let mut min = vec![f64::INFINITY; cols];
        let mut max = vec![f64::NEG_INFINITY; cols];
        for m in matrices {
            if m.cols != cols {
                return Err(Error::Data(format!("feature count {} != {}", m.cols, cols)));
            }
            for row in m.data.chunks(cols) {
                for j in 0..cols {
                    min[j] = min[j].min(row[j]);
                    max[j] = max[j].max(row[j]);
                }
            }
        }
        if min.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("cannot fit normalisation on empty trajectories".into()));
        }
        for j in 0..cols {
            if max[j] == min[j] {
                log::warn!("feature {j} is constant ({}) in training data; normalised to 0", min[j]);
            }
        }
        Ok(NormStats { min, max })
    }

    pub fn len(&self) -> usize {
        self.min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_empty()
    }

    /// Map to `[-1, 1]` over the fitted range; values outside it are not clipped.
    pub fn normalize_value(&self, j: usize, x: f64) -> f64 {
        let span = self.max[j] - self.min[j];
        if span == 0.0 {
            0.0
        } else {
            2.0 * (x - self.min[j]) / span - 1.0
        }
    }

    pub fn denormalize_value(&self, j: usize, z: f64) -> f64 {
        let span = self.max[j] - self.min[j];
        if span == 0.0 {
            self.min[j]
        } else {
            (z + 1.0) * span / 2.0 + self.min[j]
        }
    }

    pub fn apply(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.map(m, Self::normalize_value)
    }

    pub fn invert(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.map(m, Self::denormalize_value)
    }

    fn map(&self, m: &FeatureMatrix, f: fn(&Self, usize, f64) -> f64) -> Result<FeatureMatrix> {
        if m.cols != self.len() {
            return Err(Error::Data(format!(
                "matrix has {} features, normaliser was fitted on {}",
                m.cols,
                self.len()
            )));
        }
        let data = m
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(self, i % m.cols, x))
            .collect();
        Ok(FeatureMatrix {
            rows: m.rows,
            cols: m.cols,
            data,
        })
    }
}

/// Cap a RUL at `r_early`.
pub fn rectify(rul: f64, r_early: f64) -> Result<f64> {
    if !(rul >= 0.0) {
        return Err(Error::Data(format!("RUL must be non-negative, got {rul}")));
    }
    Ok(rul.min(r_early))
}

/// One window: rows `start..start + T` of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowRef {
    pub start: usize,
    pub target: f64,
}

/// All `L - T + 1` windows of a run-to-failure trajectory of length `L`.
///
/// The window ending at 1-based row `t` is labelled with `rectify(L - t)`.
/// Trajectories shorter than `T` yield nothing.
pub fn window_train(rows: usize, window: usize, r_early: f64) -> Vec<WindowRef> {
    if rows < window || window == 0 {
        return Vec::new();
    }
    (0..=rows - window)
        .map(|start| {
            let end = start + window; // 1-based index of the last row
            WindowRef {
                start,
                target: ((rows - end) as f64).min(r_early),
            }
        })
        .collect()
}

/// The last `T` rows of a test trajectory, labelled with the rectified true RUL.
pub fn window_test(rows: usize, window: usize, true_rul: f64, r_early: f64) -> Result<Option<WindowRef>> {
    let target = rectify(true_rul, r_early)?;
    if rows < window || window == 0 {
        return Ok(None);
    }
    Ok(Some(WindowRef {
        start: rows - window,
        target,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::cmapss::RawRow;
    use proptest::prelude::*;

    fn traj(len: usize) -> RawTrajectory {
        RawTrajectory {
            unit_id: 1,
            rows: (0..len)
                .map(|i| RawRow {
                    cycle: i as u32 + 1,
                    settings: [0.1, 0.2, 0.3],
                    sensors: std::array::from_fn(|k| (k + 1) as f64 * 100.0 + i as f64),
                })
                .collect(),
        }
    }

    #[test]
    fn feature_selection_widths_and_order() {
        let t = traj(3);
        let m = select_features(&t, FeatureSet::Sensors14);
        assert_eq!(m.cols, 14);
        assert_eq!(m.row(0)[0], 200.0); // sensor 2
        assert_eq!(m.row(0)[13], 2100.0); // sensor 21
        let m = select_features(&t, FeatureSet::All24);
        assert_eq!(m.cols, 24);
        assert_eq!(&m.row(1)[..4], &[0.1, 0.2, 0.3, 101.0]);
        assert_eq!(FeatureSet::All24.column_names()[3], "s1");
    }

    #[test]
    fn reference_configs() {
        let c = SubsetConfig::reference(SubsetName::FD002);
        assert_eq!((c.window, c.n_features()), (20, 24));
        let c = SubsetConfig::reference(SubsetName::FD001);
        assert_eq!((c.window, c.n_features()), (30, 14));
        assert_eq!(SubsetConfig::reference(SubsetName::FD004).window, 15);
    }

    #[test]
    fn normalisation_endpoints() {
        let m = FeatureMatrix {
            rows: 3,
            cols: 2,
            data: vec![0.0, 5.0, 10.0, 5.0, 5.0, 5.0],
        };
        let s = NormStats::fit(std::slice::from_ref(&m)).unwrap();
        let n = s.apply(&m).unwrap();
        assert_eq!(n.data, vec![-1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let out = FeatureMatrix {
            rows: 1,
            cols: 2,
            data: vec![20.0, 7.0],
        };
        assert_eq!(s.apply(&out).unwrap().data, vec![3.0, 0.0]);
    }

    #[test]
    fn rectify_cases() {
        assert_eq!(rectify(150.0, R_EARLY).unwrap(), 125.0);
        assert_eq!(rectify(125.0, R_EARLY).unwrap(), 125.0);
        assert_eq!(rectify(0.0, R_EARLY).unwrap(), 0.0);
        assert!(rectify(-1.0, R_EARLY).is_err());
    }

    #[test]
    fn window_counts_and_targets() {
        let w = window_train(192, 30, R_EARLY);
        assert_eq!(w.len(), 163);
        assert_eq!(w.last().unwrap().target, 0.0);
        assert_eq!(w[0].target, 125.0);
        assert_eq!(w[w.len() - 2].target, 1.0);
        assert!(window_train(29, 30, R_EARLY).is_empty());
        assert_eq!(window_train(30, 30, R_EARLY).len(), 1);
    }

    #[test]
    fn test_window_cases() {
        let w = window_test(30, 30, 150.0, R_EARLY).unwrap().unwrap();
        assert_eq!((w.start, w.target), (0, 125.0));
        assert!(window_test(10, 30, 5.0, R_EARLY).unwrap().is_none());
        assert_eq!(window_test(40, 30, 7.0, R_EARLY).unwrap().unwrap().start, 10);
    }

    proptest! {
        #[test]
        fn normalise_roundtrip(data in prop::collection::vec(-1e4f64..1e4, 12..60)) {
            let rows = data.len() / 3;
            let m = FeatureMatrix { rows, cols: 3, data: data[..rows * 3].to_vec() };
            let s = NormStats::fit(std::slice::from_ref(&m)).unwrap();
            let n = s.apply(&m).unwrap();
            prop_assert!(n.data.iter().all(|v| (-1.0..=1.0).contains(v)));
            let back = s.invert(&n).unwrap();
            for (j, (a, b)) in back.data.iter().zip(&m.data).enumerate() {
                let k = j % 3;
                if s.max[k] != s.min[k] {
                    let scale = s.max[k].abs().max(s.min[k].abs()).max(1.0);
                    prop_assert!((a - b).abs() <= 1e-12 * scale);
                }
            }
        }

        #[test]
        fn windows_overlap_and_targets_bounded(len in 1usize..300, window in 1usize..40) {
            let w = window_train(len, window, R_EARLY);
            prop_assert_eq!(w.len(), if len >= window { len - window + 1 } else { 0 });
            for pair in w.windows(2) {
                prop_assert_eq!(pair[1].start, pair[0].start + 1);
            }
            prop_assert!(w.iter().all(|x| (0.0..=R_EARLY).contains(&x.target)));
        }
    }
}
