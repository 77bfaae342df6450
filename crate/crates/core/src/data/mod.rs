//! C-MAPSS ingestion and preprocessing.

pub mod cache;
mod cmapss;
mod dataset;
mod preprocess;
pub mod synthetic;

use std::path::Path;

pub use cmapss::{
    load_subset, parse_rul, parse_trajectories, CmapssSubset, RawRow, RawTrajectory, SubsetName,
    N_SENSORS, N_SETTINGS, ROW_WIDTH,
};
pub use dataset::{
    prepare, PreparedData, SampleRef, SampleSource, Selection, StoredTrajectory, WindowedDataset,
};
pub use preprocess::{
    rectify, select_features, window_test, window_train, FeatureMatrix, FeatureSet, NormStats,
    SubsetConfig, WindowRef, R_EARLY, SELECTED_SENSORS,
};

use crate::error::{Error, Result};

/// Load and preprocess a subset, going through the on-disk cache in `cache_dir`
/// when one is given. A stale or foreign cache file is rebuilt.
pub fn load_prepared(data_dir: &Path, config: &SubsetConfig, cache_dir: Option<&Path>) -> Result<PreparedData> {
    let Some(cache_dir) = cache_dir else {
        return prepare(&load_subset(data_dir, config.name)?, config);
    };
    let digest = cache::source_digest(data_dir, config.name)?;
    let path = cache_dir.join(format!(
        "{}_T{}_F{}.rulwin",
        config.name,
        config.window,
        config.n_features()
    ));
    match cache::read(&path, config, &digest) {
        Ok(Some(d)) => {
            log::info!("loaded preprocessed {} from {}", config.name, path.display());
            return Ok(d);
        }
        Ok(None) => {}
        Err(e) => log::warn!("ignoring unreadable cache {}: {e}", path.display()),
    }
    let prepared = prepare(&load_subset(data_dir, config.name)?, config)?;
    std::fs::create_dir_all(cache_dir)
        .map_err(|e| Error::io(format!("creating {}", cache_dir.display()), e))?;
    cache::write(&path, &prepared, &digest)?;
    Ok(prepared)
}
