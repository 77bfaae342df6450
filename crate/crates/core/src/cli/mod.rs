//! Experiment runner: multi-seed runs, sweeps and distribution dumps.
//!
//! Output files of `run` (all in the output directory):
//!
//! - `report.jsonl`: one `"record": "seed"` line per seed with `metrics`
//!   (`rmse`, `mae`, `score`), and for Bayesian trainers `p_late` and the
//!   `corrected` metrics; then one `"record": "aggregate"` line with the
//!   schema version, the configuration, and the mean and population standard
//!   deviation of every metric across seeds.
//! - `predictions_seed<N>.csv`: per test sample `unit_id, true_rul, mean, std,
//!   corrected_mean, member_0, ...`.
//! - `posterior_seed<N>.json`: the trained particles, surrogate or point estimate.
//! - `timings.jsonl`: wall-clock seconds per phase. Kept apart from the report
//!   so that identical runs produce identical reports.

mod config;
mod emit;
mod run;
mod sweep;

pub use config::{parse_pairs, parse_seeds, read_pairs, RunConfig, SweepConfig, TrainerKind, DATA_DIR_ENV};
pub use emit::{emit_distributions, Distributions, PriorRecord};
pub use run::{
    build_report, network_for, posterior_path, predictions_path, read_report, report_lines, run,
    AggregateRecord, LayoutEntryRecord, PosteriorFile, RunReport, SeedRecord, TimingRecord,
    REPORT_FILE, SCHEMA_VERSION, TIMINGS_FILE,
};
pub use sweep::{render_table, sweep, sweep_with, CellRecord, SWEEP_FILE, TABLE_FILE};
