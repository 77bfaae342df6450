use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rulbnn::cli::{
    build_report, read_report, render_table, run, sweep_with, Distributions, RunConfig, SeedRecord,
    SweepConfig, TrainerKind, REPORT_FILE, SWEEP_FILE,
};
use rulbnn::data::synthetic::{write_subset, SyntheticSpec};
use rulbnn::data::SubsetName;
use rulbnn::metrics::MetricTriple;
use rulbnn::models::ModelKind;
use rulbnn::cli::RunReport;
use rulbnn::Error;

const FAST: [&str; 7] = [
    "epochs=2",
    "decay_epoch=1",
    "batch_size=128",
    "particles=3",
    "mc_samples=2",
    "eval_draws=4",
    "seeds=0..1",
];

fn data_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_subset(dir.path(), SubsetName::FD001, &SyntheticSpec::default()).unwrap();
    dir
}

fn config(data: &Path, out: &Path, trainer: TrainerKind) -> RunConfig {
    let mut c = RunConfig {
        data_dir: data.to_path_buf(),
        out_dir: out.to_path_buf(),
        trainer,
        ..RunConfig::default()
    };
    c.apply_overrides(&FAST).unwrap();
    c
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rulbnn"));
    c.arg("--quiet");
    c
}

fn run_bin(args: &[&str]) -> (i32, String, String) {
    let out = bin().args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn run_writes_every_artefact() {
    let data = data_dir();
    for trainer in TrainerKind::ALL {
        let out = tempfile::tempdir().unwrap();
        let cfg = config(data.path(), out.path(), trainer);
        let report = run(&cfg).unwrap();
        assert_eq!(report.seeds.len(), 2);
        assert_eq!(report.aggregate.mean_corrected.is_some(), trainer.is_bayesian());
        assert_eq!(report.aggregate.p_late.is_some(), trainer.is_bayesian());
        let back = read_report(&out.path().join(REPORT_FILE)).unwrap();
        assert_eq!(back.seeds, report.seeds);

        let members = match trainer {
            TrainerKind::Bp => 1,
            TrainerKind::Bbb => 4,
            TrainerKind::Svgd => 3,
        };
        for seed in [0, 1] {
            let table = fs::read_to_string(out.path().join(format!("predictions_seed{seed}.csv"))).unwrap();
            let lines: Vec<&str> = table.lines().collect();
            assert_eq!(lines.len(), report.seeds[0].n_test + 1);
            assert_eq!(lines[0].split(',').count(), 5 + members);
            assert!(out.path().join(format!("posterior_seed{seed}.json")).exists());
        }
        assert!(out.path().join("timings.jsonl").exists());
    }
}

#[test]
fn reports_are_deterministic_and_cache_independent() {
    let data = data_dir();
    let cache = tempfile::tempdir().unwrap();
    let outs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (k, out) in outs.iter().enumerate() {
        let mut cfg = config(data.path(), out.path(), TrainerKind::Svgd);
        if k > 0 {
            cfg.cache_dir = Some(cache.path().to_path_buf());
        }
        run(&cfg).unwrap();
    }
    let bytes: Vec<Vec<u8>> = outs
        .iter()
        .map(|o| fs::read(o.path().join(REPORT_FILE)).unwrap())
        .collect();
    assert_eq!(bytes[0], bytes[1]);
    assert_eq!(bytes[0], bytes[2]);
    let table = |o: &tempfile::TempDir| fs::read(o.path().join("predictions_seed1.csv")).unwrap();
    assert_eq!(table(&outs[0]), table(&outs[2]));
}

#[test]
fn binary_run_and_emit_dist() {
    let data = data_dir();
    let out = tempfile::tempdir().unwrap();
    let cfg_file = out.path().join("run.cfg");
    let mut text = String::from("# short smoke run\ntrainer = svgd\n");
    for kv in FAST {
        text.push_str(&kv.replace('=', " = "));
        text.push('\n');
    }
    fs::write(&cfg_file, text).unwrap();
    let run_dir = out.path().join("run");
    let (code, stdout, stderr) = run_bin(&[
        "run",
        "--config",
        cfg_file.to_str().unwrap(),
        "--data-dir",
        data.path().to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--seeds",
        "3",
        "--set",
        "particles=5",
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("RMSE*"), "{stdout}");
    let report = read_report(&run_dir.join(REPORT_FILE)).unwrap();
    assert_eq!(report.aggregate.config.seeds, vec![3]);
    assert_eq!(report.aggregate.config.train.particles, 5);

    let dist_file = out.path().join("dist.json");
    let (code, _, stderr) = run_bin(&[
        "emit-dist",
        "--run",
        run_dir.join(REPORT_FILE).to_str().unwrap(),
        "--weight-index",
        "17",
        "--sample-index",
        "2",
        "--out",
        dist_file.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{stderr}");
    let d: Distributions = serde_json::from_str(&fs::read_to_string(&dist_file).unwrap()).unwrap();
    assert_eq!(d.weight_values.len(), 5);
    assert_eq!(d.predictions.len(), 5);
    assert_eq!(d.seed, 3);
    assert!(!d.point_estimate);
    assert_eq!(d.prior.unwrap().std, 0.1);

    // The emitted predictions are the members of the prediction table.
    let table = fs::read_to_string(run_dir.join("predictions_seed3.csv")).unwrap();
    let row: Vec<f64> = table.lines().nth(3).unwrap().split(',').skip(5).map(|v| v.parse().unwrap()).collect();
    assert_eq!(row, d.predictions);

    let (code, _, _) = run_bin(&[
        "emit-dist",
        "--run",
        run_dir.join(REPORT_FILE).to_str().unwrap(),
        "--weight-index",
        "99999999",
        "--sample-index",
        "0",
    ]);
    assert_eq!(code, 1);
}

#[test]
fn emit_dist_cardinalities_for_point_and_surrogate() {
    let data = data_dir();
    for (trainer, n, point) in [(TrainerKind::Bp, 1, true), (TrainerKind::Bbb, 4, false)] {
        let out = tempfile::tempdir().unwrap();
        run(&config(data.path(), out.path(), trainer)).unwrap();
        let d = rulbnn::cli::emit_distributions(&out.path().join(REPORT_FILE), Some(1), 0, 0, None).unwrap();
        assert_eq!(d.weight_values.len(), n);
        assert_eq!(d.predictions.len(), n);
        assert_eq!(d.point_estimate, point);
        assert_eq!(d.prior.is_none(), point);
        assert_eq!(d.weight_name, "dense1.weight[0]");
        let err = rulbnn::cli::emit_distributions(&out.path().join(REPORT_FILE), Some(7), 0, 0, None).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}

#[test]
fn exit_codes() {
    let data = data_dir();
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let d = data.path().to_str().unwrap();

    let (code, _, _) = run_bin(&["run", "--data-dir", d, "--out", o, "--set", "nonsense=1"]);
    assert_eq!(code, 1);
    let (code, _, _) = run_bin(&["run", "--data-dir", d, "--out", o, "--trainer", "sgd"]);
    assert_eq!(code, 1);
    let (code, _, _) = run_bin(&["run", "--no-such-flag"]);
    assert_eq!(code, 1);
    let (code, _, _) = run_bin(&["run", "--data-dir", "/nonexistent/cmapss", "--out", o]);
    assert_eq!(code, 2);

    let mut args = vec!["run", "--data-dir", d, "--out", o, "--trainer", "bp"];
    for kv in FAST {
        args.extend(["--set", kv]);
    }
    // An absurd step size drives the weights, and then the loss, past f64::MAX.
    args.extend(["--set", "huber_delta=1e308", "--set", "learning_rate=1e300"]);
    let (code, _, stderr) = run_bin(&args);
    assert_eq!(code, 3, "{stderr}");
    let (code, stdout, _) = run_bin(&["--help"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("emit-dist"));
}

fn fake_report(cfg: &RunConfig) -> RunReport {
    let m = MetricTriple {
        rmse: 13.0,
        mae: 9.0,
        score: 300.0,
    };
    let seed = SeedRecord {
        record: "seed".into(),
        seed: 0,
        n_train: 1,
        n_test: 1,
        final_train_loss: 1.0,
        metrics: m,
        p_late: cfg.trainer.is_bayesian().then_some(0.4),
        corrected: cfg.trainer.is_bayesian().then_some(m),
    };
    build_report(cfg, vec![seed]).unwrap()
}

#[test]
fn sweep_isolates_failing_cells() {
    let cfg = SweepConfig::from_pairs(&[]).unwrap();
    assert_eq!(cfg.cells().len(), 24);
    let cells = sweep_with(&cfg, |c| {
        if c.subset == SubsetName::FD003 && c.model == ModelKind::Conv2Pool2 && c.trainer == TrainerKind::Bbb {
            Err(Error::Data("injected failure".into()))
        } else {
            Ok(fake_report(c))
        }
    })
    .unwrap();
    assert_eq!(cells.len(), 24);
    assert_eq!(cells.iter().filter(|c| c.is_ok()).count(), 23);
    let bad = cells.iter().find(|c| !c.is_ok()).unwrap();
    assert!(bad.error.as_deref().unwrap().contains("injected"));
    let table = render_table(&cfg, &cells);
    assert!(table.contains("error"));
    assert!(table.contains("13.00 ± 0.00"));
    assert_eq!(table.lines().count(), 1 + 2 * 3 * 6);
}

#[test]
fn binary_sweep_records_failures_and_rejects_empty_lists() {
    let data = data_dir();
    let out = tempfile::tempdir().unwrap();
    let cfg_file = out.path().join("sweep.cfg");
    let mut text = format!(
        "subsets = FD001, FD002\nmodels = d3\ntrainers = bp, svgd\ndata_dir = {}\n",
        data.path().display()
    );
    for kv in FAST {
        text.push_str(kv);
        text.push('\n');
    }
    fs::write(&cfg_file, text.as_bytes()).unwrap();
    let base = out.path().join("sweep");
    let (code, stdout, stderr) = run_bin(&[
        "sweep",
        "--config",
        cfg_file.to_str().unwrap(),
        "--out",
        base.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("FD002"));
    let lines: Vec<rulbnn::cli::CellRecord> = fs::read_to_string(base.join(SWEEP_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    // FD002 files were never written.
    for c in &lines {
        assert_eq!(c.is_ok(), c.subset == SubsetName::FD001, "{c:?}");
    }
    let cell: PathBuf = base.join("FD001_d3_svgd").join(REPORT_FILE);
    assert!(cell.exists());

    fs::write(&cfg_file, "models = \n").unwrap();
    let (code, _, stderr) = run_bin(&["sweep", "--config", cfg_file.to_str().unwrap()]);
    assert_eq!(code, 1, "{stderr}");
}
