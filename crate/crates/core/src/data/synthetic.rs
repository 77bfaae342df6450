//! Small C-MAPSS-format datasets for smoke tests and demos.
//!
//! Each engine degrades along a latent health curve `h = (cycle / life)^2`;
//! informative sensors drift linearly in `h` plus Gaussian noise, while the
//! sensors that are flat in the real single-condition subsets stay constant.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use super::cmapss::{SubsetName, N_SENSORS};
use crate::error::{Error, Result};
use crate::rng::{SeedStreams, Stream};

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub train_units: usize,
    pub test_units: usize,
    pub min_life: usize,
    pub max_life: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_units: 20,
            test_units: 10,
            min_life: 60,
            max_life: 140,
            seed: 0,
        }
    }
}

const FLAT_SENSORS: [usize; 7] = [1, 5, 6, 10, 16, 18, 19];

struct Engine {
    base: [f64; N_SENSORS],
    slope: [f64; N_SENSORS],
}

fn format_row(out: &mut String, unit: usize, cycle: usize, settings: [f64; 3], sensors: &[f64; N_SENSORS]) {
    write!(out, "{unit} {cycle}").unwrap();
    for s in settings {
        write!(out, " {s:.4}").unwrap();
    }
    for s in sensors {
        write!(out, " {s:.4}").unwrap();
    }
    out.push_str(" \n");
}

fn simulate<R: Rng>(
    rng: &mut R,
    engine: &Engine,
    name: SubsetName,
    unit: usize,
    life: usize,
    cycles: usize,
    out: &mut String,
) {
    for c in 1..=cycles {
        let h = (c as f64 / life as f64).powi(2);
        let condition = if name.single_condition() { 0 } else { rng.random_range(0..6) };
        let settings = [
            condition as f64 * 7.0 + 0.001 * rng.sample::<f64, _>(StandardNormal),
            condition as f64 * 0.1 + 0.0001 * rng.sample::<f64, _>(StandardNormal),
            100.0 - condition as f64 * 5.0,
        ];
        let mut sensors = [0.0; N_SENSORS];
        for (k, s) in sensors.iter_mut().enumerate() {
            if name.single_condition() && FLAT_SENSORS.contains(&(k + 1)) {
                *s = engine.base[k];
            } else {
                let noise: f64 = rng.sample(StandardNormal);
                *s = engine.base[k] + condition as f64 * 3.0 + engine.slope[k] * h + 0.3 * noise;
            }
        }
        format_row(out, unit, c, settings, &sensors);
    }
}

/// Write `train_<name>.txt`, `test_<name>.txt` and `RUL_<name>.txt` into `dir`.
pub fn write_subset(dir: &Path, name: SubsetName, spec: &SyntheticSpec) -> Result<()> {
    if spec.min_life < 2 || spec.max_life < spec.min_life {
        return Err(Error::Config("synthetic lives need 2 <= min_life <= max_life".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut rng = SeedStreams::new(spec.seed).stream(Stream::Init);
    let engine = Engine {
        base: std::array::from_fn(|k| 100.0 + 50.0 * k as f64),
        slope: std::array::from_fn(|k| if k % 2 == 0 { 8.0 } else { -6.0 }),
    };

    let mut train = String::new();
    for u in 1..=spec.train_units {
        let life = rng.random_range(spec.min_life..=spec.max_life);
        simulate(&mut rng, &engine, name, u, life, life, &mut train);
    }

    let mut test = String::new();
    let mut rul = String::new();
    for u in 1..=spec.test_units {
        let life = rng.random_range(spec.min_life..=spec.max_life);
        let seen = rng.random_range(life / 2..life).max(1);
        simulate(&mut rng, &engine, name, u, life, seen, &mut test);
        writeln!(rul, "{}", life - seen).unwrap();
    }

    let [tp, sp, rp] = name.file_paths(dir);
    for (p, text) in [(tp, train), (sp, test), (rp, rul)] {
        fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    }
    Ok(())
}
