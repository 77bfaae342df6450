//! Reader for the NASA C-MAPSS text files.
//!
//! Each subset `FD00x` ships three files: `train_FD00x.txt` and `test_FD00x.txt`
//! hold space-separated rows of 26 numbers (unit, cycle, 3 operational settings,
//! 21 sensors); `RUL_FD00x.txt` holds one true RUL per test unit.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROW_WIDTH: usize = 26;
pub const N_SETTINGS: usize = 3;
pub const N_SENSORS: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubsetName {
    FD001,
    FD002,
    FD003,
    FD004,
}

impl SubsetName {
    pub const ALL: [SubsetName; 4] = [
        SubsetName::FD001,
        SubsetName::FD002,
        SubsetName::FD003,
        SubsetName::FD004,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubsetName::FD001 => "FD001",
            SubsetName::FD002 => "FD002",
            SubsetName::FD003 => "FD003",
            SubsetName::FD004 => "FD004",
        }
    }

    /// Published `(training, test)` trajectory counts.
    pub fn trajectory_counts(self) -> (usize, usize) {
        match self {
            SubsetName::FD001 => (100, 100),
            SubsetName::FD002 => (260, 259),
            SubsetName::FD003 => (100, 100),
            SubsetName::FD004 => (249, 248),
        }
    }

    /// Whether the subset runs under a single operating condition.
    pub fn single_condition(self) -> bool {
        matches!(self, SubsetName::FD001 | SubsetName::FD003)
    }

    pub fn file_paths(self, dir: &Path) -> [PathBuf; 3] {
        let n = self.as_str();
        [
            dir.join(format!("train_{n}.txt")),
            dir.join(format!("test_{n}.txt")),
            dir.join(format!("RUL_{n}.txt")),
        ]
    }
}

impl fmt::Display for SubsetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubsetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SubsetName::ALL
            .into_iter()
            .find(|n| n.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown subset '{s}' (expected FD001..FD004)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawRow {
    pub cycle: u32,
    pub settings: [f64; N_SETTINGS],
    pub sensors: [f64; N_SENSORS],
}

/// All recorded cycles of one engine, in cycle order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTrajectory {
    pub unit_id: u32,
    pub rows: Vec<RawRow>,
}

impl RawTrajectory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct CmapssSubset {
    pub name: SubsetName,
    pub train: Vec<RawTrajectory>,
    pub test: Vec<RawTrajectory>,
    /// True RUL after the last recorded cycle of each test trajectory.
    pub test_rul: Vec<f64>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn parse_id(field: &str, what: &str, path: &Path, line: usize) -> Result<u32> {
    let v: f64 = field.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("{what} '{field}' is not a number"),
    })?;
    if v.fract() != 0.0 || v < 1.0 || v > u32::MAX as f64 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{what} '{field}' is not a positive integer"),
        });
    }
    Ok(v as u32)
}

/// Parse a `train_*`/`test_*` file into trajectories, in file order.
pub fn parse_trajectories(text: &str, path: &Path) -> Result<Vec<RawTrajectory>> {
    let mut out: Vec<RawTrajectory> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if fields.len() != ROW_WIDTH {
            return Err(err(format!("expected {ROW_WIDTH} fields, found {}", fields.len())));
        }
        let unit = parse_id(fields[0], "unit id", path, line)?;
        let cycle = parse_id(fields[1], "cycle", path, line)?;
        let mut values = [0.0f64; N_SETTINGS + N_SENSORS];
        for (v, f) in values.iter_mut().zip(&fields[2..]) {
            *v = f
                .parse()
                .map_err(|_| err(format!("field '{f}' is not a number")))?;
            if !v.is_finite() {
                return Err(err(format!("field '{f}' is not finite")));
            }
        }
        let mut settings = [0.0; N_SETTINGS];
        let mut sensors = [0.0; N_SENSORS];
        settings.copy_from_slice(&values[..N_SETTINGS]);
        sensors.copy_from_slice(&values[N_SETTINGS..]);
        let row = RawRow {
            cycle,
            settings,
            sensors,
        };

        match out.last_mut() {
            Some(t) if t.unit_id == unit => {
                let prev = t.rows.last().map(|r| r.cycle).unwrap_or(0);
                if cycle <= prev {
                    return Err(err(format!(
                        "unit {unit}: cycle {cycle} does not increase (previous {prev})"
                    )));
                }
                t.rows.push(row);
            }
            _ => {
                if out.iter().any(|t| t.unit_id == unit) {
                    return Err(err(format!("unit {unit} appears in two separate blocks")));
                }
                if cycle != 1 {
                    return Err(err(format!("unit {unit} starts at cycle {cycle}, expected 1")));
                }
                out.push(RawTrajectory {
                    unit_id: unit,
                    rows: vec![row],
                });
            }
        }
    }
    Ok(out)
}

/// Parse a `RUL_*` file: one non-negative value per line.
pub fn parse_rul(text: &str, path: &Path) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let s = raw.trim();
        if s.is_empty() {
            continue;
        }
        let v: f64 = s.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("RUL '{s}' is not a number"),
        })?;
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("RUL '{s}' must be a finite non-negative number"),
            });
        }
        out.push(v);
    }
    Ok(out)
}

pub fn load_subset(dir: &Path, name: SubsetName) -> Result<CmapssSubset> {
    let [train_path, test_path, rul_path] = name.file_paths(dir);
    let train = parse_trajectories(&read(&train_path)?, &train_path)?;
    let test = parse_trajectories(&read(&test_path)?, &test_path)?;
    let test_rul = parse_rul(&read(&rul_path)?, &rul_path)?;
    if test_rul.len() != test.len() {
        return Err(Error::Data(format!(
            "{}: {} test trajectories but {} RUL values",
            name,
            test.len(),
            test_rul.len()
        )));
    }
    if (train.len(), test.len()) != name.trajectory_counts() {
        log::warn!(
            "{name}: found {}/{} train/test trajectories, the reference release has {:?}",
            train.len(),
            test.len(),
            name.trajectory_counts()
        );
    }
    Ok(CmapssSubset {
        name,
        train,
        test,
        test_rul,
    })
}
