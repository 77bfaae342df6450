//! Binary dump of a [`PreparedData`] so repeated runs skip parsing and windowing.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "RULBNNWD" | u32 format version | [u8; 32] SHA-256 of the source files
//! u32 subset index | u32 T | u32 feature-set tag | f64 R_early
//! u32 F | F x f64 min | F x f64 max
//! train dataset | test dataset
//! ```
//!
//! A dataset is `u32 n_traj`, then per trajectory `u32 unit, u32 L, L x u32
//! cycles, L*F x f64 features`, then `u32 n_samples` and per sample `u32 traj,
//! u32 start, f64 target`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::cmapss::SubsetName;
use super::dataset::{PreparedData, StoredTrajectory, WindowedDataset};
use super::preprocess::{FeatureMatrix, FeatureSet, NormStats, SubsetConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RULBNNWD";
pub const FORMAT_VERSION: u32 = 1;

/// SHA-256 over the raw bytes of a subset's three source files.
pub fn source_digest(dir: &Path, name: SubsetName) -> Result<[u8; 32]> {
    let mut h = Sha256::new();
    for p in name.file_paths(dir) {
        let bytes = fs::read(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("cache sizes fit in u32"));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("truncated dataset cache".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn write_dataset(w: &mut Writer, ds: &WindowedDataset) {
    w.len(ds.trajectories().len());
    for t in ds.trajectories() {
        w.u32(t.unit_id);
        w.len(t.cycles.len());
        for &c in &t.cycles {
            w.u32(c);
        }
        w.f64s(&t.features.data);
    }
    w.len(ds.samples().len());
    for (s, &y) in ds.samples().iter().zip(ds.target_values()) {
        w.u32(s.trajectory);
        w.u32(s.start);
        w.f64(y);
    }
}

fn read_dataset(r: &mut Reader, window: usize, features: usize) -> Result<WindowedDataset> {
    let mut ds = WindowedDataset::empty(window, features);
    let n_traj = r.usize()?;
    for _ in 0..n_traj {
        let unit_id = r.u32()?;
        let rows = r.usize()?;
        let cycles = (0..rows).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let data = r.f64s(rows * features)?;
        ds.push_trajectory(StoredTrajectory {
            unit_id,
            cycles,
            features: FeatureMatrix {
                rows,
                cols: features,
                data,
            },
        });
    }
    let n = r.usize()?;
    for _ in 0..n {
        let traj = r.u32()?;
        let start = r.usize()?;
        let target = r.f64()?;
        let ok = ds
            .trajectories()
            .get(traj as usize)
            .is_some_and(|t| start + window <= t.features.rows);
        if !ok {
            return Err(Error::Data("dataset cache references a missing window".into()));
        }
        ds.push_sample(traj, start, target);
    }
    Ok(ds)
}

fn subset_tag(n: SubsetName) -> u32 {
    SubsetName::ALL.iter().position(|&x| x == n).unwrap() as u32
}

fn feature_tag(f: FeatureSet) -> u32 {
    match f {
        FeatureSet::Sensors14 => 0,
        FeatureSet::All24 => 1,
    }
}

pub fn encode(data: &PreparedData, digest: &[u8; 32]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.0.extend_from_slice(digest);
    w.u32(subset_tag(data.config.name));
    w.len(data.config.window);
    w.u32(feature_tag(data.config.features));
    w.f64(data.config.r_early);
    w.len(data.stats.len());
    w.f64s(&data.stats.min);
    w.f64s(&data.stats.max);
    write_dataset(&mut w, &data.train);
    write_dataset(&mut w, &data.test);
    w.0
}

/// Decode a cache buffer; `Ok(None)` when it was built from other inputs or settings.
pub fn decode(buf: &[u8], config: &SubsetConfig, digest: &[u8; 32]) -> Result<Option<PreparedData>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Data("not a dataset cache file".into()));
    }
    if r.u32()? != FORMAT_VERSION {
        return Ok(None);
    }
    let stored_digest = r.take(32)?;
    let same = stored_digest == digest
        && r.u32()? == subset_tag(config.name)
        && r.usize()? == config.window
        && r.u32()? == feature_tag(config.features)
        && r.f64()?.to_bits() == config.r_early.to_bits();
    if !same {
        return Ok(None);
    }
    let f = r.usize()?;
    if f != config.n_features() {
        return Err(Error::Data("dataset cache feature count mismatch".into()));
    }
    let stats = NormStats {
        min: r.f64s(f)?,
        max: r.f64s(f)?,
    };
    let train = read_dataset(&mut r, config.window, f)?;
    let test = read_dataset(&mut r, config.window, f)?;
    if r.pos != buf.len() {
        return Err(Error::Data("trailing bytes in dataset cache".into()));
    }
    Ok(Some(PreparedData {
        config: *config,
        stats,
        train,
        test,
    }))
}

pub fn write(path: &Path, data: &PreparedData, digest: &[u8; 32]) -> Result<()> {
    let bytes = encode(data, digest);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn read(path: &Path, config: &SubsetConfig, digest: &[u8; 32]) -> Result<Option<PreparedData>> {
    let mut buf = Vec::new();
    match fs::File::open(path) {
        Ok(mut f) => f
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(format!("opening {}", path.display()), e)),
    };
    decode(&buf, config, digest)
}
