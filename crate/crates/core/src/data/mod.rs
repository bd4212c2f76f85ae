//! Videos, manifests and M-way K-shot episodes.

mod episode;
mod io;
mod synth;
mod tsn;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub use episode::{sample_episode, Episode, EpisodeSpec, EpisodeVideo};
pub use io::{
    load_embedding_file, read_embedding_file, read_sidecar, save_embedding_file, sidecar_path,
    write_embedding_file, write_sidecar, FORMAT_VERSION, MAGIC,
};
pub use synth::{class_latent, synth_dataset, SynthConfig, LATENT_DIM};
pub use tsn::{tsn_sample, SampleMode};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?}"))),
        }
    }
}

/// Spatial layout of one frame: `rows x cols` patches of `dim` values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
}

impl GridShape {
    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn frame_len(&self) -> usize {
        self.rows * self.cols * self.dim
    }
}

/// One video as a stack of patch grids.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub class_id: u32,
    pub split: Split,
    pub frame_count: usize,
    pub grid: GridShape,
    /// `frame_count * rows * cols * dim` values, frame-major.
    pub payload: Vec<f32>,
}

impl VideoRecord {
    pub fn frame(&self, t: usize) -> &[f32] {
        let len = self.grid.frame_len();
        &self.payload[t * len..(t + 1) * len]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassInfo {
    pub name: String,
    pub split: Split,
}

impl ClassInfo {
    /// Deterministic seed standing in for the class description text.
    pub fn text_seed(&self) -> u64 {
        fnv1a(self.name.as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Records plus the class vocabulary. Splits are assigned per class, so
/// train/val/test class sets are disjoint by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    records: Vec<VideoRecord>,
    classes: BTreeMap<u32, ClassInfo>,
}

impl DatasetManifest {
    pub fn new(records: Vec<VideoRecord>, classes: BTreeMap<u32, ClassInfo>) -> Result<Self> {
        let mut grid: Option<GridShape> = None;
        for (i, r) in records.iter().enumerate() {
            let info = classes.get(&r.class_id).ok_or_else(|| {
                Error::Input(format!("record {i} has unknown class {}", r.class_id))
            })?;
            if info.split != r.split {
                return Err(Error::Input(format!(
                    "record {i} tagged {} but class {} is in {}",
                    r.split, r.class_id, info.split
                )));
            }
            if r.payload.len() != r.frame_count * r.grid.frame_len() {
                return Err(Error::Input(format!("record {i} payload length mismatch")));
            }
            match grid {
                None => grid = Some(r.grid),
                Some(g) if g != r.grid => {
                    return Err(Error::Dimension {
                        op: "manifest",
                        lhs: vec![g.rows, g.cols, g.dim],
                        rhs: vec![r.grid.rows, r.grid.cols, r.grid.dim],
                    })
                }
                _ => {}
            }
        }
        Ok(Self { records, classes })
    }

    pub fn records(&self) -> &[VideoRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &VideoRecord {
        &self.records[i]
    }

    pub fn classes(&self) -> &BTreeMap<u32, ClassInfo> {
        &self.classes
    }

    pub fn class(&self, id: u32) -> Option<&ClassInfo> {
        self.classes.get(&id)
    }

    pub fn grid(&self) -> Option<GridShape> {
        self.records.first().map(|r| r.grid)
    }

    pub fn min_frames(&self) -> usize {
        self.records.iter().map(|r| r.frame_count).min().unwrap_or(0)
    }

    pub fn classes_in(&self, split: Split) -> Vec<u32> {
        self.classes
            .iter()
            .filter(|(_, c)| c.split == split)
            .map(|(&id, _)| id)
            .collect()
    }

    /// Record indices grouped by class, restricted to `split`.
    pub fn videos_by_class(&self, split: Split) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for id in self.classes_in(split) {
            out.insert(id, Vec::new());
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.split == split {
                out.entry(r.class_id).or_default().push(i);
            }
        }
        out
    }
}

/// Assigns splits to `n` classes in 64/12/24 proportion (train/val/test),
/// keeping every split non-empty when `n >= 3`.
pub fn default_splits(n: usize) -> Vec<Split> {
    if n == 0 {
        return Vec::new();
    }
    let mut test = ((n as f64) * 0.24).round() as usize;
    let mut val = ((n as f64) * 0.12).round() as usize;
    if n >= 3 {
        test = test.max(1);
        val = val.max(1);
    }
    let train = n.saturating_sub(test + val).max(1.min(n));
    let val = val.min(n - train);
    (0..n)
        .map(|i| {
            if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_splits_follow_64_12_24() {
        let s = default_splits(100);
        let count = |sp| s.iter().filter(|&&x| x == sp).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (64, 12, 24));
        let s = default_splits(3);
        assert_eq!(s, vec![Split::Train, Split::Val, Split::Test]);
    }

    #[test]
    fn manifest_rejects_mixed_grids() {
        let mut classes = BTreeMap::new();
        classes.insert(0, ClassInfo { name: "a".into(), split: Split::Train });
        let g1 = GridShape { rows: 1, cols: 1, dim: 2 };
        let g2 = GridShape { rows: 2, cols: 1, dim: 2 };
        let rec = |grid: GridShape| VideoRecord {
            class_id: 0,
            split: Split::Train,
            frame_count: 1,
            grid,
            payload: vec![0.0; grid.frame_len()],
        };
        let err = DatasetManifest::new(vec![rec(g1), rec(g2)], classes).unwrap_err();
        assert!(err.to_string().contains("[1, 1, 2]") && err.to_string().contains("[2, 1, 2]"));
    }
}
