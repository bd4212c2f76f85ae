//! Binary embedding files plus a TSV class sidecar.
//!
//! Layout (all little-endian): `"FSAR"`, `u16` version, `u32` record count,
//! then per record `u32` class id, `u16` frames, `u16` rows, `u16` cols,
//! `u16` dim and `frames * rows * cols * dim` `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ClassInfo, DatasetManifest, GridShape, Split, VideoRecord};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FSAR";
pub const FORMAT_VERSION: u16 = 1;

const RECORD_HEADER: usize = 12;

/// Raw record as stored on disk (no split tag; that lives in the sidecar).
type RawRecord = (u32, usize, GridShape, Vec<f32>);

fn u16_field(v: usize, what: &str) -> Result<[u8; 2]> {
    u16::try_from(v)
        .map(u16::to_le_bytes)
        .map_err(|_| Error::Input(format!("{what} {v} does not fit in u16")))
}

/// Serializes records to the embedding-file byte layout.
pub fn write_embedding_file(records: &[VideoRecord]) -> Result<Vec<u8>> {
    let count = u32::try_from(records.len())
        .map_err(|_| Error::Input("too many records".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for r in records {
        out.extend_from_slice(&r.class_id.to_le_bytes());
        out.extend_from_slice(&u16_field(r.frame_count, "frame count")?);
        out.extend_from_slice(&u16_field(r.grid.rows, "rows")?);
        out.extend_from_slice(&u16_field(r.grid.cols, "cols")?);
        out.extend_from_slice(&u16_field(r.grid.dim, "dim")?);
        for x in &r.payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses embedding-file bytes. Grid shapes must agree across records.
pub fn read_embedding_file(bytes: &[u8]) -> Result<Vec<RawRecord>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, detail: "bad magic".into() });
    }
    let version = c.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let count = c.u32("record count")? as usize;
    let mut out: Vec<RawRecord> = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let start = c.pos;
        if c.bytes.len() - c.pos < RECORD_HEADER {
            return Err(Error::Format {
                offset: start as u64,
                detail: format!("record {i} of {count} missing"),
            });
        }
        let class_id = c.u32("class id")?;
        let frames = c.u16("frame count")? as usize;
        let grid = GridShape {
            rows: c.u16("rows")? as usize,
            cols: c.u16("cols")? as usize,
            dim: c.u16("dim")? as usize,
        };
        if let Some((_, _, first, _)) = out.first() {
            if *first != grid {
                return Err(Error::Format {
                    offset: start as u64,
                    detail: format!(
                        "record {i} grid [{}, {}, {}] differs from [{}, {}, {}]",
                        grid.rows, grid.cols, grid.dim, first.rows, first.cols, first.dim
                    ),
                });
            }
        }
        let n = frames * grid.frame_len();
        let raw = c.take(4 * n, &format!("payload of record {i}"))?;
        let payload = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((class_id, frames, grid, payload));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            detail: format!("{} trailing bytes", bytes.len() - c.pos),
        });
    }
    Ok(out)
}

/// Sidecar lines `class_id<TAB>name<TAB>split`, sorted by id.
pub fn write_sidecar(classes: &BTreeMap<u32, ClassInfo>) -> String {
    classes
        .iter()
        .map(|(id, c)| format!("{id}\t{}\t{}\n", c.name, c.split))
        .collect()
}

pub fn read_sidecar(text: &str) -> Result<BTreeMap<u32, ClassInfo>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, name, split] = fields[..] else {
            return Err(Error::Input(format!("sidecar line {}: expected 3 fields", n + 1)));
        };
        let id: u32 = id
            .parse()
            .map_err(|_| Error::Input(format!("sidecar line {}: bad class id {id:?}", n + 1)))?;
        let split: Split = split.trim().parse()?;
        if out.insert(id, ClassInfo { name: name.to_string(), split }).is_some() {
            return Err(Error::Input(format!("sidecar line {}: duplicate class {id}", n + 1)));
        }
    }
    Ok(out)
}

/// The sidecar lives next to the embedding file with a `.tsv` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("tsv")
}

pub fn save_embedding_file(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::write(path, write_embedding_file(manifest.records())?)?;
    fs::write(sidecar_path(path), write_sidecar(manifest.classes()))?;
    Ok(())
}

pub fn load_embedding_file(path: &Path) -> Result<DatasetManifest> {
    let raw = read_embedding_file(&fs::read(path)?)?;
    let classes = read_sidecar(&fs::read_to_string(sidecar_path(path))?)?;
    let mut records = Vec::with_capacity(raw.len());
    for (class_id, frame_count, grid, payload) in raw {
        let split = classes
            .get(&class_id)
            .ok_or_else(|| Error::Input(format!("class {class_id} missing from sidecar")))?
            .split;
        records.push(VideoRecord { class_id, split, frame_count, grid, payload });
    }
    DatasetManifest::new(records, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};

    fn small() -> DatasetManifest {
        synth_dataset(&SynthConfig { classes: 10, videos_per_class: 1, frames: 3, ..SynthConfig::default() })
            .unwrap()
    }

    #[test]
    fn roundtrip_is_identity() {
        let m = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.fsar");
        save_embedding_file(&path, &m).unwrap();
        assert_eq!(load_embedding_file(&path).unwrap(), m);
    }

    #[test]
    fn missing_record_reports_its_offset() {
        let m = small();
        assert_eq!(m.records().len(), 10);
        let bytes = write_embedding_file(&m.records()[..9]).unwrap();
        let mut patched = bytes.clone();
        patched[6..10].copy_from_slice(&10u32.to_le_bytes());
        match read_embedding_file(&patched) {
            Err(Error::Format { offset, detail }) => {
                assert_eq!(offset as usize, bytes.len());
                assert!(detail.contains("record 9"), "{detail}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_and_bad_header() {
        let bytes = write_embedding_file(small().records()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(read_embedding_file(cut), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_embedding_file(&bad), Err(Error::Format { offset: 0, .. })));
        let mut ver = bytes;
        ver[4] = 9;
        assert!(matches!(read_embedding_file(&ver), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn mixed_grids_name_both_shapes() {
        let m = small();
        let mut recs = m.records()[..2].to_vec();
        recs[1].grid = GridShape { rows: 4, cols: 1, dim: 16 };
        let err = read_embedding_file(&write_embedding_file(&recs).unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[4, 1, 16]") && msg.contains("[2, 2, 16]"), "{msg}");
    }

    #[test]
    fn sidecar_rejects_garbage() {
        assert!(read_sidecar("1\tonly-two").is_err());
        assert!(read_sidecar("x\ta\ttrain").is_err());
        assert!(read_sidecar("1\ta\tnowhere").is_err());
    }
}
