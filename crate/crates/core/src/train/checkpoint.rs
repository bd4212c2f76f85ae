//! Named-tensor checkpoints.
//!
//! Layout (little-endian): `"FSCK"`, `u16` version, `u32` entry count, then
//! per entry `u16` name length, UTF-8 name, `u8` frozen flag, `u8` rank,
//! `rank` `u32` extents and the `f32` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamRegistry, TokenTensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint(reg: &ParamRegistry) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(reg.len() as u32).to_le_bytes());
    for e in reg.entries() {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Input(format!("name too long: {}", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.frozen as u8);
        out.push(e.tensor.rank() as u8);
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in e.tensor.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated {what}: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn fail(&self, at: usize, detail: String) -> Error {
        Error::Format { offset: at as u64, detail }
    }
}

/// Loads values into `reg`. Names, order, shapes and frozen flags must match
/// the registry exactly.
pub fn read_checkpoint(bytes: &[u8], reg: &mut ParamRegistry) -> Result<()> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(r.fail(0, "bad magic, not a checkpoint".into()));
    }
    let at = r.pos;
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(at, format!("unsupported version {version}")));
    }
    let at = r.pos;
    let count = r.u32("entry count")? as usize;
    if count != reg.len() {
        return Err(r.fail(at, format!("checkpoint has {count} tensors, model has {}", reg.len())));
    }
    let ids: Vec<_> = reg.ids().collect();
    let mut values = Vec::with_capacity(count);
    for id in &ids {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| r.fail(at, "name is not UTF-8".into()))?;
        let want = reg.entry(*id);
        if name != want.name {
            return Err(r.fail(at, format!("expected tensor {:?}, found {name:?}", want.name)));
        }
        let at = r.pos;
        let frozen = r.u8("frozen flag")? != 0;
        if frozen != want.frozen {
            return Err(r.fail(at, format!("{name}: frozen flag {frozen} does not match model")));
        }
        let at = r.pos;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("extent").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != want.tensor.shape() {
            return Err(r.fail(at, format!("{name}: shape {shape:?}, model expects {:?}", want.tensor.shape())));
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(4 * n, "payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        values.push(TokenTensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    for (id, t) in ids.into_iter().zip(values) {
        *reg.tensor_mut(id) = t;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, reg: &ParamRegistry) -> Result<()> {
    fs::write(path, write_checkpoint(reg)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, reg: &mut ParamRegistry) -> Result<()> {
    read_checkpoint(&fs::read(path)?, reg)
}
