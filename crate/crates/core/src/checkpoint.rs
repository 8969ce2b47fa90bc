//! Binary model checkpoints.
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! "GAMC" version config_len config_json
//! { name_len name rank dims[rank] f32[prod(dims)] }*
//! ```
//!
//! Records run to the end of the file. The tied embedding / LM head is one
//! parameter and so is stored once.

use std::path::Path;

use crate::model::{Model, ModelConfig};
use crate::{Error, Result, Tensor};

const MAGIC: &[u8; 4] = b"GAMC";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(model.count_params() * 4 + 4096);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let cfg = serde_json::to_vec(&model.config).expect("config serializes");
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    for e in model.params.entries() {
        put_u32(&mut out, e.name.len() as u32);
        out.extend_from_slice(e.name.as_bytes());
        put_u32(&mut out, e.value.rank() as u32);
        for &d in e.value.shape() {
            put_u32(&mut out, d as u32);
        }
        for x in e.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Parse(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Parse(format!("checkpoint config: {e}")))?;
    let mut model = Model::<f32>::new(config)?;
    let mut seen = vec![false; model.params.len()];
    while r.pos < bytes.len() {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Parse("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| Error::Parse(format!("unknown parameter {name:?}")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Parse(format!("parameter {name:?} stored twice")));
        }
        let target = model.params.get_mut(id);
        if target.shape() != shape.as_slice() {
            return Err(Error::Parse(format!(
                "parameter {name:?} has shape {shape:?}, expected {:?}",
                target.shape()
            )));
        }
        let raw = r.take(4 * target.numel())?;
        for (x, c) in target.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *x = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Parse(format!(
            "parameter {:?} missing from checkpoint",
            model.params.entries()[i].name
        )));
    }
    Ok(model)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        e => e,
    })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Parse(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Parameters of two models as `(name, tensor)` pairs, for equality checks.
pub fn named_tensors(model: &Model<f32>) -> Vec<(&str, &Tensor<f32>)> {
    model
        .params
        .entries()
        .iter()
        .map(|e| (e.name.as_str(), &e.value))
        .collect()
}
