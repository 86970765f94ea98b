//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"GDGTCKPT"                 magic
//! u32                         format version (1)
//! u64 + bytes                 model config as JSON
//! u64                         parameter count
//! per parameter:
//!   u32 + bytes               name (UTF-8)
//!   u32, u64 × ndim           shape
//!   f64 × numel               values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Gdgt, GdgtConfig};
use crate::tensor::Module;

pub const MAGIC: &[u8; 8] = b"GDGTCKPT";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Gdgt) -> Vec<u8> {
    let config = serde_json::to_vec(model.config()).expect("config serialises");
    let mut out = Vec::with_capacity(64 + 8 * model.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    let params = model.parameters();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name().len() as u32).to_le_bytes());
        out.extend_from_slice(p.name().as_bytes());
        out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> std::result::Result<usize, String> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| format!("length {n} too large"))
    }
}

/// Rebuilds a model from checkpoint bytes; `origin` is used in error messages.
pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Gdgt> {
    let bad = |msg: String| Error::format(origin, msg);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(bad)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32().map_err(bad)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let n = r.len().map_err(bad)?;
    let config: GdgtConfig =
        serde_json::from_slice(r.take(n).map_err(bad)?).map_err(|e| bad(format!("config: {e}")))?;
    let mut model = Gdgt::new(config, 0)?;
    let count = r.len().map_err(bad)?;
    let mut stored = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32().map_err(bad)? as usize;
        let name = String::from_utf8(r.take(n).map_err(bad)?.to_vec()).map_err(|_| bad("name is not UTF-8".into()))?;
        let ndim = r.u32().map_err(bad)? as usize;
        let shape = (0..ndim)
            .map(|_| r.len())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(bad)?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("shape overflows".into()))?;
        let raw = r
            .take(numel.checked_mul(8).ok_or_else(|| bad("shape overflows".into()))?)
            .map_err(bad)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        stored.push((name, shape, values));
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let expected = model.parameters().len();
    if stored.len() != expected {
        return Err(bad(format!(
            "checkpoint holds {} tensors, model has {expected}",
            stored.len()
        )));
    }
    let mut stored = stored.into_iter();
    let mut result = Ok(());
    model.visit_params_mut(&mut |p| {
        if result.is_err() {
            return;
        }
        let (name, shape, values) = stored.next().expect("counts checked");
        result = if name != p.name() || shape != p.shape() {
            Err(bad(format!(
                "parameter {name} {shape:?} does not match model parameter {} {:?}",
                p.name(),
                p.shape()
            )))
        } else {
            p.set_data(values)
        };
    });
    result?;
    Ok(model)
}

pub fn save(path: &Path, model: &Gdgt) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Gdgt> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
