//! The SNFW named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SNFW" | version u32 | header_len u32 | header (UTF-8 JSON)
//! repeated until EOF:
//!   name_len u32 | name | dtype u8 (0 = f32) | rank u32 | dims u64[rank] | payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{DenseConfig, DenseModel, Supernet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SNFW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// A decoded archive: free-form header plus named tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub header: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn kind(&self) -> Option<&str> {
        self.header.get("kind").and_then(Value::as_str)
    }
}

pub fn encode(header: &Value, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let text = serde_json::to_string(header).expect("json header");
    let payload: usize = tensors.iter().map(|(_, t)| t.len() * 4 + 64).sum();
    let mut out = Vec::with_capacity(12 + text.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated archive at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Archive> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an SNFW archive".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(hlen)?).map_err(|e| Error::Format(format!("header: {e}")))?;
    let header: Value = serde_json::from_str(header).map_err(|e| Error::Format(format!("header: {e}")))?;
    let mut tensors = Vec::new();
    while r.pos < bytes.len() {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| Error::Format(format!("tensor name: {e}")))?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("{name}: unsupported dtype {dtype}")));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format(format!("{name}: dim overflow")))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("{name}: size overflow")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{name}: size overflow")))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    Ok(Archive { header, tensors })
}

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_archive(path: &Path, header: &Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    write_atomic(path, &encode(header, tensors))
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    decode(&bytes)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: String,
    config: DenseConfig,
}

pub fn model_header(config: &DenseConfig) -> Value {
    serde_json::to_value(ModelHeader {
        kind: "model".into(),
        config: config.clone(),
    })
    .expect("json header")
}

pub fn save_model(path: &Path, model: &DenseModel) -> Result<()> {
    write_archive(path, &model_header(&model.config), &model.named_params())
}

pub fn model_from_archive(archive: Archive) -> Result<DenseModel> {
    let header: ModelHeader =
        serde_json::from_value(archive.header).map_err(|e| Error::Format(format!("model header: {e}")))?;
    if header.kind != "model" {
        return Err(Error::Format(format!("expected a model archive, found {:?}", header.kind)));
    }
    DenseModel::from_named(header.config, archive.tensors)
}

pub fn load_model(path: &Path) -> Result<DenseModel> {
    model_from_archive(read_archive(path)?)
}

/// Load a model checkpoint whose layers are identical as a supernet.
pub fn load_supernet(path: &Path) -> Result<Supernet> {
    Supernet::from_dense(load_model(path)?)
}
