//! Binary checkpoints: named little-endian f32 tensors plus a JSON blob.
//!
//! ```text
//! "BNC1" | u32 count | count × (u16 name_len, name, u8 ndims, u32 dims…, f32 data…) | u32 meta_len, meta
//! ```

use crate::error::{Error, Result};
use crate::inference::{SampleSet, ViPosterior};
use crate::model::{Arch, WeightSet};
use crate::numerics::Matrix;
use crate::posterior::{DiagGaussian, Representation};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"BNC1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape(format!(
                "tensor {name:?}: shape {shape:?} does not hold {} values",
                values.len()
            )));
        }
        Ok(Self { name, shape, values })
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(name, shape, values.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
    /// JSON text.
    pub meta: String,
}

impl Checkpoint {
    pub fn new(tensors: Vec<Tensor>, meta: &Value) -> Self {
        Self {
            tensors,
            meta: meta.to_string(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::format(0, format!("checkpoint has no tensor {name:?}")))
    }

    pub fn meta_json(&self) -> Result<Value> {
        if self.meta.is_empty() {
            return Ok(Value::Null);
        }
        Ok(serde_json::from_str(&self.meta)?)
    }

    /// The `kind` field of the meta blob, if any.
    pub fn kind(&self) -> Option<String> {
        self.meta_json().ok()?.get("kind")?.as_str().map(str::to_string)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&u32_len(self.tensors.len(), "tensor count")?.to_le_bytes());
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::arg(format!("duplicate tensor name {:?}", t.name)));
            }
            if t.shape.iter().product::<usize>() != t.values.len() {
                return Err(Error::shape(format!("tensor {:?} has inconsistent shape", t.name)));
            }
            let name_len = u16::try_from(t.name.len()).map_err(|_| Error::arg("tensor name too long"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(u8::try_from(t.shape.len()).map_err(|_| Error::arg("too many dimensions"))?);
            for &d in &t.shape {
                out.extend_from_slice(&u32_len(d, "dimension")?.to_le_bytes());
            }
            out.reserve(4 * t.values.len());
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&u32_len(self.meta.len(), "meta length")?.to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, not a BNC1 checkpoint"));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let at = r.pos as u64;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::format(at, format!("duplicate tensor name {name:?}")));
            }
            let ndims = r.take(1, "ndims")?[0] as usize;
            let shape = (0..ndims).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format(r.pos as u64, "tensor size overflows"))?;
            let values = r
                .take(n, "tensor data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor { name, shape, values });
        }
        let len = r.u32("meta length")? as usize;
        let at = r.pos as u64;
        let meta = std::str::from_utf8(r.take(len, "meta")?)
            .map_err(|_| Error::format(at, "meta is not UTF-8"))?
            .to_string();
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after meta"));
        }
        Ok(Self { tensors, meta })
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::arg(format!("{what} {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.pos as u64, format!("truncated while reading {what}"))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_checkpoint(path: impl AsRef<Path>, c: &Checkpoint) -> Result<()> {
    write_atomic(path, &c.to_bytes()?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Typed payloads

fn weight_tensors(prefix: &str, w: &WeightSet) -> Result<Vec<Tensor>> {
    let (h, d, c) = (w.w1.rows(), w.w1.cols(), w.w2.rows());
    Ok(vec![
        Tensor::from_f64(format!("{prefix}w1"), vec![h, d], w.w1.data())?,
        Tensor::from_f64(format!("{prefix}b1"), vec![h], &w.b1)?,
        Tensor::from_f64(format!("{prefix}w2"), vec![c, h], w.w2.data())?,
        Tensor::from_f64(format!("{prefix}b2"), vec![c], &w.b2)?,
    ])
}

fn matrix_from(t: &Tensor) -> Result<Matrix> {
    match t.shape[..] {
        [r, c] => Matrix::new(r, c, t.to_f64()),
        _ => Err(Error::format(0, format!("tensor {:?} is not a matrix", t.name))),
    }
}

fn read_weights(c: &Checkpoint, prefix: &str) -> Result<WeightSet> {
    let w1 = matrix_from(c.get(&format!("{prefix}w1"))?)?;
    let b1 = c.get(&format!("{prefix}b1"))?.to_f64();
    let w2 = matrix_from(c.get(&format!("{prefix}w2"))?)?;
    let b2 = c.get(&format!("{prefix}b2"))?.to_f64();
    WeightSet::new(w1, b1, w2, b2).map_err(|e| Error::format(0, e.to_string()))
}

fn expect_kind(c: &Checkpoint, kind: &str) -> Result<Value> {
    let meta = c.meta_json()?;
    match meta.get("kind").and_then(Value::as_str) {
        Some(k) if k == kind => Ok(meta),
        Some(k) => Err(Error::format(0, format!("checkpoint holds {k:?}, expected {kind:?}"))),
        None => Err(Error::format(0, format!("checkpoint meta lacks a kind, expected {kind:?}"))),
    }
}

pub fn weights_to_checkpoint(w: &WeightSet, extra: Value) -> Result<Checkpoint> {
    Ok(Checkpoint::new(weight_tensors("", w)?, &json!({ "kind": "weights", "info": extra })))
}

pub fn weights_from_checkpoint(c: &Checkpoint) -> Result<WeightSet> {
    expect_kind(c, "weights")?;
    read_weights(c, "")
}

fn sample_prefix(i: usize) -> String {
    format!("sample_{i:04}.")
}

pub fn samples_to_checkpoint(s: &SampleSet) -> Result<Checkpoint> {
    let mut tensors = Vec::with_capacity(4 * s.len());
    for (i, w) in s.samples.iter().enumerate() {
        tensors.extend(weight_tensors(&sample_prefix(i), w)?);
    }
    Ok(Checkpoint::new(
        tensors,
        &json!({ "kind": "samples", "method": s.method, "count": s.len(), "info": s.meta }),
    ))
}

pub fn samples_from_checkpoint(c: &Checkpoint) -> Result<SampleSet> {
    let meta = expect_kind(c, "samples")?;
    let count = meta
        .get("count")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::format(0, "sample checkpoint meta lacks a count"))? as usize;
    let samples = (0..count).map(|i| read_weights(c, &sample_prefix(i))).collect::<Result<Vec<_>>>()?;
    let method = meta.get("method").and_then(Value::as_str).unwrap_or("unknown");
    let s = SampleSet::new(samples, method).with_meta(meta.get("info").cloned().unwrap_or(Value::Null));
    s.validate().map_err(|e| Error::format(0, e.to_string()))?;
    Ok(s)
}

#[derive(Serialize, Deserialize)]
struct GaussianMeta {
    kind: String,
    arch: Arch,
    tag: Representation,
    source_method: String,
    reference_id: Option<usize>,
}

pub fn gaussian_to_checkpoint(g: &DiagGaussian) -> Result<Checkpoint> {
    let meta = GaussianMeta {
        kind: "diag_gaussian".into(),
        arch: g.arch,
        tag: g.tag,
        source_method: g.source_method.clone(),
        reference_id: g.reference_id,
    };
    Ok(Checkpoint::new(
        vec![
            Tensor::from_f64("mu", vec![g.len()], &g.mu)?,
            Tensor::from_f64("sigma2", vec![g.len()], &g.sigma2)?,
        ],
        &serde_json::to_value(meta)?,
    ))
}

pub fn gaussian_from_checkpoint(c: &Checkpoint) -> Result<DiagGaussian> {
    expect_kind(c, "diag_gaussian")?;
    let meta: GaussianMeta = serde_json::from_str(&c.meta)?;
    let mut g = DiagGaussian::new(
        meta.arch,
        c.get("mu")?.to_f64(),
        c.get("sigma2")?.to_f64(),
        meta.tag,
        meta.source_method,
    )
    .map_err(|e| Error::format(0, e.to_string()))?;
    g.reference_id = meta.reference_id;
    Ok(g)
}

pub fn vi_to_checkpoint(q: &ViPosterior, extra: Value) -> Result<Checkpoint> {
    Ok(Checkpoint::new(
        vec![
            Tensor::from_f64("mu", vec![q.mu.len()], &q.mu)?,
            Tensor::from_f64("rho", vec![q.rho.len()], &q.rho)?,
        ],
        &json!({ "kind": "vi", "arch": q.arch, "info": extra }),
    ))
}

pub fn vi_from_checkpoint(c: &Checkpoint) -> Result<ViPosterior> {
    let meta = expect_kind(c, "vi")?;
    let arch: Arch = serde_json::from_value(meta.get("arch").cloned().unwrap_or(Value::Null))?;
    ViPosterior::new(arch, c.get("mu")?.to_f64(), c.get("rho")?.to_f64()).map_err(|e| Error::format(0, e.to_string()))
}

/// Reads a diagonal Gaussian from either a Gaussian or a VI checkpoint.
pub fn load_gaussian(path: impl AsRef<Path>) -> Result<DiagGaussian> {
    let c = read_checkpoint(path)?;
    match c.kind().as_deref() {
        Some("vi") => Ok(DiagGaussian::from_vi(&vi_from_checkpoint(&c)?)),
        _ => gaussian_from_checkpoint(&c),
    }
}
