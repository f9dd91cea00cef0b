//! Tensor checkpoints: the native `NWT1` container, a read-only safetensors
//! subset, and per-layer norm / stable-rank reports.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{stable_rank, Matrix};
use crate::model::{Activation, Architecture, Params};

const NATIVE_MAGIC: &[u8; 4] = b"NWT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F64,
    F32,
    F16,
    BF16,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            DType::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
            DType::F32 => f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))),
            DType::F16 => half::f16::from_le_bytes(b.try_into().expect("2 bytes")).to_f64(),
            DType::BF16 => half::bf16::from_le_bytes(b.try_into().expect("2 bytes")).to_f64(),
        }
    }
}

/// Values are held widened to `f64`; `dtype` records the stored precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn f64(shape: Vec<usize>, values: Vec<f64>) -> Self {
        Self {
            dtype: DType::F64,
            shape,
            values,
        }
    }

    fn numel(shape: &[usize]) -> Option<usize> {
        shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }

    pub fn as_matrix(&self) -> Option<Matrix> {
        match self.shape[..] {
            [r, c] if r > 0 && c > 0 => Matrix::new(r, c, self.values.clone()).ok(),
            _ => None,
        }
    }
}

/// Architecture sidecar stored next to a native checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub depth: usize,
    pub degree: u32,
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub fixed_head: bool,
    pub lambda: Option<f64>,
    pub eta: Option<f64>,
    pub step: Option<u64>,
    pub seed: Option<u64>,
}

impl CheckpointMeta {
    pub fn from_arch(arch: &Architecture) -> Self {
        Self {
            depth: arch.depth(),
            degree: arch.degree(),
            input_dim: arch.input_dim,
            widths: arch.widths.clone(),
            activation: arch.activation,
            fixed_head: arch.fixed_head,
            lambda: None,
            eta: None,
            step: None,
            seed: None,
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let mut arch = Architecture::new(self.input_dim, self.widths.clone(), self.activation)?;
        arch.fixed_head = self.fixed_head;
        Ok(arch)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    /// In file order.
    pub tensors: Vec<(String, Tensor)>,
    pub meta: Option<CheckpointMeta>,
    /// Tensors skipped while reading (unsupported dtypes).
    pub warnings: Vec<String>,
}

impl Checkpoint {
    /// `W1 … W{K-1}` as 2-D tensors and the head as the 1-D tensor `head`.
    pub fn from_params(params: &Params, meta: Option<CheckpointMeta>) -> Self {
        let mut tensors: Vec<(String, Tensor)> = params
            .weights
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let (r, c) = w.shape();
                (format!("W{}", k + 1), Tensor::f64(vec![r, c], w.as_slice().to_vec()))
            })
            .collect();
        tensors.push(("head".into(), Tensor::f64(vec![params.head.len()], params.head.clone())));
        Self {
            tensors,
            meta,
            warnings: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_params(&self, arch: &Architecture) -> Result<Params> {
        let missing = |n: &str| Error::Format(format!("checkpoint has no tensor {n}"));
        let weights = arch
            .layer_shapes()
            .into_iter()
            .enumerate()
            .map(|(k, (r, c))| {
                let name = format!("W{}", k + 1);
                let t = self.get(&name).ok_or_else(|| missing(&name))?;
                if t.shape != [r, c] {
                    return Err(Error::Format(format!("tensor {name} has shape {:?}, expected [{r}, {c}]", t.shape)));
                }
                Matrix::new(r, c, t.values.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let head = self.get("head").ok_or_else(|| missing("head"))?.values.clone();
        let params = Params { weights, head };
        params.check(arch)?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        if self.tensors.is_empty() {
            return Err(Error::invalid("checkpoint has no tensors"));
        }
        let mut seen = HashSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::invalid(format!("duplicate tensor name {name}")));
            }
            if Tensor::numel(&t.shape) != Some(t.values.len()) {
                return Err(Error::invalid(format!("tensor {name}: shape does not match data length")));
            }
        }
        Ok(())
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn encode_native(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.validate()?;
    let mut out = NATIVE_MAGIC.to_vec();
    let count = u32::try_from(ckpt.tensors.len()).map_err(|_| Error::invalid("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in &ckpt.tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match t.dtype {
            DType::F64 => 0,
            DType::F32 => 1,
            other => return Err(Error::Unsupported(format!("native format cannot store {other:?}"))),
        });
        out.push(u8::try_from(t.shape.len()).map_err(|_| Error::invalid("too many dimensions"))?);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.values {
            match t.dtype {
                DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                _ => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    Ok(out)
}

/// Writes the container and, when present, the `<path>.meta.json` sidecar.
pub fn write_native(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_native(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    if let Some(meta) = &ckpt.meta {
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(meta).expect("meta is plain data");
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("byte offset {}: truncated {what}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn decode_native(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 4 };
    let count = u32::from_le_bytes(c.take(4, "tensor count")?.try_into().expect("4 bytes"));
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Format(format!("byte offset {at}: tensor name is not UTF-8")))?
            .to_string();
        let at = c.pos;
        let dtype = match c.take(1, "dtype")?[0] {
            0 => DType::F64,
            1 => DType::F32,
            other => return Err(Error::Format(format!("byte offset {at}: unknown dtype code {other}"))),
        };
        let ndim = c.take(1, "ndim")?[0] as usize;
        let shape = (0..ndim)
            .map(|_| {
                let at = c.pos;
                let d = u64::from_le_bytes(c.take(8, "dimension")?.try_into().expect("8 bytes"));
                usize::try_from(d).map_err(|_| Error::Format(format!("byte offset {at}: dimension too large")))
            })
            .collect::<Result<Vec<_>>>()?;
        let nbytes = Tensor::numel(&shape)
            .and_then(|n| n.checked_mul(dtype.size()))
            .filter(|&n| n <= c.remaining())
            .ok_or_else(|| Error::Format(format!("byte offset {}: tensor {name} data exceeds file", c.pos)))?;
        let data = c.take(nbytes, "tensor data")?;
        let values = data.chunks_exact(dtype.size()).map(|b| dtype.decode(b)).collect();
        tensors.push((name, Tensor { dtype, shape, values }));
    }
    if c.remaining() != 0 {
        return Err(Error::Format(format!("byte offset {}: trailing bytes", c.pos)));
    }
    let ckpt = Checkpoint {
        tensors,
        meta: None,
        warnings: Vec::new(),
    };
    ckpt.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(ckpt)
}

fn field<'a>(entry: &'a serde_json::Value, tensor: &str, key: &str) -> Result<&'a serde_json::Value> {
    entry
        .get(key)
        .ok_or_else(|| Error::Format(format!("tensor {tensor}: missing field {key}")))
}

fn u64_list(v: &serde_json::Value, tensor: &str, key: &str) -> Result<Vec<u64>> {
    let bad = || Error::Format(format!("tensor {tensor}: field {key} must be a list of non-negative integers"));
    v.as_array()
        .ok_or_else(bad)?
        .iter()
        .map(|x| x.as_u64().ok_or_else(bad))
        .collect()
}

fn decode_safetensors(bytes: &[u8]) -> Result<Checkpoint> {
    let header_len = bytes
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .ok_or_else(|| Error::Format("byte offset 0: file shorter than the 8-byte header length".into()))?;
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(8))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            Error::Format(format!(
                "header_length: {header_len} exceeds file size {}",
                bytes.len()
            ))
        })?;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::Format(format!("header: malformed JSON: {e}")))?;
    let map = header
        .as_object()
        .ok_or_else(|| Error::Format("header: top level must be a JSON object".into()))?;
    let buffer = &bytes[header_end..];

    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for (name, entry) in map {
        if name == "__metadata__" {
            continue;
        }
        let dtype_str = field(entry, name, "dtype")?
            .as_str()
            .ok_or_else(|| Error::Format(format!("tensor {name}: field dtype must be a string")))?;
        let shape: Vec<usize> = u64_list(field(entry, name, "shape")?, name, "shape")?
            .into_iter()
            .map(|d| usize::try_from(d).map_err(|_| Error::Format(format!("tensor {name}: field shape too large"))))
            .collect::<Result<_>>()?;
        let offsets = u64_list(field(entry, name, "data_offsets")?, name, "data_offsets")?;
        let [begin, end] = offsets[..] else {
            return Err(Error::Format(format!("tensor {name}: field data_offsets must have two entries")));
        };
        if begin > end || end > buffer.len() as u64 {
            return Err(Error::Format(format!(
                "tensor {name}: field data_offsets [{begin}, {end}] out of range for buffer of {} bytes",
                buffer.len()
            )));
        }
        let (begin, end) = (begin as usize, end as usize);
        let dtype = match dtype_str {
            "F64" => Some(DType::F64),
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        };
        if let Some(dt) = dtype {
            let expected = Tensor::numel(&shape).and_then(|n| n.checked_mul(dt.size()));
            if expected != Some(end - begin) {
                return Err(Error::Format(format!(
                    "tensor {name}: field data_offsets spans {} bytes, shape and dtype need {expected:?}",
                    end - begin
                )));
            }
        }
        entries.push((begin, end, name.clone(), dtype, dtype_str.to_string(), shape));
    }
    entries.sort_by_key(|e| (e.0, e.1));
    for pair in entries.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::Format(format!(
                "tensor {}: field data_offsets overlaps tensor {}",
                pair[1].2, pair[0].2
            )));
        }
    }
    let mut tensors = Vec::new();
    for (begin, end, name, dtype, dtype_str, shape) in entries {
        match dtype {
            Some(dt) => {
                let values = buffer[begin..end].chunks_exact(dt.size()).map(|b| dt.decode(b)).collect();
                tensors.push((name, Tensor { dtype: dt, shape, values }));
            }
            None => warnings.push(format!("skipped tensor {name}: unsupported dtype {dtype_str}")),
        }
    }
    Ok(Checkpoint {
        tensors,
        meta: None,
        warnings,
    })
}

/// Parses native or safetensors bytes (detected by the `NWT1` magic).
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.starts_with(NATIVE_MAGIC) {
        decode_native(bytes)
    } else {
        decode_safetensors(bytes)
    }
}

/// Reads a checkpoint and its sidecar, if one exists next to it.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut ckpt = parse_checkpoint(&bytes)?;
    let side = sidecar_path(path);
    if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        ckpt.meta = Some(
            serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?,
        );
    }
    Ok(ckpt)
}

/// Several tensors measured as one layer, stacked along rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Group {
    pub name: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReportRow {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub fro_norm: f64,
    pub spec_norm: f64,
    /// NaN for an all-zero tensor.
    pub stable_rank: f64,
    /// Members joined by `+` for grouped rows.
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub rows: Vec<LayerReportRow>,
    /// Tensors that are not 2-D.
    pub skipped: Vec<String>,
}

impl LayerReport {
    pub const CSV_HEADER: &'static str = "name,rows,cols,fro_norm,spec_norm,stable_rank,group";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.name,
                r.rows,
                r.cols,
                r.fro_norm,
                r.spec_norm,
                r.stable_rank,
                r.group.as_deref().unwrap_or("")
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }
}

fn measure(name: String, m: &Matrix, group: Option<String>) -> LayerReportRow {
    let (rows, cols) = m.shape();
    let (fro_norm, spec_norm, srank) = match stable_rank(m) {
        Ok(s) => (s.fro, s.spec, s.srank),
        Err(_) => (0.0, 0.0, f64::NAN),
    };
    LayerReportRow {
        name,
        rows,
        cols,
        fro_norm,
        spec_norm,
        stable_rank: srank,
        group,
    }
}

pub fn layer_report(ckpt: &Checkpoint, groups: &[Group]) -> Result<LayerReport> {
    let index_of = |n: &str| ckpt.tensors.iter().position(|(name, _)| name == n);
    // Each job is (position in checkpoint, row name, member indices, group label).
    let mut jobs: Vec<(usize, String, Vec<usize>, Option<String>)> = Vec::new();
    let mut grouped = HashSet::new();
    for g in groups {
        if g.members.is_empty() {
            return Err(Error::Config(format!("group {} has no members", g.name)));
        }
        let idx = g
            .members
            .iter()
            .map(|m| {
                let i = index_of(m).ok_or_else(|| Error::Config(format!("group {} references missing tensor {m}", g.name)))?;
                if ckpt.tensors[i].1.shape.len() != 2 {
                    return Err(Error::Config(format!("group {} member {m} is not 2-D", g.name)));
                }
                if !grouped.insert(i) {
                    return Err(Error::Config(format!("tensor {m} appears in more than one group")));
                }
                Ok(i)
            })
            .collect::<Result<Vec<_>>>()?;
        let first = *idx.iter().min().expect("nonempty");
        jobs.push((first, g.name.clone(), idx, Some(g.members.join("+"))));
    }
    let mut skipped = Vec::new();
    for (i, (name, t)) in ckpt.tensors.iter().enumerate() {
        if grouped.contains(&i) {
            continue;
        }
        if t.shape.len() == 2 && !t.values.is_empty() {
            jobs.push((i, name.clone(), vec![i], None));
        } else {
            skipped.push(name.clone());
        }
    }
    if jobs.is_empty() {
        return Err(Error::invalid("checkpoint has no 2-D tensors"));
    }
    jobs.sort_by_key(|j| j.0);
    let rows = jobs
        .into_par_iter()
        .map(|(_, name, members, group)| {
            let mats = members
                .iter()
                .map(|&i| {
                    ckpt.tensors[i]
                        .1
                        .as_matrix()
                        .ok_or_else(|| Error::Format(format!("tensor {} is not a valid matrix", ckpt.tensors[i].0)))
                })
                .collect::<Result<Vec<_>>>()?;
            let m = if mats.len() == 1 {
                mats.into_iter().next().expect("one member")
            } else {
                Matrix::vstack(&mats.iter().collect::<Vec<_>>())
                    .map_err(|e| Error::Config(format!("group {name}: {e}")))?
            };
            Ok(measure(name, &m, group))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerReport { rows, skipped })
}
