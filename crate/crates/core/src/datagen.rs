//! Synthetic orthogonal tasks, zero-pad orthogonalisation and IDX ingestion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, normalize};
use crate::merging::cross_task_epsilon;
use crate::model::Dataset;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Ambient dimension.
    pub d: usize,
    pub n: usize,
    /// Coordinates carrying the input distribution.
    pub subspace: Vec<usize>,
    /// `c` in the labeler `sin(c ⟨W, x⟩)`.
    #[serde(default = "default_freq")]
    pub label_freq: f64,
    pub seed: u64,
}

fn default_freq() -> f64 {
    1.0
}

impl TaskSpec {
    /// Task on the coordinate range `lo..hi` of `R^d`.
    pub fn on_range(d: usize, n: usize, range: std::ops::Range<usize>, seed: u64) -> Self {
        Self {
            d,
            n,
            subspace: range.collect(),
            label_freq: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subspace.is_empty() {
            return Err(Error::invalid("task subspace is empty"));
        }
        if let Some(&i) = self.subspace.iter().find(|&&i| i >= self.d) {
            return Err(Error::invalid(format!("subspace index {i} is outside dimension {}", self.d)));
        }
        let mut sorted = self.subspace.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.subspace.len() {
            return Err(Error::invalid("subspace indices repeat"));
        }
        if self.n == 0 {
            return Err(Error::invalid("task needs at least one example"));
        }
        if !(self.label_freq > 0.0 && self.label_freq.is_finite()) {
            return Err(Error::invalid("label frequency must be positive"));
        }
        Ok(())
    }
}

/// A labelled task together with the labeling direction `W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub data: Dataset,
    pub labeler: Vec<f64>,
    pub label_freq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPair {
    pub a: Task,
    pub b: Task,
    /// Computed `max |⟨x_i, x'_j⟩|`.
    pub eps: f64,
}

/// `+1` iff `sin(c ⟨W, x⟩) ≥ 0`.
pub fn sin_label(w: &[f64], c: f64, x: &[f64]) -> f64 {
    if (c * dot(w, x)).sin() >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Gaussian on the subspace coordinates, normalised to the unit sphere.
fn sample_input(spec: &TaskSpec, r: &mut StreamRng) -> Vec<f64> {
    loop {
        let mut x = vec![0.0; spec.d];
        for &i in &spec.subspace {
            x[i] = rng::gaussian(r);
        }
        if normalize(&mut x) > 0.0 {
            return x;
        }
    }
}

fn sample_inputs(spec: &TaskSpec, n: usize, r: &mut StreamRng) -> Vec<Vec<f64>> {
    (0..n).map(|_| sample_input(spec, r)).collect()
}

fn labelled(inputs: Vec<Vec<f64>>, w: &[f64], c: f64) -> Result<Dataset> {
    let labels = inputs.iter().map(|x| sin_label(w, c, x)).collect();
    Dataset::new(inputs, labels)
}

/// One task; `tag` separates the random streams of tasks sharing a seed.
pub fn gen_task(spec: &TaskSpec, tag: &str) -> Result<Task> {
    spec.validate()?;
    let mut wr = rng::stream(spec.seed, &format!("task-{tag}-labeler"));
    let labeler = rng::gaussian_vec(&mut wr, spec.d);
    let mut xr = rng::stream(spec.seed, &format!("task-{tag}-inputs"));
    let inputs = sample_inputs(spec, spec.n, &mut xr);
    Ok(Task {
        data: labelled(inputs, &labeler, spec.label_freq)?,
        labeler,
        label_freq: spec.label_freq,
    })
}

/// Fresh draws from the same input distribution, labelled by the task's own `W`.
pub fn gen_heldout(spec: &TaskSpec, tag: &str, task: &Task, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("held-out set needs at least one example"));
    }
    let mut xr = rng::stream(spec.seed, &format!("task-{tag}-heldout"));
    labelled(sample_inputs(spec, n, &mut xr), &task.labeler, task.label_freq)
}

pub fn gen_task_pair(spec_a: &TaskSpec, spec_b: &TaskSpec) -> Result<TaskPair> {
    if spec_a.d != spec_b.d {
        return Err(Error::invalid("tasks must share the ambient dimension"));
    }
    let a = gen_task(spec_a, "a")?;
    let b = gen_task(spec_b, "b")?;
    let eps = cross_task_epsilon(&a.data.inputs, &b.data.inputs)?;
    Ok(TaskPair { a, b, eps })
}

/// Appends zeros to task-a inputs and prepends zeros to task-b inputs, so the
/// two tasks live on disjoint coordinates. Optionally flips task-b labels.
pub fn pad_orthogonalize(a: &Dataset, b: &Dataset, invert_b: bool) -> Result<(Dataset, Dataset)> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "cannot pad datasets of dims {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let d = a.dim();
    let pa = a
        .inputs
        .iter()
        .map(|x| {
            let mut v = x.clone();
            v.resize(2 * d, 0.0);
            v
        })
        .collect();
    let pb = b
        .inputs
        .iter()
        .map(|x| {
            let mut v = vec![0.0; d];
            v.extend_from_slice(x);
            v
        })
        .collect();
    let lb = b
        .labels
        .iter()
        .map(|&y| if invert_b { -y } else { y })
        .collect();
    Ok((Dataset::new(pa, a.labels.clone())?, Dataset::new(pb, lb)?))
}

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// Pixels scaled to `[0, 1]`, one row per image.
    Images { rows: usize, cols: usize, pixels: Vec<Vec<f64>> },
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("byte offset {offset}: truncated header")))
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = be_u32(bytes, 0)?;
    let dims = match magic {
        0x0000_0803 => 3,
        0x0000_0801 => 1,
        other => {
            return Err(Error::Format(format!(
                "byte offset 0: unsupported IDX magic {other:#010x}"
            )))
        }
    };
    let sizes = (0..dims)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * dims;
    let total = sizes
        .iter()
        .try_fold(1usize, |acc, &s| acc.checked_mul(s))
        .ok_or_else(|| Error::Format("byte offset 4: dimension product overflows".into()))?;
    let body = &bytes[start.min(bytes.len())..];
    if body.len() < total {
        return Err(Error::Format(format!(
            "byte offset {}: expected {total} data bytes, found {}",
            start + body.len(),
            body.len()
        )));
    }
    let body = &body[..total];
    Ok(match sizes[..] {
        [_, rows, cols] => IdxData::Images {
            rows,
            cols,
            pixels: if rows * cols == 0 {
                Vec::new()
            } else {
                body.chunks(rows * cols)
                    .map(|img| img.iter().map(|&p| f64::from(p) / 255.0).collect())
                    .collect()
            },
        },
        _ => IdxData::Labels(body.to_vec()),
    })
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxData> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Classes 0–4 map to `−1`, classes 5–9 to `+1`.
pub fn binary_labels(classes: &[u8]) -> Result<Vec<f64>> {
    classes
        .iter()
        .map(|&c| match c {
            0..=4 => Ok(-1.0),
            5..=9 => Ok(1.0),
            other => Err(Error::Format(format!("label {other} is not a class in 0..=9"))),
        })
        .collect()
}

/// Scales each nonzero row to unit norm.
pub fn to_unit_sphere(rows: &mut [Vec<f64>]) {
    for r in rows {
        normalize(r);
    }
}

/// `label,x_1,…,x_d`, one row per example.
pub fn dataset_csv(data: &Dataset) -> String {
    let mut out = String::from("label");
    for j in 1..=data.dim() {
        out.push_str(&format!(",x_{j}"));
    }
    out.push('\n');
    for (x, y) in data.inputs.iter().zip(&data.labels) {
        out.push_str(&y.to_string());
        for v in x {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}
