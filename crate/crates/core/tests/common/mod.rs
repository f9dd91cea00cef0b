//! Reference computations used as oracles by the integration tests. Nothing
//! here calls into the library's numerics except plain forward evaluation.
#![allow(dead_code)]

use wdlab::linalg::Matrix;
use wdlab::model::{predict, Architecture, Dataset, Params};

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| m[i][i] * m[i][i]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Singular values via Jacobi on the Gram matrix of the smaller side, descending.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let (r, c) = a.shape();
    let at = |i: usize, j: usize| a.as_slice()[i * c + j];
    let gram: Vec<Vec<f64>> = if r <= c {
        (0..r)
            .map(|i| (0..r).map(|j| (0..c).map(|k| at(i, k) * at(j, k)).sum()).collect())
            .collect()
    } else {
        (0..c)
            .map(|i| (0..c).map(|j| (0..r).map(|k| at(k, i) * at(k, j)).sum()).collect())
            .collect()
    };
    jacobi_eigenvalues(&gram).into_iter().map(|v| v.max(0.0).sqrt()).collect()
}

pub fn frobenius(a: &Matrix) -> f64 {
    a.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn perturbed(params: &Params, idx: usize, delta: f64) -> Params {
    let mut p = params.clone();
    let mut seen = 0;
    for block in p.blocks_mut() {
        if idx < seen + block.len() {
            block[idx - seen] += delta;
            break;
        }
        seen += block.len();
    }
    p
}

/// Central differences of `f` over every parameter entry, flattened in block order.
pub fn fd_grad(params: &Params, h: f64, f: impl Fn(&Params) -> f64) -> Vec<f64> {
    (0..params.len())
        .map(|i| (f(&perturbed(params, i, h)) - f(&perturbed(params, i, -h))) / (2.0 * h))
        .collect()
}

pub fn logistic(z: f64) -> f64 {
    // ln(1 + e^{-z}) = max(-z, 0) + ln(1 + e^{-|z|})
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `(1/n) Σ ln(1 + e^{−y f(x)}) + (λ/2)‖θ‖²` evaluated directly.
pub fn reg_loss(params: &Params, arch: &Architecture, data: &Dataset, lambda: f64) -> f64 {
    let n = data.len() as f64;
    let loss: f64 = data
        .inputs
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| logistic(y * predict(params, arch, x)))
        .sum::<f64>()
        / n;
    let mut sq: f64 = params.weights.iter().map(|w| w.as_slice().iter().map(|v| v * v).sum::<f64>()).sum();
    if !arch.fixed_head {
        sq += params.head.iter().map(|v| v * v).sum::<f64>();
    }
    loss + 0.5 * lambda * sq
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    diff / scale
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Hand-assembled safetensors file: F64 `a` (2×2), F32 `b` (3), F16 `c` (2×1),
/// BF16 `d` (1×2), plus an I32 tensor `skip` that readers must skip.
/// Returns the bytes and the expected `(name, dtype, shape, values)` in offset order.
pub fn safetensors_fixture() -> (Vec<u8>, Vec<(&'static str, &'static str, Vec<usize>, Vec<f64>)>) {
    let mut buf = Vec::new();
    for v in [1.0f64, -2.5, 0.125, 1e-300] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in [0.25f32, -7.0, 3.5] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    // f16: 1.5 = 0x3E00, -0.5 = 0xB800
    buf.extend_from_slice(&[0x00, 0x3E, 0x00, 0xB8]);
    // bf16: -2.0 = 0xC000, 0.75 = 0x3F40
    buf.extend_from_slice(&[0x00, 0xC0, 0x40, 0x3F]);
    buf.extend_from_slice(&42i32.to_le_bytes());
    let header = r#"{"__metadata__":{"format":"pt"},"b":{"dtype":"F32","shape":[3],"data_offsets":[32,44]},"a":{"dtype":"F64","shape":[2,2],"data_offsets":[0,32]},"c":{"dtype":"F16","shape":[2,1],"data_offsets":[44,48]},"d":{"dtype":"BF16","shape":[1,2],"data_offsets":[48,52]},"skip":{"dtype":"I32","shape":[1],"data_offsets":[52,56]}}"#;
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&buf);
    let expected = vec![
        ("a", "F64", vec![2, 2], vec![1.0, -2.5, 0.125, 1e-300]),
        ("b", "F32", vec![3], vec![0.25, -7.0, 3.5]),
        ("c", "F16", vec![2, 1], vec![1.5, -0.5]),
        ("d", "BF16", vec![1, 2], vec![-2.0, 0.75]),
    ];
    (out, expected)
}
