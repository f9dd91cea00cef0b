//! Stationary-point diagnostics: alignment residual, norm preservation,
//! rank-1 structure of deep linear layers, the pseudo-rank lower bound, the
//! per-layer Euler identity and the zero-solution scan for large weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, stable_rank, top2_singular_values};
use crate::model::{self, logistic_pair, output_grad, predict, Architecture, Dataset, Params};

/// `‖λθ + ∇L(θ)‖` over the trainable parameters.
pub fn alignment_residual(params: &Params, arch: &Architecture, data: &Dataset, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::invalid("alignment residual needs lambda > 0"));
    }
    Ok(model::regularized_loss_and_grad(params, arch, data, lambda)?.grad.norm())
}

/// `B² = −(1/n) Σ ℓ'(y_i f(x_i)) y_i f(x_i)`.
pub fn b_squared(params: &Params, arch: &Architecture, data: &Dataset) -> f64 {
    let n = data.len() as f64;
    data.inputs
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| {
            let margin = y * predict(params, arch, x);
            -logistic_pair(margin).1 * margin
        })
        .sum::<f64>()
        / n
}

/// `Z = Σ_{k=1}^K H^{K−k}`.
pub fn z_factor(arch: &Architecture) -> f64 {
    (1..=arch.depth()).map(|k| arch.layer_factor(k)).sum()
}

/// Harmonic-mean weights `(H^{K−k})^{3/2} / Z`, `k = 1 … K`.
pub fn pseudo_rank_weights(arch: &Architecture) -> Vec<f64> {
    let z = z_factor(arch);
    (1..=arch.depth()).map(|k| arch.layer_factor(k).powf(1.5) / z).collect()
}

/// `C_{H,K} = (Σ_k (H^{K−k})^{3/2} / Z)²`.
pub fn c_hk(arch: &Architecture) -> f64 {
    pseudo_rank_weights(arch).iter().sum::<f64>().powi(2)
}

fn layer_fro_sq(params: &Params, k: usize) -> f64 {
    match params.weights.get(k) {
        Some(w) => w.fro_norm_sq(),
        None => norm(&params.head).powi(2),
    }
}

/// Indices (0-based) of the layers that are trained.
fn trainable_layers(arch: &Architecture) -> std::ops::Range<usize> {
    let k = arch.depth();
    0..if arch.fixed_head { k - 1 } else { k }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormLayer {
    pub layer: usize,
    pub fro_sq: f64,
    /// `H^{K−k} B² / λ`
    pub predicted_fro_sq: f64,
    /// `|λ‖W_k‖² − H^{K−k} B²| / max(λ‖W_k‖², ε_mach)`
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormPreservation {
    pub b_squared: f64,
    pub layers: Vec<NormLayer>,
}

impl NormPreservation {
    pub fn max_residual(&self) -> f64 {
        self.layers.iter().map(|l| l.residual).fold(0.0, f64::max)
    }

    /// Largest relative spread of the Frobenius norms across layers.
    pub fn fro_spread(&self) -> f64 {
        let norms: Vec<f64> = self.layers.iter().map(|l| l.fro_sq.sqrt()).collect();
        let hi = norms.iter().copied().fold(f64::MIN, f64::max);
        let lo = norms.iter().copied().fold(f64::MAX, f64::min);
        (hi - lo) / hi
    }
}

pub fn norm_preservation_report(
    params: &Params,
    arch: &Architecture,
    data: &Dataset,
    lambda: f64,
) -> Result<NormPreservation> {
    if !(lambda > 0.0) {
        return Err(Error::invalid("norm preservation needs lambda > 0"));
    }
    params.check(arch)?;
    if params.trainable_norm_sq(arch) == 0.0 {
        return Err(Error::Degenerate("parameters are zero".into()));
    }
    let b2 = b_squared(params, arch, data);
    let layers = trainable_layers(arch)
        .map(|k| {
            let fro_sq = layer_fro_sq(params, k);
            let factor = arch.layer_factor(k + 1);
            let lhs = lambda * fro_sq;
            NormLayer {
                layer: k + 1,
                fro_sq,
                predicted_fro_sq: factor * b2 / lambda,
                residual: (lhs - factor * b2).abs() / lhs.max(f64::EPSILON),
            }
        })
        .collect();
    Ok(NormPreservation { b_squared: b2, layers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoRank {
    pub weights: Vec<f64>,
    /// `‖W_k‖₂ / ‖W_k‖_F` (1 for the head vector).
    pub inverse_sranks: Vec<f64>,
    pub z: f64,
    pub lemma3_lhs: f64,
    pub lemma3_rhs: f64,
    pub lemma3_slack: f64,
    pub pseudo_rank: f64,
    pub corollary_rhs: Option<f64>,
    pub corollary_slack: Option<f64>,
}

impl PseudoRank {
    pub fn holds(&self) -> bool {
        self.lemma3_slack >= 0.0
    }
}

/// Both sides of `Σ_k w_k ‖W_k‖₂/‖W_k‖_F ≥ √λ L(θ)^{−(1/4 + 1/(2Z))}`, and the
/// reference bound `√(λ / (L(θ₀) + λ‖θ₀‖²))` when `theta0` is given.
pub fn pseudo_rank_report(
    params: &Params,
    arch: &Architecture,
    data: &Dataset,
    lambda: f64,
    theta0: Option<&Params>,
) -> Result<PseudoRank> {
    if arch.depth() < 2 {
        return Err(Error::invalid("pseudo-rank needs depth K >= 2"));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid("pseudo-rank bound needs lambda > 0"));
    }
    params.check(arch)?;
    let mut inverse_sranks = Vec::with_capacity(arch.depth());
    for (k, w) in params.weights.iter().enumerate() {
        let s = stable_rank(w).map_err(|_| Error::Degenerate(format!("layer {} is zero", k + 1)))?;
        inverse_sranks.push(1.0 / s.srank);
    }
    if norm(&params.head) == 0.0 {
        return Err(Error::Degenerate("head is zero".into()));
    }
    inverse_sranks.push(1.0);
    let weights = pseudo_rank_weights(arch);
    let z = z_factor(arch);
    let lhs: f64 = weights.iter().zip(&inverse_sranks).map(|(w, r)| w * r).sum();
    let loss = model::empirical_loss(params, arch, data);
    let rhs = lambda.sqrt() * loss.powf(-(0.25 + 0.5 / z));
    let corollary_rhs = theta0
        .map(|t0| -> Result<f64> {
            t0.check(arch)?;
            let l0 = model::empirical_loss(t0, arch, data);
            Ok((lambda / (l0 + lambda * t0.trainable_norm_sq(arch))).sqrt())
        })
        .transpose()?;
    Ok(PseudoRank {
        weights,
        inverse_sranks,
        z,
        lemma3_lhs: lhs,
        lemma3_rhs: rhs,
        lemma3_slack: lhs - rhs,
        pseudo_rank: 1.0 / lhs,
        corollary_rhs,
        corollary_slack: corollary_rhs.map(|c| lhs - c),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rank1Check {
    /// `σ₂/σ₁` per matrix layer (0 for an all-zero layer).
    pub ratios: Vec<f64>,
    pub threshold: f64,
}

impl Rank1Check {
    pub const DEFAULT_THRESHOLD: f64 = 1e-4;

    pub fn passes(&self) -> bool {
        self.ratios.iter().all(|&r| r <= self.threshold)
    }
}

pub fn rank1_check(params: &Params, threshold: f64) -> Result<Rank1Check> {
    if params.weights.is_empty() {
        return Err(Error::invalid("rank-1 check needs at least one matrix layer"));
    }
    let ratios = params
        .weights
        .iter()
        .map(|w| {
            let (s1, s2) = top2_singular_values(w)?;
            Ok(if s1 == 0.0 { 0.0 } else { s2 / s1 })
        })
        .collect::<Result<_>>()?;
    Ok(Rank1Check { ratios, threshold })
}

/// `|tr(∇_{W_k} f · W_kᵀ) − H^{K−k} f(x)| / max(|f(x)|, 1e−12)` for every
/// trainable layer. Fails with [`Error::Kink`] when a pre-activation is exactly 0.
pub fn euler_identity_check(params: &Params, arch: &Architecture, x: &[f64]) -> Result<Vec<f64>> {
    let pass = model::forward(params, arch, x)?;
    if !arch.activation.is_linear() {
        for (layer, z) in pass.pre_activations.iter().enumerate() {
            if let Some(unit) = z.iter().position(|&v| v == 0.0) {
                return Err(Error::Kink { layer: layer + 1, unit });
            }
        }
    }
    let (f, grad) = output_grad(params, arch, x)?;
    let scale = f.abs().max(1e-12);
    Ok(trainable_layers(arch)
        .map(|k| {
            let trace = match (grad.weights.get(k), params.weights.get(k)) {
                (Some(g), Some(w)) => g.inner(w),
                _ => crate::linalg::dot(&grad.head, &params.head),
            };
            (trace - arch.layer_factor(k + 1) * f).abs() / scale
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub fro: f64,
    pub spec: f64,
    pub srank: f64,
}

/// Everything measured at a candidate stationary point. Fields that are undefined
/// at the given point (zero layers, `K = 1`) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub lambda: f64,
    /// `‖λθ + ∇L(θ)‖` with the ReLU derivative taken as 0 at the kink.
    pub residual: f64,
    /// Min-norm generalized-gradient residual reported by the polisher, when the
    /// point came from one.
    pub generalized_residual: Option<f64>,
    pub loss: f64,
    pub reg_loss: f64,
    pub theta_norm: f64,
    pub layers: Vec<LayerStats>,
    pub b_squared: f64,
    pub lemma2_residuals: Option<Vec<f64>>,
    pub z: f64,
    pub lemma3_lhs: Option<f64>,
    pub lemma3_rhs: Option<f64>,
    pub pseudo_rank: Option<f64>,
    pub corollary_rhs: Option<f64>,
    pub rank1_ratios: Option<Vec<f64>>,
}

impl StationarityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    /// One row per layer; point-level quantities repeat on every row.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(
            "layer,fro_norm,spec_norm,stable_rank,lemma2_residual,rank1_ratio,lambda,residual,loss,reg_loss,b_squared,z,lemma3_lhs,lemma3_rhs,pseudo_rank,corollary_rhs\n",
        );
        for (i, l) in self.layers.iter().enumerate() {
            let l2 = self.lemma2_residuals.as_ref().and_then(|v| v.get(i).copied());
            let r1 = self.rank1_ratios.as_ref().and_then(|v| v.get(i).copied());
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                l.layer,
                l.fro,
                l.spec,
                l.srank,
                opt(l2),
                opt(r1),
                self.lambda,
                self.residual,
                self.loss,
                self.reg_loss,
                self.b_squared,
                self.z,
                opt(self.lemma3_lhs),
                opt(self.lemma3_rhs),
                opt(self.pseudo_rank),
                opt(self.corollary_rhs),
            ));
        }
        out
    }
}

pub fn stationarity_report(
    params: &Params,
    arch: &Architecture,
    data: &Dataset,
    lambda: f64,
    theta0: Option<&Params>,
) -> Result<StationarityReport> {
    let lg = model::regularized_loss_and_grad(params, arch, data, lambda)?;
    if !(lambda > 0.0) {
        return Err(Error::invalid("stationarity report needs lambda > 0"));
    }
    let mut layers: Vec<LayerStats> = params
        .weights
        .iter()
        .enumerate()
        .map(|(k, w)| match stable_rank(w) {
            Ok(s) => LayerStats {
                layer: k + 1,
                fro: s.fro,
                spec: s.spec,
                srank: s.srank,
            },
            Err(_) => LayerStats {
                layer: k + 1,
                fro: 0.0,
                spec: 0.0,
                srank: f64::NAN,
            },
        })
        .collect();
    let head_norm = norm(&params.head);
    layers.push(LayerStats {
        layer: arch.depth(),
        fro: head_norm,
        spec: head_norm,
        srank: if head_norm > 0.0 { 1.0 } else { f64::NAN },
    });
    let lemma2 = norm_preservation_report(params, arch, data, lambda).ok();
    let pr = pseudo_rank_report(params, arch, data, lambda, theta0).ok();
    let rank1 = if arch.activation.is_linear() && !params.weights.is_empty() {
        Some(rank1_check(params, Rank1Check::DEFAULT_THRESHOLD)?.ratios)
    } else {
        None
    };
    Ok(StationarityReport {
        lambda,
        residual: lg.grad.norm(),
        generalized_residual: None,
        loss: lg.loss,
        reg_loss: lg.reg_loss,
        theta_norm: params.trainable_norm_sq(arch).sqrt(),
        layers,
        b_squared: b_squared(params, arch, data),
        lemma2_residuals: lemma2.map(|r| r.layers.iter().map(|l| l.residual).collect()),
        z: z_factor(arch),
        lemma3_lhs: pr.as_ref().map(|p| p.lemma3_lhs),
        lemma3_rhs: pr.as_ref().map(|p| p.lemma3_rhs),
        pseudo_rank: pr.as_ref().map(|p| p.pseudo_rank),
        corollary_rhs: pr.and_then(|p| p.corollary_rhs),
        rank1_ratios: rank1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroSolutionStatus {
    Applicable,
    /// With `K = 1` the penalised loss has no zero-solution regime.
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroSolution {
    pub status: ZeroSolutionStatus,
    /// Whether `g_−'(r) = 0` has a root `r > 0`.
    pub nonzero_critical_point: bool,
    /// Positive roots of `g_−'` found on the scan grid, refined by bisection.
    pub critical_radii: Vec<f64>,
    /// Largest λ for which a nonzero critical point exists.
    pub threshold_estimate: f64,
    pub c_hk: f64,
}

fn aggregation_const(k: usize) -> f64 {
    (k as f64).powf(-(k as f64) / 2.0)
}

/// Derivative of `g_−(r) = (λ/2) r² + ln(1 + exp(−c r^K))`, `c = K^{−K/2}`.
pub fn g_minus_slope(r: f64, lambda: f64, depth: usize) -> f64 {
    let c = aggregation_const(depth);
    let k = depth as f64;
    let u = c * r.powi(depth as i32);
    lambda * r - k * c * r.powi(depth as i32 - 1) * logistic_sigmoid_neg(u)
}

/// Derivative of `g_+(r) = (λ/2) r² + ln(1 + exp(c r^K))`.
pub fn g_plus_slope(r: f64, lambda: f64, depth: usize) -> f64 {
    let c = aggregation_const(depth);
    let k = depth as f64;
    let u = c * r.powi(depth as i32);
    lambda * r + k * c * r.powi(depth as i32 - 1) * logistic_sigmoid_neg(-u)
}

/// `1 / (1 + e^u)`.
fn logistic_sigmoid_neg(u: f64) -> f64 {
    -logistic_pair(u).1
}

const SCAN_POINTS: usize = 4000;

/// Positive roots of `g_−'` on a log grid over `(r_max·1e−8, r_max]`, `r_max = √(10K/λ)`.
fn scan_roots(lambda: f64, depth: usize) -> Vec<f64> {
    let r_max = (10.0 * depth as f64 / lambda).sqrt();
    let lo = r_max * 1e-8;
    let ratio = (r_max / lo).ln() / (SCAN_POINTS - 1) as f64;
    let grid = |i: usize| lo * (ratio * i as f64).exp();
    let slope = |r: f64| g_minus_slope(r, lambda, depth);
    let mut roots = Vec::new();
    let mut prev = (grid(0), slope(grid(0)));
    for i in 1..SCAN_POINTS {
        let r = grid(i);
        let s = slope(r);
        if s == 0.0 || (prev.1 < 0.0) != (s < 0.0) {
            let (mut a, mut b) = (prev.0, r);
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if (slope(mid) < 0.0) == (prev.1 < 0.0) {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            roots.push(0.5 * (a + b));
        }
        prev = (r, s);
    }
    roots
}

/// Scans the radial proxy `g_−` for nonzero critical points and estimates by
/// bisection in λ the threshold above which only `θ = 0` survives.
pub fn zero_solution_diagnostic(lambda: f64, depth: usize, degree: u32) -> Result<ZeroSolution> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda must be positive"));
    }
    if depth == 0 {
        return Err(Error::invalid("depth must be at least 1"));
    }
    if degree != 1 {
        return Err(Error::Unsupported("the radial proxy is defined for H = 1".into()));
    }
    let c = {
        let arch = Architecture {
            input_dim: 1,
            widths: vec![1; depth - 1],
            activation: model::Activation::Identity,
            fixed_head: false,
        };
        c_hk(&arch)
    };
    if depth == 1 {
        return Ok(ZeroSolution {
            status: ZeroSolutionStatus::NotApplicable,
            nonzero_critical_point: true,
            critical_radii: Vec::new(),
            threshold_estimate: f64::INFINITY,
            c_hk: c,
        });
    }
    let roots = scan_roots(lambda, depth);
    Ok(ZeroSolution {
        status: ZeroSolutionStatus::Applicable,
        nonzero_critical_point: !roots.is_empty(),
        critical_radii: roots,
        threshold_estimate: root_threshold(depth),
        c_hk: c,
    })
}

/// `g_−'(r) = r (λ − φ(r))` with `φ(r) = K c r^{K−2} / (1 + e^{c r^K})`, so a
/// root `r > 0` exists iff `λ < sup_r φ(r)`. The sup is located on a log grid
/// and refined by golden-section search in `ln r`.
fn root_threshold(depth: usize) -> f64 {
    let c = aggregation_const(depth);
    let k = depth as f64;
    let phi = |ln_r: f64| {
        let r = ln_r.exp();
        k * c * r.powi(depth as i32 - 2) * logistic_sigmoid_neg(c * r.powi(depth as i32))
    };
    let (lo, hi) = ((1e-8f64).ln(), (1e3f64).ln());
    let step = (hi - lo) / (SCAN_POINTS - 1) as f64;
    let best = (0..SCAN_POINTS)
        .max_by(|&a, &b| phi(lo + step * a as f64).total_cmp(&phi(lo + step * b as f64)))
        .expect("nonempty grid");
    let (mut a, mut b) = (lo + step * (best as f64 - 1.0), lo + step * (best as f64 + 1.0));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let (x1, x2) = (b - g * (b - a), a + g * (b - a));
        if phi(x1) < phi(x2) {
            a = x1;
        } else {
            b = x2;
        }
    }
    phi(0.5 * (a + b)).max(phi(lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::model::Activation;

    #[test]
    fn h1_weights_are_uniform() {
        let arch = Architecture::new(3, vec![4, 4, 4], Activation::Relu).unwrap();
        let w = pseudo_rank_weights(&arch);
        assert!(w.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(z_factor(&arch), 4.0);
        assert!((c_hk(&arch) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn powered_relu_factors() {
        let arch = Architecture::new(3, vec![4, 4], Activation::ReluPower { degree: 2 }).unwrap();
        assert_eq!(z_factor(&arch), 7.0);
        let w = pseudo_rank_weights(&arch);
        assert!((w[0] - 8.0 / 7.0).abs() < 1e-15);
        assert!(w[0] > w[1] && w[1] > w[2]);
    }

    #[test]
    fn lemma3_rhs_plugin() {
        // λ = 0.01, L = 1, K = 3 → √λ = 0.1. A single example with margin 0 has
        // loss ln 2, so check the exponent separately.
        let arch = Architecture::new(2, vec![2, 2], Activation::Identity).unwrap();
        let z = z_factor(&arch);
        assert!((0.01f64.sqrt() * 1.0f64.powf(-(0.25 + 0.5 / z)) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rank1_of_outer_products() {
        let p = Params {
            weights: vec![Matrix::outer(&[1.0, 2.0, -1.0], &[0.5, 0.5])],
            head: vec![1.0, 0.0, 0.0],
        };
        let r = rank1_check(&p, Rank1Check::DEFAULT_THRESHOLD).unwrap();
        assert!(r.ratios[0] <= 1e-12);
        assert!(r.passes());
        let mut scaled = p.clone();
        scaled.scale(7.5);
        let r2 = rank1_check(&scaled, 1e-4).unwrap();
        assert!((r.ratios[0] - r2.ratios[0]).abs() <= 1e-12);
    }

    #[test]
    fn kink_is_reported() {
        let arch = Architecture::new(2, vec![2], Activation::Relu).unwrap();
        let p = Params {
            weights: vec![Matrix::from_rows(&[vec![1.0, -1.0], vec![1.0, 1.0]]).unwrap()],
            head: vec![1.0, 1.0],
        };
        assert!(matches!(
            euler_identity_check(&p, &arch, &[0.5, 0.5]),
            Err(Error::Kink { layer: 1, unit: 0 })
        ));
    }

    #[test]
    fn zero_params_are_degenerate() {
        let arch = Architecture::new(2, vec![2], Activation::Identity).unwrap();
        let data = Dataset::new(vec![vec![1.0, 0.0]], vec![1.0]).unwrap();
        let p = Params::zeros(&arch);
        assert!(matches!(
            norm_preservation_report(&p, &arch, &data, 0.1),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            pseudo_rank_report(&p, &arch, &data, 0.1, None),
            Err(Error::Degenerate(_))
        ));
        let report = stationarity_report(&p, &arch, &data, 0.1, None).unwrap();
        assert_eq!(report.residual, 0.0);
        assert!(report.lemma3_lhs.is_none());
    }

    #[test]
    fn zero_solution_regimes() {
        let small = zero_solution_diagnostic(1e-6, 3, 1).unwrap();
        assert!(small.nonzero_critical_point);
        let large = zero_solution_diagnostic(1e3, 3, 1).unwrap();
        assert!(!large.nonzero_critical_point);
        assert!(large.critical_radii.is_empty());
        let k1 = zero_solution_diagnostic(0.5, 1, 1).unwrap();
        assert_eq!(k1.status, ZeroSolutionStatus::NotApplicable);
    }

    #[test]
    fn depth_two_threshold_is_one_half() {
        // g_−'(r) = r (λ − 1/(1 + e^{r²/2})): roots exist iff λ < 1/2.
        let d = zero_solution_diagnostic(0.1, 2, 1).unwrap();
        assert!((d.threshold_estimate - 0.5).abs() < 1e-3);
        assert!(d.nonzero_critical_point);
    }

    #[test]
    fn g_plus_has_no_critical_points() {
        for &l in &[1e-6, 1e-2, 1.0] {
            for i in 1..1000 {
                assert!(g_plus_slope(i as f64 * 0.01, l, 3) > 0.0);
            }
        }
    }
}
