//! Merging by parameter summation, cross-task similarity, measured merge gaps
//! and the closed-form gap bounds they are compared against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::{empirical_loss, predict, Architecture, Dataset, Params};

pub fn merge_params(a: &Params, b: &Params) -> Result<Params> {
    if !a.same_shape(b) {
        return Err(Error::invalid("cannot merge parameters of different shapes"));
    }
    let mut out = a.clone();
    out.add_scaled(1.0, b);
    Ok(out)
}

/// Like [`merge_params`], but a fixed head is shared rather than summed: both
/// networks must carry the same head, which the merged network keeps.
pub fn merge_for(arch: &Architecture, a: &Params, b: &Params) -> Result<Params> {
    let mut merged = merge_params(a, b)?;
    if arch.fixed_head {
        if a.head != b.head {
            return Err(Error::invalid("networks with a fixed head must share it to be merged"));
        }
        merged.head = a.head.clone();
    }
    Ok(merged)
}

/// `max_{i,j} |⟨x_i, x'_j⟩|`.
pub fn cross_task_epsilon(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::invalid("cross-task epsilon needs two nonempty input sets"));
    }
    let dim = xs[0].len();
    if xs.iter().chain(ys).any(|v| v.len() != dim) {
        return Err(Error::invalid("inputs have inconsistent dimensions"));
    }
    Ok(xs
        .iter()
        .flat_map(|x| ys.iter().map(move |y| dot(x, y).abs()))
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeGap {
    /// `|f_{θ+θ'}(x) − f_θ(x)|` per probe.
    pub per_probe: Vec<f64>,
    pub max_gap: f64,
    /// `L(θ+θ') − L(θ)` on the labelled probes.
    pub loss_gap: Option<f64>,
}

/// Gap between the merged model `θ + θ'` and the original `θ` on `probes`.
pub fn merge_gap_eval(
    theta: &Params,
    theta_other: &Params,
    arch: &Architecture,
    probes: &[Vec<f64>],
    labels: Option<&[f64]>,
) -> Result<MergeGap> {
    theta.check(arch)?;
    let merged = merge_for(arch, theta, theta_other)?;
    if probes.iter().any(|x| x.len() != arch.input_dim) {
        return Err(Error::invalid("probe dimension does not match the architecture"));
    }
    let per_probe: Vec<f64> = probes
        .iter()
        .map(|x| (predict(&merged, arch, x) - predict(theta, arch, x)).abs())
        .collect();
    let max_gap = per_probe.iter().copied().fold(0.0, f64::max);
    let loss_gap = match labels {
        None => None,
        Some(y) => {
            let data = Dataset::new(probes.to_vec(), y.to_vec())?;
            Some(empirical_loss(&merged, arch, &data) - empirical_loss(theta, arch, &data))
        }
    };
    Ok(MergeGap {
        per_probe,
        max_gap,
        loss_gap,
    })
}

/// Inputs to the merge-gap bounds. `t` counts GD steps for the discrete kinds and
/// is continuous time for `deep_linear`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MergeBoundInputs {
    /// `|⟨θ₀, x'⟩| (1−ηλ)^t + ε (1 − (1−ηλ)^t) / λ` for a linear predictor.
    Linear { eta: f64, lambda: f64, t: f64, eps: f64, init_term: f64 },
    /// `‖W₀ x'‖ (1−ηλ)^t + ε (1 − (1−ηλ)^t) / λ` for the shallow ReLU net.
    Shallow { eta: f64, lambda: f64, t: f64, eps: f64, init_term: f64 },
    /// `|f_{θ'(0)}(x)| A₁ e^{−λKt} + A₂ ε` under gradient flow from balanced init.
    /// `c` bounds the single-task loss along the flow.
    DeepLinear {
        lambda: f64,
        t: f64,
        eps: f64,
        init_term: f64,
        c: f64,
        w0_norm_sq: f64,
        depth: usize,
    },
    /// `L(θ_t) + (1/n) Σ ‖W_t' x_i‖`.
    LossTransfer { base_loss: f64, mean_hidden_norm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub bound: f64,
    pub decay_term: f64,
    pub eps_term: f64,
    pub a1: Option<f64>,
    pub a2: Option<f64>,
    pub b: Option<f64>,
}

fn nonneg(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite and non-negative")))
    }
}

fn discrete(eta: f64, lambda: f64, t: f64, eps: f64, init_term: f64) -> Result<BoundValue> {
    for (name, v) in [("eta", eta), ("t", t), ("eps", eps), ("init_term", init_term)] {
        nonneg(name, v)?;
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidRegime("the bound needs lambda > 0".into()));
    }
    if eta * lambda >= 1.0 {
        return Err(Error::InvalidRegime(format!("eta * lambda = {} >= 1", eta * lambda)));
    }
    let contraction = (t * (-eta * lambda).ln_1p()).exp();
    let decay_term = init_term * contraction;
    let eps_term = eps * (1.0 - contraction) / lambda;
    Ok(BoundValue {
        bound: decay_term + eps_term,
        decay_term,
        eps_term,
        a1: None,
        a2: None,
        b: None,
    })
}

/// `(B, ln A₁, A₂)` with `B = ‖w(0)‖² + C/λ`,
/// `A₁ = exp(B^{2−2/K} (K−1)(1+λK) C / (2λK))`,
/// `A₂ = 2 B^{2−2/K} C A₁ (1 − e^{−λKt/2}) / (λK)`.
pub fn deep_linear_constants(lambda: f64, c: f64, w0_norm_sq: f64, depth: usize, t: f64) -> (f64, f64, f64) {
    let k = depth as f64;
    let b = w0_norm_sq + c / lambda;
    let bp = b.powf(2.0 - 2.0 / k);
    let ln_a1 = bp * (k - 1.0) * (1.0 + lambda * k) * c / (2.0 * lambda * k);
    let a2 = 2.0 * bp * c * ln_a1.exp() * (-(-lambda * k * t / 2.0).exp_m1()) / (lambda * k);
    (b, ln_a1, a2)
}

pub fn bound_eval(inp: &MergeBoundInputs) -> Result<BoundValue> {
    match *inp {
        MergeBoundInputs::Linear {
            eta,
            lambda,
            t,
            eps,
            init_term,
        }
        | MergeBoundInputs::Shallow {
            eta,
            lambda,
            t,
            eps,
            init_term,
        } => discrete(eta, lambda, t, eps, init_term),
        MergeBoundInputs::DeepLinear {
            lambda,
            t,
            eps,
            init_term,
            c,
            w0_norm_sq,
            depth,
        } => {
            for (name, v) in [("t", t), ("eps", eps), ("init_term", init_term), ("c", c), ("w0_norm_sq", w0_norm_sq)] {
                nonneg(name, v)?;
            }
            if !(lambda > 0.0) {
                return Err(Error::InvalidRegime("the bound needs lambda > 0".into()));
            }
            if depth == 0 {
                return Err(Error::invalid("depth must be at least 1"));
            }
            let (b, ln_a1, a2) = deep_linear_constants(lambda, c, w0_norm_sq, depth, t);
            // Evaluated in log space: A₁ overflows long before A₁ e^{−λKt} does.
            let decay_term = if init_term == 0.0 {
                0.0
            } else {
                (init_term.ln() + ln_a1 - lambda * depth as f64 * t).exp()
            };
            let eps_term = if eps == 0.0 { 0.0 } else { a2 * eps };
            Ok(BoundValue {
                bound: decay_term + eps_term,
                decay_term,
                eps_term,
                a1: Some(ln_a1.exp()),
                a2: Some(a2),
                b: Some(b),
            })
        }
        MergeBoundInputs::LossTransfer {
            base_loss,
            mean_hidden_norm,
        } => {
            nonneg("base_loss", base_loss)?;
            nonneg("mean_hidden_norm", mean_hidden_norm)?;
            Ok(BoundValue {
                bound: base_loss + mean_hidden_norm,
                decay_term: 0.0,
                eps_term: mean_hidden_norm,
                a1: None,
                a2: None,
                b: None,
            })
        }
    }
}

/// One row of a gap/bound curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapBoundRow {
    pub step: f64,
    pub measured_gap: f64,
    pub bound: f64,
    pub decay_term: f64,
    pub eps_term: f64,
}

pub fn gap_bound_csv(rows: &[GapBoundRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("gap/bound curve is empty"));
    }
    let mut out = String::from("step,measured_gap,bound,decay_term,eps_term\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.measured_gap, r.bound, r.decay_term, r.eps_term
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::model::Activation;

    #[test]
    fn merge_identity_and_commutativity() {
        let a = Params {
            weights: vec![Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap()],
            head: vec![0.1],
        };
        let b = Params {
            weights: vec![Matrix::from_rows(&[vec![-0.3, 1e-17]]).unwrap()],
            head: vec![0.7],
        };
        let mut zero = a.clone();
        zero.fill_zero();
        assert_eq!(merge_params(&a, &zero).unwrap(), a);
        assert_eq!(merge_params(&a, &b).unwrap(), merge_params(&b, &a).unwrap());
        let c = Params {
            weights: vec![Matrix::zeros(2, 2)],
            head: vec![0.0, 0.0],
        };
        assert!(merge_params(&a, &c).is_err());
    }

    #[test]
    fn epsilon_cases() {
        let a = vec![vec![1.0, 0.0, 0.0]];
        let b = vec![vec![0.0, 0.6, 0.8]];
        assert_eq!(cross_task_epsilon(&a, &b).unwrap(), 0.0);
        assert_eq!(cross_task_epsilon(&b, &b).unwrap(), dot(&b[0], &b[0]));
        let c = vec![vec![1.0, 0.0]];
        let d = vec![vec![60f64.to_radians().cos(), 60f64.to_radians().sin()]];
        assert!((cross_task_epsilon(&c, &d).unwrap() - 0.5).abs() < 1e-15);
        assert!(cross_task_epsilon(&[], &d).is_err());
    }

    #[test]
    fn zero_other_gives_zero_gap() {
        let arch = Architecture::new(2, vec![3], Activation::Relu).unwrap();
        let p = crate::optimize::init_params(&arch, crate::optimize::Init::Xavier, 1).unwrap();
        let zero = Params::zeros(&arch);
        let g = merge_gap_eval(&p, &zero, &arch, &[vec![0.6, 0.8], vec![-1.0, 0.0]], Some(&[1.0, -1.0])).unwrap();
        assert_eq!(g.max_gap, 0.0);
        assert_eq!(g.loss_gap, Some(0.0));
    }

    #[test]
    fn shallow_closed_form() {
        let v = bound_eval(&MergeBoundInputs::Shallow {
            eta: 1.0,
            lambda: 1e-4,
            t: 1e5,
            eps: 0.0,
            init_term: 1.0,
        })
        .unwrap();
        // Repeated multiplication as the oracle; the value is ≈ 4.5377e−5.
        let oracle = (1.0f64 - 1e-4).powi(100_000);
        assert!((v.bound - oracle).abs() <= 1e-10 * oracle);
        assert!((v.bound - 4.5377e-5).abs() < 1e-9);
        assert_eq!(v.eps_term, 0.0);
    }

    #[test]
    fn regime_errors() {
        let bad = MergeBoundInputs::Linear {
            eta: 10.0,
            lambda: 0.1,
            t: 1.0,
            eps: 0.1,
            init_term: 1.0,
        };
        assert!(matches!(bound_eval(&bad), Err(Error::InvalidRegime(_))));
        let no_decay = MergeBoundInputs::Shallow {
            eta: 1.0,
            lambda: 0.0,
            t: 1.0,
            eps: 0.1,
            init_term: 1.0,
        };
        assert!(matches!(bound_eval(&no_decay), Err(Error::InvalidRegime(_))));
    }

    #[test]
    fn vanishing_inputs_vanish() {
        let deep = bound_eval(&MergeBoundInputs::DeepLinear {
            lambda: 0.1,
            t: 3.0,
            eps: 0.0,
            init_term: 0.0,
            c: 2f64.ln(),
            w0_norm_sq: 1.0,
            depth: 2,
        })
        .unwrap();
        assert_eq!(deep.bound, 0.0);
        assert!((deep.b.unwrap() - (1.0 + 2f64.ln() / 0.1)).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        assert!(gap_bound_csv(&[]).is_err());
        let csv = gap_bound_csv(&[GapBoundRow {
            step: 0.0,
            measured_gap: 0.5,
            bound: 1.0,
            decay_term: 1.0,
            eps_term: 0.0,
        }])
        .unwrap();
        assert_eq!(csv, "step,measured_gap,bound,decay_term,eps_term\n0,0.5,1,1,0\n");
    }
}
