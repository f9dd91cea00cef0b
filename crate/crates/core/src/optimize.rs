//! Gradient descent with weight decay, Armijo polishing to a stationary point,
//! fixed-step RK4 gradient flow, and initialisers.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, stable_rank, Matrix};
use crate::model::{
    self, accumulate_data_grad, accumulate_output_grad_with, check_data, empirical_loss, forward_unchecked,
    logistic_pair, Activation, Architecture, Dataset, LossGrad, Params,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Init {
    /// Entries `N(0, 2 / (fan_in + fan_out))`.
    Xavier,
    ScaledGaussian { sigma: f64 },
    Zeros,
    BalancedRank1 { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    pub lambda: f64,
    /// Full-batch steps, or epochs when `batch_size` is set.
    pub steps: usize,
    pub seed: u64,
    /// Defaults to `max(steps / 200, 1)`.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    pub init: Init,
    /// Minibatch size for shuffled single-pass SGD epochs; `None` is full-batch GD.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::invalid("checkpoint_every must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn cadence(&self) -> usize {
        self.checkpoint_every.unwrap_or((self.steps / 200).max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum State {
    Params(Params),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Step (GD/SGD) or time (gradient flow).
    pub at: f64,
    pub state: State,
    pub loss: f64,
    pub reg_loss: f64,
    /// `‖∇L_λ‖` for parameter states, `‖ẇ‖` for end-to-end states.
    pub residual: f64,
    /// Stable rank of each matrix layer (NaN for an all-zero layer).
    pub sranks: Vec<f64>,
    pub balance_defect: Option<f64>,
    /// `(K-1) ∫ ‖w‖^{1-1/K} |⟨∇L¹(w), w⟩|` up to `at` (linear networks under gradient flow).
    pub integral: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub checkpoints: Vec<Checkpoint>,
}

impl Trajectory {
    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    pub fn final_params(&self) -> Option<&Params> {
        match &self.last()?.state {
            State::Params(p) => Some(p),
            State::Vector(_) => None,
        }
    }

    fn push(&mut self, c: Checkpoint) {
        debug_assert!(self.checkpoints.last().is_none_or(|p| p.at < c.at));
        self.checkpoints.push(c);
    }

    pub const CSV_FIXED_COLUMNS: [&'static str; 6] =
        ["step_or_time", "L", "L_lambda", "residual", "balance_defect", "gf_integral"];

    /// `step_or_time,L,L_lambda,residual,balance_defect,gf_integral,srank_1,…`;
    /// absent values are empty cells.
    pub fn to_csv(&self) -> Result<String> {
        let first = self
            .checkpoints
            .first()
            .ok_or_else(|| Error::invalid("trajectory is empty"))?;
        let mut out = Self::CSV_FIXED_COLUMNS.join(",");
        for k in 1..=first.sranks.len() {
            out.push_str(&format!(",srank_{k}"));
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.checkpoints {
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                c.at,
                c.loss,
                c.reg_loss,
                c.residual,
                opt(c.balance_defect),
                opt(c.integral)
            ));
            for s in &c.sranks {
                out.push_str(&format!(",{s}"));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

fn xavier_matrix(r: &mut rng::StreamRng, rows: usize, cols: usize) -> Matrix {
    let sd = (2.0 / (rows + cols) as f64).sqrt();
    let data = rng::gaussian_vec(r, rows * cols).into_iter().map(|v| v * sd).collect();
    Matrix::new(rows, cols, data).expect("finite gaussian draws")
}

pub fn init_params(arch: &Architecture, init: Init, seed: u64) -> Result<Params> {
    arch.validate()?;
    let mut params = match init {
        Init::BalancedRank1 { scale } => return balanced_rank1_init(arch, scale, seed),
        Init::Zeros => Params::zeros(arch),
        Init::Xavier => {
            let mut r = rng::stream(seed, "init-xavier");
            let weights = arch
                .layer_shapes()
                .into_iter()
                .map(|(a, b)| xavier_matrix(&mut r, a, b))
                .collect();
            let head = xavier_matrix(&mut r, 1, arch.head_dim()).into_vec();
            Params { weights, head }
        }
        Init::ScaledGaussian { sigma } => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::invalid("sigma must be non-negative"));
            }
            let mut r = rng::stream(seed, "init-gaussian");
            let mut p = Params::zeros(arch);
            for b in p.blocks_mut() {
                b.iter_mut().for_each(|v| *v = sigma * rng::gaussian(&mut r));
            }
            p
        }
    };
    if arch.fixed_head {
        params.head = model::shallow_head(arch.head_dim(), seed);
    }
    Ok(params)
}

/// `W_k = s u_{k+1} u_kᵀ`, `w_K = s u_K` with random unit `u_k`; exactly balanced,
/// end-to-end vector `s^K u_1`.
pub fn balanced_rank1_init(arch: &Architecture, scale: f64, seed: u64) -> Result<Params> {
    if !arch.activation.is_linear() {
        return Err(Error::Unsupported("balanced init is defined for deep linear networks".into()));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid("balanced init scale must be positive"));
    }
    arch.validate()?;
    let mut r = rng::stream(seed, "init-balanced");
    let mut dims = vec![arch.input_dim];
    dims.extend(&arch.widths);
    let dirs: Vec<Vec<f64>> = dims.iter().map(|&n| rng::unit_vector(&mut r, n)).collect();
    let weights = (0..arch.widths.len())
        .map(|k| {
            let mut w = Matrix::outer(&dirs[k + 1], &dirs[k]);
            w.scale(scale);
            w
        })
        .collect();
    let head = dirs.last().expect("at least u_1").iter().map(|v| scale * v).collect();
    Ok(Params { weights, head })
}

/// `max_k ‖W_{k+1}ᵀ W_{k+1} − W_k W_kᵀ‖_F` with `W_K = w_Kᵀ`.
pub fn balance_defect(params: &Params) -> f64 {
    let head_row = Matrix::new(1, params.head.len(), params.head.clone());
    let mut layers: Vec<&Matrix> = params.weights.iter().collect();
    let head_row = match head_row {
        Ok(h) => h,
        Err(_) => return f64::NAN,
    };
    layers.push(&head_row);
    layers
        .windows(2)
        .map(|pair| {
            let upper = pair[1].transpose().matmul(pair[1]).expect("chained shapes");
            let lower = pair[0].matmul(&pair[0].transpose()).expect("chained shapes");
            let mut diff = upper;
            diff.add_scaled(-1.0, &lower);
            diff.fro_norm()
        })
        .fold(0.0, f64::max)
}

fn layer_sranks(params: &Params) -> Vec<f64> {
    params
        .weights
        .iter()
        .map(|w| stable_rank(w).map_or(f64::NAN, |s| s.srank))
        .collect()
}

fn params_checkpoint(at: f64, params: &Params, arch: &Architecture, loss: f64, lambda: f64, residual: f64) -> Checkpoint {
    Checkpoint {
        at,
        state: State::Params(params.clone()),
        loss,
        reg_loss: loss + 0.5 * lambda * params.trainable_norm_sq(arch),
        residual,
        sranks: layer_sranks(params),
        balance_defect: arch.activation.is_linear().then(|| balance_defect(params)),
        integral: None,
    }
}

/// `θ ← (1 − ηλ) θ − η g` on the trainable blocks.
fn decayed_step(params: &mut Params, arch: &Architecture, eta: f64, lambda: f64, data_grad: &Params) {
    let decay = 1.0 - eta * lambda;
    for (w, g) in params.weights.iter_mut().zip(&data_grad.weights) {
        w.scale(decay);
        w.add_scaled(-eta, g);
    }
    if !arch.fixed_head {
        for (w, g) in params.head.iter_mut().zip(&data_grad.head) {
            *w = decay * *w - eta * g;
        }
    }
}

fn grad_residual(params: &Params, arch: &Architecture, lambda: f64, data_grad: &Params) -> f64 {
    let mut g = data_grad.clone();
    for (gw, w) in g.weights.iter_mut().zip(&params.weights) {
        gw.add_scaled(lambda, w);
    }
    if !arch.fixed_head {
        crate::linalg::axpy(lambda, &params.head, &mut g.head);
    }
    g.norm()
}

/// One full-batch step `θ ← (1 − ηλ) θ − η ∇L(θ)` in place; returns `L(θ)` before
/// the step. `scratch` must have the shape of `params`.
pub fn gd_step(
    params: &mut Params,
    arch: &Architecture,
    data: &Dataset,
    eta: f64,
    lambda: f64,
    scratch: &mut Params,
) -> f64 {
    let n = data.len();
    scratch.fill_zero();
    let loss = accumulate_data_grad(params, arch, data, 0..n, n as f64, scratch) / n as f64;
    decayed_step(params, arch, eta, lambda, scratch);
    loss
}

pub fn gd_train(params0: &Params, arch: &Architecture, data: &Dataset, cfg: &TrainConfig) -> Result<Trajectory> {
    gd_train_observed(params0, arch, data, cfg, |_, _| {})
}

/// [`gd_train`] that also hands every iterate (step 0 included) to `observer`.
pub fn gd_train_observed(
    params0: &Params,
    arch: &Architecture,
    data: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(usize, &Params),
) -> Result<Trajectory> {
    cfg.validate()?;
    params0.check(arch)?;
    check_data(arch, data)?;
    let n = data.len();
    let every = cfg.cadence();
    let mut params = params0.clone();
    let mut traj = Trajectory::default();
    let mut data_grad = Params::zeros(arch);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = rng::stream(cfg.seed, "sgd-shuffle");

    let diverged = |at: usize, traj: &Trajectory| Error::Divergence {
        at: at as f64,
        last: traj.last().cloned().map(Box::new),
    };

    for step in 0..=cfg.steps {
        observer(step, &params);
        let record = step % every == 0 || step == cfg.steps;
        let full_batch = cfg.batch_size.is_none() || record;
        let mut loss = f64::NAN;
        if full_batch {
            data_grad.fill_zero();
            loss = accumulate_data_grad(&params, arch, data, 0..n, n as f64, &mut data_grad) / n as f64;
            if !loss.is_finite() || !params.is_finite() {
                return Err(diverged(step, &traj));
            }
        }
        if record {
            let residual = grad_residual(&params, arch, cfg.lambda, &data_grad);
            traj.push(params_checkpoint(step as f64, &params, arch, loss, cfg.lambda, residual));
        }
        if step == cfg.steps {
            break;
        }
        match cfg.batch_size {
            None => decayed_step(&mut params, arch, cfg.eta, cfg.lambda, &data_grad),
            Some(b) => {
                order.shuffle(&mut shuffle);
                for batch in order.chunks(b) {
                    data_grad.fill_zero();
                    accumulate_data_grad(
                        &params,
                        arch,
                        data,
                        batch.iter().copied(),
                        batch.len() as f64,
                        &mut data_grad,
                    );
                    decayed_step(&mut params, arch, cfg.eta, cfg.lambda, &data_grad);
                }
                if !params.is_finite() {
                    return Err(diverged(step + 1, &traj));
                }
            }
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolishOptions {
    pub max_iters: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    pub shrink: f64,
    pub initial_step: f64,
    /// ReLU pre-activations with `|z| ≤ kink_tol` are treated as sitting on the kink.
    pub kink_tol: f64,
    /// Initial width of the kink band used while descending; it shrinks to the
    /// current residual and never below `kink_tol`.
    pub kink_width: f64,
}

impl Default for PolishOptions {
    fn default() -> Self {
        Self {
            max_iters: 500_000,
            armijo_c: 1e-4,
            shrink: 0.5,
            initial_step: 1.0,
            kink_tol: 1e-9,
            kink_width: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polished {
    pub params: Params,
    /// Norm of the min-norm generalized gradient of `L_λ` at the returned point.
    /// Equals `‖∇L_λ(θ)‖` when no ReLU pre-activation sits on its kink.
    pub residual: f64,
    pub reg_loss: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Kinked (example, unit) pairs at the returned point.
    pub kinks: usize,
}

/// Min-norm element of the local generalized gradient of `L_λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedGrad {
    pub loss: f64,
    pub reg_loss: f64,
    pub grad: Params,
    pub kinks: usize,
}

impl From<LossGrad> for GeneralizedGrad {
    fn from(lg: LossGrad) -> Self {
        Self {
            loss: lg.loss,
            reg_loss: lg.reg_loss,
            grad: lg.grad,
            kinks: 0,
        }
    }
}

/// Largest number of kinked entries of one example whose activation patterns
/// are enumerated jointly; beyond it each entry is relaxed on its own, which
/// can miss cross-layer products.
const MAX_JOINT_KINKS: usize = 6;

/// For ReLU nets, every pre-activation with `|z| ≤ kink_tol` may switch either
/// way. Each example contributes the convex hull of its gradients over all
/// on/off patterns of its kinked entries; the returned gradient is the min-norm
/// element of `λθ` plus the sum of those hulls. Other activations fall through
/// to [`model::regularized_loss_and_grad`].
pub fn generalized_grad(
    params: &Params,
    arch: &Architecture,
    data: &Dataset,
    lambda: f64,
    kink_tol: f64,
) -> Result<GeneralizedGrad> {
    if arch.activation != Activation::Relu {
        return model::regularized_loss_and_grad(params, arch, data, lambda).map(Into::into);
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid("weight decay must be non-negative"));
    }
    params.check(arch)?;
    check_data(arch, data)?;
    let n = data.len() as f64;
    let mut grad = Params::zeros(arch);
    // Each block lists the corners of one hull as offsets from the all-off
    // pattern; the all-off corner itself is the implicit zero offset.
    let mut blocks: Vec<Vec<Params>> = Vec::new();
    let mut loss = 0.0;
    let mut kinks = 0;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let pass = forward_unchecked(params, arch, x);
        let (l, slope) = logistic_pair(y * pass.output);
        loss += l;
        let coef = slope * y / n;
        let entries: Vec<(usize, usize)> = pass
            .pre_activations
            .iter()
            .enumerate()
            .flat_map(|(k, zs)| zs.iter().enumerate().filter(|(_, z)| z.abs() <= kink_tol).map(move |(j, _)| (k, j)))
            .collect();
        kinks += entries.len();
        let pattern_grad = |on: &dyn Fn(usize) -> bool| {
            let mut g = Params::zeros(arch);
            accumulate_output_grad_with(params, arch, &pass, coef, &mut g, |k, j, z| {
                match entries.iter().position(|&e| e == (k, j)) {
                    Some(idx) => f64::from(u8::from(on(idx))),
                    None => arch.activation.derivative(z),
                }
            });
            if arch.fixed_head {
                g.head.fill(0.0);
            }
            g
        };
        let base = pattern_grad(&|_| false);
        // Switching entries of one layer changes the gradient additively, so
        // patterns only need joint enumeration when kinks span several layers.
        let one_layer = entries.windows(2).all(|w| w[0].0 == w[1].0);
        if !one_layer && entries.len() <= MAX_JOINT_KINKS {
            if !entries.is_empty() {
                let corners = (1u32..1 << entries.len())
                    .map(|mask| {
                        let mut g = pattern_grad(&|idx| mask >> idx & 1 == 1);
                        g.add_scaled(-1.0, &base);
                        g
                    })
                    .collect();
                blocks.push(corners);
            }
        } else {
            for e in 0..entries.len() {
                let mut g = pattern_grad(&|idx| idx == e);
                g.add_scaled(-1.0, &base);
                blocks.push(vec![g]);
            }
        }
        grad.add_scaled(1.0, &base);
    }
    let loss = loss / n;
    for (g, w) in grad.weights.iter_mut().zip(&params.weights) {
        g.add_scaled(lambda, w);
    }
    if !arch.fixed_head {
        crate::linalg::axpy(lambda, &params.head, &mut grad.head);
    }
    min_norm_over_hulls(&mut grad, &blocks);
    Ok(GeneralizedGrad {
        loss,
        reg_loss: loss + 0.5 * lambda * params.trainable_norm_sq(arch),
        grad,
        kinks,
    })
}

/// Euclidean projection of `v` onto `{β ≥ 0, Σβ ≤ 1}`.
fn project_capped_simplex(v: &mut [f64]) {
    v.iter_mut().for_each(|b| *b = b.max(0.0));
    if v.iter().sum::<f64>() <= 1.0 {
        return;
    }
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut shift = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        acc += s;
        let t = (acc - 1.0) / (i + 1) as f64;
        if s - t > 0.0 {
            shift = t;
        }
    }
    v.iter_mut().for_each(|b| *b = (*b - shift).max(0.0));
}

/// Minimises `‖r + Σ_b Σ_c β_{b,c} u_{b,c}‖²` with every block's weights in
/// `{β ≥ 0, Σβ ≤ 1}` by accelerated projected gradient on the Gram matrix;
/// `r` is replaced by the minimiser.
fn min_norm_over_hulls(r: &mut Params, blocks: &[Vec<Params>]) {
    let cols: Vec<&Params> = blocks.iter().flatten().collect();
    let m = cols.len();
    if m == 0 {
        return;
    }
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let v = cols[i].dot(cols[j]);
            gram[i * m + j] = v;
            gram[j * m + i] = v;
        }
    }
    let lin: Vec<f64> = cols.iter().map(|u| u.dot(r)).collect();
    let r0_sq = r.norm_sq();
    // Gershgorin bound on the largest eigenvalue.
    let lip = (0..m)
        .map(|i| gram[i * m..(i + 1) * m].iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    if lip == 0.0 {
        return;
    }
    let grad_at = |beta: &[f64]| -> Vec<f64> {
        (0..m).map(|i| lin[i] + dot(&gram[i * m..(i + 1) * m], beta)).collect()
    };
    // ‖r‖² is dropped: with g = Qβ + lin the objective is ½βᵀ(g + lin).
    let objective = |beta: &[f64], g: &[f64]| -> f64 {
        beta.iter().zip(g.iter().zip(&lin)).map(|(b, (g, l))| 0.5 * b * (g + l)).sum()
    };
    let project = |beta: &mut [f64]| {
        let mut at = 0;
        for b in blocks {
            project_capped_simplex(&mut beta[at..at + b.len()]);
            at += b.len();
        }
    };
    let mut beta = vec![0.0; m];
    let mut look = beta.clone();
    let mut t = 1.0f64;
    let mut best = (0.0, beta.clone(), lin.clone());
    for _ in 0..20_000 {
        let g = grad_at(&look);
        let mut next: Vec<f64> = look.iter().zip(&g).map(|(b, g)| b - g / lip).collect();
        project(&mut next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        let step: f64 = next.iter().zip(&beta).map(|(a, b)| (a - b) * (a - b)).sum();
        look = next.iter().zip(&beta).map(|(a, b)| a + momentum * (a - b)).collect();
        beta = next;
        t = t_next;
        let g_beta = grad_at(&beta);
        let f = objective(&beta, &g_beta);
        if f < best.0 {
            best = (f, beta.clone(), g_beta);
        } else {
            // Restart the momentum when the objective stalls.
            look = best.1.clone();
            beta = best.1.clone();
            t = 1.0;
        }
        // Frank-Wolfe gap: every hull point u then has ⟨u, r⟩ ≥ ‖r‖² − gap.
        let (f, bb, g) = (&best.0, &best.1, &best.2);
        let mut gap: f64 = bb.iter().zip(g).map(|(b, g)| b * g).sum();
        let mut at = 0;
        for b in blocks {
            gap -= g[at..at + b.len()].iter().copied().fold(0.0, f64::min);
            at += b.len();
        }
        if gap <= 1e-3 * (r0_sq + 2.0 * f) || step <= 1e-30 {
            break;
        }
    }
    for (b, u) in best.1.iter().zip(cols) {
        if *b != 0.0 {
            r.add_scaled(*b, u);
        }
    }
}

/// Gradient descent with Armijo backtracking on `L_λ` until
/// `‖∇L_λ(θ)‖ ≤ tol · max(1, ‖θ‖)` or the iteration cap.
pub fn polish_to_stationary(
    params: &Params,
    arch: &Architecture,
    data: &Dataset,
    lambda: f64,
    tol: f64,
    opts: &PolishOptions,
) -> Result<Polished> {
    if !(lambda > 0.0) || !(tol > 0.0) {
        return Err(Error::invalid("polishing needs lambda > 0 and tol > 0"));
    }
    let reg_loss = |p: &Params| empirical_loss(p, arch, data) + 0.5 * lambda * p.trainable_norm_sq(arch);
    // The active kink set shrinks with the residual so that the line search is
    // not blocked by entries a step would push across their kink.
    let grad_at = |p: &Params, eps: f64| generalized_grad(p, arch, data, lambda, eps.max(opts.kink_tol));
    let mut theta = params.clone();
    let mut eps = opts.kink_width;
    let mut narrowed = false;
    let mut last_step = opts.initial_step;
    let mut lg = grad_at(&theta, eps)?;
    let mut iterations = 0;
    loop {
        let gnorm = lg.grad.norm();
        if gnorm <= tol * theta.trainable_norm_sq(arch).sqrt().max(1.0) {
            return Ok(Polished {
                params: theta,
                residual: gnorm,
                reg_loss: lg.reg_loss,
                converged: true,
                iterations,
                kinks: lg.kinks,
            });
        }
        if iterations >= opts.max_iters {
            break;
        }
        let target = opts.kink_width.min(gnorm).max(opts.kink_tol);
        if eps != target && !narrowed {
            eps = target;
            lg = grad_at(&theta, eps)?;
        }
        narrowed = false;
        let gnorm = lg.grad.norm();
        let g2 = gnorm * gnorm;
        let mut step = (last_step * 4.0).min(opts.initial_step);
        let accepted = loop {
            let mut trial = theta.clone();
            trial.add_scaled(-step, &lg.grad);
            let f = reg_loss(&trial);
            let required = opts.armijo_c * step * g2;
            if required > 8.0 * f64::EPSILON * lg.reg_loss.abs() {
                if f <= lg.reg_loss - required {
                    last_step = step;
                    break Some((trial, None));
                }
            } else if f <= lg.reg_loss {
                // Below the floating-point resolution of L_λ the decrease test is
                // vacuous; require the gradient to shrink instead.
                let next = grad_at(&trial, eps)?;
                if next.grad.norm() < gnorm {
                    last_step = step;
                    break Some((trial, Some(next)));
                }
            }
            step *= opts.shrink;
            if step < 1e-30 {
                break None;
            }
        };
        let Some((next, next_lg)) = accepted else {
            // The band may hold entries whose kink a step cannot reach; narrow it.
            if eps > opts.kink_tol {
                eps = (eps * 0.1).max(opts.kink_tol);
                lg = grad_at(&theta, eps)?;
                narrowed = true;
                continue;
            }
            break;
        };
        lg = match next_lg {
            Some(g) => g,
            None => grad_at(&next, eps)?,
        };
        theta = next;
        iterations += 1;
    }
    Ok(Polished {
        residual: lg.grad.norm(),
        reg_loss: lg.reg_loss,
        params: theta,
        converged: false,
        iterations,
        kinks: lg.kinks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GfMode {
    PerLayer,
    EndToEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GfConfig {
    pub lambda: f64,
    /// RK4 step.
    pub h: f64,
    /// Horizon `T`.
    pub horizon: f64,
    pub mode: GfMode,
    /// Record a checkpoint every this many RK4 steps.
    pub record_every: usize,
}

impl GfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !(self.horizon > 0.0) {
            return Err(Error::invalid("gradient flow needs h > 0 and T > 0"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every must be positive"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.h).round() as usize
    }
}

/// `L¹(w)` and `∇L¹(w)` for the linear predictor `⟨w, x⟩`.
pub fn linear_loss_grad(w: &[f64], data: &Dataset) -> (f64, Vec<f64>) {
    let n = data.len() as f64;
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let (l, s) = logistic_pair(y * dot(w, x));
        loss += l;
        crate::linalg::axpy(s * y / n, x, &mut grad);
    }
    (loss / n, grad)
}

/// Integrand `(K-1) ‖w‖^{1-1/K} |⟨∇L¹(w), w⟩|`.
fn integral_rate(w: &[f64], grad: &[f64], depth: usize) -> f64 {
    let k = depth as f64;
    (k - 1.0) * norm(w).powf(1.0 - 1.0 / k) * dot(grad, w).abs()
}

/// Right-hand side of the end-to-end dynamics induced by balanced per-layer
/// gradient flow on a depth-`K` linear network:
/// `ẇ = −λK w − ‖w‖^{2−2/K} ∇L¹(w) − (K−1) ‖w‖^{−2/K} ⟨∇L¹(w), w⟩ w`.
pub fn end_to_end_velocity(w: &[f64], data: &Dataset, depth: usize, lambda: f64) -> Vec<f64> {
    let k = depth as f64;
    let (_, grad) = linear_loss_grad(w, data);
    let r2 = dot(w, w);
    if r2 == 0.0 {
        return vec![0.0; w.len()];
    }
    let radial = r2.powf(1.0 - 1.0 / k);
    let along = (k - 1.0) * r2.powf(-1.0 / k) * dot(&grad, w);
    w.iter()
        .zip(&grad)
        .map(|(&wi, &gi)| -(lambda * k + along) * wi - radial * gi)
        .collect()
}

/// Upper bound `√((K−1)(1+λK) L¹(w(0)) t)` on the accumulated integral.
pub fn integral_bound(depth: usize, lambda: f64, initial_loss: f64, t: f64) -> f64 {
    let k = depth as f64;
    ((k - 1.0) * (1.0 + lambda * k) * initial_loss * t).sqrt()
}

fn rk4_step(y: &[f64], h: f64, f: &dyn Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let shifted = |base: &[f64], k: &[f64], c: f64| -> Vec<f64> {
        base.iter().zip(k).map(|(b, ki)| b + c * ki).collect()
    };
    let k1 = f(y);
    let k2 = f(&shifted(y, &k1, 0.5 * h));
    let k3 = f(&shifted(y, &k2, 0.5 * h));
    let k4 = f(&shifted(y, &k3, h));
    y.iter()
        .enumerate()
        .map(|(i, yi)| yi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

fn unflatten(flat: &[f64], like: &Params) -> Params {
    let mut p = like.clone();
    let mut offset = 0;
    for b in p.blocks_mut() {
        b.copy_from_slice(&flat[offset..offset + b.len()]);
        offset += b.len();
    }
    p
}

/// Fixed-step RK4 gradient flow. `start` must be a parameter state for
/// [`GfMode::PerLayer`] and an end-to-end vector for [`GfMode::EndToEnd`]
/// (which assumes identity activations). The integral of
/// [`Checkpoint::integral`] is integrated as an extra ODE component.
pub fn gf_integrate(start: &State, arch: &Architecture, data: &Dataset, cfg: &GfConfig) -> Result<Trajectory> {
    cfg.validate()?;
    arch.validate()?;
    check_data(arch, data)?;
    let depth = arch.depth();
    let linear = arch.activation.is_linear();
    let lambda = cfg.lambda;

    let (template, mut y) = match (cfg.mode, start) {
        (GfMode::PerLayer, State::Params(p)) => {
            p.check(arch)?;
            let mut y = p.to_flat();
            y.push(0.0);
            (Some(p.clone()), y)
        }
        (GfMode::EndToEnd, State::Vector(w)) => {
            if !linear {
                return Err(Error::Unsupported("end-to-end flow needs identity activations".into()));
            }
            if w.len() != arch.input_dim {
                return Err(Error::invalid("end-to-end vector has the wrong dimension"));
            }
            let mut y = w.clone();
            y.push(0.0);
            (None, y)
        }
        _ => return Err(Error::invalid("gradient-flow start state does not match mode")),
    };

    let rhs = |y: &[f64]| -> Vec<f64> {
        let (state, _) = y.split_at(y.len() - 1);
        match &template {
            Some(like) => {
                let p = unflatten(state, like);
                let lg = model::regularized_loss_and_grad(&p, arch, data, lambda).expect("validated shapes");
                let mut dy: Vec<f64> = lg.grad.to_flat().into_iter().map(|g| -g).collect();
                let rate = if linear {
                    let w = model::end_to_end_vector(&p, arch).expect("linear");
                    let (_, g) = linear_loss_grad(&w, data);
                    integral_rate(&w, &g, depth)
                } else {
                    0.0
                };
                dy.push(rate);
                dy
            }
            None => {
                let mut dy = end_to_end_velocity(state, data, depth, lambda);
                let (_, g) = linear_loss_grad(state, data);
                dy.push(integral_rate(state, &g, depth));
                dy
            }
        }
    };

    let checkpoint = |t: f64, y: &[f64]| -> Checkpoint {
        let (state, integral) = (&y[..y.len() - 1], y[y.len() - 1]);
        match &template {
            Some(like) => {
                let p = unflatten(state, like);
                let lg = model::regularized_loss_and_grad(&p, arch, data, lambda).expect("validated shapes");
                let mut c = params_checkpoint(t, &p, arch, lg.loss, lambda, lg.grad.norm());
                c.integral = linear.then_some(integral);
                c
            }
            None => {
                let (loss, _) = linear_loss_grad(state, data);
                let k = depth as f64;
                Checkpoint {
                    at: t,
                    state: State::Vector(state.to_vec()),
                    loss,
                    reg_loss: loss + 0.5 * lambda * k * dot(state, state).powf(1.0 / k),
                    residual: norm(&end_to_end_velocity(state, data, depth, lambda)),
                    sranks: Vec::new(),
                    balance_defect: None,
                    integral: Some(integral),
                }
            }
        }
    };

    let steps = cfg.steps();
    let mut traj = Trajectory::default();
    traj.push(checkpoint(0.0, &y));
    for s in 1..=steps {
        y = rk4_step(&y, cfg.h, &rhs);
        let t = s as f64 * cfg.h;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                at: t,
                last: traj.last().cloned().map(Box::new),
            });
        }
        if s % cfg.record_every == 0 || s == steps {
            traj.push(checkpoint(t, &y));
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Dataset};

    fn linear_arch(d: usize, widths: Vec<usize>) -> Architecture {
        Architecture::new(d, widths, Activation::Identity).unwrap()
    }

    fn toy_data(seed: u64, d: usize, n: usize) -> Dataset {
        let mut r = rng::stream(seed, "toy");
        let inputs: Vec<Vec<f64>> = (0..n).map(|_| rng::unit_vector(&mut r, d)).collect();
        let labels = inputs.iter().map(|x| if x[0] + 0.3 * x[1] >= 0.0 { 1.0 } else { -1.0 }).collect();
        Dataset::new(inputs, labels).unwrap()
    }

    #[test]
    fn single_gd_step_by_hand() {
        // θ₀ = (0.5, -1), x = (0.6, 0.8), y = 1, η = 0.1, λ = 0.2.
        let arch = linear_arch(2, vec![]);
        let data = Dataset::new(vec![vec![0.6, 0.8]], vec![1.0]).unwrap();
        let p0 = Params {
            weights: vec![],
            head: vec![0.5, -1.0],
        };
        let cfg = TrainConfig {
            eta: 0.1,
            lambda: 0.2,
            steps: 1,
            seed: 0,
            checkpoint_every: None,
            init: Init::Zeros,
            batch_size: None,
        };
        let traj = gd_train(&p0, &arch, &data, &cfg).unwrap();
        let slope = -1.0 / (1.0 + (-0.5f64).exp());
        let expected = [0.98 * 0.5 - 0.1 * slope * 0.6, 0.98 * -1.0 - 0.1 * slope * 0.8];
        let got = &traj.final_params().unwrap().head;
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-15);
        }
        assert_eq!(traj.checkpoints.len(), 2);
    }

    #[test]
    fn zero_parameters_stay_zero() {
        let arch = Architecture::new(3, vec![4], Activation::Relu).unwrap();
        let data = toy_data(1, 3, 8);
        let cfg = TrainConfig {
            eta: 0.5,
            lambda: 0.1,
            steps: 50,
            seed: 0,
            checkpoint_every: Some(10),
            init: Init::Zeros,
            batch_size: None,
        };
        let traj = gd_train(&Params::zeros(&arch), &arch, &data, &cfg).unwrap();
        assert_eq!(traj.final_params().unwrap().norm(), 0.0);
        assert_eq!(traj.checkpoints.len(), 6);
    }

    #[test]
    fn convex_small_step_is_monotone() {
        let arch = linear_arch(4, vec![]);
        let data = toy_data(2, 4, 30);
        let cfg = TrainConfig {
            eta: 0.01,
            lambda: 0.05,
            steps: 400,
            seed: 0,
            checkpoint_every: Some(1),
            init: Init::Xavier,
            batch_size: None,
        };
        let p0 = init_params(&arch, cfg.init, 9).unwrap();
        let traj = gd_train(&p0, &arch, &data, &cfg).unwrap();
        for w in traj.checkpoints.windows(2) {
            assert!(w[1].reg_loss <= w[0].reg_loss);
        }
    }

    #[test]
    fn no_decay_is_plain_gd_bit_for_bit() {
        let arch = Architecture::new(3, vec![5], Activation::Relu).unwrap();
        let data = toy_data(3, 3, 10);
        let cfg = TrainConfig {
            eta: 0.3,
            lambda: 0.0,
            steps: 20,
            seed: 4,
            checkpoint_every: None,
            init: Init::Xavier,
            batch_size: None,
        };
        let p0 = init_params(&arch, cfg.init, cfg.seed).unwrap();
        let traj = gd_train(&p0, &arch, &data, &cfg).unwrap();
        let mut plain = p0.clone();
        for _ in 0..20 {
            let lg = model::regularized_loss_and_grad(&plain, &arch, &data, 0.0).unwrap();
            plain.add_scaled(-0.3, &lg.data_grad);
        }
        assert_eq!(traj.final_params().unwrap(), &plain);
    }

    #[test]
    fn divergence_carries_last_checkpoint() {
        let arch = Architecture::new(2, vec![2], Activation::ReluPower { degree: 3 }).unwrap();
        let data = Dataset::new(vec![vec![0.6, 0.8]], vec![-1.0]).unwrap();
        let cfg = TrainConfig {
            eta: 1e3,
            lambda: 1.0,
            steps: 200,
            seed: 0,
            checkpoint_every: Some(1),
            init: Init::ScaledGaussian { sigma: 3.0 },
            batch_size: None,
        };
        let p0 = init_params(&arch, cfg.init, 5).unwrap();
        match gd_train(&p0, &arch, &data, &cfg) {
            Err(Error::Divergence { last, .. }) => assert!(last.unwrap().loss.is_finite()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn sgd_is_deterministic() {
        let arch = Architecture::new(3, vec![4], Activation::Relu).unwrap();
        let data = toy_data(5, 3, 40);
        let cfg = TrainConfig {
            eta: 0.2,
            lambda: 1e-3,
            steps: 5,
            seed: 11,
            checkpoint_every: None,
            init: Init::Xavier,
            batch_size: Some(8),
        };
        let p0 = init_params(&arch, cfg.init, cfg.seed).unwrap();
        let a = gd_train(&p0, &arch, &data, &cfg).unwrap();
        let b = gd_train(&p0, &arch, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.last().unwrap().loss < a.checkpoints[0].loss);
    }

    #[test]
    fn balanced_init_properties() {
        let k1 = linear_arch(4, vec![]);
        let p = balanced_rank1_init(&k1, 0.7, 1).unwrap();
        assert!(p.weights.is_empty());
        assert!((norm(&p.head) - 0.7).abs() < 1e-15);

        let arch = linear_arch(5, vec![4, 3]);
        let p = balanced_rank1_init(&arch, 0.5, 2).unwrap();
        assert!(balance_defect(&p) <= 1e-15);
        let w = model::end_to_end_vector(&p, &arch).unwrap();
        let mut r = rng::stream(2, "init-balanced");
        let u1 = rng::unit_vector(&mut r, 5);
        for (a, b) in w.iter().zip(&u1) {
            assert!((a - 0.125 * b).abs() < 1e-12);
        }
        let relu = Architecture::new(5, vec![4], Activation::Relu).unwrap();
        assert!(matches!(balanced_rank1_init(&relu, 0.5, 2), Err(Error::Unsupported(_))));
    }

    #[test]
    fn already_stationary_point_is_returned_unchanged() {
        // K = 1, one example x with y = 1: stationarity is λθ = -ℓ'(⟨θ,x⟩) x.
        // With θ = c x and ‖x‖ = 1 this is λc = 1/(1+e^c); solve for c by bisection.
        let x = vec![0.6, 0.8];
        let lambda = 0.1;
        let (mut lo, mut hi) = (0.0f64, 10.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if lambda * mid - 1.0 / (1.0 + mid.exp()) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let c = 0.5 * (lo + hi);
        let arch = linear_arch(2, vec![]);
        let data = Dataset::new(vec![x.clone()], vec![1.0]).unwrap();
        let p = Params {
            weights: vec![],
            head: x.iter().map(|v| c * v).collect(),
        };
        let out = polish_to_stationary(&p, &arch, &data, lambda, 1e-10, &PolishOptions::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.params, p);
        assert!(out.residual <= 1e-10);
    }

    #[test]
    fn large_decay_polishes_to_zero() {
        let arch = linear_arch(3, vec![3, 3]);
        let data = toy_data(7, 3, 10);
        let p0 = init_params(&arch, Init::Xavier, 3).unwrap();
        let out = polish_to_stationary(&p0, &arch, &data, 50.0, 1e-10, &PolishOptions::default()).unwrap();
        assert!(out.converged);
        assert!(out.params.norm() <= 1e-6);
    }

    #[test]
    fn pure_decay_flow_is_exponential() {
        // A zero input contributes no data gradient.
        let arch = linear_arch(3, vec![2]);
        let data = Dataset::new(vec![vec![0.0; 3]], vec![1.0]).unwrap();
        let p0 = init_params(&arch, Init::Xavier, 1).unwrap();
        let cfg = GfConfig {
            lambda: 0.7,
            h: 1e-3,
            horizon: 1.0,
            mode: GfMode::PerLayer,
            record_every: 100,
        };
        let traj = gf_integrate(&State::Params(p0.clone()), &arch, &data, &cfg).unwrap();
        let last = traj.final_params().unwrap();
        let decay = (-0.7f64).exp();
        for (a, b) in last.to_flat().iter().zip(p0.to_flat()) {
            assert!((a - decay * b).abs() <= 1e-8);
        }
        assert_eq!(traj.checkpoints.len(), 11);
        assert!((traj.last().unwrap().at - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mode_and_start_must_agree() {
        let arch = linear_arch(3, vec![2]);
        let data = toy_data(1, 3, 4);
        let cfg = GfConfig {
            lambda: 0.1,
            h: 1e-2,
            horizon: 0.1,
            mode: GfMode::PerLayer,
            record_every: 1,
        };
        assert!(gf_integrate(&State::Vector(vec![0.1; 3]), &arch, &data, &cfg).is_err());
    }

    #[test]
    fn trajectory_csv_layout() {
        let arch = Architecture::new(3, vec![4, 2], Activation::Relu).unwrap();
        let data = toy_data(1, 3, 4);
        let cfg = TrainConfig {
            eta: 0.1,
            lambda: 0.01,
            steps: 4,
            seed: 0,
            checkpoint_every: Some(2),
            init: Init::Xavier,
            batch_size: None,
        };
        let p0 = init_params(&arch, cfg.init, 0).unwrap();
        let csv = gd_train(&p0, &arch, &data, &cfg).unwrap().to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step_or_time,L,L_lambda,residual,balance_defect,gf_integral,srank_1,srank_2"
        );
        assert_eq!(lines.count(), 3);
        assert!(Trajectory::default().to_csv().is_err());
    }
}
