//! Desk-scale experiments shared by the CLI and the test suites: the weight-decay
//! sweep of final low-rank structure, the shallow merging experiment with its
//! per-step bound checks, and deep-linear merging under gradient flow.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{gen_heldout, gen_task, Task, TaskSpec};
use crate::error::{Error, Result};
use crate::linalg::{norm, stable_rank};
use crate::merging::{bound_eval, cross_task_epsilon, merge_for, GapBoundRow, MergeBoundInputs};
use crate::model::{empirical_loss, predict, Activation, Architecture, Dataset, Params};
use crate::optimize::{
    balanced_rank1_init, gd_step, gd_train, gf_integrate, init_params, linear_loss_grad, GfConfig, GfMode, Init,
    State, TrainConfig,
};

/// Spearman rank correlation (average ranks for ties). `None` when either side
/// is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
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
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

/// `(1/K) Σ_k ‖W_k‖₂ / ‖W_k‖_F`, the head counting as a layer with ratio 1.
pub fn avg_inverse_stable_rank(params: &Params) -> Result<f64> {
    let mut total = 0.0;
    for (k, w) in params.weights.iter().enumerate() {
        let s = stable_rank(w).map_err(|_| Error::Degenerate(format!("layer {} is zero", k + 1)))?;
        total += 1.0 / s.srank;
    }
    if norm(&params.head) == 0.0 {
        return Err(Error::Degenerate("head is zero".into()));
    }
    Ok((total + 1.0) / (params.weights.len() + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    /// Fraction with `y f(x) ≤ 0`.
    pub classification_error: f64,
    /// Fraction with `y f(x) < 1`.
    pub margin_error: f64,
    pub avg_loss: f64,
}

pub fn fit_metrics(params: &Params, arch: &Architecture, data: &Dataset) -> FitMetrics {
    let n = data.len() as f64;
    let margins: Vec<f64> = data
        .inputs
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| y * predict(params, arch, x))
        .collect();
    FitMetrics {
        classification_error: margins.iter().filter(|&&m| m <= 0.0).count() as f64 / n,
        margin_error: margins.iter().filter(|&&m| m < 1.0).count() as f64 / n,
        avg_loss: empirical_loss(params, arch, data),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankSweepConfig {
    pub d: usize,
    pub n: usize,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub label_freq: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub init: Init,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for RankSweepConfig {
    fn default() -> Self {
        Self {
            d: 100,
            n: 1000,
            widths: vec![10, 10],
            activation: Activation::Relu,
            label_freq: 10.0,
            epochs: 5000,
            batch_size: 32,
            eta: 0.01,
            init: Init::Xavier,
            lambdas: vec![1e-4, 1e-3, 1e-2, 1e-1],
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub avg_inv_stable_rank: f64,
    pub classification_error: f64,
    pub margin_error: f64,
    pub avg_loss: f64,
}

impl RankSweepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.n == 0 {
            return Err(Error::invalid("epochs, batch_size and n must be positive"));
        }
        if self.lambdas.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("rank sweep needs at least one lambda and one seed"));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::invalid("every lambda must be finite and non-negative"));
        }
        self.architecture()?;
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(self.d, self.widths.clone(), self.activation)
    }

    pub fn task(&self, seed: u64) -> Result<Task> {
        let spec = TaskSpec {
            label_freq: self.label_freq,
            ..TaskSpec::on_range(self.d, self.n, 0..self.d, seed)
        };
        gen_task(&spec, "sweep")
    }
}

/// One `(λ, seed)` point: the data and initialisation depend on the seed only,
/// so every λ starts from the same network.
pub fn rank_sweep_point(cfg: &RankSweepConfig, lambda: f64, seed: u64) -> Result<RankSweepRow> {
    let arch = cfg.architecture()?;
    let task = cfg.task(seed)?;
    let train = TrainConfig {
        eta: cfg.eta,
        lambda,
        steps: cfg.epochs,
        seed,
        checkpoint_every: Some(cfg.epochs.max(1)),
        init: cfg.init,
        batch_size: Some(cfg.batch_size),
    };
    let p0 = init_params(&arch, train.init, seed)?;
    let traj = gd_train(&p0, &arch, &task.data, &train)?;
    let params = traj.final_params().expect("parameter trajectory");
    let m = fit_metrics(params, &arch, &task.data);
    Ok(RankSweepRow {
        lambda,
        seed,
        avg_inv_stable_rank: avg_inverse_stable_rank(params)?,
        classification_error: m.classification_error,
        margin_error: m.margin_error,
        avg_loss: m.avg_loss,
    })
}

/// All `(seed, λ)` points, seed-major, on `jobs` worker threads. Output order
/// does not depend on `jobs`.
pub fn rank_sweep(cfg: &RankSweepConfig, jobs: usize) -> Result<Vec<RankSweepRow>> {
    cfg.validate()?;
    let grid: Vec<(f64, u64)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.lambdas.iter().map(move |&l| (l, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        grid.par_iter()
            .map(|&(l, s)| rank_sweep_point(cfg, l, s))
            .collect()
    })
}

pub fn rank_sweep_csv(rows: &[RankSweepRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("rank sweep produced no rows"));
    }
    let mut out = String::from("lambda,seed,avg_inv_stable_rank,classification_error,margin_error,avg_loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.lambda, r.seed, r.avg_inv_stable_rank, r.classification_error, r.margin_error, r.avg_loss
        ));
    }
    Ok(out)
}

/// What the second network of the merging experiment is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeControl {
    /// A different task on the complementary coordinates (`ε = 0`).
    Orthogonal,
    /// Exactly the first network's training set.
    SameData,
    /// A different labeling of fresh inputs from the first task's distribution.
    SharedInputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeExperimentConfig {
    pub d: usize,
    /// Task a lives on coordinates `0..split`, task b on `split..d`.
    pub split: usize,
    pub n: usize,
    pub heldout: usize,
    pub width: usize,
    pub eta: f64,
    pub lambda: f64,
    pub steps: usize,
    pub seed: u64,
    pub label_freq: f64,
    pub checkpoint_every: usize,
    /// Start the second network at `W₀' = 0`.
    pub zero_init_other: bool,
    pub control: MergeControl,
    /// Steps used to fit the decay rate of the initial contribution.
    pub fit_window: usize,
}

impl Default for MergeExperimentConfig {
    fn default() -> Self {
        Self {
            d: 40,
            split: 20,
            n: 100,
            heldout: 1000,
            width: 64,
            eta: 0.5,
            lambda: 1e-3,
            steps: 20_000,
            seed: 0,
            label_freq: 1.0,
            checkpoint_every: 100,
            zero_init_other: false,
            control: MergeControl::Orthogonal,
            fit_window: 5000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeRow {
    pub step: usize,
    pub loss_task_a_model_a: f64,
    pub loss_task_a_merged: f64,
    pub loss_task_b_model_b: f64,
    pub loss_task_b_merged: f64,
}

impl MergeRow {
    pub fn gap_a(&self) -> f64 {
        self.loss_task_a_merged - self.loss_task_a_model_a
    }

    pub fn gap_b(&self) -> f64 {
        self.loss_task_b_merged - self.loss_task_b_model_b
    }
}

/// Stable rank of the hidden layer of each network at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrankRow {
    pub step: usize,
    pub srank_a: f64,
    pub srank_b: f64,
    pub srank_merged: f64,
}

pub fn srank_rows_csv(rows: &[SrankRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("no stable-rank rows to write"));
    }
    let mut out = String::from("step,srank_a_w1,srank_b_w1,srank_merged_w1\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.srank_a, r.srank_b, r.srank_merged));
    }
    Ok(out)
}

pub fn merge_rows_csv(rows: &[MergeRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("merging trajectory is empty"));
    }
    let mut out =
        String::from("step,loss_task_a_model_a,loss_task_a_merged,loss_task_b_model_b,loss_task_b_merged\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss_task_a_model_a, r.loss_task_a_merged, r.loss_task_b_model_b, r.loss_task_b_merged
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeOutcome {
    pub eps: f64,
    /// Training-set losses at every checkpoint.
    pub rows: Vec<MergeRow>,
    /// Held-out losses after the last step.
    pub heldout: MergeRow,
    /// Merged-vs-`A` prediction gap on task-a inputs against the hidden-norm bound.
    pub gap_rows: Vec<GapBoundRow>,
    /// `min_{t, x} (bound_x(t) − ‖W_t' x‖)` over every step and every task-a
    /// input; `None` when the bound is undefined (`λ = 0`).
    pub lemma4_min_slack: Option<f64>,
    /// `min_t (L_a(θ_t) + mean_x ‖W_t' x‖ − L_a(θ_t + θ_t'))` over checkpoints.
    pub loss_transfer_min_slack: f64,
    /// Largest `|f_merged(x) − f_a(x)|` over every step and task-a input.
    pub max_gap_a: f64,
    /// Largest `|f_merged(x) − f_b(x)|` over every step and task-b input.
    pub max_gap_b: f64,
    /// Least-squares slope of `ln max_x ‖W_t' x‖` over the fit window.
    pub decay_slope: Option<f64>,
    /// `ln(1 − ηλ)`
    pub expected_slope: f64,
    pub params_a: Params,
    pub params_b: Params,
    /// Hidden-layer stable ranks at every checkpoint; `NaN` while a layer is zero.
    pub sranks: Vec<SrankRow>,
}

fn hidden_norms(w: &crate::linalg::Matrix, xs: &[Vec<f64>]) -> Vec<f64> {
    xs.iter().map(|x| norm(&w.matvec(x))).collect()
}

fn max_abs_gap(merged: &Params, own: &Params, arch: &Architecture, xs: &[Vec<f64>]) -> f64 {
    xs.iter()
        .map(|x| (predict(merged, arch, x) - predict(own, arch, x)).abs())
        .fold(0.0, f64::max)
}

fn slope_fit(ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = ys
        .iter()
        .enumerate()
        .filter(|(_, &y)| y > 0.0)
        .map(|(t, &y)| (t as f64, y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    Some(sxy / sxx)
}

impl MergeExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.split == 0 || self.split >= self.d {
            return Err(Error::invalid("split must lie strictly between 0 and d"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint_every must be positive"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) || !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("need eta > 0 and lambda >= 0"));
        }
        if self.n == 0 || self.width == 0 || self.heldout == 0 {
            return Err(Error::invalid("n, width and heldout must be positive"));
        }
        Ok(())
    }

    pub fn specs(&self) -> (TaskSpec, TaskSpec) {
        let with_freq = |s: TaskSpec| TaskSpec {
            label_freq: self.label_freq,
            ..s
        };
        let a = with_freq(TaskSpec::on_range(self.d, self.n, 0..self.split, self.seed));
        let b = match self.control {
            MergeControl::Orthogonal => with_freq(TaskSpec::on_range(self.d, self.n, self.split..self.d, self.seed)),
            MergeControl::SameData | MergeControl::SharedInputs => a.clone(),
        };
        (a, b)
    }
}

/// Trains two shallow ReLU networks (shared fixed head) in lock step, one per
/// task, and measures the merged network against each original at every step.
pub fn merge_experiment(cfg: &MergeExperimentConfig) -> Result<MergeOutcome> {
    cfg.validate()?;
    let (spec_a, spec_b) = cfg.specs();
    let task_a = gen_task(&spec_a, "a")?;
    let task_b = match cfg.control {
        MergeControl::SameData => task_a.clone(),
        _ => gen_task(&spec_b, "b")?,
    };
    let (xa, xb) = (&task_a.data.inputs, &task_b.data.inputs);
    let eps = cross_task_epsilon(xa, xb)?;
    let arch = Architecture::shallow(cfg.d, cfg.width);

    let mut pa = init_params(&arch, Init::Xavier, cfg.seed)?;
    let mut pb = if cfg.zero_init_other {
        Params::zeros(&arch)
    } else {
        init_params(&arch, Init::Xavier, cfg.seed.wrapping_add(1))?
    };
    pb.head = pa.head.clone();

    let contraction = 1.0 - cfg.eta * cfg.lambda;
    let init_norms = hidden_norms(&pb.weights[0], xa);
    let init_max = init_norms.iter().copied().fold(0.0, f64::max);
    let bound_at = |init: f64, t: usize| {
        bound_eval(&MergeBoundInputs::Shallow {
            eta: cfg.eta,
            lambda: cfg.lambda,
            t: t as f64,
            eps,
            init_term: init,
        })
    };
    let bounds_defined = bound_at(0.0, 0).is_ok();

    let mut scratch_a = Params::zeros(&arch);
    let mut scratch_b = Params::zeros(&arch);
    let mut rows = Vec::new();
    let mut gap_rows = Vec::new();
    let mut lemma4_min = f64::INFINITY;
    let mut transfer_min = f64::INFINITY;
    let mut sranks = Vec::new();
    let mut max_gap_a: f64 = 0.0;
    let mut max_gap_b: f64 = 0.0;
    let mut decay_series = Vec::new();

    for step in 0..=cfg.steps {
        let merged = merge_for(&arch, &pa, &pb)?;
        let norms = hidden_norms(&pb.weights[0], xa);
        if bounds_defined {
            for (h, init) in norms.iter().zip(&init_norms) {
                lemma4_min = lemma4_min.min(bound_at(*init, step)?.bound - h);
            }
        }
        if step <= cfg.fit_window {
            decay_series.push(norms.iter().copied().fold(0.0, f64::max));
        }
        let gap_a = max_abs_gap(&merged, &pa, &arch, xa);
        max_gap_a = max_gap_a.max(gap_a);
        max_gap_b = max_gap_b.max(max_abs_gap(&merged, &pb, &arch, xb));

        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            let row = MergeRow {
                step,
                loss_task_a_model_a: empirical_loss(&pa, &arch, &task_a.data),
                loss_task_a_merged: empirical_loss(&merged, &arch, &task_a.data),
                loss_task_b_model_b: empirical_loss(&pb, &arch, &task_b.data),
                loss_task_b_merged: empirical_loss(&merged, &arch, &task_b.data),
            };
            let mean_hidden = norms.iter().sum::<f64>() / norms.len() as f64;
            transfer_min = transfer_min.min(row.loss_task_a_model_a + mean_hidden - row.loss_task_a_merged);
            if bounds_defined {
                let b = bound_at(init_max, step)?;
                gap_rows.push(GapBoundRow {
                    step: step as f64,
                    measured_gap: gap_a,
                    bound: b.bound,
                    decay_term: b.decay_term,
                    eps_term: b.eps_term,
                });
            }
            rows.push(row);
            let sr = |p: &Params| stable_rank(&p.weights[0]).map_or(f64::NAN, |s| s.srank);
            sranks.push(SrankRow {
                step,
                srank_a: sr(&pa),
                srank_b: sr(&pb),
                srank_merged: sr(&merged),
            });
        }
        if step == cfg.steps {
            break;
        }
        let la = gd_step(&mut pa, &arch, &task_a.data, cfg.eta, cfg.lambda, &mut scratch_a);
        let lb = gd_step(&mut pb, &arch, &task_b.data, cfg.eta, cfg.lambda, &mut scratch_b);
        if !la.is_finite() || !lb.is_finite() || !pa.is_finite() || !pb.is_finite() {
            return Err(Error::Divergence {
                at: step as f64,
                last: None,
            });
        }
    }

    let merged = merge_for(&arch, &pa, &pb)?;
    let held_a = gen_heldout(&spec_a, "a", &task_a, cfg.heldout)?;
    let held_b = match cfg.control {
        MergeControl::SameData => held_a.clone(),
        _ => gen_heldout(&spec_b, "b", &task_b, cfg.heldout)?,
    };
    let heldout = MergeRow {
        step: cfg.steps,
        loss_task_a_model_a: empirical_loss(&pa, &arch, &held_a),
        loss_task_a_merged: empirical_loss(&merged, &arch, &held_a),
        loss_task_b_model_b: empirical_loss(&pb, &arch, &held_b),
        loss_task_b_merged: empirical_loss(&merged, &arch, &held_b),
    };
    Ok(MergeOutcome {
        eps,
        rows,
        heldout,
        gap_rows,
        lemma4_min_slack: bounds_defined.then_some(lemma4_min),
        loss_transfer_min_slack: transfer_min,
        max_gap_a,
        max_gap_b,
        decay_slope: slope_fit(&decay_series),
        expected_slope: contraction.ln(),
        params_a: pa,
        params_b: pb,
        sranks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GfMergeConfig {
    pub d: usize,
    pub split: usize,
    pub n: usize,
    pub width: usize,
    pub depth: usize,
    pub scale: f64,
    pub lambda: f64,
    pub h: f64,
    pub horizon: f64,
    pub record_every: usize,
    pub seed: u64,
}

impl Default for GfMergeConfig {
    fn default() -> Self {
        Self {
            d: 8,
            split: 4,
            n: 10,
            width: 6,
            depth: 3,
            scale: 0.5,
            lambda: 0.1,
            h: 1e-3,
            horizon: 10.0,
            record_every: 100,
            seed: 0,
        }
    }
}

impl GfMergeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.split == 0 || self.split >= self.d {
            return Err(Error::invalid("split must lie strictly between 0 and d"));
        }
        if self.depth < 2 || self.width == 0 || self.n == 0 {
            return Err(Error::invalid("need depth >= 2, width > 0 and n > 0"));
        }
        if !(self.lambda > 0.0) || !(self.scale > 0.0) {
            return Err(Error::invalid("need lambda > 0 and scale > 0"));
        }
        if !(self.h > 0.0) || !(self.horizon > 0.0) || self.record_every == 0 {
            return Err(Error::invalid("need h > 0, horizon > 0 and record_every > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GfMergeOutcome {
    pub eps: f64,
    /// Merged-vs-`A` gap on task-a inputs with the bound for the largest init term.
    pub gap_rows: Vec<GapBoundRow>,
    /// `min_{t, x} (bound_x(t) − |f_{θ+θ'}(x) − f_θ(x)|)`.
    pub min_gap_slack: f64,
    /// `min_{t, x} (|⟨w'(0), x⟩| A₁ e^{−λKt} − |⟨w'(t), x⟩|)`.
    pub min_end_to_end_slack: f64,
    /// Loss bound used for the intruding network.
    pub c: f64,
    pub ln_a1: f64,
}

/// Two balanced deep linear networks trained by per-layer gradient flow on
/// disjoint-coordinate tasks, merged by summing every layer.
pub fn gf_merge_experiment(cfg: &GfMergeConfig) -> Result<GfMergeOutcome> {
    cfg.validate()?;
    let spec_a = TaskSpec::on_range(cfg.d, cfg.n, 0..cfg.split, cfg.seed);
    let spec_b = TaskSpec::on_range(cfg.d, cfg.n, cfg.split..cfg.d, cfg.seed);
    let task_a = gen_task(&spec_a, "a")?;
    let task_b = gen_task(&spec_b, "b")?;
    let eps = cross_task_epsilon(&task_a.data.inputs, &task_b.data.inputs)?;
    let arch = Architecture::new(cfg.d, vec![cfg.width; cfg.depth - 1], Activation::Identity)?;
    let pa = balanced_rank1_init(&arch, cfg.scale, cfg.seed)?;
    let pb = balanced_rank1_init(&arch, cfg.scale, cfg.seed.wrapping_add(1))?;
    let gf = GfConfig {
        lambda: cfg.lambda,
        h: cfg.h,
        horizon: cfg.horizon,
        mode: GfMode::PerLayer,
        record_every: cfg.record_every,
    };
    let ta = gf_integrate(&State::Params(pa), &arch, &task_a.data, &gf)?;
    let tb = gf_integrate(&State::Params(pb.clone()), &arch, &task_b.data, &gf)?;

    let wb0 = crate::model::end_to_end_vector(&pb, &arch)?;
    let c = tb
        .checkpoints
        .iter()
        .map(|ck| match &ck.state {
            State::Params(p) => crate::model::end_to_end_vector(p, &arch).map(|w| linear_loss_grad(&w, &task_b.data).0),
            State::Vector(_) => unreachable!("per-layer flow"),
        })
        .try_fold(0.0f64, |m, l| l.map(|l| m.max(l)))?;
    let w0_norm_sq = crate::linalg::dot(&wb0, &wb0);
    let xs = &task_a.data.inputs;
    let init_terms: Vec<f64> = xs.iter().map(|x| crate::linalg::dot(&wb0, x).abs()).collect();
    let init_max = init_terms.iter().copied().fold(0.0, f64::max);
    let bound_at = |init: f64, t: f64| {
        bound_eval(&MergeBoundInputs::DeepLinear {
            lambda: cfg.lambda,
            t,
            eps,
            init_term: init,
            c,
            w0_norm_sq,
            depth: cfg.depth,
        })
    };
    let ln_a1 = crate::merging::deep_linear_constants(cfg.lambda, c, w0_norm_sq, cfg.depth, 0.0).1;

    let mut gap_rows = Vec::new();
    let mut min_gap_slack = f64::INFINITY;
    let mut min_e2e_slack = f64::INFINITY;
    for (ca, cb) in ta.checkpoints.iter().zip(&tb.checkpoints) {
        let (State::Params(a), State::Params(b)) = (&ca.state, &cb.state) else {
            unreachable!("per-layer flow")
        };
        let t = ca.at;
        let merged = merge_for(&arch, a, b)?;
        let wb = crate::model::end_to_end_vector(b, &arch)?;
        let mut gap_max: f64 = 0.0;
        for (x, &init) in xs.iter().zip(&init_terms) {
            let gap = (predict(&merged, &arch, x) - predict(a, &arch, x)).abs();
            gap_max = gap_max.max(gap);
            let bound = bound_at(init, t)?;
            min_gap_slack = min_gap_slack.min(bound.bound - gap);
            min_e2e_slack = min_e2e_slack.min(bound.decay_term - crate::linalg::dot(&wb, x).abs());
        }
        let b = bound_at(init_max, t)?;
        gap_rows.push(GapBoundRow {
            step: t,
            measured_gap: gap_max,
            bound: b.bound,
            decay_term: b.decay_term,
            eps_term: b.eps_term,
        });
    }
    Ok(GfMergeOutcome {
        eps,
        gap_rows,
        min_gap_slack,
        min_end_to_end_slack: min_e2e_slack,
        c,
        ln_a1,
    })
}
