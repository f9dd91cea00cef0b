use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use wdlab::datagen::{binary_labels, dataset_csv, gen_heldout, gen_task, load_idx, to_unit_sphere, IdxData, TaskSpec};
use wdlab::diagnostics::stationarity_report;
use wdlab::experiments::{
    gf_merge_experiment, merge_experiment, merge_rows_csv, rank_sweep, rank_sweep_csv, srank_rows_csv,
    GfMergeConfig, MergeExperimentConfig, RankSweepConfig,
};
use wdlab::inspect::{layer_report, read_checkpoint, write_native, Checkpoint, CheckpointMeta, Group};
use wdlab::merging::{gap_bound_csv, merge_for};
use wdlab::model::{end_to_end_vector, Architecture, Dataset, Params};
use wdlab::optimize::{
    gd_train, gf_integrate, init_params, polish_to_stationary, GfConfig, GfMode, Init, PolishOptions, State,
    TrainConfig,
};
use wdlab::Error;

const DEFAULT_OUT: &str = "wdlab_out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    Train,
    Polish,
    Gf,
    Merge,
    RankSweep,
    Inspect,
    GenData,
}

/// Weight-decay, low-rank and model-merging experiments.
#[derive(Debug, Parser)]
#[command(name = "wdlab", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON config for the subcommand.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; takes precedence over WDLAB_OUT and the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the run seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug)]
enum Failure {
    /// Schema or validation error; exit 2.
    Config(String),
    /// Numerical divergence; exit 3.
    Diverged(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn parse_config<T: DeserializeOwned>(bytes: &[u8]) -> Outcome<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Failure::Config(format!("{path}: {}", e.into_inner()))
    })
}

/// Maps a validation error onto the config field it came from.
fn check(field: &str, r: wdlab::Result<()>) -> Outcome<()> {
    r.map_err(|e| Failure::Config(format!("{field}: {e}")))
}

/// Output directory plus the provenance stamped on every artifact.
struct Run {
    out: PathBuf,
    config_sha256: String,
    seed: String,
    artifacts: Vec<String>,
}

impl Run {
    fn new(out: PathBuf, config_sha256: String, seed: String) -> anyhow::Result<Self> {
        fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
        Ok(Self {
            out,
            config_sha256,
            seed,
            artifacts: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> anyhow::Result<PathBuf> {
        let p = self.out.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
        }
        self.artifacts.push(name.to_string());
        Ok(p)
    }

    fn write(&mut self, name: &str, body: &str) -> anyhow::Result<()> {
        let p = self.path(name)?;
        fs::write(&p, body).with_context(|| format!("cannot write {}", p.display()))
    }

    /// CSV with a leading `# config_sha256=… seed=…` comment line.
    fn csv(&mut self, name: &str, body: &str) -> anyhow::Result<()> {
        let stamped = format!("# config_sha256={} seed={}\n{body}", self.config_sha256, self.seed);
        self.write(name, &stamped)
    }

    fn json(&mut self, name: &str, value: impl Serialize) -> anyhow::Result<()> {
        let doc = json!({
            "config_sha256": self.config_sha256,
            "seed": self.seed,
            "data": value,
        });
        let body = serde_json::to_string_pretty(&doc)? + "\n";
        self.write(name, &body)
    }

    fn checkpoint(&mut self, name: &str, params: &Params, meta: CheckpointMeta) -> anyhow::Result<()> {
        let p = self.path(name)?;
        write_native(&p, &Checkpoint::from_params(params, Some(meta)))?;
        Ok(())
    }

    fn finish(mut self, command: Command) -> anyhow::Result<()> {
        let manifest = json!({
            "command": format!("{command:?}"),
            "config_sha256": self.config_sha256,
            "seed": self.seed,
            "artifacts": std::mem::take(&mut self.artifacts),
        });
        let body = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(self.out.join("run.json"), body).context("cannot write run.json")
    }
}

fn out_dir(flag: Option<&Path>, from_config: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os("WDLAB_OUT").filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    from_config.map_or_else(|| PathBuf::from(DEFAULT_OUT), Path::to_path_buf)
}

fn meta_for(arch: &Architecture, lambda: f64, eta: Option<f64>, step: Option<u64>, seed: u64) -> CheckpointMeta {
    CheckpointMeta {
        lambda: Some(lambda),
        eta,
        step,
        seed: Some(seed),
        ..CheckpointMeta::from_arch(arch)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    arch: Architecture,
    task: TaskSpec,
    train: TrainConfig,
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WarmStart {
    eta: f64,
    steps: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolishFile {
    arch: Architecture,
    task: TaskSpec,
    lambda: f64,
    /// Stop at `‖∇L_λ‖ ≤ tol · max(1, ‖θ‖)`.
    tol: f64,
    init: Init,
    seed: u64,
    #[serde(default)]
    warm_start: Option<WarmStart>,
    #[serde(default)]
    options: PolishOptions,
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GfFile {
    arch: Architecture,
    task: TaskSpec,
    gf: GfConfig,
    init: Init,
    seed: u64,
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MergeFile {
    /// Shallow ReLU pair trained by GD.
    #[serde(default)]
    gd: Option<MergeExperimentConfig>,
    /// Balanced deep linear pair under gradient flow.
    #[serde(default)]
    gf: Option<GfMergeConfig>,
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    sweep: RankSweepConfig,
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InspectFile {
    /// Relative paths are resolved against the config file's directory.
    checkpoint: PathBuf,
    #[serde(default)]
    groups: Vec<Group>,
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum DataSource {
    Synthetic {
        tag: String,
        spec: TaskSpec,
        #[serde(default)]
        heldout: usize,
    },
    /// MNIST-style IDX pair; classes 0–4 become −1 and 5–9 become +1.
    Idx {
        tag: String,
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataFile {
    sources: Vec<DataSource>,
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

fn check_tag(tag: &str) -> Outcome<()> {
    if tag.is_empty() || !tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(Failure::Config(format!("sources: tag {tag:?} must be non-empty [A-Za-z0-9_-]")));
    }
    Ok(())
}

struct Ctx<'a> {
    cli: &'a Cli,
    bytes: Vec<u8>,
    hash: String,
    config_dir: PathBuf,
}

impl Ctx<'_> {
    fn run(&self, config_out: Option<&Path>, seed: String) -> anyhow::Result<Run> {
        Run::new(out_dir(self.cli.out.as_deref(), config_out), self.hash.clone(), seed)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.config_dir.join(p)
        }
    }
}

fn cmd_train(ctx: &Ctx) -> Outcome<()> {
    let mut cfg: TrainFile = parse_config(&ctx.bytes)?;
    if let Some(s) = ctx.cli.seed {
        cfg.train.seed = s;
    }
    check("arch", cfg.arch.validate())?;
    check("task", cfg.task.validate())?;
    check("train", cfg.train.validate())?;
    let seed = cfg.train.seed;
    let task = gen_task(&cfg.task, "train")?;
    let p0 = init_params(&cfg.arch, cfg.train.init, seed)?;
    let mut run = ctx.run(cfg.out_dir.as_deref(), seed.to_string())?;
    let meta = |step: f64| meta_for(&cfg.arch, cfg.train.lambda, Some(cfg.train.eta), Some(step as u64), seed);
    match gd_train(&p0, &cfg.arch, &task.data, &cfg.train) {
        Ok(traj) => {
            run.csv("trajectory.csv", &traj.to_csv()?)?;
            let last = traj.last().context("empty trajectory")?;
            let params = traj.final_params().context("trajectory holds no parameters")?;
            run.checkpoint("final.nwt", params, meta(last.at))?;
            run.finish(Command::Train)?;
            Ok(())
        }
        Err(Error::Divergence { at, last }) => {
            let mut msg = format!("training diverged at step {at}");
            if let Some(c) = last {
                if let State::Params(p) = &c.state {
                    run.checkpoint("last_finite.nwt", p, meta(c.at))?;
                    msg.push_str(&format!(
                        "; last finite checkpoint at step {} (loss {}) written to {}",
                        c.at,
                        c.loss,
                        run.out.join("last_finite.nwt").display()
                    ));
                }
            }
            run.finish(Command::Train)?;
            Err(Failure::Diverged(msg))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_polish(ctx: &Ctx) -> Outcome<()> {
    let mut cfg: PolishFile = parse_config(&ctx.bytes)?;
    if let Some(s) = ctx.cli.seed {
        cfg.seed = s;
    }
    check("arch", cfg.arch.validate())?;
    check("task", cfg.task.validate())?;
    if !(cfg.lambda > 0.0 && cfg.lambda.is_finite()) {
        return Err(Failure::Config("lambda: must be positive".into()));
    }
    if !(cfg.tol > 0.0) {
        return Err(Failure::Config("tol: must be positive".into()));
    }
    let warm = cfg
        .warm_start
        .as_ref()
        .map(|w| TrainConfig {
            eta: w.eta,
            lambda: cfg.lambda,
            steps: w.steps,
            seed: cfg.seed,
            checkpoint_every: Some(w.steps.max(1)),
            init: cfg.init,
            batch_size: None,
        });
    if let Some(w) = &warm {
        check("warm_start", w.validate())?;
    }
    let task = gen_task(&cfg.task, "polish")?;
    let p0 = init_params(&cfg.arch, cfg.init, cfg.seed)?;
    let start = match &warm {
        Some(w) => match gd_train(&p0, &cfg.arch, &task.data, w) {
            Ok(t) => t.final_params().context("warm start produced no parameters")?.clone(),
            Err(Error::Divergence { at, .. }) => {
                return Err(Failure::Diverged(format!("warm start diverged at step {at}")))
            }
            Err(e) => return Err(e.into()),
        },
        None => p0.clone(),
    };
    let out = polish_to_stationary(&start, &cfg.arch, &task.data, cfg.lambda, cfg.tol, &cfg.options)?;
    let mut report = stationarity_report(&out.params, &cfg.arch, &task.data, cfg.lambda, Some(&p0))?;
    report.generalized_residual = Some(out.residual);
    let mut run = ctx.run(cfg.out_dir.as_deref(), cfg.seed.to_string())?;
    run.checkpoint(
        "stationary.nwt",
        &out.params,
        meta_for(&cfg.arch, cfg.lambda, None, Some(out.iterations as u64), cfg.seed),
    )?;
    run.json(
        "report.json",
        json!({
            "converged": out.converged,
            "iterations": out.iterations,
            "kinks": out.kinks,
            "report": report,
        }),
    )?;
    run.csv("report.csv", &report.to_csv())?;
    run.finish(Command::Polish)?;
    if !out.converged {
        eprintln!(
            "warning: polishing stopped before the tolerance (residual {:.3e} after {} iterations)",
            out.residual, out.iterations
        );
    }
    Ok(())
}

fn cmd_gf(ctx: &Ctx) -> Outcome<()> {
    let mut cfg: GfFile = parse_config(&ctx.bytes)?;
    if let Some(s) = ctx.cli.seed {
        cfg.seed = s;
    }
    check("arch", cfg.arch.validate())?;
    check("task", cfg.task.validate())?;
    check("gf", cfg.gf.validate())?;
    let task = gen_task(&cfg.task, "gf")?;
    let p0 = init_params(&cfg.arch, cfg.init, cfg.seed)?;
    let start = match cfg.gf.mode {
        GfMode::PerLayer => State::Params(p0),
        GfMode::EndToEnd => State::Vector(end_to_end_vector(&p0, &cfg.arch)?),
    };
    let traj = match gf_integrate(&start, &cfg.arch, &task.data, &cfg.gf) {
        Ok(t) => t,
        Err(Error::Divergence { at, .. }) => return Err(Failure::Diverged(format!("gradient flow diverged at t = {at}"))),
        Err(e) => return Err(e.into()),
    };
    let mut run = ctx.run(cfg.out_dir.as_deref(), cfg.seed.to_string())?;
    run.csv("trajectory.csv", &traj.to_csv()?)?;
    run.finish(Command::Gf)?;
    Ok(())
}

fn cmd_merge(ctx: &Ctx) -> Outcome<()> {
    let mut cfg: MergeFile = parse_config(&ctx.bytes)?;
    match (&mut cfg.gd, &mut cfg.gf) {
        (Some(gd), None) => {
            if let Some(s) = ctx.cli.seed {
                gd.seed = s;
            }
            check("gd", gd.validate())?;
            let o = match merge_experiment(gd) {
                Ok(o) => o,
                Err(Error::Divergence { at, .. }) => {
                    return Err(Failure::Diverged(format!("merge training diverged at step {at}")))
                }
                Err(e) => return Err(e.into()),
            };
            let mut run = ctx.run(cfg.out_dir.as_deref(), gd.seed.to_string())?;
            run.csv("merge_losses.csv", &merge_rows_csv(&o.rows)?)?;
            run.csv("heldout_losses.csv", &merge_rows_csv(std::slice::from_ref(&o.heldout))?)?;
            run.csv("stable_ranks.csv", &srank_rows_csv(&o.sranks)?)?;
            if !o.gap_rows.is_empty() {
                run.csv("gap_bound.csv", &gap_bound_csv(&o.gap_rows)?)?;
            }
            run.json(
                "summary.json",
                json!({
                    "eps": o.eps,
                    "lemma4_min_slack": o.lemma4_min_slack,
                    "loss_transfer_min_slack": o.loss_transfer_min_slack,
                    "max_gap_a": o.max_gap_a,
                    "max_gap_b": o.max_gap_b,
                    "decay_slope": o.decay_slope,
                    "expected_slope": o.expected_slope,
                }),
            )?;
            let arch = Architecture::shallow(gd.d, gd.width);
            let meta = || meta_for(&arch, gd.lambda, Some(gd.eta), Some(gd.steps as u64), gd.seed);
            let merged = merge_for(&arch, &o.params_a, &o.params_b)?;
            run.checkpoint("model_a.nwt", &o.params_a, meta())?;
            run.checkpoint("model_b.nwt", &o.params_b, meta())?;
            run.checkpoint("merged.nwt", &merged, meta())?;
            run.finish(Command::Merge)?;
            Ok(())
        }
        (None, Some(gf)) => {
            if let Some(s) = ctx.cli.seed {
                gf.seed = s;
            }
            check("gf", gf.validate())?;
            let o = gf_merge_experiment(gf)?;
            let mut run = ctx.run(cfg.out_dir.as_deref(), gf.seed.to_string())?;
            run.csv("gap_bound.csv", &gap_bound_csv(&o.gap_rows)?)?;
            run.json(
                "summary.json",
                json!({
                    "eps": o.eps,
                    "min_gap_slack": o.min_gap_slack,
                    "min_end_to_end_slack": o.min_end_to_end_slack,
                    "c": o.c,
                    "ln_a1": o.ln_a1,
                }),
            )?;
            run.finish(Command::Merge)?;
            Ok(())
        }
        _ => Err(Failure::Config("exactly one of `gd` and `gf` must be given".into())),
    }
}

fn cmd_rank_sweep(ctx: &Ctx) -> Outcome<()> {
    let mut cfg: SweepFile = parse_config(&ctx.bytes)?;
    if let Some(s) = ctx.cli.seed {
        cfg.sweep.seeds = vec![s];
    }
    check("sweep", cfg.sweep.validate())?;
    let seeds: Vec<String> = cfg.sweep.seeds.iter().map(u64::to_string).collect();
    let rows = rank_sweep(&cfg.sweep, ctx.cli.jobs)?;
    let mut run = ctx.run(cfg.out_dir.as_deref(), seeds.join(","))?;
    for r in &rows {
        let name = format!("points/lambda_{:e}_seed_{}.csv", r.lambda, r.seed);
        run.csv(&name, &rank_sweep_csv(std::slice::from_ref(r))?)?;
    }
    run.csv("rank_sweep.csv", &rank_sweep_csv(&rows)?)?;
    run.finish(Command::RankSweep)?;
    Ok(())
}

fn cmd_inspect(ctx: &Ctx) -> Outcome<()> {
    let cfg: InspectFile = parse_config(&ctx.bytes)?;
    let ckpt = read_checkpoint(ctx.resolve(&cfg.checkpoint))?;
    let report = layer_report(&ckpt, &cfg.groups)?;
    let seed = ckpt
        .meta
        .as_ref()
        .and_then(|m| m.seed)
        .map_or_else(|| "none".to_string(), |s| s.to_string());
    let mut run = ctx.run(cfg.out_dir.as_deref(), seed)?;
    run.csv("layer_report.csv", &report.to_csv())?;
    let parsed: serde_json::Value = serde_json::from_str(&report.to_json()).context("layer report JSON")?;
    run.json("layer_report.json", parsed)?;
    for w in &ckpt.warnings {
        eprintln!("warning: {w}");
    }
    run.finish(Command::Inspect)?;
    Ok(())
}

fn idx_dataset(images: &Path, labels: &Path, limit: Option<usize>) -> anyhow::Result<Dataset> {
    let IdxData::Images { pixels: mut rows, .. } = load_idx(images)? else {
        anyhow::bail!("{} does not hold images", images.display());
    };
    let IdxData::Labels(classes) = load_idx(labels)? else {
        anyhow::bail!("{} does not hold labels", labels.display());
    };
    if rows.len() != classes.len() {
        anyhow::bail!("{} images but {} labels", rows.len(), classes.len());
    }
    let keep = limit.unwrap_or(rows.len()).min(rows.len());
    rows.truncate(keep);
    to_unit_sphere(&mut rows);
    Ok(Dataset::new(rows, binary_labels(&classes[..keep])?)?)
}

fn cmd_gen_data(ctx: &Ctx) -> Outcome<()> {
    let mut cfg: GenDataFile = parse_config(&ctx.bytes)?;
    if cfg.sources.is_empty() {
        return Err(Failure::Config("sources: at least one source is required".into()));
    }
    let mut seeds = Vec::new();
    for (i, src) in cfg.sources.iter_mut().enumerate() {
        match src {
            DataSource::Synthetic { tag, spec, .. } => {
                check_tag(tag)?;
                if let Some(s) = ctx.cli.seed {
                    spec.seed = s;
                }
                check(&format!("sources[{i}].spec"), spec.validate())?;
                seeds.push(spec.seed.to_string());
            }
            DataSource::Idx { tag, .. } => check_tag(tag)?,
        }
    }
    let seed = if seeds.is_empty() { "none".to_string() } else { seeds.join(",") };
    let mut run = ctx.run(cfg.out_dir.as_deref(), seed)?;
    for src in &cfg.sources {
        match src {
            DataSource::Synthetic { tag, spec, heldout } => {
                let task = gen_task(spec, tag)?;
                run.csv(&format!("data_{tag}.csv"), &dataset_csv(&task.data))?;
                if *heldout > 0 {
                    let held = gen_heldout(spec, tag, &task, *heldout)?;
                    run.csv(&format!("heldout_{tag}.csv"), &dataset_csv(&held))?;
                }
            }
            DataSource::Idx {
                tag,
                images,
                labels,
                limit,
            } => {
                let data = idx_dataset(&ctx.resolve(images), &ctx.resolve(labels), *limit)?;
                run.csv(&format!("data_{tag}.csv"), &dataset_csv(&data))?;
            }
        }
    }
    run.finish(Command::GenData)?;
    Ok(())
}

fn dispatch(cli: &Cli) -> Outcome<()> {
    let bytes = fs::read(&cli.config)
        .with_context(|| format!("cannot read config {}", cli.config.display()))
        .map_err(|e| Failure::Config(format!("{e:#}")))?;
    let hash = hex::encode(Sha256::digest(&bytes));
    let config_dir = cli
        .config
        .parent()
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let ctx = Ctx {
        cli,
        bytes,
        hash,
        config_dir,
    };
    match cli.command {
        Command::Train => cmd_train(&ctx),
        Command::Polish => cmd_polish(&ctx),
        Command::Gf => cmd_gf(&ctx),
        Command::Merge => cmd_merge(&ctx),
        Command::RankSweep => cmd_rank_sweep(&ctx),
        Command::Inspect => cmd_inspect(&ctx),
        Command::GenData => cmd_gen_data(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
