//! The `memdistill` command line. Exit status 0 on success, 1 for usage
//! errors and 2 when a command fails at run time.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use memdistill_core::bptt::MomentumMode;
use memdistill_core::continual::{describe_result, make_stream, run_online_baseline, ClResult, StreamKind};
use memdistill_core::data::LabeledDataset;
use memdistill_core::distill::{DistillConfig, Distiller};
use memdistill_core::eval::{dense_train_set, random_coreset, select_num_bases, EvalResult};
use memdistill_core::memory::{coefficient_similarity, DistilledArtifact, Parameterization};
use memdistill_core::models::ModelKind;
use memdistill_core::Tensor;

use crate::artifact::{load_artifact, save_artifact};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::error::Error;
use crate::{datasets, experiments, pnm, report};

#[derive(Parser, Debug)]
#[command(name = "memdistill", version, about = "Distill datasets into addressable memories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Learn a memory and write it as a DDAM artifact.
    Distill(DistillArgs),
    /// Retrain fresh models on a memory or a real-data baseline.
    Eval(EvalArgs),
    /// Run a grid of distillations and tabulate retrain accuracy.
    Ablate(AblateArgs),
    /// Compress-then-recall on a task stream, with the online baseline.
    Cl(ClArgs),
    /// Similarity matrix and image grids of an artifact.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn get(self) -> bool {
        self == OnOff::On
    }
}

fn parse_mode(s: &str) -> Result<MomentumMode, String> {
    s.parse().map_err(|e: memdistill_core::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    match s {
        "linear" => Ok(ModelKind::Linear),
        "mlp" => Ok(ModelKind::Mlp),
        "convnet" => Ok(ModelKind::Convnet),
        other => Err(format!("unknown model '{}' (linear, mlp, convnet)", other)),
    }
}

fn parse_param(s: &str) -> Result<Parameterization, String> {
    match s {
        "learned" | "addressed" => Ok(Parameterization::Addressed),
        "classical" => Ok(Parameterization::Classical),
        other => Err(format!("unknown addressing '{}' (learned, classical)", other)),
    }
}

fn parse_stream(s: &str) -> Result<StreamKind, String> {
    s.parse().map_err(|e: memdistill_core::Error| e.to_string())
}

/// Flags shared by every command. Each one overrides the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct Common {
    /// JSON run configuration to start from.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `toy`, `mnist5k` or `idx:<dir>`.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory holding the mnist5k IDX files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Random training subset size.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Budget in images per class.
    #[arg(long)]
    pub ipc: Option<usize>,
    /// Number of bases; a comma list selects one by validation.
    #[arg(long, value_delimiter = ',')]
    pub bases: Option<Vec<usize>>,
    /// Number of addressing matrices, overriding the budget.
    #[arg(long)]
    pub addr_count: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=2))]
    pub downsample: Option<u64>,
    /// Learned addressing or classical per-class images.
    #[arg(long, value_parser = parse_param)]
    pub addressing: Option<Parameterization>,
    #[arg(long, value_parser = parse_kind)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub inner_steps: Option<usize>,
    #[arg(long)]
    pub inner_lr: Option<f64>,
    #[arg(long)]
    pub inner_momentum: Option<f64>,
    /// none, forward or full.
    #[arg(long, value_parser = parse_mode)]
    pub momentum_mode: Option<MomentumMode>,
    #[arg(long)]
    pub outer_lr: Option<f64>,
    #[arg(long)]
    pub outer_momentum: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub label_subset: Option<usize>,
    #[arg(long)]
    pub augment: Option<OnOff>,
    #[arg(long)]
    pub zca: Option<OnOff>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fresh models trained per evaluation.
    #[arg(long)]
    pub retrains: Option<usize>,
    /// Training steps per evaluation model.
    #[arg(long)]
    pub eval_steps: Option<usize>,
    #[arg(long)]
    pub eval_lr: Option<f64>,
}

impl Common {
    fn apply(&self, c: &mut RunConfig) {
        let d = &mut c.dataset;
        set(&mut d.name, self.dataset.clone());
        set(&mut d.data_dir, self.data_dir.clone());
        if self.subset.is_some() {
            d.subset = self.subset;
        }
        set(&mut d.zca, self.zca.map(OnOff::get));
        let m = &mut c.memory;
        set(&mut m.ipc, self.ipc);
        set(&mut m.bases, self.bases.clone());
        if self.addr_count.is_some() {
            m.addr_count = self.addr_count;
        }
        set(&mut m.downsample, self.downsample.map(|s| s as usize));
        set(&mut m.parameterization, self.addressing);
        set(&mut c.model.kind, self.model);
        if self.hidden.is_some() {
            c.model.hidden = self.hidden;
        }
        set(&mut c.inner.steps, self.inner_steps);
        set(&mut c.inner.lr, self.inner_lr);
        set(&mut c.inner.momentum, self.inner_momentum);
        set(&mut c.inner.mode, self.momentum_mode);
        set(&mut c.outer.lr, self.outer_lr);
        set(&mut c.outer.momentum, self.outer_momentum);
        set(&mut c.outer.iterations, self.iters);
        set(&mut c.outer.batch_size, self.batch);
        if self.label_subset.is_some() {
            c.outer.label_subset = self.label_subset;
        }
        set(&mut c.augment, self.augment.map(OnOff::get));
        set(&mut c.seed, self.seed);
        set(&mut c.eval.n_models, self.retrains);
        set(&mut c.eval.steps, self.eval_steps);
        set(&mut c.eval.lr, self.eval_lr);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[command(flatten)]
    pub common: Common,
    /// Artifact path; the loss trace and resolved config go next to it.
    #[arg(long, default_value = "memory.ddam")]
    pub out: PathBuf,
    /// Checkpoint file, written every `--checkpoint-every` iterations.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a checkpoint. Its configuration wins over the flags,
    /// except `--iters`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Artifact to evaluate. Its `.config.json` is the default config.
    #[arg(long)]
    pub artifact: Option<PathBuf>,
    /// Without an artifact: train on a random real coreset of `--ipc` per
    /// class instead of the full training set.
    #[arg(long)]
    pub coreset: bool,
    /// Prefix for `<out>.csv` and `<out>.md`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    pub modes: Option<Vec<MomentumMode>>,
    /// Unroll lengths.
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub downsample_grid: Option<Vec<usize>>,
    /// learned and/or classical.
    #[arg(long, value_delimiter = ',', value_parser = parse_param)]
    pub addressing_grid: Option<Vec<Parameterization>>,
    /// Distillation seeds per cell, counting up from `--seed`.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Prefix for `<out>.csv` and `<out>.md`.
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ClArgs {
    #[command(flatten)]
    pub common: Common,
    /// rotations or permutations.
    #[arg(long, value_parser = parse_stream)]
    pub stream: Option<StreamKind>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub per_task: Option<usize>,
    /// Buffer capacity in images.
    #[arg(long)]
    pub capacity: Option<usize>,
    #[arg(long)]
    pub final_iters: Option<usize>,
    #[arg(long)]
    pub baseline: Option<OnOff>,
    /// Prefix for `<out>.csv` and `<out>.json`.
    #[arg(long, default_value = "cl")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    /// Class-by-class cosine similarity of the average coefficients.
    #[arg(long)]
    pub sim_out: Option<PathBuf>,
    /// Grid of all bases as PGM or PPM.
    #[arg(long)]
    pub bases_out: Option<PathBuf>,
    /// Prefix for one recalled-image grid per class.
    #[arg(long)]
    pub recall_out: Option<PathBuf>,
}

/// A failure tagged with the part of the pipeline it came from.
#[derive(Debug)]
pub struct Failure {
    pub stage: &'static str,
    pub error: Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.error)
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<Error>> Stage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure { stage, error: e.into() })
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Distill(a) => cmd_distill(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Cl(a) => cmd_cl(a),
        Command::Analyze(a) => cmd_analyze(a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f);
            2
        }
    }
}

fn resolve(common: &Common, fallback: Option<PathBuf>) -> Result<RunConfig, Failure> {
    let path = common.config.clone().or(fallback.filter(|p| p.exists()));
    let mut cfg = match path {
        Some(p) => RunConfig::load(&p).stage("config")?,
        None => RunConfig::default(),
    };
    common.apply(&mut cfg);
    Ok(cfg)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// `m.ddam` → `m.config.json`.
pub fn config_path(out: &Path) -> PathBuf {
    out.with_extension("config.json")
}

pub fn loss_path(out: &Path) -> PathBuf {
    out.with_extension("loss.csv")
}

fn load_data(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset), Failure> {
    datasets::load(&cfg.dataset).stage("data-io")
}

fn first_feasible(cfg: &RunConfig, train: &LabeledDataset) -> Result<DistillConfig, Failure> {
    let (c, shape) = (train.num_classes, train.image_shape());
    let mut last = None;
    for &k in &cfg.memory.bases {
        match cfg.distill_config(c, shape, k) {
            Ok(d) => return Ok(d),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Other("no basis count given".into()))).stage("memory")
}

fn cmd_distill(a: DistillArgs) -> CmdResult {
    let mut cfg = resolve(&a.common, None)?;
    set(&mut cfg.checkpoint_every, a.checkpoint_every.map(Some));
    let (train, _) = load_data(&cfg)?;
    let start = Instant::now();
    let (artifact, losses, wallclock) = if let Some(path) = &a.resume {
        let ck = load_checkpoint(path).stage("checkpoint")?;
        let mut dcfg = ck.config.clone();
        set(&mut dcfg.outer.iterations, a.common.iters);
        let mut d = Distiller::resume(dcfg, ck.num_classes, ck.state).stage("distiller")?;
        run_distiller(&mut d, &train, &cfg, a.checkpoint.as_deref().or(Some(path)), start)?
    } else if cfg.memory.bases.len() > 1 && cfg.memory.parameterization == Parameterization::Addressed {
        let base = first_feasible(&cfg, &train)?;
        let budget = cfg.budget_floats(train.num_classes, train.image_shape());
        let sel = select_num_bases(&cfg.memory.bases, &train, cfg.seed, &base, budget, &cfg.eval).stage("eval-harness")?;
        for (k, s) in &sel.scores {
            match s {
                Some(acc) => println!("K={:<4} validation accuracy {:.4}", k, acc),
                None => println!("K={:<4} does not fit the budget", k),
            }
        }
        println!("selected K={}", sel.best_k);
        (sel.artifact, sel.losses, Vec::new())
    } else {
        let dcfg = first_feasible(&cfg, &train)?;
        let mut d = Distiller::new(dcfg, train.num_classes).stage("distiller")?;
        run_distiller(&mut d, &train, &cfg, a.checkpoint.as_deref(), start)?
    };
    save_artifact(&artifact, &a.out).stage("data-io")?;
    report::write_loss_trace(&loss_path(&a.out), &losses, &wallclock).stage("cli")?;
    cfg.save(&config_path(&a.out)).stage("config")?;
    println!(
        "wrote {} (K={}, r={}, {} of {} floats), final loss {:.6}",
        a.out.display(),
        artifact.bank.num_bases(),
        artifact.addressing.count(),
        artifact.stored_floats(),
        artifact.budget.budget_floats,
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

type RunOutput = (DistilledArtifact, Vec<f64>, Vec<f64>);

fn run_distiller(
    d: &mut Distiller,
    train: &LabeledDataset,
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    start: Instant,
) -> Result<RunOutput, Failure> {
    let total = d.config().outer.iterations;
    let mut wallclock = vec![f64::NAN; d.state().iteration];
    let every = cfg.checkpoint_every.filter(|&n| n > 0);
    while d.state().iteration < total {
        let loss = d.step(train).stage("distiller")?;
        wallclock.push(start.elapsed().as_secs_f64());
        let it = d.state().iteration;
        if it % 100 == 0 || it == total {
            log::info!("iteration {}/{} loss {:.6}", it, total, loss);
        }
        if let (Some(path), Some(n)) = (checkpoint, every) {
            if it % n == 0 || it == total {
                let ck = Checkpoint {
                    config: d.config().clone(),
                    num_classes: d.num_classes(),
                    state: d.state().clone(),
                };
                save_checkpoint(&ck, path).stage("checkpoint")?;
            }
        }
    }
    let art = d.artifact(train.name.clone(), train.fingerprint()).stage("memory")?;
    Ok((art, d.state().losses.clone(), wallclock))
}

fn config_columns(cfg: &RunConfig, source: &str) -> Vec<(String, String)> {
    vec![
        ("source".into(), source.into()),
        ("dataset".into(), cfg.dataset.name.clone()),
        ("ipc".into(), cfg.memory.ipc.to_string()),
        ("seed".into(), cfg.seed.to_string()),
        ("eval_steps".into(), cfg.eval.steps.to_string()),
        ("eval_lr".into(), cfg.eval.lr.to_string()),
    ]
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let cfg = resolve(&a.common, a.artifact.as_deref().map(config_path))?;
    let (train, test) = load_data(&cfg)?;
    let (c, shape) = (train.num_classes, train.image_shape());
    let spec = cfg.model.spec(shape, c);
    let (result, source): (EvalResult, String) = match &a.artifact {
        Some(path) => {
            let art = load_artifact(path).stage("data-io")?;
            let spec = cfg.model.spec(art.bank.target_shape, art.num_classes);
            let r = experiments::retrain_eval(&art, &spec, &cfg.eval, &test).stage("eval-harness")?;
            (r, path.display().to_string())
        }
        None if a.coreset => {
            let core = random_coreset(&train, cfg.memory.ipc, cfg.seed).stage("eval-harness")?;
            let r = experiments::retrain_on(&spec, &dense_train_set(&core), &cfg.eval, &test).stage("eval-harness")?;
            (r, format!("random coreset ({} per class)", cfg.memory.ipc))
        }
        None => {
            let r = experiments::retrain_on(&spec, &dense_train_set(&train), &cfg.eval, &test).stage("eval-harness")?;
            (r, "full training set".into())
        }
    };
    println!(
        "accuracy {:.2}% ± {:.2} over {} models ({})",
        100.0 * result.mean,
        100.0 * result.std,
        result.accuracies.len(),
        source
    );
    let out = a
        .out
        .or_else(|| a.artifact.as_deref().map(|p| p.with_extension("eval")))
        .unwrap_or_else(|| PathBuf::from("eval"));
    let cols = config_columns(&cfg, &source);
    report::write_eval_csv(&sidecar(&out, ".csv"), &cols, &result).stage("cli")?;
    report::write_text(&sidecar(&out, ".md"), &report::eval_markdown(&cols, &result)).stage("cli")?;
    cfg.save(&sidecar(&out, ".config.json")).stage("config")?;
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let mut cfg = resolve(&a.common, None)?;
    let g = &mut cfg.ablation;
    set(&mut g.modes, a.modes);
    set(&mut g.steps, a.steps);
    set(&mut g.downsample, a.downsample_grid.or(a.common.downsample.map(|s| vec![s as usize])));
    set(&mut g.parameterizations, a.addressing_grid);
    set(&mut g.seeds, a.seeds);
    let (train, test) = load_data(&cfg)?;
    let base = first_feasible(&cfg, &train)?;
    let grid = cfg.ablation_grid(train.num_classes, train.image_shape());
    let rows = experiments::ablation_suite(&train, &test, &base, &grid, &cfg.eval).stage("eval-harness")?;
    let md = report::ablation_markdown(&rows);
    print!("{}", md);
    report::write_ablation_csv(&sidecar(&a.out, ".csv"), &rows).stage("cli")?;
    report::write_text(&sidecar(&a.out, ".md"), &md).stage("cli")?;
    cfg.save(&sidecar(&a.out, ".config.json")).stage("config")?;
    Ok(())
}

#[derive(serde::Serialize)]
struct ClReport<'a> {
    compress_then_recall: &'a ClResult,
    online: Option<&'a ClResult>,
}

fn cmd_cl(a: ClArgs) -> CmdResult {
    let mut cfg = resolve(&a.common, None)?;
    let c = &mut cfg.continual;
    set(&mut c.stream, a.stream);
    set(&mut c.tasks, a.tasks);
    set(&mut c.per_task, a.per_task);
    set(&mut c.capacity_samples, a.capacity);
    set(&mut c.final_iterations, a.final_iters);
    set(&mut c.baseline, a.baseline.map(OnOff::get));
    if let Some(k) = a.common.bases.as_ref().and_then(|b| b.first()) {
        c.num_bases = *k;
    }
    let (train, test) = load_data(&cfg)?;
    let c = &cfg.continual;
    let stream = || make_stream(c.stream, c.tasks, c.per_task, cfg.seed, &train, &test).stage("continual");
    let shape = train.image_shape();
    let clc = cfg.cl_config(train.num_classes, shape).stage("continual")?;
    let capacity = (c.capacity_samples * shape.iter().product::<usize>()) as u64;
    let ours = experiments::run_compress_then_recall(&mut stream()?, capacity, &clc).stage("continual")?;
    println!("compress-then-recall: {}", describe_result(&ours));
    let online = if c.baseline {
        let r = run_online_baseline(&mut stream()?, &clc.distill.model, c.online_lr, c.online_momentum, cfg.seed)
            .stage("continual")?;
        println!("online:               {}", describe_result(&r));
        Some(r)
    } else {
        None
    };
    report::write_cl_csv(&sidecar(&a.out, ".csv"), &ours).stage("cli")?;
    let rep = ClReport {
        compress_then_recall: &ours,
        online: online.as_ref(),
    };
    report::write_json(&sidecar(&a.out, ".json"), &rep).stage("cli")?;
    cfg.save(&sidecar(&a.out, ".config.json")).stage("config")?;
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> CmdResult {
    let art = load_artifact(&a.artifact).stage("data-io")?;
    if let Some(path) = &a.sim_out {
        let sim = coefficient_similarity(&art.addressing, &art.queries()).stage("memory")?;
        report::write_matrix_csv(path, &sim).stage("cli")?;
        println!("wrote {}x{} similarity matrix to {}", sim.shape()[0], sim.shape()[1], path.display());
    }
    if let Some(path) = &a.bases_out {
        let shape = art.bank.base_shape;
        let tiles = art
            .bank
            .bases
            .rows()
            .map(|row| Tensor::new(shape.to_vec(), row.to_vec()))
            .collect::<Result<Vec<_>, _>>()
            .stage("memory")?;
        pnm::tile_grid(&tiles).stage("cli")?.save(path).stage("cli")?;
        println!("wrote {} bases to {}", tiles.len(), path.display());
    }
    if let Some(prefix) = &a.recall_out {
        let ext = if art.bank.target_shape[0] == 3 { "ppm" } else { "pgm" };
        for c in 0..art.num_classes {
            let images = art.recall_class(c).stage("memory")?;
            let path = sidecar(prefix, &format!("_class{}.{}", c, ext));
            pnm::tile_grid(&images).stage("cli")?.save(&path).stage("cli")?;
        }
        println!("wrote {} recall grids with prefix {}", art.num_classes, prefix.display());
    }
    Ok(())
}
