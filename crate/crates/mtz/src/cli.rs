//! Command-line front end: `train`, `zip`, `eval`, `inspect`.
//!
//! Every command accepts `--config <file.toml>` whose keys mirror the long
//! flag names (with underscores); explicit flags win over the file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use mtz_core::data::{calibration_set, evaluate, evaluate_task, Dataset};
use mtz_core::hessian::CalibrationSet;
use mtz_core::model::arch::Architecture;
use mtz_core::model::{Network, Shape, ZippedModel};
use mtz_core::trainer::{train_logged, Loss, RetrainSchedule, TrainConfig};
use mtz_core::zipper::{zip_additional, zip_models, MatchingPolicy, MergeMethod, MergePlan, ShareTarget, TaskInputs};
use mtz_core::TaskId;

use crate::datasets::{data_dir, load_mnist, load_synthetic, DataError, NamedTask};
use crate::format::{self, FormatError, StoredModel};
use crate::report::parse_records;

/// Retraining iterations spread evenly over the hidden layers by default.
pub const DEFAULT_RETRAIN_TOTAL: usize = 550;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(mtz_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<mtz_core::Error> for CliError {
    fn from(e: mtz_core::Error) -> Self {
        let mut root = &e;
        while let mtz_core::Error::AtLayer { source, .. } = root {
            root = source;
        }
        match root {
            mtz_core::Error::InvalidConfig(_)
            | mtz_core::Error::InfeasibleTarget { .. }
            | mtz_core::Error::ResidualPrecondition { .. } => CliError::Config(e.to_string()),
            _ => CliError::Model(e),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "mtz", version, about = "Merge pre-trained networks by layer-wise neuron sharing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a single-task network.
    Train(TrainArgs),
    /// Zip two or more trained networks into one joint model.
    Zip(ZipArgs),
    /// Print the test error of every task of a model.
    Eval(EvalArgs),
    /// Print the structure of a model file or summarize a zip report.
    Inspect(InspectArgs),
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// `mlp-<h1>-<h2>-...`, `cnn-small` or `resmlp-<width>-<hidden>-<blocks>`.
    #[arg(long)]
    pub arch: Option<String>,
    /// MNIST directory (default: $MTZ_DATA_DIR, then data/mnist).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic task spec (TOML) instead of MNIST.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    /// Task name; selects the synthetic task and labels the model.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log (key=value lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZipArgs {
    /// Model files; the first two are zipped, the rest added one by one.
    #[arg(long, num_args = 1..)]
    pub models: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    /// `full`, `none`, `counts:300,100`, `fractions:0.5,0.5` or `thresholds:0.1,0.2`.
    #[arg(long)]
    pub share: Option<String>,
    /// Loss weight of the first side (existing tasks when adding a model).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// `default`, `none` or iterations per hidden layer, e.g. `250,300`.
    #[arg(long)]
    pub retrain_schedule: Option<String>,
    /// Calibration samples per task.
    #[arg(long)]
    pub calib: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `hessian` or `random`.
    #[arg(long)]
    pub method: Option<String>,
    /// `greedy` or `exhaustive`.
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

macro_rules! overlay {
    ($flags:expr, $file:expr, $($field:ident),+) => {{
        let mut f = $flags;
        let g = $file;
        $( if f.$field.is_none() { f.$field = g.$field; } )+
        f
    }};
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

impl TrainArgs {
    fn resolve(self) -> Result<Self> {
        let file: TrainArgs = read_config(self.config.as_deref())?;
        Ok(overlay!(self, file, arch, data, synthetic, task, seed, iterations, lr, batch, log_every, out, log))
    }
}

impl ZipArgs {
    fn resolve(self) -> Result<Self> {
        let file: ZipArgs = read_config(self.config.as_deref())?;
        Ok(overlay!(
            self,
            file,
            models,
            data,
            synthetic,
            share,
            alpha,
            retrain_schedule,
            calib,
            lr,
            batch,
            seed,
            method,
            policy,
            out,
            report
        ))
    }
}

impl EvalArgs {
    fn resolve(self) -> Result<Self> {
        let file: EvalArgs = read_config(self.config.as_deref())?;
        Ok(overlay!(self, file, model, data, synthetic))
    }
}

impl InspectArgs {
    fn resolve(self) -> Result<Self> {
        let file: InspectArgs = read_config(self.config.as_deref())?;
        Ok(overlay!(self, file, model, report))
    }
}

/// Parses an architecture name.
pub fn parse_arch(s: &str) -> Result<Architecture> {
    let bad = || config_err(format!("unknown architecture `{s}`"));
    let nums = |rest: &str| -> Result<Vec<usize>> {
        rest.split('-')
            .map(|p| p.parse::<usize>().ok().filter(|v| *v > 0).ok_or_else(bad))
            .collect()
    };
    if s == "cnn-small" {
        return Ok(Architecture::small_cnn());
    }
    if let Some(rest) = s.strip_prefix("mlp-") {
        return Ok(Architecture::mlp(&nums(rest)?));
    }
    if let Some(rest) = s.strip_prefix("resmlp-") {
        if let [width, hidden, blocks] = nums(rest)?[..] {
            return Ok(Architecture::ResidualMlp { width, hidden, blocks });
        }
    }
    Err(bad())
}

fn list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| config_err(format!("bad {what} value `{p}`"))))
        .collect()
}

/// Parses `--share` for `hidden` hidden layers.
pub fn parse_share(s: &str, hidden: usize) -> Result<Vec<ShareTarget>> {
    let targets = match s {
        "full" => vec![ShareTarget::Full; hidden],
        "none" => vec![ShareTarget::Count(0); hidden],
        _ => {
            let (kind, values) = s.split_once(':').unwrap_or(("counts", s));
            match kind {
                "counts" => list::<usize>(values, "count")?.into_iter().map(ShareTarget::Count).collect(),
                "fractions" => list::<f64>(values, "fraction")?.into_iter().map(ShareTarget::Fraction).collect(),
                "thresholds" => list::<f64>(values, "threshold")?.into_iter().map(ShareTarget::Threshold).collect(),
                _ => return Err(config_err(format!("unknown share mode `{kind}`"))),
            }
        }
    };
    if targets.len() != hidden {
        return Err(config_err(format!(
            "--share lists {} layers but the models have {hidden} hidden layers",
            targets.len()
        )));
    }
    Ok(targets)
}

/// Parses `--retrain-schedule` for `hidden` hidden layers.
pub fn parse_schedule(s: &str, hidden: usize) -> Result<RetrainSchedule> {
    match s {
        "none" => Ok(RetrainSchedule::none(hidden)),
        "default" => {
            let per = DEFAULT_RETRAIN_TOTAL / hidden.max(1);
            let mut sched = RetrainSchedule::uniform(hidden, per);
            if let Some(last) = sched.per_layer.last_mut() {
                *last += DEFAULT_RETRAIN_TOTAL - per * hidden;
            }
            Ok(sched)
        }
        _ => {
            let per_layer = list::<usize>(s, "retrain iteration")?;
            if per_layer.len() != hidden {
                return Err(config_err(format!(
                    "--retrain-schedule lists {} layers but the models have {hidden} hidden layers",
                    per_layer.len()
                )));
            }
            Ok(RetrainSchedule { per_layer })
        }
    }
}

/// Train/test data of every task a command may touch.
enum Source {
    Mnist { train: Dataset, test: Dataset },
    Synthetic(Vec<NamedTask>),
}

impl Source {
    fn open(data: Option<&Path>, synthetic: Option<&Path>) -> Result<Source> {
        match (data, synthetic) {
            (Some(_), Some(_)) => Err(config_err("--data and --synthetic are mutually exclusive")),
            (_, Some(spec)) => Ok(Source::Synthetic(load_synthetic(spec)?)),
            (dir, None) => {
                let (train, test) = load_mnist(&data_dir(dir))?;
                Ok(Source::Mnist { train, test })
            }
        }
    }

    fn task(&self, name: &str) -> Result<(&Dataset, &Dataset)> {
        match self {
            Source::Mnist { train, test } => Ok((train, test)),
            Source::Synthetic(tasks) => tasks
                .iter()
                .find(|t| t.name == name)
                .map(|t| (&t.data.train, &t.data.test))
                .ok_or_else(|| config_err(format!("no synthetic task named `{name}`"))),
        }
    }

    fn input_shape(&self, arch: &Architecture, train: &Dataset) -> Result<Shape> {
        match (self, arch) {
            (Source::Mnist { .. }, Architecture::Cnn { .. }) => Ok(Shape::Image { channels: 1, h: 28, w: 28 }),
            (Source::Synthetic(_), Architecture::Cnn { .. }) => {
                Err(config_err("convolutional architectures need image data"))
            }
            _ => Ok(Shape::Flat(train.input_dim())),
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn require<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| config_err(format!("missing --{flag}")))
}

fn positive_lr(lr: f64) -> Result<f64> {
    if lr > 0.0 && lr.is_finite() {
        Ok(lr)
    } else {
        Err(config_err("--lr must be positive"))
    }
}

pub fn cmd_train(args: TrainArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let args = args.resolve()?;
    let arch = parse_arch(&require(args.arch.clone(), "arch")?)?;
    let path = require(args.out.clone(), "out")?;
    let task_name = args.task.clone().unwrap_or_else(|| "mnist".into());
    let cfg = TrainConfig {
        learning_rate: positive_lr(args.lr.unwrap_or(0.1))?,
        batch_size: args.batch.unwrap_or(64),
        iterations: args.iterations.unwrap_or(10_000),
        seed: args.seed.unwrap_or(0),
        loss: Loss::SoftmaxCrossEntropy,
        log_every: args.log_every.unwrap_or(500),
    };
    cfg.validate()?;
    let source = Source::open(args.data.as_deref(), args.synthetic.as_deref())?;
    let (train, test) = source.task(&task_name)?;
    let shape = source.input_shape(&arch, train)?;
    let outputs = train.targets().output_dim();
    let init = arch.build_seeded(TaskId::new(task_name.as_str()), shape, outputs, cfg.seed)?;
    let mut log = String::new();
    let net = train_logged(&init, train, &cfg, &mut |ev| {
        let _ = writeln!(log, "{ev}");
    })?;
    let err = evaluate(&net, test)?;
    let _ = writeln!(log, "final test_error={err:.6}");
    format::save(&path, &StoredModel::Network(net))?;
    if let Some(log_path) = &args.log {
        write_file(log_path, log.as_bytes())?;
    }
    writeln!(out, "task={task_name} iterations={} test_error={err:.6}", cfg.iterations).ok();
    Ok(())
}

pub fn cmd_zip(args: ZipArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let args = args.resolve()?;
    let paths = require(args.models.clone(), "models")?;
    if paths.len() < 2 {
        return Err(config_err("zip needs at least two models"));
    }
    let path = require(args.out.clone(), "out")?;
    let alpha = args.alpha.unwrap_or(0.5);
    let calib_n = args.calib.unwrap_or(2000);
    let seed = args.seed.unwrap_or(0);
    let method = match args.method.as_deref().unwrap_or("hessian") {
        "hessian" => MergeMethod::Hessian,
        "random" => MergeMethod::Random { seed },
        m => return Err(config_err(format!("unknown method `{m}`"))),
    };
    let policy = match args.policy.as_deref().unwrap_or("greedy") {
        "greedy" => MatchingPolicy::Greedy,
        "exhaustive" => MatchingPolicy::Exhaustive,
        p => return Err(config_err(format!("unknown policy `{p}`"))),
    };
    let nets = paths
        .iter()
        .map(|p| format::load_network(p))
        .collect::<std::result::Result<Vec<Network>, _>>()?;
    let hidden = nets[0].depth() - 1;
    let mut plan = MergePlan::new(parse_share(args.share.as_deref().unwrap_or("full"), hidden)?);
    plan.alpha = alpha;
    plan.method = method;
    plan.policy = policy;
    plan.retrain = parse_schedule(args.retrain_schedule.as_deref().unwrap_or("default"), hidden)?;
    plan.train = TrainConfig {
        learning_rate: positive_lr(args.lr.unwrap_or(0.05))?,
        batch_size: args.batch.unwrap_or(64),
        iterations: 0,
        seed,
        loss: Loss::SoftmaxCrossEntropy,
        log_every: 0,
    };
    plan.validate(hidden)?;
    if calib_n == 0 {
        return Err(config_err("--calib must be positive"));
    }

    let source = Source::open(args.data.as_deref(), args.synthetic.as_deref())?;
    let mut calibs: Vec<CalibrationSet> = Vec::with_capacity(nets.len());
    let mut data = Vec::with_capacity(nets.len());
    for net in &nets {
        let (train, test) = source.task(net.task().as_str())?;
        calibs.push(calibration_set(train, calib_n.min(train.len()), seed, net.task().clone())?);
        data.push((train, test));
    }
    let inputs: Vec<TaskInputs<'_>> = calibs
        .iter()
        .zip(&data)
        .map(|(c, (train, test))| TaskInputs {
            calibration: Some(c),
            train: Some(*train),
            eval: Some(*test),
        })
        .collect();
    let (mut zm, report) = zip_models(&nets[0], &nets[1], [inputs[0], inputs[1]], &plan)?;
    let mut text = report.to_string();
    for k in 2..nets.len() {
        let (next, report) = zip_additional(&zm, &nets[k], &inputs[..=k], &plan)?;
        zm = next;
        text.push_str(&report.to_string());
    }
    format::save(&path, &StoredModel::Zipped(zm))?;
    if let Some(report_path) = &args.report {
        write_file(report_path, text.as_bytes())?;
    }
    out.write_all(text.as_bytes()).ok();
    Ok(())
}

pub fn cmd_eval(args: EvalArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let args = args.resolve()?;
    let model = format::load(&require(args.model.clone(), "model")?)?;
    let source = Source::open(args.data.as_deref(), args.synthetic.as_deref())?;
    match &model {
        StoredModel::Network(net) => {
            let (_, test) = source.task(net.task().as_str())?;
            writeln!(out, "task={} error={:.6}", net.task(), evaluate(net, test)?).ok();
        }
        StoredModel::Zipped(zm) => {
            for (t, task) in zm.tasks().iter().enumerate() {
                let (_, test) = source.task(task.as_str())?;
                writeln!(out, "task={task} error={:.6}", evaluate_task(zm, t, test)?).ok();
            }
        }
    }
    Ok(())
}

fn mask_density(mask: Option<&mtz_core::linalg::Matrix>) -> f64 {
    mask.map_or(1.0, |m| {
        let n = m.as_slice().len().max(1);
        m.as_slice().iter().filter(|v| **v != 0.0).count() as f64 / n as f64
    })
}

/// Human-readable structure of a stored model, one `key=value` line per layer.
pub fn describe(model: &StoredModel) -> String {
    let mut s = String::new();
    match model {
        StoredModel::Network(net) => {
            let _ = writeln!(s, "model=network task={} input={:?}", net.task(), net.input_shape());
            for (i, l) in net.layers().iter().enumerate() {
                let _ = writeln!(
                    s,
                    "layer={} kind={} rows={} units={} params={} mask_density={:.4}",
                    i + 1,
                    l.kind().name(),
                    l.weights().rows(),
                    l.units(),
                    l.parameter_count(),
                    mask_density(l.mask())
                );
            }
            let _ = writeln!(
                s,
                "total params={} connections={}",
                net.parameter_count(),
                net.connection_count()
            );
        }
        StoredModel::Zipped(zm) => describe_zipped(zm, &mut s),
    }
    s
}

fn describe_zipped(zm: &ZippedModel, s: &mut String) {
    let names: Vec<&str> = zm.tasks().iter().map(TaskId::as_str).collect();
    let weights: Vec<String> = zm.task_weights().iter().map(|w| format!("{w:.4}")).collect();
    let _ = writeln!(
        s,
        "model=joint tasks={} task_weights={} input={:?}",
        names.join(","),
        weights.join(","),
        zm.input_shape()
    );
    for (i, l) in zm.layers().iter().enumerate() {
        let shared = l.units.iter().filter(|u| u.users.len() > 1).count();
        let _ = writeln!(
            s,
            "layer={} kind={} rows={} units={} shared={} shared_fraction={:.4} mask_density={:.4}",
            i + 1,
            l.kind.name(),
            l.weights.rows(),
            l.units.len(),
            shared,
            shared as f64 / l.units.len().max(1) as f64,
            mask_density(l.mask.as_ref())
        );
    }
    for t in 0..zm.num_tasks() {
        if let Ok(net) = zm.task_network(t) {
            let _ = writeln!(s, "task={} params={}", zm.tasks()[t], net.parameter_count());
        }
    }
    let _ = writeln!(
        s,
        "total params={} connections={}",
        zm.parameter_count(),
        zm.connection_count()
    );
}

pub fn cmd_inspect(args: InspectArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let args = args.resolve()?;
    match (&args.model, &args.report) {
        (Some(model), None) => {
            let m = format::load(model)?;
            out.write_all(describe(&m).as_bytes()).ok();
        }
        (None, Some(report)) => {
            let text = fs::read_to_string(report).map_err(|source| CliError::Io {
                path: report.display().to_string(),
                source,
            })?;
            for rec in parse_records(&text) {
                if rec.tag.as_deref() == Some("summary") {
                    writeln!(
                        out,
                        "summary: tasks {} | params {} -> {} | shared units {}",
                        rec.get("tasks").unwrap_or("?"),
                        rec.get("params_before").unwrap_or("?"),
                        rec.get("params_after").unwrap_or("?"),
                        rec.get("shared").unwrap_or("?")
                    )
                    .ok();
                } else if let Some(layer) = rec.get("layer") {
                    writeln!(
                        out,
                        "layer {layer} ({}): shared {} of {}/{} | d min {} median {} max {} | delta_e {}",
                        rec.get("kind").unwrap_or("?"),
                        rec.get("shared").unwrap_or("?"),
                        rec.get("candidates_a").unwrap_or("?"),
                        rec.get("candidates_b").unwrap_or("?"),
                        rec.get("d_min").unwrap_or("?"),
                        rec.get("d_median").unwrap_or("?"),
                        rec.get("d_max").unwrap_or("?"),
                        rec.get("delta_e").unwrap_or("?")
                    )
                    .ok();
                }
            }
        }
        _ => return Err(config_err("inspect needs exactly one of --model or --report")),
    }
    Ok(())
}

pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Zip(a) => cmd_zip(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Inspect(a) => cmd_inspect(a, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architecture_names() {
        assert_eq!(parse_arch("mlp-300-100").unwrap(), Architecture::mlp(&[300, 100]));
        assert_eq!(parse_arch("cnn-small").unwrap(), Architecture::small_cnn());
        assert!(matches!(
            parse_arch("resmlp-16-8-2").unwrap(),
            Architecture::ResidualMlp { width: 16, hidden: 8, blocks: 2 }
        ));
        assert!(parse_arch("mlp-0").is_err());
        assert!(parse_arch("vgg").is_err());
    }

    #[test]
    fn share_and_schedule_specs() {
        assert_eq!(parse_share("full", 2).unwrap(), vec![ShareTarget::Full; 2]);
        assert_eq!(parse_share("100,50", 2).unwrap(), vec![ShareTarget::Count(100), ShareTarget::Count(50)]);
        assert_eq!(parse_share("thresholds:0.5,1", 2).unwrap()[1], ShareTarget::Threshold(1.0));
        assert!(parse_share("counts:1", 2).is_err());
        assert_eq!(parse_schedule("default", 2).unwrap().total(), DEFAULT_RETRAIN_TOTAL);
        assert_eq!(parse_schedule("3,4", 2).unwrap().per_layer, vec![3, 4]);
        assert!(parse_schedule("x", 2).is_err());
    }

    #[test]
    fn config_errors_have_their_own_exit_code() {
        assert_eq!(config_err("x").exit_code(), EXIT_CONFIG);
        let e: CliError = mtz_core::Error::AtLayer {
            layer: 1,
            source: Box::new(mtz_core::Error::InvalidConfig("bad".into())),
        }
        .into();
        assert_eq!(e.exit_code(), EXIT_CONFIG);
        let e: CliError = mtz_core::Error::EmptyData.into();
        assert_eq!(e.exit_code(), EXIT_RUNTIME);
    }
}
