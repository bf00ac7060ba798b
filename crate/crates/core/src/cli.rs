//! `kflo` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data or model
//! file error, 4 training divergence, 5 verification failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kflo::KfloConfig;
use crate::model::{tl_init, Arch, LayerKind, Mode, ModelError, ModelGraph, NodeParams};
use crate::tensor::{max_relative_deviation, Tensor};
use crate::train::{self, load_cifar10_bin, load_mnist_idx, DataError, Dataset, Split, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Divergence(String),
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
            CliError::Verification(_) => EXIT_VERIFY,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Divergence(m) => write!(f, "divergence: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::Mode { .. } | ModelError::Kflo(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Empty | DataError::Fraction(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Model(m) => m.into(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "kflo", version, about = "Train, collapse and verify kernel-filtering overparameterized networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a training-mode model file plus metrics.
    Train(TrainArgs),
    /// Fold every cascade into its kernel and write a deployed model.
    Collapse {
        input: PathBuf,
        #[arg(long = "out-model", short = 'o')]
        out: PathBuf,
    },
    /// Compare expanded, collapsed and feature-filtering forward passes.
    Verify {
        input: PathBuf,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Input shape `C,H,W`; defaults to 28x28 for one channel, 32x32 otherwise.
        #[arg(long)]
        input_shape: Option<String>,
    },
    /// Print the accuracy of a model file on a dataset split.
    Eval {
        input: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Build an overparameterized model from stacked pretrained kernels.
    InitTl {
        #[arg(long, default_value = "lenet5")]
        arch: String,
        /// Deployed pretrained model; repeat once per network.
        #[arg(long, required = true)]
        pretrained: Vec<PathBuf>,
        /// Number of kernels per cascade (the width multiplier is the number of pretrained models).
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "out-model", short = 'o')]
        out: PathBuf,
    },
    /// Train a grid of depth and width multipliers and print a comparison table.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,3")]
        depths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        rhos: Vec<f64>,
        #[arg(long)]
        out_table: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// `mnist` (IDX files) or `cifar10` (binary batches).
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Per-class fraction of the training split to use.
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// `key=value` file; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<String>,
    /// Overparameterization as `BxR` (depth x width); `1x1` is vanilla.
    #[arg(long)]
    pub kflo: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs at which the learning rate is multiplied by `lr-decay`.
    #[arg(long, value_delimiter = ',')]
    pub milestones: Option<Vec<usize>>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Decay on plain and collapsed kernels.
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub wd_cascade: Option<f64>,
    /// EMA decay of the weights; evaluated alongside the model when set.
    #[arg(long)]
    pub ema: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long = "out-model")]
    pub out_model: Option<PathBuf>,
    #[arg(long = "out-metrics")]
    pub out_metrics: Option<PathBuf>,
}

/// Fully resolved training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: Arch,
    pub kflo: KfloConfig,
    pub data: DataKind,
    pub data_dir: PathBuf,
    pub num_classes: usize,
    pub train: TrainConfig,
    pub out_model: Option<PathBuf>,
    pub out_metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Mnist,
    Cifar10,
}

impl FromStr for DataKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "mnist" => Ok(DataKind::Mnist),
            "cifar10" => Ok(DataKind::Cifar10),
            other => Err(CliError::Config(format!("unknown dataset {other:?} (mnist, cifar10)"))),
        }
    }
}

impl std::fmt::Display for DataKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataKind::Mnist => "mnist",
            DataKind::Cifar10 => "cifar10",
        })
    }
}

fn read_config_file(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        map.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(map)
}

struct Resolver {
    file: BTreeMap<String, String>,
}

impl Resolver {
    fn get<T: FromStr>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T> {
        Ok(self.get_opt(key, flag)?.unwrap_or(default))
    }

    fn get_opt<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> CliResult<Option<T>> {
        let from_file = self.file.remove(key);
        if flag.is_some() {
            return Ok(flag);
        }
        from_file
            .map(|v| v.parse().map_err(|_| CliError::Config(format!("bad value {v:?} for {key}"))))
            .transpose()
    }
}

impl TrainArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let file = match &self.config {
            Some(p) => read_config_file(p)?,
            None => BTreeMap::new(),
        };
        let mut r = Resolver { file };
        let d = TrainConfig::default();
        let arch: String = r.get("arch", self.arch.clone(), "lenet5".into())?;
        let kflo: String = r.get("kflo", self.kflo.clone(), "1x1".into())?;
        let data: String = r.get("data", self.data.data.clone(), "mnist".into())?;
        let data_dir: Option<PathBuf> = r.get_opt("data_dir", self.data.data_dir.clone())?;
        let milestones = match self.milestones.clone() {
            Some(m) => m,
            None => match r.file.remove("milestones") {
                Some(s) if !s.is_empty() => s
                    .split(',')
                    .map(|m| m.trim().parse().map_err(|_| CliError::Config(format!("bad milestone {m:?}"))))
                    .collect::<CliResult<_>>()?,
                _ => d.milestones.clone(),
            },
        };
        let wd = r.get("wd", self.wd, d.wd_plain)?;
        let train = TrainConfig {
            lr: r.get("lr", self.lr, d.lr)?,
            milestones,
            lr_decay: r.get("lr_decay", self.lr_decay, d.lr_decay)?,
            momentum: r.get("momentum", self.momentum, d.momentum)?,
            wd_plain: wd,
            wd_cascade: r.get("wd_cascade", self.wd_cascade, d.wd_cascade)?,
            wd_collapsed: wd,
            ema_decay: r.get_opt("ema", self.ema)?,
            batch_size: r.get("batch_size", self.batch_size, d.batch_size)?,
            epochs: r.get("epochs", self.epochs, d.epochs)?,
            seed: r.get("seed", self.seed, d.seed)?,
            data_fraction: r.get("fraction", self.data.fraction, d.data_fraction)?,
            augment: r.get("augment", self.augment, d.augment)?,
        };
        let num_classes = r.get("num_classes", self.num_classes, 10)?;
        let out_model = r.get_opt("out_model", self.out_model.clone())?;
        let out_metrics = r.get_opt("out_metrics", self.out_metrics.clone())?;
        if let Some(key) = r.file.keys().next() {
            return Err(CliError::Config(format!("unknown config key {key:?}")));
        }
        train.validate()?;
        let data_dir = data_dir.ok_or_else(|| CliError::Config("--data-dir is required".into()))?;
        Ok(RunConfig {
            arch: arch.parse()?,
            kflo: kflo.parse().map_err(|e: crate::kflo::KfloError| CliError::Config(e.to_string()))?,
            data: data.parse()?,
            data_dir,
            num_classes,
            train,
            out_model,
            out_metrics,
        })
    }
}

impl RunConfig {
    /// `key=value` pairs of every effective setting, in a fixed order.
    pub fn describe(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("arch".to_string(), self.arch.to_string()),
            ("kflo".to_string(), self.kflo.to_string()),
            ("data".to_string(), self.data.to_string()),
            ("data_dir".to_string(), self.data_dir.display().to_string()),
            ("num_classes".to_string(), self.num_classes.to_string()),
        ];
        out.extend(self.train.describe());
        out
    }

    pub fn build_model(&self, kflo: KfloConfig, sample_shape: [usize; 3]) -> CliResult<ModelGraph<f32>> {
        Ok(self.arch.build(kflo, self.num_classes, sample_shape, self.train.seed)?)
    }
}

fn find_file(dir: &Path, stem: &str) -> CliResult<PathBuf> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(CliError::Data(format!("missing data file {} (or .gz)", plain.display())))
}

/// Loads one split of a dataset directory.
pub fn load_split(kind: DataKind, dir: &Path, split: Split, fraction: f64, seed: u64) -> CliResult<Dataset> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("data directory {} does not exist", dir.display())));
    }
    let ds = match (kind, split) {
        (DataKind::Mnist, Split::Train) => load_mnist_idx(
            find_file(dir, "train-images-idx3-ubyte")?,
            find_file(dir, "train-labels-idx1-ubyte")?,
        )?
        .stratified_fraction(fraction, seed)?,
        (DataKind::Mnist, Split::Test) => load_mnist_idx(
            find_file(dir, "t10k-images-idx3-ubyte")?,
            find_file(dir, "t10k-labels-idx1-ubyte")?,
        )?,
        (DataKind::Cifar10, Split::Train) => {
            let paths = (1..=5)
                .map(|i| find_file(dir, &format!("data_batch_{i}.bin")))
                .collect::<CliResult<Vec<_>>>()?;
            load_cifar10_bin(&paths, fraction, seed)?
        }
        (DataKind::Cifar10, Split::Test) => load_cifar10_bin(&[find_file(dir, "test_batch.bin")?], 1.0, seed)?,
    };
    Ok(ds.with_split(split))
}

/// Parses arguments and runs the command; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult {
    match command {
        Command::Train(args) => cmd_train(&args.resolve()?),
        Command::Collapse { input, out } => cmd_collapse(&input, &out),
        Command::Verify {
            input,
            trials,
            tolerance,
            seed,
            input_shape,
        } => {
            let shape = input_shape.map(|s| parse_shape(&s)).transpose()?;
            cmd_verify(&input, trials, tolerance, seed, shape)
        }
        Command::Eval { input, data, split } => cmd_eval(&input, &data, &split),
        Command::InitTl {
            arch,
            pretrained,
            depth,
            num_classes,
            seed,
            out,
        } => cmd_init_tl(&arch, &pretrained, depth, num_classes, seed, &out),
        Command::Ablate {
            train,
            depths,
            rhos,
            out_table,
        } => cmd_ablate(&train.resolve()?, &depths, &rhos, out_table.as_deref()),
    }
}

fn parse_shape(s: &str) -> CliResult<[usize; 3]> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse().map_err(|_| CliError::Config(format!("bad input shape {s:?}"))))
        .collect::<CliResult<_>>()?;
    dims.try_into()
        .map_err(|_| CliError::Config(format!("input shape {s:?} must have three dimensions")))
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult {
    std::fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult {
    let train_set = load_split(cfg.data, &cfg.data_dir, Split::Train, 1.0, cfg.train.seed)?;
    let test_set = load_split(cfg.data, &cfg.data_dir, Split::Test, 1.0, cfg.train.seed)?;
    let mut model = cfg.build_model(cfg.kflo, train_set.sample_shape())?;
    println!(
        "arch={} kflo={} params={} deployed_params={} train_samples={} test_samples={}",
        cfg.arch,
        cfg.kflo,
        model.param_count(),
        model.deployed_param_count(),
        train_set.len(),
        test_set.len()
    );
    let report = train::train(&mut model, &train_set, Some(&test_set), &cfg.train)?;
    let mut metrics = String::from("# command=train\n");
    for (k, v) in cfg.describe() {
        let _ = writeln!(metrics, "# {k}={v}");
    }
    for record in &report.records {
        println!("{record}");
        let _ = writeln!(metrics, "{record}");
    }
    if let Some(path) = &cfg.out_model {
        model.save(path)?;
    }
    if let Some(path) = &cfg.out_metrics {
        write_file(path, metrics.as_bytes())?;
    }
    Ok(())
}

pub fn cmd_collapse(input: &Path, out: &Path) -> CliResult {
    let model = ModelGraph::load(input)?;
    if model.mode() == Mode::Deployed {
        return Err(CliError::Config(format!("{} is already deployed", input.display())));
    }
    let deployed = model.collapse_model()?;
    deployed.save(out)?;
    println!(
        "params_before={} params_after={} cascade_params_removed={}",
        model.param_count(),
        deployed.param_count(),
        model.cascade_param_count()
    );
    Ok(())
}

fn default_input_shape(model: &ModelGraph<f32>) -> [usize; 3] {
    let first = model.nodes().iter().find(|n| n.kind().is_filtering());
    let Some(node) = first else { return [1, 28, 28] };
    let kernel = match node.params() {
        NodeParams::Plain { kernel, .. } => model.params().value(*kernel),
        NodeParams::Kflo { w1, .. } => model.params().value(*w1),
        NodeParams::None => unreachable!(),
    };
    match node.kind() {
        LayerKind::Fc => [1, 1, kernel.shape()[1]],
        _ => {
            let c = kernel.shape()[1] * node.geometry().groups;
            let side = if c == 1 { 28 } else { 32 };
            [c, side, side]
        }
    }
}

pub fn cmd_verify(input: &Path, trials: usize, tolerance: f64, seed: u64, shape: Option<[usize; 3]>) -> CliResult {
    let model = ModelGraph::load(input)?;
    if model.mode() != Mode::Training {
        return Err(CliError::Config(format!("{} is deployed; verify needs a training-mode model", input.display())));
    }
    if trials == 0 {
        return Err(CliError::Config("--trials must be positive".into()));
    }
    let [c, h, w] = shape.unwrap_or_else(|| default_input_shape(&model));
    let deployed = model.collapse_model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut worst_layer) = (0.0f64, String::from("-"));
    let mut worst_path = 0.0f64;
    for _ in 0..trials {
        let x = Tensor::from_fn(&[1, c, h, w], |_| rng.gen_range(-2.0f32..2.0));
        let expanded = model.forward(&x)?;
        let collapsed = deployed.forward(&x)?;
        let oracle = model.forward_feature_filtering(&x)?;
        let dev = max_relative_deviation(&expanded, &oracle).max(max_relative_deviation(&collapsed, &oracle));
        worst_path = if dev.is_nan() { f64::INFINITY } else { worst_path.max(dev) };
        for d in model.layer_deviations(&x)? {
            let dev = if d.deviation.is_nan() { f64::INFINITY } else { d.deviation };
            if dev > worst || (dev.is_infinite() && worst_layer == "-") {
                worst = dev;
                worst_layer = d.name;
            }
        }
    }
    println!("trials={trials} max_rel_deviation={worst_path:e} worst_layer={worst_layer} layer_deviation={worst:e}");
    if !(worst_path <= tolerance && worst <= tolerance) {
        return Err(CliError::Verification(format!(
            "deviation {:e} exceeds tolerance {tolerance:e} (worst layer {worst_layer})",
            worst_path.max(worst)
        )));
    }
    Ok(())
}

pub fn cmd_eval(input: &Path, data: &DataArgs, split: &str) -> CliResult {
    let model = ModelGraph::load(input)?;
    let kind: DataKind = data.data.as_deref().unwrap_or("mnist").parse()?;
    let dir = data.data_dir.as_ref().ok_or_else(|| CliError::Config("--data-dir is required".into()))?;
    let split = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(CliError::Config(format!("unknown split {other:?} (train, test)"))),
    };
    let ds = load_split(kind, dir, split, data.fraction.unwrap_or(1.0), 0)?;
    let acc = train::evaluate(&model, &ds)?;
    println!("accuracy={acc:.4} samples={} mode={}", ds.len(), model.mode());
    Ok(())
}

pub fn cmd_init_tl(
    arch: &str,
    pretrained: &[PathBuf],
    depth: usize,
    num_classes: Option<usize>,
    seed: u64,
    out: &Path,
) -> CliResult {
    let arch: Arch = arch.parse()?;
    let nets = pretrained
        .iter()
        .map(|p| ModelGraph::load_expecting(p, Mode::Deployed))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let input = default_input_shape(&nets[0]);
    let head = nets[0]
        .params()
        .iter()
        .last()
        .map(|(_, s)| s.value().numel())
        .ok_or_else(|| CliError::Config("pretrained model has no parameters".into()))?;
    let kflo = KfloConfig::new(depth, nets.len() as f64).map_err(|e| CliError::Config(e.to_string()))?;
    let mut model = arch.build::<f32>(kflo, num_classes.unwrap_or(head), input, seed)?;
    let report = tl_init(&mut model, &nets)?;
    model.save(out)?;
    println!(
        "kflo={kflo} pretrained={} stacked={} reinitialized={}",
        nets.len(),
        report.stacked.join(","),
        if report.reinitialized.is_empty() { "-".to_string() } else { report.reinitialized.join(",") }
    );
    Ok(())
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub kflo: KfloConfig,
    pub train_params: usize,
    pub deployed_params: usize,
    pub test_acc: f64,
    pub train_loss: f64,
    pub seconds: f64,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("config  train_params  deployed_params  test_acc  train_loss  seconds\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<6}  {:>12}  {:>15}  {:>8.4}  {:>10.4}  {:>7.1}",
            r.kflo.to_string(),
            r.train_params,
            r.deployed_params,
            r.test_acc,
            r.train_loss,
            r.seconds
        );
    }
    s
}

pub fn cmd_ablate(cfg: &RunConfig, depths: &[usize], rhos: &[f64], out_table: Option<&Path>) -> CliResult {
    let train_set = load_split(cfg.data, &cfg.data_dir, Split::Train, 1.0, cfg.train.seed)?;
    let test_set = load_split(cfg.data, &cfg.data_dir, Split::Test, 1.0, cfg.train.seed)?;
    let mut grid = vec![KfloConfig::VANILLA];
    for &b in depths {
        for &r in rhos {
            grid.push(KfloConfig::new(b, r).map_err(|e| CliError::Config(e.to_string()))?);
        }
    }
    let mut rows = Vec::new();
    for kflo in grid {
        let start = Instant::now();
        let mut model = cfg.build_model(kflo, train_set.sample_shape())?;
        let report = train::train(&mut model, &train_set, Some(&test_set), &cfg.train)?;
        let last = report.records.last();
        rows.push(AblationRow {
            kflo,
            train_params: model.param_count(),
            deployed_params: model.deployed_param_count(),
            test_acc: last.map_or(f64::NAN, |r| r.test_acc),
            train_loss: last.map_or(f64::NAN, |r| r.train_loss),
            seconds: start.elapsed().as_secs_f64(),
        });
        eprintln!("finished {kflo}");
    }
    let table = ablation_table(&rows);
    print!("{table}");
    if let Some(path) = out_table {
        write_file(path, table.as_bytes())?;
    }
    Ok(())
}
