use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use trinet::data::fit_normalizer;
use trinet::train::fit_with_observer;
use trinet::{fit_whitened, Architecture, FlowModel, Nonlinearity, SplitKind, TrainConfig};

use crate::error::{CliError, CliResult};
use crate::model_file::{creator, ModelFile, ModelMeta};
use crate::pipeline::{prepare, DataArgs, LambdaArg, Toggle};

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Hidden units per dimension [default: 16].
    #[arg(long)]
    pub block_size: Option<usize>,
    /// Number of stacked units [default: 4].
    #[arg(long)]
    pub layers: Option<usize>,
    /// Reverse the coordinate order between units [default: on].
    #[arg(long, value_enum)]
    pub flip: Option<Toggle>,
    /// `tanh` or `log` [default: log].
    #[arg(long)]
    pub nonlinearity: Option<Nonlinearity>,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// L1 penalty weight on all raw parameters.
    #[arg(long, default_value_t = 0.0)]
    pub l1: f64,
    /// Random circular shifts up to this fraction of the image side.
    #[arg(long)]
    pub augment_shift: Option<f64>,
    /// Logit preprocessing: mnist, cifar, none or a value. Defaults to the
    /// preset for image formats and none for CSV.
    #[arg(long)]
    pub lambda: Option<LambdaArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the dequantization noise [default: --seed].
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// History CSV [default: <out>.history.csv].
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Run metadata JSON [default: <out>.json].
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 1e-7)]
    pub min_lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test_frac: f64,
    /// Continue from an existing model file.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    creator: String,
    seed: u64,
    data_seed: u64,
    data: Vec<String>,
    format: String,
    samples: usize,
    n_dim: usize,
    splits: SplitRecord,
    logit_lambda: Option<f64>,
    architecture: ArchRecord,
    resumed_from: Option<String>,
    normalizer_log_det: Option<f64>,
    config: ConfigRecord<'a>,
    best_epoch: Option<usize>,
    best_val_nll: Option<f64>,
    best_train_nll: Option<f64>,
    epochs_run: usize,
}

#[derive(Serialize)]
struct SplitRecord {
    train: [usize; 2],
    validation: [usize; 2],
    test: [usize; 2],
}

#[derive(Serialize)]
struct ArchRecord {
    block_size: usize,
    n_layers: usize,
    nonlinearity: String,
    flip: bool,
}

#[derive(Serialize)]
struct ConfigRecord<'a> {
    lr: f64,
    batch: usize,
    l1: f64,
    patience: usize,
    lr_decay: f64,
    min_lr: f64,
    max_epochs: usize,
    augment_shift: Option<f64>,
    val_frac: f64,
    test_frac: f64,
    history: &'a str,
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl TrainArgs {
    fn arch_for(&self, n_dim: usize) -> Architecture {
        Architecture {
            n_dim,
            block_size: self.block_size.unwrap_or(16),
            n_layers: self.layers.unwrap_or(4),
            nonlinearity: self.nonlinearity.unwrap_or(Nonlinearity::LogSym),
            flip: self.flip.is_none_or(Toggle::enabled),
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr,
            batch_size: self.batch,
            l1_eta: self.l1,
            patience_epochs: self.patience,
            lr_decay: self.lr_decay,
            min_lr: self.min_lr,
            max_epochs: self.max_epochs,
            seed: self.seed,
            augment_shift: self.augment_shift,
            ..TrainConfig::default()
        }
    }

    /// Explicit architecture flags must agree with the model being resumed.
    fn check_resume(&self, file: &ModelFile, n_dim: usize, lambda: Option<f64>) -> CliResult<()> {
        let m = &file.model;
        let l0 = &m.layers()[0];
        let mut bad = Vec::new();
        if m.n_dim() != n_dim {
            bad.push(format!("data has {n_dim} dimensions, model {}", m.n_dim()));
        }
        if self.block_size.is_some_and(|b| b != l0.block_size()) {
            bad.push(format!("--block-size differs from the model's {}", l0.block_size()));
        }
        if self.layers.is_some_and(|l| l != m.layers().len()) {
            bad.push(format!("--layers differs from the model's {}", m.layers().len()));
        }
        if self.nonlinearity.is_some_and(|nl| nl != l0.nonlinearity()) {
            bad.push(format!("--nonlinearity differs from the model's {}", l0.nonlinearity()));
        }
        if let Some(f) = self.flip {
            if m.flip_after().iter().any(|&x| x != f.enabled()) {
                bad.push("--flip differs from the model".into());
            }
        }
        if file.meta.logit_lambda != lambda {
            bad.push(format!(
                "preprocessing lambda {lambda:?} differs from the model's {:?}",
                file.meta.logit_lambda
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::config(format!("cannot resume: {}", bad.join("; "))))
        }
    }
}

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let cfg = args.train_config();
    cfg.validate()?;
    let raw = args.data.load()?;
    let lambda = match args.lambda {
        Some(l) => l.0,
        None => args.data.format.default_lambda(),
    };
    let data_seed = args.data_seed.unwrap_or(args.seed);
    let resume = args.resume.as_deref().map(ModelFile::load).transpose()?;
    if let Some(file) = &resume {
        args.check_resume(file, raw.n_dim(), lambda)?;
    }
    let ds = prepare(raw, lambda, data_seed, args.val_frac, args.test_frac)?;

    let history_path = args.history.clone().unwrap_or_else(|| with_suffix(&args.out, ".history.csv"));
    let meta_path = args.meta.clone().unwrap_or_else(|| with_suffix(&args.out, ".json"));
    let quiet = args.quiet;
    let progress = |r: &trinet::train::EpochRecord| {
        if !quiet {
            let _ = writeln!(
                std::io::stderr(),
                "epoch {:>4}  train {:.6}  val {:.6}  lr {:e}  {:.1}s",
                r.epoch, r.train_nll, r.val_nll, r.lr, r.seconds
            );
        }
    };

    let (best, history, log_det) = match &resume {
        // a saved model already works in data coordinates
        Some(file) => {
            let (best, h) = fit_with_observer(file.model.clone(), &ds, &cfg, progress)?;
            (best, h, None)
        }
        None => {
            let norm = fit_normalizer(&ds.split_samples(SplitKind::Train))?;
            let model = FlowModel::init(&args.arch_for(ds.n_dim()), args.seed)?;
            let (best, h) = fit_whitened(model, &ds, &norm, &cfg, progress)?;
            (best, h, Some(norm.log_det()))
        }
    };

    let meta = ModelMeta {
        seed: args.seed,
        creator: creator(),
        logit_lambda: lambda,
        image_geom: ds.image_geom(),
        data_seed: lambda.map(|_| data_seed),
        val_frac: Some(args.val_frac),
        test_frac: Some(args.test_frac),
        extra: Default::default(),
    };
    let file = ModelFile::new(best, meta);
    file.save(&args.out)?;
    std::fs::write(&history_path, history.to_csv()).map_err(|e| CliError::io(&history_path, e))?;

    let l0 = &file.model.layers()[0];
    let range = |k| {
        let r = ds.split_range(k);
        [r.start, r.end]
    };
    let history_name = history_path.display().to_string();
    let record = RunRecord {
        creator: creator(),
        seed: args.seed,
        data_seed,
        data: args.data.data.iter().map(|p| p.display().to_string()).collect(),
        format: format!("{:?}", args.data.format).to_lowercase(),
        samples: ds.len(),
        n_dim: ds.n_dim(),
        splits: SplitRecord {
            train: range(SplitKind::Train),
            validation: range(SplitKind::Validation),
            test: range(SplitKind::Test),
        },
        logit_lambda: lambda,
        architecture: ArchRecord {
            block_size: l0.block_size(),
            n_layers: file.model.layers().len(),
            nonlinearity: l0.nonlinearity().to_string(),
            flip: file.model.flip_after().iter().any(|&f| f),
        },
        resumed_from: args.resume.as_ref().map(|p| p.display().to_string()),
        normalizer_log_det: log_det,
        config: ConfigRecord {
            lr: args.lr,
            batch: args.batch,
            l1: args.l1,
            patience: args.patience,
            lr_decay: args.lr_decay,
            min_lr: args.min_lr,
            max_epochs: args.max_epochs,
            augment_shift: args.augment_shift,
            val_frac: args.val_frac,
            test_frac: args.test_frac,
            history: &history_name,
        },
        best_epoch: history.best_epoch(),
        best_val_nll: history.best_val(),
        best_train_nll: history.best_train(),
        epochs_run: history.records.len(),
    };
    let json = serde_json::to_string_pretty(&record)
        .map_err(|e| CliError::config(format!("cannot encode run metadata: {e}")))?;
    std::fs::write(&meta_path, json + "\n").map_err(|e| CliError::io(&meta_path, e))?;

    if let (Some(val), Some(epoch)) = (history.best_val(), history.best_epoch()) {
        println!("best epoch={epoch} val_nll={val}");
    }
    println!("model={}", args.out.display());
    Ok(())
}
