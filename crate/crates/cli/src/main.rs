mod report;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aswl::data::{self, DATA_DIR_ENV, MNIST_VALIDATION};
use aswl::pruning::global_pruned_ratio;
use aswl::store::{self, CHECKPOINT_MAGIC, SPARSE_MAGIC};
use aswl::train::{evaluate, evaluate_with};
use aswl::{Architecture, Dataset, Error, Model, OptimizerKind, Result, Split, SparseModel, TrainConfig, Trainer};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aswl", version, about = "Attention-driven weight pruning: train, evaluate, export, report")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing checkpoint.bin, metrics.csv and layers.csv.
    Train(TrainArgs),
    /// Print accuracy and pruned ratio of a checkpoint or sparse model.
    Eval(EvalArgs),
    /// Fold attentions and write the sparse inference file.
    Export(ExportArgs),
    /// Per-layer pruning details and compression figures of a checkpoint.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetName {
    Mnist,
    Cifar10,
}

impl DatasetName {
    fn dir_name(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: DatasetName,
    /// Dataset root; defaults to $ASWL_DATA_DIR, then ./data.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Training images held out from the end of the training files for validation.
    #[arg(long, default_value_t = MNIST_VALIDATION)]
    val_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Preset name (mnist-cnn, cifar-cnn) or descriptor file.
    #[arg(long, default_value = "mnist-cnn")]
    arch: String,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 5e-4)]
    lambda: f64,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerName,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.98)]
    lr_decay: f64,
    /// SGD momentum.
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Validation accuracy every N iterations in iterations.csv.
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Also write iterations.csv with one row per training step.
    #[arg(long)]
    per_iteration: bool,
    /// Train the unpruned reference: γ = 0, attentions fixed at 1.
    #[arg(long)]
    dense_baseline: bool,
    /// Use only the first N training images.
    #[arg(long)]
    train_limit: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint (ASWC) or sparse model (ASWL).
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for layers.csv; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Export(a) => cmd_export(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFinite { .. } => 3,
        Error::State(_) => 1,
        _ => 2,
    }
}

fn data_root(args: &DataArgs) -> PathBuf {
    let root = args
        .data_dir
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    let nested = root.join(args.dataset.dir_name());
    if nested.is_dir() {
        nested
    } else {
        root
    }
}

fn load_raw(args: &DataArgs, split: Split) -> Result<Dataset> {
    let root = data_root(args);
    match args.dataset {
        DatasetName::Mnist => data::load_mnist(&root, split),
        DatasetName::Cifar10 => data::load_cifar10(&root, split),
    }
    .map_err(|e| match e {
        Error::Io(io) => Error::Input(format!("cannot read dataset under {}: {io}", root.display())),
        other => other,
    })
}

/// Training images minus the held-out tail, and the tail itself.
fn load_train_val(args: &DataArgs) -> Result<(Dataset, Dataset)> {
    load_raw(args, Split::Train)?.split_tail(args.val_size)
}

fn load_split(args: &DataArgs, split: Split) -> Result<Dataset> {
    match split {
        Split::Test => load_raw(args, Split::Test),
        Split::Train => Ok(load_train_val(args)?.0),
        Split::Val => Ok(load_train_val(args)?.1),
    }
}

fn check_input_shape(arch: &Architecture, ds: &Dataset) -> Result<()> {
    if arch.input_shape() != &ds.images().shape()[1..] {
        return Err(Error::Input(format!(
            "architecture expects input {:?}, dataset has {:?}",
            arch.input_shape(),
            &ds.images().shape()[1..]
        )));
    }
    Ok(())
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        alpha: a.alpha,
        gamma: if a.dense_baseline { 0.0 } else { a.gamma },
        lambda: a.lambda,
        optimizer: match a.optimizer {
            OptimizerName::Adam => OptimizerKind::adam(),
            OptimizerName::Sgd => OptimizerKind::sgd(a.momentum),
        },
        lr: a.lr,
        lr_decay: a.lr_decay,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        eval_every: a.eval_every,
        freeze_attention: a.dense_baseline,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let config = train_config(&a);
    config.validate()?;
    let arch = Architecture::resolve(&a.arch)?;

    let (train, val) = load_train_val(&a.data)?;
    let train = match a.train_limit {
        Some(n) => train.take(n),
        None => train,
    };
    check_input_shape(&arch, &train)?;
    let test = load_split(&a.data, Split::Test)?;

    std::fs::create_dir_all(&a.out)?;
    let mut model = Model::<f32>::build(&arch, a.seed);
    if a.dense_baseline {
        model.set_attentions(1.0);
    }
    let mut trainer = Trainer::new(model, config)?;

    let mut epochs = Vec::new();
    let mut iterations = Vec::new();
    for _ in 0..a.epochs {
        let m = trainer.train_epoch(&train, Some(&val), |m| {
            if a.per_iteration {
                iterations.push(report::iteration_row(m));
            }
        })?;
        eprintln!(
            "epoch {} train_acc={:.4} val_acc={:.4} ce={:.4} pruned={:.4}",
            m.epoch, m.train_acc, m.val_acc, m.ce_loss, m.global_pruned_ratio
        );
        epochs.push(report::metrics_row(&m));
    }

    store::save_checkpoint(&trainer, &a.out.join("checkpoint.bin"))?;
    report::write_csv(create(&a.out.join("metrics.csv"))?, &report::METRICS_HEADER, &epochs)?;
    let layers = report::layer_rows(&trainer.model, trainer.config.alpha)?;
    report::write_csv(create(&a.out.join("layers.csv"))?, &report::LAYERS_HEADER, &layers)?;
    if a.per_iteration {
        report::write_csv(
            create(&a.out.join("iterations.csv"))?,
            &report::ITERATIONS_HEADER,
            &iterations,
        )?;
    }

    let acc = evaluate(&trainer.model, &test)?;
    println!(
        "accuracy={acc:.6} pruned_ratio={:.6}",
        global_pruned_ratio(&trainer.model)
    );
    Ok(())
}

fn read_magic(path: &Path) -> Result<[u8; 4]> {
    let bytes = std::fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    bytes
        .get(..4)
        .and_then(|m| m.try_into().ok())
        .ok_or_else(|| Error::Input(format!("{}: file too short", path.display())))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let magic = read_magic(&a.model)?;
    let split = match a.split {
        SplitName::Train => Split::Train,
        SplitName::Val => Split::Val,
        SplitName::Test => Split::Test,
    };
    let (acc, pruned) = if &magic == CHECKPOINT_MAGIC {
        let trainer = store::load_checkpoint::<f32>(&a.model)?;
        let ds = load_split(&a.data, split)?;
        check_input_shape(trainer.model.arch(), &ds)?;
        (evaluate(&trainer.model, &ds)?, global_pruned_ratio(&trainer.model))
    } else if &magic == SPARSE_MAGIC {
        let sparse = SparseModel::read(&a.model)?;
        let inference = sparse.to_inference()?;
        let ds = load_split(&a.data, split)?;
        check_input_shape(inference.arch(), &ds)?;
        (evaluate_with(&ds, |x| inference.forward(x))?, sparse.pruned_ratio())
    } else {
        return Err(Error::Input(format!(
            "{}: neither a checkpoint nor a sparse model",
            a.model.display()
        )));
    };
    println!("accuracy={acc:.6} pruned_ratio={pruned:.6}");
    Ok(())
}

fn load_trainer(path: &Path) -> Result<Trainer<f32>> {
    if !path.is_file() {
        return Err(Error::Input(format!("{}: no such checkpoint", path.display())));
    }
    store::load_checkpoint(path)
}

fn print_compression(model: &Model<f32>) {
    let r = store::report_compression(model);
    println!(
        "dense_bytes={} sparse_bytes={} ratio={:.4} value_bytes={} index_bytes={}",
        r.dense_bytes, r.sparse_bytes, r.ratio, r.value_bytes, r.index_bytes
    );
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let trainer = load_trainer(&a.checkpoint)?;
    store::export_sparse(&trainer.model).write(&a.out)?;
    print_compression(&trainer.model);
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let trainer = load_trainer(&a.checkpoint)?;
    let rows = report::layer_rows(&trainer.model, trainer.config.alpha)?;
    match &a.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            report::write_csv(create(&dir.join("layers.csv"))?, &report::LAYERS_HEADER, &rows)?;
        }
        None => {
            let stdout = std::io::stdout();
            report::write_csv(stdout.lock(), &report::LAYERS_HEADER, &rows)?;
        }
    }
    println!("global_pruned_ratio={:.6}", global_pruned_ratio(&trainer.model));
    print_compression(&trainer.model);
    std::io::stdout().flush()?;
    Ok(())
}
