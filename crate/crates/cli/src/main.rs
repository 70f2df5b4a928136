//! `recoproc` — the experiment lifecycle as subcommands: generate or
//! degrade data, pretrain recognizers, train processors under any mode,
//! evaluate pipelines, and run the transfer / category-split / lambda
//! sweep protocols.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 1 runtime
//! failure (the message starts with the module error name).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use recoproc_core::config::ExperimentConfig;
use recoproc_core::data::{load_dataset, make_pairs, save_classes_json, Split};
use recoproc_core::degrade::DegradationSpec;
use recoproc_core::error::Error;
use recoproc_core::harness::{
    category_split_experiment, evaluate_pipeline, lambda_sweep, transfer_matrix,
    CategorySplitConfig, EvalIds, LambdaSweepConfig, TransferRow,
};
use recoproc_core::losses::RecognitionLossSpec;
use recoproc_core::models::{
    load_processor, load_recognizer, load_transformer, save_checkpoint, Manifest, ModelSpec,
    Normalization, Role,
};
use recoproc_core::report::{
    render_grid, write_matrix_csv, write_records_csv, write_records_jsonl, write_summary_md,
    GridCell,
};
use recoproc_core::synth::{self, SynthSpec};
use recoproc_core::train::{
    pretrain_recognizer, train_processor, write_log_jsonl, ProcessorTrainConfig,
    RecognizerTrainConfig, TrainMode,
};
use recoproc_core::{degrade, rng, Image, Tensor};

#[derive(Parser)]
#[command(name = "recoproc", version, about = "Recognition-aware image processing workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply a degradation to every PNG under a directory tree.
    Degrade(DegradeArgs),
    /// Generate the procedural labeled dataset.
    GenDataset(GenArgs),
    /// Train a recognizer on clean images and save its checkpoint.
    PretrainRecognizer(PretrainArgs),
    /// Train a processing model (and transformer, in transformer mode).
    TrainProcessor(TrainProcArgs),
    /// Evaluate a frozen pipeline on the validation split.
    Eval(EvalArgs),
    /// Cross-evaluate processors trained against different recognizers.
    TransferMatrix(TransferArgs),
    /// Category-split transfer: train and evaluate per class half.
    CategorySplit(CategoryArgs),
    /// One full RA training per lambda, with grids and a sweep table.
    LambdaSweep(SweepArgs),
    /// Re-render table.csv and summary.md from a records.jsonl file.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigOpts {
    /// JSON experiment config; flags below override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Degradation kind: super_resolution | gaussian_noise | jpeg.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    scale: Option<u32>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    quality: Option<u8>,
    /// Training mode (plain, ra, ra_unsupervised, ra_transformer,
    /// recog_only, joint_finetune_r).
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigOpts {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).map_err(CliError::Usage)?,
            None => {
                let task = self.task_from_flags()?.unwrap_or_else(DegradationSpec::jpeg);
                let mode = self.mode_from_flags()?.unwrap_or(TrainMode::Plain);
                ExperimentConfig::for_task(task, mode)
            }
        };
        if self.config.is_some() {
            if let Some(task) = self.task_from_flags()? {
                cfg.processor.upscale = task.input_scale() as u32;
                cfg.task = task;
            }
            if let Some(mode) = self.mode_from_flags()? {
                let lambda = self.lambda.unwrap_or(mode.default_lambda());
                cfg.loss = default_loss(mode, lambda);
                cfg.mode = mode;
            }
        }
        if let Some(lambda) = self.lambda {
            cfg.loss.lambda = lambda;
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(epochs) = self.epochs {
            cfg.schedule.epochs = epochs;
        }
        if let Some(batch) = self.batch_size {
            cfg.schedule.batch_size = batch;
        }
        if let Some(lr) = self.lr {
            cfg.schedule.lr0 = lr;
        }
        if let Some(root) = &self.data_root {
            cfg.dataset_root = root.clone();
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Ok(out) = std::env::var("RECOPROC_OUT") {
            cfg.output_dir = PathBuf::from(out);
        }
        cfg.validate().map_err(CliError::Usage)?;
        Ok(cfg)
    }

    fn task_from_flags(&self) -> Result<Option<DegradationSpec>, CliError> {
        let Some(kind) = &self.kind else {
            return Ok(None);
        };
        let spec = match kind.as_str() {
            "super_resolution" | "sr" => DegradationSpec::SuperResolution {
                scale: self.scale.unwrap_or(4),
            },
            "gaussian_noise" | "noise" => DegradationSpec::GaussianNoise {
                sigma: self.sigma.unwrap_or(0.1),
            },
            "jpeg" => DegradationSpec::Jpeg {
                quality: self.quality.unwrap_or(10),
            },
            other => {
                return Err(CliError::Usage(Error::ConfigError(format!(
                    "unknown degradation kind {other}"
                ))))
            }
        };
        Ok(Some(spec))
    }

    fn mode_from_flags(&self) -> Result<Option<TrainMode>, CliError> {
        let Some(mode) = &self.mode else {
            return Ok(None);
        };
        let parsed = match mode.as_str() {
            "plain" => TrainMode::Plain,
            "ra" => TrainMode::Ra,
            "ra_unsupervised" => TrainMode::RaUnsupervised,
            "ra_transformer" => TrainMode::RaTransformer,
            "recog_only" => TrainMode::RecogOnly,
            "joint_finetune_r" => TrainMode::JointFinetuneR,
            other => {
                return Err(CliError::Usage(Error::ConfigError(format!(
                    "unknown mode {other}"
                ))))
            }
        };
        Ok(Some(parsed))
    }
}

fn default_loss(mode: TrainMode, lambda: f64) -> RecognitionLossSpec {
    match mode {
        TrainMode::RaUnsupervised => {
            RecognitionLossSpec::unsupervised(lambda, recoproc_core::losses::Distance::L2Probs)
        }
        _ => RecognitionLossSpec::supervised(lambda),
    }
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    kind: String,
    #[arg(long)]
    scale: Option<u32>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    quality: Option<u8>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 60)]
    train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    val_per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: ConfigOpts,
    /// Recognizer family: resnet_small | vgg_small | densenet_small.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args)]
struct TrainProcArgs {
    #[command(flatten)]
    common: ConfigOpts,
    /// Recognizer checkpoint directory (required by RA modes).
    #[arg(long)]
    recognizer: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: ConfigOpts,
    #[arg(long)]
    processor: PathBuf,
    #[arg(long)]
    transformer: Option<PathBuf>,
    #[arg(long)]
    recognizer: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    common: ConfigOpts,
    /// Plain baseline processor checkpoint.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Repeatable: `id=processor_dir[:transformer_dir]` — a processor
    /// trained with recognizer `id` as loss.
    #[arg(long = "row")]
    rows: Vec<String>,
    /// Repeatable: `id=recognizer_dir` evaluation columns.
    #[arg(long = "recognizer")]
    recognizers: Vec<String>,
}

#[derive(Args)]
struct CategoryArgs {
    #[command(flatten)]
    common: ConfigOpts,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: ConfigOpts,
    /// Comma-separated lambda values; must include 0.
    #[arg(long)]
    lambdas: String,
    /// Pretrained recognizer checkpoint used as the loss and evaluator.
    #[arg(long)]
    recognizer: PathBuf,
    /// Number of validation samples rendered into the comparison grid.
    #[arg(long, default_value_t = 4)]
    grid_samples: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Usage(Error),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Degrade(args) => cmd_degrade(args),
        Command::GenDataset(args) => cmd_gen_dataset(args),
        Command::PretrainRecognizer(args) => cmd_pretrain(args),
        Command::TrainProcessor(args) => cmd_train_processor(args),
        Command::Eval(args) => cmd_eval(args),
        Command::TransferMatrix(args) => cmd_transfer(args),
        Command::CategorySplit(args) => cmd_category(args),
        Command::LambdaSweep(args) => cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn weights_hash(dir: &Path) -> Result<String, CliError> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(dir.join("weights.bin")).map_err(Error::from)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_pngs(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<(), Error> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_pngs(&path, base, out)?;
        } else if path.extension().is_some_and(|e| e == "png") {
            out.push(path.strip_prefix(base).unwrap().to_path_buf());
        }
    }
    Ok(())
}

fn cmd_degrade(args: DegradeArgs) -> Result<(), CliError> {
    let spec = match args.kind.as_str() {
        "super_resolution" | "sr" => DegradationSpec::SuperResolution {
            scale: args.scale.unwrap_or(4),
        },
        "gaussian_noise" | "noise" => DegradationSpec::GaussianNoise {
            sigma: args.sigma.unwrap_or(0.1),
        },
        "jpeg" => DegradationSpec::Jpeg {
            quality: args.quality.unwrap_or(10),
        },
        other => {
            return Err(CliError::Usage(Error::ConfigError(format!(
                "unknown degradation kind {other}"
            ))))
        }
    };
    spec.validate().map_err(CliError::Usage)?;
    if !args.input.is_dir() {
        return Err(CliError::Runtime(Error::NotFound(args.input)));
    }
    let mut rel_paths = Vec::new();
    collect_pngs(&args.input, &args.input, &mut rel_paths)?;
    if rel_paths.is_empty() {
        return Err(CliError::Runtime(Error::InvalidDataset(format!(
            "no .png files under {}",
            args.input.display()
        ))));
    }
    for (index, rel) in rel_paths.iter().enumerate() {
        let src = args.input.join(rel);
        let img = recoproc_core::data::load_image(&src)?;
        let mut stream = rng::stream(args.seed, index as u64);
        let out = degrade::apply(&spec, &img, &mut stream)?;
        let dst = args.output.join(rel);
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent).map_err(Error::from)?;
        }
        synth::save_png(&dst, &out)?;
    }
    println!("degraded {} images into {}", rel_paths.len(), args.output.display());
    Ok(())
}

fn cmd_gen_dataset(args: GenArgs) -> Result<(), CliError> {
    let spec = SynthSpec {
        classes: args.classes,
        train_per_class: args.train_per_class,
        val_per_class: args.val_per_class,
        size: args.size,
        seed: args.seed,
    };
    synth::generate(&args.root, &spec)?;
    println!(
        "generated {} classes x ({} train + {} val) at {}",
        args.classes,
        args.train_per_class,
        args.val_per_class,
        args.root.display()
    );
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> Result<(), CliError> {
    let mut cfg = args.common.resolve()?;
    if let Some(family) = &args.family {
        cfg.recognizer.family = match family.as_str() {
            "resnet_small" | "resnet" => recoproc_core::models::RecognizerFamily::ResnetSmall,
            "vgg_small" | "vgg" => recoproc_core::models::RecognizerFamily::VggSmall,
            "densenet_small" | "densenet" => {
                recoproc_core::models::RecognizerFamily::DensenetSmall
            }
            other => {
                return Err(CliError::Usage(Error::ConfigError(format!(
                    "unknown recognizer family {other}"
                ))))
            }
        };
    }
    if let Some(depth) = args.depth {
        cfg.recognizer.depth = depth;
    }
    let train = load_dataset(&cfg.dataset_root, Split::Train)?;
    let val = load_dataset(&cfg.dataset_root, Split::Val)?;
    let mut recog_spec = cfg.recognizer.clone();
    recog_spec.num_classes = train.num_classes();
    recog_spec.validate().map_err(CliError::Usage)?;
    let seed = cfg.seeds[0];
    let rc = RecognizerTrainConfig {
        spec: recog_spec.clone(),
        schedule: cfg.recognizer_schedule.clone(),
        seed,
    };
    let mut out = pretrain_recognizer(&rc, &train, &val)?;

    let dir = cfg.output_dir.join("recognizer");
    let mut manifest = Manifest::new(Role::R, ModelSpec::Recognizer(recog_spec), seed, cfg.hash());
    manifest.metrics = out.metrics.clone();
    let (mean, std) = out.model.normalization();
    manifest.normalization = Some(Normalization { mean, std });
    save_checkpoint(&dir, out.model.as_mut(), manifest)?;
    write_log_jsonl(&dir.join("train_log.jsonl"), &out.log)?;
    save_classes_json(&dir, &train.class_names)?;
    println!(
        "recognizer checkpoint {} val_acc_clean {:.4} weights {}",
        dir.display(),
        out.metrics["val_acc_clean"],
        weights_hash(&dir)?
    );
    Ok(())
}

fn cmd_train_processor(args: TrainProcArgs) -> Result<(), CliError> {
    let cfg = args.common.resolve()?;
    let seed = cfg.seeds[0];
    let train = load_dataset(&cfg.dataset_root, Split::Train)?;
    let pairs = make_pairs(&train, &cfg.task, seed)?;

    let mut recognizer = match &args.recognizer {
        Some(dir) => Some(load_recognizer(dir)?.0),
        None => None,
    };
    if cfg.mode.needs_recognizer() && recognizer.is_none() {
        return Err(CliError::Usage(Error::ConfigError(format!(
            "mode {} needs --recognizer",
            cfg.mode.name()
        ))));
    }

    let tc = ProcessorTrainConfig {
        proc_spec: cfg.processor.clone(),
        trans_spec: cfg.transformer.clone().unwrap_or_default(),
        schedule: cfg.schedule.clone(),
        mode: cfg.mode,
        loss: cfg.loss.clone(),
        seed,
        finetune_r_lr: 1e-3,
        finetune_r_momentum: 0.9,
        probe_steps: (1..=10).collect(),
    };
    let mut out = train_processor(&tc, &pairs, recognizer.as_mut().map(|r| r.as_mut() as _))?;

    let run_dir = cfg
        .output_dir
        .join(format!("{}_{}_s{}", cfg.mode.name(), cfg.task.kind_name(), seed));
    let proc_dir = run_dir.join("processor");
    let mut manifest = Manifest::new(
        Role::P,
        ModelSpec::Processor(cfg.processor.clone()),
        seed,
        cfg.hash(),
    );
    manifest.metrics = out.metrics.clone();
    save_checkpoint(&proc_dir, &mut out.processor, manifest)?;
    write_log_jsonl(&run_dir.join("train_log.jsonl"), &out.log)?;
    println!("processor checkpoint {} weights {}", proc_dir.display(), weights_hash(&proc_dir)?);

    if let Some(mut t) = out.transformer {
        let t_dir = run_dir.join("transformer");
        let mut manifest = Manifest::new(
            Role::T,
            ModelSpec::Transformer(cfg.transformer.clone().unwrap_or_default()),
            seed,
            cfg.hash(),
        );
        manifest.metrics = out.metrics.clone();
        save_checkpoint(&t_dir, &mut t, manifest)?;
        println!("transformer checkpoint {} weights {}", t_dir.display(), weights_hash(&t_dir)?);
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = args.common.resolve()?;
    let seed = cfg.seeds[0];
    let val = load_dataset(&cfg.dataset_root, Split::Val)?;
    let pairs = make_pairs(&val, &cfg.task, seed)?;
    let (mut processor, _) = load_processor(&args.processor)?;
    let mut transformer = match &args.transformer {
        Some(dir) => Some(load_transformer(dir)?.0),
        None => None,
    };
    let (mut recognizer, _) = load_recognizer(&args.recognizer)?;
    let ids = EvalIds {
        processor: args.processor.display().to_string(),
        transformer: args.transformer.as_ref().map(|p| p.display().to_string()),
        recognizer: args.recognizer.display().to_string(),
        task: cfg.task.kind_name().into(),
    };
    let record = evaluate_pipeline(
        &mut processor,
        transformer.as_mut(),
        recognizer.as_mut(),
        &pairs,
        cfg.schedule.batch_size,
        &ids,
    )?;
    let out_dir = cfg.output_dir.join("eval");
    std::fs::create_dir_all(&out_dir).map_err(Error::from)?;
    write_records_jsonl(&out_dir.join("records.jsonl"), std::slice::from_ref(&record))?;
    write_records_csv(&out_dir.join("table.csv"), std::slice::from_ref(&record))?;
    write_summary_md(&out_dir.join("summary.md"), "evaluation", std::slice::from_ref(&record))?;
    println!(
        "psnr {} ssim {:.4} acc {:.4} (n={})",
        recoproc_core::metrics::format_psnr(record.psnr),
        record.ssim,
        record.accuracy,
        record.n_samples
    );
    Ok(())
}

fn parse_kv(raw: &str) -> Result<(String, PathBuf, Option<PathBuf>), CliError> {
    let (id, rest) = raw.split_once('=').ok_or_else(|| {
        CliError::Usage(Error::ConfigError(format!(
            "expected id=path[:transformer_path], got {raw}"
        )))
    })?;
    match rest.split_once(':') {
        Some((p, t)) => Ok((id.to_string(), PathBuf::from(p), Some(PathBuf::from(t)))),
        None => Ok((id.to_string(), PathBuf::from(rest), None)),
    }
}

fn cmd_transfer(args: TransferArgs) -> Result<(), CliError> {
    let cfg = args.common.resolve()?;
    let seed = cfg.seeds[0];
    let val = load_dataset(&cfg.dataset_root, Split::Val)?;
    let pairs = make_pairs(&val, &cfg.task, seed)?;

    let mut rows = Vec::new();
    for raw in &args.rows {
        let (id, proc_path, trans_path) = parse_kv(raw)?;
        let (processor, _) = load_processor(&proc_path)?;
        let transformer = match trans_path {
            Some(p) => Some(load_transformer(&p)?.0),
            None => None,
        };
        rows.push(TransferRow {
            loss_id: id,
            processor,
            transformer,
        });
    }
    let mut recognizers = Vec::new();
    for raw in &args.recognizers {
        let (id, path, _) = parse_kv(raw)?;
        recognizers.push((id, load_recognizer(&path)?.0));
    }
    let mut baseline = match &args.baseline {
        Some(path) => Some(load_processor(path)?.0),
        None => None,
    };

    let matrix = transfer_matrix(
        &mut rows,
        baseline.as_mut(),
        &mut recognizers,
        &pairs,
        cfg.schedule.batch_size,
        cfg.task.kind_name(),
    )?;
    let out_dir = cfg.output_dir.join("transfer_matrix");
    std::fs::create_dir_all(&out_dir).map_err(Error::from)?;
    write_matrix_csv(&out_dir.join("table.csv"), &matrix)?;
    std::fs::write(
        out_dir.join("matrix.json"),
        serde_json::to_string_pretty(&matrix).map_err(Error::from)? + "\n",
    )
    .map_err(Error::from)?;
    println!("transfer matrix written to {}", out_dir.display());
    for (row_id, row) in matrix.row_ids.iter().zip(matrix.cells.iter()) {
        println!("  {row_id}: {row:?}");
    }
    println!("  baseline: {:?}", matrix.baseline);
    Ok(())
}

fn cmd_category(args: CategoryArgs) -> Result<(), CliError> {
    let cfg = args.common.resolve()?;
    let seed = cfg.seeds[0];
    let train = load_dataset(&cfg.dataset_root, Split::Train)?;
    let val = load_dataset(&cfg.dataset_root, Split::Val)?;
    let cs_cfg = CategorySplitConfig {
        task: cfg.task.clone(),
        proc_spec: cfg.processor.clone(),
        recog_spec: cfg.recognizer.clone(),
        proc_schedule: cfg.schedule.clone(),
        recog_schedule: cfg.recognizer_schedule.clone(),
        lambda: cfg.loss.lambda,
        seed,
    };
    let result = category_split_experiment(&cs_cfg, &train, &val)?;
    let out_dir = cfg.output_dir.join("category_split");
    std::fs::create_dir_all(&out_dir).map_err(Error::from)?;
    write_records_jsonl(&out_dir.join("records.jsonl"), &result.records)?;
    write_records_csv(&out_dir.join("table.csv"), &result.records)?;
    write_summary_md(&out_dir.join("summary.md"), "category split", &result.records)?;
    std::fs::write(
        out_dir.join("split.json"),
        serde_json::to_string_pretty(&result.split).map_err(Error::from)? + "\n",
    )
    .map_err(Error::from)?;
    println!("category split table ({} -> {}):", result.row_ids.len(), out_dir.display());
    for (row_id, row) in result.row_ids.iter().zip(result.table.iter()) {
        println!("  {row_id}: eval_a {:.4} eval_b {:.4}", row[0], row[1]);
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let cfg = args.common.resolve()?;
    let seed = cfg.seeds[0];
    let lambdas: Vec<f64> = args
        .lambdas
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Usage(Error::ConfigError(format!("bad lambda {tok}: {e}"))))
        })
        .collect::<Result<_, _>>()?;
    let train = load_dataset(&cfg.dataset_root, Split::Train)?;
    let val = load_dataset(&cfg.dataset_root, Split::Val)?;
    let train_pairs = make_pairs(&train, &cfg.task, seed)?;
    let val_pairs = make_pairs(&val, &cfg.task, seed)?;
    let (mut recognizer, _) = load_recognizer(&args.recognizer)?;

    let sweep_cfg = LambdaSweepConfig {
        task: cfg.task.clone(),
        proc_spec: cfg.processor.clone(),
        schedule: cfg.schedule.clone(),
        seed,
    };
    let rows = lambda_sweep(
        &sweep_cfg,
        &lambdas,
        &train_pairs,
        &val_pairs,
        recognizer.as_mut(),
    )?;

    let out_dir = cfg.output_dir.join("lambda_sweep");
    std::fs::create_dir_all(&out_dir).map_err(Error::from)?;
    // Sweep table: lambda,psnr,ssim,acc.
    let mut body = String::from("lambda,psnr,ssim,acc\n");
    for (lambda, record) in &rows {
        body.push_str(&format!(
            "{lambda},{},{},{}\n",
            recoproc_core::metrics::format_psnr(record.psnr),
            record.ssim,
            record.accuracy
        ));
    }
    std::fs::write(out_dir.join("table.csv"), body).map_err(Error::from)?;
    let records: Vec<_> = rows.iter().map(|(_, r)| r.clone()).collect();
    write_records_jsonl(&out_dir.join("records.jsonl"), &records)?;
    write_summary_md(&out_dir.join("summary.md"), "lambda sweep", &records)?;

    // Fig.4-style grid: target | input | one column per lambda, with
    // the per-image psnr/prediction caption. Retrain per lambda is done;
    // regenerate outputs for the first few validation pairs.
    render_sweep_grids(&cfg, &lambdas, &train_pairs, &val_pairs, recognizer.as_mut(), &out_dir, args.grid_samples, seed)?;
    println!("lambda sweep written to {}", out_dir.display());
    for (lambda, record) in &rows {
        println!(
            "  lambda {lambda}: psnr {} ssim {:.4} acc {:.4}",
            recoproc_core::metrics::format_psnr(record.psnr),
            record.ssim,
            record.accuracy
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn render_sweep_grids(
    cfg: &ExperimentConfig,
    lambdas: &[f64],
    train_pairs: &[recoproc_core::data::PairedSample],
    val_pairs: &[recoproc_core::data::PairedSample],
    recognizer: &mut dyn recoproc_core::models::Recognizer,
    out_dir: &Path,
    grid_samples: usize,
    seed: u64,
) -> Result<(), CliError> {
    use recoproc_core::nn::Pass;

    let mut sorted: Vec<f64> = lambdas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    let n_show = grid_samples.min(val_pairs.len());
    if n_show == 0 {
        return Ok(());
    }

    // Column titles: TARGET | INPUT | per-lambda outputs.
    let mut titles: Vec<String> = vec!["TARGET".into(), "INPUT".into()];
    for &l in &sorted {
        titles.push(if l == 0.0 {
            "PLAIN".into()
        } else {
            format!("RA L={l:.0e}").to_uppercase()
        });
    }

    // One trained processor per lambda (deterministic retrain).
    let mut outputs: Vec<Vec<(Image, String)>> = vec![Vec::new(); n_show];
    for &lambda in &sorted {
        let tc = ProcessorTrainConfig {
            schedule: cfg.schedule.clone(),
            ..ProcessorTrainConfig::new(cfg.processor.clone(), TrainMode::Ra, lambda, seed)
        };
        let mut trained = train_processor(&tc, train_pairs, Some(recognizer))?;
        for (i, pair) in val_pairs.iter().take(n_show).enumerate() {
            let x = Tensor::from_images(&[&pair.input]).map_err(Error::from)?;
            let out = trained.processor.forward(&x, Pass::Infer).image(0).clipped();
            let p = recoproc_core::metrics::psnr(&out, &pair.target, 1.0)?;
            let s = recoproc_core::metrics::ssim(
                &out,
                &pair.target,
                &recoproc_core::metrics::SsimParams::default(),
            )?;
            let logits = recognizer.forward(&Tensor::from_images(&[&out]).map_err(Error::from)?, Pass::Infer);
            let pred = recoproc_core::metrics::argmax(logits.row(0));
            let caption = format!(
                "{}/{:.3}/C{}",
                if p.is_infinite() { "INF".into() } else { format!("{p:.2}") },
                s,
                pred
            );
            outputs[i].push((out, caption));
        }
    }

    let mut rows = Vec::new();
    for (i, pair) in val_pairs.iter().take(n_show).enumerate() {
        let mut cells = vec![
            GridCell {
                image: pair.target.clone(),
                caption: format!("LABEL C{}", pair.label),
            },
            GridCell {
                image: pair.input.clone(),
                caption: "DEGRADED".into(),
            },
        ];
        for (img, caption) in outputs[i].drain(..) {
            cells.push(GridCell {
                image: img,
                caption,
            });
        }
        rows.push(cells);
    }
    let grids_dir = out_dir.join("grids");
    std::fs::create_dir_all(&grids_dir).map_err(Error::from)?;
    render_grid(
        &grids_dir.join("sweep.png"),
        &titles,
        &rows,
        (val_pairs[0].target.w * 3).max(96),
    )?;
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let records = recoproc_core::report::read_records_jsonl(&args.records)?;
    if records.is_empty() {
        return Err(CliError::Runtime(Error::ConfigError(
            "no records to report".into(),
        )));
    }
    std::fs::create_dir_all(&args.out).map_err(Error::from)?;
    write_records_csv(&args.out.join("table.csv"), &records)?;
    write_summary_md(&args.out.join("summary.md"), "report", &records)?;
    println!("report written to {}", args.out.display());
    Ok(())
}

