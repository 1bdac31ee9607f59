//! The `primgraph` command-line front end: data generation, stage-wise
//! training, evaluation, prediction, ground-truth export and the numerical
//! gradient suite.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. `--help` on every
//! verb prints the option documentation and exits 0. Commands taking
//! `--seed` are bit-reproducible. `PRIMGRAPH_THREADS` caps the thread pool
//! used by evaluation and voxelization.

use crate::checks::{run_gradcheck, CheckModule};
use crate::error::{Error, Result};
use crate::geometry::{io as geo_io, voxelize, GridSpec};
use crate::metrics::{evaluate, ShapeSet};
use crate::model::CheckpointMeta;
use crate::nn::ParameterStore;
use crate::synthdata::{
    generate_dataset, read_dataset, write_dataset, DatasetSample, ObjectTemplate,
};
use crate::training::{train_stage1, train_stage2, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "primgraph",
    about = "Primitive-based 3D object estimation from single depth images",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a built-in template.
    GenData(GenDataArgs),
    /// Train one stage of the model.
    Train(TrainArgs),
    /// Evaluate predictions against a dataset's ground truth.
    Eval(EvalArgs),
    /// Run inference on one sample and export the predicted shape.
    Predict(PredictArgs),
    /// Export a sample's ground-truth shape.
    Export(ExportArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Object template: chair, table or nightstand.
    #[arg(long)]
    template: String,
    /// Number of samples to generate.
    #[arg(long)]
    count: usize,
    /// RNG seed; the same seed yields a byte-identical dataset.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Stage {
    Proposal,
    Reasoning,
}

#[derive(Args)]
struct TrainArgs {
    /// Which stage to train.
    #[arg(long, value_enum)]
    stage: Stage,
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Optional key=value schedule/config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Stage-1 checkpoint (required when training the reasoning stage).
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Test dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to run inference with.
    #[arg(long, conflicts_with = "pred")]
    ckpt: Option<PathBuf>,
    /// Directory of per-sample prediction files (`<id>.txt`, primitive
    /// golden format) to evaluate instead of a checkpoint.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Report output path (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ExportFormat {
    Obj,
    Vox,
}

#[derive(Args)]
struct PredictArgs {
    /// Sample id within the dataset.
    #[arg(long)]
    sample: u32,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Trained two-stage checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Export format.
    #[arg(long, value_enum)]
    export: ExportFormat,
    /// Output file path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Sample id within the dataset.
    #[arg(long)]
    sample: u32,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Export format.
    #[arg(long, value_enum)]
    format: ExportFormat,
    /// Output file path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum CheckModuleArg {
    Nn,
    Model,
    Training,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Restrict the suite to one module.
    #[arg(long, value_enum)]
    module: Option<CheckModuleArg>,
    /// Seeds to sweep.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

/// Parses and dispatches; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_thread_pool();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Export(args) => cmd_export(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn init_thread_pool() {
    use std::sync::Once;
    static POOL: Once = Once::new();
    POOL.call_once(|| {
        if let Ok(v) = std::env::var("PRIMGRAPH_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build_global();
            }
        }
    });
}

fn cmd_gen_data(args: GenDataArgs) -> Result<i32> {
    let template = ObjectTemplate::by_name(&args.template)?;
    if args.count == 0 {
        eprintln!("error: --count must be at least 1");
        return Ok(1);
    }
    let samples = generate_dataset(&template, args.count, args.seed)?;
    write_dataset(&samples, &args.out)?;
    println!(
        "wrote {} {} samples to {}",
        samples.len(),
        template.category,
        args.out.display()
    );
    Ok(0)
}

fn category_class_count(samples: &[DatasetSample]) -> Result<u32> {
    let category = &samples[0].category;
    let template = ObjectTemplate::by_name(category)?;
    Ok(template.class_count)
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    let samples = read_dataset(&args.data)?;
    match args.stage {
        Stage::Proposal => {
            let class_count = category_class_count(&samples)?;
            let model_config = config.model_config(class_count);
            let category = samples[0].category.clone();
            let (store, meta, report) =
                train_stage1(&samples, model_config, &config.schedule, &category)?;
            store.save(&args.out, Some("proposal."))?;
            meta.save(&args.out)?;
            print_losses("stage 1", &report.epoch_mean_losses);
            println!("saved proposal checkpoint to {}", args.out.display());
            Ok(0)
        }
        Stage::Reasoning => {
            let Some(init) = &args.init else {
                eprintln!(
                    "error: training the reasoning stage requires --init \
                     with the stage-1 (proposal) checkpoint"
                );
                return Ok(1);
            };
            let stage1 = ParameterStore::load(init)?;
            let meta = CheckpointMeta::load(init)?;
            let (store, meta, report) = train_stage2(&samples, &stage1, &meta, &config.schedule)?;
            store.save(&args.out, None)?;
            meta.save(&args.out)?;
            print_losses("stage 2", &report.epoch_mean_losses);
            println!("saved full checkpoint to {}", args.out.display());
            Ok(0)
        }
    }
}

fn print_losses(stage: &str, losses: &[f64]) {
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!(
            "{stage}: {} epochs, mean loss {first:.4} -> {last:.4}",
            losses.len()
        );
    }
}

fn gt_shape(sample: &DatasetSample) -> Result<ShapeSet> {
    ShapeSet::with_labels(sample.primitives.clone(), sample.labels.clone())
}

/// Builds per-sample predictions with a trained model.
fn predict_all(samples: &[DatasetSample], ckpt: &Path) -> Result<Vec<ShapeSet>> {
    let store = ParameterStore::load(ckpt)?;
    let meta = CheckpointMeta::load(ckpt)?;
    let model = crate::training::model_from_checkpoint(&store, &meta)?;
    use rayon::prelude::*;
    samples
        .par_iter()
        .map(|s| {
            let out = model.predict(&store, &s.depth, &meta.norm_mean, &meta.norm_std)?;
            if out.empty_warning {
                log::warn!("sample {}: prediction is empty", s.id);
            }
            Ok(out.shape)
        })
        .collect()
}

/// Loads per-sample prediction files (`<id>.txt`, primitive golden format).
fn load_predictions(samples: &[DatasetSample], dir: &Path) -> Result<Vec<ShapeSet>> {
    samples
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.txt", s.id));
            let text = std::fs::read_to_string(&path).map_err(|e| {
                Error::Parse(format!("cannot read prediction {}: {e}", path.display()))
            })?;
            let labeled = geo_io::read_primitive_lines(&text)?;
            let labels: Vec<u32> = labeled.iter().map(|(l, _)| *l).collect();
            let prims = labeled.into_iter().map(|(_, p)| p).collect();
            ShapeSet::with_labels(prims, labels)
        })
        .collect()
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let samples = read_dataset(&args.data)?;
    let predictions = match (&args.ckpt, &args.pred) {
        (Some(ckpt), None) => predict_all(&samples, ckpt)?,
        (None, Some(dir)) => load_predictions(&samples, dir)?,
        _ => {
            eprintln!("error: eval needs exactly one of --ckpt or --pred");
            return Ok(1);
        }
    };
    let ground_truths: Vec<ShapeSet> = samples.iter().map(gt_shape).collect::<Result<_>>()?;
    let report = evaluate(&predictions, &ground_truths, &GridSpec::default())?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Parse(format!("cannot serialize report: {e}")))?;
    std::fs::write(&args.out, &text)?;
    println!(
        "evaluated {} samples: HErr {:.4}, TAcc@0.3 {:.1}, IoU_p {:.1}",
        report.sample_count, report.herr, report.tacc["0.3"], report.iou_p
    );
    println!("report written to {}", args.out.display());
    Ok(0)
}

fn export_shape(shape: &ShapeSet, format: ExportFormat, out: &Path) -> Result<()> {
    let labeled = shape.labeled();
    let text = match format {
        ExportFormat::Obj => geo_io::write_obj(&labeled),
        ExportFormat::Vox => {
            let grid = voxelize(shape.primitives(), &GridSpec::default())?;
            geo_io::write_vox_text(&grid)
        }
    };
    std::fs::write(out, text)?;
    Ok(())
}

fn find_sample(samples: Vec<DatasetSample>, id: u32) -> Result<DatasetSample> {
    samples
        .into_iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::invalid(format!("dataset has no sample with id {id}")))
}

fn cmd_predict(args: PredictArgs) -> Result<i32> {
    let samples = read_dataset(&args.data)?;
    let sample = find_sample(samples, args.sample)?;
    let store = ParameterStore::load(&args.ckpt)?;
    let meta = CheckpointMeta::load(&args.ckpt)?;
    let model = crate::training::model_from_checkpoint(&store, &meta)?;
    let out = model.predict(&store, &sample.depth, &meta.norm_mean, &meta.norm_std)?;
    if out.empty_warning {
        log::warn!("prediction for sample {} is empty", args.sample);
    }
    export_shape(&out.shape, args.export, &args.out)?;
    println!(
        "sample {}: {} primitives exported to {}",
        args.sample,
        out.shape.len(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_export(args: ExportArgs) -> Result<i32> {
    let samples = read_dataset(&args.data)?;
    let sample = find_sample(samples, args.sample)?;
    let shape = gt_shape(&sample)?;
    export_shape(&shape, args.format, &args.out)?;
    println!(
        "sample {}: {} ground-truth primitives exported to {}",
        args.sample,
        shape.len(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let module = args.module.map(|m| match m {
        CheckModuleArg::Nn => CheckModule::Nn,
        CheckModuleArg::Model => CheckModule::Model,
        CheckModuleArg::Training => CheckModule::Training,
    });
    let outcomes = run_gradcheck(module, args.seeds.max(1))?;
    let mut all_ok = true;
    for o in &outcomes {
        let status = if o.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {} max_rel_error {:.3e} (tolerance {:.0e}, {} coords checked, {} skipped)",
            o.name, o.report.max_rel_error, o.tolerance, o.report.checked, o.report.skipped
        );
        all_ok &= o.passed();
    }
    if all_ok {
        println!("gradient suite passed ({} checks)", outcomes.len());
        Ok(0)
    } else {
        eprintln!("gradient suite FAILED");
        Ok(2)
    }
}
