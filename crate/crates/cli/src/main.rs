use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scalenet::bn::bn_dump_csv;
use scalenet::checkpoint::{load_checkpoint, model_hash, Checkpoint};
use scalenet::config::RunConfig;
use scalenet::data::{Dataset, Split};
use scalenet::inference::{calibrate, eval_batches, nearest_resolution, InferenceMode, DEFAULT_EVAL_BATCH};
use scalenet::meta::{ratio_report_csv, weight_bias_ratio_report};
use scalenet::report::{envelope_report, run_matrix_eval, AccuracyMatrix, HitMissMatrix, PredictionSet};

/// Train and evaluate scale-adaptive classifiers.
#[derive(Parser, Debug)]
#[command(name = "scalenet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a JSON run configuration
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output.dir` from the configuration
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over a grid of test resolutions
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        test_resolutions: Vec<u32>,
        #[arg(long, default_value = "proxy")]
        inference_mode: InferenceMode,
        /// Image folder used to recalibrate BN statistics (ideal mode)
        #[arg(long)]
        calibration_data: Option<PathBuf>,
        /// Image folder to evaluate on; defaults to the validation split of
        /// the data recorded in the checkpoint
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Matrix CSV; the mode selection goes to `<stem>_selected.csv`
        #[arg(long)]
        out: PathBuf,
        /// Prediction store directory; defaults to `<stem>_predictions`
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Write BN statistics recalibrated at each test resolution
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        calibration_data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        test_resolutions: Vec<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build matrices, hit-miss tables and the envelope chart from stored predictions
    Report {
        /// Prediction store directories; each becomes one model in the chart
        #[arg(long, required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Dump per-scale BN parameters and statistics
    DumpBn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the per-layer meta-learner weight/bias norm ratios
    DumpRatios {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(scalenet::Error),
}

impl From<scalenet::Error> for Failure {
    fn from(e: scalenet::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train { config, out_dir } => train(&config, out_dir),
        Command::Eval {
            checkpoint,
            test_resolutions,
            inference_mode,
            calibration_data,
            eval_data,
            out,
            predictions,
        } => eval(EvalArgs {
            checkpoint,
            test_resolutions,
            mode: inference_mode,
            calibration_data,
            eval_data,
            out,
            predictions,
        }),
        Command::Calibrate {
            checkpoint,
            calibration_data,
            test_resolutions,
            out,
        } => calibrate_cmd(&checkpoint, &calibration_data, &test_resolutions, out.as_deref()),
        Command::Report { predictions, out_dir } => report(&predictions, &out_dir),
        Command::DumpBn { checkpoint, out } => {
            let ckpt = load(&checkpoint)?;
            let entries: BTreeMap<u32, _> = ckpt
                .model
                .resolutions()
                .iter()
                .map(|&r| Ok((r, ckpt.model.bank.get(r)?)))
                .collect::<scalenet::Result<_>>()?;
            emit(out.as_deref(), &bn_dump_csv(&entries))
        }
        Command::DumpRatios { checkpoint, out } => {
            let ckpt = load(&checkpoint)?;
            emit(out.as_deref(), &ratio_report_csv(&weight_bias_ratio_report(&ckpt.model.meta)))
        }
    }
}

fn load(path: &Path) -> CliResult<Checkpoint<f32>> {
    Ok(load_checkpoint(path)?)
}

fn write(path: &Path, body: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| scalenet::Error::io(parent, e))?;
    }
    fs::write(path, body).map_err(|e| Failure::Runtime(scalenet::Error::io(path, e)))
}

fn emit(out: Option<&Path>, body: &str) -> CliResult<()> {
    match out {
        Some(path) => write(path, body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("matrix");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn train(config: &Path, out_dir: Option<PathBuf>) -> CliResult<()> {
    let mut run = RunConfig::from_json_file(config)?;
    if let Some(dir) = out_dir {
        run.output.dir = dir;
    }
    let data = run.data.load(Split::Train)?;
    eprintln!(
        "training on {} images, resolutions {:?}, {} epochs",
        data.len(),
        run.training.resolutions,
        run.training.epochs
    );
    let fit = scalenet::training::fit(&data, &run, Some(&run.output.dir))?;
    if let Some(last) = fit.log.last() {
        eprintln!(
            "step {}: loss_ce {:.4} loss_sd {:.4} loss_total {:.4}",
            last.step, last.loss_ce, last.loss_sd, last.loss_total
        );
    }
    println!("{}", run.output.dir.join("checkpoint.bin").display());
    Ok(())
}

struct EvalArgs {
    checkpoint: PathBuf,
    test_resolutions: Vec<u32>,
    mode: InferenceMode,
    calibration_data: Option<PathBuf>,
    eval_data: Option<PathBuf>,
    out: PathBuf,
    predictions: Option<PathBuf>,
}

fn eval(args: EvalArgs) -> CliResult<()> {
    if args.test_resolutions.iter().any(|&t| t == 0) {
        return Err(Failure::Usage("test resolutions must be positive".into()));
    }
    let ckpt = load(&args.checkpoint)?;
    let model = &ckpt.model;
    if args.mode == InferenceMode::Ideal && args.calibration_data.is_none() {
        let off: Vec<u32> = args
            .test_resolutions
            .iter()
            .copied()
            .filter(|t| !model.resolutions().contains(t))
            .collect();
        if !off.is_empty() {
            return Err(Failure::Usage(format!(
                "--inference-mode ideal needs --calibration-data for resolutions {off:?}, \
                 which are not training resolutions {:?}",
                model.resolutions()
            )));
        }
    }
    let eval_set = match &args.eval_data {
        Some(dir) => Dataset::load_image_folder(dir, Split::Val)?,
        None => match &ckpt.manifest.config {
            Some(config) => config.data.load(Split::Val)?,
            None => {
                return Err(Failure::Usage(
                    "checkpoint records no data configuration; pass --eval-data".into(),
                ))
            }
        },
    };
    let calibration = match &args.calibration_data {
        Some(dir) => Some(Dataset::load_image_folder(dir, Split::Train)?),
        None => None,
    };
    let preds = run_matrix_eval(
        model,
        &eval_set,
        &args.test_resolutions,
        args.mode,
        calibration.as_ref().map(|d| d.images.as_slice()),
    )?;
    let store = args.predictions.unwrap_or_else(|| sibling(&args.out, "_predictions"));
    preds.save(&store)?;
    let matrix = preds.accuracy_matrix()?;
    write(&args.out, &matrix.to_csv())?;
    write(&sibling(&args.out, "_selected.csv"), &matrix.selected_csv())?;
    print!("{}", matrix.to_csv());
    Ok(())
}

fn calibrate_cmd(checkpoint: &Path, data: &Path, resolutions: &[u32], out: Option<&Path>) -> CliResult<()> {
    let ckpt = load(checkpoint)?;
    let model = &ckpt.model;
    let images = Dataset::load_image_folder(data, Split::Train)?;
    let mut sets = BTreeMap::new();
    for &t in resolutions {
        if t == 0 {
            return Err(Failure::Usage("test resolutions must be positive".into()));
        }
        let base = model.bank.get(nearest_resolution(t, model.resolutions())?)?;
        let batches = eval_batches::<f32>(&images.images, t, DEFAULT_EVAL_BATCH);
        sets.insert(t, calibrate(model, model.encode(t)?, base, &batches)?);
    }
    eprintln!("model {}", model_hash(model));
    let entries: BTreeMap<u32, _> = sets.iter().map(|(t, s)| (*t, s)).collect();
    emit(out, &bn_dump_csv(&entries))
}

fn report(stores: &[PathBuf], out_dir: &Path) -> CliResult<()> {
    let mut matrices: Vec<(String, AccuracyMatrix)> = Vec::new();
    for dir in stores {
        let preds = PredictionSet::load(dir)?;
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("model")
            .to_string();
        let matrix = preds.accuracy_matrix()?;
        write(&out_dir.join(format!("{name}_matrix.csv")), &matrix.to_csv())?;
        write(&out_dir.join(format!("{name}_selected.csv")), &matrix.selected_csv())?;
        let diagonal = preds.diagonal();
        if !diagonal.is_empty() {
            let hm = HitMissMatrix::build(&diagonal, &preds.labels)?;
            write(&out_dir.join(format!("{name}_hit_miss.csv")), &hm.to_csv())?;
        }
        matrices.push((name, matrix));
    }
    let refs: Vec<(&str, &AccuracyMatrix)> = matrices.iter().map(|(n, m)| (n.as_str(), m)).collect();
    envelope_report(&refs, out_dir)?;
    Ok(())
}
