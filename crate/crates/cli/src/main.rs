//! `sala`: phantom generation, preprocessing, k-fold training, ensemble
//! inference and evaluation from the command line.
//!
//! Exit status is 0 on success, 1 for invalid input (bad flags, missing or
//! malformed files, inconsistent settings) and 2 for failures at run time.
//! Every failure prints a single JSON line to stderr:
//! `{"error":"validation","message":"..."}`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use sala_core::dataio::{assemble_study, load_manifest};
use sala_core::inference::{discover_checkpoints, infer_entry, Ensemble, InferenceConfig};
use sala_core::metrics::{evaluate_predictions, pathology_report, record_scores, write_metrics_csv, write_report_csv};
use sala_core::phantom::{generate_dataset, PhantomParams};
use sala_core::preprocess::{load_preprocessed_dir, preprocess_study, save_preprocessed, PreprocessConfig};
use sala_core::training::{train_fold, FoldResult, TrainConfig};
use sala_core::Error;

#[derive(Debug, Parser)]
#[command(name = "sala", version, about = "Dual-view cardiac MR right-ventricle segmentation")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic phantom cohort and its manifest.
    Phantom(PhantomArgs),
    /// Resample, crop, normalize and cache every study of a manifest.
    Preprocess(PreprocessArgs),
    /// Train one or all cross-validation folds.
    Train(TrainArgs),
    /// Segment every study of a manifest with the fold ensemble.
    Infer(InferArgs),
    /// Score predictions against manifest ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// Number of subjects.
    #[arg(long)]
    count: usize,
    /// Seed of the first subject; subject i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Short-axis slices per volume.
    #[arg(long)]
    slices: Option<usize>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// Manifest CSV listing the raw studies.
    #[arg(long)]
    manifest: PathBuf,
    /// Cache directory; receives one sub-directory per subject.
    #[arg(long)]
    out: PathBuf,
    /// Training configuration whose `preprocess` section sets the target
    /// geometry (defaults apply without it).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("folds").required(true))]
struct TrainArgs {
    /// Training configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Train only this fold (0-based).
    #[arg(long, group = "folds")]
    fold: Option<usize>,
    /// Train every fold.
    #[arg(long, group = "folds")]
    all_folds: bool,
    /// Folds trained concurrently with --all-folds.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Directory holding `fold_*/best.ckpt`.
    #[arg(long)]
    models: PathBuf,
    /// Manifest CSV listing the studies to segment.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for `{subject}_{view}_{phase}_pred.nii.gz`.
    #[arg(long)]
    out: PathBuf,
    /// Remove components smaller than this fraction of their class's
    /// largest component (0 disables).
    #[arg(long, default_value_t = InferenceConfig::default().cluster_ratio)]
    cluster_ratio: f64,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Directory of predictions written by `infer`.
    #[arg(long)]
    pred: PathBuf,
    /// Manifest CSV with ground-truth label paths.
    #[arg(long)]
    manifest: PathBuf,
    /// Per-subject metrics CSV.
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    /// Per-pathology summary CSV.
    #[arg(long, default_value = "report.csv")]
    report: PathBuf,
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::NotFound(_) => "not_found",
        Error::Format(_) => "format",
        Error::Validation(_) => "validation",
        Error::DegenerateInput(_) => "degenerate_input",
        Error::Numerical(_) => "numerical",
        Error::Io(_) => "io",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let message = e.to_string();
            let summary: Vec<&str> = message
                .lines()
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            return fail("usage", summary.join(" ").trim_start_matches("error: "), 1);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let result = match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(error_kind(&e), &e.to_string(), if e.is_validation() { 1 } else { 2 }),
    }
}

fn require_file(path: &Path) -> sala_core::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::NotFound(path.to_path_buf()))
    }
}

fn cmd_phantom(a: PhantomArgs) -> sala_core::Result<()> {
    let mut params = PhantomParams::default();
    if let Some(n) = a.slices {
        params.shape[0] = n;
    }
    params.validate()?;
    let manifest = generate_dataset(a.count, a.seed, &a.out, &params)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs) -> sala_core::Result<()> {
    require_file(&a.manifest)?;
    let geometry = match &a.config {
        Some(path) => TrainConfig::load(path)?.preprocess,
        None => PreprocessConfig::default(),
    };
    geometry.validate()?;
    let entries = load_manifest(&a.manifest)?;
    for entry in &entries {
        let study = assemble_study(entry)?;
        let dir = save_preprocessed(&preprocess_study(&study, &geometry)?, &a.out)?;
        log::info!("{} -> {}", entry.subject_id, dir.display());
    }
    println!("{} studies cached in {}", entries.len(), a.out.display());
    Ok(())
}

fn report_fold(r: &FoldResult) {
    let best = &r.history[r.selected_epoch];
    println!(
        "fold {}: selected epoch {} (val loss {:.4}) -> {}",
        r.fold,
        r.selected_epoch,
        best.val_loss,
        r.checkpoint.display()
    );
}

fn cmd_train(a: TrainArgs) -> sala_core::Result<()> {
    let config = TrainConfig::load(&a.config)?;
    if let Some(k) = a.fold {
        if k >= config.folds {
            return Err(Error::Validation(format!("fold {k} out of range 0..{}", config.folds)));
        }
    }
    if a.jobs == 0 {
        return Err(Error::Validation("--jobs must be >= 1".into()));
    }
    if !config.data_dir.is_dir() {
        return Err(Error::NotFound(config.data_dir.clone()));
    }
    let data = load_preprocessed_dir(&config.data_dir)?;
    let folds: Vec<usize> = match a.fold {
        Some(k) => vec![k],
        None => (0..config.folds).collect(),
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<sala_core::Result<FoldResult>>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..a.jobs.min(folds.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&fold) = folds.get(i) else { break };
                let r = train_fold(&config, fold, &data);
                results.lock().expect("no poisoned lock").push(r);
            });
        }
    });
    let mut results = results.into_inner().expect("no poisoned lock");
    results.sort_by_key(|r| r.as_ref().map(|f| f.fold).unwrap_or(usize::MAX));
    for r in results {
        report_fold(&r?);
    }
    Ok(())
}

fn cmd_infer(a: InferArgs) -> sala_core::Result<()> {
    require_file(&a.manifest)?;
    let cfg = InferenceConfig {
        cluster_ratio: a.cluster_ratio,
        ..InferenceConfig::default()
    };
    cfg.validate()?;
    let checkpoints = discover_checkpoints(&a.models)?;
    let ensemble = Ensemble::load(&checkpoints)?;
    let entries = load_manifest(&a.manifest)?;
    for entry in &entries {
        let written = infer_entry(&ensemble, entry, &cfg, &a.out)?;
        log::info!("{}: {} maps", entry.subject_id, written.len());
    }
    println!(
        "{} studies segmented with {} models into {}",
        entries.len(),
        checkpoints.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> sala_core::Result<()> {
    require_file(&a.manifest)?;
    if !a.pred.is_dir() {
        return Err(Error::NotFound(a.pred.clone()));
    }
    let entries = load_manifest(&a.manifest)?;
    let records = evaluate_predictions(&a.pred, &entries)?;
    write_metrics_csv(&a.out, &records)?;
    write_report_csv(&a.report, &pathology_report(&records))?;
    let n = records.len().max(1) as f64;
    let mean = |f: &dyn Fn(usize) -> f64| (0..records.len()).map(f).sum::<f64>() / n;
    let scores = record_scores(&records)?;
    println!(
        "{} subjects: DSC SA {:.4} LA {:.4}, HD95 SA {:.2} mm LA {:.2} mm, score {:.4}",
        records.len(),
        mean(&|i| records[i].sa.dsc()),
        mean(&|i| records[i].la.dsc()),
        mean(&|i| records[i].sa.hd95()),
        mean(&|i| records[i].la.hd95()),
        mean(&|i| scores[i])
    );
    Ok(())
}
