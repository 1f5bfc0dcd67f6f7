//! `tristage` command-line driver.
//!
//! Exit status: 0 on success, 1 for usage or validation errors, 2 for I/O
//! or numerical failures.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tristage::harness::{
    evaluate, export_attention, gradient_suite, resume, train, Checkpoint, Dataset, EpochLog, TrainConfig, Variant,
};
use tristage::metrics::{EvalReport, Predictions, WeightMatrix, DEFAULT_THRESHOLD};
use tristage::signal::{
    load_recording, read_recording_id, split_folds, synth_generate, write_class_list, write_dataset, DatasetManifest,
    SyntheticSpec,
};
use tristage::{Error, Result};

#[derive(Parser)]
#[command(name = "tristage", version, about = "Three-stage lead-wise ECG transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a SyntheticSpec JSON file.
    Synth {
        /// SyntheticSpec JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory for recordings, manifest.jsonl and classes.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign stratified cross-validation folds to a manifest.
    Split {
        #[command(flatten)]
        data: ManifestArgs,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Seed for shuffling within each label set.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output manifest path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint.bin, train_log.jsonl and config.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: ManifestArgs,
        /// Restrict to these folds.
        #[arg(long, value_delimiter = ',')]
        folds: Vec<usize>,
        /// Class-similarity weight matrix CSV; identity when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Output JSON report.
        #[arg(long)]
        report: PathBuf,
        /// Also write per-recording sigmoid scores as CSV.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Score a predictions CSV against manifest labels without a model.
    Score {
        /// CSV with columns `id,score_<class>,...`.
        #[arg(long)]
        predictions: PathBuf,
        #[command(flatten)]
        data: ManifestArgs,
        /// Class-similarity weight matrix CSV.
        #[arg(long)]
        weights: PathBuf,
        /// Decision threshold applied to every class.
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Output JSON report.
        #[arg(long)]
        report: PathBuf,
    },
    /// Export attention maps, lead attribution and overlays for one recording.
    ExportAttn {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: ManifestArgs,
        /// Recording id as stored in its header.
        #[arg(long)]
        id: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Random instances per check.
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ManifestArgs {
    /// JSON-lines manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Class list; defaults to classes.txt beside the manifest.
    #[arg(long)]
    classes: Option<PathBuf>,
}

impl ManifestArgs {
    fn load(&self) -> Result<DatasetManifest> {
        let classes = match &self.classes {
            Some(c) => c.clone(),
            None => self.manifest.with_file_name("classes.txt"),
        };
        DatasetManifest::load(&self.manifest, &classes)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TrainConfig JSON; the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: ManifestArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Model variant: base, no-gated, diff or no-gated-diff.
    #[arg(long)]
    variant: Option<Variant>,
    /// Overrides the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fold held out for validation.
    #[arg(long)]
    validation_fold: Option<usize>,
    /// Continue from a checkpoint until the configured epoch count.
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn synth(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec: SyntheticSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Format { path: p.to_path_buf(), msg: e.to_string() })?
        }
        None => SyntheticSpec::default(),
    };
    let recs = synth_generate(&spec)?;
    let manifest = write_dataset(&recs, spec.class_names(), out)?;
    manifest.save(&out.join("manifest.jsonl"))?;
    write_class_list(&manifest.class_names, &out.join("classes.txt"))?;
    println!("wrote {} recordings to {}", recs.len(), out.display());
    Ok(())
}

fn split(data: &ManifestArgs, folds: usize, seed: u64, out: &Path) -> Result<()> {
    let m = split_folds(&data.load()?, folds, seed)?;
    // Keep entry paths valid relative to the new manifest location.
    let mut m = m;
    let out_dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if fs::canonicalize(out_dir).ok() != fs::canonicalize(&m.root).ok() {
        for e in &mut m.entries {
            let abs = m.root.join(&e.path);
            e.path = fs::canonicalize(&abs).map_err(|err| io_err(&abs, err))?;
        }
    }
    m.save(out)?;
    let classes = out.with_file_name("classes.txt");
    if !classes.exists() {
        write_class_list(&m.class_names, &classes)?;
    }
    println!("assigned {} recordings to {folds} folds", m.entries.len());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match (&a.resume, &a.config) {
        (Some(ck), _) => Checkpoint::load(ck)?.config,
        (None, Some(p)) => TrainConfig::load(p)?,
        (None, None) => TrainConfig::desk(),
    };
    if let Some(v) = a.variant {
        v.apply(&mut cfg.model);
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.validation_fold.is_some() {
        cfg.validation_fold = a.validation_fold;
    }
    cfg.validate()?;

    let manifest = a.data.load()?;
    let (train_m, val_m) = match cfg.validation_fold {
        Some(f) => (manifest.select_folds(&[f], false), Some(manifest.select_folds(&[f], true))),
        None => (manifest, None),
    };
    let data = Dataset::load(&train_m, &cfg.pipeline)?;
    let val = val_m.map(|m| Dataset::load(&m, &cfg.pipeline)).transpose()?;

    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write(&a.out.join("config.json"), cfg.to_json())?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut log = |l: &EpochLog| -> Result<()> {
        writeln!(log_file, "{}", l.to_json_line()).map_err(|e| io_err(&log_path, e))?;
        eprintln!("epoch {} loss {:.6}", l.epoch, l.train_loss);
        Ok(())
    };
    let ckpt = match &a.resume {
        Some(p) => {
            let mut ck = Checkpoint::load(p)?;
            ck.config = cfg.clone();
            resume(ck, cfg.epochs, &data, val.as_ref(), &mut log)?
        }
        None => train(&cfg, &data, val.as_ref(), &mut log)?,
    };
    ckpt.save(&a.out.join("checkpoint.bin"))?;
    println!("trained {} epochs, checkpoint in {}", ckpt.epoch, a.out.display());
    Ok(())
}

fn eval(
    checkpoint: &Path,
    data: &ManifestArgs,
    folds: &[usize],
    weights: Option<&Path>,
    report: &Path,
    predictions: Option<&Path>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut m = data.load()?;
    if !folds.is_empty() {
        m = m.select_folds(folds, true);
    }
    if m.class_names != ck.class_names {
        return Err(Error::Data(format!(
            "manifest classes {:?} differ from checkpoint classes {:?}",
            m.class_names, ck.class_names
        )));
    }
    let w = weights.map(|p| WeightMatrix::load(p, &m.class_names)).transpose()?;
    let ds = Dataset::load(&m, &ck.config.pipeline)?;
    let (r, p) = evaluate(&ck, &ds, w.as_ref())?;
    write(report, r.to_json())?;
    if let Some(path) = predictions {
        p.save(path)?;
    }
    print_summary(&r);
    Ok(())
}

fn print_summary(r: &EvalReport) {
    let auc = r.macro_auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    println!(
        "recordings {}  macro AUC {auc}  F2 {:.4}  G2 {:.4}  challenge {:.4} (raw {:.4})",
        r.n_recordings, r.macro_fbeta, r.macro_gbeta, r.challenge.normalized, r.challenge.raw
    );
}

fn score(predictions: &Path, data: &ManifestArgs, weights: &Path, threshold: f64, report: &Path) -> Result<()> {
    let m = data.load()?;
    let p = Predictions::load(predictions)?;
    if p.class_names != m.class_names {
        return Err(Error::Data(format!(
            "prediction classes {:?} differ from manifest classes {:?}",
            p.class_names, m.class_names
        )));
    }
    let w = WeightMatrix::load(weights, &m.class_names)?;
    let mut labels = HashMap::new();
    for e in &m.entries {
        labels.insert(read_recording_id(&m.resolve(e))?, e.labels.clone());
    }
    let true_sets = p
        .ids
        .iter()
        .map(|id| labels.get(id).cloned().ok_or_else(|| Error::Data(format!("recording {id:?} is not in the manifest"))))
        .collect::<Result<Vec<_>>>()?;
    let thresholds = vec![threshold; m.n_classes()];
    let r = EvalReport::compute(&p.scores, &true_sets, &m.class_names, &thresholds, Some(&w))?;
    write(report, r.to_json())?;
    print_summary(&r);
    Ok(())
}

fn export(checkpoint: &Path, data: &ManifestArgs, id: &str, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let m = data.load()?;
    for e in &m.entries {
        let path = m.resolve(e);
        if read_recording_id(&path)? == id {
            let files = export_attention(&ck, &load_recording(&path)?, out)?;
            println!("wrote {} files to {}", files.len(), out.display());
            return Ok(());
        }
    }
    Err(Error::Data(format!("recording {id:?} is not in the manifest")))
}

/// Returns whether every check passed.
fn gradcheck(instances: usize, seed: u64) -> Result<bool> {
    let checks = gradient_suite(instances, seed)?;
    for c in &checks {
        println!(
            "{} {:<40} n={:<4} worst={:.3e} tol={:.0e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.instances,
            c.worst,
            c.tolerance
        );
    }
    Ok(checks.iter().all(|c| c.pass))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { spec, out } => synth(spec.as_deref(), &out)?,
        Command::Split { data, folds, seed, out } => split(&data, folds, seed, &out)?,
        Command::Train(a) => run_train(&a)?,
        Command::Eval { checkpoint, data, folds, weights, report, predictions } => {
            eval(&checkpoint, &data, &folds, weights.as_deref(), &report, predictions.as_deref())?
        }
        Command::Score { predictions, data, weights, threshold, report } => {
            score(&predictions, &data, &weights, threshold, &report)?
        }
        Command::ExportAttn { checkpoint, data, id, out } => export(&checkpoint, &data, &id, &out)?,
        Command::Gradcheck { instances, seed } => {
            if !gradcheck(instances, seed)? {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
