//! Command line front end. Every pipeline stage is reachable from here:
//! corpus generation, training, evaluation, chunked inference, vocabulary
//! stripping, teacher relabeling, and model file inspection.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format error, 3 numeric
//! failure. Diagnostics go to standard error; results go to standard
//! output or to files named by flags.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use ukat::audio::Waveform;
use ukat::dsp::FrontendConfig;
use ukat::eval::{evaluate, threshold_sweep, EvalTask};
use ukat::infer::{infer_clip, ChunkRecord, DecisionPolicy, WakeCondition, DEFAULT_CHUNK_SECS, DEFAULT_DECISION_THRESHOLD};
use ukat::labels::read_vocab_file;
use ukat::manifest::{load_manifest, write_manifest};
use ukat::model::{load_model, read_header_value, save_model, ArchitectureConfig};
use ukat::synth::{generate, SynthSpec};
use ukat::train::{random_crop, train, CheckpointEntry, EpochRecord, TeacherScorer, TrainConfig, TrainInputs};
use ukat::Error;

#[derive(Parser)]
#[command(name = "ukat", version, about = "Unified keyword spotting and audio tagging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with manifests and a vocabulary file
    Synth(SynthArgs),
    /// Train a model and keep the best checkpoints
    Train(TrainArgs),
    /// Score an evaluation manifest and report task metrics
    Eval(EvalArgs),
    /// Run chunked inference over audio files, one JSON line per chunk
    Infer(InferArgs),
    /// Reduce a model to a subset of its labels
    Strip(StripArgs),
    /// Rewrite event entries of a manifest with teacher-scored soft labels
    Relabel(RelabelArgs),
    /// Print a model file's header as JSON
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for audio, manifests, and vocab.txt
    #[arg(long)]
    out: PathBuf,
    /// Corpus description, TOML; defaults apply field by field
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the seed from --spec
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest, JSON Lines
    #[arg(long)]
    train: PathBuf,
    /// Validation manifest, JSON Lines
    #[arg(long)]
    val: PathBuf,
    /// Vocabulary file, events then keywords
    #[arg(long)]
    vocab: PathBuf,
    /// Checkpoint and report directory
    #[arg(long)]
    out: PathBuf,
    /// Training hyperparameters, TOML; defaults apply field by field
    #[arg(long)]
    config: Option<PathBuf>,
    /// Network shape, TOML; defaults to the full-scale architecture
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Front end parameters, TOML; defaults to the standard front end
    #[arg(long)]
    frontend: Option<PathBuf>,
    /// Teacher model for soft event targets
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Overrides the seed from --config
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    /// Keyword accuracy over 1 s chunks
    Kws,
    /// Event tagging mean average precision over whole clips
    At,
    /// Keyword rejection rate on negative audio
    Neg,
}

impl TaskArg {
    fn task(self) -> EvalTask {
        match self {
            TaskArg::Kws => EvalTask::Keyword,
            TaskArg::At => EvalTask::Event,
            TaskArg::Neg => EvalTask::Negative,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Evaluation manifest, JSON Lines
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Keyword decision threshold
    #[arg(long, default_value_t = DEFAULT_DECISION_THRESHOLD)]
    gamma: f32,
    /// Sweep lo:hi:step instead of a single report; emits CSV
    #[arg(long, conflicts_with = "gamma")]
    gamma_sweep: Option<String>,
    /// Chunk length in seconds
    #[arg(long, default_value_t = DEFAULT_CHUNK_SECS)]
    chunk_secs: f64,
    /// Include a per-class breakdown in the report
    #[arg(long)]
    per_class: bool,
    /// Write the report here instead of standard output
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Keyword decision threshold
    #[arg(long, default_value_t = DEFAULT_DECISION_THRESHOLD)]
    gamma: f32,
    /// Chunk length in seconds
    #[arg(long, default_value_t = DEFAULT_CHUNK_SECS)]
    chunk_secs: f64,
    /// Event tags to report per chunk
    #[arg(long, default_value_t = 3)]
    top_events: usize,
    /// Comma-separated event labels that must be active for a keyword to fire
    #[arg(long, requires = "wake_threshold")]
    wake_on: Option<String>,
    /// Minimum score on the best --wake-on label
    #[arg(long, requires = "wake_on")]
    wake_threshold: Option<f32>,
    /// Audio files to score
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(Args)]
struct StripArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated label names, or @file with one name per line
    #[arg(long)]
    keep: String,
    /// Where to write the reduced model
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RelabelArgs {
    /// Teacher model whose event scores become soft targets
    #[arg(long)]
    teacher: PathBuf,
    /// Student vocabulary the soft maps are written against
    #[arg(long)]
    vocab: PathBuf,
    /// Manifest to relabel, JSON Lines
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the relabeled manifest
    #[arg(long)]
    out: PathBuf,
    /// Score a random crop of this many seconds instead of the whole clip
    #[arg(long)]
    crop: Option<f64>,
    /// Seed for crop placement
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    /// Model file
    model: PathBuf,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli.command) {
        Ok(()) => {}
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            std::process::exit(if e.is_numeric() { 3 } else { 2 });
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
        Command::Strip(a) => run_strip(a),
        Command::Relabel(a) => run_relabel(a),
        Command::Inspect(a) => run_inspect(a),
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text)
        .map_err(|e| Failure::Lib(Error::Config(format!("{}: {e}", path.display()))))
}

/// Reads a TOML config, or gives the type's default when no path was named.
fn toml_or_default<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, Failure> {
    match path {
        Some(p) => read_toml(p),
        None => Ok(T::default()),
    }
}

fn emit<T: Serialize>(report: &T, to: &Option<PathBuf>) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Encoding(format!("report serialization: {e}")))?;
    text.push('\n');
    match to {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e).into()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct SynthReport {
    seed: u64,
    n_files: usize,
    vocab_file: PathBuf,
    train_manifest: PathBuf,
    val_manifest: PathBuf,
    eval_keyword_manifest: PathBuf,
    eval_event_manifest: PathBuf,
    eval_negative_manifest: PathBuf,
}

fn run_synth(a: SynthArgs) -> Result<(), Failure> {
    let mut spec: SynthSpec = toml_or_default(&a.spec)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let s = generate(&spec, &a.out)?;
    emit(
        &SynthReport {
            seed: spec.seed,
            n_files: s.n_files,
            vocab_file: s.vocab_file,
            train_manifest: s.train_manifest,
            val_manifest: s.val_manifest,
            eval_keyword_manifest: s.eval_keyword_manifest,
            eval_event_manifest: s.eval_event_manifest,
            eval_negative_manifest: s.eval_negative_manifest,
        },
        &None,
    )
}

#[derive(Serialize)]
struct TrainReport {
    seed: u64,
    initial_loss: f64,
    final_loss: f64,
    best: CheckpointEntry,
    best_model: PathBuf,
    ranking: Vec<CheckpointEntry>,
    epochs: Vec<EpochRecord>,
}

fn run_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg: TrainConfig = toml_or_default(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let vocab = read_vocab_file(&a.vocab)?;
    let arch = match &a.arch {
        Some(p) => read_toml::<ArchitectureConfig>(p)?,
        None => ArchitectureConfig::reference(vocab.len()),
    };
    let frontend: FrontendConfig = toml_or_default(&a.frontend)?;
    let teacher = match &a.teacher {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    let train_entries = load_manifest(&a.train)?;
    let val_entries = load_manifest(&a.val)?;

    let outcome = train(
        &cfg,
        TrainInputs {
            arch: &arch,
            frontend: &frontend,
            vocab: &vocab,
            train_entries: &train_entries,
            val_entries: &val_entries,
            teacher,
            checkpoint_dir: &a.out,
        },
    )?;

    let best = outcome.ranking.first().cloned().ok_or_else(|| {
        Error::Config("training produced no checkpoints; raise checkpoint_top_k or max_epochs".into())
    })?;
    let best_model = a.out.join("best.ukat");
    std::fs::copy(a.out.join(&best.file), &best_model).map_err(|e| Error::io(&best_model, e))?;

    let report = TrainReport {
        seed: cfg.seed,
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
        best,
        best_model,
        ranking: outcome.ranking,
        epochs: outcome.epochs,
    };
    emit(&report, &Some(a.out.join("train_summary.json")))?;
    emit(&report, &None)
}

/// "lo:hi:step" to an inclusive grid of thresholds.
fn parse_sweep(text: &str) -> Result<Vec<f32>, Failure> {
    let usage = || Failure::Usage(format!("--gamma-sweep wants lo:hi:step, got {text:?}"));
    let parts: Vec<&str> = text.split(':').collect();
    let &[lo, hi, step] = parts.as_slice() else { return Err(usage()) };
    let (lo, hi, step): (f32, f32, f32) = (
        lo.parse().map_err(|_| usage())?,
        hi.parse().map_err(|_| usage())?,
        step.parse().map_err(|_| usage())?,
    );
    if !(lo.is_finite() && hi.is_finite() && step > 0.0 && lo <= hi) {
        return Err(usage());
    }
    let mut grid = Vec::new();
    let mut k = 0u32;
    loop {
        let t = lo + step * k as f32;
        if t > hi + step * 1e-3 {
            break;
        }
        grid.push(t.min(hi));
        k += 1;
    }
    Ok(grid)
}

fn run_eval(a: EvalArgs) -> Result<(), Failure> {
    // Flag consistency is a usage question; settle it before touching files.
    let sweep = match &a.gamma_sweep {
        Some(text) => {
            let metric = match a.task {
                TaskArg::Kws => "accuracy",
                TaskArg::Neg => "rejection_rate",
                TaskArg::At => {
                    return Err(Failure::Usage(
                        "--gamma-sweep applies to kws and neg tasks; event tagging has no decision threshold".into(),
                    ))
                }
            };
            Some((parse_sweep(text)?, metric))
        }
        None => None,
    };
    let model = load_model(&a.model)?;
    let entries = load_manifest(&a.manifest)?;
    match sweep {
        Some((grid, metric)) => {
            let points = threshold_sweep(&model, &entries, a.task.task(), &grid, a.chunk_secs)?;
            let mut csv = format!("gamma,{metric}\n");
            for p in points {
                csv.push_str(&format!("{},{}\n", p.threshold, p.value));
            }
            match &a.report {
                Some(path) => std::fs::write(path, csv).map_err(|e| Error::io(path, e).into()),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
        None => {
            let report =
                evaluate(&model, &entries, a.task.task(), a.gamma, a.chunk_secs, a.per_class)?;
            emit(&report, &a.report)
        }
    }
}

/// A chunk record plus the file it came from, for multi-file output.
#[derive(Serialize)]
struct FileChunkRecord<'a> {
    file: &'a str,
    #[serde(flatten)]
    record: &'a ChunkRecord,
}

fn run_infer(a: InferArgs) -> Result<(), Failure> {
    let model = load_model(&a.model)?;
    let condition = match (&a.wake_on, a.wake_threshold) {
        (Some(labels), Some(threshold)) => Some(WakeCondition {
            labels: labels.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            threshold,
        }),
        _ => None,
    };
    let policy = DecisionPolicy { threshold: a.gamma, condition };
    use std::io::Write;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for path in &a.files {
        let w = Waveform::from_wav_file(path)?;
        let records = infer_clip(&model, &w, &policy, a.chunk_secs, a.top_events)?;
        let file = path.to_string_lossy();
        for record in &records {
            let line = serde_json::to_string(&FileChunkRecord { file: &file, record })
                .map_err(|e| Error::Encoding(format!("chunk record serialization: {e}")))?;
            writeln!(out, "{line}").map_err(|e| Error::io("stdout", e))?;
        }
    }
    Ok(())
}

/// Label names from "a,b,c" or from @file with one name per line.
fn parse_keep(text: &str) -> Result<Vec<String>, Failure> {
    let names: Vec<String> = if let Some(path) = text.strip_prefix('@') {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        body.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect()
    } else {
        text.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
    };
    if names.is_empty() {
        return Err(Failure::Usage("--keep names no labels".into()));
    }
    Ok(names)
}

#[derive(Serialize)]
struct StripReport {
    kept: Vec<String>,
    labels_before: usize,
    labels_after: usize,
    parameters_before: usize,
    parameters_after: usize,
    out: PathBuf,
}

fn run_strip(a: StripArgs) -> Result<(), Failure> {
    let keep = parse_keep(&a.keep)?;
    let model = load_model(&a.model)?;
    let stripped = model.strip(&keep)?;
    save_model(&stripped, &a.out)?;
    emit(
        &StripReport {
            kept: keep,
            labels_before: model.vocab.len(),
            labels_after: stripped.vocab.len(),
            parameters_before: model.params.count_parameters(),
            parameters_after: stripped.params.count_parameters(),
            out: a.out,
        },
        &None,
    )
}

fn run_relabel(a: RelabelArgs) -> Result<(), Failure> {
    let vocab = read_vocab_file(&a.vocab)?;
    let scorer = TeacherScorer::new(load_model(&a.teacher)?, &vocab)?;
    let mut entries = load_manifest(&a.manifest)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut scored = 0usize;
    for entry in &mut entries {
        if entry.source != ukat::manifest::SourceTag::At {
            continue;
        }
        let w = Waveform::from_wav_file(Path::new(&entry.audio))?;
        let view = match a.crop {
            Some(secs) => random_crop(&w, secs, &mut rng)?,
            None => w,
        };
        let scores = scorer.soft_targets(&view)?;
        let map: indexmap::IndexMap<String, f32> = vocab
            .at_labels()
            .iter()
            .zip(&scores)
            .map(|(name, &s)| (name.clone(), s.clamp(0.0, 1.0)))
            .collect();
        entry.soft = Some(map);
        scored += 1;
    }
    write_manifest(&a.out, &entries)?;
    #[derive(Serialize)]
    struct RelabelReport {
        seed: u64,
        entries: usize,
        scored: usize,
        out: PathBuf,
    }
    emit(
        &RelabelReport { seed: a.seed, entries: entries.len(), scored, out: a.out },
        &None,
    )
}

fn run_inspect(a: InspectArgs) -> Result<(), Failure> {
    let header = read_header_value(&a.model)?;
    let mut text = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Encoding(format!("header serialization: {e}")))?;
    text.push('\n');
    print!("{text}");
    Ok(())
}
