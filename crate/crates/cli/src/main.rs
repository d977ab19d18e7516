//! Command line over the lietext core: training runs, checkpoint
//! evaluation, the symmetry probe, representation export, and the two
//! verification suites (gradient check, reduction parity).
//!
//! Exit codes are the success signal: 0 only for a clean run, 1 for
//! anything validation-shaped (bad flags, bad config, failed tolerance),
//! 2 for runtime failures (divergence, I/O). Human-readable summaries go
//! to standard output; machine-readable JSON goes to `--out`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lietext_core::corpus::{CorpusError, Dataset, Vocab, FETCH_MANIFEST};
use lietext_core::harness::{
    self, evaluate, export_representations, gradcheck_model, parameter_control, resolve_dataset,
    resolve_sis_pairs, run_train, symmetry_probe, write_atomic, HarnessError, RunConfig, RunMeta,
    SplitSpec,
};
use lietext_core::lieconv;
use lietext_core::models::{load_checkpoint, Arch, Model, ModelError};
use lietext_core::ndtensor::TensorError;
use lietext_core::real::Real;

#[derive(Parser)]
#[command(name = "lietext", version, about = "Lie-group convolutions for sentence classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and keep the best-dev checkpoint.
    Train(RunArgs),
    /// Evaluate a saved checkpoint on the held-out split.
    Eval(RunArgs),
    /// Correlate checkpoint sentence similarities with symmetry scores.
    Probe(RunArgs),
    /// Write L2-normalized sentence representations as CSV.
    ExportRepr(RunArgs),
    /// Compare analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Check the lookup-kernel layer against plain convolution, bitwise.
    Parity(ParityArgs),
    /// Train a channel-matched plain baseline next to its lie model.
    ParamControl(RunArgs),
    /// Print dataset provenance and the expected file layout.
    FetchManifest(OutArg),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; replaces the config value.
    #[arg(long)]
    seed: Option<u64>,
    /// Machine-readable report destination.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path config override, e.g. optimizer.lr=0.05. Repeatable,
    /// applied in order after the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Float width for model arithmetic.
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    precision: PrecisionArg,
    /// Use the compiled-in synthetic fixtures instead of LIETEXT_DATA_DIR.
    #[arg(long)]
    fixture: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Architecture to check.
    #[arg(long, value_enum)]
    model: ArchArg,
    /// Finite differences are only trustworthy in f64.
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParityArgs {
    /// Randomized layer instances to compare.
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OutArg {
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Linear,
    Scnn,
    Sclie,
    Dpcnn,
    Dpclie,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Arch {
        match a {
            ArchArg::Linear => Arch::Linear,
            ArchArg::Scnn => Arch::Scnn,
            ArchArg::Sclie => Arch::Sclie,
            ArchArg::Dpcnn => Arch::Dpcnn,
            ArchArg::Dpclie => Arch::Dpclie,
        }
    }
}

// ---------------------------------------------------------------------
// errors and exit codes
// ---------------------------------------------------------------------

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        Self { code: EXIT_VALIDATION, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self { code: EXIT_RUNTIME, message: message.into() }
    }
}

fn tensor_code(e: &TensorError) -> u8 {
    // a non-finite value is the divergence signal; everything else is a
    // violated precondition
    match e {
        TensorError::NonFinite { .. } => EXIT_RUNTIME,
        _ => EXIT_VALIDATION,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Io { .. } => EXIT_RUNTIME,
        ModelError::Tensor(t) => tensor_code(t),
        _ => EXIT_VALIDATION,
    }
}

fn corpus_code(e: &CorpusError) -> u8 {
    match e {
        CorpusError::Io { .. } => EXIT_RUNTIME,
        _ => EXIT_VALIDATION,
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::Divergence { .. } | HarnessError::Io { .. } => EXIT_RUNTIME,
            HarnessError::Tensor(t) => tensor_code(t),
            HarnessError::Model(m) => model_code(m),
            HarnessError::Corpus(c) => corpus_code(c),
            // a representation collapsing to zero norm mid-export is a
            // degraded run, not a config mistake
            HarnessError::ZeroNorm => EXIT_RUNTIME,
            _ => EXIT_VALIDATION,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self { code: model_code(&e), message: e.to_string() }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        Self { code: corpus_code(&e), message: e.to_string() }
    }
}

impl From<lieconv::LieConvError> for CliError {
    fn from(e: lieconv::LieConvError) -> Self {
        let code = match &e {
            lieconv::LieConvError::Tensor(t) => tensor_code(t),
            _ => EXIT_VALIDATION,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, CliError>;

// ---------------------------------------------------------------------
// config loading
// ---------------------------------------------------------------------

fn apply_override(root: &mut serde_json::Value, spec: &str) -> CliResult<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        return Err(CliError::validation(format!(
            "override {spec:?} is not of the form KEY=VALUE"
        )));
    };
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::validation(format!("override {spec:?} has an empty path segment")));
    }
    // values parse as JSON where possible, else as a bare string, so
    // numbers, booleans, arrays, and plain names all work unquoted
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, init) = parts.split_last().expect("key is non-empty");
    let mut cur = root;
    for (i, part) in init.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            CliError::validation(format!(
                "override path {key:?} descends into a non-object at {:?}",
                parts[..=i].join(".")
            ))
        })?;
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let obj = cur.as_object_mut().ok_or_else(|| {
        CliError::validation(format!("override path {key:?} descends into a non-object"))
    })?;
    obj.insert(last.to_string(), value);
    Ok(())
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Map { key } => {
                out.push('/');
                out.push_str(&key.replace('~', "~0").replace('/', "~1"));
            }
            Segment::Seq { index } => {
                out.push('/');
                out.push_str(&index.to_string());
            }
            Segment::Enum { variant } => {
                out.push('/');
                out.push_str(variant);
            }
            Segment::Unknown => out.push_str("/?"),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

fn load_config(path: &Path, overrides: &[String], seed: Option<u64>) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(CliError::validation(format!(
            "{}: config root must be a JSON object",
            path.display()
        )));
    }
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    if let Some(s) = seed {
        value
            .as_object_mut()
            .expect("checked above")
            .insert("seed".to_string(), serde_json::Value::from(s));
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        CliError::validation(format!(
            "{}: config error at {}: {}",
            path.display(),
            json_pointer(e.path()),
            e.inner()
        ))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------

fn write_json<T: Serialize>(out: Option<&PathBuf>, value: &T) -> CliResult<()> {
    if let Some(path) = out {
        write_atomic(path, harness::to_json_pretty(value).as_bytes())?;
        println!("report -> {}", path.display());
    }
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig) -> CliResult<PathBuf> {
    match &cfg.checkpoint {
        Some(p) => Ok(PathBuf::from(p)),
        None => Err(CliError::validation(
            "this subcommand reads a saved model: set \"checkpoint\" in the config \
             or pass --override checkpoint=PATH",
        )),
    }
}

/// Checkpoint model plus the run vocabulary it must agree with.
fn load_run_model<R: Real>(
    cfg: &RunConfig,
    fixture: bool,
) -> CliResult<(Model<R>, harness::ResolvedData, Vocab)> {
    let path = checkpoint_path(cfg)?;
    let model = load_checkpoint::<R>(&path)?;
    let data = resolve_dataset(&cfg.data, fixture)?;
    let vocab = harness::build_run_vocab(&data, cfg.data.min_count);
    Ok((model, data, vocab))
}

/// The split an eval faces, mirroring how training derived it.
fn eval_split<'a>(
    cfg: &RunConfig,
    data: &'a harness::ResolvedData,
) -> CliResult<(&'a Dataset, Vec<usize>, String)> {
    if let Some(test) = &data.test {
        return Ok((test, (0..test.examples.len()).collect(), "test".to_string()));
    }
    match cfg.data.split {
        SplitSpec::Cv10 { fold: Some(f) } => {
            let s = lietext_core::corpus::split_cv10(&data.train, f, cfg.seed)?;
            Ok((&data.train, s.test, format!("cv10-fold{f}")))
        }
        SplitSpec::Cv10 { fold: None } => Err(CliError::validation(
            "evaluating a cross-validated corpus needs a fold: \
             pass --override data.split.fold=N",
        )),
        SplitSpec::Standard { dev_fraction } => {
            let (_, dev) = lietext_core::corpus::dev_holdout(&data.train, dev_fraction, cfg.seed)?;
            Ok((&data.train, dev, "dev-holdout".to_string()))
        }
    }
}

// ---------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------

fn cmd_train<R: Real>(args: &RunArgs) -> CliResult<()> {
    let cfg = load_config(&args.config, &args.overrides, args.seed)?;
    let (report, checkpoint) = run_train::<R>(&cfg, args.fixture)?;
    println!(
        "trained {} on {} ({} classes, {} train examples, {} parameters)",
        cfg.model.arch.name(),
        report.data.name,
        report.data.classes,
        report.data.train_examples,
        report.parameters.total,
    );
    for fold in &report.folds {
        let test = match fold.test_accuracy {
            Some(a) => format!(", test {a:.4}"),
            None => String::new(),
        };
        println!(
            "fold {}: best dev {:.4} at epoch {}{}{}",
            fold.fold,
            fold.best_dev_accuracy,
            fold.best_epoch,
            test,
            if fold.stopped_early { " (early stop)" } else { "" },
        );
    }
    if let (Some(mean), Some(std)) = (report.cv_mean, report.cv_std) {
        println!("cv mean {mean:.4} +- {std:.4}");
    }
    println!("headline accuracy {:.4}", report.headline_accuracy());
    if let Some(path) = &cfg.checkpoint {
        write_atomic(Path::new(path), &checkpoint)?;
        println!("checkpoint -> {path}");
    }
    write_json(args.out.as_ref(), &report)
}

#[derive(Serialize)]
struct EvalOutput {
    dataset: String,
    split: String,
    examples: usize,
    accuracy: f64,
    labels: Vec<String>,
    confusion: Vec<Vec<usize>>,
    checkpoint: String,
    meta: RunMeta,
}

fn cmd_eval<R: Real>(args: &RunArgs) -> CliResult<()> {
    let started = std::time::Instant::now();
    let cfg = load_config(&args.config, &args.overrides, args.seed)?;
    let (model, data, vocab) = load_run_model::<R>(&cfg, args.fixture)?;
    let (ds, indices, split) = eval_split(&cfg, &data)?;
    let eval = evaluate(&model, ds, &indices, &vocab)?;
    println!(
        "eval {} [{split}]: accuracy {:.4} over {} examples",
        cfg.data.name,
        eval.accuracy,
        indices.len(),
    );
    let output = EvalOutput {
        dataset: cfg.data.name.clone(),
        split,
        examples: indices.len(),
        accuracy: eval.accuracy,
        labels: ds.labels.clone(),
        confusion: eval.confusion,
        checkpoint: cfg.checkpoint.clone().unwrap_or_default(),
        meta: RunMeta { wall_seconds: started.elapsed().as_secs_f64() },
    };
    write_json(args.out.as_ref(), &output)
}

fn cmd_probe<R: Real>(args: &RunArgs) -> CliResult<()> {
    let cfg = load_config(&args.config, &args.overrides, args.seed)?;
    let (model, _, vocab) = load_run_model::<R>(&cfg, args.fixture)?;
    let pairs = resolve_sis_pairs(&cfg.data, cfg.seed, args.fixture)?;
    let report = symmetry_probe(&model, &vocab, &pairs)?;
    match (report.pearson, report.spearman) {
        (Some(p), Some(s)) => {
            println!(
                "probe {} pairs: pearson {p:.4}, spearman {s:.4} \
                 (oriented so positive = symmetry captured)",
                report.pairs,
            );
        }
        _ => println!("probe {} pairs: correlation undefined", report.pairs),
    }
    write_json(args.out.as_ref(), &report)?;
    if let Some(cond) = &report.degenerate {
        return Err(CliError::validation(format!("degenerate probe: {cond}")));
    }
    Ok(())
}

fn cmd_export_repr<R: Real>(args: &RunArgs) -> CliResult<()> {
    let out = args.out.as_ref().ok_or_else(|| {
        CliError::validation("export-repr writes CSV and requires --out PATH")
    })?;
    let cfg = load_config(&args.config, &args.overrides, args.seed)?;
    let (model, data, vocab) = load_run_model::<R>(&cfg, args.fixture)?;
    let csv = export_representations(&model, &data.train, &vocab)?;
    write_atomic(out, csv.as_bytes())?;
    println!(
        "exported {} representations of dim {} -> {}",
        data.train.examples.len(),
        model.rep_dim(),
        out.display(),
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    if args.precision == PrecisionArg::F32 {
        return Err(CliError::validation(
            "gradcheck compares against central differences and needs --precision f64",
        ));
    }
    const TOL: f64 = 1e-4;
    let report = gradcheck_model(Arch::from(args.model), args.seed)?;
    let pass = report.passes(TOL);
    println!(
        "gradcheck {}: {} coordinates, max relative error {:.3e} at {} -> {}",
        Arch::from(args.model).name(),
        report.checked,
        report.max_rel_err,
        report.worst,
        if pass { "pass" } else { "FAIL" },
    );
    write_json(args.out.as_ref(), &report)?;
    if pass {
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "max relative error {:.3e} exceeds {TOL:.0e}",
            report.max_rel_err
        )))
    }
}

fn cmd_parity(args: &ParityArgs) -> CliResult<()> {
    let report = lieconv::reduction_parity(args.instances, args.seed)?;
    println!(
        "parity: {}/{} instances bitwise exact",
        report.instances - report.mismatches,
        report.instances,
    );
    write_json(args.out.as_ref(), &report)?;
    if report.exact() {
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "{} of {} instances diverged from conv1d (first at instance {})",
            report.mismatches,
            report.instances,
            report.first_mismatch.expect("mismatches imply an index"),
        )))
    }
}

fn cmd_param_control<R: Real>(args: &RunArgs) -> CliResult<()> {
    let cfg = load_config(&args.config, &args.overrides, args.seed)?;
    let report = parameter_control::<R>(&cfg, args.fixture)?;
    println!(
        "param-control: lie {} vs matched {} non-embedding parameters \
         (multiplier {:.2}, gap {:.2}%)",
        report.lie_parameters.non_embedding,
        report.matched_parameters.non_embedding,
        report.chosen_multiplier,
        100.0 * report.parity_gap,
    );
    println!(
        "accuracy: lie {:.4}, matched {:.4}, delta {:+.4}",
        report.lie_accuracy, report.matched_accuracy, report.accuracy_delta,
    );
    write_json(args.out.as_ref(), &report)?;
    if report.parity_within_tolerance {
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "no grid multiplier brought the parameter gap within tolerance \
             (best {:.2}%)",
            100.0 * report.parity_gap
        )))
    }
}

fn cmd_fetch_manifest(args: &OutArg) -> CliResult<()> {
    print!("{FETCH_MANIFEST}");
    if let Some(path) = &args.out {
        write_atomic(path, FETCH_MANIFEST.as_bytes())?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match &cli.cmd {
        Cmd::Train(a) => match a.precision {
            PrecisionArg::F32 => cmd_train::<f32>(a),
            PrecisionArg::F64 => cmd_train::<f64>(a),
        },
        Cmd::Eval(a) => match a.precision {
            PrecisionArg::F32 => cmd_eval::<f32>(a),
            PrecisionArg::F64 => cmd_eval::<f64>(a),
        },
        Cmd::Probe(a) => match a.precision {
            PrecisionArg::F32 => cmd_probe::<f32>(a),
            PrecisionArg::F64 => cmd_probe::<f64>(a),
        },
        Cmd::ExportRepr(a) => match a.precision {
            PrecisionArg::F32 => cmd_export_repr::<f32>(a),
            PrecisionArg::F64 => cmd_export_repr::<f64>(a),
        },
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Parity(a) => cmd_parity(a),
        Cmd::ParamControl(a) => match a.precision {
            PrecisionArg::F32 => cmd_param_control::<f32>(a),
            PrecisionArg::F64 => cmd_param_control::<f64>(a),
        },
        Cmd::FetchManifest(a) => cmd_fetch_manifest(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_VALIDATION,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
