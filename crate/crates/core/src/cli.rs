//! The `sqlrank` command line.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or data error,
//! 3 training divergence. Reports go to stdout as JSON, logs to stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Sidecar};
use crate::data::{self, Delimiter, Feedback, IdMap, RatingsDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics;
use crate::perm_model::Cutoff;
use crate::presets;
use crate::trainer::{self, TrainConfig};
use crate::verify::{self, VerifyOptions, VerifyReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const TRAIN_FILE: &str = "train.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const IDMAP_FILE: &str = "idmap.json";
pub const META_FILE: &str = "meta.json";
pub const MODEL_FILE: &str = "model.bin";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Parser, Debug)]
#[command(name = "sqlrank", version, about = "Listwise collaborative ranking")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    /// Worker threads for gradient and metric computation; 1 runs serially.
    #[arg(long, global = true, env = "SQLRANK_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Binarize, filter and split a rating file.
    Preprocess(PreprocessArgs),
    /// Fit a model on a preprocessed directory.
    Train(TrainArgs),
    /// Score a checkpoint on held-out data.
    Evaluate(EvaluateArgs),
    /// Run the gradient, probability and timing checks.
    Verify(VerifyArgs),
    /// Run only the gradient checks.
    CheckGrad(CheckGradArgs),
    /// Sample orderings for a score vector and compare with the model.
    Sample(SampleArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Rating file: one `user item score` observation per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    outdir: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    /// TOML file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// auto, comma, tab, whitespace, or a literal separator such as `::`.
    #[arg(long, default_value = "auto")]
    delimiter: Delimiter,
    #[arg(long)]
    min_ratings: Option<usize>,
    #[arg(long)]
    train_per_user: Option<usize>,
    /// Scores at or above this become implicit 1's.
    #[arg(long, conflicts_with = "explicit")]
    threshold: Option<u32>,
    /// Keep graded scores (ignore any preset threshold).
    #[arg(long)]
    explicit: bool,
}

#[derive(Args, Debug, Default)]
struct TrainOverrides {
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Initial step size.
    #[arg(long)]
    ss: Option<f64>,
    /// Step-size decay per block update.
    #[arg(long)]
    rate: Option<f64>,
    /// Negatives per observed 1.
    #[arg(long)]
    rho: Option<f64>,
    /// List cutoff: an integer or `full`.
    #[arg(long)]
    k: Option<Cutoff>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs without improvement before stopping, or `none`.
    #[arg(long, value_parser = parse_patience)]
    patience: Option<Patience>,
    #[arg(long)]
    init_scale: Option<f64>,
    /// Draw one ordering up front and reuse it every epoch.
    #[arg(long)]
    no_sq: bool,
}

#[derive(Debug, Clone, Copy)]
struct Patience(Option<usize>);

fn parse_patience(s: &str) -> std::result::Result<Patience, String> {
    match s {
        "none" => Ok(Patience(None)),
        _ => s
            .parse()
            .map(|p| Patience(Some(p)))
            .map_err(|_| format!("expected an integer or `none`, got {s:?}")),
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory written by `preprocess`.
    #[arg(long)]
    input: PathBuf,
    /// Where the checkpoint goes (defaults to the input directory).
    #[arg(long)]
    outdir: Option<PathBuf>,
    /// Checkpoint path; overrides --outdir.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Validation ratings in the input's ID space (defaults to the test split).
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long, default_value = "auto")]
    delimiter: Delimiter,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory written by `preprocess`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Held-out ratings (defaults to the test split).
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value = "auto")]
    delimiter: Delimiter,
    /// Where eval.json goes (defaults to the input directory).
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long, default_value = "1,5,10", value_parser = parse_cutoffs)]
    cutoffs: Cutoffs,
    /// NDCG cutoffs, used for explicit data.
    #[arg(long, default_value = "10", value_parser = parse_cutoffs)]
    ndcg_cutoffs: Cutoffs,
}

#[derive(Debug, Clone)]
struct Cutoffs(Vec<usize>);

fn parse_cutoffs(s: &str) -> std::result::Result<Cutoffs, String> {
    let ks: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad cutoff {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    if ks.contains(&0) {
        return Err("cutoffs must be at least 1".into());
    }
    Ok(Cutoffs(ks))
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = verify::MC_DEFAULT_SAMPLES)]
    mc_samples: usize,
    /// Perturb the fast gradient so the equivalence check must fail.
    #[arg(long)]
    inject_fault: bool,
    #[arg(long)]
    skip_timing: bool,
}

#[derive(Args, Debug)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Comma-separated scores, e.g. `1,-1,0.5`.
    #[arg(long, allow_hyphen_values = true, value_delimiter = ',', required = true)]
    scores: Vec<f64>,
    #[arg(long, default_value_t = verify::MC_DEFAULT_SAMPLES)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Summary written next to the split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessMeta {
    pub preset: Option<String>,
    pub mode: Feedback,
    pub split: SplitSpec,
    pub n: usize,
    pub m: usize,
    pub input_entries: usize,
    pub train_entries: usize,
    pub test_entries: usize,
    pub users_kept: usize,
    pub dropped_users: usize,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    checkpoint: PathBuf,
    epochs_run: usize,
    best_epoch: usize,
    best_validation: Option<f64>,
    final_loss: Option<f64>,
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .try_init();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        pool = pool.num_threads(t.max(1));
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            log::error!("cannot start worker threads: {e}");
            return EXIT_USAGE;
        }
    };
    let parallel = cli.threads != Some(1);
    let outcome = pool.install(|| match cli.command {
        Command::Preprocess(a) => cmd_preprocess(&a),
        Command::Train(a) => cmd_train(&a, parallel),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::CheckGrad(a) => cmd_check_grad(&a),
        Command::Sample(a) => cmd_sample(&a),
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            match e {
                Error::Divergence { .. } => EXIT_DIVERGED,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

fn cmd_preprocess(a: &PreprocessArgs) -> Result<i32> {
    require_file(&a.input)?;
    let settings = presets::load(a.preset.as_deref(), a.config.as_deref())?;
    let mut split = match (settings.split, a.min_ratings, a.train_per_user) {
        (Some(s), _, _) => s,
        (None, Some(min), Some(train)) => SplitSpec {
            min_ratings_per_user: min,
            train_per_user: train,
            implicit_threshold: None,
            seed: 0,
        },
        _ => {
            return Err(Error::invalid(
                "no split protocol: pass --preset, a --config with a [split] table, or --min-ratings and --train-per-user",
            ))
        }
    };
    if let Some(min) = a.min_ratings {
        split.min_ratings_per_user = min;
    }
    if let Some(train) = a.train_per_user {
        split.train_per_user = train;
    }
    if a.threshold.is_some() {
        split.implicit_threshold = a.threshold;
    }
    if a.explicit {
        split.implicit_threshold = None;
    }
    split.seed = a.seed.unwrap_or(settings.train.seed);
    split.validate()?;

    let (ds, ids, _) = data::load_ratings(&a.input, &a.delimiter)?;
    let out = data::split_train_test(&ds, &split)?;
    fs::create_dir_all(&a.outdir).map_err(|e| Error::io(&a.outdir, e))?;
    data::write_ratings(&a.outdir.join(TRAIN_FILE), &out.train, &ids, &Delimiter::Tab)?;
    data::write_ratings(&a.outdir.join(TEST_FILE), &out.test, &ids, &Delimiter::Tab)?;
    ids.save(&a.outdir.join(IDMAP_FILE))?;
    let meta = PreprocessMeta {
        preset: a.preset.clone(),
        mode: out.train.mode(),
        n: out.train.n(),
        m: out.train.m(),
        input_entries: ds.len(),
        train_entries: out.train.len(),
        test_entries: out.test.len(),
        users_kept: out.train.active_users(),
        dropped_users: out.dropped_users,
        split,
    };
    write_json(&a.outdir.join(META_FILE), &meta)?;
    log::info!(
        "{} users x {} items; kept {} users ({} dropped); {} train / {} test entries",
        meta.n,
        meta.m,
        meta.users_kept,
        meta.dropped_users,
        meta.train_entries,
        meta.test_entries
    );
    print_json(&meta)?;
    Ok(EXIT_OK)
}

/// A preprocessed directory: its summary, ID map and training split.
pub struct Prepared {
    pub meta: PreprocessMeta,
    pub ids: IdMap,
    pub train: RatingsDataset,
}

pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: PreprocessMeta = serde_json::from_str(&text)?;
    let ids = IdMap::load(&dir.join(IDMAP_FILE))?;
    let train = data::load_ratings_with_ids(&dir.join(TRAIN_FILE), &Delimiter::Tab, &ids, meta.mode)?;
    Ok(Prepared { meta, ids, train })
}

fn load_heldout(prepared: &Prepared, dir: &Path, file: Option<&Path>, delimiter: &Delimiter, what: &str) -> Result<RatingsDataset> {
    match file {
        Some(path) => data::load_ratings_with_ids(path, delimiter, &prepared.ids, prepared.meta.mode),
        None => {
            if what == "validation" {
                log::warn!("no --valid file given; validating on the test split");
            }
            data::load_ratings_with_ids(&dir.join(TEST_FILE), &Delimiter::Tab, &prepared.ids, prepared.meta.mode)
        }
    }
}

fn train_config(o: &TrainOverrides, recorded_preset: Option<&str>, parallel: bool) -> Result<TrainConfig> {
    let preset = o.preset.as_deref().or(recorded_preset);
    let mut cfg = presets::load(preset, o.config.as_deref())?.train;
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.rank {
        cfg.rank = v;
    }
    if let Some(v) = o.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = o.ss {
        cfg.ss = v;
    }
    if let Some(v) = o.rate {
        cfg.rate = v;
    }
    if let Some(v) = o.rho {
        cfg.rho = v;
    }
    if let Some(v) = o.k {
        cfg.k = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(Patience(v)) = o.patience {
        cfg.patience = v;
    }
    if let Some(v) = o.init_scale {
        cfg.init_scale = v;
    }
    if o.no_sq {
        cfg.stochastic_queue = false;
    }
    cfg.parallel = parallel;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs, parallel: bool) -> Result<i32> {
    let prepared = load_prepared(&a.input)?;
    if let Some(v) = &a.valid {
        require_file(v)?;
    }
    let cfg = train_config(&a.overrides, prepared.meta.preset.as_deref(), parallel)?;
    let valid = load_heldout(&prepared, &a.input, a.valid.as_deref(), &a.delimiter, "validation")?;
    let ckpt = match (&a.checkpoint, &a.outdir) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join(MODEL_FILE),
        (None, None) => a.input.join(MODEL_FILE),
    };
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    log::info!(
        "training rank {} on {} users x {} items ({} observations, k = {}, {} epochs max)",
        cfg.rank,
        prepared.train.n(),
        prepared.train.m(),
        prepared.train.len(),
        cfg.k,
        cfg.epochs
    );
    let state = trainer::fit_with(&prepared.train, &valid, &cfg, |rec| match rec.validation {
        Some(v) => log::info!("epoch {} loss {:.6} step {:.3e} validation {:.5}", rec.epoch, rec.loss, rec.step_size, v),
        None => log::info!("epoch {} loss {:.6} step {:.3e}", rec.epoch, rec.loss, rec.step_size),
    })?;
    checkpoint::save_model(&ckpt, &state.model)?;
    let sidecar = Sidecar {
        config: cfg,
        epochs_run: state.epoch,
        best_epoch: state.best_epoch,
        best_validation: state.best_validation,
        history: state.history.clone(),
    };
    checkpoint::save_sidecar(&checkpoint::sidecar_path(&ckpt), &sidecar)?;
    print_json(&TrainSummary {
        checkpoint: ckpt,
        epochs_run: state.epoch,
        best_epoch: state.best_epoch,
        best_validation: state.best_validation,
        final_loss: state.history.last().map(|r| r.loss),
    })?;
    Ok(EXIT_OK)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<i32> {
    let prepared = load_prepared(&a.input)?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| a.input.join(MODEL_FILE));
    let model = checkpoint::load_model(&ckpt)?;
    let test = load_heldout(&prepared, &a.input, a.test.as_deref(), &a.delimiter, "test")?;
    if model.n() != test.n() || model.m() != test.m() {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint is {}x{} but the data is {}x{}",
            model.n(),
            model.m(),
            test.n(),
            test.m()
        )));
    }
    let report = metrics::evaluate(&model, &prepared.train, &test, &a.cutoffs.0, &a.ndcg_cutoffs.0)?;
    let dir = a.outdir.clone().unwrap_or_else(|| a.input.clone());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join(EVAL_FILE), &report)?;
    print_json(&report)?;
    Ok(EXIT_OK)
}

fn finish_verify(report: &VerifyReport) -> Result<i32> {
    for c in &report.checks {
        log::info!("{}: {}", c.name, if c.passed { "pass" } else { "FAIL" });
    }
    print_json(report)?;
    Ok(if report.passed { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let opts = VerifyOptions {
        seed: a.seed,
        mc_samples: a.mc_samples,
        inject_fault: a.inject_fault,
        timing: !a.skip_timing,
    };
    finish_verify(&verify::run_all(&opts)?)
}

fn cmd_check_grad(a: &CheckGradArgs) -> Result<i32> {
    finish_verify(&verify::check_gradients(a.seed, a.inject_fault)?)
}

fn cmd_sample(a: &SampleArgs) -> Result<i32> {
    if a.scores.len() > 8 {
        return Err(Error::invalid("at most 8 scores (the report enumerates every ordering)"));
    }
    if a.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    print_json(&verify::monte_carlo(&a.scores, a.mc_samples, a.seed)?)?;
    Ok(EXIT_OK)
}
