mod common;

use std::fs;
use std::path::Path;
use std::sync::{RwLock, RwLockReadGuard};

use common::{fixture, implicit_spec, sqlrank, stdout_json, write_planted};
use rand::{Rng, SeedableRng};
use sqlrank::checkpoint;
use sqlrank::cli::{self, load_prepared};
use sqlrank::data::{self, Delimiter};
use sqlrank::metrics;
use sqlrank::synthetic::planted_implicit;

/// The timing probe takes this exclusively; every other test shares it.
static TIMING: RwLock<()> = RwLock::new(());

fn shared() -> RwLockReadGuard<'static, ()> {
    TIMING.read().unwrap_or_else(|e| e.into_inner())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 40 users over 300 items with 1-5 ratings; every 4th user rates few items.
fn write_rating_file(path: &Path, sep: &str) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut text = String::new();
    for u in 0..40 {
        let count = if u % 4 == 0 { 30 } else { 150 };
        for item in rand::seq::index::sample(&mut rng, 300, count) {
            let score: u32 = rng.random_range(1..=5);
            text.push_str(&format!("user{u}{sep}item{item}{sep}{score}{sep}978300760\n"));
        }
    }
    fs::write(path, text).unwrap();
}

fn preprocess(input: &Path, out: &Path, extra: &[&str]) -> std::process::Output {
    let mut args = vec!["preprocess", "--input", s(input), "--outdir", s(out)];
    args.extend_from_slice(extra);
    sqlrank(args)
}

fn train_rows_per_user(dir: &Path) -> Vec<usize> {
    let p = load_prepared(dir).unwrap();
    (0..p.train.n())
        .map(|u| p.train.user_entries(u).len())
        .filter(|&c| c > 0)
        .collect()
}

#[test]
fn ml1m_preset_keeps_fifty_training_ones() {
    let _shared = shared();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("ratings.dat");
    write_rating_file(&input, "::");
    let out = dir.path().join("prep");
    let o = preprocess(&input, &out, &["--preset", "ml1m-implicit", "--delimiter", "::"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let meta = stdout_json(&o);
    assert_eq!(meta["mode"], "implicit");
    let counts = train_rows_per_user(&out);
    assert!(!counts.is_empty());
    assert!(counts.iter().all(|&c| c == 50), "{counts:?}");
    // Light raters cannot reach 60 ones.
    assert!(meta["dropped_users"].as_u64().unwrap() >= 10);
    let p = load_prepared(&out).unwrap();
    assert!(p.train.entries().iter().all(|e| e.score == 1));
}

#[test]
fn amazon_preset_keeps_ten_training_ones() {
    let _shared = shared();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("ratings.csv");
    write_rating_file(&input, ",");
    let out = dir.path().join("prep");
    let o = preprocess(&input, &out, &["--preset", "amazon-implicit"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dropped = stdout_json(&o)["dropped_users"].as_u64().unwrap() as usize;
    let counts = train_rows_per_user(&out);
    assert_eq!(counts.len() + dropped, 40);
    assert!(counts.len() >= 30);
    assert!(counts.iter().all(|&c| c == 10));
}

#[test]
fn missing_input_exits_2_with_path() {
    let _shared = shared();
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tsv");
    let o = preprocess(&missing, &dir.path().join("out"), &["--preset", "amazon-implicit"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.tsv"));
}

#[test]
fn malformed_input_exits_2_with_line() {
    let _shared = shared();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.tsv");
    fs::write(&input, "a\tb\t5\nc\td\n").unwrap();
    let o = preprocess(&input, &dir.path().join("out"), &["--min-ratings", "2", "--train-per-user", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

fn prepare_tiny(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let out = dir.join("prep");
    let mut args = vec!["--min-ratings", "5", "--train-per-user", "3", "--seed", "1"];
    args.extend_from_slice(extra);
    let o = preprocess(&fixture("tiny.tsv"), &out, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn train(prep: &Path, extra: &[&str]) -> std::process::Output {
    let mut args = vec!["train", "--input", s(prep), "--rank", "3", "--rho", "2"];
    args.extend_from_slice(extra);
    sqlrank(args)
}

#[test]
fn zero_epochs_writes_initialization() {
    let _shared = shared();
    let dir = tempfile::tempdir().unwrap();
    let prep = prepare_tiny(dir.path(), &[]);
    let o = train(&prep, &["--epochs", "0", "--seed", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let model = checkpoint::load_model(&prep.join(cli::MODEL_FILE)).unwrap();
    let p = load_prepared(&prep).unwrap();
    let cfg = sqlrank::TrainConfig { rank: 3, rho: 2.0, epochs: 0, seed: 9, ..Default::default() };
    let init = sqlrank::trainer::init_model(
        &cfg,
        p.train.n(),
        p.train.m(),
        &mut sqlrank::rng::stream(9, sqlrank::rng::Stream::Init),
    )
    .unwrap();
    assert_eq!(model, init);
    let side = checkpoint::load_sidecar(&prep.join("model.json")).unwrap();
    assert!(side.history.is_empty());
    assert_eq!(side.epochs_run, 0);
}

#[test]
fn history_is_reproducible() {
    let _shared = shared();
    let dir = tempfile::tempdir().unwrap();
    let prep = prepare_tiny(dir.path(), &["--threshold", "3"]);
    let run = |name: &str, threads: &str| {
        let ck = dir.path().join(name).join("m.bin");
        let o = train(&prep, &["--epochs", "12", "--seed", "4", "--checkpoint", s(&ck), "--threads", threads]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (fs::read(&ck).unwrap(), fs::read(ck.with_extension("json")).unwrap())
    };
    let a = run("a", "1");
    assert_eq!(a, run("b", "1"));
    // The parallel path is also thread-count independent.
    assert_eq!(run("c", "2"), run("d", "4"));
}

#[test]
fn evaluate_implicit_keys_and_direct_equivalence() {
    let _shared = shared();
    let dir = tempfile::tempdir().unwrap();
    let prep = prepare_tiny(dir.path(), &["--threshold", "3"]);
    assert!(train(&prep, &["--epochs", "5"]).status.success());
    let o = sqlrank(["evaluate", "--input", s(&prep), "--cutoffs", "1,5,10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = stdout_json(&o);
    let keys: Vec<&str> = report["precision"].as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, vec!["1", "10", "5"]);
    assert!(report.get("ndcg").is_none());

    let p = load_prepared(&prep).unwrap();
    let test = data::load_ratings_with_ids(&prep.join(cli::TEST_FILE), &Delimiter::Tab, &p.ids, p.meta.mode).unwrap();
    let model = checkpoint::load_model(&prep.join(cli::MODEL_FILE)).unwrap();
    let direct = metrics::evaluate(&model, &p.train, &test, &[1, 5, 10], &[10]).unwrap();
    assert_eq!(report, serde_json::to_value(&direct).unwrap());
    let written: serde_json::Value = serde_json::from_slice(&fs::read(prep.join(cli::EVAL_FILE)).unwrap()).unwrap();
    assert_eq!(written, report);
}

#[test]
fn evaluate_explicit_adds_ndcg() {
    let _shared = shared();
    let dir = tempfile::tempdir().unwrap();
    let prep = prepare_tiny(dir.path(), &[]);
    assert!(train(&prep, &["--epochs", "3"]).status.success());
    let o = sqlrank(["evaluate", "--input", s(&prep)]);
    assert!(o.status.success());
    let report = stdout_json(&o);
    assert!(report["ndcg"]["10"].as_f64().is_some());
    let n = load_prepared(&prep).unwrap().train.n() as u64;
    assert_eq!(report["users_evaluated"].as_u64().unwrap() + report["excluded_users"].as_u64().unwrap(), n);
}

#[test]
fn evaluate_dimension_mismatch_exits_2() {
    let _shared = shared();
    let dir = tempfile::tempdir().unwrap();
    let prep = prepare_tiny(dir.path(), &[]);
    let other = sqlrank::FactorModel::zeros(2, 3, 4);
    let ck = dir.path().join("other.bin");
    checkpoint::save_model(&ck, &other).unwrap();
    let o = sqlrank(["evaluate", "--input", s(&prep), "--checkpoint", s(&ck)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dimension mismatch"));
}

#[test]
fn divergence_exits_3() {
    let _shared = shared();
    let dir = tempfile::tempdir().unwrap();
    let prep = prepare_tiny(dir.path(), &[]);
    let o = train(&prep, &["--epochs", "5", "--ss", "1e7", "--init-scale", "1", "--lambda", "1"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged at epoch 1"));
}

#[test]
fn bad_config_exits_2() {
    let _shared = shared();
    let dir = tempfile::tempdir().unwrap();
    let prep = prepare_tiny(dir.path(), &[]);
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[train]\nrnak = 3\n").unwrap();
    assert_eq!(train(&prep, &["--config", s(&cfg)]).status.code(), Some(2));
    assert_eq!(train(&prep, &["--rate", "2"]).status.code(), Some(2));
    assert_eq!(train(&prep, &["--k", "zero"]).status.code(), Some(2));
}

#[test]
fn config_file_layers_under_flags() {
    let _shared = shared();
    let dir = tempfile::tempdir().unwrap();
    let prep = prepare_tiny(dir.path(), &[]);
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[train]\nrank = 5\nepochs = 2\nlambda = 0.5\n").unwrap();
    let o = train(&prep, &["--config", s(&cfg), "--epochs", "1"]);
    assert!(o.status.success());
    let side = checkpoint::load_sidecar(&prep.join("model.json")).unwrap();
    // --rank 3 from the helper beats the file; the file beats the default.
    assert_eq!(side.config.rank, 3);
    assert_eq!(side.config.lambda, 0.5);
    assert_eq!(side.epochs_run, 1);
}

#[test]
fn verify_passes_by_default() {
    let _exclusive = TIMING.write().unwrap_or_else(|e| e.into_inner());
    let o = sqlrank(["verify"]);
    let report = stdout_json(&o);
    assert_eq!(o.status.code(), Some(0), "{report:#}");
    let names: Vec<&str> = report["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, vec!["finite_difference", "fast_vs_naive", "normalization", "monte_carlo", "timing"]);
}

#[test]
fn injected_fault_fails_kernel_check() {
    let _shared = shared();
    let o = sqlrank(["verify", "--inject-fault", "--skip-timing"]);
    assert_eq!(o.status.code(), Some(1));
    let report = stdout_json(&o);
    for c in report["checks"].as_array().unwrap() {
        assert_eq!(c["passed"].as_bool().unwrap(), c["name"] != "fast_vs_naive", "{}", c["name"]);
    }
    let g = sqlrank(["check-grad", "--inject-fault"]);
    assert_eq!(g.status.code(), Some(1));
    assert_eq!(sqlrank(["check-grad"]).status.code(), Some(0));
}

#[test]
fn few_samples_widen_the_threshold() {
    let _shared = shared();
    let o = sqlrank(["verify", "--mc-samples", "1000", "--skip-timing"]);
    assert_eq!(o.status.code(), Some(0));
    let report = stdout_json(&o);
    let mc = report["checks"].as_array().unwrap().iter().find(|c| c["name"] == "monte_carlo").unwrap();
    let d = &mc["details"];
    assert_eq!(d["widened"], true);
    let threshold = d["threshold"].as_f64().unwrap();
    assert!(threshold > 0.1);
    assert!((threshold - d["standard_error_bound"].as_f64().unwrap()).abs() < 1e-15);
    assert!(d["total_variation"].as_f64().unwrap() < threshold);
}

#[test]
fn sample_reports_every_ordering() {
    let _shared = shared();
    let o = sqlrank(["sample", "--scores", "1,-1,0.5", "--mc-samples", "20000"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = stdout_json(&o);
    let perms = r["permutations"].as_object().unwrap();
    assert_eq!(perms.len(), 6);
    for (_, pair) in perms {
        let (freq, prob) = (pair[0].as_f64().unwrap(), pair[1].as_f64().unwrap());
        assert!((freq - prob).abs() < 0.02);
    }
}

#[test]
fn usage_errors_exit_2() {
    let _shared = shared();
    assert_eq!(sqlrank(["frobnicate"]).status.code(), Some(2));
    assert_eq!(sqlrank(["train"]).status.code(), Some(2));
    assert_eq!(sqlrank(["--help"]).status.code(), Some(0));
}

#[test]
fn threads_env_fallback() {
    let _shared = shared();
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_sqlrank"))
        .args(["check-grad"])
        .env("SQLRANK_THREADS", "two")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn planted_fixture_beats_random_twice_over() {
    let _shared = shared();
    let dir = tempfile::tempdir().unwrap();
    let planted = planted_implicit(&implicit_spec(0));
    let input = dir.path().join("planted.tsv");
    write_planted(&input, &planted);
    let prep = dir.path().join("prep");
    let o = preprocess(&input, &prep, &["--threshold", "1", "--min-ratings", "20", "--train-per-user", "10", "--seed", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = sqlrank([
        "train", "--input", s(&prep), "--rank", "2", "--lambda", "0.1", "--ss", "0.1", "--rate", "0.995", "--rho", "1",
        "--epochs", "100", "--patience", "none", "--seed", "0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let side = checkpoint::load_sidecar(&prep.join("model.json")).unwrap();
    let last = side.history.last().unwrap().validation.unwrap();
    let p = load_prepared(&prep).unwrap();
    let test = data::load_ratings_with_ids(&prep.join(cli::TEST_FILE), &Delimiter::Tab, &p.ids, p.meta.mode).unwrap();
    let m = p.train.m() as f64;
    let users: Vec<usize> = (0..p.train.n()).filter(|&u| !test.user_entries(u).is_empty()).collect();
    let random = users
        .iter()
        .map(|&u| test.user_entries(u).len() as f64 / (m - p.train.user_entries(u).len() as f64))
        .sum::<f64>()
        / users.len() as f64;
    assert!(last >= 2.0 * random, "final P@1 {last} vs random {random}");
}
