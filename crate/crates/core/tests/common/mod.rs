#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sqlrank::synthetic::{Planted, PlantedSpec};
use sqlrank::RatingsDataset;

pub fn sqlrank<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_sqlrank"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run sqlrank")
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}); stderr:\n{}",
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

/// Writes every observation of `ds` as `u<i> i<j> score`.
pub fn append_ratings(text: &mut String, ds: &RatingsDataset) {
    for e in ds.entries() {
        writeln!(text, "u{}\ti{}\t{}", e.user, e.item, e.score).unwrap();
    }
}

pub fn write_planted(path: &Path, p: &Planted) {
    let mut text = String::new();
    append_ratings(&mut text, &p.train);
    append_ratings(&mut text, &p.valid);
    fs::write(path, text).unwrap();
}

/// Planted implicit fixture: each user's top half of 40 items are 1's.
pub fn implicit_spec(seed: u64) -> PlantedSpec {
    PlantedSpec {
        n: 60,
        m: 40,
        rank: 2,
        observed_per_user: 20,
        train_per_user: 10,
        noise: 0.3,
        seed,
    }
}

/// Planted explicit fixture: each user rates 30 of 40 items on a 1-5 scale.
pub fn explicit_spec(seed: u64) -> PlantedSpec {
    PlantedSpec {
        n: 60,
        m: 40,
        rank: 2,
        observed_per_user: 30,
        train_per_user: 20,
        noise: 0.3,
        seed,
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Training settings used with the planted fixtures.
pub fn fixture_config(seed: u64) -> sqlrank::TrainConfig {
    sqlrank::TrainConfig {
        rank: 2,
        lambda: 0.1,
        ss: 0.1,
        rate: 0.995,
        rho: 1.0,
        k: sqlrank::Cutoff::Full,
        epochs: 100,
        seed,
        init_scale: 0.1,
        patience: None,
        stochastic_queue: true,
        parallel: false,
    }
}
