mod common;

use common::{fixture_config, implicit_spec};
use sqlrank::metrics;
use sqlrank::synthetic::planted_implicit;
use sqlrank::trainer::{fit, fit_with, TrainConfig};
use sqlrank::{Cutoff, Feedback, Rating, RatingsDataset};

/// Five users, eight items, each user rating six items with distinct scores,
/// so the ordering never changes between epochs.
fn distinct_fixture(seed: u64) -> RatingsDataset {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for user in 0..5 {
        let mut items: Vec<usize> = (0..8).collect();
        items.shuffle(&mut rng);
        for (rank, &item) in items.iter().take(6).enumerate() {
            entries.push(Rating { user, item, score: 10 - rank as u32 });
        }
    }
    RatingsDataset::new(5, 8, Feedback::Explicit, entries).unwrap()
}

fn empty(n: usize, m: usize, mode: Feedback) -> RatingsDataset {
    RatingsDataset::new(n, m, mode, vec![]).unwrap()
}

#[test]
fn loss_settles_into_monotone_decrease() {
    let mut monotone = 0;
    for seed in 0..20 {
        let train = distinct_fixture(seed);
        let cfg = TrainConfig { rank: 3, rho: 0.0, epochs: 50, ..fixture_config(seed) };
        let state = fit(&train, &empty(5, 8, Feedback::Explicit), &cfg).unwrap();
        assert_eq!(state.history.len(), 50);
        let losses: Vec<f64> = state.history.iter().map(|r| r.loss).collect();
        if losses[10..].windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone >= 18, "{monotone}/20 seeds monotone after epoch 10");
}

#[test]
fn planted_recovery_beats_random_twice_over() {
    let p = planted_implicit(&implicit_spec(0));
    let state = fit(&p.train, &p.valid, &fixture_config(0)).unwrap();
    let report = metrics::precision_at_k_implicit(&state.model, &p.train, &p.valid, &[5]).unwrap();
    let p5 = report.precision[&5];
    assert!(p5 >= 2.0 * p.random_precision(), "P@5 {p5} vs random {}", p.random_precision());
}

#[test]
fn serial_and_parallel_runs_are_reproducible() {
    let p = planted_implicit(&implicit_spec(3));
    let cfg = TrainConfig { epochs: 20, ..fixture_config(3) };
    let a = fit(&p.train, &p.valid, &cfg).unwrap();
    let b = fit(&p.train, &p.valid, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
    let par = TrainConfig { parallel: true, ..cfg };
    let c = fit(&p.train, &p.valid, &par).unwrap();
    let d = fit(&p.train, &p.valid, &par).unwrap();
    assert_eq!(c.model, d.model);
    for (x, y) in a.history.iter().zip(&c.history) {
        assert!((x.loss - y.loss).abs() <= 1e-9 * x.loss.abs());
    }
}

#[test]
fn patience_none_runs_every_epoch() {
    let p = planted_implicit(&implicit_spec(1));
    let cfg = TrainConfig { epochs: 17, ss: 1e-4, ..fixture_config(1) };
    let state = fit(&p.train, &p.valid, &cfg).unwrap();
    assert_eq!(state.epoch, 17);
    assert_eq!(state.history.len(), 17);
    assert!(state.history.iter().all(|r| r.validation.is_some()));
}

#[test]
fn early_stopping_returns_best_model() {
    let p = planted_implicit(&implicit_spec(2));
    let cfg = TrainConfig { epochs: 400, patience: Some(10), ..fixture_config(2) };
    let mut seen = Vec::new();
    let state = fit_with(&p.train, &p.valid, &cfg, |r| seen.push(r.epoch)).unwrap();
    assert!(state.epoch < 400, "never stopped");
    assert_eq!(seen.len(), state.epoch);
    let best = state.history[state.best_epoch - 1].validation.unwrap();
    assert_eq!(state.best_validation, Some(best));
    assert!(state.history[state.best_epoch..].iter().all(|r| r.validation.unwrap() < best));
    assert_eq!(state.epoch - state.best_epoch, 10);
    // The returned model is the best one, not the last one.
    let replay = metrics::precision_at_k_implicit(&state.model, &p.train, &p.valid, &[1]).unwrap();
    assert_eq!(replay.precision[&1], best);
}

#[test]
fn explicit_validation_uses_ndcg() {
    let p = sqlrank::synthetic::planted_explicit(&common::explicit_spec(0));
    let cfg = TrainConfig { rho: 0.0, epochs: 3, k: Cutoff::Top(5), ..fixture_config(0) };
    let state = fit(&p.train, &p.valid, &cfg).unwrap();
    let last = state.history.last().unwrap().validation.unwrap();
    let model = {
        let mut s = sqlrank::trainer::TrainState::new(
            sqlrank::trainer::init_model(&cfg, 60, 40, &mut sqlrank::rng::stream(0, sqlrank::rng::Stream::Init)).unwrap(),
            &cfg,
        );
        for _ in 0..3 {
            sqlrank::trainer::train_epoch(&mut s, &p.train, &cfg).unwrap();
        }
        s.model
    };
    assert_eq!(metrics::ndcg_at_k(&model, &p.valid, 10).unwrap().0, last);
}

#[test]
fn mismatched_validation_is_rejected() {
    let p = planted_implicit(&implicit_spec(0));
    let err = fit(&p.train, &empty(3, 3, Feedback::Implicit), &fixture_config(0)).unwrap_err();
    assert!(matches!(err, sqlrank::Error::DimensionMismatch(_)));
}
