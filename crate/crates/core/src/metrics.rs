//! Top-k evaluation: precision@k over the non-training candidate pool and
//! NDCG@k over each user's test items.
//!
//! Ranking ties are broken by ascending item index, so every metric is a
//! deterministic function of the model and the datasets. Users without test
//! items are left out of the averages and counted in
//! [`EvalReport::excluded_users`].

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Feedback, RatingsDataset};
use crate::error::{Error, Result};
use crate::objective::FactorModel;

/// Explicit ratings in this inclusive range count as relevant for precision.
pub const RELEVANT_RATINGS: std::ops::RangeInclusive<u32> = 4..=5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<BTreeMap<usize, f64>>,
    pub users_evaluated: usize,
    pub excluded_users: usize,
}

/// Result of [`rank_items`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    pub items: Vec<usize>,
    /// Fewer than `top_k` candidates were available.
    pub short: bool,
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> std::cmp::Ordering + '_ {
    |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Top `top_k` items for `user` by score, skipping `exclude`.
pub fn rank_items(model: &FactorModel, user: usize, exclude: &[usize], top_k: usize) -> Result<RankedList> {
    if top_k == 0 {
        return Err(Error::invalid("top_k must be at least 1"));
    }
    let mut scores = Vec::new();
    model.user_scores(user, &mut scores);
    Ok(rank_scores(&scores, exclude, top_k))
}

fn rank_scores(scores: &[f64], exclude: &[usize], top_k: usize) -> RankedList {
    let mut skip = vec![false; scores.len()];
    for &j in exclude {
        skip[j] = true;
    }
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&j| !skip[j]).collect();
    let cmp = by_score_then_index(scores);
    let short = candidates.len() < top_k;
    if !short && candidates.len() > top_k {
        candidates.select_nth_unstable_by(top_k - 1, &cmp);
        candidates.truncate(top_k);
    }
    candidates.sort_unstable_by(&cmp);
    RankedList {
        items: candidates,
        short,
    }
}

fn check_spaces(model: &FactorModel, train: &RatingsDataset, test: &RatingsDataset) -> Result<()> {
    for (what, ds) in [("train", train), ("test", test)] {
        if ds.n() != model.n() || ds.m() != model.m() {
            return Err(Error::DimensionMismatch(format!(
                "{what} data is {}x{} but the model is {}x{}",
                ds.n(),
                ds.m(),
                model.n(),
                model.m()
            )));
        }
    }
    Ok(())
}

fn check_cutoffs(ks: &[usize]) -> Result<usize> {
    match ks.iter().copied().max() {
        Some(_) if ks.contains(&0) => Err(Error::invalid("cutoffs must be at least 1")),
        Some(max) => Ok(max),
        None => Err(Error::invalid("no cutoffs requested")),
    }
}

/// Shared precision loop; `relevant(user, item)` decides a hit.
fn precision_report<F>(
    model: &FactorModel,
    train: &RatingsDataset,
    test: &RatingsDataset,
    ks: &[usize],
    relevant: F,
) -> Result<EvalReport>
where
    F: Fn(usize, usize) -> bool + Sync,
{
    check_spaces(model, train, test)?;
    let depth = check_cutoffs(ks)?;
    let per_user: Vec<Option<Vec<f64>>> = (0..model.n())
        .into_par_iter()
        .map_init(Vec::new, |scores, user| {
            if test.user_entries(user).is_empty() {
                return None;
            }
            let exclude: Vec<usize> = train.user_entries(user).iter().map(|e| e.item).collect();
            model.user_scores(user, scores);
            let ranked = rank_scores(scores, &exclude, depth);
            Some(
                ks.iter()
                    .map(|&k| {
                        let hits = ranked.items.iter().take(k).filter(|&&j| relevant(user, j)).count();
                        hits as f64 / k as f64
                    })
                    .collect(),
            )
        })
        .collect();

    let mut sums = vec![0.0; ks.len()];
    let mut users_evaluated = 0;
    for p in per_user.into_iter().flatten() {
        users_evaluated += 1;
        for (s, v) in sums.iter_mut().zip(p) {
            *s += v;
        }
    }
    let precision = ks
        .iter()
        .zip(sums)
        .map(|(&k, s)| (k, if users_evaluated > 0 { s / users_evaluated as f64 } else { 0.0 }))
        .collect();
    Ok(EvalReport {
        precision,
        ndcg: None,
        users_evaluated,
        excluded_users: model.n() - users_evaluated,
    })
}

/// Implicit precision@k: the share of each user's top-k non-training items
/// that are test 1's, averaged over users with test items.
pub fn precision_at_k_implicit(
    model: &FactorModel,
    train: &RatingsDataset,
    test: &RatingsDataset,
    ks: &[usize],
) -> Result<EvalReport> {
    precision_report(model, train, test, ks, |user, item| test.score(user, item).is_some())
}

/// Explicit precision@k: as the implicit version, with a hit being a test
/// rating in [`RELEVANT_RATINGS`].
pub fn precision_at_k_explicit(
    model: &FactorModel,
    train: &RatingsDataset,
    test: &RatingsDataset,
    ks: &[usize],
) -> Result<EvalReport> {
    precision_report(model, train, test, ks, |user, item| {
        test.score(user, item)
            .is_some_and(|s| RELEVANT_RATINGS.contains(&s))
    })
}

fn dcg(relevances: impl Iterator<Item = u32>) -> f64 {
    relevances
        .enumerate()
        .map(|(l, rel)| (2f64.powi(rel as i32) - 1.0) / ((l + 2) as f64).log2())
        .sum()
}

/// NDCG@k over each user's test items ranked by model score, averaged over
/// users whose ideal DCG is positive. Returns the value and that user count.
pub fn ndcg_at_k(model: &FactorModel, test: &RatingsDataset, k: usize) -> Result<(f64, usize)> {
    if k == 0 {
        return Err(Error::invalid("cutoff must be at least 1"));
    }
    if test.n() != model.n() || test.m() != model.m() {
        return Err(Error::DimensionMismatch(format!(
            "test data is {}x{} but the model is {}x{}",
            test.n(),
            test.m(),
            model.n(),
            model.m()
        )));
    }
    let per_user: Vec<Option<f64>> = (0..model.n())
        .into_par_iter()
        .map(|user| {
            let row = test.user_entries(user);
            let mut ideal: Vec<u32> = row.iter().map(|e| e.score).collect();
            ideal.sort_unstable_by(|a, b| b.cmp(a));
            let best = dcg(ideal.into_iter().take(k));
            if best <= 0.0 {
                return None;
            }
            let scores: Vec<f64> = row.iter().map(|e| model.score(user, e.item)).collect();
            let mut order: Vec<usize> = (0..row.len()).collect();
            // Slots follow item order, so slot ties resolve by item index.
            order.sort_by(by_score_then_index(&scores));
            let got = dcg(order.into_iter().take(k).map(|p| row[p].score));
            Some(got / best)
        })
        .collect();
    let (sum, count) = per_user
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    Ok((if count > 0 { sum / count as f64 } else { 0.0 }, count))
}

/// Precision at `ks` (implicit or explicit, by `test.mode()`), plus NDCG at
/// `ndcg_ks` for explicit data.
pub fn evaluate(
    model: &FactorModel,
    train: &RatingsDataset,
    test: &RatingsDataset,
    ks: &[usize],
    ndcg_ks: &[usize],
) -> Result<EvalReport> {
    match test.mode() {
        Feedback::Implicit => precision_at_k_implicit(model, train, test, ks),
        Feedback::Explicit => {
            let mut report = precision_at_k_explicit(model, train, test, ks)?;
            let mut ndcg = BTreeMap::new();
            for &k in ndcg_ks {
                ndcg.insert(k, ndcg_at_k(model, test, k)?.0);
            }
            report.ndcg = Some(ndcg);
            Ok(report)
        }
    }
}
