//! Permutation probability model.
//!
//! Item `j` with latent score `s_j` carries weight `φ(s_j) = exp(sigmoid(s_j))`,
//! and an ordering `π` has probability
//!
//! ```text
//! P_s(π) = ∏_{j=1}^{min(k, m̄)} φ(s_{π_j}) / Σ_{l=j}^{m̄} φ(s_{π_l})
//! ```
//!
//! (`k = m̄` gives the full permutation probability, smaller `k` the top-k
//! marginal). Since `φ ∈ (1, e)` the suffix sums are bounded by `e·m̄` and
//! are accumulated directly, without log-sum-exp.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Feedback, Rating, RatingsDataset};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of [`sigmoid`].
#[inline]
pub fn sigmoid_prime(x: f64) -> f64 {
    let g = sigmoid(x);
    g * (1.0 - g)
}

/// Item weight `exp(sigmoid(x))`, strictly increasing with range `(1, e)`.
#[inline]
pub fn phi(x: f64) -> f64 {
    sigmoid(x).exp()
}

/// List cutoff `k`: how many leading positions contribute likelihood terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "CutoffRepr", into = "CutoffRepr")]
pub enum Cutoff {
    /// Every position of each user's list (`k = m̄_i`).
    #[default]
    Full,
    Top(usize),
}

impl Cutoff {
    pub fn top(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("cutoff k must be at least 1"));
        }
        Ok(Cutoff::Top(k))
    }

    /// Number of contributing positions for a list of length `len`.
    pub fn resolve(self, len: usize) -> usize {
        match self {
            Cutoff::Full => len,
            Cutoff::Top(k) => k.min(len),
        }
    }
}

impl FromStr for Cutoff {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(Cutoff::Full);
        }
        let k = s
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("cutoff {s:?} is neither an integer nor \"full\"")))?;
        Cutoff::top(k)
    }
}

impl fmt::Display for Cutoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cutoff::Full => f.write_str("full"),
            Cutoff::Top(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CutoffRepr {
    Top(usize),
    Word(String),
}

impl TryFrom<CutoffRepr> for Cutoff {
    type Error = Error;

    fn try_from(r: CutoffRepr) -> Result<Self> {
        match r {
            CutoffRepr::Top(k) => Cutoff::top(k),
            CutoffRepr::Word(w) => w.parse(),
        }
    }
}

impl From<Cutoff> for CutoffRepr {
    fn from(c: Cutoff) -> Self {
        match c {
            Cutoff::Full => CutoffRepr::Word("full".into()),
            Cutoff::Top(k) => CutoffRepr::Top(k),
        }
    }
}

/// True if `perm` holds each of `0..perm.len()` exactly once.
pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter()
        .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true))
}

/// `log P^{(k, m̄)}_s(π)`; `perm[0]` is the slot ranked first.
///
/// Runs in `O(m̄)` for any `k`.
pub fn log_permutation_probability(scores: &[f64], perm: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("cutoff k must be at least 1"));
    }
    if scores.len() != perm.len() || !is_permutation(perm) {
        return Err(Error::invalid(format!(
            "ordering of length {} is not a permutation of {} scores",
            perm.len(),
            scores.len()
        )));
    }
    let top = k.min(perm.len());
    let mut suffix = 0.0;
    let mut total = 0.0;
    for (j, &slot) in perm.iter().enumerate().rev() {
        let s = scores[slot];
        suffix += phi(s);
        if j < top {
            total += sigmoid(s) - suffix.ln();
        }
    }
    Ok(total)
}

/// Draws an ordering by the exponential race: `Y_j ~ Exp(rate φ(s_j))`
/// independently, items sorted by increasing `Y`.
///
/// The result is distributed exactly as the full permutation probability.
pub fn sample_permutation_exponential<R: Rng + ?Sized>(scores: &[f64], rng: &mut R) -> Vec<usize> {
    let arrivals: Vec<f64> = scores
        .iter()
        .map(|&s| {
            // 1 - [0, 1) keeps u in (0, 1], so ln(u) is finite.
            let u = 1.0 - rng.random::<f64>();
            -u.ln() / phi(s)
        })
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| arrivals[a].total_cmp(&arrivals[b]).then(a.cmp(&b)));
    order
}

/// All orderings of `0..len` in lexicographic order. Intended for `len ≤ 8`.
pub fn permutations(len: usize) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..len).collect();
    let mut out = vec![current.clone()];
    loop {
        let Some(i) = (1..len).rev().find(|&i| current[i - 1] < current[i]) else {
            return out;
        };
        let j = (i..len).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
        out.push(current.clone());
    }
}

/// One user's ordered list of items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermRow {
    pub user: usize,
    /// Item ids, highest ranked first.
    pub items: Vec<usize>,
    /// Leading slots holding observed entries; the remaining slots are
    /// sampled unobserved items (implicit data only).
    pub observed: usize,
}

impl PermRow {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn negatives(&self) -> usize {
        self.items.len() - self.observed
    }
}

/// Per-user orderings stacked row by row.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PermutationMatrix {
    pub rows: Vec<PermRow>,
    /// Rows whose negative sample was capped by the number of unobserved items.
    pub capped_rows: usize,
}

impl PermutationMatrix {
    pub fn new(rows: Vec<PermRow>) -> Self {
        Self {
            rows,
            capped_rows: 0,
        }
    }

    /// Sum of row lengths.
    pub fn total_len(&self) -> usize {
        self.rows.iter().map(PermRow::len).sum()
    }
}

/// Number of negatives appended for `observed` positives.
pub fn negative_count(observed: usize, rho: f64) -> usize {
    (rho * observed as f64).round() as usize
}

/// Observed items by descending score, each tie block shuffled uniformly
/// (Fisher–Yates within the block).
pub fn order_observed<R: Rng + ?Sized>(observed: &[Rating], rng: &mut R) -> Vec<usize> {
    let mut sorted: Vec<&Rating> = observed.iter().collect();
    sorted.sort_by(|a, b| b.score.cmp(&a.score).then(a.item.cmp(&b.item)));
    let mut items: Vec<usize> = sorted.iter().map(|e| e.item).collect();
    let mut start = 0;
    while start < sorted.len() {
        let level = sorted[start].score;
        let end = start + sorted[start..].iter().take_while(|e| e.score == level).count();
        items[start..end].shuffle(rng);
        start = end;
    }
    items
}

/// Appends `round(ρ·m̃)` distinct items drawn uniformly from the user's
/// unobserved items, capped at how many exist. Returns true when capped.
///
/// `observed` must be sorted by item, as [`RatingsDataset::user_entries`] is.
pub fn append_negatives<R: Rng + ?Sized>(
    items: &mut Vec<usize>,
    observed: &[Rating],
    m: usize,
    rho: f64,
    rng: &mut R,
) -> bool {
    let wanted = negative_count(observed.len(), rho);
    let available = m.saturating_sub(observed.len());
    let count = wanted.min(available);
    // `o_t - t` is non-decreasing over the sorted observed items, so the
    // idx-th unobserved item is idx + #{t : o_t - t <= idx}.
    let offsets: Vec<usize> = observed.iter().enumerate().map(|(t, e)| e.item - t).collect();
    items.extend(
        index::sample(rng, available, count)
            .into_iter()
            .map(|idx| idx + offsets.partition_point(|&o| o <= idx)),
    );
    count < wanted
}

/// Builds one user's list: [`order_observed`], then for implicit data
/// [`append_negatives`]. Returns the row and whether negatives were capped.
pub fn queue_row<R1, R2>(
    user: usize,
    observed: &[Rating],
    m: usize,
    mode: Feedback,
    rho: f64,
    shuffle_rng: &mut R1,
    negative_rng: &mut R2,
) -> (PermRow, bool)
where
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
{
    let mut items = order_observed(observed, shuffle_rng);
    let n_observed = items.len();
    let capped = mode == Feedback::Implicit
        && n_observed > 0
        && append_negatives(&mut items, observed, m, rho, negative_rng);
    (
        PermRow {
            user,
            items,
            observed: n_observed,
        },
        capped,
    )
}

fn finish(rows: Vec<(PermRow, bool)>) -> PermutationMatrix {
    let capped_rows = rows.iter().filter(|(_, c)| *c).count();
    if capped_rows > 0 {
        log::warn!("{capped_rows} user(s) have fewer unobserved items than requested negatives; sample capped");
    }
    PermutationMatrix {
        rows: rows.into_iter().map(|(r, _)| r).collect(),
        capped_rows,
    }
}

/// Draws a valid ordering of every user's observations, using one rng for
/// both tie shuffling and negative sampling. `rho` is ignored for explicit
/// data. Users without observations get no row.
pub fn stochastic_queue<R: Rng + ?Sized>(ds: &RatingsDataset, rho: f64, rng: &mut R) -> PermutationMatrix {
    let mut rows = Vec::new();
    for user in 0..ds.n() {
        let observed = ds.user_entries(user);
        if observed.is_empty() {
            continue;
        }
        let mut items = order_observed(observed, rng);
        let n_observed = items.len();
        let capped = ds.mode() == Feedback::Implicit
            && append_negatives(&mut items, observed, ds.m(), rho, rng);
        let row = PermRow {
            user,
            items,
            observed: n_observed,
        };
        rows.push((row, capped));
    }
    finish(rows)
}

/// Draws the ordering for `epoch` with one `Queue` and one `Negatives`
/// substream per user, derived from `(seed, epoch, user)`. Rows are built in
/// parallel and the result does not depend on the thread count.
pub fn stochastic_queue_streams(ds: &RatingsDataset, rho: f64, seed: u64, epoch: u64) -> PermutationMatrix {
    let rows: Vec<(PermRow, bool)> = (0..ds.n())
        .into_par_iter()
        .filter_map(|user| {
            let observed = ds.user_entries(user);
            if observed.is_empty() {
                return None;
            }
            let mut shuffle = substream(seed, Stream::Queue, epoch, user as u64);
            let mut negatives = substream(seed, Stream::Negatives, epoch, user as u64);
            Some(queue_row(
                user,
                observed,
                ds.m(),
                ds.mode(),
                rho,
                &mut shuffle,
                &mut negatives,
            ))
        })
        .collect();
    finish(rows)
}
