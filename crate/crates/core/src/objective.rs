//! The regularized listwise objective and its gradient.
//!
//! For scores `h_t = u_iᵀ v_{Π_it}` along user `i`'s list of length `m̄`,
//! cutoff `K = min(k, m̄)` and suffix sums `S_t = Σ_{l ≥ t} φ(h_l)`:
//!
//! ```text
//! f(U, V) = Σ_i Σ_{t ≤ K} [ ln S_t − g(h_t) ]  +  (λ/2)(‖U‖² + ‖V‖²)
//! ∂f/∂h_t = −𝟙(t ≤ K)·g′(h_t) + φ(h_t)·g′(h_t)·Σ_{τ ≤ min(t, K)} 1/S_τ
//! ```
//!
//! with `g` the sigmoid and `φ = exp ∘ g`. [`grad_fast`] evaluates the
//! second line with one backward pass (suffix sums) and one forward pass
//! (running sum of `1/S_τ`), so a user costs `O(m̄·r)`. [`grad_naive`] sums
//! the same derivative pair by pair in `O(m̄²·r)` and exists to check it.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::perm_model::{phi, sigmoid, Cutoff, PermRow, PermutationMatrix};

/// Low-rank factors: `u_i` (user) and `v_j` (item) columns of length `rank`.
///
/// Each column is stored contiguously, so `u` is `n × rank` in memory and
/// `v` is `m × rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    rank: usize,
    n: usize,
    m: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FactorModel {
    pub fn zeros(rank: usize, n: usize, m: usize) -> Self {
        Self {
            rank,
            n,
            m,
            u: vec![0.0; rank * n],
            v: vec![0.0; rank * m],
        }
    }

    /// Builds a model from column-contiguous factor buffers.
    pub fn from_columns(rank: usize, n: usize, m: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != rank * n || v.len() != rank * m {
            return Err(Error::DimensionMismatch(format!(
                "factor buffers of length {}/{} do not fit rank {rank}, n {n}, m {m}",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::invalid("factor entries must be finite"));
        }
        Ok(Self { rank, n, m, u, v })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn user(&self, i: usize) -> &[f64] {
        &self.u[i * self.rank..(i + 1) * self.rank]
    }

    pub fn item(&self, j: usize) -> &[f64] {
        &self.v[j * self.rank..(j + 1) * self.rank]
    }

    pub fn user_factors(&self) -> &[f64] {
        &self.u
    }

    pub fn item_factors(&self) -> &[f64] {
        &self.v
    }

    pub fn user_factors_mut(&mut self) -> &mut [f64] {
        &mut self.u
    }

    pub fn item_factors_mut(&mut self) -> &mut [f64] {
        &mut self.v
    }

    /// `X_ij = u_iᵀ v_j`.
    pub fn score(&self, i: usize, j: usize) -> f64 {
        dot(self.user(i), self.item(j))
    }

    /// Scores of every item for user `i`.
    pub fn user_scores(&self, i: usize, out: &mut Vec<f64>) {
        let u = self.user(i);
        out.clear();
        out.extend(self.v.chunks_exact(self.rank.max(1)).take(self.m).map(|v| dot(u, v)));
        if self.rank == 0 {
            out.resize(self.m, 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    fn squared_norm(&self) -> f64 {
        self.u.iter().chain(&self.v).map(|x| x * x).sum()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Number of leading positions that contribute a likelihood factor.
///
/// The factor at the last position is `φ/φ = 1` whatever the scores, so it
/// is dropped; this keeps single-item lists at exactly zero loss and zero
/// gradient.
fn effective_top(k: Cutoff, len: usize) -> usize {
    k.resolve(len).min(len.saturating_sub(1))
}

/// Objective value split into its two parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// Listwise negative log-likelihood of the given orderings.
    pub data_term: f64,
    /// `(λ/2)(‖U‖²_F + ‖V‖²_F)`.
    pub reg_term: f64,
    pub total: f64,
}

/// Gradient in the same column layout as [`FactorModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Which factor block a gradient is taken for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    User,
    Item,
}

fn check_rows(model: &FactorModel, pi: &PermutationMatrix) -> Result<()> {
    for row in &pi.rows {
        if row.user >= model.n {
            return Err(Error::DimensionMismatch(format!(
                "ordering for user {} but the model has {} users",
                row.user, model.n
            )));
        }
        if let Some(&j) = row.items.iter().find(|&&j| j >= model.m) {
            return Err(Error::DimensionMismatch(format!(
                "ordering of user {} lists item {j} but the model has {} items",
                row.user, model.m
            )));
        }
    }
    Ok(())
}

fn row_scores(model: &FactorModel, row: &PermRow, h: &mut Vec<f64>) {
    let u = model.user(row.user);
    h.clear();
    h.extend(row.items.iter().map(|&j| dot(u, model.item(j))));
}

/// Data term of one list given its scores `h`.
fn list_nll(h: &[f64], top: usize) -> f64 {
    let mut suffix = 0.0;
    let mut total = 0.0;
    for t in (0..h.len()).rev() {
        suffix += phi(h[t]);
        if t < top {
            total += suffix.ln() - sigmoid(h[t]);
        }
    }
    total
}

/// Objective for the single ordering `pi`.
pub fn loss(model: &FactorModel, pi: &PermutationMatrix, k: Cutoff, lambda: f64) -> Result<LossValue> {
    check_rows(model, pi)?;
    let mut h = Vec::new();
    let mut data_term = 0.0;
    for row in &pi.rows {
        row_scores(model, row, &mut h);
        data_term += list_nll(&h, effective_top(k, h.len()));
    }
    let reg_term = 0.5 * lambda * model.squared_norm();
    Ok(LossValue {
        data_term,
        reg_term,
        total: data_term + reg_term,
    })
}

/// Per-position coefficients `∂f/∂h_t` for one list, in `O(m̄)`.
///
/// `phis` and `coef` are scratch/output buffers reused across users.
fn list_coefficients(h: &[f64], top: usize, phis: &mut Vec<f64>, coef: &mut Vec<f64>) {
    let len = h.len();
    phis.clear();
    phis.extend(h.iter().map(|&x| phi(x)));
    // Backward pass: coef temporarily holds S_t.
    coef.clear();
    coef.resize(len, 0.0);
    let mut suffix = 0.0;
    for t in (0..len).rev() {
        suffix += phis[t];
        coef[t] = suffix;
    }
    // Forward pass: running T_t = Σ_{τ ≤ min(t, top-1)} 1/S_τ.
    let mut running = 0.0;
    for t in 0..len {
        let g = sigmoid(h[t]);
        let dg = g * (1.0 - g);
        if t < top {
            running += 1.0 / coef[t];
            coef[t] = -dg + phis[t] * dg * running;
        } else {
            coef[t] = phis[t] * dg * running;
        }
    }
}

struct Scratch {
    h: Vec<f64>,
    phis: Vec<f64>,
    coef: Vec<f64>,
}

impl Scratch {
    fn new() -> Self {
        Self {
            h: Vec::new(),
            phis: Vec::new(),
            coef: Vec::new(),
        }
    }

    fn fill(&mut self, model: &FactorModel, row: &PermRow, k: Cutoff) {
        row_scores(model, row, &mut self.h);
        list_coefficients(&self.h, effective_top(k, row.len()), &mut self.phis, &mut self.coef);
    }
}

/// Adds row contributions to the item gradient `gv`.
fn accumulate_items(model: &FactorModel, rows: &[PermRow], k: Cutoff, gv: &mut [f64]) {
    let r = model.rank;
    let mut s = Scratch::new();
    for row in rows {
        s.fill(model, row, k);
        let u = model.user(row.user);
        for (&j, &c) in row.items.iter().zip(&s.coef) {
            axpy(c, u, &mut gv[j * r..(j + 1) * r]);
        }
    }
}

/// Adds one row's contribution to its user column `gu_i`.
fn accumulate_user(model: &FactorModel, row: &PermRow, s: &mut Scratch, k: Cutoff, gu_i: &mut [f64]) {
    s.fill(model, row, k);
    for (&j, &c) in row.items.iter().zip(&s.coef) {
        axpy(c, model.item(j), gu_i);
    }
}

/// Number of row chunks the parallel item-gradient reduction is split into.
/// Fixed, so the summation order (and the result bits) do not depend on the
/// thread count.
pub const PARALLEL_CHUNKS: usize = 16;

/// Gradient of one block in `O(Σ_i m̄_i · r)`.
///
/// Serial mode accumulates user-major, position-major. Parallel mode splits
/// the rows into [`PARALLEL_CHUNKS`] contiguous chunks and sums the chunk
/// partials in chunk order; it agrees with serial mode up to floating-point
/// reassociation.
pub fn block_gradient(
    model: &FactorModel,
    pi: &PermutationMatrix,
    k: Cutoff,
    lambda: f64,
    block: Block,
    parallel: bool,
) -> Result<Vec<f64>> {
    check_rows(model, pi)?;
    let r = model.rank;
    match block {
        Block::Item => {
            let mut gv: Vec<f64> = model.v.iter().map(|x| lambda * x).collect();
            if !parallel || pi.rows.len() < 2 * PARALLEL_CHUNKS {
                accumulate_items(model, &pi.rows, k, &mut gv);
            } else {
                let chunk = pi.rows.len().div_ceil(PARALLEL_CHUNKS);
                let partials: Vec<Vec<f64>> = pi
                    .rows
                    .par_chunks(chunk)
                    .map(|rows| {
                        let mut part = vec![0.0; model.v.len()];
                        accumulate_items(model, rows, k, &mut part);
                        part
                    })
                    .collect();
                for part in partials {
                    for (g, p) in gv.iter_mut().zip(part) {
                        *g += p;
                    }
                }
            }
            Ok(gv)
        }
        Block::User => {
            let mut gu: Vec<f64> = model.u.iter().map(|x| lambda * x).collect();
            if parallel {
                let parts: Vec<Vec<f64>> = pi
                    .rows
                    .par_iter()
                    .map_init(Scratch::new, |s, row| {
                        let mut part = vec![0.0; r];
                        accumulate_user(model, row, s, k, &mut part);
                        part
                    })
                    .collect();
                for (row, part) in pi.rows.iter().zip(parts) {
                    let col = &mut gu[row.user * r..(row.user + 1) * r];
                    for (g, p) in col.iter_mut().zip(part) {
                        *g += p;
                    }
                }
            } else {
                let mut s = Scratch::new();
                let mut part = vec![0.0; r];
                for row in &pi.rows {
                    part.iter_mut().for_each(|x| *x = 0.0);
                    accumulate_user(model, row, &mut s, k, &mut part);
                    let col = &mut gu[row.user * r..(row.user + 1) * r];
                    for (g, p) in col.iter_mut().zip(&part) {
                        *g += p;
                    }
                }
            }
            Ok(gu)
        }
    }
}

/// Full gradient with the linear-time kernel, serial.
pub fn grad_fast(model: &FactorModel, pi: &PermutationMatrix, k: Cutoff, lambda: f64) -> Result<Gradient> {
    Ok(Gradient {
        u: block_gradient(model, pi, k, lambda, Block::User, false)?,
        v: block_gradient(model, pi, k, lambda, Block::Item, false)?,
    })
}

/// [`grad_fast`] with per-user work spread over the rayon pool.
pub fn grad_fast_parallel(
    model: &FactorModel,
    pi: &PermutationMatrix,
    k: Cutoff,
    lambda: f64,
) -> Result<Gradient> {
    Ok(Gradient {
        u: block_gradient(model, pi, k, lambda, Block::User, true)?,
        v: block_gradient(model, pi, k, lambda, Block::Item, true)?,
    })
}

/// Reference gradient summing every (position, denominator) pair directly.
///
/// Each denominator `Σ_{l ≥ τ} φ(h_l)` is summed from scratch and every pair
/// does its own rank-`r` update, for `O(m̄²·r)` per user. For checking only.
pub fn grad_naive(model: &FactorModel, pi: &PermutationMatrix, k: Cutoff, lambda: f64) -> Result<Gradient> {
    check_rows(model, pi)?;
    let r = model.rank;
    let mut gu: Vec<f64> = model.u.iter().map(|x| lambda * x).collect();
    let mut gv: Vec<f64> = model.v.iter().map(|x| lambda * x).collect();
    for row in &pi.rows {
        let i = row.user;
        let len = row.len();
        let top = effective_top(k, len);
        let h: Vec<f64> = row.items.iter().map(|&j| model.score(i, j)).collect();
        let denominators: Vec<f64> = (0..top)
            .map(|tau| (tau..len).map(|l| phi(h[l])).sum())
            .collect();
        for (t, &j) in row.items.iter().enumerate() {
            let g = sigmoid(h[t]);
            let dg = g * (1.0 - g);
            let mut pair_terms = Vec::with_capacity(top + 1);
            if t < top {
                pair_terms.push(-dg);
            }
            for &d in denominators.iter().take((t + 1).min(top)) {
                pair_terms.push(phi(h[t]) * dg / d);
            }
            for w in pair_terms {
                for a in 0..r {
                    gv[j * r + a] += w * model.u[i * r + a];
                    gu[i * r + a] += w * model.v[j * r + a];
                }
            }
        }
    }
    Ok(Gradient { u: gu, v: gv })
}
