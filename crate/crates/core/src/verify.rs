//! Self-contained verification checks.
//!
//! Every check builds its own seeded fixtures, compares the production code
//! against an independent oracle and returns a JSON-serializable report.

use std::collections::BTreeMap;
use std::hint::black_box;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::json;

use crate::data::{Feedback, Rating, RatingsDataset};
use crate::error::Result;
use crate::objective::{grad_fast, grad_naive, loss, FactorModel, Gradient};
use crate::perm_model::{
    log_permutation_probability, permutations, sample_permutation_exponential, stochastic_queue, Cutoff,
    PermutationMatrix,
};
use crate::rng::{substream, Stream};
use crate::synthetic::random_instance;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;
/// Magnitude below which finite-difference errors are measured absolutely.
pub const FD_FLOOR: f64 = 1e-6;
pub const KERNEL_TOLERANCE: f64 = 1e-10;
/// Same role as [`FD_FLOOR`] for the kernel comparison.
pub const KERNEL_FLOOR: f64 = 1e-12;
pub const NORMALIZATION_TOLERANCE: f64 = 1e-12;
pub const MC_TV_THRESHOLD: f64 = 0.02;
pub const MC_DEFAULT_SAMPLES: usize = 100_000;
pub const FAULT_SIZE: f64 = 1e-3;
pub const FAST_RATIO_BAND: (f64, f64) = (1.6, 2.6);
pub const NAIVE_RATIO_MIN: f64 = 3.2;

/// λ used by the gradient fixtures, so the regularizer path is covered too.
const FIXTURE_LAMBDA: f64 = 0.3;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y, floor))
        .fold(0.0, f64::max)
}

/// One seeded gradient fixture.
#[derive(Debug, Clone)]
pub struct GradInstance {
    pub label: String,
    pub model: FactorModel,
    pub pi: PermutationMatrix,
    pub k: Cutoff,
    pub lambda: f64,
}

/// The 20 small instances (n = 5, m = 8, r = 3) cycling through
/// k ∈ {2, full} and ρ ∈ {0, 2}.
pub fn standard_instances(seed: u64) -> Vec<GradInstance> {
    (0..20u64)
        .map(|i| {
            let k = if i % 2 == 0 { Cutoff::Top(2) } else { Cutoff::Full };
            let rho = if (i / 2) % 2 == 0 { 0.0 } else { 2.0 };
            let (model, pi) = random_instance(seed.wrapping_add(i), 5, 8, 3, rho);
            GradInstance { label: format!("small #{i} k={k} rho={rho}"), model, pi, k, lambda: FIXTURE_LAMBDA }
        })
        .collect()
}

/// Larger ragged explicit and implicit instances with long lists.
pub fn extra_instances(seed: u64) -> Vec<GradInstance> {
    let mut out = Vec::new();
    for (i, (rho, k)) in [(0.0, Cutoff::Full), (0.0, Cutoff::Top(7)), (3.0, Cutoff::Full), (3.0, Cutoff::Top(4))]
        .into_iter()
        .enumerate()
    {
        let (model, pi) = random_instance(seed.wrapping_add(1000 + i as u64), 12, 60, 4, rho);
        out.push(GradInstance { label: format!("ragged #{i} k={k} rho={rho}"), model, pi, k, lambda: FIXTURE_LAMBDA });
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckReport>,
}

/// Central finite differences of the loss, `U` block then `V` block.
pub fn finite_difference_gradient(inst: &GradInstance, step: f64) -> Result<Gradient> {
    let mut model = inst.model.clone();
    let f = |m: &FactorModel| loss(m, &inst.pi, inst.k, inst.lambda).map(|l| l.total);
    let mut gu = vec![0.0; model.user_factors().len()];
    for (idx, g) in gu.iter_mut().enumerate() {
        let x = model.user_factors()[idx];
        model.user_factors_mut()[idx] = x + step;
        let plus = f(&model)?;
        model.user_factors_mut()[idx] = x - step;
        let minus = f(&model)?;
        model.user_factors_mut()[idx] = x;
        *g = (plus - minus) / (2.0 * step);
    }
    let mut gv = vec![0.0; model.item_factors().len()];
    for (idx, g) in gv.iter_mut().enumerate() {
        let x = model.item_factors()[idx];
        model.item_factors_mut()[idx] = x + step;
        let plus = f(&model)?;
        model.item_factors_mut()[idx] = x - step;
        let minus = f(&model)?;
        model.item_factors_mut()[idx] = x;
        *g = (plus - minus) / (2.0 * step);
    }
    Ok(Gradient { u: gu, v: gv })
}

/// (a) Naive gradient against central finite differences.
pub fn check_finite_differences(instances: &[GradInstance]) -> Result<CheckReport> {
    let mut rows = Vec::new();
    let (mut worst_u, mut worst_v) = (0.0f64, 0.0f64);
    for inst in instances {
        let exact = grad_naive(&inst.model, &inst.pi, inst.k, inst.lambda)?;
        let fd = finite_difference_gradient(inst, FD_STEP)?;
        let eu = max_relative_error(&exact.u, &fd.u, FD_FLOOR);
        let ev = max_relative_error(&exact.v, &fd.v, FD_FLOOR);
        worst_u = worst_u.max(eu);
        worst_v = worst_v.max(ev);
        rows.push(json!({"instance": inst.label, "max_rel_err_u": eu, "max_rel_err_v": ev}));
    }
    Ok(CheckReport {
        name: "finite_difference".into(),
        passed: worst_u < FD_TOLERANCE && worst_v < FD_TOLERANCE,
        details: json!({
            "step": FD_STEP,
            "tolerance": FD_TOLERANCE,
            "floor": FD_FLOOR,
            "max_rel_err_u": worst_u,
            "max_rel_err_v": worst_v,
            "instances": rows,
        }),
    })
}

/// (b) Linear-time kernel against the naive gradient. `inject_fault` adds
/// [`FAULT_SIZE`] to one coordinate of the fast result.
pub fn check_kernel_equivalence(instances: &[GradInstance], inject_fault: bool) -> Result<CheckReport> {
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for (n, inst) in instances.iter().enumerate() {
        let naive = grad_naive(&inst.model, &inst.pi, inst.k, inst.lambda)?;
        let mut fast = grad_fast(&inst.model, &inst.pi, inst.k, inst.lambda)?;
        if inject_fault && n == 0 {
            fast.v[0] += FAULT_SIZE;
        }
        let eu = max_relative_error(&fast.u, &naive.u, KERNEL_FLOOR);
        let ev = max_relative_error(&fast.v, &naive.v, KERNEL_FLOOR);
        worst = worst.max(eu).max(ev);
        rows.push(json!({"instance": inst.label, "max_rel_err_u": eu, "max_rel_err_v": ev}));
    }
    Ok(CheckReport {
        name: "fast_vs_naive".into(),
        passed: worst < KERNEL_TOLERANCE,
        details: json!({
            "tolerance": KERNEL_TOLERANCE,
            "floor": KERNEL_FLOOR,
            "fault_injected": inject_fault,
            "max_rel_err": worst,
            "instances": rows,
        }),
    })
}

fn gaussian_scores<R: Rng>(len: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            scale * z
        })
        .collect()
}

/// Ten score vectors with lengths cycling through 2..=6.
pub fn random_score_vectors(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = substream(seed, Stream::Fixture, 7, 0);
    (0..10).map(|i| gaussian_scores(2 + i % 5, 2.0, &mut rng)).collect()
}

/// Sum of the model probability over every permutation of `scores`.
pub fn total_probability(scores: &[f64]) -> Result<f64> {
    permutations(scores.len())
        .iter()
        .map(|p| log_permutation_probability(scores, p, scores.len()).map(f64::exp))
        .sum()
}

/// (c) Probabilities over all of S_m̄ sum to one.
pub fn check_normalization(seed: u64) -> Result<CheckReport> {
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for s in random_score_vectors(seed) {
        let total = total_probability(&s)?;
        worst = worst.max((total - 1.0).abs());
        rows.push(json!({"len": s.len(), "sum": total}));
    }
    Ok(CheckReport {
        name: "normalization".into(),
        passed: worst < NORMALIZATION_TOLERANCE,
        details: json!({"tolerance": NORMALIZATION_TOLERANCE, "max_abs_dev": worst, "vectors": rows}),
    })
}

/// Violations of the swap and argmax-sorted properties for one vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SoundnessCount {
    pub swap_checks: usize,
    pub swap_violations: usize,
    pub argmax_violations: usize,
}

/// Exhaustively checks that swapping a higher-scored item below a lower one
/// lowers the probability, and that sorting by score maximizes it.
pub fn soundness_violations(scores: &[f64]) -> Result<SoundnessCount> {
    let len = scores.len();
    let mut count = SoundnessCount::default();
    let perms = permutations(len);
    let mut best = f64::NEG_INFINITY;
    for p in &perms {
        let lp = log_permutation_probability(scores, p, len)?;
        best = best.max(lp);
        for i in 0..len {
            for j in i + 1..len {
                if scores[p[i]] > scores[p[j]] {
                    let mut q = p.clone();
                    q.swap(i, j);
                    count.swap_checks += 1;
                    if log_permutation_probability(scores, &q, len)? >= lp {
                        count.swap_violations += 1;
                    }
                }
            }
        }
    }
    let mut sorted: Vec<usize> = (0..len).collect();
    sorted.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    if log_permutation_probability(scores, &sorted, len)? < best {
        count.argmax_violations += 1;
    }
    Ok(count)
}

/// Empirical permutation frequencies against the model.
#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloReport {
    pub scores: Vec<f64>,
    pub samples: usize,
    pub total_variation: f64,
    /// `Σ_π sqrt(p(1 − p)/N)`: a bound on the binomial noise in the sum that
    /// defines the total variation.
    pub standard_error_bound: f64,
    pub threshold: f64,
    /// Keyed by the permutation written as dash-joined positions.
    pub permutations: BTreeMap<String, (f64, f64)>,
}

/// Fixed scores for the Monte-Carlo check.
pub const MC_SCORES: [f64; 4] = [1.0, -1.0, 0.5, 0.0];

/// Draws `samples` orderings with the exponential race and compares their
/// frequencies with the model probability. The pass threshold is
/// [`MC_TV_THRESHOLD`] widened to the standard-error bound when `samples`
/// is too small for the fixed threshold to be meaningful.
pub fn monte_carlo(scores: &[f64], samples: usize, seed: u64) -> Result<MonteCarloReport> {
    let perms = permutations(scores.len());
    let index: BTreeMap<Vec<usize>, usize> = perms.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
    let mut counts = vec![0usize; perms.len()];
    let mut rng = substream(seed, Stream::MonteCarlo, 0, 0);
    for _ in 0..samples {
        let p = sample_permutation_exponential(scores, &mut rng);
        counts[index[&p]] += 1;
    }
    let n = samples.max(1) as f64;
    let mut tv = 0.0;
    let mut se = 0.0;
    let mut table = BTreeMap::new();
    for (p, &c) in perms.iter().zip(&counts) {
        let prob = log_permutation_probability(scores, p, scores.len())?.exp();
        let freq = c as f64 / n;
        tv += (freq - prob).abs();
        se += (prob * (1.0 - prob) / n).sqrt();
        let key = p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-");
        table.insert(key, (freq, prob));
    }
    Ok(MonteCarloReport {
        scores: scores.to_vec(),
        samples,
        total_variation: tv / 2.0,
        standard_error_bound: se,
        threshold: MC_TV_THRESHOLD.max(se),
        permutations: table,
    })
}

/// (d) Exponential-race sampler against the model.
pub fn check_monte_carlo(samples: usize, seed: u64) -> Result<CheckReport> {
    let report = monte_carlo(&MC_SCORES, samples, seed)?;
    let passed = report.total_variation < report.threshold;
    if report.threshold > MC_TV_THRESHOLD {
        log::warn!(
            "{samples} samples: threshold widened from {MC_TV_THRESHOLD} to {:.4}",
            report.threshold
        );
    }
    Ok(CheckReport {
        name: "monte_carlo".into(),
        passed,
        details: json!({
            "samples": samples,
            "total_variation": report.total_variation,
            "base_threshold": MC_TV_THRESHOLD,
            "standard_error_bound": report.standard_error_bound,
            "threshold": report.threshold,
            "widened": report.threshold > MC_TV_THRESHOLD,
            "permutations": report.permutations,
        }),
    })
}

/// `n` users each listing all `m` items with distinct ratings, so every row
/// has length exactly `m`.
pub fn full_list_instance(n: usize, m: usize, rank: usize, seed: u64) -> (FactorModel, PermutationMatrix) {
    let mut rng = substream(seed, Stream::Fixture, n as u64, m as u64);
    let u = gaussian_scores(rank * n, 0.3, &mut rng);
    let v = gaussian_scores(rank * m, 0.3, &mut rng);
    let model = FactorModel::from_columns(rank, n, m, u, v).expect("finite factors");
    let entries = (0..n)
        .flat_map(|user| (0..m).map(move |item| Rating { user, item, score: (item as u32 * 7 + user as u32) % m as u32 }))
        .collect();
    let ds = RatingsDataset::new(n, m, Feedback::Explicit, entries).expect("valid fixture");
    let pi = stochastic_queue(&ds, 0.0, &mut rng);
    (model, pi)
}

/// Minimum wall time of `f` over several repeats, each repeat running `f`
/// enough times to last at least `min_batch_secs`.
pub fn min_time<F: FnMut()>(mut f: F, repeats: usize, min_batch_secs: f64) -> f64 {
    f();
    let start = Instant::now();
    f();
    let once = start.elapsed().as_secs_f64().max(1e-9);
    let batch = ((min_batch_secs / once).ceil() as usize).max(1);
    (0..repeats)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..batch {
                f();
            }
            start.elapsed().as_secs_f64() / batch as f64
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Timing {
    pub fast_small: f64,
    pub fast_large: f64,
    pub naive_small: f64,
    pub naive_large: f64,
    pub fast_ratio: f64,
    pub naive_ratio: f64,
}

/// Times both kernels at list lengths 200 and 400 (n = 100, r = 10).
pub fn measure_scaling(seed: u64) -> Result<Timing> {
    let (n, r) = (100, 10);
    let (ms, ps) = full_list_instance(n, 200, r, seed);
    let (ml, pl) = full_list_instance(n, 400, r, seed);
    let k = Cutoff::Full;
    let fast = |m: &FactorModel, p: &PermutationMatrix| {
        min_time(|| drop(black_box(grad_fast(black_box(m), p, k, 0.1))), 7, 0.02)
    };
    let naive = |m: &FactorModel, p: &PermutationMatrix| {
        min_time(|| drop(black_box(grad_naive(black_box(m), p, k, 0.1))), 3, 0.05)
    };
    let fast_small = fast(&ms, &ps);
    let fast_large = fast(&ml, &pl);
    let naive_small = naive(&ms, &ps);
    let naive_large = naive(&ml, &pl);
    Ok(Timing {
        fast_small,
        fast_large,
        naive_small,
        naive_large,
        fast_ratio: fast_large / fast_small,
        naive_ratio: naive_large / naive_small,
    })
}

/// (e) Doubling the list length roughly doubles the fast kernel's time and
/// roughly quadruples the naive one's.
pub fn check_timing(seed: u64) -> Result<CheckReport> {
    let t = measure_scaling(seed)?;
    let passed = (FAST_RATIO_BAND.0..=FAST_RATIO_BAND.1).contains(&t.fast_ratio) && t.naive_ratio > NAIVE_RATIO_MIN;
    Ok(CheckReport {
        name: "timing".into(),
        passed,
        details: json!({
            "list_lengths": [200, 400],
            "users": 100,
            "rank": 10,
            "seconds": t,
            "fast_ratio_band": [FAST_RATIO_BAND.0, FAST_RATIO_BAND.1],
            "naive_ratio_min": NAIVE_RATIO_MIN,
        }),
    })
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub mc_samples: usize,
    pub inject_fault: bool,
    pub timing: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 0, mc_samples: MC_DEFAULT_SAMPLES, inject_fault: false, timing: true }
    }
}

/// Gradient checks only: (a) and (b).
pub fn check_gradients(seed: u64, inject_fault: bool) -> Result<VerifyReport> {
    let small = standard_instances(seed);
    let mut all = small.clone();
    all.extend(extra_instances(seed));
    let checks = vec![check_finite_differences(&small)?, check_kernel_equivalence(&all, inject_fault)?];
    Ok(VerifyReport { passed: checks.iter().all(|c| c.passed), checks })
}

/// All five checks.
pub fn run_all(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut checks = check_gradients(opts.seed, opts.inject_fault)?.checks;
    checks.push(check_normalization(opts.seed)?);
    checks.push(check_monte_carlo(opts.mc_samples, opts.seed)?);
    if opts.timing {
        checks.push(check_timing(opts.seed)?);
    }
    Ok(VerifyReport { passed: checks.iter().all(|c| c.passed), checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0, 0.0), 0.5);
        assert!((relative_error(1e-9, 0.0, 1e-2) - 1e-7).abs() < 1e-20);
    }

    #[test]
    fn instance_mix() {
        let inst = standard_instances(0);
        assert_eq!(inst.len(), 20);
        assert!(inst.iter().any(|i| i.k == Cutoff::Top(2)));
        assert!(inst.iter().any(|i| i.pi.rows.iter().any(|r| r.negatives() > 0)));
        assert!(inst.iter().any(|i| i.pi.rows.iter().all(|r| r.negatives() == 0)));
        for i in &inst {
            assert_eq!((i.model.n(), i.model.m(), i.model.rank()), (5, 8, 3));
        }
    }

    #[test]
    fn fault_is_caught() {
        let inst = standard_instances(1);
        assert!(check_kernel_equivalence(&inst, false).unwrap().passed);
        assert!(!check_kernel_equivalence(&inst, true).unwrap().passed);
    }

    #[test]
    fn small_sample_widens_threshold() {
        let r = monte_carlo(&MC_SCORES, 1000, 3).unwrap();
        assert!(r.threshold > 0.1, "{}", r.threshold);
        let big = monte_carlo(&MC_SCORES, 100_000, 3).unwrap();
        assert_eq!(big.threshold, MC_TV_THRESHOLD);
        let total: f64 = big.permutations.values().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_lists_have_full_length() {
        let (model, pi) = full_list_instance(3, 11, 2, 0);
        assert_eq!(model.m(), 11);
        assert!(pi.rows.iter().all(|r| r.len() == 11));
    }

    #[test]
    fn soundness_counts_cover_all_pairs() {
        let c = soundness_violations(&[0.3, -1.0, 2.0]).unwrap();
        // 6 permutations x 3 pairs, half of them with the higher score first
        assert_eq!(c.swap_checks, 9);
        assert_eq!(c.swap_violations, 0);
        assert_eq!(c.argmax_violations, 0);
    }
}
