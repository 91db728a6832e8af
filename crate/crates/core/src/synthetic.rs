//! Seeded synthetic fixtures: random small instances for gradient checks
//! and planted low-rank datasets with a known ground truth.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Feedback, Rating, RatingsDataset};
use crate::objective::FactorModel;
use crate::perm_model::{stochastic_queue, PermutationMatrix};
use crate::rng::{stream, substream, Stream};

fn gaussian_model<R: Rng>(rank: usize, n: usize, m: usize, scale: f64, rng: &mut R) -> FactorModel {
    let mut draw = |len: usize| -> Vec<f64> {
        (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                scale * z
            })
            .collect()
    };
    let u = draw(rank * n);
    let v = draw(rank * m);
    FactorModel::from_columns(rank, n, m, u, v).expect("finite gaussian factors")
}

/// A random model and ordering for gradient checks.
///
/// With `rho == 0` each user rates a random subset of 1..=m items on a 1–5
/// scale (ragged, tie-heavy lists). With `rho > 0` each user has between 1
/// and `m / (1 + rho)` implicit 1's and gets `round(rho·m̃)` sampled
/// negatives appended.
pub fn random_instance(seed: u64, n: usize, m: usize, rank: usize, rho: f64) -> (FactorModel, PermutationMatrix) {
    let mut rng = stream(seed, Stream::Fixture);
    let model = gaussian_model(rank, n, m, 1.0, &mut rng);
    let implicit = rho > 0.0;
    let max_len = if implicit {
        ((m as f64 / (1.0 + rho)).floor() as usize).max(1)
    } else {
        m
    };
    let mut entries = Vec::new();
    for user in 0..n {
        let len = rng.random_range(1..=max_len);
        for item in index::sample(&mut rng, m, len) {
            let score = if implicit { 1 } else { rng.random_range(1..=5) };
            entries.push(Rating { user, item, score });
        }
    }
    let mode = if implicit {
        Feedback::Implicit
    } else {
        Feedback::Explicit
    };
    let ds = RatingsDataset::new(n, m, mode, entries).expect("valid synthetic entries");
    let pi = stochastic_queue(&ds, rho, &mut rng);
    (model, pi)
}

/// Shape of a planted-model dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub n: usize,
    pub m: usize,
    pub rank: usize,
    /// Implicit: how many of each user's top true items are 1's.
    /// Explicit: how many items each user rates.
    pub observed_per_user: usize,
    pub train_per_user: usize,
    /// Standard deviation of Gaussian noise added to true scores before the
    /// observations are derived.
    pub noise: f64,
    pub seed: u64,
}

/// Train/validation data drawn from a known low-rank model.
#[derive(Debug, Clone)]
pub struct Planted {
    pub truth: FactorModel,
    pub train: RatingsDataset,
    pub valid: RatingsDataset,
}

impl Planted {
    /// Expected precision@k of uniformly random scores on `valid`, averaged
    /// over users with validation items: `|valid_i| / (m − |train_i|)` per user,
    /// independent of k while k stays below the candidate count.
    pub fn random_precision(&self) -> f64 {
        let m = self.train.m() as f64;
        let mut sum = 0.0;
        let mut users = 0;
        for user in 0..self.valid.n() {
            let hits = self.valid.user_entries(user).len();
            if hits == 0 {
                continue;
            }
            let pool = m - self.train.user_entries(user).len() as f64;
            sum += hits as f64 / pool;
            users += 1;
        }
        sum / users as f64
    }
}

fn noisy_scores<R: Rng>(truth: &FactorModel, user: usize, noise: f64, rng: &mut R) -> Vec<f64> {
    (0..truth.m())
        .map(|j| {
            let eps: f64 = StandardNormal.sample(&mut *rng);
            truth.score(user, j) + noise * eps
        })
        .collect()
}

fn split_rows(all: Vec<Vec<Rating>>, spec: &PlantedSpec, mode: Feedback, truth: FactorModel) -> Planted {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (user, row) in all.into_iter().enumerate() {
        let mut rng = substream(spec.seed, Stream::DataSplit, user as u64, 1);
        let mut in_train = vec![false; row.len()];
        for p in index::sample(&mut rng, row.len(), spec.train_per_user.min(row.len())) {
            in_train[p] = true;
        }
        for (e, t) in row.into_iter().zip(in_train) {
            if t {
                train.push(e);
            } else {
                valid.push(e);
            }
        }
    }
    Planted {
        train: RatingsDataset::new(spec.n, spec.m, mode, train).expect("planted train"),
        valid: RatingsDataset::new(spec.n, spec.m, mode, valid).expect("planted valid"),
        truth,
    }
}

/// Implicit planted data: each user's `observed_per_user` highest (noisy)
/// true scores are the 1's, split into train and validation.
pub fn planted_implicit(spec: &PlantedSpec) -> Planted {
    let mut rng = stream(spec.seed, Stream::Fixture);
    let truth = gaussian_model(spec.rank, spec.n, spec.m, 1.0, &mut rng);
    let rows = (0..spec.n)
        .map(|user| {
            let scores = noisy_scores(&truth, user, spec.noise, &mut rng);
            let mut order: Vec<usize> = (0..spec.m).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            order
                .into_iter()
                .take(spec.observed_per_user)
                .map(|item| Rating { user, item, score: 1 })
                .collect()
        })
        .collect();
    split_rows(rows, spec, Feedback::Implicit, truth)
}

/// Explicit planted data: each user rates `observed_per_user` random items;
/// the rating is the quintile (1–5) of the item's noisy true score among all
/// of that user's items.
pub fn planted_explicit(spec: &PlantedSpec) -> Planted {
    let mut rng = stream(spec.seed, Stream::Fixture);
    let truth = gaussian_model(spec.rank, spec.n, spec.m, 1.0, &mut rng);
    let rows = (0..spec.n)
        .map(|user| {
            let scores = noisy_scores(&truth, user, spec.noise, &mut rng);
            let mut order: Vec<usize> = (0..spec.m).collect();
            order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
            let mut rating = vec![0u32; spec.m];
            for (pos, &item) in order.iter().enumerate() {
                rating[item] = 1 + (5 * pos / spec.m) as u32;
            }
            let mut picked: Vec<usize> = index::sample(&mut rng, spec.m, spec.observed_per_user).into_vec();
            picked.sort_unstable();
            picked
                .into_iter()
                .map(|item| Rating {
                    user,
                    item,
                    score: rating[item],
                })
                .collect()
        })
        .collect();
    split_rows(rows, spec, Feedback::Explicit, truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_are_seeded() {
        let (a, pa) = random_instance(3, 5, 8, 3, 2.0);
        let (b, pb) = random_instance(3, 5, 8, 3, 2.0);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        let (c, _) = random_instance(4, 5, 8, 3, 2.0);
        assert_ne!(a, c);
    }

    #[test]
    fn implicit_instance_shape() {
        let (_, pi) = random_instance(9, 5, 8, 3, 2.0);
        assert_eq!(pi.rows.len(), 5);
        for row in &pi.rows {
            assert!(row.observed >= 1 && row.observed <= 2);
            assert_eq!(row.negatives(), 2 * row.observed);
        }
    }

    #[test]
    fn planted_implicit_counts() {
        let spec = PlantedSpec {
            n: 10,
            m: 40,
            rank: 2,
            observed_per_user: 20,
            train_per_user: 8,
            noise: 0.0,
            seed: 1,
        };
        let p = planted_implicit(&spec);
        for user in 0..10 {
            assert_eq!(p.train.user_entries(user).len(), 8);
            assert_eq!(p.valid.user_entries(user).len(), 12);
        }
        assert!((p.random_precision() - 12.0 / 32.0).abs() < 1e-12);
    }

    #[test]
    fn planted_explicit_ratings_follow_truth() {
        let spec = PlantedSpec {
            n: 6,
            m: 40,
            rank: 2,
            observed_per_user: 40,
            train_per_user: 20,
            noise: 0.0,
            seed: 2,
        };
        let p = planted_explicit(&spec);
        for user in 0..6 {
            let mut rows: Vec<_> = p.train.user_entries(user).to_vec();
            rows.extend_from_slice(p.valid.user_entries(user));
            for a in &rows {
                for b in &rows {
                    if a.score > b.score {
                        assert!(p.truth.score(user, a.item) > p.truth.score(user, b.item));
                    }
                }
            }
        }
    }
}
