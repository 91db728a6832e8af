//! Training loop.
//!
//! Each epoch draws one ordering of every user's list (fresh tie shuffles and
//! fresh negatives), takes a full gradient step on `U` with `V` fixed, then a
//! step on `V` at the new `U`. The step size is multiplied by `rate` after
//! each of the two block updates.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Feedback, RatingsDataset};
use crate::error::{Error, Result};
use crate::metrics;
use crate::objective::{block_gradient, loss, Block, FactorModel};
use crate::perm_model::{stochastic_queue_streams, Cutoff, PermutationMatrix};
use crate::rng::{stream, Stream};

/// Loss above this multiple of the first recorded loss aborts training.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// NDCG cutoff used as the explicit-feedback validation metric.
pub const EXPLICIT_VALIDATION_NDCG_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rank: usize,
    pub lambda: f64,
    /// Initial step size.
    pub ss: f64,
    /// Multiplicative step-size decay per block update, in (0, 1].
    pub rate: f64,
    /// Sampled negatives per observed 1 (implicit data only).
    pub rho: f64,
    pub k: Cutoff,
    pub epochs: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian initialization.
    pub init_scale: f64,
    /// Epochs without validation improvement before stopping; `None` disables
    /// early stopping. Written as an integer or `"none"` in config files.
    #[serde(with = "patience_repr")]
    pub patience: Option<usize>,
    /// Draw a fresh ordering every epoch. When false one ordering is drawn
    /// up front and reused for the whole run.
    pub stochastic_queue: bool,
    /// Spread per-user gradient work over the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rank: 100,
            lambda: 0.1,
            ss: 0.1,
            rate: 0.995,
            rho: 3.0,
            k: Cutoff::Full,
            epochs: 50,
            seed: 0,
            init_scale: 0.1,
            patience: Some(10),
            stochastic_queue: true,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(msg.to_string()));
        if self.rank == 0 {
            return bad("rank must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite value >= 0");
        }
        if !(self.ss >= 0.0 && self.ss.is_finite()) {
            return bad("step size must be a finite value >= 0");
        }
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return bad("rate must lie in (0, 1]");
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad("rho must be a finite value >= 0");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be a finite value >= 0");
        }
        if self.k == Cutoff::Top(0) {
            return bad("k must be at least 1");
        }
        Ok(())
    }
}

mod patience_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Epochs(usize),
        Word(String),
    }

    pub fn serialize<S: Serializer>(value: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match value {
            Some(p) => Repr::Epochs(*p),
            None => Repr::Word("none".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Epochs(p) => Ok(Some(p)),
            Repr::Word(w) if w == "none" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("patience must be an integer or \"none\", got {w:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Objective after both block updates, on this epoch's ordering.
    pub loss: f64,
    pub data_term: f64,
    /// Step size in effect at the start of the epoch.
    pub step_size: f64,
    pub validation: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: FactorModel,
    /// Completed epochs.
    pub epoch: usize,
    pub current_ss: f64,
    pub best_validation: Option<f64>,
    /// Epoch whose model is the best so far (0 only when no epoch ran).
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Objective of the initial model on the first ordering.
    pub initial_loss: Option<f64>,
}

impl TrainState {
    pub fn new(model: FactorModel, cfg: &TrainConfig) -> Self {
        Self {
            model,
            epoch: 0,
            current_ss: cfg.ss,
            best_validation: None,
            best_epoch: 0,
            history: Vec::new(),
            initial_loss: None,
        }
    }
}

/// Gaussian initialization, `U` first then `V`.
pub fn init_model<R: Rng + ?Sized>(cfg: &TrainConfig, n: usize, m: usize, rng: &mut R) -> Result<FactorModel> {
    if n == 0 || m == 0 {
        return Err(Error::invalid("need at least one user and one item"));
    }
    let mut model = FactorModel::zeros(cfg.rank, n, m);
    if cfg.init_scale > 0.0 {
        let normal = Normal::new(0.0, cfg.init_scale).map_err(|e| Error::invalid(e.to_string()))?;
        for x in model.user_factors_mut() {
            *x = normal.sample(rng);
        }
        for x in model.item_factors_mut() {
            *x = normal.sample(rng);
        }
    }
    Ok(model)
}

/// The ordering used for `epoch` (0-based): a fresh draw per epoch, or the
/// epoch-0 draw forever when stochastic queuing is off.
pub fn draw_ordering(train: &RatingsDataset, cfg: &TrainConfig, epoch: usize) -> PermutationMatrix {
    let key = if cfg.stochastic_queue { epoch as u64 } else { 0 };
    stochastic_queue_streams(train, cfg.rho, cfg.seed, key)
}

fn step(factors: &mut [f64], grad: &[f64], ss: f64) {
    for (x, g) in factors.iter_mut().zip(grad) {
        *x -= ss * g;
    }
}

/// Runs one epoch and appends its record (without a validation value).
pub fn train_epoch(state: &mut TrainState, train: &RatingsDataset, cfg: &TrainConfig) -> Result<()> {
    if train.n() != state.model.n() || train.m() != state.model.m() {
        return Err(Error::DimensionMismatch(format!(
            "training data is {}x{} but the model is {}x{}",
            train.n(),
            train.m(),
            state.model.n(),
            state.model.m()
        )));
    }
    let pi = draw_ordering(train, cfg, state.epoch);
    if state.initial_loss.is_none() {
        state.initial_loss = Some(loss(&state.model, &pi, cfg.k, cfg.lambda)?.total);
    }
    let start_ss = state.current_ss;

    let gu = block_gradient(&state.model, &pi, cfg.k, cfg.lambda, Block::User, cfg.parallel)?;
    step(state.model.user_factors_mut(), &gu, state.current_ss);
    state.current_ss *= cfg.rate;

    let gv = block_gradient(&state.model, &pi, cfg.k, cfg.lambda, Block::Item, cfg.parallel)?;
    step(state.model.item_factors_mut(), &gv, state.current_ss);
    state.current_ss *= cfg.rate;

    state.epoch += 1;
    let value = loss(&state.model, &pi, cfg.k, cfg.lambda)?;
    let initial = state.initial_loss.unwrap_or(value.total);
    if !value.total.is_finite() || !state.model.is_finite() || value.total > DIVERGENCE_FACTOR * initial.max(f64::MIN_POSITIVE) {
        return Err(Error::Divergence {
            epoch: state.epoch,
            step_size: start_ss,
            loss: value.total,
        });
    }
    state.history.push(EpochRecord {
        epoch: state.epoch,
        loss: value.total,
        data_term: value.data_term,
        step_size: start_ss,
        validation: None,
    });
    Ok(())
}

/// Validation metric: precision@1 for implicit data, NDCG@10 for explicit.
pub fn validation_metric(model: &FactorModel, train: &RatingsDataset, valid: &RatingsDataset) -> Result<f64> {
    match valid.mode() {
        Feedback::Implicit => {
            let report = metrics::precision_at_k_implicit(model, train, valid, &[1])?;
            Ok(report.precision[&1])
        }
        Feedback::Explicit => Ok(metrics::ndcg_at_k(model, valid, EXPLICIT_VALIDATION_NDCG_K)?.0),
    }
}

/// Trains for up to `cfg.epochs` epochs with early stopping on the
/// validation metric and returns the state holding the best model.
pub fn fit(train: &RatingsDataset, valid: &RatingsDataset, cfg: &TrainConfig) -> Result<TrainState> {
    fit_with(train, valid, cfg, |_| {})
}

/// [`fit`] with a callback invoked after every epoch.
pub fn fit_with<F>(train: &RatingsDataset, valid: &RatingsDataset, cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainState>
where
    F: FnMut(&EpochRecord),
{
    cfg.validate()?;
    if valid.n() != train.n() || valid.m() != train.m() {
        return Err(Error::DimensionMismatch(format!(
            "validation data is {}x{} but training data is {}x{}",
            valid.n(),
            valid.m(),
            train.n(),
            train.m()
        )));
    }
    let model = init_model(cfg, train.n(), train.m(), &mut stream(cfg.seed, Stream::Init))?;
    let mut state = TrainState::new(model, cfg);

    let validate = !valid.is_empty();
    if !validate {
        log::warn!("validation set is empty; running a fixed {} epochs", cfg.epochs);
    }
    if validate && cfg.epochs == 0 {
        state.best_validation = Some(validation_metric(&state.model, train, valid)?);
    }
    // Only trained epochs are candidates; a tie counts as an improvement.
    let mut best_model = None;
    let mut since_best = 0;
    while state.epoch < cfg.epochs {
        train_epoch(&mut state, train, cfg)?;
        if validate {
            let score = validation_metric(&state.model, train, valid)?;
            state.history.last_mut().expect("record just pushed").validation = Some(score);
            if state.best_validation.is_none_or(|b| score >= b) {
                state.best_validation = Some(score);
                state.best_epoch = state.epoch;
                best_model = Some(state.model.clone());
                since_best = 0;
            } else {
                since_best += 1;
            }
        } else {
            state.best_epoch = state.epoch;
        }
        on_epoch(state.history.last().expect("record just pushed"));
        if validate && cfg.patience.is_some_and(|p| since_best >= p) {
            log::info!("no validation improvement for {since_best} epochs; stopping at epoch {}", state.epoch);
            break;
        }
    }
    if let Some(best) = best_model.filter(|_| state.best_epoch < state.epoch) {
        state.model = best;
    }
    Ok(state)
}
