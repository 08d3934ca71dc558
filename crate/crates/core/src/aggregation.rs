//! Server-side aggregation strategies.
//!
//! Every strategy is a pure transition `(state, updates) -> state`. The
//! synchronous family works on the pseudo-gradient
//!
//! ```text
//! Δ = Σ_k n_k (w_k − global) / Σ_k n_k
//! ```
//!
//! where `n_k` is the client's sample count:
//!
//! * FedAvg: `global ← Σ_k n_k w_k / Σ_k n_k`
//! * FedAvgM: `m ← β m + Δ`, `global ← global + η m`
//! * FedAdagrad/FedAdam/FedYogi: `m ← β1 m + (1 − β1) Δ`, a variant-specific
//!   second moment `v`, then `global ← global + η m / (√v + τ)`
//!
//! The asynchronous pair consumes one update at a time:
//!
//! * FedAsync: `α_s = α (s + 1)^(−a)`, `global ← (1 − α_s) global + α_s w`
//! * FedBuff: buffer `w − global` (global at receipt), and every `K` updates
//!   apply `global ← global + η · mean(buffered deltas)`

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::TrainingMetrics;
use crate::params::{weighted_mean, Parameters, ParamsError};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error("no client updates to aggregate")]
    EmptyUpdateSet,
    #[error("update trained from round {base_round} but server is at round {round}")]
    NegativeStaleness { base_round: u64, round: u64 },
    #[error("{algorithm} expects {expected} update(s), got {got}")]
    AlgorithmArityMismatch {
        algorithm: Algorithm,
        expected: &'static str,
        got: usize,
    },
    #[error("update from {endpoint_id} has zero samples")]
    ZeroSamples { endpoint_id: String },
    #[error("aggregation produced a non-finite global model")]
    NonFiniteResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(alias = "fedavg")]
    FedAvg,
    #[serde(alias = "fedavgm")]
    FedAvgM,
    #[serde(alias = "fedadagrad")]
    FedAdagrad,
    #[serde(alias = "fedadam")]
    FedAdam,
    #[serde(alias = "fedyogi")]
    FedYogi,
    #[serde(alias = "fedasync")]
    FedAsync,
    #[serde(alias = "fedbuff", alias = "FedBuf", alias = "fedbuf")]
    FedBuff,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::FedAvg,
        Algorithm::FedAvgM,
        Algorithm::FedAdagrad,
        Algorithm::FedAdam,
        Algorithm::FedYogi,
        Algorithm::FedAsync,
        Algorithm::FedBuff,
    ];

    pub fn is_async(self) -> bool {
        matches!(self, Algorithm::FedAsync | Algorithm::FedBuff)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "FedAvg",
            Algorithm::FedAvgM => "FedAvgM",
            Algorithm::FedAdagrad => "FedAdagrad",
            Algorithm::FedAdam => "FedAdam",
            Algorithm::FedYogi => "FedYogi",
            Algorithm::FedAsync => "FedAsync",
            Algorithm::FedBuff => "FedBuff",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().to_ascii_lowercase() == lower)
            .or_else(|| (lower == "fedbuf").then_some(Algorithm::FedBuff))
            .ok_or_else(|| format!("unknown algorithm {s:?}"))
    }
}

/// Which second-moment rule the adaptive optimizer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptiveVariant {
    Adagrad,
    Adam,
    Yogi,
}

fn default_server_lr() -> f64 {
    1.0
}
fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}
fn default_tau() -> f64 {
    1e-3
}
fn default_async_alpha() -> f64 {
    0.9
}
fn default_staleness_exponent() -> f64 {
    0.5
}
fn default_buffer_size() -> usize {
    3
}

/// Server optimizer knobs. Missing fields take their defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatorHyper {
    #[serde(default = "default_server_lr")]
    pub server_lr: f64,
    #[serde(default = "default_momentum")]
    pub server_momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_tau")]
    pub adaptivity: f64,
    #[serde(default = "default_async_alpha")]
    pub async_alpha: f64,
    #[serde(default = "default_staleness_exponent")]
    pub staleness_exponent: f64,
    #[serde(default = "default_buffer_size")]
    pub buffer_size: usize,
}

impl Default for AggregatorHyper {
    fn default() -> Self {
        Self {
            server_lr: default_server_lr(),
            server_momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adaptivity: default_tau(),
            async_alpha: default_async_alpha(),
            staleness_exponent: default_staleness_exponent(),
            buffer_size: default_buffer_size(),
        }
    }
}

impl AggregatorHyper {
    /// Returns `(field, message)` for every out-of-range value.
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let unit_open = |x: f64| (0.0..1.0).contains(&x);
        if !(self.server_lr.is_finite() && self.server_lr > 0.0) {
            out.push(("server_lr", "must be positive".to_string()));
        }
        if !unit_open(self.server_momentum) {
            out.push(("server_momentum", "must be in [0, 1)".to_string()));
        }
        if !unit_open(self.beta1) {
            out.push(("beta1", "must be in [0, 1)".to_string()));
        }
        if !unit_open(self.beta2) {
            out.push(("beta2", "must be in [0, 1)".to_string()));
        }
        if !(self.adaptivity.is_finite() && self.adaptivity > 0.0) {
            out.push(("adaptivity", "must be positive".to_string()));
        }
        if !(self.async_alpha > 0.0 && self.async_alpha <= 1.0) {
            out.push(("async_alpha", "must be in (0, 1]".to_string()));
        }
        if !(self.staleness_exponent.is_finite() && self.staleness_exponent >= 0.0) {
            out.push(("staleness_exponent", "must be non-negative".to_string()));
        }
        if self.buffer_size == 0 {
            out.push(("buffer_size", "must be at least 1".to_string()));
        }
        out
    }
}

/// A client's locally trained weights for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate<T: Scalar> {
    pub endpoint_id: String,
    /// Global round whose model the client started from.
    pub base_round: u64,
    pub weights: Parameters<T>,
    pub sample_count: u64,
    pub metrics: TrainingMetrics,
}

/// A FedBuff entry: the delta is taken against the global model at the time
/// the update was buffered.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferedDelta<T: Scalar> {
    pub endpoint_id: String,
    pub base_round: u64,
    pub staleness: u64,
    pub delta: Parameters<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorState<T: Scalar> {
    pub algorithm: Algorithm,
    pub global_model: Parameters<T>,
    pub round: u64,
    pub momentum: Option<Parameters<T>>,
    pub second_moment: Option<Parameters<T>>,
    pub buffer: Vec<BufferedDelta<T>>,
    pub hyper: AggregatorHyper,
}

impl<T: Scalar> AggregatorState<T> {
    pub fn new(algorithm: Algorithm, global_model: Parameters<T>, hyper: AggregatorHyper) -> Self {
        Self {
            algorithm,
            global_model,
            round: 0,
            momentum: None,
            second_moment: None,
            buffer: Vec::new(),
            hyper,
        }
    }

    fn advanced(&self, global_model: Parameters<T>) -> Result<Self, AggregationError> {
        global_model
            .ensure_finite()
            .map_err(|_| AggregationError::NonFiniteResult)?;
        Ok(Self {
            global_model,
            round: self.round + 1,
            ..self.clone()
        })
    }

    /// Staleness of an update trained from `base_round`.
    pub fn staleness(&self, base_round: u64) -> Result<u64, AggregationError> {
        self.round
            .checked_sub(base_round)
            .ok_or(AggregationError::NegativeStaleness {
                base_round,
                round: self.round,
            })
    }
}

fn check_updates<T: Scalar>(
    state: &AggregatorState<T>,
    updates: &[ClientUpdate<T>],
) -> Result<(), AggregationError> {
    if updates.is_empty() {
        return Err(AggregationError::EmptyUpdateSet);
    }
    for u in updates {
        if u.sample_count == 0 {
            return Err(AggregationError::ZeroSamples {
                endpoint_id: u.endpoint_id.clone(),
            });
        }
        if !u.weights.same_layout(&state.global_model) {
            return Err(ParamsError::LayoutMismatch.into());
        }
        u.weights.ensure_finite()?;
        state.staleness(u.base_round)?;
    }
    Ok(())
}

fn sample_weights<T: Scalar>(updates: &[ClientUpdate<T>]) -> Vec<T> {
    updates
        .iter()
        .map(|u| T::from_u64(u.sample_count).expect("sample count fits the float type"))
        .collect()
}

/// Sample-count weighted mean of `(client weights − global)`.
pub fn pseudo_gradient<T: Scalar>(
    state: &AggregatorState<T>,
    updates: &[ClientUpdate<T>],
) -> Result<Parameters<T>, AggregationError> {
    check_updates(state, updates)?;
    let deltas = updates
        .iter()
        .map(|u| u.weights.sub(&state.global_model))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<_> = deltas.iter().collect();
    Ok(weighted_mean(&refs, &sample_weights(updates))?)
}

pub fn step_fedavg<T: Scalar>(
    state: &AggregatorState<T>,
    updates: &[ClientUpdate<T>],
) -> Result<AggregatorState<T>, AggregationError> {
    check_updates(state, updates)?;
    let refs: Vec<_> = updates.iter().map(|u| &u.weights).collect();
    let global = weighted_mean(&refs, &sample_weights(updates))?;
    state.advanced(global)
}

pub fn step_fedavgm<T: Scalar>(
    state: &AggregatorState<T>,
    updates: &[ClientUpdate<T>],
) -> Result<AggregatorState<T>, AggregationError> {
    let delta = pseudo_gradient(state, updates)?;
    let beta = T::of(state.hyper.server_momentum);
    let eta = T::of(state.hyper.server_lr);
    let momentum = match &state.momentum {
        Some(m) => m.zip_map(&delta, |m, d| beta * m + d)?,
        None => delta,
    };
    let global = state.global_model.axpy(eta, &momentum)?;
    let mut next = state.advanced(global)?;
    next.momentum = Some(momentum);
    Ok(next)
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub fn step_fedadaptive<T: Scalar>(
    state: &AggregatorState<T>,
    updates: &[ClientUpdate<T>],
    variant: AdaptiveVariant,
) -> Result<AggregatorState<T>, AggregationError> {
    let delta = pseudo_gradient(state, updates)?;
    let h = &state.hyper;
    let (beta1, beta2) = (T::of(h.beta1), T::of(h.beta2));
    let (eta, tau) = (T::of(h.server_lr), T::of(h.adaptivity));
    let one = T::one();

    let m_prev = state
        .momentum
        .clone()
        .unwrap_or_else(|| Parameters::zeros(delta.layout().clone()));
    let v_prev = state
        .second_moment
        .clone()
        .unwrap_or_else(|| Parameters::filled(delta.layout().clone(), tau * tau));

    let m = m_prev.zip_map(&delta, |m, d| beta1 * m + (one - beta1) * d)?;
    let v = match variant {
        AdaptiveVariant::Adagrad => v_prev.zip_map(&delta, |v, d| v + d * d)?,
        AdaptiveVariant::Adam => {
            v_prev.zip_map(&delta, |v, d| beta2 * v + (one - beta2) * d * d)?
        }
        AdaptiveVariant::Yogi => v_prev.zip_map(&delta, |v, d| {
            let d2 = d * d;
            v - (one - beta2) * d2 * sign(v - d2)
        })?,
    };
    let step = m.zip_map(&v, |m, v| eta * m / (v.sqrt() + tau))?;
    let global = state.global_model.add(&step)?;
    let mut next = state.advanced(global)?;
    next.momentum = Some(m);
    next.second_moment = Some(v);
    Ok(next)
}

/// Polynomial staleness discount `α (s + 1)^(−a)`.
pub fn staleness_weight(hyper: &AggregatorHyper, staleness: u64) -> f64 {
    hyper.async_alpha * ((staleness + 1) as f64).powf(-hyper.staleness_exponent)
}

pub fn step_fedasync<T: Scalar>(
    state: &AggregatorState<T>,
    update: &ClientUpdate<T>,
) -> Result<AggregatorState<T>, AggregationError> {
    check_updates(state, std::slice::from_ref(update))?;
    let s = state.staleness(update.base_round)?;
    let alpha = T::of(staleness_weight(&state.hyper, s));
    let keep = T::one() - alpha;
    let global = state
        .global_model
        .zip_map(&update.weights, |g, w| keep * g + alpha * w)?;
    state.advanced(global)
}

/// Buffers one update; applies the buffer once it holds `buffer_size`
/// entries. Returns whether the global model was updated.
pub fn step_fedbuff<T: Scalar>(
    state: &AggregatorState<T>,
    update: &ClientUpdate<T>,
) -> Result<(AggregatorState<T>, bool), AggregationError> {
    check_updates(state, std::slice::from_ref(update))?;
    let staleness = state.staleness(update.base_round)?;
    let mut next = state.clone();
    next.buffer.push(BufferedDelta {
        endpoint_id: update.endpoint_id.clone(),
        base_round: update.base_round,
        staleness,
        delta: update.weights.sub(&state.global_model)?,
    });
    if next.buffer.len() < state.hyper.buffer_size.max(1) {
        return Ok((next, false));
    }
    let deltas: Vec<_> = next.buffer.iter().map(|b| &b.delta).collect();
    let ones = vec![T::one(); deltas.len()];
    let mean = weighted_mean(&deltas, &ones)?;
    let global = state
        .global_model
        .axpy(T::of(state.hyper.server_lr), &mean)?;
    let mut emitted = next.advanced(global)?;
    emitted.buffer.clear();
    Ok((emitted, true))
}

/// Dispatches to the step function matching `state.algorithm`.
pub fn aggregate<T: Scalar>(
    state: &AggregatorState<T>,
    updates: &[ClientUpdate<T>],
) -> Result<AggregatorState<T>, AggregationError> {
    let algorithm = state.algorithm;
    if algorithm.is_async() {
        let [update] = updates else {
            return Err(AggregationError::AlgorithmArityMismatch {
                algorithm,
                expected: "exactly 1",
                got: updates.len(),
            });
        };
        return match algorithm {
            Algorithm::FedAsync => step_fedasync(state, update),
            _ => step_fedbuff(state, update).map(|(s, _)| s),
        };
    }
    if updates.is_empty() {
        return Err(AggregationError::AlgorithmArityMismatch {
            algorithm,
            expected: "at least 1",
            got: 0,
        });
    }
    match algorithm {
        Algorithm::FedAvg => step_fedavg(state, updates),
        Algorithm::FedAvgM => step_fedavgm(state, updates),
        Algorithm::FedAdagrad => step_fedadaptive(state, updates, AdaptiveVariant::Adagrad),
        Algorithm::FedAdam => step_fedadaptive(state, updates, AdaptiveVariant::Adam),
        Algorithm::FedYogi => step_fedadaptive(state, updates, AdaptiveVariant::Yogi),
        Algorithm::FedAsync | Algorithm::FedBuff => unreachable!("handled above"),
    }
}
