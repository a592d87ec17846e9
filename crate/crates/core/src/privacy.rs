//! Local differential privacy: per-example clipping, Gaussian noising and an
//! (ε, δ) accountant with a budget-triggered stop.
//!
//! Each silo owns one [`AccountantState`]. Noise is added inside the silo,
//! before its update is shared.
//!
//! The accountant uses the simplified subsampled-Gaussian Rényi bound
//!
//! ```text
//! ε(T) = min_α  T·α·q²/σ² + ln(1/δ)/(α − 1)
//! ```
//!
//! which is a reasonable upper-bound approximation only while the sampling
//! rate `q` is small and `σ ≥ 1`; outside that regime a warning is logged.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::GradientSet;
use crate::rng::StreamRng;

/// Sampling rates above this are outside the regime where the bound is trusted.
pub const MAX_TRUSTED_SAMPLING_RATE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountantKind {
    #[default]
    RdpBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    /// Per-example L2 clip norm `S`; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    /// Noise standard deviation in units of `S`.
    pub noise_multiplier: f64,
    pub delta: f64,
    /// `f64::INFINITY` means no budget.
    pub epsilon_budget: f64,
    #[serde(default)]
    pub accountant: AccountantKind,
}

impl Default for PrivacySpec {
    fn default() -> Self {
        Self { clip_norm: 12.0, noise_multiplier: 1.4, delta: 1e-5, epsilon_budget: 8.0, accountant: AccountantKind::RdpBound }
    }
}

impl PrivacySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::Privacy(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::Privacy(format!("noise_multiplier must be ≥ 0, got {}", self.noise_multiplier)));
        }
        if self.noise_multiplier > 0.0 && self.clip_norm.is_infinite() {
            return Err(Error::Privacy("noise requires a finite clip_norm".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Privacy(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.epsilon_budget > 0.0) {
            return Err(Error::Privacy(format!("epsilon_budget must be > 0, got {}", self.epsilon_budget)));
        }
        Ok(())
    }

    /// Warnings for parameters outside the regime where the bound is tight.
    pub fn regime_warnings(&self, sampling_rate: f64) -> Vec<String> {
        let mut w = Vec::new();
        if self.noise_multiplier < 1.0 {
            w.push(format!("noise multiplier {} < 1: the Rényi bound is loose here", self.noise_multiplier));
        }
        if sampling_rate > MAX_TRUSTED_SAMPLING_RATE {
            w.push(format!("sampling rate {sampling_rate:.3} is large: the Rényi bound is loose here"));
        }
        w
    }
}

/// Rényi orders the bound is minimized over.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaGrid {
    /// `α ∈ {1.01, 1.02, …, 256.00}`.
    #[default]
    Dense,
    Explicit(Vec<f64>),
}

const DENSE_FIRST: u32 = 101;
const DENSE_LAST: u32 = 25_600;

fn dense_alpha(i: u32) -> f64 {
    f64::from(DENSE_FIRST + i) / 100.0
}

impl AlphaGrid {
    /// A short list of commonly used orders.
    pub fn coarse() -> Self {
        AlphaGrid::Explicit(vec![1.25, 1.5, 2.0, 3.0, 4.0, 8.0, 16.0, 32.0, 64.0])
    }

    /// Minimizes `a·α + b/(α − 1)` over the grid.
    fn minimize(&self, a: f64, b: f64) -> f64 {
        let f = |alpha: f64| a * alpha + b / (alpha - 1.0);
        match self {
            AlphaGrid::Explicit(alphas) => alphas.iter().map(|&al| f(al)).fold(f64::INFINITY, f64::min),
            AlphaGrid::Dense => {
                // f is convex in α, so the grid minimum sits next to the
                // continuous minimizer 1 + sqrt(b/a).
                let last = DENSE_LAST - DENSE_FIRST;
                let centre = if a > 0.0 { 1.0 + (b / a).sqrt() } else { f64::INFINITY };
                let idx = ((centre * 100.0).round() - f64::from(DENSE_FIRST)).clamp(0.0, f64::from(last)) as u32;
                (idx.saturating_sub(2)..=(idx + 2).min(last)).map(|i| f(dense_alpha(i))).fold(f64::INFINITY, f64::min)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    pub steps: u64,
    /// Poisson-style sampling rate `B / n_k`.
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
    pub alpha_grid: AlphaGrid,
}

impl AccountantState {
    pub fn new(sampling_rate: f64, noise_multiplier: f64) -> Self {
        Self { steps: 0, sampling_rate: sampling_rate.clamp(0.0, 1.0), noise_multiplier, alpha_grid: AlphaGrid::Dense }
    }

    pub fn with_grid(mut self, grid: AlphaGrid) -> Self {
        self.alpha_grid = grid;
        self
    }
}

pub fn account_step(state: &AccountantState) -> AccountantState {
    AccountantState { steps: state.steps + 1, ..state.clone() }
}

pub fn epsilon(state: &AccountantState, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Privacy(format!("delta must lie in (0, 1), got {delta}")));
    }
    if state.steps == 0 {
        return Ok(0.0);
    }
    let sigma = state.noise_multiplier;
    if sigma <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let q = state.sampling_rate;
    let a = state.steps as f64 * q * q / (sigma * sigma);
    Ok(state.alpha_grid.minimize(a, (1.0 / delta).ln()))
}

/// True once the spent ε has reached the budget. An infinite budget never runs out.
pub fn budget_exhausted(state: &AccountantState, spec: &PrivacySpec) -> bool {
    if spec.epsilon_budget.is_infinite() {
        return false;
    }
    epsilon(state, spec.delta).map_or(true, |e| e >= spec.epsilon_budget)
}

/// True if one more step would push ε past the budget.
pub fn next_step_exceeds(state: &AccountantState, spec: &PrivacySpec) -> bool {
    if spec.epsilon_budget.is_infinite() {
        return false;
    }
    epsilon(&account_step(state), spec.delta).map_or(true, |e| e > spec.epsilon_budget)
}

/// Scales the gradient so its global L2 norm is at most `clip_norm`.
pub fn clip(gradient: &GradientSet, clip_norm: f64) -> GradientSet {
    let norm = gradient.l2_norm();
    if norm <= clip_norm {
        return gradient.clone();
    }
    let mut out = gradient.clone();
    out.scale(clip_norm / norm);
    out
}

/// Clip each example, sum, add `N(0, (σ·S)²)` per coordinate, divide by the
/// number of examples.
pub fn privatize(per_example: &[GradientSet], spec: &PrivacySpec, rng: &mut StreamRng) -> Result<GradientSet> {
    let first = per_example.first().ok_or_else(|| Error::InvalidInput("no per-example gradients".into()))?;
    let mut sum = clip(first, spec.clip_norm);
    for g in &per_example[1..] {
        sum.add_assign(&clip(g, spec.clip_norm))?;
    }
    if spec.noise_multiplier > 0.0 {
        let noise = Normal::new(0.0, spec.noise_multiplier * spec.clip_norm)
            .map_err(|e| Error::Privacy(e.to_string()))?;
        for v in sum.entries.iter_mut().flat_map(|e| e.data.iter_mut()) {
            *v += noise.sample(rng);
        }
    }
    sum.scale(1.0 / per_example.len() as f64);
    Ok(sum)
}
