//! The occupancy CTMC.
//!
//! `X_j -> X_j + 1` at rate `lambda_j` while `X_j < K` (arrivals to a full lot
//! are lost) and `X_j -> X_j - 1` at rate `p_j(X)`, the proportional-fair power
//! of lot `j`. Charging requirements are Exp(1) and shared equally within a
//! lot, so the lot-level departure rate is its allocated power.

mod simulation;
mod stationary;

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::allocator::{AllocationError, Allocator, StateVector};
use crate::powerflow::NetworkConfig;

pub use simulation::{simulate, SimulationConfig, SimulationResult};
pub use stationary::{
    exact_metrics, stationary_distribution, stationary_from_table, StationaryDistribution, MAX_STATES,
    RESIDUAL_TOL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("invalid arrival specification: {0}")]
    InvalidArrivals(String),
    #[error("invalid simulation configuration: {0}")]
    InvalidSimulation(String),
    #[error("allocation failed in state {state}: {source}")]
    Allocation {
        state: StateVector,
        #[source]
        source: AllocationError,
    },
    #[error("state space has {states} states, limit is {limit}")]
    StateSpaceTooLarge { states: u128, limit: u128 },
    #[error("stationary solver did not converge (residual {residual:.3e})")]
    SolverDiverged { residual: f64 },
    #[error("{what} covers {got} lots, network has {expected}")]
    LotCount { what: &'static str, expected: usize, got: usize },
}

/// Poisson arrival rates per lot.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalSpec {
    rates: Vec<f64>,
}

impl ArrivalSpec {
    pub fn from_rates(rates: Vec<f64>) -> Result<Self, MarkovError> {
        if rates.is_empty() {
            return Err(MarkovError::InvalidArrivals("no lots".into()));
        }
        if let Some(bad) = rates.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(MarkovError::InvalidArrivals(format!("rate {bad} is not a nonnegative number")));
        }
        Ok(Self { rates })
    }

    /// Same rate at every lot.
    pub fn uniform(n: usize, rate: f64) -> Result<Self, MarkovError> {
        Self::from_rates(vec![rate; n])
    }

    /// `lambda_j = f_j * total`; the fractions must sum to one within 1e-12.
    pub fn from_total(total: f64, fractions: &[f64]) -> Result<Self, MarkovError> {
        if !(total.is_finite() && total >= 0.0) {
            return Err(MarkovError::InvalidArrivals(format!("total rate {total} is not a nonnegative number")));
        }
        if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(MarkovError::InvalidArrivals("fractions must be nonnegative".into()));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(MarkovError::InvalidArrivals(format!("fractions sum to {sum}, not 1")));
        }
        Self::from_rates(fractions.iter().map(|f| f * total).collect())
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn total(&self) -> f64 {
        self.rates.iter().sum()
    }

    pub fn n_lots(&self) -> usize {
        self.rates.len()
    }

    pub(crate) fn check_against(&self, cfg: &NetworkConfig) -> Result<(), MarkovError> {
        if self.rates.len() != cfg.n_stations() {
            return Err(MarkovError::LotCount {
                what: "arrival specification",
                expected: cfg.n_stations(),
                got: self.rates.len(),
            });
        }
        Ok(())
    }
}

/// A point estimate with the half-width of its 95% confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub half_width: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, half_width: 0.0 }
    }
}

impl fmt::Display for Estimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.7} ± {:.3e}", self.value, self.half_width)
    }
}

/// Per-lot performance measures.
#[derive(Debug, Clone, PartialEq)]
pub struct LotMetrics {
    pub mean_number: Estimate,
    /// `None` when no EV was accepted (or the accepted rate is zero).
    pub mean_charging_time: Option<Estimate>,
    pub blocking: Estimate,
}

/// Mixed-radix enumeration of `{0..=K}^N`, lot 1 most significant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateSpace {
    n_lots: usize,
    capacity: u32,
    size: usize,
}

impl StateSpace {
    pub fn new(cfg: &NetworkConfig) -> Result<Self, MarkovError> {
        Self::with_limit(cfg, MAX_STATES)
    }

    pub(crate) fn with_limit(cfg: &NetworkConfig, limit: u128) -> Result<Self, MarkovError> {
        let base = u128::from(cfg.capacity()) + 1;
        let states = (0..cfg.n_stations()).try_fold(1u128, |acc, _| acc.checked_mul(base)).unwrap_or(u128::MAX);
        if states > limit {
            return Err(MarkovError::StateSpaceTooLarge { states, limit });
        }
        Ok(Self { n_lots: cfg.n_stations(), capacity: cfg.capacity(), size: states as usize })
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn n_lots(&self) -> usize {
        self.n_lots
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    /// Index step caused by one more EV at `lot` (0-based).
    pub fn stride(&self, lot: usize) -> usize {
        (self.capacity as usize + 1).pow((self.n_lots - 1 - lot) as u32)
    }

    pub fn index(&self, counts: &[u32]) -> usize {
        counts.iter().fold(0, |acc, &c| acc * (self.capacity as usize + 1) + c as usize)
    }

    pub fn counts(&self, mut index: usize) -> Vec<u32> {
        let base = self.capacity as usize + 1;
        let mut counts = vec![0; self.n_lots];
        for slot in counts.iter_mut().rev() {
            *slot = (index % base) as u32;
            index /= base;
        }
        counts
    }
}

/// Allocations for every state of a [`StateSpace`], row-major by state index.
#[derive(Debug, Clone)]
pub struct AllocationTable {
    space: StateSpace,
    power: Vec<f64>,
}

impl AllocationTable {
    /// Solves every state in parallel; the result does not depend on scheduling.
    pub fn build(allocator: &Allocator) -> Result<Self, MarkovError> {
        let space = StateSpace::new(allocator.config())?;
        let rows: Vec<Vec<f64>> = (0..space.len())
            .into_par_iter()
            .map(|i| {
                let state = StateVector::from_counts(space.counts(i));
                allocator
                    .allocate(&state)
                    .map(|p| p.into_inner())
                    .map_err(|source| MarkovError::Allocation { state, source })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { space, power: rows.concat() })
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn power(&self, index: usize) -> &[f64] {
        let n = self.space.n_lots();
        &self.power[index * n..(index + 1) * n]
    }
}

/// Outgoing transitions of `x` with their rates; zero-rate transitions are omitted.
pub fn transition_rates(
    x: &StateVector,
    arrivals: &ArrivalSpec,
    allocator: &Allocator,
) -> Result<Vec<(StateVector, f64)>, MarkovError> {
    let cfg = allocator.config();
    arrivals.check_against(cfg)?;
    let power = allocator
        .allocate(x)
        .map_err(|source| MarkovError::Allocation { state: x.clone(), source })?;
    let counts = x.counts();
    let mut out = Vec::with_capacity(2 * counts.len());
    for (j, &lambda) in arrivals.rates().iter().enumerate() {
        if counts[j] < cfg.capacity() && lambda > 0.0 {
            let mut next = counts.to_vec();
            next[j] += 1;
            out.push((StateVector::from_counts(next), lambda));
        }
    }
    for (j, &p) in power.iter().enumerate() {
        if counts[j] > 0 && p > 0.0 {
            let mut next = counts.to_vec();
            next[j] -= 1;
            out.push((StateVector::from_counts(next), p));
        }
    }
    Ok(out)
}
