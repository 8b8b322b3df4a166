//! Proportional-fair power allocation.
//!
//! For an occupancy state `X` the allocation maximizes `sum_j X_j log(p_j / X_j)`
//! over the feasible set of the configured power-flow model. Empty lots get no
//! power. The objective is strictly increasing in every occupied coordinate, so
//! the voltage constraint is always active at the optimum.
//!
//! Linearized Distflow has a single linear constraint `sum_k c_k p_k <= B` with
//! `c_k = 2 r k`, and the optimum is `p_k = (X_k / sum X) * B / c_k`.
//!
//! Distflow is solved numerically: Newton's method on the KKT system
//! `X_j / p_j = mu * dV_0/dp_j`, `V_0(p) = 1 / (1 - delta)`, warm-started from the
//! linearized optimum rescaled onto the Distflow boundary. Every iterate is
//! rescaled onto the boundary, so only its direction is actually searched.

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::RwLock;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::powerflow::{
    distflow_voltages, root_voltage_derivatives, scale_to_boundary, AllocationVector, NetworkConfig,
    PowerFlowError, PowerFlowModel,
};

/// Stop once every KKT stationarity residual is below this (relative) value.
pub const KKT_TOL: f64 = 1e-12;
/// Relative objective change that stops the Distflow solver when the KKT
/// residual is already small.
pub const OBJECTIVE_TOL: f64 = 1e-10;
/// Maximum constraint gap `|V_0 - 1/(1-delta)|` accepted from the Distflow solver.
pub const ACTIVITY_TOL: f64 = 1e-9;
pub const MAX_ITERATIONS: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocationError {
    #[error("state has {got} lots, network has {expected}")]
    StateLength { expected: usize, got: usize },
    #[error("lot {lot} holds {count} EVs, capacity is {capacity}")]
    OverCapacity { lot: usize, count: u32, capacity: u32 },
    #[error("objective undefined: lot {lot} is occupied but receives power {power}")]
    ObjectiveUndefined { lot: usize, power: f64 },
    #[error("{0} requires a {1} network configuration")]
    WrongModel(&'static str, PowerFlowModel),
    #[error("boundary oracle supports 2 or 3 lots, got {0}")]
    OracleDimension(usize),
    #[error("boundary oracle needs at least one occupied lot")]
    OracleEmptyState,
    #[error(
        "distflow solver did not converge after {iterations} iterations \
         (kkt residual {kkt_residual:.3e}, constraint gap {constraint_gap:.3e})"
    )]
    SolverFailed {
        best: AllocationVector,
        iterations: usize,
        kkt_residual: f64,
        constraint_gap: f64,
    },
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
}

/// Number of EVs present at each lot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateVector(Vec<u32>);

impl StateVector {
    /// Checks `0 <= X_j <= K` and the lot count against `cfg`.
    pub fn new(counts: Vec<u32>, cfg: &NetworkConfig) -> Result<Self, AllocationError> {
        if counts.len() != cfg.n_stations() {
            return Err(AllocationError::StateLength { expected: cfg.n_stations(), got: counts.len() });
        }
        for (lot, &count) in counts.iter().enumerate() {
            if count > cfg.capacity() {
                return Err(AllocationError::OverCapacity { lot: lot + 1, count, capacity: cfg.capacity() });
            }
        }
        Ok(Self(counts))
    }

    pub fn empty(n: usize) -> Self {
        Self(vec![0; n])
    }

    /// Builds a state without a capacity check; used for internal state enumeration.
    pub(crate) fn from_counts(counts: Vec<u32>) -> Self {
        Self(counts)
    }

    pub fn counts(&self) -> &[u32] {
        &self.0
    }

    pub fn total(&self) -> u64 {
        self.0.iter().map(|&c| u64::from(c)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }

    /// The state divided by the gcd of its entries; allocations only depend on this.
    pub fn reduced(&self) -> StateVector {
        let g = self.0.iter().fold(0u32, |acc, &c| gcd(acc, c));
        if g <= 1 {
            return self.clone();
        }
        StateVector(self.0.iter().map(|&c| c / g).collect())
    }
}

impl fmt::Display for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `sum_j X_j log(p_j / X_j)`; empty lots contribute nothing.
pub fn pf_objective(x: &StateVector, p: &[f64]) -> Result<f64, AllocationError> {
    if p.len() != x.counts().len() {
        return Err(AllocationError::StateLength { expected: x.counts().len(), got: p.len() });
    }
    let mut total = 0.0;
    for (lot, (&count, &power)) in x.counts().iter().zip(p).enumerate() {
        if count == 0 {
            continue;
        }
        if !(power > 0.0) {
            return Err(AllocationError::ObjectiveUndefined { lot: lot + 1, power });
        }
        let count = f64::from(count);
        total += count * (power / count).ln();
    }
    Ok(total)
}

fn objective_raw(counts: &[u32], p: &[f64]) -> f64 {
    counts
        .iter()
        .zip(p)
        .filter(|(&c, _)| c > 0)
        .map(|(&c, &pk)| {
            let c = f64::from(c);
            c * (pk / c).ln()
        })
        .sum()
}

fn check_state(x: &StateVector, cfg: &NetworkConfig) -> Result<(), AllocationError> {
    StateVector::new(x.counts().to_vec(), cfg).map(|_| ())
}

fn ld_closed_form(counts: &[u32], cfg: &NetworkConfig) -> Vec<f64> {
    let total: f64 = counts.iter().map(|&c| f64::from(c)).sum();
    if total == 0.0 {
        return vec![0.0; counts.len()];
    }
    let budget = cfg.ld_budget();
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| if c == 0 { 0.0 } else { f64::from(c) / total * budget / cfg.ld_coefficient(k + 1) })
        .collect()
}

/// Closed-form proportional-fair allocation under Linearized Distflow.
pub fn allocate_ld(x: &StateVector, cfg: &NetworkConfig) -> Result<AllocationVector, AllocationError> {
    if cfg.model() != PowerFlowModel::LinearizedDistflow {
        return Err(AllocationError::WrongModel("allocate_ld", PowerFlowModel::LinearizedDistflow));
    }
    check_state(x, cfg)?;
    Ok(AllocationVector::new(ld_closed_form(x.reduced().counts(), cfg))?)
}

/// Proportional-fair allocation under Distflow.
pub fn allocate_distflow(x: &StateVector, cfg: &NetworkConfig) -> Result<AllocationVector, AllocationError> {
    if cfg.model() != PowerFlowModel::Distflow {
        return Err(AllocationError::WrongModel("allocate_distflow", PowerFlowModel::Distflow));
    }
    check_state(x, cfg)?;
    // The optimum depends only on the gcd-reduced state.
    let reduced = x.reduced();
    DistflowSolver::new(reduced.counts(), cfg).solve()
}

/// Dispatches on `cfg.model()`.
pub fn allocate(x: &StateVector, cfg: &NetworkConfig) -> Result<AllocationVector, AllocationError> {
    match cfg.model() {
        PowerFlowModel::LinearizedDistflow => allocate_ld(x, cfg),
        PowerFlowModel::Distflow => allocate_distflow(x, cfg),
    }
}

struct DistflowSolver<'a> {
    counts: &'a [u32],
    support: Vec<usize>,
    cfg: &'a NetworkConfig,
}

struct Iterate {
    p: Vec<f64>,
    objective: f64,
    kkt: f64,
    mu: f64,
    root: f64,
    grad: Vec<f64>,
    hess: Vec<Vec<f64>>,
}

impl<'a> DistflowSolver<'a> {
    fn new(counts: &'a [u32], cfg: &'a NetworkConfig) -> Self {
        let support = counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(j, _)| j).collect();
        Self { counts, support, cfg }
    }

    fn project(&self, direction: &[f64]) -> Result<Vec<f64>, PowerFlowError> {
        let t = scale_to_boundary(direction, self.cfg)?;
        Ok(direction.iter().map(|d| t * d).collect())
    }

    fn evaluate(&self, p: Vec<f64>) -> Result<Iterate, PowerFlowError> {
        let (root, grad, hess) = root_voltage_derivatives(&p, self.cfg.resistance())?;
        let (mut num, mut den) = (0.0, 0.0);
        for &j in &self.support {
            let a = f64::from(self.counts[j]) / p[j];
            num += a * grad[j];
            den += grad[j] * grad[j];
        }
        let mu = num / den;
        let kkt = self
            .support
            .iter()
            .map(|&j| {
                let a = f64::from(self.counts[j]) / p[j];
                ((a - mu * grad[j]) / a).abs()
            })
            .fold(0.0, f64::max);
        let objective = objective_raw(self.counts, &p);
        Ok(Iterate { p, objective, kkt, mu, root, grad, hess })
    }

    fn newton_direction(&self, it: &Iterate) -> Option<Vec<f64>> {
        let m = self.support.len();
        let bound = self.cfg.max_root_voltage();
        let mut mat = DMatrix::<f64>::zeros(m + 1, m + 1);
        let mut rhs = DVector::<f64>::zeros(m + 1);
        for (a, &i) in self.support.iter().enumerate() {
            let xi = f64::from(self.counts[i]);
            for (b, &k) in self.support.iter().enumerate() {
                mat[(a, b)] = -it.mu * it.hess[i][k];
            }
            mat[(a, a)] -= xi / (it.p[i] * it.p[i]);
            mat[(a, m)] = -it.grad[i];
            mat[(m, a)] = it.grad[i];
            rhs[a] = -(xi / it.p[i] - it.mu * it.grad[i]);
        }
        rhs[m] = -(it.root - bound);
        let step = mat.lu().solve(&rhs)?;
        let mut dp = vec![0.0; it.p.len()];
        for (a, &i) in self.support.iter().enumerate() {
            dp[i] = step[a];
        }
        dp.iter().all(|d| d.is_finite()).then_some(dp)
    }

    /// `p_j <- X_j / (mu dV_0/dp_j)`, the stationarity condition solved for `p`.
    fn fixed_point_direction(&self, it: &Iterate) -> Vec<f64> {
        let mut next = vec![0.0; it.p.len()];
        for &j in &self.support {
            next[j] = f64::from(self.counts[j]) / (it.mu * it.grad[j]);
        }
        next
    }

    fn try_direction(&self, it: &Iterate, dp: &[f64]) -> Result<Option<Iterate>, PowerFlowError> {
        // Keep every occupied coordinate at least half its current value.
        let mut alpha: f64 = 1.0;
        for &j in &self.support {
            if dp[j] < 0.0 {
                alpha = alpha.min(0.5 * it.p[j] / -dp[j]);
            }
        }
        for _ in 0..40 {
            let trial: Vec<f64> = it.p.iter().zip(dp).map(|(p, d)| p + alpha * d).collect();
            let cand = self.evaluate(self.project(&trial)?)?;
            if cand.kkt < it.kkt || cand.objective > it.objective {
                return Ok(Some(cand));
            }
            alpha *= 0.5;
        }
        Ok(None)
    }

    fn solve(&self) -> Result<AllocationVector, AllocationError> {
        let n = self.counts.len();
        match self.support.len() {
            0 => return Ok(AllocationVector::zeros(n)),
            1 => {
                let mut axis = vec![0.0; n];
                axis[self.support[0]] = 1.0;
                return Ok(AllocationVector::new(self.project(&axis)?)?);
            }
            _ => {}
        }

        let start = ld_closed_form(self.counts, self.cfg);
        let mut it = self.evaluate(self.project(&start)?)?;
        let mut iterations = 0;
        while iterations < MAX_ITERATIONS && it.kkt > KKT_TOL {
            iterations += 1;
            let next = match self.newton_direction(&it) {
                Some(dp) => self.try_direction(&it, &dp)?,
                None => None,
            };
            let next = match next {
                Some(next) => Some(next),
                None => {
                    let target = self.fixed_point_direction(&it);
                    let dp: Vec<f64> = target.iter().zip(&it.p).map(|(t, p)| t - p).collect();
                    self.try_direction(&it, &dp)?
                }
            };
            let Some(next) = next else { break };
            let change = (next.objective - it.objective).abs() / it.objective.abs().max(1.0);
            it = next;
            if change <= OBJECTIVE_TOL && it.kkt <= 1e-6 {
                break;
            }
        }

        let gap = it.root - self.cfg.max_root_voltage();
        if it.kkt <= 1e-6 && gap.abs() <= ACTIVITY_TOL {
            Ok(AllocationVector::new(it.p)?)
        } else {
            Err(AllocationError::SolverFailed {
                best: AllocationVector::new(it.p)?,
                iterations,
                kkt_residual: it.kkt,
                constraint_gap: gap,
            })
        }
    }
}

/// Brute-force optimum over boundary points.
///
/// Directions in the nonnegative orthant, restricted to occupied lots, are
/// enumerated on an angular grid with `angular_resolution` steps per angle and
/// mapped onto the constraint boundary with [`scale_to_boundary`]. The grid is
/// then re-laid over the neighbourhood of the best cell, repeatedly, until the
/// cell width drops below `1e-12` radians.
pub fn oracle_boundary_allocate(
    x: &StateVector,
    cfg: &NetworkConfig,
    angular_resolution: usize,
) -> Result<AllocationVector, AllocationError> {
    let n = cfg.n_stations();
    if !(2..=3).contains(&n) {
        return Err(AllocationError::OracleDimension(n));
    }
    check_state(x, cfg)?;
    let support: Vec<usize> =
        x.counts().iter().enumerate().filter(|(_, &c)| c > 0).map(|(j, _)| j).collect();
    let res = angular_resolution.max(2);
    let counts = x.counts();

    let boundary_point = |unit: &[f64]| -> Result<(f64, Vec<f64>), PowerFlowError> {
        let mut direction = vec![0.0; n];
        for (&j, &u) in support.iter().zip(unit) {
            direction[j] = u;
        }
        let t = scale_to_boundary(&direction, cfg)?;
        let p: Vec<f64> = direction.iter().map(|d| t * d).collect();
        Ok((objective_raw(counts, &p), p))
    };

    let best = match support.len() {
        0 => return Err(AllocationError::OracleEmptyState),
        1 => boundary_point(&[1.0])?.1,
        2 => {
            let (mut lo, mut hi) = (0.0, FRAC_PI_2);
            let mut best = (f64::NEG_INFINITY, Vec::new(), 0.0);
            while hi - lo > 1e-12 {
                let step = (hi - lo) / res as f64;
                for i in 0..=res {
                    let theta = lo + step * i as f64;
                    if theta <= 0.0 || theta >= FRAC_PI_2 {
                        continue;
                    }
                    let (obj, p) = boundary_point(&[theta.cos(), theta.sin()])?;
                    if obj > best.0 {
                        best = (obj, p, theta);
                    }
                }
                lo = (best.2 - step).max(0.0);
                hi = (best.2 + step).min(FRAC_PI_2);
            }
            best.1
        }
        _ => {
            let (mut t_lo, mut t_hi) = (0.0, FRAC_PI_2);
            let (mut f_lo, mut f_hi) = (0.0, FRAC_PI_2);
            let mut best = (f64::NEG_INFINITY, Vec::new(), 0.0, 0.0);
            while (t_hi - t_lo).max(f_hi - f_lo) > 1e-12 {
                let t_step = (t_hi - t_lo) / res as f64;
                let f_step = (f_hi - f_lo) / res as f64;
                for i in 0..=res {
                    let theta = t_lo + t_step * i as f64;
                    if theta <= 0.0 || theta >= FRAC_PI_2 {
                        continue;
                    }
                    for k in 0..=res {
                        let phi = f_lo + f_step * k as f64;
                        if phi <= 0.0 || phi >= FRAC_PI_2 {
                            continue;
                        }
                        let unit = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
                        let (obj, p) = boundary_point(&unit)?;
                        if obj > best.0 {
                            best = (obj, p, theta, phi);
                        }
                    }
                }
                t_lo = (best.2 - t_step).max(0.0);
                t_hi = (best.2 + t_step).min(FRAC_PI_2);
                f_lo = (best.3 - f_step).max(0.0);
                f_hi = (best.3 + f_step).min(FRAC_PI_2);
            }
            best.1
        }
    };
    Ok(AllocationVector::new(best)?)
}

/// Memoizing allocator for a fixed network.
///
/// Results are keyed by the gcd-reduced state, which has the same optimum as
/// the original. Concurrent callers may race to fill an entry; the solvers are
/// deterministic, so whichever insert lands first is identical to the others.
#[derive(Debug)]
pub struct Allocator {
    cfg: NetworkConfig,
    cache: RwLock<HashMap<StateVector, AllocationVector>>,
}

impl Allocator {
    pub fn new(cfg: NetworkConfig) -> Self {
        Self { cfg, cache: RwLock::new(HashMap::new()) }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn allocate(&self, x: &StateVector) -> Result<AllocationVector, AllocationError> {
        check_state(x, &self.cfg)?;
        let key = x.reduced();
        if let Some(hit) = self.cache.read().expect("allocation cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let computed = allocate(&key, &self.cfg)?;
        let mut cache = self.cache.write().expect("allocation cache poisoned");
        Ok(cache.entry(key).or_insert(computed).clone())
    }

    pub fn cached_states(&self) -> usize {
        self.cache.read().expect("allocation cache poisoned").len()
    }
}

/// Root voltage of a raw allocation, for diagnostics in tests and experiments.
pub fn root_voltage(p: &[f64], cfg: &NetworkConfig) -> Result<f64, PowerFlowError> {
    Ok(distflow_voltages(p, cfg.resistance())?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powerflow::{ld_lhs_raw, FEASIBILITY_TOL};
    use approx::assert_abs_diff_eq;

    fn cfg(n: usize, model: PowerFlowModel) -> NetworkConfig {
        NetworkConfig::new(n, 0.1, 0.05, 100, model).unwrap()
    }

    fn state(c: &[u32]) -> StateVector {
        StateVector::from_counts(c.to_vec())
    }

    const B: f64 = 0.05 * 1.95 / (0.95 * 0.95);

    #[test]
    fn objective_examples() {
        assert_eq!(pf_objective(&state(&[1]), &[1.0]).unwrap(), 0.0);
        assert_eq!(pf_objective(&state(&[2]), &[2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(pf_objective(&state(&[1, 0]), &[0.5, 0.0]).unwrap(), 0.5f64.ln(), epsilon = 1e-15);
        assert!(matches!(
            pf_objective(&state(&[1, 1]), &[0.5, 0.0]),
            Err(AllocationError::ObjectiveUndefined { lot: 2, .. })
        ));
    }

    #[test]
    fn state_validation() {
        let c = cfg(2, PowerFlowModel::Distflow);
        assert!(StateVector::new(vec![101, 0], &c).is_err());
        assert!(StateVector::new(vec![1], &c).is_err());
        assert!(StateVector::new(vec![100, 0], &c).is_ok());
    }

    #[test]
    fn reduced_state() {
        assert_eq!(state(&[4, 6]).reduced(), state(&[2, 3]));
        assert_eq!(state(&[0, 6]).reduced(), state(&[0, 1]));
        assert_eq!(state(&[0, 0]).reduced(), state(&[0, 0]));
    }

    #[test]
    fn ld_examples() {
        let c = cfg(2, PowerFlowModel::LinearizedDistflow);
        assert_eq!(allocate_ld(&state(&[0, 0]), &c).unwrap().as_slice(), &[0.0, 0.0]);
        let p = allocate_ld(&state(&[1, 1]), &c).unwrap();
        // Stationarity: X_k / p_k = mu * 2 r k with the budget spent: p_k = B / (2 * 2 r k).
        assert_abs_diff_eq!(p[0], B / 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], B / 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.2700831, epsilon = 1e-7);
        assert_abs_diff_eq!(p[1], 0.1350415, epsilon = 1e-7);
        assert_abs_diff_eq!(ld_lhs_raw(&p, 0.1), 0.1080332, epsilon = 1e-7);
        let p = allocate_ld(&state(&[2, 0]), &c).unwrap();
        assert_abs_diff_eq!(p[0], 0.5401662, epsilon = 1e-7);
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn wrong_model_rejected() {
        let c = cfg(2, PowerFlowModel::Distflow);
        assert!(matches!(allocate_ld(&state(&[1, 1]), &c), Err(AllocationError::WrongModel(..))));
        let c = cfg(2, PowerFlowModel::LinearizedDistflow);
        assert!(matches!(allocate_distflow(&state(&[1, 1]), &c), Err(AllocationError::WrongModel(..))));
    }

    #[test]
    fn distflow_axis_examples() {
        let c = cfg(2, PowerFlowModel::Distflow);
        let p = allocate_distflow(&state(&[1, 0]), &c).unwrap();
        assert_abs_diff_eq!(p[0], 0.05 / (0.1 * 0.95), epsilon = 1e-9);
        assert_eq!(p[1], 0.0);
        let p = allocate_distflow(&state(&[0, 1]), &c).unwrap();
        assert_eq!(p[0], 0.0);
        assert_abs_diff_eq!(p[1], 0.05 / (0.2 * 0.95), epsilon = 1e-9);
        assert_eq!(allocate_distflow(&state(&[0, 0]), &c).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn distflow_matches_oracle_two_lots() {
        let c = cfg(2, PowerFlowModel::Distflow);
        let x = state(&[1, 1]);
        let p = allocate_distflow(&x, &c).unwrap();
        let q = oracle_boundary_allocate(&x, &c, 10_000).unwrap();
        let (fp, fq) = (pf_objective(&x, &p).unwrap(), pf_objective(&x, &q).unwrap());
        assert!((fp - fq).abs() <= 1e-6, "solver {fp} oracle {fq}");
        assert!((root_voltage(&p, &c).unwrap() - c.max_root_voltage()).abs() <= 1e-7);
    }

    #[test]
    fn oracle_axis_examples() {
        let c = cfg(2, PowerFlowModel::Distflow);
        let p = oracle_boundary_allocate(&state(&[1, 0]), &c, 2).unwrap();
        assert_abs_diff_eq!(p[0], 0.5263158, epsilon = 1e-7);
        let p = oracle_boundary_allocate(&state(&[0, 1]), &c, 2).unwrap();
        assert_abs_diff_eq!(p[1], 0.2631579, epsilon = 1e-7);
    }

    #[test]
    fn oracle_rejects_bad_inputs() {
        let c4 = cfg(4, PowerFlowModel::Distflow);
        assert!(matches!(
            oracle_boundary_allocate(&state(&[1, 1, 1, 1]), &c4, 10),
            Err(AllocationError::OracleDimension(4))
        ));
        let c2 = cfg(2, PowerFlowModel::Distflow);
        assert!(matches!(
            oracle_boundary_allocate(&state(&[0, 0]), &c2, 10),
            Err(AllocationError::OracleEmptyState)
        ));
    }

    #[test]
    fn distflow_three_lots_against_oracle() {
        let c = cfg(3, PowerFlowModel::Distflow);
        for counts in [[1, 1, 1], [5, 1, 2], [0, 3, 7], [9, 0, 1]] {
            let x = state(&counts);
            let p = allocate_distflow(&x, &c).unwrap();
            let q = oracle_boundary_allocate(&x, &c, 60).unwrap();
            let (fp, fq) = (pf_objective(&x, &p).unwrap(), pf_objective(&x, &q).unwrap());
            assert!((fp - fq).abs() <= 1e-6, "{counts:?}: solver {fp} oracle {fq}");
            assert!(fp >= fq - 1e-9, "{counts:?}: oracle beat the solver");
        }
    }

    #[test]
    fn allocator_cache_and_scale_invariance() {
        for model in PowerFlowModel::ALL {
            let alloc = Allocator::new(cfg(2, model));
            let a = alloc.allocate(&state(&[1, 1])).unwrap();
            let b = alloc.allocate(&state(&[2, 2])).unwrap();
            assert_eq!(a, b);
            assert_eq!(alloc.cached_states(), 1);
            let z = alloc.allocate(&state(&[0, 3])).unwrap();
            assert_eq!(z[0], 0.0);
            assert!(alloc.allocate(&state(&[101, 0])).is_err());
        }
        let ld = Allocator::new(cfg(2, PowerFlowModel::LinearizedDistflow));
        let p = ld.allocate(&state(&[1, 1])).unwrap();
        assert_abs_diff_eq!(p[0], 0.2700831, epsilon = 1e-7);
        assert_abs_diff_eq!(p[1], 0.1350415, epsilon = 1e-7);
    }

    #[test]
    fn distflow_scale_invariance_without_cache() {
        let c = cfg(2, PowerFlowModel::Distflow);
        let a = allocate_distflow(&state(&[3, 2]), &c).unwrap();
        let b = allocate_distflow(&state(&[30, 20]), &c).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn distflow_feasible_and_active_on_extreme_states() {
        let c = cfg(2, PowerFlowModel::Distflow);
        for counts in [[1, 100], [100, 1], [100, 100], [1, 99], [37, 64]] {
            let p = allocate_distflow(&state(&counts), &c).unwrap();
            let v0 = root_voltage(&p, &c).unwrap();
            assert!(v0 <= c.max_root_voltage() + FEASIBILITY_TOL);
            assert!((v0 - c.max_root_voltage()).abs() <= 1e-7, "{counts:?}: V0 {v0}");
        }
    }
}
