//! Voltage computations and feasibility predicates on a line network.
//!
//! Node 0 is the feeder (root) and lots `1..=N` sit on a line behind it, every
//! edge having the same resistance `r` and no reactance. Only active power is
//! consumed, so all voltages, currents and branch powers are real.
//!
//! Two models of the voltage-drop constraint are supported:
//!
//! ```text
//! Distflow:            V_N = 1
//!                      V_{N-1} = 1 + r p_N
//!                      V_{j-1} = 2 V_j - V_{j+1} + r p_j / V_j     (j = N-1 .. 1)
//!                      feasible  <=>  V_0 <= 1 / (1 - delta)
//!
//! Linearized Distflow: 2r * sum_j sum_{k>=j} p_k = sum_k 2 r k p_k
//!                      feasible  <=>  lhs <= delta (2 - delta) / (1 - delta)^2
//! ```
//!
//! Everything is per unit, with the far node's voltage as the unit.

use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use thiserror::Error;

/// Absolute slack allowed on the constraint function when classifying feasibility.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Absolute tolerance (in the scale factor) of [`max_feasible_scale`] bisection.
pub const SCALE_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("allocation has {got} entries, network has {expected} stations")]
    LengthMismatch { expected: usize, got: usize },
    #[error("allocation entry {index} is {value}; powers must be finite and nonnegative")]
    InvalidPower { index: usize, value: f64 },
    #[error("voltage recursion broke down at node {node} (V = {value})")]
    RecursionBreakdown { node: usize, value: f64 },
    #[error("scaling direction must have a positive entry")]
    ZeroDirection,
}

/// Which power-flow model defines the feasible set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PowerFlowModel {
    Distflow,
    LinearizedDistflow,
}

impl PowerFlowModel {
    pub const ALL: [PowerFlowModel; 2] = [PowerFlowModel::Distflow, PowerFlowModel::LinearizedDistflow];

    /// Short name used on the command line and in CSV output.
    pub fn as_str(&self) -> &'static str {
        match self {
            PowerFlowModel::Distflow => "distflow",
            PowerFlowModel::LinearizedDistflow => "linearized",
        }
    }
}

impl fmt::Display for PowerFlowModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PowerFlowModel {
    type Err = PowerFlowError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "distflow" | "d" => Ok(PowerFlowModel::Distflow),
            "linearized" | "linearized-distflow" | "linearizeddistflow" | "ld" => {
                Ok(PowerFlowModel::LinearizedDistflow)
            }
            other => Err(PowerFlowError::InvalidConfig(format!("unknown power-flow model `{other}`"))),
        }
    }
}

/// Line-network and policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    n_stations: usize,
    resistance: f64,
    delta: f64,
    capacity: u32,
    model: PowerFlowModel,
}

impl NetworkConfig {
    pub fn new(
        n_stations: usize,
        resistance: f64,
        delta: f64,
        capacity: u32,
        model: PowerFlowModel,
    ) -> Result<Self, PowerFlowError> {
        if n_stations == 0 {
            return Err(PowerFlowError::InvalidConfig("at least one station is required".into()));
        }
        if capacity == 0 {
            return Err(PowerFlowError::InvalidConfig("capacity must be at least 1".into()));
        }
        if !(resistance.is_finite() && resistance > 0.0) {
            return Err(PowerFlowError::InvalidConfig(format!(
                "resistance must be positive, got {resistance}"
            )));
        }
        check_delta(delta)?;
        Ok(Self { n_stations, resistance, delta, capacity, model })
    }

    /// The two-lot setting of the numerical study: N=2, r=0.1, K=100, delta=0.05.
    pub fn reference(model: PowerFlowModel) -> Self {
        Self::new(2, 0.1, 0.05, 100, model).expect("reference configuration is valid")
    }

    pub fn n_stations(&self) -> usize {
        self.n_stations
    }

    pub fn resistance(&self) -> f64 {
        self.resistance
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn model(&self) -> PowerFlowModel {
        self.model
    }

    pub fn with_model(&self, model: PowerFlowModel) -> Self {
        Self { model, ..self.clone() }
    }

    pub fn with_capacity(&self, capacity: u32) -> Result<Self, PowerFlowError> {
        Self::new(self.n_stations, self.resistance, self.delta, capacity, self.model)
    }

    /// Upper bound on the root voltage under Distflow, `1 / (1 - delta)`.
    pub fn max_root_voltage(&self) -> f64 {
        1.0 / (1.0 - self.delta)
    }

    /// Right-hand side of the Linearized Distflow constraint.
    pub fn ld_budget(&self) -> f64 {
        budget_unchecked(self.delta)
    }

    /// Coefficient of `p_k` in the Linearized Distflow constraint, `2 r k` (k is 1-based).
    pub fn ld_coefficient(&self, lot: usize) -> f64 {
        2.0 * self.resistance * lot as f64
    }
}

fn check_delta(delta: f64) -> Result<(), PowerFlowError> {
    if delta > 0.0 && delta <= 0.5 {
        Ok(())
    } else {
        Err(PowerFlowError::InvalidConfig(format!("delta must lie in (0, 0.5], got {delta}")))
    }
}

fn budget_unchecked(delta: f64) -> f64 {
    let slack = 1.0 - delta;
    delta * (2.0 - delta) / (slack * slack)
}

/// Per-lot active power.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationVector(Vec<f64>);

impl AllocationVector {
    pub fn new(power: Vec<f64>) -> Result<Self, PowerFlowError> {
        for (index, &value) in power.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(PowerFlowError::InvalidPower { index, value });
            }
        }
        Ok(Self(power))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for AllocationVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Node voltages `V_0..=V_N` under Distflow, with `V_N = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageProfile {
    voltages: Vec<f64>,
}

impl VoltageProfile {
    pub fn voltages(&self) -> &[f64] {
        &self.voltages
    }

    pub fn root(&self) -> f64 {
        self.voltages[0]
    }

    /// Relative drop `(V_0 - min_j V_j) / V_0`.
    pub fn relative_drop(&self) -> f64 {
        let min = self.voltages[1..].iter().copied().fold(f64::INFINITY, f64::min);
        (self.root() - min) / self.root()
    }
}

/// Real current and sending-end power on the edge `(j-1, j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchFlow {
    pub current: f64,
    pub sending_power: f64,
}

fn check_len(p: &[f64], cfg: &NetworkConfig) -> Result<(), PowerFlowError> {
    if p.len() != cfg.n_stations() {
        return Err(PowerFlowError::LengthMismatch { expected: cfg.n_stations(), got: p.len() });
    }
    Ok(())
}

/// Runs the Distflow recursion on raw powers. `p[k]` is the load of lot `k + 1`.
pub(crate) fn distflow_voltages(p: &[f64], r: f64) -> Result<Vec<f64>, PowerFlowError> {
    let n = p.len();
    let mut v = vec![0.0; n + 1];
    v[n] = 1.0;
    v[n - 1] = 1.0 + r * p[n - 1];
    for j in (1..n).rev() {
        if v[j] <= 0.0 || !v[j].is_finite() {
            return Err(PowerFlowError::RecursionBreakdown { node: j, value: v[j] });
        }
        v[j - 1] = 2.0 * v[j] - v[j + 1] + r * p[j - 1] / v[j];
    }
    if v[0] <= 0.0 || !v[0].is_finite() {
        return Err(PowerFlowError::RecursionBreakdown { node: 0, value: v[0] });
    }
    Ok(v)
}

/// Root voltage together with its gradient and Hessian with respect to the lot
/// powers, obtained by forward differentiation of the recursion.
pub(crate) fn root_voltage_derivatives(
    p: &[f64],
    r: f64,
) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>), PowerFlowError> {
    let n = p.len();
    // Rolling window over (V_{j+1}, V_j) and their derivatives.
    let mut v_next = 1.0;
    let mut g_next = vec![0.0; n];
    let mut h_next = vec![vec![0.0; n]; n];
    let mut v_cur = 1.0 + r * p[n - 1];
    let mut g_cur = vec![0.0; n];
    g_cur[n - 1] = r;
    let mut h_cur = vec![vec![0.0; n]; n];

    for j in (1..n).rev() {
        if v_cur <= 0.0 || !v_cur.is_finite() {
            return Err(PowerFlowError::RecursionBreakdown { node: j, value: v_cur });
        }
        let pj = p[j - 1];
        let inv = 1.0 / v_cur;
        let inv2 = inv * inv;
        let v_prev = 2.0 * v_cur - v_next + r * pj * inv;

        let mut g_prev = vec![0.0; n];
        for k in 0..n {
            let own = if k == j - 1 { r * inv } else { 0.0 };
            g_prev[k] = 2.0 * g_cur[k] - g_next[k] + own - r * pj * g_cur[k] * inv2;
        }

        let mut h_prev = vec![vec![0.0; n]; n];
        for k in 0..n {
            for l in 0..n {
                let mut term = 2.0 * h_cur[k][l] - h_next[k][l];
                if k == j - 1 {
                    term -= r * g_cur[l] * inv2;
                }
                if l == j - 1 {
                    term -= r * g_cur[k] * inv2;
                }
                term -= r * pj * h_cur[k][l] * inv2;
                term += 2.0 * r * pj * g_cur[k] * g_cur[l] * inv2 * inv;
                h_prev[k][l] = term;
            }
        }

        v_next = v_cur;
        g_next = std::mem::replace(&mut g_cur, g_prev);
        h_next = std::mem::replace(&mut h_cur, h_prev);
        v_cur = v_prev;
    }
    if v_cur <= 0.0 || !v_cur.is_finite() {
        return Err(PowerFlowError::RecursionBreakdown { node: 0, value: v_cur });
    }
    Ok((v_cur, g_cur, h_cur))
}

/// Solves the Distflow recursion for the node voltages.
pub fn voltage_profile_distflow(
    p: &AllocationVector,
    cfg: &NetworkConfig,
) -> Result<VoltageProfile, PowerFlowError> {
    check_len(p, cfg)?;
    let voltages = distflow_voltages(p, cfg.resistance())?;
    Ok(VoltageProfile { voltages })
}

/// Right-hand side of the Linearized Distflow constraint, `delta (2 - delta) / (1 - delta)^2`.
pub fn ld_budget(delta: f64) -> Result<f64, PowerFlowError> {
    check_delta(delta)?;
    Ok(budget_unchecked(delta))
}

/// Left-hand side of the Linearized Distflow constraint, `sum_k 2 r k p_k`.
pub fn ld_constraint_lhs(p: &AllocationVector, cfg: &NetworkConfig) -> Result<f64, PowerFlowError> {
    check_len(p, cfg)?;
    Ok(ld_lhs_raw(p, cfg.resistance()))
}

pub(crate) fn ld_lhs_raw(p: &[f64], r: f64) -> f64 {
    p.iter().enumerate().map(|(k, &pk)| 2.0 * r * (k + 1) as f64 * pk).sum()
}

/// Outcome of a feasibility check.
#[derive(Debug, Clone, PartialEq)]
pub enum Feasibility {
    /// Constraint value and bound; feasible when `value <= bound + FEASIBILITY_TOL`.
    Evaluated { value: f64, bound: f64 },
    /// The Distflow recursion failed, which is reported as infeasible.
    Breakdown(PowerFlowError),
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        match self {
            Feasibility::Evaluated { value, bound } => *value <= bound + FEASIBILITY_TOL,
            Feasibility::Breakdown(_) => false,
        }
    }

    /// `value - bound`, or `+inf` on breakdown.
    pub fn excess(&self) -> f64 {
        match self {
            Feasibility::Evaluated { value, bound } => value - bound,
            Feasibility::Breakdown(_) => f64::INFINITY,
        }
    }
}

/// Constraint function of the configured model evaluated at raw powers.
pub(crate) fn constraint_raw(p: &[f64], cfg: &NetworkConfig) -> Feasibility {
    match cfg.model() {
        PowerFlowModel::Distflow => match distflow_voltages(p, cfg.resistance()) {
            Ok(v) => Feasibility::Evaluated { value: v[0], bound: cfg.max_root_voltage() },
            Err(e) => Feasibility::Breakdown(e),
        },
        PowerFlowModel::LinearizedDistflow => Feasibility::Evaluated {
            value: ld_lhs_raw(p, cfg.resistance()),
            bound: cfg.ld_budget(),
        },
    }
}

/// Evaluates the configured model's voltage-drop constraint.
pub fn check_feasibility(p: &AllocationVector, cfg: &NetworkConfig) -> Result<Feasibility, PowerFlowError> {
    check_len(p, cfg)?;
    Ok(constraint_raw(p, cfg))
}

/// Whether `p` satisfies the voltage-drop constraint of `cfg.model()`.
///
/// A length mismatch or a broken-down recursion counts as infeasible; use
/// [`check_feasibility`] for the diagnostic.
pub fn is_feasible(p: &AllocationVector, cfg: &NetworkConfig) -> bool {
    check_feasibility(p, cfg).map(|f| f.is_feasible()).unwrap_or(false)
}

/// Recovers per-edge currents and sending-end powers from a Distflow profile.
///
/// Edge `j` of the result joins nodes `j` and `j + 1` (0-based), i.e. it feeds lot `j + 1`.
pub fn reconstruct_branch_flows(
    v: &VoltageProfile,
    p: &AllocationVector,
    cfg: &NetworkConfig,
) -> Result<Vec<BranchFlow>, PowerFlowError> {
    check_len(p, cfg)?;
    let volts = v.voltages();
    if volts.len() != p.len() + 1 {
        return Err(PowerFlowError::LengthMismatch { expected: p.len() + 1, got: volts.len() });
    }
    let r = cfg.resistance();
    Ok(volts
        .windows(2)
        .map(|w| {
            let current = (w[0] - w[1]) / r;
            BranchFlow { current, sending_power: w[0] * current }
        })
        .collect())
}

/// Node power-balance residuals `S_{j-1,j} - r I^2 - p_j - S_{j,j+1}` with `S_{N,N+1} = 0`.
pub fn power_balance_residuals(flows: &[BranchFlow], p: &[f64], r: f64) -> Vec<f64> {
    (0..flows.len())
        .map(|j| {
            let downstream = flows.get(j + 1).map_or(0.0, |f| f.sending_power);
            let f = flows[j];
            f.sending_power - r * f.current * f.current - p[j] - downstream
        })
        .collect()
}

/// Largest `t >= 0` such that `t * direction` is feasible under `cfg.model()`.
///
/// Linearized Distflow uses the closed form; Distflow bisects the root voltage
/// (which is increasing in `t`) down to [`SCALE_TOL`] and returns the feasible end.
pub fn max_feasible_scale(direction: &AllocationVector, cfg: &NetworkConfig) -> Result<f64, PowerFlowError> {
    check_len(direction, cfg)?;
    scale_to_boundary(direction, cfg)
}

pub(crate) fn scale_to_boundary(direction: &[f64], cfg: &NetworkConfig) -> Result<f64, PowerFlowError> {
    if !direction.iter().any(|&d| d > 0.0) {
        return Err(PowerFlowError::ZeroDirection);
    }
    let r = cfg.resistance();
    let lhs = ld_lhs_raw(direction, r);
    match cfg.model() {
        PowerFlowModel::LinearizedDistflow => Ok(cfg.ld_budget() / lhs),
        PowerFlowModel::Distflow => {
            let bound = cfg.max_root_voltage();
            let root = |t: f64| -> Result<f64, PowerFlowError> {
                let scaled: Vec<f64> = direction.iter().map(|d| t * d).collect();
                Ok(distflow_voltages(&scaled, r)?[0])
            };
            // V_0(t d) <= 1 + t * lhs(d) / 2 because every V_j >= 1, so the linear
            // estimate is feasible and doubling from it brackets the boundary.
            let mut lo = 0.0;
            let mut hi = 2.0 * (bound - 1.0) / lhs;
            while root(hi)? <= bound {
                lo = hi;
                hi *= 2.0;
            }
            while hi - lo > SCALE_TOL {
                let mid = 0.5 * (lo + hi);
                if root(mid)? <= bound {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(lo)
        }
    }
}
