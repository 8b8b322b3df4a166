//! Arrival-rate sweeps, critical-rate detection, model-gap curves and heat maps.
//!
//! Every grid point is an independent task. Points run in parallel, but results
//! are collected in grid order, so tables match a sequential run exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::allocator::Allocator;
use crate::markov::{
    exact_metrics, simulate, stationary_from_table, AllocationTable, ArrivalSpec, Estimate, LotMetrics,
    MarkovError, SimulationConfig, StateSpace,
};
use crate::powerflow::PowerFlowModel;

/// Relative tolerance under which two jumps count as tied.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid fractions: {0}")]
    InvalidFractions(String),
    #[error("{model} at fraction_1={fraction_1}: need at least 3 successful rate points, have {got}")]
    TooFewPoints { model: PowerFlowModel, fraction_1: f64, got: usize },
    #[error("sweep tables do not share a rate grid: {0}")]
    MismatchedGrids(String),
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

/// How a sweep point's performance measures are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Exact,
    Simulation,
    /// Exact when the state space fits the stationary solver, simulation otherwise.
    Auto,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Simulation => "sim",
            Method::Auto => "auto",
        }
    }

    fn resolve(self, allocator: &Allocator) -> Method {
        match self {
            Method::Auto if StateSpace::new(allocator.config()).is_ok() => Method::Exact,
            Method::Auto => Method::Simulation,
            m => m,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" | "stationary" => Ok(Method::Exact),
            "sim" | "simulation" => Ok(Method::Simulation),
            "auto" => Ok(Method::Auto),
            other => Err(ExperimentError::InvalidGrid(format!("unknown method `{other}`"))),
        }
    }
}

/// Meaning of the values of a rate grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateAxis {
    /// Mean rate per lot, `total / N`. With equal fractions this is each lot's rate.
    PerLot,
    /// Total arrival rate to the network.
    Total,
}

impl RateAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            RateAxis::PerLot => "per-lot",
            RateAxis::Total => "total",
        }
    }

    fn total(&self, value: f64, n: usize) -> f64 {
        match self {
            RateAxis::PerLot => value * n as f64,
            RateAxis::Total => value,
        }
    }
}

impl FromStr for RateAxis {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-lot" | "lot" => Ok(RateAxis::PerLot),
            "total" => Ok(RateAxis::Total),
            other => Err(ExperimentError::InvalidGrid(format!("unknown rate axis `{other}`"))),
        }
    }
}

/// Inclusive arithmetic grid `start, start + step, ..., <= stop`.
pub fn arithmetic_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>, ExperimentError> {
    if !(step > 0.0 && start.is_finite() && stop.is_finite() && stop >= start) {
        return Err(ExperimentError::InvalidGrid(format!("bad range {start}..{stop} step {step}")));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    // Rounded to 12 decimals so grid values print and compare cleanly.
    Ok((0..count).map(|i| ((start + step * i as f64) * 1e12).round() / 1e12).collect())
}

/// Fractions with `f` at lot 1 and the rest split evenly over the other lots.
pub fn lot1_fractions(f: f64, n: usize) -> Result<Vec<f64>, ExperimentError> {
    if n < 2 {
        return Err(ExperimentError::InvalidFractions("a lot-1 fraction needs at least two lots".into()));
    }
    if !(0.0..=1.0).contains(&f) {
        return Err(ExperimentError::InvalidFractions(format!("fraction {f} outside [0, 1]")));
    }
    let rest = (1.0 - f) / (n - 1) as f64;
    Ok(std::iter::once(f).chain(std::iter::repeat(rest).take(n - 1)).collect())
}

pub fn equal_fractions(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn check_fractions(fractions: &[f64], n: usize) -> Result<(), ExperimentError> {
    if fractions.len() != n {
        return Err(ExperimentError::InvalidFractions(format!("{} fractions for {n} lots", fractions.len())));
    }
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
        return Err(ExperimentError::InvalidFractions(format!("{fractions:?} must be nonnegative and sum to 1")));
    }
    Ok(())
}

fn check_increasing(grid: &[f64], what: &str) -> Result<(), ExperimentError> {
    if grid.is_empty() {
        return Err(ExperimentError::InvalidGrid(format!("{what} grid is empty")));
    }
    if grid.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(ExperimentError::InvalidGrid(format!("{what} grid has a negative or non-finite value")));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ExperimentError::InvalidGrid(format!("{what} grid is not strictly increasing")));
    }
    Ok(())
}

/// Per-lot metrics of one point plus the total occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMetrics {
    pub lots: Vec<LotMetrics>,
    pub total_mean_number: Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub model: PowerFlowModel,
    pub method: Method,
    /// Grid value on the table's axis.
    pub rate: f64,
    pub total_rate: f64,
    pub fractions: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Failure message in place of metrics when the point could not be evaluated.
    pub outcome: Result<PointMetrics, String>,
    pub seed: u64,
    pub horizon: f64,
    pub burn_in: f64,
}

impl SweepPoint {
    pub fn total_mean_number(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|m| m.total_mean_number.value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axis: RateAxis,
    pub points: Vec<SweepPoint>,
}

impl SweepTable {
    pub fn merge(mut self, other: SweepTable) -> Result<SweepTable, ExperimentError> {
        if self.axis != other.axis {
            return Err(ExperimentError::MismatchedGrids("different rate axes".into()));
        }
        self.points.extend(other.points);
        Ok(self)
    }

    pub fn model_points(&self, model: PowerFlowModel) -> impl Iterator<Item = &SweepPoint> {
        self.points.iter().filter(move |p| p.model == model)
    }
}

/// Evaluates exact or simulated metrics at a list of arrival specifications.
struct Evaluator<'a> {
    allocator: &'a Allocator,
    sim: &'a SimulationConfig,
    method: Method,
    table: Option<AllocationTable>,
}

impl<'a> Evaluator<'a> {
    fn new(allocator: &'a Allocator, sim: &'a SimulationConfig, method: Method) -> Result<Self, ExperimentError> {
        let method = method.resolve(allocator);
        let table = match method {
            Method::Exact => Some(AllocationTable::build(allocator)?),
            _ => {
                sim.validate()?;
                None
            }
        };
        Ok(Self { allocator, sim, method, table })
    }

    fn evaluate(&self, arrivals: &ArrivalSpec) -> Result<PointMetrics, MarkovError> {
        match &self.table {
            Some(table) => {
                let pi = stationary_from_table(arrivals, table)?;
                let lots = exact_metrics(&pi, arrivals)?;
                let total = lots.iter().map(|l| l.mean_number.value).sum();
                Ok(PointMetrics { lots, total_mean_number: Estimate::exact(total) })
            }
            None => {
                let r = simulate(arrivals, self.allocator, self.sim)?;
                Ok(PointMetrics { lots: r.lots, total_mean_number: r.total_mean_number })
            }
        }
    }
}

/// Per-lot means at each rate of `grid` for every fraction vector in `fractions`.
///
/// A point that fails is kept in the table with its error message.
pub fn run_sweep(
    grid: &[f64],
    axis: RateAxis,
    fractions: &[Vec<f64>],
    allocator: &Allocator,
    sim: &SimulationConfig,
    method: Method,
) -> Result<SweepTable, ExperimentError> {
    let cfg = allocator.config();
    let n = cfg.n_stations();
    check_increasing(grid, "rate")?;
    if fractions.is_empty() {
        return Err(ExperimentError::InvalidFractions("no fraction vectors given".into()));
    }
    for f in fractions {
        check_fractions(f, n)?;
    }
    let evaluator = Evaluator::new(allocator, sim, method)?;
    let tasks: Vec<(&Vec<f64>, f64)> =
        fractions.iter().flat_map(|f| grid.iter().map(move |&r| (f, r))).collect();
    let points = tasks
        .into_par_iter()
        .map(|(f, rate)| {
            let total_rate = axis.total(rate, n);
            let arrivals = ArrivalSpec::from_total(total_rate, f)?;
            let outcome = evaluator.evaluate(&arrivals).map_err(|e| e.to_string());
            Ok(SweepPoint {
                model: cfg.model(),
                method: evaluator.method,
                rate,
                total_rate,
                fractions: f.clone(),
                lambdas: arrivals.rates().to_vec(),
                outcome,
                seed: sim.seed,
                horizon: sim.horizon,
                burn_in: sim.burn_in,
            })
        })
        .collect::<Result<Vec<_>, MarkovError>>()?;
    Ok(SweepTable { axis, points })
}

#[derive(Debug, Clone, PartialEq)]
pub enum CriticalStatus {
    /// A single largest jump.
    Clear,
    /// Every consecutive jump is tied; the last pair is reported.
    NoExplosion,
    /// Several (but not all) pairs tie for the largest jump; no rate is reported.
    Tie(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalEstimate {
    pub model: PowerFlowModel,
    pub fractions: Vec<f64>,
    /// Midpoint of the grid pair with the largest jump in total mean number.
    pub rate: Option<f64>,
    pub grid_step: f64,
    pub status: CriticalStatus,
}

impl CriticalEstimate {
    pub fn fraction_1(&self) -> f64 {
        self.fractions[0]
    }
}

/// Locates the largest jump in total mean number between consecutive grid
/// points, separately for each (model, fractions) series of the table.
pub fn estimate_critical_rate(table: &SweepTable) -> Result<Vec<CriticalEstimate>, ExperimentError> {
    let mut series: BTreeMap<(PowerFlowModel, Vec<u64>), Vec<&SweepPoint>> = BTreeMap::new();
    for p in &table.points {
        let key = (p.model, p.fractions.iter().map(|f| f.to_bits()).collect());
        series.entry(key).or_default().push(p);
    }
    let mut out = Vec::with_capacity(series.len());
    for ((model, _), mut points) in series {
        points.sort_by(|a, b| a.rate.total_cmp(&b.rate));
        let fractions = points[0].fractions.clone();
        let valid: Vec<(f64, f64)> =
            points.iter().filter_map(|p| p.total_mean_number().map(|m| (p.rate, m))).collect();
        if valid.len() < 3 {
            return Err(ExperimentError::TooFewPoints { model, fraction_1: fractions[0], got: valid.len() });
        }
        let (rate, grid_step, status) = max_jump(&valid);
        out.push(CriticalEstimate { model, fractions, rate, grid_step, status });
    }
    Ok(out)
}

/// `(rate, total mean)` pairs sorted by rate, at least three of them.
fn max_jump(points: &[(f64, f64)]) -> (Option<f64>, f64, CriticalStatus) {
    let jumps: Vec<(f64, f64)> =
        points.windows(2).map(|w| (0.5 * (w[0].0 + w[1].0), (w[1].1 - w[0].1).abs())).collect();
    let grid_step = points.windows(2).map(|w| w[1].0 - w[0].0).fold(f64::INFINITY, f64::min);
    let largest = jumps.iter().map(|j| j.1).fold(0.0, f64::max);
    let tol = TIE_TOL * largest.max(1.0);
    let tied: Vec<f64> = jumps.iter().filter(|j| largest - j.1 <= tol).map(|j| j.0).collect();
    match tied.len() {
        1 => (Some(tied[0]), grid_step, CriticalStatus::Clear),
        k if k == jumps.len() => (tied.last().copied(), grid_step, CriticalStatus::NoExplosion),
        _ => (None, grid_step, CriticalStatus::Tie(tied)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeDifference {
    pub rate: f64,
    pub total_rate: f64,
    pub fraction_1: f64,
    /// `100 (D - LD) / D` of the total mean number; `None` when D is zero or a point failed.
    pub percent: Option<f64>,
}

/// Percentage gap between the Distflow and Linearized Distflow total means.
pub fn relative_difference_curve(
    distflow: &SweepTable,
    linearized: &SweepTable,
) -> Result<Vec<RelativeDifference>, ExperimentError> {
    let d: Vec<&SweepPoint> = distflow.model_points(PowerFlowModel::Distflow).collect();
    let ld: Vec<&SweepPoint> = linearized.model_points(PowerFlowModel::LinearizedDistflow).collect();
    if d.len() != ld.len() {
        return Err(ExperimentError::MismatchedGrids(format!("{} vs {} points", d.len(), ld.len())));
    }
    d.iter()
        .zip(&ld)
        .map(|(a, b)| {
            if a.rate != b.rate || a.fractions != b.fractions {
                return Err(ExperimentError::MismatchedGrids(format!(
                    "rate {} / {:?} vs rate {} / {:?}",
                    a.rate, a.fractions, b.rate, b.fractions
                )));
            }
            let percent = match (a.total_mean_number(), b.total_mean_number()) {
                (Some(x), Some(y)) if x != 0.0 => Some(100.0 * (x - y) / x),
                _ => None,
            };
            Ok(RelativeDifference { rate: a.rate, total_rate: a.total_rate, fraction_1: a.fractions[0], percent })
        })
        .collect()
}

/// Same as [`relative_difference_curve`] for two series that share a table.
pub fn model_gap(table: &SweepTable) -> Result<Vec<RelativeDifference>, ExperimentError> {
    relative_difference_curve(table, table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapCell {
    pub model: PowerFlowModel,
    pub total_rate: f64,
    pub fraction_1: f64,
    pub total_mean_number: Result<Estimate, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTable {
    pub cells: Vec<HeatmapCell>,
}

impl HeatmapTable {
    pub fn cell(&self, model: PowerFlowModel, total_rate: f64, fraction_1: f64) -> Option<&HeatmapCell> {
        self.cells.iter().find(|c| {
            c.model == model && (c.total_rate - total_rate).abs() < 1e-12 && (c.fraction_1 - fraction_1).abs() < 1e-12
        })
    }
}

/// Total mean number over the grid of total rates and lot-1 fractions.
///
/// Lot 1 receives `f * total`; the remainder is split evenly over the other lots.
pub fn run_heatmap(
    total_rates: &[f64],
    fractions_1: &[f64],
    allocator: &Allocator,
    sim: &SimulationConfig,
    method: Method,
) -> Result<HeatmapTable, ExperimentError> {
    let n = allocator.config().n_stations();
    check_increasing(total_rates, "total rate")?;
    check_increasing(fractions_1, "fraction")?;
    let fractions: Vec<Vec<f64>> =
        fractions_1.iter().map(|&f| lot1_fractions(f, n)).collect::<Result<_, _>>()?;
    let evaluator = Evaluator::new(allocator, sim, method)?;
    let tasks: Vec<(f64, &Vec<f64>)> =
        total_rates.iter().flat_map(|&r| fractions.iter().map(move |f| (r, f))).collect();
    let cells = tasks
        .into_par_iter()
        .map(|(total_rate, f)| {
            let arrivals = ArrivalSpec::from_total(total_rate, f)?;
            let total_mean_number =
                evaluator.evaluate(&arrivals).map(|m| m.total_mean_number).map_err(|e| e.to_string());
            Ok(HeatmapCell { model: allocator.config().model(), total_rate, fraction_1: f[0], total_mean_number })
        })
        .collect::<Result<Vec<_>, MarkovError>>()?;
    Ok(HeatmapTable { cells })
}
