//! Event-driven simulation of the occupancy chain with per-EV sojourn tracking.
//!
//! In each state the holding time is exponential at the total event rate
//! (arrivals at every lot, including those that will be blocked, plus the lot
//! departure rates) and the event is chosen proportionally to its rate. A
//! departure removes an EV chosen uniformly among those present at the lot;
//! with Exp(1) requirements under equal sharing this leaves the law of the
//! count process unchanged.
//!
//! Statistics cover `(burn_in, horizon]`, split into equal-length batches.
//! Confidence intervals are Student-t intervals over the batch means of all
//! replications pooled.
//!
//! Replication `i` draws from `ChaCha8Rng::seed_from_u64(seed)` switched to
//! stream `i`, so replications are independent and results are bit-identical
//! for equal inputs whatever the thread schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{ArrivalSpec, Estimate, LotMetrics, MarkovError};
use crate::allocator::{Allocator, StateVector};

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub horizon: f64,
    pub burn_in: f64,
    pub seed: u64,
    pub replications: usize,
    pub batches: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { horizon: 2e5, burn_in: 2e4, seed: 1, replications: 5, batches: 20 }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), MarkovError> {
        let bad = |m: String| Err(MarkovError::InvalidSimulation(m));
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.burn_in >= 0.0 && self.burn_in < self.horizon) {
            return bad(format!("burn-in {} must lie in [0, horizon)", self.burn_in));
        }
        if self.replications == 0 {
            return bad("at least one replication is required".into());
        }
        if self.batches < 2 {
            return bad("at least two batches are required".into());
        }
        Ok(())
    }

    fn window(&self) -> f64 {
        self.horizon - self.burn_in
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub lots: Vec<LotMetrics>,
    /// Time-average of the total number of EVs, with its batch-means interval.
    pub total_mean_number: Estimate,
    /// Arrivals inside the measurement window, per lot, summed over replications.
    pub arrivals: Vec<u64>,
    pub accepted: Vec<u64>,
    pub blocked: Vec<u64>,
    pub departures: Vec<u64>,
    /// Total measured time over all replications.
    pub measured_time: f64,
    pub rates: Vec<f64>,
    pub config: SimulationConfig,
}

impl SimulationResult {
    /// Accepted arrivals per unit of measured time.
    pub fn accepted_rate(&self, lot: usize) -> f64 {
        self.accepted[lot] as f64 / self.measured_time
    }
}

/// Per-batch accumulators of one replication.
#[derive(Debug, Clone)]
struct BatchStats {
    area: Vec<Vec<f64>>,
    sojourn: Vec<Vec<f64>>,
    departures: Vec<Vec<u64>>,
    arrivals: Vec<Vec<u64>>,
    blocked: Vec<Vec<u64>>,
}

impl BatchStats {
    fn new(batches: usize, lots: usize) -> Self {
        Self {
            area: vec![vec![0.0; lots]; batches],
            sojourn: vec![vec![0.0; lots]; batches],
            departures: vec![vec![0; lots]; batches],
            arrivals: vec![vec![0; lots]; batches],
            blocked: vec![vec![0; lots]; batches],
        }
    }
}

struct Window {
    start: f64,
    end: f64,
    batch_len: f64,
    batches: usize,
}

impl Window {
    fn batch_of(&self, t: f64) -> Option<usize> {
        if t <= self.start || t > self.end {
            return None;
        }
        let b = ((t - self.start) / self.batch_len) as usize;
        Some(b.min(self.batches - 1))
    }

    /// Adds `x * |[a, b] ∩ batch|` to each batch's occupancy area.
    fn accumulate(&self, a: f64, b: f64, x: &[u32], stats: &mut BatchStats) {
        let a = a.max(self.start);
        let b = b.min(self.end);
        if b <= a {
            return;
        }
        let first = (((a - self.start) / self.batch_len) as usize).min(self.batches - 1);
        for batch in first..self.batches {
            let lo = self.start + batch as f64 * self.batch_len;
            let hi = if batch + 1 == self.batches { self.end } else { lo + self.batch_len };
            let overlap = b.min(hi) - a.max(lo);
            if overlap > 0.0 {
                for (area, &c) in stats.area[batch].iter_mut().zip(x) {
                    *area += f64::from(c) * overlap;
                }
            }
            if hi >= b {
                break;
            }
        }
    }
}

fn run_replication(
    arrivals: &ArrivalSpec,
    allocator: &Allocator,
    sim: &SimulationConfig,
    replication: usize,
) -> Result<BatchStats, MarkovError> {
    let cfg = allocator.config();
    let n = cfg.n_stations();
    let capacity = cfg.capacity();
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    rng.set_stream(replication as u64);

    let window = Window {
        start: sim.burn_in,
        end: sim.horizon,
        batch_len: sim.window() / sim.batches as f64,
        batches: sim.batches,
    };
    let mut stats = BatchStats::new(sim.batches, n);
    let lambda = arrivals.rates();
    let arrival_total: f64 = lambda.iter().sum();

    let mut t = 0.0;
    let mut counts = vec![0u32; n];
    let mut present: Vec<Vec<f64>> = vec![Vec::new(); n];
    loop {
        let state = StateVector::from_counts(counts.clone());
        let power = allocator.allocate(&state).map_err(|source| MarkovError::Allocation { state, source })?;
        let total = arrival_total + power.iter().sum::<f64>();
        if total <= 0.0 {
            window.accumulate(t, sim.horizon, &counts, &mut stats);
            break;
        }
        let holding: f64 = rng.sample::<f64, _>(Exp1) / total;
        let next = t + holding;
        window.accumulate(t, next.min(sim.horizon), &counts, &mut stats);
        if next > sim.horizon {
            break;
        }
        t = next;
        let batch = window.batch_of(t);

        let pick = rng.random::<f64>() * total;
        match select_event(lambda, &power, pick) {
            Event::Arrival(j) => {
                if let Some(b) = batch {
                    stats.arrivals[b][j] += 1;
                }
                if counts[j] == capacity {
                    if let Some(b) = batch {
                        stats.blocked[b][j] += 1;
                    }
                } else {
                    counts[j] += 1;
                    present[j].push(t);
                }
            }
            Event::Departure(j) => {
                let k = rng.random_range(0..present[j].len());
                let arrived = present[j].swap_remove(k);
                counts[j] -= 1;
                if let Some(b) = batch {
                    stats.sojourn[b][j] += t - arrived;
                    stats.departures[b][j] += 1;
                }
            }
        }
    }
    Ok(stats)
}

enum Event {
    Arrival(usize),
    Departure(usize),
}

/// Maps `pick` in `[0, total)` onto the event whose rate interval contains it.
/// Rounding at the upper end falls back to the last event with a positive rate.
fn select_event(arrivals: &[f64], departures: &[f64], mut pick: f64) -> Event {
    let mut last = None;
    for (j, &rate) in arrivals.iter().enumerate() {
        if rate > 0.0 {
            if pick < rate {
                return Event::Arrival(j);
            }
            pick -= rate;
            last = Some(Event::Arrival(j));
        }
    }
    for (j, &rate) in departures.iter().enumerate() {
        if rate > 0.0 {
            if pick < rate {
                return Event::Departure(j);
            }
            pick -= rate;
            last = Some(Event::Departure(j));
        }
    }
    last.expect("at least one event has a positive rate")
}

fn t_quantile(samples: usize) -> f64 {
    if samples < 2 {
        return f64::INFINITY;
    }
    StudentsT::new(0.0, 1.0, (samples - 1) as f64)
        .map(|d| d.inverse_cdf(0.975))
        .unwrap_or(f64::INFINITY)
}

/// Half-width of the 95% interval for the mean of `samples`.
fn half_width(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return f64::INFINITY;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    t_quantile(n) * (var / n as f64).sqrt()
}

/// Simulates the chain from the empty state.
pub fn simulate(
    arrivals: &ArrivalSpec,
    allocator: &Allocator,
    sim: &SimulationConfig,
) -> Result<SimulationResult, MarkovError> {
    sim.validate()?;
    let cfg = allocator.config();
    arrivals.check_against(cfg)?;
    let n = cfg.n_stations();

    let reps: Vec<BatchStats> = (0..sim.replications)
        .into_par_iter()
        .map(|r| run_replication(arrivals, allocator, sim, r))
        .collect::<Result<_, _>>()?;

    let batch_len = sim.window() / sim.batches as f64;
    let batches: Vec<(&BatchStats, usize)> =
        reps.iter().flat_map(|s| (0..sim.batches).map(move |b| (s, b))).collect();
    let sum_u64 = |f: &dyn Fn(&BatchStats, usize) -> u64| -> u64 { batches.iter().map(|&(s, b)| f(s, b)).sum() };

    let mut lots = Vec::with_capacity(n);
    let (mut arr, mut acc, mut blk, mut dep) = (vec![0; n], vec![0; n], vec![0; n], vec![0; n]);
    for j in 0..n {
        let number: Vec<f64> = batches.iter().map(|&(s, b)| s.area[b][j] / batch_len).collect();
        let mean_number = Estimate {
            value: number.iter().sum::<f64>() / number.len() as f64,
            half_width: half_width(&number),
        };

        let departures = sum_u64(&|s, b| s.departures[b][j]);
        let sojourn: f64 = batches.iter().map(|&(s, b)| s.sojourn[b][j]).sum();
        let times: Vec<f64> = batches
            .iter()
            .filter(|&&(s, b)| s.departures[b][j] > 0)
            .map(|&(s, b)| s.sojourn[b][j] / s.departures[b][j] as f64)
            .collect();
        let mean_charging_time = (departures > 0)
            .then(|| Estimate { value: sojourn / departures as f64, half_width: half_width(&times) });

        let arrived = sum_u64(&|s, b| s.arrivals[b][j]);
        let blocked = sum_u64(&|s, b| s.blocked[b][j]);
        let fractions: Vec<f64> = batches
            .iter()
            .filter(|&&(s, b)| s.arrivals[b][j] > 0)
            .map(|&(s, b)| s.blocked[b][j] as f64 / s.arrivals[b][j] as f64)
            .collect();
        let blocking = Estimate {
            value: if arrived > 0 { blocked as f64 / arrived as f64 } else { 0.0 },
            half_width: if fractions.is_empty() { 0.0 } else { half_width(&fractions) },
        };

        arr[j] = arrived;
        blk[j] = blocked;
        acc[j] = arrived - blocked;
        dep[j] = departures;
        lots.push(LotMetrics { mean_number, mean_charging_time, blocking });
    }

    let totals: Vec<f64> =
        batches.iter().map(|&(s, b)| s.area[b].iter().sum::<f64>() / batch_len).collect();
    let total_mean_number = Estimate {
        value: totals.iter().sum::<f64>() / totals.len() as f64,
        half_width: half_width(&totals),
    };

    Ok(SimulationResult {
        lots,
        total_mean_number,
        arrivals: arr,
        accepted: acc,
        blocked: blk,
        departures: dep,
        measured_time: sim.window() * sim.replications as f64,
        rates: arrivals.rates().to_vec(),
        config: sim.clone(),
    })
}
