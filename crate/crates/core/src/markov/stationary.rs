//! Exact stationary distribution of the occupancy chain.
//!
//! The global balance equations `pi Q = 0` are solved with one state pinned
//! to 1 and its equation dropped. The empty state is pinned first; when the
//! mass sits far from it, the solve is repeated with the heaviest state
//! pinned so the unknowns stay of order one. With lot 1 as the most significant
//! digit of the state index, `Q^T` is banded with half-width
//! `(K+1)^(N-1)`; the reduced matrix is column diagonally dominant, so banded
//! Gaussian elimination without pivoting is stable. Spaces whose band is too
//! wide for that fall back to Gauss-Seidel sweeps.

use super::{AllocationTable, ArrivalSpec, Estimate, LotMetrics, MarkovError, StateSpace};
use crate::allocator::Allocator;

/// Largest state space accepted by the exact solver.
pub const MAX_STATES: u128 = 1_000_000;
/// Required bound on `||pi Q||_inf`.
pub const RESIDUAL_TOL: f64 = 1e-10;

/// Limits for the banded direct solver: stored band entries and elimination flops.
const DIRECT_MAX_BAND_ENTRIES: usize = 30_000_000;
const DIRECT_MAX_FLOPS: f64 = 2e10;
const GAUSS_SEIDEL_MAX_SWEEPS: usize = 200_000;

#[derive(Debug, Clone)]
pub struct StationaryDistribution {
    space: StateSpace,
    probs: Vec<f64>,
    residual: f64,
}

impl StationaryDistribution {
    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn probability(&self, counts: &[u32]) -> f64 {
        self.probs[self.space.index(counts)]
    }

    /// `||pi Q||_inf` of the returned distribution.
    pub fn residual(&self) -> f64 {
        self.residual
    }
}

/// Generator of the chain in row form: for each state, `(target, rate)` pairs.
struct Generator<'a> {
    table: &'a AllocationTable,
    rates: &'a [f64],
}

impl Generator<'_> {
    fn for_each_out(&self, i: usize, mut f: impl FnMut(usize, f64)) {
        let space = self.table.space();
        let counts = space.counts(i);
        let power = self.table.power(i);
        for (j, &c) in counts.iter().enumerate() {
            let stride = space.stride(j);
            if c < space.capacity() && self.rates[j] > 0.0 {
                f(i + stride, self.rates[j]);
            }
            if c > 0 && power[j] > 0.0 {
                f(i - stride, power[j]);
            }
        }
    }

    fn out_rate(&self, i: usize) -> f64 {
        let mut total = 0.0;
        self.for_each_out(i, |_, r| total += r);
        total
    }

    /// `||pi Q||_inf`.
    fn residual(&self, pi: &[f64]) -> f64 {
        let mut flow = vec![0.0; pi.len()];
        for (i, &mass) in pi.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let mut total = 0.0;
            self.for_each_out(i, |k, r| {
                flow[k] += mass * r;
                total += r;
            });
            flow[i] -= mass * total;
        }
        flow.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Stationary distribution for `arrivals` on the allocator's network.
pub fn stationary_distribution(
    arrivals: &ArrivalSpec,
    allocator: &Allocator,
) -> Result<StationaryDistribution, MarkovError> {
    arrivals.check_against(allocator.config())?;
    let table = AllocationTable::build(allocator)?;
    stationary_from_table(arrivals, &table)
}

/// Same as [`stationary_distribution`], reusing precomputed allocations.
pub fn stationary_from_table(
    arrivals: &ArrivalSpec,
    table: &AllocationTable,
) -> Result<StationaryDistribution, MarkovError> {
    let space = *table.space();
    if arrivals.n_lots() != space.n_lots() {
        return Err(MarkovError::LotCount {
            what: "arrival specification",
            expected: space.n_lots(),
            got: arrivals.n_lots(),
        });
    }
    let generator = Generator { table, rates: arrivals.rates() };
    let n = space.len();
    if n == 1 || arrivals.rates().iter().all(|&r| r == 0.0) {
        let mut probs = vec![0.0; n];
        probs[0] = 1.0;
        let residual = generator.residual(&probs);
        return Ok(StationaryDistribution { space, probs, residual });
    }

    let width = space.stride(0);
    let band_entries = (n - 1) * (2 * width + 1);
    let flops = (n - 1) as f64 * (width as f64).powi(2);
    let mut probs = if band_entries <= DIRECT_MAX_BAND_ENTRIES && flops <= DIRECT_MAX_FLOPS {
        banded_solve(&generator, n, width)
    } else {
        gauss_seidel(&generator, n)?
    };
    normalize(&mut probs);
    let residual = generator.residual(&probs);
    if residual > RESIDUAL_TOL || !residual.is_finite() {
        return Err(MarkovError::SolverDiverged { residual });
    }
    Ok(StationaryDistribution { space, probs, residual })
}

fn normalize(probs: &mut [f64]) {
    for p in probs.iter_mut() {
        if *p < 0.0 {
            *p = 0.0;
        }
    }
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }
}

/// LU factors of the reduced `Q^T` (state `pin` removed), stored as a band.
struct BandLu {
    m: usize,
    width: usize,
    band: Vec<f64>,
}

impl BandLu {
    fn at(&self, row: usize, col: usize) -> usize {
        row * (2 * self.width + 1) + (col + self.width - row)
    }

    fn factor(generator: &Generator<'_>, n: usize, width: usize, pin: usize) -> Self {
        let m = n - 1;
        let stride = 2 * width + 1;
        let mut lu = Self { m, width, band: vec![0.0; m * stride] };
        // Column j of Q^T is row j of Q; states above `pin` shift down by one.
        for state in (0..n).filter(|&s| s != pin) {
            let col = unknown(state, pin);
            let mut total = 0.0;
            generator.for_each_out(state, |target, rate| {
                total += rate;
                if target != pin {
                    let idx = lu.at(unknown(target, pin), col);
                    lu.band[idx] += rate;
                }
            });
            let idx = lu.at(col, col);
            lu.band[idx] -= total;
        }
        for k in 0..m {
            let pivot = lu.band[lu.at(k, k)];
            let last = (k + width).min(m - 1);
            let len = last - k;
            let (head, tail) = lu.band.split_at_mut((k + 1) * stride);
            let upper = &head[k * stride + width + 1..k * stride + width + 1 + len];
            for i in k + 1..=last {
                let row = &mut tail[(i - k - 1) * stride..(i - k) * stride];
                let ik = k + width - i;
                if row[ik] == 0.0 {
                    continue;
                }
                let factor = row[ik] / pivot;
                row[ik] = factor;
                for (x, &u) in row[ik + 1..ik + 1 + len].iter_mut().zip(upper) {
                    *x -= factor * u;
                }
            }
        }
        lu
    }

    fn solve(&self, rhs: &mut [f64]) {
        let (m, w) = (self.m, self.width);
        for i in 0..m {
            let first = i.saturating_sub(w);
            let mut acc = rhs[i];
            for k in first..i {
                acc -= self.band[self.at(i, k)] * rhs[k];
            }
            rhs[i] = acc;
        }
        for i in (0..m).rev() {
            let last = (i + w).min(m - 1);
            let mut acc = rhs[i];
            for j in i + 1..=last {
                acc -= self.band[self.at(i, j)] * rhs[j];
            }
            rhs[i] = acc / self.band[self.at(i, i)];
        }
    }
}

fn unknown(state: usize, pin: usize) -> usize {
    if state > pin {
        state - 1
    } else {
        state
    }
}

fn banded_solve(generator: &Generator<'_>, n: usize, width: usize) -> Vec<f64> {
    let mut pin = 0;
    let mut probs = pinned_solve(generator, n, width, pin);
    for _ in 0..3 {
        let heaviest = (0..n).max_by(|&a, &b| probs[a].abs().total_cmp(&probs[b].abs())).unwrap_or(pin);
        if heaviest == pin || probs[heaviest].abs() <= 1e3 {
            break;
        }
        pin = heaviest;
        probs = pinned_solve(generator, n, width, pin);
    }
    probs
}

fn pinned_solve(generator: &Generator<'_>, n: usize, width: usize, pin: usize) -> Vec<f64> {
    let lu = BandLu::factor(generator, n, width, pin);
    // pi(pin) = 1 moves the flow out of the pinned state to the right-hand side.
    let mut rhs = vec![0.0; n - 1];
    generator.for_each_out(pin, |target, rate| rhs[unknown(target, pin)] -= rate);
    lu.solve(&mut rhs);
    let mut probs = rhs;
    probs.insert(pin, 1.0);

    // One round of iterative refinement on the unnormalized system.
    let mut flow = vec![0.0; n];
    for (i, &mass) in probs.iter().enumerate() {
        let mut total = 0.0;
        generator.for_each_out(i, |k, r| {
            flow[k] += mass * r;
            total += r;
        });
        flow[i] -= mass * total;
    }
    let mut correction: Vec<f64> =
        flow.iter().enumerate().filter(|&(i, _)| i != pin).map(|(_, f)| -f).collect();
    lu.solve(&mut correction);
    for (i, c) in (0..n).filter(|&i| i != pin).zip(correction) {
        probs[i] += c;
    }
    probs
}

fn gauss_seidel(generator: &Generator<'_>, n: usize) -> Result<Vec<f64>, MarkovError> {
    let out_rate: Vec<f64> = (0..n).map(|i| generator.out_rate(i)).collect();
    // Incoming (source, rate) lists.
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        generator.for_each_out(i, |k, r| incoming[k].push((i, r)));
    }
    let mut pi = vec![1.0 / n as f64; n];
    let mut residual = f64::INFINITY;
    for sweep in 0..GAUSS_SEIDEL_MAX_SWEEPS {
        for i in 0..n {
            if out_rate[i] > 0.0 {
                let inflow: f64 = incoming[i].iter().map(|&(s, r)| pi[s] * r).sum();
                pi[i] = inflow / out_rate[i];
            }
        }
        normalize(&mut pi);
        if sweep % 20 == 19 {
            residual = generator.residual(&pi);
            if residual <= 0.1 * RESIDUAL_TOL {
                return Ok(pi);
            }
        }
    }
    Err(MarkovError::SolverDiverged { residual })
}

/// Mean occupancy, blocking probability and (via Little's law) mean charging
/// time per lot under `pi`.
pub fn exact_metrics(
    pi: &StationaryDistribution,
    arrivals: &ArrivalSpec,
) -> Result<Vec<LotMetrics>, MarkovError> {
    let space = pi.space();
    if arrivals.n_lots() != space.n_lots() {
        return Err(MarkovError::LotCount {
            what: "arrival specification",
            expected: space.n_lots(),
            got: arrivals.n_lots(),
        });
    }
    let n = space.n_lots();
    let mut mean = vec![0.0; n];
    let mut blocking = vec![0.0; n];
    for (i, &p) in pi.probabilities().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (j, &c) in space.counts(i).iter().enumerate() {
            mean[j] += p * f64::from(c);
            if c == space.capacity() {
                blocking[j] += p;
            }
        }
    }
    Ok((0..n)
        .map(|j| {
            let accepted = arrivals.rates()[j] * (1.0 - blocking[j]);
            LotMetrics {
                mean_number: Estimate::exact(mean[j]),
                mean_charging_time: (accepted > 0.0).then(|| Estimate::exact(mean[j] / accepted)),
                blocking: Estimate::exact(blocking[j]),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powerflow::{NetworkConfig, PowerFlowModel};
    use approx::assert_abs_diff_eq;

    fn allocator(n: usize, k: u32, model: PowerFlowModel) -> Allocator {
        Allocator::new(NetworkConfig::new(n, 0.1, 0.05, k, model).unwrap())
    }

    // Birth-death closed form with a constant service rate mu.
    fn birth_death(lambda: f64, mu: f64, k: usize) -> Vec<f64> {
        let rho = lambda / mu;
        let weights: Vec<f64> = (0..=k).map(|i| rho.powi(i as i32)).collect();
        let total: f64 = weights.iter().sum();
        weights.iter().map(|w| w / total).collect()
    }

    #[test]
    fn zero_arrivals_concentrate_on_empty() {
        let a = allocator(2, 3, PowerFlowModel::Distflow);
        let pi = stationary_distribution(&ArrivalSpec::uniform(2, 0.0).unwrap(), &a).unwrap();
        assert_eq!(pi.probability(&[0, 0]), 1.0);
        let m = exact_metrics(&pi, &ArrivalSpec::uniform(2, 0.0).unwrap()).unwrap();
        assert_eq!(m[0].mean_number.value, 0.0);
        assert!(m[0].mean_charging_time.is_none());
    }

    #[test]
    fn single_lot_capacity_one() {
        let a = allocator(1, 1, PowerFlowModel::Distflow);
        let arr = ArrivalSpec::uniform(1, 0.1).unwrap();
        let pi = stationary_distribution(&arr, &a).unwrap();
        let mu = 0.05 / (0.1 * 0.95);
        let expect = birth_death(0.1, mu, 1);
        assert_abs_diff_eq!(pi.probabilities()[0], expect[0], epsilon = 1e-9);
        assert_abs_diff_eq!(pi.probabilities()[1], 0.1596639, epsilon = 1e-7);
        assert!(pi.residual() <= RESIDUAL_TOL);
        let m = exact_metrics(&pi, &arr).unwrap();
        assert_abs_diff_eq!(m[0].mean_number.value, 0.1596639, epsilon = 1e-7);
        assert_abs_diff_eq!(m[0].mean_charging_time.unwrap().value, 1.9, epsilon = 1e-7);
        assert_abs_diff_eq!(m[0].blocking.value, 0.1596639, epsilon = 1e-7);
    }

    #[test]
    fn single_lot_capacity_two() {
        let a = allocator(1, 2, PowerFlowModel::Distflow);
        let arr = ArrivalSpec::uniform(1, 0.1).unwrap();
        let pi = stationary_distribution(&arr, &a).unwrap();
        let expect = birth_death(0.1, 0.05 / (0.1 * 0.95), 2);
        for (p, e) in pi.probabilities().iter().zip(&expect) {
            assert_abs_diff_eq!(p, e, epsilon = 1e-12);
        }
        let m = exact_metrics(&pi, &arr).unwrap();
        // (0.19 + 2 * 0.0361) / 1.2261
        assert_abs_diff_eq!(m[0].mean_number.value, 0.2138488, epsilon = 1e-7);
    }

    #[test]
    fn gauss_seidel_agrees_with_banded() {
        let a = allocator(2, 6, PowerFlowModel::Distflow);
        let arr = ArrivalSpec::from_rates(vec![0.15, 0.08]).unwrap();
        let table = AllocationTable::build(&a).unwrap();
        let g = Generator { table: &table, rates: arr.rates() };
        let n = table.space().len();
        let mut direct = banded_solve(&g, n, table.space().stride(0));
        normalize(&mut direct);
        let iterative = gauss_seidel(&g, n).unwrap();
        for (d, i) in direct.iter().zip(&iterative) {
            assert_abs_diff_eq!(d, i, epsilon = 1e-9);
        }
        assert!(g.residual(&direct) <= RESIDUAL_TOL);
    }

    #[test]
    fn capacity_bound_on_means() {
        let a = allocator(2, 4, PowerFlowModel::LinearizedDistflow);
        let arr = ArrivalSpec::uniform(2, 0.6).unwrap();
        let pi = stationary_distribution(&arr, &a).unwrap();
        let total: f64 = pi.probabilities().iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        let m = exact_metrics(&pi, &arr).unwrap();
        let sum: f64 = m.iter().map(|l| l.mean_number.value).sum();
        assert!(sum <= 8.0);
    }

    #[test]
    fn oversized_space_rejected() {
        let a = allocator(3, 100, PowerFlowModel::LinearizedDistflow);
        let arr = ArrivalSpec::uniform(3, 0.1).unwrap();
        assert!(matches!(stationary_distribution(&arr, &a), Err(MarkovError::StateSpaceTooLarge { .. })));
    }
}
