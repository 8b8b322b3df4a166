//! Test-only oracles, kept independent of the code paths they check.

#![allow(dead_code)]

use gridshare::allocator::StateVector;
use gridshare::NetworkConfig;

/// Maximizes `sum X_j log p_j` subject to `sum_k 2 r k p_k = B` by Newton's method
/// on the free coordinates, eliminating the last occupied lot through the
/// constraint. The Hessian comes from central differences of the gradient, so
/// no structure beyond the objective's gradient is used.
pub fn generic_ld_maximizer(x: &StateVector, cfg: &NetworkConfig) -> Vec<f64> {
    let counts: Vec<f64> = x.counts().iter().map(|&c| f64::from(c)).collect();
    let support: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] > 0.0).collect();
    let mut p = vec![0.0; counts.len()];
    if support.is_empty() {
        return p;
    }
    let coef = |k: usize| 2.0 * cfg.resistance() * (k + 1) as f64;
    let budget = cfg.ld_budget();
    let last = *support.last().unwrap();
    let free: Vec<usize> = support[..support.len() - 1].to_vec();

    let complete = |z: &[f64]| -> Option<Vec<f64>> {
        let mut p = vec![0.0; counts.len()];
        let mut spent = 0.0;
        for (&j, &v) in free.iter().zip(z) {
            if v <= 0.0 {
                return None;
            }
            p[j] = v;
            spent += coef(j) * v;
        }
        p[last] = (budget - spent) / coef(last);
        (p[last] > 0.0).then_some(p)
    };
    let objective = |p: &[f64]| -> f64 { support.iter().map(|&j| counts[j] * p[j].ln()).sum() };
    let gradient = |z: &[f64]| -> Vec<f64> {
        let p = complete(z).expect("interior point");
        free.iter()
            .map(|&j| counts[j] / p[j] - counts[last] * coef(j) / (coef(last) * p[last]))
            .collect()
    };

    // Equal budget shares as the starting point.
    let share = budget / support.len() as f64;
    let mut z: Vec<f64> = free.iter().map(|&j| share / coef(j)).collect();
    let m = z.len();
    for _ in 0..200 {
        let g = gradient(&z);
        let mut hess = vec![vec![0.0; m]; m];
        for k in 0..m {
            let h = 1e-6 * z[k];
            let mut up = z.clone();
            up[k] += h;
            let mut down = z.clone();
            down[k] -= h;
            let (gu, gd) = (gradient(&up), gradient(&down));
            for i in 0..m {
                hess[i][k] = (gu[i] - gd[i]) / (2.0 * h);
            }
        }
        let step = solve_dense(hess, g.iter().map(|v| -v).collect());
        let base = objective(&complete(&z).unwrap());
        let mut alpha = 1.0;
        let mut moved = false;
        while alpha > 1e-12 {
            let trial: Vec<f64> = z.iter().zip(&step).map(|(a, d)| a + alpha * d).collect();
            if let Some(p) = complete(&trial) {
                if objective(&p) >= base - 1e-15 {
                    z = trial;
                    moved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        let size = step.iter().zip(&z).map(|(d, v)| (d / v).abs()).fold(0.0, f64::max);
        if !moved || size < 1e-14 {
            break;
        }
    }
    p = complete(&z).unwrap();
    p
}

/// Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// Stationary law of a birth-death chain on `0..=k` with constant rates.
pub fn birth_death(lambda: f64, mu: f64, k: usize) -> Vec<f64> {
    let rho = lambda / mu;
    let w: Vec<f64> = (0..=k).map(|i| rho.powi(i as i32)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Root voltage by direct evaluation of the recursion, written out independently.
pub fn reference_root_voltage(p: &[f64], r: f64) -> f64 {
    let n = p.len();
    let mut v = vec![1.0; n + 1];
    v[n - 1] = 1.0 + r * p[n - 1];
    for j in (1..n).rev() {
        v[j - 1] = 2.0 * v[j] - v[j + 1] + r * p[j - 1] / v[j];
    }
    v[0]
}
