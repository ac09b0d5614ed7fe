//! Derivative-free local minimization (Nelder-Mead) used by the MLE fit.

use std::cell::Cell;

pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
}

pub(crate) struct NelderMead {
    pub initial_step: f64,
    pub max_evaluations: usize,
    pub tolerance: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            initial_step: 0.5,
            max_evaluations: 600,
            tolerance: 1e-9,
        }
    }
}

impl NelderMead {
    /// Minimizes `f` from `start`. Non-finite values are treated as +inf, so
    /// the returned value never exceeds `f(start)`.
    pub fn minimize<F: FnMut(&[f64]) -> f64>(&self, mut f: F, start: &[f64]) -> Minimum {
        let n = start.len();
        let evaluations = Cell::new(0usize);
        let mut eval = |x: &[f64]| {
            evaluations.set(evaluations.get() + 1);
            let v = f(x);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };

        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        simplex.push((start.to_vec(), eval(start)));
        for i in 0..n {
            let mut x = start.to_vec();
            x[i] += self.initial_step;
            let v = eval(&x);
            simplex.push((x, v));
        }

        let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
        loop {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let best = simplex[0].1;
            let worst = simplex[n].1;
            let spread = if best.is_finite() && worst.is_finite() {
                (worst - best).abs()
            } else {
                f64::INFINITY
            };
            let size = simplex[1..]
                .iter()
                .map(|(x, _)| {
                    x.iter()
                        .zip(&simplex[0].0)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            if (spread <= self.tolerance * (1.0 + best.abs()) && size < 1e-6)
                || size < 1e-10
                || evaluations.get() >= self.max_evaluations
            {
                break;
            }

            let mut centroid = vec![0.0; n];
            for (x, _) in &simplex[..n] {
                for (c, xi) in centroid.iter_mut().zip(x) {
                    *c += xi / n as f64;
                }
            }
            let along = |t: f64, x: &[f64]| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(x)
                    .map(|(c, xi)| c + t * (xi - c))
                    .collect()
            };

            let reflected = along(-alpha, &simplex[n].0);
            let fr = eval(&reflected);
            if fr < simplex[0].1 {
                let expanded = along(-gamma, &simplex[n].0);
                let fe = eval(&expanded);
                simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
                continue;
            }
            if fr < simplex[n - 1].1 {
                simplex[n] = (reflected, fr);
                continue;
            }
            let contracted = if fr < simplex[n].1 {
                along(-rho, &simplex[n].0)
            } else {
                along(rho, &simplex[n].0)
            };
            let fc = eval(&contracted);
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (contracted, fc);
                continue;
            }
            let anchor = simplex[0].0.clone();
            for (x, v) in simplex.iter_mut().skip(1) {
                for (xi, a) in x.iter_mut().zip(&anchor) {
                    *xi = a + sigma * (*xi - a);
                }
                *v = eval(x);
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, value) = simplex.swap_remove(0);
        Minimum { x, value }
    }
}
