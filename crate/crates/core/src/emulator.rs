//! Zero-mean Gaussian-process emulators with a product power-exponential
//! covariance (smoothness fixed at 2), one independent GP per output.
//!
//! Correlation parameters are stored as `rho_k = exp(-beta_k / 4)` so every
//! `rho_k` lives in `(0, 1)`; `precision` is the inverse marginal variance.
//! The nugget is expressed on the correlation scale, so the training
//! covariance diagonal is `(1 + nugget) / precision`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design_space::{latin_hypercube, SimulationDataset};
use crate::error::{CtoError, Result};
use crate::optimize::NelderMead;

pub const DEFAULT_NUGGET: f64 = 1e-8;
pub const SMOOTHNESS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub rho: Vec<f64>,
    pub precision: f64,
    pub nugget: f64,
}

impl Hyperparameters {
    pub fn new(rho: Vec<f64>, precision: f64, nugget: f64) -> Result<Self> {
        if let Some(r) = rho.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(CtoError::Argument(format!("rho must lie in (0, 1), got {r}")));
        }
        if !(precision > 0.0 && precision.is_finite()) {
            return Err(CtoError::Argument(format!("precision must be positive, got {precision}")));
        }
        if !(nugget >= 0.0 && nugget.is_finite()) {
            return Err(CtoError::Argument(format!("nugget must be nonnegative, got {nugget}")));
        }
        Ok(Self {
            rho,
            precision,
            nugget,
        })
    }

    pub fn dim(&self) -> usize {
        self.rho.len()
    }

    pub fn beta(&self) -> Vec<f64> {
        self.rho.iter().map(|r| -4.0 * r.ln()).collect()
    }

    fn from_unconstrained(z: &[f64], nugget: f64) -> Option<Self> {
        let (logit, log_precision) = z.split_at(z.len() - 1);
        let rho: Vec<f64> = logit.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        Self::new(rho, log_precision[0].exp(), nugget).ok()
    }
}

fn check_dims(a: &[f64], b: &[f64], h: &Hyperparameters) -> Result<()> {
    if a.len() != h.dim() {
        return Err(CtoError::shape("covariance input", h.dim(), a.len()));
    }
    if b.len() != h.dim() {
        return Err(CtoError::shape("covariance input", h.dim(), b.len()));
    }
    Ok(())
}

#[inline]
fn kernel(a: &[f64], b: &[f64], beta: &[f64], precision: f64) -> f64 {
    let mut s = 0.0;
    for k in 0..beta.len() {
        let d = a[k] - b[k];
        s += beta[k] * d * d;
    }
    (-s).exp() / precision
}

/// Covariance between two unit-scale inputs, without the nugget. The nugget
/// only enters on the diagonal of a training covariance matrix.
pub fn covariance(a: &[f64], b: &[f64], h: &Hyperparameters) -> Result<f64> {
    check_dims(a, b, h)?;
    Ok(kernel(a, b, &h.beta(), h.precision))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Training covariance, nugget included on the diagonal.
pub fn covariance_matrix(inputs: &DMatrix<f64>, h: &Hyperparameters) -> Result<DMatrix<f64>> {
    if inputs.ncols() != h.dim() {
        return Err(CtoError::shape("training inputs", h.dim(), inputs.ncols()));
    }
    let pts = rows(inputs);
    let beta = h.beta();
    let n = pts.len();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        c[(i, i)] = (1.0 + h.nugget) / h.precision;
        for j in 0..i {
            let v = kernel(&pts[i], &pts[j], &beta, h.precision);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}

pub(crate) fn cross_covariance(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    h: &Hyperparameters,
) -> DMatrix<f64> {
    let beta = h.beta();
    DMatrix::from_fn(a.len(), b.len(), |i, j| kernel(&a[i], &b[j], &beta, h.precision))
}

fn factorize(c: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(c).ok_or_else(|| {
        CtoError::Numerical(format!(
            "{what} covariance is not positive definite; try a larger nugget"
        ))
    })
}

/// `log N(y; 0, L L^T)` from a Cholesky factor.
pub(crate) fn gaussian_log_density(chol: &Cholesky<f64, Dyn>, residual: &DVector<f64>) -> f64 {
    let l = chol.l_dirty();
    let z = l
        .solve_lower_triangular(residual)
        .expect("cholesky factor has a positive diagonal");
    let log_det_half: f64 = (0..residual.len()).map(|i| l[(i, i)].ln()).sum();
    -0.5 * z.norm_squared() - log_det_half - 0.5 * residual.len() as f64 * (2.0 * PI).ln()
}

pub fn log_marginal_likelihood(
    h: &Hyperparameters,
    inputs: &DMatrix<f64>,
    outputs: &DVector<f64>,
) -> Result<f64> {
    if inputs.nrows() == 0 {
        return Err(CtoError::InsufficientData("likelihood needs at least one run".into()));
    }
    if outputs.len() != inputs.nrows() {
        return Err(CtoError::shape("training outputs", inputs.nrows(), outputs.len()));
    }
    let chol = factorize(covariance_matrix(inputs, h)?, "training")?;
    Ok(gaussian_log_density(&chol, outputs))
}

/// Squared coordinate differences, one upper-triangular buffer per input
/// dimension, so repeated likelihood evaluations during a fit only redo exps.
struct PairwiseDistances {
    n: usize,
    per_dim: Vec<Vec<f64>>,
}

impl PairwiseDistances {
    fn new(inputs: &DMatrix<f64>) -> Self {
        let n = inputs.nrows();
        let per_dim = (0..inputs.ncols())
            .map(|k| {
                let mut buf = Vec::with_capacity(n * (n - 1) / 2);
                for i in 0..n {
                    for j in 0..i {
                        let d = inputs[(i, k)] - inputs[(j, k)];
                        buf.push(d * d);
                    }
                }
                buf
            })
            .collect();
        Self { n, per_dim }
    }

    fn log_likelihood(&self, h: &Hyperparameters, y: &DVector<f64>) -> Option<f64> {
        let beta = h.beta();
        let mut c = DMatrix::zeros(self.n, self.n);
        let mut idx = 0;
        for i in 0..self.n {
            c[(i, i)] = (1.0 + h.nugget) / h.precision;
            for j in 0..i {
                let s: f64 = beta
                    .iter()
                    .zip(&self.per_dim)
                    .map(|(b, d)| b * d[idx])
                    .sum();
                let v = (-s).exp() / h.precision;
                c[(i, j)] = v;
                c[(j, i)] = v;
                idx += 1;
            }
        }
        let chol = Cholesky::new(c)?;
        Some(gaussian_log_density(&chol, y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub starts: usize,
    pub seed: u64,
    pub nugget: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            seed: 0,
            nugget: DEFAULT_NUGGET,
        }
    }
}

// Start box on the unconstrained scale: logit(rho) and log(precision).
const LOGIT_RHO_RANGE: (f64, f64) = (-2.0, 5.0);
const LOG_PRECISION_RANGE: (f64, f64) = (-2.0, 2.0);

/// Maximum-likelihood hyperparameters for one output, by multi-start
/// Nelder-Mead over `(logit rho, log precision)`.
pub fn fit_mle(
    dataset: &SimulationDataset,
    output_index: usize,
    options: &FitOptions,
) -> Result<Hyperparameters> {
    if output_index >= dataset.m() {
        return Err(CtoError::shape("output index", dataset.m(), output_index));
    }
    if options.starts == 0 {
        return Err(CtoError::Argument("fit needs at least one start".into()));
    }
    let y: DVector<f64> = dataset.outputs().column(output_index).into_owned();
    fit_mle_raw(dataset.inputs(), &y, options)
}

pub(crate) fn fit_mle_raw(
    inputs: &DMatrix<f64>,
    y: &DVector<f64>,
    options: &FitOptions,
) -> Result<Hyperparameters> {
    let d = inputs.ncols();
    let distances = PairwiseDistances::new(inputs);
    let objective = |z: &[f64]| -> f64 {
        match Hyperparameters::from_unconstrained(z, options.nugget) {
            Some(h) => distances.log_likelihood(&h, y).map_or(f64::INFINITY, |ll| -ll),
            None => f64::INFINITY,
        }
    };

    // start 0 is the centre of the box; the rest come from a Latin
    // hypercube, so a larger start count always contains the smaller one's
    // first start
    let to_box = |k: usize, u: f64| {
        let (lo, hi) = if k < d { LOGIT_RHO_RANGE } else { LOG_PRECISION_RANGE };
        lo + u * (hi - lo)
    };
    let mut starts: Vec<Vec<f64>> = vec![(0..=d).map(|k| to_box(k, 0.5)).collect()];
    if options.starts > 1 {
        let unit = latin_hypercube(options.starts - 1, d + 1, options.seed)?;
        starts.extend(
            unit.row_iter()
                .map(|row| row.iter().enumerate().map(|(k, &u)| to_box(k, u)).collect()),
        );
    }

    let optimizer = NelderMead {
        initial_step: 1.0,
        max_evaluations: 250 * (d + 1),
        tolerance: 1e-10,
    };
    let polish = NelderMead {
        initial_step: 0.1,
        max_evaluations: 100 * (d + 1),
        tolerance: 1e-12,
    };
    let results: Vec<(Vec<f64>, f64)> = starts
        .par_iter()
        .map(|start| {
            let first = optimizer.minimize(objective, start);
            let second = polish.minimize(objective, &first.x);
            if second.value <= first.value {
                (second.x, second.value)
            } else {
                (first.x, first.value)
            }
        })
        .collect();

    // ties resolve to the lowest start index, keeping fits deterministic
    let (best_z, best_value) = results
        .into_iter()
        .reduce(|a, b| if b.1 < a.1 { b } else { a })
        .expect("at least one start");
    if !best_value.is_finite() {
        return Err(CtoError::Fit(
            "every start failed to factorize the training covariance".into(),
        ));
    }
    Hyperparameters::from_unconstrained(&best_z, options.nugget)
        .ok_or_else(|| CtoError::Fit("optimizer left the valid parameter region".into()))
}

/// One fitted output: hyperparameters plus the cached training factor.
#[derive(Debug, Clone)]
pub struct OutputGp {
    hyper: Hyperparameters,
    training: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    /// `L^{-1} y`
    whitened: DVector<f64>,
    /// `C^{-1} y`
    weights: DVector<f64>,
}

impl OutputGp {
    pub fn new(hyper: Hyperparameters, inputs: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        if y.len() != inputs.nrows() {
            return Err(CtoError::shape("training outputs", inputs.nrows(), y.len()));
        }
        let chol = factorize(covariance_matrix(inputs, &hyper)?, "training")?;
        let whitened = chol
            .l_dirty()
            .solve_lower_triangular(y)
            .expect("positive diagonal");
        let weights = chol.solve(y);
        Ok(Self {
            hyper,
            training: rows(inputs),
            chol,
            whitened,
            weights,
        })
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    /// Lower-triangular factor of the training covariance.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    fn predict_rows(&self, queries: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let k_tq = cross_covariance(&self.training, queries, &self.hyper);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k_tq)
            .expect("positive diagonal");
        let mean = v.tr_mul(&self.whitened);
        let k_qq = cross_covariance(queries, queries, &self.hyper);
        let mut cov = k_qq - v.tr_mul(&v);
        let s = queries.len();
        for i in 0..s {
            for j in 0..i {
                let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = avg;
                cov[(j, i)] = avg;
            }
            if cov[(i, i)] < 0.0 {
                cov[(i, i)] = 0.0;
            }
        }
        (mean, cov)
    }

    fn predict_mean_rows(&self, queries: &[Vec<f64>]) -> DVector<f64> {
        let k_tq = cross_covariance(&self.training, queries, &self.hyper);
        k_tq.tr_mul(&self.weights)
    }
}

/// Independent GPs, one per standardized output.
#[derive(Debug, Clone)]
pub struct Emulator {
    outputs: Vec<OutputGp>,
    input_dim: usize,
}

impl Emulator {
    /// Fits every output of `dataset` by maximum likelihood. Output `j`
    /// uses a start design seeded from `options.seed + j`.
    pub fn fit(dataset: &SimulationDataset, options: &FitOptions) -> Result<Self> {
        let hypers = (0..dataset.m())
            .map(|j| {
                let opts = FitOptions {
                    seed: options.seed.wrapping_add(j as u64),
                    ..*options
                };
                fit_mle(dataset, j, &opts)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_hyperparameters(dataset, hypers)
    }

    pub fn from_hyperparameters(
        dataset: &SimulationDataset,
        hypers: Vec<Hyperparameters>,
    ) -> Result<Self> {
        if hypers.len() != dataset.m() {
            return Err(CtoError::shape("hyperparameter sets", dataset.m(), hypers.len()));
        }
        let outputs = hypers
            .into_iter()
            .enumerate()
            .map(|(j, h)| {
                if h.dim() != dataset.space().dim() {
                    return Err(CtoError::shape("rho length", dataset.space().dim(), h.dim()));
                }
                OutputGp::new(h, dataset.inputs(), &dataset.outputs().column(j).into_owned())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            outputs,
            input_dim: dataset.space().dim(),
        })
    }

    /// Replaces every output's nugget and refactorizes.
    pub fn with_nugget(&self, dataset: &SimulationDataset, nugget: f64) -> Result<Self> {
        let hypers = self
            .outputs
            .iter()
            .map(|o| Hyperparameters::new(o.hyper.rho.clone(), o.hyper.precision, nugget))
            .collect::<Result<Vec<_>>>()?;
        Self::from_hyperparameters(dataset, hypers)
    }

    pub fn outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output(&self, output_index: usize) -> Result<&OutputGp> {
        self.outputs.get(output_index).ok_or_else(|| {
            CtoError::State(format!(
                "no fitted GP for output {output_index} (emulator has {})",
                self.outputs.len()
            ))
        })
    }

    pub fn hyperparameters(&self) -> Vec<Hyperparameters> {
        self.outputs.iter().map(|o| o.hyper.clone()).collect()
    }

    fn query_rows(&self, queries: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
        if queries.ncols() != self.input_dim {
            return Err(CtoError::shape("query columns", self.input_dim, queries.ncols()));
        }
        Ok(rows(queries))
    }

    /// Predictive mean and covariance of one output at `queries` (one
    /// unit-scale point per row).
    pub fn predict(
        &self,
        output_index: usize,
        queries: &DMatrix<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let gp = self.output(output_index)?;
        Ok(gp.predict_rows(&self.query_rows(queries)?))
    }

    pub fn predict_mean(&self, output_index: usize, queries: &DMatrix<f64>) -> Result<DVector<f64>> {
        let gp = self.output(output_index)?;
        Ok(gp.predict_mean_rows(&self.query_rows(queries)?))
    }

    pub(crate) fn predict_points(
        &self,
        output_index: usize,
        queries: &[Vec<f64>],
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok(self.output(output_index)?.predict_rows(queries))
    }

    pub(crate) fn predict_mean_points(
        &self,
        output_index: usize,
        queries: &[Vec<f64>],
    ) -> Result<DVector<f64>> {
        Ok(self.output(output_index)?.predict_mean_rows(queries))
    }
}

/// On-disk form of a fitted emulator. Training data is referenced by path
/// and SHA-256 of the dataset file rather than embedded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmulatorDocument {
    pub dataset_path: String,
    pub dataset_sha256: String,
    pub output_names: Vec<String>,
    pub smoothness: f64,
    pub mean: f64,
    pub hyperparameters: Vec<Hyperparameters>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design_space::{DesignSpace, VariableSpec};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn h1(rho: f64, precision: f64, nugget: f64) -> Hyperparameters {
        Hyperparameters::new(vec![rho], precision, nugget).unwrap()
    }

    #[test]
    fn covariance_hand_values() {
        let h = h1(0.5, 1.0, 0.0);
        assert_eq!(covariance(&[0.3], &[0.3], &h).unwrap(), 1.0);
        assert_abs_diff_eq!(covariance(&[0.0], &[0.5], &h).unwrap(), 0.5, epsilon = 1e-14);
        assert_eq!(
            covariance(&[0.4], &[0.4], &h1(0.5, 4.0, 0.0)).unwrap(),
            0.25
        );
    }

    #[test]
    fn covariance_table_fixture() {
        // deflection-output MLE hyperparameters from a reference fit
        let h = Hyperparameters::new(vec![0.7239, 0.9788, 0.9906], 0.0177, 0.0).unwrap();
        let c = covariance(&[0.5, 0.3, 0.8], &[0.0, 0.3, 0.8], &h).unwrap();
        let expected = 0.7239 / 0.0177;
        assert!(((c - expected) / expected).abs() < 5e-5, "{c} vs {expected}");
        assert_eq!(format!("{c:.2}"), "40.90");
    }

    #[test]
    fn covariance_is_symmetric_and_checks_shape() {
        let h = Hyperparameters::new(vec![0.3, 0.8], 2.0, 0.0).unwrap();
        let a = [0.1, 0.9];
        let b = [0.7, 0.2];
        assert_eq!(covariance(&a, &b, &h).unwrap(), covariance(&b, &a, &h).unwrap());
        assert!(matches!(
            covariance(&[0.1], &b, &h),
            Err(CtoError::Shape { .. })
        ));
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(Hyperparameters::new(vec![1.0], 1.0, 0.0).is_err());
        assert!(Hyperparameters::new(vec![0.0], 1.0, 0.0).is_err());
        assert!(Hyperparameters::new(vec![0.5], 0.0, 0.0).is_err());
        assert!(Hyperparameters::new(vec![0.5], 1.0, -1e-3).is_err());
    }

    #[test]
    fn log_likelihood_single_run() {
        let x = DMatrix::from_element(1, 1, 0.2);
        let h = h1(0.5, 1.0, 0.0);
        let ll0 = log_marginal_likelihood(&h, &x, &DVector::from_element(1, 0.0)).unwrap();
        assert_abs_diff_eq!(ll0, -0.5 * (2.0 * PI).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ll0, -0.91894, epsilon = 1e-5);
        let ll2 = log_marginal_likelihood(&h, &x, &DVector::from_element(1, 2.0)).unwrap();
        assert_abs_diff_eq!(ll2, -2.91894, epsilon = 1e-5);
    }

    /// Dense-inverse log density, independent of the Cholesky path.
    fn dense_log_density(c: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
        let inv = c.clone().try_inverse().unwrap();
        let det = c.determinant();
        -0.5 * (y.transpose() * inv * y)[(0, 0)] - 0.5 * det.ln()
            - 0.5 * y.len() as f64 * (2.0 * PI).ln()
    }

    #[test]
    fn log_likelihood_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let x = DMatrix::from_fn(5, 2, |_, _| rng.random::<f64>());
            let y = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let h = Hyperparameters::new(
                vec![rng.random_range(0.05..0.9), rng.random_range(0.05..0.9)],
                rng.random_range(0.3..3.0),
                1e-6,
            )
            .unwrap();
            let c = covariance_matrix(&x, &h).unwrap();
            let ll = log_marginal_likelihood(&h, &x, &y).unwrap();
            assert_abs_diff_eq!(ll, dense_log_density(&c, &y), epsilon = 1e-8);
        }
    }

    #[test]
    fn log_likelihood_reports_factorization_failure() {
        // duplicated inputs without nugget give a singular covariance
        let x = DMatrix::from_column_slice(2, 1, &[0.5, 0.5]);
        let y = DVector::from_column_slice(&[1.0, -1.0]);
        let err = log_marginal_likelihood(&h1(0.5, 1.0, 0.0), &x, &y).unwrap_err();
        assert!(format!("{err}").contains("nugget"));
    }

    fn one_d_dataset(x: &[f64], y: &[f64]) -> SimulationDataset {
        let space = DesignSpace::new(vec![VariableSpec::design("t", 0.0, 1.0)]).unwrap();
        SimulationDataset::new(
            space,
            DMatrix::from_column_slice(x.len(), 1, x),
            DMatrix::from_column_slice(y.len(), 1, y),
            vec!["y".into()],
        )
        .unwrap()
    }

    #[test]
    fn predict_single_training_pair() {
        let x = DMatrix::from_element(1, 1, 0.0);
        let gp = OutputGp::new(h1(0.5, 1.0, 0.0), &x, &DVector::from_element(1, 2.0)).unwrap();
        let (mean, cov) = gp.predict_rows(&[vec![0.5]]);
        assert_abs_diff_eq!(mean[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[(0, 0)], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn predict_interpolates_with_tiny_nugget() {
        let xs: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (6.0 * x).sin() + x).collect();
        let ds = one_d_dataset(&xs, &ys);
        let em = Emulator::from_hyperparameters(&ds, vec![h1(0.01, 1.0, 1e-10)]).unwrap();
        let (mean, cov) = em.predict(0, ds.inputs()).unwrap();
        for i in 0..xs.len() {
            assert!((mean[i] - ds.outputs()[(i, 0)]).abs() < 1e-6);
            assert!(cov[(i, i)] >= 0.0 && cov[(i, i)] < 1e-6);
        }
        let mean_only = em.predict_mean(0, ds.inputs()).unwrap();
        for i in 0..xs.len() {
            assert_abs_diff_eq!(mean_only[i], mean[i], epsilon = 1e-8);
        }
        assert!(matches!(em.predict(1, ds.inputs()), Err(CtoError::State(_))));
    }

    #[test]
    fn predict_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 20;
        let x = DMatrix::from_fn(n, 3, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let h = Hyperparameters::new(vec![0.3, 0.6, 0.45], 1.7, 1e-8).unwrap();
        let gp = OutputGp::new(h.clone(), &x, &y).unwrap();
        let q = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>());
        let (mean, cov) = gp.predict_rows(&rows(&q));

        let c_inv = covariance_matrix(&x, &h).unwrap().try_inverse().unwrap();
        let k_qt = DMatrix::from_fn(3, n, |i, j| {
            covariance(&rows(&q)[i], &rows(&x)[j], &h).unwrap()
        });
        let k_qq = DMatrix::from_fn(3, 3, |i, j| {
            covariance(&rows(&q)[i], &rows(&q)[j], &h).unwrap()
        });
        let dense_mean = &k_qt * &c_inv * &y;
        let dense_cov = k_qq - &k_qt * &c_inv * k_qt.transpose();
        for i in 0..3 {
            assert_abs_diff_eq!(mean[i], dense_mean[i], epsilon = 1e-8);
            for j in 0..3 {
                assert_abs_diff_eq!(cov[(i, j)], dense_cov[(i, j)], epsilon = 1e-8);
                assert_eq!(cov[(i, j)], cov[(j, i)]);
            }
        }
    }

    /// Draws one GP realization on `x` with the given hyperparameters.
    fn draw_gp(x: &DMatrix<f64>, h: &Hyperparameters, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let chol = Cholesky::new(covariance_matrix(x, h).unwrap()).unwrap();
        let z = DVector::from_fn(x.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
        chol.l() * z
    }

    #[test]
    fn fit_recovers_known_hyperparameters() {
        let truth = h1(0.9, 1.0, 1e-8);
        let mut successes = 0;
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = latin_hypercube(100, 1, seed).unwrap();
            let y = draw_gp(&x, &truth, &mut rng);
            let fit = fit_mle_raw(&x, &y, &FitOptions { seed, ..Default::default() }).unwrap();
            let rho_ok = (fit.rho[0] - 0.9).abs() <= 0.1;
            let precision_ok = fit.precision >= 0.5 && fit.precision <= 2.0;
            if rho_ok && precision_ok {
                successes += 1;
            }
        }
        assert!(successes >= 3, "only {successes}/5 seeds recovered the truth");
    }

    #[test]
    fn more_starts_never_hurt() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = latin_hypercube(40, 2, 1).unwrap();
        let truth = Hyperparameters::new(vec![0.6, 0.95], 1.0, 1e-8).unwrap();
        let y = draw_gp(&x, &truth, &mut rng);
        let ll = |h: &Hyperparameters| log_marginal_likelihood(h, &x, &y).unwrap();
        let one = fit_mle_raw(&x, &y, &FitOptions { starts: 1, seed: 4, ..Default::default() })
            .unwrap();
        let eight = fit_mle_raw(&x, &y, &FitOptions { starts: 8, seed: 4, ..Default::default() })
            .unwrap();
        assert!(ll(&eight) >= ll(&one) - 1e-6, "{} < {}", ll(&eight), ll(&one));
    }

    #[test]
    fn white_noise_fit_dominates_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = latin_hypercube(30, 2, 2).unwrap();
        let y = DVector::from_fn(30, |_, _| rng.sample::<f64, _>(StandardNormal));
        let fit = fit_mle_raw(&x, &y, &FitOptions::default()).unwrap();
        let fixed = Hyperparameters::new(vec![0.5, 0.5], 1.0, DEFAULT_NUGGET).unwrap();
        assert!(
            log_marginal_likelihood(&fit, &x, &y).unwrap()
                >= log_marginal_likelihood(&fixed, &x, &y).unwrap()
        );
    }

    #[test]
    fn fit_rejects_zero_starts() {
        let ds = one_d_dataset(&[0.0, 0.5, 1.0], &[1.0, 0.0, 2.0]);
        let opts = FitOptions {
            starts: 0,
            ..Default::default()
        };
        assert!(fit_mle(&ds, 0, &opts).is_err());
    }

    #[test]
    fn factorizes_large_designs_with_default_nugget() {
        let x = latin_hypercube(500, 3, 77).unwrap();
        let smooth = Hyperparameters::new(vec![0.99, 0.99, 0.99], 1.0, DEFAULT_NUGGET).unwrap();
        let rough = Hyperparameters::new(vec![0.01, 0.2, 0.6], 0.05, DEFAULT_NUGGET).unwrap();
        for h in [smooth, rough] {
            assert!(Cholesky::new(covariance_matrix(&x, &h).unwrap()).is_some());
        }
    }

    proptest::proptest! {
        #[test]
        fn predictive_covariance_is_symmetric(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(10, 2, |_, _| rng.random::<f64>());
            let y = DVector::from_fn(10, |_, _| rng.sample::<f64, _>(StandardNormal));
            let h = Hyperparameters::new(
                vec![rng.random_range(0.01..0.99), rng.random_range(0.01..0.99)],
                rng.random_range(0.1..10.0),
                1e-8,
            ).unwrap();
            let gp = OutputGp::new(h, &x, &y).unwrap();
            let q: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.random(), rng.random()]).collect();
            let (_, cov) = gp.predict_rows(&q);
            for i in 0..4 {
                proptest::prop_assert!(cov[(i, i)] >= 0.0);
                for j in 0..4 {
                    proptest::prop_assert!((cov[(i, j)] - cov[(j, i)]).abs() <= 1e-10);
                }
            }
        }
    }
}
