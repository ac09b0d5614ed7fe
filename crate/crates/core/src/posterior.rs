//! Log-posterior over design settings `theta` (unit scale) and per-output
//! target noise variances `sigma2`, with targets treated as observations.
//!
//! Two response paths share one interface:
//!
//! * emulator: the density of the targets conditional on the training runs,
//!   i.e. `N(y_t; mu*(theta), Sigma*(theta) + sigma2 I)` per output. This
//!   differs from the joint density of training runs and targets only by the
//!   (theta, sigma2)-free marginal of the training runs.
//! * direct: independent normals around a directly evaluated model.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design_space::{DesignSpace, OutputTransform};
use crate::emulator::{gaussian_log_density, Emulator};
use crate::error::{CtoError, Result};
use crate::models::ComputerModel;

pub const NOISE_PRIOR_SHAPE: f64 = 4.0;
pub const NOISE_PRIOR_SCALE: f64 = 0.125;
/// Flat-likelihood noise variance for the preliminary front-finding run.
pub const PRELIMINARY_SIGMA2: f64 = 5e7;
pub const PREDICTIVE_JITTER: f64 = 1e-8;
pub const DEFAULT_GRID_POINTS: usize = 8;

/// Evenly spaced control grid on `[0, 1]^p` with `g` points per control
/// dimension (tensor product). `p = 0` gives one empty point; `g = 1` sits at
/// the centre.
pub fn control_grid(p: usize, g: usize) -> Result<Vec<Vec<f64>>> {
    if g == 0 {
        return Err(CtoError::Argument("control grid needs g >= 1".into()));
    }
    let axis: Vec<f64> = if g == 1 {
        vec![0.5]
    } else {
        (0..g).map(|j| j as f64 / (g - 1) as f64).collect()
    };
    let mut grid = vec![Vec::new()];
    for _ in 0..p {
        grid = grid
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&a| {
                    let mut pt = prefix.clone();
                    pt.push(a);
                    pt
                })
            })
            .collect();
    }
    Ok(grid)
}

/// Target outcomes, constant across the control grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    control_grid: Vec<Vec<f64>>,
    targets: Vec<f64>,
    native_targets: Vec<f64>,
}

impl TargetSet {
    pub fn new(
        control_grid: Vec<Vec<f64>>,
        native_targets: Vec<f64>,
        transform: &OutputTransform,
    ) -> Result<Self> {
        if control_grid.is_empty() {
            return Err(CtoError::Argument("target control grid is empty".into()));
        }
        if native_targets.len() != transform.outputs() {
            return Err(CtoError::shape("targets", transform.outputs(), native_targets.len()));
        }
        if native_targets.iter().any(|t| !t.is_finite()) {
            return Err(CtoError::Argument("targets must be finite".into()));
        }
        let p = control_grid[0].len();
        if control_grid.iter().any(|pt| pt.len() != p) {
            return Err(CtoError::Argument("ragged control grid".into()));
        }
        Ok(Self {
            targets: transform.standardize_vec(&native_targets),
            control_grid,
            native_targets,
        })
    }

    pub fn from_standardized(
        control_grid: Vec<Vec<f64>>,
        targets: Vec<f64>,
        transform: &OutputTransform,
    ) -> Result<Self> {
        Self::new(control_grid, transform.destandardize_vec(&targets), transform)
    }

    pub fn control_grid(&self) -> &[Vec<f64>] {
        &self.control_grid
    }

    pub fn g(&self) -> usize {
        self.control_grid.len()
    }

    /// Standardized targets, one per output.
    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn native_targets(&self) -> &[f64] {
        &self.native_targets
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// Known target-noise variance on the standardized scale.
    Fixed(f64),
    /// Variance sampled under the Gamma(shape 4, scale 1/8) prior.
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    modes: Vec<NoiseMode>,
}

impl NoiseSpec {
    pub fn new(modes: Vec<NoiseMode>) -> Result<Self> {
        for mode in &modes {
            if let NoiseMode::Fixed(s) = mode {
                if !(*s > 0.0 && s.is_finite()) {
                    return Err(CtoError::Argument(format!(
                        "fixed noise variance must be positive, got {s}"
                    )));
                }
            }
        }
        Ok(Self { modes })
    }

    pub fn fixed(sigma2: Vec<f64>) -> Result<Self> {
        Self::new(sigma2.into_iter().map(NoiseMode::Fixed).collect())
    }

    pub fn sampled(m: usize) -> Self {
        Self {
            modes: vec![NoiseMode::Sampled; m],
        }
    }

    pub fn preliminary(m: usize) -> Self {
        Self {
            modes: vec![NoiseMode::Fixed(PRELIMINARY_SIGMA2); m],
        }
    }

    pub fn modes(&self) -> &[NoiseMode] {
        &self.modes
    }

    pub fn any_sampled(&self) -> bool {
        self.modes.contains(&NoiseMode::Sampled)
    }

    /// Fixed values, and the prior mean for sampled entries.
    pub fn initial_sigma2(&self) -> Vec<f64> {
        self.modes
            .iter()
            .map(|m| match m {
                NoiseMode::Fixed(s) => *s,
                NoiseMode::Sampled => NOISE_PRIOR_SHAPE * NOISE_PRIOR_SCALE,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum Response {
    Emulator(Arc<Emulator>),
    Direct(Arc<ComputerModel>),
}

impl Response {
    pub fn outputs(&self) -> usize {
        match self {
            Response::Emulator(em) => em.outputs(),
            Response::Direct(model) => model.m(),
        }
    }
}

/// Per-output predictive moments at the target points, standardized scale.
/// The direct path has zero covariance.
#[derive(Debug, Clone)]
pub struct Predictive {
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

/// What the sampler needs after fixing `theta`.
#[derive(Debug, Clone)]
pub enum Conditioned {
    Emulator(Predictive),
    /// Residuals `target - model` per output, one per grid point.
    Direct(Vec<DVector<f64>>),
}

#[derive(Debug, Clone)]
pub struct PosteriorSpec {
    response: Response,
    space: DesignSpace,
    target: TargetSet,
    theta_bounds: Vec<(f64, f64)>,
    noise: NoiseSpec,
    output_transform: OutputTransform,
}

pub fn log_prior_theta(theta: &[f64], bounds: &[(f64, f64)]) -> f64 {
    let inside = theta.len() == bounds.len()
        && theta
            .iter()
            .zip(bounds)
            .all(|(t, (lo, hi))| *t >= *lo && *t <= *hi);
    if inside {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

/// Gamma(shape 4, scale 1/8) log density of one variance.
pub fn log_prior_sigma2_single(s: f64) -> f64 {
    if !(s > 0.0) {
        return f64::NEG_INFINITY;
    }
    // log Gamma(4) = log 6
    (NOISE_PRIOR_SHAPE - 1.0) * s.ln() - s / NOISE_PRIOR_SCALE
        - NOISE_PRIOR_SHAPE * NOISE_PRIOR_SCALE.ln()
        - 6.0f64.ln()
}

pub fn log_prior_sigma2(sigma2: &[f64]) -> f64 {
    sigma2.iter().map(|&s| log_prior_sigma2_single(s)).sum()
}

impl PosteriorSpec {
    pub fn new(
        response: Response,
        space: DesignSpace,
        target: TargetSet,
        theta_bounds: Vec<(f64, f64)>,
        noise: NoiseSpec,
        output_transform: OutputTransform,
    ) -> Result<Self> {
        let m = response.outputs();
        if target.targets().len() != m {
            return Err(CtoError::shape("target outputs", m, target.targets().len()));
        }
        if noise.modes().len() != m {
            return Err(CtoError::shape("noise modes", m, noise.modes().len()));
        }
        if output_transform.outputs() != m {
            return Err(CtoError::shape("output transform", m, output_transform.outputs()));
        }
        if theta_bounds.len() != space.q() {
            return Err(CtoError::shape("theta bounds", space.q(), theta_bounds.len()));
        }
        if let Some((lo, hi)) = theta_bounds
            .iter()
            .find(|(lo, hi)| !(*lo >= 0.0 && *hi <= 1.0 && lo < hi))
        {
            return Err(CtoError::Argument(format!(
                "theta bounds [{lo}, {hi}] must be a nonempty subinterval of [0, 1]"
            )));
        }
        if target.control_grid()[0].len() != space.p() {
            return Err(CtoError::shape(
                "control grid dimension",
                space.p(),
                target.control_grid()[0].len(),
            ));
        }
        if let Response::Emulator(em) = &response {
            if em.input_dim() != space.dim() {
                return Err(CtoError::shape("emulator inputs", space.dim(), em.input_dim()));
            }
        }
        Ok(Self {
            response,
            space,
            target,
            theta_bounds,
            noise,
            output_transform,
        })
    }

    pub fn response(&self) -> &Response {
        &self.response
    }

    pub fn space(&self) -> &DesignSpace {
        &self.space
    }

    pub fn target(&self) -> &TargetSet {
        &self.target
    }

    pub fn theta_bounds(&self) -> &[(f64, f64)] {
        &self.theta_bounds
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn output_transform(&self) -> &OutputTransform {
        &self.output_transform
    }

    pub fn m(&self) -> usize {
        self.response.outputs()
    }

    /// Same response and bounds with a different target and noise.
    pub fn with_target(&self, target: TargetSet, noise: NoiseSpec) -> Result<Self> {
        Self::new(
            self.response.clone(),
            self.space.clone(),
            target,
            self.theta_bounds.clone(),
            noise,
            self.output_transform.clone(),
        )
    }

    /// Unit-scale inputs `(x_j, theta)` for every control grid point.
    pub fn query_points(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        self.target
            .control_grid()
            .iter()
            .map(|x| x.iter().chain(theta).copied().collect())
            .collect()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.space.q() {
            return Err(CtoError::shape("theta", self.space.q(), theta.len()));
        }
        Ok(())
    }

    /// Standardized model outputs (direct) at every grid point: `g x m`.
    fn direct_outputs(&self, model: &ComputerModel, theta: &[f64]) -> Result<DMatrix<f64>> {
        let pts = self.query_points(theta);
        let mut out = DMatrix::zeros(pts.len(), self.m());
        for (j, pt) in pts.iter().enumerate() {
            let y = model.evaluate_unit(pt)?;
            for (i, v) in y.into_iter().enumerate() {
                out[(j, i)] = self.output_transform.standardize(i, v);
            }
        }
        Ok(out)
    }

    pub fn predictive(&self, theta: &[f64]) -> Result<Predictive> {
        self.check_theta(theta)?;
        match &self.response {
            Response::Emulator(em) => {
                let pts = self.query_points(theta);
                let mut means = Vec::with_capacity(self.m());
                let mut covariances = Vec::with_capacity(self.m());
                for i in 0..self.m() {
                    let (mu, cov) = em.predict_points(i, &pts)?;
                    means.push(mu);
                    covariances.push(cov);
                }
                Ok(Predictive { means, covariances })
            }
            Response::Direct(model) => {
                let out = self.direct_outputs(model, theta)?;
                let g = out.nrows();
                Ok(Predictive {
                    means: (0..self.m()).map(|i| out.column(i).into_owned()).collect(),
                    covariances: vec![DMatrix::zeros(g, g); self.m()],
                })
            }
        }
    }

    /// Predictive means only (cheaper on the emulator path), standardized, `g x m`.
    pub fn predictive_mean(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        match &self.response {
            Response::Emulator(em) => {
                let pts = self.query_points(theta);
                let mut out = DMatrix::zeros(pts.len(), self.m());
                for i in 0..self.m() {
                    out.set_column(i, &em.predict_mean_points(i, &pts)?);
                }
                Ok(out)
            }
            Response::Direct(model) => self.direct_outputs(model, theta),
        }
    }

    pub fn condition(&self, theta: &[f64]) -> Result<Conditioned> {
        match &self.response {
            Response::Emulator(_) => Ok(Conditioned::Emulator(self.predictive(theta)?)),
            Response::Direct(model) => {
                self.check_theta(theta)?;
                let out = self.direct_outputs(model, theta)?;
                let residuals = (0..self.m())
                    .map(|i| out.column(i).map(|v| self.target.targets()[i] - v))
                    .collect();
                Ok(Conditioned::Direct(residuals))
            }
        }
    }

    /// Log density of output `i`'s targets given the conditioned state.
    pub fn output_log_likelihood(&self, state: &Conditioned, i: usize, sigma2: f64) -> Result<f64> {
        match state {
            Conditioned::Emulator(pred) => {
                let g = pred.means[i].len();
                let mut cov = pred.covariances[i].clone();
                for j in 0..g {
                    cov[(j, j)] += sigma2 + PREDICTIVE_JITTER;
                }
                let chol = Cholesky::new(cov).ok_or_else(|| {
                    CtoError::Numerical(format!(
                        "predictive covariance of output {i} is not positive definite"
                    ))
                })?;
                let residual = pred.means[i].map(|mu| self.target.targets()[i] - mu);
                Ok(gaussian_log_density(&chol, &residual))
            }
            Conditioned::Direct(residuals) => {
                let r = &residuals[i];
                Ok(-0.5 * r.len() as f64 * (2.0 * PI * sigma2).ln()
                    - r.norm_squared() / (2.0 * sigma2))
            }
        }
    }

    pub fn log_likelihood_targets(&self, theta: &[f64], sigma2: &[f64]) -> Result<f64> {
        if sigma2.len() != self.m() {
            return Err(CtoError::shape("sigma2", self.m(), sigma2.len()));
        }
        let state = self.condition(theta)?;
        let mut total = 0.0;
        for (i, &s) in sigma2.iter().enumerate() {
            total += self.output_log_likelihood(&state, i, s)?;
        }
        Ok(total)
    }

    /// Prior on the sampled noise variances only; fixed entries contribute 0.
    pub fn log_prior_noise(&self, sigma2: &[f64]) -> f64 {
        self.noise
            .modes()
            .iter()
            .zip(sigma2)
            .filter(|(m, _)| **m == NoiseMode::Sampled)
            .map(|(_, &s)| log_prior_sigma2_single(s))
            .sum()
    }

    pub fn log_posterior(&self, theta: &[f64], sigma2: &[f64]) -> Result<f64> {
        let prior = log_prior_theta(theta, &self.theta_bounds) + self.log_prior_noise(sigma2);
        if prior == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(prior + self.log_likelihood_targets(theta, sigma2)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design_space::{latin_hypercube, SimulationDataset, VariableSpec};
    use crate::emulator::{covariance, covariance_matrix, Hyperparameters};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn theta_prior_is_a_closed_box() {
        let b = [(0.0, 1.0), (0.0, 1.0)];
        assert_eq!(log_prior_theta(&[0.5, 0.5], &b), 0.0);
        assert_eq!(log_prior_theta(&[1.0, 1.0], &b), 0.0);
        assert_eq!(log_prior_theta(&[1.2, 0.5], &b), f64::NEG_INFINITY);
    }

    #[test]
    fn sigma2_prior_values() {
        assert!(log_prior_sigma2(&[0.375]) > log_prior_sigma2(&[0.5]));
        assert!(log_prior_sigma2(&[0.375]) > log_prior_sigma2(&[0.3]));
        // 8^4 / 6 * 0.5^3 * e^-4
        let expected = (4096.0 / 6.0 * 0.125 * (-4.0f64).exp()).ln();
        assert_abs_diff_eq!(log_prior_sigma2(&[0.5]), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(log_prior_sigma2(&[0.5]), 0.4466, epsilon = 1e-4);
        assert_eq!(log_prior_sigma2(&[0.0]), f64::NEG_INFINITY);
        assert_eq!(log_prior_sigma2(&[-1.0]), f64::NEG_INFINITY);
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(control_grid(0, 8).unwrap(), vec![Vec::<f64>::new()]);
        assert_eq!(control_grid(1, 1).unwrap(), vec![vec![0.5]]);
        let g = control_grid(1, 5).unwrap();
        assert_eq!(g.first().unwrap(), &vec![0.0]);
        assert_eq!(g.last().unwrap(), &vec![1.0]);
        assert_eq!(control_grid(2, 3).unwrap().len(), 9);
        assert!(control_grid(1, 0).is_err());
    }

    fn line_model() -> Arc<ComputerModel> {
        // one control, one design, y = t - x
        let space = DesignSpace::new(vec![
            VariableSpec::control("x", 0.0, 1.0),
            VariableSpec::design("t", 0.0, 1.0),
        ])
        .unwrap();
        Arc::new(ComputerModel::new(
            "line",
            space,
            vec!["y".into()],
            Arc::new(|v: &[f64]| vec![v[1] - v[0]]),
        ))
    }

    fn direct_spec(target: f64, noise: NoiseSpec, g: usize) -> PosteriorSpec {
        let model = line_model();
        let t = OutputTransform::identity(1);
        PosteriorSpec::new(
            Response::Direct(model.clone()),
            model.space().clone(),
            TargetSet::new(control_grid(1, g).unwrap(), vec![target], &t).unwrap(),
            vec![(0.0, 1.0)],
            noise,
            t,
        )
        .unwrap()
    }

    #[test]
    fn direct_path_zero_residual() {
        // grid point x = 0.5, theta = 0.7: y = 0.2 equals the target
        let s2 = 1.0 / (2.0 * PI);
        let spec = direct_spec(0.2, NoiseSpec::fixed(vec![s2]).unwrap(), 1);
        assert_abs_diff_eq!(spec.log_likelihood_targets(&[0.7], &[s2]).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn direct_path_single_residual() {
        let spec = direct_spec(0.0, NoiseSpec::fixed(vec![1.0]).unwrap(), 1);
        // y = 0.9 - 0.5 = 0.4, residual -0.4
        let ll = spec.log_likelihood_targets(&[0.9], &[1.0]).unwrap();
        assert_abs_diff_eq!(ll, -0.5 * (2.0 * PI).ln() - 0.16 / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn posterior_composition() {
        let fixed = direct_spec(0.1, NoiseSpec::fixed(vec![0.3]).unwrap(), 4);
        let a = fixed.log_posterior(&[0.4], &[0.3]).unwrap();
        let b = fixed.log_likelihood_targets(&[0.4], &[0.3]).unwrap();
        assert_eq!(a - b, 0.0);

        let sampled = direct_spec(0.1, NoiseSpec::sampled(1), 4);
        let lp = sampled.log_posterior(&[0.4], &[0.3]).unwrap();
        let sum = sampled.log_likelihood_targets(&[0.4], &[0.3]).unwrap()
            + log_prior_theta(&[0.4], sampled.theta_bounds())
            + log_prior_sigma2(&[0.3]);
        assert_abs_diff_eq!(lp, sum, epsilon = 1e-12);
    }

    #[test]
    fn out_of_bounds_short_circuits() {
        // a model that panics if called proves the short-circuit
        let space = DesignSpace::new(vec![VariableSpec::design("t", 0.0, 1.0)]).unwrap();
        let model = Arc::new(ComputerModel::new(
            "boom",
            space.clone(),
            vec!["y".into()],
            Arc::new(|_: &[f64]| panic!("model evaluated")),
        ));
        let t = OutputTransform::identity(1);
        let spec = PosteriorSpec::new(
            Response::Direct(model),
            space,
            TargetSet::new(control_grid(0, 1).unwrap(), vec![0.0], &t).unwrap(),
            vec![(0.0, 1.0)],
            NoiseSpec::sampled(1),
            t,
        )
        .unwrap();
        assert_eq!(spec.log_posterior(&[1.5], &[0.5]).unwrap(), f64::NEG_INFINITY);
        assert_eq!(spec.log_posterior(&[0.5], &[-0.5]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn spec_validation() {
        let model = line_model();
        let t = OutputTransform::identity(1);
        let target = TargetSet::new(control_grid(1, 3).unwrap(), vec![0.0], &t).unwrap();
        let build = |bounds: Vec<(f64, f64)>, noise: NoiseSpec| {
            PosteriorSpec::new(
                Response::Direct(model.clone()),
                model.space().clone(),
                target.clone(),
                bounds,
                noise,
                t.clone(),
            )
        };
        assert!(build(vec![(0.0, 1.0)], NoiseSpec::sampled(2)).is_err());
        assert!(build(vec![(0.0, 1.5)], NoiseSpec::sampled(1)).is_err());
        assert!(build(vec![(0.0, 1.0), (0.0, 1.0)], NoiseSpec::sampled(1)).is_err());
        assert!(NoiseSpec::fixed(vec![0.0]).is_err());
        assert!(TargetSet::new(control_grid(1, 3).unwrap(), vec![0.0, 1.0], &t).is_err());
    }

    /// Random emulator instance: `n` training runs in `1 + q` dims, one output.
    pub(crate) fn random_emulator_spec(
        rng: &mut ChaCha8Rng,
        n: usize,
        g: usize,
    ) -> (PosteriorSpec, Hyperparameters, SimulationDataset) {
        let space = DesignSpace::new(vec![
            VariableSpec::control("x", 0.0, 1.0),
            VariableSpec::design("t1", 0.0, 1.0),
            VariableSpec::design("t2", 0.0, 1.0),
        ])
        .unwrap();
        let inputs = latin_hypercube(n, 3, rng.random()).unwrap();
        let raw = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let ds = SimulationDataset::new(space.clone(), inputs, raw, vec!["y".into()]).unwrap();
        let h = Hyperparameters::new(
            (0..3).map(|_| rng.random_range(0.1..0.9)).collect(),
            rng.random_range(0.5..2.0),
            1e-8,
        )
        .unwrap();
        let em = Emulator::from_hyperparameters(&ds, vec![h.clone()]).unwrap();
        let t = ds.transform().clone();
        let target = TargetSet::from_standardized(
            control_grid(1, g).unwrap(),
            vec![rng.random_range(-2.0..0.0)],
            &t,
        )
        .unwrap();
        let spec = PosteriorSpec::new(
            Response::Emulator(Arc::new(em)),
            space,
            target,
            vec![(0.0, 1.0); 2],
            NoiseSpec::sampled(1),
            t,
        )
        .unwrap();
        (spec, h, ds)
    }

    /// Joint log density of (training runs, targets) from the full covariance.
    pub(crate) fn joint_log_density(
        spec: &PosteriorSpec,
        h: &Hyperparameters,
        ds: &SimulationDataset,
        theta: &[f64],
        sigma2: f64,
    ) -> f64 {
        let n = ds.n();
        let targets = spec.query_points(theta);
        let g = targets.len();
        let training: Vec<Vec<f64>> = ds
            .inputs()
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        let all: Vec<&Vec<f64>> = training.iter().chain(targets.iter()).collect();
        let c_train = covariance_matrix(ds.inputs(), h).unwrap();
        let c = DMatrix::from_fn(n + g, n + g, |i, j| {
            if i < n && j < n {
                c_train[(i, j)]
            } else {
                let base = covariance(all[i], all[j], h).unwrap();
                if i == j {
                    base + sigma2 + PREDICTIVE_JITTER
                } else {
                    base
                }
            }
        });
        let d = DVector::from_fn(n + g, |i, _| {
            if i < n {
                ds.outputs()[(i, 0)]
            } else {
                spec.target().targets()[0]
            }
        });
        let chol = Cholesky::new(c).unwrap();
        gaussian_log_density(&chol, &d)
    }

    #[test]
    fn conditional_matches_joint_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let (spec, h, ds) = random_emulator_spec(&mut rng, 20, 3);
            let ta = [rng.random::<f64>(), rng.random::<f64>()];
            let tb = [rng.random::<f64>(), rng.random::<f64>()];
            let sa = rng.random_range(0.05..2.0);
            let sb = rng.random_range(0.05..2.0);
            let cond = spec.log_likelihood_targets(&ta, &[sa]).unwrap()
                - spec.log_likelihood_targets(&tb, &[sb]).unwrap();
            let joint = joint_log_density(&spec, &h, &ds, &ta, sa)
                - joint_log_density(&spec, &h, &ds, &tb, sb);
            assert_abs_diff_eq!(cond, joint, epsilon = 1e-8);
        }
    }

    #[test]
    fn huge_noise_flattens_the_likelihood() {
        let model = Arc::new(crate::models::ComputerModel::simulated_example());
        let design = latin_hypercube(200, 3, 1).unwrap();
        let ds = crate::models::sample_model(&model, &design).unwrap();
        let t = ds.transform().clone();
        let spec = PosteriorSpec::new(
            Response::Direct(model.clone()),
            model.space().clone(),
            TargetSet::new(control_grid(1, 8).unwrap(), vec![0.7311, 0.6675, 15.0], &t).unwrap(),
            vec![(0.0, 1.0); 2],
            NoiseSpec::preliminary(3),
            t,
        )
        .unwrap();
        let s = [PRELIMINARY_SIGMA2; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let values: Vec<f64> = (0..100)
            .map(|_| {
                spec.log_likelihood_targets(&[rng.random(), rng.random()], &s)
                    .unwrap()
            })
            .collect();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo < 1e-3, "spread {}", hi - lo);

        // finite over the prior box with positive noise
        for _ in 0..100 {
            let theta = [rng.random(), rng.random()];
            let sigma2 = [rng.random_range(0.01..3.0), rng.random_range(0.01..3.0), 1.0];
            assert!(spec.log_posterior(&theta, &sigma2).unwrap().is_finite());
        }
    }
}
