//! Adaptive Metropolis-within-Gibbs over `(theta, sigma2)`.
//!
//! `theta` moves as one Gaussian random-walk block; each sampled `sigma2_i`
//! moves as a scalar random walk on `log sigma2_i` (with the Jacobian term).
//! Proposal covariances are re-estimated from the chain's own history every
//! `adapt_interval` iterations during burn-in and frozen afterwards.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CtoError, Result};
use crate::posterior::{
    log_prior_sigma2_single, log_prior_theta, Conditioned, NoiseMode, PosteriorSpec,
    PREDICTIVE_JITTER,
};
use crate::seed::{self, derive_seed};

/// A density the sampler can explore. `condition` does all theta-dependent
/// work once per proposal; `output_term` then prices each output's noise
/// variance cheaply.
pub trait Posterior: Sync {
    type State: Send;

    fn theta_bounds(&self) -> &[(f64, f64)];

    /// One entry per output; empty for densities without noise parameters.
    fn noise_modes(&self) -> &[NoiseMode];

    /// Returns the conditioned state and the sigma2-independent log term.
    fn condition(&self, theta: &[f64]) -> Result<(Self::State, f64)>;

    fn output_term(&self, state: &Self::State, output: usize, sigma2: f64) -> Result<f64>;
}

impl Posterior for PosteriorSpec {
    type State = Conditioned;

    fn theta_bounds(&self) -> &[(f64, f64)] {
        PosteriorSpec::theta_bounds(self)
    }

    fn noise_modes(&self) -> &[NoiseMode] {
        self.noise().modes()
    }

    fn condition(&self, theta: &[f64]) -> Result<(Conditioned, f64)> {
        Ok((PosteriorSpec::condition(self, theta)?, 0.0))
    }

    fn output_term(&self, state: &Conditioned, output: usize, sigma2: f64) -> Result<f64> {
        self.output_log_likelihood(state, output, sigma2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub n_chains: usize,
    pub adapt_interval: usize,
    pub target_accept_theta: f64,
    pub target_accept_sigma2: f64,
    pub master_seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            iterations: 6000,
            burn_in: 3000,
            n_chains: 3,
            adapt_interval: 100,
            target_accept_theta: 0.23,
            target_accept_sigma2: 0.44,
            master_seed: 0,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(CtoError::Argument(format!(
                "burn_in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.n_chains == 0 {
            return Err(CtoError::Argument("n_chains must be at least 1".into()));
        }
        if self.adapt_interval == 0 {
            return Err(CtoError::Argument("adapt_interval must be at least 1".into()));
        }
        for (name, r) in [
            ("target_accept_theta", self.target_accept_theta),
            ("target_accept_sigma2", self.target_accept_sigma2),
        ] {
            if !(r > 0.0 && r < 1.0) {
                return Err(CtoError::Argument(format!("{name} must lie in (0, 1), got {r}")));
            }
        }
        Ok(())
    }

    pub fn kept(&self) -> usize {
        self.iterations - self.burn_in
    }
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// Kept iterations x q, on the posterior's theta scale.
    pub theta_draws: DMatrix<f64>,
    /// Kept iterations x m; zero columns when no output noise is sampled.
    pub sigma2_draws: DMatrix<f64>,
    pub log_post: Vec<f64>,
    pub accept_rate_theta: f64,
    /// Post-burn-in acceptance per output; `NaN` for fixed-noise outputs.
    pub accept_rate_sigma2: Vec<f64>,
    pub final_proposal_cov: DMatrix<f64>,
}

/// Optimal random-walk scaling: `2.38^2 / d` for a block, `2.4^2` for a scalar.
pub fn optimal_scaling(d: usize) -> f64 {
    if d == 1 {
        2.4 * 2.4
    } else {
        2.38 * 2.38 / d as f64
    }
}

const PROPOSAL_JITTER: f64 = 1e-10;

/// Scaled sample covariance of `history` (k draws x d) plus a jitter floor.
/// Returns `None` when `k < d + 2`.
pub fn adapt_proposal(history: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (k, d) = history.shape();
    if d == 0 || k < d + 2 {
        return None;
    }
    let mean = history.row_mean();
    let mut centred = history.clone();
    for mut row in centred.row_iter_mut() {
        row -= &mean;
    }
    let cov = centred.tr_mul(&centred) / (k - 1) as f64;
    Some(cov * optimal_scaling(d) + DMatrix::identity(d, d) * PROPOSAL_JITTER)
}

/// Initial proposal: 10% of each coordinate's prior width.
fn initial_proposal(bounds: &[(f64, f64)]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(
        bounds.len(),
        bounds.iter().map(|(lo, hi)| (0.1 * (hi - lo)).powi(2)),
    ))
}

const INIT_ATTEMPTS: usize = 1000;
const MAX_LOG_SCALE: f64 = 6.0;

struct ThetaProposal {
    base: DMatrix<f64>,
    log_scale: f64,
    factor: DMatrix<f64>,
}

impl ThetaProposal {
    fn new(base: DMatrix<f64>) -> Self {
        let factor = Cholesky::new(base.clone()).expect("diagonal start is PD").l();
        Self {
            base,
            log_scale: 0.0,
            factor,
        }
    }

    fn covariance(&self) -> DMatrix<f64> {
        &self.base * (2.0 * self.log_scale).exp()
    }

    fn refresh(&mut self, base: Option<DMatrix<f64>>, accept_rate: f64, target: f64) {
        self.log_scale = (self.log_scale + accept_rate - target).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
        if let Some(b) = base {
            // a stuck window gives a near-zero covariance; keep the old shape then
            let degenerate = b.diagonal().iter().any(|v| *v < 1e3 * PROPOSAL_JITTER);
            if !degenerate {
                if let Some(chol) = Cholesky::new(b.clone()) {
                    self.base = b;
                    self.factor = chol.l();
                }
            }
        }
    }

    fn step(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.factor * z * self.log_scale.exp()
    }
}

pub fn run_chain<P: Posterior>(spec: &P, cfg: &ChainConfig, chain_index: usize) -> Result<ChainOutput> {
    run_chain_observed(spec, cfg, chain_index, |_, _| {})
}

/// As [`run_chain`], calling `observer(iteration, proposal_cov)` with the
/// theta proposal covariance in force at every iteration.
pub fn run_chain_observed<P, F>(
    spec: &P,
    cfg: &ChainConfig,
    chain_index: usize,
    mut observer: F,
) -> Result<ChainOutput>
where
    P: Posterior,
    F: FnMut(usize, &DMatrix<f64>),
{
    cfg.validate()?;
    let bounds = spec.theta_bounds().to_vec();
    let q = bounds.len();
    let modes = spec.noise_modes().to_vec();
    let m = modes.len();
    let sampled: Vec<usize> = (0..m).filter(|&i| modes[i] == NoiseMode::Sampled).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.master_seed,
        seed::CHAIN,
        chain_index as u64,
    ));

    let mut sigma2: Vec<f64> = modes
        .iter()
        .map(|mode| match mode {
            NoiseMode::Fixed(s) => *s,
            NoiseMode::Sampled => 0.5,
        })
        .collect();
    let noise_prior =
        |i: usize, s: f64| if modes[i] == NoiseMode::Sampled { log_prior_sigma2_single(s) } else { 0.0 };

    // rejection-sampled uniform start with a finite log density
    let mut start = None;
    for _ in 0..INIT_ATTEMPTS {
        let theta: Vec<f64> = bounds.iter().map(|(lo, hi)| rng.random_range(*lo..=*hi)).collect();
        let Ok((state, base)) = spec.condition(&theta) else { continue };
        let terms = (0..m)
            .map(|i| spec.output_term(&state, i, sigma2[i]))
            .collect::<Result<Vec<_>>>();
        if let Ok(terms) = terms {
            let lp = base + terms.iter().sum::<f64>();
            if lp.is_finite() {
                start = Some((theta, state, base, terms));
                break;
            }
        }
    }
    let (mut theta, mut state, mut base, mut terms) = start.ok_or_else(|| {
        CtoError::Init(format!(
            "no finite log posterior at {INIT_ATTEMPTS} uniform starting points"
        ))
    })?;

    let mut proposal = ThetaProposal::new(initial_proposal(&bounds));
    let mut log_sd: Vec<f64> = vec![0.5; m];
    let mut log_sd_scale: Vec<f64> = vec![0.0; m];

    let kept = cfg.kept();
    let mut theta_hist = DMatrix::zeros(cfg.iterations, q);
    let mut log_sigma2_hist = DMatrix::zeros(cfg.iterations, m);
    let mut log_post = Vec::with_capacity(kept);
    let mut sigma2_kept = DMatrix::zeros(
        if sampled.is_empty() { 0 } else { kept },
        if sampled.is_empty() { 0 } else { m },
    );
    let mut accepted_theta_window = 0usize;
    let mut accepted_sigma2_window = vec![0usize; m];
    let mut accepted_theta_kept = 0usize;
    let mut accepted_sigma2_kept = vec![0usize; m];

    for t in 0..cfg.iterations {
        observer(t, &proposal.covariance());

        // theta block
        let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let step = proposal.step(&z);
        let candidate: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let log_u: f64 = rng.random::<f64>().ln();
        if log_prior_theta(&candidate, &bounds) == 0.0 {
            let (c_state, c_base) = spec.condition(&candidate)?;
            let c_terms = (0..m)
                .map(|i| spec.output_term(&c_state, i, sigma2[i]))
                .collect::<Result<Vec<_>>>()?;
            let delta = (c_base + c_terms.iter().sum::<f64>()) - (base + terms.iter().sum::<f64>());
            if log_u < delta {
                theta = candidate;
                state = c_state;
                base = c_base;
                terms = c_terms;
                accepted_theta_window += 1;
                if t >= cfg.burn_in {
                    accepted_theta_kept += 1;
                }
            }
        }

        // one scalar step per sampled noise variance
        for &i in &sampled {
            let current = sigma2[i].ln();
            let z: f64 = rng.sample(StandardNormal);
            let proposed = current + log_sd[i] * log_sd_scale[i].exp() * z;
            let s_new = proposed.exp();
            let log_u: f64 = rng.random::<f64>().ln();
            if s_new > 0.0 && s_new.is_finite() {
                let term_new = spec.output_term(&state, i, s_new)?;
                let delta = (term_new + noise_prior(i, s_new) + proposed)
                    - (terms[i] + noise_prior(i, sigma2[i]) + current);
                if log_u < delta {
                    sigma2[i] = s_new;
                    terms[i] = term_new;
                    accepted_sigma2_window[i] += 1;
                    if t >= cfg.burn_in {
                        accepted_sigma2_kept[i] += 1;
                    }
                }
            }
        }

        for k in 0..q {
            theta_hist[(t, k)] = theta[k];
        }
        for i in 0..m {
            log_sigma2_hist[(t, i)] = sigma2[i].ln();
        }
        if t >= cfg.burn_in {
            let row = t - cfg.burn_in;
            let lp = base
                + terms.iter().sum::<f64>()
                + (0..m).map(|i| noise_prior(i, sigma2[i])).sum::<f64>();
            log_post.push(lp);
            if !sampled.is_empty() {
                for i in 0..m {
                    sigma2_kept[(row, i)] = sigma2[i];
                }
            }
        }

        let done = t + 1;
        if done <= cfg.burn_in && done % cfg.adapt_interval == 0 {
            let window = cfg.adapt_interval as f64;
            let from = done / 2;
            let history = theta_hist.rows(from, done - from).into_owned();
            proposal.refresh(
                adapt_proposal(&history),
                accepted_theta_window as f64 / window,
                cfg.target_accept_theta,
            );
            accepted_theta_window = 0;
            for &i in &sampled {
                let rate = accepted_sigma2_window[i] as f64 / window;
                log_sd_scale[i] = (log_sd_scale[i] + rate - cfg.target_accept_sigma2)
                    .clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
                let hist = log_sigma2_hist.view((from, i), (done - from, 1)).into_owned();
                if let Some(v) = adapt_proposal(&hist) {
                    if v[(0, 0)] > 1e3 * PROPOSAL_JITTER {
                        log_sd[i] = v[(0, 0)].sqrt();
                    }
                }
                accepted_sigma2_window[i] = 0;
            }
        }
    }

    let kept_f = kept as f64;
    Ok(ChainOutput {
        theta_draws: theta_hist.rows(cfg.burn_in, kept).into_owned(),
        sigma2_draws: sigma2_kept,
        log_post,
        accept_rate_theta: accepted_theta_kept as f64 / kept_f,
        accept_rate_sigma2: (0..m)
            .map(|i| {
                if modes[i] == NoiseMode::Sampled {
                    accepted_sigma2_kept[i] as f64 / kept_f
                } else {
                    f64::NAN
                }
            })
            .collect(),
        final_proposal_cov: proposal.covariance(),
    })
}

/// Independent chains run concurrently; results are ordered by chain index.
#[derive(Debug, Clone)]
pub struct ChainSet {
    pub chains: Vec<ChainOutput>,
    /// Per-theta-component R-hat; `None` with a single chain.
    pub rhat: Option<Vec<f64>>,
}

impl ChainSet {
    pub fn max_rhat(&self) -> Option<f64> {
        self.rhat
            .as_ref()
            .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn converged(&self, threshold: f64) -> bool {
        self.max_rhat().is_none_or(|r| r <= threshold)
    }

    /// All kept theta draws stacked chain after chain.
    pub fn pooled_theta(&self) -> DMatrix<f64> {
        stack(self.chains.iter().map(|c| &c.theta_draws))
    }

    pub fn pooled_sigma2(&self) -> DMatrix<f64> {
        stack(self.chains.iter().map(|c| &c.sigma2_draws))
    }
}

fn stack<'a>(parts: impl Iterator<Item = &'a DMatrix<f64>> + Clone) -> DMatrix<f64> {
    let rows: usize = parts.clone().map(|p| p.nrows()).sum();
    let cols = parts.clone().next().map_or(0, |p| p.ncols());
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.nrows()).copy_from(p);
        r += p.nrows();
    }
    out
}

pub const RHAT_THRESHOLD: f64 = 1.1;

pub fn run_chains<P: Posterior>(spec: &P, cfg: &ChainConfig) -> Result<ChainSet> {
    cfg.validate()?;
    let chains = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| run_chain(spec, cfg, c))
        .collect::<Result<Vec<_>>>()?;
    let rhat = if chains.len() >= 2 {
        let draws: Vec<DMatrix<f64>> = chains.iter().map(|c| c.theta_draws.clone()).collect();
        Some(gelman_rubin(&draws)?)
    } else {
        None
    };
    Ok(ChainSet { chains, rhat })
}

fn sample_variance(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Potential scale reduction per column: `sqrt(V / W)` with
/// `V = (n - 1)/n W + B/n`.
pub fn gelman_rubin(chains: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    if chains.len() < 2 {
        return Err(CtoError::Diagnostic(format!(
            "R-hat needs at least 2 chains, got {}",
            chains.len()
        )));
    }
    let (n, d) = chains[0].shape();
    if n < 2 {
        return Err(CtoError::Diagnostic("R-hat needs at least 2 draws per chain".into()));
    }
    if chains.iter().any(|c| c.shape() != (n, d)) {
        return Err(CtoError::Diagnostic("chains must have equal shapes".into()));
    }
    let nf = n as f64;
    Ok((0..d)
        .map(|k| {
            let stats: Vec<(f64, f64)> = chains
                .iter()
                .map(|c| sample_variance(c.column(k).iter().copied()))
                .collect();
            let w = stats.iter().map(|s| s.1).sum::<f64>() / stats.len() as f64;
            let (_, var_means) = sample_variance(stats.iter().map(|s| s.0));
            let b = nf * var_means;
            let v = (nf - 1.0) / nf * w + b / nf;
            (v / w).sqrt()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictiveMode {
    /// Predictive means (exact model outputs on the direct path).
    Mean,
    /// One draw from the emulator's predictive normal per theta draw.
    Sample,
}

/// Posterior predictive in native units: one row per theta draw, column
/// `i * g + j` for output `i` at control grid point `j`.
pub fn posterior_predictive(
    spec: &PosteriorSpec,
    theta_draws: &DMatrix<f64>,
    mode: PredictiveMode,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let g = spec.target().g();
    let m = spec.m();
    let transform = spec.output_transform();
    let rows = (0..theta_draws.nrows())
        .into_par_iter()
        .map(|r| {
            let theta: Vec<f64> = theta_draws.row(r).iter().copied().collect();
            let standardized: Vec<DVector<f64>> = match mode {
                PredictiveMode::Mean => {
                    let means = spec.predictive_mean(&theta)?;
                    (0..m).map(|i| means.column(i).into_owned()).collect()
                }
                PredictiveMode::Sample => {
                    let pred = spec.predictive(&theta)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, seed::PREDICTIVE, r as u64));
                    pred.means
                        .iter()
                        .zip(&pred.covariances)
                        .map(|(mu, cov)| {
                            if cov.iter().all(|v| *v == 0.0) {
                                return Ok(mu.clone());
                            }
                            let jittered = cov + DMatrix::identity(g, g) * PREDICTIVE_JITTER;
                            let chol = Cholesky::new(jittered).ok_or_else(|| {
                                CtoError::Numerical("predictive covariance is not positive definite".into())
                            })?;
                            let z = DVector::from_fn(g, |_, _| rng.sample::<f64, _>(StandardNormal));
                            Ok(mu + chol.l() * z)
                        })
                        .collect::<Result<Vec<_>>>()?
                }
            };
            let mut row = Vec::with_capacity(m * g);
            for (i, v) in standardized.iter().enumerate() {
                row.extend(v.iter().map(|&s| transform.destandardize(i, s)));
            }
            Ok(row)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(DMatrix::from_fn(rows.len(), m * g, |r, c| rows[r][c]))
}

/// Predictive means averaged over the control grid: one standardized
/// m-vector per theta draw.
pub fn grid_averaged_means(spec: &PosteriorSpec, theta_draws: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = spec.m();
    let rows = (0..theta_draws.nrows())
        .into_par_iter()
        .map(|r| {
            let theta: Vec<f64> = theta_draws.row(r).iter().copied().collect();
            let means = spec.predictive_mean(&theta)?;
            Ok((0..m).map(|i| means.column(i).mean()).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(rows.len(), m, |r, c| rows[r][c]))
}
