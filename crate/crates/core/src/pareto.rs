//! Dominance filtering, utopia estimation, target selection and Pareto bands.
//! All objectives are minimized.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design_space::OutputTransform;
use crate::error::{CtoError, Result};
use crate::posterior::{NoiseMode, NoiseSpec, PosteriorSpec, TargetSet};
use crate::sampler::{grid_averaged_means, ChainConfig, ChainSet, RHAT_THRESHOLD};
use crate::seed::{self, derive_seed};

/// `a` dominates `b`: no worse anywhere, strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool> {
    if a.len() != b.len() {
        return Err(CtoError::shape("dominance operand", a.len(), b.len()));
    }
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return Ok(false);
        }
        strict |= x < y;
    }
    Ok(strict)
}

fn row(points: &DMatrix<f64>, i: usize) -> Vec<f64> {
    points.row(i).iter().copied().collect()
}

/// Indices (ascending) of the rows no other row dominates. Exact duplicates of
/// a retained row are all retained.
pub fn pareto_filter(points: &DMatrix<f64>) -> Vec<usize> {
    let rows: Vec<Vec<f64>> = (0..points.nrows()).map(|i| row(points, i)).collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    // a dominating point always sorts lexicographically before its victim,
    // so each point only needs checking against the front built so far
    order.sort_by(|&a, &b| {
        rows[a]
            .iter()
            .zip(&rows[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        let dominated = front
            .iter()
            .any(|&f| dominates(&rows[f], &rows[i]).unwrap_or(false));
        if !dominated {
            front.push(i);
        }
    }
    front.sort_unstable();
    front
}

/// Componentwise minimum of the observed outputs.
pub fn estimate_utopia(outputs: &DMatrix<f64>) -> Result<Vec<f64>> {
    if outputs.nrows() == 0 {
        return Err(CtoError::InsufficientData("utopia estimate needs at least one point".into()));
    }
    Ok(outputs.column_iter().map(|c| c.min()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoFront {
    /// k x m, standardized scale.
    pub points: DMatrix<f64>,
    /// k x m, native units.
    pub native_points: DMatrix<f64>,
    /// k x q unit-scaled design settings that produced each point.
    pub settings: DMatrix<f64>,
    /// Row of each retained point in the input it was filtered from.
    pub source_rows: Vec<usize>,
}

impl ParetoFront {
    /// Filters standardized `outputs` (one row per draw) and keeps the
    /// matching rows of `settings`.
    pub fn from_draws(
        outputs: &DMatrix<f64>,
        settings: &DMatrix<f64>,
        transform: &OutputTransform,
    ) -> Result<Self> {
        if outputs.nrows() == 0 {
            return Err(CtoError::InsufficientData("no draws to filter".into()));
        }
        if settings.nrows() != outputs.nrows() {
            return Err(CtoError::shape("settings rows", outputs.nrows(), settings.nrows()));
        }
        if transform.outputs() != outputs.ncols() {
            return Err(CtoError::shape("output transform", outputs.ncols(), transform.outputs()));
        }
        let keep = pareto_filter(outputs);
        let points = outputs.select_rows(keep.iter());
        let native_points = DMatrix::from_fn(points.nrows(), points.ncols(), |r, c| {
            transform.destandardize(c, points[(r, c)])
        });
        Ok(Self {
            settings: settings.select_rows(keep.iter()),
            points,
            native_points,
            source_rows: keep,
        })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    /// Row of the front point closest to `utopia` (standardized, Euclidean);
    /// the first such row on ties.
    pub fn nearest(&self, utopia: &[f64]) -> Result<usize> {
        if self.is_empty() {
            return Err(CtoError::InsufficientData("empty Pareto front".into()));
        }
        if utopia.len() != self.points.ncols() {
            return Err(CtoError::shape("utopia", self.points.ncols(), utopia.len()));
        }
        let dist = |r: usize| -> f64 {
            utopia
                .iter()
                .enumerate()
                .map(|(c, u)| (self.points[(r, c)] - u).powi(2))
                .sum()
        };
        Ok((1..self.len()).fold(0, |best, r| if dist(r) < dist(best) { r } else { best }))
    }
}

/// `F + standoff * (U - F) / |U - F|` for the front point `F` nearest `U`.
/// Returns `U` itself when the front touches it.
pub fn select_target_on_ray(front: &ParetoFront, utopia: &[f64], standoff: f64) -> Result<Vec<f64>> {
    if !(standoff >= 0.0 && standoff.is_finite()) {
        return Err(CtoError::Argument(format!("standoff must be finite and >= 0, got {standoff}")));
    }
    let f = row(&front.points, front.nearest(utopia)?);
    let diff: Vec<f64> = utopia.iter().zip(&f).map(|(u, x)| u - x).collect();
    let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(utopia.to_vec());
    }
    Ok(f.iter().zip(&diff).map(|(x, d)| x + standoff * d / norm).collect())
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSpec {
    /// Outputs held at the grid values.
    pub grid_outputs: Vec<usize>,
    /// G x len(grid_outputs) values in native units.
    pub grid: Vec<Vec<f64>>,
    pub free_output: usize,
    /// Target for the free output, standardized.
    pub free_target: f64,
    #[serde(default = "default_constrained_sigma2")]
    pub constrained_sigma2: f64,
    #[serde(default = "default_level")]
    pub level: f64,
}

pub const DEFAULT_CONSTRAINED_SIGMA2: f64 = 0.01;
pub const DEFAULT_BAND_LEVEL: f64 = 0.9;

fn default_constrained_sigma2() -> f64 {
    DEFAULT_CONSTRAINED_SIGMA2
}

fn default_level() -> f64 {
    DEFAULT_BAND_LEVEL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoBand {
    pub grid: Vec<Vec<f64>>,
    pub free_output: usize,
    /// Native units of the free output, averaged over the control grid.
    pub medians: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rhat: Vec<Option<f64>>,
    pub reliable: Vec<bool>,
}

impl ParetoBand {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }
}

/// One CTO run per grid point: the constrained outputs target the grid values
/// with fixed noise, the free output targets `free_target` with sampled
/// noise. Jobs run concurrently, seeded by grid index.
pub fn pareto_bands<R>(
    template: &PosteriorSpec,
    band: &BandSpec,
    cfg: &ChainConfig,
    runner: R,
) -> Result<ParetoBand>
where
    R: Fn(&PosteriorSpec, &ChainConfig) -> Result<ChainSet> + Sync,
{
    let m = template.m();
    let transform = template.output_transform();
    let mut seen = vec![false; m];
    for &i in band.grid_outputs.iter().chain(std::iter::once(&band.free_output)) {
        if i >= m || seen[i] {
            return Err(CtoError::Argument(format!(
                "band outputs must be distinct indices below {m}; offending index {i}"
            )));
        }
        seen[i] = true;
    }
    if band.grid_outputs.len() + 1 != m {
        return Err(CtoError::shape("band outputs", m, band.grid_outputs.len() + 1));
    }
    if band.grid.is_empty() {
        return Err(CtoError::Argument("band grid is empty".into()));
    }
    if let Some(bad) = band.grid.iter().find(|g| g.len() != band.grid_outputs.len()) {
        return Err(CtoError::shape("band grid point", band.grid_outputs.len(), bad.len()));
    }
    if !(band.level > 0.0 && band.level < 1.0) {
        return Err(CtoError::Argument(format!("band level must lie in (0, 1), got {}", band.level)));
    }
    let mut modes = vec![NoiseMode::Sampled; m];
    for &i in &band.grid_outputs {
        modes[i] = NoiseMode::Fixed(band.constrained_sigma2);
    }
    let noise = NoiseSpec::new(modes)?;
    let tail = (1.0 - band.level) / 2.0;

    let results = band
        .grid
        .par_iter()
        .enumerate()
        .map(|(k, values)| {
            let mut targets = vec![0.0; m];
            targets[band.free_output] = band.free_target;
            for (&i, &v) in band.grid_outputs.iter().zip(values) {
                targets[i] = transform.standardize(i, v);
            }
            let target = TargetSet::from_standardized(
                template.target().control_grid().to_vec(),
                targets,
                transform,
            )?;
            let spec = template.with_target(target, noise.clone())?;
            let job_cfg = ChainConfig {
                master_seed: derive_seed(cfg.master_seed, seed::BAND, k as u64),
                ..*cfg
            };
            let set = runner(&spec, &job_cfg)?;
            let means = grid_averaged_means(&spec, &set.pooled_theta())?;
            let mut free: Vec<f64> = means
                .column(band.free_output)
                .iter()
                .map(|&s| transform.destandardize(band.free_output, s))
                .collect();
            free.sort_by(f64::total_cmp);
            let rhat = set.max_rhat();
            Ok((
                quantile(&free, 0.5),
                quantile(&free, tail),
                quantile(&free, 1.0 - tail),
                rhat,
                set.converged(RHAT_THRESHOLD),
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ParetoBand {
        grid: band.grid.clone(),
        free_output: band.free_output,
        medians: results.iter().map(|r| r.0).collect(),
        lower: results.iter().map(|r| r.1).collect(),
        upper: results.iter().map(|r| r.2).collect(),
        rhat: results.iter().map(|r| r.3).collect(),
        reliable: results.iter().map(|r| r.4).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design_space::latin_hypercube;
    use crate::models::{sample_model, ComputerModel};
    use crate::posterior::{control_grid, Response};
    use crate::sampler::run_chains;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn brute_force(points: &DMatrix<f64>) -> Vec<usize> {
        let n = points.nrows();
        (0..n)
            .filter(|&i| {
                !(0..n).any(|j| {
                    let a: Vec<f64> = points.row(j).iter().copied().collect();
                    let b: Vec<f64> = points.row(i).iter().copied().collect();
                    a.iter().zip(&b).all(|(x, y)| x <= y) && a.iter().zip(&b).any(|(x, y)| x < y)
                })
            })
            .collect()
    }

    #[test]
    fn dominance_examples() {
        assert!(dominates(&[1.0, 2.0], &[2.0, 2.0]).unwrap());
        assert!(!dominates(&[1.0, 2.0], &[1.0, 2.0]).unwrap());
        assert!(!dominates(&[1.0, 3.0], &[3.0, 1.0]).unwrap());
        assert!(matches!(dominates(&[1.0], &[1.0, 2.0]), Err(CtoError::Shape { .. })));
    }

    #[test]
    fn filter_examples() {
        let pts = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 1.0, 2.0, 2.0]);
        assert_eq!(pareto_filter(&pts), vec![0, 1]);
        assert_eq!(pareto_filter(&DMatrix::from_row_slice(1, 2, &[5.0, 5.0])), vec![0]);
        let dup = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 3.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(pareto_filter(&dup), vec![0, 1, 2]);
    }

    #[test]
    fn filter_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..10 {
            let n = 1000;
            let m = 2 + trial % 3;
            // coarse values force many ties and duplicates
            let pts = DMatrix::from_fn(n, m, |_, _| (rng.random::<f64>() * 20.0).floor());
            assert_eq!(pareto_filter(&pts), brute_force(&pts));
        }
    }

    #[test]
    fn utopia_examples() {
        let pts = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 1.0, 4.0, 3.0, 3.0, 1.0]);
        assert_eq!(estimate_utopia(&pts).unwrap(), vec![1.0, 1.0, 1.0]);
        let one = DMatrix::from_row_slice(1, 2, &[4.0, -1.0]);
        assert_eq!(estimate_utopia(&one).unwrap(), vec![4.0, -1.0]);
        assert!(estimate_utopia(&DMatrix::zeros(0, 2)).is_err());
    }

    fn front_of(points: &[f64], m: usize) -> ParetoFront {
        let pts = DMatrix::from_row_slice(points.len() / m, m, points);
        ParetoFront::from_draws(&pts, &DMatrix::zeros(pts.nrows(), 1), &OutputTransform::identity(m)).unwrap()
    }

    #[test]
    fn ray_target_examples() {
        let front = front_of(&[3.0, 4.0], 2);
        let t = select_target_on_ray(&front, &[0.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(t[0], 2.4, epsilon = 1e-12);
        assert_abs_diff_eq!(t[1], 3.2, epsilon = 1e-12);
        assert_eq!(select_target_on_ray(&front, &[0.0, 0.0], 0.0).unwrap(), vec![3.0, 4.0]);
        assert_eq!(select_target_on_ray(&front, &[3.0, 4.0], 1.0).unwrap(), vec![3.0, 4.0]);
        assert!(select_target_on_ray(&front, &[0.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn ray_target_uses_nearest_point_and_is_collinear() {
        let front = front_of(&[0.0, 5.0, 2.0, 2.0, 5.0, 0.0], 2);
        let u = [0.5, 0.25];
        let t = select_target_on_ray(&front, &u, 0.7).unwrap();
        let f = [2.0, 2.0];
        let (d, e) = ([t[0] - f[0], t[1] - f[1]], [u[0] - f[0], u[1] - f[1]]);
        assert_abs_diff_eq!(d[0] * e[1] - d[1] * e[0], 0.0, epsilon = 1e-10);
        assert!(d[0] * e[0] + d[1] * e[1] > 0.0);
        assert_abs_diff_eq!((d[0] * d[0] + d[1] * d[1]).sqrt(), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn front_keeps_matching_settings() {
        let pts = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 2.0, 2.0, 1.0]);
        let settings = DMatrix::from_row_slice(3, 1, &[0.1, 0.2, 0.3]);
        let tr = OutputTransform {
            means: vec![10.0, 0.0],
            sds: vec![2.0, 1.0],
        };
        let front = ParetoFront::from_draws(&pts, &settings, &tr).unwrap();
        assert_eq!(front.source_rows, vec![0, 2]);
        assert_eq!(front.settings.as_slice(), &[0.1, 0.3]);
        assert_eq!(front.native_points[(0, 0)], 12.0);
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }

    fn band_template() -> PosteriorSpec {
        let model = ComputerModel::simulated_example().select_outputs(&[0, 2]).unwrap();
        let reference = sample_model(&model, &latin_hypercube(300, 3, 5).unwrap()).unwrap();
        let tr = reference.transform().clone();
        let target = TargetSet::new(control_grid(1, 4).unwrap(), vec![0.7, 17.0], &tr).unwrap();
        PosteriorSpec::new(
            Response::Direct(Arc::new(model.clone())),
            model.space().clone(),
            target,
            vec![(0.0, 1.0); 2],
            NoiseSpec::sampled(2),
            tr,
        )
        .unwrap()
    }

    #[test]
    fn single_point_band_is_one_run() {
        let template = band_template();
        let band = BandSpec {
            grid_outputs: vec![1],
            grid: vec![vec![17.0]],
            free_output: 0,
            free_target: -4.0,
            constrained_sigma2: DEFAULT_CONSTRAINED_SIGMA2,
            level: DEFAULT_BAND_LEVEL,
        };
        let cfg = ChainConfig {
            iterations: 1000,
            burn_in: 500,
            ..Default::default()
        };
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let out = pareto_bands(&template, &band, &cfg, |s, c| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            assert_eq!(s.noise().modes()[1], NoiseMode::Fixed(0.01));
            assert_eq!(s.noise().modes()[0], NoiseMode::Sampled);
            run_chains(s, c)
        })
        .unwrap();
        assert_eq!(calls.into_inner(), 1);
        assert_eq!(out.len(), 1);
        assert!(out.lower[0] <= out.medians[0] && out.medians[0] <= out.upper[0]);
        assert!(out.upper[0] > out.lower[0]);
    }

    #[test]
    fn band_rejects_bad_output_sets() {
        let template = band_template();
        let base = BandSpec {
            grid_outputs: vec![1],
            grid: vec![vec![17.0]],
            free_output: 1,
            free_target: -4.0,
            constrained_sigma2: 0.01,
            level: 0.9,
        };
        let cfg = ChainConfig::default();
        assert!(pareto_bands(&template, &base, &cfg, run_chains).is_err());
        let empty = BandSpec {
            free_output: 0,
            grid: vec![],
            ..base
        };
        assert!(pareto_bands(&template, &empty, &cfg, run_chains).is_err());
    }

    proptest! {
        #[test]
        fn dominance_is_irreflexive_and_antisymmetric(
            a in prop::collection::vec(-3i32..3, 3),
            b in prop::collection::vec(-3i32..3, 3),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            prop_assert!(!dominates(&a, &a).unwrap());
            prop_assert!(!(dominates(&a, &b).unwrap() && dominates(&b, &a).unwrap()));
        }

        #[test]
        fn retained_points_are_undominated(
            pts in prop::collection::vec(prop::collection::vec(0u8..6, 2), 1..40),
        ) {
            let n = pts.len();
            let m = DMatrix::from_fn(n, 2, |r, c| f64::from(pts[r][c]));
            let keep = pareto_filter(&m);
            prop_assert!(!keep.is_empty());
            for &i in &keep {
                for j in 0..n {
                    let a: Vec<f64> = m.row(j).iter().copied().collect();
                    let b: Vec<f64> = m.row(i).iter().copied().collect();
                    prop_assert!(!dominates(&a, &b).unwrap());
                }
            }
        }
    }
}
