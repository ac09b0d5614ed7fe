//! Runs one command end to end and writes its artifacts into the output
//! directory. Commands communicate through that directory: `emulate` leaves
//! `emulator.json`, `prelim` leaves `suggested_target.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Command, ModelSource, NoiseChoice, ResponseKind, RunConfig, TargetChoice};
use crate::design_space::{latin_hypercube, DesignSpace, OutputTransform, SimulationDataset};
use crate::emulator::{Emulator, EmulatorDocument, FitOptions, SMOOTHNESS};
use crate::error::{CtoError, Result};
use crate::models::{load_dataset, load_tabulated_sim, sample_model, write_tabulated_sim, ComputerModel};
use crate::pareto::{estimate_utopia, pareto_bands, select_target_on_ray, BandSpec, ParetoFront};
use crate::posterior::{control_grid, NoiseMode, NoiseSpec, PosteriorSpec, Response, TargetSet};
use crate::sampler::{
    grid_averaged_means, posterior_predictive, run_chains, ChainSet, RHAT_THRESHOLD,
};
use crate::seed::{self, derive_seed};

pub const EMULATOR_FILE: &str = "emulator.json";
pub const DATASET_FILE: &str = "dataset.csv";
pub const SUGGESTED_TARGET_FILE: &str = "suggested_target.json";

#[derive(Debug, Clone)]
pub struct Outcome {
    pub command: Command,
    pub out: PathBuf,
    /// File names relative to `out`, including the manifest.
    pub files: Vec<String>,
    /// False when any chain set exceeded the R-hat threshold.
    pub converged: bool,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Command,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaled {
    pub standardized: Vec<f64>,
    pub native: Vec<f64>,
}

impl Scaled {
    fn from_standardized(v: Vec<f64>, tr: &OutputTransform) -> Self {
        Self {
            native: tr.destandardize_vec(&v),
            standardized: v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestedTarget {
    pub output_names: Vec<String>,
    pub utopia: Scaled,
    pub nearest_front_point: Scaled,
    pub standoff: f64,
    pub target: Scaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub mean_unit: f64,
    pub sd_unit: f64,
    pub rhat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSummary {
    pub output: String,
    pub mean_standardized: f64,
    pub sd_standardized: f64,
    pub mean_native: f64,
    pub sd_native: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sigma2Summary {
    pub output: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub chain: usize,
    pub accept_rate_theta: f64,
    /// `null` for outputs with fixed noise.
    pub accept_rate_sigma2: Vec<Option<f64>>,
}

/// `summary.json` of the prelim and cto commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: Command,
    pub seed: u64,
    pub output_names: Vec<String>,
    pub transform: OutputTransform,
    pub control_grid: Vec<Vec<f64>>,
    pub target: Scaled,
    pub noise: Vec<NoiseMode>,
    pub draws: usize,
    pub theta: Vec<ThetaSummary>,
    pub sigma2: Vec<Sigma2Summary>,
    pub predictive: Vec<OutputSummary>,
    pub max_rhat: Option<f64>,
    pub converged: bool,
    pub chains: Vec<ChainDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatorOutputSummary {
    pub output: String,
    pub rho: Vec<f64>,
    pub beta: Vec<f64>,
    pub precision: f64,
    pub nugget: f64,
    /// Held-out RMSE in standardized units; builtin models only.
    pub holdout_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulateSummary {
    pub command: Command,
    pub seed: u64,
    pub runs: usize,
    pub transform: OutputTransform,
    pub outputs: Vec<EmulatorOutputSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPointSummary {
    pub grid: Vec<f64>,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub median_standardized: f64,
    pub rhat: Option<f64>,
    pub reliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandsSummary {
    pub command: Command,
    pub seed: u64,
    pub constrained: Vec<String>,
    pub free: String,
    pub free_target: Scaled,
    pub level: f64,
    pub constrained_sigma2: f64,
    pub transform: OutputTransform,
    pub points: Vec<BandPointSummary>,
    pub converged: bool,
}

struct Run<'a> {
    cfg: &'a RunConfig,
    log: Vec<String>,
    files: Vec<String>,
    diagnostics: Vec<String>,
}

/// Everything the sampling commands need to know about the response.
struct Problem {
    space: DesignSpace,
    output_names: Vec<String>,
    response: Response,
    transform: OutputTransform,
    /// Standardized observed outputs, used for utopia estimates and ranges.
    observed: DMatrix<f64>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn fmt(v: f64) -> String {
    v.to_string()
}

fn name_indices(available: &[String], wanted: &[String], what: &str) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|w| {
            available.iter().position(|a| a == w).ok_or_else(|| {
                CtoError::Argument(format!("unknown {what} \"{w}\"; available: {}", available.join(", ")))
            })
        })
        .collect()
}

fn select_dataset_outputs(ds: &SimulationDataset, idx: &[usize]) -> Result<SimulationDataset> {
    SimulationDataset::new(
        ds.space().clone(),
        ds.inputs().clone(),
        ds.raw_outputs().select_columns(idx.iter()),
        idx.iter().map(|&i| ds.output_names()[i].clone()).collect(),
    )
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = if n > 1.0 {
        values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Runs `cfg`'s command. `run.log` and `manifest.json` are written even when
/// chains fail to converge; `run.log` is also written on error.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Outcome> {
    let command = cfg.command();
    fs::create_dir_all(&cfg.out)?;
    let mut run = Run {
        cfg,
        log: vec![
            format!("command = {}", command.name()),
            format!("config = {}", cfg.source.display()),
            format!("seed = {}", cfg.seed),
        ],
        files: Vec::new(),
        diagnostics: Vec::new(),
    };
    for d in &cfg.defaults_applied {
        run.log.push(format!("default: {d}"));
    }
    let result = match command {
        Command::Emulate => run.emulate().map(|_| true),
        Command::Prelim => run.prelim(),
        Command::Cto => run.cto(),
        Command::Bands => run.bands(),
    };
    let converged = match &result {
        Ok(c) => *c,
        Err(e) => {
            run.log.push(format!("error: {e}"));
            false
        }
    };
    run.log.extend(run.diagnostics.iter().map(|d| format!("diagnostic: {d}")));
    run.log.push(format!("converged = {converged}"));
    let mut text = run.log.join("\n");
    text.push('\n');
    fs::write(cfg.out.join("run.log"), text)?;
    run.files.push("run.log".into());
    result?;

    let mut entries = Vec::new();
    for name in &run.files {
        let path = cfg.out.join(name);
        entries.push(ManifestEntry {
            name: name.clone(),
            sha256: sha256_file(&path)?,
            bytes: fs::metadata(&path)?.len(),
        });
    }
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    let manifest = Manifest {
        command,
        seed: cfg.seed,
        files: entries,
    };
    run.write_json("manifest.json", &manifest)?;
    Ok(Outcome {
        command,
        out: cfg.out.clone(),
        files: run.files,
        converged,
        diagnostics: run.diagnostics,
    })
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(name), text)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn builtin_model(&self) -> Result<ComputerModel> {
        let model = ComputerModel::simulated_example();
        match &self.cfg.outputs {
            Some(names) => model.select_outputs(&name_indices(model.output_names(), names, "output")?),
            None => Ok(model),
        }
    }

    fn emulate(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let (dataset, model) = match &cfg.model {
            ModelSource::Builtin(_) => {
                let model = self.builtin_model()?;
                let design = latin_hypercube(
                    cfg.emulator.design_runs,
                    model.space().dim(),
                    derive_seed(cfg.seed, seed::DESIGN, 0),
                )?;
                (sample_model(&model, &design)?, Some(model))
            }
            ModelSource::Tabulated { csv, variables } => {
                let space = DesignSpace::new(variables.clone())?;
                let ds = load_tabulated_sim(csv, &space)?;
                let ds = match &cfg.outputs {
                    Some(names) => select_dataset_outputs(&ds, &name_indices(ds.output_names(), names, "output")?)?,
                    None => ds,
                };
                (ds, None)
            }
        };
        self.log.push(format!("training runs = {}", dataset.n()));
        let emulator = Emulator::fit(
            &dataset,
            &FitOptions {
                starts: cfg.emulator.starts,
                seed: derive_seed(cfg.seed, seed::FIT, 0),
                nugget: cfg.emulator.nugget,
            },
        )?;

        let holdout = match (&model, cfg.emulator.holdout_runs) {
            (Some(model), n) if n > 0 => {
                let design = latin_hypercube(n, model.space().dim(), derive_seed(cfg.seed, seed::HOLDOUT, 0))?;
                let truth = sample_model(model, &design)?;
                let mut rmse = Vec::new();
                for i in 0..dataset.m() {
                    let pred = emulator.predict_mean(i, &design)?;
                    let sse: f64 = (0..n)
                        .map(|r| {
                            let y = dataset.transform().standardize(i, truth.raw_outputs()[(r, i)]);
                            (pred[r] - y).powi(2)
                        })
                        .sum();
                    rmse.push(Some((sse / n as f64).sqrt()));
                }
                rmse
            }
            _ => vec![None; dataset.m()],
        };

        write_tabulated_sim(&dataset, &self.path(DATASET_FILE))?;
        self.files.push(DATASET_FILE.into());
        self.files.push(format!("{DATASET_FILE}.json"));
        let doc = EmulatorDocument {
            dataset_path: DATASET_FILE.into(),
            dataset_sha256: sha256_file(&self.path(DATASET_FILE))?,
            output_names: dataset.output_names().to_vec(),
            smoothness: SMOOTHNESS,
            mean: 0.0,
            hyperparameters: emulator.hyperparameters(),
        };
        self.write_json(EMULATOR_FILE, &doc)?;

        let outputs = doc
            .hyperparameters
            .iter()
            .zip(dataset.output_names())
            .zip(&holdout)
            .map(|((h, name), rmse)| {
                if let Some(r) = rmse {
                    self.log.push(format!("holdout rmse [{name}] = {r}"));
                }
                EmulatorOutputSummary {
                    output: name.clone(),
                    rho: h.rho.clone(),
                    beta: h.beta(),
                    precision: h.precision,
                    nugget: h.nugget,
                    holdout_rmse: *rmse,
                }
            })
            .collect();
        let summary = EmulateSummary {
            command: Command::Emulate,
            seed: cfg.seed,
            runs: dataset.n(),
            transform: dataset.transform().clone(),
            outputs,
        };
        self.write_json("summary.json", &summary)
    }

    fn load_emulator(&self, expected_outputs: Option<&[String]>) -> Result<(Emulator, SimulationDataset)> {
        let doc_path = self.path(EMULATOR_FILE);
        if !doc_path.exists() {
            return Err(CtoError::State(format!(
                "no fitted emulator at {}; run the `emulate` command first",
                doc_path.display()
            )));
        }
        let doc: EmulatorDocument = serde_json::from_slice(&fs::read(&doc_path)?)?;
        let data_path = self.cfg.out.join(&doc.dataset_path);
        let digest = sha256_file(&data_path)?;
        if digest != doc.dataset_sha256 {
            return Err(CtoError::State(format!(
                "{} changed since the emulator was fitted; rerun `emulate`",
                data_path.display()
            )));
        }
        let ds = load_dataset(&data_path)?;
        if let Some(names) = expected_outputs {
            if names != doc.output_names.as_slice() {
                return Err(CtoError::State(format!(
                    "emulator outputs {:?} differ from configured outputs {:?}; rerun `emulate`",
                    doc.output_names, names
                )));
            }
        }
        Ok((Emulator::from_hyperparameters(&ds, doc.hyperparameters)?, ds))
    }

    fn problem(&self) -> Result<Problem> {
        let cfg = self.cfg;
        match (&cfg.model, cfg.response) {
            (ModelSource::Builtin(_), ResponseKind::Direct) => {
                let model = self.builtin_model()?;
                let design = latin_hypercube(
                    cfg.reference_runs,
                    model.space().dim(),
                    derive_seed(cfg.seed, seed::REFERENCE, 0),
                )?;
                let reference = sample_model(&model, &design)?;
                Ok(Problem {
                    space: model.space().clone(),
                    output_names: model.output_names().to_vec(),
                    transform: reference.transform().clone(),
                    observed: reference.outputs().clone(),
                    response: Response::Direct(Arc::new(model)),
                })
            }
            (ModelSource::Builtin(_), ResponseKind::Emulator) => {
                let model = self.builtin_model()?;
                let (em, ds) = self.load_emulator(Some(model.output_names()))?;
                Ok(Problem {
                    space: ds.space().clone(),
                    output_names: ds.output_names().to_vec(),
                    transform: ds.transform().clone(),
                    observed: ds.outputs().clone(),
                    response: Response::Emulator(Arc::new(em)),
                })
            }
            (ModelSource::Tabulated { .. }, _) => {
                let (em, ds) = self.load_emulator(cfg.outputs.as_deref())?;
                Ok(Problem {
                    space: ds.space().clone(),
                    output_names: ds.output_names().to_vec(),
                    transform: ds.transform().clone(),
                    observed: ds.outputs().clone(),
                    response: Response::Emulator(Arc::new(em)),
                })
            }
        }
    }

    fn target(&self, problem: &Problem) -> Result<Vec<f64>> {
        let m = problem.output_names.len();
        match self.cfg.target() {
            TargetChoice::Explicit(v) => {
                if v.len() != m {
                    return Err(CtoError::shape("target", m, v.len()));
                }
                Ok(problem.transform.standardize_vec(v))
            }
            TargetChoice::Utopia => estimate_utopia(&problem.observed),
            TargetChoice::Ray => {
                let path = self.path(SUGGESTED_TARGET_FILE);
                if !path.exists() {
                    return Err(CtoError::State(format!(
                        "no suggested target at {}; run the `prelim` command first",
                        path.display()
                    )));
                }
                let s: SuggestedTarget = serde_json::from_slice(&fs::read(&path)?)?;
                if s.output_names != problem.output_names {
                    return Err(CtoError::State(format!(
                        "suggested target is for outputs {:?}, not {:?}; rerun `prelim`",
                        s.output_names, problem.output_names
                    )));
                }
                Ok(problem.transform.standardize_vec(&s.target.native))
            }
        }
    }

    fn noise(&self, m: usize) -> Result<NoiseSpec> {
        match self.cfg.noise() {
            NoiseChoice::Sampled => Ok(NoiseSpec::sampled(m)),
            NoiseChoice::Preliminary => NoiseSpec::fixed(vec![self.cfg.preliminary_sigma2; m]),
            NoiseChoice::Fixed(v) => {
                if v.len() != m {
                    return Err(CtoError::shape("fixed noise", m, v.len()));
                }
                NoiseSpec::fixed(v.clone())
            }
        }
    }

    fn spec(&self, problem: &Problem, target: Vec<f64>, noise: NoiseSpec) -> Result<PosteriorSpec> {
        let grid = control_grid(problem.space.p(), self.cfg.grid_points)?;
        let target = TargetSet::from_standardized(grid, target, &problem.transform)?;
        let bounds = self
            .cfg
            .theta_bounds
            .clone()
            .unwrap_or_else(|| vec![(0.0, 1.0); problem.space.q()]);
        PosteriorSpec::new(
            problem.response.clone(),
            problem.space.clone(),
            target,
            bounds,
            noise,
            problem.transform.clone(),
        )
    }

    fn sample(&mut self, spec: &PosteriorSpec) -> Result<ChainSet> {
        let set = run_chains(spec, &self.cfg.chains)?;
        for (c, chain) in set.chains.iter().enumerate() {
            self.log.push(format!("chain {c}: theta acceptance = {:.4}", chain.accept_rate_theta));
        }
        match &set.rhat {
            Some(r) => {
                self.log.push(format!("rhat = {r:?}"));
                for (k, v) in r.iter().enumerate() {
                    if !(*v <= RHAT_THRESHOLD) {
                        self.diagnostics.push(format!(
                            "R-hat {v:.4} for {} exceeds {RHAT_THRESHOLD}",
                            spec.space().design_variables()[k].name
                        ));
                    }
                }
            }
            None => self.log.push("rhat unavailable with a single chain".into()),
        }
        Ok(set)
    }

    fn write_draws(&mut self, spec: &PosteriorSpec, problem: &Problem, set: &ChainSet) -> Result<()> {
        let sampled: Vec<usize> = (0..spec.m())
            .filter(|&i| spec.noise().modes()[i] == NoiseMode::Sampled)
            .collect();
        let mut header = vec!["chain".to_string(), "iteration".to_string()];
        header.extend(problem.space.design_variables().iter().map(|v| v.name.clone()));
        header.extend(sampled.iter().map(|&i| format!("sigma2_{}", problem.output_names[i])));
        header.push("log_post".into());
        let burn_in = self.cfg.chains.burn_in;
        let mut rows = Vec::new();
        for (c, chain) in set.chains.iter().enumerate() {
            for r in 0..chain.theta_draws.nrows() {
                let unit: Vec<f64> = chain.theta_draws.row(r).iter().copied().collect();
                let mut row = vec![c.to_string(), (burn_in + r).to_string()];
                row.extend(problem.space.unscale_design(&unit).into_iter().map(fmt));
                row.extend(sampled.iter().map(|&i| fmt(chain.sigma2_draws[(r, i)])));
                row.push(fmt(chain.log_post[r]));
                rows.push(row);
            }
        }
        self.write_csv("draws.csv", &header, &rows)
    }

    fn summarize(
        &self,
        spec: &PosteriorSpec,
        problem: &Problem,
        set: &ChainSet,
        predictive: Vec<OutputSummary>,
    ) -> RunSummary {
        let pooled = set.pooled_theta();
        let vars = problem.space.design_variables();
        let theta = vars
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let (mean_unit, sd_unit) = mean_sd(pooled.column(k).iter().copied());
                ThetaSummary {
                    name: v.name.clone(),
                    mean: v.lower + mean_unit * v.width(),
                    sd: sd_unit * v.width(),
                    mean_unit,
                    sd_unit,
                    rhat: set.rhat.as_ref().map(|r| r[k]),
                }
            })
            .collect();
        let pooled_s2 = set.pooled_sigma2();
        let sigma2 = (0..spec.m())
            .filter(|&i| spec.noise().modes()[i] == NoiseMode::Sampled)
            .map(|i| {
                let (mean, sd) = mean_sd(pooled_s2.column(i).iter().copied());
                Sigma2Summary {
                    output: problem.output_names[i].clone(),
                    mean,
                    sd,
                }
            })
            .collect();
        let chains = set
            .chains
            .iter()
            .enumerate()
            .map(|(c, ch)| ChainDiagnostics {
                chain: c,
                accept_rate_theta: ch.accept_rate_theta,
                accept_rate_sigma2: ch
                    .accept_rate_sigma2
                    .iter()
                    .map(|a| if a.is_nan() { None } else { Some(*a) })
                    .collect(),
            })
            .collect();
        let control = spec
            .target()
            .control_grid()
            .iter()
            .map(|u| {
                u.iter()
                    .zip(problem.space.control_variables())
                    .map(|(x, v)| v.lower + x * v.width())
                    .collect()
            })
            .collect();
        RunSummary {
            command: self.cfg.command(),
            seed: self.cfg.seed,
            output_names: problem.output_names.clone(),
            transform: problem.transform.clone(),
            control_grid: control,
            target: Scaled::from_standardized(spec.target().targets().to_vec(), &problem.transform),
            noise: spec.noise().modes().to_vec(),
            draws: pooled.nrows(),
            theta,
            sigma2,
            predictive,
            max_rhat: set.max_rhat(),
            converged: set.converged(RHAT_THRESHOLD),
            chains,
        }
    }

    fn output_summaries(problem: &Problem, per_output: Vec<Vec<f64>>) -> Vec<OutputSummary> {
        per_output
            .into_iter()
            .enumerate()
            .map(|(i, std_values)| {
                let (mean, sd) = mean_sd(std_values.iter().copied());
                OutputSummary {
                    output: problem.output_names[i].clone(),
                    mean_standardized: mean,
                    sd_standardized: sd,
                    mean_native: problem.transform.destandardize(i, mean),
                    sd_native: sd * problem.transform.sds[i],
                }
            })
            .collect()
    }

    fn prelim(&mut self) -> Result<bool> {
        let problem = self.problem()?;
        let m = problem.output_names.len();
        let target = self.target(&problem)?;
        let spec = self.spec(&problem, target, self.noise(m)?)?;
        self.log.push(format!("target (standardized) = {:?}", spec.target().targets()));
        let set = self.sample(&spec)?;
        self.write_draws(&spec, &problem, &set)?;

        let pooled = set.pooled_theta();
        let means = grid_averaged_means(&spec, &pooled)?;
        let front = ParetoFront::from_draws(&means, &pooled, &problem.transform)?;
        self.log.push(format!("pareto front: {} of {} draws", front.len(), pooled.nrows()));
        let vars = problem.space.design_variables();
        let mut header = vec!["draw".to_string()];
        header.extend(vars.iter().map(|v| v.name.clone()));
        header.extend(problem.output_names.iter().cloned());
        header.extend(problem.output_names.iter().map(|n| format!("{n}_std")));
        let rows: Vec<Vec<String>> = (0..front.len())
            .map(|k| {
                let unit: Vec<f64> = front.settings.row(k).iter().copied().collect();
                let mut row = vec![front.source_rows[k].to_string()];
                row.extend(problem.space.unscale_design(&unit).into_iter().map(fmt));
                row.extend(front.native_points.row(k).iter().copied().map(fmt));
                row.extend(front.points.row(k).iter().copied().map(fmt));
                row
            })
            .collect();
        self.write_csv("front.csv", &header, &rows)?;

        let utopia = estimate_utopia(&problem.observed)?;
        let nearest: Vec<f64> = front.points.row(front.nearest(&utopia)?).iter().copied().collect();
        let suggested = select_target_on_ray(&front, &utopia, self.cfg.standoff)?;
        let doc = SuggestedTarget {
            output_names: problem.output_names.clone(),
            utopia: Scaled::from_standardized(utopia, &problem.transform),
            nearest_front_point: Scaled::from_standardized(nearest, &problem.transform),
            standoff: self.cfg.standoff,
            target: Scaled::from_standardized(suggested, &problem.transform),
        };
        self.log.push(format!("suggested target (native) = {:?}", doc.target.native));
        self.write_json(SUGGESTED_TARGET_FILE, &doc)?;

        let per_output = (0..m).map(|i| means.column(i).iter().copied().collect()).collect();
        let summary = self.summarize(&spec, &problem, &set, Self::output_summaries(&problem, per_output));
        self.write_json("summary.json", &summary)?;
        Ok(summary.converged)
    }

    fn cto(&mut self) -> Result<bool> {
        let problem = self.problem()?;
        let m = problem.output_names.len();
        let target = self.target(&problem)?;
        let spec = self.spec(&problem, target, self.noise(m)?)?;
        self.log.push(format!("target (standardized) = {:?}", spec.target().targets()));
        let set = self.sample(&spec)?;
        self.write_draws(&spec, &problem, &set)?;

        let pooled = set.pooled_theta();
        let pred = posterior_predictive(
            &spec,
            &pooled,
            self.cfg.predictive,
            derive_seed(self.cfg.seed, seed::PREDICTIVE, 0),
        )?;
        let g = spec.target().g();
        let mut header = vec!["chain".to_string(), "iteration".to_string()];
        for name in &problem.output_names {
            header.extend((0..g).map(|j| format!("{name}@{j}")));
        }
        let kept = self.cfg.chains.kept();
        let burn_in = self.cfg.chains.burn_in;
        let rows: Vec<Vec<String>> = (0..pred.nrows())
            .map(|r| {
                let mut row = vec![(r / kept).to_string(), (burn_in + r % kept).to_string()];
                row.extend(pred.row(r).iter().copied().map(fmt));
                row
            })
            .collect();
        self.write_csv("predictive.csv", &header, &rows)?;

        let per_output = (0..m)
            .map(|i| {
                pred.columns(i * g, g)
                    .iter()
                    .map(|v| problem.transform.standardize(i, *v))
                    .collect()
            })
            .collect();
        let summary = self.summarize(&spec, &problem, &set, Self::output_summaries(&problem, per_output));
        self.write_json("summary.json", &summary)?;
        Ok(summary.converged)
    }

    fn bands(&mut self) -> Result<bool> {
        let cfg = self.cfg;
        let settings = cfg
            .bands
            .as_ref()
            .ok_or_else(|| CtoError::config(cfg.source.display().to_string(), "missing `bands` section"))?;
        let problem = self.problem()?;
        let m = problem.output_names.len();
        let grid_outputs = name_indices(&problem.output_names, &settings.constrained, "band output")?;
        let free = name_indices(&problem.output_names, std::slice::from_ref(&settings.free), "band output")?[0];
        let observed_min = problem.observed.column(free).min();
        let free_target = observed_min - settings.free_offset;
        for point in &settings.grid {
            for (&i, &v) in grid_outputs.iter().zip(point) {
                let col = problem.observed.column(i);
                let (lo, hi) = (
                    problem.transform.destandardize(i, col.min()),
                    problem.transform.destandardize(i, col.max()),
                );
                if v < lo || v > hi {
                    self.log.push(format!(
                        "warning: band value {v} for {} lies outside the observed range [{lo}, {hi}]",
                        problem.output_names[i]
                    ));
                }
            }
        }
        let template_target = estimate_utopia(&problem.observed)?;
        let template = self.spec(&problem, template_target, NoiseSpec::sampled(m))?;
        let band_spec = BandSpec {
            grid_outputs,
            grid: settings.grid.clone(),
            free_output: free,
            free_target,
            constrained_sigma2: settings.constrained_sigma2,
            level: settings.level,
        };
        self.log.push(format!("free target (standardized) = {free_target}"));
        let band = pareto_bands(&template, &band_spec, &cfg.chains, run_chains)?;

        let mut header = settings.constrained.clone();
        header.extend(["median", "lower", "upper", "rhat", "reliable"].map(String::from));
        let mut rows = Vec::new();
        let mut points = Vec::new();
        for k in 0..band.len() {
            if !band.reliable[k] {
                self.diagnostics.push(format!(
                    "band point {k} ({:?}) has R-hat {:?} above {RHAT_THRESHOLD}",
                    band.grid[k], band.rhat[k]
                ));
            }
            let mut row: Vec<String> = band.grid[k].iter().copied().map(fmt).collect();
            row.extend([band.medians[k], band.lower[k], band.upper[k]].map(fmt));
            row.push(band.rhat[k].map(fmt).unwrap_or_default());
            row.push(band.reliable[k].to_string());
            rows.push(row);
            points.push(BandPointSummary {
                grid: band.grid[k].clone(),
                median: band.medians[k],
                lower: band.lower[k],
                upper: band.upper[k],
                median_standardized: problem.transform.standardize(free, band.medians[k]),
                rhat: band.rhat[k],
                reliable: band.reliable[k],
            });
        }
        self.write_csv("bands.csv", &header, &rows)?;
        let converged = band.reliable.iter().all(|r| *r);
        let summary = BandsSummary {
            command: Command::Bands,
            seed: cfg.seed,
            constrained: settings.constrained.clone(),
            free: settings.free.clone(),
            free_target: Scaled {
                standardized: vec![free_target],
                native: vec![problem.transform.destandardize(free, free_target)],
            },
            level: settings.level,
            constrained_sigma2: settings.constrained_sigma2,
            transform: problem.transform.clone(),
            points,
            converged,
        };
        self.write_json("summary.json", &summary)?;
        Ok(converged)
    }
}
