//! Strict JSON run configuration. Unknown keys are rejected with a
//! suggestion; every default that gets applied is recorded for the run log.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::design_space::VariableSpec;
use crate::emulator::DEFAULT_NUGGET;
use crate::error::{CtoError, Result};
use crate::pareto::{DEFAULT_BAND_LEVEL, DEFAULT_CONSTRAINED_SIGMA2};
use crate::posterior::{DEFAULT_GRID_POINTS, PRELIMINARY_SIGMA2};
use crate::sampler::{ChainConfig, PredictiveMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Sample or load simulator runs and fit the GP emulator.
    Emulate,
    /// Flat-noise run that maps the Pareto front and suggests a target.
    Prelim,
    /// Calibration against the configured target with sampled noise.
    Cto,
    /// Gridded constrained runs giving a Pareto band.
    Bands,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Emulate => "emulate",
            Command::Prelim => "prelim",
            Command::Cto => "cto",
            Command::Bands => "bands",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Builtin(String),
    Tabulated { csv: PathBuf, variables: Vec<VariableSpec> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseKind {
    Direct,
    Emulator,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetChoice {
    /// Native-unit values, one per output.
    Explicit(Vec<f64>),
    /// Componentwise minimum of the observed outputs.
    Utopia,
    /// The target suggested by a previous `prelim` run.
    Ray,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseChoice {
    Sampled,
    Preliminary,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmulatorSettings {
    pub design_runs: usize,
    pub starts: usize,
    pub nugget: f64,
    pub holdout_runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandSettings {
    pub constrained: Vec<String>,
    pub free: String,
    /// Native values of the constrained outputs, one row per grid point.
    pub grid: Vec<Vec<f64>>,
    pub constrained_sigma2: f64,
    pub level: f64,
    /// Free-output target sits this many standardized units below the
    /// observed minimum.
    pub free_offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: PathBuf,
    pub command: Option<Command>,
    pub model: ModelSource,
    pub outputs: Option<Vec<String>>,
    pub response: ResponseKind,
    pub emulator: EmulatorSettings,
    /// `None` until [`RunConfig::for_command`] picks the command's default.
    pub target: Option<TargetChoice>,
    pub standoff: f64,
    pub noise: Option<NoiseChoice>,
    pub preliminary_sigma2: f64,
    pub grid_points: usize,
    pub theta_bounds: Option<Vec<(f64, f64)>>,
    pub chains: ChainConfig,
    pub predictive: PredictiveMode,
    pub reference_runs: usize,
    pub bands: Option<BandSettings>,
    pub out: PathBuf,
    pub seed: u64,
    /// `key = value` for every default that was filled in.
    pub defaults_applied: Vec<String>,
}

const TOP_KEYS: &[&str] = &[
    "command",
    "model",
    "outputs",
    "response",
    "emulator",
    "target",
    "standoff",
    "noise",
    "preliminary_sigma2",
    "grid_points",
    "theta_bounds",
    "mcmc",
    "predictive",
    "reference_runs",
    "bands",
    "out",
    "seed",
];
const MODEL_KEYS: &[&str] = &["builtin", "csv", "variables"];
const EMULATOR_KEYS: &[&str] = &["design_runs", "starts", "nugget", "holdout_runs"];
const MCMC_KEYS: &[&str] = &[
    "iterations",
    "burn_in",
    "chains",
    "adapt_interval",
    "target_accept_theta",
    "target_accept_sigma2",
];
const BAND_KEYS: &[&str] = &[
    "constrained",
    "free",
    "grid",
    "constrained_sigma2",
    "level",
    "free_offset",
];

/// Common misnamings mapped to the key that was probably meant.
const SYNONYMS: &[(&str, &str)] = &[
    ("sigma", "noise"),
    ("sigma2", "noise"),
    ("noise_mode", "noise"),
    ("error", "noise"),
    ("targets", "target"),
    ("target_outcomes", "target"),
    ("output_dir", "out"),
    ("out_dir", "out"),
    ("output", "out"),
    ("master_seed", "seed"),
    ("rng_seed", "seed"),
    ("iterations", "mcmc"),
    ("burn_in", "mcmc"),
    ("chains", "mcmc"),
    ("sampler", "mcmc"),
    ("burnin", "burn_in"),
    ("n_chains", "chains"),
    ("nchains", "chains"),
    ("band", "bands"),
    ("grid_size", "grid_points"),
    ("g", "grid_points"),
];

pub const DEFAULT_DESIGN_RUNS: usize = 100;
pub const DEFAULT_HOLDOUT_RUNS: usize = 100;
pub const DEFAULT_REFERENCE_RUNS: usize = 2000;
pub const DEFAULT_STANDOFF: f64 = 1.0;
pub const DEFAULT_FREE_OFFSET: f64 = 1.0;

fn suggestion(key: &str, allowed: &[&str]) -> Option<String> {
    if let Some((_, to)) = SYNONYMS.iter().find(|(from, to)| *from == key && allowed.contains(to)) {
        return Some(to.to_string());
    }
    allowed
        .iter()
        .map(|a| (strsim::jaro_winkler(key, a), *a))
        .filter(|(score, _)| *score >= 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, a)| a.to_string())
}

struct Reader<'a> {
    path: &'a Path,
    defaults: Vec<String>,
}

impl Reader<'_> {
    fn err(&self, message: impl Into<String>) -> CtoError {
        CtoError::config(self.path.display().to_string(), message)
    }

    fn object<'v>(&self, value: &'v Value, at: &str, allowed: &[&str]) -> Result<&'v Map<String, Value>> {
        let map = value
            .as_object()
            .ok_or_else(|| self.err(format!("`{at}` must be a JSON object")))?;
        for key in map.keys() {
            if !allowed.contains(&key.as_str()) {
                let hint = suggestion(key, allowed)
                    .map(|s| format!("; did you mean \"{s}\"?"))
                    .unwrap_or_default();
                let place = if at.is_empty() { String::new() } else { format!(" in `{at}`") };
                return Err(self.err(format!("unknown key \"{key}\"{place}{hint}")));
            }
        }
        Ok(map)
    }

    fn typed<T: DeserializeOwned>(&self, value: &Value, at: &str) -> Result<T> {
        serde_json::from_value(value.clone()).map_err(|e| self.err(format!("`{at}`: {e}")))
    }

    fn optional<T: DeserializeOwned>(&self, map: &Map<String, Value>, prefix: &str, key: &str) -> Result<Option<T>> {
        map.get(key)
            .map(|v| self.typed(v, &join(prefix, key)))
            .transpose()
    }

    fn or_default<T: DeserializeOwned + std::fmt::Debug>(
        &mut self,
        map: &Map<String, Value>,
        prefix: &str,
        key: &str,
        default: T,
    ) -> Result<T> {
        match self.optional(map, prefix, key)? {
            Some(v) => Ok(v),
            None => {
                self.defaults.push(format!("{} = {:?}", join(prefix, key), default));
                Ok(default)
            }
        }
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Reads and validates a configuration file. Relative paths inside it are
/// resolved against the file's directory.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CtoError::config(path.display().to_string(), format!("cannot read: {e}")))?;
    parse_config_str(&text, path)
}

pub fn parse_config_str(text: &str, path: &Path) -> Result<RunConfig> {
    let mut r = Reader {
        path,
        defaults: Vec::new(),
    };
    let root: Value = serde_json::from_str(text).map_err(|e| r.err(format!("malformed JSON: {e}")))?;
    let top = r.object(&root, "", TOP_KEYS)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: PathBuf| if p.is_absolute() { p } else { base_dir.join(p) };

    let command: Option<Command> = r.optional(top, "", "command")?;

    let model_value = top.get("model").ok_or_else(|| r.err("missing required key \"model\""))?;
    let model_map = r.object(model_value, "model", MODEL_KEYS)?;
    let model = match (model_map.get("builtin"), model_map.get("csv")) {
        (Some(name), None) => {
            if model_map.contains_key("variables") {
                return Err(r.err("`model.variables` applies only to a csv model"));
            }
            let name: String = r.typed(name, "model.builtin")?;
            if name != "simulated_example" {
                return Err(r.err(format!(
                    "unknown builtin model \"{name}\"; available: \"simulated_example\""
                )));
            }
            ModelSource::Builtin(name)
        }
        (None, Some(csv)) => {
            let csv: PathBuf = r.typed(csv, "model.csv")?;
            let variables = model_map
                .get("variables")
                .ok_or_else(|| r.err("a csv model needs `model.variables`"))?;
            ModelSource::Tabulated {
                csv: resolve(csv),
                variables: r.typed(variables, "model.variables")?,
            }
        }
        _ => return Err(r.err("`model` needs exactly one of \"builtin\" or \"csv\"")),
    };

    let outputs: Option<Vec<String>> = r.optional(top, "", "outputs")?;
    let default_response = match model {
        ModelSource::Builtin(_) => ResponseKind::Direct,
        ModelSource::Tabulated { .. } => ResponseKind::Emulator,
    };
    let response = r.or_default(top, "", "response", default_response)?;
    if matches!(model, ModelSource::Tabulated { .. }) && response == ResponseKind::Direct {
        return Err(r.err("a csv model has no evaluator; use \"response\": \"emulator\""));
    }

    let empty = Map::new();
    let em_map = match top.get("emulator") {
        Some(v) => r.object(v, "emulator", EMULATOR_KEYS)?,
        None => &empty,
    };
    let emulator = EmulatorSettings {
        design_runs: r.or_default(em_map, "emulator", "design_runs", DEFAULT_DESIGN_RUNS)?,
        starts: r.or_default(em_map, "emulator", "starts", 8usize)?,
        nugget: r.or_default(em_map, "emulator", "nugget", DEFAULT_NUGGET)?,
        holdout_runs: r.or_default(em_map, "emulator", "holdout_runs", DEFAULT_HOLDOUT_RUNS)?,
    };
    if emulator.starts == 0 {
        return Err(r.err("`emulator.starts` must be at least 1"));
    }
    if !(emulator.nugget >= 0.0) {
        return Err(r.err("`emulator.nugget` must be >= 0"));
    }

    let target = match top.get("target") {
        None => None,
        Some(Value::String(s)) if s == "utopia" => Some(TargetChoice::Utopia),
        Some(Value::String(s)) if s == "ray" => Some(TargetChoice::Ray),
        Some(v @ Value::Array(_)) => Some(TargetChoice::Explicit(r.typed(v, "target")?)),
        Some(_) => {
            return Err(r.err("`target` must be \"utopia\", \"ray\" or an array of native values"))
        }
    };
    let standoff: f64 = r.or_default(top, "", "standoff", DEFAULT_STANDOFF)?;
    if !(standoff >= 0.0 && standoff.is_finite()) {
        return Err(r.err("`standoff` must be finite and >= 0"));
    }

    let noise = match top.get("noise") {
        None => None,
        Some(Value::String(s)) if s == "sampled" => Some(NoiseChoice::Sampled),
        Some(Value::String(s)) if s == "preliminary" => Some(NoiseChoice::Preliminary),
        Some(v @ Value::Array(_)) => {
            let fixed: Vec<f64> = r.typed(v, "noise")?;
            if fixed.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return Err(r.err("fixed `noise` variances must be finite and > 0"));
            }
            Some(NoiseChoice::Fixed(fixed))
        }
        Some(_) => {
            return Err(r.err(
                "`noise` must be \"sampled\", \"preliminary\" or an array of fixed variances",
            ))
        }
    };
    let preliminary_sigma2: f64 = r.or_default(top, "", "preliminary_sigma2", PRELIMINARY_SIGMA2)?;
    if !(preliminary_sigma2 > 0.0 && preliminary_sigma2.is_finite()) {
        return Err(r.err("`preliminary_sigma2` must be finite and > 0"));
    }
    let grid_points: usize = r.or_default(top, "", "grid_points", DEFAULT_GRID_POINTS)?;
    if grid_points == 0 {
        return Err(r.err("`grid_points` must be at least 1"));
    }
    let theta_bounds: Option<Vec<(f64, f64)>> = r.optional(top, "", "theta_bounds")?;

    let seed: u64 = r.or_default(top, "", "seed", 0u64)?;
    let defaults = ChainConfig::default();
    let mcmc_map = match top.get("mcmc") {
        Some(v) => r.object(v, "mcmc", MCMC_KEYS)?,
        None => &empty,
    };
    let chains = ChainConfig {
        iterations: r.or_default(mcmc_map, "mcmc", "iterations", defaults.iterations)?,
        burn_in: r.or_default(mcmc_map, "mcmc", "burn_in", defaults.burn_in)?,
        n_chains: r.or_default(mcmc_map, "mcmc", "chains", defaults.n_chains)?,
        adapt_interval: r.or_default(mcmc_map, "mcmc", "adapt_interval", defaults.adapt_interval)?,
        target_accept_theta: r.or_default(
            mcmc_map,
            "mcmc",
            "target_accept_theta",
            defaults.target_accept_theta,
        )?,
        target_accept_sigma2: r.or_default(
            mcmc_map,
            "mcmc",
            "target_accept_sigma2",
            defaults.target_accept_sigma2,
        )?,
        master_seed: seed,
    };
    chains.validate().map_err(|e| r.err(format!("`mcmc`: {e}")))?;

    let predictive = r.or_default(top, "", "predictive", PredictiveMode::Mean)?;
    let reference_runs: usize = r.or_default(top, "", "reference_runs", DEFAULT_REFERENCE_RUNS)?;
    if reference_runs < 2 {
        return Err(r.err("`reference_runs` must be at least 2"));
    }

    let bands = match top.get("bands") {
        None => None,
        Some(v) => {
            let map = r.object(v, "bands", BAND_KEYS)?;
            let constrained: Vec<String> = match map.get("constrained") {
                Some(Value::String(s)) => vec![s.clone()],
                Some(v) => r.typed(v, "bands.constrained")?,
                None => return Err(r.err("`bands.constrained` is required")),
            };
            let free: String = match map.get("free") {
                Some(v) => r.typed(v, "bands.free")?,
                None => return Err(r.err("`bands.free` is required")),
            };
            let grid = parse_band_grid(&r, map.get("grid"), constrained.len())?;
            let settings = BandSettings {
                constrained,
                free,
                grid,
                constrained_sigma2: r.or_default(
                    map,
                    "bands",
                    "constrained_sigma2",
                    DEFAULT_CONSTRAINED_SIGMA2,
                )?,
                level: r.or_default(map, "bands", "level", DEFAULT_BAND_LEVEL)?,
                free_offset: r.or_default(map, "bands", "free_offset", DEFAULT_FREE_OFFSET)?,
            };
            if !(settings.level > 0.0 && settings.level < 1.0) {
                return Err(r.err("`bands.level` must lie in (0, 1)"));
            }
            if !(settings.constrained_sigma2 > 0.0) {
                return Err(r.err("`bands.constrained_sigma2` must be > 0"));
            }
            Some(settings)
        }
    };

    let out: PathBuf = match r.optional::<PathBuf>(top, "", "out")? {
        Some(p) => resolve(p),
        None => {
            let p = base_dir.join("out");
            r.defaults.push(format!("out = {:?}", p.display().to_string()));
            p
        }
    };

    Ok(RunConfig {
        source: path.to_path_buf(),
        command,
        model,
        outputs,
        response,
        emulator,
        target,
        standoff,
        noise,
        preliminary_sigma2,
        grid_points,
        theta_bounds,
        chains,
        predictive,
        reference_runs,
        bands,
        out,
        seed,
        defaults_applied: r.defaults,
    })
}

fn parse_band_grid(r: &Reader, value: Option<&Value>, constrained: usize) -> Result<Vec<Vec<f64>>> {
    let value = value.ok_or_else(|| r.err("`bands.grid` is required"))?;
    if value.is_object() {
        let map = r.object(value, "bands.grid", &["from", "to", "points"])?;
        if constrained != 1 {
            return Err(r.err("a from/to `bands.grid` needs exactly one constrained output"));
        }
        let get = |k: &str| -> Result<Value> {
            map.get(k)
                .cloned()
                .ok_or_else(|| r.err(format!("`bands.grid.{k}` is required")))
        };
        let from: f64 = r.typed(&get("from")?, "bands.grid.from")?;
        let to: f64 = r.typed(&get("to")?, "bands.grid.to")?;
        let points: usize = r.typed(&get("points")?, "bands.grid.points")?;
        return match points {
            0 => Err(r.err("`bands.grid.points` must be at least 1")),
            1 => Ok(vec![vec![from]]),
            n => Ok((0..n)
                .map(|k| vec![from + (to - from) * k as f64 / (n - 1) as f64])
                .collect()),
        };
    }
    let grid: Vec<Vec<f64>> = match value {
        Value::Array(items) if items.iter().all(Value::is_number) => {
            let flat: Vec<f64> = r.typed(value, "bands.grid")?;
            flat.into_iter().map(|v| vec![v]).collect()
        }
        _ => r.typed(value, "bands.grid")?,
    };
    if grid.is_empty() {
        return Err(r.err("`bands.grid` is empty"));
    }
    if grid.iter().any(|g| g.len() != constrained) {
        return Err(r.err(format!(
            "every `bands.grid` point needs {constrained} value(s), one per constrained output"
        )));
    }
    Ok(grid)
}

impl RunConfig {
    /// Fixes the command to run, applying command-line overrides, and checks
    /// the fields that command needs.
    pub fn for_command(mut self, command: Command, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        let path = self.source.display().to_string();
        if let Some(c) = self.command {
            if c != command {
                return Err(CtoError::config(
                    path,
                    format!("file declares command \"{}\" but \"{}\" was requested", c.name(), command.name()),
                ));
            }
        }
        self.command = Some(command);
        if let Some(s) = seed {
            self.seed = s;
            self.chains.master_seed = s;
        }
        if let Some(o) = out {
            self.out = o;
        }
        if command == Command::Bands && self.bands.is_none() {
            return Err(CtoError::config(path, "the bands command needs a `bands` section"));
        }
        if self.target.is_none() {
            let t = match command {
                Command::Cto => TargetChoice::Ray,
                _ => TargetChoice::Utopia,
            };
            self.defaults_applied.push(format!("target = {t:?}"));
            self.target = Some(t);
        }
        if self.noise.is_none() {
            let n = match command {
                Command::Prelim => NoiseChoice::Preliminary,
                _ => NoiseChoice::Sampled,
            };
            self.defaults_applied.push(format!("noise = {n:?}"));
            self.noise = Some(n);
        }
        Ok(self)
    }

    pub fn command(&self) -> Command {
        self.command.unwrap_or(Command::Cto)
    }

    pub fn target(&self) -> &TargetChoice {
        self.target.as_ref().unwrap_or(&TargetChoice::Utopia)
    }

    pub fn noise(&self) -> &NoiseChoice {
        self.noise.as_ref().unwrap_or(&NoiseChoice::Sampled)
    }
}
