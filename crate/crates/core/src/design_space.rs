//! Variable ranges, unit-hypercube scaling, output standardization and
//! Latin hypercube designs.
//!
//! Everything downstream of ingestion works on unit-scaled inputs and
//! standardized outputs. Native units only appear at the file and report
//! boundaries.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CtoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Control,
    Design,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub kind: VariableKind,
}

impl VariableSpec {
    pub fn control(name: impl Into<String>, lower: f64, upper: f64) -> Self {
        Self {
            name: name.into(),
            lower,
            upper,
            kind: VariableKind::Control,
        }
    }

    pub fn design(name: impl Into<String>, lower: f64, upper: f64) -> Self {
        Self {
            name: name.into(),
            lower,
            upper,
            kind: VariableKind::Design,
        }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Ordered input variables: all control inputs first, then design inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<VariableSpec>", into = "Vec<VariableSpec>")]
pub struct DesignSpace {
    variables: Vec<VariableSpec>,
    p: usize,
}

impl TryFrom<Vec<VariableSpec>> for DesignSpace {
    type Error = CtoError;

    fn try_from(variables: Vec<VariableSpec>) -> Result<Self> {
        DesignSpace::new(variables)
    }
}

impl From<DesignSpace> for Vec<VariableSpec> {
    fn from(space: DesignSpace) -> Self {
        space.variables
    }
}

impl DesignSpace {
    pub fn new(variables: Vec<VariableSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for v in &variables {
            if v.name.trim().is_empty() {
                return Err(CtoError::Argument("variable name must be nonempty".into()));
            }
            if !seen.insert(v.name.as_str()) {
                return Err(CtoError::Argument(format!(
                    "duplicate variable name `{}`",
                    v.name
                )));
            }
            if !(v.lower.is_finite() && v.upper.is_finite() && v.lower < v.upper) {
                return Err(CtoError::Argument(format!(
                    "variable `{}` needs finite lower < upper, got [{}, {}]",
                    v.name, v.lower, v.upper
                )));
            }
        }
        let p = variables
            .iter()
            .take_while(|v| v.kind == VariableKind::Control)
            .count();
        if variables[p..].iter().any(|v| v.kind == VariableKind::Control) {
            return Err(CtoError::Argument(
                "control variables must precede design variables".into(),
            ));
        }
        if variables.len() == p {
            return Err(CtoError::Argument(
                "at least one design variable is required".into(),
            ));
        }
        Ok(Self { variables, p })
    }

    pub fn variables(&self) -> &[VariableSpec] {
        &self.variables
    }

    /// Number of control inputs.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of design inputs.
    pub fn q(&self) -> usize {
        self.variables.len() - self.p
    }

    pub fn dim(&self) -> usize {
        self.variables.len()
    }

    pub fn control_variables(&self) -> &[VariableSpec] {
        &self.variables[..self.p]
    }

    pub fn design_variables(&self) -> &[VariableSpec] {
        &self.variables[self.p..]
    }

    pub fn scale_to_unit(&self, point: &[f64]) -> Result<Vec<f64>> {
        if point.len() != self.dim() {
            return Err(CtoError::shape("input point", self.dim(), point.len()));
        }
        self.variables
            .iter()
            .zip(point)
            .map(|(v, &value)| {
                if !(value >= v.lower && value <= v.upper) {
                    return Err(CtoError::Range {
                        variable: v.name.clone(),
                        value,
                        lower: v.lower,
                        upper: v.upper,
                    });
                }
                Ok((value - v.lower) / v.width())
            })
            .collect()
    }

    pub fn unscale(&self, unit: &[f64]) -> Result<Vec<f64>> {
        if unit.len() != self.dim() {
            return Err(CtoError::shape("unit point", self.dim(), unit.len()));
        }
        Ok(self
            .variables
            .iter()
            .zip(unit)
            .map(|(v, &u)| v.lower + u * v.width())
            .collect())
    }

    /// Maps unit-scale design coordinates (no control part) to native units.
    pub fn unscale_design(&self, theta: &[f64]) -> Vec<f64> {
        self.design_variables()
            .iter()
            .zip(theta)
            .map(|(v, &u)| v.lower + u * v.width())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputTransform {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl OutputTransform {
    pub fn identity(m: usize) -> Self {
        Self {
            means: vec![0.0; m],
            sds: vec![1.0; m],
        }
    }

    pub fn outputs(&self) -> usize {
        self.means.len()
    }

    pub fn standardize(&self, j: usize, value: f64) -> f64 {
        (value - self.means[j]) / self.sds[j]
    }

    pub fn destandardize(&self, j: usize, value: f64) -> f64 {
        value * self.sds[j] + self.means[j]
    }

    pub fn standardize_vec(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(j, &v)| self.standardize(j, v))
            .collect()
    }

    pub fn destandardize_vec(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(j, &v)| self.destandardize(j, v))
            .collect()
    }

    /// Keeps only the listed outputs, in the given order.
    pub fn select(&self, outputs: &[usize]) -> Self {
        Self {
            means: outputs.iter().map(|&j| self.means[j]).collect(),
            sds: outputs.iter().map(|&j| self.sds[j]).collect(),
        }
    }
}

/// Standardizes each column with its mean and sample (n - 1) standard deviation.
pub fn standardize_outputs(raw: &DMatrix<f64>) -> Result<(DMatrix<f64>, OutputTransform)> {
    let names: Vec<String> = (0..raw.ncols()).map(|j| format!("y{}", j + 1)).collect();
    standardize_named(raw, &names)
}

pub(crate) fn standardize_named(
    raw: &DMatrix<f64>,
    names: &[String],
) -> Result<(DMatrix<f64>, OutputTransform)> {
    let n = raw.nrows();
    if n < 2 {
        return Err(CtoError::InsufficientData(format!(
            "standardization needs at least 2 rows, got {n}"
        )));
    }
    let mut means = Vec::with_capacity(raw.ncols());
    let mut sds = Vec::with_capacity(raw.ncols());
    for (j, col) in raw.column_iter().enumerate() {
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        if !(sd > 0.0) || sd <= 1e-14 * mean.abs() {
            return Err(CtoError::DegenerateOutput {
                column: names[j].clone(),
            });
        }
        means.push(mean);
        sds.push(sd);
    }
    let transform = OutputTransform { means, sds };
    let standardized =
        DMatrix::from_fn(n, raw.ncols(), |i, j| transform.standardize(j, raw[(i, j)]));
    Ok((standardized, transform))
}

/// Random Latin hypercube on `[0, 1)^d`: each column places exactly one
/// point in every stratum `[k/n, (k+1)/n)`, uniformly within the stratum.
pub fn latin_hypercube(n: usize, d: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 || d == 0 {
        return Err(CtoError::Argument(format!(
            "latin hypercube needs n >= 1 and d >= 1, got n={n}, d={d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut design = DMatrix::zeros(n, d);
    let mut strata: Vec<usize> = (0..n).collect();
    for j in 0..d {
        strata.shuffle(&mut rng);
        for (i, &k) in strata.iter().enumerate() {
            let u: f64 = rng.random();
            let mut value = (k as f64 + u) / n as f64;
            // rounding can push the top of a stratum into the next one
            if (value * n as f64).floor() as usize != k {
                value = (k as f64 + 0.5) / n as f64;
            }
            design[(i, j)] = value;
        }
    }
    Ok(design)
}

/// Simulator runs on the internal scales: unit inputs, standardized outputs.
#[derive(Debug, Clone)]
pub struct SimulationDataset {
    space: DesignSpace,
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
    raw_outputs: DMatrix<f64>,
    output_names: Vec<String>,
    transform: OutputTransform,
}

impl SimulationDataset {
    /// Builds a dataset from unit-scaled inputs and native-unit outputs.
    pub fn new(
        space: DesignSpace,
        inputs: DMatrix<f64>,
        raw_outputs: DMatrix<f64>,
        output_names: Vec<String>,
    ) -> Result<Self> {
        if inputs.ncols() != space.dim() {
            return Err(CtoError::shape("dataset input columns", space.dim(), inputs.ncols()));
        }
        if raw_outputs.nrows() != inputs.nrows() {
            return Err(CtoError::shape("dataset output rows", inputs.nrows(), raw_outputs.nrows()));
        }
        if output_names.len() != raw_outputs.ncols() {
            return Err(CtoError::shape("output names", raw_outputs.ncols(), output_names.len()));
        }
        if output_names.is_empty() {
            return Err(CtoError::Argument("dataset needs at least one output".into()));
        }
        if let Some(v) = inputs.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(CtoError::Argument(format!("unit input {v} outside [0, 1]")));
        }
        if raw_outputs.iter().any(|v| !v.is_finite()) {
            return Err(CtoError::Argument("non-finite output value".into()));
        }
        let (outputs, transform) = standardize_named(&raw_outputs, &output_names)?;
        Ok(Self {
            space,
            inputs,
            outputs,
            raw_outputs,
            output_names,
            transform,
        })
    }

    pub fn space(&self) -> &DesignSpace {
        &self.space
    }

    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn m(&self) -> usize {
        self.outputs.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn raw_outputs(&self) -> &DMatrix<f64> {
        &self.raw_outputs
    }

    pub fn output_names(&self) -> &[String] {
        &self.output_names
    }

    pub fn transform(&self) -> &OutputTransform {
        &self.transform
    }

    /// Native-unit inputs of row `i`.
    pub fn native_input(&self, i: usize) -> Vec<f64> {
        let unit: Vec<f64> = self.inputs.row(i).iter().copied().collect();
        self.space.unscale(&unit).expect("dataset rows match the space")
    }
}
