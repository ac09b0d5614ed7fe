//! Evaluable response functions and tabulated simulator runs.

use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design_space::{DesignSpace, OutputTransform, SimulationDataset, VariableSpec};
use crate::error::{CtoError, Result};

/// Maps a native-unit input vector (controls then designs) to native outputs.
pub type Evaluator = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub struct ComputerModel {
    name: String,
    space: DesignSpace,
    output_names: Vec<String>,
    evaluator: Evaluator,
}

impl fmt::Debug for ComputerModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ComputerModel")
            .field("name", &self.name)
            .field("space", &self.space)
            .field("output_names", &self.output_names)
            .finish_non_exhaustive()
    }
}

impl ComputerModel {
    pub fn new(
        name: impl Into<String>,
        space: DesignSpace,
        output_names: Vec<String>,
        evaluator: Evaluator,
    ) -> Self {
        Self {
            name: name.into(),
            space,
            output_names,
            evaluator,
        }
    }

    /// The two-design-variable, three-output test problem with one control
    /// input `x` in `[1.95, 2.05]`.
    pub fn simulated_example() -> Self {
        let space = DesignSpace::new(vec![
            VariableSpec::control("x", 1.95, 2.05),
            VariableSpec::design("theta1", 0.0, 3.0),
            VariableSpec::design("theta2", 0.0, 6.0),
        ])
        .expect("static space is valid");
        Self::new(
            "simulated_example",
            space,
            vec!["y1".into(), "y2".into(), "y3".into()],
            Arc::new(|v: &[f64]| simulated_example(v[0], v[1], v[2]).to_vec()),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn space(&self) -> &DesignSpace {
        &self.space
    }

    pub fn output_names(&self) -> &[String] {
        &self.output_names
    }

    pub fn m(&self) -> usize {
        self.output_names.len()
    }

    pub fn evaluate(&self, native: &[f64]) -> Result<Vec<f64>> {
        if native.len() != self.space.dim() {
            return Err(CtoError::shape("model input", self.space.dim(), native.len()));
        }
        let out = (self.evaluator)(native);
        if out.len() != self.m() {
            return Err(CtoError::shape("model output", self.m(), out.len()));
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(CtoError::Evaluation {
                point: native.to_vec(),
            });
        }
        Ok(out)
    }

    pub fn evaluate_unit(&self, unit: &[f64]) -> Result<Vec<f64>> {
        self.evaluate(&self.space.unscale(unit)?)
    }

    /// A model exposing only the listed outputs, in the given order.
    pub fn select_outputs(&self, outputs: &[usize]) -> Result<Self> {
        if outputs.is_empty() {
            return Err(CtoError::Argument("output selection is empty".into()));
        }
        if let Some(&j) = outputs.iter().find(|&&j| j >= self.m()) {
            return Err(CtoError::shape("output index", self.m(), j));
        }
        let inner = self.evaluator.clone();
        let keep = outputs.to_vec();
        Ok(Self {
            name: format!("{}[{}]", self.name, join(outputs)),
            space: self.space.clone(),
            output_names: outputs.iter().map(|&j| self.output_names[j].clone()).collect(),
            evaluator: Arc::new(move |v: &[f64]| {
                let all = inner(v);
                keep.iter().map(|&j| all[j]).collect()
            }),
        })
    }
}

fn join(idx: &[usize]) -> String {
    idx.iter().map(|j| j.to_string()).collect::<Vec<_>>().join(",")
}

/// Outputs `(y1, y2, y3)` of the closed-form test problem.
///
/// `theta2.powf(x - 1)` needs no special case at `theta2 = 0` because the
/// exponent stays in `[0.95, 1.05]` over the control range.
pub fn simulated_example(x: f64, theta1: f64, theta2: f64) -> [f64; 3] {
    let y1 = 1.0 / (theta1 * (-(theta1 + (theta2 - PI * x / 2.0).abs())).exp() + 1.0);
    let y2 = 1.0 / (theta2.powf(x - 1.0) * (-0.75 * theta2).exp() + 1.0);
    let y3 = 15.0 + 2.0 * theta1 + theta2 * theta2 / 4.0;
    [y1, y2, y3]
}

/// Whether `(x, theta1, theta2)` lies in the declared input ranges.
pub fn simulated_example_in_range(x: f64, theta1: f64, theta2: f64) -> bool {
    (1.95..=2.05).contains(&x) && (0.0..=3.0).contains(&theta1) && (0.0..=6.0).contains(&theta2)
}

/// Evaluates `model` on a unit-scale design (one point per row).
pub fn sample_model(model: &ComputerModel, design: &DMatrix<f64>) -> Result<SimulationDataset> {
    let space = model.space();
    if design.ncols() != space.dim() {
        return Err(CtoError::shape("design columns", space.dim(), design.ncols()));
    }
    let mut raw = DMatrix::zeros(design.nrows(), model.m());
    for (i, row) in design.row_iter().enumerate() {
        let unit: Vec<f64> = row.iter().copied().collect();
        if let Some(v) = unit.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CtoError::Argument(format!(
                "design row {i} has coordinate {v} outside [0, 1]"
            )));
        }
        let out = model.evaluate_unit(&unit)?;
        for (j, v) in out.into_iter().enumerate() {
            raw[(i, j)] = v;
        }
    }
    SimulationDataset::new(
        space.clone(),
        design.clone(),
        raw,
        model.output_names().to_vec(),
    )
}

/// JSON sidecar written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub variables: Vec<VariableSpec>,
    pub output_names: Vec<String>,
    pub rows: usize,
    pub transform: OutputTransform,
}

fn ingestion(path: &Path, row: usize, column: &str, message: impl Into<String>) -> CtoError {
    CtoError::Ingestion {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Reads simulator runs from a CSV whose header names every input variable
/// of `space`; all remaining columns are outputs. Rows are numbered from 1
/// (the first data row).
pub fn load_tabulated_sim(path: &Path, space: &DesignSpace) -> Result<SimulationDataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();

    let mut input_cols = Vec::with_capacity(space.dim());
    for v in space.variables() {
        match header.iter().position(|h| h == &v.name) {
            Some(c) => input_cols.push(c),
            None => return Err(ingestion(path, 0, &v.name, "missing input column")),
        }
    }
    let output_cols: Vec<usize> = (0..header.len()).filter(|c| !input_cols.contains(c)).collect();
    if output_cols.is_empty() {
        return Err(ingestion(path, 0, "", "no output columns"));
    }

    let mut unit_rows: Vec<Vec<f64>> = Vec::new();
    let mut out_rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record?;
        if record.len() != header.len() {
            return Err(ingestion(
                path,
                row,
                "",
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let cell = |c: usize| -> Result<f64> {
            let text = &record[c];
            let v: f64 = text
                .parse()
                .map_err(|_| ingestion(path, row, &header[c], format!("`{text}` is not a number")))?;
            if !v.is_finite() {
                return Err(ingestion(path, row, &header[c], format!("non-finite value `{text}`")));
            }
            Ok(v)
        };
        let native = input_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?;
        let unit = space.scale_to_unit(&native).map_err(|e| match e {
            CtoError::Range {
                variable,
                value,
                lower,
                upper,
            } => ingestion(
                path,
                row,
                &variable,
                format!("{value} outside [{lower}, {upper}]"),
            ),
            other => other,
        })?;
        unit_rows.push(unit);
        out_rows.push(output_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?);
    }
    if unit_rows.len() < 2 {
        return Err(CtoError::InsufficientData(format!(
            "{} has {} data rows; at least 2 are needed",
            path.display(),
            unit_rows.len()
        )));
    }
    let n = unit_rows.len();
    let inputs = DMatrix::from_fn(n, space.dim(), |i, j| unit_rows[i][j]);
    let raw = DMatrix::from_fn(n, output_cols.len(), |i, j| out_rows[i][j]);
    let names = output_cols.iter().map(|&c| header[c].clone()).collect();
    SimulationDataset::new(space.clone(), inputs, raw, names).map_err(|e| match e {
        CtoError::DegenerateOutput { column } => ingestion(path, 0, &column, "constant output column"),
        other => other,
    })
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let mut os = csv_path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Writes native inputs and raw outputs in the ingestion schema, plus the
/// JSON sidecar. Floats use the shortest round-trip representation.
pub fn write_tabulated_sim(dataset: &SimulationDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = dataset
        .space()
        .variables()
        .iter()
        .map(|v| v.name.clone())
        .collect();
    header.extend(dataset.output_names().iter().cloned());
    w.write_record(&header)?;
    for i in 0..dataset.n() {
        let mut rec: Vec<String> = dataset.native_input(i).iter().map(|v| v.to_string()).collect();
        rec.extend(dataset.raw_outputs().row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let sidecar = DatasetSidecar {
        variables: dataset.space().variables().to_vec(),
        output_names: dataset.output_names().to_vec(),
        rows: dataset.n(),
        transform: dataset.transform().clone(),
    };
    let mut f = File::create(sidecar_path(path))?;
    serde_json::to_writer_pretty(&mut f, &sidecar)?;
    writeln!(f)?;
    Ok(())
}

/// Loads a dataset written by [`write_tabulated_sim`], taking the variable
/// ranges from its sidecar.
pub fn load_dataset(path: &Path) -> Result<SimulationDataset> {
    let sidecar: DatasetSidecar = serde_json::from_reader(File::open(sidecar_path(path))?)?;
    let space = DesignSpace::new(sidecar.variables)?;
    let ds = load_tabulated_sim(path, &space)?;
    if ds.n() != sidecar.rows {
        return Err(ingestion(
            path,
            ds.n(),
            "",
            format!("sidecar declares {} rows", sidecar.rows),
        ));
    }
    Ok(ds)
}
