//! Dataset containers, parameter boxes, and the fidelity hierarchy check.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A design set: N input rows of dimension m, a scalar output per row, and
/// optionally the output gradient at each input.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    outputs: DVector<f64>,
    gradients: Option<DMatrix<f64>>,
}

impl Dataset {
    pub fn new(
        inputs: DMatrix<f64>,
        outputs: DVector<f64>,
        gradients: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        if inputs.nrows() == 0 || inputs.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "dataset needs at least one sample and one input coordinate".into(),
            ));
        }
        if inputs.nrows() != outputs.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} input rows vs {} outputs",
                inputs.nrows(),
                outputs.len()
            )));
        }
        if let Some(g) = &gradients {
            if g.shape() != inputs.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "gradient shape {:?} vs input shape {:?}",
                    g.shape(),
                    inputs.shape()
                )));
            }
        }
        let finite = inputs.iter().all(|v| v.is_finite())
            && outputs.iter().all(|v| v.is_finite())
            && gradients
                .as_ref()
                .map_or(true, |g| g.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::InvalidArgument(
                "dataset entries must all be finite".into(),
            ));
        }
        Ok(Dataset {
            inputs,
            outputs,
            gradients,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DVector<f64> {
        &self.outputs
    }

    pub fn gradients(&self) -> Option<&DMatrix<f64>> {
        self.gradients.as_ref()
    }

    /// Componentwise data hull; usable as a fallback box when none is given.
    pub fn hull(&self) -> Result<Bounds> {
        let m = self.dim();
        let mut lower = vec![f64::INFINITY; m];
        let mut upper = vec![f64::NEG_INFINITY; m];
        for i in 0..self.n_samples() {
            for j in 0..m {
                lower[j] = lower[j].min(self.inputs[(i, j)]);
                upper[j] = upper[j].max(self.inputs[(i, j)]);
            }
        }
        for j in 0..m {
            if lower[j] >= upper[j] {
                // Degenerate coordinate: widen symmetrically so the box stays valid.
                let pad = 0.5 * lower[j].abs().max(1.0);
                lower[j] -= pad;
                upper[j] += pad;
            }
        }
        Bounds::new(lower, upper)
    }

    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let (inputs, outputs, gradients) = read_rows(path.as_ref(), true)?;
        let outputs = outputs.ok_or_else(|| {
            Error::CsvFormat("dataset file has no y column (inputs-only file?)".into())
        })?;
        Dataset::new(inputs, outputs, gradients)
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())
            .map_err(|e| Error::CsvFormat(e.to_string()))?;
        let m = self.dim();
        let mut header: Vec<String> = (1..=m).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        if self.gradients.is_some() {
            header.extend((1..=m).map(|j| format!("g{j}")));
        }
        w.write_record(&header)
            .map_err(|e| Error::CsvFormat(e.to_string()))?;
        for i in 0..self.n_samples() {
            let mut rec: Vec<String> = (0..m).map(|j| format!("{}", self.inputs[(i, j)])).collect();
            rec.push(format!("{}", self.outputs[i]));
            if let Some(g) = &self.gradients {
                rec.extend((0..m).map(|j| format!("{}", g[(i, j)])));
            }
            w.write_record(&rec)
                .map_err(|e| Error::CsvFormat(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Read an inputs-only CSV (header `x1,...,xm`), as produced by `mfgp sample`.
pub fn read_inputs_csv<P: AsRef<Path>>(path: P) -> Result<DMatrix<f64>> {
    let (inputs, outputs, _) = read_rows(path.as_ref(), false)?;
    if outputs.is_some() {
        // A full dataset is also acceptable where only inputs are needed.
    }
    Ok(inputs)
}

/// Write an inputs-only CSV (header `x1,...,xm`).
pub fn write_inputs_csv<P: AsRef<Path>>(path: P, inputs: &DMatrix<f64>) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path.as_ref()).map_err(|e| Error::CsvFormat(e.to_string()))?;
    let m = inputs.ncols();
    let header: Vec<String> = (1..=m).map(|j| format!("x{j}")).collect();
    w.write_record(&header)
        .map_err(|e| Error::CsvFormat(e.to_string()))?;
    for i in 0..inputs.nrows() {
        let rec: Vec<String> = (0..m).map(|j| format!("{}", inputs[(i, j)])).collect();
        w.write_record(&rec)
            .map_err(|e| Error::CsvFormat(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Parse the shared CSV layout `x1,...,xm[,y[,g1,...,gm]]`.
fn read_rows(
    path: &Path,
    _require_y: bool,
) -> Result<(DMatrix<f64>, Option<DVector<f64>>, Option<DMatrix<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::CsvFormat(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::CsvFormat(e.to_string()))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    let m = cols.iter().take_while(|c| c.starts_with('x')).count();
    if m == 0 {
        return Err(Error::CsvFormat(
            "header must start with input columns x1,...,xm".into(),
        ));
    }
    for (j, c) in cols.iter().take(m).enumerate() {
        if **c != format!("x{}", j + 1) {
            return Err(Error::CsvFormat(format!(
                "input column {} named {c:?}, expected x{}",
                j + 1,
                j + 1
            )));
        }
    }
    let has_y = cols.len() > m && cols[m] == "y";
    let has_g = cols.len() > m + 1;
    if has_g {
        if !has_y || cols.len() != 2 * m + 1 {
            return Err(Error::CsvFormat(format!(
                "expected header x1..x{m},y,g1..g{m}; got {} columns",
                cols.len()
            )));
        }
        for (j, c) in cols.iter().skip(m + 1).enumerate() {
            if **c != format!("g{}", j + 1) {
                return Err(Error::CsvFormat(format!(
                    "gradient column {} named {c:?}, expected g{}",
                    j + 1,
                    j + 1
                )));
            }
        }
    } else if cols.len() != m + usize::from(has_y) {
        return Err(Error::CsvFormat(format!(
            "unexpected column {:?} after inputs",
            cols[m]
        )));
    }

    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut gs: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::CsvFormat(format!("row {}: {e}", i + 2)))?;
        if rec.len() != cols.len() {
            return Err(Error::CsvFormat(format!(
                "row {}: {} fields, header has {}",
                i + 2,
                rec.len(),
                cols.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|_| Error::CsvFormat(format!("row {}: bad number {s:?}", i + 2)))?;
            if !v.is_finite() {
                return Err(Error::CsvFormat(format!(
                    "row {}: non-finite value {s:?}",
                    i + 2
                )));
            }
            Ok(v)
        };
        for j in 0..m {
            xs.push(parse(&rec[j])?);
        }
        if has_y {
            ys.push(parse(&rec[m])?);
        }
        if has_g {
            for j in 0..m {
                gs.push(parse(&rec[m + 1 + j])?);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::CsvFormat("file contains no data rows".into()));
    }
    let inputs = DMatrix::from_row_slice(n, m, &xs);
    let outputs = has_y.then(|| DVector::from_vec(ys));
    let gradients = has_g.then(|| DMatrix::from_row_slice(n, m, &gs));
    Ok((inputs, outputs, gradients))
}

/// Closed axis-aligned parameter box with strictly ordered bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::DimensionMismatch(format!(
                "bounds of length {} vs {}",
                lower.len(),
                upper.len()
            )));
        }
        for j in 0..lower.len() {
            if !(lower[j].is_finite() && upper[j].is_finite() && lower[j] < upper[j]) {
                return Err(Error::InvalidArgument(format!(
                    "bounds for coordinate {} must satisfy lower < upper, got [{}, {}]",
                    j + 1,
                    lower[j],
                    upper[j]
                )));
            }
        }
        Ok(Bounds { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(&self.lower)
                .zip(&self.upper)
                .all(|((v, lo), hi)| *v >= *lo && *v <= *hi)
    }

    /// Map a point from the unit cube into this box.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .map(|((t, lo), hi)| lo + t * (hi - lo))
            .collect()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }
}

/// A hierarchical pair of fidelities: every high-fidelity input row must
/// appear exactly among the low-fidelity input rows.
#[derive(Debug, Clone)]
pub struct FidelityPair {
    pub low: Dataset,
    pub high: Dataset,
}

impl FidelityPair {
    pub fn new(low: Dataset, high: Dataset) -> Result<Self> {
        hierarchy_indices(low.inputs(), high.inputs(), 2)?;
        Ok(FidelityPair { low, high })
    }
}

/// Key on exact stored values; -0.0 folds onto +0.0 so the check follows
/// floating-point equality, not bit patterns.
fn row_key(m: &DMatrix<f64>, i: usize) -> Vec<u64> {
    (0..m.ncols())
        .map(|j| {
            let v = m[(i, j)];
            (if v == 0.0 { 0.0f64 } else { v }).to_bits()
        })
        .collect()
}

/// For each row of `high`, the index of its exact match in `low`.
/// `level` only labels the error for multi-level chains.
pub fn hierarchy_indices(
    low: &DMatrix<f64>,
    high: &DMatrix<f64>,
    level: usize,
) -> Result<Vec<usize>> {
    if low.ncols() != high.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "fidelity levels have input dimensions {} and {}",
            low.ncols(),
            high.ncols()
        )));
    }
    let mut index: HashMap<Vec<u64>, usize> = HashMap::with_capacity(low.nrows());
    for i in 0..low.nrows() {
        index.entry(row_key(low, i)).or_insert(i);
    }
    let mut out = Vec::with_capacity(high.nrows());
    for i in 0..high.nrows() {
        match index.get(&row_key(high, i)) {
            Some(&j) => out.push(j),
            None => return Err(Error::HierarchyViolation { level, row: i }),
        }
    }
    Ok(out)
}

/// True iff every high-fidelity input row appears among the low-fidelity rows.
pub fn validate_hierarchy(low: &Dataset, high: &Dataset) -> Result<bool> {
    if low.dim() != high.dim() {
        return Err(Error::DimensionMismatch(format!(
            "fidelity levels have input dimensions {} and {}",
            low.dim(),
            high.dim()
        )));
    }
    Ok(hierarchy_indices(low.inputs(), high.inputs(), 2).is_ok())
}
