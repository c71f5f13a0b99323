//! Study orchestration and reporting: R^2 sweeps over sample counts with
//! outer training restarts, leave-one-out / leave-two-out cross-validation
//! on a shared test set, correlation tables, and the named CSV files the
//! batch CLI emits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::benchmarks::Benchmark;
use crate::data::{Bounds, Dataset};
use crate::error::{Error, Result};
use crate::gp::{fit, FitConfig, KernelFamily};
use crate::nargp;
use crate::pipeline::{build_lowfidelity, PipelineConfig};
use crate::reducer::ReducedSurface;
use crate::sampling::design;
use crate::sampling::DesignKind;
use crate::seed::{child_seed, stream};

/// Coefficient of determination, 1 - SS_res / SS_tot.
pub fn r2_score(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch(format!(
            "reference length {} vs prediction length {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.len() < 2 {
        return Err(Error::InvalidArgument(
            "R^2 needs at least two points".into(),
        ));
    }
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::InvalidArgument(
            "R^2 undefined for a constant reference".into(),
        ));
    }
    let ss_res: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(y, p)| (y - p).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Pearson correlation coefficient of two aligned samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(
            "correlation needs at least two points".into(),
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::InvalidArgument(
            "correlation undefined for a constant sample".into(),
        ));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Scatter-plot payload: (reference, prediction) pairs plus their Pearson
/// coefficient.
#[derive(Debug, Clone)]
pub struct CorrelationTable {
    pub pairs: Vec<(f64, f64)>,
    pub pearson: f64,
}

pub fn correlation_data(reference: &[f64], prediction: &[f64]) -> Result<CorrelationTable> {
    let r = pearson(reference, prediction)?;
    Ok(CorrelationTable {
        pairs: reference.iter().copied().zip(prediction.iter().copied()).collect(),
        pearson: r,
    })
}

/// Which sample count the study grid varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    #[default]
    NHf,
    NLfExtra,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::NHf => "n_hf",
            SweepVariable::NLfExtra => "n_lf_extra",
        }
    }
}

/// Where the study's training data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StudySource {
    /// Closed-form objective; high-fidelity designs are drawn fresh per
    /// restart by Latin hypercube inside the benchmark box.
    Benchmark { benchmark: Benchmark },
    /// CSV-backed datasets. `low` is ordered lowest fidelity first; each
    /// level's inputs must contain the rows of every higher level. With no
    /// `low` entries the synthetic pipeline supplies the bottom level.
    Csv {
        high: PathBuf,
        #[serde(default)]
        low: Vec<PathBuf>,
    },
}

/// Shared test set: a sampled design evaluated on the benchmark, or an
/// explicit CSV (mandatory for CSV-backed sources).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TestSpec {
    pub sampler: DesignKind,
    pub size: usize,
    pub csv: Option<PathBuf>,
}

impl Default for TestSpec {
    fn default() -> Self {
        TestSpec {
            sampler: DesignKind::Lhs,
            size: 1000,
            csv: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CvMode {
    #[default]
    None,
    LeaveOneOut,
    LeaveTwoOut,
}

impl CvMode {
    pub fn k_out(self) -> Option<usize> {
        match self {
            CvMode::None => None,
            CvMode::LeaveOneOut => Some(1),
            CvMode::LeaveTwoOut => Some(2),
        }
    }
}

/// Full description of a sweep study. The pipeline seed doubles as the
/// study's base seed: outer restart `i` runs with `seed + i`, and the test
/// design is drawn once from a dedicated stream of the base seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub source: StudySource,
    #[serde(default)]
    pub sweep: SweepVariable,
    pub grid: Vec<usize>,
    /// Fixed high-fidelity count when sweeping `n_lf_extra`.
    #[serde(default)]
    pub n_hf: usize,
    /// Fixed total low-fidelity size when sweeping `n_hf`: each cell gets
    /// `lf_total - n_hf` extra points. Absent, `pipeline.n_lf_extra` applies
    /// unchanged at every grid point.
    #[serde(default)]
    pub lf_total: Option<usize>,
    #[serde(default = "default_outer_restarts")]
    pub outer_restarts: usize,
    #[serde(default)]
    pub test: TestSpec,
    #[serde(default)]
    pub cv: CvMode,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_outer_restarts() -> usize {
    10
}

/// Per-model scores across the outer restarts of one grid cell.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ModelScores {
    /// R^2 per restart on the shared test set; null where training failed.
    pub r2: Vec<Option<f64>>,
    /// Restart index -> error description for failed trainings.
    pub failures: BTreeMap<usize, String>,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl ModelScores {
    fn record(&mut self, restart: usize, outcome: Result<f64>) {
        match outcome {
            Ok(v) => self.r2.push(Some(v)),
            Err(e) => {
                self.r2.push(None);
                self.failures.insert(restart, e.to_string());
            }
        }
    }

    fn finalize(&mut self) {
        let ok: Vec<f64> = self.r2.iter().flatten().copied().collect();
        if ok.is_empty() {
            return;
        }
        self.mean = Some(ok.iter().sum::<f64>() / ok.len() as f64);
        self.min = ok.iter().copied().reduce(f64::min);
        self.max = ok.iter().copied().reduce(f64::max);
    }
}

/// One cross-validation batch extreme: the points removed from the test set,
/// the model's score there, and the other models' scores on the same batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvExtreme {
    pub removed: Vec<usize>,
    pub r2: f64,
    pub cross: BTreeMap<String, f64>,
}

/// Batch statistics over all leave-k-out subsets of the test set. The 95%
/// bounds use the normal approximation mean +/- 1.96 std / sqrt(batches).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvStats {
    pub batches: usize,
    pub mean: f64,
    pub std: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub min: f64,
    pub max: f64,
    pub lowest: CvExtreme,
    pub highest: CvExtreme,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub n_hf: usize,
    pub n_lf_extra: usize,
    pub mf: ModelScores,
    pub hf: ModelScores,
    pub lf: ModelScores,
    /// Cross-validation of the first restart's predictions, when requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cv: Option<BTreeMap<String, CvStats>>,
}

impl CellResult {
    fn new(n_hf: usize, n_lf_extra: usize) -> Self {
        CellResult {
            n_hf,
            n_lf_extra,
            mf: ModelScores::default(),
            hf: ModelScores::default(),
            lf: ModelScores::default(),
            cv: None,
        }
    }

    pub fn models(&self) -> [(&'static str, &ModelScores); 3] {
        [("mf", &self.mf), ("hf", &self.hf), ("lf", &self.lf)]
    }
}

#[derive(Debug, Clone)]
pub struct TimingRow {
    pub grid_value: usize,
    pub model: &'static str,
    pub restart: usize,
    pub seconds: f64,
}

/// Study output. The serialized form carries only seed-deterministic data;
/// wall-clock timings and the bulky per-point predictions live in skipped
/// fields and are emitted to their own CSV files instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyResult {
    pub sweep: SweepVariable,
    pub grid: Vec<usize>,
    pub test_size: usize,
    pub cells: BTreeMap<usize, CellResult>,
    #[serde(skip)]
    pub timings: Vec<TimingRow>,
    /// grid value -> model -> first-restart predictions on the test set.
    #[serde(skip)]
    pub predictions: BTreeMap<usize, BTreeMap<String, Vec<f64>>>,
    #[serde(skip)]
    pub test_outputs: Vec<f64>,
}

impl StudyResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Write `study_result.json` and the per-figure CSV files into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("study_result.json"), self.to_json()?)?;
        self.write_r2_sweep(&dir.join("r2_sweep.csv"))?;
        self.write_correlations(&dir.join("correlations.csv"))?;
        self.write_timings(&dir.join("timings.csv"))?;
        if self.cells.values().any(|c| c.cv.is_some()) {
            self.write_cv_bounds(&dir.join("cv_bounds.csv"))?;
        }
        Ok(())
    }

    fn write_r2_sweep(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        write_row(
            &mut w,
            [self.sweep.name(), "model", "restarts", "mean_r2", "min_r2", "max_r2"],
        )?;
        for (g, cell) in &self.cells {
            for (name, scores) in cell.models() {
                write_row(
                    &mut w,
                    [
                        g.to_string(),
                        name.to_string(),
                        scores.r2.len().to_string(),
                        opt_field(scores.mean),
                        opt_field(scores.min),
                        opt_field(scores.max),
                    ],
                )?;
            }
        }
        w.flush()?;
        Ok(())
    }

    fn write_correlations(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        write_row(
            &mut w,
            [self.sweep.name(), "model", "pearson", "reference", "prediction"],
        )?;
        for (g, models) in &self.predictions {
            for (name, pred) in models {
                let table = match correlation_data(&self.test_outputs, pred) {
                    Ok(t) => t,
                    Err(_) => continue,
                };
                for (reference, prediction) in table.pairs {
                    write_row(
                        &mut w,
                        [
                            g.to_string(),
                            name.clone(),
                            table.pearson.to_string(),
                            reference.to_string(),
                            prediction.to_string(),
                        ],
                    )?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    fn write_timings(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        write_row(&mut w, [self.sweep.name(), "model", "restart", "seconds"])?;
        for row in &self.timings {
            write_row(
                &mut w,
                [
                    row.grid_value.to_string(),
                    row.model.to_string(),
                    row.restart.to_string(),
                    row.seconds.to_string(),
                ],
            )?;
        }
        w.flush()?;
        Ok(())
    }

    fn write_cv_bounds(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        write_row(
            &mut w,
            [
                self.sweep.name(),
                "model",
                "batches",
                "mean_r2",
                "std",
                "ci_lower",
                "ci_upper",
                "min_r2",
                "max_r2",
            ],
        )?;
        for (g, cell) in &self.cells {
            let Some(cv) = &cell.cv else { continue };
            for (name, stats) in cv {
                write_row(
                    &mut w,
                    [
                        g.to_string(),
                        name.clone(),
                        stats.batches.to_string(),
                        stats.mean.to_string(),
                        stats.std.to_string(),
                        stats.ci_lower.to_string(),
                        stats.ci_upper.to_string(),
                        stats.min.to_string(),
                        stats.max.to_string(),
                    ],
                )?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::CsvFormat(e.to_string()))
}

fn write_row<W, I, S>(w: &mut csv::Writer<W>, row: I) -> Result<()>
where
    W: std::io::Write,
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(row)
        .map_err(|e| Error::CsvFormat(e.to_string()))
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn binomial_batches(t: usize, k_out: usize) -> Result<usize> {
    let n = match k_out {
        1 => t as u128,
        2 => (t as u128) * (t as u128 - 1) / 2,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "leave-out size must be 1 or 2, got {k_out}"
            )))
        }
    };
    if n > 1_000_000 {
        return Err(Error::Config(format!(
            "{n} cross-validation batches exceed the 10^6 limit"
        )));
    }
    Ok(n as usize)
}

fn removed_sets(t: usize, k_out: usize) -> Vec<Vec<usize>> {
    match k_out {
        1 => (0..t).map(|i| vec![i]).collect(),
        _ => {
            let mut out = Vec::with_capacity(t * (t - 1) / 2);
            for i in 0..t {
                for j in i + 1..t {
                    out.push(vec![i, j]);
                }
            }
            out
        }
    }
}

/// Score every model on all leave-`k_out`-out batches of a shared test set.
/// Models are not retrained; only the scoring subset varies. Ties on the
/// extreme batches resolve to the earliest batch in enumeration order.
pub fn cv_batch_stats(
    y_true: &[f64],
    predictions: &BTreeMap<String, Vec<f64>>,
    k_out: usize,
) -> Result<BTreeMap<String, CvStats>> {
    let t = y_true.len();
    if t < k_out + 1 {
        return Err(Error::InvalidArgument(format!(
            "cannot leave {k_out} out of a {t}-point test set"
        )));
    }
    for (name, pred) in predictions {
        if pred.len() != t {
            return Err(Error::DimensionMismatch(format!(
                "model {name}: {} predictions vs {t} test points",
                pred.len()
            )));
        }
    }
    let n_batches = binomial_batches(t, k_out)?;
    let batches = removed_sets(t, k_out);
    debug_assert_eq!(batches.len(), n_batches);

    let mut per_model: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut yt = Vec::with_capacity(t);
    let mut yp = Vec::with_capacity(t);
    for (name, pred) in predictions {
        let mut scores = Vec::with_capacity(n_batches);
        for removed in &batches {
            yt.clear();
            yp.clear();
            for i in 0..t {
                if !removed.contains(&i) {
                    yt.push(y_true[i]);
                    yp.push(pred[i]);
                }
            }
            scores.push(r2_score(&yt, &yp)?);
        }
        per_model.insert(name, scores);
    }

    let mut out = BTreeMap::new();
    for (name, scores) in &per_model {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = if scores.len() > 1 {
            scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let std = var.sqrt();
        let half = 1.96 * std / n.sqrt();
        let mut lo = 0;
        let mut hi = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s < scores[lo] {
                lo = i;
            }
            if *s > scores[hi] {
                hi = i;
            }
        }
        let cross = |batch: usize| -> BTreeMap<String, f64> {
            per_model
                .iter()
                .filter(|(other, _)| *other != name)
                .map(|(other, s)| (other.to_string(), s[batch]))
                .collect()
        };
        out.insert(
            name.to_string(),
            CvStats {
                batches: scores.len(),
                mean,
                std,
                ci_lower: mean - half,
                ci_upper: mean + half,
                min: scores[lo],
                max: scores[hi],
                lowest: CvExtreme {
                    removed: batches[lo].clone(),
                    r2: scores[lo],
                    cross: cross(lo),
                },
                highest: CvExtreme {
                    removed: batches[hi].clone(),
                    r2: scores[hi],
                    cross: cross(hi),
                },
            },
        );
    }
    Ok(out)
}

enum PreparedSource {
    Bench(Benchmark),
    Data { high: Dataset, lows: Vec<Dataset> },
}

impl PreparedSource {
    fn load(source: &StudySource) -> Result<PreparedSource> {
        match source {
            StudySource::Benchmark { benchmark } => Ok(PreparedSource::Bench(*benchmark)),
            StudySource::Csv { high, low } => {
                let high = Dataset::read_csv(high)?;
                let lows = low
                    .iter()
                    .map(Dataset::read_csv)
                    .collect::<Result<Vec<_>>>()?;
                for l in &lows {
                    if l.dim() != high.dim() {
                        return Err(Error::DimensionMismatch(format!(
                            "low-fidelity dimension {} vs high-fidelity {}",
                            l.dim(),
                            high.dim()
                        )));
                    }
                }
                Ok(PreparedSource::Data { high, lows })
            }
        }
    }

    fn dim(&self) -> usize {
        match self {
            PreparedSource::Bench(b) => b.dim(),
            PreparedSource::Data { high, .. } => high.dim(),
        }
    }

    fn box_bounds(&self) -> Option<Bounds> {
        match self {
            PreparedSource::Bench(b) => Some(b.bounds()),
            PreparedSource::Data { .. } => None,
        }
    }

    /// High-fidelity training set for one restart: a fresh Latin hypercube
    /// design for benchmarks, the leading rows for CSV data.
    fn hf_dataset(&self, n_hf: usize, restart_seed: u64) -> Result<Dataset> {
        match self {
            PreparedSource::Bench(b) => b.dataset(
                DesignKind::Lhs,
                n_hf,
                child_seed(restart_seed, stream::HF_DESIGN),
            ),
            PreparedSource::Data { high, .. } => dataset_head(high, n_hf),
        }
    }
}

fn dataset_head(ds: &Dataset, n: usize) -> Result<Dataset> {
    if n > ds.n_samples() {
        return Err(Error::Config(format!(
            "requested {n} rows from a {}-row dataset",
            ds.n_samples()
        )));
    }
    Dataset::new(
        ds.inputs().rows(0, n).clone_owned(),
        ds.outputs().rows(0, n).clone_owned(),
        ds.gradients().map(|g| g.rows(0, n).clone_owned()),
    )
}

impl StudyConfig {
    fn seed_base(&self) -> u64 {
        self.pipeline.seed
    }

    /// (n_hf, n_lf_extra) for one grid value.
    fn resolve_cell(&self, grid_value: usize) -> (usize, usize) {
        match self.sweep {
            SweepVariable::NHf => {
                let extra = match self.lf_total {
                    Some(total) => total.saturating_sub(grid_value),
                    None => self.pipeline.n_lf_extra,
                };
                (grid_value, extra)
            }
            SweepVariable::NLfExtra => (self.n_hf, grid_value),
        }
    }

    fn validate(&self, source: &PreparedSource) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("empty sweep grid".into()));
        }
        if self.outer_restarts == 0 {
            return Err(Error::Config("outer_restarts must be at least 1".into()));
        }
        if self.sweep == SweepVariable::NLfExtra && self.n_hf < 2 {
            return Err(Error::Config(
                "sweeping n_lf_extra needs a fixed n_hf of at least 2".into(),
            ));
        }
        if self.sweep == SweepVariable::NLfExtra {
            if let PreparedSource::Data { lows, .. } = source {
                if !lows.is_empty() {
                    return Err(Error::Config(
                        "n_lf_extra only applies to the synthetic pipeline, not external low-fidelity CSVs".into(),
                    ));
                }
            }
        }
        for &g in &self.grid {
            let (n_hf, _) = self.resolve_cell(g);
            if n_hf < 2 {
                return Err(Error::Config(format!(
                    "grid value {g} yields n_hf = {n_hf}; need at least 2"
                )));
            }
            if let Some(total) = self.lf_total {
                if self.sweep == SweepVariable::NHf && total < n_hf {
                    return Err(Error::Config(format!(
                        "lf_total {total} is smaller than n_hf {n_hf}"
                    )));
                }
            }
            if let PreparedSource::Data { high, .. } = source {
                if n_hf > high.n_samples() {
                    return Err(Error::Config(format!(
                        "grid value {g} needs {n_hf} high-fidelity rows, dataset has {}",
                        high.n_samples()
                    )));
                }
            }
        }
        if matches!(source, PreparedSource::Data { .. }) && self.test.csv.is_none() {
            return Err(Error::Config(
                "CSV-backed studies need an explicit test CSV".into(),
            ));
        }
        if self.test.csv.is_none() && self.test.size < 2 {
            return Err(Error::Config("test set needs at least 2 points".into()));
        }
        Ok(())
    }

    fn test_set(&self, source: &PreparedSource) -> Result<Dataset> {
        if let Some(path) = &self.test.csv {
            let ds = Dataset::read_csv(path)?;
            if ds.dim() != source.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "test dimension {} vs source dimension {}",
                    ds.dim(),
                    source.dim()
                )));
            }
            if ds.n_samples() < 2 {
                return Err(Error::Config("test set needs at least 2 points".into()));
            }
            return Ok(ds);
        }
        match source {
            PreparedSource::Bench(b) => {
                let points = design(
                    self.test.sampler,
                    self.test.size,
                    &b.bounds(),
                    child_seed(self.seed_base(), stream::TEST_DESIGN),
                )?;
                b.dataset_at(&points)
            }
            PreparedSource::Data { .. } => unreachable!("validated above"),
        }
    }
}

/// Train the three models of one cell restart and return their predictions
/// on the test inputs, recording wall-clock training times.
struct RestartOutcome {
    mf: Result<Vec<f64>>,
    hf: Result<Vec<f64>>,
    lf: Result<Vec<f64>>,
    timings: Vec<(&'static str, f64)>,
}

fn run_restart(
    source: &PreparedSource,
    hf_data: &Dataset,
    cfg: &PipelineConfig,
    test_inputs: &DMatrix<f64>,
) -> RestartOutcome {
    let mut timings = Vec::new();

    let external_lows = match source {
        PreparedSource::Data { lows, .. } if !lows.is_empty() => Some(lows),
        _ => None,
    };

    let hf_pairs = match Dataset::new(hf_data.inputs().clone(), hf_data.outputs().clone(), None) {
        Ok(p) => p,
        Err(e) => {
            let msg = format!("high-fidelity pairs unavailable: {e}");
            return RestartOutcome {
                mf: Err(Error::Config(msg.clone())),
                hf: Err(Error::Config(msg.clone())),
                lf: Err(Error::Config(msg)),
                timings,
            };
        }
    };

    let (lf, mf) = match external_lows {
        None => {
            // Synthetic stack: the reduced surface is both the LF model and
            // the generator of the bottom level.
            let t0 = Instant::now();
            let built = build_lowfidelity(hf_data, cfg);
            timings.push(("lf", t0.elapsed().as_secs_f64()));
            match built {
                Ok((surface, lf_level)) => {
                    let lf_pred = surface
                        .predict_mean(test_inputs)
                        .map(|v| v.as_slice().to_vec());
                    let t1 = Instant::now();
                    let mf_pred = (|| -> Result<Vec<f64>> {
                        let model =
                            nargp::train(&[lf_level, hf_pairs.clone()], &cfg.mf_train_config())?;
                        timings.push(("mf", t1.elapsed().as_secs_f64()));
                        let p = model.predict_mc(test_inputs, cfg.mc_samples, cfg.seed)?;
                        Ok(p.mean.as_slice().to_vec())
                    })();
                    (lf_pred, mf_pred)
                }
                Err(e) => {
                    let msg = e.to_string();
                    (
                        Err(e),
                        Err(Error::Config(format!(
                            "low-fidelity level unavailable: {msg}"
                        ))),
                    )
                }
            }
        }
        Some(lows) => {
            // External stack: the reducer surrogate is scored standalone.
            let t0 = Instant::now();
            let surface = ReducedSurface::train(
                hf_data.inputs(),
                hf_data.outputs(),
                hf_data.gradients(),
                &cfg.surface_config(),
            );
            timings.push(("lf", t0.elapsed().as_secs_f64()));
            let lf_pred = surface.and_then(|s| {
                s.predict_mean(test_inputs).map(|v| v.as_slice().to_vec())
            });

            let t1 = Instant::now();
            let mf_pred = (|| -> Result<Vec<f64>> {
                let mut levels: Vec<Dataset> = lows.to_vec();
                levels.push(hf_pairs.clone());
                let model = nargp::train(&levels, &cfg.mf_train_config())?;
                timings.push(("mf", t1.elapsed().as_secs_f64()));
                let p = model.predict_mc(test_inputs, cfg.mc_samples, cfg.seed)?;
                Ok(p.mean.as_slice().to_vec())
            })();
            (lf_pred, mf_pred)
        }
    };

    let t2 = Instant::now();
    let hf = (|| -> Result<Vec<f64>> {
        let gp = fit(
            hf_data.inputs(),
            hf_data.outputs(),
            KernelFamily::RbfArd,
            &FitConfig {
                restarts: cfg.surface_restarts,
                noise: cfg.noise,
                seed: child_seed(cfg.seed, stream::HF_GP_FIT),
                ..FitConfig::default()
            },
        )?;
        timings.push(("hf", t2.elapsed().as_secs_f64()));
        let (mean, _) = gp.predict_diag(test_inputs)?;
        Ok(mean.as_slice().to_vec())
    })();

    RestartOutcome {
        mf,
        hf,
        lf,
        timings,
    }
}

/// Run the full sweep: per grid value and per outer restart, train the MF
/// stack, a plain full-space GP on the high-fidelity data, and the reducer
/// surrogate, then score all three on the shared test set. Training failures
/// are recorded in the cell and do not abort the sweep. Results are written
/// to the configured output directory when one is set.
pub fn run_study(config: &StudyConfig) -> Result<StudyResult> {
    let source = PreparedSource::load(&config.source)?;
    config.validate(&source)?;
    let test = config.test_set(&source)?;
    let test_outputs: Vec<f64> = test.outputs().as_slice().to_vec();

    let mut result = StudyResult {
        sweep: config.sweep,
        grid: config.grid.clone(),
        test_size: test.n_samples(),
        cells: BTreeMap::new(),
        timings: Vec::new(),
        predictions: BTreeMap::new(),
        test_outputs: test_outputs.clone(),
    };

    for &g in &config.grid {
        let (n_hf, n_extra) = config.resolve_cell(g);
        let mut cell = CellResult::new(n_hf, n_extra);
        let mut first_preds: BTreeMap<String, Vec<f64>> = BTreeMap::new();

        for i in 0..config.outer_restarts {
            let restart_seed = config.seed_base().wrapping_add(i as u64);
            let mut cfg = config.pipeline.clone();
            cfg.seed = restart_seed;
            cfg.n_lf_extra = n_extra;
            if cfg.bounds.is_none() {
                cfg.bounds = source.box_bounds();
            }

            let outcome = match source.hf_dataset(n_hf, restart_seed) {
                Ok(hf_data) => run_restart(&source, &hf_data, &cfg, test.inputs()),
                Err(e) => {
                    let msg = format!("high-fidelity design unavailable: {e}");
                    RestartOutcome {
                        mf: Err(Error::Config(msg.clone())),
                        hf: Err(Error::Config(msg.clone())),
                        lf: Err(Error::Config(msg)),
                        timings: Vec::new(),
                    }
                }
            };

            for (model, seconds) in &outcome.timings {
                result.timings.push(TimingRow {
                    grid_value: g,
                    model,
                    restart: i,
                    seconds: *seconds,
                });
            }

            let scored = [
                ("mf", outcome.mf),
                ("hf", outcome.hf),
                ("lf", outcome.lf),
            ];
            for (name, pred) in scored {
                let entry = match name {
                    "mf" => &mut cell.mf,
                    "hf" => &mut cell.hf,
                    _ => &mut cell.lf,
                };
                match pred {
                    Ok(p) => {
                        let score = r2_score(&test_outputs, &p);
                        if i == 0 && score.is_ok() {
                            first_preds.insert(name.to_string(), p);
                        }
                        entry.record(i, score);
                    }
                    Err(e) => entry.record(i, Err(e)),
                }
            }
        }

        cell.mf.finalize();
        cell.hf.finalize();
        cell.lf.finalize();

        if let Some(k) = config.cv.k_out() {
            if !first_preds.is_empty() {
                cell.cv = Some(cv_batch_stats(&test_outputs, &first_preds, k)?);
            }
        }
        result.predictions.insert(g, first_preds);
        result.cells.insert(g, cell);
    }

    if let Some(dir) = &config.output_dir {
        result.write_outputs(dir)?;
    }
    Ok(result)
}

/// Convenience wrapper: run the study with cross-validation forced on.
pub fn cross_validate(config: &StudyConfig, k_out: usize) -> Result<StudyResult> {
    let mut cfg = config.clone();
    cfg.cv = match k_out {
        1 => CvMode::LeaveOneOut,
        2 => CvMode::LeaveTwoOut,
        other => {
            return Err(Error::InvalidArgument(format!(
                "leave-out size must be 1 or 2, got {other}"
            )))
        }
    };
    run_study(&cfg)
}
