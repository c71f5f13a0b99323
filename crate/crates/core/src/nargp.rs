//! Autoregressive multi-fidelity GP stack: the bottom level is a plain GP
//! on the inputs, and each higher level regresses on the inputs augmented
//! with the previous level's output at the same point. Prediction propagates
//! uncertainty through the stack by Monte Carlo.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{hierarchy_indices, Dataset};
use crate::error::{Error, Result};
use crate::gp::{fit, FitConfig, GpModel, GpModelDoc, KernelFamily, NoisePolicy};
use crate::kernel::{append_column, KernelParams};
use crate::seed::{child_seed, child_seed_indexed, stream};

pub const DEFAULT_PARTICLES: usize = 200;

#[derive(Debug, Clone)]
pub struct MfTrainConfig {
    pub restarts: usize,
    pub noise: NoisePolicy,
    pub seed: u64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for MfTrainConfig {
    fn default() -> Self {
        MfTrainConfig {
            restarts: 20,
            noise: NoisePolicy::FixedZero,
            seed: 0,
            max_iter: 200,
            grad_tol: 1e-6,
        }
    }
}

/// A trained multi-fidelity stack, lowest fidelity first.
#[derive(Debug, Clone)]
pub struct MfModel {
    levels: Vec<GpModel>,
    seed: u64,
}

/// Monte Carlo prediction summary. `mean` averages the per-particle
/// conditional means; `variance` is the mean conditional variance plus the
/// spread of the conditional means (total variance across the propagated
/// uncertainty). `samples` holds the actual particle draws, one row per
/// particle.
#[derive(Debug, Clone)]
pub struct McPrediction {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub samples: DMatrix<f64>,
}

/// Fit the stack bottom-up. Each level's inputs must be a subset of the
/// previous level's rows (exact matches), so the augmentation column is the
/// stored previous-level output, never a prediction.
pub fn train(levels: &[Dataset], cfg: &MfTrainConfig) -> Result<MfModel> {
    if levels.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "multi-fidelity training needs at least 2 levels, got {}",
            levels.len()
        )));
    }
    let m = levels[0].dim();
    for (q, level) in levels.iter().enumerate() {
        if level.dim() != m {
            return Err(Error::DimensionMismatch(format!(
                "level {q} has dimension {} vs {m} at level 0",
                level.dim()
            )));
        }
    }

    let mut fitted: Vec<GpModel> = Vec::with_capacity(levels.len());
    for (q, level) in levels.iter().enumerate() {
        let fit_cfg = FitConfig {
            restarts: cfg.restarts,
            noise: cfg.noise,
            seed: child_seed_indexed(cfg.seed, stream::MF_LEVEL_FIT, q as u64),
            max_iter: cfg.max_iter,
            grad_tol: cfg.grad_tol,
        };
        let model = if q == 0 {
            fit(level.inputs(), level.outputs(), KernelFamily::RbfArd, &fit_cfg)?
        } else {
            let prev = &levels[q - 1];
            let idx = hierarchy_indices(prev.inputs(), level.inputs(), q)?;
            let fprev = DVector::from_fn(idx.len(), |i, _| prev.outputs()[idx[i]]);
            let aug = append_column(level.inputs(), &fprev)?;
            fit(&aug, level.outputs(), KernelFamily::Nargp, &fit_cfg)?
        };
        fitted.push(model);
    }
    Ok(MfModel {
        levels: fitted,
        seed: cfg.seed,
    })
}

impl MfModel {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Spatial input dimension (without the augmentation column).
    pub fn input_dim(&self) -> usize {
        self.levels[0].input_dim()
    }

    pub fn levels(&self) -> &[GpModel] {
        &self.levels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Monte Carlo prediction at the top level.
    pub fn predict_mc(
        &self,
        test_inputs: &DMatrix<f64>,
        n_particles: usize,
        seed: u64,
    ) -> Result<McPrediction> {
        self.predict_level(test_inputs, self.levels.len() - 1, n_particles, seed)
    }

    /// Monte Carlo prediction truncated at `level` (0-based). Querying the
    /// top level reproduces `predict_mc` draw for draw.
    pub fn predict_level(
        &self,
        test_inputs: &DMatrix<f64>,
        level: usize,
        n_particles: usize,
        seed: u64,
    ) -> Result<McPrediction> {
        if level >= self.levels.len() {
            return Err(Error::InvalidArgument(format!(
                "level {level} outside 0..{}",
                self.levels.len()
            )));
        }
        if n_particles == 0 {
            return Err(Error::InvalidArgument("need at least one particle".into()));
        }
        if test_inputs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "test inputs of dimension {} vs model dimension {}",
                test_inputs.ncols(),
                self.input_dim()
            )));
        }
        let t = test_inputs.nrows();
        let p = n_particles;
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, stream::MC_PREDICT));

        let mut particles = DMatrix::zeros(p, t);
        let mut cond_means = DMatrix::zeros(p, t);
        let mut cond_vars = DMatrix::zeros(p, t);

        for q in 0..=level {
            if q == 0 {
                let (mean, var) = self.levels[0].predict_diag(test_inputs)?;
                for pi in 0..p {
                    for ti in 0..t {
                        let sd = var[ti].max(0.0).sqrt();
                        let z: f64 = StandardNormal.sample(&mut rng);
                        particles[(pi, ti)] = mean[ti] + sd * z;
                        cond_means[(pi, ti)] = mean[ti];
                        cond_vars[(pi, ti)] = var[ti];
                    }
                }
            } else {
                for pi in 0..p {
                    let fprev = DVector::from_fn(t, |ti, _| particles[(pi, ti)]);
                    let aug = append_column(test_inputs, &fprev)?;
                    let (mean, var) = self.levels[q].predict_diag(&aug)?;
                    for ti in 0..t {
                        let sd = var[ti].max(0.0).sqrt();
                        let z: f64 = StandardNormal.sample(&mut rng);
                        particles[(pi, ti)] = mean[ti] + sd * z;
                        cond_means[(pi, ti)] = mean[ti];
                        cond_vars[(pi, ti)] = var[ti];
                    }
                }
            }
        }

        let mut mean = DVector::zeros(t);
        let mut variance = DVector::zeros(t);
        for ti in 0..t {
            let mu: f64 = (0..p).map(|pi| cond_means[(pi, ti)]).sum::<f64>() / p as f64;
            let avg_var: f64 = (0..p).map(|pi| cond_vars[(pi, ti)]).sum::<f64>() / p as f64;
            let spread: f64 = (0..p)
                .map(|pi| {
                    let d = cond_means[(pi, ti)] - mu;
                    d * d
                })
                .sum::<f64>()
                / p as f64;
            mean[ti] = mu;
            variance[ti] = avg_var + spread;
        }

        Ok(McPrediction {
            mean,
            variance,
            samples: particles,
        })
    }

    pub fn to_doc(&self) -> MfModelDoc {
        MfModelDoc {
            levels: self.levels.iter().map(GpModel::to_doc).collect(),
            seed: self.seed,
        }
    }

    pub fn from_doc(doc: MfModelDoc) -> Result<MfModel> {
        if doc.levels.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "model document needs at least 2 levels, got {}",
                doc.levels.len()
            )));
        }
        let levels = doc
            .levels
            .into_iter()
            .map(GpModel::from_doc)
            .collect::<Result<Vec<_>>>()?;
        let m = levels[0].input_dim();
        if !matches!(levels[0].kernel(), KernelParams::RbfArd(_)) {
            return Err(Error::Config("level 0 must use the plain kernel".into()));
        }
        for (q, l) in levels.iter().enumerate().skip(1) {
            if !matches!(l.kernel(), KernelParams::Nargp(_)) {
                return Err(Error::Config(format!(
                    "level {q} must use the composite kernel"
                )));
            }
            if l.input_dim() != m + 1 {
                return Err(Error::DimensionMismatch(format!(
                    "level {q} input dimension {} vs expected {}",
                    l.input_dim(),
                    m + 1
                )));
            }
        }
        Ok(MfModel {
            levels,
            seed: doc.seed,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(s: &str) -> Result<MfModel> {
        MfModel::from_doc(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MfModelDoc {
    pub levels: Vec<GpModelDoc>,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Low fidelity: sin(2 pi x); high fidelity: a shifted, scaled variant
    /// observed only on a subset of the low-fidelity design.
    fn two_level_data(n_low: usize, n_high: usize) -> Vec<Dataset> {
        assert!(n_high <= n_low);
        let xl = DMatrix::from_fn(n_low, 1, |i, _| i as f64 / (n_low - 1) as f64);
        let yl = DVector::from_fn(n_low, |i, _| (2.0 * std::f64::consts::PI * xl[(i, 0)]).sin());
        // Every other row (then every row up to n_high) keeps exact nesting.
        let keep: Vec<usize> = (0..n_low).step_by(n_low / n_high).take(n_high).collect();
        let xh = DMatrix::from_fn(keep.len(), 1, |i, _| xl[(keep[i], 0)]);
        let yh = DVector::from_fn(keep.len(), |i, _| 1.8 * yl[keep[i]] - 0.3);
        vec![
            Dataset::new(xl, yl, None).unwrap(),
            Dataset::new(xh, yh, None).unwrap(),
        ]
    }

    fn quick_cfg(seed: u64) -> MfTrainConfig {
        MfTrainConfig {
            restarts: 4,
            seed,
            ..MfTrainConfig::default()
        }
    }

    #[test]
    fn trains_and_predicts_linear_link() {
        let levels = two_level_data(16, 8);
        let model = train(&levels, &quick_cfg(1)).unwrap();
        assert_eq!(model.n_levels(), 2);
        let xt = DMatrix::from_fn(25, 1, |i, _| 0.02 + 0.96 * i as f64 / 24.0);
        let pred = model.predict_mc(&xt, 100, 5).unwrap();
        for i in 0..25 {
            let want = 1.8 * (2.0 * std::f64::consts::PI * xt[(i, 0)]).sin() - 0.3;
            assert!(
                (pred.mean[i] - want).abs() < 0.05,
                "point {i}: {} vs {want}",
                pred.mean[i]
            );
            assert!(pred.variance[i] >= 0.0);
        }
    }

    #[test]
    fn hierarchy_violation_rejected() {
        let xl = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.0]);
        let yl = DVector::from_row_slice(&[0.0, 1.0, 0.0]);
        let xh = DMatrix::from_row_slice(2, 1, &[0.25, 0.5]);
        let yh = DVector::from_row_slice(&[0.5, 1.0]);
        let levels = vec![
            Dataset::new(xl, yl, None).unwrap(),
            Dataset::new(xh, yh, None).unwrap(),
        ];
        let err = train(&levels, &quick_cfg(0)).unwrap_err();
        match err {
            Error::HierarchyViolation { level, row } => {
                assert_eq!(level, 1);
                assert_eq!(row, 0);
            }
            other => panic!("expected hierarchy violation, got {other:?}"),
        }
    }

    #[test]
    fn single_level_rejected() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let y = DVector::from_row_slice(&[0.0, 1.0]);
        let levels = vec![Dataset::new(x, y, None).unwrap()];
        assert!(train(&levels, &quick_cfg(0)).is_err());
    }

    #[test]
    fn prediction_deterministic_in_seed() {
        let levels = two_level_data(12, 6);
        let model = train(&levels, &quick_cfg(3)).unwrap();
        let xt = DMatrix::from_row_slice(4, 1, &[0.1, 0.35, 0.6, 0.85]);
        let a = model.predict_mc(&xt, 50, 11).unwrap();
        let b = model.predict_mc(&xt, 50, 11).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.variance, b.variance);
        assert_eq!(a.samples, b.samples);
        let c = model.predict_mc(&xt, 50, 12).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn top_level_query_matches_predict_mc_exactly() {
        let levels = two_level_data(12, 6);
        let model = train(&levels, &quick_cfg(7)).unwrap();
        let xt = DMatrix::from_row_slice(3, 1, &[0.2, 0.5, 0.8]);
        let a = model.predict_mc(&xt, 64, 9).unwrap();
        let b = model.predict_level(&xt, 1, 64, 9).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.variance, b.variance);
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn certain_bottom_level_collapses_total_variance() {
        // Querying at bottom-level training points makes the first-level
        // draws (near) deterministic, so the reported variance must reduce
        // to the top level's own conditional variance.
        let levels = two_level_data(12, 6);
        let model = train(&levels, &quick_cfg(5)).unwrap();
        let xt = levels[0].inputs().clone_owned();
        let pred = model.predict_mc(&xt, 80, 3).unwrap();

        let (mean0, var0) = model.levels()[0].predict_diag(&xt).unwrap();
        for v in var0.iter() {
            assert!(*v < 1e-10, "bottom level still uncertain: {v}");
        }
        let aug = append_column(&xt, &mean0).unwrap();
        let (_, cond_var) = model.levels()[1].predict_diag(&aug).unwrap();
        for i in 0..xt.nrows() {
            assert!(
                (pred.variance[i] - cond_var[i].max(0.0)).abs() < 1e-6,
                "point {i}: total {} vs conditional {}",
                pred.variance[i],
                cond_var[i]
            );
        }
    }

    #[test]
    fn samples_tensor_matches_reported_moments() {
        let levels = two_level_data(14, 7);
        let model = train(&levels, &quick_cfg(2)).unwrap();
        let xt = DMatrix::from_row_slice(2, 1, &[0.33, 0.77]);
        let p = 4000;
        let pred = model.predict_mc(&xt, p, 21).unwrap();
        for ti in 0..2 {
            let col: Vec<f64> = (0..p).map(|pi| pred.samples[(pi, ti)]).collect();
            let mu = col.iter().sum::<f64>() / p as f64;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / p as f64;
            // Draw moments agree with reported total-variance moments up to
            // Monte Carlo error.
            let tol_mu = 4.0 * (pred.variance[ti] / p as f64).sqrt() + 1e-9;
            assert!((mu - pred.mean[ti]).abs() < tol_mu, "mean {mu} vs {}", pred.mean[ti]);
            if pred.variance[ti] > 1e-12 {
                assert!(
                    (var - pred.variance[ti]).abs() < 0.2 * pred.variance[ti] + 1e-9,
                    "var {var} vs {}",
                    pred.variance[ti]
                );
            }
        }
    }

    #[test]
    fn three_levels_train_and_nest() {
        let n = 12;
        let x0 = DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64);
        let y0 = DVector::from_fn(n, |i, _| (3.0 * x0[(i, 0)]).sin());
        let keep1: Vec<usize> = (0..n).step_by(2).collect();
        let x1 = DMatrix::from_fn(keep1.len(), 1, |i, _| x0[(keep1[i], 0)]);
        let y1 = DVector::from_fn(keep1.len(), |i, _| 1.3 * y0[keep1[i]] + 0.1);
        let keep2: Vec<usize> = (0..keep1.len()).step_by(2).collect();
        let x2 = DMatrix::from_fn(keep2.len(), 1, |i, _| x1[(keep2[i], 0)]);
        let y2 = DVector::from_fn(keep2.len(), |i, _| 0.9 * y1[keep2[i]] - 0.05);
        let levels = vec![
            Dataset::new(x0, y0, None).unwrap(),
            Dataset::new(x1, y1, None).unwrap(),
            Dataset::new(x2, y2, None).unwrap(),
        ];
        let model = train(&levels, &quick_cfg(4)).unwrap();
        assert_eq!(model.n_levels(), 3);
        let xt = DMatrix::from_row_slice(3, 1, &[0.15, 0.5, 0.9]);
        let top = model.predict_mc(&xt, 60, 1).unwrap();
        let mid = model.predict_level(&xt, 1, 60, 1).unwrap();
        assert!(top.mean.iter().all(|v| v.is_finite()));
        assert!(mid.mean.iter().all(|v| v.is_finite()));
        assert_ne!(top.mean, mid.mean);
    }

    #[test]
    fn json_round_trip_re_predicts_identically() {
        let levels = two_level_data(12, 6);
        let model = train(&levels, &quick_cfg(8)).unwrap();
        let back = MfModel::from_json(&model.to_json().unwrap()).unwrap();
        let xt = DMatrix::from_row_slice(3, 1, &[0.11, 0.5, 0.93]);
        let a = model.predict_mc(&xt, 32, 6).unwrap();
        let b = back.predict_mc(&xt, 32, 6).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.variance, b.variance);
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn doc_validation_catches_shape_and_kind() {
        let levels = two_level_data(10, 5);
        let model = train(&levels, &quick_cfg(9)).unwrap();
        let mut doc = model.to_doc();
        doc.levels.truncate(1);
        assert!(MfModel::from_doc(doc).is_err());

        let mut doc2 = model.to_doc();
        doc2.levels.swap(0, 1);
        assert!(MfModel::from_doc(doc2).is_err());
    }
}
