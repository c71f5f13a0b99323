//! Zero-mean Gaussian process regression: exact inference, marginal
//! likelihood with analytic gradients, and multi-restart hyperparameter
//! optimization in log space.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{cross_gram, gram_prepared, KernelParams, NargpKernelParams, RbfArdParams};
use crate::optimize::lbfgs_minimize;
use crate::seed::{child_seed, child_seed_indexed, stream};

/// Relative diagonal jitter applied before every likelihood factorization.
pub const BASE_JITTER: f64 = 1e-8;
/// Escalation cap, relative to the mean kernel diagonal.
pub const MAX_JITTER: f64 = 1e-2;
/// First nonzero rung of the prediction-factor jitter ladder, relative to
/// the mean kernel diagonal.
pub const JITTER_FLOOR: f64 = 1e-16;

/// Observation noise treatment. The default keeps noise pinned at zero
/// (noiseless simulator outputs); `Free` adds a log-parameterized noise
/// variance to the optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoisePolicy {
    #[default]
    FixedZero,
    Free,
}

/// Which kernel structure `fit` builds for a given input matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    RbfArd,
    /// Composite autoregressive kernel; the input matrix must carry the
    /// previous-level value as its last column.
    Nargp,
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub restarts: usize,
    pub noise: NoisePolicy,
    pub seed: u64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 10,
            noise: NoisePolicy::FixedZero,
            seed: 0,
            max_iter: 200,
            grad_tol: 1e-6,
        }
    }
}

/// A fitted GP. Factors are rebuilt deterministically from the stored data,
/// so serialized models re-predict bit-identically.
#[derive(Debug, Clone)]
pub struct GpModel {
    kernel: KernelParams,
    noise_policy: NoisePolicy,
    noise_variance: f64,
    train_inputs: DMatrix<f64>,
    train_outputs: DVector<f64>,
    seed: u64,
    jitter: f64,
    chol_l: DMatrix<f64>,
    alpha: DVector<f64>,
    lml: f64,
}

/// Cholesky of `k + (noise + jitter) I` with the crate's escalation policy:
/// jitter starts at 1e-8 times the mean kernel diagonal and grows tenfold up
/// to 1e-2 times it. Returns the factorization and the jitter used.
pub fn cholesky_with_jitter(
    k: &DMatrix<f64>,
    noise_variance: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let mean_diag = k.diagonal().iter().sum::<f64>() / n as f64;
    // The lower bound keeps the jitter rungs nonzero; below it the ladder
    // would underflow and stall.
    if !(mean_diag.is_finite() && mean_diag > 1e-300) {
        return Err(Error::Numerical(format!(
            "kernel matrix has degenerate mean diagonal {mean_diag}"
        )));
    }
    let mut jitter = BASE_JITTER * mean_diag;
    let cap = MAX_JITTER * mean_diag;
    loop {
        let mut reg = k.clone();
        for i in 0..n {
            reg[(i, i)] += noise_variance + jitter;
        }
        if let Some(ch) = Cholesky::new(reg) {
            return Ok((ch, jitter));
        }
        jitter *= 10.0;
        if jitter > cap {
            return Err(Error::Numerical(format!(
                "matrix not positive definite after jitter escalation to {cap:.3e}"
            )));
        }
    }
}

/// Cholesky of `k + (noise + jitter) I` with the smallest jitter that
/// factorizes: bare first, then 1e-16 times the mean kernel diagonal growing
/// tenfold up to 1e-2 times it. Prediction factors use this ladder so
/// noiseless models interpolate their training data; the likelihood path
/// keeps a fixed jitter so the objective stays smooth in the
/// hyperparameters.
pub fn cholesky_minimal_jitter(
    k: &DMatrix<f64>,
    noise_variance: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let mean_diag = k.diagonal().iter().sum::<f64>() / n as f64;
    if !(mean_diag.is_finite() && mean_diag > 1e-300) {
        return Err(Error::Numerical(format!(
            "kernel matrix has degenerate mean diagonal {mean_diag}"
        )));
    }
    let cap = MAX_JITTER * mean_diag;
    let mut jitter = 0.0;
    loop {
        let mut reg = k.clone();
        for i in 0..n {
            reg[(i, i)] += noise_variance + jitter;
        }
        if let Some(ch) = Cholesky::new(reg) {
            return Ok((ch, jitter));
        }
        jitter = if jitter == 0.0 {
            JITTER_FLOOR * mean_diag
        } else {
            jitter * 10.0
        };
        if jitter > cap {
            return Err(Error::Numerical(format!(
                "matrix not positive definite after jitter escalation to {cap:.3e}"
            )));
        }
    }
}

fn lml_from_factors(chol: &Cholesky<f64, Dyn>, y: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    -0.5 * y.dot(alpha) - log_det_half - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// Negative log marginal likelihood and its gradient with respect to the
/// kernel log-parameters (plus log noise variance when free).
/// Returns `None` when the Gram matrix cannot be factorized.
fn neg_lml_with_grad(
    inputs: &DMatrix<f64>,
    outputs: &DVector<f64>,
    kernel: &KernelParams,
    noise_variance: f64,
    free_noise: bool,
) -> Option<(f64, Vec<f64>)> {
    let n = inputs.nrows();
    let k = gram_prepared(inputs, kernel);
    let mean_diag = k.diagonal().iter().sum::<f64>() / n as f64;
    let (chol, jitter) = cholesky_with_jitter(&k, noise_variance).ok()?;
    let alpha = chol.solve(outputs);
    let lml = lml_from_factors(&chol, outputs, &alpha);
    if !lml.is_finite() {
        return None;
    }

    // A = alpha alpha^T - K^{-1}; dLML/dtheta = 1/2 tr(A dK/dtheta).
    let kinv = chol.solve(&DMatrix::identity(n, n));
    let np = kernel.n_hyper();
    let mut grad = vec![0.0; np + usize::from(free_noise)];
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| inputs.row(i).iter().copied().collect())
        .collect();
    let mut kg = vec![0.0; np];
    let mut diag_grad = vec![0.0; np];
    let mut trace_a = 0.0;
    for i in 0..n {
        for j in 0..=i {
            let a_ij = alpha[i] * alpha[j] - kinv[(i, j)];
            let w = if i == j {
                trace_a += a_ij;
                0.5 * a_ij
            } else {
                a_ij
            };
            kernel.eval_grad(&rows[i], &rows[j], &mut kg);
            for (gp, kgp) in grad[..np].iter_mut().zip(&kg) {
                *gp += w * kgp;
            }
            if i == j {
                for (dg, kgp) in diag_grad.iter_mut().zip(&kg) {
                    *dg += kgp;
                }
            }
        }
    }
    // The jitter is proportional to the mean kernel diagonal, so it moves
    // with the hyperparameters; fold that drift into the gradient or it
    // diverges from the evaluated objective on ill-conditioned instances.
    let jitter_scale = 0.5 * trace_a * jitter / (mean_diag * n as f64);
    for (gp, dg) in grad[..np].iter_mut().zip(&diag_grad) {
        *gp += jitter_scale * dg;
    }
    if free_noise {
        grad[np] = 0.5 * noise_variance * trace_a;
    }
    // Flip sign: we minimize the negative log likelihood.
    for g in grad.iter_mut() {
        *g = -*g;
    }
    Some((-lml, grad))
}

/// Log marginal likelihood of a kernel/noise configuration on a dataset,
/// using the crate's jitter policy.
pub fn log_marginal_likelihood(
    inputs: &DMatrix<f64>,
    outputs: &DVector<f64>,
    kernel: &KernelParams,
    noise_variance: f64,
) -> Result<f64> {
    kernel.validate()?;
    if inputs.ncols() != kernel.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "inputs of dimension {} vs kernel dimension {}",
            inputs.ncols(),
            kernel.input_dim()
        )));
    }
    if inputs.nrows() != outputs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} input rows vs {} outputs",
            inputs.nrows(),
            outputs.len()
        )));
    }
    let k = gram_prepared(inputs, kernel);
    let (chol, _) = cholesky_with_jitter(&k, noise_variance)?;
    let alpha = chol.solve(outputs);
    Ok(lml_from_factors(&chol, outputs, &alpha))
}

/// Log marginal likelihood together with its gradient in the canonical
/// log-parameter coordinates (plus log noise variance when `free_noise`).
/// Shares the jitter policy of [`log_marginal_likelihood`], so finite
/// differences of that function converge to this gradient.
pub fn log_marginal_likelihood_with_grad(
    inputs: &DMatrix<f64>,
    outputs: &DVector<f64>,
    kernel: &KernelParams,
    noise_variance: f64,
    free_noise: bool,
) -> Result<(f64, Vec<f64>)> {
    kernel.validate()?;
    if inputs.ncols() != kernel.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "inputs of dimension {} vs kernel dimension {}",
            inputs.ncols(),
            kernel.input_dim()
        )));
    }
    if inputs.nrows() != outputs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} input rows vs {} outputs",
            inputs.nrows(),
            outputs.len()
        )));
    }
    let (neg, mut grad) = neg_lml_with_grad(inputs, outputs, kernel, noise_variance, free_noise)
        .ok_or_else(|| Error::Numerical("Gram matrix factorization failed".into()))?;
    for g in grad.iter_mut() {
        *g = -*g;
    }
    Ok((-neg, grad))
}

fn column_range(inputs: &DMatrix<f64>, j: usize) -> f64 {
    let col = inputs.column(j);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in col.iter() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let r = hi - lo;
    if r.is_finite() && r > 0.0 {
        r
    } else {
        1.0
    }
}

fn draw_lengthscale<R: Rng>(rng: &mut R, range: f64) -> f64 {
    // log-uniform over [0.1, 10] * per-coordinate range
    let u: f64 = rng.random();
    range * 10f64.powf(-1.0 + 2.0 * u)
}

fn initial_kernel<R: Rng>(
    family: KernelFamily,
    inputs: &DMatrix<f64>,
    out_var: f64,
    rng: &mut R,
) -> KernelParams {
    let d = inputs.ncols();
    match family {
        KernelFamily::RbfArd => {
            let ls = (0..d)
                .map(|j| draw_lengthscale(rng, column_range(inputs, j)))
                .collect();
            KernelParams::RbfArd(RbfArdParams {
                variance: out_var,
                lengthscales: ls,
            })
        }
        KernelFamily::Nargp => {
            let m = d - 1;
            let rho_ls: Vec<f64> = (0..m)
                .map(|j| draw_lengthscale(rng, column_range(inputs, j)))
                .collect();
            let f_ls = draw_lengthscale(rng, column_range(inputs, m));
            let delta_ls: Vec<f64> = (0..m)
                .map(|j| draw_lengthscale(rng, column_range(inputs, j)))
                .collect();
            KernelParams::Nargp(NargpKernelParams {
                rho: RbfArdParams {
                    variance: out_var,
                    lengthscales: rho_ls,
                },
                f: RbfArdParams {
                    variance: 1.0,
                    lengthscales: vec![f_ls],
                },
                delta: RbfArdParams {
                    variance: out_var,
                    lengthscales: delta_ls,
                },
            })
        }
    }
}

// Half-widths of the log-space search box around the data scales. The box
// keeps restarts out of degenerate corners: without it, inflating a variance
// inflates the relative jitter with it, which acts as a covert noise term.
const VAR_SPAN: f64 = 13.8; // ln(1e6)
const LS_SPAN: f64 = 6.9; // ln(1e3)

fn log_param_box(
    family: KernelFamily,
    inputs: &DMatrix<f64>,
    out_var: f64,
    free_noise: bool,
) -> (Vec<f64>, Vec<f64>) {
    let d = inputs.ncols();
    let mut centers: Vec<(f64, f64)> = Vec::new(); // (log center, half width)
    let var_c = out_var.ln();
    match family {
        KernelFamily::RbfArd => {
            centers.push((var_c, VAR_SPAN));
            for j in 0..d {
                centers.push((column_range(inputs, j).ln(), LS_SPAN));
            }
        }
        KernelFamily::Nargp => {
            let m = d - 1;
            centers.push((var_c, VAR_SPAN));
            for j in 0..m {
                centers.push((column_range(inputs, j).ln(), LS_SPAN));
            }
            centers.push((0.0, VAR_SPAN));
            centers.push((column_range(inputs, m).ln(), LS_SPAN));
            centers.push((var_c, VAR_SPAN));
            for j in 0..m {
                centers.push((column_range(inputs, j).ln(), LS_SPAN));
            }
        }
    }
    if free_noise {
        // noise may go far below the signal scale but not far above it
        centers.push((var_c - 11.5, 16.1)); // out_var * [1e-12, 1e2]
    }
    let lo = centers.iter().map(|(c, w)| c - w).collect();
    let hi = centers.iter().map(|(c, w)| c + w).collect();
    (lo, hi)
}

/// Fit a GP by maximizing the log marginal likelihood over `restarts`
/// randomized initializations; the best restart wins. Deterministic given
/// `cfg.seed`.
pub fn fit(
    inputs: &DMatrix<f64>,
    outputs: &DVector<f64>,
    family: KernelFamily,
    cfg: &FitConfig,
) -> Result<GpModel> {
    if inputs.nrows() == 0 || inputs.nrows() != outputs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} input rows vs {} outputs",
            inputs.nrows(),
            outputs.len()
        )));
    }
    if cfg.restarts == 0 {
        return Err(Error::InvalidArgument("fit needs at least one restart".into()));
    }
    if matches!(family, KernelFamily::Nargp) && inputs.ncols() < 2 {
        return Err(Error::DimensionMismatch(
            "augmented inputs need at least 2 columns".into(),
        ));
    }

    let n = inputs.nrows() as f64;
    let mean_y = outputs.iter().sum::<f64>() / n;
    let var_y = outputs.iter().map(|v| (v - mean_y).powi(2)).sum::<f64>() / n;
    let out_var = if var_y > 0.0 { var_y } else { 1.0 };

    let mut best: Option<(f64, KernelParams, f64)> = None; // (neg lml, kernel, noise)
    let mut failures: Vec<String> = Vec::new();

    for r in 0..cfg.restarts {
        let mut rng =
            ChaCha8Rng::seed_from_u64(child_seed_indexed(cfg.seed, stream::FIT_RESTART_BASE, r as u64));
        let kernel0 = initial_kernel(family, inputs, out_var, &mut rng);
        let free_noise = matches!(cfg.noise, NoisePolicy::Free);
        let noise0 = if free_noise {
            let u: f64 = rng.random();
            out_var * 10f64.powf(-6.0 + 5.0 * u)
        } else {
            0.0
        };

        let mut z0 = kernel0.log_params();
        if free_noise {
            z0.push(noise0.ln());
        }
        let np = kernel0.n_hyper();
        let template = kernel0.clone();
        let (z_lo, z_hi) = log_param_box(family, inputs, out_var, free_noise);
        let objective = |z: &[f64]| -> Option<(f64, Vec<f64>)> {
            if z.iter()
                .zip(z_lo.iter().zip(&z_hi))
                .any(|(v, (lo, hi))| v < lo || v > hi)
            {
                return None;
            }
            let kernel = template.with_log_params(&z[..np]).ok()?;
            // exp() can underflow a variance to exactly zero; such points
            // are infeasible or the winning restart fails final validation
            kernel.validate().ok()?;
            let noise = if free_noise { z[np].exp() } else { 0.0 };
            neg_lml_with_grad(inputs, outputs, &kernel, noise, free_noise)
        };

        match lbfgs_minimize(&z0, cfg.max_iter, cfg.grad_tol, objective) {
            Some(res) => {
                let kernel = template.with_log_params(&res.x[..np])?;
                let noise = if free_noise { res.x[np].exp() } else { 0.0 };
                let better = match &best {
                    Some((bf, _, _)) => res.f < *bf,
                    None => true,
                };
                if better {
                    best = Some((res.f, kernel, noise));
                }
            }
            None => failures.push(format!("restart {r}: infeasible initialization")),
        }
    }

    match best {
        Some((_, kernel, noise)) => {
            GpModel::assemble(kernel, cfg.noise, noise, inputs.clone(), outputs.clone(), cfg.seed)
        }
        None => Err(Error::Numerical(format!(
            "all {} restarts failed: {}",
            cfg.restarts,
            failures.join("; ")
        ))),
    }
}

impl GpModel {
    /// Build a model from explicit parameters, computing the factors.
    pub fn assemble(
        kernel: KernelParams,
        noise_policy: NoisePolicy,
        noise_variance: f64,
        train_inputs: DMatrix<f64>,
        train_outputs: DVector<f64>,
        seed: u64,
    ) -> Result<GpModel> {
        kernel.validate()?;
        if noise_variance < 0.0 || !noise_variance.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be nonnegative, got {noise_variance}"
            )));
        }
        if train_inputs.ncols() != kernel.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "training inputs of dimension {} vs kernel dimension {}",
                train_inputs.ncols(),
                kernel.input_dim()
            )));
        }
        if train_inputs.nrows() != train_outputs.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} training rows vs {} outputs",
                train_inputs.nrows(),
                train_outputs.len()
            )));
        }
        let k = gram_prepared(&train_inputs, &kernel);
        let (chol, jitter) = cholesky_minimal_jitter(&k, noise_variance)?;
        let alpha = chol.solve(&train_outputs);
        let lml = lml_from_factors(&chol, &train_outputs, &alpha);
        let chol_l = chol.unpack();
        Ok(GpModel {
            kernel,
            noise_policy,
            noise_variance,
            train_inputs,
            train_outputs,
            seed,
            jitter,
            chol_l,
            alpha,
            lml,
        })
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn noise_policy(&self) -> NoisePolicy {
        self.noise_policy
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn train_inputs(&self) -> &DMatrix<f64> {
        &self.train_inputs
    }

    pub fn train_outputs(&self) -> &DVector<f64> {
        &self.train_outputs
    }

    pub fn chol_l(&self) -> &DMatrix<f64> {
        &self.chol_l
    }

    pub fn n_train(&self) -> usize {
        self.train_inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.train_inputs.ncols()
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    fn check_test_dims(&self, test_inputs: &DMatrix<f64>) -> Result<()> {
        if test_inputs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "test inputs of dimension {} vs model dimension {}",
                test_inputs.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Posterior mean and full covariance at the given points.
    pub fn predict(&self, test_inputs: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_test_dims(test_inputs)?;
        let ks = cross_gram(test_inputs, &self.train_inputs, &self.kernel);
        let mean = &ks * &self.alpha;
        let v = self
            .chol_l
            .solve_lower_triangular(&ks.transpose())
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let kss = gram_prepared(test_inputs, &self.kernel);
        let mut cov = kss - v.transpose() * &v;
        // Symmetrize away rounding skew.
        let covt = cov.transpose();
        cov = 0.5 * (cov + covt);
        Ok((mean, cov))
    }

    /// Posterior mean and per-point variance (no cross covariances).
    pub fn predict_diag(&self, test_inputs: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_test_dims(test_inputs)?;
        let ks = cross_gram(test_inputs, &self.train_inputs, &self.kernel);
        let mean = &ks * &self.alpha;
        let v = self
            .chol_l
            .solve_lower_triangular(&ks.transpose())
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let prior = self.kernel.prior_variance();
        // clamp away negative float residue; posterior variance is nonnegative
        let var = DVector::from_fn(test_inputs.nrows(), |t, _| {
            (prior - v.column(t).norm_squared()).max(0.0)
        });
        Ok((mean, var))
    }

    /// Draw joint posterior samples at the given points; deterministic in `seed`.
    pub fn sample_posterior(
        &self,
        test_inputs: &DMatrix<f64>,
        n_samples: usize,
        seed: u64,
    ) -> Result<DMatrix<f64>> {
        let (mean, cov) = self.predict(test_inputs)?;
        let t = mean.len();
        let mean_diag = cov.diagonal().iter().map(|v| v.abs()).sum::<f64>() / t as f64;
        let l = if mean_diag == 0.0 {
            DMatrix::zeros(t, t)
        } else {
            let (chol, _) = cholesky_with_jitter(&cov, 0.0)?;
            chol.unpack()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, stream::POSTERIOR_SAMPLE));
        let mut out = DMatrix::zeros(n_samples, t);
        for s in 0..n_samples {
            let z = DVector::from_fn(t, |_, _| StandardNormal.sample(&mut rng));
            let draw = &mean + &l * z;
            out.row_mut(s).copy_from(&draw.transpose());
        }
        Ok(out)
    }

    pub fn to_doc(&self) -> GpModelDoc {
        GpModelDoc {
            kernel: self.kernel.clone(),
            noise_policy: self.noise_policy,
            noise_variance: self.noise_variance,
            inputs: (0..self.train_inputs.nrows())
                .map(|i| self.train_inputs.row(i).iter().copied().collect())
                .collect(),
            outputs: self.train_outputs.iter().copied().collect(),
            seed: self.seed,
        }
    }

    pub fn from_doc(doc: GpModelDoc) -> Result<GpModel> {
        let n = doc.inputs.len();
        if n == 0 {
            return Err(Error::InvalidArgument("model document has no training data".into()));
        }
        let d = doc.inputs[0].len();
        if doc.inputs.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch(
                "ragged training input rows in model document".into(),
            ));
        }
        let flat: Vec<f64> = doc.inputs.iter().flatten().copied().collect();
        GpModel::assemble(
            doc.kernel,
            doc.noise_policy,
            doc.noise_variance,
            DMatrix::from_row_slice(n, d, &flat),
            DVector::from_vec(doc.outputs),
            doc.seed,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(s: &str) -> Result<GpModel> {
        GpModel::from_doc(serde_json::from_str(s)?)
    }
}

/// Serialized form of a fitted GP: everything needed for bit-reproducible
/// re-prediction (factors are recomputed on load).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModelDoc {
    pub kernel: KernelParams,
    pub noise_policy: NoisePolicy,
    pub noise_variance: f64,
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rbf(variance: f64, ls: &[f64]) -> KernelParams {
        KernelParams::RbfArd(RbfArdParams::new(variance, ls.to_vec()).unwrap())
    }

    #[test]
    fn lml_single_zero_observation() {
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let y = DVector::from_row_slice(&[0.0]);
        let lml = log_marginal_likelihood(&x, &y, &rbf(1.0, &[1.0]), 0.0).unwrap();
        assert_relative_eq!(lml, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-7);
    }

    #[test]
    fn lml_single_observation_value_two() {
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let y = DVector::from_row_slice(&[2.0]);
        let lml = log_marginal_likelihood(&x, &y, &rbf(1.0, &[1.0]), 0.0).unwrap();
        assert_relative_eq!(lml, -2.9189385332046727, epsilon = 1e-6);
    }

    #[test]
    fn lml_matches_dense_inverse_two_points() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 0.7]);
        let y = DVector::from_row_slice(&[1.0, -0.5]);
        let kernel = rbf(1.3, &[0.9]);
        let noise = 0.05;
        let lml = log_marginal_likelihood(&x, &y, &kernel, noise).unwrap();

        let mut k = gram_prepared(&x, &kernel);
        let jitter = BASE_JITTER * (k[(0, 0)] + k[(1, 1)]) / 2.0;
        k[(0, 0)] += noise + jitter;
        k[(1, 1)] += noise + jitter;
        let det = k[(0, 0)] * k[(1, 1)] - k[(0, 1)] * k[(1, 0)];
        let kinv = DMatrix::from_row_slice(
            2,
            2,
            &[k[(1, 1)] / det, -k[(0, 1)] / det, -k[(1, 0)] / det, k[(0, 0)] / det],
        );
        let quad = (y.transpose() * &kinv * &y)[(0, 0)];
        let want = -0.5 * quad - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(lml, want, epsilon = 1e-10);
    }

    #[test]
    fn predict_matches_brute_force_two_points() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let y = DVector::from_row_slice(&[0.3, -0.6]);
        let kernel = rbf(0.8, &[0.6]);
        let model = GpModel::assemble(
            kernel.clone(),
            NoisePolicy::FixedZero,
            0.0,
            x.clone(),
            y.clone(),
            0,
        )
        .unwrap();
        let xt = DMatrix::from_row_slice(1, 1, &[0.4]);
        let (mean, cov) = model.predict(&xt).unwrap();

        let mut k = gram_prepared(&x, &kernel);
        let jitter = model.jitter();
        k[(0, 0)] += jitter;
        k[(1, 1)] += jitter;
        let kinv = k.try_inverse().unwrap();
        let ks = cross_gram(&xt, &x, &kernel);
        let want_mean = (&ks * &kinv * &y)[0];
        let kss = gram_prepared(&xt, &kernel);
        let want_cov = (kss - &ks * kinv * ks.transpose())[(0, 0)];
        assert_relative_eq!(mean[0], want_mean, epsilon = 1e-12);
        assert_relative_eq!(cov[(0, 0)], want_cov, epsilon = 1e-12);
    }

    #[test]
    fn predict_reverts_to_prior_far_away() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.1, 0.2]);
        let y = DVector::from_row_slice(&[1.0, 1.1, 0.9]);
        let model =
            GpModel::assemble(rbf(1.7, &[0.5]), NoisePolicy::FixedZero, 0.0, x, y, 0).unwrap();
        let far = DMatrix::from_row_slice(1, 1, &[100.0]);
        let (mean, cov) = model.predict(&far).unwrap();
        assert!(mean[0].abs() < 1e-8);
        assert_relative_eq!(cov[(0, 0)], 1.7, epsilon = 1e-8);
    }

    #[test]
    fn noiseless_interpolation_at_training_points() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 0.3, 0.6, 1.0]);
        let y = DVector::from_row_slice(&[0.0, 0.5, -0.2, 0.8]);
        let model = GpModel::assemble(
            rbf(1.0, &[0.4]),
            NoisePolicy::FixedZero,
            0.0,
            x.clone(),
            y.clone(),
            0,
        )
        .unwrap();
        let (mean, var) = model.predict_diag(&x).unwrap();
        for i in 0..4 {
            assert!((mean[i] - y[i]).abs() < 1e-6, "mean[{i}] = {}", mean[i]);
            assert!(var[i].abs() < 1e-6);
        }
    }

    #[test]
    fn factor_reconstructs_regularized_gram() {
        let x = DMatrix::from_row_slice(5, 2, &[0.0, 0.0, 0.2, 0.8, 0.4, 0.3, 0.9, 0.1, 0.6, 0.7]);
        let y = DVector::from_row_slice(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let kernel = rbf(2.0, &[0.5, 0.9]);
        let model =
            GpModel::assemble(kernel.clone(), NoisePolicy::FixedZero, 0.0, x.clone(), y, 0)
                .unwrap();
        let mut want = gram_prepared(&x, &kernel);
        for i in 0..5 {
            want[(i, i)] += model.jitter();
        }
        let got = model.chol_l() * model.chol_l().transpose();
        let rel = (got - &want).norm() / want.norm();
        assert!(rel <= 1e-10, "relative error {rel}");
    }

    #[test]
    fn fit_constant_outputs() {
        let x = DMatrix::from_row_slice(6, 1, &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        let c = 5.0;
        let y = DVector::from_element(6, c);
        let model = fit(&x, &y, KernelFamily::RbfArd, &FitConfig::default()).unwrap();
        let xt = DMatrix::from_row_slice(3, 1, &[0.1, 0.5, 0.93]);
        let (mean, _) = model.predict_diag(&xt).unwrap();
        for v in mean.iter() {
            assert!((v - c).abs() < 1e-3 * c.abs(), "mean {v}");
        }
    }

    #[test]
    fn fit_interpolates_sine() {
        let n = 20;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64);
        let y = DVector::from_fn(n, |i, _| (2.0 * std::f64::consts::PI * x[(i, 0)]).sin());
        let cfg = FitConfig {
            restarts: 5,
            seed: 11,
            ..FitConfig::default()
        };
        let model = fit(&x, &y, KernelFamily::RbfArd, &cfg).unwrap();
        let (mean, _) = model.predict_diag(&x).unwrap();
        let err = (0..n).map(|i| (mean[i] - y[i]).abs()).fold(0.0f64, f64::max);
        assert!(err < 1e-6, "max training-point error {err}");
    }

    #[test]
    fn fit_seed_stability() {
        let n = 15;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64);
        let y = DVector::from_fn(n, |i, _| (3.0 * x[(i, 0)]).sin() + 0.5 * x[(i, 0)]);
        let m1 = fit(
            &x,
            &y,
            KernelFamily::RbfArd,
            &FitConfig {
                restarts: 6,
                seed: 1,
                ..FitConfig::default()
            },
        )
        .unwrap();
        let m2 = fit(
            &x,
            &y,
            KernelFamily::RbfArd,
            &FitConfig {
                restarts: 6,
                seed: 2,
                ..FitConfig::default()
            },
        )
        .unwrap();
        let (a, b) = (m1.log_marginal_likelihood(), m2.log_marginal_likelihood());
        assert!(
            (a - b).abs() < 0.01 * a.abs().max(b.abs()).max(1.0),
            "lml {a} vs {b}"
        );
    }

    #[test]
    fn fit_monotone_in_restarts() {
        let n = 12;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64);
        let y = DVector::from_fn(n, |i, _| (5.0 * x[(i, 0)]).cos());
        let mut prev = f64::NEG_INFINITY;
        for r in [1usize, 3, 6] {
            let m = fit(
                &x,
                &y,
                KernelFamily::RbfArd,
                &FitConfig {
                    restarts: r,
                    seed: 9,
                    ..FitConfig::default()
                },
            )
            .unwrap();
            let lml = m.log_marginal_likelihood();
            assert!(lml >= prev - 1e-9, "restarts {r}: {lml} < {prev}");
            prev = lml;
        }
    }

    #[test]
    fn sample_posterior_statistics_and_determinism() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.0]);
        let y = DVector::from_row_slice(&[0.0, 1.0, 0.0]);
        let model = GpModel::assemble(rbf(1.0, &[0.3]), NoisePolicy::FixedZero, 0.0, x, y, 0).unwrap();
        let xt = DMatrix::from_row_slice(1, 1, &[0.25]);
        let (mean, cov) = model.predict(&xt).unwrap();
        let draws = model.sample_posterior(&xt, 100_000, 7).unwrap();
        let m = draws.column(0).iter().sum::<f64>() / 100_000.0;
        let v = draws.column(0).iter().map(|s| (s - m) * (s - m)).sum::<f64>() / 100_000.0;
        let se = (cov[(0, 0)] / 100_000.0).sqrt();
        assert!((m - mean[0]).abs() < 4.0 * se, "mean {m} vs {}", mean[0]);
        assert!((v - cov[(0, 0)]).abs() < 0.05 * cov[(0, 0)], "var {v} vs {}", cov[(0, 0)]);
        let again = model.sample_posterior(&xt, 100_000, 7).unwrap();
        assert_eq!(draws, again);
    }

    #[test]
    fn sample_posterior_degenerate_gives_means() {
        // Test point equals the lone training point: variance collapses to ~0.
        let x = DMatrix::from_row_slice(1, 1, &[0.5]);
        let y = DVector::from_row_slice(&[2.0]);
        let model =
            GpModel::assemble(rbf(1.0, &[1.0]), NoisePolicy::FixedZero, 0.0, x.clone(), y, 0)
                .unwrap();
        let draws = model.sample_posterior(&x, 10, 3).unwrap();
        for v in draws.iter() {
            assert!((v - 2.0).abs() < 1e-3);
        }
    }

    #[test]
    fn json_round_trip_re_predicts_identically() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.5, 0.1, 0.2, 0.9, 0.8, 0.7]);
        let y = DVector::from_row_slice(&[1.0, -1.0, 0.5, 0.25]);
        let model = fit(
            &x,
            &y,
            KernelFamily::RbfArd,
            &FitConfig {
                restarts: 2,
                seed: 5,
                ..FitConfig::default()
            },
        )
        .unwrap();
        let json = model.to_json().unwrap();
        let back = GpModel::from_json(&json).unwrap();
        let xt = DMatrix::from_row_slice(2, 2, &[0.3, 0.3, 0.6, 0.6]);
        let (m1, v1) = model.predict_diag(&xt).unwrap();
        let (m2, v2) = back.predict_diag(&xt).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(v1, v2);
    }

    #[test]
    fn free_noise_recovers_noise_scale() {
        let n = 30;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let sigma = 0.05;
        let y = DVector::from_fn(n, |i, _| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            (2.0 * std::f64::consts::PI * x[(i, 0)]).sin() + sigma * noise
        });
        let model = fit(
            &x,
            &y,
            KernelFamily::RbfArd,
            &FitConfig {
                restarts: 6,
                noise: NoisePolicy::Free,
                seed: 3,
                ..FitConfig::default()
            },
        )
        .unwrap();
        let s2 = model.noise_variance();
        assert!(s2 > 1e-5 && s2 < 0.05, "estimated noise variance {s2}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn lml_gradient_matches_finite_differences(
            seed in 0u64..1000,
            n in 3usize..12,
            noise_free in proptest::bool::ANY,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let y = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let kernel = rbf(
                0.5 + rng.random::<f64>(),
                &[0.5 + rng.random::<f64>(), 0.5 + rng.random::<f64>()],
            );
            let noise = if noise_free { 0.01 + 0.05 * rng.random::<f64>() } else { 0.0 };
            let (f0, grad) =
                neg_lml_with_grad(&x, &y, &kernel, noise, noise_free).unwrap();
            prop_assert!(f0.is_finite());
            let z0 = {
                let mut z = kernel.log_params();
                if noise_free { z.push(noise.ln()); }
                z
            };
            // Five-point stencil: truncation O(h^4) keeps the check tight
            // even where the likelihood surface has strong curvature.
            let h = 1e-4;
            for i in 0..z0.len() {
                let np = kernel.n_hyper();
                let eval = |shift: f64| {
                    let mut z = z0.clone();
                    z[i] += shift;
                    let k = kernel.with_log_params(&z[..np]).unwrap();
                    let nv = if noise_free { z[np].exp() } else { 0.0 };
                    neg_lml_with_grad(&x, &y, &k, nv, noise_free).unwrap().0
                };
                let fd = (eval(-2.0 * h) - 8.0 * eval(-h) + 8.0 * eval(h) - eval(2.0 * h))
                    / (12.0 * h);
                let scale = fd.abs().max(grad[i].abs()).max(1e-8);
                prop_assert!(
                    (fd - grad[i]).abs() / scale < 1e-4,
                    "param {}: analytic {} vs fd {}", i, grad[i], fd
                );
            }
        }

        #[test]
        fn posterior_variance_below_prior(
            seed in 0u64..500,
            n in 2usize..10,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
            let y = DVector::from_fn(n, |_, _| rng.random::<f64>());
            let kernel = rbf(0.5 + rng.random::<f64>(), &[0.2 + rng.random::<f64>()]);
            let prior = kernel.prior_variance();
            let model = GpModel::assemble(kernel, NoisePolicy::FixedZero, 0.0, x, y, 0).unwrap();
            let xt = DMatrix::from_fn(7, 1, |_, _| rng.random::<f64>() * 3.0 - 1.0);
            let (_, var) = model.predict_diag(&xt).unwrap();
            for v in var.iter() {
                prop_assert!(*v <= prior + 1e-8, "variance {} above prior {}", v, prior);
            }
        }
    }
}
