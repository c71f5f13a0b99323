//! Covariance functions: RBF with automatic relevance determination, and the
//! autoregressive composite kernel used on augmented inputs (x, f_prev(x)).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RBF-ARD hyperparameters: k(a,b) = variance * exp(-1/2 sum_j ((a_j-b_j)/l_j)^2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfArdParams {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

impl RbfArdParams {
    pub fn new(variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let p = RbfArdParams {
            variance,
            lengthscales,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance.is_finite() && self.variance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kernel variance must be positive, got {}",
                self.variance
            )));
        }
        if self.lengthscales.is_empty() {
            return Err(Error::InvalidArgument("kernel needs lengthscales".into()));
        }
        for l in &self.lengthscales {
            if !(l.is_finite() && *l > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "lengthscales must be positive, got {l}"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    #[inline]
    fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for j in 0..self.lengthscales.len() {
            let d = (a[j] - b[j]) / self.lengthscales[j];
            s += d * d;
        }
        self.variance * (-0.5 * s).exp()
    }
}

/// Composite kernel for autoregressive levels:
/// k((x,fa),(x',fb)) = rho(x,x') * f(fa,fb) + delta(x,x').
/// `rho` and `delta` carry one lengthscale per spatial coordinate, `f` exactly one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NargpKernelParams {
    pub rho: RbfArdParams,
    pub f: RbfArdParams,
    pub delta: RbfArdParams,
}

impl NargpKernelParams {
    pub fn new(rho: RbfArdParams, f: RbfArdParams, delta: RbfArdParams) -> Result<Self> {
        let p = NargpKernelParams { rho, f, delta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.rho.validate()?;
        self.f.validate()?;
        self.delta.validate()?;
        if self.f.dim() != 1 {
            return Err(Error::InvalidArgument(format!(
                "f factor must have exactly 1 lengthscale, got {}",
                self.f.dim()
            )));
        }
        if self.rho.dim() != self.delta.dim() {
            return Err(Error::InvalidArgument(format!(
                "rho and delta must share the spatial dimension, got {} and {}",
                self.rho.dim(),
                self.delta.dim()
            )));
        }
        Ok(())
    }

    /// Spatial dimension m (augmented inputs have m+1 coordinates).
    pub fn spatial_dim(&self) -> usize {
        self.rho.dim()
    }
}

/// Evaluate the ARD RBF kernel.
pub fn rbf_ard(a: &[f64], b: &[f64], params: &RbfArdParams) -> Result<f64> {
    params.validate()?;
    if a.len() != params.dim() || b.len() != params.dim() {
        return Err(Error::DimensionMismatch(format!(
            "points of dimension {} and {} vs {} lengthscales",
            a.len(),
            b.len(),
            params.dim()
        )));
    }
    Ok(params.eval_unchecked(a, b))
}

/// Evaluate the composite autoregressive kernel at spatial points a, b with
/// previous-level values fa, fb.
pub fn nargp_kernel(
    a: &[f64],
    fa: f64,
    b: &[f64],
    fb: f64,
    params: &NargpKernelParams,
) -> Result<f64> {
    params.validate()?;
    let m = params.spatial_dim();
    if a.len() != m || b.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "points of dimension {} and {} vs spatial dimension {m}",
            a.len(),
            b.len()
        )));
    }
    if !(fa.is_finite() && fb.is_finite()) {
        return Err(Error::InvalidArgument(
            "previous-level values must be finite".into(),
        ));
    }
    let kr = params.rho.eval_unchecked(a, b);
    let kf = params.f.eval_unchecked(&[fa], &[fb]);
    let kd = params.delta.eval_unchecked(a, b);
    Ok(kr * kf + kd)
}

/// Either kernel, as stored in a fitted model. Points fed to `eval` carry the
/// full input dimension (`m` for RBF-ARD, `m+1` for the composite kernel,
/// whose last coordinate is the previous-level value).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum KernelParams {
    RbfArd(RbfArdParams),
    Nargp(NargpKernelParams),
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelParams::RbfArd(p) => p.validate(),
            KernelParams::Nargp(p) => p.validate(),
        }
    }

    /// Dimension of the points this kernel evaluates on.
    pub fn input_dim(&self) -> usize {
        match self {
            KernelParams::RbfArd(p) => p.dim(),
            KernelParams::Nargp(p) => p.spatial_dim() + 1,
        }
    }

    /// Number of hyperparameters exposed to the optimizer.
    pub fn n_hyper(&self) -> usize {
        match self {
            KernelParams::RbfArd(p) => 1 + p.dim(),
            KernelParams::Nargp(p) => (1 + p.rho.dim()) + 2 + (1 + p.delta.dim()),
        }
    }

    /// Hyperparameters in canonical order, log-transformed.
    /// RBF-ARD: [variance, ls...]; composite: [rho.var, rho.ls..., f.var, f.ls, delta.var, delta.ls...].
    pub fn log_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_hyper());
        match self {
            KernelParams::RbfArd(p) => {
                out.push(p.variance.ln());
                out.extend(p.lengthscales.iter().map(|l| l.ln()));
            }
            KernelParams::Nargp(p) => {
                out.push(p.rho.variance.ln());
                out.extend(p.rho.lengthscales.iter().map(|l| l.ln()));
                out.push(p.f.variance.ln());
                out.push(p.f.lengthscales[0].ln());
                out.push(p.delta.variance.ln());
                out.extend(p.delta.lengthscales.iter().map(|l| l.ln()));
            }
        }
        out
    }

    /// Rebuild from the canonical log-parameter vector.
    pub fn with_log_params(&self, z: &[f64]) -> Result<KernelParams> {
        if z.len() != self.n_hyper() {
            return Err(Error::DimensionMismatch(format!(
                "{} log-parameters vs {} hyperparameters",
                z.len(),
                self.n_hyper()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite log-parameter".into()));
        }
        let e = |v: f64| v.exp();
        Ok(match self {
            KernelParams::RbfArd(p) => KernelParams::RbfArd(RbfArdParams {
                variance: e(z[0]),
                lengthscales: z[1..1 + p.dim()].iter().map(|v| e(*v)).collect(),
            }),
            KernelParams::Nargp(p) => {
                let m = p.spatial_dim();
                KernelParams::Nargp(NargpKernelParams {
                    rho: RbfArdParams {
                        variance: e(z[0]),
                        lengthscales: z[1..1 + m].iter().map(|v| e(*v)).collect(),
                    },
                    f: RbfArdParams {
                        variance: e(z[1 + m]),
                        lengthscales: vec![e(z[2 + m])],
                    },
                    delta: RbfArdParams {
                        variance: e(z[3 + m]),
                        lengthscales: z[4 + m..4 + 2 * m].iter().map(|v| e(*v)).collect(),
                    },
                })
            }
        })
    }

    /// Kernel value for two full-dimension points.
    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), self.input_dim());
        debug_assert_eq!(b.len(), self.input_dim());
        match self {
            KernelParams::RbfArd(p) => p.eval_unchecked(a, b),
            KernelParams::Nargp(p) => {
                let m = p.spatial_dim();
                let kr = p.rho.eval_unchecked(&a[..m], &b[..m]);
                let kf = p.f.eval_unchecked(&a[m..], &b[m..]);
                let kd = p.delta.eval_unchecked(&a[..m], &b[..m]);
                kr * kf + kd
            }
        }
    }

    /// Kernel value plus the gradient with respect to each log-hyperparameter
    /// (canonical order); `grad` must have length `n_hyper()`.
    pub fn eval_grad(&self, a: &[f64], b: &[f64], grad: &mut [f64]) -> f64 {
        debug_assert_eq!(grad.len(), self.n_hyper());
        match self {
            KernelParams::RbfArd(p) => {
                let k = p.eval_unchecked(a, b);
                grad[0] = k;
                for j in 0..p.dim() {
                    let d = (a[j] - b[j]) / p.lengthscales[j];
                    grad[1 + j] = k * d * d;
                }
                k
            }
            KernelParams::Nargp(p) => {
                let m = p.spatial_dim();
                let kr = p.rho.eval_unchecked(&a[..m], &b[..m]);
                let kf = p.f.eval_unchecked(&a[m..], &b[m..]);
                let kd = p.delta.eval_unchecked(&a[..m], &b[..m]);
                let krf = kr * kf;
                grad[0] = krf;
                for j in 0..m {
                    let d = (a[j] - b[j]) / p.rho.lengthscales[j];
                    grad[1 + j] = krf * d * d;
                }
                grad[1 + m] = krf;
                let df = (a[m] - b[m]) / p.f.lengthscales[0];
                grad[2 + m] = krf * df * df;
                grad[3 + m] = kd;
                for j in 0..m {
                    let d = (a[j] - b[j]) / p.delta.lengthscales[j];
                    grad[4 + m + j] = kd * d * d;
                }
                krf + kd
            }
        }
    }

    /// Prior variance at a point (kernel value at zero distance).
    pub fn prior_variance(&self) -> f64 {
        match self {
            KernelParams::RbfArd(p) => p.variance,
            KernelParams::Nargp(p) => p.rho.variance * p.f.variance + p.delta.variance,
        }
    }
}

/// Pairwise kernel matrix over rows of `points`. For the composite kernel
/// `fvals` supplies the previous-level value per row; for RBF-ARD it must be
/// absent.
pub fn gram(
    points: &DMatrix<f64>,
    fvals: Option<&DVector<f64>>,
    params: &KernelParams,
) -> Result<DMatrix<f64>> {
    params.validate()?;
    let aug = augment_points(points, fvals, params)?;
    Ok(gram_prepared(&aug, params))
}

/// Stack `fvals` as a trailing column when the kernel expects augmented points.
pub fn augment_points(
    points: &DMatrix<f64>,
    fvals: Option<&DVector<f64>>,
    params: &KernelParams,
) -> Result<DMatrix<f64>> {
    match (params, fvals) {
        (KernelParams::RbfArd(p), None) => {
            if points.ncols() != p.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "points of dimension {} vs kernel dimension {}",
                    points.ncols(),
                    p.dim()
                )));
            }
            Ok(points.clone())
        }
        (KernelParams::RbfArd(_), Some(_)) => Err(Error::InvalidArgument(
            "previous-level values only apply to the composite kernel".into(),
        )),
        (KernelParams::Nargp(p), Some(f)) => {
            if points.ncols() != p.spatial_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "points of dimension {} vs spatial dimension {}",
                    points.ncols(),
                    p.spatial_dim()
                )));
            }
            append_column(points, f)
        }
        (KernelParams::Nargp(_), None) => Err(Error::InvalidArgument(
            "the composite kernel requires previous-level values".into(),
        )),
    }
}

/// Append previous-level values as a trailing input column.
pub fn append_column(points: &DMatrix<f64>, fvals: &DVector<f64>) -> Result<DMatrix<f64>> {
    if fvals.len() != points.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} previous-level values vs {} points",
            fvals.len(),
            points.nrows()
        )));
    }
    let mut aug = DMatrix::zeros(points.nrows(), points.ncols() + 1);
    aug.view_mut((0, 0), points.shape()).copy_from(points);
    aug.column_mut(points.ncols()).copy_from(fvals);
    Ok(aug)
}

/// Gram matrix over rows already carrying the kernel's full input dimension.
pub fn gram_prepared(points: &DMatrix<f64>, params: &KernelParams) -> DMatrix<f64> {
    let n = points.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| points.row(i).iter().copied().collect())
        .collect();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = params.eval(&rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cross-kernel matrix between rows of `a` (T) and rows of `b` (N), both in
/// full input dimension.
pub fn cross_gram(a: &DMatrix<f64>, b: &DMatrix<f64>, params: &KernelParams) -> DMatrix<f64> {
    let t = a.nrows();
    let n = b.nrows();
    let arows: Vec<Vec<f64>> = (0..t).map(|i| a.row(i).iter().copied().collect()).collect();
    let brows: Vec<Vec<f64>> = (0..n).map(|i| b.row(i).iter().copied().collect()).collect();
    let mut k = DMatrix::zeros(t, n);
    for i in 0..t {
        for j in 0..n {
            k[(i, j)] = params.eval(&arows[i], &brows[j]);
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn rbf_zero_distance_returns_variance() {
        let p = RbfArdParams::new(2.5, vec![0.7, 1.3]).unwrap();
        let v = rbf_ard(&[0.4, -1.0], &[0.4, -1.0], &p).unwrap();
        assert_eq!(v, 2.5);
    }

    #[test]
    fn rbf_unit_case() {
        let p = RbfArdParams::new(1.0, vec![1.0]).unwrap();
        let v = rbf_ard(&[0.0], &[1.0], &p).unwrap();
        assert_relative_eq!(v, 0.6065306597126334, max_relative = 1e-15);
    }

    #[test]
    fn rbf_ard_two_coordinates() {
        let p = RbfArdParams::new(1.0, vec![1.0, 2.0]).unwrap();
        let v = rbf_ard(&[0.0, 0.0], &[1.0, 2.0], &p).unwrap();
        assert_relative_eq!(v, 0.36787944117144233, max_relative = 1e-15);
    }

    #[test]
    fn rbf_rejects_bad_params() {
        assert!(RbfArdParams::new(0.0, vec![1.0]).is_err());
        assert!(RbfArdParams::new(1.0, vec![-1.0]).is_err());
        let p = RbfArdParams::new(1.0, vec![1.0]).unwrap();
        assert!(rbf_ard(&[0.0, 1.0], &[0.0], &p).is_err());
    }

    fn unit_nargp(m: usize) -> NargpKernelParams {
        NargpKernelParams::new(
            RbfArdParams::new(1.0, vec![1.0; m]).unwrap(),
            RbfArdParams::new(1.0, vec![1.0]).unwrap(),
            RbfArdParams::new(1.0, vec![1.0; m]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn nargp_zero_distance_sums_factors() {
        let p = unit_nargp(2);
        let v = nargp_kernel(&[0.3, 0.4], 1.2, &[0.3, 0.4], 1.2, &p).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn nargp_vanishing_rho_leaves_delta() {
        let mut p = unit_nargp(1);
        p.rho.variance = 1e-300;
        let v = nargp_kernel(&[0.0], 0.0, &[1.0], 1.0, &p).unwrap();
        let d = rbf_ard(&[0.0], &[1.0], &p.delta).unwrap();
        assert_relative_eq!(v, d, max_relative = 1e-12);
    }

    #[test]
    fn nargp_hand_case() {
        let p = unit_nargp(1);
        let v = nargp_kernel(&[0.0], 0.0, &[1.0], 1.0, &p).unwrap();
        let e = (-0.5f64).exp();
        assert_relative_eq!(v, e * e + e, max_relative = 1e-15);
    }

    #[test]
    fn gram_single_point_is_variance() {
        let p = KernelParams::RbfArd(RbfArdParams::new(3.0, vec![1.0]).unwrap());
        let pts = DMatrix::from_row_slice(1, 1, &[0.2]);
        let k = gram(&pts, None, &p).unwrap();
        assert_eq!(k[(0, 0)], 3.0);
    }

    #[test]
    fn gram_duplicate_points_rank_one() {
        let p = KernelParams::RbfArd(RbfArdParams::new(2.0, vec![1.0]).unwrap());
        let pts = DMatrix::from_row_slice(2, 1, &[0.5, 0.5]);
        let k = gram(&pts, None, &p).unwrap();
        for v in k.iter() {
            assert_eq!(*v, 2.0);
        }
    }

    #[test]
    fn gram_matches_entrywise_loop() {
        let p = KernelParams::Nargp(unit_nargp(2));
        let pts = DMatrix::from_row_slice(3, 2, &[0.0, 0.1, 0.5, -0.2, 0.9, 0.4]);
        let f = DVector::from_row_slice(&[1.0, 2.0, -0.5]);
        let k = gram(&pts, Some(&f), &p).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let a: Vec<f64> = pts.row(i).iter().copied().collect();
                let b: Vec<f64> = pts.row(j).iter().copied().collect();
                let want = nargp_kernel(&a, f[i], &b, f[j], p_inner(&p)).unwrap();
                assert_relative_eq!(k[(i, j)], want, max_relative = 1e-15);
            }
        }
        fn p_inner(p: &KernelParams) -> &NargpKernelParams {
            match p {
                KernelParams::Nargp(q) => q,
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn gram_fvals_requirements() {
        let rbf = KernelParams::RbfArd(RbfArdParams::new(1.0, vec![1.0]).unwrap());
        let nargp = KernelParams::Nargp(unit_nargp(1));
        let pts = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let f = DVector::from_row_slice(&[0.0, 1.0]);
        assert!(gram(&pts, Some(&f), &rbf).is_err());
        assert!(gram(&pts, None, &nargp).is_err());
        assert!(gram(&pts, Some(&f), &nargp).is_ok());
    }

    #[test]
    fn log_param_round_trip() {
        let p = KernelParams::Nargp(
            NargpKernelParams::new(
                RbfArdParams::new(0.5, vec![1.5, 2.5]).unwrap(),
                RbfArdParams::new(2.0, vec![0.25]).unwrap(),
                RbfArdParams::new(0.125, vec![4.0, 8.0]).unwrap(),
            )
            .unwrap(),
        );
        let z = p.log_params();
        assert_eq!(z.len(), p.n_hyper());
        let q = p.with_log_params(&z).unwrap();
        // exp(ln(x)) is not bit-exact, so compare in log space
        for (zp, zq) in z.iter().zip(q.log_params()) {
            assert_relative_eq!(*zp, zq, epsilon = 1e-12);
        }
    }

    fn fd_check(params: &KernelParams, a: &[f64], b: &[f64]) {
        let n = params.n_hyper();
        let mut grad = vec![0.0; n];
        params.eval_grad(a, b, &mut grad);
        let z0 = params.log_params();
        let h = 3e-4;
        for i in 0..n {
            let eval = |shift: f64| {
                let mut z = z0.clone();
                z[i] += shift;
                params.with_log_params(&z).unwrap().eval(a, b)
            };
            let fd =
                (eval(-2.0 * h) - 8.0 * eval(-h) + 8.0 * eval(h) - eval(2.0 * h)) / (12.0 * h);
            let scale = fd.abs().max(grad[i].abs());
            // absolute floor covers cancellation noise in the stencil
            assert!(
                (fd - grad[i]).abs() < 1e-5 * scale + 1e-10,
                "param {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn gram_symmetric_and_psd(
            flat in proptest::collection::vec(-2.0f64..2.0, 2..40),
            var in 0.2f64..3.0,
            l1 in 0.3f64..3.0,
            l2 in 0.3f64..3.0,
        ) {
            let n = flat.len() / 2;
            prop_assume!(n >= 1);
            let pts = DMatrix::from_row_slice(n, 2, &flat[..2 * n]);
            let p = KernelParams::RbfArd(RbfArdParams::new(var, vec![l1, l2]).unwrap());
            let k = gram(&pts, None, &p).unwrap();
            prop_assert_eq!(&k, &k.transpose());
            let trace: f64 = k.diagonal().iter().sum();
            let eig = nalgebra::SymmetricEigen::new(k);
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(min >= -1e-8 * trace / n as f64, "min eigenvalue {min}");
        }

        #[test]
        fn ard_monotone_in_lengthscale(
            a in -2.0f64..2.0, b in -2.0f64..2.0,
            l in 0.2f64..2.0, bump in 0.01f64..3.0,
        ) {
            prop_assume!((a - b).abs() > 1e-9);
            let p1 = RbfArdParams::new(1.0, vec![l]).unwrap();
            let p2 = RbfArdParams::new(1.0, vec![l + bump]).unwrap();
            let v1 = rbf_ard(&[a], &[b], &p1).unwrap();
            let v2 = rbf_ard(&[a], &[b], &p2).unwrap();
            prop_assert!(v2 >= v1);
        }

        #[test]
        fn kernel_gradients_match_finite_differences(
            a1 in -1.5f64..1.5, a2 in -1.5f64..1.5, fa in -1.0f64..1.0,
            b1 in -1.5f64..1.5, b2 in -1.5f64..1.5, fb in -1.0f64..1.0,
            vr in 0.3f64..2.0, lr in 0.4f64..2.5,
            vf in 0.3f64..2.0, lf in 0.4f64..2.5,
            vd in 0.3f64..2.0, ld in 0.4f64..2.5,
        ) {
            let rbf = KernelParams::RbfArd(RbfArdParams::new(vr, vec![lr, ld]).unwrap());
            fd_check(&rbf, &[a1, a2], &[b1, b2]);
            let comp = KernelParams::Nargp(NargpKernelParams::new(
                RbfArdParams::new(vr, vec![lr, ld]).unwrap(),
                RbfArdParams::new(vf, vec![lf]).unwrap(),
                RbfArdParams::new(vd, vec![ld, lr]).unwrap(),
            ).unwrap());
            fd_check(&comp, &[a1, a2, fa], &[b1, b2, fb]);
        }
    }
}
