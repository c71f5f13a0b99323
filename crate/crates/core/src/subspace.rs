//! Linear dimension reduction from output gradients: eigendecomposition of
//! the gradient outer-product average, with a spectral-gap rank suggestion
//! and a nearest-neighbor gradient estimator for sample-only data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Average outer product of the gradient rows: (1/N) G^T G.
pub fn gradient_covariance(grads: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if grads.nrows() == 0 || grads.ncols() == 0 {
        return Err(Error::InvalidArgument("gradient matrix is empty".into()));
    }
    if grads.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("gradient matrix has non-finite entries".into()));
    }
    Ok(grads.transpose() * grads / grads.nrows() as f64)
}

/// Eigenstructure of a gradient covariance: eigenvalues descending and
/// clamped at zero, eigenvector columns sign-fixed so the entry of largest
/// magnitude (first on ties) is positive.
#[derive(Debug, Clone)]
pub struct ActiveSubspace {
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    suggested_rank: usize,
    degenerate: bool,
}

impl ActiveSubspace {
    pub fn from_gradients(grads: &DMatrix<f64>) -> Result<ActiveSubspace> {
        ActiveSubspace::from_covariance(&gradient_covariance(grads)?)
    }

    pub fn from_covariance(c: &DMatrix<f64>) -> Result<ActiveSubspace> {
        let m = c.nrows();
        if m == 0 || c.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "covariance must be square, got {}x{}",
                c.nrows(),
                c.ncols()
            )));
        }
        let scale = c.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if !scale.is_finite() {
            return Err(Error::InvalidArgument("covariance has non-finite entries".into()));
        }
        for i in 0..m {
            for j in 0..i {
                if (c[(i, j)] - c[(j, i)]).abs() > 1e-8 * scale.max(1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "covariance is not symmetric at ({i},{j})"
                    )));
                }
            }
        }

        let eig = SymmetricEigen::new(c.clone());
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });

        let lambda_max = order.first().map(|&i| eig.eigenvalues[i]).unwrap_or(0.0);
        let mut eigenvalues = Vec::with_capacity(m);
        let mut eigenvectors = DMatrix::zeros(m, m);
        for (slot, &idx) in order.iter().enumerate() {
            let lam = eig.eigenvalues[idx];
            if lam < -1e-8 * lambda_max.abs().max(1.0) {
                return Err(Error::Numerical(format!(
                    "covariance eigenvalue {lam} is negative beyond tolerance"
                )));
            }
            eigenvalues.push(lam.max(0.0));
            let mut col = eig.eigenvectors.column(idx).clone_owned();
            let mut pivot = 0;
            for i in 1..m {
                if col[i].abs() > col[pivot].abs() {
                    pivot = i;
                }
            }
            if col[pivot] < 0.0 {
                col.neg_mut();
            }
            eigenvectors.column_mut(slot).copy_from(&col);
        }

        let (suggested_rank, degenerate) = if m == 1 {
            (1, false)
        } else {
            let mut best_r = 1;
            let mut best_gap = eigenvalues[0] - eigenvalues[1];
            for r in 2..m {
                let gap = eigenvalues[r - 1] - eigenvalues[r];
                if gap > best_gap {
                    best_gap = gap;
                    best_r = r;
                }
            }
            (best_r, best_gap == 0.0)
        };

        Ok(ActiveSubspace {
            eigenvalues,
            eigenvectors,
            suggested_rank,
            degenerate,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Spectral-gap rank suggestion; `degenerate` reports a flat spectrum
    /// where the suggestion is arbitrary.
    pub fn suggested_rank(&self) -> usize {
        self.suggested_rank
    }

    pub fn degenerate(&self) -> bool {
        self.degenerate
    }

    /// Leading `rank` eigenvector columns as an m-by-rank projection.
    pub fn projection(&self, rank: usize) -> Result<DMatrix<f64>> {
        if rank == 0 || rank > self.dim() {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} outside 1..={}",
                self.dim()
            )));
        }
        Ok(self.eigenvectors.columns(0, rank).clone_owned())
    }

    /// Map full-space rows to reduced coordinates: X W.
    pub fn reduce(&self, inputs: &DMatrix<f64>, rank: usize) -> Result<DMatrix<f64>> {
        if inputs.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} input columns vs subspace dimension {}",
                inputs.ncols(),
                self.dim()
            )));
        }
        Ok(inputs * self.projection(rank)?)
    }

    /// Square roots of the eigenvalue mass captured by and left out of the
    /// leading `rank` directions.
    pub fn bound_terms(&self, rank: usize) -> Result<(f64, f64)> {
        if rank == 0 || rank > self.dim() {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} outside 1..={}",
                self.dim()
            )));
        }
        let head: f64 = self.eigenvalues[..rank].iter().sum();
        let tail: f64 = self.eigenvalues[rank..].iter().sum();
        Ok((head.sqrt(), tail.sqrt()))
    }
}

/// Estimate gradients at every sample by affine least squares over the
/// min(N, 2m+1) nearest neighbors of each point (the point itself included).
/// Needs at least m+1 samples and neighborhoods of full affine rank.
pub fn estimate_gradients(inputs: &DMatrix<f64>, outputs: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = inputs.nrows();
    let m = inputs.ncols();
    if outputs.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} input rows vs {} outputs",
            outputs.len()
        )));
    }
    if n < m + 1 {
        return Err(Error::InvalidArgument(format!(
            "gradient estimation needs at least {} samples for dimension {m}, got {n}",
            m + 1
        )));
    }
    let k = n.min(2 * m + 1);
    let mut grads = DMatrix::zeros(n, m);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dist.clear();
        for j in 0..n {
            let d2 = (inputs.row(j) - inputs.row(i)).norm_squared();
            dist.push((d2, j));
        }
        dist.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));

        let mut a = DMatrix::zeros(k, m + 1);
        let mut b = DVector::zeros(k);
        for (row, &(_, j)) in dist[..k].iter().enumerate() {
            a[(row, 0)] = 1.0;
            for c in 0..m {
                a[(row, c + 1)] = inputs[(j, c)] - inputs[(i, c)];
            }
            b[row] = outputs[j];
        }
        let svd = a.svd(true, true);
        let smax = svd.singular_values.iter().fold(0.0f64, |acc, s| acc.max(*s));
        let rank = svd
            .singular_values
            .iter()
            .filter(|s| **s > 1e-10 * smax.max(1.0))
            .count();
        if rank < m + 1 {
            return Err(Error::Numerical(format!(
                "neighborhood of sample {i} is rank-deficient (rank {rank} of {})",
                m + 1
            )));
        }
        let coef = svd
            .solve(&b, 1e-12 * smax.max(1.0))
            .map_err(|e| Error::Numerical(format!("least squares failed at sample {i}: {e}")))?;
        for c in 0..m {
            grads[(i, c)] = coef[c + 1];
        }
    }
    Ok(grads)
}
