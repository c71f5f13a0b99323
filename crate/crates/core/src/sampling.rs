//! Space-filling designs on the unit cube: Latin hypercube, Sobol, and
//! plain uniform draws, plus scaling to a bounding box.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Bounds;
use crate::error::{Error, Result};

/// Bit depth of the Sobol generator state; values are exact multiples of 2^-52.
const SOBOL_BITS: u32 = 52;
pub const SOBOL_MAX_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    #[default]
    Lhs,
    Sobol,
    Uniform,
}

impl std::str::FromStr for DesignKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<DesignKind> {
        match s {
            "lhs" => Ok(DesignKind::Lhs),
            "sobol" => Ok(DesignKind::Sobol),
            "uniform" => Ok(DesignKind::Uniform),
            other => Err(Error::InvalidArgument(format!(
                "unknown design kind {other:?} (expected lhs, sobol, or uniform)"
            ))),
        }
    }
}

/// Latin hypercube on [0,1)^dim: each coordinate is a random permutation of
/// the n strata with a uniform jitter inside each, so every 1/n-wide slab
/// holds exactly one point per coordinate.
pub fn lhs(n: usize, dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(n, dim);
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..dim {
        perm.sort_unstable();
        perm.shuffle(&mut rng);
        for (i, &stratum) in perm.iter().enumerate() {
            let u: f64 = rng.random();
            out[(i, j)] = (stratum as f64 + u) / n as f64;
        }
    }
    out
}

/// Uniform i.i.d. draws on [0,1)^dim.
pub fn uniform(n: usize, dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, dim, |_, _| rng.random())
}

// Primitive polynomials and initial direction numbers for dimensions 2..=32.
// Dimension 1 is the plain radical-inverse sequence and needs no table row.
#[rustfmt::skip]
const SOBOL_TABLE: [(u64, &[u64]); 31] = [
    (3, &[1]),
    (7, &[1, 3]),
    (11, &[1, 3, 1]),
    (13, &[1, 1, 1]),
    (19, &[1, 1, 3, 3]),
    (25, &[1, 3, 5, 13]),
    (37, &[1, 1, 5, 5, 17]),
    (41, &[1, 1, 5, 5, 5]),
    (47, &[1, 1, 7, 11, 19]),
    (55, &[1, 1, 5, 1, 1]),
    (59, &[1, 1, 1, 3, 11]),
    (61, &[1, 3, 5, 5, 31]),
    (67, &[1, 3, 3, 9, 7, 49]),
    (91, &[1, 1, 1, 15, 21, 21]),
    (97, &[1, 3, 1, 13, 27, 49]),
    (103, &[1, 1, 1, 15, 7, 5]),
    (109, &[1, 3, 1, 15, 13, 25]),
    (115, &[1, 1, 5, 5, 19, 61]),
    (131, &[1, 3, 7, 11, 23, 15, 103]),
    (137, &[1, 3, 7, 13, 13, 15, 69]),
    (143, &[1, 1, 3, 13, 7, 35, 63]),
    (145, &[1, 3, 5, 9, 1, 25, 53]),
    (157, &[1, 3, 1, 13, 9, 35, 107]),
    (167, &[1, 3, 1, 5, 27, 61, 31]),
    (171, &[1, 1, 5, 11, 19, 41, 61]),
    (185, &[1, 3, 5, 3, 3, 13, 69]),
    (191, &[1, 1, 7, 13, 1, 19, 1]),
    (193, &[1, 3, 7, 5, 13, 19, 59]),
    (203, &[1, 1, 3, 9, 25, 29, 41]),
    (211, &[1, 3, 5, 13, 23, 1, 55]),
    (213, &[1, 3, 7, 3, 13, 59, 17]),
];

fn sobol_directions(dim_index: usize) -> [u64; SOBOL_BITS as usize] {
    let mut v = [0u64; SOBOL_BITS as usize];
    if dim_index == 0 {
        for (k, vk) in v.iter_mut().enumerate() {
            *vk = 1 << (SOBOL_BITS - 1 - k as u32);
        }
        return v;
    }
    let (poly, m) = SOBOL_TABLE[dim_index - 1];
    let s = m.len();
    // poly = x^s + a_1 x^{s-1} + ... + a_{s-1} x + 1; strip the outer bits.
    let a_bits = (poly ^ (1 << s) ^ 1) >> 1;
    for k in 0..s {
        v[k] = m[k] << (SOBOL_BITS - 1 - k as u32);
    }
    for k in s..SOBOL_BITS as usize {
        v[k] = v[k - s] ^ (v[k - s] >> s);
        for i in 1..s {
            if (a_bits >> (s - 1 - i)) & 1 == 1 {
                v[k] ^= v[k - i];
            }
        }
    }
    v
}

/// Sobol sequence on [0,1)^dim in Gray-code order, starting `skip` indices in.
/// The default skip of 1 drops the all-zeros point. Supports up to
/// `SOBOL_MAX_DIM` dimensions.
pub fn sobol(n: usize, dim: usize, skip: u64) -> Result<DMatrix<f64>> {
    if dim == 0 || dim > SOBOL_MAX_DIM {
        return Err(Error::InvalidArgument(format!(
            "sobol supports 1..={SOBOL_MAX_DIM} dimensions, got {dim}"
        )));
    }
    if skip.saturating_add(n as u64) >= 1 << SOBOL_BITS {
        return Err(Error::InvalidArgument(format!(
            "sobol index space exhausted at skip {skip} + n {n}"
        )));
    }
    let dirs: Vec<[u64; SOBOL_BITS as usize]> = (0..dim).map(sobol_directions).collect();
    let scale = (SOBOL_BITS as f64).exp2().recip();
    let mut state = vec![0u64; dim];
    let mut out = DMatrix::zeros(n, dim);
    let mut emitted = 0usize;
    let mut i: u64 = 0;
    while emitted < n {
        if i >= skip {
            for j in 0..dim {
                out[(emitted, j)] = state[j] as f64 * scale;
            }
            emitted += 1;
            if emitted == n {
                break;
            }
        }
        // Gray-code step: flip the direction of the lowest zero bit of i.
        let c = (!i).trailing_zeros() as usize;
        for (sj, dj) in state.iter_mut().zip(&dirs) {
            *sj ^= dj[c];
        }
        i += 1;
    }
    Ok(out)
}

/// Affinely map unit-cube points into `bounds`.
pub fn scale_to_bounds(unit: &DMatrix<f64>, bounds: &Bounds) -> Result<DMatrix<f64>> {
    if unit.ncols() != bounds.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} point columns vs {} bound dimensions",
            unit.ncols(),
            bounds.dim()
        )));
    }
    let mut out = unit.clone();
    for j in 0..out.ncols() {
        let (lo, hi) = (bounds.lower()[j], bounds.upper()[j]);
        for i in 0..out.nrows() {
            out[(i, j)] = lo + unit[(i, j)] * (hi - lo);
        }
    }
    Ok(out)
}

/// Generate `n` points of the requested design inside `bounds`.
/// Sobol designs are deterministic; `seed` is ignored for them and the
/// sequence starts at index 1 (the origin is dropped).
pub fn design(kind: DesignKind, n: usize, bounds: &Bounds, seed: u64) -> Result<DMatrix<f64>> {
    let unit = match kind {
        DesignKind::Lhs => lhs(n, bounds.dim(), seed),
        DesignKind::Sobol => sobol(n, bounds.dim(), 1)?,
        DesignKind::Uniform => uniform(n, bounds.dim(), seed),
    };
    scale_to_bounds(&unit, bounds)
}
