//! Built-in test functions with analytic gradients: a seven-input piston
//! cycle-time simulator, an eight-input epidemic reproduction number, and a
//! two-input saddle.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Bounds, Dataset};
use crate::error::{Error, Result};
use crate::sampling::{design, DesignKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Piston,
    Ebola,
    Paraboloid,
}

impl std::str::FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Benchmark> {
        match s {
            "piston" => Ok(Benchmark::Piston),
            "ebola" => Ok(Benchmark::Ebola),
            "paraboloid" => Ok(Benchmark::Paraboloid),
            other => Err(Error::InvalidArgument(format!(
                "unknown benchmark {other:?} (expected piston, ebola, or paraboloid)"
            ))),
        }
    }
}

impl Benchmark {
    pub fn name(&self) -> &'static str {
        match self {
            Benchmark::Piston => "piston",
            Benchmark::Ebola => "ebola",
            Benchmark::Paraboloid => "paraboloid",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Benchmark::Piston => 7,
            Benchmark::Ebola => 8,
            Benchmark::Paraboloid => 2,
        }
    }

    /// Input box for the benchmark.
    ///
    /// Piston: cycle-time simulator of Ben-Ari and Steinberg (2007),
    /// "Modeling data from computer experiments", with its customary ranges.
    /// Ebola: basic reproduction number for the Liberia parameter ranges of
    /// Diaz, Constantine, Kalmbach, Jones, and Pankavich (2018).
    pub fn bounds(&self) -> Bounds {
        match self {
            Benchmark::Piston => Bounds::new(
                vec![30.0, 0.005, 0.002, 1000.0, 90000.0, 290.0, 340.0],
                vec![60.0, 0.020, 0.010, 5000.0, 110000.0, 296.0, 360.0],
            )
            .unwrap(),
            Benchmark::Ebola => Bounds::new(
                vec![0.1, 0.1, 0.05, 0.41, 0.0276, 0.081, 0.25, 0.0833],
                vec![0.4, 0.4, 0.2, 0.42, 0.1702, 0.21, 0.5, 0.7],
            )
            .unwrap(),
            Benchmark::Paraboloid => Bounds::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(),
        }
    }

    pub fn input_names(&self) -> Vec<&'static str> {
        match self {
            Benchmark::Piston => vec!["M", "S", "V0", "k", "P0", "Ta", "T0"],
            Benchmark::Ebola => {
                vec!["beta1", "beta2", "beta3", "rho1", "gamma1", "gamma2", "omega", "psi"]
            }
            Benchmark::Paraboloid => vec!["x1", "x2"],
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self.eval_with_gradient(x)?.0)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval_with_gradient(x)?.1)
    }

    pub fn eval_with_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} expects {} inputs, got {}",
                self.name(),
                self.dim(),
                x.len()
            )));
        }
        Ok(match self {
            Benchmark::Piston => piston(x),
            Benchmark::Ebola => ebola(x),
            Benchmark::Paraboloid => paraboloid(x),
        })
    }

    /// Sample a design inside the benchmark bounds and evaluate output and
    /// gradient at every point.
    pub fn dataset(&self, kind: DesignKind, n: usize, seed: u64) -> Result<Dataset> {
        let points = design(kind, n, &self.bounds(), seed)?;
        self.dataset_at(&points)
    }

    /// Evaluate output and gradient at the given points.
    pub fn dataset_at(&self, points: &DMatrix<f64>) -> Result<Dataset> {
        let n = points.nrows();
        let m = self.dim();
        let mut outputs = DVector::zeros(n);
        let mut grads = DMatrix::zeros(n, m);
        let mut row = vec![0.0; m];
        for i in 0..n {
            for (j, r) in row.iter_mut().enumerate() {
                *r = points[(i, j)];
            }
            let (y, g) = self.eval_with_gradient(&row)?;
            outputs[i] = y;
            for (j, gj) in g.iter().enumerate() {
                grads[(i, j)] = *gj;
            }
        }
        Dataset::new(points.clone(), outputs, Some(grads))
    }
}

/// Piston cycle time; inputs [M, S, V0, k, P0, Ta, T0].
fn piston(x: &[f64]) -> (f64, Vec<f64>) {
    let (m, s, v0, k, p0, ta, t0) = (x[0], x[1], x[2], x[3], x[4], x[5], x[6]);
    let g = p0 * v0 / t0;
    let a = p0 * s + 19.62 * m - k * v0 / s;
    let b = a * a + 4.0 * k * g * ta;
    let sqrt_b = b.sqrt();
    let v = s / (2.0 * k) * (sqrt_b - a);
    let d = k + s * s * g * ta / (v * v);
    let c = 2.0 * std::f64::consts::PI * (m / d).sqrt();

    // Indicator-derivative arrays over [M, S, V0, k, P0, Ta, T0].
    let dg = [0.0, 0.0, p0 / t0, 0.0, v0 / t0, 0.0, -g / t0];
    let da = [19.62, p0 + k * v0 / (s * s), -k / s, -v0 / s, s, 0.0, 0.0];
    let mut grad = vec![0.0; 7];
    for i in 0..7 {
        let dk_i = if i == 3 { 1.0 } else { 0.0 };
        let ds_i = if i == 1 { 1.0 } else { 0.0 };
        let dta_i = if i == 5 { 1.0 } else { 0.0 };
        let db = 2.0 * a * da[i] + 4.0 * ta * (g * dk_i + k * dg[i]) + 4.0 * k * g * dta_i;
        let dv = (ds_i / (2.0 * k) - s * dk_i / (2.0 * k * k)) * (sqrt_b - a)
            + s / (2.0 * k) * (db / (2.0 * sqrt_b) - da[i]);
        let dd = dk_i
            + (2.0 * s * ds_i * g * ta + s * s * dg[i] * ta + s * s * g * dta_i) / (v * v)
            - 2.0 * s * s * g * ta * dv / (v * v * v);
        let dm_i = if i == 0 { 1.0 } else { 0.0 };
        grad[i] = std::f64::consts::PI * (dm_i - m / d * dd) / (m * d).sqrt();
    }
    (c, grad)
}

/// Basic reproduction number; inputs [b1, b2, b3, r1, g1, g2, om, ps].
fn ebola(x: &[f64]) -> (f64, Vec<f64>) {
    let (b1, b2, b3, r1, g1, g2, om, ps) = (x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7]);
    let num = b1 + b2 * r1 * g1 / om + b3 * ps / g2;
    let den = g1 + ps;
    let r0 = num / den;
    let grad = vec![
        1.0 / den,
        r1 * g1 / (om * den),
        ps / (g2 * den),
        b2 * g1 / (om * den),
        b2 * r1 / (om * den) - num / (den * den),
        -b3 * ps / (g2 * g2 * den),
        -b2 * r1 * g1 / (om * om * den),
        b3 / (g2 * den) - num / (den * den),
    ];
    (r0, grad)
}

/// Saddle x1^2 - x2^2 on the unit square.
fn paraboloid(x: &[f64]) -> (f64, Vec<f64>) {
    (x[0] * x[0] - x[1] * x[1], vec![2.0 * x[0], -2.0 * x[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_vec_close(got: &[f64], want: &[f64], rel: f64) {
        assert_eq!(got.len(), want.len());
        for (i, (g, w)) in got.iter().zip(want).enumerate() {
            let scale = w.abs().max(1e-12);
            assert!(
                (g - w).abs() / scale < rel,
                "component {i}: got {g}, want {w}"
            );
        }
    }

    #[test]
    fn piston_reference_values() {
        let cases: [(&[f64], f64, &[f64]); 4] = [
            (
                &[45.0, 0.0125, 0.006, 3000.0, 100000.0, 293.0, 350.0],
                0.4643970224718025,
                &[
                    0.0028890173683808833,
                    -24.908682096008008,
                    34.462604654905135,
                    -8.474294435490143e-06,
                    -1.0458289827066932e-06,
                    0.00013686154180192687,
                    -0.00011457266213704165,
                ],
            ),
            (
                &[30.0, 0.005, 0.002, 1000.0, 90000.0, 290.0, 340.0],
                0.46700283916057495,
                &[
                    0.0003886584741171364,
                    -64.07251632798416,
                    135.55106174917356,
                    3.7600703918059617e-05,
                    -5.473384237952634e-07,
                    0.0004149767639660313,
                    -0.0003539507692651443,
                ],
            ),
            (
                &[60.0, 0.020, 0.010, 5000.0, 110000.0, 296.0, 360.0],
                0.43476797627910463,
                &[
                    0.002442533410117242,
                    -14.13992195900585,
                    17.68152113563174,
                    -8.113755356646984e-06,
                    -9.63483889307269e-07,
                    8.915712724583045e-05,
                    -7.330697129101614e-05,
                ],
            ),
            (
                &[37.5, 0.0170, 0.0034, 4200.0, 95500.0, 294.2, 344.0],
                0.2735823304410846,
                &[
                    0.0020467196093333488,
                    -11.825189951116666,
                    38.392266035224274,
                    -1.4898715954237531e-06,
                    -7.381625617719458e-07,
                    0.00021069831447010652,
                    -0.00018019605847995737,
                ],
            ),
        ];
        for (x, want_c, want_g) in cases {
            let (c, g) = Benchmark::Piston.eval_with_gradient(x).unwrap();
            assert_relative_eq!(c, want_c, max_relative = 1e-12);
            assert_vec_close(&g, want_g, 1e-10);
        }
    }

    #[test]
    fn ebola_reference_values() {
        let cases: [(&[f64], f64, &[f64]); 3] = [
            (
                &[0.25, 0.25, 0.125, 0.415, 0.0989, 0.1455, 0.375, 0.39165],
                1.2513126195052122,
                &[
                    2.0385281826521253,
                    0.22311555057248667,
                    5.487213489592473,
                    0.1344069581761968,
                    -1.986843242969209,
                    -4.714100936076008,
                    -0.14874370038165777,
                    -0.7995231684753645,
                ],
            ),
            (
                &[0.1, 0.4, 0.05, 0.41, 0.1702, 0.081, 0.25, 0.0833],
                1.0377552389996836,
                &[
                    3.9447731755424065,
                    1.1010966469428007,
                    4.05678525336645,
                    1.074240631163708,
                    -1.5059378264287318,
                    -2.5041884280039817,
                    -1.7617546351084812,
                    -1.6586638594966452,
                ],
            ),
            (
                &[0.4, 0.1, 0.2, 0.42, 0.0276, 0.21, 0.5, 0.7],
                1.4691933296683162,
                &[
                    1.3743815283122596,
                    0.03186366135239142,
                    4.581271761040865,
                    0.007586586036283673,
                    -1.9037841254374879,
                    -4.363115962896062,
                    -0.0063727322704782855,
                    -0.7102973849468989,
                ],
            ),
        ];
        for (x, want_r0, want_g) in cases {
            let (r0, g) = Benchmark::Ebola.eval_with_gradient(x).unwrap();
            assert_relative_eq!(r0, want_r0, max_relative = 1e-13);
            assert_vec_close(&g, want_g, 1e-12);
        }
    }

    #[test]
    fn paraboloid_values_and_gradient() {
        let (y, g) = Benchmark::Paraboloid.eval_with_gradient(&[0.3, 0.7]).unwrap();
        assert_relative_eq!(y, 0.09 - 0.49, epsilon = 1e-15);
        assert_relative_eq!(g[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(g[1], -1.4, epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(Benchmark::Piston.eval(&[1.0, 2.0]).is_err());
        assert!(Benchmark::Ebola.eval(&vec![0.2; 7]).is_err());
    }

    #[test]
    fn dataset_carries_gradients_inside_bounds() {
        for bench in [Benchmark::Piston, Benchmark::Ebola, Benchmark::Paraboloid] {
            let ds = bench.dataset(DesignKind::Lhs, 25, 4).unwrap();
            assert_eq!(ds.n_samples(), 25);
            assert_eq!(ds.dim(), bench.dim());
            let grads = ds.gradients().expect("gradients present");
            assert_eq!(grads.ncols(), bench.dim());
            let b = bench.bounds();
            for i in 0..25 {
                let row: Vec<f64> = ds.inputs().row(i).iter().copied().collect();
                assert!(b.contains(&row));
            }
        }
    }

    fn random_point<R: Rng>(bench: Benchmark, rng: &mut R) -> Vec<f64> {
        let b = bench.bounds();
        (0..bench.dim())
            .map(|j| b.lower()[j] + rng.random::<f64>() * (b.upper()[j] - b.lower()[j]))
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn gradients_match_finite_differences(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for bench in [Benchmark::Piston, Benchmark::Ebola, Benchmark::Paraboloid] {
                let x = random_point(bench, &mut rng);
                let (_, grad) = bench.eval_with_gradient(&x).unwrap();
                let b = bench.bounds();
                for j in 0..bench.dim() {
                    let h = 1e-6 * (b.upper()[j] - b.lower()[j]);
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (bench.eval(&xp).unwrap() - bench.eval(&xm).unwrap()) / (2.0 * h);
                    let scale = fd.abs().max(grad[j].abs()).max(1e-8);
                    prop_assert!(
                        (fd - grad[j]).abs() / scale < 2e-4,
                        "{} coordinate {}: analytic {} vs fd {}",
                        bench.name(), j, grad[j], fd
                    );
                }
            }
        }

        #[test]
        fn piston_output_positive_and_bounded(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_point(Benchmark::Piston, &mut rng);
            let c = Benchmark::Piston.eval(&x).unwrap();
            prop_assert!(c > 0.0 && c < 10.0, "cycle time {c}");
        }
    }
}
