//! Invertible coordinate transform for nonlinear dimension reduction: a
//! reversible two-block network trained so that output gradients, pulled
//! back through the transform, concentrate on the first output coordinate.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Layer {
    k1: DMatrix<f64>,
    b1: DVector<f64>,
    k2: DMatrix<f64>,
    b2: DVector<f64>,
}

impl Layer {
    fn zeros(d: usize) -> Layer {
        Layer {
            k1: DMatrix::zeros(d, d),
            b1: DVector::zeros(d),
            k2: DMatrix::zeros(d, d),
            b2: DVector::zeros(d),
        }
    }
}

/// Reversible network on an even-width state split into two half-blocks.
/// Odd input dimensions are padded with one constant zero coordinate at the
/// end of the second block.
#[derive(Debug, Clone)]
pub struct RevNet {
    input_dim: usize,
    width: usize,
    step: f64,
    layers: Vec<Layer>,
}

fn tanh_vec(a: &DVector<f64>) -> DVector<f64> {
    a.map(f64::tanh)
}

/// First derivative of tanh expressed through its value.
fn dtanh(t: &DVector<f64>) -> DVector<f64> {
    t.map(|v| 1.0 - v * v)
}

/// Second derivative of tanh expressed through its value.
fn ddtanh(t: &DVector<f64>) -> DVector<f64> {
    t.map(|v| -2.0 * v * (1.0 - v * v))
}

struct LayerState {
    u_in: DVector<f64>,
    v_in: DVector<f64>,
    /// tanh of the first pre-activation (at v_in).
    t1: DVector<f64>,
    /// u after the first half-step; input to the second pre-activation.
    u_mid: DVector<f64>,
    /// tanh of the second pre-activation (at u_mid).
    t2: DVector<f64>,
}

impl RevNet {
    /// Fresh network with Gaussian weights of standard deviation
    /// 1/sqrt(width) and zero biases.
    pub fn random(input_dim: usize, n_layers: usize, step: f64, seed: u64) -> Result<RevNet> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input dimension must be positive".into()));
        }
        if n_layers == 0 {
            return Err(Error::InvalidArgument("need at least one layer".into()));
        }
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
        }
        let width = input_dim + input_dim % 2;
        let d = width / 2;
        let std = 1.0 / (width as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        };
        let layers = (0..n_layers)
            .map(|_| {
                let mut l = Layer::zeros(d);
                for r in 0..d {
                    for c in 0..d {
                        l.k1[(r, c)] = draw(&mut rng);
                    }
                }
                for r in 0..d {
                    for c in 0..d {
                        l.k2[(r, c)] = draw(&mut rng);
                    }
                }
                l
            })
            .collect();
        Ok(RevNet {
            input_dim,
            width,
            step,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn padded(&self) -> bool {
        self.width != self.input_dim
    }

    fn half(&self) -> usize {
        self.width / 2
    }

    fn split(&self, x: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        if x.len() != self.input_dim && x.len() != self.width {
            return Err(Error::DimensionMismatch(format!(
                "point of dimension {} vs network input dimension {}",
                x.len(),
                self.input_dim
            )));
        }
        let d = self.half();
        let mut full = vec![0.0; self.width];
        full[..x.len()].copy_from_slice(x);
        Ok((
            DVector::from_row_slice(&full[..d]),
            DVector::from_row_slice(&full[d..]),
        ))
    }

    fn forward_states(&self, x: &[f64]) -> Result<(Vec<LayerState>, DVector<f64>, DVector<f64>)> {
        let (mut u, mut v) = self.split(x)?;
        let h = self.step;
        let mut states = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let t1 = tanh_vec(&(&l.k1 * &v + &l.b1));
            let u_mid = &u + h * l.k1.transpose() * &t1;
            let t2 = tanh_vec(&(&l.k2 * &u_mid + &l.b2));
            let v_next = &v - h * l.k2.transpose() * &t2;
            states.push(LayerState {
                u_in: u,
                v_in: v,
                t1,
                u_mid: u_mid.clone(),
                t2,
            });
            u = u_mid;
            v = v_next;
        }
        Ok((states, u, v))
    }

    /// Map a point through all layers; returns the full transformed state.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (_, u, v) = self.forward_states(x)?;
        Ok(u.iter().chain(v.iter()).copied().collect())
    }

    /// First transformed coordinate, used as the reduced variable.
    pub fn reduce_coordinate(&self, x: &[f64]) -> Result<f64> {
        let (_, u, _) = self.forward_states(x)?;
        Ok(u[0])
    }

    /// Reduced coordinate for every input row.
    pub fn reduce_matrix(&self, inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(inputs.nrows());
        let mut row = vec![0.0; inputs.ncols()];
        for i in 0..inputs.nrows() {
            for (j, r) in row.iter_mut().enumerate() {
                *r = inputs[(i, j)];
            }
            out[i] = self.reduce_coordinate(&row)?;
        }
        Ok(out)
    }

    /// Algebraic inverse of `forward`; exact up to floating-point error.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.width {
            return Err(Error::DimensionMismatch(format!(
                "state of dimension {} vs network width {}",
                z.len(),
                self.width
            )));
        }
        let d = self.half();
        let mut u = DVector::from_row_slice(&z[..d]);
        let mut v = DVector::from_row_slice(&z[d..]);
        let h = self.step;
        for l in self.layers.iter().rev() {
            let t2 = tanh_vec(&(&l.k2 * &u + &l.b2));
            v += h * l.k2.transpose() * t2;
            let t1 = tanh_vec(&(&l.k1 * &v + &l.b1));
            u -= h * l.k1.transpose() * t1;
        }
        Ok(u.iter().chain(v.iter()).copied().collect())
    }

    /// Full Jacobian of the transform at `x`, as the ordered product of the
    /// per-layer block Jacobians.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let (states, _, _) = self.forward_states(x)?;
        let d = self.half();
        let h = self.step;
        let mut jac = DMatrix::identity(self.width, self.width);
        for (l, st) in self.layers.iter().zip(&states) {
            let b1 = h * l.k1.transpose() * DMatrix::from_diagonal(&dtanh(&st.t1)) * &l.k1;
            let b2 = h * l.k2.transpose() * DMatrix::from_diagonal(&dtanh(&st.t2)) * &l.k2;
            let mut jl = DMatrix::zeros(self.width, self.width);
            jl.view_mut((0, 0), (d, d)).copy_from(&DMatrix::identity(d, d));
            jl.view_mut((0, d), (d, d)).copy_from(&b1);
            jl.view_mut((d, 0), (d, d)).copy_from(&(-&b2));
            jl.view_mut((d, d), (d, d))
                .copy_from(&(DMatrix::identity(d, d) - &b2 * &b1));
            jac = jl * jac;
        }
        Ok(jac)
    }

    /// Pull a full-space gradient back to output coordinates:
    /// s = J^{-T} grad, computed layer by layer without any solves (each
    /// inverse-transpose block Jacobian is applied as two symmetric
    /// operator products).
    pub fn covector(&self, x: &[f64], grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != self.input_dim && grad.len() != self.width {
            return Err(Error::DimensionMismatch(format!(
                "gradient of dimension {} vs network input dimension {}",
                grad.len(),
                self.input_dim
            )));
        }
        let (states, _, _) = self.forward_states(x)?;
        let (mut p, mut q) = self.split(grad)?;
        let h = self.step;
        for (l, st) in self.layers.iter().zip(&states) {
            let s1p = dtanh(&st.t1);
            let s2p = dtanh(&st.t2);
            // t = q - B1 p
            let c1 = &l.k1 * &p;
            let w = h * l.k1.transpose() * s1p.component_mul(&c1);
            let t = &q - w;
            // p' = p + B2 t
            let c2 = &l.k2 * &t;
            p += h * l.k2.transpose() * s2p.component_mul(&c2);
            q = t;
        }
        Ok(p.iter().chain(q.iter()).copied().collect())
    }

    /// Indices of the transformed coordinates that the loss drives to zero:
    /// everything but the first coordinate and, when padded, the pad slot.
    fn inactive_indices(&self) -> Vec<usize> {
        let last = if self.padded() {
            self.width - 1
        } else {
            self.width
        };
        (1..last).collect()
    }

    pub fn to_doc(&self) -> RevNetDoc {
        RevNetDoc {
            input_dim: self.input_dim,
            step: self.step,
            layers: self
                .layers
                .iter()
                .map(|l| LayerDoc {
                    k1: matrix_rows(&l.k1),
                    b1: l.b1.iter().copied().collect(),
                    k2: matrix_rows(&l.k2),
                    b2: l.b2.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn from_doc(doc: RevNetDoc) -> Result<RevNet> {
        if doc.input_dim == 0 || doc.layers.is_empty() {
            return Err(Error::InvalidArgument("empty network document".into()));
        }
        let width = doc.input_dim + doc.input_dim % 2;
        let d = width / 2;
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                Ok(Layer {
                    k1: matrix_from_rows(&l.k1, d)?,
                    b1: vector_checked(&l.b1, d)?,
                    k2: matrix_from_rows(&l.k2, d)?,
                    b2: vector_checked(&l.b2, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RevNet {
            input_dim: doc.input_dim,
            width,
            step: doc.step,
            layers,
        })
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch(format!("expected {d}x{d} layer matrix")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(d, d, &flat))
}

fn vector_checked(v: &[f64], d: usize) -> Result<DVector<f64>> {
    if v.len() != d {
        return Err(Error::DimensionMismatch(format!("expected bias of length {d}")));
    }
    Ok(DVector::from_row_slice(v))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RevNetDoc {
    pub input_dim: usize,
    pub step: f64,
    pub layers: Vec<LayerDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDoc {
    pub k1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub k2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

/// Misalignment loss: mean over samples of the pulled-back gradient energy
/// in the inactive coordinates, normalized by the squared gradient norm.
/// Zero-gradient samples contribute nothing.
pub fn alignment_loss(net: &RevNet, inputs: &DMatrix<f64>, grads: &DMatrix<f64>) -> Result<f64> {
    Ok(loss_and_grad(net, inputs, grads)?.0)
}

/// Loss and its gradient with respect to every layer parameter, by reverse
/// accumulation through both the covector propagation and the forward pass.
fn loss_and_grad(
    net: &RevNet,
    inputs: &DMatrix<f64>,
    grads: &DMatrix<f64>,
) -> Result<(f64, Vec<Layer>)> {
    let n = inputs.nrows();
    let m = inputs.ncols();
    if m != net.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "inputs of dimension {m} vs network input dimension {}",
            net.input_dim
        )));
    }
    if grads.nrows() != n || grads.ncols() != m {
        return Err(Error::DimensionMismatch(format!(
            "gradient matrix {}x{} vs inputs {n}x{m}",
            grads.nrows(),
            grads.ncols()
        )));
    }
    let d = net.half();
    let h = net.step;
    let nl = net.layers.len();
    let inactive = net.inactive_indices();

    let mut loss = 0.0;
    let mut pgrad: Vec<Layer> = (0..nl).map(|_| Layer::zeros(d)).collect();
    let mut x = vec![0.0; m];
    let mut g = vec![0.0; m];

    for i in 0..n {
        for j in 0..m {
            x[j] = inputs[(i, j)];
            g[j] = grads[(i, j)];
        }
        let g_norm2: f64 = g.iter().map(|v| v * v).sum();
        if g_norm2 == 0.0 {
            continue;
        }
        let (states, _, _) = net.forward_states(&x)?;

        // Covector forward, storing per-layer inputs and intermediates.
        let (mut p, mut q) = net.split(&g)?;
        let mut ps: Vec<DVector<f64>> = Vec::with_capacity(nl);
        let mut ts: Vec<DVector<f64>> = Vec::with_capacity(nl);
        for (l, st) in net.layers.iter().zip(&states) {
            ps.push(p.clone());
            let s1p = dtanh(&st.t1);
            let s2p = dtanh(&st.t2);
            let c1 = &l.k1 * &p;
            let w = h * l.k1.transpose() * s1p.component_mul(&c1);
            let t = &q - w;
            let c2 = &l.k2 * &t;
            p += h * l.k2.transpose() * s2p.component_mul(&c2);
            q = t.clone();
            ts.push(t);
        }

        // Loss on the final covector s = (p, q).
        let s_at = |idx: usize| if idx < d { p[idx] } else { q[idx - d] };
        for &idx in &inactive {
            let s = s_at(idx);
            loss += s * s / (g_norm2 * n as f64);
        }

        // Seed adjoints of the final covector.
        let mut pbar = DVector::zeros(d);
        let mut qbar = DVector::zeros(d);
        for &idx in &inactive {
            let sbar = 2.0 * s_at(idx) / (g_norm2 * n as f64);
            if idx < d {
                pbar[idx] = sbar;
            } else {
                qbar[idx - d] = sbar;
            }
        }

        // Backward through the covector propagation; pre-activation adjoints
        // are parked per layer and consumed by the forward-pass backward.
        let mut abar1: Vec<DVector<f64>> = (0..nl).map(|_| DVector::zeros(d)).collect();
        let mut abar2: Vec<DVector<f64>> = (0..nl).map(|_| DVector::zeros(d)).collect();
        for nrev in (0..nl).rev() {
            let l = &net.layers[nrev];
            let st = &states[nrev];
            let s1p = dtanh(&st.t1);
            let s2p = dtanh(&st.t2);
            let s1pp = ddtanh(&st.t1);
            let s2pp = ddtanh(&st.t2);
            let p_n = &ps[nrev];
            let t_n = &ts[nrev];

            // p_{n+1} = p_n + B2 t_n
            let y2bar = pbar.clone();
            let d2bar = h * &l.k2 * &y2bar;
            let c2 = &l.k2 * t_n;
            let c2bar = s2p.component_mul(&d2bar);
            let tbar = l.k2.transpose() * &c2bar + &qbar;
            abar2[nrev] += s2pp.component_mul(&c2).component_mul(&d2bar);
            let d2 = s2p.component_mul(&c2);
            pgrad[nrev].k2 += h * &d2 * y2bar.transpose() + &c2bar * t_n.transpose();

            // t_n = q_n - B1 p_n
            let y1bar = -&tbar;
            let d1bar = h * &l.k1 * &y1bar;
            let c1 = &l.k1 * p_n;
            let c1bar = s1p.component_mul(&d1bar);
            let pbar_next = &pbar + l.k1.transpose() * &c1bar;
            abar1[nrev] += s1pp.component_mul(&c1).component_mul(&d1bar);
            let d1 = s1p.component_mul(&c1);
            pgrad[nrev].k1 += h * &d1 * y1bar.transpose() + &c1bar * p_n.transpose();

            pbar = pbar_next;
            qbar = tbar;
        }

        // Backward through the forward recursion, consuming the parked
        // pre-activation adjoints.
        let mut ubar = DVector::zeros(d);
        let mut vbar = DVector::zeros(d);
        for nrev in (0..nl).rev() {
            let l = &net.layers[nrev];
            let st = &states[nrev];
            let s1p = dtanh(&st.t1);
            let s2p = dtanh(&st.t2);

            // v_{n+1} = v_n - h K2^T tanh(a2)
            pgrad[nrev].k2 += -h * &st.t2 * vbar.transpose();
            let a2bar = &abar2[nrev] + s2p.component_mul(&(-h * &l.k2 * &vbar));
            // a2 = K2 u_mid + b2
            pgrad[nrev].k2 += &a2bar * st.u_mid.transpose();
            pgrad[nrev].b2 += &a2bar;
            ubar += l.k2.transpose() * &a2bar;

            // u_mid = u_n + h K1^T tanh(a1)
            pgrad[nrev].k1 += h * &st.t1 * ubar.transpose();
            let a1bar = &abar1[nrev] + s1p.component_mul(&(h * &l.k1 * &ubar));
            // a1 = K1 v_n + b1
            pgrad[nrev].k1 += &a1bar * st.v_in.transpose();
            pgrad[nrev].b1 += &a1bar;
            vbar += l.k1.transpose() * &a1bar;
            let _ = &st.u_in;
        }
    }

    Ok((loss, pgrad))
}

#[derive(Debug, Clone)]
pub struct NllTrainConfig {
    pub n_layers: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub step: f64,
    pub seed: u64,
}

impl Default for NllTrainConfig {
    fn default() -> Self {
        NllTrainConfig {
            n_layers: 10,
            epochs: 20_000,
            learning_rate: 0.03,
            step: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedRevNet {
    pub net: RevNet,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub initial_loss: f64,
}

/// Train a fresh network on sample gradients with full-batch Adam, keeping
/// the parameters from the best epoch seen.
pub fn train(inputs: &DMatrix<f64>, grads: &DMatrix<f64>, cfg: &NllTrainConfig) -> Result<TrainedRevNet> {
    if inputs.nrows() == 0 {
        return Err(Error::InvalidArgument("training needs at least one sample".into()));
    }
    let mut net = RevNet::random(inputs.ncols(), cfg.n_layers, cfg.step, cfg.seed)?;
    let d = net.half();
    let nl = net.layers.len();

    let mut m1: Vec<Layer> = (0..nl).map(|_| Layer::zeros(d)).collect();
    let mut m2: Vec<Layer> = (0..nl).map(|_| Layer::zeros(d)).collect();
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let lr = cfg.learning_rate;

    let mut best: Option<(f64, RevNet, usize)> = None;
    let mut initial_loss = f64::NAN;

    for epoch in 0..=cfg.epochs {
        let (loss, grad) = loss_and_grad(&net, inputs, grads)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training loss became non-finite at epoch {epoch}"
            )));
        }
        if epoch == 0 {
            initial_loss = loss;
        }
        if best.as_ref().map_or(true, |(bl, _, _)| loss < *bl) {
            best = Some((loss, net.clone(), epoch));
        }
        if epoch == cfg.epochs {
            break;
        }

        let t = (epoch + 1) as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (li, g) in grad.iter().enumerate() {
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            };
            let l = &mut net.layers[li];
            for (i, gv) in g.k1.iter().enumerate() {
                update(&mut l.k1[i], *gv, &mut m1[li].k1[i], &mut m2[li].k1[i]);
            }
            for (i, gv) in g.b1.iter().enumerate() {
                update(&mut l.b1[i], *gv, &mut m1[li].b1[i], &mut m2[li].b1[i]);
            }
            for (i, gv) in g.k2.iter().enumerate() {
                update(&mut l.k2[i], *gv, &mut m1[li].k2[i], &mut m2[li].k2[i]);
            }
            for (i, gv) in g.b2.iter().enumerate() {
                update(&mut l.b2[i], *gv, &mut m1[li].b2[i], &mut m2[li].b2[i]);
            }
        }
    }

    let (best_loss, net, best_epoch) = best.expect("at least one epoch evaluated");
    Ok(TrainedRevNet {
        net,
        best_loss,
        best_epoch,
        initial_loss,
    })
}
