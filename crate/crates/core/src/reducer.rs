//! Dimension reducers and the response surface built on top of them: a
//! linear projection from the gradient covariance eigenbasis, or an
//! invertible level-set transform, each feeding a GP on the reduced
//! coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{fit, FitConfig, GpModel, GpModelDoc, KernelFamily, NoisePolicy};
use crate::levelset::{self, RevNet, RevNetDoc};
use crate::seed::{child_seed, stream};
use crate::subspace::{estimate_gradients, ActiveSubspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReducerKind {
    #[default]
    Linear,
    LevelSet,
}

impl std::str::FromStr for ReducerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ReducerKind> {
        match s {
            "linear" => Ok(ReducerKind::Linear),
            "levelset" | "level-set" => Ok(ReducerKind::LevelSet),
            other => Err(Error::InvalidArgument(format!(
                "unknown reducer {other:?} (expected linear or levelset)"
            ))),
        }
    }
}

/// How many reduced coordinates to keep. The spectral-gap rule applies only
/// to the linear reducer; the level-set transform always yields one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankChoice {
    Fixed(usize),
    SpectralGap,
}

impl Default for RankChoice {
    fn default() -> Self {
        RankChoice::Fixed(1)
    }
}

/// A fitted input-space reduction.
#[derive(Debug, Clone)]
pub enum Reducer {
    Linear {
        /// m-by-r eigenvector projection.
        projection: DMatrix<f64>,
        /// Full descending eigenvalue spectrum of the gradient covariance.
        eigenvalues: Vec<f64>,
        degenerate: bool,
    },
    LevelSet {
        net: RevNet,
    },
}

impl Reducer {
    pub fn kind(&self) -> ReducerKind {
        match self {
            Reducer::Linear { .. } => ReducerKind::Linear,
            Reducer::LevelSet { .. } => ReducerKind::LevelSet,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Reducer::Linear { projection, .. } => projection.nrows(),
            Reducer::LevelSet { net } => net.input_dim(),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Reducer::Linear { projection, .. } => projection.ncols(),
            Reducer::LevelSet { .. } => 1,
        }
    }

    /// Eigenvalue spectrum, where the reduction has one.
    pub fn eigenvalues(&self) -> Option<&[f64]> {
        match self {
            Reducer::Linear { eigenvalues, .. } => Some(eigenvalues),
            Reducer::LevelSet { .. } => None,
        }
    }

    /// Square roots of captured and discarded eigenvalue mass at this rank.
    pub fn bound_terms(&self) -> Option<(f64, f64)> {
        match self {
            Reducer::Linear {
                projection,
                eigenvalues,
                ..
            } => {
                let r = projection.ncols();
                let head: f64 = eigenvalues[..r].iter().sum();
                let tail: f64 = eigenvalues[r..].iter().sum();
                Some((head.sqrt(), tail.sqrt()))
            }
            Reducer::LevelSet { .. } => None,
        }
    }

    /// Map full-space rows to reduced coordinates.
    pub fn reduce(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} input columns vs reducer dimension {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        match self {
            Reducer::Linear { projection, .. } => Ok(inputs * projection),
            Reducer::LevelSet { net } => {
                let z = net.reduce_matrix(inputs)?;
                Ok(DMatrix::from_column_slice(z.len(), 1, z.as_slice()))
            }
        }
    }

    pub fn to_doc(&self) -> ReducerDoc {
        match self {
            Reducer::Linear {
                projection,
                eigenvalues,
                degenerate,
            } => ReducerDoc::Linear {
                projection: (0..projection.nrows())
                    .map(|i| projection.row(i).iter().copied().collect())
                    .collect(),
                eigenvalues: eigenvalues.clone(),
                degenerate: *degenerate,
            },
            Reducer::LevelSet { net } => ReducerDoc::LevelSet { net: net.to_doc() },
        }
    }

    pub fn from_doc(doc: ReducerDoc) -> Result<Reducer> {
        match doc {
            ReducerDoc::Linear {
                projection,
                eigenvalues,
                degenerate,
            } => {
                let m = projection.len();
                if m == 0 {
                    return Err(Error::InvalidArgument("empty projection".into()));
                }
                let r = projection[0].len();
                if r == 0 || projection.iter().any(|row| row.len() != r) {
                    return Err(Error::DimensionMismatch("ragged projection rows".into()));
                }
                if eigenvalues.len() != m {
                    return Err(Error::DimensionMismatch(format!(
                        "{} eigenvalues for dimension {m}",
                        eigenvalues.len()
                    )));
                }
                let flat: Vec<f64> = projection.iter().flatten().copied().collect();
                Ok(Reducer::Linear {
                    projection: DMatrix::from_row_slice(m, r, &flat),
                    eigenvalues,
                    degenerate,
                })
            }
            ReducerDoc::LevelSet { net } => Ok(Reducer::LevelSet {
                net: RevNet::from_doc(net)?,
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReducerDoc {
    Linear {
        projection: Vec<Vec<f64>>,
        eigenvalues: Vec<f64>,
        degenerate: bool,
    },
    LevelSet {
        net: RevNetDoc,
    },
}

/// Level-set transform training knobs (seed comes from the surface config).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelSetConfig {
    pub n_layers: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub step: f64,
}

impl Default for LevelSetConfig {
    fn default() -> Self {
        let d = levelset::NllTrainConfig::default();
        LevelSetConfig {
            n_layers: d.n_layers,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            step: d.step,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SurfaceConfig {
    pub kind: ReducerKind,
    pub rank: RankChoice,
    pub restarts: usize,
    pub noise: NoisePolicy,
    pub levelset: LevelSetConfig,
    pub seed: u64,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        SurfaceConfig {
            kind: ReducerKind::Linear,
            rank: RankChoice::Fixed(1),
            restarts: 10,
            noise: NoisePolicy::FixedZero,
            levelset: LevelSetConfig::default(),
            seed: 0,
        }
    }
}

/// A reducer plus a GP regression on the reduced coordinates.
#[derive(Debug, Clone)]
pub struct ReducedSurface {
    reducer: Reducer,
    gp: GpModel,
}

impl ReducedSurface {
    /// Fit reducer and surface GP from samples. Gradients are taken from
    /// `gradients` when given, otherwise estimated by local least squares.
    pub fn train(
        inputs: &DMatrix<f64>,
        outputs: &DVector<f64>,
        gradients: Option<&DMatrix<f64>>,
        cfg: &SurfaceConfig,
    ) -> Result<ReducedSurface> {
        if inputs.nrows() != outputs.len() || inputs.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} input rows vs {} outputs",
                inputs.nrows(),
                outputs.len()
            )));
        }
        let grads_owned;
        let grads: &DMatrix<f64> = match gradients {
            Some(g) => {
                if g.nrows() != inputs.nrows() || g.ncols() != inputs.ncols() {
                    return Err(Error::DimensionMismatch(format!(
                        "gradient matrix {}x{} vs inputs {}x{}",
                        g.nrows(),
                        g.ncols(),
                        inputs.nrows(),
                        inputs.ncols()
                    )));
                }
                g
            }
            None => {
                grads_owned = estimate_gradients(inputs, outputs)?;
                &grads_owned
            }
        };

        let reducer = match cfg.kind {
            ReducerKind::Linear => {
                let sub = ActiveSubspace::from_gradients(grads)?;
                let rank = match cfg.rank {
                    RankChoice::Fixed(r) => {
                        if r == 0 || r > inputs.ncols() {
                            return Err(Error::InvalidArgument(format!(
                                "rank {r} outside 1..={}",
                                inputs.ncols()
                            )));
                        }
                        r
                    }
                    RankChoice::SpectralGap => sub.suggested_rank(),
                };
                Reducer::Linear {
                    projection: sub.projection(rank)?,
                    eigenvalues: sub.eigenvalues().to_vec(),
                    degenerate: sub.degenerate(),
                }
            }
            ReducerKind::LevelSet => {
                if let RankChoice::Fixed(r) = cfg.rank {
                    if r != 1 {
                        return Err(Error::InvalidArgument(format!(
                            "level-set reduction always has rank 1, requested {r}"
                        )));
                    }
                }
                let ls_cfg = levelset::NllTrainConfig {
                    n_layers: cfg.levelset.n_layers,
                    epochs: cfg.levelset.epochs,
                    learning_rate: cfg.levelset.learning_rate,
                    step: cfg.levelset.step,
                    seed: child_seed(cfg.seed, stream::LEVELSET_TRAIN),
                };
                let trained = levelset::train(inputs, grads, &ls_cfg)?;
                Reducer::LevelSet { net: trained.net }
            }
        };

        let reduced = reducer.reduce(inputs)?;
        let fit_cfg = FitConfig {
            restarts: cfg.restarts,
            noise: cfg.noise,
            seed: child_seed(cfg.seed, stream::SURFACE_FIT),
            ..FitConfig::default()
        };
        let gp = fit(&reduced, outputs, KernelFamily::RbfArd, &fit_cfg)?;
        Ok(ReducedSurface { reducer, gp })
    }

    pub fn reducer(&self) -> &Reducer {
        &self.reducer
    }

    pub fn gp(&self) -> &GpModel {
        &self.gp
    }

    pub fn rank(&self) -> usize {
        self.reducer.rank()
    }

    /// Posterior mean and variance at full-space points.
    pub fn predict(&self, inputs: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let reduced = self.reducer.reduce(inputs)?;
        self.gp.predict_diag(&reduced)
    }

    pub fn predict_mean(&self, inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.predict(inputs)?.0)
    }

    pub fn to_doc(&self) -> ReducedSurfaceDoc {
        ReducedSurfaceDoc {
            reducer: self.reducer.to_doc(),
            gp: self.gp.to_doc(),
        }
    }

    pub fn from_doc(doc: ReducedSurfaceDoc) -> Result<ReducedSurface> {
        let reducer = Reducer::from_doc(doc.reducer)?;
        let gp = GpModel::from_doc(doc.gp)?;
        if gp.input_dim() != reducer.rank() {
            return Err(Error::DimensionMismatch(format!(
                "surface GP dimension {} vs reducer rank {}",
                gp.input_dim(),
                reducer.rank()
            )));
        }
        Ok(ReducedSurface { reducer, gp })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(s: &str) -> Result<ReducedSurface> {
        ReducedSurface::from_doc(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReducedSurfaceDoc {
    pub reducer: ReducerDoc,
    pub gp: GpModelDoc,
}
