//! End-to-end surrogate construction from a single high-fidelity dataset:
//! build a reduced response surface, synthesize a cheap lower-fidelity level
//! from it on a widened design, and train the autoregressive stack on the
//! two levels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Bounds, Dataset};
use crate::error::{Error, Result};
use crate::gp::{fit, FitConfig, GpModel, KernelFamily, NoisePolicy};
use crate::nargp::{self, McPrediction, MfModel, MfModelDoc, MfTrainConfig};
use crate::reducer::{
    LevelSetConfig, RankChoice, ReducedSurface, ReducedSurfaceDoc, ReducerKind, SurfaceConfig,
};
use crate::sampling::{design, DesignKind};
use crate::seed::{child_seed, stream};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub reducer: ReducerKind,
    pub rank: RankChoice,
    pub levelset: LevelSetConfig,
    /// Extra synthetic low-fidelity points beyond the high-fidelity design.
    pub n_lf_extra: usize,
    pub extra_design: DesignKind,
    pub surface_restarts: usize,
    pub mf_restarts: usize,
    /// Posterior draws per point when predicting through the stack.
    pub mc_samples: usize,
    /// Anchor points shared by both levels of the reversed construction.
    pub reversed_base: usize,
    /// Noise policy of the multi-fidelity chain levels.
    pub noise: NoisePolicy,
    /// Noise policy of the response surface. Defaults to free: the reduction
    /// discards coordinates, and the surface sees them as observation noise.
    pub surface_noise: NoisePolicy,
    /// Sampling box for synthetic points; the high-fidelity hull when absent.
    pub bounds: Option<Bounds>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            reducer: ReducerKind::Linear,
            rank: RankChoice::Fixed(1),
            levelset: LevelSetConfig::default(),
            n_lf_extra: 0,
            extra_design: DesignKind::Lhs,
            surface_restarts: 10,
            mf_restarts: 20,
            mc_samples: nargp::DEFAULT_PARTICLES,
            reversed_base: 200,
            noise: NoisePolicy::FixedZero,
            surface_noise: NoisePolicy::Free,
            bounds: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub(crate) fn mf_train_config(&self) -> MfTrainConfig {
        MfTrainConfig {
            restarts: self.mf_restarts,
            noise: self.noise,
            seed: self.seed,
            ..MfTrainConfig::default()
        }
    }

    pub(crate) fn surface_config(&self) -> SurfaceConfig {
        SurfaceConfig {
            kind: self.reducer,
            rank: self.rank,
            restarts: self.surface_restarts,
            noise: self.surface_noise,
            levelset: self.levelset.clone(),
            seed: self.seed,
        }
    }

    fn sampling_bounds(&self, hf: &Dataset) -> Result<Bounds> {
        match &self.bounds {
            Some(b) => {
                if b.dim() != hf.dim() {
                    return Err(Error::DimensionMismatch(format!(
                        "bounds of dimension {} vs data dimension {}",
                        b.dim(),
                        hf.dim()
                    )));
                }
                Ok(b.clone())
            }
            None => hf.hull(),
        }
    }
}

/// The reduced surface plus the synthetic low-fidelity level built from it.
/// The low-fidelity inputs are the high-fidelity rows followed by the extra
/// design points; outputs are surface re-predictions at every row, so the
/// level is smooth even where high-fidelity data exists.
pub fn build_lowfidelity(
    hf: &Dataset,
    cfg: &PipelineConfig,
) -> Result<(ReducedSurface, Dataset)> {
    let surface = ReducedSurface::train(
        hf.inputs(),
        hf.outputs(),
        hf.gradients(),
        &cfg.surface_config(),
    )
    .map_err(|e| e.with_context("response surface"))?;
    let bounds = cfg.sampling_bounds(hf)?;
    let extra = design(
        cfg.extra_design,
        cfg.n_lf_extra,
        &bounds,
        child_seed(cfg.seed, stream::LF_EXTRA_DESIGN),
    )
    .map_err(|e| e.with_context("extra design"))?;
    let n_hf = hf.n_samples();
    let m = hf.dim();
    let mut inputs = DMatrix::zeros(n_hf + cfg.n_lf_extra, m);
    inputs.view_mut((0, 0), (n_hf, m)).copy_from(hf.inputs());
    if cfg.n_lf_extra > 0 {
        inputs
            .view_mut((n_hf, 0), (cfg.n_lf_extra, m))
            .copy_from(&extra);
    }
    let outputs = surface
        .predict_mean(&inputs)
        .map_err(|e| e.with_context("low-fidelity synthesis"))?;
    let lf = Dataset::new(inputs, outputs, None)?;
    Ok((surface, lf))
}

/// A trained two-level surrogate with its generating surface.
#[derive(Debug, Clone)]
pub struct PipelineModel {
    pub surface: ReducedSurface,
    pub mf: MfModel,
}

impl PipelineModel {
    pub fn predict(
        &self,
        test_inputs: &DMatrix<f64>,
        n_particles: usize,
        seed: u64,
    ) -> Result<McPrediction> {
        self.mf.predict_mc(test_inputs, n_particles, seed)
    }

    pub fn to_doc(&self) -> PipelineModelDoc {
        PipelineModelDoc {
            surface: self.surface.to_doc(),
            mf: self.mf.to_doc(),
        }
    }

    pub fn from_doc(doc: PipelineModelDoc) -> Result<PipelineModel> {
        Ok(PipelineModel {
            surface: ReducedSurface::from_doc(doc.surface)?,
            mf: MfModel::from_doc(doc.mf)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(s: &str) -> Result<PipelineModel> {
        PipelineModel::from_doc(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineModelDoc {
    pub surface: ReducedSurfaceDoc,
    pub mf: MfModelDoc,
}

/// Standard construction: synthetic low-fidelity level below, high-fidelity
/// data on top.
pub fn run(hf: &Dataset, cfg: &PipelineConfig) -> Result<PipelineModel> {
    let (surface, lf) = build_lowfidelity(hf, cfg)?;
    let hf_pairs = Dataset::new(hf.inputs().clone(), hf.outputs().clone(), None)?;
    let mf = nargp::train(&[lf, hf_pairs], &cfg.mf_train_config())
        .map_err(|e| e.with_context("multi-fidelity training"))?;
    Ok(PipelineModel { surface, mf })
}

/// The reversed construction for ordering studies: the bottom level carries
/// a full-space GP's re-predictions, the top level the reduced surface's.
/// Both levels share the high-fidelity rows and `reversed_base` anchor
/// points; the bottom level additionally gets `n_lf_extra` points.
#[derive(Debug, Clone)]
pub struct ReversedModel {
    pub surface: ReducedSurface,
    pub full_gp: GpModel,
    pub mf: MfModel,
}

impl ReversedModel {
    pub fn predict(
        &self,
        test_inputs: &DMatrix<f64>,
        n_particles: usize,
        seed: u64,
    ) -> Result<McPrediction> {
        self.mf.predict_mc(test_inputs, n_particles, seed)
    }
}

pub fn run_reversed(hf: &Dataset, cfg: &PipelineConfig) -> Result<ReversedModel> {
    let surface = ReducedSurface::train(
        hf.inputs(),
        hf.outputs(),
        hf.gradients(),
        &cfg.surface_config(),
    )?;
    let full_gp = fit(
        hf.inputs(),
        hf.outputs(),
        KernelFamily::RbfArd,
        &FitConfig {
            restarts: cfg.surface_restarts,
            noise: cfg.noise,
            seed: child_seed(cfg.seed, stream::HF_GP_FIT),
            ..FitConfig::default()
        },
    )?;

    let bounds = cfg.sampling_bounds(hf)?;
    let n_anchor = cfg.reversed_base + cfg.n_lf_extra;
    let anchors = design(
        DesignKind::Uniform,
        n_anchor,
        &bounds,
        child_seed(cfg.seed, stream::REVERSED_BASE_DESIGN),
    )?;

    let n_hf = hf.n_samples();
    let m = hf.dim();
    let stack = |extra: usize| -> DMatrix<f64> {
        let mut inputs = DMatrix::zeros(n_hf + extra, m);
        inputs.view_mut((0, 0), (n_hf, m)).copy_from(hf.inputs());
        if extra > 0 {
            inputs
                .view_mut((n_hf, 0), (extra, m))
                .copy_from(&anchors.view((0, 0), (extra, m)));
        }
        inputs
    };

    let bottom_inputs = stack(n_anchor);
    let mut bottom_outputs = nalgebra::DVector::zeros(n_hf + n_anchor);
    bottom_outputs.rows_mut(0, n_hf).copy_from(hf.outputs());
    if n_anchor > 0 {
        let (gp_means, _) = full_gp.predict_diag(&anchors)?;
        bottom_outputs.rows_mut(n_hf, n_anchor).copy_from(&gp_means);
    }

    let top_inputs = stack(cfg.reversed_base);
    let mut top_outputs = nalgebra::DVector::zeros(n_hf + cfg.reversed_base);
    top_outputs.rows_mut(0, n_hf).copy_from(hf.outputs());
    if cfg.reversed_base > 0 {
        let base_view = anchors.view((0, 0), (cfg.reversed_base, m)).clone_owned();
        let surf_means = surface.predict_mean(&base_view)?;
        top_outputs
            .rows_mut(n_hf, cfg.reversed_base)
            .copy_from(&surf_means);
    }

    let levels = vec![
        Dataset::new(bottom_inputs, bottom_outputs, None)?,
        Dataset::new(top_inputs, top_outputs, None)?,
    ];
    let mf = nargp::train(&levels, &cfg.mf_train_config())
        .map_err(|e| e.with_context("multi-fidelity training"))?;
    Ok(ReversedModel {
        surface,
        full_gp,
        mf,
    })
}
