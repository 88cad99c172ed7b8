//! Euler sampling over an SGM-uniform sigma schedule with classifier-free
//! guidance between the negative and the positive branch.
//!
//! The network output is read as a noise prediction `eps`, so the denoised
//! estimate at noise level `sigma` is `x - sigma·eps`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dit::{Conditioning, Stack, StackError};
use crate::fixture::{self, FixtureError};
use crate::par;
use crate::regions::RegionMask;
use crate::rng::RngSeed;
use crate::tensor::{self, seeded_normal, Tensor, TensorError};
use crate::text::TextState;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid guidance config: {0}")]
    Guidance(String),
    #[error("euler step from sigma = 0")]
    ZeroSigma,
    #[error("step {step}: {source}")]
    Model {
        step: usize,
        #[source]
        source: StackError,
    },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, SamplerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    SgmUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub steps: usize,
    pub sigma_max: f32,
    pub sigma_min: f32,
    #[serde(default)]
    pub kind: ScheduleKind,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            steps: 20,
            sigma_max: 1.0,
            sigma_min: 0.01,
            kind: ScheduleKind::SgmUniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfgConfig {
    pub scale: f32,
    pub denoise: f32,
}

impl Default for CfgConfig {
    fn default() -> Self {
        CfgConfig {
            scale: 6.0,
            denoise: 1.0,
        }
    }
}

impl CfgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(SamplerError::Guidance(format!("scale must be ≥ 0, got {}", self.scale)));
        }
        if !(self.denoise > 0.0 && self.denoise <= 1.0) {
            return Err(SamplerError::Guidance(format!(
                "denoise must be in (0, 1], got {}",
                self.denoise
            )));
        }
        Ok(())
    }
}

/// `steps` uniformly spaced timesteps from `t_max` toward `t_min`
/// (`t_k = t_max − k·(t_max − t_min)/steps`, `k < steps`), mapped to sigma by
/// the identity, followed by a terminal 0. Length `steps + 1`.
pub fn sgm_uniform_sigmas(cfg: &SchedulerConfig) -> Result<Vec<f32>> {
    if cfg.steps < 1 {
        return Err(SamplerError::Schedule("steps must be ≥ 1".into()));
    }
    if !(cfg.sigma_min > 0.0 && cfg.sigma_max > cfg.sigma_min && cfg.sigma_max.is_finite()) {
        return Err(SamplerError::Schedule(format!(
            "need sigma_max > sigma_min > 0, got {} and {}",
            cfg.sigma_max, cfg.sigma_min
        )));
    }
    let (t_max, t_min) = (cfg.sigma_max as f64, cfg.sigma_min as f64);
    let delta = (t_max - t_min) / cfg.steps as f64;
    let mut sigmas: Vec<f32> = (0..cfg.steps).map(|k| (t_max - k as f64 * delta) as f32).collect();
    sigmas.push(0.0);
    Ok(sigmas)
}

/// The tail of the schedule used for a given denoise strength:
/// `ceil(denoise·steps)` transitions ending at 0.
pub fn truncate_for_denoise(sigmas: &[f32], denoise: f32) -> Result<Vec<f32>> {
    if !(denoise > 0.0 && denoise <= 1.0) {
        return Err(SamplerError::Guidance(format!("denoise must be in (0, 1], got {denoise}")));
    }
    let steps = sigmas.len().saturating_sub(1);
    let run = ((denoise as f64 * steps as f64).ceil() as usize).clamp(1, steps);
    Ok(sigmas[steps - run..].to_vec())
}

/// `uncond + scale·(cond − uncond)`.
pub fn cfg_combine(uncond: &Tensor, cond: &Tensor, scale: f32) -> Result<Tensor> {
    if uncond.shape() != cond.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "cfg_combine",
            left: uncond.shape().to_vec(),
            right: cond.shape().to_vec(),
        }
        .into());
    }
    let data = uncond
        .data()
        .iter()
        .zip(cond.data())
        .map(|(&u, &c)| if scale == 1.0 { c } else { u + scale * (c - u) })
        .collect();
    Ok(Tensor::new(uncond.shape().to_vec(), data)?)
}

/// One Euler step from `sigma` to `sigma_next` given the denoised estimate.
pub fn euler_step(x: &Tensor, sigma: f32, sigma_next: f32, denoised: &Tensor) -> Result<Tensor> {
    if sigma == 0.0 {
        return Err(SamplerError::ZeroSigma);
    }
    if sigma_next == 0.0 {
        // x + (0 − σ)(x − d)/σ = d; return it exactly
        return Ok(denoised.clone());
    }
    let dt = sigma_next - sigma;
    let data = x
        .data()
        .iter()
        .zip(denoised.data())
        .map(|(&xv, &dv)| xv + dt * ((xv - dv) / sigma))
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

/// What the sampler needs from a denoising network.
pub trait NoisePredictor: Sync {
    fn channels(&self) -> usize;
    fn predict_positive(&self, x: &Tensor, sigma: f32, cond: &Conditioning, masks: &[RegionMask]) -> std::result::Result<Tensor, StackError>;
    fn predict_negative(&self, x: &Tensor, sigma: f32, negative: &TextState) -> std::result::Result<Tensor, StackError>;
}

impl NoisePredictor for Stack {
    fn channels(&self) -> usize {
        self.config().d_model
    }

    fn predict_positive(&self, x: &Tensor, sigma: f32, cond: &Conditioning, masks: &[RegionMask]) -> std::result::Result<Tensor, StackError> {
        self.forward(x, sigma, cond, masks)
    }

    fn predict_negative(&self, x: &Tensor, sigma: f32, negative: &TextState) -> std::result::Result<Tensor, StackError> {
        self.forward_negative(x, sigma, negative)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub step: usize,
    pub sigma: f32,
    pub latent: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// Entry 0 is the initial noise; entry k is the latent after k steps.
    pub trajectory: Vec<TrajectoryStep>,
}

impl SampleOutput {
    pub fn final_latent(&self) -> &Tensor {
        &self.trajectory.last().expect("trajectory is never empty").latent
    }

    pub fn steps_run(&self) -> usize {
        self.trajectory.len() - 1
    }

    /// One fixture per trajectory entry plus `trajectory.json`
    /// (`[{step, sigma, file}]`).
    pub fn dump(&self, dir: impl AsRef<Path>) -> Result<Vec<TrajectoryEntry>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| SamplerError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut entries = Vec::with_capacity(self.trajectory.len());
        for t in &self.trajectory {
            let file = format!("step_{:03}.txt", t.step);
            fixture::write_tensor(dir.join(&file), &t.latent, &[("sigma", &t.sigma.to_string())])?;
            entries.push(TrajectoryEntry {
                step: t.step,
                sigma: t.sigma,
                file,
            });
        }
        let path = dir.join("trajectory.json");
        fs::write(&path, serde_json::to_string_pretty(&entries)?).map_err(|source| SamplerError::Io { path, source })?;
        Ok(entries)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub step: usize,
    pub sigma: f32,
    pub file: String,
}

/// Run the full sampler. The latent has one row per mask cell and
/// `model.channels()` columns; initial noise is `N(0,1)·sigma_start`.
pub fn sample<M: NoisePredictor>(
    model: &M,
    cond: &Conditioning,
    masks: &[RegionMask],
    sched: &SchedulerConfig,
    cfg: &CfgConfig,
    seed: RngSeed,
) -> Result<SampleOutput> {
    cfg.validate()?;
    let sigmas = truncate_for_denoise(&sgm_uniform_sigmas(sched)?, cfg.denoise)?;
    let len = masks.first().map(RegionMask::len).ok_or_else(|| {
        SamplerError::Schedule("at least one region mask is needed to size the latent".into())
    })?;
    let noise = seeded_normal(vec![len, model.channels()], seed, 1.0)?;
    let mut x = tensor::scale(&noise, sigmas[0])?;
    let mut trajectory = vec![TrajectoryStep {
        step: 0,
        sigma: sigmas[0],
        latent: x.clone(),
    }];
    for (k, pair) in sigmas.windows(2).enumerate() {
        let (sigma, next) = (pair[0], pair[1]);
        let (pos, neg) = par::join(
            || model.predict_positive(&x, sigma, cond, masks),
            || model.predict_negative(&x, sigma, &cond.negative),
        );
        let wrap = |source| SamplerError::Model { step: k, source };
        let eps = cfg_combine(&neg.map_err(wrap)?, &pos.map_err(wrap)?, cfg.scale)?;
        let denoised = tensor::sub(&x, &tensor::scale(&eps, sigma)?)?;
        x = euler_step(&x, sigma, next, &denoised)?;
        trajectory.push(TrajectoryStep {
            step: k + 1,
            sigma: next,
            latent: x.clone(),
        });
    }
    Ok(SampleOutput { trajectory })
}
