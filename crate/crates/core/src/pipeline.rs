//! End-to-end editing pipeline: a stack of attention blocks acting as a toy
//! noise predictor, driven through DDIM inversion (with feature caching)
//! and DDIM sampling (with optional feature injection).
//!
//! Each block runs dense spatio-temporal attention, optionally
//! trajectory-restricted attention on its output, then a feed-forward map.
//! Trajectory attention can be toggled per phase (inversion / sampling);
//! with it off a block is exactly the dense-plus-feed-forward composition.

use crate::attention::{
    dense_spatio_temporal_attention, feed_forward, flow_guided_attention,
    flow_guided_attention_projected, AttentionError, AttentionParams, BlockWeights, FeatureVideo,
    FlattenMode,
};
use crate::diffusion::{
    run_inversion, run_sampling, BlockHook, Conditioning, Denoiser, DiffusionError, InjectionCache,
    NoiseSchedule, ScheduleSpec,
};
use crate::metrics::{psnr, ssim_mean, ImageSequence, MetricsError};
use crate::trajectory::TrajectorySet;
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("attention: {0}")]
    Attention(#[from] AttentionError),
    #[error("diffusion: {0}")]
    Diffusion(#[from] DiffusionError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("a denoiser needs at least one block")]
    NoBlocks,
    #[error("feed-forward hidden width must be positive")]
    BadHidden,
}

/// Everything one pipeline run needs, JSON-serializable so runs reproduce
/// from their persisted configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub blocks: usize,
    pub channels: usize,
    pub heads: usize,
    /// Feed-forward hidden width; defaults to `2 * channels`.
    pub ff_hidden: Option<usize>,
    pub mode: FlattenMode,
    pub flatten_inversion: bool,
    pub flatten_sampling: bool,
    pub inv_steps: usize,
    pub samp_steps: usize,
    /// Build the predictor with all-zero weights (inert noise prediction)
    /// instead of seeded random ones.
    pub zero_weights: bool,
    pub schedule: ScheduleSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            blocks: 2,
            channels: 8,
            heads: 2,
            ff_hidden: None,
            mode: FlattenMode::Direct,
            flatten_inversion: true,
            flatten_sampling: true,
            inv_steps: 100,
            samp_steps: 50,
            zero_weights: false,
            schedule: ScheduleSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn hidden(&self) -> usize {
        self.ff_hidden.unwrap_or(2 * self.channels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

/// One attention block of the toy noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub weights: BlockWeights,
    pub params: AttentionParams,
    pub mode: FlattenMode,
}

/// Flat stack of attention blocks acting as the noise predictor
/// `eps_theta`, with trajectory attention toggleable per phase. Weights are
/// a pure function of the construction seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyUNet {
    blocks: Vec<BlockConfig>,
    flatten_inversion: bool,
    flatten_sampling: bool,
    seed: u64,
}

/// Which driver a bound denoiser is serving; selects the flatten toggle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Inversion,
    Sampling,
}

impl ToyUNet {
    /// Seeded Gaussian weights (std `1/sqrt(channels)`), all blocks drawn
    /// from one ChaCha8 stream in block order; `zero_weights` selects the
    /// inert all-zero predictor instead.
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        if cfg.zero_weights {
            return Self::zeroed(cfg);
        }
        Self::build(cfg, |rng| {
            BlockWeights::random_from(rng, cfg.channels, cfg.hidden())
        })
    }

    /// All-zero weights: the predictor outputs zero noise, so DDIM reduces
    /// to its closed-form scaling.
    pub fn zeroed(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        Self::build(cfg, |_| BlockWeights::zeros(cfg.channels, cfg.hidden()))
    }

    fn build(
        cfg: &PipelineConfig,
        mut make: impl FnMut(&mut ChaCha8Rng) -> BlockWeights,
    ) -> Result<Self, PipelineError> {
        if cfg.blocks == 0 {
            return Err(PipelineError::NoBlocks);
        }
        if cfg.hidden() == 0 {
            return Err(PipelineError::BadHidden);
        }
        let params = AttentionParams::for_channels(cfg.channels, cfg.heads)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockConfig {
                weights: make(&mut rng),
                params,
                mode: cfg.mode,
            })
            .collect();
        Ok(Self {
            blocks,
            flatten_inversion: cfg.flatten_inversion,
            flatten_sampling: cfg.flatten_sampling,
            seed: cfg.seed,
        })
    }

    pub fn blocks(&self) -> &[BlockConfig] {
        &self.blocks
    }

    pub fn channels(&self) -> usize {
        self.blocks[0].params.channels()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn flatten_inversion(&self) -> bool {
        self.flatten_inversion
    }

    pub fn flatten_sampling(&self) -> bool {
        self.flatten_sampling
    }

    /// Returns a copy with trajectory attention forced on or off in both
    /// phases (the reconstruction experiment's with/without pair).
    pub fn with_flatten(&self, enabled: bool) -> Self {
        let mut copy = self.clone();
        copy.flatten_inversion = enabled;
        copy.flatten_sampling = enabled;
        copy
    }

    /// Binds the network to a trajectory set for one phase, yielding the
    /// denoiser the DDIM drivers consume.
    pub fn bind<'a>(&'a self, set: &'a TrajectorySet, phase: Phase) -> PhasedUNet<'a> {
        PhasedUNet {
            unet: self,
            set,
            flatten: match phase {
                Phase::Inversion => self.flatten_inversion,
                Phase::Sampling => self.flatten_sampling,
            },
        }
    }
}

/// A [`ToyUNet`] bound to a trajectory set with the phase's flatten toggle
/// resolved.
pub struct PhasedUNet<'a> {
    unet: &'a ToyUNet,
    set: &'a TrajectorySet,
    flatten: bool,
}

impl Denoiser for PhasedUNet<'_> {
    fn evaluate(
        &self,
        z: &FeatureVideo,
        t: usize,
        ctx: &Conditioning,
    ) -> Result<FeatureVideo, DiffusionError> {
        self.evaluate_hooked(z, t, ctx, &mut crate::diffusion::NoopHook)
    }

    fn block_count(&self) -> usize {
        self.unet.blocks.len()
    }

    fn evaluate_hooked(
        &self,
        z: &FeatureVideo,
        _t: usize,
        _ctx: &Conditioning,
        hook: &mut dyn BlockHook,
    ) -> Result<FeatureVideo, DiffusionError> {
        let mut cur = z.clone();
        for (b, block) in self.unet.blocks.iter().enumerate() {
            let mut h = dense_spatio_temporal_attention(&cur, &block.weights.proj, &block.params)?;
            hook.on_block(b, &mut h)?;
            let g = if self.flatten {
                match block.mode {
                    FlattenMode::Direct => flow_guided_attention(&h, self.set, &block.params)?,
                    FlattenMode::Reproject => flow_guided_attention_projected(
                        &h,
                        self.set,
                        &block.weights.proj,
                        &block.params,
                    )?,
                }
            } else {
                h
            };
            cur = feed_forward(&g, &block.weights.ff)?;
        }
        Ok(cur)
    }
}

/// DDIM-inverts `z0` with the network bound for inversion, returning the
/// noise latent and the per-(step, block) cache of dense-attention
/// features.
pub fn invert_video(
    z0: &FeatureVideo,
    unet: &ToyUNet,
    set: &TrajectorySet,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<(FeatureVideo, InjectionCache), PipelineError> {
    let denoiser = unet.bind(set, Phase::Inversion);
    Ok(run_inversion(
        z0,
        schedule,
        &denoiser,
        steps,
        &Conditioning::default(),
    )?)
}

/// DDIM-samples from `z_t` with inversion features injected into every
/// block (structure-preserving edit). A cache that does not cover the
/// sampling steps or shapes is a configuration error.
pub fn edit_video(
    z_t: &FeatureVideo,
    unet: &ToyUNet,
    set: &TrajectorySet,
    schedule: &NoiseSchedule,
    steps: usize,
    cache: &InjectionCache,
) -> Result<FeatureVideo, PipelineError> {
    let denoiser = unet.bind(set, Phase::Sampling);
    Ok(run_sampling(
        z_t,
        schedule,
        &denoiser,
        steps,
        &Conditioning::default(),
        Some(cache),
    )?)
}

/// DDIM-samples from `z_t` without injection.
pub fn sample_video(
    z_t: &FeatureVideo,
    unet: &ToyUNet,
    set: &TrajectorySet,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<FeatureVideo, PipelineError> {
    let denoiser = unet.bind(set, Phase::Sampling);
    Ok(run_sampling(
        z_t,
        schedule,
        &denoiser,
        steps,
        &Conditioning::default(),
        None,
    )?)
}

/// PSNR/SSIM pair of one reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    #[serde(rename = "psnr")]
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Reconstruction quality with trajectory attention enabled vs disabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub with_flow_guidance: QualityScores,
    pub without_flow_guidance: QualityScores,
}

impl ReconstructionReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

/// Latent frames mapped to unit range by `z0`'s global min/max (constant
/// latents map to 0.5), clamping whatever falls outside.
fn latent_planes(z: &FeatureVideo, lo: f64, hi: f64) -> Result<ImageSequence, MetricsError> {
    let span = hi - lo;
    let frames = (0..z.frames())
        .map(|k| {
            let plane = z.data().index_axis(Axis(0), k).to_owned();
            if span > 0.0 {
                plane.mapv(|v| (v - lo) / span)
            } else {
                plane.mapv(|_| 0.5)
            }
        })
        .collect();
    ImageSequence::new(frames)
}

/// Inverts and reconstructs `z0` twice — trajectory attention on, then off —
/// without feature injection, and scores both reconstructions against `z0`
/// (PSNR globally, SSIM averaged over `(frame, channel)` planes; needs
/// height and width of at least 11). Latents are normalized to unit range
/// by `z0`'s min/max.
pub fn reconstruct_experiment(
    z0: &FeatureVideo,
    unet: &ToyUNet,
    set: &TrajectorySet,
    schedule: &NoiseSchedule,
    inv_steps: usize,
    samp_steps: usize,
) -> Result<ReconstructionReport, PipelineError> {
    let lo = z0.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = z0.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let reference = latent_planes(z0, lo, hi)?;
    let mut scores = Vec::with_capacity(2);
    for enabled in [true, false] {
        let variant = unet.with_flatten(enabled);
        let (z_t, _) = invert_video(z0, &variant, set, schedule, inv_steps)?;
        let recon = sample_video(&z_t, &variant, set, schedule, samp_steps)?;
        let planes = latent_planes(&recon, lo, hi)?;
        scores.push(QualityScores {
            psnr_db: psnr(&reference, &planes)?,
            ssim: ssim_mean(&reference, &planes)?,
        });
    }
    Ok(ReconstructionReport {
        with_flow_guidance: scores[0],
        without_flow_guidance: scores[1],
    })
}
