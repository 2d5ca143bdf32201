//! DDIM scheduler mathematics with a pluggable denoiser.
//!
//! A linear-beta [`NoiseSchedule`] defines cumulative noise levels
//! `alpha_bar(t)` for `t in 0..=T` (0 is clean data). Deterministic DDIM
//! moves a latent between levels with [`ddim_transition`]; the unit-step ops
//! wrap it, and [`run_inversion`] / [`run_sampling`] chain it over an evenly
//! spaced timestep subsequence. During inversion every attention block's
//! dense-attention output is recorded in an [`InjectionCache`]; sampling can
//! replay those features block-by-block (structure-preserving editing).

use crate::attention::{
    dense_spatio_temporal_attention, dsta_flatten_block, feed_forward, flow_guided_attention,
    flow_guided_attention_projected, AttentionError, AttentionParams, BlobDtype, BlockWeights,
    FeatureVideo, FlattenMode,
};
use crate::trajectory::TrajectorySet;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("attention: {0}")]
    Attention(#[from] AttentionError),
    #[error("schedule must have at least one step")]
    EmptySchedule,
    #[error("betas must satisfy 0 < start <= end < 1, got {start} .. {end}")]
    BadBetaRange { start: f64, end: f64 },
    #[error("timestep {t} outside the valid range {lo}..={hi}")]
    BadTimestep { t: usize, lo: usize, hi: usize },
    #[error("step count {steps} must be in 1..={total}")]
    BadStepCount { steps: usize, total: usize },
    #[error("noise level {0} outside (0, 1]")]
    BadAlpha(f64),
    #[error("denoiser output shape {found:?} does not match latent shape {expected:?}")]
    DenoiserShape {
        expected: [usize; 4],
        found: [usize; 4],
    },
    #[error(
        "injected features for step {step}, block {block} have shape {found:?}, expected \
         {expected:?}"
    )]
    InjectionShape {
        step: usize,
        block: usize,
        expected: [usize; 4],
        found: [usize; 4],
    },
    #[error("injection cache has no entry for step {step}, block {block}")]
    MissingCacheEntry { step: usize, block: usize },
    #[error("injection cache is empty")]
    EmptyCache,
    #[error("injection cache at {path}: {reason}")]
    BadCacheDir { path: String, reason: String },
}

/// Cumulative-noise schedule over `T` unit timesteps.
///
/// `alpha_bar(t)` is the product of `1 - beta_i` for `i <= t`; it is 1 at
/// `t = 0` and strictly decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cum: Vec<f64>,
    beta_start: f64,
    beta_end: f64,
}

impl NoiseSchedule {
    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cum(&self) -> &[f64] {
        &self.alphas_cum
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    /// Cumulative signal level at `t in 0..=T`; `alpha_bar(0) = 1` (clean
    /// data).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.total_steps(), "timestep {t} beyond schedule");
        if t == 0 {
            1.0
        } else {
            self.alphas_cum[t - 1]
        }
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            total: self.total_steps(),
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DiffusionError> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, &self.spec())?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DiffusionError> {
        let spec: ScheduleSpec = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        spec.build()
    }
}

/// The three numbers a linear schedule is rebuilt from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule, DiffusionError> {
        make_linear_schedule(self.total, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleSpec {
    /// Latent-diffusion convention: 1000 steps, betas 0.00085 to 0.012.
    fn default() -> Self {
        Self {
            total: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

/// Linear beta ramp inclusive of both endpoints (a single step uses
/// `beta_start`).
pub fn make_linear_schedule(
    total: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule, DiffusionError> {
    if total == 0 {
        return Err(DiffusionError::EmptySchedule);
    }
    let valid = beta_start.is_finite()
        && beta_end.is_finite()
        && 0.0 < beta_start
        && beta_start <= beta_end
        && beta_end < 1.0;
    if !valid {
        return Err(DiffusionError::BadBetaRange {
            start: beta_start,
            end: beta_end,
        });
    }
    let betas: Vec<f64> = if total == 1 {
        vec![beta_start]
    } else {
        (0..total)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (total - 1) as f64)
            .collect()
    };
    let mut alphas_cum = Vec::with_capacity(total);
    let mut acc = 1.0;
    for &b in &betas {
        acc *= 1.0 - b;
        alphas_cum.push(acc);
    }
    Ok(NoiseSchedule {
        betas,
        alphas_cum,
        beta_start,
        beta_end,
    })
}

/// Opaque conditioning payload threaded through denoisers. The toy models
/// ignore it; real backends would hang prompt embeddings here.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conditioning {
    pub label: Option<String>,
}

/// Observer of a denoiser's per-block intermediate features. `on_block` may
/// mutate the features in place (that is how injection works).
pub trait BlockHook {
    fn on_block(&mut self, block: usize, features: &mut FeatureVideo)
        -> Result<(), DiffusionError>;
}

/// Hook that leaves features untouched.
pub struct NoopHook;

impl BlockHook for NoopHook {
    fn on_block(&mut self, _: usize, _: &mut FeatureVideo) -> Result<(), DiffusionError> {
        Ok(())
    }
}

/// Noise-prediction model `eps_theta(z, t)`.
pub trait Denoiser {
    /// Predicts the noise residual for latent `z` at timestep `t`.
    fn evaluate(
        &self,
        z: &FeatureVideo,
        t: usize,
        ctx: &Conditioning,
    ) -> Result<FeatureVideo, DiffusionError>;

    /// Number of attention blocks whose intermediate features a hook can
    /// observe.
    fn block_count(&self) -> usize {
        0
    }

    /// Like [`Self::evaluate`] but passing each block's dense-attention
    /// output through `hook` (in block order) before the block continues.
    fn evaluate_hooked(
        &self,
        z: &FeatureVideo,
        t: usize,
        ctx: &Conditioning,
        hook: &mut dyn BlockHook,
    ) -> Result<FeatureVideo, DiffusionError> {
        let _ = hook;
        self.evaluate(z, t, ctx)
    }
}

/// Analytic stand-ins for a trained noise predictor.
#[derive(Debug, Clone)]
pub enum ToyDenoiser {
    /// `eps = 0`: inversion and sampling become exact mutual inverses.
    Zero,
    /// `eps = scale * z`.
    Linear { scale: f64 },
    /// `eps` = one dense-attention + trajectory-attention + feed-forward
    /// block applied to `z`.
    AttentionBlock {
        weights: Box<BlockWeights>,
        params: AttentionParams,
        trajectories: Box<TrajectorySet>,
        mode: FlattenMode,
    },
}

impl Denoiser for ToyDenoiser {
    fn evaluate(
        &self,
        z: &FeatureVideo,
        _t: usize,
        _ctx: &Conditioning,
    ) -> Result<FeatureVideo, DiffusionError> {
        match self {
            Self::Zero => Ok(FeatureVideo::zeros(
                z.frames(),
                z.height(),
                z.width(),
                z.channels(),
            )),
            Self::Linear { scale } => {
                Ok(FeatureVideo::new(z.data() * *scale).map_err(DiffusionError::Attention)?)
            }
            Self::AttentionBlock {
                weights,
                params,
                trajectories,
                mode,
            } => Ok(dsta_flatten_block(z, trajectories, weights, params, *mode)?),
        }
    }

    fn block_count(&self) -> usize {
        match self {
            Self::AttentionBlock { .. } => 1,
            _ => 0,
        }
    }

    fn evaluate_hooked(
        &self,
        z: &FeatureVideo,
        t: usize,
        ctx: &Conditioning,
        hook: &mut dyn BlockHook,
    ) -> Result<FeatureVideo, DiffusionError> {
        match self {
            Self::AttentionBlock {
                weights,
                params,
                trajectories,
                mode,
            } => {
                let mut h = dense_spatio_temporal_attention(z, &weights.proj, params)?;
                hook.on_block(0, &mut h)?;
                let g = match mode {
                    FlattenMode::Direct => flow_guided_attention(&h, trajectories, params)?,
                    FlattenMode::Reproject => {
                        flow_guided_attention_projected(&h, trajectories, &weights.proj, params)?
                    }
                };
                Ok(feed_forward(&g, &weights.ff)?)
            }
            _ => self.evaluate(z, t, ctx),
        }
    }
}

fn shape_of(z: &FeatureVideo) -> [usize; 4] {
    [z.frames(), z.height(), z.width(), z.channels()]
}

fn check_alpha(a: f64) -> Result<(), DiffusionError> {
    if !a.is_finite() || a <= 0.0 || a > 1.0 {
        return Err(DiffusionError::BadAlpha(a));
    }
    Ok(())
}

/// One deterministic DDIM transition of `z` from signal level `alpha_from`
/// to `alpha_to` given the predicted noise `eps`:
///
/// ```text
/// z' = sqrt(alpha_to / alpha_from) * z
///    + sqrt(alpha_to) * (sqrt(1/alpha_to - 1) - sqrt(1/alpha_from - 1)) * eps
/// ```
///
/// The same formula serves both directions; with equal levels it is the
/// identity for any `eps`.
pub fn ddim_transition(
    z: &FeatureVideo,
    alpha_from: f64,
    alpha_to: f64,
    eps: &FeatureVideo,
) -> Result<FeatureVideo, DiffusionError> {
    check_alpha(alpha_from)?;
    check_alpha(alpha_to)?;
    if shape_of(z) != shape_of(eps) {
        return Err(DiffusionError::DenoiserShape {
            expected: shape_of(z),
            found: shape_of(eps),
        });
    }
    let scale = (alpha_to / alpha_from).sqrt();
    let drift = alpha_to.sqrt() * ((1.0 / alpha_to - 1.0).sqrt() - (1.0 / alpha_from - 1.0).sqrt());
    let data = z.data() * scale + &(eps.data() * drift);
    Ok(FeatureVideo::new(data)?)
}

fn evaluate_checked(
    denoiser: &dyn Denoiser,
    z: &FeatureVideo,
    t: usize,
    ctx: &Conditioning,
    hook: &mut dyn BlockHook,
) -> Result<FeatureVideo, DiffusionError> {
    let eps = denoiser.evaluate_hooked(z, t, ctx, hook)?;
    if shape_of(&eps) != shape_of(z) {
        return Err(DiffusionError::DenoiserShape {
            expected: shape_of(z),
            found: shape_of(&eps),
        });
    }
    Ok(eps)
}

/// Closed-form forward noising `z_t = sqrt(alpha_bar_t) z0 +
/// sqrt(1 - alpha_bar_t) eps` with `eps` a seeded standard-normal draw
/// (row-major ChaCha8 stream).
pub fn forward_noise_sample(
    z0: &FeatureVideo,
    t: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<FeatureVideo, DiffusionError> {
    let total = schedule.total_steps();
    if t == 0 || t > total {
        return Err(DiffusionError::BadTimestep {
            t,
            lo: 1,
            hi: total,
        });
    }
    let a = schedule.alpha_bar(t);
    let eps = FeatureVideo::random(z0.frames(), z0.height(), z0.width(), z0.channels(), seed);
    let data = z0.data() * a.sqrt() + &(eps.data() * (1.0 - a).sqrt());
    Ok(FeatureVideo::new(data)?)
}

/// One unit inversion step `t -> t + 1` (noise added deterministically),
/// with the noise prediction evaluated at the source level `t`.
pub fn ddim_inversion_step(
    z: &FeatureVideo,
    t: usize,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    ctx: &Conditioning,
) -> Result<FeatureVideo, DiffusionError> {
    let total = schedule.total_steps();
    if t + 1 > total {
        return Err(DiffusionError::BadTimestep {
            t,
            lo: 0,
            hi: total - 1,
        });
    }
    let eps = evaluate_checked(denoiser, z, t, ctx, &mut NoopHook)?;
    ddim_transition(z, schedule.alpha_bar(t), schedule.alpha_bar(t + 1), &eps)
}

/// One unit sampling step `t -> t - 1`, with the noise prediction evaluated
/// at the source level `t`.
pub fn ddim_sampling_step(
    z: &FeatureVideo,
    t: usize,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    ctx: &Conditioning,
) -> Result<FeatureVideo, DiffusionError> {
    let total = schedule.total_steps();
    if t == 0 || t > total {
        return Err(DiffusionError::BadTimestep {
            t,
            lo: 1,
            hi: total,
        });
    }
    let eps = evaluate_checked(denoiser, z, t, ctx, &mut NoopHook)?;
    ddim_transition(z, schedule.alpha_bar(t), schedule.alpha_bar(t - 1), &eps)
}

/// Evenly spaced timestep subsequence `t_j = floor(j * total / steps)` for
/// `j = 0..=steps`; strictly increasing from 0 to `total` (rounding toward
/// earlier timesteps).
pub fn timestep_subsequence(total: usize, steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if steps == 0 || steps > total {
        return Err(DiffusionError::BadStepCount { steps, total });
    }
    Ok((0..=steps).map(|j| j * total / steps).collect())
}

/// Post-dense-attention features recorded during inversion, keyed by
/// `(step index, block id)`, plus the source timestep of each step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InjectionCache {
    entries: BTreeMap<(usize, usize), FeatureVideo>,
    timesteps: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CacheIndex {
    timesteps: Vec<usize>,
    entries: Vec<CacheEntryMeta>,
}

#[derive(Serialize, Deserialize)]
struct CacheEntryMeta {
    step: usize,
    block: usize,
    file: String,
}

impl InjectionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, step: usize, block: usize, features: FeatureVideo) {
        self.entries.insert((step, block), features);
    }

    pub fn get(&self, step: usize, block: usize) -> Option<&FeatureVideo> {
        self.entries.get(&(step, block))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Source timestep of each recorded inversion step (index = step).
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn keys(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.keys().copied()
    }

    /// Step whose source timestep is nearest to `t`; ties pick the earlier
    /// step.
    pub fn nearest_step(&self, t: usize) -> Option<usize> {
        let mut best: Option<(usize, usize)> = None;
        for (step, &ts) in self.timesteps.iter().enumerate() {
            let d = ts.abs_diff(t);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, step));
            }
        }
        best.map(|(_, step)| step)
    }

    /// Writes the cache as a directory: `index.json` plus one f64 feature
    /// blob per entry.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), DiffusionError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut metas = Vec::with_capacity(self.entries.len());
        for (&(step, block), features) in &self.entries {
            let file = format!("step{step}_block{block}.bin");
            features.write_blob(dir.join(&file), BlobDtype::F64)?;
            metas.push(CacheEntryMeta { step, block, file });
        }
        let index = CacheIndex {
            timesteps: self.timesteps.clone(),
            entries: metas,
        };
        let mut out = BufWriter::new(File::create(dir.join("index.json"))?);
        serde_json::to_writer_pretty(&mut out, &index)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, DiffusionError> {
        let dir = dir.as_ref();
        let bad = |reason: String| DiffusionError::BadCacheDir {
            path: dir.display().to_string(),
            reason,
        };
        let index_path = dir.join("index.json");
        if !index_path.is_file() {
            return Err(bad("missing index.json".to_owned()));
        }
        let index: CacheIndex = serde_json::from_reader(BufReader::new(File::open(index_path)?))?;
        let mut cache = Self {
            entries: BTreeMap::new(),
            timesteps: index.timesteps,
        };
        for meta in index.entries {
            if meta.file.contains(['/', '\\']) || meta.file.contains("..") {
                return Err(bad(format!(
                    "entry file {:?} escapes the directory",
                    meta.file
                )));
            }
            let features = FeatureVideo::read_blob(dir.join(&meta.file))?;
            cache.entries.insert((meta.step, meta.block), features);
        }
        Ok(cache)
    }
}

struct RecordHook<'a> {
    cache: &'a mut InjectionCache,
    step: usize,
}

impl BlockHook for RecordHook<'_> {
    fn on_block(
        &mut self,
        block: usize,
        features: &mut FeatureVideo,
    ) -> Result<(), DiffusionError> {
        self.cache.insert(self.step, block, features.clone());
        Ok(())
    }
}

struct InjectHook<'a> {
    cache: &'a InjectionCache,
    step: usize,
}

impl BlockHook for InjectHook<'_> {
    fn on_block(
        &mut self,
        block: usize,
        features: &mut FeatureVideo,
    ) -> Result<(), DiffusionError> {
        let cached = self
            .cache
            .get(self.step, block)
            .ok_or(DiffusionError::MissingCacheEntry {
                step: self.step,
                block,
            })?;
        if shape_of(cached) != shape_of(features) {
            return Err(DiffusionError::InjectionShape {
                step: self.step,
                block,
                expected: shape_of(features),
                found: shape_of(cached),
            });
        }
        *features = cached.clone();
        Ok(())
    }
}

/// Runs the inversion chain `z_0 -> z_T` over `steps` evenly spaced
/// segments, recording every block's dense-attention output at every step.
/// The noise prediction of each segment is evaluated at its source timestep.
pub fn run_inversion(
    z0: &FeatureVideo,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    steps: usize,
    ctx: &Conditioning,
) -> Result<(FeatureVideo, InjectionCache), DiffusionError> {
    let ts = timestep_subsequence(schedule.total_steps(), steps)?;
    let mut cache = InjectionCache::new();
    let mut z = z0.clone();
    for j in 0..steps {
        let (from, to) = (ts[j], ts[j + 1]);
        let mut hook = RecordHook {
            cache: &mut cache,
            step: j,
        };
        let eps = evaluate_checked(denoiser, &z, from, ctx, &mut hook)?;
        cache.timesteps.push(from);
        z = ddim_transition(&z, schedule.alpha_bar(from), schedule.alpha_bar(to), &eps)?;
    }
    Ok((z, cache))
}

/// Runs the sampling chain `z_T -> z_0` over `steps` evenly spaced segments.
///
/// With `injection`, each block's dense-attention output is replaced by the
/// cached features of the inversion step whose source timestep is nearest to
/// the current one (ties resolve to the earlier step); a missing entry or a
/// shape clash is a configuration error.
pub fn run_sampling(
    z_t: &FeatureVideo,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    steps: usize,
    ctx: &Conditioning,
    injection: Option<&InjectionCache>,
) -> Result<FeatureVideo, DiffusionError> {
    let ts = timestep_subsequence(schedule.total_steps(), steps)?;
    let mut z = z_t.clone();
    for j in (0..steps).rev() {
        let (from, to) = (ts[j + 1], ts[j]);
        let eps = match injection {
            Some(cache) => {
                let step = cache.nearest_step(from).ok_or(DiffusionError::EmptyCache)?;
                let mut hook = InjectHook { cache, step };
                evaluate_checked(denoiser, &z, from, ctx, &mut hook)?
            }
            None => evaluate_checked(denoiser, &z, from, ctx, &mut NoopHook)?,
        };
        z = ddim_transition(&z, schedule.alpha_bar(from), schedule.alpha_bar(to), &eps)?;
    }
    Ok(z)
}
