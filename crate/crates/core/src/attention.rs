//! Feature videos and the attention operators over them.
//!
//! A [`FeatureVideo`] is a dense latent grid `[frames, height, width,
//! channels]`. Three attention flavours operate on it:
//!
//! - [`spatial_attention`]: each patch attends within its own frame;
//! - [`dense_spatio_temporal_attention`]: each patch attends over every patch
//!   of every frame;
//! - [`flow_guided_attention`]: each patch attends only over the *other*
//!   patches of its own flow trajectory, with no positional encoding.
//!
//! A transformer block chains them as dense attention, then flow-guided
//! attention, then a feed-forward map ([`dsta_flatten_block`]).
//!
//! Softmax combination is *anchored*: `out = v0 + sum_i w_i * (v_i - v0)`.
//! This is algebraically the usual convex combination, but when every value
//! row is identical the output equals that row bit-for-bit, so attention over
//! a static video is an exact fixed point.

use crate::trajectory::{validate_partition, PatchRef, TrajectorySet};
use ndarray::{s, Array1, Array2, Array4, ArrayBase, ArrayView1, ArrayView2, Data, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("non-finite feature value at (frame {frame}, y {y}, x {x}, channel {channel})")]
    NonFinite {
        frame: usize,
        y: usize,
        x: usize,
        channel: usize,
    },
    #[error("head count and head dim must be positive")]
    BadHeads,
    #[error("{channels} channels cannot split into {heads} heads")]
    BadHeadSplit { channels: usize, heads: usize },
    #[error("{what} must be {expected_rows}x{expected_cols}, found {rows}x{cols}")]
    WeightShape {
        what: &'static str,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("attention params expect {expected} channels but features have {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error(
        "feature grid {frames}x{height}x{width} does not match trajectory grid \
         {set_frames}x{set_height}x{set_width}"
    )]
    GridMismatch {
        frames: usize,
        height: usize,
        width: usize,
        set_frames: usize,
        set_height: usize,
        set_width: usize,
    },
    #[error("trajectory set does not partition the grid: {0}")]
    BadPartition(String),
    #[error("attention requires at least one key row")]
    EmptyKeys,
    #[error("query has {q} dims but key rows have {k}")]
    QueryKeyDim { q: usize, k: usize },
    #[error("{keys} key rows vs {values} value rows")]
    KeyValueCount { keys: usize, values: usize },
    #[error("mask must be {n}x{n}, found {rows}x{cols}")]
    MaskShape { n: usize, rows: usize, cols: usize },
    #[error("feature blob {path}: {reason}")]
    BadBlob { path: String, reason: String },
}

/// Latent features of a video: `[frames, height, width, channels]`, all
/// finite, stored f64 in standard (row-major) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVideo {
    data: Array4<f64>,
}

impl FeatureVideo {
    /// Wraps a tensor, normalising the layout and rejecting non-finite
    /// values.
    pub fn new(data: Array4<f64>) -> Result<Self, AttentionError> {
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        if let Some(((frame, y, x, channel), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite())
        {
            return Err(AttentionError::NonFinite {
                frame,
                y,
                x,
                channel,
            });
        }
        Ok(Self { data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            data: Array4::zeros((frames, height, width, channels)),
        }
    }

    /// Standard-normal features drawn in row-major `(frame, y, x, channel)`
    /// order from a ChaCha8 stream.
    pub fn random(frames: usize, height: usize, width: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        let mut data = Array4::zeros((frames, height, width, channels));
        for k in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    for c in 0..channels {
                        data[[k, y, x, c]] = normal.sample(&mut rng);
                    }
                }
            }
        }
        Self { data }
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    /// Feature row of one patch.
    pub fn patch(&self, frame: usize, y: usize, x: usize) -> ArrayView1<'_, f64> {
        self.data.slice(s![frame, y, x, ..])
    }

    /// `(patches, channels)` view, patches in row-major `(frame, y, x)`
    /// order.
    pub fn as_rows(&self) -> ArrayView2<'_, f64> {
        let n = self.frames() * self.height() * self.width();
        self.data
            .view()
            .into_shape_with_order((n, self.channels()))
            .expect("standard layout")
    }

    /// Writes raw little-endian values (row-major) to `path` plus a JSON
    /// sidecar `<path>.json` describing shape and, for f64 blobs, the wider
    /// dtype.
    pub fn write_blob(
        &self,
        path: impl AsRef<Path>,
        dtype: BlobDtype,
    ) -> Result<(), AttentionError> {
        let path = path.as_ref();
        let mut out = BufWriter::new(File::create(path)?);
        match dtype {
            BlobDtype::F32 => {
                for &v in self.data.iter() {
                    out.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            BlobDtype::F64 => {
                for &v in self.data.iter() {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        out.flush()?;
        let sidecar = Sidecar {
            frames: self.frames(),
            height: self.height(),
            width: self.width(),
            channels: self.channels(),
            dtype: match dtype {
                BlobDtype::F32 => None,
                BlobDtype::F64 => Some("f64".to_owned()),
            },
        };
        let mut out = BufWriter::new(File::create(sidecar_path(path))?);
        serde_json::to_writer(&mut out, &sidecar)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    /// Reads a blob written by [`Self::write_blob`]. The sidecar's `dtype`
    /// defaults to `"f32"` when absent.
    pub fn read_blob(path: impl AsRef<Path>) -> Result<Self, AttentionError> {
        let path = path.as_ref();
        let bad = |reason: String| AttentionError::BadBlob {
            path: path.display().to_string(),
            reason,
        };
        let sidecar: Sidecar = serde_json::from_reader(File::open(sidecar_path(path))?)?;
        let value_size = match sidecar.dtype.as_deref() {
            None | Some("f32") => 4,
            Some("f64") => 8,
            Some(other) => return Err(bad(format!("unknown dtype {other:?}"))),
        };
        let count = sidecar.frames * sidecar.height * sidecar.width * sidecar.channels;
        let bytes = std::fs::read(path)?;
        if bytes.len() != count * value_size {
            return Err(bad(format!(
                "expected {} bytes for {} values, found {}",
                count * value_size,
                count,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(value_size)
            .map(|ch| {
                if value_size == 4 {
                    f32::from_le_bytes(ch.try_into().unwrap()) as f64
                } else {
                    f64::from_le_bytes(ch.try_into().unwrap())
                }
            })
            .collect();
        let data = Array4::from_shape_vec(
            (
                sidecar.frames,
                sidecar.height,
                sidecar.width,
                sidecar.channels,
            ),
            values,
        )
        .map_err(|e| bad(e.to_string()))?;
        Self::new(data)
    }
}

/// On-disk value width for [`FeatureVideo::write_blob`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobDtype {
    F32,
    F64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dtype: Option<String>,
}

/// Sidecar path for a feature blob: the blob path with `.json` appended.
pub fn sidecar_path(blob: impl AsRef<Path>) -> PathBuf {
    let mut s = blob.as_ref().as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Head layout of a multi-head attention op; `channels = heads * head_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionParams {
    pub fn new(heads: usize, head_dim: usize) -> Result<Self, AttentionError> {
        if heads == 0 || head_dim == 0 {
            return Err(AttentionError::BadHeads);
        }
        Ok(Self { heads, head_dim })
    }

    /// Splits `channels` evenly into `heads`.
    pub fn for_channels(channels: usize, heads: usize) -> Result<Self, AttentionError> {
        if heads == 0 || channels == 0 || !channels.is_multiple_of(heads) {
            return Err(AttentionError::BadHeadSplit { channels, heads });
        }
        Self::new(heads, channels / heads)
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Square query/key/value/output projections of one attention op.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

impl ProjectionWeights {
    /// All-zero projections; attention through them outputs zero.
    pub fn zeros(channels: usize) -> Self {
        Self {
            wq: Array2::zeros((channels, channels)),
            wk: Array2::zeros((channels, channels)),
            wv: Array2::zeros((channels, channels)),
            wo: Array2::zeros((channels, channels)),
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            wq: Array2::eye(channels),
            wk: Array2::eye(channels),
            wv: Array2::eye(channels),
            wo: Array2::eye(channels),
        }
    }

    /// Gaussian entries with std `1/sqrt(channels)`, drawn row-major in the
    /// order `wq, wk, wv, wo`.
    pub fn random_from(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let mut draw = || gaussian_matrix(rng, channels, channels);
        Self {
            wq: draw(),
            wk: draw(),
            wv: draw(),
            wo: draw(),
        }
    }

    pub fn random(channels: usize, seed: u64) -> Self {
        Self::random_from(&mut ChaCha8Rng::seed_from_u64(seed), channels)
    }
}

/// Two-layer feed-forward map `gelu(x . w1) . w2` (no biases, no residual).
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

impl FeedForward {
    /// All-zero feed-forward map; outputs zero for any input.
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            w1: Array2::zeros((channels, hidden)),
            w2: Array2::zeros((hidden, channels)),
        }
    }

    /// Gaussian entries with std `1/sqrt(channels)`, `w1` then `w2`,
    /// row-major.
    pub fn random_from(rng: &mut ChaCha8Rng, channels: usize, hidden: usize) -> Self {
        Self {
            w1: gaussian_matrix(rng, channels, hidden),
            w2: gaussian_matrix(rng, hidden, channels),
        }
    }

    pub fn random(channels: usize, hidden: usize, seed: u64) -> Self {
        Self::random_from(&mut ChaCha8Rng::seed_from_u64(seed), channels, hidden)
    }
}

/// Everything one transformer block owns: attention projections plus the
/// feed-forward map.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub proj: ProjectionWeights,
    pub ff: FeedForward,
}

impl BlockWeights {
    /// All-zero block; its output is zero for any input, making it an
    /// inert noise predictor.
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            proj: ProjectionWeights::zeros(channels),
            ff: FeedForward::zeros(channels, hidden),
        }
    }

    /// Draws projections then feed-forward weights from one stream.
    pub fn random_from(rng: &mut ChaCha8Rng, channels: usize, hidden: usize) -> Self {
        Self {
            proj: ProjectionWeights::random_from(rng, channels),
            ff: FeedForward::random_from(rng, channels, hidden),
        }
    }

    pub fn random(channels: usize, hidden: usize, seed: u64) -> Self {
        Self::random_from(&mut ChaCha8Rng::seed_from_u64(seed), channels, hidden)
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive std");
    let mut m = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            m[[r, c]] = normal.sample(rng);
        }
    }
    m
}

/// How trajectory attention consumes the dense-attention output inside a
/// block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlattenMode {
    /// Trajectory features are re-projected through the block's query/key/
    /// value maps before attending.
    Reproject,
    /// Trajectory features are used directly as queries, keys and values.
    Direct,
}

/// GELU via the tanh approximation.
fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

/// Scaled dot-product attention of one query against key/value rows, scaled
/// by `1/sqrt(q.len())`.
///
/// Combination is anchored on the first value row (`out = v0 + sum_i w_i *
/// (v_i - v0)`), so a single row or all-identical rows come back exactly.
pub fn scaled_dot_attention(
    q: ArrayView1<'_, f64>,
    keys: ArrayView2<'_, f64>,
    values: ArrayView2<'_, f64>,
) -> Result<Array1<f64>, AttentionError> {
    if keys.nrows() == 0 {
        return Err(AttentionError::EmptyKeys);
    }
    if keys.nrows() != values.nrows() {
        return Err(AttentionError::KeyValueCount {
            keys: keys.nrows(),
            values: values.nrows(),
        });
    }
    if keys.ncols() != q.len() {
        return Err(AttentionError::QueryKeyDim {
            q: q.len(),
            k: keys.ncols(),
        });
    }
    Ok(softmax_combine(q, keys, values))
}

/// Anchored softmax combination; callers guarantee non-empty, shape-matched
/// rows.
fn softmax_combine(
    q: ArrayView1<'_, f64>,
    keys: ArrayView2<'_, f64>,
    values: ArrayView2<'_, f64>,
) -> Array1<f64> {
    let n = keys.nrows();
    let scale = 1.0 / (q.len() as f64).sqrt();
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        logits.push(q.dot(&keys.row(i)) * scale);
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut out = values.row(0).to_owned();
    let v0 = values.row(0);
    for (i, &e) in exps.iter().enumerate().skip(1) {
        let w = e / z;
        let vi = values.row(i);
        for ((o, &a), &b) in out.iter_mut().zip(vi.iter()).zip(v0.iter()) {
            *o += w * (a - b);
        }
    }
    out
}

/// Matrix product with a fixed accumulation order (ascending inner index),
/// so results are reproducible bit-for-bit by construction, independent of
/// any backend's blocking strategy or internal buffers. Operands here are
/// rows-by-channels sized, so the plain loop is cheap.
fn matmul<Sa, Sb>(a: &ArrayBase<Sa, Ix2>, b: &ArrayBase<Sb, Ix2>) -> Array2<f64>
where
    Sa: Data<Elem = f64>,
    Sb: Data<Elem = f64>,
{
    debug_assert_eq!(a.ncols(), b.nrows());
    let (n, inner) = a.dim();
    let m = b.ncols();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        let mut row = out.row_mut(i);
        for k in 0..inner {
            let aik = a[[i, k]];
            let brow = b.row(k);
            for j in 0..m {
                row[j] += aik * brow[j];
            }
        }
    }
    out
}

fn check_weight(
    what: &'static str,
    m: &Array2<f64>,
    rows: usize,
    cols: usize,
) -> Result<(), AttentionError> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(AttentionError::WeightShape {
            what,
            expected_rows: rows,
            expected_cols: cols,
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

fn check_params(z: &FeatureVideo, params: &AttentionParams) -> Result<(), AttentionError> {
    if params.heads == 0 || params.head_dim == 0 {
        return Err(AttentionError::BadHeads);
    }
    if params.channels() != z.channels() {
        return Err(AttentionError::ChannelMismatch {
            expected: params.channels(),
            found: z.channels(),
        });
    }
    Ok(())
}

fn check_projections(w: &ProjectionWeights, channels: usize) -> Result<(), AttentionError> {
    check_weight("wq", &w.wq, channels, channels)?;
    check_weight("wk", &w.wk, channels, channels)?;
    check_weight("wv", &w.wv, channels, channels)?;
    check_weight("wo", &w.wo, channels, channels)
}

fn rows_to_video(
    rows: Array2<f64>,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<FeatureVideo, AttentionError> {
    let channels = rows.ncols();
    let data = rows
        .into_shape_with_order((frames, height, width, channels))
        .expect("row count equals grid size");
    FeatureVideo::new(data)
}

/// Shared kernel for the projected multi-head ops: queries/keys/values are
/// `rows . wq/wk/wv`, each query attends over the rows of its group, heads
/// are processed independently, and the concatenated result is projected by
/// `wo`.
fn grouped_projected_attention(
    z: &FeatureVideo,
    weights: &ProjectionWeights,
    params: &AttentionParams,
    frames_joint: bool,
) -> Result<FeatureVideo, AttentionError> {
    check_params(z, params)?;
    let c = z.channels();
    check_projections(weights, c)?;
    let rows = z.as_rows();
    let q = matmul(&rows, &weights.wq);
    let k = matmul(&rows, &weights.wk);
    let v = matmul(&rows, &weights.wv);
    let n = rows.nrows();
    let per_frame = z.height() * z.width();
    let groups: Vec<std::ops::Range<usize>> = if frames_joint {
        std::iter::once(0..n).collect()
    } else {
        (0..z.frames())
            .map(|f| f * per_frame..(f + 1) * per_frame)
            .collect()
    };
    let mut out = Array2::zeros((n, c));
    for g in groups {
        for i in g.clone() {
            for h in 0..params.heads {
                let cols = h * params.head_dim..(h + 1) * params.head_dim;
                let combined = softmax_combine(
                    q.slice(s![i, cols.clone()]),
                    k.slice(s![g.clone(), cols.clone()]),
                    v.slice(s![g.clone(), cols.clone()]),
                );
                out.slice_mut(s![i, cols]).assign(&combined);
            }
        }
    }
    rows_to_video(matmul(&out, &weights.wo), z.frames(), z.height(), z.width())
}

/// Multi-head attention restricted to each patch's own frame.
pub fn spatial_attention(
    z: &FeatureVideo,
    weights: &ProjectionWeights,
    params: &AttentionParams,
) -> Result<FeatureVideo, AttentionError> {
    grouped_projected_attention(z, weights, params, false)
}

/// Multi-head attention of every patch over every patch of every frame.
/// For a single-frame video this equals [`spatial_attention`] bit-for-bit.
pub fn dense_spatio_temporal_attention(
    z: &FeatureVideo,
    weights: &ProjectionWeights,
    params: &AttentionParams,
) -> Result<FeatureVideo, AttentionError> {
    grouped_projected_attention(z, weights, params, true)
}

fn check_grid(z: &FeatureVideo, set: &TrajectorySet) -> Result<(), AttentionError> {
    if set.frame_count() != z.frames() || set.height() != z.height() || set.width() != z.width() {
        return Err(AttentionError::GridMismatch {
            frames: z.frames(),
            height: z.height(),
            width: z.width(),
            set_frames: set.frame_count(),
            set_height: set.height(),
            set_width: set.width(),
        });
    }
    let report = validate_partition(set);
    if !report.pass() {
        return Err(AttentionError::BadPartition(report.to_string()));
    }
    Ok(())
}

/// Internal driver for trajectory-restricted attention. For each trajectory
/// member the query is its own feature row and the key/value rows are the
/// *other* members; `project` optionally maps gathered rows through
/// `wq/wk/wv` first. Patches on singleton trajectories pass through
/// unchanged. No positional encoding and no output projection.
fn trajectory_attention(
    h: &FeatureVideo,
    set: &TrajectorySet,
    params: &AttentionParams,
    project: Option<&ProjectionWeights>,
) -> Result<FeatureVideo, AttentionError> {
    check_params(h, params)?;
    check_grid(h, set)?;
    if let Some(w) = project {
        check_projections(w, h.channels())?;
    }
    let mut out = h.data().clone();
    let c = h.channels();
    for t in set.trajectories() {
        let len = t.patches.len();
        if len < 2 {
            continue;
        }
        let mut rows = Array2::zeros((len, c));
        for (i, p) in t.patches.iter().enumerate() {
            rows.row_mut(i).assign(&h.patch(p.frame, p.y, p.x));
        }
        let (q_rows, k_rows, v_rows) = match project {
            Some(w) => (
                matmul(&rows, &w.wq),
                matmul(&rows, &w.wk),
                matmul(&rows, &w.wv),
            ),
            None => (rows.clone(), rows.clone(), rows),
        };
        for (i, p) in t.patches.iter().enumerate() {
            let mut keys = Array2::zeros((len - 1, c));
            let mut values = Array2::zeros((len - 1, c));
            let mut r = 0;
            for j in 0..len {
                if j != i {
                    keys.row_mut(r).assign(&k_rows.row(j));
                    values.row_mut(r).assign(&v_rows.row(j));
                    r += 1;
                }
            }
            for head in 0..params.heads {
                let cols = head * params.head_dim..(head + 1) * params.head_dim;
                let combined = softmax_combine(
                    q_rows.slice(s![i, cols.clone()]),
                    keys.slice(s![.., cols.clone()]),
                    values.slice(s![.., cols.clone()]),
                );
                out.slice_mut(s![p.frame, p.y, p.x, cols]).assign(&combined);
            }
        }
    }
    FeatureVideo::new(out)
}

/// Trajectory-restricted attention with features used directly as queries,
/// keys and values: each patch attends over the other patches of its own
/// trajectory. The set must exactly partition `h`'s grid.
pub fn flow_guided_attention(
    h: &FeatureVideo,
    set: &TrajectorySet,
    params: &AttentionParams,
) -> Result<FeatureVideo, AttentionError> {
    trajectory_attention(h, set, params, None)
}

/// Trajectory-restricted attention with queries/keys/values re-projected
/// through `weights` first (no output projection, mirroring the direct
/// variant).
pub fn flow_guided_attention_projected(
    h: &FeatureVideo,
    set: &TrajectorySet,
    weights: &ProjectionWeights,
    params: &AttentionParams,
) -> Result<FeatureVideo, AttentionError> {
    trajectory_attention(h, set, params, Some(weights))
}

/// Reference implementation: unprojected multi-head attention where patch
/// `i` may attend to patch `j` iff `mask[(i, j)]` (patches in row-major
/// `(frame, y, x)` order). Rows whose mask is empty pass through. Uses plain
/// two-pass softmax accumulation, deliberately sharing no code with the
/// production kernels.
pub fn masked_attention_oracle(
    z: &FeatureVideo,
    mask: &Array2<bool>,
    params: &AttentionParams,
) -> Result<FeatureVideo, AttentionError> {
    check_params(z, params)?;
    let rows = z.as_rows();
    let n = rows.nrows();
    if mask.nrows() != n || mask.ncols() != n {
        return Err(AttentionError::MaskShape {
            n,
            rows: mask.nrows(),
            cols: mask.ncols(),
        });
    }
    let d = params.head_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Array2::zeros((n, z.channels()));
    for i in 0..n {
        let allowed: Vec<usize> = (0..n).filter(|&j| mask[[i, j]]).collect();
        if allowed.is_empty() {
            out.row_mut(i).assign(&rows.row(i));
            continue;
        }
        for head in 0..params.heads {
            let base = head * d;
            let mut logits = Vec::with_capacity(allowed.len());
            for &j in &allowed {
                let mut dot = 0.0;
                for t in 0..d {
                    dot += rows[[i, base + t]] * rows[[j, base + t]];
                }
                logits.push(dot * scale);
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
            for (pos, &j) in allowed.iter().enumerate() {
                let w = (logits[pos] - m).exp() / total;
                for t in 0..d {
                    out[[i, base + t]] += w * rows[[j, base + t]];
                }
            }
        }
    }
    rows_to_video(out, z.frames(), z.height(), z.width())
}

/// Row-major patch index of a patch ref, as used by the oracle mask.
pub fn patch_index(p: PatchRef, height: usize, width: usize) -> usize {
    (p.frame * height + p.y) * width + p.x
}

/// Builds the oracle mask equivalent to trajectory-restricted attention:
/// patches may attend to the other members of their own trajectory.
pub fn trajectory_mask(set: &TrajectorySet) -> Array2<bool> {
    let n = set.frame_count() * set.height() * set.width();
    let mut mask = Array2::from_elem((n, n), false);
    for t in set.trajectories() {
        for a in &t.patches {
            for b in &t.patches {
                if a != b {
                    let ia = patch_index(*a, set.height(), set.width());
                    let ib = patch_index(*b, set.height(), set.width());
                    mask[[ia, ib]] = true;
                }
            }
        }
    }
    mask
}

/// Applies the feed-forward map `gelu(x . w1) . w2` to every patch row.
pub fn feed_forward(z: &FeatureVideo, ff: &FeedForward) -> Result<FeatureVideo, AttentionError> {
    let c = z.channels();
    let hidden = ff.w1.ncols();
    check_weight("ff.w1", &ff.w1, c, hidden)?;
    check_weight("ff.w2", &ff.w2, hidden, c)?;
    let hidden_rows = matmul(&z.as_rows(), &ff.w1).mapv(gelu);
    rows_to_video(
        matmul(&hidden_rows, &ff.w2),
        z.frames(),
        z.height(),
        z.width(),
    )
}

/// One transformer block: dense spatio-temporal attention, then trajectory-
/// restricted attention on its output, then the feed-forward map. No
/// residual connections.
pub fn dsta_flatten_block(
    z: &FeatureVideo,
    set: &TrajectorySet,
    weights: &BlockWeights,
    params: &AttentionParams,
    mode: FlattenMode,
) -> Result<FeatureVideo, AttentionError> {
    let h = dense_spatio_temporal_attention(z, &weights.proj, params)?;
    let g = match mode {
        FlattenMode::Direct => flow_guided_attention(&h, set, params)?,
        FlattenMode::Reproject => flow_guided_attention_projected(&h, set, &weights.proj, params)?,
    };
    feed_forward(&g, &weights.ff)
}

/// The same block with trajectory attention disabled: dense attention
/// feeding straight into the feed-forward map.
pub fn dsta_feedforward_block(
    z: &FeatureVideo,
    weights: &BlockWeights,
    params: &AttentionParams,
) -> Result<FeatureVideo, AttentionError> {
    let h = dense_spatio_temporal_attention(z, &weights.proj, params)?;
    feed_forward(&h, &weights.ff)
}
