//! Dense optical-flow displacement fields.
//!
//! A [`FlowField`] stores per-pixel forward displacements `(fx, fy)` for one
//! frame pair; a [`FlowSequence`] chains the fields between consecutive frames
//! of a video. Fields round-trip through the Middlebury `.flo` container
//! bit-exactly.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

/// `.flo` header tag: the float 202021.25 stored little-endian spells "PIEH".
pub const FLO_MAGIC: f32 = 202021.25;

/// Upper bound on either `.flo` dimension; larger values are treated as a
/// corrupt header.
const MAX_FLO_DIM: i64 = 100_000;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a .flo file: magic bytes 0x{found:08x}")]
    BadMagic { found: u32 },
    #[error("implausible .flo dimensions {width}x{height}")]
    BadDimensions { width: i64, height: i64 },
    #[error(".flo data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(".flo data has {found} trailing bytes")]
    TrailingData { found: usize },
    #[error("non-finite flow component at ({x}, {y})")]
    NonFinite { x: usize, y: usize },
    #[error("fx grid is {fx_height}x{fx_width} but fy grid is {fy_height}x{fy_width}")]
    ComponentMismatch {
        fx_width: usize,
        fx_height: usize,
        fy_width: usize,
        fy_height: usize,
    },
    #[error("{width}x{height} field is not divisible into {factor}x{factor} blocks")]
    BadBlockFactor {
        width: usize,
        height: usize,
        factor: usize,
    },
    #[error("point ({x}, {y}) samples outside the {width}x{height} grid")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("noise sigma must be finite and non-negative, got {0}")]
    BadSigma(f64),
    #[error("flow fields in a sequence must share dimensions: {0}x{1} vs {2}x{3}")]
    SequenceMismatch(usize, usize, usize, usize),
}

/// Forward displacement field between two frames.
///
/// Components are indexed `[y, x]`, both grids share one shape, and every
/// value is finite. Values stay `f32` so that `.flo` round trips preserve
/// bits.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    fx: Array2<f32>,
    fy: Array2<f32>,
}

impl FlowField {
    /// Builds a field from its component grids, rejecting shape mismatches
    /// and non-finite values.
    pub fn new(fx: Array2<f32>, fy: Array2<f32>) -> Result<Self, FlowError> {
        if fx.dim() != fy.dim() {
            return Err(FlowError::ComponentMismatch {
                fx_width: fx.ncols(),
                fx_height: fx.nrows(),
                fy_width: fy.ncols(),
                fy_height: fy.nrows(),
            });
        }
        for (grid, other) in [(&fx, &fy), (&fy, &fx)] {
            let _ = other;
            if let Some(((y, x), _)) = grid.indexed_iter().find(|(_, v)| !v.is_finite()) {
                return Err(FlowError::NonFinite { x, y });
            }
        }
        Ok(Self { fx, fy })
    }

    /// All-zero field of the given size.
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            fx: Array2::zeros((height, width)),
            fy: Array2::zeros((height, width)),
        }
    }

    pub fn width(&self) -> usize {
        self.fx.ncols()
    }

    pub fn height(&self) -> usize {
        self.fx.nrows()
    }

    pub fn fx(&self) -> &Array2<f32> {
        &self.fx
    }

    pub fn fy(&self) -> &Array2<f32> {
        &self.fy
    }

    /// Displacement at integer pixel `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        (self.fx[[y, x]], self.fy[[y, x]])
    }
}

/// Chain of flow fields between consecutive frames: `fields()[k]` maps frame
/// `k` onto frame `k + 1`, so a sequence of `n` fields spans `n + 1` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSequence {
    fields: Vec<FlowField>,
}

impl FlowSequence {
    /// Builds a sequence, rejecting fields of differing sizes.
    pub fn new(fields: Vec<FlowField>) -> Result<Self, FlowError> {
        if let Some(first) = fields.first() {
            let (w, h) = (first.width(), first.height());
            for f in &fields[1..] {
                if f.width() != w || f.height() != h {
                    return Err(FlowError::SequenceMismatch(w, h, f.width(), f.height()));
                }
            }
        }
        Ok(Self { fields })
    }

    /// Loads one `.flo` file per consecutive frame pair, in the given order.
    pub fn load<P: AsRef<Path>>(paths: impl IntoIterator<Item = P>) -> Result<Self, FlowError> {
        let fields = paths
            .into_iter()
            .map(load_flo)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(fields)
    }

    pub fn fields(&self) -> &[FlowField] {
        &self.fields
    }

    /// Number of video frames the chain spans (field count + 1).
    pub fn frame_count(&self) -> usize {
        self.fields.len() + 1
    }

    /// Grid size shared by all fields; `None` for an empty (single-frame)
    /// sequence.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.fields.first().map(|f| (f.width(), f.height()))
    }
}

/// Parses a `.flo` byte buffer (little-endian: magic, i32 width, i32 height,
/// then row-major interleaved `fx, fy` f32 pairs).
pub fn parse_flo(buf: &[u8]) -> Result<FlowField, FlowError> {
    if buf.len() < 12 {
        return Err(FlowError::Truncated {
            expected: 12,
            found: buf.len(),
        });
    }
    let magic = u32::from_le_bytes(buf[0..4].try_into().unwrap());
    if magic != FLO_MAGIC.to_bits() {
        return Err(FlowError::BadMagic { found: magic });
    }
    let width = i32::from_le_bytes(buf[4..8].try_into().unwrap()) as i64;
    let height = i32::from_le_bytes(buf[8..12].try_into().unwrap()) as i64;
    if !(1..=MAX_FLO_DIM).contains(&width) || !(1..=MAX_FLO_DIM).contains(&height) {
        return Err(FlowError::BadDimensions { width, height });
    }
    let (w, h) = (width as usize, height as usize);
    let expected = 12 + w * h * 8;
    if buf.len() < expected {
        return Err(FlowError::Truncated {
            expected,
            found: buf.len(),
        });
    }
    if buf.len() > expected {
        return Err(FlowError::TrailingData {
            found: buf.len() - expected,
        });
    }
    let mut fx = Array2::zeros((h, w));
    let mut fy = Array2::zeros((h, w));
    let mut off = 12;
    for y in 0..h {
        for x in 0..w {
            fx[[y, x]] = f32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
            fy[[y, x]] = f32::from_le_bytes(buf[off + 4..off + 8].try_into().unwrap());
            off += 8;
        }
    }
    FlowField::new(fx, fy)
}

/// Reads a Middlebury `.flo` file.
pub fn load_flo(path: impl AsRef<Path>) -> Result<FlowField, FlowError> {
    parse_flo(&std::fs::read(path)?)
}

/// Writes a Middlebury `.flo` file; a subsequent [`load_flo`] returns the
/// field bit-for-bit.
pub fn write_flo(field: &FlowField, path: impl AsRef<Path>) -> Result<(), FlowError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&FLO_MAGIC.to_le_bytes())?;
    out.write_all(&(field.width() as i32).to_le_bytes())?;
    out.write_all(&(field.height() as i32).to_le_bytes())?;
    for y in 0..field.height() {
        for x in 0..field.width() {
            out.write_all(&field.fx[[y, x]].to_le_bytes())?;
            out.write_all(&field.fy[[y, x]].to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Projects a point one frame forward: the displacement is sampled at the
/// nearest grid cell (ties round away from zero) and added to the unrounded
/// input. Errors if the sample point falls outside the grid.
pub fn project_coords(x: f64, y: f64, field: &FlowField) -> Result<(f64, f64), FlowError> {
    let (gx, gy) = (x.round(), y.round());
    let oob = FlowError::OutOfBounds {
        x,
        y,
        width: field.width(),
        height: field.height(),
    };
    if gx < 0.0 || gy < 0.0 || gx >= field.width() as f64 || gy >= field.height() as f64 {
        return Err(oob);
    }
    let (fx, fy) = field.at(gx as usize, gy as usize);
    Ok((x + fx as f64, y + fy as f64))
}

/// Analytic motion patterns for synthesising test flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionKind {
    /// Uniform translation by `(dx, dy)` pixels.
    Constant { dx: f64, dy: f64 },
    /// Rigid rotation by `angle` radians (counter-clockwise in image
    /// coordinates) around `(cx, cy)`.
    Rotation { angle: f64, cx: f64, cy: f64 },
    /// Radial scaling by `scale` around `(cx, cy)`.
    Zoom { scale: f64, cx: f64, cy: f64 },
}

/// Synthesises the displacement field of an analytic motion on a
/// `width` x `height` grid. Values are computed in f64 and rounded once to
/// f32 storage.
pub fn synth_flow(kind: MotionKind, width: usize, height: usize) -> FlowField {
    let mut fx = Array2::zeros((height, width));
    let mut fy = Array2::zeros((height, width));
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64, y as f64);
            let (dx, dy) = match kind {
                MotionKind::Constant { dx, dy } => (dx, dy),
                MotionKind::Rotation { angle, cx, cy } => {
                    let (sin, cos) = angle.sin_cos();
                    let (rx, ry) = (px - cx, py - cy);
                    ((cos - 1.0) * rx - sin * ry, sin * rx + (cos - 1.0) * ry)
                }
                MotionKind::Zoom { scale, cx, cy } => {
                    ((scale - 1.0) * (px - cx), (scale - 1.0) * (py - cy))
                }
            };
            fx[[y, x]] = dx as f32;
            fy[[y, x]] = dy as f32;
        }
    }
    FlowField { fx, fy }
}

/// Downsamples a field by an integer factor: each output cell is the f64 mean
/// of its `factor` x `factor` block, divided by `factor` so displacements are
/// expressed in output-resolution pixels.
pub fn downsample_flow(field: &FlowField, factor: usize) -> Result<FlowField, FlowError> {
    let bad = FlowError::BadBlockFactor {
        width: field.width(),
        height: field.height(),
        factor,
    };
    if factor == 0
        || !field.width().is_multiple_of(factor)
        || !field.height().is_multiple_of(factor)
    {
        return Err(bad);
    }
    let (w, h) = (field.width() / factor, field.height() / factor);
    let mut fx = Array2::zeros((h, w));
    let mut fy = Array2::zeros((h, w));
    let norm = (factor * factor) as f64;
    for by in 0..h {
        for bx in 0..w {
            let (mut sx, mut sy) = (0.0f64, 0.0f64);
            for y in by * factor..(by + 1) * factor {
                for x in bx * factor..(bx + 1) * factor {
                    sx += field.fx[[y, x]] as f64;
                    sy += field.fy[[y, x]] as f64;
                }
            }
            fx[[by, bx]] = (sx / norm / factor as f64) as f32;
            fy[[by, bx]] = (sy / norm / factor as f64) as f32;
        }
    }
    Ok(FlowField { fx, fy })
}

/// Adds i.i.d. Gaussian noise `N(0, sigma^2)` to every component.
///
/// Draws are made per pixel in row-major order, `fx` before `fy`, from a
/// ChaCha8 stream seeded with `seed`, so outputs are reproducible. A sigma of
/// exactly zero returns the input unchanged (bit-for-bit).
pub fn perturb_flow(field: &FlowField, sigma: f64, seed: u64) -> Result<FlowField, FlowError> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(FlowError::BadSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(field.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, sigma).expect("sigma validated above");
    let mut fx = field.fx.clone();
    let mut fy = field.fy.clone();
    for y in 0..field.height() {
        for x in 0..field.width() {
            fx[[y, x]] = (fx[[y, x]] as f64 + normal.sample(&mut rng)) as f32;
            fy[[y, x]] = (fy[[y, x]] as f64 + normal.sample(&mut rng)) as f32;
        }
    }
    FlowField::new(fx, fy)
}
