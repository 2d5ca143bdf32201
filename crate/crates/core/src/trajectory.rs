//! Patch trajectories: partitioning a video's patch grid along optical flow.
//!
//! Every grid cell of every frame belongs to exactly one [`Trajectory`].
//! Trajectories start on frame 0 (or wherever a cell is left unclaimed),
//! follow the flow chain cell-to-cell, and stop when they leave the grid or
//! lose a cell to a competing trajectory. Conflicts are resolved by a seeded
//! uniform draw, so sampling is reproducible.

use crate::flow::{project_coords, FlowError, FlowSequence};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("flow: {0}")]
    Flow(#[from] FlowError),
    #[error("flow fields are {flow_width}x{flow_height} but the patch grid is {width}x{height}")]
    GridMismatch {
        flow_width: usize,
        flow_height: usize,
        width: usize,
        height: usize,
    },
    #[error("patch grid must be non-empty")]
    EmptyGrid,
    #[error("cell size must be positive")]
    BadCellSize,
    #[error("expected {expected} background frames, found {found}")]
    BackgroundMismatch { expected: usize, found: usize },
}

/// One grid cell of one frame. Serialises as the triple `[frame, x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct PatchRef {
    pub frame: usize,
    pub x: usize,
    pub y: usize,
}

impl From<[usize; 3]> for PatchRef {
    fn from([frame, x, y]: [usize; 3]) -> Self {
        Self { frame, x, y }
    }
}

impl From<PatchRef> for [usize; 3] {
    fn from(p: PatchRef) -> Self {
        [p.frame, p.x, p.y]
    }
}

impl Ord for PatchRef {
    /// Frame-major, then row-major within the frame.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.frame, self.y, self.x).cmp(&(other.frame, other.y, other.x))
    }
}

impl PartialOrd for PatchRef {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Why a trajectory stopped extending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Reached the final frame.
    Completed,
    /// Projected outside the patch grid.
    OutOfBounds,
    /// Lost its next cell to another trajectory.
    Occluded,
}

/// A chain of patches over consecutive frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: usize,
    pub stop_reason: StopReason,
    pub patches: Vec<PatchRef>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

#[derive(Clone, Serialize, Deserialize)]
struct TrajectorySetDoc {
    frame_count: usize,
    height: usize,
    width: usize,
    trajectories: Vec<Trajectory>,
}

/// A set of trajectories over a `frame_count` x `height` x `width` patch
/// grid, with a reverse index from each patch to its trajectory.
///
/// Sets produced by [`sample_trajectories`] partition the grid: every cell
/// appears in exactly one trajectory. Sets read from JSON are accepted as-is
/// so that [`validate_partition`] can report defects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TrajectorySetDoc", into = "TrajectorySetDoc")]
pub struct TrajectorySet {
    frame_count: usize,
    height: usize,
    width: usize,
    trajectories: Vec<Trajectory>,
    lookup: HashMap<PatchRef, (usize, usize)>,
}

impl From<TrajectorySetDoc> for TrajectorySet {
    fn from(doc: TrajectorySetDoc) -> Self {
        Self::from_parts(doc.frame_count, doc.height, doc.width, doc.trajectories)
    }
}

impl From<TrajectorySet> for TrajectorySetDoc {
    fn from(set: TrajectorySet) -> Self {
        Self {
            frame_count: set.frame_count,
            height: set.height,
            width: set.width,
            trajectories: set.trajectories,
        }
    }
}

impl TrajectorySet {
    /// Assembles a set without checking the partition property (later
    /// duplicates win the reverse index). Use [`validate_partition`] to
    /// check.
    pub fn from_parts(
        frame_count: usize,
        height: usize,
        width: usize,
        trajectories: Vec<Trajectory>,
    ) -> Self {
        let mut lookup = HashMap::new();
        for (ti, t) in trajectories.iter().enumerate() {
            for (pi, &p) in t.patches.iter().enumerate() {
                lookup.insert(p, (ti, pi));
            }
        }
        Self {
            frame_count,
            height,
            width,
            trajectories,
            lookup,
        }
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Trajectory index and position-within-trajectory of a patch.
    pub fn locate(&self, patch: PatchRef) -> Option<(usize, usize)> {
        self.lookup.get(&patch).copied()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrajectoryError> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrajectoryError> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

/// Partitions the `width` x `height` patch grid of a video into flow
/// trajectories.
///
/// Frame 0 starts one trajectory per cell (row-major). Each head is projected
/// through the next flow field and lands on the nearest cell (ties round away
/// from zero). Heads leaving the grid stop `out_of_bounds`. When several
/// heads land on one cell, a uniform draw from a ChaCha8 stream picks the
/// survivor and the rest stop `occluded`; contested cells are drawn in
/// row-major order. Cells no head landed on spawn fresh trajectories
/// (row-major), so every cell of every frame is covered exactly once.
pub fn sample_trajectories(
    flows: &FlowSequence,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<TrajectorySet, TrajectoryError> {
    if width == 0 || height == 0 {
        return Err(TrajectoryError::EmptyGrid);
    }
    if let Some((fw, fh)) = flows.dims() {
        if (fw, fh) != (width, height) {
            return Err(TrajectoryError::GridMismatch {
                flow_width: fw,
                flow_height: fh,
                width,
                height,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories: Vec<Trajectory> = Vec::new();
    // Indices of the trajectories owning the previous frame's cells, in
    // row-major cell order.
    let mut live: Vec<usize> = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let id = trajectories.len();
            trajectories.push(Trajectory {
                id,
                stop_reason: StopReason::Completed,
                patches: vec![PatchRef { frame: 0, x, y }],
            });
            live.push(id);
        }
    }
    for (f, field) in flows.fields().iter().enumerate() {
        // (y, x) of the landing cell -> claimants in head order.
        let mut claims: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for &ti in &live {
            let head = *trajectories[ti]
                .patches
                .last()
                .expect("heads are non-empty");
            let (tx, ty) = project_coords(head.x as f64, head.y as f64, field)
                .expect("trajectory heads lie on the grid");
            let (cx, cy) = (tx.round(), ty.round());
            if cx < 0.0 || cy < 0.0 || cx >= width as f64 || cy >= height as f64 {
                trajectories[ti].stop_reason = StopReason::OutOfBounds;
            } else {
                claims
                    .entry((cy as usize, cx as usize))
                    .or_default()
                    .push(ti);
            }
        }
        let mut owners: Vec<Option<usize>> = vec![None; width * height];
        for (&(y, x), claimants) in &claims {
            let winner = if claimants.len() == 1 {
                claimants[0]
            } else {
                let pick = rng.random_range(0..claimants.len());
                for (i, &ti) in claimants.iter().enumerate() {
                    if i != pick {
                        trajectories[ti].stop_reason = StopReason::Occluded;
                    }
                }
                claimants[pick]
            };
            trajectories[winner]
                .patches
                .push(PatchRef { frame: f + 1, x, y });
            owners[y * width + x] = Some(winner);
        }
        live.clear();
        for y in 0..height {
            for x in 0..width {
                match owners[y * width + x] {
                    Some(ti) => live.push(ti),
                    None => {
                        let id = trajectories.len();
                        trajectories.push(Trajectory {
                            id,
                            stop_reason: StopReason::Completed,
                            patches: vec![PatchRef { frame: f + 1, x, y }],
                        });
                        live.push(id);
                    }
                }
            }
        }
    }
    Ok(TrajectorySet::from_parts(
        flows.frame_count(),
        height,
        width,
        trajectories,
    ))
}

/// Defects found by [`validate_partition`], each list sorted frame-major then
/// row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartitionReport {
    /// Cells referenced by more than one patch (or out-of-range refs listed
    /// more than once).
    pub duplicates: Vec<PatchRef>,
    /// Grid cells no trajectory covers.
    pub missing: Vec<PatchRef>,
    /// Refs outside the declared grid or frame range.
    pub out_of_range: Vec<PatchRef>,
}

impl PartitionReport {
    pub fn pass(&self) -> bool {
        self.duplicates.is_empty() && self.missing.is_empty() && self.out_of_range.is_empty()
    }
}

impl fmt::Display for PartitionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.pass() {
            write!(f, "partition ok: every cell is covered exactly once")
        } else {
            write!(
                f,
                "partition violated: {} duplicate, {} missing, {} out-of-range patch refs",
                self.duplicates.len(),
                self.missing.len(),
                self.out_of_range.len()
            )
        }
    }
}

/// Checks that a set covers its grid exactly once. Out-of-range refs are
/// excluded from coverage counting but reported.
pub fn validate_partition(set: &TrajectorySet) -> PartitionReport {
    let mut counts: BTreeMap<PatchRef, usize> = BTreeMap::new();
    let mut out_of_range = BTreeSet::new();
    for t in set.trajectories() {
        for &p in &t.patches {
            if p.frame >= set.frame_count() || p.x >= set.width() || p.y >= set.height() {
                out_of_range.insert(p);
            } else {
                *counts.entry(p).or_insert(0) += 1;
            }
        }
    }
    let duplicates = counts
        .iter()
        .filter(|&(_, &c)| c > 1)
        .map(|(&p, _)| p)
        .collect();
    let mut missing = Vec::new();
    for frame in 0..set.frame_count() {
        for y in 0..set.height() {
            for x in 0..set.width() {
                let p = PatchRef { frame, x, y };
                if !counts.contains_key(&p) {
                    missing.push(p);
                }
            }
        }
    }
    PartitionReport {
        duplicates,
        missing,
        out_of_range: out_of_range.into_iter().collect(),
    }
}

const DOT_PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [128, 128, 0],
];

fn draw_dot(img: &mut RgbImage, cx: i64, cy: i64, radius: i64, color: [u8; 3]) {
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (px, py) = (cx + dx, cy + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, Rgb(color));
            }
        }
    }
}

/// Renders a seeded sample of trajectories as coloured dots, one image per
/// frame.
///
/// With `background` frames (one per video frame, uniform size) dots are
/// scaled onto them; otherwise each patch cell becomes a `cell_size` pixel
/// square on a white canvas.
pub fn render_trajectories(
    set: &TrajectorySet,
    sample_count: usize,
    seed: u64,
    background: Option<&[RgbImage]>,
    cell_size: usize,
) -> Result<Vec<RgbImage>, TrajectoryError> {
    if set.width() == 0 || set.height() == 0 {
        return Err(TrajectoryError::EmptyGrid);
    }
    let (img_w, img_h) = match background {
        Some(frames) => {
            if frames.len() != set.frame_count() {
                return Err(TrajectoryError::BackgroundMismatch {
                    expected: set.frame_count(),
                    found: frames.len(),
                });
            }
            let (w, h) = (frames[0].width(), frames[0].height());
            if frames.iter().any(|f| f.width() != w || f.height() != h) {
                return Err(TrajectoryError::BackgroundMismatch {
                    expected: set.frame_count(),
                    found: frames.len(),
                });
            }
            (w, h)
        }
        None => {
            if cell_size == 0 {
                return Err(TrajectoryError::BadCellSize);
            }
            (
                (set.width() * cell_size) as u32,
                (set.height() * cell_size) as u32,
            )
        }
    };
    let mut frames: Vec<RgbImage> = match background {
        Some(bg) => bg.to_vec(),
        None => (0..set.frame_count())
            .map(|_| RgbImage::from_pixel(img_w, img_h, Rgb([255, 255, 255])))
            .collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sample_count.min(set.len());
    let chosen = rand::seq::index::sample(&mut rng, set.len(), n);
    let sx = img_w as f64 / set.width() as f64;
    let sy = img_h as f64 / set.height() as f64;
    let radius = ((sx.min(sy) / 3.0) as i64).max(1);
    for (ci, ti) in chosen.iter().enumerate() {
        let color = DOT_PALETTE[ci % DOT_PALETTE.len()];
        for p in &set.trajectories()[ti].patches {
            if p.frame >= frames.len() {
                continue;
            }
            let cx = ((p.x as f64 + 0.5) * sx) as i64;
            let cy = ((p.y as f64 + 0.5) * sy) as i64;
            draw_dot(&mut frames[p.frame], cx, cy, radius, color);
        }
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{synth_flow, FlowField, MotionKind};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn constant_seq(dx: f64, dy: f64, w: usize, h: usize, fields: usize) -> FlowSequence {
        FlowSequence::new(vec![
            synth_flow(MotionKind::Constant { dx, dy }, w, h);
            fields
        ])
        .unwrap()
    }

    /// Hand-simulated two-frame case on a 2x2 grid with flow (+1, 0):
    /// column 0 shifts onto column 1, column 1 exits the grid, and column 0
    /// of frame 1 is respawned.
    #[test]
    fn sampling_matches_hand_simulation() {
        let set = sample_trajectories(&constant_seq(1.0, 0.0, 2, 2, 1), 2, 2, 0).unwrap();
        let p = |frame, x, y| PatchRef { frame, x, y };
        let expect = [
            (vec![p(0, 0, 0), p(1, 1, 0)], StopReason::Completed),
            (vec![p(0, 1, 0)], StopReason::OutOfBounds),
            (vec![p(0, 0, 1), p(1, 1, 1)], StopReason::Completed),
            (vec![p(0, 1, 1)], StopReason::OutOfBounds),
            (vec![p(1, 0, 0)], StopReason::Completed),
            (vec![p(1, 0, 1)], StopReason::Completed),
        ];
        assert_eq!(set.len(), expect.len());
        for (t, (patches, reason)) in set.trajectories().iter().zip(&expect) {
            assert_eq!(&t.patches, patches);
            assert_eq!(t.stop_reason, *reason);
        }
        assert!(validate_partition(&set).pass());
    }

    /// Three heads land on one cell: one survives, two stop occluded, and
    /// the two vacated cells respawn.
    #[test]
    fn occlusion_keeps_exactly_one_claimant() {
        let fx = ndarray::arr2(&[[1.0f32, 0.0, -1.0]]);
        let field = FlowField::new(fx, Array2::zeros((1, 3))).unwrap();
        let flows = FlowSequence::new(vec![field]).unwrap();
        let mut winners = BTreeSet::new();
        for seed in 0..16 {
            let set = sample_trajectories(&flows, 3, 1, seed).unwrap();
            assert!(validate_partition(&set).pass());
            assert_eq!(set.len(), 5);
            let survivors: Vec<usize> = (0..3)
                .filter(|&i| set.trajectories()[i].patches.len() == 2)
                .collect();
            assert_eq!(survivors.len(), 1);
            for i in 0..3 {
                if i == survivors[0] {
                    assert_eq!(set.trajectories()[i].stop_reason, StopReason::Completed);
                } else {
                    assert_eq!(set.trajectories()[i].stop_reason, StopReason::Occluded);
                }
            }
            // Respawns cover the vacated cells.
            assert_eq!(
                set.trajectories()[3].patches,
                vec![PatchRef {
                    frame: 1,
                    x: 0,
                    y: 0
                }]
            );
            assert_eq!(
                set.trajectories()[4].patches,
                vec![PatchRef {
                    frame: 1,
                    x: 2,
                    y: 0
                }]
            );
            winners.insert(survivors[0]);
            // Same seed, same outcome.
            assert_eq!(set, sample_trajectories(&flows, 3, 1, seed).unwrap());
        }
        assert!(winners.len() >= 2, "draw should vary across seeds");
    }

    #[test]
    fn zero_flow_yields_full_length_columns() {
        let set = sample_trajectories(&constant_seq(0.0, 0.0, 3, 2, 3), 3, 2, 9).unwrap();
        assert_eq!(set.len(), 6);
        for t in set.trajectories() {
            assert_eq!(t.stop_reason, StopReason::Completed);
            assert_eq!(t.patches.len(), 4);
            let (x, y) = (t.patches[0].x, t.patches[0].y);
            for (f, p) in t.patches.iter().enumerate() {
                assert_eq!((p.frame, p.x, p.y), (f, x, y));
            }
        }
        assert!(validate_partition(&set).pass());
    }

    #[test]
    fn single_frame_video_has_one_trajectory_per_cell() {
        let flows = FlowSequence::new(vec![]).unwrap();
        let set = sample_trajectories(&flows, 4, 3, 1).unwrap();
        assert_eq!(set.len(), 12);
        assert!(validate_partition(&set).pass());
        assert!(set
            .trajectories()
            .iter()
            .all(|t| t.stop_reason == StopReason::Completed && t.patches.len() == 1));
    }

    #[test]
    fn sampling_rejects_grid_mismatch_and_empty_grid() {
        let flows = constant_seq(0.0, 0.0, 4, 4, 1);
        assert!(matches!(
            sample_trajectories(&flows, 3, 4, 0),
            Err(TrajectoryError::GridMismatch { .. })
        ));
        let none = FlowSequence::new(vec![]).unwrap();
        assert!(matches!(
            sample_trajectories(&none, 0, 4, 0),
            Err(TrajectoryError::EmptyGrid)
        ));
    }

    #[test]
    fn locate_agrees_with_linear_search() {
        let flows = constant_seq(1.0, 1.0, 5, 4, 3);
        let set = sample_trajectories(&flows, 5, 4, 3).unwrap();
        for frame in 0..4 {
            for y in 0..4 {
                for x in 0..5 {
                    let p = PatchRef { frame, x, y };
                    let found = set.locate(p).expect("partition covers every cell");
                    let by_scan = set
                        .trajectories()
                        .iter()
                        .enumerate()
                        .find_map(|(ti, t)| {
                            t.patches.iter().position(|&q| q == p).map(|pi| (ti, pi))
                        })
                        .unwrap();
                    assert_eq!(found, by_scan);
                }
            }
        }
    }

    #[test]
    fn json_document_shape_is_pinned() {
        let set = TrajectorySet::from_parts(
            1,
            3,
            2,
            vec![Trajectory {
                id: 0,
                stop_reason: StopReason::OutOfBounds,
                patches: vec![PatchRef {
                    frame: 0,
                    x: 1,
                    y: 2,
                }],
            }],
        );
        let json = serde_json::to_string(&set).unwrap();
        assert_eq!(
            json,
            r#"{"frame_count":1,"height":3,"width":2,"trajectories":[{"id":0,"stop_reason":"out_of_bounds","patches":[[0,1,2]]}]}"#
        );
        let back: TrajectorySet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn save_load_roundtrip() {
        let flows = constant_seq(0.5, -0.5, 4, 4, 2);
        let set = sample_trajectories(&flows, 4, 4, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.json");
        set.save(&path).unwrap();
        assert_eq!(TrajectorySet::load(&path).unwrap(), set);
    }

    #[test]
    fn validate_reports_each_defect_class() {
        let p = |frame, x, y| PatchRef { frame, x, y };
        // 1 frame, 1x2 grid: cell (0,0) twice, cell (1,0) missing, one ref
        // outside the grid.
        let set = TrajectorySet::from_parts(
            1,
            1,
            2,
            vec![
                Trajectory {
                    id: 0,
                    stop_reason: StopReason::Completed,
                    patches: vec![p(0, 0, 0), p(0, 0, 0), p(0, 5, 0)],
                },
                Trajectory {
                    id: 1,
                    stop_reason: StopReason::Completed,
                    patches: vec![p(2, 1, 0)],
                },
            ],
        );
        let report = validate_partition(&set);
        assert!(!report.pass());
        assert_eq!(report.duplicates, vec![p(0, 0, 0)]);
        assert_eq!(report.missing, vec![p(0, 1, 0)]);
        assert_eq!(report.out_of_range, vec![p(0, 5, 0), p(2, 1, 0)]);
    }

    #[test]
    fn empty_trajectory_is_tolerated_and_its_cells_reported_missing() {
        let set = TrajectorySet::from_parts(
            1,
            1,
            1,
            vec![Trajectory {
                id: 0,
                stop_reason: StopReason::Completed,
                patches: vec![],
            }],
        );
        let report = validate_partition(&set);
        assert_eq!(report.missing.len(), 1);
        assert!(report.duplicates.is_empty());
    }

    #[test]
    fn render_produces_expected_canvas_and_is_seeded() {
        let flows = constant_seq(0.0, 0.0, 2, 2, 1);
        let set = sample_trajectories(&flows, 2, 2, 0).unwrap();
        let a = render_trajectories(&set, 2, 5, None, 4).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!((a[0].width(), a[0].height()), (8, 8));
        assert!(a[0].pixels().any(|p| p.0 != [255, 255, 255]));
        let b = render_trajectories(&set, 2, 5, None, 4).unwrap();
        assert_eq!(a[0].as_raw(), b[0].as_raw());
        assert!(matches!(
            render_trajectories(&set, 2, 5, None, 0),
            Err(TrajectoryError::BadCellSize)
        ));
        let bg = vec![RgbImage::from_pixel(16, 16, Rgb([0, 0, 0])); 1];
        assert!(matches!(
            render_trajectories(&set, 1, 0, Some(&bg), 1),
            Err(TrajectoryError::BackgroundMismatch { .. })
        ));
    }

    proptest! {
        /// Random flows always yield an exact partition of the grid.
        #[test]
        fn random_flows_partition_the_grid(
            w in 1usize..=8,
            h in 1usize..=8,
            k in 1usize..=5,
            seed in 0u64..1000,
            mag in 0.0f32..4.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let fields = (0..k - 1)
                .map(|_| {
                    let fx = Array2::from_shape_fn((h, w), |_| rng.random_range(-mag..=mag));
                    let fy = Array2::from_shape_fn((h, w), |_| rng.random_range(-mag..=mag));
                    FlowField::new(fx, fy).unwrap()
                })
                .collect();
            let flows = FlowSequence::new(fields).unwrap();
            let set = sample_trajectories(&flows, w, h, seed).unwrap();
            prop_assert!(validate_partition(&set).pass());
            // ids are dense and match their index.
            for (i, t) in set.trajectories().iter().enumerate() {
                prop_assert_eq!(t.id, i);
                prop_assert!(!t.patches.is_empty());
            }
        }
    }
}
