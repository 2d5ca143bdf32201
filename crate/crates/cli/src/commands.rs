//! Command implementations. Each command resolves its flags, runs the
//! corresponding core operations, writes outputs, and persists a run
//! configuration next to them so the run can be reproduced exactly.

use crate::{
    FlattenArg, FlowConvertArgs, FlowDownsampleArgs, FlowGenArgs, FlowNoiseArgs, KindArg,
    MetricsArgs, PipelineEditArgs, PipelineInvertArgs, PipelineReconstructArgs, TrajCheckArgs,
    TrajSampleArgs, TrajVizArgs,
};
use flowattn_core::attention::{sidecar_path, AttentionError, BlobDtype, FeatureVideo};
use flowattn_core::diffusion::{DiffusionError, InjectionCache, NoiseSchedule};
use flowattn_core::flow::{
    downsample_flow, load_flo, perturb_flow, synth_flow, write_flo, FlowError, FlowField,
    FlowSequence, MotionKind,
};
use flowattn_core::image::RgbImage;
use flowattn_core::metrics::{
    edit_score, psnr, ssim_mean, warping_error, ImageSequence, MetricReport, MetricsError,
};
use flowattn_core::ndarray::Array2;
use flowattn_core::pipeline::{
    edit_video, invert_video, reconstruct_experiment, PipelineConfig, PipelineError, ToyUNet,
};
use flowattn_core::trajectory::{
    render_trajectories, sample_trajectories, validate_partition, PatchRef, TrajectoryError,
    TrajectorySet,
};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// What went wrong, split by exit code: data that failed validation or a
/// metric domain (1) vs. a usage or configuration problem (2).
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Config(String),
}

macro_rules! from_core_error {
    ($($ty:ty => $what:literal),* $(,)?) => {
        $(impl From<$ty> for Failure {
            fn from(e: $ty) -> Self {
                Failure::Validation(format!(concat!($what, ": {}"), e))
            }
        })*
    };
}

from_core_error!(
    FlowError => "flow",
    TrajectoryError => "trajectory",
    AttentionError => "feature",
    DiffusionError => "diffusion",
    PipelineError => "pipeline",
    MetricsError => "metrics",
);

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Validation(format!("i/o: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Validation(format!("json: {e}"))
    }
}

/// Default directory for outputs whose flags were omitted.
fn default_out_dir() -> PathBuf {
    std::env::var_os("FLOWATTN_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn resolve_out_file(opt: Option<PathBuf>, default_name: &str) -> PathBuf {
    opt.unwrap_or_else(|| default_out_dir().join(default_name))
}

fn resolve_out_dir(opt: Option<PathBuf>, default_name: &str) -> PathBuf {
    opt.unwrap_or_else(|| default_out_dir().join(default_name))
}

/// `<file>.run.json`, next to a single-file output.
fn run_json_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    out.with_file_name(name)
}

fn require_exists(path: &Path, role: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Config(format!(
            "{role} not found: {}",
            path.display()
        )))
    }
}

fn create_parent_dirs(path: &Path) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RunConfig<'a, A: Serialize> {
    command: &'a str,
    args: &'a A,
    /// Values the command resolved itself (defaulted flags, derived grid
    /// sizes) and the files it wrote, by role.
    resolved: BTreeMap<&'static str, serde_json::Value>,
}

fn persist_run_config<A: Serialize>(
    path: &Path,
    command: &str,
    args: &A,
    resolved: &[(&'static str, serde_json::Value)],
) -> Result<(), Failure> {
    let doc = RunConfig {
        command,
        args,
        resolved: resolved.iter().cloned().collect(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, &doc)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn path_value(p: &Path) -> serde_json::Value {
    serde_json::Value::String(p.display().to_string())
}

// ---------------------------------------------------------------- flow ----

pub fn flow_gen(args: FlowGenArgs) -> Result<(), Failure> {
    if args.w == 0 || args.h == 0 {
        return Err(Failure::Config("width and height must be positive".into()));
    }
    let cx = args.cx.unwrap_or(args.w as f64 / 2.0);
    let cy = args.cy.unwrap_or(args.h as f64 / 2.0);
    let kind = match args.kind {
        KindArg::Constant => MotionKind::Constant {
            dx: args.dx,
            dy: args.dy,
        },
        KindArg::Rotation => MotionKind::Rotation {
            angle: args.angle,
            cx,
            cy,
        },
        KindArg::Zoom => MotionKind::Zoom {
            scale: args.scale,
            cx,
            cy,
        },
    };
    let field = synth_flow(kind, args.w, args.h);
    let out = resolve_out_file(args.out.clone(), "flow.flo");
    create_parent_dirs(&out)?;
    write_flo(&field, &out)?;
    persist_run_config(
        &run_json_path(&out),
        "flow gen",
        &args,
        &[
            ("cx", cx.into()),
            ("cy", cy.into()),
            ("flow", path_value(&out)),
        ],
    )?;
    println!("wrote {} ({}x{})", out.display(), args.w, args.h);
    Ok(())
}

/// JSON form of a displacement field: row-major nested component arrays.
#[derive(Serialize, serde::Deserialize)]
struct FlowFieldDoc {
    width: usize,
    height: usize,
    fx: Vec<Vec<f32>>,
    fy: Vec<Vec<f32>>,
}

fn field_to_doc(field: &FlowField) -> FlowFieldDoc {
    let rows = |m: &Array2<f32>| {
        m.rows()
            .into_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    };
    FlowFieldDoc {
        width: field.width(),
        height: field.height(),
        fx: rows(field.fx()),
        fy: rows(field.fy()),
    }
}

fn doc_to_field(doc: &FlowFieldDoc) -> Result<FlowField, Failure> {
    let grid = |rows: &Vec<Vec<f32>>, what: &str| -> Result<Array2<f32>, Failure> {
        if rows.len() != doc.height || rows.iter().any(|r| r.len() != doc.width) {
            return Err(Failure::Validation(format!(
                "{what} rows do not form a {}x{} grid",
                doc.height, doc.width
            )));
        }
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        Array2::from_shape_vec((doc.height, doc.width), flat)
            .map_err(|e| Failure::Validation(format!("{what}: {e}")))
    };
    Ok(FlowField::new(grid(&doc.fx, "fx")?, grid(&doc.fy, "fy")?)?)
}

fn extension_of(path: &Path) -> String {
    path.extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default()
}

pub fn flow_convert(args: FlowConvertArgs) -> Result<(), Failure> {
    require_exists(&args.input, "input field")?;
    let from = extension_of(&args.input);
    let to = extension_of(&args.out);
    create_parent_dirs(&args.out)?;
    match (from.as_str(), to.as_str()) {
        ("flo", "json") => {
            let field = load_flo(&args.input)?;
            let mut out = BufWriter::new(File::create(&args.out)?);
            serde_json::to_writer_pretty(&mut out, &field_to_doc(&field))?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        ("json", "flo") => {
            let doc: FlowFieldDoc =
                serde_json::from_reader(BufReader::new(File::open(&args.input)?))?;
            write_flo(&doc_to_field(&doc)?, &args.out)?;
        }
        _ => {
            return Err(Failure::Config(format!(
                "cannot convert .{from} to .{to}; use .flo <-> .json"
            )))
        }
    }
    persist_run_config(
        &run_json_path(&args.out),
        "flow convert",
        &args,
        &[("out", path_value(&args.out))],
    )?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn flow_downsample(args: FlowDownsampleArgs) -> Result<(), Failure> {
    require_exists(&args.input, "input field")?;
    let field = load_flo(&args.input)?;
    let small = downsample_flow(&field, args.factor)?;
    let out = resolve_out_file(args.out.clone(), "flow_downsampled.flo");
    create_parent_dirs(&out)?;
    write_flo(&small, &out)?;
    persist_run_config(
        &run_json_path(&out),
        "flow downsample",
        &args,
        &[("flow", path_value(&out))],
    )?;
    println!(
        "wrote {} ({}x{} -> {}x{})",
        out.display(),
        field.width(),
        field.height(),
        small.width(),
        small.height()
    );
    Ok(())
}

pub fn flow_noise(args: FlowNoiseArgs) -> Result<(), Failure> {
    require_exists(&args.input, "input field")?;
    let field = load_flo(&args.input)?;
    let noisy = perturb_flow(&field, args.sigma, args.seed)?;
    let out = resolve_out_file(args.out.clone(), "flow_noisy.flo");
    create_parent_dirs(&out)?;
    write_flo(&noisy, &out)?;
    persist_run_config(
        &run_json_path(&out),
        "flow noise",
        &args,
        &[("flow", path_value(&out))],
    )?;
    println!("wrote {} (sigma {})", out.display(), args.sigma);
    Ok(())
}

// ---------------------------------------------------------------- traj ----

pub fn traj_sample(args: TrajSampleArgs) -> Result<(), Failure> {
    for p in &args.flows {
        require_exists(p, "flow field")?;
    }
    let flows = FlowSequence::load(&args.flows)?;
    let (w, h) = flows.dims().expect("clap requires at least one flow field");
    let set = sample_trajectories(&flows, w, h, args.seed)?;
    let out = resolve_out_file(args.out.clone(), "traj.json");
    create_parent_dirs(&out)?;
    set.save(&out)?;
    persist_run_config(
        &run_json_path(&out),
        "traj sample",
        &args,
        &[
            ("width", w.into()),
            ("height", h.into()),
            ("frames", set.frame_count().into()),
            ("trajectories", set.len().into()),
            ("set", path_value(&out)),
        ],
    )?;
    println!(
        "wrote {} ({} trajectories over {} frames of {}x{})",
        out.display(),
        set.len(),
        set.frame_count(),
        w,
        h
    );
    Ok(())
}

#[derive(Serialize)]
struct PartitionReportDoc<'a> {
    pass: bool,
    duplicates: &'a [PatchRef],
    missing: &'a [PatchRef],
    out_of_range: &'a [PatchRef],
}

fn print_patch_list(label: &str, patches: &[PatchRef]) {
    if patches.is_empty() {
        return;
    }
    const SHOWN: usize = 8;
    let head: Vec<String> = patches
        .iter()
        .take(SHOWN)
        .map(|p| format!("[{},{},{}]", p.frame, p.x, p.y))
        .collect();
    let more = if patches.len() > SHOWN {
        format!(" (+{} more)", patches.len() - SHOWN)
    } else {
        String::new()
    };
    println!("{label}: {}{more}", head.join(" "));
}

pub fn traj_check(args: TrajCheckArgs) -> Result<(), Failure> {
    require_exists(&args.input, "trajectory set")?;
    let set = TrajectorySet::load(&args.input)?;
    let report = validate_partition(&set);
    println!("{report}");
    print_patch_list("duplicates", &report.duplicates);
    print_patch_list("missing", &report.missing);
    print_patch_list("out of range", &report.out_of_range);
    if let Some(out) = &args.out {
        create_parent_dirs(out)?;
        let doc = PartitionReportDoc {
            pass: report.pass(),
            duplicates: &report.duplicates,
            missing: &report.missing,
            out_of_range: &report.out_of_range,
        };
        let mut file = BufWriter::new(File::create(out)?);
        serde_json::to_writer_pretty(&mut file, &doc)?;
        file.write_all(b"\n")?;
        file.flush()?;
        persist_run_config(
            &run_json_path(out),
            "traj check",
            &args,
            &[("report", path_value(out))],
        )?;
    }
    if report.pass() {
        Ok(())
    } else {
        Err(Failure::Validation(report.to_string()))
    }
}

pub fn traj_viz(args: TrajVizArgs) -> Result<(), Failure> {
    require_exists(&args.input, "trajectory set")?;
    let set = TrajectorySet::load(&args.input)?;
    let background: Vec<RgbImage> = args
        .background
        .iter()
        .map(|p| {
            require_exists(p, "background frame")?;
            flowattn_core::image::open(p)
                .map(|img| img.to_rgb8())
                .map_err(|e| Failure::Validation(format!("background {}: {e}", p.display())))
        })
        .collect::<Result<_, _>>()?;
    let frames = render_trajectories(
        &set,
        args.samples,
        args.seed,
        if background.is_empty() {
            None
        } else {
            Some(&background)
        },
        args.cell_size,
    )?;
    let dir = resolve_out_dir(args.out_dir.clone(), "viz");
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::with_capacity(frames.len());
    for (k, frame) in frames.iter().enumerate() {
        let path = dir.join(format!("frame_{k:03}.png"));
        frame
            .save(&path)
            .map_err(|e| Failure::Validation(format!("write {}: {e}", path.display())))?;
        written.push(path_value(&path));
    }
    persist_run_config(
        &dir.join("run_config.json"),
        "traj viz",
        &args,
        &[("frames", serde_json::Value::Array(written))],
    )?;
    println!("wrote {} frames to {}", frames.len(), dir.display());
    Ok(())
}

// ------------------------------------------------------------ pipeline ----

fn load_latent(path: &Path) -> Result<FeatureVideo, Failure> {
    require_exists(path, "latent blob")?;
    require_exists(&sidecar_path(path), "latent sidecar")?;
    Ok(FeatureVideo::read_blob(path)?)
}

fn load_config(
    config: &Option<PathBuf>,
    flatten: Option<FlattenArg>,
) -> Result<PipelineConfig, Failure> {
    let mut cfg = match config {
        Some(path) => {
            require_exists(path, "pipeline config")?;
            PipelineConfig::load(path)
                .map_err(|e| Failure::Config(format!("pipeline config: {e}")))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(f) = flatten {
        let enabled = f == FlattenArg::On;
        cfg.flatten_inversion = enabled;
        cfg.flatten_sampling = enabled;
    }
    Ok(cfg)
}

fn build_pipeline(cfg: &PipelineConfig) -> Result<(ToyUNet, NoiseSchedule), Failure> {
    let unet =
        ToyUNet::from_config(cfg).map_err(|e| Failure::Config(format!("pipeline config: {e}")))?;
    let schedule = cfg
        .schedule
        .build()
        .map_err(|e| Failure::Config(format!("noise schedule: {e}")))?;
    Ok((unet, schedule))
}

fn load_trajectories(path: &Path) -> Result<TrajectorySet, Failure> {
    require_exists(path, "trajectory set")?;
    Ok(TrajectorySet::load(path)?)
}

pub fn pipeline_invert(args: PipelineInvertArgs) -> Result<(), Failure> {
    let z0 = load_latent(&args.latent)?;
    let set = load_trajectories(&args.traj)?;
    let cfg = load_config(&args.config, args.flatten)?;
    let (unet, schedule) = build_pipeline(&cfg)?;
    let (z_t, cache) = invert_video(&z0, &unet, &set, &schedule, cfg.inv_steps)?;
    let dir = resolve_out_dir(args.out_dir.clone(), "invert");
    std::fs::create_dir_all(&dir)?;
    let latent_out = dir.join("z_t.bin");
    z_t.write_blob(&latent_out, BlobDtype::F64)?;
    let cache_dir = dir.join("cache");
    cache.save(&cache_dir)?;
    let config_out = dir.join("pipeline_config.json");
    cfg.save(&config_out)?;
    persist_run_config(
        &dir.join("run_config.json"),
        "pipeline invert",
        &args,
        &[
            ("latent", path_value(&latent_out)),
            ("cache", path_value(&cache_dir)),
            ("pipeline_config", path_value(&config_out)),
        ],
    )?;
    println!(
        "wrote {} and {} ({} cached activations)",
        latent_out.display(),
        cache_dir.display(),
        cache.len()
    );
    Ok(())
}

pub fn pipeline_edit(args: PipelineEditArgs) -> Result<(), Failure> {
    let z_t = load_latent(&args.latent)?;
    let set = load_trajectories(&args.traj)?;
    require_exists(&args.cache, "injection cache")?;
    require_exists(&args.cache.join("index.json"), "injection cache index")?;
    let cache = InjectionCache::load(&args.cache)?;
    let cfg = load_config(&args.config, args.flatten)?;
    let (unet, schedule) = build_pipeline(&cfg)?;
    let edited = edit_video(&z_t, &unet, &set, &schedule, cfg.samp_steps, &cache)?;
    let dir = resolve_out_dir(args.out_dir.clone(), "edit");
    std::fs::create_dir_all(&dir)?;
    let latent_out = dir.join("edited.bin");
    edited.write_blob(&latent_out, BlobDtype::F64)?;
    let config_out = dir.join("pipeline_config.json");
    cfg.save(&config_out)?;
    persist_run_config(
        &dir.join("run_config.json"),
        "pipeline edit",
        &args,
        &[
            ("latent", path_value(&latent_out)),
            ("pipeline_config", path_value(&config_out)),
        ],
    )?;
    println!("wrote {}", latent_out.display());
    Ok(())
}

pub fn pipeline_reconstruct(args: PipelineReconstructArgs) -> Result<(), Failure> {
    let z0 = load_latent(&args.latent)?;
    let set = load_trajectories(&args.traj)?;
    let cfg = load_config(&args.config, args.flatten)?;
    let (unet, schedule) = build_pipeline(&cfg)?;
    let report =
        reconstruct_experiment(&z0, &unet, &set, &schedule, cfg.inv_steps, cfg.samp_steps)?;
    let dir = resolve_out_dir(args.out_dir.clone(), "reconstruct");
    std::fs::create_dir_all(&dir)?;
    let report_out = dir.join("reconstruction.json");
    report.save(&report_out)?;
    let config_out = dir.join("pipeline_config.json");
    cfg.save(&config_out)?;
    persist_run_config(
        &dir.join("run_config.json"),
        "pipeline reconstruct",
        &args,
        &[
            ("report", path_value(&report_out)),
            ("pipeline_config", path_value(&config_out)),
        ],
    )?;
    println!(
        "with flow guidance: psnr {} ssim {}",
        report.with_flow_guidance.psnr_db, report.with_flow_guidance.ssim
    );
    println!(
        "without flow guidance: psnr {} ssim {}",
        report.without_flow_guidance.psnr_db, report.without_flow_guidance.ssim
    );
    println!("wrote {}", report_out.display());
    Ok(())
}

// ------------------------------------------------------------- metrics ----

pub fn metrics(args: MetricsArgs) -> Result<(), Failure> {
    for p in args.frames.iter().chain(&args.flows).chain(&args.reference) {
        require_exists(p, "input")?;
    }
    let frames = ImageSequence::load_pngs(&args.frames)?;
    let flows = FlowSequence::load(&args.flows)?;
    let e_warp = warping_error(&frames, &flows)?;
    let s_edit = args
        .clip_t
        .map(|clip_t| edit_score(clip_t, e_warp))
        .transpose()?;
    let (psnr_db, ssim) = if args.reference.is_empty() {
        (None, None)
    } else {
        let reference = ImageSequence::load_pngs(&args.reference)?;
        (
            Some(psnr(&reference, &frames)?),
            Some(ssim_mean(&reference, &frames)?),
        )
    };
    let report = MetricReport {
        e_warp_scaled: e_warp,
        clip_t_scaled: args.clip_t,
        s_edit,
        psnr_db,
        ssim,
    };
    let out = resolve_out_file(args.out.clone(), "metric_report.json");
    create_parent_dirs(&out)?;
    report.save(&out)?;
    persist_run_config(
        &run_json_path(&out),
        "metrics",
        &args,
        &[("report", path_value(&out))],
    )?;
    println!("e_warp {e_warp}");
    if let Some(s) = s_edit {
        println!("s_edit {s}");
    }
    if let Some(p) = psnr_db {
        println!("psnr {p}");
    }
    if let Some(s) = ssim {
        println!("ssim {s}");
    }
    println!("wrote {}", out.display());
    Ok(())
}
