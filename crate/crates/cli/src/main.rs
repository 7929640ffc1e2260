use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mapanno_cli::config::{ConfigFile, Overrides};
use mapanno_cli::{annotate, evaluate, execution_for, overlay, review, segment, synth};
use mapanno_core::par;

#[derive(Parser, Debug)]
#[command(name = "mapanno", version, about = "Map-aided pole-base annotation tools")]
struct Cli {
    /// TOML file with one table per command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for frame-parallel stages; 1 runs sequentially.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Seed for synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Project map features into camera frames and write labels, audit and manifest.
    Annotate(AnnotateArgs),
    /// Derive pole-base labels from semantic segmentation masks.
    ExtractSeg(ExtractSegArgs),
    /// Score predictions against labels.
    Evaluate(EvaluateArgs),
    /// Write a synthetic drive with exact answers.
    Synth(SynthArgs),
    /// Draw annotations over camera frames.
    Overlay(OverlayArgs),
    /// Serve annotations for human review over HTTP.
    ReviewServe(ReviewArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Aggregate {
    Mean,
    Median,
}

#[derive(Args, Debug)]
struct AnnotateArgs {
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    poses: Option<PathBuf>,
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    origin_lat: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    origin_lon: Option<f64>,
    #[arg(long)]
    min_spacing_m: Option<f64>,
    #[arg(long)]
    min_interval_s: Option<f64>,
    #[arg(long)]
    vehicle_height: Option<f64>,
    #[arg(long)]
    max_feature_distance: Option<f64>,
    #[arg(long)]
    search_radius_px: Option<f64>,
    #[arg(long)]
    depth_diff_threshold: Option<f64>,
    #[arg(long)]
    box_width_px: Option<f64>,
    #[arg(long)]
    box_height_px: Option<f64>,
    #[arg(long)]
    max_ground_distance: Option<f64>,
    #[arg(long, value_enum)]
    depth_aggregate: Option<Aggregate>,
    /// Drop features with no lidar samples around their pixel.
    #[arg(long)]
    drop_nodata: bool,
    /// Drop features with no ground points nearby instead of using flat ground.
    #[arg(long)]
    drop_no_ground: bool,
    #[arg(long)]
    no_ground_refinement: bool,
    #[arg(long)]
    no_occlusion_filter: bool,
    #[arg(long)]
    ground_cell_size: Option<f64>,
    #[arg(long)]
    ground_seed_quantile: Option<f64>,
    #[arg(long)]
    ground_threshold: Option<f64>,
    #[arg(long)]
    ground_max_slope_deg: Option<f64>,
}

impl AnnotateArgs {
    fn overrides(&self) -> Result<Overrides> {
        let mut o = Overrides::new();
        o.path("map", self.map.as_ref())
            .path("poses", self.poses.as_ref())
            .path("frames", self.frames.as_ref())
            .path("calibration", self.calibration.as_ref())
            .path("images", self.images.as_ref())
            .path("out", self.out.as_ref())
            .opt("min_spacing_m", self.min_spacing_m)
            .opt("min_interval_s", self.min_interval_s)
            .opt("params.vehicle_height", self.vehicle_height)
            .opt("params.max_feature_distance", self.max_feature_distance)
            .opt("params.search_radius_px", self.search_radius_px)
            .opt("params.depth_diff_threshold", self.depth_diff_threshold)
            .opt("params.box_width_px", self.box_width_px)
            .opt("params.box_height_px", self.box_height_px)
            .opt("params.max_ground_distance", self.max_ground_distance)
            .opt(
                "params.depth_aggregate",
                self.depth_aggregate.map(|a| match a {
                    Aggregate::Mean => "mean",
                    Aggregate::Median => "median",
                }),
            )
            .flag("params.keep_nodata", self.drop_nodata, false)
            .flag("params.drop_no_ground", self.drop_no_ground, true)
            .flag("params.ground_refinement", self.no_ground_refinement, false)
            .flag("params.occlusion_filter", self.no_occlusion_filter, false)
            .opt("ground.cell_size", self.ground_cell_size)
            .opt("ground.seed_quantile", self.ground_seed_quantile)
            .opt("ground.plane_distance_threshold", self.ground_threshold)
            .opt("ground.max_slope_deg", self.ground_max_slope_deg);
        match (self.origin_lat, self.origin_lon) {
            (Some(lat), Some(lon)) => {
                o.set("origin", toml::Value::Array(vec![lat.into(), lon.into()]));
            }
            (None, None) => {}
            _ => anyhow::bail!("--origin-lat and --origin-lon go together"),
        }
        Ok(o)
    }
}

#[derive(Args, Debug)]
struct ExtractSegArgs {
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    classes: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    min_width_px: Option<u32>,
    #[arg(long)]
    box_width_px: Option<f64>,
    #[arg(long)]
    box_height_px: Option<f64>,
    /// Class merged into the pole mask (repeatable; replaces the default set).
    #[arg(long)]
    pole_class: Vec<String>,
    /// Class merged into the ground mask (repeatable; replaces the default set).
    #[arg(long)]
    ground_class: Vec<String>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    image_width: Option<u32>,
    #[arg(long)]
    image_height: Option<u32>,
    #[arg(long)]
    conf: Option<f64>,
    #[arg(long)]
    iou: Option<f64>,
    /// Euclidean center error instead of the horizontal one.
    #[arg(long)]
    euclidean: bool,
    /// Suppress overlapping predictions at this IoU first.
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    pr_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scene JSON replacing the generated poles and occluders.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    frames: Option<u64>,
    #[arg(long)]
    poles: Option<u64>,
    #[arg(long)]
    occluders: Option<u64>,
    #[arg(long)]
    ramp_slope_deg: Option<f64>,
    /// Point frames.csv at the exact ground labels.
    #[arg(long)]
    truth_labels: bool,
    #[arg(long)]
    no_images: bool,
    #[arg(long)]
    pose_xy_sigma: Option<f64>,
    #[arg(long)]
    pose_theta_sigma: Option<f64>,
    #[arg(long)]
    range_sigma: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    yaw_bias_deg: Option<f64>,
}

#[derive(Args, Debug)]
struct OverlayArgs {
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_boxes: bool,
}

#[derive(Args, Debug)]
struct ReviewArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    ui: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    port: Option<u16>,
}

fn to_i64(v: Option<u64>) -> Option<i64> {
    v.map(|n| n.min(i64::MAX as u64) as i64)
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let workers = match cli.workers {
        Some(0) => anyhow::bail!("--workers must be at least 1"),
        Some(n) => Some(n),
        None => file.workers()?,
    };
    let seed = match cli.seed {
        Some(s) => Some(s),
        None => file.seed()?,
    };
    let exec = execution_for(workers);

    par::with_workers(workers, || -> Result<()> {
        match &cli.command {
            Command::Annotate(a) => {
                let cfg: annotate::AnnotateConfig = file.section("annotate", a.overrides()?)?;
                let manifest = annotate::run(&cfg, exec)?;
                print!("{}", annotate::summary(&manifest));
            }
            Command::ExtractSeg(a) => {
                let mut o = Overrides::new();
                o.path("masks", a.masks.as_ref())
                    .path("classes", a.classes.as_ref())
                    .path("out", a.out.as_ref())
                    .opt("min_width_px", a.min_width_px.map(i64::from))
                    .opt("box_width_px", a.box_width_px)
                    .opt("box_height_px", a.box_height_px);
                if !a.pole_class.is_empty() {
                    o.set("merge.pole_classes", a.pole_class.clone());
                }
                if !a.ground_class.is_empty() {
                    o.set("merge.ground_classes", a.ground_class.clone());
                }
                let cfg: segment::ExtractSegConfig = file.section("extract_seg", o)?;
                let manifest = segment::run(&cfg, exec)?;
                print!("{}", annotate::summary(&manifest));
            }
            Command::Evaluate(a) => {
                let mut o = Overrides::new();
                o.path("gt", a.gt.as_ref())
                    .path("pred", a.pred.as_ref())
                    .opt("image_width", a.image_width.map(i64::from))
                    .opt("image_height", a.image_height.map(i64::from))
                    .opt("conf_threshold", a.conf)
                    .opt("iou_threshold", a.iou)
                    .flag("euclidean_mae", a.euclidean, true)
                    .opt("nms_iou", a.nms_iou)
                    .path("report", a.report.as_ref())
                    .path("pr_csv", a.pr_csv.as_ref());
                let cfg: evaluate::EvaluateConfig = file.section("evaluate", o)?;
                evaluate::run(&cfg)?;
            }
            Command::Synth(a) => {
                let mut o = Overrides::new();
                o.path("out", a.out.as_ref())
                    .path("scene", a.scene.as_ref())
                    .flag("truth_labels", a.truth_labels, true)
                    .flag("images", a.no_images, false)
                    .opt("drive.seed", to_i64(seed))
                    .opt("drive.frames", to_i64(a.frames))
                    .opt("drive.poles", to_i64(a.poles))
                    .opt("drive.occluders", to_i64(a.occluders))
                    .opt("drive.ramp_slope_deg", a.ramp_slope_deg)
                    .opt("drive.noise.pose_xy_sigma", a.pose_xy_sigma)
                    .opt("drive.noise.pose_theta_sigma", a.pose_theta_sigma)
                    .opt("drive.noise.range_sigma", a.range_sigma)
                    .opt("drive.noise.calibration_yaw_bias_deg", a.yaw_bias_deg);
                let cfg: synth::SynthConfig = file.section("synth", o)?;
                let truth = synth::run(&cfg, exec)?;
                let poles: usize = truth.frames.iter().map(|f| f.poles.len()).sum();
                println!("{} frames, {} pole sightings within range", truth.frames.len(), poles);
            }
            Command::Overlay(a) => {
                let mut o = Overrides::new();
                o.path("images", a.images.as_ref())
                    .path("dataset", a.dataset.as_ref())
                    .path("out", a.out.as_ref())
                    .flag("draw_boxes", a.no_boxes, false);
                let cfg: overlay::OverlayConfig = file.section("overlay", o)?;
                let s = overlay::run(&cfg, exec)?;
                println!("{} drawn, {} copied, {} skipped", s.drawn, s.copied, s.skipped.len());
            }
            Command::ReviewServe(a) => {
                let mut o = Overrides::new();
                o.path("dataset", a.dataset.as_ref())
                    .path("images", a.images.as_ref())
                    .path("ui", a.ui.as_ref())
                    .path("log", a.log.as_ref())
                    .opt("bind", a.bind.clone())
                    .opt("port", a.port.map(i64::from));
                let cfg: review::ReviewConfig = file.section("review", o)?;
                review::run(&cfg)?;
            }
        }
        Ok(())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
