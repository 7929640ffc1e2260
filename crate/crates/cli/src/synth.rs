//! The `synth` command: a synthetic drive written in the same on-disk layout
//! the `annotate` command reads, plus the exact answers.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mapanno_core::annotate::Decision;
use mapanno_core::frames::{Calibration, Pose};
use mapanno_core::map_store::{write_map_records, DEFAULT_MAX_FEATURE_DISTANCE_M};
use mapanno_core::par::{self, Execution};
use mapanno_core::synth::{
    generate_drive, generate_scene, simulate_lidar_with, synth_origin, true_annotations, Drive, DriveConfig, PoleTruth,
    SceneSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotate::AnnotateConfig;
use crate::trajectory::{write_frames, FrameRow, Trajectory};

pub const TRUTH_FILE: &str = "truth.json";
pub const PIPELINE_FILE: &str = "pipeline.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub out: Option<PathBuf>,
    /// Scene JSON replacing the generated poles and occluders; the drive
    /// settings still define the trajectory, rig and lidar.
    pub scene: Option<PathBuf>,
    /// Reference the exact ground labels from `frames.csv`.
    pub truth_labels: bool,
    /// Write blank camera frames so that image-based commands have input.
    pub images: bool,
    pub drive: DriveConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            out: None,
            scene: None,
            truth_labels: false,
            images: true,
            drive: DriveConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedPole {
    #[serde(flatten)]
    pub truth: PoleTruth,
    /// Distance in the ground plane from the vehicle origin.
    pub range_m: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub image_id: String,
    pub pose: Pose,
    /// Poles within the default feature radius, sorted by id.
    pub poles: Vec<ExpectedPole>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub origin: [f64; 2],
    pub vehicle_height: f64,
    pub frames: Vec<FrameTruth>,
}

impl SynthTruth {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Decision an ideal pipeline would reach for a pole seen as `t`.
pub fn expected_decision(t: &PoleTruth) -> Decision {
    match (t.pixel, t.in_image, t.visible) {
        (None, _, _) => Decision::BehindCamera,
        (Some(_), false, _) => Decision::OutOfImage,
        (Some(_), true, false) => Decision::Occluded,
        (Some(_), true, true) => Decision::Kept,
    }
}

pub fn image_id(frame: usize) -> String {
    format!("frame_{frame:04}")
}

pub fn build_drive(cfg: &SynthConfig) -> Result<Drive> {
    match &cfg.scene {
        None => Ok(generate_drive(&cfg.drive)?),
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let spec: SceneSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let mut drive = generate_drive(&DriveConfig {
                poles: 0,
                occluders: 0,
                ..cfg.drive.clone()
            })?;
            drive.scene = generate_scene(&spec)?;
            Ok(drive)
        }
    }
}

/// Recorded poses: truth plus the configured Gaussian pose noise.
pub fn recorded_poses(drive: &Drive) -> Vec<Pose> {
    let n = drive.config.noise;
    let mut rng = ChaCha8Rng::seed_from_u64(drive.config.seed ^ 0x706f_7365);
    let xy = (n.pose_xy_sigma > 0.0).then(|| Normal::new(0.0, n.pose_xy_sigma).expect("sigma > 0"));
    let th = (n.pose_theta_sigma > 0.0).then(|| Normal::new(0.0, n.pose_theta_sigma).expect("sigma > 0"));
    drive
        .poses
        .iter()
        .map(|p| {
            let mut d = [0.0; 3];
            if let Some(g) = &xy {
                d[0] = g.sample(&mut rng);
                d[1] = g.sample(&mut rng);
            }
            if let Some(g) = &th {
                d[2] = g.sample(&mut rng);
            }
            Pose::new(p.x + d[0], p.y + d[1], p.theta + d[2], p.timestamp)
        })
        .collect()
}

pub fn frame_truth(drive: &Drive, frame: usize) -> Result<FrameTruth> {
    let cam = drive.config.rig.camera(0.0)?;
    let pose = drive.poses[frame];
    let truth = true_annotations(&drive.scene, &drive.map_to_vehicle(frame), &cam)?;
    let mut poles: Vec<ExpectedPole> = truth
        .poles
        .into_iter()
        .map(|t| {
            let range_m = (t.base[0] - pose.x).hypot(t.base[1] - pose.y);
            let decision = expected_decision(&t);
            ExpectedPole {
                truth: t,
                range_m,
                decision,
            }
        })
        .filter(|p| p.range_m <= DEFAULT_MAX_FEATURE_DISTANCE_M)
        .collect();
    poles.sort_by(|a, b| a.truth.id.cmp(&b.truth.id));
    Ok(FrameTruth {
        image_id: image_id(frame),
        pose,
        poles,
    })
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

/// Writes the dataset under `cfg.out` and returns the exact answers.
pub fn run(cfg: &SynthConfig, exec: Execution) -> Result<SynthTruth> {
    let Some(out) = &cfg.out else {
        bail!("synth needs an output directory");
    };
    let drive = build_drive(cfg)?;
    let rig = drive.config.rig;
    let origin = synth_origin();
    let clouds = out.join("clouds");
    create_dir(&clouds)?;

    write_map_records(&out.join("map.jsonl"), &drive.scene.map_records(&origin)?)?;
    Trajectory::new(recorded_poses(&drive))?.save(&out.join("poses.csv"))?;
    let calib = Calibration {
        camera: rig.camera(drive.config.noise.calibration_yaw_bias_deg)?,
        vehicle_to_lidar: rig.vehicle_to_lidar(0.0),
    };
    let calib_path = out.join("calibration.json");
    std::fs::write(&calib_path, calib.to_json()).with_context(|| format!("writing {}", calib_path.display()))?;

    let written = par::map_indexed(exec, drive.poses.len(), |i| -> Result<FrameRow> {
        let (cloud, labels) = simulate_lidar_with(
            Execution::Sequential,
            &drive.scene,
            &drive.map_to_lidar(i),
            &drive.config.lidar,
        )?;
        let id = image_id(i);
        cloud.save(&clouds.join(format!("{id}.bin")))?;
        labels.save(&clouds.join(format!("{id}.labels")))?;
        Ok(FrameRow {
            image_id: id.clone(),
            timestamp: drive.poses[i].timestamp,
            cloud: PathBuf::from(format!("clouds/{id}.bin")),
            labels: cfg.truth_labels.then(|| PathBuf::from(format!("clouds/{id}.labels"))),
        })
    });
    let rows = written.into_iter().collect::<Result<Vec<_>>>()?;
    write_frames(&out.join("frames.csv"), &rows)?;

    if cfg.images {
        let images = out.join("images");
        create_dir(&images)?;
        let blank = image::GrayImage::from_pixel(rig.width, rig.height, image::Luma([128]));
        for r in &rows {
            let p = images.join(format!("{}.png", r.image_id));
            blank.save(&p).with_context(|| format!("writing {}", p.display()))?;
        }
    }

    let frames = (0..drive.poses.len())
        .map(|i| frame_truth(&drive, i))
        .collect::<Result<Vec<_>>>()?;
    let truth = SynthTruth {
        origin: [origin.latitude, origin.longitude],
        vehicle_height: rig.vehicle_height,
        frames,
    };
    let truth_path = out.join(TRUTH_FILE);
    std::fs::write(&truth_path, serde_json::to_string_pretty(&truth)?)
        .with_context(|| format!("writing {}", truth_path.display()))?;
    let scene_path = out.join("scene.json");
    std::fs::write(&scene_path, serde_json::to_string_pretty(&drive.scene)?)
        .with_context(|| format!("writing {}", scene_path.display()))?;

    let pipeline = PipelineFile {
        annotate: AnnotateConfig {
            map: "map.jsonl".into(),
            poses: "poses.csv".into(),
            frames: "frames.csv".into(),
            calibration: "calibration.json".into(),
            images: cfg.images.then(|| PathBuf::from("images")),
            out: "annotations".into(),
            origin: truth.origin,
            min_spacing_m: None,
            min_interval_s: None,
            params: mapanno_core::annotate::AnnotationParams::new(rig.vehicle_height),
            ground: Default::default(),
        },
    };
    let pipeline_path = out.join(PIPELINE_FILE);
    std::fs::write(&pipeline_path, toml::to_string(&pipeline)?)
        .with_context(|| format!("writing {}", pipeline_path.display()))?;
    Ok(truth)
}

#[derive(Serialize)]
struct PipelineFile {
    annotate: AnnotateConfig,
}
