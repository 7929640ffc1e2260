//! The `annotate` command: map + poses + lidar frames to a labelled dataset.

use std::path::PathBuf;

use anyhow::{Context, Result};
use mapanno_core::annotate::{export_dataset, AnnotationParams, Annotator, FrameResult, Manifest, SkippedFrame};
use mapanno_core::cloud::{GroundLabels, PointCloud};
use mapanno_core::frames::{Calibration, GeodeticPoint, Pose};
use mapanno_core::ground::{GroundSegmenterConfig, PolarGridSegmenter};
use mapanno_core::map_store::{load_map, OriginSpec};
use mapanno_core::par::{self, Execution};
use serde::{Deserialize, Serialize};

use crate::trajectory::{read_frames, FrameRow, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotateConfig {
    pub map: PathBuf,
    pub poses: PathBuf,
    pub frames: PathBuf,
    pub calibration: PathBuf,
    /// When set, frames without an image file here are skipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    pub out: PathBuf,
    /// Geodetic origin `[lat, lon]` of the ENU frame the poses are expressed in.
    pub origin: [f64; 2],
    /// Keep a frame once the vehicle moved this far since the last kept one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_spacing_m: Option<f64>,
    /// Keep a frame once this much time passed since the last kept one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_interval_s: Option<f64>,
    pub params: AnnotationParams,
    #[serde(default)]
    pub ground: GroundSegmenterConfig,
}

/// Frames kept after pose association and subsampling.
#[derive(Debug, Clone)]
pub struct PlannedFrame {
    pub row: FrameRow,
    pub pose: Pose,
}

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Associates poses, checks images and subsamples. Returns the kept frames and
/// the frames skipped for missing data.
pub fn plan_frames(
    cfg: &AnnotateConfig,
    rows: Vec<FrameRow>,
    traj: &Trajectory,
) -> (Vec<PlannedFrame>, Vec<SkippedFrame>) {
    let mut planned = Vec::new();
    let mut skipped = Vec::new();
    for row in rows {
        let Some(pose) = traj.at(row.timestamp) else {
            skipped.push(skip(
                &row.image_id,
                format!("no pose covers timestamp {}", row.timestamp),
            ));
            continue;
        };
        if let Some(dir) = &cfg.images {
            if !IMAGE_EXTENSIONS
                .iter()
                .any(|e| dir.join(format!("{}.{e}", row.image_id)).is_file())
            {
                skipped.push(skip(&row.image_id, format!("no image in {}", dir.display())));
                continue;
            }
        }
        planned.push(PlannedFrame { row, pose });
    }
    let keep = match (cfg.min_spacing_m, cfg.min_interval_s) {
        (None, None) => (0..planned.len()).collect(),
        (d, t) => {
            let poses: Vec<Pose> = planned.iter().map(|p| p.pose).collect();
            mapanno_core::annotate::subsample_frames(&poses, d.unwrap_or(f64::INFINITY), t.unwrap_or(f64::INFINITY))
        }
    };
    let before = planned.len();
    let mut it = keep.into_iter().peekable();
    let planned: Vec<PlannedFrame> = planned
        .into_iter()
        .enumerate()
        .filter_map(|(i, p)| (it.next_if_eq(&i).is_some()).then_some(p))
        .collect();
    if planned.len() < before {
        tracing::info!(kept = planned.len(), of = before, "subsampled frames");
    }
    (planned, skipped)
}

fn skip(id: &str, reason: String) -> SkippedFrame {
    tracing::warn!(image_id = id, %reason, "skipping frame");
    SkippedFrame {
        image_id: id.to_string(),
        reason,
    }
}

fn load_frame(f: &PlannedFrame) -> std::result::Result<(PointCloud, Option<GroundLabels>), String> {
    let cloud = PointCloud::load(&f.row.cloud).map_err(|e| format!("unreadable cloud: {e}"))?;
    let labels = match &f.row.labels {
        Some(p) => {
            let l = GroundLabels::load(p).map_err(|e| format!("unreadable ground labels: {e}"))?;
            if l.len() != cloud.len() {
                return Err(format!("{} ground labels for {} points", l.len(), cloud.len()));
            }
            Some(l)
        }
        None => None,
    };
    Ok((cloud, labels))
}

pub fn run(cfg: &AnnotateConfig, exec: Execution) -> Result<Manifest> {
    cfg.params.validate()?;
    cfg.ground.validate()?;
    let calib = Calibration::load(&cfg.calibration)?;
    let origin = GeodeticPoint::new(cfg.origin[0], cfg.origin[1])?;
    let map = load_map(&cfg.map, OriginSpec::Fixed(origin))?;
    let traj = Trajectory::load(&cfg.poses)?;
    let rows = read_frames(&cfg.frames)?;
    tracing::info!(
        features = map.len(),
        poses = traj.poses().len(),
        frames = rows.len(),
        "inputs loaded"
    );

    let (planned, mut skipped) = plan_frames(cfg, rows, &traj);
    let segmenter = PolarGridSegmenter::new(cfg.ground);
    let annotator = Annotator::new(&map, &calib.camera, &calib.vehicle_to_lidar, &cfg.params, &segmenter)?;

    let results = par::map(exec, &planned, |f| match load_frame(f) {
        Ok((cloud, labels)) => {
            let r = match labels {
                Some(l) => annotator.annotate_with_labels(&f.row.image_id, &f.pose, &cloud, &l),
                None => annotator.annotate(&f.row.image_id, &f.pose, &cloud),
            };
            Ok(r.with_context(|| format!("annotating frame {}", f.row.image_id)))
        }
        Err(reason) => Err(reason),
    });
    let mut frames: Vec<FrameResult> = Vec::with_capacity(results.len());
    for (f, r) in planned.iter().zip(results) {
        match r {
            Ok(result) => frames.push(result?),
            Err(reason) => skipped.push(skip(&f.row.image_id, reason)),
        }
    }
    skipped.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let manifest = export_dataset(&frames, &skipped, &cfg.out)?;
    Ok(manifest)
}

/// One line per decision, for the terminal.
pub fn summary(m: &Manifest) -> String {
    let mut s = format!(
        "{} images, {} annotations, {} skipped\n",
        m.images,
        m.annotations,
        m.skipped_frames.len()
    );
    for (k, v) in &m.decisions {
        s.push_str(&format!("  {k:<16} {v}\n"));
    }
    s
}
