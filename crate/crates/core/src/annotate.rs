//! Per-frame annotation pipeline, box encoding and dataset export.
//!
//! Stage order for every map feature within range of the vehicle:
//! flat-ground height, lidar ground refinement, projection, lidar occlusion
//! check, box encoding. Every in-range feature leaves exactly one audit record.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::{GroundLabels, PointCloud};
use crate::error::{Error, Result};
use crate::frames::{
    assign_fixed_height, map_to_vehicle, project_to_image, transform_point, CameraModel, EnuPoint2, Frame, Pixel,
    Point3, Pose, Projection, RigidTransform,
};
use crate::ground::{GroundIndex, GroundSegmenter, HeightRefinement, DEFAULT_MAX_GROUND_DISTANCE_M};
use crate::map_store::{MapSet, DEFAULT_MAX_FEATURE_DISTANCE_M};
use crate::occlusion::{
    build_depth_samples_with, visibility, DepthAggregate, Visibility, DEFAULT_DEPTH_DIFF_THRESHOLD_M,
    DEFAULT_SEARCH_RADIUS_PX,
};
use crate::par::{self, Execution};

/// The single output class.
pub const POLE_BASE_CLASS: &str = "pole_base";
pub const POLE_BASE_CLASS_INDEX: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationParams {
    #[serde(default = "default_max_feature_distance")]
    pub max_feature_distance: f64,
    #[serde(default = "default_search_radius")]
    pub search_radius_px: f64,
    #[serde(default = "default_depth_diff")]
    pub depth_diff_threshold: f64,
    #[serde(default = "default_box_size")]
    pub box_width_px: f64,
    #[serde(default = "default_box_size")]
    pub box_height_px: f64,
    /// Height of the vehicle frame origin above the ground, meters.
    pub vehicle_height: f64,
    /// Keep features with no lidar samples around their pixel.
    #[serde(default = "yes")]
    pub keep_nodata: bool,
    #[serde(default = "default_max_ground_distance")]
    pub max_ground_distance: f64,
    #[serde(default)]
    pub depth_aggregate: DepthAggregate,
    #[serde(default = "yes")]
    pub ground_refinement: bool,
    #[serde(default = "yes")]
    pub occlusion_filter: bool,
    /// Drop features without ground points nearby instead of falling back to
    /// the flat-ground height.
    #[serde(default)]
    pub drop_no_ground: bool,
}

fn default_max_feature_distance() -> f64 {
    DEFAULT_MAX_FEATURE_DISTANCE_M
}
fn default_search_radius() -> f64 {
    DEFAULT_SEARCH_RADIUS_PX
}
fn default_depth_diff() -> f64 {
    DEFAULT_DEPTH_DIFF_THRESHOLD_M
}
fn default_box_size() -> f64 {
    200.0
}
fn default_max_ground_distance() -> f64 {
    DEFAULT_MAX_GROUND_DISTANCE_M
}
fn yes() -> bool {
    true
}

impl AnnotationParams {
    pub fn new(vehicle_height: f64) -> Self {
        AnnotationParams {
            max_feature_distance: default_max_feature_distance(),
            search_radius_px: default_search_radius(),
            depth_diff_threshold: default_depth_diff(),
            box_width_px: default_box_size(),
            box_height_px: default_box_size(),
            vehicle_height,
            keep_nodata: true,
            max_ground_distance: default_max_ground_distance(),
            depth_aggregate: DepthAggregate::Mean,
            ground_refinement: true,
            occlusion_filter: true,
            drop_no_ground: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_feature_distance", self.max_feature_distance),
            ("search_radius_px", self.search_radius_px),
            ("depth_diff_threshold", self.depth_diff_threshold),
            ("vehicle_height", self.vehicle_height),
            ("max_ground_distance", self.max_ground_distance),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("box_width_px", self.box_width_px),
            ("box_height_px", self.box_height_px),
        ] {
            if !(v.is_finite() && v >= 2.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be at least 2 px, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Normalized `(cx, cy, w, h)` box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        NormBox { cx, cy, w, h }
    }

    /// `(x0, y0, x1, y1)` corners in normalized units.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        NormBox {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

/// Box of the configured size around `base`, normalized by the image size.
/// Width and height are clipped to the image; the center stays at the base.
pub fn make_box(base: &Pixel, params: &AnnotationParams, image_w: u32, image_h: u32) -> Result<NormBox> {
    let (w, h) = (f64::from(image_w), f64::from(image_h));
    if !(base.u >= 0.0 && base.v >= 0.0 && base.u < w && base.v < h) {
        return Err(Error::InvalidParameter(format!(
            "base ({}, {}) outside a {image_w}x{image_h} image",
            base.u, base.v
        )));
    }
    let span = |c: f64, size: f64, limit: f64| (c + size / 2.0).min(limit) - (c - size / 2.0).max(0.0);
    Ok(NormBox {
        cx: base.u / w,
        cy: base.v / h,
        w: span(base.u, params.box_width_px, w) / w,
        h: span(base.v, params.box_height_px, h) / h,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    Map,
    Segmentation,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub class: String,
    pub center: Pixel,
    #[serde(rename = "box")]
    pub bbox: NormBox,
    pub source: AnnotationSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Kept,
    /// Beyond the feature distance; never emitted per frame since only
    /// in-range features are audited.
    CulledRadius,
    BehindCamera,
    OutOfImage,
    Occluded,
    NoGround,
    NoDataDropped,
}

impl Decision {
    pub const ALL: [Decision; 7] = [
        Decision::Kept,
        Decision::CulledRadius,
        Decision::BehindCamera,
        Decision::OutOfImage,
        Decision::Occluded,
        Decision::NoGround,
        Decision::NoDataDropped,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::Kept => "kept",
            Decision::CulledRadius => "culled_radius",
            Decision::BehindCamera => "behind_camera",
            Decision::OutOfImage => "out_of_image",
            Decision::Occluded => "occluded",
            Decision::NoGround => "no_ground",
            Decision::NoDataDropped => "no_data_dropped",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeightSource {
    /// Fixed height below the vehicle frame.
    Flat,
    /// Height of the nearest lidar ground point.
    Ground,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub image_id: String,
    pub feature_id: String,
    pub feature_class: String,
    pub decision: Decision,
    /// Planar distance from the vehicle, meters.
    pub range_m: f64,
    /// Feature in the vehicle frame at flat-ground height.
    pub vehicle_point: [f64; 3],
    /// Projection of the flat-ground point, `None` behind the camera.
    pub naive_pixel: Option<[f64; 2]>,
    pub height_source: HeightSource,
    pub ground_point_index: Option<usize>,
    /// Lidar-frame height used for projection.
    pub lidar_z: f64,
    /// Projection used for the occlusion check and the box.
    pub refined_pixel: Option<[f64; 2]>,
    pub visibility: Option<Visibility>,
    pub local_depth: Option<f64>,
    pub true_distance: Option<f64>,
    /// Line of this feature's annotation in the label file.
    pub annotation_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub annotations: Vec<Annotation>,
    pub audit: Vec<AuditRecord>,
}

impl FrameResult {
    pub fn decision_counts(&self) -> BTreeMap<Decision, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.audit {
            *counts.entry(r.decision).or_insert(0) += 1;
        }
        counts
    }
}

/// Map, sensors and parameters shared by every frame of a drive.
pub struct Annotator<'a> {
    map: &'a MapSet,
    cam: &'a CameraModel,
    vehicle_to_lidar: &'a RigidTransform,
    lidar_to_camera: RigidTransform,
    params: &'a AnnotationParams,
    segmenter: &'a dyn GroundSegmenter,
}

impl<'a> Annotator<'a> {
    pub fn new(
        map: &'a MapSet,
        cam: &'a CameraModel,
        vehicle_to_lidar: &'a RigidTransform,
        params: &'a AnnotationParams,
        segmenter: &'a dyn GroundSegmenter,
    ) -> Result<Self> {
        params.validate()?;
        cam.validate()?;
        if vehicle_to_lidar.from_frame() != Frame::Vehicle {
            return Err(Error::FrameMismatch {
                expected: Frame::Vehicle,
                actual: vehicle_to_lidar.from_frame(),
            });
        }
        if vehicle_to_lidar.to_frame() != Frame::Lidar {
            return Err(Error::FrameMismatch {
                expected: Frame::Lidar,
                actual: vehicle_to_lidar.to_frame(),
            });
        }
        let lidar_to_camera = vehicle_to_lidar.inverse().then(&cam.extrinsics)?;
        Ok(Annotator {
            map,
            cam,
            vehicle_to_lidar,
            lidar_to_camera,
            params,
            segmenter,
        })
    }

    /// Runs the ground segmenter on `cloud` and annotates the frame.
    pub fn annotate(&self, image_id: &str, pose: &Pose, cloud: &PointCloud) -> Result<FrameResult> {
        let labels = self.segmenter.segment(cloud);
        self.annotate_with_labels(image_id, pose, cloud, &labels)
    }

    /// Same as [`Annotator::annotate`] with precomputed ground labels.
    pub fn annotate_with_labels(
        &self,
        image_id: &str,
        pose: &Pose,
        cloud: &PointCloud,
        labels: &GroundLabels,
    ) -> Result<FrameResult> {
        let p = self.params;
        let ground = GroundIndex::build(cloud, labels)?;
        let depth = build_depth_samples_with(Execution::Sequential, cloud, &self.lidar_to_camera, self.cam);
        let lidar_to_vehicle = self.vehicle_to_lidar.inverse();

        let mut features = self.map.query_radius(&pose.position(), p.max_feature_distance);
        features.sort_by(|a, b| a.id.cmp(&b.id));

        let mut annotations = Vec::new();
        let mut audit = Vec::with_capacity(features.len());
        for f in features {
            let flat = assign_fixed_height(&map_to_vehicle(&f.enu, pose)?, -p.vehicle_height);
            let naive = project_to_image(&transform_point(&flat, &self.cam.extrinsics)?, self.cam)?;
            let mut rec = AuditRecord {
                image_id: image_id.to_string(),
                feature_id: f.id.clone(),
                feature_class: f.klass.as_str().to_string(),
                decision: Decision::Kept,
                range_m: f.enu.distance(&pose.position()),
                vehicle_point: [flat.x, flat.y, flat.z],
                naive_pixel: naive.pixel().map(|px| [px.u, px.v]),
                height_source: HeightSource::Flat,
                ground_point_index: None,
                lidar_z: 0.0,
                refined_pixel: None,
                visibility: None,
                local_depth: None,
                true_distance: None,
                annotation_index: None,
            };

            let mut in_lidar = transform_point(&flat, self.vehicle_to_lidar)?;
            if p.ground_refinement {
                match ground.refine(&in_lidar, p.max_ground_distance)? {
                    HeightRefinement::Refined { point, index, .. } => {
                        in_lidar = point;
                        rec.height_source = HeightSource::Ground;
                        rec.ground_point_index = Some(index);
                    }
                    HeightRefinement::NoGroundNearby if p.drop_no_ground => {
                        rec.lidar_z = in_lidar.z;
                        rec.decision = Decision::NoGround;
                        audit.push(rec);
                        continue;
                    }
                    HeightRefinement::NoGroundNearby => {}
                }
            }
            rec.lidar_z = in_lidar.z;
            let in_camera = transform_point(&transform_point(&in_lidar, &lidar_to_vehicle)?, &self.cam.extrinsics)?;
            let proj = project_to_image(&in_camera, self.cam)?;
            rec.refined_pixel = proj.pixel().map(|px| [px.u, px.v]);
            let pixel = match proj {
                Projection::InImage(px) => px,
                Projection::OutOfImage(_) => {
                    rec.decision = Decision::OutOfImage;
                    audit.push(rec);
                    continue;
                }
                Projection::BehindCamera => {
                    rec.decision = Decision::BehindCamera;
                    audit.push(rec);
                    continue;
                }
            };

            let distance = in_camera.norm();
            rec.true_distance = Some(distance);
            if p.occlusion_filter {
                let verdict = visibility(
                    &pixel,
                    distance,
                    &depth,
                    p.search_radius_px,
                    p.depth_diff_threshold,
                    p.depth_aggregate,
                );
                rec.visibility = Some(verdict.state);
                rec.local_depth = verdict.local_depth;
                match verdict.state {
                    Visibility::Occluded => rec.decision = Decision::Occluded,
                    Visibility::NoData if !p.keep_nodata => rec.decision = Decision::NoDataDropped,
                    _ => {}
                }
                if rec.decision != Decision::Kept {
                    audit.push(rec);
                    continue;
                }
            }

            rec.annotation_index = Some(annotations.len());
            annotations.push(Annotation {
                image_id: image_id.to_string(),
                class: POLE_BASE_CLASS.to_string(),
                center: pixel,
                bbox: make_box(&pixel, p, self.cam.width, self.cam.height)?,
                source: AnnotationSource::Map,
                feature_id: Some(f.id.clone()),
            });
            audit.push(rec);
        }
        Ok(FrameResult {
            image_id: image_id.to_string(),
            image_width: self.cam.width,
            image_height: self.cam.height,
            annotations,
            audit,
        })
    }
}

/// Single-frame convenience wrapper around [`Annotator`].
#[allow(clippy::too_many_arguments)]
pub fn annotate_frame(
    image_id: &str,
    pose: &Pose,
    cloud: &PointCloud,
    map: &MapSet,
    cam: &CameraModel,
    vehicle_to_lidar: &RigidTransform,
    params: &AnnotationParams,
    segmenter: &dyn GroundSegmenter,
) -> Result<FrameResult> {
    Annotator::new(map, cam, vehicle_to_lidar, params, segmenter)?.annotate(image_id, pose, cloud)
}

/// Input of one frame for [`annotate_frames`].
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub image_id: String,
    pub pose: Pose,
    pub cloud: PointCloud,
}

/// Annotates frames independently; results keep the input order.
pub fn annotate_frames(exec: Execution, annotator: &Annotator<'_>, frames: &[FrameInput]) -> Vec<Result<FrameResult>> {
    par::map(exec, frames, |f| annotator.annotate(&f.image_id, &f.pose, &f.cloud))
}

/// Greedy pass: a frame is kept when it is at least `min_pose_spacing` meters
/// or `min_time_spacing` seconds away from the last kept frame. Returns the
/// kept indices.
pub fn subsample_frames(poses: &[Pose], min_pose_spacing: f64, min_time_spacing: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, p) in poses.iter().enumerate() {
        let keep = match kept.last() {
            None => true,
            Some(&j) => {
                let last = &poses[j];
                p.position().distance(&last.position()) >= min_pose_spacing
                    || p.timestamp - last.timestamp >= min_time_spacing
            }
        };
        if keep {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub annotations: usize,
    pub audit_records: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub images: usize,
    pub annotations: usize,
    pub decisions: BTreeMap<String, usize>,
    pub frames: Vec<ManifestFrame>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_frames: Vec<SkippedFrame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFrame {
    pub image_id: String,
    pub reason: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_DIR: &str = "labels";
pub const AUDIT_DIR: &str = "audit";

/// Writes `labels/<id>.txt`, `audit/<id>.jsonl` and `manifest.json` under
/// `out_dir`. Output depends only on the input, so re-exports are identical.
pub fn export_dataset(frames: &[FrameResult], skipped: &[SkippedFrame], out_dir: &Path) -> Result<Manifest> {
    let mut seen = HashSet::new();
    for f in frames {
        if !seen.insert(f.image_id.as_str()) {
            return Err(Error::DuplicateId(f.image_id.clone()));
        }
        check_image_id(&f.image_id)?;
    }
    let labels_dir = out_dir.join(LABELS_DIR);
    let audit_dir = out_dir.join(AUDIT_DIR);
    for d in [&labels_dir, &audit_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let mut manifest = Manifest {
        decisions: Decision::ALL.iter().map(|d| (d.as_str().to_string(), 0)).collect(),
        skipped_frames: skipped.to_vec(),
        ..Default::default()
    };
    for f in frames {
        write_labels(&labels_dir.join(format!("{}.txt", f.image_id)), &f.annotations)?;
        write_audit(&audit_dir.join(format!("{}.jsonl", f.image_id)), &f.audit)?;
        manifest.images += 1;
        manifest.annotations += f.annotations.len();
        for r in &f.audit {
            *manifest.decisions.entry(r.decision.as_str().to_string()).or_insert(0) += 1;
        }
        manifest.frames.push(ManifestFrame {
            image_id: f.image_id.clone(),
            image_width: f.image_width,
            image_height: f.image_height,
            annotations: f.annotations.len(),
            audit_records: f.audit.len(),
        });
    }
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Image ids become file names; reject anything that could escape the directory.
pub fn check_image_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::InvalidParameter(format!("invalid image id {id:?}")));
    }
    Ok(())
}

pub fn format_label_line(class_index: u32, b: &NormBox) -> String {
    format!("{class_index} {:.6} {:.6} {:.6} {:.6}", b.cx, b.cy, b.w, b.h)
}

pub fn write_labels(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let mut text = String::new();
    for a in annotations {
        text.push_str(&format_label_line(POLE_BASE_CLASS_INDEX, &a.bbox));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Label-file rows `class cx cy w h`.
pub fn read_labels(path: &Path) -> Result<Vec<(u32, NormBox)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 5 fields, got {}", fields.len()),
            ));
        }
        let class = fields[0]
            .parse::<u32>()
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        let v = fields[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::parse(path, i + 1, e.to_string())))
            .collect::<Result<Vec<f64>>>()?;
        out.push((class, NormBox::new(v[0], v[1], v[2], v[3])));
    }
    Ok(out)
}

pub fn write_audit(path: &Path, records: &[AuditRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Flat-ground pixel of a map point, used by callers that only need the naive
/// projection.
pub fn naive_projection(enu: &EnuPoint2, pose: &Pose, vehicle_height: f64, cam: &CameraModel) -> Result<Projection> {
    let p: Point3 = assign_fixed_height(&map_to_vehicle(enu, pose)?, -vehicle_height);
    project_to_image(&transform_point(&p, &cam.extrinsics)?, cam)
}
