//! Deterministic synthetic world with exact ray casting.
//!
//! Ground is a plane or a ramp (flat, then sloped beyond a line), poles are
//! vertical cylinders standing on the ground, obstacles are axis-aligned boxes.
//! The simulator produces lidar scans with exact ground flags and the exact
//! pixel and visibility of every pole base, which makes it the reference the
//! annotation pipeline is checked against.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::{GroundLabels, PointCloud};
use crate::error::{Error, Result};
use crate::frames::{
    enu_to_geodetic, project_camera_vector, vehicle_to_camera_axes, CameraModel, EnuPoint2, Frame, GeodeticPoint, Pose,
    Projection, RigidTransform,
};
use crate::map_store::{MapRecord, MapSet, OriginSpec};
use crate::par::{self, Execution};

/// Geodetic anchor of synthetic maps.
pub const SYNTH_ORIGIN: (f64, f64) = (49.4179, 2.8261);

pub fn synth_origin() -> GeodeticPoint {
    GeodeticPoint::new(SYNTH_ORIGIN.0, SYNTH_ORIGIN.1).expect("valid constant")
}

const EPS: f64 = 1e-9;
/// Poles extend this far below their base so sloped ground never leaves a gap.
const POLE_BURIAL_M: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundSurface {
    /// Points `p` with `normal . p = offset`.
    Plane { normal: [f64; 3], offset: f64 },
    /// `z = base_height + tan(slope) * max(0, (p - start) . direction)`.
    Ramp {
        base_height: f64,
        start: [f64; 2],
        direction: [f64; 2],
        slope_deg: f64,
    },
}

impl GroundSurface {
    pub fn flat(height: f64) -> Self {
        GroundSurface::Plane {
            normal: [0.0, 0.0, 1.0],
            offset: height,
        }
    }

    /// Plane through `(0, 0, height)` rising by `slope_deg` along `direction`.
    pub fn sloped_plane(height: f64, direction: [f64; 2], slope_deg: f64) -> Self {
        let d = Vector3::new(direction[0], direction[1], 0.0).normalize();
        let tan = slope_deg.to_radians().tan();
        let normal = Vector3::new(-tan * d.x, -tan * d.y, 1.0).normalize();
        GroundSurface::Plane {
            normal: normal.into(),
            offset: normal.z * height,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            GroundSurface::Plane { normal, offset } => {
                let n = Vector3::from(*normal);
                if !(n.norm() > 0.0 && n.z.abs() > 1e-6 && offset.is_finite()) {
                    return Err(Error::InvalidParameter("ground plane must not be vertical".into()));
                }
            }
            GroundSurface::Ramp {
                direction, slope_deg, ..
            } => {
                if direction[0].hypot(direction[1]) == 0.0 || slope_deg.abs() >= 89.0 {
                    return Err(Error::InvalidParameter("invalid ramp".into()));
                }
            }
        }
        Ok(())
    }

    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        match self {
            GroundSurface::Plane { normal, offset } => (offset - normal[0] * x - normal[1] * y) / normal[2],
            GroundSurface::Ramp {
                base_height,
                start,
                direction,
                slope_deg,
            } => {
                let s = ramp_coordinate(start, direction, x, y);
                base_height + slope_deg.to_radians().tan() * s.max(0.0)
            }
        }
    }

    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match self {
            GroundSurface::Plane { normal, offset } => plane_hit(&Vector3::from(*normal), *offset, o, d),
            GroundSurface::Ramp {
                base_height,
                start,
                direction,
                slope_deg,
            } => {
                let len = direction[0].hypot(direction[1]);
                let (ux, uy) = (direction[0] / len, direction[1] / len);
                let tan = slope_deg.to_radians().tan();
                let flat = plane_hit(&Vector3::z(), *base_height, o, d)
                    .filter(|&t| ramp_coordinate(start, direction, o.x + t * d.x, o.y + t * d.y) <= 0.0);
                // z - tan * ((x, y) - start) . u = base
                let n = Vector3::new(-tan * ux, -tan * uy, 1.0);
                let off = base_height - tan * (start[0] * ux + start[1] * uy);
                let slope = plane_hit(&n, off, o, d)
                    .filter(|&t| ramp_coordinate(start, direction, o.x + t * d.x, o.y + t * d.y) >= 0.0);
                match (flat, slope) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                }
            }
        }
    }
}

fn ramp_coordinate(start: &[f64; 2], direction: &[f64; 2], x: f64, y: f64) -> f64 {
    let len = direction[0].hypot(direction[1]);
    ((x - start[0]) * direction[0] + (y - start[1]) * direction[1]) / len
}

fn plane_hit(n: &Vector3<f64>, offset: f64, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let denom = n.dot(d);
    if denom.abs() < 1e-15 {
        return None;
    }
    let t = (offset - n.dot(o)) / denom;
    (t > EPS).then_some(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoleSpec {
    pub id: String,
    pub position: [f64; 2],
    pub height: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoxSpec {
    /// Entry parameter of the ray into the box (0 when starting inside).
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if o[k] < self.min[k] || o[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let a = (self.min[k] - o[k]) / d[k];
            let b = (self.max[k] - o[k]) / d[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t1 >= t0.max(0.0) && t1 > EPS).then(|| t0.max(0.0))
    }
}

/// Gaussian perturbations applied when exporting a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub pose_xy_sigma: f64,
    pub pose_theta_sigma: f64,
    pub range_sigma: f64,
    /// Constant yaw bias added to the exported lidar and camera calibration.
    pub calibration_yaw_bias_deg: f64,
}

impl NoiseSpec {
    pub fn is_zero(&self) -> bool {
        *self == NoiseSpec::default()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub ground: Option<GroundSurface>,
    pub poles: Vec<PoleSpec>,
    pub obstacles: Vec<BoxSpec>,
    pub seed: u64,
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pole {
    pub id: String,
    /// Ground contact point on the axis, map frame.
    pub base: [f64; 3],
    pub height: f64,
    pub radius: f64,
}

impl Pole {
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let (cx, cy, bz) = (self.base[0], self.base[1], self.base[2]);
        let top = bz + self.height;
        let bottom = bz - POLE_BURIAL_M;
        let (fx, fy) = (o.x - cx, o.y - cy);
        let r2 = self.radius * self.radius;
        let mut best: Option<f64> = None;
        let a = d.x * d.x + d.y * d.y;
        if a > 1e-18 {
            let b = 2.0 * (fx * d.x + fy * d.y);
            let c = fx * fx + fy * fy - r2;
            let disc = b * b - 4.0 * a * c;
            if disc >= 0.0 && c > 0.0 {
                let t = (-b - disc.sqrt()) / (2.0 * a);
                let z = o.z + t * d.z;
                if t > EPS && (bottom..=top).contains(&z) {
                    best = Some(t);
                }
            }
        }
        if d.z.abs() > 1e-15 {
            let t = (top - o.z) / d.z;
            let (x, y) = (fx + t * d.x, fy + t * d.y);
            if t > EPS && x * x + y * y <= r2 && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Surface {
    Ground,
    Pole(usize),
    Obstacle(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub surface: Surface,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub ground: Option<GroundSurface>,
    pub poles: Vec<Pole>,
    pub obstacles: Vec<BoxSpec>,
    pub seed: u64,
    pub noise: NoiseSpec,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    if let Some(g) = &spec.ground {
        g.validate()?;
    }
    let mut poles = Vec::with_capacity(spec.poles.len());
    for p in &spec.poles {
        if !(p.height > 0.0 && p.radius > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "pole {} needs positive height and radius",
                p.id
            )));
        }
        let z = spec
            .ground
            .as_ref()
            .map_or(0.0, |g| g.height_at(p.position[0], p.position[1]));
        poles.push(Pole {
            id: p.id.clone(),
            base: [p.position[0], p.position[1], z],
            height: p.height,
            radius: p.radius,
        });
    }
    for b in &spec.obstacles {
        if (0..3).any(|k| b.max[k].is_nan() || b.min[k].is_nan() || b.max[k] <= b.min[k]) {
            return Err(Error::InvalidParameter(format!("obstacle {b:?} has no volume")));
        }
    }
    Ok(Scene {
        ground: spec.ground.clone(),
        poles,
        obstacles: spec.obstacles.clone(),
        seed: spec.seed,
        noise: spec.noise,
    })
}

impl Scene {
    pub fn ground_height(&self, x: f64, y: f64) -> f64 {
        self.ground.as_ref().map_or(0.0, |g| g.height_at(x, y))
    }

    /// Nearest surface hit along `o + t d` with `t <= max_t`.
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>, max_t: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut offer = |t: Option<f64>, surface: Surface| {
            if let Some(t) = t {
                if t <= max_t && best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, surface });
                }
            }
        };
        if let Some(g) = &self.ground {
            offer(g.intersect(o, d), Surface::Ground);
        }
        for (i, p) in self.poles.iter().enumerate() {
            offer(p.intersect(o, d), Surface::Pole(i));
        }
        for (i, b) in self.obstacles.iter().enumerate() {
            offer(b.intersect(o, d), Surface::Obstacle(i));
        }
        best
    }

    /// Whether the open segment `a -> b` is blocked by an obstacle box or by
    /// the ground. Poles are not occluders.
    pub fn segment_blocked(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
        let d = b - a;
        let len = d.norm();
        if len == 0.0 {
            return false;
        }
        let dir = d / len;
        let stop = len * (1.0 - 1e-7);
        if self
            .obstacles
            .iter()
            .any(|bx| bx.intersect(a, &dir).is_some_and(|t| t < stop))
        {
            return true;
        }
        self.ground
            .as_ref()
            .and_then(|g| g.intersect(a, &dir))
            .is_some_and(|t| t < stop)
    }

    /// Map-to-vehicle transform with the (level) vehicle frame `vehicle_height`
    /// above the ground under the vehicle.
    pub fn map_to_vehicle(&self, pose: &Pose, vehicle_height: f64) -> RigidTransform {
        pose.map_to_vehicle_transform(self.ground_height(pose.x, pose.y) + vehicle_height)
    }

    /// Pole positions as map records georeferenced around `origin`.
    pub fn map_records(&self, origin: &GeodeticPoint) -> Result<Vec<MapRecord>> {
        self.poles
            .iter()
            .map(|p| {
                let g = enu_to_geodetic(&EnuPoint2::new(p.base[0], p.base[1]), origin)?;
                Ok(MapRecord {
                    id: p.id.clone(),
                    lat: g.latitude,
                    lon: g.longitude,
                    class: "street_light".to_string(),
                })
            })
            .collect()
    }

    pub fn map_set(&self, origin: &GeodeticPoint) -> Result<MapSet> {
        MapSet::from_records(self.map_records(origin)?, OriginSpec::Fixed(*origin))
    }

    /// Signed residual of a map-frame point against the surface it was reported on.
    pub fn surface_residual(&self, p: &Vector3<f64>, surface: Surface) -> f64 {
        match surface {
            Surface::Ground => p.z - self.ground_height(p.x, p.y),
            Surface::Pole(i) => {
                let pole = &self.poles[i];
                let r = (p.x - pole.base[0]).hypot(p.y - pole.base[1]);
                if (p.z - (pole.base[2] + pole.height)).abs() < 1e-9 && r <= pole.radius + 1e-9 {
                    0.0
                } else {
                    r - pole.radius
                }
            }
            Surface::Obstacle(i) => {
                let b = &self.obstacles[i];
                (0..3)
                    .flat_map(|k| [(p[k] - b.min[k]).abs(), (p[k] - b.max[k]).abs()])
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarSpec {
    pub channels: u32,
    pub vertical_fov_deg: [f64; 2],
    pub horizontal_resolution_deg: f64,
    pub max_range: f64,
}

impl Default for LidarSpec {
    /// 40 layers, 0.2 deg azimuth steps.
    fn default() -> Self {
        LidarSpec {
            channels: 40,
            vertical_fov_deg: [-16.0, 7.0],
            horizontal_resolution_deg: 0.2,
            max_range: 150.0,
        }
    }
}

impl LidarSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.channels >= 1
            && self.horizontal_resolution_deg > 0.0
            && self.max_range > 0.0
            && self.vertical_fov_deg[1] >= self.vertical_fov_deg[0];
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("lidar spec {self:?}")))
        }
    }

    pub fn elevations_deg(&self) -> Vec<f64> {
        let [lo, hi] = self.vertical_fov_deg;
        if self.channels == 1 {
            return vec![lo];
        }
        let step = (hi - lo) / f64::from(self.channels - 1);
        (0..self.channels).map(|c| lo + step * f64::from(c)).collect()
    }

    pub fn azimuth_steps(&self) -> usize {
        (360.0 / self.horizontal_resolution_deg).round() as usize
    }
}

pub fn simulate_lidar(
    scene: &Scene,
    map_to_lidar: &RigidTransform,
    spec: &LidarSpec,
) -> Result<(PointCloud, GroundLabels)> {
    simulate_lidar_with(Execution::default(), scene, map_to_lidar, spec)
}

/// One ray per (azimuth step, channel). Points are ordered azimuth-major and
/// expressed in the lidar frame; the labels are the exact ground flags.
pub fn simulate_lidar_with(
    exec: Execution,
    scene: &Scene,
    map_to_lidar: &RigidTransform,
    spec: &LidarSpec,
) -> Result<(PointCloud, GroundLabels)> {
    spec.validate()?;
    if (map_to_lidar.from_frame(), map_to_lidar.to_frame()) != (Frame::Map, Frame::Lidar) {
        return Err(Error::FrameMismatch {
            expected: Frame::Lidar,
            actual: map_to_lidar.to_frame(),
        });
    }
    let lidar_to_map = map_to_lidar.inverse();
    let origin = *lidar_to_map.translation();
    let rot = *lidar_to_map.rotation();
    let elevations: Vec<(f64, f64)> = spec.elevations_deg().iter().map(|e| e.to_radians().sin_cos()).collect();
    let steps = spec.azimuth_steps();
    let noise = (scene.noise.range_sigma > 0.0).then(|| Normal::new(0.0, scene.noise.range_sigma).expect("sigma > 0"));
    let noise_seed = scene.seed ^ origin.iter().fold(0u64, |h, v| h.rotate_left(21) ^ v.to_bits());

    let columns = par::map_indexed(exec, steps, |j| {
        let az = (j as f64 * spec.horizontal_resolution_deg).to_radians();
        let (sa, ca) = az.sin_cos();
        let mut rng = noise.map(|_| {
            let mut r = ChaCha8Rng::seed_from_u64(noise_seed);
            r.set_stream(j as u64);
            r
        });
        let mut out = Vec::with_capacity(elevations.len());
        for &(se, ce) in &elevations {
            let dir_l = Vector3::new(ce * ca, ce * sa, se);
            let dir_m = rot * dir_l;
            if let Some(hit) = scene.cast(&origin, &dir_m, spec.max_range) {
                let t = match (&noise, rng.as_mut()) {
                    (Some(n), Some(r)) => (hit.t + n.sample(r)).max(EPS),
                    _ => hit.t,
                };
                let p = dir_l * t;
                out.push(([p.x, p.y, p.z], hit.surface == Surface::Ground));
            }
        }
        out
    });
    let (points, labels): (Vec<[f64; 3]>, Vec<bool>) = columns.into_iter().flatten().unzip();
    Ok((PointCloud::new(points), GroundLabels(labels)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoleTruth {
    pub id: String,
    pub base: [f64; 3],
    /// Exact projection of the base; `None` behind the camera.
    pub pixel: Option<[f64; 2]>,
    pub in_image: bool,
    /// Euclidean distance from the camera center to the base.
    pub distance: f64,
    /// No obstacle or ground between camera and base.
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub poles: Vec<PoleTruth>,
}

/// Exact pixel and visibility of every pole base for a camera whose
/// vehicle-to-camera extrinsics are `cam.extrinsics`.
pub fn true_annotations(scene: &Scene, map_to_vehicle: &RigidTransform, cam: &CameraModel) -> Result<SceneTruth> {
    let map_to_camera = map_to_vehicle.then(&cam.extrinsics)?;
    let center = map_to_camera.origin_in_source();
    let poles = scene
        .poles
        .iter()
        .map(|p| {
            let base = Vector3::from(p.base);
            let c = map_to_camera.apply_vector(&base);
            let proj = project_camera_vector(c.x, c.y, c.z, cam);
            PoleTruth {
                id: p.id.clone(),
                base: p.base,
                pixel: proj.pixel().map(|px| [px.u, px.v]),
                in_image: matches!(proj, Projection::InImage(_)),
                distance: c.norm(),
                visible: !scene.segment_blocked(&center, &base),
            }
        })
        .collect();
    Ok(SceneTruth { poles })
}

/// Checks that the occlusion state seen along rays through every pixel within
/// `radius_px` of `(u, v)` matches the state at `(u, v)` itself, i.e. no
/// obstacle silhouette edge lies within that radius. Rays are tested up to
/// `distance` meters from the camera center. Assumes an undistorted camera.
pub fn silhouette_clearance(
    scene: &Scene,
    map_to_camera: &RigidTransform,
    cam: &CameraModel,
    u: f64,
    v: f64,
    distance: f64,
    radius_px: f64,
) -> bool {
    let camera_to_map = map_to_camera.inverse();
    let center = *camera_to_map.translation();
    let blocked = |pu: f64, pv: f64| {
        let dir_c = Vector3::new((pu - cam.cx) / cam.fx, (pv - cam.cy) / cam.fy, 1.0).normalize();
        let dir = camera_to_map.rotation() * dir_c;
        scene
            .obstacles
            .iter()
            .any(|b| b.intersect(&center, &dir).is_some_and(|t| t < distance))
    };
    let reference = blocked(u, v);
    const SPOKES: usize = 48;
    let rings = (radius_px.ceil() as usize).max(1);
    for ring in 1..=rings {
        let r = radius_px * ring as f64 / rings as f64;
        for k in 0..SPOKES {
            let a = 2.0 * PI * k as f64 / SPOKES as f64;
            if blocked(u + r * a.cos(), v + r * a.sin()) != reference {
                return false;
            }
        }
    }
    true
}

/// Sensor rig used by synthetic datasets: level camera and lidar above the
/// vehicle origin, vehicle frame `vehicle_height` above the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub vehicle_height: f64,
    pub camera_offset: [f64; 3],
    pub lidar_offset: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for RigSpec {
    fn default() -> Self {
        RigSpec {
            vehicle_height: 1.5,
            camera_offset: [1.0, 0.0, 0.25],
            lidar_offset: [1.0, 0.0, 0.45],
            fx: 1000.0,
            fy: 1000.0,
            width: 1280,
            height: 720,
        }
    }
}

impl RigSpec {
    /// Camera with an optional yaw error (degrees) on its extrinsics.
    pub fn camera(&self, yaw_bias_deg: f64) -> Result<CameraModel> {
        let rot = vehicle_to_camera_axes() * Rotation3::from_euler_angles(0.0, 0.0, yaw_bias_deg.to_radians()).matrix();
        let c = Vector3::from(self.camera_offset);
        let ext = RigidTransform::new(rot, -(rot * c), Frame::Vehicle, Frame::Camera)?;
        CameraModel::new(
            self.fx,
            self.fy,
            f64::from(self.width) / 2.0,
            f64::from(self.height) / 2.0,
            self.width,
            self.height,
            ext,
        )
    }

    pub fn vehicle_to_lidar(&self, yaw_bias_deg: f64) -> RigidTransform {
        let rot = *Rotation3::from_euler_angles(0.0, 0.0, yaw_bias_deg.to_radians()).matrix();
        let l = Vector3::from(self.lidar_offset);
        RigidTransform::new(rot, -(rot * l), Frame::Vehicle, Frame::Lidar).expect("rotation is orthonormal")
    }
}

/// A straight drive along +x past poles and box occluders, with an optional
/// ramp ahead of the vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriveConfig {
    pub seed: u64,
    pub frames: usize,
    pub frame_spacing_m: f64,
    pub frame_period_s: f64,
    pub poles: usize,
    pub occluders: usize,
    /// Slope of the ramp that starts ahead of the last frame; 0 for flat ground.
    pub ramp_slope_deg: f64,
    pub rig: RigSpec,
    pub lidar: LidarSpec,
    pub noise: NoiseSpec,
    /// Minimum pixel clearance between pole bases and occluder silhouettes
    /// in every frame.
    pub silhouette_margin_px: f64,
}

impl Default for DriveConfig {
    fn default() -> Self {
        DriveConfig {
            seed: 0,
            frames: 20,
            frame_spacing_m: 2.0,
            frame_period_s: 0.5,
            poles: 30,
            occluders: 3,
            ramp_slope_deg: 5.0,
            rig: RigSpec::default(),
            lidar: LidarSpec::default(),
            noise: NoiseSpec::default(),
            silhouette_margin_px: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drive {
    pub scene: Scene,
    pub poses: Vec<Pose>,
    pub config: DriveConfig,
}

impl Drive {
    pub fn map_to_vehicle(&self, frame: usize) -> RigidTransform {
        self.scene
            .map_to_vehicle(&self.poses[frame], self.config.rig.vehicle_height)
    }

    pub fn map_to_lidar(&self, frame: usize) -> RigidTransform {
        self.map_to_vehicle(frame)
            .then(&self.config.rig.vehicle_to_lidar(0.0))
            .expect("vehicle frames line up")
    }
}

const MAX_PLACEMENT_TRIES: usize = 200;

/// Builds a drive deterministically from `cfg.seed`. Poles are rejection-sampled
/// so that in every frame each base is either clearly visible or clearly behind
/// an occluder (`silhouette_margin_px`).
pub fn generate_drive(cfg: &DriveConfig) -> Result<Drive> {
    cfg.lidar.validate()?;
    if cfg.frames == 0 {
        return Err(Error::InvalidParameter("a drive needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let travel = cfg.frame_spacing_m * (cfg.frames - 1) as f64;
    let ground = if cfg.ramp_slope_deg == 0.0 {
        GroundSurface::flat(0.0)
    } else {
        GroundSurface::Ramp {
            base_height: 0.0,
            start: [travel + 12.0, 0.0],
            direction: [1.0, 0.0],
            slope_deg: cfg.ramp_slope_deg,
        }
    };
    let poses: Vec<Pose> = (0..cfg.frames)
        .map(|i| Pose::new(i as f64 * cfg.frame_spacing_m, 0.0, 0.0, i as f64 * cfg.frame_period_s))
        .collect();

    // Roadside boxes (parked vans, kiosks, walls), alternating sides.
    let mut obstacles = Vec::with_capacity(cfg.occluders);
    for k in 0..cfg.occluders {
        let side = if k % 2 == 0 { 1.0 } else { -1.0 };
        let x0 = rng.random_range(8.0..travel + 60.0);
        let len = rng.random_range(4.0..12.0);
        let inner = rng.random_range(3.5..5.0);
        let depth = rng.random_range(1.0..2.5);
        let (y0, y1) = if side > 0.0 {
            (inner, inner + depth)
        } else {
            (-inner - depth, -inner)
        };
        let x1 = x0 + len;
        let z0 = ground.height_at(x0, 0.0).min(ground.height_at(x1, 0.0)) - 0.5;
        let z1 = ground.height_at(x0, 0.0).max(ground.height_at(x1, 0.0)) + rng.random_range(2.8..4.0);
        obstacles.push(BoxSpec {
            min: [x0, y0, z0],
            max: [x1, y1, z1],
        });
    }

    let mut scene = generate_scene(&SceneSpec {
        ground: Some(ground),
        poles: Vec::new(),
        obstacles,
        seed: cfg.seed,
        noise: cfg.noise,
    })?;
    let cam = cfg.rig.camera(0.0)?;
    let frames_m2c: Vec<RigidTransform> = poses
        .iter()
        .map(|p| scene.map_to_vehicle(p, cfg.rig.vehicle_height).then(&cam.extrinsics))
        .collect::<Result<_>>()?;

    for k in 0..cfg.poles {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let x = rng.random_range(10.0..travel + 90.0);
            let y = side * rng.random_range(4.0..12.0);
            let candidate = PoleSpec {
                id: format!("pole_{k:03}"),
                position: [x, y],
                height: rng.random_range(2.5..8.0),
                radius: rng.random_range(0.06..0.15),
            };
            let z = scene.ground_height(x, y);
            let base = Vector3::new(x, y, z);
            if scene.obstacles.iter().any(|b| {
                b.intersect(&(base + Vector3::z() * 0.01), &Vector3::z())
                    .is_some_and(|t| t == 0.0)
            }) {
                continue;
            }
            if scene.poles.iter().any(|p| (p.base[0] - x).hypot(p.base[1] - y) < 2.0) {
                continue;
            }
            let clear = frames_m2c.iter().all(|m2c| {
                let c = m2c.apply_vector(&base);
                match project_camera_vector(c.x, c.y, c.z, &cam) {
                    Projection::InImage(px) => {
                        silhouette_clearance(&scene, m2c, &cam, px.u, px.v, c.norm(), cfg.silhouette_margin_px)
                            && near_image_border(&cam, px.u, px.v) > 2.0
                    }
                    Projection::OutOfImage(px) => near_image_border(&cam, px.u, px.v) > 2.0,
                    Projection::BehindCamera => true,
                }
            });
            if clear {
                scene.poles.push(Pole {
                    id: candidate.id,
                    base: [x, y, z],
                    height: candidate.height,
                    radius: candidate.radius,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidParameter(format!(
                "could not place pole {k} with the requested margins"
            )));
        }
    }
    Ok(Drive {
        scene,
        poses,
        config: cfg.clone(),
    })
}

fn near_image_border(cam: &CameraModel, u: f64, v: f64) -> f64 {
    let (w, h) = (f64::from(cam.width), f64::from(cam.height));
    let du = if (0.0..w).contains(&u) {
        u.min(w - u)
    } else {
        (u.min(w - u)).abs()
    };
    let dv = if (0.0..h).contains(&v) {
        v.min(h - v)
    } else {
        (v.min(h - v)).abs()
    };
    if (0.0..w).contains(&u) && (0.0..h).contains(&v) {
        du.min(dv)
    } else if (0.0..w).contains(&u) {
        dv
    } else if (0.0..h).contains(&v) {
        du
    } else {
        du.min(dv)
    }
}
