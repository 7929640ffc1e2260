//! Coordinate frames and the transforms between them.
//!
//! Conventions used throughout the crate:
//!
//! * map frame `M`: local East-North-Up tangent plane anchored at a geodetic origin;
//! * vehicle frame `V`: x forward, y left, z up, planar pose `(x, y, theta)` in `M`,
//!   `theta` counterclockwise from east;
//! * lidar frame `L`: rigidly attached to `V` through the calibration;
//! * camera frame `C`: z forward (optical axis), x right, y down.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;
const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

/// Largest origin-to-point distance accepted by [`geodetic_to_enu`].
pub const MAX_ENU_DISTANCE_M: f64 = 100_000.0;

const ORTHONORMAL_TOL: f64 = 1e-9;
/// Calibration files usually carry rotations rounded to a few decimals; anything
/// within this deviation is projected back onto SO(3) on load.
const CALIBRATION_REPAIR_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Map,
    Vehicle,
    Lidar,
    Camera,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodeticPoint {
    pub latitude: f64,
    pub longitude: f64,
}

impl GeodeticPoint {
    pub fn new(latitude: f64, longitude: f64) -> Result<Self> {
        let p = GeodeticPoint { latitude, longitude };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.latitude.is_finite()
            && self.longitude.is_finite()
            && (-90.0..=90.0).contains(&self.latitude)
            && (-180.0..=180.0).contains(&self.longitude);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidGeodetic {
                lat: self.latitude,
                lon: self.longitude,
            })
        }
    }

    fn ecef(&self) -> Vector3<f64> {
        let (sin_lat, cos_lat) = self.latitude.to_radians().sin_cos();
        let (sin_lon, cos_lon) = self.longitude.to_radians().sin_cos();
        let n = WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
        Vector3::new(
            n * cos_lat * cos_lon,
            n * cos_lat * sin_lon,
            n * (1.0 - WGS84_E2) * sin_lat,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnuPoint2 {
    pub east: f64,
    pub north: f64,
}

impl EnuPoint2 {
    pub fn new(east: f64, north: f64) -> Self {
        EnuPoint2 { east, north }
    }

    pub fn distance(&self, other: &EnuPoint2) -> f64 {
        (self.east - other.east).hypot(self.north - other.north)
    }
}

/// Planar vehicle pose in the map frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub timestamp: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64, timestamp: f64) -> Self {
        Pose {
            x,
            y,
            theta: normalize_angle(theta),
            timestamp,
        }
    }

    pub fn position(&self) -> EnuPoint2 {
        EnuPoint2::new(self.x, self.y)
    }

    /// 3D map-to-vehicle transform for a vehicle frame whose origin sits at map
    /// height `origin_z`. The x-y part is exactly [`map_to_vehicle`].
    pub fn map_to_vehicle_transform(&self, origin_z: f64) -> RigidTransform {
        let (s, c) = self.theta.sin_cos();
        let rotation = Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
        let translation = -(rotation * Vector3::new(self.x, self.y, origin_z));
        RigidTransform {
            rotation,
            translation,
            from: Frame::Map,
            to: Frame::Vehicle,
        }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t - 2.0 * PI
    } else {
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub frame: Frame,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64, frame: Frame) -> Self {
        Point3 { x, y, z, frame }
    }

    pub fn from_vector(v: Vector3<f64>, frame: Frame) -> Self {
        Point3::new(v.x, v.y, v.z, frame)
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        self.vector().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Rigid transform `p' = R p + t` mapping points from `from` into `to`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    from: Frame,
    to: Frame,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, from: Frame, to: Frame) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rigid transform"));
        }
        let dev = orthonormal_deviation(&rotation);
        if dev >= ORTHONORMAL_TOL || rotation.determinant() <= 0.0 {
            return Err(Error::NotOrthonormal(dev));
        }
        Ok(RigidTransform {
            rotation,
            translation,
            from,
            to,
        })
    }

    pub fn identity(from: Frame, to: Frame) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            from,
            to,
        }
    }

    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vector3<f64>, from: Frame, to: Frame) -> Self {
        RigidTransform {
            rotation: *rotation.matrix(),
            translation,
            from,
            to,
        }
    }

    /// Builds a transform from a row-major 4x4 homogeneous matrix. Rotations that
    /// are orthonormal only to calibration-file precision are re-projected onto SO(3).
    pub fn from_homogeneous(m: &[[f64; 4]; 4], from: Frame, to: Frame) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("homogeneous matrix"));
        }
        let bottom = m[3];
        if bottom[0].abs() > 1e-12
            || bottom[1].abs() > 1e-12
            || bottom[2].abs() > 1e-12
            || (bottom[3] - 1.0).abs() > 1e-12
        {
            return Err(Error::InvalidParameter(format!(
                "homogeneous matrix bottom row must be [0, 0, 0, 1], got {bottom:?}"
            )));
        }
        let mut rotation = Matrix3::from_fn(|r, c| m[r][c]);
        let translation = Vector3::new(m[0][3], m[1][3], m[2][3]);
        let dev = orthonormal_deviation(&rotation);
        if dev >= ORTHONORMAL_TOL {
            if dev > CALIBRATION_REPAIR_TOL || rotation.determinant() <= 0.0 {
                return Err(Error::NotOrthonormal(dev));
            }
            let svd = rotation.svd(true, true);
            let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
            rotation = u * v_t;
            tracing::debug!(deviation = dev, "re-orthonormalized calibration rotation");
        }
        RigidTransform::new(rotation, translation, from, to)
    }

    pub fn to_homogeneous(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for (r, row) in out.iter_mut().enumerate().take(3) {
            for (c, v) in row.iter_mut().enumerate().take(3) {
                *v = self.rotation[(r, c)];
            }
            row[3] = self.translation[r];
        }
        out[3][3] = 1.0;
        out
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn from_frame(&self) -> Frame {
        self.from
    }

    pub fn to_frame(&self) -> Frame {
        self.to
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            translation: -(rt * self.translation),
            rotation: rt,
            from: self.to,
            to: self.from,
        }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &RigidTransform) -> Result<RigidTransform> {
        if self.to != next.from {
            return Err(Error::FrameMismatch {
                expected: next.from,
                actual: self.to,
            });
        }
        Ok(RigidTransform {
            rotation: next.rotation * self.rotation,
            translation: next.rotation * self.translation + next.translation,
            from: self.from,
            to: next.to,
        })
    }

    /// Applies the transform to a raw vector, skipping the frame check.
    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v + self.translation
    }

    /// Position of the `to`-frame origin expressed in the `from` frame.
    pub fn origin_in_source(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

fn orthonormal_deviation(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Local tangent-plane East/North offset of `p` about `origin` (WGS-84, heights
/// taken as zero; the Up component is dropped).
pub fn geodetic_to_enu(p: &GeodeticPoint, origin: &GeodeticPoint) -> Result<EnuPoint2> {
    p.validate()?;
    origin.validate()?;
    if p == origin {
        return Ok(EnuPoint2::default());
    }
    let d = p.ecef() - origin.ecef();
    let (sin_lat, cos_lat) = origin.latitude.to_radians().sin_cos();
    let (sin_lon, cos_lon) = origin.longitude.to_radians().sin_cos();
    let east = -sin_lon * d.x + cos_lon * d.y;
    let north = -sin_lat * cos_lon * d.x - sin_lat * sin_lon * d.y + cos_lat * d.z;
    if east.hypot(north) > MAX_ENU_DISTANCE_M {
        return Err(Error::InvalidParameter(format!(
            "point is more than {MAX_ENU_DISTANCE_M} m from the ENU origin"
        )));
    }
    Ok(EnuPoint2 { east, north })
}

/// Inverse of [`geodetic_to_enu`]: the zero-height geodetic point whose ENU
/// projection about `origin` is `p` (Newton refinement to sub-nanometre).
pub fn enu_to_geodetic(p: &EnuPoint2, origin: &GeodeticPoint) -> Result<GeodeticPoint> {
    origin.validate()?;
    if !(p.east.is_finite() && p.north.is_finite()) {
        return Err(Error::NonFinite("ENU point"));
    }
    let mut guess = *origin;
    for _ in 0..20 {
        let enu = geodetic_to_enu(&guess, origin)?;
        let (de, dn) = (p.east - enu.east, p.north - enu.north);
        if de.hypot(dn) < 1e-10 {
            break;
        }
        let lat = guess.latitude.to_radians();
        let s2 = 1.0 - WGS84_E2 * lat.sin().powi(2);
        let meridian = WGS84_A * (1.0 - WGS84_E2) / s2.powf(1.5);
        let prime = WGS84_A / s2.sqrt();
        guess = GeodeticPoint {
            latitude: guess.latitude + (dn / meridian).to_degrees(),
            longitude: guess.longitude + (de / (prime * lat.cos())).to_degrees(),
        };
    }
    guess.validate()?;
    Ok(guess)
}

/// Map point into the vehicle frame: `[vx, vy] = R(theta) [mx - x, my - y]` with
/// `R = [[cos, sin], [-sin, cos]]`. The returned `z` is zero (unset).
pub fn map_to_vehicle(p: &EnuPoint2, pose: &Pose) -> Result<Point3> {
    if !(p.east.is_finite()
        && p.north.is_finite()
        && pose.x.is_finite()
        && pose.y.is_finite()
        && pose.theta.is_finite())
    {
        return Err(Error::NonFinite("map_to_vehicle input"));
    }
    let (s, c) = pose.theta.sin_cos();
    let dx = p.east - pose.x;
    let dy = p.north - pose.y;
    Ok(Point3::new(c * dx + s * dy, -s * dx + c * dy, 0.0, Frame::Vehicle))
}

pub fn vehicle_to_map(p: &Point3, pose: &Pose) -> Result<EnuPoint2> {
    expect_frame(p, Frame::Vehicle)?;
    let (s, c) = pose.theta.sin_cos();
    Ok(EnuPoint2::new(c * p.x - s * p.y + pose.x, s * p.x + c * p.y + pose.y))
}

/// Places a vehicle-frame point on a ground plane `h` below the vehicle x-y plane.
pub fn assign_fixed_height(p: &Point3, h: f64) -> Point3 {
    Point3 { z: -h, ..*p }
}

pub fn transform_point(p: &Point3, t: &RigidTransform) -> Result<Point3> {
    expect_frame(p, t.from)?;
    Ok(Point3::from_vector(t.apply_vector(&p.vector()), t.to))
}

pub(crate) fn expect_frame(p: &Point3, expected: Frame) -> Result<()> {
    if p.frame != expected {
        return Err(Error::FrameMismatch {
            expected,
            actual: p.frame,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64, depth: f64) -> Self {
        Pixel { u, v, depth }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    InImage(Pixel),
    /// In front of the camera but outside the image; carries the unclipped pixel.
    OutOfImage(Pixel),
    BehindCamera,
}

impl Projection {
    pub fn in_image(&self) -> Option<Pixel> {
        match self {
            Projection::InImage(px) => Some(*px),
            _ => None,
        }
    }

    pub fn pixel(&self) -> Option<Pixel> {
        match self {
            Projection::InImage(px) | Projection::OutOfImage(px) => Some(*px),
            Projection::BehindCamera => None,
        }
    }
}

/// Plumb-bob coefficients `[k1, k2, p1, p2, k3]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Distortion(pub [f64; 5]);

impl Distortion {
    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0.0)
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [k1, k2, p1, p2, k3] = self.0;
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        (
            x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x),
            y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub distortion: Distortion,
    /// Vehicle to camera.
    pub extrinsics: RigidTransform,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        extrinsics: RigidTransform,
    ) -> Result<Self> {
        let cam = CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            distortion: Distortion::default(),
            extrinsics,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_distortion(mut self, distortion: Distortion) -> Self {
        self.distortion = distortion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let w = f64::from(self.width);
        let h = f64::from(self.height);
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < w && self.cy > 0.0 && self.cy < h) {
            return Err(Error::InvalidParameter(
                "principal point must lie strictly inside the image".into(),
            ));
        }
        if self.extrinsics.from != Frame::Vehicle || self.extrinsics.to != Frame::Camera {
            return Err(Error::FrameMismatch {
                expected: Frame::Camera,
                actual: self.extrinsics.to,
            });
        }
        Ok(())
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < f64::from(self.width) && v < f64::from(self.height)
    }
}

pub fn project_to_image(p: &Point3, cam: &CameraModel) -> Result<Projection> {
    expect_frame(p, Frame::Camera)?;
    Ok(project_camera_vector(p.x, p.y, p.z, cam))
}

pub(crate) fn project_camera_vector(x: f64, y: f64, z: f64, cam: &CameraModel) -> Projection {
    if z <= 0.0 {
        return Projection::BehindCamera;
    }
    let (mut xn, mut yn) = (x / z, y / z);
    if !cam.distortion.is_zero() {
        (xn, yn) = cam.distortion.apply(xn, yn);
    }
    let px = Pixel::new(cam.cx + cam.fx * xn, cam.cy + cam.fy * yn, z);
    if cam.contains(px.u, px.v) {
        Projection::InImage(px)
    } else {
        Projection::OutOfImage(px)
    }
}

/// Rotation taking vehicle axes (x fwd, y left, z up) to camera axes
/// (z fwd, x right, y down).
pub fn vehicle_to_camera_axes() -> Matrix3<f64> {
    Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub camera: CameraModel,
    pub vehicle_to_lidar: RigidTransform,
}

#[derive(Debug, Serialize, Deserialize)]
struct IntrinsicsRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    #[serde(default)]
    distortion: [f64; 5],
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibrationRecord {
    intrinsics: IntrinsicsRecord,
    vehicle_to_camera: [[f64; 4]; 4],
    vehicle_to_lidar: [[f64; 4]; 4],
}

impl Calibration {
    pub fn lidar_to_camera(&self) -> RigidTransform {
        self.vehicle_to_lidar
            .inverse()
            .then(&self.camera.extrinsics)
            .expect("frames checked at construction")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: CalibrationRecord = serde_json::from_str(text)?;
        let extrinsics = RigidTransform::from_homogeneous(&rec.vehicle_to_camera, Frame::Vehicle, Frame::Camera)?;
        let vehicle_to_lidar = RigidTransform::from_homogeneous(&rec.vehicle_to_lidar, Frame::Vehicle, Frame::Lidar)?;
        let i = rec.intrinsics;
        let camera = CameraModel::new(i.fx, i.fy, i.cx, i.cy, i.width, i.height, extrinsics)?
            .with_distortion(Distortion(i.distortion));
        Ok(Calibration {
            camera,
            vehicle_to_lidar,
        })
    }

    pub fn to_json(&self) -> String {
        let c = &self.camera;
        let rec = CalibrationRecord {
            intrinsics: IntrinsicsRecord {
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                distortion: c.distortion.0,
            },
            vehicle_to_camera: c.extrinsics.to_homogeneous(),
            vehicle_to_lidar: self.vehicle_to_lidar.to_homogeneous(),
        };
        serde_json::to_string_pretty(&rec).expect("calibration serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Calibration::from_json(&text)
    }
}
