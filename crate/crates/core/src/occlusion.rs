//! Occlusion check of map features against projected lidar ranges.
//!
//! Every lidar point is projected into the image. A feature is occluded when the
//! lidar returns within a pixel radius around its projection are, on average,
//! closer to the camera than the feature by more than a threshold.
//!
//! Sample ranges and feature distances are both Euclidean distances from the
//! camera optical center, so the comparison does not depend on where in the
//! image the feature lands.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::frames::{project_camera_vector, CameraModel, Frame, Pixel, RigidTransform};
use crate::par::{self, Execution};

/// Image search radius for the lidar-based filter.
pub const DEFAULT_SEARCH_RADIUS_PX: f64 = 20.0;
/// Depth difference above which a feature is declared occluded.
pub const DEFAULT_DEPTH_DIFF_THRESHOLD_M: f64 = 5.0;

const BUCKET_PX: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthSample {
    pub pixel: Pixel,
    /// Distance from the camera optical center, meters.
    pub range: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DepthSampleMap {
    samples: Vec<DepthSample>,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthAggregate {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Visible,
    Occluded,
    NoData,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibilityVerdict {
    pub state: Visibility,
    pub local_depth: Option<f64>,
    pub true_distance: f64,
}

fn bucket_of(u: f64, v: f64) -> (i64, i64) {
    ((u / BUCKET_PX).floor() as i64, (v / BUCKET_PX).floor() as i64)
}

impl DepthSampleMap {
    pub fn from_samples(samples: Vec<DepthSample>) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            buckets.entry(bucket_of(s.pixel.u, s.pixel.v)).or_default().push(i);
        }
        DepthSampleMap { samples, buckets }
    }

    pub fn samples(&self) -> &[DepthSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples within `radius_px` of `(u, v)`, ascending.
    pub fn within(&self, u: f64, v: f64, radius_px: f64) -> Vec<usize> {
        let lo = bucket_of(u - radius_px, v - radius_px);
        let hi = bucket_of(u + radius_px, v + radius_px);
        let r2 = radius_px * radius_px;
        let mut out = Vec::new();
        for bu in lo.0..=hi.0 {
            for bv in lo.1..=hi.1 {
                let Some(members) = self.buckets.get(&(bu, bv)) else {
                    continue;
                };
                out.extend(members.iter().copied().filter(|&i| {
                    let p = &self.samples[i].pixel;
                    (p.u - u) * (p.u - u) + (p.v - v) * (p.v - v) <= r2
                }));
            }
        }
        out.sort_unstable();
        out
    }
}

pub fn build_depth_samples(cloud: &PointCloud, lidar_to_camera: &RigidTransform, cam: &CameraModel) -> DepthSampleMap {
    build_depth_samples_with(Execution::default(), cloud, lidar_to_camera, cam)
}

/// Projects every lidar point and keeps those with positive depth that land
/// inside the image.
///
/// # Panics
///
/// If `lidar_to_camera` does not map the lidar frame into the camera frame.
pub fn build_depth_samples_with(
    exec: Execution,
    cloud: &PointCloud,
    lidar_to_camera: &RigidTransform,
    cam: &CameraModel,
) -> DepthSampleMap {
    assert_eq!(
        (lidar_to_camera.from_frame(), lidar_to_camera.to_frame()),
        (Frame::Lidar, Frame::Camera),
        "depth samples need a lidar-to-camera transform"
    );
    let samples = par::filter_map(exec, &cloud.points, |p| {
        let c = lidar_to_camera.apply_vector(&(*p).into());
        project_camera_vector(c.x, c.y, c.z, cam)
            .in_image()
            .map(|pixel| DepthSample { pixel, range: c.norm() })
    });
    DepthSampleMap::from_samples(samples)
}

/// Aggregate range of the samples within `radius_px` of `at`, `None` when there
/// are none.
pub fn local_depth(samples: &DepthSampleMap, at: &Pixel, radius_px: f64, aggregate: DepthAggregate) -> Option<f64> {
    let idx = samples.within(at.u, at.v, radius_px);
    if idx.is_empty() {
        return None;
    }
    let ranges = idx.iter().map(|&i| samples.samples[i].range);
    Some(match aggregate {
        DepthAggregate::Mean => ranges.sum::<f64>() / idx.len() as f64,
        DepthAggregate::Median => {
            let mut v: Vec<f64> = ranges.collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        }
    })
}

pub fn visibility(
    feature_pixel: &Pixel,
    feature_distance: f64,
    samples: &DepthSampleMap,
    radius_px: f64,
    depth_diff_threshold: f64,
    aggregate: DepthAggregate,
) -> VisibilityVerdict {
    let local = local_depth(samples, feature_pixel, radius_px, aggregate);
    let state = match local {
        None => Visibility::NoData,
        Some(d) if feature_distance - d > depth_diff_threshold => Visibility::Occluded,
        Some(_) => Visibility::Visible,
    };
    VisibilityVerdict {
        state,
        local_depth: local,
        true_distance: feature_distance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::vehicle_to_camera_axes;
    use nalgebra::{Matrix3, Vector3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel {
        let ext = RigidTransform::new(
            vehicle_to_camera_axes(),
            Vector3::zeros(),
            Frame::Vehicle,
            Frame::Camera,
        )
        .unwrap();
        CameraModel::new(500.0, 500.0, 320.0, 240.0, 640, 480, ext).unwrap()
    }

    fn identity_l2c() -> RigidTransform {
        RigidTransform::identity(Frame::Lidar, Frame::Camera)
    }

    fn sample(u: f64, v: f64, range: f64) -> DepthSample {
        DepthSample {
            pixel: Pixel::new(u, v, range),
            range,
        }
    }

    #[test]
    fn empty_and_on_axis() {
        let m = build_depth_samples(&PointCloud::default(), &identity_l2c(), &cam());
        assert!(m.is_empty());
        let m = build_depth_samples(&PointCloud::new(vec![[0.0, 0.0, 10.0]]), &identity_l2c(), &cam());
        assert_eq!(
            m.samples(),
            &[DepthSample {
                pixel: Pixel::new(320.0, 240.0, 10.0),
                range: 10.0
            }]
        );
    }

    #[test]
    fn sample_count_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rot = nalgebra::Rotation3::from_euler_angles(0.05, -0.02, 0.1);
        let l2c =
            RigidTransform::new(*rot.matrix(), Vector3::new(0.1, -0.3, 0.2), Frame::Lidar, Frame::Camera).unwrap();
        let c = cam();
        let pts: Vec<[f64; 3]> = (0..5000)
            .map(|_| {
                [
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-30.0..60.0),
                ]
            })
            .collect();
        let m = build_depth_samples(&PointCloud::new(pts.clone()), &l2c, &c);
        let mut expected = 0;
        for p in &pts {
            let (r, t) = (l2c.rotation(), l2c.translation());
            let q = r * Vector3::new(p[0], p[1], p[2]) + t;
            if q.z > 0.0 {
                let u = 320.0 + 500.0 * q.x / q.z;
                let v = 240.0 + 500.0 * q.y / q.z;
                if (0.0..640.0).contains(&u) && (0.0..480.0).contains(&v) {
                    expected += 1;
                }
            }
        }
        assert_eq!(m.len(), expected);
        assert!(m
            .samples()
            .iter()
            .all(|s| s.range > 0.0 && c.contains(s.pixel.u, s.pixel.v)));
        let seq = build_depth_samples_with(Execution::Sequential, &PointCloud::new(pts), &l2c, &c);
        assert_eq!(seq.samples(), m.samples());
    }

    #[test]
    #[should_panic]
    fn wrong_transform_panics() {
        let t = RigidTransform::new(Matrix3::identity(), Vector3::zeros(), Frame::Vehicle, Frame::Camera).unwrap();
        build_depth_samples(&PointCloud::default(), &t, &cam());
    }

    #[test]
    fn local_depth_cases() {
        let m = DepthSampleMap::from_samples(vec![
            sample(100.0, 100.0, 10.0),
            sample(105.0, 100.0, 12.0),
            sample(300.0, 300.0, 50.0),
        ]);
        let at = Pixel::new(100.0, 100.0, 1.0);
        assert_eq!(local_depth(&m, &at, 20.0, DepthAggregate::Mean), Some(11.0));
        assert_eq!(
            local_depth(&m, &Pixel::new(500.0, 20.0, 1.0), 20.0, DepthAggregate::Mean),
            None
        );
        // boundary is closed
        assert_eq!(
            local_depth(&m, &Pixel::new(125.0, 100.0, 1.0), 20.0, DepthAggregate::Mean),
            Some(12.0)
        );
        let m = DepthSampleMap::from_samples(vec![
            sample(0.0, 0.0, 1.0),
            sample(1.0, 0.0, 2.0),
            sample(2.0, 0.0, 30.0),
        ]);
        assert_eq!(
            local_depth(&m, &Pixel::new(1.0, 0.0, 1.0), 5.0, DepthAggregate::Median),
            Some(2.0)
        );
    }

    #[test]
    fn local_depth_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let samples: Vec<DepthSample> = (0..1000)
            .map(|_| {
                sample(
                    rng.random_range(0.0..640.0),
                    rng.random_range(0.0..480.0),
                    rng.random_range(1.0..80.0),
                )
            })
            .collect();
        let m = DepthSampleMap::from_samples(samples.clone());
        for _ in 0..300 {
            let at = Pixel::new(rng.random_range(-20.0..660.0), rng.random_range(-20.0..500.0), 1.0);
            let r = rng.random_range(1.0..60.0);
            let inside: Vec<f64> = samples
                .iter()
                .filter(|s| ((s.pixel.u - at.u).powi(2) + (s.pixel.v - at.v).powi(2)).sqrt() <= r)
                .map(|s| s.range)
                .collect();
            let want = (!inside.is_empty()).then(|| inside.iter().sum::<f64>() / inside.len() as f64);
            let got = local_depth(&m, &at, r, DepthAggregate::Mean);
            match (got, want) {
                (Some(g), Some(w)) => assert!((g - w).abs() < 1e-9),
                (g, w) => assert_eq!(g, w),
            }
        }
    }

    #[test]
    fn verdicts() {
        let near = DepthSampleMap::from_samples(vec![sample(100.0, 100.0, 10.0)]);
        let far = DepthSampleMap::from_samples(vec![sample(100.0, 100.0, 29.5)]);
        let at = Pixel::new(100.0, 100.0, 30.0);
        let v = visibility(&at, 30.0, &near, 20.0, 5.0, DepthAggregate::Mean);
        assert_eq!(v.state, Visibility::Occluded);
        assert_eq!(v.local_depth, Some(10.0));
        assert_eq!(
            visibility(&at, 30.0, &far, 20.0, 5.0, DepthAggregate::Mean).state,
            Visibility::Visible
        );
        let none = DepthSampleMap::default();
        let v = visibility(&at, 30.0, &none, 20.0, 5.0, DepthAggregate::Mean);
        assert_eq!(
            (v.state, v.local_depth, v.true_distance),
            (Visibility::NoData, None, 30.0)
        );
    }

    proptest! {
        #[test]
        fn raising_threshold_never_occludes(ranges in prop::collection::vec(0.5f64..100.0, 1..20), dist in 0.5f64..100.0, t1 in 0.0f64..20.0, dt in 0.0f64..20.0) {
            let m = DepthSampleMap::from_samples(ranges.iter().enumerate().map(|(i, &r)| sample(50.0 + i as f64 * 0.5, 50.0, r)).collect());
            let at = Pixel::new(52.0, 50.0, dist);
            let a = visibility(&at, dist, &m, 20.0, t1, DepthAggregate::Mean);
            let b = visibility(&at, dist, &m, 20.0, t1 + dt, DepthAggregate::Mean);
            if a.state == Visibility::Visible {
                prop_assert_eq!(b.state, Visibility::Visible);
            }
            if a.local_depth.unwrap() >= dist {
                prop_assert_ne!(a.state, Visibility::Occluded);
            }
        }
    }
}
