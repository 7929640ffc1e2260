//! Ground/non-ground partition of a lidar scan and nearest-ground height refinement.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::cloud::{GroundLabels, PointCloud};
use crate::error::{Error, Result};
use crate::frames::{expect_frame, Frame, Point3};

/// Default cutoff for the nearest-ground search.
pub const DEFAULT_MAX_GROUND_DISTANCE_M: f64 = 5.0;

/// Anything that can split a scan into ground and non-ground points.
pub trait GroundSegmenter: Send + Sync {
    fn segment(&self, cloud: &PointCloud) -> GroundLabels;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundSegmenterConfig {
    /// Radial width of the innermost ring; outer rings widen with range.
    pub cell_size: f64,
    /// Fraction of the lowest points of a cell used to seed its plane fit.
    pub seed_quantile: f64,
    pub plane_distance_threshold: f64,
    pub max_slope_deg: f64,
}

impl Default for GroundSegmenterConfig {
    fn default() -> Self {
        GroundSegmenterConfig {
            cell_size: 2.0,
            seed_quantile: 0.3,
            plane_distance_threshold: 0.15,
            max_slope_deg: 15.0,
        }
    }
}

impl GroundSegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.cell_size > 0.0
            && self.seed_quantile > 0.0
            && self.seed_quantile < 1.0
            && self.plane_distance_threshold > 0.0
            && self.max_slope_deg > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("ground segmenter config {self:?}")))
        }
    }
}

/// Ring widths grow with range so that far cells still span several scan lines.
const RING_GROWTH: f64 = 0.2;
/// Seeds whose second principal spread is below this (m^2) are treated as a line.
const MIN_PLANAR_SPREAD: f64 = 1e-3;
const REFIT_ITERATIONS: usize = 8;

/// Polar-grid baseline: per-cell plane fit seeded from the lowest points, cells
/// steeper than `max_slope_deg` are rejected, degenerate cells borrow the plane
/// of the nearest fitted cell or, failing that, a global height-quantile rule.
#[derive(Debug, Clone, Default)]
pub struct PolarGridSegmenter {
    pub config: GroundSegmenterConfig,
}

#[derive(Debug, Clone, Copy)]
struct Plane {
    normal: Vector3<f64>,
    centroid: Vector3<f64>,
}

impl Plane {
    fn signed_distance(&self, p: &[f64; 3]) -> f64 {
        self.normal.dot(&(Vector3::new(p[0], p[1], p[2]) - self.centroid))
    }
}

enum CellFit {
    Plane(Plane),
    Steep,
    Degenerate,
}

impl PolarGridSegmenter {
    pub fn new(config: GroundSegmenterConfig) -> Self {
        PolarGridSegmenter { config }
    }

    fn ring_edges(&self, max_range: f64) -> Vec<f64> {
        let mut edges = vec![0.0];
        let mut r = 0.0;
        while r <= max_range {
            r += self.config.cell_size.max(RING_GROWTH * r);
            edges.push(r);
        }
        edges
    }

    fn fit_cell(&self, cloud: &PointCloud, members: &[usize]) -> CellFit {
        if members.len() < 3 {
            return CellFit::Degenerate;
        }
        let mut by_height = members.to_vec();
        by_height.sort_by(|&a, &b| cloud.points[a][2].total_cmp(&cloud.points[b][2]).then(a.cmp(&b)));
        let n_seeds = ((by_height.len() as f64 * self.config.seed_quantile).ceil() as usize).max(3);
        // Widen the seed set until it spans an area, not a line.
        let mut plane = None;
        let mut take = n_seeds.min(by_height.len());
        while plane.is_none() {
            let mut seeds = by_height[..take].to_vec();
            seeds.sort_unstable();
            plane = fit_plane(cloud, &seeds);
            if take == by_height.len() {
                break;
            }
            take = (take * 2).min(by_height.len());
        }
        let Some(mut plane) = plane else {
            return CellFit::Degenerate;
        };
        // Asymmetric refit: points above the plane leave the support set, points
        // below it stay, so the fit settles on the lower envelope. The support
        // band is half the labeling threshold.
        let band = 0.5 * self.config.plane_distance_threshold;
        let mut support: Vec<usize> = Vec::new();
        for _ in 0..REFIT_ITERATIONS {
            let next: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&i| plane.signed_distance(&cloud.points[i]) <= band)
                .collect();
            if next == support {
                break;
            }
            match fit_plane(cloud, &next) {
                Some(p) => plane = p,
                None => break,
            }
            support = next;
        }
        if plane.normal.z.clamp(-1.0, 1.0).acos() > self.config.max_slope_deg.to_radians() {
            CellFit::Steep
        } else {
            CellFit::Plane(plane)
        }
    }
}

fn fit_plane(cloud: &PointCloud, idx: &[usize]) -> Option<Plane> {
    if idx.len() < 3 {
        return None;
    }
    let n = idx.len() as f64;
    let centroid = idx
        .iter()
        .map(|&i| Vector3::from(cloud.points[i]))
        .sum::<Vector3<f64>>()
        / n;
    let mut cov = Matrix3::zeros();
    for &i in idx {
        let d = Vector3::from(cloud.points[i]) - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    if eig.eigenvalues[order[1]] < MIN_PLANAR_SPREAD {
        return None;
    }
    let mut normal: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    if normal.z < 0.0 {
        normal = -normal;
    }
    Some(Plane { normal, centroid })
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[pos.min(sorted.len() - 1)]
}

impl GroundSegmenter for PolarGridSegmenter {
    fn segment(&self, cloud: &PointCloud) -> GroundLabels {
        let m = cloud.len();
        if m == 0 {
            return GroundLabels::default();
        }
        let max_range = cloud.points.iter().map(|p| p[0].hypot(p[1])).fold(0.0, f64::max);
        let edges = self.ring_edges(max_range);
        let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, p) in cloud.points.iter().enumerate() {
            let r = p[0].hypot(p[1]);
            let ring = edges.partition_point(|&e| e <= r).saturating_sub(1);
            let mid = 0.5 * (edges[ring] + edges[ring + 1]);
            let width = edges[ring + 1] - edges[ring];
            let sectors = ((2.0 * PI * mid / width).ceil() as usize).max(4);
            let frac = (p[1].atan2(p[0]) + PI) / (2.0 * PI);
            let sector = ((frac * sectors as f64) as usize).min(sectors - 1);
            cells.entry((ring, sector)).or_default().push(i);
        }

        let fits: Vec<((usize, usize), CellFit)> = cells
            .iter()
            .map(|(k, members)| (*k, self.fit_cell(cloud, members)))
            .collect();
        let planes: Vec<Plane> = fits
            .iter()
            .filter_map(|(_, f)| match f {
                CellFit::Plane(p) => Some(*p),
                _ => None,
            })
            .collect();

        let mut zs: Vec<f64> = cloud.points.iter().map(|p| p[2]).collect();
        zs.sort_by(f64::total_cmp);
        let global_seed = quantile(&zs, self.config.seed_quantile);
        let thr = self.config.plane_distance_threshold;

        let mut labels = vec![false; m];
        for ((key, fit), members) in fits.iter().zip(cells.values()) {
            debug_assert_eq!(Some(members), cells.get(key));
            let plane = match fit {
                CellFit::Plane(p) => Some(*p),
                CellFit::Steep => continue,
                CellFit::Degenerate => {
                    let c = members
                        .iter()
                        .map(|&i| Vector3::from(cloud.points[i]))
                        .sum::<Vector3<f64>>()
                        / members.len() as f64;
                    planes
                        .iter()
                        .min_by(|a, b| {
                            let da = (a.centroid.xy() - c.xy()).norm_squared();
                            let db = (b.centroid.xy() - c.xy()).norm_squared();
                            da.total_cmp(&db)
                        })
                        .copied()
                }
            };
            for &i in members {
                labels[i] = match plane {
                    Some(p) => p.signed_distance(&cloud.points[i]) <= thr,
                    None => cloud.points[i][2] <= global_seed + thr,
                };
            }
        }
        GroundLabels(labels)
    }
}

/// Outcome of the nearest-ground height lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeightRefinement {
    Refined {
        point: Point3,
        /// Index of the selected ground point in the cloud.
        index: usize,
        distance_2d: f64,
    },
    NoGroundNearby,
}

/// Uniform 2D grid over the ground-labeled points of one scan.
#[derive(Debug, Clone)]
pub struct GroundIndex<'a> {
    cloud: &'a PointCloud,
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
    lo: (i64, i64),
    hi: (i64, i64),
}

const GROUND_INDEX_CELL_M: f64 = 1.0;

impl<'a> GroundIndex<'a> {
    pub fn build(cloud: &'a PointCloud, labels: &GroundLabels) -> Result<Self> {
        if labels.len() != cloud.len() {
            return Err(Error::InvalidParameter(format!(
                "{} labels for {} points",
                labels.len(),
                cloud.len()
            )));
        }
        let cell = GROUND_INDEX_CELL_M;
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        let (mut lo, mut hi) = ((i64::MAX, i64::MAX), (i64::MIN, i64::MIN));
        for (i, p) in cloud.points.iter().enumerate() {
            if !labels.is_ground(i) {
                continue;
            }
            let key = ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64);
            lo = (lo.0.min(key.0), lo.1.min(key.1));
            hi = (hi.0.max(key.0), hi.1.max(key.1));
            // indices stay ascending within a cell
            cells.entry(key).or_default().push(i);
        }
        Ok(GroundIndex {
            cloud,
            cell,
            cells,
            lo,
            hi,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Ground point minimizing the x-y distance to `(x, y)`, lowest index on ties,
    /// provided that distance is at most `max_distance`.
    pub fn nearest(&self, x: f64, y: f64, max_distance: f64) -> Option<(usize, f64)> {
        if self.cells.is_empty() {
            return None;
        }
        let q = ((x / self.cell).floor() as i64, (y / self.cell).floor() as i64);
        let reach = (q.0 - self.lo.0)
            .abs()
            .max((q.0 - self.hi.0).abs())
            .max((q.1 - self.lo.1).abs())
            .max((q.1 - self.hi.1).abs());
        let mut best: Option<(f64, usize)> = None;
        let consider = |key: (i64, i64), best: &mut Option<(f64, usize)>| {
            if let Some(members) = self.cells.get(&key) {
                for &i in members {
                    let p = &self.cloud.points[i];
                    let d2 = (p[0] - x) * (p[0] - x) + (p[1] - y) * (p[1] - y);
                    if best.is_none_or(|(bd, bi)| d2 < bd || (d2 == bd && i < bi)) {
                        *best = Some((d2, i));
                    }
                }
            }
        };
        for k in 0..=reach {
            // Every point outside the examined (2k-1)-wide block is at least
            // (k-1) cells away.
            let floor = (k - 1).max(0) as f64 * self.cell;
            if floor > max_distance {
                break;
            }
            if let Some((bd, _)) = best {
                if bd < floor * floor {
                    break;
                }
            }
            if k == 0 {
                consider(q, &mut best);
                continue;
            }
            for i in -k..=k {
                consider((q.0 + i, q.1 - k), &mut best);
                consider((q.0 + i, q.1 + k), &mut best);
            }
            for j in (-k + 1)..k {
                consider((q.0 - k, q.1 + j), &mut best);
                consider((q.0 + k, q.1 + j), &mut best);
            }
        }
        best.map(|(d2, i)| (i, d2.sqrt())).filter(|&(_, d)| d <= max_distance)
    }

    pub fn refine(&self, feature: &Point3, max_2d_distance: f64) -> Result<HeightRefinement> {
        expect_frame(feature, Frame::Lidar)?;
        Ok(match self.nearest(feature.x, feature.y, max_2d_distance) {
            Some((index, distance_2d)) => HeightRefinement::Refined {
                point: Point3 {
                    z: self.cloud.points[index][2],
                    ..*feature
                },
                index,
                distance_2d,
            },
            None => HeightRefinement::NoGroundNearby,
        })
    }
}

/// Sets the feature height to that of the ground point nearest in x-y.
pub fn refine_height(
    feature: &Point3,
    cloud: &PointCloud,
    labels: &GroundLabels,
    max_2d_distance: f64,
) -> Result<HeightRefinement> {
    GroundIndex::build(cloud, labels)?.refine(feature, max_2d_distance)
}
