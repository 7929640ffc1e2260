//! Pose logs, frame lists and pose-to-frame association.
//!
//! `poses.csv`: `timestamp,x,y,theta` (ENU meters, radians), any order.
//! `frames.csv`: `image_id,timestamp,cloud[,labels]`, paths relative to the
//! frames file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mapanno_core::frames::{normalize_angle, Pose};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct PoseRow {
    timestamp: f64,
    x: f64,
    y: f64,
    theta: f64,
}

/// Time-sorted pose log.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(mut poses: Vec<Pose>) -> Result<Self> {
        if let Some(p) = poses
            .iter()
            .find(|p| ![p.x, p.y, p.theta, p.timestamp].iter().all(|v| v.is_finite()))
        {
            bail!("non-finite pose {p:?}");
        }
        poses.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        if let Some(w) = poses.windows(2).find(|w| w[0].timestamp == w[1].timestamp) {
            bail!("two poses share timestamp {}", w[0].timestamp);
        }
        Ok(Trajectory { poses })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
        let poses = rdr
            .deserialize::<PoseRow>()
            .map(|r| r.map(|r| Pose::new(r.x, r.y, r.theta, r.timestamp)))
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("reading {}", path.display()))?;
        Trajectory::new(poses)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        for p in &self.poses {
            w.serialize(PoseRow {
                timestamp: p.timestamp,
                x: p.x,
                y: p.y,
                theta: p.theta,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    /// Pose at `t`: linear in x and y, along the shorter arc in theta. `None`
    /// outside the logged time span.
    pub fn at(&self, t: f64) -> Option<Pose> {
        let i = self.poses.partition_point(|p| p.timestamp < t);
        let b = self.poses.get(i)?;
        if b.timestamp == t {
            return Some(*b);
        }
        let a = self.poses.get(i.checked_sub(1)?)?;
        let s = (t - a.timestamp) / (b.timestamp - a.timestamp);
        let dtheta = normalize_angle(b.theta - a.theta);
        Some(Pose::new(
            a.x + s * (b.x - a.x),
            a.y + s * (b.y - a.y),
            normalize_angle(a.theta + s * dtheta),
            t,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub image_id: String,
    pub timestamp: f64,
    pub cloud: PathBuf,
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

/// Reads the frame list, resolving relative paths against its directory.
pub fn read_frames(path: &Path) -> Result<Vec<FrameRow>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for r in rdr.deserialize::<FrameRow>() {
        let mut row = r.with_context(|| format!("reading {}", path.display()))?;
        row.cloud = base.join(&row.cloud);
        row.labels = row.labels.map(|l| base.join(l));
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_frames(path: &Path, rows: &[FrameRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
