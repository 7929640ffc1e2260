//! Lidar point clouds, ground labels and their on-disk layouts.
//!
//! `.bin`: little-endian `f32` quadruples `(x, y, z, intensity)`.
//! `.csv`: header `x,y,z,intensity`.
//! `.labels`: one byte per point, `1` = ground.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scan in the lidar frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub intensity: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud {
            points,
            intensity: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => read_csv(path),
            _ => read_bin(path),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => write_csv(self, path),
            _ => write_bin(self, path),
        }
    }
}

pub fn decode_bin(bytes: &[u8]) -> std::result::Result<PointCloud, String> {
    if !bytes.len().is_multiple_of(16) {
        return Err(format!("length {} is not a multiple of 16 bytes", bytes.len()));
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(chunk[i * 4..i * 4 + 4].try_into().expect("4 bytes"));
        let p = [f64::from(f(0)), f64::from(f(1)), f64::from(f(2))];
        if p.iter().any(|v| !v.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        points.push(p);
        intensity.push(f(3));
    }
    Ok(PointCloud {
        points,
        intensity: Some(intensity),
    })
}

pub fn encode_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points.iter().enumerate() {
        let intensity = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_bin(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bin(&bytes).map_err(|m| Error::parse(path, 0, m))
}

pub fn write_bin(cloud: &PointCloud, path: &Path) -> Result<()> {
    std::fs::write(path, encode_bin(cloud)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    x: f64,
    y: f64,
    z: f64,
    #[serde(default)]
    intensity: f32,
}

pub fn read_csv(path: &Path) -> Result<PointCloud> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let mut cloud = PointCloud {
        points: Vec::new(),
        intensity: Some(Vec::new()),
    };
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        // header is line 1
        let row = row.map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
        if !(row.x.is_finite() && row.y.is_finite() && row.z.is_finite()) {
            return Err(Error::parse(path, i + 2, "non-finite coordinate"));
        }
        cloud.points.push([row.x, row.y, row.z]);
        cloud.intensity.as_mut().expect("set above").push(row.intensity);
    }
    Ok(cloud)
}

pub fn write_csv(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    for (i, p) in cloud.points.iter().enumerate() {
        let intensity = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        w.serialize(CsvRow {
            x: p[0],
            y: p[1],
            z: p[2],
            intensity,
        })
        .map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-point ground flag, `true` = ground.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundLabels(pub Vec<bool>);

impl GroundLabels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_ground(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn ground_count(&self) -> usize {
        self.0.iter().filter(|&&g| g).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.0.iter().map(|&g| u8::from(g)).collect();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        bytes
            .iter()
            .enumerate()
            .map(|(i, &b)| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::parse(path, 0, format!("byte {i}: invalid label {other}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(GroundLabels)
    }
}
