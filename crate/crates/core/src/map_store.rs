//! Vector map of pole-like features with a uniform-grid radius index.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{geodetic_to_enu, EnuPoint2, GeodeticPoint};

/// Maximum distance between a pole and the vehicle for lidar-based processing.
pub const DEFAULT_MAX_FEATURE_DISTANCE_M: f64 = 150.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureClass {
    TrafficSign,
    TrafficLight,
    StreetLight,
    Bollard,
    OtherPole,
}

impl FeatureClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureClass::TrafficSign => "traffic_sign",
            FeatureClass::TrafficLight => "traffic_light",
            FeatureClass::StreetLight => "street_light",
            FeatureClass::Bollard => "bollard",
            FeatureClass::OtherPole => "other_pole",
        }
    }

    /// Unknown names map to [`FeatureClass::OtherPole`].
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "traffic_sign" => Some(FeatureClass::TrafficSign),
            "traffic_light" => Some(FeatureClass::TrafficLight),
            "street_light" => Some(FeatureClass::StreetLight),
            "bollard" => Some(FeatureClass::Bollard),
            "other_pole" => Some(FeatureClass::OtherPole),
            _ => None,
        }
    }
}

impl fmt::Display for FeatureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapFeature {
    pub id: String,
    pub position: GeodeticPoint,
    pub enu: EnuPoint2,
    pub klass: FeatureClass,
}

/// One line of the map file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapRecord {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default = "default_class")]
    pub class: String,
}

fn default_class() -> String {
    FeatureClass::OtherPole.as_str().to_string()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OriginSpec {
    Fixed(GeodeticPoint),
    /// Arithmetic mean of the feature latitudes and longitudes.
    Auto,
}

#[derive(Debug, Clone)]
struct GridIndex {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl GridIndex {
    fn build(points: impl Iterator<Item = EnuPoint2>, cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.enumerate() {
            cells.entry(cell_of(&p, cell)).or_default().push(i);
        }
        GridIndex { cell, cells }
    }

    fn candidates(&self, center: &EnuPoint2, r: f64) -> impl Iterator<Item = usize> + '_ {
        let lo = cell_of(&EnuPoint2::new(center.east - r, center.north - r), self.cell);
        let hi = cell_of(&EnuPoint2::new(center.east + r, center.north + r), self.cell);
        let span = (hi.0 - lo.0 + 1) * (hi.1 - lo.1 + 1);
        // Huge radii: walking occupied cells is cheaper than walking the box.
        let walk_all = span > self.cells.len() as i64;
        let boxed = (!walk_all).then(|| {
            (lo.0..=hi.0)
                .flat_map(move |i| (lo.1..=hi.1).map(move |j| (i, j)))
                .filter_map(|key| self.cells.get(&key))
                .flatten()
                .copied()
        });
        let all = walk_all.then(|| self.cells.values().flatten().copied());
        boxed.into_iter().flatten().chain(all.into_iter().flatten())
    }
}

fn cell_of(p: &EnuPoint2, cell: f64) -> (i64, i64) {
    ((p.east / cell).floor() as i64, (p.north / cell).floor() as i64)
}

#[derive(Debug, Clone)]
pub struct MapSet {
    origin: GeodeticPoint,
    features: Vec<MapFeature>,
    index: GridIndex,
}

impl PartialEq for MapSet {
    fn eq(&self, other: &Self) -> bool {
        self.origin == other.origin && self.features == other.features
    }
}

impl MapSet {
    pub fn from_records(records: Vec<MapRecord>, origin: OriginSpec) -> Result<Self> {
        let mut positions = Vec::with_capacity(records.len());
        for r in &records {
            positions.push(GeodeticPoint::new(r.lat, r.lon)?);
        }
        let origin = match origin {
            OriginSpec::Fixed(o) => {
                o.validate()?;
                o
            }
            OriginSpec::Auto if positions.is_empty() => GeodeticPoint {
                latitude: 0.0,
                longitude: 0.0,
            },
            OriginSpec::Auto => {
                let n = positions.len() as f64;
                GeodeticPoint::new(
                    positions.iter().map(|p| p.latitude).sum::<f64>() / n,
                    positions.iter().map(|p| p.longitude).sum::<f64>() / n,
                )?
            }
        };
        let mut seen = HashSet::new();
        let mut features = Vec::with_capacity(records.len());
        for (r, position) in records.into_iter().zip(positions) {
            if !seen.insert(r.id.clone()) {
                return Err(Error::DuplicateId(r.id));
            }
            let klass = FeatureClass::parse(&r.class).unwrap_or_else(|| {
                tracing::warn!(id = %r.id, class = %r.class, "unknown feature class, using other_pole");
                FeatureClass::OtherPole
            });
            features.push(MapFeature {
                enu: geodetic_to_enu(&position, &origin)?,
                id: r.id,
                position,
                klass,
            });
        }
        Ok(MapSet::with_features(origin, features))
    }

    fn with_features(origin: GeodeticPoint, features: Vec<MapFeature>) -> Self {
        let index = GridIndex::build(features.iter().map(|f| f.enu), DEFAULT_MAX_FEATURE_DISTANCE_M);
        MapSet {
            origin,
            features,
            index,
        }
    }

    pub fn origin(&self) -> &GeodeticPoint {
        &self.origin
    }

    pub fn features(&self) -> &[MapFeature] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Features with `|enu - center| <= r`, by ascending distance then id.
    pub fn query_radius(&self, center: &EnuPoint2, r: f64) -> Vec<&MapFeature> {
        if r.is_nan() || r <= 0.0 {
            return Vec::new();
        }
        let mut hits: Vec<(f64, &MapFeature)> = self
            .index
            .candidates(center, r)
            .filter_map(|i| {
                let f = &self.features[i];
                let d = f.enu.distance(center);
                (d <= r).then_some((d, f))
            })
            .collect();
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
        hits.into_iter().map(|(_, f)| f).collect()
    }

    pub fn records(&self) -> Vec<MapRecord> {
        self.features
            .iter()
            .map(|f| MapRecord {
                id: f.id.clone(),
                lat: f.position.latitude,
                lon: f.position.longitude,
                class: f.klass.as_str().to_string(),
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_map_records(path, &self.records())
    }
}

pub fn parse_map_records(reader: impl BufRead, path: &Path) -> Result<Vec<MapRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MapRecord = serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        if GeodeticPoint::new(rec.lat, rec.lon).is_err() {
            return Err(Error::parse(
                path,
                i + 1,
                format!("invalid coordinates ({}, {})", rec.lat, rec.lon),
            ));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_map_records(path: &Path, records: &[MapRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_map(path: &Path, origin: OriginSpec) -> Result<MapSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let records = parse_map_records(BufReader::new(file), path)?;
    MapSet::from_records(records, origin)
}
