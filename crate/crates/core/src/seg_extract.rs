//! Pole-base points from semantic segmentation masks.
//!
//! Pole-like classes are merged into one binary mask, split into 4-connected
//! clusters, and each cluster's bottom row is checked against the merged
//! ground classes directly beneath it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotate::{make_box, Annotation, AnnotationParams, AnnotationSource, POLE_BASE_CLASS};
use crate::error::{Error, Result};
use crate::frames::Pixel;

pub const DEFAULT_MIN_WIDTH_PX: u32 = 3;

/// Per-pixel class ids with their name table.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    width: u32,
    height: u32,
    ids: Vec<u8>,
    classes: BTreeMap<String, u8>,
}

impl SegMask {
    pub fn new(width: u32, height: u32, ids: Vec<u8>, classes: BTreeMap<String, u8>) -> Result<Self> {
        if ids.len() != width as usize * height as usize {
            return Err(Error::InvalidParameter(format!(
                "{} class ids for a {width}x{height} mask",
                ids.len()
            )));
        }
        let known: BTreeSet<u8> = classes.values().copied().collect();
        if let Some(bad) = ids.iter().find(|id| !known.contains(id)) {
            return Err(Error::InvalidParameter(format!(
                "class id {bad} missing from the class table"
            )));
        }
        Ok(SegMask {
            width,
            height,
            ids,
            classes,
        })
    }

    /// Builds a mask from rows of class names; handy for fixtures.
    pub fn from_rows(rows: &[&[&str]]) -> Result<Self> {
        let height = rows.len() as u32;
        let width = rows.first().map_or(0, |r| r.len()) as u32;
        let mut classes = BTreeMap::new();
        let mut ids = Vec::with_capacity((width * height) as usize);
        for row in rows {
            if row.len() as u32 != width {
                return Err(Error::InvalidParameter("ragged mask rows".into()));
            }
            for name in *row {
                let next = classes.len() as u8;
                ids.push(*classes.entry((*name).to_string()).or_insert(next));
            }
        }
        SegMask::new(width, height, ids, classes)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn classes(&self) -> &BTreeMap<String, u8> {
        &self.classes
    }

    pub fn class_at(&self, x: u32, y: u32) -> u8 {
        self.ids[(y * self.width + x) as usize]
    }

    /// 8-bit single-channel PNG plus a JSON `{class_name: id}` table.
    pub fn load_png(image: &Path, class_table: &Path) -> Result<Self> {
        let classes = load_class_table(class_table)?;
        let img = image::open(image)
            .map_err(|source| Error::Image {
                path: image.to_path_buf(),
                source,
            })?
            .into_luma8();
        let (w, h) = img.dimensions();
        SegMask::new(w, h, img.into_raw(), classes)
    }

    /// Raw row-major bytes with declared dimensions.
    pub fn load_raw(path: &Path, width: u32, height: u32, class_table: &Path) -> Result<Self> {
        let classes = load_class_table(class_table)?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        SegMask::new(width, height, bytes, classes)
    }

    pub fn save_png(&self, image: &Path, class_table: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width, self.height, self.ids.clone()).expect("sizes checked");
        img.save(image).map_err(|source| Error::Image {
            path: image.to_path_buf(),
            source,
        })?;
        let text = serde_json::to_string_pretty(&self.classes)?;
        std::fs::write(class_table, text).map_err(|e| Error::io(class_table, e))
    }
}

pub fn load_class_table(path: &Path) -> Result<BTreeMap<String, u8>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMergeSpec {
    pub pole_classes: BTreeSet<String>,
    pub ground_classes: BTreeSet<String>,
}

impl Default for ClassMergeSpec {
    fn default() -> Self {
        ClassMergeSpec {
            pole_classes: ["pole", "traffic sign", "traffic light"].map(String::from).into(),
            ground_classes: ["road", "sidewalk", "terrain"].map(String::from).into(),
        }
    }
}

impl ClassMergeSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.pole_classes.intersection(&self.ground_classes).next() {
            return Err(Error::InvalidParameter(format!("class {c:?} is both pole and ground")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.data[(y * self.width + x) as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Pole and ground masks. Names of the spec missing from the mask's table are
/// logged and ignored.
pub fn merge_classes(mask: &SegMask, spec: &ClassMergeSpec) -> Result<(BinaryMask, BinaryMask)> {
    spec.validate()?;
    let lookup = |names: &BTreeSet<String>| -> [bool; 256] {
        let mut member = [false; 256];
        for n in names {
            match mask.classes.get(n) {
                Some(&id) => member[id as usize] = true,
                None => tracing::warn!(class = %n, "class not present in mask table"),
            }
        }
        member
    };
    let (pole_ids, ground_ids) = (lookup(&spec.pole_classes), lookup(&spec.ground_classes));
    let mut pole = BinaryMask::empty(mask.width, mask.height);
    let mut ground = BinaryMask::empty(mask.width, mask.height);
    for (i, &id) in mask.ids.iter().enumerate() {
        pole.data[i] = pole_ids[id as usize];
        ground.data[i] = ground_ids[id as usize];
    }
    Ok((pole, ground))
}

/// Horizontal run `x_start..=x_end` on row `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRun {
    pub y: u32,
    pub x_start: u32,
    pub x_end: u32,
}

impl PixelRun {
    pub fn width(&self) -> u32 {
        self.x_end - self.x_start + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelCluster {
    /// `(x, y)` members in raster order.
    pub pixels: Vec<(u32, u32)>,
    pub min_x: u32,
    pub max_x: u32,
    pub min_y: u32,
    pub max_y: u32,
    /// Widest run on the bottom row, leftmost on ties.
    pub bottom_run: PixelRun,
}

/// Maximal 4-connected components, ordered by their first pixel in raster order.
pub fn find_clusters(mask: &BinaryMask) -> Vec<PixelCluster> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; mask.data.len()];
    let mut clusters = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.data.len() {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w as usize) as u32, (i / w as usize) as u32);
            pixels.push((x, y));
            let mut visit = |nx: u32, ny: u32| {
                let j = (ny * w + nx) as usize;
                if mask.data[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < w {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < h {
                visit(x, y + 1);
            }
        }
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        clusters.push(cluster_from_pixels(pixels));
    }
    clusters
}

fn cluster_from_pixels(pixels: Vec<(u32, u32)>) -> PixelCluster {
    let min_x = pixels.iter().map(|p| p.0).min().expect("non-empty");
    let max_x = pixels.iter().map(|p| p.0).max().expect("non-empty");
    let min_y = pixels.first().expect("non-empty").1;
    let max_y = pixels.last().expect("non-empty").1;
    let mut best: Option<PixelRun> = None;
    let mut current: Option<PixelRun> = None;
    for &(x, _) in pixels.iter().filter(|p| p.1 == max_y) {
        current = match current {
            Some(r) if r.x_end + 1 == x => Some(PixelRun { x_end: x, ..r }),
            other => {
                if let Some(r) = other {
                    if best.is_none_or(|b| r.width() > b.width()) {
                        best = Some(r);
                    }
                }
                Some(PixelRun {
                    y: max_y,
                    x_start: x,
                    x_end: x,
                })
            }
        };
    }
    if let Some(r) = current {
        if best.is_none_or(|b| r.width() > b.width()) {
            best = Some(r);
        }
    }
    PixelCluster {
        pixels,
        min_x,
        max_x,
        min_y,
        max_y,
        bottom_run: best.expect("bottom row is non-empty"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    ImageEdge,
    OccludedBase,
    TooNarrow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseExtraction {
    Accepted(Pixel),
    Rejected(RejectReason),
}

/// Midpoint of the bottom run when at least half the pixels right below it are
/// ground and the run is at least `min_width_px` wide.
pub fn extract_pole_base(cluster: &PixelCluster, ground: &BinaryMask, min_width_px: u32) -> BaseExtraction {
    let run = cluster.bottom_run;
    if run.y + 1 >= ground.height {
        return BaseExtraction::Rejected(RejectReason::ImageEdge);
    }
    let below = (run.x_start..=run.x_end).filter(|&x| ground.get(x, run.y + 1)).count();
    if 2 * below < run.width() as usize {
        return BaseExtraction::Rejected(RejectReason::OccludedBase);
    }
    if run.width() < min_width_px {
        return BaseExtraction::Rejected(RejectReason::TooNarrow);
    }
    let u = f64::from(run.x_start + run.x_end) / 2.0;
    BaseExtraction::Accepted(Pixel::new(u, f64::from(run.y), 0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterOutcome {
    pub bottom_run: PixelRun,
    pub pixels: usize,
    pub result: BaseExtraction,
}

/// One annotation per accepted cluster, plus the outcome of every cluster.
pub fn mask_to_annotations(
    image_id: &str,
    mask: &SegMask,
    spec: &ClassMergeSpec,
    min_width_px: u32,
    params: &AnnotationParams,
) -> Result<(Vec<Annotation>, Vec<ClusterOutcome>)> {
    let (pole, ground) = merge_classes(mask, spec)?;
    let mut annotations = Vec::new();
    let mut outcomes = Vec::new();
    for c in find_clusters(&pole) {
        let result = extract_pole_base(&c, &ground, min_width_px);
        if let BaseExtraction::Accepted(px) = result {
            annotations.push(Annotation {
                image_id: image_id.to_string(),
                class: POLE_BASE_CLASS.to_string(),
                center: px,
                bbox: make_box(&px, params, mask.width, mask.height)?,
                source: AnnotationSource::Segmentation,
                feature_id: None,
            });
        }
        outcomes.push(ClusterOutcome {
            bottom_run: c.bottom_run,
            pixels: c.pixels.len(),
            result,
        });
    }
    Ok((annotations, outcomes))
}
