//! The `overlay` command: annotations drawn over their camera frames.
//!
//! Green: kept, base height from the lidar. Red: kept on the flat-ground
//! fallback. Black: rejected as occluded, drawn at its projected base.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use mapanno_core::annotate::{
    read_audit, read_labels, AuditRecord, Decision, HeightSource, NormBox, AUDIT_DIR, LABELS_DIR,
};
use mapanno_core::par::{self, Execution};
use serde::{Deserialize, Serialize};

use crate::annotate::IMAGE_EXTENSIONS;

pub const GREEN: Rgb<u8> = Rgb([0, 255, 0]);
pub const RED: Rgb<u8> = Rgb([255, 0, 0]);
pub const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const ARM_PX: f32 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlayConfig {
    pub images: Option<PathBuf>,
    /// Output of `annotate` (or any directory with `labels/` and `audit/`).
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub draw_boxes: bool,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        OverlayConfig {
            images: None,
            dataset: None,
            out: None,
            draw_boxes: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marker {
    pub x: f64,
    pub y: f64,
    pub color: Rgb<u8>,
    pub bbox: Option<NormBox>,
}

/// Markers for one frame: one per label line, plus one per occluded feature.
pub fn markers(labels: &[(u32, NormBox)], audit: &[AuditRecord], width: u32, height: u32) -> Vec<Marker> {
    let (w, h) = (f64::from(width), f64::from(height));
    let mut out: Vec<Marker> = labels
        .iter()
        .enumerate()
        .map(|(i, (_, b))| {
            let flat = audit
                .iter()
                .any(|r| r.annotation_index == Some(i) && r.height_source == HeightSource::Flat);
            Marker {
                x: b.cx * w,
                y: b.cy * h,
                color: if flat { RED } else { GREEN },
                bbox: Some(*b),
            }
        })
        .collect();
    for r in audit.iter().filter(|r| r.decision == Decision::Occluded) {
        if let Some([u, v]) = r.refined_pixel {
            out.push(Marker {
                x: u,
                y: v,
                color: BLACK,
                bbox: None,
            });
        }
    }
    out
}

pub fn draw(img: &mut RgbImage, markers: &[Marker], boxes: bool) {
    let (w, h) = (f64::from(img.width()), f64::from(img.height()));
    for m in markers {
        let (x, y) = (m.x as f32, m.y as f32);
        draw_line_segment_mut(img, (x - ARM_PX, y), (x + ARM_PX, y), m.color);
        draw_line_segment_mut(img, (x, y - ARM_PX), (x, y + ARM_PX), m.color);
        if let (true, Some(b)) = (boxes, m.bbox) {
            let [x0, y0, x1, y1] = b.corners();
            let (px, py) = ((x0 * w).round() as i32, (y0 * h).round() as i32);
            let pw = ((x1 - x0) * w).round().max(1.0) as u32;
            let ph = ((y1 - y0) * h).round().max(1.0) as u32;
            draw_hollow_rect_mut(img, Rect::at(px, py).of_size(pw, ph), m.color);
        }
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OverlaySummary {
    pub drawn: usize,
    pub copied: usize,
    pub skipped: Vec<String>,
}

fn overlay_one(path: &Path, dataset: &Path, out: &Path, boxes: bool) -> std::result::Result<bool, String> {
    let stem = path.file_stem().and_then(|s| s.to_str()).ok_or("bad file name")?;
    let name = path.file_name().expect("listed file");
    let labels_path = dataset.join(LABELS_DIR).join(format!("{stem}.txt"));
    let audit_path = dataset.join(AUDIT_DIR).join(format!("{stem}.jsonl"));
    let labels = if labels_path.exists() {
        read_labels(&labels_path).map_err(|e| e.to_string())?
    } else {
        Vec::new()
    };
    let audit = if audit_path.exists() {
        read_audit(&audit_path).map_err(|e| e.to_string())?
    } else {
        Vec::new()
    };
    let img = image::open(path).map_err(|e| format!("unreadable image: {e}"))?;
    let m = markers(&labels, &audit, img.width(), img.height());
    if m.is_empty() {
        std::fs::copy(path, out.join(name)).map_err(|e| e.to_string())?;
        return Ok(false);
    }
    let mut rgb = img.to_rgb8();
    draw(&mut rgb, &m, boxes);
    rgb.save(out.join(name)).map_err(|e| e.to_string())?;
    Ok(true)
}

pub fn run(cfg: &OverlayConfig, exec: Execution) -> Result<OverlaySummary> {
    let (Some(images), Some(dataset), Some(out)) = (&cfg.images, &cfg.dataset, &cfg.out) else {
        bail!("overlay needs images, dataset and out");
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let files = image_files(images)?;
    let results = par::map(exec, &files, |p| overlay_one(p, dataset, out, cfg.draw_boxes));
    let mut summary = OverlaySummary::default();
    for (p, r) in files.iter().zip(results) {
        match r {
            Ok(true) => summary.drawn += 1,
            Ok(false) => summary.copied += 1,
            Err(reason) => {
                tracing::warn!(image = %p.display(), %reason, "skipping image");
                summary.skipped.push(p.display().to_string());
            }
        }
    }
    Ok(summary)
}
