//! The `extract-seg` command: pole-base annotations from semantic masks.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mapanno_core::annotate::{export_dataset, AnnotationParams, FrameResult, Manifest, SkippedFrame};
use mapanno_core::par::{self, Execution};
use mapanno_core::seg_extract::{
    load_class_table, mask_to_annotations, ClassMergeSpec, ClusterOutcome, SegMask, DEFAULT_MIN_WIDTH_PX,
};
use serde::{Deserialize, Serialize};

pub const CLUSTERS_DIR: &str = "clusters";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSegConfig {
    /// Directory of single-channel PNG masks, one per image.
    pub masks: Option<PathBuf>,
    /// JSON object mapping class names to mask values.
    pub classes: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub min_width_px: u32,
    pub box_width_px: f64,
    pub box_height_px: f64,
    pub merge: ClassMergeSpec,
}

impl Default for ExtractSegConfig {
    fn default() -> Self {
        let p = AnnotationParams::new(1.0);
        ExtractSegConfig {
            masks: None,
            classes: None,
            out: None,
            min_width_px: DEFAULT_MIN_WIDTH_PX,
            box_width_px: p.box_width_px,
            box_height_px: p.box_height_px,
            merge: ClassMergeSpec::default(),
        }
    }
}

fn mask_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn run(cfg: &ExtractSegConfig, exec: Execution) -> Result<Manifest> {
    let (Some(masks), Some(classes), Some(out)) = (&cfg.masks, &cfg.classes, &cfg.out) else {
        bail!("extract-seg needs masks, classes and out");
    };
    cfg.merge.validate()?;
    let mut params = AnnotationParams::new(1.0);
    params.box_width_px = cfg.box_width_px;
    params.box_height_px = cfg.box_height_px;
    params.validate()?;
    // fail early on a bad class table rather than once per mask
    load_class_table(classes)?;

    let files = mask_files(masks)?;
    let results = par::map(
        exec,
        &files,
        |(id, path)| -> std::result::Result<(FrameResult, Vec<ClusterOutcome>), String> {
            let mask = SegMask::load_png(path, classes).map_err(|e| e.to_string())?;
            let (annotations, outcomes) =
                mask_to_annotations(id, &mask, &cfg.merge, cfg.min_width_px, &params).map_err(|e| e.to_string())?;
            let frame = FrameResult {
                image_id: id.clone(),
                image_width: mask.width(),
                image_height: mask.height(),
                annotations,
                audit: Vec::new(),
            };
            Ok((frame, outcomes))
        },
    );

    let clusters_dir = out.join(CLUSTERS_DIR);
    std::fs::create_dir_all(&clusters_dir).with_context(|| format!("creating {}", clusters_dir.display()))?;
    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    for ((id, _), r) in files.iter().zip(results) {
        match r {
            Ok((frame, outcomes)) => {
                let p = clusters_dir.join(format!("{id}.json"));
                std::fs::write(&p, serde_json::to_string_pretty(&outcomes)?)
                    .with_context(|| format!("writing {}", p.display()))?;
                frames.push(frame);
            }
            Err(reason) => {
                tracing::warn!(image_id = %id, %reason, "skipping mask");
                skipped.push(SkippedFrame {
                    image_id: id.clone(),
                    reason,
                });
            }
        }
    }
    Ok(export_dataset(&frames, &skipped, out)?)
}
