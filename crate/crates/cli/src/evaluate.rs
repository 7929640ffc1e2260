//! The `evaluate` command.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use mapanno_core::evaluate::{evaluate, load_eval_dirs, write_pr_csv, EvalConfig, EvalReport};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub gt: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub image_width: u32,
    pub image_height: u32,
    /// Report destination; standard output when unset.
    pub report: Option<PathBuf>,
    pub pr_csv: Option<PathBuf>,
    #[serde(flatten)]
    pub eval: EvalConfig,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            gt: None,
            pred: None,
            image_width: 1280,
            image_height: 720,
            report: None,
            pr_csv: None,
            eval: EvalConfig::default(),
        }
    }
}

pub fn run(cfg: &EvaluateConfig) -> Result<EvalReport> {
    let (Some(gt), Some(pred)) = (&cfg.gt, &cfg.pred) else {
        bail!("evaluate needs gt and pred directories");
    };
    if !gt.is_dir() {
        bail!("ground-truth directory {} does not exist", gt.display());
    }
    if !(0.0..=1.0).contains(&cfg.eval.conf_threshold)
        || !(cfg.eval.iou_threshold > 0.0 && cfg.eval.iou_threshold <= 1.0)
    {
        bail!("thresholds must lie in [0, 1]");
    }
    let images = load_eval_dirs(gt, pred, cfg.image_width, cfg.image_height)?;
    let report = evaluate(&images, &cfg.eval);
    let json = serde_json::to_string_pretty(&report)?;
    match &cfg.report {
        Some(p) => std::fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    if let Some(p) = &cfg.pr_csv {
        write_pr_csv(p, &report.pr_curve)?;
    }
    Ok(report)
}
