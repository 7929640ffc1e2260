//! The `review-serve` command.

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use anyhow::{bail, Result};
use mapanno_review::{Dataset, ReviewStore};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewConfig {
    pub dataset: Option<PathBuf>,
    pub images: Option<PathBuf>,
    /// Static files of the review client.
    pub ui: Option<PathBuf>,
    /// Decision log; defaults to a file inside the dataset.
    pub log: Option<PathBuf>,
    pub bind: IpAddr,
    pub port: u16,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        ReviewConfig {
            dataset: None,
            images: None,
            ui: None,
            log: None,
            bind: IpAddr::from([127, 0, 0, 1]),
            port: 8080,
        }
    }
}

pub fn open_store(cfg: &ReviewConfig) -> Result<ReviewStore> {
    let Some(dataset) = &cfg.dataset else {
        bail!("review-serve needs a dataset directory");
    };
    let ds = Dataset::open(dataset, cfg.images.as_deref())?;
    Ok(ReviewStore::open(ds, cfg.log.clone())?)
}

pub fn run(cfg: &ReviewConfig) -> Result<()> {
    let store = open_store(cfg)?;
    mapanno_review::run(SocketAddr::new(cfg.bind, cfg.port), store, cfg.ui.clone())?;
    Ok(())
}
