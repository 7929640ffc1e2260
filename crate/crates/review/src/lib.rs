//! Human review of generated annotations over HTTP.
//!
//! Decisions (accept, reject, adjust) go to an append-only JSON Lines log next
//! to the dataset and are synced to disk before they are acknowledged, so the
//! review state is always a replay of that log.

pub mod http;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

pub use store::{
    Dataset, ExportOptions, FrameState, LogEntry, ReviewDecision, ReviewError, ReviewState, ReviewStore, Verdict,
};

/// Blocks serving `store` on `addr` until ctrl-c.
pub fn run(addr: SocketAddr, store: ReviewStore, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        tracing::info!(addr = %listener.local_addr()?, "review service listening");
        let app = http::router(Arc::new(store), ui_dir);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}
