//! HTTP front ends for the mock storage sites and the tracker, and blocking
//! clients that speak to them.

mod adapters;
mod sitehost;
mod tracker;

use std::net::SocketAddr;

use axum::Router;

pub use adapters::{HttpTracker, HttpWiki};
pub use sitehost::{sitehost_router, AdminState, PopulationRequest, SiteErrorBody, TickRequest};
pub use tracker::{tracker_router, AdvanceRequest, TrackerState};

/// A server running on its own runtime in a background thread.
pub struct Background {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Background {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for Background {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `bind` and serves `router` until the returned handle is dropped.
pub fn spawn(router: Router, bind: &str) -> std::io::Result<Background> {
    let listener = std::net::TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            let _ = axum::serve(listener, router)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(Background { addr, shutdown: Some(tx), thread: Some(thread) })
}

/// Serves `router` on the current thread until the process exits.
/// `on_bound` receives the bound address before the first request is accepted.
pub fn serve_forever(router: Router, bind: &str, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        on_bound(listener.local_addr()?);
        axum::serve(listener, router).await
    })
}
