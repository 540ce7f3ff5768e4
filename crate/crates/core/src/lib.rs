//! Multimodal sensor acquisition middleware.
//!
//! Hub daemons ([`hub`]) host device adapters ([`simdev`]), compress frames
//! ([`codec`]) and publish them over a small binary protocol ([`wire`]) to a
//! supervisor ([`supervisor`]) that synchronises hub clocks ([`clocksync`]),
//! drives the session lifecycle and records every stream to disk
//! ([`record`]).

pub mod cli;
pub mod clock;
pub mod clocksync;
pub mod codec;
pub mod hub;
pub mod record;
pub mod simdev;
pub mod supervisor;
pub mod types;
pub mod wire;

pub use types::*;

/// Installs a stderr log subscriber; `RUST_LOG` overrides `level`.
pub fn init_tracing(level: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

/// Blocks until SIGINT or SIGTERM.
pub fn wait_for_interrupt() {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("signal runtime");
    rt.block_on(async {
        #[cfg(unix)]
        {
            let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).expect("SIGTERM handler");
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
        }
        #[cfg(not(unix))]
        let _ = tokio::signal::ctrl_c().await;
    });
}
