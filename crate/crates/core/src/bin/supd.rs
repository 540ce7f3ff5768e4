//! Supervisor daemon: hub registry, session control, recorder and HTTP API.

use std::path::PathBuf;
use std::time::Duration;

use clap::Parser;
use dhub_core::supervisor::{Supervisor, SupervisorOptions};

#[derive(Debug, Parser)]
#[command(name = "supd", version, about = "Supervisor daemon")]
struct Args {
    /// Endpoint hubs connect to.
    #[arg(long, default_value = "0.0.0.0:7401")]
    listen: String,
    /// HTTP API endpoint.
    #[arg(long, default_value = "127.0.0.1:8080")]
    api: String,
    /// Recording root; relative `storage_dir` values resolve against it.
    #[arg(long, default_value = "recordings")]
    storage: PathBuf,
    /// Built dashboard assets served at `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    /// How long in-flight frames are drained after STOP.
    #[arg(long, default_value_t = 2000)]
    drain_grace_ms: u64,
    #[arg(long, default_value = "info")]
    log_level: String,
}

fn main() {
    let args = Args::parse();
    dhub_core::init_tracing(&args.log_level);
    let mut opts = SupervisorOptions::new(&args.storage);
    opts.listen = args.listen;
    opts.api = Some(args.api);
    opts.ui_dir = args.ui_dir;
    opts.drain_grace = Duration::from_millis(args.drain_grace_ms);
    let sup = match Supervisor::start(opts) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    };
    tracing::info!(
        "hubs on {}, api on http://{}",
        sup.hub_addr(),
        sup.api_addr().map(|a| a.to_string()).unwrap_or_default()
    );
    sup.run_until_interrupted();
}
