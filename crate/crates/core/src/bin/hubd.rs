//! Hub daemon: hosts simulated devices and streams to the supervisor.

use std::path::PathBuf;

use clap::Parser;
use dhub_core::hub::{run_hub, HubOptions};
use dhub_core::wire::HubConfiguration;
use dhub_core::SessionConfig;

#[derive(Debug, Parser)]
#[command(name = "hubd", version, about = "Data hub daemon")]
struct Args {
    #[arg(long, env = "DHUB_HUB_ID")]
    hub_id: String,
    /// Supervisor hub endpoint, `host:port`.
    #[arg(long, env = "DHUB_SUPERVISOR")]
    supervisor: String,
    /// Configuration applied before connecting: a hub configuration or a
    /// whole session configuration (this hub's streams are taken).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "info")]
    log_level: String,
    /// Added to this hub's clock, to emulate an unsynchronised host.
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    clock_offset_ns: i64,
    /// Send frames over the control connection instead of a second one.
    #[arg(long)]
    single_connection: bool,
}

fn load_config(path: &PathBuf, hub_id: &str) -> Result<HubConfiguration, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if let Ok(s) = serde_json::from_str::<SessionConfig>(&text) {
        return Ok(HubConfiguration {
            session_name: s.session_name.clone(),
            streams: s.streams_for_hub(hub_id).cloned().collect(),
            queue_capacity: s.queue_capacity,
            metrics_interval_ms: s.metrics_interval_ms,
            external_codecs: s.external_codecs.clone(),
        });
    }
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn main() {
    let args = Args::parse();
    dhub_core::init_tracing(&args.log_level);
    let mut opts = HubOptions::new(&args.hub_id, &args.supervisor);
    opts.clock_offset_ns = args.clock_offset_ns;
    opts.separate_data_connection = !args.single_connection;
    if let Some(p) = &args.config {
        match load_config(p, &args.hub_id) {
            Ok(c) => opts.initial_config = Some(c),
            Err(e) => {
                eprintln!("error: {e}");
                std::process::exit(2);
            }
        }
    }
    let hub = match run_hub(opts) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    };
    dhub_core::wait_for_interrupt();
    hub.shutdown();
}
