//! `dhub`: operator client for the supervisor API plus offline recording
//! tools.
//!
//! Exit codes: 0 success, 1 remote or API error, 2 usage error, 3
//! verification findings.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::record::{repair, Recording, RecordError, RecordedFrame};
use crate::types::{validate_session_config, Pose, SessionConfig, StreamKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_REMOTE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FINDINGS: i32 = 3;

pub const DEFAULT_API: &str = "http://127.0.0.1:8080";

#[derive(Debug, Parser)]
#[command(name = "dhub", version, about = "Operator client for the sensor acquisition supervisor")]
struct Cli {
    /// Supervisor API base URL.
    #[arg(long, global = true, env = "DHUB_API", default_value = DEFAULT_API)]
    api: String,
    /// Emit raw JSON, one document per line.
    #[arg(long, global = true)]
    json: bool,
    /// Recording root for `rec` commands.
    #[arg(long, global = true, env = "DHUB_STORAGE", default_value = ".")]
    storage: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// List connected hubs with state and clock estimates.
    Hubs,
    #[command(subcommand)]
    Session(SessionCmd),
    /// Follow the live event stream.
    Watch {
        /// Exit after this many metrics events.
        #[arg(long)]
        count: Option<u64>,
    },
    #[command(subcommand)]
    Rec(RecCmd),
}

#[derive(Debug, Subcommand)]
enum SessionCmd {
    /// Validate a configuration file and apply it.
    Apply {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
    },
    Start,
    Stop,
    Status,
}

#[derive(Debug, Subcommand)]
enum RecCmd {
    Ls,
    Info {
        name: String,
    },
    Verify {
        name: String,
        /// Salvage a partial or damaged recording before verifying.
        #[arg(long)]
        repair: bool,
        /// Skip regenerating simulated payloads.
        #[arg(long)]
        no_payloads: bool,
    },
    Export {
        name: String,
        #[arg(long)]
        stream: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Ctx<'a> {
    json: bool,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

#[derive(Debug)]
enum Failure {
    Remote(String),
    Usage(String),
    Findings(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Remote(_) => EXIT_REMOTE,
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Findings(_) => EXIT_FINDINGS,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_fail(e: std::io::Error) -> Failure {
    Failure::Remote(e.to_string())
}

/// Runs the client with explicit argv and output streams.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let mut ctx = Ctx { json: cli.json, out, err };
    let client = Client::new(&cli.api);
    let result = match cli.cmd {
        Command::Hubs => hubs(&mut ctx, &client),
        Command::Session(c) => session(&mut ctx, &client, c),
        Command::Watch { count } => watch(&mut ctx, &client, count),
        Command::Rec(c) => rec(&mut ctx, &cli.storage, c),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            match &f {
                Failure::Remote(m) | Failure::Usage(m) | Failure::Findings(m) => {
                    if !m.is_empty() {
                        let _ = writeln!(ctx.err, "error: {m}");
                    }
                }
            }
            f.code()
        }
    }
}

// ---- HTTP ----

struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    fn new(base: &str) -> Client {
        let agent = ureq::AgentBuilder::new().timeout_connect(Duration::from_secs(3)).build();
        Client { base: base.trim_end_matches('/').to_string(), agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn call(&self, method: &str, path: &str, body: Option<&str>) -> Result<String, Failure> {
        let req = self.agent.request(method, &self.url(path)).timeout(Duration::from_secs(60));
        let resp = match body {
            Some(b) => req.set("Content-Type", "application/json").send_string(b),
            None => req.call(),
        };
        match resp {
            Ok(r) => r.into_string().map_err(io_fail),
            Err(ureq::Error::Status(status, r)) => {
                let text = r.into_string().unwrap_or_default();
                Err(api_failure(status, &text))
            }
            Err(ureq::Error::Transport(t)) => Err(Failure::Remote(format!(
                "cannot reach supervisor at {}: {t}; is supd running? (set --api or DHUB_API)",
                self.base
            ))),
        }
    }

    fn get_json(&self, path: &str) -> Result<(String, Value), Failure> {
        let text = self.call("GET", path, None)?;
        let v = serde_json::from_str(&text).map_err(|e| Failure::Remote(format!("bad response from {path}: {e}")))?;
        Ok((text, v))
    }
}

fn api_failure(status: u16, text: &str) -> Failure {
    let v: Value = serde_json::from_str(text).unwrap_or(Value::Null);
    let code = v["error"].as_str().unwrap_or("HTTP_ERROR");
    let message = v["message"].as_str().map(str::to_string).unwrap_or_else(|| format!("HTTP {status}"));
    let mut m = if message.starts_with(code) { message } else { format!("{code}: {message}") };
    if let Some(vs) = v["violations"].as_array() {
        for x in vs {
            let _ = write!(m, "\n  {} {}: {}", x["code"].as_str().unwrap_or("?"), x["field"].as_str().unwrap_or(""), x["message"].as_str().unwrap_or(""));
        }
    }
    if status == 400 {
        Failure::Usage(m)
    } else {
        Failure::Remote(m)
    }
}

/// Prints a raw response body as one compact JSON line.
fn print_json(ctx: &mut Ctx, text: &str) -> CmdResult {
    let v: Value = serde_json::from_str(text).unwrap_or(Value::String(text.to_string()));
    writeln!(ctx.out, "{v}").map_err(io_fail)
}

fn emit_value<T: serde::Serialize>(ctx: &mut Ctx, v: &T) -> CmdResult {
    let s = serde_json::to_string(v).map_err(|e| Failure::Remote(e.to_string()))?;
    writeln!(ctx.out, "{s}").map_err(io_fail)
}

/// Wire name of a unit enum variant.
fn enum_name<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn ms(v: &Value) -> String {
    v.as_f64().map_or("-".to_string(), |x| format!("{:.3}", x / 1e6))
}

// ---- commands ----

fn hubs(ctx: &mut Ctx, c: &Client) -> CmdResult {
    let (text, v) = c.get_json("/api/hubs")?;
    if ctx.json {
        return print_json(ctx, &text);
    }
    let mut s = format!("{:<16} {:<10} {:<9} {:>10} {:>9} {:>9} STREAMS\n", "HUB", "STATE", "CONNECTED", "OFFSET_MS", "RTT_MS", "DISP_MS");
    for h in v.as_array().into_iter().flatten() {
        let streams: Vec<String> =
            h["adapters"].as_array().into_iter().flatten().map(|a| a["stream_id"].to_string()).collect();
        let _ = writeln!(
            s,
            "{:<16} {:<10} {:<9} {:>10} {:>9} {:>9} {}",
            h["hub_id"].as_str().unwrap_or("?"),
            h["state"].as_str().unwrap_or("?"),
            if h["connected"].as_bool().unwrap_or(false) { "yes" } else { "no" },
            ms(&h["clock_offset_ns"]),
            ms(&h["clock_rtt_ns"]),
            ms(&h["clock_dispersion_ns"]),
            streams.join(",")
        );
    }
    ctx.out.write_all(s.as_bytes()).map_err(io_fail)
}

fn print_session(ctx: &mut Ctx, text: &str) -> CmdResult {
    if ctx.json {
        return print_json(ctx, text);
    }
    let v: Value = serde_json::from_str(text).unwrap_or(Value::Null);
    let mut s = format!("session {}", v["state"].as_str().unwrap_or("?"));
    if let Some(n) = v["config"]["session_name"].as_str() {
        let _ = write!(s, "  name={n}");
    }
    if let Some(r) = v["recording"].as_str() {
        let _ = write!(s, "  recording={r}");
    }
    if v["degraded"].as_bool() == Some(true) {
        s.push_str("  DEGRADED");
    }
    if let Some(e) = v["error"].as_str() {
        let _ = write!(s, "  error={e}");
    }
    s.push('\n');
    if let Some(m) = v["hubs_ready"].as_object() {
        for (h, r) in m {
            let _ = writeln!(s, "  hub {h}: {}", if r.as_bool() == Some(true) { "ready" } else { "not ready" });
        }
    }
    ctx.out.write_all(s.as_bytes()).map_err(io_fail)
}

fn session(ctx: &mut Ctx, c: &Client, cmd: SessionCmd) -> CmdResult {
    let text = match cmd {
        SessionCmd::Apply { file } => {
            let body = std::fs::read_to_string(&file)
                .map_err(|e| Failure::Usage(format!("{}: {e}", file.display())))?;
            let cfg: SessionConfig = serde_json::from_str(&body)
                .map_err(|e| Failure::Usage(format!("{}: not a session configuration: {e}", file.display())))?;
            if let Err(vs) = validate_session_config(&cfg) {
                let mut m = format!("{}: invalid configuration", file.display());
                for v in vs {
                    let _ = write!(m, "\n  {} {}: {}", v.code, v.field, v.message);
                }
                return Err(Failure::Usage(m));
            }
            c.call("PUT", "/api/session", Some(&body))?
        }
        SessionCmd::Start => c.call("POST", "/api/session/start", Some(""))?,
        SessionCmd::Stop => c.call("POST", "/api/session/stop", Some(""))?,
        SessionCmd::Status => c.call("GET", "/api/session", None)?,
    };
    print_session(ctx, &text)
}

fn render_metrics(v: &Value) -> String {
    let mut s = format!(
        "session {}  unknown={} discarded={}\n{:>6} {:<12} {:>8} {:>8} {:>8} {:>9} {:>9}\n",
        v["session_state"].as_str().unwrap_or("?"),
        v["unknown_frames"],
        v["discarded_frames"],
        "STREAM",
        "HUB",
        "FPS",
        "DROPS",
        "QUEUE",
        "MB/S",
        "RECORDED"
    );
    for st in v["streams"].as_array().into_iter().flatten() {
        let _ = writeln!(
            s,
            "{:>6} {:<12} {:>8.1} {:>8} {:>8} {:>9.2} {:>9}",
            st["stream_id"],
            st["hub_id"].as_str().unwrap_or("?"),
            st["fps_1s"].as_f64().unwrap_or(0.0),
            st["dropped"],
            st["queue_depth"],
            st["mb_per_s"].as_f64().unwrap_or(0.0),
            st["recorded_frames"],
        );
    }
    s
}

fn watch(ctx: &mut Ctx, c: &Client, count: Option<u64>) -> CmdResult {
    let resp = c
        .agent
        .get(&c.url("/api/events"))
        .call()
        .map_err(|e| match e {
            ureq::Error::Status(status, r) => api_failure(status, &r.into_string().unwrap_or_default()),
            ureq::Error::Transport(t) => Failure::Remote(format!(
                "cannot reach supervisor at {}: {t}; is supd running? (set --api or DHUB_API)",
                c.base
            )),
        })?;
    let reader = BufReader::new(resp.into_reader());
    let mut seen = 0u64;
    for line in reader.lines() {
        let line = line.map_err(io_fail)?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let ty = v["type"].as_str().unwrap_or("");
        if ctx.json {
            writeln!(ctx.out, "{v}").map_err(io_fail)?;
        } else {
            let text = match ty {
                "metrics" => render_metrics(&v),
                "session_state" => format!("== session {}\n", v["state"].as_str().unwrap_or("?")),
                "hub_state" => format!(
                    "== hub {} {} {}\n",
                    v["hub"]["hub_id"].as_str().unwrap_or("?"),
                    v["hub"]["state"].as_str().unwrap_or("?"),
                    if v["hub"]["connected"].as_bool() == Some(true) { "connected" } else { "disconnected" }
                ),
                "warning" => format!("!! {}\n", v["message"].as_str().unwrap_or("")),
                _ => String::new(),
            };
            ctx.out.write_all(text.as_bytes()).map_err(io_fail)?;
        }
        ctx.out.flush().map_err(io_fail)?;
        if ty == "metrics" {
            seen += 1;
            if count.is_some_and(|n| seen >= n) {
                break;
            }
        }
    }
    Ok(())
}

// ---- offline recording tools ----

fn resolve(storage: &Path, name: &str) -> PathBuf {
    let direct = PathBuf::from(name);
    if direct.is_dir() && (direct.is_absolute() || !storage.join(name).is_dir()) {
        direct
    } else {
        storage.join(name)
    }
}

fn open(storage: &Path, name: &str) -> Result<Recording, Failure> {
    Recording::open(&resolve(storage, name)).map_err(|e| match e {
        RecordError::Partial(_) => {
            Failure::Remote(format!("{name}: recording is partial (not finalized); run `dhub rec verify {name} --repair`"))
        }
        RecordError::NotFound(_) => Failure::Remote(format!("{name}: no such recording under {}", storage.display())),
        e => Failure::Remote(format!("{name}: {e}")),
    })
}

fn rec(ctx: &mut Ctx, storage: &Path, cmd: RecCmd) -> CmdResult {
    match cmd {
        RecCmd::Ls => {
            let list = crate::record::list_recordings(storage);
            if ctx.json {
                return emit_value(ctx, &list);
            }
            let mut s = format!("{:<28} {:<9} {:>7} {:>10} {:>14}\n", "NAME", "STATE", "STREAMS", "FRAMES", "BYTES");
            for r in list {
                let _ = writeln!(
                    s,
                    "{:<28} {:<9} {:>7} {:>10} {:>14}",
                    r.name,
                    if r.complete { "complete" } else { "partial" },
                    r.streams,
                    r.frames,
                    r.bytes
                );
            }
            ctx.out.write_all(s.as_bytes()).map_err(io_fail)
        }
        RecCmd::Info { name } => {
            let r = open(storage, &name)?;
            let m = r.manifest();
            if ctx.json {
                return emit_value(ctx, m);
            }
            let mut s = format!("recording {name}  session={}", m.session_name);
            if m.degraded {
                s.push_str("  DEGRADED");
            }
            if m.repaired {
                s.push_str("  REPAIRED");
            }
            let _ = writeln!(
                s,
                "\n{:>6} {:<12} {:<12} {:>5} {:>8} {:>10} {:>9} {:>14} {:>6}",
                "STREAM", "KIND", "HUB", "CODEC", "FRAMES", "DURATION_S", "MEAN_FPS", "BYTES", "DROPS"
            );
            for st in &m.streams {
                let d = &st.setup.descriptor;
                let _ = writeln!(
                    s,
                    "{:>6} {:<12} {:<12} {:>5} {:>8} {:>10.3} {:>9.2} {:>14} {:>6}",
                    d.stream_id,
                    enum_name(&d.kind),
                    d.source_hub,
                    st.setup.codec_id,
                    st.frame_count,
                    st.duration_s(),
                    st.mean_fps(),
                    st.byte_count,
                    st.drop_count
                );
            }
            for (hub, c) in &m.clock_estimates {
                let _ = writeln!(
                    s,
                    "clock {hub}: offset {:.3} ms, rtt {:.3} ms, dispersion {:.3} ms",
                    c.offset_ns as f64 / 1e6,
                    c.rtt_ns as f64 / 1e6,
                    c.dispersion_ns as f64 / 1e6
                );
            }
            let _ = writeln!(s, "total {} bytes", m.total_bytes());
            ctx.out.write_all(s.as_bytes()).map_err(io_fail)
        }
        RecCmd::Verify { name, repair: do_repair, no_payloads } => {
            let root = resolve(storage, &name);
            if !root.is_dir() {
                return Err(Failure::Remote(format!("{name}: no such recording under {}", storage.display())));
            }
            if do_repair {
                let (rep, _) = repair(&root).map_err(|e| Failure::Remote(format!("repair failed: {e}")))?;
                if ctx.json {
                    emit_value(ctx, &rep)?;
                } else {
                    let _ = writeln!(
                        ctx.out,
                        "repaired: kept {} frames, truncated {} bytes, set aside {} chunk(s)",
                        rep.recovered.values().sum::<u64>(),
                        rep.truncated_bytes,
                        rep.orphaned_chunks.len()
                    );
                }
            }
            let report = crate::record::verify_with(&root, crate::record::VerifyOptions { payloads: !no_payloads });
            if ctx.json {
                emit_value(ctx, &report)?;
            } else {
                let mut s = String::new();
                for c in &report.streams {
                    let _ = writeln!(
                        s,
                        "stream {}: {} records, {} crc failures, {} seq gaps ({} dropped at hub), {} payloads checked",
                        c.stream_id, c.records, c.crc_failures, c.seq_gaps, c.drop_count, c.payloads_checked
                    );
                }
                for f in &report.findings {
                    s.push_str(&enum_name(&f.kind));
                    if let Some(ch) = &f.chunk {
                        let _ = write!(s, " {ch}");
                    }
                    if let Some(o) = f.offset {
                        let _ = write!(s, " @{o}");
                    }
                    let _ = writeln!(s, ": {}", f.message);
                }
                if report.is_clean() {
                    s.push_str("OK\n");
                }
                ctx.out.write_all(s.as_bytes()).map_err(io_fail)?;
            }
            if report.is_clean() {
                Ok(())
            } else if report.partial && !do_repair {
                Err(Failure::Findings(format!("{name}: recording is partial; rerun with --repair to salvage it")))
            } else {
                Err(Failure::Findings(String::new()))
            }
        }
        RecCmd::Export { name, stream, out } => {
            let r = open(storage, &name)?;
            export(ctx, &r, stream, &out)
        }
    }
}

#[derive(serde::Serialize)]
struct ExportSummary {
    stream_id: u32,
    frames: u64,
    out: PathBuf,
    index: PathBuf,
}

fn export(ctx: &mut Ctx, r: &Recording, stream_id: u32, out: &Path) -> CmdResult {
    let m = r.manifest();
    let st = m.stream(stream_id).ok_or_else(|| Failure::Usage(format!("no stream {stream_id} in recording")))?;
    let kind = st.setup.descriptor.kind;
    let mk = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Failure::Remote(format!("{}: {e}", p.display())));
    let dir = out.join(format!("stream-{stream_id}"));
    mk(&dir)?;
    let wfail = |p: &Path, e: std::io::Error| Failure::Remote(format!("{}: {e}", p.display()));
    let rfail = |e: RecordError| Failure::Remote(e.to_string());

    let mut files: std::collections::HashMap<u64, String> = std::collections::HashMap::new();
    let mut n = 0u64;
    if kind == StreamKind::Pose {
        let path = dir.join("poses.csv");
        let f = std::fs::File::create(&path).map_err(|e| wfail(&path, e))?;
        let mut w = std::io::BufWriter::new(f);
        writeln!(w, "seq,session_ts_ns,px,py,pz,qw,qx,qy,qz").map_err(|e| wfail(&path, e))?;
        for fr in r.frames(stream_id).map_err(rfail)? {
            let fr: RecordedFrame = fr.map_err(rfail)?;
            let p = Pose::from_bytes(&fr.payload)
                .ok_or_else(|| Failure::Remote(format!("seq {}: malformed pose payload", fr.seq)))?;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                fr.seq, fr.session_ts_ns, p.position[0], p.position[1], p.position[2], p.orientation[0],
                p.orientation[1], p.orientation[2], p.orientation[3]
            )
            .map_err(|e| wfail(&path, e))?;
            files.insert(fr.seq, format!("stream-{stream_id}/poses.csv"));
            n += 1;
        }
        w.flush().map_err(|e| wfail(&path, e))?;
    } else {
        for fr in r.frames(stream_id).map_err(rfail)? {
            let fr: RecordedFrame = fr.map_err(rfail)?;
            let file = format!("{:08}.bin", fr.seq);
            let path = dir.join(&file);
            std::fs::write(&path, &fr.payload).map_err(|e| wfail(&path, e))?;
            files.insert(fr.seq, format!("stream-{stream_id}/{file}"));
            n += 1;
        }
    }

    // index of every frame of every stream; `file` is set for the exported one
    let index = out.join("index.csv");
    let f = std::fs::File::create(&index).map_err(|e| wfail(&index, e))?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "stream_id,seq,capture_ts_ns,session_ts_ns,codec_id,file").map_err(|e| wfail(&index, e))?;
    for s in &m.streams {
        let id = s.stream_id();
        for e in r.index(id).map_err(rfail)?.iter() {
            let fr = r.read_meta(id, e).map_err(rfail)?;
            let file = if id == stream_id { files.get(&fr.seq).map(String::as_str).unwrap_or("") } else { "" };
            writeln!(w, "{},{},{},{},{},{}", id, fr.seq, fr.capture_ts_ns, fr.session_ts_ns, fr.codec_id, file)
                .map_err(|e| wfail(&index, e))?;
        }
    }
    w.flush().map_err(|e| wfail(&index, e))?;

    if ctx.json {
        emit_value(ctx, &ExportSummary { stream_id, frames: n, out: dir, index })
    } else {
        writeln!(ctx.out, "exported {n} frames of stream {stream_id} to {}; index {}", dir.display(), index.display())
            .map_err(io_fail)
    }
}

/// Entry point used by the `dhub` binary.
pub fn main() -> i32 {
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    run(std::env::args_os(), &mut out, &mut err)
}
