use std::io::{Read, Write};
use std::process::{Command, Stdio};

use super::CodecError;

/// A codec backed by two executables: each reads one payload on stdin and
/// writes the transformed payload to stdout, exiting 0 on success.
#[derive(Debug, Clone)]
pub struct ExternalCodec {
    pub(crate) encoder: Vec<String>,
    pub(crate) decoder: Vec<String>,
    pub(crate) lossy: bool,
}

impl ExternalCodec {
    pub fn new(encoder: Vec<String>, decoder: Vec<String>, lossy: bool) -> Self {
        ExternalCodec { encoder, decoder, lossy }
    }

    pub fn encode(&self, payload: &[u8]) -> Result<Vec<u8>, CodecError> {
        run(&self.encoder, payload).map_err(CodecError::EncodeFailed)
    }

    pub fn decode(&self, payload: &[u8]) -> Result<Vec<u8>, CodecError> {
        run(&self.decoder, payload).map_err(CodecError::DecodeFailed)
    }
}

fn run(argv: &[String], input: &[u8]) -> Result<Vec<u8>, String> {
    let (program, args) = argv.split_first().ok_or_else(|| "empty command".to_string())?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| format!("{program}: {e}"))?;

    let mut stdin = child.stdin.take().expect("piped stdin");
    let mut stdout = child.stdout.take().expect("piped stdout");
    let mut stderr = child.stderr.take().expect("piped stderr");
    // stdin is fed from a scoped thread so a codec that streams its output
    // while still reading cannot deadlock against us.
    let (out, err) = std::thread::scope(|scope| {
        let writer = scope.spawn(move || {
            let res = stdin.write_all(input);
            drop(stdin);
            res
        });
        let err_reader = scope.spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf);
            buf
        });
        let mut out = Vec::new();
        let read = stdout.read_to_end(&mut out);
        let _ = writer.join();
        (read.map(|_| out), err_reader.join().unwrap_or_default())
    });
    let status = child.wait().map_err(|e| e.to_string())?;
    let stderr_text = String::from_utf8_lossy(&err).trim().to_string();
    if !status.success() {
        return Err(format!("{program} exited with {status}: {stderr_text}"));
    }
    out.map_err(|e| format!("{program}: {e}"))
}
