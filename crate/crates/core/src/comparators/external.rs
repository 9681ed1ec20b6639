//! Comparator backed by a child process speaking newline-delimited JSON
//! over stdin/stdout.
//!
//! ```text
//! -> {"type":"hello","version":1}
//! <- {"type":"ready","name":"..."}
//! -> {"type":"compare","id":0,"a":"/x/a.wav","b":"/x/b.wav"}
//! <- {"type":"result","id":0,"score":0.73,"mos_a":3.9,"mos_b":null}
//! -> {"type":"bye"}
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ComparisonResult, Comparator};
use crate::audio::{write_wav, ClipRef};
use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
const PROTOCOL_VERSION: u32 = 1;

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Request<'a> {
    Hello { version: u32 },
    Compare { id: u64, a: &'a str, b: &'a str },
    Bye,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Response {
    Ready {
        name: String,
    },
    Result {
        id: u64,
        score: f64,
        #[serde(default)]
        mos_a: Option<f64>,
        #[serde(default)]
        mos_b: Option<f64>,
    },
    Error {
        #[serde(default)]
        id: Option<u64>,
        #[serde(default)]
        message: Option<String>,
    },
}

struct Session {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    stderr: Arc<Mutex<String>>,
    next_id: u64,
    scratch: Option<tempfile::TempDir>,
}

/// A running endpoint process. Requests are serialized through a mutex, so
/// one endpoint handles one comparison at a time.
pub struct ExternalEndpoint {
    session: Mutex<Session>,
    endpoint_name: String,
    timeout: Duration,
}

impl ExternalEndpoint {
    /// Starts `program args...` and completes the handshake.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Endpoint(format!("cannot start '{program}': {e}")))?;

        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });

        let stderr = Arc::new(Mutex::new(String::new()));
        let mut err_pipe = child.stderr.take().expect("piped stderr");
        let sink = stderr.clone();
        thread::spawn(move || {
            let mut buf = [0u8; 4096];
            while let Ok(n) = err_pipe.read(&mut buf) {
                if n == 0 {
                    break;
                }
                sink.lock()
                    .expect("stderr buffer poisoned")
                    .push_str(&String::from_utf8_lossy(&buf[..n]));
            }
        });

        let stdin = child.stdin.take();
        let mut session = Session {
            child,
            stdin,
            lines,
            stderr,
            next_id: 0,
            scratch: None,
        };
        session.send(&Request::Hello {
            version: PROTOCOL_VERSION,
        })?;
        let endpoint_name = match session.receive(timeout)? {
            Response::Ready { name } => name,
            other => {
                return Err(Error::Protocol(format!(
                    "expected ready after hello, got {other:?}"
                )))
            }
        };
        Ok(Self {
            session: Mutex::new(session),
            endpoint_name,
            timeout,
        })
    }

    /// Splits a command line on whitespace and spawns it.
    pub fn spawn_command(command: &str, timeout: Duration) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::Config("empty endpoint command".into()))?;
        let args: Vec<String> = parts.map(str::to_string).collect();
        Self::spawn(program, &args, timeout)
    }

    pub fn endpoint_name(&self) -> &str {
        &self.endpoint_name
    }

    pub fn compare_paths(&self, a: &Path, b: &Path) -> Result<ComparisonResult> {
        let mut session = self.session.lock().expect("endpoint session poisoned");
        session.compare(a, b, self.timeout)
    }

    /// Sends `bye`, closes the stream and waits for the process to exit.
    pub fn shutdown(self) -> Result<()> {
        let mut session = self.session.into_inner().expect("endpoint session poisoned");
        session.close();
        Ok(())
    }
}

impl Session {
    fn send(&mut self, req: &Request<'_>) -> Result<()> {
        let line = serde_json::to_string(req).expect("request serializes");
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Endpoint("endpoint stdin already closed".into()))?;
        writeln!(stdin, "{line}")
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::Endpoint(format!("write failed: {e}{}", self.diagnostics())))
    }

    fn diagnostics(&mut self) -> String {
        let status = match self.child.try_wait() {
            Ok(Some(status)) => format!("; process exited with {status}"),
            _ => String::new(),
        };
        let stderr = self.stderr.lock().expect("stderr buffer poisoned");
        let tail: String = stderr.chars().rev().take(2000).collect::<Vec<_>>().into_iter().rev().collect();
        if tail.trim().is_empty() {
            status
        } else {
            format!("{status}; stderr: {}", tail.trim())
        }
    }

    fn receive(&mut self, timeout: Duration) -> Result<Response> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => serde_json::from_str(&line)
                .map_err(|e| Error::Protocol(format!("unparseable response {line:?}: {e}"))),
            Ok(Err(e)) => Err(Error::Endpoint(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(Error::Endpoint(format!(
                "no response within {:.1} s",
                timeout.as_secs_f64()
            ))),
            Err(RecvTimeoutError::Disconnected) => {
                // give the process a moment to be reaped so the status is reported
                for _ in 0..50 {
                    if matches!(self.child.try_wait(), Ok(Some(_))) {
                        break;
                    }
                    thread::sleep(Duration::from_millis(10));
                }
                thread::sleep(Duration::from_millis(20));
                Err(Error::Endpoint(format!(
                    "endpoint closed its output{}",
                    self.diagnostics()
                )))
            }
        }
    }

    fn compare(&mut self, a: &Path, b: &Path, timeout: Duration) -> Result<ComparisonResult> {
        let id = self.next_id;
        self.next_id += 1;
        let (a, b) = (a.to_string_lossy(), b.to_string_lossy());
        self.send(&Request::Compare { id, a: &a, b: &b })?;
        match self.receive(timeout)? {
            Response::Result {
                id: got,
                score,
                mos_a,
                mos_b,
            } => {
                if got != id {
                    return Err(Error::Protocol(format!(
                        "response id {got} does not match request id {id}"
                    )));
                }
                ComparisonResult {
                    score_cp: score,
                    mos_pre_1: mos_a,
                    mos_pre_2: mos_b,
                }
                .checked("endpoint")
            }
            Response::Error { id: got, message } => Err(Error::Endpoint(format!(
                "endpoint rejected request {}: {}",
                got.map_or("?".to_string(), |g| g.to_string()),
                message.unwrap_or_default()
            ))),
            other => Err(Error::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    fn scratch_path(&mut self, name: &str) -> Result<PathBuf> {
        if self.scratch.is_none() {
            self.scratch = Some(
                tempfile::tempdir()
                    .map_err(|e| Error::io(std::env::temp_dir(), e))?,
            );
        }
        Ok(self.scratch.as_ref().expect("scratch dir").path().join(name))
    }

    fn close(&mut self) {
        if self.stdin.is_some() {
            let _ = self.send(&Request::Bye);
        }
        self.stdin = None;
        for _ in 0..100 {
            if matches!(self.child.try_wait(), Ok(Some(_))) {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.close();
    }
}

impl Comparator for ExternalEndpoint {
    fn name(&self) -> String {
        format!("extern:{}", self.endpoint_name)
    }

    fn compare(&self, a: &ClipRef<'_>, b: &ClipRef<'_>) -> Result<ComparisonResult> {
        let mut session = self.session.lock().expect("endpoint session poisoned");
        // clips that never touched disk are staged in a scratch directory
        let mut stage = |c: &ClipRef<'_>, slot: &str| -> Result<PathBuf> {
            match c.path {
                Some(p) => Ok(p.to_path_buf()),
                None => {
                    let p = session.scratch_path(slot)?;
                    write_wav(c.clip, &p)?;
                    Ok(p)
                }
            }
        };
        let pa = stage(a, "a.wav")?;
        let pb = stage(b, "b.wav")?;
        session.compare(&pa, &pb, self.timeout)
    }
}
