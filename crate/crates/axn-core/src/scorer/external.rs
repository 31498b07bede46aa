//! Scorer backend running in an external process.
//!
//! Wire protocol, newline-delimited JSON over stdin/stdout:
//!
//! ```text
//! -> {"op":"hello","version":1}
//! <- {"op":"hello","version":1,"name":"<backend name>"}
//! -> {"op":"score","query_id":3,"item_ids":[2,9]}
//! <- {"op":"score","scores":[3.002,3.009]}
//! -> {"op":"shutdown"}
//! ```
//!
//! Scores are positionally aligned with `item_ids`. Any malformed or
//! missing reply is a backend failure. Requests are serialized over the
//! single connection; run one backend per worker for parallelism.

use crate::error::{Error, Result};
use crate::ids::{ItemId, QueryId};
use crate::scorer::Scorer;
use serde_json::{json, Value};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

pub const PROTOCOL_VERSION: u32 = 1;

struct Pipes {
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

pub struct ExternalScorer {
    child: Mutex<Child>,
    pipes: Mutex<Pipes>,
    name: String,
    command: String,
}

impl std::fmt::Debug for ExternalScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalScorer")
            .field("name", &self.name)
            .field("command", &self.command)
            .finish()
    }
}

impl ExternalScorer {
    /// Spawn `command` (whitespace-split into program + args) and perform
    /// the version handshake.
    pub fn connect(command: &str, protocol_version: u32) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::SpawnFailure("empty command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::SpawnFailure(format!("{command}: {e}")))?;
        let stdin = child
            .stdin
            .take()
            .ok_or_else(|| Error::SpawnFailure("no stdin pipe".into()))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::SpawnFailure("no stdout pipe".into()))?;
        let mut pipes = Pipes {
            stdin,
            stdout: BufReader::new(stdout),
        };

        let reply = request(
            &mut pipes,
            &json!({"op": "hello", "version": protocol_version}),
        )?;
        let got = reply
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::BackendFailure("hello reply lacks version".into()))?
            as u32;
        if got != protocol_version {
            return Err(Error::HandshakeMismatch {
                expected: protocol_version,
                got,
            });
        }
        let name = reply
            .get("name")
            .and_then(Value::as_str)
            .unwrap_or("external")
            .to_string();
        Ok(Self {
            child: Mutex::new(child),
            pipes: Mutex::new(pipes),
            name,
            command: command.to_string(),
        })
    }
}

fn request(pipes: &mut Pipes, msg: &Value) -> Result<Value> {
    let line =
        serde_json::to_string(msg).map_err(|e| Error::BackendFailure(format!("encode: {e}")))?;
    pipes
        .stdin
        .write_all(line.as_bytes())
        .and_then(|_| pipes.stdin.write_all(b"\n"))
        .and_then(|_| pipes.stdin.flush())
        .map_err(|e| Error::BackendFailure(format!("write: {e}")))?;
    let mut reply = String::new();
    let n = pipes
        .stdout
        .read_line(&mut reply)
        .map_err(|e| Error::BackendFailure(format!("read: {e}")))?;
    if n == 0 {
        return Err(Error::BackendFailure("scorer process closed stdout".into()));
    }
    serde_json::from_str(reply.trim())
        .map_err(|e| Error::BackendFailure(format!("malformed reply line: {e}")))
}

impl Scorer for ExternalScorer {
    fn descriptor(&self) -> String {
        format!("external({}: {})", self.name, self.command)
    }

    fn score_batch(&self, query: QueryId, items: &[ItemId]) -> Result<Vec<f64>> {
        let ids: Vec<u64> = items.iter().map(|i| i.0 as u64).collect();
        let mut pipes = self.pipes.lock().expect("scorer pipe lock poisoned");
        let reply = request(
            &mut pipes,
            &json!({"op": "score", "query_id": query.0 as u64, "item_ids": ids}),
        )?;
        let scores = reply
            .get("scores")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::BackendFailure("score reply lacks scores array".into()))?;
        if scores.len() != items.len() {
            return Err(Error::BackendFailure(format!(
                "expected {} scores, got {}",
                items.len(),
                scores.len()
            )));
        }
        scores
            .iter()
            .map(|v| {
                v.as_f64()
                    .filter(|s| s.is_finite())
                    .ok_or_else(|| Error::BackendFailure(format!("bad score value {v}")))
            })
            .collect()
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        if let Ok(mut pipes) = self.pipes.lock() {
            let _ = pipes.stdin.write_all(b"{\"op\":\"shutdown\"}\n");
            let _ = pipes.stdin.flush();
        }
        if let Ok(mut child) = self.child.lock() {
            // give it a moment to exit on its own, then reap
            for _ in 0..50 {
                match child.try_wait() {
                    Ok(Some(_)) => return,
                    Ok(None) => std::thread::sleep(std::time::Duration::from_millis(10)),
                    Err(_) => break,
                }
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
