//! Reference external scorer for the JSON-lines wire protocol.
//!
//! Returns `score(q, i) = q + i / 1000`, so expected values are obvious by
//! construction. Useful as a protocol smoke test and as a template for
//! wiring a real scorer.
//!
//! Flags:
//!   --protocol-version N   version to report in the hello reply (default 1)
//!   --fail-after N         exit abruptly after N score requests
//!   --garbage              emit a non-JSON line instead of the first reply

use serde_json::{json, Value};
use std::io::{BufRead, Write};

fn main() {
    let mut protocol_version: u64 = 1;
    let mut fail_after: Option<u64> = None;
    let mut garbage = false;

    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--protocol-version" => {
                protocol_version = it
                    .next()
                    .and_then(|v| v.parse().ok())
                    .expect("--protocol-version needs an integer");
            }
            "--fail-after" => {
                fail_after = Some(
                    it.next()
                        .and_then(|v| v.parse().ok())
                        .expect("--fail-after needs an integer"),
                );
            }
            "--garbage" => garbage = true,
            other => {
                eprintln!("unknown flag {other}");
                std::process::exit(2);
            }
        }
    }

    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    let mut score_requests = 0u64;

    for line in stdin.lock().lines() {
        let line = match line {
            Ok(l) => l,
            Err(_) => break,
        };
        if line.trim().is_empty() {
            continue;
        }
        if garbage {
            let _ = writeln!(stdout, "this is not json");
            let _ = stdout.flush();
            garbage = false;
            continue;
        }
        let msg: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(_) => {
                let _ = writeln!(stdout, "{}", json!({"op": "error", "reason": "bad json"}));
                let _ = stdout.flush();
                continue;
            }
        };
        match msg.get("op").and_then(Value::as_str) {
            Some("hello") => {
                let reply = json!({
                    "op": "hello",
                    "version": protocol_version,
                    "name": "echo-scorer",
                });
                let _ = writeln!(stdout, "{reply}");
                let _ = stdout.flush();
            }
            Some("score") => {
                score_requests += 1;
                if let Some(n) = fail_after {
                    if score_requests > n {
                        // simulate a backend crash mid-session
                        std::process::exit(1);
                    }
                }
                let q = msg.get("query_id").and_then(Value::as_u64).unwrap_or(0) as f64;
                let scores: Vec<f64> = msg
                    .get("item_ids")
                    .and_then(Value::as_array)
                    .map(|ids| {
                        ids.iter()
                            .map(|v| q + v.as_u64().unwrap_or(0) as f64 / 1000.0)
                            .collect()
                    })
                    .unwrap_or_default();
                let _ = writeln!(stdout, "{}", json!({"op": "score", "scores": scores}));
                let _ = stdout.flush();
            }
            Some("shutdown") => break,
            _ => {
                let _ = writeln!(stdout, "{}", json!({"op": "error", "reason": "unknown op"}));
                let _ = stdout.flush();
            }
        }
    }
}
