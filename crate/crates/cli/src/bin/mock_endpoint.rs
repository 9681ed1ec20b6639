//! Minimal external comparator for exercising the wire protocol.
//!
//! With `--mos-csv` it looks up each clip's MOS by `(parent dir, file stem)`
//! and answers like the oracle comparator. Otherwise it scores clips with a
//! log-mel contrast heuristic. Malformed lines get an error object and the
//! loop continues.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use pkrank::audio::read_wav;
use pkrank::comparators::oracle_compare;
use pkrank::features::{log_mel, StftConfig};

#[derive(Parser)]
#[command(name = "pkrank-mock-endpoint", about = "Reference comparator endpoint")]
struct Args {
    /// CSV with system_id,utterance_id,mos columns; enables oracle mode.
    /// Repeat to merge several tables.
    #[arg(long)]
    mos_csv: Vec<PathBuf>,
    /// Name reported in the handshake.
    #[arg(long, default_value = "mock")]
    name: String,
}

#[derive(Deserialize)]
struct MosRow {
    system_id: String,
    utterance_id: String,
    mos: f64,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Reply {
    Ready {
        name: String,
    },
    Result {
        id: u64,
        score: f64,
        mos_a: Option<f64>,
        mos_b: Option<f64>,
    },
    Error {
        id: Option<u64>,
        message: String,
    },
}

type MosTable = HashMap<(String, String), f64>;

fn load_table(paths: &[PathBuf]) -> Result<MosTable, String> {
    let mut table = HashMap::new();
    for path in paths {
        let mut reader =
            csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
        for row in reader.deserialize() {
            let row: MosRow = row.map_err(|e| format!("{}: {e}", path.display()))?;
            table.insert((row.system_id, row.utterance_id), row.mos);
        }
    }
    Ok(table)
}

fn key_of(path: &str) -> Option<(String, String)> {
    let p = Path::new(path);
    let utt = p.file_stem()?.to_str()?.to_string();
    let sys = p.parent()?.file_name()?.to_str()?.to_string();
    Some((sys, utt))
}

/// Spread of the log-mel image. Cleaner speech has more contrast between
/// active cells and the floor than noisy speech.
fn quality(path: &str, cfg: &StftConfig) -> Result<f64, String> {
    let clip = read_wav(path).map_err(|e| e.to_string())?;
    let clip = clip.to_canonical().map_err(|e| e.to_string())?;
    let spec = log_mel(&clip, cfg).map_err(|e| e.to_string())?;
    let n = spec.data.data.len() as f64;
    let mean = spec.data.data.iter().sum::<f64>() / n;
    let var = spec.data.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}

fn handle(line: &str, table: Option<&MosTable>, cfg: &StftConfig) -> Option<Reply> {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => {
            return Some(Reply::Error {
                id: None,
                message: format!("malformed request: {e}"),
            })
        }
    };
    let id = value.get("id").and_then(Value::as_u64);
    let fail = |message: String| Some(Reply::Error { id, message });
    match value.get("type").and_then(Value::as_str) {
        Some("bye") => None,
        Some("hello") => Some(Reply::Ready { name: String::new() }),
        Some("compare") => {
            let (Some(id), Some(a), Some(b)) = (
                id,
                value.get("a").and_then(Value::as_str),
                value.get("b").and_then(Value::as_str),
            ) else {
                return fail("compare needs integer id and string a, b".into());
            };
            match table {
                Some(table) => {
                    let lookup = |p: &str| key_of(p).and_then(|k| table.get(&k).copied());
                    match (lookup(a), lookup(b)) {
                        (Some(ma), Some(mb)) => {
                            let r = oracle_compare(ma, mb);
                            Some(Reply::Result {
                                id,
                                score: r.score_cp,
                                mos_a: Some(ma),
                                mos_b: Some(mb),
                            })
                        }
                        _ => fail(format!("no MOS for {a} or {b}")),
                    }
                }
                None => match (quality(a, cfg), quality(b, cfg)) {
                    (Ok(qa), Ok(qb)) => Some(Reply::Result {
                        id,
                        score: 1.0 / (1.0 + (qb - qa).exp()),
                        mos_a: None,
                        mos_b: None,
                    }),
                    (Err(e), _) | (_, Err(e)) => fail(e),
                },
            }
        }
        _ => fail("unknown request type".into()),
    }
}

fn main() {
    let args = Args::parse();
    let table = match (!args.mos_csv.is_empty()).then(|| load_table(&args.mos_csv)).transpose() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("pkrank-mock-endpoint: {e}");
            std::process::exit(2);
        }
    };
    let cfg = StftConfig::default();
    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let reply = match handle(&line, table.as_ref(), &cfg) {
            Some(Reply::Ready { .. }) => Reply::Ready {
                name: args.name.clone(),
            },
            Some(r) => r,
            None => break,
        };
        let text = serde_json::to_string(&reply).expect("reply serializes");
        if writeln!(stdout, "{text}").and_then(|_| stdout.flush()).is_err() {
            break;
        }
    }
}
