//! Scriptable worker speaking the evaluator line protocol, for exercising the
//! client: well-behaved, slow, out-of-order, silent, crashing and malformed.

use std::io::{BufRead, Write};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::time::Duration;

use clap::{Parser, ValueEnum};
use serde_json::{json, Value};

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    /// fitness = channels[0] / 1000
    Echo,
    /// fitness = --value
    Constant,
    /// echo fitness, but each batch of --parallelism requests answered in reverse
    Reverse,
    /// handshake, then never answer
    Hang,
    /// answer --after requests, then exit with status 3
    Crash,
    /// answer every request with an error reply
    Error,
    /// answer with a line that is not JSON
    Garbage,
    /// answer with fitness 1.5
    OutOfRange,
    /// refuse the handshake
    Refuse,
}

#[derive(Parser)]
struct Args {
    #[arg(value_enum)]
    mode: Mode,
    #[arg(long, default_value_t = 0.5)]
    value: f64,
    /// Parallelism advertised in the handshake.
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    #[arg(long, default_value_t = 0)]
    after: usize,
    /// Sleep before each reply.
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    /// Append every received command name to this file.
    #[arg(long)]
    log: Option<std::path::PathBuf>,
}

fn send(v: &Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{v}");
    let _ = out.flush();
}

fn echo(req: &Value) -> Value {
    let first = req["channels"][0].as_u64().unwrap_or(0);
    json!({"id": req["id"], "fitness": first as f64 / 1000.0})
}

fn main() {
    let args = Args::parse();
    let (tx, rx) = mpsc::channel::<String>();
    std::thread::spawn(move || {
        for line in std::io::stdin().lock().lines() {
            match line {
                Ok(l) => {
                    if tx.send(l).is_err() {
                        break;
                    }
                }
                Err(_) => break,
            }
        }
    });

    let mut pending: Vec<Value> = Vec::new();
    let mut answered = 0usize;
    let flush = |pending: &mut Vec<Value>| {
        while let Some(req) = pending.pop() {
            send(&echo(&req));
        }
    };
    loop {
        let line = if pending.is_empty() {
            rx.recv().map_err(|_| RecvTimeoutError::Disconnected)
        } else {
            rx.recv_timeout(Duration::from_millis(100))
        };
        let line = match line {
            Ok(l) => l,
            Err(RecvTimeoutError::Timeout) => {
                flush(&mut pending);
                continue;
            }
            Err(RecvTimeoutError::Disconnected) => break,
        };
        let msg: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let cmd = msg["cmd"].as_str().unwrap_or("").to_string();
        if let Some(path) = &args.log {
            if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
                let _ = writeln!(f, "{cmd}");
            }
        }
        match cmd.as_str() {
            "hello" if args.mode == Mode::Refuse => send(&json!({"ok": false})),
            "hello" => send(&json!({"ok": true, "parallelism": args.parallelism})),
            "shutdown" => {
                flush(&mut pending);
                break;
            }
            "eval" => {
                if args.delay_ms > 0 {
                    std::thread::sleep(Duration::from_millis(args.delay_ms));
                }
                match args.mode {
                    Mode::Echo => send(&echo(&msg)),
                    Mode::Constant => send(&json!({"id": msg["id"], "fitness": args.value})),
                    Mode::Reverse => {
                        pending.push(msg);
                        if pending.len() >= args.parallelism {
                            flush(&mut pending);
                        }
                    }
                    Mode::Hang | Mode::Refuse => {}
                    Mode::Crash => {
                        if answered >= args.after {
                            std::process::exit(3);
                        }
                        send(&echo(&msg));
                    }
                    Mode::Error => send(&json!({"id": msg["id"], "error": "stub rejects every request"})),
                    Mode::Garbage => {
                        let mut out = std::io::stdout().lock();
                        let _ = writeln!(out, "this is not json");
                        let _ = out.flush();
                    }
                    Mode::OutOfRange => send(&json!({"id": msg["id"], "fitness": 1.5})),
                }
                answered += 1;
            }
            _ => {}
        }
    }
}
