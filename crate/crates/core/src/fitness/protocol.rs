//! Client side of the evaluator worker protocol.
//!
//! Newline-delimited JSON over a child's stdin/stdout:
//!
//! ```text
//! -> {"cmd":"hello","version":1}
//! <- {"ok":true,"parallelism":k}
//! -> {"cmd":"eval","id":7,"arch":"vgg16-cifar","channels":[...],"epochs":3,"seed":42}
//! <- {"id":7,"fitness":0.91}   or   {"id":7,"error":"..."}
//! -> {"cmd":"shutdown"}
//! ```
//!
//! A worker may hold up to `k` requests in flight and answer them in any order.
//! The client spawns as many workers as needed to reach `max_parallelism` and
//! bounds every wait by the configured timeout.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::FitnessError;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalSpec {
    /// Program and arguments of the worker.
    pub command: Vec<String>,
    /// Upper bound on any single wait: handshake, evaluation or shutdown.
    pub timeout: Duration,
    pub max_parallelism: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub id: u64,
    pub arch: String,
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalOutcome {
    Fitness(f64),
    Error(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResponse {
    pub id: u64,
    pub outcome: EvalOutcome,
}

#[derive(Serialize)]
#[serde(tag = "cmd", rename_all = "lowercase")]
enum Command_<'a> {
    Hello {
        version: u32,
    },
    Eval {
        id: u64,
        arch: &'a str,
        channels: &'a [usize],
        epochs: usize,
        seed: u64,
    },
    Shutdown,
}

#[derive(Deserialize)]
struct HelloReply {
    ok: bool,
    #[serde(default)]
    parallelism: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalReply {
    id: u64,
    #[serde(default)]
    fitness: Option<f64>,
    #[serde(default)]
    error: Option<String>,
}

/// Parses one response line, enforcing the `[0, 1]` fitness range.
pub(crate) fn parse_reply(line: &str) -> Result<EvalResponse, FitnessError> {
    let reply: EvalReply = serde_json::from_str(line)
        .map_err(|e| FitnessError::ProtocolError(format!("unreadable reply `{line}`: {e}")))?;
    let outcome = match (reply.fitness, reply.error) {
        (Some(f), None) if f.is_finite() && (0.0..=1.0).contains(&f) => EvalOutcome::Fitness(f),
        (Some(f), None) => {
            return Err(FitnessError::ProtocolError(format!(
                "reply {} has fitness {f} outside [0, 1]",
                reply.id
            )))
        }
        (None, Some(msg)) => EvalOutcome::Error(msg),
        _ => {
            return Err(FitnessError::ProtocolError(format!(
                "reply {} must carry exactly one of fitness or error",
                reply.id
            )))
        }
    };
    Ok(EvalResponse { id: reply.id, outcome })
}

enum Event {
    Line(u64, String),
    Closed(u64),
}

struct Worker {
    key: u64,
    child: Child,
    stdin: Option<ChildStdin>,
    capacity: usize,
    in_flight: usize,
}

impl Worker {
    fn send(&mut self, msg: &Command_<'_>) -> std::io::Result<()> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| std::io::Error::from(std::io::ErrorKind::BrokenPipe))?;
        let mut line = serde_json::to_string(msg).expect("commands always serialize");
        line.push('\n');
        stdin.write_all(line.as_bytes())?;
        stdin.flush()
    }

    fn kill(&mut self) {
        self.stdin = None;
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A pool of worker processes. Dropping the client shuts the workers down.
pub struct ProtocolClient {
    spec: ExternalSpec,
    workers: Vec<Worker>,
    tx: Sender<Event>,
    rx: Receiver<Event>,
    next_key: u64,
}

/// Failure of a run, with the request id it concerns when there is one.
pub type RunError = (Option<u64>, FitnessError);

impl ProtocolClient {
    pub fn new(spec: ExternalSpec) -> Self {
        let (tx, rx) = mpsc::channel();
        Self {
            spec,
            workers: Vec::new(),
            tx,
            rx,
            next_key: 0,
        }
    }

    fn max_parallelism(&self) -> usize {
        self.spec.max_parallelism.max(1)
    }

    fn spawn_worker(&mut self) -> Result<(), FitnessError> {
        let program = self
            .spec
            .command
            .first()
            .ok_or_else(|| FitnessError::InvalidSpec("external command is empty".into()))?;
        let mut child = Command::new(program)
            .args(&self.spec.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(FitnessError::Spawn)?;
        let key = self.next_key;
        self.next_key += 1;
        let stdout = child.stdout.take().expect("stdout is piped");
        let tx = self.tx.clone();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                match line {
                    Ok(l) => {
                        if tx.send(Event::Line(key, l)).is_err() {
                            return;
                        }
                    }
                    Err(_) => break,
                }
            }
            let _ = tx.send(Event::Closed(key));
        });
        let mut worker = Worker {
            key,
            stdin: child.stdin.take(),
            child,
            capacity: 1,
            in_flight: 0,
        };
        match self.handshake(&mut worker) {
            Ok(k) => {
                worker.capacity = k.min(self.max_parallelism());
                self.workers.push(worker);
                Ok(())
            }
            Err(e) => {
                worker.kill();
                Err(e)
            }
        }
    }

    fn handshake(&self, worker: &mut Worker) -> Result<usize, FitnessError> {
        worker
            .send(&Command_::Hello {
                version: PROTOCOL_VERSION,
            })
            .map_err(|e| FitnessError::EvaluatorCrashed(format!("handshake write failed: {e}")))?;
        let deadline = Instant::now() + self.spec.timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(left) {
                Ok(Event::Line(k, line)) if k == worker.key => {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let reply: HelloReply = serde_json::from_str(&line)
                        .map_err(|e| FitnessError::ProtocolError(format!("bad handshake `{line}`: {e}")))?;
                    if !reply.ok {
                        return Err(FitnessError::ProtocolError(format!("worker refused handshake: {line}")));
                    }
                    return Ok(reply.parallelism.unwrap_or(1).max(1));
                }
                Ok(Event::Closed(k)) if k == worker.key => {
                    return Err(FitnessError::EvaluatorCrashed("worker exited during handshake".into()))
                }
                // leftovers from workers killed earlier
                Ok(_) => continue,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(FitnessError::EvalTimeout {
                        what: "handshake".into(),
                        timeout: self.spec.timeout,
                    })
                }
                Err(RecvTimeoutError::Disconnected) => unreachable!("client holds a sender"),
            }
        }
    }

    fn ensure_workers(&mut self) -> Result<(), FitnessError> {
        if self.workers.is_empty() {
            self.spawn_worker()?;
        }
        while self.workers.iter().map(|w| w.capacity).sum::<usize>() < self.max_parallelism() {
            self.spawn_worker()?;
        }
        Ok(())
    }

    /// Sends every request and collects the responses in request order.
    ///
    /// Error replies come back as [`EvalOutcome::Error`] without disturbing the
    /// other requests. Timeouts, crashes and malformed output abort the run and
    /// kill the workers; the next run starts fresh ones.
    pub fn run(&mut self, requests: &[EvalRequest]) -> Result<Vec<EvalResponse>, RunError> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let mut seen = HashSet::new();
        if let Some(dup) = requests.iter().find(|r| !seen.insert(r.id)) {
            return Err((
                Some(dup.id),
                FitnessError::InvalidSpec(format!("duplicate request id {}", dup.id)),
            ));
        }
        let out = self
            .ensure_workers()
            .map_err(|e| (None, e))
            .and_then(|_| self.dispatch(requests));
        if out.is_err() {
            self.kill_all();
        }
        out
    }

    fn dispatch(&mut self, requests: &[EvalRequest]) -> Result<Vec<EvalResponse>, RunError> {
        let timeout = self.spec.timeout;
        let mut pending: VecDeque<usize> = (0..requests.len()).collect();
        // id -> (worker key, deadline, request index)
        let mut in_flight: HashMap<u64, (u64, Instant, usize)> = HashMap::new();
        let mut results: Vec<Option<EvalResponse>> = vec![None; requests.len()];

        loop {
            while let Some(&i) = pending.front() {
                if in_flight.len() >= self.max_parallelism() {
                    break;
                }
                let Some(worker) = self
                    .workers
                    .iter_mut()
                    .filter(|w| w.in_flight < w.capacity)
                    .min_by_key(|w| w.in_flight)
                else {
                    break;
                };
                let r = &requests[i];
                worker
                    .send(&Command_::Eval {
                        id: r.id,
                        arch: &r.arch,
                        channels: &r.channels,
                        epochs: r.epochs,
                        seed: r.seed,
                    })
                    .map_err(|e| (Some(r.id), FitnessError::EvaluatorCrashed(format!("write failed: {e}"))))?;
                worker.in_flight += 1;
                in_flight.insert(r.id, (worker.key, Instant::now() + timeout, i));
                pending.pop_front();
            }

            if in_flight.is_empty() {
                if pending.is_empty() {
                    break;
                }
                let id = requests[pending[0]].id;
                return Err((Some(id), FitnessError::EvaluatorCrashed("no live workers left".into())));
            }

            let (&late_id, &(_, deadline, _)) = in_flight
                .iter()
                .min_by_key(|(_, (_, d, _))| *d)
                .expect("in_flight is not empty");
            let now = Instant::now();
            if deadline <= now {
                return Err((
                    Some(late_id),
                    FitnessError::EvalTimeout {
                        what: format!("request {late_id}"),
                        timeout,
                    },
                ));
            }
            match self.rx.recv_timeout(deadline - now) {
                Ok(Event::Line(key, line)) => {
                    let Some(w) = self.workers.iter_mut().find(|w| w.key == key) else {
                        continue;
                    };
                    if line.trim().is_empty() {
                        continue;
                    }
                    let resp = parse_reply(&line).map_err(|e| (None, e))?;
                    match in_flight.get(&resp.id) {
                        Some(&(owner, _, index)) if owner == key => {
                            in_flight.remove(&resp.id);
                            w.in_flight -= 1;
                            results[index] = Some(resp);
                        }
                        _ => {
                            return Err((
                                Some(resp.id),
                                FitnessError::ProtocolError(format!("reply for unknown request id {}", resp.id)),
                            ))
                        }
                    }
                }
                Ok(Event::Closed(key)) => {
                    let Some(pos) = self.workers.iter().position(|w| w.key == key) else {
                        continue;
                    };
                    let mut w = self.workers.remove(pos);
                    let status = w.child.wait().ok();
                    if let Some((&id, _)) = in_flight.iter().find(|(_, (owner, _, _))| *owner == key) {
                        return Err((
                            Some(id),
                            FitnessError::EvaluatorCrashed(format!(
                                "worker exited ({}) with request {id} in flight",
                                status.map_or("unknown status".to_string(), |s| s.to_string())
                            )),
                        ));
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => unreachable!("client holds a sender"),
            }
        }

        Ok(results
            .into_iter()
            .map(|r| r.expect("every request answered"))
            .collect())
    }

    fn kill_all(&mut self) {
        for mut w in self.workers.drain(..) {
            w.kill();
        }
    }

    /// Asks every worker to exit, killing any that outlive the timeout.
    pub fn shutdown(&mut self) {
        for w in &mut self.workers {
            let _ = w.send(&Command_::Shutdown);
            w.stdin = None;
        }
        let deadline = Instant::now() + self.spec.timeout;
        for mut w in self.workers.drain(..) {
            loop {
                match w.child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(5)),
                    _ => {
                        w.kill();
                        break;
                    }
                }
            }
        }
    }
}

impl Drop for ProtocolClient {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Runs a batch against freshly spawned workers and shuts them down afterwards.
pub fn external_evaluate(requests: &[EvalRequest], spec: &ExternalSpec) -> Result<Vec<EvalResponse>, FitnessError> {
    let mut client = ProtocolClient::new(spec.clone());
    let out = client.run(requests).map_err(|(_, e)| e);
    client.shutdown();
    out
}
