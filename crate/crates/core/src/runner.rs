//! Runner side: `da_init` / `da_expose`, and a driver that turns any
//! `Model` into a runner process.

use std::io::BufReader;
use std::net::{SocketAddr, TcpStream};
use std::ops::Range;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Barrier, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::config::StudyConfig;
use crate::error::{Error, Result};
use crate::metrics::now_ms;
use crate::models::Model;
use crate::partition::{block_decompose, make_layout, make_redistribution_map};
use crate::protocol::{read_message, write_message, WireMessage, NO_MEMBER};

/// Process exit statuses of a runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunnerExit {
    Stopped = 0,
    Config = 1,
    Connection = 2,
    ModelFailure = 3,
}

impl RunnerExit {
    pub fn code(self) -> i32 {
        self as i32
    }

    fn from_error(e: &Error) -> Self {
        match e {
            Error::Config(_) => RunnerExit::Config,
            Error::ModelFailure(_) | Error::Numerical(_) => RunnerExit::ModelFailure,
            _ => RunnerExit::Connection,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InitOptions {
    pub connect_timeout: Duration,
    pub heartbeat_period: Duration,
}

impl InitOptions {
    pub fn from_config(cfg: &StudyConfig) -> Self {
        Self {
            connect_timeout: Duration::from_millis(cfg.connect_timeout_ms),
            heartbeat_period: Duration::from_millis(cfg.heartbeat_period_ms()),
        }
    }
}

/// Outcome of one expose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exposed {
    Propagate { nsteps: u32, member: u32, cycle: u32 },
    Stop,
}

struct ShardConn {
    reader: BufReader<TcpStream>,
    writer: Arc<Mutex<TcpStream>>,
}

impl ShardConn {
    fn send(&self, msg: &WireMessage) -> Result<()> {
        let mut w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        write_message(&mut *w, msg)
    }
}

/// Stops its ticker thread when dropped.
struct HeartbeatTicker {
    _stop: mpsc::Sender<()>,
}

impl HeartbeatTicker {
    fn start(writer: Arc<Mutex<TcpStream>>, runner_id: u32, period: Duration) -> Self {
        let (stop, stopped) = mpsc::channel::<()>();
        thread::spawn(move || loop {
            match stopped.recv_timeout(period) {
                Err(RecvTimeoutError::Timeout) => {
                    let msg = WireMessage::Heartbeat {
                        sender_id: runner_id,
                        timestamp_ms: now_ms(),
                    };
                    let mut w = writer.lock().unwrap_or_else(|p| p.into_inner());
                    if write_message(&mut *w, &msg).is_err() {
                        return;
                    }
                }
                _ => return,
            }
        });
        Self { _stop: stop }
    }
}

/// One part of a runner, connected to every server shard.
pub struct RunnerHandle {
    runner_id: u32,
    part_index: usize,
    part_range: Range<usize>,
    transfers: Vec<Range<usize>>,
    conns: Vec<ShardConn>,
    current: Option<(u32, u32)>,
    n_assimilated: usize,
    _heartbeat: HeartbeatTicker,
}

fn connect_with_retry(addr: SocketAddr, deadline: Instant) -> Result<TcpStream> {
    let mut backoff = Duration::from_millis(20);
    loop {
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            return Err(Error::Connection(format!("server at {addr} unreachable")));
        }
        match TcpStream::connect_timeout(&addr, remaining) {
            Ok(s) => {
                let _ = s.set_nodelay(true);
                return Ok(s);
            }
            Err(e) => {
                log::debug!("connect to {addr} failed: {e}, retrying");
                thread::sleep(backoff.min(deadline.saturating_duration_since(Instant::now())));
                backoff = (backoff * 2).min(Duration::from_secs(1));
            }
        }
    }
}

fn hello(
    addr: SocketAddr,
    deadline: Instant,
    runner_id: u32,
    part_index: usize,
    parts: usize,
    n_local: usize,
) -> Result<(ShardConn, Vec<String>, usize, usize)> {
    let stream = connect_with_retry(addr, deadline)?;
    let timeout = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(100));
    stream.set_read_timeout(Some(timeout))?;
    let conn = ShardConn {
        reader: BufReader::new(stream.try_clone()?),
        writer: Arc::new(Mutex::new(stream)),
    };
    conn.send(&WireMessage::RunnerHello {
        runner_id,
        part_index: part_index as u32,
        parts: parts as u32,
        n_dynamic: n_local as u64,
    })?;
    let mut conn = conn;
    match read_message(&mut conn.reader)? {
        Some(WireMessage::HelloAck {
            shard_endpoints,
            n_dynamic,
            n_assimilated,
        }) => {
            conn.reader.get_ref().set_read_timeout(None)?;
            Ok((conn, shard_endpoints, n_dynamic as usize, n_assimilated as usize))
        }
        Some(other) => Err(Error::protocol(format!("expected HELLO_ACK, got {}", other.kind()))),
        None => Err(Error::Connection(format!("{addr} closed the connection during registration"))),
    }
}

/// Registers part `part_index` of `parts` with the server behind `registry`
/// and opens a connection to every shard.
pub fn da_init(
    registry: SocketAddr,
    runner_id: u32,
    n_dynamic_local: usize,
    part_index: usize,
    parts: usize,
    opts: &InitOptions,
) -> Result<RunnerHandle> {
    if parts == 0 || part_index >= parts {
        return Err(Error::config(format!("part {part_index} of {parts} is not a valid part")));
    }
    let deadline = Instant::now() + opts.connect_timeout;
    let (first, endpoints, n_dynamic, n_assimilated) =
        hello(registry, deadline, runner_id, part_index, parts, n_dynamic_local)?;
    let expected = block_decompose(n_dynamic, parts)?[part_index].len();
    if expected != n_dynamic_local {
        return Err(Error::config(format!(
            "layout mismatch: part {part_index}/{parts} holds {n_dynamic_local} values, server layout implies {expected}"
        )));
    }
    if endpoints.is_empty() {
        return Err(Error::protocol("server announced no shards"));
    }
    let mut conns = vec![first];
    for ep in &endpoints[1..] {
        let addr: SocketAddr = ep
            .parse()
            .map_err(|e| Error::protocol(format!("bad shard endpoint {ep:?}: {e}")))?;
        let (conn, _, n, _) = hello(addr, deadline, runner_id, part_index, parts, n_dynamic_local)?;
        if n != n_dynamic {
            return Err(Error::protocol("shards disagree on the state layout"));
        }
        conns.push(conn);
    }
    let layout = make_layout(n_dynamic, n_assimilated)?;
    let map = make_redistribution_map(&layout, parts, endpoints.len())?;
    let heartbeat = HeartbeatTicker::start(Arc::clone(&conns[0].writer), runner_id, opts.heartbeat_period);
    Ok(RunnerHandle {
        runner_id,
        part_index,
        part_range: map.part_range(part_index),
        transfers: (0..endpoints.len()).map(|s| map.transfer(part_index, s)).collect(),
        conns,
        current: None,
        n_assimilated,
        _heartbeat: heartbeat,
    })
}

impl RunnerHandle {
    pub fn runner_id(&self) -> u32 {
        self.runner_id
    }

    pub fn shards(&self) -> usize {
        self.conns.len()
    }

    pub fn n_assimilated(&self) -> usize {
        self.n_assimilated
    }

    /// Member and cycle of the state currently in the buffer, if any.
    pub fn current(&self) -> Option<(u32, u32)> {
        self.current
    }

    /// Sends the buffer as the background of the current member, then blocks
    /// until the server hands out the next analysis state (written into the
    /// buffer) or says stop.
    pub fn da_expose(&mut self, buffer: &mut [f64]) -> Result<Exposed> {
        if buffer.len() != self.part_range.len() {
            return Err(Error::config(format!(
                "expose buffer has {} values, part holds {}",
                buffer.len(),
                self.part_range.len()
            )));
        }
        let (member, cycle) = self.current.unwrap_or((NO_MEMBER, 0));
        let base = self.part_range.start;
        for (conn, t) in self.conns.iter().zip(&self.transfers) {
            conn.send(&WireMessage::StatePush {
                member_id: member,
                cycle,
                part_index: self.part_index as u32,
                range_offset: t.start as u64,
                payload: buffer[t.start - base..t.end - base].to_vec(),
            })?;
        }

        let mut next: Option<(u32, u32, u32)> = None;
        for (conn, t) in self.conns.iter_mut().zip(&self.transfers) {
            match read_message(&mut conn.reader)? {
                Some(WireMessage::Assign {
                    member_id,
                    cycle,
                    nsteps,
                    range_offset,
                    payload,
                }) => {
                    if range_offset as usize != t.start || payload.len() != t.len() {
                        return Err(Error::protocol("assigned range does not match this part"));
                    }
                    if next.is_some_and(|n| n != (member_id, cycle, nsteps)) {
                        return Err(Error::protocol("shards assigned different members"));
                    }
                    next = Some((member_id, cycle, nsteps));
                    buffer[t.start - base..t.end - base].copy_from_slice(&payload);
                }
                Some(WireMessage::Stop) => {
                    self.current = None;
                    return Ok(Exposed::Stop);
                }
                Some(other) => {
                    return Err(Error::protocol(format!("unexpected {} from server", other.kind())))
                }
                None => return Err(Error::Connection("server closed the connection".into())),
            }
        }
        let (member, cycle, nsteps) = next.expect("at least one shard");
        self.current = Some((member, cycle));
        Ok(Exposed::Propagate { nsteps, member, cycle })
    }
}

#[derive(Debug, Clone)]
pub struct RunnerOptions {
    pub registry: SocketAddr,
    pub runner_id: u32,
    pub parts: usize,
    pub init: InitOptions,
    /// Extra sleep after each propagation, emulating a costlier model.
    pub propagation_delay: Duration,
}

impl RunnerOptions {
    pub fn from_config(cfg: &StudyConfig, registry: SocketAddr, runner_id: u32) -> Self {
        Self {
            registry,
            runner_id,
            parts: cfg.runner_parts,
            init: InitOptions::from_config(cfg),
            propagation_delay: Duration::from_millis(cfg.propagation_delay_ms),
        }
    }
}

#[derive(Clone, Copy)]
enum Step {
    Propagate(u32),
    Finish(RunnerExit),
}

/// Runs the expose/propagate loop until STOP. Each of the `parts` parts is a
/// thread with its own shard connections, standing in for one rank of a
/// parallel model; part 0 advances the assembled state.
pub fn run_runner(model: Arc<dyn Model>, opts: &RunnerOptions) -> RunnerExit {
    let parts = opts.parts.max(1);
    let n = model.n_dynamic();
    let ranges = match block_decompose(n, parts) {
        Ok(r) => r,
        Err(e) => {
            log::error!("runner {}: {e}", opts.runner_id);
            return RunnerExit::Config;
        }
    };
    let full = Arc::new(Mutex::new(model.base_state()));
    let barrier = Arc::new(Barrier::new(parts));
    let results: Arc<Mutex<Vec<Option<Result<Exposed>>>>> = Arc::new(Mutex::new((0..parts).map(|_| None).collect()));
    let step = Arc::new(Mutex::new(Step::Finish(RunnerExit::Stopped)));

    let threads: Vec<_> = ranges
        .into_iter()
        .enumerate()
        .map(|(p, range)| {
            let (model, full, barrier, results, step, opts) = (
                Arc::clone(&model),
                Arc::clone(&full),
                Arc::clone(&barrier),
                Arc::clone(&results),
                Arc::clone(&step),
                opts.clone(),
            );
            thread::spawn(move || {
                let mut handle = da_init(opts.registry, opts.runner_id, range.len(), p, parts, &opts.init);
                let mut local = vec![0.0; range.len()];
                loop {
                    local.copy_from_slice(&full.lock().unwrap()[range.clone()]);
                    let r = match &mut handle {
                        Ok(h) => h.da_expose(&mut local),
                        Err(e) => Err(clone_error(e)),
                    };
                    full.lock().unwrap()[range.clone()].copy_from_slice(&local);
                    results.lock().unwrap()[p] = Some(r);
                    if barrier.wait().is_leader() {
                        let decision = decide(&mut results.lock().unwrap(), opts.runner_id);
                        let decision = match decision {
                            Step::Propagate(nsteps) => {
                                let mut state = full.lock().unwrap();
                                match model.propagate(&mut state, nsteps) {
                                    Ok(()) => {
                                        if !opts.propagation_delay.is_zero() {
                                            thread::sleep(opts.propagation_delay);
                                        }
                                        Step::Propagate(nsteps)
                                    }
                                    Err(e) => {
                                        log::error!("runner {}: {e}", opts.runner_id);
                                        Step::Finish(RunnerExit::from_error(&e))
                                    }
                                }
                            }
                            other => other,
                        };
                        *step.lock().unwrap() = decision;
                    }
                    barrier.wait();
                    if let Step::Finish(_) = *step.lock().unwrap() {
                        break;
                    }
                }
                drop(handle);
            })
        })
        .collect();
    for t in threads {
        if t.join().is_err() {
            return RunnerExit::ModelFailure;
        }
    }
    let outcome = *step.lock().unwrap();
    match outcome {
        Step::Finish(exit) => exit,
        Step::Propagate(_) => RunnerExit::Stopped,
    }
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(m.clone()),
        other => Error::Connection(other.to_string()),
    }
}

/// Combines what every part saw at this expose.
fn decide(results: &mut [Option<Result<Exposed>>], runner_id: u32) -> Step {
    let mut exit = None;
    let mut stop = false;
    let mut nsteps = None;
    for r in results.iter_mut() {
        match r.take() {
            Some(Ok(Exposed::Propagate { nsteps: n, .. })) => {
                if nsteps.is_some_and(|m| m != n) {
                    exit = Some(RunnerExit::Connection);
                }
                nsteps = Some(n);
            }
            Some(Ok(Exposed::Stop)) => stop = true,
            Some(Err(e)) => {
                log::error!("runner {runner_id}: {e}");
                let code = RunnerExit::from_error(&e);
                exit = Some(exit.map_or(code, |c: RunnerExit| if c == RunnerExit::Config { c } else { code }));
            }
            None => exit = Some(RunnerExit::Connection),
        }
    }
    match (exit, stop, nsteps) {
        (Some(code), _, _) => Step::Finish(code),
        (None, true, _) => Step::Finish(RunnerExit::Stopped),
        (None, false, Some(n)) => Step::Propagate(n),
        (None, false, None) => Step::Finish(RunnerExit::Connection),
    }
}
