//! One server shard: owns the `[start, end)` slice of every member's
//! analysis and background vectors and the sockets of runner parts connected
//! to it. Shards never decide anything; they validate, store, forward.

use std::collections::{BTreeMap, HashMap};
use std::io::BufReader;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::ops::Range;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, Sender};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crate::partition::RedistributionMap;
use crate::protocol::{read_message, write_message, WireMessage, NO_MEMBER};

use super::coordinator::FailureReason;

/// Events the shards forward to the coordinator.
#[derive(Debug)]
pub(crate) enum CoordEvent {
    Connected { runner: u32, part: usize, shard: usize },
    Sentinel { runner: u32, part: usize, shard: usize },
    Part { runner: u32, part: usize, shard: usize, member: u32, cycle: u32 },
    Heartbeat { runner: u32 },
    Lost { runner: u32, reason: FailureReason },
    Retire { runner: u32 },
    LauncherGone,
}

pub(crate) type Slices = Vec<(u32, Vec<f64>)>;

pub(crate) enum ShardMsg {
    Hello {
        conn_id: u64,
        runner: u32,
        part: usize,
        stream: TcpStream,
    },
    Push {
        conn_id: u64,
        runner: u32,
        part: usize,
        member: u32,
        cycle: u32,
        range_offset: u64,
        payload: Vec<f64>,
    },
    Heartbeat {
        runner: u32,
    },
    Closed {
        conn_id: u64,
        runner: u32,
        reason: FailureReason,
    },
    Assign {
        runner: u32,
        member: u32,
        cycle: u32,
        nsteps: u32,
    },
    Stop {
        runner: u32,
    },
    Revoke {
        runner: u32,
    },
    /// Reply with the background slice of every member.
    Collect(Sender<Slices>),
    /// Install analysis slices; backgrounds start as copies.
    Load(Slices),
    DropMember(u32),
    Shutdown,
}

struct Expectation {
    member: u32,
    cycle: u32,
    parts_seen: Vec<bool>,
}

struct Connection {
    id: u64,
    stream: TcpStream,
}

pub(crate) struct Shard {
    index: usize,
    range: Range<usize>,
    map: Arc<RedistributionMap>,
    conns: HashMap<(u32, usize), Connection>,
    expected: HashMap<u32, Expectation>,
    analysis: BTreeMap<u32, Vec<f64>>,
    background: BTreeMap<u32, Vec<f64>>,
    coord: Sender<CoordEvent>,
}

impl Shard {
    pub(crate) fn new(index: usize, map: Arc<RedistributionMap>, coord: Sender<CoordEvent>) -> Self {
        Self {
            index,
            range: map.shard_range(index),
            map,
            conns: HashMap::new(),
            expected: HashMap::new(),
            analysis: BTreeMap::new(),
            background: BTreeMap::new(),
            coord,
        }
    }

    pub(crate) fn run(mut self, inbox: Receiver<ShardMsg>) {
        while let Ok(msg) = inbox.recv() {
            if !self.handle(msg) {
                break;
            }
        }
        for (_, c) in self.conns.drain() {
            let _ = c.stream.shutdown(Shutdown::Both);
        }
    }

    fn forward(&self, ev: CoordEvent) {
        let _ = self.coord.send(ev);
    }

    fn fail(&mut self, runner: u32, reason: FailureReason) {
        self.forward(CoordEvent::Lost { runner, reason });
    }

    fn handle(&mut self, msg: ShardMsg) -> bool {
        match msg {
            ShardMsg::Hello {
                conn_id,
                runner,
                part,
                stream,
            } => {
                if self.conns.contains_key(&(runner, part)) {
                    let _ = stream.shutdown(Shutdown::Both);
                    self.fail(runner, FailureReason::Protocol(format!("second connection for part {part}")));
                } else {
                    self.conns.insert((runner, part), Connection { id: conn_id, stream });
                    self.forward(CoordEvent::Connected {
                        runner,
                        part,
                        shard: self.index,
                    });
                }
            }
            ShardMsg::Push {
                conn_id,
                runner,
                part,
                member,
                cycle,
                range_offset,
                payload,
            } => self.on_push(conn_id, runner, part, member, cycle, range_offset, payload),
            ShardMsg::Heartbeat { runner } => self.forward(CoordEvent::Heartbeat { runner }),
            ShardMsg::Closed {
                conn_id,
                runner,
                reason,
            } => {
                let current = self.conns.iter().find(|(_, c)| c.id == conn_id).map(|(k, _)| *k);
                if let Some(key) = current {
                    self.conns.remove(&key);
                    self.fail(runner, reason);
                }
            }
            ShardMsg::Assign {
                runner,
                member,
                cycle,
                nsteps,
            } => self.on_assign(runner, member, cycle, nsteps),
            ShardMsg::Stop { runner } => {
                self.expected.remove(&runner);
                for part in 0..self.map.runner_parts() {
                    if let Some(c) = self.conns.get_mut(&(runner, part)) {
                        let _ = write_message(&mut c.stream, &WireMessage::Stop);
                    }
                }
            }
            ShardMsg::Revoke { runner } => {
                self.expected.remove(&runner);
                for part in 0..self.map.runner_parts() {
                    if let Some(c) = self.conns.remove(&(runner, part)) {
                        let _ = c.stream.shutdown(Shutdown::Both);
                    }
                }
            }
            ShardMsg::Collect(reply) => {
                let slices = self
                    .analysis
                    .keys()
                    .map(|m| (*m, self.background[m].clone()))
                    .collect();
                let _ = reply.send(slices);
            }
            ShardMsg::Load(slices) => {
                for (member, slice) in slices {
                    debug_assert_eq!(slice.len(), self.range.len());
                    self.background.insert(member, slice.clone());
                    self.analysis.insert(member, slice);
                }
            }
            ShardMsg::DropMember(member) => {
                self.analysis.remove(&member);
                self.background.remove(&member);
            }
            ShardMsg::Shutdown => return false,
        }
        true
    }

    #[allow(clippy::too_many_arguments)]
    fn on_push(
        &mut self,
        conn_id: u64,
        runner: u32,
        part: usize,
        member: u32,
        cycle: u32,
        range_offset: u64,
        payload: Vec<f64>,
    ) {
        if self.conns.get(&(runner, part)).map(|c| c.id) != Some(conn_id) {
            return;
        }
        let transfer = self.map.transfer(part, self.index);
        if range_offset as usize != transfer.start || payload.len() != transfer.len() {
            self.fail(
                runner,
                FailureReason::Protocol(format!(
                    "part {part} pushed range at {range_offset} of length {}, expected {transfer:?}",
                    payload.len()
                )),
            );
            return;
        }
        if member == NO_MEMBER {
            self.forward(CoordEvent::Sentinel {
                runner,
                part,
                shard: self.index,
            });
            return;
        }
        let Some(exp) = self.expected.get_mut(&runner) else {
            log::debug!("shard {}: discarding unexpected part of member {member} from runner {runner}", self.index);
            return;
        };
        if exp.member != member || exp.cycle != cycle {
            log::debug!("shard {}: discarding stale part of member {member} cycle {cycle} from runner {runner}", self.index);
            return;
        }
        if std::mem::replace(&mut exp.parts_seen[part], true) {
            self.fail(runner, FailureReason::Protocol(format!("duplicate part {part} of member {member}")));
            return;
        }
        if exp.parts_seen.iter().all(|&s| s) {
            self.expected.remove(&runner);
        }
        let local = self.local(&transfer);
        if let Some(buf) = self.background.get_mut(&member) {
            buf[local].copy_from_slice(&payload);
        }
        self.forward(CoordEvent::Part {
            runner,
            part,
            shard: self.index,
            member,
            cycle,
        });
    }

    /// `transfer` in shard-local indices; empty transfers may lie outside the shard.
    fn local(&self, transfer: &Range<usize>) -> Range<usize> {
        if transfer.is_empty() {
            return 0..0;
        }
        transfer.start - self.range.start..transfer.end - self.range.start
    }

    fn on_assign(&mut self, runner: u32, member: u32, cycle: u32, nsteps: u32) {
        let parts = self.map.runner_parts();
        self.expected.insert(
            runner,
            Expectation {
                member,
                cycle,
                parts_seen: vec![false; parts],
            },
        );
        let Some(state) = self.analysis.get(&member) else {
            log::error!("shard {}: no analysis state for member {member}", self.index);
            return;
        };
        let mut broken = false;
        for part in 0..parts {
            let transfer = self.map.transfer(part, self.index);
            let msg = WireMessage::Assign {
                member_id: member,
                cycle,
                nsteps,
                range_offset: transfer.start as u64,
                payload: state[self.local(&transfer)].to_vec(),
            };
            match self.conns.get_mut(&(runner, part)) {
                Some(c) => {
                    if let Err(e) = write_message(&mut c.stream, &msg) {
                        log::debug!("shard {}: assign to runner {runner} failed: {e}", self.index);
                        broken = true;
                    }
                }
                None => broken = true,
            }
        }
        if broken {
            self.fail(runner, FailureReason::Disconnected);
        }
    }
}

/// What every connection reader needs to validate a `RUNNER_HELLO`.
pub(crate) struct HelloContext {
    pub shard: usize,
    pub endpoints: Vec<String>,
    pub n_dynamic: usize,
    pub n_assimilated: usize,
    pub map: Arc<RedistributionMap>,
    pub hello_timeout: Duration,
}

/// Accepts connections until `shutdown` is set, one reader thread each.
pub(crate) fn accept_loop(
    listener: TcpListener,
    ctx: Arc<HelloContext>,
    inbox: Sender<ShardMsg>,
    shutdown: Arc<AtomicBool>,
    next_conn: Arc<AtomicU64>,
) {
    if let Err(e) = listener.set_nonblocking(true) {
        log::error!("shard {}: cannot poll listener: {e}", ctx.shard);
        return;
    }
    while !shutdown.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                let id = next_conn.fetch_add(1, Ordering::Relaxed);
                let ctx = Arc::clone(&ctx);
                let inbox = inbox.clone();
                thread::spawn(move || serve_connection(stream, id, &ctx, inbox));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => {
                log::warn!("shard {}: accept failed: {e}", ctx.shard);
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

fn serve_connection(stream: TcpStream, conn_id: u64, ctx: &HelloContext, inbox: Sender<ShardMsg>) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(ctx.hello_timeout));
    let Ok(read_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(read_half);
    let mut writer = stream;

    let (runner, part, parts, n_local) = match read_message(&mut reader) {
        Ok(Some(WireMessage::RunnerHello {
            runner_id,
            part_index,
            parts,
            n_dynamic,
        })) => (runner_id, part_index as usize, parts as usize, n_dynamic as usize),
        Ok(Some(other)) => {
            log::warn!("shard {}: expected RUNNER_HELLO, got {}", ctx.shard, other.kind());
            return;
        }
        Ok(None) => return,
        Err(e) => {
            log::warn!("shard {}: bad hello: {e}", ctx.shard);
            return;
        }
    };
    let ack = WireMessage::HelloAck {
        shard_endpoints: ctx.endpoints.clone(),
        n_dynamic: ctx.n_dynamic as u64,
        n_assimilated: ctx.n_assimilated as u64,
    };
    if write_message(&mut writer, &ack).is_err() {
        return;
    }
    if parts != ctx.map.runner_parts() || part >= parts || n_local != ctx.map.part_range(part).len() {
        log::warn!(
            "shard {}: runner {runner} part {part}/{parts} with {n_local} values does not match the server layout",
            ctx.shard
        );
        return;
    }
    let _ = writer.set_read_timeout(None);
    let _ = reader.get_ref().set_read_timeout(None);
    if inbox
        .send(ShardMsg::Hello {
            conn_id,
            runner,
            part,
            stream: writer,
        })
        .is_err()
    {
        return;
    }

    let reason = loop {
        match read_message(&mut reader) {
            Ok(Some(WireMessage::StatePush {
                member_id,
                cycle,
                part_index,
                range_offset,
                payload,
            })) => {
                if part_index as usize != part {
                    break FailureReason::Protocol(format!("push for part {part_index} on part {part}'s connection"));
                }
                let msg = ShardMsg::Push {
                    conn_id,
                    runner,
                    part,
                    member: member_id,
                    cycle,
                    range_offset,
                    payload,
                };
                if inbox.send(msg).is_err() {
                    return;
                }
            }
            Ok(Some(WireMessage::Heartbeat { .. })) => {
                if inbox.send(ShardMsg::Heartbeat { runner }).is_err() {
                    return;
                }
            }
            Ok(Some(other)) => break FailureReason::Protocol(format!("unexpected {} from runner", other.kind())),
            Ok(None) => break FailureReason::Disconnected,
            Err(crate::Error::Protocol(m)) => break FailureReason::Protocol(m),
            Err(_) => break FailureReason::Disconnected,
        }
    };
    let _ = inbox.send(ShardMsg::Closed {
        conn_id,
        runner,
        reason,
    });
}
