//! The assimilation server: S shards that hold state slices and talk to
//! runners, one coordinator that schedules, updates and checkpoints.

mod coordinator;
mod shard;

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

pub use coordinator::{
    Action, Coordinator, CoordinatorParams, FailureReason, MemberRecord, MemberStatus, Phase,
};

use crate::checkpoint::{ArtifactKind, ServerCheckpoint};
use crate::config::StudyConfig;
use crate::da::{enkf_update, EnsembleMatrix, Perturbation};
use crate::error::{Error, Result};
use crate::metrics::{now_ms, MetricRecord, MetricsWriter};
use crate::models::{init_ensemble, perturbed};
use crate::observations::ObservationSource;
use crate::partition::{make_redistribution_map, DynamicState, RedistributionMap, StateLayout};
use crate::protocol::{read_message, write_message, WireMessage, SERVER_SENDER_ID};
use crate::rng::StreamDomain;
use shard::{accept_loop, CoordEvent, HelloContext, Shard, ShardMsg, Slices};

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Launcher endpoint to heartbeat to and report runner failures.
    pub launcher: Option<SocketAddr>,
    /// Resume from the study checkpoint if one exists.
    pub restore: bool,
}

pub struct ServerHandle {
    /// Shard 0 doubles as the registry runners connect to first.
    pub registry: SocketAddr,
    pub shard_endpoints: Vec<SocketAddr>,
    join: JoinHandle<Result<ServerCheckpoint>>,
}

impl ServerHandle {
    /// Waits for the study to end and returns the final ensemble.
    pub fn join(self) -> Result<ServerCheckpoint> {
        self.join
            .join()
            .unwrap_or_else(|_| Err(Error::Connection("server thread panicked".into())))
    }
}

/// Binds the shard listeners, publishes the registry endpoint in the work
/// directory and runs the study on a background thread.
pub fn start(cfg: StudyConfig, opts: ServerOptions) -> Result<ServerHandle> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.work_dir)?;
    let layout = cfg.layout()?;
    let map = Arc::new(make_redistribution_map(&layout, cfg.runner_parts, cfg.server_shards)?);

    let mut listeners = Vec::with_capacity(cfg.server_shards);
    for s in 0..cfg.server_shards {
        let port = if cfg.base_port == 0 { 0 } else { cfg.base_port + s as u16 };
        let l = TcpListener::bind((cfg.host.as_str(), port)).map_err(|e| {
            Error::Connection(format!("cannot listen on {}:{port}: {e}", cfg.host))
        })?;
        listeners.push(l);
    }
    let endpoints: Vec<SocketAddr> = listeners
        .iter()
        .map(|l| l.local_addr())
        .collect::<std::io::Result<_>>()?;
    write_endpoint_file(&cfg, endpoints[0])?;

    let launcher = match opts.launcher {
        Some(addr) => Some(LauncherLink::connect(addr, cfg.connect_timeout_ms)?),
        None => None,
    };

    let registry = endpoints[0];
    let shard_endpoints = endpoints.clone();
    let join = thread::Builder::new()
        .name("coordinator".into())
        .spawn(move || {
            let result = run(cfg, opts, layout, map, listeners, endpoints, launcher);
            if let Err(e) = &result {
                log::error!("server stopped: {e}");
            }
            result
        })?;
    Ok(ServerHandle {
        registry,
        shard_endpoints,
        join,
    })
}

fn write_endpoint_file(cfg: &StudyConfig, registry: SocketAddr) -> Result<()> {
    let path = cfg.endpoint_file();
    let tmp = path.with_extension("endpoint.tmp");
    fs::write(&tmp, format!("{registry}\n"))?;
    fs::rename(&tmp, &path)?;
    Ok(())
}

/// Reads the registry endpoint a server published in `work_dir`.
pub fn read_endpoint_file(cfg: &StudyConfig) -> Result<SocketAddr> {
    let path = cfg.endpoint_file();
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Connection(format!("cannot read {}: {e}", path.display())))?;
    text.trim()
        .parse()
        .map_err(|e| Error::Connection(format!("bad endpoint in {}: {e}", path.display())))
}

struct LauncherLink {
    writer: Arc<Mutex<TcpStream>>,
    reader: TcpStream,
}

impl LauncherLink {
    fn connect(addr: SocketAddr, timeout_ms: u64) -> Result<Self> {
        let stream = TcpStream::connect_timeout(&addr, Duration::from_millis(timeout_ms))
            .map_err(|e| Error::Connection(format!("cannot reach launcher at {addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        Ok(Self {
            reader: stream.try_clone()?,
            writer: Arc::new(Mutex::new(stream)),
        })
    }
}

#[derive(Clone)]
struct LauncherSender(Option<Arc<Mutex<TcpStream>>>);

impl LauncherSender {
    fn send(&self, msg: &WireMessage) {
        if let Some(w) = &self.0 {
            let mut w = w.lock().unwrap_or_else(|p| p.into_inner());
            if let Err(e) = write_message(&mut *w, msg) {
                log::warn!("cannot reach launcher: {e}");
            }
        }
    }
}

struct Runtime {
    cfg: StudyConfig,
    layout: StateLayout,
    map: Arc<RedistributionMap>,
    coord: Coordinator,
    shards: Vec<Sender<ShardMsg>>,
    analysis: BTreeMap<u32, Vec<f64>>,
    observations: ObservationSource,
    metrics: MetricsWriter,
    launcher: LauncherSender,
}

fn run(
    cfg: StudyConfig,
    opts: ServerOptions,
    layout: StateLayout,
    map: Arc<RedistributionMap>,
    listeners: Vec<TcpListener>,
    endpoints: Vec<SocketAddr>,
    launcher: Option<LauncherLink>,
) -> Result<ServerCheckpoint> {
    let metrics = MetricsWriter::open(&cfg.metrics_path())?;
    let (start_cycle, states) = initial_states(&cfg, &opts, &metrics)?;

    let (coord_tx, coord_rx) = mpsc::channel::<CoordEvent>();
    let shutdown = Arc::new(AtomicBool::new(false));
    let stop_heartbeat = Arc::new(AtomicBool::new(false));

    let launcher_tx = match launcher {
        Some(link) => {
            spawn_launcher_threads(&cfg, link.reader, Arc::clone(&link.writer), coord_tx.clone(), Arc::clone(&stop_heartbeat));
            LauncherSender(Some(link.writer))
        }
        None => LauncherSender(None),
    };

    let next_conn = Arc::new(AtomicU64::new(1));
    let endpoint_strings: Vec<String> = endpoints.iter().map(|e| e.to_string()).collect();
    let mut shards = Vec::with_capacity(listeners.len());
    let mut shard_threads = Vec::new();
    for (s, listener) in listeners.into_iter().enumerate() {
        let (tx, rx) = mpsc::channel::<ShardMsg>();
        let worker = Shard::new(s, Arc::clone(&map), coord_tx.clone());
        shard_threads.push(thread::Builder::new().name(format!("shard-{s}")).spawn(move || worker.run(rx))?);
        let ctx = Arc::new(HelloContext {
            shard: s,
            endpoints: endpoint_strings.clone(),
            n_dynamic: layout.n_dynamic(),
            n_assimilated: layout.n_assimilated(),
            map: Arc::clone(&map),
            hello_timeout: Duration::from_millis(cfg.connect_timeout_ms),
        });
        let (inbox, stop, ids) = (tx.clone(), Arc::clone(&shutdown), Arc::clone(&next_conn));
        thread::Builder::new()
            .name(format!("accept-{s}"))
            .spawn(move || accept_loop(listener, ctx, inbox, stop, ids))?;
        shards.push(tx);
    }
    drop(coord_tx);

    let ids: Vec<u32> = states.iter().map(|s| s.member_id).collect();
    let params = CoordinatorParams {
        parts: cfg.runner_parts,
        shards: cfg.server_shards,
        nsteps: cfg.nsteps,
        cycles: cfg.cycles,
        runner_timeout_ms: cfg.runner_timeout_ms,
        max_member_restarts: cfg.max_member_restarts,
        policy: cfg.member_failure_policy,
    };
    let mut rt = Runtime {
        observations: ObservationSource::from_config(&cfg)?,
        coord: Coordinator::new(params, start_cycle, &ids, now_ms()),
        analysis: states.into_iter().map(|s| (s.member_id, s.values)).collect(),
        layout,
        map,
        shards,
        metrics,
        launcher: launcher_tx,
        cfg,
    };
    rt.load_all()?;

    let result = rt.event_loop(&coord_rx);
    if result.is_ok() {
        rt.drain_runners(&coord_rx);
    }
    stop_heartbeat.store(true, Ordering::Relaxed);
    shutdown.store(true, Ordering::Relaxed);
    for s in &rt.shards {
        let _ = s.send(ShardMsg::Shutdown);
    }
    for t in shard_threads {
        let _ = t.join();
    }
    result
}

/// Fresh ensemble (checkpointed at cycle 0) or the restored checkpoint.
fn initial_states(cfg: &StudyConfig, opts: &ServerOptions, metrics: &MetricsWriter) -> Result<(u32, Vec<DynamicState>)> {
    let path = cfg.checkpoint_path();
    if opts.restore && path.exists() {
        let ckpt = ServerCheckpoint::restore(&path, cfg)?;
        log::info!("restored {} members at cycle {}", ckpt.members.len(), ckpt.cycle);
        metrics.record(&MetricRecord::Restore {
            cycle: ckpt.cycle,
            t_ms: now_ms(),
        });
        return Ok((ckpt.cycle, ckpt.members));
    }
    if opts.restore {
        log::warn!("no checkpoint at {}, starting from scratch", path.display());
    }
    let model = cfg.model_spec().build()?;
    let mut states = init_ensemble(model.as_ref(), cfg.members, cfg.noise_amplitude, cfg.seed)?;
    if let Some(p) = cfg.poison_member {
        states[p as usize].values.iter_mut().for_each(|v| *v = f64::NAN);
    }
    write_checkpoint(cfg, ArtifactKind::Checkpoint, 0, &states, metrics)?;
    Ok((0, states))
}

fn write_checkpoint(
    cfg: &StudyConfig,
    kind: ArtifactKind,
    cycle: u32,
    states: &[DynamicState],
    metrics: &MetricsWriter,
) -> Result<ServerCheckpoint> {
    let t0 = Instant::now();
    let ckpt = ServerCheckpoint {
        kind,
        cycle,
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        n_dynamic: cfg.n_dynamic,
        n_assimilated: cfg.n_assimilated(),
        members: states.to_vec(),
    };
    let path = match kind {
        ArtifactKind::Checkpoint => cfg.checkpoint_path(),
        ArtifactKind::FinalEnsemble => cfg.final_ensemble_path(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ckpt.write_atomic(&path)?;
    if kind == ArtifactKind::Checkpoint {
        metrics.record(&MetricRecord::Checkpoint {
            cycle,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            t_ms: now_ms(),
        });
    }
    Ok(ckpt)
}

fn spawn_launcher_threads(
    cfg: &StudyConfig,
    reader: TcpStream,
    writer: Arc<Mutex<TcpStream>>,
    coord: Sender<CoordEvent>,
    stop: Arc<AtomicBool>,
) {
    let period = Duration::from_millis(cfg.server_heartbeat_period_ms());
    let beat = LauncherSender(Some(writer));
    // first beat right away so the launcher can start runners
    beat.send(&WireMessage::Heartbeat {
        sender_id: SERVER_SENDER_ID,
        timestamp_ms: now_ms(),
    });
    thread::spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            thread::sleep(period);
            beat.send(&WireMessage::Heartbeat {
                sender_id: SERVER_SENDER_ID,
                timestamp_ms: now_ms(),
            });
        }
    });
    thread::spawn(move || {
        let mut reader = BufReader::new(reader);
        loop {
            match read_message(&mut reader) {
                Ok(Some(WireMessage::RunnerGone { runner_id })) => {
                    if coord.send(CoordEvent::Retire { runner: runner_id }).is_err() {
                        return;
                    }
                }
                Ok(Some(other)) => log::warn!("ignoring {} from launcher", other.kind()),
                Ok(None) | Err(_) => {
                    let _ = coord.send(CoordEvent::LauncherGone);
                    return;
                }
            }
        }
    });
}

impl Runtime {
    fn scan_period(&self) -> Duration {
        Duration::from_millis((self.cfg.runner_timeout_ms / 10).clamp(5, 100))
    }

    fn event_loop(&mut self, inbox: &Receiver<CoordEvent>) -> Result<ServerCheckpoint> {
        if self.coord.is_finished() {
            return self.finish();
        }
        let period = self.scan_period();
        let mut next_scan = Instant::now() + period;
        loop {
            let wait = next_scan.saturating_duration_since(Instant::now());
            let actions = match inbox.recv_timeout(wait) {
                Ok(ev) => self.on_event(ev)?,
                Err(RecvTimeoutError::Timeout) => Vec::new(),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Connection("all shards stopped".into()))
                }
            };
            self.execute(actions)?;
            if Instant::now() >= next_scan {
                let expired = self.coord.timeout_scan(now_ms());
                self.execute(expired)?;
                next_scan = Instant::now() + period;
            }
            if self.coord.is_finished() {
                return self.finish();
            }
        }
    }

    fn on_event(&mut self, ev: CoordEvent) -> Result<Vec<Action>> {
        let now = now_ms();
        Ok(match ev {
            CoordEvent::Connected { runner, part, shard } => self.coord.connection_opened(runner, part, shard, now),
            CoordEvent::Sentinel { runner, part, shard } => self.coord.sentinel_received(runner, part, shard, now),
            CoordEvent::Part {
                runner,
                part,
                shard,
                member,
                cycle,
            } => self.coord.part_received(runner, part, shard, member, cycle, now),
            CoordEvent::Heartbeat { runner } => {
                self.coord.heartbeat(runner, now);
                Vec::new()
            }
            CoordEvent::Lost { runner, reason } => self.coord.runner_lost(runner, reason, now),
            CoordEvent::Retire { runner } => self.coord.retire(runner),
            CoordEvent::LauncherGone => {
                return Err(Error::Connection("launcher connection lost".into()));
            }
        })
    }

    fn broadcast(&self, msg: impl Fn() -> ShardMsg) -> Result<()> {
        for (s, tx) in self.shards.iter().enumerate() {
            tx.send(msg())
                .map_err(|_| Error::Connection(format!("shard {s} stopped")))?;
        }
        Ok(())
    }

    fn execute(&mut self, actions: Vec<Action>) -> Result<()> {
        let mut work: VecDeque<Action> = actions.into();
        while let Some(action) = work.pop_front() {
            let cycle = self.coord.cycle();
            match action {
                Action::Assign {
                    runner,
                    member,
                    cycle,
                    nsteps,
                } => self.broadcast(|| ShardMsg::Assign {
                    runner,
                    member,
                    cycle,
                    nsteps,
                })?,
                Action::Stop { runner } => self.broadcast(|| ShardMsg::Stop { runner })?,
                Action::Revoke { runner } => self.broadcast(|| ShardMsg::Revoke { runner })?,
                Action::RunnerJoined { runner } => {
                    log::info!("runner {runner} joined");
                    self.metrics.record(&MetricRecord::RunnerJoined { runner, t_ms: now_ms() });
                }
                Action::RunnerFailed { runner, member, reason } => {
                    log::warn!("runner {runner} failed ({reason}), member {member:?} rescheduled");
                    self.metrics.record(&MetricRecord::RunnerFailed {
                        cycle,
                        runner,
                        member,
                        reason: reason.to_string(),
                        t_ms: now_ms(),
                    });
                    self.launcher.send(&WireMessage::RunnerGone { runner_id: runner });
                }
                Action::RunnerRetired { runner } => {
                    log::info!("runner {runner} retired");
                    self.metrics.record(&MetricRecord::RunnerRetired { runner, t_ms: now_ms() });
                }
                Action::MemberDone {
                    member,
                    runner,
                    start_ms,
                    end_ms,
                } => self.metrics.record(&MetricRecord::Member {
                    cycle,
                    member,
                    runner,
                    start_ms,
                    wall_ms: end_ms.saturating_sub(start_ms) as f64,
                    t_ms: end_ms,
                }),
                Action::DropMember { member, restarts } => {
                    log::warn!("member {member} failed {restarts} times, dropping it from the ensemble");
                    self.analysis.remove(&member);
                    self.broadcast(|| ShardMsg::DropMember(member))?;
                    self.metrics.record(&MetricRecord::MemberDropped {
                        cycle,
                        member,
                        restarts,
                        t_ms: now_ms(),
                    });
                }
                Action::ReplaceMember { member, restarts } => {
                    log::warn!("member {member} failed {restarts} times, replacing it");
                    let state = self.replacement_state(member, cycle);
                    self.analysis.insert(member, state);
                    self.load_members(&[member])?;
                    self.metrics.record(&MetricRecord::MemberReplaced {
                        cycle,
                        member,
                        restarts,
                        t_ms: now_ms(),
                    });
                }
                Action::CycleComplete {
                    cycle,
                    wall_ms,
                    busy_ms,
                    members_propagated,
                } => {
                    self.metrics.record(&MetricRecord::Propagation {
                        cycle,
                        wall_ms,
                        runners: busy_ms.len(),
                        busy_ms: busy_ms.into_iter().map(|(r, ms)| (r.to_string(), ms)).collect(),
                        members_propagated,
                        t_ms: now_ms(),
                    });
                    self.update(cycle)?;
                    work.extend(self.coord.complete_cycle(now_ms()));
                }
            }
        }
        Ok(())
    }

    /// Mean of the other members plus uniform noise keyed on the member and
    /// cycle, so a replacement is the same whichever runner triggered it.
    fn replacement_state(&self, member: u32, cycle: u32) -> Vec<f64> {
        let n = self.layout.n_dynamic();
        let others: Vec<&Vec<f64>> = self
            .analysis
            .iter()
            .filter(|(id, s)| **id != member && s.iter().all(|v| v.is_finite()))
            .map(|(_, s)| s)
            .collect();
        let mut mean = vec![0.0; n];
        for s in &others {
            for (m, v) in mean.iter_mut().zip(s.iter()) {
                *m += v;
            }
        }
        let count = others.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        perturbed(
            &mean,
            self.cfg.noise_amplitude,
            StreamDomain::MemberReplacement,
            self.cfg.seed,
            cycle as u64,
            member as u64,
        )
    }

    fn slices_for(&self, shard: usize, members: &[u32]) -> Slices {
        let range = self.map.shard_range(shard);
        members
            .iter()
            .map(|m| (*m, self.analysis[m][range.clone()].to_vec()))
            .collect()
    }

    fn load_members(&self, members: &[u32]) -> Result<()> {
        for (s, tx) in self.shards.iter().enumerate() {
            tx.send(ShardMsg::Load(self.slices_for(s, members)))
                .map_err(|_| Error::Connection(format!("shard {s} stopped")))?;
        }
        Ok(())
    }

    fn load_all(&self) -> Result<()> {
        let ids: Vec<u32> = self.analysis.keys().copied().collect();
        self.load_members(&ids)
    }

    fn gather_background(&self) -> Result<BTreeMap<u32, Vec<f64>>> {
        let n = self.layout.n_dynamic();
        let mut full: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for (s, tx) in self.shards.iter().enumerate() {
            let (reply_tx, reply_rx) = mpsc::channel();
            tx.send(ShardMsg::Collect(reply_tx))
                .map_err(|_| Error::Connection(format!("shard {s} stopped")))?;
            let slices = reply_rx
                .recv()
                .map_err(|_| Error::Connection(format!("shard {s} stopped")))?;
            let range = self.map.shard_range(s);
            for (member, slice) in slices {
                full.entry(member).or_insert_with(|| vec![0.0; n])[range.clone()].copy_from_slice(&slice);
            }
        }
        Ok(full)
    }

    /// EnKF update of the assimilated prefixes; the rest of each dynamic
    /// state carries over from the background.
    fn update(&mut self, cycle: u32) -> Result<()> {
        let background = self.gather_background()?;
        let obs = self.observations.for_cycle(cycle)?;
        let n_assim = self.layout.n_assimilated();
        let t0 = Instant::now();
        let ids: Vec<u32> = background.keys().copied().collect();
        let columns: Vec<Vec<f64>> = background.values().map(|s| s[..n_assim].to_vec()).collect();
        let ensemble = EnsembleMatrix::with_member_ids(ids, columns)?;
        let perturbation = if self.cfg.perturb_observations {
            Perturbation::Stochastic
        } else {
            Perturbation::Disabled
        };
        let updated = enkf_update(&ensemble, &obs, cycle, self.cfg.seed, perturbation)?;
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        self.metrics.record(&MetricRecord::Update {
            cycle,
            members: updated.members(),
            observations: obs.len(),
            wall_ms,
            t_ms: now_ms(),
        });

        let mut analysis = background;
        for (member, prefix) in updated.into_columns() {
            analysis.get_mut(&member).expect("updated member has a background")[..n_assim]
                .copy_from_slice(&prefix);
        }
        self.analysis = analysis;
        self.load_all()?;
        write_checkpoint(&self.cfg, ArtifactKind::Checkpoint, cycle + 1, &self.states(), &self.metrics)?;
        self.launcher.send(&WireMessage::CycleDone { cycle });
        log::info!("cycle {cycle} done ({} members, update {wall_ms:.1} ms)", self.analysis.len());
        Ok(())
    }

    fn states(&self) -> Vec<DynamicState> {
        self.analysis
            .iter()
            .map(|(&member_id, values)| DynamicState {
                member_id,
                values: values.clone(),
            })
            .collect()
    }

    fn finish(&mut self) -> Result<ServerCheckpoint> {
        let final_ckpt = write_checkpoint(
            &self.cfg,
            ArtifactKind::FinalEnsemble,
            self.coord.cycle(),
            &self.states(),
            &self.metrics,
        )?;
        let hash = final_ckpt.ensemble_hash();
        log::info!("study done after {} cycles, ensemble hash {hash}", self.coord.cycle());
        self.metrics.record(&MetricRecord::StudyDone {
            cycles: self.coord.cycle(),
            members: final_ckpt.members.len(),
            ensemble_hash: hash,
            t_ms: now_ms(),
        });
        self.launcher.send(&WireMessage::StudyDone);
        Ok(final_ckpt)
    }

    /// Gives stopped runners a moment to close their connections first, so
    /// the STOP frames are not lost to a reset.
    fn drain_runners(&mut self, inbox: &Receiver<CoordEvent>) {
        let deadline = Instant::now() + Duration::from_secs(2);
        while Instant::now() < deadline {
            match inbox.recv_timeout(Duration::from_millis(20)) {
                Ok(CoordEvent::Lost { runner, .. }) => {
                    self.coord.runner_lost(runner, FailureReason::Disconnected, now_ms());
                }
                Ok(CoordEvent::Connected { runner, .. }) => {
                    // latecomers get a STOP too
                    let _ = self.broadcast(|| ShardMsg::Stop { runner });
                }
                Ok(_) => {}
                Err(RecvTimeoutError::Timeout) => {
                    if self.coord.active_runners().is_empty() {
                        return;
                    }
                }
                Err(RecvTimeoutError::Disconnected) => return,
            }
        }
    }
}
