//! Supervisor for one study: starts the server, keeps the runner fleet at its
//! target size, restores the server from its checkpoint when it dies and
//! gives up once the restart budget is spent.
//!
//! The launcher never talks to runners. It sees their process exits and the
//! `RUNNER_GONE` reports of the server, nothing else.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread;
use std::time::{Duration, Instant};

use crate::checkpoint::ServerCheckpoint;
use crate::config::StudyConfig;
use crate::error::{Error, Result};
use crate::metrics::{MetricRecord, MetricsWriter};
use crate::protocol::{read_message, write_message, WireMessage};
use crate::server::read_endpoint_file;

/// Exit code of a server or runner that rejected its configuration.
pub const EXIT_CONFIG: i32 = 1;

const TICK: Duration = Duration::from_millis(20);
const CONTROL_POLL: Duration = Duration::from_secs(1);
/// How long the server may take to exit after `STUDY_DONE`.
const SHUTDOWN_GRACE: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Role {
    Server { restore: bool, launcher: SocketAddr },
    Runner { id: u32, registry: SocketAddr },
}

/// A spawned process. `None` exit code means killed by a signal.
pub trait Job {
    fn try_exit(&mut self) -> io::Result<Option<Option<i32>>>;
    fn kill(&mut self);
}

/// Where processes come from. `LocalProcesses` forks them on this host; a
/// batch-scheduler backend would submit jobs instead.
pub trait ProcessManager {
    fn spawn(&mut self, role: &Role) -> Result<Box<dyn Job>>;
}

impl Job for Child {
    fn try_exit(&mut self) -> io::Result<Option<Option<i32>>> {
        Ok(self.try_wait()?.map(|s| s.code()))
    }

    fn kill(&mut self) {
        let _ = Child::kill(self);
        let _ = self.wait();
    }
}

/// Runs `exe server ...` and `exe runner ...`, output going to per-process
/// log files under `log_dir`.
pub struct LocalProcesses {
    exe: PathBuf,
    config: PathBuf,
    log_dir: PathBuf,
    server_spawns: u32,
}

impl LocalProcesses {
    pub fn new(exe: PathBuf, config: PathBuf, log_dir: PathBuf) -> Self {
        Self {
            exe,
            config,
            log_dir,
            server_spawns: 0,
        }
    }

    fn log_file(&self, name: &str) -> Result<(Stdio, Stdio)> {
        fs::create_dir_all(&self.log_dir)?;
        let f = File::create(self.log_dir.join(name))?;
        Ok((Stdio::from(f.try_clone()?), Stdio::from(f)))
    }
}

impl ProcessManager for LocalProcesses {
    fn spawn(&mut self, role: &Role) -> Result<Box<dyn Job>> {
        let mut cmd = Command::new(&self.exe);
        let log = match role {
            Role::Server { restore, launcher } => {
                cmd.arg("server")
                    .arg("--config")
                    .arg(&self.config)
                    .arg("--launcher")
                    .arg(launcher.to_string());
                if *restore {
                    cmd.arg("--restore");
                }
                self.server_spawns += 1;
                format!("server-{}.log", self.server_spawns)
            }
            Role::Runner { id, registry } => {
                cmd.arg("runner")
                    .arg("--config")
                    .arg(&self.config)
                    .arg("--endpoint")
                    .arg(registry.to_string())
                    .arg("--runner-id")
                    .arg(id.to_string());
                format!("runner-{id}.log")
            }
        };
        let (out, err) = self.log_file(&log)?;
        let child = cmd
            .stdin(Stdio::null())
            .stdout(out)
            .stderr(err)
            .spawn()
            .map_err(|e| Error::Connection(format!("cannot start {}: {e}", self.exe.display())))?;
        Ok(Box::new(child))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutcome {
    pub ensemble_hash: String,
    pub final_ensemble: PathBuf,
    pub restarts: u32,
    pub server_restarts: u32,
}

/// Writes the effective configuration to `work_dir/study.toml` and runs the
/// study with processes of `exe`.
pub fn launch(cfg: &StudyConfig, exe: &Path) -> Result<StudyOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.work_dir)?;
    let config_path = cfg.work_dir.join("study.toml");
    fs::write(&config_path, cfg.to_toml())?;
    let procs = LocalProcesses::new(exe.to_path_buf(), config_path, cfg.work_dir.join("logs"));
    Launcher::new(cfg.clone(), Box::new(procs))?.run()
}

enum Event {
    Message(u32, WireMessage),
    LinkClosed(u32),
}

struct ServerProc {
    job: Box<dyn Job>,
    generation: u32,
    link: Option<TcpStream>,
    spawned: Instant,
    last_beat: Option<Instant>,
}

struct RunnerProc {
    job: Box<dyn Job>,
    retiring: bool,
}

enum Pending {
    KillRunners(usize),
}

pub struct Launcher {
    cfg: StudyConfig,
    procs: Box<dyn ProcessManager>,
    listener: TcpListener,
    addr: SocketAddr,
    events_tx: Sender<Event>,
    events_rx: Receiver<Event>,
    metrics: MetricsWriter,

    server: Option<ServerProc>,
    generation: u32,
    registry: Option<SocketAddr>,
    runners: BTreeMap<u32, RunnerProc>,
    next_runner_id: u32,
    target: usize,
    restarts: u32,
    server_restarts: u32,
    study_done: Option<Instant>,

    fired: HashSet<String>,
    pending: Vec<(Instant, Pending)>,
    control_value: Option<usize>,
    next_control_poll: Instant,
}

impl Launcher {
    pub fn new(cfg: StudyConfig, procs: Box<dyn ProcessManager>) -> Result<Self> {
        let listener = TcpListener::bind((cfg.host.as_str(), 0))
            .map_err(|e| Error::Connection(format!("launcher cannot listen on {}: {e}", cfg.host)))?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        // a fresh study starts a fresh event log
        let metrics_path = cfg.metrics_path();
        if metrics_path.exists() {
            fs::remove_file(&metrics_path)?;
        }
        let metrics = MetricsWriter::open(&metrics_path)?;
        let (events_tx, events_rx) = mpsc::channel();
        Ok(Self {
            target: cfg.runners,
            cfg,
            procs,
            listener,
            addr,
            events_tx,
            events_rx,
            metrics,
            server: None,
            generation: 0,
            registry: None,
            runners: BTreeMap::new(),
            next_runner_id: 1,
            restarts: 0,
            server_restarts: 0,
            study_done: None,
            fired: HashSet::new(),
            pending: Vec::new(),
            control_value: None,
            next_control_poll: Instant::now(),
        })
    }

    pub fn run(mut self) -> Result<StudyOutcome> {
        let result = self.supervise();
        self.teardown();
        match &result {
            Ok(o) => self.record("study_done", None, format!("hash {}", o.ensemble_hash)),
            Err(e) => self.record("abort", None, e.to_string()),
        }
        result
    }

    fn record(&self, event: &str, runner: Option<u32>, detail: impl Into<String>) {
        self.metrics.record(&MetricRecord::launcher(event, runner, detail));
    }

    fn supervise(&mut self) -> Result<StudyOutcome> {
        self.spawn_server(false)?;
        loop {
            self.accept_server_link()?;
            while let Ok(ev) = self.events_rx.try_recv() {
                self.on_event(ev)?;
            }
            if let Some(done_at) = self.study_done {
                if self.server_exited()? || done_at.elapsed() > SHUTDOWN_GRACE {
                    return self.outcome();
                }
            } else {
                self.check_server()?;
                self.check_runners()?;
                self.run_pending()?;
                self.poll_control_file()?;
            }
            thread::sleep(TICK);
        }
    }

    fn outcome(&self) -> Result<StudyOutcome> {
        let path = self.cfg.final_ensemble_path();
        let artifact = ServerCheckpoint::read(&path)?;
        Ok(StudyOutcome {
            ensemble_hash: artifact.ensemble_hash(),
            final_ensemble: path,
            restarts: self.restarts,
            server_restarts: self.server_restarts,
        })
    }

    fn spend_restart(&mut self, what: &str) -> Result<()> {
        if self.restarts >= self.cfg.max_restarts {
            return Err(Error::RestartBudget(format!(
                "all {} allowed restarts used (max_restarts), cannot recover from: {what}",
                self.cfg.max_restarts
            )));
        }
        self.restarts += 1;
        Ok(())
    }

    fn spawn_server(&mut self, restore: bool) -> Result<()> {
        self.generation += 1;
        self.registry = None;
        let job = self.procs.spawn(&Role::Server {
            restore,
            launcher: self.addr,
        })?;
        self.record("spawn_server", None, if restore { "restore" } else { "" });
        self.server = Some(ServerProc {
            job,
            generation: self.generation,
            link: None,
            spawned: Instant::now(),
            last_beat: None,
        });
        Ok(())
    }

    fn accept_server_link(&mut self) -> Result<()> {
        let Some(server) = self.server.as_mut() else { return Ok(()) };
        let stream = match self.listener.accept() {
            Ok((s, _)) => s,
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        if server.link.is_some() {
            log::warn!("ignoring a second server connection");
            return Ok(());
        }
        stream.set_nonblocking(false)?;
        let _ = stream.set_nodelay(true);
        let reader = stream.try_clone()?;
        server.link = Some(stream);
        let (generation, tx) = (server.generation, self.events_tx.clone());
        thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                match read_message(&mut reader) {
                    Ok(Some(msg)) => {
                        if tx.send(Event::Message(generation, msg)).is_err() {
                            return;
                        }
                    }
                    Ok(None) | Err(_) => {
                        let _ = tx.send(Event::LinkClosed(generation));
                        return;
                    }
                }
            }
        });
        Ok(())
    }

    fn on_event(&mut self, ev: Event) -> Result<()> {
        let current = self.server.as_ref().map(|s| s.generation);
        match ev {
            Event::Message(g, msg) if Some(g) == current => self.on_message(msg),
            Event::LinkClosed(g) if Some(g) == current && self.study_done.is_none() => {
                self.server_failed("server connection lost")
            }
            _ => Ok(()),
        }
    }

    fn on_message(&mut self, msg: WireMessage) -> Result<()> {
        match msg {
            WireMessage::Heartbeat { .. } => {
                let first = {
                    let server = self.server.as_mut().expect("message from a live server");
                    server.last_beat.replace(Instant::now()).is_none()
                };
                if first {
                    self.registry = Some(read_endpoint_file(&self.cfg)?);
                    self.top_up()?;
                }
            }
            WireMessage::CycleDone { cycle } => self.on_cycle_done(cycle)?,
            WireMessage::RunnerGone { runner_id } => {
                self.runner_failed(runner_id, "reported gone by the server")?;
            }
            WireMessage::StudyDone => {
                log::info!("study done");
                self.study_done = Some(Instant::now());
            }
            other => log::warn!("ignoring {} from server", other.kind()),
        }
        Ok(())
    }

    fn on_cycle_done(&mut self, cycle: u32) -> Result<()> {
        let next = cycle + 1;
        for (i, k) in self.cfg.kill_runners.clone().iter().enumerate() {
            if k.cycle == next && self.fired.insert(format!("kill-{i}")) {
                let at = Instant::now() + Duration::from_millis(self.cfg.kill_delay_ms);
                self.pending.push((at, Pending::KillRunners(k.count)));
            }
        }
        for (i, r) in self.cfg.resize.clone().iter().enumerate() {
            if r.cycle == next && self.fired.insert(format!("resize-{i}")) {
                self.resize(r.runners)?;
            }
        }
        if self.cfg.kill_server_after_cycle == Some(cycle) && self.fired.insert("kill-server".into()) {
            log::info!("killing the server after cycle {cycle}");
            self.record("kill_server", None, format!("after cycle {cycle}"));
            if let Some(s) = self.server.as_mut() {
                s.job.kill();
            }
        }
        Ok(())
    }

    fn run_pending(&mut self) -> Result<()> {
        let now = Instant::now();
        let (due, later): (Vec<_>, Vec<_>) = self.pending.drain(..).partition(|(at, _)| *at <= now);
        self.pending = later;
        for (_, action) in due {
            match action {
                Pending::KillRunners(count) => {
                    let victims: Vec<u32> = self
                        .runners
                        .iter()
                        .filter(|(_, r)| !r.retiring)
                        .map(|(id, _)| *id)
                        .take(count)
                        .collect();
                    for id in victims {
                        log::info!("killing runner {id}");
                        self.record("kill_runner", Some(id), "");
                        if let Some(r) = self.runners.get_mut(&id) {
                            r.job.kill();
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn server_exited(&mut self) -> Result<bool> {
        match self.server.as_mut() {
            Some(s) => Ok(s.job.try_exit()?.is_some()),
            None => Ok(true),
        }
    }

    fn check_server(&mut self) -> Result<()> {
        let Some(server) = self.server.as_mut() else { return Ok(()) };
        if let Some(code) = server.job.try_exit()? {
            if code == Some(EXIT_CONFIG) {
                return Err(Error::Config(
                    "the server rejected the configuration, see its log".into(),
                ));
            }
            return self.server_failed(&format!("server exited with {}", describe_exit(code)));
        }
        let timeout = Duration::from_millis(self.cfg.server_timeout_ms);
        let silent = match server.last_beat {
            Some(t) => t.elapsed() > timeout,
            None => server.spawned.elapsed() > timeout + Duration::from_millis(self.cfg.connect_timeout_ms),
        };
        if silent {
            return self.server_failed("no server heartbeat");
        }
        Ok(())
    }

    fn server_failed(&mut self, why: &str) -> Result<()> {
        log::warn!("{why}, restarting the server from its checkpoint");
        self.record("server_failed", None, why);
        for (_, mut r) in std::mem::take(&mut self.runners) {
            r.job.kill();
        }
        if let Some(mut s) = self.server.take() {
            s.job.kill();
        }
        self.pending.clear();
        self.spend_restart(why)?;
        self.server_restarts += 1;
        self.spawn_server(true)
    }

    fn check_runners(&mut self) -> Result<()> {
        let mut exited = Vec::new();
        for (id, r) in self.runners.iter_mut() {
            if let Some(code) = r.job.try_exit()? {
                exited.push((*id, code, r.retiring));
            }
        }
        for (id, code, retiring) in exited {
            if code == Some(0) || retiring {
                log::info!("runner {id} stopped");
                self.record("runner_exit", Some(id), describe_exit(code));
                self.runners.remove(&id);
                continue;
            }
            if code == Some(EXIT_CONFIG) {
                return Err(Error::Config(format!(
                    "runner {id} rejected the configuration, see its log"
                )));
            }
            self.runner_failed(id, &format!("exited with {}", describe_exit(code)))?;
        }
        Ok(())
    }

    fn runner_failed(&mut self, id: u32, why: &str) -> Result<()> {
        let Some(mut r) = self.runners.remove(&id) else { return Ok(()) };
        log::warn!("runner {id} {why}");
        self.record("runner_failed", Some(id), why);
        r.job.kill();
        if r.retiring {
            return Ok(());
        }
        self.spend_restart(&format!("runner {id} {why}"))?;
        self.top_up()
    }

    /// Spawns fresh runners until the fleet matches the target.
    fn top_up(&mut self) -> Result<()> {
        let Some(registry) = self.registry else { return Ok(()) };
        while self.runners.values().filter(|r| !r.retiring).count() < self.target {
            let id = self.next_runner_id;
            self.next_runner_id += 1;
            let job = self.procs.spawn(&Role::Runner { id, registry })?;
            self.record("spawn_runner", Some(id), "");
            self.runners.insert(id, RunnerProc { job, retiring: false });
        }
        Ok(())
    }

    fn resize(&mut self, target: usize) -> Result<()> {
        log::info!("resizing the fleet from {} to {target} runners", self.target);
        self.record("resize", None, format!("{} -> {target}", self.target));
        self.target = target;
        let active: Vec<u32> = self
            .runners
            .iter()
            .filter(|(_, r)| !r.retiring)
            .map(|(id, _)| *id)
            .collect();
        if active.len() > target {
            // newest runners go first
            for id in active[target..].iter().rev() {
                self.runners.get_mut(id).expect("active runner").retiring = true;
                self.send_to_server(&WireMessage::RunnerGone { runner_id: *id });
            }
        }
        self.top_up()
    }

    fn send_to_server(&mut self, msg: &WireMessage) {
        if let Some(link) = self.server.as_mut().and_then(|s| s.link.as_mut()) {
            if let Err(e) = write_message(link, msg) {
                log::warn!("cannot reach the server: {e}");
            }
        }
    }

    fn poll_control_file(&mut self) -> Result<()> {
        let Some(path) = self.cfg.control_file.clone() else { return Ok(()) };
        if Instant::now() < self.next_control_poll {
            return Ok(());
        }
        self.next_control_poll = Instant::now() + CONTROL_POLL;
        let Ok(text) = fs::read_to_string(&path) else { return Ok(()) };
        match parse_control(&text) {
            Some(target) if self.control_value != Some(target) => {
                self.control_value = Some(target);
                if target != self.target {
                    self.resize(target)?;
                }
            }
            Some(_) => {}
            None => log::warn!("ignoring unreadable control file {}", path.display()),
        }
        Ok(())
    }

    fn teardown(&mut self) {
        for (_, mut r) in std::mem::take(&mut self.runners) {
            r.job.kill();
        }
        if let Some(mut s) = self.server.take() {
            s.job.kill();
        }
    }
}

/// The control file holds the runner target, either as a bare integer or as
/// `runners = N`.
pub fn parse_control(text: &str) -> Option<usize> {
    let t = text.trim();
    let value = match t.split_once('=') {
        Some((key, v)) if key.trim() == "runners" => v,
        Some(_) => return None,
        None => t,
    };
    value.trim().parse().ok()
}

fn describe_exit(code: Option<i32>) -> String {
    match code {
        Some(c) => format!("code {c}"),
        None => "a signal".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_file_forms() {
        assert_eq!(parse_control("4\n"), Some(4));
        assert_eq!(parse_control(" runners = 0 "), Some(0));
        assert_eq!(parse_control("members = 3"), None);
        assert_eq!(parse_control("many"), None);
    }
}
