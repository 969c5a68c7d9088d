//! Scheduling and failure-handling decisions of the server. No I/O: events go
//! in with a timestamp, actions come out, and the runtime carries them out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::config::MemberFailurePolicy;
use crate::scheduler::ListScheduler;

#[derive(Debug, Clone)]
pub struct CoordinatorParams {
    pub parts: usize,
    pub shards: usize,
    pub nsteps: u32,
    pub cycles: u32,
    pub runner_timeout_ms: u64,
    pub max_member_restarts: u32,
    pub policy: MemberFailurePolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemberStatus {
    Unassigned,
    Assigned { runner: u32, deadline_ms: u64 },
    Receiving { runner: u32, deadline_ms: u64 },
    Done,
}

#[derive(Debug, Clone)]
pub struct MemberRecord {
    pub status: MemberStatus,
    pub restart_count: u32,
    received: Vec<bool>,
    assigned_at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RunnerState {
    Registering,
    Idle,
    Busy(u32),
}

#[derive(Debug, Clone)]
struct RunnerRecord {
    state: RunnerState,
    connections: Vec<bool>,
    sentinels: Vec<bool>,
    retiring: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Propagating,
    Updating,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailureReason {
    Timeout,
    Disconnected,
    Protocol(String),
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::Timeout => f.write_str("timeout"),
            FailureReason::Disconnected => f.write_str("disconnected"),
            FailureReason::Protocol(m) => write!(f, "protocol error: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Assign {
        runner: u32,
        member: u32,
        cycle: u32,
        nsteps: u32,
    },
    Stop {
        runner: u32,
    },
    /// Close every connection of the runner and forget its partial parts.
    Revoke {
        runner: u32,
    },
    RunnerJoined {
        runner: u32,
    },
    RunnerFailed {
        runner: u32,
        member: Option<u32>,
        reason: FailureReason,
    },
    RunnerRetired {
        runner: u32,
    },
    MemberDone {
        member: u32,
        runner: u32,
        start_ms: u64,
        end_ms: u64,
    },
    DropMember {
        member: u32,
        restarts: u32,
    },
    /// The runtime must install a fresh state for the member before the
    /// member's next `Assign` reaches the shards.
    ReplaceMember {
        member: u32,
        restarts: u32,
    },
    CycleComplete {
        cycle: u32,
        wall_ms: f64,
        busy_ms: BTreeMap<u32, f64>,
        members_propagated: usize,
    },
}

#[derive(Debug)]
pub struct Coordinator {
    params: CoordinatorParams,
    cycle: u32,
    phase: Phase,
    members: BTreeMap<u32, MemberRecord>,
    runners: BTreeMap<u32, RunnerRecord>,
    dead: BTreeSet<u32>,
    sched: ListScheduler,
    phase_start_ms: u64,
    busy_ms: BTreeMap<u32, f64>,
}

impl Coordinator {
    /// Starts at `cycle` with every member unassigned and queued in id order.
    pub fn new(params: CoordinatorParams, cycle: u32, member_ids: &[u32], now: u64) -> Self {
        let slots = params.parts * params.shards;
        let members = member_ids
            .iter()
            .map(|&m| {
                (
                    m,
                    MemberRecord {
                        status: MemberStatus::Unassigned,
                        restart_count: 0,
                        received: vec![false; slots],
                        assigned_at_ms: 0,
                    },
                )
            })
            .collect();
        let mut c = Self {
            phase: if cycle >= params.cycles {
                Phase::Finished
            } else {
                Phase::Propagating
            },
            params,
            cycle,
            members,
            runners: BTreeMap::new(),
            dead: BTreeSet::new(),
            sched: ListScheduler::new(),
            phase_start_ms: now,
            busy_ms: BTreeMap::new(),
        };
        if c.phase == Phase::Propagating {
            for &m in member_ids {
                c.sched.enqueue(m);
            }
        }
        c
    }

    pub fn cycle(&self) -> u32 {
        self.cycle
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Finished
    }

    pub fn member_ids(&self) -> Vec<u32> {
        self.members.keys().copied().collect()
    }

    pub fn member(&self, member: u32) -> Option<&MemberRecord> {
        self.members.get(&member)
    }

    pub fn queued(&self) -> Vec<u32> {
        self.sched.queued().collect()
    }

    pub fn idle_runners(&self) -> Vec<u32> {
        self.sched.idle_runners().collect()
    }

    /// Runners that finished registration and are still in the fleet.
    pub fn active_runners(&self) -> Vec<u32> {
        self.runners
            .iter()
            .filter(|(_, r)| r.state != RunnerState::Registering)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn assignment_of(&self, runner: u32) -> Option<u32> {
        match self.runners.get(&runner)?.state {
            RunnerState::Busy(m) => Some(m),
            _ => None,
        }
    }

    fn slot(&self, part: usize, shard: usize) -> Option<usize> {
        (part < self.params.parts && shard < self.params.shards)
            .then(|| part * self.params.shards + shard)
    }

    pub fn connection_opened(&mut self, runner: u32, part: usize, shard: usize, now: u64) -> Vec<Action> {
        if self.dead.contains(&runner) || self.phase == Phase::Finished {
            return vec![Action::Revoke { runner }];
        }
        let Some(slot) = self.slot(part, shard) else {
            return self.runner_lost(runner, FailureReason::Protocol("part or shard index out of range".into()), now);
        };
        let slots = self.params.parts * self.params.shards;
        let rec = self.runners.entry(runner).or_insert_with(|| RunnerRecord {
            state: RunnerState::Registering,
            connections: vec![false; slots],
            sentinels: vec![false; slots],
            retiring: false,
        });
        if std::mem::replace(&mut rec.connections[slot], true) {
            return self.runner_lost(
                runner,
                FailureReason::Protocol(format!("second connection for part {part} shard {shard}")),
                now,
            );
        }
        Vec::new()
    }

    /// The first expose of each part carries no member; once every part has
    /// sent it on every shard the runner counts as ready.
    pub fn sentinel_received(&mut self, runner: u32, part: usize, shard: usize, now: u64) -> Vec<Action> {
        let Some(slot) = self.slot(part, shard) else {
            return self.runner_lost(runner, FailureReason::Protocol("part or shard index out of range".into()), now);
        };
        let Some(rec) = self.runners.get_mut(&runner) else {
            return Vec::new();
        };
        if rec.state != RunnerState::Registering || !rec.connections[slot] || rec.sentinels[slot] {
            return self.runner_lost(runner, FailureReason::Protocol("unexpected registration push".into()), now);
        }
        rec.sentinels[slot] = true;
        if rec.sentinels.iter().all(|&s| s) && rec.connections.iter().all(|&c| c) {
            rec.state = RunnerState::Idle;
            let mut out = vec![Action::RunnerJoined { runner }];
            out.extend(self.runner_ready(runner, now));
            out
        } else {
            Vec::new()
        }
    }

    fn runner_ready(&mut self, runner: u32, now: u64) -> Vec<Action> {
        let rec = self.runners.get_mut(&runner).expect("ready runner is registered");
        rec.state = RunnerState::Idle;
        if rec.retiring {
            self.runners.remove(&runner);
            self.dead.insert(runner);
            return vec![Action::Stop { runner }, Action::RunnerRetired { runner }];
        }
        if self.phase == Phase::Finished {
            return vec![Action::Stop { runner }];
        }
        match self.sched.runner_ready(runner) {
            Some(member) => vec![self.assign(member, runner, now)],
            None => Vec::new(),
        }
    }

    fn assign(&mut self, member: u32, runner: u32, now: u64) -> Action {
        let deadline_ms = now + self.params.runner_timeout_ms;
        let rec = self.members.get_mut(&member).expect("queued member exists");
        rec.status = MemberStatus::Assigned { runner, deadline_ms };
        rec.received.iter_mut().for_each(|r| *r = false);
        rec.assigned_at_ms = now;
        self.runners.get_mut(&runner).expect("assigned runner exists").state = RunnerState::Busy(member);
        Action::Assign {
            runner,
            member,
            cycle: self.cycle,
            nsteps: self.params.nsteps,
        }
    }

    fn dispatch(&mut self, now: u64) -> Vec<Action> {
        self.sched
            .dispatch()
            .into_iter()
            .map(|(runner, member)| self.assign(member, runner, now))
            .collect()
    }

    /// A background part arrived. Parts from runners that no longer hold the
    /// member, or from another cycle, are discarded.
    pub fn part_received(
        &mut self,
        runner: u32,
        part: usize,
        shard: usize,
        member: u32,
        cycle: u32,
        now: u64,
    ) -> Vec<Action> {
        let Some(slot) = self.slot(part, shard) else {
            return self.runner_lost(runner, FailureReason::Protocol("part or shard index out of range".into()), now);
        };
        if cycle != self.cycle || self.phase != Phase::Propagating {
            return Vec::new();
        }
        let timeout = self.params.runner_timeout_ms;
        let Some(rec) = self.members.get_mut(&member) else {
            return Vec::new();
        };
        match rec.status {
            MemberStatus::Assigned { runner: r, .. } | MemberStatus::Receiving { runner: r, .. } if r == runner => {}
            _ => return Vec::new(),
        }
        if rec.received[slot] {
            return self.runner_lost(
                runner,
                FailureReason::Protocol(format!("duplicate part {part} of member {member} on shard {shard}")),
                now,
            );
        }
        rec.received[slot] = true;
        if !rec.received.iter().all(|&r| r) {
            rec.status = MemberStatus::Receiving {
                runner,
                deadline_ms: now + timeout,
            };
            return Vec::new();
        }

        rec.status = MemberStatus::Done;
        let start_ms = rec.assigned_at_ms;
        *self.busy_ms.entry(runner).or_default() += now.saturating_sub(start_ms) as f64;
        let mut out = vec![Action::MemberDone {
            member,
            runner,
            start_ms,
            end_ms: now,
        }];
        out.extend(self.runner_ready(runner, now));
        out.extend(self.check_cycle_complete(now));
        out
    }

    fn check_cycle_complete(&mut self, now: u64) -> Vec<Action> {
        if self.phase != Phase::Propagating
            || !self.members.values().all(|m| m.status == MemberStatus::Done)
        {
            return Vec::new();
        }
        self.phase = Phase::Updating;
        let members_propagated = self.members.len();
        vec![Action::CycleComplete {
            cycle: self.cycle,
            wall_ms: now.saturating_sub(self.phase_start_ms) as f64,
            busy_ms: std::mem::take(&mut self.busy_ms),
            members_propagated,
        }]
    }

    /// Heartbeats push back the deadline of the member a runner holds.
    pub fn heartbeat(&mut self, runner: u32, now: u64) {
        let Some(RunnerState::Busy(member)) = self.runners.get(&runner).map(|r| r.state) else {
            return;
        };
        let fresh = now + self.params.runner_timeout_ms;
        if let Some(rec) = self.members.get_mut(&member) {
            match &mut rec.status {
                MemberStatus::Assigned { deadline_ms, .. } | MemberStatus::Receiving { deadline_ms, .. } => {
                    *deadline_ms = (*deadline_ms).max(fresh);
                }
                _ => {}
            }
        }
    }

    /// The runner is gone for good: its member goes back to the queue head
    /// (or to the failure policy) and its id is never accepted again.
    pub fn runner_lost(&mut self, runner: u32, reason: FailureReason, now: u64) -> Vec<Action> {
        if self.phase == Phase::Finished {
            self.runners.remove(&runner);
            return Vec::new();
        }
        let Some(rec) = self.runners.remove(&runner) else {
            return Vec::new();
        };
        self.dead.insert(runner);
        self.sched.remove_runner(runner);
        let mut out = vec![Action::Revoke { runner }];
        let member = match rec.state {
            RunnerState::Busy(m) => Some(m),
            _ => None,
        };
        out.push(Action::RunnerFailed {
            runner,
            member,
            reason,
        });
        if let Some(m) = member {
            out.extend(self.member_failed(m, now));
        }
        out
    }

    fn member_failed(&mut self, member: u32, now: u64) -> Vec<Action> {
        let max = self.params.max_member_restarts;
        let rec = self.members.get_mut(&member).expect("failed member exists");
        rec.restart_count += 1;
        rec.status = MemberStatus::Unassigned;
        let restarts = rec.restart_count;
        let mut out = Vec::new();
        if restarts > max {
            match self.params.policy {
                MemberFailurePolicy::Drop => {
                    self.members.remove(&member);
                    out.push(Action::DropMember { member, restarts });
                    out.extend(self.check_cycle_complete(now));
                    return out;
                }
                MemberFailurePolicy::ReplaceWithPerturbed => {
                    rec.restart_count = 0;
                    out.push(Action::ReplaceMember { member, restarts });
                }
            }
        }
        self.sched.enqueue_front(member);
        out.extend(self.dispatch(now));
        out
    }

    pub fn timeout_scan(&mut self, now: u64) -> Vec<Action> {
        let expired: Vec<u32> = self
            .members
            .values()
            .filter_map(|m| match m.status {
                MemberStatus::Assigned { runner, deadline_ms } | MemberStatus::Receiving { runner, deadline_ms }
                    if deadline_ms < now =>
                {
                    Some(runner)
                }
                _ => None,
            })
            .collect();
        expired
            .into_iter()
            .flat_map(|r| self.runner_lost(r, FailureReason::Timeout, now))
            .collect()
    }

    /// Elastic downsizing: the runner is stopped as soon as it is idle.
    pub fn retire(&mut self, runner: u32) -> Vec<Action> {
        let Some(rec) = self.runners.get_mut(&runner) else {
            return Vec::new();
        };
        match rec.state {
            RunnerState::Idle => {
                self.runners.remove(&runner);
                self.dead.insert(runner);
                self.sched.remove_runner(runner);
                vec![Action::Stop { runner }, Action::RunnerRetired { runner }]
            }
            RunnerState::Registering | RunnerState::Busy(_) => {
                rec.retiring = true;
                Vec::new()
            }
        }
    }

    /// Called once the update of the finished cycle is installed.
    pub fn complete_cycle(&mut self, now: u64) -> Vec<Action> {
        assert_eq!(self.phase, Phase::Updating, "complete_cycle outside the update phase");
        self.cycle += 1;
        if self.cycle >= self.params.cycles {
            self.phase = Phase::Finished;
            let idle: Vec<u32> = self.runners.keys().copied().collect();
            return idle.into_iter().map(|runner| Action::Stop { runner }).collect();
        }
        self.phase = Phase::Propagating;
        self.phase_start_ms = now;
        let ids: Vec<u32> = self.members.keys().copied().collect();
        for m in ids {
            let rec = self.members.get_mut(&m).unwrap();
            rec.status = MemberStatus::Unassigned;
            self.sched.enqueue(m);
        }
        self.dispatch(now)
    }

    /// Every member is in at most one of {queue, a runner's assignment}, and
    /// the statuses agree with the runners' states.
    pub fn check_invariants(&self) -> Result<(), String> {
        let queued: Vec<u32> = self.sched.queued().collect();
        let unique: BTreeSet<u32> = queued.iter().copied().collect();
        if unique.len() != queued.len() {
            return Err(format!("duplicate member in queue {queued:?}"));
        }
        for (&id, rec) in &self.members {
            let holders: Vec<u32> = self
                .runners
                .iter()
                .filter(|(_, r)| r.state == RunnerState::Busy(id))
                .map(|(&r, _)| r)
                .collect();
            let in_queue = unique.contains(&id);
            match rec.status {
                MemberStatus::Unassigned if !holders.is_empty() => {
                    return Err(format!("unassigned member {id} held by {holders:?}"))
                }
                MemberStatus::Assigned { runner, .. } | MemberStatus::Receiving { runner, .. }
                    if holders != [runner] || in_queue =>
                {
                    return Err(format!("member {id} assigned to {runner} but held by {holders:?}"))
                }
                MemberStatus::Done if !holders.is_empty() || in_queue => {
                    return Err(format!("done member {id} still scheduled"))
                }
                _ => {}
            }
            if rec.restart_count > self.params.max_member_restarts {
                return Err(format!("member {id} over the restart limit"));
            }
        }
        if self.phase == Phase::Propagating {
            let waiting = self
                .members
                .values()
                .filter(|m| m.status == MemberStatus::Unassigned)
                .count();
            if waiting != unique.len() {
                return Err("unassigned member missing from the queue".into());
            }
        }
        Ok(())
    }
}
