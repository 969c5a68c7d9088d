//! Graham list scheduling: whenever a runner becomes idle it receives the
//! member at the head of the queue. The live server and the offline simulator
//! share `ListScheduler`, so both make identical decisions for identical
//! ready-event orders.

use std::collections::VecDeque;

/// FIFO of unassigned members and FIFO of idle runners.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ListScheduler {
    queue: VecDeque<u32>,
    idle: VecDeque<u32>,
}

impl ListScheduler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&mut self, member: u32) {
        debug_assert!(!self.queue.contains(&member));
        self.queue.push_back(member);
    }

    /// Re-enqueue at the head, used for members whose runner failed.
    pub fn enqueue_front(&mut self, member: u32) {
        debug_assert!(!self.queue.contains(&member));
        self.queue.push_front(member);
    }

    /// A runner asks for work: it gets the queue head, or is parked as idle.
    pub fn runner_ready(&mut self, runner: u32) -> Option<u32> {
        match self.queue.pop_front() {
            Some(member) => Some(member),
            None => {
                if !self.idle.contains(&runner) {
                    self.idle.push_back(runner);
                }
                None
            }
        }
    }

    /// Pairs parked runners with queued members, oldest idle runner first.
    pub fn dispatch(&mut self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        while !self.queue.is_empty() && !self.idle.is_empty() {
            let runner = self.idle.pop_front().unwrap();
            let member = self.queue.pop_front().unwrap();
            out.push((runner, member));
        }
        out
    }

    pub fn remove_runner(&mut self, runner: u32) -> bool {
        let before = self.idle.len();
        self.idle.retain(|&r| r != runner);
        before != self.idle.len()
    }

    pub fn remove_member(&mut self, member: u32) -> bool {
        let before = self.queue.len();
        self.queue.retain(|&m| m != member);
        before != self.queue.len()
    }

    pub fn queued(&self) -> impl Iterator<Item = u32> + '_ {
        self.queue.iter().copied()
    }

    pub fn idle_runners(&self) -> impl Iterator<Item = u32> + '_ {
        self.idle.iter().copied()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledTask {
    pub member: u32,
    pub runner: u32,
    pub start: f64,
    pub end: f64,
}

/// Result of an offline list-scheduling run over one propagation phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub runners: usize,
    pub makespan: f64,
    /// Tasks in assignment order.
    pub trace: Vec<ScheduledTask>,
}

impl Simulation {
    pub fn busy_time(&self) -> f64 {
        self.trace.iter().map(|t| t.end - t.start).sum()
    }

    pub fn busy_per_runner(&self) -> Vec<f64> {
        let mut busy = vec![0.0; self.runners];
        for t in &self.trace {
            busy[t.runner as usize] += t.end - t.start;
        }
        busy
    }

    /// Fraction of runner time spent idle when each propagation phase is
    /// followed by an update phase of `update_time` during which every runner
    /// waits.
    pub fn idle_fraction(&self, update_time: f64) -> f64 {
        let span = (self.makespan + update_time) * self.runners as f64;
        if span <= 0.0 {
            return 0.0;
        }
        1.0 - self.busy_time() / span
    }

    /// Propagation efficiency against running every member on one runner.
    pub fn efficiency(&self) -> f64 {
        if self.makespan <= 0.0 {
            return 1.0;
        }
        self.busy_time() / (self.runners as f64 * self.makespan)
    }

    pub fn assignment_order(&self) -> Vec<(u32, u32)> {
        self.trace.iter().map(|t| (t.runner, t.member)).collect()
    }
}

/// Simulates one propagation phase: member `i` takes `durations[i]`, members
/// are queued in index order, all runners are ready at time 0 in index order,
/// and simultaneous completions are processed in runner index order.
pub fn simulate_schedule(durations: &[f64], runners: usize) -> Simulation {
    assert!(runners >= 1, "at least one runner");
    assert!(
        durations.iter().all(|d| *d >= 0.0),
        "durations must be non-negative"
    );
    let mut sched = ListScheduler::new();
    for m in 0..durations.len() as u32 {
        sched.enqueue(m);
    }
    // per runner: time at which it becomes ready again, if busy
    let mut busy_until: Vec<Option<f64>> = vec![None; runners];
    let mut trace = Vec::with_capacity(durations.len());
    let mut now = 0.0;
    let mut ready: Vec<u32> = (0..runners as u32).collect();
    loop {
        for r in ready.drain(..) {
            if let Some(m) = sched.runner_ready(r) {
                let end = now + durations[m as usize];
                busy_until[r as usize] = Some(end);
                trace.push(ScheduledTask {
                    member: m,
                    runner: r,
                    start: now,
                    end,
                });
            }
        }
        let next = busy_until.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        if !next.is_finite() {
            break;
        }
        now = next;
        for (r, slot) in busy_until.iter_mut().enumerate() {
            if *slot == Some(now) {
                *slot = None;
                ready.push(r as u32);
            }
        }
    }
    let makespan = trace.iter().map(|t| t.end).fold(0.0, f64::max);
    Simulation {
        runners,
        makespan,
        trace,
    }
}
