//! Greedy list scheduling of decoding tasks on a worker pool, in abstract
//! ticks.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Block types a worker can decode. Fuse tasks run on every worker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Capability {
    Any,
    /// Block type digests.
    Types(BTreeSet<String>),
}

impl Capability {
    pub fn accepts(&self, requires: Option<&str>) -> bool {
        match (self, requires) {
            (Capability::Any, _) | (_, None) => true,
            (Capability::Types(set), Some(t)) => set.contains(t),
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Capability::Any => f.write_str("any"),
            Capability::Types(set) => {
                let v: Vec<&str> = set.iter().map(String::as_str).collect();
                f.write_str(&v.join(","))
            }
        }
    }
}

impl FromStr for Capability {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "any" {
            return Ok(Capability::Any);
        }
        let set: BTreeSet<String> = s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect();
        if set.is_empty() {
            return Err(Error::Input(format!("empty worker capability `{s}`")));
        }
        Ok(Capability::Types(set))
    }
}

/// Workers with their next free tick and accumulated busy time.
#[derive(Clone, Debug)]
pub struct WorkerPool {
    caps: Vec<Capability>,
    free_at: Vec<u64>,
    busy: Vec<u64>,
}

impl WorkerPool {
    pub fn new(caps: Vec<Capability>) -> Result<Self> {
        if caps.is_empty() {
            return Err(Error::Input("at least one worker is required".into()));
        }
        let n = caps.len();
        Ok(WorkerPool { caps, free_at: vec![0; n], busy: vec![0; n] })
    }

    pub fn uniform(workers: usize) -> Result<Self> {
        WorkerPool::new(vec![Capability::Any; workers])
    }

    pub fn len(&self) -> usize {
        self.caps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caps.is_empty()
    }

    pub fn capabilities(&self) -> &[Capability] {
        &self.caps
    }

    pub fn busy(&self) -> &[u64] {
        &self.busy
    }

    /// Places a task on the earliest-available compatible worker (lowest
    /// index on ties). Returns the worker and the start tick.
    pub fn assign(&mut self, ready: u64, cost: u64, requires: Option<&str>) -> Result<(usize, u64)> {
        let worker = (0..self.caps.len())
            .filter(|&w| self.caps[w].accepts(requires))
            .min_by_key(|&w| (self.free_at[w].max(ready), w))
            .ok_or_else(|| {
                Error::Capability(format!("no worker accepts block type {}", requires.unwrap_or("?")))
            })?;
        let start = self.free_at[worker].max(ready);
        self.free_at[worker] = start + cost;
        self.busy[worker] += cost;
        Ok((worker, start))
    }

    pub fn check(&self, requires: Option<&str>) -> Result<()> {
        if self.caps.iter().any(|c| c.accepts(requires)) {
            Ok(())
        } else {
            Err(Error::Capability(format!("no worker accepts block type {}", requires.unwrap_or("?"))))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub cost: u64,
    pub release: u64,
    /// Indices of tasks that must finish first.
    pub deps: Vec<usize>,
    pub requires: Option<String>,
}

impl TaskSpec {
    pub fn new(cost: u64) -> Self {
        TaskSpec { cost, release: 0, deps: Vec::new(), requires: None }
    }

    pub fn after(mut self, deps: impl IntoIterator<Item = usize>) -> Self {
        self.deps.extend(deps);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub task: usize,
    pub worker: usize,
    pub ready: u64,
    pub start: u64,
    pub end: u64,
}

/// Summary figures shared by the offline scheduler and the coordinator.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScheduleStats {
    pub makespan: u64,
    pub total_cost: u64,
    pub critical_path: u64,
    /// Busy ticks per worker.
    pub busy: Vec<u64>,
}

impl ScheduleStats {
    pub fn utilization(&self) -> f64 {
        if self.makespan == 0 || self.busy.is_empty() {
            return 0.0;
        }
        self.total_cost as f64 / (self.busy.len() as f64 * self.makespan as f64)
    }

    pub fn worker_utilization(&self) -> Vec<f64> {
        self.busy
            .iter()
            .map(|&b| if self.makespan == 0 { 0.0 } else { b as f64 / self.makespan as f64 })
            .collect()
    }

    /// `max(critical path, ceil(total / W))`.
    pub fn lower_bound(&self) -> u64 {
        let w = self.busy.len().max(1) as u64;
        self.critical_path.max(self.total_cost.div_ceil(w))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    /// Indexed by task.
    pub slots: Vec<Slot>,
    pub stats: ScheduleStats,
}

/// List-schedules a task DAG: among tasks whose dependencies are placed,
/// the one with the smallest (ready tick, index) goes next.
pub fn schedule(tasks: &[TaskSpec], workers: Vec<Capability>) -> Result<Schedule> {
    let mut pool = WorkerPool::new(workers)?;
    let n = tasks.len();
    let mut indegree = vec![0usize; n];
    let mut children = vec![Vec::new(); n];
    for (i, t) in tasks.iter().enumerate() {
        for &d in &t.deps {
            if d >= n || d == i {
                return Err(Error::Input(format!("task {i} depends on invalid task {d}")));
            }
            indegree[i] += 1;
            children[d].push(i);
        }
        pool.check(t.requires.as_deref())?;
    }
    let mut ready_at: Vec<u64> = tasks.iter().map(|t| t.release).collect();
    let mut earliest_finish = vec![0u64; n];
    let mut available: BTreeSet<(u64, usize)> = (0..n).filter(|&i| indegree[i] == 0).map(|i| (ready_at[i], i)).collect();
    let mut slots: Vec<Option<Slot>> = vec![None; n];
    let mut placed = 0;
    while let Some((ready, i)) = available.pop_first() {
        let t = &tasks[i];
        let (worker, start) = pool.assign(ready, t.cost, t.requires.as_deref())?;
        let end = start + t.cost;
        slots[i] = Some(Slot { task: i, worker, ready, start, end });
        let dep_finish = t.deps.iter().map(|&d| earliest_finish[d]).max().unwrap_or(0);
        earliest_finish[i] = dep_finish.max(t.release) + t.cost;
        placed += 1;
        for &c in &children[i] {
            ready_at[c] = ready_at[c].max(end);
            indegree[c] -= 1;
            if indegree[c] == 0 {
                available.insert((ready_at[c], c));
            }
        }
    }
    if placed != n {
        return Err(Error::Input("task dependencies contain a cycle".into()));
    }
    let slots: Vec<Slot> = slots.into_iter().map(|s| s.expect("every task placed")).collect();
    let stats = ScheduleStats {
        makespan: slots.iter().map(|s| s.end).max().unwrap_or(0),
        total_cost: tasks.iter().map(|t| t.cost).sum(),
        critical_path: earliest_finish.iter().copied().max().unwrap_or(0),
        busy: pool.busy().to_vec(),
    };
    Ok(Schedule { slots, stats })
}

/// Block-decode tasks `0..blocks` of a chain followed by the fuse tasks of a
/// balanced reduction over adjacent results.
pub fn chain_tasks(blocks: usize, decode_cost: u64, fuse_cost: u64) -> Vec<TaskSpec> {
    let mut tasks: Vec<TaskSpec> = (0..blocks).map(|_| TaskSpec::new(decode_cost)).collect();
    let mut frontier: Vec<usize> = (0..blocks).collect();
    while frontier.len() > 1 {
        let mut next = Vec::new();
        for pair in frontier.chunks(2) {
            if let [a, b] = pair {
                tasks.push(TaskSpec::new(fuse_cost).after([*a, *b]));
                next.push(tasks.len() - 1);
            } else {
                next.push(pair[0]);
            }
        }
        frontier = next;
    }
    tasks
}
