//! Runtime coordinator: turns readout and branch events into decoding and
//! fuse tasks, runs them on a simulated worker pool in abstract ticks and
//! emits corrected logical readouts that resolve conditionals.
//!
//! Time model: an operation started at wall round `w` delivers its `k`-th
//! round at tick `(w + k + 1) * round_ticks`. A block decode costs `|E|`
//! ticks and a fuse `|boundary|` ticks. A branch query blocks the event
//! stream until its labels are read out.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use crate::block::{BlockId, OpInstanceId};
use crate::circuit::{CondId, OpKind};
use crate::compiler::{Compilation, SegmentId};
use crate::error::{Error, Result};
use crate::fusion::{decode_block, finalize, fuse, retire_neighbours, BlockDecodeResult};
use crate::graph::DetectorId;
use crate::schedule::{Capability, ScheduleStats, WorkerPool};
use crate::uf::Syndrome;

pub const TRACE_HEADER: &str = "blockdecode-trace v1";
pub const LOG_HEADER: &str = "blockdecode-log v1";
pub const DEFAULT_ROUND_TICKS: u64 = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecodeEvent {
    OpStarted { op: OpInstanceId, wall_round: u64 },
    /// One round of check outcomes; `round` is the patch-local round index.
    SyndromeChunk { op: OpInstanceId, round: u64, bits: Vec<bool> },
    /// `raw` carries the physical logical-measurement parity of a measure op.
    OpFinished { op: OpInstanceId, raw: Option<bool> },
    BranchQuery { cond: CondId, labels: Vec<String> },
}

impl fmt::Display for DecodeEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeEvent::OpStarted { op, wall_round } => write!(f, "start {op} {wall_round}"),
            DecodeEvent::SyndromeChunk { op, round, bits } => {
                let s: String = bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
                write!(f, "chunk {op} {round} {s}")
            }
            DecodeEvent::OpFinished { op, raw: None } => write!(f, "finish {op}"),
            DecodeEvent::OpFinished { op, raw: Some(r) } => write!(f, "finish {op} {}", u8::from(*r)),
            DecodeEvent::BranchQuery { cond, labels } => write!(f, "query {} {}", cond.0, labels.join(" ")),
        }
    }
}

impl DecodeEvent {
    fn parse_line(line: usize, text: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let num = |i: usize| -> Result<u64> {
            words
                .get(i)
                .ok_or_else(|| Error::parse(line, "missing field"))?
                .parse()
                .map_err(|_| Error::parse(line, format!("expected a number, got `{}`", words[i])))
        };
        let op = |i: usize| num(i).map(|n| OpInstanceId(n as u32));
        let bit = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(Error::parse(line, format!("expected 0 or 1, got `{s}`"))),
        };
        let arity = |lo: usize, hi: usize| {
            if (lo..=hi).contains(&words.len()) {
                Ok(())
            } else {
                Err(Error::parse(line, format!("wrong number of fields for `{}`", words[0])))
            }
        };
        let event = match words[0] {
            "start" => {
                arity(3, 3)?;
                DecodeEvent::OpStarted { op: op(1)?, wall_round: num(2)? }
            }
            "chunk" => {
                arity(4, 4)?;
                let bits = words[3].chars().map(|c| bit(&c.to_string())).collect::<Result<_>>()?;
                DecodeEvent::SyndromeChunk { op: op(1)?, round: num(2)?, bits }
            }
            "finish" => {
                arity(2, 3)?;
                let raw = words.get(2).map(|s| bit(s)).transpose()?;
                DecodeEvent::OpFinished { op: op(1)?, raw }
            }
            "query" => {
                arity(3, usize::MAX)?;
                let labels = words[2..].iter().map(|s| s.to_string()).collect();
                DecodeEvent::BranchQuery { cond: CondId(num(1)? as u32), labels }
            }
            other => return Err(Error::parse(line, format!("unknown event `{other}`"))),
        };
        Ok(event)
    }
}

/// Parses an event trace file.
pub fn parse_trace(src: &str) -> Result<Vec<DecodeEvent>> {
    let mut lines = src.lines().enumerate().map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()));
    match lines.by_ref().find(|(_, l)| !l.is_empty()) {
        Some((_, TRACE_HEADER)) => {}
        Some((n, other)) => return Err(Error::parse(n, format!("expected `{TRACE_HEADER}`, got `{other}`"))),
        None => return Ok(Vec::new()),
    }
    lines.filter(|(_, l)| !l.is_empty()).map(|(n, l)| DecodeEvent::parse_line(n, l)).collect()
}

pub fn write_trace(events: &[DecodeEvent]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for e in events {
        out.push_str(&e.to_string());
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Decode { block: BlockId },
    /// Consumes the results produced by two earlier tasks.
    Fuse { left: TaskId, right: TaskId, boundary: usize },
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Decode { block } => write!(f, "decode block {block}"),
            TaskKind::Fuse { left, right, boundary } => write!(f, "fuse {left} {right} boundary {boundary}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TaskStatus {
    Pending,
    Ready,
    Running,
    Done,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodingTask {
    pub id: TaskId,
    pub kind: TaskKind,
    pub status: TaskStatus,
    pub cost: u64,
    pub worker: Option<usize>,
    pub ready: Option<u64>,
    pub start: Option<u64>,
    pub end: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogicalReadout {
    pub label: String,
    pub op: OpInstanceId,
    pub raw: bool,
    pub corrected: bool,
    pub commit_tick: u64,
    /// Ticks since the last syndrome chunk that fed the readout.
    pub latency: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LogEntry {
    Task { tick: u64, task: TaskId, status: TaskStatus, detail: String },
    Readout(LogicalReadout),
    Branch { tick: u64, cond: CondId, taken: bool },
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogEntry::Task { tick, task, status, detail } => {
                let s = match status {
                    TaskStatus::Pending => "pending",
                    TaskStatus::Ready => "ready",
                    TaskStatus::Running => "run",
                    TaskStatus::Done => "done",
                };
                write!(f, "{tick} task {task} {s}")?;
                if !detail.is_empty() {
                    write!(f, " {detail}")?;
                }
                Ok(())
            }
            LogEntry::Readout(r) => write!(
                f,
                "{} readout {} raw {} corrected {} latency {}",
                r.commit_tick,
                r.label,
                u8::from(r.raw),
                u8::from(r.corrected),
                r.latency
            ),
            LogEntry::Branch { tick, cond, taken } => {
                write!(f, "{tick} branch {} {}", cond.0, if *taken { "then" } else { "else" })
            }
        }
    }
}

/// What one call to [`Coordinator::on_event`] produced, in emission order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Step {
    pub entries: Vec<LogEntry>,
}

impl Step {
    pub fn readouts(&self) -> impl Iterator<Item = &LogicalReadout> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Readout(r) => Some(r),
            _ => None,
        })
    }

    pub fn branch(&self) -> Option<(CondId, bool)> {
        self.entries.iter().find_map(|e| match e {
            LogEntry::Branch { cond, taken, .. } => Some((*cond, *taken)),
            _ => None,
        })
    }
}

pub fn write_log(entries: &[LogEntry]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for e in entries {
        out.push_str(&e.to_string());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyReport {
    pub readouts: Vec<(String, u64)>,
    pub stats: ScheduleStats,
}

impl LatencyReport {
    pub fn mean_latency(&self) -> f64 {
        if self.readouts.is_empty() {
            return 0.0;
        }
        self.readouts.iter().map(|(_, l)| *l as f64).sum::<f64>() / self.readouts.len() as f64
    }

    pub fn max_latency(&self) -> u64 {
        self.readouts.iter().map(|(_, l)| *l).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct CoordinatorConfig {
    pub workers: Vec<Capability>,
    pub round_ticks: u64,
}

impl CoordinatorConfig {
    pub fn uniform(workers: usize) -> Self {
        CoordinatorConfig { workers: vec![Capability::Any; workers], round_ticks: DEFAULT_ROUND_TICKS }
    }
}

/// Per-compilation lookup tables shared by every run.
#[derive(Debug)]
pub struct RuntimePlan<'a> {
    pub comp: &'a Compilation,
    /// Per block index: the (patch, round) pairs its vertices read.
    block_rounds: Vec<BTreeSet<(usize, u64)>>,
    path_segments: Vec<BTreeSet<SegmentId>>,
    cond_labels: BTreeMap<CondId, Vec<String>>,
}

impl<'a> RuntimePlan<'a> {
    pub fn new(comp: &'a Compilation) -> Self {
        let block_rounds = comp
            .blocks
            .iter()
            .map(|b| {
                b.graph
                    .vertices()
                    .iter()
                    .map(|d| {
                        let (p, r, _) = comp.layout.locate(*d).expect("compiled detector");
                        (p, r)
                    })
                    .collect()
            })
            .collect();
        let path_segments =
            comp.paths.iter().map(|p| p.ops.iter().map(|o| comp.ops[o.0 as usize].segment).collect()).collect();
        let cond_labels = comp
            .segments
            .iter()
            .filter_map(|s| s.branch.as_ref())
            .map(|b| (b.cond, b.labels.clone()))
            .collect();
        RuntimePlan { comp, block_rounds, path_segments, cond_labels }
    }
}

#[derive(Clone, Debug, Default)]
struct OpProgress {
    wall: Option<u64>,
    next_round: u64,
    finished: bool,
    raw: Option<bool>,
    last_chunk: u64,
}

#[derive(Debug)]
struct StoredResult {
    result: BlockDecodeResult,
    /// Earliest possible finish ignoring worker contention.
    earliest: u64,
}

pub struct Coordinator<'a> {
    plan: &'a RuntimePlan<'a>,
    round_ticks: u64,
    pool: WorkerPool,
    now: u64,
    active: BTreeSet<usize>,
    resolved: BTreeMap<CondId, bool>,
    pruned: BTreeSet<BlockId>,
    ops: Vec<OpProgress>,
    flipped: BTreeSet<DetectorId>,
    received: BTreeSet<(usize, u64)>,
    tasks: Vec<DecodingTask>,
    decode_task: BTreeMap<BlockId, TaskId>,
    release: BTreeMap<TaskId, u64>,
    /// Pending task starts and completions: (tick, phase, task) with
    /// completions (phase 0) ahead of starts at the same tick.
    agenda: BinaryHeap<Reverse<(u64, u8, TaskId)>>,
    /// Results available for fusion, keyed by the task that made them.
    results: BTreeMap<TaskId, StoredResult>,
    owner: BTreeMap<BlockId, TaskId>,
    inputs: BTreeMap<TaskId, (StoredResult, StoredResult)>,
    readouts: BTreeMap<String, LogicalReadout>,
    critical_path: u64,
    finalized: usize,
    invalid: usize,
    finished: bool,
}

impl<'a> Coordinator<'a> {
    pub fn new(plan: &'a RuntimePlan<'a>, config: &CoordinatorConfig) -> Result<Self> {
        let comp = plan.comp;
        let pool = WorkerPool::new(config.workers.clone())?;
        for key in &comp.block_types {
            pool.check(Some(key.digest()))?;
        }
        if config.round_ticks == 0 {
            return Err(Error::Input("round_ticks must be positive".into()));
        }
        Ok(Coordinator {
            plan,
            round_ticks: config.round_ticks,
            pool,
            now: 0,
            active: (0..comp.paths.len()).collect(),
            resolved: BTreeMap::new(),
            pruned: BTreeSet::new(),
            ops: vec![OpProgress::default(); comp.ops.len()],
            flipped: BTreeSet::new(),
            received: BTreeSet::new(),
            tasks: Vec::new(),
            decode_task: BTreeMap::new(),
            release: BTreeMap::new(),
            agenda: BinaryHeap::new(),
            results: BTreeMap::new(),
            owner: BTreeMap::new(),
            inputs: BTreeMap::new(),
            readouts: BTreeMap::new(),
            critical_path: 0,
            finalized: 0,
            invalid: 0,
            finished: false,
        })
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn round_ticks(&self) -> u64 {
        self.round_ticks
    }

    pub fn tasks(&self) -> &[DecodingTask] {
        &self.tasks
    }

    pub fn readouts(&self) -> &BTreeMap<String, LogicalReadout> {
        &self.readouts
    }

    pub fn resolved(&self) -> &BTreeMap<CondId, bool> {
        &self.resolved
    }

    /// Number of finalized components and how many of those corrections
    /// failed to annihilate their syndrome.
    pub fn finalized(&self) -> (usize, usize) {
        (self.finalized, self.invalid)
    }

    pub fn on_event(&mut self, event: &DecodeEvent) -> Result<Step> {
        if self.finished {
            return Err(Error::State("event after the run finished".into()));
        }
        let mut step = Step::default();
        match event {
            DecodeEvent::OpStarted { op, wall_round } => {
                self.check_op(*op)?;
                if self.ops[op.0 as usize].wall.is_some() {
                    return Err(Error::Protocol(format!("op instance {op} started twice")));
                }
                let first = self.plan.comp.ops[op.0 as usize].placement.first_round;
                self.advance_to(wall_round * self.round_ticks, &mut step)?;
                self.ops[op.0 as usize] = OpProgress { wall: Some(*wall_round), next_round: first, ..Default::default() };
                let block = self.plan.comp.op_block[op.0 as usize];
                if !self.decode_task.contains_key(&block) {
                    let cost = self.plan.comp.block(block).expect("compiled block").graph.edges().len().max(1) as u64;
                    let id = self.push_task(TaskKind::Decode { block }, cost);
                    self.decode_task.insert(block, id);
                    step.entries.push(self.task_entry(id, self.now));
                }
            }
            DecodeEvent::SyndromeChunk { op, round, bits } => {
                self.check_op(*op)?;
                let inst = &self.plan.comp.ops[op.0 as usize];
                let progress = &self.ops[op.0 as usize];
                let Some(wall) = progress.wall else {
                    return Err(Error::Protocol(format!("syndrome for op instance {op} before it started")));
                };
                if progress.finished || *round != progress.next_round || !inst.rounds().contains(round) {
                    return Err(Error::Protocol(format!(
                        "op instance {op}: round {round} out of order (expected {})",
                        progress.next_round
                    )));
                }
                let checks = self.plan.comp.layout.patches[inst.placement.patch].checks;
                if bits.len() as u64 != checks {
                    return Err(Error::Protocol(format!(
                        "op instance {op}: round {round} has {} bits, expected {checks}",
                        bits.len()
                    )));
                }
                let tick = (wall + round - inst.placement.first_round + 1) * self.round_ticks;
                self.advance_to(tick, &mut step)?;
                let patch = inst.placement.patch;
                for (c, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
                    self.flipped.insert(self.plan.comp.layout.detector(patch, *round, c as u64));
                }
                self.received.insert((patch, *round));
                let progress = &mut self.ops[op.0 as usize];
                progress.next_round += 1;
                progress.last_chunk = self.now;
                self.ready_blocks(&mut step)?;
            }
            DecodeEvent::OpFinished { op, raw } => {
                self.check_op(*op)?;
                let inst = &self.plan.comp.ops[op.0 as usize];
                let progress = &self.ops[op.0 as usize];
                let Some(wall) = progress.wall else {
                    return Err(Error::Protocol(format!("op instance {op} finished before it started")));
                };
                if progress.finished {
                    return Err(Error::Protocol(format!("op instance {op} finished twice")));
                }
                if progress.next_round != inst.rounds().end {
                    return Err(Error::Protocol(format!(
                        "op instance {op} finished after round {} of {}",
                        progress.next_round,
                        inst.rounds().end
                    )));
                }
                let is_measure = matches!(inst.kind, OpKind::Measure { .. });
                if raw.is_some() != is_measure {
                    return Err(Error::Protocol(format!(
                        "op instance {op}: a raw parity is required for measurements and only for them"
                    )));
                }
                self.advance_to((wall + inst.layers as u64) * self.round_ticks, &mut step)?;
                let progress = &mut self.ops[op.0 as usize];
                progress.finished = true;
                progress.raw = *raw;
                self.ready_blocks(&mut step)?;
            }
            DecodeEvent::BranchQuery { cond, labels } => self.answer(*cond, labels, &mut step)?,
        }
        Ok(step)
    }

    /// Drains every outstanding task.
    pub fn finish(&mut self) -> Result<Step> {
        let mut step = Step::default();
        self.advance_to(u64::MAX, &mut step)?;
        self.finished = true;
        Ok(step)
    }

    pub fn latency_report(&self) -> Result<LatencyReport> {
        if !self.finished {
            return Err(Error::State("the run has not finished".into()));
        }
        if let Some(t) = self.tasks.iter().find(|t| t.status != TaskStatus::Done) {
            return Err(Error::State(format!("task {} ({}) never completed", t.id, t.kind)));
        }
        if let Some(i) = self.ops.iter().position(|o| o.wall.is_some() && !o.finished) {
            return Err(Error::State(format!("op instance {i} never finished")));
        }
        let mut readouts: Vec<&LogicalReadout> = self.readouts.values().collect();
        readouts.sort_by_key(|r| (r.commit_tick, r.op));
        Ok(LatencyReport {
            readouts: readouts.into_iter().map(|r| (r.label.clone(), r.latency)).collect(),
            stats: ScheduleStats {
                makespan: self.tasks.iter().filter_map(|t| t.end).max().unwrap_or(0),
                total_cost: self.tasks.iter().map(|t| t.cost).sum(),
                critical_path: self.critical_path,
                busy: self.pool.busy().to_vec(),
            },
        })
    }

    fn check_op(&self, op: OpInstanceId) -> Result<()> {
        let inst = self
            .plan
            .comp
            .op(op)
            .ok_or_else(|| Error::Protocol(format!("unknown op instance {op}")))?;
        if !self.active.iter().all(|&p| self.plan.path_segments[p].contains(&inst.segment)) {
            return Err(Error::Protocol(format!("op instance {op} is not on the active path")));
        }
        Ok(())
    }

    fn push_task(&mut self, kind: TaskKind, cost: u64) -> TaskId {
        let id = TaskId(self.tasks.len() as u32);
        self.tasks.push(DecodingTask {
            id,
            kind,
            status: TaskStatus::Pending,
            cost,
            worker: None,
            ready: None,
            start: None,
            end: None,
        });
        id
    }

    fn task_entry(&self, id: TaskId, tick: u64) -> LogEntry {
        let t = &self.tasks[id.0 as usize];
        let detail = match t.status {
            TaskStatus::Pending | TaskStatus::Ready => format!("{} cost {}", t.kind, t.cost),
            TaskStatus::Running => format!("worker {}", t.worker.expect("assigned")),
            TaskStatus::Done => String::new(),
        };
        LogEntry::Task { tick, task: id, status: t.status, detail }
    }

    /// Moves a task to ready at the current tick and books its worker.
    fn make_ready(&mut self, id: TaskId, step: &mut Step) -> Result<()> {
        let requires = match self.tasks[id.0 as usize].kind {
            TaskKind::Decode { block } => Some(self.plan.comp.block_type_of(block).expect("compiled block").digest()),
            TaskKind::Fuse { .. } => None,
        };
        let cost = self.tasks[id.0 as usize].cost;
        let (worker, start) = self.pool.assign(self.now, cost, requires)?;
        let t = &mut self.tasks[id.0 as usize];
        t.status = TaskStatus::Ready;
        t.ready = Some(self.now);
        t.worker = Some(worker);
        t.start = Some(start);
        t.end = Some(start + cost);
        self.release.insert(id, self.now);
        self.agenda.push(Reverse((start, 1, id)));
        self.agenda.push(Reverse((start + cost, 0, id)));
        step.entries.push(self.task_entry(id, self.now));
        Ok(())
    }

    fn ready_blocks(&mut self, step: &mut Step) -> Result<()> {
        let pending: Vec<(BlockId, TaskId)> = self
            .decode_task
            .iter()
            .filter(|(_, t)| self.tasks[t.0 as usize].status == TaskStatus::Pending)
            .map(|(b, t)| (*b, *t))
            .collect();
        for (block, task) in pending {
            let idx = self.plan.comp.block_index(block).expect("compiled block");
            let b = &self.plan.comp.blocks[idx];
            let ops_done = b.covers.iter().all(|o| self.ops[o.0 as usize].finished);
            if ops_done && self.plan.block_rounds[idx].iter().all(|pr| self.received.contains(pr)) {
                self.make_ready(task, step)?;
            }
        }
        Ok(())
    }

    /// Processes task completions up to `tick` and moves the clock there.
    fn advance_to(&mut self, tick: u64, step: &mut Step) -> Result<()> {
        while let Some(&Reverse((at, phase, id))) = self.agenda.peek() {
            if at > tick {
                break;
            }
            self.agenda.pop();
            self.now = self.now.max(at);
            if phase == 1 {
                let t = &mut self.tasks[id.0 as usize];
                t.status = TaskStatus::Running;
                step.entries.push(self.task_entry(id, at));
            } else {
                self.complete(id, step)?;
            }
        }
        if tick != u64::MAX {
            self.now = self.now.max(tick);
        }
        Ok(())
    }

    fn complete(&mut self, id: TaskId, step: &mut Step) -> Result<()> {
        let kind = self.tasks[id.0 as usize].kind.clone();
        let cost = self.tasks[id.0 as usize].cost;
        let release = self.release[&id];
        let stored = match kind {
            TaskKind::Decode { block } => {
                let b = self.plan.comp.block(block).expect("compiled block");
                let syndrome = Syndrome::new(self.flipped.iter().copied().filter(|d| b.graph.contains_vertex(*d)));
                StoredResult { result: decode_block(b, &syndrome)?, earliest: release + cost }
            }
            TaskKind::Fuse { .. } => {
                let (l, r) = self.inputs.remove(&id).expect("fuse inputs held");
                let boundary = l.result.boundary_with(&r.result);
                let earliest = l.earliest.max(r.earliest).max(release) + cost;
                StoredResult { result: fuse(l.result, r.result, &boundary)?, earliest }
            }
        };
        self.critical_path = self.critical_path.max(stored.earliest);
        self.tasks[id.0 as usize].status = TaskStatus::Done;
        step.entries.push(self.task_entry(id, self.now));
        for b in &stored.result.blocks {
            self.owner.insert(*b, id);
        }
        self.results.insert(id, stored);
        self.settle(id, step)
    }

    /// Retires pruned neighbours, then either finalizes the result or
    /// pairs it with a finished neighbour for fusion.
    fn settle(&mut self, id: TaskId, step: &mut Step) -> Result<()> {
        let mut stored = self.results.remove(&id).expect("stored result");
        let gone: BTreeSet<BlockId> =
            stored.result.pending_neighbours().intersection(&self.pruned).copied().collect();
        if !gone.is_empty() {
            stored.result = retire_neighbours(stored.result, &gone)?;
        }
        if stored.result.pending.is_empty() {
            return self.emit_readouts(&stored, step);
        }
        let partner = stored
            .result
            .pending_neighbours()
            .into_iter()
            .filter_map(|n| self.owner.get(&n).copied())
            .find(|t| *t != id && self.results.contains_key(t));
        match partner {
            Some(other) => {
                let right = self.results.remove(&other).expect("partner result");
                let boundary = stored.result.boundary_with(&right.result).len();
                let fuse_id = self.push_task(TaskKind::Fuse { left: id, right: other, boundary }, boundary.max(1) as u64);
                self.inputs.insert(fuse_id, (stored, right));
                self.make_ready(fuse_id, step)
            }
            None => {
                self.results.insert(id, stored);
                Ok(())
            }
        }
    }

    fn emit_readouts(&mut self, stored: &StoredResult, step: &mut Step) -> Result<()> {
        let r = &stored.result;
        let correction = finalize(r)?;
        self.finalized += 1;
        if !correction.annihilates(&r.graph, &Syndrome { flipped: r.defects.clone() }) {
            self.invalid += 1;
        }
        let last_chunk = r.covers.iter().map(|o| self.ops[o.0 as usize].last_chunk).max().unwrap_or(0);
        for op in &r.covers {
            let inst = &self.plan.comp.ops[op.0 as usize];
            if let OpKind::Measure { label } = &inst.kind {
                let raw = self.ops[op.0 as usize].raw.expect("measure finished with a raw parity");
                let obs = inst.placement.observable.expect("measured lifetime");
                let readout = LogicalReadout {
                    label: label.clone(),
                    op: *op,
                    raw,
                    corrected: raw ^ correction.observable_flips.contains(&obs),
                    commit_tick: self.now,
                    latency: self.now - last_chunk,
                };
                step.entries.push(LogEntry::Readout(readout.clone()));
                self.readouts.insert(label.clone(), readout);
            }
        }
        Ok(())
    }

    fn answer(&mut self, cond: CondId, labels: &[String], step: &mut Step) -> Result<()> {
        let expected = self
            .plan
            .cond_labels
            .get(&cond)
            .ok_or_else(|| Error::Protocol(format!("unknown conditional {}", cond.0)))?;
        if expected.as_slice() != labels {
            return Err(Error::Protocol(format!(
                "conditional {} tests {:?}, query names {:?}",
                cond.0, expected, labels
            )));
        }
        if self.resolved.contains_key(&cond)
            || !self.active.iter().all(|&p| self.plan.comp.paths[p].choices.contains_key(&cond))
        {
            return Err(Error::Protocol(format!("conditional {} is not pending on the active path", cond.0)));
        }
        for label in labels {
            let measured = self.plan.comp.ops.iter().enumerate().any(|(i, o)| {
                self.ops[i].finished && matches!(&o.kind, OpKind::Measure { label: l } if l == label)
            });
            if !measured {
                return Err(Error::Protocol(format!("branch query for unmeasured label `{label}`")));
            }
        }
        self.advance_to(self.now, step)?;
        while !labels.iter().all(|l| self.readouts.contains_key(l)) {
            let Some(&Reverse((end, _, _))) = self.agenda.peek() else {
                return Err(Error::Protocol(format!(
                    "conditional {} cannot be answered: its readouts lack syndrome data",
                    cond.0
                )));
            };
            self.advance_to(end, step)?;
        }
        let taken = labels.iter().fold(false, |acc, l| acc ^ self.readouts[l].corrected);
        self.resolved.insert(cond, taken);
        step.entries.push(LogEntry::Branch { tick: self.now, cond, taken });
        let comp = self.plan.comp;
        let (keep, drop): (BTreeSet<usize>, BTreeSet<usize>) =
            self.active.iter().partition(|&&p| comp.paths[p].choices[&cond] == taken);
        let live: BTreeSet<BlockId> = keep.iter().flat_map(|&p| comp.path_blocks[p].iter().copied()).collect();
        let newly: BTreeSet<BlockId> =
            drop.iter().flat_map(|&p| comp.path_blocks[p].iter().copied()).filter(|b| !live.contains(b)).collect();
        self.active = keep;
        self.pruned.extend(newly.iter().copied());
        let touched: Vec<TaskId> = self
            .results
            .iter()
            .filter(|(_, s)| s.result.pending_neighbours().iter().any(|n| newly.contains(n)))
            .map(|(t, _)| *t)
            .collect();
        for t in touched {
            if self.results.contains_key(&t) {
                self.settle(t, step)?;
            }
        }
        Ok(())
    }
}

/// Replays a full trace and returns the log entries, ending with the
/// drained tail.
pub fn replay(plan: &RuntimePlan<'_>, config: &CoordinatorConfig, events: &[DecodeEvent]) -> Result<Vec<LogEntry>> {
    let mut c = Coordinator::new(plan, config)?;
    let mut entries = Vec::new();
    for e in events {
        entries.extend(c.on_event(e)?.entries);
    }
    entries.extend(c.finish()?.entries);
    Ok(entries)
}
