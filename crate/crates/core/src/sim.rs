//! Phenomenological error sampling and the Monte Carlo driver that plays
//! the physical and logic controllers against the coordinator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::block::{BlockId, DecodingBlock};
use crate::circuit::OpKind;
use crate::compiler::Compilation;
use crate::coordinator::{Coordinator, CoordinatorConfig, DecodeEvent, LogEntry, RuntimePlan};
use crate::error::Result;
use crate::graph::{DecodingGraph, DetectorId, EdgeId, ErrorSource};
use crate::uf::Syndrome;

/// Keyed sampler: whether edge `e` fires in shot `s` depends only on
/// `(seed, s, e)` and the edge probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampler {
    seed: u64,
    /// Test hook: use this probability for every edge.
    forced: Option<f64>,
}

impl Sampler {
    pub fn new(seed: u64) -> Self {
        Sampler { seed, forced: None }
    }

    pub fn with_probability(seed: u64, p: f64) -> Self {
        Sampler { seed, forced: Some(p) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn rng(&self, shot: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(shot);
        rng
    }

    /// Uniform draw in [0, 1) for one (shot, edge) key.
    pub fn uniform(&self, shot: u64, edge: EdgeId) -> f64 {
        let mut rng = self.rng(shot);
        draw(&mut rng, edge)
    }

    /// Edges among `edges` that fire in `shot`.
    pub fn triggered<'e>(&self, shot: u64, edges: impl IntoIterator<Item = &'e ErrorSource>) -> BTreeSet<EdgeId> {
        let mut rng = self.rng(shot);
        edges
            .into_iter()
            .filter(|e| draw(&mut rng, e.id) < self.forced.unwrap_or(e.probability))
            .map(|e| e.id)
            .collect()
    }

    pub fn sample(&self, graph: &DecodingGraph, shot: u64) -> ErrorSample {
        let triggered = self.triggered(shot, graph.edges());
        ErrorSample::from_triggered(self.seed, shot, graph, triggered)
    }
}

fn draw(rng: &mut ChaCha8Rng, edge: EdgeId) -> f64 {
    let pos = u128::from(edge.0) * 2;
    if rng.get_word_pos() != pos {
        rng.set_word_pos(pos);
    }
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorSample {
    pub seed: u64,
    pub shot: u64,
    pub triggered: BTreeSet<EdgeId>,
    pub syndrome: Syndrome,
    pub observable_flips: BTreeSet<u32>,
}

impl ErrorSample {
    fn from_triggered(seed: u64, shot: u64, graph: &DecodingGraph, triggered: BTreeSet<EdgeId>) -> Self {
        let mut flipped = BTreeSet::new();
        let mut observable_flips = BTreeSet::new();
        for id in &triggered {
            let e = graph.edge(*id).expect("sampled from this graph");
            for d in &e.detectors {
                if !flipped.insert(*d) {
                    flipped.remove(d);
                }
            }
            for o in &e.observables {
                if !observable_flips.insert(*o) {
                    observable_flips.remove(o);
                }
            }
        }
        ErrorSample { seed, shot, triggered, syndrome: Syndrome { flipped }, observable_flips }
    }

    /// The sample's syndrome as seen by each block.
    pub fn per_block<'b>(&self, blocks: impl IntoIterator<Item = &'b DecodingBlock>) -> BTreeMap<BlockId, Syndrome> {
        blocks.into_iter().map(|b| (b.id, self.syndrome.restricted_to(&b.graph))).collect()
    }
}

/// Result of one simulated shot.
#[derive(Clone, Debug, Default)]
pub struct ShotOutcome {
    /// Label → (logical failure, corrected parity).
    pub labels: BTreeMap<String, (bool, bool)>,
    pub branches: Vec<bool>,
    pub finalized: usize,
    pub invalid: usize,
    pub latency_sum: u64,
    pub latency_max: u64,
    pub makespan: u64,
    pub total_cost: u64,
    pub critical_path: u64,
    pub events: Vec<DecodeEvent>,
    pub log: Vec<LogEntry>,
}

/// Drives one shot through the coordinator. `logical` fixes the noiseless
/// value of measured labels (0 when absent); the reported raw parity is that
/// value XOR the sampled flips on the measured observable.
pub fn run_shot(
    plan: &RuntimePlan<'_>,
    config: &CoordinatorConfig,
    sampler: &Sampler,
    shot: u64,
    logical: &BTreeMap<String, bool>,
) -> Result<ShotOutcome> {
    let comp = plan.comp;
    let mut coord = Coordinator::new(plan, config)?;
    let mut flipped: BTreeSet<DetectorId> = BTreeSet::new();
    let mut obs_flips: BTreeSet<u32> = BTreeSet::new();
    let mut out = ShotOutcome::default();
    let mut truth: BTreeMap<String, bool> = BTreeMap::new();
    let mut wall = 0u64;
    let mut seg = 0usize;
    let feed = |coord: &mut Coordinator<'_>, out: &mut ShotOutcome, e: DecodeEvent| -> Result<Option<bool>> {
        let step = coord.on_event(&e)?;
        out.events.push(e);
        let branch = step.branch().map(|(_, t)| t);
        out.log.extend(step.entries);
        Ok(branch)
    };
    loop {
        let segment = &comp.segments[seg];
        for &op in &segment.ops {
            let inst = &comp.ops[op.0 as usize];
            let block = comp.block(comp.op_block[op.0 as usize]).expect("compiled block");
            let own = block.graph.edges().iter().filter(|e| (inst.edges.0..inst.edges.1).contains(&e.id.0));
            let fired = sampler.triggered(shot, own);
            for id in &fired {
                let e = block.graph.edge(*id).expect("own edge");
                for d in &e.detectors {
                    if !flipped.remove(d) {
                        flipped.insert(*d);
                    }
                }
                for o in &e.observables {
                    if !obs_flips.remove(o) {
                        obs_flips.insert(*o);
                    }
                }
            }
            feed(&mut coord, &mut out, DecodeEvent::OpStarted { op, wall_round: wall })?;
            let patch = inst.placement.patch;
            let checks = comp.layout.patches[patch].checks;
            for round in inst.rounds() {
                let bits = (0..checks).map(|c| flipped.contains(&comp.layout.detector(patch, round, c))).collect();
                feed(&mut coord, &mut out, DecodeEvent::SyndromeChunk { op, round, bits })?;
            }
            wall += inst.layers as u64;
            let raw = match &inst.kind {
                OpKind::Measure { label } => {
                    let value = logical.get(label).copied().unwrap_or(false);
                    truth.insert(label.clone(), value);
                    let obs = inst.placement.observable.expect("measured lifetime");
                    Some(value ^ obs_flips.contains(&obs))
                }
                _ => None,
            };
            feed(&mut coord, &mut out, DecodeEvent::OpFinished { op, raw })?;
        }
        let Some(branch) = &segment.branch else { break };
        let query = DecodeEvent::BranchQuery { cond: branch.cond, labels: branch.labels.clone() };
        let taken = feed(&mut coord, &mut out, query)?.expect("query answered");
        out.branches.push(taken);
        wall = wall.max(coord.now().div_ceil(coord.round_ticks()));
        seg = if taken { branch.then_seg.0 } else { branch.else_seg.0 } as usize;
    }
    out.log.extend(coord.finish()?.entries);
    let report = coord.latency_report()?;
    for (label, value) in truth {
        let r = &coord.readouts()[&label];
        out.labels.insert(label, (r.corrected != value, r.corrected));
    }
    (out.finalized, out.invalid) = coord.finalized();
    out.latency_sum = report.readouts.iter().map(|(_, l)| l).sum();
    out.latency_max = report.max_latency();
    out.makespan = report.stats.makespan;
    out.total_cost = report.stats.total_cost;
    out.critical_path = report.stats.critical_path;
    Ok(out)
}

/// Wilson score interval at `z` standard deviations.
pub fn wilson_interval(failures: u64, shots: u64, z: f64) -> (f64, f64) {
    if shots == 0 {
        return (0.0, 1.0);
    }
    let n = shots as f64;
    let p = failures as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

pub const WILSON_Z95: f64 = 1.959963984540054;

#[derive(Clone, Debug, PartialEq)]
pub struct LerRow {
    pub label: String,
    pub shots: u64,
    pub failures: u64,
    pub ler: f64,
    pub ci: (f64, f64),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Tally {
    labels: BTreeMap<String, (u64, u64)>,
    shots: u64,
    finalized: u64,
    invalid: u64,
    readouts: u64,
    latency_sum: u64,
    latency_max: u64,
    makespan_sum: u64,
    cost_sum: u64,
    critical_sum: u64,
}

impl Tally {
    fn add(mut self, o: &ShotOutcome) -> Self {
        for (label, (failed, _)) in &o.labels {
            let e = self.labels.entry(label.clone()).or_default();
            e.0 += 1;
            e.1 += u64::from(*failed);
        }
        self.shots += 1;
        self.finalized += o.finalized as u64;
        self.invalid += o.invalid as u64;
        self.readouts += o.labels.len() as u64;
        self.latency_sum += o.latency_sum;
        self.latency_max = self.latency_max.max(o.latency_max);
        self.makespan_sum += o.makespan;
        self.cost_sum += o.total_cost;
        self.critical_sum += o.critical_path;
        self
    }

    fn merge(mut self, other: Tally) -> Self {
        for (label, (s, f)) in other.labels {
            let e = self.labels.entry(label).or_default();
            e.0 += s;
            e.1 += f;
        }
        self.shots += other.shots;
        self.finalized += other.finalized;
        self.invalid += other.invalid;
        self.readouts += other.readouts;
        self.latency_sum += other.latency_sum;
        self.latency_max = self.latency_max.max(other.latency_max);
        self.makespan_sum += other.makespan_sum;
        self.cost_sum += other.cost_sum;
        self.critical_sum += other.critical_sum;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloResult {
    pub shots: u64,
    pub seed: u64,
    pub workers: usize,
    pub rows: Vec<LerRow>,
    pub finalized: u64,
    pub invalid_corrections: u64,
    pub mean_latency: f64,
    pub max_latency: u64,
    pub mean_makespan: f64,
    pub mean_critical_path: f64,
    pub utilization: f64,
}

impl MonteCarloResult {
    pub fn row(&self, label: &str) -> Option<&LerRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn table(&self) -> String {
        let mut out = String::from("label\tshots\tfailures\tler\tci_low\tci_high\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}", r.label, r.shots, r.failures, r.ler, r.ci.0, r.ci.1);
        }
        out
    }

    pub fn latency_summary(&self) -> String {
        format!(
            "workers {}  mean latency {:.3}  max latency {}  mean makespan {:.3}  mean critical path {:.3}  utilization {:.4}\n",
            self.workers, self.mean_latency, self.max_latency, self.mean_makespan, self.mean_critical_path, self.utilization
        )
    }

    /// `key value` lines for scripts.
    pub fn summary(&self) -> String {
        let mut out = String::from("blockdecode-results v1\n");
        let _ = writeln!(out, "seed {}\nshots {}\nworkers {}", self.seed, self.shots, self.workers);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "observable {} shots {} failures {} ler {:.9} ci {:.9} {:.9}",
                r.label, r.shots, r.failures, r.ler, r.ci.0, r.ci.1
            );
        }
        let _ = writeln!(out, "finalized {}\ninvalid_corrections {}", self.finalized, self.invalid_corrections);
        let _ = writeln!(out, "mean_latency {:.6}\nmax_latency {}", self.mean_latency, self.max_latency);
        let _ = writeln!(out, "mean_makespan {:.6}\nmean_critical_path {:.6}", self.mean_makespan, self.mean_critical_path);
        let _ = writeln!(out, "utilization {:.6}", self.utilization);
        out
    }
}

/// Runs `shots` independent shots, in parallel, and tallies per-label
/// logical error rates with Wilson 95% intervals.
pub fn monte_carlo(comp: &Compilation, shots: u64, seed: u64, workers: usize) -> Result<MonteCarloResult> {
    if shots == 0 {
        return Err(crate::Error::Input("shots must be at least 1".into()));
    }
    let plan = RuntimePlan::new(comp);
    let config = CoordinatorConfig::uniform(workers);
    let sampler = Sampler::new(seed);
    let logical = BTreeMap::new();
    let tally = (0..shots)
        .into_par_iter()
        .map(|shot| run_shot(&plan, &config, &sampler, shot, &logical).map(|o| Tally::default().add(&o)))
        .try_reduce(Tally::default, |a, b| Ok(a.merge(b)))?;
    let rows = tally
        .labels
        .iter()
        .map(|(label, &(n, f))| LerRow {
            label: label.clone(),
            shots: n,
            failures: f,
            ler: f as f64 / n as f64,
            ci: wilson_interval(f, n, WILSON_Z95),
        })
        .collect();
    let per_shot = |x: u64| x as f64 / tally.shots as f64;
    Ok(MonteCarloResult {
        shots,
        seed,
        workers,
        rows,
        finalized: tally.finalized,
        invalid_corrections: tally.invalid,
        mean_latency: if tally.readouts == 0 { 0.0 } else { tally.latency_sum as f64 / tally.readouts as f64 },
        max_latency: tally.latency_max,
        mean_makespan: per_shot(tally.makespan_sum),
        mean_critical_path: per_shot(tally.critical_sum),
        utilization: if tally.makespan_sum == 0 {
            0.0
        } else {
            tally.cost_sum as f64 / (workers as f64 * tally.makespan_sum as f64)
        },
    })
}
