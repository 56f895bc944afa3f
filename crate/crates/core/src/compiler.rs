//! Offline compilation of a logical circuit into decoding blocks.
//!
//! The circuit is unrolled into an execution tree: operations before a
//! conditional are shared by every path through it, operations after it
//! are instantiated once per branch. Each operation instance contributes a
//! phenomenological-noise decoding graph; temporally adjacent instances on
//! the same patch share one detector layer, which is their combination
//! boundary.
//!
//! # Detector packing
//!
//! `id = round * stride + offset(patch) + check`, where `stride` is the total
//! number of checks over all patches and `offset` the running sum of check
//! counts in declaration order. Each patch keeps its own round counter.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::num::NonZeroUsize;
use std::str::FromStr;

use crate::block::{block_type, merge_blocks, BlockId, BlockTypeKey, DecodingBlock, OpInstanceId};
use crate::circuit::{CodeFamily, CondId, LogicalCircuit, OpKind, Statement};
use crate::error::{Error, Result};
use crate::graph::{DecodingGraph, DetectorId, GraphBuilder};

pub const SETTING_HEADER: &str = "blockdecode-setting v1";

/// Default cap on the number of execution paths.
pub const DEFAULT_PATH_CAP: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct QecSetting {
    pub code: CodeFamily,
    pub distance: u32,
    pub p_data: f64,
    pub p_meas: f64,
    pub rounds_per_op: u32,
}

impl QecSetting {
    pub fn new(code: CodeFamily, distance: u32, p_data: f64, p_meas: f64, rounds_per_op: u32) -> Result<Self> {
        let s = QecSetting { code, distance, p_data, p_meas, rounds_per_op };
        s.validate()?;
        Ok(s)
    }

    pub fn repetition(distance: u32, p: f64) -> Result<Self> {
        Self::new(CodeFamily::Repetition, distance, p, p, 1)
    }

    pub fn validate(&self) -> Result<()> {
        check_distance(self.distance)?;
        for (name, p) in [("p_data", self.p_data), ("p_meas", self.p_meas)] {
            if !(0.0..0.5).contains(&p) {
                return Err(Error::Validation(format!("{name} = {p} outside [0, 0.5)")));
            }
        }
        if self.rounds_per_op == 0 {
            return Err(Error::Validation("rounds_per_op must be positive".into()));
        }
        Ok(())
    }

    pub fn parse(src: &str) -> Result<Self> {
        let mut lines = src
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, SETTING_HEADER)) => {}
            Some((line, _)) => return Err(Error::parse(line, format!("expected header `{SETTING_HEADER}`"))),
            None => return Err(Error::parse(1, format!("expected header `{SETTING_HEADER}`"))),
        }
        let (mut code, mut distance, mut p_data, mut p_meas, mut rounds) = (None, None, None, None, 1);
        for (line, text) in lines {
            let (key, value) = text
                .split_once(char::is_whitespace)
                .map(|(k, v)| (k, v.trim()))
                .ok_or_else(|| Error::parse(line, "expected `<key> <value>`"))?;
            let bad = || Error::parse(line, format!("bad value `{value}` for `{key}`"));
            match key {
                "code" => code = Some(value.parse::<CodeFamily>().map_err(|m| Error::parse(line, m))?),
                "distance" => distance = Some(value.parse().map_err(|_| bad())?),
                "p_data" => p_data = Some(value.parse().map_err(|_| bad())?),
                "p_meas" => p_meas = Some(value.parse().map_err(|_| bad())?),
                "rounds_per_op" => rounds = value.parse().map_err(|_| bad())?,
                other => return Err(Error::parse(line, format!("unknown key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::Validation(format!("setting is missing `{k}`"));
        Self::new(
            code.ok_or_else(|| missing("code"))?,
            distance.ok_or_else(|| missing("distance"))?,
            p_data.ok_or_else(|| missing("p_data"))?,
            p_meas.ok_or_else(|| missing("p_meas"))?,
            rounds,
        )
    }

    pub fn to_text(&self) -> String {
        format!(
            "{SETTING_HEADER}\ncode {}\ndistance {}\np_data {}\np_meas {}\nrounds_per_op {}\n",
            self.code, self.distance, self.p_data, self.p_meas, self.rounds_per_op
        )
    }
}

fn check_distance(d: u32) -> Result<()> {
    if d < 3 || d.is_multiple_of(2) {
        return Err(Error::Validation(format!("distance {d} must be an odd integer >= 3")));
    }
    Ok(())
}

/// How many consecutive operation instances (per patch, within one path
/// segment) are coalesced into one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Ops(NonZeroUsize),
    /// Everything a patch does within one segment.
    Whole,
}

impl Granularity {
    pub fn ops(n: usize) -> Result<Self> {
        NonZeroUsize::new(n).map(Granularity::Ops).ok_or_else(|| Error::Validation("granularity must be >= 1".into()))
    }

    fn limit(self) -> usize {
        match self {
            Granularity::Ops(n) => n.get(),
            Granularity::Whole => usize::MAX,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::Ops(n) => write!(f, "{n}"),
            Granularity::Whole => f.write_str("inf"),
        }
    }
}

impl FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" | "whole" | "path" => Ok(Granularity::Whole),
            _ => {
                let n: usize = s.parse().map_err(|_| Error::Validation(format!("bad granularity `{s}`")))?;
                Granularity::ops(n)
            }
        }
    }
}

/// Check layout of one code patch.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeGeometry {
    pub checks: usize,
    /// Per data qubit: the checks it flips and whether it lies on the
    /// logical observable's support.
    pub data: Vec<(Vec<usize>, bool)>,
}

impl CodeGeometry {
    pub fn new(code: CodeFamily, d: u32) -> Result<Self> {
        check_distance(d)?;
        let d = d as usize;
        Ok(match code {
            CodeFamily::Repetition => {
                // Checks Z_i Z_{i+1}; the observable is Z on qubit 0.
                let data = (0..d)
                    .map(|q| {
                        let mut checks = Vec::new();
                        if q > 0 {
                            checks.push(q - 1);
                        }
                        if q + 1 < d {
                            checks.push(q);
                        }
                        (checks, q == 0)
                    })
                    .collect();
                CodeGeometry { checks: d - 1, data }
            }
            CodeFamily::RotatedSurface => {
                // Z-type plaquettes of the rotated layout detecting X errors.
                // Plaquette (i, j), 0 <= i, j <= d, touches data (i-1..=i, j-1..=j).
                // Bulk Z plaquettes have i + j even; weight-two Z plaquettes sit
                // on the left/right edges. The observable is Z along row 0.
                let mut index = BTreeMap::new();
                for i in 0..=d {
                    for j in 0..=d {
                        let even = (i + j) % 2 == 0;
                        let bulk = (1..d).contains(&i) && (1..d).contains(&j);
                        let side = (1..d).contains(&i) && (j == 0 || j == d);
                        if even && (bulk || side) {
                            let next = index.len();
                            index.insert((i, j), next);
                        }
                    }
                }
                let mut data = Vec::with_capacity(d * d);
                for r in 0..d {
                    for c in 0..d {
                        let checks = [(r, c), (r, c + 1), (r + 1, c), (r + 1, c + 1)]
                            .iter()
                            .filter_map(|p| index.get(p).copied())
                            .collect();
                        data.push((checks, r == 0));
                    }
                }
                CodeGeometry { checks: index.len(), data }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchLayout {
    pub name: String,
    pub code: CodeFamily,
    pub distance: u32,
    pub offset: u64,
    pub checks: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub stride: u64,
    pub patches: Vec<PatchLayout>,
}

impl Layout {
    pub fn new(patches: Vec<(String, CodeFamily, u32)>) -> Result<Self> {
        let mut offset = 0;
        let mut out = Vec::with_capacity(patches.len());
        for (name, code, distance) in patches {
            let checks = CodeGeometry::new(code, distance)?.checks as u64;
            out.push(PatchLayout { name, code, distance, offset, checks });
            offset += checks;
        }
        Ok(Layout { stride: offset, patches: out })
    }

    pub fn detector(&self, patch: usize, round: u64, check: u64) -> DetectorId {
        DetectorId(round * self.stride + self.patches[patch].offset + check)
    }

    /// `(patch, round, check)` of a detector.
    pub fn locate(&self, d: DetectorId) -> Option<(usize, u64, u64)> {
        if self.stride == 0 {
            return None;
        }
        let round = d.0 / self.stride;
        let pos = d.0 % self.stride;
        let patch = self.patches.iter().position(|p| pos >= p.offset && pos < p.offset + p.checks)?;
        Some((patch, round, pos - self.patches[patch].offset))
    }

    pub fn patch_index(&self, name: &str) -> Option<usize> {
        self.patches.iter().position(|p| p.name == name)
    }

    pub fn layer(&self, patch: usize, round: u64) -> impl Iterator<Item = DetectorId> + '_ {
        (0..self.patches[patch].checks).map(move |c| self.detector(patch, round, c))
    }
}

/// Where an operation instance sits on its patch's timeline.
#[derive(Clone, Debug, PartialEq)]
pub struct OpPlacement {
    pub patch: usize,
    pub first_round: u64,
    /// Another operation on the patch follows (interface layer included).
    pub has_successor: bool,
    /// Observable of the patch lifetime this operation belongs to.
    pub observable: Option<u32>,
    pub observable_count: usize,
}

/// Number of detector layers an operation contributes on its own rounds.
pub fn op_layers(kind: &OpKind, setting: &QecSetting) -> u32 {
    match kind {
        OpKind::Init | OpKind::Measure { .. } | OpKind::Merge { .. } => 1,
        OpKind::Idle { rounds } => rounds.unwrap_or(setting.rounds_per_op),
    }
}

/// Phenomenological decoding graph of one operation. Edge ids are assigned
/// from `first_edge`; the next free id is returned with the graph.
///
/// Every layer carries data-error edges; noisy layers carry measurement
/// (time) edges into the following layer when it exists. The final layer
/// of a measurement is a perfect readout and has no time edges.
pub fn op_decoding_graph(
    kind: &OpKind,
    setting: &QecSetting,
    layout: &Layout,
    at: &OpPlacement,
    first_edge: u64,
) -> Result<(DecodingGraph, u64)> {
    let patch = &layout.patches[at.patch];
    if let OpKind::Merge { .. } = kind {
        return Err(Error::UnsupportedOperation(format!(
            "merge on {} patch `{}` is not supported",
            patch.code, patch.name
        )));
    }
    let geometry = CodeGeometry::new(patch.code, patch.distance)?;
    let layers = op_layers(kind, setting) as u64;
    let noisy = !matches!(kind, OpKind::Measure { .. });
    let has_successor = at.has_successor && noisy;
    let obs: Vec<u32> = at.observable.into_iter().collect();
    let mut b = GraphBuilder::new(at.observable_count);
    let det = |round: u64, check: usize| layout.detector(at.patch, round, check as u64);
    for k in 0..layers {
        let round = at.first_round + k;
        for c in 0..geometry.checks {
            b.add_vertex(det(round, c));
        }
        for (checks, on_support) in &geometry.data {
            let dets: Vec<DetectorId> = checks.iter().map(|&c| det(round, c)).collect();
            b.add_edge(&dets, setting.p_data, if *on_support { &obs } else { &[] });
        }
        if noisy && (k + 1 < layers || has_successor) {
            for c in 0..geometry.checks {
                b.add_vertex(det(round + 1, c));
                b.add_edge(&[det(round, c), det(round + 1, c)], setting.p_meas, &[]);
            }
        }
    }
    b.build(first_edge)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegmentId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PathId(pub u32);

impl fmt::Display for PathId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpInstance {
    pub id: OpInstanceId,
    pub stmt_id: u32,
    pub segment: SegmentId,
    pub kind: OpKind,
    pub placement: OpPlacement,
    pub layers: u32,
    /// Edge ids owned by this instance: `edges.0 .. edges.1`.
    pub edges: (u64, u64),
}

impl OpInstance {
    pub fn label(&self) -> Option<&str> {
        match &self.kind {
            OpKind::Measure { label } => Some(label),
            _ => None,
        }
    }

    pub fn rounds(&self) -> std::ops::Range<u64> {
        self.placement.first_round..self.placement.first_round + self.layers as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub cond: CondId,
    pub labels: Vec<String>,
    pub then_seg: SegmentId,
    pub else_seg: SegmentId,
}

/// A straight run of operation instances between conditionals.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub id: SegmentId,
    pub ops: Vec<OpInstanceId>,
    pub branch: Option<Branch>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionPath {
    pub id: PathId,
    pub choices: BTreeMap<CondId, bool>,
    pub ops: Vec<OpInstanceId>,
}

/// The unrolled execution tree of a circuit.
#[derive(Clone, Debug)]
pub struct ExecutionTree {
    pub ops: Vec<OpInstance>,
    pub segments: Vec<Segment>,
    pub paths: Vec<ExecutionPath>,
    /// `(earlier, later)` temporally adjacent instances on one patch.
    pub adjacency: Vec<(OpInstanceId, OpInstanceId)>,
    pub observable_count: usize,
}

#[derive(Clone)]
struct PathState {
    clocks: Vec<u64>,
    lifetime: Vec<Option<u32>>,
    last_op: Vec<Option<OpInstanceId>>,
    measured: BTreeSet<String>,
}

struct Unroller<'a> {
    circuit: &'a LogicalCircuit,
    patch_index: BTreeMap<&'a str, usize>,
    rounds_per_op: u32,
    cap: usize,
    leaves: usize,
    ops: Vec<OpInstance>,
    segments: Vec<Segment>,
    adjacency: Vec<(OpInstanceId, OpInstanceId)>,
    observables: u32,
}

impl<'a> Unroller<'a> {
    fn unroll(&mut self, stmts: Vec<&'a Statement>, mut state: PathState) -> Result<SegmentId> {
        let seg = SegmentId(self.segments.len() as u32);
        self.segments.push(Segment { id: seg, ops: Vec::new(), branch: None });
        for (i, stmt) in stmts.iter().enumerate() {
            match stmt {
                Statement::Op(op) => {
                    let patch = self.patch_index[op.patch.as_str()];
                    let live = state.lifetime[patch];
                    match (&op.kind, live) {
                        (OpKind::Init, Some(_)) => {
                            return Err(Error::Validation(format!(
                                "line {}: init on patch `{}` which is already initialized",
                                op.line, op.patch
                            )));
                        }
                        (OpKind::Init, None) => {}
                        (_, None) => {
                            return Err(Error::Validation(format!(
                                "line {}: {} on patch `{}` before init",
                                op.line,
                                op.kind.name(),
                                op.patch
                            )));
                        }
                        _ => {}
                    }
                    if let OpKind::Merge { other } = &op.kind {
                        if state.lifetime[self.patch_index[other.as_str()]].is_none() {
                            return Err(Error::Validation(format!(
                                "line {}: merge on patch `{other}` before init",
                                op.line
                            )));
                        }
                    }
                    let observable = match op.kind {
                        OpKind::Init => {
                            let o = self.observables;
                            self.observables += 1;
                            o
                        }
                        _ => live.expect("checked above"),
                    };
                    let id = OpInstanceId(self.ops.len() as u32);
                    let layers = match &op.kind {
                        OpKind::Idle { rounds } => rounds.unwrap_or(self.rounds_per_op),
                        _ => 1,
                    };
                    if let Some(prev) = state.last_op[patch] {
                        self.adjacency.push((prev, id));
                    }
                    let first_round = state.clocks[patch];
                    state.clocks[patch] += layers as u64;
                    match &op.kind {
                        OpKind::Measure { label } => {
                            if !state.measured.insert(label.clone()) {
                                return Err(Error::Validation(format!(
                                    "line {}: label `{label}` measured twice on one path",
                                    op.line
                                )));
                            }
                            state.lifetime[patch] = None;
                            state.last_op[patch] = None;
                        }
                        _ => {
                            state.lifetime[patch] = Some(observable);
                            state.last_op[patch] = Some(id);
                        }
                    }
                    self.ops.push(OpInstance {
                        id,
                        stmt_id: op.stmt_id,
                        segment: seg,
                        kind: op.kind.clone(),
                        placement: OpPlacement {
                            patch,
                            first_round,
                            has_successor: !matches!(op.kind, OpKind::Measure { .. }),
                            observable: Some(observable),
                            observable_count: 0,
                        },
                        layers,
                        edges: (0, 0),
                    });
                    self.segments[seg.0 as usize].ops.push(id);
                }
                Statement::Cond(cond) => {
                    if let Some(label) = cond.labels.iter().find(|l| !state.measured.contains(*l)) {
                        return Err(Error::Validation(format!(
                            "line {}: condition uses label `{label}` which is not measured on every path reaching it",
                            cond.line
                        )));
                    }
                    let rest = &stmts[i + 1..];
                    let then_stmts = cond.then_body.iter().chain(rest.iter().copied()).collect();
                    let else_stmts = cond.else_body.iter().chain(rest.iter().copied()).collect();
                    let then_seg = self.unroll(then_stmts, state.clone())?;
                    let else_seg = self.unroll(else_stmts, state)?;
                    self.segments[seg.0 as usize].branch =
                        Some(Branch { cond: cond.id, labels: cond.labels.clone(), then_seg, else_seg });
                    return Ok(seg);
                }
            }
        }
        if let Some(p) = state.lifetime.iter().position(Option::is_some) {
            return Err(Error::Validation(format!(
                "patch `{}` is still live at the end of an execution path; every initialized patch must be measured",
                self.circuit.patches[p].name
            )));
        }
        self.leaves += 1;
        if self.leaves > self.cap {
            return Err(Error::Resource(format!("more than {} execution paths", self.cap)));
        }
        Ok(seg)
    }
}

/// Unrolls a circuit into its execution tree, then-branch first.
pub fn unroll_circuit(circuit: &LogicalCircuit, rounds_per_op: u32, cap: usize) -> Result<ExecutionTree> {
    circuit.validate_static()?;
    let patches = circuit.patches.len();
    let mut u = Unroller {
        circuit,
        patch_index: circuit.patches.iter().enumerate().map(|(i, p)| (p.name.as_str(), i)).collect(),
        rounds_per_op,
        cap,
        leaves: 0,
        ops: Vec::new(),
        segments: Vec::new(),
        adjacency: Vec::new(),
        observables: 0,
    };
    let state = PathState {
        clocks: vec![0; patches],
        lifetime: vec![None; patches],
        last_op: vec![None; patches],
        measured: BTreeSet::new(),
    };
    u.unroll(circuit.body.iter().collect(), state)?;
    let observable_count = u.observables as usize;
    for op in &mut u.ops {
        op.placement.observable_count = observable_count;
    }
    let mut paths = Vec::new();
    collect_paths(&u.segments, SegmentId(0), &mut Vec::new(), &mut BTreeMap::new(), &mut paths);
    Ok(ExecutionTree { ops: u.ops, segments: u.segments, paths, adjacency: u.adjacency, observable_count })
}

fn collect_paths(
    segments: &[Segment],
    seg: SegmentId,
    ops: &mut Vec<OpInstanceId>,
    choices: &mut BTreeMap<CondId, bool>,
    out: &mut Vec<ExecutionPath>,
) {
    let s = &segments[seg.0 as usize];
    let before = ops.len();
    ops.extend(&s.ops);
    match &s.branch {
        None => out.push(ExecutionPath { id: PathId(out.len() as u32), choices: choices.clone(), ops: ops.clone() }),
        Some(b) => {
            for (taken, next) in [(true, b.then_seg), (false, b.else_seg)] {
                choices.insert(b.cond, taken);
                collect_paths(segments, next, ops, choices, out);
                choices.remove(&b.cond);
            }
        }
    }
    ops.truncate(before);
}

/// All execution paths, then-branch first, with the default cap.
pub fn enumerate_paths(circuit: &LogicalCircuit) -> Result<Vec<ExecutionPath>> {
    enumerate_paths_with_cap(circuit, DEFAULT_PATH_CAP)
}

pub fn enumerate_paths_with_cap(circuit: &LogicalCircuit, cap: usize) -> Result<Vec<ExecutionPath>> {
    Ok(unroll_circuit(circuit, 1, cap)?.paths)
}

/// Everything the coordinator and simulator need about one compilation.
#[derive(Clone, Debug)]
pub struct Compilation {
    pub setting: QecSetting,
    pub granularity: Granularity,
    pub layout: Layout,
    pub observable_count: usize,
    pub ops: Vec<OpInstance>,
    pub segments: Vec<Segment>,
    pub paths: Vec<ExecutionPath>,
    /// Sorted by id.
    pub blocks: Vec<DecodingBlock>,
    pub path_blocks: Vec<Vec<BlockId>>,
    pub op_block: Vec<BlockId>,
    pub block_types: Vec<BlockTypeKey>,
}

impl Compilation {
    pub fn block(&self, id: BlockId) -> Option<&DecodingBlock> {
        self.block_index(id).map(|i| &self.blocks[i])
    }

    pub fn block_index(&self, id: BlockId) -> Option<usize> {
        self.blocks.binary_search_by_key(&id, |b| b.id).ok()
    }

    pub fn op(&self, id: OpInstanceId) -> Option<&OpInstance> {
        self.ops.get(id.0 as usize)
    }

    pub fn block_type_of(&self, id: BlockId) -> Option<&BlockTypeKey> {
        self.block_index(id).map(|i| &self.block_types[i])
    }

    /// Distinct block types with the blocks of each.
    pub fn type_table(&self) -> BTreeMap<&BlockTypeKey, Vec<BlockId>> {
        let mut table: BTreeMap<&BlockTypeKey, Vec<BlockId>> = BTreeMap::new();
        for (b, key) in self.blocks.iter().zip(&self.block_types) {
            table.entry(key).or_default().push(b.id);
        }
        table
    }

    pub fn conditional_labels(&self, cond: CondId) -> Option<&[String]> {
        self.segments.iter().filter_map(|s| s.branch.as_ref()).find(|b| b.cond == cond).map(|b| b.labels.as_slice())
    }
}

/// Compiles a circuit into decoding blocks for every execution path.
pub fn generate_blocks(circuit: &LogicalCircuit, setting: &QecSetting, granularity: Granularity) -> Result<Compilation> {
    generate_blocks_with_cap(circuit, setting, granularity, DEFAULT_PATH_CAP)
}

pub fn generate_blocks_with_cap(
    circuit: &LogicalCircuit,
    setting: &QecSetting,
    granularity: Granularity,
    cap: usize,
) -> Result<Compilation> {
    setting.validate()?;
    let tree = unroll_circuit(circuit, setting.rounds_per_op, cap)?;
    let layout = Layout::new(
        circuit
            .patches
            .iter()
            .map(|p| (p.name.clone(), p.code.unwrap_or(setting.code), p.distance.unwrap_or(setting.distance)))
            .collect(),
    )?;
    let mut ops = tree.ops;
    let mut next_edge = 0;
    let mut blocks: BTreeMap<BlockId, DecodingBlock> = BTreeMap::new();
    for op in &mut ops {
        let (graph, next) = op_decoding_graph(&op.kind, setting, &layout, &op.placement, next_edge)?;
        op.edges = (next_edge, next);
        next_edge = next;
        let id = BlockId(op.id.0);
        blocks.insert(id, DecodingBlock { id, covers: [op.id].into(), graph, boundaries: BTreeMap::new() });
    }
    for &(a, b) in &tree.adjacency {
        let (ba, bb) = (BlockId(a.0), BlockId(b.0));
        let shared = crate::block::combination_boundary(&blocks[&ba], &blocks[&bb]);
        if shared.is_empty() {
            return Err(Error::Integrity(format!("adjacent operations {a} and {b} share no detectors")));
        }
        blocks.get_mut(&ba).expect("exists").boundaries.insert(bb, shared.clone());
        blocks.get_mut(&bb).expect("exists").boundaries.insert(ba, shared);
    }

    let mut op_block: Vec<BlockId> = ops.iter().map(|o| BlockId(o.id.0)).collect();
    let mut fresh = ops.len() as u32;
    let limit = granularity.limit();
    for seg in &tree.segments {
        let mut by_patch: BTreeMap<usize, Vec<OpInstanceId>> = BTreeMap::new();
        for &op in &seg.ops {
            by_patch.entry(ops[op.0 as usize].placement.patch).or_default().push(op);
        }
        let mut runs: Vec<Vec<OpInstanceId>> =
            by_patch.into_values().flat_map(|v| v.chunks(limit).map(<[_]>::to_vec).collect::<Vec<_>>()).collect();
        runs.sort_by_key(|r| r[0]);
        for run in runs.into_iter().filter(|r| r.len() > 1) {
            let id = BlockId(fresh);
            fresh += 1;
            let mut acc = blocks.remove(&BlockId(run[0].0)).expect("single block");
            rekey(&mut blocks, acc.id, id);
            acc.id = id;
            for op in &run[1..] {
                let next = blocks.remove(&BlockId(op.0)).expect("single block");
                acc = merge_blocks(&acc, &next, id)?;
                rekey(&mut blocks, next.id, id);
            }
            for op in &run {
                op_block[op.0 as usize] = id;
            }
            blocks.insert(id, acc);
        }
    }

    let blocks: Vec<DecodingBlock> = blocks.into_values().collect();
    let block_types = blocks.iter().map(block_type).collect();
    let path_blocks = tree
        .paths
        .iter()
        .map(|p| {
            let mut seen = BTreeSet::new();
            p.ops.iter().map(|o| op_block[o.0 as usize]).filter(|b| seen.insert(*b)).collect()
        })
        .collect();
    Ok(Compilation {
        setting: setting.clone(),
        granularity,
        layout,
        observable_count: tree.observable_count,
        ops,
        segments: tree.segments,
        paths: tree.paths,
        blocks,
        path_blocks,
        op_block,
        block_types,
    })
}

/// Redirects every neighbour's boundary entry for `old` to `new`,
/// unioning with an existing `new` entry.
fn rekey(blocks: &mut BTreeMap<BlockId, DecodingBlock>, old: BlockId, new: BlockId) {
    for b in blocks.values_mut() {
        if let Some(set) = b.boundaries.remove(&old) {
            b.boundaries.entry(new).or_default().extend(set);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::combination_boundary;
    use crate::graph::{graphs_identical, merge_graphs};

    fn rep(d: u32) -> QecSetting {
        QecSetting::repetition(d, 0.05).unwrap()
    }

    fn parse(body: &str) -> LogicalCircuit {
        LogicalCircuit::parse(&format!("blockdecode-circuit v1\n{body}")).unwrap()
    }

    fn lone(kind: OpKind, d: u32, has_successor: bool) -> DecodingGraph {
        let layout = Layout::new(vec![("q".into(), CodeFamily::Repetition, d)]).unwrap();
        let at = OpPlacement { patch: 0, first_round: 0, has_successor, observable: Some(0), observable_count: 1 };
        op_decoding_graph(&kind, &rep(d), &layout, &at, 0).unwrap().0
    }

    fn count_kinds(g: &DecodingGraph, layout_stride: u64) -> (usize, usize, usize) {
        let mut space = 0;
        let mut boundary = 0;
        let mut time = 0;
        for e in g.edges() {
            match e.detectors.as_slice() {
                [_] => boundary += 1,
                [a, b] if a.0 / layout_stride == b.0 / layout_stride => space += 1,
                _ => time += 1,
            }
        }
        (space, boundary, time)
    }

    #[test]
    fn lone_idle_one_round() {
        let g = lone(OpKind::Idle { rounds: Some(1) }, 3, false);
        assert_eq!(g.vertices().len(), 2);
        assert_eq!(count_kinds(&g, 2), (1, 2, 0));
    }

    #[test]
    fn lone_idle_two_rounds() {
        let g = lone(OpKind::Idle { rounds: Some(2) }, 3, false);
        assert_eq!(g.vertices().len(), 4);
        assert_eq!(count_kinds(&g, 2), (2, 4, 2));
    }

    #[test]
    fn detectors_per_round() {
        let g = lone(OpKind::Idle { rounds: Some(3) }, 5, false);
        assert_eq!(g.vertices().len(), 3 * 4);
        for (code, d, n) in [(CodeFamily::RotatedSurface, 3, 4), (CodeFamily::RotatedSurface, 5, 12)] {
            assert_eq!(CodeGeometry::new(code, d).unwrap().checks, n);
        }
    }

    #[test]
    fn surface_geometry_is_consistent() {
        for d in [3u32, 5, 7] {
            let g = CodeGeometry::new(CodeFamily::RotatedSurface, d).unwrap();
            assert_eq!(g.checks, ((d * d - 1) / 2) as usize);
            // every data qubit touches one or two Z checks; boundary ones are
            // exactly the top and bottom rows
            for (q, (checks, on_support)) in g.data.iter().enumerate() {
                let row = q / d as usize;
                let edge_row = row == 0 || row == d as usize - 1;
                assert_eq!(checks.len(), if edge_row { 1 } else { 2 }, "qubit {q}");
                assert_eq!(*on_support, row == 0);
            }
        }
    }

    #[test]
    fn surface_boundary_duplicates_are_composed() {
        let layout = Layout::new(vec![("q".into(), CodeFamily::RotatedSurface, 3)]).unwrap();
        let setting = QecSetting::new(CodeFamily::RotatedSurface, 3, 0.1, 0.1, 1).unwrap();
        let at = OpPlacement { patch: 0, first_round: 0, has_successor: false, observable: Some(0), observable_count: 1 };
        let (g, _) = op_decoding_graph(&OpKind::Idle { rounds: Some(1) }, &setting, &layout, &at, 0).unwrap();
        // 9 data qubits; (0,0)/(0,1) and (2,1)/(2,2) pair up on a shared check
        assert_eq!(g.edges().len(), 7);
        assert!(g.edges().iter().any(|e| (e.probability - 0.18).abs() < 1e-12));
    }

    #[test]
    fn merge_is_unsupported() {
        let layout = Layout::new(vec![("q".into(), CodeFamily::Repetition, 3)]).unwrap();
        let at = OpPlacement { patch: 0, first_round: 0, has_successor: false, observable: None, observable_count: 0 };
        let err = op_decoding_graph(&OpKind::Merge { other: "r".into() }, &rep(3), &layout, &at, 0).unwrap_err();
        assert!(matches!(err, Error::UnsupportedOperation(_)));
    }

    #[test]
    fn layout_roundtrip() {
        let layout = Layout::new(vec![
            ("a".into(), CodeFamily::Repetition, 3),
            ("b".into(), CodeFamily::RotatedSurface, 3),
        ])
        .unwrap();
        assert_eq!(layout.stride, 6);
        let d = layout.detector(1, 7, 3);
        assert_eq!(layout.locate(d), Some((1, 7, 3)));
    }

    #[test]
    fn path_counts() {
        let straight = parse("patch q\ninit q\nidle q\nmeasure q -> a\n");
        let paths = enumerate_paths(&straight).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].ops.len(), 3);

        let mut seq = String::from("patch q\npatch r\ninit q\nmeasure q -> a\ninit r\n");
        for _ in 0..3 {
            seq.push_str("if parity(a) {\nidle r\n} else {\nidle r 2\n}\n");
        }
        seq.push_str("measure r -> b\n");
        assert_eq!(enumerate_paths(&parse(&seq)).unwrap().len(), 8);

        let nested = parse(
            "patch q\ninit q\nmeasure q -> a\nif parity(a) {\nif parity(a) {\n} else {\n}\n} else {\n}\n",
        );
        let paths = enumerate_paths(&nested).unwrap();
        assert_eq!(paths.len(), 3);
        assert_eq!(paths[0].choices, [(CondId(0), true), (CondId(1), true)].into());
        assert_eq!(paths[2].choices, [(CondId(0), false)].into());
    }

    #[test]
    fn path_cap_is_enforced() {
        let mut src = String::from("patch q\ninit q\nmeasure q -> a\n");
        for _ in 0..4 {
            src.push_str("if parity(a) {\n} else {\n}\n");
        }
        let c = parse(&src);
        assert_eq!(enumerate_paths_with_cap(&c, 16).unwrap().len(), 16);
        assert!(matches!(enumerate_paths_with_cap(&c, 15), Err(Error::Resource(_))));
    }

    #[test]
    fn per_path_validation() {
        for (body, needle) in [
            ("patch q\nidle q\n", "before init"),
            ("patch q\ninit q\ninit q\n", "already initialized"),
            ("patch q\ninit q\nidle q\n", "still live"),
            ("patch q\ninit q\nmeasure q -> a\ninit q\nmeasure q -> a\n", "measured twice"),
            (
                "patch q\npatch r\ninit q\ninit r\nmeasure q -> a\nif parity(a) {\nmeasure r -> b\n} else {\nmeasure r -> c\n}\ninit q\nif parity(b) {\n}\nmeasure q -> d\n",
                "`b`",
            ),
        ] {
            let err = unroll_circuit(&parse(body), 1, 1024).unwrap_err();
            assert!(err.to_string().contains(needle), "{body}: {err}");
        }
    }

    fn chain(n: usize) -> LogicalCircuit {
        let mut body = String::from("patch q\ninit q\n");
        for _ in 0..n {
            body.push_str("idle q\n");
        }
        body.push_str("measure q -> m\n");
        parse(&body)
    }

    #[test]
    fn straight_line_blocks() {
        let c = chain(3);
        let comp = generate_blocks(&c, &rep(3), Granularity::ops(1).unwrap()).unwrap();
        assert_eq!(comp.blocks.len(), 5);
        let pairs: usize = comp.blocks.iter().map(|b| b.boundaries.len()).sum::<usize>() / 2;
        assert_eq!(pairs, 4);
        let whole = generate_blocks(&c, &rep(3), Granularity::ops(5).unwrap()).unwrap();
        assert_eq!(whole.blocks.len(), 1);
        assert!(whole.blocks[0].boundaries.is_empty());
        let inf = generate_blocks(&c, &rep(3), Granularity::Whole).unwrap();
        assert!(graphs_identical(&inf.blocks[0].graph, &whole.blocks[0].graph));
    }

    #[test]
    fn interface_layer_is_the_boundary() {
        let c = chain(2);
        let comp = generate_blocks(&c, &rep(3), Granularity::ops(1).unwrap()).unwrap();
        let (i1, i2) = (&comp.blocks[1], &comp.blocks[2]);
        let shared = combination_boundary(i1, i2);
        assert_eq!(shared.len(), 2);
        assert_eq!(i1.boundaries[&i2.id], shared);
        let merged = merge_graphs(&i1.graph, &i2.graph).unwrap();
        assert_eq!(merged.vertices().len(), i1.graph.vertices().len() + i2.graph.vertices().len() - 2);
        // shared layer is the first layer of the later op
        let (_, round, _) = comp.layout.locate(*shared.iter().next().unwrap()).unwrap();
        assert_eq!(round, comp.ops[2].placement.first_round);
        assert!(graphs_identical(&i1.graph, &i2.graph));
    }

    #[test]
    fn granularity_two_coalesces_pairs() {
        let c = chain(3);
        let comp = generate_blocks(&c, &rep(3), Granularity::ops(2).unwrap()).unwrap();
        assert_eq!(comp.blocks.len(), 3);
        assert_eq!(comp.path_blocks[0].len(), 3);
        let covers: Vec<usize> = comp.path_blocks[0].iter().map(|b| comp.block(*b).unwrap().covers.len()).collect();
        assert_eq!(covers, vec![2, 2, 1]);
        for b in &comp.blocks {
            for (n, set) in &b.boundaries {
                assert_eq!(comp.block(*n).unwrap().boundaries[&b.id], *set);
            }
        }
    }

    #[test]
    fn branch_blocks_share_a_type() {
        let c = parse(
            "patch q\npatch r\ninit q\nmeasure q -> a\ninit r\nif parity(a) {\nidle r\n} else {\nidle r\n}\nmeasure r -> b\n",
        );
        let comp = generate_blocks(&c, &rep(3), Granularity::ops(1).unwrap()).unwrap();
        let idles: Vec<&OpInstance> = comp.ops.iter().filter(|o| o.kind.name() == "idle").collect();
        assert_eq!(idles.len(), 2);
        assert_ne!(idles[0].id, idles[1].id);
        assert_eq!(comp.block_type_of(BlockId(idles[0].id.0)), comp.block_type_of(BlockId(idles[1].id.0)));
        // the init of r borders both branch idles
        let init_r = comp.block(comp.op_block[2]).unwrap();
        assert_eq!(init_r.boundaries.len(), 2);
    }

    #[test]
    fn setting_text_roundtrip() {
        let s = QecSetting::new(CodeFamily::RotatedSurface, 5, 0.01, 0.02, 3).unwrap();
        assert_eq!(QecSetting::parse(&s.to_text()).unwrap(), s);
        assert!(QecSetting::parse("blockdecode-setting v1\ncode repetition\ndistance 4\np_data 0.1\np_meas 0.1\n").is_err());
        assert!("0".parse::<Granularity>().is_err());
        assert_eq!("inf".parse::<Granularity>().unwrap(), Granularity::Whole);
    }
}
