//! Weighted Union-Find decoding over decoding graphs.
//!
//! Clusters grow simultaneously by the smallest remaining edge slack, so
//! real-valued weights are handled exactly rather than in half-edge steps.
//! A cluster stops growing once its defect parity is even or it touches an
//! open boundary: the graph's real boundary (the endpoint of every
//! single-detector edge) or a virtual vertex standing in for a fusion
//! boundary. Peeling the grown forest yields the correction.
//!
//! Also hosts [`exhaustive_min_weight`], a brute-force oracle used by tests.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::graph::{DecodingGraph, DetectorId, EdgeId, WEIGHT_TOLERANCE};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Syndrome {
    pub flipped: BTreeSet<DetectorId>,
}

impl Syndrome {
    pub fn new(flipped: impl IntoIterator<Item = DetectorId>) -> Self {
        Syndrome { flipped: flipped.into_iter().collect() }
    }

    pub fn is_empty(&self) -> bool {
        self.flipped.is_empty()
    }

    pub fn restricted_to(&self, graph: &DecodingGraph) -> Syndrome {
        Syndrome { flipped: self.flipped.iter().copied().filter(|d| graph.contains_vertex(*d)).collect() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Correction {
    pub edges: BTreeSet<EdgeId>,
    pub observable_flips: BTreeSet<u32>,
}

impl Correction {
    pub fn from_edges(graph: &DecodingGraph, edges: impl IntoIterator<Item = EdgeId>) -> Result<Self> {
        let edges: BTreeSet<EdgeId> = edges.into_iter().collect();
        let mut observable_flips = BTreeSet::new();
        for id in &edges {
            let e = graph.edge(*id).ok_or_else(|| Error::Input(format!("unknown edge {id}")))?;
            for o in &e.observables {
                if !observable_flips.remove(o) {
                    observable_flips.insert(*o);
                }
            }
        }
        Ok(Correction { edges, observable_flips })
    }

    pub fn weight(&self, graph: &DecodingGraph) -> f64 {
        self.edges.iter().filter_map(|id| graph.edge(*id)).map(|e| e.weight).sum()
    }

    /// Whether the chosen edges reproduce `syndrome` exactly.
    pub fn annihilates(&self, graph: &DecodingGraph, syndrome: &Syndrome) -> bool {
        match syndrome_of(graph, &self.edges) {
            Ok(s) => s == *syndrome,
            Err(_) => false,
        }
    }
}

/// Detectors flipped by a set of edges (symmetric difference).
pub fn syndrome_of(graph: &DecodingGraph, edges: &BTreeSet<EdgeId>) -> Result<Syndrome> {
    let mut flipped = BTreeSet::new();
    for id in edges {
        let e = graph.edge(*id).ok_or_else(|| Error::Input(format!("unknown edge {id}")))?;
        for d in &e.detectors {
            if !flipped.remove(d) {
                flipped.insert(*d);
            }
        }
    }
    Ok(Syndrome { flipped })
}

/// Growth bookkeeping of one decoding problem, aligned with the graph's
/// edge order. Clusters are the connected components of grown edges.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    pub growth: Vec<f64>,
    pub grown: Vec<bool>,
}

impl ClusterState {
    pub fn fresh(graph: &DecodingGraph) -> Self {
        ClusterState { growth: vec![0.0; graph.edges().len()], grown: vec![false; graph.edges().len()] }
    }

    pub fn grown_edges<'a>(&'a self, graph: &'a DecodingGraph) -> impl Iterator<Item = EdgeId> + 'a {
        graph.edges().iter().zip(&self.grown).filter(|(_, g)| **g).map(|(e, _)| e.id)
    }
}

/// Decodes `syndrome` on `graph`.
pub fn decode(graph: &DecodingGraph, syndrome: &Syndrome) -> Result<Correction> {
    let state = grow(graph, &syndrome.flipped, &BTreeSet::new(), ClusterState::fresh(graph))?;
    peel(graph, &syndrome.flipped, &state)
}

/// Grows clusters from `state` until every cluster is frozen.
pub fn grow(
    graph: &DecodingGraph,
    defects: &BTreeSet<DetectorId>,
    virtual_vertices: &BTreeSet<DetectorId>,
    state: ClusterState,
) -> Result<ClusterState> {
    let mut g = Grower::new(graph, defects, virtual_vertices, state)?;
    g.run()?;
    Ok(ClusterState { growth: g.growth, grown: g.grown })
}

/// Extracts a correction from a quiescent state without virtual vertices.
pub fn peel(graph: &DecodingGraph, defects: &BTreeSet<DetectorId>, state: &ClusterState) -> Result<Correction> {
    let g = Grower::new(graph, defects, &BTreeSet::new(), state.clone())?;
    g.peel()
}

struct Grower<'a> {
    graph: &'a DecodingGraph,
    /// Number of real vertices; node `n` is the real boundary.
    n: usize,
    ends: Vec<(u32, u32)>,
    adj: Vec<Vec<u32>>,
    parent: Vec<u32>,
    rank: Vec<u8>,
    odd: Vec<bool>,
    touch: Vec<bool>,
    members: Vec<Vec<u32>>,
    defect: Vec<bool>,
    growth: Vec<f64>,
    grown: Vec<bool>,
}

impl<'a> Grower<'a> {
    fn new(
        graph: &'a DecodingGraph,
        defects: &BTreeSet<DetectorId>,
        virtual_vertices: &BTreeSet<DetectorId>,
        state: ClusterState,
    ) -> Result<Self> {
        let n = graph.vertices().len();
        if state.growth.len() != graph.edges().len() || state.grown.len() != graph.edges().len() {
            return Err(Error::State("cluster state does not match the graph".into()));
        }
        let mut ends = Vec::with_capacity(graph.edges().len());
        let mut adj = vec![Vec::new(); n + 1];
        for (i, e) in graph.edges().iter().enumerate() {
            let idx = |d: &DetectorId| graph.vertex_index(*d).expect("validated graph") as u32;
            let pair = match e.detectors.as_slice() {
                [a] => (idx(a), n as u32),
                [a, b] => (idx(a), idx(b)),
                _ => {
                    return Err(Error::UnsupportedGraph(format!(
                        "edge {} is a hyperedge with {} detectors",
                        e.id,
                        e.detectors.len()
                    )))
                }
            };
            adj[pair.0 as usize].push(i as u32);
            adj[pair.1 as usize].push(i as u32);
            ends.push(pair);
        }
        let mut defect = vec![false; n + 1];
        for d in defects {
            let i = graph
                .vertex_index(*d)
                .ok_or_else(|| Error::Input(format!("syndrome detector {d} is not in the graph")))?;
            defect[i] = true;
        }
        let mut touch = vec![false; n + 1];
        touch[n] = true;
        for d in virtual_vertices {
            let i = graph
                .vertex_index(*d)
                .ok_or_else(|| Error::Input(format!("virtual detector {d} is not in the graph")))?;
            touch[i] = true;
        }
        let mut g = Grower {
            graph,
            n,
            ends,
            adj,
            parent: (0..=n as u32).collect(),
            rank: vec![0; n + 1],
            odd: defect.clone(),
            touch,
            members: (0..=n as u32).map(|i| vec![i]).collect(),
            defect,
            growth: state.growth,
            grown: state.grown,
        };
        for e in 0..g.ends.len() {
            if g.grown[e] {
                let (a, b) = g.ends[e];
                g.union(a, b);
            }
        }
        Ok(g)
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let gp = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = gp;
            x = gp;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.rank[ra as usize] < self.rank[rb as usize] {
            std::mem::swap(&mut ra, &mut rb);
        }
        if self.rank[ra as usize] == self.rank[rb as usize] {
            self.rank[ra as usize] += 1;
        }
        self.parent[rb as usize] = ra;
        let moved = std::mem::take(&mut self.members[rb as usize]);
        self.members[ra as usize].extend(moved);
        self.odd[ra as usize] ^= self.odd[rb as usize];
        self.touch[ra as usize] |= self.touch[rb as usize];
    }

    fn is_active_root(&self, r: usize) -> bool {
        self.parent[r] == r as u32 && self.odd[r] && !self.touch[r]
    }

    fn run(&mut self) -> Result<()> {
        let mut rate = vec![0u8; self.ends.len()];
        let mut touched: Vec<u32> = Vec::new();
        loop {
            let active: Vec<u32> = (0..=self.n).filter(|&r| self.is_active_root(r)).map(|r| r as u32).collect();
            if active.is_empty() {
                return Ok(());
            }
            for &r in &active {
                for mi in 0..self.members[r as usize].len() {
                    let m = self.members[r as usize][mi];
                    for ei in 0..self.adj[m as usize].len() {
                        let e = self.adj[m as usize][ei];
                        if self.grown[e as usize] {
                            continue;
                        }
                        let (a, b) = self.ends[e as usize];
                        if self.find(a) == self.find(b) {
                            continue;
                        }
                        if rate[e as usize] == 0 {
                            touched.push(e);
                        }
                        rate[e as usize] += 1;
                    }
                }
            }
            if touched.is_empty() {
                let v = active[0] as usize;
                return Err(Error::Infeasible(format!(
                    "cluster containing detector {} cannot reach a partner or boundary",
                    self.graph.vertices()[v]
                )));
            }
            let edges = self.graph.edges();
            let dt = touched
                .iter()
                .map(|&e| (edges[e as usize].weight - self.growth[e as usize]) / rate[e as usize] as f64)
                .fold(f64::INFINITY, f64::min)
                .max(0.0);
            touched.sort_unstable();
            let mut completed = Vec::new();
            for &e in &touched {
                let ei = e as usize;
                let w = edges[ei].weight;
                let slack = (w - self.growth[ei]) / rate[ei] as f64;
                self.growth[ei] += rate[ei] as f64 * dt;
                if slack <= dt || w - self.growth[ei] <= 1e-12 * (1.0 + w) {
                    self.growth[ei] = w;
                    self.grown[ei] = true;
                    completed.push(e);
                } else if self.growth[ei] > w {
                    self.growth[ei] = w;
                }
                rate[ei] = 0;
            }
            touched.clear();
            for e in completed {
                let (a, b) = self.ends[e as usize];
                self.union(a, b);
            }
        }
    }

    fn peel(self) -> Result<Correction> {
        let nodes = self.n + 1;
        let mut forest: Vec<Vec<(u32, u32)>> = vec![Vec::new(); nodes];
        for (e, &(a, b)) in self.ends.iter().enumerate() {
            if self.grown[e] {
                forest[a as usize].push((b, e as u32));
                forest[b as usize].push((a, e as u32));
            }
        }
        let mut visited = vec![false; nodes];
        let mut parent_edge: Vec<Option<(u32, u32)>> = vec![None; nodes];
        let mut order = Vec::with_capacity(nodes);
        let starts = std::iter::once(self.n).chain(0..self.n);
        for root in starts {
            if visited[root] {
                continue;
            }
            visited[root] = true;
            let first = order.len();
            order.push(root as u32);
            let mut head = first;
            while head < order.len() {
                let v = order[head] as usize;
                head += 1;
                for &(u, e) in &forest[v] {
                    if !visited[u as usize] {
                        visited[u as usize] = true;
                        parent_edge[u as usize] = Some((v as u32, e));
                        order.push(u);
                    }
                }
            }
        }
        let mut defect = self.defect.clone();
        let mut chosen = Vec::new();
        for &v in order.iter().rev() {
            let v = v as usize;
            if !defect[v] {
                continue;
            }
            match parent_edge[v] {
                Some((p, e)) => {
                    defect[v] = false;
                    defect[p as usize] ^= true;
                    chosen.push(self.graph.edges()[e as usize].id);
                }
                None if v == self.n => {}
                None => {
                    return Err(Error::Infeasible(format!(
                        "odd cluster rooted at detector {} left after growth",
                        self.graph.vertices()[v]
                    )))
                }
            }
        }
        Correction::from_edges(self.graph, chosen)
    }
}

/// Maximum edge count accepted by [`exhaustive_min_weight`].
pub const EXHAUSTIVE_EDGE_LIMIT: usize = 20;

/// Minimum-weight edge set reproducing `syndrome`, by enumerating all edge
/// subsets. Ties go to the lexicographically smallest sorted edge-id list.
/// Hyperedges are allowed.
pub fn exhaustive_min_weight(graph: &DecodingGraph, syndrome: &Syndrome) -> Result<Correction> {
    let m = graph.edges().len();
    if m > EXHAUSTIVE_EDGE_LIMIT {
        return Err(Error::Resource(format!("{m} edges exceed the exhaustive limit of {EXHAUSTIVE_EDGE_LIMIT}")));
    }
    let n = graph.vertices().len();
    let words = n.div_ceil(64).max(1);
    let mask_of = |dets: &mut dyn Iterator<Item = &DetectorId>| -> Result<Vec<u64>> {
        let mut mask = vec![0u64; words];
        for d in dets {
            let i = graph.vertex_index(*d).ok_or_else(|| Error::Input(format!("detector {d} not in graph")))?;
            mask[i / 64] ^= 1 << (i % 64);
        }
        Ok(mask)
    };
    let edge_masks: Vec<Vec<u64>> =
        graph.edges().iter().map(|e| mask_of(&mut e.detectors.iter())).collect::<Result<_>>()?;
    let target = mask_of(&mut syndrome.flipped.iter())?;

    let mut current = vec![0u64; words];
    let mut best: Option<(f64, Vec<usize>)> = None;
    for i in 0u64..(1u64 << m) {
        if i > 0 {
            // Gray code: flip the edge at the lowest set bit of i.
            let e = i.trailing_zeros() as usize;
            for (c, x) in current.iter_mut().zip(&edge_masks[e]) {
                *c ^= x;
            }
        }
        if current != target {
            continue;
        }
        let gray = i ^ (i >> 1);
        let subset: Vec<usize> = (0..m).filter(|b| gray >> b & 1 == 1).collect();
        let w: f64 = subset.iter().map(|&e| graph.edges()[e].weight).sum();
        let better = match &best {
            None => true,
            Some((bw, bs)) => w < bw - WEIGHT_TOLERANCE || ((w - bw).abs() <= WEIGHT_TOLERANCE && subset < *bs),
        };
        if better {
            best = Some((w, subset));
        }
    }
    let (_, subset) = best.ok_or_else(|| Error::Infeasible("no edge subset reproduces the syndrome".into()))?;
    Correction::from_edges(graph, subset.into_iter().map(|e| graph.edges()[e].id))
}
