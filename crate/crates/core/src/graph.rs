//! Decoding graphs: detectors as vertices, independent error sources as
//! (hyper)edges carrying a weight and the logical observables they flip.
//!
//! Graphs are validated on construction and immutable afterwards. Edges are
//! kept sorted by [`EdgeId`] and vertices by [`DetectorId`], so two graphs
//! holding the same sets compare equal field by field.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Tolerance used when comparing weights.
pub const WEIGHT_TOLERANCE: f64 = 1e-9;

/// A detector: the XOR of a set of stabilizer measurements.
///
/// The integer packs patch position and round; see
/// [`Layout`](crate::compiler::Layout) for the packing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DetectorId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeId(pub u64);

impl fmt::Display for DetectorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Log-likelihood weight `ln((1-p)/p)` of an error with probability `p`.
pub fn weight_from_probability(p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 0.5) {
        return Err(Error::Domain(format!("probability {p} outside (0, 0.5]")));
    }
    Ok(((1.0 - p) / p).ln())
}

/// Probability that exactly one of two independent errors fires.
pub fn compose_probabilities(p1: f64, p2: f64) -> f64 {
    p1 * (1.0 - p2) + p2 * (1.0 - p1)
}

/// One independent error mechanism.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSource {
    pub id: EdgeId,
    /// Sorted, deduplicated. One detector means a boundary edge.
    pub detectors: Vec<DetectorId>,
    pub probability: f64,
    pub weight: f64,
    /// Sorted, deduplicated logical observable indices.
    pub observables: Vec<u32>,
}

impl ErrorSource {
    pub fn new(
        id: EdgeId,
        mut detectors: Vec<DetectorId>,
        probability: f64,
        mut observables: Vec<u32>,
    ) -> Result<Self> {
        detectors.sort_unstable();
        detectors.dedup();
        if detectors.is_empty() {
            return Err(Error::InvalidGraph(format!("edge {id} has no detectors")));
        }
        observables.sort_unstable();
        observables.dedup();
        let weight = weight_from_probability(probability)?;
        Ok(ErrorSource { id, detectors, probability, weight, observables })
    }

    pub fn is_boundary(&self) -> bool {
        self.detectors.len() == 1
    }

    pub fn is_hyperedge(&self) -> bool {
        self.detectors.len() > 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodingGraph {
    vertices: Vec<DetectorId>,
    edges: Vec<ErrorSource>,
    observable_count: usize,
}

impl DecodingGraph {
    pub fn new(
        vertices: impl IntoIterator<Item = DetectorId>,
        mut edges: Vec<ErrorSource>,
        observable_count: usize,
    ) -> Result<Self> {
        let vertices: Vec<DetectorId> = vertices.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        edges.sort_by_key(|e| e.id);
        let graph = DecodingGraph { vertices, edges, observable_count };
        graph.validate()?;
        Ok(graph)
    }

    pub fn empty(observable_count: usize) -> Self {
        DecodingGraph { vertices: Vec::new(), edges: Vec::new(), observable_count }
    }

    pub fn validate(&self) -> Result<()> {
        for pair in self.edges.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::Conflict(format!("duplicate edge id {}", pair[0].id)));
            }
        }
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            if e.detectors.is_empty() {
                return Err(Error::InvalidGraph(format!("edge {} has no detectors", e.id)));
            }
            for d in &e.detectors {
                if !self.contains_vertex(*d) {
                    return Err(Error::InvalidGraph(format!(
                        "edge {} references detector {d} outside the vertex set",
                        e.id
                    )));
                }
            }
            if let Some(o) = e.observables.iter().find(|&&o| o as usize >= self.observable_count) {
                return Err(Error::InvalidGraph(format!(
                    "edge {} flips observable {o} but observable_count is {}",
                    e.id, self.observable_count
                )));
            }
            let expected = weight_from_probability(e.probability)?;
            if (expected - e.weight).abs() > WEIGHT_TOLERANCE {
                return Err(Error::InvalidGraph(format!(
                    "edge {} weight {} inconsistent with probability {}",
                    e.id, e.weight, e.probability
                )));
            }
            if !seen.insert((e.detectors.clone(), e.observables.clone())) {
                return Err(Error::Conflict(format!(
                    "edge {} duplicates the detector set and observables of another edge",
                    e.id
                )));
            }
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[DetectorId] {
        &self.vertices
    }

    pub fn edges(&self) -> &[ErrorSource] {
        &self.edges
    }

    pub fn observable_count(&self) -> usize {
        self.observable_count
    }

    pub fn contains_vertex(&self, d: DetectorId) -> bool {
        self.vertices.binary_search(&d).is_ok()
    }

    pub fn vertex_index(&self, d: DetectorId) -> Option<usize> {
        self.vertices.binary_search(&d).ok()
    }

    pub fn edge(&self, id: EdgeId) -> Option<&ErrorSource> {
        self.edge_index(id).map(|i| &self.edges[i])
    }

    pub fn edge_index(&self, id: EdgeId) -> Option<usize> {
        self.edges.binary_search_by_key(&id, |e| e.id).ok()
    }

    pub fn vertex_set(&self) -> BTreeSet<DetectorId> {
        self.vertices.iter().copied().collect()
    }

    pub fn canonical(&self) -> CanonicalGraph {
        CanonicalGraph::of(self)
    }
}

/// Accumulates edges for one graph, composing duplicates (same detector
/// set and observables) as independent errors.
#[derive(Debug)]
pub struct GraphBuilder {
    observable_count: usize,
    vertices: BTreeSet<DetectorId>,
    order: Vec<(Vec<DetectorId>, Vec<u32>)>,
    probabilities: BTreeMap<(Vec<DetectorId>, Vec<u32>), f64>,
}

impl GraphBuilder {
    pub fn new(observable_count: usize) -> Self {
        GraphBuilder {
            observable_count,
            vertices: BTreeSet::new(),
            order: Vec::new(),
            probabilities: BTreeMap::new(),
        }
    }

    pub fn add_vertex(&mut self, d: DetectorId) {
        self.vertices.insert(d);
    }

    /// Zero-probability mechanisms are dropped.
    pub fn add_edge(&mut self, detectors: &[DetectorId], p: f64, observables: &[u32]) {
        if p <= 0.0 {
            return;
        }
        let mut dets = detectors.to_vec();
        dets.sort_unstable();
        dets.dedup();
        let mut obs = observables.to_vec();
        obs.sort_unstable();
        obs.dedup();
        let key = (dets, obs);
        match self.probabilities.get_mut(&key) {
            Some(existing) => *existing = compose_probabilities(*existing, p),
            None => {
                self.order.push(key.clone());
                self.probabilities.insert(key, p);
            }
        }
    }

    /// Assigns consecutive edge ids starting at `first_edge` in insertion
    /// order. Returns the graph and the next unused edge id.
    pub fn build(self, first_edge: u64) -> Result<(DecodingGraph, u64)> {
        let mut next = first_edge;
        let mut edges = Vec::with_capacity(self.order.len());
        for key in self.order {
            let p = self.probabilities[&key];
            let (dets, obs) = key;
            edges.push(ErrorSource::new(EdgeId(next), dets, p, obs)?);
            next += 1;
        }
        let graph = DecodingGraph::new(self.vertices, edges, self.observable_count)?;
        Ok((graph, next))
    }
}

/// Union of two graphs that share only vertices.
pub fn merge_graphs(g1: &DecodingGraph, g2: &DecodingGraph) -> Result<DecodingGraph> {
    if g1.observable_count != g2.observable_count {
        return Err(Error::Schema(format!(
            "observable_count mismatch: {} vs {}",
            g1.observable_count, g2.observable_count
        )));
    }
    let mut edges = Vec::with_capacity(g1.edges.len() + g2.edges.len());
    let (mut i, mut j) = (0, 0);
    while i < g1.edges.len() || j < g2.edges.len() {
        let take_left = match (g1.edges.get(i), g2.edges.get(j)) {
            (Some(a), Some(b)) if a.id == b.id => {
                return Err(Error::Conflict(format!("edge id {} present in both graphs", a.id)));
            }
            (Some(a), Some(b)) => a.id < b.id,
            (Some(_), None) => true,
            _ => false,
        };
        if take_left {
            edges.push(g1.edges[i].clone());
            i += 1;
        } else {
            edges.push(g2.edges[j].clone());
            j += 1;
        }
    }
    let mut vertices = Vec::with_capacity(g1.vertices.len() + g2.vertices.len());
    let (mut i, mut j) = (0, 0);
    while i < g1.vertices.len() || j < g2.vertices.len() {
        match (g1.vertices.get(i), g2.vertices.get(j)) {
            (Some(a), Some(b)) if a == b => {
                vertices.push(*a);
                i += 1;
                j += 1;
            }
            (Some(a), Some(b)) if a < b => {
                vertices.push(*a);
                i += 1;
            }
            (Some(_), Some(b)) | (None, Some(b)) => {
                vertices.push(*b);
                j += 1;
            }
            (Some(a), None) => {
                vertices.push(*a);
                i += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    let graph = DecodingGraph { vertices, edges, observable_count: g1.observable_count };
    graph.validate()?;
    Ok(graph)
}

/// True iff the graphs are equal up to translation of the id packing.
pub fn graphs_identical(g1: &DecodingGraph, g2: &DecodingGraph) -> bool {
    g1.canonical().approx_eq(&g2.canonical())
}

/// A graph with vertices relabelled `0..n` by sorted id and observables
/// relabelled in order of first use.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalGraph {
    pub vertex_count: usize,
    pub edges: Vec<CanonicalEdge>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalEdge {
    pub detectors: Vec<u32>,
    pub observables: Vec<u32>,
    pub weight: f64,
}

impl CanonicalGraph {
    fn of(g: &DecodingGraph) -> Self {
        let mut edges: Vec<(CanonicalEdge, &[u32])> = g
            .edges
            .iter()
            .map(|e| {
                let detectors =
                    e.detectors.iter().map(|d| g.vertex_index(*d).expect("validated") as u32).collect();
                (CanonicalEdge { detectors, observables: Vec::new(), weight: e.weight }, e.observables.as_slice())
            })
            .collect();
        edges.sort_by(|(a, ao), (b, bo)| {
            a.detectors
                .cmp(&b.detectors)
                .then(ao.len().cmp(&bo.len()))
                .then(a.weight.total_cmp(&b.weight))
                .then(ao.cmp(bo))
        });
        let mut relabel = BTreeMap::new();
        for (_, obs) in &edges {
            for o in obs.iter() {
                let next = relabel.len() as u32;
                relabel.entry(*o).or_insert(next);
            }
        }
        let mut edges: Vec<CanonicalEdge> = edges
            .into_iter()
            .map(|(mut e, obs)| {
                e.observables = obs.iter().map(|o| relabel[o]).collect();
                e.observables.sort_unstable();
                e
            })
            .collect();
        edges.sort_by(|a, b| {
            a.detectors
                .cmp(&b.detectors)
                .then(a.observables.cmp(&b.observables))
                .then(a.weight.total_cmp(&b.weight))
        });
        CanonicalGraph { vertex_count: g.vertices.len(), edges }
    }

    pub fn approx_eq(&self, other: &CanonicalGraph) -> bool {
        self.vertex_count == other.vertex_count
            && self.edges.len() == other.edges.len()
            && self.edges.iter().zip(&other.edges).all(|(a, b)| {
                a.detectors == b.detectors
                    && a.observables == b.observables
                    && (a.weight - b.weight).abs() <= WEIGHT_TOLERANCE
            })
    }

    /// Text serialization; weights rounded to nine decimals.
    pub fn serialize(&self) -> String {
        let mut out = format!("v{}", self.vertex_count);
        for e in &self.edges {
            out.push('|');
            out.push_str(&join(&e.detectors, ","));
            out.push(':');
            out.push_str(&join(&e.observables, ","));
            out.push_str(&format!(":{:.9}", e.weight));
        }
        out
    }

    /// Short hex digest of [`serialize`](Self::serialize).
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.serialize().as_bytes());
        hex::encode(&hash[..8])
    }
}

fn join<T: fmt::Display>(items: &[T], sep: &str) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}
