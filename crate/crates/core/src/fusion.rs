//! Fusion-based decoding over decoding blocks.
//!
//! Each block is grown on its own with every combination-boundary detector
//! acting as an open (virtual) boundary. Fusing two partial results merges
//! their graphs and growth, turns the shared detectors back into ordinary
//! vertices and resumes growth for clusters that became odd and unanchored.
//! Peeling waits until no virtual vertex is left.

use std::collections::{BTreeMap, BTreeSet};

use crate::block::{BlockId, DecodingBlock, OpInstanceId};
use crate::error::{Error, Result};
use crate::graph::{merge_graphs, DecodingGraph, DetectorId};
use crate::uf::{grow, peel, ClusterState, Correction, Syndrome};

/// A quiescent, not yet peeled decoding state over one or more blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDecodeResult {
    pub blocks: BTreeSet<BlockId>,
    pub covers: BTreeSet<OpInstanceId>,
    pub graph: DecodingGraph,
    pub state: ClusterState,
    pub defects: BTreeSet<DetectorId>,
    /// `(own block, neighbour block)` → boundary detectors not yet fused.
    pub pending: BTreeMap<(BlockId, BlockId), BTreeSet<DetectorId>>,
    pub virtual_vertices: BTreeSet<DetectorId>,
}

impl BlockDecodeResult {
    /// Neighbour blocks this result still has to be fused with.
    pub fn pending_neighbours(&self) -> BTreeSet<BlockId> {
        self.pending.keys().map(|(_, n)| *n).collect()
    }

    /// Union of the unfused boundaries between this result and `other`.
    pub fn boundary_with(&self, other: &BlockDecodeResult) -> BTreeSet<DetectorId> {
        self.pending
            .iter()
            .filter(|((_, n), _)| other.blocks.contains(n))
            .flat_map(|(_, s)| s.iter().copied())
            .collect()
    }

    fn refresh_virtual(&mut self) {
        self.virtual_vertices = self.pending.values().flatten().copied().collect();
    }
}

/// Grows one block in isolation.
pub fn decode_block(block: &DecodingBlock, syndrome: &Syndrome) -> Result<BlockDecodeResult> {
    if let Some(d) = syndrome.flipped.iter().find(|d| !block.graph.contains_vertex(**d)) {
        return Err(Error::Input(format!("syndrome detector {d} is not in block {}", block.id)));
    }
    let pending: BTreeMap<(BlockId, BlockId), BTreeSet<DetectorId>> =
        block.boundaries.iter().map(|(n, s)| ((block.id, *n), s.clone())).collect();
    let virtual_vertices: BTreeSet<DetectorId> = pending.values().flatten().copied().collect();
    let state = grow(&block.graph, &syndrome.flipped, &virtual_vertices, ClusterState::fresh(&block.graph))?;
    Ok(BlockDecodeResult {
        blocks: [block.id].into(),
        covers: block.covers.clone(),
        graph: block.graph.clone(),
        state,
        defects: syndrome.flipped.clone(),
        pending,
        virtual_vertices,
    })
}

/// Fuses two results across `boundary`, which must equal every unfused
/// boundary recorded between them.
pub fn fuse(r1: BlockDecodeResult, r2: BlockDecodeResult, boundary: &BTreeSet<DetectorId>) -> Result<BlockDecodeResult> {
    if !r1.blocks.is_disjoint(&r2.blocks) || !r1.covers.is_disjoint(&r2.covers) {
        return Err(Error::FusionIntegrity("results overlap".into()));
    }
    let forward = r1.boundary_with(&r2);
    let backward = r2.boundary_with(&r1);
    if forward.is_empty() || forward != backward || forward != *boundary {
        return Err(Error::FusionIntegrity(format!(
            "boundary of {} detectors does not match the recorded boundary between blocks {:?} and {:?}",
            boundary.len(),
            r1.blocks,
            r2.blocks
        )));
    }
    for d in boundary {
        if r1.defects.contains(d) != r2.defects.contains(d) {
            return Err(Error::FusionIntegrity(format!("inputs disagree on detector {d}")));
        }
    }
    let graph = merge_graphs(&r1.graph, &r2.graph)?;
    let state = merge_states(&r1, &r2, &graph);
    let mut pending = BTreeMap::new();
    for (r, other) in [(&r1, &r2), (&r2, &r1)] {
        for (key, set) in &r.pending {
            if !other.blocks.contains(&key.1) {
                pending.insert(*key, set.clone());
            }
        }
    }
    let mut fused = BlockDecodeResult {
        blocks: r1.blocks.union(&r2.blocks).copied().collect(),
        covers: r1.covers.union(&r2.covers).copied().collect(),
        defects: r1.defects.union(&r2.defects).copied().collect(),
        graph,
        state,
        pending,
        virtual_vertices: BTreeSet::new(),
    };
    fused.refresh_virtual();
    fused.state = grow(&fused.graph, &fused.defects, &fused.virtual_vertices, fused.state)?;
    Ok(fused)
}

/// Drops pending boundaries toward blocks that will never be decoded (for
/// example on an untaken branch) and regrows what that releases.
pub fn retire_neighbours(mut r: BlockDecodeResult, gone: &BTreeSet<BlockId>) -> Result<BlockDecodeResult> {
    let before = r.pending.len();
    r.pending.retain(|(_, n), _| !gone.contains(n));
    if r.pending.len() == before {
        return Ok(r);
    }
    r.refresh_virtual();
    r.state = grow(&r.graph, &r.defects, &r.virtual_vertices, r.state)?;
    Ok(r)
}

/// Peels a fully fused result into a correction on its merged graph.
pub fn finalize(r: &BlockDecodeResult) -> Result<Correction> {
    if !r.virtual_vertices.is_empty() {
        return Err(Error::PrematureFinalize(format!(
            "{} boundary detectors toward {:?} are still unfused",
            r.virtual_vertices.len(),
            r.pending_neighbours()
        )));
    }
    peel(&r.graph, &r.defects, &r.state)
}

fn merge_states(r1: &BlockDecodeResult, r2: &BlockDecodeResult, merged: &DecodingGraph) -> ClusterState {
    let mut state = ClusterState::fresh(merged);
    for r in [r1, r2] {
        for (i, e) in r.graph.edges().iter().enumerate() {
            let j = merged.edge_index(e.id).expect("merged graph holds every input edge");
            state.growth[j] = r.state.growth[i];
            state.grown[j] = r.state.grown[i];
        }
    }
    state
}
