//! Decoding blocks: one operation's decoding graph together with its
//! combination boundaries toward every neighbouring operation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{merge_graphs, DecodingGraph, DetectorId};

/// Identifies a block. Single-operation blocks reuse the operation
/// instance id; coalesced blocks get fresh ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub u32);

/// Identifies one operation instance in the unrolled execution tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OpInstanceId(pub u32);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for OpInstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodingBlock {
    pub id: BlockId,
    /// Operation instances whose graphs were merged into this block.
    pub covers: BTreeSet<OpInstanceId>,
    pub graph: DecodingGraph,
    /// Neighbour block → shared detectors.
    pub boundaries: BTreeMap<BlockId, BTreeSet<DetectorId>>,
}

impl DecodingBlock {
    pub fn new(
        id: BlockId,
        covers: BTreeSet<OpInstanceId>,
        graph: DecodingGraph,
        boundaries: BTreeMap<BlockId, BTreeSet<DetectorId>>,
    ) -> Result<Self> {
        let block = DecodingBlock { id, covers, graph, boundaries };
        block.validate()?;
        Ok(block)
    }

    pub fn validate(&self) -> Result<()> {
        if self.boundaries.contains_key(&self.id) {
            return Err(Error::Integrity(format!("block {} has a boundary with itself", self.id)));
        }
        for (nbr, set) in &self.boundaries {
            if let Some(d) = set.iter().find(|d| !self.graph.contains_vertex(**d)) {
                return Err(Error::Integrity(format!(
                    "boundary of block {} toward {nbr} contains detector {d} outside the block",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// All detectors on any combination boundary of this block.
    pub fn boundary_vertices(&self) -> BTreeSet<DetectorId> {
        self.boundaries.values().flatten().copied().collect()
    }
}

/// Shared detectors of two blocks' graphs.
pub fn combination_boundary(b1: &DecodingBlock, b2: &DecodingBlock) -> BTreeSet<DetectorId> {
    let (small, large) = if b1.graph.vertices().len() <= b2.graph.vertices().len() {
        (&b1.graph, &b2.graph)
    } else {
        (&b2.graph, &b1.graph)
    };
    small.vertices().iter().copied().filter(|d| large.contains_vertex(*d)).collect()
}

/// Merges two blocks into one with id `fresh`. Boundaries toward a common
/// third neighbour are unioned; the boundary between the pair disappears.
pub fn merge_blocks(b1: &DecodingBlock, b2: &DecodingBlock, fresh: BlockId) -> Result<DecodingBlock> {
    let shared = combination_boundary(b1, b2);
    let empty = BTreeSet::new();
    let recorded12 = b1.boundaries.get(&b2.id).unwrap_or(&empty);
    let recorded21 = b2.boundaries.get(&b1.id).unwrap_or(&empty);
    if *recorded12 != shared || *recorded21 != shared {
        return Err(Error::Integrity(format!(
            "recorded boundary between blocks {} and {} does not match their shared detectors",
            b1.id, b2.id
        )));
    }
    if !b1.covers.is_disjoint(&b2.covers) {
        return Err(Error::Integrity(format!("blocks {} and {} cover the same operation", b1.id, b2.id)));
    }
    let graph = merge_graphs(&b1.graph, &b2.graph)?;
    let mut boundaries: BTreeMap<BlockId, BTreeSet<DetectorId>> = BTreeMap::new();
    for (nbr, set) in b1.boundaries.iter().chain(&b2.boundaries) {
        if *nbr == b1.id || *nbr == b2.id {
            continue;
        }
        boundaries.entry(*nbr).or_default().extend(set.iter().copied());
    }
    boundaries.retain(|_, set| !set.is_empty());
    let covers = b1.covers.union(&b2.covers).copied().collect();
    DecodingBlock::new(fresh, covers, graph, boundaries)
}

/// Block type: blocks share a key iff their graphs are identical after
/// canonicalization.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockTypeKey {
    canonical: String,
    digest: String,
}

impl BlockTypeKey {
    pub fn canonical(&self) -> &str {
        &self.canonical
    }

    /// Short stable digest used in files and worker capability lists.
    pub fn digest(&self) -> &str {
        &self.digest
    }
}

impl fmt::Display for BlockTypeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.digest)
    }
}

pub fn block_type(b: &DecodingBlock) -> BlockTypeKey {
    let canon = b.graph.canonical();
    BlockTypeKey { digest: canon.digest(), canonical: canon.serialize() }
}
