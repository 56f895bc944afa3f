//! End-to-end checks across the compiler, fusion, coordinator and sampler.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use blockdecode::block::BlockId;
use blockdecode::circuit::{CodeFamily, LogicalCircuit, OpKind};
use blockdecode::compiler::{generate_blocks, Compilation, Granularity, QecSetting};
use blockdecode::coordinator::{Coordinator, CoordinatorConfig, RuntimePlan, TaskKind, TaskStatus};
use blockdecode::fusion::{decode_block, finalize, fuse, retire_neighbours, BlockDecodeResult};
use blockdecode::graph::{graphs_identical, merge_graphs, DecodingGraph, EdgeId};
use blockdecode::schedule::{schedule, Capability, TaskSpec};
use blockdecode::sim::{monte_carlo, run_shot, Sampler};
use blockdecode::uf::{syndrome_of, Correction, Syndrome};
use proptest::prelude::*;

fn fixture(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

fn idle_chain(idles: usize, setting: &QecSetting, g: Granularity) -> Compilation {
    let mut src = String::from("blockdecode-circuit v1\npatch q\ninit q\n");
    for _ in 0..idles {
        src.push_str("idle q\n");
    }
    src.push_str("measure q -> m\n");
    generate_blocks(&LogicalCircuit::parse(&src).unwrap(), setting, g).unwrap()
}

fn feedforward(setting: &QecSetting) -> Compilation {
    let c = LogicalCircuit::parse(&fixture("feedforward.circuit")).unwrap();
    generate_blocks(&c, setting, Granularity::ops(1).unwrap()).unwrap()
}

fn union(comp: &Compilation, blocks: &[BlockId]) -> DecodingGraph {
    let mut it = blocks.iter().map(|b| &comp.block(*b).unwrap().graph);
    let first = it.next().unwrap().clone();
    it.fold(first, |g, b| merge_graphs(&g, b).unwrap())
}

/// Decodes every block of a path, fuses adjacent results in the order given
/// by `picks` until no pair shares a boundary, and finalizes each component.
fn fuse_path(comp: &Compilation, path: usize, s: &Syndrome, picks: &[usize]) -> Correction {
    let on_path: BTreeSet<BlockId> = comp.path_blocks[path].iter().copied().collect();
    let mut results: Vec<BlockDecodeResult> = comp.path_blocks[path]
        .iter()
        .map(|id| {
            let b = comp.block(*id).unwrap();
            let r = decode_block(b, &s.restricted_to(&b.graph)).unwrap();
            let off: BTreeSet<BlockId> = r.pending_neighbours().difference(&on_path).copied().collect();
            retire_neighbours(r, &off).unwrap()
        })
        .collect();
    let mut k = 0;
    loop {
        let n = results.len();
        let first = picks[k % picks.len()] % n;
        k += 1;
        let pair = (0..n)
            .map(|o| (first + o) % n)
            .find_map(|i| (0..n).find(|&j| j != i && !results[i].boundary_with(&results[j]).is_empty()).map(|j| (i, j)));
        let Some((i, j)) = pair else { break };
        let (lo, hi) = (i.min(j), i.max(j));
        let b = results.remove(hi);
        let a = results.remove(lo);
        let (a, b) = if k % 2 == 0 { (a, b) } else { (b, a) };
        let boundary = a.boundary_with(&b);
        results.push(fuse(a, b, &boundary).unwrap());
    }
    let full = union(comp, &comp.path_blocks[path]);
    let edges: Vec<EdgeId> = results.iter().flat_map(|r| finalize(r).unwrap().edges).collect();
    Correction::from_edges(&full, edges).unwrap()
}

fn random_errors(graph: &DecodingGraph, mask: &[bool]) -> BTreeSet<EdgeId> {
    graph.edges().iter().zip(mask.iter().cycle()).filter(|(_, m)| **m).map(|(e, _)| e.id).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn any_fusion_order_annihilates(
        mask in prop::collection::vec(prop::bool::weighted(0.08), 1..200),
        picks in prop::collection::vec(0usize..64, 1..16),
        g in 1usize..4,
    ) {
        let setting = QecSetting::new(CodeFamily::Repetition, 5, 0.05, 0.05, 2).unwrap();
        let comp = idle_chain(4, &setting, Granularity::ops(g).unwrap());
        let full = union(&comp, &comp.path_blocks[0]);
        let s = syndrome_of(&full, &random_errors(&full, &mask)).unwrap();
        let c = fuse_path(&comp, 0, &s, &picks);
        prop_assert!(c.annihilates(&full, &s));
    }

    #[test]
    fn branching_paths_annihilate(
        mask in prop::collection::vec(prop::bool::weighted(0.06), 1..300),
        picks in prop::collection::vec(0usize..64, 1..16),
    ) {
        let setting = QecSetting::new(CodeFamily::Repetition, 3, 0.05, 0.05, 2).unwrap();
        let comp = feedforward(&setting);
        for path in 0..comp.paths.len() {
            let full = union(&comp, &comp.path_blocks[path]);
            let s = syndrome_of(&full, &random_errors(&full, &mask)).unwrap();
            let c = fuse_path(&comp, path, &s, &picks);
            prop_assert!(c.annihilates(&full, &s));
        }
    }
}

#[test]
fn surface_code_fusion_annihilates() {
    let setting = QecSetting::new(CodeFamily::RotatedSurface, 3, 0.02, 0.02, 2).unwrap();
    let comp = idle_chain(2, &setting, Granularity::ops(1).unwrap());
    let full = union(&comp, &comp.path_blocks[0]);
    let sampler = Sampler::with_probability(11, 0.04);
    for shot in 0..300 {
        let sample = sampler.sample(&full, shot);
        let c = fuse_path(&comp, 0, &sample.syndrome, &[shot as usize, 3, 1]);
        assert!(c.annihilates(&full, &sample.syndrome), "shot {shot}");
    }
}

#[test]
fn granularity_does_not_change_the_path_graph() {
    let setting = QecSetting::new(CodeFamily::Repetition, 3, 0.03, 0.02, 2).unwrap();
    let reference = idle_chain(5, &setting, Granularity::Whole);
    let whole = union(&reference, &reference.path_blocks[0]);
    for g in 1..=4 {
        let comp = idle_chain(5, &setting, Granularity::ops(g).unwrap());
        assert_eq!(comp.blocks.len(), 7usize.div_ceil(g));
        assert!(graphs_identical(&union(&comp, &comp.path_blocks[0]), &whole), "g={g}");
    }
}

#[test]
fn three_idle_runs_are_all_valid() {
    let setting = QecSetting::new(CodeFamily::Repetition, 3, 0.05, 0.05, 1).unwrap();
    let comp = idle_chain(3, &setting, Granularity::ops(1).unwrap());
    let r = monte_carlo(&comp, 1000, 5, 2).unwrap();
    assert_eq!(r.invalid_corrections, 0);
    // one connected component per shot
    assert_eq!(r.finalized, 1000);
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.rows[0].shots, 1000);
}

#[test]
fn coordinator_respects_dependencies() {
    let setting = QecSetting::new(CodeFamily::Repetition, 3, 0.04, 0.04, 2).unwrap();
    let comp = feedforward(&setting);
    let plan = RuntimePlan::new(&comp);
    for workers in [1, 3] {
        let config = CoordinatorConfig::uniform(workers);
        for shot in 0..40 {
            let out = run_shot(&plan, &config, &Sampler::new(21), shot, &BTreeMap::new()).unwrap();
            let mut coord = Coordinator::new(&plan, &config).unwrap();
            for e in &out.events {
                coord.on_event(e).unwrap();
            }
            coord.finish().unwrap();
            let tasks = coord.tasks();
            for t in tasks {
                assert_eq!(t.status, TaskStatus::Done);
                let (start, end) = (t.start.unwrap(), t.end.unwrap());
                assert_eq!(end - start, t.cost);
                assert!(t.ready.unwrap() <= start);
                if let TaskKind::Fuse { left, right, .. } = t.kind {
                    for input in [left, right] {
                        assert!(tasks[input.0 as usize].end.unwrap() <= start, "task {} starts before {input}", t.id);
                    }
                }
            }
            // workers never overlap
            for w in 0..workers {
                let mut slots: Vec<(u64, u64)> =
                    tasks.iter().filter(|t| t.worker == Some(w)).map(|t| (t.start.unwrap(), t.end.unwrap())).collect();
                slots.sort();
                assert!(slots.windows(2).all(|p| p[0].1 <= p[1].0));
            }

            // untaken branches are never decoded
            let resolved = coord.resolved();
            let path = comp.paths.iter().position(|p| &p.choices == resolved).unwrap();
            let taken: BTreeSet<BlockId> = comp.path_blocks[path].iter().copied().collect();
            let decoded: BTreeSet<BlockId> = tasks
                .iter()
                .filter_map(|t| match t.kind {
                    TaskKind::Decode { block } => Some(block),
                    _ => None,
                })
                .collect();
            assert_eq!(decoded, taken);

            // a readout commits after the decode of its measurement block
            for r in coord.readouts().values() {
                let block = comp.op_block[r.op.0 as usize];
                let t = tasks.iter().find(|t| t.kind == TaskKind::Decode { block }).unwrap();
                assert!(r.commit_tick >= t.end.unwrap());
            }
            let report = coord.latency_report().unwrap();
            assert!(report.stats.makespan >= report.stats.lower_bound());
            assert_eq!(out.branches.len(), 2);
        }
    }
}

#[test]
fn coordinator_is_deterministic() {
    let setting = QecSetting::new(CodeFamily::Repetition, 5, 0.03, 0.03, 2).unwrap();
    let comp = feedforward(&setting);
    let plan = RuntimePlan::new(&comp);
    let config = CoordinatorConfig::uniform(2);
    for shot in 0..20 {
        let a = run_shot(&plan, &config, &Sampler::new(3), shot, &BTreeMap::new()).unwrap();
        let b = run_shot(&plan, &config, &Sampler::new(3), shot, &BTreeMap::new()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.events, b.events);
    }
}

#[test]
fn merged_idle_graphs_share_one_layer() {
    let setting = QecSetting::new(CodeFamily::Repetition, 3, 0.01, 0.01, 2).unwrap();
    let comp = idle_chain(3, &setting, Granularity::ops(1).unwrap());
    let (a, b) = (&comp.blocks[1], &comp.blocks[2]);
    let merged = merge_graphs(&a.graph, &b.graph).unwrap();
    assert_eq!(a.boundaries[&b.id].len(), 2);
    assert_eq!(merged.vertices().len(), a.graph.vertices().len() + b.graph.vertices().len() - 2);
    assert_eq!(merged.edges().len(), a.graph.edges().len() + b.graph.edges().len());
}

#[test]
fn interior_idle_blocks_share_a_type() {
    let setting = QecSetting::new(CodeFamily::RotatedSurface, 3, 0.01, 0.01, 2).unwrap();
    let comp = idle_chain(6, &setting, Granularity::ops(1).unwrap());
    let idle: Vec<usize> = (0..comp.blocks.len())
        .filter(|&i| comp.blocks[i].covers.iter().all(|o| matches!(comp.ops[o.0 as usize].kind, OpKind::Idle { .. })))
        .collect();
    assert_eq!(idle.len(), 6);
    let keys: BTreeSet<&str> = idle.iter().map(|&i| comp.block_types[i].digest()).collect();
    assert_eq!(keys.len(), 1);
    assert_eq!(comp.type_table().len(), 3);
}

#[test]
fn sixteen_blocks_fill_four_workers() {
    let setting = QecSetting::new(CodeFamily::Repetition, 5, 0.01, 0.01, 2).unwrap();
    let comp = idle_chain(16, &setting, Granularity::ops(1).unwrap());
    let cost = comp.blocks[1].graph.edges().len() as u64;
    let tasks: Vec<TaskSpec> = comp.blocks[1..17].iter().map(|b| TaskSpec::new(b.graph.edges().len() as u64)).collect();
    let s = schedule(&tasks, vec![Capability::Any; 4]).unwrap();
    assert_eq!(s.stats.makespan, 4 * cost);
    assert_eq!(s.stats.utilization(), 1.0);
    assert_eq!(s.stats.makespan, s.stats.lower_bound());
}
