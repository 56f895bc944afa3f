//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use blockdecode::circuit::{CodeFamily, LogicalCircuit, OpKind, Statement};
use blockdecode::compiler::{enumerate_paths, generate_blocks, Compilation, Granularity, QecSetting};
use blockdecode::coordinator::{CoordinatorConfig, RuntimePlan};
use blockdecode::graph::{merge_graphs, DecodingGraph, EdgeId, WEIGHT_TOLERANCE};
use blockdecode::schedule::{schedule, Capability, TaskSpec};
use blockdecode::sim::{monte_carlo, run_shot, Sampler};
use blockdecode::uf::{decode, exhaustive_min_weight, syndrome_of, Syndrome};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn tests_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn idle_chain(idles: usize, setting: &QecSetting, g: Granularity) -> Compilation {
    let mut src = String::from("blockdecode-circuit v1\npatch q\ninit q\n");
    for _ in 0..idles {
        src.push_str("idle q\n");
    }
    src.push_str("measure q -> m\n");
    generate_blocks(&LogicalCircuit::parse(&src).unwrap(), setting, g).unwrap()
}

fn rep(d: u32, p: f64, rounds: u32) -> QecSetting {
    QecSetting::new(CodeFamily::Repetition, d, p, p, rounds).unwrap()
}

fn g1() -> Granularity {
    Granularity::ops(1).unwrap()
}

fn correction_validity() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for d in [3, 5] {
        for g in [g1(), Granularity::Whole] {
            let comp = idle_chain(3, &rep(d, 0.05, 1), g);
            let r = monte_carlo(&comp, 10_000, 1, 1).map_err(|e| e.to_string())?;
            ok &= r.invalid_corrections == 0 && r.finalized >= 10_000;
            parts.push(format!("d={d} g={g}: {}/{} valid", r.finalized - r.invalid_corrections, r.finalized));
        }
    }
    check(ok, parts.join(", "))
}

fn fusion_equivalence() -> Outcome {
    let shots = 10_000u64;
    let ler = |g| -> Result<f64, String> {
        let comp = idle_chain(3, &rep(3, 0.05, 1), g);
        let r = monte_carlo(&comp, shots, 2026, 1).map_err(|e| e.to_string())?;
        Ok(r.row("m").unwrap().ler)
    };
    let (fused, whole) = (ler(g1())?, ler(Granularity::Whole)?);
    let n = shots as f64;
    let sigma = (fused * (1.0 - fused) / n + whole * (1.0 - whole) / n).sqrt();
    let diff = (fused - whole).abs();
    check(diff <= 3.0 * sigma, format!("LER g=1 {fused:.4}, g=inf {whole:.4}, |diff| {diff:.4} vs 3 sigma {:.4}", 3.0 * sigma))
}

fn error_suppression() -> Outcome {
    let mut rows = Vec::new();
    for d in [3, 5] {
        let comp = idle_chain(3, &rep(d, 0.01, 1), g1());
        let r = monte_carlo(&comp, 100_000, 11, 1).map_err(|e| e.to_string())?;
        rows.push(r.row("m").unwrap().clone());
    }
    let (d3, d5) = (&rows[0], &rows[1]);
    check(
        d5.ler < d3.ler && d5.ci.1 < d3.ci.0,
        format!(
            "d=3 {:.5} [{:.5}, {:.5}], d=5 {:.5} [{:.5}, {:.5}]",
            d3.ler, d3.ci.0, d3.ci.1, d5.ler, d5.ci.0, d5.ci.1
        ),
    )
}

/// Block graphs and merged neighbour pairs from a few small compilations.
fn small_graphs() -> Vec<DecodingGraph> {
    let surface = QecSetting::new(CodeFamily::RotatedSurface, 3, 0.02, 0.03, 1).unwrap();
    let comps = [
        idle_chain(2, &rep(3, 0.05, 1), g1()),
        idle_chain(2, &QecSetting::new(CodeFamily::Repetition, 3, 0.02, 0.08, 2).unwrap(), g1()),
        idle_chain(1, &rep(3, 0.05, 1), Granularity::ops(2).unwrap()),
        idle_chain(1, &rep(5, 0.03, 1), g1()),
        idle_chain(1, &surface, g1()),
    ];
    let mut graphs = Vec::new();
    for comp in &comps {
        for b in &comp.blocks {
            graphs.push(b.graph.clone());
            for n in b.boundaries.keys().filter(|n| **n > b.id) {
                graphs.push(merge_graphs(&b.graph, &comp.block(*n).unwrap().graph).unwrap());
            }
        }
    }
    graphs.retain(|g| !g.edges().is_empty() && g.edges().len() <= 10);
    graphs
}

fn oracle_dominance() -> Outcome {
    let graphs = small_graphs();
    let mut syndromes_checked = 0;
    for (i, g) in graphs.iter().enumerate() {
        let m = g.edges().len();
        let mut seen: BTreeSet<Vec<u64>> = BTreeSet::new();
        for mask in 0u32..(1 << m) {
            let edges: BTreeSet<EdgeId> = (0..m).filter(|b| mask >> b & 1 == 1).map(|b| g.edges()[b].id).collect();
            let s: Syndrome = syndrome_of(g, &edges).map_err(|e| e.to_string())?;
            if !seen.insert(s.flipped.iter().map(|d| d.0).collect()) {
                continue;
            }
            let uf = decode(g, &s).map_err(|e| format!("graph {i}: {e}"))?;
            let best = exhaustive_min_weight(g, &s).map_err(|e| format!("graph {i}: {e}"))?;
            if !best.annihilates(g, &s) || !uf.annihilates(g, &s) {
                return Err(format!("graph {i}: a correction misses syndrome {:?}", s.flipped));
            }
            if uf.weight(g) < best.weight(g) - WEIGHT_TOLERANCE {
                return Err(format!("graph {i}: UF weight {} below the optimum {}", uf.weight(g), best.weight(g)));
            }
            syndromes_checked += 1;
        }
    }
    check(graphs.len() >= 10, format!("{} graphs, {syndromes_checked} syndromes", graphs.len()))
}

/// Path count straight from the syntax tree: sequencing multiplies, a
/// conditional adds its two branches.
fn count_paths(body: &[Statement]) -> usize {
    body.iter()
        .map(|s| match s {
            Statement::Op(_) => 1,
            Statement::Cond(c) => count_paths(&c.then_body) + count_paths(&c.else_body),
        })
        .product()
}

fn path_enumeration() -> Outcome {
    let mut src = String::from("blockdecode-circuit v1\npatch a\npatch t\ninit a\ninit t\nmeasure a -> m\n");
    for _ in 0..10 {
        src.push_str("if parity(m) {\n  idle t\n}\n");
    }
    src.push_str("measure t -> z\n");
    let ten = LogicalCircuit::parse(&src).map_err(|e| e.to_string())?;
    let nested = LogicalCircuit::parse(&std::fs::read_to_string(tests_dir().join("fixtures/nested.circuit")).unwrap())
        .map_err(|e| e.to_string())?;
    let (p10, p_nested) = (
        enumerate_paths(&ten).map_err(|e| e.to_string())?.len(),
        enumerate_paths(&nested).map_err(|e| e.to_string())?.len(),
    );
    let (c10, c_nested) = (count_paths(&ten.body), count_paths(&nested.body));
    check(
        p10 == 1024 && p_nested == 3 && p10 == c10 && p_nested == c_nested,
        format!("10 conditionals: {p10} (counter {c10}), nested: {p_nested} (counter {c_nested})"),
    )
}

fn block_typing() -> Outcome {
    let n = 7;
    let comp = idle_chain(n, &rep(3, 0.02, 2), g1());
    let idle_keys: Vec<&str> = comp
        .blocks
        .iter()
        .zip(&comp.block_types)
        .filter(|(b, _)| b.covers.iter().all(|o| matches!(comp.ops[o.0 as usize].kind, OpKind::Idle { .. })))
        .map(|(_, k)| k.digest())
        .collect();
    let distinct: BTreeSet<&str> = idle_keys.iter().copied().collect();

    let src = "blockdecode-circuit v1\npatch a\npatch t\ninit a\ninit t\nmeasure a -> x\nif parity(x) {\n  idle t\n} else {\n  idle t\n}\nmeasure t -> z\n";
    let cond = generate_blocks(&LogicalCircuit::parse(src).unwrap(), &rep(3, 0.02, 2), g1()).map_err(|e| e.to_string())?;
    let branch = cond.segments.iter().find_map(|s| s.branch.clone()).unwrap();
    let key_of = |seg: u32| {
        let op = cond.ops.iter().find(|o| o.segment.0 == seg && matches!(o.kind, OpKind::Idle { .. })).unwrap();
        cond.block_type_of(cond.op_block[op.id.0 as usize]).unwrap().digest().to_string()
    };
    let shared = key_of(branch.then_seg.0) == key_of(branch.else_seg.0);
    check(
        idle_keys.len() == n && distinct.len() == 1 && shared,
        format!("{} idle blocks, {} idle key(s); then/else share a key: {shared}", idle_keys.len(), distinct.len()),
    )
}

fn feed_forward() -> Outcome {
    let circuit =
        LogicalCircuit::parse(&std::fs::read_to_string(tests_dir().join("fixtures/feedforward.circuit")).unwrap()).unwrap();
    let setting = QecSetting::new(CodeFamily::Repetition, 3, 0.0, 0.0, 1).unwrap();
    let comp = generate_blocks(&circuit, &setting, g1()).map_err(|e| e.to_string())?;
    let plan = RuntimePlan::new(&comp);
    let mut cases = 0;
    for workers in [1, 2] {
        for x in [false, true] {
            for y in [false, true] {
                let logical: BTreeMap<String, bool> = [("x".to_string(), x), ("y".to_string(), y)].into();
                let out = run_shot(&plan, &CoordinatorConfig::uniform(workers), &Sampler::new(0), 0, &logical)
                    .map_err(|e| e.to_string())?;
                let want = vec![x, x ^ y];
                if out.branches != want || out.labels["x"] != (false, x) || out.labels["y"] != (false, y) {
                    return Err(format!("x={x} y={y}: branches {:?}, expected {want:?}", out.branches));
                }
                cases += 1;
            }
        }
    }
    check(cases == 8, format!("{cases}/8 scripted assignments resolved as the truth table"))
}

fn scheduling() -> Outcome {
    let comp = idle_chain(16, &rep(5, 0.01, 2), g1());
    let blocks = &comp.blocks[1..17];
    let cost = blocks[0].graph.edges().len() as u64;
    if blocks.iter().any(|b| b.graph.edges().len() as u64 != cost) {
        return Err("idle blocks differ in cost".into());
    }
    let tasks: Vec<TaskSpec> = blocks.iter().map(|b| TaskSpec::new(b.graph.edges().len() as u64)).collect();
    let s = schedule(&tasks, vec![Capability::Any; 4]).map_err(|e| e.to_string())?;
    let fixed = s.stats.makespan == 4 * cost && s.stats.utilization() == 1.0;

    // the bound over random DAGs and over coordinator runs
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut runs = 0;
    for _ in 0..500 {
        let n = 1 + (rng.next_u32() % 30) as usize;
        let tasks: Vec<TaskSpec> = (0..n)
            .map(|i| {
                let deps: Vec<usize> = (0..i).filter(|_| rng.next_u32() % 6 == 0).collect();
                TaskSpec::new(1 + u64::from(rng.next_u32() % 20)).after(deps)
            })
            .collect();
        let w = 1 + (rng.next_u32() % 6) as usize;
        let st = schedule(&tasks, vec![Capability::Any; w]).map_err(|e| e.to_string())?.stats;
        if st.makespan < st.lower_bound() {
            return Err(format!("offline makespan {} below bound {}", st.makespan, st.lower_bound()));
        }
        runs += 1;
    }
    let ff = LogicalCircuit::parse(&std::fs::read_to_string(tests_dir().join("fixtures/feedforward.circuit")).unwrap()).unwrap();
    let comps = [
        generate_blocks(&ff, &rep(3, 0.03, 2), g1()).unwrap(),
        idle_chain(6, &rep(5, 0.02, 1), Granularity::ops(2).unwrap()),
    ];
    for comp in &comps {
        let plan = RuntimePlan::new(comp);
        for w in 1..=4 {
            for shot in 0..50 {
                let o = run_shot(&plan, &CoordinatorConfig::uniform(w), &Sampler::new(4), shot, &BTreeMap::new())
                    .map_err(|e| e.to_string())?;
                let bound = o.critical_path.max(o.total_cost.div_ceil(w as u64));
                if o.makespan < bound {
                    return Err(format!("coordinator makespan {} below bound {bound}", o.makespan));
                }
                runs += 1;
            }
        }
    }
    check(
        fixed,
        format!("16 x cost {cost} on 4 workers: makespan {}, utilization {:.3}; bound held in {runs} runs", s.stats.makespan, s.stats.utilization()),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixtures = tests_dir().join("fixtures");
    let simulate = |tag: &str| -> Result<(Vec<u8>, String, String), String> {
        let out = dir.path().join(format!("{tag}.summary"));
        let trace = dir.path().join(format!("{tag}.trace"));
        let o = Command::new(env!("CARGO_BIN_EXE_blockdecode"))
            .args(["simulate", "--circuit"])
            .arg(fixtures.join("feedforward.circuit"))
            .arg("--setting")
            .arg(fixtures.join("rep3_p01.setting"))
            .args(["--shots", "2000", "--seed", "17", "--workers", "2", "--distance", "3,5", "--out"])
            .arg(&out)
            .arg("--trace")
            .arg(&trace)
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(String::from_utf8_lossy(&o.stderr).into_owned());
        }
        Ok((o.stdout, std::fs::read_to_string(out).unwrap(), std::fs::read_to_string(trace).unwrap()))
    };
    let (a, b) = (simulate("a")?, simulate("b")?);
    let golden = tests_dir().join("golden");
    let o = Command::new(env!("CARGO_BIN_EXE_blockdecode"))
        .arg("decode")
        .arg("--blocks")
        .arg(golden.join("chain.blocks"))
        .arg("--trace")
        .arg(golden.join("chain.trace"))
        .args(["--workers", "2"])
        .output()
        .map_err(|e| e.to_string())?;
    let frozen = std::fs::read(golden.join("chain.log")).unwrap();
    check(
        a == b && o.status.success() && o.stdout == frozen,
        format!("simulate outputs identical: {}, golden replay matches: {}", a == b, o.stdout == frozen),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("correction validity", correction_validity),
        ("fusion accuracy equivalence", fusion_equivalence),
        ("error suppression", error_suppression),
        ("oracle dominance", oracle_dominance),
        ("path enumeration", path_enumeration),
        ("block typing", block_typing),
        ("feed-forward correctness", feed_forward),
        ("scheduling", scheduling),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = run();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name} ({detail}) [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({detail}) [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
