//! The blocks file: a compilation written as line-oriented text.
//!
//! ```text
//! blockdecode-blocks v1
//! granularity <g>
//! circuit <n>            followed by n lines of circuit source
//! setting <n>            followed by n lines of setting text
//! layout stride <S>
//! patch <name> <code> <d> offset <o> checks <c>
//! observables <k>
//! op <id> segment <s> <kind> patch <p> rounds <a> <b> edges <lo> <hi>
//! path <id> choices <cond>=<0|1>... blocks <ids>...
//! block <id> type <digest> covers <ops>...
//! vertices <ids>...
//! edge <id> <d1>,<d2> <p> <obs,...|->
//! boundary <neighbour> <ids>...
//! end
//! ```
//!
//! Detector ids pack `round * stride + patch offset + check`. Weights are
//! recomputed from `p` on load. Loading recompiles the embedded circuit and
//! rejects the file if any block differs from the recompiled one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::block::{BlockId, DecodingBlock, OpInstanceId};
use crate::circuit::LogicalCircuit;
use crate::compiler::{generate_blocks, Compilation, Granularity, QecSetting};
use crate::error::{Error, Result};
use crate::graph::{DecodingGraph, DetectorId, EdgeId, ErrorSource};

pub const BLOCKS_HEADER: &str = "blockdecode-blocks v1";

fn join<T: ToString>(items: impl IntoIterator<Item = T>, sep: &str) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

/// Serializes a compilation together with its circuit source.
pub fn write_blocks(circuit_src: &str, comp: &Compilation) -> String {
    let mut out = format!("{BLOCKS_HEADER}\ngranularity {}\n", comp.granularity);
    let circuit: Vec<&str> = circuit_src.lines().collect();
    let _ = writeln!(out, "circuit {}", circuit.len());
    for l in &circuit {
        let _ = writeln!(out, "{l}");
    }
    let setting = comp.setting.to_text();
    let _ = writeln!(out, "setting {}", setting.lines().count());
    out.push_str(&setting);
    let _ = writeln!(out, "layout stride {}", comp.layout.stride);
    for p in &comp.layout.patches {
        let _ = writeln!(out, "patch {} {} {} offset {} checks {}", p.name, p.code, p.distance, p.offset, p.checks);
    }
    let _ = writeln!(out, "observables {}", comp.observable_count);
    for op in &comp.ops {
        let kind = match &op.kind {
            crate::circuit::OpKind::Measure { label } => format!("measure {label}"),
            k => k.name().to_string(),
        };
        let r = op.rounds();
        let _ = writeln!(
            out,
            "op {} segment {} {kind} patch {} rounds {} {} edges {} {}",
            op.id, op.segment.0, op.placement.patch, r.start, r.end, op.edges.0, op.edges.1
        );
    }
    for (path, blocks) in comp.paths.iter().zip(&comp.path_blocks) {
        let choices = join(path.choices.iter().map(|(c, t)| format!("{}={}", c.0, u8::from(*t))), " ");
        let _ = writeln!(out, "path {} choices {choices} blocks {}", path.id.0, join(blocks, " "));
    }
    for (b, key) in comp.blocks.iter().zip(&comp.block_types) {
        let _ = writeln!(out, "block {} type {} covers {}", b.id, key.digest(), join(&b.covers, " "));
        let _ = writeln!(out, "vertices {}", join(b.graph.vertices(), " "));
        for e in b.graph.edges() {
            let obs = if e.observables.is_empty() { "-".to_string() } else { join(&e.observables, ",") };
            let _ = writeln!(out, "edge {} {} {} {obs}", e.id, join(&e.detectors, ","), e.probability);
        }
        for (n, set) in &b.boundaries {
            let _ = writeln!(out, "boundary {n} {}", join(set, " "));
        }
        out.push_str("end\n");
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Option<(usize, &'a str)> {
        self.inner.next().map(|(i, l)| (i + 1, l))
    }

    fn expect(&mut self, what: &str) -> Result<(usize, Vec<&'a str>)> {
        let (n, l) = self.next().ok_or_else(|| Error::parse(0, format!("unexpected end of file, expected `{what}`")))?;
        let words: Vec<&str> = l.split_whitespace().collect();
        if words.first() != Some(&what) {
            return Err(Error::parse(n, format!("expected `{what}`")));
        }
        Ok((n, words))
    }

    fn verbatim(&mut self, what: &str) -> Result<String> {
        let (n, words) = self.expect(what)?;
        let count: usize = parse_num(n, words.get(1).copied())?;
        let mut text = String::new();
        for _ in 0..count {
            let (_, l) = self.next().ok_or_else(|| Error::parse(n, format!("`{what}` section is truncated")))?;
            text.push_str(l);
            text.push('\n');
        }
        Ok(text)
    }

    fn peek_word(&mut self) -> Option<&'a str> {
        self.inner.peek().and_then(|(_, l)| l.split_whitespace().next())
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, s: Option<&str>) -> Result<T> {
    let s = s.ok_or_else(|| Error::parse(line, "missing number"))?;
    s.parse().map_err(|_| Error::parse(line, format!("bad number `{s}`")))
}

fn ids(line: usize, words: &[&str], sep: char) -> Result<Vec<u64>> {
    words.iter().flat_map(|w| w.split(sep)).filter(|w| !w.is_empty()).map(|w| parse_num(line, Some(w))).collect()
}

/// A loaded blocks file: the recompiled compilation and its circuit.
#[derive(Debug)]
pub struct BlocksFile {
    pub circuit_src: String,
    pub circuit: LogicalCircuit,
    pub compilation: Compilation,
}

pub fn load_blocks(src: &str) -> Result<BlocksFile> {
    let mut lines = Lines { inner: src.lines().enumerate().peekable() };
    match lines.next() {
        Some((_, BLOCKS_HEADER)) => {}
        Some((n, _)) => return Err(Error::parse(n, format!("expected header `{BLOCKS_HEADER}`"))),
        None => return Err(Error::parse(1, format!("expected header `{BLOCKS_HEADER}`"))),
    }
    let (n, words) = lines.expect("granularity")?;
    let granularity: Granularity =
        words.get(1).ok_or_else(|| Error::parse(n, "missing granularity"))?.parse().map_err(|e: Error| Error::parse(n, e.to_string()))?;
    let circuit_src = lines.verbatim("circuit")?;
    let setting = QecSetting::parse(&lines.verbatim("setting")?)?;
    let circuit = LogicalCircuit::parse(&circuit_src)?;
    let comp = generate_blocks(&circuit, &setting, granularity)?;

    // skip the derived tables; they are regenerated and checked through the blocks
    while let Some(w) = lines.peek_word() {
        if w == "block" {
            break;
        }
        lines.next();
    }
    let mut blocks = Vec::new();
    while lines.peek_word().is_some() {
        let (n, words) = lines.expect("block")?;
        let id = BlockId(parse_num(n, words.get(1).copied())?);
        let digest = words.get(3).copied().unwrap_or_default().to_string();
        let covers: BTreeSet<OpInstanceId> =
            ids(n, words.get(5..).unwrap_or_default(), ' ')?.into_iter().map(|o| OpInstanceId(o as u32)).collect();
        let (n, words) = lines.expect("vertices")?;
        let vertices: Vec<DetectorId> = ids(n, &words[1..], ' ')?.into_iter().map(DetectorId).collect();
        let mut edges = Vec::new();
        let mut boundaries = BTreeMap::new();
        loop {
            let (n, l) = lines.next().ok_or_else(|| Error::parse(0, "unexpected end of file inside a block"))?;
            let words: Vec<&str> = l.split_whitespace().collect();
            match words.first().copied() {
                Some("edge") if words.len() == 5 => {
                    let dets = ids(n, &words[2..3], ',')?.into_iter().map(DetectorId).collect();
                    let p: f64 = parse_num(n, Some(words[3]))?;
                    let obs = if words[4] == "-" {
                        Vec::new()
                    } else {
                        ids(n, &words[4..5], ',')?.into_iter().map(|o| o as u32).collect()
                    };
                    let id = EdgeId(parse_num(n, Some(words[1]))?);
                    edges.push(ErrorSource::new(id, dets, p, obs).map_err(|e| Error::parse(n, e.to_string()))?);
                }
                Some("boundary") if words.len() >= 2 => {
                    let nbr = BlockId(parse_num(n, Some(words[1]))?);
                    let set: BTreeSet<DetectorId> = ids(n, &words[2..], ' ')?.into_iter().map(DetectorId).collect();
                    boundaries.insert(nbr, set);
                }
                Some("end") => break,
                _ => return Err(Error::parse(n, "expected `edge`, `boundary` or `end`")),
            }
        }
        let graph = DecodingGraph::new(vertices, edges, comp.observable_count)?;
        blocks.push((DecodingBlock::new(id, covers, graph, boundaries)?, digest));
    }
    if blocks.len() != comp.blocks.len() {
        return Err(Error::Integrity(format!(
            "file lists {} blocks, the embedded circuit compiles to {}",
            blocks.len(),
            comp.blocks.len()
        )));
    }
    for ((b, digest), (want, key)) in blocks.iter().zip(comp.blocks.iter().zip(&comp.block_types)) {
        if b != want || digest != key.digest() {
            return Err(Error::Integrity(format!("block {} differs from the recompiled circuit", b.id)));
        }
    }
    Ok(BlocksFile { circuit_src, circuit, compilation: comp })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SRC: &str = "blockdecode-circuit v1\npatch q\npatch r\ninit q\ninit r\nmeasure q -> a\nif parity(a) {\n  idle r\n}\nmeasure r -> b\n";

    fn compile(g: Granularity) -> Compilation {
        generate_blocks(&LogicalCircuit::parse(SRC).unwrap(), &QecSetting::repetition(3, 0.02).unwrap(), g).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        for g in [Granularity::ops(1).unwrap(), Granularity::Whole] {
            let comp = compile(g);
            let text = write_blocks(SRC, &comp);
            let loaded = load_blocks(&text).unwrap();
            assert_eq!(loaded.compilation.blocks, comp.blocks);
            assert_eq!(write_blocks(&loaded.circuit_src, &loaded.compilation), text);
        }
    }

    #[test]
    fn tampering_is_detected() {
        let text = write_blocks(SRC, &compile(Granularity::ops(1).unwrap()));
        let bumped = text.replacen(" 0.02 ", " 0.03 ", 1);
        assert!(matches!(load_blocks(&bumped), Err(Error::Integrity(_))));
        let truncated: String = text.lines().take(text.lines().count() - 1).map(|l| format!("{l}\n")).collect();
        assert!(matches!(load_blocks(&truncated), Err(Error::Parse { .. })));
        assert!(matches!(load_blocks("nope"), Err(Error::Parse { line: 1, .. })));
    }
}
