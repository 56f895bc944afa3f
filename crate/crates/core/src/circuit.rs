//! Logical circuits: patch declarations plus a statement list with
//! two-way conditionals on parities of logical measurement outcomes.
//!
//! Text format, one statement per line, `#` starts a comment:
//!
//! ```text
//! blockdecode-circuit v1
//! patch q
//! patch r rotated-surface 5
//! init q
//! idle q 2
//! measure q -> m0
//! if parity(m0)
//! {
//!   init r
//! }
//! else
//! {
//!   init r
//!   idle r
//! }
//! measure r -> m1
//! ```
//!
//! Braces may also share a line with `if`/`else`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const CIRCUIT_HEADER: &str = "blockdecode-circuit v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CodeFamily {
    Repetition,
    RotatedSurface,
}

impl fmt::Display for CodeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodeFamily::Repetition => "repetition",
            CodeFamily::RotatedSurface => "rotated-surface",
        })
    }
}

impl FromStr for CodeFamily {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "repetition" => Ok(CodeFamily::Repetition),
            "rotated-surface" | "surface" => Ok(CodeFamily::RotatedSurface),
            other => Err(format!("unknown code family `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchDecl {
    pub name: String,
    /// Falls back to the QEC setting when absent.
    pub code: Option<CodeFamily>,
    pub distance: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OpKind {
    Init,
    /// `None` uses the setting's rounds per operation.
    Idle { rounds: Option<u32> },
    Measure { label: String },
    /// Reserved two-patch operation; always rejected by the compiler.
    Merge { other: String },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Init => "init",
            OpKind::Idle { .. } => "idle",
            OpKind::Measure { .. } => "measure",
            OpKind::Merge { .. } => "merge",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpStmt {
    /// Program-order index among operation statements.
    pub stmt_id: u32,
    pub patch: String,
    pub kind: OpKind,
    pub line: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CondId(pub u32);

impl fmt::Display for CondId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conditional {
    pub id: CondId,
    /// Branch condition: parity of the corrected outcomes of these labels.
    pub labels: Vec<String>,
    pub then_body: Vec<Statement>,
    pub else_body: Vec<Statement>,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Statement {
    Op(OpStmt),
    Cond(Conditional),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogicalCircuit {
    pub patches: Vec<PatchDecl>,
    pub body: Vec<Statement>,
}

impl LogicalCircuit {
    pub fn parse(src: &str) -> Result<Self> {
        Parser::new(src)?.parse()
    }

    pub fn patch(&self, name: &str) -> Option<&PatchDecl> {
        self.patches.iter().find(|p| p.name == name)
    }

    pub fn conditional_count(&self) -> usize {
        fn count(body: &[Statement]) -> usize {
            body.iter()
                .map(|s| match s {
                    Statement::Op(_) => 0,
                    Statement::Cond(c) => 1 + count(&c.then_body) + count(&c.else_body),
                })
                .sum()
        }
        count(&self.body)
    }

    /// Path-independent checks: declared patches and labels that some
    /// measurement produces. Per-path checks happen during unrolling.
    pub fn validate_static(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for p in &self.patches {
            if !names.insert(p.name.as_str()) {
                return Err(Error::Validation(format!("patch `{}` declared twice", p.name)));
            }
        }
        let mut produced = BTreeSet::new();
        collect_labels(&self.body, &mut produced);
        self.check_body(&self.body, &names, &produced)
    }

    fn check_body(&self, body: &[Statement], patches: &BTreeSet<&str>, produced: &BTreeSet<String>) -> Result<()> {
        for stmt in body {
            match stmt {
                Statement::Op(op) => {
                    if !patches.contains(op.patch.as_str()) {
                        return Err(Error::Validation(format!(
                            "line {}: operation on undeclared patch `{}`",
                            op.line, op.patch
                        )));
                    }
                    if let OpKind::Merge { other } = &op.kind {
                        if !patches.contains(other.as_str()) {
                            return Err(Error::Validation(format!(
                                "line {}: operation on undeclared patch `{other}`",
                                op.line
                            )));
                        }
                    }
                    if let OpKind::Idle { rounds: Some(0) } = op.kind {
                        return Err(Error::Validation(format!("line {}: idle needs at least one round", op.line)));
                    }
                }
                Statement::Cond(c) => {
                    if c.labels.is_empty() {
                        return Err(Error::Validation(format!("line {}: parity() needs at least one label", c.line)));
                    }
                    for label in &c.labels {
                        if !produced.contains(label) {
                            return Err(Error::Validation(format!(
                                "line {}: condition uses undeclared label `{label}`",
                                c.line
                            )));
                        }
                    }
                    self.check_body(&c.then_body, patches, produced)?;
                    self.check_body(&c.else_body, patches, produced)?;
                }
            }
        }
        Ok(())
    }
}

fn collect_labels(body: &[Statement], out: &mut BTreeSet<String>) {
    for stmt in body {
        match stmt {
            Statement::Op(OpStmt { kind: OpKind::Measure { label }, .. }) => {
                out.insert(label.clone());
            }
            Statement::Op(_) => {}
            Statement::Cond(c) => {
                collect_labels(&c.then_body, out);
                collect_labels(&c.else_body, out);
            }
        }
    }
}

struct Fragment {
    line: usize,
    text: String,
}

struct Parser {
    fragments: Vec<Fragment>,
    pos: usize,
    next_stmt: u32,
    next_cond: u32,
}

impl Parser {
    fn new(src: &str) -> Result<Self> {
        let mut fragments = Vec::new();
        let mut header_seen = false;
        for (i, raw) in src.lines().enumerate() {
            let line = i + 1;
            let text = raw.split('#').next().unwrap_or("").trim();
            if text.is_empty() {
                continue;
            }
            if !header_seen {
                if text != CIRCUIT_HEADER {
                    return Err(Error::parse(line, format!("expected header `{CIRCUIT_HEADER}`")));
                }
                header_seen = true;
                continue;
            }
            let mut current = String::new();
            for ch in text.chars() {
                if ch == '{' || ch == '}' {
                    if !current.trim().is_empty() {
                        fragments.push(Fragment { line, text: current.trim().to_string() });
                    }
                    current.clear();
                    fragments.push(Fragment { line, text: ch.to_string() });
                } else {
                    current.push(ch);
                }
            }
            if !current.trim().is_empty() {
                fragments.push(Fragment { line, text: current.trim().to_string() });
            }
        }
        if !header_seen {
            return Err(Error::parse(1, format!("expected header `{CIRCUIT_HEADER}`")));
        }
        Ok(Parser { fragments, pos: 0, next_stmt: 0, next_cond: 0 })
    }

    fn parse(mut self) -> Result<LogicalCircuit> {
        let mut patches = Vec::new();
        while let Some(f) = self.fragments.get(self.pos) {
            let words: Vec<&str> = f.text.split_whitespace().collect();
            if words[0] != "patch" {
                break;
            }
            let line = f.line;
            let decl = match words.as_slice() {
                [_, name] => PatchDecl { name: ident(name, line)?, code: None, distance: None },
                [_, name, code, d] => PatchDecl {
                    name: ident(name, line)?,
                    code: Some(code.parse().map_err(|m| Error::parse(line, m))?),
                    distance: Some(d.parse().map_err(|_| Error::parse(line, format!("bad distance `{d}`")))?),
                },
                _ => return Err(Error::parse(line, "expected `patch <name> [<code> <distance>]`")),
            };
            patches.push(decl);
            self.pos += 1;
        }
        let body = self.parse_body(false)?;
        Ok(LogicalCircuit { patches, body })
    }

    fn parse_body(&mut self, nested: bool) -> Result<Vec<Statement>> {
        let mut body = Vec::new();
        loop {
            let Some(f) = self.fragments.get(self.pos) else {
                if nested {
                    let line = self.fragments.last().map_or(1, |f| f.line);
                    return Err(Error::parse(line, "unclosed `{`"));
                }
                return Ok(body);
            };
            let line = f.line;
            let text = f.text.clone();
            if text == "}" {
                if !nested {
                    return Err(Error::parse(line, "unmatched `}`"));
                }
                self.pos += 1;
                return Ok(body);
            }
            self.pos += 1;
            if text.starts_with("if") {
                body.push(Statement::Cond(self.parse_conditional(&text, line)?));
            } else {
                body.push(Statement::Op(self.parse_op(&text, line)?));
            }
        }
    }

    fn expect_open(&mut self, after: &str, line: usize) -> Result<()> {
        match self.fragments.get(self.pos) {
            Some(f) if f.text == "{" => {
                self.pos += 1;
                Ok(())
            }
            Some(f) => Err(Error::parse(f.line, format!("expected `{{` after {after}"))),
            None => Err(Error::parse(line, format!("expected `{{` after {after}"))),
        }
    }

    fn parse_conditional(&mut self, text: &str, line: usize) -> Result<Conditional> {
        let rest = text["if".len()..].trim();
        let inner = rest
            .strip_prefix("parity")
            .map(str::trim)
            .and_then(|r| r.strip_prefix('('))
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::parse(line, "expected `if parity(<labels>)`"))?;
        let labels = inner
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| ident(s, line))
            .collect::<Result<Vec<_>>>()?;
        let id = CondId(self.next_cond);
        self.next_cond += 1;
        self.expect_open("`if`", line)?;
        let then_body = self.parse_body(true)?;
        let else_body = match self.fragments.get(self.pos) {
            Some(f) if f.text == "else" => {
                let else_line = f.line;
                self.pos += 1;
                self.expect_open("`else`", else_line)?;
                self.parse_body(true)?
            }
            _ => Vec::new(),
        };
        Ok(Conditional { id, labels, then_body, else_body, line })
    }

    fn parse_op(&mut self, text: &str, line: usize) -> Result<OpStmt> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let kind = match words.as_slice() {
            ["init", _] => OpKind::Init,
            ["idle", _] => OpKind::Idle { rounds: None },
            ["idle", _, n] => OpKind::Idle {
                rounds: Some(n.parse().map_err(|_| Error::parse(line, format!("bad round count `{n}`")))?),
            },
            ["measure", _, "->", label] | ["measure", _, label] => OpKind::Measure { label: ident(label, line)? },
            ["merge", _, other] => OpKind::Merge { other: ident(other, line)? },
            ["patch", ..] => return Err(Error::parse(line, "patch declarations must precede statements")),
            _ => return Err(Error::parse(line, format!("unrecognized statement `{text}`"))),
        };
        let stmt_id = self.next_stmt;
        self.next_stmt += 1;
        Ok(OpStmt { stmt_id, patch: ident(words[1], line)?, kind, line })
    }
}

fn ident(s: &str, line: usize) -> Result<String> {
    let ok = s.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    if ok {
        Ok(s.to_string())
    } else {
        Err(Error::parse(line, format!("invalid identifier `{s}`")))
    }
}
