// Copyright 2026 the dam authors
// SPDX-License-Identifier: Apache-2.0 OR MIT

//! Bytecode and the compiler.
//!
//! Code is a table of straight-line blocks. A block is a list of
//! instructions ending in a terminator; there is no fallthrough and no jump
//! except through the block references carried by `CLOS`, `REMOTE` and the
//! `COND` terminator. Compilation is continuation style: `compile_tail t k`
//! produces a block that evaluates `t` and then continues as block `k`.
//! Blocks are hash-consed, so equal code is stored once, references always
//! point at earlier entries in the table, and the compiler itself cannot
//! produce a cycle. The deserializer rechecks both properties since `.dam`
//! files can arrive from anywhere.
//!
//! The textual form of a table is a little s-expression document:
//!
//! ```text
//! (table root 7
//!   (code end)
//!   (code appl end)
//!   (code ret)
//!   (code (var 1) ret)
//!   ...)
//! ```
//!
//! Blocks appear in table order; `root` names the entry the machines start
//! in. Instructions are `(var N)`, `(clos N)`, `appl`, `(lit N)`, `(op +)`,
//! `(remote N A)`; terminators are `end`, `ret` and `(cond N N)`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::syntax::{check_closed_at, AtViolation, CoreTerm, NodeName};

/// Primitive arithmetic on naturals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PrimOp {
    Add,
    /// Truncated subtraction: `a - b` is 0 when `b >= a`.
    Monus,
    Mul,
}

impl core::fmt::Display for PrimOp {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            PrimOp::Add => "+",
            PrimOp::Monus => "-",
            PrimOp::Mul => "*",
        })
    }
}

/// Applies a primitive. `n1` is the value on top of the stack, which is the
/// left operand. Returns `None` on overflow; the machines get stuck there,
/// matching the reference evaluator. Monus cannot overflow.
pub fn apply_prim(op: PrimOp, n1: u64, n2: u64) -> Option<u64> {
    match op {
        PrimOp::Add => n1.checked_add(n2),
        PrimOp::Monus => Some(n1.saturating_sub(n2)),
        PrimOp::Mul => n1.checked_mul(n2),
    }
}

/// Index of a block in a [`CodeTable`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CodeRef(pub u32);

impl core::fmt::Display for CodeRef {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A program point: a block and an offset into it. Offset `len` is the
/// block's terminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CodePos {
    pub code: CodeRef,
    pub pos: u32,
}

impl CodePos {
    pub fn start(code: CodeRef) -> CodePos {
        CodePos { code, pos: 0 }
    }

    pub fn advance(self) -> CodePos {
        CodePos { code: self.code, pos: self.pos + 1 }
    }
}

impl core::fmt::Display for CodePos {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        if self.pos == 0 {
            write!(f, "{}", self.code)
        } else {
            write!(f, "{}+{}", self.code, self.pos)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Instr {
    /// Push the value of variable `n`.
    Var(u32),
    /// Push a closure of the given block over the current environment.
    Clos(CodeRef),
    /// Call: stack holds the argument over the closure.
    Appl,
    /// Push a literal natural.
    Lit(u64),
    /// Apply a primitive to the two topmost naturals.
    Op(PrimOp),
    /// Evaluate the block on the given node, in an empty environment.
    Remote(CodeRef, NodeName),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Terminator {
    /// End of the whole program.
    End,
    /// Return the top of the stack to the continuation below it.
    Ret,
    /// Branch on a natural: first block on 0, second otherwise.
    Cond(CodeRef, CodeRef),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Code {
    pub body: Vec<Instr>,
    pub term: Terminator,
}

/// What sits at a program point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fetched<'a> {
    Instr(&'a Instr),
    Term(&'a Terminator),
}

/// All blocks of a compiled program plus the entry block.
///
/// Invariants, established by the compiler and rechecked on deserialization:
/// every reference inside the table is in range and the reference graph is
/// acyclic. Machines treat a violation as a stuck state rather than a panic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeTable {
    codes: Vec<Code>,
    root: CodeRef,
}

impl CodeTable {
    pub fn root(&self) -> CodeRef {
        self.root
    }

    pub fn code(&self, r: CodeRef) -> Option<&Code> {
        self.codes.get(r.0 as usize)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn blocks(&self) -> &[Code] {
        &self.codes
    }

    /// Total instruction count across blocks, for reporting.
    pub fn instr_count(&self) -> usize {
        self.codes.iter().map(|c| c.body.len()).sum()
    }

    pub fn fetch(&self, p: CodePos) -> Option<Fetched<'_>> {
        let code = self.code(p.code)?;
        let pos = p.pos as usize;
        if pos < code.body.len() {
            Some(Fetched::Instr(&code.body[pos]))
        } else if pos == code.body.len() {
            Some(Fetched::Term(&code.term))
        } else {
            None
        }
    }

    /// Does any block contain a REMOTE instruction? The single-node machine
    /// refuses such programs up front.
    pub fn uses_remote(&self) -> bool {
        self.codes
            .iter()
            .any(|c| c.body.iter().any(|i| matches!(i, Instr::Remote(..))))
    }

    /// Node names mentioned by REMOTE instructions.
    pub fn remote_targets(&self) -> alloc::collections::BTreeSet<NodeName> {
        let mut out = alloc::collections::BTreeSet::new();
        for c in &self.codes {
            for i in &c.body {
                if let Instr::Remote(_, n) = i {
                    out.insert(n.clone());
                }
            }
        }
        out
    }
}

/// Interning table the compiler allocates blocks into.
#[derive(Default)]
pub struct TableBuilder {
    codes: Vec<Code>,
    index: BTreeMap<Code, CodeRef>,
}

impl TableBuilder {
    pub fn new() -> TableBuilder {
        TableBuilder::default()
    }

    pub fn intern(&mut self, code: Code) -> CodeRef {
        if let Some(r) = self.index.get(&code) {
            return *r;
        }
        let r = CodeRef(self.codes.len() as u32);
        self.codes.push(code.clone());
        self.index.insert(code, r);
        r
    }

    /// The block `instr ; k`.
    fn cons(&mut self, instr: Instr, k: CodeRef) -> CodeRef {
        let tail = &self.codes[k.0 as usize];
        let mut body = Vec::with_capacity(tail.body.len() + 1);
        body.push(instr);
        body.extend(tail.body.iter().cloned());
        let term = tail.term.clone();
        self.intern(Code { body, term })
    }

    pub fn finish(self, root: CodeRef) -> CodeTable {
        CodeTable { codes: self.codes, root }
    }
}

/// Compiles `t` so that its value is left for the continuation block `k`.
///
/// The equations, one per constructor:
/// * variables and literals push and continue;
/// * a lambda pushes a closure of its body compiled against a bare `ret`;
/// * an application runs the function, then the argument, then `APPL`, so
///   the callee finds the argument on top of its closure;
/// * an operator runs the right operand first, then the left, then `OP`, so
///   the left operand ends up on top;
/// * `if0` runs the guard against a `cond` terminator over both branches,
///   each compiled against the original continuation;
/// * a placement pushes nothing here: `REMOTE` ships its body, compiled
///   against a bare `ret`, to the target node.
pub fn compile_tail(t: &CoreTerm, k: CodeRef, b: &mut TableBuilder) -> CodeRef {
    match t {
        CoreTerm::Var(n) => b.cons(Instr::Var(*n), k),
        CoreTerm::Lit(n) => b.cons(Instr::Lit(*n), k),
        CoreTerm::Lam(body) => {
            let ret = b.intern(Code { body: Vec::new(), term: Terminator::Ret });
            let body = compile_tail(body, ret, b);
            b.cons(Instr::Clos(body), k)
        }
        CoreTerm::App(f, a) => {
            let call = b.cons(Instr::Appl, k);
            let arg = compile_tail(a, call, b);
            compile_tail(f, arg, b)
        }
        CoreTerm::Op(op, l, r) => {
            let apply = b.cons(Instr::Op(*op), k);
            let left = compile_tail(l, apply, b);
            compile_tail(r, left, b)
        }
        CoreTerm::If0(g, t1, t2) => {
            let then = compile_tail(t1, k, b);
            let els = compile_tail(t2, k, b);
            let cond = b.intern(Code { body: Vec::new(), term: Terminator::Cond(then, els) });
            compile_tail(g, cond, b)
        }
        CoreTerm::At(body, node) => {
            let ret = b.intern(Code { body: Vec::new(), term: Terminator::Ret });
            let body = compile_tail(body, ret, b);
            b.cons(Instr::Remote(body, node.clone()), k)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CompileError {
    /// Placement bodies must be closed; see [`check_closed_at`].
    OpenAt(Vec<AtViolation>),
}

impl core::fmt::Display for CompileError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CompileError::OpenAt(vs) => {
                write!(f, "{} placement annotation(s) capture outer variables:", vs.len())?;
                for v in vs {
                    write!(f, " (path {:?}, escaping index {})", v.path, v.index)?;
                }
                Ok(())
            }
        }
    }
}

/// Compiles a whole program: `t` against a final `end` block.
pub fn compile(t: &CoreTerm) -> Result<CodeTable, CompileError> {
    let violations = check_closed_at(t);
    if !violations.is_empty() {
        return Err(CompileError::OpenAt(violations));
    }
    let mut b = TableBuilder::new();
    let end = b.intern(Code { body: Vec::new(), term: Terminator::End });
    let root = compile_tail(t, end, &mut b);
    Ok(b.finish(root))
}

pub fn serialize(t: &CodeTable) -> String {
    let mut s = String::new();
    s.push_str(&format!("(table root {}", t.root));
    for code in &t.codes {
        s.push_str("\n  (code");
        for i in &code.body {
            s.push(' ');
            s.push_str(&instr_text(i));
        }
        s.push(' ');
        s.push_str(&term_text(&code.term));
        s.push(')');
    }
    s.push_str(")\n");
    return s;

    fn instr_text(i: &Instr) -> String {
        match i {
            Instr::Var(n) => format!("(var {})", n),
            Instr::Clos(r) => format!("(clos {})", r),
            Instr::Appl => "appl".to_string(),
            Instr::Lit(n) => format!("(lit {})", n),
            Instr::Op(op) => format!("(op {})", op),
            Instr::Remote(r, node) => format!("(remote {} {})", r, node),
        }
    }

    fn term_text(t: &Terminator) -> String {
        match t {
            Terminator::End => "end".to_string(),
            Terminator::Ret => "ret".to_string(),
            Terminator::Cond(a, b) => format!("(cond {} {})", a, b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DamFormatError {
    /// Byte offset into the input.
    pub offset: usize,
    pub msg: String,
}

impl core::fmt::Display for DamFormatError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "byte {}: {}", self.offset, self.msg)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Sexp<'a> {
    Atom(&'a str, usize),
    List(Vec<Sexp<'a>>, usize),
}

impl<'a> Sexp<'a> {
    fn offset(&self) -> usize {
        match self {
            Sexp::Atom(_, o) | Sexp::List(_, o) => *o,
        }
    }
}

fn sexp_parse(src: &str) -> Result<Sexp<'_>, DamFormatError> {
    let bytes = src.as_bytes();
    let mut i = 0;
    let top = parse_one(src, bytes, &mut i)?;
    skip_ws(bytes, &mut i);
    if i != bytes.len() {
        return Err(DamFormatError { offset: i, msg: "trailing input after the table".into() });
    }
    return Ok(top);

    fn skip_ws(bytes: &[u8], i: &mut usize) {
        loop {
            while *i < bytes.len() && (bytes[*i] as char).is_ascii_whitespace() {
                *i += 1;
            }
            // Comments are allowed in hand-written files.
            if *i + 1 < bytes.len() && bytes[*i] == b';' {
                while *i < bytes.len() && bytes[*i] != b'\n' {
                    *i += 1;
                }
            } else {
                break;
            }
        }
    }

    fn parse_one<'a>(src: &'a str, bytes: &[u8], i: &mut usize) -> Result<Sexp<'a>, DamFormatError> {
        skip_ws(bytes, i);
        if *i >= bytes.len() {
            return Err(DamFormatError { offset: *i, msg: "unexpected end of input".into() });
        }
        let start = *i;
        match bytes[*i] {
            b'(' => {
                *i += 1;
                let mut items = Vec::new();
                loop {
                    skip_ws(bytes, i);
                    if *i >= bytes.len() {
                        return Err(DamFormatError {
                            offset: start,
                            msg: "unclosed parenthesis".into(),
                        });
                    }
                    if bytes[*i] == b')' {
                        *i += 1;
                        return Ok(Sexp::List(items, start));
                    }
                    items.push(parse_one(src, bytes, i)?);
                }
            }
            b')' => Err(DamFormatError { offset: *i, msg: "unmatched `)`".into() }),
            _ => {
                while *i < bytes.len()
                    && !(bytes[*i] as char).is_ascii_whitespace()
                    && bytes[*i] != b'('
                    && bytes[*i] != b')'
                    && bytes[*i] != b';'
                {
                    *i += 1;
                }
                Ok(Sexp::Atom(&src[start..*i], start))
            }
        }
    }
}

pub fn deserialize(src: &str) -> Result<CodeTable, DamFormatError> {
    let top = sexp_parse(src)?;
    let items = match &top {
        Sexp::List(items, _) => items,
        Sexp::Atom(_, o) => {
            return Err(DamFormatError { offset: *o, msg: "expected `(table ...)`".into() })
        }
    };
    let err = |o: usize, m: &str| DamFormatError { offset: o, msg: m.into() };
    match items.first() {
        Some(Sexp::Atom("table", _)) => {}
        _ => return Err(err(top.offset(), "expected `(table root N (code ...) ...)`")),
    }
    match items.get(1) {
        Some(Sexp::Atom("root", _)) => {}
        _ => return Err(err(top.offset(), "expected `root` after `table`")),
    }
    let root = match items.get(2) {
        Some(s) => CodeRef(atom_u32(s)?),
        None => return Err(err(top.offset(), "missing root block number")),
    };
    let mut codes = Vec::new();
    for entry in &items[3..] {
        codes.push(parse_code(entry)?);
    }
    let table = CodeTable { codes, root };
    validate(&table, top.offset())?;
    return Ok(table);

    fn atom<'a, 'b>(s: &'b Sexp<'a>) -> Result<(&'a str, usize), DamFormatError> {
        match s {
            Sexp::Atom(a, o) => Ok((a, *o)),
            Sexp::List(_, o) => {
                Err(DamFormatError { offset: *o, msg: "expected an atom".into() })
            }
        }
    }

    fn atom_u32(s: &Sexp<'_>) -> Result<u32, DamFormatError> {
        let (a, o) = atom(s)?;
        a.parse().map_err(|_| DamFormatError {
            offset: o,
            msg: format!("expected a block number, found `{}`", a),
        })
    }

    fn atom_u64(s: &Sexp<'_>) -> Result<u64, DamFormatError> {
        let (a, o) = atom(s)?;
        a.parse().map_err(|_| DamFormatError {
            offset: o,
            msg: format!("expected a natural, found `{}`", a),
        })
    }

    fn parse_code(s: &Sexp<'_>) -> Result<Code, DamFormatError> {
        let items = match s {
            Sexp::List(items, _) => items,
            Sexp::Atom(_, o) => {
                return Err(DamFormatError { offset: *o, msg: "expected `(code ...)`".into() })
            }
        };
        match items.first() {
            Some(Sexp::Atom("code", _)) => {}
            _ => {
                return Err(DamFormatError {
                    offset: s.offset(),
                    msg: "expected `(code ...)`".into(),
                })
            }
        }
        if items.len() < 2 {
            return Err(DamFormatError {
                offset: s.offset(),
                msg: "a code block needs a terminator".into(),
            });
        }
        let mut body = Vec::new();
        for instr in &items[1..items.len() - 1] {
            body.push(parse_instr(instr)?);
        }
        let term = parse_term(&items[items.len() - 1])?;
        Ok(Code { body, term })
    }

    fn parse_instr(s: &Sexp<'_>) -> Result<Instr, DamFormatError> {
        match s {
            Sexp::Atom("appl", _) => Ok(Instr::Appl),
            Sexp::Atom(a, o) => Err(DamFormatError {
                offset: *o,
                msg: format!("unknown instruction `{}`", a),
            }),
            Sexp::List(items, o) => {
                let head = match items.first() {
                    Some(Sexp::Atom(a, _)) => *a,
                    _ => {
                        return Err(DamFormatError {
                            offset: *o,
                            msg: "expected an instruction".into(),
                        })
                    }
                };
                let want = |n: usize| -> Result<(), DamFormatError> {
                    if items.len() == n + 1 {
                        Ok(())
                    } else {
                        Err(DamFormatError {
                            offset: *o,
                            msg: format!("`{}` takes {} argument(s)", head, n),
                        })
                    }
                };
                match head {
                    "var" => {
                        want(1)?;
                        Ok(Instr::Var(atom_u32(&items[1])?))
                    }
                    "clos" => {
                        want(1)?;
                        Ok(Instr::Clos(CodeRef(atom_u32(&items[1])?)))
                    }
                    "lit" => {
                        want(1)?;
                        Ok(Instr::Lit(atom_u64(&items[1])?))
                    }
                    "op" => {
                        want(1)?;
                        let (a, ao) = atom(&items[1])?;
                        let op = match a {
                            "+" => PrimOp::Add,
                            "-" => PrimOp::Monus,
                            "*" => PrimOp::Mul,
                            _ => {
                                return Err(DamFormatError {
                                    offset: ao,
                                    msg: format!("unknown operator `{}`", a),
                                })
                            }
                        };
                        Ok(Instr::Op(op))
                    }
                    "remote" => {
                        want(2)?;
                        let r = CodeRef(atom_u32(&items[1])?);
                        let (name, no) = atom(&items[2])?;
                        let node = NodeName::new(name)
                            .map_err(|m| DamFormatError { offset: no, msg: m })?;
                        Ok(Instr::Remote(r, node))
                    }
                    other => Err(DamFormatError {
                        offset: *o,
                        msg: format!("unknown instruction `{}`", other),
                    }),
                }
            }
        }
    }

    fn parse_term(s: &Sexp<'_>) -> Result<Terminator, DamFormatError> {
        match s {
            Sexp::Atom("end", _) => Ok(Terminator::End),
            Sexp::Atom("ret", _) => Ok(Terminator::Ret),
            Sexp::Atom(a, o) => Err(DamFormatError {
                offset: *o,
                msg: format!("unknown terminator `{}`", a),
            }),
            Sexp::List(items, o) => match items.first() {
                Some(Sexp::Atom("cond", _)) if items.len() == 3 => Ok(Terminator::Cond(
                    CodeRef(atom_u32(&items[1])?),
                    CodeRef(atom_u32(&items[2])?),
                )),
                _ => Err(DamFormatError { offset: *o, msg: "expected a terminator".into() }),
            },
        }
    }
}

/// Range-checks every reference and rejects reference cycles.
fn validate(t: &CodeTable, offset: usize) -> Result<(), DamFormatError> {
    let n = t.codes.len();
    let err = |msg: String| DamFormatError { offset, msg };
    let in_range = |r: CodeRef| (r.0 as usize) < n;
    if !in_range(t.root) {
        return Err(err(format!("root {} out of range (table has {} blocks)", t.root, n)));
    }
    let mut edges: Vec<Vec<u32>> = Vec::with_capacity(n);
    for (i, code) in t.codes.iter().enumerate() {
        let mut out = Vec::new();
        let mut push = |r: CodeRef| -> Result<(), DamFormatError> {
            if !in_range(r) {
                return Err(DamFormatError {
                    offset,
                    msg: format!("block {} references {} out of range", i, r),
                });
            }
            out.push(r.0);
            Ok(())
        };
        for instr in &code.body {
            match instr {
                Instr::Clos(r) | Instr::Remote(r, _) => push(*r)?,
                _ => {}
            }
        }
        if let Terminator::Cond(a, b) = &code.term {
            push(*a)?;
            push(*b)?;
        }
        edges.push(out);
    }
    // Iterative three-colour depth-first search for a cycle.
    let mut colour = alloc::vec![0u8; n];
    for start in 0..n {
        if colour[start] != 0 {
            continue;
        }
        let mut stack: Vec<(u32, usize)> = alloc::vec![(start as u32, 0)];
        colour[start] = 1;
        while let Some((v, next)) = stack.pop() {
            let vs = v as usize;
            if next < edges[vs].len() {
                let w = edges[vs][next];
                stack.push((v, next + 1));
                match colour[w as usize] {
                    0 => {
                        colour[w as usize] = 1;
                        stack.push((w, 0));
                    }
                    1 => {
                        return Err(err(format!(
                            "reference cycle through blocks {} and {}",
                            v, w
                        )))
                    }
                    _ => {}
                }
            } else {
                colour[vs] = 2;
            }
        }
    }
    Ok(())
}
