// Copyright 2026 the dam authors
// SPDX-License-Identifier: Apache-2.0 OR MIT

//! Surface syntax, nameless core terms, and a seeded term generator.
//!
//! The surface language is a lambda calculus with naturals, `+ - *`, `if0`,
//! `let` sugar and a placement annotation `t @ A` that asks for `t` to be
//! evaluated on node `A`. Concrete grammar, loosest first:
//!
//! ```text
//! term  ::= 'fn' x '.' term                  -- body extends as far as possible
//!         | 'let' x '=' term 'in' term
//!         | 'if0' term 'then' term 'else' term
//!         | at
//! at    ::= add ('@' NODE)*                  -- looser than all operators
//! add   ::= mul (('+' | '-') mul)*           -- left associative
//! mul   ::= app ('*' app)*                   -- left associative
//! app   ::= atom atom*                       -- left associative
//! atom  ::= NAT | x | '(' term ')'
//! ```
//!
//! Variables start with a lowercase letter or underscore, node names with an
//! uppercase letter. `--` starts a comment that runs to the end of the line.
//! `let x = t in u` is sugar for `(fn x. u) t` and disappears at resolution.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytecode::PrimOp;

/// Name of a node of the distributed system. Starts with an uppercase letter.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeName(String);

impl NodeName {
    pub fn new(s: &str) -> Result<NodeName, String> {
        let mut chars = s.chars();
        let ok = match chars.next() {
            Some(c) if c.is_ascii_uppercase() => {
                chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
            }
            _ => false,
        };
        if ok {
            Ok(NodeName(s.to_string()))
        } else {
            Err(format!("invalid node name `{}`: expected an uppercase-led identifier", s))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl core::fmt::Display for NodeName {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Terms as written, with named variables and `let` still present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SurfaceTerm {
    Var(String),
    Lam(String, Box<SurfaceTerm>),
    App(Box<SurfaceTerm>, Box<SurfaceTerm>),
    Lit(u64),
    Op(PrimOp, Box<SurfaceTerm>, Box<SurfaceTerm>),
    If0(Box<SurfaceTerm>, Box<SurfaceTerm>, Box<SurfaceTerm>),
    At(Box<SurfaceTerm>, NodeName),
    Let(String, Box<SurfaceTerm>, Box<SurfaceTerm>),
}

/// Nameless terms the compiler consumes. Variables are de Bruijn indices,
/// `let` has been expanded away.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CoreTerm {
    Var(u32),
    Lam(Box<CoreTerm>),
    App(Box<CoreTerm>, Box<CoreTerm>),
    Lit(u64),
    Op(PrimOp, Box<CoreTerm>, Box<CoreTerm>),
    If0(Box<CoreTerm>, Box<CoreTerm>, Box<CoreTerm>),
    At(Box<CoreTerm>, NodeName),
}

impl CoreTerm {
    /// Number of constructors; the generator's size bound counts these.
    pub fn size(&self) -> u32 {
        match self {
            CoreTerm::Var(_) | CoreTerm::Lit(_) => 1,
            CoreTerm::Lam(t) | CoreTerm::At(t, _) => 1 + t.size(),
            CoreTerm::App(a, b) | CoreTerm::Op(_, a, b) => 1 + a.size() + b.size(),
            CoreTerm::If0(a, b, c) => 1 + a.size() + b.size() + c.size(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub msg: String,
}

impl core::fmt::Display for ParseError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "parse error at line {}, col {}: {}", self.line, self.col, self.msg)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ResolveError {
    UnboundVar { name: String },
}

impl core::fmt::Display for ResolveError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ResolveError::UnboundVar { name } => write!(f, "unbound variable `{}`", name),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tok<'a> {
    Fn,
    Let,
    In,
    If0,
    Then,
    Else,
    LParen,
    RParen,
    Dot,
    Eq,
    Plus,
    Minus,
    Star,
    At,
    Lower(&'a str),
    Upper(&'a str),
    Nat(u64),
    Eof,
}

impl<'a> Tok<'a> {
    fn describe(&self) -> String {
        match self {
            Tok::Fn => "`fn`".into(),
            Tok::Let => "`let`".into(),
            Tok::In => "`in`".into(),
            Tok::If0 => "`if0`".into(),
            Tok::Then => "`then`".into(),
            Tok::Else => "`else`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Dot => "`.`".into(),
            Tok::Eq => "`=`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::At => "`@`".into(),
            Tok::Lower(s) => format!("identifier `{}`", s),
            Tok::Upper(s) => format!("node name `{}`", s),
            Tok::Nat(n) => format!("literal `{}`", n),
            Tok::Eof => "end of input".into(),
        }
    }
}

struct Lexed<'a> {
    tok: Tok<'a>,
    line: u32,
    col: u32,
}

fn lex(src: &str) -> Result<Vec<Lexed<'_>>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let mut line = 1u32;
    let mut col = 1u32;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let (tl, tc) = (line, col);
        let mut push = |tok, i_next: usize, col_next: u32| {
            out.push(Lexed { tok, line: tl, col: tc });
            (i_next, col_next)
        };
        match c {
            '\n' => {
                i += 1;
                line += 1;
                col = 1;
            }
            ' ' | '\t' | '\r' => {
                i += 1;
                col += 1;
            }
            '-' if i + 1 < bytes.len() && bytes[i + 1] == b'-' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            '(' => (i, col) = push(Tok::LParen, i + 1, col + 1),
            ')' => (i, col) = push(Tok::RParen, i + 1, col + 1),
            '.' => (i, col) = push(Tok::Dot, i + 1, col + 1),
            '=' => (i, col) = push(Tok::Eq, i + 1, col + 1),
            '+' => (i, col) = push(Tok::Plus, i + 1, col + 1),
            '-' => (i, col) = push(Tok::Minus, i + 1, col + 1),
            '*' => (i, col) = push(Tok::Star, i + 1, col + 1),
            '@' => (i, col) = push(Tok::At, i + 1, col + 1),
            '0'..='9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let text = &src[start..i];
                let n: u64 = text.parse().map_err(|_| ParseError {
                    line,
                    col,
                    msg: format!("literal `{}` does not fit in 64 bits", text),
                })?;
                col += (i - start) as u32;
                out.push(Lexed { tok: Tok::Nat(n), line: tl, col: tc });
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                let text = &src[start..i];
                col += (i - start) as u32;
                let tok = match text {
                    "fn" => Tok::Fn,
                    "let" => Tok::Let,
                    "in" => Tok::In,
                    "if0" => Tok::If0,
                    "then" => Tok::Then,
                    "else" => Tok::Else,
                    _ if c.is_ascii_uppercase() => Tok::Upper(text),
                    _ => Tok::Lower(text),
                };
                out.push(Lexed { tok, line: tl, col: tc });
            }
            _ => {
                return Err(ParseError { line, col, msg: format!("unexpected character `{}`", c) });
            }
        }
    }
    out.push(Lexed { tok: Tok::Eof, line, col });
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Lexed<'a>>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Lexed<'a> {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> &Lexed<'a> {
        let t = &self.toks[self.pos];
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, msg: String) -> Result<T, ParseError> {
        let at = self.peek();
        Err(ParseError { line: at.line, col: at.col, msg })
    }

    fn expect(&mut self, want: Tok<'static>, what: &str) -> Result<(), ParseError> {
        if self.peek().tok == want {
            self.bump();
            Ok(())
        } else {
            let found = self.peek().tok.describe();
            self.err(format!("expected {} {}, found {}", want.describe(), what, found))
        }
    }

    fn binder(&mut self) -> Result<String, ParseError> {
        match self.peek().tok {
            Tok::Lower(s) => {
                self.bump();
                Ok(s.to_string())
            }
            ref t => {
                let found = t.describe();
                self.err(format!("expected a variable to bind, found {}", found))
            }
        }
    }

    fn term(&mut self) -> Result<SurfaceTerm, ParseError> {
        match self.peek().tok {
            Tok::Fn => {
                self.bump();
                let x = self.binder()?;
                self.expect(Tok::Dot, "after the binder")?;
                let body = self.term()?;
                Ok(SurfaceTerm::Lam(x, Box::new(body)))
            }
            Tok::Let => {
                self.bump();
                let x = self.binder()?;
                self.expect(Tok::Eq, "after the `let` binder")?;
                let bound = self.term()?;
                self.expect(Tok::In, "after the bound term")?;
                let body = self.term()?;
                Ok(SurfaceTerm::Let(x, Box::new(bound), Box::new(body)))
            }
            Tok::If0 => {
                self.bump();
                let guard = self.term()?;
                self.expect(Tok::Then, "after the guard")?;
                let then = self.term()?;
                self.expect(Tok::Else, "after the `then` branch")?;
                let els = self.term()?;
                Ok(SurfaceTerm::If0(Box::new(guard), Box::new(then), Box::new(els)))
            }
            _ => self.at(),
        }
    }

    fn at(&mut self) -> Result<SurfaceTerm, ParseError> {
        let mut t = self.add()?;
        while self.peek().tok == Tok::At {
            self.bump();
            match self.peek().tok {
                Tok::Upper(s) => {
                    self.bump();
                    // Constructed from an Upper token, so well formed.
                    let node = NodeName::new(s).expect("uppercase token");
                    t = SurfaceTerm::At(Box::new(t), node);
                }
                ref tok => {
                    let found = tok.describe();
                    return self.err(format!("expected a node name after `@`, found {}", found));
                }
            }
        }
        Ok(t)
    }

    fn add(&mut self) -> Result<SurfaceTerm, ParseError> {
        let mut t = self.mul()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => PrimOp::Add,
                Tok::Minus => PrimOp::Monus,
                _ => break,
            };
            self.bump();
            let rhs = self.mul()?;
            t = SurfaceTerm::Op(op, Box::new(t), Box::new(rhs));
        }
        Ok(t)
    }

    fn mul(&mut self) -> Result<SurfaceTerm, ParseError> {
        let mut t = self.app()?;
        while self.peek().tok == Tok::Star {
            self.bump();
            let rhs = self.app()?;
            t = SurfaceTerm::Op(PrimOp::Mul, Box::new(t), Box::new(rhs));
        }
        Ok(t)
    }

    fn starts_atom(tok: &Tok<'_>) -> bool {
        matches!(tok, Tok::Nat(_) | Tok::Lower(_) | Tok::LParen)
    }

    fn app(&mut self) -> Result<SurfaceTerm, ParseError> {
        let mut t = self.atom()?;
        while Self::starts_atom(&self.peek().tok) {
            let arg = self.atom()?;
            t = SurfaceTerm::App(Box::new(t), Box::new(arg));
        }
        Ok(t)
    }

    fn atom(&mut self) -> Result<SurfaceTerm, ParseError> {
        match self.peek().tok {
            Tok::Nat(n) => {
                self.bump();
                Ok(SurfaceTerm::Lit(n))
            }
            Tok::Lower(s) => {
                self.bump();
                Ok(SurfaceTerm::Var(s.to_string()))
            }
            Tok::LParen => {
                self.bump();
                let t = self.term()?;
                self.expect(Tok::RParen, "to close the parenthesis")?;
                Ok(t)
            }
            ref t => {
                let found = t.describe();
                self.err(format!("expected a term, found {}", found))
            }
        }
    }
}

pub fn parse(src: &str) -> Result<SurfaceTerm, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser { toks, pos: 0 };
    let t = p.term()?;
    if p.peek().tok != Tok::Eof {
        let found = p.peek().tok.describe();
        return p.err(format!("expected end of input, found {}", found));
    }
    Ok(t)
}

/// Replaces names by de Bruijn indices, expands `let`, and collects every
/// node name mentioned in a placement annotation.
pub fn resolve(t: &SurfaceTerm) -> Result<(CoreTerm, BTreeSet<NodeName>), ResolveError> {
    let mut nodes = BTreeSet::new();
    let mut scope: Vec<&str> = Vec::new();
    let core = go(t, &mut scope, &mut nodes)?;
    return Ok((core, nodes));

    fn go<'a>(
        t: &'a SurfaceTerm,
        scope: &mut Vec<&'a str>,
        nodes: &mut BTreeSet<NodeName>,
    ) -> Result<CoreTerm, ResolveError> {
        match t {
            SurfaceTerm::Var(x) => match scope.iter().rev().position(|b| b == x) {
                Some(i) => Ok(CoreTerm::Var(i as u32)),
                None => Err(ResolveError::UnboundVar { name: x.clone() }),
            },
            SurfaceTerm::Lam(x, body) => {
                scope.push(x);
                let body = go(body, scope, nodes)?;
                scope.pop();
                Ok(CoreTerm::Lam(Box::new(body)))
            }
            SurfaceTerm::App(f, a) => Ok(CoreTerm::App(
                Box::new(go(f, scope, nodes)?),
                Box::new(go(a, scope, nodes)?),
            )),
            SurfaceTerm::Lit(n) => Ok(CoreTerm::Lit(*n)),
            SurfaceTerm::Op(op, a, b) => Ok(CoreTerm::Op(
                *op,
                Box::new(go(a, scope, nodes)?),
                Box::new(go(b, scope, nodes)?),
            )),
            SurfaceTerm::If0(g, t1, t2) => Ok(CoreTerm::If0(
                Box::new(go(g, scope, nodes)?),
                Box::new(go(t1, scope, nodes)?),
                Box::new(go(t2, scope, nodes)?),
            )),
            SurfaceTerm::At(body, node) => {
                nodes.insert(node.clone());
                Ok(CoreTerm::At(Box::new(go(body, scope, nodes)?), node.clone()))
            }
            SurfaceTerm::Let(x, bound, body) => {
                let bound = go(bound, scope, nodes)?;
                scope.push(x);
                let body = go(body, scope, nodes)?;
                scope.pop();
                Ok(CoreTerm::App(
                    Box::new(CoreTerm::Lam(Box::new(body))),
                    Box::new(bound),
                ))
            }
        }
    }
}

/// A placement annotation whose body mentions a variable bound outside it.
/// `path` is the list of child indices from the root to the `At` node,
/// `index` the escaping de Bruijn index as seen from the annotation's body.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AtViolation {
    pub path: Vec<u32>,
    pub index: u32,
}

/// Remote evaluation starts in an empty environment, so an `@` body has no
/// access to outer binders. Returns every annotation that breaks this, in
/// preorder; an empty result means the term compiles and runs placements
/// faithfully.
pub fn check_closed_at(t: &CoreTerm) -> Vec<AtViolation> {
    let mut out = Vec::new();
    let mut path = Vec::new();
    walk(t, &mut path, &mut out);
    return out;

    fn walk(t: &CoreTerm, path: &mut Vec<u32>, out: &mut Vec<AtViolation>) {
        match t {
            CoreTerm::Var(_) | CoreTerm::Lit(_) => {}
            CoreTerm::Lam(body) => {
                path.push(0);
                walk(body, path, out);
                path.pop();
            }
            CoreTerm::App(a, b) | CoreTerm::Op(_, a, b) => {
                for (i, s) in [&**a, &**b].into_iter().enumerate() {
                    path.push(i as u32);
                    walk(s, path, out);
                    path.pop();
                }
            }
            CoreTerm::If0(a, b, c) => {
                for (i, s) in [&**a, &**b, &**c].into_iter().enumerate() {
                    path.push(i as u32);
                    walk(s, path, out);
                    path.pop();
                }
            }
            CoreTerm::At(body, _) => {
                let mut free = BTreeSet::new();
                free_indices(body, 0, &mut free);
                for index in free {
                    out.push(AtViolation { path: path.clone(), index });
                }
                path.push(0);
                walk(body, path, out);
                path.pop();
            }
        }
    }

    fn free_indices(t: &CoreTerm, depth: u32, out: &mut BTreeSet<u32>) {
        match t {
            CoreTerm::Var(i) => {
                if *i >= depth {
                    out.insert(*i - depth);
                }
            }
            CoreTerm::Lit(_) => {}
            CoreTerm::Lam(body) => free_indices(body, depth + 1, out),
            CoreTerm::App(a, b) | CoreTerm::Op(_, a, b) => {
                free_indices(a, depth, out);
                free_indices(b, depth, out);
            }
            CoreTerm::If0(a, b, c) => {
                free_indices(a, depth, out);
                free_indices(b, depth, out);
                free_indices(c, depth, out);
            }
            CoreTerm::At(body, _) => free_indices(body, depth, out),
        }
    }
}

/// Renders a core term back to concrete syntax, inventing the name `x<d>`
/// for the binder at depth `d`. `resolve(parse(pretty(t)))` gives back `t`.
pub fn pretty(t: &CoreTerm) -> String {
    // Precedence levels, loosest to tightest, mirroring the grammar:
    // 0 term, 1 at, 2 add, 3 mul, 4 app, 5 atom.
    let mut s = String::new();
    go(t, 0, 0, &mut s);
    return s;

    fn go(t: &CoreTerm, depth: u32, prec: u8, s: &mut String) {
        let level = match t {
            CoreTerm::Lam(_) | CoreTerm::If0(..) => 0,
            CoreTerm::At(..) => 1,
            CoreTerm::Op(PrimOp::Add, ..) | CoreTerm::Op(PrimOp::Monus, ..) => 2,
            CoreTerm::Op(PrimOp::Mul, ..) => 3,
            CoreTerm::App(..) => 4,
            CoreTerm::Var(_) | CoreTerm::Lit(_) => 5,
        };
        let parens = level < prec;
        if parens {
            s.push('(');
        }
        match t {
            CoreTerm::Var(i) => {
                if *i < depth {
                    s.push_str(&format!("x{}", depth - 1 - i));
                } else {
                    // Open term; keep it printable for diagnostics.
                    s.push_str(&format!("_free{}", i - depth));
                }
            }
            CoreTerm::Lit(n) => s.push_str(&n.to_string()),
            CoreTerm::Lam(body) => {
                s.push_str(&format!("fn x{}. ", depth));
                go(body, depth + 1, 0, s);
            }
            CoreTerm::App(f, a) => {
                go(f, depth, 4, s);
                s.push(' ');
                go(a, depth, 5, s);
            }
            CoreTerm::Op(op, a, b) => {
                let (lp, rp) = if level == 2 { (2, 3) } else { (3, 4) };
                go(a, depth, lp, s);
                s.push_str(&format!(" {} ", op));
                go(b, depth, rp, s);
            }
            CoreTerm::If0(g, t1, t2) => {
                s.push_str("if0 ");
                go(g, depth, 1, s);
                s.push_str(" then ");
                go(t1, depth, 0, s);
                s.push_str(" else ");
                go(t2, depth, 0, s);
            }
            CoreTerm::At(body, node) => {
                go(body, depth, 2, s);
                s.push_str(&format!(" @ {}", node));
            }
        }
        if parens {
            s.push(')');
        }
    }
}

/// Draws a closed core term of at most `size` constructors from the seeded
/// stream. Placement bodies are generated under no binders, so the result
/// always passes [`check_closed_at`]. Same seed, size and nodes give the
/// same term.
pub fn gen_term(seed: u64, size: u32, nodes: &[NodeName]) -> CoreTerm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = size.max(1);
    return go(&mut rng, size, 0, nodes);

    fn go(rng: &mut ChaCha8Rng, max: u32, depth: u32, nodes: &[NodeName]) -> CoreTerm {
        // Candidate constructors with weights; only those that fit in `max`.
        #[derive(Clone, Copy)]
        enum K {
            Lit,
            Var,
            Lam,
            App,
            Op,
            If0,
            At,
        }
        let mut cand: Vec<(u32, K)> = Vec::new();
        cand.push((2, K::Lit));
        if depth > 0 {
            cand.push((3, K::Var));
        }
        if max >= 2 {
            cand.push((4, K::Lam));
            if !nodes.is_empty() {
                cand.push((2, K::At));
            }
        }
        if max >= 3 {
            cand.push((4, K::App));
            cand.push((3, K::Op));
        }
        if max >= 4 {
            cand.push((2, K::If0));
        }
        let total: u32 = cand.iter().map(|(w, _)| w).sum();
        let mut roll = rng.gen_range(0..total);
        let mut pick = cand[0].1;
        for (w, k) in cand {
            if roll < w {
                pick = k;
                break;
            }
            roll -= w;
        }
        match pick {
            K::Lit => CoreTerm::Lit(rng.gen_range(0..10)),
            K::Var => CoreTerm::Var(rng.gen_range(0..depth)),
            K::Lam => CoreTerm::Lam(Box::new(go(rng, max - 1, depth + 1, nodes))),
            K::At => {
                let node = nodes[rng.gen_range(0..nodes.len())].clone();
                CoreTerm::At(Box::new(go(rng, max - 1, 0, nodes)), node)
            }
            K::App => {
                let left = rng.gen_range(1..=max - 2);
                CoreTerm::App(
                    Box::new(go(rng, left, depth, nodes)),
                    Box::new(go(rng, max - 1 - left, depth, nodes)),
                )
            }
            K::Op => {
                let op = match rng.gen_range(0..3) {
                    0 => PrimOp::Add,
                    1 => PrimOp::Monus,
                    _ => PrimOp::Mul,
                };
                let left = rng.gen_range(1..=max - 2);
                CoreTerm::Op(
                    op,
                    Box::new(go(rng, left, depth, nodes)),
                    Box::new(go(rng, max - 1 - left, depth, nodes)),
                )
            }
            K::If0 => {
                let g = rng.gen_range(1..=max - 3);
                let t = rng.gen_range(1..=max - 2 - g);
                let e = max - 1 - g - t;
                CoreTerm::If0(
                    Box::new(go(rng, g, depth, nodes)),
                    Box::new(go(rng, t, depth, nodes)),
                    Box::new(go(rng, e, depth, nodes)),
                )
            }
        }
    }
}

/// Convenience for tests and the command line: parse then resolve.
pub fn parse_core(src: &str) -> Result<(CoreTerm, BTreeSet<NodeName>), String> {
    let surface = parse(src).map_err(|e| e.to_string())?;
    resolve(&surface).map_err(|e| e.to_string())
}

/// Counts constructors per node annotation, for reporting only.
pub fn node_mentions(t: &CoreTerm) -> BTreeMap<NodeName, u32> {
    let mut out = BTreeMap::new();
    go(t, &mut out);
    return out;

    fn go(t: &CoreTerm, out: &mut BTreeMap<NodeName, u32>) {
        match t {
            CoreTerm::Var(_) | CoreTerm::Lit(_) => {}
            CoreTerm::Lam(a) => go(a, out),
            CoreTerm::App(a, b) | CoreTerm::Op(_, a, b) => {
                go(a, out);
                go(b, out);
            }
            CoreTerm::If0(a, b, c) => {
                go(a, out);
                go(b, out);
                go(c, out);
            }
            CoreTerm::At(a, n) => {
                *out.entry(n.clone()).or_insert(0) += 1;
                go(a, out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn core(src: &str) -> CoreTerm {
        parse_core(src).unwrap().0
    }

    #[test]
    fn identity_applied_to_pairing() {
        let t = core("(fn x. x) (fn x. fn y. x)");
        assert_eq!(
            t,
            CoreTerm::App(
                Box::new(CoreTerm::Lam(Box::new(CoreTerm::Var(0)))),
                Box::new(CoreTerm::Lam(Box::new(CoreTerm::Lam(Box::new(
                    CoreTerm::Var(1)
                ))))),
            )
        );
    }

    #[test]
    fn application_is_left_associative_and_tighter_than_operators() {
        let t = core("fn f. fn x. fn y. f x y");
        let u = core("fn f. fn x. fn y. (f x) y");
        assert_eq!(t, u);
        let t = core("fn f. fn x. f x + f x * 2");
        let u = core("fn f. fn x. (f x) + ((f x) * 2)");
        assert_eq!(t, u);
    }

    #[test]
    fn subtraction_chains_to_the_left() {
        assert_eq!(core("10 - 3 - 2"), core("(10 - 3) - 2"));
        assert_ne!(core("10 - 3 - 2"), core("10 - (3 - 2)"));
    }

    #[test]
    fn at_binds_loosest() {
        let t = core("fn f. fn x. f x + 1 @ B");
        let u = core("fn f. fn x. ((f x) + 1) @ B");
        assert_eq!(t, u);
        // And the lambda body still swallows it.
        match core("fn x. 1 + 1 @ B") {
            CoreTerm::Lam(body) => assert!(matches!(*body, CoreTerm::At(..))),
            other => panic!("expected a lambda, got {:?}", other),
        }
    }

    #[test]
    fn let_desugars_to_application() {
        assert_eq!(core("let y = 2 in y + y"), core("(fn y. y + y) 2"));
    }

    #[test]
    fn if0_parses_with_full_terms_inside() {
        let t = core("fn n. if0 n - 1 then 0 else n * 2");
        match t {
            CoreTerm::Lam(body) => match *body {
                CoreTerm::If0(g, a, b) => {
                    assert!(matches!(*g, CoreTerm::Op(PrimOp::Monus, ..)));
                    assert_eq!(*a, CoreTerm::Lit(0));
                    assert!(matches!(*b, CoreTerm::Op(PrimOp::Mul, ..)));
                }
                other => panic!("expected if0, got {:?}", other),
            },
            other => panic!("expected a lambda, got {:?}", other),
        }
    }

    #[test]
    fn comments_and_whitespace_are_skipped() {
        let t = core("-- leading note\nfn x. -- bind x\n  x -- use it\n");
        assert_eq!(t, CoreTerm::Lam(Box::new(CoreTerm::Var(0))));
    }

    #[test]
    fn errors_carry_positions() {
        let e = parse("fn x.\n  x ?").unwrap_err();
        assert_eq!((e.line, e.col), (2, 5));
        let e = parse("(fn x. x").unwrap_err();
        assert!(e.msg.contains("close"), "{}", e.msg);
        let e = parse("fn x. x @ b").unwrap_err();
        assert!(e.msg.contains("node name"), "{}", e.msg);
    }

    #[test]
    fn unbound_variables_are_reported_at_resolve_time() {
        let surface = parse("fn x. y").unwrap();
        assert_eq!(
            resolve(&surface).unwrap_err(),
            ResolveError::UnboundVar { name: "y".into() }
        );
    }

    #[test]
    fn resolve_collects_annotation_nodes() {
        let (_, nodes) = parse_core("(1 @ A) + (2 @ B) + (3 @ A)").unwrap();
        let names: Vec<&str> = nodes.iter().map(|n| n.as_str()).collect();
        assert_eq!(names, vec!["A", "B"]);
    }

    #[test]
    fn open_annotation_bodies_are_flagged() {
        let (t, _) = parse_core("fn x. x @ A").unwrap();
        assert_eq!(check_closed_at(&t), vec![AtViolation { path: vec![0], index: 0 }]);
        let (t, _) = parse_core("fn x. (fn y. x y) @ A").unwrap();
        assert_eq!(check_closed_at(&t), vec![AtViolation { path: vec![0], index: 0 }]);
        let (t, _) = parse_core("fn x. (fn y. y) @ A").unwrap();
        assert_eq!(check_closed_at(&t), vec![]);
        // The escape is reported even through a nested annotation.
        let (t, _) = parse_core("fn x. ((x @ B) @ A)").unwrap();
        let v = check_closed_at(&t);
        assert_eq!(
            v,
            vec![
                AtViolation { path: vec![0], index: 0 },
                AtViolation { path: vec![0, 0], index: 0 },
            ]
        );
    }

    #[test]
    fn pretty_round_trips() {
        for src in [
            "(fn x. x) (fn x. fn y. x)",
            "fn f. fn x. f x + 1 @ B",
            "fn n. if0 n then 1 else n * 2",
            "let z = 4 in z - 1",
            "(1 @ A) * (fn x. x @ B) 2",
        ] {
            let t = core(src);
            let printed = pretty(&t);
            assert_eq!(core(&printed), t, "printed as {}", printed);
        }
    }

    #[test]
    fn generator_is_deterministic_closed_and_bounded() {
        let nodes = [NodeName::new("A").unwrap(), NodeName::new("B").unwrap()];
        for seed in 0..50 {
            let t1 = gen_term(seed, 30, &nodes);
            let t2 = gen_term(seed, 30, &nodes);
            assert_eq!(t1, t2);
            assert!(t1.size() <= 30);
            assert_eq!(check_closed_at(&t1), vec![]);
            let printed = pretty(&t1);
            assert_eq!(core(&printed), t1, "printed as {}", printed);
        }
        assert_ne!(gen_term(1, 30, &nodes), gen_term(2, 30, &nodes));
    }

    #[test]
    fn generator_handles_degenerate_sizes() {
        assert_eq!(gen_term(0, 0, &[]).size(), 1);
        for seed in 0..20 {
            assert_eq!(gen_term(seed, 1, &[]).size(), 1);
        }
    }
}
