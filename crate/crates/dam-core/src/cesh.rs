// Copyright 2026 the dam authors
// SPDX-License-Identifier: Apache-2.0 OR MIT

//! The CES machine with heap-allocated closures.
//!
//! `CLOS` allocates instead of pushing the closure itself, and values carry
//! pointers. Everything else, including the stack discipline and placement
//! erasure, is the CES machine verbatim. The point of the exercise is that
//! a pointer is the shape of thing a message can carry, so this machine is
//! the bridge between the sequential semantics and the distributed ones;
//! the relation in [`crate::bisim`] ties each of its configurations back to
//! a CES configuration by reading closures out of the heap.
//!
//! The heap only ever grows along a run, so pointers in old configurations
//! stay meaningful; the tests pin that down.

use alloc::vec::Vec;

use crate::bytecode::{apply_prim, CodePos, CodeTable, Fetched, Instr, Terminator};
use crate::heap::{Heap, Ptr};
use crate::machine::{Closure, Env, MachineRule, Outcome, StuckReason};

pub type CeshEnv = Env<CeshValue>;
pub type CeshClosure = Closure<CeshValue>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeshValue {
    Nat(u64),
    ClosPtr(Ptr),
}

impl core::fmt::Display for CeshValue {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CeshValue::Nat(n) => write!(f, "nat {}", n),
            CeshValue::ClosPtr(p) => write!(f, "clos ptr={}", p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CeshStackElem {
    Val(CeshValue),
    Cont(CeshClosure),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CeshConfig {
    pub code: CodePos,
    pub env: CeshEnv,
    pub stack: Vec<CeshStackElem>,
    pub heap: Heap<CeshClosure>,
}

impl CeshConfig {
    pub fn initial(table: &CodeTable) -> CeshConfig {
        CeshConfig {
            code: CodePos::start(table.root()),
            env: Env::empty(),
            stack: Vec::new(),
            heap: Heap::empty(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CeshStep {
    Stepped(MachineRule),
    Halted(CeshValue),
    Stuck(StuckReason),
}

/// Takes one transition in place. On `Halted` and `Stuck` the configuration
/// is left untouched.
pub fn step_cesh(cfg: &mut CeshConfig, table: &CodeTable) -> CeshStep {
    use CeshStackElem::{Cont, Val};
    let fetched = match table.fetch(cfg.code) {
        Some(f) => f,
        None => return CeshStep::Stuck(StuckReason::InvalidCode),
    };
    match fetched {
        Fetched::Instr(Instr::Var(n)) => match cfg.env.get(*n) {
            Some(v) => {
                let v = *v;
                cfg.stack.push(Val(v));
                cfg.code = cfg.code.advance();
                CeshStep::Stepped(MachineRule::Var)
            }
            None => CeshStep::Stuck(StuckReason::UnboundVar(*n)),
        },
        Fetched::Instr(Instr::Clos(r)) => {
            let p = cfg.heap.alloc(Closure::new(CodePos::start(*r), cfg.env.clone()));
            cfg.stack.push(Val(CeshValue::ClosPtr(p)));
            cfg.code = cfg.code.advance();
            CeshStep::Stepped(MachineRule::Clos)
        }
        Fetched::Instr(Instr::Appl) => {
            let n = cfg.stack.len();
            let ptr = match (n >= 2).then(|| (&cfg.stack[n - 1], &cfg.stack[n - 2])) {
                Some((Val(_), Val(CeshValue::ClosPtr(p)))) => *p,
                _ => return CeshStep::Stuck(StuckReason::ApplyNonClosure),
            };
            let clos = match cfg.heap.deref(ptr) {
                Some(c) => c.clone(),
                None => return CeshStep::Stuck(StuckReason::DanglingClosure(ptr.0)),
            };
            let Some(Val(arg)) = cfg.stack.pop() else { unreachable!() };
            cfg.stack.pop();
            let ret = Closure::new(cfg.code.advance(), cfg.env.clone());
            cfg.stack.push(Cont(ret));
            cfg.code = clos.code;
            cfg.env = clos.env.cons(arg);
            CeshStep::Stepped(MachineRule::Appl)
        }
        Fetched::Instr(Instr::Lit(n)) => {
            cfg.stack.push(Val(CeshValue::Nat(*n)));
            cfg.code = cfg.code.advance();
            CeshStep::Stepped(MachineRule::Lit)
        }
        Fetched::Instr(Instr::Op(op)) => {
            let n = cfg.stack.len();
            let (n1, n2) = match (n >= 2).then(|| (&cfg.stack[n - 1], &cfg.stack[n - 2])) {
                Some((Val(CeshValue::Nat(a)), Val(CeshValue::Nat(b)))) => (*a, *b),
                _ => return CeshStep::Stuck(StuckReason::OpNonNat),
            };
            let result = match apply_prim(*op, n1, n2) {
                Some(r) => r,
                None => return CeshStep::Stuck(StuckReason::Overflow(*op)),
            };
            cfg.stack.pop();
            cfg.stack.pop();
            cfg.stack.push(Val(CeshValue::Nat(result)));
            cfg.code = cfg.code.advance();
            CeshStep::Stepped(MachineRule::Op)
        }
        Fetched::Instr(Instr::Remote(r, _)) => {
            let ret = Closure::new(cfg.code.advance(), cfg.env.clone());
            cfg.stack.push(Cont(ret));
            cfg.code = CodePos::start(*r);
            cfg.env = Env::empty();
            CeshStep::Stepped(MachineRule::Remote)
        }
        Fetched::Term(Terminator::End) => {
            if cfg.env.is_empty() && cfg.stack.len() == 1 {
                if let Val(v) = &cfg.stack[0] {
                    return CeshStep::Halted(*v);
                }
            }
            CeshStep::Stuck(StuckReason::EndShape)
        }
        Fetched::Term(Terminator::Ret) => {
            let n = cfg.stack.len();
            let ok = n >= 2 && matches!(cfg.stack[n - 1], Val(_)) && matches!(cfg.stack[n - 2], Cont(_));
            if !ok {
                return CeshStep::Stuck(StuckReason::RetStackShape);
            }
            let Some(Val(v)) = cfg.stack.pop() else { unreachable!() };
            let Some(Cont(k)) = cfg.stack.pop() else { unreachable!() };
            cfg.code = k.code;
            cfg.env = k.env;
            cfg.stack.push(Val(v));
            CeshStep::Stepped(MachineRule::Ret)
        }
        Fetched::Term(Terminator::Cond(c1, c2)) => {
            let scrutinee = match cfg.stack.last() {
                Some(Val(CeshValue::Nat(n))) => *n,
                _ => return CeshStep::Stuck(StuckReason::CondNonNat),
            };
            cfg.stack.pop();
            if scrutinee == 0 {
                cfg.code = CodePos::start(*c1);
                CeshStep::Stepped(MachineRule::CondZero)
            } else {
                cfg.code = CodePos::start(*c2);
                CeshStep::Stepped(MachineRule::CondSucc)
            }
        }
    }
}

/// Which rules fire here, without stepping. At most one, and always the one
/// [`step_cesh`] takes; the lockstep driver checks both claims at every
/// reachable state.
pub fn cesh_applicable(cfg: &CeshConfig, table: &CodeTable) -> Vec<MachineRule> {
    use CeshStackElem::{Cont, Val};
    let mut out = Vec::new();
    let n = cfg.stack.len();
    match table.fetch(cfg.code) {
        None => {}
        Some(Fetched::Instr(Instr::Var(i))) => {
            if cfg.env.get(*i).is_some() {
                out.push(MachineRule::Var);
            }
        }
        Some(Fetched::Instr(Instr::Clos(_))) => out.push(MachineRule::Clos),
        Some(Fetched::Instr(Instr::Appl)) => {
            if let Some((Val(_), Val(CeshValue::ClosPtr(p)))) =
                (n >= 2).then(|| (&cfg.stack[n - 1], &cfg.stack[n - 2]))
            {
                if cfg.heap.deref(*p).is_some() {
                    out.push(MachineRule::Appl);
                }
            }
        }
        Some(Fetched::Instr(Instr::Lit(_))) => out.push(MachineRule::Lit),
        Some(Fetched::Instr(Instr::Op(op))) => {
            if let Some((Val(CeshValue::Nat(a)), Val(CeshValue::Nat(b)))) =
                (n >= 2).then(|| (&cfg.stack[n - 1], &cfg.stack[n - 2]))
            {
                if apply_prim(*op, *a, *b).is_some() {
                    out.push(MachineRule::Op);
                }
            }
        }
        Some(Fetched::Instr(Instr::Remote(..))) => out.push(MachineRule::Remote),
        Some(Fetched::Term(Terminator::End)) => {}
        Some(Fetched::Term(Terminator::Ret)) => {
            if n >= 2 && matches!(cfg.stack[n - 1], Val(_)) && matches!(cfg.stack[n - 2], Cont(_)) {
                out.push(MachineRule::Ret);
            }
        }
        Some(Fetched::Term(Terminator::Cond(..))) => match cfg.stack.last() {
            Some(Val(CeshValue::Nat(0))) => out.push(MachineRule::CondZero),
            Some(Val(CeshValue::Nat(_))) => out.push(MachineRule::CondSucc),
            _ => {}
        },
    }
    out
}

/// All successors, for the determinism checks. Final configurations have
/// none.
pub fn enumerate_cesh_successors(
    cfg: &CeshConfig,
    table: &CodeTable,
) -> Vec<(MachineRule, CeshConfig)> {
    let mut out = Vec::new();
    for rule in cesh_applicable(cfg, table) {
        let mut next = cfg.clone();
        match step_cesh(&mut next, table) {
            CeshStep::Stepped(r) if r == rule => out.push((rule, next)),
            other => {
                debug_assert!(false, "guard admitted {:?} but step took {:?}", rule, other);
            }
        }
    }
    out
}

/// Runs from the initial configuration. Returns the final configuration as
/// well, since a closure result is only meaningful next to its heap.
pub fn run_cesh(table: &CodeTable, fuel: u64) -> (Outcome<CeshValue>, Vec<MachineRule>, CeshConfig) {
    let mut cfg = CeshConfig::initial(table);
    let mut rules = Vec::new();
    let mut steps = 0u64;
    while steps < fuel {
        match step_cesh(&mut cfg, table) {
            CeshStep::Stepped(r) => {
                rules.push(r);
                steps += 1;
            }
            CeshStep::Halted(value) => return (Outcome::Halted { value, steps }, rules, cfg),
            CeshStep::Stuck(reason) => return (Outcome::Stuck { reason, steps }, rules, cfg),
        }
    }
    match step_cesh(&mut cfg, table) {
        CeshStep::Halted(value) => (Outcome::Halted { value, steps }, rules, cfg),
        CeshStep::Stuck(reason) => (Outcome::Stuck { reason, steps }, rules, cfg),
        CeshStep::Stepped(_) => (Outcome::FuelExhausted { steps }, rules, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::compile;
    use crate::ces::{run_ces, CesValue};
    use crate::syntax::parse_core;
    use alloc::vec;

    fn table(src: &str) -> CodeTable {
        compile(&parse_core(src).unwrap().0).unwrap()
    }

    #[test]
    fn the_example_halts_with_a_pointer_to_the_second_closure() {
        let t = table("(fn x. x) (fn x. fn y. x)");
        let (outcome, rules, cfg) = run_cesh(&t, 10_000);
        use MachineRule::*;
        assert_eq!(rules, vec![Clos, Clos, Appl, Var, Ret]);
        assert_eq!(outcome, Outcome::Halted { value: CeshValue::ClosPtr(Ptr(1)), steps: 5 });
        // Two closures were allocated; the result points at the second,
        // which closes the pairing block over the empty environment.
        assert_eq!(cfg.heap.len(), 2);
        let cell = cfg.heap.deref(Ptr(1)).unwrap();
        assert!(cell.env.is_empty());
        let root = t.code(t.root()).unwrap();
        assert_eq!(root.body[1], Instr::Clos(cell.code.code));
    }

    #[test]
    fn rule_traces_match_ces_on_closed_programs() {
        for src in [
            "2 + 3 * 4",
            "if0 2 - 2 then (fn x. x) 1 else 9",
            "((fn x. x) @ B) 4",
            "let a = 5 in a + (2 @ B) * a",
            "1 2",
            "18446744073709551615 + 1",
        ] {
            let t = table(src);
            let (ces_out, ces_rules) = run_ces(&t, 10_000);
            let (cesh_out, cesh_rules, _) = run_cesh(&t, 10_000);
            assert_eq!(ces_rules, cesh_rules, "{}", src);
            match (&ces_out, &cesh_out) {
                (
                    Outcome::Halted { value: CesValue::Nat(a), steps: s1 },
                    Outcome::Halted { value: CeshValue::Nat(b), steps: s2 },
                ) => assert_eq!((a, s1), (b, s2), "{}", src),
                (
                    Outcome::Halted { value: CesValue::Clos(_), .. },
                    Outcome::Halted { value: CeshValue::ClosPtr(_), .. },
                ) => {}
                (
                    Outcome::Stuck { reason: r1, steps: s1 },
                    Outcome::Stuck { reason: r2, steps: s2 },
                ) => assert_eq!((r1, s1), (r2, s2), "{}", src),
                other => panic!("outcomes diverge on {}: {:?}", src, other),
            }
        }
    }

    #[test]
    fn the_heap_only_grows_along_a_run() {
        let t = table("let f = fn x. x + 1 in f (f (f 0))");
        let mut cfg = CeshConfig::initial(&t);
        loop {
            let before = cfg.heap.clone();
            match step_cesh(&mut cfg, &t) {
                CeshStep::Stepped(_) => assert!(before.is_prefix(&cfg.heap)),
                _ => break,
            }
        }
        assert!(cfg.heap.len() >= 1);
    }

    #[test]
    fn dangling_pointers_are_a_stuck_state_not_a_panic() {
        let t = table("(fn x. x) 1");
        let mut cfg = CeshConfig::initial(&t);
        // Skip CLOS by planting a pointer to a cell that was never written.
        cfg.stack.push(CeshStackElem::Val(CeshValue::ClosPtr(Ptr(9))));
        cfg.stack.push(CeshStackElem::Val(CeshValue::Nat(1)));
        cfg.code = CodePos { code: cfg.code.code, pos: 2 };
        assert_eq!(cesh_applicable(&cfg, &t), vec![]);
        let before = cfg.clone();
        assert_eq!(
            step_cesh(&mut cfg, &t),
            CeshStep::Stuck(StuckReason::DanglingClosure(9))
        );
        assert_eq!(cfg, before);
    }

    #[test]
    fn enumeration_agrees_with_step_along_a_run() {
        let t = table("let a = 5 in a + (2 @ B) * a");
        let mut cfg = CeshConfig::initial(&t);
        loop {
            let succ = enumerate_cesh_successors(&cfg, &t);
            assert!(succ.len() <= 1);
            let mut stepped = cfg.clone();
            match step_cesh(&mut stepped, &t) {
                CeshStep::Stepped(rule) => {
                    assert_eq!((succ[0].0, &succ[0].1), (rule, &stepped));
                    cfg = stepped;
                }
                _ => {
                    assert!(succ.is_empty());
                    break;
                }
            }
        }
    }
}
