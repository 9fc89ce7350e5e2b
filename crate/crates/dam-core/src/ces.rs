// Copyright 2026 the dam authors
// SPDX-License-Identifier: Apache-2.0 OR MIT

//! The sequential code/environment/stack machine.
//!
//! This is the smallest of the machines and the yardstick for the rest: a
//! configuration is a code position, an environment and one stack holding
//! both intermediate values and return continuations. Closures are plain
//! values; nothing is heap-allocated. `REMOTE` has no network to talk to
//! here, so it erases the placement: it runs the shipped block in an empty
//! environment under a continuation back to the current code, which is also
//! exactly what the distributed machine's round trip computes.
//!
//! A run halts when it reaches the final block's `end` with an empty
//! environment and a single value on the stack.

use alloc::vec::Vec;

use crate::bytecode::{apply_prim, CodePos, CodeTable, Fetched, Instr, Terminator};
use crate::machine::{Closure, Env, MachineRule, Outcome, StuckReason};

pub type CesEnv = Env<CesValue>;
pub type CesClosure = Closure<CesValue>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CesValue {
    Nat(u64),
    Clos(CesClosure),
}

impl core::fmt::Display for CesValue {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CesValue::Nat(n) => write!(f, "nat {}", n),
            CesValue::Clos(c) => write!(f, "clos code={} env={}", c.code, c.env.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CesStackElem {
    Val(CesValue),
    /// A return continuation: the code and environment to resume.
    Cont(CesClosure),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CesConfig {
    pub code: CodePos,
    pub env: CesEnv,
    pub stack: Vec<CesStackElem>,
}

impl CesConfig {
    pub fn initial(table: &CodeTable) -> CesConfig {
        CesConfig {
            code: CodePos::start(table.root()),
            env: Env::empty(),
            stack: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CesStep {
    Stepped(MachineRule),
    Halted(CesValue),
    Stuck(StuckReason),
}

/// Takes one transition in place. On `Halted` and `Stuck` the configuration
/// is left untouched.
pub fn step_ces(cfg: &mut CesConfig, table: &CodeTable) -> CesStep {
    use CesStackElem::{Cont, Val};
    let fetched = match table.fetch(cfg.code) {
        Some(f) => f,
        None => return CesStep::Stuck(StuckReason::InvalidCode),
    };
    match fetched {
        Fetched::Instr(Instr::Var(n)) => match cfg.env.get(*n) {
            Some(v) => {
                let v = v.clone();
                cfg.stack.push(Val(v));
                cfg.code = cfg.code.advance();
                CesStep::Stepped(MachineRule::Var)
            }
            None => CesStep::Stuck(StuckReason::UnboundVar(*n)),
        },
        Fetched::Instr(Instr::Clos(r)) => {
            let clos = Closure::new(CodePos::start(*r), cfg.env.clone());
            cfg.stack.push(Val(CesValue::Clos(clos)));
            cfg.code = cfg.code.advance();
            CesStep::Stepped(MachineRule::Clos)
        }
        Fetched::Instr(Instr::Appl) => {
            let n = cfg.stack.len();
            let callable = n >= 2
                && matches!(cfg.stack[n - 1], Val(_))
                && matches!(cfg.stack[n - 2], Val(CesValue::Clos(_)));
            if !callable {
                return CesStep::Stuck(StuckReason::ApplyNonClosure);
            }
            let Some(Val(arg)) = cfg.stack.pop() else { unreachable!() };
            let Some(Val(CesValue::Clos(clos))) = cfg.stack.pop() else { unreachable!() };
            let ret = Closure::new(cfg.code.advance(), cfg.env.clone());
            cfg.stack.push(Cont(ret));
            cfg.code = clos.code;
            cfg.env = clos.env.cons(arg);
            CesStep::Stepped(MachineRule::Appl)
        }
        Fetched::Instr(Instr::Lit(n)) => {
            cfg.stack.push(Val(CesValue::Nat(*n)));
            cfg.code = cfg.code.advance();
            CesStep::Stepped(MachineRule::Lit)
        }
        Fetched::Instr(Instr::Op(op)) => {
            let n = cfg.stack.len();
            let (n1, n2) = match (&cfg.stack[..], n) {
                (s, n) if n >= 2 => match (&s[n - 1], &s[n - 2]) {
                    (Val(CesValue::Nat(a)), Val(CesValue::Nat(b))) => (*a, *b),
                    _ => return CesStep::Stuck(StuckReason::OpNonNat),
                },
                _ => return CesStep::Stuck(StuckReason::OpNonNat),
            };
            let result = match apply_prim(*op, n1, n2) {
                Some(r) => r,
                None => return CesStep::Stuck(StuckReason::Overflow(*op)),
            };
            cfg.stack.pop();
            cfg.stack.pop();
            cfg.stack.push(Val(CesValue::Nat(result)));
            cfg.code = cfg.code.advance();
            CesStep::Stepped(MachineRule::Op)
        }
        Fetched::Instr(Instr::Remote(r, _)) => {
            // Placement erasure: run the body here, but exactly like the
            // remote end would, in an empty environment.
            let ret = Closure::new(cfg.code.advance(), cfg.env.clone());
            cfg.stack.push(Cont(ret));
            cfg.code = CodePos::start(*r);
            cfg.env = Env::empty();
            CesStep::Stepped(MachineRule::Remote)
        }
        Fetched::Term(Terminator::End) => {
            if cfg.env.is_empty() && cfg.stack.len() == 1 {
                if let Val(v) = &cfg.stack[0] {
                    return CesStep::Halted(v.clone());
                }
            }
            CesStep::Stuck(StuckReason::EndShape)
        }
        Fetched::Term(Terminator::Ret) => {
            let n = cfg.stack.len();
            let ok = n >= 2 && matches!(cfg.stack[n - 1], Val(_)) && matches!(cfg.stack[n - 2], Cont(_));
            if !ok {
                return CesStep::Stuck(StuckReason::RetStackShape);
            }
            let Some(Val(v)) = cfg.stack.pop() else { unreachable!() };
            let Some(Cont(k)) = cfg.stack.pop() else { unreachable!() };
            cfg.code = k.code;
            cfg.env = k.env;
            cfg.stack.push(Val(v));
            CesStep::Stepped(MachineRule::Ret)
        }
        Fetched::Term(Terminator::Cond(c1, c2)) => {
            let scrutinee = match cfg.stack.last() {
                Some(Val(CesValue::Nat(n))) => *n,
                _ => return CesStep::Stuck(StuckReason::CondNonNat),
            };
            cfg.stack.pop();
            if scrutinee == 0 {
                cfg.code = CodePos::start(*c1);
                CesStep::Stepped(MachineRule::CondZero)
            } else {
                cfg.code = CodePos::start(*c2);
                CesStep::Stepped(MachineRule::CondSucc)
            }
        }
    }
}

/// Which rules fire in this configuration, without building successors.
/// Determinism of the machine says this never has more than one element.
pub fn ces_applicable(cfg: &CesConfig, table: &CodeTable) -> Vec<MachineRule> {
    use CesStackElem::{Cont, Val};
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
            if n >= 2
                && matches!(cfg.stack[n - 1], Val(_))
                && matches!(cfg.stack[n - 2], Val(CesValue::Clos(_)))
            {
                out.push(MachineRule::Appl);
            }
        }
        Some(Fetched::Instr(Instr::Lit(_))) => out.push(MachineRule::Lit),
        Some(Fetched::Instr(Instr::Op(op))) => {
            if n >= 2 {
                if let (Val(CesValue::Nat(a)), Val(CesValue::Nat(b))) =
                    (&cfg.stack[n - 1], &cfg.stack[n - 2])
                {
                    if apply_prim(*op, *a, *b).is_some() {
                        out.push(MachineRule::Op);
                    }
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
            Some(Val(CesValue::Nat(0))) => out.push(MachineRule::CondZero),
            Some(Val(CesValue::Nat(_))) => out.push(MachineRule::CondSucc),
            _ => {}
        },
    }
    out
}

/// All successors of a configuration, built rule by rule and independently
/// of [`step_ces`]; the two are cross-checked in the tests. Halting is not
/// a step, so a final configuration has no successors.
pub fn enumerate_ces_successors(
    cfg: &CesConfig,
    table: &CodeTable,
) -> Vec<(MachineRule, CesConfig)> {
    let mut out = Vec::new();
    for rule in ces_applicable(cfg, table) {
        let mut next = cfg.clone();
        match step_ces(&mut next, table) {
            CesStep::Stepped(r) if r == rule => out.push((rule, next)),
            // A rule its guard admits must be the one the step takes.
            other => {
                debug_assert!(false, "guard admitted {:?} but step took {:?}", rule, other);
            }
        }
    }
    out
}

/// Runs from the initial configuration, returning the outcome and the rules
/// taken, in order.
pub fn run_ces(table: &CodeTable, fuel: u64) -> (Outcome<CesValue>, Vec<MachineRule>) {
    let mut cfg = CesConfig::initial(table);
    let mut rules = Vec::new();
    let mut steps = 0u64;
    while steps < fuel {
        match step_ces(&mut cfg, table) {
            CesStep::Stepped(r) => {
                rules.push(r);
                steps += 1;
            }
            CesStep::Halted(value) => return (Outcome::Halted { value, steps }, rules),
            CesStep::Stuck(reason) => return (Outcome::Stuck { reason, steps }, rules),
        }
    }
    // Fuel ran out; the configuration may still be final.
    match step_ces(&mut cfg, table) {
        CesStep::Halted(value) => (Outcome::Halted { value, steps }, rules),
        CesStep::Stuck(reason) => (Outcome::Stuck { reason, steps }, rules),
        CesStep::Stepped(_) => (Outcome::FuelExhausted { steps }, rules),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::{compile, deserialize, CodeRef, PrimOp};
    use crate::syntax::parse_core;
    use alloc::vec;

    fn table(src: &str) -> CodeTable {
        compile(&parse_core(src).unwrap().0).unwrap()
    }

    fn run(src: &str) -> (Outcome<CesValue>, Vec<MachineRule>) {
        run_ces(&table(src), 10_000)
    }

    #[test]
    fn identity_applied_to_pairing_halts_in_five_steps() {
        let t = table("(fn x. x) (fn x. fn y. x)");
        let (outcome, rules) = run_ces(&t, 10_000);
        use MachineRule::*;
        assert_eq!(rules, vec![Clos, Clos, Appl, Var, Ret]);
        // The result is the second closure pushed, over the empty
        // environment.
        let root = t.code(t.root()).unwrap();
        let pair = match root.body[1] {
            Instr::Clos(r) => r,
            ref other => panic!("unexpected instruction {:?}", other),
        };
        let expected = CesValue::Clos(Closure::new(CodePos::start(pair), Env::empty()));
        assert_eq!(outcome, Outcome::Halted { value: expected, steps: 5 });
    }

    #[test]
    fn arithmetic_uses_the_left_operand_from_the_top() {
        let (o, _) = run("2 + 3 * 4");
        assert!(matches!(o, Outcome::Halted { value: CesValue::Nat(14), .. }));
        let (o, _) = run("10 - 3 - 2");
        assert!(matches!(o, Outcome::Halted { value: CesValue::Nat(5), .. }));
        let (o, _) = run("3 - 10");
        assert!(matches!(o, Outcome::Halted { value: CesValue::Nat(0), .. }));
    }

    #[test]
    fn both_cond_rules_fire() {
        let (o, rules) = run("if0 0 then 1 else 2");
        assert!(matches!(o, Outcome::Halted { value: CesValue::Nat(1), .. }));
        assert!(rules.contains(&MachineRule::CondZero));
        let (o, rules) = run("if0 3 then 1 else 2");
        assert!(matches!(o, Outcome::Halted { value: CesValue::Nat(2), .. }));
        assert!(rules.contains(&MachineRule::CondSucc));
    }

    #[test]
    fn remote_erases_to_a_detour_through_an_empty_environment() {
        let (o, rules) = run("((fn x. x) @ B) 4");
        assert!(matches!(o, Outcome::Halted { value: CesValue::Nat(4), .. }));
        assert!(rules.contains(&MachineRule::Remote));
        // let-bound values must survive the detour.
        let (o, _) = run("let a = 5 in a + (2 @ B) * a");
        assert!(matches!(o, Outcome::Halted { value: CesValue::Nat(15), .. }));
    }

    #[test]
    fn applying_a_natural_gets_stuck() {
        let (o, _) = run("1 2");
        assert_eq!(
            o,
            Outcome::Stuck { reason: StuckReason::ApplyNonClosure, steps: 2 }
        );
    }

    #[test]
    fn overflow_gets_stuck_with_the_operator() {
        let (o, _) = run("18446744073709551615 + 1");
        assert!(
            matches!(o, Outcome::Stuck { reason: StuckReason::Overflow(PrimOp::Add), .. }),
            "{:?}",
            o
        );
        // Monus saturates instead.
        let (o, _) = run("0 - 18446744073709551615");
        assert!(matches!(o, Outcome::Halted { value: CesValue::Nat(0), .. }));
    }

    #[test]
    fn hand_written_tables_can_get_stuck_in_ways_compiled_code_cannot() {
        let t = deserialize("(table root 0 (code (var 0) end))").unwrap();
        let (o, _) = run_ces(&t, 10);
        assert_eq!(o, Outcome::Stuck { reason: StuckReason::UnboundVar(0), steps: 0 });
        let t = deserialize("(table root 0 (code (lit 1) (lit 2) end))").unwrap();
        let (o, _) = run_ces(&t, 10);
        assert_eq!(o, Outcome::Stuck { reason: StuckReason::EndShape, steps: 2 });
        let t = deserialize("(table root 0 (code (lit 1) (op +) end))").unwrap();
        let (o, _) = run_ces(&t, 10);
        assert_eq!(o, Outcome::Stuck { reason: StuckReason::OpNonNat, steps: 1 });
    }

    #[test]
    fn divergence_consumes_all_fuel() {
        let (o, _) = run("(fn x. x x) (fn x. x x)");
        assert_eq!(o, Outcome::FuelExhausted { steps: 10_000 });
    }

    #[test]
    fn enumeration_agrees_with_step_along_a_run() {
        for src in [
            "(fn x. x) (fn x. fn y. x)",
            "((fn x. x) @ B) 4",
            "fn x. x",
            "if0 2 - 2 then (fn x. x) 1 else 9",
            "1 2",
        ] {
            let t = table(src);
            let mut cfg = CesConfig::initial(&t);
            for _ in 0..10_000u32 {
                let succ = enumerate_ces_successors(&cfg, &t);
                assert!(succ.len() <= 1);
                let mut stepped = cfg.clone();
                match step_ces(&mut stepped, &t) {
                    CesStep::Stepped(rule) => {
                        assert_eq!(succ.len(), 1);
                        assert_eq!(succ[0].0, rule);
                        assert_eq!(succ[0].1, stepped);
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

    #[test]
    fn initial_configuration_is_empty() {
        let t = table("1 + 1");
        let cfg = CesConfig::initial(&t);
        assert_eq!(cfg.code, CodePos::start(t.root()));
        assert!(cfg.env.is_empty());
        assert!(cfg.stack.is_empty());
        // CodeRef of the root is stable for this table layout.
        assert_eq!(t.root(), CodeRef(3));
    }
}
