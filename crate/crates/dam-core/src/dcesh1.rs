// Copyright 2026 the dam authors
// SPDX-License-Identifier: Apache-2.0 OR MIT

//! The degenerate distributed machine: one node, talking to itself.
//!
//! This machine rehearses the communication structure of the distributed
//! machine without any of the distribution. Application and return are cut
//! in half: `APPL` packs the closure pointer, the argument and a freshly
//! allocated continuation into a message and stops the thread; receiving
//! that message enters the closure. `RET` likewise sends the result to a
//! continuation pointer and stops; receiving resumes the saved frame. Since
//! every message is addressed to the only node there is, running it under
//! the asynchronous semantics just interleaves each send with its receive.
//!
//! Two consequences, both load-bearing for what follows: the stack now
//! holds values only (continuations live in a heap behind pointers, split
//! off as the `cont` register of the stack), and a thread can be absent
//! while a message is in flight. The halt shape is a thread at `end` with
//! one value, no continuation and nothing in flight.
//!
//! `REMOTE` is the one instruction this machine cannot honour; it reports
//! it as a stuck state and the command line refuses such programs up front.

use alloc::vec::Vec;

use crate::bytecode::{apply_prim, CodePos, CodeTable, Fetched, Instr, Terminator};
use crate::heap::{Heap, Ptr};
use crate::machine::{Closure, DistRule, Env, Outcome, StuckReason};
use crate::network::{async_step, AsyncEvent, AsyncNet, Choice, NetError, Policy, Protocol, TaggedMsg};
use crate::syntax::NodeName;

pub type D1Closure = Closure<D1Value>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum D1Value {
    Nat(u64),
    ClosPtr(Ptr),
}

impl core::fmt::Display for D1Value {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            D1Value::Nat(n) => write!(f, "nat:{}", n),
            D1Value::ClosPtr(p) => write!(f, "clos:{}", p),
        }
    }
}

/// Values only; the continuation, if any, sits behind a pointer in its own
/// register.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct D1Stack {
    pub vals: Vec<D1Value>,
    pub cont: Option<Ptr>,
}

impl D1Stack {
    pub fn empty() -> D1Stack {
        D1Stack { vals: Vec::new(), cont: None }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct D1Thread {
    pub code: CodePos,
    pub env: Env<D1Value>,
    pub stack: D1Stack,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct D1Machine {
    pub thread: Option<D1Thread>,
    pub clos_heap: Heap<D1Closure>,
    /// A continuation cell is the frame to resume plus the stack it was
    /// suspended on.
    pub cont_heap: Heap<(D1Closure, D1Stack)>,
}

impl D1Machine {
    pub fn initial(table: &CodeTable) -> D1Machine {
        D1Machine {
            thread: Some(D1Thread {
                code: CodePos::start(table.root()),
                env: Env::empty(),
                stack: D1Stack::empty(),
            }),
            clos_heap: Heap::empty(),
            cont_heap: Heap::empty(),
        }
    }

    /// The machine-local half of the halt condition; the runner also wants
    /// no messages in flight.
    pub fn halted(&self, table: &CodeTable) -> Option<D1Value> {
        let th = self.thread.as_ref()?;
        match table.fetch(th.code) {
            Some(Fetched::Term(Terminator::End)) => {}
            _ => return None,
        }
        if th.env.is_empty() && th.stack.cont.is_none() && th.stack.vals.len() == 1 {
            Some(th.stack.vals[0])
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum D1Msg {
    Appl { clos: Ptr, arg: D1Value, cont: Ptr },
    Ret { cont: Ptr, value: D1Value },
}

impl core::fmt::Display for D1Msg {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            D1Msg::Appl { clos, arg, cont } => {
                write!(f, "APPL(clos={},arg={},cont={})", clos, arg, cont)
            }
            D1Msg::Ret { cont, value } => write!(f, "RET(cont={},val={})", cont, value),
        }
    }
}

/// The machine as a node protocol; the table is the whole readonly context
/// and the single node's name is fixed at construction.
pub struct Dcesh1<'a> {
    pub table: &'a CodeTable,
    pub node: NodeName,
}

impl<'a> Dcesh1<'a> {
    pub fn new(table: &'a CodeTable, node: NodeName) -> Self {
        Dcesh1 { table, node }
    }
}

impl<'a> Protocol for Dcesh1<'a> {
    type State = D1Machine;
    type Msg = D1Msg;
    type Rule = DistRule;
    type Node = NodeName;

    fn choices(
        &self,
        _node: &NodeName,
        m: &D1Machine,
        offered: &[D1Msg],
    ) -> Result<Vec<Choice<D1Msg, DistRule>>, StuckReason> {
        let mut out = Vec::new();
        match &m.thread {
            Some(th) => {
                // A running thread ignores offers; it only sends or moves
                // silently. No rule matching is a stuck machine, except for
                // the halt shape.
                let choice = thread_choice(self.table, th, &m.cont_heap)?;
                if let Some(c) = choice {
                    out.push(c);
                } else if m.halted(self.table).is_none() {
                    return Err(thread_stuck_reason(self.table, th));
                }
            }
            None => {
                for msg in offered {
                    match msg {
                        D1Msg::Appl { clos, .. } => {
                            if m.clos_heap.deref(*clos).is_none() {
                                return Err(StuckReason::DanglingClosure(clos.0));
                            }
                            out.push(Choice {
                                tag: TaggedMsg::Receive(msg.clone()),
                                rule: DistRule::ApplReceive,
                            });
                        }
                        D1Msg::Ret { cont, .. } => {
                            if m.cont_heap.deref(*cont).is_none() {
                                return Err(StuckReason::DanglingContinuation(cont.0));
                            }
                            out.push(Choice {
                                tag: TaggedMsg::Receive(msg.clone()),
                                rule: DistRule::RetReceive,
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn apply(
        &self,
        _node: &NodeName,
        m: &mut D1Machine,
        choice: &Choice<D1Msg, DistRule>,
    ) -> Result<(), StuckReason> {
        apply_choice(self.table, m, choice)
    }

    fn route(&self, _msg: &D1Msg) -> NodeName {
        self.node.clone()
    }
}

/// The single move of a running thread, if any. `Ok(None)` covers both the
/// halt shape and stuck shapes; the caller tells them apart.
fn thread_choice(
    table: &CodeTable,
    th: &D1Thread,
    cont_heap: &Heap<(D1Closure, D1Stack)>,
) -> Result<Option<Choice<D1Msg, DistRule>>, StuckReason> {
    let silent = |rule| Ok(Some(Choice { tag: TaggedMsg::Silent, rule }));
    let fetched = match table.fetch(th.code) {
        Some(f) => f,
        None => return Err(StuckReason::InvalidCode),
    };
    match fetched {
        Fetched::Instr(Instr::Var(n)) => {
            if th.env.get(*n).is_none() {
                return Ok(None);
            }
            silent(DistRule::Var)
        }
        Fetched::Instr(Instr::Clos(_)) => silent(DistRule::Clos),
        Fetched::Instr(Instr::Lit(_)) => silent(DistRule::Lit),
        Fetched::Instr(Instr::Op(op)) => {
            let n = th.stack.vals.len();
            match (n >= 2).then(|| (&th.stack.vals[n - 1], &th.stack.vals[n - 2])) {
                Some((D1Value::Nat(a), D1Value::Nat(b)))
                    if apply_prim(*op, *a, *b).is_some() =>
                {
                    silent(DistRule::Op)
                }
                _ => Ok(None),
            }
        }
        Fetched::Instr(Instr::Appl) => {
            let n = th.stack.vals.len();
            match (n >= 2).then(|| (&th.stack.vals[n - 1], &th.stack.vals[n - 2])) {
                Some((arg, D1Value::ClosPtr(p))) => {
                    // The continuation cell this send will allocate.
                    let cont = Ptr(cont_heap.len());
                    let msg = D1Msg::Appl { clos: *p, arg: *arg, cont };
                    Ok(Some(Choice { tag: TaggedMsg::Send(msg), rule: DistRule::ApplSend }))
                }
                _ => Ok(None),
            }
        }
        Fetched::Instr(Instr::Remote(..)) => Err(StuckReason::RemoteUnsupported),
        Fetched::Term(Terminator::End) => Ok(None),
        Fetched::Term(Terminator::Ret) => match (&th.stack.vals[..], th.stack.cont) {
            ([v], Some(cont)) => {
                let msg = D1Msg::Ret { cont, value: *v };
                Ok(Some(Choice { tag: TaggedMsg::Send(msg), rule: DistRule::RetSend }))
            }
            _ => Ok(None),
        },
        Fetched::Term(Terminator::Cond(..)) => match th.stack.vals.last() {
            Some(D1Value::Nat(0)) => silent(DistRule::CondZero),
            Some(D1Value::Nat(_)) => silent(DistRule::CondSucc),
            _ => Ok(None),
        },
    }
}

/// Why a running thread with no move is stuck. Only called on such threads,
/// so the catch-all shapes are honest.
fn thread_stuck_reason(table: &CodeTable, th: &D1Thread) -> StuckReason {
    match table.fetch(th.code) {
        None => StuckReason::InvalidCode,
        Some(Fetched::Instr(Instr::Var(n))) => StuckReason::UnboundVar(*n),
        Some(Fetched::Instr(Instr::Appl)) => StuckReason::ApplyNonClosure,
        Some(Fetched::Instr(Instr::Op(op))) => {
            let n = th.stack.vals.len();
            match (n >= 2).then(|| (&th.stack.vals[n - 1], &th.stack.vals[n - 2])) {
                Some((D1Value::Nat(a), D1Value::Nat(b)))
                    if apply_prim(*op, *a, *b).is_none() =>
                {
                    StuckReason::Overflow(*op)
                }
                _ => StuckReason::OpNonNat,
            }
        }
        Some(Fetched::Instr(Instr::Remote(..))) => StuckReason::RemoteUnsupported,
        Some(Fetched::Term(Terminator::End)) => StuckReason::EndShape,
        Some(Fetched::Term(Terminator::Ret)) => StuckReason::RetStackShape,
        Some(Fetched::Term(Terminator::Cond(..))) => StuckReason::CondNonNat,
        Some(Fetched::Instr(Instr::Clos(_)))
        | Some(Fetched::Instr(Instr::Lit(_))) => unreachable!("these always have a move"),
    }
}

fn apply_choice(
    table: &CodeTable,
    m: &mut D1Machine,
    choice: &Choice<D1Msg, DistRule>,
) -> Result<(), StuckReason> {
    match (&choice.tag, choice.rule) {
        (TaggedMsg::Silent, rule) => {
            let th = m.thread.as_mut().expect("silent moves need a thread");
            match (table.fetch(th.code), rule) {
                (Some(Fetched::Instr(Instr::Var(n))), DistRule::Var) => {
                    let v = *th.env.get(*n).ok_or(StuckReason::UnboundVar(*n))?;
                    th.stack.vals.push(v);
                    th.code = th.code.advance();
                }
                (Some(Fetched::Instr(Instr::Clos(r))), DistRule::Clos) => {
                    let p = m
                        .clos_heap
                        .alloc(Closure::new(CodePos::start(*r), th.env.clone()));
                    th.stack.vals.push(D1Value::ClosPtr(p));
                    th.code = th.code.advance();
                }
                (Some(Fetched::Instr(Instr::Lit(n))), DistRule::Lit) => {
                    th.stack.vals.push(D1Value::Nat(*n));
                    th.code = th.code.advance();
                }
                (Some(Fetched::Instr(Instr::Op(op))), DistRule::Op) => {
                    let n1 = th.stack.vals.pop();
                    let n2 = th.stack.vals.pop();
                    match (n1, n2) {
                        (Some(D1Value::Nat(a)), Some(D1Value::Nat(b))) => {
                            let r = apply_prim(*op, a, b).ok_or(StuckReason::Overflow(*op))?;
                            th.stack.vals.push(D1Value::Nat(r));
                            th.code = th.code.advance();
                        }
                        _ => return Err(StuckReason::OpNonNat),
                    }
                }
                (Some(Fetched::Term(Terminator::Cond(c1, c2))), rule) => {
                    match th.stack.vals.pop() {
                        Some(D1Value::Nat(0)) if rule == DistRule::CondZero => {
                            th.code = CodePos::start(*c1);
                        }
                        Some(D1Value::Nat(n)) if n > 0 && rule == DistRule::CondSucc => {
                            th.code = CodePos::start(*c2);
                        }
                        _ => return Err(StuckReason::CondNonNat),
                    }
                }
                _ => unreachable!("silent choice out of sync with the thread"),
            }
            Ok(())
        }
        (TaggedMsg::Send(D1Msg::Appl { clos, arg, cont }), DistRule::ApplSend) => {
            let th = m.thread.take().expect("sends need a thread");
            let mut vals = th.stack.vals;
            let popped_arg = vals.pop();
            let popped_clos = vals.pop();
            debug_assert_eq!(popped_arg, Some(*arg));
            debug_assert_eq!(popped_clos, Some(D1Value::ClosPtr(*clos)));
            let frame = Closure::new(th.code.advance(), th.env);
            let rest = D1Stack { vals, cont: th.stack.cont };
            let allocated = m.cont_heap.alloc((frame, rest));
            debug_assert_eq!(allocated, *cont);
            Ok(())
        }
        (TaggedMsg::Send(D1Msg::Ret { .. }), DistRule::RetSend) => {
            m.thread = None;
            Ok(())
        }
        (TaggedMsg::Receive(D1Msg::Appl { clos, arg, cont }), DistRule::ApplReceive) => {
            let c = m
                .clos_heap
                .deref(*clos)
                .ok_or(StuckReason::DanglingClosure(clos.0))?;
            m.thread = Some(D1Thread {
                code: c.code,
                env: c.env.cons(*arg),
                stack: D1Stack { vals: Vec::new(), cont: Some(*cont) },
            });
            Ok(())
        }
        (TaggedMsg::Receive(D1Msg::Ret { cont, value }), DistRule::RetReceive) => {
            let (frame, saved) = m
                .cont_heap
                .deref(*cont)
                .ok_or(StuckReason::DanglingContinuation(cont.0))?;
            let mut stack = saved.clone();
            stack.vals.push(*value);
            m.thread = Some(D1Thread { code: frame.code, env: frame.env.clone(), stack });
            Ok(())
        }
        _ => unreachable!("choice tag and rule out of sync"),
    }
}

pub type D1Event = AsyncEvent<NodeName, DistRule, D1Msg>;
pub type D1Net = AsyncNet<NodeName, D1Machine, D1Msg>;

/// Runs the machine as the only node of an asynchronous network. The event
/// list is the full trace; its length is the step count.
pub fn run_dcesh1(table: &CodeTable, fuel: u64) -> (Outcome<D1Value>, Vec<D1Event>, D1Machine) {
    let node = NodeName::new("A").expect("fixed name");
    let proto = Dcesh1::new(table, node.clone());
    let mut net: D1Net = {
        let mut nodes = alloc::collections::BTreeMap::new();
        nodes.insert(node.clone(), D1Machine::initial(table));
        AsyncNet { nodes, msgs: Vec::new() }
    };
    let mut policy = Policy::Fifo;
    let mut trace = Vec::new();
    let mut steps = 0u64;
    loop {
        let m = &net.nodes[&node];
        if net.msgs.is_empty() {
            if let Some(value) = m.halted(table) {
                let m = net.nodes.remove(&node).expect("sole node");
                return (Outcome::Halted { value, steps }, trace, m);
            }
        }
        if steps >= fuel {
            let m = net.nodes.remove(&node).expect("sole node");
            return (Outcome::FuelExhausted { steps }, trace, m);
        }
        match async_step(&proto, &mut net, &mut policy) {
            Ok(Some(ev)) => {
                trace.push(ev);
                steps += 1;
            }
            Ok(None) => {
                let m = net.nodes.remove(&node).expect("sole node");
                return (
                    Outcome::Stuck { reason: StuckReason::NoRunnableThread, steps },
                    trace,
                    m,
                );
            }
            Err(NetError::Machine { reason, .. }) => {
                let m = net.nodes.remove(&node).expect("sole node");
                return (Outcome::Stuck { reason, steps }, trace, m);
            }
            Err(_) => {
                let m = net.nodes.remove(&node).expect("sole node");
                return (
                    Outcome::Stuck { reason: StuckReason::NoRunnableThread, steps },
                    trace,
                    m,
                );
            }
        }
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

    fn rules(trace: &[D1Event]) -> Vec<DistRule> {
        trace
            .iter()
            .map(|e| match e {
                AsyncEvent::Silent { rule, .. }
                | AsyncEvent::Send { rule, .. }
                | AsyncEvent::Receive { rule, .. } => *rule,
            })
            .collect()
    }

    #[test]
    fn the_example_runs_in_seven_decomposed_steps() {
        let t = table("(fn x. x) (fn x. fn y. x)");
        let (outcome, trace, m) = run_dcesh1(&t, 10_000);
        use DistRule::*;
        assert_eq!(
            rules(&trace),
            vec![Clos, Clos, ApplSend, ApplReceive, Var, RetSend, RetReceive]
        );
        assert_eq!(outcome, Outcome::Halted { value: D1Value::ClosPtr(Ptr(1)), steps: 7 });
        // Final thread: at the end of the root block, empty environment,
        // the pairing closure's pointer as the lone value, no continuation.
        let th = m.thread.as_ref().unwrap();
        assert!(th.env.is_empty());
        assert_eq!(th.stack, D1Stack { vals: vec![D1Value::ClosPtr(Ptr(1))], cont: None });
        assert_eq!(th.code.pos, 3);
        assert_eq!(th.code.code, t.root());
        // Both closures were allocated, plus exactly one continuation: the
        // caller's frame over the empty stack.
        assert_eq!(m.clos_heap.len(), 2);
        assert_eq!(m.cont_heap.len(), 1);
        let (frame, saved) = m.cont_heap.deref(Ptr(0)).unwrap();
        assert_eq!(frame.code, CodePos { code: t.root(), pos: 3 });
        assert!(frame.env.is_empty());
        assert_eq!(*saved, D1Stack::empty());
        // The messages sent along the way are pinned too.
        match &trace[2] {
            AsyncEvent::Send { msg, .. } => assert_eq!(
                *msg,
                D1Msg::Appl { clos: Ptr(0), arg: D1Value::ClosPtr(Ptr(1)), cont: Ptr(0) }
            ),
            other => panic!("expected a send, got {:?}", other),
        }
        match &trace[5] {
            AsyncEvent::Send { msg, .. } => {
                assert_eq!(*msg, D1Msg::Ret { cont: Ptr(0), value: D1Value::ClosPtr(Ptr(1)) })
            }
            other => panic!("expected a send, got {:?}", other),
        }
    }

    #[test]
    fn results_agree_with_ces_on_remote_free_programs() {
        for src in [
            "2 + 3 * 4",
            "if0 2 - 2 then (fn x. x) 1 else 9",
            "let f = fn x. x + 1 in f (f (f 0))",
            "(fn f. f (f 2)) (fn x. x * x)",
            "if0 1 then 0 else 10 - 3",
        ] {
            let t = table(src);
            let (ces_out, _) = run_ces(&t, 10_000);
            let (d1_out, _, _) = run_dcesh1(&t, 100_000);
            match (&ces_out, &d1_out) {
                (
                    Outcome::Halted { value: CesValue::Nat(a), .. },
                    Outcome::Halted { value: D1Value::Nat(b), .. },
                ) => assert_eq!(a, b, "{}", src),
                other => panic!("outcomes diverge on {}: {:?}", src, other),
            }
        }
    }

    #[test]
    fn stuck_programs_stay_stuck() {
        let (o, _, _) = run_dcesh1(&table("1 2"), 100);
        assert_eq!(o, Outcome::Stuck { reason: StuckReason::ApplyNonClosure, steps: 2 });
        let (o, _, _) = run_dcesh1(&table("(fn x. x 1) 5"), 100);
        assert!(
            matches!(o, Outcome::Stuck { reason: StuckReason::ApplyNonClosure, .. }),
            "{:?}",
            o
        );
    }

    #[test]
    fn remote_programs_are_a_stuck_state() {
        let (o, _, _) = run_dcesh1(&table("(2 @ B) + 1"), 100);
        assert!(
            matches!(o, Outcome::Stuck { reason: StuckReason::RemoteUnsupported, .. }),
            "{:?}",
            o
        );
    }

    #[test]
    fn divergence_exhausts_fuel_without_growing_messages() {
        let (o, trace, m) = run_dcesh1(&table("(fn x. x x) (fn x. x x)"), 1_000);
        assert_eq!(o, Outcome::FuelExhausted { steps: 1_000 });
        // At most one message is ever in flight, and sends pair with
        // receives immediately under the fifo policy.
        let mut in_flight = 0i64;
        for ev in &trace {
            match ev {
                AsyncEvent::Send { .. } => in_flight += 1,
                AsyncEvent::Receive { .. } => in_flight -= 1,
                AsyncEvent::Silent { .. } => {}
            }
            assert!((0..=1).contains(&in_flight));
        }
        assert!(m.cont_heap.len() > 100);
    }

    #[test]
    fn heaps_only_grow_along_a_run() {
        let t = table("(fn f. f (f 2)) (fn x. x * x)");
        let node = NodeName::new("A").unwrap();
        let proto = Dcesh1::new(&t, node.clone());
        let mut nodes = alloc::collections::BTreeMap::new();
        nodes.insert(node.clone(), D1Machine::initial(&t));
        let mut net: D1Net = AsyncNet { nodes, msgs: Vec::new() };
        let mut policy = Policy::Fifo;
        loop {
            let before = net.nodes[&node].clone();
            match async_step(&proto, &mut net, &mut policy).unwrap() {
                Some(_) => {
                    let after = &net.nodes[&node];
                    assert!(before.clos_heap.is_prefix(&after.clos_heap));
                    assert!(before.cont_heap.is_prefix(&after.cont_heap));
                }
                None => break,
            }
        }
    }
}
