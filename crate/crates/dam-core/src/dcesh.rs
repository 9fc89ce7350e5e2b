// Copyright 2026 the dam authors
// SPDX-License-Identifier: Apache-2.0 OR MIT

//! The distributed machine: one CESH-style node per network participant.
//!
//! Pointers now name a cell *and* the node whose heap holds it. A node uses
//! its sequential rules as long as everything it touches is local; the
//! moment it must apply a closure living elsewhere, return to a foreign
//! continuation, or honour a placement annotation, it packs the work into a
//! message, parks its thread and lets the addressee continue:
//!
//! * `REMOTE` always communicates, even when the target is the node itself;
//!   the body starts there in an empty environment over a fresh, empty
//!   stack that only knows the continuation pointer to come back to.
//! * `APPL` communicates exactly when the closure is foreign. The rest of
//!   the caller's stack is saved whole in a continuation cell; the callee
//!   starts on an empty stack. A return to the saved continuation is a
//!   message exactly when the running stack is down to one value and its
//!   continuation register, which cannot overlap the local return rule.
//!
//! Messages are routed by the pointer they carry: an application goes to
//! the closure's node, a return to the continuation's node, remote work to
//! its explicit target. At most one node is ever active, so a run of the
//! whole network is deterministic, and each message has exactly one home;
//! the network engine checks both while stepping.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::bytecode::{apply_prim, CodePos, CodeRef, CodeTable, Fetched, Instr, Terminator};
use crate::heap::{Heap, Ptr};
use crate::machine::{Closure, DistRule, Env, Outcome, StuckReason};
use crate::network::{
    async_step, sync_step, AsyncEvent, AsyncNet, Choice, NetError, Policy, Protocol, SyncEvent,
    SyncNet, TaggedMsg,
};
use crate::syntax::NodeName;

/// A pointer together with the node whose heap it refers to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemotePtr {
    pub ptr: Ptr,
    pub node: NodeName,
}

impl core::fmt::Display for RemotePtr {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}@{}", self.ptr, self.node)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DValue {
    Nat(u64),
    Clos(RemotePtr),
}

impl core::fmt::Display for DValue {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DValue::Nat(n) => write!(f, "nat:{}", n),
            DValue::Clos(p) => write!(f, "clos:{}", p),
        }
    }
}

pub type DClosure = Closure<DValue>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DStackElem {
    Val(DValue),
    /// A local return frame; only ever consumed by the node that pushed it.
    Cont(DClosure),
}

/// Stack elements plus the continuation register: where results go once the
/// elements run out. `None` means this thread owns the final answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DStack {
    pub elems: Vec<DStackElem>,
    pub cont: Option<RemotePtr>,
}

impl DStack {
    pub fn empty() -> DStack {
        DStack { elems: Vec::new(), cont: None }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DThread {
    pub code: CodePos,
    pub env: Env<DValue>,
    pub stack: DStack,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DMachine {
    pub thread: Option<DThread>,
    pub clos_heap: Heap<DClosure>,
    pub cont_heap: Heap<(DClosure, DStack)>,
}

impl DMachine {
    pub fn inactive() -> DMachine {
        DMachine { thread: None, clos_heap: Heap::empty(), cont_heap: Heap::empty() }
    }

    pub fn active(table: &CodeTable) -> DMachine {
        DMachine {
            thread: Some(DThread {
                code: CodePos::start(table.root()),
                env: Env::empty(),
                stack: DStack::empty(),
            }),
            ..DMachine::inactive()
        }
    }

    pub fn halted(&self, table: &CodeTable) -> Option<&DValue> {
        let th = self.thread.as_ref()?;
        match table.fetch(th.code) {
            Some(Fetched::Term(Terminator::End)) => {}
            _ => return None,
        }
        if !th.env.is_empty() || th.stack.cont.is_some() {
            return None;
        }
        match &th.stack.elems[..] {
            [DStackElem::Val(v)] => Some(v),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DMsg {
    /// Run block `code` on `target`, then return to `cont`.
    Remote { code: CodeRef, target: NodeName, cont: RemotePtr },
    /// Apply the closure behind `clos` to `arg`, then return to `cont`.
    Appl { clos: RemotePtr, arg: DValue, cont: RemotePtr },
    /// Deliver `value` to the continuation behind `cont`.
    Ret { cont: RemotePtr, value: DValue },
}

impl core::fmt::Display for DMsg {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DMsg::Remote { code, target, cont } => {
                write!(f, "REMOTE(code={},target={},cont={})", code, target, cont)
            }
            DMsg::Appl { clos, arg, cont } => {
                write!(f, "APPL(clos={},arg={},cont={})", clos, arg, cont)
            }
            DMsg::Ret { cont, value } => write!(f, "RET(cont={},val={})", cont, value),
        }
    }
}

/// Where a message is addressed: always the node of the pointer it acts on.
pub fn route(msg: &DMsg) -> NodeName {
    match msg {
        DMsg::Remote { target, .. } => target.clone(),
        DMsg::Appl { clos, .. } => clos.node.clone(),
        DMsg::Ret { cont, .. } => cont.node.clone(),
    }
}

pub struct Dcesh<'a> {
    pub table: &'a CodeTable,
}

impl<'a> Protocol for Dcesh<'a> {
    type State = DMachine;
    type Msg = DMsg;
    type Rule = DistRule;
    type Node = NodeName;

    fn choices(
        &self,
        node: &NodeName,
        m: &DMachine,
        offered: &[DMsg],
    ) -> Result<Vec<Choice<DMsg, DistRule>>, StuckReason> {
        let mut out = Vec::new();
        match &m.thread {
            Some(th) => {
                if let Some(c) = thread_choice(self.table, node, th, &m.clos_heap, &m.cont_heap)? {
                    out.push(c);
                } else if m.halted(self.table).is_none() {
                    return Err(thread_stuck_reason(self.table, th));
                }
            }
            None => {
                for msg in offered {
                    if route(msg) != *node {
                        continue;
                    }
                    let rule = match msg {
                        DMsg::Remote { .. } => DistRule::RemoteReceive,
                        DMsg::Appl { clos, .. } => {
                            if m.clos_heap.deref(clos.ptr).is_none() {
                                return Err(StuckReason::DanglingClosure(clos.ptr.0));
                            }
                            DistRule::ApplReceive
                        }
                        DMsg::Ret { cont, .. } => {
                            if m.cont_heap.deref(cont.ptr).is_none() {
                                return Err(StuckReason::DanglingContinuation(cont.ptr.0));
                            }
                            DistRule::RetReceive
                        }
                    };
                    out.push(Choice { tag: TaggedMsg::Receive(msg.clone()), rule });
                }
            }
        }
        Ok(out)
    }

    fn apply(
        &self,
        node: &NodeName,
        m: &mut DMachine,
        choice: &Choice<DMsg, DistRule>,
    ) -> Result<(), StuckReason> {
        apply_choice(self.table, node, m, choice)
    }

    fn route(&self, msg: &DMsg) -> NodeName {
        route(msg)
    }
}

/// The unique move of a running thread on node `i`, if it has one.
fn thread_choice(
    table: &CodeTable,
    i: &NodeName,
    th: &DThread,
    clos_heap: &Heap<DClosure>,
    cont_heap: &Heap<(DClosure, DStack)>,
) -> Result<Option<Choice<DMsg, DistRule>>, StuckReason> {
    use DStackElem::{Cont, Val};
    let silent = |rule| Ok(Some(Choice { tag: TaggedMsg::Silent, rule }));
    let send = |msg, rule| Ok(Some(Choice { tag: TaggedMsg::Send(msg), rule }));
    let fresh_cont = || RemotePtr { ptr: Ptr(cont_heap.len()), node: i.clone() };
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
            let n = th.stack.elems.len();
            match (n >= 2).then(|| (&th.stack.elems[n - 1], &th.stack.elems[n - 2])) {
                Some((Val(DValue::Nat(a)), Val(DValue::Nat(b))))
                    if apply_prim(*op, *a, *b).is_some() =>
                {
                    silent(DistRule::Op)
                }
                _ => Ok(None),
            }
        }
        Fetched::Instr(Instr::Appl) => {
            let n = th.stack.elems.len();
            match (n >= 2).then(|| (&th.stack.elems[n - 1], &th.stack.elems[n - 2])) {
                Some((Val(arg), Val(DValue::Clos(rp)))) => {
                    if rp.node == *i {
                        // Local fast path; a dangling local pointer is a
                        // fault, not a missing rule.
                        if clos_heap.deref(rp.ptr).is_none() {
                            return Err(StuckReason::DanglingClosure(rp.ptr.0));
                        }
                        silent(DistRule::Appl)
                    } else {
                        let msg =
                            DMsg::Appl { clos: rp.clone(), arg: arg.clone(), cont: fresh_cont() };
                        send(msg, DistRule::ApplSend)
                    }
                }
                _ => Ok(None),
            }
        }
        Fetched::Instr(Instr::Remote(r, target)) => {
            // No locality shortcut here: placement always communicates,
            // self-placement becoming a message to oneself.
            let msg = DMsg::Remote { code: *r, target: target.clone(), cont: fresh_cont() };
            send(msg, DistRule::RemoteSend)
        }
        Fetched::Term(Terminator::End) => Ok(None),
        Fetched::Term(Terminator::Ret) => {
            let n = th.stack.elems.len();
            if n >= 2 && matches!(th.stack.elems[n - 1], Val(_)) && matches!(th.stack.elems[n - 2], Cont(_)) {
                return silent(DistRule::Ret);
            }
            match (&th.stack.elems[..], &th.stack.cont) {
                ([Val(v)], Some(rp)) => {
                    let msg = DMsg::Ret { cont: rp.clone(), value: v.clone() };
                    send(msg, DistRule::RetSend)
                }
                _ => Ok(None),
            }
        }
        Fetched::Term(Terminator::Cond(..)) => match th.stack.elems.last() {
            Some(Val(DValue::Nat(0))) => silent(DistRule::CondZero),
            Some(Val(DValue::Nat(_))) => silent(DistRule::CondSucc),
            _ => Ok(None),
        },
    }
}

fn thread_stuck_reason(table: &CodeTable, th: &DThread) -> StuckReason {
    use DStackElem::Val;
    match table.fetch(th.code) {
        None => StuckReason::InvalidCode,
        Some(Fetched::Instr(Instr::Var(n))) => StuckReason::UnboundVar(*n),
        Some(Fetched::Instr(Instr::Appl)) => StuckReason::ApplyNonClosure,
        Some(Fetched::Instr(Instr::Op(op))) => {
            let n = th.stack.elems.len();
            match (n >= 2).then(|| (&th.stack.elems[n - 1], &th.stack.elems[n - 2])) {
                Some((Val(DValue::Nat(a)), Val(DValue::Nat(b))))
                    if apply_prim(*op, *a, *b).is_none() =>
                {
                    StuckReason::Overflow(*op)
                }
                _ => StuckReason::OpNonNat,
            }
        }
        Some(Fetched::Term(Terminator::End)) => StuckReason::EndShape,
        Some(Fetched::Term(Terminator::Ret)) => StuckReason::RetStackShape,
        Some(Fetched::Term(Terminator::Cond(..))) => StuckReason::CondNonNat,
        Some(Fetched::Instr(Instr::Clos(_)))
        | Some(Fetched::Instr(Instr::Lit(_)))
        | Some(Fetched::Instr(Instr::Remote(..))) => {
            unreachable!("these always have a move")
        }
    }
}

fn apply_choice(
    table: &CodeTable,
    i: &NodeName,
    m: &mut DMachine,
    choice: &Choice<DMsg, DistRule>,
) -> Result<(), StuckReason> {
    use DStackElem::{Cont, Val};
    match (&choice.tag, choice.rule) {
        (TaggedMsg::Silent, rule) => {
            let th = m.thread.as_mut().expect("silent moves need a thread");
            match (table.fetch(th.code), rule) {
                (Some(Fetched::Instr(Instr::Var(n))), DistRule::Var) => {
                    let v = th.env.get(*n).ok_or(StuckReason::UnboundVar(*n))?.clone();
                    th.stack.elems.push(Val(v));
                    th.code = th.code.advance();
                }
                (Some(Fetched::Instr(Instr::Clos(r))), DistRule::Clos) => {
                    let p = m
                        .clos_heap
                        .alloc(Closure::new(CodePos::start(*r), th.env.clone()));
                    th.stack.elems.push(Val(DValue::Clos(RemotePtr { ptr: p, node: i.clone() })));
                    th.code = th.code.advance();
                }
                (Some(Fetched::Instr(Instr::Lit(n))), DistRule::Lit) => {
                    th.stack.elems.push(Val(DValue::Nat(*n)));
                    th.code = th.code.advance();
                }
                (Some(Fetched::Instr(Instr::Op(op))), DistRule::Op) => {
                    let n1 = th.stack.elems.pop();
                    let n2 = th.stack.elems.pop();
                    match (n1, n2) {
                        (Some(Val(DValue::Nat(a))), Some(Val(DValue::Nat(b)))) => {
                            let r = apply_prim(*op, a, b).ok_or(StuckReason::Overflow(*op))?;
                            th.stack.elems.push(Val(DValue::Nat(r)));
                            th.code = th.code.advance();
                        }
                        _ => return Err(StuckReason::OpNonNat),
                    }
                }
                (Some(Fetched::Instr(Instr::Appl)), DistRule::Appl) => {
                    let arg = th.stack.elems.pop();
                    let fun = th.stack.elems.pop();
                    let (arg, rp) = match (arg, fun) {
                        (Some(Val(a)), Some(Val(DValue::Clos(rp)))) => (a, rp),
                        _ => return Err(StuckReason::ApplyNonClosure),
                    };
                    debug_assert_eq!(rp.node, *i, "local application of a foreign closure");
                    let clos = m
                        .clos_heap
                        .deref(rp.ptr)
                        .ok_or(StuckReason::DanglingClosure(rp.ptr.0))?
                        .clone();
                    th.stack.elems.push(Cont(Closure::new(th.code.advance(), th.env.clone())));
                    th.code = clos.code;
                    th.env = clos.env.cons(arg);
                }
                (Some(Fetched::Term(Terminator::Ret)), DistRule::Ret) => {
                    let v = th.stack.elems.pop();
                    let k = th.stack.elems.pop();
                    match (v, k) {
                        (Some(Val(v)), Some(Cont(k))) => {
                            th.code = k.code;
                            th.env = k.env;
                            th.stack.elems.push(Val(v));
                        }
                        _ => return Err(StuckReason::RetStackShape),
                    }
                }
                (Some(Fetched::Term(Terminator::Cond(c1, c2))), rule) => {
                    match th.stack.elems.pop() {
                        Some(Val(DValue::Nat(0))) if rule == DistRule::CondZero => {
                            th.code = CodePos::start(*c1);
                        }
                        Some(Val(DValue::Nat(n))) if n > 0 && rule == DistRule::CondSucc => {
                            th.code = CodePos::start(*c2);
                        }
                        _ => return Err(StuckReason::CondNonNat),
                    }
                }
                _ => unreachable!("silent choice out of sync with the thread"),
            }
            Ok(())
        }
        (TaggedMsg::Send(msg), rule) => {
            let th = m.thread.take().expect("sends need a thread");
            match (msg, rule) {
                (DMsg::Appl { cont, .. }, DistRule::ApplSend) => {
                    let mut elems = th.stack.elems;
                    elems.pop();
                    elems.pop();
                    let frame = Closure::new(th.code.advance(), th.env);
                    let rest = DStack { elems, cont: th.stack.cont };
                    let allocated = m.cont_heap.alloc((frame, rest));
                    debug_assert_eq!((allocated, i), (cont.ptr, &cont.node));
                }
                (DMsg::Remote { cont, .. }, DistRule::RemoteSend) => {
                    // The whole stack is parked; the remote body gets a
                    // fresh one.
                    let frame = Closure::new(th.code.advance(), th.env);
                    let allocated = m.cont_heap.alloc((frame, th.stack));
                    debug_assert_eq!((allocated, i), (cont.ptr, &cont.node));
                }
                (DMsg::Ret { .. }, DistRule::RetSend) => {}
                _ => unreachable!("send message and rule out of sync"),
            }
            Ok(())
        }
        (TaggedMsg::Receive(msg), rule) => {
            debug_assert!(m.thread.is_none(), "receives need an idle node");
            match (msg, rule) {
                (DMsg::Remote { code, cont, .. }, DistRule::RemoteReceive) => {
                    m.thread = Some(DThread {
                        code: CodePos::start(*code),
                        env: Env::empty(),
                        stack: DStack { elems: Vec::new(), cont: Some(cont.clone()) },
                    });
                }
                (DMsg::Appl { clos, arg, cont }, DistRule::ApplReceive) => {
                    let c = m
                        .clos_heap
                        .deref(clos.ptr)
                        .ok_or(StuckReason::DanglingClosure(clos.ptr.0))?;
                    m.thread = Some(DThread {
                        code: c.code,
                        env: c.env.cons(arg.clone()),
                        stack: DStack { elems: Vec::new(), cont: Some(cont.clone()) },
                    });
                }
                (DMsg::Ret { cont, value }, DistRule::RetReceive) => {
                    let (frame, saved) = m
                        .cont_heap
                        .deref(cont.ptr)
                        .ok_or(StuckReason::DanglingContinuation(cont.ptr.0))?;
                    let mut stack = saved.clone();
                    stack.elems.push(Val(value.clone()));
                    m.thread = Some(DThread { code: frame.code, env: frame.env.clone(), stack });
                }
                _ => unreachable!("receive message and rule out of sync"),
            }
            Ok(())
        }
    }
}

pub type DSyncNet = SyncNet<NodeName, DMachine>;
pub type DAsyncNet = AsyncNet<NodeName, DMachine, DMsg>;
pub type DSyncEvent = SyncEvent<NodeName, DistRule, DMsg>;
pub type DAsyncEvent = AsyncEvent<NodeName, DistRule, DMsg>;

/// The network that runs `table` starting on `root`: the root node holds
/// the initial thread, everyone else is idle with empty heaps.
pub fn initial_network(
    table: &CodeTable,
    root: &NodeName,
    nodes: &[NodeName],
) -> Result<DSyncNet, String> {
    if !nodes.contains(root) {
        return Err(format!("root node {} is not among the nodes", root));
    }
    let mut map = BTreeMap::new();
    for n in nodes {
        let m = if n == root { DMachine::active(table) } else { DMachine::inactive() };
        if map.insert(n.clone(), m).is_some() {
            return Err(format!("node {} appears twice", n));
        }
    }
    Ok(SyncNet::new(map))
}

/// Nodes whose thread is present.
pub fn active_nodes<'a>(nodes: &'a BTreeMap<NodeName, DMachine>) -> Vec<&'a NodeName> {
    nodes.iter().filter(|(_, m)| m.thread.is_some()).map(|(n, _)| n).collect()
}

/// The network-level halt: exactly one node holds a thread, that thread is
/// in the halt shape, and (for the asynchronous runs) nothing is in flight.
pub fn halted_network(
    table: &CodeTable,
    nodes: &BTreeMap<NodeName, DMachine>,
) -> Option<(NodeName, DValue)> {
    let active = active_nodes(nodes);
    match active[..] {
        [node] => nodes[node].halted(table).map(|v| (node.clone(), v.clone())),
        _ => None,
    }
}

fn stuck_outcome(e: NetError<NodeName, DMsg>, steps: u64) -> Result<Outcome<DValue>, String> {
    match e {
        NetError::Machine { reason, .. } => Ok(Outcome::Stuck { reason, steps }),
        other => Err(format!("network invariant broken: {}", other)),
    }
}

/// Runs the network synchronously. Machine faults are a stuck outcome;
/// scheduler anomalies (several active nodes, zero or several receivers)
/// are an error, since the machine is supposed to make them impossible.
pub fn run_dcesh_sync(
    table: &CodeTable,
    root: &NodeName,
    nodes: &[NodeName],
    fuel: u64,
) -> Result<(Outcome<DValue>, Vec<DSyncEvent>, DSyncNet), String> {
    let proto = Dcesh { table };
    let mut net = initial_network(table, root, nodes)?;
    let mut trace = Vec::new();
    let mut steps = 0u64;
    loop {
        if let Some((_, value)) = halted_network(table, &net.nodes) {
            return Ok((Outcome::Halted { value, steps }, trace, net));
        }
        if steps >= fuel {
            return Ok((Outcome::FuelExhausted { steps }, trace, net));
        }
        match sync_step(&proto, &mut net) {
            Ok(Some(ev)) => {
                trace.push(ev);
                steps += 1;
            }
            Ok(None) => {
                let reason = StuckReason::NoRunnableThread;
                return Ok((Outcome::Stuck { reason, steps }, trace, net));
            }
            Err(e) => return Ok((stuck_outcome(e, steps)?, trace, net)),
        }
    }
}

/// Runs the network asynchronously under the given policy.
pub fn run_dcesh_async(
    table: &CodeTable,
    root: &NodeName,
    nodes: &[NodeName],
    fuel: u64,
    mut policy: Policy,
) -> Result<(Outcome<DValue>, Vec<DAsyncEvent>, DAsyncNet), String> {
    let proto = Dcesh { table };
    let mut net = initial_network(table, root, nodes)?.into_async();
    let mut trace = Vec::new();
    let mut steps = 0u64;
    loop {
        if net.msgs.is_empty() {
            if let Some((_, value)) = halted_network(table, &net.nodes) {
                return Ok((Outcome::Halted { value, steps }, trace, net));
            }
        }
        if steps >= fuel {
            return Ok((Outcome::FuelExhausted { steps }, trace, net));
        }
        match async_step(&proto, &mut net, &mut policy) {
            Ok(Some(ev)) => {
                trace.push(ev);
                steps += 1;
            }
            Ok(None) => {
                let reason = StuckReason::NoRunnableThread;
                return Ok((Outcome::Stuck { reason, steps }, trace, net));
            }
            Err(e) => return Ok((stuck_outcome(e, steps)?, trace, net)),
        }
    }
}
