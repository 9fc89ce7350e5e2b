// Copyright 2026 the dam authors
// SPDX-License-Identifier: Apache-2.0 OR MIT

//! Executable counterparts of the correctness arguments.
//!
//! Rather than proving that the machine layers refine one another, this
//! module checks it on concrete runs:
//!
//! * [`eval_reference`] evaluates the source term directly and serves as an
//!   oracle nobody else's bugs can hide behind.
//! * [`r_cfg`] relates a specification state to a heap state; [`r_sync`]
//!   relates a heap state to a whole distributed network, indexed by how
//!   deeply closures are unfolded.
//! * [`lockstep`] advances all three layers together and verifies the
//!   relations, one-step determinism and the final verdicts at every state.
//! * [`check_async_equiv`] runs the network twice, synchronously and
//!   asynchronously, and checks that the second run is exactly the
//!   embedding of the first, in both directions and under replay.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::bytecode::{apply_prim, CodeTable};
use crate::ces::{ces_applicable, step_ces, CesConfig, CesStackElem, CesStep, CesValue};
use crate::cesh::{
    cesh_applicable, step_cesh, CeshClosure, CeshConfig, CeshStackElem, CeshStep, CeshValue,
};
use crate::dcesh::{
    active_nodes, halted_network, initial_network, run_dcesh_async, run_dcesh_sync, DClosure,
    DMachine, DStack, DStackElem, DSyncEvent, DValue, Dcesh,
};
use crate::heap::Heap;
use crate::machine::{DistRule, Env, MachineRule, Outcome, StuckReason};
use crate::network::{
    async_trace_to_sync, replay_async, sync_step, sync_trace_to_async, NetError, Policy,
    SyncEvent,
};
use crate::syntax::{CoreTerm, NodeName};

/// Values of the reference evaluator. Closure bodies borrow the input term.
#[derive(Clone, Debug)]
pub enum RefValue<'t> {
    Nat(u64),
    Closure { body: &'t CoreTerm, env: Env<RefValue<'t>> },
}

#[derive(Debug)]
pub enum RefOutcome<'t> {
    Value(RefValue<'t>),
    Stuck(StuckReason),
    /// The fuel or nesting budget ran out; the evaluator abstains.
    Out,
}

enum Abort {
    Stuck(StuckReason),
    Out,
}

/// Beyond this many nested non-tail evaluations the evaluator abstains
/// rather than gamble on the host stack.
const MAX_EVAL_DEPTH: u32 = 20_000;

/// Big-step evaluation straight off the term, in the same order the
/// compiled code runs: operators evaluate their right operand first,
/// applications their function first, and a placement body starts from the
/// empty environment. Tail positions (application bodies, conditional
/// branches, placement bodies) are iterated, so the recursion depth tracks
/// only non-tail nesting. Every visited subterm costs one fuel tick.
pub fn eval_reference(t: &CoreTerm, fuel: u64) -> RefOutcome<'_> {
    let mut fuel = fuel;
    match eval(t, Env::empty(), &mut fuel, 0) {
        Ok(v) => RefOutcome::Value(v),
        Err(Abort::Stuck(r)) => RefOutcome::Stuck(r),
        Err(Abort::Out) => RefOutcome::Out,
    }
}

fn eval<'t>(
    t: &'t CoreTerm,
    env: Env<RefValue<'t>>,
    fuel: &mut u64,
    depth: u32,
) -> Result<RefValue<'t>, Abort> {
    if depth > MAX_EVAL_DEPTH {
        return Err(Abort::Out);
    }
    let mut t = t;
    let mut env = env;
    loop {
        if *fuel == 0 {
            return Err(Abort::Out);
        }
        *fuel -= 1;
        match t {
            CoreTerm::Var(n) => {
                return env.get(*n).cloned().ok_or(Abort::Stuck(StuckReason::UnboundVar(*n)))
            }
            CoreTerm::Lam(b) => return Ok(RefValue::Closure { body: b, env }),
            CoreTerm::Lit(n) => return Ok(RefValue::Nat(*n)),
            CoreTerm::App(f, a) => {
                let fv = eval(f, env.clone(), fuel, depth + 1)?;
                let av = eval(a, env.clone(), fuel, depth + 1)?;
                match fv {
                    RefValue::Closure { body, env: captured } => {
                        t = body;
                        env = captured.cons(av);
                    }
                    RefValue::Nat(_) => return Err(Abort::Stuck(StuckReason::ApplyNonClosure)),
                }
            }
            CoreTerm::Op(op, l, r) => {
                let rv = eval(r, env.clone(), fuel, depth + 1)?;
                let lv = eval(l, env.clone(), fuel, depth + 1)?;
                match (lv, rv) {
                    (RefValue::Nat(a), RefValue::Nat(b)) => {
                        let n = apply_prim(*op, a, b)
                            .ok_or(Abort::Stuck(StuckReason::Overflow(*op)))?;
                        return Ok(RefValue::Nat(n));
                    }
                    _ => return Err(Abort::Stuck(StuckReason::OpNonNat)),
                }
            }
            CoreTerm::If0(g, th, el) => match eval(g, env.clone(), fuel, depth + 1)? {
                RefValue::Nat(0) => t = th,
                RefValue::Nat(_) => t = el,
                RefValue::Closure { .. } => return Err(Abort::Stuck(StuckReason::CondNonNat)),
            },
            CoreTerm::At(b, _) => {
                t = b;
                env = Env::empty();
            }
        }
    }
}

/// The part of a final value every layer can agree on. Closures are opaque
/// here; their structure is what the relations compare.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ValueShape {
    Nat(u64),
    Clos,
}

impl core::fmt::Display for ValueShape {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ValueShape::Nat(n) => write!(f, "nat {}", n),
            ValueShape::Clos => f.write_str("clos"),
        }
    }
}

pub fn ces_shape(v: &CesValue) -> ValueShape {
    match v {
        CesValue::Nat(n) => ValueShape::Nat(*n),
        CesValue::Clos(_) => ValueShape::Clos,
    }
}

pub fn cesh_shape(v: &CeshValue) -> ValueShape {
    match v {
        CeshValue::Nat(n) => ValueShape::Nat(*n),
        CeshValue::ClosPtr(_) => ValueShape::Clos,
    }
}

pub fn d_shape(v: &DValue) -> ValueShape {
    match v {
        DValue::Nat(n) => ValueShape::Nat(*n),
        DValue::Clos(_) => ValueShape::Clos,
    }
}

fn ref_shape(v: &RefValue<'_>) -> ValueShape {
    match v {
        RefValue::Nat(n) => ValueShape::Nat(*n),
        RefValue::Closure { .. } => ValueShape::Clos,
    }
}

type Seen = BTreeSet<(u32, u32, usize, usize)>;

/// Relates a specification state to a heap state: same code, environments
/// that agree value for value, stacks of the same shape, and behind every
/// closure pointer the very closure the specification machine carries
/// inline. Shared environments are walked once; the heap is acyclic, so
/// the walk terminates.
pub fn r_cfg(ces: &CesConfig, cesh: &CeshConfig) -> Result<(), String> {
    if ces.code != cesh.code {
        return Err(format!("code positions differ: {} vs {}", ces.code, cesh.code));
    }
    let mut seen = Seen::new();
    cfg_envs(&ces.env, &cesh.env, &cesh.heap, &mut seen, "env")?;
    if ces.stack.len() != cesh.stack.len() {
        return Err(format!(
            "stack heights differ: {} vs {}",
            ces.stack.len(),
            cesh.stack.len()
        ));
    }
    for (i, (a, b)) in ces.stack.iter().zip(&cesh.stack).enumerate() {
        let at = format!("stack[{}]", i);
        match (a, b) {
            (CesStackElem::Val(v), CeshStackElem::Val(w)) => {
                cfg_vals(v, w, &cesh.heap, &mut seen, &at)?
            }
            (CesStackElem::Cont(c), CeshStackElem::Cont(k)) => {
                if c.code != k.code {
                    return Err(format!("{}: frame codes differ: {} vs {}", at, c.code, k.code));
                }
                cfg_envs(&c.env, &k.env, &cesh.heap, &mut seen, &at)?
            }
            _ => return Err(format!("{}: a value faces a continuation", at)),
        }
    }
    Ok(())
}

fn cfg_vals(
    v: &CesValue,
    w: &CeshValue,
    heap: &Heap<CeshClosure>,
    seen: &mut Seen,
    at: &str,
) -> Result<(), String> {
    match (v, w) {
        (CesValue::Nat(a), CeshValue::Nat(b)) if a == b => Ok(()),
        (CesValue::Clos(c), CeshValue::ClosPtr(p)) => {
            if !seen.insert((c.code.code.0, c.code.pos, c.env.addr(), p.0)) {
                return Ok(());
            }
            let cell = heap
                .deref(*p)
                .ok_or_else(|| format!("{}: pointer {} dangles", at, p))?;
            if cell.code != c.code {
                return Err(format!(
                    "{}: closure code behind {} is {}, not {}",
                    at, p, cell.code, c.code
                ));
            }
            cfg_envs(&c.env, &cell.env, heap, seen, at)
        }
        _ => Err(format!("{}: {} faces {}", at, v, w)),
    }
}

fn cfg_envs(
    e: &Env<CesValue>,
    f: &Env<CeshValue>,
    heap: &Heap<CeshClosure>,
    seen: &mut Seen,
    at: &str,
) -> Result<(), String> {
    let mut a = e.iter();
    let mut b = f.iter();
    let mut i = 0u32;
    loop {
        match (a.next(), b.next()) {
            (None, None) => return Ok(()),
            (Some(v), Some(w)) => {
                cfg_vals(v, w, heap, seen, &format!("{}.{}", at, i))?;
                i += 1;
            }
            _ => return Err(format!("{}: environment lengths differ", at)),
        }
    }
}

/// Rank-indexed agreement between a heap state and the network: exactly
/// one node is active, its thread sits at the same code over a related
/// environment, and flattening its stack through the parked continuation
/// cells reproduces the heap machine's stack. Closure pointers are
/// unfolded `rank` levels deep and accepted blindly at rank zero, so
/// success at rank k implies success at every lower rank.
pub fn r_sync(
    cesh: &CeshConfig,
    nodes: &BTreeMap<NodeName, DMachine>,
    rank: u32,
) -> Result<(), String> {
    let active = active_nodes(nodes);
    let node = match active[..] {
        [n] => n,
        _ => return Err(format!("{} nodes are active at once", active.len())),
    };
    let th = nodes[node].thread.as_ref().expect("listed as active");
    if th.code != cesh.code {
        return Err(format!(
            "code positions differ: {} vs {} on {}",
            cesh.code, th.code, node
        ));
    }
    sync_envs(rank, &cesh.env, &th.env, &cesh.heap, nodes, "env")?;
    sync_stack(rank, cesh, &th.stack, nodes)
}

fn sync_vals(
    rank: u32,
    v: &CeshValue,
    w: &DValue,
    heap: &Heap<CeshClosure>,
    nodes: &BTreeMap<NodeName, DMachine>,
    at: &str,
) -> Result<(), String> {
    match (v, w) {
        (CeshValue::Nat(a), DValue::Nat(b)) if a == b => Ok(()),
        (CeshValue::ClosPtr(p), DValue::Clos(rp)) => {
            if rank == 0 {
                return Ok(());
            }
            let cell = heap
                .deref(*p)
                .ok_or_else(|| format!("{}: pointer {} dangles", at, p))?;
            let m = nodes
                .get(&rp.node)
                .ok_or_else(|| format!("{}: {} names an unknown node", at, rp))?;
            let dcell = m
                .clos_heap
                .deref(rp.ptr)
                .ok_or_else(|| format!("{}: pointer {} dangles", at, rp))?;
            if cell.code != dcell.code {
                return Err(format!(
                    "{}: closure codes differ behind {} and {}: {} vs {}",
                    at, p, rp, cell.code, dcell.code
                ));
            }
            sync_envs(rank - 1, &cell.env, &dcell.env, heap, nodes, at)
        }
        _ => Err(format!("{}: {} faces {}", at, v, w)),
    }
}

fn sync_envs(
    rank: u32,
    e: &Env<CeshValue>,
    f: &Env<DValue>,
    heap: &Heap<CeshClosure>,
    nodes: &BTreeMap<NodeName, DMachine>,
    at: &str,
) -> Result<(), String> {
    let mut a = e.iter();
    let mut b = f.iter();
    let mut i = 0u32;
    loop {
        match (a.next(), b.next()) {
            (None, None) => return Ok(()),
            (Some(v), Some(w)) => {
                sync_vals(rank, v, w, heap, nodes, &format!("{}.{}", at, i))?;
                i += 1;
            }
            _ => return Err(format!("{}: environment lengths differ", at)),
        }
    }
}

fn sync_frames(
    rank: u32,
    k: &CeshClosure,
    frame: &DClosure,
    heap: &Heap<CeshClosure>,
    nodes: &BTreeMap<NodeName, DMachine>,
    at: &str,
) -> Result<(), String> {
    if k.code != frame.code {
        return Err(format!("{}: frame codes differ: {} vs {}", at, k.code, frame.code));
    }
    sync_envs(rank, &k.env, &frame.env, heap, nodes, at)
}

/// Walks the heap machine's stack from the top against the distributed
/// stack, following each continuation register into the cell it names: the
/// parked frame must match a continuation entry, and its saved stack
/// supplies what comes below.
fn sync_stack(
    rank: u32,
    cesh: &CeshConfig,
    d: &DStack,
    nodes: &BTreeMap<NodeName, DMachine>,
) -> Result<(), String> {
    let stack = &cesh.stack;
    let mut idx = stack.len();
    let mut elems: &[DStackElem] = &d.elems;
    let mut pos = elems.len();
    let mut cont = &d.cont;
    loop {
        if pos > 0 {
            pos -= 1;
            if idx == 0 {
                return Err("the network stack is taller".to_string());
            }
            idx -= 1;
            let at = format!("stack[{}]", idx);
            match (&stack[idx], &elems[pos]) {
                (CeshStackElem::Val(v), DStackElem::Val(w)) => {
                    sync_vals(rank, v, w, &cesh.heap, nodes, &at)?
                }
                (CeshStackElem::Cont(k), DStackElem::Cont(frame)) => {
                    sync_frames(rank, k, frame, &cesh.heap, nodes, &at)?
                }
                _ => return Err(format!("{}: shapes differ", at)),
            }
            continue;
        }
        match cont {
            None => {
                return if idx == 0 {
                    Ok(())
                } else {
                    Err(format!("the heap stack has {} entries too many", idx))
                };
            }
            Some(rp) => {
                let m = nodes
                    .get(&rp.node)
                    .ok_or_else(|| format!("continuation {} names an unknown node", rp))?;
                let (frame, saved) = m
                    .cont_heap
                    .deref(rp.ptr)
                    .ok_or_else(|| format!("continuation {} dangles", rp))?;
                if idx == 0 {
                    return Err(format!("the network stack continues past the top at {}", rp));
                }
                idx -= 1;
                let at = format!("stack[{}]", idx);
                match &stack[idx] {
                    CeshStackElem::Cont(k) => {
                        sync_frames(rank, k, frame, &cesh.heap, nodes, &at)?
                    }
                    CeshStackElem::Val(_) => {
                        return Err(format!("{}: a value faces the parked frame {}", at, rp))
                    }
                }
                elems = &saved.elems;
                pos = elems.len();
                cont = &saved.cont;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LockstepConfig {
    pub fuel: u64,
    pub rank: u32,
    pub nodes: Vec<NodeName>,
    pub root: NodeName,
}

impl LockstepConfig {
    /// A single node called A; enough for placement-free programs.
    pub fn single() -> LockstepConfig {
        let a = NodeName::new("A").expect("a valid node name");
        LockstepConfig { fuel: 100_000, rank: 3, nodes: alloc::vec![a.clone()], root: a }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// Every layer agreed at every step, and with the reference evaluator.
    AllAgree { steps: u64, outcome: String },
    /// A simulation relation failed at `step`.
    RelationBroken { step: u64, relation: &'static str, witness: String },
    /// The layers finished differently, or disagree with the evaluator.
    OutcomeMismatch { step: u64, witness: String },
    /// Determinism, one-active or point-to-point failed, or the layers
    /// moved by rules that do not correspond.
    InvariantViolated { step: u64, witness: String },
}

impl core::fmt::Display for Verdict {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Verdict::AllAgree { steps, outcome } => {
                write!(f, "all-agree steps={} outcome={}", steps, outcome)
            }
            Verdict::RelationBroken { step, relation, witness } => {
                write!(f, "relation-broken step={} relation={} {}", step, relation, witness)
            }
            Verdict::OutcomeMismatch { step, witness } => {
                write!(f, "outcome-mismatch step={} {}", step, witness)
            }
            Verdict::InvariantViolated { step, witness } => {
                write!(f, "invariant-violated step={} {}", step, witness)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LockstepReport {
    pub verdict: Verdict,
    pub steps: u64,
    /// Network steps that were communications.
    pub comms: u64,
    /// The agreed final value, when all layers halted.
    pub value: Option<ValueShape>,
}

enum MachineEnd {
    Halted(ValueShape),
    Stuck(StuckReason),
}

fn oracle_check(term: &CoreTerm, fuel: u64, end: &MachineEnd) -> Result<(), String> {
    // The evaluator spends fuel per subterm, the machines per instruction;
    // a generous factor keeps an honest disagreement from hiding behind
    // exhaustion. The depth cap bounds the host stack regardless.
    let outcome = eval_reference(term, fuel.saturating_mul(4));
    let found = match (&outcome, end) {
        (RefOutcome::Out, _) => return Ok(()),
        (RefOutcome::Value(v), MachineEnd::Halted(sh)) if ref_shape(v) == *sh => return Ok(()),
        (RefOutcome::Stuck(r), MachineEnd::Stuck(s)) if r == s => return Ok(()),
        (RefOutcome::Value(v), _) => format!("the value {}", ref_shape(v)),
        (RefOutcome::Stuck(r), _) => format!("a stuck state: {}", r),
    };
    let ended = match end {
        MachineEnd::Halted(sh) => format!("halted with {}", sh),
        MachineEnd::Stuck(r) => format!("got stuck: {}", r),
    };
    Err(format!("the reference evaluator found {} but the machines {}", found, ended))
}

fn rule_matches(rule: MachineRule, ev: &DSyncEvent) -> bool {
    use DistRule as D;
    use MachineRule as M;
    match ev {
        SyncEvent::Silent { rule: d, .. } => matches!(
            (rule, *d),
            (M::Var, D::Var)
                | (M::Clos, D::Clos)
                | (M::Appl, D::Appl)
                | (M::Ret, D::Ret)
                | (M::Lit, D::Lit)
                | (M::Op, D::Op)
                | (M::CondZero, D::CondZero)
                | (M::CondSucc, D::CondSucc)
        ),
        SyncEvent::Comm { send_rule, recv_rule, .. } => matches!(
            (rule, *send_rule, *recv_rule),
            (M::Remote, D::RemoteSend, D::RemoteReceive)
                | (M::Appl, D::ApplSend, D::ApplReceive)
                | (M::Ret, D::RetSend, D::RetReceive)
        ),
    }
}

/// Runs the specification machine, the heap machine and the synchronous
/// network side by side, one transition each per step. At every reached
/// state both relations are checked, the sequential machines must offer at
/// most one rule, and the network must mirror the machines' rule choice.
/// At the end all layers must agree, and when the source term is at hand,
/// the reference evaluator must agree too.
pub fn lockstep(
    table: &CodeTable,
    term: Option<&CoreTerm>,
    cfg: &LockstepConfig,
) -> LockstepReport {
    let proto = Dcesh { table };
    let mut ces = CesConfig::initial(table);
    let mut cesh = CeshConfig::initial(table);
    let mut net = match initial_network(table, &cfg.root, &cfg.nodes) {
        Ok(n) => n,
        Err(e) => {
            return LockstepReport {
                verdict: Verdict::InvariantViolated { step: 0, witness: e },
                steps: 0,
                comms: 0,
                value: None,
            }
        }
    };
    let mut steps = 0u64;
    let mut comms = 0u64;
    macro_rules! finish {
        ($verdict:expr, $value:expr) => {
            return LockstepReport { verdict: $verdict, steps, comms, value: $value }
        };
    }
    loop {
        if let Err(w) = r_cfg(&ces, &cesh) {
            finish!(
                Verdict::RelationBroken { step: steps, relation: "ces-cesh", witness: w },
                None
            );
        }
        if let Err(w) = r_sync(&cesh, &net.nodes, cfg.rank) {
            finish!(
                Verdict::RelationBroken { step: steps, relation: "cesh-dcesh", witness: w },
                None
            );
        }
        let n1 = ces_applicable(&ces, table).len();
        let n2 = cesh_applicable(&cesh, table).len();
        if n1 > 1 || n2 > 1 {
            finish!(
                Verdict::InvariantViolated {
                    step: steps,
                    witness: format!("{} and {} rules apply at once", n1, n2),
                },
                None
            );
        }
        let s1 = step_ces(&mut ces, table);
        let s2 = step_cesh(&mut cesh, table);
        match (s1, s2) {
            (CesStep::Halted(v1), CeshStep::Halted(v2)) => {
                let (_, v3) = match halted_network(table, &net.nodes) {
                    Some(h) => h,
                    None => finish!(
                        Verdict::OutcomeMismatch {
                            step: steps,
                            witness: "the network has not halted with the machines".to_string(),
                        },
                        None
                    ),
                };
                let shape = ces_shape(&v1);
                if shape != cesh_shape(&v2) || shape != d_shape(&v3) {
                    finish!(
                        Verdict::OutcomeMismatch {
                            step: steps,
                            witness: format!(
                                "final values differ: {} vs {} vs {}",
                                v1, v2, v3
                            ),
                        },
                        None
                    );
                }
                if let Some(t) = term {
                    if let Err(w) =
                        oracle_check(t, cfg.fuel, &MachineEnd::Halted(shape.clone()))
                    {
                        finish!(Verdict::OutcomeMismatch { step: steps, witness: w }, None);
                    }
                }
                finish!(
                    Verdict::AllAgree { steps, outcome: format!("halted {}", shape) },
                    Some(shape)
                );
            }
            (CesStep::Stuck(r1), CeshStep::Stuck(r2)) => {
                if r1 != r2 {
                    finish!(
                        Verdict::OutcomeMismatch {
                            step: steps,
                            witness: format!("stuck for different reasons: {} vs {}", r1, r2),
                        },
                        None
                    );
                }
                match sync_step(&proto, &mut net) {
                    Err(NetError::Machine { reason, .. }) if reason == r1 => {}
                    other => finish!(
                        Verdict::OutcomeMismatch {
                            step: steps,
                            witness: format!(
                                "the machines are stuck on {} but the network said {:?}",
                                r1, other
                            ),
                        },
                        None
                    ),
                }
                if let Some(t) = term {
                    if let Err(w) = oracle_check(t, cfg.fuel, &MachineEnd::Stuck(r1.clone())) {
                        finish!(Verdict::OutcomeMismatch { step: steps, witness: w }, None);
                    }
                }
                finish!(
                    Verdict::AllAgree { steps, outcome: format!("stuck: {}", r1) },
                    None
                );
            }
            (CesStep::Stepped(r1), CeshStep::Stepped(r2)) => {
                if r1 != r2 {
                    finish!(
                        Verdict::InvariantViolated {
                            step: steps,
                            witness: format!("the machines moved by {} and {}", r1, r2),
                        },
                        None
                    );
                }
                match sync_step(&proto, &mut net) {
                    Ok(Some(ev)) => {
                        if !rule_matches(r1, &ev) {
                            finish!(
                                Verdict::InvariantViolated {
                                    step: steps,
                                    witness: format!(
                                        "machine rule {} against network event {:?}",
                                        r1, ev
                                    ),
                                },
                                None
                            );
                        }
                        if matches!(ev, SyncEvent::Comm { .. }) {
                            comms += 1;
                        }
                    }
                    Ok(None) => finish!(
                        Verdict::OutcomeMismatch {
                            step: steps,
                            witness: "the network idles while the machines can move".to_string(),
                        },
                        None
                    ),
                    Err(e) => finish!(
                        Verdict::OutcomeMismatch {
                            step: steps,
                            witness: format!("the network failed: {}", e),
                        },
                        None
                    ),
                }
                steps += 1;
                if steps >= cfg.fuel {
                    finish!(
                        Verdict::AllAgree { steps, outcome: "fuel exhausted".to_string() },
                        None
                    );
                }
            }
            (a, b) => finish!(
                Verdict::OutcomeMismatch {
                    step: steps,
                    witness: format!("the machines diverge: {:?} against {:?}", a, b),
                },
                None
            ),
        }
    }
}

/// What the synchronous/asynchronous comparison measured.
#[derive(Clone, Debug)]
pub struct AsyncReport {
    pub sync_steps: u64,
    pub async_steps: u64,
    pub silents: u64,
    pub comms: u64,
    pub outcome: String,
}

/// Runs the network synchronously, then asynchronously under first-in
/// first-out delivery, and checks the exact correspondence: the
/// asynchronous trace is the embedding of the synchronous one (a send and
/// a receive for every communication), fusing it back yields the
/// synchronous trace, replaying it is accepted and ends in the same
/// network, a randomly scheduled run cannot find any other trace, and the
/// final node families coincide with nothing left in flight.
pub fn check_async_equiv(
    table: &CodeTable,
    root: &NodeName,
    nodes: &[NodeName],
    fuel: u64,
    seed: u64,
) -> Result<AsyncReport, String> {
    let (so, st, snet) = run_dcesh_sync(table, root, nodes, fuel)?;
    let silents = st.iter().filter(|e| matches!(e, SyncEvent::Silent { .. })).count() as u64;
    let comms = st.len() as u64 - silents;
    let embedded = sync_trace_to_async(&st);
    // Enough fuel to play the embedded trace, plus one step to observe a
    // halt or a stuck thread; on fuel exhaustion the horizons must match.
    let af = match so {
        Outcome::FuelExhausted { .. } => embedded.len() as u64,
        _ => embedded.len() as u64 + 1,
    };
    let (ao, at, anet) = run_dcesh_async(table, root, nodes, af, Policy::Fifo)?;
    match (&so, &ao) {
        (Outcome::Halted { value: v1, .. }, Outcome::Halted { value: v2, steps }) => {
            if v1 != v2 {
                return Err(format!("the runs halted with {} and {}", v1, v2));
            }
            if *steps != silents + 2 * comms {
                return Err(format!(
                    "the asynchronous run took {} steps, not {} silent + 2 * {} communications",
                    steps, silents, comms
                ));
            }
        }
        (Outcome::Stuck { reason: r1, .. }, Outcome::Stuck { reason: r2, .. }) => {
            if r1 != r2 {
                return Err(format!("the runs got stuck on {} and {}", r1, r2));
            }
        }
        (Outcome::FuelExhausted { .. }, Outcome::FuelExhausted { .. }) => {}
        (a, b) => return Err(format!("the runs diverge: {} against {}", a, b)),
    }
    if at != embedded {
        let split = at
            .iter()
            .zip(&embedded)
            .position(|(x, y)| x != y)
            .unwrap_or(at.len().min(embedded.len()));
        return Err(format!(
            "the asynchronous trace leaves the embedded one at step {}",
            split
        ));
    }
    let fused = async_trace_to_sync(&at)
        .map_err(|e| format!("the asynchronous trace does not fuse: {:?}", e))?;
    if fused != st {
        return Err("fusing the asynchronous trace does not recover the synchronous one"
            .to_string());
    }
    let proto = Dcesh { table };
    let mut replayed = initial_network(table, root, nodes)?.into_async();
    replay_async(&proto, &mut replayed, &at)
        .map_err(|e| format!("replaying the trace was refused: {:?}", e))?;
    if replayed.nodes != anet.nodes || replayed.msgs != anet.msgs {
        return Err("replaying the trace ends in a different network".to_string());
    }
    let (ro, rt, _) = run_dcesh_async(table, root, nodes, af, Policy::random(seed))?;
    if rt != at || ro != ao {
        return Err("a random delivery order changed the run".to_string());
    }
    if !anet.msgs.is_empty() {
        return Err(format!("{} messages remain in flight", anet.msgs.len()));
    }
    if anet.nodes != snet.nodes {
        return Err("the runs end in different node families".to_string());
    }
    Ok(AsyncReport {
        sync_steps: st.len() as u64,
        async_steps: at.len() as u64,
        silents,
        comms,
        outcome: ao.to_string(),
    })
}
