// Copyright 2026 the dam authors
// SPDX-License-Identifier: Apache-2.0 OR MIT

//! Pieces shared by all four machines: environments, closures, rule names,
//! stuck reasons and run outcomes.

use alloc::rc::Rc;
use alloc::string::String;

use crate::bytecode::{CodePos, PrimOp};

/// Runtime environment: a persistent list, innermost binder first. `cons`
/// and `clone` are constant time and share the tail, which keeps cloning a
/// configuration cheap even when closures capture deep environments.
pub struct Env<V>(Option<Rc<EnvNode<V>>>);

struct EnvNode<V> {
    head: V,
    tail: Env<V>,
}

impl<V> Clone for Env<V> {
    fn clone(&self) -> Self {
        Env(self.0.clone())
    }
}

impl<V> Default for Env<V> {
    fn default() -> Self {
        Env::empty()
    }
}

impl<V> Env<V> {
    pub fn empty() -> Self {
        Env(None)
    }

    pub fn cons(&self, v: V) -> Env<V> {
        Env(Some(Rc::new(EnvNode { head: v, tail: self.clone() })))
    }

    pub fn get(&self, n: u32) -> Option<&V> {
        let mut cur = self;
        for _ in 0..n {
            cur = &cur.0.as_ref()?.tail;
        }
        cur.0.as_ref().map(|node| &node.head)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_none()
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    /// A stable identity for sharing-aware traversals: environments are
    /// `Rc`-shared, so equal addresses mean the same environment object.
    /// The empty environment is address zero.
    pub fn addr(&self) -> usize {
        self.0.as_ref().map_or(0, |rc| Rc::as_ptr(rc) as usize)
    }

    /// Entries from the innermost binder outwards.
    pub fn iter(&self) -> EnvIter<'_, V> {
        EnvIter { cur: self }
    }
}

pub struct EnvIter<'a, V> {
    cur: &'a Env<V>,
}

impl<'a, V> Iterator for EnvIter<'a, V> {
    type Item = &'a V;

    fn next(&mut self) -> Option<&'a V> {
        let node = self.cur.0.as_ref()?;
        self.cur = &node.tail;
        Some(&node.head)
    }
}

impl<V: PartialEq> PartialEq for Env<V> {
    fn eq(&self, other: &Self) -> bool {
        let (mut a, mut b) = (self, other);
        loop {
            match (&a.0, &b.0) {
                (None, None) => return true,
                (Some(x), Some(y)) => {
                    // Shared tails compare equal without a walk.
                    if Rc::ptr_eq(x, y) {
                        return true;
                    }
                    if x.head != y.head {
                        return false;
                    }
                    a = &x.tail;
                    b = &y.tail;
                }
                _ => return false,
            }
        }
    }
}

impl<V: Eq> Eq for Env<V> {}

impl<V: core::fmt::Debug> core::fmt::Debug for Env<V> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_list().entries(self.iter()).finish()
    }
}

/// A code pointer paired with the environment it closes over. All machines
/// use this shape; they differ only in what a value is.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Closure<V> {
    pub code: CodePos,
    pub env: Env<V>,
}

impl<V> Closure<V> {
    pub fn new(code: CodePos, env: Env<V>) -> Self {
        Closure { code, env }
    }
}

/// Transition names of the sequential machines, used for traces and for
/// checking that runs agree rule for rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MachineRule {
    Var,
    Clos,
    Appl,
    Ret,
    Lit,
    Op,
    CondZero,
    CondSucc,
    Remote,
}

impl core::fmt::Display for MachineRule {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s = match self {
            MachineRule::Var => "VAR",
            MachineRule::Clos => "CLOS",
            MachineRule::Appl => "APPL",
            MachineRule::Ret => "RET",
            MachineRule::Lit => "LIT",
            MachineRule::Op => "OP",
            MachineRule::CondZero => "COND-0",
            MachineRule::CondSucc => "COND-1+n",
            MachineRule::Remote => "REMOTE",
        };
        f.write_str(s)
    }
}

/// Transition names of the distributed machines. The sequential rules keep
/// their names; application, return and remote evaluation split into a send
/// half and a receive half. The single-node machine uses the decomposed
/// application and return rules only; the full machine uses all of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistRule {
    Var,
    Clos,
    Lit,
    Op,
    CondZero,
    CondSucc,
    Appl,
    Ret,
    RemoteSend,
    RemoteReceive,
    ApplSend,
    ApplReceive,
    RetSend,
    RetReceive,
}

impl core::fmt::Display for DistRule {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s = match self {
            DistRule::Var => "VAR",
            DistRule::Clos => "CLOS",
            DistRule::Lit => "LIT",
            DistRule::Op => "OP",
            DistRule::CondZero => "COND-0",
            DistRule::CondSucc => "COND-1+n",
            DistRule::Appl => "APPL",
            DistRule::Ret => "RET",
            DistRule::RemoteSend => "REMOTE-send",
            DistRule::RemoteReceive => "REMOTE-receive",
            DistRule::ApplSend => "APPL-send",
            DistRule::ApplReceive => "APPL-receive",
            DistRule::RetSend => "RET-send",
            DistRule::RetReceive => "RET-receive",
        };
        f.write_str(s)
    }
}

/// Why a machine cannot take a step. Configurations in these shapes are
/// final but are not halts; the source programs that reach them are exactly
/// the ones the reference evaluator also gets stuck on (plus pointer and
/// scheduling faults that the correspondence checks would flag as bugs).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StuckReason {
    /// VAR index not covered by the environment.
    UnboundVar(u32),
    /// APPL whose stack does not end in an argument over a closure value.
    ApplyNonClosure,
    /// RET whose stack does not end in a value over a continuation.
    RetStackShape,
    /// OP applied to something other than two naturals.
    OpNonNat,
    /// Arithmetic overflow in an OP step.
    Overflow(PrimOp),
    /// COND scrutinising something other than a natural.
    CondNonNat,
    /// END reached with a non-final environment or stack.
    EndShape,
    /// A code position outside the table.
    InvalidCode,
    /// A closure pointer with no cell behind it.
    DanglingClosure(usize),
    /// A continuation pointer with no cell behind it.
    DanglingContinuation(usize),
    /// REMOTE instruction on a machine that has no network for it.
    RemoteUnsupported,
    /// No thread anywhere and nothing in flight.
    NoRunnableThread,
}

impl core::fmt::Display for StuckReason {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            StuckReason::UnboundVar(n) => write!(f, "unbound variable {}", n),
            StuckReason::ApplyNonClosure => f.write_str("application of a non-closure"),
            StuckReason::RetStackShape => f.write_str("return with no continuation below the result"),
            StuckReason::OpNonNat => f.write_str("arithmetic on a non-natural"),
            StuckReason::Overflow(op) => write!(f, "overflow in {}", op),
            StuckReason::CondNonNat => f.write_str("conditional on a non-natural"),
            StuckReason::EndShape => f.write_str("end of code with a non-final configuration"),
            StuckReason::InvalidCode => f.write_str("code position outside the table"),
            StuckReason::DanglingClosure(p) => write!(f, "dangling closure pointer {}", p),
            StuckReason::DanglingContinuation(p) => write!(f, "dangling continuation pointer {}", p),
            StuckReason::RemoteUnsupported => f.write_str("remote instruction on a machine without a network"),
            StuckReason::NoRunnableThread => f.write_str("no runnable thread and no message in flight"),
        }
    }
}

/// Result of running a machine to completion under a fuel bound.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome<V> {
    Halted { value: V, steps: u64 },
    FuelExhausted { steps: u64 },
    Stuck { reason: StuckReason, steps: u64 },
}

impl<V> Outcome<V> {
    pub fn steps(&self) -> u64 {
        match self {
            Outcome::Halted { steps, .. }
            | Outcome::FuelExhausted { steps }
            | Outcome::Stuck { steps, .. } => *steps,
        }
    }
}

impl<V: core::fmt::Display> core::fmt::Display for Outcome<V> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Outcome::Halted { value, steps } => write!(f, "halted with {} after {} steps", value, steps),
            Outcome::FuelExhausted { steps } => write!(f, "out of fuel after {} steps", steps),
            Outcome::Stuck { reason, steps } => write!(f, "stuck after {} steps: {}", steps, reason),
        }
    }
}

/// One machine-trace line: `t=<n> machine=<name> rule=<RULE>`.
pub fn trace_line(t: u64, machine: &str, rule: MachineRule) -> String {
    use core::fmt::Write;
    let mut s = String::new();
    let _ = write!(s, "t={} machine={} rule={}", t, machine, rule);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::CodeRef;
    use alloc::vec::Vec;

    #[test]
    fn env_indexing_is_de_bruijn() {
        let e = Env::empty().cons(10u64).cons(20).cons(30);
        assert_eq!(e.get(0), Some(&30));
        assert_eq!(e.get(1), Some(&20));
        assert_eq!(e.get(2), Some(&10));
        assert_eq!(e.get(3), None);
        assert_eq!(e.iter().copied().collect::<Vec<_>>(), [30, 20, 10]);
        assert_eq!(e.len(), 3);
    }

    #[test]
    fn cons_shares_instead_of_copying() {
        let e = Env::empty().cons(1u8);
        let f = e.cons(2);
        let g = e.cons(3);
        assert_eq!(e.len(), 1);
        assert_eq!(f.get(1), Some(&1));
        assert_eq!(g.get(1), Some(&1));
        assert_ne!(f, g);
    }

    #[test]
    fn env_equality_is_structural() {
        let a = Env::empty().cons(1u8).cons(2);
        let b = Env::empty().cons(1u8).cons(2);
        assert_eq!(a, b);
        assert_ne!(a, Env::empty().cons(1u8));
        assert_ne!(a, Env::empty().cons(2u8).cons(2));
    }

    #[test]
    fn rule_names_render_as_in_traces() {
        assert_eq!(
            trace_line(3, "ces", MachineRule::CondSucc),
            "t=3 machine=ces rule=COND-1+n"
        );
        assert_eq!(alloc::format!("{}", MachineRule::Remote), "REMOTE");
    }

    #[test]
    fn closure_equality_is_structural() {
        let c1: Closure<u8> = Closure::new(CodePos::start(CodeRef(2)), Env::empty().cons(5));
        let c2 = Closure::new(CodePos::start(CodeRef(2)), Env::empty().cons(5));
        assert_eq!(c1, c2);
    }
}
