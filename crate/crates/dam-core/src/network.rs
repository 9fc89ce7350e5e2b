// Copyright 2026 the dam authors
// SPDX-License-Identifier: Apache-2.0 OR MIT

//! Network semantics, in two layers.
//!
//! A node protocol says how one node steps: given its state and some offered
//! messages, which transitions can it take, each tagged silent, send or
//! receive. On top of any such protocol sit two network semantics:
//!
//! * the synchronous one has no channels: a send and its matching receive
//!   happen as one atomic step, with the sender's update applied first, so
//!   a node can even hand a message to itself;
//! * the asynchronous one keeps a multiset of messages in flight and moves
//!   one node at a time, a send enqueueing and a receive dequeueing.
//!
//! Every synchronous trace embeds into an asynchronous one (a communication
//! becomes send then receive), and an asynchronous trace whose sends are
//! immediately consumed fuses back. Both directions are implemented here
//! and checked against each other by the differential drivers.
//!
//! The engine also polices two invariants the distributed machine's proofs
//! lean on: at most one node may have a local move (otherwise stepping is
//! reported ambiguous rather than picking silently), and a message must
//! have exactly one willing receiver across the whole network.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::machine::StuckReason;

/// A transition's communication behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaggedMsg<M> {
    Silent,
    Send(M),
    Receive(M),
}

/// Splits a tagged step into (messages consumed, messages produced).
pub fn detag<M>(t: TaggedMsg<M>) -> (Vec<M>, Vec<M>) {
    match t {
        TaggedMsg::Silent => (Vec::new(), Vec::new()),
        TaggedMsg::Send(m) => (Vec::new(), alloc::vec![m]),
        TaggedMsg::Receive(m) => (alloc::vec![m], Vec::new()),
    }
}

/// One enabled transition of one node: its tag and the rule it fires.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Choice<M, R> {
    pub tag: TaggedMsg<M>,
    pub rule: R,
}

/// How a single node steps. Enumeration (`choices`) is separated from
/// execution (`apply`) so the engines can count what is enabled without
/// copying node states around.
pub trait Protocol {
    type State;
    type Msg: Clone + PartialEq + core::fmt::Debug;
    type Rule: Copy + Eq + core::fmt::Debug;
    type Node: Clone + Ord + core::fmt::Debug;

    /// Transitions enabled for `node` in `state`. Receives may only pick
    /// from `offered`; with no offers the result is the node's local moves.
    /// `Err` means the node is faulted, not merely unable to move.
    fn choices(
        &self,
        node: &Self::Node,
        state: &Self::State,
        offered: &[Self::Msg],
    ) -> Result<Vec<Choice<Self::Msg, Self::Rule>>, StuckReason>;

    /// Executes a choice previously returned by [`Protocol::choices`] for
    /// this node and state.
    fn apply(
        &self,
        node: &Self::Node,
        state: &mut Self::State,
        choice: &Choice<Self::Msg, Self::Rule>,
    ) -> Result<(), StuckReason>;

    /// The unique node a message is addressed to.
    fn route(&self, msg: &Self::Msg) -> Self::Node;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyncNet<N: Ord, S> {
    pub nodes: BTreeMap<N, S>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AsyncNet<N: Ord, S, M> {
    pub nodes: BTreeMap<N, S>,
    /// Multiset of messages in flight, kept in arrival order.
    pub msgs: Vec<M>,
}

impl<N: Ord, S> SyncNet<N, S> {
    pub fn new(nodes: BTreeMap<N, S>) -> Self {
        SyncNet { nodes }
    }

    pub fn into_async<M>(self) -> AsyncNet<N, S, M> {
        AsyncNet { nodes: self.nodes, msgs: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SyncEvent<N, R, M> {
    Silent { node: N, rule: R },
    Comm { sender: N, receiver: N, send_rule: R, recv_rule: R, msg: M },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AsyncEvent<N, R, M> {
    Silent { node: N, rule: R },
    Send { node: N, rule: R, msg: M },
    Receive { node: N, rule: R, msg: M },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NetError<N, M> {
    /// More than one node had a local move; the scheduler will not choose.
    AmbiguousLocal { count: usize },
    /// A sent message that nobody can receive.
    NoReceiver { msg: M },
    /// A message with more than one willing receiver.
    MultiReceiver { msg: M, count: usize },
    /// A node fault, such as a dangling pointer.
    Machine { node: N, reason: StuckReason },
}

impl<N: core::fmt::Debug, M: core::fmt::Debug> core::fmt::Display for NetError<N, M> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            NetError::AmbiguousLocal { count } => {
                write!(f, "{} nodes have local moves at once", count)
            }
            NetError::NoReceiver { msg } => write!(f, "no node can receive {:?}", msg),
            NetError::MultiReceiver { msg, count } => {
                write!(f, "{} nodes can receive {:?}", count, msg)
            }
            NetError::Machine { node, reason } => write!(f, "node {:?} faulted: {}", node, reason),
        }
    }
}

type Moves<P> = Vec<(
    <P as Protocol>::Node,
    Choice<<P as Protocol>::Msg, <P as Protocol>::Rule>,
)>;
type NetResult<P, T> = Result<T, NetError<<P as Protocol>::Node, <P as Protocol>::Msg>>;

/// Local (silent or send) moves of every node, in node order.
pub fn enabled_local<P: Protocol>(p: &P, nodes: &BTreeMap<P::Node, P::State>) -> NetResult<P, Moves<P>> {
    let mut out = Vec::new();
    for (n, s) in nodes {
        let cs = p
            .choices(n, s, &[])
            .map_err(|reason| NetError::Machine { node: n.clone(), reason })?;
        for c in cs {
            debug_assert!(
                !matches!(c.tag, TaggedMsg::Receive(_)),
                "receive offered without messages"
            );
            out.push((n.clone(), c));
        }
    }
    Ok(out)
}

/// Every node willing to receive `msg`, in node order. Point-to-point
/// operation means this has exactly one entry for a deliverable message.
pub fn receive_candidates<P: Protocol>(
    p: &P,
    nodes: &BTreeMap<P::Node, P::State>,
    msg: &P::Msg,
) -> NetResult<P, Moves<P>> {
    let mut out = Vec::new();
    let offered = [msg.clone()];
    for (n, s) in nodes {
        let cs = p
            .choices(n, s, &offered)
            .map_err(|reason| NetError::Machine { node: n.clone(), reason })?;
        for c in cs {
            if matches!(&c.tag, TaggedMsg::Receive(m) if m == msg) {
                out.push((n.clone(), c));
            }
        }
    }
    Ok(out)
}

/// One synchronous step: the unique local move, with a send fused against
/// its unique receiver on the already-updated node family. `Ok(None)` means
/// no node can move.
pub fn sync_step<P: Protocol>(
    p: &P,
    net: &mut SyncNet<P::Node, P::State>,
) -> NetResult<P, Option<SyncEvent<P::Node, P::Rule, P::Msg>>> {
    let mut locals = enabled_local(p, &net.nodes)?;
    let (node, choice) = match locals.len() {
        0 => return Ok(None),
        1 => locals.pop().expect("len checked"),
        count => return Err(NetError::AmbiguousLocal { count }),
    };
    let fault = |node: &P::Node, reason| NetError::Machine { node: node.clone(), reason };
    match &choice.tag {
        TaggedMsg::Silent => {
            let st = net.nodes.get_mut(&node).expect("enumerated node");
            p.apply(&node, st, &choice).map_err(|r| fault(&node, r))?;
            Ok(Some(SyncEvent::Silent { node, rule: choice.rule }))
        }
        TaggedMsg::Send(msg) => {
            let msg = msg.clone();
            {
                let st = net.nodes.get_mut(&node).expect("enumerated node");
                p.apply(&node, st, &choice).map_err(|r| fault(&node, r))?;
            }
            // The receiver is found in the family the send already acted
            // on; this is what lets a node message itself.
            let mut rcvs = receive_candidates(p, &net.nodes, &msg)?;
            let (receiver, rchoice) = match rcvs.len() {
                0 => return Err(NetError::NoReceiver { msg }),
                1 => rcvs.pop().expect("len checked"),
                count => return Err(NetError::MultiReceiver { msg, count }),
            };
            debug_assert_eq!(receiver, p.route(&msg), "receiver off the routed path");
            let st = net.nodes.get_mut(&receiver).expect("enumerated node");
            p.apply(&receiver, st, &rchoice).map_err(|r| fault(&receiver, r))?;
            Ok(Some(SyncEvent::Comm {
                sender: node,
                receiver,
                send_rule: choice.rule,
                recv_rule: rchoice.rule,
                msg,
            }))
        }
        TaggedMsg::Receive(_) => unreachable!("local move cannot be a receive"),
    }
}

/// An enabled asynchronous move: a local choice, or a receive consuming the
/// message at `msg_idx`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AsyncMove<N, M, R> {
    pub node: N,
    pub choice: Choice<M, R>,
    pub msg_idx: Option<usize>,
}

/// All asynchronous moves: local ones in node order, then deliveries in
/// message order. Rejects a message with several willing receivers.
pub fn async_moves<P: Protocol>(
    p: &P,
    net: &AsyncNet<P::Node, P::State, P::Msg>,
) -> NetResult<P, Vec<AsyncMove<P::Node, P::Msg, P::Rule>>> {
    let mut out = Vec::new();
    for (n, c) in enabled_local(p, &net.nodes)? {
        out.push(AsyncMove { node: n, choice: c, msg_idx: None });
    }
    for (i, m) in net.msgs.iter().enumerate() {
        let mut rcvs = receive_candidates(p, &net.nodes, m)?;
        if rcvs.len() > 1 {
            return Err(NetError::MultiReceiver { msg: m.clone(), count: rcvs.len() });
        }
        if let Some((n, c)) = rcvs.pop() {
            out.push(AsyncMove { node: n, choice: c, msg_idx: Some(i) });
        }
    }
    Ok(out)
}

/// How the asynchronous engine picks among enabled moves.
#[derive(Clone, Debug)]
pub enum Policy {
    /// First local move in node order, else the oldest deliverable message.
    Fifo,
    /// Uniformly random among all enabled moves.
    Random(ChaCha8Rng),
}

impl Policy {
    pub fn random(seed: u64) -> Policy {
        Policy::Random(ChaCha8Rng::seed_from_u64(seed))
    }
}

/// One asynchronous step under the given policy. `Ok(None)` means nothing
/// is enabled (which the caller tells apart into halt and deadlock).
pub fn async_step<P: Protocol>(
    p: &P,
    net: &mut AsyncNet<P::Node, P::State, P::Msg>,
    policy: &mut Policy,
) -> NetResult<P, Option<AsyncEvent<P::Node, P::Rule, P::Msg>>> {
    let mut moves = async_moves(p, net)?;
    if moves.is_empty() {
        return Ok(None);
    }
    let pick = match policy {
        Policy::Fifo => 0,
        Policy::Random(rng) => rng.gen_range(0..moves.len()),
    };
    let mv = moves.swap_remove(pick);
    apply_async_move(p, net, mv)
}

fn apply_async_move<P: Protocol>(
    p: &P,
    net: &mut AsyncNet<P::Node, P::State, P::Msg>,
    mv: AsyncMove<P::Node, P::Msg, P::Rule>,
) -> NetResult<P, Option<AsyncEvent<P::Node, P::Rule, P::Msg>>> {
    let AsyncMove { node, choice, msg_idx } = mv;
    let st = net.nodes.get_mut(&node).expect("enumerated node");
    p.apply(&node, st, &choice)
        .map_err(|reason| NetError::Machine { node: node.clone(), reason })?;
    let event = match choice.tag {
        TaggedMsg::Silent => AsyncEvent::Silent { node, rule: choice.rule },
        TaggedMsg::Send(msg) => {
            net.msgs.push(msg.clone());
            AsyncEvent::Send { node, rule: choice.rule, msg }
        }
        TaggedMsg::Receive(msg) => {
            let idx = msg_idx.expect("receive carries its message index");
            net.msgs.remove(idx);
            AsyncEvent::Receive { node, rule: choice.rule, msg }
        }
    };
    Ok(Some(event))
}

/// Expands a synchronous trace: a communication becomes its send followed
/// immediately by its receive.
pub fn sync_trace_to_async<N: Clone, R: Clone, M: Clone>(
    trace: &[SyncEvent<N, R, M>],
) -> Vec<AsyncEvent<N, R, M>> {
    let mut out = Vec::new();
    for ev in trace {
        match ev {
            SyncEvent::Silent { node, rule } => {
                out.push(AsyncEvent::Silent { node: node.clone(), rule: rule.clone() })
            }
            SyncEvent::Comm { sender, receiver, send_rule, recv_rule, msg } => {
                out.push(AsyncEvent::Send {
                    node: sender.clone(),
                    rule: send_rule.clone(),
                    msg: msg.clone(),
                });
                out.push(AsyncEvent::Receive {
                    node: receiver.clone(),
                    rule: recv_rule.clone(),
                    msg: msg.clone(),
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EmbedError {
    /// A send not immediately followed by the matching receive.
    UnmatchedSend { at: usize },
    /// A receive with no send directly before it.
    UnpairedReceive { at: usize },
}

impl core::fmt::Display for EmbedError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EmbedError::UnmatchedSend { at } => {
                write!(f, "send at step {} is not followed by its receive", at)
            }
            EmbedError::UnpairedReceive { at } => {
                write!(f, "receive at step {} has no preceding send", at)
            }
        }
    }
}

/// Fuses an asynchronous trace back into a synchronous one. This succeeds
/// exactly when every send is consumed by the very next event, which is the
/// shape the scheduler produces when at most one message is ever in flight.
pub fn async_trace_to_sync<N: Clone, R: Clone, M: Clone + PartialEq>(
    trace: &[AsyncEvent<N, R, M>],
) -> Result<Vec<SyncEvent<N, R, M>>, EmbedError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < trace.len() {
        match &trace[i] {
            AsyncEvent::Silent { node, rule } => {
                out.push(SyncEvent::Silent { node: node.clone(), rule: rule.clone() });
                i += 1;
            }
            AsyncEvent::Send { node, rule, msg } => match trace.get(i + 1) {
                Some(AsyncEvent::Receive { node: rnode, rule: rrule, msg: rmsg })
                    if rmsg == msg =>
                {
                    out.push(SyncEvent::Comm {
                        sender: node.clone(),
                        receiver: rnode.clone(),
                        send_rule: rule.clone(),
                        recv_rule: rrule.clone(),
                        msg: msg.clone(),
                    });
                    i += 2;
                }
                _ => return Err(EmbedError::UnmatchedSend { at: i }),
            },
            AsyncEvent::Receive { .. } => return Err(EmbedError::UnpairedReceive { at: i }),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReplayError<N, M> {
    /// The scripted event is not enabled at this point.
    NotEnabled { at: usize },
    Net(NetError<N, M>),
}

impl<N: core::fmt::Debug, M: core::fmt::Debug> core::fmt::Display for ReplayError<N, M> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ReplayError::NotEnabled { at } => write!(f, "scripted event {} is not enabled", at),
            ReplayError::Net(e) => write!(f, "{}", e),
        }
    }
}

/// Drives the asynchronous semantics along a scripted trace, checking each
/// event is actually enabled when its turn comes.
pub fn replay_async<P: Protocol>(
    p: &P,
    net: &mut AsyncNet<P::Node, P::State, P::Msg>,
    script: &[AsyncEvent<P::Node, P::Rule, P::Msg>],
) -> Result<(), ReplayError<P::Node, P::Msg>>
where
    P::Node: PartialEq,
{
    for (at, wanted) in script.iter().enumerate() {
        let moves = async_moves(p, net).map_err(ReplayError::Net)?;
        let mut found = None;
        for mv in moves {
            let matches = match (wanted, &mv.choice.tag) {
                (AsyncEvent::Silent { node, rule }, TaggedMsg::Silent) => {
                    *node == mv.node && *rule == mv.choice.rule
                }
                (AsyncEvent::Send { node, rule, msg }, TaggedMsg::Send(m)) => {
                    *node == mv.node && *rule == mv.choice.rule && msg == m
                }
                (AsyncEvent::Receive { node, rule, msg }, TaggedMsg::Receive(m)) => {
                    *node == mv.node && *rule == mv.choice.rule && msg == m
                }
                _ => false,
            };
            if matches {
                found = Some(mv);
                break;
            }
        }
        match found {
            Some(mv) => {
                apply_async_move(p, net, mv).map_err(ReplayError::Net)?;
            }
            None => return Err(ReplayError::NotEnabled { at }),
        }
    }
    Ok(())
}
