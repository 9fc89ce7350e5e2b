// Copyright 2026 the dam authors
// SPDX-License-Identifier: Apache-2.0 OR MIT

//! Compiler and abstract machines for an untyped call-by-value functional
//! language in which any subterm can be pinned to a node of a distributed
//! system by writing `t @ A`.
//!
//! The crate is organised around one compilation scheme and four machines
//! that all run its output:
//!
//! * [`syntax`]: surface terms, nameless core terms, a random term generator.
//! * [`bytecode`]: the compiler, a hash-consed code table, a textual format.
//! * [`ces`]: the sequential code/environment/stack machine. Its transitions
//!   are the specification the other machines are measured against.
//! * [`cesh`]: the same machine with closures moved into a heap, the first
//!   step towards something a network can ship pointers around in.
//! * [`dcesh1`]: a single-node machine whose application and return rules are
//!   split into send and receive halves carried by messages to itself.
//! * [`dcesh`]: the full distributed machine, one per node, with remote
//!   pointers and messages for remote evaluation, application and return.
//! * [`network`]: synchronous and asynchronous network semantics, generic in
//!   the node protocol, with embeddings between the two kinds of trace.
//! * [`heap`]: the append-only heap all of the above allocate from.
//! * [`bisim`]: the correspondence results, made executable: a reference
//!   evaluator, the configuration relations, and a lockstep driver that
//!   checks them along whole runs.
//!
//! Everything here is `no_std` (with `alloc`); file formats and the command
//! line live in the companion `dam-cli` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod bisim;
pub mod bytecode;
pub mod ces;
pub mod cesh;
pub mod dcesh;
pub mod dcesh1;
pub mod heap;
pub mod machine;
pub mod network;
pub mod syntax;
