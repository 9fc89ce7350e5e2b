// Copyright 2026 the dam authors
// SPDX-License-Identifier: Apache-2.0 OR MIT

//! Append-only heaps.
//!
//! A heap is a growable array of cells. Allocation appends and nothing ever
//! frees or overwrites, so any pointer obtained from a heap stays valid in
//! every heap that grew out of it. The machines rely on exactly two laws,
//! both tested below:
//!
//! * a fresh pointer dereferences to the value just allocated, and
//! * allocating preserves the heap as a prefix of its extension.

use alloc::vec::Vec;

/// Index of a heap cell. A pointer is only meaningful together with the heap
/// (and, in the distributed machines, the node) that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Ptr(pub usize);

impl core::fmt::Display for Ptr {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heap<A> {
    cells: Vec<A>,
}

impl<A> Default for Heap<A> {
    fn default() -> Self {
        Heap::empty()
    }
}

impl<A> Heap<A> {
    pub fn empty() -> Self {
        Heap { cells: Vec::new() }
    }

    /// Appends a cell and returns its address. Old cells are untouched, so
    /// this is the pure `alloc` of the interface acting on a unique handle.
    pub fn alloc(&mut self, x: A) -> Ptr {
        self.cells.push(x);
        Ptr(self.cells.len() - 1)
    }

    pub fn deref(&self, p: Ptr) -> Option<&A> {
        self.cells.get(p.0)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

impl<A: PartialEq> Heap<A> {
    /// Is `self` a prefix of `other`? This is the extension order on heaps;
    /// every step of every machine only ever grows heaps along it.
    pub fn is_prefix(&self, other: &Heap<A>) -> bool {
        self.cells.len() <= other.cells.len()
            && self.cells.iter().zip(other.cells.iter()).all(|(a, b)| a == b)
    }
}
