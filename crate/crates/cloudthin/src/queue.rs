//! Bounded selection of the target-count lowest-cost points.
//!
//! The decimator feeds every (cost, id) pair of a cost pass through this
//! queue; afterwards the queue holds exactly the m lowest pairs and its
//! maximum cost is the removal threshold w_up: any point costing strictly
//! more than w_up is provably not among the m points that must survive, and
//! because removals only ever lower costs, that stays true for the whole
//! removal pass.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::cloud::PointId;

/// A (cost, id) pair under a deterministic total order: cost first
/// (IEEE total order), id breaking exact cost ties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostKey {
    pub cost: f64,
    pub id: PointId,
}

impl CostKey {
    pub fn new(cost: f64, id: PointId) -> CostKey {
        CostKey { cost, id }
    }
}

impl Eq for CostKey {}

impl PartialOrd for CostKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CostKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cost.total_cmp(&other.cost).then(self.id.cmp(&other.id))
    }
}

/// Keeps the `capacity` smallest (cost, id) pairs ever inserted.
///
/// The result is a function of the inserted multiset alone — insertion order
/// cannot matter because (cost, id) pairs are unique and totally ordered.
#[derive(Debug, Clone)]
pub struct CostQueue {
    capacity: usize,
    // Max-heap: the worst kept pair sits on top, ready to be displaced.
    heap: BinaryHeap<CostKey>,
}

impl CostQueue {
    pub fn new(capacity: usize) -> CostQueue {
        CostQueue { capacity, heap: BinaryHeap::with_capacity(capacity + 1) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.heap.len() == self.capacity
    }

    pub fn insert(&mut self, cost: f64, id: PointId) {
        debug_assert!(cost.is_finite() && cost >= 0.0, "costs are finite and nonnegative");
        let key = CostKey::new(cost, id);
        if self.heap.len() < self.capacity {
            self.heap.push(key);
        } else if let Some(top) = self.heap.peek() {
            if key < *top {
                self.heap.pop();
                self.heap.push(key);
            }
        }
    }

    /// The removal threshold: the maximum cost among the kept pairs.
    /// `None` only while the queue is empty.
    pub fn w_up(&self) -> Option<f64> {
        self.heap.peek().map(|key| key.cost)
    }

    /// Kept pairs in ascending (cost, id) order.
    pub fn sorted_entries(&self) -> Vec<CostKey> {
        let mut entries: Vec<CostKey> = self.heap.iter().copied().collect();
        entries.sort_unstable();
        entries
    }

    /// Rebuilds a queue from previously saved entries (checkpoint restore).
    pub fn from_entries(capacity: usize, entries: impl IntoIterator<Item = CostKey>) -> CostQueue {
        let mut queue = CostQueue::new(capacity);
        for key in entries {
            queue.insert(key.cost, key.id);
        }
        queue
    }
}
