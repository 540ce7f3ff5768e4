use std::collections::VecDeque;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

/// Bounded queue that evicts its oldest item when full.
pub struct DropOldestQueue<T> {
    items: Mutex<VecDeque<T>>,
    ready: Condvar,
    capacity: usize,
}

impl<T> DropOldestQueue<T> {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        DropOldestQueue { items: Mutex::new(VecDeque::with_capacity(capacity)), ready: Condvar::new(), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Enqueues `item`, returning the evicted oldest item if the queue was full.
    pub fn push(&self, item: T) -> Option<T> {
        let mut q = self.items.lock();
        let evicted = if q.len() == self.capacity { q.pop_front() } else { None };
        q.push_back(item);
        drop(q);
        self.ready.notify_one();
        evicted
    }

    pub fn try_pop(&self) -> Option<T> {
        self.items.lock().pop_front()
    }

    pub fn pop_timeout(&self, timeout: Duration) -> Option<T> {
        let mut q = self.items.lock();
        if q.is_empty() {
            self.ready.wait_for(&mut q, timeout);
        }
        q.pop_front()
    }

    pub fn len(&self) -> usize {
        self.items.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Empties the queue, returning how many items were discarded.
    pub fn clear(&self) -> usize {
        let mut q = self.items.lock();
        let n = q.len();
        q.clear();
        n
    }
}
