//! Lock-free multi-producer/multi-consumer FIFO.
//!
//! This is the Michael-Scott linked-list queue. Every shared link (`head`,
//! `tail` and each node's `next`) is a [`VersionedRef`]: a node handle paired
//! with a 64-bit modification counter, swapped together by a double-width
//! compare-and-swap. A swap presented with a stale counter fails even when the
//! node handle matches, which is what defeats ABA once nodes are recycled.
//!
//! Dequeued nodes are returned to a Treiber free list owned by the queue and
//! reused by later enqueues; they are only released to the allocator when the
//! queue is dropped. Payloads live behind their own allocation so that every
//! field a racing reader can touch is atomic.

use std::marker::PhantomData;
use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicUsize, Ordering};

use portable_atomic::AtomicU128;

/// A node handle together with the number of times its location was swapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VersionedRef {
    addr: usize,
    counter: u64,
}

impl VersionedRef {
    pub fn new(addr: usize, counter: u64) -> Self {
        Self { addr, counter }
    }

    /// Opaque node handle. Zero is the null reference.
    pub fn node_addr(&self) -> usize {
        self.addr
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn is_null(&self) -> bool {
        self.addr == 0
    }

    fn pack(self) -> u128 {
        ((self.counter as u128) << 64) | self.addr as u128
    }

    fn unpack(raw: u128) -> Self {
        Self {
            addr: raw as u64 as usize,
            counter: (raw >> 64) as u64,
        }
    }
}

/// A shared location holding a [`VersionedRef`].
///
/// Every successful swap stores the new handle with `counter + 1`.
#[derive(Debug)]
pub struct AtomicVersionedRef(AtomicU128);

impl AtomicVersionedRef {
    pub fn new(addr: usize) -> Self {
        Self(AtomicU128::new(VersionedRef::new(addr, 0).pack()))
    }

    pub fn load(&self) -> VersionedRef {
        VersionedRef::unpack(self.0.load(Ordering::Acquire))
    }

    /// Swaps in `new_addr` iff both the handle and the counter still equal
    /// `expected`. Returns the stored value on success and the observed value
    /// on failure.
    pub fn compare_and_swap(
        &self,
        expected: VersionedRef,
        new_addr: usize,
    ) -> Result<VersionedRef, VersionedRef> {
        let next = VersionedRef::new(new_addr, expected.counter.wrapping_add(1));
        self.0
            .compare_exchange(
                expected.pack(),
                next.pack(),
                Ordering::AcqRel,
                Ordering::Acquire,
            )
            .map(|_| next)
            .map_err(VersionedRef::unpack)
    }

    /// Unconditionally points the location at `new_addr`, still bumping the
    /// counter so in-flight swaps against the old value fail.
    pub fn set(&self, new_addr: usize) -> VersionedRef {
        let prev = self
            .0
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |raw| {
                let cur = VersionedRef::unpack(raw);
                Some(VersionedRef::new(new_addr, cur.counter.wrapping_add(1)).pack())
            })
            .expect("closure always returns Some");
        VersionedRef::new(new_addr, VersionedRef::unpack(prev).counter.wrapping_add(1))
    }

    /// Whether the double-width CAS is native on this target.
    pub fn is_lock_free() -> bool {
        AtomicU128::is_lock_free()
    }
}

struct Node<T> {
    payload: AtomicPtr<T>,
    // Queue successor while linked, free-list successor while recycled.
    next: AtomicVersionedRef,
}

impl<T> Node<T> {
    fn alloc() -> *mut Node<T> {
        Box::into_raw(Box::new(Node {
            payload: AtomicPtr::new(ptr::null_mut()),
            next: AtomicVersionedRef::new(0),
        }))
    }
}

/// Result of [`LockFreeQueue::enqueue`].
#[derive(Debug, PartialEq, Eq)]
#[must_use]
pub enum EnqueueResult<T> {
    Accepted,
    /// The queue was at capacity; the item is handed back untouched.
    Backpressure(T),
}

impl<T> EnqueueResult<T> {
    pub fn is_accepted(&self) -> bool {
        matches!(self, EnqueueResult::Accepted)
    }
}

#[repr(align(128))]
struct Padded<T>(T);

/// Michael-Scott queue with an optional element cap.
pub struct LockFreeQueue<T> {
    head: Padded<AtomicVersionedRef>,
    tail: Padded<AtomicVersionedRef>,
    free: Padded<AtomicVersionedRef>,
    len: Padded<AtomicUsize>,
    capacity: Option<usize>,
    _owns: PhantomData<Box<T>>,
}

unsafe impl<T: Send> Send for LockFreeQueue<T> {}
unsafe impl<T: Send> Sync for LockFreeQueue<T> {}

impl<T> Default for LockFreeQueue<T> {
    fn default() -> Self {
        Self::unbounded()
    }
}

impl<T> LockFreeQueue<T> {
    pub fn unbounded() -> Self {
        Self::build(None)
    }

    pub fn bounded(capacity: usize) -> Self {
        Self::build(Some(capacity))
    }

    pub fn with_capacity(capacity: Option<usize>) -> Self {
        Self::build(capacity)
    }

    fn build(capacity: Option<usize>) -> Self {
        let dummy = Node::<T>::alloc() as usize;
        Self {
            head: Padded(AtomicVersionedRef::new(dummy)),
            tail: Padded(AtomicVersionedRef::new(dummy)),
            free: Padded(AtomicVersionedRef::new(0)),
            len: Padded(AtomicUsize::new(0)),
            capacity,
            _owns: PhantomData,
        }
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn enqueue(&self, item: T) -> EnqueueResult<T> {
        if !self.reserve() {
            return EnqueueResult::Backpressure(item);
        }
        self.link(item);
        EnqueueResult::Accepted
    }

    /// Like [`enqueue`](Self::enqueue) but only builds the item once a place
    /// in the queue has been reserved. Returns `false` on backpressure.
    pub fn enqueue_with(&self, make: impl FnOnce() -> T) -> bool {
        if !self.reserve() {
            return false;
        }
        self.link(make());
        true
    }

    pub fn dequeue(&self) -> Option<T> {
        loop {
            let head = self.head.0.load();
            let tail = self.tail.0.load();
            // SAFETY: nodes are never deallocated while the queue is alive,
            // and every field read here is atomic.
            let next = unsafe { (*(head.addr as *const Node<T>)).next.load() };
            if head != self.head.0.load() {
                continue;
            }
            if head.addr == tail.addr {
                if next.is_null() {
                    return None;
                }
                // Tail is lagging; help it along.
                let _ = self.tail.0.compare_and_swap(tail, next.addr);
                continue;
            }
            if next.is_null() {
                continue;
            }
            let next_node = next.addr as *const Node<T>;
            // Read before the swap: once head moves another consumer may
            // recycle `next`.
            let payload = unsafe { (*next_node).payload.load(Ordering::Acquire) };
            if self.head.0.compare_and_swap(head, next.addr).is_ok() {
                // `next` is the new dummy; its payload now belongs to us. A
                // failed exchange means the node was already recycled.
                let _ = unsafe {
                    (*next_node).payload.compare_exchange(
                        payload,
                        ptr::null_mut(),
                        Ordering::AcqRel,
                        Ordering::Relaxed,
                    )
                };
                self.release(head.addr as *mut Node<T>);
                self.len.0.fetch_sub(1, Ordering::AcqRel);
                debug_assert!(!payload.is_null());
                // SAFETY: the successful head swap hands us exclusive
                // ownership of the boxed payload written by the enqueuer.
                return Some(*unsafe { Box::from_raw(payload) });
            }
        }
    }

    /// Dequeues up to `max` items in FIFO order.
    pub fn drain_up_to(&self, max: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(max.min(1024));
        while out.len() < max {
            match self.dequeue() {
                Some(item) => out.push(item),
                None => break,
            }
        }
        out
    }

    /// Element count; exact when quiescent, otherwise off by at most the
    /// number of operations in flight.
    pub fn approx_len(&self) -> usize {
        self.len.0.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.approx_len() == 0
    }

    /// Snapshot of the head link. Useful for observing the counter.
    pub fn head_ref(&self) -> VersionedRef {
        self.head.0.load()
    }

    /// Attempts to re-store the head handle `expected.node_addr()` with a
    /// fresh counter. Structurally a no-op when it succeeds; it exists so
    /// callers can check that a stale snapshot is refused.
    pub fn try_touch_head(&self, expected: VersionedRef) -> bool {
        self.head.0.compare_and_swap(expected, expected.addr).is_ok()
    }

    fn reserve(&self) -> bool {
        match self.capacity {
            None => {
                self.len.0.fetch_add(1, Ordering::AcqRel);
                true
            }
            Some(cap) => self
                .len
                .0
                .fetch_update(Ordering::AcqRel, Ordering::Acquire, |n| {
                    (n < cap).then_some(n + 1)
                })
                .is_ok(),
        }
    }

    fn link(&self, item: T) {
        let node = self.acquire();
        unsafe {
            (*node)
                .payload
                .store(Box::into_raw(Box::new(item)), Ordering::Release);
            (*node).next.set(0);
        }
        loop {
            let tail = self.tail.0.load();
            let tail_node = tail.addr as *const Node<T>;
            let next = unsafe { (*tail_node).next.load() };
            if tail != self.tail.0.load() {
                continue;
            }
            if next.is_null() {
                if unsafe { (*tail_node).next.compare_and_swap(next, node as usize) }.is_ok() {
                    let _ = self.tail.0.compare_and_swap(tail, node as usize);
                    return;
                }
            } else {
                let _ = self.tail.0.compare_and_swap(tail, next.addr);
            }
        }
    }

    fn acquire(&self) -> *mut Node<T> {
        loop {
            let top = self.free.0.load();
            if top.is_null() {
                return Node::<T>::alloc();
            }
            let node = top.addr as *mut Node<T>;
            let below = unsafe { (*node).next.load() };
            if self.free.0.compare_and_swap(top, below.addr).is_ok() {
                return node;
            }
        }
    }

    fn release(&self, node: *mut Node<T>) {
        loop {
            let top = self.free.0.load();
            unsafe { (*node).next.set(top.addr) };
            if self.free.0.compare_and_swap(top, node as usize).is_ok() {
                return;
            }
        }
    }
}

impl<T> Drop for LockFreeQueue<T> {
    fn drop(&mut self) {
        unsafe {
            let mut cur = self.head.0.load().addr as *mut Node<T>;
            let mut first = true;
            while !cur.is_null() {
                let node = Box::from_raw(cur);
                if !first {
                    let payload = node.payload.load(Ordering::Relaxed);
                    if !payload.is_null() {
                        drop(Box::from_raw(payload));
                    }
                }
                first = false;
                cur = node.next.load().addr as *mut Node<T>;
            }
            let mut cur = self.free.0.load().addr as *mut Node<T>;
            while !cur.is_null() {
                let node = Box::from_raw(cur);
                cur = node.next.load().addr as *mut Node<T>;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;
    use std::sync::Arc;
    use std::thread;

    #[test]
    fn double_width_cas_is_native() {
        assert!(AtomicVersionedRef::is_lock_free());
    }

    #[test]
    fn fifo_order_of_four_characters() {
        let q = LockFreeQueue::unbounded();
        for c in ['M', 'A', 'T', 'R'] {
            assert!(q.enqueue(c).is_accepted());
        }
        assert_eq!(q.approx_len(), 4);
        let out: Vec<char> = std::iter::from_fn(|| q.dequeue()).collect();
        assert_eq!(out, vec!['M', 'A', 'T', 'R']);
    }

    #[test]
    fn zero_capacity_always_backpressures() {
        let q = LockFreeQueue::bounded(0);
        assert_eq!(q.enqueue(1), EnqueueResult::Backpressure(1));
        assert_eq!(q.approx_len(), 0);
        assert_eq!(q.dequeue(), None);
    }

    #[test]
    fn capacity_is_enforced_and_freed_by_dequeue() {
        let q = LockFreeQueue::bounded(2);
        assert!(q.enqueue(1).is_accepted());
        assert!(q.enqueue(2).is_accepted());
        assert_eq!(q.enqueue(3), EnqueueResult::Backpressure(3));
        assert_eq!(q.dequeue(), Some(1));
        assert!(q.enqueue(3).is_accepted());
        assert_eq!(q.drain_up_to(10), vec![2, 3]);
    }

    #[test]
    fn empty_dequeue_and_round_trip() {
        let q: LockFreeQueue<String> = LockFreeQueue::unbounded();
        assert_eq!(q.dequeue(), None);
        assert!(q.enqueue("x".to_string()).is_accepted());
        assert_eq!(q.dequeue().as_deref(), Some("x"));
        assert_eq!(q.dequeue(), None);
        assert!(q.is_empty());
    }

    #[test]
    fn sequential_order_is_preserved() {
        let q = LockFreeQueue::unbounded();
        for i in 1..=1000u32 {
            assert!(q.enqueue(i).is_accepted());
        }
        let got: Vec<u32> = std::iter::from_fn(|| q.dequeue()).collect();
        let expected: Vec<u32> = (1..=1000).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn drain_matches_repeated_dequeue() {
        let a = LockFreeQueue::unbounded();
        let b = LockFreeQueue::unbounded();
        for i in 0..10 {
            let _ = a.enqueue(i);
            let _ = b.enqueue(i);
        }
        let drained = a.drain_up_to(4);
        let oracle: Vec<i32> = (0..4).filter_map(|_| b.dequeue()).collect();
        assert_eq!(drained, oracle);
        assert_eq!(a.approx_len(), 6);
        assert_eq!(a.drain_up_to(100), (4..10).collect::<Vec<_>>());
        assert!(a.drain_up_to(3).is_empty());
    }

    #[test]
    fn approx_len_when_quiescent() {
        let q = LockFreeQueue::unbounded();
        assert_eq!(q.approx_len(), 0);
        for i in 0..5 {
            let _ = q.enqueue(i);
        }
        assert_eq!(q.approx_len(), 5);
        q.dequeue();
        q.dequeue();
        assert_eq!(q.approx_len(), 3);
    }

    #[test]
    fn stale_counter_refuses_swap_with_matching_handle() {
        let cell = AtomicVersionedRef::new(0x1000);
        let snapshot = cell.load();
        cell.compare_and_swap(snapshot, 0x2000).unwrap();
        let back = cell.load();
        cell.compare_and_swap(back, 0x1000).unwrap();
        assert_eq!(cell.load().node_addr(), snapshot.node_addr());
        assert_eq!(cell.load().counter(), snapshot.counter() + 2);
        assert!(cell.compare_and_swap(snapshot, 0x3000).is_err());
        assert_eq!(cell.load().node_addr(), 0x1000);
    }

    #[test]
    fn recycled_head_node_refuses_stale_swap() {
        let q = LockFreeQueue::unbounded();
        let _ = q.enqueue(1);
        let stale = q.head_ref();
        // The dummy is recycled by the dequeue, reused by the enqueue and
        // becomes the head again after the second dequeue.
        assert_eq!(q.dequeue(), Some(1));
        let _ = q.enqueue(2);
        assert_eq!(q.dequeue(), Some(2));
        let now = q.head_ref();
        assert_eq!(now.node_addr(), stale.node_addr());
        assert!(now.counter() > stale.counter());
        assert!(!q.try_touch_head(stale));
        assert!(q.try_touch_head(now));
    }

    #[test]
    fn drop_releases_queued_payloads() {
        let tracker = Arc::new(());
        {
            let q = LockFreeQueue::unbounded();
            for _ in 0..10 {
                let _ = q.enqueue(Arc::clone(&tracker));
            }
            q.dequeue();
        }
        assert_eq!(Arc::strong_count(&tracker), 1);
    }

    #[test]
    fn concurrent_producers_and_consumers_lose_nothing() {
        const PRODUCERS: u64 = 4;
        const PER: u64 = 20_000;
        let q = Arc::new(LockFreeQueue::unbounded());
        let producers: Vec<_> = (0..PRODUCERS)
            .map(|p| {
                let q = Arc::clone(&q);
                thread::spawn(move || {
                    for i in 0..PER {
                        let _ = q.enqueue((p, i));
                    }
                })
            })
            .collect();
        let consumers: Vec<_> = (0..4)
            .map(|_| {
                let q = Arc::clone(&q);
                thread::spawn(move || {
                    let mut got = Vec::new();
                    let mut idle = 0;
                    while idle < 10_000 {
                        match q.dequeue() {
                            Some(v) => {
                                got.push(v);
                                idle = 0;
                            }
                            None => {
                                idle += 1;
                                thread::yield_now();
                            }
                        }
                    }
                    got
                })
            })
            .collect();
        for p in producers {
            p.join().unwrap();
        }
        let mut all: Vec<(u64, u64)> = Vec::new();
        for c in consumers {
            let got = c.join().unwrap();
            let mut last: HashMap<u64, u64> = HashMap::new();
            for &(p, i) in &got {
                if let Some(prev) = last.insert(p, i) {
                    assert!(i > prev, "producer {p} reordered");
                }
            }
            all.extend(got);
        }
        all.extend(std::iter::from_fn(|| q.dequeue()));
        all.sort_unstable();
        let expected: Vec<(u64, u64)> = (0..PRODUCERS)
            .flat_map(|p| (0..PER).map(move |i| (p, i)))
            .collect();
        assert_eq!(all, expected);
    }
}
