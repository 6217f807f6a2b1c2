//! Deterministic discrete-event kernel.
//!
//! The kernel is single-threaded: every callback, transport and line toggle
//! runs on the thread that drives [`Kernel::run_until`]. Events fire in
//! (timestamp, insertion order) — ties always break FIFO, which is what makes
//! two runs of the same scenario produce identical event orders.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::rc::Rc;

use super::time::SimTime;

/// Identifies a scheduled event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventId(u64);

#[derive(Debug, Clone, thiserror::Error)]
pub enum SimError {
    #[error("cannot schedule: simulation already finished")]
    Finished,
}

struct PendingEvent {
    at: SimTime,
    seq: u64,
    action: Box<dyn FnOnce()>,
}

// BinaryHeap is a max-heap; invert the ordering to pop the earliest
// (time, seq) first.
impl Ord for PendingEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

impl PartialOrd for PendingEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for PendingEvent {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}

impl Eq for PendingEvent {}

struct KernelState {
    now: SimTime,
    next_seq: u64,
    finished: bool,
    queue: BinaryHeap<PendingEvent>,
}

/// Cheaply clonable handle to the simulation kernel.
#[derive(Clone)]
pub struct Kernel {
    state: Rc<RefCell<KernelState>>,
}

impl Default for Kernel {
    fn default() -> Self {
        Self::new()
    }
}

impl Kernel {
    pub fn new() -> Self {
        Kernel {
            state: Rc::new(RefCell::new(KernelState {
                now: SimTime::ZERO,
                next_seq: 0,
                finished: false,
                queue: BinaryHeap::new(),
            })),
        }
    }

    /// Current virtual time. Starts at zero and never decreases.
    pub fn now(&self) -> SimTime {
        self.state.borrow().now
    }

    /// Schedules `action` to run at `now() + delay`.
    ///
    /// Events scheduled for the same timestamp run in scheduling order.
    pub fn schedule(
        &self,
        delay: SimTime,
        action: impl FnOnce() + 'static,
    ) -> Result<EventId, SimError> {
        let mut state = self.state.borrow_mut();
        if state.finished {
            return Err(SimError::Finished);
        }
        let seq = state.next_seq;
        state.next_seq += 1;
        let at = state.now + delay;
        state.queue.push(PendingEvent {
            at,
            seq,
            action: Box::new(action),
        });
        Ok(EventId(seq))
    }

    /// Runs every event with timestamp <= `limit`, then advances the clock
    /// to `limit` and returns it. An empty queue just advances the clock.
    pub fn run_until(&self, limit: SimTime) -> SimTime {
        loop {
            // Pop outside of the action call so callbacks can schedule.
            let event = {
                let mut state = self.state.borrow_mut();
                if state.finished {
                    break;
                }
                match state.queue.peek() {
                    Some(next) if next.at <= limit => {
                        let event = state.queue.pop().unwrap();
                        debug_assert!(event.at >= state.now, "time went backwards");
                        state.now = event.at;
                        event
                    }
                    _ => break,
                }
            };
            (event.action)();
        }
        let mut state = self.state.borrow_mut();
        if state.now < limit {
            state.now = limit;
        }
        state.now
    }

    /// Ends the simulation: pending events are dropped and later calls to
    /// [`Kernel::schedule`] fail.
    pub fn finish(&self) {
        let mut state = self.state.borrow_mut();
        state.finished = true;
        state.queue.clear();
    }

    pub fn is_finished(&self) -> bool {
        self.state.borrow().finished
    }

    pub fn pending_events(&self) -> usize {
        self.state.borrow().queue.len()
    }
}
