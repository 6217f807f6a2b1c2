//! GPIO-style signal lines.

use std::cell::RefCell;
use std::rc::Rc;

/// A shared level-signal line (interrupt wire, GPIO pin).
///
/// Observers run synchronously on every transition, in registration order,
/// so each one sees every edge exactly once and in virtual-time order.
#[derive(Clone)]
pub struct SignalLine {
    inner: Rc<RefCell<LineState>>,
}

type Observer = Box<dyn FnMut(&str, bool)>;

struct LineState {
    name: String,
    level: bool,
    rising_edges: u64,
    falling_edges: u64,
    observers: Vec<Observer>,
}

impl SignalLine {
    pub fn new(name: impl Into<String>) -> Self {
        SignalLine {
            inner: Rc::new(RefCell::new(LineState {
                name: name.into(),
                level: false,
                rising_edges: 0,
                falling_edges: 0,
                observers: Vec::new(),
            })),
        }
    }

    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    pub fn level(&self) -> bool {
        self.inner.borrow().level
    }

    pub fn rising_edges(&self) -> u64 {
        self.inner.borrow().rising_edges
    }

    pub fn falling_edges(&self) -> u64 {
        self.inner.borrow().falling_edges
    }

    /// Drives the line to `level`. No-op if the level is unchanged.
    pub fn set(&self, level: bool) {
        // Take the observers out while notifying so a callback may inspect
        // (but not re-enter) the line without tripping the RefCell.
        let mut observers = {
            let mut state = self.inner.borrow_mut();
            if state.level == level {
                return;
            }
            state.level = level;
            if level {
                state.rising_edges += 1;
            } else {
                state.falling_edges += 1;
            }
            std::mem::take(&mut state.observers)
        };
        let name = self.name();
        for obs in observers.iter_mut() {
            obs(&name, level);
        }
        let mut state = self.inner.borrow_mut();
        let added = std::mem::replace(&mut state.observers, observers);
        state.observers.extend(added);
    }

    /// One rising plus one falling edge; models an edge/message interrupt.
    pub fn pulse(&self) {
        self.set(true);
        self.set(false);
    }

    pub fn observe(&self, f: impl FnMut(&str, bool) + 'static) {
        self.inner.borrow_mut().observers.push(Box::new(f));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;
    use std::rc::Rc;

    #[test]
    fn observers_see_every_transition_once() {
        let line = SignalLine::new("irq0");
        let log: Rc<RefCell<Vec<bool>>> = Rc::default();
        let sink = Rc::clone(&log);
        line.observe(move |_, level| sink.borrow_mut().push(level));

        line.set(true);
        line.set(true); // no transition
        line.set(false);
        line.pulse();

        assert_eq!(*log.borrow(), vec![true, false, true, false]);
        assert_eq!(line.rising_edges(), 2);
        assert_eq!(line.falling_edges(), 2);
    }

    #[test]
    fn pulse_counts_one_rising_edge() {
        let line = SignalLine::new("spi4");
        for _ in 0..3 {
            line.pulse();
        }
        assert_eq!(line.rising_edges(), 3);
        assert!(!line.level());
    }
}
