//! Blocking multi-producer FIFO used for coordinator/worker control messages.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("message queue is closed")]
pub struct QueueClosed;

#[derive(Debug, PartialEq, Eq)]
pub enum Received<T> {
    Message(T),
    Timeout,
    Closed,
}

#[derive(Debug)]
struct State<T> {
    items: VecDeque<T>,
    closed: bool,
}

/// FIFO per sender, no loss, blocking receive. After [`close`](Self::close)
/// sends fail and receivers drain what is left, then observe shutdown.
#[derive(Debug)]
pub struct MessageQueue<T> {
    state: Mutex<State<T>>,
    ready: Condvar,
}

impl<T> Default for MessageQueue<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> MessageQueue<T> {
    pub fn new() -> Self {
        MessageQueue {
            state: Mutex::new(State {
                items: VecDeque::new(),
                closed: false,
            }),
            ready: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State<T>> {
        // a panicking holder cannot leave the deque half-modified
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn send(&self, msg: T) -> Result<(), QueueClosed> {
        let mut state = self.lock();
        if state.closed {
            return Err(QueueClosed);
        }
        state.items.push_back(msg);
        drop(state);
        self.ready.notify_one();
        Ok(())
    }

    /// Blocks until a message arrives. `None` once the queue is closed and
    /// empty.
    pub fn recv(&self) -> Option<T> {
        let mut state = self.lock();
        loop {
            if let Some(msg) = state.items.pop_front() {
                return Some(msg);
            }
            if state.closed {
                return None;
            }
            state = self.ready.wait(state).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Received<T> {
        let deadline = Instant::now() + timeout;
        let mut state = self.lock();
        loop {
            if let Some(msg) = state.items.pop_front() {
                return Received::Message(msg);
            }
            if state.closed {
                return Received::Closed;
            }
            let now = Instant::now();
            if now >= deadline {
                return Received::Timeout;
            }
            state = self
                .ready
                .wait_timeout(state, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    pub fn try_recv(&self) -> Option<T> {
        self.lock().items.pop_front()
    }

    pub fn close(&self) {
        self.lock().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    pub fn len(&self) -> usize {
        self.lock().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn fifo_from_one_sender() {
        let q = MessageQueue::new();
        q.send(1).unwrap();
        q.send(2).unwrap();
        assert_eq!(q.recv(), Some(1));
        assert_eq!(q.recv(), Some(2));
    }

    #[test]
    fn many_senders_lose_nothing_and_keep_per_sender_order() {
        let q = Arc::new(MessageQueue::new());
        let senders = 8;
        let per_sender = 5_000;
        std::thread::scope(|s| {
            for id in 0..senders {
                let q = q.clone();
                s.spawn(move || {
                    for i in 0..per_sender {
                        q.send((id, i)).unwrap();
                    }
                });
            }
        });
        let mut next = vec![0; senders];
        let mut total = 0;
        while let Some((id, i)) = q.try_recv() {
            assert_eq!(i, next[id]);
            next[id] += 1;
            total += 1;
        }
        assert_eq!(total, senders * per_sender);
    }

    #[test]
    fn closed_queue_rejects_sends_and_wakes_receivers() {
        let q = Arc::new(MessageQueue::<u32>::new());
        let waiter = {
            let q = q.clone();
            std::thread::spawn(move || q.recv())
        };
        std::thread::sleep(Duration::from_millis(20));
        q.close();
        assert_eq!(waiter.join().unwrap(), None);
        assert_eq!(q.send(3), Err(QueueClosed));
        assert_eq!(q.recv_timeout(Duration::from_millis(1)), Received::Closed);
    }

    #[test]
    fn close_still_delivers_pending_messages() {
        let q = MessageQueue::new();
        q.send("a").unwrap();
        q.close();
        assert_eq!(q.recv(), Some("a"));
        assert_eq!(q.recv(), None);
    }

    #[test]
    fn recv_timeout_expires() {
        let q = MessageQueue::<u8>::new();
        let start = Instant::now();
        assert_eq!(q.recv_timeout(Duration::from_millis(15)), Received::Timeout);
        assert!(start.elapsed() >= Duration::from_millis(15));
    }
}
