//! Bounded per-client message queue that drops the oldest entry when full.

use std::collections::VecDeque;
use std::sync::Mutex;

use tokio::sync::Notify;

use crate::protocol::ServerMsg;

pub const DEFAULT_CAPACITY: usize = 256;

#[derive(Default)]
struct State {
    queue: VecDeque<ServerMsg>,
    dropped: u64,
    closed: bool,
}

pub struct Outbox {
    state: Mutex<State>,
    notify: Notify,
    capacity: usize,
}

impl Outbox {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "outbox capacity must be positive");
        Self {
            state: Mutex::new(State::default()),
            notify: Notify::new(),
            capacity,
        }
    }

    pub fn push(&self, msg: ServerMsg) {
        let mut s = self.state.lock().expect("outbox lock");
        if s.closed {
            return;
        }
        if s.queue.len() == self.capacity {
            s.queue.pop_front();
            s.dropped += 1;
        }
        s.queue.push_back(msg);
        drop(s);
        self.notify.notify_one();
    }

    /// No further messages are accepted; `recv` drains what is queued, then yields `None`.
    pub fn close(&self) {
        self.state.lock().expect("outbox lock").closed = true;
        self.notify.notify_one();
    }

    pub fn try_recv(&self) -> Option<ServerMsg> {
        let mut s = self.state.lock().expect("outbox lock");
        if s.dropped > 0 {
            let dropped = std::mem::take(&mut s.dropped);
            return Some(ServerMsg::Gap { dropped });
        }
        s.queue.pop_front()
    }

    /// Next message; a gap notice precedes the first message after any drops.
    pub async fn recv(&self) -> Option<ServerMsg> {
        loop {
            let notified = self.notify.notified();
            if let Some(m) = self.try_recv() {
                return Some(m);
            }
            if self.state.lock().expect("outbox lock").closed {
                return None;
            }
            notified.await;
        }
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("outbox lock").queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gap(n: u64) -> ServerMsg {
        ServerMsg::Gap { dropped: n }
    }

    #[test]
    fn drop_oldest_with_gap_notice() {
        let o = Outbox::new(2);
        for i in 10..13 {
            o.push(gap(i));
        }
        assert_eq!(o.try_recv(), Some(gap(1)));
        assert_eq!(o.try_recv(), Some(gap(11)));
        assert_eq!(o.try_recv(), Some(gap(12)));
        assert_eq!(o.try_recv(), None);
    }

    #[tokio::test]
    async fn recv_drains_then_ends_after_close() {
        let o = Outbox::new(4);
        o.push(gap(5));
        o.close();
        o.push(gap(6));
        assert_eq!(o.recv().await, Some(gap(5)));
        assert_eq!(o.recv().await, None);
    }
}
