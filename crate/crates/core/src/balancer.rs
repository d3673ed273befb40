//! Strict round-robin distribution of orders over predict workers.

use std::collections::VecDeque;
use std::time::Instant;

use crossbeam_channel::{bounded, select, Receiver, Sender};
use thiserror::Error;
use tracing::{debug, warn};

use crate::domain::stage;
use crate::ingest::InferenceOrder;
use crate::predict::BufferSender;

/// Capacity of the balancer's inbound queue.
pub const DEFAULT_INBOUND: usize = 1024;

pub fn inbound_queue() -> (Sender<InferenceOrder>, Receiver<InferenceOrder>) {
    bounded(DEFAULT_INBOUND)
}

/// Something an order can be handed to.
pub trait WorkerLink: Send {
    /// Hands the order over, blocking on backpressure. Returns it if the
    /// worker is gone.
    fn deliver(&self, order: InferenceOrder) -> Result<(), InferenceOrder>;
}

impl WorkerLink for BufferSender {
    fn deliver(&self, order: InferenceOrder) -> Result<(), InferenceOrder> {
        self.enqueue(order)
    }
}

impl WorkerLink for Sender<InferenceOrder> {
    fn deliver(&self, order: InferenceOrder) -> Result<(), InferenceOrder> {
        self.send(order).map_err(|e| e.into_inner())
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("worker {0} is already registered")]
    DuplicateEndpoint(String),
    #[error("worker {0} is not registered")]
    UnknownEndpoint(String),
}

#[derive(Debug, Error)]
pub enum DispatchError {
    /// The order comes back to the caller for re-queueing.
    #[error("no workers registered")]
    NoWorkers(Box<InferenceOrder>),
}

pub struct WorkerRegistry<L> {
    workers: Vec<(String, L)>,
    cursor: usize,
}

impl<L> Default for WorkerRegistry<L> {
    fn default() -> Self {
        WorkerRegistry { workers: Vec::new(), cursor: 0 }
    }
}

impl<L: WorkerLink> WorkerRegistry<L> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn endpoints(&self) -> impl Iterator<Item = &str> {
        self.workers.iter().map(|(e, _)| e.as_str())
    }

    /// Appends a worker; returns the new worker count.
    pub fn register(&mut self, endpoint: impl Into<String>, link: L) -> Result<usize, RegistryError> {
        let endpoint = endpoint.into();
        if self.workers.iter().any(|(e, _)| *e == endpoint) {
            return Err(RegistryError::DuplicateEndpoint(endpoint));
        }
        self.workers.push((endpoint, link));
        Ok(self.workers.len())
    }

    /// Removes a worker; the rotation continues with whichever worker
    /// followed it.
    pub fn deregister(&mut self, endpoint: &str) -> Result<usize, RegistryError> {
        let at = self
            .workers
            .iter()
            .position(|(e, _)| e == endpoint)
            .ok_or_else(|| RegistryError::UnknownEndpoint(endpoint.to_string()))?;
        self.remove(at);
        Ok(self.workers.len())
    }

    fn remove(&mut self, at: usize) {
        self.workers.remove(at);
        if at < self.cursor {
            self.cursor -= 1;
        }
        if self.cursor >= self.workers.len() {
            self.cursor = 0;
        }
    }

    /// Forwards the order to the worker under the cursor and advances it.
    /// Only a balancer timing entry is added to the order. A worker whose
    /// link has closed is dropped from the rotation and the order goes to
    /// the next one.
    pub fn dispatch(&mut self, mut order: InferenceOrder) -> Result<usize, DispatchError> {
        let started = Instant::now();
        let mut timed = false;
        loop {
            if self.workers.is_empty() {
                if timed {
                    order.stage_timings.0.pop();
                }
                return Err(DispatchError::NoWorkers(Box::new(order)));
            }
            let index = self.cursor;
            if !timed {
                order.stage_timings.push(stage::BALANCER, started.elapsed());
                timed = true;
            }
            match self.workers[index].1.deliver(order) {
                Ok(()) => {
                    self.cursor = (index + 1) % self.workers.len();
                    return Ok(index);
                }
                Err(back) => {
                    warn!(worker = %self.workers[index].0, "worker link closed, removing it");
                    order = back;
                    self.remove(index);
                }
            }
        }
    }
}

pub enum Control<L> {
    Register(String, L),
    Deregister(String),
}

#[derive(Debug, Clone, Default)]
pub struct BalancerStats {
    pub dispatched: u64,
    /// Wall time of each successful `dispatch` call, in nanoseconds.
    pub dispatch_nanos: Vec<u64>,
}

impl BalancerStats {
    pub fn median_dispatch_nanos(&self) -> Option<u64> {
        let mut v = self.dispatch_nanos.clone();
        v.sort_unstable();
        v.get(v.len().wrapping_sub(1) / 2).copied()
    }
}

/// The dispatching agent. Registry changes arrive on the control channel
/// and are applied between dispatches.
pub struct Balancer<L> {
    registry: WorkerRegistry<L>,
    pending: VecDeque<InferenceOrder>,
    stats: BalancerStats,
}

impl<L: WorkerLink> Balancer<L> {
    pub fn new(registry: WorkerRegistry<L>) -> Self {
        Balancer { registry, pending: VecDeque::new(), stats: BalancerStats::default() }
    }

    pub fn registry(&self) -> &WorkerRegistry<L> {
        &self.registry
    }

    fn apply(&mut self, cmd: Control<L>) {
        let result = match cmd {
            Control::Register(e, link) => self.registry.register(e, link),
            Control::Deregister(e) => self.registry.deregister(&e),
        };
        match result {
            Ok(n) => debug!(workers = n, "registry updated"),
            Err(e) => warn!(error = %e, "registry change refused"),
        }
    }

    fn drain_pending(&mut self) {
        while let Some(order) = self.pending.pop_front() {
            let started = Instant::now();
            match self.registry.dispatch(order) {
                Ok(_) => {
                    self.stats.dispatched += 1;
                    self.stats.dispatch_nanos.push(started.elapsed().as_nanos() as u64);
                }
                Err(DispatchError::NoWorkers(order)) => {
                    self.pending.push_front(*order);
                    return;
                }
            }
        }
    }

    /// Runs until the inbound queue closes. Orders that arrive while no
    /// worker is registered wait in arrival order; any still waiting when
    /// the inbound queue closes are dropped.
    pub fn run(mut self, inbound: &Receiver<InferenceOrder>, control: &Receiver<Control<L>>) -> BalancerStats {
        let mut control_open = true;
        loop {
            while let Ok(cmd) = control.try_recv() {
                self.apply(cmd);
            }
            self.drain_pending();
            if !self.pending.is_empty() {
                // Nothing can move until a worker registers.
                if !control_open {
                    break;
                }
                match control.recv() {
                    Ok(cmd) => self.apply(cmd),
                    Err(_) => control_open = false,
                }
                continue;
            }
            if control_open {
                select! {
                    recv(control) -> cmd => match cmd {
                        Ok(cmd) => self.apply(cmd),
                        Err(_) => control_open = false,
                    },
                    recv(inbound) -> order => match order {
                        Ok(order) => self.pending.push_back(order),
                        Err(_) => break,
                    },
                }
            } else {
                match inbound.recv() {
                    Ok(order) => self.pending.push_back(order),
                    Err(_) => break,
                }
            }
        }
        self.drain_pending();
        if !self.pending.is_empty() {
            warn!(orders = self.pending.len(), "dropping orders with no worker to take them");
        }
        self.stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::*;
    use crate::image::Image;
    use crate::time::Timestamp;
    use crossbeam_channel::unbounded;
    use proptest::prelude::*;

    fn order(id: u64) -> InferenceOrder {
        let mut t = StageTimings::new();
        t.push(stage::FEEDER, std::time::Duration::from_micros(3));
        InferenceOrder {
            order_id: OrderId(id),
            image_id: ImageId(id),
            plot_type_id: PlotTypeId(1),
            payload: Image::filled(2, 2, 1, 0.5),
            stage_timings: t,
            created_at: Timestamp(id as i64),
        }
    }

    fn registry(n: usize) -> (WorkerRegistry<Sender<InferenceOrder>>, Vec<Receiver<InferenceOrder>>) {
        let mut reg = WorkerRegistry::new();
        let rxs = (0..n)
            .map(|i| {
                let (tx, rx) = unbounded();
                reg.register(format!("w{i}"), tx).unwrap();
                rx
            })
            .collect();
        (reg, rxs)
    }

    #[test]
    fn three_workers_seven_orders() {
        let (mut reg, _rx) = registry(3);
        let seq: Vec<usize> = (0..7).map(|i| reg.dispatch(order(i)).unwrap()).collect();
        assert_eq!(seq, [0, 1, 2, 0, 1, 2, 0]);
    }

    #[test]
    fn single_worker_takes_everything() {
        let (mut reg, _rx) = registry(1);
        assert!((0..20).all(|i| reg.dispatch(order(i)).unwrap() == 0));
    }

    #[test]
    fn four_workers_thousand_orders() {
        let (mut reg, rxs) = registry(4);
        for i in 0..1000 {
            reg.dispatch(order(i)).unwrap();
        }
        for rx in rxs {
            assert_eq!(rx.len(), 250);
        }
    }

    #[test]
    fn pass_through_adds_only_balancer_timing() {
        let (mut reg, rxs) = registry(2);
        let before = order(5);
        reg.dispatch(before.clone()).unwrap();
        let after = rxs[0].recv().unwrap();
        assert_eq!(after.payload, before.payload);
        assert_eq!((after.order_id, after.image_id, after.created_at), (before.order_id, before.image_id, before.created_at));
        assert_eq!(after.stage_timings.len(), 2);
        assert_eq!(after.stage_timings.0[0], before.stage_timings.0[0]);
        assert_eq!(after.stage_timings.0[1].stage, stage::BALANCER);
    }

    #[test]
    fn register_and_deregister() {
        let (mut reg, _rx) = registry(2);
        let counts = (0..4).fold([0; 2], |mut c, i| {
            c[reg.dispatch(order(i)).unwrap()] += 1;
            c
        });
        assert_eq!(counts, [2, 2]);
        assert!(matches!(reg.register("w0", unbounded().0), Err(RegistryError::DuplicateEndpoint(_))));
        assert!(matches!(reg.deregister("nope"), Err(RegistryError::UnknownEndpoint(_))));
        assert_eq!(reg.deregister("w0").unwrap(), 1);
        assert_eq!(reg.deregister("w1").unwrap(), 0);
        match reg.dispatch(order(99)) {
            Err(DispatchError::NoWorkers(o)) => {
                assert_eq!(o.order_id, OrderId(99));
                assert_eq!(o.stage_timings.len(), 1);
            }
            Ok(_) => panic!("dispatch with no workers"),
        }
    }

    #[test]
    fn deregister_mid_stream_splits_among_survivors() {
        let (mut reg, rxs) = registry(3);
        for i in 0..5 {
            reg.dispatch(order(i)).unwrap();
        }
        // cursor now at w2
        reg.deregister("w1").unwrap();
        for i in 5..11 {
            reg.dispatch(order(i)).unwrap();
        }
        // Replay oracle: rotation over the survivors, starting from the worker
        // that followed the removed one.
        let ids = |rx: &Receiver<InferenceOrder>| rx.try_iter().map(|o| o.order_id.0).collect::<Vec<_>>();
        assert_eq!(ids(&rxs[0]), [0, 3, 6, 8, 10]);
        assert_eq!(ids(&rxs[1]), [1, 4]);
        assert_eq!(ids(&rxs[2]), [2, 5, 7, 9]);
    }

    #[test]
    fn closed_worker_is_skipped() {
        let (mut reg, mut rxs) = registry(3);
        drop(rxs.remove(1));
        let seq: Vec<usize> = (0..4).map(|i| reg.dispatch(order(i)).unwrap()).collect();
        assert_eq!(seq, [0, 1, 0, 1]);
        assert_eq!(reg.len(), 2);
        assert_eq!(rxs[1].len(), 2);
    }

    #[test]
    fn run_loop_holds_orders_until_a_worker_registers() {
        let (in_tx, in_rx) = inbound_queue();
        let (ctl_tx, ctl_rx) = unbounded();
        let handle = std::thread::spawn(move || Balancer::new(WorkerRegistry::new()).run(&in_rx, &ctl_rx));
        for i in 0..5 {
            in_tx.send(order(i)).unwrap();
        }
        let (w_tx, w_rx) = unbounded();
        ctl_tx.send(Control::Register("w0".into(), w_tx)).unwrap();
        for i in 5..8 {
            in_tx.send(order(i)).unwrap();
        }
        drop(in_tx);
        let stats = handle.join().unwrap();
        assert_eq!(stats.dispatched, 8);
        assert_eq!(w_rx.try_iter().map(|o| o.order_id.0).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
        assert!(stats.median_dispatch_nanos().is_some());
    }

    proptest! {
        #[test]
        fn counts_differ_by_at_most_one(n in 1usize..9, m in 0u64..300) {
            let (mut reg, rxs) = registry(n);
            for i in 0..m {
                reg.dispatch(order(i)).unwrap();
            }
            let counts: Vec<usize> = rxs.iter().map(|r| r.len()).collect();
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
            for rx in &rxs {
                let ids: Vec<u64> = rx.try_iter().map(|o| o.order_id.0).collect();
                prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
