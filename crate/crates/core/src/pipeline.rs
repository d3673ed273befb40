//! Thread wiring for one in-process deployment:
//! balancer, N predict workers and the keeper, plus an optional feeder.

use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, unbounded, Sender};
use tracing::error;

use crate::balancer::{inbound_queue, Balancer, BalancerStats, Control, WorkerRegistry};
use crate::ingest::{Feeder, FeederError, InferenceOrder};
use crate::keeper::{AlarmHub, Keeper, KeeperConfig, KeeperStats};
use crate::predict::{order_buffer, BufferSender, ClassifierBackend, PredictWorker, DEFAULT_BUFFER};
use crate::store::Store;
use crate::time::Clock;

/// Capacity of the merged report queue feeding the keeper.
pub const REPORT_QUEUE: usize = 1024;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub workers: usize,
    pub worker_buffer: usize,
    /// Where predict workers log orders they cannot process.
    pub predict_dead_letter: PathBuf,
    pub keeper: KeeperConfig,
}

impl PipelineConfig {
    pub fn new(workers: usize, keeper: KeeperConfig) -> Self {
        PipelineConfig {
            workers,
            worker_buffer: DEFAULT_BUFFER,
            predict_dead_letter: keeper.dead_letter_dir.clone(),
            keeper,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineStats {
    pub balancer: BalancerStats,
    pub keeper: KeeperStats,
}

pub struct Pipeline {
    inbound: Sender<InferenceOrder>,
    control: Sender<Control<BufferSender>>,
    alarms: Arc<AlarmHub>,
    balancer: JoinHandle<BalancerStats>,
    workers: Vec<JoinHandle<()>>,
    keeper: JoinHandle<KeeperStats>,
}

impl Pipeline {
    pub fn start(
        store: Arc<dyn Store>,
        backend: Arc<dyn ClassifierBackend>,
        clock: Arc<dyn Clock>,
        alarms: Arc<AlarmHub>,
        config: PipelineConfig,
    ) -> Pipeline {
        let (report_tx, report_rx) = bounded(REPORT_QUEUE);
        let mut registry = WorkerRegistry::new();
        let mut workers = Vec::with_capacity(config.workers);
        for i in 0..config.workers {
            let (tx, buffer) = order_buffer(config.worker_buffer);
            registry.register(format!("worker-{i}"), tx).expect("fresh worker names");
            let mut worker = PredictWorker::new(store.clone(), backend.clone(), clock.clone())
                .with_dead_letter(config.predict_dead_letter.clone());
            let reports = report_tx.clone();
            workers.push(
                std::thread::Builder::new()
                    .name(format!("predict-{i}"))
                    .spawn(move || worker.run(&buffer, &reports))
                    .expect("spawn predict worker"),
            );
        }
        drop(report_tx);

        let mut keeper = Keeper::new(store, clock, alarms.clone(), config.keeper);
        let keeper = std::thread::Builder::new()
            .name("keeper".into())
            .spawn(move || keeper.run(&report_rx))
            .expect("spawn keeper");

        let (inbound, inbound_rx) = inbound_queue();
        let (control, control_rx) = unbounded();
        let balancer = std::thread::Builder::new()
            .name("balancer".into())
            .spawn(move || Balancer::new(registry).run(&inbound_rx, &control_rx))
            .expect("spawn balancer");

        Pipeline { inbound, control, alarms, balancer, workers, keeper }
    }

    /// Queue into the balancer. Sends block while it is full.
    pub fn inbound(&self) -> &Sender<InferenceOrder> {
        &self.inbound
    }

    pub fn alarms(&self) -> &Arc<AlarmHub> {
        &self.alarms
    }

    /// Adds or removes predict workers while running.
    pub fn control(&self) -> &Sender<Control<BufferSender>> {
        &self.control
    }

    /// Runs a feeder on its own thread until `stop` is set.
    pub fn spawn_feeder(&self, mut feeder: Feeder, stop: Arc<AtomicBool>) -> JoinHandle<Result<(), FeederError>> {
        let out = self.inbound.clone();
        std::thread::Builder::new()
            .name("feeder".into())
            .spawn(move || {
                let result = feeder.run(&out, &stop);
                if let Err(e) = &result {
                    error!(error = %e, "feeder stopped");
                }
                result
            })
            .expect("spawn feeder")
    }

    /// Closes the inbound queue and waits for every stage to drain.
    pub fn shutdown(self) -> PipelineStats {
        drop(self.inbound);
        drop(self.control);
        let balancer = self.balancer.join().expect("balancer panicked");
        for w in self.workers {
            w.join().expect("predict worker panicked");
        }
        let keeper = self.keeper.join().expect("keeper panicked");
        PipelineStats { balancer, keeper }
    }
}
