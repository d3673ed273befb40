//! Round-robin dispatch over three workers, with one leaving mid-stream.
//!
//! `cargo run --example balancer`

use crossbeam_channel::{unbounded, Receiver, Sender};
use hydra_core::balancer::WorkerRegistry;
use hydra_core::image::Image;
use hydra_core::ingest::InferenceOrder;
use hydra_core::*;

fn order(n: u64) -> InferenceOrder {
    InferenceOrder {
        order_id: OrderId(n),
        image_id: ImageId(n),
        plot_type_id: PlotTypeId(1),
        payload: Image::filled(8, 8, 1, 0.5),
        stage_timings: StageTimings::new(),
        created_at: Timestamp(0),
    }
}

fn main() {
    let mut registry: WorkerRegistry<Sender<InferenceOrder>> = WorkerRegistry::new();
    let mut inboxes: Vec<(String, Receiver<InferenceOrder>)> = Vec::new();
    for name in ["alpha", "beta", "gamma"] {
        let (tx, rx) = unbounded();
        registry.register(name, tx).unwrap();
        inboxes.push((name.to_string(), rx));
    }

    for n in 0..6 {
        registry.dispatch(order(n)).unwrap();
    }
    registry.deregister("beta").unwrap();
    for n in 6..10 {
        registry.dispatch(order(n)).unwrap();
    }

    for (name, rx) in &inboxes {
        let got: Vec<u64> = rx.try_iter().map(|o| o.order_id.0).collect();
        println!("{name:>5}: {got:?}");
    }
}
