//! How the keeper confirms a classification and decides what to retain.
//!
//! `cargo run --example keeper_policy`

use hydra_core::keeper::{alarm_kind, CollectionPolicy};
use hydra_core::*;

fn main() {
    let threshold = 0.8;
    let policy = CollectionPolicy { collect_percentage: 0.1, rng_seed: 7 };
    println!("{:<6} {:>6} {:>9} {:>9} {:>13} {:>12}", "class", "weight", "confirmed", "collected", "reason", "alarm");
    let cases = [
        (Severity::Good, 0.95),
        (Severity::Good, 0.80),
        (Severity::Good, 0.55),
        (Severity::Bad, 0.97),
        (Severity::Bad, 0.60),
    ];
    for (i, (severity, weight)) in cases.into_iter().enumerate() {
        let confirmed = weight > threshold;
        let (collected, reason) = policy.decide(OrderId(i as u64), severity, confirmed);
        let alarm = alarm_kind(severity, confirmed).map_or("-".to_string(), |k| format!("{k:?}"));
        println!("{:<6} {weight:>6} {confirmed:>9} {collected:>9} {:>13} {alarm:>12}", format!("{severity:?}"), format!("{reason:?}"));
    }

    let sampled = (0..10_000u64).filter(|&o| policy.decide(OrderId(o), Severity::Good, true).0).count();
    println!("confirmed Good retained: {sampled} of 10000 (target 10%)");
}
