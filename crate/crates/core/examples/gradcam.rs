//! Trains a small classifier in memory to tell clean frames from frames
//! with a dead square, then shows where its gradCAM map lights up.
//!
//! `cargo run --release --example gradcam`

use hydra_core::predict::classifier::Tensor;
use hydra_core::predict::train::{accuracy, fit, initialize};
use hydra_core::predict::{gradcam, softmax, Classifier};
use hydra_core::sim::{Effect, Region, StreamSpec, Truth};
use hydra_core::*;

const SIZE: u32 = 16;

fn dead(x: u32, y: u32) -> Vec<Effect> {
    vec![Effect { truth: Truth::Dead, region: Region { x, y, width: 5, height: 5 } }]
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = StreamSpec::new("occupancy", SIZE, SIZE, 3);
    let mut batch = Vec::new();
    for i in 0..60u64 {
        let (effects, target) = if i % 2 == 0 { (vec![], 0) } else { (dead((i as u32 * 3) % 11, (i as u32 * 7) % 11), 1) };
        batch.push((Tensor::from(&spec.frame(i, &effects)), target));
    }
    let model = initialize(PlotTypeId(1), vec![LabelId(1), LabelId(2)], 1, 6, 2);
    let trained = fit(model, &batch, 400, 0.5)?;
    println!(
        "loss {:.4} -> {:.4}, training accuracy {:.2}",
        trained.losses[0],
        trained.losses.last().unwrap(),
        accuracy(&trained.model, &batch)
    );

    let probe = spec.frame(1000, &dead(9, 2));
    let inference = trained.model.infer(&probe)?;
    let weights = softmax(&inference.logits);
    println!("probe weights: good={:.3} dead={:.3}", weights[0], weights[1]);
    let grads = trained.model.class_gradients(&inference, 1)?;
    let cam = gradcam(&inference.feature_maps, &grads, SIZE as usize, SIZE as usize)?;
    println!("gradCAM for the dead class (dead square at x=9..13, y=2..6):");
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    for y in 0..cam.height {
        let row: String = (0..cam.width)
            .map(|x| shades[((cam.values[y * cam.width + x] * 9.0).round() as usize).min(9)])
            .collect();
        println!("  |{row}|");
    }
    Ok(())
}
