//! Encodes an inference order and a report as length-prefixed frames and
//! reads them back from one byte stream.
//!
//! `cargo run --example wire`

use std::io::Cursor;

use hydra_core::image::Image;
use hydra_core::ingest::InferenceOrder;
use hydra_core::predict::{GradCamMap, Report};
use hydra_core::wire::{read_order, read_report, write_order, write_report};
use hydra_core::*;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut timings = StageTimings::new();
    timings.push(stage::FEEDER, std::time::Duration::from_micros(850));
    let order = InferenceOrder {
        order_id: OrderId(42),
        image_id: ImageId(42),
        plot_type_id: PlotTypeId(1),
        payload: Image::new(4, 2, 1, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])?,
        stage_timings: timings.clone(),
        created_at: Timestamp(1_700_000_000_000),
    };
    let report = Report {
        order_id: order.order_id,
        image_id: order.image_id,
        plot_type_id: order.plot_type_id,
        model_id: ModelId(3),
        label_order: vec![LabelId(1), LabelId(2)],
        output_weights: vec![0.2, 0.8],
        classification: LabelId(2),
        gradcam: Some(GradCamMap { width: 4, height: 2, values: vec![0.0, 0.0, 0.5, 1.0, 0.0, 0.1, 0.6, 0.9] }),
        stage_timings: timings,
        inferred_at: Timestamp(1_700_000_000_120),
    };

    let mut buf = Vec::new();
    write_order(&mut buf, &order)?;
    let order_len = buf.len();
    write_report(&mut buf, &report)?;
    println!("order frame {order_len} bytes, report frame {} bytes", buf.len() - order_len);

    let mut r = Cursor::new(buf);
    let back_order = read_order(&mut r)?.expect("an order frame");
    let back_report = read_report(&mut r)?.expect("a report frame");
    println!("order round trip:  {}", back_order == order);
    println!("report round trip: {}", back_report == report);
    println!("end of stream:     {:?}", read_order(&mut r)?.map(|o| o.order_id));
    Ok(())
}
