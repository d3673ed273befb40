//! Drives the HTTP API in-process: lists plot types, records a label,
//! tries a threshold the API refuses and reads the poll hints.
//!
//! `cargo run -p hydra-api --example http_walkthrough`
//!
//! Against a running server the same calls are plain HTTP, for example
//! `curl -H 'X-Hydra-User: shifter' -X PUT -d '[...]' localhost:8080/models/1/thresholds`.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request};
use axum::Router;
use http_body_util::BodyExt;
use hydra_api::{router, AppState, PollHints, USER_HEADER};
use hydra_core::layout::ImageRoot;
use hydra_core::predict::ReferenceBackend;
use hydra_core::store::{MemoryStore, Store};
use hydra_core::*;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> Result<(), Box<dyn std::error::Error>> {
    let req = Request::builder().method(method).uri(uri).header(USER_HEADER, "shifter");
    let req = match &body {
        Some(b) => req.header(header::CONTENT_TYPE, "application/json").body(Body::from(b.to_string()))?,
        None => req.body(Body::empty())?,
    };
    let resp = app.clone().oneshot(req).await?;
    let status = resp.status();
    let bytes = resp.into_body().collect().await?.to_bytes();
    let value: Value = serde_json::from_slice(&bytes)?;
    println!("{method} {uri} -> {status}\n{}\n", serde_json::to_string_pretty(&value)?);
    Ok(())
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let store = Arc::new(MemoryStore::new());
    let (plot, labels) = store.register_plot_type(NewPlotType {
        name: "occupancy".into(),
        input_width: 24,
        input_height: 24,
        channels: 1,
        labels: vec![
            LabelSpec::new("Good", Rgb::GREEN, Severity::Good),
            LabelSpec::new("Dead", Rgb::RED, Severity::Bad),
        ],
        allowed_labelers: BTreeSet::from(["shifter".to_string()]),
    })?;
    let image = store.register_image(NewImage {
        plot_type_id: plot.plot_type_id,
        run_number: 1,
        sequence: 0,
        capture_time: Timestamp(1_700_000_000_000),
        storage_path: PathBuf::from("occupancy/r1/frame.pgm"),
        width: 32,
        height: 32,
    })?;
    let model = store.insert_model(NewModel {
        plot_type_id: plot.plot_type_id,
        artifact_path: PathBuf::from("unused.hydm"),
        label_order: labels.iter().map(|l| l.label_id).collect(),
        input_shape: InputShape::of(&plot),
        training_set_id: None,
        sampling_method: "none".into(),
        collect_percentage: 0.1,
        created_at: Timestamp(0),
    })?;
    let state = AppState {
        store: store.clone(),
        image_root: ImageRoot::new("images"),
        backend: Arc::new(ReferenceBackend),
        clock: Arc::new(SystemClock),
        hints: PollHints::default(),
    };
    let app = router(state, None);

    send(&app, "GET", "/plot-types", None).await?;
    send(&app, "POST", "/labels", Some(json!({"image_id": image.image_id, "label_id": labels[1].label_id}))).await?;
    let thresholds = format!("/models/{}/thresholds", model.model_id);
    send(&app, "PUT", &thresholds, Some(json!([{"label_id": labels[1].label_id, "threshold": 1.2}]))).await?;
    send(&app, "PUT", &thresholds, Some(json!([{"label_id": labels[1].label_id, "threshold": 0.85}]))).await?;
    send(&app, "GET", "/config", None).await?;
    Ok(())
}
