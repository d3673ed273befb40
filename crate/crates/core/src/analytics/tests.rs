use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::predict::{artifact, ReferenceBackend, ReferenceClassifier};
use crate::store::HistoryQuery;
use crate::testutil::{bench, Bench, T0};
use crate::time::{TimeRange, Timestamp};

fn scored(truth: usize, weights: &[f64]) -> Scored {
    Scored { image_id: ImageId(0), truth, weights: weights.to_vec() }
}

/// One identity kernel, so the pooled feature is the mean interior pixel.
fn mean_model(b: &Bench, linear: [f64; 3], bias: [f64; 3]) {
    let mut kernels = vec![0.0; 9];
    kernels[4] = 1.0;
    let m = ReferenceClassifier {
        plot_type_id: b.plot.plot_type_id,
        label_order: b.model.label_order.clone(),
        channels: 1,
        num_kernels: 1,
        kernels,
        conv_bias: vec![0.0],
        linear: linear.to_vec(),
        linear_bias: bias.to_vec(),
    };
    std::fs::write(&b.model.artifact_path, artifact::encode(&m)).unwrap();
}

/// Writes image `i` as a constant frame of `value`.
fn write_frames(b: &Bench, values: &[f32]) {
    for (img, &v) in b.images.iter().zip(values) {
        let path = b.dir.path().join(&img.storage_path);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        Image::filled(8, 8, 1, v).save(&path).unwrap();
    }
}

fn evaluator(b: &Bench) -> (ImageRoot, ReferenceBackend) {
    (ImageRoot::new(b.dir.path()), ReferenceBackend)
}

#[test]
fn perfect_model_fills_the_diagonal() {
    let b = bench(10, 0.0);
    mean_model(&b, [-20.0, 20.0, 0.0], [10.0, -10.0, -30.0]);
    let values: Vec<f32> = (0..10).map(|i| if i % 2 == 0 { 0.1 } else { 0.9 }).collect();
    write_frames(&b, &values);
    let set: Vec<_> = b.images.iter().zip(&values).map(|(img, &v)| (img.image_id, b.labels[(v > 0.5) as usize].label_id)).collect();
    let (root, backend) = evaluator(&b);
    let eval = Evaluator { store: b.store.as_ref(), backend: &backend, image_root: &root };
    let ecm = build_ecm(&eval, b.model.model_id, &set).unwrap();
    assert_eq!(ecm.total(), 10);
    for (t, row) in ecm.cells.iter().enumerate() {
        for (p, cell) in row.iter().enumerate() {
            assert_eq!(cell.count, cell.weight_samples.len());
            if t != p {
                assert_eq!(cell.count, 0);
            }
        }
    }
    assert_eq!((ecm.cells[0][0].count, ecm.cells[1][1].count), (5, 5));
}

#[test]
fn constant_model_fills_one_column() {
    let b = bench(6, 0.0);
    mean_model(&b, [0.0; 3], [0.0, 1.0, 0.0]);
    write_frames(&b, &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    let set: Vec<_> = b.images.iter().enumerate().map(|(i, img)| (img.image_id, b.labels[i % 3].label_id)).collect();
    let (root, backend) = evaluator(&b);
    let eval = Evaluator { store: b.store.as_ref(), backend: &backend, image_root: &root };
    let ecm = build_ecm(&eval, b.model.model_id, &set).unwrap();
    for row in &ecm.cells {
        assert_eq!(row[0].count + row[2].count, 0);
        assert_eq!(row[1].count, 2);
    }
}

#[test]
fn ecm_matches_per_image_tally() {
    let b = bench(20, 0.0);
    mean_model(&b, [-12.0, 9.0, 3.0], [6.0, -5.0, -1.2]);
    // Multiples of 1/255 survive the 8-bit round trip exactly.
    let values: Vec<f32> = (0..20).map(|i| (13 * i) as f32 / 255.0).collect();
    write_frames(&b, &values);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let set: Vec<_> = b.images.iter().map(|img| (img.image_id, b.labels[rng.random_range(0..3)].label_id)).collect();
    let (root, backend) = evaluator(&b);
    let eval = Evaluator { store: b.store.as_ref(), backend: &backend, image_root: &root };
    let ecm = build_ecm(&eval, b.model.model_id, &set).unwrap();

    // Oracle: evaluate the closed form of the model on each constant frame.
    let mut counts = [[0usize; 3]; 3];
    let mut weights: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); 3]; 3];
    for (&(_, truth), &v) in set.iter().zip(&values) {
        let p = v as f64;
        let logits = [6.0 - 12.0 * p, 9.0 * p - 5.0, 3.0 * p - 1.2];
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let w: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let pred = argmax(&w).unwrap();
        let t = b.labels.iter().position(|l| l.label_id == truth).unwrap();
        counts[t][pred] += 1;
        weights[t][pred].push(w[pred]);
    }
    for t in 0..3 {
        assert_eq!(ecm.row_total(t), counts[t].iter().sum::<usize>());
        for p in 0..3 {
            assert_eq!(ecm.cells[t][p].count, counts[t][p]);
            for (a, e) in ecm.cells[t][p].weight_samples.iter().zip(&weights[t][p]) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }
    assert!(counts.iter().flatten().filter(|&&c| c > 0).count() >= 3);
}

#[test]
fn unlabeled_images_rejected() {
    let b = bench(2, 0.0);
    let (root, backend) = evaluator(&b);
    let eval = Evaluator { store: b.store.as_ref(), backend: &backend, image_root: &root };
    b.store.assign_label(b.images[0].image_id, b.labels[0].label_id, "alice", T0).unwrap();
    let ids = [b.images[0].image_id, b.images[1].image_id];
    assert!(matches!(eval.with_current_labels(&ids), Err(AnalyticsError::UnlabeledImage(id)) if id == ids[1]));
    assert_eq!(eval.labeled_set(b.plot.plot_type_id).unwrap(), [(ids[0], b.labels[0].label_id)]);
    assert!(matches!(build_ecm(&eval, ModelId(999), &[]), Err(AnalyticsError::NoModel(_))));
}

#[test]
fn f1_degenerate_thresholds() {
    let perfect = [scored(0, &[0.8, 0.2]), scored(1, &[0.3, 0.7]), scored(0, &[1.0, 0.0])];
    assert_eq!(effective_f1(&perfect, 0, 0.0), 1.0);
    assert_eq!(effective_f1(&perfect, 1, 0.0), 1.0);
    assert_eq!(effective_f1(&perfect, 0, 1.0), 0.0);
    assert_eq!(effective_f1(&perfect, 1, 1.0), 0.0);
    assert_eq!(effective_f1(&[], 0, 0.0), 0.0);
}

#[test]
fn weight_equal_to_threshold_is_unconfirmed() {
    let s = [scored(0, &[0.75, 0.25])];
    assert_eq!(effective_f1(&s, 0, 0.75), 0.0);
    assert_eq!(effective_f1(&s, 0, 0.7499), 1.0);
}

#[test]
fn f1_six_sample_fixture() {
    let s = [
        scored(0, &[0.9, 0.1]),  // confirmed 0, TP
        scored(0, &[0.55, 0.45]), // argmax 0 but below 0.6: FN
        scored(1, &[0.7, 0.3]),  // confirmed 0, FP
        scored(1, &[0.2, 0.8]),  // TN for 0
        scored(0, &[0.4, 0.6]),  // FN
        scored(1, &[0.65, 0.35]), // FP
    ];
    // TP=1 FP=2 FN=2
    assert_eq!(effective_f1(&s, 0, 0.6), 2.0 / 6.0);
    // label 1 at 0.5: TP=1 (0.8), FP=1 (0.6), FN=2
    assert_eq!(effective_f1(&s, 1, 0.5), 2.0 / 5.0);
}

#[test]
fn separated_weights_choose_a_gap_threshold() {
    // Four labels so a wrong argmax can weigh as little as 0.3.
    let mut fx = Vec::new();
    for i in 0..10 {
        let hi = 0.9 + i as f64 * 0.005;
        let rest = (1.0 - hi) / 3.0;
        fx.push(scored(0, &[hi, rest, rest, rest]));
        fx.push(scored(1, &[rest, hi, rest, rest]));
    }
    fx.push(scored(2, &[0.3, 0.25, 0.25, 0.2]));
    fx.push(scored(3, &[0.2, 0.3, 0.25, 0.25]));
    let choices = select_thresholds(&[LabelId(1), LabelId(2), LabelId(3), LabelId(4)], &fx).unwrap();
    for c in &choices[..2] {
        assert_eq!(c.f1, 1.0);
        assert!((0.3..0.9).contains(&c.threshold), "{}", c.threshold);
    }
    assert_eq!(choices[1].threshold, 0.3);
}

#[test]
fn single_correct_sample_picks_zero() {
    let c = select_thresholds(&[LabelId(1), LabelId(2)], &[scored(0, &[0.7, 0.3])]).unwrap();
    assert_eq!((c[0].threshold, c[0].f1), (0.0, 1.0));
    assert_eq!((c[1].threshold, c[1].f1), (0.0, 0.0));
    assert!(matches!(select_thresholds(&[LabelId(1)], &[]), Err(AnalyticsError::EmptyEvaluationSet)));
}

fn random_fixture(seed: u64, n: usize, labels: usize) -> Vec<Scored> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            // Quantized weights make exact ties between candidates common.
            let raw: Vec<f64> = (0..labels).map(|_| rng.random_range(1..20) as f64).collect();
            let sum: f64 = raw.iter().sum();
            Scored { image_id: ImageId(i as u64), truth: rng.random_range(0..labels), weights: raw.iter().map(|r| r / sum).collect() }
        })
        .collect()
}

/// Exhaustive sweep over every distinct weight in the fixture plus 0.
fn brute_force(samples: &[Scored], label: usize) -> (f64, f64) {
    let mut ts: Vec<f64> = std::iter::once(0.0).chain(samples.iter().flat_map(|s| s.weights.iter().copied())).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let mut best = (0.0, -1.0);
    for t in ts {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for s in samples {
            let top = s.weights.iter().enumerate().fold(0, |b, (i, &w)| if w > s.weights[b] { i } else { b });
            let hit = top == label && s.weights[label] > t;
            if hit && s.truth == label {
                tp += 1;
            } else if hit {
                fp += 1;
            } else if s.truth == label {
                fn_ += 1;
            }
        }
        let f = if 2 * tp + fp + fn_ == 0 { 0.0 } else { (2 * tp) as f64 / (2 * tp + fp + fn_) as f64 };
        if f > best.1 {
            best = (t, f);
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn selection_matches_exhaustive_sweep(seed in any::<u64>(), n in 1usize..120, labels in 2usize..4) {
        let samples = random_fixture(seed, n, labels);
        let ids: Vec<LabelId> = (0..labels as u64).map(LabelId).collect();
        let choices = select_thresholds(&ids, &samples).unwrap();
        for (l, c) in choices.iter().enumerate() {
            let (_, f) = brute_force(&samples, l);
            prop_assert_eq!(c.f1, f);
            prop_assert_eq!(effective_f1(&samples, l, c.threshold), c.f1);
        }
        let mut shuffled = samples.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        prop_assert_eq!(select_thresholds(&ids, &shuffled).unwrap(), choices);
    }

    #[test]
    fn f1_is_zero_above_every_weight(seed in any::<u64>(), n in 1usize..50) {
        let samples = random_fixture(seed, n, 2);
        for l in 0..2 {
            prop_assert_eq!(effective_f1(&samples, l, 1.0), 0.0);
        }
    }
}

#[test]
fn selected_thresholds_are_persisted() {
    let b = bench(10, 0.0);
    mean_model(&b, [-20.0, 20.0, 0.0], [10.0, -10.0, -30.0]);
    let values: Vec<f32> = (0..10).map(|i| i as f32 / 9.0).collect();
    write_frames(&b, &values);
    let set: Vec<_> = b.images.iter().zip(&values).map(|(img, &v)| (img.image_id, b.labels[(v > 0.5) as usize].label_id)).collect();
    let (root, backend) = evaluator(&b);
    let eval = Evaluator { store: b.store.as_ref(), backend: &backend, image_root: &root };
    let sel = select_default_thresholds(&eval, b.model.model_id, &set).unwrap();
    let stored = b.store.thresholds(b.model.model_id).unwrap();
    for (c, t) in sel.choices.iter().zip(&stored) {
        assert_eq!((c.label_id, c.threshold), (t.label_id, t.threshold));
    }
    assert_eq!(sel.choices[0].f1, 1.0);
    assert!(matches!(select_default_thresholds(&eval, b.model.model_id, &[]), Err(AnalyticsError::EmptyEvaluationSet)));
}

#[test]
fn diff_lists_disagreements_most_confident_first() {
    let order = [LabelId(1), LabelId(2)];
    let names = vec!["Good".to_string(), "Bad".to_string()];
    let agree = [scored(0, &[0.9, 0.1]), scored(1, &[0.2, 0.8])];
    assert!(training_diff_from(ModelId(1), &order, names.clone(), &agree).disagreements.is_empty());

    let mixed: Vec<Scored> = [
        (0, [0.9, 0.1]),
        (1, [0.6, 0.4]),
        (0, [0.05, 0.95]),
        (1, [0.3, 0.7]),
        (0, [0.4, 0.6]),
    ]
    .iter()
    .enumerate()
    .map(|(i, (t, w))| Scored { image_id: ImageId(i as u64 + 1), truth: *t, weights: w.to_vec() })
    .collect();
    let diff = training_diff_from(ModelId(1), &order, names, &mixed);
    let oracle: Vec<ImageId> = mixed
        .iter()
        .filter(|s| (s.weights[1] > s.weights[0]) as usize != s.truth)
        .map(|s| s.image_id)
        .collect();
    let mut listed: Vec<ImageId> = diff.disagreements.iter().map(|d| d.image_id).collect();
    assert_eq!(listed, [ImageId(3), ImageId(2), ImageId(5)]);
    listed.sort();
    assert_eq!(listed, oracle);
    assert_eq!(diff.disagreements[0].human_label, LabelId(1));
    assert_eq!(diff.disagreements[0].model_label, LabelId(2));
    assert_eq!(
        diff.to_text(),
        "diff model=1 evaluated=5 disagreements=3\n\
         disagreement image=3 human=Good model=Bad weight=0.95 weights=0.05,0.95\n\
         disagreement image=2 human=Bad model=Good weight=0.6 weights=0.6,0.4\n\
         disagreement image=5 human=Good model=Bad weight=0.6 weights=0.4,0.6\n"
    );
}

fn record(b: &Bench, image: usize, weights: [f64; 3], confirmed: bool, at: i64, timings: &[(&str, u64)]) -> InferenceId {
    let top = argmax(&weights).unwrap();
    let severity = b.labels[top].severity;
    let reason = if severity == Severity::Bad {
        CollectReason::BadClass
    } else if !confirmed {
        CollectReason::Unconfirmed
    } else {
        CollectReason::None
    };
    b.store
        .record_inference(InferenceDraft {
            order_id: OrderId(image as u64),
            image_id: b.images[image].image_id,
            model_id: b.model.model_id,
            output_weights: weights.to_vec(),
            classification: b.labels[top].label_id,
            confirmed,
            collected: reason != CollectReason::None,
            collect_reason: reason,
            stage_timings: StageTimings(
                timings.iter().map(|(s, n)| StageTiming { stage: s.to_string(), nanos: *n }).collect(),
            ),
            inferred_at: Timestamp(T0.0 + at),
        })
        .unwrap()
}

#[test]
fn bucket_edges_span_microseconds_to_minutes() {
    let e = bucket_edges();
    assert!((e[0] - 1e-6).abs() < 1e-18);
    assert!((e[24] - 100.0).abs() < 1e-9);
    assert!((e[3] - 1e-5).abs() < 1e-15);
    assert_eq!(bucket_index(1e-9), 0);
    assert_eq!(bucket_index(5e-6), 2);
    assert_eq!(bucket_index(1e-3), 9);
    assert_eq!(bucket_index(1e6), 23);
}

#[test]
fn status_of_an_empty_window() {
    let b = bench(1, 0.0);
    let s = status_metrics(b.store.as_ref(), TimeRange::new(T0, T0)).unwrap();
    assert_eq!(s.inferences, 0);
    assert!(s.histograms.iter().all(|h| h.total() == 0));
    assert!(s.per_run.iter().all(|r| r.points.is_empty()));
    assert!(matches!(status_metrics(b.store.as_ref(), TimeRange::new(T0, Timestamp(0))), Err(AnalyticsError::InvalidWindow)));
}

#[test]
fn status_matches_hand_computation() {
    let b = bench(20, 0.0);
    // images 0..10 are run 100, 10..20 run 101
    record(&b, 0, [0.9, 0.05, 0.05], true, 0, &[("feeder", 2_000), ("predict", 3_000_000)]);
    record(&b, 1, [0.9, 0.05, 0.05], true, 1, &[("feeder", 4_000), ("predict", 5_000_000)]);
    record(&b, 12, [0.9, 0.05, 0.05], true, 2, &[("feeder", 50_000), ("predict", 1_000_000), ("extra", 7)]);
    let s = status_metrics(b.store.as_ref(), TimeRange::new(T0, Timestamp(T0.0 + 10))).unwrap();
    assert_eq!(s.histograms.iter().map(|h| h.stage.as_str()).collect::<Vec<_>>(), ["feeder", "balancer", "predict", "keeper", "extra"]);
    let feeder = &s.histograms[0].counts;
    // edges at 1, 2.154, 4.642, 10 µs
    assert_eq!(feeder[0], 1);
    assert_eq!(feeder[1], 1);
    assert_eq!(feeder[bucket_index(50e-6)], 1);
    assert_eq!(bucket_index(50e-6), 5);
    let predict = &s.histograms[2].counts;
    // 1 ms, 3 ms and 5 ms fall in consecutive buckets starting at 1 ms
    assert_eq!(&predict[9..12], &[1, 1, 1]);
    assert_eq!(predict.iter().sum::<u64>(), 3);
    assert_eq!(s.histograms[4].counts[0], 1);
    let fr = &s.per_run[0].points;
    assert_eq!(fr.len(), 2);
    assert_eq!((fr[0].run_number, fr[0].count), (100, 2));
    assert!((fr[0].mean_seconds - 3e-6).abs() < 1e-18);
    assert!((fr[1].mean_seconds - 50e-6).abs() < 1e-18);
    let pr = &s.per_run[2].points;
    assert!((pr[0].mean_seconds - 4e-3).abs() < 1e-15);
    assert!(s.per_run[1].points.is_empty());
}

#[test]
fn identical_timings_share_one_bucket() {
    let b = bench(30, 0.0);
    for i in 0..30 {
        record(&b, i, [0.9, 0.05, 0.05], true, i as i64, &[("predict", 123_456)]);
    }
    let s = status_metrics(b.store.as_ref(), TimeRange::new(T0, Timestamp(T0.0 + 100))).unwrap();
    let h = &s.histograms[2];
    assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
    assert_eq!(h.total(), 30);
    let means: Vec<f64> = s.per_run[2].points.iter().map(|p| p.mean_seconds).collect();
    assert_eq!(means.len(), 3);
    assert!(means.iter().all(|&m| m == means[0]));
}

#[test]
fn digest_keeps_confirmed_bad_and_unconfirmed() {
    let b = bench(8, 0.0);
    let good = [0.9, 0.05, 0.05];
    for i in 0..5 {
        record(&b, i, good, true, i as i64 * 10, &[]);
    }
    let bad1 = record(&b, 5, [0.1, 0.8, 0.1], true, 100, &[]);
    let unc = record(&b, 6, [0.5, 0.3, 0.2], false, 110, &[]);
    let bad2 = record(&b, 7, [0.1, 0.1, 0.8], true, 120, &[]);
    let all = TimeRange::new(T0, Timestamp(T0.0 + 1000));
    let d = build_log_digest(b.store.as_ref(), all).unwrap();
    assert_eq!(d.entries.iter().map(|e| e.inference_id).collect::<Vec<_>>(), [bad2, unc, bad1]);
    // Predicate oracle over the raw history.
    let rows = b.store.query_history(&HistoryQuery::window(all)).unwrap();
    let mut oracle: Vec<_> = rows
        .iter()
        .filter(|r| !r.confirmed || b.store.label(r.classification).unwrap().severity == Severity::Bad)
        .map(|r| r.inference_id)
        .collect();
    oracle.reverse();
    assert_eq!(d.entries.iter().map(|e| e.inference_id).collect::<Vec<_>>(), oracle);
    assert_eq!(d.entries[1].heatmap_path, None);
    assert_eq!(d.entries[0].heatmap_path, Some(ImageRoot::heatmap_path(bad2)));

    assert!(build_log_digest(b.store.as_ref(), TimeRange::new(T0, Timestamp(T0.0 + 40))).unwrap().entries.is_empty());
    assert!(build_log_digest(b.store.as_ref(), TimeRange::new(Timestamp(0), Timestamp(1))).unwrap().entries.is_empty());
    let text = build_log_digest(b.store.as_ref(), TimeRange::new(Timestamp(T0.0 + 105), Timestamp(T0.0 + 115)))
        .unwrap()
        .to_text();
    assert_eq!(
        text,
        format!(
            "log from=1700000000105 to=1700000000115 entries=1\n\
             entry inference={unc} image={} plot_type={} at=1700000000110 label=Good severity=Good confirmed=false \
             image_path=occupancy/r100/f6.pgm heatmap=-\n",
            b.images[6].image_id, b.plot.plot_type_id
        )
    );
}

#[test]
fn ecm_text_is_stable() {
    let ecm = EnhancedConfusionMatrix::from_scored(
        ModelId(4),
        vec![LabelId(1), LabelId(2)],
        vec!["Good".into(), "Bad".into()],
        &[scored(0, &[0.75, 0.25]), scored(1, &[0.5, 0.5]), scored(1, &[0.125, 0.875])],
    );
    assert_eq!(
        ecm.to_text(),
        "ecm model=4 labels=2 total=3\n\
         label index=0 id=1 name=Good\n\
         label index=1 id=2 name=Bad\n\
         cell true=Good predicted=Good count=1 weights=0.75\n\
         cell true=Good predicted=Bad count=0 weights=-\n\
         cell true=Bad predicted=Good count=1 weights=0.5\n\
         cell true=Bad predicted=Bad count=1 weights=0.875\n"
    );
}

#[test]
fn status_text_is_stable() {
    let b = bench(1, 0.0);
    record(&b, 0, [0.9, 0.05, 0.05], true, 0, &[("feeder", 1_000)]);
    let s = status_metrics(b.store.as_ref(), TimeRange::new(T0, T0)).unwrap();
    let zeros = |lead: &str| format!("{lead}{}", ",0".repeat(23));
    assert_eq!(
        s.to_text(),
        format!(
            "status from=1700000000000 to=1700000000000 inferences=1\n\
             histogram stage=feeder total=1 counts={}\n\
             histogram stage=balancer total=0 counts={}\n\
             histogram stage=predict total=0 counts={}\n\
             histogram stage=keeper total=0 counts={}\n\
             run stage=feeder run=100 mean_s=0.000001 count=1\n",
            zeros("1"),
            zeros("0"),
            zeros("0"),
            zeros("0")
        )
    );
}
