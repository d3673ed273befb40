use super::*;
use crate::image::{Format, Image};
use crate::ingest::parse_filename;

fn spec() -> StreamSpec {
    StreamSpec::new("occupancy", 16, 12, 3)
}

fn dead(start: u64, end: u64) -> FailureEvent {
    FailureEvent { start, end, kind: FailureKind::DeadRegion, region: Region { x: 2, y: 3, width: 4, height: 5 }, period: None }
}

#[test]
fn empty_schedule_is_all_good() {
    let dir = tempfile::tempdir().unwrap();
    let rows = generate_stream(&spec(), 20, &FailureSchedule::default(), dir.path()).unwrap();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r.truth == Truth::Good));
}

#[test]
fn dead_region_pixels_are_zero() {
    let dir = tempfile::tempdir().unwrap();
    let schedule = FailureSchedule::new(vec![dead(5, 9)]).unwrap();
    let rows = generate_stream(&spec(), 12, &schedule, dir.path()).unwrap();
    for r in &rows {
        let img = Image::decode(&std::fs::read(dir.path().join(&r.file)).unwrap(), Format::Pgm).unwrap();
        let in_window = (5..=9).contains(&r.index);
        assert_eq!(r.truth, if in_window { Truth::Dead } else { Truth::Good });
        for y in 3..8 {
            for x in 2..6 {
                if in_window {
                    assert_eq!(img.get(x, y, 0), 0.0);
                }
            }
        }
        if !in_window {
            // the floor sits near 0.3, far from zero after noise
            assert!((3..8).flat_map(|y| (2..6).map(move |x| (x, y))).any(|(x, y)| img.get(x, y, 0) > 0.0));
        }
    }
}

#[test]
fn hot_spot_saturates() {
    let schedule = FailureSchedule::new(vec![FailureEvent { kind: FailureKind::HotSpot, ..dead(0, 0) }]).unwrap();
    let img = spec().frame(0, &schedule.effects(0));
    assert_eq!(img.get(2, 3, 0), 1.0);
    assert_eq!(schedule.truth(0), Truth::Hot);
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let schedule = FailureSchedule::new(vec![dead(3, 6)]).unwrap();
    let ra = generate_stream(&spec(), 10, &schedule, a.path()).unwrap();
    generate_stream(&spec(), 10, &schedule, b.path()).unwrap();
    for r in &ra {
        assert_eq!(std::fs::read(a.path().join(&r.file)).unwrap(), std::fs::read(b.path().join(&r.file)).unwrap());
    }
    assert_eq!(
        std::fs::read(a.path().join(GROUND_TRUTH_FILE)).unwrap(),
        std::fs::read(b.path().join(GROUND_TRUTH_FILE)).unwrap()
    );
    let other = StreamSpec { seed: 4, ..spec() };
    assert_ne!(other.base_frame(0), spec().base_frame(0));
}

#[test]
fn frames_differ_between_runs_and_indices() {
    let s = spec();
    assert_ne!(s.base_frame(0), s.base_frame(1));
    assert_ne!(s.base_frame(0), StreamSpec { run_number: 2, ..s.clone() }.base_frame(0));
}

#[test]
fn ground_truth_round_trips_and_names_parse() {
    let dir = tempfile::tempdir().unwrap();
    let s = StreamSpec { run_number: 42, ..spec() };
    let rows = generate_stream(&s, 15, &FailureSchedule::new(vec![dead(10, 14)]).unwrap(), dir.path()).unwrap();
    let back = read_ground_truth(&dir.path().join(GROUND_TRUTH_FILE)).unwrap();
    assert_eq!(back, rows);
    for r in &rows {
        let f = parse_filename(&r.file).unwrap();
        assert_eq!((f.plot_type_name.as_str(), f.run_number, f.sequence, f.capture_time_ms), ("occupancy", 42, r.index, r.capture_time_ms));
    }
}

#[test]
fn flicker_alternates() {
    let e = FailureEvent { kind: FailureKind::Flicker, period: Some(4), ..dead(10, 30) };
    let s = FailureSchedule::new(vec![e]).unwrap();
    let truths: Vec<Truth> = (10..18).map(|i| s.truth(i)).collect();
    use Truth::{Dead as D, Good as G};
    assert_eq!(truths, [D, D, G, G, D, D, G, G]);
    assert_eq!(s.truth(9), G);
    assert_eq!(s.truth(31), G);
}

#[test]
fn invalid_schedules_rejected() {
    let flicker = FailureEvent { kind: FailureKind::Flicker, ..dead(0, 5) };
    assert!(FailureSchedule::new(vec![flicker]).is_err());
    assert!(FailureSchedule::new(vec![FailureEvent { period: Some(1), ..flicker }]).is_err());
    assert!(FailureSchedule::new(vec![FailureEvent { period: Some(3), ..dead(0, 5) }]).is_err());
    assert!(FailureSchedule::new(vec![dead(6, 5)]).is_err());
    let empty = FailureEvent { region: Region { x: 0, y: 0, width: 0, height: 3 }, ..dead(0, 1) };
    assert!(FailureSchedule::new(vec![empty]).is_err());
}

#[test]
fn schedule_toml() {
    let s = FailureSchedule::from_toml(
        r#"
[[event]]
start = 4
end = 8
kind = "hot_spot"
region = { x = 1, y = 1, width = 2, height = 2 }

[[event]]
start = 2
end = 20
kind = "flicker"
period = 6
region = { x = 0, y = 0, width = 3, height = 3 }
"#,
    )
    .unwrap();
    assert_eq!(s.events.len(), 2);
    assert_eq!(s.onset(), Some(2));
    assert!(FailureSchedule::from_toml("[[event]]\nstart=1\nend=2\nkind=\"melt\"\nregion={x=0,y=0,width=1,height=1}").is_err());
}

#[test]
fn experiment_config_defaults_and_overrides() {
    let c = ExperimentConfig::from_toml("").unwrap();
    assert_eq!(c, ExperimentConfig::default());
    let c = ExperimentConfig::from_toml(
        "seed = 9\nworkers = 2\n[stream]\nframes = 40\n[[stream.event]]\nstart = 20\nend = 39\nkind = \"dead_region\"\nregion = { x = 0, y = 0, width = 8, height = 8 }\n",
    )
    .unwrap();
    assert_eq!((c.seed, c.workers, c.stream.frames), (9, 2, 40));
    assert_eq!(c.schedule().unwrap().onset(), Some(20));
    assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
}

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        frame_width: 16,
        frame_height: 16,
        model: ModelConfig { input_width: 12, input_height: 12, epochs: 150, ..Default::default() },
        training: TrainingConfig { good: 30, bad: 30, validation_good: 15, validation_bad: 15, region_size: 6 },
        ..Default::default()
    };
    c.stream.frames = 40;
    c.stream.events = vec![FailureEvent {
        start: 20,
        end: 39,
        kind: FailureKind::DeadRegion,
        region: Region { x: 5, y: 5, width: 6, height: 6 },
        period: None,
    }];
    c
}

#[test]
fn small_experiment_detects_dead_region() {
    let r = run_experiment(&small()).unwrap();
    assert_eq!(r.recorded, 40);
    assert_eq!(r.training_accuracy, 1.0);
    assert_eq!(r.onset, Some(20));
    assert!(r.detection_latency_frames.unwrap() <= 5, "{}", r.to_text());
    assert_eq!(r.confirmed_bad_before_onset, 0);
    assert_eq!(r.rows.iter().map(|r| r.frame).collect::<Vec<_>>(), (0..40).collect::<Vec<_>>());
    assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 40);
    assert_eq!(r.stage_latency.len(), 4);
    assert!(r.stage_latency.iter().all(|s| s.count == 40));
    assert_eq!(r.predict_dead_letters, 0);
}

#[test]
fn experiment_rows_independent_of_worker_count() {
    let one = run_experiment(&ExperimentConfig { workers: 1, ..small() }).unwrap();
    let four = run_experiment(&ExperimentConfig { workers: 4, ..small() }).unwrap();
    let key = |r: &ExperimentReport| r.rows.iter().map(|x| (x.frame, x.classification.clone(), x.confirmed, x.collect_reason)).collect::<Vec<_>>();
    assert_eq!(key(&one), key(&four));
}

#[test]
fn experiment_with_persistent_store() {
    let dir = tempfile::tempdir().unwrap();
    let c = ExperimentConfig { work_dir: Some(dir.path().to_path_buf()), persist_store: true, ..small() };
    let r = run_experiment(&c).unwrap();
    assert_eq!(r.recorded, 40);
    assert!(dir.path().join("store").is_dir());
    assert!(r.to_text().contains("detection frames=40 recorded=40"));
}
