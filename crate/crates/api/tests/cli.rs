use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hydra_api::cli::parse_label_spec;
use hydra_core::{Rgb, Severity};

struct Site {
    dir: tempfile::TempDir,
}

impl Site {
    fn new() -> Self {
        Site { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn hydra(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_hydra"))
            .args(args)
            .env("HYDRA_DB_PATH", self.path("db"))
            .env("HYDRA_IMAGE_ROOT", self.path("images"))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    /// Runs and requires success; returns stdout.
    fn ok(&self, args: &[&str]) -> String {
        let out = self.hydra(args);
        let stdout = String::from_utf8(out.stdout).unwrap();
        assert!(out.status.success(), "hydra {args:?} failed:\n{}\n{stdout}", String::from_utf8_lossy(&out.stderr));
        stdout
    }

    fn fails(&self, args: &[&str]) -> String {
        let out = self.hydra(args);
        assert!(!out.status.success(), "hydra {args:?} unexpectedly succeeded");
        String::from_utf8(out.stderr).unwrap()
    }
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {line:?}"))
}

fn write_schedule(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn label_specs() {
    let s = parse_label_spec("Dead:bad").unwrap();
    assert_eq!((s.name.as_str(), s.severity, s.color), ("Dead", Severity::Bad, Rgb::RED));
    let s = parse_label_spec("Odd:Other:#0a0B0c").unwrap();
    assert_eq!((s.severity, s.color), (Severity::Other, Rgb(10, 11, 12)));
    for bad in ["", ":good", "Good", "Good:fine", "Good:good:green", "Good:good:#12345", "Good:good:#123456:x"] {
        assert!(parse_label_spec(bad).is_err(), "{bad:?} parsed");
    }
}

#[test]
fn whole_deployment_from_the_command_line() {
    let site = Site::new();
    assert!(site.ok(&["init-schema"]).starts_with("initialized"));
    assert!(site.path("db/schema.json").exists());
    site.ok(&["init-schema"]);

    let added = site.ok(&[
        "plot-type", "add", "--name", "occupancy", "--width", "12", "--height", "12",
        "--label", "Good:good", "--label", "Dead:bad", "--label", "Hot:bad:#ff8800", "--labeler", "shifter",
    ]);
    assert_eq!(added.lines().count(), 4, "{added}");
    let listed = site.ok(&["plot-type", "list"]);
    assert!(listed.contains("name=occupancy input=12x12x1 labels=Good,Dead,Hot active_model=-"), "{listed}");

    let schedule = write_schedule(
        &site.path("train.toml"),
        "[[event]]\nstart = 20\nend = 39\nkind = \"dead_region\"\nregion = { x = 4, y = 4, width = 8, height = 8 }\n\n\
         [[event]]\nstart = 40\nend = 59\nkind = \"hot_spot\"\nregion = { x = 0, y = 0, width = 7, height = 7 }\n",
    );
    let train_dir = site.path("train");
    let sim = site.ok(&[
        "simulate", "--plot-type", "occupancy", "--frames", "60", "--schedule", &schedule, "--seed", "3",
        "--width", "16", "--height", "16", "--run", "1", "--out", train_dir.to_str().unwrap(),
    ]);
    assert_eq!(field(sim.trim(), "frames"), "60");
    assert_eq!(field(sim.trim(), "bad"), "40");

    let gt = train_dir.join("ground_truth.csv");
    let denied = site.fails(&["label-import", "--plot-type", "occupancy", "--ground-truth", gt.to_str().unwrap(), "--user", "visitor"]);
    assert!(denied.contains("visitor"), "{denied}");
    let imported =
        site.ok(&["label-import", "--plot-type", "occupancy", "--ground-truth", gt.to_str().unwrap(), "--user", "shifter"]);
    assert_eq!(field(imported.trim(), "registered"), "60");
    assert_eq!(field(imported.trim(), "labeled"), "60");
    let again =
        site.ok(&["label-import", "--plot-type", "occupancy", "--ground-truth", gt.to_str().unwrap(), "--user", "shifter"]);
    assert_eq!(field(again.trim(), "registered"), "0");

    let trained = site.ok(&[
        "train", "--plot-type", "occupancy", "--epochs", "1500", "--kernels", "8", "--seed", "1",
        "--activate", "--select-thresholds",
    ]);
    let model_line = trained.lines().find(|l| l.starts_with("model ")).unwrap();
    let model = field(model_line, "id").to_string();
    let accuracy: f64 = field(model_line, "accuracy").parse().unwrap();
    assert!(accuracy >= 0.9, "{trained}");
    assert!(trained.lines().any(|l| l.starts_with("activated model=")), "{trained}");
    assert!(trained.lines().filter(|l| l.starts_with("threshold ")).count() == 3, "{trained}");
    assert!(site.ok(&["plot-type", "list"]).contains(&format!("active_model={model}")));

    let stream_schedule = write_schedule(
        &site.path("stream.toml"),
        "[[event]]\nstart = 10\nend = 19\nkind = \"dead_region\"\nregion = { x = 4, y = 4, width = 8, height = 8 }\n",
    );
    let staging = site.path("staging");
    site.ok(&[
        "simulate", "--plot-type", "occupancy", "--frames", "20", "--schedule", &stream_schedule, "--seed", "9",
        "--width", "16", "--height", "16", "--run", "2", "--out", staging.to_str().unwrap(),
    ]);
    let input = site.path("input");
    std::fs::create_dir_all(&input).unwrap();
    for entry in std::fs::read_dir(&staging).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "pgm") {
            std::fs::rename(&path, input.join(path.file_name().unwrap())).unwrap();
        }
    }
    std::fs::write(input.join("not-a-frame.pgm"), b"P5\n").unwrap();
    let fed = site.ok(&[
        "feeder", "--input-dir", input.to_str().unwrap(), "--reject-dir", site.path("reject").to_str().unwrap(),
        "--poll-ms", "20", "--workers", "3", "--seed", "5", "--until-idle-ms", "1500",
    ]);
    assert_eq!(field(fed.trim(), "recorded"), "20", "{fed}");
    assert_eq!(field(fed.trim(), "dead_lettered"), "0");
    assert!(site.path("reject/not-a-frame.pgm").exists());

    let status = site.ok(&["analytics", "status", "--window", "3600"]);
    assert!(status.starts_with("status "), "{status}");
    assert_eq!(field(status.lines().next().unwrap(), "inferences"), "20");
    for stage in ["feeder", "balancer", "predict", "keeper"] {
        assert!(status.contains(&format!("stage={stage}")), "{status}");
    }

    let log = site.ok(&["analytics", "log", "--json"]);
    let log: serde_json::Value = serde_json::from_str(&log).unwrap();
    let entries = log["entries"].as_array().unwrap();
    assert!(entries.len() >= 8, "{log}");
    assert!(entries.windows(2).all(|w| w[0]["inferred_at"].as_i64() >= w[1]["inferred_at"].as_i64()));
    let heatmap = entries.iter().find_map(|e| e["heatmap_path"].as_str()).unwrap();
    assert!(site.path("images").join(heatmap).exists());

    let ecm = site.ok(&["analytics", "ecm", "--model", &model]);
    assert!(ecm.starts_with(&format!("ecm model={model}")), "{ecm}");
    let ecm_json: serde_json::Value = serde_json::from_str(&site.ok(&["analytics", "ecm", "--model", &model, "--json"])).unwrap();
    let total: u64 = ecm_json["cells"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .map(|c| c["count"].as_u64().unwrap())
        .sum();
    assert_eq!(total, 60);

    let diff = site.ok(&["analytics", "diff", "--model", &model]);
    assert_eq!(field(diff.lines().next().unwrap(), "evaluated"), "60", "{diff}");
    let thresholds = site.ok(&["analytics", "thresholds", "--model", &model]);
    assert_eq!(thresholds.lines().filter(|l| l.starts_with("threshold ")).count(), 3, "{thresholds}");

    assert!(site.fails(&["analytics", "ecm", "--model", "999"]).contains("999"));
}

#[test]
fn experiment_runs_from_a_config_file() {
    let site = Site::new();
    let config = site.path("experiment.toml");
    std::fs::write(
        &config,
        "seed = 3\nworkers = 2\nframe_width = 16\nframe_height = 16\n\n\
         [model]\ninput_width = 12\ninput_height = 12\nepochs = 120\nkernels = 6\n\n\
         [training]\ngood = 30\nbad = 30\nvalidation_good = 15\nvalidation_bad = 15\nregion_size = 6\n\n\
         [stream]\nframes = 30\ninterval_ms = 1000\n\n\
         [[stream.event]]\nstart = 15\nend = 29\nkind = \"dead_region\"\nregion = { x = 5, y = 5, width = 6, height = 6 }\n",
    )
    .unwrap();
    let text = site.ok(&["experiment", "--config", config.to_str().unwrap()]);
    assert!(text.contains("onset=15"), "{text}");
    let json: serde_json::Value =
        serde_json::from_str(&site.ok(&["experiment", "--config", config.to_str().unwrap(), "--json"])).unwrap();
    assert_eq!(json["frames"], 30);
    assert_eq!(json["recorded"], 30);
    assert_eq!(json["workers"], 2);

    std::fs::write(&config, "seed = 1\nunknown_key = 2\n").unwrap();
    assert!(site.fails(&["experiment", "--config", config.to_str().unwrap()]).contains("unknown"));
}

#[test]
fn missing_settings_are_reported() {
    let out = Command::new(env!("CARGO_BIN_EXE_hydra"))
        .args(["plot-type", "list"])
        .env_remove("HYDRA_DB_PATH")
        .env_remove("HYDRA_IMAGE_ROOT")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("HYDRA_DB_PATH"));

    let site = Site::new();
    let err = site.fails(&["serve", "--listen", "127.0.0.1:0"]);
    assert!(err.contains("does not exist"), "{err}");
    assert!(site.fails(&["plot-type", "add", "--name", "x", "--width", "8", "--height", "8", "--label", "Good:fine"]).contains("severity"));
}
