use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use starfm_cli::canonical;
use starfm_cli::commands::{self, RunFile};
use starfm_cli::config::ExperimentConfig;
use starfm_cli::io;
use starfm_core::shiftgen::gen_volumes_with;

fn starfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_starfm")).args(args).env_remove("STARFM_JOBS").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn vision_config(out: &Path, extra_train: &str) -> String {
    format!(
        r#"{{
  "task": "vision",
  "model": {{"kind": "linear_softmax"}},
  "shift": {{"shift_kind": "mean_shift", "magnitude": 2.0, "n_src": 300, "n_tgt": 300,
            "classes": 2, "dim": 6, "seed": 5}},
  "train": {{"epochs": 3, "learning_rate": 0.001{extra_train}}},
  "output_dir": {out:?}
}}"#
    )
}

fn medical_config(out: &Path) -> String {
    format!(
        r#"{{
  "task": "medical",
  "model": {{"kind": "voxel_linear"}},
  "volumes": {{"n_sites": 2, "volumes_per_site": 2, "edge": 16, "seed": 3}},
  "train_volumes": 1,
  "train": {{"epochs": 3, "learning_rate": 0.05}},
  "output_dir": {out:?}
}}"#
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn all_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn hashes(root: &Path) -> BTreeMap<PathBuf, String> {
    all_files(root).into_iter().map(|p| (p.clone(), io::sha256_hex(&std::fs::read(&p).unwrap()))).collect()
}

#[test]
fn gen_is_deterministic_and_manifest_complete() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, text) in [("v.json", vision_config(&tmp.path().join("v"), "")), ("m.json", medical_config(&tmp.path().join("m")))] {
        let cfg = write_config(tmp.path(), name, &text);
        let cfg = cfg.to_str().unwrap();
        assert_eq!(code(&starfm(&["gen", "--config", cfg])), 0);
        let dir = tmp.path().join(&name[..1]).join("data");
        let first = std::fs::read(dir.join(commands::MANIFEST)).unwrap();
        let before = hashes(&dir);
        assert_eq!(code(&starfm(&["gen", "--config", cfg])), 0);
        assert_eq!(std::fs::read(dir.join(commands::MANIFEST)).unwrap(), first);
        assert_eq!(hashes(&dir), before);

        let manifest: io::Manifest = serde_json::from_slice(&first).unwrap();
        let listed: Vec<String> = manifest.files.iter().map(|f| f.path.clone()).collect();
        let on_disk: Vec<String> = all_files(&dir)
            .iter()
            .map(|p| p.strip_prefix(&dir).unwrap().to_string_lossy().replace('\\', "/"))
            .filter(|p| p != commands::MANIFEST)
            .collect();
        let mut sorted = on_disk.clone();
        sorted.sort();
        assert_eq!(listed, sorted);
        for f in &manifest.files {
            assert_eq!(io::sha256_hex(&std::fs::read(dir.join(&f.path)).unwrap()), f.sha256);
        }
    }
}

#[test]
fn volumes_round_trip_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json(&medical_config(tmp.path())).unwrap();
    commands::gen(&cfg).unwrap();
    let set = gen_volumes_with(cfg.volumes.as_ref().unwrap()).unwrap();
    for (s, site) in set.sites.iter().enumerate() {
        for (v, lv) in site.iter().enumerate() {
            let stem = tmp.path().join("data").join(format!("site{s}"));
            let img = io::read_image(&stem.join(format!("vol{v:03}_image.raw"))).unwrap();
            let mask = io::read_mask(&stem.join(format!("vol{v:03}_mask.raw"))).unwrap();
            assert_eq!(img.dims, lv.image.dims);
            assert!(img.data.iter().zip(&lv.image.data).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(mask, lv.mask);
        }
    }
}

#[test]
fn corrupt_volume_header_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), "m.json", &medical_config(&tmp.path().join("run")));
    let cfg = cfg_path.to_str().unwrap();
    assert_eq!(code(&starfm(&["gen", "--config", cfg])), 0);
    let side = tmp.path().join("run/data/site1/vol000_image.json");
    let good = std::fs::read_to_string(&side).unwrap();
    for (field, bad) in [
        ("dtype", good.replace("float32", "float64")),
        ("dims", good.replacen("16", "0", 1)),
        ("byte_order", good.replace("little", "big")),
        ("spacing", good.replacen("1.0000000000000000e0", "-1.0", 1)),
    ] {
        std::fs::write(&side, &bad).unwrap();
        let o = starfm(&["train", "--config", cfg]);
        assert_eq!(code(&o), 3, "{field}: {}", stderr(&o));
        assert!(stderr(&o).contains(&format!("`{field}`")), "{field}: {}", stderr(&o));
    }
    std::fs::write(&side, &good).unwrap();
    let raw = tmp.path().join("run/data/site1/vol000_image.raw");
    let mut payload = std::fs::read(&raw).unwrap();
    payload.pop();
    std::fs::write(&raw, payload).unwrap();
    let o = starfm(&["train", "--config", cfg]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("`dims`"), "{}", stderr(&o));
}

#[test]
fn train_report_validates_against_the_published_schema() {
    let schema: Value = serde_json::from_str(include_str!("../schema/run_report.schema.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    for (name, text) in [("v.json", vision_config(&tmp.path().join("v"), "")), ("m.json", medical_config(&tmp.path().join("m")))] {
        let cfg = write_config(tmp.path(), name, &text);
        let cfg = cfg.to_str().unwrap();
        assert_eq!(code(&starfm(&["gen", "--config", cfg])), 0);
        let o = starfm(&["train", "--config", cfg]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let report: Value = serde_json::from_slice(&std::fs::read(tmp.path().join(&name[..1]).join("report.json")).unwrap()).unwrap();
        let errors: Vec<String> = validator.iter_errors(&report).map(|e| format!("{} at {}", e, e.instance_path)).collect();
        assert!(errors.is_empty(), "{errors:#?}");
    }
    // the schema rejects stray fields
    let mut report: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("v/report.json")).unwrap()).unwrap();
    report["run"]["extra"] = Value::Bool(true);
    assert!(!validator.is_valid(&report));
}

#[test]
fn report_echoes_the_config_canonically() {
    let tmp = tempfile::tempdir().unwrap();
    let text = vision_config(&tmp.path().join("run"), ", \"lambda1\": 0.4, \"lambda2\": 0.5");
    let cfg_path = write_config(tmp.path(), "v.json", &text);
    let cfg = cfg_path.to_str().unwrap();
    assert_eq!(code(&starfm(&["gen", "--config", cfg])), 0);
    assert_eq!(code(&starfm(&["train", "--config", cfg])), 0);
    let report: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("run/report.json")).unwrap()).unwrap();
    let echoed = canonical::value_to_string(&report["config"]);
    let input = canonical::to_string(&ExperimentConfig::from_json(&text).unwrap()).unwrap();
    assert_eq!(echoed.as_bytes(), input.as_bytes());
}

#[test]
fn missing_dataset_and_report_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), "v.json", &vision_config(&tmp.path().join("run"), ""));
    let cfg = cfg_path.to_str().unwrap();
    let o = starfm(&["train", "--config", cfg]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("starfm gen"), "{}", stderr(&o));
    let o = starfm(&["report", "--out", tmp.path().join("run").to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let o = starfm(&["train", "--config", tmp.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn config_errors_usage_errors_and_io_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let text = vision_config(&tmp.path().join("run"), "").replacen("\"task\"", "\"tsak\": 1, \"task\"", 1);
    let cfg_path = write_config(tmp.path(), "bad.json", &text);
    let o = starfm(&["gen", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("tsak"), "{}", stderr(&o));

    assert_eq!(code(&starfm(&[])), 1);
    assert_eq!(code(&starfm(&["gen"])), 1);
    assert_eq!(code(&starfm(&["frobnicate"])), 1);
    assert_eq!(code(&starfm(&["check", "--instances", "0"])), 1);
    assert_eq!(code(&starfm(&["--help"])), 0);

    // output directory path blocked by a regular file
    let blocker = tmp.path().join("blocked");
    std::fs::write(&blocker, b"x").unwrap();
    let cfg_path = write_config(tmp.path(), "v.json", &vision_config(&blocker.join("run"), ""));
    let o = starfm(&["gen", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn divergence_exits_4_with_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let text = vision_config(&tmp.path().join("run"), ", \"optimizer\": \"sgd\", \"lambda1\": 1e308")
        .replace("\"learning_rate\": 0.001", "\"learning_rate\": 1.0");
    let cfg_path = write_config(tmp.path(), "v.json", &text);
    let cfg = cfg_path.to_str().unwrap();
    assert_eq!(code(&starfm(&["gen", "--config", cfg])), 0);
    let o = starfm(&["train", "--config", cfg]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged at epoch"), "{}", stderr(&o));
}

#[test]
fn sweep_rows_round_trip_and_isolate_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let text = vision_config(&tmp.path().join("run"), "").replace(
        "\"output_dir\"",
        "\"sweep\": {\"lambda1_values\": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], \"lambda2_values\": [0.0]},\n  \"output_dir\"",
    );
    let cfg_path = write_config(tmp.path(), "v.json", &text);
    let cfg = cfg_path.to_str().unwrap();
    assert_eq!(code(&starfm(&["gen", "--config", cfg])), 0);
    assert_eq!(code(&starfm(&["sweep", "--config", cfg, "--jobs", "2"])), 0);
    let csv = tmp.path().join("run").join(commands::SWEEP_CSV);
    let (header, rows) = io::read_csv(&csv).unwrap();
    assert_eq!(header, ["lambda1", "lambda2", "accuracy", "ece", "dgg", "status"]);
    assert_eq!(rows.len(), 6);
    let sweep: commands::SweepFile = io::read_json(&tmp.path().join("run").join(commands::SWEEP_JSON)).unwrap();
    assert_eq!(commands::read_sweep_csv(&csv).unwrap(), sweep.rows);

    // a diverging middle point fails alone
    let cfg = ExperimentConfig::from_json(&text).unwrap();
    let mut cfg = ExperimentConfig { output_dir: tmp.path().join("run"), ..cfg };
    cfg.train.optimizer = starfm_core::trainer::OptimizerKind::Sgd;
    cfg.train.learning_rate = 1.0;
    cfg.sweep.as_mut().unwrap().lambda1_values = vec![0.0, 0.2, 1e308];
    let rows = commands::sweep(&cfg).unwrap();
    let status: Vec<bool> = rows.iter().map(|r| r.status == "ok").collect();
    assert_eq!(status, [true, true, false]);
    assert!(rows[2].status.contains("diverged"));
    assert_eq!(commands::read_sweep_csv(&csv).unwrap(), rows);
}

#[test]
fn report_bins_recompose_the_ece() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, text) in [("v.json", vision_config(&tmp.path().join("v"), "")), ("m.json", medical_config(&tmp.path().join("m")))] {
        let cfg_path = write_config(tmp.path(), name, &text);
        let cfg = cfg_path.to_str().unwrap();
        assert_eq!(code(&starfm(&["gen", "--config", cfg])), 0);
        assert_eq!(code(&starfm(&["train", "--config", cfg])), 0);
        assert_eq!(code(&starfm(&["report", "--config", cfg])), 0);
        let run = tmp.path().join(&name[..1]);
        let file: RunFile = io::read_json(&run.join(commands::REPORT)).unwrap();
        let (header, rows) = io::read_csv(&run.join(commands::RELIABILITY_CSV)).unwrap();
        assert_eq!(header, commands::RELIABILITY_HEADER);
        let mut by_split: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
        for r in rows {
            by_split.entry(r[0].clone()).or_default().push(r);
        }
        let expected: Vec<(String, f64)> = match (&file.run.classification, &file.run.segmentation) {
            (Some(c), _) => vec![("source".into(), c.source.ece), ("target".into(), c.target.ece)],
            (_, Some(s)) => s.sites.iter().map(|m| (format!("site{}", m.site), m.ece_voxel)).collect(),
            _ => unreachable!(),
        };
        assert_eq!(by_split.len(), expected.len());
        for (split, ece) in expected {
            let bins = &by_split[&split];
            assert_eq!(bins.len(), 10);
            let n: f64 = bins.iter().map(|b| b[4].parse::<f64>().unwrap()).sum();
            let recomposed: f64 = bins
                .iter()
                .map(|b| {
                    let (c, conf, acc): (f64, f64, f64) = (b[4].parse().unwrap(), b[5].parse().unwrap(), b[6].parse().unwrap());
                    c / n * (acc - conf).abs()
                })
                .sum();
            assert!((recomposed - ece).abs() < 1e-12, "{split}: {recomposed} vs {ece}");
        }
        let (header, rows) = io::read_csv(&run.join(commands::BOUNDS_CSV)).unwrap();
        assert_eq!(header, commands::BOUNDS_HEADER);
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r[4] == "true" || r[4] == "false"));
    }
}

#[test]
fn commands_are_idempotent_and_leave_inputs_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), "m.json", &medical_config(&tmp.path().join("run")));
    let cfg = cfg_path.to_str().unwrap();
    let config_bytes = std::fs::read(&cfg_path).unwrap();
    assert_eq!(code(&starfm(&["gen", "--config", cfg])), 0);
    let data = hashes(&tmp.path().join("run/data"));
    assert_eq!(code(&starfm(&["train", "--config", cfg])), 0);
    assert_eq!(code(&starfm(&["report", "--config", cfg])), 0);
    let first = hashes(&tmp.path().join("run"));
    assert_eq!(code(&starfm(&["train", "--config", cfg])), 0);
    assert_eq!(code(&starfm(&["report", "--config", cfg])), 0);
    assert_eq!(hashes(&tmp.path().join("run")), first);
    assert_eq!(hashes(&tmp.path().join("run/data")), data);
    assert_eq!(std::fs::read(&cfg_path).unwrap(), config_bytes);
    // no stray temp files
    assert!(all_files(tmp.path()).iter().all(|p| !p.strip_prefix(tmp.path()).unwrap().to_string_lossy().contains(".tmp")));
}

#[test]
fn checkpoint_restores_the_trained_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json(&vision_config(tmp.path(), "")).unwrap();
    commands::gen(&cfg).unwrap();
    commands::train(&cfg).unwrap();
    let model = io::parse_checkpoint(&std::fs::read(tmp.path().join(commands::CHECKPOINT)).unwrap()).unwrap();
    let data = commands::load_data(&cfg).unwrap();
    let commands::LoadedData::Classification(ds) = data else { panic!("vision data") };
    let again = starfm_core::trainer::train(&cfg.build_model().unwrap(), starfm_core::trainer::TrainData::Classification(&ds), &cfg.train).unwrap();
    assert_eq!(model, again.model);
}

#[test]
fn seed_and_format_flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), "v.json", &vision_config(&tmp.path().join("ignored"), ""));
    let cfg = cfg_path.to_str().unwrap();
    let out = tmp.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = starfm(&["gen", "--config", cfg, "--seed", "9", "--out", out_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!tmp.path().join("ignored").exists());
    let o = Command::new(env!("CARGO_BIN_EXE_starfm"))
        .args(["train", "--config", cfg, "--seed", "9", "--out", out_s, "--format", "json"])
        .env("STARFM_JOBS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join(commands::REPORT).exists());
    assert!(!out.join(commands::METRICS_CSV).exists());
    let file: RunFile = io::read_json(&out.join(commands::REPORT)).unwrap();
    assert_eq!(file.config.shift.unwrap().seed, 9);
    assert_eq!(file.run.seed, 9);
    // gen data for seed 9 does not match the config's own seed
    let o = starfm(&["train", "--config", cfg, "--out", out_s]);
    assert_eq!(code(&o), 3);
}

#[test]
fn check_command_passes() {
    let o = starfm(&["check", "--instances", "50", "--seed", "4"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 14, "{stdout}");
}
