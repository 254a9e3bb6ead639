use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use panoseg::data::{self, load_samples, Image, Split};
use panoseg::metrics::evaluate;
use panoseg::model::{Model, ModelConfig, Preset};
use serde_json::Value;

fn panoseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panoseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn panoseg")
}

fn ok(args: &[&str]) {
    let out = panoseg(args);
    assert!(
        out.status.success(),
        "panoseg {} failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

struct Fixture {
    root: PathBuf,
    target: PathBuf,
    checkpoint: PathBuf,
}

/// Small benchmark plus a briefly trained checkpoint, shared by every test.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let cfg = root.join("bench.json");
        std::fs::write(&cfg, r#"{"train_per_domain": 2, "val_per_domain": 2, "width": 64, "height": 32}"#).unwrap();
        let bench = root.join("bench");
        ok(&["gen-data", "--out", &s(&bench), "--seed", "5", "--config", &s(&cfg)]);
        let run = root.join("train");
        ok(&[
            "train",
            "--manifest-source",
            &s(&bench.join("source-pinhole.json")),
            "--manifest-target",
            &s(&bench.join("target-panoramic.json")),
            "--out",
            &s(&run),
            "--iters",
            "3",
            "--seed",
            "1",
        ]);
        Fixture {
            target: bench.join("target-panoramic.json"),
            checkpoint: run.join("model.t4p"),
            root,
        }
    })
}

fn out_dir(name: &str) -> PathBuf {
    fixture().root.join(name)
}

#[test]
fn gen_data_writes_manifests_and_run_record() {
    let f = fixture();
    let bench = f.root.join("bench");
    for name in ["manifest.json", "source-pinhole.json", "source-synthetic.json", "target-panoramic.json", "run.json"] {
        assert!(bench.join(name).is_file(), "{name} missing");
    }
    let run = read_json(&bench.join("run.json"));
    assert_eq!(run["command"], "gen-data");
    assert_eq!(run["seed"], 5);
    assert_eq!(run["config"]["width"], 64);
    let val = load_samples(&f.target, Some(Split::Val)).unwrap();
    assert_eq!(val.len(), 2);
    assert_eq!((val[0].image.width, val[0].image.height), (64, 32));
}

#[test]
fn train_writes_checkpoint_log_and_config() {
    let run = fixture().root.join("train");
    for name in ["model.t4p", "model.json", "train_log.jsonl", "run.json"] {
        assert!(run.join(name).is_file(), "{name} missing");
    }
    let lines = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert!(lines.lines().count() >= 1);
    for l in lines.lines() {
        serde_json::from_str::<Value>(l).unwrap();
    }
    assert_eq!(read_json(&run.join("run.json"))["config"]["train"]["iters"], 3);
}

#[test]
fn zero_iterations_saves_the_initial_model() {
    let f = fixture();
    let out = out_dir("train0");
    ok(&[
        "train",
        "--manifest-source",
        &s(&f.root.join("bench/source-pinhole.json")),
        "--out",
        &s(&out),
        "--iters",
        "0",
        "--seed",
        "9",
    ]);
    let saved = Model::load(out.join("model.t4p")).unwrap();
    let fresh = Model::new(ModelConfig::preset(Preset::Toy, data::CLASS_NAMES.len()), 9).unwrap();
    assert_eq!(saved.cfg, fresh.cfg);
    // checkpoints hold f32 values
    for id in fresh.store.ids() {
        let want: Vec<f64> = fresh.store.get(id).data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(saved.store.get(id).data(), &want[..], "{}", fresh.store.name(id));
    }
}

#[test]
fn eval_matches_programmatic_evaluation() {
    let f = fixture();
    let out = out_dir("eval");
    ok(&["eval", "--checkpoint", &s(&f.checkpoint), "--manifest-target", &s(&f.target), "--out", &s(&out)]);
    let metrics = read_json(&out.join("metrics.json"));

    let model = Model::load(&f.checkpoint).unwrap();
    let val = load_samples(&f.target, Some(Split::Val)).unwrap();
    let pairs: Vec<_> = val.iter().map(|v| (&v.image, &v.labels)).collect();
    let conf = evaluate(&model, &pairs).unwrap();
    assert_eq!(metrics["miou"].as_f64(), conf.miou());
    assert_eq!(metrics["pixel_accuracy"].as_f64(), conf.pixel_accuracy());
    assert_eq!(metrics["pixels"].as_u64(), Some(conf.total()));
    let rows = metrics["confusion"].as_array().unwrap();
    for (g, row) in rows.iter().enumerate() {
        for (p, v) in row.as_array().unwrap().iter().enumerate() {
            assert_eq!(v.as_u64(), Some(conf.get(g, p)));
        }
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "class,iou");
    assert_eq!(lines.len(), 2 + data::CLASS_NAMES.len());
    assert!(lines.last().unwrap().starts_with("mean,"));
    assert_eq!(read_json(&out.join("run.json"))["command"], "eval");
}

#[test]
fn fov_sweep_full_circle_equals_eval() {
    let f = fixture();
    let out = out_dir("fov");
    ok(&[
        "fov-sweep",
        "--checkpoint",
        &s(&f.checkpoint),
        "--manifest-target",
        &s(&f.target),
        "--out",
        &s(&out),
        "--fovs",
        "180,360",
    ]);
    let csv = std::fs::read_to_string(out.join("fov_sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("fov_deg,miou,iou_ground"));
    assert_eq!(lines.len(), 3);
    let fovs: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(fovs, ["180", "360"]);

    let model = Model::load(&f.checkpoint).unwrap();
    let val = load_samples(&f.target, Some(Split::Val)).unwrap();
    let pairs: Vec<_> = val.iter().map(|v| (&v.image, &v.labels)).collect();
    let global = evaluate(&model, &pairs).unwrap().miou().unwrap();
    let full: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
    assert!((full - global).abs() < 1e-6);
}

#[test]
fn dir_miou_writes_one_row_per_direction() {
    let f = fixture();
    let out = out_dir("dir");
    ok(&[
        "dir-miou",
        "--checkpoint",
        &s(&f.checkpoint),
        "--manifest-target",
        &s(&f.target),
        "--out",
        &s(&out),
        "--dirs",
        "6",
    ]);
    let csv = std::fs::read_to_string(out.join("directional.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "direction,center_deg,miou");
    assert_eq!(lines.len(), 7);
    assert!(lines[2].starts_with("1,60,"));
}

#[test]
fn adapt_from_checkpoint_reports_before_and_after() {
    let f = fixture();
    let out = out_dir("adapt");
    ok(&[
        "adapt",
        "--manifest-source",
        &s(&f.root.join("bench/source-pinhole.json")),
        "--manifest-target",
        &s(&f.target),
        "--checkpoint",
        &s(&f.checkpoint),
        "--out",
        &s(&out),
        "--iters",
        "2",
        "--alpha",
        "0.01",
    ]);
    for name in ["model.t4p", "adapt_log.jsonl", "prototypes.json", "run.json"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let summary = read_json(&out.join("summary.json"));
    assert!(summary["target_val_miou_before"].is_number());
    assert!(summary["target_val_miou_after"].is_number());
    assert_eq!(read_json(&out.join("run.json"))["config"]["adapt"]["alpha"], 0.01);
}

#[test]
fn visualize_writes_label_maps_and_offsets() {
    let f = fixture();
    let out = out_dir("viz");
    ok(&[
        "visualize",
        "--checkpoint",
        &s(&f.checkpoint),
        "--manifest-target",
        &s(&f.target),
        "--out",
        &s(&out),
        "--limit",
        "1",
    ]);
    for name in ["000_input.ppm", "000_pred.ppm", "000_gt.ppm", "000_offsets_stage1.ppm", "000_offsets_stage4.ppm"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    assert!(!out.join("001_input.ppm").exists());
    let pred = data::load_image(out.join("000_pred.ppm")).unwrap();
    assert_eq!((pred.width, pred.height), (64, 32));
    let csv = std::fs::read_to_string(out.join("offsets.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("image,stage,y,x,dy,dx"));
    assert!(csv.lines().count() > 1);
}

#[test]
fn project_assembles_an_erp_image() {
    let input = out_dir("faces");
    std::fs::create_dir_all(&input).unwrap();
    for (k, name) in ["front", "right", "back", "left", "up", "down"].iter().enumerate() {
        let img = Image {
            width: 16,
            height: 16,
            data: vec![(40 * k) as u8; 16 * 16 * 3],
        };
        data::save_image(input.join(format!("{name}.ppm")), &img).unwrap();
    }
    let out = out_dir("erp");
    ok(&["project", "--input", &s(&input), "--out", &s(&out)]);
    let erp = data::load_image(out.join("erp.ppm")).unwrap();
    assert_eq!((erp.width, erp.height), (64, 32));
    // the top row looks straight up and the bottom row straight down
    assert_eq!(erp.data[0], 160);
    assert_eq!(*erp.data.last().unwrap(), 200);
    assert!(out.join("run.json").is_file());
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let f = fixture();
    let missing = out_dir("nope.t4p");
    let out = panoseg(&["eval", "--checkpoint", &s(&missing), "--manifest-target", &s(&f.target), "--out", &s(&out_dir("x"))]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().filter(|l| !l.is_empty()).collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    assert!(lines[0].starts_with("error: "));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let f = fixture();
    let cfg = out_dir("bad.json");
    std::fs::write(&cfg, r#"{"lerning_rate": 0.1}"#).unwrap();
    let out = panoseg(&[
        "adapt",
        "--manifest-source",
        &s(&f.root.join("bench/source-pinhole.json")),
        "--manifest-target",
        &s(&f.target),
        "--out",
        &s(&out_dir("bad")),
        "--config",
        &s(&cfg),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lerning_rate"));
}

#[test]
fn invalid_restriction_is_rejected() {
    let f = fixture();
    let out = panoseg(&[
        "train",
        "--manifest-source",
        &s(&f.root.join("bench/source-pinhole.json")),
        "--out",
        &s(&out_dir("badr")),
        "--r",
        "0",
    ]);
    assert!(!out.status.success());
}

#[test]
fn config_file_sets_model_and_training_fields() {
    let f = fixture();
    let cfg = out_dir("train_cfg.json");
    std::fs::write(&cfg, r#"{"model": {"decoder": "v1", "r": 8}, "iters": 1, "batch_size": 2}"#).unwrap();
    let out = out_dir("train_cfg");
    ok(&[
        "train",
        "--manifest-source",
        &s(&f.root.join("bench/source-pinhole.json")),
        "--out",
        &s(&out),
        "--config",
        &s(&cfg),
    ]);
    let run = read_json(&out.join("run.json"));
    assert_eq!(run["config"]["model"]["decoder"], "v1");
    assert_eq!(run["config"]["model"]["r"], 8);
    assert_eq!(run["config"]["train"]["iters"], 1);
    assert_eq!(run["config"]["train"]["batch_size"], 2);
    assert_eq!(Model::load(out.join("model.t4p")).unwrap().cfg.r, Some(8));
}
