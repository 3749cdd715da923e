use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use ui2i::data::{list_images, load_ground_truth, save_image};

const TINY: &str = r#"
[model]
channels_a = 2
channels_b = 1
mode = "two-class"
base_width = 4
levels = 2
attention_levels = [2]
disc_width = 4
content_width = 8
projection_width = 8

[train]
iterations = 2
patch_size = 32
checkpoint_every = 1
median_patches = 2
"#;

fn ui2i(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ui2i")).args(args).env_remove("UI2I_SEED").output().unwrap()
}

fn ui2i_env(args: &[&str], seed: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ui2i")).args(args).env("UI2I_SEED", seed).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout).lines().filter_map(|l| serde_json::from_str(l).ok()).collect()
}

fn synth(dir: &Path, seed: Option<&str>, counts: [usize; 3]) -> Output {
    let (m, u, t) = (counts[0].to_string(), counts[1].to_string(), counts[2].to_string());
    let mut args = vec!["synth", "--out", p(dir), "--n-mixed", &m, "--n-unmixed", &u, "--n-test", &t];
    if let Some(s) = seed {
        args.extend(["--seed", s]);
    }
    ui2i(&args)
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["domainA", "domainB", "test_pairs/mixed", "test_pairs/ch1", "test_pairs/ch2"] {
        let d = dir.join(sub);
        let mut names: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for n in names {
            out.push((format!("{sub}/{}", n.file_name().unwrap().to_string_lossy()), fs::read(&n).unwrap()));
        }
    }
    out
}

#[test]
fn synth_writes_layout_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(synth(&a, Some("4"), [3, 2, 2]).status.success());
    assert!(synth(&b, Some("4"), [3, 2, 2]).status.success());
    let ta = tree_bytes(&a);
    assert_eq!(ta.len(), 3 + 2 + 2 * 3);
    assert_eq!(ta, tree_bytes(&b));
}

#[test]
fn synth_seed_falls_back_to_env() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert!(synth(&a, Some("11"), [1, 1, 1]).status.success());
    let args = ["synth", "--out", p(&b), "--n-mixed", "1", "--n-unmixed", "1", "--n-test", "1"];
    assert!(ui2i_env(&args, "11").status.success());
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    assert!(synth(&c, None, [1, 1, 1]).status.success());
    assert_ne!(tree_bytes(&a), tree_bytes(&c));

    let bad = ui2i_env(&["synth", "--out", p(&c)], "not-a-number");
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn toy_writes_panels_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ui2i(&["toy", "--out", p(tmp.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = json_lines(&out);
    let report = &lines.last().unwrap()["report"];
    let panels = report["panels"].as_array().unwrap();
    assert_eq!(panels.len(), 8);
    for panel in panels {
        assert!(tmp.path().join(panel.as_str().unwrap()).is_file());
    }
    assert!(tmp.path().join("toy.json").is_file());
    assert!(report["param_norm_spread"].as_f64().unwrap() < 1e-6);
}

#[test]
fn eval_seg_on_identical_labels_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("labels");
    fs::create_dir_all(&dir).unwrap();
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(16, 16);
    for (x, y, px) in img.enumerate_pixels_mut() {
        px.0[0] = match (x < 8, y < 8) {
            (true, true) => 1,
            (false, false) => 2,
            _ => 0,
        };
    }
    img.save(dir.join("a.png")).unwrap();
    let out = ui2i(&["eval", "seg", "--pred", p(&dir), "--gt", p(&dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json_lines(&out).into_iter().last().unwrap();
    for field in ["instance_precision", "instance_recall", "f1", "segm_quality", "panoptic_quality"] {
        assert_eq!(summary[field]["mean"].as_f64(), Some(1.0), "{field}: {summary}");
    }
}

fn save_runs(path: &Path, runs: &[(u16, u32, u32)]) {
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(64, 1);
    for &(id, lo, hi) in runs {
        for x in lo..hi {
            img.put_pixel(x, 0, image::Luma([id]));
        }
    }
    img.save(path).unwrap();
}

#[test]
fn eval_seg_hand_case() {
    // three ground-truth runs; two predictions overlap them at IoU 0.8 and 0.6
    let tmp = tempfile::tempdir().unwrap();
    let (pred, gt) = (tmp.path().join("pred"), tmp.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    save_runs(&gt.join("s.png"), &[(1, 0, 10), (2, 20, 30), (4, 50, 55)]);
    save_runs(&pred.join("s.png"), &[(1, 0, 8), (2, 20, 26), (3, 40, 45)]);
    let out = ui2i(&["eval", "seg", "--pred", p(&pred), "--gt", p(&gt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json_lines(&out).into_iter().last().unwrap();
    let get = |k: &str| summary[k]["mean"].as_f64().unwrap();
    assert!((get("instance_precision") - 2.0 / 3.0).abs() < 1e-12);
    assert!((get("instance_recall") - 2.0 / 3.0).abs() < 1e-12);
    assert!((get("segm_quality") - 0.7).abs() < 1e-12);
    assert!((get("panoptic_quality") - 0.4667).abs() < 5e-5);
}

#[test]
fn eval_pairs_reads_channel_subdirectories() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(synth(&data, Some("2"), [0, 0, 2]).status.success());
    let gt = data.join("test_pairs");
    let pred = tmp.path().join("pred");
    for path in list_images(&gt.join("mixed")).unwrap() {
        let stem = path.file_stem().unwrap().to_str().unwrap();
        let truth = load_ground_truth(&gt, stem).unwrap();
        assert_eq!(truth.channels, 2);
        save_image(&pred.join(path.file_name().unwrap()), &truth).unwrap();
    }
    let out = ui2i(&["eval", "pairs", "--pred", p(&pred), "--gt", p(&gt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 3);
    let summary = lines.last().unwrap();
    assert!(summary["psnr"]["mean"].as_f64().unwrap() >= 99.0, "{summary}");
    assert!((summary["ssim_ch2"]["mean"].as_f64().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn train_rejects_missing_domain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let missing = tmp.path().join("nope");
    let out = ui2i(&[
        "train", "--config", p(&cfg), "--domain-a", p(&missing), "--domain-b", p(&missing), "--out",
        p(&tmp.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_then_translate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(synth(&data, Some("1"), [2, 2, 2]).status.success());
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = tmp.path().join("run");
    let out = ui2i(&[
        "train", "--config", p(&cfg), "--domain-a", p(&data.join("domainA")), "--domain-b",
        p(&data.join("domainB")), "--out", p(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ck = run.join("checkpoint-2");
    assert!(ck.is_file());
    assert!(run.join("checkpoint-1").is_file());
    let log = fs::read_to_string(run.join("losses.jsonl")).unwrap();
    let rows: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for key in ["iteration", "L_adv_G", "L_adv_Dd", "L_adv_Dc", "L_cyc", "L_id", "L_cl", "total"] {
        assert!(rows[1].get(key).is_some(), "missing {key}");
    }

    // resuming to a higher count continues the same log
    let out = ui2i(&["train", "--resume", p(&ck), "--iters", "3", "--domain-a", p(&data.join("domainA")),
        "--domain-b", p(&data.join("domainB")), "--out", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoint-3").is_file());

    let translated = tmp.path().join("translated");
    let out = ui2i(&[
        "translate", "--checkpoint", p(&ck), "--input", p(&data.join("test_pairs/mixed")), "--output",
        p(&translated), "--direction", "ba",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut names: Vec<_> = fs::read_dir(&translated).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut inputs: Vec<_> = fs::read_dir(data.join("test_pairs/mixed")).unwrap().map(|e| e.unwrap().file_name()).collect();
    inputs.sort();
    assert_eq!(names, inputs);
    let first = image::open(translated.join(&names[0])).unwrap();
    let source = image::open(data.join("test_pairs/mixed").join(&names[0])).unwrap();
    // G_BA emits both channels at the input's bit depth
    assert_eq!(first.color(), image::ColorType::La16);
    assert_eq!(source.color(), image::ColorType::L16);

    // single-channel mixtures cannot feed G_AB, which expects two channels
    let bad = ui2i(&[
        "translate", "--checkpoint", p(&ck), "--input", p(&data.join("test_pairs/mixed")), "--output",
        p(&tmp.path().join("wrong")), "--direction", "ab",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}
