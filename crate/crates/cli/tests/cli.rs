use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbt_core::bench::{self, frame_errors, frame_overlaps, load_sequence, precision_curve, read_boxes, success_curve, write_boxes};
use rgbt_core::cftrack::ResponseMap;
use rgbt_core::config::Config;
use rgbt_core::fusion::{self, MfNet, TrainPair};
use rgbt_core::geom::BBox;
use rgbt_core::img::{load_image, save_image, Image};
use tempfile::TempDir;

const SMALL_NET: &str = r#"
[mfnet]
patch = 72
map_size = 32
stem_channels = [4, 8, 8]
head_channels = 8
"#;

fn rgbt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgbt")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = rgbt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn synth(dir: &Path, name: &str, scenario: Option<&str>, seed: u64) -> PathBuf {
    let out = dir.join(name);
    let seed = seed.to_string();
    let mut args = vec!["synth", "--seed", &seed, "--out", s(&out)];
    let sc_file = tempfile::Builder::new().suffix(".json").tempfile().unwrap();
    if let Some(text) = scenario {
        fs::write(sc_file.path(), text).unwrap();
        args.extend(["--scenario", s(sc_file.path())]);
    }
    ok(&args);
    out
}

#[test]
fn version_and_print_config() {
    let out = ok(&["--version"]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("rgbt "));
    let out = ok(&["--print-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(Config::from_toml_str(&text).unwrap(), Config::default());
    assert!(text.contains("q_hi = 210.0"));
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let bad = write(dir.path(), "bad.toml", "[paper]\nq_hi = 1.0\n");
    assert_eq!(rgbt(&["--config", s(&bad), "--print-config"]).status.code(), Some(2));
    let unknown = write(dir.path(), "unknown.toml", "[tracker]\nspeed = 3\n");
    assert_eq!(rgbt(&["--config", s(&unknown), "--print-config"]).status.code(), Some(2));
    assert_eq!(rgbt(&["--config", "/nonexistent/cfg.toml", "--print-config"]).status.code(), Some(2));
    assert_eq!(rgbt(&["track", "--manifest", "x.json", "--out", "o", "--ablation", "MF+TMP"]).status.code(), Some(2));
}

#[test]
fn track_writes_one_line_per_frame() {
    let dir = TempDir::new().unwrap();
    let seq = synth(dir.path(), "seq", None, 3);
    let cfg = write(dir.path(), "small.toml", SMALL_NET);
    let res = dir.path().join("res");
    ok(&["--config", s(&cfg), "track", "--manifest", s(&seq.join("manifest.json")), "--out", s(&res)]);
    let boxes = read_boxes(&res.join("synthetic.txt")).unwrap();
    assert_eq!(boxes.len(), 40);
    let text = fs::read_to_string(res.join("synthetic.txt")).unwrap();
    assert_eq!(text.lines().count(), 40);
    let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(res.join("synthetic.diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag.as_array().unwrap().len(), 40);
    assert!(diag[1]["diagnostics"]["q"].is_number());
}

#[test]
fn track_missing_manifest_exits_3() {
    let dir = TempDir::new().unwrap();
    let out = rgbt(&["track", "--manifest", s(&dir.path().join("nope.json")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out.stderr.is_empty());
}

const OCCLUSION_PAN: &str = r#"{
    "name": "occ_pan",
    "frames": 50, "width": 160, "height": 128,
    "target": [30, 50, 24, 24], "velocity": [1.0, 0.2],
    "events": [
        {"kind": "occlusion", "start": 20, "end": 28},
        {"kind": "camera_motion", "start": 35, "end": 45, "dx": -2, "dy": 1}
    ]
}"#;

#[test]
fn ablation_changes_trajectory_under_occlusion() {
    let dir = TempDir::new().unwrap();
    let seq = synth(dir.path(), "occ", Some(OCCLUSION_PAN), 1);
    let cfg = write(dir.path(), "small.toml", SMALL_NET);
    let manifest = seq.join("manifest.json");
    let mut trajectories = vec![];
    for ab in ["MF", "FULL"] {
        let res = dir.path().join(ab.replace('+', "_"));
        ok(&["--config", s(&cfg), "track", "--manifest", s(&manifest), "--out", s(&res), "--ablation", ab]);
        trajectories.push(fs::read(res.join("occ_pan.txt")).unwrap());
    }
    assert_ne!(trajectories[0], trajectories[1]);
}

fn thermal_results(dir: &Path, seq: &Path, name: &str) -> Vec<BBox> {
    let s = load_sequence(&seq.join("manifest.json")).unwrap();
    fs::create_dir_all(dir).unwrap();
    write_boxes(&dir.join(format!("{name}.txt")), &s.gt_t).unwrap();
    s.gt_t
}

#[test]
fn eval_thermal_ground_truth_is_perfect() {
    let dir = TempDir::new().unwrap();
    let seqs = dir.path().join("seqs");
    let seq = synth(&seqs, "a", None, 1);
    let res = dir.path().join("res");
    thermal_results(&res, &seq, "synthetic");
    let out = dir.path().join("ev");
    ok(&["eval", "--results", s(&res), "--manifests", s(&seqs), "--out", s(&out), "--pr-threshold", "20"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["aggregate"]["mpr"].as_f64(), Some(1.0));
    assert_eq!(m["sequences"][0]["mpr"].as_f64(), Some(1.0));
    assert!(out.join("curves.csv").is_file());
    assert!(out.join("curves/synthetic.csv").is_file());
    assert!(fs::read_to_string(out.join("attributes.csv")).unwrap().starts_with("attribute,"));
}

#[test]
fn eval_rejects_empty_and_unmatched() {
    let dir = TempDir::new().unwrap();
    let seqs = dir.path().join("seqs");
    synth(&seqs, "a", None, 1);
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = rgbt(&["eval", "--results", s(&empty), "--manifests", s(&seqs), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));

    let stray = dir.path().join("stray");
    fs::create_dir_all(&stray).unwrap();
    write(&stray, "other.txt", "1,1,5,5\n");
    let out = rgbt(&["eval", "--results", s(&stray), "--manifests", s(&seqs), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("other.txt"));
}

#[test]
fn eval_aggregate_is_frame_weighted() {
    let dir = TempDir::new().unwrap();
    let seqs = dir.path().join("seqs");
    let a = synth(&seqs, "a", Some(r#"{"name": "short", "frames": 12, "width": 96, "height": 80, "target": [30, 30, 20, 20]}"#), 1);
    let b = synth(&seqs, "b", Some(r#"{"name": "long", "frames": 30, "width": 96, "height": 80, "target": [40, 30, 16, 20]}"#), 2);
    let res = dir.path().join("res");
    fs::create_dir_all(&res).unwrap();
    // Perturbed trajectories with a spread of overlaps and errors.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut frames_ov = vec![];
    let mut frames_er = vec![];
    let mut per_seq = vec![];
    for (path, name) in [(&a, "short"), (&b, "long")] {
        let seq = load_sequence(&path.join("manifest.json")).unwrap();
        let boxes: Vec<BBox> = seq
            .gt_rgb
            .iter()
            .map(|g| BBox::new(g.x + rng.random_range(-15.0..15.0), g.y + rng.random_range(-15.0..15.0), g.w, g.h).unwrap())
            .collect();
        write_boxes(&res.join(format!("{name}.txt")), &boxes).unwrap();
        let boxes = read_boxes(&res.join(format!("{name}.txt"))).unwrap();
        let ov = frame_overlaps(&boxes, &seq).unwrap();
        let er = frame_errors(&boxes, &seq).unwrap();
        per_seq.push((success_curve(&ov).auc, ov.len()));
        frames_ov.extend(ov);
        frames_er.extend(er);
    }
    let out = dir.path().join("ev");
    ok(&["eval", "--results", s(&res), "--manifests", s(&seqs), "--out", s(&out), "--pr-threshold", "10"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    // brute-force pooled recomputation over all 42 frames
    let n = frames_ov.len() as f64;
    let mut auc = 0.0;
    for i in 0..=bench::SUCCESS_STEPS {
        let th = i as f64 / bench::SUCCESS_STEPS as f64;
        auc += frames_ov.iter().filter(|&&o| o > th).count() as f64 / n;
    }
    auc /= (bench::SUCCESS_STEPS + 1) as f64;
    let pr = frames_er.iter().filter(|&&e| e <= 10.0).count() as f64 / n;
    assert_eq!(m["aggregate"]["frames"].as_u64(), Some(42));
    assert!((m["aggregate"]["msr"].as_f64().unwrap() - auc).abs() < 1e-12);
    assert!((m["aggregate"]["mpr"].as_f64().unwrap() - pr).abs() < 1e-12);
    let weighted = per_seq.iter().map(|(a, n)| a * *n as f64).sum::<f64>() / 42.0;
    assert!((m["aggregate"]["msr"].as_f64().unwrap() - weighted).abs() < 1e-12);
    assert_eq!(precision_curve(&frames_er, 10.0).at_threshold, pr);
}

fn separable_pairs(n: usize, seed: u64) -> Vec<TrainPair> {
    let m = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = |rng: &mut ChaCha8Rng, f: &dyn Fn(f64, f64, &mut ChaCha8Rng) -> f64| {
        let mut d = vec![];
        for y in 0..m {
            for x in 0..m {
                d.push(f(x as f64, y as f64, rng));
            }
        }
        ResponseMap::new(m, m, d).unwrap()
    };
    (0..n)
        .map(|_| {
            let (cx, cy) = (rng.random_range(3.0..9.0), rng.random_range(3.0..9.0));
            let y = map(&mut rng, &|x, yy, _| (-((x - cx).powi(2) + (yy - cy).powi(2)) / 4.0).exp());
            let noise = map(&mut rng, &|_, _, r| r.random_range(0.0..0.5));
            let patch = |rng: &mut ChaCha8Rng| Image::from_fn(72, 72, |_, _| rng.random_range(0.0..1.0));
            TrainPair {
                p_rgb: patch(&mut rng),
                p_t: patch(&mut rng),
                r_rgb: y.clone(),
                y,
                r_t: noise,
            }
        })
        .collect()
}

const TRAIN_NET: &str = r#"
[mfnet]
patch = 72
map_size = 12
stem_channels = [4, 8, 8]
head_channels = 8
seed = 3
[cf]
window_cells = 12
"#;

fn loss_trace(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn train_fusion_halves_loss_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let pairs = dir.path().join("pairs");
    fusion::save_pairs(&pairs, &separable_pairs(16, 15)).unwrap();
    let cfg = write(
        dir.path(),
        "train.toml",
        &format!("{TRAIN_NET}\n[train]\nepochs = [10, 10, 5]\n[paper]\nlr = [0.002, 0.05, 0.01]\n"),
    );
    let (c1, c2) = (dir.path().join("a/net.ckpt"), dir.path().join("b/net.ckpt"));
    ok(&["--config", s(&cfg), "train-fusion", "--pairs", s(&pairs), "--out", s(&c1)]);
    ok(&["--config", s(&cfg), "train-fusion", "--pairs", s(&pairs), "--out", s(&c2)]);
    assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());
    let loss = loss_trace(&dir.path().join("a/net.loss.csv"));
    assert_eq!(loss.len(), 25);
    assert!(loss.last().unwrap() < &(0.5 * loss[0]), "{loss:?}");
    assert_eq!(fs::read(dir.path().join("a/net.loss.csv")).unwrap(), fs::read(dir.path().join("b/net.loss.csv")).unwrap());
}

#[test]
fn train_fusion_zero_epochs_keeps_initialization() {
    let dir = TempDir::new().unwrap();
    let pairs = dir.path().join("pairs");
    fusion::save_pairs(&pairs, &separable_pairs(4, 16)).unwrap();
    let cfg = write(dir.path(), "zero.toml", &format!("{TRAIN_NET}\n[train]\nepochs = [0, 0, 0]\n"));
    let ck = dir.path().join("net.ckpt");
    ok(&["--config", s(&cfg), "train-fusion", "--pairs", s(&pairs), "--out", s(&ck)]);
    let init = MfNet::new(&Config::load(&cfg).unwrap().mfnet).unwrap();
    assert_eq!(fs::read(&ck).unwrap(), init.to_bytes());
}

#[test]
fn train_fusion_empty_dataset_fails() {
    let dir = TempDir::new().unwrap();
    let pairs = dir.path().join("pairs");
    fs::create_dir_all(&pairs).unwrap();
    let out = rgbt(&["train-fusion", "--pairs", s(&pairs), "--out", s(&dir.path().join("n.ckpt"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty dataset"));
}

#[test]
fn pairs_then_train_round_trip() {
    let dir = TempDir::new().unwrap();
    let seq = synth(dir.path(), "seq", None, 2);
    let cfg = write(dir.path(), "c.toml", &format!("{SMALL_NET}\n[train]\nepochs = [1, 1, 1]\npairs_per_sequence = 4\n"));
    let pairs = dir.path().join("pairs");
    ok(&["--config", s(&cfg), "pairs", "--manifest", s(&seq.join("manifest.json")), "--out", s(&pairs)]);
    assert_eq!(fusion::load_pairs(&pairs).unwrap().len(), 4);
    ok(&["--config", s(&cfg), "train-fusion", "--pairs", s(&pairs), "--out", s(&dir.path().join("n.ckpt"))]);
    assert_eq!(loss_trace(&dir.path().join("n.loss.csv")).len(), 3);
}

fn textured(w: usize, h: usize, seed: u64, channels: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..w * h * channels).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::new(w, h, channels, data).unwrap()
}

/// Checkpoint whose heads saturate the sigmoid, so every fused weight is 1.
fn visible_only_checkpoint(path: &Path) {
    let cfg = Config::from_toml_str(TRAIN_NET).unwrap().mfnet;
    let mut net = MfNet::new(&cfg).unwrap();
    net.zero_final_layers();
    for global in [true, false] {
        let head = if global { net.global_head_mut() } else { net.local_head_mut() };
        let last = head.layers_mut().iter_mut().rev().find_map(|l| l.params_mut()).unwrap();
        last.bias.iter_mut().for_each(|b| *b = 60.0);
    }
    net.save(path).unwrap();
}

#[test]
fn fuse_with_saturated_weights_returns_visible() {
    let dir = TempDir::new().unwrap();
    let (rgb, t) = (dir.path().join("rgb.png"), dir.path().join("t.png"));
    save_image(&rgb, &textured(50, 40, 1, 3)).unwrap();
    save_image(&t, &textured(50, 40, 2, 1)).unwrap();
    let ck = dir.path().join("one.ckpt");
    visible_only_checkpoint(&ck);
    let out = dir.path().join("f.png");
    ok(&["fuse", "--rgb", s(&rgb), "--t", s(&t), "--checkpoint", s(&ck), "--out", s(&out)]);
    let gray = rgbt_core::img::to_gray(&load_image(&rgb).unwrap());
    let expect = dir.path().join("gray.png");
    save_image(&expect, &gray).unwrap();
    assert_eq!(load_image(&out).unwrap(), load_image(&expect).unwrap());
}

#[test]
fn fuse_metrics_on_identical_inputs() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("x.png");
    save_image(&p, &textured(64, 48, 3, 1)).unwrap();
    let out = dir.path().join("f.png");
    let o = ok(&["--config", s(&write(dir.path(), "c.toml", TRAIN_NET)), "fuse", "--rgb", s(&p), "--t", s(&p), "--out", s(&out), "--metrics"]);
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((m["ssim_rgb"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((m["ssim_t"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let fused = load_image(&out).unwrap();
    assert!(fused.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(fused, load_image(&p).unwrap());
}

#[test]
fn fuse_rejects_size_mismatch() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    save_image(&a, &textured(30, 20, 1, 3)).unwrap();
    save_image(&b, &textured(20, 30, 2, 1)).unwrap();
    let out = rgbt(&["fuse", "--rgb", s(&a), "--t", s(&b), "--out", s(&dir.path().join("f.png"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn synth_outputs_load_and_repeat() {
    let dir = TempDir::new().unwrap();
    let a = synth(dir.path(), "a", None, 9);
    let b = synth(dir.path(), "b", None, 9);
    let seq = load_sequence(&a.join("manifest.json")).unwrap();
    assert_eq!(seq.len(), 40);
    for f in ["manifest.json", "truth.json", "gt_rgb.txt", "gt_t.txt", "rgb/000000.png", "t/000039.png"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn synth_sidecar_lists_occluded_frames() {
    let dir = TempDir::new().unwrap();
    let seq = synth(dir.path(), "occ", Some(OCCLUSION_PAN), 1);
    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(seq.join("truth.json")).unwrap()).unwrap();
    let occ: Vec<u64> = truth["occluded"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(occ, (20..28).collect::<Vec<u64>>());
    assert_eq!(truth["transforms"].as_array().unwrap().len(), 50);
}

#[test]
fn synth_rejects_invalid_scenario() {
    let dir = TempDir::new().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"frames": 10, "width": 64, "height": 64, "target": [60, 60, 20, 20]}"#);
    let out = rgbt(&["synth", "--scenario", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    let typo = write(dir.path(), "typo.json", r#"{"frames": 10, "width": 64, "height": 64, "target": [10, 10, 20, 20], "colour": 1}"#);
    let out = rgbt(&["synth", "--scenario", s(&typo), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
}
