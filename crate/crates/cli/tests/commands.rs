use std::fs;
use std::path::{Path, PathBuf};

use sci_unfold::checkpoint;
use sci_unfold::io;
use sci_unfold::train::synthetic_clips;
use sci_unfold::{NetworkConfig, ParameterRegistry};
use sci_unfold_cli::run_with;

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(args.iter().copied(), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Masks, a ground-truth tensor and a small fresh checkpoint.
fn fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let masks = dir.join("m.ten");
    let gt = dir.join("gt.ten");
    let ckpt = dir.join("ckpt");
    let (code, _, err) = run(&["genmask", "--frames", "4", "--height", "16", "--width", "16", "--seed", "3", "--out", s(&masks)]);
    assert_eq!(code, 0, "{err}");
    let clip = synthetic_clips(1, [4, 16, 16], 1).pop().unwrap();
    io::write_tensor(&gt, clip.ground_truth.tensor()).unwrap();
    let cfg = NetworkConfig { phases: 2, widths: [4, 4, 8], ..NetworkConfig::default() };
    let mut reg = ParameterRegistry::<f32>::new(&cfg, 2).unwrap();
    // non-trivial output weights so the prior does real work
    let id = reg.store().find("phase01.prior.out.weight").unwrap();
    reg.store_mut().get_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, w)| *w = 0.01 * ((i % 7) as f32 - 3.0));
    checkpoint::save(&ckpt, &reg).unwrap();
    (masks, gt, ckpt)
}

#[test]
fn simulate_then_reconstruct_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (masks, gt, ckpt) = fixture(d);
    let before = [fs::read(&masks).unwrap(), fs::read(&gt).unwrap()];

    let y = d.join("y.ten");
    let (code, _, err) = run(&["simulate", "--gt", s(&gt), "--masks", s(&masks), "--out", s(&y)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(io::read_header(&y).unwrap().1, vec![16, 16]);
    assert_eq!(io::read_header(&d.join("y.norm.ten")).unwrap().1, vec![16, 16]);

    let x1 = d.join("x1.ten");
    let x2 = d.join("x2.ten");
    for x in [&x1, &x2] {
        let args = ["reconstruct", "--ckpt", s(&ckpt), "--measurement", s(&y), "--masks", s(&masks), "--out", s(x), "--seed", "7"];
        let (code, _, err) = run(&args);
        assert_eq!(code, 0, "{err}");
    }
    assert_eq!(io::read_header(&x1).unwrap().1, vec![4, 16, 16]);
    assert_eq!(fs::read(&x1).unwrap(), fs::read(&x2).unwrap());
    assert_eq!([fs::read(&masks).unwrap(), fs::read(&gt).unwrap()], before);

    let y2 = d.join("y2.ten");
    run(&["simulate", "--gt", s(&gt), "--masks", s(&masks), "--out", s(&y2)]);
    assert_eq!(fs::read(&y).unwrap(), fs::read(&y2).unwrap());
}

#[test]
fn genmask_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    for (name, seed) in [("a.ten", "5"), ("b.ten", "5"), ("c.ten", "6")] {
        let (code, _, _) = run(&["genmask", "--frames", "2", "--height", "8", "--width", "8", "--seed", seed, "--out", s(&p(name))]);
        assert_eq!(code, 0);
    }
    assert_eq!(fs::read(p("a.ten")).unwrap(), fs::read(p("b.ten")).unwrap());
    assert_ne!(fs::read(p("a.ten")).unwrap(), fs::read(p("c.ten")).unwrap());
}

#[test]
fn evaluate_passthrough_reports_capped_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bench = d.join("bench");
    for (k, name) in ["kobe", "traffic"].iter().enumerate() {
        let scene = bench.join(name);
        fs::create_dir_all(&scene).unwrap();
        let clip = synthetic_clips(1, [4, 16, 16], k as u64).pop().unwrap();
        io::write_tensor(&scene.join("gt.ten"), clip.ground_truth.tensor()).unwrap();
        run(&["genmask", "--frames", "4", "--height", "16", "--width", "16", "--out", s(&scene.join("masks.ten"))]);
    }
    let ckpt = d.join("identity");
    checkpoint::save_passthrough(&ckpt).unwrap();
    let json = d.join("report.json");
    let (code, out, err) = run(&["evaluate", "--ckpt", s(&ckpt), "--bench", s(&bench), "--json", s(&json)]);
    assert_eq!(code, 0, "{err}");
    let rows: Vec<&str> = out.lines().filter(|l| l.starts_with("kobe") || l.starts_with("traffic")).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert!(r.contains("100.00") && r.contains("1.000"), "{r}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["average_psnr"], 100.0);
}

#[test]
fn ablate_prints_every_grid() {
    let (code, out, err) = run(&["ablate"]);
    assert_eq!(code, 0, "{err}");
    for label in ["2DCN", "3DCN", "3DCN+DFM1+DFM2+DFM3+DFMA", "K=2", "K=10"] {
        assert!(out.lines().any(|l| l.split_whitespace().next() == Some(label)), "{label} missing from\n{out}");
    }
    let (code, out, _) = run(&["ablate", "--axis", "phase_count"]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().filter(|l| l.starts_with("K=")).count(), 5);
}

#[test]
fn train_synthetic_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("cfg.json");
    fs::write(&cfg, r#"{"training": {"epochs": 2, "warmup_epochs": 1, "batch": 2, "augment": false}, "network": {"K": 1}}"#).unwrap();
    let out_dir = d.join("run");
    let log = d.join("log.jsonl");
    let args = [
        "train", "--config", s(&cfg), "--synthetic", "2", "--block", "2,8,8", "--widths", "2,2,2", "--epochs", "3",
        "--out", s(&out_dir), "--log", s(&log), "--seed", "1",
    ];
    let (code, out, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("trained 3 steps"), "{out}");
    assert!(err.contains("\"epochs\":3"), "flags override config: {err}");
    let reg = checkpoint::load_network::<f32>(&out_dir).unwrap();
    assert_eq!(reg.config().phases, 1);
    assert_eq!(reg.config().widths, [2, 2, 2]);
    assert!(out_dir.join("masks.ten").exists());
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 3);
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (masks, gt, ckpt) = fixture(d);
    let missing = d.join("nope.ten");

    let (code, _, err) = run(&["genmask", "--frames", "2", "--bogus"]);
    assert_eq!(code, 1, "{err}");
    let (code, _, _) = run(&["frobnicate"]);
    assert_eq!(code, 1);

    let (code, _, err) = run(&["simulate", "--gt", s(&missing), "--masks", s(&masks), "--out", s(&d.join("y.ten"))]);
    assert_eq!(code, 1);
    assert!(err.contains("nope.ten"), "{err}");

    let other = d.join("m8.ten");
    run(&["genmask", "--frames", "4", "--height", "8", "--width", "8", "--out", s(&other)]);
    let (code, _, err) = run(&["simulate", "--gt", s(&gt), "--masks", s(&other), "--out", s(&d.join("y.ten"))]);
    assert_eq!(code, 1);
    assert!(err.contains("m8.ten"), "{err}");

    let before = fs::read(&gt).unwrap();
    let (code, _, err) = run(&["simulate", "--gt", s(&gt), "--masks", s(&masks), "--out", s(&gt)]);
    assert_eq!(code, 1);
    assert!(err.contains("overwrite"), "{err}");
    assert_eq!(fs::read(&gt).unwrap(), before);

    let (code, _, err) = run(&["genmask", "--frames", "2", "--height", "8", "--width", "8", "--out", s(&d.join("g.ten")), "--device", "cuda"]);
    assert_eq!(code, 1);
    assert!(err.contains("cuda"));
    assert!(!d.join("g.ten").exists());

    let passthrough = d.join("pt");
    checkpoint::save_passthrough(&passthrough).unwrap();
    let y = d.join("y.ten");
    run(&["simulate", "--gt", s(&gt), "--masks", s(&masks), "--out", s(&y)]);
    let (code, _, _) = run(&["reconstruct", "--ckpt", s(&passthrough), "--measurement", s(&y), "--masks", s(&masks), "--out", s(&d.join("x.ten"))]);
    assert_eq!(code, 1);
    let (code, _, _) = run(&["reconstruct", "--ckpt", s(&ckpt), "--measurement", s(&y), "--masks", s(&other), "--out", s(&d.join("x.ten"))]);
    assert_eq!(code, 1);

    let (code, _, err) = run(&["train", "--out", s(&d.join("t")), "--synthetic", "2", "--block", "2,8"]);
    assert_eq!(code, 1, "{err}");
    let (code, _, err) = run(&["train", "--out", s(&d.join("t"))]);
    assert_eq!(code, 1);
    assert!(err.contains("--source"), "{err}");
    let (code, _, _) = run(&["ablate", "--axis", "colour"]);
    assert_eq!(code, 1);
}

#[test]
fn help_exits_cleanly() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    for sub in ["genmask", "simulate", "train", "reconstruct", "evaluate", "ablate"] {
        assert!(out.contains(sub));
    }
}
