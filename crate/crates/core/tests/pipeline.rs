use std::fs;

use sci_unfold::checkpoint;
use sci_unfold::eval::{evaluate_benchmark, load_reconstructor};
use sci_unfold::forward::generate_masks;
use sci_unfold::io;
use sci_unfold::train::{synthetic_clips, train, LogRecord, TrainingConfig};
use sci_unfold::NetworkConfig;

#[test]
fn corpus_to_checkpoint_to_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for (k, seq) in synthetic_clips(3, [10, 24, 24], 40).into_iter().enumerate() {
        io::save_png_frames(&root.join(format!("corpus/seq{k}")), &seq.ground_truth).unwrap();
    }
    let training = TrainingConfig {
        n_clips: 6,
        block: [4, 16, 16],
        batch: 2,
        epochs: 4,
        warmup_epochs: 1,
        base_lr: 1e-3,
        val_fraction: 0.2,
        source_dir: Some(root.join("corpus")),
        checkpoint_dir: Some(root.join("ckpt")),
        log_path: Some(root.join("train.jsonl")),
        ..TrainingConfig::default()
    };
    let net = NetworkConfig { phases: 2, widths: [4, 4, 8], ..NetworkConfig::default() };
    let masks = generate_masks(4, 16, 16, 0.5, 41).unwrap();
    let out = train(&training, &net, &masks).unwrap();
    // two of the six clips are held out: 2 batches per epoch
    assert_eq!(out.steps, 4 * 2);
    assert!(out.log.iter().all(|r| r.val_psnr.is_some_and(f64::is_finite)));
    let lines: Vec<LogRecord> = fs::read_to_string(root.join("train.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, out.log);

    let bench = root.join("bench");
    for (k, clip) in synthetic_clips(2, [4, 20, 28], 42).into_iter().enumerate() {
        let scene = bench.join(format!("scene{k}"));
        io::write_tensor(&scene.join("gt.ten"), clip.ground_truth.tensor()).unwrap();
        io::write_masks(&scene.join("masks.ten"), &generate_masks(4, 20, 28, 0.5, 43 + k as u64).unwrap()).unwrap();
    }
    let rec = load_reconstructor(&root.join("ckpt")).unwrap();
    let report = evaluate_benchmark(rec.as_ref(), &bench).unwrap();
    assert_eq!(report.scenes.len(), 2);
    assert!(report.average_psnr.is_finite() && report.average_psnr > 5.0);
    assert!(report.table().lines().last().unwrap().starts_with("Average"));

    let direct = evaluate_benchmark(&out.registry, &bench).unwrap();
    assert_eq!(direct.average_psnr, report.average_psnr);
    let manifest = checkpoint::read_manifest(&root.join("ckpt")).unwrap();
    assert_eq!(manifest.extra["step"], 8);
}
