//! Reconstruction metrics, the benchmark harness and the ablation grids.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Result, SciError};
use crate::forward::{compress, MaskSet, Measurement, VideoBlock};
use crate::io;
use crate::network::{reconstruct, NetworkConfig, ParameterRegistry};
use crate::prior::ConvMode;
use crate::tensor::{Scalar, Tensor};
use crate::train::{train_clips, ClipRecord, TrainingConfig};

/// Value returned when the error is negligible relative to the peak.
pub const PSNR_CAP: f64 = 100.0;

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP`] when `MSE < peak^2 * 1e-10`.
pub fn psnr<T: Scalar>(a: &[T], b: &[T], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(SciError::shape(&[a.len()], &[b.len()]));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>() / a.len() as f64;
    let p2 = peak * peak;
    if mse < p2 * 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (p2 / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, peak: 1.0 }
    }
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` image.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            rows[i * wo + j] = (0..n).map(|k| g[k] * x[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..n).map(|k| g[k] * rows[(i + k) * wo + j]).sum();
        }
    }
    out
}

/// Mean structural similarity of two `(H, W)` images over all fully
/// contained Gaussian windows.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, params: &SsimParams) -> Result<f64> {
    b.ensure_shape(a.shape())?;
    if a.shape().len() != 2 {
        return Err(SciError::InvalidArgument(format!("ssim expects 2-D images, got {:?}", a.shape())));
    }
    let (h, w) = (a.dim(0), a.dim(1));
    if h < params.window || w < params.window {
        return Err(SciError::InvalidArgument(format!(
            "image {h}x{w} is smaller than the {} pixel window",
            params.window
        )));
    }
    let g = gaussian_window(params.window, params.sigma);
    let av: Vec<f64> = a.data().iter().map(|v| v.f64()).collect();
    let bv: Vec<f64> = b.data().iter().map(|v| v.f64()).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&av, h, w, &g);
    let mu_b = filter_valid(&bv, h, w, &g);
    let aa = filter_valid(&prod(&av, &av), h, w, &g);
    let bb = filter_valid(&prod(&bv, &bv), h, w, &g);
    let ab = filter_valid(&prod(&av, &bv), h, w, &g);
    let c1 = (params.k1 * params.peak).powi(2);
    let c2 = (params.k2 * params.peak).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let (va, vb, cov) = (aa[i] - ma * ma, bb[i] - mb * mb, ab[i] - ma * mb);
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub scene: String,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// PSNR of the whole block instead of the per-frame mean.
    pub block_psnr: f64,
    pub seconds: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scores a reconstruction (clamped to `[0, 1]`) against the ground truth.
pub fn score_scene<T: Scalar>(
    scene: &str,
    x: &VideoBlock<T>,
    gt: &VideoBlock<T>,
    seconds: f64,
) -> Result<SceneResult> {
    gt.tensor().ensure_shape(x.tensor().shape())?;
    let x = x.clamp_unit();
    let params = SsimParams::default();
    let (h, w) = (x.height(), x.width());
    let mut p = Vec::new();
    let mut s = Vec::new();
    for i in 0..x.frames() {
        p.push(psnr(x.frame(i), gt.frame(i), 1.0)?);
        let fa = Tensor::from_vec(&[h, w], x.frame(i).to_vec())?;
        let fb = Tensor::from_vec(&[h, w], gt.frame(i).to_vec())?;
        s.push(ssim(&fa, &fb, &params)?);
    }
    Ok(SceneResult {
        scene: scene.to_string(),
        mean_psnr: mean(&p),
        mean_ssim: mean(&s),
        block_psnr: psnr(x.tensor().data(), gt.tensor().data(), 1.0)?,
        psnr: p,
        ssim: s,
        seconds,
    })
}

/// One benchmark scene: `<scene>/gt.ten`, `<scene>/masks.ten` and an
/// optional `<scene>/measurement.ten`.
#[derive(Clone, Debug)]
pub struct Scene {
    pub name: String,
    pub gt: VideoBlock<f32>,
    pub masks: MaskSet,
    pub measurement: Measurement<f32>,
}

pub fn load_benchmark(dir: &Path) -> Result<Vec<Scene>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| SciError::io(dir, e))? {
        let p = entry.map_err(|e| SciError::io(dir, e))?.path();
        if p.is_dir() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(SciError::InvalidArgument(format!("no scene directories in {}", dir.display())));
    }
    let mut scenes = Vec::new();
    for d in dirs {
        let gt = io::read_video::<f32>(&d.join("gt.ten"))?;
        let masks = io::read_masks(&d.join("masks.ten"))?;
        gt.tensor().ensure_shape(&masks.shape())?;
        let mpath = d.join("measurement.ten");
        let measurement = if mpath.exists() {
            let m = Measurement::new(io::read_tensor::<f32>(&mpath)?)?;
            m.tensor().ensure_shape(&[masks.height(), masks.width()])?;
            m
        } else {
            compress(&gt, &masks, None)?
        };
        let name = d.file_name().unwrap().to_string_lossy().into_owned();
        scenes.push(Scene { name, gt, masks, measurement });
    }
    Ok(scenes)
}

pub trait Reconstructor {
    fn reconstruct(&self, scene: &Scene) -> Result<VideoBlock<f32>>;
}

/// Hands back the ground truth; checks the harness end to end.
pub struct Passthrough;

impl Reconstructor for Passthrough {
    fn reconstruct(&self, scene: &Scene) -> Result<VideoBlock<f32>> {
        Ok(scene.gt.clone())
    }
}

impl Reconstructor for ParameterRegistry<f32> {
    fn reconstruct(&self, scene: &Scene) -> Result<VideoBlock<f32>> {
        reconstruct(&scene.measurement, &scene.masks, self, self.config())
    }
}

/// Loads either kind of checkpoint as a reconstructor.
pub fn load_reconstructor(dir: &Path) -> Result<Box<dyn Reconstructor>> {
    Ok(match checkpoint::load::<f32>(dir)? {
        Checkpoint::Network(reg) => reg,
        Checkpoint::Passthrough => Box::new(Passthrough),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scenes: Vec<SceneResult>,
    pub average_psnr: f64,
    pub average_ssim: f64,
    pub average_seconds: f64,
}

pub fn evaluate_scenes(rec: &dyn Reconstructor, scenes: &[Scene]) -> Result<BenchmarkReport> {
    let mut results = Vec::new();
    for scene in scenes {
        let start = Instant::now();
        let x = rec.reconstruct(scene)?;
        let seconds = start.elapsed().as_secs_f64();
        results.push(score_scene(&scene.name, &x, &scene.gt, seconds)?);
    }
    let avg = |f: fn(&SceneResult) -> f64| results.iter().map(f).sum::<f64>() / results.len() as f64;
    Ok(BenchmarkReport {
        average_psnr: avg(|r| r.mean_psnr),
        average_ssim: avg(|r| r.mean_ssim),
        average_seconds: avg(|r| r.seconds),
        scenes: results,
    })
}

pub fn evaluate_benchmark(rec: &dyn Reconstructor, dataset: &Path) -> Result<BenchmarkReport> {
    evaluate_scenes(rec, &load_benchmark(dataset)?)
}

impl BenchmarkReport {
    /// One row per scene plus `Average`: `PSNR SSIM` and seconds per measurement.
    pub fn table(&self) -> String {
        let width = self.scenes.iter().map(|s| s.scene.len()).max().unwrap_or(0).max(7);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>6}  {:>9}", "Scene", "PSNR", "SSIM", "Time(s)");
        for s in &self.scenes {
            let _ = writeln!(out, "{:<width$}  {:>8.2}  {:>6.3}  {:>9.3}", s.scene, s.mean_psnr, s.mean_ssim, s.seconds);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.2}  {:>6.3}  {:>9.3}",
            "Average", self.average_psnr, self.average_ssim, self.average_seconds
        );
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    ConvMode,
    DfmBranches,
    Dfma,
    PhaseCount,
}

impl std::str::FromStr for AblationAxis {
    type Err = SciError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv_mode" => Ok(Self::ConvMode),
            "dfm_branches" => Ok(Self::DfmBranches),
            "dfma" => Ok(Self::Dfma),
            "phase_count" => Ok(Self::PhaseCount),
            other => Err(SciError::InvalidArgument(format!(
                "unknown ablation axis {other:?} (expected conv_mode, dfm_branches, dfma or phase_count)"
            ))),
        }
    }
}

pub const PHASE_GRID: [usize; 5] = [2, 4, 6, 8, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub config: NetworkConfig,
    pub num_params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
}

fn branch_label(cfg: &NetworkConfig) -> String {
    let mut parts = vec!["3DCN".to_string()];
    parts.extend(cfg.dfm_branches.iter().map(|b| format!("DFM{b}")));
    if cfg.dfma_enabled {
        parts.push("DFMA".into());
    }
    parts.join("+")
}

/// The variant configurations of one axis, in table order.
pub fn ablation_grid(axis: AblationAxis, base: &NetworkConfig) -> Vec<(String, NetworkConfig)> {
    let with = |branches: Vec<usize>, dfma: bool| NetworkConfig { dfm_branches: branches, dfma_enabled: dfma, ..base.clone() };
    match axis {
        AblationAxis::ConvMode => [("2DCN", ConvMode::TwoD), ("3DCN", ConvMode::ThreeD)]
            .into_iter()
            .map(|(l, mode)| (l.to_string(), NetworkConfig { conv_mode: mode, ..with(vec![], false) }))
            .collect(),
        AblationAxis::DfmBranches => {
            let mut grid = vec![with(vec![], false)];
            for b in [vec![1], vec![1, 2], vec![1, 2, 3]] {
                grid.push(with(b.clone(), false));
                grid.push(with(b, true));
            }
            grid.into_iter().map(|c| (branch_label(&c), c)).collect()
        }
        AblationAxis::Dfma => {
            let branches = if base.dfm_branches.is_empty() { vec![1, 2, 3] } else { base.dfm_branches.clone() };
            [false, true].map(|d| with(branches.clone(), d)).into_iter().map(|c| (branch_label(&c), c)).collect()
        }
        AblationAxis::PhaseCount => {
            PHASE_GRID.iter().map(|&k| (format!("K={k}"), NetworkConfig { phases: k, ..base.clone() })).collect()
        }
    }
}

/// Checks that every variant adds parameters where the design says it must.
pub fn check_structure(axis: AblationAxis, variants: &[Variant]) -> Result<()> {
    let n = |i: usize| variants[i].num_params;
    let fail = |a: usize, b: usize| {
        Err(SciError::InvalidArgument(format!(
            "structural check failed: {} has {} parameters, {} has {}",
            variants[a].label,
            n(a),
            variants[b].label,
            n(b)
        )))
    };
    let pairs: Vec<(usize, usize)> = match axis {
        AblationAxis::ConvMode | AblationAxis::Dfma => vec![(0, 1)],
        AblationAxis::PhaseCount => (1..variants.len()).map(|i| (i - 1, i)).collect(),
        // rows: none, {1}, {1}+A, {1,2}, {1,2}+A, {1,2,3}, {1,2,3}+A
        AblationAxis::DfmBranches => vec![(0, 1), (1, 2), (1, 3), (3, 4), (3, 5), (5, 6)],
    };
    for (a, b) in pairs {
        if n(a) >= n(b) {
            return fail(a, b);
        }
    }
    Ok(())
}

/// Optional training budget shared by all variants.
pub struct AblationBudget<'a> {
    pub training: TrainingConfig,
    pub masks: MaskSet,
    pub train: &'a [ClipRecord],
    pub val: &'a [ClipRecord],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub variants: Vec<Variant>,
}

pub fn run_ablation(
    axis: AblationAxis,
    base: &NetworkConfig,
    budget: Option<&AblationBudget<'_>>,
    seed: u64,
) -> Result<AblationReport> {
    let mut variants = Vec::new();
    for (label, config) in ablation_grid(axis, base) {
        let reg = ParameterRegistry::<f32>::new(&config, seed)?;
        variants.push(Variant { label, num_params: reg.num_params(), config, final_loss: None, val_psnr: None });
    }
    check_structure(axis, &variants)?;
    if let Some(b) = budget {
        for v in &mut variants {
            let init = ParameterRegistry::<f32>::new(&v.config, seed)?;
            let out = train_clips(b.train, b.val, &b.training, init, &b.masks, None)?;
            v.final_loss = out.log.last().map(|r| r.loss);
            v.val_psnr = out.log.iter().rev().find_map(|r| r.val_psnr);
        }
    }
    Ok(AblationReport { axis, variants })
}

impl AblationReport {
    pub fn table(&self) -> String {
        let width = self.variants.iter().map(|v| v.label.len()).max().unwrap_or(0).max(7);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}  {:>9}", "Variant", "Params", "Loss", "PSNR");
        let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
        for v in &self.variants {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10}  {:>10}  {:>9}",
                v.label,
                v.num_params,
                opt(v.final_loss, 6),
                opt(v.val_psnr, 2)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random::<f64>())
    }

    /// Direct per-window evaluation of the structural similarity definition.
    fn ssim_reference(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (h, w) = (a.dim(0), a.dim(1));
        let n = 11;
        let mut win = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                win[i * n + j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            }
        }
        let s: f64 = win.iter().sum();
        win.iter_mut().for_each(|v| *v /= s);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for p in 0..=h - n {
            for q in 0..=w - n {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        ma += win[i * n + j] * a.data()[(p + i) * w + q + j];
                        mb += win[i * n + j] * b.data()[(p + i) * w + q + j];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let da = a.data()[(p + i) * w + q + j] - ma;
                        let db = b.data()[(p + i) * w + q + j] - mb;
                        va += win[i * n + j] * da * da;
                        vb += win[i * n + j] * db * db;
                        cov += win[i * n + j] * da * db;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_closed_forms() {
        let a = vec![0.2f64; 64];
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b: Vec<f64> = a.iter().map(|v| v + 0.5).collect();
        assert!((psnr(&a, &b, 1.0).unwrap() - 6.020599913279624).abs() < 1e-9);
        assert!((psnr(&a, &b, 2.0).unwrap() - 10.0 * (4.0f64 / 0.25).log10()).abs() < 1e-9);
        assert!(psnr(&a, &b[..10], 1.0).is_err());
    }

    #[test]
    fn psnr_matches_definition_and_is_symmetric() {
        for seed in 0..20 {
            let a = random(&[16, 16], seed);
            let b = random(&[16, 16], seed + 100);
            let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 256.0;
            let want = 10.0 * (1.0 / mse).log10();
            assert!((psnr(a.data(), b.data(), 1.0).unwrap() - want).abs() < 1e-9);
            assert_eq!(psnr(a.data(), b.data(), 1.0).unwrap(), psnr(b.data(), a.data(), 1.0).unwrap());
        }
    }

    #[test]
    fn psnr_decreases_with_error() {
        let a = vec![0.5f64; 16];
        let mut last = f64::INFINITY;
        for e in [0.01, 0.02, 0.1, 0.3] {
            let b: Vec<f64> = a.iter().map(|v| v + e).collect();
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let p = SsimParams::default();
        let a = random(&[24, 20], 1);
        assert!((ssim(&a, &a, &p).unwrap() - 1.0).abs() < 1e-9);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv, &p).unwrap() < 1.0);
        let b = random(&[24, 20], 2);
        assert_eq!(ssim(&a, &b, &p).unwrap(), ssim(&b, &a, &p).unwrap());
        assert!(ssim(&random(&[10, 20], 3), &random(&[10, 20], 4), &p).is_err());
    }

    #[test]
    fn ssim_matches_sliding_window_reference() {
        for seed in 0..20 {
            let a = random(&[16, 18], seed);
            let b = a.zip_map(&random(&[16, 18], seed + 50), |x, y| 0.7 * x + 0.3 * y).unwrap();
            let got = ssim(&a, &b, &SsimParams::default()).unwrap();
            assert!((got - ssim_reference(&a, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn scene_scores_average_frames() {
        let gt = VideoBlock::new(random(&[3, 12, 12], 5)).unwrap();
        let x = VideoBlock::new(gt.tensor().map(|v| (v + 0.05).min(1.0))).unwrap();
        let r = score_scene("s", &x, &gt, 0.0).unwrap();
        assert_eq!(r.psnr.len(), 3);
        assert!((r.mean_psnr - r.psnr.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        assert!((r.mean_ssim - r.ssim.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    fn write_bench(dir: &Path, with_measurement: bool) {
        for (i, name) in ["kobe", "aerial"].iter().enumerate() {
            let d = dir.join(name);
            let gt = VideoBlock::new(random(&[2, 12, 16], i as u64).cast::<f32>()).unwrap();
            let m = crate::forward::generate_masks(2, 12, 16, 0.5, i as u64).unwrap();
            io::write_tensor(&d.join("gt.ten"), gt.tensor()).unwrap();
            io::write_masks(&d.join("masks.ten"), &m).unwrap();
            if with_measurement {
                io::write_tensor(&d.join("measurement.ten"), compress(&gt, &m, None).unwrap().tensor()).unwrap();
            }
        }
    }

    #[test]
    fn passthrough_benchmark_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        write_bench(dir.path(), false);
        let report = evaluate_benchmark(&Passthrough, dir.path()).unwrap();
        assert_eq!(report.scenes.len(), 2);
        assert_eq!(report.scenes[0].scene, "aerial");
        for s in &report.scenes {
            assert!(s.psnr.iter().all(|&p| p == PSNR_CAP));
            assert!(s.ssim.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }
        let table = report.table();
        assert_eq!(table.lines().count(), 4);
        assert!(table.lines().last().unwrap().starts_with("Average"));
        assert!(table.contains("100.00"));
    }

    #[test]
    fn network_benchmark_runs() {
        let dir = tempfile::tempdir().unwrap();
        write_bench(dir.path(), true);
        let cfg = NetworkConfig { phases: 2, widths: [2, 2, 2], ..NetworkConfig::default() };
        let reg = ParameterRegistry::<f32>::new(&cfg, 0).unwrap();
        let a = evaluate_benchmark(&reg, dir.path()).unwrap();
        let b = evaluate_benchmark(&reg, dir.path()).unwrap();
        assert!(a.average_psnr > 0.0 && a.average_psnr < PSNR_CAP);
        assert_eq!(a.scenes[0].psnr, b.scenes[0].psnr);
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_bench(dir.path(), false);
        fs::remove_file(dir.path().join("kobe/masks.ten")).unwrap();
        assert!(evaluate_benchmark(&Passthrough, dir.path()).is_err());
    }

    #[test]
    fn ablation_grids_match_tables() {
        let base = NetworkConfig { phases: 3, widths: [4, 8, 8], ..NetworkConfig::default() };
        let conv = run_ablation(AblationAxis::ConvMode, &base, None, 0).unwrap();
        assert_eq!(conv.variants.len(), 2);
        assert!(conv.variants[0].num_params < conv.variants[1].num_params);

        let dfm = run_ablation(AblationAxis::DfmBranches, &base, None, 0).unwrap();
        let labels: Vec<_> = dfm.variants.iter().map(|v| v.label.as_str()).collect();
        assert_eq!(
            labels,
            [
                "3DCN",
                "3DCN+DFM1",
                "3DCN+DFM1+DFMA",
                "3DCN+DFM1+DFM2",
                "3DCN+DFM1+DFM2+DFMA",
                "3DCN+DFM1+DFM2+DFM3",
                "3DCN+DFM1+DFM2+DFM3+DFMA"
            ]
        );

        let k = run_ablation(AblationAxis::PhaseCount, &base, None, 0).unwrap();
        assert_eq!(k.variants.iter().map(|v| v.config.phases).collect::<Vec<_>>(), PHASE_GRID);
        assert_eq!(run_ablation(AblationAxis::Dfma, &base, None, 0).unwrap().variants.len(), 2);
        assert!("depth".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn structure_check_catches_regressions() {
        let base = NetworkConfig { phases: 2, widths: [2, 2, 2], ..NetworkConfig::default() };
        let mut report = run_ablation(AblationAxis::ConvMode, &base, None, 0).unwrap();
        report.variants.swap(0, 1);
        assert!(check_structure(AblationAxis::ConvMode, &report.variants).is_err());
    }
}
