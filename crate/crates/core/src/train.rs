//! Clip sampling, augmentation, the learning-rate schedule, Adam and the
//! training loop.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::error::{Result, SciError};
use crate::eval::psnr;
use crate::forward::{compress, gaussian_noise, generate_masks, MaskSet, VideoBlock};
use crate::graph::ParamStore;
use crate::io;
use crate::network::{reconstruct, NetworkConfig, ParameterRegistry};
use crate::tensor::{Scalar, Tensor};

/// Environment variable naming a directory for cached clip sets.
pub const CACHE_ENV: &str = "SCI_UNFOLD_CACHE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub n_clips: usize,
    /// `(T, H, W)` of each clip.
    pub block: [usize; 3],
    pub batch: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub source_dir: Option<PathBuf>,
    /// Fraction of sampled clips held out for validation PSNR.
    pub val_fraction: f64,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub augment: bool,
    pub resample_masks: bool,
    pub mask_density: f64,
    pub noise_sigma: f64,
    /// Epoch interval between checkpoints; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Step interval for per-step log records; 0 logs epochs only.
    pub log_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            n_clips: 25600,
            block: [8, 128, 128],
            batch: 4,
            epochs: 200,
            base_lr: 1.28e-4,
            warmup_epochs: 5,
            decay_factor: 0.9,
            decay_every: 10,
            seed: 0,
            source_dir: None,
            val_fraction: 0.0,
            max_steps: None,
            augment: true,
            resample_masks: false,
            mask_density: 0.5,
            noise_sigma: 0.0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            log_path: None,
            log_every: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SciError::Config(m));
        if self.n_clips == 0 || self.batch == 0 || self.epochs == 0 || self.decay_every == 0 {
            return fail("n_clips, batch, epochs and decay_every must be positive".into());
        }
        if self.block.contains(&0) {
            return fail(format!("block must be positive, got {:?}", self.block));
        }
        if self.warmup_epochs >= self.epochs {
            return fail(format!("warmup_epochs ({}) must be below epochs ({})", self.warmup_epochs, self.epochs));
        }
        if !(self.base_lr > 0.0) || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail("base_lr must be positive and decay_factor in (0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if !(0.0..=1.0).contains(&self.mask_density) || self.noise_sigma < 0.0 {
            return fail("mask_density must be in [0, 1] and noise_sigma nonnegative".into());
        }
        Ok(())
    }
}

/// Combined configuration file: `{"training": {...}, "network": {...}}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub training: TrainingConfig,
    pub network: NetworkConfig,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SciError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| SciError::Config(format!("{}: {e}", path.display())))
    }
}

/// Linear warmup from `base_lr / 5` to `base_lr`, then `decay_factor` every
/// `decay_every` epochs counted from the end of warmup.
pub fn lr_schedule(epoch: usize, cfg: &TrainingConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(SciError::InvalidArgument(format!("epoch {epoch} is outside 0..{}", cfg.epochs)));
    }
    let base = cfg.base_lr;
    if epoch < cfg.warmup_epochs {
        if cfg.warmup_epochs == 1 {
            return Ok(base);
        }
        let start = base / 5.0;
        return Ok(start + (base - start) * epoch as f64 / (cfg.warmup_epochs - 1) as f64);
    }
    let k = (epoch - cfg.warmup_epochs) / cfg.decay_every;
    Ok(base * cfg.decay_factor.powi(k as i32))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub ground_truth: VideoBlock<f32>,
    pub source: String,
    pub frame_offset: usize,
    /// Top-left corner of the crop.
    pub crop: [usize; 2],
    /// Clockwise quarter turns applied by augmentation.
    pub rotation: u8,
}

impl ClipRecord {
    pub fn id(&self) -> String {
        format!("{}@{}:{},{}r{}", self.source, self.frame_offset, self.crop[0], self.crop[1], self.rotation)
    }
}

/// Rotates every frame by `quarter_turns` clockwise right angles.
pub fn rotate(clip: &ClipRecord, quarter_turns: u8) -> ClipRecord {
    let v = &clip.ground_truth;
    let (b, h, w) = (v.frames(), v.height(), v.width());
    let q = quarter_turns % 4;
    let (ho, wo) = if q % 2 == 1 { (w, h) } else { (h, w) };
    let src = v.tensor().data();
    let data = Tensor::from_fn(&[b, ho, wo], |i| {
        let (t, p, r) = (i / (ho * wo), (i / wo) % ho, i % wo);
        let (si, sj) = match q {
            0 => (p, r),
            1 => (h - 1 - r, p),
            2 => (h - 1 - p, w - 1 - r),
            _ => (r, w - 1 - p),
        };
        src[(t * h + si) * w + sj]
    });
    ClipRecord {
        ground_truth: VideoBlock::new(data).expect("rotation keeps values finite"),
        rotation: (clip.rotation + q) % 4,
        ..clip.clone()
    }
}

/// A uniformly drawn right-angle rotation; non-square clips draw from
/// 0 and 180 degrees so the shape is kept.
pub fn augment(clip: &ClipRecord, seed: u64) -> ClipRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let square = clip.ground_truth.height() == clip.ground_truth.width();
    let q = if square { rng.random_range(0..4u8) } else { 2 * rng.random_range(0..2u8) };
    rotate(clip, q)
}

/// Mean squared difference over every element of the batch.
pub fn mse_loss<T: Scalar>(x_hat: &[VideoBlock<T>], x: &[VideoBlock<T>]) -> Result<f64> {
    if x_hat.len() != x.len() || x.is_empty() {
        return Err(SciError::shape(&[x.len()], &[x_hat.len()]));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in x_hat.iter().zip(x) {
        b.tensor().ensure_shape(a.tensor().shape())?;
        sum += a.tensor().data().iter().zip(b.tensor().data()).map(|(p, q)| (p.f64() - q.f64()).powi(2)).sum::<f64>();
        n += a.tensor().len();
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug)]
enum FrameSource {
    Png(Vec<PathBuf>),
    Tensor(PathBuf),
}

#[derive(Clone, Debug)]
struct Sequence {
    id: String,
    source: FrameSource,
    frames: usize,
    height: usize,
    width: usize,
}

/// Frame sequences found under a directory tree: every directory holding
/// PNG frames and every `(B, H, W)` `.ten` file.
#[derive(Clone, Debug)]
pub struct Corpus {
    root: PathBuf,
    sequences: Vec<Sequence>,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(SciError::Corpus(format!("{} is not a directory", root.display())));
        }
        let mut sequences = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| SciError::io(&dir, e))?
                .map(|e| e.map(|e| e.path()).map_err(|err| SciError::io(&dir, err)))
                .collect::<Result<_>>()?;
            entries.sort();
            let id_of = |p: &Path| p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned();
            let pngs = io::png_files(&dir)?;
            if let Some(first) = pngs.first() {
                let (w, h) = image::image_dimensions(first)
                    .map_err(|e| SciError::Image { path: first.clone(), source: e })?;
                let id = if dir == root { ".".into() } else { id_of(&dir) };
                sequences.push(Sequence {
                    id,
                    frames: pngs.len(),
                    source: FrameSource::Png(pngs),
                    height: h as usize,
                    width: w as usize,
                });
            }
            for p in entries {
                if p.is_dir() {
                    stack.push(p);
                } else if p.extension().is_some_and(|e| e == "ten") {
                    let (_, dims) = io::read_header(&p)?;
                    if dims.len() == 3 {
                        sequences.push(Sequence {
                            id: id_of(&p),
                            source: FrameSource::Tensor(p.clone()),
                            frames: dims[0],
                            height: dims[1],
                            width: dims[2],
                        });
                    }
                }
            }
        }
        sequences.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Self { root: root.to_path_buf(), sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    fn fingerprint(&self, cfg: &TrainingConfig) -> String {
        let mut h = Sha256::new();
        h.update(self.root.to_string_lossy().as_bytes());
        for s in &self.sequences {
            h.update(format!("{}:{}x{}x{};", s.id, s.frames, s.height, s.width).as_bytes());
        }
        h.update(format!("{:?}|{}|{}", cfg.block, cfg.n_clips, cfg.seed).as_bytes());
        hex::encode(&h.finalize()[..12])
    }
}

/// Loads frames `t0..t0 + t` of one sequence, cropped to `h x w` at `top, left`.
struct SequenceReader<'a> {
    seq: &'a Sequence,
    tensor: Option<Tensor<f32>>,
    frames: BTreeMap<usize, Vec<f32>>,
}

impl<'a> SequenceReader<'a> {
    fn new(seq: &'a Sequence) -> Self {
        Self { seq, tensor: None, frames: BTreeMap::new() }
    }

    fn frame(&mut self, i: usize) -> Result<&[f32]> {
        let plane = self.seq.height * self.seq.width;
        match &self.seq.source {
            FrameSource::Tensor(p) => {
                if self.tensor.is_none() {
                    let t = io::read_tensor::<f32>(p)?;
                    if let Some(bad) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                        return Err(SciError::Corpus(format!("{} holds {bad}, outside [0, 1]", p.display())));
                    }
                    self.tensor = Some(t);
                }
                Ok(&self.tensor.as_ref().unwrap().data()[i * plane..(i + 1) * plane])
            }
            FrameSource::Png(files) => {
                if !self.frames.contains_key(&i) {
                    let (h, w, px) = io::load_gray_png(&files[i])?;
                    if (h, w) != (self.seq.height, self.seq.width) {
                        return Err(SciError::Corpus(format!("{} is {h}x{w}, sequence is not uniform", files[i].display())));
                    }
                    self.frames.insert(i, px);
                }
                Ok(&self.frames[&i])
            }
        }
    }

    fn clip(&mut self, t0: usize, [t, h, w]: [usize; 3], [top, left]: [usize; 2]) -> Result<VideoBlock<f32>> {
        let sw = self.seq.width;
        let mut data = Vec::with_capacity(t * h * w);
        for i in t0..t0 + t {
            let f = self.frame(i)?;
            for r in top..top + h {
                data.extend_from_slice(&f[r * sw + left..r * sw + left + w]);
            }
        }
        VideoBlock::new(Tensor::from_vec(&[t, h, w], data)?)
    }
}

/// Draws `n_clips` crops (sequence, temporal offset, spatial corner) from the
/// seed and cuts them out of the corpus.
pub fn sample_clips(corpus: &Corpus, cfg: &TrainingConfig) -> Result<Vec<ClipRecord>> {
    let [t, h, w] = cfg.block;
    let eligible: Vec<usize> = (0..corpus.sequences.len())
        .filter(|&i| {
            let s = &corpus.sequences[i];
            s.frames >= t && s.height >= h && s.width >= w
        })
        .collect();
    if eligible.is_empty() {
        return Err(SciError::Corpus(format!(
            "no sequence in {} has at least {t} frames of {h}x{w}",
            corpus.root.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draws = Vec::with_capacity(cfg.n_clips);
    for _ in 0..cfg.n_clips {
        let s = &corpus.sequences[eligible[rng.random_range(0..eligible.len())]];
        let seq = eligible.iter().position(|&i| std::ptr::eq(&corpus.sequences[i], s)).unwrap();
        let t0 = rng.random_range(0..=s.frames - t);
        let top = rng.random_range(0..=s.height - h);
        let left = rng.random_range(0..=s.width - w);
        draws.push((eligible[seq], t0, [top, left]));
    }
    let mut out: Vec<Option<ClipRecord>> = vec![None; draws.len()];
    for &si in &eligible {
        let seq = &corpus.sequences[si];
        let mut reader = SequenceReader::new(seq);
        for (k, &(s, t0, crop)) in draws.iter().enumerate() {
            if s == si {
                out[k] = Some(ClipRecord {
                    ground_truth: reader.clip(t0, cfg.block, crop)?,
                    source: seq.id.clone(),
                    frame_offset: t0,
                    crop,
                    rotation: 0,
                });
            }
        }
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

#[derive(Serialize, Deserialize)]
struct CachedProvenance {
    source: String,
    frame_offset: usize,
    crop: [usize; 2],
}

/// [`sample_clips`] through the cache directory named by `SCI_UNFOLD_CACHE`.
pub fn sample_clips_cached(corpus: &Corpus, cfg: &TrainingConfig) -> Result<Vec<ClipRecord>> {
    let Some(dir) = std::env::var_os(CACHE_ENV).map(PathBuf::from) else {
        return sample_clips(corpus, cfg);
    };
    let key = corpus.fingerprint(cfg);
    let data_path = dir.join(format!("clips-{key}.ten"));
    let meta_path = dir.join(format!("clips-{key}.json"));
    if data_path.exists() && meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| SciError::io(&meta_path, e))?;
        let meta: Vec<CachedProvenance> = serde_json::from_str(&text)?;
        let all = io::read_tensor::<f32>(&data_path)?;
        let [t, h, w] = cfg.block;
        all.ensure_shape(&[meta.len(), t, h, w])?;
        let n = t * h * w;
        return meta
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                Ok(ClipRecord {
                    ground_truth: VideoBlock::new(Tensor::from_vec(&cfg.block, all.data()[i * n..(i + 1) * n].to_vec())?)?,
                    source: p.source,
                    frame_offset: p.frame_offset,
                    crop: p.crop,
                    rotation: 0,
                })
            })
            .collect();
    }
    let clips = sample_clips(corpus, cfg)?;
    let [t, h, w] = cfg.block;
    let mut all = Vec::with_capacity(clips.len() * t * h * w);
    for c in &clips {
        all.extend_from_slice(c.ground_truth.tensor().data());
    }
    io::write_tensor(&data_path, &Tensor::from_vec(&[clips.len(), t, h, w], all)?)?;
    let meta: Vec<CachedProvenance> = clips
        .iter()
        .map(|c| CachedProvenance { source: c.source.clone(), frame_offset: c.frame_offset, crop: c.crop })
        .collect();
    fs::write(&meta_path, serde_json::to_string(&meta)?).map_err(|e| SciError::io(&meta_path, e))?;
    Ok(clips)
}

/// Smooth drifting test patterns in `[0, 1]`: a few gratings and blobs
/// translating at constant velocity.
pub fn synthetic_clips(n: usize, [t, h, w]: [usize; 3], seed: u64) -> Vec<ClipRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let tau = std::f64::consts::TAU;
            let gratings: Vec<[f64; 5]> = (0..3)
                .map(|_| {
                    let ang = rng.random_range(0.0..tau);
                    let freq = rng.random_range(1.0..4.0) / h.max(w) as f64;
                    [ang.cos() * freq, ang.sin() * freq, rng.random_range(0.0..tau), rng.random_range(-0.6..0.6), rng.random_range(0.3..1.0)]
                })
                .collect();
            let blobs: Vec<[f64; 6]> = (0..3)
                .map(|_| {
                    [
                        rng.random_range(0.0..h as f64),
                        rng.random_range(0.0..w as f64),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(0.08..0.2) * h.min(w) as f64,
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect();
            let data = Tensor::from_fn(&[t, h, w], |i| {
                let (f, p, q) = ((i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64);
                let mut v = 0.0;
                for g in &gratings {
                    v += g[4] * (tau * (g[0] * p + g[1] * q) + g[2] + g[3] * f).sin();
                }
                for b in &blobs {
                    let (dp, dq) = (p - b[0] - b[2] * f, q - b[1] - b[3] * f);
                    v += 1.5 * b[5] * (-(dp * dp + dq * dq) / (2.0 * b[4] * b[4])).exp();
                }
                (0.5 + 0.18 * v).clamp(0.0, 1.0) as f32
            });
            ClipRecord {
                ground_truth: VideoBlock::new(data).expect("finite pattern"),
                source: format!("synthetic{k}"),
                frame_offset: 0,
                crop: [0, 0],
                rotation: 0,
            }
        })
        .collect()
}

/// First and second moment estimates per parameter.
pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect::<Vec<_>>();
        Self { beta1, beta2, eps, t: 0, m: zeros(), v: zeros() }
    }

    /// Parameters without a gradient still see their moments decay.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::of(lr / c1);
        let (inv_c2, eps) = (T::of(1.0 / c2), T::of(self.eps));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            let g = grads.get(i).and_then(|g| g.as_ref());
            for j in 0..p.len() {
                let gj = g.map_or(T::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                p[j] -= step * m[j] / ((v[j] * inv_c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
    pub timestamp: f64,
    /// Clip ids of the batch (per-step records only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clips: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_seeds: Option<Vec<u64>>,
}

pub struct TrainOutcome {
    pub registry: ParameterRegistry<f32>,
    pub log: Vec<LogRecord>,
    pub steps: usize,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Mean per-frame PSNR of clamped reconstructions.
pub fn validation_psnr(reg: &ParameterRegistry<f32>, clips: &[ClipRecord], masks: &MaskSet) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for c in clips {
        let y = compress(&c.ground_truth, masks, None)?;
        let x = reconstruct(&y, masks, reg, reg.config())?.clamp_unit();
        for f in 0..x.frames() {
            total += psnr(x.frame(f), c.ground_truth.frame(f), 1.0)?;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

struct LogSink {
    file: Option<fs::File>,
}

impl LogSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(d).map_err(|e| SciError::io(d, e))?;
                }
                Some(OpenOptions::new().create(true).append(true).open(p).map_err(|e| SciError::io(p, e))?)
            }
            None => None,
        };
        Ok(Self { file })
    }

    fn write(&mut self, r: &LogRecord, path: Option<&Path>) -> Result<()> {
        if let (Some(f), Some(p)) = (&mut self.file, path) {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| SciError::io(p, e))?;
        }
        Ok(())
    }
}

/// Trains `reg` on in-memory clips. `on_record` sees every log record as it
/// is produced.
pub fn train_clips(
    train: &[ClipRecord],
    val: &[ClipRecord],
    cfg: &TrainingConfig,
    mut reg: ParameterRegistry<f32>,
    masks: &MaskSet,
    mut on_record: Option<&mut dyn FnMut(&LogRecord)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(SciError::Corpus("no training clips".into()));
    }
    let shape = train[0].ground_truth.tensor().shape().to_vec();
    if masks.shape() != shape.as_slice() {
        return Err(SciError::shape(&masks.shape(), &shape));
    }
    for c in train.iter().chain(val) {
        c.ground_truth.tensor().ensure_shape(&shape)?;
    }
    let log_path = cfg.log_path.as_deref();
    let mut sink = LogSink::open(log_path)?;
    let mut adam = Adam::new(reg.store(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5c1_0f01d);
    let mut log = Vec::new();
    let mut step = 0usize;
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    let [t, h, w] = [shape[0], shape[1], shape[2]];
    let mut emit = |r: LogRecord, log: &mut Vec<LogRecord>| -> Result<()> {
        sink.write(&r, log_path)?;
        if let Some(cb) = on_record.as_mut() {
            cb(&r);
        }
        log.push(r);
        Ok(())
    };

    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            if step >= budget {
                break;
            }
            let mask_seed = rng.next_u64();
            let batch_masks = if cfg.resample_masks {
                generate_masks(t, h, w, cfg.mask_density, mask_seed)?
            } else {
                masks.clone()
            };
            let mut acc: Vec<Option<Tensor<f32>>> = vec![None; reg.store().len()];
            let mut batch_loss = 0.0;
            let mut ids = Vec::new();
            let mut noise_seeds = Vec::new();
            for &i in chunk {
                let aug_seed = rng.next_u64();
                let noise_seed = rng.next_u64();
                let clip = if cfg.augment { augment(&train[i], aug_seed) } else { train[i].clone() };
                let noise = (cfg.noise_sigma > 0.0).then(|| gaussian_noise(h, w, cfg.noise_sigma, noise_seed)).transpose()?;
                let y = compress(&clip.ground_truth, &batch_masks, noise.as_ref())?;
                let (loss, grads) = reg.loss_and_gradients(&y, &batch_masks, &clip.ground_truth)?;
                if !loss.is_finite() {
                    dump_divergence(cfg, &reg, epoch, step, lr, &clip.id())?;
                    return Err(SciError::NonFiniteLoss { epoch, step, loss: loss as f64 });
                }
                batch_loss += loss as f64;
                let scale = 1.0 / chunk.len() as f32;
                for (slot, g) in acc.iter_mut().zip(grads.into_params()) {
                    if let Some(mut g) = g {
                        g.scale(scale);
                        match slot {
                            Some(s) => s.add_assign(&g),
                            None => *slot = Some(g),
                        }
                    }
                }
                ids.push(clip.id());
                noise_seeds.push(noise_seed);
            }
            adam.step(reg.store_mut(), &acc, lr);
            step += 1;
            batch_loss /= chunk.len() as f64;
            epoch_loss += batch_loss;
            batches += 1;
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                let r = LogRecord {
                    epoch,
                    step,
                    lr,
                    loss: batch_loss,
                    val_psnr: None,
                    timestamp: now(),
                    clips: Some(ids),
                    mask_seed: cfg.resample_masks.then_some(mask_seed),
                    noise_seeds: (cfg.noise_sigma > 0.0).then_some(noise_seeds),
                };
                emit(r, &mut log)?;
            }
        }
        if batches > 0 {
            let val_psnr = if val.is_empty() { None } else { Some(validation_psnr(&reg, val, masks)?) };
            let r = LogRecord {
                epoch,
                step,
                lr,
                loss: epoch_loss / batches as f64,
                val_psnr,
                timestamp: now(),
                clips: None,
                mask_seed: None,
                noise_seeds: None,
            };
            emit(r, &mut log)?;
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_progress(cfg, &reg, epoch, step)?;
            }
        }
        if step >= budget {
            break 'epochs;
        }
    }
    if cfg.checkpoint_dir.is_some() {
        save_progress(cfg, &reg, log.last().map_or(0, |r| r.epoch), step)?;
    }
    Ok(TrainOutcome { registry: reg, log, steps: step })
}

fn save_progress(cfg: &TrainingConfig, reg: &ParameterRegistry<f32>, epoch: usize, step: usize) -> Result<()> {
    if let Some(dir) = &cfg.checkpoint_dir {
        let extra = BTreeMap::from([("epoch".to_string(), epoch.into()), ("step".to_string(), step.into())]);
        checkpoint::save_with(dir, reg, extra)?;
    }
    Ok(())
}

/// Writes the offending state next to the checkpoints (or the log).
fn dump_divergence(
    cfg: &TrainingConfig,
    reg: &ParameterRegistry<f32>,
    epoch: usize,
    step: usize,
    lr: f64,
    clip: &str,
) -> Result<()> {
    let dir = match (&cfg.checkpoint_dir, &cfg.log_path) {
        (Some(d), _) => d.join("diverged"),
        (None, Some(l)) => l.with_extension("diverged"),
        (None, None) => return Ok(()),
    };
    let extra = BTreeMap::from([
        ("epoch".to_string(), epoch.into()),
        ("step".to_string(), step.into()),
        ("lr".to_string(), lr.into()),
        ("clip".to_string(), clip.into()),
    ]);
    checkpoint::save_with(&dir, reg, extra)
}

/// Samples clips from `cfg.source_dir`, holds out `val_fraction` of them and
/// trains a freshly initialized network.
pub fn train(cfg: &TrainingConfig, net_cfg: &NetworkConfig, masks: &MaskSet) -> Result<TrainOutcome> {
    cfg.validate()?;
    let source = cfg.source_dir.as_ref().ok_or_else(|| SciError::Config("training needs source_dir".into()))?;
    let corpus = Corpus::open(source)?;
    let clips = sample_clips_cached(&corpus, cfg)?;
    let n_val = (clips.len() as f64 * cfg.val_fraction).ceil() as usize;
    let n_val = n_val.min(clips.len() - 1);
    let (train_set, val_set) = clips.split_at(clips.len() - n_val);
    let reg = ParameterRegistry::new(net_cfg, cfg.seed)?;
    train_clips(train_set, val_set, cfg, reg, masks, None)
}
