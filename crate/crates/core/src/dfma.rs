//! Dense feature map adaption: per-location filters generated from the
//! normalized measurement measure how well each feature location agrees with
//! the measurement, and a sigmoid of that similarity gates the feature map.

use rand::Rng;

use crate::error::{Result, SciError};
use crate::forward::NormalizedMeasurement;
use crate::graph::{Ctx, Eval, ParamStore};
use crate::kernels;
use crate::layers::{Conv, Init};
use crate::prior::{DenseFeatureMap, DFM_SCALES};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_FILTER_SIZE: usize = 3;

/// Per-location, per-channel kernels, shape `(H, W, C, nf, nf)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterField<T> {
    theta: Tensor<T>,
}

impl<T: Scalar> FilterField<T> {
    pub fn new(theta: Tensor<T>) -> Result<Self> {
        let s = theta.shape();
        if s.len() != 5 || s[3] != s[4] || s[3] % 2 == 0 {
            return Err(SciError::InvalidArgument(format!(
                "filter field must be (H, W, C, nf, nf) with odd nf, got {s:?}"
            )));
        }
        if !theta.all_finite() {
            return Err(SciError::InvalidArgument("filter field has non-finite values".into()));
        }
        Ok(Self { theta })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.theta
    }

    pub fn height(&self) -> usize {
        self.theta.dim(0)
    }

    pub fn width(&self) -> usize {
        self.theta.dim(1)
    }

    pub fn channels(&self) -> usize {
        self.theta.dim(2)
    }

    pub fn nf(&self) -> usize {
        self.theta.dim(3)
    }

    pub fn half_width(&self) -> usize {
        self.nf() / 2
    }

    /// `theta(p, q, c, u, v)` with `u, v` in `-z..=z`.
    pub fn get(&self, p: usize, q: usize, c: usize, u: isize, v: isize) -> T {
        let (w, ch, nf, z) = (self.width(), self.channels(), self.nf(), self.half_width() as isize);
        let (a, b) = ((u + z) as usize, (v + z) as usize);
        self.theta.data()[(((p * w + q) * ch + c) * nf + a) * nf + b]
    }

    /// Generator output layout `(C*nf*nf, 1, H, W)`.
    pub fn from_planes(planes: &Tensor<T>, channels: usize, nf: usize) -> Result<Self> {
        let s = planes.shape();
        if s.len() != 4 || s[0] != channels * nf * nf || s[1] != 1 {
            return Err(SciError::shape(&[channels * nf * nf, 1, 0, 0], s));
        }
        let (h, w, taps) = (s[2], s[3], nf * nf);
        let theta = Tensor::from_fn(&[h, w, channels, nf, nf], |i| {
            let tap = i % taps;
            let c = (i / taps) % channels;
            let pq = i / (taps * channels);
            planes.data()[(c * taps + tap) * h * w + pq]
        });
        Self::new(theta)
    }

    pub fn to_planes(&self) -> Tensor<T> {
        let (h, w, ch, taps) = (self.height(), self.width(), self.channels(), self.nf() * self.nf());
        Tensor::from_fn(&[ch * taps, 1, h, w], |i| {
            let pq = i % (h * w);
            let ct = i / (h * w);
            self.theta.data()[(pq * ch + ct / taps) * taps + ct % taps]
        })
    }
}

/// `S(p, q, c)`, shape `(H, W, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap<T> {
    s: Tensor<T>,
}

impl<T: Scalar> SimilarityMap<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.s
    }

    pub fn get(&self, p: usize, q: usize, c: usize) -> T {
        let (w, ch) = (self.s.dim(1), self.s.dim(2));
        self.s.data()[(p * w + q) * ch + c]
    }

    fn from_planes(planes: &Tensor<T>) -> Self {
        let s = planes.shape();
        let (c, h, w) = (s[0], s[2], s[3]);
        Self { s: Tensor::from_fn(&[h, w, c], |i| planes.data()[(i % c) * h * w + i / c]) }
    }
}

/// One spatially variant filter generator: a 3x3 convolution from the
/// pooled measurement to `C*nf*nf` planes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilterGenerator {
    pub conv: Conv,
    pub channels: usize,
    pub nf: usize,
    pub scale: usize,
}

impl FilterGenerator {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        nf: usize,
        scale: usize,
        rng: &mut R,
    ) -> Self {
        let conv = Conv::register(store, name, 1, channels * nf * nf, [1, 3, 3], 1, Init::Kaiming, rng);
        Self { conv, channels, nf, scale }
    }

    /// `ybar_j` is `(1, 1, H_j, W_j)`; returns planes `(C*nf*nf, 1, H_j, W_j)`.
    pub fn planes<T: Scalar, C: Ctx<T>>(&self, ctx: &mut C, ybar_j: &C::Var) -> C::Var {
        self.conv.forward(ctx, ybar_j)
    }

    /// `sigmoid(S) * F` for one entry `f` of shape `(C, T, H_j, W_j)`.
    pub fn gate<T: Scalar, C: Ctx<T>>(&self, ctx: &mut C, f: &C::Var, ybar_j: &C::Var) -> C::Var {
        let theta = self.planes(ctx, ybar_j);
        let fbar = ctx.mean_time(f);
        let s = ctx.similarity(&fbar, &theta, self.nf);
        let g = ctx.sigmoid(&s);
        ctx.gate(&g, f)
    }
}

/// Generators for the enabled entries of the dense feature map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DfmaModule {
    pub generators: [Option<FilterGenerator>; 3],
}

impl DfmaModule {
    /// `channels[m]` is the channel count of entry `m`.
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: [usize; 3],
        enabled: [bool; 3],
        nf: usize,
        rng: &mut R,
    ) -> Self {
        let mut generators = [None, None, None];
        for m in 0..3 {
            if enabled[m] {
                let name = format!("{prefix}.gen{}", m + 1);
                generators[m] = Some(FilterGenerator::register(store, &name, channels[m], nf, DFM_SCALES[m], rng));
            }
        }
        Self { generators }
    }

    /// `pyramid[j - 1]` holds `ybar` at scale `j` as `(1, 1, H_j, W_j)`.
    /// Entries without a generator pass through unchanged.
    pub fn adapt<T: Scalar, C: Ctx<T>>(&self, ctx: &mut C, f: &[C::Var; 3], pyramid: &[C::Var; 3]) -> [C::Var; 3] {
        let mut out = f.clone();
        for (m, gen) in self.generators.iter().enumerate() {
            if let Some(gen) = gen {
                out[m] = gen.gate(ctx, &f[m], &pyramid[gen.scale - 1]);
            }
        }
        out
    }
}

/// `ybar` average-pooled to scales 1, 2, 3, each as `(1, 1, H_j, W_j)`.
pub fn measurement_pyramid<T: Scalar>(ybar: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
    let (h, w) = (ybar.dim(0), ybar.dim(1));
    if ybar.shape().len() != 2 || h % 4 != 0 || w % 4 != 0 {
        return Err(SciError::InvalidArgument(format!(
            "measurement pyramid needs H and W divisible by 4, got {:?}",
            ybar.shape()
        )));
    }
    let s1 = ybar.clone().reshape(&[1, 1, h, w])?;
    let s2 = kernels::avg_pool2(&s1);
    let s3 = kernels::avg_pool2(&s2);
    Ok([s1, s2, s3])
}

pub fn generate_filters<T: Scalar>(
    ybar_j: &Tensor<T>,
    gen: &FilterGenerator,
    store: &ParamStore<T>,
) -> Result<FilterField<T>> {
    if ybar_j.shape().len() != 2 {
        return Err(SciError::InvalidArgument(format!("ybar_j must be 2-D, got {:?}", ybar_j.shape())));
    }
    let (h, w) = (ybar_j.dim(0), ybar_j.dim(1));
    let mut ctx = Eval::new(store);
    let y = ctx.constant(ybar_j.clone().reshape(&[1, 1, h, w])?);
    let planes = gen.planes(&mut ctx, &y);
    FilterField::from_planes(&planes, gen.channels, gen.nf)
}

pub fn similarity_map<T: Scalar>(f_m: &Tensor<T>, theta: &FilterField<T>) -> Result<SimilarityMap<T>> {
    let s = f_m.shape();
    if s.len() != 4 || s[0] != theta.channels() || s[2] != theta.height() || s[3] != theta.width() {
        return Err(SciError::shape(&[theta.channels(), s.get(1).copied().unwrap_or(0), theta.height(), theta.width()], s));
    }
    let fbar = kernels::mean_time(f_m);
    let planes = kernels::similarity(&fbar, &theta.to_planes(), theta.nf());
    Ok(SimilarityMap::from_planes(&planes))
}

/// Gates every entry that has a generator; other entries are returned as is.
pub fn adapt<T: Scalar>(
    f: &DenseFeatureMap<T>,
    ybar: &NormalizedMeasurement<T>,
    dfma: &DfmaModule,
    store: &ParamStore<T>,
) -> Result<DenseFeatureMap<T>> {
    let pyramid = measurement_pyramid(ybar.tensor())?;
    for (m, entry) in f.entries.iter().enumerate() {
        let s = entry.shape();
        let p = pyramid[DFM_SCALES[m] - 1].shape();
        if s.len() != 4 || s[2] != p[2] || s[3] != p[3] {
            return Err(SciError::InvalidArgument(format!(
                "dense feature map entry {} has shape {s:?}, expected scale {} ({}x{})",
                m + 1,
                DFM_SCALES[m],
                p[2],
                p[3]
            )));
        }
        if let Some(g) = &dfma.generators[m] {
            if s[0] != g.channels {
                return Err(SciError::shape(&[g.channels, s[1], s[2], s[3]], s));
            }
        }
    }
    let mut ctx = Eval::new(store);
    let fv = [0, 1, 2].map(|m| ctx.constant(f.entries[m].clone()));
    let pv = pyramid.map(|t| ctx.constant(t));
    let out = dfma.adapt(&mut ctx, &fv, &pv);
    Ok(DenseFeatureMap { entries: out.map(|t| (*t).clone()) })
}
