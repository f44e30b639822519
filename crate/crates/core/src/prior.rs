//! Learned proximal step: a three-scale residual encoder/decoder of 3D
//! convolutions that refines `v^k` into `x^k = D_1 + v^k` and hands its
//! multi-scale features to the next phase.
//!
//! Scale `j` has spatial size `(H, W) / 2^(j-1)` and `C_j` channels; time is
//! never downsampled. Decoder stages 3 and 2 end in a transition convolution
//! to the next finer scale's width so that `D_j up + E_{j-1}` is well defined.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SciError};
use crate::forward::{NormalizedMeasurement, VideoBlock};
use crate::graph::{Ctx, Eval, ParamStore};
use crate::layers::{Conv, Init, ResBlock, LEAKY_SLOPE};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvMode {
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "2d")]
    TwoD,
}

impl ConvMode {
    pub fn kernel(self) -> [usize; 3] {
        match self {
            ConvMode::ThreeD => [3, 3, 3],
            ConvMode::TwoD => [1, 3, 3],
        }
    }
}

impl std::str::FromStr for ConvMode {
    type Err = SciError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3d" => Ok(ConvMode::ThreeD),
            "2d" => Ok(ConvMode::TwoD),
            other => Err(SciError::Config(format!("conv_mode must be 3d or 2d, got {other:?}"))),
        }
    }
}

/// Spatial scale each dense feature map entry is delivered to.
pub const DFM_SCALES: [usize; 3] = [3, 2, 1];

/// Features `(C, T, H_j, W_j)` at scale `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Tensor<T>,
    pub scale: usize,
}

/// `[E_3, D_3 up, D_2 up]` of one phase, consumed by the next.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFeatureMap<T> {
    pub entries: [Tensor<T>; 3],
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct EncoderStage {
    head: Conv,
    res: ResBlock,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct DecoderStage {
    head: Conv,
    res: ResBlock,
    tail: Option<Conv>,
}

/// Parameter handles of one prior network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PriorNet {
    widths: [usize; 3],
    fusion: [bool; 3],
    encoder: [EncoderStage; 3],
    /// Indexed by scale - 1.
    decoder: [DecoderStage; 3],
    output: Conv,
}

/// Decoder outputs of one forward pass.
pub struct Decoded<V> {
    pub d1: V,
    pub d2: V,
    pub d3: V,
    pub d3_up: V,
    pub d2_up: V,
}

impl PriorNet {
    /// `fusion[m]` adds a concatenation slot for dense feature map entry `m`.
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        widths: [usize; 3],
        mode: ConvMode,
        fusion: [bool; 3],
        rng: &mut R,
    ) -> Self {
        let k = mode.kernel();
        let [c1, c2, c3] = widths;
        let enc = |store: &mut ParamStore<T>, rng: &mut R, j: usize, cin: usize, cout: usize, stride: usize| {
            let name = format!("{prefix}.enc{j}");
            EncoderStage {
                head: Conv::register(store, &format!("{name}.head"), cin, cout, k, stride, Init::Kaiming, rng),
                res: ResBlock::register(store, &format!("{name}.res"), cout, k, rng),
            }
        };
        let encoder = [enc(store, rng, 1, 2, c1, 1), enc(store, rng, 2, c1, c2, 2), enc(store, rng, 3, c2, c3, 2)];

        // entry m of the dense feature map lands in the decoder at scale 3 - m
        let dec = |store: &mut ParamStore<T>, rng: &mut R, j: usize, slot: Option<usize>, next: Option<usize>| {
            let name = format!("{prefix}.dec{j}");
            let c = widths[j - 1];
            let cin = c + slot.unwrap_or(0);
            DecoderStage {
                head: Conv::register(store, &format!("{name}.head"), cin, c, k, 1, Init::Kaiming, rng),
                res: ResBlock::register(store, &format!("{name}.res"), c, k, rng),
                tail: next.map(|cn| Conv::register(store, &format!("{name}.tail"), c, cn, k, 1, Init::Kaiming, rng)),
            }
        };
        let d3 = dec(store, rng, 3, fusion[0].then_some(c3), Some(c2));
        let d2 = dec(store, rng, 2, fusion[1].then_some(c2), Some(c1));
        let d1 = dec(store, rng, 1, fusion[2].then_some(c1), None);
        let output = Conv::register(store, &format!("{prefix}.out"), c1, 1, [1, 1, 1], 1, Init::Zero, rng);
        Self { widths, fusion, encoder, decoder: [d1, d2, d3], output }
    }

    pub fn widths(&self) -> [usize; 3] {
        self.widths
    }

    pub fn fusion(&self) -> [bool; 3] {
        self.fusion
    }

    /// Channel count of each dense feature map entry.
    pub fn dfm_channels(&self) -> [usize; 3] {
        [self.widths[2], self.widths[1], self.widths[0]]
    }

    pub fn output_conv(&self) -> &Conv {
        &self.output
    }

    /// Head convolutions of the decoder, indexed by scale - 1.
    pub fn decoder_heads(&self) -> [&Conv; 3] {
        [&self.decoder[0].head, &self.decoder[1].head, &self.decoder[2].head]
    }

    /// `|v, ybar|` as a two-channel `(2, B, H, W)` tensor.
    pub fn assemble<T: Scalar, C: Ctx<T>>(&self, ctx: &mut C, v: &C::Var, ybar_rep: &C::Var) -> C::Var {
        ctx.concat(&[v.clone(), ybar_rep.clone()])
    }

    pub fn encode<T: Scalar, C: Ctx<T>>(&self, ctx: &mut C, input: &C::Var) -> [C::Var; 3] {
        let stage = |ctx: &mut C, s: &EncoderStage, x: &C::Var| {
            let h = s.head.forward(ctx, x);
            let h = ctx.leaky_relu(&h, LEAKY_SLOPE);
            s.res.forward(ctx, &h)
        };
        let e1 = stage(ctx, &self.encoder[0], input);
        let e2 = stage(ctx, &self.encoder[1], &e1);
        let e3 = stage(ctx, &self.encoder[2], &e2);
        [e1, e2, e3]
    }

    /// Decoder recursion. `f_hat` holds the (possibly adapted) dense feature
    /// map of the previous phase; when absent, enabled slots receive zeros.
    pub fn decode<T: Scalar, C: Ctx<T>>(
        &self,
        ctx: &mut C,
        e: &[C::Var; 3],
        f_hat: Option<&[C::Var; 3]>,
    ) -> Decoded<C::Var> {
        let stage = |ctx: &mut C, s: &DecoderStage, x: &C::Var| {
            let h = s.head.forward(ctx, x);
            let h = ctx.leaky_relu(&h, LEAKY_SLOPE);
            let h = s.res.forward(ctx, &h);
            match &s.tail {
                Some(t) => t.forward(ctx, &h),
                None => h,
            }
        };
        // entry m has the same shape as encoder output at scale DFM_SCALES[m]
        let fuse = |ctx: &mut C, own: C::Var, m: usize| {
            if !self.fusion[m] {
                return own;
            }
            let other = match f_hat {
                Some(f) => f[m].clone(),
                None => {
                    let shape = ctx.value(&e[DFM_SCALES[m] - 1]).shape().to_vec();
                    ctx.constant(Tensor::zeros(&shape))
                }
            };
            ctx.concat(&[own, other])
        };
        let in3 = fuse(ctx, e[2].clone(), 0);
        let d3 = stage(ctx, &self.decoder[2], &in3);
        let d3_up = ctx.upsample2(&d3);
        let skip2 = ctx.add(&d3_up, &e[1]);
        let in2 = fuse(ctx, skip2, 1);
        let d2 = stage(ctx, &self.decoder[1], &in2);
        let d2_up = ctx.upsample2(&d2);
        let skip1 = ctx.add(&d2_up, &e[0]);
        let in1 = fuse(ctx, skip1, 2);
        let d1 = stage(ctx, &self.decoder[0], &in1);
        Decoded { d1, d2, d3, d3_up, d2_up }
    }

    /// Returns `x^k` (shape `(1, B, H, W)`) and this phase's dense feature map.
    pub fn forward<T: Scalar, C: Ctx<T>>(
        &self,
        ctx: &mut C,
        v: &C::Var,
        ybar_rep: &C::Var,
        f_hat: Option<&[C::Var; 3]>,
    ) -> (C::Var, [C::Var; 3]) {
        let input = self.assemble(ctx, v, ybar_rep);
        let e = self.encode(ctx, &input);
        let d = self.decode(ctx, &e, f_hat);
        let residual = self.output.forward(ctx, &d.d1);
        let x = ctx.add(&residual, v);
        let [_, _, e3] = e;
        (x, [e3, d.d3_up, d.d2_up])
    }

    fn check_dfm<T: Scalar>(&self, f: &DenseFeatureMap<T>, frames: usize, height: usize, width: usize) -> Result<()> {
        for (m, entry) in f.entries.iter().enumerate() {
            let s = DFM_SCALES[m];
            let expect = [self.dfm_channels()[m], frames, height >> (s - 1), width >> (s - 1)];
            entry.ensure_shape(&expect)?;
        }
        Ok(())
    }
}

fn check_divisible(height: usize, width: usize) -> Result<()> {
    if height % 4 != 0 || width % 4 != 0 {
        return Err(SciError::InvalidArgument(format!(
            "prior network needs H and W divisible by 4, got {height}x{width}"
        )));
    }
    Ok(())
}

fn video_var<T: Scalar>(v: &VideoBlock<T>) -> Tensor<T> {
    let s = v.tensor().shape();
    v.tensor().clone().reshape(&[1, s[0], s[1], s[2]]).expect("video reshape")
}

/// `ybar` replicated along time: `(1, B, H, W)`.
pub fn replicate_measurement<T: Scalar>(ybar: &Tensor<T>, frames: usize) -> Tensor<T> {
    let plane = ybar.len();
    let (h, w) = (ybar.dim(0), ybar.dim(1));
    Tensor::from_fn(&[1, frames, h, w], |i| ybar.data()[i % plane])
}

/// Two-channel prior input: channel 0 is `v`, channel 1 is `ybar` on every frame.
pub fn assemble_input<T: Scalar>(v: &VideoBlock<T>, ybar: &NormalizedMeasurement<T>) -> Result<FeatureMap<T>> {
    ybar.tensor().ensure_shape(&[v.height(), v.width()])?;
    let data = crate::kernels::concat(&[&video_var(v), &replicate_measurement(ybar.tensor(), v.frames())]);
    Ok(FeatureMap { data, scale: 1 })
}

pub fn encode<T: Scalar>(input: &FeatureMap<T>, net: &PriorNet, store: &ParamStore<T>) -> Result<[FeatureMap<T>; 3]> {
    let s = input.data.shape();
    if s.len() != 4 || s[0] != 2 || input.scale != 1 {
        return Err(SciError::InvalidArgument(format!("encoder expects a (2, B, H, W) scale-1 input, got {s:?}")));
    }
    check_divisible(s[2], s[3])?;
    let mut ctx = Eval::new(store);
    let x = ctx.constant(input.data.clone());
    let e = net.encode(&mut ctx, &x);
    Ok([0, 1, 2].map(|j| FeatureMap { data: (*e[j]).clone(), scale: j + 1 }))
}

/// Returns `[D_1, D_2, D_3]` at scales 1, 2, 3.
pub fn decode<T: Scalar>(
    e: &[FeatureMap<T>; 3],
    f_hat: Option<&DenseFeatureMap<T>>,
    net: &PriorNet,
    store: &ParamStore<T>,
) -> Result<[FeatureMap<T>; 3]> {
    for (j, fm) in e.iter().enumerate() {
        let c = net.widths[j];
        if fm.scale != j + 1 || fm.data.shape().len() != 4 || fm.data.dim(0) != c {
            return Err(SciError::InvalidArgument(format!(
                "encoder output {} has shape {:?}, expected {c} channels at scale {}",
                j + 1,
                fm.data.shape(),
                j + 1
            )));
        }
    }
    let s1 = e[0].data.shape();
    if let Some(f) = f_hat {
        net.check_dfm(f, s1[1], s1[2], s1[3])?;
    }
    let mut ctx = Eval::new(store);
    let ev = [0, 1, 2].map(|j| ctx.constant(e[j].data.clone()));
    let fv = f_hat.map(|f| [0, 1, 2].map(|m| ctx.constant(f.entries[m].clone())));
    let d = net.decode(&mut ctx, &ev, fv.as_ref());
    Ok([
        FeatureMap { data: (*d.d1).clone(), scale: 1 },
        FeatureMap { data: (*d.d2).clone(), scale: 2 },
        FeatureMap { data: (*d.d3).clone(), scale: 3 },
    ])
}

pub fn prior_forward<T: Scalar>(
    v: &VideoBlock<T>,
    ybar: &NormalizedMeasurement<T>,
    f_hat: Option<&DenseFeatureMap<T>>,
    net: &PriorNet,
    store: &ParamStore<T>,
) -> Result<(VideoBlock<T>, DenseFeatureMap<T>)> {
    ybar.tensor().ensure_shape(&[v.height(), v.width()])?;
    check_divisible(v.height(), v.width())?;
    if let Some(f) = f_hat {
        net.check_dfm(f, v.frames(), v.height(), v.width())?;
    }
    let mut ctx = Eval::new(store);
    let vv = ctx.constant(video_var(v));
    let yb = ctx.constant(replicate_measurement(ybar.tensor(), v.frames()));
    let fv = f_hat.map(|f| [0, 1, 2].map(|m| ctx.constant(f.entries[m].clone())));
    let (x, f_out) = net.forward(&mut ctx, &vv, &yb, fv.as_ref());
    let x = VideoBlock::new((*x).clone().reshape(v.tensor().shape())?)?;
    Ok((x, DenseFeatureMap { entries: f_out.map(|t| (*t).clone()) }))
}
