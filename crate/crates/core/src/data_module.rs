//! Measurement-consistency step of each phase.
//!
//! `r^k = r^{k-1} + (y - Phi x^{k-1})` followed by the projection
//! `v^k = x^{k-1} + Phi^T (Phi Phi^T + eta I)^{-1} (r^k - Phi x^{k-1})`,
//! where the inverse is elementwise because `Phi Phi^T = diag(mask_sum)`.

use crate::error::{Result, SciError};
use crate::forward::{MaskSet, Measurement, VideoBlock};
use crate::tensor::{Scalar, Tensor};

/// Learnable step parameter for one phase, stored as an unconstrained
/// `rho` with `eta = softplus(rho)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseParams<T> {
    pub rho: T,
}

pub const INITIAL_ETA: f64 = 0.01;

pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_derivative<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn inverse_softplus(eta: f64) -> f64 {
    if eta > 30.0 {
        eta
    } else {
        eta.exp_m1().ln()
    }
}

impl<T: Scalar> PhaseParams<T> {
    pub fn initial() -> Self {
        Self::from_eta(INITIAL_ETA).expect("positive initial eta")
    }

    pub fn from_eta(eta: f64) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(SciError::InvalidArgument(format!("eta must be positive and finite, got {eta}")));
        }
        Ok(Self { rho: T::of(inverse_softplus(eta)) })
    }

    pub fn eta(&self) -> T {
        softplus(self.rho)
    }
}

/// Measurement-space accumulated residual `r^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualAccumulator<T>(Tensor<T>);

impl<T: Scalar> ResidualAccumulator<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[height, width]))
    }

    pub fn from_measurement(y: &Measurement<T>) -> Self {
        Self(y.tensor().clone())
    }

    pub fn new(r: Tensor<T>) -> Result<Self> {
        if r.shape().len() != 2 || !r.all_finite() {
            return Err(SciError::InvalidArgument("residual must be a finite (H, W) tensor".into()));
        }
        Ok(Self(r))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Masks and mask sums converted to the working precision.
#[derive(Clone, Debug)]
pub struct Sensing<T> {
    pub frames: usize,
    pub plane: usize,
    pub mask: Vec<T>,
    pub mask_sum: Vec<T>,
}

impl<T: Scalar> Sensing<T> {
    pub fn new(m: &MaskSet) -> Self {
        Self {
            frames: m.frames(),
            plane: m.plane(),
            mask: m.to_tensor::<T>().into_data(),
            mask_sum: m.mask_sum().iter().map(|&s| T::of(s as f64)).collect(),
        }
    }

    /// `Phi x` on a flat `(B, H, W)` buffer.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.plane];
        for (mask, frame) in self.mask.chunks_exact(self.plane).zip(x.chunks_exact(self.plane)) {
            for ((o, &m), &v) in y.iter_mut().zip(mask).zip(frame) {
                *o += m * v;
            }
        }
        y
    }
}

/// `r_prev + y - Phi x` on raw buffers.
pub fn residual_kernel<T: Scalar>(r_prev: &Tensor<T>, y: &Tensor<T>, x: &Tensor<T>, s: &Sensing<T>) -> Tensor<T> {
    let phix = s.apply(x.data());
    let data = r_prev.data().iter().zip(y.data()).zip(&phix).map(|((&r, &yv), &p)| r + yv - p).collect();
    Tensor::from_vec(r_prev.shape(), data).expect("residual shape")
}

/// Gradients of [`residual_kernel`] w.r.t. `(r_prev, x)`.
pub fn residual_kernel_backward<T: Scalar>(gr: &Tensor<T>, x_shape: &[usize], s: &Sensing<T>) -> (Tensor<T>, Tensor<T>) {
    let g = gr.data();
    let dx = Tensor::from_fn(x_shape, |i| -s.mask[i] * g[i % s.plane]);
    (gr.clone(), dx)
}

/// Projection on raw buffers; `x` is any tensor holding `B*H*W` values.
pub fn projection_kernel<T: Scalar>(x: &Tensor<T>, r: &Tensor<T>, eta: T, s: &Sensing<T>) -> Tensor<T> {
    let phix = s.apply(x.data());
    let corr: Vec<T> = r
        .data()
        .iter()
        .zip(&phix)
        .zip(&s.mask_sum)
        .map(|((&rv, &p), &ms)| (rv - p) / (ms + eta))
        .collect();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &xv)| xv + s.mask[i] * corr[i % s.plane])
        .collect();
    Tensor::from_vec(x.shape(), data).expect("projection shape")
}

pub struct ProjectionGrads<T> {
    pub dx: Tensor<T>,
    pub dr: Tensor<T>,
    pub deta: T,
}

pub fn projection_kernel_backward<T: Scalar>(
    x: &Tensor<T>,
    r: &Tensor<T>,
    eta: T,
    s: &Sensing<T>,
    gv: &Tensor<T>,
) -> ProjectionGrads<T> {
    let plane = s.plane;
    let phix = s.apply(x.data());
    // Phi gv: the output gradient collapsed into measurement space
    let phi_g = s.apply(gv.data());
    let mut dr = Tensor::zeros(r.shape());
    let mut deta = T::zero();
    for p in 0..plane {
        let d = s.mask_sum[p] + eta;
        let de = phi_g[p] / d;
        dr.data_mut()[p] = de;
        deta -= de * (r.data()[p] - phix[p]) / d;
    }
    let dx = Tensor::from_fn(x.shape(), |i| gv.data()[i] - s.mask[i] * dr.data()[i % plane]);
    ProjectionGrads { dx, dr, deta }
}

fn check<T: Scalar>(x: &VideoBlock<T>, plane: &Tensor<T>, m: &MaskSet) -> Result<()> {
    x.tensor().ensure_shape(&m.shape())?;
    plane.ensure_shape(&[m.height(), m.width()])
}

pub fn residual_update<T: Scalar>(
    r_prev: &ResidualAccumulator<T>,
    y: &Measurement<T>,
    x_prev: &VideoBlock<T>,
    m: &MaskSet,
) -> Result<ResidualAccumulator<T>> {
    check(x_prev, r_prev.tensor(), m)?;
    y.tensor().ensure_shape(&[m.height(), m.width()])?;
    Ok(ResidualAccumulator(residual_kernel(r_prev.tensor(), y.tensor(), x_prev.tensor(), &Sensing::new(m))))
}

pub fn projection_update<T: Scalar>(
    x_prev: &VideoBlock<T>,
    r: &ResidualAccumulator<T>,
    eta: &PhaseParams<T>,
    m: &MaskSet,
) -> Result<VideoBlock<T>> {
    project_with_eta(x_prev, r.tensor(), eta.eta(), m)
}

/// Same projection with an explicit `eta`, bypassing the softplus mapping.
pub fn project_with_eta<T: Scalar>(x_prev: &VideoBlock<T>, r: &Tensor<T>, eta: T, m: &MaskSet) -> Result<VideoBlock<T>> {
    check(x_prev, r, m)?;
    if !(eta > T::zero()) {
        return Err(SciError::InvalidArgument(format!("eta must be positive, got {}", eta.f64())));
    }
    VideoBlock::new(projection_kernel(x_prev.tensor(), r, eta, &Sensing::new(m)))
}

/// Plain projection onto `{v : Phi v = y}` (regularized by `eta`), i.e. the
/// update without residual accumulation.
pub fn euclidean_projection<T: Scalar>(
    x_prev: &VideoBlock<T>,
    y: &Measurement<T>,
    eta: &PhaseParams<T>,
    m: &MaskSet,
) -> Result<VideoBlock<T>> {
    project_with_eta(x_prev, y.tensor(), eta.eta(), m)
}

/// `d v / d eta`, elementwise: `-M_i (r - Phi x) / (mask_sum + eta)^2`.
pub fn projection_eta_derivative<T: Scalar>(
    x_prev: &VideoBlock<T>,
    r: &Tensor<T>,
    eta: T,
    m: &MaskSet,
) -> Result<VideoBlock<T>> {
    check(x_prev, r, m)?;
    let s = Sensing::new(m);
    let phix = s.apply(x_prev.tensor().data());
    let plane = s.plane;
    VideoBlock::new(Tensor::from_fn(&m.shape(), |i| {
        let p = i % plane;
        let d = s.mask_sum[p] + eta;
        -s.mask[i] * (r.data()[p] - phix[p]) / (d * d)
    }))
}
