//! Snapshot compressive imaging sensing model.
//!
//! A video block of `B` frames is modulated frame-by-frame by binary masks
//! and integrated into a single `H x W` measurement. Because every mask is
//! binary, `Phi Phi^T` is diagonal with the per-pixel mask count on the
//! diagonal, which is what makes the data step closed-form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SciError};
use crate::tensor::{Scalar, Tensor};

/// Largest `H*W*B` for which [`build_block_diagonal`] will materialize the
/// explicit operator.
pub const BLOCK_DIAGONAL_LIMIT: usize = 1 << 14;

/// `B` binary masks of size `H x W` plus the cached per-pixel mask count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    frames: usize,
    height: usize,
    width: usize,
    masks: Vec<u8>,
    mask_sum: Vec<u32>,
}

impl MaskSet {
    /// Build from raw `{0,1}` bytes laid out as `(B, H, W)`.
    pub fn from_binary(frames: usize, height: usize, width: usize, masks: Vec<u8>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(SciError::InvalidArgument(format!(
                "mask dimensions must be positive, got ({frames}, {height}, {width})"
            )));
        }
        if masks.len() != frames * height * width {
            return Err(SciError::shape(&[frames, height, width], &[masks.len()]));
        }
        if let Some((i, &v)) = masks.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(SciError::NonBinaryMask(v as f64, i));
        }
        let plane = height * width;
        let mut mask_sum = vec![0u32; plane];
        for frame in masks.chunks_exact(plane) {
            for (s, &m) in mask_sum.iter_mut().zip(frame) {
                *s += m as u32;
            }
        }
        Ok(Self { frames, height, width, masks, mask_sum })
    }

    /// Build from a real tensor whose entries must be exactly 0 or 1.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(SciError::InvalidArgument(format!(
                "masks must be rank 3 (B, H, W), got shape {:?}",
                t.shape()
            )));
        }
        let mut bytes = Vec::with_capacity(t.len());
        for (i, &v) in t.data().iter().enumerate() {
            if v == T::zero() {
                bytes.push(0);
            } else if v == T::one() {
                bytes.push(1);
            } else {
                return Err(SciError::NonBinaryMask(v.f64(), i));
            }
        }
        Self::from_binary(t.dim(0), t.dim(1), t.dim(2), bytes)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(B, H, W)`
    pub fn shape(&self) -> [usize; 3] {
        [self.frames, self.height, self.width]
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn bytes(&self) -> &[u8] {
        &self.masks
    }

    #[inline]
    pub fn get(&self, i: usize, p: usize, q: usize) -> u8 {
        self.masks[(i * self.height + p) * self.width + q]
    }

    pub fn mask_sum(&self) -> &[u32] {
        &self.mask_sum
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&self.shape(), |i| if self.masks[i] == 1 { T::one() } else { T::zero() })
    }

    pub fn mask_sum_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width], |i| T::of(self.mask_sum[i] as f64))
    }

    fn ensure_plane(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.height, self.width] {
            return Err(SciError::shape(&[self.height, self.width], shape));
        }
        Ok(())
    }

    fn ensure_block(&self, shape: &[usize]) -> Result<()> {
        if shape != self.shape() {
            return Err(SciError::shape(&self.shape(), shape));
        }
        Ok(())
    }
}

/// Seeded i.i.d. Bernoulli masks.
pub fn generate_masks(frames: usize, height: usize, width: usize, density: f64, seed: u64) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&density) {
        return Err(SciError::InvalidArgument(format!("mask density {density} outside [0, 1]")));
    }
    if frames == 0 || height == 0 || width == 0 {
        return Err(SciError::InvalidArgument(format!(
            "mask dimensions must be positive, got ({frames}, {height}, {width})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = (0..frames * height * width).map(|_| rng.random_bool(density) as u8).collect();
    MaskSet::from_binary(frames, height, width, masks)
}

/// `B` frames of size `H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoBlock<T>(Tensor<T>);

impl<T: Scalar> VideoBlock<T> {
    pub fn new(frames: Tensor<T>) -> Result<Self> {
        if frames.shape().len() != 3 {
            return Err(SciError::InvalidArgument(format!(
                "video block must be rank 3 (B, H, W), got {:?}",
                frames.shape()
            )));
        }
        if !frames.all_finite() {
            return Err(SciError::InvalidArgument("video block contains non-finite values".into()));
        }
        Ok(Self(frames))
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[frames, height, width]))
    }

    pub fn frames(&self) -> usize {
        self.0.dim(0)
    }

    pub fn height(&self) -> usize {
        self.0.dim(1)
    }

    pub fn width(&self) -> usize {
        self.0.dim(2)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn frame(&self, i: usize) -> &[T] {
        let plane = self.height() * self.width();
        &self.0.data()[i * plane..(i + 1) * plane]
    }

    pub fn clamp_unit(&self) -> Self {
        Self(self.0.map(|v| v.max(T::zero()).min(T::one())))
    }

    pub fn cast<U: Scalar>(&self) -> VideoBlock<U> {
        VideoBlock(self.0.cast())
    }
}

/// A single coded `H x W` snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement<T>(Tensor<T>);

impl<T: Scalar> Measurement<T> {
    pub fn new(pixels: Tensor<T>) -> Result<Self> {
        if pixels.shape().len() != 2 {
            return Err(SciError::InvalidArgument(format!(
                "measurement must be rank 2 (H, W), got {:?}",
                pixels.shape()
            )));
        }
        if !pixels.all_finite() {
            return Err(SciError::InvalidArgument("measurement contains non-finite values".into()));
        }
        Ok(Self(pixels))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[height, width]))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.dim(0)
    }

    pub fn width(&self) -> usize {
        self.0.dim(1)
    }

    pub fn cast<U: Scalar>(&self) -> Measurement<U> {
        Measurement(self.0.cast())
    }
}

/// Measurement divided by the per-pixel mask count.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedMeasurement<T>(Tensor<T>);

impl<T: Scalar> NormalizedMeasurement<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// Zero-mean Gaussian measurement noise.
pub fn gaussian_noise<T: Scalar>(height: usize, width: usize, sigma: f64, seed: u64) -> Result<Measurement<T>> {
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| SciError::InvalidArgument(format!("noise sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Measurement::new(Tensor::from_fn(&[height, width], |_| T::of(normal.sample(&mut rng))))
}

/// `Y = sum_i M_i * X_i + N`
pub fn compress<T: Scalar>(x: &VideoBlock<T>, m: &MaskSet, noise: Option<&Measurement<T>>) -> Result<Measurement<T>> {
    m.ensure_block(x.tensor().shape())?;
    let plane = m.plane();
    let mut y = match noise {
        Some(n) => {
            m.ensure_plane(n.tensor().shape())?;
            n.tensor().clone()
        }
        None => Tensor::zeros(&[m.height, m.width]),
    };
    let out = y.data_mut();
    for i in 0..m.frames {
        let mask = &m.masks[i * plane..(i + 1) * plane];
        let frame = x.frame(i);
        for ((o, &mk), &v) in out.iter_mut().zip(mask).zip(frame) {
            if mk == 1 {
                *o += v;
            }
        }
    }
    Ok(Measurement(y))
}

/// `out_i = M_i * r`
pub fn adjoint<T: Scalar>(r: &Measurement<T>, m: &MaskSet) -> Result<VideoBlock<T>> {
    m.ensure_plane(r.tensor().shape())?;
    let plane = m.plane();
    let rd = r.tensor().data();
    let data = (0..m.frames * plane)
        .map(|idx| if m.masks[idx] == 1 { rd[idx % plane] } else { T::zero() })
        .collect();
    Ok(VideoBlock(Tensor::from_vec(&m.shape(), data)?))
}

/// `Y / sum_i M_i` elementwise, with zero where no mask covers the pixel.
pub fn normalize_measurement<T: Scalar>(y: &Measurement<T>, m: &MaskSet) -> Result<NormalizedMeasurement<T>> {
    m.ensure_plane(y.tensor().shape())?;
    let data = y
        .tensor()
        .data()
        .iter()
        .zip(&m.mask_sum)
        .map(|(&v, &s)| if s == 0 { T::zero() } else { v / T::of(s as f64) })
        .collect();
    Ok(NormalizedMeasurement(Tensor::from_vec(&[m.height, m.width], data)?))
}

/// Explicit `(H*W) x (H*W*B)` sensing matrix `[diag(vec M_1), ..., diag(vec M_B)]`,
/// stored densely in row-major order. Intended for small oracle checks only.
#[derive(Clone, Debug)]
pub struct BlockDiagonalOperator {
    rows: usize,
    cols: usize,
    matrix: Vec<f64>,
}

impl BlockDiagonalOperator {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.matrix[r * self.cols + c]
    }

    pub fn nonzeros(&self) -> usize {
        self.matrix.iter().filter(|v| **v != 0.0).count()
    }

    pub fn dense(&self) -> &[f64] {
        &self.matrix
    }
}

pub fn build_block_diagonal(m: &MaskSet) -> Result<BlockDiagonalOperator> {
    let rows = m.plane();
    let cols = rows * m.frames;
    if cols > BLOCK_DIAGONAL_LIMIT {
        return Err(SciError::OperatorTooLarge { rows, cols });
    }
    let mut matrix = vec![0.0; rows * cols];
    for i in 0..m.frames {
        for r in 0..rows {
            matrix[r * cols + i * rows + r] = m.masks[i * rows + r] as f64;
        }
    }
    Ok(BlockDiagonalOperator { rows, cols, matrix })
}
