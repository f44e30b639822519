use rand::Rng;

use crate::graph::{Ctx, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// A registered convolution: weight `(Co, Ci, kt, kh, kw)` and bias `(Co)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-uniform scaled for the leaky rectifier.
    Kaiming,
    Zero,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = [c_out, c_in, kernel[0], kernel[1], kernel[2]];
        let weight = match init {
            Init::Zero => Tensor::zeros(&shape),
            Init::Kaiming => {
                let fan_in = (c_in * kernel.iter().product::<usize>()) as f64;
                let bound = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
                Tensor::from_fn(&shape, |_| T::of(rng.random_range(-bound..bound)))
            }
        };
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self { weight, bias, stride }
    }

    pub fn forward<T: Scalar, C: Ctx<T>>(&self, ctx: &mut C, x: &C::Var) -> C::Var {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.conv3d(x, &w, &b, self.stride)
    }

    pub fn in_channels<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).dim(1)
    }

    pub fn out_channels<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).dim(0)
    }
}

/// `x + conv_b(lrelu(conv_a(x)))`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResBlock {
    pub a: Conv,
    pub b: Conv,
}

impl ResBlock {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: [usize; 3],
        rng: &mut R,
    ) -> Self {
        Self {
            a: Conv::register(store, &format!("{name}.conv_a"), channels, channels, kernel, 1, Init::Kaiming, rng),
            b: Conv::register(store, &format!("{name}.conv_b"), channels, channels, kernel, 1, Init::Kaiming, rng),
        }
    }

    pub fn forward<T: Scalar, C: Ctx<T>>(&self, ctx: &mut C, x: &C::Var) -> C::Var {
        let h = self.a.forward(ctx, x);
        let h = ctx.leaky_relu(&h, LEAKY_SLOPE);
        let h = self.b.forward(ctx, &h);
        ctx.add(x, &h)
    }
}
