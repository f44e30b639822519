//! The unrolled network: `K` phases of (data step, prior step) with the
//! residual `r^k`, the estimate `x^k` and the dense feature map `F^k`
//! threaded from phase to phase.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_module::{inverse_softplus, softplus, ResidualAccumulator, Sensing, INITIAL_ETA};
use crate::dfma::{measurement_pyramid, DfmaModule, DEFAULT_FILTER_SIZE};
use crate::error::{Result, SciError};
use crate::forward::{adjoint, normalize_measurement, MaskSet, Measurement, VideoBlock};
use crate::graph::{Ctx, Eval, Gradients, ParamId, ParamStore, Tape};
use crate::kernels;
use crate::prior::{replicate_measurement, ConvMode, DenseFeatureMap, PriorNet};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualInit {
    Zero,
    Measurement,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(alias = "K")]
    pub phases: usize,
    pub conv_mode: ConvMode,
    pub dfm_branches: Vec<usize>,
    pub dfma_enabled: bool,
    pub residual_init: ResidualInit,
    pub widths: [usize; 3],
    pub weight_sharing: bool,
    pub filter_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            phases: 10,
            conv_mode: ConvMode::ThreeD,
            dfm_branches: vec![1, 2, 3],
            dfma_enabled: true,
            residual_init: ResidualInit::Zero,
            widths: [32, 64, 128],
            weight_sharing: false,
            filter_size: DEFAULT_FILTER_SIZE,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SciError::Config(msg));
        if self.phases == 0 {
            return fail("phase count must be at least 1".into());
        }
        if self.widths.contains(&0) {
            return fail(format!("widths must be positive, got {:?}", self.widths));
        }
        let mut seen = [false; 3];
        for &b in &self.dfm_branches {
            if !(1..=3).contains(&b) || seen[b - 1] {
                return fail(format!("dfm_branches must be distinct values in 1..=3, got {:?}", self.dfm_branches));
            }
            seen[b - 1] = true;
        }
        if self.dfma_enabled && self.dfm_branches.is_empty() {
            return fail("dfma_enabled requires at least one dfm branch".into());
        }
        if self.filter_size % 2 == 0 {
            return fail(format!("filter_size must be odd, got {}", self.filter_size));
        }
        Ok(())
    }

    /// `fusion()[m]` is true when branch `m + 1` is enabled.
    pub fn fusion(&self) -> [bool; 3] {
        [1, 2, 3].map(|b| self.dfm_branches.contains(&b))
    }
}

/// Parameter handles of one phase.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhaseLayout {
    pub rho: ParamId,
    pub prior: PriorNet,
    /// Absent in the first phase, which has no previous feature map.
    pub dfma: Option<DfmaModule>,
}

/// All learnable parameters with hierarchical names such as
/// `phase03.prior.dec2.res.conv_a.weight` or `shared.dfma.gen1.bias`.
#[derive(Clone, Debug)]
pub struct ParameterRegistry<T> {
    config: NetworkConfig,
    store: ParamStore<T>,
    phases: Vec<PhaseLayout>,
}

pub fn phase_group(k: usize) -> String {
    format!("phase{k:02}")
}

pub const SHARED_GROUP: &str = "shared";

impl<T: Scalar> ParameterRegistry<T> {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fusion = config.fusion();
        let gates = if config.dfma_enabled { fusion } else { [false; 3] };
        let (c1, c2, c3) = (config.widths[0], config.widths[1], config.widths[2]);
        let register_prior = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, group: &str| {
            PriorNet::register(store, &format!("{group}.prior"), config.widths, config.conv_mode, fusion, rng)
        };
        let register_dfma = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, group: &str| {
            DfmaModule::register(store, &format!("{group}.dfma"), [c3, c2, c1], gates, config.filter_size, rng)
        };
        let wants_dfma = config.dfma_enabled && config.phases > 1;

        let shared = config.weight_sharing.then(|| {
            let prior = register_prior(&mut store, &mut rng, SHARED_GROUP);
            let dfma = wants_dfma.then(|| register_dfma(&mut store, &mut rng, SHARED_GROUP));
            (prior, dfma)
        });
        let mut phases = Vec::with_capacity(config.phases);
        for k in 1..=config.phases {
            let group = phase_group(k);
            let rho = store.add(format!("{group}.rho"), Tensor::full(&[1], T::of(inverse_softplus(INITIAL_ETA))));
            let (prior, dfma) = match &shared {
                Some((p, d)) => (p.clone(), if k > 1 { d.clone() } else { None }),
                None => {
                    let p = register_prior(&mut store, &mut rng, &group);
                    let d = (wants_dfma && k > 1).then(|| register_dfma(&mut store, &mut rng, &group));
                    (p, d)
                }
            };
            phases.push(PhaseLayout { rho, prior, dfma });
        }
        Ok(Self { config: config.clone(), store, phases })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn phases(&self) -> &[PhaseLayout] {
        &self.phases
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    /// `eta^k` for 1-based phase `k`.
    pub fn eta(&self, k: usize) -> T {
        softplus(self.store.get(self.phases[k - 1].rho).data()[0])
    }

    pub fn set_eta(&mut self, k: usize, eta: f64) -> Result<()> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(SciError::InvalidArgument(format!("eta must be positive and finite, got {eta}")));
        }
        let id = self.phases[k - 1].rho;
        self.store.get_mut(id).data_mut()[0] = T::of(inverse_softplus(eta));
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterRegistry<U> {
        ParameterRegistry { config: self.config.clone(), store: self.store.cast(), phases: self.phases.clone() }
    }

    pub fn check_config(&self, cfg: &NetworkConfig) -> Result<()> {
        if *cfg != self.config {
            return Err(SciError::Config(format!(
                "registry was built for {:?}, not {:?}",
                self.config, cfg
            )));
        }
        Ok(())
    }

    /// Runs all phases. `observe(k, r, v, x)` sees each phase's state.
    fn unroll<C: Ctx<T>>(
        &self,
        ctx: &mut C,
        inp: &Prepared<T>,
        mut observe: impl FnMut(&mut C, usize, &C::Var, &C::Var, &C::Var),
    ) -> C::Var {
        let y = ctx.constant(inp.y.clone());
        let ybar = ctx.constant(inp.ybar_rep.clone());
        let pyramid = inp.pyramid.as_ref().map(|p| [0, 1, 2].map(|j| ctx.constant(p[j].clone())));
        let mut x = ctx.constant(inp.x0.clone());
        let mut r = ctx.constant(inp.r0.clone());
        let keep_features = self.config.fusion().contains(&true);
        let mut f_prev: Option<[C::Var; 3]> = None;
        for (k, phase) in self.phases.iter().enumerate() {
            let rho = ctx.param(phase.rho);
            let eta = ctx.softplus(&rho);
            r = ctx.residual(&r, &y, &x, &inp.sensing);
            let v = ctx.projection(&x, &r, &eta, &inp.sensing);
            let f_hat = match (f_prev.take(), &phase.dfma, &pyramid) {
                (Some(f), Some(d), Some(p)) => Some(d.adapt(ctx, &f, p)),
                (f, _, _) => f,
            };
            let (x_new, f) = phase.prior.forward(ctx, &v, &ybar, f_hat.as_ref());
            observe(ctx, k + 1, &r, &v, &x_new);
            x = x_new;
            if keep_features {
                f_prev = Some(f);
            }
        }
        x
    }

    /// Mean squared error of the reconstruction against `target` and its
    /// gradient with respect to every parameter. Needs `H` and `W` divisible by 4.
    pub fn loss_and_gradients(
        &self,
        y: &Measurement<T>,
        m: &MaskSet,
        target: &VideoBlock<T>,
    ) -> Result<(T, Gradients<T>)> {
        target.tensor().ensure_shape(&m.shape())?;
        let inp = Prepared::new(y, m, &self.config)?;
        if inp.padded() {
            return Err(SciError::InvalidArgument(format!(
                "training needs H and W divisible by 4, got {}x{}",
                m.height(),
                m.width()
            )));
        }
        let mut tape = Tape::new(&self.store);
        let x = self.unroll(&mut tape, &inp, |_, _, _, _, _| {});
        let t = tape.constant(target.tensor().clone().reshape(&[1, m.frames(), m.height(), m.width()])?);
        let loss = tape.mse(&x, &t);
        let value = tape.value(&loss).data()[0];
        Ok((value, tape.backward(loss)))
    }
}

/// Per-reconstruction constants: the measurement, `ybar` and its pyramid,
/// `x^0`, `r^0`, and the sensing operator, all at the padded size.
struct Prepared<T> {
    y: Tensor<T>,
    ybar_rep: Tensor<T>,
    pyramid: Option<[Tensor<T>; 3]>,
    x0: Tensor<T>,
    r0: Tensor<T>,
    sensing: Arc<Sensing<T>>,
    frames: usize,
    size: (usize, usize),
    padded_size: (usize, usize),
}

impl<T: Scalar> Prepared<T> {
    fn new(y: &Measurement<T>, m: &MaskSet, cfg: &NetworkConfig) -> Result<Self> {
        y.tensor().ensure_shape(&[m.height(), m.width()])?;
        let (h, w) = (m.height(), m.width());
        let (hp, wp) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
        let (y, m) = if (hp, wp) != (h, w) {
            if h < 4 || w < 4 {
                return Err(SciError::InvalidArgument(format!("measurement {h}x{w} is too small to pad")));
            }
            let yp = Measurement::new(kernels::reflect_pad(y.tensor(), hp - h, wp - w))?;
            let mp = MaskSet::from_tensor(&kernels::reflect_pad(&m.to_tensor::<f64>(), hp - h, wp - w))?;
            (yp, mp)
        } else {
            (y.clone(), m.clone())
        };
        let b = m.frames();
        let ybar = normalize_measurement(&y, &m)?;
        let x0 = adjoint(&y, &m)?.into_tensor().reshape(&[1, b, hp, wp])?;
        let r0 = match cfg.residual_init {
            ResidualInit::Zero => Tensor::zeros(&[hp, wp]),
            ResidualInit::Measurement => y.tensor().clone(),
        };
        let pyramid = if cfg.dfma_enabled { Some(measurement_pyramid(ybar.tensor())?) } else { None };
        Ok(Self {
            ybar_rep: replicate_measurement(ybar.tensor(), b),
            y: y.into_tensor(),
            pyramid,
            x0,
            r0,
            sensing: Arc::new(Sensing::new(&m)),
            frames: b,
            size: (h, w),
            padded_size: (hp, wp),
        })
    }

    fn padded(&self) -> bool {
        self.size != self.padded_size
    }

    /// `(1, B, Hp, Wp)` back to `(B, H, W)`.
    fn finish(&self, x: &Tensor<T>) -> Result<VideoBlock<T>> {
        let (h, w) = self.size;
        let (hp, wp) = self.padded_size;
        let x = x.clone().reshape(&[self.frames, hp, wp])?;
        VideoBlock::new(if self.padded() { kernels::crop(&x, h, w) } else { x })
    }

    fn finish_plane(&self, r: &Tensor<T>) -> Result<ResidualAccumulator<T>> {
        let (h, w) = self.size;
        ResidualAccumulator::new(if self.padded() { kernels::crop(r, h, w) } else { r.clone() })
    }
}

/// `(x^0, r^0, no feature map)`.
pub fn init_state<T: Scalar>(
    y: &Measurement<T>,
    m: &MaskSet,
    cfg: &NetworkConfig,
) -> Result<(VideoBlock<T>, ResidualAccumulator<T>, Option<DenseFeatureMap<T>>)> {
    y.tensor().ensure_shape(&[m.height(), m.width()])?;
    let x0 = adjoint(y, m)?;
    let r0 = match cfg.residual_init {
        ResidualInit::Zero => ResidualAccumulator::zeros(m.height(), m.width()),
        ResidualInit::Measurement => ResidualAccumulator::from_measurement(y),
    };
    Ok((x0, r0, None))
}

pub fn reconstruct<T: Scalar>(
    y: &Measurement<T>,
    m: &MaskSet,
    reg: &ParameterRegistry<T>,
    cfg: &NetworkConfig,
) -> Result<VideoBlock<T>> {
    reg.check_config(cfg)?;
    let inp = Prepared::new(y, m, cfg)?;
    let mut ctx = Eval::new(reg.store());
    let x = reg.unroll(&mut ctx, &inp, |_, _, _, _, _| {});
    inp.finish(&x)
}

/// State after one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseState<T> {
    pub r: ResidualAccumulator<T>,
    pub v: VideoBlock<T>,
    pub x: VideoBlock<T>,
}

/// Like [`reconstruct`] but returns every phase's `r^k`, `v^k` and `x^k`.
pub fn reconstruct_trace<T: Scalar>(
    y: &Measurement<T>,
    m: &MaskSet,
    reg: &ParameterRegistry<T>,
) -> Result<Vec<PhaseState<T>>> {
    let inp = Prepared::new(y, m, reg.config())?;
    let mut ctx = Eval::new(reg.store());
    let mut raw = Vec::new();
    reg.unroll(&mut ctx, &inp, |_, _, r, v, x| raw.push((r.clone(), v.clone(), x.clone())));
    raw.into_iter()
        .map(|(r, v, x)| Ok(PhaseState { r: inp.finish_plane(&r)?, v: inp.finish(&v)?, x: inp.finish(&x)? }))
        .collect()
}
