//! Execution contexts for the network.
//!
//! Layers are written once against [`Ctx`]. [`Eval`] runs them eagerly and
//! frees intermediates as soon as they go out of scope; [`Tape`] records every
//! node so that [`Tape::backward`] can produce parameter gradients.

use std::rc::Rc;
use std::sync::Arc;

use crate::data_module::{
    projection_kernel, projection_kernel_backward, residual_kernel, residual_kernel_backward, softplus,
    softplus_derivative, Sensing,
};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, flat collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }
}

pub trait Ctx<T: Scalar> {
    type Var: Clone;

    fn constant(&mut self, t: Tensor<T>) -> Self::Var;
    fn param(&mut self, id: ParamId) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T>;

    fn conv3d(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var, stride: usize) -> Self::Var;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    fn leaky_relu(&mut self, x: &Self::Var, slope: f64) -> Self::Var;
    fn concat(&mut self, xs: &[Self::Var]) -> Self::Var;
    fn upsample2(&mut self, x: &Self::Var) -> Self::Var;
    fn mean_time(&mut self, x: &Self::Var) -> Self::Var;
    fn similarity(&mut self, f: &Self::Var, theta: &Self::Var, nf: usize) -> Self::Var;
    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var;
    fn gate(&mut self, g: &Self::Var, x: &Self::Var) -> Self::Var;
    fn softplus(&mut self, x: &Self::Var) -> Self::Var;
    /// `r_prev + y - Phi x`
    fn residual(&mut self, r_prev: &Self::Var, y: &Self::Var, x: &Self::Var, s: &Arc<Sensing<T>>) -> Self::Var;
    /// `x + Phi^T (r - Phi x) / (mask_sum + eta)`, `eta` a one-element tensor.
    fn projection(&mut self, x: &Self::Var, r: &Self::Var, eta: &Self::Var, s: &Arc<Sensing<T>>) -> Self::Var;
    /// Mean squared error against a constant target.
    fn mse(&mut self, a: &Self::Var, target: &Self::Var) -> Self::Var;
}

/// Eager inference context.
pub struct Eval<'p, T> {
    params: &'p ParamStore<T>,
}

impl<'p, T: Scalar> Eval<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params }
    }
}

type R<T> = Rc<Tensor<T>>;

impl<T: Scalar> Ctx<T> for Eval<'_, T> {
    type Var = R<T>;

    fn constant(&mut self, t: Tensor<T>) -> R<T> {
        Rc::new(t)
    }

    fn param(&mut self, id: ParamId) -> R<T> {
        Rc::new(self.params.get(id).clone())
    }

    fn value<'a>(&'a self, v: &'a R<T>) -> &'a Tensor<T> {
        v
    }

    fn conv3d(&mut self, x: &R<T>, w: &R<T>, b: &R<T>, stride: usize) -> R<T> {
        Rc::new(kernels::conv3d(x, w, Some(b), stride))
    }

    fn add(&mut self, a: &R<T>, b: &R<T>) -> R<T> {
        Rc::new(a.zip_map(b, |x, y| x + y).expect("add operands agree"))
    }

    fn leaky_relu(&mut self, x: &R<T>, slope: f64) -> R<T> {
        Rc::new(kernels::leaky_relu(x, T::of(slope)))
    }

    fn concat(&mut self, xs: &[R<T>]) -> R<T> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|x| x.as_ref()).collect();
        Rc::new(kernels::concat(&refs))
    }

    fn upsample2(&mut self, x: &R<T>) -> R<T> {
        Rc::new(kernels::upsample2(x))
    }

    fn mean_time(&mut self, x: &R<T>) -> R<T> {
        Rc::new(kernels::mean_time(x))
    }

    fn similarity(&mut self, f: &R<T>, theta: &R<T>, nf: usize) -> R<T> {
        Rc::new(kernels::similarity(f, theta, nf))
    }

    fn sigmoid(&mut self, x: &R<T>) -> R<T> {
        Rc::new(kernels::sigmoid(x))
    }

    fn gate(&mut self, g: &R<T>, x: &R<T>) -> R<T> {
        Rc::new(kernels::gate(g, x))
    }

    fn softplus(&mut self, x: &R<T>) -> R<T> {
        Rc::new(x.map(softplus))
    }

    fn residual(&mut self, r_prev: &R<T>, y: &R<T>, x: &R<T>, s: &Arc<Sensing<T>>) -> R<T> {
        Rc::new(residual_kernel(r_prev, y, x, s))
    }

    fn projection(&mut self, x: &R<T>, r: &R<T>, eta: &R<T>, s: &Arc<Sensing<T>>) -> R<T> {
        Rc::new(projection_kernel(x, r, eta.data()[0], s))
    }

    fn mse(&mut self, a: &R<T>, target: &R<T>) -> R<T> {
        Rc::new(Tensor::scalar(mse_value(a, target)))
    }
}

fn mse_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    assert_eq!(a.len(), b.len(), "mse operands differ in size");
    let s: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    s / T::of(a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv { x: usize, w: usize, b: usize, stride: usize },
    Add(usize, usize),
    LeakyRelu { x: usize, slope: T },
    Concat { xs: Vec<usize>, channels: Vec<usize> },
    Upsample(usize),
    MeanTime(usize),
    Similarity { f: usize, theta: usize, nf: usize },
    Sigmoid(usize),
    Gate { g: usize, x: usize },
    Softplus(usize),
    Residual { r_prev: usize, y: usize, x: usize, s: Arc<Sensing<T>> },
    Projection { x: usize, r: usize, eta: usize, s: Arc<Sensing<T>> },
    Mse { a: usize, target: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording context for reverse-mode differentiation.
pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. a recorded node, kept only for nodes passed to
    /// [`Tape::backward_keep`].
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::Conv { x, w, b, .. } => self.ng(*x) || self.ng(*w) || self.ng(*b),
            Op::Add(a, b) => self.ng(*a) || self.ng(*b),
            Op::LeakyRelu { x, .. } | Op::Upsample(x) | Op::MeanTime(x) | Op::Sigmoid(x) | Op::Softplus(x) => {
                self.ng(*x)
            }
            Op::Concat { xs, .. } => xs.iter().any(|&x| self.ng(x)),
            Op::Similarity { f, theta, .. } => self.ng(*f) || self.ng(*theta),
            Op::Gate { g, x } => self.ng(*g) || self.ng(*x),
            Op::Residual { r_prev, y, x, .. } => self.ng(*r_prev) || self.ng(*y) || self.ng(*x),
            Op::Projection { x, r, eta, .. } => self.ng(*x) || self.ng(*r) || self.ng(*eta),
            Op::Mse { a, target } => self.ng(*a) || self.ng(*target),
        };
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    /// Back-propagate from a scalar node.
    pub fn backward(self, loss: NodeId) -> Gradients<T> {
        self.backward_keep(loss, &[])
    }

    /// Like [`Tape::backward`], additionally retaining gradients of `keep`.
    pub fn backward_keep(mut self, loss: NodeId, keep: &[NodeId]) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar output");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut kept: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut params: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], i: usize, g: Tensor<T>) {
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if keep.iter().any(|k| k.0 == i) {
                kept[i] = Some(g.clone());
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            match op {
                Op::Leaf => {}
                Op::Param(id) => match &mut params[id.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::Conv { x, w, b, stride } => {
                    let need_dx = self.ng(x);
                    let cg = kernels::conv3d_backward(self.val(x), self.val(w), &g, stride, need_dx);
                    if let Some(dx) = cg.dx {
                        acc(&mut grads, x, dx);
                    }
                    if self.ng(w) {
                        acc(&mut grads, w, cg.dw);
                    }
                    if self.ng(b) {
                        acc(&mut grads, b, cg.db);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(a) {
                        acc(&mut grads, a, g.clone());
                    }
                    if self.ng(b) {
                        acc(&mut grads, b, g);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let dx = kernels::leaky_relu_backward(self.val(x), &g, slope);
                    acc(&mut grads, x, dx);
                }
                Op::Concat { xs, channels } => {
                    for (x, part) in xs.into_iter().zip(kernels::split(&g, &channels)) {
                        if self.ng(x) {
                            acc(&mut grads, x, part);
                        }
                    }
                }
                Op::Upsample(x) => acc(&mut grads, x, kernels::upsample2_backward(&g)),
                Op::MeanTime(x) => {
                    let t = self.val(x).dim(1);
                    acc(&mut grads, x, kernels::mean_time_backward(&g, t));
                }
                Op::Similarity { f, theta, nf } => {
                    let (df, dth) = kernels::similarity_backward(self.val(f), self.val(theta), &g, nf);
                    if self.ng(f) {
                        acc(&mut grads, f, df);
                    }
                    if self.ng(theta) {
                        acc(&mut grads, theta, dth);
                    }
                }
                Op::Sigmoid(x) => {
                    let s = &self.nodes[i].value;
                    let dx = s.zip_map(&g, |sv, gv| gv * sv * (T::one() - sv)).expect("sigmoid grad");
                    acc(&mut grads, x, dx);
                }
                Op::Gate { g: gi, x } => {
                    let (dg, dx) = kernels::gate_backward(self.val(gi), self.val(x), &g);
                    if self.ng(gi) {
                        acc(&mut grads, gi, dg);
                    }
                    if self.ng(x) {
                        acc(&mut grads, x, dx);
                    }
                }
                Op::Softplus(x) => {
                    let dx = self.val(x).zip_map(&g, |xv, gv| gv * softplus_derivative(xv)).expect("softplus grad");
                    acc(&mut grads, x, dx);
                }
                Op::Residual { r_prev, y, x, s } => {
                    let (dr, dx) = residual_kernel_backward(&g, self.val(x).shape(), &s);
                    if self.ng(y) {
                        acc(&mut grads, y, dr.clone());
                    }
                    if self.ng(r_prev) {
                        acc(&mut grads, r_prev, dr);
                    }
                    if self.ng(x) {
                        acc(&mut grads, x, dx);
                    }
                }
                Op::Projection { x, r, eta, s } => {
                    let e = self.val(eta).data()[0];
                    let pg = projection_kernel_backward(self.val(x), self.val(r), e, &s, &g);
                    if self.ng(x) {
                        acc(&mut grads, x, pg.dx);
                    }
                    if self.ng(r) {
                        acc(&mut grads, r, pg.dr);
                    }
                    if self.ng(eta) {
                        acc(&mut grads, eta, Tensor::scalar(pg.deta));
                    }
                }
                Op::Mse { a, target } => {
                    let (av, tv) = (self.val(a), self.val(target));
                    let scale = g.data()[0] * T::of(2.0) / T::of(av.len() as f64);
                    let da = Tensor::from_vec(
                        av.shape(),
                        av.data().iter().zip(tv.data()).map(|(&x, &y)| (x - y) * scale).collect(),
                    )
                    .expect("mse grad");
                    if self.ng(target) {
                        acc(&mut grads, target, da.map(|v| -v));
                    }
                    if self.ng(a) {
                        acc(&mut grads, a, da);
                    }
                }
            }
            // nothing upstream reads this node's value any more
            self.nodes[i].value = Tensor::zeros(&[0]);
        }
        Gradients { params, nodes: kept }
    }
}

impl<T: Scalar> Ctx<T> for Tape<'_, T> {
    type Var = NodeId;

    fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf)
    }

    fn param(&mut self, id: ParamId) -> NodeId {
        let v = self.params.get(id).clone();
        self.push(v, Op::Param(id))
    }

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn conv3d(&mut self, x: &NodeId, w: &NodeId, b: &NodeId, stride: usize) -> NodeId {
        let y = kernels::conv3d(self.val(x.0), self.val(w.0), Some(self.val(b.0)), stride);
        self.push(y, Op::Conv { x: x.0, w: w.0, b: b.0, stride })
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let y = self.val(a.0).zip_map(self.val(b.0), |x, y| x + y).expect("add operands agree");
        self.push(y, Op::Add(a.0, b.0))
    }

    fn leaky_relu(&mut self, x: &NodeId, slope: f64) -> NodeId {
        let slope = T::of(slope);
        let y = kernels::leaky_relu(self.val(x.0), slope);
        self.push(y, Op::LeakyRelu { x: x.0, slope })
    }

    fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|x| self.val(x.0)).collect();
        let channels = refs.iter().map(|t| t.dim(0)).collect();
        let y = kernels::concat(&refs);
        self.push(y, Op::Concat { xs: xs.iter().map(|x| x.0).collect(), channels })
    }

    fn upsample2(&mut self, x: &NodeId) -> NodeId {
        let y = kernels::upsample2(self.val(x.0));
        self.push(y, Op::Upsample(x.0))
    }

    fn mean_time(&mut self, x: &NodeId) -> NodeId {
        let y = kernels::mean_time(self.val(x.0));
        self.push(y, Op::MeanTime(x.0))
    }

    fn similarity(&mut self, f: &NodeId, theta: &NodeId, nf: usize) -> NodeId {
        let y = kernels::similarity(self.val(f.0), self.val(theta.0), nf);
        self.push(y, Op::Similarity { f: f.0, theta: theta.0, nf })
    }

    fn sigmoid(&mut self, x: &NodeId) -> NodeId {
        let y = kernels::sigmoid(self.val(x.0));
        self.push(y, Op::Sigmoid(x.0))
    }

    fn gate(&mut self, g: &NodeId, x: &NodeId) -> NodeId {
        let y = kernels::gate(self.val(g.0), self.val(x.0));
        self.push(y, Op::Gate { g: g.0, x: x.0 })
    }

    fn softplus(&mut self, x: &NodeId) -> NodeId {
        let y = self.val(x.0).map(softplus);
        self.push(y, Op::Softplus(x.0))
    }

    fn residual(&mut self, r_prev: &NodeId, y: &NodeId, x: &NodeId, s: &Arc<Sensing<T>>) -> NodeId {
        let out = residual_kernel(self.val(r_prev.0), self.val(y.0), self.val(x.0), s);
        self.push(out, Op::Residual { r_prev: r_prev.0, y: y.0, x: x.0, s: s.clone() })
    }

    fn projection(&mut self, x: &NodeId, r: &NodeId, eta: &NodeId, s: &Arc<Sensing<T>>) -> NodeId {
        let out = projection_kernel(self.val(x.0), self.val(r.0), self.val(eta.0).data()[0], s);
        self.push(out, Op::Projection { x: x.0, r: r.0, eta: eta.0, s: s.clone() })
    }

    fn mse(&mut self, a: &NodeId, target: &NodeId) -> NodeId {
        let v = mse_value(self.val(a.0), self.val(target.0));
        self.push(Tensor::scalar(v), Op::Mse { a: a.0, target: target.0 })
    }
}
