//! Operation recording and reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! stores its output together with whatever its derivative needs, and
//! returns a [`Var`] handle. [`Graph::backward`] then walks the tape once in
//! reverse, so each node is visited exactly once after all of its consumers.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

use super::conv::{self, ConvGeometry, Padding};
use super::element::Element;
use super::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed linear operator usable as a graph node, e.g. a frozen filter bank.
/// Backward applies the adjoint.
pub trait LinearMap<T: Element> {
    fn apply(&self, x: &Tensor<T>) -> Tensor<T>;
    fn apply_adjoint(&self, g: &Tensor<T>) -> Tensor<T>;
}

enum Op<T: Element> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale {
        x: Var,
        c: T,
    },
    AddScalar {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    ChannelSum {
        x: Var,
    },
    L2Loss {
        pred: Var,
        target: Var,
    },
    WeightedSum {
        inputs: Vec<Var>,
        weights: Var,
    },
    Linear {
        x: Var,
        map: Rc<dyn LinearMap<T>>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    is_param: bool,
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            is_param: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the current value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        debug_assert!(
            value.is_finite() || inputs.iter().any(|v| !self.nodes[v.0].value.is_finite()),
            "non-finite output from finite inputs"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Var> {
        let geom = conv::conv_geometry(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let out = conv::conv3d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &geom,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, geom }, &inputs))
    }

    /// Adjoint of [`Graph::conv3d`] for the same weight tensor
    /// `[C_y, C_out, kd, kh, kw]`: maps `C_y` input channels to `C_out`, and
    /// with `Same` padding multiplies every extent by its stride.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Var> {
        let geom = conv::conv_transpose_geometry(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let out = conv::conv_transpose3d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &geom,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::ConvTranspose { x, w, b, geom }, &inputs))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        debug_assert!(slope >= T::zero() && slope < T::one());
        let out = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { slope * v });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    /// Standardizes every `(n, c)` slab over its spatial voxels using the
    /// biased variance.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let input = self.value(x);
        let [n, c, ..] = input.dims5()?;
        let vol = input.spatial_len();
        let count = T::from_usize(vol).expect("voxel count");
        let mut out = input.clone();
        let mut inv_std = Vec::with_capacity(n * c);
        for slab in out.data_mut().chunks_mut(vol) {
            let mean = slab.iter().copied().sum::<T>() / count;
            let var = slab.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = (var + eps).sqrt().recip();
            for v in slab.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        Ok(self.push(out, Op::InstanceNorm { x, inv_std }, &[x]))
    }

    /// Softmax over the channel axis of a rank-5 tensor, per voxel.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = softmax_channels(self.value(x))?;
        Ok(self.push(out, Op::Softmax { x }, &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let sa = ta.dims5()?;
        let sb = tb.dims5()?;
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", ta.shape(), tb.shape()));
        }
        let vol = ta.spatial_len();
        let (ca, cb) = (sa[1], sb[1]);
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for n in 0..sa[0] {
            data.extend_from_slice(&ta.data()[n * ca * vol..(n + 1) * ca * vol]);
            data.extend_from_slice(&tb.data()[n * cb * vol..(n + 1) * cb * vol]);
        }
        let out = Tensor::from_vec(&[sa[0], ca + cb, sa[2], sa[3], sa[4]], data)?;
        Ok(self.push(out, Op::Concat { a, b }, &[a, b]))
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R, training: bool) -> Var {
        assert!(
            (0.0..1.0).contains(&p),
            "dropout probability must lie in [0, 1)"
        );
        if !training || p == 0.0 {
            return x;
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = Tensor::from_vec(
            self.shape(x),
            self.value(x)
                .data()
                .iter()
                .zip(&mask)
                .map(|(&v, &m)| v * m)
                .collect(),
        )
        .expect("dropout shape");
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        ta.zip_map(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / T::from_usize(t.len()).expect("count"));
        self.push(out, Op::Mean { x }, &[x])
    }

    /// Per-channel totals over batch and voxels: `[N, C, ...] -> [C]`.
    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, ..] = t.dims5()?;
        let mut sums = vec![T::zero(); c];
        for b in 0..n {
            for (ch, s) in sums.iter_mut().enumerate() {
                *s = *s + t.channel(b, ch).iter().copied().sum();
            }
        }
        let out = Tensor::from_vec(&[c], sums)?;
        Ok(self.push(out, Op::ChannelSum { x }, &[x]))
    }

    /// Mean squared difference over all elements.
    pub fn l2_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape("l2_loss", p.shape(), t.shape()));
        }
        let n = T::from_usize(p.len()).expect("count");
        let total: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let out = Tensor::scalar(total / n);
        Ok(self.push(out, Op::L2Loss { pred, target }, &[pred, target]))
    }

    /// `Σ_m weights[m] · inputs[m]` over equally shaped inputs.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        let w = self.value(weights);
        if w.shape() != [inputs.len()] || inputs.is_empty() {
            return Err(Error::shape("weighted_sum", &[inputs.len()], w.shape()));
        }
        let shape = self.shape(inputs[0]).to_vec();
        let mut out = Tensor::zeros(&shape);
        for (m, &v) in inputs.iter().enumerate() {
            let x = self.value(v);
            if x.shape() != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, x.shape()));
            }
            let wm = self.value(weights).data()[m];
            for (o, &xi) in out.data_mut().iter_mut().zip(x.data()) {
                *o = *o + wm * xi;
            }
        }
        let mut all = inputs.to_vec();
        all.push(weights);
        Ok(self.push(
            out,
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights,
            },
            &all,
        ))
    }

    pub fn linear(&mut self, x: Var, map: Rc<dyn LinearMap<T>>) -> Var {
        let out = map.apply(self.value(x));
        self.push(out, Op::Linear { x, map }, &[x])
    }

    /// Reverse sweep from a scalar `loss`. Every parameter leaf receives a
    /// gradient, zero when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(self.shape(loss), vec![T::one()])?);
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if node.is_param {
                out[i] = Some(g);
                continue;
            }
            self.propagate(node, g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param && out[i].is_none() {
                out[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut send = |v: Var, t: Tensor<T>| {
            if self.nodes[v.0].needs_grad {
                accumulate(grads, v, t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let need = [
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                ];
                let r = conv::conv3d_backward(self.value(*x), self.value(*w), &g, geom, need);
                if let Some(t) = r.input {
                    send(*x, t);
                }
                if let Some(t) = r.weight {
                    send(*w, t);
                }
                if let (Some(b), Some(t)) = (b, r.bias) {
                    send(*b, t);
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let need = [
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                ];
                let r =
                    conv::conv_transpose3d_backward(self.value(*x), self.value(*w), &g, geom, need);
                if let Some(t) = r.input {
                    send(*x, t);
                }
                if let Some(t) = r.weight {
                    send(*w, t);
                }
                if let (Some(b), Some(t)) = (b, r.bias) {
                    send(*b, t);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let input = self.value(*x);
                let gx = g
                    .zip_map(
                        input,
                        |gi, xi| if xi >= T::zero() { gi } else { gi * *slope },
                    )
                    .expect("shape");
                send(*x, gx);
            }
            Op::InstanceNorm { x, inv_std } => {
                let normed = &node.value;
                let vol = normed.spatial_len();
                let count = T::from_usize(vol).expect("count");
                let mut gx = g;
                for ((gs, xs), &inv) in gx
                    .data_mut()
                    .chunks_mut(vol)
                    .zip(normed.data().chunks(vol))
                    .zip(inv_std)
                {
                    let mean_g = gs.iter().copied().sum::<T>() / count;
                    let mean_gx = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>() / count;
                    for (gi, &xi) in gs.iter_mut().zip(xs) {
                        *gi = inv * (*gi - mean_g - xi * mean_gx);
                    }
                }
                send(*x, gx);
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let [n, c, ..] = y.dims5().expect("rank 5");
                let vol = y.spatial_len();
                let mut gx = g;
                for b in 0..n {
                    let base = b * c * vol;
                    for i in 0..vol {
                        let mut dotp = T::zero();
                        for ch in 0..c {
                            let k = base + ch * vol + i;
                            dotp = dotp + gx.data()[k] * y.data()[k];
                        }
                        for ch in 0..c {
                            let k = base + ch * vol + i;
                            gx.data_mut()[k] = y.data()[k] * (gx.data()[k] - dotp);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Concat { a, b } => {
                let sa = self.value(*a).dims5().expect("rank 5");
                let sb = self.value(*b).dims5().expect("rank 5");
                let vol = g.spatial_len();
                let (ca, cb) = (sa[1], sb[1]);
                let mut da = Vec::with_capacity(self.value(*a).len());
                let mut db = Vec::with_capacity(self.value(*b).len());
                for n in 0..sa[0] {
                    let base = n * (ca + cb) * vol;
                    da.extend_from_slice(&g.data()[base..base + ca * vol]);
                    db.extend_from_slice(&g.data()[base + ca * vol..base + (ca + cb) * vol]);
                }
                if self.wants(*a) {
                    send(*a, Tensor::from_vec(&sa, da).expect("shape"));
                }
                if self.wants(*b) {
                    send(*b, Tensor::from_vec(&sb, db).expect("shape"));
                }
            }
            Op::Dropout { x, mask } => {
                let mut gx = g;
                for (gi, &m) in gx.data_mut().iter_mut().zip(mask) {
                    *gi = *gi * m;
                }
                send(*x, gx);
            }
            Op::Add(a, b) => {
                if self.wants(*b) {
                    send(*b, g.clone());
                }
                send(*a, g);
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    send(*b, g.map(|v| -v));
                }
                send(*a, g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    send(
                        *a,
                        g.zip_map(self.value(*b), |gi, bi| gi * bi).expect("shape"),
                    );
                }
                if self.wants(*b) {
                    send(
                        *b,
                        g.zip_map(self.value(*a), |gi, ai| gi * ai).expect("shape"),
                    );
                }
            }
            Op::Div(a, b) => {
                let tb = self.value(*b);
                if self.wants(*a) {
                    send(*a, g.zip_map(tb, |gi, bi| gi / bi).expect("shape"));
                }
                if self.wants(*b) {
                    let ga = g.zip_map(&node.value, |gi, qi| gi * qi).expect("shape");
                    send(*b, ga.zip_map(tb, |v, bi| -v / bi).expect("shape"));
                }
            }
            Op::Scale { x, c } => send(*x, g.map(|v| v * *c)),
            Op::AddScalar { x } => send(*x, g),
            Op::Sum { x } => {
                let gv = g.data()[0];
                send(*x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean { x } => {
                let t = self.value(*x);
                let gv = g.data()[0] / T::from_usize(t.len()).expect("count");
                send(*x, Tensor::full(t.shape(), gv));
            }
            Op::ChannelSum { x } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let mut gx = Tensor::zeros(shape);
                for b in 0..n {
                    for ch in 0..c {
                        gx.channel_mut(b, ch).fill(g.data()[ch]);
                    }
                }
                send(*x, gx);
            }
            Op::L2Loss { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let scale =
                    g.data()[0] * T::from_f64_lossy(2.0) / T::from_usize(p.len()).expect("count");
                let diff = p.zip_map(t, |a, b| (a - b) * scale).expect("shape");
                if self.wants(*target) {
                    send(*target, diff.map(|v| -v));
                }
                if self.wants(*pred) {
                    send(*pred, diff);
                }
            }
            Op::WeightedSum { inputs, weights } => {
                let w = self.value(*weights).data().to_vec();
                if self.wants(*weights) {
                    let gw: Vec<T> = inputs.iter().map(|&v| g.dot(self.value(v))).collect();
                    send(
                        *weights,
                        Tensor::from_vec(&[inputs.len()], gw).expect("shape"),
                    );
                }
                for (&v, &wm) in inputs.iter().zip(&w) {
                    if self.wants(v) {
                        send(v, g.map(|gi| gi * wm));
                    }
                }
            }
            Op::Linear { x, map } => send(*x, map.apply_adjoint(&g)),
        }
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Softmax over channels with max-subtraction.
pub fn softmax_channels<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, ..] = x.dims5()?;
    let vol = x.spatial_len();
    let mut out = x.clone();
    let data = out.data_mut();
    for b in 0..n {
        let base = b * c * vol;
        for i in 0..vol {
            let mut max = T::neg_infinity();
            for ch in 0..c {
                max = max.max(data[base + ch * vol + i]);
            }
            let mut total = T::zero();
            for ch in 0..c {
                let e = (data[base + ch * vol + i] - max).exp();
                data[base + ch * vol + i] = e;
                total = total + e;
            }
            for ch in 0..c {
                data[base + ch * vol + i] = data[base + ch * vol + i] / total;
            }
        }
    }
    Ok(out)
}

/// Gradients produced by one reverse sweep, indexed by [`Var`].
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a parameter leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
