//! Dense CRF with Gaussian pairwise potentials, refined by a fixed number of
//! unrolled mean-field iterations recorded on the autodiff graph.
//!
//! Each pairwise kernel is divided by a global constant (the window mass of
//! its spatial Gaussian), which keeps the message-passing matrix symmetric
//! and bounds messages by one.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::nn::{ParamId, ParamStore};
use crate::volgrad::{Element, Graph, LinearMap, Padding, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    /// Smoothness kernel `exp(−|Δp|² / 2θγ²)`.
    Spatial { theta_gamma: f64, radius: usize },
    /// Appearance kernel `exp(−|Δp|² / 2θα² − ΔI² / 2θβ²)`.
    Bilateral {
        theta_alpha: f64,
        theta_beta: f64,
        radius: usize,
    },
}

impl KernelSpec {
    /// Truncation at `ceil(3θ)` voxels.
    pub fn spatial(theta_gamma: f64) -> Self {
        KernelSpec::Spatial {
            theta_gamma,
            radius: three_sigma(theta_gamma),
        }
    }

    pub fn bilateral(theta_alpha: f64, theta_beta: f64) -> Self {
        KernelSpec::Bilateral {
            theta_alpha,
            theta_beta,
            radius: three_sigma(theta_alpha),
        }
    }

    pub fn radius(&self) -> usize {
        match *self {
            KernelSpec::Spatial { radius, .. } | KernelSpec::Bilateral { radius, .. } => radius,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let key = format!("crf.kernels.{index}");
        let positive = |v: f64| v.is_finite() && v > 0.0;
        match *self {
            KernelSpec::Spatial { theta_gamma, .. } if !positive(theta_gamma) => {
                return Err(Error::config(key, "theta_gamma must be positive"));
            }
            KernelSpec::Bilateral {
                theta_alpha,
                theta_beta,
                ..
            } if !positive(theta_alpha) || !positive(theta_beta) => {
                return Err(Error::config(
                    key,
                    "theta_alpha and theta_beta must be positive",
                ));
            }
            _ => {}
        }
        if self.radius() == 0 {
            return Err(Error::config(key, "truncation radius must be at least 1"));
        }
        Ok(())
    }
}

fn three_sigma(theta: f64) -> usize {
    ((3.0 * theta).ceil() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfConfig {
    pub iterations: usize,
    pub kernels: Vec<KernelSpec>,
    /// Input modality used as the bilateral intensity.
    pub reference_channel: usize,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            kernels: vec![KernelSpec::spatial(3.0), KernelSpec::bilateral(3.0, 0.1)],
            reference_channel: 3,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("crf.iterations", "must be at least 1"));
        }
        if self.kernels.is_empty() {
            return Err(Error::config(
                "crf.kernels",
                "at least one kernel is required",
            ));
        }
        for (i, k) in self.kernels.iter().enumerate() {
            k.validate(i)?;
        }
        Ok(())
    }

    pub fn needs_reference(&self) -> bool {
        self.kernels
            .iter()
            .any(|k| matches!(k, KernelSpec::Bilateral { .. }))
    }
}

fn gaussian_taps(theta: f64, radius: usize) -> Vec<f64> {
    (0..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * theta * theta)).exp())
        .collect()
}

/// Mass of the separable 3D window built from one-sided taps.
fn window_mass(taps: &[f64]) -> f64 {
    let line: f64 = taps[0] + 2.0 * taps[1..].iter().sum::<f64>();
    line * line * line
}

/// Truncated separable Gaussian over every `[N, L]` channel, excluding each
/// voxel's own contribution.
#[derive(Debug, Clone)]
pub struct SpatialFilter {
    shape: [usize; 5],
    taps: Vec<f64>,
    norm: f64,
}

impl SpatialFilter {
    pub fn new(shape: [usize; 5], theta_gamma: f64, radius: usize) -> Self {
        let taps = gaussian_taps(theta_gamma, radius);
        let norm = window_mass(&taps);
        Self { shape, taps, norm }
    }

    /// One 1D pass along an axis with element stride `stride` and length `len`.
    fn pass(&self, src: &[f64], dst: &mut [f64], len: usize, stride: usize, outer: usize) {
        let r = self.taps.len() - 1;
        // volume decomposes as [outer, len, stride]
        for o in 0..outer {
            for inner in 0..stride {
                let base = o * len * stride + inner;
                for i in 0..len {
                    let lo = i.saturating_sub(r);
                    let hi = (i + r).min(len - 1);
                    let mut acc = 0.0;
                    for j in lo..=hi {
                        acc += self.taps[i.abs_diff(j)] * src[base + j * stride];
                    }
                    dst[base + i * stride] = acc;
                }
            }
        }
    }
}

impl<T: Element> LinearMap<T> for SpatialFilter {
    fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(
            x.shape(),
            self.shape,
            "spatial filter built for another grid"
        );
        let [n, l, d, h, w] = self.shape;
        let vol = d * h * w;
        let centre = self.taps[0].powi(3);
        let mut out = Tensor::zeros(x.shape());
        let mut a = vec![0.0; vol];
        let mut b = vec![0.0; vol];
        for ch in 0..n * l {
            let src = &x.data()[ch * vol..(ch + 1) * vol];
            a.iter_mut()
                .zip(src)
                .for_each(|(dst, &v)| *dst = v.to_f64_lossy());
            self.pass(&a, &mut b, w, 1, d * h);
            self.pass(&b, &mut a, h, w, d);
            self.pass(&a, &mut b, d, h * w, 1);
            let dst = &mut out.data_mut()[ch * vol..(ch + 1) * vol];
            for ((o, &s), &v) in dst.iter_mut().zip(&b).zip(src) {
                *o = T::from_f64_lossy((s - centre * v.to_f64_lossy()) / self.norm);
            }
        }
        out
    }

    fn apply_adjoint(&self, g: &Tensor<T>) -> Tensor<T> {
        self.apply(g)
    }
}

/// Entries above which bilateral weights are recomputed on every
/// application instead of stored (512 MiB of `f32`).
const STORED_WEIGHT_LIMIT: usize = 1 << 27;

/// Pair weights below this are dropped so filtering never touches
/// subnormal floats.
const WEIGHT_FLOOR: f32 = 1e-30;

/// Windowed bilateral filter. Offsets are enumerated over one half of the
/// window and each stored weight is scattered in both directions, so the
/// operator is symmetric by construction. Weights are rounded to `f32`
/// whether stored or recomputed.
#[derive(Debug, Clone)]
pub struct BilateralFilter {
    shape: [usize; 5],
    offsets: Vec<[isize; 3]>,
    spatial: Vec<f64>,
    /// `[N, D·H·W]` intensities.
    reference: Vec<f64>,
    inv_two_beta_sq: f64,
    norm: f64,
    stored: Option<Vec<f32>>,
}

impl BilateralFilter {
    pub fn new<T: Element>(
        shape: [usize; 5],
        reference: &Tensor<T>,
        theta_alpha: f64,
        theta_beta: f64,
        radius: usize,
    ) -> Result<Self> {
        let [n, _, d, h, w] = shape;
        let expected = [n, 1, d, h, w];
        if reference.shape() != expected {
            return Err(Error::shape(
                "bilateral_filter",
                reference.shape(),
                &expected,
            ));
        }
        let r = radius as isize;
        let mut offsets = Vec::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if (dz, dy, dx) > (0, 0, 0) {
                        offsets.push([dz, dy, dx]);
                    }
                }
            }
        }
        let spatial = offsets
            .iter()
            .map(|o| {
                let sq = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]) as f64;
                (-sq / (2.0 * theta_alpha * theta_alpha)).exp()
            })
            .collect();
        let mut filter = Self {
            shape,
            offsets,
            spatial,
            reference: reference.data().iter().map(|v| v.to_f64_lossy()).collect(),
            inv_two_beta_sq: 1.0 / (2.0 * theta_beta * theta_beta),
            norm: window_mass(&gaussian_taps(theta_alpha, radius)),
            stored: None,
        };
        let entries = n * d * h * w * filter.offsets.len();
        if entries <= STORED_WEIGHT_LIMIT {
            let mut weights = vec![0.0; entries];
            let mut row = Vec::new();
            filter.for_each_row(|span| {
                filter.row_weights(span, &mut row);
                weights[span.slot..span.slot + span.len].copy_from_slice(&row);
            });
            filter.stored = Some(weights);
        }
        Ok(filter)
    }

    /// Visits every run of in-grid pairs `(i + t, i + t + delta)`,
    /// `t < len`, sharing one offset. Every unordered pair appears once.
    fn for_each_row(&self, mut visit: impl FnMut(Row)) {
        for k in 0..self.offsets.len() {
            for b in 0..self.shape[0] {
                self.for_offset_rows(k, b, &mut visit);
            }
        }
    }

    fn for_offset_rows(&self, k: usize, batch: usize, mut visit: impl FnMut(Row)) {
        let [n, _, d, h, w] = self.shape;
        let vol = d * h * w;
        let range = |o: isize, e: usize| {
            (
                o.min(0).unsigned_abs(),
                (e as isize - o.max(0)).max(0) as usize,
            )
        };
        let o = self.offsets[k];
        let (z0, z1) = range(o[0], d);
        let (y0, y1) = range(o[1], h);
        let (x0, x1) = range(o[2], w);
        if x0 >= x1 {
            return;
        }
        let delta = (o[0] * h as isize + o[1]) * w as isize + o[2];
        for z in z0..z1 {
            for y in y0..y1 {
                let i = (z * h + y) * w + x0;
                visit(Row {
                    offset: k,
                    batch,
                    i,
                    j: (i as isize + delta) as usize,
                    len: x1 - x0,
                    slot: (k * n + batch) * vol + i,
                });
            }
        }
    }

    fn row_weights(&self, span: Row, out: &mut Vec<f32>) {
        let vol = self.shape[2] * self.shape[3] * self.shape[4];
        let intensity = &self.reference[span.batch * vol..(span.batch + 1) * vol];
        let spatial = self.spatial[span.offset];
        out.clear();
        out.extend((0..span.len).map(|t| {
            let di = intensity[span.i + t] - intensity[span.j + t];
            let v = (spatial * (-di * di * self.inv_two_beta_sq).exp()) as f32;
            if v < WEIGHT_FLOOR {
                0.0
            } else {
                v
            }
        }));
    }
}

#[derive(Debug, Clone, Copy)]
struct Row {
    offset: usize,
    batch: usize,
    i: usize,
    j: usize,
    len: usize,
    slot: usize,
}

impl<T: Element> LinearMap<T> for BilateralFilter {
    fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(
            x.shape(),
            self.shape,
            "bilateral filter built for another grid"
        );
        let [n, l, d, h, w] = self.shape;
        let vol = d * h * w;
        let src = x.data();
        let mut acc = vec![T::zero(); src.len()];
        // Weights of one offset over the whole grid, zero where the pair
        // leaves it; stored weights already have this layout.
        let mut plane = vec![0.0f32; vol];
        let mut computed = Vec::new();
        for (k, o) in self.offsets.iter().enumerate() {
            let delta = ((o[0] * h as isize + o[1]) * w as isize + o[2]) as usize;
            if delta >= vol {
                continue;
            }
            let m = vol - delta;
            for b in 0..n {
                let weights = match &self.stored {
                    Some(ws) => &ws[(k * n + b) * vol..][..m],
                    None => {
                        plane.fill(0.0);
                        self.for_offset_rows(k, b, |span| {
                            self.row_weights(span, &mut computed);
                            plane[span.i..span.i + span.len].copy_from_slice(&computed);
                        });
                        &plane[..m]
                    }
                };
                for c in 0..l {
                    let base = (b * l + c) * vol;
                    let src_c = &src[base..base + vol];
                    let acc_c = &mut acc[base..base + vol];
                    for ((a, &wt), &s) in acc_c[..m].iter_mut().zip(weights).zip(&src_c[delta..]) {
                        *a = *a + T::from_f32_exact(wt) * s;
                    }
                    for ((a, &wt), &s) in acc_c[delta..].iter_mut().zip(weights).zip(&src_c[..m]) {
                        *a = *a + T::from_f32_exact(wt) * s;
                    }
                }
            }
        }
        let inv = T::from_f64_lossy(1.0 / self.norm);
        Tensor::from_vec(x.shape(), acc.into_iter().map(|v| v * inv).collect())
            .expect("shape preserved")
    }

    fn apply_adjoint(&self, g: &Tensor<T>) -> Tensor<T> {
        self.apply(g)
    }
}

/// Learnable CRF parameters: kernel weights `w[M]` and label compatibility
/// `μ[L, L]`, stored as a `[L, L, 1, 1, 1]` pointwise convolution weight.
#[derive(Debug, Clone)]
pub struct Crf<T: Element = f32> {
    pub config: CrfConfig,
    pub labels: usize,
    pub kernel_weights: ParamId,
    pub compatibility: ParamId,
    pub params: ParamStore<T>,
}

impl<T: Element> Crf<T> {
    /// Weights initialized to one and a Potts compatibility.
    pub fn new(config: CrfConfig, labels: usize) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let m = config.kernels.len();
        let kernel_weights = params.add("crf.kernel_weights", Tensor::ones(&[m]));
        let potts = Tensor::from_fn(&[labels, labels, 1, 1, 1], |i| {
            if i / labels == i % labels {
                T::zero()
            } else {
                T::one()
            }
        });
        let compatibility = params.add("crf.compatibility", potts);
        Ok(Self {
            config,
            labels,
            kernel_weights,
            compatibility,
            params,
        })
    }

    /// Builds the message-passing operators for one batch. `image` is the
    /// `[N, C, D, H, W]` input volume the bilateral intensity is read from.
    pub fn filters(
        &self,
        shape: [usize; 5],
        image: Option<&Tensor<T>>,
    ) -> Result<Vec<Rc<dyn LinearMap<T>>>> {
        let reference = if self.config.needs_reference() {
            let image = image.ok_or_else(|| {
                Error::contract("bilateral kernel needs a reference image on the same grid")
            })?;
            Some(reference_channel(image, self.config.reference_channel)?)
        } else {
            None
        };
        self.config
            .kernels
            .iter()
            .map(|k| -> Result<Rc<dyn LinearMap<T>>> {
                Ok(match *k {
                    KernelSpec::Spatial {
                        theta_gamma,
                        radius,
                    } => Rc::new(SpatialFilter::new(shape, theta_gamma, radius)),
                    KernelSpec::Bilateral {
                        theta_alpha,
                        theta_beta,
                        radius,
                    } => Rc::new(BilateralFilter::new(
                        shape,
                        reference.as_ref().expect("reference extracted above"),
                        theta_alpha,
                        theta_beta,
                        radius,
                    )?),
                })
            })
            .collect()
    }

    /// One mean-field update: message passing, re-weighting, compatibility
    /// transform, subtraction from the unaries and softmax.
    pub fn step(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        q: Var,
        unary: Var,
        filters: &[Rc<dyn LinearMap<T>>],
    ) -> Result<Var> {
        let messages: Vec<Var> = filters.iter().map(|f| g.linear(q, Rc::clone(f))).collect();
        let weighted = g.weighted_sum(&messages, bound.var(self.kernel_weights))?;
        let penalty = g.conv3d(
            weighted,
            bound.var(self.compatibility),
            None,
            [1, 1, 1],
            Padding::Same,
        )?;
        let logits = g.sub(unary, penalty)?;
        g.softmax_channels(logits)
    }

    /// Beliefs after initialization and after each iteration, in order.
    pub fn forward_trace(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        unary: Var,
        image: Option<&Tensor<T>>,
    ) -> Result<Vec<Var>> {
        let shape = g.value(unary).dims5()?;
        if shape[1] != self.labels {
            return Err(Error::shape(
                "crf",
                g.shape(unary),
                &[shape[0], self.labels, shape[2], shape[3], shape[4]],
            ));
        }
        let filters = self.filters(shape, image)?;
        let mut q = g.softmax_channels(unary)?;
        let mut trace = vec![q];
        for _ in 0..self.config.iterations {
            q = self.step(g, bound, q, unary, &filters)?;
            trace.push(q);
        }
        Ok(trace)
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        unary: Var,
        image: Option<&Tensor<T>>,
    ) -> Result<Var> {
        Ok(*self
            .forward_trace(g, bound, unary, image)?
            .last()
            .expect("initial belief"))
    }

    /// Refined beliefs on plain tensors.
    pub fn infer(&self, unary: &Tensor<T>, image: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let u = g.constant(unary.clone());
        let q = self.forward(&mut g, &bound, u, image)?;
        Ok(g.value(q).clone())
    }
}

/// `[N, 1, D, H, W]` slice of channel `c`.
pub fn reference_channel<T: Element>(image: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
    let [n, channels, d, h, w] = image.dims5()?;
    if c >= channels {
        return Err(Error::contract(format!(
            "reference channel {c} out of range for a {channels}-channel image"
        )));
    }
    let mut data = Vec::with_capacity(n * d * h * w);
    for b in 0..n {
        data.extend_from_slice(image.channel(b, c));
    }
    Tensor::from_vec(&[n, 1, d, h, w], data)
}
