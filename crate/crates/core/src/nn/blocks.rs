//! Composite layers: convolution units, the Pseudo-3D residual block and the
//! V-Net encoder/decoder stages built from them.

use crate::error::{Error, Result};
use crate::volgrad::{Element, Graph, Padding, Rng, Tensor, Var};

use super::params::{he_normal, Bound, ParamId, ParamStore};

/// Learnable-tensor layout of one layer, used for parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        bias: bool,
    },
    Bias {
        channels: usize,
    },
}

impl LayerSpec {
    pub fn parameter_count(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                bias,
            } => {
                in_channels * out_channels * kernel.iter().product::<usize>()
                    + if bias { out_channels } else { 0 }
            }
            LayerSpec::Bias { channels } => channels,
        }
    }
}

pub fn count_parameters(layers: &[LayerSpec]) -> usize {
    layers.iter().map(LayerSpec::parameter_count).sum()
}

/// Normalization and activation constants shared by every block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSettings {
    pub norm_eps: f64,
    pub slope: f64,
}

impl Default for BlockSettings {
    fn default() -> Self {
        Self {
            norm_eps: 1e-5,
            slope: 0.2,
        }
    }
}

pub const SPATIAL_KERNEL: [usize; 3] = [1, 3, 3];
pub const DEPTH_KERNEL: [usize; 3] = [3, 1, 1];
pub const FULL_KERNEL: [usize; 3] = [3, 3, 3];

/// Convolution weight `[out, in, kd, kh, kw]` with bias `[out]`.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
}

impl ConvLayer {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        slope: f64,
        rng: &mut Rng,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel[0], kernel[1], kernel[2]];
        let weight = store.add(format!("{name}.weight"), he_normal(&shape, slope, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Conv {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            bias: true,
        }
    }

    pub fn apply<T: Element>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        stride: [usize; 3],
    ) -> Result<Var> {
        g.conv3d(
            x,
            bound.var(self.weight),
            Some(bound.var(self.bias)),
            stride,
            Padding::Same,
        )
    }

    /// Sets weight and bias to zero.
    pub fn zero<T: Element>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.weight).data_mut().fill(T::zero());
        store.get_mut(self.bias).data_mut().fill(T::zero());
    }
}

/// Transposed convolution: weight `[in, out, kd, kh, kw]`, bias `[out]`.
#[derive(Debug, Clone)]
pub struct ConvTransposeLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
}

impl ConvTransposeLayer {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        slope: f64,
        rng: &mut Rng,
    ) -> Self {
        let shape = [in_channels, out_channels, kernel[0], kernel[1], kernel[2]];
        // each output voxel of a stride-2 transpose sees about in·k³/8 taps;
        // fan-in scaling over in·k³ keeps the same order of magnitude
        let weight = store.add(format!("{name}.weight"), he_normal(&shape, slope, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Conv {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            bias: true,
        }
    }

    pub fn apply<T: Element>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        stride: [usize; 3],
    ) -> Result<Var> {
        g.conv_transpose3d(
            x,
            bound.var(self.weight),
            Some(bound.var(self.bias)),
            stride,
            Padding::Same,
        )
    }
}

/// `leaky_relu(instance_norm(x))`.
pub fn norm_act<T: Element>(g: &mut Graph<T>, x: Var, settings: BlockSettings) -> Result<Var> {
    let y = g.instance_norm(x, T::from_f64_lossy(settings.norm_eps))?;
    Ok(g.leaky_relu(y, T::from_f64_lossy(settings.slope)))
}

/// Pseudo-3D residual unit `x + D(S(x))`: an in-slice `1×3×3` filter followed
/// by a through-slice `3×1×1` filter, each followed by instance norm and
/// leaky ReLU. The sum is not normalized again, so zero filters give the
/// identity map.
#[derive(Debug, Clone)]
pub struct P3dBlock {
    pub spatial: ConvLayer,
    pub depth: ConvLayer,
    pub channels: usize,
}

impl P3dBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        slope: f64,
        rng: &mut Rng,
    ) -> Self {
        Self {
            spatial: ConvLayer::new(
                store,
                &format!("{name}.spatial"),
                channels,
                channels,
                SPATIAL_KERNEL,
                slope,
                rng,
            ),
            depth: ConvLayer::new(
                store,
                &format!("{name}.depth"),
                channels,
                channels,
                DEPTH_KERNEL,
                slope,
                rng,
            ),
            channels,
        }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        vec![self.spatial.spec(), self.depth.spec()]
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        settings: BlockSettings,
    ) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(Error::shape(
                "p3d_block",
                g.shape(x),
                &[self.channels, self.channels, 1, 3, 3],
            ));
        }
        let s = self.spatial.apply(g, bound, x, [1, 1, 1])?;
        let s = norm_act(g, s, settings)?;
        let d = self.depth.apply(g, bound, s, [1, 1, 1])?;
        let d = norm_act(g, d, settings)?;
        g.add(x, d)
    }

    pub fn zero<T: Element>(&self, store: &mut ParamStore<T>) {
        self.spatial.zero(store);
        self.depth.zero(store);
    }
}

/// Down-sampling stage: stride-2 `3×3×3` entry convolution doubling the
/// channels, then `n_i` Pseudo-3D blocks.
#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub entry: ConvLayer,
    pub blocks: Vec<P3dBlock>,
}

impl EncoderStage {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        blocks: usize,
        slope: f64,
        rng: &mut Rng,
    ) -> Self {
        let out = 2 * in_channels;
        let entry = ConvLayer::new(
            store,
            &format!("{name}.entry"),
            in_channels,
            out,
            FULL_KERNEL,
            slope,
            rng,
        );
        let blocks = (0..blocks)
            .map(|i| P3dBlock::new(store, &format!("{name}.block{i}"), out, slope, rng))
            .collect();
        Self { entry, blocks }
    }

    pub fn out_channels(&self) -> usize {
        self.entry.out_channels
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut specs = vec![self.entry.spec()];
        for b in &self.blocks {
            specs.extend(b.specs());
        }
        specs
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        settings: BlockSettings,
    ) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 5 || shape[2..].iter().any(|e| e % 2 != 0) {
            return Err(Error::contract(format!(
                "encoder stage needs even spatial extents, got {shape:?}; pad the volume upstream"
            )));
        }
        let y = self.entry.apply(g, bound, x, [2, 2, 2])?;
        let mut y = norm_act(g, y, settings)?;
        for block in &self.blocks {
            y = block.forward(g, bound, y, settings)?;
        }
        Ok(y)
    }
}

/// Up-sampling stage: `3×3×3` stride-2 transposed convolution halving the
/// channels, instance norm and leaky ReLU, concatenation with the skip
/// tensor, then a Pseudo-3D filter pair fusing back to the stage width.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub up: ConvTransposeLayer,
    pub fuse_spatial: ConvLayer,
    pub fuse_depth: ConvLayer,
}

impl DecoderStage {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        slope: f64,
        rng: &mut Rng,
    ) -> Self {
        let out = in_channels / 2;
        Self {
            up: ConvTransposeLayer::new(
                store,
                &format!("{name}.up"),
                in_channels,
                out,
                FULL_KERNEL,
                slope,
                rng,
            ),
            fuse_spatial: ConvLayer::new(
                store,
                &format!("{name}.fuse_spatial"),
                2 * out,
                out,
                SPATIAL_KERNEL,
                slope,
                rng,
            ),
            fuse_depth: ConvLayer::new(
                store,
                &format!("{name}.fuse_depth"),
                out,
                out,
                DEPTH_KERNEL,
                slope,
                rng,
            ),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.up.out_channels
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        vec![
            self.up.spec(),
            self.fuse_spatial.spec(),
            self.fuse_depth.spec(),
        ]
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        skip: Var,
        settings: BlockSettings,
    ) -> Result<Var> {
        let (xs, ss) = (g.shape(x), g.shape(skip));
        let compatible = xs.len() == 5
            && ss.len() == 5
            && xs[0] == ss[0]
            && ss[1] == self.out_channels()
            && (2..5).all(|i| ss[i] == 2 * xs[i]);
        if !compatible {
            return Err(Error::shape("decoder_stage", xs, ss));
        }
        let up = self.up.apply(g, bound, x, [2, 2, 2])?;
        let up = norm_act(g, up, settings)?;
        let joined = g.concat_channels(up, skip)?;
        let y = self.fuse_spatial.apply(g, bound, joined, [1, 1, 1])?;
        let y = norm_act(g, y, settings)?;
        let y = self.fuse_depth.apply(g, bound, y, [1, 1, 1])?;
        norm_act(g, y, settings)
    }
}
