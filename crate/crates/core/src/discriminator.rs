//! Stride-1 convolutional critic scoring `(image, segmentation)` pairs with a
//! per-voxel decision map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{IN_CHANNELS, NUM_CLASSES};
use crate::nn::{norm_act, BlockSettings, Bound, ConvLayer, LayerSpec, ParamStore};
use crate::volgrad::{Element, Graph, Rng, Tensor, Var};

pub const KERNEL: [usize; 3] = [4, 4, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Output channels of each layer; the last must be 1.
    pub channels: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 64, 1],
        }
    }
}

impl DiscriminatorConfig {
    /// Default schedule with hidden widths scaled by `base / 64`, at least 1.
    pub fn scaled(base_channels: usize) -> Self {
        let mut channels: Vec<usize> = Self::default()
            .channels
            .iter()
            .map(|&c| (c * base_channels / 64).max(1))
            .collect();
        *channels.last_mut().expect("non-empty schedule") = 1;
        Self { channels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config(
                "discriminator.channels",
                "needs at least one layer",
            ));
        }
        if self.channels.contains(&0) {
            return Err(Error::config(
                "discriminator.channels",
                "widths must be positive",
            ));
        }
        if *self.channels.last().expect("non-empty") != 1 {
            return Err(Error::config(
                "discriminator.channels",
                "final layer must output exactly 1 channel",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<T: Element = f32> {
    pub config: DiscriminatorConfig,
    pub settings: BlockSettings,
    layers: Vec<ConvLayer>,
    pub params: ParamStore<T>,
}

impl<T: Element> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let settings = BlockSettings::default();
        let mut params = ParamStore::new();
        let mut width = IN_CHANNELS + NUM_CLASSES;
        let last = config.channels.len() - 1;
        let layers = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let gain = if i == last { 1.0 } else { settings.slope };
                let layer = ConvLayer::new(
                    &mut params,
                    &format!("disc.conv{i}"),
                    width,
                    out,
                    KERNEL,
                    gain,
                    rng,
                );
                width = out;
                layer
            })
            .collect();
        Ok(Self {
            config,
            settings,
            layers,
            params,
        })
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(ConvLayer::spec).collect()
    }

    /// Decision map `[N, 1, D, H, W]` for image `x` and segmentation `seg`.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var, seg: Var) -> Result<Var> {
        let (xs, ss) = (g.shape(x), g.shape(seg));
        let valid = xs.len() == 5
            && ss.len() == 5
            && xs[1] == IN_CHANNELS
            && ss[1] == NUM_CLASSES
            && xs[0] == ss[0]
            && xs[2..] == ss[2..];
        if !valid {
            return Err(Error::shape("discriminator", xs, ss));
        }
        let mut y = g.concat_channels(x, seg)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            y = layer.apply(g, bound, y, [1, 1, 1])?;
            if i == last {
                break;
            }
            y = if i == 0 {
                g.leaky_relu(y, T::from_f64_lossy(self.settings.slope))
            } else {
                norm_act(g, y, self.settings)?
            };
        }
        Ok(y)
    }

    pub fn score(&self, x: &Tensor<T>, seg: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let (xv, sv) = (g.constant(x.clone()), g.constant(seg.clone()));
        let y = self.forward(&mut g, &bound, xv, sv)?;
        Ok(g.value(y).clone())
    }
}
