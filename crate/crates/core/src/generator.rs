//! V-Net style segmentation generator with a Pseudo-3D residual encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    count_parameters, norm_act, BlockSettings, Bound, ConvLayer, DecoderStage, EncoderStage,
    LayerSpec, ParamStore,
};
use crate::volgrad::{Element, Graph, Rng, Tensor, Var};

pub const IN_CHANNELS: usize = 4;
pub const NUM_CLASSES: usize = 4;
/// Four stride-2 stages.
pub const SPATIAL_DIVISOR: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Backbone {
    #[default]
    ResNet50,
    ResNet101,
    ResNet152,
}

impl Backbone {
    /// Residual blocks per encoder stage.
    pub fn blocks(self) -> [usize; 4] {
        match self {
            Backbone::ResNet50 => [3, 4, 6, 3],
            Backbone::ResNet101 => [3, 4, 23, 3],
            Backbone::ResNet152 => [3, 8, 36, 3],
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "resnet50" => Some(Backbone::ResNet50),
            "resnet101" => Some(Backbone::ResNet101),
            "resnet152" => Some(Backbone::ResNet152),
            _ => None,
        }
    }
}

pub fn backbone_blocks(backbone: Backbone) -> [usize; 4] {
    backbone.blocks()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub backbone: Backbone,
    pub base_channels: usize,
    pub dropout_p: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::ResNet50,
            base_channels: 8,
            dropout_p: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::config("generator.base_channels", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("generator.dropout_p", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Generator<T: Element = f32> {
    pub config: GeneratorConfig,
    pub settings: BlockSettings,
    stem: ConvLayer,
    encoders: Vec<EncoderStage>,
    bottleneck: ConvLayer,
    decoders: Vec<DecoderStage>,
    head: ConvLayer,
    pub params: ParamStore<T>,
}

pub fn build_generator<T: Element>(config: GeneratorConfig, rng: &mut Rng) -> Result<Generator<T>> {
    Generator::new(config, rng)
}

impl<T: Element> Generator<T> {
    pub fn new(config: GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let settings = BlockSettings::default();
        let slope = settings.slope;
        let b = config.base_channels;
        let mut params = ParamStore::new();
        let stem = ConvLayer::new(
            &mut params,
            "gen.stem",
            IN_CHANNELS,
            b,
            [3, 3, 3],
            slope,
            rng,
        );
        let mut encoders = Vec::with_capacity(4);
        let mut width = b;
        for (i, n) in config.backbone.blocks().into_iter().enumerate() {
            let stage =
                EncoderStage::new(&mut params, &format!("gen.enc{i}"), width, n, slope, rng);
            width = stage.out_channels();
            encoders.push(stage);
        }
        let bottleneck = ConvLayer::new(
            &mut params,
            "gen.bottleneck",
            width,
            width,
            [3, 3, 3],
            slope,
            rng,
        );
        let mut decoders = Vec::with_capacity(4);
        for i in (0..4).rev() {
            let stage = DecoderStage::new(&mut params, &format!("gen.dec{i}"), width, slope, rng);
            width = stage.out_channels();
            decoders.push(stage);
        }
        let head = ConvLayer::new(
            &mut params,
            "gen.head",
            width,
            NUM_CLASSES,
            [1, 1, 1],
            1.0,
            rng,
        );
        Ok(Self {
            config,
            settings,
            stem,
            encoders,
            bottleneck,
            decoders,
            head,
            params,
        })
    }

    pub fn encoder_blocks(&self) -> usize {
        self.encoders.iter().map(|e| e.blocks.len()).sum()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = vec![self.stem.spec()];
        for e in &self.encoders {
            specs.extend(e.specs());
        }
        specs.push(self.bottleneck.spec());
        for d in &self.decoders {
            specs.extend(d.specs());
        }
        specs.push(self.head.spec());
        specs
    }

    pub fn parameter_count(&self) -> usize {
        count_parameters(&self.layer_specs())
    }

    /// Class scores `[N, 4, D, H, W]` for an input `[N, 4, D, H, W]`.
    /// Dropout in the bottleneck is active only when `training`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 5 || shape[1] != IN_CHANNELS {
            return Err(Error::shape(
                "generator",
                &shape,
                &[1, IN_CHANNELS, 16, 16, 16],
            ));
        }
        if shape[2..].iter().any(|e| e % SPATIAL_DIVISOR != 0) {
            return Err(Error::contract(format!(
                "generator input extents {:?} must each be divisible by {SPATIAL_DIVISOR}",
                &shape[2..]
            )));
        }
        let s = self.settings;
        let stem = self.stem.apply(g, bound, x, [1, 1, 1])?;
        let mut y = norm_act(g, stem, s)?;
        let mut skips = Vec::with_capacity(4);
        for e in &self.encoders {
            skips.push(y);
            y = e.forward(g, bound, y, s)?;
        }
        let z = self.bottleneck.apply(g, bound, y, [1, 1, 1])?;
        let z = norm_act(g, z, s)?;
        y = g.dropout(z, self.config.dropout_p, rng, training);
        for d in &self.decoders {
            let skip = skips.pop().expect("one skip per stage");
            y = d.forward(g, bound, y, skip, s)?;
        }
        self.head.apply(g, bound, y, [1, 1, 1])
    }

    /// Sets the head bias to the centred log of per-class voxel frequencies
    /// so the initial softmax matches the label prior.
    pub fn set_class_prior(&mut self, frequencies: &[f64; NUM_CLASSES]) -> Result<()> {
        if frequencies.iter().any(|f| !f.is_finite() || *f < 0.0)
            || frequencies.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::contract(format!(
                "class frequencies {frequencies:?} must be non-negative with a positive sum"
            )));
        }
        let total: f64 = frequencies.iter().sum();
        let logs = frequencies.map(|f| (f / total).max(1e-6).ln());
        let mean = logs.iter().sum::<f64>() / NUM_CLASSES as f64;
        let bias = self.params.get_mut(self.head.bias).data_mut();
        for (b, l) in bias.iter_mut().zip(logs) {
            *b = T::from_f64_lossy(l - mean);
        }
        Ok(())
    }

    /// Evaluation-mode forward on plain tensors.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mut rng = crate::volgrad::rng_from_seed(0);
        let y = self.forward(&mut g, &bound, xv, false, &mut rng)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::volgrad::{gradcheck, rng_from_seed, softmax_channels};

    fn config(base: usize) -> GeneratorConfig {
        GeneratorConfig {
            base_channels: base,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn backbone_table() {
        assert_eq!(backbone_blocks(Backbone::ResNet50), [3, 4, 6, 3]);
        assert_eq!(backbone_blocks(Backbone::ResNet101), [3, 4, 23, 3]);
        assert_eq!(backbone_blocks(Backbone::ResNet152), [3, 8, 36, 3]);
        assert_eq!(Backbone::parse("ResNet101"), Some(Backbone::ResNet101));
        assert_eq!(Backbone::parse("vgg"), None);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Generator::<f32>::new(config(4), &mut rng_from_seed(11)).unwrap();
        let b = Generator::<f32>::new(config(4), &mut rng_from_seed(11)).unwrap();
        let c = Generator::<f32>::new(config(4), &mut rng_from_seed(12)).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn parameter_count_is_self_consistent() {
        for backbone in [Backbone::ResNet50, Backbone::ResNet101] {
            let cfg = GeneratorConfig {
                backbone,
                ..config(8)
            };
            let g = Generator::<f32>::new(cfg, &mut rng_from_seed(1)).unwrap();
            assert_eq!(g.parameter_count(), g.params.scalar_count());
        }
    }

    #[test]
    fn resnet152_has_fifty_encoder_blocks() {
        let cfg = GeneratorConfig {
            backbone: Backbone::ResNet152,
            ..config(1)
        };
        let g = Generator::<f32>::new(cfg, &mut rng_from_seed(1)).unwrap();
        assert_eq!(g.encoder_blocks(), 50);
    }

    #[test]
    fn rejects_invalid_config() {
        assert!(Generator::<f32>::new(config(0), &mut rng_from_seed(1)).is_err());
        let cfg = GeneratorConfig {
            dropout_p: 1.0,
            ..config(2)
        };
        assert!(Generator::<f32>::new(cfg, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn forward_shape_and_softmax_and_eval_determinism() {
        let mut rng = rng_from_seed(3);
        let gen = Generator::<f32>::new(config(2), &mut rng).unwrap();
        let x = Tensor::from_fn(&[1, 4, 32, 32, 32], |_| rng.random_range(-2.0..2.0));
        let a = gen.predict(&x).unwrap();
        let b = gen.predict(&x).unwrap();
        assert_eq!(a.shape(), &[1, 4, 32, 32, 32]);
        assert!(a.is_finite());
        assert_eq!(a, b);
        let p = softmax_channels(&a).unwrap();
        let n = 32 * 32 * 32;
        for v in 0..n {
            let s: f32 = (0..4).map(|c| p.data()[c * n + v]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn training_mode_applies_dropout() {
        let mut rng = rng_from_seed(4);
        let gen = Generator::<f32>::new(config(2), &mut rng).unwrap();
        // a 32³ input leaves a 2³ bottleneck; at 16³ it is a single voxel
        // and instance norm zeroes it
        let x = Tensor::from_fn(&[1, 4, 32, 32, 32], |_| rng.random_range(-1.0..1.0));
        let run = |training: bool, seed: u64| {
            let mut g = Graph::new();
            let bound = gen.params.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let y = gen
                .forward(&mut g, &bound, xv, training, &mut rng_from_seed(seed))
                .unwrap();
            g.value(y).clone()
        };
        assert!(run(true, 1) == run(true, 1));
        assert!(run(true, 1) != run(true, 2));
        assert!(run(false, 1) == run(false, 2));
    }

    #[test]
    fn indivisible_extents_rejected() {
        let gen = Generator::<f32>::new(config(1), &mut rng_from_seed(1)).unwrap();
        let err = gen
            .predict(&Tensor::zeros(&[1, 4, 16, 24, 16]))
            .unwrap_err();
        assert!(err.to_string().contains("divisible by 16"), "{err}");
        assert!(gen.predict(&Tensor::zeros(&[1, 3, 16, 16, 16])).is_err());
    }

    /// Sparse finite-difference probe over the input and a sample of the
    /// parameter tensors of a small generator.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(5);
        let gen = Generator::<f64>::new(config(2), &mut rng).unwrap();
        let x = Tensor::from_fn(&[1, 4, 16, 16, 16], |_| rng.random_range(-1.0..1.0));
        let report = generator_gradcheck(&gen, &x, 3, &mut rng);
        assert!(report.max_rel_err() <= 1e-6, "{:?}", report.worst());
    }

    pub(crate) fn generator_gradcheck(
        gen: &Generator<f64>,
        x: &Tensor<f64>,
        probes: usize,
        rng: &mut Rng,
    ) -> gradcheck::GradCheckReport {
        let mut inputs = vec![x.clone()];
        inputs.extend(gen.params.tensors().iter().cloned());
        gradcheck::check_with_step(
            &inputs,
            |g, vars| {
                let bound = Bound::from_vars(vars[1..].to_vec());
                gen.forward(g, &bound, vars[0], true, &mut rng_from_seed(9))
            },
            probes,
            rng,
            gradcheck::composed_step::<f64>,
        )
        .unwrap()
    }
}
