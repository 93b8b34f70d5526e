//! Browser demo: browse a synthetic tumour phantom, corrupt its labels and
//! watch CRF mean-field inference clean them up, and compare pseudo-3D with
//! full 3-D convolution parameter counts.

use rand_distr::{Distribution, Normal};
use serde_json::json;
use vgan3d::crf::{Crf, CrfConfig};
use vgan3d::data::{
    labels_to_channels, phantom_case, zscore, LabelVolume, MultiModalVolume, PhantomSpec,
};
use vgan3d::metrics::{evaluate_case, MetricsReport, Region};
use vgan3d::nn::blocks::{DEPTH_KERNEL, FULL_KERNEL, SPATIAL_KERNEL};
use vgan3d::nn::{count_parameters, LayerSpec};
use vgan3d::volgrad::{rng_from_seed, Tensor};
use vgan3d::Result;
use wasm_bindgen::prelude::*;

/// RGB per label 0, 1, 2, 4.
const PALETTE: [[u8; 3]; 4] = [[0, 0, 0], [60, 170, 80], [230, 200, 40], [220, 50, 50]];

fn label_color(label: u8) -> [u8; 3] {
    match label {
        1 => PALETTE[1],
        2 => PALETTE[2],
        4 => PALETTE[3],
        _ => PALETTE[0],
    }
}

/// One phantom case with a corrupted and a refined segmentation.
pub struct Scene {
    pub volume: MultiModalVolume,
    pub truth: LabelVolume,
    pub corrupted: LabelVolume,
    pub refined: LabelVolume,
}

/// Per-region DSC of the corrupted and refined segmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub before: MetricsReport,
    pub after: MetricsReport,
}

impl Scene {
    pub fn new(size: usize, seed: u64) -> Result<Self> {
        let (volume, truth) = phantom_case(&PhantomSpec::new(size, 1, seed), 0)?;
        Ok(Self {
            volume: zscore(&volume),
            corrupted: truth.clone(),
            refined: truth.clone(),
            truth,
        })
    }

    pub fn size(&self) -> usize {
        self.truth.extents[0]
    }

    /// Adds Gaussian noise of scale `noise` to one-hot unaries of the truth,
    /// then runs `iterations` mean-field steps with the given kernel weights.
    pub fn refine(
        &mut self,
        noise: f64,
        iterations: usize,
        spatial_weight: f32,
        bilateral_weight: f32,
        seed: u64,
    ) -> Result<Refinement> {
        let onehot = labels_to_channels::<f32>(&self.truth)?;
        let normal = Normal::new(0.0f32, noise.max(0.0) as f32).expect("finite scale");
        let mut rng = rng_from_seed(seed);
        let unary = Tensor::from_fn(onehot.shape(), |i| {
            onehot.data()[i] + normal.sample(&mut rng)
        });
        self.corrupted = LabelVolume::from_channels(&unary)?;
        self.refined = if iterations == 0 {
            self.corrupted.clone()
        } else {
            let config = CrfConfig {
                iterations,
                ..CrfConfig::default()
            };
            let labels = onehot.shape()[1];
            let mut crf = Crf::<f32>::new(config, labels)?;
            crf.params
                .get_mut(crf.kernel_weights)
                .data_mut()
                .copy_from_slice(&[spatial_weight, bilateral_weight]);
            let image = self.volume.to_tensor::<f32>();
            LabelVolume::from_channels(&crf.infer(&unary, Some(&image))?)?
        };
        let spacing = self.volume.spacing.map(f64::from);
        Ok(Refinement {
            before: evaluate_case(&self.volume.id, &self.corrupted, &self.truth, spacing)?,
            after: evaluate_case(&self.volume.id, &self.refined, &self.truth, spacing)?,
        })
    }

    /// RGBA bytes of axial slice `z` of modality `channel`, windowed to ±3.
    pub fn intensity_rgba(&self, channel: usize, z: usize) -> Vec<u8> {
        let [_, h, w] = self.volume.extents;
        let plane = &self.volume.channel(channel.min(3))[z.min(self.size() - 1) * h * w..][..h * w];
        plane
            .iter()
            .flat_map(|&v| {
                let g = (((v + 3.0) / 6.0).clamp(0.0, 1.0) * 255.0).round() as u8;
                [g, g, g, 255]
            })
            .collect()
    }

    /// RGBA bytes of axial slice `z` of a segmentation; background is clear.
    pub fn labels_rgba(&self, which: &str, z: usize) -> Vec<u8> {
        let labels = match which {
            "corrupted" => &self.corrupted,
            "refined" => &self.refined,
            _ => &self.truth,
        };
        let [_, h, w] = labels.extents;
        labels.labels[z.min(self.size() - 1) * h * w..][..h * w]
            .iter()
            .flat_map(|&l| {
                let [r, g, b] = label_color(l);
                [r, g, b, if l == 0 { 0 } else { 255 }]
            })
            .collect()
    }
}

/// Weight counts of one pseudo-3D block (1×3×3 then 3×1×1) and one full
/// 3×3×3 convolution at `channels` in and out.
pub fn weight_counts(channels: usize) -> (usize, usize) {
    let conv = |kernel| LayerSpec::Conv {
        in_channels: channels,
        out_channels: channels,
        kernel,
        bias: false,
    };
    (
        count_parameters(&[conv(SPATIAL_KERNEL), conv(DEPTH_KERNEL)]),
        count_parameters(&[conv(FULL_KERNEL)]),
    )
}

fn js(e: vgan3d::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn dsc_json(r: &MetricsReport) -> serde_json::Value {
    Region::ALL
        .iter()
        .map(|&region| (region.name().to_string(), json!(r.region(region).dsc)))
        .collect::<serde_json::Map<_, _>>()
        .into()
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, seed: u64) -> std::result::Result<Demo, JsError> {
        Ok(Self {
            scene: Scene::new(size, seed).map_err(js)?,
        })
    }

    pub fn size(&self) -> usize {
        self.scene.size()
    }

    /// JSON `{"before": {"WT": dsc, ...}, "after": {...}}`.
    pub fn refine(
        &mut self,
        noise: f64,
        iterations: usize,
        spatial_weight: f32,
        bilateral_weight: f32,
        seed: u64,
    ) -> std::result::Result<String, JsError> {
        let r = self
            .scene
            .refine(noise, iterations, spatial_weight, bilateral_weight, seed)
            .map_err(js)?;
        Ok(json!({ "before": dsc_json(&r.before), "after": dsc_json(&r.after) }).to_string())
    }

    pub fn intensity_rgba(&self, channel: usize, z: usize) -> Vec<u8> {
        self.scene.intensity_rgba(channel, z)
    }

    pub fn labels_rgba(&self, which: &str, z: usize) -> Vec<u8> {
        self.scene.labels_rgba(which, z)
    }
}

/// JSON `{"p3d": n, "full": m}`.
#[wasm_bindgen]
pub fn layer_weights(channels: usize) -> String {
    let (p3d, full) = weight_counts(channels);
    json!({ "p3d": p3d, "full": full }).to_string()
}
