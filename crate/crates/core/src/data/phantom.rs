//! Synthetic multimodal volumes with nested ellipsoidal tumour shells.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::volume::{LabelVolume, MultiModalVolume};
use crate::error::{Error, Result};
use crate::volgrad::{derive_seed, rng_from_seed};

/// Mean intensity per modality (`T1, T1c, T2, FLAIR`) of each tissue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastTable {
    pub brain: [f32; 4],
    /// Label 2, the outer shell.
    pub edema: [f32; 4],
    /// Label 1.
    pub core: [f32; 4],
    /// Label 4, innermost.
    pub enhancing: [f32; 4],
}

impl Default for ContrastTable {
    fn default() -> Self {
        Self {
            brain: [1.0, 1.0, 1.0, 1.0],
            edema: [0.85, 0.95, 1.6, 1.9],
            core: [0.6, 0.8, 1.9, 1.3],
            enhancing: [0.9, 2.1, 1.4, 1.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    pub count: usize,
    /// Nominal semi-axes of the whole-tumour, tumour-core and enhancing
    /// ellipsoids, in voxels.
    pub radii: [f64; 3],
    pub contrast: ContrastTable,
    pub noise_sigma: f64,
    /// Relative spread of per-case radius and axis scaling.
    pub radius_jitter: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Radii `(10, 6, 3)` scaled with the grid relative to 32³.
    pub fn new(size: usize, count: usize, seed: u64) -> Self {
        let s = size as f64 / 32.0;
        Self {
            size,
            count,
            radii: [10.0 * s, 6.0 * s, 3.0 * s],
            contrast: ContrastTable::default(),
            noise_sigma: 0.1,
            radius_jitter: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return Err(Error::config(
                "phantom.size",
                format!("{} is not divisible by 16", self.size),
            ));
        }
        let [wt, tc, et] = self.radii;
        if !(wt > tc && tc > et && et > 0.0) {
            return Err(Error::config(
                "phantom.radii",
                format!(
                    "radii {:?} must be strictly nested and positive",
                    self.radii
                ),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(
                "phantom.noise_sigma",
                "must be finite and non-negative",
            ));
        }
        if !(0.0..0.5).contains(&self.radius_jitter) {
            return Err(Error::config(
                "phantom.radius_jitter",
                "must lie in [0, 0.5)",
            ));
        }
        Ok(())
    }
}

pub fn phantom_generate(spec: &PhantomSpec) -> Result<Vec<(MultiModalVolume, LabelVolume)>> {
    spec.validate()?;
    (0..spec.count).map(|i| phantom_case(spec, i)).collect()
}

/// Case `index` of the dataset, drawn from its own derived seed.
pub fn phantom_case(spec: &PhantomSpec, index: usize) -> Result<(MultiModalVolume, LabelVolume)> {
    spec.validate()?;
    let mut rng = rng_from_seed(derive_seed(spec.seed, index as u64));
    let n = spec.size;
    let centre = (n as f64 - 1.0) / 2.0;
    let brain_radius = 0.45 * n as f64;
    let j = spec.radius_jitter;
    let scale = if j > 0.0 {
        rng.random_range(1.0 - j..1.0 + j)
    } else {
        1.0
    };
    let axes: [f64; 3] = std::array::from_fn(|_| {
        if j > 0.0 {
            rng.random_range(1.0 - j..1.0 + j)
        } else {
            1.0
        }
    });
    let radii = spec.radii.map(|r| r * scale);
    let reach = radii[0] * axes.iter().cloned().fold(0.0, f64::max);
    let slack = (brain_radius - reach - 1.0).max(0.0);
    let tumour: [f64; 3] = std::array::from_fn(|_| {
        let off = if slack > 0.0 {
            rng.random_range(-slack..slack) / 3f64.sqrt()
        } else {
            0.0
        };
        centre + off
    });

    let inside = |p: [f64; 3], c: [f64; 3], r: f64| {
        (0..3)
            .map(|a| ((p[a] - c[a]) / (r * axes[a])).powi(2))
            .sum::<f64>()
            <= 1.0
    };
    let vol = n * n * n;
    let mut labels = vec![0u8; vol];
    let mut data = vec![0.0f32; 4 * vol];
    let normal =
        (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("sigma"));
    let t = &spec.contrast;
    for i in 0..vol {
        let p = [(i / (n * n)) as f64, ((i / n) % n) as f64, (i % n) as f64];
        let in_brain = (0..3)
            .map(|a| ((p[a] - centre) / brain_radius).powi(2))
            .sum::<f64>()
            <= 1.0;
        let (label, means) = if inside(p, tumour, radii[2]) {
            (4, Some(t.enhancing))
        } else if inside(p, tumour, radii[1]) {
            (1, Some(t.core))
        } else if inside(p, tumour, radii[0]) {
            (2, Some(t.edema))
        } else if in_brain {
            (0, Some(t.brain))
        } else {
            (0, None)
        };
        labels[i] = label;
        if let Some(means) = means {
            for c in 0..4 {
                let noise = normal.map_or(0.0, |d| d.sample(&mut rng));
                // background outside the brain stays exactly zero
                let v = (means[c] as f64 + noise) as f32;
                data[c * vol + i] = if v == 0.0 { f32::MIN_POSITIVE } else { v };
            }
        }
    }
    let extents = [n, n, n];
    Ok((
        MultiModalVolume::new(format!("case{index:03}"), extents, [1.0; 3], data)?,
        LabelVolume::new(extents, labels)?,
    ))
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn nesting_holds_voxelwise() {
        let spec = PhantomSpec::new(32, 3, 1);
        for (_, labels) in phantom_generate(&spec).unwrap() {
            let counts = [0u8, 1, 2, 4].map(|l| labels.labels.iter().filter(|&&x| x == l).count());
            assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
            // ET ⊆ TC ⊆ WT holds by the region definitions; the shells must
            // also be geometrically nested: every enhancing voxel is
            // surrounded by core or enhancing within one voxel
            let n = 32;
            for (i, &l) in labels.labels.iter().enumerate() {
                if l != 4 {
                    continue;
                }
                let (z, y, x) = (i / (n * n), (i / n) % n, i % n);
                for (dz, dy, dx) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                    for s in [-1isize, 1] {
                        let q = (((z as isize + s * dz) as usize * n)
                            + (y as isize + s * dy) as usize)
                            * n
                            + (x as isize + s * dx) as usize;
                        assert!(matches!(labels.labels[q], 1 | 4));
                    }
                }
            }
        }
    }

    #[test]
    fn noiseless_channels_are_piecewise_constant() {
        let mut spec = PhantomSpec::new(16, 1, 2);
        spec.noise_sigma = 0.0;
        let (v, l) = phantom_case(&spec, 0).unwrap();
        for c in 0..4 {
            let distinct: HashSet<u32> = v.channel(c).iter().map(|x| x.to_bits()).collect();
            assert!(distinct.len() <= 5, "{}", distinct.len());
        }
        let t = spec.contrast;
        for (i, &label) in l.labels.iter().enumerate() {
            let want = match label {
                4 => t.enhancing[1],
                1 => t.core[1],
                2 => t.edema[1],
                _ => continue,
            };
            assert_eq!(v.channel(1)[i], want);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = PhantomSpec::new(16, 2, 9);
        assert_eq!(
            phantom_generate(&spec).unwrap(),
            phantom_generate(&spec).unwrap()
        );
        let other = PhantomSpec::new(16, 2, 10);
        assert_ne!(
            phantom_generate(&spec).unwrap(),
            phantom_generate(&other).unwrap()
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(PhantomSpec::new(30, 1, 0).validate().is_err());
        let mut spec = PhantomSpec::new(32, 1, 0);
        spec.radii = [6.0, 6.0, 3.0];
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("nested"));
    }
}
