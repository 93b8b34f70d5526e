use crate::error::{Error, Result};
use crate::volgrad::{Element, Tensor};

pub const MODALITIES: [&str; 4] = ["t1", "t1c", "t2", "flair"];
/// Label values in channel order.
pub const LABEL_VALUES: [u8; 4] = [0, 1, 2, 4];

pub fn label_channel(label: u8) -> Option<usize> {
    LABEL_VALUES.iter().position(|&v| v == label)
}

/// Four co-registered intensity channels in `T1, T1c, T2, FLAIR` order,
/// stored channel-major as `[4, D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalVolume {
    pub id: String,
    pub extents: [usize; 3],
    /// Millimetres per voxel along `D, H, W`.
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl MultiModalVolume {
    pub fn new(
        id: impl Into<String>,
        extents: [usize; 3],
        spacing: [f32; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        let vol = voxel_count(extents)?;
        if data.len() != 4 * vol {
            return Err(Error::contract(format!(
                "4 channels of {extents:?} need {} values, got {}",
                4 * vol,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                index: i % vol,
                message: format!("non-finite intensity in channel {}", i / vol),
            });
        }
        Ok(Self {
            id: id.into(),
            extents,
            spacing,
            data,
        })
    }

    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let v = self.voxels();
        &mut self.data[c * v..(c + 1) * v]
    }

    /// `[1, 4, D, H, W]`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let [d, h, w] = self.extents;
        Tensor::from_vec(
            &[1, 4, d, h, w],
            self.data
                .iter()
                .map(|&v| T::from_f64_lossy(v as f64))
                .collect(),
        )
        .expect("extents validated at construction")
    }
}

/// Integer label grid over `{0, 1, 2, 4}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub extents: [usize; 3],
    pub labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(extents: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        let vol = voxel_count(extents)?;
        if labels.len() != vol {
            return Err(Error::contract(format!(
                "label grid {extents:?} needs {vol} values, got {}",
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| label_channel(l).is_none()) {
            return Err(Error::Data {
                index: i,
                message: format!("label {} outside {{0,1,2,4}}", labels[i]),
            });
        }
        Ok(Self { extents, labels })
    }

    pub fn voxels(&self) -> usize {
        self.labels.len()
    }

    /// Labels from per-voxel argmax over a `[1, 4, D, H, W]` tensor.
    pub fn from_channels<T: Element>(channels: &Tensor<T>) -> Result<Self> {
        let [n, c, d, h, w] = channels.dims5()?;
        if n != 1 || c != 4 {
            return Err(Error::shape(
                "labels_from_channels",
                channels.shape(),
                &[1, 4, d, h, w],
            ));
        }
        let labels = channels
            .argmax_channels()
            .into_iter()
            .map(|i| LABEL_VALUES[i])
            .collect();
        Ok(Self {
            extents: [d, h, w],
            labels,
        })
    }
}

fn voxel_count(extents: [usize; 3]) -> Result<usize> {
    if extents.contains(&0) {
        return Err(Error::contract(format!(
            "extents {extents:?} must be positive"
        )));
    }
    Ok(extents.iter().product())
}

/// One-hot `[1, 4, D, H, W]` with channel order `(0, 1, 2, 4)`.
pub fn labels_to_channels<T: Element>(labels: &LabelVolume) -> Result<Tensor<T>> {
    let [d, h, w] = labels.extents;
    let vol = labels.voxels();
    let mut out = Tensor::zeros(&[1, 4, d, h, w]);
    let data = out.data_mut();
    for (i, &l) in labels.labels.iter().enumerate() {
        let c = label_channel(l).ok_or_else(|| Error::Data {
            index: i,
            message: format!("label {l} outside {{0,1,2,4}}"),
        })?;
        data[c * vol + i] = T::one();
    }
    Ok(out)
}

/// Per-channel standardization over nonzero voxels; zero voxels stay zero.
pub fn zscore(v: &MultiModalVolume) -> MultiModalVolume {
    let mut out = v.clone();
    for c in 0..4 {
        let ch = out.channel_mut(c);
        let (mut n, mut sum) = (0usize, 0.0f64);
        for &x in ch.iter().filter(|&&x| x != 0.0) {
            n += 1;
            sum += x as f64;
        }
        if n == 0 {
            continue;
        }
        let mean = sum / n as f64;
        let var = ch
            .iter()
            .filter(|&&x| x != 0.0)
            .map(|&x| (x as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let scale = 1.0 / (var.sqrt() + 1e-8);
        for x in ch.iter_mut().filter(|x| **x != 0.0) {
            *x = ((*x as f64 - mean) * scale) as f32;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CropPolicy {
    /// Window centred on the tumour centre of mass, clamped to the volume.
    #[default]
    CenterOfMass,
    FixedCorner,
}

/// Crops (or zero-pads) volume and labels to `target` extents with the same
/// window.
pub fn crop_subvolume(
    v: &MultiModalVolume,
    labels: &LabelVolume,
    target: [usize; 3],
    policy: CropPolicy,
) -> Result<(MultiModalVolume, LabelVolume)> {
    if v.extents != labels.extents {
        return Err(Error::shape("crop_subvolume", &v.extents, &labels.extents));
    }
    voxel_count(target)?;
    let src = v.extents;
    let centre = match policy {
        CropPolicy::CenterOfMass => tumour_centre(labels),
        CropPolicy::FixedCorner => None,
    };
    // start of the window in source coordinates; negative means padding
    let mut start = [0isize; 3];
    for a in 0..3 {
        let (s, t) = (src[a] as isize, target[a] as isize);
        start[a] = if t > s {
            -((t - s) / 2)
        } else {
            match centre {
                Some(c) => ((c[a] - t as f64 / 2.0).round() as isize).clamp(0, s - t),
                None if policy == CropPolicy::FixedCorner => 0,
                None => (s - t) / 2,
            }
        };
    }
    let [td, th, tw] = target;
    let tvol = td * th * tw;
    let mut data = vec![0.0f32; 4 * tvol];
    let mut out_labels = vec![0u8; tvol];
    let svol = v.voxels();
    for z in 0..td {
        let sz = z as isize + start[0];
        if sz < 0 || sz >= src[0] as isize {
            continue;
        }
        for y in 0..th {
            let sy = y as isize + start[1];
            if sy < 0 || sy >= src[1] as isize {
                continue;
            }
            for x in 0..tw {
                let sx = x as isize + start[2];
                if sx < 0 || sx >= src[2] as isize {
                    continue;
                }
                let si = ((sz as usize) * src[1] + sy as usize) * src[2] + sx as usize;
                let ti = (z * th + y) * tw + x;
                for c in 0..4 {
                    data[c * tvol + ti] = v.data[c * svol + si];
                }
                out_labels[ti] = labels.labels[si];
            }
        }
    }
    Ok((
        MultiModalVolume {
            id: v.id.clone(),
            extents: target,
            spacing: v.spacing,
            data,
        },
        LabelVolume {
            extents: target,
            labels: out_labels,
        },
    ))
}

fn tumour_centre(labels: &LabelVolume) -> Option<[f64; 3]> {
    let [_, h, w] = labels.extents;
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for (i, &l) in labels.labels.iter().enumerate() {
        if l != 0 {
            acc[0] += (i / (h * w)) as f64;
            acc[1] += ((i / w) % h) as f64;
            acc[2] += (i % w) as f64;
            n += 1;
        }
    }
    (n > 0).then(|| acc.map(|a| a / n as f64 + 0.5))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    fn volume(extents: [usize; 3], f: impl Fn(usize, usize) -> f32) -> MultiModalVolume {
        let vol: usize = extents.iter().product();
        let data = (0..4 * vol).map(|i| f(i / vol, i % vol)).collect();
        MultiModalVolume::new("case", extents, [1.0; 3], data).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(MultiModalVolume::new("a", [2, 2, 2], [1.0; 3], vec![0.0; 31]).is_err());
        let err = MultiModalVolume::new(
            "a",
            [1, 1, 2],
            [1.0; 3],
            vec![0.0, f32::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Data { index: 1, .. }));
        let err = LabelVolume::new([1, 1, 3], vec![0, 3, 1]).unwrap_err();
        assert!(matches!(err, Error::Data { index: 1, .. }));
    }

    #[test]
    fn zscore_hand_values() {
        let v = volume([1, 1, 3], |_, i| [1.0, 2.0, 3.0][i]);
        let z = zscore(&v);
        for c in 0..4 {
            for (got, want) in z.channel(c).iter().zip([-1.2247, 0.0, 1.2247]) {
                assert_abs_diff_eq!(*got, want, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn zscore_constant_background_and_idempotence() {
        let constant = zscore(&volume([2, 2, 2], |_, _| 5.0));
        assert!(constant.data.iter().all(|&v| v == 0.0));

        let v = volume([3, 4, 5], |c, i| {
            if i % 7 == 0 {
                0.0
            } else {
                (i * (c + 3)) as f32 % 11.0 + 1.0
            }
        });
        let z = zscore(&v);
        for c in 0..4 {
            let nz: Vec<f64> = z
                .channel(c)
                .iter()
                .filter(|&&x| x != 0.0)
                .map(|&x| x as f64)
                .collect();
            let mean = nz.iter().sum::<f64>() / nz.len() as f64;
            assert!(mean.abs() <= 1e-6);
            for (a, b) in v.channel(c).iter().zip(z.channel(c)) {
                assert_eq!(*a == 0.0, *b == 0.0);
            }
        }
        let zz = zscore(&z);
        for (a, b) in z.data.iter().zip(&zz.data) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn channels_round_trip() {
        let labels = LabelVolume::new([1, 2, 3], vec![0, 1, 2, 4, 4, 0]).unwrap();
        let t = labels_to_channels::<f32>(&labels).unwrap();
        assert_eq!(t.shape(), &[1, 4, 1, 2, 3]);
        assert_eq!(t.data()[3 * 6 + 3], 1.0);
        for v in 0..6 {
            let s: f32 = (0..4).map(|c| t.data()[c * 6 + v]).sum();
            assert_eq!(s, 1.0);
        }
        assert_eq!(LabelVolume::from_channels(&t).unwrap(), labels);
        let bg =
            labels_to_channels::<f32>(&LabelVolume::new([2, 2, 2], vec![0; 8]).unwrap()).unwrap();
        assert!(bg.data()[..8].iter().all(|&v| v == 1.0));
    }

    /// Voxel values encode their source coordinates, so every output voxel
    /// can be traced back to the voxel it was copied from.
    #[test]
    fn crop_keeps_volume_and_labels_aligned() {
        let src = [12, 10, 9];
        let encode = |i: usize| i as f32 + 1.0;
        let v = volume(src, |c, i| encode(i) + 10_000.0 * c as f32);
        let labels: Vec<u8> = (0..src.iter().product())
            .map(|i: usize| {
                let (z, y, x) = (i / 90, (i / 9) % 10, i % 9);
                if z >= 8 && y >= 6 && x >= 6 {
                    4
                } else if (z + y + x) % 5 == 0 {
                    1
                } else {
                    0
                }
            })
            .collect();
        let lv = LabelVolume::new(src, labels.clone()).unwrap();
        let (cv, cl) = crop_subvolume(&v, &lv, [6, 6, 6], CropPolicy::CenterOfMass).unwrap();
        for (ti, &val) in cv.channel(0).iter().enumerate() {
            let si = (val - 1.0) as usize;
            assert_eq!(cl.labels[ti], labels[si]);
            for c in 1..4 {
                assert_eq!(cv.channel(c)[ti], val + 10_000.0 * c as f32);
            }
        }
    }

    #[test]
    fn crop_identity_clamp_and_padding() {
        let v = volume([4, 4, 4], |_, i| i as f32);
        let lv = LabelVolume::new([4, 4, 4], vec![1; 64]).unwrap();
        let (same, same_l) = crop_subvolume(&v, &lv, [4, 4, 4], CropPolicy::CenterOfMass).unwrap();
        assert_eq!(same, v);
        assert_eq!(same_l, lv);

        // tumour in the far corner: window clamped, tumour fully inside
        let mut labels = vec![0u8; 16 * 16 * 16];
        for z in 13..16 {
            for y in 13..16 {
                for x in 13..16 {
                    labels[(z * 16 + y) * 16 + x] = 2;
                }
            }
        }
        let lv = LabelVolume::new([16, 16, 16], labels).unwrap();
        let v = volume([16, 16, 16], |_, _| 1.0);
        let (_, cl) = crop_subvolume(&v, &lv, [8, 8, 8], CropPolicy::CenterOfMass).unwrap();
        assert_eq!(cl.labels.iter().filter(|&&l| l == 2).count(), 27);

        let (padded, pl) = crop_subvolume(&v, &lv, [20, 16, 16], CropPolicy::FixedCorner).unwrap();
        assert_eq!(padded.extents, [20, 16, 16]);
        assert!(padded.channel(0)[..256 * 2].iter().all(|&x| x == 0.0));
        assert_eq!(pl.labels.iter().filter(|&&l| l == 2).count(), 27);
    }

    #[test]
    fn crop_brats_extents() {
        let src = [155, 240, 240];
        let vol: usize = src.iter().product();
        let v = MultiModalVolume::new("b", src, [1.0; 3], vec![0.5; 4 * vol]).unwrap();
        let lv = LabelVolume::new(src, vec![0; vol]).unwrap();
        let (c, l) = crop_subvolume(&v, &lv, [128, 128, 128], CropPolicy::CenterOfMass).unwrap();
        assert_eq!(c.extents, [128, 128, 128]);
        assert_eq!(l.voxels(), 128 * 128 * 128);
    }
}
