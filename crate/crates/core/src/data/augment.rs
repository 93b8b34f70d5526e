use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::volume::{LabelVolume, MultiModalVolume};
use crate::volgrad::Rng;

/// Axis-aligned proper rotation: output axis `a` reads input axis
/// `perm[a]`, reversed when `flip[a]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rotation {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation {
        perm: [0, 1, 2],
        flip: [false; 3],
    };

    /// The 24 orientation-preserving symmetries of the cube.
    pub fn all() -> Vec<Rotation> {
        const PERMS: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let mut out = Vec::with_capacity(24);
        for perm in PERMS {
            let odd = matches!(perm, [0, 2, 1] | [1, 0, 2] | [2, 1, 0]);
            for bits in 0..8u8 {
                let flip = [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0];
                let flips = flip.iter().filter(|&&f| f).count();
                if (flips % 2 == 1) == odd {
                    out.push(Rotation { perm, flip });
                }
            }
        }
        out
    }

    pub fn extents(&self, src: [usize; 3]) -> [usize; 3] {
        self.perm.map(|p| src[p])
    }

    /// Source voxel index for each output voxel, in output order.
    fn gather(&self, src: [usize; 3]) -> Vec<usize> {
        let dst = self.extents(src);
        let strides = [src[1] * src[2], src[2], 1];
        let mut out = Vec::with_capacity(dst.iter().product());
        for z in 0..dst[0] {
            for y in 0..dst[1] {
                for x in 0..dst[2] {
                    let o = [z, y, x];
                    let mut si = 0;
                    for a in 0..3 {
                        let c = if self.flip[a] {
                            dst[a] - 1 - o[a]
                        } else {
                            o[a]
                        };
                        si += c * strides[self.perm[a]];
                    }
                    out.push(si);
                }
            }
        }
        out
    }

    pub fn apply_labels(&self, labels: &LabelVolume) -> LabelVolume {
        let idx = self.gather(labels.extents);
        LabelVolume {
            extents: self.extents(labels.extents),
            labels: idx.iter().map(|&i| labels.labels[i]).collect(),
        }
    }

    pub fn apply_volume(&self, v: &MultiModalVolume) -> MultiModalVolume {
        let idx = self.gather(v.extents);
        let mut data = Vec::with_capacity(v.data.len());
        for c in 0..4 {
            let ch = v.channel(c);
            data.extend(idx.iter().map(|&i| ch[i]));
        }
        MultiModalVolume {
            id: v.id.clone(),
            extents: self.extents(v.extents),
            spacing: self.perm.map(|p| v.spacing[p]),
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentOps {
    pub rotate90s: bool,
    /// Standard deviation of coarse control-point displacements, in voxels;
    /// zero disables the elastic warp.
    pub elastic_amplitude: f64,
}

impl Default for AugmentOps {
    fn default() -> Self {
        Self {
            rotate90s: true,
            elastic_amplitude: 0.0,
        }
    }
}

pub fn augment(
    v: &MultiModalVolume,
    labels: &LabelVolume,
    rng: &mut Rng,
    ops: AugmentOps,
) -> (MultiModalVolume, LabelVolume) {
    let (mut v, mut l) = (v.clone(), labels.clone());
    if ops.rotate90s {
        let rotations = Rotation::all();
        let r = rotations[rng.random_range(0..rotations.len())];
        v = r.apply_volume(&v);
        l = r.apply_labels(&l);
    }
    if ops.elastic_amplitude > 0.0 {
        let field = ElasticField::random(v.extents, ops.elastic_amplitude, rng);
        v = field.warp_volume(&v);
        l = field.warp_labels(&l);
    }
    (v, l)
}

const CONTROL_POINTS: usize = 4;

/// Dense displacement field interpolated trilinearly from a coarse
/// `4×4×4` grid of Gaussian control displacements.
#[derive(Debug, Clone)]
pub struct ElasticField {
    extents: [usize; 3],
    /// `[3, D, H, W]` displacement per axis, in voxels.
    displacement: Vec<f64>,
}

impl ElasticField {
    pub fn random(extents: [usize; 3], amplitude: f64, rng: &mut Rng) -> Self {
        let coarse: Vec<f64> = if amplitude > 0.0 {
            let normal = Normal::new(0.0, amplitude).expect("positive amplitude");
            (0..3 * CONTROL_POINTS.pow(3))
                .map(|_| normal.sample(rng))
                .collect()
        } else {
            vec![0.0; 3 * CONTROL_POINTS.pow(3)]
        };
        let vol: usize = extents.iter().product();
        let mut displacement = vec![0.0; 3 * vol];
        let k = CONTROL_POINTS;
        let to_grid = |i: usize, n: usize| {
            if n == 1 {
                0.0
            } else {
                i as f64 * (k - 1) as f64 / (n - 1) as f64
            }
        };
        let [d, h, w] = extents;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = [to_grid(z, d), to_grid(y, h), to_grid(x, w)];
                    let i = (z * h + y) * w + x;
                    for axis in 0..3 {
                        let grid = &coarse[axis * k * k * k..(axis + 1) * k * k * k];
                        displacement[axis * vol + i] = trilinear([k, k, k], p, |j| grid[j]);
                    }
                }
            }
        }
        Self {
            extents,
            displacement,
        }
    }

    fn source(&self, i: usize) -> [f64; 3] {
        let [_, h, w] = self.extents;
        let vol: usize = self.extents.iter().product();
        let base = [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64];
        std::array::from_fn(|a| base[a] + self.displacement[a * vol + i])
    }

    pub fn warp_volume(&self, v: &MultiModalVolume) -> MultiModalVolume {
        assert_eq!(v.extents, self.extents);
        let vol = v.voxels();
        let mut data = vec![0.0f32; v.data.len()];
        for i in 0..vol {
            let p = self.source(i);
            for c in 0..4 {
                let ch = v.channel(c);
                data[c * vol + i] = trilinear(self.extents, p, |j| ch[j] as f64) as f32;
            }
        }
        MultiModalVolume { data, ..v.clone() }
    }

    pub fn warp_labels(&self, labels: &LabelVolume) -> LabelVolume {
        assert_eq!(labels.extents, self.extents);
        let [d, h, w] = self.extents;
        let labels_out = (0..labels.voxels())
            .map(|i| {
                let p = self.source(i);
                let c = [
                    p[0].round().clamp(0.0, (d - 1) as f64) as usize,
                    p[1].round().clamp(0.0, (h - 1) as f64) as usize,
                    p[2].round().clamp(0.0, (w - 1) as f64) as usize,
                ];
                labels.labels[(c[0] * h + c[1]) * w + c[2]]
            })
            .collect();
        LabelVolume {
            extents: self.extents,
            labels: labels_out,
        }
    }
}

/// Trilinear sample at `p` with border clamping.
fn trilinear(extents: [usize; 3], p: [f64; 3], value: impl Fn(usize) -> f64) -> f64 {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0f64; 3];
    for a in 0..3 {
        let max = (extents[a] - 1) as f64;
        let q = p[a].clamp(0.0, max);
        let f = q.floor();
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(extents[a] - 1);
        t[a] = q - f;
    }
    let idx = |z: usize, y: usize, x: usize| (z * extents[1] + y) * extents[2] + x;
    let mut acc = 0.0;
    for (cz, wz) in [(lo[0], 1.0 - t[0]), (hi[0], t[0])] {
        if wz == 0.0 {
            continue;
        }
        for (cy, wy) in [(lo[1], 1.0 - t[1]), (hi[1], t[1])] {
            if wy == 0.0 {
                continue;
            }
            for (cx, wx) in [(lo[2], 1.0 - t[2]), (hi[2], t[2])] {
                if wx == 0.0 {
                    continue;
                }
                acc += wz * wy * wx * value(idx(cz, cy, cx));
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::volgrad::rng_from_seed;

    fn sample(extents: [usize; 3]) -> (MultiModalVolume, LabelVolume) {
        let vol: usize = extents.iter().product();
        let data = (0..4 * vol)
            .map(|i| ((i * 37) % 101) as f32 * 0.1)
            .collect();
        let labels = (0..vol).map(|i| [0, 1, 2, 4][(i * 7 / 3) % 4]).collect();
        (
            MultiModalVolume::new("c", extents, [1.0, 2.0, 3.0], data).unwrap(),
            LabelVolume::new(extents, labels).unwrap(),
        )
    }

    fn sorted(v: &[f32]) -> Vec<u32> {
        let mut bits: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
        bits.sort_unstable();
        bits
    }

    /// Applies the rotation to a coordinate directly, as an independent
    /// oracle for the gather tables.
    fn rotate_point(r: &Rotation, src: [usize; 3], p: [usize; 3]) -> [usize; 3] {
        let dst = r.extents(src);
        let mut o = [0; 3];
        for a in 0..3 {
            let c = p[r.perm[a]];
            o[a] = if r.flip[a] { dst[a] - 1 - c } else { c };
        }
        o
    }

    fn determinant(r: &Rotation) -> i32 {
        let mut m = [[0i32; 3]; 3];
        for a in 0..3 {
            m[a][r.perm[a]] = if r.flip[a] { -1 } else { 1 };
        }
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    #[test]
    fn twenty_four_distinct_proper_rotations() {
        let all = Rotation::all();
        assert_eq!(all.len(), 24);
        assert!(all.iter().all(|r| determinant(r) == 1));
        let distinct: HashSet<_> = all.iter().map(|r| (r.perm, r.flip)).collect();
        assert_eq!(distinct.len(), 24);
        assert!(all.contains(&Rotation::IDENTITY));
    }

    #[test]
    fn identity_rotation_is_noop() {
        let (v, l) = sample([3, 4, 5]);
        assert_eq!(Rotation::IDENTITY.apply_volume(&v), v);
        assert_eq!(Rotation::IDENTITY.apply_labels(&l), l);
    }

    #[test]
    fn rotations_permute_voxels_consistently() {
        let src = [3, 4, 5];
        let (v, l) = sample(src);
        for r in Rotation::all() {
            let rv = r.apply_volume(&v);
            let rl = r.apply_labels(&l);
            for c in 0..4 {
                assert_eq!(sorted(rv.channel(c)), sorted(v.channel(c)));
            }
            let dst = r.extents(src);
            for i in 0..v.voxels() {
                let p = [i / 20, (i / 5) % 4, i % 5];
                let o = rotate_point(&r, src, p);
                let oi = (o[0] * dst[1] + o[1]) * dst[2] + o[2];
                assert_eq!(rl.labels[oi], l.labels[i]);
                assert_eq!(rv.channel(2)[oi], v.channel(2)[i]);
            }
        }
    }

    #[test]
    fn zero_amplitude_elastic_is_identity() {
        let (v, l) = sample([5, 6, 7]);
        let field = ElasticField::random(v.extents, 0.0, &mut rng_from_seed(1));
        assert_eq!(field.warp_volume(&v), v);
        assert_eq!(field.warp_labels(&l), l);
        let ops = AugmentOps {
            rotate90s: false,
            elastic_amplitude: 0.0,
        };
        assert_eq!(augment(&v, &l, &mut rng_from_seed(2), ops), (v, l));
    }

    #[test]
    fn elastic_warp_keeps_alphabet_and_is_seeded() {
        let (v, l) = sample([8, 8, 8]);
        let ops = AugmentOps {
            rotate90s: true,
            elastic_amplitude: 1.5,
        };
        let a = augment(&v, &l, &mut rng_from_seed(3), ops);
        let b = augment(&v, &l, &mut rng_from_seed(3), ops);
        assert_eq!(a, b);
        assert!(a.1.labels.iter().all(|&x| [0, 1, 2, 4].contains(&x)));
        assert!(a.0.data.iter().all(|x| x.is_finite()));
        assert_ne!(a.0, v);
    }
}
