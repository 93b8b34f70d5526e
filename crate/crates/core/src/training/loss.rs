//! Adversarial and overlap objectives.

use crate::error::{Error, Result};
use crate::volgrad::{Element, Graph, Tensor, Var};

pub const DEFAULT_GDL_EPS: f64 = 1e-5;

/// Class weights `1 / (Σ_i y_li + ε)²` of a one-hot target.
pub fn gdl_weights<T: Element>(y: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let [n, l, ..] = y.dims5()?;
    let w = (0..l)
        .map(|c| {
            let mass: f64 = (0..n)
                .map(|b| {
                    y.channel(b, c)
                        .iter()
                        .map(|v| v.to_f64_lossy())
                        .sum::<f64>()
                })
                .sum();
            T::from_f64_lossy(1.0 / ((mass + eps) * (mass + eps)))
        })
        .collect();
    Tensor::from_vec(&[l], w)
}

/// `1 − 2·(Σ_l w_l Σ_i y ŷ + ε) / (Σ_l w_l Σ_i (y + ŷ) + ε)`; `y` enters as
/// a constant.
pub fn generalized_dice_loss<T: Element>(
    g: &mut Graph<T>,
    y: Var,
    yhat: Var,
    eps: f64,
) -> Result<Var> {
    if g.shape(y) != g.shape(yhat) {
        return Err(Error::shape(
            "generalized_dice_loss",
            g.shape(y),
            g.shape(yhat),
        ));
    }
    let weights = g.constant(gdl_weights(g.value(y), eps)?);
    let overlap = g.mul(y, yhat)?;
    let overlap = g.channel_sum(overlap)?;
    let overlap = g.mul(weights, overlap)?;
    let overlap = g.sum(overlap);
    let mass = g.add(y, yhat)?;
    let mass = g.channel_sum(mass)?;
    let mass = g.mul(weights, mass)?;
    let mass = g.sum(mass);
    let e = T::from_f64_lossy(eps);
    let num = g.add_scalar(overlap, e);
    let den = g.add_scalar(mass, e);
    let ratio = g.div(num, den)?;
    let scaled = g.scale(ratio, T::from_f64_lossy(-2.0));
    Ok(g.add_scalar(scaled, T::one()))
}

/// Value of [`generalized_dice_loss`] on plain tensors, in f64.
pub fn gdl_value<T: Element>(y: &Tensor<T>, yhat: &Tensor<T>, eps: f64) -> Result<f64> {
    if y.shape() != yhat.shape() {
        return Err(Error::shape(
            "generalized_dice_loss",
            y.shape(),
            yhat.shape(),
        ));
    }
    let [n, l, ..] = y.dims5()?;
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..l {
        let (mut overlap, mut mass, mut truth) = (0.0, 0.0, 0.0);
        for b in 0..n {
            for (&a, &p) in y.channel(b, c).iter().zip(yhat.channel(b, c)) {
                let (a, p) = (a.to_f64_lossy(), p.to_f64_lossy());
                overlap += a * p;
                mass += a + p;
                truth += a;
            }
        }
        let w = 1.0 / ((truth + eps) * (truth + eps));
        num += w * overlap;
        den += w * mass;
    }
    Ok(1.0 - 2.0 * (num + eps) / (den + eps))
}

/// Least-squares adversarial term `mean((D(x, ŷ) − 1)²)`.
pub fn adversarial_loss<T: Element>(g: &mut Graph<T>, d_fake: Var) -> Result<Var> {
    let ones = g.constant(Tensor::ones(g.shape(d_fake)));
    g.l2_loss(d_fake, ones)
}

/// Graph handles of the generator objective and its parts.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorLoss {
    pub total: Var,
    pub adversarial: Var,
    /// Absent when `alpha == 0`.
    pub gdl: Option<Var>,
}

/// Adversarial term plus `alpha`·GDL. At `alpha == 0` the overlap term is
/// left out of the graph entirely.
pub fn generator_loss_terms<T: Element>(
    g: &mut Graph<T>,
    d_fake: Var,
    y: Var,
    yhat: Var,
    alpha: f64,
    eps: f64,
) -> Result<GeneratorLoss> {
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::config(
            "train.alpha",
            format!("{alpha} must be finite and non-negative"),
        ));
    }
    let adversarial = adversarial_loss(g, d_fake)?;
    if alpha == 0.0 {
        return Ok(GeneratorLoss {
            total: adversarial,
            adversarial,
            gdl: None,
        });
    }
    let gdl = generalized_dice_loss(g, y, yhat, eps)?;
    let weighted = g.scale(gdl, T::from_f64_lossy(alpha));
    Ok(GeneratorLoss {
        total: g.add(adversarial, weighted)?,
        adversarial,
        gdl: Some(gdl),
    })
}

pub fn generator_loss<T: Element>(
    g: &mut Graph<T>,
    d_fake: Var,
    y: Var,
    yhat: Var,
    alpha: f64,
    eps: f64,
) -> Result<Var> {
    Ok(generator_loss_terms(g, d_fake, y, yhat, alpha, eps)?.total)
}

/// `mean((D(x, y) − 1)²) + mean(D(x, ŷ)²)`.
pub fn discriminator_loss<T: Element>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    if g.shape(d_real) != g.shape(d_fake) {
        return Err(Error::shape(
            "discriminator_loss",
            g.shape(d_real),
            g.shape(d_fake),
        ));
    }
    let ones = g.constant(Tensor::ones(g.shape(d_real)));
    let zeros = g.constant(Tensor::zeros(g.shape(d_fake)));
    let real = g.l2_loss(d_real, ones)?;
    let fake = g.l2_loss(d_fake, zeros)?;
    g.add(real, fake)
}

/// Channels of the tumour regions in `[N, 4, ...]` label-distribution
/// tensors: whole tumour, tumour core and enhancing tumour.
pub const REGION_CHANNELS: [&[usize]; 3] = [&[1, 2, 3], &[1, 3], &[3]];

/// Mean over the three tumour regions of `2Σ p t / (Σ p + Σ t)`, with a
/// region's soft membership the summed probability of its labels.
pub fn soft_dice<T: Element>(truth: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    if truth.shape() != pred.shape() {
        return Err(Error::shape("soft_dice", truth.shape(), pred.shape()));
    }
    let [n, l, ..] = truth.dims5()?;
    if l != 4 {
        return Err(Error::shape("soft_dice", truth.shape(), &[n, 4]));
    }
    let vol = truth.spatial_len();
    let mut total = 0.0;
    for channels in REGION_CHANNELS {
        let (mut overlap, mut mass) = (0.0, 0.0);
        for b in 0..n {
            for i in 0..vol {
                let member = |t: &Tensor<T>| {
                    channels
                        .iter()
                        .map(|&c| t.channel(b, c)[i].to_f64_lossy())
                        .sum::<f64>()
                };
                let (t, p) = (member(truth), member(pred));
                overlap += t * p;
                mass += t + p;
            }
        }
        total += if mass == 0.0 {
            1.0
        } else {
            2.0 * overlap / mass
        };
    }
    Ok(total / REGION_CHANNELS.len() as f64)
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::volgrad::{gradcheck, rng_from_seed, softmax_channels};

    fn onehot(labels: &[usize], l: usize, spatial: [usize; 3]) -> Tensor<f64> {
        let vol: usize = spatial.iter().product();
        Tensor::from_fn(&[1, l, spatial[0], spatial[1], spatial[2]], |i| {
            if labels[i % vol] == i / vol {
                1.0
            } else {
                0.0
            }
        })
    }

    fn random_case(
        rng: &mut crate::volgrad::Rng,
        l: usize,
        spatial: [usize; 3],
    ) -> (Tensor<f64>, Tensor<f64>) {
        let vol: usize = spatial.iter().product();
        let labels: Vec<usize> = (0..vol).map(|_| rng.random_range(0..l)).collect();
        let y = onehot(&labels, l, spatial);
        let logits = Tensor::from_fn(y.shape(), |_| rng.random_range(-2.0..2.0));
        (y, softmax_channels(&logits).unwrap())
    }

    fn graph_gdl(y: &Tensor<f64>, yhat: &Tensor<f64>) -> f64 {
        let mut g = Graph::new();
        let (yv, pv) = (g.constant(y.clone()), g.constant(yhat.clone()));
        let l = generalized_dice_loss(&mut g, yv, pv, DEFAULT_GDL_EPS).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let y = onehot(&[0, 1, 1, 2, 0, 3, 3, 3], 4, [2, 2, 2]);
        assert!(graph_gdl(&y, &y) <= 1e-4);
        assert!(gdl_value(&y, &y, DEFAULT_GDL_EPS).unwrap() <= 1e-4);
    }

    #[test]
    fn two_voxel_uniform_fixture() {
        // y = one voxel of each label, ŷ uniform: both classes have |y| = 1,
        // overlap 0.5 and mass 2 each
        let y = onehot(&[0, 1], 2, [1, 1, 2]);
        let yhat = Tensor::full(&[1, 2, 1, 1, 2], 0.5);
        let eps = DEFAULT_GDL_EPS;
        let w = 1.0 / ((1.0 + eps) * (1.0 + eps));
        let want = 1.0 - 2.0 * (w * 0.5 * 2.0 + eps) / (w * 2.0 * 2.0 + eps);
        assert!((graph_gdl(&y, &yhat) - want).abs() < 1e-15);
        assert!((want - 0.5).abs() < 1e-4);
    }

    #[test]
    fn graph_and_direct_values_agree() {
        let mut rng = rng_from_seed(3);
        for _ in 0..10 {
            let (y, p) = random_case(&mut rng, 4, [2, 3, 2]);
            let a = graph_gdl(&y, &p);
            let b = gdl_value(&y, &p, DEFAULT_GDL_EPS).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn loss_decreases_along_interpolation_to_truth() {
        let mut rng = rng_from_seed(4);
        let (y, _) = random_case(&mut rng, 4, [3, 3, 3]);
        let uniform = Tensor::full(y.shape(), 0.25);
        let mut last = f64::INFINITY;
        for k in 0..=100 {
            let t = k as f64 / 100.0;
            let p = uniform.zip_map(&y, |u, a| (1.0 - t) * u + t * a).unwrap();
            let v = gdl_value(&y, &p, DEFAULT_GDL_EPS).unwrap();
            assert!(v < last, "step {k}: {v} >= {last}");
            last = v;
        }
    }

    #[test]
    fn gdl_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(5);
        let (y, _) = random_case(&mut rng, 3, [2, 2, 2]);
        let logits = Tensor::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0));
        let report = gradcheck::check(
            &[logits],
            |g, v| {
                let p = g.softmax_channels(v[0])?;
                let yv = g.constant(y.clone());
                generalized_dice_loss(g, yv, p, DEFAULT_GDL_EPS)
            },
            8,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err() <= 1e-6, "{:?}", report.worst());
    }

    #[test]
    fn discriminator_loss_examples() {
        let mut g = Graph::<f64>::new();
        let ones = g.constant(Tensor::ones(&[1, 1, 2, 2, 2]));
        let zeros = g.constant(Tensor::zeros(&[1, 1, 2, 2, 2]));
        let perfect = discriminator_loss(&mut g, ones, zeros).unwrap();
        assert_eq!(g.value(perfect).data()[0], 0.0);
        let worst = discriminator_loss(&mut g, zeros, ones).unwrap();
        assert_eq!(g.value(worst).data()[0], 2.0);
        let mut rng = rng_from_seed(6);
        for _ in 0..20 {
            let a = g.constant(Tensor::from_fn(&[1, 1, 2, 2, 2], |_| {
                rng.random_range(-3.0..3.0)
            }));
            let b = g.constant(Tensor::from_fn(&[1, 1, 2, 2, 2], |_| {
                rng.random_range(-3.0..3.0)
            }));
            let l = discriminator_loss(&mut g, a, b).unwrap();
            assert!(g.value(l).data()[0] >= 0.0);
        }
        let short = g.constant(Tensor::zeros(&[1, 1, 2, 2, 1]));
        assert!(discriminator_loss(&mut g, ones, short).is_err());
    }

    #[test]
    fn generator_loss_examples() {
        let y = onehot(&[0, 1, 2, 3, 0, 0, 1, 2], 4, [2, 2, 2]);
        let mut g = Graph::<f64>::new();
        let ones = g.constant(Tensor::ones(&[1, 1, 2, 2, 2]));
        let (yv, pv) = (g.constant(y.clone()), g.constant(y.clone()));
        let l = generator_loss(&mut g, ones, yv, pv, 5.0, DEFAULT_GDL_EPS).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-4);

        let mut rng = rng_from_seed(7);
        let (y, p) = random_case(&mut rng, 4, [2, 2, 2]);
        let d = Tensor::from_fn(&[1, 1, 2, 2, 2], |_| rng.random_range(-1.0..1.0));
        let mut g = Graph::<f64>::new();
        let (dv, yv, pv) = (
            g.constant(d.clone()),
            g.constant(y.clone()),
            g.constant(p.clone()),
        );
        let adv = adversarial_loss(&mut g, dv).unwrap();
        let full = generator_loss(&mut g, dv, yv, pv, 5.0, DEFAULT_GDL_EPS).unwrap();
        let pure = generator_loss(&mut g, dv, yv, pv, 0.0, DEFAULT_GDL_EPS).unwrap();
        let gdl = gdl_value(&y, &p, DEFAULT_GDL_EPS).unwrap();
        assert_eq!(g.value(pure).data()[0], g.value(adv).data()[0]);
        assert!((g.value(full).data()[0] - g.value(adv).data()[0] - 5.0 * gdl).abs() < 1e-12);
        assert!(generator_loss(&mut g, dv, yv, pv, -1.0, DEFAULT_GDL_EPS).is_err());
    }

    #[test]
    fn soft_dice_perfect_and_bounded() {
        let y = onehot(&[0, 1, 2, 3, 0, 0, 1, 2], 4, [2, 2, 2]);
        assert_eq!(soft_dice(&y, &y).unwrap(), 1.0);
        let uniform = Tensor::full(y.shape(), 0.25);
        let d = soft_dice(&y, &uniform).unwrap();
        assert!(d > 0.0 && d < 1.0);
    }
}
