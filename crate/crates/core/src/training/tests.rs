use super::*;
use crate::crf::{CrfConfig, KernelSpec};
use crate::data::{phantom_generate, Case, PhantomSpec};
use crate::discriminator::DiscriminatorConfig;
use crate::error::Error;
use crate::generator::GeneratorConfig;
use crate::volgrad::{derive_seed, rng_from_seed, Graph, Tensor};

fn small_models(seed: u64) -> Models<f32> {
    let crf = CrfConfig {
        iterations: 2,
        kernels: vec![KernelSpec::spatial(1.0), KernelSpec::bilateral(1.0, 0.5)],
        ..CrfConfig::default()
    };
    Models::new(
        GeneratorConfig {
            base_channels: 2,
            ..Default::default()
        },
        DiscriminatorConfig::scaled(2),
        crf,
        seed,
    )
    .unwrap()
}

fn samples(count: usize, seed: u64) -> Vec<Sample<f32>> {
    phantom_generate(&PhantomSpec::new(16, count, seed))
        .unwrap()
        .into_iter()
        .map(|(volume, labels)| Sample::from_case(&Case { volume, labels }).unwrap())
        .collect()
}

fn small_trainer(config: TrainConfig) -> Trainer<f32> {
    let mut t = Trainer::new(small_models(config.seed), samples(3, 11), config, 42).unwrap();
    t.record_time = false;
    t
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        lr: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn split_is_fixed_and_disjoint() {
    let (train, val) = split_indices(8, 3);
    assert_eq!((train.len(), val.len()), (6, 2));
    assert_eq!(split_indices(8, 3), (train.clone(), val.clone()));
    let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..8).collect::<Vec<_>>());
    assert_eq!(split_indices(1, 3), (vec![0], vec![]));
    assert_eq!(split_indices(10, 0).1.len(), 2);
}

#[test]
fn stack_concatenates_batches() {
    let a = Tensor::<f32>::from_fn(&[1, 2, 1, 1, 2], |i| i as f32);
    let b = Tensor::<f32>::from_fn(&[1, 2, 1, 1, 2], |i| 10.0 + i as f32);
    let s = stack(&[&a, &b]).unwrap();
    assert_eq!(s.shape(), &[2, 2, 1, 1, 2]);
    assert_eq!(s.channel(1, 0), &[10.0, 11.0]);
    assert!(stack::<f32>(&[]).is_err());
}

#[test]
fn config_validation_names_the_key() {
    let bad = TrainConfig {
        beta1: 1.0,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "train.beta1"));
    let bad = TrainConfig {
        alpha: -1.0,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "train.alpha"));
    TrainConfig::default().validate().unwrap();
}

#[test]
fn log_csv_round_trip_and_monotone_epochs() {
    let mut log = TrainLog::default();
    let row = |epoch, val| TrainLogRow {
        epoch,
        loss_g: 1.5,
        loss_d: 0.25,
        gdl: 0.125,
        adversarial: 0.875,
        dice_train: 0.5,
        dice_val: val,
        seconds: 0.0,
    };
    log.push(row(1, Some(0.75))).unwrap();
    log.push(row(2, None)).unwrap();
    assert!(log.push(row(2, None)).is_err());
    let csv = log.to_csv();
    assert!(csv.starts_with("epoch,loss_g,loss_d,gdl,dice_train,dice_val,seconds\n"));
    let back = TrainLog::from_csv(&csv).unwrap();
    assert_eq!(back.rows().len(), 2);
    assert_eq!(back.rows()[0].dice_val, Some(0.75));
    assert_eq!(back.rows()[1].dice_val, None);
    assert_eq!(back.to_csv(), csv);
    assert!(TrainLog::from_csv("epoch,loss\n").is_err());
}

#[test]
fn alternation_follows_k_critic_steps_then_generator() {
    let mut t = small_trainer(TrainConfig {
        k_disc_steps: 2,
        epochs: 1,
        ..quick_config()
    });
    t.steps = Some(Vec::new());
    t.run_epoch().unwrap();
    let iterations = t.train_ids().len();
    let steps = t.steps.unwrap();
    let mut want = Vec::new();
    for _ in 0..iterations {
        want.extend([Step::Discriminator, Step::Discriminator, Step::Generator]);
    }
    assert_eq!(steps, want);
}

#[test]
fn logged_generator_loss_decomposes() {
    for alpha in [0.0, 5.0] {
        let mut t = small_trainer(TrainConfig {
            alpha,
            ..quick_config()
        });
        train(&mut t, None).unwrap();
        assert_eq!(t.log.rows().len(), 2);
        for r in t.log.rows() {
            assert!(
                (r.loss_g - (r.adversarial + alpha * r.gdl)).abs() <= 1e-6,
                "{r:?}"
            );
            assert!((0.0..=1.0).contains(&r.gdl));
            assert!(r.dice_val.is_some());
        }
    }
}

fn gradients(models: &Models<f32>, sample: &Sample<f32>, alpha: f64) -> Vec<Tensor<f32>> {
    let mut g = Graph::new();
    let mut rng = rng_from_seed(3);
    let pass = models.forward(&mut g, &sample.image, &mut rng).unwrap();
    models
        .generator_objective(&mut g, &pass, &sample.target, alpha, DEFAULT_GDL_EPS)
        .unwrap()
        .generator_grads
}

fn flat(ts: &[Tensor<f32>]) -> Vec<f64> {
    ts.iter()
        .flat_map(|t| t.data().iter().map(|&v| v as f64))
        .collect()
}

#[test]
fn alpha_zero_gradient_is_the_adversarial_gradient() {
    let models = small_models(1);
    let sample = &samples(1, 2)[0];
    let ours = gradients(&models, sample, 0.0);
    let mut g = Graph::new();
    let mut rng = rng_from_seed(3);
    let pass = models.forward(&mut g, &sample.image, &mut rng).unwrap();
    let critic = models.discriminator.params.bind(&mut g, false);
    let d_fake = models
        .discriminator
        .forward(&mut g, &critic, pass.image, pass.beliefs)
        .unwrap();
    let adv = adversarial_loss(&mut g, d_fake).unwrap();
    let grads = g.backward(adv).unwrap();
    let pure = models
        .generator
        .params
        .collect_grads(&grads, &pass.generator);
    let bits = |ts: &[Tensor<f32>]| {
        ts.iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&ours), bits(&pure));
}

#[test]
fn huge_alpha_follows_the_overlap_gradient() {
    let models = small_models(1);
    let sample = &samples(1, 2)[0];
    let big = flat(&gradients(&models, sample, 1e6));
    let mut g = Graph::new();
    let mut rng = rng_from_seed(3);
    let pass = models.forward(&mut g, &sample.image, &mut rng).unwrap();
    let y = g.constant(sample.target.clone());
    let gdl = generalized_dice_loss(&mut g, y, pass.beliefs, DEFAULT_GDL_EPS).unwrap();
    let grads = g.backward(gdl).unwrap();
    let pure = flat(
        &models
            .generator
            .params
            .collect_grads(&grads, &pass.generator),
    );
    let dot: f64 = big.iter().zip(&pure).map(|(a, b)| a * b).sum();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cosine = dot / (norm(&big) * norm(&pure));
    assert!(cosine >= 0.999, "{cosine}");
}

#[test]
fn checkpoint_restores_forward_and_resumes_bitwise() {
    let mut t = small_trainer(quick_config());
    t.run_epoch().unwrap();
    let ck = t.checkpoint();
    let bytes = ck.to_bytes();
    let second = t.run_epoch().unwrap().row;

    let mut resumed = small_trainer(quick_config());
    resumed
        .restore(&Checkpoint::from_bytes(&bytes, Some(42)).unwrap())
        .unwrap();
    assert_eq!(resumed.epoch, 1);
    let x = &samples(1, 9)[0].image;
    let mut original = small_trainer(quick_config());
    original.restore(&ck).unwrap();
    let a = original.models.segment(x, true).unwrap();
    let b = resumed.models.segment(x, true).unwrap();
    assert_eq!(a, b);
    let replay = resumed.run_epoch().unwrap().row;
    assert_eq!(replay, second);
    assert_eq!(resumed.checkpoint().to_bytes(), t.checkpoint().to_bytes());

    let mut other = Trainer::new(small_models(5), samples(3, 11), quick_config(), 7).unwrap();
    assert!(matches!(other.restore(&ck), Err(Error::Config { .. })));
}

#[test]
fn non_finite_loss_aborts_with_term_and_epoch() {
    let mut t = small_trainer(quick_config());
    let id = t.models.generator.params.ids().last().unwrap();
    t.models.generator.params.get_mut(id).data_mut()[0] = f32::NAN;
    match t.run_epoch() {
        Err(Error::Numeric { term, epoch }) => {
            assert_eq!(epoch, 1);
            assert!(["loss_d", "loss_g", "gdl", "adversarial term"].contains(&term));
        }
        other => panic!("expected a numeric abort, got {:?}", other.map(|r| r.row)),
    }
}

#[test]
fn same_seed_same_log() {
    let run = || {
        let mut t = small_trainer(quick_config());
        train(&mut t, None).unwrap();
        t.log.to_csv()
    };
    assert_eq!(run(), run());
    let other = {
        let mut t = small_trainer(TrainConfig {
            seed: derive_seed(5, 1),
            ..quick_config()
        });
        train(&mut t, None).unwrap();
        t.log.to_csv()
    };
    assert_ne!(run(), other);
}

#[test]
fn generator_alone_overfits_one_phantom() {
    let models = Models::<f32>::new(
        GeneratorConfig::default(),
        DiscriminatorConfig::scaled(8),
        CrfConfig::default(),
        0,
    )
    .unwrap();
    let mut generator = models.generator;
    let case = phantom_generate(&PhantomSpec::new(32, 1, 4))
        .unwrap()
        .remove(0);
    let sample = Sample::<f32>::from_case(&Case {
        volume: case.0,
        labels: case.1,
    })
    .unwrap();
    generator
        .set_class_prior(&class_frequencies(&[&sample.target]).unwrap())
        .unwrap();
    let mut adam = AdamState::new(&generator.params);
    let cfg = AdamConfig {
        lr: 1e-2,
        ..Default::default()
    };
    let mut rng = rng_from_seed(1);
    let mut best = 0.0f64;
    for _ in 0..200 {
        let mut g = Graph::new();
        let bound = generator.params.bind(&mut g, true);
        let x = g.constant(sample.image.clone());
        let u = generator
            .forward(&mut g, &bound, x, true, &mut rng)
            .unwrap();
        let p = g.softmax_channels(u).unwrap();
        let y = g.constant(sample.target.clone());
        let loss = generalized_dice_loss(&mut g, y, p, DEFAULT_GDL_EPS).unwrap();
        best = best.max(soft_dice(&sample.target, g.value(p)).unwrap());
        if best >= 0.95 {
            break;
        }
        let grads = g.backward(loss).unwrap();
        let grads = generator.params.collect_grads(&grads, &bound);
        adam_step(&mut generator.params, &grads, &mut adam, &cfg).unwrap();
    }
    assert!(best >= 0.95, "{best}");
}

#[test]
fn class_prior_sets_initial_softmax_to_label_frequencies() {
    let sample = &samples(1, 3)[0];
    let freq = class_frequencies(&[&sample.target]).unwrap();
    assert_eq!(freq.iter().sum::<f64>(), 16.0f64.powi(3));
    let mut models = small_models(2);
    models.generator.set_class_prior(&freq).unwrap();
    let id = models
        .generator
        .params
        .ids()
        .find(|&i| models.generator.params.name(i) == "gen.head.bias")
        .unwrap();
    let bias: Vec<f64> = models
        .generator
        .params
        .get(id)
        .data()
        .iter()
        .map(|&b| b as f64)
        .collect();
    let z: f64 = bias.iter().map(|b| b.exp()).sum();
    for (b, f) in bias.iter().zip(freq) {
        let want = (f / freq.iter().sum::<f64>()).max(1e-6);
        assert!((b.exp() / z - want).abs() < 1e-6, "{bias:?} {freq:?}");
    }
    assert!(models.generator.set_class_prior(&[0.0; 4]).is_err());
}
