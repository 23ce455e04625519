use bodl::{EmbeddingOp, Feature, Label, Model, ModelConfig, SparseInstance, VarianceBounds};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_instance(rng: &mut ChaCha8Rng, fields: u32, vocab: u64) -> SparseInstance {
    let m = rng.random_range(1..=fields);
    let features = (1..=m).map(|f| Feature::new(f, f as u64 * 1000 + rng.random_range(0..vocab))).collect();
    let label = if rng.random_bool(0.3) { Label::Click } else { Label::NoClick };
    SparseInstance::new(label, features)
}

fn model(op: EmbeddingOp, hidden: Vec<usize>, seed: u64) -> Model {
    Model::new(ModelConfig {
        embedding_op: op,
        k: 3,
        num_fields: 4,
        hidden_sizes: hidden,
        init_seed: seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

const OPS: [EmbeddingOp; 4] = [EmbeddingOp::Copy, EmbeddingOp::DimensionAwareSum, EmbeddingOp::Fm, EmbeddingOp::Ffm];

#[test]
fn prediction_never_mutates_the_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for op in OPS {
        let mut m = model(op, vec![4], 2);
        for _ in 0..200 {
            m.update(&random_instance(&mut rng, 4, 20)).unwrap();
        }
        let before = m.to_bytes();
        for _ in 0..1000 {
            // vocabulary twice the training one, so half the features are unseen
            let p = m.predict(&random_instance(&mut rng, 4, 40)).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
        assert_eq!(before, m.to_bytes(), "{op}");
    }
}

#[test]
fn variances_stay_within_bounds_over_many_updates() {
    let bounds = VarianceBounds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (i, op) in OPS.into_iter().enumerate() {
        let mut m = model(op, if i % 2 == 0 { vec![3] } else { vec![] }, 7);
        for _ in 0..10_000 / OPS.len() {
            m.update(&random_instance(&mut rng, 4, 6)).unwrap();
        }
        for (id, g) in m.weights() {
            assert!(g.mean().is_finite(), "{op} {id:?}");
            assert!(bounds.contains(g.variance()), "{op} {id:?} {g:?}");
        }
    }
}

#[test]
fn average_evidence_rises_on_a_linear_probit_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut m = Model::new(ModelConfig {
        prior_variance: 1.0,
        ..ModelConfig::linear()
    })
    .unwrap();
    let mut log_z = Vec::new();
    for _ in 0..6000 {
        let a = rng.random_range(0..10u64);
        let b = rng.random_range(10..20u64);
        let score = truth[a as usize] + truth[b as usize];
        let p = bodl::gaussian::normal_cdf(score);
        let label = if rng.random::<f64>() < p { Label::Click } else { Label::NoClick };
        let x = SparseInstance::new(label, vec![Feature::new(1, a), Feature::new(2, b)]);
        log_z.push(m.update(&x).unwrap().log_z);
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (early, late) = (mean(&log_z[..1000]), mean(&log_z[5000..]));
    assert!(late > early, "early {early} late {late}");
}

#[test]
fn fresh_copy_models_predict_one_half() {
    for hidden in [vec![], vec![3, 2]] {
        let m = Model::new(ModelConfig {
            k: 2,
            num_fields: 3,
            hidden_sizes: hidden,
            ..ModelConfig::default()
        })
        .unwrap();
        let x = SparseInstance::new(Label::Click, vec![Feature::new(1, 4), Feature::new(3, 9)]);
        if m.config().hidden_sizes.is_empty() {
            assert_eq!(m.predict(&x).unwrap(), 0.5);
        } else {
            // zero embedding means give zero hidden pre-activation means, but
            // ReLU keeps a positive mean that the random output row mixes
            let p = m.predict(&x).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoint_round_trip_is_exact(op in 0usize..4, seed in 0u64..1000, n in 0usize..40, hidden in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = model(OPS[op], vec![2; hidden], seed);
        for _ in 0..n {
            m.update(&random_instance(&mut rng, 4, 8)).unwrap();
        }
        m.set_sample_rate(rng.random_range(0.01..=1.0)).unwrap();
        let back = Model::from_bytes(&m.to_bytes()).unwrap();
        // the checkpoint stores the resolved jitter, so compare what it encodes
        prop_assert_eq!(back.to_bytes(), m.to_bytes());
        prop_assert_eq!(back.weights(), m.weights());
        prop_assert_eq!(back.config().resolved_jitter(), m.config().resolved_jitter());
        prop_assert_eq!(
            (back.update_count(), back.skip_count(), back.clamp_count()),
            (m.update_count(), m.skip_count(), m.clamp_count())
        );
        let x = random_instance(&mut rng, 4, 8);
        prop_assert_eq!(back.predict(&x).unwrap().to_bits(), m.predict(&x).unwrap().to_bits());
    }

    #[test]
    fn click_and_no_click_probabilities_sum_to_one(op in 0usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = model(OPS[op], vec![3], seed);
        for _ in 0..20 {
            m.update(&random_instance(&mut rng, 4, 5)).unwrap();
        }
        let x = random_instance(&mut rng, 4, 5);
        let flipped = SparseInstance::new(x.label.flipped(), x.features.clone());
        let p = m.predict(&x).unwrap();
        prop_assert_eq!(p, m.predict(&flipped).unwrap());
        let lz = m.forward(&x, false).unwrap().log_z(x.label);
        let lz_other = m.forward(&x, false).unwrap().log_z(x.label.flipped());
        prop_assert!((lz.exp() + lz_other.exp() - 1.0).abs() < 1e-12);
    }
}
