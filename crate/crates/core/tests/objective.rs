use ejection_core::data::{synthetic_dataset, SamplingPolicy, StudyLabel, SyntheticSpec};
use ejection_core::model::{Model, ModelConfig, ParamStore};
use ejection_core::objective::*;
use ejection_core::tensor::Tensor;
use ejection_core::train::make_batch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        train: 8,
        size: 14,
        frames: 16,
        period: 8,
        landmarks: 3,
        ..SyntheticSpec::default()
    }
}

#[test]
fn total_is_ef_plus_weighted_geometry() {
    let data = synthetic_dataset(&spec()).unwrap();
    let labels: Vec<&StudyLabel> = data.iter().map(|s| &s.label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let weights = LossWeights {
        volume_loss: false,
        ..LossWeights::default()
    };
    for _ in 0..20 {
        let ef: Vec<f64> = (0..8).map(|_| rng.random_range(1.0..99.0)).collect();
        let lm = Tensor::new(
            vec![8, 2, 3, 4],
            (0..8 * 24).map(|_| rng.random_range(0.0..14.0)).collect(),
        )
        .unwrap();
        let out = BatchOutputs {
            ef: &ef,
            landmarks: Some(&lm),
            volumes: None,
        };
        let r = total_loss(&out, &labels, &weights).unwrap();
        let expected = r.l_ef + 0.05 * r.l_geo();
        assert!((r.l_total - expected).abs() <= 1e-9 * expected.abs());
        assert!(r.l_vol.is_none());
        assert!(r.ef_surrogate_diag.is_some());
    }
}

#[test]
fn ef_loss_examples() {
    assert_eq!(ef_loss(&[50.0, 60.0], &[50.0, 60.0]).unwrap(), 0.0);
    assert_eq!(ef_loss(&[40.0], &[50.0]).unwrap(), 100.0);
    assert!(ef_loss(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn decoupled_decay_without_gradient() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::full(&[2], 1.0));
    let mut state = AdamState::new(&store);
    let cfg = OptimizerConfig {
        learning_rate: 1.0,
        weight_decay: 1e-3,
        ..OptimizerConfig::default()
    };
    optimizer_step(&mut store, &[Tensor::zeros(&[2])], &mut state, &cfg).unwrap();
    assert_eq!(store.by_index(0).value.data()[0], 0.999f32 as f64);

    let nan = Tensor::full(&[2], f64::NAN);
    let before = store.clone();
    assert!(optimizer_step(&mut store, &[nan], &mut state, &cfg).is_err());
    assert_eq!(store, before);
}

#[test]
fn hundred_steps_halve_the_loss() {
    let data = synthetic_dataset(&spec()).unwrap();
    let mut model = Model::new(ModelConfig::tiny()).unwrap();
    let policy = SamplingPolicy {
        f_sel: 4,
        stride: 2,
        train_random_start: false,
    };
    let refs: Vec<_> = data.iter().collect();
    let batch = make_batch(&refs, &policy, &[0; 8]).unwrap();
    let labels: Vec<&StudyLabel> = data.iter().map(|s| &s.label).collect();
    let cfg = OptimizerConfig {
        learning_rate: 1e-2,
        ..OptimizerConfig::default()
    };
    let mut state = AdamState::new(model.params());
    let weights = LossWeights::default();
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..100 {
        let pass = model.forward_pass(&batch, false).unwrap();
        let out = BatchOutputs {
            ef: pass.ef(),
            landmarks: pass.landmarks(),
            volumes: pass.volumes(),
        };
        let (r, seeds) = total_loss_with_grads(&out, &labels, &weights).unwrap();
        let grads = pass.backward(&seeds).unwrap();
        optimizer_step(model.params_mut(), &grads.params, &mut state, &cfg).unwrap();
        first.get_or_insert(r.l_total);
        last = r.l_total;
    }
    let first = first.unwrap();
    assert!(last <= 0.5 * first, "{first} -> {last}");
}
