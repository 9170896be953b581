use ejection_core::model::{checkpoint, Model, ModelConfig, OutputGrads};
use ejection_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_clip(model: &Model, b: usize, seed: u64) -> Tensor {
    let shape = model.input_shape(b);
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

fn tiny(seed: u64) -> Model {
    Model::new(ModelConfig {
        seed,
        ..ModelConfig::tiny()
    })
    .unwrap()
}

/// Parameter count written out layer by layer.
fn closed_form_count(c: &ModelConfig) -> usize {
    let [c1, c2, c3] = c.channels;
    let k: usize = c.down_kernel.iter().product();
    let big: usize = c.large_kernel.iter().product();
    let (d, l, s) = (c.hidden, c.landmarks, c.se_hidden());
    let mut n = c1 * c.in_channels + c1;
    n += c1 * c1 * k + c1 + c2 * c1 * k + c2 + c3 * c2 * k + c3;
    n += c.hybrid_blocks * (c3 * big + c3 + 2 * s * c3 + s + c3 + c3 * c3 + c3);
    if !c.disable_e2cbd {
        n += (c1 + 1) * d + (c2 + 1) * d + 4 * d; // projections and position
        n += 2 * d; // level embeddings
        n += d * d + d + 2 * d; // fusion and its norm
        n += 2 * l * d; // query banks
        n += 4 * (d * d + d); // attention
        n += d * d + d + 8 * d + 8 + 8 * 8 + 8; // MLP and GLU
        n += 2 * l * d * c3 + c3 + c3 * c3 + c3; // landmark projection
    }
    n += c.descriptor_blocks() * c3 * c3 + c3;
    n += c3 * c.head_outputs() + c.head_outputs();
    n
}

#[test]
fn parameter_counts() {
    let variants = [
        ModelConfig::tiny(),
        ModelConfig::small(),
        ModelConfig::default(),
        ModelConfig {
            disable_e2cbd: true,
            ..ModelConfig::tiny()
        },
        ModelConfig {
            disable_e2fa: true,
            ..ModelConfig::small()
        },
        ModelConfig {
            predict_volumes: true,
            hybrid_blocks: 2,
            ..ModelConfig::tiny()
        },
    ];
    for cfg in variants {
        let m = Model::new(cfg.clone()).unwrap();
        assert_eq!(m.parameter_count(), closed_form_count(&cfg), "{cfg:?}");
    }
    assert_eq!(
        Model::new(ModelConfig::tiny()).unwrap().parameter_count(),
        2177
    );
}

#[test]
fn output_shapes() {
    let m = Model::new(ModelConfig {
        predict_volumes: true,
        ..ModelConfig::tiny()
    })
    .unwrap();
    let pass = m.forward_pass(&random_clip(&m, 3, 1), false).unwrap();
    assert_eq!(pass.ef().len(), 3);
    assert_eq!(pass.landmarks().unwrap().shape(), &[3, 2, 3, 4]);
    assert_eq!(pass.volumes().unwrap().shape(), &[3, 2]);
    assert_eq!(pass.embeddings().unwrap().shape(), &[3, 2, 3, 8]);
    let pyramid = pass.pyramid();
    assert_eq!(pyramid.deepest.shape(), &[3, 4, 4, 2, 2]);
    let preds = pass.predictions();
    assert_eq!(preds.len(), 3);
    assert_eq!(preds[0].cbd.as_ref().unwrap().ed.len(), 3);
}

#[test]
fn rejects_wrong_input() {
    let m = tiny(0);
    let bad = Tensor::zeros(&[1, 1, 5, 14, 14]);
    assert!(matches!(
        m.forward(&bad),
        Err(ejection_core::Error::ShapeMismatch(_))
    ));
}

#[test]
fn deterministic_construction_and_forward() {
    let (a, b) = (tiny(7), tiny(7));
    assert_eq!(a.params(), b.params());
    let clip = random_clip(&a, 2, 3);
    assert_eq!(a.forward(&clip).unwrap(), b.forward(&clip).unwrap());
    assert_ne!(tiny(8).params(), a.params());
}

#[test]
fn ablations_remove_branches() {
    let cfg = ModelConfig {
        disable_e2cbd: true,
        ..ModelConfig::tiny()
    };
    let m = Model::new(cfg).unwrap();
    assert!(m.params().iter().all(|p| !p.name.starts_with("border.")));
    let preds = m.forward(&random_clip(&m, 2, 0)).unwrap();
    assert!(preds
        .iter()
        .all(|p| p.cbd.is_none() && p.ef > 0.0 && p.ef < 100.0));

    let m = Model::new(ModelConfig {
        disable_e2fa: true,
        ..ModelConfig::tiny()
    })
    .unwrap();
    let full = tiny(0);
    assert!(m.parameter_count() < full.parameter_count());
    assert!(m.forward(&random_clip(&m, 1, 0)).unwrap()[0].cbd.is_some());
}

#[test]
fn single_token_budget() {
    let m = Model::new(ModelConfig {
        token_budget: 1,
        ..ModelConfig::tiny()
    })
    .unwrap();
    let pass = m.forward_pass(&random_clip(&m, 2, 0), false).unwrap();
    for row in pass.attention_rows() {
        assert_eq!(row.len(), 1);
        assert!((row[0] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ranges_and_attention_rows() {
    let m = tiny(3);
    for seed in 0..5 {
        let pass = m.forward_pass(&random_clip(&m, 2, seed), false).unwrap();
        assert!(pass.ef().iter().all(|&e| e > 0.0 && e < 100.0));
        assert!(pass
            .landmarks()
            .unwrap()
            .data()
            .iter()
            .all(|&v| (0.0..=14.0).contains(&v)));
        let rows = pass.attention_rows();
        assert!(!rows.is_empty());
        for r in rows {
            assert_eq!(r.len(), 16);
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

fn zero_param(m: &mut Model, name: &str) {
    let id = m.params().find(name).unwrap();
    m.params_mut().get_mut(id).value.data_mut().fill(0.0);
}

#[test]
fn zeroed_glu_centres_landmarks() {
    let mut m = tiny(0);
    zero_param(&mut m, "border.glu.weight");
    zero_param(&mut m, "border.glu.bias");
    let pass = m.forward_pass(&random_clip(&m, 1, 0), false).unwrap();
    assert!(pass.landmarks().unwrap().data().iter().all(|&v| v == 7.0));
}

#[test]
fn zeroed_head_predicts_midpoint() {
    let mut m = tiny(0);
    zero_param(&mut m, "aggregator.head_out.weight");
    zero_param(&mut m, "aggregator.head_out.bias");
    let preds = m.forward(&random_clip(&m, 2, 0)).unwrap();
    assert!(preds.iter().all(|p| p.ef == 50.0));
}

#[test]
fn query_banks_receive_gradient() {
    let m = tiny(1);
    let pass = m.forward_pass(&random_clip(&m, 2, 0), false).unwrap();
    let lm = pass.landmarks().unwrap();
    let seeds = OutputGrads {
        landmarks: Some(Tensor::full(lm.shape(), 1.0)),
        ..OutputGrads::default()
    };
    let back = pass.backward(&seeds).unwrap();
    for name in ["border.queries_ed", "border.queries_es"] {
        let i = m.params().iter().position(|p| p.name == name).unwrap();
        assert!(back.params[i].max_abs() > 0.0, "{name}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::new(ModelConfig {
        predict_volumes: true,
        seed: 5,
        ..ModelConfig::tiny()
    })
    .unwrap();
    let manifest = checkpoint::save(dir.path(), &m, 3).unwrap();
    assert_eq!(manifest.epoch, 3);
    let (back, read) = checkpoint::load(dir.path()).unwrap();
    assert_eq!(read, manifest);
    for (a, b) in m.params().iter().zip(back.params().iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    let clip = random_clip(&m, 2, 9);
    assert_eq!(m.forward(&clip).unwrap(), back.forward(&clip).unwrap());

    let mut other = Model::new(ModelConfig::small()).unwrap();
    assert!(checkpoint::load_into(dir.path(), &mut other).is_err());
}
