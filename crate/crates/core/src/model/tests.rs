use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{apply_transform, center_unit_scale};
use crate::shapes::{gen_dataset, gen_shape, ShapeKind, ShapeSpec};

fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        encoder_widths: vec![4, 6],
        block_width: 5,
        attention_width: 3,
        k_neighbors: 6,
        ..ModelConfig::with_variant(variant)
    }
}

fn airplane(n: usize, seed: u64) -> PointCloud {
    gen_shape(&ShapeSpec::new(ShapeKind::Airplane, n, seed, 0.0)).unwrap()
}

#[test]
fn parameter_counts_match_enumeration() {
    // Counted independently from the layer shapes.
    let want = [
        (Variant::Oavnn, 16075),
        (Variant::Vnn, 7618),
        (Variant::ShellOnly, 8698),
        (Variant::ComplexOnly, 15874),
    ];
    for (v, n) in want {
        assert_eq!(build_model(&ModelConfig::with_variant(v)).unwrap().count(), n, "{v}");
    }
    assert_eq!(build_model(&small_config(Variant::Oavnn)).unwrap().count(), 639);
}

#[test]
fn wiring_follows_the_variant() {
    let vnn = build_model(&ModelConfig::with_variant(Variant::Vnn)).unwrap();
    assert!(vnn.tensors.keys().all(|k| !k.starts_with("attn.")));
    assert!(!vnn.has("blk0.a") && !vnn.has("blk0.b") && !vnn.has("blk0.j"));
    let shell = build_model(&ModelConfig::with_variant(Variant::ShellOnly)).unwrap();
    assert!(shell.has("attn.q") && shell.has("blk0.lin") && !shell.has("blk0.b"));
    assert_eq!(shell.get("attn.q").unwrap().shape(), &[8, 33]);
    let cplx = build_model(&ModelConfig::with_variant(Variant::ComplexOnly)).unwrap();
    assert!(cplx.has("blk1.b") && cplx.has("attn.v"));
    assert_eq!(cplx.get("attn.q").unwrap().shape(), &[8, 32]);
}

#[test]
fn config_validation_and_parsing() {
    for bad in [
        ModelConfig {
            encoder_widths: vec![],
            ..ModelConfig::default()
        },
        ModelConfig {
            block_width: 0,
            ..ModelConfig::default()
        },
        ModelConfig {
            n_shells: 1,
            ..ModelConfig::default()
        },
        ModelConfig {
            learning_rate: f64::NAN,
            ..ModelConfig::default()
        },
    ] {
        assert!(matches!(build_model(&bad), Err(Error::Config(_))));
    }
    // Attention width is irrelevant without attention.
    assert!(build_model(&ModelConfig {
        attention_width: 0,
        ..ModelConfig::with_variant(Variant::Vnn)
    })
    .is_ok());

    assert_eq!("shellonly".parse::<Variant>().unwrap(), Variant::ShellOnly);
    assert!("dgcnn".parse::<Variant>().is_err());
    let c: ModelConfig = serde_json::from_str(r#"{"variant": "VNN", "epochs": 3}"#).unwrap();
    assert_eq!((c.variant, c.epochs, c.block_width), (Variant::Vnn, 3, 32));
    assert!(serde_json::from_str::<ModelConfig>(r#"{"widths": 3}"#).is_err());
}

#[test]
fn checkpoint_round_trips() {
    let p = build_model(&small_config(Variant::Oavnn)).unwrap();
    let text = serde_json::to_string(&p).unwrap();
    let back: ModelParams = serde_json::from_str(&text).unwrap();
    assert_eq!(back, p);
}

#[test]
fn loss_examples() {
    let sat = Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap();
    assert!(loss_ce(&sat, &[0]).unwrap() < 1e-4);
    let flat = Tensor::zeros(&[3, 2]);
    assert!((loss_ce(&flat, &[0, 1, 1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(matches!(loss_ce(&flat, &[0, 2, 1]), Err(Error::Contract(_))));
    assert!(loss_ce(&flat, &[0, 1]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = Tensor::from_fn(&[20, 2], |_| rng.random_range(-5.0..5.0));
    let labels: Vec<u8> = (0..20).map(|_| rng.random_range(0..2)).collect();
    let want = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let (a, b) = (logits.get(&[i, 0]), logits.get(&[i, 1]));
            (a.exp() + b.exp()).ln() - if l == 0 { a } else { b }
        })
        .sum::<f64>()
        / 20.0;
    assert!((loss_ce(&logits, &labels).unwrap() - want).abs() < 1e-12);
}

#[test]
fn prediction_and_accuracy() {
    let logits = Tensor::new(vec![3, 2], vec![1.0, 2.0, 0.5, 0.5, 3.0, -1.0]).unwrap();
    assert_eq!(predict(&logits), vec![1, 0, 0]);
    assert_eq!(pointwise_accuracy(&logits, &[1, 0, 0]), 1.0);
    assert_eq!(pointwise_accuracy(&logits, &[0, 1, 0]), 1.0 / 3.0);
}

#[test]
fn forward_is_deterministic_and_permutation_equivariant() {
    let cloud = airplane(64, 3);
    for v in Variant::ALL {
        let p = build_model(&small_config(v)).unwrap();
        let a = forward_segmentation(&p, &cloud).unwrap();
        assert_eq!(a, forward_segmentation(&p, &cloud).unwrap());
        assert_eq!(a.shape(), &[64, 2]);

        let perm: Vec<usize> = (0..64).map(|i| (i * 37 + 5) % 64).collect();
        let shuffled = PointCloud::new(perm.iter().map(|&i| cloud.points[i]).collect(), None, "p").unwrap();
        let b = forward_segmentation(&p, &shuffled).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for c in 0..2 {
                assert!((b.get(&[r, c]) - a.get(&[i, c])).abs() < 1e-9, "{v}");
            }
        }
    }
}

#[test]
fn vnn_cannot_separate_mirrored_pairs() {
    let p = build_model(&ModelConfig {
        seed: 4,
        ..ModelConfig::with_variant(Variant::Vnn)
    })
    .unwrap();
    for seed in 0..3 {
        let cloud = airplane(128, seed);
        let logits = forward_segmentation(&p, &cloud).unwrap();
        for i in 0..64 {
            for c in 0..2 {
                assert!((logits.get(&[i, c]) - logits.get(&[i + 64, c])).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn prepared_cloud_transforms_like_a_fresh_one() {
    let cfg = small_config(Variant::Oavnn);
    let cloud = airplane(64, 1);
    let base = PreparedCloud::new(&cloud, &cfg).unwrap();
    for (seed, improper) in [(1, false), (2, true)] {
        let r = random_o3(seed, improper);
        let fresh = PreparedCloud::new(&apply_transform(&cloud, &r), &cfg).unwrap();
        let moved = base.transformed(&r);
        assert_eq!(moved.neighbors, fresh.neighbors);
        assert!(norm(crate::geometry::sub(moved.symmetry, fresh.symmetry)) < 1e-9);
    }
}

#[test]
fn zero_epochs_returns_the_initialisation() {
    let cfg = ModelConfig {
        epochs: 0,
        ..small_config(Variant::Oavnn)
    };
    let data = vec![airplane(32, 0)];
    let (p, m) = train(&cfg, &data, &data).unwrap();
    assert!(m.records.is_empty());
    assert_eq!(p, build_model(&cfg).unwrap());
}

#[test]
fn training_rejects_bad_sets() {
    let cfg = small_config(Variant::Vnn);
    let data = vec![airplane(32, 0)];
    assert!(matches!(train(&cfg, &[], &data), Err(Error::Contract(_))));
    let unlabelled = vec![PointCloud::new(data[0].points.clone(), None, "u").unwrap()];
    assert!(matches!(train(&cfg, &data, &unlabelled), Err(Error::Contract(_))));
}

#[test]
fn training_is_reproducible() {
    let cfg = ModelConfig {
        epochs: 2,
        ..small_config(Variant::Oavnn)
    };
    let tr = gen_dataset(ShapeKind::Cap, 4, 48, 0.0, 10).unwrap();
    let te = gen_dataset(ShapeKind::Cap, 2, 48, 0.0, 20).unwrap();
    let (p1, m1) = train(&cfg, &tr, &te).unwrap();
    let (p2, m2) = train(&cfg, &tr, &te).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(m1.records, m2.records);
    for r in &m1.records {
        assert!((0.0..=1.0).contains(&r.train_accuracy) && (0.0..=1.0).contains(&r.test_accuracy));
    }
}

#[test]
fn memorises_a_single_cloud() {
    let cloud = airplane(64, 7);
    let data = vec![cloud.clone(); 8];
    let cfg = ModelConfig {
        epochs: 60,
        ..ModelConfig::with_variant(Variant::Oavnn)
    };
    let (_, m) = train(&cfg, &data, &data[..1]).unwrap();
    let last = m.records.last().unwrap();
    assert_eq!(last.train_accuracy, 1.0, "{:?}", last);
}

#[test]
fn first_epoch_does_not_increase_the_loss() {
    let cloud = airplane(64, 7);
    let data = vec![cloud.clone(); 8];
    for v in Variant::ALL {
        let cfg = ModelConfig {
            epochs: 1,
            ..ModelConfig::with_variant(v)
        };
        let init = build_model(&cfg).unwrap();
        let prepared = PreparedCloud::new(&cloud, &cfg).unwrap();
        let before = loss_ce(&forward_prepared(&init, &prepared).unwrap(), cloud.labels.as_ref().unwrap()).unwrap();
        let (p, m) = train(&cfg, &data, &data[..1]).unwrap();
        let after = loss_ce(&forward_prepared(&p, &prepared).unwrap(), cloud.labels.as_ref().unwrap()).unwrap();
        assert!(m.records[0].train_loss.is_finite());
        assert!(after <= before, "{v}: {before} -> {after}");
    }
}

#[test]
fn evaluate_bounds() {
    let p = build_model(&small_config(Variant::Vnn)).unwrap();
    let set = gen_dataset(ShapeKind::Chair, 2, 64, 0.0, 0).unwrap();
    let acc = evaluate(&p, &set).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    // Mirrored pairs get equal logits, so exactly half of each pair is right.
    assert!((acc - 0.5).abs() < 1e-12, "{acc}");
}

#[test]
fn probes_classify_stages() {
    for stage in Stage::all() {
        let trials = if matches!(stage, Stage::Model(_)) { 4 } else { 10 };
        for improper in [false, true] {
            let r = equivariance_probe(stage, trials, improper, 5).unwrap();
            assert!(r.passes(1e-8, 1e-3), "{} improper={improper}: {:e}", r.stage, r.max_error);
        }
    }
    assert_eq!(Stage::parse("model_oavnn"), Some(Stage::Model(Variant::Oavnn)));
    assert_eq!(Stage::parse("nope"), None);
}

#[test]
fn ambiguity_demo() {
    let cloud = airplane(128, 2);
    let normal = [1.0, 0.0, 0.0];
    let vnn = build_model(&ModelConfig::with_variant(Variant::Vnn)).unwrap();
    let r = symmetry_ambiguity_demo(&vnn, &cloud, normal).unwrap();
    assert!(r.relative() < 1e-8, "{:e}", r.relative());

    let oavnn = build_model(&ModelConfig::with_variant(Variant::Oavnn)).unwrap();
    let r = symmetry_ambiguity_demo(&oavnn, &cloud, normal).unwrap();
    assert!(r.relative() > 1e-3, "{:e}", r.relative());

    let jittered = center_unit_scale(&gen_shape(&ShapeSpec::new(ShapeKind::Airplane, 128, 2, 0.05)).unwrap()).unwrap();
    assert!(matches!(symmetry_ambiguity_demo(&vnn, &jittered, normal), Err(Error::Contract(_))));
    let r = perpendicular_component(&vnn, &jittered, normal).unwrap();
    assert!(r.relative() > 1e-3, "{:e}", r.relative());
}
