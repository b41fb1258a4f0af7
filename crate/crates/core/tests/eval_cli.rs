use micfer::eval::*;
use micfer::mine::gaussian_pairs;
use micfer::model::{IdentityDims, IdentityEncoder, ModelBundle, ModelDims, Prepared};
use micfer::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rows_with_identities(ids: &[u32]) -> Vec<Prepared> {
    ids.iter()
        .map(|&identity| Prepared {
            frames: Tensor::zeros(&[1, 1, 1, 1]),
            i_frame: Tensor::zeros(&[1, 1, 1]),
            apex: Tensor::zeros(&[1, 1, 1]),
            label: 0,
            identity,
        })
        .collect()
}

/// 10 identities × 8 sequences, identity-major.
fn ten_by_eight() -> Vec<u32> {
    (0..10u32).flat_map(|i| std::iter::repeat_n(i, 8)).collect()
}

#[test]
fn perfect_predictions_give_a_diagonal_matrix() {
    let truth: Vec<usize> = (0..70).map(|i| i % 7).collect();
    let (m, acc) = confusion_matrix(&truth, &truth, 7).unwrap();
    assert_eq!(acc, 1.0);
    for (i, row) in m.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            assert_eq!(c, if i == j { 10 } else { 0 });
        }
    }
}

#[test]
fn random_predictions_sit_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let truth: Vec<usize> = (0..14_000).map(|i| i % 7).collect();
    let preds: Vec<usize> = (0..truth.len()).map(|_| rng.random_range(0..7)).collect();
    let (m, acc) = confusion_matrix(&truth, &preds, 7).unwrap();
    assert!((acc - 1.0 / 7.0).abs() < 0.015, "{acc}");
    for row in &m {
        assert_eq!(row.iter().sum::<u64>(), 2000);
    }
    let trace: u64 = (0..7).map(|k| m[k][k]).sum();
    assert_eq!(trace as f64 / truth.len() as f64, acc);
}

#[test]
fn confusion_matrix_rejects_bad_input() {
    assert!(confusion_matrix(&[0, 1], &[0], 2).is_err());
    assert!(confusion_matrix(&[0, 5], &[0, 1], 2).is_err());
    assert!(confusion_matrix(&[], &[], 2).is_err());
}

#[test]
fn identity_coded_features_are_recovered() {
    let ids = ten_by_eight();
    let data = rows_with_identities(&ids);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feats: Vec<f64> = ids
        .iter()
        .flat_map(|&id| (0..10u32).map(move |k| if k == id { 1.0 } else { 0.0 }))
        .map(|v| v + rng.random_range(-0.2..0.2))
        .collect();
    let f = Tensor::from_vec(vec![ids.len(), 10], feats).unwrap();
    let r = probe_identity_features(&f, &data, &ProbeConfig::default()).unwrap();
    assert!(r.accuracy >= 0.9, "{r:?}");
    assert_eq!((r.n_train, r.n_test), (60, 20));
    assert_eq!(r.chance, 0.1);
}

#[test]
fn noise_features_probe_near_chance() {
    let ids: Vec<u32> = (0..10u32).flat_map(|i| std::iter::repeat_n(i, 40)).collect();
    let data = rows_with_identities(&ids);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = Tensor::from_vec(vec![ids.len(), 8], (0..ids.len() * 8).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let r = probe_identity_features(&f, &data, &ProbeConfig::default()).unwrap();
    assert!(r.accuracy < 0.25, "{r:?}");
}

#[test]
fn single_identity_probe_is_rejected() {
    let data = rows_with_identities(&[4, 4, 4, 4]);
    let f = Tensor::zeros(&[4, 3]);
    assert!(matches!(
        probe_identity_features(&f, &data, &ProbeConfig::default()),
        Err(EvalError::Invalid(_))
    ));
}

#[test]
fn independent_embeddings_measure_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (ze, _) = gaussian_pairs(&mut rng, 512, 4, 0.0);
    let (zi, _) = gaussian_pairs(&mut rng, 512, 3, 0.0);
    let r = measure_mi_features(&ze, &zi, &MiMeasureConfig::default()).unwrap();
    assert!(r.reported <= 0.05, "{r:?}");
}

#[test]
fn copied_embeddings_saturate() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (z, _) = gaussian_pairs(&mut rng, 128, 3, 0.0);
    let cfg = MiMeasureConfig {
        steps: 1500,
        batch: 64,
        seed: 0,
    };
    let r = measure_mi_features(&z, &z, &cfg).unwrap();
    assert!(r.saturated && r.reported > 0.75 * 64f64.ln(), "{r:?}");
    assert!(r.reported <= 64f64.ln());
}

#[test]
fn too_few_rows_for_mi() {
    let z = Tensor::zeros(&[MI_MIN_ROWS - 1, 2]);
    assert!(matches!(
        measure_mi_features(&z, &z, &MiMeasureConfig::default()),
        Err(EvalError::Invalid(_))
    ));
}

#[test]
fn probes_and_mi_leave_the_bundle_untouched() {
    let dims = ModelDims {
        identity: IdentityDims {
            height: 8,
            width: 8,
            channels: 1,
            conv1: 2,
            conv2: 2,
            d_i: 3,
        },
        with_motion: false,
        conv1: 2,
        conv2: 2,
        d_e: 4,
        dec_hidden: 4,
        stat_hidden: 4,
        n_classes: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ident = IdentityEncoder::new(&mut rng, dims.identity);
    let bundle = ModelBundle::new(&mut rng, dims, ident).unwrap();
    let data: Vec<Prepared> = (0..64)
        .map(|i| Prepared {
            frames: Tensor::from_vec(vec![2, 1, 8, 8], (0..128).map(|_| rng.random_range(-0.1..0.1)).collect()).unwrap(),
            i_frame: Tensor::from_vec(vec![1, 8, 8], (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
            apex: Tensor::zeros(&[1, 8, 8]),
            label: i % 2,
            identity: (i / 16) as u32,
        })
        .collect();
    let before = bundle.checksum();
    let snapshot = bundle.clone();
    let probe = ProbeConfig {
        epochs: 20,
        ..ProbeConfig::default()
    };
    probe_identity(&bundle, &data, &probe).unwrap();
    probe_expression_on_identity(&bundle, &data, &probe).unwrap();
    let mi = MiMeasureConfig {
        steps: 20,
        batch: 32,
        seed: 0,
    };
    measure_mi(&bundle, &data, &mi).unwrap();
    let report = evaluate(&bundle, &data, "test").unwrap();
    assert_eq!(bundle.checksum(), before);
    assert_eq!(bundle, snapshot);
    assert_eq!(report.confusion.iter().flatten().sum::<u64>(), 64);
    assert!(report.fps.unwrap() > 0.0);
}
