use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::ColdnessConfig;
use crate::episodes::{build_meta_test, sample_train_batch, SupportSizeDist};
use crate::ingest::{build_dataset, Dataset, DatasetManifest, SourceFormat};
use crate::math::grad_check;
use crate::models::{pretrain_shared, Architecture, TrainConfig};
use crate::synth::{generate, SynthConfig};

fn dataset(users: usize) -> Dataset {
    let data = generate(&SynthConfig {
        users,
        movies: 40,
        min_len: 8,
        max_len: 30,
        ..Default::default()
    })
    .unwrap();
    let manifest = DatasetManifest {
        format: SourceFormat::Movielens,
        field_names: vec![],
        binarization_threshold: Some(3.0),
        min_item_interactions: 1,
        split_ratio: [7.0, 2.0, 1.0],
        seed: 1,
        counts: None,
    };
    build_dataset(data.to_raw(3.0), manifest).unwrap()
}

fn spec(ds: &Dataset, arch: Architecture) -> PredictorSpec {
    PredictorSpec::new(arch, 4, vec![6, 3], &ds.space).unwrap()
}

fn frozen_psi(ds: &Dataset, rng: &mut ChaCha8Rng) -> SharedPredictor {
    let mut psi = SharedPredictor::new(spec(ds, Architecture::Fm), rng).unwrap();
    psi.freeze();
    psi
}

fn model(ds: &Dataset, mode: MetaMode, rng: &mut ChaCha8Rng) -> MetaModel {
    let mut m = MetaModel::new(mode, spec(ds, Architecture::DeepFm), 30, false, rng).unwrap();
    let k = m.encoder_spec().encoding_dim();
    let w: Vec<f64> = (0..k).map(|i| 0.3 * ((i as f64) * 1.7).sin()).collect();
    m.set_theta(&w, 0.1).unwrap();
    m.set_beta(0.8);
    // zero biases put fully dead rows exactly on the ReLU kink
    for id in m.encoder_param_ids() {
        if m.params.name(id).ends_with(".bias") {
            let b = m.params.get_mut(id);
            for (i, v) in b.data_mut().iter_mut().enumerate() {
                *v = 0.05 + 0.01 * i as f64;
            }
        }
    }
    m
}

#[test]
fn gradients_match_finite_differences() {
    let ds = dataset(40);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let psi = frozen_psi(&ds, &mut rng);
    let dist = SupportSizeDist::uniform(5).unwrap();
    for mode in [MetaMode::Nn, MetaMode::Rr, MetaMode::Mus] {
        let m = model(&ds, mode, &mut rng);
        let batch = sample_train_batch(&ds.train, &dist, 3, &mut rng).unwrap();
        let psi_opt = mode.uses_shared().then_some(&psi);
        let out = m.batch_loss(&m.params, psi_opt, &ds.train, &batch.tasks).unwrap();
        let only = m.trainable_ids();
        let report = grad_check(
            &m.params,
            &out.grads,
            |p| m.batch_loss(p, psi_opt, &ds.train, &batch.tasks).unwrap().loss,
            1e-6,
            Some(&only),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{mode}: {report:?}");
    }
}

#[test]
fn zero_beta_reduces_to_shared_predictor() {
    let ds = dataset(30);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let psi = frozen_psi(&ds, &mut rng);
    for mode in [MetaMode::Nn, MetaMode::Rr] {
        let mut m = model(&ds, mode, &mut rng);
        m.set_beta(0.0);
        for log in &ds.test {
            let xs: Vec<&Instance> = log.instances().iter().collect();
            let (s, q) = xs.split_at(3);
            let got = m.predict(Some(&psi), s, q).unwrap();
            let want: Vec<f64> = psi.logits(q).unwrap().into_iter().map(sigmoid).collect();
            assert_eq!(
                got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                want.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}

#[test]
fn zero_logit_nn_residual_is_mus_minus_half() {
    let ds = dataset(30);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut psi = frozen_psi(&ds, &mut rng);
    psi.zero_params();
    let nn = model(&ds, MetaMode::Nn, &mut rng);
    let mut mus = nn.clone();
    mus.mode = MetaMode::Mus;
    let (w, b) = nn.theta();
    for log in &ds.train {
        let xs: Vec<&Instance> = log.instances().iter().collect();
        let (s, q) = xs.split_at(4);
        let task = ResidualTask {
            support_enc: nn.encode(s).unwrap(),
            residuals: residual_targets(&psi, s).unwrap(),
            query_enc: nn.encode(q).unwrap(),
            query_labels: q.iter().map(|x| x.label).collect(),
        };
        let delta = nn_predict(w, b, &task).unwrap();
        let p = mus.predict(None, s, q).unwrap();
        for (d, p) in delta.iter().zip(&p) {
            assert!((d - (p - 0.5)).abs() < 1e-7);
        }
    }
}

#[test]
fn batched_inference_matches_per_query_and_counts_encodings() {
    let ds = dataset(30);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let psi = frozen_psi(&ds, &mut rng);
    for mode in [MetaMode::Nn, MetaMode::Rr, MetaMode::Mus] {
        let m = model(&ds, mode, &mut rng);
        let psi_opt = mode.uses_shared().then_some(&psi);
        for log in &ds.test {
            let xs: Vec<&Instance> = log.instances().iter().collect();
            let (s, q) = xs.split_at(5);
            m.counters().reset();
            let batched = m.predict(psi_opt, s, q).unwrap();
            assert_eq!(m.counters().support_encodings(), 1);
            let single = m.predict_per_query(psi_opt, s, q).unwrap();
            assert_eq!(m.counters().support_encodings(), 1 + q.len() as u64);
            for (a, b) in batched.iter().zip(&single) {
                assert!((a - b).abs() <= 1e-7);
                assert!(*a > 0.0 && *a < 1.0 || mode == MetaMode::Mus);
            }
        }
    }
}

#[test]
fn empty_support_is_rejected() {
    let ds = dataset(20);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let psi = frozen_psi(&ds, &mut rng);
    let m = model(&ds, MetaMode::Rr, &mut rng);
    let x = &ds.train[0].instances()[0];
    assert!(matches!(m.predict(Some(&psi), &[], &[x]), Err(Error::MissingSupport(_))));
    assert!(matches!(m.predict(None, &[x], &[x]), Err(Error::Config(_))));
}

#[test]
fn single_support_moves_toward_its_label() {
    let ds = dataset(20);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let psi = frozen_psi(&ds, &mut rng);
    let m = model(&ds, MetaMode::Nn, &mut rng);
    for x in ds.train.iter().flat_map(|l| l.instances()).take(50) {
        let base = sigmoid(psi.predict_logit(x).unwrap());
        let p = m.predict(Some(&psi), &[x], &[x]).unwrap()[0];
        if x.label == 1 {
            assert!(p > base);
        } else {
            assert!(p < base);
        }
    }
}

#[test]
fn training_improves_objective_and_leaves_psi_untouched() {
    let ds = dataset(50);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut psi = SharedPredictor::new(spec(&ds, Architecture::Fm), &mut rng).unwrap();
    let train: Vec<&Instance> = ds.train.iter().flat_map(|l| l.instances()).collect();
    let cfg = TrainConfig {
        lr: 0.01,
        batch_size: 64,
        max_epochs: 2,
        patience: 2,
    };
    pretrain_shared(&mut psi, &train, &[], &cfg, &mut rng).unwrap();
    let before = psi.params.clone();
    let dist = SupportSizeDist::uniform(10).unwrap();
    let mut m = MetaModel::new(MetaMode::Rr, spec(&ds, Architecture::DeepFm), 10, false, &mut rng).unwrap();
    let probe = sample_train_batch(&ds.train, &dist, 30, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let initial = m.batch_loss(&m.params, Some(&psi), &ds.train, &probe.tasks).unwrap().loss;
    let mcfg = TrainConfig {
        lr: 0.01,
        batch_size: 8,
        max_epochs: 1,
        patience: 2,
    };
    let rep = meta_train(&mut m, Some(&psi), &ds.train, None, &dist, &mcfg, &mut rng).unwrap();
    assert_eq!(rep.epoch_losses.len(), 1);
    let after = m.batch_loss(&m.params, Some(&psi), &ds.train, &probe.tasks).unwrap().loss;
    assert!(after < initial, "{after} !< {initial}");
    for ((_, _, a), (_, _, b)) in before.iter().zip(psi.params.iter()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn unfrozen_psi_is_refused() {
    let ds = dataset(20);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let psi = SharedPredictor::new(spec(&ds, Architecture::Lr), &mut rng).unwrap();
    let mut m = model(&ds, MetaMode::Nn, &mut rng);
    let dist = SupportSizeDist::uniform(5).unwrap();
    let err = meta_train(&mut m, Some(&psi), &ds.train, None, &dist, &TrainConfig::default(), &mut rng);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn validation_early_stopping_keeps_best() {
    let ds = dataset(60);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let psi = frozen_psi(&ds, &mut rng);
    let mut m = model(&ds, MetaMode::Nn, &mut rng);
    let cold = ColdnessConfig::equal_stages(6, vec![2, 4, 6]).unwrap();
    let suite = build_meta_test(&ds.validation, &cold, 1).unwrap();
    let dist = SupportSizeDist::uniform(6).unwrap();
    let cfg = TrainConfig {
        lr: 0.005,
        batch_size: 8,
        max_epochs: 3,
        patience: 1,
    };
    let rep = meta_train(&mut m, Some(&psi), &ds.train, Some((&ds.validation, &suite)), &dist, &cfg, &mut rng).unwrap();
    let best = rep.val_scores[rep.best_epoch - 1].unwrap();
    assert!(rep.val_scores.iter().flatten().all(|&s| s <= best));
    let now = validation_score(&m, Some(&psi), &ds.validation, &suite).unwrap().unwrap();
    assert_eq!(now, best);
}

#[test]
fn per_size_beta_selects_slot() {
    let ds = dataset(20);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut m = MetaModel::new(MetaMode::Nn, spec(&ds, Architecture::Fm), 5, true, &mut rng).unwrap();
    let id = m.beta_id();
    m.params.get_mut(id).data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0]);
    assert_eq!(m.beta(1), 1.0);
    assert_eq!(m.beta(5), 5.0);
    assert_eq!(m.beta(9), 5.0);
}

#[test]
fn checkpoint_round_trip() {
    let ds = dataset(20);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let psi = frozen_psi(&ds, &mut rng);
    let m = model(&ds, MetaMode::Rr, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("meta.ckpt");
    crate::models::write_checkpoint(&path, &m.to_checkpoint(Some(&psi))).unwrap();
    let (back, psi_back) = MetaModel::from_checkpoint(crate::models::read_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(back.params, m.params);
    assert_eq!(back.mode(), MetaMode::Rr);
    assert_eq!(psi_back.unwrap().params, psi.params);
    let shared = crate::models::Checkpoint {
        kind: crate::models::CheckpointKind::Shared,
        header: serde_json::json!({}),
        stores: vec![],
    };
    assert!(matches!(MetaModel::from_checkpoint(shared), Err(Error::SpecMismatch(_))));
}

#[test]
fn encoder_init_copies_matching_tensors() {
    let ds = dataset(20);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut psi = SharedPredictor::new(spec(&ds, Architecture::DeepFm), &mut rng).unwrap();
    psi.freeze();
    let mut m = model(&ds, MetaMode::Nn, &mut rng);
    // embedding + two tower layers (weight, bias)
    assert_eq!(m.init_encoder_from(&psi), 5);
    let e = m.params.id("embedding").unwrap();
    assert_eq!(m.params.get(e), psi.params.get(psi.params.id("embedding").unwrap()));
}
