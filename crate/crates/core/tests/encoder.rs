mod common;

use common::*;
use ith::bench::pipeline::{imagine_split, prepare, train_and_evaluate, Frozen};
use ith::bench::BenchConfig;
use ith::encoder::{evaluate_model, train_end_to_end, IthModel};
use ith::fusion::{fusion_attention, FusionWeights};
use ith::tensor::{ParamId, ParamStore, Tensor};

fn small_bench(seed: u64) -> BenchConfig {
    BenchConfig {
        seed,
        n_train: 400,
        n_dev: 100,
        n_test: 100,
        n_unseen: 100,
        epochs: 5,
        ..BenchConfig::default()
    }
}

fn set(store: &mut ParamStore, id: ParamId, v: &[f64]) {
    store.get_mut(id).data_mut().copy_from_slice(v);
}

#[test]
fn two_key_single_head_attention_by_hand() {
    let mut store = ParamStore::new();
    let w = FusionWeights::new(&mut store, 2, 1, 4, true, &mut rng(0));
    for l in [&w.attn.query, &w.attn.key, &w.attn.value, &w.attn.out] {
        set(&mut store, l.w, &[1.0, 0.0, 0.0, 1.0]);
        set(&mut store, l.b, &[0.0, 0.0]);
    }
    let x = Tensor::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
    let audio = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let out = fusion_attention(&x, &[(span(1, 1), &audio)], &w, &store).unwrap();
    // scores q.k / sqrt(2) = [1/sqrt(2), 0]
    let p1 = 1.0 / (1.0 + (-(0.5f64).sqrt()).exp());
    assert!((out.at(1, 0) - p1).abs() < 1e-12);
    assert!((out.at(1, 1) - (1.0 - p1)).abs() < 1e-12);
    for r in [0, 2] {
        assert_eq!(out.row(r), x.row(r));
    }
}

#[test]
fn untrained_model_is_at_chance() {
    let cfg = small_bench(3);
    let prep = prepare(&cfg).unwrap();
    let frozen = Frozen::new(&cfg, &prep.lexicon).unwrap();
    let im = frozen.imaginer(&prep.detector, cfg.rejection_config()).unwrap();
    let dev = imagine_split(&cfg, &prep.vocab, Some(&im), &prep.splits.dev, "dev").unwrap();
    let model = IthModel::new(cfg.model_config(prep.vocab.len(), 2), 11).unwrap();
    let acc = evaluate_model(&model, &dev).unwrap().accuracy;
    assert!((0.4..=0.6).contains(&acc), "untrained accuracy {acc}");
}

#[test]
fn overfits_32_examples() {
    let cfg = BenchConfig {
        n_train: 32,
        ..small_bench(5)
    };
    let prep = prepare(&cfg).unwrap();
    let frozen = Frozen::new(&cfg, &prep.lexicon).unwrap();
    let im = frozen.imaginer(&prep.detector, cfg.rejection_config()).unwrap();
    let train = imagine_split(&cfg, &prep.vocab, Some(&im), &prep.splits.train, "train").unwrap();
    let mut model = IthModel::new(cfg.model_config(prep.vocab.len(), 2), 5).unwrap();
    let tc = ith::config::TrainConfig {
        epochs: 300,
        unk_prob: 0.0,
        freq_shift: 0,
        ..cfg.train_config()
    };
    let curve = train_end_to_end(&mut model, &train, None, &tc).unwrap();
    let first = curve.iter().position(|r| r.accuracy == 1.0);
    assert!(first.is_some(), "never reached 1.0; last {:?}", curve.last());
    assert_eq!(evaluate_model(&model, &train).unwrap().accuracy, 1.0);
}

#[test]
fn loss_falls_and_training_is_deterministic() {
    let cfg = small_bench(2);
    let prep = prepare(&cfg).unwrap();
    let a = train_and_evaluate(&prep, &cfg).unwrap();
    let train: Vec<f64> = a.curve.iter().filter(|r| r.split == "train").map(|r| r.loss).collect();
    assert_eq!(train.len(), 5);
    assert!(train[4] < train[0], "epoch losses {train:?}");
    assert_eq!(a.frozen_digests_before, a.frozen_digests_after);

    let b = train_and_evaluate(&prep, &cfg).unwrap();
    assert_eq!(a.model.checkpoint().digest(), b.model.checkpoint().digest());
    assert_eq!(a.accuracy, b.accuracy);
    let c = train_and_evaluate(&prep, &BenchConfig { seed: 9, ..cfg }).unwrap();
    assert_ne!(a.model.checkpoint().digest(), c.model.checkpoint().digest());
}
