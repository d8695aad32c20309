mod common;

use acenas_core::ltr::{self, LabeledExample, RankLoss, TrainConfig, WeakExample};
use acenas_core::metrics;
use acenas_core::nn::{Head, RankingModel};
use acenas_core::space::{self, encode_space, SynthConfig};
use rand::{Rng, SeedableRng};

fn random_list(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> (Vec<String>, Vec<f64>, Vec<f64>) {
    let ids = (0..n).map(|i| format!("a{i:03}")).collect();
    let scores = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let rels = (0..n).map(|_| rng.random_range(0..5) as f64 * 5.0).collect();
    (ids, scores, rels)
}

#[test]
fn lambdas_match_brute_force_on_short_lists() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (ids, s, r) = random_list(&mut rng, 5);
        let fast = ltr::lambdarank_lambdas(&ids, &s, &r, 1.0).unwrap();
        let slow = common::brute_force_lambdas(&ids, &s, &r, 1.0);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12, "{fast:?} vs {slow:?}");
        }
    }
}

#[test]
fn lambdarank_factorizes_into_ranknet_and_delta() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let (ids, s, r) = random_list(&mut rng, 12);
        let list = metrics::RankedList::from_parts(&ids, &s, &r).unwrap();
        let pos = |k: usize| list.items().iter().position(|it| it.id == ids[k]).unwrap();
        for p in ltr::lambdarank_pairs(&ids, &s, &r, 1.0).unwrap() {
            let rn = ltr::pair_lambda(s[p.i], s[p.j], 1.0);
            let d = metrics::delta_ndcg(&list, pos(p.i), pos(p.j)).unwrap();
            assert!((p.lambda - rn * d).abs() <= 1e-12);
        }
    }
}

fn weak_space(size: usize, tau: f64, seed: u64) -> space::SearchSpace {
    let cfg = SynthConfig {
        size,
        ..Default::default()
    };
    let s = space::generate_synthetic_space(&cfg, seed).unwrap();
    space::calibrate_weak_labels(&s, tau, seed).unwrap()
}

fn multitask_loss(model: &RankingModel, data: &[WeakExample], norm: &ltr::LabelNormalizer) -> f64 {
    let encs: Vec<_> = data.iter().map(|d| d.enc).collect();
    let f = model.forward(&encs, &Head::AUXILIARY, acenas_core::nn::Mode::Eval).unwrap();
    let labels: Vec<Vec<f64>> = (0..3)
        .map(|c| data.iter().map(|d| norm.normalize(c, [d.ws_acc, d.flops, d.params][c])).collect())
        .collect();
    ltr::multitask_mse(
        [&f.outputs[0], &f.outputs[1], &f.outputs[2]],
        [&labels[0], &labels[1], &labels[2]],
        1.0,
        1.0,
    )
    .unwrap()
    .loss
}

#[test]
fn one_pretraining_epoch_lowers_the_loss() {
    let space = weak_space(10, 1.0, 3);
    let encs = encode_space(&space).unwrap();
    let data: Vec<WeakExample> = space
        .records()
        .zip(&encs)
        .map(|(r, e)| WeakExample::from_record(r, e).unwrap())
        .collect();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        lr0: 0.01,
        holdout_fraction: 0.0,
        ..TrainConfig::pretrain()
    };
    let mut model = RankingModel::build(common::small_model_config(8, 2), 1).unwrap();
    let mut before_model = model.clone();
    let report = ltr::pretrain(&mut model, &data, &cfg, 9).unwrap();
    assert_eq!(report.step_losses.len(), 5);
    let refs: Vec<_> = encs.iter().collect();
    before_model.fit_hparam_scaler(&refs);
    let before = multitask_loss(&before_model, &data, &report.normalizer);
    let after = multitask_loss(&model, &data, &report.normalizer);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn pretraining_is_deterministic_and_seeds_the_rank_head() {
    let space = weak_space(40, 0.6, 4);
    let encs = encode_space(&space).unwrap();
    let data: Vec<WeakExample> = space
        .records()
        .zip(&encs)
        .map(|(r, e)| WeakExample::from_record(r, e).unwrap())
        .collect();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::pretrain()
    };
    let run = || {
        let mut m = RankingModel::build(common::small_model_config(8, 2), 2).unwrap();
        ltr::pretrain(&mut m, &data, &cfg, 11).unwrap();
        m
    };
    let (a, b) = (run(), run());
    assert_eq!(a.to_checkpoint_bytes().unwrap(), b.to_checkpoint_bytes().unwrap());
    let refs: Vec<_> = encs.iter().collect();
    assert_eq!(a.score(&refs, Head::Rank).unwrap(), a.score(&refs, Head::WsAcc).unwrap());
}

#[test]
fn pretraining_fits_perfect_weak_labels() {
    let space = weak_space(2000, 1.0, 7);
    let encs = encode_space(&space).unwrap();
    let data: Vec<WeakExample> = space
        .records()
        .zip(&encs)
        .map(|(r, e)| WeakExample::from_record(r, e).unwrap())
        .collect();
    let cfg = TrainConfig {
        epochs: 40,
        lr0: 0.003,
        ..TrainConfig::pretrain()
    };
    let mut m = RankingModel::build(common::small_model_config(8, 2), 3).unwrap();
    let r2 = ltr::pretrain(&mut m, &data, &cfg, 5).unwrap().r2.unwrap();
    assert!(r2[0] >= 0.9, "{r2:?}");
}

#[test]
fn missing_weak_label_is_reported() {
    let s = space::generate_synthetic_space(&SynthConfig { size: 3, ..Default::default() }, 1).unwrap();
    let encs = encode_space(&s).unwrap();
    let r = s.records().next().unwrap();
    assert!(matches!(
        WeakExample::from_record(r, &encs[0]),
        Err(acenas_core::Error::MissingWeakLabel(_))
    ));
}

#[test]
fn finetuning_orders_a_separable_pair() {
    let encs = common::small_encodings(2, 8, 2, 21);
    let labeled = [
        LabeledExample { enc: &encs[0], val_acc: 70.0 },
        LabeledExample { enc: &encs[1], val_acc: 90.0 },
    ];
    let cfg = TrainConfig {
        epochs: 100,
        early_stop_patience: None,
        ..TrainConfig::finetune()
    };
    let mut m = RankingModel::build(common::small_model_config(8, 2), 4).unwrap();
    ltr::finetune(&mut m, &labeled, &cfg, RankLoss::LambdaRank, 1).unwrap();
    let s = m.score(&[&encs[0], &encs[1]], Head::Rank).unwrap();
    assert!(s[1] > s[0], "{s:?}");
    assert!(ltr::finetune(&mut m, &labeled[..1], &cfg, RankLoss::LambdaRank, 1).is_err());
}

#[test]
fn flat_holdout_metric_stops_early() {
    let encs = common::small_encodings(40, 8, 2, 22);
    let labeled: Vec<LabeledExample> = encs
        .iter()
        .enumerate()
        .map(|(i, e)| LabeledExample { enc: e, val_acc: 50.0 + i as f64 })
        .collect();
    let cfg = TrainConfig {
        epochs: 100,
        lr0: 1e-300,
        early_stop_patience: Some(5),
        ..TrainConfig::finetune()
    };
    let mut m = RankingModel::build(common::small_model_config(8, 2), 4).unwrap();
    let r = ltr::finetune(&mut m, &labeled, &cfg, RankLoss::LambdaRank, 1).unwrap();
    assert!(r.stopped_early);
    assert_eq!(r.epochs_run, 6);
}

#[test]
fn finetuning_beats_an_untrained_model_on_holdout() {
    let base = space::generate_synthetic_space(&SynthConfig { size: 300, ..Default::default() }, 8).unwrap();
    let encs = encode_space(&base).unwrap();
    let accs: Vec<f64> = base.records().map(|r| r.val_acc).collect();
    let map = metrics::RelevanceMap::fit_default(&accs).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        early_stop_patience: None,
        ..TrainConfig::finetune()
    };
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for seed in 0..10u64 {
        let untrained = RankingModel::build(common::small_model_config(8, 2), seed).unwrap();
        let mut trained = untrained.clone();
        let labeled: Vec<LabeledExample> = (0..100)
            .map(|i| LabeledExample { enc: &encs[i], val_acc: accs[i] })
            .collect();
        ltr::finetune(&mut trained, &labeled, &cfg, RankLoss::LambdaRank, seed).unwrap();
        let hold: Vec<_> = encs[100..].iter().collect();
        let ids: Vec<String> = hold.iter().map(|e| e.id.clone()).collect();
        let rels: Vec<f64> = accs[100..].iter().map(|a| map.map(*a)).collect();
        let score = |m: &RankingModel| {
            let s = m.score(&hold, Head::Rank).unwrap();
            metrics::ndcg_of_scores(&ids, &s, &rels).unwrap().value
        };
        before.push(score(&untrained));
        after.push(score(&trained));
    }
    let median = |v: &[f64]| metrics::quantile(v, 0.5).unwrap();
    assert!(median(&after) > median(&before), "{after:?} vs {before:?}");
}
