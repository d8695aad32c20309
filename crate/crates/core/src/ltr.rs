//! Losses and the two training procedures: multi-task regression pretraining on weak
//! labels, and listwise finetuning of the rank head.
//!
//! Pretraining sees only [`WeakExample`]s (architecture, weak accuracy, FLOPs, params);
//! finetuning sees only [`LabeledExample`]s (architecture, validation accuracy). Neither
//! type carries a test accuracy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, RankedList, RelevanceMap, SwapContext};
use crate::nn::{cosine_lr, AdamConfig, Head, Mode, RankingModel};
use crate::rng;
use crate::space::{BenchmarkRecord, EncodedArch};

/// Per-channel standardization fitted on training labels (population std).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LabelNormalizer {
    pub fn fit(channels: &[Vec<f64>]) -> Result<Self> {
        let mut mean = Vec::with_capacity(channels.len());
        let mut std = Vec::with_capacity(channels.len());
        for (c, values) in channels.iter().enumerate() {
            if values.len() < 2 {
                return Err(Error::Degenerate(format!("label channel {c} needs >= 2 values")));
            }
            let n = values.len() as f64;
            let m = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            if !(var > 0.0) {
                return Err(Error::Degenerate(format!("label channel {c} has zero variance")));
            }
            mean.push(m);
            std.push(var.sqrt());
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, channel: usize, value: f64) -> f64 {
        (value - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, channel: usize, value: f64) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }

    pub fn normalize_all(&self, channel: usize, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| self.normalize(channel, *v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskMse {
    pub loss: f64,
    /// Unweighted MSE of (ws accuracy, FLOPs, params).
    pub per_channel: [f64; 3],
    /// d loss / d prediction per channel, already scaled by the channel weight.
    pub grads: [Vec<f64>; 3],
}

/// `MSE(acc) + lambda1 * MSE(flops) + lambda2 * MSE(params)` over normalized labels.
pub fn multitask_mse(preds: [&[f64]; 3], labels: [&[f64]; 3], lambda1: f64, lambda2: f64) -> Result<MultiTaskMse> {
    let n = preds[0].len();
    for c in 0..3 {
        if preds[c].len() != n || labels[c].len() != n {
            return Err(Error::LengthMismatch {
                left: preds[c].len(),
                right: labels[c].len(),
            });
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let weights = [1.0, lambda1, lambda2];
    let mut per_channel = [0.0; 3];
    let mut grads: [Vec<f64>; 3] = Default::default();
    for c in 0..3 {
        let mut se = 0.0;
        grads[c] = preds[c]
            .iter()
            .zip(labels[c])
            .map(|(p, y)| {
                se += (p - y).powi(2);
                weights[c] * 2.0 * (p - y) / n as f64
            })
            .collect();
        per_channel[c] = se / n as f64;
    }
    let loss = per_channel.iter().zip(weights).map(|(m, w)| m * w).sum();
    Ok(MultiTaskMse {
        loss,
        per_channel,
        grads,
    })
}

/// Plain MSE and its gradient.
pub fn mse(preds: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    let r = multitask_mse([preds, preds, preds], [labels, preds, preds], 0.0, 0.0)?;
    let [g, _, _] = r.grads;
    Ok((r.per_channel[0], g))
}

/// RankNet pair coefficient `-sigma / (1 + exp(sigma * (s_i - s_j)))` for `rel_i > rel_j`.
#[inline]
pub fn pair_lambda(s_i: f64, s_j: f64, sigma: f64) -> f64 {
    -sigma / (1.0 + (sigma * (s_i - s_j)).exp())
}

fn check_list(scores: &[f64], rels: &[f64]) -> Result<()> {
    if scores.len() != rels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: rels.len(),
        });
    }
    Ok(())
}

/// Per-item gradient coefficients of RankNet: every ordered pair weighted equally.
pub fn ranknet_lambdas(scores: &[f64], rels: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_list(scores, rels)?;
    let n = scores.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if rels[i] > rels[j] {
                let lam = pair_lambda(scores[i], scores[j], sigma);
                out[i] += lam;
                out[j] -= lam;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairLambda {
    /// Index (into the input slices) of the more relevant item.
    pub i: usize,
    pub j: usize,
    pub ranknet: f64,
    pub delta_ndcg: f64,
    pub lambda: f64,
}

/// Every contributing pair of a LambdaRank list. Positions for |ΔNDCG| come from the
/// current predicted ranking (descending score, ties by id).
pub fn lambdarank_pairs(ids: &[String], scores: &[f64], rels: &[f64], sigma: f64) -> Result<Vec<PairLambda>> {
    check_list(scores, rels)?;
    let list = RankedList::from_parts(ids, scores, rels)?;
    let mut position = vec![0; ids.len()];
    {
        let index: std::collections::HashMap<&str, usize> =
            ids.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
        if index.len() != ids.len() {
            return Err(Error::Config("list ids must be unique".into()));
        }
        for (p, item) in list.items().iter().enumerate() {
            position[index[item.id.as_str()]] = p;
        }
    }
    let ctx = SwapContext::new(&list);
    let n = scores.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if rels[i] > rels[j] {
                let ranknet = pair_lambda(scores[i], scores[j], sigma);
                let delta = ctx.delta(position[i], position[j])?;
                pairs.push(PairLambda {
                    i,
                    j,
                    ranknet,
                    delta_ndcg: delta,
                    lambda: ranknet * delta,
                });
            }
        }
    }
    Ok(pairs)
}

/// Per-item LambdaRank coefficients; used as upstream gradients of the rank scores.
pub fn lambdarank_lambdas(ids: &[String], scores: &[f64], rels: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; scores.len()];
    for p in lambdarank_pairs(ids, scores, rels, sigma)? {
        out[p.i] += p.lambda;
        out[p.j] -= p.lambda;
    }
    Ok(out)
}

/// |ΔNDCG|-weighted pairwise logistic loss whose gradient the lambdas are.
fn lambdarank_loss(pairs: &[PairLambda], scores: &[f64], sigma: f64, weighted: bool) -> f64 {
    pairs
        .iter()
        .map(|p| {
            let w = if weighted { p.delta_ndcg } else { 1.0 };
            let x = -sigma * (scores[p.i] - scores[p.j]);
            // log(1 + e^x), stable
            w * (x.max(0.0) + (-x.abs()).exp().ln_1p())
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankLoss {
    LambdaRank,
    RankNet,
    /// Regression of normalized validation accuracy (the vanilla predictor).
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    /// `None` disables early stopping.
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
    pub sigma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Fraction of the training set held out for early stopping / R² reporting.
    pub holdout_fraction: f64,
    /// Pretraining sample size drawn from the weakly labeled space.
    pub sample_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::finetune()
    }
}

impl TrainConfig {
    pub fn finetune() -> Self {
        Self {
            batch_size: 20,
            epochs: 300,
            lr0: 0.005,
            weight_decay: 5e-4,
            early_stop_patience: Some(50),
            sigma: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            holdout_fraction: 0.1,
            sample_size: 4000,
        }
    }

    pub fn pretrain() -> Self {
        Self {
            lr0: 0.001,
            weight_decay: 1e-5,
            early_stop_patience: None,
            ..Self::finetune()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.lr0 > 0.0) || self.weight_decay < 0.0 || !(self.sigma > 0.0) {
            return Err(Error::Config("lr0 and sigma must be positive, weight_decay >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("task weights must be nonnegative".into()));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::Config("early-stop patience must be positive".into()));
        }
        Ok(())
    }
}

/// One row of a training-curve log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<f64>,
    pub ndcg: Option<f64>,
    pub r2_ws: Option<f64>,
    pub r2_flops: Option<f64>,
    pub r2_params: Option<f64>,
    pub lr: Option<f64>,
}

impl CurveRow {
    fn new(epoch: usize, split: &str) -> Self {
        Self {
            epoch,
            split: split.into(),
            loss: None,
            ndcg: None,
            r2_ws: None,
            r2_flops: None,
            r2_params: None,
            lr: None,
        }
    }
}

pub const CURVE_HEADER: &str = "epoch,split,loss,ndcg,r2_ws,r2_flops,r2_params,lr";

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.split,
            f(r.loss),
            f(r.ndcg),
            f(r.r2_ws),
            f(r.r2_flops),
            f(r.r2_params),
            f(r.lr)
        ));
    }
    out
}

pub fn r_squared(pred: &[f64], truth: &[f64]) -> Option<f64> {
    if pred.len() != truth.len() || truth.len() < 2 {
        return None;
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    if tot == 0.0 {
        return None;
    }
    let res: f64 = pred.iter().zip(truth).map(|(p, y)| (p - y).powi(2)).sum();
    Some(1.0 - res / tot)
}

/// Pretraining example: everything a weight-sharing super-net can report.
#[derive(Clone, Copy, Debug)]
pub struct WeakExample<'a> {
    pub enc: &'a EncodedArch,
    pub ws_acc: f64,
    pub flops: f64,
    pub params: f64,
}

impl<'a> WeakExample<'a> {
    pub fn from_record(record: &BenchmarkRecord, enc: &'a EncodedArch) -> Result<Self> {
        let ws_acc = record
            .ws_acc
            .ok_or_else(|| Error::MissingWeakLabel(record.arch.id.clone()))?;
        Ok(Self {
            enc,
            ws_acc,
            flops: record.flops,
            params: record.params,
        })
    }
}

/// Finetuning example: a trained-from-scratch validation accuracy.
#[derive(Clone, Copy, Debug)]
pub struct LabeledExample<'a> {
    pub enc: &'a EncodedArch,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub normalizer: LabelNormalizer,
    /// Mean multi-task loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub curve: Vec<CurveRow>,
    /// Held-out R² of (ws accuracy, FLOPs, params); `None` without a hold-out split.
    pub r2: Option<[f64; 3]>,
}

fn split_holdout(n: usize, fraction: f64, seed: u64, tag: &str) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, tag, 0));
    let hold = ((n as f64) * fraction).round() as usize;
    if hold < 2 || n - hold < 2 {
        return (idx, Vec::new());
    }
    let train = idx.split_off(hold);
    (train, idx)
}

fn is_pretrain_param(name: &str) -> bool {
    name.starts_with("encoder.") || Head::AUXILIARY.iter().any(|h| name.starts_with(&h.param_prefix()))
}

fn is_finetune_param(name: &str) -> bool {
    name.starts_with("encoder.") || name.starts_with(&Head::Rank.param_prefix())
}

fn holdout_r2(model: &RankingModel, data: &[WeakExample], hold: &[usize], norm: &LabelNormalizer) -> Result<Option<[f64; 3]>> {
    if hold.is_empty() {
        return Ok(None);
    }
    let encs: Vec<&EncodedArch> = hold.iter().map(|&i| data[i].enc).collect();
    let f = model.forward(&encs, &Head::AUXILIARY, Mode::Eval)?;
    let mut out = [0.0; 3];
    for c in 0..3 {
        let truth: Vec<f64> = hold
            .iter()
            .map(|&i| {
                let ex = &data[i];
                norm.normalize(c, [ex.ws_acc, ex.flops, ex.params][c])
            })
            .collect();
        out[c] = r_squared(&f.outputs[c], &truth).unwrap_or(f64::NAN);
    }
    Ok(Some(out))
}

/// Multi-task MSE pretraining of the encoder and the three auxiliary heads. The rank
/// head is initialized from the trained weak-accuracy head on return.
pub fn pretrain(model: &mut RankingModel, data: &[WeakExample], cfg: &TrainConfig, seed: u64) -> Result<PretrainReport> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Degenerate("pretraining needs at least 2 examples".into()));
    }
    let (train, hold) = split_holdout(data.len(), cfg.holdout_fraction, seed, "pretrain-split");
    let channel = |c: usize, idx: &[usize]| -> Vec<f64> {
        idx.iter()
            .map(|&i| [data[i].ws_acc, data[i].flops, data[i].params][c])
            .collect()
    };
    let normalizer = LabelNormalizer::fit(&[channel(0, &train), channel(1, &train), channel(2, &train)])?;
    let train_encs: Vec<&EncodedArch> = train.iter().map(|&i| data[i].enc).collect();
    model.fit_hparam_scaler(&train_encs);

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut order = train.clone();
    let mut shuffle_rng = rng::stream(seed, "pretrain-shuffle", 0);
    let mut step = 0;
    let mut step_losses = Vec::with_capacity(total);
    let mut curve = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut lr = cfg.lr0;
        for batch in order.chunks(cfg.batch_size) {
            let encs: Vec<&EncodedArch> = batch.iter().map(|&i| data[i].enc).collect();
            let labels: Vec<Vec<f64>> = (0..3).map(|c| normalizer.normalize_all(c, &channel(c, batch))).collect();
            let f = model.forward(
                &encs,
                &Head::AUXILIARY,
                Mode::Train {
                    seed: rng::derive_seed(seed, "pretrain-dropout", step as u64),
                },
            )?;
            let r = multitask_mse(
                [&f.outputs[0], &f.outputs[1], &f.outputs[2]],
                [&labels[0], &labels[1], &labels[2]],
                cfg.lambda1,
                cfg.lambda2,
            )?;
            model.backward(&f.activations, &r.grads)?;
            lr = cosine_lr(step, total, cfg.lr0)?;
            model.adam_step(&AdamConfig::new(lr, cfg.weight_decay), is_pretrain_param)?;
            step_losses.push(r.loss);
            epoch_loss += r.loss * batch.len() as f64;
            step += 1;
        }
        let mut row = CurveRow::new(epoch, "train");
        row.loss = Some(epoch_loss / train.len() as f64);
        row.lr = Some(lr);
        curve.push(row);
        if let Some(r2) = holdout_r2(model, data, &hold, &normalizer)? {
            let mut row = CurveRow::new(epoch, "holdout");
            row.r2_ws = Some(r2[0]);
            row.r2_flops = Some(r2[1]);
            row.r2_params = Some(r2[2]);
            curve.push(row);
        }
    }
    let r2 = holdout_r2(model, data, &hold, &normalizer)?;
    model.copy_head(Head::WsAcc, Head::Rank);
    Ok(PretrainReport {
        normalizer,
        step_losses,
        curve,
        r2,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub relevance: Option<RelevanceMap>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_holdout_ndcg: Option<f64>,
    pub curve: Vec<CurveRow>,
}

fn relevances(map: Option<&RelevanceMap>, accs: &[f64]) -> Vec<f64> {
    match map {
        Some(m) => accs.iter().map(|a| m.map(*a)).collect(),
        None => vec![0.0; accs.len()],
    }
}

/// Trains the encoder and rank head on labeled examples. Each mini-batch is one ranked
/// list; with a hold-out split and a patience, training stops once hold-out NDCG has not
/// improved for `patience` epochs and the best epoch's parameters are restored.
pub fn finetune(
    model: &mut RankingModel,
    labeled: &[LabeledExample],
    cfg: &TrainConfig,
    loss: RankLoss,
    seed: u64,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if labeled.len() < 2 {
        return Err(Error::Degenerate(format!(
            "finetuning needs at least 2 labeled architectures, got {}",
            labeled.len()
        )));
    }
    let accs: Vec<f64> = labeled.iter().map(|e| e.val_acc).collect();
    let relevance = match RelevanceMap::fit_default(&accs) {
        Ok(m) => Some(m),
        Err(Error::Degenerate(msg)) => {
            log::warn!("{msg}; falling back to uniform relevance");
            None
        }
        Err(e) => return Err(e),
    };
    let rels = relevances(relevance.as_ref(), &accs);
    let ids: Vec<String> = labeled.iter().map(|e| e.enc.id.clone()).collect();

    let (train, hold) = if cfg.early_stop_patience.is_some() {
        split_holdout(labeled.len(), cfg.holdout_fraction, seed, "finetune-split")
    } else {
        ((0..labeled.len()).collect(), Vec::new())
    };
    let train_encs: Vec<&EncodedArch> = train.iter().map(|&i| labeled[i].enc).collect();
    model.fit_hparam_scaler(&train_encs);

    let mse_norm = if loss == RankLoss::Mse {
        let train_accs: Vec<f64> = train.iter().map(|&i| accs[i]).collect();
        Some(LabelNormalizer::fit(&[train_accs]).unwrap_or(LabelNormalizer {
            mean: vec![accs[0]],
            std: vec![1.0],
        }))
    } else {
        None
    };

    let hold_encs: Vec<&EncodedArch> = hold.iter().map(|&i| labeled[i].enc).collect();
    let hold_ids: Vec<String> = hold.iter().map(|&i| ids[i].clone()).collect();
    let hold_rels: Vec<f64> = hold.iter().map(|&i| rels[i]).collect();
    let holdout_ndcg = |m: &RankingModel| -> Result<Option<f64>> {
        if hold.is_empty() {
            return Ok(None);
        }
        let s = m.score(&hold_encs, Head::Rank)?;
        let v = metrics::ndcg_of_scores(&hold_ids, &s, &hold_rels)?;
        Ok((!v.degenerate).then_some(v.value))
    };
    let patience = cfg.early_stop_patience.filter(|_| !hold.is_empty());

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut shuffle_rng = rng::stream(seed, "finetune-shuffle", 0);
    let mut order = train.clone();
    let mut step = 0;
    let mut curve = Vec::new();
    let mut best: Option<(f64, RankingModel)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut lr = cfg.lr0;
        for batch in order.chunks(cfg.batch_size) {
            let encs: Vec<&EncodedArch> = batch.iter().map(|&i| labeled[i].enc).collect();
            let f = model.forward(
                &encs,
                &[Head::Rank],
                Mode::Train {
                    seed: rng::derive_seed(seed, "finetune-dropout", step as u64),
                },
            )?;
            let scores = &f.outputs[0];
            let batch_rels: Vec<f64> = batch.iter().map(|&i| rels[i]).collect();
            let (batch_loss, upstream) = match loss {
                RankLoss::LambdaRank | RankLoss::RankNet => {
                    let batch_ids: Vec<String> = batch.iter().map(|&i| ids[i].clone()).collect();
                    let pairs = lambdarank_pairs(&batch_ids, scores, &batch_rels, cfg.sigma)?;
                    let weighted = loss == RankLoss::LambdaRank;
                    let up = if weighted {
                        let mut up = vec![0.0; batch.len()];
                        for p in &pairs {
                            up[p.i] += p.lambda;
                            up[p.j] -= p.lambda;
                        }
                        up
                    } else {
                        ranknet_lambdas(scores, &batch_rels, cfg.sigma)?
                    };
                    (lambdarank_loss(&pairs, scores, cfg.sigma, weighted), up)
                }
                RankLoss::Mse => {
                    let norm = mse_norm.as_ref().expect("fitted for MSE");
                    let targets: Vec<f64> = batch.iter().map(|&i| norm.normalize(0, accs[i])).collect();
                    mse(scores, &targets)?
                }
            };
            model.backward(&f.activations, &[upstream])?;
            lr = cosine_lr(step, total, cfg.lr0)?;
            model.adam_step(&AdamConfig::new(lr, cfg.weight_decay), is_finetune_param)?;
            epoch_loss += batch_loss;
            step += 1;
        }
        epochs_run = epoch + 1;
        let mut row = CurveRow::new(epoch, "train");
        row.loss = Some(epoch_loss / steps_per_epoch as f64);
        row.lr = Some(lr);
        curve.push(row);

        if let Some(patience) = patience {
            let ndcg = holdout_ndcg(model)?;
            let mut row = CurveRow::new(epoch, "holdout");
            row.ndcg = ndcg;
            curve.push(row);
            let value = ndcg.unwrap_or(1.0);
            match &best {
                Some((b, _)) if value <= *b => since_best += 1,
                _ => {
                    best = Some((value, model.clone()));
                    since_best = 0;
                }
            }
            if since_best >= patience {
                stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }
    let best_holdout_ndcg = best.as_ref().map(|b| b.0);
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(FinetuneReport {
        relevance,
        epochs_run,
        stopped_early,
        best_holdout_ndcg,
        curve,
    })
}
