//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use acenas_core::metrics::{self, RankedList};
use acenas_core::nn::{Head, ModelConfig, Mode, RankingModel};
use acenas_core::space::{encode_architecture, generate_synthetic_space, EncodedArch, SynthConfig};

/// Every ordering of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        heap(k - 1, a, out);
        for i in 0..k - 1 {
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
            heap(k - 1, a, out);
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}

pub fn plain_dcg(rels: &[f64]) -> f64 {
    rels.iter()
        .enumerate()
        .map(|(i, r)| (2f64.powf(*r) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// Per-item LambdaRank coefficients by looping every pair and recomputing NDCG of the
/// swapped list from scratch.
pub fn brute_force_lambdas(ids: &[String], scores: &[f64], rels: &[f64], sigma: f64) -> Vec<f64> {
    let list = RankedList::from_parts(ids, scores, rels).unwrap();
    let pos_of = |id: &str| list.items().iter().position(|it| it.id == id).unwrap();
    let base = metrics::ndcg(&list, None).unwrap().value;
    let n = scores.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if rels[i] <= rels[j] {
                continue;
            }
            let swapped = list.swapped(pos_of(&ids[i]), pos_of(&ids[j])).unwrap();
            let delta = (metrics::ndcg(&swapped, None).unwrap().value - base).abs();
            let lam = -sigma / (1.0 + (sigma * (scores[i] - scores[j])).exp()) * delta;
            out[i] += lam;
            out[j] -= lam;
        }
    }
    out
}

pub fn small_encodings(n: usize, vocab_size: usize, hparam_dim: usize, seed: u64) -> Vec<EncodedArch> {
    let cfg = SynthConfig {
        size: n.max(2),
        vocab_size,
        hparam_dim,
        min_nodes: 3,
        max_nodes: 6,
        ..Default::default()
    };
    let space = generate_synthetic_space(&cfg, seed).unwrap();
    space
        .records()
        .take(n)
        .map(|r| encode_architecture(&r.arch, &space.meta().vocab).unwrap())
        .collect()
}

/// Random model with at most 200 parameters covering every layer type.
pub fn tiny_model(seed: u64) -> (RankingModel, Vec<EncodedArch>) {
    let cfg = ModelConfig {
        vocab_size: 4,
        num_cells: 1,
        hparam_dim: 1,
        gcn_hidden: vec![2, 2, 2, 2],
        sort_k: 3,
        conv_channels: 2,
        hparam_proj: 1,
        head_hidden: 3,
        dropout: 0.2,
    };
    let model = RankingModel::build(cfg, seed).unwrap();
    assert!(model.num_parameters() <= 200, "{}", model.num_parameters());
    (model, small_encodings(3, 4, 1, seed + 100))
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Central finite differences of `sum_h sum_i up[h][i] * out_h(i)` against `backward`.
/// The relative error uses `max(|fd|, |analytic|, floor)` as denominator so that
/// gradients that are zero up to rounding are compared absolutely.
pub fn finite_difference_check(
    model: &mut RankingModel,
    encs: &[EncodedArch],
    heads: &[Head],
    upstream: &[Vec<f64>],
    h: f64,
    floor: f64,
) -> GradCheck {
    let refs: Vec<&EncodedArch> = encs.iter().collect();
    let mode = Mode::Train { seed: 42 };
    let objective = |m: &RankingModel| -> f64 {
        let f = m.forward(&refs, heads, mode).unwrap();
        f.outputs
            .iter()
            .zip(upstream)
            .map(|(o, u)| o.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    model.params_mut().zero_grad();
    let f = model.forward(&refs, heads, mode).unwrap();
    model.backward(&f.activations, upstream).unwrap();
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (pi, name) in names.iter().enumerate() {
        let len = model.params().get(name).unwrap().value.len();
        for k in 0..len {
            let orig = model.params().get(name).unwrap().value.data()[k];
            model.params_mut().get_mut(name).unwrap().value.data_mut()[k] = orig + h;
            let plus = objective(model);
            model.params_mut().get_mut(name).unwrap().value.data_mut()[k] = orig - h;
            let minus = objective(model);
            model.params_mut().get_mut(name).unwrap().value.data_mut()[k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = analytic[pi][k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
            if rel > worst {
                worst = rel;
            }
            checked += 1;
        }
    }
    model.params_mut().zero_grad();
    GradCheck {
        max_rel_err: worst,
        checked,
    }
}

/// Model small enough for training runs inside unit tests.
pub fn small_model_config(vocab_size: usize, hparam_dim: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        num_cells: 1,
        hparam_dim,
        gcn_hidden: vec![16, 16, 16],
        sort_k: 8,
        conv_channels: 8,
        hparam_proj: 4,
        head_hidden: 32,
        dropout: 0.1,
    }
}
