//! Search orchestration: iterative explore/exploit sampling with a ranking model,
//! final top-k selection, surrogate-guided evolution and the weight-sharing greedy
//! baseline.
//!
//! The search loop only ever sees a [`SearchView`], which carries validation accuracies
//! but no test accuracies. [`finalize`] is the single place a test accuracy is read.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ltr::{self, LabeledExample, RankLoss, TrainConfig};
use crate::metrics::{self, RelevanceMap};
use crate::nn::{Head, RankingModel};
use crate::rng;
use crate::space::{encode_architecture, encode_space, mutate, Architecture, EncodedArch, Landscape, SearchSpace};

const SCORE_CHUNK: usize = 512;

/// Encoded architectures plus the validation accuracies the search may reveal.
#[derive(Clone, Debug)]
pub struct SearchView {
    encodings: Vec<EncodedArch>,
    val_acc: Vec<f64>,
    index: HashMap<String, usize>,
    eval_map: Option<RelevanceMap>,
    best_val: f64,
}

impl SearchView {
    pub fn new(space: &SearchSpace) -> Result<Self> {
        let encodings = encode_space(space)?;
        let val_acc = space.records().map(|r| r.val_acc).collect();
        Self::from_parts(encodings, val_acc)
    }

    pub fn from_parts(encodings: Vec<EncodedArch>, val_acc: Vec<f64>) -> Result<Self> {
        if encodings.len() != val_acc.len() {
            return Err(Error::LengthMismatch {
                left: encodings.len(),
                right: val_acc.len(),
            });
        }
        let mut index = HashMap::with_capacity(encodings.len());
        for (i, e) in encodings.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(e.id.clone()));
            }
        }
        let eval_map = RelevanceMap::fit_default(&val_acc).ok();
        let best_val = val_acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            encodings,
            val_acc,
            index,
            eval_map,
            best_val,
        })
    }

    pub fn len(&self) -> usize {
        self.encodings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encodings.is_empty()
    }

    pub fn encodings(&self) -> &[EncodedArch] {
        &self.encodings
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn best_val_acc(&self) -> f64 {
        self.best_val
    }

    fn reveal(&self, i: usize) -> f64 {
        self.val_acc[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Random,
    Model,
    TopK,
    WsGreedy,
}

impl Origin {
    pub fn name(self) -> &'static str {
        match self {
            Origin::Random => "random",
            Origin::Model => "model",
            Origin::TopK => "topk",
            Origin::WsGreedy => "ws-greedy",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    /// Model-guided exploitation after the first round.
    Iterative,
    /// Uniform sampling in every round and for the final k; no model is trained.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub per_round: usize,
    pub rounds: usize,
    pub alpha: f64,
    pub top_k: usize,
    pub seed: u64,
    pub loss: RankLoss,
    pub sampler: Sampler,
    pub train: TrainConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            per_round: 20,
            rounds: 5,
            alpha: 0.5,
            top_k: 10,
            seed: 0,
            loss: RankLoss::LambdaRank,
            sampler: Sampler::Iterative,
            train: TrainConfig::finetune(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha = {} must be in [0, 1]", self.alpha)));
        }
        if self.per_round * self.rounds == 0 {
            return Err(Error::Config("per-round budget and rounds must be positive".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        self.train.validate()
    }

    /// Architectures whose validation accuracy is revealed: `n * R + k`.
    pub fn total_budget(&self) -> usize {
        self.per_round * self.rounds + self.top_k
    }

    fn exploit_count(&self, round: usize) -> usize {
        if round == 1 || self.sampler == Sampler::Random {
            0
        } else {
            (self.alpha * self.per_round as f64).floor() as usize
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// 1-based round; the final top-k samples carry `rounds + 1`.
    pub round: usize,
    pub id: String,
    pub origin: Origin,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSnapshot {
    pub round: usize,
    pub labeled: usize,
    /// NDCG / Kendall tau of the round's model over the still-unlabeled architectures.
    pub ndcg: Option<f64>,
    pub tau: Option<f64>,
    pub best_val_acc: f64,
    /// Best validation accuracy in the space minus the best one labeled so far.
    pub val_regret: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub samples: Vec<Sample>,
    pub top_k: Vec<String>,
    pub snapshots: Vec<RoundSnapshot>,
    /// Best validation accuracy over every revealed architecture (lowest id on ties).
    pub chosen: String,
}

impl SearchTrace {
    /// One JSON object per sample: `{round, id, origin, val_acc}`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }
}

/// Indices of `candidates` ordered by descending score, ties by id.
fn ranked_indices(candidates: &[&EncodedArch], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| metrics::score_order(scores[a], &candidates[a].id, scores[b], &candidates[b].id));
    order
}

/// Rank-head scores for any number of architectures.
pub fn score_all(model: &RankingModel, candidates: &[&EncodedArch]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(candidates.len());
    for chunk in candidates.chunks(SCORE_CHUNK) {
        out.extend(model.score(chunk, Head::Rank)?);
    }
    Ok(out)
}

/// Indices (into `candidates`) of the `k` highest-scored architectures, best first.
pub fn select_top_k(model: &RankingModel, candidates: &[&EncodedArch], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > candidates.len() {
        return Err(Error::Budget {
            budget: k,
            size: candidates.len(),
        });
    }
    let scores = score_all(model, candidates)?;
    let mut order = ranked_indices(candidates, &scores);
    order.truncate(k);
    Ok(order)
}

struct Labeled {
    order: Vec<usize>,
    mask: Vec<bool>,
}

impl Labeled {
    fn unlabeled(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }

    fn add(&mut self, i: usize, id: &str) -> Result<()> {
        if self.mask[i] {
            return Err(Error::Internal(format!("`{id}` sampled twice")));
        }
        self.mask[i] = true;
        self.order.push(i);
        Ok(())
    }
}

fn finetune_on(view: &SearchView, init: &RankingModel, labeled: &[usize], cfg: &SearchConfig, round: usize) -> Result<RankingModel> {
    let mut model = init.clone();
    let examples: Vec<LabeledExample> = labeled
        .iter()
        .map(|&i| LabeledExample {
            enc: &view.encodings[i],
            val_acc: view.reveal(i),
        })
        .collect();
    ltr::finetune(
        &mut model,
        &examples,
        &cfg.train,
        cfg.loss,
        rng::derive_seed(cfg.seed, "search-finetune", round as u64),
    )?;
    Ok(model)
}

fn snapshot(view: &SearchView, model: Option<&RankingModel>, labeled: &Labeled, round: usize) -> Result<RoundSnapshot> {
    let best = labeled
        .order
        .iter()
        .map(|&i| view.reveal(i))
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut ndcg, mut tau) = (None, None);
    let pool = labeled.unlabeled();
    if let (Some(model), Some(map)) = (model, &view.eval_map) {
        if pool.len() >= 2 {
            let encs: Vec<&EncodedArch> = pool.iter().map(|&i| &view.encodings[i]).collect();
            let scores = score_all(model, &encs)?;
            let ids: Vec<String> = encs.iter().map(|e| e.id.clone()).collect();
            let vals: Vec<f64> = pool.iter().map(|&i| view.reveal(i)).collect();
            let rels: Vec<f64> = vals.iter().map(|v| map.map(*v)).collect();
            let n = metrics::ndcg_of_scores(&ids, &scores, &rels)?;
            ndcg = (!n.degenerate).then_some(n.value);
            tau = metrics::kendall_tau(&scores, &vals).ok();
        }
    }
    Ok(RoundSnapshot {
        round,
        labeled: labeled.order.len(),
        ndcg,
        tau,
        best_val_acc: best,
        val_regret: view.best_val - best,
    })
}

/// Runs `rounds` rounds of sampling and finetuning, then labels the model's top-k.
///
/// Every round re-finetunes a copy of `init` on all architectures labeled so far.
/// Returns the last finetuned model (`init` unchanged for [`Sampler::Random`]).
pub fn iterative_search(view: &SearchView, init: &RankingModel, cfg: &SearchConfig) -> Result<(RankingModel, SearchTrace)> {
    cfg.validate()?;
    let budget = cfg.total_budget();
    if budget > view.len() {
        return Err(Error::Budget {
            budget,
            size: view.len(),
        });
    }
    let mut rng = rng::stream(cfg.seed, "search-sampling", 0);
    let mut labeled = Labeled {
        order: Vec::with_capacity(budget),
        mask: vec![false; view.len()],
    };
    let mut samples = Vec::with_capacity(budget);
    let mut snapshots = Vec::with_capacity(cfg.rounds);
    let mut model: Option<RankingModel> = None;

    for round in 1..=cfg.rounds {
        let exploit = cfg.exploit_count(round);
        let mut picked: Vec<(usize, Origin)> = Vec::with_capacity(cfg.per_round);
        let mut pool = labeled.unlabeled();
        if exploit > 0 {
            let m = model.as_ref().ok_or_else(|| Error::Internal("exploit without a model".into()))?;
            let encs: Vec<&EncodedArch> = pool.iter().map(|&i| &view.encodings[i]).collect();
            let top = select_top_k(m, &encs, exploit)?;
            let chosen: HashSet<usize> = top.iter().map(|&t| pool[t]).collect();
            picked.extend(top.iter().map(|&t| (pool[t], Origin::Model)));
            pool.retain(|i| !chosen.contains(i));
        }
        let explore = cfg.per_round - exploit;
        let (random, _) = pool.partial_shuffle(&mut rng, explore);
        picked.extend(random.iter().map(|&i| (i, Origin::Random)));

        for (i, origin) in picked {
            let id = &view.encodings[i].id;
            labeled.add(i, id)?;
            samples.push(Sample {
                round,
                id: id.clone(),
                origin,
                val_acc: view.reveal(i),
            });
        }
        if cfg.sampler == Sampler::Iterative {
            model = Some(finetune_on(view, init, &labeled.order, cfg, round)?);
        }
        snapshots.push(snapshot(view, model.as_ref(), &labeled, round)?);
        log::info!(
            "round {round}: {} labeled, best val {:.3}",
            labeled.order.len(),
            snapshots[round - 1].best_val_acc
        );
    }

    let mut pool = labeled.unlabeled();
    let final_pick: Vec<(usize, Origin)> = match &model {
        Some(m) => {
            let encs: Vec<&EncodedArch> = pool.iter().map(|&i| &view.encodings[i]).collect();
            select_top_k(m, &encs, cfg.top_k)?
                .into_iter()
                .map(|t| (pool[t], Origin::TopK))
                .collect()
        }
        None => {
            let (random, _) = pool.partial_shuffle(&mut rng, cfg.top_k);
            random.iter().map(|&i| (i, Origin::Random)).collect()
        }
    };
    let mut top_k = Vec::with_capacity(cfg.top_k);
    for (i, origin) in final_pick {
        let id = &view.encodings[i].id;
        labeled.add(i, id)?;
        top_k.push(id.clone());
        samples.push(Sample {
            round: cfg.rounds + 1,
            id: id.clone(),
            origin,
            val_acc: view.reveal(i),
        });
    }
    let chosen = best_validation(&samples)?.id.clone();
    let trace = SearchTrace {
        samples,
        top_k,
        snapshots,
        chosen,
    };
    Ok((model.unwrap_or_else(|| init.clone()), trace))
}

fn best_validation(samples: &[Sample]) -> Result<&Sample> {
    samples
        .iter()
        .min_by(|a, b| metrics::score_order(a.val_acc, &a.id, b.val_acc, &b.id))
        .ok_or_else(|| Error::Degenerate("empty trace".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub chosen: String,
    pub val_acc: f64,
    pub test_acc: f64,
    /// Best test accuracy in the space minus the best test accuracy among the top-k.
    pub top_k_test_regret: f64,
    /// Best test accuracy among the top-k.
    pub top_k_best_test: f64,
    /// Best validation accuracy in the space minus that of the chosen architecture.
    pub val_regret: f64,
}

/// Picks the best-validation architecture of the trace and reports its test accuracy.
pub fn finalize(trace: &SearchTrace, space: &SearchSpace) -> Result<Outcome> {
    let best = best_validation(&trace.samples)?;
    let test_acc = space.record(&best.id)?.test_acc;
    let top: Vec<f64> = trace
        .top_k
        .iter()
        .map(|id| space.record(id).map(|r| r.test_acc))
        .collect::<Result<_>>()?;
    let regret = metrics::top_k_regret(&top, space.best_test_acc(), top.len())?;
    Ok(Outcome {
        chosen: best.id.clone(),
        val_acc: best.val_acc,
        test_acc,
        top_k_test_regret: regret,
        top_k_best_test: space.best_test_acc() - regret,
        val_regret: space.best_val_acc() - best.val_acc,
    })
}

/// The `budget` architectures with the highest weak label (ties by id).
pub fn ws_greedy_baseline(space: &SearchSpace, budget: usize) -> Result<Vec<String>> {
    if budget == 0 || budget > space.len() {
        return Err(Error::Budget {
            budget,
            size: space.len(),
        });
    }
    let mut scored = Vec::with_capacity(space.len());
    for r in space.records() {
        let ws = r.ws_acc.ok_or_else(|| Error::MissingWeakLabel(r.arch.id.clone()))?;
        scored.push((ws, r.arch.id.clone()));
    }
    scored.sort_by(|a, b| metrics::score_order(a.0, &a.1, b.0, &b.1));
    Ok(scored.into_iter().take(budget).map(|s| s.1).collect())
}

/// Trace of the greedy baseline: the `budget` best weak labels, validation accuracies
/// revealed for all of them, the first `top_k` of them standing in for the final top-k.
pub fn ws_greedy_trace(space: &SearchSpace, budget: usize, top_k: usize) -> Result<SearchTrace> {
    let ids = ws_greedy_baseline(space, budget)?;
    if top_k == 0 || top_k > ids.len() {
        return Err(Error::Config(format!("top_k = {top_k} must be in 1..={}", ids.len())));
    }
    let samples = ids
        .iter()
        .map(|id| {
            Ok(Sample {
                round: 1,
                id: id.clone(),
                origin: Origin::WsGreedy,
                val_acc: space.record(id)?.val_acc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = samples.iter().map(|s| s.val_acc).fold(f64::NEG_INFINITY, f64::max);
    let chosen = best_validation(&samples)?.id.clone();
    Ok(SearchTrace {
        top_k: ids[..top_k].to_vec(),
        snapshots: vec![RoundSnapshot {
            round: 1,
            labeled: samples.len(),
            ndcg: None,
            tau: None,
            best_val_acc: best,
            val_regret: space.best_val_acc() - best,
        }],
        samples,
        chosen,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    pub population: usize,
    pub tournament: usize,
    pub generations: usize,
    pub mutations_per_child: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population: 64,
            tournament: 8,
            generations: 200,
            mutations_per_child: 1,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.tournament == 0 || self.tournament > self.population {
            return Err(Error::Config(format!(
                "tournament size {} must be in 1..={}",
                self.tournament, self.population
            )));
        }
        if self.mutations_per_child == 0 {
            return Err(Error::Config("mutations_per_child must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EvolutionResult {
    /// Final population, best surrogate score first.
    pub population: Vec<(Architecture, f64)>,
    /// Best score seen after initialization and after each generation.
    pub best_history: Vec<f64>,
}

/// Regularized evolution that scores candidates with the rank head only.
pub fn evolve_with_surrogate(model: &RankingModel, land: &Landscape, cfg: &EvolutionConfig, seed: u64) -> Result<EvolutionResult> {
    cfg.validate()?;
    let vocab = land.vocab().to_vec();
    let real_ops: Vec<&str> = vocab
        .iter()
        .map(String::as_str)
        .filter(|l| !crate::space::is_pseudo_op(l))
        .collect();
    let mut rng = rng::stream(seed, "evolution", 0);
    let score = |archs: &[&Architecture]| -> Result<Vec<f64>> {
        let encs = archs
            .iter()
            .map(|a| encode_architecture(a, &vocab))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&EncodedArch> = encs.iter().collect();
        score_all(model, &refs)
    };
    let initial: Vec<Architecture> = (0..cfg.population)
        .map(|i| land.sample_architecture(&mut rng, format!("evo-{i:06}")))
        .collect();
    let scores = score(&initial.iter().collect::<Vec<_>>())?;
    let mut population: std::collections::VecDeque<(Architecture, f64)> = initial.into_iter().zip(scores).collect();
    let mut best = population.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let mut best_history = vec![best];
    let mut next_id = cfg.population;
    for _ in 0..cfg.generations {
        let contenders: Vec<usize> = rand::seq::index::sample(&mut rng, population.len(), cfg.tournament).into_vec();
        let parent = contenders
            .iter()
            .copied()
            .min_by(|&a, &b| metrics::score_order(population[a].1, &population[a].0.id, population[b].1, &population[b].0.id))
            .expect("tournament is nonempty");
        let mut child = population[parent].0.clone();
        for _ in 0..cfg.mutations_per_child {
            child = mutate(&child, &real_ops, &mut rng, format!("evo-{next_id:06}")).0;
        }
        next_id += 1;
        let s = score(&[&child])?[0];
        best = best.max(s);
        population.push_back((child, s));
        population.pop_front();
        best_history.push(best);
    }
    let mut population: Vec<(Architecture, f64)> = population.into();
    population.sort_by(|a, b| metrics::score_order(a.1, &a.0.id, b.1, &b.0.id));
    Ok(EvolutionResult {
        population,
        best_history,
    })
}

/// `count` uniformly random architectures from the generator, for comparisons.
pub fn random_architectures(land: &Landscape, count: usize, seed: u64) -> Vec<Architecture> {
    let mut rng = rng::stream(seed, "random-architectures", 0);
    (0..count)
        .map(|i| land.sample_architecture(&mut rng, format!("rand-{i:06}")))
        .collect()
}
