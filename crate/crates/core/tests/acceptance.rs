//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion.
//!
//! Exact criteria (1-5, 9) fail the process when they miss. The statistical search
//! comparisons (6-8) are reported; set `ACENAS_ACCEPTANCE_STRICT=1` to make a miss
//! there fail the process as well. Criterion 10 runs only when
//! `ACENAS_NB201_SPACE` names a space file.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use acenas_core::cli;
use acenas_core::ltr::{self, RankLoss, TrainConfig, WeakExample};
use acenas_core::metrics::{self, RankedList, RelevanceMap};
use acenas_core::nn::{Head, ModelConfig, RankingModel};
use acenas_core::search::{self, SearchConfig, SearchView};
use acenas_core::space::{self, encode_space, SearchSpace, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq)]
enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Line {
    id: u32,
    verdict: Verdict,
    hard: bool,
    detail: String,
}

fn line(id: u32, ok: bool, hard: bool, detail: String) -> Line {
    let verdict = if ok { Verdict::Pass } else { Verdict::Fail };
    Line { id, verdict, hard, detail }
}

fn c1_ndcg_brute_force() -> Line {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut lists = 0;
    for v in 0..200 {
        let n = 1 + v % 7;
        let rels: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        if rels.iter().all(|r| *r == 0.0) {
            continue;
        }
        let ids: Vec<String> = (0..n).map(|i| format!("a{i}")).collect();
        let perms = common::permutations(n);
        let idcg = perms
            .iter()
            .map(|p| common::plain_dcg(&p.iter().map(|&i| rels[i]).collect::<Vec<_>>()))
            .fold(f64::NEG_INFINITY, f64::max);
        for perm in perms {
            // Scores that realise this ordering exactly.
            let mut scores = vec![0.0; n];
            for (pos, &item) in perm.iter().enumerate() {
                scores[item] = (n - pos) as f64;
            }
            let list = RankedList::from_parts(&ids, &scores, &rels).unwrap();
            let got = metrics::ndcg(&list, None).unwrap().value;
            let ordered: Vec<f64> = perm.iter().map(|&i| rels[i]).collect();
            worst = worst.max((got - common::plain_dcg(&ordered) / idcg).abs());
            lists += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    line(1, worst <= 1e-9 && secs < 60.0, true, format!("{lists} orderings, max |diff| {worst:.2e}, {secs:.1}s"))
}

fn c2_dcg_hand_values() -> Line {
    let dcg = metrics::dcg(&[3.0, 1.0, 2.0]).unwrap();
    let ids: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    let list = RankedList::from_parts(&ids, &[3.0, 2.0, 1.0], &[3.0, 1.0, 2.0]).unwrap();
    let ndcg = metrics::ndcg(&list, None).unwrap().value;
    let ok = (dcg - 9.13093).abs() <= 1e-5 && (ndcg - 0.97212).abs() <= 1e-5;
    line(2, ok, true, format!("dcg {dcg:.5}, ndcg {ndcg:.5}"))
}

fn c3_gradients() -> Line {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..5 {
        let (mut model, encs) = common::tiny_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for head in Head::ALL {
            let up = vec![(0..encs.len()).map(|_| rng.random_range(-1.0..1.0)).collect()];
            let r = common::finite_difference_check(&mut model, &encs, &[head], &up, 1e-5, 1e-6);
            worst = worst.max(r.max_rel_err);
            checked += r.checked;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    line(3, worst < 1e-4 && secs < 120.0, true, format!("{checked} partials, max rel err {worst:.2e}, {secs:.1}s"))
}

fn c4_lambdarank_factorization() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ids: Vec<String> = (0..20).map(|i| format!("a{i:02}")).collect();
    let (mut fact, mut accum): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let scores: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
        let rels: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..20.0)).collect();
        for p in ltr::lambdarank_pairs(&ids, &scores, &rels, 1.0).unwrap() {
            fact = fact.max((p.lambda - p.ranknet * p.delta_ndcg).abs());
        }
        let got = ltr::lambdarank_lambdas(&ids, &scores, &rels, 1.0).unwrap();
        let want = common::brute_force_lambdas(&ids, &scores, &rels, 1.0);
        for (g, w) in got.iter().zip(&want) {
            accum = accum.max((g - w).abs() / w.abs().max(1e-12));
        }
    }
    line(4, fact <= 1e-12 && accum <= 1e-9, true, format!("factorization max diff {fact:.1e}, accumulation max rel diff {accum:.1e}"))
}

fn c5_relevance_map() -> Line {
    let m = RelevanceMap::fit_default(&[0.0, 25.0, 50.0, 75.0, 100.0]).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let ok = close(m.lower, 20.0)
        && close(m.upper, 100.0)
        && close(m.map(60.0), 10.0)
        && m.map(20.0) == 0.0
        && m.map(5.0) == 0.0
        && close(m.map(100.0), 20.0);
    line(5, ok, true, format!("lower {}, upper {}, map(60) {}, map(100) {}", m.lower, m.upper, m.map(60.0), m.map(100.0)))
}

const SEEDS: u64 = 20;

/// Mid-size network; pretraining epochs shortened so the suite fits its time budget.
fn acceptance_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        hparam_dim: 2,
        gcn_hidden: vec![32; 4],
        sort_k: 9,
        conv_channels: 16,
        hparam_proj: 16,
        head_hidden: 64,
        ..Default::default()
    }
}

const PRETRAIN_EPOCHS: usize = 60;

fn pretrained(space: &SearchSpace, mc: &ModelConfig, seed: u64) -> RankingModel {
    let encs = encode_space(space).unwrap();
    let cfg = TrainConfig { epochs: PRETRAIN_EPOCHS, ..TrainConfig::pretrain() };
    let weak: Vec<WeakExample> = space
        .records()
        .zip(&encs)
        .take(cfg.sample_size)
        .map(|(r, e)| WeakExample::from_record(r, e).unwrap())
        .collect();
    let mut model = RankingModel::build(mc.clone(), seed).unwrap();
    ltr::pretrain(&mut model, &weak, &cfg, seed).unwrap();
    model
}

struct MethodRuns {
    name: &'static str,
    top_k_regret: Vec<f64>,
}

fn median(v: &[f64]) -> f64 {
    metrics::quantile(v, 0.5).unwrap()
}

fn c6_to_c8() -> Vec<Line> {
    let t = Instant::now();
    let synth = SynthConfig { size: 5000, ..Default::default() };
    let raw = space::generate_synthetic_space(&synth, 1).unwrap();
    let space = space::calibrate_weak_labels(&raw, 0.6, 1).unwrap();
    let ws: Vec<f64> = space.records().map(|r| r.ws_acc.unwrap()).collect();
    let val: Vec<f64> = space.records().map(|r| r.val_acc).collect();
    let tau = metrics::kendall_tau(&ws, &val).unwrap();
    let mc = acceptance_model();
    let pre = pretrained(&space, &mc, 1);
    let view = SearchView::new(&space).unwrap();

    let mut methods = Vec::new();
    let mut pooled: Vec<(f64, f64, f64)> = Vec::new();
    for (name, use_pretrained, loss) in [
        ("acenas", true, RankLoss::LambdaRank),
        ("vanilla-mse", false, RankLoss::Mse),
        ("ranknet", true, RankLoss::RankNet),
        ("no-pretrain", false, RankLoss::LambdaRank),
    ] {
        let mut runs = MethodRuns { name, top_k_regret: Vec::new() };
        for seed in 0..SEEDS {
            let init = if use_pretrained { pre.clone() } else { RankingModel::build(mc.clone(), 100 + seed).unwrap() };
            let cfg = SearchConfig { seed, loss, ..Default::default() };
            let (_, trace) = search::iterative_search(&view, &init, &cfg).unwrap();
            let out = search::finalize(&trace, &space).unwrap();
            let last = trace.snapshots.last().unwrap();
            pooled.push((last.ndcg.unwrap(), last.tau.unwrap(), out.top_k_best_test));
            runs.top_k_regret.push(out.top_k_test_regret);
        }
        methods.push(runs);
    }

    let acenas = median(&methods[0].top_k_regret);
    let others: Vec<String> = methods[1..].iter().map(|m| format!("{} {:.3}", m.name, median(&m.top_k_regret))).collect();
    let ok6 = tau >= 0.55 && tau <= 0.65 && methods[1..].iter().all(|m| acenas <= median(&m.top_k_regret));
    let secs6 = t.elapsed().as_secs_f64();
    let l6 = line(
        6,
        ok6,
        false,
        format!("weak tau {tau:.3}; median top-10 test regret acenas {acenas:.3} vs {}; {secs6:.0}s", others.join(", ")),
    );

    let nd: Vec<f64> = pooled.iter().map(|p| p.0).collect();
    let kt: Vec<f64> = pooled.iter().map(|p| p.1).collect();
    let best: Vec<f64> = pooled.iter().map(|p| p.2).collect();
    let r_ndcg = metrics::pearson(&nd, &best).unwrap();
    let r_tau = metrics::pearson(&kt, &best).unwrap();
    let l7 = line(7, r_ndcg > r_tau, false, format!("{} runs, pearson(ndcg) {r_ndcg:.3} vs pearson(tau) {r_tau:.3}", pooled.len()));

    // 80 search samples plus a final top-20 keeps the total at the 100 the greedy baseline spends.
    let greedy = search::finalize(&search::ws_greedy_trace(&space, 100, 10).unwrap(), &space).unwrap().val_regret;
    let mut regrets = Vec::new();
    for seed in 0..SEEDS {
        let cfg = SearchConfig { seed, per_round: 16, top_k: 20, ..Default::default() };
        let (_, trace) = search::iterative_search(&view, &pre, &cfg).unwrap();
        assert_eq!(trace.ids().count(), 100);
        regrets.push(search::finalize(&trace, &space).unwrap().val_regret);
    }
    let ace = median(&regrets);
    let l8 = line(8, ace < greedy, false, format!("median top-1 val regret acenas {ace:.3} vs ws-greedy {greedy:.3}"));
    vec![l6, l7, l8]
}

const DETERMINISM_CONFIG: &str = r#"
[model]
gcn_hidden = [8, 8]
sort_k = 6
conv_channels = 4
hparam_proj = 4
head_hidden = 16

[pretrain]
epochs = 3
sample_size = 200

[finetune]
epochs = 5
early_stop_patience = 2

[search]
budget = 40
rounds = 2
top_k = 5
"#;

fn cli_pipeline(root: &Path) -> Vec<Vec<u8>> {
    let config = root.join("c.toml");
    fs::write(&config, DETERMINISM_CONFIG).unwrap();
    let mut outputs = Vec::new();
    for stage in ["synth", "pre", "search"] {
        fs::create_dir_all(root.join(stage)).unwrap();
    }
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let space = root.join("synth").join(cli::SPACE_FILE);
    let ckpt = root.join("pre").join(cli::CHECKPOINT_FILE);
    let runs: [Vec<String>; 3] = [
        vec!["synth".into(), "--out".into(), s(&root.join("synth")), "--size".into(), "400".into()],
        vec!["pretrain".into(), "--out".into(), s(&root.join("pre")), "--space".into(), s(&space)],
        vec!["search".into(), "--out".into(), s(&root.join("search")), "--space".into(), s(&space), "--checkpoint".into(), s(&ckpt)],
    ];
    for mut args in runs {
        args.insert(0, "acenas".into());
        args.extend(["--seed".into(), "11".into(), "--config".into(), s(&config)]);
        assert_eq!(cli::main_with_args(args.into_iter().map(Into::into)), cli::EXIT_OK);
    }
    for f in [space, ckpt, root.join("search").join(cli::TRACE_FILE)] {
        outputs.push(fs::read(f).unwrap());
    }
    outputs
}

fn c9_determinism() -> Line {
    let a = tempfile::TempDir::new().unwrap();
    let b = tempfile::TempDir::new().unwrap();
    let (x, y) = (cli_pipeline(a.path()), cli_pipeline(b.path()));
    let same: Vec<bool> = x.iter().zip(&y).map(|(p, q)| p == q).collect();
    line(9, same.iter().all(|s| *s), true, format!("space/checkpoint/trace identical: {same:?}"))
}

fn c10_nb201() -> Line {
    let Ok(path) = std::env::var("ACENAS_NB201_SPACE") else {
        return Line { id: 10, verdict: Verdict::Skip, hard: false, detail: "ACENAS_NB201_SPACE not set".into() };
    };
    let loaded = space::load_space(Path::new(&path)).unwrap();
    let space = space::calibrate_weak_labels(&loaded, 0.6, 1).unwrap();
    let mc = ModelConfig {
        vocab_size: space.meta().vocab.len(),
        num_cells: space.num_cells(),
        hparam_dim: space.meta().hparam_dim,
        ..acceptance_model()
    };
    let pre = pretrained(&space, &mc, 1);
    let view = SearchView::new(&space).unwrap();
    let mut tests = Vec::new();
    for seed in 0..10 {
        let (_, trace) = search::iterative_search(&view, &pre, &SearchConfig { seed, ..Default::default() }).unwrap();
        tests.push(search::finalize(&trace, &space).unwrap().test_acc);
    }
    let mean = tests.iter().sum::<f64>() / tests.len() as f64;
    line(10, mean >= 73.0, true, format!("mean test accuracy {mean:.2} over 10 seeds"))
}

fn main() {
    let strict = std::env::var("ACENAS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut lines = vec![c1_ndcg_brute_force(), c2_dcg_hand_values(), c3_gradients(), c4_lambdarank_factorization(), c5_relevance_map()];
    lines.push(c9_determinism());
    lines.extend(c6_to_c8());
    lines.push(c10_nb201());
    lines.sort_by_key(|l| l.id);

    let mut failed = false;
    for l in &lines {
        let tag = match l.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Skip => "SKIP",
        };
        println!("criterion {:>2} {tag}: {}", l.id, l.detail);
        if l.verdict == Verdict::Fail && (l.hard || strict) {
            failed = true;
        }
    }
    if failed {
        std::process::exit(1);
    }
}
