//! Command-line front end: `synth`, `pretrain`, `search` and `report`.
//!
//! Every command resolves a [`RunConfig`] from defaults, an optional TOML file and flags
//! (in increasing precedence), writes it to `run_config.toml` in the output directory and
//! only ever writes inside that directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ltr::{self, RankLoss, TrainConfig, WeakExample};
use crate::metrics;
use crate::nn::{ModelConfig, RankingModel};
use crate::rng;
use crate::search::{self, Sampler, SearchConfig, SearchTrace, SearchView};
use crate::space::{self, encode_space, load_space, SearchSpace, SynthConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_RUNTIME: i32 = 5;

pub const RUN_CONFIG_FILE: &str = "run_config.toml";
pub const SPACE_FILE: &str = "space.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } => EXIT_IO,
        Error::Parse { .. }
        | Error::Invariant { .. }
        | Error::DuplicateId(_)
        | Error::UnknownId(_)
        | Error::UnknownOp(_)
        | Error::LengthMismatch { .. }
        | Error::OutOfRange { .. }
        | Error::Range(_)
        | Error::Dimension(_)
        | Error::MissingWeakLabel(_)
        | Error::Budget { .. }
        | Error::Json(_) => EXIT_VALIDATION,
        Error::Degenerate(_) | Error::Calibration(_) | Error::StaleActivations(_) | Error::Internal(_) => EXIT_RUNTIME,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Untrained GCN predictor regressed on validation accuracy.
    VanillaMse,
    /// Pretrained model finetuned with unweighted pairwise loss.
    Ranknet,
    /// The `budget` architectures with the best weak labels.
    WsGreedy,
    /// Uniform sampling, no model.
    Random,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::VanillaMse => "vanilla-mse",
            Baseline::Ranknet => "ranknet",
            Baseline::WsGreedy => "ws-greedy",
            Baseline::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakLabelSection {
    pub tau: f64,
}

impl Default for WeakLabelSection {
    fn default() -> Self {
        Self { tau: 0.6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    /// Iterative-sampling budget `n * R`; the final top-k comes on top.
    pub budget: usize,
    pub rounds: usize,
    pub alpha: f64,
    pub top_k: usize,
    pub baseline: Option<Baseline>,
    pub no_pretrain: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            budget: 100,
            rounds: 5,
            alpha: 0.5,
            top_k: 10,
            baseline: None,
            no_pretrain: false,
        }
    }
}

/// Everything a command needs; persisted next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub space: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub runs: Vec<PathBuf>,
    pub synth: SynthConfig,
    pub weak_labels: WeakLabelSection,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub search: SearchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            output_dir: PathBuf::new(),
            space: None,
            checkpoint: None,
            runs: Vec::new(),
            synth: SynthConfig::default(),
            weak_labels: WeakLabelSection::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            search: SearchSection::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with a TOML document; partial sections keep their other defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let over: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Value::try_from(Self::default()).map_err(|e| Error::Internal(e.to_string()))?;
        merge(&mut base, toml::Value::Table(over));
        base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }

    /// Identity of a configuration up to seed and output location.
    pub fn config_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.seed = 0;
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c)?;
        let digest = Sha256::digest(&bytes);
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    fn persist(&self) -> Result<()> {
        write_file(&self.output_dir.join(RUN_CONFIG_FILE), self.to_toml_string()?.as_bytes())
    }

    fn require_output_dir(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("an output directory is required".into()));
        }
        if !self.output_dir.is_dir() {
            return Err(Error::io(
                &self.output_dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
            ));
        }
        Ok(())
    }

    fn space_path(&self) -> Result<&Path> {
        self.space
            .as_deref()
            .ok_or_else(|| Error::Config("a space file is required (--space)".into()))
    }

    /// Model shape for `space`: widths from the config, input sizes from the space.
    fn model_config_for(&self, space: &SearchSpace) -> ModelConfig {
        ModelConfig {
            vocab_size: space.meta().vocab.len(),
            num_cells: space.num_cells(),
            hparam_dim: space.meta().hparam_dim,
            ..self.model.clone()
        }
    }

    pub fn method_name(&self) -> String {
        match (self.search.baseline, self.search.no_pretrain) {
            (Some(b), _) => b.name().to_string(),
            (None, true) => "acenas-no-pretrain".into(),
            (None, false) => "acenas".into(),
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub name: String,
    pub size: usize,
    pub seed: u64,
    pub tau_target: f64,
    pub tau_achieved: f64,
    pub best_val_acc: f64,
    pub best_test_acc: f64,
    pub mean_val_acc: f64,
}

/// Generates a synthetic space, calibrates weak labels and writes `space.jsonl`,
/// `synth_report.json` and `accuracy_histogram.csv`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthReport> {
    cfg.require_output_dir()?;
    cfg.persist()?;
    let plain = space::generate_synthetic_space(&cfg.synth, cfg.seed)?;
    let sp = space::calibrate_weak_labels(&plain, cfg.weak_labels.tau, cfg.seed)?;
    sp.save(&cfg.output_dir.join(SPACE_FILE))?;

    let vals: Vec<f64> = sp.records().map(|r| r.val_acc).collect();
    let tests: Vec<f64> = sp.records().map(|r| r.test_acc).collect();
    let ws: Vec<f64> = sp.records().map(|r| r.ws_acc.unwrap_or(f64::NAN)).collect();
    let report = SynthReport {
        name: cfg.synth.name.clone(),
        size: sp.len(),
        seed: cfg.seed,
        tau_target: cfg.weak_labels.tau,
        tau_achieved: metrics::kendall_tau(&ws, &vals)?,
        best_val_acc: sp.best_val_acc(),
        best_test_acc: sp.best_test_acc(),
        mean_val_acc: vals.iter().sum::<f64>() / vals.len() as f64,
    };
    write_json(&cfg.output_dir.join("synth_report.json"), &report)?;

    let mut hist = String::from("bin_low,bin_high,val_count,test_count,ws_count\n");
    let count = |xs: &[f64], lo: f64| xs.iter().filter(|&&x| x >= lo && (x < lo + 1.0 || (lo == 99.0 && x <= 100.0))).count();
    for b in 0..100 {
        let lo = b as f64;
        hist.push_str(&format!(
            "{lo},{},{},{},{}\n",
            lo + 1.0,
            count(&vals, lo),
            count(&tests, lo),
            count(&ws, lo)
        ));
    }
    write_file(&cfg.output_dir.join("accuracy_histogram.csv"), hist.as_bytes())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub samples: usize,
    pub parameters: usize,
    pub r2_ws: Option<f64>,
    pub r2_flops: Option<f64>,
    pub r2_params: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Pretrains on a weakly labeled sample of the space; writes `checkpoint.json`,
/// `pretrain_curve.csv` and `pretrain_report.json`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainSummary> {
    cfg.require_output_dir()?;
    cfg.persist()?;
    let sp = load_space(cfg.space_path()?)?;
    let encs = encode_space(&sp)?;
    let mut idx: Vec<usize> = (0..sp.len()).collect();
    idx.shuffle(&mut rng::stream(cfg.seed, "pretrain-sample", 0));
    idx.truncate(cfg.pretrain.sample_size.min(sp.len()));
    idx.sort_unstable();
    let records: Vec<_> = sp.records().collect();
    let data = idx
        .iter()
        .map(|&i| WeakExample::from_record(records[i], &encs[i]))
        .collect::<Result<Vec<_>>>()?;
    let mut model = RankingModel::build(cfg.model_config_for(&sp), cfg.seed)?;
    let report = ltr::pretrain(&mut model, &data, &cfg.pretrain, cfg.seed)?;
    model.save(&cfg.output_dir.join(CHECKPOINT_FILE))?;
    write_file(&cfg.output_dir.join("pretrain_curve.csv"), ltr::curve_csv(&report.curve).as_bytes())?;
    let summary = PretrainSummary {
        samples: data.len(),
        parameters: model.num_parameters(),
        r2_ws: report.r2.map(|r| r[0]),
        r2_flops: report.r2.map(|r| r[1]),
        r2_params: report.r2.map(|r| r[2]),
        final_loss: report.step_losses.last().copied(),
    };
    write_json(&cfg.output_dir.join("pretrain_report.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub method: String,
    pub seed: u64,
    pub labeled: usize,
    pub chosen: String,
    pub val_acc: f64,
    pub test_acc: f64,
    pub val_regret: f64,
    pub top_k_test_regret: f64,
    pub top_k_best_test: f64,
    pub final_ndcg: Option<f64>,
    pub final_tau: Option<f64>,
    pub rounds: Vec<search::RoundSnapshot>,
}

/// Runs one search (or baseline) and writes `trace.jsonl`, `summary.json`,
/// `budget_curve.csv` and `ndcg_vs_top_k.csv`.
pub fn cmd_search(cfg: &RunConfig) -> Result<SearchSummary> {
    cfg.require_output_dir()?;
    cfg.persist()?;
    let sp = load_space(cfg.space_path()?)?;
    let s = &cfg.search;
    if s.rounds == 0 || s.budget % s.rounds != 0 {
        return Err(Error::Config(format!(
            "budget {} must be a positive multiple of rounds {}",
            s.budget, s.rounds
        )));
    }
    let trace = match s.baseline {
        Some(Baseline::WsGreedy) => search::ws_greedy_trace(&sp, s.budget, s.top_k)?,
        baseline => {
            let view = SearchView::new(&sp)?;
            let fresh = || RankingModel::build(cfg.model_config_for(&sp), cfg.seed);
            let init = match (baseline, s.no_pretrain, &cfg.checkpoint) {
                (Some(Baseline::VanillaMse), _, _) | (_, true, _) | (Some(Baseline::Random), _, None) => fresh()?,
                (_, false, Some(path)) => RankingModel::load(path)?,
                (_, false, None) => {
                    return Err(Error::Config(
                        "a pretrained checkpoint (--checkpoint) or --no-pretrain is required".into(),
                    ))
                }
            };
            let search_cfg = SearchConfig {
                per_round: s.budget / s.rounds,
                rounds: s.rounds,
                alpha: s.alpha,
                top_k: s.top_k,
                seed: cfg.seed,
                loss: match baseline {
                    Some(Baseline::VanillaMse) => RankLoss::Mse,
                    Some(Baseline::Ranknet) => RankLoss::RankNet,
                    _ => RankLoss::LambdaRank,
                },
                sampler: if baseline == Some(Baseline::Random) {
                    Sampler::Random
                } else {
                    Sampler::Iterative
                },
                train: cfg.finetune.clone(),
            };
            search::iterative_search(&view, &init, &search_cfg)?.1
        }
    };
    let outcome = search::finalize(&trace, &sp)?;
    write_file(&cfg.output_dir.join(TRACE_FILE), trace.to_jsonl()?.as_bytes())?;
    let last = trace.snapshots.last();
    let summary = SearchSummary {
        method: cfg.method_name(),
        seed: cfg.seed,
        labeled: trace.samples.len(),
        chosen: outcome.chosen.clone(),
        val_acc: outcome.val_acc,
        test_acc: outcome.test_acc,
        val_regret: outcome.val_regret,
        top_k_test_regret: outcome.top_k_test_regret,
        top_k_best_test: outcome.top_k_best_test,
        final_ndcg: last.and_then(|l| l.ndcg),
        final_tau: last.and_then(|l| l.tau),
        rounds: trace.snapshots.clone(),
    };
    write_json(&cfg.output_dir.join(SUMMARY_FILE), &summary)?;
    write_file(&cfg.output_dir.join("budget_curve.csv"), budget_curve(&trace).as_bytes())?;
    let scatter = format!(
        "method,seed,ndcg,tau,top_k_best_test\n{},{},{},{},{}\n",
        summary.method,
        summary.seed,
        opt(summary.final_ndcg),
        opt(summary.final_tau),
        summary.top_k_best_test
    );
    write_file(&cfg.output_dir.join("ndcg_vs_top_k.csv"), scatter.as_bytes())?;
    Ok(summary)
}

/// Best validation accuracy after each revealed sample.
fn budget_curve(trace: &SearchTrace) -> String {
    let mut out = String::from("samples,round,best_val_acc\n");
    let mut best = f64::NEG_INFINITY;
    for (i, s) in trace.samples.iter().enumerate() {
        best = best.max(s.val_acc);
        out.push_str(&format!("{},{},{best}\n", i + 1, s.round));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config_hash: String,
    pub method: String,
    pub runs: usize,
    pub columns: BTreeMap<String, (f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub runs: usize,
    pub pearson_ndcg: f64,
    pub pearson_tau: f64,
}

pub const MIN_RUNS_FOR_CORRELATION: usize = 10;
const REPORT_COLUMNS: [&str; 6] = ["test_acc", "top_k_best_test", "top_k_test_regret", "val_regret", "ndcg", "tau"];

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn load_run(dir: &Path) -> Result<(RunConfig, SearchSummary)> {
    let cfg = RunConfig::load(&dir.join(RUN_CONFIG_FILE))?;
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let summary: SearchSummary = serde_json::from_slice(&text)
        .map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })?;
    Ok((cfg, summary))
}

/// Aggregates search runs into `aggregate.csv` (mean and sample std per config hash)
/// and, from ten runs on, `correlation.csv`.
pub fn cmd_report(cfg: &RunConfig) -> Result<(Vec<ReportRow>, Option<Correlation>)> {
    cfg.require_output_dir()?;
    if cfg.runs.is_empty() {
        return Err(Error::Config("at least one run directory is required".into()));
    }
    cfg.persist()?;
    let runs = cfg.runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let mut groups: BTreeMap<(String, String), Vec<&SearchSummary>> = BTreeMap::new();
    for (rc, s) in &runs {
        groups.entry((rc.config_hash()?, s.method.clone())).or_default().push(s);
    }
    let column = |s: &SearchSummary, name: &str| -> Option<f64> {
        match name {
            "test_acc" => Some(s.test_acc),
            "top_k_best_test" => Some(s.top_k_best_test),
            "top_k_test_regret" => Some(s.top_k_test_regret),
            "val_regret" => Some(s.val_regret),
            "ndcg" => s.final_ndcg,
            "tau" => s.final_tau,
            _ => None,
        }
    };
    let mut rows = Vec::with_capacity(groups.len());
    let mut csv = String::from("config_hash,method,runs");
    for c in REPORT_COLUMNS {
        csv.push_str(&format!(",{c}_mean,{c}_std"));
    }
    csv.push('\n');
    for ((hash, method), members) in &groups {
        let mut columns = BTreeMap::new();
        csv.push_str(&format!("{hash},{method},{}", members.len()));
        for c in REPORT_COLUMNS {
            let xs: Vec<f64> = members.iter().filter_map(|s| column(s, c)).collect();
            if xs.is_empty() {
                csv.push_str(",,");
            } else {
                let (m, sd) = mean_std(&xs);
                csv.push_str(&format!(",{m},{sd}"));
                columns.insert(c.to_string(), (m, sd));
            }
        }
        csv.push('\n');
        rows.push(ReportRow {
            config_hash: hash.clone(),
            method: method.clone(),
            runs: members.len(),
            columns,
        });
    }
    write_file(&cfg.output_dir.join("aggregate.csv"), csv.as_bytes())?;

    let pooled: Vec<(f64, f64, f64)> = runs
        .iter()
        .filter_map(|(_, s)| Some((s.final_ndcg?, s.final_tau?, s.top_k_best_test)))
        .collect();
    let mut correlation = None;
    if pooled.len() >= MIN_RUNS_FOR_CORRELATION {
        let ndcg: Vec<f64> = pooled.iter().map(|p| p.0).collect();
        let tau: Vec<f64> = pooled.iter().map(|p| p.1).collect();
        let best: Vec<f64> = pooled.iter().map(|p| p.2).collect();
        let c = Correlation {
            runs: pooled.len(),
            pearson_ndcg: metrics::pearson(&ndcg, &best)?,
            pearson_tau: metrics::pearson(&tau, &best)?,
        };
        write_file(
            &cfg.output_dir.join("correlation.csv"),
            format!("runs,pearson_ndcg_top_k_best,pearson_tau_top_k_best\n{},{},{}\n", c.runs, c.pearson_ndcg, c.pearson_tau).as_bytes(),
        )?;
        correlation = Some(c);
    }
    Ok((rows, correlation))
}

#[derive(Debug, Parser)]
#[command(name = "acenas", version, about = "Learning-to-rank architecture search on tabular and synthetic spaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Existing directory that receives every output of the command.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run configuration; flags take precedence over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic space with calibrated weak labels.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        size: Option<usize>,
        /// Target Kendall tau between weak labels and validation accuracy.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        hparam_dim: Option<usize>,
        #[arg(long)]
        num_cells: Option<usize>,
        #[arg(long)]
        noise_std: Option<f64>,
    },
    /// Pretrain the ranking model on weak labels, FLOPs and parameter counts.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        sample_size: Option<usize>,
    },
    /// Run iterative search (or a baseline) and report the chosen architecture.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Start finetuning from a freshly initialized model.
        #[arg(long)]
        no_pretrain: bool,
        /// Sampling budget before the final top-k.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Finetuning epochs per round.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Aggregate search run directories.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn base_config(common: &Common, command: &str) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.command = command.into();
    cfg.output_dir = common.out.clone();
    Ok(cfg)
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Resolves the run configuration of a parsed command line.
pub fn resolve(cli: Cli) -> Result<RunConfig> {
    Ok(match cli.command {
        Command::Synth {
            common,
            seed,
            size,
            tau,
            vocab_size,
            hparam_dim,
            num_cells,
            noise_std,
        } => {
            let mut cfg = base_config(&common, "synth")?;
            cfg.seed = seed;
            set(&mut cfg.synth.size, size);
            set(&mut cfg.weak_labels.tau, tau);
            set(&mut cfg.synth.vocab_size, vocab_size);
            set(&mut cfg.synth.hparam_dim, hparam_dim);
            set(&mut cfg.synth.num_cells, num_cells);
            set(&mut cfg.synth.noise_std, noise_std);
            cfg
        }
        Command::Pretrain {
            common,
            seed,
            space,
            epochs,
            lr,
            sample_size,
        } => {
            let mut cfg = base_config(&common, "pretrain")?;
            cfg.seed = seed;
            set(&mut cfg.space, space.map(Some));
            set(&mut cfg.pretrain.epochs, epochs);
            set(&mut cfg.pretrain.lr0, lr);
            set(&mut cfg.pretrain.sample_size, sample_size);
            cfg
        }
        Command::Search {
            common,
            seed,
            space,
            checkpoint,
            no_pretrain,
            budget,
            rounds,
            alpha,
            topk,
            baseline,
            epochs,
            patience,
        } => {
            let mut cfg = base_config(&common, "search")?;
            cfg.seed = seed;
            set(&mut cfg.space, space.map(Some));
            set(&mut cfg.checkpoint, checkpoint.map(Some));
            cfg.search.no_pretrain |= no_pretrain;
            set(&mut cfg.search.budget, budget);
            set(&mut cfg.search.rounds, rounds);
            set(&mut cfg.search.alpha, alpha);
            set(&mut cfg.search.top_k, topk);
            set(&mut cfg.search.baseline, baseline.map(Some));
            set(&mut cfg.finetune.epochs, epochs);
            set(&mut cfg.finetune.early_stop_patience, patience.map(Some));
            cfg
        }
        Command::Report { common, runs } => {
            let mut cfg = base_config(&common, "report")?;
            cfg.runs = runs;
            cfg
        }
    })
}

/// Runs a resolved configuration and prints a one-line summary.
pub fn run(cfg: &RunConfig) -> Result<()> {
    match cfg.command.as_str() {
        "synth" => {
            let r = cmd_synth(cfg)?;
            println!("wrote {} architectures, tau {:.4}", r.size, r.tau_achieved);
        }
        "pretrain" => {
            let r = cmd_pretrain(cfg)?;
            println!(
                "pretrained on {} samples; held-out R2 ws {} flops {} params {}",
                r.samples,
                opt(r.r2_ws),
                opt(r.r2_flops),
                opt(r.r2_params)
            );
        }
        "search" => {
            let r = cmd_search(cfg)?;
            println!(
                "{}: chose {} (val {:.3}, test {:.3}), top-{} regret {:.3}",
                r.method, r.chosen, r.val_acc, r.test_acc, cfg.search.top_k, r.top_k_test_regret
            );
        }
        "report" => {
            let (rows, corr) = cmd_report(cfg)?;
            println!("aggregated {} group(s)", rows.len());
            if let Some(c) = corr {
                println!("pearson ndcg {:.4}, tau {:.4} over {} runs", c.pearson_ndcg, c.pearson_tau, c.runs);
            }
        }
        other => return Err(Error::Config(format!("unknown command `{other}`"))),
    }
    Ok(())
}

pub fn main_with_args<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match resolve(cli).and_then(|cfg| run(&cfg)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_keep_their_defaults() {
        let cfg = RunConfig::from_toml_str("[pretrain]\nepochs = 3\n[search]\nalpha = 0.25\n").unwrap();
        assert_eq!(cfg.pretrain.epochs, 3);
        assert_eq!(cfg.pretrain.lr0, 0.001);
        assert_eq!(cfg.pretrain.early_stop_patience, None);
        assert_eq!(cfg.finetune.early_stop_patience, Some(50));
        assert_eq!(cfg.search.alpha, 0.25);
        assert_eq!(cfg.search.budget, 100);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for text in ["bogus = 1", "[search]\nalhpa = 0.3", "[pretrain]\nepochs = \"ten\""] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn run_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 17;
        cfg.search.baseline = Some(Baseline::Ranknet);
        cfg.space = Some("a/space.jsonl".into());
        let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn hash_ignores_seed_and_output() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 9;
        b.output_dir = "elsewhere".into();
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        b.search.alpha = 0.3;
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
    }

    #[test]
    fn sample_std_of_single_value_is_zero() {
        assert_eq!(mean_std(&[4.5]), (4.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
