//! Architectures as labeled DAGs, tabular search spaces, and synthetic landscapes.
//!
//! A space file is UTF-8 JSON lines: a header `{name, vocab, hparam_dim}` followed by one
//! record per line:
//!
//! ```text
//! {"id":"a0","cells":[{"nodes":["input","conv3x3","output"],"edges":[[0,1],[1,2]]}],
//!  "hparams":[0.5],"val_acc":91.2,"test_acc":90.8,"ws_acc":55.1,"flops":12.0,"params":0.4}
//! ```
//!
//! `ws_acc` is omitted when absent. Edges are `[src, dst]` pairs; self-loops are never
//! stored and are added by [`encode_architecture`].

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::rng::{self, Rng};

pub const INPUT: &str = "input";
pub const OUTPUT: &str = "output";
pub const PSEUDO_OPS: [&str; 4] = [INPUT, OUTPUT, "add", "concat"];

pub fn is_pseudo_op(label: &str) -> bool {
    PSEUDO_OPS.contains(&label)
}

/// One cell: op-labeled nodes and directed edges.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchGraph {
    nodes: Vec<String>,
    edges: Vec<[usize; 2]>,
}

impl ArchGraph {
    pub fn new(nodes: Vec<String>, edges: Vec<[usize; 2]>) -> Result<Self> {
        let g = Self { nodes, edges };
        g.validate().map_err(|m| Error::Invariant {
            id: "<graph>".into(),
            message: m,
        })?;
        Ok(g)
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let n = self.nodes.len();
        if n < 2 {
            return Err(format!("cell needs at least 2 nodes, has {n}"));
        }
        let count = |l: &str| self.nodes.iter().filter(|x| *x == l).count();
        if count(INPUT) != 1 || count(OUTPUT) != 1 {
            return Err("cell must have exactly one input and one output node".into());
        }
        let mut seen = HashSet::new();
        for &[s, d] in &self.edges {
            if s >= n || d >= n {
                return Err(format!("edge [{s}, {d}] out of range for {n} nodes"));
            }
            if s == d {
                return Err(format!("self-loop on node {s}"));
            }
            if !seen.insert((s, d)) {
                return Err(format!("duplicate edge [{s}, {d}]"));
            }
        }
        if self.topological_order().is_none() {
            return Err("cell graph has a cycle".into());
        }
        let input = self.input_index();
        let output = self.output_index();
        let fwd = self.reachable(input, false);
        if let Some(v) = (0..n).find(|&v| !fwd[v]) {
            return Err(format!("node {v} unreachable from input"));
        }
        let back = self.reachable(output, true);
        if let Some(v) = (0..n).find(|&v| !back[v]) {
            return Err(format!("node {v} does not reach output"));
        }
        Ok(())
    }

    pub fn input_index(&self) -> usize {
        self.nodes.iter().position(|l| l == INPUT).unwrap_or(0)
    }

    pub fn output_index(&self) -> usize {
        self.nodes.iter().position(|l| l == OUTPUT).unwrap_or(0)
    }

    fn reachable(&self, from: usize, reverse: bool) -> Vec<bool> {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for &[s, d] in &self.edges {
            if reverse {
                adj[d].push(s);
            } else {
                adj[s].push(d);
            }
        }
        let mut mark = vec![false; n];
        let mut queue = VecDeque::from([from]);
        mark[from] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !mark[w] {
                    mark[w] = true;
                    queue.push_back(w);
                }
            }
        }
        mark
    }

    /// Kahn's algorithm, smallest index first; `None` on a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut out = vec![Vec::new(); n];
        for &[s, d] in &self.edges {
            indeg[d] += 1;
            out[s].push(d);
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for &w in &out[v] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    ready.insert(w);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// Mean number of edges over all input-to-output paths.
    pub fn mean_path_depth(&self) -> f64 {
        let order = self.topological_order().expect("validated graph is acyclic");
        let n = self.nodes.len();
        let mut preds = vec![Vec::new(); n];
        for &[s, d] in &self.edges {
            preds[d].push(s);
        }
        // paths[v]: number of input->v paths, lengths[v]: summed length of those paths
        let mut paths = vec![0.0f64; n];
        let mut lengths = vec![0.0f64; n];
        paths[self.input_index()] = 1.0;
        for &v in &order {
            for &u in &preds[v] {
                paths[v] += paths[u];
                lengths[v] += lengths[u] + paths[u];
            }
        }
        let o = self.output_index();
        if paths[o] == 0.0 {
            0.0
        } else {
            lengths[o] / paths[o]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub id: String,
    pub cells: Vec<ArchGraph>,
    pub hparams: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub arch: Architecture,
    pub val_acc: f64,
    pub test_acc: f64,
    pub ws_acc: Option<f64>,
    pub flops: f64,
    pub params: f64,
}

impl BenchmarkRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        let pct = |name: &str, v: f64| {
            if !v.is_finite() || !(0.0..=100.0).contains(&v) {
                Err(format!("{name} = {v} outside [0, 100]"))
            } else {
                Ok(())
            }
        };
        pct("val_acc", self.val_acc)?;
        pct("test_acc", self.test_acc)?;
        if let Some(ws) = self.ws_acc {
            pct("ws_acc", ws)?;
        }
        for (name, v) in [("flops", self.flops), ("params", self.params)] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} = {v} must be finite and nonnegative"));
            }
        }
        if self.arch.cells.is_empty() {
            return Err("architecture has no cells".into());
        }
        if self.arch.hparams.iter().any(|h| !h.is_finite()) {
            return Err("non-finite hyper-parameter".into());
        }
        for cell in &self.arch.cells {
            cell.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceMeta {
    pub name: String,
    pub vocab: Vec<String>,
    pub hparam_dim: usize,
}

impl SpaceMeta {
    pub fn real_ops(&self) -> Vec<&str> {
        self.vocab
            .iter()
            .map(String::as_str)
            .filter(|l| !is_pseudo_op(l))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    meta: SpaceMeta,
    records: IndexMap<String, BenchmarkRecord>,
}

impl SearchSpace {
    pub fn new(meta: SpaceMeta, records: Vec<BenchmarkRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Degenerate("search space is empty".into()));
        }
        validate_vocab(&meta.vocab)?;
        let vocab: HashSet<&str> = meta.vocab.iter().map(String::as_str).collect();
        let num_cells = records[0].arch.cells.len();
        let mut map = IndexMap::with_capacity(records.len());
        for rec in records {
            let id = rec.arch.id.clone();
            let invariant = |message: String| Error::Invariant {
                id: id.clone(),
                message,
            };
            rec.validate().map_err(invariant)?;
            if rec.arch.cells.len() != num_cells {
                return Err(invariant(format!(
                    "has {} cells, space uses {num_cells}",
                    rec.arch.cells.len()
                )));
            }
            if rec.arch.hparams.len() != meta.hparam_dim {
                return Err(invariant(format!(
                    "has {} hyper-parameters, space declares {}",
                    rec.arch.hparams.len(),
                    meta.hparam_dim
                )));
            }
            for cell in &rec.arch.cells {
                if let Some(l) = cell.nodes.iter().find(|l| !vocab.contains(l.as_str())) {
                    return Err(invariant(format!("op `{l}` not in vocabulary")));
                }
            }
            if map.contains_key(&id) {
                return Err(Error::DuplicateId(id));
            }
            map.insert(id, rec);
        }
        Ok(Self { meta, records: map })
    }

    pub fn meta(&self) -> &SpaceMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_cells(&self) -> usize {
        self.records[0].arch.cells.len()
    }

    pub fn records(&self) -> impl ExactSizeIterator<Item = &BenchmarkRecord> {
        self.records.values()
    }

    pub fn ids(&self) -> impl ExactSizeIterator<Item = &String> {
        self.records.keys()
    }

    pub fn get(&self, id: &str) -> Option<&BenchmarkRecord> {
        self.records.get(id)
    }

    pub fn record(&self, id: &str) -> Result<&BenchmarkRecord> {
        self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn best_test_acc(&self) -> f64 {
        self.records().map(|r| r.test_acc).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn best_val_acc(&self) -> f64 {
        self.records().map(|r| r.val_acc).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn has_weak_labels(&self) -> bool {
        self.records().all(|r| r.ws_acc.is_some())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = HeaderLine {
            name: self.meta.name.clone(),
            vocab: self.meta.vocab.clone(),
            hparam_dim: self.meta.hparam_dim,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
        for rec in self.records() {
            serde_json::to_writer(&mut w, &RecordLine::from(rec))?;
            w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut header: Option<HeaderLine> = None;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |e: serde_json::Error| Error::Parse {
                line: lineno,
                message: e.to_string(),
            };
            if header.is_none() {
                header = Some(serde_json::from_str(&line).map_err(parse_err)?);
                continue;
            }
            let rec: RecordLine = serde_json::from_str(&line).map_err(parse_err)?;
            records.push(rec.into_record().map_err(|e| match e {
                Error::Invariant { id, message } => Error::Parse {
                    line: lineno,
                    message: format!("record `{id}`: {message}"),
                },
                other => other,
            })?);
        }
        let header = header.ok_or(Error::Parse {
            line: 1,
            message: "missing header line".into(),
        })?;
        Self::new(
            SpaceMeta {
                name: header.name,
                vocab: header.vocab,
                hparam_dim: header.hparam_dim,
            },
            records,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Copy of this space with the given weak labels (same order as [`Self::records`]).
    pub fn with_weak_labels(&self, ws: &[f64]) -> Result<Self> {
        if ws.len() != self.len() {
            return Err(Error::LengthMismatch {
                left: ws.len(),
                right: self.len(),
            });
        }
        let records = self
            .records()
            .zip(ws)
            .map(|(r, &w)| BenchmarkRecord {
                ws_acc: Some(w),
                ..r.clone()
            })
            .collect();
        Self::new(self.meta.clone(), records)
    }
}

fn validate_vocab(vocab: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for l in vocab {
        if !seen.insert(l.as_str()) {
            return Err(Error::Config(format!("duplicate vocabulary entry `{l}`")));
        }
    }
    if !seen.contains(INPUT) || !seen.contains(OUTPUT) {
        return Err(Error::Config("vocabulary must contain `input` and `output`".into()));
    }
    Ok(())
}

pub fn load_space(path: &Path) -> Result<SearchSpace> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    SearchSpace::read_from(f)
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    name: String,
    vocab: Vec<String>,
    hparam_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct CellLine {
    nodes: Vec<String>,
    edges: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    cells: Vec<CellLine>,
    hparams: Vec<f64>,
    val_acc: f64,
    test_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ws_acc: Option<f64>,
    flops: f64,
    params: f64,
}

impl From<&BenchmarkRecord> for RecordLine {
    fn from(r: &BenchmarkRecord) -> Self {
        Self {
            id: r.arch.id.clone(),
            cells: r
                .arch
                .cells
                .iter()
                .map(|c| CellLine {
                    nodes: c.nodes.clone(),
                    edges: c.edges.clone(),
                })
                .collect(),
            hparams: r.arch.hparams.clone(),
            val_acc: r.val_acc,
            test_acc: r.test_acc,
            ws_acc: r.ws_acc,
            flops: r.flops,
            params: r.params,
        }
    }
}

impl RecordLine {
    fn into_record(self) -> Result<BenchmarkRecord> {
        let id = self.id;
        let cells = self
            .cells
            .into_iter()
            .map(|c| {
                ArchGraph::new(c.nodes, c.edges).map_err(|e| match e {
                    Error::Invariant { message, .. } => Error::Invariant {
                        id: id.clone(),
                        message,
                    },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BenchmarkRecord {
            arch: Architecture {
                id,
                cells,
                hparams: self.hparams,
            },
            val_acc: self.val_acc,
            test_acc: self.test_acc,
            ws_acc: self.ws_acc,
            flops: self.flops,
            params: self.params,
        })
    }
}

/// Dense per-cell encoding consumed by the graph encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCell {
    pub num_nodes: usize,
    /// `num_nodes x vocab_size`, row-major.
    pub one_hot: Vec<f64>,
    /// `num_nodes x num_nodes`, `adjacency[src * n + dst]`, identity included.
    pub adjacency: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedArch {
    pub id: String,
    pub vocab_size: usize,
    pub cells: Vec<EncodedCell>,
    pub hparams: Vec<f64>,
}

pub fn encode_architecture(arch: &Architecture, vocab: &[String]) -> Result<EncodedArch> {
    let index: HashMap<&str, usize> = vocab
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let v = vocab.len();
    let cells = arch
        .cells
        .iter()
        .map(|cell| {
            let n = cell.num_nodes();
            let mut one_hot = vec![0.0; n * v];
            for (row, label) in cell.nodes.iter().enumerate() {
                let col = *index
                    .get(label.as_str())
                    .ok_or_else(|| Error::UnknownOp(label.clone()))?;
                one_hot[row * v + col] = 1.0;
            }
            let mut adjacency = vec![0.0; n * n];
            for i in 0..n {
                adjacency[i * n + i] = 1.0;
            }
            for &[s, d] in &cell.edges {
                adjacency[s * n + d] = 1.0;
            }
            Ok(EncodedCell {
                num_nodes: n,
                one_hot,
                adjacency,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedArch {
        id: arch.id.clone(),
        vocab_size: v,
        cells,
        hparams: arch.hparams.clone(),
    })
}

pub fn encode_space(space: &SearchSpace) -> Result<Vec<EncodedArch>> {
    space
        .records()
        .map(|r| encode_architecture(&r.arch, &space.meta.vocab))
        .collect()
}

const OP_NAMES: [&str; 10] = [
    "conv3x3",
    "conv1x1",
    "maxpool3x3",
    "avgpool3x3",
    "skip",
    "sepconv3x3",
    "sepconv5x5",
    "dilconv3x3",
    "dilconv5x5",
    "conv7x1_1x7",
];

/// Relative (flops, params) cost of one node carrying `op`.
fn op_cost(op: &str) -> (f64, f64) {
    match op {
        "conv3x3" => (9.0, 0.30),
        "conv1x1" => (1.0, 0.04),
        "maxpool3x3" | "avgpool3x3" => (0.5, 0.0),
        "skip" => (0.0, 0.0),
        "sepconv3x3" => (2.2, 0.08),
        "sepconv5x5" => (3.4, 0.12),
        "dilconv3x3" => (2.0, 0.07),
        "dilconv5x5" => (3.0, 0.10),
        "conv7x1_1x7" => (5.0, 0.18),
        l if is_pseudo_op(l) => (0.0, 0.0),
        other => {
            let k = other.bytes().map(u64::from).sum::<u64>() % 5 + 1;
            (k as f64, 0.03 * k as f64)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub name: String,
    pub size: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Total vocabulary including the `input`/`output` pseudo-ops.
    pub vocab_size: usize,
    pub hparam_dim: usize,
    pub num_cells: usize,
    /// Probability of each optional forward edge.
    pub edge_prob: f64,
    /// Observation noise (percent) separating validation from test accuracy.
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            size: 5000,
            min_nodes: 4,
            max_nodes: 9,
            vocab_size: 8,
            hparam_dim: 2,
            num_cells: 1,
            edge_prob: 0.25,
            noise_std: 0.2,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::Config(format!("space size must be >= 2, got {}", self.size)));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config(format!(
                "vocabulary size must be >= 3, got {}",
                self.vocab_size
            )));
        }
        if self.min_nodes < 2 || self.min_nodes > self.max_nodes {
            return Err(Error::Config(format!(
                "empty node range {}..={}",
                self.min_nodes, self.max_nodes
            )));
        }
        if self.num_cells == 0 {
            return Err(Error::Config("at least one cell is required".into()));
        }
        if !(0.0..=1.0).contains(&self.edge_prob) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("edge_prob must be in [0,1], noise_std >= 0".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vec<String> {
        let mut v = vec![INPUT.to_string(), OUTPUT.to_string()];
        for i in 0..self.vocab_size - 2 {
            v.push(match OP_NAMES.get(i) {
                Some(name) => (*name).to_string(),
                None => format!("op{i}"),
            });
        }
        v
    }
}

const LANDSCAPE_REFERENCE_SAMPLES: usize = 2000;

/// Planted ground-truth function over architectures of one synthetic configuration.
///
/// `true_accuracy = 40 + 55 * logistic(1 + 1.1 * z)` where `z` is the standardized
/// planted score `op_histogram . op_weights + depth_weight * mean_path_depth +
/// hparams . hparam_weights`. Most mass sits in the upper 70-90% band with a long
/// lower tail.
#[derive(Clone, Debug)]
pub struct Landscape {
    cfg: SynthConfig,
    vocab: Vec<String>,
    op_weights: HashMap<String, f64>,
    depth_weight: f64,
    hparam_weights: Vec<f64>,
    score_mean: f64,
    score_std: f64,
}

impl Landscape {
    pub fn new(cfg: &SynthConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vocab = cfg.vocab();
        let mut rng = rng::stream(seed, "landscape", 0);
        let op_weights = vocab
            .iter()
            .filter(|l| !is_pseudo_op(l))
            .map(|l| {
                let w: f64 = StandardNormal.sample(&mut rng);
                (l.clone(), w)
            })
            .collect();
        let hparam_weights = (0..cfg.hparam_dim)
            .map(|_| {
                let w: f64 = StandardNormal.sample(&mut rng);
                1.5 * w
            })
            .collect();
        let mut land = Self {
            cfg: cfg.clone(),
            vocab,
            op_weights,
            depth_weight: 0.8,
            hparam_weights,
            score_mean: 0.0,
            score_std: 1.0,
        };
        let mut ref_rng = rng::stream(seed, "landscape-reference", 0);
        let scores: Vec<f64> = (0..LANDSCAPE_REFERENCE_SAMPLES)
            .map(|i| land.raw_score(&land.sample_architecture(&mut ref_rng, format!("ref{i}"))))
            .collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64;
        land.score_mean = mean;
        land.score_std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(land)
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn meta(&self) -> SpaceMeta {
        SpaceMeta {
            name: self.cfg.name.clone(),
            vocab: self.vocab.clone(),
            hparam_dim: self.cfg.hparam_dim,
        }
    }

    fn raw_score(&self, arch: &Architecture) -> f64 {
        let mut s = 0.0;
        for cell in &arch.cells {
            s += cell
                .nodes
                .iter()
                .filter_map(|l| self.op_weights.get(l))
                .sum::<f64>();
            s += self.depth_weight * cell.mean_path_depth();
        }
        s + arch
            .hparams
            .iter()
            .zip(&self.hparam_weights)
            .map(|(h, w)| h * w)
            .sum::<f64>()
    }

    /// Noise-free accuracy in percent.
    pub fn true_accuracy(&self, arch: &Architecture) -> f64 {
        let z = (self.raw_score(arch) - self.score_mean) / self.score_std;
        40.0 + 55.0 / (1.0 + (-(1.0 + 1.1 * z)).exp())
    }

    /// (M-FLOPs, M-params); both grow with node count and with the hyper-parameter width.
    pub fn cost(&self, arch: &Architecture) -> (f64, f64) {
        let width = 1.0 + arch.hparams.iter().map(|h| h.abs()).sum::<f64>();
        let (mut f, mut p) = (0.0, 0.0);
        for cell in &arch.cells {
            for l in &cell.nodes {
                let (cf, cp) = op_cost(l);
                f += cf;
                p += cp;
            }
        }
        (10.0 * f * width, p * width * width)
    }

    pub fn sample_architecture(&self, rng: &mut Rng, id: String) -> Architecture {
        let real: Vec<&String> = self.vocab.iter().filter(|l| !is_pseudo_op(l)).collect();
        let cells = (0..self.cfg.num_cells)
            .map(|_| random_cell(rng, &real, self.cfg.min_nodes, self.cfg.max_nodes, self.cfg.edge_prob))
            .collect();
        let hparams = (0..self.cfg.hparam_dim).map(|_| rng.random::<f64>()).collect();
        Architecture { id, cells, hparams }
    }

    /// Full benchmark record with noisy validation/test observations.
    pub fn record(&self, arch: Architecture, rng: &mut Rng) -> BenchmarkRecord {
        let truth = self.true_accuracy(&arch);
        let mut observe = || {
            let e: f64 = StandardNormal.sample(rng);
            (truth + self.cfg.noise_std * e).clamp(0.0, 100.0)
        };
        let val_acc = observe();
        let test_acc = observe();
        let (flops, params) = self.cost(&arch);
        BenchmarkRecord {
            arch,
            val_acc,
            test_acc,
            ws_acc: None,
            flops,
            params,
        }
    }
}

fn random_cell(rng: &mut Rng, real_ops: &[&String], min: usize, max: usize, p: f64) -> ArchGraph {
    let n = rng.random_range(min..=max);
    let mut nodes = Vec::with_capacity(n);
    nodes.push(INPUT.to_string());
    for _ in 1..n - 1 {
        match real_ops.choose(rng) {
            Some(op) => nodes.push((*op).clone()),
            None => nodes.push("add".to_string()),
        }
    }
    nodes.push(OUTPUT.to_string());
    let mut adj = vec![vec![false; n]; n];
    for v in 1..n {
        let u = rng.random_range(0..v);
        adj[u][v] = true;
        for u in 0..v {
            if !adj[u][v] && rng.random::<f64>() < p {
                adj[u][v] = true;
            }
        }
    }
    for u in 0..n - 1 {
        if !adj[u][u + 1..].iter().any(|&e| e) {
            let v = rng.random_range(u + 1..n);
            adj[u][v] = true;
        }
    }
    let edges = (0..n)
        .flat_map(|u| (0..n).map(move |v| (u, v)))
        .filter(|&(u, v)| adj[u][v])
        .map(|(u, v)| [u, v])
        .collect();
    ArchGraph { nodes, edges }
}

/// Draws a synthetic tabular space from the landscape planted by `(cfg, seed)`.
pub fn generate_synthetic_space(cfg: &SynthConfig, seed: u64) -> Result<SearchSpace> {
    let land = Landscape::new(cfg, seed)?;
    generate_from_landscape(&land, seed)
}

pub fn generate_from_landscape(land: &Landscape, seed: u64) -> Result<SearchSpace> {
    let mut arch_rng = rng::stream(seed, "space-archs", 0);
    let mut noise_rng = rng::stream(seed, "space-noise", 0);
    let width = land.cfg.size.to_string().len();
    let records = (0..land.cfg.size)
        .map(|i| {
            let arch = land.sample_architecture(&mut arch_rng, format!("arch-{i:0width$}"));
            land.record(arch, &mut noise_rng)
        })
        .collect();
    SearchSpace::new(land.meta(), records)
}

pub const WEAK_LABEL_TOLERANCE: f64 = 0.05;
const CALIBRATION_TARGET: f64 = 0.005;
const CALIBRATION_MAX_ITERS: usize = 200;

fn weak_labels(z: &[f64], noise: &[f64], amp: f64) -> Vec<f64> {
    let scale = (1.0 + amp * amp).sqrt();
    z.iter()
        .zip(noise)
        .map(|(z, e)| 100.0 / (1.0 + (-(z + amp * e) / scale).exp()))
        .collect()
}

/// Fills `ws_acc` with a logistic transform of standardized `val_acc` plus Gaussian noise
/// whose amplitude is bisected until Kendall's tau against `val_acc` hits `target_tau`.
pub fn calibrate_weak_labels(space: &SearchSpace, target_tau: f64, seed: u64) -> Result<SearchSpace> {
    if !(0.0..=1.0).contains(&target_tau) {
        return Err(Error::Config(format!("target tau {target_tau} not in [0, 1]")));
    }
    let vals: Vec<f64> = space.records().map(|r| r.val_acc).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Err(Error::Degenerate("validation accuracies are constant".into()));
    }
    let z: Vec<f64> = vals.iter().map(|v| (v - mean) / std).collect();
    let mut rng = rng::stream(seed, "weak-labels", 0);
    let noise: Vec<f64> = (0..vals.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let tau_at = |amp: f64| metrics::kendall_tau(&weak_labels(&z, &noise, amp), &vals);

    let mut best = (0.0, tau_at(0.0)?);
    let consider = |amp: f64, tau: f64, best: &mut (f64, f64)| {
        if (tau - target_tau).abs() < (best.1 - target_tau).abs() {
            *best = (amp, tau);
        }
    };
    if (best.1 - target_tau).abs() > CALIBRATION_TARGET {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut tau_hi = tau_at(hi)?;
        consider(hi, tau_hi, &mut best);
        let mut iters = 0;
        while tau_hi > target_tau && hi < 1e8 {
            lo = hi;
            hi *= 2.0;
            tau_hi = tau_at(hi)?;
            consider(hi, tau_hi, &mut best);
            iters += 1;
        }
        while (best.1 - target_tau).abs() > CALIBRATION_TARGET && iters < CALIBRATION_MAX_ITERS {
            let mid = 0.5 * (lo + hi);
            let tau = tau_at(mid)?;
            consider(mid, tau, &mut best);
            if tau > target_tau {
                lo = mid;
            } else {
                hi = mid;
            }
            iters += 1;
        }
    }
    if (best.1 - target_tau).abs() > WEAK_LABEL_TOLERANCE {
        return Err(Error::Calibration(format!(
            "closest tau {:.4} (noise amplitude {:.4}) misses target {target_tau} by more than {WEAK_LABEL_TOLERANCE}",
            best.1, best.0
        )));
    }
    log::info!(
        "weak labels calibrated: tau {:.4} at noise amplitude {:.4}",
        best.1,
        best.0
    );
    space.with_weak_labels(&weak_labels(&z, &noise, best.0))
}

/// Splits the space into the records named by `ids` (in that order) and the rest.
pub fn split_labeled<'a>(
    space: &'a SearchSpace,
    ids: &[String],
) -> Result<(Vec<&'a BenchmarkRecord>, Vec<&'a BenchmarkRecord>)> {
    let mut chosen = HashSet::with_capacity(ids.len());
    let mut labeled = Vec::with_capacity(ids.len());
    for id in ids {
        if !chosen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
        labeled.push(space.record(id)?);
    }
    let pool = space
        .records()
        .filter(|r| !chosen.contains(r.arch.id.as_str()))
        .collect();
    Ok((labeled, pool))
}

/// Mutation operators used by surrogate-guided evolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    OpFlip,
    EdgeRewire,
    HparamJitter,
}

/// Applies one random mutation; the result satisfies every [`ArchGraph`] invariant.
pub fn mutate(arch: &Architecture, real_ops: &[&str], rng: &mut Rng, id: String) -> (Architecture, Mutation) {
    let mut kinds = vec![Mutation::OpFlip, Mutation::EdgeRewire];
    if !arch.hparams.is_empty() {
        kinds.push(Mutation::HparamJitter);
    }
    let mut child = arch.clone();
    child.id = id;
    let kind = *kinds.choose(rng).expect("nonempty");
    let cell_idx = rng.random_range(0..child.cells.len());
    let applied = match kind {
        Mutation::OpFlip => flip_op(&mut child.cells[cell_idx], real_ops, rng),
        Mutation::EdgeRewire => rewire_edge(&mut child.cells[cell_idx], rng),
        Mutation::HparamJitter => {
            let i = rng.random_range(0..child.hparams.len());
            let e: f64 = StandardNormal.sample(rng);
            child.hparams[i] = (child.hparams[i] + 0.1 * e).clamp(0.0, 1.0);
            true
        }
    };
    if !applied && kind != Mutation::HparamJitter {
        // fall back to the other structural mutation
        let other = if kind == Mutation::OpFlip {
            rewire_edge(&mut child.cells[cell_idx], rng);
            Mutation::EdgeRewire
        } else {
            flip_op(&mut child.cells[cell_idx], real_ops, rng);
            Mutation::OpFlip
        };
        return (child, other);
    }
    (child, kind)
}

fn flip_op(cell: &mut ArchGraph, real_ops: &[&str], rng: &mut Rng) -> bool {
    let slots: Vec<usize> = (0..cell.nodes.len())
        .filter(|&i| !is_pseudo_op(&cell.nodes[i]))
        .collect();
    let Some(&slot) = slots.choose(rng) else {
        return false;
    };
    let choices: Vec<&&str> = real_ops.iter().filter(|o| **o != cell.nodes[slot]).collect();
    match choices.choose(rng) {
        Some(op) => {
            cell.nodes[slot] = (**op).to_string();
            true
        }
        None => false,
    }
}

fn rewire_edge(cell: &mut ArchGraph, rng: &mut Rng) -> bool {
    let order = cell.topological_order().expect("valid cell");
    let mut rank = vec![0; order.len()];
    for (r, &v) in order.iter().enumerate() {
        rank[v] = r;
    }
    let n = cell.nodes.len();
    for _ in 0..32 {
        let mut edges = cell.edges.clone();
        if !edges.is_empty() && rng.random::<bool>() {
            let k = rng.random_range(0..edges.len());
            edges.swap_remove(k);
        }
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if rank[u] >= rank[v] || edges.contains(&[u, v]) {
            continue;
        }
        edges.push([u, v]);
        edges.sort_unstable();
        let candidate = ArchGraph {
            nodes: cell.nodes.clone(),
            edges,
        };
        if candidate.validate().is_ok() && candidate.edges != cell.edges {
            *cell = candidate;
            return true;
        }
    }
    false
}
