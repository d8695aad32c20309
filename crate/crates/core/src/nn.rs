//! Dense double-precision numerics and the graph ranking model.
//!
//! The encoder is a DGCNN-style stack: directed graph convolutions
//! `H' = tanh(D^-1 A^T H W)` (A = adjacency plus self-loops, D its in-degree), the layer
//! outputs concatenated per node, sort-pooling to a fixed node count, then a node-wise
//! 1-D convolution with ReLU. Cell embeddings share weights and are concatenated with a
//! projection of the standardized hyper-parameters. Four two-layer heads (rank score,
//! weight-sharing accuracy, FLOPs, params) read the same embedding.
//!
//! Gradients are hand-derived reverse mode over this fixed operator set.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::space::EncodedArch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k x n] += a[m x k]^T * g[m x n]`
fn gemm_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m x k] += g[m x n] * b[k x n]^T`
fn gemm_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Named parameters with gradient accumulators and Adam moments, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    step: u64,
}

impl ParamStore {
    pub fn new(mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = tensors.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Config(format!("duplicate parameter `{}`", w[0].0)));
        }
        Ok(Self {
            params: tensors
                .into_iter()
                .map(|(name, value)| {
                    let n = value.len();
                    Param {
                        name,
                        value,
                        grad: vec![0.0; n],
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    }
                })
                .collect(),
            step: 0,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.params.binary_search_by(|p| p.name.as_str().cmp(name)).ok()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.slot(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.slot(name).map(move |i| &mut self.params[i])
    }

    fn value(&self, slot: usize) -> &[f64] {
        &self.params[slot].value.data
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn accumulate(&mut self, grads: &[Vec<f64>]) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// One Adam step on every parameter accepted by `trainable`, with weight decay
    /// added to the gradient. All gradients are cleared afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig, trainable: impl Fn(&str) -> bool) -> Result<()> {
        if !(cfg.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            if trainable(&p.name) {
                for i in 0..p.grad.len() {
                    let w = p.value.data[i];
                    let g = p.grad[i] + cfg.weight_decay * w;
                    p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
                    p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
                    let mhat = p.m[i] / bc1;
                    let vhat = p.v[i] / bc2;
                    p.value.data[i] = w - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                }
            }
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }

    /// Raw little-endian bytes of every parameter value in name order.
    pub fn value_bytes(&self) -> Vec<u8> {
        self.params
            .iter()
            .flat_map(|p| p.value.data.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// `lr0 * (1 + cos(pi * step / total)) / 2`
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule needs total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Range(format!("step {step} beyond total {total_steps}")));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr0 * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

/// Row order used by sort-pooling: last channel descending, ties broken by the
/// remaining channels (from last to first) descending, then by node index.
fn sort_rows(features: &[f64], n: usize, c: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (&features[a * c..(a + 1) * c], &features[b * c..(b + 1) * c]);
        for ch in (0..c).rev() {
            match rb[ch].total_cmp(&ra[ch]) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        a.cmp(&b)
    });
    idx
}

/// Sorts `n x c` node features and keeps the top `k` rows, zero-padding when `n < k`.
/// Returns the pooled `k x c` matrix and the source row of each kept row.
pub fn sort_pool(features: &[f64], n: usize, c: usize, k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if k == 0 {
        return Err(Error::Config("sort-pool node count must be positive".into()));
    }
    if c == 0 || features.len() != n * c {
        return Err(Error::Dimension(format!(
            "sort-pool input has {} values, expected {n} x {c} with c >= 1",
            features.len()
        )));
    }
    let mut selected = sort_rows(features, n, c);
    selected.truncate(k);
    let mut out = vec![0.0; k * c];
    for (r, &src) in selected.iter().enumerate() {
        out[r * c..(r + 1) * c].copy_from_slice(&features[src * c..(src + 1) * c]);
    }
    Ok((out, selected))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Rank,
    WsAcc,
    Flops,
    Params,
}

impl Head {
    pub const ALL: [Head; 4] = [Head::Rank, Head::WsAcc, Head::Flops, Head::Params];
    pub const AUXILIARY: [Head; 3] = [Head::WsAcc, Head::Flops, Head::Params];

    pub fn name(self) -> &'static str {
        match self {
            Head::Rank => "rank",
            Head::WsAcc => "ws",
            Head::Flops => "flops",
            Head::Params => "params",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn param_prefix(self) -> String {
        format!("head.{}.", self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_cells: usize,
    pub hparam_dim: usize,
    pub gcn_hidden: Vec<usize>,
    pub sort_k: usize,
    pub conv_channels: usize,
    pub hparam_proj: usize,
    pub head_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            num_cells: 1,
            hparam_dim: 0,
            gcn_hidden: vec![128; 4],
            sort_k: 16,
            conv_channels: 32,
            hparam_proj: 16,
            head_hidden: 128,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.num_cells == 0 {
            return bad("vocab_size and num_cells must be positive".into());
        }
        if self.gcn_hidden.is_empty() || self.gcn_hidden.contains(&0) {
            return bad(format!("invalid graph-conv sizes {:?}", self.gcn_hidden));
        }
        if self.sort_k == 0 || self.conv_channels == 0 || self.head_hidden == 0 {
            return bad("sort_k, conv_channels and head_hidden must be positive".into());
        }
        if self.hparam_dim > 0 && self.hparam_proj == 0 {
            return bad("hparam_proj must be positive when hyper-parameters are present".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Channels per node after concatenating every graph-conv layer output.
    pub fn node_channels(&self) -> usize {
        self.gcn_hidden.iter().sum()
    }

    pub fn embedding_dim(&self) -> usize {
        let proj = if self.hparam_dim > 0 { self.hparam_proj } else { 0 };
        self.num_cells * self.sort_k * self.conv_channels + proj
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut s = Vec::new();
        let mut d_in = self.vocab_size;
        for (l, &h) in self.gcn_hidden.iter().enumerate() {
            s.push((format!("encoder.gcn{l}.weight"), vec![d_in, h]));
            d_in = h;
        }
        s.push(("encoder.conv.weight".into(), vec![self.node_channels(), self.conv_channels]));
        s.push(("encoder.conv.bias".into(), vec![self.conv_channels]));
        if self.hparam_dim > 0 {
            s.push(("encoder.hparam.weight".into(), vec![self.hparam_dim, self.hparam_proj]));
            s.push(("encoder.hparam.bias".into(), vec![self.hparam_proj]));
        }
        let e = self.embedding_dim();
        for head in Head::ALL {
            let p = head.param_prefix();
            s.push((format!("{p}fc1.weight"), vec![e, self.head_hidden]));
            s.push((format!("{p}fc1.bias"), vec![self.head_hidden]));
            s.push((format!("{p}fc2.weight"), vec![self.head_hidden, 1]));
            s.push((format!("{p}fc2.bias"), vec![1]));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct HeadSlots {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    gcn: Vec<usize>,
    conv_w: usize,
    conv_b: usize,
    hparam: Option<(usize, usize)>,
    heads: [HeadSlots; 4],
}

impl Layout {
    fn new(cfg: &ModelConfig, store: &ParamStore) -> Self {
        let s = |n: &str| store.slot(n).expect("parameter declared by config");
        let head = |h: Head| {
            let p = h.param_prefix();
            HeadSlots {
                w1: s(&format!("{p}fc1.weight")),
                b1: s(&format!("{p}fc1.bias")),
                w2: s(&format!("{p}fc2.weight")),
                b2: s(&format!("{p}fc2.bias")),
            }
        };
        Self {
            gcn: (0..cfg.gcn_hidden.len())
                .map(|l| s(&format!("encoder.gcn{l}.weight")))
                .collect(),
            conv_w: s("encoder.conv.weight"),
            conv_b: s("encoder.conv.bias"),
            hparam: (cfg.hparam_dim > 0).then(|| (s("encoder.hparam.weight"), s("encoder.hparam.bias"))),
            heads: Head::ALL.map(head),
        }
    }
}

/// Standardization of hyper-parameter features, fitted once on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HparamScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks are drawn from a stream keyed by this seed.
    Train { seed: u64 },
}

struct CellCache {
    n: usize,
    /// In-neighbors of each node, self included.
    in_nbrs: Vec<Vec<usize>>,
    /// One-hot node features.
    input: Vec<f64>,
    /// Graph-conv layer outputs `H_1..H_L`, each `n x h_l`.
    hidden: Vec<Vec<f64>>,
    selected: Vec<usize>,
    pooled: Vec<f64>,
    conv_out: Vec<f64>,
}

struct HeadCache {
    hidden: Vec<f64>,
    mask: Option<Vec<f64>>,
}

struct ItemCache {
    cells: Vec<CellCache>,
    hp_in: Vec<f64>,
    hp_out: Vec<f64>,
    embedding: Vec<f64>,
    heads: Vec<HeadCache>,
}

/// Saved forward state needed by [`RankingModel::backward`].
pub struct Activations {
    version: u64,
    heads: Vec<Head>,
    items: Vec<ItemCache>,
}

impl Activations {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub struct Forward {
    /// `outputs[h][i]`: scalar of the `h`-th requested head for item `i`.
    pub outputs: Vec<Vec<f64>>,
    pub activations: Activations,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingModel {
    config: ModelConfig,
    params: ParamStore,
    scaler: Option<HparamScaler>,
    layout: Layout,
    version: u64,
}

impl RankingModel {
    /// Builds a model with fan-in-scaled uniform initialization drawn from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "model-init", 0);
        let mut shapes = config.shapes();
        shapes.sort_by(|a, b| a.0.cmp(&b.0));
        let mut fan_in: BTreeMap<String, usize> = BTreeMap::new();
        for (name, shape) in &shapes {
            if name.ends_with(".weight") {
                fan_in.insert(name.trim_end_matches(".weight").to_string(), shape[0]);
            }
        }
        let tensors = shapes
            .into_iter()
            .map(|(name, shape)| {
                let stem = name.rsplit_once('.').map(|x| x.0).unwrap_or(&name);
                let fan = fan_in.get(stem).copied().unwrap_or(1).max(1);
                let bound = 1.0 / (fan as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                (name, Tensor { shape, data })
            })
            .collect();
        Self::from_store(config, ParamStore::new(tensors)?, None)
    }

    fn from_store(config: ModelConfig, params: ParamStore, scaler: Option<HparamScaler>) -> Result<Self> {
        let expected = {
            let mut s = config.shapes();
            s.sort_by(|a, b| a.0.cmp(&b.0));
            s
        };
        let actual: Vec<(String, Vec<usize>)> = params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape.clone()))
            .collect();
        if expected != actual {
            return Err(Error::Dimension("parameter set does not match model config".into()));
        }
        if let Some(s) = &scaler {
            if s.mean.len() != config.hparam_dim || s.std.len() != config.hparam_dim {
                return Err(Error::Dimension("hyper-parameter scaler size mismatch".into()));
            }
        }
        let layout = Layout::new(&config, &params);
        Ok(Self {
            config,
            params,
            scaler,
            layout,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable access for optimizers and tests; invalidates recorded activations.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.version += 1;
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    pub fn hparam_scaler(&self) -> Option<&HparamScaler> {
        self.scaler.as_ref()
    }

    /// Fits the hyper-parameter standardization on `batch` unless one is already fitted.
    pub fn fit_hparam_scaler(&mut self, batch: &[&EncodedArch]) {
        let d = self.config.hparam_dim;
        if d == 0 || self.scaler.is_some() || batch.is_empty() {
            return;
        }
        let n = batch.len() as f64;
        let mut mean = vec![0.0; d];
        for e in batch {
            for (m, h) in mean.iter_mut().zip(&e.hparams) {
                *m += h / n;
            }
        }
        let mut var = vec![0.0; d];
        for e in batch {
            for ((v, h), m) in var.iter_mut().zip(&e.hparams).zip(&mean) {
                *v += (h - m).powi(2) / n;
            }
        }
        let std = var.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        self.scaler = Some(HparamScaler { mean, std });
        self.version += 1;
    }

    /// Copies the parameters of one head into another.
    pub fn copy_head(&mut self, from: Head, to: Head) {
        let (f, t) = (self.layout.heads[from.index()], self.layout.heads[to.index()]);
        for (a, b) in [(f.w1, t.w1), (f.b1, t.b1), (f.w2, t.w2), (f.b2, t.b2)] {
            let v = self.params.params[a].value.data.clone();
            self.params.params[b].value.data = v;
        }
        self.version += 1;
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig, trainable: impl Fn(&str) -> bool) -> Result<()> {
        self.version += 1;
        self.params.adam_step(cfg, trainable)
    }

    fn check_input(&self, e: &EncodedArch) -> Result<()> {
        let c = &self.config;
        if e.vocab_size != c.vocab_size {
            return Err(Error::Dimension(format!(
                "`{}`: vocabulary size {} but model expects {}",
                e.id, e.vocab_size, c.vocab_size
            )));
        }
        if e.cells.len() != c.num_cells {
            return Err(Error::Dimension(format!(
                "`{}`: {} cells but model expects {}",
                e.id,
                e.cells.len(),
                c.num_cells
            )));
        }
        if e.hparams.len() != c.hparam_dim {
            return Err(Error::Dimension(format!(
                "`{}`: {} hyper-parameters but model expects {}",
                e.id,
                e.hparams.len(),
                c.hparam_dim
            )));
        }
        for cell in &e.cells {
            let n = cell.num_nodes;
            if cell.one_hot.len() != n * c.vocab_size || cell.adjacency.len() != n * n {
                return Err(Error::Dimension(format!("`{}`: malformed cell encoding", e.id)));
            }
        }
        Ok(())
    }

    /// Eval-mode scores of one head; deterministic and dropout-free.
    pub fn score(&self, batch: &[&EncodedArch], head: Head) -> Result<Vec<f64>> {
        let f = self.forward(batch, &[head], Mode::Eval)?;
        Ok(f.outputs.into_iter().next().unwrap_or_default())
    }

    pub fn forward(&self, batch: &[&EncodedArch], heads: &[Head], mode: Mode) -> Result<Forward> {
        let mut outputs = vec![Vec::with_capacity(batch.len()); heads.len()];
        let mut items = Vec::with_capacity(batch.len());
        for (i, enc) in batch.iter().enumerate() {
            self.check_input(enc)?;
            let (vals, cache) = self.forward_item(enc, heads, mode, i as u64);
            for (o, v) in outputs.iter_mut().zip(vals) {
                o.push(v);
            }
            items.push(cache);
        }
        Ok(Forward {
            outputs,
            activations: Activations {
                version: self.version,
                heads: heads.to_vec(),
                items,
            },
        })
    }

    fn forward_cell(&self, cell: &crate::space::EncodedCell) -> CellCache {
        let cfg = &self.config;
        let n = cell.num_nodes;
        let in_nbrs: Vec<Vec<usize>> = (0..n)
            .map(|v| (0..n).filter(|&u| cell.adjacency[u * n + v] != 0.0).collect())
            .collect();
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(cfg.gcn_hidden.len());
        let mut d_in = cfg.vocab_size;
        for (l, &h) in cfg.gcn_hidden.iter().enumerate() {
            let x = if l == 0 { &cell.one_hot } else { &hidden[l - 1] };
            let mut z = vec![0.0; n * h];
            gemm_acc(x, self.params.value(self.layout.gcn[l]), &mut z, n, d_in, h);
            let mut out = vec![0.0; n * h];
            for v in 0..n {
                let w = 1.0 / in_nbrs[v].len() as f64;
                let row = &mut out[v * h..(v + 1) * h];
                for &u in &in_nbrs[v] {
                    for (o, zv) in row.iter_mut().zip(&z[u * h..(u + 1) * h]) {
                        *o += w * zv;
                    }
                }
                row.iter_mut().for_each(|o| *o = o.tanh());
            }
            hidden.push(out);
            d_in = h;
        }
        let c = cfg.node_channels();
        let mut concat = vec![0.0; n * c];
        for v in 0..n {
            let mut off = 0;
            for (l, &h) in cfg.gcn_hidden.iter().enumerate() {
                concat[v * c + off..v * c + off + h].copy_from_slice(&hidden[l][v * h..(v + 1) * h]);
                off += h;
            }
        }
        let (pooled, selected) = sort_pool(&concat, n, c, cfg.sort_k).expect("validated sizes");
        let (k, cc) = (cfg.sort_k, cfg.conv_channels);
        let mut conv_out = vec![0.0; k * cc];
        let bias = self.params.value(self.layout.conv_b);
        for r in 0..k {
            conv_out[r * cc..(r + 1) * cc].copy_from_slice(bias);
        }
        gemm_acc(&pooled, self.params.value(self.layout.conv_w), &mut conv_out, k, c, cc);
        conv_out.iter_mut().for_each(|x| *x = x.max(0.0));
        CellCache {
            n,
            in_nbrs,
            input: cell.one_hot.clone(),
            hidden,
            selected,
            pooled,
            conv_out,
        }
    }

    fn forward_item(&self, enc: &EncodedArch, heads: &[Head], mode: Mode, index: u64) -> (Vec<f64>, ItemCache) {
        let cfg = &self.config;
        let cells: Vec<CellCache> = enc.cells.iter().map(|c| self.forward_cell(c)).collect();
        let mut embedding = Vec::with_capacity(cfg.embedding_dim());
        for c in &cells {
            embedding.extend_from_slice(&c.conv_out);
        }
        let (hp_in, hp_out) = match self.layout.hparam {
            Some((w, b)) => {
                let hp_in: Vec<f64> = match &self.scaler {
                    Some(s) => enc
                        .hparams
                        .iter()
                        .zip(s.mean.iter().zip(&s.std))
                        .map(|(h, (m, sd))| (h - m) / sd)
                        .collect(),
                    None => enc.hparams.clone(),
                };
                let mut out = self.params.value(b).to_vec();
                gemm_acc(&hp_in, self.params.value(w), &mut out, 1, cfg.hparam_dim, cfg.hparam_proj);
                out.iter_mut().for_each(|x| *x = x.max(0.0));
                embedding.extend_from_slice(&out);
                (hp_in, out)
            }
            None => (Vec::new(), Vec::new()),
        };
        let e = embedding.len();
        let hh = cfg.head_hidden;
        let mut vals = Vec::with_capacity(heads.len());
        let mut head_caches = Vec::with_capacity(heads.len());
        for &head in heads {
            let s = self.layout.heads[head.index()];
            let mut hidden = self.params.value(s.b1).to_vec();
            gemm_acc(&embedding, self.params.value(s.w1), &mut hidden, 1, e, hh);
            hidden.iter_mut().for_each(|x| *x = x.max(0.0));
            let mask = match mode {
                Mode::Train { seed } if cfg.dropout > 0.0 => {
                    let mut r = rng::stream(seed, "dropout", index * 8 + head.index() as u64);
                    let keep = 1.0 - cfg.dropout;
                    Some(
                        (0..hh)
                            .map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect::<Vec<f64>>(),
                    )
                }
                _ => None,
            };
            let w2 = self.params.value(s.w2);
            let mut out = self.params.value(s.b2)[0];
            match &mask {
                Some(m) => {
                    for i in 0..hh {
                        out += hidden[i] * m[i] * w2[i];
                    }
                }
                None => {
                    for i in 0..hh {
                        out += hidden[i] * w2[i];
                    }
                }
            }
            vals.push(out);
            head_caches.push(HeadCache { hidden, mask });
        }
        (
            vals,
            ItemCache {
                cells,
                hp_in,
                hp_out,
                embedding,
                heads: head_caches,
            },
        )
    }

    /// Accumulates into the parameter gradients the reverse-mode derivative of
    /// `sum_h sum_i upstream[h][i] * output[h][i]`.
    pub fn backward(&mut self, acts: &Activations, upstream: &[Vec<f64>]) -> Result<()> {
        if acts.version != self.version {
            return Err(Error::StaleActivations(
                "parameters changed since the forward pass".into(),
            ));
        }
        if upstream.len() != acts.heads.len() || upstream.iter().any(|u| u.len() != acts.items.len()) {
            return Err(Error::StaleActivations(format!(
                "upstream shape does not match {} heads x {} items",
                acts.heads.len(),
                acts.items.len()
            )));
        }
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        for (i, item) in acts.items.iter().enumerate() {
            let g: Vec<f64> = upstream.iter().map(|u| u[i]).collect();
            if g.iter().all(|x| *x == 0.0) {
                continue;
            }
            self.backward_item(item, &acts.heads, &g, &mut grads);
        }
        self.params.accumulate(&grads);
        Ok(())
    }

    fn backward_item(&self, item: &ItemCache, heads: &[Head], upstream: &[f64], grads: &mut [Vec<f64>]) {
        let cfg = &self.config;
        let e = item.embedding.len();
        let hh = cfg.head_hidden;
        let mut d_emb = vec![0.0; e];
        for ((&head, hc), &g) in heads.iter().zip(&item.heads).zip(upstream) {
            if g == 0.0 {
                continue;
            }
            let s = self.layout.heads[head.index()];
            let w2 = self.params.value(s.w2);
            grads[s.b2][0] += g;
            let mut d_pre = vec![0.0; hh];
            for j in 0..hh {
                let m = hc.mask.as_ref().map_or(1.0, |m| m[j]);
                grads[s.w2][j] += g * hc.hidden[j] * m;
                if hc.hidden[j] > 0.0 {
                    d_pre[j] = g * w2[j] * m;
                }
            }
            for (b, d) in grads[s.b1].iter_mut().zip(&d_pre) {
                *b += d;
            }
            gemm_at_acc(&item.embedding, &d_pre, &mut grads[s.w1], 1, e, hh);
            gemm_bt_acc(&d_pre, self.params.value(s.w1), &mut d_emb, 1, e, hh);
        }

        let cell_dim = cfg.sort_k * cfg.conv_channels;
        if let Some((w, b)) = self.layout.hparam {
            let p = cfg.hparam_proj;
            let off = cfg.num_cells * cell_dim;
            let d_out: Vec<f64> = (0..p)
                .map(|j| if item.hp_out[j] > 0.0 { d_emb[off + j] } else { 0.0 })
                .collect();
            for (gb, d) in grads[b].iter_mut().zip(&d_out) {
                *gb += d;
            }
            gemm_at_acc(&item.hp_in, &d_out, &mut grads[w], 1, cfg.hparam_dim, p);
        }

        for (ci, cell) in item.cells.iter().enumerate() {
            self.backward_cell(cell, &d_emb[ci * cell_dim..(ci + 1) * cell_dim], grads);
        }
    }

    fn backward_cell(&self, cell: &CellCache, d_conv: &[f64], grads: &mut [Vec<f64>]) {
        let cfg = &self.config;
        let (k, cc, c, n) = (cfg.sort_k, cfg.conv_channels, cfg.node_channels(), cell.n);
        let d_conv: Vec<f64> = d_conv
            .iter()
            .zip(&cell.conv_out)
            .map(|(d, y)| if *y > 0.0 { *d } else { 0.0 })
            .collect();
        for r in 0..k {
            for (gb, d) in grads[self.layout.conv_b].iter_mut().zip(&d_conv[r * cc..(r + 1) * cc]) {
                *gb += d;
            }
        }
        gemm_at_acc(&cell.pooled, &d_conv, &mut grads[self.layout.conv_w], k, c, cc);
        let mut d_pooled = vec![0.0; k * c];
        gemm_bt_acc(&d_conv, self.params.value(self.layout.conv_w), &mut d_pooled, k, c, cc);

        // route pooled-row gradients back to their source nodes, split per layer
        let mut d_hidden: Vec<Vec<f64>> = cfg.gcn_hidden.iter().map(|&h| vec![0.0; n * h]).collect();
        for (r, &src) in cell.selected.iter().enumerate() {
            let mut off = 0;
            for (l, &h) in cfg.gcn_hidden.iter().enumerate() {
                for j in 0..h {
                    d_hidden[l][src * h + j] += d_pooled[r * c + off + j];
                }
                off += h;
            }
        }

        for l in (0..cfg.gcn_hidden.len()).rev() {
            let h = cfg.gcn_hidden[l];
            let d_in = if l == 0 { cfg.vocab_size } else { cfg.gcn_hidden[l - 1] };
            let out = &cell.hidden[l];
            let d_p: Vec<f64> = d_hidden[l]
                .iter()
                .zip(out)
                .map(|(d, y)| d * (1.0 - y * y))
                .collect();
            let mut d_z = vec![0.0; n * h];
            for v in 0..n {
                let w = 1.0 / cell.in_nbrs[v].len() as f64;
                for &u in &cell.in_nbrs[v] {
                    for j in 0..h {
                        d_z[u * h + j] += w * d_p[v * h + j];
                    }
                }
            }
            let slot = self.layout.gcn[l];
            let x = if l == 0 { &cell.input } else { &cell.hidden[l - 1] };
            gemm_at_acc(x, &d_z, &mut grads[slot], n, d_in, h);
            if l > 0 {
                let mut d_x = vec![0.0; n * d_in];
                gemm_bt_acc(&d_z, self.params.value(slot), &mut d_x, n, d_in, h);
                for (a, b) in d_hidden[l - 1].iter_mut().zip(&d_x) {
                    *a += b;
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            hparam_scaler: self.scaler.clone(),
            params: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        };
        let mut bytes = serde_json::to_vec(&ck)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.config.validate()?;
        let tensors = ck
            .params
            .into_iter()
            .map(|(name, t)| Tensor::from_vec(&t.shape, t.data).map(|t| (name, t)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_store(ck.config, ParamStore::new(tensors)?, ck.hparam_scaler)
    }
}

const CHECKPOINT_FORMAT: &str = "acenas-ranking-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    hparam_scaler: Option<HparamScaler>,
    params: BTreeMap<String, Tensor>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{encode_architecture, generate_synthetic_space, SynthConfig};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            num_cells: 1,
            hparam_dim: 2,
            gcn_hidden: vec![4, 4],
            sort_k: 3,
            conv_channels: 2,
            hparam_proj: 2,
            head_hidden: 4,
            dropout: 0.25,
        }
    }

    fn encodings(n: usize, seed: u64) -> Vec<EncodedArch> {
        let cfg = SynthConfig {
            size: n.max(2),
            ..Default::default()
        };
        let space = generate_synthetic_space(&cfg, seed).unwrap();
        space
            .records()
            .take(n)
            .map(|r| encode_architecture(&r.arch, &space.meta().vocab).unwrap())
            .collect()
    }

    #[test]
    fn build_is_deterministic_with_paper_shapes() {
        let cfg = ModelConfig {
            hparam_dim: 2,
            ..Default::default()
        };
        let a = RankingModel::build(cfg.clone(), 3).unwrap();
        let b = RankingModel::build(cfg.clone(), 3).unwrap();
        assert_eq!(a.params().value_bytes(), b.params().value_bytes());
        assert_ne!(a.params().value_bytes(), RankingModel::build(cfg, 4).unwrap().params().value_bytes());
        let shapes: Vec<&[usize]> = (0..4)
            .map(|l| a.params().get(&format!("encoder.gcn{l}.weight")).unwrap().value.shape())
            .collect();
        assert_eq!(shapes, vec![&[8, 128][..], &[128, 128], &[128, 128], &[128, 128]]);
        let bad = ModelConfig {
            dropout: 1.0,
            ..Default::default()
        };
        assert!(matches!(RankingModel::build(bad, 1), Err(Error::Config(_))));
    }

    #[test]
    fn eval_scores_are_batch_independent() {
        let encs = encodings(20, 1);
        let refs: Vec<&EncodedArch> = encs.iter().collect();
        let model = RankingModel::build(tiny_config(), 2).unwrap();
        let batch = model.score(&refs, Head::Rank).unwrap();
        for (i, e) in encs.iter().enumerate() {
            assert_eq!(model.score(&[e], Head::Rank).unwrap()[0], batch[i]);
        }
        assert_eq!(batch, model.score(&refs, Head::Rank).unwrap());
    }

    #[test]
    fn zero_weights_yield_output_bias() {
        let encs = encodings(5, 1);
        let refs: Vec<&EncodedArch> = encs.iter().collect();
        let mut model = RankingModel::build(tiny_config(), 2).unwrap();
        for p in model.params_mut().iter_mut() {
            if p.name.ends_with(".weight") {
                p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let bias = model.params().get("head.rank.fc2.bias").unwrap().value.data()[0];
        for s in model.score(&refs, Head::Rank).unwrap() {
            assert_eq!(s, bias);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let encs = encodings(1, 1);
        let model = RankingModel::build(
            ModelConfig {
                hparam_dim: 3,
                ..tiny_config()
            },
            1,
        )
        .unwrap();
        assert!(matches!(model.score(&[&encs[0]], Head::Rank), Err(Error::Dimension(_))));
    }

    #[test]
    fn sort_pool_cases() {
        // already sorted by last channel, n = k
        let x = vec![1.0, 3.0, 2.0, 2.0, 5.0, 1.0];
        let (out, sel) = sort_pool(&x, 3, 2, 3).unwrap();
        assert_eq!(out, x);
        assert_eq!(sel, vec![0, 1, 2]);
        let (out, sel) = sort_pool(&[1.0, 2.0, 3.0, 4.0], 2, 2, 4).unwrap();
        assert_eq!(sel, vec![1, 0]);
        assert_eq!(out, vec![3.0, 4.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        // tie on last channel falls back to the previous channel, then index
        let (_, sel) = sort_pool(&[1.0, 5.0, 2.0, 5.0, 2.0, 5.0], 3, 2, 3).unwrap();
        assert_eq!(sel, vec![1, 2, 0]);
        assert!(sort_pool(&x, 3, 2, 0).is_err());
    }

    #[test]
    fn adam_hand_step_and_noop() {
        let mut store = ParamStore::new(vec![("w".into(), Tensor::from_vec(&[1], vec![1.0]).unwrap())]).unwrap();
        store.adam_step(&AdamConfig::new(0.1, 0.0), |_| true).unwrap();
        // zero gradient, no decay: unchanged
        assert_eq!(store.get("w").unwrap().value.data()[0], 1.0);

        let mut store = ParamStore::new(vec![("w".into(), Tensor::from_vec(&[1], vec![1.0]).unwrap())]).unwrap();
        store.get_mut("w").unwrap().grad[0] = 1.0;
        let mut twin = store.clone();
        store.adam_step(&AdamConfig::new(0.1, 0.0), |_| true).unwrap();
        let w = store.get("w").unwrap().value.data()[0];
        assert!((w - 0.9).abs() < 1e-6, "{w}");
        assert_eq!(store.get("w").unwrap().grad[0], 0.0);
        assert_eq!(store.step_count(), 1);
        twin.adam_step(&AdamConfig::new(0.1, 0.0), |_| true).unwrap();
        assert_eq!(twin.value_bytes(), store.value_bytes());
        assert!(store.adam_step(&AdamConfig::new(0.0, 0.0), |_| true).is_err());
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 0.005).unwrap(), 0.005);
        assert!(cosine_lr(100, 100, 0.005).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.005).unwrap() - 0.0025).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 0.005).is_err());
        assert!(cosine_lr(101, 100, 0.005).is_err());
    }

    #[test]
    fn backward_zero_upstream_and_stale_record() {
        let encs = encodings(3, 1);
        let refs: Vec<&EncodedArch> = encs.iter().collect();
        let mut model = RankingModel::build(tiny_config(), 2).unwrap();
        let f = model.forward(&refs, &[Head::Rank], Mode::Train { seed: 1 }).unwrap();
        model.backward(&f.activations, &[vec![0.0; 3]]).unwrap();
        assert!(model.params().iter().all(|p| p.grad.iter().all(|g| *g == 0.0)));
        assert!(matches!(
            model.backward(&f.activations, &[vec![0.0; 2]]),
            Err(Error::StaleActivations(_))
        ));
        model.adam_step(&AdamConfig::new(0.01, 0.0), |_| true).unwrap();
        assert!(matches!(
            model.backward(&f.activations, &[vec![1.0; 3]]),
            Err(Error::StaleActivations(_))
        ));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let encs = encodings(2, 4);
        let refs: Vec<&EncodedArch> = encs.iter().collect();
        let mode = Mode::Train { seed: 9 };
        let grads = |model: &mut RankingModel, up: Vec<f64>| {
            let f = model.forward(&refs, &[Head::Rank], mode).unwrap();
            model.backward(&f.activations, &[up]).unwrap();
            let g: Vec<f64> = model.params().iter().flat_map(|p| p.grad.clone()).collect();
            model.params_mut().zero_grad();
            g
        };
        let mut model = RankingModel::build(tiny_config(), 5).unwrap();
        let both = grads(&mut model, vec![1.0, 0.5]);
        let first = grads(&mut model, vec![1.0, 0.0]);
        let second = grads(&mut model, vec![0.0, 0.5]);
        for ((b, x), y) in both.iter().zip(&first).zip(&second) {
            assert!((b - (x + y)).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn dropout_is_seeded_and_unbiased() {
        let encs = encodings(1, 2);
        let e = [&encs[0]];
        let model = RankingModel::build(
            ModelConfig {
                dropout: 0.5,
                ..tiny_config()
            },
            8,
        )
        .unwrap();
        let eval = model.score(&e, Head::Rank).unwrap()[0];
        let run = |seed| model.forward(&e, &[Head::Rank], Mode::Train { seed }).unwrap().outputs[0][0];
        assert_eq!(run(3), run(3));
        let samples: Vec<f64> = (0..10_000).map(run).collect();
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let sd = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - eval).abs() <= 3.0 * sd / n.sqrt(), "{mean} vs {eval} (sd {sd})");
    }

    #[test]
    fn checkpoint_roundtrip_exact() {
        let encs = encodings(4, 3);
        let refs: Vec<&EncodedArch> = encs.iter().collect();
        let mut model = RankingModel::build(tiny_config(), 11).unwrap();
        model.fit_hparam_scaler(&refs);
        let bytes = model.to_checkpoint_bytes().unwrap();
        let back = RankingModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.params().value_bytes(), model.params().value_bytes());
        assert_eq!(back.hparam_scaler(), model.hparam_scaler());
        assert_eq!(back.to_checkpoint_bytes().unwrap(), bytes);
        assert_eq!(back.score(&refs, Head::WsAcc).unwrap(), model.score(&refs, Head::WsAcc).unwrap());
    }

    #[test]
    fn copy_head_makes_heads_agree() {
        let encs = encodings(3, 3);
        let refs: Vec<&EncodedArch> = encs.iter().collect();
        let mut model = RankingModel::build(tiny_config(), 11).unwrap();
        assert_ne!(model.score(&refs, Head::Rank).unwrap(), model.score(&refs, Head::WsAcc).unwrap());
        model.copy_head(Head::WsAcc, Head::Rank);
        assert_eq!(model.score(&refs, Head::Rank).unwrap(), model.score(&refs, Head::WsAcc).unwrap());
    }
}
