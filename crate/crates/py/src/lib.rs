use std::path::PathBuf;

use acenas_core::ltr::{self, LabeledExample, RankLoss, TrainConfig, WeakExample};
use acenas_core::metrics::{self, RelevanceMap};
use acenas_core::nn::{Head, ModelConfig, RankingModel};
use acenas_core::search::{self as core_search, Sampler, SearchConfig, SearchView};
use acenas_core::space::{self, encode_space, SearchSpace, SynthConfig};
use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: acenas_core::Error) -> PyErr {
    match e {
        acenas_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        acenas_core::Error::UnknownId(_) => PyKeyError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Tabular search space with validation, test and (optionally) weak accuracies.
#[pyclass(name = "Space", module = "acenas", skip_from_py_object)]
pub struct PySpace {
    inner: SearchSpace,
}

#[pymethods]
impl PySpace {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: space::load_space(&path).map_err(err)?,
        })
    }

    /// Synthetic space with weak labels calibrated to `tau` (skipped when `tau` is None).
    #[staticmethod]
    #[pyo3(signature = (size, seed, tau = Some(0.6), vocab_size = 8, hparam_dim = 2))]
    fn synthetic(size: usize, seed: u64, tau: Option<f64>, vocab_size: usize, hparam_dim: usize) -> PyResult<Self> {
        let cfg = SynthConfig {
            size,
            vocab_size,
            hparam_dim,
            ..Default::default()
        };
        let mut inner = space::generate_synthetic_space(&cfg, seed).map_err(err)?;
        if let Some(t) = tau {
            inner = space::calibrate_weak_labels(&inner, t, seed).map_err(err)?;
        }
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.ids().cloned().collect()
    }

    fn val_acc(&self) -> Vec<f64> {
        self.inner.records().map(|r| r.val_acc).collect()
    }

    fn test_acc(&self) -> Vec<f64> {
        self.inner.records().map(|r| r.test_acc).collect()
    }

    fn ws_acc(&self) -> Option<Vec<f64>> {
        self.inner.records().map(|r| r.ws_acc).collect()
    }

    fn best_test_acc(&self) -> f64 {
        self.inner.best_test_acc()
    }

    fn record<'py>(&self, py: Python<'py>, id: &str) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.record(id).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("id", &r.arch.id)?;
        d.set_item("val_acc", r.val_acc)?;
        d.set_item("test_acc", r.test_acc)?;
        d.set_item("ws_acc", r.ws_acc)?;
        d.set_item("flops", r.flops)?;
        d.set_item("params", r.params)?;
        d.set_item("hparams", r.arch.hparams.clone())?;
        let cells: Vec<(Vec<String>, Vec<[usize; 2]>)> = r
            .arch
            .cells
            .iter()
            .map(|c| (c.nodes().to_vec(), c.edges().to_vec()))
            .collect();
        d.set_item("cells", cells)?;
        Ok(d)
    }

    fn calibrate(&self, tau: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: space::calibrate_weak_labels(&self.inner, tau, seed).map_err(err)?,
        })
    }
}

/// Graph ranking model with rank, weak-accuracy, FLOPs and params heads.
#[pyclass(name = "Model", module = "acenas", skip_from_py_object)]
pub struct PyModel {
    inner: RankingModel,
}

fn parse_loss(name: &str) -> PyResult<RankLoss> {
    match name {
        "lambdarank" => Ok(RankLoss::LambdaRank),
        "ranknet" => Ok(RankLoss::RankNet),
        "mse" => Ok(RankLoss::Mse),
        other => Err(PyValueError::new_err(format!("unknown loss `{other}`"))),
    }
}

#[pymethods]
impl PyModel {
    /// Model shaped for `space`.
    #[new]
    #[pyo3(signature = (space, seed, gcn_hidden = vec![128, 128, 128, 128], sort_k = 16, conv_channels = 32, head_hidden = 128))]
    fn new(space: &PySpace, seed: u64, gcn_hidden: Vec<usize>, sort_k: usize, conv_channels: usize, head_hidden: usize) -> PyResult<Self> {
        let cfg = ModelConfig {
            vocab_size: space.inner.meta().vocab.len(),
            num_cells: space.inner.num_cells(),
            hparam_dim: space.inner.meta().hparam_dim,
            gcn_hidden,
            sort_k,
            conv_channels,
            head_hidden,
            ..Default::default()
        };
        Ok(Self {
            inner: RankingModel::build(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RankingModel::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Rank-head scores for the given ids (all architectures when `ids` is None).
    #[pyo3(signature = (space, ids = None))]
    fn score(&self, space: &PySpace, ids: Option<Vec<String>>) -> PyResult<Vec<f64>> {
        let encs = encode_space(&space.inner).map_err(err)?;
        let refs: Vec<_> = match ids {
            None => encs.iter().collect(),
            Some(ids) => {
                let view = SearchView::from_parts(encs.clone(), vec![0.0; encs.len()]).map_err(err)?;
                ids.iter()
                    .map(|id| {
                        view.position(id)
                            .map(|i| &encs[i])
                            .ok_or_else(|| PyKeyError::new_err(id.clone()))
                    })
                    .collect::<PyResult<_>>()?
            }
        };
        refs.chunks(512)
            .try_fold(Vec::with_capacity(refs.len()), |mut acc, c| {
                acc.extend(self.inner.score(c, Head::Rank)?);
                Ok(acc)
            })
            .map_err(err)
    }

    /// Multi-task pretraining on weak labels; returns held-out R² per channel.
    #[pyo3(signature = (space, seed, epochs = 300, lr = 0.001, sample_size = 4000))]
    fn pretrain<'py>(&mut self, py: Python<'py>, space: &PySpace, seed: u64, epochs: usize, lr: f64, sample_size: usize) -> PyResult<Bound<'py, PyDict>> {
        let encs = encode_space(&space.inner).map_err(err)?;
        let data = space
            .inner
            .records()
            .zip(&encs)
            .take(sample_size)
            .map(|(r, e)| WeakExample::from_record(r, e))
            .collect::<acenas_core::Result<Vec<_>>>()
            .map_err(err)?;
        let cfg = TrainConfig {
            epochs,
            lr0: lr,
            ..TrainConfig::pretrain()
        };
        let report = py
            .detach(|| ltr::pretrain(&mut self.inner, &data, &cfg, seed))
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("r2", report.r2.map(|r| r.to_vec()))?;
        d.set_item("step_losses", report.step_losses)?;
        Ok(d)
    }

    /// Finetunes the rank head on the validation accuracies of `ids`.
    #[pyo3(signature = (space, ids, seed, epochs = 300, lr = 0.005, loss = "lambdarank"))]
    fn finetune(&mut self, py: Python<'_>, space: &PySpace, ids: Vec<String>, seed: u64, epochs: usize, lr: f64, loss: &str) -> PyResult<usize> {
        let loss = parse_loss(loss)?;
        let encs = encode_space(&space.inner).map_err(err)?;
        let view = SearchView::from_parts(encs, vec![0.0; space.inner.len()]).map_err(err)?;
        let labeled = ids
            .iter()
            .map(|id| {
                let i = view.position(id).ok_or_else(|| PyKeyError::new_err(id.clone()))?;
                Ok(LabeledExample {
                    enc: &view.encodings()[i],
                    val_acc: space.inner.record(id).map_err(err)?.val_acc,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let cfg = TrainConfig {
            epochs,
            lr0: lr,
            ..TrainConfig::finetune()
        };
        let report = py
            .detach(|| ltr::finetune(&mut self.inner, &labeled, &cfg, loss, seed))
            .map_err(err)?;
        Ok(report.epochs_run)
    }
}

/// Iterative search; returns the summary with the trace under `samples`.
#[pyfunction]
#[pyo3(name = "search", signature = (space, model, seed, per_round = 20, rounds = 5, alpha = 0.5, top_k = 10, epochs = 300, loss = "lambdarank", random = false))]
#[allow(clippy::too_many_arguments)]
fn run_search<'py>(
    py: Python<'py>,
    space: &PySpace,
    model: &PyModel,
    seed: u64,
    per_round: usize,
    rounds: usize,
    alpha: f64,
    top_k: usize,
    epochs: usize,
    loss: &str,
    random: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = SearchConfig {
        per_round,
        rounds,
        alpha,
        top_k,
        seed,
        loss: parse_loss(loss)?,
        sampler: if random { Sampler::Random } else { Sampler::Iterative },
        train: TrainConfig {
            epochs,
            ..TrainConfig::finetune()
        },
    };
    let (trace, outcome) = py
        .detach(|| {
            let view = SearchView::new(&space.inner)?;
            let (_, trace) = core_search::iterative_search(&view, &model.inner, &cfg)?;
            let outcome = core_search::finalize(&trace, &space.inner)?;
            Ok((trace, outcome))
        })
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("chosen", &outcome.chosen)?;
    d.set_item("val_acc", outcome.val_acc)?;
    d.set_item("test_acc", outcome.test_acc)?;
    d.set_item("top_k_test_regret", outcome.top_k_test_regret)?;
    d.set_item("top_k", trace.top_k.clone())?;
    let samples: Vec<(usize, String, &str, f64)> = trace
        .samples
        .iter()
        .map(|s| (s.round, s.id.clone(), s.origin.name(), s.val_acc))
        .collect();
    d.set_item("samples", samples)?;
    let ndcg: Vec<Option<f64>> = trace.snapshots.iter().map(|s| s.ndcg).collect();
    d.set_item("round_ndcg", ndcg)?;
    Ok(d)
}

/// Full-list NDCG of `scores` against relevances (ids break score ties).
#[pyfunction]
#[pyo3(signature = (scores, relevances, ids = None))]
fn ndcg(scores: Vec<f64>, relevances: Vec<f64>, ids: Option<Vec<String>>) -> PyResult<f64> {
    let ids = ids.unwrap_or_else(|| (0..scores.len()).map(|i| format!("{i:012}")).collect());
    Ok(metrics::ndcg_of_scores(&ids, &scores, &relevances).map_err(err)?.value)
}

#[pyfunction]
fn dcg(relevances: Vec<f64>) -> PyResult<f64> {
    metrics::dcg(&relevances).map_err(err)
}

#[pyfunction]
fn kendall_tau(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::kendall_tau(&a, &b).map_err(err)
}

/// `(lower, upper)` of the relevance map fitted on `accs`, and the mapped values.
#[pyfunction]
#[pyo3(signature = (accs, values = None))]
fn relevance_map(accs: Vec<f64>, values: Option<Vec<f64>>) -> PyResult<(f64, f64, Vec<f64>)> {
    let m = RelevanceMap::fit_default(&accs).map_err(err)?;
    let mapped = values.unwrap_or_default().iter().map(|v| m.map(*v)).collect();
    Ok((m.lower, m.upper, mapped))
}

#[pyfunction]
#[pyo3(signature = (scores, relevances, sigma = 1.0))]
fn lambdarank_lambdas(scores: Vec<f64>, relevances: Vec<f64>, sigma: f64) -> PyResult<Vec<f64>> {
    let ids: Vec<String> = (0..scores.len()).map(|i| format!("{i:012}")).collect();
    ltr::lambdarank_lambdas(&ids, &scores, &relevances, sigma).map_err(err)
}

#[pymodule]
fn acenas(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpace>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(run_search, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg, m)?)?;
    m.add_function(wrap_pyfunction!(dcg, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau, m)?)?;
    m.add_function(wrap_pyfunction!(relevance_map, m)?)?;
    m.add_function(wrap_pyfunction!(lambdarank_lambdas, m)?)?;
    Ok(())
}
