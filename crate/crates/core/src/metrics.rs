//! Ranking-quality and correlation metrics.
//!
//! Accuracies are mapped to graded relevance with a clipped linear [`RelevanceMap`];
//! ranking quality is then measured with DCG/NDCG over a [`RankedList`] ordered by
//! predicted score. Positions in this module's API are 0-based; the DCG discount for
//! position `p` is `1 / log2(p + 2)`, i.e. the usual 1-based `1 / log2(i + 1)`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_QUANTILE: f64 = 0.2;
pub const DEFAULT_MAX_RELEVANCE: f64 = 20.0;

/// Quantile with linear interpolation between order statistics (type 7).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Degenerate("quantile of an empty list".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Range(format!("quantile fraction {q} not in [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Clipped linear map from accuracy (percent) to relevance in `[0, max_relevance]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMap {
    pub lower: f64,
    pub upper: f64,
    pub max_relevance: f64,
}

impl RelevanceMap {
    pub fn new(lower: f64, upper: f64, max_relevance: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) || lower >= upper {
            return Err(Error::Degenerate(format!(
                "relevance bounds must satisfy lower < upper, got [{lower}, {upper}]"
            )));
        }
        if !(max_relevance > 0.0 && max_relevance.is_finite()) {
            return Err(Error::Config(format!(
                "maximum relevance must be positive, got {max_relevance}"
            )));
        }
        Ok(Self {
            lower,
            upper,
            max_relevance,
        })
    }

    /// Fits the floor at the `q`-quantile and the ceiling at the maximum of `accs`.
    pub fn fit(accs: &[f64], q: f64, max_relevance: f64) -> Result<Self> {
        if accs.iter().any(|a| !a.is_finite()) {
            return Err(Error::Range("non-finite accuracy".into()));
        }
        let lower = quantile(accs, q)?;
        let upper = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lower >= upper {
            return Err(Error::Degenerate(format!(
                "cannot fit relevance map: {q}-quantile {lower} equals maximum {upper}"
            )));
        }
        Self::new(lower, upper, max_relevance)
    }

    pub fn fit_default(accs: &[f64]) -> Result<Self> {
        Self::fit(accs, DEFAULT_QUANTILE, DEFAULT_MAX_RELEVANCE)
    }

    pub fn map(&self, acc: f64) -> f64 {
        if acc <= self.lower {
            0.0
        } else if acc >= self.upper {
            self.max_relevance
        } else {
            self.max_relevance * (acc - self.lower) / (self.upper - self.lower)
        }
    }
}

#[inline]
pub fn gain(rel: f64) -> f64 {
    rel.exp2() - 1.0
}

#[inline]
pub fn discount(position: usize) -> f64 {
    1.0 / ((position + 2) as f64).log2()
}

/// DCG of relevances given in rank order.
pub fn dcg(rels: &[f64]) -> Result<f64> {
    if let Some(r) = rels.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
        return Err(Error::Range(format!("relevance must be finite and >= 0, got {r}")));
    }
    Ok(dcg_unchecked(rels))
}

fn dcg_unchecked(rels: &[f64]) -> f64 {
    rels.iter()
        .enumerate()
        .map(|(p, &r)| gain(r) * discount(p))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub id: String,
    pub score: f64,
    pub relevance: f64,
}

/// Items ordered by descending predicted score; equal scores are ordered by id.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    items: Vec<RankedItem>,
}

/// Total order used whenever architectures are ranked by predicted score.
pub fn score_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

impl RankedList {
    pub fn new(mut items: Vec<RankedItem>) -> Result<Self> {
        for it in &items {
            if !it.score.is_finite() {
                return Err(Error::Range(format!("score of `{}` is not finite", it.id)));
            }
            if !(it.relevance >= 0.0) || !it.relevance.is_finite() {
                return Err(Error::Range(format!(
                    "relevance of `{}` must be finite and >= 0, got {}",
                    it.id, it.relevance
                )));
            }
        }
        items.sort_by(|a, b| score_order(a.score, &a.id, b.score, &b.id));
        Ok(Self { items })
    }

    /// Builds a list from parallel slices.
    pub fn from_parts(ids: &[String], scores: &[f64], rels: &[f64]) -> Result<Self> {
        if ids.len() != scores.len() {
            return Err(Error::LengthMismatch {
                left: ids.len(),
                right: scores.len(),
            });
        }
        if ids.len() != rels.len() {
            return Err(Error::LengthMismatch {
                left: ids.len(),
                right: rels.len(),
            });
        }
        Self::new(
            ids.iter()
                .zip(scores)
                .zip(rels)
                .map(|((id, &score), &relevance)| RankedItem {
                    id: id.clone(),
                    score,
                    relevance,
                })
                .collect(),
        )
    }

    pub fn items(&self) -> &[RankedItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn relevances(&self) -> Vec<f64> {
        self.items.iter().map(|i| i.relevance).collect()
    }

    /// Same list with positions `i` and `j` exchanged (scores travel with the items, so
    /// the result is no longer score-ordered; it is only meant for metric evaluation).
    pub fn swapped(&self, i: usize, j: usize) -> Result<Self> {
        self.check_position(i)?;
        self.check_position(j)?;
        let mut items = self.items.clone();
        items.swap(i, j);
        Ok(Self { items })
    }

    fn check_position(&self, p: usize) -> Result<()> {
        if p >= self.items.len() {
            Err(Error::OutOfRange {
                index: p,
                len: self.items.len(),
            })
        } else {
            Ok(())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ndcg {
    pub value: f64,
    /// Set when the ideal DCG is zero (all relevances zero); `value` is then 1.
    pub degenerate: bool,
}

fn truncate(len: usize, k: Option<usize>) -> Result<usize> {
    match k {
        Some(0) => Err(Error::Config("NDCG cutoff must be positive".into())),
        Some(k) => Ok(k.min(len)),
        None => Ok(len),
    }
}

fn ideal_dcg(rels: &[f64], cut: usize) -> f64 {
    let mut ideal = rels.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    dcg_unchecked(&ideal[..cut])
}

pub fn ndcg(list: &RankedList, k: Option<usize>) -> Result<Ndcg> {
    let rels = list.relevances();
    let cut = truncate(rels.len(), k)?;
    let idcg = ideal_dcg(&rels, cut);
    if idcg <= 0.0 {
        return Ok(Ndcg {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(Ndcg {
        value: dcg_unchecked(&rels[..cut]) / idcg,
        degenerate: false,
    })
}

/// Full-list NDCG of `scores` against relevances, ranking with the id tie-break.
pub fn ndcg_of_scores(ids: &[String], scores: &[f64], rels: &[f64]) -> Result<Ndcg> {
    ndcg(&RankedList::from_parts(ids, scores, rels)?, None)
}

/// |NDCG change| when the items at positions `i` and `j` trade places (full list).
pub fn delta_ndcg(list: &RankedList, i: usize, j: usize) -> Result<f64> {
    let ctx = SwapContext::new(list);
    ctx.delta(i, j)
}

/// Precomputed ideal DCG so that many swaps on one list cost O(1) each.
pub struct SwapContext<'a> {
    list: &'a RankedList,
    idcg: f64,
}

impl<'a> SwapContext<'a> {
    pub fn new(list: &'a RankedList) -> Self {
        let rels = list.relevances();
        let idcg = ideal_dcg(&rels, rels.len());
        Self { list, idcg }
    }

    pub fn delta(&self, i: usize, j: usize) -> Result<f64> {
        self.list.check_position(i)?;
        self.list.check_position(j)?;
        if i == j {
            return Err(Error::Config(format!("swap positions must differ, got {i} twice")));
        }
        if self.idcg <= 0.0 {
            return Ok(0.0);
        }
        let items = self.list.items();
        let dg = gain(items[i].relevance) - gain(items[j].relevance);
        let dd = discount(i) - discount(j);
        Ok((dg * dd).abs() / self.idcg)
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::Degenerate("correlation needs at least two points".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Range("non-finite value in correlation input".into()));
    }
    Ok(())
}

fn pairs_of(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Sum of `t(t-1)/2` over runs of equal values in an already sorted sequence.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += pairs_of(run);
            run = 1;
        }
    }
    total + pairs_of(run)
}

/// Stable merge sort of `v` returning the number of inversions it removed.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall's tau-b in O(n log n) (Knight's merge-sort algorithm).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as u64;
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));

    let sorted_a: Vec<f64> = order.iter().map(|&i| a[i]).collect();
    let joint: Vec<(f64, f64)> = order.iter().map(|&i| (a[i], b[i])).collect();
    let ties_a = tied_pairs(&sorted_a);
    let ties_ab = tied_pairs(&joint);

    let mut by_b: Vec<f64> = order.iter().map(|&i| b[i]).collect();
    let mut buf = vec![0.0; by_b.len()];
    let swaps = merge_count(&mut by_b, &mut buf);
    let ties_b = tied_pairs(&by_b);

    let total = pairs_of(n);
    let denom = ((total - ties_a) as f64 * (total - ties_b) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::Degenerate("Kendall's tau undefined: an input is constant".into()));
    }
    let s = total as f64 - ties_a as f64 - ties_b as f64 + ties_ab as f64 - 2.0 * swaps as f64;
    Ok((s / denom).clamp(-1.0, 1.0))
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("Pearson correlation undefined: zero variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Gap between the best accuracy in the space and the best among the first `k`
/// selected accuracies.
pub fn top_k_regret(selected: &[f64], best_in_space: f64, k: usize) -> Result<f64> {
    if selected.is_empty() {
        return Err(Error::Degenerate("regret of an empty selection".into()));
    }
    if k == 0 || k > selected.len() {
        return Err(Error::Config(format!(
            "k = {k} must be in 1..={}",
            selected.len()
        )));
    }
    let best = selected[..k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(best_in_space - best)
}
