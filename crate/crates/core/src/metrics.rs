//! Ranking metrics for multi-label prediction: P@k, nDCG@k and
//! propensity-scored precision PSP@k, plus the label propensity model.
//!
//! Rankings shorter than `k` are treated as if padded with non-relevant
//! labels. Logarithms are natural; nDCG is a ratio, so the base cancels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetBundle, LabelId, Sample};
use crate::error::{config_err, data_err, Result};

pub const P_KS: [usize; 3] = [1, 3, 5];
pub const NDCG_KS: [usize; 2] = [3, 5];
pub const PSP_KS: [usize; 3] = [1, 3, 5];

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(config_err("k must be >= 1"));
    }
    Ok(())
}

/// `positives` must be sorted (as [`Sample::positive_labels`] is).
fn is_relevant(positives: &[LabelId], label: LabelId) -> bool {
    positives.binary_search(&label).is_ok()
}

fn sorted(positives: &[LabelId]) -> Vec<LabelId> {
    let mut p = positives.to_vec();
    p.sort_unstable();
    p.dedup();
    p
}

/// `(1/k) |top_k(ranked) ∩ y|`.
pub fn precision_at_k(ranked: &[LabelId], positives: &[LabelId], k: usize) -> Result<f64> {
    check_k(k)?;
    let y = sorted(positives);
    let hits = ranked.iter().take(k).filter(|&&l| is_relevant(&y, l)).count();
    Ok(hits as f64 / k as f64)
}

/// `Σ_{i=1..k} y_{r_i} / ln(i + 1)`.
pub fn dcg_at_k(ranked: &[LabelId], positives: &[LabelId], k: usize) -> f64 {
    let y = sorted(positives);
    ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &l)| is_relevant(&y, l))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).ln())
        .sum()
}

/// `Σ_{i=1..min(k, |y|)} 1 / ln(i + 1)`.
pub fn idcg_at_k(num_positives: usize, k: usize) -> f64 {
    (0..k.min(num_positives)).map(|i| 1.0 / ((i + 2) as f64).ln()).sum()
}

pub fn ndcg_at_k(ranked: &[LabelId], positives: &[LabelId], k: usize) -> Result<f64> {
    check_k(k)?;
    let y = sorted(positives);
    if y.is_empty() {
        return Ok(0.0);
    }
    Ok(dcg_at_k(ranked, &y, k) / idcg_at_k(y.len(), k))
}

/// Per-label propensities, strictly positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropensityVector(Vec<f64>);

impl PropensityVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(data_err(format!("propensity of label {i} is {v}, must be > 0")));
        }
        Ok(Self(p))
    }

    pub fn ones(num_labels: usize) -> Self {
        Self(vec![1.0; num_labels])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub const DEFAULT_PROPENSITY_A: f64 = 0.55;
pub const DEFAULT_PROPENSITY_B: f64 = 1.5;

/// `p = 1 / (1 + C e^{−A ln(N_ℓ + B)})` with `C = (ln N − 1)(B + 1)^A`,
/// `N_ℓ` the training frequency of a label and `N` the training-set size.
/// `C` is floored at zero so tiny training sets give `p = 1`.
pub fn propensity_from_counts(label_counts: &[usize], n_train: usize, a: f64, b: f64) -> Result<PropensityVector> {
    if !(a > 0.0) || !(b >= 0.0) {
        return Err(config_err(format!("propensity needs A > 0 and B >= 0, got A = {a}, B = {b}")));
    }
    let c = (((n_train.max(1)) as f64).ln() - 1.0).max(0.0) * (b + 1.0).powf(a);
    let p = label_counts
        .iter()
        .map(|&n| 1.0 / (1.0 + c * (-a * (n as f64 + b).ln()).exp()))
        .collect();
    PropensityVector::new(p)
}

pub fn propensities(dataset: &DatasetBundle, a: f64, b: f64) -> Result<PropensityVector> {
    let mut counts = vec![0usize; dataset.num_labels()];
    for s in &dataset.train {
        for &l in &s.positive_labels {
            counts[l] += 1;
        }
    }
    propensity_from_counts(&counts, dataset.train.len(), a, b)
}

/// `(1/k) Σ_{i ∈ top_k} y_i / p_i`.
pub fn psp_at_k(ranked: &[LabelId], positives: &[LabelId], p: &PropensityVector, k: usize) -> Result<f64> {
    check_k(k)?;
    let y = sorted(positives);
    let mut total = 0.0;
    for &l in ranked.iter().take(k) {
        let pl = *p
            .as_slice()
            .get(l)
            .ok_or_else(|| data_err(format!("no propensity for label {l}")))?;
        if is_relevant(&y, l) {
            total += 1.0 / pl;
        }
    }
    Ok(total / k as f64)
}

/// PSP@k of the best possible ranking: the `k` positives with the smallest
/// propensity.
pub fn psp_ideal_at_k(positives: &[LabelId], p: &PropensityVector, k: usize) -> Result<f64> {
    check_k(k)?;
    let mut inv: Vec<f64> = sorted(positives)
        .iter()
        .map(|&l| {
            p.as_slice()
                .get(l)
                .map(|v| 1.0 / v)
                .ok_or_else(|| data_err(format!("no propensity for label {l}")))
        })
        .collect::<Result<_>>()?;
    inv.sort_by(|a, b| b.total_cmp(a));
    Ok(inv.iter().take(k).sum::<f64>() / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub p_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub psp_at: BTreeMap<usize, f64>,
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn p1(&self) -> f64 {
        self.p_at[&1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub propensity_a: f64,
    pub propensity_b: f64,
    /// Divide each sample's PSP@k by its best achievable value.
    pub psp_normalized: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            propensity_a: DEFAULT_PROPENSITY_A,
            propensity_b: DEFAULT_PROPENSITY_B,
            psp_normalized: false,
        }
    }
}

/// Macro-average of per-sample metrics. Every ranking must hold at least
/// `min(5, L)` labels.
pub fn evaluate(
    rankings: &[Vec<LabelId>],
    truth: &[Vec<LabelId>],
    propensity: &PropensityVector,
    psp_normalized: bool,
) -> Result<MetricsReport> {
    if truth.is_empty() {
        return Err(data_err("cannot evaluate an empty test set"));
    }
    if rankings.len() != truth.len() {
        return Err(data_err(format!(
            "{} rankings for {} test samples",
            rankings.len(),
            truth.len()
        )));
    }
    let min_len = 5.min(propensity.len());
    let n = truth.len() as f64;
    let mut p_at: BTreeMap<usize, f64> = P_KS.iter().map(|&k| (k, 0.0)).collect();
    let mut ndcg_at: BTreeMap<usize, f64> = NDCG_KS.iter().map(|&k| (k, 0.0)).collect();
    let mut psp_at: BTreeMap<usize, f64> = PSP_KS.iter().map(|&k| (k, 0.0)).collect();
    for (i, (ranked, y)) in rankings.iter().zip(truth).enumerate() {
        if ranked.len() < min_len {
            return Err(data_err(format!(
                "sample {i}: {} ranked labels, need at least {min_len}",
                ranked.len()
            )));
        }
        for (&k, v) in p_at.iter_mut() {
            *v += precision_at_k(ranked, y, k)?;
        }
        for (&k, v) in ndcg_at.iter_mut() {
            *v += ndcg_at_k(ranked, y, k)?;
        }
        for (&k, v) in psp_at.iter_mut() {
            let raw = psp_at_k(ranked, y, propensity, k)?;
            *v += if psp_normalized {
                let ideal = psp_ideal_at_k(y, propensity, k)?;
                if ideal > 0.0 {
                    raw / ideal
                } else {
                    0.0
                }
            } else {
                raw
            };
        }
    }
    for map in [&mut p_at, &mut ndcg_at, &mut psp_at] {
        map.values_mut().for_each(|v| *v /= n);
    }
    Ok(MetricsReport {
        p_at,
        ndcg_at,
        psp_at,
        n_samples: truth.len(),
    })
}

/// Evaluates rankings of `samples` with propensities estimated from the
/// training split of `dataset`.
pub fn evaluate_samples(
    rankings: &[Vec<LabelId>],
    samples: &[Sample],
    dataset: &DatasetBundle,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let p = propensities(dataset, opts.propensity_a, opts.propensity_b)?;
    let truth: Vec<Vec<LabelId>> = samples.iter().map(|s| s.positive_labels.clone()).collect();
    evaluate(rankings, &truth, &p, opts.psp_normalized)
}
