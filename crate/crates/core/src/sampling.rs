//! Bag-of-words label clustering and dynamic negative sampling.
//!
//! Labels are represented by the L2-normalized bag of words of the training
//! texts they tag, then split into a balanced binary tree of clusters. During
//! training the classification loss only covers labels of the clusters that
//! hold a positive plus the best-scoring other clusters; at inference only
//! the top-scoring clusters' labels are ranked.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetBundle, LabelId, TokenId, CLS, PAD, UNK};
use crate::error::{config_err, data_err, Result};
use crate::model::{rank_scores, ClassifierWeights, Ranking};
use crate::tensor::Matrix;

/// Label count above which negative sampling is switched on by default.
pub const AUTO_SAMPLING_THRESHOLD: usize = 5000;

/// `2^ceil(log2(sqrt(L)))`, capped at the largest power of two `<= L`.
pub fn default_num_clusters(num_labels: usize) -> usize {
    if num_labels <= 1 {
        return 1;
    }
    let target = (num_labels as f64).sqrt().log2().ceil().max(0.0) as u32;
    let cap = usize::BITS - 1 - num_labels.leading_zeros();
    1usize << target.min(cap)
}

pub fn default_k_clusters(num_clusters: usize) -> usize {
    num_clusters.min(8)
}

/// Sparse `(L, V)` matrix with L2-normalized rows (or empty rows).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelBow {
    pub dim: usize,
    /// Per label: `(token id, weight)` sorted by token id.
    pub rows: Vec<Vec<(TokenId, f64)>>,
}

impl LabelBow {
    pub fn num_labels(&self) -> usize {
        self.rows.len()
    }

    pub fn row_norm(&self, label: LabelId) -> f64 {
        self.rows[label].iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows.len(), self.dim);
        for (l, row) in self.rows.iter().enumerate() {
            for &(t, v) in row {
                m.set(l, t as usize, v);
            }
        }
        m
    }
}

fn is_content(t: TokenId) -> bool {
    !matches!(t, CLS | PAD | UNK)
}

fn normalized(counts: BTreeMap<TokenId, f64>) -> Vec<(TokenId, f64)> {
    let norm = counts.values().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Vec::new();
    }
    counts.into_iter().map(|(t, v)| (t, v / norm)).collect()
}

/// Row ℓ: normalized sum of token counts over training texts positive for ℓ;
/// labels without training samples fall back to the BOW of their own text.
pub fn label_bow(dataset: &DatasetBundle) -> LabelBow {
    let l = dataset.num_labels();
    let mut counts: Vec<BTreeMap<TokenId, f64>> = vec![BTreeMap::new(); l];
    for s in &dataset.train {
        for &t in s.text_tokens.iter().filter(|&&t| is_content(t)) {
            for &lab in &s.positive_labels {
                *counts[lab].entry(t).or_insert(0.0) += 1.0;
            }
        }
    }
    let rows = counts
        .into_iter()
        .enumerate()
        .map(|(lab, c)| {
            if !c.is_empty() {
                return normalized(c);
            }
            let mut own = BTreeMap::new();
            for &t in dataset.label_group(lab).iter().filter(|&&t| is_content(t)) {
                *own.entry(t).or_insert(0.0) += 1.0;
            }
            normalized(own)
        })
        .collect();
    LabelBow {
        dim: dataset.tokens.len(),
        rows,
    }
}

/// Partition of labels into clusters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterIndex {
    assignments: Vec<usize>,
    members: Vec<Vec<LabelId>>,
}

#[derive(Serialize, Deserialize)]
struct ClusterIndexRepr {
    #[serde(rename = "C")]
    num_clusters: usize,
    assignments: Vec<usize>,
}

impl Serialize for ClusterIndex {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ClusterIndexRepr {
            num_clusters: self.members.len(),
            assignments: self.assignments.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClusterIndex {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = ClusterIndexRepr::deserialize(d)?;
        ClusterIndex::from_assignments(repr.assignments, repr.num_clusters)
            .map_err(serde::de::Error::custom)
    }
}

impl ClusterIndex {
    /// Every cluster id in `0..num_clusters` must be used.
    pub fn from_assignments(assignments: Vec<usize>, num_clusters: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); num_clusters];
        for (label, &c) in assignments.iter().enumerate() {
            if c >= num_clusters {
                return Err(data_err(format!(
                    "label {label} assigned to cluster {c} >= C = {num_clusters}"
                )));
            }
            members[c].push(label);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(data_err(format!("cluster {empty} is empty")));
        }
        Ok(Self {
            assignments,
            members,
        })
    }

    fn from_members(members: Vec<Vec<LabelId>>, num_labels: usize) -> Self {
        let mut assignments = vec![0; num_labels];
        for (c, m) in members.iter().enumerate() {
            for &l in m {
                assignments[l] = c;
            }
        }
        Self {
            assignments,
            members,
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.members.len()
    }

    pub fn num_labels(&self) -> usize {
        self.assignments.len()
    }

    pub fn cluster_of(&self, label: LabelId) -> usize {
        self.assignments[label]
    }

    pub fn members(&self, cluster: usize) -> &[LabelId] {
        &self.members[cluster]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }
}

/// Recursive balanced 2-means: each node is split into two halves (sizes
/// differing by at most one) by ranking its labels on the direction between
/// two centroids, refined Lloyd-style until the split stops changing.
pub fn build_clusters(bow: &LabelBow, c_target: usize, seed: u64) -> Result<ClusterIndex> {
    let l = bow.num_labels();
    if c_target == 0 || !c_target.is_power_of_two() {
        return Err(config_err(format!("C_target must be a power of two, got {c_target}")));
    }
    if c_target > l {
        return Err(config_err(format!("C_target {c_target} exceeds the {l} labels")));
    }
    let depth = c_target.trailing_zeros();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes: Vec<Vec<LabelId>> = vec![(0..l).collect()];
    for _ in 0..depth {
        let mut next = Vec::with_capacity(nodes.len() * 2);
        for node in nodes {
            let (a, b) = balanced_split(bow, node, &mut rng);
            next.push(a);
            next.push(b);
        }
        nodes = next;
    }
    for n in &mut nodes {
        n.sort_unstable();
    }
    Ok(ClusterIndex::from_members(nodes, l))
}

const MAX_SPLIT_ITERS: usize = 25;

fn sparse_dot(row: &[(TokenId, f64)], dense: &[f64]) -> f64 {
    row.iter().map(|&(t, v)| v * dense[t as usize]).sum()
}

fn centroid(bow: &LabelBow, labels: &[LabelId]) -> Vec<f64> {
    let mut c = vec![0.0; bow.dim];
    for &l in labels {
        for &(t, v) in &bow.rows[l] {
            c[t as usize] += v;
        }
    }
    let n = labels.len().max(1) as f64;
    c.iter_mut().for_each(|v| *v /= n);
    c
}

fn balanced_split(bow: &LabelBow, node: Vec<LabelId>, rng: &mut ChaCha8Rng) -> (Vec<LabelId>, Vec<LabelId>) {
    let m = node.len();
    let half = m.div_ceil(2);
    let seeds = sample(rng, m, 2);
    let (i, j) = (seeds.index(0), seeds.index(1));
    let mut c1 = centroid(bow, &[node[i]]);
    let mut c2 = centroid(bow, &[node[j]]);
    let mut order = node;
    let mut previous: Option<Vec<LabelId>> = None;
    for _ in 0..MAX_SPLIT_ITERS {
        let mut scored: Vec<(f64, LabelId)> = order
            .iter()
            .map(|&l| (sparse_dot(&bow.rows[l], &c1) - sparse_dot(&bow.rows[l], &c2), l))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        order = scored.into_iter().map(|(_, l)| l).collect();
        let mut left = order[..half].to_vec();
        left.sort_unstable();
        if previous.as_ref() == Some(&left) {
            break;
        }
        c1 = centroid(bow, &order[..half]);
        c2 = centroid(bow, &order[half..]);
        previous = Some(left);
    }
    (order[..half].to_vec(), order[half..].to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    /// Sorted label ids of all selected clusters.
    pub candidates: Vec<LabelId>,
    /// Selected cluster ids, positive-holding clusters first.
    pub clusters: Vec<usize>,
    /// Multi-hot over clusters marking those that hold a positive.
    pub cluster_target: Vec<f64>,
}

/// Top clusters by score, ties to the lower cluster id.
fn ranked_clusters(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Clusters holding a positive, topped up with the best-scoring others until
/// `k_clusters` are selected; every positive is always a candidate.
pub fn select_candidates(
    cluster_scores: &[f64],
    positives: &[LabelId],
    index: &ClusterIndex,
    k_clusters: usize,
) -> Result<CandidateSet> {
    let c = index.num_clusters();
    if cluster_scores.len() != c {
        return Err(data_err(format!(
            "{} cluster scores for {c} clusters",
            cluster_scores.len()
        )));
    }
    if k_clusters > c {
        return Err(config_err(format!("k_clusters {k_clusters} exceeds C = {c}")));
    }
    let mut target = vec![0.0; c];
    let mut clusters = Vec::new();
    for &p in positives {
        if p >= index.num_labels() {
            return Err(data_err(format!("positive label {p} out of range")));
        }
        let cl = index.cluster_of(p);
        if target[cl] == 0.0 {
            target[cl] = 1.0;
            clusters.push(cl);
        }
    }
    for cl in ranked_clusters(cluster_scores) {
        if clusters.len() >= k_clusters {
            break;
        }
        if target[cl] == 0.0 {
            clusters.push(cl);
        }
    }
    let mut candidates: Vec<LabelId> = clusters
        .iter()
        .flat_map(|&cl| index.members(cl).iter().copied())
        .collect();
    candidates.sort_unstable();
    Ok(CandidateSet {
        candidates,
        clusters,
        cluster_target: target,
    })
}

/// Ranks only the labels of the `k_clusters` best clusters for one text
/// feature row. Further clusters are taken, best first, while fewer than
/// `top_k` candidates have been collected.
pub fn two_stage_predict(
    text_features: &[f64],
    weights: &ClassifierWeights<'_>,
    index: &ClusterIndex,
    k_clusters: usize,
    top_k: usize,
) -> Result<Ranking> {
    let Some(cluster_head) = weights.cluster_head else {
        return Err(config_err(
            "cluster head disabled; use rank_classify for the full output space",
        ));
    };
    if cluster_head.0.cols() != index.num_clusters() {
        return Err(data_err("cluster head width does not match the cluster index"));
    }
    if k_clusters == 0 || k_clusters > index.num_clusters() {
        return Err(config_err(format!(
            "k_clusters must lie in 1..={}",
            index.num_clusters()
        )));
    }
    let e = Matrix::from_vec(1, text_features.len(), text_features.to_vec());
    let hidden = weights.hidden(&e);
    let cluster_scores = ClassifierWeights::affine_row(hidden.row(0), cluster_head, None);
    let mut candidates: Vec<LabelId> = Vec::new();
    for (taken, cl) in ranked_clusters(&cluster_scores).into_iter().enumerate() {
        if taken >= k_clusters && candidates.len() >= top_k {
            break;
        }
        candidates.extend_from_slice(index.members(cl));
    }
    candidates.sort_unstable();
    let scores = ClassifierWeights::affine_row(hidden.row(0), weights.label_head, Some(&candidates));
    Ok(rank_scores(&candidates, &scores, top_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_bow(l: usize, dim: usize, seed: u64) -> LabelBow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..l)
            .map(|_| {
                let mut c = BTreeMap::new();
                for _ in 0..4 {
                    *c.entry(rng.gen_range(3..dim as u32)).or_insert(0.0) += 1.0;
                }
                normalized(c)
            })
            .collect();
        LabelBow { dim, rows }
    }

    #[test]
    fn default_cluster_counts() {
        assert_eq!(default_num_clusters(1), 1);
        assert_eq!(default_num_clusters(16), 4);
        assert_eq!(default_num_clusters(100), 16);
        assert_eq!(default_num_clusters(3), 2);
        assert_eq!(default_num_clusters(500_000), 1024);
    }

    #[test]
    fn cluster_sizes_balanced() {
        let bow = random_bow(100, 40, 1);
        let idx = build_clusters(&bow, 4, 9).unwrap();
        let mut sizes: Vec<usize> = (0..4).map(|c| idx.members(c).len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![25, 25, 25, 25]);

        let idx = build_clusters(&bow, 1, 9).unwrap();
        assert_eq!(idx.members(0), (0..100).collect::<Vec<_>>().as_slice());

        let bow8 = random_bow(8, 20, 2);
        let idx = build_clusters(&bow8, 8, 0).unwrap();
        assert!((0..8).all(|c| idx.members(c).len() == 1));

        let idx = build_clusters(&random_bow(37, 30, 3), 8, 4).unwrap();
        let sizes: Vec<usize> = (0..8).map(|c| idx.members(c).len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, "{sizes:?}");
    }

    #[test]
    fn cluster_errors() {
        let bow = random_bow(8, 20, 2);
        assert!(build_clusters(&bow, 16, 0).is_err());
        assert!(build_clusters(&bow, 3, 0).is_err());
    }

    #[test]
    fn clustering_separates_disjoint_vocabularies() {
        // labels 0..4 use tokens 3..6, labels 4..8 use tokens 10..13
        let rows = (0..8)
            .map(|l| {
                let base = if l < 4 { 3 } else { 10 };
                let mut c = BTreeMap::new();
                c.insert(base + (l % 3) as u32, 1.0);
                c.insert(base + 3, 1.0);
                normalized(c)
            })
            .collect();
        let bow = LabelBow { dim: 16, rows };
        let idx = build_clusters(&bow, 2, 5).unwrap();
        let a = idx.cluster_of(0);
        assert!((0..4).all(|l| idx.cluster_of(l) == a));
        assert!((4..8).all(|l| idx.cluster_of(l) != a));
    }

    #[test]
    fn candidates_examples() {
        let idx = ClusterIndex::from_assignments(vec![0, 0, 1, 1, 2, 2, 3, 3], 4).unwrap();
        let scores = [0.1, 0.9, 0.5, 0.3];
        let c = select_candidates(&scores, &[0, 7], &idx, 2).unwrap();
        assert_eq!(c.candidates, vec![0, 1, 6, 7]);
        assert_eq!(c.cluster_target, vec![1.0, 0.0, 0.0, 1.0]);
        let c = select_candidates(&scores, &[], &idx, 2).unwrap();
        assert_eq!(c.clusters, vec![1, 2]);
        assert_eq!(c.candidates, vec![2, 3, 4, 5]);
        let c = select_candidates(&scores, &[0, 2, 4], &idx, 1).unwrap();
        assert_eq!(c.candidates, vec![0, 1, 2, 3, 4, 5]);
        assert!(select_candidates(&scores, &[0], &idx, 5).is_err());
    }

    #[test]
    fn cluster_index_json_round_trip() {
        let idx = ClusterIndex::from_assignments(vec![1, 0, 1, 0], 2).unwrap();
        let json = serde_json::to_string(&idx).unwrap();
        assert_eq!(json, r#"{"C":2,"assignments":[1,0,1,0]}"#);
        let back: ClusterIndex = serde_json::from_str(&json).unwrap();
        assert_eq!(back, idx);
        assert!(serde_json::from_str::<ClusterIndex>(r#"{"C":3,"assignments":[1,0]}"#).is_err());
    }
}
