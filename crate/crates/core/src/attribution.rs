//! Explanation policies, the five evaluation metrics and per-state
//! attribution of decisions to trajectory clusters.

use std::collections::BTreeMap;

use crate::clustering::ClusterAssignment;
use crate::dynaq::{self, QTablePolicy, TrainConfig};
use crate::embedding::{self, DataEmbedding};
use crate::gridworld::{Action, Environment, StateId};
use crate::par::{self, Exec};
use crate::trajstore::TrajectoryDataset;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ExplanationPolicies {
    /// Trained on the full dataset.
    pub original: QTablePolicy,
    /// Trained with the keyed cluster left out.
    pub clusters: BTreeMap<i64, QTablePolicy>,
}

/// Trains the full-data policy and one policy per complementary set, all
/// with the same config and seed so the data is the only difference.
pub fn train_explanation_policies(
    env: &Environment,
    dataset: &TrajectoryDataset,
    assignment: &ClusterAssignment,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<ExplanationPolicies> {
    if assignment.k < 2 {
        return Err(Error::TooFew { need: 2, got: assignment.k });
    }
    if assignment.labels.len() != dataset.len() {
        return Err(Error::LengthMismatch(assignment.labels.len(), dataset.len()));
    }
    let sets = embedding::complementary_sets(assignment)?;
    let mut trained = par::map(exec, &sets, |set| {
        let trajs = set.trajectory_indices.iter().map(|&i| &dataset.trajectories[i]);
        dynaq::train_offline(env, trajs, cfg).map(|p| (set.removed_cluster, p))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let (_, original) = trained.remove(0);
    let clusters = trained.into_iter().map(|(c, p)| (c.expect("cluster set"), p)).collect();
    Ok(ExplanationPolicies { original, clusters })
}

/// Full data embedding plus one per complementary set, and the W1 distance
/// of each complement from the full one.
pub fn complement_distances<V: AsRef<[f64]> + Sync>(
    embeddings: &[V],
    assignment: &ClusterAssignment,
) -> Result<(DataEmbedding, BTreeMap<i64, DataEmbedding>, BTreeMap<i64, f64>)> {
    let sets = embedding::complementary_sets(assignment)?;
    let full = embedding::data_embedding(embeddings)?;
    let mut per = BTreeMap::new();
    let mut dist = BTreeMap::new();
    for set in &sets[1..] {
        let sub: Vec<&[f64]> = set.trajectory_indices.iter().map(|&i| embeddings[i].as_ref()).collect();
        let de = embedding::data_embedding(&sub)?;
        let j = set.removed_cluster.unwrap();
        dist.insert(j, embedding::wasserstein1(&full, &de)?);
        per.insert(j, de);
    }
    Ok((full, per, dist))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionResult {
    pub state: StateId,
    pub original_action: Action,
    pub per_cluster_action: BTreeMap<i64, Action>,
    pub candidate_clusters: Vec<i64>,
    pub attributed_cluster: Option<i64>,
    pub attributed_trajectories: Vec<usize>,
}

/// Candidates are clusters whose policy's greedy action differs from the
/// original at `state`; the one with the smallest W1 distance wins, ties
/// to the smaller label.
pub fn attribute(
    state: StateId,
    original: &QTablePolicy,
    policies: &BTreeMap<i64, QTablePolicy>,
    w_dists: &BTreeMap<i64, f64>,
    assignment: &ClusterAssignment,
) -> AttributionResult {
    let original_action = original.greedy(state);
    let per_cluster_action: BTreeMap<i64, Action> = policies.iter().map(|(&j, p)| (j, p.greedy(state))).collect();
    let candidate_clusters: Vec<i64> =
        per_cluster_action.iter().filter(|(_, &a)| a != original_action).map(|(&j, _)| j).collect();
    let attributed_cluster = candidate_clusters.iter().copied().min_by(|a, b| {
        let (da, db) = (w_dists.get(a).copied().unwrap_or(f64::INFINITY), w_dists.get(b).copied().unwrap_or(f64::INFINITY));
        da.total_cmp(&db).then(a.cmp(b))
    });
    let attributed_trajectories = attributed_cluster.map(|j| assignment.members(j)).unwrap_or_default();
    AttributionResult { state, original_action, per_cluster_action, candidate_clusters, attributed_cluster, attributed_trajectories }
}

/// Share of attributed states per cluster; states with no attribution are
/// left out of the denominator.
pub fn attribution_frequency(results: &[AttributionResult], k: usize) -> BTreeMap<i64, f64> {
    let mut counts: BTreeMap<i64, f64> = (0..k as i64).map(|j| (j, 0.0)).collect();
    let mut total = 0.0;
    for r in results {
        if let Some(j) = r.attributed_cluster {
            *counts.entry(j).or_default() += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        counts.values_mut().for_each(|c| *c /= total);
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// `None` for the original policy.
    pub cluster: Option<i64>,
    pub isv: f64,
    pub delta_q: f64,
    pub action_contrast: f64,
    pub w_dist: f64,
    pub attribution_freq: f64,
}

#[derive(Debug, Clone)]
pub struct Metrics {
    pub rows: Vec<MetricsRow>,
    pub attributions: Vec<AttributionResult>,
    /// Evaluation states where no cluster was attributed.
    pub unattributed: usize,
}

impl Metrics {
    pub fn cluster_rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(|r| r.cluster.is_some())
    }

    pub fn original(&self) -> &MetricsRow {
        self.rows.iter().find(|r| r.cluster.is_none()).expect("original row present")
    }

    /// Mean over cluster rows of (isv, delta_q, action_contrast, w_dist).
    pub fn mean_over_clusters(&self) -> [f64; 4] {
        let rows: Vec<&MetricsRow> = self.cluster_rows().collect();
        let n = rows.len().max(1) as f64;
        let mut m = [0.0; 4];
        for r in rows {
            m[0] += r.isv;
            m[1] += r.delta_q;
            m[2] += r.action_contrast;
            m[3] += r.w_dist;
        }
        m.map(|x| x / n)
    }
}

/// ISV at `s0`; mean |ΔQ| at the original greedy action and the share of
/// states with a different greedy action over `eval_states`; W1 distance of
/// the complement; attribution frequency over `eval_states`.
pub fn compute_metrics(
    policies: &ExplanationPolicies,
    w_dists: &BTreeMap<i64, f64>,
    assignment: &ClusterAssignment,
    eval_states: &[StateId],
    s0: StateId,
) -> Result<Metrics> {
    if eval_states.is_empty() {
        return Err(Error::TooFew { need: 1, got: 0 });
    }
    let orig = &policies.original;
    let attributions: Vec<AttributionResult> =
        eval_states.iter().map(|&s| attribute(s, orig, &policies.clusters, w_dists, assignment)).collect();
    let freq = attribution_frequency(&attributions, assignment.k);
    let n = eval_states.len() as f64;
    let mut rows = vec![MetricsRow {
        cluster: None,
        isv: dynaq::isv(orig, s0),
        delta_q: 0.0,
        action_contrast: 0.0,
        w_dist: 0.0,
        attribution_freq: 0.0,
    }];
    for (&j, p) in &policies.clusters {
        let mut dq = 0.0;
        let mut differ = 0.0;
        for &s in eval_states {
            let a = orig.greedy(s).code();
            dq += (orig.q[s][a] - p.q[s][a]).abs();
            if p.greedy(s) != orig.greedy(s) {
                differ += 1.0;
            }
        }
        rows.push(MetricsRow {
            cluster: Some(j),
            isv: dynaq::isv(p, s0),
            delta_q: dq / n,
            action_contrast: differ / n,
            w_dist: w_dists.get(&j).copied().unwrap_or(0.0),
            attribution_freq: freq.get(&j).copied().unwrap_or(0.0),
        });
    }
    let unattributed = attributions.iter().filter(|a| a.attributed_cluster.is_none()).count();
    Ok(Metrics { rows, attributions, unattributed })
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("cluster,isv,delta_q,action_contrast,w_dist,attribution_freq\n");
    for r in rows {
        let c = r.cluster.map_or("orig".to_string(), |j| j.to_string());
        out.push_str(&format!("{c},{},{},{},{},{}\n", r.isv, r.delta_q, r.action_contrast, r.w_dist, r.attribution_freq));
    }
    out
}
