//! k-means, X-Means and DBSCAN over embedding vectors (Euclidean).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Rng};
use crate::{Error, Result};

pub type Point = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// Cluster per point; −1 marks DBSCAN noise.
    pub labels: Vec<i64>,
    pub k: usize,
    pub centroids: Option<Vec<Point>>,
}

impl ClusterAssignment {
    pub fn members(&self, label: i64) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == label).map(|(i, _)| i).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            if l >= 0 {
                s[l as usize] += 1;
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("point_index,label\n");
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XMeansConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub center_seed: u64,
    pub algo_seed: u64,
    pub max_iters: usize,
}

impl Default for XMeansConfig {
    fn default() -> Self {
        XMeansConfig { k_min: 2, k_max: 20, center_seed: 0, algo_seed: 99, max_iters: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbscanConfig {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        DbscanConfig { eps: 2.04, min_pts: 3 }
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Point]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < bd {
            bd = d;
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Point>,
    /// Within-cluster SSE after every assignment step.
    pub sse_trace: Vec<f64>,
}

fn plus_plus(points: &[Point], k: usize, rng: &mut Rng) -> Vec<Point> {
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..points.len())
        } else {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        };
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }
    centers
}

/// Lloyd iterations from the given centers. An emptied cluster is re-seeded
/// with the point farthest from its current centroid.
pub fn lloyd(points: &[Point], mut centroids: Vec<Point>, max_iters: usize) -> KMeans {
    let k = centroids.len();
    let dim = points[0].len();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let sse = |labels: &[usize], c: &[Point]| points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &c[l])).sum::<f64>();
    let mut trace = vec![sse(&labels, &centroids)];
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centroids[labels[a]]);
                        let db = sq_dist(&points[b], &centroids[labels[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                counts[labels[far]] -= 1;
                labels[far] = j;
                counts[j] = 1;
                centroids[j] = points[far].clone();
            }
        }
        // a point only moves to a strictly closer centroid
        let next: Vec<usize> = points
            .iter()
            .zip(&labels)
            .map(|(p, &l)| {
                let j = nearest(p, &centroids);
                if sq_dist(p, &centroids[j]) < sq_dist(p, &centroids[l]) {
                    j
                } else {
                    l
                }
            })
            .collect();
        let changed = next != labels;
        labels = next;
        trace.push(sse(&labels, &centroids));
        if !changed {
            break;
        }
    }
    KMeans { labels, centroids, sse_trace: trace }
}

pub fn kmeans(points: &[Point], k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::TooFewPoints { k, n: points.len() });
    }
    let mut r = rng::stream(seed, "kmeans++", k as u64);
    let init = plus_plus(points, k, &mut r);
    Ok(lloyd(points, init, max_iters))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bic {
    pub value: f64,
    /// Pooled variance was zero and got clamped.
    pub degenerate: bool,
}

/// Spherical identical-variance Gaussian BIC; higher is better.
/// Free parameters `p = k (d + 1) + 1`.
pub fn bic_score(points: &[Point], labels: &[usize], centroids: &[Point]) -> Bic {
    let r = points.len() as f64;
    let k = centroids.len() as f64;
    let d = points[0].len() as f64;
    let sse: f64 = points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum();
    let mut var = if r > k { sse / (r - k) } else { 0.0 };
    let degenerate = var <= 1e-12;
    if degenerate {
        var = 1e-12;
    }
    let mut counts = vec![0usize; centroids.len()];
    for &l in labels {
        counts[l] += 1;
    }
    let ll: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let rn = c as f64;
            rn * rn.ln() - rn * r.ln() - rn / 2.0 * (2.0 * std::f64::consts::PI).ln() - rn * d / 2.0 * var.ln() - (rn - k) / 2.0
        })
        .sum();
    let p = k * (d + 1.0) + 1.0;
    Bic { value: ll - p / 2.0 * r.ln(), degenerate }
}

/// Relabels clusters by first appearance so output is canonical.
fn canonical(labels: &[usize]) -> (Vec<i64>, Vec<usize>) {
    let mut map: Vec<Option<usize>> = Vec::new();
    let mut order = Vec::new();
    let out = labels
        .iter()
        .map(|&l| {
            if l >= map.len() {
                map.resize(l + 1, None);
            }
            *map[l].get_or_insert_with(|| {
                order.push(l);
                order.len() - 1
            }) as i64
        })
        .collect();
    (out, order)
}

/// Starts from k-means at `k_min`; each round tries to split every cluster
/// with a local 2-means and keeps non-degenerate splits that raise the local BIC, then
/// refines all centers with global Lloyd iterations. Stops at `k_max` or
/// when no split is accepted.
pub fn xmeans(points: &[Point], cfg: &XMeansConfig) -> Result<ClusterAssignment> {
    if cfg.k_min == 0 || cfg.k_min > cfg.k_max {
        return Err(Error::Validation("need 1 ≤ k_min ≤ k_max".into()));
    }
    let mut km = kmeans(points, cfg.k_min, cfg.center_seed, cfg.max_iters)?;
    for round in 0.. {
        let k = km.centroids.len();
        if k >= cfg.k_max {
            break;
        }
        let mut gains = Vec::new();
        let mut children = Vec::new();
        for j in 0..k {
            let members: Vec<Point> =
                points.iter().zip(&km.labels).filter(|(_, &l)| l == j).map(|(p, _)| p.clone()).collect();
            if members.len() < 2 {
                children.push(None);
                continue;
            }
            let parent = bic_score(&members, &vec![0; members.len()], std::slice::from_ref(&km.centroids[j]));
            let seed = rng::derive_seed(cfg.algo_seed, "xmeans-split", (round as u64) << 32 | j as u64);
            let child = kmeans(&members, 2, seed, cfg.max_iters)?;
            let split = bic_score(&members, &child.labels, &child.centroids);
            // a zero-variance child model says nothing about real structure
            if split.value > parent.value && !split.degenerate {
                gains.push((split.value - parent.value, j));
                children.push(Some(child.centroids));
            } else {
                children.push(None);
            }
        }
        if gains.is_empty() {
            break;
        }
        gains.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        gains.truncate(cfg.k_max - k);
        let accepted: Vec<usize> = gains.iter().map(|g| g.1).collect();
        let mut centers = Vec::new();
        for j in 0..k {
            match (&children[j], accepted.contains(&j)) {
                (Some(c), true) => centers.extend(c.iter().cloned()),
                _ => centers.push(km.centroids[j].clone()),
            }
        }
        km = lloyd(points, centers, cfg.max_iters);
    }
    let (labels, order) = canonical(&km.labels);
    let centroids = order.iter().map(|&j| km.centroids[j].clone()).collect::<Vec<_>>();
    Ok(ClusterAssignment { labels, k: centroids.len(), centroids: Some(centroids) })
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
}

/// Density clustering. Core points (at least `min_pts` neighbours within
/// `eps`, self included) connected through core neighbourhoods form
/// clusters. A border point joins the cluster of its nearest core point,
/// ties broken by the lexicographic order of core coordinates, so the
/// partition does not depend on input order.
pub fn dbscan(points: &[Point], cfg: &DbscanConfig) -> Result<ClusterAssignment> {
    if !(cfg.eps > 0.0) || cfg.min_pts == 0 {
        return Err(Error::Validation("need eps > 0 and min_pts ≥ 1".into()));
    }
    let n = points.len();
    let eps2 = cfg.eps * cfg.eps;
    let neigh: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| sq_dist(&points[i], &points[j]) <= eps2).collect()).collect();
    let core: Vec<bool> = neigh.iter().map(|nb| nb.len() >= cfg.min_pts).collect();
    let mut comp = vec![usize::MAX; n];
    let mut n_comp = 0;
    for i in 0..n {
        if !core[i] || comp[i] != usize::MAX {
            continue;
        }
        let mut stack = vec![i];
        comp[i] = n_comp;
        while let Some(p) = stack.pop() {
            for &q in &neigh[p] {
                if core[q] && comp[q] == usize::MAX {
                    comp[q] = n_comp;
                    stack.push(q);
                }
            }
        }
        n_comp += 1;
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let best = neigh[i].iter().filter(|&&q| core[q]).min_by(|&&a, &&b| {
            sq_dist(&points[i], &points[a])
                .total_cmp(&sq_dist(&points[i], &points[b]))
                .then_with(|| lex_cmp(&points[a], &points[b]))
        });
        if let Some(&q) = best {
            comp[i] = comp[q];
        }
    }
    // Canonical order: clusters sorted by their lexicographically smallest member.
    let mut reps: Vec<(usize, usize)> = Vec::new();
    for c in 0..n_comp {
        let rep = (0..n).filter(|&i| comp[i] == c).min_by(|&a, &b| lex_cmp(&points[a], &points[b])).unwrap();
        reps.push((rep, c));
    }
    reps.sort_by(|a, b| lex_cmp(&points[a.0], &points[b.0]));
    let mut relabel = vec![0i64; n_comp];
    for (new, &(_, c)) in reps.iter().enumerate() {
        relabel[c] = new as i64;
    }
    let labels = comp.iter().map(|&c| if c == usize::MAX { -1 } else { relabel[c] }).collect();
    Ok(ClusterAssignment { labels, k: n_comp, centroids: None })
}
