//! Oracle comparisons shared by the oracle tests and the acceptance run.
//! Each check returns a short summary on success and the first mismatch
//! otherwise.

use std::collections::{BTreeSet, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajattr::clustering::{dbscan, xmeans, DbscanConfig, Point, XMeansConfig};
use trajattr::embedding::{wasserstein1, DataEmbedding};
use trajattr::encoder::{blocks, init_params, loss_and_grad, reconstruction_loss};
use trajattr::gridworld::{build_env, Distance, Environment, GridSpec};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Grid of 3..10 per side with roughly 30% obstacles and 10% lava.
pub fn random_grid(seed: u64) -> Environment {
    let mut r = rng(seed);
    let (w, h) = (r.gen_range(3..10), r.gen_range(3..10));
    let start = (r.gen_range(0..h), r.gen_range(0..w));
    let goal = loop {
        let g = (r.gen_range(0..h), r.gen_range(0..w));
        if g != start {
            break g;
        }
    };
    let mut obstacles = BTreeSet::new();
    let mut lava = BTreeSet::new();
    for row in 0..h {
        for col in 0..w {
            let c = (row, col);
            if c == start || c == goal {
                continue;
            }
            match r.gen_range(0..10) {
                0..=2 => {
                    obstacles.insert(c);
                }
                3 => {
                    lava.insert(c);
                }
                _ => {}
            }
        }
    }
    let spec = GridSpec {
        width: w,
        height: h,
        start,
        goal_cells: [goal].into_iter().collect(),
        lava_cells: lava,
        obstacle_cells: obstacles,
    };
    build_env("random", spec).unwrap()
}

pub fn bfs(env: &Environment, a: usize, b: usize) -> Option<usize> {
    let (h, w) = (env.height(), env.width());
    let mut dist = vec![usize::MAX; h * w];
    dist[a] = 0;
    let mut q = VecDeque::from([a]);
    while let Some(s) = q.pop_front() {
        if s == b {
            return Some(dist[s]);
        }
        let (r, c) = env.coords(s);
        let mut next = Vec::new();
        if r > 0 {
            next.push((r - 1, c));
        }
        if r + 1 < h {
            next.push((r + 1, c));
        }
        if c > 0 {
            next.push((r, c - 1));
        }
        if c + 1 < w {
            next.push((r, c + 1));
        }
        for (nr, nc) in next {
            let t = env.index(nr, nc);
            if !env.is_obstacle(t) && dist[t] == usize::MAX {
                dist[t] = dist[s] + 1;
                q.push_back(t);
            }
        }
    }
    None
}

pub fn astar_vs_bfs() -> Check {
    let mut pairs = 0;
    for seed in 0..100 {
        let env = random_grid(seed);
        let open: Vec<usize> = (0..env.n_states()).filter(|&s| !env.is_obstacle(s)).collect();
        for &a in &open {
            for &b in &open {
                let want = match bfs(&env, a, b) {
                    Some(d) => Distance::Steps(d),
                    None => Distance::Unreachable,
                };
                let got = env.shortest_distance(a, b).map_err(|e| e.to_string())?;
                if got != want {
                    return Err(format!("grid {seed}, {a} -> {b}: {got:?} vs {want:?}"));
                }
                pairs += 1;
            }
        }
    }
    Ok(format!("100 grids, {pairs} pairs"))
}

/// Minimum over all vertices of the transportation polytope. Each vertex is
/// a spanning tree of the bipartite supply/demand graph carrying the unique
/// flow that tree admits.
pub fn transport_lp(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len();
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let need = 2 * n - 1;
    let mut best = f64::INFINITY;
    let mut pick = Vec::with_capacity(need);
    fn walk(start: usize, edges: &[(usize, usize)], need: usize, pick: &mut Vec<usize>, pq: (&[f64], &[f64]), best: &mut f64) {
        if pick.len() == need {
            if let Some(cost) = tree_flow(edges, pick, pq.0, pq.1) {
                *best = best.min(cost);
            }
            return;
        }
        for e in start..edges.len() {
            if edges.len() - e < need - pick.len() {
                break;
            }
            pick.push(e);
            walk(e + 1, edges, need, pick, pq, best);
            pick.pop();
        }
    }
    walk(0, &edges, need, &mut pick, (p, q), &mut best);
    best
}

/// Peels leaves off the chosen edge set; `None` if it is not a spanning
/// tree or the forced flow is negative.
fn tree_flow(edges: &[(usize, usize)], pick: &[usize], p: &[f64], q: &[f64]) -> Option<f64> {
    let n = p.len();
    let mut rem: Vec<f64> = p.iter().chain(q).copied().collect();
    let mut alive: Vec<(usize, usize)> = pick.iter().map(|&e| (edges[e].0, n + edges[e].1)).collect();
    let mut cost = 0.0;
    while !alive.is_empty() {
        let mut degree = vec![0; 2 * n];
        for &(a, b) in &alive {
            degree[a] += 1;
            degree[b] += 1;
        }
        let k = alive.iter().position(|&(a, b)| degree[a] == 1 || degree[b] == 1)?;
        let (a, b) = alive.swap_remove(k);
        let (leaf, other) = if degree[a] == 1 { (a, b) } else { (b, a) };
        let f = rem[leaf];
        if f < -1e-12 {
            return None;
        }
        rem[leaf] = 0.0;
        rem[other] -= f;
        let (i, j) = if a < n { (a, b - n) } else { (b, a - n) };
        cost += f * i.abs_diff(j) as f64;
    }
    rem.iter().all(|r| r.abs() < 1e-9).then_some(cost)
}

fn random_simplex(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.2) { 0.0 } else { r.gen::<f64>() }).collect();
    if v.iter().sum::<f64>() == 0.0 {
        v[0] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

pub fn w1_vs_lp() -> Check {
    let mut r = rng(7);
    let mut worst: f64 = 0.0;
    for n in 1..=4 {
        for _ in 0..60 {
            let p = random_simplex(&mut r, n);
            let q = random_simplex(&mut r, n);
            let got = wasserstein1(&DataEmbedding { probs: p.clone() }, &DataEmbedding { probs: q.clone() })
                .map_err(|e| e.to_string())?;
            let diff = (got - transport_lp(&p, &q)).abs();
            if diff >= 1e-9 {
                return Err(format!("p={p:?} q={q:?}: |delta| {diff:e}"));
            }
            worst = worst.max(diff);
        }
    }
    Ok(format!("240 pairs, max |delta| {worst:.1e}"))
}

pub fn gradient_check() -> Check {
    let step = 1e-5;
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for inst in 0..20u64 {
        let vocab = r.gen_range(3..7);
        let (h, e) = if inst == 0 { (3, 3) } else { (r.gen_range(2..5), r.gen_range(1..4)) };
        let len = if inst == 0 { 2 } else { r.gen_range(1..5) };
        let tokens: Vec<usize> = (0..len).map(|_| r.gen_range(0..vocab)).collect();
        let params = init_params(vocab, h, e, inst).map_err(|e| e.to_string())?;
        let (_, grad) = loss_and_grad(&params, &tokens).map_err(|e| e.to_string())?;
        let loss = |p: &trajattr::encoder::EncoderParams| reconstruction_loss(p, &tokens).unwrap();
        let mut numeric = vec![0.0; grad.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut up = params.clone();
            up.data[i] += step;
            let mut down = params.clone();
            down.data[i] -= step;
            *slot = (loss(&up) - loss(&down)) / (2.0 * step);
        }
        for (name, off, len) in blocks(&params) {
            let a = &grad[off..off + len];
            let b = &numeric[off..off + len];
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let scale = norm(a).max(norm(b));
            if scale < 1e-10 {
                // blocks the sequence never touches have zero gradient both ways
                if diff >= 1e-10 {
                    return Err(format!("instance {inst}, block {name}: untouched block moved"));
                }
                continue;
            }
            let rel = diff / scale;
            if rel >= 1e-4 {
                return Err(format!("instance {inst}, block {name}: relative error {rel:e}"));
            }
            worst = worst.max(rel);
        }
    }
    Ok(format!("20 instances, max relative error {worst:.1e}"))
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    let u: f64 = r.gen_range(1e-12..1.0);
    let v: f64 = r.gen();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

/// Three unit-variance blobs, 40 points each, 10 apart.
pub fn blobs(seed: u64) -> Vec<Point> {
    let mut r = rng(seed);
    let mut pts = Vec::new();
    for c in [[0.0, 0.0], [10.0, 0.0], [5.0, 9.0]] {
        for _ in 0..40 {
            let g = [gauss(&mut r), gauss(&mut r)];
            pts.push(vec![c[0] + g[0], c[1] + g[1]]);
        }
    }
    pts
}

pub fn xmeans_blobs() -> Check {
    let mut hits = 0;
    for seed in 0..20u64 {
        let cfg = XMeansConfig { k_max: 10, center_seed: seed, ..XMeansConfig::default() };
        if xmeans(&blobs(seed), &cfg).map_err(|e| e.to_string())?.k == 3 {
            hits += 1;
        }
    }
    let msg = format!("k = 3 in {hits}/20 seeds");
    if hits >= 19 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Renumbers labels by first appearance so equal partitions compare equal.
pub fn canonical(labels: &[i64]) -> Vec<i64> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|&l| {
            if l < 0 {
                return -1;
            }
            let next = map.len() as i64;
            *map.entry(l).or_insert(next)
        })
        .collect()
}

pub fn dbscan_stability() -> Check {
    let mut r = rng(3);
    let mut pts = blobs(5);
    // a bridge of border points and some isolated noise
    for i in 0..6 {
        pts.push(vec![2.5 + i as f64 * 0.9, 0.3]);
    }
    pts.push(vec![40.0, 40.0]);
    pts.push(vec![-30.0, 12.0]);
    let cfg = DbscanConfig { eps: 1.2, min_pts: 4 };
    let run = |p: &[Point]| dbscan(p, &cfg).map_err(|e| e.to_string());
    let base = run(&pts)?;
    if base.k < 3 || base.labels[pts.len() - 1] != -1 {
        return Err(format!("unexpected base clustering, k = {}", base.k));
    }
    for i in 0..10 {
        if run(&pts)? != base {
            return Err(format!("rerun {i} differs"));
        }
    }
    let want = canonical(&base.labels);
    for i in 0..10 {
        let mut order: Vec<usize> = (0..pts.len()).collect();
        for j in (1..order.len()).rev() {
            order.swap(j, r.gen_range(0..=j));
        }
        let shuffled: Vec<Point> = order.iter().map(|&j| pts[j].clone()).collect();
        let out = run(&shuffled)?;
        let mut back = vec![0; pts.len()];
        for (pos, &j) in order.iter().enumerate() {
            back[j] = out.labels[pos];
        }
        if canonical(&back) != want {
            return Err(format!("permutation {i} changes the partition"));
        }
    }
    Ok(format!("k = {}, 10 reruns and 10 permutations identical", base.k))
}
