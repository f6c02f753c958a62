//! Distance analysis of attribution sets, behavior labels and purity,
//! ISV/frequency correlation and human-study stimulus selection.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionResult, MetricsRow};
use crate::clustering::ClusterAssignment;
use crate::gridworld::{Environment, StateId};
use crate::rng::Rng;
use crate::trajstore::{Outcome, Trajectory, TrajectoryDataset};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DistanceMode {
    /// Zero when the trajectory passes through the state.
    #[default]
    PassThroughZero,
    /// Always the mean over all trajectory points.
    MeanAllPoints,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDistance {
    pub value: f64,
    /// Trajectory points with no path to the state, left out of the mean.
    pub unreachable: usize,
}

pub fn state_trajectory_distance(env: &Environment, s: StateId, traj: &Trajectory, mode: DistanceMode) -> Result<StateDistance> {
    if traj.is_empty() {
        return Err(Error::Validation("empty trajectory".into()));
    }
    let points = traj.visited();
    if mode == DistanceMode::PassThroughZero && points.contains(&s) {
        return Ok(StateDistance { value: 0.0, unreachable: 0 });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut unreachable = 0;
    for &p in &points {
        match env.shortest_distance(p, s)?.steps() {
            Some(d) => {
                sum += d as f64;
                n += 1;
            }
            None => unreachable += 1,
        }
    }
    if n == 0 {
        return Err(Error::NoFiniteDistance(s));
    }
    Ok(StateDistance { value: sum / n as f64, unreachable })
}

pub const BIN_EDGES: [f64; 3] = [3.0, 6.0, 9.0];

/// Bin index for `[0,3) [3,6) [6,9) [9,∞)`.
pub fn bin_of(d: f64) -> usize {
    BIN_EDGES.iter().take_while(|&&e| d >= e).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    pub per_state: BTreeMap<StateId, f64>,
    pub bins: [usize; 4],
    pub unreachable_points: usize,
}

impl DistanceReport {
    pub fn to_csv(&self, env: &Environment) -> String {
        let mut out = String::from("state,row,col,avg_distance,bin\n");
        for (&s, &d) in &self.per_state {
            let (r, c) = env.coords(s);
            out.push_str(&format!("{s},{r},{c},{d},{}\n", bin_of(d)));
        }
        out
    }
}

/// Mean state-trajectory distance over each state's attributed trajectories.
pub fn attribution_distance_report(
    env: &Environment,
    dataset: &TrajectoryDataset,
    attributions: &[AttributionResult],
    mode: DistanceMode,
) -> Result<DistanceReport> {
    let mut per_state = BTreeMap::new();
    let mut bins = [0; 4];
    let mut unreachable_points = 0;
    for a in attributions {
        if a.attributed_trajectories.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for &i in &a.attributed_trajectories {
            let d = state_trajectory_distance(env, a.state, &dataset.trajectories[i], mode)?;
            sum += d.value;
            unreachable_points += d.unreachable;
        }
        let avg = sum / a.attributed_trajectories.len() as f64;
        bins[bin_of(avg)] += 1;
        per_state.insert(a.state, avg);
    }
    Ok(DistanceReport { per_state, bins, unreachable_points })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BehaviorLabel {
    FallingIntoLava,
    GoalTopRight,
    MidGridJourney,
    None,
}

impl BehaviorLabel {
    pub fn name(self) -> &'static str {
        match self {
            BehaviorLabel::FallingIntoLava => "FallingIntoLava",
            BehaviorLabel::GoalTopRight => "GoalTopRight",
            BehaviorLabel::MidGridJourney => "MidGridJourney",
            BehaviorLabel::None => "None",
        }
    }
}

pub fn in_top_right(env: &Environment, s: StateId) -> bool {
    let (r, c) = env.coords(s);
    let (h, w) = (env.height(), env.width());
    r <= h / 3 && c >= (2 * w).div_ceil(3)
}

pub fn in_middle(env: &Environment, s: StateId) -> bool {
    let (r, c) = env.coords(s);
    let mid = |x: usize, n: usize| x >= n / 3 && x < n - n / 3;
    mid(r, env.height()) && mid(c, env.width())
}

/// Precedence: lava, then top-right goal, then a goal reached from a
/// mid-grid start.
pub fn classify_behavior(traj: &Trajectory, env: &Environment) -> BehaviorLabel {
    let real = traj.real();
    let (Some(first), Some(last)) = (real.first(), real.last()) else {
        return BehaviorLabel::None;
    };
    match traj.outcome() {
        Outcome::Lava => BehaviorLabel::FallingIntoLava,
        Outcome::Goal if in_top_right(env, last.s_next) => BehaviorLabel::GoalTopRight,
        Outcome::Goal if in_middle(env, first.s) => BehaviorLabel::MidGridJourney,
        _ => BehaviorLabel::None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBehavior {
    pub dominant: BehaviorLabel,
    pub purity: f64,
    pub size: usize,
    /// Every member has the same number of transitions.
    pub uniform_length: bool,
}

pub fn cluster_behavior_purity(env: &Environment, dataset: &TrajectoryDataset, assignment: &ClusterAssignment) -> BTreeMap<i64, ClusterBehavior> {
    let mut out = BTreeMap::new();
    for j in 0..assignment.k as i64 {
        let members = assignment.members(j);
        let mut counts: BTreeMap<BehaviorLabel, usize> = BTreeMap::new();
        for &i in &members {
            *counts.entry(classify_behavior(&dataset.trajectories[i], env)).or_default() += 1;
        }
        let (dominant, top) = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&l, &c)| (l, c))
            .unwrap_or((BehaviorLabel::None, 0));
        let len0 = members.first().map(|&i| dataset.trajectories[i].len());
        let uniform_length = members.iter().all(|&i| Some(dataset.trajectories[i].len()) == len0);
        let purity = if members.is_empty() { 0.0 } else { top as f64 / members.len() as f64 };
        out.insert(j, ClusterBehavior { dominant, purity, size: members.len(), uniform_length });
    }
    out
}

fn check_series(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(Error::TooFew { need: 3, got: x.len() });
    }
    Ok(())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_series(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1; tied values share their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_series(x, y)?;
    pearson(&ranks(x), &ranks(y))
}

/// `(pearson, spearman)` between attribution frequency and ISV over cluster rows.
pub fn correlation_isv_frequency(rows: &[MetricsRow]) -> Result<(f64, f64)> {
    let cl: Vec<&MetricsRow> = rows.iter().filter(|r| r.cluster.is_some()).collect();
    let f: Vec<f64> = cl.iter().map(|r| r.attribution_freq).collect();
    let v: Vec<f64> = cl.iter().map(|r| r.isv).collect();
    Ok((pearson(&f, &v)?, spearman(&f, &v)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StimulusSet {
    pub state: StateId,
    pub attributed: [usize; 2],
    pub random_traj: usize,
    pub alternate_traj: usize,
    /// Trajectory indices in presentation order.
    pub option_order: Vec<usize>,
    /// Positions in `option_order` holding the attributed trajectories.
    pub correct_options: Vec<usize>,
}

fn pick(pool: &[usize], rng: &mut Rng) -> Option<usize> {
    (!pool.is_empty()).then(|| pool[rng.gen_range(0..pool.len())])
}

/// Two attributed trajectories, one from a non-attributed cluster and one
/// drawn from the whole dataset, shuffled.
pub fn build_stimulus(attribution: &AttributionResult, assignment: &ClusterAssignment, rng: &mut Rng) -> Result<StimulusSet> {
    let attr = &attribution.attributed_trajectories;
    let cluster = attribution.attributed_cluster.ok_or(Error::TooFew { need: 2, got: 0 })?;
    if attr.len() < 2 {
        return Err(Error::TooFew { need: 2, got: attr.len() });
    }
    let a0 = attr[rng.gen_range(0..attr.len())];
    let rest: Vec<usize> = attr.iter().copied().filter(|&i| i != a0).collect();
    let a1 = pick(&rest, rng).unwrap();
    let others: Vec<usize> = (0..assignment.labels.len()).filter(|&i| assignment.labels[i] != cluster).collect();
    let alternate = pick(&others, rng).ok_or(Error::TooFew { need: 1, got: 0 })?;
    let pool: Vec<usize> = (0..assignment.labels.len()).filter(|i| ![a0, a1, alternate].contains(i)).collect();
    let random = pick(&pool, rng).ok_or(Error::TooFew { need: 4, got: 3 })?;
    let mut order = vec![a0, a1, random, alternate];
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let correct = order.iter().enumerate().filter(|(_, &t)| t == a0 || t == a1).map(|(i, _)| i).collect();
    Ok(StimulusSet {
        state: attribution.state,
        attributed: [a0, a1],
        random_traj: random,
        alternate_traj: alternate,
        option_order: order,
        correct_options: correct,
    })
}
