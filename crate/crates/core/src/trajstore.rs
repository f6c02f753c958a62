//! Trajectories, dataset generation, tokenization and the line-oriented
//! dataset file format.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynaq::{self, TrainConfig};
use crate::gridworld::{Action, Environment, StateId};
use crate::par::{self, Exec};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: StateId,
    pub a: Action,
    pub r: f64,
    pub s_next: StateId,
}

/// Ordered transitions; the last one is always the end marker.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Goal,
    Lava,
    Truncated,
}

impl Trajectory {
    pub fn new(transitions: Vec<Transition>) -> Self {
        Trajectory { transitions }
    }

    /// Transitions without the marker.
    pub fn real(&self) -> &[Transition] {
        &self.transitions[..self.transitions.len().saturating_sub(1)]
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn outcome(&self) -> Outcome {
        match self.real().last().map(|t| t.r) {
            Some(r) if r > 0.0 => Outcome::Goal,
            Some(r) if r < 0.0 => Outcome::Lava,
            _ => Outcome::Truncated,
        }
    }

    /// Every state the trajectory occupies, in order, including the last.
    pub fn visited(&self) -> Vec<StateId> {
        let mut v: Vec<StateId> = self.transitions.iter().map(|t| t.s).collect();
        if let Some(last) = self.transitions.last() {
            if last.s_next != last.s {
                v.push(last.s_next);
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_traj: usize,
    /// Trajectories that must end in a goal.
    pub positive_quota: usize,
    /// Trajectories that must end in lava.
    pub negative_quota: usize,
    pub traj_per_agent: usize,
    pub max_traj_len: usize,
    pub perform_epsilon: f64,
    /// Starting exploration rate for negative-quota rollouts; raised on retries.
    pub negative_epsilon: f64,
    pub retry_budget: usize,
    pub train: TrainConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_traj: 60,
            positive_quota: 0,
            negative_quota: 0,
            traj_per_agent: 1,
            max_traj_len: 50,
            perform_epsilon: 0.1,
            negative_epsilon: 0.3,
            retry_budget: 500,
            train: TrainConfig::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if self.n_traj == 0 {
            return bad("n_traj must be at least 1");
        }
        if self.positive_quota + self.negative_quota > self.n_traj {
            return bad("outcome quotas exceed n_traj");
        }
        if self.traj_per_agent == 0 || self.max_traj_len == 0 || self.retry_budget == 0 {
            return bad("traj_per_agent, max_traj_len and retry_budget must be positive");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        rng::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub env_name: String,
    pub config_hash: String,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Negative,
    Positive,
    Free,
}

/// Positive slots switch to a freshly trained agent after this many misses.
const ATTEMPTS_PER_AGENT: usize = 50;

fn rollout(env: &Environment, policy: &dynaq::QTablePolicy, cfg: &GenConfig, slot: Slot, seed: u64, index: usize) -> Result<Trajectory> {
    let mut rng = rng::stream(seed, "perform", index as u64);
    match slot {
        Slot::Free => dynaq::perform(env, policy, cfg.max_traj_len, cfg.perform_epsilon, &mut rng),
        Slot::Positive => {
            let mut fresh = None;
            for attempt in 0..cfg.retry_budget {
                if attempt > 0 && attempt % ATTEMPTS_PER_AGENT == 0 {
                    let mut train = cfg.train.clone();
                    train.seed = rng::derive_seed(seed, "agent-retry", ((index as u64) << 32) | attempt as u64);
                    fresh = Some(dynaq::train_online(env, &train)?.policy);
                }
                let t = dynaq::perform(env, fresh.as_ref().unwrap_or(policy), cfg.max_traj_len, cfg.perform_epsilon, &mut rng)?;
                if t.outcome() == Outcome::Goal {
                    return Ok(t);
                }
            }
            Err(Error::PositiveQuota { quota: cfg.positive_quota, budget: cfg.retry_budget })
        }
        Slot::Negative => {
            for attempt in 0..cfg.retry_budget {
                let boost = attempt as f64 / cfg.retry_budget as f64;
                let eps = cfg.negative_epsilon + (1.0 - cfg.negative_epsilon) * boost;
                let t = dynaq::perform(env, policy, cfg.max_traj_len, eps, &mut rng)?;
                if t.outcome() == Outcome::Lava {
                    return Ok(t);
                }
            }
            Err(Error::NegativeQuota { quota: cfg.negative_quota, budget: cfg.retry_budget })
        }
    }
}

/// Trains one fresh Dyna-Q agent per batch of `traj_per_agent` slots and
/// collects its rollouts. The first `negative_quota` slots must end in lava,
/// the next `positive_quota` in a goal; the rest are unconstrained.
pub fn generate_dataset(env: &Environment, cfg: &GenConfig, seed: u64, exec: Exec) -> Result<TrajectoryDataset> {
    cfg.validate()?;
    let slot = |i: usize| {
        if i < cfg.negative_quota {
            Slot::Negative
        } else if i < cfg.negative_quota + cfg.positive_quota {
            Slot::Positive
        } else {
            Slot::Free
        }
    };
    let n_agents = cfg.n_traj.div_ceil(cfg.traj_per_agent);
    let batches = par::map_range(exec, n_agents, |b| -> Result<Vec<Trajectory>> {
        let mut train = cfg.train.clone();
        train.seed = rng::derive_seed(seed, "agent", b as u64);
        let run = dynaq::train_online(env, &train)?;
        let lo = b * cfg.traj_per_agent;
        let hi = (lo + cfg.traj_per_agent).min(cfg.n_traj);
        (lo..hi).map(|i| rollout(env, &run.policy, cfg, slot(i), seed, i)).collect()
    });
    let mut trajectories = Vec::with_capacity(cfg.n_traj);
    for batch in batches {
        trajectories.extend(batch?);
    }
    Ok(TrajectoryDataset { env_name: env.name().to_string(), config_hash: cfg.hash(), trajectories })
}

/// Token ids: states first, then the four actions, then rewards −1, 0, +1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub n_states: usize,
}

impl Vocab {
    pub fn for_env(env: &Environment) -> Self {
        Vocab { n_states: env.n_states() }
    }

    pub fn size(&self) -> usize {
        self.n_states + 4 + 3
    }

    pub fn reward_token(&self, r: f64) -> usize {
        self.n_states + 4 + if r < 0.0 { 0 } else if r > 0.0 { 2 } else { 1 }
    }
}

pub fn tokenize(traj: &Trajectory, env: &Environment) -> Result<Vec<usize>> {
    if traj.is_empty() {
        return Err(Error::Validation("empty trajectory".into()));
    }
    let v = Vocab::for_env(env);
    let mut out = Vec::with_capacity(traj.len() * 3);
    for t in &traj.transitions {
        if t.s >= v.n_states {
            return Err(Error::TokenOutOfVocab { token: t.s, vocab: v.size() });
        }
        out.extend([t.s, v.n_states + t.a.code(), v.reward_token(t.r)]);
    }
    Ok(out)
}

/// Inverse of [`tokenize`] for contiguous trajectories closed by a marker.
pub fn detokenize(tokens: &[usize], env: &Environment) -> Result<Trajectory> {
    let v = Vocab::for_env(env);
    if tokens.is_empty() || tokens.len() % 3 != 0 {
        return Err(Error::Validation(format!("token count {} is not a positive multiple of 3", tokens.len())));
    }
    let steps: Vec<(StateId, Action, f64)> = tokens
        .chunks(3)
        .map(|c| {
            let s = (c[0] < v.n_states).then_some(c[0]);
            let a = c[1].checked_sub(v.n_states).and_then(Action::from_code);
            let r = match c[2].checked_sub(v.n_states + 4) {
                Some(0) => Some(-1.0),
                Some(1) => Some(0.0),
                Some(2) => Some(1.0),
                _ => None,
            };
            match (s, a, r) {
                (Some(s), Some(a), Some(r)) => Ok((s, a, r)),
                _ => Err(Error::Validation(format!("malformed token triple {c:?}"))),
            }
        })
        .collect::<Result<_>>()?;
    let transitions = steps
        .iter()
        .enumerate()
        .map(|(i, &(s, a, r))| {
            let s_next = steps.get(i + 1).map_or(s, |n| n.0);
            Transition { s, a, r, s_next }
        })
        .collect();
    Ok(Trajectory::new(transitions))
}

#[derive(Serialize, Deserialize)]
struct Header {
    env: String,
    n: usize,
    config_hash: String,
}

pub fn dataset_to_string(ds: &TrajectoryDataset) -> String {
    let header = Header { env: ds.env_name.clone(), n: ds.len(), config_hash: ds.config_hash.clone() };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for t in &ds.trajectories {
        out.push('[');
        for (i, tr) in t.transitions.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "[{},{},{},{}]", tr.s, tr.a.code(), tr.r as i64, tr.s_next).unwrap();
        }
        out.push_str("]\n");
    }
    out
}

pub fn save_dataset(ds: &TrajectoryDataset, path: &Path) -> Result<()> {
    crate::pipeline::write_atomic(path, dataset_to_string(ds).as_bytes())
}

pub fn parse_dataset(text: &str, path: &str, env: &Environment) -> Result<TrajectoryDataset> {
    let err = |line: usize, msg: String| Error::Parse { path: path.to_string(), line, msg };
    let mut lines = text.lines();
    let header: Header = serde_json::from_str(lines.next().ok_or_else(|| err(1, "missing header".into()))?)
        .map_err(|e| err(1, e.to_string()))?;
    if header.env != env.name() {
        return Err(Error::EnvMismatch { expected: env.name().to_string(), found: header.env });
    }
    let mut trajectories = Vec::with_capacity(header.n);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let rows: Vec<[i64; 4]> = serde_json::from_str(line).map_err(|e| err(lineno, e.to_string()))?;
        if rows.is_empty() {
            return Err(err(lineno, "empty trajectory".into()));
        }
        let n = env.n_states() as i64;
        let transitions = rows
            .iter()
            .map(|&[s, a, r, sn]| {
                let a = usize::try_from(a).ok().and_then(Action::from_code);
                match a {
                    Some(a) if (0..n).contains(&s) && (0..n).contains(&sn) && (-1..=1).contains(&r) => {
                        Ok(Transition { s: s as usize, a, r: r as f64, s_next: sn as usize })
                    }
                    _ => Err(err(lineno, format!("invalid transition [{s},{a:?},{r},{sn}]"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        trajectories.push(Trajectory::new(transitions));
    }
    if trajectories.len() != header.n {
        return Err(err(
            text.lines().count() + 1,
            format!("header promises {} trajectories, found {}", header.n, trajectories.len()),
        ));
    }
    Ok(TrajectoryDataset { env_name: header.env, config_hash: header.config_hash, trajectories })
}

/// Loads a dataset and checks it belongs to `env`.
pub fn load_dataset(path: &Path, env: &Environment) -> Result<TrajectoryDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string(), env)
}

/// Loads a dataset whose env is resolved from the built-in registry.
pub fn load_dataset_builtin(path: &Path) -> Result<TrajectoryDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().next().unwrap_or("");
    let header: Header = serde_json::from_str(first).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: e.to_string(),
    })?;
    let env = crate::gridworld::builtin_env(&header.env)?;
    parse_dataset(&text, &path.display().to_string(), &env)
}
