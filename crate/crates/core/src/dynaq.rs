//! Tabular Dyna-Q: online training for data generation, offline training
//! from a fixed dataset for explanation policies, rollouts and value readout.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::gridworld::{Action, Environment, StateId};
use crate::rng::{self, Rng};
use crate::trajstore::{Trajectory, Transition};
use crate::{Error, Result};

/// Converged values of equally long routes differ only by rounding residue.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QInit {
    /// Uniform in [0, 1), drawn from the run seed.
    Uniform,
    Zero,
}

/// Which actions of the next state an update bootstraps from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bootstrap {
    Valid,
    /// Only actions recorded in the model; a state with none contributes 0.
    Observed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub alpha: f64,
    pub gamma: f64,
    /// Planning updates after every real (or replayed) transition.
    pub eval_epochs: usize,
    pub epsilon: f64,
    /// Safety cap on a single training episode.
    pub max_episode_steps: usize,
    pub seed: u64,
    pub offline_sweeps: usize,
    /// Offline training stops early once a sweep moves no value by more than this.
    pub offline_tol: f64,
    pub online_init: QInit,
    pub offline_init: QInit,
    pub offline_bootstrap: Bootstrap,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 100,
            alpha: 0.1,
            gamma: 0.95,
            eval_epochs: 15,
            epsilon: 0.1,
            max_episode_steps: 1000,
            seed: 0,
            offline_sweeps: 200,
            offline_tol: 1e-13,
            online_init: QInit::Uniform,
            offline_init: QInit::Uniform,
            offline_bootstrap: Bootstrap::Observed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must be in (0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must be in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must be in [0, 1]");
        }
        if self.max_episode_steps == 0 {
            return bad("max_episode_steps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTablePolicy {
    pub q: Vec<[f64; 4]>,
    pub gamma: f64,
    pub alpha: f64,
    valid: Vec<u8>,
    boot: Vec<u8>,
}

impl QTablePolicy {
    pub fn new(env: &Environment, init: QInit, gamma: f64, alpha: f64, rng: &mut Rng) -> Self {
        let n = env.n_states();
        let q = (0..n)
            .map(|_| match init {
                QInit::Zero => [0.0; 4],
                QInit::Uniform => [rng.gen(), rng.gen(), rng.gen(), rng.gen()],
            })
            .collect();
        let valid: Vec<u8> = (0..n)
            .map(|s| {
                let acts = env.valid_actions(s).expect("state in range");
                acts.iter().fold(0u8, |m, a| m | (1 << a.code()))
            })
            .collect();
        let boot = valid.clone();
        QTablePolicy { q, gamma, alpha, valid, boot }
    }

    pub fn n_states(&self) -> usize {
        self.q.len()
    }

    fn is_valid(&self, s: StateId, a: usize) -> bool {
        self.valid[s] & (1 << a) != 0
    }

    /// Highest value over valid actions; never-updated invalid entries are ignored.
    pub fn max_q(&self, s: StateId) -> f64 {
        (0..4).filter(|&a| self.is_valid(s, a)).map(|a| self.q[s][a]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Argmax over valid actions. Values within [`TIE_TOL`] of the maximum
    /// count as tied, and ties go to the lowest action code.
    pub fn greedy(&self, s: StateId) -> Action {
        let m = self.max_q(s);
        let best = (0..4).find(|&a| self.is_valid(s, a) && self.q[s][a] >= m - TIE_TOL);
        Action::from_code(best.expect("non-obstacle state has a valid action")).unwrap()
    }

    fn boot_value(&self, s: StateId) -> f64 {
        let m = (0..4).filter(|&a| self.boot[s] & (1 << a) != 0).map(|a| self.q[s][a]).fold(f64::NEG_INFINITY, f64::max);
        if m.is_finite() {
            m
        } else {
            0.0
        }
    }

    fn bootstrap_from(&mut self, model: &EnvModel) {
        self.boot.iter_mut().for_each(|b| *b = 0);
        for (s, a, _, _) in model.pairs() {
            self.boot[s] |= 1 << a.code();
        }
    }

    fn update(&mut self, s: StateId, a: Action, r: f64, next: StateId, done: bool) -> f64 {
        let boot = if done { 0.0 } else { self.gamma * self.boot_value(next) };
        let cell = &mut self.q[s][a.code()];
        let delta = self.alpha * (r + boot - *cell);
        *cell += delta;
        delta.abs()
    }

    /// CSV snapshot: `state_index,q_left,q_up,q_right,q_down`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state_index,q_left,q_up,q_right,q_down\n");
        for (s, row) in self.q.iter().enumerate() {
            out.push_str(&format!("{s},{},{},{},{}\n", row[0], row[1], row[2], row[3]));
        }
        out
    }
}

/// ε-greedy choice restricted to `valid`.
pub fn sample_action(policy: &QTablePolicy, s: StateId, valid: &[Action], epsilon: f64, rng: &mut Rng) -> Result<Action> {
    if valid.is_empty() {
        return Err(Error::EmptyActionSet);
    }
    if rng.gen::<f64>() < epsilon {
        return Ok(valid[rng.gen_range(0..valid.len())]);
    }
    let mut best = valid[0];
    for &a in &valid[1..] {
        let (qa, qb) = (policy.q[s][a.code()], policy.q[s][best.code()]);
        if qa > qb || (qa == qb && a.code() < best.code()) {
            best = a;
        }
    }
    Ok(best)
}

/// Learned deterministic model: `(s, a) -> (r, s')` for observed pairs only.
#[derive(Debug, Clone, Default)]
pub struct EnvModel {
    entries: Vec<Option<(f64, StateId)>>,
    len: usize,
}

impl EnvModel {
    pub fn new(n_states: usize) -> Self {
        EnvModel { entries: vec![None; n_states * 4], len: 0 }
    }

    pub fn insert(&mut self, s: StateId, a: Action, r: f64, next: StateId) {
        let slot = &mut self.entries[s * 4 + a.code()];
        if slot.is_none() {
            self.len += 1;
        }
        *slot = Some((r, next));
    }

    pub fn get(&self, s: StateId, a: Action) -> Option<(f64, StateId)> {
        self.entries.get(s * 4 + a.code()).copied().flatten()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn pairs(&self) -> impl Iterator<Item = (StateId, Action, f64, StateId)> + '_ {
        self.entries.iter().enumerate().filter_map(|(i, e)| {
            e.map(|(r, n)| (i / 4, Action::from_code(i % 4).unwrap(), r, n))
        })
    }
}

/// Replays `eval_epochs` remembered pairs. Sampling is uniform over the visit
/// log, so pairs are drawn in proportion to how often they were taken.
fn plan(policy: &mut QTablePolicy, model: &EnvModel, log: &[(StateId, Action)], n: usize, rng: &mut Rng) -> f64 {
    let mut moved: f64 = 0.0;
    for _ in 0..n {
        let (s, a) = log[rng.gen_range(0..log.len())];
        let (r, next) = model.get(s, a).expect("logged pair is in the model");
        moved = moved.max(policy.update(s, a, r, next, r != 0.0));
    }
    moved
}

#[derive(Debug, Clone)]
pub struct OnlineRun {
    pub policy: QTablePolicy,
    pub model: EnvModel,
    pub episode_rewards: Vec<f64>,
    pub episode_lengths: Vec<usize>,
}

pub fn train_online(env: &Environment, cfg: &TrainConfig) -> Result<OnlineRun> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, "online", 0);
    let mut policy = QTablePolicy::new(env, cfg.online_init, cfg.gamma, cfg.alpha, &mut rng);
    let mut model = EnvModel::new(env.n_states());
    let mut log = Vec::new();
    let mut rewards = Vec::with_capacity(cfg.episodes);
    let mut lengths = Vec::with_capacity(cfg.episodes);
    let mut s = env.reset();
    let (mut ep_reward, mut ep_len) = (0.0, 0);
    while rewards.len() < cfg.episodes {
        let a = sample_action(&policy, s, env.valid_actions(s)?, cfg.epsilon, &mut rng)?;
        log.push((s, a));
        let out = env.step(s, a)?;
        policy.update(s, a, out.reward, out.next_state, out.done);
        model.insert(s, a, out.reward, out.next_state);
        ep_reward += out.reward;
        ep_len += 1;
        s = out.next_state;
        if out.done || ep_len >= cfg.max_episode_steps {
            rewards.push(ep_reward);
            lengths.push(ep_len);
            ep_reward = 0.0;
            ep_len = 0;
            s = env.reset();
        }
        plan(&mut policy, &model, &log, cfg.eval_epochs, &mut rng);
    }
    Ok(OnlineRun { policy, model, episode_rewards: rewards, episode_lengths: lengths })
}

/// Learns from recorded transitions only. The model and the replay log come
/// from the data; marker transitions are skipped. Each sweep replays every
/// transition in order, each followed by `eval_epochs` planning updates.
pub fn train_offline<'a, I>(env: &Environment, trajectories: I, cfg: &TrainConfig) -> Result<QTablePolicy>
where
    I: IntoIterator<Item = &'a Trajectory>,
{
    cfg.validate()?;
    let transitions: Vec<Transition> =
        trajectories.into_iter().flat_map(|t| t.real().iter().copied()).collect();
    if transitions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = rng::stream(cfg.seed, "offline", 0);
    let mut policy = QTablePolicy::new(env, cfg.offline_init, cfg.gamma, cfg.alpha, &mut rng);
    let mut model = EnvModel::new(env.n_states());
    for t in &transitions {
        if t.s >= env.n_states() || t.s_next >= env.n_states() {
            return Err(Error::StateOutOfRange(t.s.max(t.s_next)));
        }
        model.insert(t.s, t.a, t.r, t.s_next);
    }
    if cfg.offline_bootstrap == Bootstrap::Observed {
        policy.bootstrap_from(&model);
    }
    let log: Vec<(StateId, Action)> = transitions.iter().map(|t| (t.s, t.a)).collect();
    for _ in 0..cfg.offline_sweeps {
        let mut moved: f64 = 0.0;
        for t in &transitions {
            moved = moved.max(policy.update(t.s, t.a, t.r, t.s_next, t.r != 0.0));
            moved = moved.max(plan(&mut policy, &model, &log, cfg.eval_epochs, &mut rng));
        }
        if moved < cfg.offline_tol {
            break;
        }
    }
    Ok(policy)
}

/// ε-greedy rollout from reset, closed by the `(s, random action, 0, s)` marker.
pub fn perform(env: &Environment, policy: &QTablePolicy, max_traj_len: usize, epsilon: f64, rng: &mut Rng) -> Result<Trajectory> {
    if max_traj_len == 0 {
        return Err(Error::Validation("max_traj_len must be at least 1".into()));
    }
    let mut s = env.reset();
    let mut steps = Vec::new();
    let mut done = false;
    while !done && steps.len() < max_traj_len {
        let a = sample_action(policy, s, env.valid_actions(s)?, epsilon, rng)?;
        let out = env.step(s, a)?;
        steps.push(Transition { s, a, r: out.reward, s_next: out.next_state });
        s = out.next_state;
        done = out.done;
    }
    let marker = Action::from_code(rng.gen_range(0..4)).unwrap();
    steps.push(Transition { s, a: marker, r: 0.0, s_next: s });
    Ok(Trajectory::new(steps))
}

/// Initial state value estimate.
pub fn isv(policy: &QTablePolicy, s0: StateId) -> f64 {
    policy.max_q(s0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::builtin_env;

    #[test]
    fn pure_argmax_and_restriction() {
        let env = builtin_env("fourroom11").unwrap();
        let mut rng = rng::stream(0, "t", 0);
        let mut p = QTablePolicy::new(&env, QInit::Zero, 0.95, 0.1, &mut rng);
        let s = env.index(2, 2);
        p.q[s] = [0.1, 0.9, 0.2, 0.3];
        let all = env.valid_actions(s).unwrap();
        assert_eq!(sample_action(&p, s, all, 0.0, &mut rng).unwrap(), Action::Up);
        let no_up = [Action::Left, Action::Right, Action::Down];
        assert_eq!(sample_action(&p, s, &no_up, 0.0, &mut rng).unwrap(), Action::Down);
        assert!(matches!(sample_action(&p, s, &[], 0.0, &mut rng), Err(Error::EmptyActionSet)));
    }

    #[test]
    fn ties_go_to_lowest_code() {
        let env = builtin_env("fourroom11").unwrap();
        let mut rng = rng::stream(0, "t", 0);
        let p = QTablePolicy::new(&env, QInit::Zero, 0.95, 0.1, &mut rng);
        let s = env.index(2, 2);
        assert_eq!(sample_action(&p, s, env.valid_actions(s).unwrap(), 0.0, &mut rng).unwrap(), Action::Left);
        assert_eq!(p.greedy(s), Action::Left);
    }

    #[test]
    fn zero_q_has_zero_isv() {
        let env = builtin_env("gridworld7").unwrap();
        let mut rng = rng::stream(0, "t", 0);
        let p = QTablePolicy::new(&env, QInit::Zero, 0.95, 0.1, &mut rng);
        assert_eq!(isv(&p, env.start()), 0.0);
    }

    #[test]
    fn single_transition_dataset() {
        let env = builtin_env("gridworld7").unwrap();
        let s = env.index(1, 6);
        let g = env.index(0, 6);
        let t = Trajectory::new(vec![
            Transition { s, a: Action::Up, r: 1.0, s_next: g },
            Transition { s: g, a: Action::Left, r: 0.0, s_next: g },
        ]);
        let cfg = TrainConfig::default();
        let p = train_offline(&env, [&t], &cfg).unwrap();
        assert!((p.q[s][Action::Up.code()] - 1.0).abs() < 1e-9);
        let fresh = QTablePolicy::new(&env, cfg.offline_init, cfg.gamma, cfg.alpha, &mut rng::stream(cfg.seed, "offline", 0));
        for other in env.decision_states().into_iter().filter(|&x| x != s) {
            assert_eq!(p.q[other], fresh.q[other]);
        }
        let marker_only = Trajectory::new(vec![Transition { s: g, a: Action::Left, r: 0.0, s_next: g }]);
        assert!(matches!(train_offline(&env, [&marker_only], &TrainConfig::default()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn observed_bootstrap_ignores_unrecorded_actions() {
        let env = builtin_env("gridworld7").unwrap();
        let (a, b, g) = (env.index(2, 6), env.index(1, 6), env.index(0, 6));
        let t = Trajectory::new(vec![
            Transition { s: a, a: Action::Up, r: 0.0, s_next: b },
            Transition { s: b, a: Action::Up, r: 1.0, s_next: g },
            Transition { s: g, a: Action::Left, r: 0.0, s_next: g },
        ]);
        let p = train_offline(&env, [&t], &TrainConfig::default()).unwrap();
        assert!((p.q[a][Action::Up.code()] - 0.95).abs() < 1e-9);
    }

    #[test]
    fn perform_truncates() {
        let env = builtin_env("gridworld7").unwrap();
        let mut rng = rng::stream(0, "t", 0);
        let p = QTablePolicy::new(&env, QInit::Zero, 0.95, 0.1, &mut rng);
        let t = perform(&env, &p, 1, 0.0, &mut rng).unwrap();
        assert_eq!(t.transitions.len(), 2);
        assert_eq!(t.real().len(), 1);
    }
}
