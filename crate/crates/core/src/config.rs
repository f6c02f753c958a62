//! Experiment configuration: a sectioned `key = value` text format.
//!
//! ```text
//! [run]
//! seeds = 0,1,2,3,4
//! out = runs/gridworld7
//!
//! [env]
//! name = gridworld7
//!
//! [cluster]
//! algorithm = xmeans
//! k_max = 12
//! ```
//!
//! Unset keys keep the preset for the named env. A `[grid]` section takes
//! the grid text format and replaces the built-in layout.

use std::path::PathBuf;

use crate::analysis::DistanceMode;
use crate::clustering::{DbscanConfig, XMeansConfig};
use crate::dynaq::{Bootstrap, QInit};
use crate::encoder::EncoderTrainConfig;
use crate::gridworld::{self, Cell, Environment, GridSpec};
use crate::par::Exec;
use crate::trajstore::GenConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ClusterAlgo {
    XMeans(XMeansConfig),
    Dbscan(DbscanConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub distance_mode: DistanceMode,
    pub stimulus_states: Vec<Cell>,
    pub render: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env_name: String,
    pub grid: Option<GridSpec>,
    pub data: GenConfig,
    pub encoder: EncoderTrainConfig,
    pub xmeans: XMeansConfig,
    pub dbscan: DbscanConfig,
    pub use_dbscan: bool,
    pub analysis: AnalysisConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub exec: Exec,
}

impl ExperimentConfig {
    /// Defaults tuned per built-in env; unknown names fall back to the 7x7 set.
    pub fn preset(env_name: &str) -> ExperimentConfig {
        let mut data = GenConfig::default();
        let mut xmeans = XMeansConfig::default();
        let mut stimulus_states = vec![(1, 1), (5, 2)];
        match env_name {
            "fourroom11" => {
                data.n_traj = 300;
                data.positive_quota = 250;
                data.negative_quota = 50;
                data.max_traj_len = 100;
                data.train.episodes = 150;
                xmeans.k_max = 20;
                stimulus_states = vec![(2, 2), (8, 7)];
            }
            _ => {
                data.n_traj = 60;
                data.positive_quota = 54;
                data.negative_quota = 6;
                data.train.episodes = 60;
                xmeans.k_max = 10;
            }
        }
        ExperimentConfig {
            env_name: env_name.to_string(),
            grid: None,
            data,
            encoder: EncoderTrainConfig::default(),
            xmeans,
            dbscan: DbscanConfig::default(),
            use_dbscan: false,
            analysis: AnalysisConfig { distance_mode: DistanceMode::PassThroughZero, stimulus_states, render: true },
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from(format!("runs/{env_name}")),
            exec: Exec::Parallel,
        }
    }

    pub fn env(&self) -> Result<Environment> {
        match &self.grid {
            Some(spec) => gridworld::build_env(&self.env_name, spec.clone()),
            None => gridworld::builtin_env(&self.env_name),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let env = self.env()?;
        self.data.validate()?;
        self.encoder.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Validation("no seeds".into()));
        }
        if self.xmeans.k_min == 0 || self.xmeans.k_min > self.xmeans.k_max {
            return Err(Error::Validation("need 1 ≤ k_min ≤ k_max".into()));
        }
        if !(self.dbscan.eps > 0.0) || self.dbscan.min_pts == 0 {
            return Err(Error::Validation("need eps > 0 and min_pts ≥ 1".into()));
        }
        for &(r, c) in &self.analysis.stimulus_states {
            if r >= env.height() || c >= env.width() {
                return Err(Error::Validation(format!("stimulus state {r},{c} outside the grid")));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let sections = split_sections(text)?;
        let env_name = sections
            .iter()
            .filter(|s| s.name == "env")
            .flat_map(|s| s.entries.iter())
            .find(|e| e.key == "name")
            .map(|e| e.value.clone())
            .unwrap_or_else(|| "gridworld7".to_string());
        let mut cfg = ExperimentConfig::preset(&env_name);
        for sec in &sections {
            if sec.name == "grid" {
                let body: String = sec.entries.iter().map(|e| format!("{} = {}\n", e.key, e.value)).collect();
                cfg.grid = Some(GridSpec::parse(&body)?);
                continue;
            }
            for e in &sec.entries {
                cfg.set(&sec.name, &e.key, &e.value).map_err(|msg| Error::Parse {
                    path: "<config>".into(),
                    line: e.line,
                    msg,
                })?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for `{key}`"))
        }
        fn boolean(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(format!("bad boolean `{v}` for `{key}`")),
            }
        }
        fn init(key: &str, v: &str) -> std::result::Result<QInit, String> {
            match v {
                "uniform" => Ok(QInit::Uniform),
                "zero" => Ok(QInit::Zero),
                _ => Err(format!("bad init `{v}` for `{key}`")),
            }
        }
        let d = &mut self.data;
        let t = &mut d.train;
        match (section, key) {
            ("run", "seeds") => {
                self.seeds = v.split(',').map(|s| num(key, s.trim())).collect::<std::result::Result<_, _>>()?
            }
            ("run", "out") => self.out_dir = PathBuf::from(v),
            ("run", "parallel") => self.exec = if boolean(key, v)? { Exec::Parallel } else { Exec::Sequential },
            ("env", "name") => self.env_name = v.to_string(),
            ("data", "n_traj") => d.n_traj = num(key, v)?,
            ("data", "positive_quota") => d.positive_quota = num(key, v)?,
            ("data", "negative_quota") => d.negative_quota = num(key, v)?,
            ("data", "traj_per_agent") => d.traj_per_agent = num(key, v)?,
            ("data", "max_traj_len") => d.max_traj_len = num(key, v)?,
            ("data", "perform_epsilon") => d.perform_epsilon = num(key, v)?,
            ("data", "negative_epsilon") => d.negative_epsilon = num(key, v)?,
            ("data", "retry_budget") => d.retry_budget = num(key, v)?,
            ("dynaq", "episodes") => t.episodes = num(key, v)?,
            ("dynaq", "alpha") => t.alpha = num(key, v)?,
            ("dynaq", "gamma") => t.gamma = num(key, v)?,
            ("dynaq", "eval_epochs") => t.eval_epochs = num(key, v)?,
            ("dynaq", "epsilon") => t.epsilon = num(key, v)?,
            ("dynaq", "max_episode_steps") => t.max_episode_steps = num(key, v)?,
            ("dynaq", "offline_sweeps") => t.offline_sweeps = num(key, v)?,
            ("dynaq", "offline_tol") => t.offline_tol = num(key, v)?,
            ("dynaq", "online_init") => t.online_init = init(key, v)?,
            ("dynaq", "offline_init") => t.offline_init = init(key, v)?,
            ("dynaq", "offline_bootstrap") => {
                t.offline_bootstrap = match v {
                    "valid" => Bootstrap::Valid,
                    "observed" => Bootstrap::Observed,
                    _ => return Err(format!("bad bootstrap `{v}` for `{key}`")),
                }
            }
            ("encoder", "h") => self.encoder.h = num(key, v)?,
            ("encoder", "e") => self.encoder.e = num(key, v)?,
            ("encoder", "epochs") => self.encoder.epochs = num(key, v)?,
            ("encoder", "learning_rate") => self.encoder.learning_rate = num(key, v)?,
            ("encoder", "batch_size") => self.encoder.batch_size = num(key, v)?,
            ("encoder", "clip_norm") => self.encoder.clip_norm = num(key, v)?,
            ("cluster", "algorithm") => {
                self.use_dbscan = match v {
                    "xmeans" => false,
                    "dbscan" => true,
                    _ => return Err(format!("unknown algorithm `{v}`")),
                }
            }
            ("cluster", "k_min") => self.xmeans.k_min = num(key, v)?,
            ("cluster", "k_max") => self.xmeans.k_max = num(key, v)?,
            ("cluster", "center_seed") => self.xmeans.center_seed = num(key, v)?,
            ("cluster", "algo_seed") => self.xmeans.algo_seed = num(key, v)?,
            ("cluster", "max_iters") => self.xmeans.max_iters = num(key, v)?,
            ("cluster", "eps") => self.dbscan.eps = num(key, v)?,
            ("cluster", "min_pts") => self.dbscan.min_pts = num(key, v)?,
            ("analysis", "distance_mode") => {
                self.analysis.distance_mode = match v {
                    "pass-through-zero" => DistanceMode::PassThroughZero,
                    "mean-all-points" => DistanceMode::MeanAllPoints,
                    _ => return Err(format!("unknown distance mode `{v}`")),
                }
            }
            ("analysis", "stimulus_states") => {
                self.analysis.stimulus_states = v
                    .split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        let (r, c) = s.split_once(',').ok_or(format!("bad cell `{s}`"))?;
                        Ok((num(key, r.trim())?, num(key, c.trim())?))
                    })
                    .collect::<std::result::Result<_, String>>()?
            }
            ("analysis", "render") => self.analysis.render = boolean(key, v)?,
            _ => return Err(format!("unknown key `{key}` in [{section}]")),
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.data.train;
        let d = &self.data;
        let init = |i: QInit| if i == QInit::Uniform { "uniform" } else { "zero" };
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let cells: Vec<String> = self.analysis.stimulus_states.iter().map(|(r, c)| format!("{r},{c}")).collect();
        let mut s = format!(
            "[run]\nseeds = {}\nout = {}\nparallel = {}\n\n[env]\nname = {}\n\n",
            seeds.join(","),
            self.out_dir.display(),
            self.exec == Exec::Parallel,
            self.env_name
        );
        if let Some(g) = &self.grid {
            s.push_str("[grid]\n");
            s.push_str(&g.to_text());
            s.push('\n');
        }
        s.push_str(&format!(
            "[data]\nn_traj = {}\npositive_quota = {}\nnegative_quota = {}\ntraj_per_agent = {}\nmax_traj_len = {}\nperform_epsilon = {}\nnegative_epsilon = {}\nretry_budget = {}\n\n",
            d.n_traj, d.positive_quota, d.negative_quota, d.traj_per_agent, d.max_traj_len, d.perform_epsilon, d.negative_epsilon, d.retry_budget
        ));
        s.push_str(&format!(
            "[dynaq]\nepisodes = {}\nalpha = {}\ngamma = {}\neval_epochs = {}\nepsilon = {}\nmax_episode_steps = {}\noffline_sweeps = {}\noffline_tol = {:e}\nonline_init = {}\noffline_init = {}\noffline_bootstrap = {}\n\n",
            t.episodes,
            t.alpha,
            t.gamma,
            t.eval_epochs,
            t.epsilon,
            t.max_episode_steps,
            t.offline_sweeps,
            t.offline_tol,
            init(t.online_init),
            init(t.offline_init),
            if t.offline_bootstrap == Bootstrap::Observed { "observed" } else { "valid" }
        ));
        let e = &self.encoder;
        s.push_str(&format!(
            "[encoder]\nh = {}\ne = {}\nepochs = {}\nlearning_rate = {}\nbatch_size = {}\nclip_norm = {}\n\n",
            e.h, e.e, e.epochs, e.learning_rate, e.batch_size, e.clip_norm
        ));
        let x = &self.xmeans;
        s.push_str(&format!(
            "[cluster]\nalgorithm = {}\nk_min = {}\nk_max = {}\ncenter_seed = {}\nalgo_seed = {}\nmax_iters = {}\neps = {}\nmin_pts = {}\n\n",
            if self.use_dbscan { "dbscan" } else { "xmeans" },
            x.k_min, x.k_max, x.center_seed, x.algo_seed, x.max_iters, self.dbscan.eps, self.dbscan.min_pts
        ));
        s.push_str(&format!(
            "[analysis]\ndistance_mode = {}\nstimulus_states = {}\nrender = {}\n",
            match self.analysis.distance_mode {
                DistanceMode::PassThroughZero => "pass-through-zero",
                DistanceMode::MeanAllPoints => "mean-all-points",
            },
            cells.join("; "),
            self.analysis.render
        ));
        s
    }
}

struct Entry {
    key: String,
    value: String,
    line: usize,
}

struct Section {
    name: String,
    entries: Vec<Entry>,
}

fn split_sections(text: &str) -> Result<Vec<Section>> {
    let mut out = vec![Section { name: String::new(), entries: Vec::new() }];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            out.push(Section { name: name.trim().to_string(), entries: Vec::new() });
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: "<config>".into(),
            line: i + 1,
            msg: "expected key = value".into(),
        })?;
        out.last_mut().unwrap().entries.push(Entry { key: k.trim().to_string(), value: v.trim().to_string(), line: i + 1 });
    }
    if let Some(e) = out[0].entries.first() {
        return Err(Error::Parse { path: "<config>".into(), line: e.line, msg: "key outside any section".into() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for name in ["gridworld7", "fourroom11"] {
            let mut cfg = ExperimentConfig::preset(name);
            cfg.use_dbscan = true;
            cfg.grid = Some(GridSpec::fourroom11());
            assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn overrides_and_errors() {
        let cfg = ExperimentConfig::parse("[env]\nname = gridworld7\n[cluster]\nk_max = 9\n[run]\nseeds = 3\n").unwrap();
        assert_eq!(cfg.xmeans.k_max, 9);
        assert_eq!(cfg.seeds, vec![3]);
        assert!(matches!(ExperimentConfig::parse("[env]\nname = atlantis\n"), Err(Error::UnknownEnv(_))));
        assert!(matches!(ExperimentConfig::parse("[dynaq]\nalpha = x\n"), Err(Error::Parse { line: 2, .. })));
        assert!(ExperimentConfig::parse("[dynaq]\nwhat = 1\n").is_err());
    }
}
