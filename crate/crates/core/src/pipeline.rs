//! End-to-end experiment runner with per-stage artifacts, content hashes
//! and a run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{self, ClusterBehavior, DistanceReport};
use crate::attribution::{self, ExplanationPolicies, Metrics, MetricsRow};
use crate::clustering::{self, ClusterAssignment};
use crate::config::ExperimentConfig;
use crate::encoder::{self, EncoderParams};
use crate::gridworld::{Environment, StateId};
use crate::par;
use crate::render::{self, Annotations};
use crate::rng;
use crate::trajstore::{self, TrajectoryDataset, Vocab};
use crate::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Mean-over-clusters row to compare against: ISV, ΔQ, action contrast, W1.
pub const TABLE3_REFERENCE: [f64; 4] = [0.3029, 0.0230, 0.0714, 0.1098];

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage { stage: name.to_string(), source: Box::new(other) },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_key: String,
    pub output_hash: String,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub created_unix: u64,
    pub q_init_online: String,
    pub q_init_offline: String,
    pub runs: Vec<SeedRecord>,
    pub summary_hash: Option<String>,
}

impl RunManifest {
    /// Stage hashes keyed by `seed/stage`, for comparing runs.
    pub fn stage_hashes(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for r in &self.runs {
            for (name, s) in &r.stages {
                out.insert(format!("{}/{name}", r.seed), s.output_hash.clone());
            }
        }
        if let Some(h) = &self.summary_hash {
            out.insert("summary".into(), h.clone());
        }
        out
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn key_of(parts: &[&str]) -> String {
    let mut buf = Vec::new();
    for p in parts {
        buf.extend_from_slice(&(p.len() as u64).to_le_bytes());
        buf.extend_from_slice(p.as_bytes());
    }
    rng::sha256_hex(&buf)
}

// ---- stages -------------------------------------------------------------

pub fn stage_dataset(cfg: &ExperimentConfig, env: &Environment, seed: u64) -> Result<TrajectoryDataset> {
    trajstore::generate_dataset(env, &cfg.data, rng::derive_seed(seed, "data", 0), cfg.exec)
}

pub fn tokenize_all(env: &Environment, dataset: &TrajectoryDataset) -> Result<Vec<Vec<usize>>> {
    dataset.trajectories.iter().map(|t| trajstore::tokenize(t, env)).collect()
}

pub fn stage_encoder(cfg: &ExperimentConfig, env: &Environment, dataset: &TrajectoryDataset, seed: u64) -> Result<(EncoderParams, Vec<f64>)> {
    let seqs = tokenize_all(env, dataset)?;
    let mut ecfg = cfg.encoder.clone();
    ecfg.seed = rng::derive_seed(seed, "encoder", 0);
    let init = encoder::init_params(Vocab::for_env(env).size(), ecfg.h, ecfg.e, ecfg.seed)?;
    encoder::train_autoencoder(&init, &seqs, &ecfg, cfg.exec)
}

pub fn stage_embed(cfg: &ExperimentConfig, env: &Environment, dataset: &TrajectoryDataset, params: &EncoderParams) -> Result<Vec<Vec<f64>>> {
    let seqs = tokenize_all(env, dataset)?;
    par::map(cfg.exec, &seqs, |s| params.embed(s)).into_iter().collect()
}

pub fn stage_cluster(cfg: &ExperimentConfig, embeddings: &[Vec<f64>]) -> Result<ClusterAssignment> {
    if cfg.use_dbscan {
        clustering::dbscan(embeddings, &cfg.dbscan)
    } else {
        clustering::xmeans(embeddings, &cfg.xmeans)
    }
}

pub fn offline_config(cfg: &ExperimentConfig, seed: u64) -> crate::dynaq::TrainConfig {
    let mut t = cfg.data.train.clone();
    t.seed = rng::derive_seed(seed, "offline", 0);
    t
}

pub fn stage_policies(cfg: &ExperimentConfig, env: &Environment, dataset: &TrajectoryDataset, assignment: &ClusterAssignment, seed: u64) -> Result<ExplanationPolicies> {
    attribution::train_explanation_policies(env, dataset, assignment, &offline_config(cfg, seed), cfg.exec)
}

pub struct MetricsStage {
    pub metrics: Metrics,
    pub w_dists: BTreeMap<i64, f64>,
    pub data_embeddings_csv: String,
}

pub fn stage_metrics(env: &Environment, embeddings: &[Vec<f64>], assignment: &ClusterAssignment, policies: &ExplanationPolicies) -> Result<MetricsStage> {
    let (full, per, w_dists) = attribution::complement_distances(embeddings, assignment)?;
    let metrics = attribution::compute_metrics(policies, &w_dists, assignment, &env.decision_states(), env.start())?;
    let mut csv = String::from("removed_cluster");
    for i in 0..full.probs.len() {
        write!(csv, ",p_{i}").unwrap();
    }
    csv.push('\n');
    let mut row = |name: String, p: &[f64]| {
        csv.push_str(&name);
        for x in p {
            write!(csv, ",{x}").unwrap();
        }
        csv.push('\n');
    };
    row("none".into(), &full.probs);
    for (j, de) in &per {
        row(j.to_string(), &de.probs);
    }
    Ok(MetricsStage { metrics, w_dists, data_embeddings_csv: csv })
}

// ---- CSV helpers ----------------------------------------------------------

pub fn embeddings_csv(emb: &[Vec<f64>]) -> String {
    let h = emb.first().map_or(0, Vec::len);
    let mut out = String::from("traj_index");
    for i in 0..h {
        write!(out, ",v_{i}").unwrap();
    }
    out.push('\n');
    for (i, e) in emb.iter().enumerate() {
        out.push_str(&i.to_string());
        for x in e {
            write!(out, ",{x}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn csv_rows(text: &str, path: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut lines = text.lines().enumerate();
    lines.next().ok_or_else(|| Error::Parse { path: path.into(), line: 1, msg: "missing header".into() })?;
    Ok(lines.filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, l.split(',').map(|s| s.trim().to_string()).collect())).collect())
}

pub fn parse_embeddings_csv(text: &str, path: &str) -> Result<Vec<Vec<f64>>> {
    csv_rows(text, path)?
        .into_iter()
        .map(|(line, cols)| {
            cols[1..]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| Error::Parse { path: path.into(), line, msg: format!("bad number `{c}`") }))
                .collect()
        })
        .collect()
}

pub fn parse_assignment_csv(text: &str, path: &str) -> Result<ClusterAssignment> {
    let labels: Vec<i64> = csv_rows(text, path)?
        .into_iter()
        .map(|(line, cols)| {
            cols.get(1)
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| Error::Parse { path: path.into(), line, msg: "bad label".into() })
        })
        .collect::<Result<_>>()?;
    let k = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    Ok(ClusterAssignment { labels, k, centroids: None })
}

pub fn policies_csv(p: &ExplanationPolicies) -> String {
    let mut out = String::from("policy,state_index,q_left,q_up,q_right,q_down\n");
    let mut dump = |name: &str, q: &crate::dynaq::QTablePolicy| {
        for (s, row) in q.q.iter().enumerate() {
            writeln!(out, "{name},{s},{},{},{},{}", row[0], row[1], row[2], row[3]).unwrap();
        }
    };
    dump("orig", &p.original);
    for (j, q) in &p.clusters {
        dump(&j.to_string(), q);
    }
    out
}

pub fn attributions_csv(env: &Environment, m: &Metrics) -> String {
    let mut out = String::from("state,row,col,original_action,candidates,attributed_cluster,n_attributed\n");
    for a in &m.attributions {
        let (r, c) = env.coords(a.state);
        let cands: Vec<String> = a.candidate_clusters.iter().map(i64::to_string).collect();
        let attr = a.attributed_cluster.map_or("none".to_string(), |j| j.to_string());
        writeln!(out, "{},{r},{c},{:?},{},{attr},{}", a.state, a.original_action, cands.join(" "), a.attributed_trajectories.len()).unwrap();
    }
    out
}

pub fn behaviors_csv(b: &BTreeMap<i64, ClusterBehavior>) -> String {
    let mut out = String::from("cluster,size,dominant,purity,pure,uniform_length\n");
    for (j, cb) in b {
        writeln!(out, "{j},{},{},{},{},{}", cb.size, cb.dominant.name(), cb.purity, cb.purity >= 0.9, cb.uniform_length).unwrap();
    }
    out
}

pub fn correlation_csv(rows: &[MetricsRow]) -> String {
    match analysis::correlation_isv_frequency(rows) {
        Ok((p, s)) => format!("pearson,spearman\n{p},{s}\n"),
        Err(e) => format!("pearson,spearman\nundefined,undefined\n# {e}\n"),
    }
}

pub fn loss_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        writeln!(out, "{i},{l}").unwrap();
    }
    out
}

// ---- analyses -------------------------------------------------------------

pub struct Stimuli {
    pub answer_key: String,
    pub files: Vec<(String, String)>,
}

/// One stimulus set per configured state, rendered one trajectory per file.
pub fn stage_stimuli(cfg: &ExperimentConfig, env: &Environment, dataset: &TrajectoryDataset, assignment: &ClusterAssignment, metrics: &Metrics, seed: u64) -> Stimuli {
    let mut key = String::from("state,row,col,option_order,correct_options,status\n");
    let mut files = Vec::new();
    for (i, &(r, c)) in cfg.analysis.stimulus_states.iter().enumerate() {
        let s = env.index(r, c);
        let found = metrics.attributions.iter().find(|a| a.state == s);
        let mut rng = rng::stream(seed, "stimulus", i as u64);
        let set = match found {
            Some(a) => analysis::build_stimulus(a, assignment, &mut rng),
            None => Err(Error::Validation("not a decision state".into())),
        };
        match set {
            Ok(st) => {
                let order: Vec<String> = st.option_order.iter().map(usize::to_string).collect();
                let correct: Vec<String> = st.correct_options.iter().map(usize::to_string).collect();
                writeln!(key, "{s},{r},{c},{},{},ok", order.join(" "), correct.join(" ")).unwrap();
                for (k, &t) in st.option_order.iter().enumerate() {
                    let ann = Annotations { highlight: Some(s), title: Some(format!("state ({r},{c}) option {k}")) };
                    let svg = render::render_grid(env, &[&dataset.trajectories[t]], &ann).expect("dataset trajectories are on the grid");
                    files.push((format!("stimuli/state_{r}_{c}_option_{k}.svg"), svg));
                }
            }
            Err(e) => writeln!(key, "{s},{r},{c},,,skipped: {e}").unwrap(),
        }
    }
    Stimuli { answer_key: key, files }
}

/// Bare grid plus, for every stimulus state, up to four of its attributed trajectories.
pub fn stage_renders(cfg: &ExperimentConfig, env: &Environment, dataset: &TrajectoryDataset, metrics: &Metrics) -> Vec<(String, String)> {
    let mut out = vec![(
        "renders/grid.svg".to_string(),
        render::render_grid(env, &[], &Annotations { highlight: None, title: Some(env.name().to_string()) }).unwrap(),
    )];
    for &(r, c) in &cfg.analysis.stimulus_states {
        let s = env.index(r, c);
        if let Some(a) = metrics.attributions.iter().find(|a| a.state == s) {
            let trajs: Vec<_> = a.attributed_trajectories.iter().take(4).map(|&i| &dataset.trajectories[i]).collect();
            let title = match a.attributed_cluster {
                Some(j) => format!("state ({r},{c}) action {:?} attributed to cluster {j}", a.original_action),
                None => format!("state ({r},{c}) action {:?} not attributed", a.original_action),
            };
            let ann = Annotations { highlight: Some(s), title: Some(title) };
            out.push((format!("renders/attribution_{r}_{c}.svg"), render::render_grid(env, &trajs, &ann).unwrap()));
        }
    }
    out
}

// ---- full run -------------------------------------------------------------

pub struct SeedOutcome {
    pub seed: u64,
    pub dataset: TrajectoryDataset,
    pub loss_curve: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
    pub assignment: ClusterAssignment,
    pub policies: ExplanationPolicies,
    pub metrics: Metrics,
    pub distance: DistanceReport,
    pub behaviors: BTreeMap<i64, ClusterBehavior>,
    pub record: SeedRecord,
}

struct Recorder<'a> {
    dir: &'a Path,
    root: &'a Path,
    record: SeedRecord,
}

impl Recorder<'_> {
    fn put(&mut self, stage: &str, input_key: &str, files: &[(String, Vec<u8>)]) -> Result<String> {
        let mut all = Vec::new();
        let mut names = Vec::new();
        for (name, bytes) in files {
            let path = self.dir.join(name);
            write_atomic(&path, bytes)?;
            all.extend_from_slice(&(name.len() as u64).to_le_bytes());
            all.extend_from_slice(name.as_bytes());
            all.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            all.extend_from_slice(bytes);
            names.push(path.strip_prefix(self.root).unwrap_or(&path).display().to_string());
        }
        let hash = rng::sha256_hex(&all);
        self.record.stages.insert(
            stage.to_string(),
            StageRecord { input_key: input_key.to_string(), output_hash: hash.clone(), files: names },
        );
        Ok(hash)
    }
}

/// Returns the cached file when a previous run recorded the same input key
/// and the file on disk still matches its recorded hash.
fn cached(prev: Option<&SeedRecord>, stage: &str, key: &str, root: &Path) -> Option<Vec<u8>> {
    let rec = prev?.stages.get(stage)?;
    if rec.input_key != key || rec.files.len() != 1 {
        return None;
    }
    let bytes = std::fs::read(root.join(&rec.files[0])).ok()?;
    let name = Path::new(&rec.files[0]).file_name()?.to_string_lossy().into_owned();
    let mut all = Vec::new();
    all.extend_from_slice(&(name.len() as u64).to_le_bytes());
    all.extend_from_slice(name.as_bytes());
    all.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    all.extend_from_slice(&bytes);
    (rng::sha256_hex(&all) == rec.output_hash).then_some(bytes)
}

pub fn run_seed(cfg: &ExperimentConfig, env: &Environment, seed: u64, root: &Path, prev: Option<&SeedRecord>) -> Result<SeedOutcome> {
    let dir = root.join(format!("seed_{seed}"));
    let mut rec = Recorder { dir: &dir, root, record: SeedRecord { seed, stages: BTreeMap::new() } };
    let base = key_of(&[TOOL_VERSION, &env.spec().to_text(), &seed.to_string()]);

    let data_key = key_of(&[&base, &serde_json::to_string(&cfg.data)?]);
    let dataset = match cached(prev, "dataset", &data_key, root) {
        Some(bytes) => stage("dataset", trajstore::parse_dataset(&String::from_utf8_lossy(&bytes), "dataset.jsonl", env))?,
        None => stage("dataset", stage_dataset(cfg, env, seed))?,
    };
    let data_hash = rec.put("dataset", &data_key, &[("dataset.jsonl".into(), trajstore::dataset_to_string(&dataset).into_bytes())])?;

    let enc_key = key_of(&[&data_hash, &serde_json::to_string(&cfg.encoder)?]);
    let (params, loss_curve) = match cached(prev, "params", &enc_key, root) {
        Some(bytes) => {
            let loss = std::fs::read_to_string(dir.join("encoder_loss.csv")).unwrap_or_default();
            let curve = loss.lines().skip(1).filter_map(|l| l.split(',').nth(1)?.parse().ok()).collect();
            (stage("train-encoder", encoder::params_from_bytes(&bytes))?, curve)
        }
        None => stage("train-encoder", stage_encoder(cfg, env, &dataset, seed))?,
    };
    let params_hash = rec.put("params", &enc_key, &[("encoder_params.bin".into(), encoder::params_to_bytes(&params))])?;
    rec.put("loss", &enc_key, &[("encoder_loss.csv".into(), loss_csv(&loss_curve).into_bytes())])?;

    let embeddings = stage("embed", stage_embed(cfg, env, &dataset, &params))?;
    let emb_hash = rec.put("embeddings", &params_hash, &[("embeddings.csv".into(), embeddings_csv(&embeddings).into_bytes())])?;

    let cluster_key = key_of(&[&emb_hash, &format!("{:?}{:?}{}", cfg.xmeans, cfg.dbscan, cfg.use_dbscan)]);
    let assignment = stage("cluster", stage_cluster(cfg, &embeddings))?;
    let asg_hash = rec.put("assignment", &cluster_key, &[("assignment.csv".into(), assignment.to_csv().into_bytes())])?;

    let pol_key = key_of(&[&asg_hash, &data_hash, &serde_json::to_string(&cfg.data.train)?]);
    let policies = stage("attribute", stage_policies(cfg, env, &dataset, &assignment, seed))?;
    let pol_hash = rec.put("policies", &pol_key, &[("policies.csv".into(), policies_csv(&policies).into_bytes())])?;

    let ms = stage("metrics", stage_metrics(env, &embeddings, &assignment, &policies))?;
    let met_key = key_of(&[&pol_hash, &emb_hash]);
    rec.put("data_embeddings", &met_key, &[("data_embeddings.csv".into(), ms.data_embeddings_csv.clone().into_bytes())])?;
    rec.put("metrics", &met_key, &[("metrics.csv".into(), attribution::metrics_csv(&ms.metrics.rows).into_bytes())])?;
    let attr_hash = rec.put("attributions", &met_key, &[("attributions.csv".into(), attributions_csv(env, &ms.metrics).into_bytes())])?;

    let distance = stage(
        "analyze-distance",
        analysis::attribution_distance_report(env, &dataset, &ms.metrics.attributions, cfg.analysis.distance_mode),
    )?;
    rec.put("distance", &attr_hash, &[("distance.csv".into(), distance.to_csv(env).into_bytes())])?;
    let behaviors = analysis::cluster_behavior_purity(env, &dataset, &assignment);
    rec.put("behaviors", &asg_hash, &[("behaviors.csv".into(), behaviors_csv(&behaviors).into_bytes())])?;
    rec.put("correlation", &attr_hash, &[("correlation.csv".into(), correlation_csv(&ms.metrics.rows).into_bytes())])?;

    let stim = stage_stimuli(cfg, env, &dataset, &assignment, &ms.metrics, seed);
    let mut files = vec![("stimuli/answer_key.csv".to_string(), stim.answer_key.into_bytes())];
    files.extend(stim.files.into_iter().map(|(n, s)| (n, s.into_bytes())));
    rec.put("stimuli", &attr_hash, &files)?;
    if cfg.analysis.render {
        let renders: Vec<(String, Vec<u8>)> =
            stage_renders(cfg, env, &dataset, &ms.metrics).into_iter().map(|(n, s)| (n, s.into_bytes())).collect();
        rec.put("renders", &attr_hash, &renders)?;
    }
    Ok(SeedOutcome {
        seed,
        dataset,
        loss_curve,
        embeddings,
        assignment,
        policies,
        metrics: ms.metrics,
        distance,
        behaviors,
        record: rec.record,
    })
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

pub struct Tables {
    /// Per seed, per cluster rows.
    pub per_seed_csv: String,
    /// Mean and sd over seeds, by cluster label.
    pub summary_csv: String,
    /// Human-readable summary with deltas against the reference row.
    pub summary_text: String,
    /// Mean over seeds of each seed's mean-over-clusters (ISV, ΔQ, contrast, W1).
    pub mean_clusters: [f64; 4],
}

pub fn emit_tables(per_seed: &[(u64, Vec<MetricsRow>)]) -> Result<Tables> {
    if per_seed.is_empty() || per_seed.iter().all(|(_, r)| r.is_empty()) {
        return Err(Error::Validation("no metrics to tabulate".into()));
    }
    let mut per_seed_csv = String::from("seed,cluster,isv,delta_q,action_contrast,w_dist,attribution_freq\n");
    let mut by_label: BTreeMap<Option<i64>, Vec<&MetricsRow>> = BTreeMap::new();
    let mut seed_means = Vec::new();
    for (seed, rows) in per_seed {
        for r in rows {
            let c = r.cluster.map_or("orig".to_string(), |j| j.to_string());
            writeln!(per_seed_csv, "{seed},{c},{},{},{},{},{}", r.isv, r.delta_q, r.action_contrast, r.w_dist, r.attribution_freq).unwrap();
            by_label.entry(r.cluster).or_default().push(r);
        }
        let cl: Vec<&MetricsRow> = rows.iter().filter(|r| r.cluster.is_some()).collect();
        let n = cl.len().max(1) as f64;
        seed_means.push([
            cl.iter().map(|r| r.isv).sum::<f64>() / n,
            cl.iter().map(|r| r.delta_q).sum::<f64>() / n,
            cl.iter().map(|r| r.action_contrast).sum::<f64>() / n,
            cl.iter().map(|r| r.w_dist).sum::<f64>() / n,
        ]);
    }
    let mut summary_csv = String::from(
        "cluster,isv_mean,isv_sd,delta_q_mean,delta_q_sd,action_contrast_mean,action_contrast_sd,w_dist_mean,w_dist_sd,attribution_freq_mean,attribution_freq_sd,n_seeds\n",
    );
    for (label, rows) in &by_label {
        let c = label.map_or("orig".to_string(), |j| j.to_string());
        let cols: Vec<(f64, f64)> = [
            rows.iter().map(|r| r.isv).collect::<Vec<_>>(),
            rows.iter().map(|r| r.delta_q).collect(),
            rows.iter().map(|r| r.action_contrast).collect(),
            rows.iter().map(|r| r.w_dist).collect(),
            rows.iter().map(|r| r.attribution_freq).collect(),
        ]
        .iter()
        .map(|v| mean_sd(v))
        .collect();
        write!(summary_csv, "{c}").unwrap();
        for (m, s) in cols {
            write!(summary_csv, ",{m},{s}").unwrap();
        }
        writeln!(summary_csv, ",{}", rows.len()).unwrap();
    }
    let mut mean_clusters = [0.0; 4];
    let mut sds = [0.0; 4];
    for i in 0..4 {
        let col: Vec<f64> = seed_means.iter().map(|m| m[i]).collect();
        let (m, s) = mean_sd(&col);
        mean_clusters[i] = m;
        sds[i] = s;
    }
    let orig: Vec<f64> = by_label.get(&None).map(|v| v.iter().map(|r| r.isv).collect()).unwrap_or_default();
    let (om, os) = mean_sd(&orig);
    let mut text = String::new();
    writeln!(text, "seeds: {}", per_seed.len()).unwrap();
    writeln!(text, "original policy ISV: {om:.4} ± {os:.1e}").unwrap();
    writeln!(text, "{:<16} {:>18} {:>10} {:>10}", "metric", "mean clusters", "reference", "|delta|").unwrap();
    for (i, name) in ["ISV", "delta Q", "action contrast", "W1 distance"].iter().enumerate() {
        writeln!(
            text,
            "{:<16} {:>9.4} ± {:<6.1e} {:>10.4} {:>10.4}",
            name,
            mean_clusters[i],
            sds[i],
            TABLE3_REFERENCE[i],
            (mean_clusters[i] - TABLE3_REFERENCE[i]).abs()
        )
        .unwrap();
    }
    Ok(Tables { per_seed_csv, summary_csv, summary_text: text, mean_clusters })
}

pub struct RunResult {
    pub manifest: RunManifest,
    pub outcomes: Vec<SeedOutcome>,
    pub tables: Tables,
}

fn manifest_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("manifest.json")
}

/// Runs every stage for every seed, writing artifacts under `cfg.out_dir`.
/// On failure the manifest of completed seeds is written before returning.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let env = cfg.env()?;
    let root = cfg.out_dir.clone();
    let prev = RunManifest::load(&manifest_path(cfg)).ok();
    let config_text = cfg.to_text();
    let mut manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: rng::sha256_hex(config_text.as_bytes()),
        config: config_text,
        seeds: cfg.seeds.clone(),
        created_unix: std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        q_init_online: format!("{:?}", cfg.data.train.online_init),
        q_init_offline: format!("{:?}", cfg.data.train.offline_init),
        runs: Vec::new(),
        summary_hash: None,
    };
    write_atomic(&root.join("config.ini"), manifest.config.as_bytes())?;
    let mut outcomes = Vec::new();
    for &seed in &cfg.seeds {
        let prev_rec = prev.as_ref().and_then(|m| m.runs.iter().find(|r| r.seed == seed));
        match run_seed(cfg, &env, seed, &root, prev_rec) {
            Ok(o) => {
                manifest.runs.push(o.record.clone());
                outcomes.push(o);
            }
            Err(e) => {
                write_atomic(&manifest_path(cfg), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
                return Err(e);
            }
        }
    }
    let per_seed: Vec<(u64, Vec<MetricsRow>)> = outcomes.iter().map(|o| (o.seed, o.metrics.rows.clone())).collect();
    let tables = stage("metrics", emit_tables(&per_seed))?;
    let mut summary = Vec::new();
    for (name, body) in [
        ("metrics_seeds.csv", &tables.per_seed_csv),
        ("metrics_summary.csv", &tables.summary_csv),
        ("summary.txt", &tables.summary_text),
    ] {
        write_atomic(&root.join(name), body.as_bytes())?;
        summary.extend_from_slice(body.as_bytes());
    }
    manifest.summary_hash = Some(rng::sha256_hex(&summary));
    write_atomic(&manifest_path(cfg), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(RunResult { manifest, outcomes, tables })
}

/// Index of a state given as `(row, col)`.
pub fn state_at(env: &Environment, cell: (usize, usize)) -> StateId {
    env.index(cell.0, cell.1)
}
