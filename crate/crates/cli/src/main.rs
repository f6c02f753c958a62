use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trajattr::clustering::ClusterAssignment;
use trajattr::config::ExperimentConfig;
use trajattr::gridworld::Environment;
use trajattr::pipeline::{self, write_atomic};
use trajattr::trajstore::{self, TrajectoryDataset};
use trajattr::{analysis, attribution, encoder, Error, Result};

#[derive(Parser)]
#[command(name = "trajattr", version, about = "Trajectory attribution for offline tabular RL")]
struct Cli {
    /// Experiment config file; without it the built-in preset for --env is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in environment preset (ignored when --config is given).
    #[arg(long, global = true, default_value = "gridworld7")]
    env: String,
    /// Master seed for single-stage commands; for run-all it replaces the seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset file to read (or write, for gen-data).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Xmeans,
    Dbscan,
}

#[derive(Args, Clone, Default)]
struct ClusterFlags {
    #[arg(long)]
    cluster: Option<Algo>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
    #[arg(long)]
    kmin: Option<usize>,
    #[arg(long)]
    kmax: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train behaviour agents and roll out a trajectory dataset.
    GenData,
    /// Train the sequence autoencoder on the dataset.
    TrainEncoder,
    /// Embed every trajectory with the trained encoder.
    Embed,
    /// Cluster trajectory embeddings.
    Cluster(ClusterFlags),
    /// Train explanation policies and attribute every decision state.
    Attribute(ClusterFlags),
    /// Write the five metrics per policy.
    Metrics(ClusterFlags),
    /// Distance from attributed trajectories to the explained state.
    AnalyzeDistance(ClusterFlags),
    /// Behaviour purity of each cluster.
    Behaviors(ClusterFlags),
    /// Correlation between ISV and attribution frequency.
    Correlate(ClusterFlags),
    /// Build stimulus sets with answer keys.
    Stimuli(ClusterFlags),
    /// Render the grid and attributed trajectories as SVG.
    Render(ClusterFlags),
    /// Run every stage for every configured seed and emit tables.
    RunAll(ClusterFlags),
}

fn apply(cfg: &mut ExperimentConfig, f: &ClusterFlags) -> Result<()> {
    if let Some(a) = f.cluster {
        cfg.use_dbscan = matches!(a, Algo::Dbscan);
    }
    if let Some(e) = f.eps {
        cfg.dbscan.eps = e;
    }
    if let Some(m) = f.min_pts {
        cfg.dbscan.min_pts = m;
    }
    if let Some(k) = f.kmin {
        cfg.xmeans.k_min = k;
    }
    if let Some(k) = f.kmax {
        cfg.xmeans.k_max = k;
    }
    cfg.validate()
}

struct Ctx {
    cfg: ExperimentConfig,
    env: Environment,
    seed: u64,
    dir: PathBuf,
    dataset_path: PathBuf,
}

impl Ctx {
    fn read(&self, name: &str) -> Result<String> {
        let p = self.dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    }

    fn write(&self, name: &str, body: impl AsRef<[u8]>) -> Result<()> {
        let p = self.dir.join(name);
        write_atomic(&p, body.as_ref())?;
        println!("wrote {}", p.display());
        Ok(())
    }

    fn dataset(&self) -> Result<TrajectoryDataset> {
        trajstore::load_dataset(&self.dataset_path, &self.env)
    }

    fn embeddings(&self) -> Result<Vec<Vec<f64>>> {
        pipeline::parse_embeddings_csv(&self.read("embeddings.csv")?, "embeddings.csv")
    }

    fn assignment(&self) -> Result<ClusterAssignment> {
        match self.read("assignment.csv") {
            Ok(text) => pipeline::parse_assignment_csv(&text, "assignment.csv"),
            Err(_) => pipeline::stage_cluster(&self.cfg, &self.embeddings()?),
        }
    }
}

struct Downstream {
    dataset: TrajectoryDataset,
    assignment: ClusterAssignment,
    ms: pipeline::MetricsStage,
    policies: attribution::ExplanationPolicies,
}

fn downstream(ctx: &Ctx) -> Result<Downstream> {
    let dataset = ctx.dataset()?;
    let embeddings = ctx.embeddings()?;
    let assignment = ctx.assignment()?;
    if assignment.labels.len() != dataset.len() {
        return Err(Error::LengthMismatch(assignment.labels.len(), dataset.len()));
    }
    let policies = pipeline::stage_policies(&ctx.cfg, &ctx.env, &dataset, &assignment, ctx.seed)?;
    let ms = pipeline::stage_metrics(&ctx.env, &embeddings, &assignment, &policies)?;
    Ok(Downstream { dataset, assignment, ms, policies })
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            ExperimentConfig::parse(&text)?
        }
        None => {
            trajattr::gridworld::builtin_env(&cli.env)?;
            ExperimentConfig::preset(&cli.env)
        }
    };
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if cli.sequential {
        cfg.exec = trajattr::par::Exec::Sequential;
    }
    if let Cmd::RunAll(f) = &cli.cmd {
        apply(&mut cfg, f)?;
        if let Some(s) = cli.seed {
            cfg.seeds = vec![s];
        }
        let res = pipeline::run_pipeline(&cfg)?;
        print!("{}", res.tables.summary_text);
        println!("manifest: {}", cfg.out_dir.join("manifest.json").display());
        return Ok(());
    }
    let seed = cli.seed.unwrap_or(cfg.seeds[0]);
    let dir = cfg.out_dir.join(format!("seed_{seed}"));
    let dataset_path = cli.dataset.clone().unwrap_or_else(|| dir.join("dataset.jsonl"));
    let env = cfg.env()?;
    let mut ctx = Ctx { cfg, env, seed, dir, dataset_path };

    match &cli.cmd {
        Cmd::GenData => {
            let ds = pipeline::stage_dataset(&ctx.cfg, &ctx.env, seed)?;
            trajstore::save_dataset(&ds, &ctx.dataset_path)?;
            println!("wrote {} ({} trajectories)", ctx.dataset_path.display(), ds.len());
        }
        Cmd::TrainEncoder => {
            let ds = ctx.dataset()?;
            let (params, curve) = pipeline::stage_encoder(&ctx.cfg, &ctx.env, &ds, seed)?;
            ctx.write("encoder_params.bin", encoder::params_to_bytes(&params))?;
            ctx.write("encoder_loss.csv", pipeline::loss_csv(&curve))?;
        }
        Cmd::Embed => {
            let ds = ctx.dataset()?;
            let params = encoder::load_params(&ctx.dir.join("encoder_params.bin"))?;
            let emb = pipeline::stage_embed(&ctx.cfg, &ctx.env, &ds, &params)?;
            ctx.write("embeddings.csv", pipeline::embeddings_csv(&emb))?;
        }
        Cmd::Cluster(f) => {
            apply(&mut ctx.cfg, f)?;
            let a = pipeline::stage_cluster(&ctx.cfg, &ctx.embeddings()?)?;
            ctx.write("assignment.csv", a.to_csv())?;
            println!("k = {}", a.k);
        }
        Cmd::Attribute(f) => {
            apply(&mut ctx.cfg, f)?;
            let d = downstream(&ctx)?;
            ctx.write("policies.csv", pipeline::policies_csv(&d.policies))?;
            ctx.write("attributions.csv", pipeline::attributions_csv(&ctx.env, &d.ms.metrics))?;
        }
        Cmd::Metrics(f) => {
            apply(&mut ctx.cfg, f)?;
            let d = downstream(&ctx)?;
            ctx.write("data_embeddings.csv", &d.ms.data_embeddings_csv)?;
            ctx.write("metrics.csv", attribution::metrics_csv(&d.ms.metrics.rows))?;
        }
        Cmd::AnalyzeDistance(f) => {
            apply(&mut ctx.cfg, f)?;
            let d = downstream(&ctx)?;
            let rep = analysis::attribution_distance_report(&ctx.env, &d.dataset, &d.ms.metrics.attributions, ctx.cfg.analysis.distance_mode)?;
            ctx.write("distance.csv", rep.to_csv(&ctx.env))?;
        }
        Cmd::Behaviors(f) => {
            apply(&mut ctx.cfg, f)?;
            let ds = ctx.dataset()?;
            let a = ctx.assignment()?;
            let b = analysis::cluster_behavior_purity(&ctx.env, &ds, &a);
            ctx.write("behaviors.csv", pipeline::behaviors_csv(&b))?;
        }
        Cmd::Correlate(f) => {
            apply(&mut ctx.cfg, f)?;
            let d = downstream(&ctx)?;
            ctx.write("correlation.csv", pipeline::correlation_csv(&d.ms.metrics.rows))?;
        }
        Cmd::Stimuli(f) => {
            apply(&mut ctx.cfg, f)?;
            let d = downstream(&ctx)?;
            let st = pipeline::stage_stimuli(&ctx.cfg, &ctx.env, &d.dataset, &d.assignment, &d.ms.metrics, seed);
            ctx.write("stimuli/answer_key.csv", &st.answer_key)?;
            for (name, svg) in &st.files {
                ctx.write(name, svg)?;
            }
        }
        Cmd::Render(f) => {
            apply(&mut ctx.cfg, f)?;
            let d = downstream(&ctx)?;
            for (name, svg) in pipeline::stage_renders(&ctx.cfg, &ctx.env, &d.dataset, &d.ms.metrics) {
                ctx.write(&name, svg)?;
            }
        }
        Cmd::RunAll(_) => unreachable!(),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

