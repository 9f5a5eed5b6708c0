//! `bucketrl` command line. Exit codes: 0 success, 2 usage error, 1 runtime
//! error.

use std::error::Error;
use std::ffi::OsString;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use bucketrl_core::encoder::{train_autoencoder, EncoderRole, LatentZ};
use bucketrl_core::episode::{collect_dataset, episode_seeds, Dataset};
use bucketrl_core::eval::{evaluate, EvalPolicy, EvalReport};
use bucketrl_core::iql::{finetune, train_bc, train_iql, Agent, EncoderPair, FinetuneConfig};
use bucketrl_core::rng::{derive_seed, stream};
use bucketrl_core::terrain::{TerrainKind, TerrainSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_agent, load_encoder_pair, save_agent, save_encoder_pair, AgentBundle};
use crate::config::PipelineConfig;
use crate::dataset_io::{append_trajectory, load_merged, save_dataset};
use crate::report::{emit_report, load_records, records_file_name, save_records};
use crate::teleop::{serve, ServerConfig};

type CliResult = Result<(), Box<dyn Error>>;

#[derive(Parser, Debug)]
#[command(name = "bucketrl", version, about = "Offline RL for jamming-free bucket penetration on a surrogate terrain")]
pub struct Cli {
    /// JSON file overriding pipeline defaults
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Collect scripted demonstrations on one terrain
    Collect {
        #[arg(long)]
        terrain: TerrainKind,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an agent (encoders are trained first unless --encoders is given)
    Train {
        /// Dataset directory; repeat to merge several
        #[arg(long, required = true)]
        dataset: Vec<PathBuf>,
        #[arg(long, value_enum)]
        algo: AlgoArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory holding pre-trained encoder checkpoints
        #[arg(long)]
        encoders: Option<PathBuf>,
    },
    /// Train the current/demo trajectory encoders
    Encoders {
        #[arg(long, required = true)]
        dataset: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune an IQL agent online on one terrain
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        terrain: TerrainKind,
        #[arg(long)]
        trajectories: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate an agent or a reference policy
    Eval {
        #[command(flatten)]
        policy: PolicyArg,
        #[arg(long)]
        terrain: TerrainKind,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build jamming-free curves and summary tables from evaluation records
    Curve {
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the teleoperation protocol
    TeleopServe {
        #[arg(long)]
        port: u16,
        #[arg(long)]
        terrain: TerrainKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgoArg {
    Iql,
    Bc,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct PolicyArg {
    /// Agent checkpoint directory
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fixed vertical-downward trajectory
    #[arg(long)]
    baseline: bool,
    /// Uniform scripted demonstrator
    #[arg(long)]
    scripted: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cli: Cli) -> CliResult {
    let cfg = PipelineConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::Collect { terrain, episodes, seed, out } => {
            let spec = cfg.presets()?.get(terrain);
            let ds = collect_dataset(&spec, &episode_seeds(seed, episodes), &cfg.episode)?;
            save_dataset(&ds, &out)?;
            println!("{}: {} trajectories, {} transitions", out.display(), ds.trajectories.len(), ds.transition_count());
        }
        Command::Encoders { dataset, out } => {
            let ds = load_merged(&dataset)?;
            let pair = train_encoders(&ds, &cfg)?;
            save_encoder_pair(&pair, &out)?;
            for p in [&pair.current, &pair.demo] {
                let h = &p.loss_history;
                println!("{} encoder: loss {:.6} -> {:.6}", p.role.as_str(), h.first().unwrap_or(&0.0), h.last().unwrap_or(&0.0));
            }
        }
        Command::Train { dataset, algo, out, seed, encoders } => {
            let ds = load_merged(&dataset)?;
            let enc = match encoders {
                Some(dir) => load_encoder_pair(&dir)?,
                None => train_encoders(&ds, &cfg)?,
            };
            let agent = match algo {
                AlgoArg::Iql => train_iql(&ds, &enc, &cfg.iql, seed)?,
                AlgoArg::Bc => train_bc(&ds, &enc, &cfg.iql, seed)?,
            };
            let datasets = dataset.iter().map(|d| absolute(d)).collect::<Result<_, _>>()?;
            save_agent(&AgentBundle { agent, datasets }, &out)?;
            println!("{}: {} agent trained on {} transitions", out.display(), algo_name(algo), ds.transition_count());
        }
        Command::Finetune { checkpoint, terrain, trajectories, out } => {
            let bundle = load_agent(&checkpoint)?;
            if bundle.datasets.is_empty() {
                return Err("checkpoint does not reference its training datasets".into());
            }
            let base = load_merged(&bundle.datasets)?;
            let spec = cfg.presets()?.get(terrain);
            let z = z_demo_for(&bundle.agent, &spec, &cfg)?;
            let ft_cfg = FinetuneConfig { n_traj: trajectories, ..cfg.finetune };
            let before = eval_agent(&bundle.agent, z, "before", &spec, &cfg)?;
            let mut res = finetune(&bundle.agent, &base, &spec, z, &ft_cfg, &cfg.episode, cfg.finetune_seed)?;
            let after = eval_agent(&res.agent, z, "after", &spec, &cfg)?;
            let data_dir = out.join("dataset");
            res.dataset.recompute_stats()?;
            save_dataset(&res.dataset, &data_dir)?;
            save_agent(&AgentBundle { agent: res.agent, datasets: vec![absolute(&data_dir)?] }, &out)?;
            write_reports(&[before.clone(), after.clone()], &out, &cfg)?;
            println!(
                "{}: reward {:.4} -> {:.4} on {terrain}",
                out.display(),
                before.reward_mean,
                after.reward_mean
            );
        }
        Command::Eval { policy, terrain, trials, out } => {
            let spec = cfg.presets()?.get(terrain);
            let report = if let Some(dir) = policy.checkpoint {
                let bundle = load_agent(&dir)?;
                let z = z_demo_for(&bundle.agent, &spec, &cfg)?;
                let id = bundle.agent.checkpoint.algo.as_str();
                evaluate(&EvalPolicy::Agent { agent: &bundle.agent, z_demo: z }, id, &spec, trials, cfg.eval_seed, &cfg.episode)?.0
            } else if policy.baseline {
                evaluate(&EvalPolicy::Baseline, "baseline", &spec, trials, cfg.eval_seed, &cfg.episode)?.0
            } else {
                evaluate(&EvalPolicy::Scripted, "scripted", &spec, trials, cfg.eval_seed, &cfg.episode)?.0
            };
            write_reports(std::slice::from_ref(&report), &out, &cfg)?;
            println!(
                "{} on {terrain}: reward {:.4} ± {:.4}, {} jams in {} trials",
                report.policy_id, report.reward_mean, report.reward_std, report.jam_count, report.trials
            );
        }
        Command::Curve { records, out } => {
            let reports = records.iter().map(|p| load_records(p)).collect::<Result<Vec<_>, _>>()?;
            let files = emit_report(&reports, &cfg.thresholds, &out)?;
            println!("{}: wrote {} files", out.display(), files.len());
        }
        Command::TeleopServe { port, terrain, seed, out } => {
            let server = ServerConfig {
                terrain,
                seed,
                episode: cfg.episode,
                presets: cfg.presets()?,
                teleop: cfg.teleop,
            };
            let listener = TcpListener::bind(("127.0.0.1", port))?;
            println!("teleop service listening on {}", listener.local_addr()?);
            let reward = cfg.episode.reward;
            serve(&listener, &server, None, &mut |traj| {
                let ds = append_trajectory(&out, traj, reward).map_err(std::io::Error::other)?;
                println!("recorded trajectory {} into {}", ds.trajectories.len(), out.display());
                Ok(())
            })?;
        }
    }
    Ok(())
}

fn algo_name(a: AlgoArg) -> &'static str {
    match a {
        AlgoArg::Iql => "iql",
        AlgoArg::Bc => "bc",
    }
}

fn absolute(p: &Path) -> std::io::Result<PathBuf> {
    fs::canonicalize(p)
}

pub fn train_encoders(ds: &Dataset, cfg: &PipelineConfig) -> Result<EncoderPair, Box<dyn Error>> {
    Ok(EncoderPair {
        current: train_autoencoder(ds, EncoderRole::Current, &cfg.encoder, cfg.encoder_seed)?,
        demo: train_autoencoder(ds, EncoderRole::Demo, &cfg.encoder, derive_seed(cfg.encoder_seed, stream::DEMO))?,
    })
}

/// Training-time latent when the terrain was seen, otherwise one inferred
/// from fresh scripted demonstrations.
fn z_demo_for(agent: &Agent, spec: &TerrainSpec, cfg: &PipelineConfig) -> Result<LatentZ, Box<dyn Error>> {
    if let Some(z) = agent.demo_z.get(&spec.name) {
        return Ok(*z);
    }
    let seeds = episode_seeds(derive_seed(cfg.eval_seed, stream::DEMO), cfg.demo_trajectories);
    let demos = collect_dataset(spec, &seeds, &cfg.episode)?;
    let refs: Vec<_> = demos.trajectories.iter().collect();
    Ok(agent.infer_demo_z(&refs)?)
}

fn eval_agent(agent: &Agent, z: LatentZ, id: &str, spec: &TerrainSpec, cfg: &PipelineConfig) -> Result<EvalReport, Box<dyn Error>> {
    Ok(evaluate(&EvalPolicy::Agent { agent, z_demo: z }, id, spec, 10, cfg.eval_seed, &cfg.episode)?.0)
}

fn write_reports(reports: &[EvalReport], out: &Path, cfg: &PipelineConfig) -> CliResult {
    fs::create_dir_all(out)?;
    for r in reports {
        save_records(r, &out.join(records_file_name(&r.policy_id, r.terrain)))?;
    }
    emit_report(reports, &cfg.thresholds, out)?;
    Ok(())
}
