use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use imagine_core::agent::{train_agent, Agent, AgentConfig, EnvShape, Regime, Variant};
use imagine_core::envs::{collect_trajectories, CollectOptions, DataPolicy, Dataset, EnvConfig, EnvKind};
use imagine_core::harness::{
    render_rollout_gallery, run_agent_study, run_model_study, ExperimentSpec, GalleryOptions, StudyKind,
};
use imagine_core::models::{train, EnvModel, Family, ModelConfig, TrainConfig};
use imagine_core::rollout::{benchmark, BenchConfig};

#[derive(Parser)]
#[command(name = "imagine", about = "Environment models and imagination-augmented agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect trajectories from an environment into a dataset directory.
    Collect(CollectArgs),
    /// Train an environment model on a dataset.
    TrainModel(TrainModelArgs),
    /// Time rollouts of trained models.
    BenchRollout(BenchArgs),
    /// Train an agent with A2C.
    TrainAgent(TrainAgentArgs),
    /// Run a study described by a TOML file.
    Study { spec: PathBuf },
    /// Render rollout strips from trained models.
    Gallery(GalleryArgs),
}

#[derive(Args)]
struct EnvArgs {
    #[arg(long, default_value = "mini_pacman")]
    env: EnvKind,
    #[arg(long, default_value_t = 80)]
    height: usize,
    #[arg(long, default_value_t = 80)]
    width: usize,
    /// Defaults to the environment's own setting.
    #[arg(long)]
    action_repeat: Option<usize>,
    #[arg(long, default_value_t = 0)]
    env_seed: u64,
}

impl EnvArgs {
    fn config(&self) -> EnvConfig {
        let mut cfg = EnvConfig::new(self.env, self.env_seed);
        cfg.height = self.height;
        cfg.width = self.width;
        if let Some(r) = self.action_repeat {
            cfg.action_repeat = r;
        }
        cfg
    }
}

#[derive(Args)]
struct CollectArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, default_value_t = 256)]
    count: usize,
    #[arg(long, default_value_t = 8)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// uniform, noop or pill_seeker; defaults to the environment's policy.
    #[arg(long)]
    policy: Option<DataPolicy>,
    #[arg(long, default_value_t = 20)]
    burn_in: usize,
    /// Hold out this many trajectories into `<out>/test`.
    #[arg(long, default_value_t = 0)]
    test_count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainModelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    family: Family,
    #[arg(long, default_value_t = 1)]
    jumpy: usize,
    /// Multiplier on every layer width.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Model checkpoint directories.
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    /// Environment steps per timed rollout.
    #[arg(long, default_value_t = 12)]
    tau: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainAgentArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, default_value = "i2a_state")]
    variant: Variant,
    #[arg(long, default_value = "random")]
    rollout_policy: Regime,
    #[arg(long)]
    model_ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    tau: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda_d: f64,
    #[arg(long, default_value_t = 0.0)]
    rollout_entropy_weight: f64,
    #[arg(long, default_value_t = 16)]
    num_envs: usize,
    /// Environment steps (agent steps summed over all environments).
    #[arg(long, default_value_t = 100_000)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GalleryArgs {
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 6)]
    tau: usize,
    #[arg(long, default_value_t = 4)]
    contexts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn label_of(dir: &Path) -> String {
    let name = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned());
    match name(dir) {
        Some(n) if n.starts_with("seed_") => dir.parent().and_then(name).map_or(n.clone(), |p| format!("{p}/{n}")),
        Some(n) => n,
        None => dir.display().to_string(),
    }
}

fn load_models(dirs: &[PathBuf]) -> Result<Vec<(String, EnvModel)>> {
    dirs.iter()
        .map(|d| {
            Ok((
                label_of(d),
                EnvModel::load(d).with_context(|| format!("loading {}", d.display()))?,
            ))
        })
        .collect()
}

fn collect(a: CollectArgs) -> Result<()> {
    let env = a.env.config();
    let policy = a.policy.unwrap_or_else(|| DataPolicy::default_for(&env));
    let mut opts = CollectOptions::new(a.horizon, a.count + a.test_count, a.seed);
    opts.burn_in = a.burn_in;
    let res = collect_trajectories(&env, policy, &opts)?;
    if res.incomplete {
        bail!("collection stopped after {} trajectories", res.trajectories.len());
    }
    log::info!(
        "{} trajectories, {} raw steps, {} discarded",
        res.trajectories.len(),
        res.raw_steps,
        res.discarded
    );
    let all = Dataset::new(env, policy, a.seed, 1, res.trajectories)?;
    if a.test_count > 0 {
        let (train, test) = all.split_tail(a.test_count);
        train.save(&a.out.join("train"))?;
        test.save(&a.out.join("test"))?;
    } else {
        all.save(&a.out)?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn train_model(a: TrainModelArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let data = if a.jumpy > 1 { data.jumpy(a.jumpy)? } else { data };
    let m = &data.manifest;
    let cfg = ModelConfig::new(a.family, m.num_actions, m.height, m.width)
        .with_scale(a.scale)
        .with_jumpy(a.jumpy);
    let mut model = EnvModel::new(cfg, a.seed)?;
    let mut tc = TrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        seed: a.seed,
        ..TrainConfig::default()
    };
    if let Some(lr) = a.lr {
        tc.adam.learning_rate = lr;
    }
    let log = train(&mut model, &data.trajectories, &tc, Some(&a.out))?;
    if let Some(last) = log.rows.last() {
        println!(
            "final loss {:.4} after {} steps; checkpoint in {}",
            last.loss,
            last.step,
            a.out.display()
        );
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let models = load_models(&a.models)?;
    let refs: Vec<(&str, &EnvModel)> = models.iter().map(|(l, m)| (l.as_str(), m)).collect();
    let cfg = BenchConfig {
        batch: a.batch,
        horizon: a.tau,
        warmup: a.warmup,
        repetitions: a.reps,
        seed: 0,
    };
    let report = benchmark(&refs, &cfg)?;
    report.write_csv(&a.out)?;
    for r in &report.rows {
        println!(
            "{:<24} {:>10.3} ms/step  x{:.2}",
            r.label,
            r.per_env_step_s * 1e3,
            r.relative_speed
        );
    }
    Ok(())
}

fn train_agent_cmd(a: TrainAgentArgs) -> Result<()> {
    let env = a.env.config();
    let model = a.model_ckpt.as_deref().map(EnvModel::load).transpose()?;
    let mut config = AgentConfig {
        variant: a.variant,
        regime: a.rollout_policy,
        k: a.k,
        tau: a.tau,
        lambda_d: a.lambda_d,
        rollout_entropy_weight: a.rollout_entropy_weight,
        seed: a.seed,
        ..AgentConfig::default()
    };
    config.a2c.num_envs = a.num_envs;
    let shape = EnvShape {
        height: env.height,
        width: env.width,
        num_actions: env.num_actions(),
    };
    let agent = Agent::new(config, shape, model)?;
    let (_, log) = train_agent(agent, &env, a.steps, Some(&a.out))?;
    if let Some(last) = log.rows.last() {
        println!(
            "{} env steps, {} episodes, mean return {:.3}",
            last.env_steps, last.episodes, last.mean_return
        );
    }
    Ok(())
}

fn study(path: &Path) -> Result<()> {
    let spec = ExperimentSpec::load(path)?;
    match spec.study {
        StudyKind::Model => {
            let (_, report) = run_model_study(&spec)?;
            print!("{}", report.to_markdown());
        }
        StudyKind::Agent => {
            run_agent_study(&spec)?;
            println!(
                "learning curves in {}",
                spec.output.join("learning_curves.svg").display()
            );
        }
    }
    Ok(())
}

fn gallery(a: GalleryArgs) -> Result<()> {
    let models = load_models(&a.models)?;
    let refs: Vec<(&str, &EnvModel)> = models.iter().map(|(l, m)| (l.as_str(), m)).collect();
    let data = Dataset::load(&a.data)?;
    let opts = GalleryOptions {
        k: a.k,
        tau: a.tau,
        contexts: a.contexts,
        seed: a.seed,
    };
    let report = render_rollout_gallery(&refs, &data.trajectories, &opts, &a.out)?;
    for (label, b) in &report.blur {
        println!("{label:<24} blur {b:.4}");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Collect(a) => collect(a),
        Command::TrainModel(a) => train_model(a),
        Command::BenchRollout(a) => bench(a),
        Command::TrainAgent(a) => train_agent_cmd(a),
        Command::Study { spec } => study(&spec),
        Command::Gallery(a) => gallery(a),
    }
}
