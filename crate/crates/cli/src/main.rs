//! `chance-rl`: train, tune, evaluate and pretrain chance-constrained
//! policies for the fed-batch photo-production case study.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 tuner target
//! unreachable, 4 runtime numeric failure, 1 other I/O failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chance_rl_core::backoff::{self, TunerError};
use chance_rl_core::checkpoint::Checkpoint;
use chance_rl_core::config::{ConfigError, ExperimentConfig};
use chance_rl_core::policy::PolicyParameters;
use chance_rl_core::reinforce::{self, ReinforceError};
use chance_rl_core::report::{self, RunManifest};
use chance_rl_core::rollout::{sample_batch, BackoffMatrix};
use chance_rl_core::seeding::{self, domain};

#[derive(Parser)]
#[command(
    name = "chance-rl",
    version,
    about = "Chance-constrained reinforcement learning with tuned constraint backoffs"
)]
struct Cli {
    /// Worker thread cap (falls back to CHANCE_RL_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the unconstrained policy (backoffs fixed at zero).
    Train(TrainArgs),
    /// Full backoff tuning: train, estimate backoffs, bisect the scale.
    Tune(TuneArgs),
    /// Evaluate a checkpoint on fresh rollouts and emit report files.
    Evaluate(EvaluateArgs),
    /// Supervised hot-start from a (window, control) dataset.
    Pretrain(PretrainArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment configuration (TOML).
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Episodes per epoch override.
    #[arg(long)]
    episodes: Option<usize>,
    /// Epoch budget override.
    #[arg(long)]
    epochs: Option<usize>,
    /// Start from an existing checkpoint instead of fresh parameters.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Write policy_epoch_<N>.json every this many epochs (0 = never).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct TuneArgs {
    /// Experiment configuration (TOML).
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Already-trained checkpoint; skips the unconstrained training step.
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Experiment configuration (TOML).
    config: PathBuf,
    /// Policy checkpoint to evaluate.
    #[arg(long)]
    policy: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Fresh rollout count (defaults to the tuner sample count).
    #[arg(long)]
    samples: Option<usize>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Also dump every rollout to trajectories.csv.
    #[arg(long)]
    dump_trajectories: bool,
}

#[derive(Args)]
struct PretrainArgs {
    /// Experiment configuration (TOML).
    config: PathBuf,
    /// CSV dataset of raw window and control columns.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Gradient-descent epochs.
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    /// Gradient-descent step size.
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

/// Error wrapper carrying the process exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(2, e.to_string())
    }
}

impl From<chance_rl_core::checkpoint::CheckpointError> for CliError {
    fn from(e: chance_rl_core::checkpoint::CheckpointError) -> Self {
        CliError::new(2, e.to_string())
    }
}

impl From<chance_rl_core::report::ReportError> for CliError {
    fn from(e: chance_rl_core::report::ReportError) -> Self {
        CliError::new(1, e.to_string())
    }
}

impl From<ReinforceError> for CliError {
    fn from(e: ReinforceError) -> Self {
        let code = match &e {
            ReinforceError::EmptyDataset | ReinforceError::BadPretrainRow { .. } => 2,
            ReinforceError::TooFewEpisodes(_)
            | ReinforceError::NoEpochs
            | ReinforceError::InvalidTolerance(_) => 2,
            _ => 4,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<TunerError> for CliError {
    fn from(e: TunerError) -> Self {
        let code = match &e {
            TunerError::TargetUnreachable { .. } => 3,
            TunerError::InvalidConfig(_) => 2,
            TunerError::Reinforce(inner) => return CliError::from_reinforce_ref(inner, &e),
            _ => 4,
        };
        CliError::new(code, e.to_string())
    }
}

impl CliError {
    fn from_reinforce_ref(inner: &ReinforceError, outer: &TunerError) -> Self {
        let code = match inner {
            ReinforceError::TooFewEpisodes(_)
            | ReinforceError::NoEpochs
            | ReinforceError::InvalidTolerance(_) => 2,
            _ => 4,
        };
        CliError::new(code, outer.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(cli.threads);
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Tune(args) => cmd_tune(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Pretrain(args) => cmd_pretrain(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn init_threads(flag: Option<usize>) {
    let count = flag.or_else(|| {
        std::env::var("CHANCE_RL_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = count {
        if n >= 1 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .ok();
        }
    }
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::new(1, format!("cannot create {}: {e}", dir.display())))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<(ExperimentConfig, String), CliError> {
    let (mut config, hash) = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok((config, hash))
}

fn load_policy_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::load(path)?)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let (mut config, hash) = load_config(&args.config, args.seed)?;
    if let Some(k) = args.episodes {
        config.step1_episodes = k;
    }
    if let Some(n) = args.epochs {
        config.step1_epochs = n;
    }
    prepare_out(&args.out)?;
    let manifest_path = args.out.join("manifest.json");
    let mut manifest = RunManifest::begin("train", &hash, config.seed);
    manifest.write(&manifest_path)?;

    let env = config.build_env()?;
    let params = match &args.from {
        Some(path) => {
            eprintln!("starting from checkpoint {}", path.display());
            load_policy_checkpoint(path)?.policy
        }
        None => config.build_policy(config.seed)?,
    };
    let train_cfg = config.step1_training(config.seed);
    eprintln!(
        "training: {} epochs x {} episodes (seed {})",
        train_cfg.epochs, train_cfg.episodes, config.seed
    );
    let every = args.checkpoint_every;
    let out_dir = args.out.clone();
    let hash_for_ckpt = hash.clone();
    let result = reinforce::train_fixed_backoffs_observed(
        &env,
        params,
        &BackoffMatrix::zeros(2, config.horizon),
        &train_cfg,
        &mut |stats, params| {
            if every > 0 && stats.epoch % every == 0 {
                let path = out_dir.join(format!("policy_epoch_{:04}.json", stats.epoch));
                if let Err(e) = Checkpoint::plain(params.clone(), &hash_for_ckpt).save(&path) {
                    eprintln!("warning: periodic checkpoint failed: {e}");
                }
            }
        },
    )?;
    if result.discarded_episodes > 0 {
        eprintln!("discarded {} failed episodes", result.discarded_episodes);
    }
    let last = result.history.last().expect("at least one epoch");
    eprintln!(
        "finished after {} epochs: mean penalized return {:.6}, violation rate {:.3}",
        result.history.len(),
        last.mean_penalized,
        last.violation_rate
    );

    let ckpt_path = args.out.join("policy.json");
    Checkpoint::plain(result.params, &hash).save(&ckpt_path)?;
    let best_path = args.out.join("policy_best.json");
    Checkpoint::plain(result.best_params, &hash).save(&best_path)?;
    let log_path = args.out.join("training_log.csv");
    report::write_training_log(&log_path, &result.history)?;

    manifest.finalize(vec![ckpt_path, best_path, log_path]);
    manifest.write(&manifest_path)?;
    Ok(())
}

fn cmd_tune(args: TuneArgs) -> Result<(), CliError> {
    let (config, hash) = load_config(&args.config, args.seed)?;
    prepare_out(&args.out)?;
    let manifest_path = args.out.join("manifest.json");
    let mut manifest = RunManifest::begin("tune", &hash, config.seed);
    manifest.write(&manifest_path)?;

    let env = config.build_env()?;
    let (params, step1): (PolicyParameters, Option<_>) = match &args.from {
        Some(path) => {
            eprintln!("step 1 skipped (warm start from checkpoint {})", path.display());
            (load_policy_checkpoint(path)?.policy, None)
        }
        None => (
            config.build_policy(config.seed)?,
            Some(config.step1_training(config.seed)),
        ),
    };
    let tuner_cfg = config.tuner_config(config.seed);
    let inner = config.inner_training(config.seed);
    eprintln!(
        "tuning: target {} at confidence {}, {} samples, up to {} iterations",
        1.0 - tuner_cfg.alpha,
        1.0 - tuner_cfg.epsilon,
        tuner_cfg.samples,
        tuner_cfg.max_iterations
    );
    let result = backoff::tune(&env, params, &tuner_cfg, &inner, step1.as_ref())?;
    if result.quantile_unreliable {
        eprintln!(
            "warning: quantile unreliable ({} samples is too few for stable base backoffs)",
            tuner_cfg.samples
        );
    }
    for row in &result.trace {
        eprintln!(
            "iteration {}: scale {:.6} -> f_hat {:.4}, f_lb {:.6}, e {:+.6}",
            row.iteration, row.gamma, row.f_hat, row.f_lb, row.e
        );
    }
    eprintln!(
        "exit: {:?} at scale {:.6} (f_lb {:.6})",
        result.outcome, result.tighten_scale, result.evaluation.estimate.f_lb
    );

    let trace_path = args.out.join("flb_convergence.csv");
    report::write_flb_convergence(&trace_path, &result.trace)?;
    let backoffs_path = args.out.join("backoffs.csv");
    report::write_backoffs(&backoffs_path, &result.iteration_backoffs)?;
    let ckpt_path = args.out.join("tuned_policy.json");
    Checkpoint::tuned(
        result.params,
        result.backoffs,
        result.tighten_scale,
        &hash,
    )
    .save(&ckpt_path)?;
    let mut outputs = vec![trace_path, backoffs_path, ckpt_path];
    if !result.step1_history.is_empty() {
        let step1_path = args.out.join("step1_log.csv");
        report::write_training_log(&step1_path, &result.step1_history)?;
        outputs.push(step1_path);
    }

    manifest.finalize(outputs);
    manifest.write(&manifest_path)?;
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let (config, hash) = load_config(&args.config, args.seed)?;
    let samples = args.samples.unwrap_or(config.tuner_samples);
    if samples < 1 {
        return Err(CliError::new(2, "--samples must be at least 1"));
    }
    prepare_out(&args.out)?;
    let manifest_path = args.out.join("manifest.json");
    let mut manifest = RunManifest::begin("evaluate", &hash, config.seed);
    manifest.write(&manifest_path)?;

    let env = config.build_env()?;
    let checkpoint = load_policy_checkpoint(&args.policy)?;
    let eval_seed = seeding::derive_seed(config.seed, domain::EVALUATE, 0xEC);
    let report = backoff::evaluate_policy(
        &env,
        &checkpoint.policy,
        samples,
        config.epsilon,
        config.discount,
        eval_seed,
    )?;
    eprintln!(
        "evaluated {} rollouts: f_hat {:.4}, f_lb {:.6}, mean terminal {:.6}",
        samples, report.estimate.f_hat, report.estimate.f_lb, report.mean_terminal
    );

    let sat_path = args.out.join("satisfaction.json");
    report::write_satisfaction(&sat_path, &report, config.alpha)?;
    let constraints_path = args.out.join("constraints.csv");
    report::write_constraint_bands(&constraints_path, &report)?;
    let controls_path = args.out.join("controls.csv");
    report::write_control_bands(&controls_path, &report)?;
    let mut outputs = vec![sat_path, constraints_path, controls_path];

    if args.dump_trajectories {
        // Same seed as the evaluation batch, so the dump is the evaluation.
        let batch = sample_batch(&env, &checkpoint.policy, samples, eval_seed, 0)
            .map_err(|e| CliError::new(4, e.to_string()))?;
        let traj_path = args.out.join("trajectories.csv");
        report::write_trajectories(&traj_path, &batch.trajectories)?;
        outputs.push(traj_path);
    }

    manifest.finalize(outputs);
    manifest.write(&manifest_path)?;
    Ok(())
}

/// Parses the pretraining CSV: one row per pair, columns are the raw window
/// (three states back to t-2, then two controls back to t-2) followed by the
/// target control. A non-numeric first row is treated as a header.
fn parse_pretrain_dataset(
    path: &Path,
    n_x: usize,
    n_u: usize,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(2, format!("cannot read {}: {e}", path.display())))?;
    let window_cols = 3 * n_x + 2 * n_u;
    let mut rows = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let values: Result<Vec<f64>, _> = fields.iter().map(|f| f.trim().parse::<f64>()).collect();
        match values {
            Err(_) if line_no == 0 => continue, // header
            Err(e) => {
                return Err(CliError::new(
                    2,
                    format!("row {line_no}: unparseable value ({e})"),
                ))
            }
            Ok(values) => {
                if values.len() != window_cols + n_u {
                    return Err(CliError::new(
                        2,
                        format!(
                            "row {line_no}: expected {} columns, found {}",
                            window_cols + n_u,
                            values.len()
                        ),
                    ));
                }
                let window = values[..window_cols].to_vec();
                let target = values[window_cols..].to_vec();
                rows.push((window, target));
            }
        }
    }
    if rows.is_empty() {
        return Err(CliError::new(2, "pretraining dataset is empty"));
    }
    Ok(rows)
}

fn cmd_pretrain(args: PretrainArgs) -> Result<(), CliError> {
    let (config, hash) = load_config(&args.config, args.seed)?;
    prepare_out(&args.out)?;
    let manifest_path = args.out.join("manifest.json");
    let mut manifest = RunManifest::begin("pretrain", &hash, config.seed);
    manifest.write(&manifest_path)?;

    let params = config.build_policy(config.seed)?;
    let dataset = parse_pretrain_dataset(&args.data, 3, 2)?;
    eprintln!(
        "pretraining on {} pairs for {} epochs (step {})",
        dataset.len(),
        args.epochs,
        args.step
    );
    let (fitted, losses) = reinforce::pretrain_supervised(&params, &dataset, args.epochs, args.step)?;
    eprintln!(
        "loss {:.6e} -> {:.6e}",
        losses.first().unwrap(),
        losses.last().unwrap()
    );

    let ckpt_path = args.out.join("policy.json");
    Checkpoint::plain(fitted, &hash).save(&ckpt_path)?;
    let loss_path = args.out.join("pretrain_log.csv");
    let mut body = String::from("epoch,loss\n");
    for (i, loss) in losses.iter().enumerate() {
        body.push_str(&format!("{i},{loss}\n"));
    }
    std::fs::write(&loss_path, body)
        .map_err(|e| CliError::new(1, format!("cannot write {}: {e}", loss_path.display())))?;

    manifest.finalize(vec![ckpt_path, loss_path]);
    manifest.write(&manifest_path)?;
    Ok(())
}
