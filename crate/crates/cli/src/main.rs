mod settings;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gcpo_core::analysis::{
    border_interior_gradient, entropy_region_stats, export_maps, perturbation_study, sample_group, PerturbationSpec,
    PositionRange,
};
use gcpo_core::policy::PolicyParams;
use gcpo_core::selection::select_group;
use gcpo_core::trainer::run_training;
use gcpo_core::{GcpoError, Method, TrainConfig};
use serde_json::json;

const CONFIG_FILE: &str = "config.json";
const RUN_FILE: &str = "run.json";
const DUMP_FILE: &str = "nonfinite_dump.json";

#[derive(Parser)]
#[command(name = "gcpo", version, about = "Critical-token policy optimization on toy token grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write a run directory.
    Train(TrainArgs),
    /// Observation studies on a trained checkpoint.
    Analyze {
        #[command(subcommand)]
        study: Study,
    },
    /// Print the default configuration with every key.
    Schema {
        #[arg(long)]
        preset: Option<Preset>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// The four selection arms over shared seeds on one border_structure prompt.
    Fig8,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set objective.beta=0.04` or `--set tasks.0.border=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    preset: Option<Preset>,
    /// Number of consecutive seeds per arm for a preset.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
    /// Worker threads for per-prompt work; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the config.json next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Sampling seed; defaults to the run seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    prompt_id: usize,
}

#[derive(Subcommand)]
enum Study {
    /// Downstream divergence after perturbing early and middle positions.
    Perturb {
        #[command(flatten)]
        common: CheckpointArgs,
        #[arg(long, default_value_t = 3.0)]
        noise_scale: f64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// `start:count`; defaults to the first 10% of positions.
        #[arg(long, value_parser = parse_range)]
        early: Option<PositionRange>,
        /// `start:count`; defaults to the middle 10% of positions.
        #[arg(long, value_parser = parse_range)]
        middle: Option<PositionRange>,
    },
    /// Subject/background entropy and border/interior gradient statistics.
    Entropy {
        #[command(flatten)]
        common: CheckpointArgs,
    },
    /// Export entropy, gradient, similarity and selection grids as CSV.
    Maps {
        #[command(flatten)]
        common: CheckpointArgs,
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

fn parse_range(s: &str) -> std::result::Result<PositionRange, String> {
    let (a, b) = s.split_once(':').ok_or("expected start:count")?;
    Ok(PositionRange {
        start: a.parse().map_err(|e| format!("start: {e}"))?,
        count: b.parse().map_err(|e| format!("count: {e}"))?,
    })
}

/// Marks an error as a configuration or usage problem (exit code 2).
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(Usage(format!("{e:#}")))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<Usage>() {
        return 2;
    }
    for cause in err.chain() {
        if let Some(GcpoError::Config(_) | GcpoError::Checkpoint { .. }) = cause.downcast_ref::<GcpoError>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Analyze { study } => cmd_analyze(study),
        Command::Schema { preset } => cmd_schema(preset),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn base_config(preset: Option<Preset>) -> TrainConfig {
    match preset {
        Some(Preset::Fig8) => TrainConfig::ablation(),
        None => TrainConfig::default(),
    }
}

fn cmd_schema(preset: Option<Preset>) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(&base_config(preset))?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(true);
        if occupied && !force {
            return Err(usage(anyhow!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        if occupied {
            std::fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = settings::resolve(args.config.config.as_deref(), base_config(args.preset), &args.config.overrides)
        .map_err(usage)?;
    if args.threads == 0 {
        return Err(usage(anyhow!("--threads must be at least 1")));
    }
    prepare_dir(&args.out, args.force)?;
    match args.preset {
        None => {
            train_one(&cfg, &args.out, args.threads)?;
            println!("{}", args.out.display());
        }
        Some(Preset::Fig8) => {
            if args.seeds == 0 {
                return Err(usage(anyhow!("--seeds must be at least 1")));
            }
            let mut summary = serde_json::Map::new();
            for method in Method::ALL {
                let mut runs = Vec::new();
                for seed in cfg.seed..cfg.seed + args.seeds {
                    let arm = TrainConfig {
                        seed,
                        method,
                        ..cfg.clone()
                    };
                    let dir = args.out.join(method.name()).join(format!("seed{seed}"));
                    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                    log::info!("training {} seed {seed}", method.name());
                    let records = train_one(&arm, &dir, args.threads)?;
                    let tail = &records[records.len().saturating_sub(10)..];
                    runs.push(json!({
                        "seed": seed,
                        "start_reward": records.first().map(|r| r.mean_reward),
                        "final_reward": tail.iter().map(|r| r.mean_reward).sum::<f64>() / tail.len().max(1) as f64,
                        "mean_selection_ratio": records.iter().map(|r| r.effective_selection_ratio).sum::<f64>()
                            / records.len().max(1) as f64,
                    }));
                }
                summary.insert(method.name().to_string(), json!(runs));
            }
            let path = args.out.join("summary.json");
            std::fs::write(&path, serde_json::to_string_pretty(&summary)?)
                .with_context(|| format!("writing {}", path.display()))?;
            println!("{}", args.out.display());
        }
    }
    Ok(())
}

fn train_one(cfg: &TrainConfig, dir: &Path, threads: usize) -> Result<Vec<gcpo_core::trainer::MetricsRecord>> {
    let write = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    };
    write(CONFIG_FILE, serde_json::to_string_pretty(cfg)?)?;
    write(
        RUN_FILE,
        serde_json::to_string_pretty(&json!({
            "config_hash": cfg.hash(),
            "method": cfg.method.name(),
            "seed": cfg.seed,
            "steps": cfg.steps,
            "gcpo_version": env!("CARGO_PKG_VERSION"),
        }))?,
    )?;
    match run_training(cfg, dir, threads) {
        Ok(out) => Ok(out.records),
        Err(GcpoError::NonFinite { what, step, dump }) => {
            write(DUMP_FILE, dump)?;
            bail!(
                "non-finite {what} at step {step}; batch written to {}",
                dir.join(DUMP_FILE).display()
            )
        }
        Err(e) => Err(e.into()),
    }
}

struct Loaded {
    cfg: TrainConfig,
    params: PolicyParams,
    seed: u64,
    prompt_id: usize,
    out: PathBuf,
}

fn load(common: CheckpointArgs) -> Result<Loaded> {
    if !common.checkpoint.is_file() {
        return Err(usage(anyhow!("checkpoint {} not found", common.checkpoint.display())));
    }
    let config = match common.config {
        Some(path) => path,
        None => {
            let sibling = common.checkpoint.with_file_name(CONFIG_FILE);
            if !sibling.is_file() {
                return Err(usage(anyhow!(
                    "no --config given and no {CONFIG_FILE} next to {}",
                    common.checkpoint.display()
                )));
            }
            sibling
        }
    };
    let cfg = settings::resolve(Some(&config), TrainConfig::default(), &common.overrides).map_err(usage)?;
    let params = PolicyParams::load(&common.checkpoint)?;
    if params.dims != cfg.policy_dims() {
        return Err(usage(anyhow!(
            "checkpoint dimensions {:?} do not match config {:?}",
            params.dims,
            cfg.policy_dims()
        )));
    }
    if common.prompt_id >= cfg.tasks.len() {
        return Err(usage(anyhow!(
            "--prompt-id {} out of range for {} tasks",
            common.prompt_id,
            cfg.tasks.len()
        )));
    }
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(Loaded {
        seed: common.seed.unwrap_or(cfg.seed),
        prompt_id: common.prompt_id,
        out: common.out,
        cfg,
        params,
    })
}

fn write_json(path: PathBuf, value: serde_json::Value) -> Result<()> {
    std::fs::write(&path, serde_json::to_string_pretty(&value)?).with_context(|| format!("writing {}", path.display()))?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_analyze(study: Study) -> Result<()> {
    match study {
        Study::Perturb {
            common,
            noise_scale,
            trials,
            early,
            middle,
        } => {
            let l = load(common)?;
            let shape = l.cfg.policy.shape();
            let defaults = PerturbationSpec::defaults_for(shape.len());
            let spec = PerturbationSpec {
                early: early.unwrap_or(defaults.early),
                middle: middle.unwrap_or(defaults.middle),
                noise_scale,
                trials,
                prompt_id: l.prompt_id,
                seed: l.seed,
            };
            let report = perturbation_study(&l.params, shape, &spec).map_err(|e| usage(e.into()))?;
            log::info!(
                "early {:.4} middle {:.4}",
                report.early_divergence,
                report.middle_divergence
            );
            write_json(l.out.join("perturbation.json"), serde_json::to_value(&report)?)
        }
        Study::Entropy { common } => {
            let l = load(common)?;
            let shape = l.cfg.policy.shape();
            let mut prompts = Vec::new();
            for (p, task) in l.cfg.tasks.iter().enumerate() {
                let group = sample_group(&l.params, shape, p, l.cfg.group_size, l.seed)?;
                let sel = select_group(&group, &l.cfg.selection)?;
                let mask = task.subject_mask(shape);
                let mut regions = Vec::new();
                let mut gradients = Vec::new();
                for (map, grad) in sel.entropy_maps.iter().zip(&sel.gradients) {
                    if let Some(m) = &mask {
                        regions.push(entropy_region_stats(map, m).ok());
                    }
                    let (border, interior) = border_interior_gradient(grad);
                    gradients.push(json!({ "border": border, "interior": interior }));
                }
                prompts.push(json!({
                    "prompt_id": p,
                    "task": task,
                    "mean_entropy": sel.entropy_maps.iter().map(|m| m.mean()).sum::<f64>() / group.len() as f64,
                    "subject_background": regions,
                    "gradient_border_interior": gradients,
                }));
            }
            write_json(l.out.join("entropy_stats.json"), json!({ "seed": l.seed, "prompts": prompts }))
        }
        Study::Maps { common, sample } => {
            let l = load(common)?;
            if sample >= l.cfg.group_size {
                return Err(usage(anyhow!(
                    "--sample {sample} out of range for group size {}",
                    l.cfg.group_size
                )));
            }
            let group = sample_group(&l.params, l.cfg.policy.shape(), l.prompt_id, l.cfg.group_size, l.seed)?;
            let maps = export_maps(&group, &l.cfg.selection, sample, &l.out)?;
            write_json(l.out.join("maps.json"), serde_json::to_value(&maps)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_parse() {
        assert_eq!(parse_range("3:4").unwrap(), PositionRange { start: 3, count: 4 });
        assert!(parse_range("3").is_err());
        assert!(parse_range("a:1").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&usage(anyhow!("x"))), 2);
        assert_eq!(exit_code(&GcpoError::Config("x".into()).into()), 2);
        assert_eq!(exit_code(&anyhow!("x")), 1);
        assert_eq!(
            exit_code(&anyhow::Error::from(GcpoError::Validation("x".into())).context("while training")),
            1
        );
    }
}
