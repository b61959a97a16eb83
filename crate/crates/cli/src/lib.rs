//! Command-line front end for `modalcompose`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use modalcompose::analysis::{
    perturb_importance, robustness_eval, standard_scenarios, ImportanceConfig,
};
use modalcompose::dataset::generate_dataset;
use modalcompose::harness::manifest::parse_weights;
use modalcompose::harness::{
    init_threads, load_policy, prepare_dataset, reference_rows, run_eval, run_training,
    sweep_dataset_size, Manifest, ManifestWeights, MetricsRow, MetricsTable, RunConfig,
};
use modalcompose::{Error, Result, RoutingStrategy};

#[derive(Debug, Parser)]
#[command(
    name = "modalcompose",
    version,
    about = "Modality-composable diffusion policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `env.name` (occluded_reach or phase_reach).
    #[arg(long)]
    env: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Record scripted-expert demonstrations.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of successful episodes.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train experts, router and baselines; writes checkpoints into a directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods: expert:<modality>, router, concat, moe.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a manifest composing expert checkpoints.
    Compose {
        /// Comma-separated expert checkpoints.
        #[arg(long, value_delimiter = ',', required = true)]
        experts: Vec<PathBuf>,
        /// Comma-separated fixed weights.
        #[arg(long, conflicts_with = "router")]
        weights: Option<String>,
        /// Router checkpoint (instead of fixed weights).
        #[arg(long)]
        router: Option<PathBuf>,
        #[arg(long, default_value = "soft")]
        strategy: RoutingStrategy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Success rate of a policy; writes a metrics CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Manifest or single checkpoint. Omit to evaluate the scripted and random references.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        /// Label for the method column.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        strategy: Option<RoutingStrategy>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-step modality importance traces.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Number of episodes; more than one writes `<stem>_ep<j>.csv`.
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Success rate under perturbation and corruption scenarios.
    Robust {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        strategy: Option<RoutingStrategy>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dataset-size sweep of the composed policy against concatenation.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ascending dataset sizes.
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.run.seed = s;
    }
    if let Some(e) = &common.env {
        cfg.env.name = e.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn sanitize(label: &str) -> String {
    label.replace([',', ' '], "")
}

fn with_strategy(
    policy: Box<dyn modalcompose::Policy>,
    manifest: &Path,
    strategy: Option<RoutingStrategy>,
) -> Result<Box<dyn modalcompose::Policy>> {
    let Some(s) = strategy else {
        return Ok(policy);
    };
    let mut m = Manifest::load(manifest)
        .map_err(|_| Error::Config("--strategy needs a manifest, not a checkpoint".into()))?;
    m.strategy = s;
    let dir = manifest
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    Ok(Box::new(m.load_policy(dir)?))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, n, out } => {
            let cfg = load_config(&common)?;
            let n = n.unwrap_or(cfg.data.episodes);
            let ds = generate_dataset(&cfg.env_spec()?, n, cfg.data.horizon, cfg.run.seed)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            ds.save(&out)?;
            info!(
                "wrote {} episodes ({} steps) to {}",
                ds.episodes.len(),
                ds.step_count(),
                out.display()
            );
        }
        Command::Train {
            common,
            method,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = method {
                cfg.run.methods = m.split(',').map(str::to_string).collect();
                cfg.validate()?;
            }
            let dataset = prepare_dataset(&cfg)?;
            fs::create_dir_all(&out)?;
            if cfg.data.path.is_none() {
                dataset.save(&out.join("dataset.mcds"))?;
            }
            write_file(&out.join("config.toml"), &cfg.to_toml())?;
            for p in run_training(&cfg, &dataset, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Compose {
            experts,
            weights,
            router,
            strategy,
            out,
        } => {
            let weights = match (weights, router) {
                (Some(w), None) => ManifestWeights::Fixed(parse_weights(&w)?),
                (None, Some(r)) => ManifestWeights::Router(r),
                _ => return Err(Error::Config("compose needs --weights or --router".into())),
            };
            let manifest = Manifest::create(&experts, weights, strategy)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            manifest.save(&out)?;
        }
        Command::Eval {
            common,
            manifest,
            n,
            method,
            strategy,
            out,
        } => {
            let cfg = load_config(&common)?;
            let spec = cfg.env_spec()?;
            let n = n.unwrap_or(cfg.eval.episodes);
            let mut table = MetricsTable::default();
            match manifest {
                Some(path) => {
                    let policy = with_strategy(load_policy(&path)?, &path, strategy)?;
                    let label = sanitize(&method.unwrap_or_else(|| policy.name()));
                    table.push(run_eval(policy.as_ref(), &spec, n, cfg.run.seed, &label)?)?;
                }
                None => {
                    for row in reference_rows(&spec, n, cfg.run.seed)? {
                        table.push(row)?;
                    }
                }
            }
            write_file(&out, &table.to_csv())?;
        }
        Command::Analyze {
            common,
            manifest,
            n,
            out,
        } => {
            let cfg = load_config(&common)?;
            let spec = cfg.env_spec()?;
            let policy = load_policy(&manifest)?;
            let dataset = prepare_dataset(&cfg)?;
            let mut icfg =
                ImportanceConfig::calibrated(&dataset, cfg.eval.importance_sigma_factor)?;
            icfg.alpha = cfg.eval.ema_alpha;
            icfg.draws = cfg.eval.importance_draws;
            if n == 0 {
                return Err(Error::Config("--n must be >= 1".into()));
            }
            for j in 0..n {
                let trace =
                    perturb_importance(policy.as_ref(), &spec, cfg.run.seed, j as u64, &icfg)?;
                let path = if n == 1 {
                    out.clone()
                } else {
                    let stem = out
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or("importance");
                    out.with_file_name(format!("{stem}_ep{j}.csv"))
                };
                let mut buf = Vec::new();
                trace.write_csv(&mut buf)?;
                write_file(&path, &String::from_utf8(buf).expect("CSV is UTF-8"))?;
            }
        }
        Command::Robust {
            common,
            manifest,
            n,
            strategy,
            out,
        } => {
            let cfg = load_config(&common)?;
            let spec = cfg.env_spec()?;
            let n = n.unwrap_or(cfg.eval.episodes);
            let policy = with_strategy(load_policy(&manifest)?, &manifest, strategy)?;
            let name = sanitize(&policy.name());
            let mut table = MetricsTable::default();
            for (label, scenario) in standard_scenarios(&spec) {
                let s = robustness_eval(policy.as_ref(), &spec, &scenario, n, cfg.run.seed)?;
                table.push(MetricsRow {
                    task: spec.kind.name().to_string(),
                    method: format!("{name}@{label}"),
                    success_rate: s.success_rate,
                    mean_steps: s.mean_steps,
                    param_count: policy.param_count(),
                    seed: cfg.run.seed,
                })?;
            }
            write_file(&out, &table.to_csv())?;
        }
        Command::Sweep { common, n, out } => {
            let cfg = load_config(&common)?;
            let table = sweep_dataset_size(&cfg, &n)?;
            write_file(&out, &table.to_csv())?;
        }
    }
    Ok(())
}

/// Parse `argv` (including the program name) and run. Returns the exit code:
/// 0 on success, 1 on a runtime error, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return 2;
    }
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
