//! Training, evaluation and dataset-size sweeps driven by a [`RunConfig`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use super::checkpoint::{
    concat_checkpoint, expert_checkpoint, expert_from_checkpoint, load_checkpoint, moe_checkpoint,
    router_checkpoint, save_checkpoint,
};
use super::config::{Method, RunConfig};
use super::metrics::{MetricsRow, MetricsTable};
use crate::analysis::ScenarioSpec;
use crate::baselines::{train_concat_policy, train_moe_policy, ConcatPolicy, MoEFeaturePolicy};
use crate::compose::{compose_policy, Policy};
use crate::dataset::{generate_dataset, Dataset};
use crate::envs::EnvSpec;
use crate::error::{bail, Result};
use crate::experts::{train_expert, ModalityExpert};
use crate::rng::substream;
use crate::rollout::{evaluate, Actor};
use crate::router::{train_joint, train_router, Router};

/// Everything produced by one training run, in memory.
#[derive(Debug, Clone, Default)]
pub struct Trained {
    pub experts: Vec<ModalityExpert>,
    pub router: Option<Router>,
    pub concat: Option<ConcatPolicy>,
    pub moe: Option<MoEFeaturePolicy>,
}

impl Trained {
    pub fn expert(&self, modality: &str) -> Option<&ModalityExpert> {
        self.experts.iter().find(|e| e.modality == modality)
    }
}

/// Load `data.path` or generate a dataset from the run seed.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let spec = cfg.env_spec()?;
    let dataset = match &cfg.data.path {
        Some(p) => Dataset::load(p)?,
        None => generate_dataset(&spec, cfg.data.episodes, cfg.data.horizon, cfg.run.seed)?,
    };
    if dataset.env != spec.kind.name() {
        bail!(
            Config,
            "dataset was recorded on `{}`, config says `{}`",
            dataset.env,
            spec.kind.name()
        );
    }
    if dataset.horizon != cfg.data.horizon {
        bail!(
            Config,
            "dataset horizon {} differs from data.horizon {}",
            dataset.horizon,
            cfg.data.horizon
        );
    }
    Ok(dataset)
}

/// Train `methods` on `dataset`. Each method draws from its own seeded
/// stream, so a method's result does not depend on what else is trained.
/// `router` uses experts from this call when present, else `available`.
pub fn train_methods(
    cfg: &RunConfig,
    dataset: &Dataset,
    methods: &[Method],
    available: &[ModalityExpert],
) -> Result<Trained> {
    let seed = cfg.run.seed;
    let schedule = cfg.schedule()?;
    let expert_cfg = cfg.expert_config();
    let train = cfg.train_config();
    let mods: Vec<&str> = cfg.run.modalities.iter().map(String::as_str).collect();
    let mut out = Trained::default();

    let joint = cfg.router.joint && methods.contains(&Method::Router);
    if joint {
        let mut rng = substream(seed, "joint");
        let (experts, router) = train_joint(
            dataset,
            &mods,
            &expert_cfg,
            &cfg.router_config(),
            &train,
            &schedule,
            &mut rng,
        )?;
        out.experts = experts;
        out.router = Some(router);
    } else {
        let wanted: Vec<&str> = methods
            .iter()
            .filter_map(|m| match m {
                Method::Expert(name) => Some(name.as_str()),
                _ => None,
            })
            .collect();
        out.experts = wanted
            .par_iter()
            .map(|m| {
                info!("training expert `{m}`");
                let mut rng = substream(seed, &format!("expert:{m}"));
                train_expert(dataset, m, &expert_cfg, &train, &schedule, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        if methods.contains(&Method::Router) {
            let experts = mods
                .iter()
                .map(|m| {
                    match out
                        .expert(m)
                        .or_else(|| available.iter().find(|e| e.modality == *m))
                    {
                        Some(e) => Ok(e.clone()),
                        None => bail!(Config, "router training needs a trained `{m}` expert"),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            info!("training router");
            let mut rng = substream(seed, "router");
            out.router = Some(train_router(
                &experts,
                dataset,
                &cfg.router_config(),
                &cfg.router_train_config(),
                &schedule,
                &mut rng,
            )?);
        }
    }
    if methods.contains(&Method::Concat) {
        info!("training concat baseline");
        let mut rng = substream(seed, "concat");
        out.concat = Some(train_concat_policy(
            dataset,
            &expert_cfg,
            &train,
            &schedule,
            &mut rng,
        )?);
    }
    if methods.contains(&Method::Moe) {
        info!("training MoE feature-fusion baseline");
        let mut rng = substream(seed, "moe");
        out.moe = Some(train_moe_policy(
            dataset,
            &expert_cfg,
            &cfg.router.gate_hidden,
            &train,
            &schedule,
            &mut rng,
        )?);
    }
    Ok(out)
}

fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    s
}

pub fn checkpoint_path(out_dir: &Path, method: &Method) -> PathBuf {
    out_dir.join(format!("{}.mcpf", method.file_stem()))
}

/// Train the configured methods and write checkpoints and loss histories
/// into `out_dir`. Returns the checkpoint paths written.
pub fn run_training(cfg: &RunConfig, dataset: &Dataset, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let methods = cfg.methods()?;
    let mut available = Vec::new();
    if methods.contains(&Method::Router) && !cfg.router.joint {
        for m in &cfg.run.modalities {
            let method = Method::Expert(m.clone());
            let path = checkpoint_path(out_dir, &method);
            if !methods.contains(&method) && path.exists() {
                available.push(expert_from_checkpoint(&load_checkpoint(&path)?)?);
            }
        }
    }
    let trained = train_methods(cfg, dataset, &methods, &available)?;
    let hash = cfg.config_hash();
    let mut written = Vec::new();
    let mut write = |method: Method,
                     ck: super::checkpoint::Checkpoint,
                     history: Option<&[f64]>|
     -> Result<()> {
        let path = checkpoint_path(out_dir, &method);
        save_checkpoint(&ck, &path)?;
        if let Some(h) = history {
            fs::write(
                out_dir.join(format!("loss_{}.csv", method.file_stem())),
                loss_csv(h),
            )?;
        }
        written.push(path);
        Ok(())
    };
    for e in &trained.experts {
        write(
            Method::Expert(e.modality.clone()),
            expert_checkpoint(e, &hash),
            Some(&e.loss_history),
        )?;
    }
    if let Some(r) = &trained.router {
        write(Method::Router, router_checkpoint(r, &hash), None)?;
    }
    if let Some(p) = &trained.concat {
        write(
            Method::Concat,
            concat_checkpoint(p, &hash),
            Some(&p.core.loss_history),
        )?;
    }
    if let Some(p) = &trained.moe {
        write(
            Method::Moe,
            moe_checkpoint(p, &hash),
            Some(&p.core.loss_history),
        )?;
    }
    Ok(written)
}

/// One metrics row for `policy` over `n` seeded episodes.
pub fn run_eval(
    policy: &dyn Policy,
    spec: &EnvSpec,
    n: usize,
    seed: u64,
    method: &str,
) -> Result<MetricsRow> {
    let s = evaluate(
        &Actor::Policy(policy),
        spec,
        &ScenarioSpec::Baseline,
        n,
        seed,
    )?;
    Ok(MetricsRow {
        task: spec.kind.name().to_string(),
        method: method.to_string(),
        success_rate: s.success_rate,
        mean_steps: s.mean_steps,
        param_count: policy.param_count(),
        seed,
    })
}

/// Reference rows for the scripted expert and uniformly random actions.
pub fn reference_rows(spec: &EnvSpec, n: usize, seed: u64) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (actor, name) in [
        (Actor::Scripted, "scripted_expert"),
        (Actor::Random, "random"),
    ] {
        let s = evaluate(&actor, spec, &ScenarioSpec::Baseline, n, seed)?;
        rows.push(MetricsRow {
            task: spec.kind.name().to_string(),
            method: name.to_string(),
            success_rate: s.success_rate,
            mean_steps: s.mean_steps,
            param_count: 0,
            seed,
        });
    }
    Ok(rows)
}

/// For each dataset size: generate data, train the routed composition and
/// the concatenation baseline, and evaluate both.
pub fn sweep_dataset_size(cfg: &RunConfig, sizes: &[usize]) -> Result<MetricsTable> {
    if sizes.is_empty() {
        bail!(Config, "sweep needs at least one dataset size");
    }
    if sizes.contains(&0) {
        bail!(Config, "dataset sizes must be >= 1");
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        bail!(
            Config,
            "sweep sizes must be strictly ascending without duplicates: {sizes:?}"
        );
    }
    let spec = cfg.env_spec()?;
    let strategy = cfg.strategy()?;
    let mut methods: Vec<Method> = cfg
        .run
        .modalities
        .iter()
        .map(|m| Method::Expert(m.clone()))
        .collect();
    methods.push(Method::Router);
    methods.push(Method::Concat);
    let mut table = MetricsTable::default();
    for &n in sizes {
        info!("sweep: {n} demonstrations");
        let dataset = generate_dataset(&spec, n, cfg.data.horizon, cfg.run.seed)?;
        let trained = train_methods(cfg, &dataset, &methods, &[])?;
        let router = trained.router.clone().expect("router trained");
        let composed = compose_policy(trained.experts.clone(), router, strategy, cfg.schedule()?)?;
        let concat = trained.concat.as_ref().expect("concat trained");
        table.push(run_eval(
            &composed,
            &spec,
            cfg.eval.episodes,
            cfg.run.seed,
            &format!("composed:n={n}"),
        )?)?;
        table.push(run_eval(
            concat,
            &spec,
            cfg.eval.episodes,
            cfg.run.seed,
            &format!("concat:n={n}"),
        )?)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_sizes_are_checked() {
        let cfg = RunConfig::default();
        assert!(sweep_dataset_size(&cfg, &[]).is_err());
        assert!(sweep_dataset_size(&cfg, &[25, 25, 50]).is_err());
        assert!(sweep_dataset_size(&cfg, &[50, 25]).is_err());
    }

    #[test]
    fn loss_csv_layout() {
        assert_eq!(loss_csv(&[0.5, 0.25]), "step,loss\n1,0.5\n2,0.25\n");
    }

    #[test]
    fn checkpoint_names() {
        assert_eq!(
            checkpoint_path(Path::new("o"), &Method::Expert("vis".into())),
            Path::new("o/expert_vis.mcpf")
        );
        assert_eq!(
            checkpoint_path(Path::new("o"), &Method::Router),
            Path::new("o/router.mcpf")
        );
    }
}
