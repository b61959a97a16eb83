//! Run configuration, read from `key = value` files with `[section]` headers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{make_schedule, NoiseSchedule, PosteriorVariance};
use crate::envs::{EnvKind, EnvSpec};
use crate::error::{bail, Error, Result};
use crate::experts::{ExpertConfig, TrainConfig};
use crate::numcore::Activation;
use crate::router::{RouterConfig, RoutingStrategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub name: String,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            name: EnvKind::OccludedReach.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub episodes: usize,
    pub horizon: usize,
    /// Existing dataset file; generated from the run seed when absent.
    pub path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            episodes: 100,
            horizon: 1,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub posterior: String,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            posterior: "beta".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertSection {
    pub sub_policies: usize,
    pub encoder_hidden: Vec<usize>,
    pub code_dim: usize,
    pub score_hidden: Vec<usize>,
    pub activation: Activation,
    pub noise_band_split: bool,
}

impl Default for ExpertSection {
    fn default() -> Self {
        let d = ExpertConfig::default();
        Self {
            sub_policies: d.sub_policies,
            encoder_hidden: d.encoder_hidden,
            code_dim: d.code_dim,
            score_hidden: d.score_hidden,
            activation: d.activation,
            noise_band_split: d.noise_band_split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub router_steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 64,
            lr: 1e-3,
            router_steps: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterSection {
    pub hidden: Vec<usize>,
    pub strategy: String,
    /// Train experts and router end to end instead of routing frozen experts.
    pub joint: bool,
    pub gate_hidden: Vec<usize>,
}

impl Default for RouterSection {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            strategy: "soft".into(),
            joint: false,
            gate_hidden: vec![64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub importance_draws: usize,
    pub importance_sigma_factor: f64,
    pub ema_alpha: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 200,
            importance_draws: 1,
            importance_sigma_factor: 0.1,
            ema_alpha: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub modalities: Vec<String>,
    /// Any of `expert:<modality>`, `router`, `concat`, `moe`.
    pub methods: Vec<String>,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            modalities: vec!["vis".into(), "tac".into()],
            methods: vec![
                "expert:vis".into(),
                "expert:tac".into(),
                "router".into(),
                "concat".into(),
                "moe".into(),
            ],
            out_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSection,
    pub data: DataSection,
    pub diffusion: DiffusionSection,
    pub expert: ExpertSection,
    pub train: TrainSection,
    pub router: RouterSection,
    pub eval: EvalSection,
    pub run: RunSection,
}

/// A method that `run_training` can produce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Method {
    Expert(String),
    Router,
    Concat,
    Moe,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "router" => Ok(Self::Router),
            "concat" => Ok(Self::Concat),
            "moe" => Ok(Self::Moe),
            _ => match s.strip_prefix("expert:") {
                Some(m) if !m.is_empty() => Ok(Self::Expert(m.to_string())),
                _ => bail!(
                    Config,
                    "unknown method `{s}` (expert:<modality>, router, concat, moe)"
                ),
            },
        }
    }

    pub fn token(&self) -> String {
        match self {
            Self::Expert(m) => format!("expert:{m}"),
            Self::Router => "router".into(),
            Self::Concat => "concat".into(),
            Self::Moe => "moe".into(),
        }
    }

    /// File stem for this method's checkpoint and loss history.
    pub fn file_stem(&self) -> String {
        match self {
            Self::Expert(m) => format!("expert_{m}"),
            other => other.token(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let env = self.env_spec()?;
        let known = env.modalities();
        if self.run.modalities.is_empty() {
            bail!(Config, "run.modalities is empty");
        }
        for (i, m) in self.run.modalities.iter().enumerate() {
            if !known.iter().any(|(k, _)| k == m) {
                bail!(
                    Config,
                    "modality `{m}` does not exist in {}",
                    env.kind.name()
                );
            }
            if self.run.modalities[..i].contains(m) {
                bail!(Config, "modality `{m}` listed twice");
            }
        }
        for m in self.methods()? {
            if let Method::Expert(name) = &m {
                if !self.run.modalities.contains(name) {
                    bail!(
                        Config,
                        "method `expert:{name}` names a modality outside run.modalities"
                    );
                }
            }
        }
        if self.data.episodes == 0 || self.data.horizon == 0 {
            bail!(Config, "data.episodes and data.horizon must be >= 1");
        }
        if self.train.batch == 0 || !self.train.lr.is_finite() || self.train.lr <= 0.0 {
            bail!(Config, "train.batch must be >= 1 and train.lr > 0");
        }
        if self.eval.episodes == 0 || self.eval.importance_draws == 0 {
            bail!(
                Config,
                "eval.episodes and eval.importance_draws must be >= 1"
            );
        }
        if !(0.0..=1.0).contains(&self.eval.ema_alpha) {
            bail!(Config, "eval.ema_alpha must lie in [0, 1]");
        }
        self.schedule()?;
        self.strategy()?;
        Ok(())
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        Ok(EnvSpec::for_kind(EnvKind::parse(&self.env.name)?))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let d = &self.diffusion;
        Ok(make_schedule(d.steps, d.beta_start, d.beta_end)?
            .with_posterior(PosteriorVariance::parse(&d.posterior)?))
    }

    pub fn strategy(&self) -> Result<RoutingStrategy> {
        self.router.strategy.parse()
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.run.methods.iter().map(|m| Method::parse(m)).collect()
    }

    pub fn expert_config(&self) -> ExpertConfig {
        let e = &self.expert;
        ExpertConfig {
            sub_policies: e.sub_policies,
            encoder_hidden: e.encoder_hidden.clone(),
            code_dim: e.code_dim,
            score_hidden: e.score_hidden.clone(),
            activation: e.activation,
            noise_band_split: e.noise_band_split,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch: self.train.batch,
            lr: self.train.lr,
        }
    }

    pub fn router_train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.router_steps,
            ..self.train_config()
        }
    }

    pub fn router_config(&self) -> RouterConfig {
        RouterConfig {
            hidden: self.router.hidden.clone(),
            activation: self.expert.activation,
        }
    }

    /// Hash of the settings checkpoints must agree on to be composed:
    /// environment, action horizon and diffusion schedule.
    pub fn config_hash(&self) -> String {
        let d = &self.diffusion;
        let canonical = format!(
            "env={};horizon={};K={};beta={:?}..{:?};posterior={}",
            self.env.name, self.data.horizon, d.steps, d.beta_start, d.beta_end, d.posterior
        );
        hex16(&Sha256::digest(canonical.as_bytes()))
    }
}

pub(crate) fn hex16(digest: &[u8]) -> String {
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("[train]\nsteps = 10\n[run]\nseed = 4\n").unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.batch, 64);
        assert_eq!(cfg.run.seed, 4);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::from_toml("[train]\nstepz = 10\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(RunConfig::from_toml("[nope]\nx = 1\n").is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::from_toml("[run]\nmodalities = [\"vis\", \"audio\"]\n").is_err());
        assert!(RunConfig::from_toml("[run]\nmethods = [\"expert:audio\"]\n").is_err());
        assert!(RunConfig::from_toml("[router]\nstrategy = \"top3\"\n").is_err());
        assert!(RunConfig::from_toml("[env]\nname = \"maze\"\n").is_err());
        assert!(RunConfig::from_toml("[diffusion]\nbeta_end = 1.5\n").is_err());
    }

    #[test]
    fn hash_tracks_composition_settings_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.steps = 7;
        assert_eq!(a.config_hash(), b.config_hash());
        b.diffusion.steps = 20;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 16);
    }

    #[test]
    fn method_tokens() {
        for s in ["expert:vis", "router", "concat", "moe"] {
            assert_eq!(Method::parse(s).unwrap().token(), s);
        }
        assert!(Method::parse("expert:").is_err());
        assert!(Method::parse("mlp").is_err());
    }
}
