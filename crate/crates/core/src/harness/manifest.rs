//! Composed-policy manifests: a text file naming expert checkpoints plus
//! either fixed weights or a router checkpoint and routing strategy.
//!
//! ```text
//! version = 1
//! config_hash = 3f0c9a...
//! normalization_hash = 81d2e4...
//! strategy = soft
//! weights = 0.5,0.5
//! expert = vis.ckpt
//! expert = tac.ckpt
//! ```
//!
//! `router = <path>` replaces `weights`. Relative paths are resolved
//! against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::checkpoint::{
    concat_from_checkpoint, expert_from_checkpoint, load_checkpoint, moe_from_checkpoint,
    router_from_checkpoint, Checkpoint,
};
use super::config::hex16;
use crate::compose::{
    compose_policy, manual_compose, single_expert_policy, ComposedPolicy, Policy,
};
use crate::diffusion::Normalizer;
use crate::error::{bail, Error, Result};
use crate::experts::ModalityExpert;
use crate::router::RoutingStrategy;

const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ManifestWeights {
    Fixed(Vec<f64>),
    Router(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub experts: Vec<PathBuf>,
    pub weights: ManifestWeights,
    pub strategy: RoutingStrategy,
    pub config_hash: String,
    pub normalization_hash: String,
}

pub fn normalization_hash(n: &Normalizer) -> String {
    let mut h = Sha256::new();
    for v in n.min.iter().chain(&n.max) {
        h.update(v.to_le_bytes());
    }
    hex16(&h.finalize())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Path of `p` as written into a manifest stored in directory `base`.
fn relative_to(base: &Path, p: &Path) -> PathBuf {
    let abs = |q: &Path| std::path::absolute(q).unwrap_or_else(|_| q.to_path_buf());
    let (b, t) = (abs(base), abs(p));
    match t.strip_prefix(&b) {
        Ok(rel) => rel.to_path_buf(),
        Err(_) => t,
    }
}

fn check_hashes(cks: &[Checkpoint]) -> Result<String> {
    let first = cks[0].config_hash()?.to_string();
    for c in cks {
        if c.config_hash()? != first {
            bail!(
                Incompatible,
                "config hash {} differs from {first}",
                c.config_hash()?
            );
        }
    }
    Ok(first)
}

impl Manifest {
    /// Build a manifest for checkpoints, validating that they compose.
    pub fn create(
        experts: &[PathBuf],
        weights: ManifestWeights,
        strategy: RoutingStrategy,
    ) -> Result<Self> {
        let mut cks = experts
            .iter()
            .map(|p| load_checkpoint(p))
            .collect::<Result<Vec<_>>>()?;
        let loaded = cks
            .iter()
            .map(expert_from_checkpoint)
            .collect::<Result<Vec<_>>>()?;
        if let ManifestWeights::Router(p) = &weights {
            cks.push(load_checkpoint(p)?);
        }
        let config_hash = check_hashes(&cks)?;
        let manifest = Self {
            experts: experts.to_vec(),
            weights,
            strategy,
            config_hash,
            normalization_hash: normalization_hash(&loaded[0].normalizer),
        };
        manifest.assemble(
            loaded,
            cks.last()
                .filter(|_| matches!(manifest.weights, ManifestWeights::Router(_))),
        )?;
        Ok(manifest)
    }

    fn assemble(
        &self,
        experts: Vec<ModalityExpert>,
        router: Option<&Checkpoint>,
    ) -> Result<ComposedPolicy> {
        let Some(first) = experts.first() else {
            bail!(Config, "manifest lists no experts");
        };
        if normalization_hash(&first.normalizer) != self.normalization_hash {
            bail!(
                Incompatible,
                "normalization stats do not match the manifest"
            );
        }
        let schedule = first.schedule.clone();
        match (&self.weights, router) {
            (ManifestWeights::Fixed(w), _) => {
                Ok(manual_compose(experts, w, schedule)?.with_strategy(self.strategy))
            }
            (ManifestWeights::Router(_), Some(r)) => {
                compose_policy(experts, router_from_checkpoint(r)?, self.strategy, schedule)
            }
            (ManifestWeights::Router(_), None) => bail!(Contract, "router checkpoint not loaded"),
        }
    }

    /// Load every referenced checkpoint and build the policy. Relative paths
    /// are taken relative to `base`.
    pub fn load_policy(&self, base: &Path) -> Result<ComposedPolicy> {
        let mut cks = self
            .experts
            .iter()
            .map(|p| load_checkpoint(&resolve(base, p)))
            .collect::<Result<Vec<_>>>()?;
        let experts = cks
            .iter()
            .map(expert_from_checkpoint)
            .collect::<Result<Vec<_>>>()?;
        let router = match &self.weights {
            ManifestWeights::Router(p) => {
                cks.push(load_checkpoint(&resolve(base, p))?);
                cks.last()
            }
            ManifestWeights::Fixed(_) => None,
        };
        if check_hashes(&cks)? != self.config_hash {
            bail!(
                Incompatible,
                "checkpoints were trained under config hash {}, manifest expects {}",
                cks[0].config_hash()?,
                self.config_hash
            );
        }
        self.assemble(experts, router)
    }

    /// Text form with paths rewritten relative to `dir` where possible.
    pub fn to_text(&self, dir: &Path) -> String {
        let mut out = format!(
            "version = {VERSION}\nconfig_hash = {}\nnormalization_hash = {}\nstrategy = {}\n",
            self.config_hash, self.normalization_hash, self.strategy
        );
        match &self.weights {
            ManifestWeights::Fixed(w) => {
                out += &format!(
                    "weights = {}\n",
                    w.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
                );
            }
            ManifestWeights::Router(p) => {
                out += &format!("router = {}\n", relative_to(dir, p).display())
            }
        }
        for e in &self.experts {
            out += &format!("expert = {}\n", relative_to(dir, e).display());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let (mut config_hash, mut norm_hash, mut strategy) = (None, None, RoutingStrategy::Soft);
        let (mut weights, mut router, mut experts) = (None, None, Vec::new());
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let Some((k, v)) = line.split_once('=') else {
                bail!(Format, "malformed manifest line `{line}`");
            };
            let v = v.trim();
            match k.trim() {
                "version" => version = v.parse::<u32>().ok(),
                "config_hash" => config_hash = Some(v.to_string()),
                "normalization_hash" => norm_hash = Some(v.to_string()),
                "strategy" => strategy = v.parse()?,
                "weights" => weights = Some(parse_weights(v)?),
                "router" => router = Some(PathBuf::from(v)),
                "expert" => experts.push(PathBuf::from(v)),
                other => bail!(Format, "unknown manifest key `{other}`"),
            }
        }
        if version != Some(VERSION) {
            bail!(Format, "missing or unsupported manifest version");
        }
        let weights = match (weights, router) {
            (Some(w), None) => ManifestWeights::Fixed(w),
            (None, Some(r)) => ManifestWeights::Router(r),
            _ => bail!(
                Format,
                "manifest needs exactly one of `weights` and `router`"
            ),
        };
        if experts.is_empty() {
            bail!(Format, "manifest lists no experts");
        }
        Ok(Self {
            experts,
            weights,
            strategy,
            config_hash: config_hash
                .ok_or_else(|| Error::Format("manifest lacks config_hash".into()))?,
            normalization_hash: norm_hash
                .ok_or_else(|| Error::Format("manifest lacks normalization_hash".into()))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        fs::write(path, self.to_text(dir))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

pub fn parse_weights(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad weight `{w}`")))
        })
        .collect()
}

/// Load a policy from a manifest or from a single expert, concat or MoE
/// checkpoint.
pub fn load_policy(path: &Path) -> Result<Box<dyn Policy>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"MCPF") {
        let ck = Checkpoint::from_bytes(&bytes)?;
        return match ck.kind()? {
            "expert" => Ok(Box::new(single_expert_policy(expert_from_checkpoint(
                &ck,
            )?)?)),
            "concat" => Ok(Box::new(concat_from_checkpoint(&ck)?)),
            "moe" => Ok(Box::new(moe_from_checkpoint(&ck)?)),
            other => bail!(Config, "a `{other}` checkpoint is not a policy on its own"),
        };
    }
    let text =
        String::from_utf8(bytes).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    Ok(Box::new(Manifest::parse(&text)?.load_policy(dir)?))
}
