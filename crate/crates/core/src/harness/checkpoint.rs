//! Binary checkpoints of named parameter tensors.
//!
//! ```text
//! "MCPF" | u32 version=1 | u32 len + UTF-8 metadata
//! u32 tensor count, then per tensor:
//!   u16 len + UTF-8 name | u8 rank | rank × u32 dims | f64 payload (row-major)
//! ```
//!
//! Integers and reals are little-endian. Metadata is `key = value` lines in
//! key order. Network shapes are recovered from tensor dims.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::baselines::{ConcatPolicy, FusionCore, MoEFeaturePolicy};
use crate::dataset::{get_reals, get_str, get_u32, put_reals, put_str, read_exact};
use crate::diffusion::{make_schedule, NoiseSchedule, Normalizer, PosteriorVariance};
use crate::error::{bail, Error, Result};
use crate::experts::{ActionShape, ModalityExpert};
use crate::numcore::{Activation, Mlp, MlpSpec, ParamSet, Tensor};
use crate::router::Router;

const MAGIC: &[u8; 4] = b"MCPF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Result<&str> {
        match self.metadata.get(key) {
            Some(v) => Ok(v),
            None => bail!(Format, "checkpoint metadata lacks `{key}`"),
        }
    }

    fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("bad value `{raw}` for `{key}`")))
    }

    pub fn kind(&self) -> Result<&str> {
        self.meta("kind")
    }

    pub fn config_hash(&self) -> Result<&str> {
        self.meta("config_hash")
    }

    pub fn metadata_text(&self) -> String {
        self.metadata
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || k.trim() != k || v.contains('\n') || v.trim() != v {
                bail!(Contract, "metadata entry `{k}` cannot be stored");
            }
        }
        let meta = self.metadata_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.params.names().count() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            if name.len() > u16::MAX as usize || t.dims().len() > u8::MAX as usize {
                bail!(Contract, "tensor `{name}` cannot be stored");
            }
            put_str(&mut out, name);
            out.push(t.dims().len() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_reals(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            bail!(Format, "not a checkpoint (bad magic)");
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            bail!(Format, "unsupported checkpoint version {version}");
        }
        let meta_len = get_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta)?;
        let meta =
            String::from_utf8(meta).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let Some((k, v)) = line.split_once(" = ") else {
                bail!(Format, "malformed metadata line `{line}`");
            };
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = get_u32(&mut r)?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = get_str(&mut r)?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank)?;
            let dims = (0..rank[0])
                .map(|_| get_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            if n > bytes.len() / 8 {
                bail!(Format, "tensor `{name}` larger than the file");
            }
            let data = get_reals(&mut r, n)?;
            params.insert(
                name,
                Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))?,
            )?;
        }
        if (r.position() as usize) != bytes.len() {
            bail!(Format, "trailing bytes after checkpoint");
        }
        Ok(Self { metadata, params })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn split_reals(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.parse()
                .map_err(|_| Error::Format(format!("bad real `{x}`")))
        })
        .collect()
}

fn named_dims(v: &[(String, usize)]) -> String {
    v.iter()
        .map(|(n, d)| format!("{n}:{d}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_named_dims(s: &str) -> Result<Vec<(String, usize)>> {
    s.split(',')
        .map(|item| {
            let (n, d) = item
                .split_once(':')
                .ok_or_else(|| Error::Format(format!("bad modality entry `{item}`")))?;
            let d = d
                .parse()
                .map_err(|_| Error::Format(format!("bad dim in `{item}`")))?;
            Ok((n.to_string(), d))
        })
        .collect()
}

/// Rebuild an MLP from the `{prefix}.w{l}` tensors present in `params`.
fn mlp_from_params(prefix: &str, params: &ParamSet, activation: Activation) -> Result<Mlp> {
    let probe = Mlp::new(
        prefix,
        MlpSpec {
            input_dim: 1,
            hidden: vec![],
            output_dim: 1,
            activation,
        },
    );
    let mut dims = Vec::new();
    while params.contains(&probe.weight_name(dims.len())) {
        let w = params.get(&probe.weight_name(dims.len()))?;
        if w.dims().len() != 2 {
            bail!(
                Format,
                "weight `{}` is not a matrix",
                probe.weight_name(dims.len())
            );
        }
        dims.push((w.rows(), w.cols()));
    }
    if dims.is_empty() {
        bail!(Format, "checkpoint has no network `{prefix}`");
    }
    for pair in dims.windows(2) {
        if pair[0].1 != pair[1].0 {
            bail!(Format, "network `{prefix}` has inconsistent layer widths");
        }
    }
    let hidden: Vec<usize> = dims[..dims.len() - 1].iter().map(|d| d.1).collect();
    let mlp = Mlp::new(
        prefix,
        MlpSpec::new(dims[0].0, &hidden, dims[dims.len() - 1].1, activation)?,
    );
    for (l, &(_, out)) in dims.iter().enumerate() {
        if params.get(&mlp.bias_name(l))?.len() != out {
            bail!(Format, "bias `{}` has the wrong length", mlp.bias_name(l));
        }
    }
    Ok(mlp)
}

#[allow(clippy::too_many_arguments)]
fn put_common(
    m: &mut BTreeMap<String, String>,
    kind: &str,
    config_hash: &str,
    shape: ActionShape,
    sched: &NoiseSchedule,
    norm: &Normalizer,
    activation: Activation,
    trained_steps: usize,
) {
    m.insert("kind".into(), kind.into());
    m.insert("config_hash".into(), config_hash.into());
    m.insert("action_dim".into(), shape.action_dim.to_string());
    m.insert("horizon".into(), shape.horizon.to_string());
    m.insert("diffusion_steps".into(), sched.steps().to_string());
    m.insert("beta_start".into(), sched.beta_start().to_string());
    m.insert("beta_end".into(), sched.beta_end().to_string());
    m.insert("posterior".into(), sched.posterior().token().into());
    m.insert("normalizer_min".into(), join(&norm.min));
    m.insert("normalizer_max".into(), join(&norm.max));
    m.insert("activation".into(), activation.token().into());
    m.insert("trained_steps".into(), trained_steps.to_string());
}

struct Common {
    shape: ActionShape,
    schedule: NoiseSchedule,
    normalizer: Normalizer,
    activation: Activation,
    trained_steps: usize,
}

fn get_common(c: &Checkpoint, kind: &str) -> Result<Common> {
    if c.kind()? != kind {
        bail!(
            Incompatible,
            "expected a `{kind}` checkpoint, found `{}`",
            c.kind()?
        );
    }
    let schedule = make_schedule(
        c.meta_parse("diffusion_steps")?,
        c.meta_parse("beta_start")?,
        c.meta_parse("beta_end")?,
    )?
    .with_posterior(PosteriorVariance::parse(c.meta("posterior")?)?);
    let normalizer = Normalizer {
        min: split_reals(c.meta("normalizer_min")?)?,
        max: split_reals(c.meta("normalizer_max")?)?,
    };
    if normalizer.min.len() != normalizer.max.len() {
        bail!(Format, "normalizer bounds differ in length");
    }
    Ok(Common {
        shape: ActionShape {
            action_dim: c.meta_parse("action_dim")?,
            horizon: c.meta_parse("horizon")?,
        },
        schedule,
        normalizer,
        activation: Activation::parse(c.meta("activation")?)?,
        trained_steps: c.meta_parse("trained_steps")?,
    })
}

pub fn expert_checkpoint(e: &ModalityExpert, config_hash: &str) -> Checkpoint {
    let mut m = BTreeMap::new();
    put_common(
        &mut m,
        "expert",
        config_hash,
        e.shape,
        &e.schedule,
        &e.normalizer,
        e.encoder.spec.activation,
        e.trained_steps,
    );
    m.insert("modality".into(), e.modality.clone());
    m.insert("modality_dim".into(), e.modality_dim.to_string());
    m.insert("robot_state_dim".into(), e.robot_state_dim.to_string());
    m.insert("sub_policies".into(), e.sub_policies.len().to_string());
    m.insert("noise_band_split".into(), e.noise_band_split.to_string());
    Checkpoint {
        metadata: m,
        params: e.params.clone(),
    }
}

pub fn expert_from_checkpoint(c: &Checkpoint) -> Result<ModalityExpert> {
    let common = get_common(c, "expert")?;
    let encoder = mlp_from_params("enc", &c.params, common.activation)?;
    let n_sub: usize = c.meta_parse("sub_policies")?;
    let sub_policies = (0..n_sub)
        .map(|j| mlp_from_params(&format!("sub{j}"), &c.params, common.activation))
        .collect::<Result<Vec<_>>>()?;
    let expert = ModalityExpert {
        modality: c.meta("modality")?.to_string(),
        modality_dim: c.meta_parse("modality_dim")?,
        robot_state_dim: c.meta_parse("robot_state_dim")?,
        shape: common.shape,
        params: c.params.clone(),
        encoder,
        sub_policies,
        noise_band_split: c.meta_parse("noise_band_split")?,
        schedule: common.schedule,
        normalizer: common.normalizer,
        trained_steps: common.trained_steps,
        loss_history: Vec::new(),
    };
    expert.validate()?;
    Ok(expert)
}

pub fn router_checkpoint(r: &Router, config_hash: &str) -> Checkpoint {
    let mut m = BTreeMap::new();
    m.insert("kind".into(), "router".into());
    m.insert("config_hash".into(), config_hash.into());
    let dims: Vec<(String, usize)> = r
        .modalities
        .iter()
        .cloned()
        .zip(r.embedding_dims.iter().copied())
        .collect();
    m.insert("modalities".into(), named_dims(&dims));
    m.insert("activation".into(), r.net.spec.activation.token().into());
    m.insert("trained_steps".into(), r.trained_steps.to_string());
    Checkpoint {
        metadata: m,
        params: r.params.clone(),
    }
}

pub fn router_from_checkpoint(c: &Checkpoint) -> Result<Router> {
    if c.kind()? != "router" {
        bail!(
            Incompatible,
            "expected a `router` checkpoint, found `{}`",
            c.kind()?
        );
    }
    let dims = parse_named_dims(c.meta("modalities")?)?;
    let net = mlp_from_params(
        "router",
        &c.params,
        Activation::parse(c.meta("activation")?)?,
    )?;
    let input: usize = dims.iter().map(|d| d.1).sum();
    if net.spec.input_dim != input || net.spec.output_dim != dims.len() {
        bail!(Format, "router network does not match its modality list");
    }
    Ok(Router {
        modalities: dims.iter().map(|d| d.0.clone()).collect(),
        embedding_dims: dims.iter().map(|d| d.1).collect(),
        params: c.params.clone(),
        net,
        trained_steps: c.meta_parse("trained_steps")?,
    })
}

fn fusion_checkpoint(core: &FusionCore, kind: &str, config_hash: &str) -> Checkpoint {
    let mut m = BTreeMap::new();
    put_common(
        &mut m,
        kind,
        config_hash,
        core.shape,
        &core.schedule,
        &core.normalizer,
        core.score.spec.activation,
        core.trained_steps,
    );
    m.insert("modalities".into(), named_dims(&core.modalities));
    m.insert("robot_state_dim".into(), core.robot_state_dim.to_string());
    Checkpoint {
        metadata: m,
        params: core.params.clone(),
    }
}

fn fusion_from_checkpoint(c: &Checkpoint, kind: &str) -> Result<FusionCore> {
    let common = get_common(c, kind)?;
    let modalities = parse_named_dims(c.meta("modalities")?)?;
    let encoders = modalities
        .iter()
        .map(|(name, _)| mlp_from_params(&format!("enc.{name}"), &c.params, common.activation))
        .collect::<Result<Vec<_>>>()?;
    for ((name, dim), enc) in modalities.iter().zip(&encoders) {
        if enc.spec.input_dim != *dim {
            bail!(
                Format,
                "encoder for `{name}` expects {} inputs, metadata says {dim}",
                enc.spec.input_dim
            );
        }
    }
    Ok(FusionCore {
        modalities,
        robot_state_dim: c.meta_parse("robot_state_dim")?,
        shape: common.shape,
        params: c.params.clone(),
        encoders,
        score: mlp_from_params("score", &c.params, common.activation)?,
        schedule: common.schedule,
        normalizer: common.normalizer,
        trained_steps: common.trained_steps,
        loss_history: Vec::new(),
    })
}

pub fn concat_checkpoint(p: &ConcatPolicy, config_hash: &str) -> Checkpoint {
    fusion_checkpoint(&p.core, "concat", config_hash)
}

pub fn concat_from_checkpoint(c: &Checkpoint) -> Result<ConcatPolicy> {
    Ok(ConcatPolicy {
        core: fusion_from_checkpoint(c, "concat")?,
    })
}

pub fn moe_checkpoint(p: &MoEFeaturePolicy, config_hash: &str) -> Checkpoint {
    fusion_checkpoint(&p.core, "moe", config_hash)
}

pub fn moe_from_checkpoint(c: &Checkpoint) -> Result<MoEFeaturePolicy> {
    let core = fusion_from_checkpoint(c, "moe")?;
    let gate = mlp_from_params("gate", &c.params, core.score.spec.activation)?;
    Ok(MoEFeaturePolicy { core, gate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::experts::ExpertConfig;
    use crate::rng::seeded;

    fn small_expert() -> ModalityExpert {
        let cfg = ExpertConfig {
            encoder_hidden: vec![4],
            code_dim: 3,
            score_hidden: vec![5],
            ..ExpertConfig::default()
        };
        let sched = make_schedule(10, 1e-4, 0.02).unwrap();
        let shape = ActionShape {
            action_dim: 2,
            horizon: 1,
        };
        let norm = Normalizer {
            min: vec![-0.1, -0.3],
            max: vec![0.7, 1.0 / 3.0],
        };
        ModalityExpert::init("vis", 5, 2, shape, &cfg, sched, norm, &mut seeded(1)).unwrap()
    }

    #[test]
    fn bytes_round_trip_is_identical() {
        let ck = expert_checkpoint(&small_expert(), "abc123");
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn expert_rebuilds_exactly() {
        let e = small_expert();
        let back = expert_from_checkpoint(
            &Checkpoint::from_bytes(&expert_checkpoint(&e, "h").to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back.params.fingerprint(), e.params.fingerprint());
        assert_eq!(back.encoder, e.encoder);
        assert_eq!(back.sub_policies, e.sub_policies);
        assert_eq!(back.normalizer, e.normalizer);
        assert_eq!(back.schedule, e.schedule);
    }

    #[test]
    fn header_layout() {
        let ck = expert_checkpoint(&small_expert(), "h");
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"MCPF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(&bytes[12..12 + meta_len], ck.metadata_text().as_bytes());
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let bytes = expert_checkpoint(&small_expert(), "h").to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn wrong_kind_is_incompatible() {
        let ck = expert_checkpoint(&small_expert(), "h");
        assert!(matches!(
            router_from_checkpoint(&ck),
            Err(Error::Incompatible(_))
        ));
    }
}
