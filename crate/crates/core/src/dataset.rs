//! Demonstration datasets and their binary file format.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! "MCDS" | u32 version=1 | u16 len + env name
//! u32 episode count
//! u32 modality count, then per modality: u16 len + name, u32 dim
//! u32 robot-state dim | u32 action dim | u32 horizon
//! per episode: u32 step count, then per step every modality vector,
//!              the robot state and the action as f64
//! per action coordinate: f64 min, f64 max
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::diffusion::Normalizer;
use crate::envs::{
    env_reset, env_step, scripted_expert, EnvSpec, Observation, ACTION_DIM, ROBOT_STATE_DIM,
};
use crate::error::{bail, Error, Result};
use crate::rng::stream;

const MAGIC: &[u8; 4] = b"MCDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Observation,
    pub action: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: String,
    pub modalities: Vec<(String, usize)>,
    pub robot_state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub episodes: Vec<Episode>,
    pub normalizer: Normalizer,
}

/// Roll out the scripted expert until `n_episodes` successful episodes are
/// collected. Attempt `j` uses stream `(seed, j)`.
pub fn generate_dataset(
    spec: &EnvSpec,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    if n_episodes == 0 {
        bail!(Contract, "dataset needs at least one episode");
    }
    if horizon == 0 {
        bail!(Config, "action horizon must be >= 1");
    }
    let mut episodes = Vec::with_capacity(n_episodes);
    let mut attempt = 0u64;
    while episodes.len() < n_episodes {
        let mut rng = stream(seed, attempt);
        attempt += 1;
        let (mut state, mut obs) = env_reset(spec, &mut rng);
        let mut steps = Vec::new();
        while !state.done {
            let action = scripted_expert(&state, spec, &mut rng);
            let tr = env_step(spec, &mut state, &action)?;
            steps.push(Step {
                observation: obs,
                action: action.to_vec(),
            });
            obs = tr.observation;
        }
        if state.success {
            episodes.push(Episode { steps });
        }
        if attempt > 100 * n_episodes as u64 + 1000 {
            bail!(
                Numeric,
                "scripted expert keeps failing; collected {} of {n_episodes}",
                episodes.len()
            );
        }
    }
    let actions: Vec<&[f64]> = episodes
        .iter()
        .flat_map(|e| e.steps.iter().map(|s| s.action.as_slice()))
        .collect();
    let normalizer = Normalizer::fit(&actions)?;
    Ok(Dataset {
        env: spec.kind.name().to_string(),
        modalities: spec.modalities(),
        robot_state_dim: ROBOT_STATE_DIM,
        action_dim: ACTION_DIM,
        horizon,
        episodes,
        normalizer,
    })
}

/// Flattened, normalized training view of a dataset.
#[derive(Debug, Clone)]
pub struct Samples {
    pub len: usize,
    pub modalities: Vec<(String, usize, Vec<f64>)>,
    pub robot_state: Vec<f64>,
    pub robot_state_dim: usize,
    /// Normalized action chunks, `chunk_dim` values per sample.
    pub chunks: Vec<f64>,
    pub chunk_dim: usize,
}

impl Samples {
    pub fn modality(&self, name: &str) -> Result<(usize, &[f64])> {
        match self.modalities.iter().find(|(n, _, _)| n == name) {
            Some((_, d, v)) => Ok((*d, v)),
            None => bail!(Config, "dataset has no modality `{name}`"),
        }
    }

    pub fn modality_row(&self, name: &str, i: usize) -> Result<&[f64]> {
        let (d, v) = self.modality(name)?;
        Ok(&v[i * d..(i + 1) * d])
    }

    pub fn robot_state_row(&self, i: usize) -> &[f64] {
        &self.robot_state[i * self.robot_state_dim..(i + 1) * self.robot_state_dim]
    }

    pub fn chunk_row(&self, i: usize) -> &[f64] {
        &self.chunks[i * self.chunk_dim..(i + 1) * self.chunk_dim]
    }

    /// Observation of sample `i` (for composing experts on dataset states).
    pub fn observation(&self, i: usize) -> Observation {
        Observation {
            modalities: self
                .modalities
                .iter()
                .map(|(n, d, v)| (n.clone(), v[i * d..(i + 1) * d].to_vec()))
                .collect(),
            robot_state: self.robot_state_row(i).to_vec(),
        }
    }
}

impl Dataset {
    pub fn step_count(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn modality_dim(&self, name: &str) -> Result<usize> {
        match self.modalities.iter().find(|(n, _)| n == name) {
            Some((_, d)) => Ok(*d),
            None => bail!(Config, "dataset has no modality `{name}`"),
        }
    }

    /// Copy keeping only the listed modalities.
    pub fn restricted_to(&self, keep: &[&str]) -> Dataset {
        let mut out = self.clone();
        out.modalities.retain(|(n, _)| keep.contains(&n.as_str()));
        for ep in &mut out.episodes {
            for st in &mut ep.steps {
                st.observation
                    .modalities
                    .retain(|(n, _)| keep.contains(&n.as_str()));
            }
        }
        out
    }

    /// Flatten every step into a training sample with an `horizon`-long
    /// normalized action chunk (the last action repeats past episode end).
    pub fn samples(&self) -> Result<Samples> {
        let len = self.step_count();
        if len == 0 {
            bail!(Contract, "dataset has no steps");
        }
        let mut modalities: Vec<(String, usize, Vec<f64>)> = self
            .modalities
            .iter()
            .map(|(n, d)| (n.clone(), *d, Vec::with_capacity(len * d)))
            .collect();
        let mut robot_state = Vec::with_capacity(len * self.robot_state_dim);
        let chunk_dim = self.action_dim * self.horizon;
        let mut chunks = Vec::with_capacity(len * chunk_dim);
        for ep in &self.episodes {
            for (t, st) in ep.steps.iter().enumerate() {
                for (name, _, buf) in &mut modalities {
                    buf.extend_from_slice(st.observation.modality(name)?);
                }
                robot_state.extend_from_slice(&st.observation.robot_state);
                for h in 0..self.horizon {
                    let idx = (t + h).min(ep.steps.len() - 1);
                    chunks.extend(self.normalizer.normalize(&ep.steps[idx].action));
                }
            }
        }
        Ok(Samples {
            len,
            modalities,
            robot_state,
            robot_state_dim: self.robot_state_dim,
            chunks,
            chunk_dim,
        })
    }

    /// Per-coordinate standard deviation of each modality over all steps.
    pub fn modality_std(&self, name: &str) -> Result<Vec<f64>> {
        let d = self.modality_dim(name)?;
        let n = self.step_count() as f64;
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for ep in &self.episodes {
            for st in &ep.steps {
                for (i, v) in st.observation.modality(name)?.iter().enumerate() {
                    mean[i] += v;
                    sq[i] += v * v;
                }
            }
        }
        Ok(mean
            .iter()
            .zip(&sq)
            .map(|(m, s)| (s / n - (m / n).powi(2)).max(0.0).sqrt())
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.env);
        out.extend_from_slice(&(self.episodes.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.modalities.len() as u32).to_le_bytes());
        for (name, dim) in &self.modalities {
            put_str(&mut out, name);
            out.extend_from_slice(&(*dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.robot_state_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.action_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.horizon as u32).to_le_bytes());
        for ep in &self.episodes {
            out.extend_from_slice(&(ep.steps.len() as u32).to_le_bytes());
            for st in &ep.steps {
                for (_, v) in &st.observation.modalities {
                    put_reals(&mut out, v);
                }
                put_reals(&mut out, &st.observation.robot_state);
                put_reals(&mut out, &st.action);
            }
        }
        for (lo, hi) in self.normalizer.min.iter().zip(&self.normalizer.max) {
            put_reals(&mut out, &[*lo, *hi]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            bail!(Format, "not a dataset file (bad magic)");
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            bail!(Format, "unsupported dataset version {version}");
        }
        let env = get_str(&mut r)?;
        let n_episodes = get_u32(&mut r)? as usize;
        let n_mod = get_u32(&mut r)? as usize;
        let mut modalities = Vec::with_capacity(n_mod.min(64));
        for _ in 0..n_mod {
            let name = get_str(&mut r)?;
            let dim = get_u32(&mut r)? as usize;
            modalities.push((name, dim));
        }
        let robot_state_dim = get_u32(&mut r)? as usize;
        let action_dim = get_u32(&mut r)? as usize;
        let horizon = get_u32(&mut r)? as usize;
        let mut episodes = Vec::with_capacity(n_episodes.min(1 << 16));
        for _ in 0..n_episodes {
            let n_steps = get_u32(&mut r)? as usize;
            let mut steps = Vec::with_capacity(n_steps.min(1 << 16));
            for _ in 0..n_steps {
                let mut mods = Vec::with_capacity(modalities.len());
                for (name, dim) in &modalities {
                    mods.push((name.clone(), get_reals(&mut r, *dim)?));
                }
                let robot_state = get_reals(&mut r, robot_state_dim)?;
                let action = get_reals(&mut r, action_dim)?;
                steps.push(Step {
                    observation: Observation {
                        modalities: mods,
                        robot_state,
                    },
                    action,
                });
            }
            episodes.push(Episode { steps });
        }
        let mut min = Vec::with_capacity(action_dim);
        let mut max = Vec::with_capacity(action_dim);
        for _ in 0..action_dim {
            let pair = get_reals(&mut r, 2)?;
            min.push(pair[0]);
            max.push(pair[1]);
        }
        if (r.position() as usize) != bytes.len() {
            bail!(Format, "trailing bytes after dataset");
        }
        Ok(Dataset {
            env,
            modalities,
            robot_state_dim,
            action_dim,
            horizon,
            episodes,
            normalizer: Normalizer { min, max },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn put_reals(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated file".into()))
}

pub(crate) fn get_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn get_u16(r: &mut Cursor<&[u8]>) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn get_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let n = get_u16(r)? as usize;
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 string".into()))
}

pub(crate) fn get_reals(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        read_exact(r, &mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::TAC;

    #[test]
    fn single_episode_round_trips() {
        let d = generate_dataset(&EnvSpec::occluded_reach(), 1, 1, 3).unwrap();
        assert_eq!(d.episodes.len(), 1);
        let bytes = d.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = EnvSpec::occluded_reach();
        let a = generate_dataset(&spec, 5, 1, 11).unwrap().to_bytes();
        let b = generate_dataset(&spec, 5, 1, 11).unwrap().to_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn tactile_contact_is_sparse() {
        let d = generate_dataset(&EnvSpec::occluded_reach(), 100, 1, 1).unwrap();
        let total = d.step_count();
        let contact = d
            .episodes
            .iter()
            .flat_map(|e| &e.steps)
            .filter(|s| s.observation.modality(TAC).unwrap()[0] == 1.0)
            .count();
        let frac = contact as f64 / total as f64;
        assert!(frac > 0.0 && frac < 0.2, "contact fraction {frac}");
    }

    #[test]
    fn corrupted_or_truncated_files_are_rejected() {
        let d = generate_dataset(&EnvSpec::occluded_reach(), 2, 1, 3).unwrap();
        let mut bytes = d.to_bytes();
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn chunks_pad_with_last_action() {
        let d = generate_dataset(&EnvSpec::occluded_reach(), 2, 3, 3).unwrap();
        let s = d.samples().unwrap();
        assert_eq!(s.chunk_dim, 6);
        let last_ep_len = d.episodes[0].steps.len();
        let last = s.chunk_row(last_ep_len - 1);
        assert_eq!(last[0..2], last[2..4]);
        assert_eq!(last[2..4], last[4..6]);
        assert!(s.chunks.iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }
}
