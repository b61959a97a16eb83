//! Perturbation importance, sensor corruption and robustness scenarios.
//!
//! Importance probing never feeds the perturbed action back into the
//! environment: each probe replays the policy query with a clone of the
//! action stream, so the driven trajectory is the same as an unprobed run.

use std::io::Write;

use crate::compose::Policy;
use crate::dataset::Dataset;
use crate::envs::{env_step, observe, EnvSpec, EnvState, Observation};
use crate::error::{bail, Result};
use crate::rng::{NoiseSource, Rng};
use crate::rollout::{evaluate, scenario_reset, Actor, EpisodeStreams, EvalSummary};

pub const DEFAULT_EMA_ALPHA: f64 = 0.1;
const IMPORTANCE_GUARD: f64 = 1e-8;

/// Exponential moving average seeded with the first value.
pub fn ema(raw: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    for (t, &x) in raw.iter().enumerate() {
        let v = if t == 0 {
            x
        } else {
            out[t - 1] + alpha * (x - out[t - 1])
        };
        out.push(v);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceConfig {
    /// Per-coordinate noise scale for each probed modality.
    pub sigmas: Vec<(String, Vec<f64>)>,
    pub alpha: f64,
    /// Perturbation draws averaged per (step, modality).
    pub draws: usize,
}

impl ImportanceConfig {
    /// σ = `factor` × per-coordinate dataset std for every modality.
    pub fn calibrated(dataset: &Dataset, factor: f64) -> Result<Self> {
        let mut sigmas = Vec::new();
        for (name, _) in &dataset.modalities {
            let std = dataset.modality_std(name)?;
            sigmas.push((name.clone(), std.iter().map(|s| factor * s).collect()));
        }
        Ok(Self {
            sigmas,
            alpha: DEFAULT_EMA_ALPHA,
            draws: 1,
        })
    }
}

/// Where the agent was when the policy was queried.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    pub step: usize,
    pub occluded: bool,
    pub in_contact: bool,
    /// The agent has not yet entered the occlusion box.
    pub pre_occlusion: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityTrace {
    pub modality: String,
    pub sigma: Vec<f64>,
    pub raw: Vec<f64>,
    pub ema: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTrace {
    pub contexts: Vec<StepContext>,
    pub modalities: Vec<ModalityTrace>,
    /// Agent positions after every environment step.
    pub trajectory: Vec<[f64; 2]>,
    pub success: bool,
    pub steps: usize,
}

impl ImportanceTrace {
    pub fn modality(&self, name: &str) -> Option<&ModalityTrace> {
        self.modalities.iter().find(|m| m.modality == name)
    }

    /// Mean EMA importance of `name` over the query steps selected by `keep`.
    pub fn mean_ema_where(&self, name: &str, keep: impl Fn(&StepContext) -> bool) -> Option<f64> {
        let m = self.modality(name)?;
        let picked: Vec<f64> = self
            .contexts
            .iter()
            .zip(&m.ema)
            .filter(|(c, _)| keep(c))
            .map(|(_, &v)| v)
            .collect();
        if picked.is_empty() {
            None
        } else {
            Some(picked.iter().sum::<f64>() / picked.len() as f64)
        }
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "step,modality,raw_importance,ema_importance")?;
        for m in &self.modalities {
            for (i, c) in self.contexts.iter().enumerate() {
                writeln!(out, "{},{},{},{}", c.step, m.modality, m.raw[i], m.ema[i])?;
            }
        }
        Ok(())
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn context(spec: &EnvSpec, state: &EnvState, entered: bool) -> StepContext {
    let d = ((state.agent[0] - state.target[0]).powi(2)
        + (state.agent[1] - state.target[1]).powi(2))
    .sqrt();
    StepContext {
        step: state.t,
        occluded: spec.occlusion.contains(state.agent),
        in_contact: d <= spec.contact_radius,
        pre_occlusion: !entered,
    }
}

/// Roll out `policy` on episode `episode` of `seed`, probing every query step.
pub fn perturb_importance(
    policy: &dyn Policy,
    spec: &EnvSpec,
    seed: u64,
    episode: u64,
    cfg: &ImportanceConfig,
) -> Result<ImportanceTrace> {
    if cfg.draws == 0 {
        bail!(Config, "importance probing needs at least one draw");
    }
    if !(0.0..=1.0).contains(&cfg.alpha) {
        bail!(Config, "EMA alpha {} outside [0, 1]", cfg.alpha);
    }
    let scenario = ScenarioSpec::Baseline;
    let mut streams = EpisodeStreams::new(seed, episode);
    let mut state = scenario_reset(spec, &scenario, &mut streams);
    let probe_obs = observe(spec, &state);
    for (name, sigma) in &cfg.sigmas {
        let Ok(values) = probe_obs.modality(name) else {
            bail!(Config, "unknown modality `{name}` in importance config");
        };
        if sigma.len() != values.len() {
            bail!(
                Config,
                "modality `{name}` has {} coordinates, sigma has {}",
                values.len(),
                sigma.len()
            );
        }
    }

    let mut contexts = Vec::new();
    let mut raw: Vec<Vec<f64>> = vec![Vec::new(); cfg.sigmas.len()];
    let mut trajectory = Vec::new();
    let mut queue: Vec<Vec<f64>> = Vec::new();
    let mut entered = false;
    let dim = policy.action_dim();
    while !state.done {
        entered |= spec.occlusion.contains(state.agent);
        if queue.is_empty() {
            let obs = observe(spec, &state);
            let replay = streams.policy.clone();
            let chunk = policy.act(&obs, &mut streams.policy)?;
            contexts.push(context(spec, &state, entered));
            let first = &chunk[..dim];
            let norm = l2(first) + IMPORTANCE_GUARD;
            for (i, (name, sigma)) in cfg.sigmas.iter().enumerate() {
                let mut total = 0.0;
                for _ in 0..cfg.draws {
                    let mut perturbed = obs.clone();
                    for (x, s) in perturbed.modality_mut(name)?.iter_mut().zip(sigma) {
                        *x += s * streams.probe.standard_normal();
                    }
                    let mut rng = replay.clone();
                    let alt = policy.act(&perturbed, &mut rng)?;
                    total += l2_diff(&alt[..dim], first) / norm;
                }
                raw[i].push(total / cfg.draws as f64);
            }
            queue = chunk.chunks(dim).rev().map(<[f64]>::to_vec).collect();
        }
        let action = queue.pop().expect("nonempty action queue");
        env_step(spec, &mut state, &action)?;
        trajectory.push(state.agent);
    }

    let modalities = cfg
        .sigmas
        .iter()
        .zip(raw)
        .map(|((name, sigma), raw)| ModalityTrace {
            modality: name.clone(),
            sigma: sigma.clone(),
            ema: ema(&raw, cfg.alpha),
            raw,
        })
        .collect();
    Ok(ImportanceTrace {
        contexts,
        modalities,
        trajectory,
        success: state.success,
        steps: state.t,
    })
}

/// Driven trajectory of an unprobed rollout, for side-effect checks.
pub fn driven_trajectory(
    policy: &dyn Policy,
    spec: &EnvSpec,
    seed: u64,
    episode: u64,
) -> Result<Vec<[f64; 2]>> {
    let scenario = ScenarioSpec::Baseline;
    let mut streams = EpisodeStreams::new(seed, episode);
    let mut state = scenario_reset(spec, &scenario, &mut streams);
    let mut trajectory = Vec::new();
    let mut queue: Vec<Vec<f64>> = Vec::new();
    let dim = policy.action_dim();
    while !state.done {
        if queue.is_empty() {
            let chunk = policy.act(&observe(spec, &state), &mut streams.policy)?;
            queue = chunk.chunks(dim).rev().map(<[f64]>::to_vec).collect();
        }
        let action = queue.pop().expect("nonempty action queue");
        env_step(spec, &mut state, &action)?;
        trajectory.push(state.agent);
    }
    Ok(trajectory)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorruptionMode {
    Zero,
    Freeze,
    Gaussian(f64),
}

impl CorruptionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "freeze" => Ok(Self::Freeze),
            _ => match s.strip_prefix("gaussian:").map(str::parse::<f64>) {
                Some(Ok(sigma)) if sigma >= 0.0 && sigma.is_finite() => Ok(Self::Gaussian(sigma)),
                _ => bail!(
                    Config,
                    "unknown corruption mode `{s}` (zero, freeze, gaussian:<sigma>)"
                ),
            },
        }
    }
}

/// When a corruption is in force during an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionWindow {
    Always,
    /// From the first step the agent is inside the occlusion box onwards.
    AfterOcclusionEntry,
    /// Only while the agent is outside contact range of the target.
    OutsideContact,
}

impl CorruptionWindow {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "always" => Ok(Self::Always),
            "after_occlusion" => Ok(Self::AfterOcclusionEntry),
            "outside_contact" => Ok(Self::OutsideContact),
            _ => bail!(Config, "unknown corruption window `{s}`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    pub modality: String,
    pub mode: CorruptionMode,
    pub window: CorruptionWindow,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum ScenarioSpec {
    #[default]
    Baseline,
    /// Teleport the target to a fresh point in the occlusion box at step `step`
    /// (no effect if the episode ends first).
    RuntimePerturbation {
        step: usize,
    },
    /// Start the agent anywhere outside the occlusion box.
    Repositioning,
    Corruption(Corruption),
}

impl ScenarioSpec {
    pub fn validate(&self, spec: &EnvSpec) -> Result<()> {
        match self {
            Self::Corruption(c) if !spec.modalities().iter().any(|(m, _)| *m == c.modality) => {
                bail!(Config, "unknown modality `{}` for corruption", c.modality)
            }
            _ => Ok(()),
        }
    }
}

/// Scenario set used by the `robust` command, keyed by a CSV-safe label.
pub fn standard_scenarios(spec: &EnvSpec) -> Vec<(String, ScenarioSpec)> {
    let corrupt = |modality: &str, mode, window| {
        ScenarioSpec::Corruption(Corruption {
            modality: modality.into(),
            mode,
            window,
        })
    };
    let mut out = vec![
        ("baseline".to_string(), ScenarioSpec::Baseline),
        (
            "runtime_perturbation".to_string(),
            ScenarioSpec::RuntimePerturbation {
                step: spec.max_steps / 8,
            },
        ),
        ("repositioning".to_string(), ScenarioSpec::Repositioning),
    ];
    for m in [crate::envs::VIS, crate::envs::TAC] {
        for (mode, tag) in [
            (CorruptionMode::Zero, "zero"),
            (CorruptionMode::Freeze, "freeze"),
            (CorruptionMode::Gaussian(0.1), "gaussian0.1"),
        ] {
            out.push((
                format!("corrupt_{tag}_{m}_always"),
                corrupt(m, mode, CorruptionWindow::Always),
            ));
        }
    }
    out.push((
        "corrupt_zero_vis_after_occlusion".into(),
        corrupt(
            crate::envs::VIS,
            CorruptionMode::Zero,
            CorruptionWindow::AfterOcclusionEntry,
        ),
    ));
    out.push((
        "corrupt_zero_tac_outside_contact".into(),
        corrupt(
            crate::envs::TAC,
            CorruptionMode::Zero,
            CorruptionWindow::OutsideContact,
        ),
    ));
    out
}

/// Apply `mode` to modality `name`; `held` is the frozen value for `Freeze`.
pub fn corrupt_modality(
    obs: &Observation,
    name: &str,
    mode: CorruptionMode,
    held: &[f64],
    noise: &mut impl NoiseSource,
) -> Result<Observation> {
    let mut out = obs.clone();
    let v = out.modality_mut(name)?;
    match mode {
        CorruptionMode::Zero => v.iter_mut().for_each(|x| *x = 0.0),
        CorruptionMode::Freeze => {
            if held.len() != v.len() {
                bail!(
                    Shape,
                    "held value has {} coordinates, modality has {}",
                    held.len(),
                    v.len()
                );
            }
            v.copy_from_slice(held);
        }
        CorruptionMode::Gaussian(sigma) => {
            for x in v.iter_mut() {
                let d = noise.standard_normal();
                if sigma != 0.0 {
                    *x += sigma * d;
                }
            }
        }
    }
    Ok(out)
}

/// Per-episode corruption state.
pub struct Corruptor {
    spec: Corruption,
    started: bool,
    held: Option<Vec<f64>>,
}

impl Corruptor {
    pub fn new(spec: Corruption) -> Self {
        Self {
            spec,
            started: false,
            held: None,
        }
    }

    pub fn for_scenario(scenario: &ScenarioSpec) -> Option<Self> {
        match scenario {
            ScenarioSpec::Corruption(c) => Some(Self::new(c.clone())),
            _ => None,
        }
    }

    pub fn apply(
        &mut self,
        env: &EnvSpec,
        state: &EnvState,
        obs: Observation,
        rng: &mut Rng,
    ) -> Result<Observation> {
        let active = match self.spec.window {
            CorruptionWindow::Always => true,
            CorruptionWindow::AfterOcclusionEntry => {
                self.started |= env.occlusion.contains(state.agent);
                self.started
            }
            CorruptionWindow::OutsideContact => {
                let d = ((state.agent[0] - state.target[0]).powi(2)
                    + (state.agent[1] - state.target[1]).powi(2))
                .sqrt();
                d > env.contact_radius
            }
        };
        if !active {
            return Ok(obs);
        }
        let held = match &self.held {
            Some(h) => h.clone(),
            None => {
                let h = obs.modality(&self.spec.modality)?.to_vec();
                self.held = Some(h.clone());
                h
            }
        };
        corrupt_modality(&obs, &self.spec.modality, self.spec.mode, &held, rng)
    }
}

/// Success rate and mean steps of `policy` under `scenario`.
pub fn robustness_eval(
    policy: &dyn Policy,
    spec: &EnvSpec,
    scenario: &ScenarioSpec,
    n: usize,
    seed: u64,
) -> Result<EvalSummary> {
    scenario.validate(spec)?;
    evaluate(&Actor::Policy(policy), spec, scenario, n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{env_reset, VIS};
    use crate::rng::{seeded, ZeroNoise};

    #[test]
    fn ema_constant_is_fixed_point() {
        assert_eq!(ema(&[0.3; 6], 0.1), vec![0.3; 6]);
    }

    #[test]
    fn ema_impulse_decays_geometrically() {
        let out = ema(&[1.0, 0.0, 0.0, 0.0], 0.1);
        let want = [1.0, 0.9, 0.81, 0.729];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ema_stays_within_prefix_range() {
        let raw = [0.5, 2.0, 0.1, 0.7, 3.0, 0.0];
        let out = ema(&raw, 0.1);
        for t in 0..raw.len() {
            let lo = raw[..=t].iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = raw[..=t].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(out[t] >= lo && out[t] <= hi);
        }
    }

    fn sample_obs() -> Observation {
        let spec = EnvSpec::occluded_reach();
        let (_, obs) = env_reset(&spec, &mut seeded(3));
        obs
    }

    #[test]
    fn zero_corruption_clears_vision_and_is_idempotent() {
        let obs = sample_obs();
        let once = corrupt_modality(&obs, VIS, CorruptionMode::Zero, &[], &mut ZeroNoise).unwrap();
        assert_eq!(once.modality(VIS).unwrap(), &[0.0; 5]);
        let twice =
            corrupt_modality(&once, VIS, CorruptionMode::Zero, &[], &mut ZeroNoise).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn zero_sigma_gaussian_is_identity() {
        let obs = sample_obs();
        let out = corrupt_modality(
            &obs,
            VIS,
            CorruptionMode::Gaussian(0.0),
            &[],
            &mut seeded(1),
        )
        .unwrap();
        assert_eq!(out, obs);
    }

    #[test]
    fn freeze_holds_first_value() {
        let spec = EnvSpec::occluded_reach();
        let mut rng = seeded(5);
        let (mut state, _) = env_reset(&spec, &mut rng);
        let mut c = Corruptor::new(Corruption {
            modality: VIS.into(),
            mode: CorruptionMode::Freeze,
            window: CorruptionWindow::Always,
        });
        let mut seen = Vec::new();
        for _ in 0..3 {
            let obs = observe(&spec, &state);
            seen.push(
                c.apply(&spec, &state, obs, &mut rng)
                    .unwrap()
                    .modality(VIS)
                    .unwrap()
                    .to_vec(),
            );
            env_step(&spec, &mut state, &[1.0, 0.0]).unwrap();
        }
        assert_eq!(seen[0], seen[1]);
        assert_eq!(seen[1], seen[2]);
        assert_ne!(
            observe(&spec, &state).modality(VIS).unwrap(),
            seen[0].as_slice()
        );
    }

    #[test]
    fn unknown_modality_is_rejected() {
        let obs = sample_obs();
        assert!(
            corrupt_modality(&obs, "audio", CorruptionMode::Zero, &[], &mut ZeroNoise).is_err()
        );
        let spec = EnvSpec::occluded_reach();
        let bad = ScenarioSpec::Corruption(Corruption {
            modality: "audio".into(),
            mode: CorruptionMode::Zero,
            window: CorruptionWindow::Always,
        });
        assert!(bad.validate(&spec).is_err());
        assert!(ScenarioSpec::RuntimePerturbation {
            step: spec.max_steps
        }
        .validate(&spec)
        .is_ok());
    }

    #[test]
    fn corruption_mode_tokens() {
        assert_eq!(CorruptionMode::parse("zero").unwrap(), CorruptionMode::Zero);
        assert_eq!(
            CorruptionMode::parse("gaussian:0.2").unwrap(),
            CorruptionMode::Gaussian(0.2)
        );
        assert!(CorruptionMode::parse("gaussian:-1").is_err());
        assert!(CorruptionMode::parse("blur").is_err());
    }
}
