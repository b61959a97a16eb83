//! Seeded policy rollouts and success-rate evaluation.

use rayon::prelude::*;

use crate::analysis::{Corruptor, ScenarioSpec};
use crate::compose::Policy;
use crate::envs::{
    env_reset, env_step, observe, random_action, scripted_expert, EnvSpec, EnvState, Rect,
};
use crate::error::{bail, Result};
use crate::rng::{stream, stream_key, uniform, Rng};

/// Streams used by episode `index` of an evaluation seeded with `seed`.
pub struct EpisodeStreams {
    pub env: Rng,
    pub policy: Rng,
    pub probe: Rng,
    pub scenario: Rng,
}

impl EpisodeStreams {
    pub fn new(seed: u64, index: u64) -> Self {
        let key = stream_key(seed, index);
        Self {
            env: stream(key, 0),
            policy: stream(key, 1),
            probe: stream(key, 2),
            scenario: stream(key, 3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps: usize,
}

/// Who chooses actions during a rollout.
pub enum Actor<'a> {
    Policy(&'a dyn Policy),
    Scripted,
    Random,
}

fn outside_box(spec: &EnvSpec, rng: &mut Rng) -> [f64; 2] {
    let a = spec.arena;
    let o: Rect = spec.occlusion;
    loop {
        let p = [uniform(rng, -a, a), uniform(rng, -a, a)];
        if !o.contains(p) {
            return p;
        }
    }
}

/// Reset honoring a scenario's initial-state changes.
pub(crate) fn scenario_reset(
    spec: &EnvSpec,
    scenario: &ScenarioSpec,
    streams: &mut EpisodeStreams,
) -> EnvState {
    let (mut state, _) = env_reset(spec, &mut streams.env);
    if let ScenarioSpec::Repositioning = scenario {
        state.agent = outside_box(spec, &mut streams.scenario);
    }
    state
}

/// Apply a mid-episode scenario event before the step at time `state.t`.
pub(crate) fn scenario_event(
    spec: &EnvSpec,
    scenario: &ScenarioSpec,
    state: &mut EnvState,
    rng: &mut Rng,
) {
    if let ScenarioSpec::RuntimePerturbation { step } = scenario {
        if state.t == *step {
            let o = spec.occlusion;
            state.target = [uniform(rng, o.x0, o.x1), uniform(rng, o.y0, o.y1)];
            if spec.kind == crate::envs::EnvKind::OccludedReach {
                state.waypoint = state.target;
            }
        }
    }
}

/// Run one episode.
pub fn run_episode(
    actor: &Actor<'_>,
    spec: &EnvSpec,
    scenario: &ScenarioSpec,
    seed: u64,
    index: u64,
) -> Result<EpisodeOutcome> {
    let mut streams = EpisodeStreams::new(seed, index);
    let mut state = scenario_reset(spec, scenario, &mut streams);
    let mut corruptor = Corruptor::for_scenario(scenario);
    let mut queue: Vec<Vec<f64>> = Vec::new();
    while !state.done {
        scenario_event(spec, scenario, &mut state, &mut streams.scenario);
        let action = match actor {
            Actor::Scripted => scripted_expert(&state, spec, &mut streams.policy).to_vec(),
            Actor::Random => random_action(&mut streams.policy).to_vec(),
            Actor::Policy(p) => {
                if queue.is_empty() {
                    let mut obs = observe(spec, &state);
                    if let Some(c) = corruptor.as_mut() {
                        obs = c.apply(spec, &state, obs, &mut streams.scenario)?;
                    }
                    let chunk = p.act(&obs, &mut streams.policy)?;
                    if chunk.len() != p.action_dim() * p.horizon() {
                        bail!(Shape, "policy returned {} values", chunk.len());
                    }
                    queue = chunk
                        .chunks(p.action_dim())
                        .rev()
                        .map(<[f64]>::to_vec)
                        .collect();
                }
                queue.pop().expect("nonempty action queue")
            }
        };
        env_step(spec, &mut state, &action)?;
    }
    Ok(EpisodeOutcome {
        success: state.success,
        steps: state.t,
    })
}

/// Aggregate over `n` episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean episode length, failures counted at the step limit.
    pub mean_steps: f64,
}

impl EvalSummary {
    pub fn from_outcomes(outcomes: &[EpisodeOutcome], max_steps: usize) -> Self {
        let n = outcomes.len();
        let successes = outcomes.iter().filter(|o| o.success).count();
        let total: usize = outcomes
            .iter()
            .map(|o| if o.success { o.steps } else { max_steps })
            .sum();
        Self {
            episodes: n,
            successes,
            success_rate: successes as f64 / n.max(1) as f64,
            mean_steps: total as f64 / n.max(1) as f64,
        }
    }
}

/// Run episodes `0..n` (in parallel; results are ordered by episode index).
pub fn evaluate_outcomes(
    actor: &Actor<'_>,
    spec: &EnvSpec,
    scenario: &ScenarioSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<EpisodeOutcome>> {
    if n == 0 {
        bail!(Contract, "evaluation needs at least one episode");
    }
    let actor_ref = actor;
    (0..n as u64)
        .into_par_iter()
        .map(|j| run_episode(actor_ref, spec, scenario, seed, j))
        .collect()
}

pub fn evaluate(
    actor: &Actor<'_>,
    spec: &EnvSpec,
    scenario: &ScenarioSpec,
    n: usize,
    seed: u64,
) -> Result<EvalSummary> {
    let outcomes = evaluate_outcomes(actor, spec, scenario, n, seed)?;
    Ok(EvalSummary::from_outcomes(&outcomes, spec.max_steps))
}
