//! Synthetic 2-D reaching tasks in which each sensory stream is informative
//! only during part of an episode.
//!
//! `occluded_reach`: the target sits inside an occlusion box. Vision reports
//! the target while the agent is outside the box and goes blank inside it;
//! touch reports the target offset only within the contact radius.
//!
//! `phase_reach`: two waypoints visited in order. Vision sees waypoint 1 during
//! stage 0, touch sees the offset to waypoint 2 during stage 1.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::{uniform, NoiseSource, Rng};

pub const VIS: &str = "vis";
pub const TAC: &str = "tac";
pub const VIS_DIM: usize = 5;
pub const TAC_DIM: usize = 3;
pub const ROBOT_STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    OccludedReach,
    PhaseReach,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::OccludedReach => "occluded_reach",
            EnvKind::PhaseReach => "phase_reach",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "occluded_reach" => Ok(EnvKind::OccludedReach),
            "phase_reach" => Ok(EnvKind::PhaseReach),
            other => bail!(Config, "unknown environment `{other}`"),
        }
    }
}

/// Axis-aligned rectangle, closed on all sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    /// Arena is `[-arena, arena]²`.
    pub arena: f64,
    pub occlusion: Rect,
    pub contact_radius: f64,
    pub success_radius: f64,
    pub max_steps: usize,
    pub max_speed: f64,
    /// Std of the scripted expert's exploration noise during approach.
    pub expert_noise: f64,
    /// Half-width of the hidden lateral offset between the expert's box
    /// entry point and the target row.
    pub entry_jitter: f64,
}

impl EnvSpec {
    pub fn occluded_reach() -> Self {
        Self {
            kind: EnvKind::OccludedReach,
            arena: 1.0,
            occlusion: Rect {
                x0: 0.3,
                x1: 0.9,
                y0: -0.3,
                y1: 0.3,
            },
            contact_radius: 0.15,
            success_radius: 0.05,
            max_steps: 80,
            max_speed: 0.08,
            expert_noise: 0.02,
            entry_jitter: 0.12,
        }
    }

    pub fn phase_reach() -> Self {
        Self {
            kind: EnvKind::PhaseReach,
            ..Self::occluded_reach()
        }
    }

    pub fn for_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::OccludedReach => Self::occluded_reach(),
            EnvKind::PhaseReach => Self::phase_reach(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.occlusion;
        let a = self.arena;
        if !(o.x0 < o.x1 && o.y0 < o.y1 && o.x0 >= -a && o.x1 <= a && o.y0 >= -a && o.y1 <= a) {
            bail!(Config, "occlusion box must lie inside the arena");
        }
        if !(self.success_radius > 0.0 && self.success_radius <= self.contact_radius) {
            bail!(Config, "need 0 < success radius <= contact radius");
        }
        if self.max_steps == 0 || self.max_speed <= 0.0 {
            bail!(Config, "max steps and max speed must be positive");
        }
        if !(self.expert_noise >= 0.0 && self.entry_jitter >= 0.0) {
            bail!(Config, "expert noise and entry jitter must be nonnegative");
        }
        Ok(())
    }

    pub fn modalities(&self) -> Vec<(String, usize)> {
        vec![(VIS.to_string(), VIS_DIM), (TAC.to_string(), TAC_DIM)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub agent: [f64; 2],
    /// Final goal (the occluded target, or waypoint 2).
    pub target: [f64; 2],
    /// Waypoint 1 for `phase_reach`; equals `target` otherwise.
    pub waypoint: [f64; 2],
    /// Hidden lateral offset of the box entry point.
    pub entry_offset: f64,
    pub stage: u8,
    pub t: usize,
    pub done: bool,
    pub success: bool,
}

/// Per-modality readings plus robot state, in a fixed modality order.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub modalities: Vec<(String, Vec<f64>)>,
    pub robot_state: Vec<f64>,
}

impl Observation {
    pub fn modality(&self, name: &str) -> Result<&[f64]> {
        match self.modalities.iter().find(|(n, _)| n == name) {
            Some((_, v)) => Ok(v),
            None => bail!(Contract, "observation has no modality `{name}`"),
        }
    }

    pub fn modality_mut(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        match self.modalities.iter_mut().find(|(n, _)| n == name) {
            Some((_, v)) => Ok(v),
            None => bail!(Contract, "observation has no modality `{name}`"),
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn unit_toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    let d = dist(from, to);
    if d <= 1e-12 {
        return [0.0, 0.0];
    }
    [(to[0] - from[0]) / d, (to[1] - from[1]) / d]
}

/// Observation of `state` under `spec`.
pub fn observe(spec: &EnvSpec, state: &EnvState) -> Observation {
    let p = state.agent;
    let (vis, tac) = match spec.kind {
        EnvKind::OccludedReach => {
            let occluded = spec.occlusion.contains(p);
            let vis = if occluded {
                vec![p[0], p[1], 0.0, 0.0, 1.0]
            } else {
                vec![p[0], p[1], state.target[0], state.target[1], 0.0]
            };
            let tac = if dist(p, state.target) <= spec.contact_radius {
                vec![1.0, state.target[0] - p[0], state.target[1] - p[1]]
            } else {
                vec![0.0, 0.0, 0.0]
            };
            (vis, tac)
        }
        EnvKind::PhaseReach => {
            if state.stage == 0 {
                (
                    vec![p[0], p[1], state.waypoint[0], state.waypoint[1], 0.0],
                    vec![0.0, 0.0, 0.0],
                )
            } else {
                (
                    vec![p[0], p[1], 0.0, 0.0, 1.0],
                    vec![1.0, state.target[0] - p[0], state.target[1] - p[1]],
                )
            }
        }
    };
    Observation {
        modalities: vec![(VIS.to_string(), vis), (TAC.to_string(), tac)],
        robot_state: p.to_vec(),
    }
}

/// Fresh episode. Agent starts in the left third of the arena.
pub fn env_reset(spec: &EnvSpec, rng: &mut Rng) -> (EnvState, Observation) {
    let a = spec.arena;
    let agent = [uniform(rng, -a, -a / 3.0), uniform(rng, -a, a)];
    let o = spec.occlusion;
    let mut entry_offset = 0.0;
    let (target, waypoint) = match spec.kind {
        EnvKind::OccludedReach => {
            let q = [uniform(rng, o.x0, o.x1), uniform(rng, o.y0, o.y1)];
            if spec.entry_jitter > 0.0 {
                entry_offset = uniform(rng, -spec.entry_jitter, spec.entry_jitter);
            }
            (q, q)
        }
        EnvKind::PhaseReach => {
            let w1 = [
                uniform(rng, -0.2 * a, 0.2 * a),
                uniform(rng, -0.8 * a, 0.8 * a),
            ];
            let w2 = [
                uniform(rng, 0.4 * a, 0.9 * a),
                uniform(rng, -0.8 * a, 0.8 * a),
            ];
            (w2, w1)
        }
    };
    let state = EnvState {
        agent,
        target,
        waypoint,
        entry_offset,
        stage: 0,
        t: 0,
        done: false,
        success: false,
    };
    let obs = observe(spec, &state);
    (state, obs)
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub done: bool,
    pub success: bool,
}

/// Move by `max_speed · action` (action clamped to `[-1, 1]`), then update
/// success/termination.
pub fn env_step(spec: &EnvSpec, state: &mut EnvState, action: &[f64]) -> Result<Transition> {
    if action.len() != ACTION_DIM || action.iter().any(|v| !v.is_finite()) {
        bail!(
            Contract,
            "action must be {ACTION_DIM} finite values, got {action:?}"
        );
    }
    if state.done {
        bail!(Contract, "episode already finished");
    }
    let a = spec.arena;
    for (p, v) in state.agent.iter_mut().zip(action) {
        *p = (*p + spec.max_speed * v.clamp(-1.0, 1.0)).clamp(-a, a);
    }
    state.t += 1;
    match spec.kind {
        EnvKind::OccludedReach => {
            state.success = dist(state.agent, state.target) <= spec.success_radius;
        }
        EnvKind::PhaseReach => {
            if state.stage == 0 && dist(state.agent, state.waypoint) <= spec.success_radius {
                state.stage = 1;
            }
            state.success =
                state.stage == 1 && dist(state.agent, state.target) <= spec.success_radius;
        }
    }
    state.done = state.success || state.t >= spec.max_steps;
    Ok(Transition {
        observation: observe(spec, state),
        done: state.done,
        success: state.success,
    })
}

/// Point on the occlusion box's near (left) edge, `offset` away from the
/// target's row.
pub fn entry_point(spec: &EnvSpec, target: [f64; 2], offset: f64) -> [f64; 2] {
    let o = spec.occlusion;
    [o.x0, (target[1] + offset).clamp(o.y0, o.y1)]
}

/// Privileged demonstrator. Outside the box it heads for the entry point
/// with exploration noise; inside it heads straight for the target.
pub fn scripted_expert(state: &EnvState, spec: &EnvSpec, rng: &mut Rng) -> [f64; 2] {
    let p = state.agent;
    let (aim, noisy) = match spec.kind {
        EnvKind::OccludedReach => {
            let entry = entry_point(spec, state.target, state.entry_offset);
            if !spec.occlusion.contains(p) && dist(p, entry) > 1e-9 {
                (entry, true)
            } else {
                (state.target, false)
            }
        }
        EnvKind::PhaseReach => {
            if state.stage == 0 {
                (state.waypoint, true)
            } else {
                (state.target, false)
            }
        }
    };
    let mut dir = unit_toward(p, aim);
    if noisy && spec.expert_noise > 0.0 {
        for d in &mut dir {
            *d += spec.expert_noise * rng.standard_normal();
        }
    }
    [dir[0].clamp(-1.0, 1.0), dir[1].clamp(-1.0, 1.0)]
}

/// Uniformly random actions; a floor for evaluation tables.
pub fn random_action(rng: &mut Rng) -> [f64; 2] {
    [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, stream};

    #[test]
    fn seeded_reset_is_deterministic() {
        let spec = EnvSpec::occluded_reach();
        assert_eq!(
            env_reset(&spec, &mut seeded(5)),
            env_reset(&spec, &mut seeded(5))
        );
    }

    #[test]
    fn target_always_inside_occlusion_box() {
        let spec = EnvSpec::occluded_reach();
        for j in 0..1000 {
            let (s, obs) = env_reset(&spec, &mut stream(1, j));
            assert!(spec.occlusion.contains(s.target));
            assert!(!spec.occlusion.contains(s.agent));
            assert_eq!(obs.modality(VIS).unwrap()[4], 0.0);
            assert_eq!(obs.modality(VIS).unwrap()[2..4], s.target);
        }
    }

    #[test]
    fn zero_action_only_advances_time() {
        let spec = EnvSpec::occluded_reach();
        let (mut s, _) = env_reset(&spec, &mut seeded(2));
        let before = s.agent;
        let tr = env_step(&spec, &mut s, &[0.0, 0.0]).unwrap();
        assert_eq!(s.agent, before);
        assert_eq!(s.t, 1);
        assert!(!tr.done);
    }

    #[test]
    fn agent_at_target_succeeds_immediately() {
        let spec = EnvSpec::occluded_reach();
        let (mut s, _) = env_reset(&spec, &mut seeded(2));
        s.agent = s.target;
        let tr = env_step(&spec, &mut s, &[0.0, 0.0]).unwrap();
        assert!(tr.success && tr.done);
    }

    #[test]
    fn non_finite_action_is_rejected() {
        let spec = EnvSpec::occluded_reach();
        let (mut s, _) = env_reset(&spec, &mut seeded(2));
        assert!(matches!(
            env_step(&spec, &mut s, &[f64::NAN, 0.0]),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn straight_line_reaches_box_edge_in_expected_steps() {
        let spec = EnvSpec::occluded_reach();
        let (mut s, _) = env_reset(&spec, &mut seeded(3));
        s.agent = [-0.5, 0.0];
        s.target = [0.6, 0.0];
        // distance to x = 0.3 is 0.8; at 0.08 per step the edge is crossed on step ceil(0.8 / 0.08) = 10
        let expected = (0.8f64 / 0.08).ceil() as usize;
        let mut steps = 0;
        loop {
            let tr = env_step(&spec, &mut s, &[1.0, 0.0]).unwrap();
            steps += 1;
            if tr.observation.modality(VIS).unwrap()[4] == 1.0 {
                break;
            }
        }
        assert_eq!(steps, expected);
    }

    #[test]
    fn occlusion_and_tactile_sparsity_invariants() {
        let spec = EnvSpec::occluded_reach();
        for j in 0..200 {
            let mut rng = stream(9, j);
            let (mut s, mut obs) = env_reset(&spec, &mut rng);
            loop {
                let vis = obs.modality(VIS).unwrap();
                let tac = obs.modality(TAC).unwrap();
                if spec.occlusion.contains(s.agent) {
                    assert_eq!(&vis[2..], &[0.0, 0.0, 1.0]);
                }
                if dist(s.agent, s.target) > spec.contact_radius {
                    assert_eq!(tac, &[0.0, 0.0, 0.0]);
                }
                let a = scripted_expert(&s, &spec, &mut rng);
                let tr = env_step(&spec, &mut s, &a).unwrap();
                obs = tr.observation;
                if tr.done {
                    assert!(s.t <= spec.max_steps);
                    if tr.success {
                        assert!(dist(s.agent, s.target) <= spec.success_radius);
                    }
                    break;
                }
            }
        }
    }

    #[test]
    fn expert_direction_inside_box() {
        let spec = EnvSpec {
            expert_noise: 0.0,
            ..EnvSpec::occluded_reach()
        };
        let (mut s, _) = env_reset(&spec, &mut seeded(4));
        s.agent = [0.4, 0.1];
        s.target = [0.8, 0.1];
        let a = scripted_expert(&s, &spec, &mut seeded(0));
        assert!((a[0] - 1.0).abs() < 1e-12 && a[1].abs() < 1e-12);
    }

    #[test]
    fn noiseless_expert_outputs_exact_unit_direction() {
        let spec = EnvSpec {
            expert_noise: 0.0,
            ..EnvSpec::occluded_reach()
        };
        let (s, _) = env_reset(&spec, &mut seeded(8));
        let a = scripted_expert(&s, &spec, &mut seeded(0));
        let e = entry_point(&spec, s.target, s.entry_offset);
        let d = dist(s.agent, e);
        assert!((a[0] - (e[0] - s.agent[0]) / d).abs() < 1e-15);
        assert!((a[1] - (e[1] - s.agent[1]) / d).abs() < 1e-15);
    }

    #[test]
    fn expert_is_near_optimal() {
        for spec in [EnvSpec::occluded_reach(), EnvSpec::phase_reach()] {
            let mut wins = 0;
            for j in 0..200 {
                let mut rng = stream(11, j);
                let (mut s, _) = env_reset(&spec, &mut rng);
                while !s.done {
                    let a = scripted_expert(&s, &spec, &mut rng);
                    env_step(&spec, &mut s, &a).unwrap();
                }
                wins += s.success as usize;
            }
            assert!(wins as f64 / 200.0 >= 0.95, "{:?}: {wins}/200", spec.kind);
        }
    }
}
