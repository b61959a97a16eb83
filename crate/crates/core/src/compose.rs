//! Policy-level composition of modality experts.

use log::warn;

use crate::diffusion::{ddpm_sample, NoiseSchedule, Normalizer, ScoreProvider};
use crate::envs::Observation;
use crate::error::{bail, Result};
use crate::experts::{ActionShape, Embedding, ModalityExpert, ScoreExpert};
use crate::rng::Rng;
use crate::router::{apply_strategy, router_weights, ConsensusWeights, Router, RoutingStrategy};

/// Anything that maps an observation to a (denormalized) action chunk.
pub trait Policy: Sync {
    fn name(&self) -> String;
    fn horizon(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn param_count(&self) -> usize;
    fn act(&self, obs: &Observation, rng: &mut Rng) -> Result<Vec<f64>>;
}

/// `Σ_i w_i · ε_{i,comp}` for embeddings already computed. Experts with zero
/// weight are skipped, so one-hot weights reproduce the selected expert
/// exactly.
pub fn mix_scores<E: ScoreExpert>(
    experts: &[E],
    embeddings: &[Embedding],
    w: &ConsensusWeights,
    noised: &[f64],
    k: usize,
) -> Result<Vec<f64>> {
    if w.len() != experts.len() || embeddings.len() != experts.len() {
        bail!(
            Contract,
            "{} weights / {} embeddings for {} experts",
            w.len(),
            embeddings.len(),
            experts.len()
        );
    }
    let mut out = vec![0.0; noised.len()];
    for ((expert, e), &wi) in experts.iter().zip(embeddings).zip(w.values()) {
        if wi == 0.0 {
            continue;
        }
        let eps = expert.intra_compose(noised, e, k)?;
        for (o, v) in out.iter_mut().zip(&eps) {
            *o += wi * v;
        }
    }
    Ok(out)
}

/// Encode `obs` for every expert, in expert order.
pub fn embed_all<E: ScoreExpert>(experts: &[E], obs: &Observation) -> Result<Vec<Embedding>> {
    experts
        .iter()
        .map(|e| e.encode(obs.modality(e.modality())?, &obs.robot_state))
        .collect()
}

/// Inter-modality composition at one denoising step.
pub fn inter_compose<E: ScoreExpert>(
    experts: &[E],
    w: &ConsensusWeights,
    noised: &[f64],
    obs: &Observation,
    k: usize,
) -> Result<Vec<f64>> {
    if w.len() != experts.len() {
        bail!(
            Contract,
            "{} weights for {} experts",
            w.len(),
            experts.len()
        );
    }
    let embeddings = embed_all(experts, obs)?;
    mix_scores(experts, &embeddings, w, noised, k)
}

struct InterScore<'a, E> {
    experts: &'a [E],
    embeddings: &'a [Embedding],
    weights: &'a ConsensusWeights,
    dim: usize,
}

impl<E: ScoreExpert> ScoreProvider for InterScore<'_, E> {
    fn action_dim(&self) -> usize {
        self.dim
    }

    fn predict_eps(&self, noised: &[f64], k: usize) -> Result<Vec<f64>> {
        mix_scores(self.experts, self.embeddings, self.weights, noised, k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightSource {
    Router(Router),
    Fixed(ConsensusWeights),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedPolicy {
    pub experts: Vec<ModalityExpert>,
    pub weights: WeightSource,
    pub strategy: RoutingStrategy,
    pub schedule: NoiseSchedule,
    pub normalizer: Normalizer,
    pub shape: ActionShape,
    /// Set when manual weights had to be rescaled to sum to one.
    pub renormalized: bool,
}

/// Fail unless every expert shares action shape, schedule and normalization.
pub fn check_compatible(experts: &[ModalityExpert], schedule: &NoiseSchedule) -> Result<()> {
    let Some(first) = experts.first() else {
        bail!(Contract, "composition needs at least one expert");
    };
    for e in experts {
        if e.shape != first.shape {
            bail!(
                Incompatible,
                "expert `{}` has action shape {:?}, expected {:?}",
                e.modality,
                e.shape,
                first.shape
            );
        }
        if e.schedule.descriptor() != schedule.descriptor() {
            bail!(
                Incompatible,
                "expert `{}` schedule {} differs from {}",
                e.modality,
                e.schedule.descriptor(),
                schedule.descriptor()
            );
        }
        if e.normalizer != first.normalizer {
            bail!(
                Incompatible,
                "expert `{}` was trained with different normalization stats",
                e.modality
            );
        }
        if e.robot_state_dim != first.robot_state_dim {
            bail!(
                Incompatible,
                "expert `{}` robot-state dim differs",
                e.modality
            );
        }
    }
    for (i, a) in experts.iter().enumerate() {
        if experts[..i].iter().any(|b| b.modality == a.modality) {
            bail!(Contract, "modality `{}` appears twice", a.modality);
        }
    }
    Ok(())
}

/// Router-weighted composition. The router's modality order must equal the
/// expert order.
pub fn compose_policy(
    experts: Vec<ModalityExpert>,
    router: Router,
    strategy: RoutingStrategy,
    schedule: NoiseSchedule,
) -> Result<ComposedPolicy> {
    check_compatible(&experts, &schedule)?;
    let order: Vec<&str> = experts.iter().map(|e| e.modality.as_str()).collect();
    if router
        .modalities
        .iter()
        .map(String::as_str)
        .ne(order.iter().copied())
    {
        bail!(
            Contract,
            "router order {:?} does not match expert order {order:?}",
            router.modalities
        );
    }
    Ok(ComposedPolicy {
        normalizer: experts[0].normalizer.clone(),
        shape: experts[0].shape,
        experts,
        weights: WeightSource::Router(router),
        strategy,
        schedule,
        renormalized: false,
    })
}

/// Composition with constant weights; no router involved. Weights that do not
/// sum to one are rescaled (with a warning).
pub fn manual_compose(
    experts: Vec<ModalityExpert>,
    fixed: &[f64],
    schedule: NoiseSchedule,
) -> Result<ComposedPolicy> {
    check_compatible(&experts, &schedule)?;
    if fixed.len() != experts.len() {
        bail!(
            Contract,
            "{} weights for {} experts",
            fixed.len(),
            experts.len()
        );
    }
    if fixed.iter().any(|w| !w.is_finite() || *w < 0.0) {
        bail!(Contract, "manual weights must be nonnegative: {fixed:?}");
    }
    let sum: f64 = fixed.iter().sum();
    if sum == 0.0 {
        bail!(Contract, "manual weights are all zero");
    }
    let mut renormalized = false;
    let weights = if (sum - 1.0).abs() > ConsensusWeights::TOLERANCE {
        warn!("manual weights {fixed:?} sum to {sum}; renormalizing");
        renormalized = true;
        fixed.iter().map(|w| w / sum).collect()
    } else {
        fixed.to_vec()
    };
    Ok(ComposedPolicy {
        normalizer: experts[0].normalizer.clone(),
        shape: experts[0].shape,
        experts,
        weights: WeightSource::Fixed(ConsensusWeights::new(weights)?),
        strategy: RoutingStrategy::Soft,
        schedule,
        renormalized,
    })
}

impl ComposedPolicy {
    pub fn modalities(&self) -> Vec<&str> {
        self.experts.iter().map(|e| e.modality.as_str()).collect()
    }

    pub fn with_strategy(mut self, strategy: RoutingStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    /// Weights (after the routing strategy) for precomputed embeddings.
    pub fn weights_for(&self, embeddings: &[Embedding]) -> Result<ConsensusWeights> {
        let raw = match &self.weights {
            WeightSource::Router(r) => router_weights(r, embeddings)?,
            WeightSource::Fixed(w) => w.clone(),
        };
        Ok(apply_strategy(&raw, self.strategy))
    }

    pub fn consensus(&self, obs: &Observation) -> Result<ConsensusWeights> {
        self.weights_for(&embed_all(&self.experts, obs)?)
    }

    /// Normalized action chunk for `obs`.
    pub fn sample_normalized(&self, obs: &Observation, rng: &mut Rng) -> Result<Vec<f64>> {
        let embeddings = embed_all(&self.experts, obs)?;
        let weights = self.weights_for(&embeddings)?;
        let score = InterScore {
            experts: &self.experts,
            embeddings: &embeddings,
            weights: &weights,
            dim: self.shape.chunk_dim(),
        };
        Ok(ddpm_sample(&score, &self.schedule, rng)?.into_inner())
    }

    pub fn router(&self) -> Option<&Router> {
        match &self.weights {
            WeightSource::Router(r) => Some(r),
            WeightSource::Fixed(_) => None,
        }
    }
}

impl Policy for ComposedPolicy {
    fn name(&self) -> String {
        let mods = self.modalities().join("+");
        match &self.weights {
            WeightSource::Router(_) => format!("composed[{mods}]:{}", self.strategy),
            WeightSource::Fixed(_) if self.experts.len() == 1 => format!("single[{mods}]"),
            WeightSource::Fixed(w) => {
                let w: Vec<String> = w.values().iter().map(f64::to_string).collect();
                format!("manual[{mods}]:{}", w.join("/"))
            }
        }
    }

    fn horizon(&self) -> usize {
        self.shape.horizon
    }

    fn action_dim(&self) -> usize {
        self.shape.action_dim
    }

    fn param_count(&self) -> usize {
        self.experts
            .iter()
            .map(ModalityExpert::param_count)
            .sum::<usize>()
            + self.router().map_or(0, Router::param_count)
    }

    fn act(&self, obs: &Observation, rng: &mut Rng) -> Result<Vec<f64>> {
        let a = self.sample_normalized(obs, rng)?;
        Ok(self.normalizer.denormalize_chunk(&a))
    }
}

/// A lone expert as a policy (composition with weight 1).
pub fn single_expert_policy(expert: ModalityExpert) -> Result<ComposedPolicy> {
    let schedule = expert.schedule.clone();
    manual_compose(vec![expert], &[1.0], schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::envs::{env_reset, EnvSpec, TAC, TAC_DIM, VIS, VIS_DIM};
    use crate::experts::ExpertConfig;
    use crate::rng::seeded;

    fn expert(modality: &str, dim: usize, seed: u64) -> ModalityExpert {
        let cfg = ExpertConfig {
            encoder_hidden: vec![6],
            code_dim: 4,
            score_hidden: vec![7],
            ..ExpertConfig::default()
        };
        let sched = make_schedule(6, 1e-4, 0.02).unwrap();
        let shape = ActionShape {
            action_dim: 2,
            horizon: 1,
        };
        ModalityExpert::init(
            modality,
            dim,
            2,
            shape,
            &cfg,
            sched,
            Normalizer::identity(2),
            &mut seeded(seed),
        )
        .unwrap()
    }

    fn pair() -> Vec<ModalityExpert> {
        vec![expert(VIS, VIS_DIM, 1), expert(TAC, TAC_DIM, 2)]
    }

    fn obs() -> Observation {
        env_reset(&EnvSpec::occluded_reach(), &mut seeded(9)).1
    }

    fn sched() -> NoiseSchedule {
        make_schedule(6, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn one_hot_reproduces_selected_expert() {
        let experts = pair();
        let o = obs();
        let noised = [0.3, -0.7];
        for i in 0..2 {
            let e = experts[i]
                .encode(o.modality(&experts[i].modality).unwrap(), &o.robot_state)
                .unwrap();
            let want = experts[i].intra_compose(&noised, &e, 4).unwrap();
            let got =
                inter_compose(&experts, &ConsensusWeights::one_hot(2, i), &noised, &o, 4).unwrap();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn weighted_sum_is_linear() {
        let experts = pair();
        let o = obs();
        let noised = [0.1, 0.2];
        let emb = embed_all(&experts, &o).unwrap();
        let u = experts[0].intra_compose(&noised, &emb[0], 2).unwrap();
        let v = experts[1].intra_compose(&noised, &emb[1], 2).unwrap();
        let got = inter_compose(
            &experts,
            &ConsensusWeights::new(vec![0.3, 0.7]).unwrap(),
            &noised,
            &o,
            2,
        )
        .unwrap();
        for c in 0..2 {
            assert!((got[c] - (0.3 * u[c] + 0.7 * v[c])).abs() <= 1e-15);
        }
    }

    #[test]
    fn identical_experts_give_their_common_output() {
        let a = expert(VIS, VIS_DIM, 4);
        let mut b = a.clone();
        b.modality = "vis2".into();
        let o = Observation {
            modalities: vec![
                (VIS.into(), vec![0.1; VIS_DIM]),
                ("vis2".into(), vec![0.1; VIS_DIM]),
            ],
            robot_state: vec![0.2, -0.4],
        };
        let emb = embed_all(std::slice::from_ref(&a), &o).unwrap();
        let u = a.intra_compose(&[0.5, 0.5], &emb[0], 3).unwrap();
        for w in [vec![0.5, 0.5], vec![0.9, 0.1], vec![0.37, 0.63]] {
            let got = inter_compose(
                &[a.clone(), b.clone()],
                &ConsensusWeights::new(w).unwrap(),
                &[0.5, 0.5],
                &o,
                3,
            )
            .unwrap();
            for c in 0..2 {
                assert!((got[c] - u[c]).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn zero_weight_third_expert_changes_nothing() {
        let mut three = pair();
        let mut extra = expert(VIS, VIS_DIM, 5);
        extra.modality = "vis_b".into();
        three.push(extra);
        let mut o = obs();
        o.modalities.push(("vis_b".into(), vec![0.3; VIS_DIM]));
        let two = inter_compose(
            &pair(),
            &ConsensusWeights::new(vec![0.4, 0.6]).unwrap(),
            &[0.2, 0.1],
            &o,
            5,
        )
        .unwrap();
        let with = inter_compose(
            &three,
            &ConsensusWeights::new(vec![0.4, 0.6, 0.0]).unwrap(),
            &[0.2, 0.1],
            &o,
            5,
        )
        .unwrap();
        assert_eq!(two, with);
    }

    #[test]
    fn shared_parameter_composition_samples_like_single_expert() {
        let a = expert(VIS, VIS_DIM, 4);
        let mut b = a.clone();
        b.modality = "vis2".into();
        let o = Observation {
            modalities: vec![
                (VIS.into(), vec![0.1; VIS_DIM]),
                ("vis2".into(), vec![0.1; VIS_DIM]),
            ],
            robot_state: vec![0.2, -0.4],
        };
        let single = single_expert_policy(a.clone()).unwrap();
        let both = manual_compose(vec![a, b], &[0.5, 0.5], sched()).unwrap();
        for seed in 0..5 {
            assert_eq!(
                single.act(&o, &mut seeded(seed)).unwrap(),
                both.act(&o, &mut seeded(seed)).unwrap()
            );
        }
    }

    #[test]
    fn manual_weights_select_and_renormalize() {
        let o = obs();
        let first = single_expert_policy(pair().remove(0)).unwrap();
        let manual = manual_compose(pair(), &[1.0, 0.0], sched()).unwrap();
        assert_eq!(
            manual.act(&o, &mut seeded(3)).unwrap(),
            first.act(&o, &mut seeded(3)).unwrap()
        );
        assert!(!manual.renormalized);

        let doubled = manual_compose(pair(), &[2.0, 2.0], sched()).unwrap();
        assert!(doubled.renormalized);
        assert_eq!(doubled.consensus(&o).unwrap().values(), &[0.5, 0.5]);
        assert!(manual_compose(pair(), &[0.0, 0.0], sched()).is_err());
        assert!(manual_compose(pair(), &[0.5], sched()).is_err());
        assert!(manual_compose(pair(), &[-0.5, 1.5], sched()).is_err());
    }

    #[test]
    fn same_seed_same_action() {
        let p = manual_compose(pair(), &[0.5, 0.5], sched()).unwrap();
        let o = obs();
        assert_eq!(
            p.act(&o, &mut seeded(11)).unwrap(),
            p.act(&o, &mut seeded(11)).unwrap()
        );
        assert_ne!(
            p.act(&o, &mut seeded(11)).unwrap(),
            p.act(&o, &mut seeded(12)).unwrap()
        );
    }

    #[test]
    fn incompatible_experts_are_refused() {
        let mut other = pair();
        other[1].schedule = make_schedule(7, 1e-4, 0.02).unwrap();
        assert!(matches!(
            manual_compose(other, &[0.5, 0.5], sched()),
            Err(crate::Error::Incompatible(_))
        ));
        let mut other = pair();
        other[1].normalizer = Normalizer {
            min: vec![-2.0, -1.0],
            max: vec![1.0, 1.0],
        };
        assert!(matches!(
            manual_compose(other, &[0.5, 0.5], sched()),
            Err(crate::Error::Incompatible(_))
        ));
        let dup = vec![expert(VIS, VIS_DIM, 1), expert(VIS, VIS_DIM, 2)];
        assert!(manual_compose(dup, &[0.5, 0.5], sched()).is_err());
    }

    #[test]
    fn router_order_must_match() {
        let experts = pair();
        let mods: Vec<(String, usize)> = experts
            .iter()
            .rev()
            .map(|e| (e.modality.clone(), e.embedding_dim()))
            .collect();
        let router = Router::init(
            &mods,
            &crate::router::RouterConfig::default(),
            &mut seeded(1),
        )
        .unwrap();
        assert!(compose_policy(experts, router, RoutingStrategy::Soft, sched()).is_err());
    }

    #[test]
    fn parameter_count_adds_router() {
        let experts = pair();
        let mods: Vec<(String, usize)> = experts
            .iter()
            .map(|e| (e.modality.clone(), e.embedding_dim()))
            .collect();
        let router = Router::init(
            &mods,
            &crate::router::RouterConfig::default(),
            &mut seeded(1),
        )
        .unwrap();
        let tally: usize = experts
            .iter()
            .flat_map(|e| e.params.iter().map(|(_, t)| t.len()))
            .sum::<usize>()
            + router.params.iter().map(|(_, t)| t.len()).sum::<usize>();
        let p = compose_policy(experts, router, RoutingStrategy::Soft, sched()).unwrap();
        assert_eq!(p.param_count(), tally);
    }
}
