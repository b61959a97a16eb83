//! The consensus router: embeddings of every modality in, softmax weights
//! over modalities out. Also the post-hoc routing strategies.

use std::fmt;
use std::str::FromStr;

use crate::dataset::Dataset;
use crate::diffusion::{denoise_loss, NoiseSchedule};
use crate::error::{bail, Error, Result};
use crate::experts::{
    expert_loss, gather, sample_indices, timestep_rows, ActionShape, Embedding, ExpertConfig,
    ModalityExpert, ScoreExpert, TrainConfig,
};
use crate::numcore::{
    adam_step, softmax, Activation, Graph, Mlp, MlpSpec, NodeId, OptimState, ParamSet, Tensor,
};
use crate::rng::Rng;

/// Nonnegative modality weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusWeights(Vec<f64>);

impl ConsensusWeights {
    pub const TOLERANCE: f64 = 1e-12;

    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            bail!(
                Contract,
                "consensus weights must be finite and nonnegative: {w:?}"
            );
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > Self::TOLERANCE {
            bail!(Contract, "consensus weights sum to {s}, not 1");
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        Self(w)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest weight (lowest index wins ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoutingStrategy {
    #[default]
    Soft,
    Hard,
    Top2,
}

impl RoutingStrategy {
    pub fn token(self) -> &'static str {
        match self {
            RoutingStrategy::Soft => "soft",
            RoutingStrategy::Hard => "hard",
            RoutingStrategy::Top2 => "top2",
        }
    }
}

impl fmt::Display for RoutingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for RoutingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(RoutingStrategy::Soft),
            "hard" => Ok(RoutingStrategy::Hard),
            "top2" => Ok(RoutingStrategy::Top2),
            other => Err(Error::Config(format!(
                "unknown routing strategy `{other}` (expected soft|hard|top2)"
            ))),
        }
    }
}

/// Post-process weights: soft keeps them, hard one-hots the argmax, top2
/// keeps the two largest and renormalizes.
pub fn apply_strategy(w: &ConsensusWeights, strategy: RoutingStrategy) -> ConsensusWeights {
    let n = w.len();
    match strategy {
        RoutingStrategy::Soft => w.clone(),
        RoutingStrategy::Hard => ConsensusWeights::one_hot(n, w.argmax()),
        RoutingStrategy::Top2 if n <= 2 => w.clone(),
        RoutingStrategy::Top2 => {
            let v = w.values();
            let first = w.argmax();
            let mut second = usize::MAX;
            for i in 0..n {
                if i != first && (second == usize::MAX || v[i] > v[second]) {
                    second = i;
                }
            }
            let mut out = vec![0.0; n];
            // larger share first, remainder as 1 - share keeps the sum exactly 1
            let share = v[first] / (v[first] + v[second]);
            out[first] = share;
            out[second] = 1.0 - share;
            ConsensusWeights(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    pub modalities: Vec<String>,
    pub embedding_dims: Vec<usize>,
    pub params: ParamSet,
    pub net: Mlp,
    pub trained_steps: usize,
}

impl Router {
    pub fn init(modalities: &[(String, usize)], cfg: &RouterConfig, rng: &mut Rng) -> Result<Self> {
        if modalities.is_empty() {
            bail!(Config, "router needs at least one modality");
        }
        let input: usize = modalities.iter().map(|(_, d)| d).sum();
        let net = Mlp::new(
            "router",
            MlpSpec::new(input, &cfg.hidden, modalities.len(), cfg.activation)?,
        );
        let mut params = ParamSet::new();
        net.init(&mut params, rng)?;
        Ok(Self {
            modalities: modalities.iter().map(|(n, _)| n.clone()).collect(),
            embedding_dims: modalities.iter().map(|(_, d)| *d).collect(),
            params,
            net,
            trained_steps: 0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_order(&self, embeddings: &[Embedding]) -> Result<()> {
        if embeddings.len() != self.modalities.len() {
            bail!(
                Contract,
                "router expects {} embeddings, got {}",
                self.modalities.len(),
                embeddings.len()
            );
        }
        for ((e, name), &d) in embeddings
            .iter()
            .zip(&self.modalities)
            .zip(&self.embedding_dims)
        {
            if &e.modality != name {
                bail!(
                    Contract,
                    "router expects `{name}` here, got `{}`",
                    e.modality
                );
            }
            if e.values.len() != d {
                bail!(
                    Shape,
                    "embedding for `{name}` has dim {}, expected {d}",
                    e.values.len()
                );
            }
        }
        Ok(())
    }

    pub fn logits(&self, embeddings: &[Embedding]) -> Result<Vec<f64>> {
        self.check_order(embeddings)?;
        let input: Vec<f64> = embeddings
            .iter()
            .flat_map(|e| e.values.iter().copied())
            .collect();
        self.net.infer(&self.params, &input)
    }
}

/// Softmax of the router logits for embeddings given in the router's order.
pub fn router_weights(router: &Router, embeddings: &[Embedding]) -> Result<ConsensusWeights> {
    Ok(ConsensusWeights(softmax(&router.logits(embeddings)?)))
}

fn check_experts<E: ScoreExpert>(experts: &[E], dataset: &Dataset) -> Result<()> {
    if experts.is_empty() {
        bail!(Contract, "router training needs at least one expert");
    }
    let chunk = experts[0].chunk_dim();
    for e in experts {
        if !e.is_trained() {
            bail!(Contract, "expert `{}` is untrained", e.modality());
        }
        if e.chunk_dim() != chunk || chunk != dataset.action_dim * dataset.horizon {
            bail!(
                Contract,
                "expert `{}` action chunk does not match the dataset",
                e.modality()
            );
        }
        dataset.modality_dim(e.modality())?;
    }
    Ok(())
}

/// Fit router parameters so that the weighted sum of frozen expert
/// predictions matches the true noise. Expert parameters are never touched.
pub fn train_router<E: ScoreExpert>(
    experts: &[E],
    dataset: &Dataset,
    cfg: &RouterConfig,
    train: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Router> {
    check_experts(experts, dataset)?;
    let mods: Vec<(String, usize)> = experts
        .iter()
        .map(|e| (e.modality().to_string(), e.embedding_dim()))
        .collect();
    let mut router = Router::init(&mods, cfg, rng)?;
    if train.steps == 0 {
        return Ok(router);
    }
    let samples = dataset.samples()?;
    // embeddings of frozen encoders, one row per sample per expert
    let mut embeddings: Vec<Vec<Embedding>> = Vec::with_capacity(samples.len);
    for i in 0..samples.len {
        let row = experts
            .iter()
            .map(|e| {
                e.encode(
                    samples.modality_row(e.modality(), i)?,
                    samples.robot_state_row(i),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        embeddings.push(row);
    }
    let mut opt = OptimState::new(train.lr);
    for _ in 0..train.steps {
        let idx = sample_indices(rng, samples.len, train.batch);
        let a0 = gather(|i| samples.chunk_row(i).to_vec(), &idx)?;
        let input = gather(
            |i| {
                embeddings[i]
                    .iter()
                    .flat_map(|e| e.values.iter().copied())
                    .collect()
            },
            &idx,
        )?;
        let mut g = Graph::new();
        let loss = denoise_loss(
            &mut g,
            &a0,
            schedule,
            1..=schedule.steps(),
            rng,
            |g, batch| {
                let mut parts = Vec::with_capacity(experts.len());
                for (ei, expert) in experts.iter().enumerate() {
                    let mut rows = Vec::with_capacity(idx.len());
                    for (r, &i) in idx.iter().enumerate() {
                        rows.push(expert.intra_compose(
                            batch.noised.row_slice(r),
                            &embeddings[i][ei],
                            batch.steps[r],
                        )?);
                    }
                    parts.push(g.constant(Tensor::from_rows(&rows)?)?);
                }
                let x = g.constant(input)?;
                let logits = router.net.forward(g, &router.params, x)?;
                let w = g.softmax_rows(logits)?;
                g.mix(w, &parts)
            },
        )?;
        g.backward(loss, &mut router.params)?;
        adam_step(&mut router.params, &mut opt)?;
    }
    router.trained_steps = train.steps;
    Ok(router)
}

/// End-to-end alternative: experts and router optimized together. The loss is
/// the mean of every expert's own ε-loss plus the ε-loss of the routed
/// mixture, with gradients flowing into all parameters.
pub fn train_joint(
    dataset: &Dataset,
    modalities: &[&str],
    expert_cfg: &ExpertConfig,
    router_cfg: &RouterConfig,
    train: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Vec<ModalityExpert>, Router)> {
    let shape = ActionShape {
        action_dim: dataset.action_dim,
        horizon: dataset.horizon,
    };
    let mut experts = Vec::with_capacity(modalities.len());
    for m in modalities {
        experts.push(ModalityExpert::init(
            m,
            dataset.modality_dim(m)?,
            dataset.robot_state_dim,
            shape,
            expert_cfg,
            schedule.clone(),
            dataset.normalizer.clone(),
            rng,
        )?);
    }
    let mods: Vec<(String, usize)> = experts
        .iter()
        .map(|e| (e.modality.clone(), e.embedding_dim()))
        .collect();
    let mut router = Router::init(&mods, router_cfg, rng)?;
    if train.steps == 0 {
        return Ok((experts, router));
    }
    let samples = dataset.samples()?;
    let n = experts.len();
    let mut expert_opts: Vec<OptimState> = (0..n).map(|_| OptimState::new(train.lr)).collect();
    let mut router_opt = OptimState::new(train.lr);
    for _ in 0..train.steps {
        let idx = sample_indices(rng, samples.len, train.batch);
        let mut g = Graph::new();
        let mut total: Option<NodeId> = None;
        for (slot, expert) in experts.iter().enumerate() {
            let l = expert_loss(&mut g, slot, expert, &samples, &idx, rng)?;
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        let a0 = gather(|i| samples.chunk_row(i).to_vec(), &idx)?;
        let rs = gather(|i| samples.robot_state_row(i).to_vec(), &idx)?;
        let k_max = schedule.steps();
        let mix_loss = denoise_loss(&mut g, &a0, schedule, 1..=k_max, rng, |g, batch| {
            let rs = g.constant(rs)?;
            let ak = g.constant(batch.noised.clone())?;
            let t = g.constant(timestep_rows(&batch.steps, k_max)?)?;
            let mut embs = Vec::with_capacity(n);
            let mut preds = Vec::with_capacity(n);
            for (slot, expert) in experts.iter().enumerate() {
                let reading = gather(
                    |i| {
                        samples
                            .modality_row(&expert.modality, i)
                            .map(<[f64]>::to_vec)
                            .unwrap_or_default()
                    },
                    &idx,
                )?;
                let m = g.constant(reading)?;
                let code = expert.encoder.forward_in(g, slot, &expert.params, m)?;
                let e = g.concat_cols(&[code, rs])?;
                let input = g.concat_cols(&[ak, e, t])?;
                let mut acc: Option<NodeId> = None;
                for sp in &expert.sub_policies {
                    let p = sp.forward_in(g, slot, &expert.params, input)?;
                    acc = Some(match acc {
                        None => p,
                        Some(a) => g.add(a, p)?,
                    });
                }
                let mean = g.scale(
                    acc.expect("sub-policies"),
                    1.0 / expert.sub_policies.len() as f64,
                )?;
                embs.push(e);
                preds.push(mean);
            }
            let x = g.concat_cols(&embs)?;
            let logits = router.net.forward_in(g, n, &router.params, x)?;
            let w = g.softmax_rows(logits)?;
            g.mix(w, &preds)
        })?;
        let experts_mean = g.scale(total.expect("experts"), 1.0 / n as f64)?;
        let loss = g.add(experts_mean, mix_loss)?;
        {
            let mut sets: Vec<&mut ParamSet> = experts.iter_mut().map(|e| &mut e.params).collect();
            sets.push(&mut router.params);
            g.backward_multi(loss, &mut sets)?;
        }
        for (e, opt) in experts.iter_mut().zip(&mut expert_opts) {
            adam_step(&mut e.params, opt)?;
            e.loss_history.push(g.value(loss).data()[0]);
        }
        adam_step(&mut router.params, &mut router_opt)?;
    }
    for e in &mut experts {
        e.trained_steps = train.steps;
    }
    router.trained_steps = train.steps;
    Ok((experts, router))
}
