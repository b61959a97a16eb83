//! Fusion baselines: a single score network conditioned on concatenated
//! embeddings, and one conditioned on a gated mixture of embeddings.

use crate::compose::Policy;
use crate::dataset::{Dataset, Samples};
use crate::diffusion::{
    ddpm_sample, denoise_loss, timestep_embedding, NoiseSchedule, Normalizer, ScoreProvider,
    TIMESTEP_DIM,
};
use crate::envs::Observation;
use crate::error::{bail, Result};
use crate::experts::{
    gather, sample_indices, timestep_rows, ActionShape, ExpertConfig, TrainConfig,
};
use crate::numcore::{adam_step, softmax, Graph, Mlp, MlpSpec, NodeId, OptimState, ParamSet};
use crate::rng::Rng;

/// Parts shared by both baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionCore {
    pub modalities: Vec<(String, usize)>,
    pub robot_state_dim: usize,
    pub shape: ActionShape,
    pub params: ParamSet,
    pub encoders: Vec<Mlp>,
    pub score: Mlp,
    pub schedule: NoiseSchedule,
    pub normalizer: Normalizer,
    pub trained_steps: usize,
    pub loss_history: Vec<f64>,
}

impl FusionCore {
    fn init(
        dataset: &Dataset,
        cfg: &ExpertConfig,
        cond_dim: usize,
        schedule: &NoiseSchedule,
        rng: &mut Rng,
    ) -> Result<Self> {
        let shape = ActionShape {
            action_dim: dataset.action_dim,
            horizon: dataset.horizon,
        };
        let mut params = ParamSet::new();
        let mut encoders = Vec::with_capacity(dataset.modalities.len());
        for (name, dim) in &dataset.modalities {
            let enc = Mlp::new(
                format!("enc.{name}"),
                MlpSpec::new(*dim, &cfg.encoder_hidden, cfg.code_dim, cfg.activation)?,
            );
            enc.init(&mut params, rng)?;
            encoders.push(enc);
        }
        let score = Mlp::new(
            "score",
            MlpSpec::new(
                shape.chunk_dim() + cond_dim + TIMESTEP_DIM,
                &cfg.score_hidden,
                shape.chunk_dim(),
                cfg.activation,
            )?,
        );
        score.init(&mut params, rng)?;
        Ok(Self {
            modalities: dataset.modalities.clone(),
            robot_state_dim: dataset.robot_state_dim,
            shape,
            params,
            encoders,
            score,
            schedule: schedule.clone(),
            normalizer: dataset.normalizer.clone(),
            trained_steps: 0,
            loss_history: Vec::new(),
        })
    }

    fn codes(&self, obs: &Observation) -> Result<Vec<Vec<f64>>> {
        if obs.robot_state.len() != self.robot_state_dim {
            bail!(
                Shape,
                "robot state dim {} vs {}",
                obs.robot_state.len(),
                self.robot_state_dim
            );
        }
        self.modalities
            .iter()
            .zip(&self.encoders)
            .map(|((name, _), enc)| enc.infer(&self.params, obs.modality(name)?))
            .collect()
    }

    fn recorded_codes(
        &self,
        g: &mut Graph,
        samples: &Samples,
        idx: &[usize],
    ) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(self.encoders.len());
        for ((name, _), enc) in self.modalities.iter().zip(&self.encoders) {
            let rows = gather(
                |i| {
                    samples
                        .modality_row(name, i)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_default()
                },
                idx,
            )?;
            let m = g.constant(rows)?;
            out.push(enc.forward(g, &self.params, m)?);
        }
        Ok(out)
    }

    fn sample(&self, cond: Vec<f64>, rng: &mut Rng) -> Result<Vec<f64>> {
        let provider = CondScore {
            net: &self.score,
            params: &self.params,
            cond,
            steps: self.schedule.steps(),
            dim: self.shape.chunk_dim(),
        };
        let a = ddpm_sample(&provider, &self.schedule, rng)?;
        Ok(self.normalizer.denormalize_chunk(a.values()))
    }

    fn train<F>(
        &mut self,
        dataset: &Dataset,
        train: &TrainConfig,
        rng: &mut Rng,
        mut cond: F,
    ) -> Result<()>
    where
        F: FnMut(&mut Graph, &FusionCore, &[NodeId], NodeId) -> Result<NodeId>,
    {
        if train.steps == 0 {
            return Ok(());
        }
        if train.batch == 0 {
            bail!(Config, "batch size must be >= 1");
        }
        let samples = dataset.samples()?;
        let mut opt = OptimState::new(train.lr);
        let k_max = self.schedule.steps();
        for _ in 0..train.steps {
            let idx = sample_indices(rng, samples.len, train.batch);
            let mut g = Graph::new();
            let codes = self.recorded_codes(&mut g, &samples, &idx)?;
            let rs = g.constant(gather(|i| samples.robot_state_row(i).to_vec(), &idx)?)?;
            let c = cond(&mut g, self, &codes, rs)?;
            let a0 = gather(|i| samples.chunk_row(i).to_vec(), &idx)?;
            let this = &*self;
            let loss = denoise_loss(&mut g, &a0, &self.schedule, 1..=k_max, rng, |g, batch| {
                let ak = g.constant(batch.noised.clone())?;
                let t = g.constant(timestep_rows(&batch.steps, k_max)?)?;
                let input = g.concat_cols(&[ak, c, t])?;
                this.score.forward(g, &this.params, input)
            })?;
            self.loss_history.push(g.value(loss).data()[0]);
            g.backward(loss, &mut self.params)?;
            adam_step(&mut self.params, &mut opt)?;
        }
        self.trained_steps = train.steps;
        Ok(())
    }
}

struct CondScore<'a> {
    net: &'a Mlp,
    params: &'a ParamSet,
    cond: Vec<f64>,
    steps: usize,
    dim: usize,
}

impl ScoreProvider for CondScore<'_> {
    fn action_dim(&self) -> usize {
        self.dim
    }

    fn predict_eps(&self, noised: &[f64], k: usize) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(self.net.spec.input_dim);
        input.extend_from_slice(noised);
        input.extend_from_slice(&self.cond);
        input.extend_from_slice(&timestep_embedding(k, self.steps));
        self.net.infer(self.params, &input)
    }
}

/// Single score network on `⊕_i (code_i ⊕ robot_state)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatPolicy {
    pub core: FusionCore,
}

impl ConcatPolicy {
    pub fn init(
        dataset: &Dataset,
        cfg: &ExpertConfig,
        schedule: &NoiseSchedule,
        rng: &mut Rng,
    ) -> Result<Self> {
        let cond = dataset.modalities.len() * (cfg.code_dim + dataset.robot_state_dim);
        Ok(Self {
            core: FusionCore::init(dataset, cfg, cond, schedule, rng)?,
        })
    }

    pub fn conditioning(&self, obs: &Observation) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for code in self.core.codes(obs)? {
            out.extend(code);
            out.extend_from_slice(&obs.robot_state);
        }
        Ok(out)
    }
}

pub fn train_concat_policy(
    dataset: &Dataset,
    cfg: &ExpertConfig,
    train: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<ConcatPolicy> {
    let mut policy = ConcatPolicy::init(dataset, cfg, schedule, rng)?;
    policy.core.train(dataset, train, rng, |g, _, codes, rs| {
        let mut parts = Vec::with_capacity(codes.len() * 2);
        for &c in codes {
            parts.push(c);
            parts.push(rs);
        }
        g.concat_cols(&parts)
    })?;
    Ok(policy)
}

impl Policy for ConcatPolicy {
    fn name(&self) -> String {
        "concat".to_string()
    }

    fn horizon(&self) -> usize {
        self.core.shape.horizon
    }

    fn action_dim(&self) -> usize {
        self.core.shape.action_dim
    }

    fn param_count(&self) -> usize {
        self.core.params.scalar_count()
    }

    fn act(&self, obs: &Observation, rng: &mut Rng) -> Result<Vec<f64>> {
        let cond = self.conditioning(obs)?;
        self.core.sample(cond, rng)
    }
}

/// Single score network on `(Σ_i g_i · code_i) ⊕ robot_state`, with softmax
/// gate `g` computed from all codes and the robot state.
#[derive(Debug, Clone, PartialEq)]
pub struct MoEFeaturePolicy {
    pub core: FusionCore,
    pub gate: Mlp,
}

impl MoEFeaturePolicy {
    pub fn init(
        dataset: &Dataset,
        cfg: &ExpertConfig,
        gate_hidden: &[usize],
        schedule: &NoiseSchedule,
        rng: &mut Rng,
    ) -> Result<Self> {
        let n = dataset.modalities.len();
        let mut core = FusionCore::init(
            dataset,
            cfg,
            cfg.code_dim + dataset.robot_state_dim,
            schedule,
            rng,
        )?;
        let gate = Mlp::new(
            "gate",
            MlpSpec::new(
                n * cfg.code_dim + dataset.robot_state_dim,
                gate_hidden,
                n,
                cfg.activation,
            )?,
        );
        gate.init(&mut core.params, rng)?;
        Ok(Self { core, gate })
    }

    pub fn gate_weights(&self, obs: &Observation) -> Result<Vec<f64>> {
        let codes = self.core.codes(obs)?;
        self.gate_from_codes(&codes, &obs.robot_state)
    }

    fn gate_from_codes(&self, codes: &[Vec<f64>], robot_state: &[f64]) -> Result<Vec<f64>> {
        let mut input: Vec<f64> = codes.iter().flatten().copied().collect();
        input.extend_from_slice(robot_state);
        Ok(softmax(&self.gate.infer(&self.core.params, &input)?))
    }

    /// Gated mixture of codes followed by the robot state.
    pub fn conditioning(&self, obs: &Observation) -> Result<Vec<f64>> {
        let codes = self.core.codes(obs)?;
        let w = self.gate_from_codes(&codes, &obs.robot_state)?;
        let mut z = vec![0.0; codes[0].len()];
        for (wi, code) in w.iter().zip(&codes) {
            for (o, v) in z.iter_mut().zip(code) {
                *o += wi * v;
            }
        }
        z.extend_from_slice(&obs.robot_state);
        Ok(z)
    }
}

pub fn train_moe_policy(
    dataset: &Dataset,
    cfg: &ExpertConfig,
    gate_hidden: &[usize],
    train: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<MoEFeaturePolicy> {
    let mut policy = MoEFeaturePolicy::init(dataset, cfg, gate_hidden, schedule, rng)?;
    let gate = policy.gate.clone();
    policy
        .core
        .train(dataset, train, rng, |g, core, codes, rs| {
            let mut gin = codes.to_vec();
            gin.push(rs);
            let x = g.concat_cols(&gin)?;
            let logits = gate.forward(g, &core.params, x)?;
            let w = g.softmax_rows(logits)?;
            let z = g.mix(w, codes)?;
            g.concat_cols(&[z, rs])
        })?;
    Ok(policy)
}

impl Policy for MoEFeaturePolicy {
    fn name(&self) -> String {
        "moe".to_string()
    }

    fn horizon(&self) -> usize {
        self.core.shape.horizon
    }

    fn action_dim(&self) -> usize {
        self.core.shape.action_dim
    }

    fn param_count(&self) -> usize {
        self.core.params.scalar_count()
    }

    fn act(&self, obs: &Observation, rng: &mut Rng) -> Result<Vec<f64>> {
        let cond = self.conditioning(obs)?;
        self.core.sample(cond, rng)
    }
}
