//! Per-modality experts: an encoder plus `K_i` diffusion sub-policies whose
//! noise predictions are averaged.

use rand::Rng as _;

use crate::dataset::{Dataset, Samples};
use crate::diffusion::{denoise_loss, timestep_embedding, NoiseSchedule, Normalizer, TIMESTEP_DIM};
use crate::error::{bail, Result};
use crate::numcore::{
    adam_step, Activation, Graph, Mlp, MlpSpec, NodeId, OptimState, ParamSet, Tensor,
};
use crate::rng::Rng;

/// Encoder output concatenated with robot state, tagged with its modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub modality: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertConfig {
    pub sub_policies: usize,
    pub encoder_hidden: Vec<usize>,
    pub code_dim: usize,
    pub score_hidden: Vec<usize>,
    pub activation: Activation,
    /// Train sub-policy 0 on the upper half of denoising steps and sub-policy
    /// 1 on the lower half, and query each only inside its band.
    pub noise_band_split: bool,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            sub_policies: 2,
            encoder_hidden: vec![64, 64],
            code_dim: 32,
            score_hidden: vec![64, 64],
            activation: Activation::Tanh,
            noise_band_split: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 64,
            lr: 1e-3,
        }
    }
}

/// Dimensions shared by every network conditioned on a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionShape {
    pub action_dim: usize,
    pub horizon: usize,
}

impl ActionShape {
    pub fn chunk_dim(&self) -> usize {
        self.action_dim * self.horizon
    }
}

/// Common interface of anything that can act as a modality expert inside a
/// composition.
pub trait ScoreExpert: Sync {
    fn modality(&self) -> &str;
    fn modality_dim(&self) -> usize;
    fn embedding_dim(&self) -> usize;
    fn chunk_dim(&self) -> usize;
    fn is_trained(&self) -> bool;
    fn encode(&self, reading: &[f64], robot_state: &[f64]) -> Result<Embedding>;
    /// Composite noise prediction of this modality.
    fn intra_compose(&self, noised: &[f64], e: &Embedding, k: usize) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityExpert {
    pub modality: String,
    pub modality_dim: usize,
    pub robot_state_dim: usize,
    pub shape: ActionShape,
    pub params: ParamSet,
    pub encoder: Mlp,
    pub sub_policies: Vec<Mlp>,
    pub noise_band_split: bool,
    pub schedule: NoiseSchedule,
    pub normalizer: Normalizer,
    pub trained_steps: usize,
    pub loss_history: Vec<f64>,
}

impl ModalityExpert {
    /// Freshly initialized expert.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        modality: &str,
        modality_dim: usize,
        robot_state_dim: usize,
        shape: ActionShape,
        cfg: &ExpertConfig,
        schedule: NoiseSchedule,
        normalizer: Normalizer,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.sub_policies == 0 {
            bail!(Config, "an expert needs at least one sub-policy");
        }
        if cfg.noise_band_split && (cfg.sub_policies != 2 || schedule.steps() < 2) {
            bail!(
                Config,
                "noise-band split needs exactly 2 sub-policies and K >= 2"
            );
        }
        let encoder = Mlp::new(
            "enc",
            MlpSpec::new(
                modality_dim,
                &cfg.encoder_hidden,
                cfg.code_dim,
                cfg.activation,
            )?,
        );
        let emb_dim = cfg.code_dim + robot_state_dim;
        let sub_in = shape.chunk_dim() + emb_dim + TIMESTEP_DIM;
        let mut params = ParamSet::new();
        encoder.init(&mut params, rng)?;
        let mut subs = Vec::with_capacity(cfg.sub_policies);
        for j in 0..cfg.sub_policies {
            let sp = Mlp::new(
                format!("sub{j}"),
                MlpSpec::new(sub_in, &cfg.score_hidden, shape.chunk_dim(), cfg.activation)?,
            );
            sp.init(&mut params, rng)?;
            subs.push(sp);
        }
        Ok(Self {
            modality: modality.to_string(),
            modality_dim,
            robot_state_dim,
            shape,
            params,
            encoder,
            sub_policies: subs,
            noise_band_split: cfg.noise_band_split,
            schedule,
            normalizer,
            trained_steps: 0,
            loss_history: Vec::new(),
        })
    }

    /// Network shapes agree with the declared dims.
    pub fn validate(&self) -> Result<()> {
        if self.sub_policies.is_empty() {
            bail!(Format, "expert `{}` has no sub-policies", self.modality);
        }
        if self.encoder.spec.input_dim != self.modality_dim {
            bail!(
                Format,
                "encoder input {} does not match modality dim {}",
                self.encoder.spec.input_dim,
                self.modality_dim
            );
        }
        let sub_in = self.shape.chunk_dim() + self.code_dim() + self.robot_state_dim + TIMESTEP_DIM;
        for sp in &self.sub_policies {
            if sp.spec.input_dim != sub_in || sp.spec.output_dim != self.shape.chunk_dim() {
                bail!(
                    Format,
                    "sub-policy `{}` does not match the expert's dims",
                    sp.prefix
                );
            }
        }
        if self.normalizer.dim() != self.shape.action_dim {
            bail!(
                Format,
                "normalizer covers {} coordinates, actions have {}",
                self.normalizer.dim(),
                self.shape.action_dim
            );
        }
        if self.noise_band_split && self.sub_policies.len() != 2 {
            bail!(Format, "noise-band split needs exactly 2 sub-policies");
        }
        Ok(())
    }

    pub fn code_dim(&self) -> usize {
        self.encoder.spec.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Denoising steps sub-policy `j` is trained on and queried at.
    pub fn band(&self, j: usize) -> (usize, usize) {
        let k = self.schedule.steps();
        if !self.noise_band_split {
            return (1, k);
        }
        if j == 0 {
            (k / 2 + 1, k)
        } else {
            (1, k / 2)
        }
    }

    /// Noise prediction of sub-policy `j` on `[a^k ⊕ e ⊕ temb(k)]`.
    pub fn subpolicy_eps(
        &self,
        j: usize,
        noised: &[f64],
        e: &Embedding,
        k: usize,
    ) -> Result<Vec<f64>> {
        let Some(sp) = self.sub_policies.get(j) else {
            bail!(Contract, "expert `{}` has no sub-policy {j}", self.modality);
        };
        if k == 0 || k > self.schedule.steps() {
            bail!(
                Contract,
                "denoising step {k} outside 1..={}",
                self.schedule.steps()
            );
        }
        if noised.len() != self.shape.chunk_dim() {
            bail!(
                Shape,
                "noised action dim {} vs {}",
                noised.len(),
                self.shape.chunk_dim()
            );
        }
        let mut input = Vec::with_capacity(sp.spec.input_dim);
        input.extend_from_slice(noised);
        input.extend_from_slice(&e.values);
        input.extend_from_slice(&timestep_embedding(k, self.schedule.steps()));
        sp.infer(&self.params, &input)
    }

    /// Sub-policies active at step `k`.
    fn active(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.sub_policies.len()).filter(move |&j| {
            let (lo, hi) = self.band(j);
            k >= lo && k <= hi
        })
    }
}

impl ScoreExpert for ModalityExpert {
    fn modality(&self) -> &str {
        &self.modality
    }

    fn modality_dim(&self) -> usize {
        self.modality_dim
    }

    fn embedding_dim(&self) -> usize {
        self.code_dim() + self.robot_state_dim
    }

    fn chunk_dim(&self) -> usize {
        self.shape.chunk_dim()
    }

    fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }

    fn encode(&self, reading: &[f64], robot_state: &[f64]) -> Result<Embedding> {
        if reading.len() != self.modality_dim {
            bail!(
                Shape,
                "`{}` reading has dim {}, expected {}",
                self.modality,
                reading.len(),
                self.modality_dim
            );
        }
        if robot_state.len() != self.robot_state_dim {
            bail!(
                Shape,
                "robot state dim {} vs {}",
                robot_state.len(),
                self.robot_state_dim
            );
        }
        let mut values = self.encoder.infer(&self.params, reading)?;
        values.extend_from_slice(robot_state);
        Ok(Embedding {
            modality: self.modality.clone(),
            values,
        })
    }

    /// Arithmetic mean of the active sub-policies' predictions.
    fn intra_compose(&self, noised: &[f64], e: &Embedding, k: usize) -> Result<Vec<f64>> {
        if e.modality != self.modality {
            bail!(
                Contract,
                "embedding for `{}` passed to expert `{}`",
                e.modality,
                self.modality
            );
        }
        let mut sum: Option<Vec<f64>> = None;
        let mut count = 0usize;
        for j in self.active(k).collect::<Vec<_>>() {
            let eps = self.subpolicy_eps(j, noised, e, k)?;
            count += 1;
            match &mut sum {
                None => sum = Some(eps),
                Some(s) => s.iter_mut().zip(&eps).for_each(|(a, b)| *a += b),
            }
        }
        let Some(mut s) = sum else {
            bail!(
                Contract,
                "no sub-policy of `{}` covers step {k}",
                self.modality
            );
        };
        let n = count as f64;
        s.iter_mut().for_each(|v| *v /= n);
        Ok(s)
    }
}

/// Build a batch of rows from sample indices.
pub(crate) fn gather(rows: impl Fn(usize) -> Vec<f64>, idx: &[usize]) -> Result<Tensor> {
    let data: Vec<Vec<f64>> = idx.iter().map(|&i| rows(i)).collect();
    Tensor::from_rows(&data)
}

pub(crate) fn timestep_rows(steps: &[usize], k_max: usize) -> Result<Tensor> {
    let rows: Vec<[f64; TIMESTEP_DIM]> = steps
        .iter()
        .map(|&k| timestep_embedding(k, k_max))
        .collect();
    Tensor::from_rows(&rows)
}

pub(crate) fn sample_indices(rng: &mut Rng, len: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..len)).collect()
}

/// Record the ε-loss of every sub-policy of `expert` for one batch; returns
/// the mean over sub-policies.
pub(crate) fn expert_loss(
    g: &mut Graph,
    slot: usize,
    expert: &ModalityExpert,
    samples: &Samples,
    idx: &[usize],
    rng: &mut Rng,
) -> Result<NodeId> {
    let reading = gather(
        |i| {
            samples
                .modality_row(&expert.modality, i)
                .map(<[f64]>::to_vec)
                .unwrap_or_default()
        },
        idx,
    )?;
    let rs = gather(|i| samples.robot_state_row(i).to_vec(), idx)?;
    let a0 = gather(|i| samples.chunk_row(i).to_vec(), idx)?;
    let m = g.constant(reading)?;
    let code = expert.encoder.forward_in(g, slot, &expert.params, m)?;
    let rs = g.constant(rs)?;
    let e = g.concat_cols(&[code, rs])?;
    let k_max = expert.schedule.steps();
    let mut total: Option<NodeId> = None;
    for (j, sp) in expert.sub_policies.iter().enumerate() {
        let (lo, hi) = expert.band(j);
        let loss = denoise_loss(g, &a0, &expert.schedule, lo..=hi, rng, |g, batch| {
            let ak = g.constant(batch.noised.clone())?;
            let t = g.constant(timestep_rows(&batch.steps, k_max)?)?;
            let input = g.concat_cols(&[ak, e, t])?;
            sp.forward_in(g, slot, &expert.params, input)
        })?;
        total = Some(match total {
            None => loss,
            Some(acc) => g.add(acc, loss)?,
        });
    }
    let total = total.expect("at least one sub-policy");
    g.scale(total, 1.0 / expert.sub_policies.len() as f64)
}

/// Train the encoder and all sub-policies of one modality on that modality's
/// stream only.
#[allow(clippy::too_many_arguments)]
pub fn train_expert(
    dataset: &Dataset,
    modality: &str,
    cfg: &ExpertConfig,
    train: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<ModalityExpert> {
    let dim = dataset.modality_dim(modality)?;
    let shape = ActionShape {
        action_dim: dataset.action_dim,
        horizon: dataset.horizon,
    };
    let mut expert = ModalityExpert::init(
        modality,
        dim,
        dataset.robot_state_dim,
        shape,
        cfg,
        schedule.clone(),
        dataset.normalizer.clone(),
        rng,
    )?;
    if train.steps == 0 {
        return Ok(expert);
    }
    if train.batch == 0 {
        bail!(Config, "batch size must be >= 1");
    }
    let samples = dataset.restricted_to(&[modality]).samples()?;
    let mut opt = OptimState::new(train.lr);
    for _ in 0..train.steps {
        let idx = sample_indices(rng, samples.len, train.batch);
        let mut g = Graph::new();
        let loss = expert_loss(&mut g, 0, &expert, &samples, &idx, rng)?;
        expert.loss_history.push(g.value(loss).data()[0]);
        g.backward(loss, &mut expert.params)?;
        adam_step(&mut expert.params, &mut opt)?;
    }
    expert.trained_steps = train.steps;
    Ok(expert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::rng::seeded;

    fn small_cfg() -> ExpertConfig {
        ExpertConfig {
            encoder_hidden: vec![8],
            code_dim: 4,
            score_hidden: vec![16],
            ..ExpertConfig::default()
        }
    }

    fn expert(seed: u64, rs_dim: usize) -> ModalityExpert {
        ModalityExpert::init(
            "vis",
            5,
            rs_dim,
            ActionShape {
                action_dim: 2,
                horizon: 1,
            },
            &small_cfg(),
            make_schedule(10, 1e-4, 0.02).unwrap(),
            Normalizer::identity(2),
            &mut seeded(seed),
        )
        .unwrap()
    }

    fn zero_weights(e: &mut ModalityExpert, mlp: &Mlp) {
        for l in 0..mlp.spec.layer_dims().len() {
            e.params.get_mut(&mlp.weight_name(l)).unwrap().fill(0.0);
        }
    }

    #[test]
    fn zero_encoder_gives_bias_and_robot_state() {
        let mut e = expert(1, 2);
        let enc = e.encoder.clone();
        zero_weights(&mut e, &enc);
        e.params
            .get_mut("enc.b1")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let emb = e.encode(&[0.3, 0.1, 0.2, -0.5, 1.0], &[0.7, -0.7]).unwrap();
        assert_eq!(emb.values, vec![1.0, 2.0, 3.0, 4.0, 0.7, -0.7]);
    }

    #[test]
    fn empty_robot_state_gives_code_only() {
        let e = expert(1, 0);
        let emb = e.encode(&[0.3, 0.1, 0.2, -0.5, 1.0], &[]).unwrap();
        assert_eq!(
            emb.values,
            e.encoder
                .infer(&e.params, &[0.3, 0.1, 0.2, -0.5, 1.0])
                .unwrap()
        );
        assert!(matches!(
            e.encode(&[0.0; 4], &[]),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn zero_subpolicy_outputs_its_bias() {
        let mut e = expert(2, 2);
        let sp = e.sub_policies[0].clone();
        zero_weights(&mut e, &sp);
        e.params
            .get_mut("sub0.b1")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.5, -0.5]);
        let emb = e.encode(&[0.0; 5], &[0.0, 0.0]).unwrap();
        assert_eq!(
            e.subpolicy_eps(0, &[0.1, 0.2], &emb, 3).unwrap(),
            vec![0.5, -0.5]
        );
    }

    #[test]
    fn timestep_changes_prediction() {
        let e = expert(3, 2);
        let emb = e.encode(&[0.1; 5], &[0.0, 0.0]).unwrap();
        let outs: Vec<Vec<f64>> = (1..=10)
            .map(|k| e.subpolicy_eps(0, &[0.2, -0.1], &emb, k).unwrap())
            .collect();
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                assert_ne!(outs[i], outs[j]);
            }
        }
        assert_eq!(e.subpolicy_eps(0, &[0.2, -0.1], &emb, 4).unwrap(), outs[3]);
    }

    #[test]
    fn intra_compose_is_the_mean() {
        let e = expert(4, 2);
        let emb = e.encode(&[0.1; 5], &[0.3, 0.0]).unwrap();
        let u = e.subpolicy_eps(0, &[0.2, -0.1], &emb, 5).unwrap();
        let v = e.subpolicy_eps(1, &[0.2, -0.1], &emb, 5).unwrap();
        let c = e.intra_compose(&[0.2, -0.1], &emb, 5).unwrap();
        for i in 0..2 {
            assert_eq!(c[i], (u[i] + v[i]) / 2.0);
            assert!(c[i] >= u[i].min(v[i]) && c[i] <= u[i].max(v[i]));
        }
    }

    #[test]
    fn single_subpolicy_composition_is_identity() {
        let cfg = ExpertConfig {
            sub_policies: 1,
            ..small_cfg()
        };
        let e = ModalityExpert::init(
            "tac",
            3,
            2,
            ActionShape {
                action_dim: 2,
                horizon: 1,
            },
            &cfg,
            make_schedule(10, 1e-4, 0.02).unwrap(),
            Normalizer::identity(2),
            &mut seeded(5),
        )
        .unwrap();
        let emb = e.encode(&[1.0, 0.0, 0.1], &[0.0, 0.0]).unwrap();
        assert_eq!(
            e.intra_compose(&[0.0, 0.5], &emb, 2).unwrap(),
            e.subpolicy_eps(0, &[0.0, 0.5], &emb, 2).unwrap()
        );
    }

    #[test]
    fn identical_subpolicies_compose_to_either() {
        let mut e = expert(6, 2);
        for l in 0..2 {
            for kind in ["w", "b"] {
                let src = e.params.get(&format!("sub0.{kind}{l}")).unwrap().clone();
                *e.params.get_mut(&format!("sub1.{kind}{l}")).unwrap() = src;
            }
        }
        let emb = e.encode(&[0.1; 5], &[0.3, 0.0]).unwrap();
        let u = e.subpolicy_eps(0, &[0.2, -0.1], &emb, 5).unwrap();
        let c = e.intra_compose(&[0.2, -0.1], &emb, 5).unwrap();
        for i in 0..2 {
            assert!((c[i] - u[i]).abs() <= 1e-15);
        }
    }

    #[test]
    fn band_split_queries_one_subpolicy() {
        let cfg = ExpertConfig {
            noise_band_split: true,
            ..small_cfg()
        };
        let e = ModalityExpert::init(
            "vis",
            5,
            2,
            ActionShape {
                action_dim: 2,
                horizon: 1,
            },
            &cfg,
            make_schedule(10, 1e-4, 0.02).unwrap(),
            Normalizer::identity(2),
            &mut seeded(7),
        )
        .unwrap();
        assert_eq!(e.band(0), (6, 10));
        assert_eq!(e.band(1), (1, 5));
        let emb = e.encode(&[0.1; 5], &[0.3, 0.0]).unwrap();
        assert_eq!(
            e.intra_compose(&[0.2, 0.1], &emb, 8).unwrap(),
            e.subpolicy_eps(0, &[0.2, 0.1], &emb, 8).unwrap()
        );
        assert_eq!(
            e.intra_compose(&[0.2, 0.1], &emb, 2).unwrap(),
            e.subpolicy_eps(1, &[0.2, 0.1], &emb, 2).unwrap()
        );
    }
}
