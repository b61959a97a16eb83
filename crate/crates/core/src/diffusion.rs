//! DDPM noise schedules, forward noising, the ε-prediction loss and ancestral
//! sampling against any [`ScoreProvider`].

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numcore::{Graph, NodeId, Tensor};
use crate::rng::{uniform_inclusive, NoiseSource, Rng};

/// Number of sinusoidal timestep features.
pub const TIMESTEP_DIM: usize = 16;

/// Reverse-process noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorVariance {
    /// σ_k² = β_k
    #[default]
    Beta,
    /// σ_k² = β_k (1 - ᾱ_{k-1}) / (1 - ᾱ_k)
    BetaTilde,
}

impl PosteriorVariance {
    pub fn token(self) -> &'static str {
        match self {
            PosteriorVariance::Beta => "beta",
            PosteriorVariance::BetaTilde => "beta_tilde",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(Self::Beta),
            "beta_tilde" => Ok(Self::BetaTilde),
            other => bail!(Config, "unknown posterior variance `{other}`"),
        }
    }
}

/// β/α/ᾱ over denoising steps `k = 1..=K`. Vectors are indexed `k - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior: PosteriorVariance,
}

/// Linear β schedule from `beta_start` (k = 1) to `beta_end` (k = K).
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        bail!(Config, "schedule needs at least one step");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        bail!(
            Config,
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        );
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        steps,
        beta_start,
        beta_end,
        beta,
        alpha,
        alpha_bar,
        posterior: PosteriorVariance::Beta,
    })
}

impl NoiseSchedule {
    pub fn with_posterior(mut self, posterior: PosteriorVariance) -> Self {
        self.posterior = posterior;
        self
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn posterior(&self) -> PosteriorVariance {
        self.posterior
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps {
            bail!(Contract, "denoising step {k} outside 1..={}", self.steps);
        }
        Ok(())
    }

    /// Reverse-step noise standard deviation at step `k`.
    pub fn sigma(&self, k: usize) -> f64 {
        match self.posterior {
            PosteriorVariance::Beta => self.beta(k).sqrt(),
            PosteriorVariance::BetaTilde => {
                let prev = if k > 1 { self.alpha_bar(k - 1) } else { 1.0 };
                (self.beta(k) * (1.0 - prev) / (1.0 - self.alpha_bar(k))).sqrt()
            }
        }
    }

    /// Identity used to detect incompatible checkpoints.
    pub fn descriptor(&self) -> String {
        format!(
            "K={};beta={:e}..{:e};posterior={}",
            self.steps,
            self.beta_start,
            self.beta_end,
            self.posterior.token()
        )
    }
}

/// A normalized action chunk (`action_dim · horizon` values in `[-1, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk(pub Vec<f64>);

impl ActionChunk {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Deterministic noise predictor `ε̂(a^k, k)` with its condition already bound.
pub trait ScoreProvider {
    fn action_dim(&self) -> usize;
    fn predict_eps(&self, noised: &[f64], k: usize) -> Result<Vec<f64>>;
}

/// `a^k = √ᾱ_k · a0 + √(1-ᾱ_k) · ε` for a given ε.
pub fn noise_with(a0: &[f64], k: usize, sched: &NoiseSchedule, eps: &[f64]) -> Result<Vec<f64>> {
    sched.check_step(k)?;
    if eps.len() != a0.len() {
        bail!(
            Shape,
            "noise dim {} does not match action dim {}",
            eps.len(),
            a0.len()
        );
    }
    let ab = sched.alpha_bar(k);
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(a0.iter().zip(eps).map(|(a, e)| s0 * a + s1 * e).collect())
}

/// Forward process: draw ε ~ N(0, I) and return `(a^k, ε)`.
pub fn forward_noise(
    a0: &[f64],
    k: usize,
    sched: &NoiseSchedule,
    noise: &mut impl NoiseSource,
) -> Result<(Vec<f64>, Vec<f64>)> {
    sched.check_step(k)?;
    let mut eps = vec![0.0; a0.len()];
    noise.fill_normal(&mut eps);
    let ak = noise_with(a0, k, sched, &eps)?;
    Ok((ak, eps))
}

/// Noised batch drawn for one loss evaluation.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub noised: Tensor,
    pub eps: Tensor,
    pub steps: Vec<usize>,
}

/// Draw per-row steps uniformly from `band` and noise every row of `a0`.
pub fn noise_batch(
    a0: &Tensor,
    sched: &NoiseSchedule,
    band: RangeInclusive<usize>,
    rng: &mut Rng,
) -> Result<NoisedBatch> {
    let (lo, hi) = (*band.start(), *band.end());
    if lo == 0 || hi > sched.steps() || lo > hi {
        bail!(
            Contract,
            "step band {lo}..={hi} outside 1..={}",
            sched.steps()
        );
    }
    let (n, d) = (a0.rows(), a0.cols());
    let mut noised = Vec::with_capacity(n * d);
    let mut eps_all = Vec::with_capacity(n * d);
    let mut steps = Vec::with_capacity(n);
    for r in 0..n {
        let k = uniform_inclusive(rng, lo, hi);
        let (ak, eps) = forward_noise(a0.row_slice(r), k, sched, rng)?;
        noised.extend(ak);
        eps_all.extend(eps);
        steps.push(k);
    }
    Ok(NoisedBatch {
        noised: Tensor::matrix(n, d, noised)?,
        eps: Tensor::matrix(n, d, eps_all)?,
        steps,
    })
}

/// ε-MSE objective: mean over the batch of `‖ε - ε̂(a^k, k)‖²`, with `k`
/// uniform in `band`. `score` records the prediction on `g` given the noised
/// actions and per-row steps; the condition is whatever it closes over.
pub fn denoise_loss<F>(
    g: &mut Graph,
    a0: &Tensor,
    sched: &NoiseSchedule,
    band: RangeInclusive<usize>,
    rng: &mut Rng,
    score: F,
) -> Result<NodeId>
where
    F: FnOnce(&mut Graph, &NoisedBatch) -> Result<NodeId>,
{
    if a0.is_empty() || a0.dims().len() != 2 {
        bail!(Contract, "denoise_loss needs a nonempty batch");
    }
    let batch = noise_batch(a0, sched, band, rng)?;
    let pred = score(g, &batch)?;
    if g.value(pred).dims() != batch.eps.dims() {
        bail!(
            Shape,
            "score output dims {:?} vs noise dims {:?}",
            g.value(pred).dims(),
            batch.eps.dims()
        );
    }
    let target = g.constant(batch.eps)?;
    let diff = g.sub(target, pred)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / a0.rows() as f64)
}

/// Stack clean action chunks into a loss batch.
pub fn action_batch(rows: &[Vec<f64>]) -> Result<Tensor> {
    if rows.is_empty() {
        bail!(Contract, "empty training batch");
    }
    Tensor::from_rows(rows)
}

/// Sinusoidal features of `k / K` at 8 geometric frequencies from 1 to K.
pub fn timestep_embedding(k: usize, steps: usize) -> [f64; TIMESTEP_DIM] {
    let x = k as f64 / steps as f64;
    let pairs = TIMESTEP_DIM / 2;
    let top = (steps.max(1) as f64).ln();
    let mut out = [0.0; TIMESTEP_DIM];
    for j in 0..pairs {
        let freq = (top * j as f64 / (pairs - 1) as f64).exp();
        out[2 * j] = (freq * x).sin();
        out[2 * j + 1] = (freq * x).cos();
    }
    out
}

/// Ancestral sampling starting from `a^K ~ N(0, I)`.
pub fn ddpm_sample(
    score: &dyn ScoreProvider,
    sched: &NoiseSchedule,
    noise: &mut impl NoiseSource,
) -> Result<ActionChunk> {
    let mut init = vec![0.0; score.action_dim()];
    noise.fill_normal(&mut init);
    ddpm_sample_from(score, sched, init, noise)
}

/// Ancestral sampling from a given `a^K`. The result is clamped to `[-1, 1]`.
pub fn ddpm_sample_from(
    score: &dyn ScoreProvider,
    sched: &NoiseSchedule,
    init: Vec<f64>,
    noise: &mut impl NoiseSource,
) -> Result<ActionChunk> {
    let mut a = sample_unclamped(score, sched, init, noise)?;
    a.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(ActionChunk(a))
}

/// Reverse process without the final clamp.
pub fn sample_unclamped(
    score: &dyn ScoreProvider,
    sched: &NoiseSchedule,
    init: Vec<f64>,
    noise: &mut impl NoiseSource,
) -> Result<Vec<f64>> {
    let dim = score.action_dim();
    if init.len() != dim {
        bail!(
            Shape,
            "initial sample dim {} vs action dim {dim}",
            init.len()
        );
    }
    let mut a = init;
    let mut z = vec![0.0; dim];
    for k in (1..=sched.steps()).rev() {
        let eps = score.predict_eps(&a, k)?;
        if eps.len() != dim {
            bail!(Shape, "score returned {} values, expected {dim}", eps.len());
        }
        let inv_sqrt_alpha = 1.0 / sched.alpha(k).sqrt();
        let coef = sched.beta(k) / (1.0 - sched.alpha_bar(k)).sqrt();
        if k > 1 {
            noise.fill_normal(&mut z);
        }
        let sigma = sched.sigma(k);
        for ((v, e), zi) in a.iter_mut().zip(&eps).zip(&z) {
            let mean = inv_sqrt_alpha * (*v - coef * e);
            *v = if k > 1 { mean + sigma * zi } else { mean };
        }
        if a.iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "non-finite sample at denoising step {k}");
        }
    }
    Ok(a)
}

/// Per-coordinate min/max scaling of actions to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            min: vec![-1.0; dim],
            max: vec![1.0; dim],
        }
    }

    pub fn fit<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            bail!(Contract, "cannot fit normalization on no data");
        };
        let d = first.as_ref().len();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for r in rows {
            for (i, &v) in r.as_ref().iter().enumerate() {
                min[i] = min[i].min(v);
                max[i] = max[i].max(v);
            }
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Normalize one action (length `dim`).
    pub fn normalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| {
                if hi > lo {
                    2.0 * (v - lo) / (hi - lo) - 1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn denormalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| {
                if hi > lo {
                    lo + (v + 1.0) * 0.5 * (hi - lo)
                } else {
                    lo
                }
            })
            .collect()
    }

    /// Apply to a chunk of `horizon` consecutive actions.
    pub fn normalize_chunk(&self, chunk: &[f64]) -> Vec<f64> {
        chunk
            .chunks(self.dim())
            .flat_map(|a| self.normalize(a))
            .collect()
    }

    pub fn denormalize_chunk(&self, chunk: &[f64]) -> Vec<f64> {
        chunk
            .chunks(self.dim())
            .flat_map(|a| self.denormalize(a))
            .collect()
    }
}
