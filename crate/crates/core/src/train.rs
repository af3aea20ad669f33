//! Plain denoiser training: Adam for building base models, SGD for fine-tunes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Concept, ConceptDataset, ConceptId};
use crate::diffcore::{ConditionedBatch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::losses::{LossSelector, LossSpec};
use crate::model::{gradient_with_rng, DenoiserParams};
use crate::seeding::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            lr: 2e-3,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn update(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((w, g), m), v) in theta.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// `theta[i] -= lr * grad[i]` for every coordinate.
pub fn sgd_update(theta: &mut [f64], grad: &[f64], lr: f64) {
    for (w, g) in theta.iter_mut().zip(grad) {
        *w -= lr * g;
    }
}

/// `n` fresh draws from each concept's generator, conditioned on its own id.
pub fn generator_corpus(concepts: &[&Concept], n: usize, seed: u64) -> ConditionedBatch {
    let mut x0 = ndarray::Array2::zeros((0, 2));
    let mut tokens = Vec::new();
    for c in concepts {
        let mut rng = seeding::rng_from(seed, &[stream::CORPUS, c.id.0 as u64]);
        let pts = c.draw_many(n, &mut rng);
        x0.append(ndarray::Axis(0), pts.view()).expect("two columns");
        tokens.extend(std::iter::repeat_n(c.id, n));
    }
    ConditionedBatch { x0, tokens }
}

/// Concepts whose ids already have a row in the model's token table.
pub fn known_concepts<'a>(dataset: &'a ConceptDataset, params: &DenoiserParams) -> Vec<&'a Concept> {
    dataset
        .concepts
        .iter()
        .filter(|c| params.has_token(params.token_for(c.id)))
        .collect()
}

/// Trains on the denoising objective with Adam under a cosine learning-rate
/// decay to zero; returns per-step batch losses.
pub fn train_denoiser(
    params: &DenoiserParams,
    data: &ConditionedBatch,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(DenoiserParams, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let spec = LossSpec::new(LossSelector::Prior);
    let mut out = params.clone();
    let mut adam = Adam::new(out.len(), cfg.lr);
    let mut rng = seeding::rng_from(cfg.seed, &[stream::TRAIN]);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = data.resample(cfg.batch_size, &mut rng)?;
        let g = gradient_with_rng(&out, &spec, &batch, schedule, &mut rng)?;
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("training gradient at step {step}")));
        }
        adam.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        adam.update(&mut out.theta, &g.full);
        history.push(g.loss.value);
    }
    Ok((out, history))
}

/// Relabels every row of `batch` with `token`.
pub fn relabel(batch: &ConditionedBatch, token: ConceptId) -> ConditionedBatch {
    ConditionedBatch {
        x0: batch.x0.clone(),
        tokens: vec![token; batch.len()],
    }
}

/// Draws `n` standard samples through `rng`; shared by tests.
pub fn standard_points<R: Rng + ?Sized>(n: usize, rng: &mut R) -> ndarray::Array2<f64> {
    ndarray::Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_denoiser, Arch};

    fn arch() -> Arch {
        Arch {
            width: 32,
            trunk_blocks: 2,
            cond_blocks: 1,
            embed_dim: 4,
            attn_dim: 8,
            time_dim: 8,
            concepts: 1,
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            adam.update(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut x = vec![1.0, 1.0];
        Adam::new(2, 0.1).update(&mut x, &[5.0, -0.01]);
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] - 1.1).abs() < 1e-6, "{x:?}");
    }

    #[test]
    fn zero_steps_is_identity_and_training_reduces_loss() {
        let p = init_denoiser(&arch(), 1).unwrap();
        let mut rng = seeding::rng(3);
        let x0 = standard_points(256, &mut rng) * 0.2 + 1.5;
        let data = ConditionedBatch::new(x0, vec![ConceptId(0); 256]).unwrap();
        let s = NoiseSchedule::default();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert_eq!(train_denoiser(&p, &data, &s, &cfg).unwrap().0, p);
        let cfg = TrainConfig {
            steps: 400,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let (_, hist) = train_denoiser(&p, &data, &s, &cfg).unwrap();
        let head: f64 = hist[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = hist[350..].iter().sum::<f64>() / 50.0;
        assert!(tail < 0.8 * head, "{head} -> {tail}");
    }

    #[test]
    fn corpus_is_deterministic_and_labelled() {
        let c = Concept {
            id: ConceptId(3),
            name: "blob".into(),
            family: crate::data::Family::GaussianBlobs,
            transform: Default::default(),
            role: crate::data::Role::Safe,
        };
        let a = generator_corpus(&[&c], 10, 4);
        assert_eq!(a, generator_corpus(&[&c], 10, 4));
        assert_eq!(a.tokens, vec![ConceptId(3); 10]);
    }
}
