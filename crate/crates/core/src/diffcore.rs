//! DDPM forward process, linear noise schedule and ancestral sampling.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ConceptId, Sample};
use crate::error::{Error, Result};
use crate::seeding;

/// Default diffusion length.
pub const DEFAULT_STEPS: usize = 200;
/// Default linear schedule endpoints for [`DEFAULT_STEPS`].
pub const DEFAULT_BETA_START: f64 = 5e-4;
pub const DEFAULT_BETA_END: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// Linear beta schedule with both endpoints included.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(x0: [f64; 2], t: usize, eps: [f64; 2], schedule: &NoiseSchedule) -> Result<[f64; 2]> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar[t];
    Ok(mix(x0, eps, ab))
}

fn mix(x0: [f64; 2], eps: [f64; 2], alpha_bar: f64) -> [f64; 2] {
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    [a * x0[0] + b * eps[0], a * x0[1] + b * eps[1]]
}

/// Points paired with the concept token they are conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedBatch {
    pub x0: Array2<f64>,
    pub tokens: Vec<ConceptId>,
}

impl ConditionedBatch {
    pub fn new(x0: Array2<f64>, tokens: Vec<ConceptId>) -> Result<Self> {
        if x0.ncols() != 2 || x0.nrows() != tokens.len() {
            return Err(Error::ShapeMismatch(format!(
                "x0 is {:?}, {} tokens",
                x0.dim(),
                tokens.len()
            )));
        }
        Ok(Self { x0, tokens })
    }

    /// Conditions every sample on its own concept id.
    pub fn from_samples(samples: &[Sample]) -> Self {
        Self {
            x0: crate::data::points(samples),
            tokens: samples.iter().map(|s| s.concept).collect(),
        }
    }

    /// Conditions every sample on `token`.
    pub fn with_token(samples: &[Sample], token: ConceptId) -> Self {
        Self {
            x0: crate::data::points(samples),
            tokens: vec![token; samples.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Draws `size` rows uniformly with replacement.
    pub fn resample<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Self> {
        if self.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        Ok(Self {
            x0: self.x0.select(ndarray::Axis(0), &idx),
            tokens: idx.iter().map(|&i| self.tokens[i]).collect(),
        })
    }
}

/// A conditioned batch together with its timestep and noise draws.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionBatch {
    pub x0: Array2<f64>,
    pub tokens: Vec<ConceptId>,
    pub t: Vec<usize>,
    pub eps: Array2<f64>,
}

impl DiffusionBatch {
    /// Uniform `t` in `[0, T)` and standard-normal `eps`, one per row.
    pub fn draw<R: Rng + ?Sized>(
        batch: &ConditionedBatch,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = batch.len();
        let t = (0..n).map(|_| rng.random_range(0..schedule.steps())).collect();
        let eps = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
        Ok(Self {
            x0: batch.x0.clone(),
            tokens: batch.tokens.clone(),
            t,
            eps,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let n = self.len();
        if self.x0.dim() != (n, 2) || self.eps.dim() != (n, 2) || self.t.len() != n {
            return Err(Error::ShapeMismatch("diffusion batch fields disagree".into()));
        }
        if let Some(&t) = self.t.iter().find(|&&t| t >= schedule.steps()) {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: schedule.steps(),
            });
        }
        if !self.eps.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("eps".into()));
        }
        Ok(())
    }

    /// Noised inputs `x_t` for every row.
    pub fn noised(&self, schedule: &NoiseSchedule) -> Result<Array2<f64>> {
        self.validate(schedule)?;
        let mut xt = Array2::zeros((self.len(), 2));
        for i in 0..self.len() {
            let p = mix(
                [self.x0[[i, 0]], self.x0[[i, 1]]],
                [self.eps[[i, 0]], self.eps[[i, 1]]],
                schedule.alpha_bar[self.t[i]],
            );
            xt[[i, 0]] = p[0];
            xt[[i, 1]] = p[1];
        }
        Ok(xt)
    }
}

/// Anything that predicts the noise added to `x_t`.
pub trait NoisePredictor {
    fn predict(&self, x_t: ArrayView2<'_, f64>, tokens: &[ConceptId], t: &[usize]) -> Result<Array2<f64>>;
}

/// Ancestral DDPM sampling with posterior variance `beta_t`.
pub fn p_sample_loop<M: NoisePredictor + ?Sized>(
    model: &M,
    token: ConceptId,
    n: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Array2<f64>> {
    let mut rng = seeding::rng(seed);
    let mut x = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
    if n == 0 {
        return Ok(x);
    }
    let tokens = vec![token; n];
    for t in (0..schedule.steps()).rev() {
        let ts = vec![t; n];
        let eps_hat = model.predict(x.view(), &tokens, &ts)?;
        if eps_hat.dim() != (n, 2) {
            return Err(Error::ShapeMismatch(format!(
                "predictor returned {:?}, expected ({n}, 2)",
                eps_hat.dim()
            )));
        }
        let beta = schedule.beta[t];
        let coef = beta / (1.0 - schedule.alpha_bar[t]).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha[t].sqrt();
        x = (&x - &(eps_hat * coef)) * inv_sqrt_alpha;
        if t > 0 {
            let sigma = beta.sqrt();
            x.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(x)
}

/// Column means of an `n x d` matrix.
pub fn column_means(x: &Array2<f64>) -> Array1<f64> {
    x.mean_axis(ndarray::Axis(0))
        .unwrap_or_else(|| Array1::zeros(x.ncols()))
}
