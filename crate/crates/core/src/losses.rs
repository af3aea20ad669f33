//! Prior-preservation, loss-maximization, representation-noising and
//! combined immunization objectives.
//!
//! All losses are deterministic functions of `(params, batch, draws)`; the
//! random parts (timesteps, forward noise, and the standard-normal variates
//! behind the noising targets) are drawn up front into [`LossDraws`].
//!
//! Noising targets are constants for differentiation: the gradient of
//! `MSE(z, target)` flows into `z` only, never through the sampled target or
//! through the layer statistics that parameterize it.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ConditionedBatch, DiffusionBatch, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{ActivationTrace, DenoiserParams};

/// Lower bound on the noising-target variance.
pub const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSelector {
    Prior,
    Max,
    Noise,
    Immunize,
}

impl LossSelector {
    pub const ALL: [LossSelector; 4] = [Self::Prior, Self::Max, Self::Noise, Self::Immunize];

    pub fn name(self) -> &'static str {
        match self {
            Self::Prior => "prior",
            Self::Max => "max",
            Self::Noise => "noise",
            Self::Immunize => "immunize",
        }
    }

    fn uses_noise(self) -> bool {
        matches!(self, Self::Noise | Self::Immunize)
    }
}

/// Statistics parameterizing the noising target distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseStats {
    /// One mean/variance per layer, pooled over batch and width.
    #[default]
    Pooled,
    PerChannel,
}

/// How per-layer noising errors combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerReduction {
    #[default]
    Sum,
    Mean,
}

/// Which blocks have their post-activation branch outputs noised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLayers {
    #[default]
    Conditioning,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseOptions {
    pub stats: NoiseStats,
    pub reduction: LayerReduction,
    pub layers: NoiseLayers,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub selector: LossSelector,
    /// Weight of the noising term inside the immunization loss.
    pub beta: f64,
    pub noise: NoiseOptions,
}

impl LossSpec {
    pub fn new(selector: LossSelector) -> Self {
        Self {
            selector,
            beta: 1.0,
            noise: NoiseOptions::default(),
        }
    }

    pub fn immunize(beta: f64, noise: NoiseOptions) -> Self {
        Self {
            selector: LossSelector::Immunize,
            beta,
            noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    fn single(name: &str, value: f64) -> Self {
        Self {
            value,
            components: BTreeMap::from([(name.to_string(), value)]),
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }
}

/// Explicit per-layer noising targets, aligned with a trace's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTargets {
    pub layers: Vec<Array2<f64>>,
}

impl NoiseTargets {
    /// `target = mu + sigma * xi` with statistics taken from the trace.
    pub fn from_standard(trace: &ActivationTrace, xi: &[Array2<f64>], stats: NoiseStats) -> Result<Self> {
        if xi.len() != trace.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} standard draws for {} layers",
                xi.len(),
                trace.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(xi.len());
        for (layer, x) in trace.layers.iter().zip(xi) {
            if layer.z.len() < 2 {
                return Err(Error::InsufficientData(format!(
                    "layer {} has {} elements; variance needs at least 2",
                    layer.block,
                    layer.z.len()
                )));
            }
            if x.dim() != layer.z.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "draw {:?} vs activation {:?}",
                    x.dim(),
                    layer.z.dim()
                )));
            }
            let target = match stats {
                NoiseStats::Pooled => {
                    let sd = layer.var.max(VAR_FLOOR).sqrt();
                    x.mapv(|v| layer.mu + sd * v)
                }
                NoiseStats::PerChannel => {
                    let mu: Array1<f64> = layer.z.mean_axis(Axis(0)).expect("nonempty");
                    let var = layer.z.var_axis(Axis(0), 0.0);
                    let sd = var.mapv(|v| v.max(VAR_FLOOR).sqrt());
                    x * &sd + &mu
                }
            };
            layers.push(target);
        }
        Ok(Self { layers })
    }
}

/// Source of noising targets for one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseDraw {
    /// Standard-normal variates; targets follow the current layer statistics.
    Standard(Vec<Array2<f64>>),
    /// Targets frozen in advance.
    Fixed(NoiseTargets),
}

/// All randomness consumed by one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDraws {
    pub batch: DiffusionBatch,
    pub noise: Option<NoiseDraw>,
}

impl LossDraws {
    pub fn plain(batch: DiffusionBatch) -> Self {
        Self { batch, noise: None }
    }

    /// Draws `t`, `eps` and, when the loss needs them, noising variates.
    pub fn draw<R: Rng + ?Sized>(
        params: &DenoiserParams,
        spec: &LossSpec,
        batch: &ConditionedBatch,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        let batch = DiffusionBatch::draw(batch, schedule, rng)?;
        let noise = if spec.selector.uses_noise() {
            let n = batch.len();
            let w = params.arch.width;
            let xi = params
                .traced_blocks(spec.noise.layers)
                .iter()
                .map(|_| Array2::from_shape_fn((n, w), |_| rng.sample::<f64, _>(StandardNormal)))
                .collect();
            Some(NoiseDraw::Standard(xi))
        } else {
            None
        };
        Ok(Self { batch, noise })
    }

    /// Replaces standard variates by the targets they produce at `params`.
    pub fn freeze(&self, params: &DenoiserParams, spec: &LossSpec, schedule: &NoiseSchedule) -> Result<Self> {
        let noise = match &self.noise {
            Some(NoiseDraw::Standard(xi)) => {
                let xt = self.batch.noised(schedule)?;
                let cache = params.forward_cached(xt.view(), &self.batch.tokens, &self.batch.t)?;
                let trace = params.trace_from(&cache, spec.noise.layers);
                Some(NoiseDraw::Fixed(NoiseTargets::from_standard(&trace, xi, spec.noise.stats)?))
            }
            other => other.clone(),
        };
        Ok(Self {
            batch: self.batch.clone(),
            noise,
        })
    }
}

/// Mean over rows of `||eps_hat - eps||^2`.
pub fn denoising_error(eps_hat: &Array2<f64>, eps: &Array2<f64>) -> f64 {
    let n = eps.nrows().max(1) as f64;
    (eps_hat - eps).mapv(|v| v * v).sum() / n
}

/// Value and per-layer gradients of `sum_j MSE(z_j, target_j)` (or the mean over layers).
pub fn noise_loss_and_grad(
    trace: &ActivationTrace,
    targets: &NoiseTargets,
    reduction: LayerReduction,
) -> Result<(f64, Vec<Array2<f64>>)> {
    if trace.layers.is_empty() {
        return Err(Error::InvalidArgument("empty activation trace".into()));
    }
    if targets.layers.len() != trace.layers.len() {
        return Err(Error::ShapeMismatch("targets and trace disagree".into()));
    }
    let scale = match reduction {
        LayerReduction::Sum => 1.0,
        LayerReduction::Mean => 1.0 / trace.layers.len() as f64,
    };
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(trace.layers.len());
    for (layer, target) in trace.layers.iter().zip(&targets.layers) {
        if target.dim() != layer.z.dim() {
            return Err(Error::ShapeMismatch("target shape".into()));
        }
        let diff = &layer.z - target;
        let count = diff.len() as f64;
        total += diff.mapv(|v| v * v).sum() / count;
        grads.push(diff * (2.0 * scale / count));
    }
    Ok((total * scale, grads))
}

/// Shared evaluation behind every loss and gradient.
pub fn evaluate(
    params: &DenoiserParams,
    spec: &LossSpec,
    draws: &LossDraws,
    schedule: &NoiseSchedule,
    want_grad: bool,
) -> Result<(LossValue, Option<Vec<f64>>)> {
    let b = &draws.batch;
    if b.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let xt = b.noised(schedule)?;
    let cache = params.forward_cached(xt.view(), &b.tokens, &b.t)?;
    let n = b.len() as f64;
    let blocks = params.layout().order.len();

    let mut components = BTreeMap::new();
    let diff = &cache.eps_hat - &b.eps;
    let mse = diff.mapv(|v| v * v).sum() / n;
    let (mut value, dy) = match spec.selector {
        LossSelector::Prior => {
            components.insert("prior".to_string(), mse);
            (mse, &diff * (2.0 / n))
        }
        LossSelector::Max | LossSelector::Immunize => {
            components.insert("max".to_string(), -mse);
            (-mse, &diff * (-2.0 / n))
        }
        LossSelector::Noise => (0.0, Array2::zeros(diff.raw_dim())),
    };

    let mut d_blocks: Vec<Option<Array2<f64>>> = vec![None; blocks];
    if spec.selector.uses_noise() {
        let trace = params.trace_from(&cache, spec.noise.layers);
        let targets = match &draws.noise {
            Some(NoiseDraw::Standard(xi)) => NoiseTargets::from_standard(&trace, xi, spec.noise.stats)?,
            Some(NoiseDraw::Fixed(t)) => t.clone(),
            None => {
                return Err(Error::InvalidArgument(
                    "noising loss evaluated without noise draws".into(),
                ))
            }
        };
        let (noise, grads) = noise_loss_and_grad(&trace, &targets, spec.noise.reduction)?;
        components.insert("noise".to_string(), noise);
        let weight = if spec.selector == LossSelector::Immunize {
            value += spec.beta * noise;
            spec.beta
        } else {
            value = noise;
            1.0
        };
        if want_grad {
            for (layer, g) in trace.layers.iter().zip(grads) {
                d_blocks[layer.block] = Some(g * weight);
            }
        }
    }

    let grad = want_grad.then(|| params.backward(&cache, &dy, &d_blocks));
    Ok((LossValue { value, components }, grad))
}

fn denoise_value<M, R>(model: &M, batch: &ConditionedBatch, schedule: &NoiseSchedule, rng: &mut R) -> Result<f64>
where
    M: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let db = DiffusionBatch::draw(batch, schedule, rng)?;
    let xt = db.noised(schedule)?;
    let eps_hat = model.predict(xt.view(), &db.tokens, &db.t)?;
    Ok(denoising_error(&eps_hat, &db.eps))
}

/// Monte-Carlo denoising objective on safe data.
pub fn loss_prior<M, R>(model: &M, batch: &ConditionedBatch, schedule: &NoiseSchedule, rng: &mut R) -> Result<LossValue>
where
    M: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    Ok(LossValue::single("prior", denoise_value(model, batch, schedule, rng)?))
}

/// Negated denoising objective on malicious data.
pub fn loss_max<M, R>(model: &M, batch: &ConditionedBatch, schedule: &NoiseSchedule, rng: &mut R) -> Result<LossValue>
where
    M: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    Ok(LossValue::single("max", -denoise_value(model, batch, schedule, rng)?))
}

/// Representation noising on a captured trace with pooled statistics, summed over layers.
pub fn loss_noise<R: Rng + ?Sized>(trace: &ActivationTrace, rng: &mut R) -> Result<LossValue> {
    if trace.layers.is_empty() {
        return Err(Error::InvalidArgument("empty activation trace".into()));
    }
    let xi: Vec<Array2<f64>> = trace
        .layers
        .iter()
        .map(|l| Array2::from_shape_fn(l.z.raw_dim(), |_| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let targets = NoiseTargets::from_standard(trace, &xi, NoiseStats::Pooled)?;
    let (v, _) = noise_loss_and_grad(trace, &targets, LayerReduction::Sum)?;
    Ok(LossValue::single("noise", v))
}

/// `L_max + beta * L_noise` from one captured forward pass.
pub fn loss_immunize<R: Rng + ?Sized>(
    params: &DenoiserParams,
    batch: &ConditionedBatch,
    schedule: &NoiseSchedule,
    beta: f64,
    noise: NoiseOptions,
    rng: &mut R,
) -> Result<LossValue> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    let spec = LossSpec::immunize(beta, noise);
    let draws = LossDraws::draw(params, &spec, batch, schedule, rng)?;
    Ok(evaluate(params, &spec, &draws, schedule, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ConceptId;
    use crate::model::{init_denoiser, Arch, LayerActivation};
    use crate::seeding;
    use ndarray::{array, ArrayView2};

    fn arch() -> Arch {
        Arch {
            width: 8,
            trunk_blocks: 2,
            cond_blocks: 2,
            embed_dim: 4,
            attn_dim: 4,
            time_dim: 4,
            concepts: 2,
        }
    }

    fn batch(n: usize) -> ConditionedBatch {
        let mut rng = seeding::rng(8);
        let x0 = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal) + 1.0);
        ConditionedBatch::new(x0, (0..n).map(|i| ConceptId(i as u32 % 2)).collect()).unwrap()
    }

    /// Recovers eps exactly from x_t given the clean points.
    struct Oracle<'a> {
        x0: &'a Array2<f64>,
        schedule: &'a NoiseSchedule,
    }

    impl NoisePredictor for Oracle<'_> {
        fn predict(&self, x_t: ArrayView2<'_, f64>, _: &[ConceptId], t: &[usize]) -> Result<Array2<f64>> {
            let mut out = Array2::zeros(x_t.raw_dim());
            for i in 0..x_t.nrows() {
                let ab = self.schedule.alpha_bar[t[i]];
                for d in 0..2 {
                    out[[i, d]] = (x_t[[i, d]] - ab.sqrt() * self.x0[[i, d]]) / (1.0 - ab).sqrt();
                }
            }
            Ok(out)
        }
    }

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict(&self, x: ArrayView2<'_, f64>, _: &[ConceptId], _: &[usize]) -> Result<Array2<f64>> {
            Ok(Array2::zeros(x.raw_dim()))
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let s = NoiseSchedule::default();
        let b = batch(64);
        let oracle = Oracle {
            x0: &b.x0,
            schedule: &s,
        };
        let p = loss_prior(&oracle, &b, &s, &mut seeding::rng(1)).unwrap();
        assert!(p.value < 1e-20, "{}", p.value);
        let m = loss_max(&oracle, &b, &s, &mut seeding::rng(1)).unwrap();
        assert!(m.value <= 0.0 && m.value > -1e-20);
    }

    #[test]
    fn zero_predictor_loss_is_chi_square_mean() {
        // E||eps||^2 = 2 for 2-D standard normal noise
        let s = NoiseSchedule::default();
        let b = batch(20_000);
        let v = loss_prior(&Zero, &b, &s, &mut seeding::rng(2)).unwrap().value;
        // sd of the mean of chi2(2) over n draws is 2/sqrt(n)
        assert!((v - 2.0).abs() < 4.0 * 2.0 / (20_000f64).sqrt(), "{v}");
    }

    #[test]
    fn losses_are_deterministic_and_signed() {
        let s = NoiseSchedule::default();
        let p = init_denoiser(&arch(), 3).unwrap();
        let b = batch(16);
        let a1 = loss_prior(&p, &b, &s, &mut seeding::rng(5)).unwrap();
        let a2 = loss_prior(&p, &b, &s, &mut seeding::rng(5)).unwrap();
        assert_eq!(a1, a2);
        assert!(a1.value > 0.0);
        let m = loss_max(&p, &b, &s, &mut seeding::rng(5)).unwrap();
        assert_eq!(m.value, -a1.value);
        assert!(m.value < 0.0);
    }

    #[test]
    fn constant_activation_has_zero_noise_loss() {
        let trace = ActivationTrace {
            layers: vec![LayerActivation::new(0, Array2::from_elem((4, 3), 1.7))],
        };
        // the variance floor leaves sigma = 1e-6, so the loss is of order VAR_FLOOR
        let v = loss_noise(&trace, &mut seeding::rng(0)).unwrap().value;
        assert!(v < 20.0 * VAR_FLOOR, "{v}");
    }

    #[test]
    fn noise_loss_with_injected_targets() {
        let trace = ActivationTrace {
            layers: vec![LayerActivation::new(0, array![[0.0, 2.0]])],
        };
        let targets = NoiseTargets {
            layers: vec![array![[1.0, 1.0]]],
        };
        let (v, g) = noise_loss_and_grad(&trace, &targets, LayerReduction::Sum).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(g[0], array![[-1.0, 1.0]]);
    }

    #[test]
    fn noise_loss_expectation_is_twice_the_variance() {
        // E_eps[(z - eps)^2] = (z - mu)^2 + sigma^2, averaged over z: 2 sigma^2
        let mut rng = seeding::rng(4);
        let z = Array2::from_shape_fn((10, 6), |_| rng.random::<f64>() * 3.0);
        let layer = LayerActivation::new(0, z);
        let expect = 2.0 * layer.var;
        let trace = ActivationTrace { layers: vec![layer] };
        let draws = 10_000;
        let mean = (0..draws)
            .map(|_| loss_noise(&trace, &mut rng).unwrap().value)
            .sum::<f64>()
            / draws as f64;
        assert!((mean - expect).abs() / expect < 0.05, "{mean} vs {expect}");
    }

    #[test]
    fn tiny_layers_are_rejected() {
        let trace = ActivationTrace {
            layers: vec![LayerActivation::new(0, array![[1.0]])],
        };
        assert!(matches!(
            loss_noise(&trace, &mut seeding::rng(0)),
            Err(Error::InsufficientData(_))
        ));
        assert!(loss_noise(&ActivationTrace::default(), &mut seeding::rng(0)).is_err());
    }

    #[test]
    fn immunize_is_max_plus_weighted_noise() {
        let s = NoiseSchedule::default();
        let p = init_denoiser(&arch(), 3).unwrap();
        let b = batch(12);
        let opts = NoiseOptions::default();
        let l0 = loss_immunize(&p, &b, &s, 0.0, opts, &mut seeding::rng(9)).unwrap();
        let max_only = loss_max(&p, &b, &s, &mut seeding::rng(9)).unwrap();
        assert_eq!(l0.value, max_only.value);

        let l1 = loss_immunize(&p, &b, &s, 1.0, opts, &mut seeding::rng(9)).unwrap();
        assert_eq!(l1.value, l1.components["max"] + l1.components["noise"]);
        assert!(l1.components["noise"] >= 0.0);

        let l2 = loss_immunize(&p, &b, &s, 2.0, opts, &mut seeding::rng(9)).unwrap();
        assert_eq!(l2.components["max"], l1.components["max"]);
        assert_eq!(l2.components["noise"], l1.components["noise"]);
        let c1 = l1.value - l1.components["max"];
        let c2 = l2.value - l2.components["max"];
        assert!((c2 - 2.0 * c1).abs() <= 1e-12 * c2.abs());
        assert!(loss_immunize(&p, &b, &s, -1.0, opts, &mut seeding::rng(9)).is_err());
    }

    #[test]
    fn empty_batch_is_rejected() {
        let s = NoiseSchedule::default();
        let empty = ConditionedBatch::new(Array2::zeros((0, 2)), vec![]).unwrap();
        assert!(matches!(loss_prior(&Zero, &empty, &s, &mut seeding::rng(0)), Err(Error::EmptyBatch)));
    }

    #[test]
    fn per_channel_targets_follow_column_statistics() {
        let z = array![[0.0, 10.0], [2.0, 10.0]];
        let trace = ActivationTrace {
            layers: vec![LayerActivation::new(0, z)],
        };
        let xi = vec![array![[1.0, 1.0], [-1.0, -1.0]]];
        let t = NoiseTargets::from_standard(&trace, &xi, NoiseStats::PerChannel).unwrap();
        assert_eq!(t.layers[0][[0, 0]], 2.0);
        assert_eq!(t.layers[0][[1, 0]], 0.0);
        assert!((t.layers[0][[0, 1]] - 10.0).abs() < 1e-5);
    }
}
