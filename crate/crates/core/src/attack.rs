//! Simulated fine-tuning of a released model: a malicious full fine-tune, a
//! malicious low-rank adapter, and a benign post-immunization fine-tune.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ConceptDataset, ConceptId, Role, Split};
use crate::diffcore::{p_sample_loop, ConditionedBatch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::{self, ProbeClassifier};
use crate::losses::{LossSelector, LossSpec};
use crate::model::{gradient_with_rng, DenoiserParams, Projection, TokenInit};
use crate::seeding::{self, stream};
use crate::train::sgd_update;

pub const TRACE_HEADER: &str = "step,denoise_loss_DA,probe_acc,mmd,safe_loss";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    FullFinetune,
    LowrankAdapter,
    BenignPi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub steps: usize,
    pub lr: f64,
    pub rank: usize,
    /// Multiplier on the adapter product.
    pub adapter_scale: f64,
    /// Learn the concept under a newly appended token instead of its existing one.
    pub fresh_token: bool,
    pub target_concept: ConceptId,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: AttackMethod::FullFinetune,
            steps: 2000,
            lr: 1e-3,
            rank: 4,
            adapter_scale: 1.0,
            fresh_token: false,
            target_concept: ConceptId(0),
            batch_size: 32,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.method == AttackMethod::LowrankAdapter && self.rank == 0 {
            return Err(Error::InvalidArgument("rank must be >= 1 for the low-rank adapter".into()));
        }
        if !self.adapter_scale.is_finite() {
            return Err(Error::InvalidArgument("adapter_scale must be finite".into()));
        }
        Ok(())
    }

    fn expect(&self, method: AttackMethod) -> Result<()> {
        self.validate()?;
        if self.method != method {
            return Err(Error::InvalidArgument(format!(
                "config method is {:?}, expected {method:?}",
                self.method
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- monitor

/// Metric snapshot taken during a fine-tune.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub denoise_loss_da: f64,
    pub probe_acc: Option<f64>,
    pub mmd: Option<f64>,
    pub safe_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub rows: Vec<TraceRow>,
}

impl AttackTrace {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| eval::NA.to_string(), |x| x.to_string());
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.step,
                r.denoise_loss_da,
                cell(r.probe_acc),
                cell(r.mmd),
                cell(r.safe_loss)
            );
        }
        out
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

/// What to measure every `every` steps. Snapshots are taken at step 0, every
/// multiple of `every`, and at the final step.
#[derive(Debug, Clone)]
pub struct Monitor<'a> {
    pub every: usize,
    pub probe: Option<&'a ProbeClassifier>,
    /// Held-out points of the target concept, compared with generated ones.
    pub reference: Option<ArrayView2<'a, f64>>,
    /// Held-out safe data for the safe-loss column.
    pub safe: Option<&'a ConditionedBatch>,
    /// Points generated per snapshot.
    pub samples: usize,
    pub seed: u64,
}

impl<'a> Monitor<'a> {
    /// Only the fine-tuning loss, every `every` steps.
    pub fn loss_only(every: usize) -> Self {
        Self {
            every,
            probe: None,
            reference: None,
            safe: None,
            samples: 0,
            seed: 0,
        }
    }

    fn due(&self, step: usize, last: usize) -> bool {
        step == last || (self.every > 0 && step % self.every == 0)
    }

    fn snapshot(
        &self,
        step: usize,
        model: &DenoiserParams,
        target_data: &ConditionedBatch,
        target: ConceptId,
        token: ConceptId,
        schedule: &NoiseSchedule,
    ) -> Result<TraceRow> {
        let denoise_loss_da = eval::denoise_loss_on(model, target_data, schedule, self.seed)?;
        let wants_samples = self.samples > 0 && (self.probe.is_some() || self.reference.is_some());
        let generated = if wants_samples {
            let seed = seeding::derive_seed(self.seed, &[stream::SAMPLER]);
            Some(p_sample_loop(model, token, self.samples, schedule, seed)?)
        } else {
            None
        };
        let probe_acc = match (self.probe, &generated) {
            (Some(p), Some(g)) => Some(eval::probe_accuracy(p, g.view(), target)?),
            _ => None,
        };
        let mmd = match (self.reference, &generated) {
            (Some(r), Some(g)) => {
                let bw = eval::median_bandwidth(g.view(), r)?;
                Some(eval::mmd(g.view(), r, bw)?)
            }
            _ => None,
        };
        let safe_loss = self
            .safe
            .map(|b| eval::denoise_loss_on(model, b, schedule, self.seed))
            .transpose()?;
        Ok(TraceRow {
            step,
            denoise_loss_da,
            probe_acc,
            mmd,
            safe_loss,
        })
    }
}

// ---------------------------------------------------------------- full fine-tune

fn target_batch(
    dataset: &ConceptDataset,
    split: Split,
    concept: ConceptId,
    token: ConceptId,
) -> Result<ConditionedBatch> {
    let rows = dataset.split_view(split, Some(concept))?;
    if rows.is_empty() {
        return Err(Error::InsufficientData(format!("no {split} samples for concept {concept}")));
    }
    Ok(ConditionedBatch::with_token(&rows, token))
}

/// Returns the parameters and token under which `concept` is learned,
/// appending a fresh token when requested or when none exists.
fn token_for_target(params: &DenoiserParams, concept: ConceptId, fresh: bool, seed: u64) -> Result<(DenoiserParams, ConceptId)> {
    let existing = params.token_for(concept);
    if !fresh && params.has_token(existing) {
        return Ok((params.clone(), existing));
    }
    let token_seed = seeding::derive_seed(seed, &[stream::TOKEN, concept.0 as u64]);
    let (mut p, token) = params.add_concept_token(TokenInit::Random { seed: token_seed })?;
    p.token_aliases.insert(concept, token);
    Ok((p, token))
}

fn sgd_finetune(
    params: DenoiserParams,
    data: &ConditionedBatch,
    target: ConceptId,
    token: ConceptId,
    schedule: &NoiseSchedule,
    cfg: &AttackConfig,
    monitor: &Monitor,
    stream_label: u64,
) -> Result<(DenoiserParams, AttackTrace)> {
    let spec = LossSpec::new(LossSelector::Prior);
    let mut rng = seeding::rng_from(cfg.seed, &[stream_label]);
    let mut p = params;
    let mut trace = AttackTrace::default();
    for step in 0..=cfg.steps {
        if monitor.due(step, cfg.steps) {
            trace.rows.push(monitor.snapshot(step, &p, data, target, token, schedule)?);
        }
        if step == cfg.steps {
            break;
        }
        let batch = data.resample(cfg.batch_size, &mut rng)?;
        let g = gradient_with_rng(&p, &spec, &batch, schedule, &mut rng)?;
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("fine-tune gradient at step {step}")));
        }
        sgd_update(&mut p.theta, &g.full, cfg.lr);
    }
    Ok((p, trace))
}

/// Full-parameter SGD on the denoising loss over the target's `D_A` samples.
pub fn attack_full(
    params: &DenoiserParams,
    dataset: &ConceptDataset,
    schedule: &NoiseSchedule,
    cfg: &AttackConfig,
    monitor: &Monitor,
) -> Result<(DenoiserParams, AttackTrace)> {
    cfg.expect(AttackMethod::FullFinetune)?;
    dataset.concept(cfg.target_concept)?;
    let (p, token) = token_for_target(params, cfg.target_concept, cfg.fresh_token, cfg.seed)?;
    let data = target_batch(dataset, Split::Attack, cfg.target_concept, token)?;
    sgd_finetune(p, &data, cfg.target_concept, token, schedule, cfg, monitor, stream::ATTACK)
}

/// Denoising fine-tune on a safe concept's `D_S` samples.
pub fn finetune_benign(
    params: &DenoiserParams,
    dataset: &ConceptDataset,
    schedule: &NoiseSchedule,
    cfg: &AttackConfig,
    monitor: &Monitor,
) -> Result<(DenoiserParams, AttackTrace)> {
    cfg.expect(AttackMethod::BenignPi)?;
    let concept = dataset.concept(cfg.target_concept)?;
    if concept.role != Role::Safe {
        return Err(Error::InvalidArgument(format!(
            "benign fine-tuning needs a safe concept; {} is malicious",
            concept.id
        )));
    }
    let (p, token) = token_for_target(params, cfg.target_concept, cfg.fresh_token, cfg.seed)?;
    let data = target_batch(dataset, Split::Safe, cfg.target_concept, token)?;
    sgd_finetune(p, &data, cfg.target_concept, token, schedule, cfg, monitor, stream::BENIGN)
}

// ---------------------------------------------------------------- low-rank adapter

/// Low-rank update `scale * A B` of one conditioning projection matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterFactor {
    pub block: usize,
    pub projection: Projection,
    pub out: usize,
    pub inp: usize,
    /// `out x rank`, row-major.
    pub a: Vec<f64>,
    /// `rank x inp`, row-major.
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub rank: usize,
    pub scale: f64,
    pub factors: Vec<AdapterFactor>,
}

pub const ADAPTER_TARGETS: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

impl AdapterParams {
    /// Zero `A` and Gaussian `B` (`N(0, 1/inp)`) on every conditioning projection.
    pub fn init(params: &DenoiserParams, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("rank must be >= 1".into()));
        }
        let layout = params.layout();
        let mut rng = seeding::rng(seed);
        let mut factors = Vec::new();
        for (block, c) in layout.cond.iter().enumerate() {
            for projection in ADAPTER_TARGETS {
                let d = c.projection(projection);
                if rank > d.out.min(d.inp) {
                    return Err(Error::InvalidArgument(format!(
                        "rank {rank} exceeds {}x{} projection {projection:?} of block {block}",
                        d.out, d.inp
                    )));
                }
                let sd = (1.0 / d.inp as f64).sqrt();
                factors.push(AdapterFactor {
                    block,
                    projection,
                    out: d.out,
                    inp: d.inp,
                    a: vec![0.0; d.out * rank],
                    b: (0..rank * d.inp).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect(),
                });
            }
        }
        Ok(Self { rank, scale, factors })
    }

    pub fn parameter_count(&self) -> usize {
        self.factors.iter().map(|f| self.rank * (f.out + f.inp)).sum()
    }

    fn a(&self, f: &AdapterFactor) -> Array2<f64> {
        Array2::from_shape_vec((f.out, self.rank), f.a.clone()).expect("adapter shape")
    }

    fn b(&self, f: &AdapterFactor) -> Array2<f64> {
        Array2::from_shape_vec((self.rank, f.inp), f.b.clone()).expect("adapter shape")
    }

    /// Base parameters with every adapted matrix replaced by `W + scale * A B`.
    /// Factors whose `A` is entirely zero leave their matrix untouched.
    pub fn merge(&self, base: &DenoiserParams) -> Result<DenoiserParams> {
        let layout = base.layout();
        let mut out = base.clone();
        for f in &self.factors {
            let c = layout
                .cond
                .get(f.block)
                .ok_or_else(|| Error::ShapeMismatch(format!("adapter block {} missing", f.block)))?;
            let d = c.projection(f.projection);
            if (d.out, d.inp) != (f.out, f.inp) {
                return Err(Error::ShapeMismatch("adapter and base disagree".into()));
            }
            if f.a.iter().all(|v| *v == 0.0) {
                continue;
            }
            let delta = self.a(f).dot(&self.b(f)) * self.scale;
            for (w, dv) in out.theta[d.w..d.b].iter_mut().zip(delta.iter()) {
                *w += dv;
            }
        }
        Ok(out)
    }

    /// Chain rule from a full-parameter gradient of the merged model to the factors:
    /// `dA = s G B^T`, `dB = s A^T G`.
    fn factor_gradients(&self, base: &DenoiserParams, full: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let layout = base.layout();
        self.factors
            .iter()
            .map(|f| {
                let d = layout.cond[f.block].projection(f.projection);
                let g = ArrayView2::from_shape((d.out, d.inp), &full[d.w..d.b]).expect("layout");
                let da = g.dot(&self.b(f).t()) * self.scale;
                let db = self.a(f).t().dot(&g) * self.scale;
                (da.into_raw_vec_and_offset().0, db.into_raw_vec_and_offset().0)
            })
            .collect()
    }
}

/// Result of a low-rank attack: the frozen base (possibly with an appended
/// token) and the trained adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterAttack {
    pub base: DenoiserParams,
    pub adapter: AdapterParams,
    pub token: ConceptId,
}

impl AdapterAttack {
    pub fn merged(&self) -> Result<DenoiserParams> {
        self.adapter.merge(&self.base)
    }
}

/// Trains only the adapter factors on the target's `D_A` samples; base weights stay frozen.
pub fn attack_lowrank(
    params: &DenoiserParams,
    dataset: &ConceptDataset,
    schedule: &NoiseSchedule,
    cfg: &AttackConfig,
    monitor: &Monitor,
) -> Result<(AdapterAttack, AttackTrace)> {
    cfg.expect(AttackMethod::LowrankAdapter)?;
    dataset.concept(cfg.target_concept)?;
    let (base, token) = token_for_target(params, cfg.target_concept, cfg.fresh_token, cfg.seed)?;
    let data = target_batch(dataset, Split::Attack, cfg.target_concept, token)?;
    let init_seed = seeding::derive_seed(cfg.seed, &[stream::ATTACK, 1]);
    let mut adapter = AdapterParams::init(&base, cfg.rank, cfg.adapter_scale, init_seed)?;
    let spec = LossSpec::new(LossSelector::Prior);
    let mut rng = seeding::rng_from(cfg.seed, &[stream::ATTACK]);
    let mut trace = AttackTrace::default();
    for step in 0..=cfg.steps {
        let merged = adapter.merge(&base)?;
        if monitor.due(step, cfg.steps) {
            trace
                .rows
                .push(monitor.snapshot(step, &merged, &data, cfg.target_concept, token, schedule)?);
        }
        if step == cfg.steps {
            break;
        }
        let batch = data.resample(cfg.batch_size, &mut rng)?;
        let g = gradient_with_rng(&merged, &spec, &batch, schedule, &mut rng)?;
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("adapter gradient at step {step}")));
        }
        let grads = adapter.factor_gradients(&base, &g.full);
        for (f, (da, db)) in adapter.factors.iter_mut().zip(grads) {
            sgd_update(&mut f.a, &da, cfg.lr);
            sgd_update(&mut f.b, &db, cfg.lr);
        }
    }
    Ok((AdapterAttack { base, adapter, token }, trace))
}
