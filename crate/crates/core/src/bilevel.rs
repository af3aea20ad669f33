//! Bi-level immunization: alternating full-parameter descent on the safe
//! denoising loss (inner level) with conditioning-only descent on the
//! immunization loss (outer level), plus a joint-step ablation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{ConceptDataset, Role, Split};
use crate::diffcore::{ConditionedBatch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::losses::{LossDraws, LossSelector, LossSpec, LossValue, NoiseOptions};
use crate::model::{gradient, DenoiserParams};
use crate::seeding::{self, stream};
use crate::train::sgd_update;

pub const HISTORY_HEADER: &str = "iteration,level,max,noise,prior,total";

/// Steps per cycle at each level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interleave {
    pub inner: usize,
    pub outer: usize,
}

impl Default for Interleave {
    fn default() -> Self {
        Self { inner: 1, outer: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImmunizeConfig {
    pub alpha_inner: f64,
    pub alpha_outer: f64,
    pub beta: f64,
    pub interleave: Interleave,
    pub total_iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub noise: NoiseOptions,
}

impl Default for ImmunizeConfig {
    fn default() -> Self {
        Self {
            alpha_inner: 1e-3,
            alpha_outer: 1e-3,
            beta: 1.0,
            interleave: Interleave::default(),
            total_iterations: 1000,
            batch_size: 64,
            seed: 0,
            checkpoint_every: 100,
            noise: NoiseOptions::default(),
        }
    }
}

impl ImmunizeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_inner", self.alpha_inner),
            ("alpha_outer", self.alpha_outer),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.interleave.inner + self.interleave.outer == 0 {
            return Err(Error::InvalidArgument("interleave needs at least one step per cycle".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidArgument("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Inner,
    Outer,
    Naive,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Inner => "inner",
            Level::Outer => "outer",
            Level::Naive => "naive",
        }
    }
}

/// Loss components of one parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub level: Level,
    pub max: Option<f64>,
    pub noise: Option<f64>,
    pub prior: Option<f64>,
    pub total: f64,
}

/// All updates of one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImmunizationRun {
    pub config: ImmunizeConfig,
    pub naive: bool,
    /// One record per completed iteration.
    pub history: Vec<IterationRecord>,
    /// `(completed iterations, parameters)` every `checkpoint_every` iterations.
    pub checkpoints: Vec<(usize, DenoiserParams)>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl ImmunizationRun {
    /// History as CSV, one row per update.
    pub fn history_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for rec in self.history.iter().flat_map(|r| &r.steps) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                rec.iteration,
                rec.level.name(),
                cell(rec.max),
                cell(rec.noise),
                cell(rec.prior),
                rec.total
            );
        }
        out
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.history.iter().flat_map(|r| &r.steps)
    }
}

/// Immunization stopped early; carries everything completed so far.
#[derive(Debug, thiserror::Error)]
#[error("immunization aborted after {} iterations: {source}", run.history.len())]
pub struct Aborted {
    pub run: Box<ImmunizationRun>,
    pub last_params: Box<DenoiserParams>,
    #[source]
    pub source: Error,
}

/// Safe (`D_S`) and malicious (`D_M`) training data for the concepts the model knows.
#[derive(Debug, Clone, PartialEq)]
pub struct ImmunizationData {
    pub safe: ConditionedBatch,
    pub malicious: ConditionedBatch,
}

impl ImmunizationData {
    pub fn from_dataset(dataset: &ConceptDataset, params: &DenoiserParams) -> Result<Self> {
        let mut safe = Vec::new();
        let mut malicious = Vec::new();
        for c in &dataset.concepts {
            let token = params.token_for(c.id);
            if !params.has_token(token) {
                continue;
            }
            let (split, sink) = match c.role {
                Role::Safe => (Split::Safe, &mut safe),
                Role::Malicious => (Split::Defense, &mut malicious),
            };
            let rows = dataset.split_view(split, Some(c.id))?;
            sink.push(ConditionedBatch::with_token(&rows, token));
        }
        let join = |parts: Vec<ConditionedBatch>, what: &str| -> Result<ConditionedBatch> {
            let mut x0 = ndarray::Array2::zeros((0, 2));
            let mut tokens = Vec::new();
            for p in parts {
                x0.append(ndarray::Axis(0), p.x0.view()).expect("two columns");
                tokens.extend(p.tokens);
            }
            if tokens.is_empty() {
                return Err(Error::InsufficientData(format!("no {what} samples for known concepts")));
            }
            ConditionedBatch::new(x0, tokens)
        };
        Ok(Self {
            safe: join(safe, "D_S")?,
            malicious: join(malicious, "D_M")?,
        })
    }
}

fn checked(params: &DenoiserParams, spec: &LossSpec, draws: &LossDraws, schedule: &NoiseSchedule) -> Result<(LossValue, Vec<f64>)> {
    let g = gradient(params, spec, draws, schedule)?;
    if !g.is_finite() {
        return Err(Error::NonFinite(format!("{} gradient", spec.selector.name())));
    }
    Ok((g.loss, g.full))
}

/// One full-parameter descent step on the prior loss.
pub fn inner_step<R: rand::Rng + ?Sized>(
    params: &DenoiserParams,
    safe_batch: &ConditionedBatch,
    schedule: &NoiseSchedule,
    alpha_inner: f64,
    rng: &mut R,
) -> Result<(DenoiserParams, LossValue)> {
    let spec = LossSpec::new(LossSelector::Prior);
    let draws = LossDraws::draw(params, &spec, safe_batch, schedule, rng)?;
    let (loss, grad) = checked(params, &spec, &draws, schedule)?;
    let mut out = params.clone();
    sgd_update(&mut out.theta, &grad, alpha_inner);
    Ok((out, loss))
}

fn psi_update(params: &mut DenoiserParams, grad: &[f64], alpha: f64) {
    for i in params.psi.iter() {
        params.theta[i] -= alpha * grad[i];
    }
}

/// One descent step on the immunization loss, restricted to the conditioning parameters.
pub fn outer_step<R: rand::Rng + ?Sized>(
    params: &DenoiserParams,
    malicious_batch: &ConditionedBatch,
    schedule: &NoiseSchedule,
    alpha_outer: f64,
    beta: f64,
    noise: NoiseOptions,
    rng: &mut R,
) -> Result<(DenoiserParams, LossValue)> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    let spec = LossSpec::immunize(beta, noise);
    let draws = LossDraws::draw(params, &spec, malicious_batch, schedule, rng)?;
    let (loss, grad) = checked(params, &spec, &draws, schedule)?;
    let mut out = params.clone();
    psi_update(&mut out, &grad, alpha_outer);
    Ok((out, loss))
}

fn inner_record(iteration: usize, loss: &LossValue) -> StepRecord {
    StepRecord {
        iteration,
        level: Level::Inner,
        max: None,
        noise: None,
        prior: loss.component("prior"),
        total: loss.value,
    }
}

fn outer_record(iteration: usize, loss: &LossValue) -> StepRecord {
    StepRecord {
        iteration,
        level: Level::Outer,
        max: loss.component("max"),
        noise: loss.component("noise"),
        prior: None,
        total: loss.value,
    }
}

struct Runner<'a> {
    data: &'a ImmunizationData,
    schedule: &'a NoiseSchedule,
    cfg: ImmunizeConfig,
    inner_rng: seeding::Rng,
    outer_rng: seeding::Rng,
}

impl Runner<'_> {
    fn inner(&mut self, params: &DenoiserParams, iteration: usize) -> Result<(DenoiserParams, StepRecord)> {
        let batch = self.data.safe.resample(self.cfg.batch_size, &mut self.inner_rng)?;
        let (p, loss) = inner_step(params, &batch, self.schedule, self.cfg.alpha_inner, &mut self.inner_rng)?;
        Ok((p, inner_record(iteration, &loss)))
    }

    fn outer(&mut self, params: &DenoiserParams, iteration: usize) -> Result<(DenoiserParams, StepRecord)> {
        let batch = self.data.malicious.resample(self.cfg.batch_size, &mut self.outer_rng)?;
        let (p, loss) = outer_step(
            params,
            &batch,
            self.schedule,
            self.cfg.alpha_outer,
            self.cfg.beta,
            self.cfg.noise,
            &mut self.outer_rng,
        )?;
        Ok((p, outer_record(iteration, &loss)))
    }

    /// Both gradients at the same point, applied together.
    fn joint(&mut self, params: &DenoiserParams, iteration: usize) -> Result<(DenoiserParams, StepRecord)> {
        let safe = self.data.safe.resample(self.cfg.batch_size, &mut self.inner_rng)?;
        let prior_spec = LossSpec::new(LossSelector::Prior);
        let draws = LossDraws::draw(params, &prior_spec, &safe, self.schedule, &mut self.inner_rng)?;
        let (prior, g_prior) = checked(params, &prior_spec, &draws, self.schedule)?;

        let mal = self.data.malicious.resample(self.cfg.batch_size, &mut self.outer_rng)?;
        let imm_spec = LossSpec::immunize(self.cfg.beta, self.cfg.noise);
        let draws = LossDraws::draw(params, &imm_spec, &mal, self.schedule, &mut self.outer_rng)?;
        let (imm, g_imm) = checked(params, &imm_spec, &draws, self.schedule)?;

        let mut out = params.clone();
        sgd_update(&mut out.theta, &g_prior, self.cfg.alpha_inner);
        psi_update(&mut out, &g_imm, self.cfg.alpha_outer);
        let rec = StepRecord {
            iteration,
            level: Level::Naive,
            max: imm.component("max"),
            noise: imm.component("noise"),
            prior: Some(prior.value),
            total: prior.value + imm.value,
        };
        Ok((out, rec))
    }
}

fn run(
    params: &DenoiserParams,
    data: &ImmunizationData,
    schedule: &NoiseSchedule,
    cfg: &ImmunizeConfig,
    naive: bool,
) -> std::result::Result<(DenoiserParams, ImmunizationRun), Aborted> {
    let mut history = ImmunizationRun {
        config: *cfg,
        naive,
        history: Vec::with_capacity(cfg.total_iterations),
        checkpoints: Vec::new(),
    };
    let mut current = params.clone();
    let abort = |run: ImmunizationRun, last: &DenoiserParams, source: Error| Aborted {
        run: Box::new(run),
        last_params: Box::new(last.clone()),
        source,
    };
    if let Err(e) = cfg.validate() {
        return Err(abort(history, &current, e));
    }
    let mut runner = Runner {
        data,
        schedule,
        cfg: *cfg,
        inner_rng: seeding::rng_from(cfg.seed, &[stream::INNER]),
        outer_rng: seeding::rng_from(cfg.seed, &[stream::OUTER]),
    };
    for iteration in 0..cfg.total_iterations {
        let mut steps = Vec::new();
        let mut step = |current: &mut DenoiserParams, level: Level| -> Result<()> {
            let (next, rec) = match level {
                Level::Inner => runner.inner(current, iteration)?,
                Level::Outer => runner.outer(current, iteration)?,
                Level::Naive => runner.joint(current, iteration)?,
            };
            *current = next;
            steps.push(rec);
            Ok(())
        };
        let plan: Vec<Level> = if naive {
            vec![Level::Naive]
        } else {
            std::iter::repeat_n(Level::Inner, cfg.interleave.inner)
                .chain(std::iter::repeat_n(Level::Outer, cfg.interleave.outer))
                .collect()
        };
        for level in plan {
            if let Err(e) = step(&mut current, level) {
                return Err(abort(history, &current, e));
            }
        }
        history.history.push(IterationRecord { iteration, steps });
        if (iteration + 1) % cfg.checkpoint_every == 0 {
            history.checkpoints.push((iteration + 1, current.clone()));
        }
    }
    Ok((current, history))
}

/// Alternates inner and outer steps per `cfg.interleave` for `cfg.total_iterations` cycles.
pub fn immunize(
    params: &DenoiserParams,
    dataset: &ConceptDataset,
    schedule: &NoiseSchedule,
    cfg: &ImmunizeConfig,
) -> std::result::Result<(DenoiserParams, ImmunizationRun), Aborted> {
    immunize_on(params, &data_or_abort(params, dataset, cfg, false)?, schedule, cfg)
}

/// As [`immunize`] on prepared data.
pub fn immunize_on(
    params: &DenoiserParams,
    data: &ImmunizationData,
    schedule: &NoiseSchedule,
    cfg: &ImmunizeConfig,
) -> std::result::Result<(DenoiserParams, ImmunizationRun), Aborted> {
    run(params, data, schedule, cfg, false)
}

/// One joint step per iteration on prior plus immunization loss from the same point.
pub fn immunize_naive(
    params: &DenoiserParams,
    dataset: &ConceptDataset,
    schedule: &NoiseSchedule,
    cfg: &ImmunizeConfig,
) -> std::result::Result<(DenoiserParams, ImmunizationRun), Aborted> {
    immunize_naive_on(params, &data_or_abort(params, dataset, cfg, true)?, schedule, cfg)
}

pub fn immunize_naive_on(
    params: &DenoiserParams,
    data: &ImmunizationData,
    schedule: &NoiseSchedule,
    cfg: &ImmunizeConfig,
) -> std::result::Result<(DenoiserParams, ImmunizationRun), Aborted> {
    run(params, data, schedule, cfg, true)
}

fn data_or_abort(
    params: &DenoiserParams,
    dataset: &ConceptDataset,
    cfg: &ImmunizeConfig,
    naive: bool,
) -> std::result::Result<ImmunizationData, Aborted> {
    ImmunizationData::from_dataset(dataset, params).map_err(|source| Aborted {
        run: Box::new(ImmunizationRun {
            config: *cfg,
            naive,
            history: Vec::new(),
            checkpoints: Vec::new(),
        }),
        last_params: Box::new(params.clone()),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_concept_set, Concept, ConceptId, Family, SplitCounts, Transform};
    use crate::model::{init_denoiser, Arch};

    fn arch() -> Arch {
        Arch {
            width: 16,
            trunk_blocks: 2,
            cond_blocks: 2,
            embed_dim: 4,
            attn_dim: 8,
            time_dim: 8,
            concepts: 2,
        }
    }

    fn dataset() -> ConceptDataset {
        let c = |id, family, offset, role| Concept {
            id: ConceptId(id),
            name: format!("c{id}"),
            family,
            transform: Transform {
                rotation: 0.0,
                scale: 0.3,
                offset,
            },
            role,
        };
        make_concept_set(
            &[
                c(0, Family::GaussianBlobs, [2.0, 0.0], Role::Malicious),
                c(1, Family::Ring, [-2.0, 0.0], Role::Safe),
            ],
            SplitCounts::halved(40, 100),
            1,
        )
        .unwrap()
    }

    fn cfg(iters: usize) -> ImmunizeConfig {
        ImmunizeConfig {
            total_iterations: iters,
            batch_size: 16,
            checkpoint_every: 5,
            ..ImmunizeConfig::default()
        }
    }

    fn batches() -> (DenoiserParams, ImmunizationData) {
        let p = init_denoiser(&arch(), 3).unwrap();
        let d = ImmunizationData::from_dataset(&dataset(), &p).unwrap();
        (p, d)
    }

    #[test]
    fn data_selects_splits_by_role() {
        let (_, d) = batches();
        assert_eq!(d.safe.len(), 100);
        assert_eq!(d.malicious.len(), 20);
        assert!(d.safe.tokens.iter().all(|t| *t == ConceptId(1)));
        assert!(d.malicious.tokens.iter().all(|t| *t == ConceptId(0)));
    }

    #[test]
    fn zero_step_sizes_are_identity() {
        let (p, d) = batches();
        let s = NoiseSchedule::default();
        let mut rng = seeding::rng(1);
        assert_eq!(inner_step(&p, &d.safe, &s, 0.0, &mut rng).unwrap().0, p);
        let opts = NoiseOptions::default();
        assert_eq!(outer_step(&p, &d.malicious, &s, 0.0, 1.0, opts, &mut rng).unwrap().0, p);
    }

    #[test]
    fn inner_update_is_minus_alpha_times_gradient() {
        let (p, d) = batches();
        let s = NoiseSchedule::default();
        let (q, _) = inner_step(&p, &d.safe, &s, 1e-3, &mut seeding::rng(2)).unwrap();
        let spec = LossSpec::new(LossSelector::Prior);
        let draws = LossDraws::draw(&p, &spec, &d.safe, &s, &mut seeding::rng(2)).unwrap();
        let g = gradient(&p, &spec, &draws, &s).unwrap();
        for ((a, b), gi) in q.theta.iter().zip(&p.theta).zip(&g.full) {
            assert_eq!(*a, b - 1e-3 * gi);
        }
    }

    #[test]
    fn outer_step_leaves_non_psi_bits_and_zero_beta_follows_max() {
        let (p, d) = batches();
        let s = NoiseSchedule::default();
        let opts = NoiseOptions::default();
        let (q, _) = outer_step(&p, &d.malicious, &s, 1e-2, 0.0, opts, &mut seeding::rng(3)).unwrap();
        let spec = LossSpec::new(LossSelector::Max);
        let draws = LossDraws::draw(&p, &spec, &d.malicious, &s, &mut seeding::rng(3)).unwrap();
        let g = gradient(&p, &spec, &draws, &s).unwrap();
        let mut moved = 0;
        for i in 0..p.len() {
            if p.psi.contains(i) {
                assert_eq!(q.theta[i], p.theta[i] - 1e-2 * g.full[i]);
                moved += usize::from(q.theta[i] != p.theta[i]);
            } else {
                assert_eq!(q.theta[i].to_bits(), p.theta[i].to_bits());
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn run_shapes_checkpoints_and_csv() {
        let (p, d) = batches();
        let s = NoiseSchedule::default();
        let (_, run) = immunize_on(&p, &d, &s, &cfg(12)).unwrap();
        assert_eq!(run.history.len(), 12);
        assert_eq!(run.steps().count(), 24);
        assert_eq!(run.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![5, 10]);
        let csv = run.history_csv();
        assert!(csv.starts_with(HISTORY_HEADER));
        assert_eq!(csv.lines().count(), 25);
        for r in run.steps() {
            assert!(r.prior.is_none_or(|v| v >= 0.0));
            assert!(r.noise.is_none_or(|v| v >= 0.0));
            assert!(r.max.is_none_or(|v| v <= 0.0));
        }
        let (_, naive) = immunize_naive_on(&p, &d, &s, &cfg(12)).unwrap();
        assert_eq!(naive.history.len(), run.history.len());
        assert!(naive.history_csv().lines().skip(1).all(|l| l.split(',').nth(1) == Some("naive")));
    }

    #[test]
    fn inner_only_schedule_equals_plain_inner_steps() {
        let (p, d) = batches();
        let s = NoiseSchedule::default();
        let mut c = cfg(4);
        c.interleave = Interleave { inner: 3, outer: 0 };
        let (a, _) = immunize_on(&p, &d, &s, &c).unwrap();
        let mut rng = seeding::rng_from(c.seed, &[stream::INNER]);
        let mut b = p.clone();
        for _ in 0..12 {
            let batch = d.safe.resample(c.batch_size, &mut rng).unwrap();
            b = inner_step(&b, &batch, &s, c.alpha_inner, &mut rng).unwrap().0;
        }
        assert_eq!(a, b);
    }

    #[test]
    fn runs_are_deterministic() {
        let (p, d) = batches();
        let s = NoiseSchedule::default();
        let a = immunize_on(&p, &d, &s, &cfg(6)).unwrap();
        let b = immunize_on(&p, &d, &s, &cfg(6)).unwrap();
        assert_eq!(a, b);
        assert_eq!(immunize(&p, &dataset(), &s, &cfg(6)).unwrap(), a);
    }

    #[test]
    fn divergence_aborts_with_partial_history() {
        let (p, d) = batches();
        let s = NoiseSchedule::default();
        let mut c = cfg(50);
        c.alpha_outer = 1e200;
        let err = immunize_on(&p, &d, &s, &c).unwrap_err();
        assert!(err.source.is_numerical(), "{}", err.source);
        assert!(err.run.history.len() < 50);
        assert!(c.validate().is_ok());
        c.interleave = Interleave { inner: 0, outer: 0 };
        assert!(immunize_on(&p, &d, &s, &c).is_err());
    }

    #[test]
    fn missing_defense_data_is_reported() {
        let p = init_denoiser(&arch(), 3).unwrap();
        let mut ds = dataset();
        ds.samples.retain(|s| s.split != Split::Defense);
        assert!(immunize(&p, &ds, &NoiseSchedule::default(), &cfg(1)).is_err());
    }
}
