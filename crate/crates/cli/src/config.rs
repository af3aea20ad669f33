//! The TOML run configuration shared by every subcommand.
//!
//! Only `schema_version` and `seed` are required; every section falls back to
//! the reference defaults. Unknown keys are rejected everywhere. Component
//! seeds are not configurable one by one: each is derived from `seed`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dimlab_core::attack::{AttackConfig, AttackMethod};
use dimlab_core::bilevel::{ImmunizeConfig, Interleave};
use dimlab_core::data::{Concept, ConceptId, SplitCounts};
use dimlab_core::diffcore::{build_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use dimlab_core::eval::{EvalConfig, ProbeConfig};
use dimlab_core::losses::NoiseOptions;
use dimlab_core::model::Arch;
use dimlab_core::scenario::{reference_concepts, PretrainConfig};
use dimlab_core::seeding;

use crate::error::CliError;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub immunize: ImmunizeSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `D_M` samples of each malicious concept.
    pub defense: usize,
    /// `D_A` samples of each malicious concept.
    pub attack: usize,
    /// `D_S` samples of each safe concept.
    pub safe: usize,
    pub concepts: Vec<Concept>,
}

impl Default for DataSection {
    fn default() -> Self {
        let c = SplitCounts::default();
        Self {
            defense: c.defense,
            attack: c.attack,
            safe: c.safe,
            concepts: reference_concepts(),
        }
    }
}

impl DataSection {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            defense: self.defense,
            attack: self.attack,
            safe: self.safe,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: Arch,
    pub schedule: ScheduleSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImmunizeSection {
    pub alpha_inner: f64,
    pub alpha_outer: f64,
    pub beta: f64,
    pub interleave: Interleave,
    pub total_iterations: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub noise: NoiseOptions,
    /// Run the single-level joint-loss ablation instead.
    pub naive: bool,
}

impl Default for ImmunizeSection {
    fn default() -> Self {
        let g = ImmunizeConfig::default();
        Self {
            alpha_inner: g.alpha_inner,
            alpha_outer: g.alpha_outer,
            beta: g.beta,
            interleave: g.interleave,
            total_iterations: g.total_iterations,
            batch_size: g.batch_size,
            checkpoint_every: g.checkpoint_every,
            noise: g.noise,
            naive: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub method: AttackMethod,
    pub steps: usize,
    pub lr: f64,
    pub rank: usize,
    pub adapter_scale: f64,
    pub fresh_token: bool,
    pub target_concept: ConceptId,
    pub batch_size: usize,
    /// Trace cadence in steps.
    pub monitor_every: usize,
    /// Points generated per trace snapshot; 0 records losses only.
    pub monitor_samples: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            method: a.method,
            steps: a.steps,
            lr: a.lr,
            rank: a.rank,
            adapter_scale: a.adapter_scale,
            fresh_token: a.fresh_token,
            target_concept: a.target_concept,
            batch_size: a.batch_size,
            monitor_every: 250,
            monitor_samples: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub samples: usize,
    pub mi_bins: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            samples: e.samples,
            mi_bins: e.mi_bins,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Model built when no checkpoint is given.
    pub arch: Arch,
    /// Finite-difference step of the gradient check.
    pub h: f64,
    pub tol: f64,
    /// Rows per loss batch.
    pub batch_size: usize,
    /// Models with more parameters are checked on this many sampled coordinates.
    pub max_coordinates: usize,
    pub alpha_i: f64,
    pub alpha_grid: Vec<f64>,
    pub beta: f64,
    /// Dimension of the quadratic test objective.
    pub quadratic_dim: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            arch: Arch {
                width: 8,
                trunk_blocks: 1,
                cond_blocks: 2,
                embed_dim: 4,
                attn_dim: 4,
                time_dim: 4,
                concepts: 2,
            },
            h: 1e-5,
            tol: 1e-4,
            batch_size: 16,
            max_coordinates: 500,
            alpha_i: 1e-3,
            alpha_grid: dimlab_core::analysis::default_alpha_grid(),
            beta: 1.0,
            quadratic_dim: 40,
        }
    }
}

/// Seed sub-streams of the top-level seed.
pub mod seed_stream {
    pub const DATA: u64 = 101;
    pub const PRETRAIN: u64 = 102;
    pub const IMMUNIZE: u64 = 103;
    pub const ATTACK: u64 = 104;
    pub const EVAL: u64 = 105;
    pub const PROBE: u64 = 106;
    pub const ANALYSIS: u64 = 107;
}

impl Config {
    /// Reference defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed,
            data: DataSection::default(),
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            immunize: ImmunizeSection::default(),
            attack: AttackSection::default(),
            eval: EvalSection::default(),
            analysis: AnalysisSection::default(),
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| CliError::Validation(format!("{origin}: {e}")))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::Validation(format!(
                "{origin}: schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Seed of one component, derived from the top-level seed.
    pub fn seed_for(&self, stream: u64) -> u64 {
        seeding::derive_seed(self.seed, &[stream])
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        let s = &self.model.schedule;
        Ok(build_schedule(s.steps, s.beta_start, s.beta_end)?)
    }

    pub fn immunization(&self) -> ImmunizeConfig {
        let i = &self.immunize;
        ImmunizeConfig {
            alpha_inner: i.alpha_inner,
            alpha_outer: i.alpha_outer,
            beta: i.beta,
            interleave: i.interleave,
            total_iterations: i.total_iterations,
            batch_size: i.batch_size,
            seed: self.seed_for(seed_stream::IMMUNIZE),
            checkpoint_every: i.checkpoint_every,
            noise: i.noise,
        }
    }

    pub fn attack(&self) -> AttackConfig {
        let a = &self.attack;
        AttackConfig {
            method: a.method,
            steps: a.steps,
            lr: a.lr,
            rank: a.rank,
            adapter_scale: a.adapter_scale,
            fresh_token: a.fresh_token,
            target_concept: a.target_concept,
            batch_size: a.batch_size,
            seed: self.seed_for(seed_stream::ATTACK),
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            samples: self.eval.samples,
            mi_bins: self.eval.mi_bins,
            seed: self.seed_for(seed_stream::EVAL),
        }
    }
}
