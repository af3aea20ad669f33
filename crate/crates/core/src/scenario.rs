//! The reference experiment: a fixed five-concept layout, its held-out
//! companion set, and how an undefended base model is pretrained.

use serde::{Deserialize, Serialize};

use crate::data::{make_concept_set, Concept, ConceptDataset, ConceptId, Family, Role, SplitCounts, Transform};
use crate::diffcore::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{init_denoiser, Arch, DenoiserParams};
use crate::seeding::{self, stream};
use crate::train::{generator_corpus, known_concepts, train_denoiser, TrainConfig};

/// Sample counts of the held-out set: 500/500 malicious, 500 per safe concept.
pub const HELDOUT_COUNTS: SplitCounts = SplitCounts {
    defense: 500,
    attack: 500,
    safe: 500,
};

/// Steps of the benign post-immunization fine-tune.
pub const BENIGN_STEPS: usize = 1000;

fn concept(id: u32, name: &str, family: Family, scale: f64, offset: [f64; 2], role: Role) -> Concept {
    Concept {
        id: ConceptId(id),
        name: name.into(),
        family,
        transform: Transform {
            rotation: 0.0,
            scale,
            offset,
        },
        role,
    }
}

/// One malicious blob and four safe shapes, one per quadrant plus the centre.
///
/// The base model built by [`pretrain`] with the default architecture knows
/// ids 0..4; the spiral (id 4) is left out so benign fine-tuning has an
/// unseen safe concept to learn.
pub fn reference_concepts() -> Vec<Concept> {
    vec![
        concept(0, "blob", Family::GaussianBlobs, 0.3, [1.5, 1.5], Role::Malicious),
        concept(1, "ring", Family::Ring, 0.6, [-1.5, 1.5], Role::Safe),
        concept(2, "moons", Family::TwoMoons, 0.5, [-1.5, -1.5], Role::Safe),
        concept(3, "grid", Family::Grid, 0.4, [1.5, -1.5], Role::Safe),
        concept(4, "spiral", Family::Spiral, 0.8, [0.0, 0.0], Role::Safe),
    ]
}

/// Held-out draws of the same concepts, from streams disjoint from `dataset`'s.
pub fn heldout_set(dataset: &ConceptDataset) -> Result<ConceptDataset> {
    let seed = seeding::derive_seed(dataset.seed, &[stream::HELDOUT]);
    make_concept_set(&dataset.concepts, HELDOUT_COUNTS, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Generator draws per known concept.
    pub corpus_per_concept: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            corpus_per_concept: 2000,
            steps: t.steps,
            lr: t.lr,
            batch_size: t.batch_size,
        }
    }
}

/// Initializes `arch` and trains it on generator draws of every concept with
/// an id below `arch.concepts`. Returns the model and its per-step losses.
pub fn pretrain(
    dataset: &ConceptDataset,
    arch: &Arch,
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(DenoiserParams, Vec<f64>)> {
    if cfg.corpus_per_concept == 0 {
        return Err(Error::InvalidArgument("corpus_per_concept must be positive".into()));
    }
    let init = init_denoiser(arch, seed)?;
    let known = known_concepts(dataset, &init);
    if known.is_empty() {
        return Err(Error::InsufficientData("no dataset concept fits the token table".into()));
    }
    let corpus = generator_corpus(&known, cfg.corpus_per_concept, seeding::derive_seed(seed, &[stream::CORPUS]));
    let train = TrainConfig {
        steps: cfg.steps,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        seed,
    };
    train_denoiser(&init, &corpus, schedule, &train)
}

/// First safe concept of `dataset` that `params` has no token for.
pub fn unseen_safe_concept(dataset: &ConceptDataset, params: &DenoiserParams) -> Option<ConceptId> {
    dataset
        .concepts_with_role(Role::Safe)
        .find(|c| !params.has_token(params.token_for(c.id)))
        .map(|c| c.id)
}
