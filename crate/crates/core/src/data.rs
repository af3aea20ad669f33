//! Synthetic 2-D concept datasets.
//!
//! A concept is a parametric point-cloud family placed in the plane by a
//! rotation, a positive scale and an offset. A [`ConceptDataset`] holds three
//! splits: the defense split `D_M` and attack split `D_A` of the malicious
//! concepts, and the safe split `D_S` of the safe concepts.
//!
//! Every sample is drawn from its own stream seeded by
//! `(seed, split, concept, index)`, so generation order never matters and the
//! defense and attack splits of a concept never share a stream.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(pub u32);

impl ConceptId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianBlobs,
    Ring,
    TwoMoons,
    Spiral,
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Malicious,
    Safe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "D_M")]
    Defense,
    #[serde(rename = "D_A")]
    Attack,
    #[serde(rename = "D_S")]
    Safe,
}

impl Split {
    fn label(self) -> u64 {
        match self {
            Split::Defense => 1,
            Split::Attack => 2,
            Split::Safe => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Defense => "D_M",
            Split::Attack => "D_A",
            Split::Safe => "D_S",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub rotation: f64,
    pub scale: f64,
    pub offset: [f64; 2],
}

impl Default for Transform {
    fn default() -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            offset: [0.0, 0.0],
        }
    }
}

impl Transform {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [
            self.offset[0] + self.scale * (c * p[0] - s * p[1]),
            self.offset[1] + self.scale * (s * p[0] + c * p[1]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: ConceptId,
    pub name: String,
    pub family: Family,
    pub transform: Transform,
    pub role: Role,
}

impl Concept {
    pub fn validate(&self) -> Result<()> {
        let t = &self.transform;
        if !(t.scale.is_finite() && t.scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "concept {}: scale must be positive, got {}",
                self.id, t.scale
            )));
        }
        if !(0.0..2.0 * PI).contains(&t.rotation) {
            return Err(Error::InvalidArgument(format!(
                "concept {}: rotation must lie in [0, 2pi), got {}",
                self.id, t.rotation
            )));
        }
        if !t.offset.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "concept {}: offset must be finite",
                self.id
            )));
        }
        Ok(())
    }

    /// Draws one point from the concept's distribution.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        self.transform.apply(sample_family(self.family, rng))
    }

    /// Draws `n` points into an `n x 2` matrix.
    pub fn draw_many<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let mut out = Array2::zeros((n, 2));
        for mut row in out.rows_mut() {
            let p = self.draw(rng);
            row[0] = p[0];
            row[1] = p[1];
        }
        out
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Untransformed draw from a family's base distribution.
pub fn sample_family<R: Rng + ?Sized>(family: Family, rng: &mut R) -> [f64; 2] {
    match family {
        Family::GaussianBlobs => [normal(rng), normal(rng)],
        Family::Ring => {
            let angle = rng.random::<f64>() * 2.0 * PI;
            let r = 1.0 + 0.1 * normal(rng);
            [r * angle.cos(), r * angle.sin()]
        }
        Family::TwoMoons => {
            let upper = rng.random::<bool>();
            let a = rng.random::<f64>() * PI;
            let (x, y) = if upper {
                (a.cos(), a.sin())
            } else {
                (1.0 - a.cos(), 0.5 - a.sin())
            };
            [x - 0.5 + 0.1 * normal(rng), y - 0.25 + 0.1 * normal(rng)]
        }
        Family::Spiral => {
            let u = rng.random::<f64>();
            let angle = 3.0 * PI * u;
            [
                u * angle.cos() + 0.05 * normal(rng),
                u * angle.sin() + 0.05 * normal(rng),
            ]
        }
        Family::Grid => {
            let i = rng.random_range(0..3) as f64 - 1.0;
            let j = rng.random_range(0..3) as f64 - 1.0;
            [i + 0.1 * normal(rng), j + 0.1 * normal(rng)]
        }
    }
}

/// Per-concept sample counts for each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    /// `D_M` samples per malicious concept.
    pub defense: usize,
    /// `D_A` samples per malicious concept.
    pub attack: usize,
    /// `D_S` samples per safe concept.
    pub safe: usize,
}

impl SplitCounts {
    /// Splits `malicious_total` equally between `D_M` and `D_A` (`D_M` takes
    /// the odd sample, if any).
    pub fn halved(malicious_total: usize, safe: usize) -> Self {
        Self {
            defense: malicious_total.div_ceil(2),
            attack: malicious_total / 2,
            safe,
        }
    }
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self::halved(40, 500)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: [f64; 2],
    pub concept: ConceptId,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDataset {
    pub schema_version: u32,
    pub seed: u64,
    pub counts: SplitCounts,
    pub concepts: Vec<Concept>,
    pub samples: Vec<Sample>,
}

/// Generates a dataset for `concepts`.
pub fn make_concept_set(
    concepts: &[Concept],
    counts: SplitCounts,
    seed: u64,
) -> Result<ConceptDataset> {
    if concepts.is_empty() {
        return Err(Error::InvalidArgument("empty concept list".into()));
    }
    if counts.defense == 0 || counts.attack == 0 || counts.safe == 0 {
        return Err(Error::InvalidArgument(format!(
            "split counts must be positive, got {counts:?}"
        )));
    }
    let mut seen = HashSet::new();
    for c in concepts {
        c.validate()?;
        if !seen.insert(c.id) {
            return Err(Error::DuplicateConcept(c.id));
        }
    }
    if !concepts.iter().any(|c| c.role == Role::Malicious) {
        return Err(Error::InvalidArgument(
            "at least one malicious concept is required".into(),
        ));
    }
    if !concepts.iter().any(|c| c.role == Role::Safe) {
        return Err(Error::InvalidArgument(
            "at least one safe concept is required".into(),
        ));
    }

    let mut samples = Vec::new();
    for c in concepts {
        let plan: &[(Split, usize)] = match c.role {
            Role::Malicious => &[(Split::Defense, counts.defense), (Split::Attack, counts.attack)],
            Role::Safe => &[(Split::Safe, counts.safe)],
        };
        for &(split, n) in plan {
            for i in 0..n {
                let mut rng = seeding::rng_from(seed, &[split.label(), c.id.0 as u64, i as u64]);
                samples.push(Sample {
                    x: c.draw(&mut rng),
                    concept: c.id,
                    split,
                });
            }
        }
    }

    let dataset = ConceptDataset {
        schema_version: DATASET_SCHEMA_VERSION,
        seed,
        counts,
        concepts: concepts.to_vec(),
        samples,
    };
    dataset.check_disjoint()?;
    Ok(dataset)
}

impl ConceptDataset {
    pub fn concept(&self, id: ConceptId) -> Result<&Concept> {
        self.concepts
            .iter()
            .find(|c| c.id == id)
            .ok_or(Error::UnknownConcept(id))
    }

    pub fn concepts_with_role(&self, role: Role) -> impl Iterator<Item = &Concept> {
        self.concepts.iter().filter(move |c| c.role == role)
    }

    /// Samples in `split`, optionally restricted to one concept, in storage order.
    pub fn split_view(&self, split: Split, concept: Option<ConceptId>) -> Result<Vec<Sample>> {
        if let Some(id) = concept {
            self.concept(id)?;
        }
        Ok(self
            .samples
            .iter()
            .filter(|s| s.split == split && concept.is_none_or(|id| s.concept == id))
            .copied()
            .collect())
    }

    /// All samples of a concept regardless of split.
    pub fn concept_samples(&self, concept: ConceptId) -> Result<Vec<Sample>> {
        self.concept(concept)?;
        Ok(self
            .samples
            .iter()
            .filter(|s| s.concept == concept)
            .copied()
            .collect())
    }

    fn check_disjoint(&self) -> Result<()> {
        for c in &self.concepts {
            let defense: HashSet<[u64; 2]> = self
                .samples
                .iter()
                .filter(|s| s.concept == c.id && s.split == Split::Defense)
                .map(|s| bits(s.x))
                .collect();
            if self
                .samples
                .iter()
                .filter(|s| s.concept == c.id && s.split == Split::Attack)
                .any(|s| defense.contains(&bits(s.x)))
            {
                return Err(Error::InvalidArgument(format!(
                    "concept {}: D_M and D_A share a sample",
                    c.id
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: DATASET_SCHEMA_VERSION,
            });
        }
        let mut seen = HashSet::new();
        for c in &self.concepts {
            c.validate()?;
            if !seen.insert(c.id) {
                return Err(Error::DuplicateConcept(c.id));
            }
        }
        for s in &self.samples {
            if !seen.contains(&s.concept) {
                return Err(Error::UnknownConcept(s.concept));
            }
            if !s.x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("sample of concept {}", s.concept)));
            }
        }
        for c in self.concepts_with_role(Role::Safe) {
            if !self
                .samples
                .iter()
                .any(|s| s.concept == c.id && s.split == Split::Safe)
            {
                return Err(Error::InvalidArgument(format!(
                    "safe concept {} has no D_S samples",
                    c.id
                )));
            }
        }
        self.check_disjoint()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Self = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn bits(x: [f64; 2]) -> [u64; 2] {
    [x[0].to_bits(), x[1].to_bits()]
}

/// Stacks sample coordinates into an `n x 2` matrix.
pub fn points(samples: &[Sample]) -> Array2<f64> {
    let mut out = Array2::zeros((samples.len(), 2));
    for (mut row, s) in out.rows_mut().into_iter().zip(samples) {
        row[0] = s.x[0];
        row[1] = s.x[1];
    }
    out
}
