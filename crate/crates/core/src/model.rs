//! Conditional noise predictor `eps_theta(x_t, c, t)`.
//!
//! The network is a residual MLP trunk over `[x_t, sinusoidal(t)]`,
//! interleaved with conditioning blocks. Each conditioning block is a
//! single-head cross-attention from the hidden state to two key/value
//! tokens: the concept embedding and a null token (the zero embedding, whose
//! key and value reduce to the projection biases). Block output is
//! `z = h + silu(W_o attn + b_o)`.
//!
//! All trainable parameters live in one flat `theta` vector. The conditioning
//! subset `psi` is every conditioning-block parameter (weights and biases)
//! plus the concept embedding table, which is stored last so that new
//! concept tokens append to `theta` without moving anything else.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ConceptId;
use crate::diffcore::{DiffusionBatch, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::losses::{self, LossDraws, LossSelector, LossSpec, LossValue, NoiseLayers};
use crate::seeding;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Recorded in checkpoints: which parameters the conditioning subset covers.
pub const PSI_POLICY: &str =
    "conditioning blocks (q/k/v/o weights and biases) + concept embedding table";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub width: usize,
    pub trunk_blocks: usize,
    pub cond_blocks: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub time_dim: usize,
    pub concepts: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            width: 128,
            trunk_blocks: 4,
            cond_blocks: 3,
            embed_dim: 16,
            attn_dim: 32,
            time_dim: 16,
            concepts: 4,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("cond_blocks", self.cond_blocks),
            ("embed_dim", self.embed_dim),
            ("attn_dim", self.attn_dim),
            ("time_dim", self.time_dim),
            ("concepts", self.concepts),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("arch.{name} must be positive")));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::InvalidArgument("arch.time_dim must be even".into()));
        }
        Ok(())
    }
}

/// Offsets of one affine map `y = W x + b` inside `theta`; `W` is `out x inp`, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
    pub out: usize,
    pub inp: usize,
}

impl Dense {
    fn alloc(cursor: &mut usize, out: usize, inp: usize) -> Self {
        let w = *cursor;
        let b = w + out * inp;
        *cursor = b + out;
        Self { w, b, out, inp }
    }

    pub fn start(&self) -> usize {
        self.w
    }

    pub fn end(&self) -> usize {
        self.b + self.out
    }

    pub fn weight<'a>(&self, theta: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.out, self.inp), &theta[self.w..self.b]).expect("layout")
    }

    pub fn bias<'a>(&self, theta: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&theta[self.b..self.end()])
    }

    fn apply(&self, theta: &[f64], x: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight(theta).t());
        y += &self.bias(theta);
        y
    }

    /// Accumulates `dW += dy^T x`, `db += sum(dy)`.
    fn accumulate(&self, grad: &mut [f64], x: &ArrayView2<'_, f64>, dy: &Array2<f64>) {
        let dw = dy.t().dot(x);
        for (g, v) in grad[self.w..self.b].iter_mut().zip(dw.iter()) {
            *g += v;
        }
        let db = dy.sum_axis(Axis(0));
        for (g, v) in grad[self.b..self.end()].iter_mut().zip(db.iter()) {
            *g += v;
        }
    }
}

/// Query, key, value and output projections of one conditioning block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CondLayout {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl CondLayout {
    pub fn projection(&self, p: Projection) -> Dense {
        match p {
            Projection::Q => self.q,
            Projection::K => self.k,
            Projection::V => self.v,
            Projection::O => self.o,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Trunk(usize),
    Cond(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub input: Dense,
    pub trunk: Vec<Dense>,
    pub cond: Vec<CondLayout>,
    pub output: Dense,
    pub order: Vec<Block>,
    pub table: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(arch: &Arch) -> Self {
        let h = arch.width;
        let mut cursor = 0;
        let input = Dense::alloc(&mut cursor, h, 2 + arch.time_dim);
        let mut order = Vec::new();
        for i in 0..arch.trunk_blocks.max(arch.cond_blocks) {
            if i < arch.trunk_blocks {
                order.push(Block::Trunk(i));
            }
            if i < arch.cond_blocks {
                order.push(Block::Cond(i));
            }
        }
        let mut trunk = Vec::new();
        let mut cond = Vec::new();
        for b in &order {
            match b {
                Block::Trunk(_) => trunk.push(Dense::alloc(&mut cursor, h, h)),
                Block::Cond(_) => {
                    let q = Dense::alloc(&mut cursor, arch.attn_dim, h);
                    let k = Dense::alloc(&mut cursor, arch.attn_dim, arch.embed_dim);
                    let v = Dense::alloc(&mut cursor, arch.attn_dim, arch.embed_dim);
                    let o = Dense::alloc(&mut cursor, h, arch.attn_dim);
                    cond.push(CondLayout { q, k, v, o });
                }
            }
        }
        let output = Dense::alloc(&mut cursor, 2, h);
        let table = cursor;
        let total = table + arch.concepts * arch.embed_dim;
        Self {
            input,
            trunk,
            cond,
            output,
            order,
            table,
            total,
        }
    }

    /// Sorted disjoint ranges of the conditioning subset.
    pub fn psi(&self) -> PsiIndex {
        let mut ranges: Vec<[usize; 2]> =
            self.cond.iter().map(|c| [c.q.start(), c.o.end()]).collect();
        ranges.push([self.table, self.total]);
        PsiIndex::from_ranges(ranges)
    }
}

/// Closed-form size of the conditioning subset.
pub fn psi_count(arch: &Arch) -> usize {
    let (h, a, e) = (arch.width, arch.attn_dim, arch.embed_dim);
    let per_block = (a * h + a) + 2 * (a * e + a) + (h * a + h);
    arch.cond_blocks * per_block + arch.concepts * e
}

/// A sorted set of parameter indices stored as half-open ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsiIndex {
    ranges: Vec<[usize; 2]>,
}

impl PsiIndex {
    pub fn from_ranges(mut ranges: Vec<[usize; 2]>) -> Self {
        ranges.retain(|r| r[1] > r[0]);
        ranges.sort();
        let mut merged: Vec<[usize; 2]> = Vec::with_capacity(ranges.len());
        for r in ranges {
            match merged.last_mut() {
                Some(last) if r[0] <= last[1] => last[1] = last[1].max(r[1]),
                _ => merged.push(r),
            }
        }
        Self { ranges: merged }
    }

    pub fn ranges(&self) -> &[[usize; 2]] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.iter().map(|r| r[1] - r[0]).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(|r| r[0]..r[1])
    }

    pub fn contains(&self, i: usize) -> bool {
        self.ranges.iter().any(|r| (r[0]..r[1]).contains(&i))
    }

    /// Values of `full` at the indices of the set, in index order.
    pub fn gather(&self, full: &[f64]) -> Vec<f64> {
        self.iter().map(|i| full[i]).collect()
    }

    /// Expands a restricted vector to full length with zeros elsewhere.
    pub fn scatter(&self, restricted: &[f64], total: usize) -> Vec<f64> {
        let mut out = vec![0.0; total];
        for (i, v) in self.iter().zip(restricted) {
            out[i] = *v;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: Arch,
    pub theta: Vec<f64>,
    pub psi: PsiIndex,
    /// Dataset concept -> token row, for concepts learned under a fresh token.
    pub token_aliases: BTreeMap<ConceptId, ConceptId>,
}

/// Variance-scaled initialization: weights `N(0, 1/fan_in)`, zero biases,
/// concept embeddings `N(0, 1)`.
pub fn init_denoiser(arch: &Arch, seed: u64) -> Result<DenoiserParams> {
    arch.validate()?;
    let layout = Layout::new(arch);
    let mut theta = vec![0.0; layout.total];
    let mut rng = seeding::rng(seed);
    let mut fill = |d: &Dense, theta: &mut [f64]| {
        let sd = (1.0 / d.inp as f64).sqrt();
        for w in &mut theta[d.w..d.b] {
            *w = sd * rng.sample::<f64, _>(StandardNormal);
        }
    };
    fill(&layout.input, &mut theta);
    let mut t_iter = layout.trunk.iter();
    let mut c_iter = layout.cond.iter();
    for b in &layout.order {
        match b {
            Block::Trunk(_) => fill(t_iter.next().expect("layout"), &mut theta),
            Block::Cond(_) => {
                let c = c_iter.next().expect("layout");
                for d in [&c.q, &c.k, &c.v, &c.o] {
                    fill(d, &mut theta);
                }
            }
        }
    }
    fill(&layout.output, &mut theta);
    for w in &mut theta[layout.table..] {
        *w = rng.sample::<f64, _>(StandardNormal);
    }
    Ok(DenoiserParams {
        arch: *arch,
        psi: layout.psi(),
        theta,
        token_aliases: BTreeMap::new(),
    })
}

/// Captured post-activation branch output of one block: `z` is `batch x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivation {
    pub block: usize,
    pub z: Array2<f64>,
    pub mu: f64,
    pub var: f64,
}

impl LayerActivation {
    pub fn new(block: usize, z: Array2<f64>) -> Self {
        let n = z.len().max(1) as f64;
        let mu = z.sum() / n;
        let var = z.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        Self { block, z, mu, var }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivationTrace {
    pub layers: Vec<LayerActivation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub eps_hat: Array2<f64>,
    pub trace: Option<ActivationTrace>,
}

#[derive(Debug)]
enum BlockCache {
    Trunk {
        pre: Array2<f64>,
    },
    Cond {
        q: Array2<f64>,
        e: Array2<f64>,
        kc: Array2<f64>,
        vc: Array2<f64>,
        p: Array1<f64>,
        o: Array2<f64>,
        pre: Array2<f64>,
    },
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug)]
pub struct ForwardCache {
    u: Array2<f64>,
    /// `inputs[i]` is the hidden state entering block `i`; the final entry is the trunk output.
    inputs: Vec<Array2<f64>>,
    blocks: Vec<BlockCache>,
    tokens: Vec<ConceptId>,
    pub eps_hat: Array2<f64>,
}

impl ForwardCache {
    /// Output of block `i` in forward order (after the residual add).
    pub fn block_output(&self, i: usize) -> &Array2<f64> {
        &self.inputs[i + 1]
    }

    /// Post-activation output of block `i`'s branch, before the residual add.
    pub fn branch_output(&self, i: usize) -> Array2<f64> {
        match &self.blocks[i] {
            BlockCache::Trunk { pre } | BlockCache::Cond { pre, .. } => pre.mapv(silu),
        }
    }
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

fn silu(a: f64) -> f64 {
    a * sigmoid(a)
}

fn silu_grad(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 + a * (1.0 - s))
}

/// Sinusoidal embedding of integer timesteps: `[sin(t f_k), cos(t f_k)]`.
pub fn time_embedding(t: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((t.len(), dim));
    for (i, &ti) in t.iter().enumerate() {
        for k in 0..half {
            let f = (-(10_000f64).ln() * k as f64 / half as f64).exp();
            let (s, c) = (ti as f64 * f).sin_cos();
            out[[i, k]] = s;
            out[[i, half + k]] = c;
        }
    }
    out
}

impl DenoiserParams {
    pub fn layout(&self) -> Layout {
        Layout::new(&self.arch)
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Table row used to condition on a dataset concept.
    pub fn token_for(&self, concept: ConceptId) -> ConceptId {
        self.token_aliases.get(&concept).copied().unwrap_or(concept)
    }

    pub fn has_token(&self, token: ConceptId) -> bool {
        token.index() < self.arch.concepts
    }

    pub fn embedding(&self, token: ConceptId) -> Result<&[f64]> {
        if !self.has_token(token) {
            return Err(Error::UnknownConcept(token));
        }
        let e = self.arch.embed_dim;
        let start = self.layout().table + token.index() * e;
        Ok(&self.theta[start..start + e])
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let layout = self.layout();
        if self.theta.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "theta has {} entries, arch needs {}",
                self.theta.len(),
                layout.total
            )));
        }
        if self.psi != layout.psi() {
            return Err(Error::InvalidArgument(
                "psi index does not match the architecture".into(),
            ));
        }
        if !self.theta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    /// Runs the network, keeping every intermediate needed by [`backward`](Self::backward).
    pub fn forward_cached(
        &self,
        x_t: ArrayView2<'_, f64>,
        tokens: &[ConceptId],
        t: &[usize],
    ) -> Result<ForwardCache> {
        let n = x_t.nrows();
        if x_t.ncols() != 2 || tokens.len() != n || t.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "x_t {:?}, {} tokens, {} timesteps",
                x_t.dim(),
                tokens.len(),
                t.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|c| !self.has_token(**c)) {
            return Err(Error::UnknownConcept(bad));
        }
        let layout = self.layout();
        let theta = &self.theta[..];
        let arch = &self.arch;

        let mut u = Array2::zeros((n, 2 + arch.time_dim));
        u.slice_mut(s![.., 0..2]).assign(&x_t);
        u.slice_mut(s![.., 2..]).assign(&time_embedding(t, arch.time_dim));

        let e_all = ArrayView2::from_shape(
            (arch.concepts, arch.embed_dim),
            &theta[layout.table..layout.total],
        )
        .expect("layout");
        let idx: Vec<usize> = tokens.iter().map(|c| c.index()).collect();
        let e = e_all.select(Axis(0), &idx);

        let mut h = layout.input.apply(theta, &u.view());
        let mut inputs = Vec::with_capacity(layout.order.len() + 1);
        let mut blocks = Vec::with_capacity(layout.order.len());
        let inv_sqrt_a = 1.0 / (arch.attn_dim as f64).sqrt();
        for b in &layout.order {
            match *b {
                Block::Trunk(i) => {
                    let pre = layout.trunk[i].apply(theta, &h.view());
                    let next = &h + &pre.mapv(silu);
                    inputs.push(std::mem::replace(&mut h, next));
                    blocks.push(BlockCache::Trunk { pre });
                }
                Block::Cond(j) => {
                    let c = &layout.cond[j];
                    let q = c.q.apply(theta, &h.view());
                    let kc = c.k.apply(theta, &e.view());
                    let vc = c.v.apply(theta, &e.view());
                    let k0 = c.k.bias(theta);
                    let v0 = c.v.bias(theta);
                    let mut p = Array1::zeros(n);
                    let mut o = Array2::zeros((n, arch.attn_dim));
                    for r in 0..n {
                        let qr = q.row(r);
                        let sc = qr.dot(&kc.row(r)) * inv_sqrt_a;
                        let s0 = qr.dot(&k0) * inv_sqrt_a;
                        let pr = sigmoid(sc - s0);
                        p[r] = pr;
                        let mut orow = o.row_mut(r);
                        orow.assign(&vc.row(r));
                        orow *= pr;
                        orow.scaled_add(1.0 - pr, &v0);
                    }
                    let pre = c.o.apply(theta, &o.view());
                    let next = &h + &pre.mapv(silu);
                    inputs.push(std::mem::replace(&mut h, next));
                    blocks.push(BlockCache::Cond {
                        q,
                        e: e.clone(),
                        kc,
                        vc,
                        p,
                        o,
                        pre,
                    });
                }
            }
        }
        let eps_hat = layout.output.apply(theta, &h.view());
        inputs.push(h);
        Ok(ForwardCache {
            u,
            inputs,
            blocks,
            tokens: tokens.to_vec(),
            eps_hat,
        })
    }

    /// Block indices (forward order) whose outputs form the activation trace.
    pub fn traced_blocks(&self, layers: NoiseLayers) -> Vec<usize> {
        self.layout()
            .order
            .iter()
            .enumerate()
            .filter(|(_, b)| layers == NoiseLayers::All || matches!(b, Block::Cond(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn trace_from(&self, cache: &ForwardCache, layers: NoiseLayers) -> ActivationTrace {
        ActivationTrace {
            layers: self
                .traced_blocks(layers)
                .into_iter()
                .map(|i| LayerActivation::new(i, cache.branch_output(i)))
                .collect(),
        }
    }

    /// Noise prediction; with `capture` the post-activation branch outputs of the
    /// conditioning blocks are returned too.
    pub fn forward(
        &self,
        x_t: ArrayView2<'_, f64>,
        tokens: &[ConceptId],
        t: &[usize],
        capture: bool,
    ) -> Result<Forward> {
        let cache = self.forward_cached(x_t, tokens, t)?;
        let trace = capture.then(|| self.trace_from(&cache, NoiseLayers::Conditioning));
        Ok(Forward {
            eps_hat: cache.eps_hat,
            trace,
        })
    }

    /// Backpropagates `d_eps_hat` plus extra gradients on branch outputs
    /// (`d_blocks[i]` is added at the post-activation branch output of block `i`).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_eps_hat: &Array2<f64>,
        d_blocks: &[Option<Array2<f64>>],
    ) -> Vec<f64> {
        let layout = self.layout();
        let theta = &self.theta[..];
        let arch = &self.arch;
        let mut grad = vec![0.0; layout.total];
        let inv_sqrt_a = 1.0 / (arch.attn_dim as f64).sqrt();
        let n = d_eps_hat.nrows();

        let last = cache.inputs.last().expect("trunk output");
        layout.output.accumulate(&mut grad, &last.view(), d_eps_hat);
        let mut dh = d_eps_hat.dot(&layout.output.weight(theta));

        for (bi, b) in layout.order.iter().enumerate().rev() {
            // gradient reaching the branch output: downstream plus any direct term
            let d_branch = match d_blocks.get(bi) {
                Some(Some(extra)) => &dh + extra,
                _ => dh.clone(),
            };
            let h_in = &cache.inputs[bi];
            match (*b, &cache.blocks[bi]) {
                (Block::Trunk(i), BlockCache::Trunk { pre }) => {
                    let d = &layout.trunk[i];
                    let da = &d_branch * &pre.mapv(silu_grad);
                    d.accumulate(&mut grad, &h_in.view(), &da);
                    dh += &da.dot(&d.weight(theta));
                }
                (Block::Cond(j), BlockCache::Cond { q, e, kc, vc, p, o, pre }) => {
                    let c = &layout.cond[j];
                    let du = &d_branch * &pre.mapv(silu_grad);
                    c.o.accumulate(&mut grad, &o.view(), &du);
                    let d_o = du.dot(&c.o.weight(theta));

                    let k0 = c.k.bias(theta);
                    let v0 = c.v.bias(theta);
                    let mut dvc = Array2::zeros((n, arch.attn_dim));
                    let mut dkc = Array2::zeros((n, arch.attn_dim));
                    let mut dq = Array2::zeros((n, arch.attn_dim));
                    let mut dv0 = Array1::<f64>::zeros(arch.attn_dim);
                    let mut dk0 = Array1::<f64>::zeros(arch.attn_dim);
                    for r in 0..n {
                        let pr = p[r];
                        let dor = d_o.row(r);
                        let dp = dor.dot(&vc.row(r)) - dor.dot(&v0);
                        dvc.row_mut(r).assign(&(&dor * pr));
                        dv0.scaled_add(1.0 - pr, &dor);
                        let ds = dp * pr * (1.0 - pr) * inv_sqrt_a;
                        let mut dqr = dq.row_mut(r);
                        dqr.assign(&kc.row(r));
                        dqr -= &k0;
                        dqr *= ds;
                        dkc.row_mut(r).assign(&(&q.row(r) * ds));
                        dk0.scaled_add(-ds, &q.row(r));
                    }
                    c.v.accumulate(&mut grad, &e.view(), &dvc);
                    for (g, v) in grad[c.v.b..c.v.end()].iter_mut().zip(dv0.iter()) {
                        *g += v;
                    }
                    c.k.accumulate(&mut grad, &e.view(), &dkc);
                    for (g, v) in grad[c.k.b..c.k.end()].iter_mut().zip(dk0.iter()) {
                        *g += v;
                    }
                    c.q.accumulate(&mut grad, &h_in.view(), &dq);

                    let de = dvc.dot(&c.v.weight(theta)) + dkc.dot(&c.k.weight(theta));
                    let ed = arch.embed_dim;
                    for (r, tok) in cache.tokens.iter().enumerate() {
                        let start = layout.table + tok.index() * ed;
                        for (g, v) in grad[start..start + ed].iter_mut().zip(de.row(r).iter()) {
                            *g += v;
                        }
                    }
                    dh += &dq.dot(&c.q.weight(theta));
                }
                _ => unreachable!("cache and layout disagree"),
            }
        }
        layout.input.accumulate(&mut grad, &cache.u.view(), &dh);
        grad
    }

    /// Appends a fresh concept token; returns the updated parameters and its id.
    pub fn add_concept_token(&self, init: TokenInit) -> Result<(DenoiserParams, ConceptId)> {
        let embedding: Vec<f64> = match init {
            TokenInit::Random { seed } => {
                let mut rng = seeding::rng(seed);
                (0..self.arch.embed_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
            TokenInit::CopyOf(c) => self.embedding(c)?.to_vec(),
        };
        let new_id = ConceptId(self.arch.concepts as u32);
        let mut arch = self.arch;
        arch.concepts += 1;
        let mut theta = self.theta.clone();
        theta.extend_from_slice(&embedding);
        let out = DenoiserParams {
            arch,
            psi: Layout::new(&arch).psi(),
            theta,
            token_aliases: self.token_aliases.clone(),
        };
        Ok((out, new_id))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            arch: self.arch,
            psi_policy: PSI_POLICY.to_string(),
            psi_ranges: self.psi.ranges().to_vec(),
            token_aliases: self.token_aliases.clone(),
            theta: self.theta.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: ck.schema_version,
                expected: CHECKPOINT_SCHEMA_VERSION,
            });
        }
        let params = DenoiserParams {
            arch: ck.arch,
            theta: ck.theta,
            psi: PsiIndex::from_ranges(ck.psi_ranges),
            token_aliases: ck.token_aliases,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(ck)
    }
}

impl NoisePredictor for DenoiserParams {
    fn predict(&self, x_t: ArrayView2<'_, f64>, tokens: &[ConceptId], t: &[usize]) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x_t, tokens, t)?.eps_hat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenInit {
    Random { seed: u64 },
    CopyOf(ConceptId),
}

/// On-disk form of [`DenoiserParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub arch: Arch,
    pub psi_policy: String,
    pub psi_ranges: Vec<[usize; 2]>,
    pub token_aliases: BTreeMap<ConceptId, ConceptId>,
    pub theta: Vec<f64>,
}

/// Loss value and full-length gradient over `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub loss: LossValue,
    pub full: Vec<f64>,
}

impl Gradient {
    pub fn restricted(&self, psi: &PsiIndex) -> Vec<f64> {
        psi.gather(&self.full)
    }

    pub fn is_finite(&self) -> bool {
        self.loss.value.is_finite() && self.full.iter().all(|g| g.is_finite())
    }
}

/// Exact gradient of the selected loss at `params` for fixed draws.
pub fn gradient(
    params: &DenoiserParams,
    spec: &LossSpec,
    draws: &LossDraws,
    schedule: &NoiseSchedule,
) -> Result<Gradient> {
    let (loss, grad) = losses::evaluate(params, spec, draws, schedule, true)?;
    Ok(Gradient {
        loss,
        full: grad.expect("gradient requested"),
    })
}

/// Convenience: draws fresh `t`/`eps` (and noise) and returns the gradient.
pub fn gradient_with_rng<R: Rng + ?Sized>(
    params: &DenoiserParams,
    spec: &LossSpec,
    batch: &crate::diffcore::ConditionedBatch,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Gradient> {
    let draws = LossDraws::draw(params, spec, batch, schedule, rng)?;
    gradient(params, spec, &draws, schedule)
}

/// Selector-only shorthand for the denoising objectives.
pub fn denoise_gradient(
    params: &DenoiserParams,
    batch: &DiffusionBatch,
    schedule: &NoiseSchedule,
) -> Result<Gradient> {
    let spec = LossSpec::new(LossSelector::Prior);
    gradient(params, &spec, &LossDraws::plain(batch.clone()), schedule)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn small_arch() -> Arch {
        Arch {
            width: 8,
            trunk_blocks: 2,
            cond_blocks: 3,
            embed_dim: 4,
            attn_dim: 4,
            time_dim: 4,
            concepts: 3,
        }
    }

    fn inputs(n: usize, concepts: u32) -> (Array2<f64>, Vec<ConceptId>, Vec<usize>) {
        let mut rng = seeding::rng(42);
        let x = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let c = (0..n).map(|i| ConceptId(i as u32 % concepts)).collect();
        let t = (0..n).map(|i| (i * 7) % 50).collect();
        (x, c, t)
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_denoiser(&small_arch(), 3).unwrap();
        let b = init_denoiser(&small_arch(), 3).unwrap();
        assert_eq!(a, b);
        let c = init_denoiser(&small_arch(), 4).unwrap();
        assert_ne!(a.theta, c.theta);
    }

    #[test]
    fn psi_count_matches_architecture_arithmetic() {
        for arch in [small_arch(), Arch::default()] {
            let p = init_denoiser(&arch, 0).unwrap();
            assert_eq!(p.psi.len(), psi_count(&arch));
            assert!(p.psi.len() < p.len());
        }
    }

    #[test]
    fn psi_covers_only_conditioning_and_table() {
        let p = init_denoiser(&small_arch(), 0).unwrap();
        let l = p.layout();
        let mut expected = vec![false; l.total];
        for c in &l.cond {
            for d in [c.q, c.k, c.v, c.o] {
                expected[d.start()..d.end()].iter_mut().for_each(|e| *e = true);
            }
        }
        expected[l.table..].iter_mut().for_each(|e| *e = true);
        for (i, e) in expected.iter().enumerate() {
            assert_eq!(p.psi.contains(i), *e, "index {i}");
        }
    }

    #[test]
    fn zero_network_predicts_zero() {
        let mut p = init_denoiser(&small_arch(), 0).unwrap();
        p.theta.iter_mut().for_each(|w| *w = 0.0);
        let (x, c, t) = inputs(5, 3);
        let out = p.forward(x.view(), &c, &t, false).unwrap();
        assert!(out.eps_hat.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn capture_is_observation_only() {
        let p = init_denoiser(&small_arch(), 1).unwrap();
        let (x, c, t) = inputs(8, 3);
        let a = p.forward(x.view(), &c, &t, false).unwrap();
        let b = p.forward(x.view(), &c, &t, true).unwrap();
        assert!(a.trace.is_none());
        assert_eq!(a.eps_hat, b.eps_hat);
        let trace = b.trace.unwrap();
        assert_eq!(trace.layers.len(), 3);
        for l in &trace.layers {
            assert_eq!(l.z.dim(), (8, 8));
            assert!(l.var >= 0.0);
        }
    }

    #[test]
    fn unknown_token_and_bad_shapes_are_rejected() {
        let p = init_denoiser(&small_arch(), 1).unwrap();
        let (x, _, t) = inputs(2, 3);
        assert!(matches!(
            p.forward(x.view(), &[ConceptId(0), ConceptId(3)], &t, false),
            Err(Error::UnknownConcept(ConceptId(3)))
        ));
        assert!(p.forward(x.view(), &[ConceptId(0)], &t, false).is_err());
    }

    #[test]
    fn new_token_extends_theta_only_at_the_end() {
        let p = init_denoiser(&small_arch(), 1).unwrap();
        let (q, id) = p.add_concept_token(TokenInit::CopyOf(ConceptId(1))).unwrap();
        assert_eq!(id, ConceptId(3));
        assert_eq!(q.len(), p.len() + p.arch.embed_dim);
        assert_eq!(&q.theta[..p.len()], &p.theta[..]);
        assert_eq!(q.embedding(id).unwrap(), p.embedding(ConceptId(1)).unwrap());
        assert_eq!(q.psi.len(), p.psi.len() + p.arch.embed_dim);
        q.validate().unwrap();

        let (r, rid) = p.add_concept_token(TokenInit::Random { seed: 5 }).unwrap();
        let (x, _, t) = inputs(4, 1);
        let out = r.forward(x.view(), &[rid; 4], &t, false).unwrap();
        assert!(out.eps_hat.iter().all(|v| v.is_finite()));
        assert!(p.add_concept_token(TokenInit::CopyOf(ConceptId(7))).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = init_denoiser(&small_arch(), 9).unwrap();
        let text = serde_json::to_string(&p.to_checkpoint()).unwrap();
        let back = DenoiserParams::from_checkpoint(serde_json::from_str(&text).unwrap()).unwrap();
        assert!(p.theta.iter().zip(&back.theta).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(p, back);
    }

    #[test]
    fn psi_index_helpers() {
        let psi = PsiIndex::from_ranges(vec![[5, 7], [0, 2], [2, 3], [9, 9]]);
        assert_eq!(psi.ranges(), &[[0, 3], [5, 7]]);
        assert_eq!(psi.iter().collect::<Vec<_>>(), vec![0, 1, 2, 5, 6]);
        let full: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let g = psi.gather(&full);
        assert_eq!(g, vec![0.0, 1.0, 2.0, 5.0, 6.0]);
        assert_eq!(psi.scatter(&g, 8), vec![0.0, 1.0, 2.0, 0.0, 0.0, 5.0, 6.0, 0.0]);
    }
}
