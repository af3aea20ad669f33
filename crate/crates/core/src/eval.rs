//! Metrics over toy 2-D samples.
//!
//! The image-space metrics of large diffusion systems have no meaning here, so
//! each is replaced by a toy counterpart (see [`SUBSTITUTION_DISCLAIMER`]).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ConceptDataset, ConceptId, Split};
use crate::diffcore::{ConditionedBatch, DiffusionBatch, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::losses::{self, LossDraws, LossSelector, LossSpec, NoiseOptions};
use crate::model::DenoiserParams;
use crate::seeding::{self, stream};
use crate::train::Adam;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const METRICS_HEADER: &str =
    "model_state,concept,concept_name,heldout_denoise_loss,probe_accuracy,mmd,mi_proxy";
pub const NA: &str = "NA";
pub const SUBSTITUTION_DISCLAIMER: &str = "Metric substitution: prompt-image alignment (CLIP score) is \
replaced by probe_accuracy, the fraction of generated points a small classifier assigns to the \
requested concept; perceptual and feature similarity (LPIPS, DINO) are replaced by the squared MMD \
between generated and held-out points with a Gaussian kernel; the NSFW detection rate is replaced by \
probe_accuracy against the designated malicious concept. These are toy stand-ins and are not \
numerically comparable to image-space metrics.";

/// Minimum balanced held-out accuracy of a usable probe.
pub const PROBE_ACCURACY_FLOOR: f64 = 0.95;

/// Repetitions of `(t, eps)` per held-out point.
pub const HELDOUT_REPEATS: usize = 8;

// ---------------------------------------------------------------- probe

/// Small tanh MLP mapping a point to a concept, or to `None` for points far
/// from every concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeClassifier {
    /// Output classes; `None` is the background class.
    pub classes: Vec<Option<ConceptId>>,
    pub hidden: usize,
    pub mean: [f64; 2],
    pub std: [f64; 2],
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
    pub seed: u64,
    /// Mean per-concept recall on the held-out quarter.
    pub heldout_accuracy: f64,
}

struct ProbeCache {
    x: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    probs: Array2<f64>,
}

fn mat(v: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), v).expect("probe weight shape")
}

impl ProbeClassifier {
    fn k(&self) -> usize {
        self.classes.len()
    }

    fn standardize(&self, pts: ArrayView2<f64>) -> Array2<f64> {
        let mut x = pts.to_owned();
        for mut row in x.rows_mut() {
            for j in 0..2 {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        x
    }

    fn forward(&self, pts: ArrayView2<f64>) -> ProbeCache {
        let h = self.hidden;
        let x = self.standardize(pts);
        let h1 = (x.dot(&mat(&self.w1, h, 2).t()) + &Array1::from(self.b1.clone())).mapv(f64::tanh);
        let h2 = (h1.dot(&mat(&self.w2, h, h).t()) + &Array1::from(self.b2.clone())).mapv(f64::tanh);
        let mut logits = h2.dot(&mat(&self.w3, self.k(), h).t()) + &Array1::from(self.b3.clone());
        for mut row in logits.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        ProbeCache { x, h1, h2, probs: logits }
    }

    /// Predicted class per row.
    pub fn classify(&self, pts: ArrayView2<f64>) -> Vec<Option<ConceptId>> {
        self.forward(pts)
            .probs
            .rows()
            .into_iter()
            .map(|r| {
                let (best, _) = r
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
                self.classes[best]
            })
            .collect()
    }

    /// Cross-entropy and its gradient in the flat order w1,b1,w2,b2,w3,b3.
    fn loss_grad(&self, pts: ArrayView2<f64>, labels: &[usize], weights: &[f64]) -> (f64, Vec<f64>) {
        let c = self.forward(pts);
        let total_w: f64 = labels.iter().map(|&l| weights[l]).sum();
        let mut loss = 0.0;
        let mut d3 = c.probs.clone();
        for (i, &l) in labels.iter().enumerate() {
            let w = weights[l] / total_w;
            loss -= w * c.probs[[i, l]].max(1e-300).ln();
            d3[[i, l]] -= 1.0;
            d3.row_mut(i).mapv_inplace(|v| v * w);
        }
        let h = self.hidden;
        let gw3 = d3.t().dot(&c.h2);
        let gb3 = d3.sum_axis(Axis(0));
        let d2 = d3.dot(&mat(&self.w3, self.k(), h)) * c.h2.mapv(|v| 1.0 - v * v);
        let gw2 = d2.t().dot(&c.h1);
        let gb2 = d2.sum_axis(Axis(0));
        let d1 = d2.dot(&mat(&self.w2, h, h)) * c.h1.mapv(|v| 1.0 - v * v);
        let gw1 = d1.t().dot(&c.x);
        let gb1 = d1.sum_axis(Axis(0));
        let mut g = Vec::with_capacity(self.n_params());
        for (w, b) in [(gw1, gb1), (gw2, gb2), (gw3, gb3)] {
            g.extend(w.iter().copied());
            g.extend(b.iter().copied());
        }
        (loss, g)
    }

    fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len()
    }

    fn flat(&self) -> Vec<f64> {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for part in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3] {
            let n = part.len();
            part.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Background points drawn uniformly over the padded data box.
    pub background: usize,
    pub padding: f64,
    /// Background draws closer than this to any concept sample are rejected.
    pub clearance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 1500,
            lr: 1e-2,
            background: 1000,
            padding: 2.0,
            clearance: 0.5,
        }
    }
}

/// Trains a probe on every sample of every concept plus a uniform background
/// class; fails if the balanced held-out accuracy is below the floor.
pub fn train_probe(dataset: &ConceptDataset, seed: u64) -> Result<ProbeClassifier> {
    train_probe_with(dataset, seed, &ProbeConfig::default())
}

pub fn train_probe_with(dataset: &ConceptDataset, seed: u64, cfg: &ProbeConfig) -> Result<ProbeClassifier> {
    let mut classes: Vec<Option<ConceptId>> = Vec::new();
    for c in &dataset.concepts {
        if dataset.samples.iter().any(|s| s.concept == c.id) {
            classes.push(Some(c.id));
        }
    }
    if classes.len() < 2 {
        return Err(Error::InsufficientData("probe needs at least two concepts with samples".into()));
    }
    classes.push(None);
    let k = classes.len();
    let mut rng = seeding::rng_from(seed, &[stream::PROBE]);

    let mut pts: Vec<[f64; 2]> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (ci, c) in classes.iter().enumerate() {
        if let Some(id) = c {
            for s in dataset.samples.iter().filter(|s| s.concept == *id) {
                pts.push(s.x);
                labels.push(ci);
            }
        }
    }
    let lo = [0, 1].map(|j| pts.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min) - cfg.padding);
    let hi = [0, 1].map(|j| pts.iter().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max) + cfg.padding);
    let n_concept = pts.len();
    let c2 = cfg.clearance * cfg.clearance;
    let mut attempts = 0;
    let mut drawn = 0;
    while drawn < cfg.background && attempts < 100 * cfg.background {
        attempts += 1;
        let q = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
        let clear = pts[..n_concept]
            .iter()
            .all(|p| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) >= c2);
        if clear {
            pts.push(q);
            labels.push(k - 1);
            drawn += 1;
        }
    }

    // class-stratified three-to-one split
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for ci in 0..k {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == ci).collect();
        idx.shuffle(&mut rng);
        let n_test = idx.len() / 4;
        test_idx.extend_from_slice(&idx[..n_test]);
        train_idx.extend_from_slice(&idx[n_test..]);
    }
    let gather = |idx: &[usize]| {
        let mut m = Array2::zeros((idx.len(), 2));
        for (r, &i) in idx.iter().enumerate() {
            m[[r, 0]] = pts[i][0];
            m[[r, 1]] = pts[i][1];
        }
        (m, idx.iter().map(|&i| labels[i]).collect::<Vec<_>>())
    };
    let (xtr, ytr) = gather(&train_idx);
    let (xte, yte) = gather(&test_idx);

    let mean = [0, 1].map(|j| xtr.column(j).mean().unwrap_or(0.0));
    let std = [0, 1].map(|j| xtr.column(j).std(0.0).max(1e-12));
    let h = cfg.hidden;
    let mut init = |n: usize, fan_in: usize| -> Vec<f64> {
        let sd = (1.0 / fan_in as f64).sqrt();
        (0..n).map(|_| sd * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
    };
    let mut probe = ProbeClassifier {
        classes: classes.clone(),
        hidden: h,
        mean,
        std,
        w1: init(h * 2, 2),
        b1: vec![0.0; h],
        w2: init(h * h, h),
        b2: vec![0.0; h],
        w3: init(k * h, h),
        b3: vec![0.0; k],
        seed,
        heldout_accuracy: 0.0,
    };
    // balance classes in the loss
    let mut counts = vec![0usize; k];
    for &l in &ytr {
        counts[l] += 1;
    }
    let weights: Vec<f64> = counts.iter().map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 }).collect();
    let mut flat = probe.flat();
    let mut adam = Adam::new(flat.len(), cfg.lr);
    for _ in 0..cfg.epochs {
        let (_, g) = probe.loss_grad(xtr.view(), &ytr, &weights);
        adam.update(&mut flat, &g);
        probe.set_flat(&flat);
    }

    let pred = probe.classify(xte.view());
    let mut recalls = Vec::new();
    for ci in 0..k - 1 {
        let rows: Vec<usize> = (0..yte.len()).filter(|&i| yte[i] == ci).collect();
        if !rows.is_empty() {
            let hit = rows.iter().filter(|&&i| pred[i] == classes[ci]).count();
            recalls.push(hit as f64 / rows.len() as f64);
        }
    }
    probe.heldout_accuracy = recalls.iter().sum::<f64>() / recalls.len().max(1) as f64;
    if probe.heldout_accuracy < PROBE_ACCURACY_FLOOR {
        return Err(Error::Inseparable {
            accuracy: probe.heldout_accuracy,
            floor: PROBE_ACCURACY_FLOOR,
        });
    }
    Ok(probe)
}

/// Fraction of rows the probe assigns to `target`.
pub fn probe_accuracy(probe: &ProbeClassifier, samples: ArrayView2<f64>, target: ConceptId) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let hits = probe.classify(samples).iter().filter(|c| **c == Some(target)).count();
    Ok(hits as f64 / samples.nrows() as f64)
}

// ---------------------------------------------------------------- MMD

fn sq_dist(a: ArrayView2<f64>, i: usize, b: ArrayView2<f64>, j: usize) -> f64 {
    let dx = a[[i, 0]] - b[[j, 0]];
    let dy = a[[i, 1]] - b[[j, 1]];
    dx * dx + dy * dy
}

fn kernel_sum(a: ArrayView2<f64>, b: ArrayView2<f64>, gamma: f64, skip_diagonal: bool) -> f64 {
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            if skip_diagonal && i == j {
                continue;
            }
            s += (-gamma * sq_dist(a, i, b, j)).exp();
        }
    }
    s
}

fn check_mmd_args(a: ArrayView2<f64>, b: ArrayView2<f64>, bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if a.ncols() != 2 || b.ncols() != 2 {
        return Err(Error::ShapeMismatch("mmd expects n x 2 samples".into()));
    }
    Ok(1.0 / (2.0 * bandwidth * bandwidth))
}

/// Orders two sample sets so that the cross term is summed identically
/// whichever way round the arguments are passed.
fn canonical<'a>(a: ArrayView2<'a, f64>, b: ArrayView2<'a, f64>) -> (ArrayView2<'a, f64>, ArrayView2<'a, f64>) {
    let key = |m: &ArrayView2<f64>| (m.nrows(), m.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    if key(&a) <= key(&b) {
        (a, b)
    } else {
        (b, a)
    }
}

/// Unbiased estimate of squared MMD with kernel `exp(-|x-y|^2 / (2 bw^2))`.
pub fn mmd(a: ArrayView2<f64>, b: ArrayView2<f64>, bandwidth: f64) -> Result<f64> {
    let gamma = check_mmd_args(a, b, bandwidth)?;
    let (a, b) = canonical(a, b);
    let (m, n) = (a.nrows() as f64, b.nrows() as f64);
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::InsufficientData("unbiased MMD needs two samples per set".into()));
    }
    let xx = kernel_sum(a, a, gamma, true) / (m * (m - 1.0));
    let yy = kernel_sum(b, b, gamma, true) / (n * (n - 1.0));
    let xy = kernel_sum(a, b, gamma, false) / (m * n);
    Ok(xx + yy - 2.0 * xy)
}

/// Biased (V-statistic) estimate of squared MMD; never negative.
pub fn mmd_biased(a: ArrayView2<f64>, b: ArrayView2<f64>, bandwidth: f64) -> Result<f64> {
    let gamma = check_mmd_args(a, b, bandwidth)?;
    let (a, b) = canonical(a, b);
    let (m, n) = (a.nrows() as f64, b.nrows() as f64);
    let xx = kernel_sum(a, a, gamma, false) / (m * m);
    let yy = kernel_sum(b, b, gamma, false) / (n * n);
    let xy = kernel_sum(a, b, gamma, false) / (m * n);
    Ok((xx + yy - 2.0 * xy).max(0.0))
}

/// Median pairwise distance over the pooled samples.
pub fn median_bandwidth(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let mut pooled = a.to_owned();
    pooled.append(Axis(0), b).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let n = pooled.nrows();
    if n < 2 {
        return Err(Error::InsufficientData("bandwidth needs two points".into()));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(pooled.view(), i, pooled.view(), j).sqrt());
        }
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if m > 0.0 {
        Ok(m)
    } else {
        Err(Error::InvalidArgument("median pairwise distance is zero".into()))
    }
}

// ---------------------------------------------------------------- denoising loss

/// Mean denoising error over `HELDOUT_REPEATS` fixed `(t, eps)` draws per row.
pub fn denoise_loss_on<M: NoisePredictor + ?Sized>(
    model: &M,
    batch: &ConditionedBatch,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = seeding::rng_from(seed, &[stream::HELDOUT]);
    let mut total = 0.0;
    for _ in 0..HELDOUT_REPEATS {
        let db = DiffusionBatch::draw(batch, schedule, &mut rng)?;
        let xt = db.noised(schedule)?;
        let eps_hat = model.predict(xt.view(), &db.tokens, &db.t)?;
        total += losses::denoising_error(&eps_hat, &db.eps);
    }
    let v = total / HELDOUT_REPEATS as f64;
    if !v.is_finite() {
        return Err(Error::NonFinite("held-out denoising loss".into()));
    }
    Ok(v)
}

/// Denoising loss of `concept`'s samples in `split`, conditioned on the model's token for it.
pub fn heldout_denoise_loss(
    params: &DenoiserParams,
    dataset: &ConceptDataset,
    split: Split,
    concept: ConceptId,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let rows = dataset.split_view(split, Some(concept))?;
    if rows.is_empty() {
        return Err(Error::InsufficientData(format!("no {split} samples for concept {concept}")));
    }
    let batch = ConditionedBatch::with_token(&rows, params.token_for(concept));
    denoise_loss_on(params, &batch, schedule, seed)
}

/// The noising loss on a fixed batch with draws fixed by `seed`.
pub fn representation_noise(
    params: &DenoiserParams,
    batch: &ConditionedBatch,
    schedule: &NoiseSchedule,
    noise: NoiseOptions,
    seed: u64,
) -> Result<f64> {
    let mut spec = LossSpec::new(LossSelector::Noise);
    spec.noise = noise;
    let draws = LossDraws::draw(params, &spec, batch, schedule, &mut seeding::rng_from(seed, &[stream::MONITOR]))?;
    Ok(losses::evaluate(params, &spec, &draws, schedule, false)?.0.value)
}

// ---------------------------------------------------------------- mutual information

/// Projection of the rows of `x` onto their leading principal direction.
pub fn leading_projection(x: ArrayView2<f64>) -> Vec<f64> {
    let n = x.nrows();
    if n == 0 {
        return Vec::new();
    }
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let d = cov.nrows();
    // power iteration from a fixed start
    let mut v = Array1::from_shape_fn(d, |i| 1.0 + 0.1 * i as f64);
    v /= v.dot(&v).sqrt();
    for _ in 0..200 {
        let w = cov.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm < 1e-300 {
            break;
        }
        v = w / norm;
    }
    centered.dot(&v).to_vec()
}

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
}

fn bin_all(u: &[f64], bins: usize) -> Vec<usize> {
    let lo = u.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // near-constant input is one bin
    let span = hi - lo;
    let scale = u.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    if span <= 1e-9 * scale {
        return vec![0; u.len()];
    }
    u.iter().map(|&v| bin_index(v, lo, hi, bins)).collect()
}

/// Plug-in entropy (nats) of a histogram with equal-width bins.
pub fn histogram_entropy(u: &[f64], bins: usize) -> f64 {
    let b = bin_all(u, bins);
    let mut counts = vec![0usize; bins];
    for i in b {
        counts[i] += 1;
    }
    let n = u.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in mutual information (nats) between two scalars via a joint histogram, clamped at 0.
pub fn histogram_mi(u: &[f64], v: &[f64], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidArgument("bins must be >= 2".into()));
    }
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch("mi inputs differ in length".into()));
    }
    if u.len() < 10 * bins {
        return Err(Error::InsufficientData(format!(
            "{} samples for {bins} bins; need {}",
            u.len(),
            10 * bins
        )));
    }
    let (bu, bv) = (bin_all(u, bins), bin_all(v, bins));
    let mut joint = vec![0usize; bins * bins];
    let mut mu = vec![0usize; bins];
    let mut mv = vec![0usize; bins];
    for (&a, &b) in bu.iter().zip(&bv) {
        joint[a * bins + b] += 1;
        mu[a] += 1;
        mv[b] += 1;
    }
    let n = u.len() as f64;
    let mut mi = 0.0;
    for a in 0..bins {
        for b in 0..bins {
            let c = joint[a * bins + b];
            if c > 0 {
                let p = c as f64 / n;
                mi += p * (p * n * n / (mu[a] as f64 * mv[b] as f64)).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// MI between the leading projections of inputs and representations.
pub fn representation_mi(x: ArrayView2<f64>, z: ArrayView2<f64>, bins: usize) -> Result<f64> {
    if x.nrows() != z.nrows() {
        return Err(Error::ShapeMismatch("inputs and representations differ in rows".into()));
    }
    histogram_mi(&leading_projection(x), &leading_projection(z), bins)
}

/// Timestep at which representations are read for the MI diagnostic.
pub fn mi_timestep(schedule: &NoiseSchedule) -> usize {
    schedule.steps() / 10
}

/// Histogram MI between points and the deepest conditioning-block output,
/// read at a fixed low-noise timestep with fixed noise.
pub fn mi_proxy(
    params: &DenoiserParams,
    samples: ArrayView2<f64>,
    concept: ConceptId,
    schedule: &NoiseSchedule,
    bins: usize,
) -> Result<f64> {
    let n = samples.nrows();
    if bins < 2 {
        return Err(Error::InvalidArgument("bins must be >= 2".into()));
    }
    if n < 10 * bins {
        return Err(Error::InsufficientData(format!("{n} samples for {bins} bins")));
    }
    let token = params.token_for(concept);
    let batch = ConditionedBatch::new(samples.to_owned(), vec![token; n])?;
    let mut rng = seeding::rng_from(0, &[stream::EVAL]);
    let mut db = DiffusionBatch::draw(&batch, schedule, &mut rng)?;
    db.t = vec![mi_timestep(schedule); n];
    let xt = db.noised(schedule)?;
    let fwd = params.forward(xt.view(), &db.tokens, &db.t, true)?;
    let trace = fwd.trace.expect("capture requested");
    let last = trace.layers.last().ok_or_else(|| Error::InvalidArgument("model has no conditioning block".into()))?;
    representation_mi(samples, last.z.view(), bins)
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub model_state: String,
    pub concept: ConceptId,
    pub concept_name: String,
    pub heldout_denoise_loss: Option<f64>,
    pub probe_accuracy: Option<f64>,
    pub mmd: Option<f64>,
    pub mi_proxy: Option<f64>,
}

impl MetricRecord {
    fn values(&self) -> [Option<f64>; 4] {
        [self.heldout_denoise_loss, self.probe_accuracy, self.mmd, self.mi_proxy]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub run: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub disclaimer: String,
    /// Free-form notes such as bandwidths and why a metric is absent.
    pub notes: BTreeMap<String, String>,
    pub provenance: Vec<Provenance>,
    pub records: Vec<MetricRecord>,
}

impl MetricsReport {
    pub fn new(records: Vec<MetricRecord>, provenance: Vec<Provenance>) -> Result<Self> {
        let report = Self {
            schema_version: REPORT_SCHEMA_VERSION,
            disclaimer: SUBSTITUTION_DISCLAIMER.to_string(),
            notes: BTreeMap::new(),
            provenance,
            records,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::InvalidArgument("report has no records".into()));
        }
        if self.provenance.is_empty() {
            return Err(Error::InvalidArgument("report has no provenance".into()));
        }
        for r in &self.records {
            if r.values().iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("metric for {} / {}", r.model_state, r.concept)));
            }
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            let cells: Vec<String> = r
                .values()
                .iter()
                .map(|v| v.map_or_else(|| NA.to_string(), |x| x.to_string()))
                .collect();
            let _ = writeln!(out, "{},{},{},{}", r.model_state, r.concept.0, r.concept_name, cells.join(","));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: r.schema_version,
                expected: REPORT_SCHEMA_VERSION,
            });
        }
        Ok(r)
    }
}

/// Parses a metrics CSV written by [`MetricsReport::metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::InvalidArgument("unexpected metrics header".into()));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s == NA {
            Ok(None)
        } else {
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}")))
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(Error::InvalidArgument(format!("expected 7 fields: {l}")));
            }
            Ok(MetricRecord {
                model_state: f[0].to_string(),
                concept: ConceptId(f[1].parse().map_err(|_| Error::InvalidArgument(format!("bad concept id {}", f[1])))?),
                concept_name: f[2].to_string(),
                heldout_denoise_loss: num(f[3])?,
                probe_accuracy: num(f[4])?,
                mmd: num(f[5])?,
                mi_proxy: num(f[6])?,
            })
        })
        .collect()
}

/// Writes `report.json` and `metrics.csv` into `dir`; returns the paths written.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    report.validate()?;
    std::fs::create_dir_all(dir)?;
    let json = dir.join("report.json");
    let csv = dir.join("metrics.csv");
    std::fs::write(&json, serde_json::to_string_pretty(report)?)?;
    std::fs::write(&csv, report.metrics_csv())?;
    Ok(vec![json, csv])
}

// ---------------------------------------------------------------- model-state grid

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Points generated per (state, concept) cell.
    pub samples: usize,
    pub mi_bins: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 500,
            mi_bins: 8,
            seed: 0,
        }
    }
}

/// One metric row per concept of `heldout` for the model state `name`.
///
/// Concepts the model has no token for get a row of absent markers. With no
/// probe the accuracy column is absent as well.
pub fn evaluate_state(
    name: &str,
    params: &DenoiserParams,
    heldout: &ConceptDataset,
    probe: Option<&ProbeClassifier>,
    schedule: &NoiseSchedule,
    cfg: &EvalConfig,
) -> Result<Vec<MetricRecord>> {
    if cfg.samples < 2 {
        return Err(Error::InvalidArgument("eval.samples must be >= 2".into()));
    }
    let mut out = Vec::with_capacity(heldout.concepts.len());
    for c in &heldout.concepts {
        let mut rec = MetricRecord {
            model_state: name.to_string(),
            concept: c.id,
            concept_name: c.name.clone(),
            heldout_denoise_loss: None,
            probe_accuracy: None,
            mmd: None,
            mi_proxy: None,
        };
        let token = params.token_for(c.id);
        if params.has_token(token) {
            let rows = heldout.concept_samples(c.id)?;
            let reference = crate::data::points(&rows);
            let batch = ConditionedBatch::with_token(&rows, token);
            rec.heldout_denoise_loss = Some(denoise_loss_on(params, &batch, schedule, cfg.seed)?);
            let seed = seeding::derive_seed(cfg.seed, &[stream::SAMPLER, c.id.0 as u64]);
            let generated = crate::diffcore::p_sample_loop(params, token, cfg.samples, schedule, seed)?;
            if let Some(p) = probe {
                rec.probe_accuracy = Some(probe_accuracy(p, generated.view(), c.id)?);
            }
            let bw = median_bandwidth(generated.view(), reference.view())?;
            rec.mmd = Some(mmd(generated.view(), reference.view(), bw)?);
            if cfg.samples >= 10 * cfg.mi_bins {
                rec.mi_proxy = Some(mi_proxy(params, generated.view(), c.id, schedule, cfg.mi_bins)?);
            }
        }
        out.push(rec);
    }
    Ok(out)
}
