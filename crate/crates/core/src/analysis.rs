//! Numerical checks of the trainer's mathematics.
//!
//! * [`grad_check`] compares analytic gradients with central finite differences.
//! * [`taylor_residual`] runs one inner step followed by one outer step and
//!   compares the resulting conditioning parameters with the second-order
//!   expansion `psi - a_P g_P - a_I g_I + a_P a_I H_I g_P`. The curvature
//!   product is formed matrix-free by differencing the immunization gradient
//!   along the prior gradient; no Hessian is ever built.
//! * [`taylor_scaling`] sweeps `a_P` and fits the log-log slope of the
//!   residual, which should be 2 for a second-order-accurate expansion.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ConditionedBatch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::losses::{self, LossDraws, LossSelector, LossSpec, NoiseOptions};
use crate::model::{DenoiserParams, PsiIndex};
use crate::seeding;

/// Denominator floor for relative gradient errors. Central differences at
/// `h = 1e-5` carry round-off near `1e-16 * L / h ~ 1e-11`, so coordinates
/// whose true gradient is zero would otherwise report relative error 1.
pub const REL_ERROR_FLOOR: f64 = 1e-6;
/// Residuals below this are treated as round-off.
pub const RESIDUAL_NOISE_FLOOR: f64 = 1e-9;

/// A differentiable scalar function of a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, theta: &[f64]) -> Result<f64>;
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// `||theta||^2`.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticProbe {
    pub dim: usize,
}

impl Objective for QuadraticProbe {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(theta.iter().map(|v| v * v).sum())
    }
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(theta.iter().map(|v| 2.0 * v).collect())
    }
}

/// One of the denoiser losses with all randomness frozen.
#[derive(Debug, Clone)]
pub struct DenoiserObjective<'a> {
    template: &'a DenoiserParams,
    spec: LossSpec,
    draws: LossDraws,
    schedule: &'a NoiseSchedule,
}

impl<'a> DenoiserObjective<'a> {
    /// Draws `t`, `eps` and noising targets once; the targets are evaluated at
    /// `template` and then held fixed, so the objective is a plain function.
    pub fn new<R: Rng + ?Sized>(
        template: &'a DenoiserParams,
        spec: LossSpec,
        batch: &ConditionedBatch,
        schedule: &'a NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        let draws = LossDraws::draw(template, &spec, batch, schedule, rng)?.freeze(template, &spec, schedule)?;
        Ok(Self {
            template,
            spec,
            draws,
            schedule,
        })
    }

    fn at(&self, theta: &[f64]) -> Result<DenoiserParams> {
        if theta.len() != self.template.len() {
            return Err(Error::ShapeMismatch(format!(
                "theta has {} entries, model has {}",
                theta.len(),
                self.template.len()
            )));
        }
        let mut p = self.template.clone();
        p.theta.copy_from_slice(theta);
        Ok(p)
    }
}

impl Objective for DenoiserObjective<'_> {
    fn dim(&self) -> usize {
        self.template.len()
    }
    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(losses::evaluate(&self.at(theta)?, &self.spec, &self.draws, self.schedule, false)?.0.value)
    }
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(losses::evaluate(&self.at(theta)?, &self.spec, &self.draws, self.schedule, true)?
            .1
            .expect("gradient requested"))
    }
}

/// Wraps an objective and scales its analytic gradient; used to confirm that
/// the checking harness notices a wrong gradient.
#[derive(Debug, Clone)]
pub struct ScaledGradient<O> {
    pub inner: O,
    pub factor: f64,
}

impl<O: Objective> Objective for ScaledGradient<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&self, theta: &[f64]) -> Result<f64> {
        self.inner.value(theta)
    }
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inner.gradient(theta)?.into_iter().map(|g| g * self.factor).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coordinates {
    All,
    Sample { count: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub h: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central-difference gradient check; passes iff the largest relative error is below `tol`.
pub fn grad_check<O: Objective + ?Sized>(
    objective: &O,
    theta: &[f64],
    h: f64,
    tol: f64,
    coords: Coordinates,
) -> Result<GradCheckReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let analytic = objective.gradient(theta)?;
    let indices: Vec<usize> = match coords {
        Coordinates::All => (0..theta.len()).collect(),
        Coordinates::Sample { count, seed } => {
            let mut idx = sample(&mut seeding::rng(seed), theta.len(), count.min(theta.len())).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport {
        checked: indices.len(),
        max_rel_error: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        h,
        tol,
        passed: false,
    };
    for i in indices {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = objective.value(&probe)?;
        probe[i] = orig - h;
        let minus = objective.value(&probe)?;
        probe[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite(format!("loss at perturbed coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if !(err <= report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

/// Gradients of the lower-level (prior) and upper-level (immunize) objectives.
pub trait BilevelObjective {
    fn dim(&self) -> usize;
    fn psi(&self) -> &PsiIndex;
    /// Full-length gradient of the prior loss.
    fn prior_gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
    /// Full-length gradient of the immunization loss.
    fn immunize_gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// The denoiser's bilevel pair with shared, replayed randomness.
#[derive(Debug, Clone)]
pub struct DenoiserBilevel<'a> {
    template: &'a DenoiserParams,
    schedule: &'a NoiseSchedule,
    prior_spec: LossSpec,
    immunize_spec: LossSpec,
    prior_draws: LossDraws,
    immunize_draws: LossDraws,
}

impl<'a> DenoiserBilevel<'a> {
    /// Draws the safe and malicious randomness once; every gradient evaluation
    /// replays the same draws, so the exact and expanded paths see identical noise.
    pub fn new<R: Rng + ?Sized>(
        template: &'a DenoiserParams,
        safe: &ConditionedBatch,
        malicious: &ConditionedBatch,
        schedule: &'a NoiseSchedule,
        beta: f64,
        noise: NoiseOptions,
        rng: &mut R,
    ) -> Result<Self> {
        let prior_spec = LossSpec::new(LossSelector::Prior);
        let immunize_spec = LossSpec::immunize(beta, noise);
        let prior_draws = LossDraws::draw(template, &prior_spec, safe, schedule, rng)?;
        let immunize_draws = LossDraws::draw(template, &immunize_spec, malicious, schedule, rng)?;
        Ok(Self {
            template,
            schedule,
            prior_spec,
            immunize_spec,
            prior_draws,
            immunize_draws,
        })
    }

    pub fn prior_draws(&self) -> &LossDraws {
        &self.prior_draws
    }

    pub fn immunize_draws(&self) -> &LossDraws {
        &self.immunize_draws
    }

    fn grad(&self, spec: &LossSpec, draws: &LossDraws, theta: &[f64]) -> Result<Vec<f64>> {
        let mut p = self.template.clone();
        p.theta.copy_from_slice(theta);
        let (loss, g) = losses::evaluate(&p, spec, draws, self.schedule, true)?;
        let g = g.expect("gradient requested");
        if !loss.value.is_finite() || !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{} gradient", spec.selector.name())));
        }
        Ok(g)
    }
}

impl BilevelObjective for DenoiserBilevel<'_> {
    fn dim(&self) -> usize {
        self.template.len()
    }
    fn psi(&self) -> &PsiIndex {
        &self.template.psi
    }
    fn prior_gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.grad(&self.prior_spec, &self.prior_draws, theta)
    }
    fn immunize_gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.grad(&self.immunize_spec, &self.immunize_draws, theta)
    }
}

/// Quadratic lower and upper objectives, whose gradients are affine.
#[derive(Debug, Clone)]
pub struct QuadraticBilevel {
    pub prior_hessian: Array2<f64>,
    pub prior_linear: Vec<f64>,
    pub immunize_hessian: Array2<f64>,
    pub immunize_linear: Vec<f64>,
    pub psi: PsiIndex,
}

impl QuadraticBilevel {
    /// Random symmetric positive-definite pair of dimension `dim`.
    pub fn random(dim: usize, psi: PsiIndex, seed: u64) -> Self {
        let mut rng = seeding::rng(seed);
        let spd = |rng: &mut seeding::Rng| {
            let m = Array2::from_shape_fn((dim, dim), |_| rng.random::<f64>() - 0.5);
            m.t().dot(&m) + Array2::<f64>::eye(dim)
        };
        let prior_hessian = spd(&mut rng);
        let immunize_hessian = spd(&mut rng);
        let prior_linear = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let immunize_linear = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        Self {
            prior_hessian,
            prior_linear,
            immunize_hessian,
            immunize_linear,
            psi,
        }
    }

    fn affine(h: &Array2<f64>, b: &[f64], theta: &[f64]) -> Vec<f64> {
        let x = ndarray::ArrayView1::from(theta);
        h.dot(&x).iter().zip(b).map(|(a, c)| a + c).collect()
    }
}

impl BilevelObjective for QuadraticBilevel {
    fn dim(&self) -> usize {
        self.prior_linear.len()
    }
    fn psi(&self) -> &PsiIndex {
        &self.psi
    }
    fn prior_gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(Self::affine(&self.prior_hessian, &self.prior_linear, theta))
    }
    fn immunize_gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(Self::affine(&self.immunize_hessian, &self.immunize_linear, theta))
    }
}

/// Finite-difference stencil for the curvature-vector product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HvpScheme {
    #[default]
    Central,
    Forward,
}

/// Direction along which the immunization gradient is differenced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HvpDirection {
    /// The full prior gradient, i.e. the actual inner-step displacement.
    #[default]
    Full,
    /// Only the conditioning coordinates of the prior gradient.
    PsiOnly,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Step used for the curvature-vector product: `1e-4 * (1 + ||psi||)`.
pub fn hvp_step(psi_values: &[f64]) -> f64 {
    1e-4 * (1.0 + norm(psi_values))
}

/// Conditioning rows of `Hess(L_I)(theta) * v`, matrix-free.
pub fn curvature_product<B: BilevelObjective + ?Sized>(
    objective: &B,
    theta: &[f64],
    v: &[f64],
    scheme: HvpScheme,
) -> Result<Vec<f64>> {
    let psi = objective.psi();
    let vn = norm(v);
    if vn == 0.0 {
        return Ok(vec![0.0; psi.len()]);
    }
    let h = hvp_step(&psi.gather(theta));
    let shifted = |sign: f64| -> Vec<f64> {
        theta
            .iter()
            .zip(v)
            .map(|(t, d)| t + sign * h * d / vn)
            .collect()
    };
    let plus = psi.gather(&objective.immunize_gradient(&shifted(1.0))?);
    let (base, denom) = match scheme {
        HvpScheme::Central => (psi.gather(&objective.immunize_gradient(&shifted(-1.0))?), 2.0 * h),
        HvpScheme::Forward => (psi.gather(&objective.immunize_gradient(theta)?), h),
    };
    Ok(plus
        .iter()
        .zip(&base)
        .map(|(p, b)| vn * (p - b) / denom)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorOptions {
    pub scheme: HvpScheme,
    pub direction: HvpDirection,
}

impl Default for TaylorOptions {
    fn default() -> Self {
        Self {
            scheme: HvpScheme::Central,
            direction: HvpDirection::Full,
        }
    }
}

/// `|| psi''_exact - psi''_approx ||` for one `(alpha_p, alpha_i)` pair.
pub fn taylor_residual<B: BilevelObjective + ?Sized>(
    objective: &B,
    theta: &[f64],
    alpha_p: f64,
    alpha_i: f64,
    opts: TaylorOptions,
) -> Result<f64> {
    if theta.len() != objective.dim() {
        return Err(Error::ShapeMismatch("theta length".into()));
    }
    let psi = objective.psi();
    let g_prior = objective.prior_gradient(theta)?;

    // exact: inner step on all of theta, then an outer step on psi at the new point
    let theta_inner: Vec<f64> = theta
        .iter()
        .zip(&g_prior)
        .map(|(t, g)| t - alpha_p * g)
        .collect();
    let g_imm_inner = psi.gather(&objective.immunize_gradient(&theta_inner)?);
    let exact: Vec<f64> = psi
        .gather(&theta_inner)
        .iter()
        .zip(&g_imm_inner)
        .map(|(p, g)| p - alpha_i * g)
        .collect();

    // expansion around theta
    let g_imm = psi.gather(&objective.immunize_gradient(theta)?);
    let direction = match opts.direction {
        HvpDirection::Full => g_prior.clone(),
        HvpDirection::PsiOnly => psi.scatter(&psi.gather(&g_prior), theta.len()),
    };
    let hv = curvature_product(objective, theta, &direction, opts.scheme)?;
    let approx: Vec<f64> = psi
        .gather(theta)
        .iter()
        .zip(psi.gather(&g_prior))
        .zip(&g_imm)
        .zip(&hv)
        .map(|(((p, gp), gi), c)| p - alpha_p * gp - alpha_i * gi + alpha_p * alpha_i * c)
        .collect();

    let r = exact
        .iter()
        .zip(&approx)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if !r.is_finite() {
        return Err(Error::NonFinite("taylor residual".into()));
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaylorStatus {
    /// Slope fitted over a residual curve above round-off.
    Fitted,
    /// Every residual sits at round-off; the expansion is exact and no slope is fitted.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorProbe {
    pub alpha_p_grid: Vec<f64>,
    pub alpha_i: f64,
    pub residual_norms: Vec<f64>,
    pub fitted_slope: Option<f64>,
    pub status: TaylorStatus,
}

/// Least-squares slope of `log r` against `log alpha_p`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Default sweep: five points from 1e-2 down to 1e-4.
pub fn default_alpha_grid() -> Vec<f64> {
    vec![1e-2, 3e-3, 1e-3, 3e-4, 1e-4]
}

/// Sweeps `alpha_p` over a strictly decreasing grid and fits the residual slope.
pub fn taylor_scaling<B: BilevelObjective + ?Sized>(
    objective: &B,
    theta: &[f64],
    grid: &[f64],
    alpha_i: f64,
    opts: TaylorOptions,
) -> Result<TaylorProbe> {
    if grid.len() < 4 {
        return Err(Error::InvalidArgument("alpha grid needs at least 4 points".into()));
    }
    if !grid.iter().all(|a| *a > 0.0) || !grid.windows(2).all(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument(
            "alpha grid must be positive and strictly decreasing".into(),
        ));
    }
    let residuals = grid
        .iter()
        .map(|&a| taylor_residual(objective, theta, a, alpha_i, opts))
        .collect::<Result<Vec<_>>>()?;
    if residuals.iter().all(|r| *r < RESIDUAL_NOISE_FLOOR) {
        return Ok(TaylorProbe {
            alpha_p_grid: grid.to_vec(),
            alpha_i,
            residual_norms: residuals,
            fitted_slope: None,
            status: TaylorStatus::Exact,
        });
    }
    if residuals.iter().any(|r| *r == 0.0) {
        return Err(Error::NonFinite(
            "residual underflowed to exactly zero on a non-quadratic objective".into(),
        ));
    }
    Ok(TaylorProbe {
        fitted_slope: Some(loglog_slope(grid, &residuals)),
        alpha_p_grid: grid.to_vec(),
        alpha_i,
        residual_norms: residuals,
        status: TaylorStatus::Fitted,
    })
}
