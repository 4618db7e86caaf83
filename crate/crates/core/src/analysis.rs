//! Path curvature, sample-set distances, transport costs, and finite-difference
//! gradient checks.
//!
//! Curvature of an interpolant `Y_t` between `X0` and `Y1` is
//!
//! ```text
//! C = E_{t, (X0, Y1)} ‖ Y1 − X0 − ∂_t Y_t ‖²
//! ```
//!
//! with `t` on a uniform grid inside `[t_min, 1 − t_min]`. It vanishes for
//! straight-line paths.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bridge::{BridgeWeights, ObjectiveKind};
use crate::error::{check_dim, Error, Result};
use crate::net::{backward, forward_batch, ArchSpec, NetConfig, RegressorParams};
use crate::problems::PairBatch;
use crate::sampler::{sample, EndpointPredictor, SamplerConfig};
use crate::schedule::{NoiseSchedule, ScheduleKind};

pub const CURVATURE_T_MIN: f64 = 1e-3;
pub const CURVATURE_GRID: usize = 256;
pub const CURVATURE_SAMPLES: usize = 4096;
/// Step of the central difference in `t`.
pub const CURVATURE_FD_STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`].
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureMethod {
    ClosedForm,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub schedule_id: String,
    pub mean: f64,
    /// `(t, E‖Y1 − X0 − ∂_t Y_t‖²)` at each grid time.
    pub profile: Vec<(f64, f64)>,
    pub method: CurvatureMethod,
    pub coupling: String,
}

/// A set of endpoint pairs for curvature evaluation. For diffusion baselines
/// `y1` plays the role of the Gaussian noise end `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub x0: Array2<f64>,
    pub y1: Array2<f64>,
    pub description: String,
}

impl Coupling {
    pub fn new(x0: Array2<f64>, y1: Array2<f64>, description: impl Into<String>) -> Result<Self> {
        check_dim("coupling rows", x0.nrows(), y1.nrows())?;
        check_dim("coupling width", x0.ncols(), y1.ncols())?;
        if x0.nrows() == 0 {
            return Err(Error::Config("coupling must contain at least one pair".into()));
        }
        Ok(Self {
            x0,
            y1,
            description: description.into(),
        })
    }

    /// Independent standard normals at both ends.
    pub fn standard_normal(n: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Array2::from_shape_simple_fn((n, dim), || rng.sample(StandardNormal));
        let y1 = Array2::from_shape_simple_fn((n, dim), || rng.sample(StandardNormal));
        Self::new(x0, y1, format!("independent N(0, I_{dim}) endpoints, {n} pairs, seed {seed}"))
    }

    pub fn from_pairs(batch: &PairBatch, description: impl Into<String>) -> Result<Self> {
        Self::new(batch.x0.clone(), batch.y1.clone(), description)
    }

    fn mean_sq(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        let total: f64 = self.x0.iter().zip(self.y1.iter()).map(|(&a, &b)| f(a, b)).sum();
        total / self.x0.nrows() as f64
    }
}

/// Paths between the two ends of a coupling.
#[derive(Debug, Clone)]
pub enum Interpolant {
    /// `(1 − t) X0 + t Y1`.
    Linear,
    /// Bridge posterior mean under a bridge schedule.
    BridgeMean(NoiseSchedule),
    /// `α_t X0 + σ_t Z` under a VP, sub-VP, or VE schedule.
    Diffusion(NoiseSchedule),
}

impl Interpolant {
    /// Scalar weights `(on X0, on Y1)` at time `t`.
    pub fn weights(&self, t: f64) -> Result<(f64, f64)> {
        match self {
            Self::Linear => Ok((1.0 - t, t)),
            Self::BridgeMean(s) => BridgeWeights::at(s, t).map(|w| (w.w0, w.w1)),
            Self::Diffusion(s) => s.vp_alpha_sigma(t),
        }
    }

    pub fn at(&self, t: f64, x0: &[f64], y1: &[f64]) -> Result<Vec<f64>> {
        let (a, b) = self.weights(t)?;
        Ok(x0.iter().zip(y1).map(|(x, y)| a * x + b * y).collect())
    }

    pub fn schedule_id(&self) -> String {
        match self {
            Self::Linear => "linear".into(),
            Self::BridgeMean(s) | Self::Diffusion(s) => s.id(),
        }
    }
}

/// `n` uniform times covering `[t_min, 1 − t_min]`.
pub fn curvature_grid(n: usize, t_min: f64) -> Result<Vec<f64>> {
    if n < 2 || !(0.0..0.5).contains(&t_min) {
        return Err(Error::Config(format!(
            "curvature grid needs at least 2 points and t_min in [0, 0.5), got {n} and {t_min}"
        )));
    }
    let span = 1.0 - 2.0 * t_min;
    Ok((0..n).map(|k| t_min + span * k as f64 / (n - 1) as f64).collect())
}

fn report(
    schedule_id: String,
    profile: Vec<(f64, f64)>,
    method: CurvatureMethod,
    coupling: &Coupling,
) -> Result<CurvatureReport> {
    let mean = profile.iter().map(|p| p.1).sum::<f64>() / profile.len() as f64;
    if !mean.is_finite() {
        return Err(Error::Config(format!("curvature of {schedule_id} is not finite")));
    }
    Ok(CurvatureReport {
        schedule_id,
        mean,
        profile,
        method,
        coupling: coupling.description.clone(),
    })
}

/// Curvature from central differences of `interpolant` in `t`.
pub fn curvature_numeric(interpolant: &Interpolant, coupling: &Coupling, grid: &[f64]) -> Result<CurvatureReport> {
    let h = CURVATURE_FD_STEP;
    let mut profile = Vec::with_capacity(grid.len());
    for &t in grid {
        if t - h < 0.0 || t + h > 1.0 {
            return Err(Error::Domain {
                what: "curvature time",
                value: t,
                domain: "[fd step, 1 - fd step]",
            });
        }
        let (a_hi, b_hi) = interpolant.weights(t + h)?;
        let (a_lo, b_lo) = interpolant.weights(t - h)?;
        let total: f64 = coupling
            .x0
            .iter()
            .zip(coupling.y1.iter())
            .map(|(&x, &y)| {
                let deriv = ((a_hi * x + b_hi * y) - (a_lo * x + b_lo * y)) / (2.0 * h);
                (y - x - deriv).powi(2)
            })
            .sum();
        let value = total / coupling.x0.nrows() as f64;
        if !value.is_finite() {
            return Err(Error::Config(format!("non-finite path derivative at t = {t}")));
        }
        profile.push((t, value));
    }
    report(interpolant.schedule_id(), profile, CurvatureMethod::FiniteDifference, coupling)
}

/// Alternative rate coefficient `2β σ σ̂ (σ + σ̂) / (σ² + σ̂²)²`, kept for comparison.
pub fn sb_rate_literal(s: &NoiseSchedule, t: f64) -> Result<f64> {
    let (s2, s2_hat) = s.variances_at(t)?;
    let (sd, sd_hat) = (s2.sqrt(), s2_hat.sqrt());
    Ok(2.0 * s.beta_at(t)? * sd * sd_hat * (sd + sd_hat) / (s2 + s2_hat).powi(2))
}

/// `E‖(1 − M_t)(Y1 − X0)‖²` with `M_t = β_t / (σ_t² + σ̂_t²)`, the exact
/// derivative of the bridge-mean weight on `Y1`. With `literal` the alternative
/// [`sb_rate_literal`] is used instead.
pub fn curvature_sb_closed_form(
    s: &NoiseSchedule,
    coupling: &Coupling,
    grid: &[f64],
    literal: bool,
) -> Result<CurvatureReport> {
    if !s.kind().is_bridge() {
        return Err(Error::UnsupportedKind {
            op: "bridge curvature",
            kind: s.kind().to_string(),
        });
    }
    let chord = coupling.mean_sq(|x, y| (y - x).powi(2));
    let mut profile = Vec::with_capacity(grid.len());
    for &t in grid {
        let m = if literal {
            sb_rate_literal(s, t)?
        } else {
            s.beta_at(t)? / s.total_variance()
        };
        profile.push((t, (1.0 - m).powi(2) * chord));
    }
    report(s.id(), profile, CurvatureMethod::ClosedForm, coupling)
}

/// `(dα/dt, dσ/dt)` of the VP path `α_t = exp(−a(1−t)²/4 − b(1−t)/2)`,
/// `σ_t = sqrt(1 − α_t²)`.
pub fn vp_derivatives(s: &NoiseSchedule, t: f64) -> Result<(f64, f64)> {
    let (alpha, sigma) = s.vp_alpha_sigma(t)?;
    let (a, b) = s.vp_coefficients();
    let d_alpha = alpha * (a * (1.0 - t) + b) / 2.0;
    if sigma <= 0.0 {
        return Err(Error::Singularity { t });
    }
    Ok((d_alpha, -alpha * d_alpha / sigma))
}

/// Alternative coefficients `(N_t, K_t)` with `N_t = ⅛[−2a(1−t)² − 4b(1−t)][a(1−t)+b]α_t`.
pub fn vp_derivatives_literal(s: &NoiseSchedule, t: f64) -> Result<(f64, f64)> {
    let (alpha, _) = s.vp_alpha_sigma(t)?;
    let (a, b) = s.vp_coefficients();
    let u = 1.0 - t;
    let n = (-2.0 * a * u * u - 4.0 * b * u) * (a * u + b) * alpha / 8.0;
    let k = -alpha / (1.0 - alpha * alpha).sqrt() * n;
    Ok((n, k))
}

/// Curvature of `α_t X0 + σ_t Z` in closed form. The deviation from the chord
/// is `(1 − σ')Z − (1 + α')X0`; its second moment is evaluated with the
/// coupling's own moments, so the cross term vanishes only in expectation.
///
/// With `literal`, the alternative `(1 + N_t)²E‖X0‖² + (1 + K_t)²·d` is evaluated
/// instead (population form, no cross term).
pub fn curvature_vp_closed_form(
    s: &NoiseSchedule,
    coupling: &Coupling,
    grid: &[f64],
    literal: bool,
) -> Result<CurvatureReport> {
    if s.kind() != ScheduleKind::Vp {
        return Err(Error::UnsupportedKind {
            op: "vp curvature",
            kind: s.kind().to_string(),
        });
    }
    let xx = coupling.mean_sq(|x, _| x * x);
    let zz = coupling.mean_sq(|_, z| z * z);
    let xz = coupling.mean_sq(|x, z| x * z);
    let d = coupling.x0.ncols() as f64;
    let mut profile = Vec::with_capacity(grid.len());
    for &t in grid {
        let value = if literal {
            let (n, k) = vp_derivatives_literal(s, t)?;
            (1.0 + n).powi(2) * xx + (1.0 + k).powi(2) * d
        } else {
            let (n, k) = vp_derivatives(s, t)?;
            let (p, q) = (1.0 + n, 1.0 - k);
            p * p * xx + q * q * zz - 2.0 * p * q * xz
        };
        profile.push((t, value));
    }
    report(s.id(), profile, CurvatureMethod::ClosedForm, coupling)
}

/// Mean of `‖a_i − b_j‖` over `i ≠ j` when `same`, else over all pairs.
fn mean_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, same: bool) -> f64 {
    let mut total = 0.0;
    for (i, ra) in a.rows().into_iter().enumerate() {
        for (j, rb) in b.rows().into_iter().enumerate() {
            if same && i == j {
                continue;
            }
            total += ra.iter().zip(rb).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        }
    }
    let (n, m) = (a.nrows() as f64, b.nrows() as f64);
    total / if same { n * (n - 1.0) } else { n * m }
}

/// Unbiased energy distance `2E‖a − b‖ − E‖a − a'‖ − E‖b − b'‖` with the
/// within-set terms taken over distinct pairs. Can be slightly negative.
pub fn energy_distance_unbiased(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Config("energy distance needs at least two samples per set".into()));
    }
    check_dim("energy distance width", a.ncols(), b.ncols())?;
    Ok(2.0 * mean_distance(a, b, false) - mean_distance(a, a, true) - mean_distance(b, b, true))
}

/// [`energy_distance_unbiased`] clamped at zero.
pub fn energy_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    energy_distance_unbiased(a, b).map(|v| v.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportCost {
    /// `mean ‖Y1 − X̂0(Y1)‖²` over sampled couplings.
    pub generated: f64,
    /// `mean ‖Y1 − X0‖²` over the data coupling.
    pub independent: f64,
}

impl TransportCost {
    pub fn ratio(&self) -> f64 {
        self.generated / self.independent
    }
}

/// Squared transport cost of the sampler's coupling against the data coupling.
pub fn transport_cost_check(
    cfg: &SamplerConfig,
    net: &dyn EndpointPredictor,
    s: &NoiseSchedule,
    test: &PairBatch,
) -> Result<TransportCost> {
    let run = sample(cfg, net, s, test.y1.view(), test.condition.as_ref().map(|c| c.view()), None)?;
    let cost = |x: &Array2<f64>| {
        x.iter().zip(test.y1.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / test.len().max(1) as f64
    };
    Ok(TransportCost {
        generated: cost(&run.x0_hat),
        independent: cost(&test.x0),
    })
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    if a == b {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 48)
}

/// `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares `grad` with central differences of the scalar `f` at `point`.
/// Returns the worst componentwise [`relative_error`].
pub fn finite_diff_check(f: &dyn Fn(&[f64]) -> f64, grad: &[f64], point: &[f64], step: f64) -> Result<f64> {
    check_dim("finite difference gradient", point.len(), grad.len())?;
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let x0 = x[i];
        if !(step > 0.0) || x0 + step == x0 || x0 - step == x0 {
            return Err(Error::Domain {
                what: "finite difference step",
                value: step,
                domain: "large enough to change every coordinate",
            });
        }
        x[i] = x0 + step;
        let up = f(&x);
        x[i] = x0 - step;
        let down = f(&x);
        x[i] = x0;
        worst = worst.max(relative_error(grad[i], (up - down) / (2.0 * step)));
    }
    Ok(worst)
}

/// One probed coordinate of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientProbe {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientProbe {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheckReport {
    pub probes: Vec<GradientProbe>,
    pub max_relative_error: f64,
}

/// Which coordinates a regressor gradient check visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeSelection {
    /// Every parameter.
    All,
    /// This many coordinates drawn uniformly over all parameters.
    Random(usize),
}

/// Randomized network and inputs for gradient checks: every tensor is filled
/// with uniform values so no gradient is trivially zero.
pub fn random_regressor(
    arch: ArchSpec,
    objective: ObjectiveKind,
    state_dim: usize,
    cond_dim: usize,
    seed: u64,
) -> Result<RegressorParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = RegressorParams::init(NetConfig::new(state_dim, cond_dim, objective, arch)?, &mut rng)?;
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
    }
    Ok(p)
}

/// Analytic parameter gradients of `L = Σ g ⊙ net(y, c, t)` against central
/// differences with step `step`, on a random batch.
pub fn regressor_gradient_check(
    params: &RegressorParams,
    batch: usize,
    selection: ProbeSelection,
    step: f64,
    seed: u64,
) -> Result<GradientCheckReport> {
    let cfg = params.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = Array2::from_shape_simple_fn((batch, cfg.state_dim), || rng.sample(StandardNormal));
    let cond = (cfg.cond_dim > 0)
        .then(|| Array2::from_shape_simple_fn((batch, cfg.cond_dim), || rng.sample(StandardNormal)));
    let times: Vec<f64> = (0..batch).map(|_| rng.random::<f64>()).collect();
    let weights = Array2::from_shape_simple_fn((batch, cfg.output_dim()), || rng.sample(StandardNormal));
    let cond_view = cond.as_ref().map(|c| c.view());

    let objective = |p: &RegressorParams| -> Result<f64> {
        let (out, _) = forward_batch(p, state.view(), cond_view, &times)?;
        Ok((&out * &weights).sum())
    };
    let (_, cache) = forward_batch(params, state.view(), cond_view, &times)?;
    let (grads, _) = backward(params, &cache, weights.view())?;
    let grad_tensors: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();

    let sizes: Vec<usize> = grad_tensors.iter().map(Vec::len).collect();
    let coords: Vec<(usize, usize)> = match selection {
        ProbeSelection::All => sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| (0..n).map(move |i| (k, i)))
            .collect(),
        ProbeSelection::Random(count) => {
            let total: usize = sizes.iter().sum();
            (0..count)
                .map(|_| {
                    let mut flat = rng.random_range(0..total);
                    let mut k = 0;
                    while flat >= sizes[k] {
                        flat -= sizes[k];
                        k += 1;
                    }
                    (k, flat)
                })
                .collect()
        }
    };

    let mut probe = params.clone();
    let mut probes = Vec::with_capacity(coords.len());
    for (k, i) in coords {
        let orig = probe.tensors()[k][i];
        probe.tensors_mut()[k][i] = orig + step;
        let up = objective(&probe)?;
        probe.tensors_mut()[k][i] = orig - step;
        let down = objective(&probe)?;
        probe.tensors_mut()[k][i] = orig;
        probes.push(GradientProbe {
            tensor: k,
            index: i,
            analytic: grad_tensors[k][i],
            numeric: (up - down) / (2.0 * step),
        });
    }
    let max_relative_error = probes.iter().map(GradientProbe::relative_error).fold(0.0, f64::max);
    Ok(GradientCheckReport {
        probes,
        max_relative_error,
    })
}
