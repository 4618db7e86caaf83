//! Closed-form bridge algebra.
//!
//! With zero drift and diffusion `sqrt(beta_t)`, the state at time `t` given
//! both endpoints is Gaussian:
//!
//! ```text
//! mean     = (σ̂²·X0 + σ²·Y1) / (σ² + σ̂²)
//! variance = σ²·σ̂² / (σ² + σ̂²)          (isotropic)
//! ```
//!
//! The backward transition from `t_next` to `t_n < t_next` given an endpoint
//! estimate has the same form with `σ̂²` replaced by the variance accumulated
//! over the step. Composing transitions reproduces the marginal above, which
//! is what makes simulation-free training and few-step sampling consistent.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_unit_time, Error, Result};
use crate::schedule::NoiseSchedule;

/// Default lower clamp on `t` when evaluating the velocity.
pub const DEFAULT_T_MIN: f64 = 1e-5;

/// One coupled draw `(X0, Y1)` plus optional side information.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointPair {
    pub x0: Vec<f64>,
    pub y1: Vec<f64>,
    pub condition: Option<Vec<f64>>,
}

impl EndpointPair {
    pub fn new(x0: Vec<f64>, y1: Vec<f64>) -> Result<Self> {
        check_dim("endpoint pair", x0.len(), y1.len())?;
        Ok(Self {
            x0,
            y1,
            condition: None,
        })
    }

    pub fn with_condition(mut self, condition: Vec<f64>) -> Self {
        self.condition = Some(condition);
        self
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }
}

/// Isotropic Gaussian `N(mean, variance · I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgePosterior {
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// A point drawn from a [`BridgePosterior`], keeping the standard normal draw
/// that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSample {
    pub y_t: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub t: f64,
}

/// Regression target of the endpoint network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// Predict `X0` directly.
    #[default]
    Endpoint,
    /// Predict `Y1 - X0`.
    BridgeLength,
    /// Predict `Y_t - X0`.
    PosteriorLength,
    /// Predict `[X0, ε]`, twice the state width.
    EndpointWithScore,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 4] = [
        ObjectiveKind::Endpoint,
        ObjectiveKind::BridgeLength,
        ObjectiveKind::PosteriorLength,
        ObjectiveKind::EndpointWithScore,
    ];

    pub fn output_width(self, state_dim: usize) -> usize {
        match self {
            ObjectiveKind::EndpointWithScore => 2 * state_dim,
            _ => state_dim,
        }
    }

    /// The score variant regresses the Gaussian draw, which does not exist
    /// for deterministic bridge samples.
    pub fn needs_noise(self) -> bool {
        self == ObjectiveKind::EndpointWithScore
    }

    pub fn code(self) -> u8 {
        match self {
            ObjectiveKind::Endpoint => 0,
            ObjectiveKind::BridgeLength => 1,
            ObjectiveKind::PosteriorLength => 2,
            ObjectiveKind::EndpointWithScore => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Endpoint => "endpoint",
            ObjectiveKind::BridgeLength => "bridge-length",
            ObjectiveKind::PosteriorLength => "posterior-length",
            ObjectiveKind::EndpointWithScore => "endpoint-with-score",
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Interpolation weights of the bridge at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeWeights {
    /// Weight on `X0`, `σ̂² / (σ² + σ̂²)`.
    pub w0: f64,
    /// Weight on `Y1`, `σ² / (σ² + σ̂²)`.
    pub w1: f64,
    pub variance: f64,
}

impl BridgeWeights {
    pub fn at(s: &NoiseSchedule, t: f64) -> Result<Self> {
        let (s2, s2_hat) = s.variances_at(t)?;
        let total = s.total_variance();
        Ok(Self {
            w0: s2_hat / total,
            w1: s2 / total,
            variance: s2 * s2_hat / total,
        })
    }

    pub fn mean(&self, x0: &[f64], y1: &[f64]) -> Vec<f64> {
        x0.iter()
            .zip(y1)
            .map(|(&a, &b)| self.w0 * a + self.w1 * b)
            .collect()
    }
}

/// `q(Y_t | X0, Y1)`.
pub fn posterior_given_endpoints(
    s: &NoiseSchedule,
    pair: &EndpointPair,
    t: f64,
) -> Result<BridgePosterior> {
    check_dim("endpoint pair", pair.x0.len(), pair.y1.len())?;
    let w = BridgeWeights::at(s, t)?;
    Ok(BridgePosterior {
        mean: w.mean(&pair.x0, &pair.y1),
        variance: w.variance,
    })
}

/// `y_t = mean + sqrt(variance) · noise`. `noise` must be a standard normal
/// draw supplied by the caller.
pub fn sample_bridge_point(post: &BridgePosterior, noise: &[f64], t: f64) -> Result<BridgeSample> {
    check_unit_time("t", t)?;
    check_dim("bridge noise", post.mean.len(), noise.len())?;
    let sd = post.variance.sqrt();
    let y_t = post
        .mean
        .iter()
        .zip(noise)
        .map(|(&m, &z)| m + sd * z)
        .collect();
    Ok(BridgeSample {
        y_t,
        epsilon: noise.to_vec(),
        t,
    })
}

/// Deterministic interpolant; identical to the posterior mean.
pub fn ode_point(s: &NoiseSchedule, pair: &EndpointPair, t: f64) -> Result<Vec<f64>> {
    posterior_given_endpoints(s, pair, t).map(|p| p.mean)
}

/// Velocity `(β_t / σ_t²)(y_t − x0)`. Singular at `t = 0`; callers clamp to
/// `t >= t_min` (see [`DEFAULT_T_MIN`]).
pub fn velocity(s: &NoiseSchedule, x0: &[f64], y_t: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim("velocity", x0.len(), y_t.len())?;
    let beta = s.beta_at(t)?;
    let s2 = s.sigma2_at(t)?;
    if s2 <= 0.0 {
        return Err(Error::Singularity { t });
    }
    let rate = beta / s2;
    Ok(y_t.iter().zip(x0).map(|(&y, &x)| rate * (y - x)).collect())
}

/// Backward step `p(Y_{t_n} | X̂0, Y_{t_next})`.
pub fn transition_posterior(
    s: &NoiseSchedule,
    x0_hat: &[f64],
    y_next: &[f64],
    t_n: f64,
    t_next: f64,
) -> Result<BridgePosterior> {
    check_dim("transition", x0_hat.len(), y_next.len())?;
    let (w_x0, w_next, variance) = transition_weights(s, t_n, t_next)?;
    let mean = x0_hat
        .iter()
        .zip(y_next)
        .map(|(&x, &y)| w_x0 * x + w_next * y)
        .collect();
    Ok(BridgePosterior { mean, variance })
}

/// Weights `(on X̂0, on Y_next, variance)` of the backward transition.
pub fn transition_weights(s: &NoiseSchedule, t_n: f64, t_next: f64) -> Result<(f64, f64, f64)> {
    check_unit_time("t_n", t_n)?;
    check_unit_time("t_next", t_next)?;
    if t_n >= t_next {
        return Err(Error::Domain {
            what: "t_n",
            value: t_n,
            domain: "[0, t_next)",
        });
    }
    let alpha2 = s.alpha2_between(t_n, t_next)?;
    let s2 = s.sigma2_at(t_n)?;
    let denom = alpha2 + s2;
    if denom <= 0.0 {
        // Zero rate over [0, t_next]: the state is still pinned at X0.
        return Ok((1.0, 0.0, 0.0));
    }
    Ok((alpha2 / denom, s2 / denom, alpha2 * s2 / denom))
}

/// The vector the regressor is trained to output.
pub fn objective_target(
    kind: ObjectiveKind,
    sample: &BridgeSample,
    pair: &EndpointPair,
) -> Result<Vec<f64>> {
    let d = pair.dim();
    check_dim("objective target (y1)", d, pair.y1.len())?;
    check_dim("objective target (y_t)", d, sample.y_t.len())?;
    Ok(match kind {
        ObjectiveKind::Endpoint => pair.x0.clone(),
        ObjectiveKind::BridgeLength => pair.y1.iter().zip(&pair.x0).map(|(y, x)| y - x).collect(),
        ObjectiveKind::PosteriorLength => {
            sample.y_t.iter().zip(&pair.x0).map(|(y, x)| y - x).collect()
        }
        ObjectiveKind::EndpointWithScore => {
            check_dim("objective target (epsilon)", d, sample.epsilon.len())?;
            let mut v = Vec::with_capacity(2 * d);
            v.extend_from_slice(&pair.x0);
            v.extend_from_slice(&sample.epsilon);
            v
        }
    })
}

/// Recover the endpoint estimate from a network output. Inverse of
/// [`objective_target`]; the ε half of the score objective is ignored.
pub fn endpoint_from_prediction(
    kind: ObjectiveKind,
    pred: &[f64],
    y_t: &[f64],
    y1: &[f64],
) -> Result<Vec<f64>> {
    let d = y_t.len();
    check_dim("endpoint recovery (y1)", d, y1.len())?;
    check_dim("endpoint recovery (prediction)", kind.output_width(d), pred.len())?;
    Ok(match kind {
        ObjectiveKind::Endpoint => pred.to_vec(),
        ObjectiveKind::BridgeLength => y1.iter().zip(pred).map(|(y, p)| y - p).collect(),
        ObjectiveKind::PosteriorLength => y_t.iter().zip(pred).map(|(y, p)| y - p).collect(),
        ObjectiveKind::EndpointWithScore => pred[..d].to_vec(),
    })
}
