//! Diffusion-rate schedules and their exact integrals.
//!
//! The bridge schedules ("sb" kinds) are defined by a rate curve `beta(t)` on
//! `[0, 1]`. Everything downstream depends only on the two integrals
//!
//! ```text
//! sigma2(t)     = ∫_0^t beta(τ) dτ
//! sigma2_hat(t) = ∫_t^1 beta(τ) dτ = total_variance - sigma2(t)
//! ```
//!
//! which are evaluated in closed form. For the quadratic-flip schedule `beta`
//! is a squared linear function on each half of the interval, so `sigma2` is
//! a piecewise cubic.
//!
//! The diffusion baselines (VP, sub-VP, VE) are not bridge schedules; they
//! only provide `(alpha_t, sigma_t)` interpolation coefficients for the
//! curvature comparisons in [`crate::analysis`].

use serde::{Deserialize, Serialize};

use crate::error::{check_unit_time, Error, Result};

/// Default `beta_0` for the quadratic-flip schedule.
pub const DEFAULT_BETA0: f64 = 1e-4;
/// Default `beta_{1/2}` for the quadratic-flip schedule.
pub const DEFAULT_BETA_HALF: f64 = 0.3;
/// Standard VP coefficients.
pub const VP_A: f64 = 19.9;
pub const VP_B: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    SbQuadraticFlip,
    SbConstant,
    Vp,
    SubVp,
    Ve,
}

impl ScheduleKind {
    pub fn is_bridge(self) -> bool {
        matches!(self, ScheduleKind::SbQuadraticFlip | ScheduleKind::SbConstant)
    }

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::SbQuadraticFlip => "sb-quadratic-flip",
            ScheduleKind::SbConstant => "sb-constant",
            ScheduleKind::Vp => "vp",
            ScheduleKind::SubVp => "sub-vp",
            ScheduleKind::Ve => "ve",
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An immutable rate schedule.
///
/// Construct with [`NoiseSchedule::quadratic_flip`], [`NoiseSchedule::constant`],
/// [`NoiseSchedule::vp`], [`NoiseSchedule::sub_vp`] or [`NoiseSchedule::ve`].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta0: f64,
    beta_half: f64,
    a: f64,
    b: f64,
    sigma_min: f64,
    ratio_r: f64,
    total_variance: f64,
    // 2.0 maps the half interval onto [0, 1] so that beta(1/2) = beta_half;
    // 1.0 reproduces the unscaled quadratic.
    arg_scale: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::quadratic_flip(DEFAULT_BETA0, DEFAULT_BETA_HALF).expect("default schedule is valid")
    }
}

fn check_rate(what: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            what,
            value: v,
            domain: "[0, inf)",
        })
    }
}

impl NoiseSchedule {
    /// Symmetric schedule: quadratic growth from `beta0` at `t = 0` to
    /// `beta_half` at `t = 1/2`, mirrored on `(1/2, 1]`.
    pub fn quadratic_flip(beta0: f64, beta_half: f64) -> Result<Self> {
        Self::quadratic_flip_with_scale(beta0, beta_half, 2.0)
    }

    /// Same curve family, but with the quadratic argument left unscaled, so
    /// that `beta(1/2) = ((sqrt(beta0) + sqrt(beta_half)) / 2)^2`.
    pub fn quadratic_flip_literal(beta0: f64, beta_half: f64) -> Result<Self> {
        Self::quadratic_flip_with_scale(beta0, beta_half, 1.0)
    }

    fn quadratic_flip_with_scale(beta0: f64, beta_half: f64, arg_scale: f64) -> Result<Self> {
        check_rate("beta0", beta0)?;
        check_rate("beta_half", beta_half)?;
        let mut s = Self {
            kind: ScheduleKind::SbQuadraticFlip,
            beta0,
            beta_half,
            a: 0.0,
            b: 0.0,
            sigma_min: 0.0,
            ratio_r: 0.0,
            total_variance: 0.0,
            arg_scale,
        };
        s.total_variance = 2.0 * s.half_integral(0.5);
        if s.total_variance <= 0.0 {
            return Err(Error::Domain {
                what: "total_variance",
                value: s.total_variance,
                domain: "(0, inf)",
            });
        }
        Ok(s)
    }

    /// Constant rate `beta`; the bridge mean becomes linear interpolation.
    pub fn constant(beta: f64) -> Result<Self> {
        check_rate("beta", beta)?;
        if beta == 0.0 {
            return Err(Error::Domain {
                what: "beta",
                value: beta,
                domain: "(0, inf)",
            });
        }
        Ok(Self {
            kind: ScheduleKind::SbConstant,
            beta0: beta,
            beta_half: beta,
            a: 0.0,
            b: 0.0,
            sigma_min: 0.0,
            ratio_r: 0.0,
            total_variance: beta,
            arg_scale: 2.0,
        })
    }

    pub fn vp(a: f64, b: f64) -> Result<Self> {
        Self::diffusion(ScheduleKind::Vp, a, b)
    }

    pub fn sub_vp(a: f64, b: f64) -> Result<Self> {
        Self::diffusion(ScheduleKind::SubVp, a, b)
    }

    fn diffusion(kind: ScheduleKind, a: f64, b: f64) -> Result<Self> {
        check_rate("a", a)?;
        check_rate("b", b)?;
        Ok(Self {
            kind,
            beta0: 0.0,
            beta_half: 0.0,
            a,
            b,
            sigma_min: 0.0,
            ratio_r: 0.0,
            total_variance: 0.0,
            arg_scale: 2.0,
        })
    }

    /// Variance-exploding schedule with `sigma_max = ratio_r * sigma_min`.
    pub fn ve(sigma_min: f64, ratio_r: f64) -> Result<Self> {
        check_rate("sigma_min", sigma_min)?;
        if !(ratio_r.is_finite() && ratio_r >= 1.0) {
            return Err(Error::Domain {
                what: "ratio_r",
                value: ratio_r,
                domain: "[1, inf)",
            });
        }
        Ok(Self {
            kind: ScheduleKind::Ve,
            beta0: 0.0,
            beta_half: 0.0,
            a: 0.0,
            b: 0.0,
            sigma_min,
            ratio_r,
            total_variance: 0.0,
            arg_scale: 2.0,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn beta_half(&self) -> f64 {
        self.beta_half
    }

    pub fn vp_coefficients(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn is_literal(&self) -> bool {
        self.kind == ScheduleKind::SbQuadraticFlip && self.arg_scale == 1.0
    }

    /// `∫_0^1 beta`. Zero for the diffusion baselines.
    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    /// Short identifier used in reports, e.g. `sb-quadratic-flip(0.0001,0.3)`.
    pub fn id(&self) -> String {
        match self.kind {
            ScheduleKind::SbQuadraticFlip if self.is_literal() => {
                format!("{}-literal({},{})", self.kind, self.beta0, self.beta_half)
            }
            ScheduleKind::SbQuadraticFlip => {
                format!("{}({},{})", self.kind, self.beta0, self.beta_half)
            }
            ScheduleKind::SbConstant => format!("{}({})", self.kind, self.beta0),
            ScheduleKind::Vp | ScheduleKind::SubVp => {
                format!("{}({},{})", self.kind, self.a, self.b)
            }
            ScheduleKind::Ve => format!("{}({},{})", self.kind, self.sigma_min, self.ratio_r),
        }
    }

    fn require_bridge(&self, op: &'static str) -> Result<()> {
        if self.kind.is_bridge() {
            Ok(())
        } else {
            Err(Error::UnsupportedKind {
                op,
                kind: self.kind.to_string(),
            })
        }
    }

    // Quadratic on the rising half, as a function of the scaled argument u.
    fn rising(&self, u: f64) -> f64 {
        let c0 = self.beta0.sqrt();
        let k = self.beta_half.sqrt() - c0;
        let r = k * u + c0;
        r * r
    }

    // ∫_0^t beta for t in [0, 1/2], expanded so that k -> 0 stays exact.
    fn half_integral(&self, t: f64) -> f64 {
        let c0 = self.beta0.sqrt();
        let k = self.beta_half.sqrt() - c0;
        let u = self.arg_scale * t;
        (self.beta0 * u + c0 * k * u * u + k * k * u * u * u / 3.0) / self.arg_scale
    }

    /// Rate `beta(t)`.
    pub fn beta_at(&self, t: f64) -> Result<f64> {
        check_unit_time("t", t)?;
        self.require_bridge("beta_at")?;
        Ok(match self.kind {
            ScheduleKind::SbConstant => self.beta0,
            _ => {
                let u = if t <= 0.5 { t } else { 1.0 - t };
                self.rising(self.arg_scale * u)
            }
        })
    }

    /// `(sigma2(t), sigma2_hat(t))`, computed so that `sigma2(0) = 0` and
    /// `sigma2_hat(1) = 0` hold exactly.
    pub fn variances_at(&self, t: f64) -> Result<(f64, f64)> {
        check_unit_time("t", t)?;
        self.require_bridge("sigma2_at")?;
        let total = self.total_variance;
        Ok(match self.kind {
            ScheduleKind::SbConstant => (self.beta0 * t, self.beta0 * (1.0 - t)),
            _ if t <= 0.5 => {
                let s2 = self.half_integral(t);
                (s2, total - s2)
            }
            _ => {
                let s2_hat = self.half_integral(1.0 - t);
                (total - s2_hat, s2_hat)
            }
        })
    }

    /// `σ_t² = ∫_0^t β`.
    pub fn sigma2_at(&self, t: f64) -> Result<f64> {
        self.variances_at(t).map(|(s2, _)| s2)
    }

    /// `σ̂_t² = ∫_t^1 β`.
    pub fn sigma2_hat_at(&self, t: f64) -> Result<f64> {
        self.variances_at(t).map(|(_, s2_hat)| s2_hat)
    }

    /// Variance accumulated between two times, `∫_{t_lo}^{t_hi} β`.
    pub fn alpha2_between(&self, t_lo: f64, t_hi: f64) -> Result<f64> {
        check_unit_time("t_lo", t_lo)?;
        check_unit_time("t_hi", t_hi)?;
        if t_lo > t_hi {
            return Err(Error::Domain {
                what: "t_lo",
                value: t_lo,
                domain: "[0, t_hi]",
            });
        }
        if t_lo == t_hi {
            return Ok(0.0);
        }
        let lo = self.sigma2_at(t_lo)?;
        let hi = self.sigma2_at(t_hi)?;
        Ok((hi - lo).max(0.0))
    }

    /// Variance of the bridge posterior at `t`, `σ²σ̂² / (σ² + σ̂²)`.
    pub fn posterior_variance_at(&self, t: f64) -> Result<f64> {
        let (s2, s2_hat) = self.variances_at(t)?;
        Ok(s2 * s2_hat / self.total_variance)
    }

    /// Interpolation coefficients `(alpha_t, sigma_t)` of the diffusion
    /// baselines: `Y_t = alpha_t X_0 + sigma_t Z`.
    pub fn vp_alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        check_unit_time("t", t)?;
        match self.kind {
            ScheduleKind::Vp => {
                let alpha = self.vp_alpha(t);
                Ok((alpha, (1.0 - alpha * alpha).max(0.0).sqrt()))
            }
            ScheduleKind::SubVp => {
                let alpha = self.vp_alpha(t);
                Ok((alpha, 1.0 - alpha * alpha))
            }
            ScheduleKind::Ve => {
                let grow = self.ratio_r.powf(2.0 * (1.0 - t)) - 1.0;
                Ok((1.0, self.sigma_min * grow.max(0.0).sqrt()))
            }
            _ => Err(Error::UnsupportedKind {
                op: "vp_alpha_sigma",
                kind: self.kind.to_string(),
            }),
        }
    }

    fn vp_alpha(&self, t: f64) -> f64 {
        let s = 1.0 - t;
        (-0.25 * self.a * s * s - 0.5 * self.b * s).exp()
    }
}

/// Serializable description of a schedule, as it appears in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleSpec {
    SbQuadraticFlip {
        #[serde(default = "default_beta0")]
        beta0: f64,
        #[serde(default = "default_beta_half")]
        beta_half: f64,
        #[serde(default)]
        literal_beta: bool,
    },
    SbConstant {
        beta: f64,
    },
    Vp {
        #[serde(default = "default_vp_a")]
        a: f64,
        #[serde(default = "default_vp_b")]
        b: f64,
    },
    SubVp {
        #[serde(default = "default_vp_a")]
        a: f64,
        #[serde(default = "default_vp_b")]
        b: f64,
    },
    Ve {
        sigma_min: f64,
        ratio_r: f64,
    },
}

fn default_beta0() -> f64 {
    DEFAULT_BETA0
}
fn default_beta_half() -> f64 {
    DEFAULT_BETA_HALF
}
fn default_vp_a() -> f64 {
    VP_A
}
fn default_vp_b() -> f64 {
    VP_B
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::SbQuadraticFlip {
            beta0: DEFAULT_BETA0,
            beta_half: DEFAULT_BETA_HALF,
            literal_beta: false,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match *self {
            ScheduleSpec::SbQuadraticFlip {
                beta0,
                beta_half,
                literal_beta: false,
            } => NoiseSchedule::quadratic_flip(beta0, beta_half),
            ScheduleSpec::SbQuadraticFlip {
                beta0,
                beta_half,
                literal_beta: true,
            } => NoiseSchedule::quadratic_flip_literal(beta0, beta_half),
            ScheduleSpec::SbConstant { beta } => NoiseSchedule::constant(beta),
            ScheduleSpec::Vp { a, b } => NoiseSchedule::vp(a, b),
            ScheduleSpec::SubVp { a, b } => NoiseSchedule::sub_vp(a, b),
            ScheduleSpec::Ve { sigma_min, ratio_r } => NoiseSchedule::ve(sigma_min, ratio_r),
        }
    }
}

/// Strictly increasing time nodes from exactly 0 to exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    /// `n_steps` equal intervals, `n_steps + 1` nodes.
    pub fn uniform(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        let n = n_steps as f64;
        let nodes = (0..=n_steps).map(|k| k as f64 / n).collect();
        Ok(Self { nodes })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 || nodes[0] != 0.0 || nodes[nodes.len() - 1] != 1.0 {
            return Err(Error::Config(
                "time grid must start at exactly 0 and end at exactly 1".into(),
            ));
        }
        if nodes.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("time grid must be strictly increasing".into()));
        }
        Ok(Self { nodes })
    }

    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Intervals `(t_hi, t_lo)` walked from `t = 1` down to `t = 0`.
    pub fn backward_intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.windows(2).rev().map(|w| (w[1], w[0]))
    }
}
