//! Backward generation from `Y1` to an endpoint estimate.
//!
//! Every sampler walks the grid `linspace(1, 0, n_steps + 1)`. At each node it
//! predicts the endpoint `X̂0` from the current state and then moves to the
//! next node:
//!
//! * `euler-sde` draws from the Gaussian backward transition;
//! * `ode` re-interpolates deterministically between `X̂0` and the implied `Y1`;
//! * `heun` averages the prediction with a second one taken on a probe state
//!   `Δt` closer to `Y1`, then draws like `euler-sde`;
//! * `euler-sde-guided` pulls `X̂0` toward data consistency with known linear
//!   operators before drawing.
//!
//! The last transition lands on `t = 0` with zero variance, so every sampler
//! returns the last (possibly corrected) endpoint estimate exactly.
//!
//! Chains are processed as a batch: row `i` of every array belongs to chain `i`.

use ndarray::{Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bridge::{endpoint_from_prediction, transition_weights, BridgeWeights};
use crate::error::{check_dim, Error, Result};
use crate::net::{predict_batch, RegressorParams};
use crate::problems::LinearOperator;
use crate::schedule::{NoiseSchedule, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMethod {
    #[default]
    EulerSde,
    Ode,
    Heun,
    EulerSdeGuided,
}

impl SamplerMethod {
    pub fn default_steps(self) -> usize {
        match self {
            Self::Ode => 1,
            Self::Heun => 4,
            Self::EulerSde | Self::EulerSdeGuided => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::EulerSde => "euler-sde",
            Self::Ode => "ode",
            Self::Heun => "heun",
            Self::EulerSdeGuided => "euler-sde-guided",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    /// Defaults to [`SamplerMethod::default_steps`].
    pub n_steps: Option<usize>,
    pub guidance_rate: f64,
    pub seed: u64,
    pub record_trajectory: bool,
    /// Replace every Gaussian draw by zero.
    pub zero_noise: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: SamplerMethod::EulerSde,
            n_steps: None,
            guidance_rate: 0.0,
            seed: 0,
            record_trajectory: false,
            zero_noise: false,
        }
    }
}

impl SamplerConfig {
    pub fn new(method: SamplerMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn with_steps(mut self, n: usize) -> Self {
        self.n_steps = Some(n);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn steps(&self) -> usize {
        self.n_steps.unwrap_or_else(|| self.method.default_steps())
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps() == 0 {
            return Err(Error::Config("sampler n_steps must be at least 1".into()));
        }
        if !(self.guidance_rate.is_finite() && self.guidance_rate >= 0.0) {
            return Err(Error::Config(format!(
                "guidance rate must be nonnegative, got {}",
                self.guidance_rate
            )));
        }
        Ok(())
    }
}

/// Anything that maps bridge states at one time to endpoint estimates.
pub trait EndpointPredictor: Sync {
    /// `y1` is the chain's starting state, needed by objectives that predict
    /// a displacement from it.
    fn predict_endpoint(
        &self,
        y_t: ArrayView2<'_, f64>,
        cond: Option<ArrayView2<'_, f64>>,
        y1: ArrayView2<'_, f64>,
        t: f64,
    ) -> Result<Array2<f64>>;
}

impl EndpointPredictor for RegressorParams {
    fn predict_endpoint(
        &self,
        y_t: ArrayView2<'_, f64>,
        cond: Option<ArrayView2<'_, f64>>,
        y1: ArrayView2<'_, f64>,
        t: f64,
    ) -> Result<Array2<f64>> {
        let times = vec![t; y_t.nrows()];
        let pred = predict_batch(self, y_t, cond, &times)?;
        let objective = self.objective();
        let mut out = Array2::zeros(y_t.raw_dim());
        for i in 0..y_t.nrows() {
            let x = endpoint_from_prediction(
                objective,
                pred.row(i).as_slice().expect("standard layout"),
                &y_t.row(i).to_vec(),
                &y1.row(i).to_vec(),
            )?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&x));
        }
        Ok(out)
    }
}

/// Returns the true endpoints regardless of the state; isolates sampler
/// correctness from learning quality.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePredictor {
    pub x0: Array2<f64>,
}

impl EndpointPredictor for OraclePredictor {
    fn predict_endpoint(
        &self,
        y_t: ArrayView2<'_, f64>,
        _: Option<ArrayView2<'_, f64>>,
        _: ArrayView2<'_, f64>,
        _: f64,
    ) -> Result<Array2<f64>> {
        check_dim("oracle rows", self.x0.nrows(), y_t.nrows())?;
        check_dim("oracle width", self.x0.ncols(), y_t.ncols())?;
        Ok(self.x0.clone())
    }
}

/// Predicts the same vector for every chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPredictor {
    pub value: Vec<f64>,
}

impl EndpointPredictor for ConstantPredictor {
    fn predict_endpoint(
        &self,
        y_t: ArrayView2<'_, f64>,
        _: Option<ArrayView2<'_, f64>>,
        _: ArrayView2<'_, f64>,
        _: f64,
    ) -> Result<Array2<f64>> {
        check_dim("constant prediction width", self.value.len(), y_t.ncols())?;
        Ok(Array2::from_shape_fn(y_t.raw_dim(), |(_, j)| self.value[j]))
    }
}

/// Exact posterior mean `E[X0 | Y_t]` for `X0 ~ N(0, prior_var·I)` and
/// `Y1 = X0 + N(0, obs_var·I)` with `Y_t` drawn from the bridge posterior.
///
/// Since the bridge weights sum to one, `Y_t = X0 + N(0, τ²)` with
/// `τ² = w1²·obs_var + variance`, so the posterior mean shrinks `Y_t` by
/// `prior_var / (prior_var + τ²)`.
#[derive(Debug, Clone)]
pub struct GaussianPosteriorMean {
    pub schedule: NoiseSchedule,
    pub prior_var: f64,
    pub obs_var: f64,
}

impl GaussianPosteriorMean {
    pub fn shrinkage(&self, t: f64) -> Result<f64> {
        let w = BridgeWeights::at(&self.schedule, t)?;
        let tau2 = w.w1 * w.w1 * self.obs_var + w.variance;
        Ok(self.prior_var / (self.prior_var + tau2))
    }
}

impl EndpointPredictor for GaussianPosteriorMean {
    fn predict_endpoint(
        &self,
        y_t: ArrayView2<'_, f64>,
        _: Option<ArrayView2<'_, f64>>,
        _: ArrayView2<'_, f64>,
        t: f64,
    ) -> Result<Array2<f64>> {
        let k = self.shrinkage(t)?;
        Ok(y_t.mapv(|v| k * v))
    }
}

/// Known forward operators for data-consistency guidance.
#[derive(Debug, Clone, Copy)]
pub struct Guidance<'a> {
    pub degrade: &'a LinearOperator,
    /// Operator producing the condition, used only when a condition is given.
    pub side: Option<&'a LinearOperator>,
}

/// States visited by a batch of chains.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    /// Grid nodes from 1 down to 0.
    pub times: Vec<f64>,
    /// State at each node (empty unless recording was requested).
    pub states: Vec<Array2<f64>>,
    /// Endpoint estimate used at each step (empty unless recording).
    pub endpoints: Vec<Array2<f64>>,
    pub warnings: Vec<String>,
}

impl Trajectory {
    /// `(t, state)` pairs of one chain.
    pub fn chain(&self, i: usize) -> Vec<(f64, Vec<f64>)> {
        self.times
            .iter()
            .zip(&self.states)
            .map(|(&t, s)| (t, s.row(i).to_vec()))
            .collect()
    }
}

/// Output of a sampler run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub x0_hat: Array2<f64>,
    pub trajectory: Trajectory,
}

/// `X̃0 = X̂0 − ψ·2·[A1ᵀ(A1X̂0 − y1) + A2ᵀ(A2X̂0 − c)]`, row by row.
pub fn guidance_step(
    x0_hat: ArrayView2<'_, f64>,
    y1: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
    guide: Guidance<'_>,
    rate: f64,
) -> Result<Array2<f64>> {
    let mut out = x0_hat.to_owned();
    for i in 0..x0_hat.nrows() {
        let x = x0_hat.row(i).to_vec();
        let mut grad = residual_gradient(guide.degrade, &x, &y1.row(i).to_vec())?;
        if let (Some(a2), Some(c)) = (guide.side, cond) {
            let g2 = residual_gradient(a2, &x, &c.row(i).to_vec())?;
            grad.iter_mut().zip(g2).for_each(|(g, h)| *g += h);
        }
        for (o, g) in out.row_mut(i).iter_mut().zip(grad) {
            *o -= rate * 2.0 * g;
        }
    }
    Ok(out)
}

fn residual_gradient(a: &LinearOperator, x: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    let mut r = a.apply(x)?;
    check_dim("guidance target", r.len(), target.len())?;
    r.iter_mut().zip(target).for_each(|(v, t)| *v -= t);
    a.adjoint(&r)
}

/// Mean over rows of `‖A x_i − y_i‖₂`.
pub fn mean_residual(a: &LinearOperator, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
    let mut total = 0.0;
    for (xr, yr) in x.rows().into_iter().zip(y.rows()) {
        let ax = a.apply(&xr.to_vec())?;
        total += ax.iter().zip(yr).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    }
    Ok(total / x.nrows().max(1) as f64)
}

struct Chains<'a> {
    y1: ArrayView2<'a, f64>,
    cond: Option<ArrayView2<'a, f64>>,
}

/// `w_x · x + w_y · y + sd · z`, elementwise.
fn combine(w_x: f64, x: &Array2<f64>, w_y: f64, y: &Array2<f64>, sd: f64, z: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    Zip::from(&mut out)
        .and(x)
        .and(y)
        .and(z)
        .for_each(|o, &a, &b, &n| *o = w_x * a + w_y * b + sd * n);
    out
}

fn run(
    cfg: &SamplerConfig,
    net: &dyn EndpointPredictor,
    s: &NoiseSchedule,
    chains: Chains<'_>,
    guide: Option<Guidance<'_>>,
) -> Result<SampleRun> {
    cfg.validate()?;
    if !s.kind().is_bridge() {
        return Err(Error::UnsupportedKind {
            op: "bridge sampling",
            kind: s.kind().to_string(),
        });
    }
    let y1 = chains.y1;
    if let Some(c) = chains.cond {
        check_dim("condition rows", y1.nrows(), c.nrows())?;
    }
    if y1.iter().any(|v| !v.is_finite()) {
        return Err(Error::SamplerDivergence { step: 0 });
    }
    let n_steps = cfg.steps();
    let mut nodes = TimeGrid::uniform(n_steps)?.nodes().to_vec();
    nodes.reverse();
    let dt = 1.0 / n_steps as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut traj = Trajectory {
        times: nodes.clone(),
        ..Trajectory::default()
    };
    let mut y = y1.to_owned();
    if cfg.record_trajectory {
        traj.states.push(y.clone());
    }
    let mut warned = false;

    for step in 0..n_steps {
        let (t_cur, t_next) = (nodes[step], nodes[step + 1]);
        let mut x_hat = net.predict_endpoint(y.view(), chains.cond, y1, t_cur)?;
        match cfg.method {
            SamplerMethod::Ode => {
                let here = BridgeWeights::at(s, t_cur)?;
                let there = BridgeWeights::at(s, t_next)?;
                // The state fixes the implied Y1 given X̂0: y = w0·X̂0 + w1·Y1.
                let keep = if here.w1 > 0.0 { there.w1 / here.w1 } else { 0.0 };
                let zeros = Array2::zeros(y.raw_dim());
                y = combine(there.w0 - keep * here.w0, &x_hat, keep, &y, 0.0, &zeros);
            }
            _ => {
                if cfg.method == SamplerMethod::Heun && t_next > 0.0 {
                    let t_probe = (t_cur + dt).min(1.0);
                    let w = BridgeWeights::at(s, t_probe)?;
                    let zeros = Array2::zeros(y.raw_dim());
                    let probe = combine(w.w0, &x_hat, w.w1, &y1.to_owned(), 0.0, &zeros);
                    let second = net.predict_endpoint(probe.view(), chains.cond, y1, t_probe)?;
                    x_hat = (&x_hat + &second) * 0.5;
                }
                if cfg.method == SamplerMethod::EulerSdeGuided && cfg.guidance_rate > 0.0 {
                    let g = guide.ok_or_else(|| {
                        Error::Config("guided sampling needs a degradation operator".into())
                    })?;
                    let before = mean_residual(g.degrade, x_hat.view(), y1)?;
                    x_hat = guidance_step(x_hat.view(), y1, chains.cond, g, cfg.guidance_rate)?;
                    let after = mean_residual(g.degrade, x_hat.view(), y1)?;
                    if !warned && before > 0.0 && after > 10.0 * before {
                        warned = true;
                        traj.warnings.push(format!(
                            "guidance grew the residual from {before:.3e} to {after:.3e} at step {step}; \
                             the guidance rate is too large"
                        ));
                    }
                }
                let (w_x, w_y, var) = transition_weights(s, t_next, t_cur)?;
                let z = if cfg.zero_noise {
                    Array2::zeros(y.raw_dim())
                } else {
                    Array2::from_shape_simple_fn(y.raw_dim(), || rng.sample(StandardNormal))
                };
                y = combine(w_x, &x_hat, w_y, &y, var.sqrt(), &z);
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplerDivergence { step });
        }
        if cfg.record_trajectory {
            traj.states.push(y.clone());
            traj.endpoints.push(x_hat);
        }
    }
    Ok(SampleRun { x0_hat: y, trajectory: traj })
}

/// Posterior (Euler) sampling with Gaussian backward transitions.
pub fn sample_sde(
    cfg: &SamplerConfig,
    net: &dyn EndpointPredictor,
    s: &NoiseSchedule,
    y1: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
) -> Result<SampleRun> {
    let cfg = SamplerConfig {
        method: SamplerMethod::EulerSde,
        ..cfg.clone()
    };
    run(&cfg, net, s, Chains { y1, cond }, None)
}

/// Deterministic predict-then-reinterpolate sampling.
pub fn sample_ode(
    cfg: &SamplerConfig,
    net: &dyn EndpointPredictor,
    s: &NoiseSchedule,
    y1: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
) -> Result<SampleRun> {
    let cfg = SamplerConfig {
        method: SamplerMethod::Ode,
        ..cfg.clone()
    };
    run(&cfg, net, s, Chains { y1, cond }, None)
}

/// Two-prediction sampling; the second prediction is taken on the bridge mean
/// at `t + Δt`.
pub fn sample_heun(
    cfg: &SamplerConfig,
    net: &dyn EndpointPredictor,
    s: &NoiseSchedule,
    y1: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
) -> Result<SampleRun> {
    let cfg = SamplerConfig {
        method: SamplerMethod::Heun,
        ..cfg.clone()
    };
    run(&cfg, net, s, Chains { y1, cond }, None)
}

/// Euler sampling with a data-consistency correction of every endpoint
/// estimate.
pub fn sample_guided(
    cfg: &SamplerConfig,
    net: &dyn EndpointPredictor,
    s: &NoiseSchedule,
    y1: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
    guide: Guidance<'_>,
) -> Result<SampleRun> {
    let d = y1.ncols();
    check_dim("guidance operator input", d, guide.degrade.input_dim())?;
    check_dim("guidance operator output", d, guide.degrade.output_dim())?;
    if let (Some(a2), Some(c)) = (guide.side, cond) {
        check_dim("side operator input", d, a2.input_dim())?;
        check_dim("side operator output", c.ncols(), a2.output_dim())?;
    }
    let cfg = SamplerConfig {
        method: SamplerMethod::EulerSdeGuided,
        ..cfg.clone()
    };
    run(&cfg, net, s, Chains { y1, cond }, Some(guide))
}

/// Dispatches on `cfg.method`.
pub fn sample(
    cfg: &SamplerConfig,
    net: &dyn EndpointPredictor,
    s: &NoiseSchedule,
    y1: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
    guide: Option<Guidance<'_>>,
) -> Result<SampleRun> {
    match (cfg.method, guide) {
        (SamplerMethod::EulerSdeGuided, Some(g)) => sample_guided(cfg, net, s, y1, cond, g),
        (SamplerMethod::EulerSdeGuided, None) if cfg.guidance_rate > 0.0 => {
            Err(Error::Config("guided sampling needs a degradation operator".into()))
        }
        _ => run(cfg, net, s, Chains { y1, cond }, guide),
    }
}
