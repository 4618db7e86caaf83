//! The endpoint regressor `s_θ(Y_t, c, t)`.
//!
//! A dense residual network. Each block has two residual branches:
//!
//! ```text
//! h1 = h  + α · scale ⊙ W_b( gate( film_t( W_a · norm(h) ) ) )
//! h2 = h1 + β · W_d( gate( W_c · norm(h1) ) )
//! ```
//!
//! where `film_t(x) = (1 + a_t) ⊙ x + b_t` with `[a_t, b_t]` an affine map of
//! the sinusoidal time embedding, `gate` multiplies the two halves of its
//! input, `norm` is a parameter-free row normalization, and `scale` is an
//! optional learned per-feature scaling. The output layer is zero-initialized
//! so an untrained network predicts zero.
//!
//! Gradients are computed by hand and checked against finite differences in
//! the test suite.

mod checkpoint;
mod layers;
mod optim;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::ObjectiveKind;
use crate::error::{check_dim, check_unit_time, Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, TrainingState};
pub use layers::{embed_time, embed_time_with, film_modulate, simple_gate, Dense, DEFAULT_TIME_FREQ_MAX};
pub use optim::{adam_step, adam_step_masked, AdamConfig, AdamState};

use layers::{embed_times, gate_rows, gate_rows_backward, layer_norm, layer_norm_backward};

/// Architecture hyper-parameters that do not depend on the problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub hidden: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub time_freq_max: f64,
    pub double_forward: bool,
    pub channel_scale: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            hidden: 128,
            depth: 4,
            time_dim: 64,
            time_freq_max: DEFAULT_TIME_FREQ_MAX,
            double_forward: false,
            channel_scale: true,
        }
    }
}

/// Full network description: architecture plus the problem-dependent widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub state_dim: usize,
    pub cond_dim: usize,
    pub objective: ObjectiveKind,
    pub arch: ArchSpec,
}

impl NetConfig {
    pub fn new(state_dim: usize, cond_dim: usize, objective: ObjectiveKind, arch: ArchSpec) -> Result<Self> {
        let cfg = Self {
            state_dim,
            cond_dim,
            objective,
            arch,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.cond_dim
    }

    pub fn output_dim(&self) -> usize {
        self.objective.output_width(self.state_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if self.state_dim == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        if a.hidden < 2 || !a.hidden.is_multiple_of(2) {
            return Err(Error::Config(format!("hidden width must be even and >= 2, got {}", a.hidden)));
        }
        if a.time_dim == 0 || !a.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time embedding dim must be even, got {}", a.time_dim)));
        }
        if !(a.time_freq_max.is_finite() && a.time_freq_max >= 1.0) {
            return Err(Error::Config("time_freq_max must be >= 1".into()));
        }
        if a.double_forward && self.output_dim() != self.state_dim {
            return Err(Error::Config(format!(
                "double forward feeds the prediction back as the state, which needs the \
                 endpoint objective (got {})",
                self.objective
            )));
        }
        if a.double_forward && self.objective != ObjectiveKind::Endpoint {
            return Err(Error::Config("double forward requires the endpoint objective".into()));
        }
        Ok(())
    }
}

/// One residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub inner: Dense,
    pub film: Dense,
    pub outer: Dense,
    pub channel_scale: Option<Array1<f64>>,
    pub alpha: Array1<f64>,
    pub ffn_in: Dense,
    pub ffn_out: Dense,
    pub beta: Array1<f64>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Weights of the regressor.
///
/// Mutable access goes through [`RegressorParams::tensors_mut`], which
/// invalidates outstanding [`ForwardCache`]s.
#[derive(Debug)]
pub struct RegressorParams {
    config: NetConfig,
    input: Dense,
    blocks: Vec<Block>,
    output: Dense,
    id: u64,
    generation: u64,
}

impl Clone for RegressorParams {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            input: self.input.clone(),
            blocks: self.blocks.clone(),
            output: self.output.clone(),
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl PartialEq for RegressorParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.input == other.input
            && self.blocks == other.blocks
            && self.output == other.output
    }
}

impl RegressorParams {
    /// Fan-in scaled random weights with a zero output layer.
    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let a = &config.arch;
        let h = a.hidden;
        let input = Dense::kaiming(config.input_dim(), h, 1.0, rng);
        let blocks = (0..a.depth)
            .map(|_| Block {
                inner: Dense::kaiming(h, h, 1.0, rng),
                film: Dense::kaiming(a.time_dim, 2 * h, 0.1, rng),
                outer: Dense::kaiming(h / 2, h, 1.0, rng),
                channel_scale: a.channel_scale.then(|| Array1::ones(h)),
                alpha: Array1::from_elem(1, 0.1),
                ffn_in: Dense::kaiming(h, h, 1.0, rng),
                ffn_out: Dense::kaiming(h / 2, h, 1.0, rng),
                beta: Array1::from_elem(1, 0.1),
            })
            .collect();
        let output = Dense::zeros(h, config.output_dim());
        Ok(Self {
            config,
            input,
            blocks,
            output,
            id: fresh_id(),
            generation: 0,
        })
    }

    /// All tensors zero; used for gradients and optimizer moments.
    pub fn zeros_like(other: &Self) -> Self {
        let mut z = other.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn objective(&self) -> ObjectiveKind {
        self.config.objective
    }

    pub fn input_layer(&self) -> &Dense {
        &self.input
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn output_layer(&self) -> &Dense {
        &self.output
    }

    /// Tensors in a fixed order; the same order as [`Self::tensors_mut`] and
    /// [`Self::tensor_shapes`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        fn dense<'a>(out: &mut Vec<&'a [f64]>, d: &'a Dense) {
            out.push(d.w.as_slice().expect("standard layout"));
            out.push(d.b.as_slice().expect("standard layout"));
        }
        let mut out = Vec::new();
        dense(&mut out, &self.input);
        for b in &self.blocks {
            dense(&mut out, &b.inner);
            dense(&mut out, &b.film);
            dense(&mut out, &b.outer);
            if let Some(scale) = &b.channel_scale {
                out.push(scale.as_slice().expect("standard layout"));
            }
            out.push(b.alpha.as_slice().expect("standard layout"));
            dense(&mut out, &b.ffn_in);
            dense(&mut out, &b.ffn_out);
            out.push(b.beta.as_slice().expect("standard layout"));
        }
        dense(&mut out, &self.output);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        fn dense<'a>(out: &mut Vec<&'a mut [f64]>, d: &'a mut Dense) {
            out.push(d.w.as_slice_mut().expect("standard layout"));
            out.push(d.b.as_slice_mut().expect("standard layout"));
        }
        self.generation += 1;
        let mut out = Vec::new();
        dense(&mut out, &mut self.input);
        for b in &mut self.blocks {
            dense(&mut out, &mut b.inner);
            dense(&mut out, &mut b.film);
            dense(&mut out, &mut b.outer);
            if let Some(scale) = &mut b.channel_scale {
                out.push(scale.as_slice_mut().expect("standard layout"));
            }
            out.push(b.alpha.as_slice_mut().expect("standard layout"));
            dense(&mut out, &mut b.ffn_in);
            dense(&mut out, &mut b.ffn_out);
            out.push(b.beta.as_slice_mut().expect("standard layout"));
        }
        dense(&mut out, &mut self.output);
        out
    }

    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        fn dense(out: &mut Vec<Vec<usize>>, d: &Dense) {
            out.push(d.w.shape().to_vec());
            out.push(d.b.shape().to_vec());
        }
        let mut out = Vec::new();
        dense(&mut out, &self.input);
        for b in &self.blocks {
            dense(&mut out, &b.inner);
            dense(&mut out, &b.film);
            dense(&mut out, &b.outer);
            if let Some(scale) = &b.channel_scale {
                out.push(scale.shape().to_vec());
            }
            out.push(b.alpha.shape().to_vec());
            dense(&mut out, &b.ffn_in);
            dense(&mut out, &b.ffn_out);
            out.push(b.beta.shape().to_vec());
        }
        dense(&mut out, &self.output);
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn stamp(&self) -> (u64, u64) {
        (self.id, self.generation)
    }
}

struct BlockCache {
    n1: Array2<f64>,
    inv1: Array1<f64>,
    u: Array2<f64>,
    film: Array2<f64>,
    v: Array2<f64>,
    g: Array2<f64>,
    z: Array2<f64>,
    n2: Array2<f64>,
    inv2: Array1<f64>,
    p: Array2<f64>,
    g2: Array2<f64>,
    z2: Array2<f64>,
}

struct PassCache {
    input: Array2<f64>,
    blocks: Vec<BlockCache>,
    last_hidden: Array2<f64>,
}

/// Intermediate values of one forward evaluation, consumed by [`backward`].
pub struct ForwardCache {
    stamp: (u64, u64),
    emb: Array2<f64>,
    passes: Vec<PassCache>,
    batch: usize,
}

impl std::fmt::Debug for ForwardCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardCache")
            .field("batch", &self.batch)
            .field("passes", &self.passes.len())
            .finish_non_exhaustive()
    }
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// Gradient of the loss with respect to the network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    pub state: Array2<f64>,
    pub condition: Option<Array2<f64>>,
}

fn check_finite(x: &Array2<f64>, layer: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { layer })
    }
}

fn forward_pass(p: &RegressorParams, input: Array2<f64>, emb: &Array2<f64>) -> Result<(Array2<f64>, PassCache)> {
    let hidden = p.config.arch.hidden;
    let mut h = p.input.forward(input.view());
    check_finite(&h, 0)?;
    let mut caches = Vec::with_capacity(p.blocks.len());
    for (k, b) in p.blocks.iter().enumerate() {
        let (n1, inv1) = layer_norm(&h);
        let u = b.inner.forward(n1.view());
        let film = b.film.forward(emb.view());
        let mut v = &u * &film.slice(s![.., ..hidden]) + &u;
        v += &film.slice(s![.., hidden..]);
        let g = gate_rows(&v);
        let z = b.outer.forward(g.view());
        let alpha = b.alpha[0];
        match &b.channel_scale {
            Some(scale) => Zip::from(h.rows_mut()).and(z.rows()).for_each(|mut hr, zr| {
                Zip::from(&mut hr).and(&zr).and(scale).for_each(|hv, &zv, &sv| *hv += alpha * sv * zv);
            }),
            None => h.scaled_add(alpha, &z),
        }
        let (n2, inv2) = layer_norm(&h);
        let pre = b.ffn_in.forward(n2.view());
        let g2 = gate_rows(&pre);
        let z2 = b.ffn_out.forward(g2.view());
        h.scaled_add(b.beta[0], &z2);
        check_finite(&h, k + 1)?;
        caches.push(BlockCache {
            n1,
            inv1,
            u,
            film,
            v,
            g,
            z,
            n2,
            inv2,
            p: pre,
            g2,
            z2,
        });
    }
    let out = p.output.forward(h.view());
    check_finite(&out, p.blocks.len() + 1)?;
    Ok((
        out,
        PassCache {
            input,
            blocks: caches,
            last_hidden: h,
        },
    ))
}

fn assemble_input(state: ArrayView2<'_, f64>, cond: Option<ArrayView2<'_, f64>>) -> Array2<f64> {
    match cond {
        Some(c) => concatenate(Axis(1), &[state, c]).expect("row counts checked"),
        None => state.to_owned(),
    }
}

/// Batched forward pass. Row `i` of `state` is evaluated at time `times[i]`.
pub fn forward_batch(
    p: &RegressorParams,
    state: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
    times: &[f64],
) -> Result<(Array2<f64>, ForwardCache)> {
    let cfg = &p.config;
    let batch = state.nrows();
    check_dim("regressor state width", cfg.state_dim, state.ncols())?;
    check_dim("regressor time count", batch, times.len())?;
    match (cfg.cond_dim, cond) {
        (0, None) => {}
        (0, Some(c)) => check_dim("regressor condition width", 0, c.ncols())?,
        (dc, Some(c)) => {
            check_dim("regressor condition width", dc, c.ncols())?;
            check_dim("regressor condition rows", batch, c.nrows())?;
        }
        (dc, None) => check_dim("regressor condition width", dc, 0)?,
    }
    for &t in times {
        check_unit_time("t", t)?;
    }
    let cond = cond.filter(|c| c.ncols() > 0);
    let emb = embed_times(times, cfg.arch.time_dim, cfg.arch.time_freq_max)?;
    let (out, first) = forward_pass(p, assemble_input(state, cond), &emb)?;
    let mut passes = vec![first];
    let out = if cfg.arch.double_forward {
        let (out2, second) = forward_pass(p, assemble_input(out.view(), cond), &emb)?;
        passes.push(second);
        out2
    } else {
        out
    };
    Ok((
        out,
        ForwardCache {
            stamp: p.stamp(),
            emb,
            passes,
            batch,
        },
    ))
}

/// Batched prediction without keeping the cache.
pub fn predict_batch(
    p: &RegressorParams,
    state: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
    times: &[f64],
) -> Result<Array2<f64>> {
    forward_batch(p, state, cond, times).map(|(out, _)| out)
}

/// Single-sample forward pass.
pub fn forward(
    p: &RegressorParams,
    y_t: &[f64],
    cond: Option<&[f64]>,
    t: f64,
) -> Result<(Vec<f64>, ForwardCache)> {
    let state = ArrayView2::from_shape((1, y_t.len()), y_t).expect("row view");
    let cond = cond.map(|c| ArrayView2::from_shape((1, c.len()), c).expect("row view"));
    let (out, cache) = forward_batch(p, state, cond, &[t])?;
    Ok((out.row(0).to_vec(), cache))
}

fn backward_pass(
    p: &RegressorParams,
    pass: &PassCache,
    emb: &Array2<f64>,
    grad_out: ArrayView2<'_, f64>,
    grads: &mut RegressorParams,
) -> Array2<f64> {
    let hidden = p.config.arch.hidden;
    let mut dh = p.output.backward(pass.last_hidden.view(), grad_out, &mut grads.output);
    for (k, (b, c)) in p.blocks.iter().zip(&pass.blocks).enumerate().rev() {
        let gb = &mut grads.blocks[k];

        // Second branch: h2 = h1 + beta * z2.
        gb.beta[0] += (&dh * &c.z2).sum();
        let dz2 = &dh * b.beta[0];
        let dg2 = b.ffn_out.backward(c.g2.view(), dz2.view(), &mut gb.ffn_out);
        let dpre = gate_rows_backward(&c.p, &dg2);
        let dn2 = b.ffn_in.backward(c.n2.view(), dpre.view(), &mut gb.ffn_in);
        dh += &layer_norm_backward(&c.n2, &c.inv2, &dn2);

        // First branch: h1 = h + alpha * scale ⊙ z.
        let alpha = b.alpha[0];
        let dz = match (&b.channel_scale, &mut gb.channel_scale) {
            (Some(scale), Some(gscale)) => {
                let scaled = &c.z * scale;
                gb.alpha[0] += (&dh * &scaled).sum();
                *gscale += &((&dh * &c.z).sum_axis(Axis(0)) * alpha);
                &dh * scale * alpha
            }
            _ => {
                gb.alpha[0] += (&dh * &c.z).sum();
                &dh * alpha
            }
        };
        let dg = b.outer.backward(c.g.view(), dz.view(), &mut gb.outer);
        let dv = gate_rows_backward(&c.v, &dg);
        let scale_a = c.film.slice(s![.., ..hidden]);
        let du = &dv * &scale_a + &dv;
        let mut dfilm = Array2::zeros(c.film.raw_dim());
        dfilm.slice_mut(s![.., ..hidden]).assign(&(&dv * &c.u));
        dfilm.slice_mut(s![.., hidden..]).assign(&dv);
        b.film.backward(emb.view(), dfilm.view(), &mut gb.film);
        let dn1 = b.inner.backward(c.n1.view(), du.view(), &mut gb.inner);
        dh += &layer_norm_backward(&c.n1, &c.inv1, &dn1);
    }
    p.input.backward(pass.input.view(), dh.view(), &mut grads.input)
}

/// Exact gradients of `sum(grad_out ⊙ forward(...))` with respect to every
/// parameter and to the inputs.
pub fn backward(
    p: &RegressorParams,
    cache: &ForwardCache,
    grad_out: ArrayView2<'_, f64>,
) -> Result<(RegressorParams, InputGradient)> {
    if cache.stamp != p.stamp() {
        return Err(Error::StaleCache);
    }
    check_dim("gradient rows", cache.batch, grad_out.nrows())?;
    check_dim("gradient width", p.config.output_dim(), grad_out.ncols())?;
    let mut grads = RegressorParams::zeros_like(p);
    let sd = p.config.state_dim;
    let mut g = grad_out.to_owned();
    let mut cond_grad: Option<Array2<f64>> = None;
    for pass in cache.passes.iter().rev() {
        let dinput = backward_pass(p, pass, &cache.emb, g.view(), &mut grads);
        if p.config.cond_dim > 0 {
            let dc = dinput.slice(s![.., sd..]).to_owned();
            cond_grad = Some(match cond_grad {
                Some(acc) => acc + dc,
                None => dc,
            });
        }
        g = dinput.slice(s![.., ..sd]).to_owned();
    }
    Ok((
        grads,
        InputGradient {
            state: g,
            condition: cond_grad,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(objective: ObjectiveKind, double_forward: bool) -> RegressorParams {
        let arch = ArchSpec {
            hidden: 8,
            depth: 2,
            time_dim: 4,
            double_forward,
            ..ArchSpec::default()
        };
        let cfg = NetConfig::new(3, 2, objective, arch).unwrap();
        RegressorParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn zero_output_layer_predicts_bias() {
        let p = small(ObjectiveKind::Endpoint, false);
        let (out, _) = forward(&p, &[0.1, 0.2, 0.3], Some(&[1.0, -1.0]), 0.4).unwrap();
        assert_eq!(out, vec![0.0; 3]);
        let mut p = p;
        let n = p.tensors_mut().len();
        p.tensors_mut()[n - 1].copy_from_slice(&[0.5, -0.25, 2.0]);
        let (out, _) = forward(&p, &[0.1, 0.2, 0.3], Some(&[1.0, -1.0]), 0.4).unwrap();
        assert_eq!(out, vec![0.5, -0.25, 2.0]);
    }

    #[test]
    fn width_checks() {
        let p = small(ObjectiveKind::Endpoint, false);
        assert!(matches!(
            forward(&p, &[0.1, 0.2], Some(&[1.0, -1.0]), 0.4),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(forward(&p, &[0.1, 0.2, 0.3], None, 0.4).is_err());
        assert!(forward(&p, &[0.1, 0.2, 0.3], Some(&[1.0, -1.0]), 1.4).is_err());
    }

    #[test]
    fn score_objective_doubles_output() {
        let p = small(ObjectiveKind::EndpointWithScore, false);
        let (out, _) = forward(&p, &[0.1, 0.2, 0.3], Some(&[1.0, -1.0]), 0.4).unwrap();
        assert_eq!(out.len(), 6);
    }

    #[test]
    fn double_forward_needs_endpoint_objective() {
        let arch = ArchSpec {
            double_forward: true,
            ..ArchSpec::default()
        };
        assert!(NetConfig::new(2, 0, ObjectiveKind::BridgeLength, arch.clone()).is_err());
        assert!(NetConfig::new(2, 0, ObjectiveKind::EndpointWithScore, arch.clone()).is_err());
        assert!(NetConfig::new(2, 0, ObjectiveKind::Endpoint, arch).is_ok());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = small(ObjectiveKind::Endpoint, false);
        let (_, cache) = forward(&p, &[0.1, 0.2, 0.3], Some(&[1.0, -1.0]), 0.4).unwrap();
        p.tensors_mut()[0][0] += 1.0;
        let g = Array2::ones((1, 3));
        assert!(matches!(backward(&p, &cache, g.view()), Err(Error::StaleCache)));
        let other = p.clone();
        let (_, cache) = forward(&other, &[0.1, 0.2, 0.3], Some(&[1.0, -1.0]), 0.4).unwrap();
        assert!(matches!(backward(&p, &cache, g.view()), Err(Error::StaleCache)));
    }

    #[test]
    fn non_finite_input_reports_layer() {
        let p = small(ObjectiveKind::Endpoint, false);
        let err = forward(&p, &[f64::NAN, 0.2, 0.3], Some(&[1.0, -1.0]), 0.4).unwrap_err();
        assert!(matches!(err, Error::NonFiniteActivation { layer: 0 }));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let p = small(ObjectiveKind::Endpoint, true);
        let (_, cache) = forward(&p, &[0.1, 0.2, 0.3], Some(&[1.0, -1.0]), 0.4).unwrap();
        let (g, dx) = backward(&p, &cache, Array2::zeros((1, 3)).view()).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(dx.state.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tensor_views_agree() {
        let p = small(ObjectiveKind::Endpoint, false);
        let shapes = p.tensor_shapes();
        let tensors = p.tensors();
        assert_eq!(shapes.len(), tensors.len());
        for (s, t) in shapes.iter().zip(&tensors) {
            assert_eq!(s.iter().product::<usize>(), t.len());
        }
    }
}
