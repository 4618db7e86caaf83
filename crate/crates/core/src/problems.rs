//! Endpoint-pair sources: 2-D toy distributions and small linear inverse
//! problems built from explicit degradation operators.
//!
//! Point sets are `(n, dim)` arrays, one sample per row.

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView1};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const GAUSS8_RADIUS: f64 = 2.0;
pub const GAUSS8_STD: f64 = 0.1;
pub const SWISS_ROLL_JITTER: f64 = 0.05;
pub const SWISS_ROLL_THETA: (f64, f64) = (1.5 * PI, 4.5 * PI);

/// Generator seeded for one worker. Workers share the seed and differ by
/// ChaCha stream, so a partition of the work is reproducible regardless of
/// scheduling.
pub fn worker_rng(seed: u64, worker: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker);
    rng
}

fn normal(rng: &mut dyn RngCore) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// Toy distributions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    Gauss8,
    SwissRoll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub kind: ToyKind,
    /// Multiplies every coordinate, including the noise.
    #[serde(default = "one")]
    pub scale: f64,
    /// Component std (gauss8) or jitter (swiss roll), before scaling.
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl ToySpec {
    pub fn new(kind: ToyKind) -> Self {
        Self {
            kind,
            scale: 1.0,
            noise: None,
            seed: 0,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = Some(noise);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn noise_level(&self) -> f64 {
        self.noise.unwrap_or(match self.kind {
            ToyKind::Gauss8 => GAUSS8_STD,
            ToyKind::SwissRoll => SWISS_ROLL_JITTER,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!("toy scale must be positive, got {}", self.scale)));
        }
        let noise = self.noise_level();
        if !(noise.is_finite() && noise >= 0.0) {
            return Err(Error::Config(format!("toy noise must be nonnegative, got {noise}")));
        }
        Ok(())
    }

    /// Draws `n` points from the caller's generator.
    pub fn sample_with(&self, rng: &mut dyn RngCore, n: usize) -> Result<Array2<f64>> {
        self.validate()?;
        let noise = self.noise_level();
        let mut out = Array2::zeros((n, 2));
        for mut row in out.rows_mut() {
            let (x, y) = match self.kind {
                ToyKind::Gauss8 => {
                    let k = rng.random_range(0..8u32) as f64;
                    let angle = k * PI / 4.0;
                    (
                        GAUSS8_RADIUS * angle.cos() + noise * normal(rng),
                        GAUSS8_RADIUS * angle.sin() + noise * normal(rng),
                    )
                }
                ToyKind::SwissRoll => {
                    let theta = rng.random_range(SWISS_ROLL_THETA.0..SWISS_ROLL_THETA.1);
                    let r = swiss_roll_rate() * theta;
                    (r * theta.cos() + noise * normal(rng), r * theta.sin() + noise * normal(rng))
                }
            };
            row[0] = self.scale * x;
            row[1] = self.scale * y;
        }
        Ok(out)
    }
}

/// `k` in `r = k θ`, chosen so the noiseless roll has unit RMS radius.
pub fn swiss_roll_rate() -> f64 {
    let (a, b) = SWISS_ROLL_THETA;
    let mean_theta2 = (a * a + a * b + b * b) / 3.0;
    1.0 / mean_theta2.sqrt()
}

/// Eight-component Gaussian mixture on a circle, seeded from `spec.seed`.
pub fn sample_gauss8(spec: &ToySpec, n: usize) -> Result<Array2<f64>> {
    ToySpec {
        kind: ToyKind::Gauss8,
        ..spec.clone()
    }
    .sample_with(&mut ChaCha8Rng::seed_from_u64(spec.seed), n)
}

/// Swiss roll normalized to unit RMS radius, seeded from `spec.seed`.
pub fn sample_swiss_roll(spec: &ToySpec, n: usize) -> Result<Array2<f64>> {
    ToySpec {
        kind: ToyKind::SwissRoll,
        ..spec.clone()
    }
    .sample_with(&mut ChaCha8Rng::seed_from_u64(spec.seed), n)
}

// ---------------------------------------------------------------------------
// Linear operators

/// A linear map on flattened signals. Signals are 1-D (`shape = [n]`) or 2-D
/// row-major (`shape = [h, w]`); blur and downsample act separably along
/// every axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LinearOperator {
    /// Centered convolution with zero padding.
    Blur { taps: Vec<f64>, shape: Vec<usize> },
    /// Block average over non-overlapping windows of `stride`.
    Downsample { stride: usize, shape: Vec<usize> },
    Identity { dim: usize },
}

fn as_rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [n] => Ok((1, n)),
        [h, w] => Ok((h, w)),
        _ => Err(Error::Config(format!(
            "operator shape must have 1 or 2 axes, got {shape:?}"
        ))),
    }
}

impl LinearOperator {
    pub fn blur(taps: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let op = Self::Blur { taps, shape };
        op.validate()?;
        Ok(op)
    }

    pub fn downsample(stride: usize, shape: Vec<usize>) -> Result<Self> {
        let op = Self::Downsample { stride, shape };
        op.validate()?;
        Ok(op)
    }

    pub fn identity(dim: usize) -> Self {
        Self::Identity { dim }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Blur { taps, shape } => {
                as_rows_cols(shape)?;
                if taps.is_empty() || taps.iter().any(|t| !t.is_finite()) {
                    return Err(Error::Config("blur taps must be nonempty and finite".into()));
                }
            }
            Self::Downsample { stride, shape } => {
                as_rows_cols(shape)?;
                if *stride == 0 || shape.iter().any(|&n| n % stride != 0) {
                    return Err(Error::Config(format!(
                        "downsample stride {stride} must divide every axis of {shape:?}"
                    )));
                }
            }
            Self::Identity { .. } => {}
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Blur { shape, .. } | Self::Downsample { shape, .. } => shape.iter().product(),
            Self::Identity { dim } => *dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Self::Blur { shape, .. } => shape.iter().product(),
            Self::Downsample { stride, shape } => shape.iter().map(|n| n / stride).product(),
            Self::Identity { dim } => *dim,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("operator input", self.input_dim(), x.len())?;
        Ok(match self {
            Self::Identity { .. } => x.to_vec(),
            Self::Blur { taps, shape } => {
                separable(x, shape, |line| convolve(line, taps, false))?
            }
            Self::Downsample { stride, shape } => {
                separable(x, shape, |line| block_average(line, *stride))?
            }
        })
    }

    pub fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim("operator adjoint input", self.output_dim(), y.len())?;
        Ok(match self {
            Self::Identity { .. } => y.to_vec(),
            Self::Blur { taps, shape } => separable(y, shape, |line| convolve(line, taps, true))?,
            Self::Downsample { stride, shape } => {
                let reduced: Vec<usize> = shape.iter().map(|n| n / stride).collect();
                separable(y, &reduced, |line| block_spread(line, *stride))?
            }
        })
    }
}

/// Applies `f` to every row, then (for 2-D signals) to every column of the result.
fn separable(x: &[f64], shape: &[usize], f: impl Fn(ArrayView1<'_, f64>) -> Vec<f64>) -> Result<Vec<f64>> {
    let (rows, cols) = as_rows_cols(shape)?;
    let x = Array2::from_shape_vec((rows, cols), x.to_vec()).expect("length checked");
    let out_cols = f(x.row(0)).len();
    let mut by_rows = Array2::zeros((rows, out_cols));
    for (r, mut out) in by_rows.rows_mut().into_iter().enumerate() {
        out.assign(&ArrayView1::from(&f(x.row(r))));
    }
    if shape.len() == 1 {
        return Ok(by_rows.into_raw_vec_and_offset().0);
    }
    let out_rows = f(by_rows.column(0)).len();
    let mut both = Array2::zeros((out_rows, out_cols));
    for c in 0..out_cols {
        both.slice_mut(s![.., c]).assign(&ArrayView1::from(&f(by_rows.column(c))));
    }
    Ok(both.into_raw_vec_and_offset().0)
}

/// `y[i] = Σ_k taps[k] x[i + k - c]` with `c = (K-1)/2`; the adjoint scatters
/// back along the same offsets.
fn convolve(x: ArrayView1<'_, f64>, taps: &[f64], adjoint: bool) -> Vec<f64> {
    let n = x.len() as isize;
    let c = ((taps.len() - 1) / 2) as isize;
    let mut y = vec![0.0; x.len()];
    for (i, yi) in y.iter_mut().enumerate() {
        for (k, &w) in taps.iter().enumerate() {
            let off = k as isize - c;
            let j = if adjoint { i as isize - off } else { i as isize + off };
            if (0..n).contains(&j) {
                *yi += w * x[j as usize];
            }
        }
    }
    y
}

fn block_average(x: ArrayView1<'_, f64>, stride: usize) -> Vec<f64> {
    x.as_slice()
        .map(|s| s.to_vec())
        .unwrap_or_else(|| x.to_vec())
        .chunks(stride)
        .map(|c| c.iter().sum::<f64>() / stride as f64)
        .collect()
}

fn block_spread(y: ArrayView1<'_, f64>, stride: usize) -> Vec<f64> {
    y.iter()
        .flat_map(|&v| std::iter::repeat_n(v / stride as f64, stride))
        .collect()
}

// ---------------------------------------------------------------------------
// Clean-signal sources

/// Piecewise-constant `side × side` images: 1 to 3 axis-aligned rectangles
/// with intensities in `[0.2, 1]` over a zero background.
pub fn random_rectangles(rng: &mut dyn RngCore, side: usize) -> Vec<f64> {
    let mut img = vec![0.0; side * side];
    let count = rng.random_range(1..=3);
    for _ in 0..count {
        let (r0, r1) = ordered(rng.random_range(0..side), rng.random_range(0..side));
        let (c0, c1) = ordered(rng.random_range(0..side), rng.random_range(0..side));
        let value = rng.random_range(0.2..=1.0);
        for r in r0..=r1 {
            img[r * side + c0..=r * side + c1].fill(value);
        }
    }
    img
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CleanSource {
    StandardNormal { dim: usize },
    Rectangles { side: usize },
    Toy { spec: ToySpec },
}

impl CleanSource {
    pub fn dim(&self) -> usize {
        match self {
            Self::StandardNormal { dim } => *dim,
            Self::Rectangles { side } => side * side,
            Self::Toy { .. } => 2,
        }
    }

    pub fn sample(&self, rng: &mut dyn RngCore, n: usize) -> Result<Array2<f64>> {
        let d = self.dim();
        Ok(match self {
            Self::StandardNormal { .. } => Array2::from_shape_simple_fn((n, d), || normal(rng)),
            Self::Rectangles { side } => {
                let mut out = Array2::zeros((n, d));
                for mut row in out.rows_mut() {
                    row.assign(&ArrayView1::from(&random_rectangles(rng, *side)));
                }
                out
            }
            Self::Toy { spec } => spec.sample_with(rng, n)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Pair sources

/// A batch of coupled endpoints, one pair per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub x0: Array2<f64>,
    pub y1: Array2<f64>,
    pub condition: Option<Array2<f64>>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pull-based source of i.i.d. endpoint pairs.
pub trait PairSource: Send + Sync {
    fn state_dim(&self) -> usize;
    fn cond_dim(&self) -> usize {
        0
    }
    fn sample_pairs(&self, rng: &mut dyn RngCore, n: usize) -> Result<PairBatch>;
}

/// Draws `n` pairs split across `workers` threads. Worker `k` uses
/// `worker_rng(seed, k)` and produces a contiguous block of rows, so the
/// result depends only on `(seed, n, workers)`.
pub fn sample_pairs_parallel(source: &dyn PairSource, seed: u64, n: usize, workers: usize) -> Result<PairBatch> {
    let workers = workers.max(1);
    let sizes: Vec<usize> = (0..workers).map(|k| n / workers + usize::from(k < n % workers)).collect();
    let parts: Vec<Result<PairBatch>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sizes
            .iter()
            .enumerate()
            .map(|(k, &m)| scope.spawn(move || source.sample_pairs(&mut worker_rng(seed, k as u64), m)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let cat = |f: &dyn Fn(&PairBatch) -> ndarray::ArrayView2<'_, f64>| {
        ndarray::concatenate(ndarray::Axis(0), &parts.iter().map(f).collect::<Vec<_>>()).expect("equal widths")
    };
    let x0 = cat(&|b| b.x0.view());
    let y1 = cat(&|b| b.y1.view());
    let condition = parts[0]
        .condition
        .is_some()
        .then(|| cat(&|b| b.condition.as_ref().expect("uniform source").view()));
    Ok(PairBatch { x0, y1, condition })
}

/// Independent draws from two toy marginals: X0 from `target`, Y1 from `source`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCoupling {
    pub target: ToySpec,
    pub source: ToySpec,
}

impl ToyCoupling {
    /// Gaussian mixture (Y1) to swiss roll (X0).
    pub fn gauss8_to_swiss_roll() -> Self {
        Self {
            target: ToySpec::new(ToyKind::SwissRoll),
            source: ToySpec::new(ToyKind::Gauss8),
        }
    }
}

impl PairSource for ToyCoupling {
    fn state_dim(&self) -> usize {
        2
    }

    fn sample_pairs(&self, rng: &mut dyn RngCore, n: usize) -> Result<PairBatch> {
        Ok(PairBatch {
            x0: self.target.sample_with(rng, n)?,
            y1: self.source.sample_with(rng, n)?,
            condition: None,
        })
    }
}

/// `Y1 = A1 X0 + σ Z`, with optional side information `c = A2 X0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseProblem {
    pub clean: CleanSource,
    pub degrade: LinearOperator,
    pub side: Option<LinearOperator>,
    pub noise_std: f64,
}

impl InverseProblem {
    pub fn observe(&self, x0: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
        check_dim("observation noise", self.degrade.output_dim(), noise.len())?;
        let mut y = self.degrade.apply(x0)?;
        for (v, z) in y.iter_mut().zip(noise) {
            *v += self.noise_std * z;
        }
        Ok(y)
    }
}

pub fn make_inverse_problem(
    clean: CleanSource,
    degrade: LinearOperator,
    noise_std: f64,
    side: Option<LinearOperator>,
) -> Result<InverseProblem> {
    degrade.validate()?;
    check_dim("degradation operator input", clean.dim(), degrade.input_dim())?;
    // The bridge runs in a single state space.
    check_dim("degradation operator output", degrade.input_dim(), degrade.output_dim())?;
    if let Some(a2) = &side {
        a2.validate()?;
        check_dim("side operator input", clean.dim(), a2.input_dim())?;
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::Config(format!("noise std must be nonnegative, got {noise_std}")));
    }
    Ok(InverseProblem {
        clean,
        degrade,
        side,
        noise_std,
    })
}

impl PairSource for InverseProblem {
    fn state_dim(&self) -> usize {
        self.clean.dim()
    }

    fn cond_dim(&self) -> usize {
        self.side.as_ref().map_or(0, |a| a.output_dim())
    }

    fn sample_pairs(&self, rng: &mut dyn RngCore, n: usize) -> Result<PairBatch> {
        let x0 = self.clean.sample(rng, n)?;
        let d = self.degrade.output_dim();
        let mut y1 = Array2::zeros((n, d));
        let mut noise = vec![0.0; d];
        for (x, mut y) in x0.rows().into_iter().zip(y1.rows_mut()) {
            noise.iter_mut().for_each(|z| *z = normal(rng));
            let x = x.to_vec();
            y.assign(&ArrayView1::from(&self.observe(&x, &noise)?));
        }
        let condition = match &self.side {
            None => None,
            Some(a2) => {
                let mut c = Array2::zeros((n, a2.output_dim()));
                for (x, mut row) in x0.rows().into_iter().zip(c.rows_mut()) {
                    row.assign(&ArrayView1::from(&a2.apply(&x.to_vec())?));
                }
                Some(c)
            }
        };
        Ok(PairBatch { x0, y1, condition })
    }
}

// ---------------------------------------------------------------------------
// Config-level description

/// Problem description as it appears in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// Gaussian mixture to swiss roll, unpaired.
    Toy {
        #[serde(default)]
        source: Option<ToySpec>,
        #[serde(default)]
        target: Option<ToySpec>,
    },
    /// `Y1 = X0` with standard-normal `X0`.
    Identity { dim: usize },
    /// Scalar `Y1 = X0 + σ Z`, `X0 ~ N(0, 1)`.
    LinearGaussian {
        #[serde(default = "half")]
        noise_std: f64,
    },
    /// Random-rectangle images blurred by a separable kernel, optionally with
    /// a block-averaged side channel.
    Deblur {
        #[serde(default = "default_side")]
        side: usize,
        #[serde(default = "default_taps")]
        taps: Vec<f64>,
        #[serde(default = "default_deblur_noise")]
        noise_std: f64,
        #[serde(default)]
        condition_stride: Option<usize>,
    },
}

fn half() -> f64 {
    0.5
}
fn default_side() -> usize {
    16
}
fn default_taps() -> Vec<f64> {
    vec![0.25, 0.5, 0.25]
}
fn default_deblur_noise() -> f64 {
    0.01
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self::Toy {
            source: None,
            target: None,
        }
    }
}

/// A built problem: the pair source plus the pieces samplers may need.
pub enum Problem {
    Toy(ToyCoupling),
    Inverse(InverseProblem),
}

impl Problem {
    pub fn source(&self) -> &dyn PairSource {
        match self {
            Self::Toy(t) => t,
            Self::Inverse(p) => p,
        }
    }

    pub fn inverse(&self) -> Option<&InverseProblem> {
        match self {
            Self::Inverse(p) => Some(p),
            Self::Toy(_) => None,
        }
    }
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Problem> {
        Ok(match self {
            Self::Toy { source, target } => {
                let mut toy = ToyCoupling::gauss8_to_swiss_roll();
                if let Some(s) = source {
                    toy.source = s.clone();
                }
                if let Some(t) = target {
                    toy.target = t.clone();
                }
                toy.source.validate()?;
                toy.target.validate()?;
                Problem::Toy(toy)
            }
            Self::Identity { dim } => Problem::Inverse(make_inverse_problem(
                CleanSource::StandardNormal { dim: *dim },
                LinearOperator::identity(*dim),
                0.0,
                None,
            )?),
            Self::LinearGaussian { noise_std } => Problem::Inverse(make_inverse_problem(
                CleanSource::StandardNormal { dim: 1 },
                LinearOperator::identity(1),
                *noise_std,
                None,
            )?),
            Self::Deblur {
                side,
                taps,
                noise_std,
                condition_stride,
            } => {
                let shape = vec![*side, *side];
                let a2 = condition_stride
                    .map(|stride| LinearOperator::downsample(stride, shape.clone()))
                    .transpose()?;
                Problem::Inverse(make_inverse_problem(
                    CleanSource::Rectangles { side: *side },
                    LinearOperator::blur(taps.clone(), shape)?,
                    *noise_std,
                    a2,
                )?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn gauss8_degenerate_components_hit_eight_points() {
        let spec = ToySpec::new(ToyKind::Gauss8).with_noise(0.0).with_seed(4);
        let pts = sample_gauss8(&spec, 2000).unwrap();
        let mut seen = [false; 8];
        for p in pts.rows() {
            let angle = p[1].atan2(p[0]).rem_euclid(2.0 * PI);
            let k = (angle / (PI / 4.0)).round() as usize % 8;
            let expected = (GAUSS8_RADIUS * (k as f64 * PI / 4.0).cos(), GAUSS8_RADIUS * (k as f64 * PI / 4.0).sin());
            assert!((p[0] - expected.0).abs() < 1e-12 && (p[1] - expected.1).abs() < 1e-12);
            seen[k] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn gauss8_mean_is_centered() {
        let n = 100_000;
        let pts = sample_gauss8(&ToySpec::new(ToyKind::Gauss8).with_seed(1), n).unwrap();
        for axis in 0..2 {
            let col = pts.column(axis);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!(mean.abs() < 4.0 * se, "axis {axis}: mean {mean}, se {se}");
        }
    }

    #[test]
    fn swiss_roll_membership_and_normalization() {
        let k = swiss_roll_rate();
        let exact = sample_swiss_roll(&ToySpec::new(ToyKind::SwissRoll).with_noise(0.0), 500).unwrap();
        for p in exact.rows() {
            let r = p[0].hypot(p[1]);
            let theta = r / k;
            assert!((SWISS_ROLL_THETA.0 - 1e-9..=SWISS_ROLL_THETA.1 + 1e-9).contains(&theta));
            assert!((r * theta.cos() - p[0]).abs() < 1e-9 && (r * theta.sin() - p[1]).abs() < 1e-9);
        }
        let pts = sample_swiss_roll(&ToySpec::new(ToyKind::SwissRoll).with_seed(9), 10_000).unwrap();
        let rms = (pts.iter().map(|v| v * v).sum::<f64>() / 10_000.0).sqrt();
        assert!((rms - 1.0).abs() < 0.02, "rms radius {rms}");
    }

    #[test]
    fn toy_sampling_is_seeded() {
        let spec = ToySpec::new(ToyKind::SwissRoll).with_seed(5);
        assert_eq!(sample_swiss_roll(&spec, 64).unwrap(), sample_swiss_roll(&spec, 64).unwrap());
        let g = ToySpec::new(ToyKind::Gauss8).with_seed(5);
        assert_eq!(sample_gauss8(&g, 64).unwrap(), sample_gauss8(&g, 64).unwrap());
        assert!(ToySpec { scale: 0.0, ..g }.validate().is_err());
    }

    #[test]
    fn blur_by_hand() {
        let op = LinearOperator::blur(vec![1.0 / 3.0; 3], vec![6]).unwrap();
        let y = op.apply(&[0.0, 3.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let expected = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        for (a, b) in y.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn downsample_averages_blocks() {
        let op = LinearOperator::downsample(2, vec![2, 4]).unwrap();
        let y = op.apply(&[1.0, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(y, vec![2.0, 6.0]);
        assert!(LinearOperator::downsample(3, vec![4]).is_err());
    }

    #[test]
    fn operators_are_adjoint() {
        let mut r = rng(11);
        let ops = [
            LinearOperator::blur(vec![0.2, 0.5, 0.3], vec![16, 16]).unwrap(),
            LinearOperator::blur(vec![0.1, 0.4, 0.3, 0.2], vec![9]).unwrap(),
            LinearOperator::downsample(2, vec![16, 16]).unwrap(),
            LinearOperator::downsample(4, vec![12]).unwrap(),
            LinearOperator::identity(5),
        ];
        for op in &ops {
            for _ in 0..5 {
                let x: Vec<f64> = (0..op.input_dim()).map(|_| normal(&mut r)).collect();
                let y: Vec<f64> = (0..op.output_dim()).map(|_| normal(&mut r)).collect();
                let lhs: f64 = op.apply(&x).unwrap().iter().zip(&y).map(|(a, b)| a * b).sum();
                let rhs: f64 = x.iter().zip(op.adjoint(&y).unwrap()).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-10, "{op:?}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn identity_problem_without_noise_copies() {
        let p = make_inverse_problem(CleanSource::StandardNormal { dim: 3 }, LinearOperator::identity(3), 0.0, None)
            .unwrap();
        let b = p.sample_pairs(&mut rng(0), 10).unwrap();
        assert_eq!(b.x0, b.y1);
        assert!(b.condition.is_none());
    }

    #[test]
    fn observation_noise_has_requested_variance() {
        let sigma = 0.3;
        let p = make_inverse_problem(CleanSource::StandardNormal { dim: 1 }, LinearOperator::identity(1), sigma, None)
            .unwrap();
        let n = 100_000;
        let b = p.sample_pairs(&mut rng(2), n).unwrap();
        let r: Vec<f64> = b.y1.iter().zip(b.x0.iter()).map(|(y, x)| y - x).collect();
        let mean = r.iter().sum::<f64>() / n as f64;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Var of the sample variance of a Gaussian is 2σ⁴/(n−1).
        let se = (2.0 * sigma.powi(4) / (n - 1) as f64).sqrt();
        assert!((var - sigma * sigma).abs() < 4.0 * se, "{var}");
    }

    #[test]
    fn deblur_with_side_channel() {
        let spec = ProblemSpec::Deblur {
            side: 16,
            taps: default_taps(),
            noise_std: 0.0,
            condition_stride: Some(2),
        };
        let problem = spec.build().unwrap();
        let src = problem.source();
        assert_eq!((src.state_dim(), src.cond_dim()), (256, 64));
        let b = src.sample_pairs(&mut rng(3), 4).unwrap();
        let inv = problem.inverse().unwrap();
        for i in 0..4 {
            let x = b.x0.row(i).to_vec();
            assert_eq!(b.y1.row(i).to_vec(), inv.degrade.apply(&x).unwrap());
            assert_eq!(
                b.condition.as_ref().unwrap().row(i).to_vec(),
                inv.side.as_ref().unwrap().apply(&x).unwrap()
            );
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = make_inverse_problem(CleanSource::StandardNormal { dim: 3 }, LinearOperator::identity(4), 0.0, None);
        assert!(err.is_err());
        let down = LinearOperator::downsample(2, vec![4]).unwrap();
        assert!(make_inverse_problem(CleanSource::StandardNormal { dim: 4 }, down, 0.0, None).is_err());
    }

    #[test]
    fn parallel_pulls_are_reproducible() {
        let toy = ToyCoupling::gauss8_to_swiss_roll();
        let a = sample_pairs_parallel(&toy, 7, 101, 4).unwrap();
        let b = sample_pairs_parallel(&toy, 7, 101, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 101);
        let first = toy.sample_pairs(&mut worker_rng(7, 0), 26).unwrap();
        assert_eq!(a.x0.slice(s![..26, ..]), first.x0);
    }

    #[test]
    fn problem_spec_round_trips() {
        let spec: ProblemSpec = serde_json::from_str(r#"{"kind":"deblur","condition_stride":2}"#).unwrap();
        assert!(matches!(spec, ProblemSpec::Deblur { side: 16, .. }));
        let back: ProblemSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
