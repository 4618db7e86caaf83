use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{check_dim, Error, Result};

/// Default highest frequency of the sinusoidal time embedding.
pub const DEFAULT_TIME_FREQ_MAX: f64 = 100.0;

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Affine layer `y = x W + b` with `W` stored as `(fan_in, fan_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    /// Uniform fan-in scaled weights, zero bias.
    pub fn kaiming<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..=bound));
        Self {
            w,
            b: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    pub(crate) fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub(crate) fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        grad: &mut Dense,
    ) -> Array2<f64> {
        grad.w += &x.t().dot(&dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

/// Sinusoidal embedding of a unit time with the default frequency range.
pub fn embed_time(t: f64, dim: usize) -> Result<Vec<f64>> {
    embed_time_with(t, dim, DEFAULT_TIME_FREQ_MAX)
}

/// Interleaved `[sin(f_0 t), cos(f_0 t), sin(f_1 t), ...]` with frequencies
/// spaced geometrically from 1 to `max_freq`.
pub fn embed_time_with(t: f64, dim: usize, max_freq: f64) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "time embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let f = frequency(k, half, max_freq);
        let (sin, cos) = (f * t).sin_cos();
        out.push(sin);
        out.push(cos);
    }
    Ok(out)
}

fn frequency(k: usize, half: usize, max_freq: f64) -> f64 {
    if half == 1 {
        1.0
    } else {
        max_freq.powf(k as f64 / (half - 1) as f64)
    }
}

pub(crate) fn embed_times(times: &[f64], dim: usize, max_freq: f64) -> Result<Array2<f64>> {
    let mut e = Array2::zeros((times.len(), dim));
    for (mut row, &t) in e.rows_mut().into_iter().zip(times) {
        let v = embed_time_with(t, dim, max_freq)?;
        row.assign(&ArrayView1::from(&v));
    }
    Ok(e)
}

/// `(1 + a) ⊙ x + b` where `[a, b] = film(t_emb)`.
pub fn film_modulate(x: &[f64], t_emb: &[f64], film: &Dense) -> Result<Vec<f64>> {
    let width = x.len();
    check_dim("film embedding", film.fan_in(), t_emb.len())?;
    check_dim("film output", 2 * width, film.fan_out())?;
    let ab = film.forward(ArrayView2::from_shape((1, t_emb.len()), t_emb).expect("row view"));
    let ab = ab.row(0);
    Ok(x.iter()
        .enumerate()
        .map(|(i, &xi)| (1.0 + ab[i]) * xi + ab[width + i])
        .collect())
}

/// Product of the two halves of `x`.
pub fn simple_gate(x: &[f64]) -> Result<Vec<f64>> {
    if !x.len().is_multiple_of(2) {
        return Err(Error::DimensionMismatch {
            context: "simple gate (width must be even)",
            expected: x.len() + 1,
            found: x.len(),
        });
    }
    let (lo, hi) = x.split_at(x.len() / 2);
    Ok(lo.iter().zip(hi).map(|(a, b)| a * b).collect())
}

pub(crate) fn gate_rows(x: &Array2<f64>) -> Array2<f64> {
    let half = x.ncols() / 2;
    &x.slice(s![.., ..half]) * &x.slice(s![.., half..])
}

pub(crate) fn gate_rows_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let half = x.ncols() / 2;
    let mut dx = Array2::zeros(x.raw_dim());
    dx.slice_mut(s![.., ..half])
        .assign(&(dy * &x.slice(s![.., half..])));
    dx.slice_mut(s![.., half..])
        .assign(&(dy * &x.slice(s![.., ..half])));
    dx
}

/// Row-wise normalization without affine parameters. Returns the normalized
/// rows and the per-row inverse standard deviation.
pub(crate) fn layer_norm(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let width = x.ncols() as f64;
    let mut out = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in out.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / width;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / width;
        *inv = 1.0 / (var + NORM_EPS).sqrt();
        row *= *inv;
    }
    (out, inv_std)
}

pub(crate) fn layer_norm_backward(
    normed: &Array2<f64>,
    inv_std: &Array1<f64>,
    dy: &Array2<f64>,
) -> Array2<f64> {
    let width = normed.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    Zip::from(dx.rows_mut())
        .and(normed.rows())
        .and(dy.rows())
        .and(inv_std)
        .for_each(|mut dx, n, dy, &inv| {
            let mean_dy = dy.sum() / width;
            let mean_dyn = dy.dot(&n) / width;
            Zip::from(&mut dx)
                .and(&dy)
                .and(&n)
                .for_each(|d, &g, &nv| *d = inv * (g - mean_dy - nv * mean_dyn));
        });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_at_zero() {
        let e = embed_time(0.0, 8).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn embedding_is_deterministic_and_rejects_odd_dims() {
        assert_eq!(embed_time(0.37, 16).unwrap(), embed_time(0.37, 16).unwrap());
        assert!(embed_time(0.3, 7).is_err());
        assert!(embed_time(0.3, 0).is_err());
    }

    #[test]
    fn embedding_separates_grid_points() {
        let grid: Vec<f64> = (1..=100).map(|k| k as f64 / 101.0).collect();
        let embs: Vec<_> = grid.iter().map(|&t| embed_time(t, 64).unwrap()).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let gap = embs[i]
                    .iter()
                    .zip(&embs[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(gap > 1e-6, "t={} and t={}", grid[i], grid[j]);
            }
        }
    }

    #[test]
    fn film_identity_and_bias_only() {
        let film = Dense::zeros(4, 6);
        let x = [1.0, -2.0, 3.0];
        let emb = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(film_modulate(&x, &emb, &film).unwrap(), x.to_vec());
        let mut film = Dense::zeros(4, 6);
        film.b = Array1::from(vec![0.5, 0.5, 0.5, 7.0, 8.0, 9.0]);
        assert_eq!(film_modulate(&[0.0; 3], &emb, &film).unwrap(), vec![7.0, 8.0, 9.0]);
        assert!(film_modulate(&[0.0; 2], &emb, &film).is_err());
    }

    #[test]
    fn film_output_is_linear_in_scale() {
        // d y_i / d a_i = x_i: bump the bias that produces a_i.
        let x = [0.3, -1.7];
        let emb = [1.0, 0.0];
        let mut film = Dense::zeros(2, 4);
        let base = film_modulate(&x, &emb, &film).unwrap();
        film.b[1] = 1e-3;
        let bumped = film_modulate(&x, &emb, &film).unwrap();
        assert_eq!(bumped[0], base[0]);
        assert!(((bumped[1] - base[1]) / 1e-3 - x[1]).abs() < 1e-12);
    }

    #[test]
    fn gate_cases() {
        assert_eq!(simple_gate(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![3.0, 8.0]);
        assert_eq!(simple_gate(&[5.0, -6.0, 1.0, 1.0]).unwrap(), vec![5.0, -6.0]);
        assert_eq!(simple_gate(&[0.0, 0.0, 2.0, 9.0]).unwrap(), vec![0.0, 0.0]);
        assert!(simple_gate(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Array2::from_shape_vec((2, 4), vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]).unwrap();
        let (n, _) = layer_norm(&x);
        for row in n.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
