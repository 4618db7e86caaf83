//! Self-check suite: schedule identities, bridge algebra, Monte-Carlo posterior
//! consistency, gradient checks, curvature cross-checks, and sampler oracles.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::analysis::{
    adaptive_simpson, curvature_grid, curvature_numeric, curvature_sb_closed_form, curvature_vp_closed_form,
    energy_distance_unbiased, random_regressor, regressor_gradient_check, relative_error, Coupling, Interpolant,
    ProbeSelection, CURVATURE_GRID, CURVATURE_SAMPLES, CURVATURE_T_MIN,
};
use crate::bridge::{posterior_given_endpoints, transition_posterior, velocity, EndpointPair, ObjectiveKind};
use crate::error::Result;
use crate::net::{predict_batch, read_checkpoint, write_checkpoint, ArchSpec, Checkpoint};
use crate::problems::{LinearOperator, ProblemSpec};
use crate::sampler::{sample, Guidance, OraclePredictor, SamplerConfig, SamplerMethod};
use crate::schedule::NoiseSchedule;

/// Deliberate defects used to confirm the suite notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negate every velocity before it is checked.
    VelocitySign,
}

#[derive(Debug, Clone, Default)]
pub struct CheckOptions {
    pub fault: Option<Fault>,
    /// Paths in the Monte-Carlo posterior check.
    pub mc_paths: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub results: Vec<CheckResult>,
    pub elapsed: Duration,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.results.iter().filter(|r| !r.passed).map(|r| r.name).collect()
    }

    /// Fixed-width pass/fail table.
    pub fn table(&self) -> String {
        let width = self.results.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!(
                "{:<width$}  {}  {:>8.3}s  {}\n",
                r.name,
                if r.passed { "PASS" } else { "FAIL" },
                r.elapsed.as_secs_f64(),
                r.detail
            ));
        }
        out
    }
}

/// Outcome of one invariant: pass flag and a one-line detail.
type Outcome = Result<(bool, String)>;
type Check = (&'static str, Box<dyn Fn() -> Outcome>);

pub const MC_PATHS: usize = 100_000;

fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::quadratic_flip(crate::schedule::DEFAULT_BETA0, crate::schedule::DEFAULT_BETA_HALF)
        .expect("default schedule is valid")
}

fn unit_grid(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
}

fn schedule_identities() -> Outcome {
    let mut worst_sum = 0.0f64;
    let mut worst_sym = 0.0f64;
    let mut monotone = true;
    for s in [
        default_schedule(),
        NoiseSchedule::quadratic_flip(0.1, 0.9)?,
        NoiseSchedule::quadratic_flip_literal(0.1, 0.9)?,
        NoiseSchedule::constant(2.0)?,
    ] {
        let total = s.total_variance();
        let mut prev = 0.0;
        for t in unit_grid(1001) {
            let (s2, s2_hat) = s.variances_at(t)?;
            worst_sum = worst_sum.max((s2 + s2_hat - total).abs());
            worst_sym = worst_sym.max((s.beta_at(t)? - s.beta_at(1.0 - t)?).abs());
            monotone &= s2 >= prev;
            prev = s2;
        }
        monotone &= s.sigma2_at(0.0)? == 0.0 && s.sigma2_hat_at(1.0)? == 0.0;
    }
    Ok((
        worst_sum <= 1e-12 && worst_sym <= 1e-12 && monotone,
        format!("max |σ²+σ̂²−T| = {worst_sum:.1e}, max |β_t−β_(1−t)| = {worst_sym:.1e}, monotone = {monotone}"),
    ))
}

fn schedule_quadrature() -> Outcome {
    let mut worst = 0.0f64;
    for s in [default_schedule(), NoiseSchedule::quadratic_flip(0.1, 0.9)?] {
        let beta = |t: f64| s.beta_at(t).expect("t in range");
        for t in unit_grid(101).into_iter().skip(1) {
            let numeric = adaptive_simpson(&beta, 0.0, t, 1e-14);
            worst = worst.max(relative_error(s.sigma2_at(t)?, numeric));
        }
    }
    Ok((worst < 1e-9, format!("max relative error vs quadrature = {worst:.1e}")))
}

fn vp_identities() -> Outcome {
    let s = NoiseSchedule::vp(crate::schedule::VP_A, crate::schedule::VP_B)?;
    let (mut prev_a, mut prev_s) = (0.0, f64::INFINITY);
    let (mut ok, mut worst) = (true, 0.0f64);
    for t in unit_grid(501) {
        let (a, sd) = s.vp_alpha_sigma(t)?;
        worst = worst.max((a * a + sd * sd - 1.0).abs());
        ok &= a > prev_a && sd < prev_s;
        prev_a = a;
        prev_s = sd;
    }
    Ok((ok && worst < 1e-15, format!("max |α²+σ²−1| = {worst:.1e}, monotone = {ok}")))
}

fn bridge_boundaries() -> Outcome {
    let s = default_schedule();
    let pair = EndpointPair::new(vec![0.7, -1.3, 2.0], vec![-0.4, 0.9, 5.0])?;
    let p0 = posterior_given_endpoints(&s, &pair, 0.0)?;
    let p1 = posterior_given_endpoints(&s, &pair, 1.0)?;
    let err = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let worst = err(&p0.mean, &pair.x0).max(err(&p1.mean, &pair.y1)).max(p0.variance).max(p1.variance);
    let mut sym = 0.0f64;
    for t in unit_grid(101) {
        sym = sym.max((s.posterior_variance_at(t)? - s.posterior_variance_at(1.0 - t)?).abs());
    }
    Ok((
        worst <= 1e-12 && sym <= 1e-12,
        format!("boundary error = {worst:.1e}, variance asymmetry = {sym:.1e}"),
    ))
}

fn constant_rate_reduction(fault: Option<Fault>) -> Outcome {
    let s = NoiseSchedule::constant(0.8)?;
    let pair = EndpointPair::new(vec![0.2, -1.0], vec![0.7, 3.0])?;
    let (mut mean_err, mut vel_err) = (0.0f64, 0.0f64);
    for k in 0..=1000 {
        let t = 1e-3 + (1.0 - 1e-3) * k as f64 / 1000.0;
        let post = posterior_given_endpoints(&s, &pair, t)?;
        for i in 0..2 {
            let lin = (1.0 - t) * pair.x0[i] + t * pair.y1[i];
            mean_err = mean_err.max((post.mean[i] - lin).abs());
        }
        let y_t = post.mean;
        let mut v = velocity(&s, &pair.x0, &y_t, t)?;
        if fault == Some(Fault::VelocitySign) {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..2 {
            vel_err = vel_err.max(relative_error(v[i], (y_t[i] - pair.x0[i]) / t));
        }
    }
    Ok((
        mean_err <= 1e-12 && vel_err <= 1e-9,
        format!("interpolant error = {mean_err:.1e}, velocity relative error = {vel_err:.1e}"),
    ))
}

/// Composes two backward transitions from a posterior draw at `t_c` and
/// compares the moments at `t_a` with the closed form.
pub fn posterior_consistency(paths: usize, seed: u64) -> Outcome {
    let s = default_schedule();
    let pair = EndpointPair::new(vec![1.0, -0.5], vec![-2.0, 0.75])?;
    let (t_a, t_b, t_c) = (0.2, 0.55, 0.9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = posterior_given_endpoints(&s, &pair, t_c)?;
    let d = pair.dim();
    let mut draws = Array2::zeros((paths, d));
    let mut z = vec![0.0; d];
    let draw = |mean: &[f64], var: f64, z: &mut Vec<f64>, rng: &mut ChaCha8Rng| -> Vec<f64> {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        mean.iter().zip(z.iter()).map(|(m, e)| m + var.sqrt() * e).collect()
    };
    for mut row in draws.rows_mut() {
        let y_c = draw(&start.mean, start.variance, &mut z, &mut rng);
        let p_b = transition_posterior(&s, &pair.x0, &y_c, t_b, t_c)?;
        let y_b = draw(&p_b.mean, p_b.variance, &mut z, &mut rng);
        let p_a = transition_posterior(&s, &pair.x0, &y_b, t_a, t_b)?;
        let y_a = draw(&p_a.mean, p_a.variance, &mut z, &mut rng);
        row.assign(&ndarray::ArrayView1::from(&y_a));
    }
    let target = posterior_given_endpoints(&s, &pair, t_a)?;
    let n = paths as f64;
    let mut worst = 0.0f64;
    for i in 0..d {
        let col = draws.column(i);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se_mean = (target.variance / n).sqrt();
        let se_var = target.variance * (2.0 / (n - 1.0)).sqrt();
        worst = worst
            .max((mean - target.mean[i]).abs() / se_mean)
            .max((var - target.variance).abs() / se_var);
    }
    Ok((worst < 4.0, format!("worst deviation = {worst:.2} standard errors over {paths} paths")))
}

fn gradient_oracle() -> Outcome {
    let arch = ArchSpec {
        hidden: 8,
        depth: 2,
        time_dim: 8,
        ..ArchSpec::default()
    };
    let p = random_regressor(arch, ObjectiveKind::Endpoint, 2, 1, 17)?;
    let r = regressor_gradient_check(&p, 4, ProbeSelection::Random(20), 1e-5, 18)?;
    Ok((
        r.max_relative_error < 1e-5,
        format!("worst relative error over {} probes = {:.1e}", r.probes.len(), r.max_relative_error),
    ))
}

fn curvature_cross_checks() -> Outcome {
    let grid = curvature_grid(CURVATURE_GRID, CURVATURE_T_MIN)?;
    let c = Coupling::standard_normal(CURVATURE_SAMPLES, 2, 0)?;
    let sb = default_schedule();
    let vp = NoiseSchedule::vp(crate::schedule::VP_A, crate::schedule::VP_B)?;
    let sb_num = curvature_numeric(&Interpolant::BridgeMean(sb.clone()), &c, &grid)?;
    let sb_cf = curvature_sb_closed_form(&sb, &c, &grid, false)?;
    let vp_num = curvature_numeric(&Interpolant::Diffusion(vp.clone()), &c, &grid)?;
    let vp_cf = curvature_vp_closed_form(&vp, &c, &grid, false)?;
    let flat = curvature_numeric(&Interpolant::BridgeMean(NoiseSchedule::constant(1.0)?), &c, &grid)?;
    let e_sb = relative_error(sb_cf.mean, sb_num.mean);
    let e_vp = relative_error(vp_cf.mean, vp_num.mean);
    let ratio = vp_num.mean / sb_num.mean;
    Ok((
        e_sb < 1e-4 && e_vp < 1e-3 && flat.mean < 1e-8 && ratio >= 5.0,
        format!(
            "bridge {:.4} (closed-form rel. err {e_sb:.1e}), vp {:.4} (rel. err {e_vp:.1e}), ratio {ratio:.2}, constant-rate {:.1e}",
            sb_num.mean, vp_num.mean, flat.mean
        ),
    ))
}

fn sampler_oracles() -> Outcome {
    let s = default_schedule();
    let problem = ProblemSpec::Deblur {
        side: 8,
        taps: vec![0.25, 0.5, 0.25],
        noise_std: 0.0,
        condition_stride: Some(2),
    }
    .build()?;
    let inverse = problem.inverse().expect("deblur is an inverse problem");
    let batch = problem.source().sample_pairs(&mut ChaCha8Rng::seed_from_u64(5), 6)?;
    let oracle = OraclePredictor { x0: batch.x0.clone() };
    let guide = Guidance {
        degrade: &inverse.degrade,
        side: inverse.side.as_ref(),
    };
    let cond = batch.condition.as_ref().map(|c| c.view());
    let mut failures = Vec::new();
    for (method, steps, rate) in [
        (SamplerMethod::EulerSde, 5, 0.0),
        (SamplerMethod::Ode, 1, 0.0),
        (SamplerMethod::Ode, 4, 0.0),
        (SamplerMethod::Heun, 4, 0.0),
        (SamplerMethod::EulerSdeGuided, 5, 0.5),
    ] {
        let mut cfg = SamplerConfig::new(method).with_steps(steps).with_seed(1);
        cfg.guidance_rate = rate;
        let run = sample(&cfg, &oracle, &s, batch.y1.view(), cond, Some(guide))?;
        if run.x0_hat != batch.x0 {
            failures.push(format!("{}:{steps}", method.name()));
        }
    }
    Ok((
        failures.is_empty(),
        if failures.is_empty() {
            "all samplers return X0 exactly".into()
        } else {
            format!("mismatch for {}", failures.join(", "))
        },
    ))
}

fn zero_noise_equivalence() -> Outcome {
    let s = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y1 = Array2::from_shape_simple_fn((32, 2), || rng.sample(StandardNormal));
    let arch = ArchSpec {
        hidden: 16,
        depth: 2,
        time_dim: 8,
        ..ArchSpec::default()
    };
    let net = random_regressor(arch, ObjectiveKind::Endpoint, 2, 0, 3)?;
    let mut worst = 0.0f64;
    for n in [1, 3, 7] {
        let mut cfg = SamplerConfig::new(SamplerMethod::EulerSde).with_steps(n);
        cfg.zero_noise = true;
        let a = sample(&cfg, &net, &s, y1.view(), None, None)?.x0_hat;
        cfg.method = SamplerMethod::Ode;
        let b = sample(&cfg, &net, &s, y1.view(), None, None)?.x0_hat;
        worst = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
    }
    Ok((worst < 1e-10, format!("max |sde − ode| = {worst:.1e}")))
}

fn operator_adjoints() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for op in [
        LinearOperator::blur(vec![0.25, 0.5, 0.25], vec![16, 16])?,
        LinearOperator::downsample(2, vec![16, 16])?,
        LinearOperator::blur(vec![1.0 / 3.0; 3], vec![32])?,
        LinearOperator::identity(7),
    ] {
        let x: Vec<f64> = (0..op.input_dim()).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..op.output_dim()).map(|_| rng.sample(StandardNormal)).collect();
        let lhs: f64 = op.apply(&x)?.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(op.adjoint(&y)?).map(|(a, b)| a * b).sum();
        worst = worst.max((lhs - rhs).abs());
    }
    Ok((worst < 1e-10, format!("max |<Ax,y> − <x,Aᵀy>| = {worst:.1e}")))
}

fn checkpoint_round_trip() -> Outcome {
    let arch = ArchSpec {
        hidden: 8,
        depth: 2,
        time_dim: 8,
        ..ArchSpec::default()
    };
    let p = random_regressor(arch, ObjectiveKind::PosteriorLength, 3, 2, 8)?;
    let mut buf = Vec::new();
    write_checkpoint(
        &mut buf,
        &Checkpoint {
            params: p.clone(),
            training: None,
        },
    )?;
    let back = read_checkpoint(buf.as_slice())?.params;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = Array2::from_shape_simple_fn((5, 3), || rng.sample(StandardNormal));
    let c = Array2::from_shape_simple_fn((5, 2), || rng.sample(StandardNormal));
    let times = [0.0, 0.25, 0.5, 0.75, 1.0];
    let a = predict_batch(&p, y.view(), Some(c.view()), &times)?;
    let b = predict_batch(&back, y.view(), Some(c.view()), &times)?;
    let same = a.iter().zip(&b).all(|(x, z)| x.to_bits() == z.to_bits());
    Ok((same, format!("{} bytes, predictions bit-identical = {same}", buf.len())))
}

fn energy_distance_symmetry() -> Outcome {
    let c = Coupling::standard_normal(300, 2, 12)?;
    let ab = energy_distance_unbiased(c.x0.view(), c.y1.view())?;
    let ba = energy_distance_unbiased(c.y1.view(), c.x0.view())?;
    let self_ab = energy_distance_unbiased(c.x0.view(), c.x0.view())?;
    Ok((
        (ab - ba).abs() < 1e-12 && self_ab <= 1e-12,
        format!("|D(a,b) − D(b,a)| = {:.1e}, D(a,a) = {self_ab:.1e}", (ab - ba).abs()),
    ))
}

/// Runs every invariant and collects the results.
pub fn run_checks(opts: &CheckOptions) -> CheckReport {
    let start = Instant::now();
    let paths = opts.mc_paths.unwrap_or(MC_PATHS);
    let fault = opts.fault;
    let checks: Vec<Check> = vec![
        ("schedule-identities", Box::new(schedule_identities)),
        ("schedule-quadrature", Box::new(schedule_quadrature)),
        ("vp-identities", Box::new(vp_identities)),
        ("bridge-boundaries", Box::new(bridge_boundaries)),
        ("velocity-constant-rate", Box::new(move || constant_rate_reduction(fault))),
        ("posterior-consistency", Box::new(move || posterior_consistency(paths, 2024))),
        ("gradient-oracle", Box::new(gradient_oracle)),
        ("curvature-cross-checks", Box::new(curvature_cross_checks)),
        ("sampler-oracles", Box::new(sampler_oracles)),
        ("zero-noise-sde-equals-ode", Box::new(zero_noise_equivalence)),
        ("operator-adjoints", Box::new(operator_adjoints)),
        ("checkpoint-round-trip", Box::new(checkpoint_round_trip)),
        ("energy-distance-symmetry", Box::new(energy_distance_symmetry)),
    ];
    let results = checks
        .into_iter()
        .map(|(name, f)| {
            let t0 = Instant::now();
            let (passed, detail) = match f() {
                Ok(v) => v,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name,
                passed,
                detail,
                elapsed: t0.elapsed(),
            }
        })
        .collect();
    CheckReport {
        results,
        elapsed: start.elapsed(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> CheckOptions {
        CheckOptions {
            fault: None,
            mc_paths: Some(20_000),
        }
    }

    #[test]
    fn suite_is_green() {
        let r = run_checks(&quick());
        assert!(r.all_passed(), "\n{}", r.table());
    }

    #[test]
    fn velocity_fault_is_caught_by_name() {
        let r = run_checks(&CheckOptions {
            fault: Some(Fault::VelocitySign),
            ..quick()
        });
        assert_eq!(r.failed(), vec!["velocity-constant-rate"]);
        assert!(r.table().contains("FAIL"));
    }
}
