//! End-to-end acceptance run. Every criterion prints one PASS/FAIL line; the
//! test fails if any criterion fails. Runs sequentially so the wall-clock
//! budgets are measured on an otherwise idle core.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use bridgekit::analysis::{
    curvature_grid, curvature_numeric, energy_distance_unbiased, random_regressor, regressor_gradient_check,
    transport_cost_check, Coupling, Interpolant, ProbeSelection, CURVATURE_GRID, CURVATURE_SAMPLES, CURVATURE_T_MIN,
};
use bridgekit::bridge::{posterior_given_endpoints, transition_posterior, velocity, EndpointPair, ObjectiveKind};
use bridgekit::net::{AdamConfig, ArchSpec, RegressorParams};
use bridgekit::problems::{worker_rng, Problem, ProblemSpec};
use bridgekit::sampler::{
    mean_residual, sample, GaussianPosteriorMean, Guidance, OraclePredictor, SamplerConfig, SamplerMethod,
};
use bridgekit::schedule::NoiseSchedule;
use bridgekit::train::{train_new, TrainConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = (bool, String);

fn schedule() -> NoiseSchedule {
    NoiseSchedule::quadratic_flip(1e-4, 0.3).unwrap()
}

/// Box-Muller on the test's own generator so the Monte-Carlo oracle shares no
/// sampling code with the library.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn posterior_consistency() -> Verdict {
    let start = Instant::now();
    let s = schedule();
    let pair = EndpointPair::new(vec![1.5, -0.5, 0.25], vec![-1.0, 2.0, 0.5]).unwrap();
    let (t_a, t_b, t_c) = (0.25, 0.5, 0.8);
    let paths = 100_000;
    let d = pair.x0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let top = posterior_given_endpoints(&s, &pair, t_c).unwrap();
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let draw = |mean: &[f64], var: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        mean.iter().map(|m| m + var.sqrt() * gaussian(rng)).collect()
    };
    for _ in 0..paths {
        let y_c = draw(&top.mean, top.variance, &mut rng);
        let p = transition_posterior(&s, &pair.x0, &y_c, t_b, t_c).unwrap();
        let y_b = draw(&p.mean, p.variance, &mut rng);
        let p = transition_posterior(&s, &pair.x0, &y_b, t_a, t_b).unwrap();
        let y_a = draw(&p.mean, p.variance, &mut rng);
        for i in 0..d {
            sum[i] += y_a[i];
            sum_sq[i] += y_a[i] * y_a[i];
        }
    }
    // Closed-form moments at t_a from σ², σ̂² directly.
    let (s2, s2h) = s.variances_at(t_a).unwrap();
    let total = s2 + s2h;
    let var = s2 * s2h / total;
    let n = paths as f64;
    let mut worst = 0.0f64;
    for i in 0..d {
        let mean_exact = (s2h * pair.x0[i] + s2 * pair.y1[i]) / total;
        let mean = sum[i] / n;
        let v = (sum_sq[i] - n * mean * mean) / (n - 1.0);
        worst = worst
            .max((mean - mean_exact).abs() / (var / n).sqrt())
            .max((v - var).abs() / (var * (2.0 / (n - 1.0)).sqrt()));
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst < 4.0 && secs < 10.0,
        format!("worst deviation {worst:.2} SE at {paths} paths, {secs:.2}s"),
    )
}

fn boundary_exactness() -> Verdict {
    let mut worst = 0.0f64;
    for s in [schedule(), NoiseSchedule::constant(1.7).unwrap(), NoiseSchedule::quadratic_flip(0.2, 3.0).unwrap()] {
        let pair = EndpointPair::new(vec![3.0, -2.0, 1e-3], vec![-7.5, 0.1, 4.0]).unwrap();
        let p0 = posterior_given_endpoints(&s, &pair, 0.0).unwrap();
        let p1 = posterior_given_endpoints(&s, &pair, 1.0).unwrap();
        for i in 0..3 {
            worst = worst.max((p0.mean[i] - pair.x0[i]).abs()).max((p1.mean[i] - pair.y1[i]).abs());
        }
        worst = worst.max(p0.variance.abs()).max(p1.variance.abs());
    }
    (worst <= 1e-12, format!("max boundary error {worst:.1e}"))
}

fn constant_beta_reductions() -> Verdict {
    let (mut mean_err, mut vel_err) = (0.0f64, 0.0f64);
    for beta in [0.05, 1.0, 4.0] {
        let s = NoiseSchedule::constant(beta).unwrap();
        let pair = EndpointPair::new(vec![0.3, -1.2], vec![2.0, 0.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..=2000 {
            let t = 1e-3 + (1.0 - 1e-3) * k as f64 / 2000.0;
            let post = posterior_given_endpoints(&s, &pair, t).unwrap();
            for i in 0..2 {
                mean_err = mean_err.max((post.mean[i] - ((1.0 - t) * pair.x0[i] + t * pair.y1[i])).abs());
            }
            let y_t: Vec<f64> = post.mean.iter().map(|m| m + gaussian(&mut rng)).collect();
            let v = velocity(&s, &pair.x0, &y_t, t).unwrap();
            for i in 0..2 {
                let expect = (y_t[i] - pair.x0[i]) / t;
                vel_err = vel_err.max((v[i] - expect).abs() / expect.abs().max(1e-6));
            }
        }
    }
    (
        mean_err <= 1e-12 && vel_err <= 1e-9,
        format!("mean error {mean_err:.1e}, velocity relative error {vel_err:.1e}"),
    )
}

fn gradient_oracle() -> Verdict {
    let arch = ArchSpec {
        hidden: 8,
        depth: 2,
        time_dim: 8,
        ..ArchSpec::default()
    };
    let mut worst = 0.0f64;
    let mut probes = 0;
    for (k, objective) in [ObjectiveKind::Endpoint, ObjectiveKind::EndpointWithScore].into_iter().enumerate() {
        let p = random_regressor(arch.clone(), objective, 3, 2, 100 + k as u64).unwrap();
        let r = regressor_gradient_check(&p, 4, ProbeSelection::Random(20), 1e-5, 200 + k as u64).unwrap();
        worst = worst.max(r.max_relative_error);
        probes += r.probes.len();
    }
    (worst < 1e-5, format!("worst relative error {worst:.2e} over {probes} probes"))
}

fn oracle_sampling() -> Verdict {
    let s = schedule();
    let problem = ProblemSpec::Deblur {
        side: 8,
        taps: vec![0.25, 0.5, 0.25],
        noise_std: 0.0,
        condition_stride: Some(2),
    }
    .build()
    .unwrap();
    let inv = problem.inverse().unwrap();
    let batch = problem.source().sample_pairs(&mut worker_rng(8, 0), 12).unwrap();
    let oracle = OraclePredictor { x0: batch.x0.clone() };
    let guide = Guidance {
        degrade: &inv.degrade,
        side: inv.side.as_ref(),
    };
    let cond = batch.condition.as_ref().map(|c| c.view());
    let mut worst = 0.0f64;
    for (method, n, psi) in [
        (SamplerMethod::EulerSde, 5, 0.0),
        (SamplerMethod::Ode, 1, 0.0),
        (SamplerMethod::Heun, 4, 0.0),
        (SamplerMethod::EulerSdeGuided, 5, 0.5),
    ] {
        let mut cfg = SamplerConfig::new(method).with_steps(n).with_seed(2);
        cfg.guidance_rate = psi;
        let run = sample(&cfg, &oracle, &s, batch.y1.view(), cond, Some(guide)).unwrap();
        worst = run.x0_hat.iter().zip(&batch.x0).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    (worst <= 1e-12, format!("max |X̂0 − X0| = {worst:.1e} across four samplers"))
}

/// Settings for the toy transport run.
const TOY_STEPS: u64 = 20_000;
const TOY_BATCH: usize = 64;
const TOY_SAMPLES: usize = 2000;
const TOY_SAMPLER: SamplerMethod = SamplerMethod::Heun;
const TOY_SAMPLER_STEPS: usize = 10;
const CALIBRATION_RUNS: u64 = 8;

struct ToyModel {
    params: RegressorParams,
    problem: Problem,
    train_secs: f64,
}

fn train_toy() -> ToyModel {
    let problem = ProblemSpec::default().build().unwrap();
    let cfg = TrainConfig {
        objective: ObjectiveKind::Endpoint,
        steps: TOY_STEPS,
        batch: TOY_BATCH,
        optimizer: AdamConfig::default(),
        seed: 0,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train_new(&cfg, problem.source()).unwrap();
    ToyModel {
        params: out.params,
        problem,
        train_secs: start.elapsed().as_secs_f64(),
    }
}

fn toy_sampler() -> SamplerConfig {
    SamplerConfig::new(TOY_SAMPLER).with_steps(TOY_SAMPLER_STEPS).with_seed(0)
}

fn toy_transport(model: &ToyModel) -> Verdict {
    let Problem::Toy(toy) = &model.problem else { unreachable!() };
    let test = model.problem.source().sample_pairs(&mut worker_rng(1, 10), TOY_SAMPLES).unwrap();
    let held_out = toy.target.sample_with(&mut worker_rng(1, 11), TOY_SAMPLES).unwrap();
    let run = sample(&toy_sampler(), &model.params, &schedule(), test.y1.view(), None, None).unwrap();
    let ed = energy_distance_unbiased(run.x0_hat.view(), held_out.view()).unwrap();
    // Noise scale of the estimator between two same-distribution draws.
    let calibration = (0..CALIBRATION_RUNS)
        .map(|k| {
            let a = toy.target.sample_with(&mut worker_rng(2, 2 * k), TOY_SAMPLES).unwrap();
            let b = toy.target.sample_with(&mut worker_rng(2, 2 * k + 1), TOY_SAMPLES).unwrap();
            energy_distance_unbiased(a.view(), b.view()).unwrap().abs()
        })
        .sum::<f64>()
        / CALIBRATION_RUNS as f64;
    let threshold = 2.0 * calibration;
    (
        ed <= threshold && model.train_secs < 300.0,
        format!(
            "energy distance {ed:.3e} vs threshold {threshold:.3e} (calibration {calibration:.3e}); trained {TOY_STEPS} steps in {:.0}s",
            model.train_secs
        ),
    )
}

fn curvature_ordering() -> Verdict {
    let c = Coupling::standard_normal(CURVATURE_SAMPLES, 2, 7).unwrap();
    let grid = curvature_grid(CURVATURE_GRID, CURVATURE_T_MIN).unwrap();
    let sb = curvature_numeric(&Interpolant::BridgeMean(schedule()), &c, &grid).unwrap().mean;
    let vp_s = NoiseSchedule::vp(19.9, 0.1).unwrap();
    let vp = curvature_numeric(&Interpolant::Diffusion(vp_s), &c, &grid).unwrap().mean;
    let flat = curvature_numeric(&Interpolant::BridgeMean(NoiseSchedule::constant(0.6).unwrap()), &c, &grid)
        .unwrap()
        .mean;
    let ratio = vp / sb;
    (
        ratio >= 5.0 && flat.abs() <= 1e-8,
        format!("bridge {sb:.4}, vp {vp:.4}, ratio {ratio:.2}, constant-rate {flat:.1e}"),
    )
}

fn heun_vs_euler() -> Verdict {
    let s = schedule();
    let noise = 0.5;
    let problem = ProblemSpec::LinearGaussian { noise_std: noise }.build().unwrap();
    let net = GaussianPosteriorMean {
        schedule: s.clone(),
        prior_var: 1.0,
        obs_var: noise * noise,
    };
    let rmse = |x: &Array2<f64>, y: &Array2<f64>| {
        (x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
    };
    let (mut euler, mut heun) = (0.0, 0.0);
    let seeds = 64;
    for seed in 0..seeds {
        let batch = problem.source().sample_pairs(&mut worker_rng(seed, 0), 256).unwrap();
        for (method, acc) in [(SamplerMethod::EulerSde, &mut euler), (SamplerMethod::Heun, &mut heun)] {
            let cfg = SamplerConfig::new(method).with_steps(4).with_seed(seed);
            let run = sample(&cfg, &net, &s, batch.y1.view(), None, None).unwrap();
            *acc += rmse(&run.x0_hat, &batch.x0) / seeds as f64;
        }
    }
    (heun < euler, format!("terminal RMSE heun {heun:.4} vs euler {euler:.4} over {seeds} seeds"))
}

fn guidance() -> Verdict {
    let s = schedule();
    let problem = ProblemSpec::Deblur {
        side: 16,
        taps: vec![0.25, 0.5, 0.25],
        noise_std: 0.01,
        condition_stride: None,
    }
    .build()
    .unwrap();
    let inv = problem.inverse().unwrap();
    // A briefly trained regressor: useful but far from exact.
    let cfg = TrainConfig {
        arch: ArchSpec {
            hidden: 64,
            depth: 2,
            time_dim: 16,
            ..ArchSpec::default()
        },
        steps: 300,
        batch: 32,
        seed: 5,
        ..TrainConfig::default()
    };
    let net = train_new(&cfg, problem.source()).unwrap().params;
    let guide = Guidance {
        degrade: &inv.degrade,
        side: None,
    };
    let (mut plain, mut guided) = (0.0, 0.0);
    let seeds = 32;
    for seed in 0..seeds {
        let batch = problem.source().sample_pairs(&mut worker_rng(1000 + seed, 0), 8).unwrap();
        for (psi, acc) in [(0.0, &mut plain), (0.5, &mut guided)] {
            let mut sc = SamplerConfig::new(SamplerMethod::EulerSdeGuided).with_seed(seed);
            sc.guidance_rate = psi;
            let run = sample(&sc, &net, &s, batch.y1.view(), None, Some(guide)).unwrap();
            *acc += mean_residual(&inv.degrade, run.x0_hat.view(), batch.y1.view()).unwrap() / seeds as f64;
        }
    }
    (guided < plain, format!("mean residual ψ=0.5 {guided:.4e} vs ψ=0 {plain:.4e} over {seeds} seeds"))
}

fn transport_cost(model: &ToyModel) -> Verdict {
    let test = model.problem.source().sample_pairs(&mut worker_rng(3, 0), TOY_SAMPLES).unwrap();
    let cost = transport_cost_check(&toy_sampler(), &model.params, &schedule(), &test).unwrap();
    (
        cost.generated <= 1.05 * cost.independent,
        format!(
            "generated {:.4} vs independent {:.4} (ratio {:.3})",
            cost.generated,
            cost.independent,
            cost.ratio()
        ),
    )
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bridgekit"))
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn determinism(dir: &Path) -> Verdict {
    let config = dir.join("det.json");
    std::fs::write(
        &config,
        r#"{"seed": 11, "problem": {"kind": "toy"},
            "train": {"steps": 150, "arch": {"hidden": 32, "depth": 2, "time_dim": 16}},
            "sampler": {"method": "euler-sde", "n_steps": 8}}"#,
    )
    .unwrap();
    let read = |p: &Path| std::fs::read(p).unwrap();
    let mut losses = Vec::new();
    let mut samples = Vec::new();
    for k in 0..2 {
        let out = dir.join(format!("det{k}"));
        run_ok(bin().env_remove("BRIDGEKIT_SEED").arg("train").arg("--config").arg(&config).arg("--out").arg(&out));
        losses.push(read(&out.join("loss.csv")));
        run_ok(
            bin()
                .env_remove("BRIDGEKIT_SEED")
                .args(["sample", "--n", "300", "--config"])
                .arg(&config)
                .arg("--checkpoint")
                .arg(dir.join("det0/checkpoint.bin"))
                .arg("--out")
                .arg(&out),
        );
        samples.push(read(&out.join("samples.csv")));
    }
    let same_loss = losses[0] == losses[1];
    let same_samples = samples[0] == samples[1];
    (
        same_loss && same_samples && !losses[0].is_empty(),
        format!(
            "loss CSVs identical: {same_loss} ({} bytes), sample CSVs identical: {same_samples} ({} bytes)",
            losses[0].len(),
            samples[0].len()
        ),
    )
}

fn check_subcommand() -> Verdict {
    let start = Instant::now();
    let out = bin().arg("check").output().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let table = String::from_utf8_lossy(&out.stdout);
    let n_pass = table.lines().filter(|l| l.contains(" PASS ")).count();
    (
        out.status.success() && secs < 60.0,
        format!("exit {:?}, {n_pass} invariants passed in {secs:.2}s", out.status.code()),
    )
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut record = |id: u32, name: &'static str, v: Verdict| {
        println!("criterion {id:>2} {name:<26} {} {}", if v.0 { "PASS" } else { "FAIL" }, v.1);
        results.push((id, name, v));
    };
    record(1, "posterior-consistency", posterior_consistency());
    record(2, "boundary-exactness", boundary_exactness());
    record(3, "constant-beta-reductions", constant_beta_reductions());
    record(4, "gradient-oracle", gradient_oracle());
    record(5, "perfect-oracle-sampling", oracle_sampling());
    let toy = train_toy();
    record(6, "toy-transport", toy_transport(&toy));
    record(7, "curvature-ordering", curvature_ordering());
    record(8, "heun-vs-euler", heun_vs_euler());
    record(9, "guidance", guidance());
    record(10, "transport-cost", transport_cost(&toy));
    record(11, "determinism", determinism(dir.path()));
    record(12, "check-subcommand", check_subcommand());
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.2 .0)
        .map(|r| format!("{} ({})", r.0, r.1))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
