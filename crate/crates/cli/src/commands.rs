//! Subcommand implementations. Each returns the lines of its summary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bridgekit::analysis::{
    curvature_grid, curvature_numeric, curvature_sb_closed_form, curvature_vp_closed_form, energy_distance_unbiased,
    Coupling, Interpolant, CURVATURE_GRID, CURVATURE_SAMPLES, CURVATURE_T_MIN,
};
use bridgekit::check::{run_checks, CheckOptions, Fault};
use bridgekit::csv::{format_float, numbered, write_file};
use bridgekit::net::{load_checkpoint, RegressorParams};
use bridgekit::problems::{worker_rng, PairBatch, Problem};
use bridgekit::sampler::{mean_residual, sample, EndpointPredictor, Guidance, OraclePredictor, SampleRun};
use bridgekit::schedule::{NoiseSchedule, ScheduleSpec};
use bridgekit::train::train_new;
use ndarray::{Array2, ArrayView2};
use serde_json::{json, Value};

use crate::config::{RunConfig, CHECKPOINT_FILE, LOSS_FILE};
use crate::CliError;

pub const VERSION: &str = env!("BRIDGEKIT_BUILD_VERSION");

/// Stream offsets of [`worker_rng`] used for evaluation data.
const TEST_STREAM: u64 = 1 << 32;
const REFERENCE_STREAM: u64 = (1 << 32) + 1;

pub const CHECK_BUDGET_SECS: f64 = 60.0;

fn runtime(e: bridgekit::Error) -> CliError {
    match e {
        bridgekit::Error::Incompatible(m) => CliError::Incompatible(m),
        bridgekit::Error::Config(m) => CliError::Config(m),
        other => CliError::Runtime(other.to_string()),
    }
}

fn out_dir(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_matrix(path: &Path, prefix: &str, m: ArrayView2<'_, f64>) -> Result<(), CliError> {
    let header = numbered(prefix, m.ncols());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = m.rows().into_iter().map(|r| r.iter().map(|&v| format_float(v)).collect());
    write_file(path, &header, rows).map_err(runtime)
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_manifest(dir: &Path, cfg: &RunConfig, command: &str, extra: Value) -> Result<(), CliError> {
    let mut m = json!({
        "command": command,
        "version": VERSION,
        "seed": cfg.seed,
        "config_sha256": cfg.sha256(),
        "config": serde_json::to_value(cfg).expect("config serializes"),
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut m, extra) {
        m.extend(e);
    }
    write_json(&dir.join("manifest.json"), &m)
}

fn schedule(spec: &ScheduleSpec) -> Result<NoiseSchedule, CliError> {
    spec.build().map_err(|e| CliError::Config(format!("schedule: {e}")))
}

fn problem(cfg: &RunConfig) -> Result<Problem, CliError> {
    cfg.problem.build().map_err(|e| CliError::Config(format!("problem: {e}")))
}

pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<String>, CliError> {
    let dir = out_dir(cfg, out)?;
    let problem = problem(cfg)?;
    let tc = cfg.train_config(Some(&dir));
    let start = Instant::now();
    let outcome = train_new(&tc, problem.source()).map_err(runtime)?;
    let final_loss = outcome.losses.last().copied().unwrap_or(f64::NAN);
    write_manifest(
        &dir,
        cfg,
        "train",
        json!({ "steps": tc.steps, "final_loss": final_loss, "outputs": [CHECKPOINT_FILE, LOSS_FILE] }),
    )?;
    Ok(vec![
        format!("steps: {}", tc.steps),
        format!("final_loss: {}", format_float(final_loss)),
        format!("elapsed_s: {:.2}", start.elapsed().as_secs_f64()),
        format!("checkpoint: {}", dir.join(CHECKPOINT_FILE).display()),
    ])
}

/// Loads a checkpoint and checks it fits the configured problem and objective.
pub fn load_compatible(path: &Path, cfg: &RunConfig, state_dim: usize, cond_dim: usize) -> Result<RegressorParams, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let params = load_checkpoint(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?
        .params;
    let net = params.config();
    let mut problems = Vec::new();
    if net.objective != cfg.train.objective {
        problems.push(format!("objective {:?} vs configured {:?}", net.objective, cfg.train.objective));
    }
    if net.state_dim != state_dim || net.cond_dim != cond_dim {
        problems.push(format!(
            "widths state {}/cond {} vs problem state {state_dim}/cond {cond_dim}",
            net.state_dim, net.cond_dim
        ));
    }
    if net.arch.hidden != cfg.train.arch.hidden {
        problems.push(format!("hidden width {} vs configured {}", net.arch.hidden, cfg.train.arch.hidden));
    }
    if problems.is_empty() {
        Ok(params)
    } else {
        Err(CliError::Incompatible(format!("{}: {}", path.display(), problems.join("; "))))
    }
}

fn test_pairs(problem: &Problem, seed: u64, n: usize) -> Result<PairBatch, CliError> {
    problem
        .source()
        .sample_pairs(&mut worker_rng(seed, TEST_STREAM), n)
        .map_err(runtime)
}

fn reference_set(problem: &Problem, seed: u64, n: usize) -> Result<Option<Array2<f64>>, CliError> {
    match problem {
        Problem::Toy(t) => Ok(Some(
            t.target.sample_with(&mut worker_rng(seed, REFERENCE_STREAM), n).map_err(runtime)?,
        )),
        Problem::Inverse(_) => Ok(None),
    }
}

fn write_trajectory(path: &Path, run: &SampleRun) -> Result<(), CliError> {
    let traj = &run.trajectory;
    let d = run.x0_hat.ncols();
    let mut header = vec!["chain".to_string(), "step".to_string(), "t".to_string()];
    header.extend(numbered("comp", d));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for i in 0..run.x0_hat.nrows() {
        for (k, (t, state)) in traj.chain(i).into_iter().enumerate() {
            let mut row = vec![i.to_string(), k.to_string(), format_float(t)];
            row.extend(state.iter().map(|&v| format_float(v)));
            rows.push(row);
        }
    }
    write_file(path, &header, rows).map_err(runtime)
}

/// Metrics of a finished sampler run.
fn sample_metrics(problem: &Problem, test: &PairBatch, run: &SampleRun, seed: u64) -> Result<Vec<(String, f64)>, CliError> {
    let n = test.len();
    let mut out = Vec::new();
    let sq = |x: ArrayView2<'_, f64>| {
        x.iter().zip(test.y1.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64
    };
    out.push(("transport_cost_generated".into(), sq(run.x0_hat.view())));
    out.push(("transport_cost_independent".into(), sq(test.x0.view())));
    if n >= 2 {
        if let Some(reference) = reference_set(problem, seed, n)? {
            let ed = energy_distance_unbiased(run.x0_hat.view(), reference.view()).map_err(runtime)?;
            out.push(("energy_distance".into(), ed));
        }
    }
    if let Some(inv) = problem.inverse() {
        let r = mean_residual(&inv.degrade, run.x0_hat.view(), test.y1.view()).map_err(runtime)?;
        out.push(("mean_residual".into(), r));
    }
    Ok(out)
}

pub struct SampleArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub n: usize,
    pub out: Option<&'a Path>,
    /// Replace the network by the true endpoints of the drawn test pairs.
    pub oracle: bool,
}

pub fn sample_cmd(cfg: &RunConfig, args: &SampleArgs<'_>) -> Result<Vec<String>, CliError> {
    let problem = problem(cfg)?;
    let s = schedule(&cfg.schedule)?;
    let source = problem.source();
    let params = match (args.oracle, args.checkpoint) {
        (true, _) => None,
        (false, Some(p)) => Some(load_compatible(p, cfg, source.state_dim(), source.cond_dim())?),
        (false, None) => return Err(CliError::Config("sample needs --checkpoint".into())),
    };
    let dir = out_dir(cfg, args.out)?;
    let test = test_pairs(&problem, cfg.seed, args.n)?;
    let scfg = cfg.sampler_config();
    let mut summary = vec![
        format!("method: {}", scfg.method.name()),
        format!("n_steps: {}", scfg.steps()),
        format!("n: {}", args.n),
    ];
    if args.oracle {
        write_matrix(&dir.join("x0.csv"), "comp", test.x0.view())?;
    }
    if args.n == 0 {
        write_matrix(&dir.join("samples.csv"), "comp", Array2::<f64>::zeros((0, source.state_dim())).view())?;
        write_manifest(&dir, cfg, "sample", json!({ "n": 0, "outputs": ["samples.csv"] }))?;
        return Ok(summary);
    }
    let oracle;
    let net: &dyn EndpointPredictor = match &params {
        Some(p) => p,
        None => {
            oracle = OraclePredictor { x0: test.x0.clone() };
            &oracle
        }
    };
    let guide = problem.inverse().map(|inv| Guidance {
        degrade: &inv.degrade,
        side: inv.side.as_ref(),
    });
    let cond = test.condition.as_ref().map(|c| c.view());
    let run = sample(&scfg, net, &s, test.y1.view(), cond, guide).map_err(runtime)?;
    for w in &run.trajectory.warnings {
        eprintln!("warning: {w}");
    }
    write_matrix(&dir.join("samples.csv"), "comp", run.x0_hat.view())?;
    let mut outputs = vec!["samples.csv"];
    if scfg.record_trajectory {
        write_trajectory(&dir.join("trajectory.csv"), &run)?;
        outputs.push("trajectory.csv");
    }
    let metrics = sample_metrics(&problem, &test, &run, cfg.seed)?;
    for (k, v) in &metrics {
        summary.push(format!("{k}: {}", format_float(*v)));
    }
    let metrics: serde_json::Map<String, Value> = metrics.into_iter().map(|(k, v)| (k, json!(v))).collect();
    write_manifest(
        &dir,
        cfg,
        "sample",
        json!({ "n": args.n, "checkpoint": args.checkpoint, "oracle": args.oracle, "metrics": metrics, "outputs": outputs }),
    )?;
    Ok(summary)
}

pub fn curvature(cfg: &RunConfig, out: Option<&Path>, n: Option<usize>) -> Result<Vec<String>, CliError> {
    let sb = schedule(&cfg.schedule)?;
    if !sb.kind().is_bridge() {
        return Err(CliError::Config(format!("curvature compares a bridge schedule, got {}", sb.kind())));
    }
    let vp = schedule(&ScheduleSpec::Vp {
        a: bridgekit::schedule::VP_A,
        b: bridgekit::schedule::VP_B,
    })?;
    let n = n.unwrap_or(CURVATURE_SAMPLES);
    if n == 0 {
        return Err(CliError::Config("curvature needs --n > 0".into()));
    }
    let coupling = Coupling::standard_normal(n, 2, cfg.seed).map_err(runtime)?;
    let grid = curvature_grid(CURVATURE_GRID, CURVATURE_T_MIN).map_err(runtime)?;
    let sb_num = curvature_numeric(&Interpolant::BridgeMean(sb.clone()), &coupling, &grid).map_err(runtime)?;
    let vp_num = curvature_numeric(&Interpolant::Diffusion(vp.clone()), &coupling, &grid).map_err(runtime)?;
    let sb_cf = curvature_sb_closed_form(&sb, &coupling, &grid, false).map_err(runtime)?;
    let vp_cf = curvature_vp_closed_form(&vp, &coupling, &grid, false).map_err(runtime)?;
    let dir = out_dir(cfg, out)?;
    let rows = sb_num
        .profile
        .iter()
        .zip(&vp_num.profile)
        .map(|(&(t, a), &(_, b))| vec![format_float(t), format_float(a), format_float(b)]);
    write_file(&dir.join("curvature.csv"), &["t", "curv_sb", "curv_vp"], rows).map_err(runtime)?;
    let ratio = vp_num.mean / sb_num.mean;
    let report = json!({
        "mean_sb": sb_num.mean,
        "mean_vp": vp_num.mean,
        "ratio": ratio,
        "closed_form_sb": sb_cf.mean,
        "closed_form_vp": vp_cf.mean,
        "schedule_sb": sb_num.schedule_id,
        "schedule_vp": vp_num.schedule_id,
        "coupling": coupling.description,
    });
    write_json(&dir.join("curvature.json"), &report)?;
    write_manifest(&dir, cfg, "curvature", json!({ "outputs": ["curvature.csv", "curvature.json"] }))?;
    Ok(vec![
        format!("mean_sb: {}", format_float(sb_num.mean)),
        format!("mean_vp: {}", format_float(vp_num.mean)),
        format!("ratio: {ratio:.4}"),
    ])
}

pub fn schedule_dump(cfg: &RunConfig, out: Option<&Path>, n: Option<usize>) -> Result<Vec<String>, CliError> {
    let s = schedule(&cfg.schedule)?;
    if !s.kind().is_bridge() {
        return Err(CliError::Config(format!("schedule-dump needs a bridge schedule, got {}", s.kind())));
    }
    let n = n.unwrap_or(101);
    if n < 2 {
        return Err(CliError::Config("schedule-dump needs --n of at least 2".into()));
    }
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / (n - 1) as f64;
        let (s2, s2_hat) = s.variances_at(t).map_err(runtime)?;
        rows.push(vec![
            format_float(t),
            format_float(s.beta_at(t).map_err(runtime)?),
            format_float(s2),
            format_float(s2_hat),
            format_float(s.posterior_variance_at(t).map_err(runtime)?),
        ]);
    }
    let dir = out_dir(cfg, out)?;
    write_file(
        &dir.join("schedule.csv"),
        &["t", "beta", "sigma2", "sigma2_hat", "var_posterior"],
        rows,
    )
    .map_err(runtime)?;
    Ok(vec![
        format!("schedule: {}", s.id()),
        format!("total_variance: {}", format_float(s.total_variance())),
        format!("rows: {n}"),
    ])
}

pub fn toy_demo(cfg: &RunConfig, out: Option<&Path>, n: Option<usize>) -> Result<Vec<String>, CliError> {
    let problem = problem(cfg)?;
    if !matches!(problem, Problem::Toy(_)) {
        return Err(CliError::Config("toy-demo needs a toy problem".into()));
    }
    let n = n.unwrap_or(2000);
    if n < 2 {
        return Err(CliError::Config("toy-demo needs --n of at least 2".into()));
    }
    let dir = out_dir(cfg, out)?;
    let s = schedule(&cfg.schedule)?;
    let tc = cfg.train_config(Some(&dir));
    let start = Instant::now();
    let outcome = train_new(&tc, problem.source()).map_err(runtime)?;
    let train_secs = start.elapsed().as_secs_f64();
    let test = test_pairs(&problem, cfg.seed, n)?;
    let run = sample(&cfg.sampler_config(), &outcome.params, &s, test.y1.view(), None, None).map_err(runtime)?;
    let reference = reference_set(&problem, cfg.seed, n)?.expect("toy problems have a reference set");
    write_matrix(&dir.join("before.csv"), "comp", test.y1.view())?;
    write_matrix(&dir.join("after.csv"), "comp", run.x0_hat.view())?;
    write_matrix(&dir.join("reference.csv"), "comp", reference.view())?;
    let mut metrics = sample_metrics(&problem, &test, &run, cfg.seed)?;
    metrics.push(("train_seconds".into(), train_secs));
    let mut summary: Vec<String> = metrics.iter().map(|(k, v)| format!("{k}: {}", format_float(*v))).collect();
    summary.insert(0, format!("steps: {}", tc.steps));
    let metrics: serde_json::Map<String, Value> = metrics.into_iter().map(|(k, v)| (k, json!(v))).collect();
    write_manifest(
        &dir,
        cfg,
        "toy-demo",
        json!({
            "steps": tc.steps,
            "final_loss": outcome.losses.last(),
            "metrics": metrics,
            "outputs": [CHECKPOINT_FILE, LOSS_FILE, "before.csv", "after.csv", "reference.csv"],
        }),
    )?;
    Ok(summary)
}

pub fn check(fault: Option<Fault>) -> Result<Vec<String>, CliError> {
    let report = run_checks(&CheckOptions { fault, mc_paths: None });
    print!("{}", report.table());
    let secs = report.elapsed.as_secs_f64();
    if secs > CHECK_BUDGET_SECS {
        eprintln!("warning: check took {secs:.1}s, over the {CHECK_BUDGET_SECS:.0}s budget");
    }
    if report.all_passed() {
        Ok(vec![format!("all {} checks passed in {secs:.2}s", report.results.len())])
    } else {
        Err(CliError::CheckFailed(report.failed().iter().map(|s| s.to_string()).collect()))
    }
}
