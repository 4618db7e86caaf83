//! Bridge-matching training: draw endpoint pairs and a time, build the bridge
//! state in closed form, regress the chosen objective, take an Adam step.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::PathBuf;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bridge::{
    objective_target, ode_point, posterior_given_endpoints, sample_bridge_point, BridgeSample, EndpointPair,
    ObjectiveKind,
};
use crate::csv;
use crate::error::{check_dim, Error, Result};
use crate::net::{
    adam_step, backward, forward_batch, save_checkpoint, AdamConfig, AdamState, ArchSpec, Checkpoint, NetConfig,
    RegressorParams, TrainingState,
};
use crate::problems::{PairBatch, PairSource};
use crate::schedule::{NoiseSchedule, ScheduleSpec};

/// How the bridge state `Y_t` is built from the endpoints during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BridgeMode {
    /// Draw `Y_t` from the Gaussian posterior.
    #[default]
    Sde,
    /// Use the posterior mean (deterministic interpolant).
    Ode,
}

/// Distribution of training times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeSampling {
    /// `t ~ U(0, 1)`.
    #[default]
    Continuous,
    /// `t` uniform over the `grid_size` nodes of `linspace(0, 1, grid_size)`.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub schedule: ScheduleSpec,
    pub arch: ArchSpec,
    pub steps: u64,
    pub batch: usize,
    pub optimizer: AdamConfig,
    pub time_sampling: TimeSampling,
    pub grid_size: usize,
    pub bridge_mode: BridgeMode,
    pub seed: u64,
    /// Save a resumable checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    /// CSV `step,loss` written when a run finishes.
    pub loss_log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::Endpoint,
            schedule: ScheduleSpec::default(),
            arch: ArchSpec::default(),
            steps: 20_000,
            batch: 64,
            optimizer: AdamConfig::default(),
            time_sampling: TimeSampling::Continuous,
            grid_size: 1000,
            bridge_mode: BridgeMode::Sde,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_path: None,
            loss_log: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.grid_size < 2 {
            return Err(Error::Config(format!("grid_size must be at least 2, got {}", self.grid_size)));
        }
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be nonnegative, got {}", o.lr)));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        if self.objective == ObjectiveKind::EndpointWithScore && self.bridge_mode == BridgeMode::Ode {
            return Err(Error::Config(
                "the endpoint-with-score objective regresses the bridge noise, which does not exist in ode mode"
                    .into(),
            ));
        }
        if self.checkpoint_every > 0 && self.checkpoint_path.is_none() {
            return Err(Error::Config("checkpoint_every is set but checkpoint_path is not".into()));
        }
        let s = self.schedule.build()?;
        if !s.kind().is_bridge() {
            return Err(Error::Config(format!("training needs a bridge schedule, got {}", s.kind())));
        }
        Ok(())
    }

    /// Network description for a problem of the given widths.
    pub fn net_config(&self, state_dim: usize, cond_dim: usize) -> Result<NetConfig> {
        NetConfig::new(state_dim, cond_dim, self.objective, self.arch.clone())
    }
}

/// Mean of squared componentwise differences.
pub fn loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_dim("loss", target.len(), pred.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Network inputs and regression targets for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub y_t: Array2<f64>,
    pub condition: Option<Array2<f64>>,
    pub times: Vec<f64>,
    pub targets: Array2<f64>,
}

/// Builds bridge states and targets for every pair in `pairs`. `noise` rows are
/// the standard-normal draws used in SDE mode and ignored in ODE mode.
pub fn build_batch(
    s: &NoiseSchedule,
    objective: ObjectiveKind,
    mode: BridgeMode,
    pairs: PairBatch,
    times: Vec<f64>,
    noise: &Array2<f64>,
) -> Result<TrainingBatch> {
    let (n, d) = pairs.x0.dim();
    check_dim("batch times", n, times.len())?;
    let mut y_t = Array2::zeros((n, d));
    let mut targets = Array2::zeros((n, objective.output_width(d)));
    for i in 0..n {
        let pair = EndpointPair::new(pairs.x0.row(i).to_vec(), pairs.y1.row(i).to_vec())?;
        let t = times[i];
        let sample = match mode {
            BridgeMode::Sde => {
                let post = posterior_given_endpoints(s, &pair, t)?;
                sample_bridge_point(&post, &noise.row(i).to_vec(), t)?
            }
            BridgeMode::Ode => BridgeSample {
                y_t: ode_point(s, &pair, t)?,
                epsilon: vec![0.0; d],
                t,
            },
        };
        targets.row_mut(i).assign(&ArrayView1::from(&objective_target(objective, &sample, &pair)?));
        y_t.row_mut(i).assign(&ArrayView1::from(&sample.y_t));
    }
    Ok(TrainingBatch {
        y_t,
        condition: pairs.condition,
        times,
        targets,
    })
}

fn hash_inputs(batch: &TrainingBatch) -> u64 {
    let mut h = DefaultHasher::new();
    for v in batch.y_t.iter().chain(&batch.times).chain(batch.targets.iter()) {
        v.to_bits().hash(&mut h);
    }
    if let Some(c) = &batch.condition {
        c.iter().for_each(|v| v.to_bits().hash(&mut h));
    }
    h.finish()
}

/// Training loop state: parameters, optimizer moments, and the single RNG
/// stream every random draw comes from.
pub struct Trainer {
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    params: RegressorParams,
    adam: AdamState,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, params: RegressorParams) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule.build()?;
        let adam = AdamState::new(&params);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let t = Self {
            cfg,
            schedule,
            params,
            adam,
            rng,
            step: 0,
        };
        t.check_objective()?;
        Ok(t)
    }

    /// Continues from a checkpoint that carries training state.
    pub fn resume(cfg: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let ts = ckpt
            .training
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training state to resume from".into()))?;
        let mut rng = ChaCha8Rng::from_seed(ts.rng_seed);
        rng.set_stream(ts.rng_stream);
        rng.set_word_pos(ts.rng_word_pos);
        let t = Self {
            schedule: cfg.schedule.build()?,
            cfg,
            params: ckpt.params,
            adam: ts.adam,
            rng,
            step: ts.step,
        };
        t.check_objective()?;
        Ok(t)
    }

    fn check_objective(&self) -> Result<()> {
        if self.params.objective() != self.cfg.objective {
            return Err(Error::Incompatible(format!(
                "network was built for the {} objective, config asks for {}",
                self.params.objective(),
                self.cfg.objective
            )));
        }
        Ok(())
    }

    fn check_source(&self, data: &dyn PairSource) -> Result<()> {
        let c = self.params.config();
        if c.state_dim != data.state_dim() || c.cond_dim != data.cond_dim() {
            return Err(Error::Incompatible(format!(
                "network expects state/condition widths {}/{}, data provides {}/{}",
                c.state_dim,
                c.cond_dim,
                data.state_dim(),
                data.cond_dim()
            )));
        }
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &RegressorParams {
        &self.params
    }

    pub fn into_params(self) -> RegressorParams {
        self.params
    }

    /// Number of optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            training: Some(TrainingState {
                step: self.step,
                adam: self.adam.clone(),
                rng_seed: self.rng.get_seed(),
                rng_stream: self.rng.get_stream(),
                rng_word_pos: self.rng.get_word_pos(),
            }),
        }
    }

    fn draw_times(&mut self, n: usize) -> Vec<f64> {
        match self.cfg.time_sampling {
            TimeSampling::Continuous => (0..n).map(|_| self.rng.random::<f64>()).collect(),
            TimeSampling::Grid => {
                let last = (self.cfg.grid_size - 1) as f64;
                (0..n)
                    .map(|_| self.rng.random_range(0..self.cfg.grid_size) as f64 / last)
                    .collect()
            }
        }
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step(&mut self, data: &dyn PairSource) -> Result<f64> {
        self.check_source(data)?;
        let n = self.cfg.batch;
        let pairs = data.sample_pairs(&mut self.rng, n)?;
        let times = self.draw_times(n);
        let d = pairs.x0.ncols();
        let noise = match self.cfg.bridge_mode {
            BridgeMode::Sde => Array2::from_shape_simple_fn((n, d), || self.rng.sample(StandardNormal)),
            BridgeMode::Ode => Array2::zeros((0, 0)),
        };
        let batch = build_batch(&self.schedule, self.cfg.objective, self.cfg.bridge_mode, pairs, times, &noise)?;
        let finite = |a: &Array2<f64>| a.iter().all(|v| v.is_finite());
        if !(finite(&batch.y_t) && finite(&batch.targets) && batch.condition.as_ref().is_none_or(finite)) {
            return Err(Error::NonFiniteLoss {
                step: self.step as usize,
                inputs_hash: hash_inputs(&batch),
            });
        }
        let (pred, cache) = forward_batch(
            &self.params,
            batch.y_t.view(),
            batch.condition.as_ref().map(|c| c.view()),
            &batch.times,
        )?;
        let diff = &pred - &batch.targets;
        let count = diff.len() as f64;
        let value = diff.iter().map(|v| v * v).sum::<f64>() / count;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step as usize,
                inputs_hash: hash_inputs(&batch),
            });
        }
        let grad_out = diff * (2.0 / count);
        let (grads, _) = backward(&self.params, &cache, grad_out.view())?;
        adam_step(&mut self.params, &grads, &self.cfg.optimizer, &mut self.adam)?;
        self.step += 1;
        Ok(value)
    }

    /// Runs until `cfg.steps` total steps have been taken, saving checkpoints
    /// at the configured cadence. Returns `(step, loss)` for the steps taken
    /// by this call.
    pub fn run(&mut self, data: &dyn PairSource) -> Result<Vec<(u64, f64)>> {
        let mut history = Vec::new();
        while self.step < self.cfg.steps {
            let step = self.step;
            history.push((step, self.step(data)?));
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.step.is_multiple_of(every) {
                if let Some(path) = &self.cfg.checkpoint_path {
                    save_checkpoint(path, &self.checkpoint())?;
                }
            }
        }
        if let Some(path) = &self.cfg.checkpoint_path {
            save_checkpoint(path, &self.checkpoint())?;
        }
        if let Some(path) = &self.cfg.loss_log {
            write_loss_log(path, &history)?;
        }
        Ok(history)
    }
}

pub fn write_loss_log(path: &std::path::Path, history: &[(u64, f64)]) -> Result<()> {
    csv::write_file(
        path,
        &["step", "loss"],
        history.iter().map(|&(s, l)| vec![s.to_string(), csv::format_float(l)]),
    )
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: RegressorParams,
    pub losses: Vec<f64>,
}

/// Trains `net` on `data` for `cfg.steps` steps from a fresh optimizer state.
pub fn train(cfg: &TrainConfig, data: &dyn PairSource, net: RegressorParams) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), net)?;
    let history = trainer.run(data)?;
    Ok(TrainOutcome {
        params: trainer.into_params(),
        losses: history.into_iter().map(|(_, l)| l).collect(),
    })
}

/// Builds a freshly initialized network for `data` and trains it. The
/// initialization draws from its own generator seeded by `cfg.seed`.
pub fn train_new(cfg: &TrainConfig, data: &dyn PairSource) -> Result<TrainOutcome> {
    let net_cfg = cfg.net_config(data.state_dim(), data.cond_dim())?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(1);
    let net = RegressorParams::init(net_cfg, &mut init_rng)?;
    train(cfg, data, net)
}
