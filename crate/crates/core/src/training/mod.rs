//! Deep-supervision and acceleration objective, AdamW with an EMA shadow, and
//! the logged, checkpointed training loop.

mod loss;
mod optim;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use loss::{
    acceleration_loss, build_objective, deep_supervision_loss, second_order_step, total_loss, LossBreakdown,
    ObjectiveVars,
};
pub use optim::{ema_update, AdamW, ADAM_EPS};

use crate::datasets::{generate_seeded, DatasetSpec};
use crate::error::{Error, Result};
use crate::foundation::{Graph, ParamSet, Real, RngStream, Tensor};
use crate::interpolant::{assign_branch_times, gt_velocity, interpolate_rows, sample_time, TimeSamplingScheme};
use crate::io::{Checkpoint, RunConfig};
use crate::network::{DeepFlowModel, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_betas: [f64; 2],
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub ema_decay: f64,
    /// Largest time gap between adjacent branches.
    pub alpha: f64,
    /// Weight of the acceleration loss.
    pub lambda: f64,
    /// Per-branch supervision weights; empty means 0.2 for intermediate
    /// branches and 1.0 for the last.
    pub betas: Vec<f64>,
    pub time_scheme: TimeSamplingScheme,
    pub log_interval: u64,
    /// 0 writes only the final checkpoint.
    pub save_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            adam_betas: [0.9, 0.999],
            weight_decay: 0.0,
            batch_size: 128,
            steps: 5000,
            ema_decay: 0.9999,
            alpha: 0.01,
            lambda: 1.0,
            betas: Vec::new(),
            time_scheme: TimeSamplingScheme::Uniform,
            log_interval: 100,
            save_interval: 0,
        }
    }
}

pub const INTERMEDIATE_BETA: f64 = 0.2;

impl TrainConfig {
    pub fn resolved_betas(&self, k: usize) -> Vec<f64> {
        if self.betas.is_empty() {
            let mut b = vec![INTERMEDIATE_BETA; k.saturating_sub(1)];
            b.push(1.0);
            b
        } else {
            self.betas.clone()
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return fail("train.lr must be positive".into());
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return fail("train.adam_betas must lie in [0, 1)".into());
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return fail("train.ema_decay must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("train.alpha must lie in [0, 1]".into());
        }
        if !(self.lambda >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("train.lambda and train.weight_decay must be non-negative".into());
        }
        if self.log_interval == 0 {
            return fail("train.log_interval must be at least 1".into());
        }
        let betas = self.resolved_betas(k);
        if betas.len() != k {
            return fail(format!("train.betas has {} entries for k = {k}", betas.len()));
        }
        if betas[k - 1] != 1.0 {
            return fail("the last entry of train.betas must be 1.0".into());
        }
        Ok(())
    }
}

// stream keys derived from the per-step training stream
const NOISE_KEY: u64 = 0;
const TIME_KEY: u64 = 1;
const DROPOUT_KEY: u64 = 2;
const BATCH_KEY: u64 = 3;

pub const INIT_STREAM: u64 = 1;
pub const TRAIN_STREAM: u64 = 2;

/// Random draws of one training step, reproducible from the step stream.
#[derive(Clone, Debug)]
pub struct StepDraws<T> {
    pub x1: Tensor<T>,
    /// `times[i][b]`: time of branch `i` for sample `b`.
    pub times: Vec<Vec<f64>>,
    pub classes: Option<Vec<usize>>,
}

pub fn draw_step<T: Real>(
    model: &DeepFlowModel,
    x0: &Tensor<T>,
    classes: Option<&[usize]>,
    cfg: &TrainConfig,
    stream: &RngStream,
) -> Result<StepDraws<T>> {
    let mcfg = model.config();
    let b = x0.rows();
    let x1 = stream.derive(NOISE_KEY).normal::<T>(x0.shape());
    let mut ts = stream.derive(TIME_KEY);
    let mut times = vec![Vec::with_capacity(b); mcfg.k];
    for _ in 0..b {
        let t1 = sample_time(cfg.time_scheme, &mut ts);
        let bt = assign_branch_times(t1, mcfg.k, cfg.alpha, &mut ts)?;
        for (i, &t) in bt.times().iter().enumerate() {
            times[i].push(t);
        }
    }
    let classes = match (mcfg.num_classes, classes) {
        (0, _) | (_, None) => None,
        (_, Some(ids)) => {
            let mut drop = stream.derive(DROPOUT_KEY);
            Some(
                ids.iter()
                    .map(|&y| {
                        if drop.uniform_f64() < mcfg.label_dropout_prob {
                            model.null_class()
                        } else {
                            y
                        }
                    })
                    .collect(),
            )
        }
    };
    Ok(StepDraws { x1, times, classes })
}

/// Loss breakdown and parameter gradients for one batch. All randomness comes
/// from `stream`, so the result is a pure function of its arguments.
pub fn objective<T: Real>(
    model: &DeepFlowModel,
    params: &ParamSet<T>,
    x0: &Tensor<T>,
    classes: Option<&[usize]>,
    cfg: &TrainConfig,
    stream: &RngStream,
) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
    let draws = draw_step(model, x0, classes, cfg, stream)?;
    objective_with(model, params, x0, &draws, cfg)
}

pub fn objective_with<T: Real>(
    model: &DeepFlowModel,
    params: &ParamSet<T>,
    x0: &Tensor<T>,
    draws: &StepDraws<T>,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
    let k = model.config().k;
    let betas = cfg.resolved_betas(k);
    let target = gt_velocity(x0, &draws.x1)?;
    let x_t = interpolate_rows(x0, &draws.x1, &draws.times[0])?;
    let mut g = Graph::with_params(params);
    let outputs = model.forward_branch_major(&mut g, &x_t, &draws.times, draws.classes.as_deref())?;
    let x_ti = (0..outputs.a.len())
        .map(|i| interpolate_rows(x0, &draws.x1, &draws.times[i]))
        .collect::<Result<Vec<_>>>()?;
    let obj = build_objective(&mut g, &outputs, x0, &target, &x_ti, &draws.times, &betas, cfg.lambda)?;
    let breakdown = obj.breakdown(&g, &betas, cfg.lambda);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss: {breakdown:?}")));
    }
    let grads = g.backward(obj.total).params(params);
    Ok((breakdown, grads))
}

/// Parameters, optimizer state and EMA shadow of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub run: RunConfig,
    pub model: DeepFlowModel,
    pub params: ParamSet<f32>,
    pub ema: ParamSet<f32>,
    pub opt: AdamW,
    /// Number of updates applied so far.
    pub step: u64,
    stream: RngStream,
    data: Tensor<f32>,
    classes: Option<Vec<usize>>,
}

impl Trainer {
    pub fn new(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let model = DeepFlowModel::new(&run.model)?;
        let params = model.init_params::<f32>(&mut RngStream::new(run.seed, INIT_STREAM));
        let ema = params.clone();
        let opt = AdamW::new(&params, run.train.lr, run.train.adam_betas, run.train.weight_decay);
        Self::assemble(run, model, params, ema, opt, 0)
    }

    pub fn from_checkpoint(ckpt: Checkpoint, run: &RunConfig) -> Result<Self> {
        run.validate()?;
        if run.model != ckpt.run_config.model {
            return Err(Error::Checkpoint("model configuration differs from the checkpoint".into()));
        }
        let model = DeepFlowModel::new(&run.model)?;
        model.check_params(&ckpt.raw)?;
        let mut opt = AdamW::new(&ckpt.raw, run.train.lr, run.train.adam_betas, run.train.weight_decay);
        opt.m = ckpt.adam_m;
        opt.v = ckpt.adam_v;
        if !opt.m.same_layout(&ckpt.raw) || !opt.v.same_layout(&ckpt.raw) || !ckpt.ema.same_layout(&ckpt.raw) {
            return Err(Error::Checkpoint("optimizer or EMA arrays do not match the parameters".into()));
        }
        let mut t = Self::assemble(run, model, ckpt.raw, ckpt.ema, opt, ckpt.step)?;
        t.stream = RngStream::from_state(ckpt.rng);
        Ok(t)
    }

    fn assemble(
        run: &RunConfig,
        model: DeepFlowModel,
        params: ParamSet<f32>,
        ema: ParamSet<f32>,
        opt: AdamW,
        step: u64,
    ) -> Result<Self> {
        let ds = generate_seeded(&run.data)?;
        Ok(Self {
            run: run.clone(),
            model,
            params,
            ema,
            opt,
            step,
            stream: RngStream::new(run.seed, TRAIN_STREAM),
            data: ds.data.cast(),
            classes: ds.classes,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.run.train
    }

    pub fn stream(&self) -> &RngStream {
        &self.stream
    }

    /// The minibatch and step stream used at step `s`.
    pub fn batch(&self, s: u64) -> (Tensor<f32>, Option<Vec<usize>>, RngStream) {
        let step_stream = self.stream.derive(s);
        let mut pick = step_stream.derive(BATCH_KEY);
        let n = self.data.rows();
        let idx: Vec<usize> = (0..self.run.train.batch_size).map(|_| pick.below(n)).collect();
        let width = self.data.row_len();
        let mut rows = Vec::with_capacity(idx.len() * width);
        for &i in &idx {
            rows.extend_from_slice(self.data.row(i));
        }
        let mut shape = self.data.shape().to_vec();
        shape[0] = idx.len();
        let x0 = Tensor::from_vec(&shape, rows).expect("batch shape");
        let classes = match (&self.classes, self.model.config().num_classes) {
            (Some(c), n) if n > 0 => Some(idx.iter().map(|&i| c[i]).collect()),
            _ => None,
        };
        (x0, classes, step_stream)
    }

    /// Loss of the current step's batch on the current parameters.
    pub fn current_loss(&self) -> Result<LossBreakdown> {
        let (x0, classes, stream) = self.batch(self.step);
        objective(&self.model, &self.params, &x0, classes.as_deref(), &self.run.train, &stream)
            .map(|(b, _)| b)
            .map_err(|e| annotate(e, self.step))
    }

    /// One optimizer update; returns the loss measured before it.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let (x0, classes, stream) = self.batch(self.step);
        let (breakdown, grads) = objective(&self.model, &self.params, &x0, classes.as_deref(), &self.run.train, &stream)
            .map_err(|e| annotate(e, self.step))?;
        self.opt.update(&mut self.params, &grads, self.step + 1)?;
        ema_update(&mut self.ema, &self.params, self.run.train.ema_decay);
        self.step += 1;
        Ok(breakdown)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            run_config: self.run.clone(),
            step: self.step,
            rng: self.stream.state(),
            raw: self.params.clone(),
            ema: self.ema.clone(),
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
        }
    }
}

fn annotate(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
        other => other,
    }
}

/// One logged line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub fn metrics_header(k: usize) -> String {
    let mut cols = vec!["step".to_string()];
    cols.extend((1..=k).map(|i| format!("per_branch_sup_{i}")));
    cols.extend((1..k).map(|i| format!("per_vera_acc_{i}")));
    cols.extend(["deep_star", "acc_total", "total", "lr"].map(String::from));
    cols.join(",")
}

impl MetricsRow {
    /// Sites without a refiner are written as 0.
    pub fn to_csv(&self, k: usize) -> String {
        let mut cols = vec![self.step.to_string()];
        cols.extend(self.loss.per_branch_sup.iter().map(f64::to_string));
        cols.extend((0..k.saturating_sub(1)).map(|i| self.loss.per_vera_acc.get(i).copied().unwrap_or(0.0).to_string()));
        cols.extend([self.loss.deep_star, self.loss.acc_total, self.loss.total, self.lr].map(|v| v.to_string()));
        cols.join(",")
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "ckpt_final";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:08}")
}

/// Run the trainer up to `train.steps`, logging every `log_interval` steps
/// and checkpointing every `save_interval` updates plus once at the end.
///
/// The row for step `s` is the loss of step `s`'s batch on the parameters
/// after `s` updates. A resumed trainer does not repeat the row of the step
/// it resumed at, and appends to an existing metrics file.
pub fn train_loop(trainer: &mut Trainer, out_dir: Option<&Path>) -> Result<Vec<MetricsRow>> {
    let cfg = trainer.run.train.clone();
    let k = trainer.model.config().k;
    let start = trainer.step;
    if start > cfg.steps {
        return Err(Error::Config(format!(
            "checkpoint is at step {start}, past train.steps = {}",
            cfg.steps
        )));
    }
    let mut csv = match out_dir {
        None => None,
        Some(dir) => Some(open_metrics(dir, k, start > 0)?),
    };
    let mut rows = Vec::new();
    let mut s = start;
    loop {
        let log = s % cfg.log_interval == 0 && !(s == start && start > 0);
        let loss = if s == cfg.steps {
            if log {
                Some(trainer.current_loss()?)
            } else {
                None
            }
        } else {
            Some(trainer.train_step()?)
        };
        if let (true, Some(loss)) = (log, loss) {
            let row = MetricsRow { step: s, loss, lr: cfg.lr };
            if let Some((path, w)) = csv.as_mut() {
                writeln!(w, "{}", row.to_csv(k)).map_err(|e| Error::io(path.as_path(), e))?;
            }
            rows.push(row);
        }
        if s == cfg.steps {
            break;
        }
        s += 1;
        if let Some(dir) = out_dir {
            if cfg.save_interval > 0 && s % cfg.save_interval == 0 && s < cfg.steps {
                trainer.checkpoint().save(&dir.join(checkpoint_name(s)))?;
            }
        }
    }
    if let Some((path, mut w)) = csv {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    if let Some(dir) = out_dir {
        trainer.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(rows)
}

fn open_metrics(dir: &Path, k: usize, append: bool) -> Result<(std::path::PathBuf, BufWriter<File>)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(METRICS_FILE);
    if append && path.exists() {
        let f = OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        return Ok((path, BufWriter::new(f)));
    }
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{}", metrics_header(k)).map_err(|e| Error::io(&path, e))?;
    Ok((path, w))
}

/// Convenience for experiments: a run configuration with the given pieces.
pub fn run_config(model: ModelConfig, train: TrainConfig, data: DatasetSpec, seed: u64) -> RunConfig {
    RunConfig {
        model,
        train,
        data,
        seed,
        ..RunConfig::default()
    }
}
