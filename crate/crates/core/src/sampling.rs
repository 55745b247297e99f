//! Euler ODE and Euler–Maruyama SDE samplers over a velocity field, with
//! classifier-free guidance for class-conditional models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foundation::{Graph, ParamSet, RngStream, Tensor};
use crate::network::DeepFlowModel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ode,
    #[default]
    Sde,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ode" => Ok(Self::Ode),
            "sde" => Ok(Self::Sde),
            other => Err(Error::Config(format!("unknown sampler kind {other:?}"))),
        }
    }
}

/// Diffusion coefficient `w(t)` of the reverse SDE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Diffusion {
    #[default]
    T,
    Zero,
}

impl Diffusion {
    pub fn at(self, t: f64) -> f64 {
        match self {
            Diffusion::T => t,
            Diffusion::Zero => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub t_start: f64,
    /// The SDE stops here and takes one deterministic step to 0.
    pub t_end: f64,
    pub diffusion: Diffusion,
    /// 1 disables guidance.
    pub cfg_scale: f64,
    pub record_trajectory: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Sde,
            steps: 250,
            t_start: 1.0,
            t_end: 0.004,
            diffusion: Diffusion::T,
            cfg_scale: 1.0,
            record_trajectory: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler.steps must be at least 1".into()));
        }
        if !(0.0 <= self.t_end && self.t_end < self.t_start && self.t_start <= 1.0) {
            return Err(Error::Config(format!(
                "sampler needs 0 <= t_end < t_start <= 1, got t_end = {}, t_start = {}",
                self.t_end, self.t_start
            )));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Config("sampler.cfg_scale must be non-negative".into()));
        }
        Ok(())
    }

    /// Uniform grid from `t_start` to `t_end`, `steps + 1` points.
    pub fn grid(&self) -> Vec<f64> {
        let dt = (self.t_end - self.t_start) / self.steps as f64;
        (0..=self.steps)
            .map(|j| if j == self.steps { self.t_end } else { self.t_start + j as f64 * dt })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Tensor<f64>>,
    pub times: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub samples: Tensor<f64>,
    pub trajectory: Option<Trajectory>,
}

/// A velocity field `v(x, t)` over a batch.
pub trait VelocityField {
    fn sample_shape(&self) -> Vec<usize>;
    fn velocity(&mut self, x: &Tensor<f64>, t: f64, classes: Option<&[usize]>) -> Result<Tensor<f64>>;
}

/// Closure-backed field for analytic tests.
pub struct FnField<F> {
    pub shape: Vec<usize>,
    pub f: F,
}

impl<F: FnMut(&Tensor<f64>, f64) -> Tensor<f64>> VelocityField for FnField<F> {
    fn sample_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn velocity(&mut self, x: &Tensor<f64>, t: f64, _: Option<&[usize]>) -> Result<Tensor<f64>> {
        Ok((self.f)(x, t))
    }
}

/// Branch features of one inference call, kept for diagnostics.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub v: Tensor<f32>,
    pub vstar: Vec<Tensor<f32>>,
    pub refined: Vec<Tensor<f32>>,
    /// Time gaps seen by each refiner site; all zero at inference.
    pub gaps: Vec<Vec<f64>>,
}

/// One forward pass with every branch conditioned on the same `t`.
pub fn model_prediction(
    model: &DeepFlowModel,
    params: &ParamSet<f32>,
    x: &Tensor<f32>,
    t: f64,
    classes: Option<&[usize]>,
) -> Result<Prediction> {
    let k = model.config().k;
    let times = vec![vec![t; x.rows()]; k];
    let mut g = Graph::with_params(params);
    let out = model.forward_branch_major(&mut g, x, &times, classes)?;
    Ok(Prediction {
        v: g.value(out.v[k - 1]).clone(),
        vstar: out.vstar.iter().map(|&v| g.value(v).clone()).collect(),
        refined: out.refined.iter().map(|&v| g.value(v).clone()).collect(),
        gaps: out.gaps,
    })
}

/// Final-branch velocity, with guidance `v_null + s·(v_class − v_null)` when
/// `cfg_scale ≠ 1` and classes are given. The returned prediction is the
/// class-conditional pass.
pub fn predict_velocity(
    model: &DeepFlowModel,
    params: &ParamSet<f32>,
    x: &Tensor<f32>,
    t: f64,
    classes: Option<&[usize]>,
    cfg_scale: f64,
) -> Result<(Tensor<f32>, Prediction)> {
    if classes.is_some() && model.config().num_classes == 0 {
        return Err(Error::InvalidArgument(
            "class conditioning requested on an unconditional model".into(),
        ));
    }
    let cond = model_prediction(model, params, x, t, classes)?;
    let Some(_) = classes.filter(|_| cfg_scale != 1.0) else {
        return Ok((cond.v.clone(), cond));
    };
    let null = model_prediction(model, params, x, t, None)?;
    let s = cfg_scale as f32;
    let v = null.v.zip_map(&cond.v, "cfg", |n, c| n + s * (c - n))?;
    Ok((v, cond))
}

/// Learned model as a [`VelocityField`]; optionally keeps every prediction.
pub struct ModelField<'a> {
    pub model: &'a DeepFlowModel,
    pub params: &'a ParamSet<f32>,
    pub cfg_scale: f64,
    pub record: bool,
    pub history: Vec<Prediction>,
}

impl<'a> ModelField<'a> {
    pub fn new(model: &'a DeepFlowModel, params: &'a ParamSet<f32>, cfg_scale: f64) -> Self {
        Self {
            model,
            params,
            cfg_scale,
            record: false,
            history: Vec::new(),
        }
    }
}

impl VelocityField for ModelField<'_> {
    fn sample_shape(&self) -> Vec<usize> {
        self.model.config().geometry.sample_shape()
    }

    fn velocity(&mut self, x: &Tensor<f64>, t: f64, classes: Option<&[usize]>) -> Result<Tensor<f64>> {
        let (v, pred) = predict_velocity(self.model, self.params, &x.cast(), t, classes, self.cfg_scale)?;
        if self.record {
            self.history.push(pred);
        }
        Ok(v.cast())
    }
}

/// `s = −(x + (1 − t)·v) / t`.
pub fn score_from_velocity(x: &Tensor<f64>, v: &Tensor<f64>, t: f64) -> Result<Tensor<f64>> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("score undefined at t = {t}")));
    }
    x.zip_map(v, "score", |x, v| -(x + (1.0 - t) * v) / t)
}

/// Per-chain streams make samples independent of how chains are batched.
fn initial_noise(shape: &[usize], n: usize, stream: &RngStream) -> (Tensor<f64>, Vec<RngStream>) {
    let numel: usize = shape.iter().product();
    let mut chains: Vec<RngStream> = (0..n as u64).map(|c| stream.derive(c)).collect();
    let mut data = Vec::with_capacity(n * numel);
    for ch in &mut chains {
        data.extend((0..numel).map(|_| ch.normal_f64()));
    }
    let mut full = vec![n];
    full.extend_from_slice(shape);
    (Tensor::from_vec(&full, data).expect("noise shape"), chains)
}

fn check_classes(classes: Option<&[usize]>, n: usize) -> Result<()> {
    match classes {
        Some(c) if c.len() != n => Err(Error::InvalidArgument(format!("{} class ids for {n} samples", c.len()))),
        _ => Ok(()),
    }
}

fn check_state(x: &Tensor<f64>, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("sampler state after step {step}")))
    }
}

/// Euler integration from `t_start` to `t_end`; returns `x(t_end)`.
pub fn sample_ode(
    field: &mut dyn VelocityField,
    cfg: &SamplerConfig,
    n: usize,
    classes: Option<&[usize]>,
    stream: &RngStream,
) -> Result<SampleOutput> {
    integrate(field, cfg, n, classes, stream, false)
}

/// Euler–Maruyama on `dx = [v − ½·w(t)·s]·dt + sqrt(w(t))·dW̄` from `t_start`
/// to `t_end`, then one deterministic Euler step to 0.
pub fn sample_sde(
    field: &mut dyn VelocityField,
    cfg: &SamplerConfig,
    n: usize,
    classes: Option<&[usize]>,
    stream: &RngStream,
) -> Result<SampleOutput> {
    if !(cfg.t_end > 0.0) {
        return Err(Error::Config("the SDE sampler needs t_end > 0".into()));
    }
    integrate(field, cfg, n, classes, stream, true)
}

/// Dispatch on `cfg.kind`.
pub fn sample(
    field: &mut dyn VelocityField,
    cfg: &SamplerConfig,
    n: usize,
    classes: Option<&[usize]>,
    stream: &RngStream,
) -> Result<SampleOutput> {
    match cfg.kind {
        SamplerKind::Ode => sample_ode(field, cfg, n, classes, stream),
        SamplerKind::Sde => sample_sde(field, cfg, n, classes, stream),
    }
}

fn integrate(
    field: &mut dyn VelocityField,
    cfg: &SamplerConfig,
    n: usize,
    classes: Option<&[usize]>,
    stream: &RngStream,
    stochastic: bool,
) -> Result<SampleOutput> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::EmptySet("no samples requested"));
    }
    check_classes(classes, n)?;
    let grid = cfg.grid();
    let (mut x, mut chains) = initial_noise(&field.sample_shape(), n, stream);
    let per_chain = x.row_len();
    let mut traj = cfg.record_trajectory.then(|| Trajectory {
        states: vec![x.clone()],
        times: grid.clone(),
    });
    for j in 0..cfg.steps {
        let (t, h) = (grid[j], grid[j + 1] - grid[j]);
        let v = field.velocity(&x, t, classes)?;
        if !stochastic {
            x = x.zip_map(&v, "euler", |x, v| x + v * h)?;
        } else {
            let w = cfg.diffusion.at(t);
            let s = score_from_velocity(&x, &v, t)?;
            let amp = (w * h.abs()).sqrt();
            let mut noise = Vec::with_capacity(x.numel());
            for ch in &mut chains {
                noise.extend((0..per_chain).map(|_| ch.normal_f64()));
            }
            let xd = x.data();
            let next: Vec<f64> = (0..x.numel())
                .map(|i| xd[i] + (v.data()[i] - 0.5 * w * s.data()[i]) * h + amp * noise[i])
                .collect();
            x = Tensor::from_vec(x.shape(), next)?;
        }
        check_state(&x, j)?;
        if let Some(tr) = traj.as_mut() {
            tr.states.push(x.clone());
        }
    }
    let samples = if stochastic {
        let t = cfg.t_end;
        let v = field.velocity(&x, t, classes)?;
        let out = x.zip_map(&v, "euler", |x, v| x + v * (0.0 - t))?;
        check_state(&out, cfg.steps)?;
        out
    } else {
        x
    };
    Ok(SampleOutput {
        samples,
        trajectory: traj,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<(usize, f64)>,
    pub mean: f64,
    pub std: f64,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("steps,metric\n");
        for (steps, m) in &self.rows {
            s.push_str(&format!("{steps},{m}\n"));
        }
        s
    }
}

/// Run the SDE sampler at each step count with the same chains and score the
/// samples with `metric`.
pub fn step_sensitivity_sweep(
    field: &mut dyn VelocityField,
    base: &SamplerConfig,
    steps_list: &[usize],
    n: usize,
    classes: Option<&[usize]>,
    stream: &RngStream,
    metric: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<SweepReport> {
    let mut rows = Vec::with_capacity(steps_list.len());
    for &steps in steps_list {
        let cfg = SamplerConfig {
            kind: SamplerKind::Sde,
            steps,
            record_trajectory: false,
            ..base.clone()
        };
        let out = sample_sde(field, &cfg, n, classes, stream)?;
        rows.push((steps, metric(&out.samples)?));
    }
    let vals: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (mean, std) = mean_std(&vals);
    Ok(SweepReport { rows, mean, std })
}

/// Mean and population standard deviation.
pub fn mean_std(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
    (m, var.sqrt())
}

/// The field `v(x, t) = (x − x0)/t` transporting N(0, I) onto the single point `x0`.
pub fn single_point_field(x0: Vec<f64>) -> FnField<impl FnMut(&Tensor<f64>, f64) -> Tensor<f64>> {
    let d = x0.len();
    FnField {
        shape: vec![d],
        f: move |x: &Tensor<f64>, t: f64| {
            let data = x.data().iter().enumerate().map(|(i, &v)| (v - x0[i % d]) / t).collect();
            Tensor::from_vec(x.shape(), data).expect("same shape")
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: SamplerKind, steps: usize) -> SamplerConfig {
        SamplerConfig {
            kind,
            steps,
            record_trajectory: true,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn grid_endpoints() {
        let g = cfg(SamplerKind::Ode, 7).grid();
        assert_eq!(g.len(), 8);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[7], 0.004);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn zero_field_returns_noise() {
        let mut f = FnField {
            shape: vec![2],
            f: |x: &Tensor<f64>, _| Tensor::zeros(x.shape()),
        };
        let s = RngStream::new(1, 2);
        let out = sample_ode(&mut f, &cfg(SamplerKind::Ode, 10), 5, None, &s).unwrap();
        assert_eq!(out.samples, out.trajectory.unwrap().states[0]);
    }

    #[test]
    fn euler_exact_on_single_point_field() {
        let x0 = vec![0.5, -1.5];
        let mut f = single_point_field(x0.clone());
        let c = cfg(SamplerKind::Ode, 13);
        let out = sample_ode(&mut f, &c, 4, None, &RngStream::new(2, 2)).unwrap();
        let init = &out.trajectory.as_ref().unwrap().states[0];
        for i in 0..out.samples.numel() {
            let want = x0[i % 2] + c.t_end * (init.data()[i] - x0[i % 2]);
            assert!((out.samples.data()[i] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn score_examples() {
        let x = Tensor::from_vec(&[1, 2], vec![0.3, -0.2]).unwrap();
        let v = Tensor::from_vec(&[1, 2], vec![5.0, 7.0]).unwrap();
        assert_eq!(score_from_velocity(&x, &v, 1.0).unwrap().data(), &[-0.3, 0.2]);
        assert!(score_from_velocity(&x, &v, 0.0).is_err());
    }

    #[test]
    fn sde_without_diffusion_is_the_ode() {
        let mut f = single_point_field(vec![1.0, 2.0]);
        let mut ode = cfg(SamplerKind::Ode, 20);
        ode.diffusion = Diffusion::Zero;
        let sde = SamplerConfig {
            kind: SamplerKind::Sde,
            ..ode.clone()
        };
        let s = RngStream::new(3, 4);
        let a = sample_ode(&mut f, &ode, 6, None, &s).unwrap();
        let b = sample_sde(&mut f, &sde, 6, None, &s).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
    }

    #[test]
    fn chains_do_not_depend_on_batch_size() {
        let mut f = single_point_field(vec![0.0, 0.0]);
        let c = cfg(SamplerKind::Sde, 10);
        let s = RngStream::new(4, 4);
        let big = sample_sde(&mut f, &c, 8, None, &s).unwrap().samples;
        let small = sample_sde(&mut f, &c, 3, None, &s).unwrap().samples;
        assert_eq!(&big.data()[..6], small.data());
    }

    #[test]
    fn sweep_structure() {
        let mut f = single_point_field(vec![0.0, 0.0]);
        let base = SamplerConfig::default();
        let s = RngStream::new(1, 1);
        let mut metric = |x: &Tensor<f64>| Ok(x.sum_squares());
        let r = step_sensitivity_sweep(&mut f, &base, &[5, 10, 15], 4, None, &s, &mut metric).unwrap();
        assert_eq!(r.rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![5, 10, 15]);
        assert_eq!(r.to_csv().lines().count(), 4);
        let single = step_sensitivity_sweep(&mut f, &base, &[250], 4, None, &s, &mut metric).unwrap();
        assert_eq!(single.rows.len(), 1);
        assert_eq!(single.std, 0.0);
    }

    #[test]
    fn invalid_configs() {
        let mut c = SamplerConfig::default();
        c.steps = 0;
        assert!(c.validate().is_err());
        let c = SamplerConfig {
            t_end: 1.0,
            ..SamplerConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
