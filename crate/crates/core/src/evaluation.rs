//! Sample-quality metrics and the inter-branch feature distance diagnostic.

use serde::{Deserialize, Serialize};

use crate::datasets::{flatten, generate_n, reference_baseline, reference_pair, DatasetSpec};
use crate::error::{Error, Result};
use crate::foundation::{ParamSet, RngStream, Tensor};
use crate::network::DeepFlowModel;
use crate::sampling::{sample, ModelField, Prediction, SamplerConfig};

pub const DEFAULT_PROJECTIONS: usize = 128;

/// Root of the mean, over random unit directions, of the squared 1-D
/// 2-Wasserstein distance between the projected sets.
pub fn sliced_wasserstein(a: &Tensor<f64>, b: &Tensor<f64>, n_projections: usize, stream: &mut RngStream) -> Result<f64> {
    if a.numel() == 0 || a.rows() == 0 {
        return Err(Error::EmptySet("first point set"));
    }
    if b.numel() == 0 || b.rows() == 0 {
        return Err(Error::EmptySet("second point set"));
    }
    if a.rank() != 2 || b.rank() != 2 || a.last_dim() != b.last_dim() {
        return Err(Error::shape("sliced_wasserstein", a.shape(), b.shape()));
    }
    if n_projections == 0 {
        return Err(Error::InvalidArgument("n_projections must be at least 1".into()));
    }
    let d = a.last_dim();
    let mut total = 0.0;
    let mut pa = vec![0.0; a.rows()];
    let mut pb = vec![0.0; b.rows()];
    for _ in 0..n_projections {
        let mut dir: Vec<f64> = (0..d).map(|_| stream.normal_f64()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            dir = vec![0.0; d];
            dir[0] = 1.0;
        } else {
            dir.iter_mut().for_each(|v| *v /= norm);
        }
        project(a, &dir, &mut pa);
        project(b, &dir, &mut pb);
        total += w2_squared_1d(&mut pa, &mut pb);
    }
    Ok((total / n_projections as f64).sqrt())
}

fn project(x: &Tensor<f64>, dir: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = x.row(i).iter().zip(dir).map(|(a, b)| a * b).sum();
    }
}

/// Squared W2 between two empirical 1-D measures: the L2 distance of their
/// sorted quantile functions (sorts in place).
pub fn w2_squared_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    if n == m {
        return a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
    }
    // merge the breakpoints i/n and j/m of the two step functions
    let (mut i, mut j, mut u, mut acc) = (0, 0, 0.0, 0.0);
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        acc += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc
}

/// `(‖mean_A − mean_B‖₂, ‖Cov_A − Cov_B‖_F)` with unbiased covariances.
pub fn moment_stats(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<(f64, f64)> {
    if a.rank() != 2 || b.rank() != 2 || a.last_dim() != b.last_dim() {
        return Err(Error::shape("moment_stats", a.shape(), b.shape()));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::EmptySet("moment statistics need at least 2 points"));
    }
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    let mean_err = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let cov_err = ca.iter().zip(&cb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    Ok((mean_err, cov_err))
}

pub fn mean_cov(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.last_dim());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let r = x.row(i);
        for p in 0..d {
            for q in 0..d {
                cov[p * d + q] += (r[p] - mean[p]) * (r[q] - mean[q]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    (mean, cov)
}

/// Which feature of branch `i` is compared against the last branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Raw hidden velocity `v*_i`.
    Pre,
    /// Refiner output of site `i`.
    Post,
}

/// How a per-sample feature difference is reduced to a distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceNorm {
    /// Frobenius norm over tokens × channels.
    #[default]
    Frobenius,
    /// Mean over tokens of the per-token Euclidean norm.
    PerToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDistanceTrace {
    pub per_timestep: Vec<(f64, f64)>,
    pub overall_mean: f64,
    /// 1-based branch indices.
    pub branch_pair: (usize, usize),
    pub mode: FeatureMode,
}

impl FeatureDistanceTrace {
    pub fn from_steps(per_timestep: Vec<(f64, f64)>, branch_pair: (usize, usize), mode: FeatureMode) -> Self {
        let overall_mean = per_timestep.iter().map(|p| p.1).sum::<f64>() / per_timestep.len().max(1) as f64;
        Self {
            per_timestep,
            overall_mean,
            branch_pair,
            mode,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,distance\n");
        for (t, d) in &self.per_timestep {
            s.push_str(&format!("{t},{d}\n"));
        }
        s
    }
}

/// Batch mean of the per-sample distance between two `(B, N, D)` features.
pub fn feature_distance(a: &Tensor<f32>, b: &Tensor<f32>, norm: DistanceNorm) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::shape("feature_distance", a.shape(), b.shape()));
    }
    let (bn, n, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut total = 0.0;
    for s in 0..bn {
        let mut per_sample = 0.0;
        let mut tok_sum = 0.0;
        for t in 0..n {
            let off = (s * n + t) * d;
            let sq: f64 = (0..d)
                .map(|c| (a.data()[off + c] as f64 - b.data()[off + c] as f64).powi(2))
                .sum();
            per_sample += sq;
            tok_sum += sq.sqrt();
        }
        total += match norm {
            DistanceNorm::Frobenius => per_sample.sqrt(),
            DistanceNorm::PerToken => tok_sum / n as f64,
        };
    }
    Ok(total / bn as f64)
}

/// Validate a 1-based `(i, k)` pair against the model.
pub fn check_branch_pair(model: &DeepFlowModel, pair: (usize, usize), mode: FeatureMode) -> Result<()> {
    let k = model.config().k;
    if k < 2 {
        return Err(Error::InvalidArgument("feature distance requires k ≥ 2".into()));
    }
    let (i, j) = pair;
    if i == 0 || i >= j || j > k {
        return Err(Error::InvalidArgument(format!(
            "invalid branch pair ({i}, {j}) for k = {k}; need 1 ≤ i < j ≤ k"
        )));
    }
    if mode == FeatureMode::Post && model.vera(i - 1).is_none() {
        return Err(Error::InvalidArgument(format!(
            "post-refiner features need a refiner after branch {i}"
        )));
    }
    Ok(())
}

/// Distances from recorded sampler predictions, one entry per solver step.
pub fn trace_from_history(
    history: &[Prediction],
    times: &[f64],
    pair: (usize, usize),
    mode: FeatureMode,
    norm: DistanceNorm,
) -> Result<FeatureDistanceTrace> {
    let (i, j) = pair;
    let mut per = Vec::with_capacity(times.len());
    for (p, &t) in history.iter().zip(times) {
        let a = match mode {
            FeatureMode::Pre => &p.vstar[i - 1],
            FeatureMode::Post => &p.refined[i - 1],
        };
        per.push((t, feature_distance(a, &p.vstar[j - 1], norm)?));
    }
    Ok(FeatureDistanceTrace::from_steps(per, pair, mode))
}

/// Sample with the model and record, at every solver step, the distance
/// between a feature of branch `i` and `v*` of branch `k`.
#[allow(clippy::too_many_arguments)]
pub fn feature_distance_trace(
    model: &DeepFlowModel,
    params: &ParamSet<f32>,
    sampler: &SamplerConfig,
    n_samples: usize,
    classes: Option<&[usize]>,
    pair: (usize, usize),
    mode: FeatureMode,
    norm: DistanceNorm,
    stream: &RngStream,
) -> Result<FeatureDistanceTrace> {
    check_branch_pair(model, pair, mode)?;
    let (history, _) = sample_recorded(model, params, sampler, n_samples, classes, stream)?;
    let times = &sampler.grid()[..sampler.steps];
    trace_from_history(&history[..sampler.steps], times, pair, mode, norm)
}

/// Pre- and (when the model has a refiner at branch `i`) post-refiner traces
/// from a single sampling run.
#[allow(clippy::too_many_arguments)]
pub fn feature_distance_traces(
    model: &DeepFlowModel,
    params: &ParamSet<f32>,
    sampler: &SamplerConfig,
    n_samples: usize,
    classes: Option<&[usize]>,
    pair: (usize, usize),
    norm: DistanceNorm,
    stream: &RngStream,
) -> Result<(FeatureDistanceTrace, Option<FeatureDistanceTrace>)> {
    check_branch_pair(model, pair, FeatureMode::Pre)?;
    let has_post = check_branch_pair(model, pair, FeatureMode::Post).is_ok();
    let (history, _) = sample_recorded(model, params, sampler, n_samples, classes, stream)?;
    let times = &sampler.grid()[..sampler.steps];
    let history = &history[..sampler.steps];
    let pre = trace_from_history(history, times, pair, FeatureMode::Pre, norm)?;
    let post = if has_post {
        Some(trace_from_history(history, times, pair, FeatureMode::Post, norm)?)
    } else {
        None
    };
    Ok((pre, post))
}

fn sample_recorded(
    model: &DeepFlowModel,
    params: &ParamSet<f32>,
    sampler: &SamplerConfig,
    n: usize,
    classes: Option<&[usize]>,
    stream: &RngStream,
) -> Result<(Vec<Prediction>, Tensor<f64>)> {
    let mut field = ModelField::new(model, params, sampler.cfg_scale);
    field.record = true;
    let out = sample(&mut field, sampler, n, classes, stream)?;
    Ok((field.history, out.samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run_id: String,
    pub seed: u64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub sliced_w2: f64,
    pub mean_err: f64,
    pub cov_err: f64,
    pub feat_dist_pre: Option<f64>,
    pub feat_dist_post: Option<f64>,
}

pub const METRIC_HEADER: &str = "run_id,seed,n,sliced_w2,mean_err,cov_err,feat_dist_pre,feat_dist_post";

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.run_id,
            self.seed,
            self.n_generated,
            self.sliced_w2,
            self.mean_err,
            self.cov_err,
            opt(self.feat_dist_pre),
            opt(self.feat_dist_post)
        )
    }
}

pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from(METRIC_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Protocol shared by every evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub n: usize,
    pub n_projections: usize,
    pub seed: u64,
}

const REFERENCE_KEY: u64 = 1;
const PROJECTION_KEY: u64 = 2;
const CHAIN_KEY: u64 = 3;
pub const EVAL_STREAM: u64 = 4;

impl EvalProtocol {
    pub fn stream(&self) -> RngStream {
        RngStream::new(self.seed, EVAL_STREAM)
    }

    /// Fresh reference draw; its class labels condition the generated set.
    pub fn reference(&self, spec: &DatasetSpec) -> Result<(Tensor<f64>, Option<Vec<usize>>)> {
        let ds = generate_n(spec, self.n, &mut self.stream().derive(REFERENCE_KEY))?;
        Ok((flatten(&ds.data), ds.classes))
    }

    pub fn chain_stream(&self) -> RngStream {
        self.stream().derive(CHAIN_KEY)
    }

    /// Compare `generated` against the reference draw.
    pub fn score(&self, generated: &Tensor<f64>, reference: &Tensor<f64>) -> Result<(f64, f64, f64)> {
        let g = flatten(generated);
        let sw = sliced_wasserstein(&g, reference, self.n_projections, &mut self.stream().derive(PROJECTION_KEY))?;
        let (mean_err, cov_err) = moment_stats(&g, reference)?;
        Ok((sw, mean_err, cov_err))
    }

    /// Two reference draws scored against each other, as in
    /// [`reference_baseline`].
    pub fn floor(&self, spec: &DatasetSpec) -> Result<MetricReport> {
        let stream = self.stream().derive(5);
        let sw = reference_baseline(spec, self.n, self.n_projections, &stream)?;
        let (a, b) = reference_pair(spec, self.n, &stream.derive(1), &stream.derive(2))?;
        let (mean_err, cov_err) = moment_stats(&flatten(&a.data), &flatten(&b.data))?;
        Ok(MetricReport {
            run_id: "reference_floor".into(),
            seed: self.seed,
            n_generated: self.n,
            n_reference: self.n,
            sliced_w2: sw,
            mean_err,
            cov_err,
            feat_dist_pre: None,
            feat_dist_post: None,
        })
    }
}

/// Generate `protocol.n` samples and score them against a fresh reference.
/// Feature distances (branch 1 against branch k) are recorded along the way
/// when the model has more than one branch.
pub fn evaluate_run(
    run_id: &str,
    model: &DeepFlowModel,
    params: &ParamSet<f32>,
    sampler: &SamplerConfig,
    spec: &DatasetSpec,
    protocol: &EvalProtocol,
) -> Result<MetricReport> {
    if protocol.n == 0 {
        return Err(Error::EmptySet("evaluation needs n ≥ 1"));
    }
    let (reference, classes) = protocol.reference(spec)?;
    let classes = classes.filter(|_| model.config().num_classes > 0);
    let (history, samples) =
        sample_recorded(model, params, sampler, protocol.n, classes.as_deref(), &protocol.chain_stream())?;
    let (sliced_w2, mean_err, cov_err) = protocol.score(&samples, &reference)?;
    let k = model.config().k;
    let times = &sampler.grid()[..sampler.steps];
    let history = &history[..sampler.steps];
    let dist = |mode| -> Result<Option<f64>> {
        match check_branch_pair(model, (1, k), mode) {
            Err(_) => Ok(None),
            Ok(()) => Ok(Some(
                trace_from_history(history, times, (1, k), mode, DistanceNorm::Frobenius)?.overall_mean,
            )),
        }
    };
    Ok(MetricReport {
        run_id: run_id.to_string(),
        seed: protocol.seed,
        n_generated: protocol.n,
        n_reference: reference.rows(),
        sliced_w2,
        mean_err,
        cov_err,
        feat_dist_pre: dist(FeatureMode::Pre)?,
        feat_dist_post: dist(FeatureMode::Post)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::DatasetName;

    fn pts(rows: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::from_vec(&[rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn identical_sets_are_zero() {
        let a = pts(&[[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]]);
        assert_eq!(sliced_wasserstein(&a, &a, 16, &mut RngStream::new(1, 1)).unwrap(), 0.0);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let a = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        let b = Tensor::from_vec(&[1, 1], vec![3.0]).unwrap();
        let sw = sliced_wasserstein(&a, &b, 7, &mut RngStream::new(2, 1)).unwrap();
        assert!((sw - 3.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_samples_are_close() {
        for seed in 0..3 {
            let mut s = RngStream::new(seed, 9);
            let a = s.normal::<f64>(&[10_000, 2]);
            let b = s.normal::<f64>(&[10_000, 2]);
            let sw = sliced_wasserstein(&a, &b, 64, &mut s).unwrap();
            assert!(sw < 0.05, "seed {seed}: {sw}");
        }
    }

    #[test]
    fn symmetric_and_order_invariant() {
        let a = pts(&[[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]]);
        let b = pts(&[[1.0, 1.0], [0.0, -3.0]]);
        let ab = sliced_wasserstein(&a, &b, 8, &mut RngStream::new(3, 1)).unwrap();
        let ba = sliced_wasserstein(&b, &a, 8, &mut RngStream::new(3, 1)).unwrap();
        let a_rev = pts(&[[0.5, 0.5], [2.0, -1.0], [0.0, 1.0]]);
        let rev = sliced_wasserstein(&a_rev, &b, 8, &mut RngStream::new(3, 1)).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(ab, rev);
        assert!(ab > 0.0);
    }

    #[test]
    fn unequal_sizes_use_quantiles() {
        // {0, 1} vs {0.5}: both quantile halves are 0.5 away
        assert!((w2_squared_1d(&mut [0.0, 1.0], &mut [0.5]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn empty_set_errors() {
        let a = pts(&[[0.0, 1.0]]);
        let e = Tensor::<f64>::zeros(&[0, 2]);
        assert!(sliced_wasserstein(&a, &e, 4, &mut RngStream::new(1, 1)).is_err());
    }

    #[test]
    fn moment_examples() {
        let a = pts(&[[1.0, 0.0], [-1.0, 0.5], [0.0, -0.5], [0.0, 0.0]]);
        assert_eq!(moment_stats(&a, &a).unwrap(), (0.0, 0.0));
        let shifted = Tensor::from_vec(a.shape(), a.data().chunks(2).flat_map(|r| [r[0] + 1.0, r[1]]).collect()).unwrap();
        let (m, c) = moment_stats(&a, &shifted).unwrap();
        assert!((m - 1.0).abs() < 1e-12 && c < 1e-12);
        let doubled = a.scale(2.0);
        let (_, cov) = mean_cov(&a);
        let fro = cov.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (_, c) = moment_stats(&a, &doubled).unwrap();
        assert!((c - 3.0 * fro).abs() < 1e-12);
        assert!(moment_stats(&pts(&[[0.0, 0.0]]), &a).is_err());
    }

    #[test]
    fn feature_distance_examples() {
        let a = Tensor::<f32>::zeros(&[2, 3, 4]);
        let b = Tensor::<f32>::ones(&[2, 3, 4]);
        assert_eq!(feature_distance(&a, &a, DistanceNorm::Frobenius).unwrap(), 0.0);
        assert!((feature_distance(&a, &b, DistanceNorm::Frobenius).unwrap() - 12f64.sqrt()).abs() < 1e-12);
        assert!((feature_distance(&a, &b, DistanceNorm::PerToken).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_generator_beats_floor() {
        let spec = DatasetSpec {
            name: DatasetName::EightGaussians,
            ..DatasetSpec::default()
        };
        let p = EvalProtocol {
            n: 2000,
            n_projections: 64,
            seed: 3,
        };
        let (reference, _) = p.reference(&spec).unwrap();
        let (sw, _, _) = p.score(&reference, &reference).unwrap();
        let floor = p.floor(&spec).unwrap();
        assert!(sw < floor.sliced_w2);
        assert_eq!(floor.to_csv().split(',').count(), 8);
    }
}
