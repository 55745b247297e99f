//! Synthetic desk-scale distributions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::sliced_wasserstein;
use crate::foundation::{RngStream, Tensor};
use crate::network::DataGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    EightGaussians,
    Checkerboard,
    TwoMoons,
    TinyBars,
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eight_gaussians" => Ok(Self::EightGaussians),
            "checkerboard" => Ok(Self::Checkerboard),
            "two_moons" => Ok(Self::TwoMoons),
            "tiny_bars" => Ok(Self::TinyBars),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub n: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            name: DatasetName::EightGaussians,
            n: 10_000,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

pub const EIGHT_GAUSSIANS_RADIUS: f64 = 2.0;
pub const TINY_BARS_SIZE: usize = 8;

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("data.n must be at least 1".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("data.noise_std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> DataGeometry {
        match self.name {
            DatasetName::TinyBars => DataGeometry::Image {
                channels: 1,
                height: TINY_BARS_SIZE,
                width: TINY_BARS_SIZE,
                patch: 2,
            },
            _ => DataGeometry::Point { dim: 2 },
        }
    }

    /// 0 for unconditional distributions.
    pub fn num_classes(&self) -> usize {
        match self.name {
            DatasetName::EightGaussians | DatasetName::TinyBars => 8,
            DatasetName::TwoMoons => 2,
            DatasetName::Checkerboard => 0,
        }
    }
}

/// Samples with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub data: Tensor<f64>,
    pub classes: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn eight_gaussians_mode(j: usize) -> [f64; 2] {
    let angle = 2.0 * PI * j as f64 / 8.0;
    [EIGHT_GAUSSIANS_RADIUS * angle.cos(), EIGHT_GAUSSIANS_RADIUS * angle.sin()]
}

/// Draw `spec.n` samples from `stream`.
pub fn generate(spec: &DatasetSpec, stream: &mut RngStream) -> Result<Dataset> {
    generate_n(spec, spec.n, stream)
}

/// Draw from the spec's own seed.
pub fn generate_seeded(spec: &DatasetSpec) -> Result<Dataset> {
    generate(spec, &mut RngStream::new(spec.seed, DATA_STREAM))
}

pub const DATA_STREAM: u64 = 0xDA7A;

pub fn generate_n(spec: &DatasetSpec, n: usize, stream: &mut RngStream) -> Result<Dataset> {
    spec.validate()?;
    draw(spec, n, |_| None, stream)
}

/// Draw one sample per entry of `classes`, with those labels.
pub fn generate_for_classes(spec: &DatasetSpec, classes: &[usize], stream: &mut RngStream) -> Result<Dataset> {
    spec.validate()?;
    let c = spec.num_classes();
    if c == 0 {
        return Err(Error::InvalidArgument(format!("{:?} has no class labels", spec.name)));
    }
    if let Some(bad) = classes.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!("class {bad} out of range for {c} classes")));
    }
    draw(spec, classes.len(), |i| Some(classes[i]), stream)
}

// A given label still consumes the label draw, so a labelled draw and an
// unlabelled one from the same stream stay aligned.
fn draw(spec: &DatasetSpec, n: usize, label: impl Fn(usize) -> Option<usize>, stream: &mut RngStream) -> Result<Dataset> {
    let s = spec.noise_std;
    let mut data = Vec::with_capacity(n * spec.geometry().sample_numel());
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let given = label(i);
        match spec.name {
            DatasetName::EightGaussians => {
                let j = given.unwrap_or(stream.below(8));
                let m = eight_gaussians_mode(j);
                data.push(m[0] + s * stream.normal_f64());
                data.push(m[1] + s * stream.normal_f64());
                classes.push(j);
            }
            DatasetName::Checkerboard => {
                // 8 black squares of side 2 on [−4, 4]²: (col + row) even
                let cell = stream.below(8);
                let row = cell / 2;
                let col = 2 * (cell % 2) + row % 2;
                data.push(-4.0 + 2.0 * col as f64 + 2.0 * stream.uniform_f64());
                data.push(-4.0 + 2.0 * row as f64 + 2.0 * stream.uniform_f64());
            }
            DatasetName::TwoMoons => {
                let y = given.unwrap_or(stream.below(2));
                let theta = PI * stream.uniform_f64();
                let (px, py) = if y == 0 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                data.push(px + s * stream.normal_f64());
                data.push(py + s * stream.normal_f64());
                classes.push(y);
            }
            DatasetName::TinyBars => {
                let j = given.unwrap_or(stream.below(8));
                for r in 0..TINY_BARS_SIZE {
                    let base = if r == j { 1.0 } else { -1.0 };
                    for _ in 0..TINY_BARS_SIZE {
                        data.push(base + s * stream.normal_f64());
                    }
                }
                classes.push(j);
            }
        }
    }
    let mut shape = spec.geometry().sample_shape();
    shape.insert(0, n);
    Ok(Dataset {
        data: Tensor::from_vec(&shape, data)?,
        classes: (spec.num_classes() > 0).then_some(classes),
    })
}

/// Sliced W2 between two reference draws of size `n`: the noise floor for
/// generated-vs-reference comparisons at that sample size. For labelled
/// distributions the second draw reuses the first draw's labels, since
/// generated sets are conditioned on the reference labels too; the points
/// themselves are independent.
pub fn reference_baseline(spec: &DatasetSpec, n: usize, n_projections: usize, stream: &RngStream) -> Result<f64> {
    reference_baseline_between(spec, n, n_projections, &stream.derive(1), &stream.derive(2), &stream.derive(3))
}

pub fn reference_baseline_between(
    spec: &DatasetSpec,
    n: usize,
    n_projections: usize,
    draw_a: &RngStream,
    draw_b: &RngStream,
    projections: &RngStream,
) -> Result<f64> {
    let (a, b) = reference_pair(spec, n, draw_a, draw_b)?;
    sliced_wasserstein(&flatten(&a.data), &flatten(&b.data), n_projections, &mut projections.clone())
}

/// The two draws behind [`reference_baseline_between`].
pub fn reference_pair(spec: &DatasetSpec, n: usize, draw_a: &RngStream, draw_b: &RngStream) -> Result<(Dataset, Dataset)> {
    let a = generate_n(spec, n, &mut draw_a.clone())?;
    let b = match &a.classes {
        Some(c) => generate_for_classes(spec, c, &mut draw_b.clone())?,
        None => generate_n(spec, n, &mut draw_b.clone())?,
    };
    Ok((a, b))
}

/// View samples as `(n, features)`.
pub fn flatten(data: &Tensor<f64>) -> Tensor<f64> {
    let rows = data.rows();
    let cols = data.row_len();
    data.clone().reshape(&[rows, cols]).expect("same element count")
}
