use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a single data sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataGeometry {
    Point {
        dim: usize,
    },
    Image {
        channels: usize,
        height: usize,
        width: usize,
        patch: usize,
    },
}

impl DataGeometry {
    /// Shape of one sample, without the batch dimension.
    pub fn sample_shape(&self) -> Vec<usize> {
        match *self {
            DataGeometry::Point { dim } => vec![dim],
            DataGeometry::Image {
                channels,
                height,
                width,
                ..
            } => vec![channels, height, width],
        }
    }

    pub fn batch_shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend(self.sample_shape());
        s
    }

    pub fn sample_numel(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn tokens(&self) -> usize {
        match *self {
            DataGeometry::Point { .. } => 1,
            DataGeometry::Image {
                height, width, patch, ..
            } => (height / patch) * (width / patch),
        }
    }

    /// Length of one token before projection.
    pub fn patch_dim(&self) -> usize {
        match *self {
            DataGeometry::Point { dim } => dim,
            DataGeometry::Image { channels, patch, .. } => channels * patch * patch,
        }
    }
}

/// How the VeRA block combines velocity and acceleration features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VeraVariant {
    /// Concatenate velocity and acceleration, modulate jointly, project back.
    #[default]
    Concat,
    /// Modulate the acceleration alone and add it to the velocity.
    Additive,
    /// No refiner between branches: plain deep supervision.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of branches.
    pub k: usize,
    pub depth_per_branch: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Hidden width of the transformer MLP relative to `hidden`.
    pub mlp_ratio: f64,
    /// 0 means unconditional.
    pub num_classes: usize,
    pub geometry: DataGeometry,
    pub vera_variant: VeraVariant,
    /// Fuse the modulated features with the input tokens by cross attention.
    pub cross_attention: bool,
    /// Residual connection around the cross attention.
    pub cross_attn_residual: bool,
    pub accmlp_multipliers: Vec<f64>,
    pub label_dropout_prob: f64,
    /// Width of the sinusoidal time features fed to the time embedders.
    pub freq_dim: usize,
    /// Stop gradients from the refiner into the preceding branch.
    pub detach_vera_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 2,
            depth_per_branch: 2,
            hidden: 64,
            heads: 4,
            mlp_ratio: 4.0,
            num_classes: 8,
            geometry: DataGeometry::Point { dim: 2 },
            vera_variant: VeraVariant::Concat,
            cross_attention: true,
            cross_attn_residual: true,
            accmlp_multipliers: vec![8.0 / 3.0, 16.0 / 3.0, 8.0 / 3.0, 1.0],
            label_dropout_prob: 0.1,
            freq_dim: 256,
            detach_vera_input: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return fail("model.k must be at least 1".into());
        }
        if self.depth_per_branch == 0 {
            return fail("model.depth_per_branch must be at least 1".into());
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!(
                "model.hidden ({}) must be a positive multiple of model.heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.mlp_ratio <= 0.0 {
            return fail("model.mlp_ratio must be positive".into());
        }
        if self.accmlp_multipliers.last() != Some(&1.0) {
            return fail("model.accmlp_multipliers must end with 1".into());
        }
        if self.accmlp_multipliers.iter().any(|&m| m <= 0.0) {
            return fail("model.accmlp_multipliers must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.label_dropout_prob) {
            return fail("model.label_dropout_prob must be in [0, 1]".into());
        }
        if self.freq_dim < 4 || self.freq_dim % 2 != 0 {
            return fail("model.freq_dim must be an even number ≥ 4".into());
        }
        match self.geometry {
            DataGeometry::Point { dim } if dim == 0 => fail("point dim must be positive".into()),
            DataGeometry::Image {
                channels,
                height,
                width,
                patch,
            } => {
                if channels == 0 || patch == 0 || height % patch != 0 || width % patch != 0 || height == 0 || width == 0 {
                    return fail(format!("image {height}x{width} is not divisible into {patch}x{patch} patches"));
                }
                if self.hidden % 4 != 0 {
                    return fail("image models need hidden divisible by 4 for 2-D positional embeddings".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn has_vera(&self) -> bool {
        self.k > 1 && self.vera_variant != VeraVariant::None
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.hidden as f64).round() as usize
    }

    /// Channel sizes of the acceleration MLP, `round(m·hidden)` per layer.
    pub fn accmlp_channels(&self) -> Vec<usize> {
        self.accmlp_multipliers
            .iter()
            .map(|m| (m * self.hidden as f64).round() as usize)
            .collect()
    }

    /// Closed-form count of trainable scalars.
    pub fn param_count(&self) -> usize {
        let d = self.hidden;
        let p = self.geometry.patch_dim();
        let f = self.freq_dim;
        let h = self.mlp_hidden();
        let linear = |i: usize, o: usize| i * o + o;
        let time_embedder = linear(f, d) + linear(d, d);
        let head = linear(d, 2 * d) + linear(d, p);
        // q, v, out with bias; key without bias
        let attention = 3 * linear(d, d) + d * d;
        let block = linear(d, 6 * d) + attention + linear(d, h) + linear(h, d);

        let mut total = linear(p, d) + time_embedder;
        if self.num_classes > 0 {
            total += (self.num_classes + 1) * d;
        }
        total += self.k * (self.depth_per_branch * block + head);
        if self.has_vera() {
            let mut acc = 0;
            let mut prev = d;
            for c in self.accmlp_channels() {
                acc += linear(prev, c);
                prev = c;
            }
            let width = match self.vera_variant {
                VeraVariant::Concat => 2 * d,
                _ => d,
            };
            let mut site = acc + time_embedder + linear(d, 2 * width) + head;
            if self.vera_variant == VeraVariant::Concat {
                site += linear(2 * d, 2 * d) + linear(2 * d, d);
            }
            if self.cross_attention {
                site += attention;
            }
            total += (self.k - 1) * site;
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_acc_channels_at_paper_width() {
        let cfg = ModelConfig {
            hidden: 768,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.accmlp_channels(), vec![2048, 4096, 2048, 768]);
    }

    #[test]
    fn default_acc_channels_at_desk_width() {
        let cfg = ModelConfig::default();
        // round(8/3·64)=171, round(16/3·64)=341
        assert_eq!(cfg.accmlp_channels(), vec![171, 341, 171, 64]);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let bad_heads = ModelConfig {
            hidden: 10,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(bad_heads.validate().is_err());
        let bad_mult = ModelConfig {
            accmlp_multipliers: vec![2.0, 3.0],
            ..ModelConfig::default()
        };
        assert!(bad_mult.validate().is_err());
        let zero_k = ModelConfig {
            k: 0,
            ..ModelConfig::default()
        };
        assert!(zero_k.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn token_counts() {
        let img = DataGeometry::Image {
            channels: 1,
            height: 8,
            width: 8,
            patch: 2,
        };
        assert_eq!(img.tokens(), 16);
        assert_eq!(img.patch_dim(), 4);
        assert_eq!(DataGeometry::Point { dim: 2 }.tokens(), 1);
    }

    #[test]
    fn single_branch_has_no_refiner() {
        let cfg = ModelConfig {
            k: 1,
            ..ModelConfig::default()
        };
        assert!(!cfg.has_vera());
    }
}
