use crate::error::Result;
use crate::foundation::{Graph, Real, Tensor, Var};

/// Initialization rule for one parameter array.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    Normal(f64),
}

/// Parameter layout under construction: names, shapes and init rules.
#[derive(Default)]
pub(crate) struct Layout {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub inits: Vec<Init>,
}

impl Layout {
    pub fn tensor(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool, init: Init) -> Linear {
        let w = self.tensor(format!("{name}.w"), vec![fan_in, fan_out], init);
        let b = bias.then(|| self.tensor(format!("{name}.b"), vec![fan_out], Init::Zeros));
        Linear { w, b }
    }

    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        self.linear(name, fan_in, fan_out, true, Init::Xavier { fan_in, fan_out })
    }

    pub fn zeroed(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        self.linear(name, fan_in, fan_out, true, Init::Zeros)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

impl Linear {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

/// Half-cosine / half-sine features with geometric frequencies from 1 down to
/// `1 / max_period`.
pub fn timestep_features(t: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = if half > 1 {
            (-(max_period.ln()) * j as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        out[j] = (t * freq).cos();
        out[half + j] = (t * freq).sin();
    }
    out
}

pub const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal features followed by a two-layer SiLU MLP.
#[derive(Clone, Debug)]
pub struct TimeEmbedder {
    pub fc1: Linear,
    pub fc2: Linear,
    pub freq_dim: usize,
}

impl TimeEmbedder {
    pub(crate) fn new(layout: &mut Layout, name: &str, freq_dim: usize, hidden: usize) -> Self {
        Self {
            fc1: layout.linear(&format!("{name}.fc1"), freq_dim, hidden, true, Init::Normal(0.02)),
            fc2: layout.linear(&format!("{name}.fc2"), hidden, hidden, true, Init::Normal(0.02)),
            freq_dim,
        }
    }

    /// One embedding per entry of `ts`, shape `(len, hidden)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ts: &[f64]) -> Result<Var> {
        let feats: Vec<T> = ts
            .iter()
            .flat_map(|&t| timestep_features(t, self.freq_dim, MAX_PERIOD))
            .map(T::of)
            .collect();
        let x = g.constant(Tensor::from_vec(&[ts.len(), self.freq_dim], feats)?);
        let h = self.fc1.forward(g, x)?;
        let h = g.silu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention; the key projection has no bias
/// since a shared key offset cancels in the softmax.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub(crate) fn new(layout: &mut Layout, name: &str, d: usize, heads: usize) -> Self {
        let xav = Init::Xavier { fan_in: d, fan_out: d };
        Self {
            q: layout.xavier(&format!("{name}.q"), d, d),
            k: layout.linear(&format!("{name}.k"), d, d, false, xav),
            v: layout.xavier(&format!("{name}.v"), d, d),
            o: layout.xavier(&format!("{name}.o"), d, d),
            heads,
        }
    }

    /// `query_in (B, Nq, D)` attends over `kv_in (B, Nk, D)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, query_in: Var, kv_in: Var) -> Result<Var> {
        let qs = g.shape(query_in).to_vec();
        let ks = g.shape(kv_in).to_vec();
        let (b, nq, d) = (qs[0], qs[1], qs[2]);
        let nk = ks[1];
        let v = self.v.forward(g, kv_in)?;
        if nk == 1 {
            // softmax over a single key is exactly 1
            let out = if nq == 1 { v } else { g.gather(v, broadcast_index(b, nq, d), &[b, nq, d])? };
            return self.o.forward(g, out);
        }
        let h = self.heads;
        let dh = d / h;
        let q = self.q.forward(g, query_in)?;
        let k = self.k.forward(g, kv_in)?;
        let split = |g: &mut Graph<T>, x: Var, n: usize| -> Result<Var> {
            let x = g.reshape(x, &[b, n, h, dh])?;
            let x = g.permute_0213(x)?;
            g.reshape(x, &[b * h, n, dh])
        };
        let q = split(g, q, nq)?;
        let k = split(g, k, nk)?;
        let v = split(g, v, nk)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
        let attn = g.softmax(scores);
        let out = g.bmm(attn, v, false)?;
        let out = g.reshape(out, &[b, h, nq, dh])?;
        let out = g.permute_0213(out)?;
        let out = g.reshape(out, &[b, nq, d])?;
        self.o.forward(g, out)
    }
}

fn broadcast_index(b: usize, n: usize, d: usize) -> Vec<usize> {
    (0..b)
        .flat_map(|bi| (0..n).flat_map(move |_| (bi * d)..(bi * d + d)))
        .collect()
}

/// `LN(x)·(1 + scale) + shift` with per-sample `(B, D)` modulation broadcast
/// over the tokens of `x (B, N, D)`.
pub fn modulate<T: Real>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.shape(x)[1];
    let normed = g.layer_norm(x);
    let scale = g.repeat_tokens(scale, n)?;
    let scale = g.add_scalar(scale, T::one());
    let y = g.mul(normed, scale)?;
    let shift = g.repeat_tokens(shift, n)?;
    g.add(y, shift)
}

/// `x + gate ⊙ update`, gate broadcast over tokens.
pub fn gated_residual<T: Real>(g: &mut Graph<T>, x: Var, gate: Var, update: Var) -> Result<Var> {
    let n = g.shape(x)[1];
    let gate = g.repeat_tokens(gate, n)?;
    let u = g.mul(gate, update)?;
    g.add(x, u)
}

/// Transformer block with AdaLN-Zero conditioning (six modulation signals).
#[derive(Clone, Debug)]
pub struct DitBlock {
    pub adaln: Linear,
    pub attn: Attention,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl DitBlock {
    pub(crate) fn new(layout: &mut Layout, name: &str, d: usize, heads: usize, mlp_hidden: usize) -> Self {
        Self {
            adaln: layout.zeroed(&format!("{name}.adaln"), d, 6 * d),
            attn: Attention::new(layout, &format!("{name}.attn"), d, heads),
            fc1: layout.xavier(&format!("{name}.mlp.fc1"), d, mlp_hidden),
            fc2: layout.xavier(&format!("{name}.mlp.fc2"), mlp_hidden, d),
        }
    }

    /// `cond` is the SiLU-activated conditioning vector `(B, D)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, cond: Var) -> Result<Var> {
        let m = self.adaln.forward(g, cond)?;
        let parts = g.chunk_last(m, 6)?;
        let (shift_msa, scale_msa, gate_msa) = (parts[0], parts[1], parts[2]);
        let (shift_mlp, scale_mlp, gate_mlp) = (parts[3], parts[4], parts[5]);

        let h = modulate(g, x, shift_msa, scale_msa)?;
        let a = self.attn.forward(g, h, h)?;
        let x = gated_residual(g, x, gate_msa, a)?;

        let h = modulate(g, x, shift_mlp, scale_mlp)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        gated_residual(g, x, gate_mlp, h)
    }
}

/// Final layer: adaptive layer norm then a zero-initialized projection to
/// the token (patch or point) dimension.
#[derive(Clone, Debug)]
pub struct OutputHead {
    pub adaln: Linear,
    pub out: Linear,
}

impl OutputHead {
    pub(crate) fn new(layout: &mut Layout, name: &str, d: usize, patch_dim: usize) -> Self {
        Self {
            adaln: layout.zeroed(&format!("{name}.adaln"), d, 2 * d),
            out: layout.zeroed(&format!("{name}.out"), d, patch_dim),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, cond: Var) -> Result<Var> {
        let m = self.adaln.forward(g, cond)?;
        let parts = g.chunk_last(m, 2)?;
        let h = modulate(g, x, parts[0], parts[1])?;
        self.out.forward(g, h)
    }
}

/// Fixed 2-D sine-cosine positional table, shape `(gh·gw, d)`.
pub fn sincos_pos_embed_2d(d: usize, gh: usize, gw: usize) -> Vec<f64> {
    let quarter = d / 4;
    let one_d = |pos: f64| -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * quarter);
        let omegas: Vec<f64> = (0..quarter)
            .map(|i| 1.0 / MAX_PERIOD.powf(i as f64 / quarter as f64))
            .collect();
        v.extend(omegas.iter().map(|w| (pos * w).sin()));
        v.extend(omegas.iter().map(|w| (pos * w).cos()));
        v
    };
    let mut out = Vec::with_capacity(gh * gw * d);
    for i in 0..gh {
        for j in 0..gw {
            out.extend(one_d(i as f64));
            out.extend(one_d(j as f64));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_features_at_zero() {
        let f = timestep_features(0.0, 16, MAX_PERIOD);
        assert!(f[..8].iter().all(|&c| c == 1.0));
        assert!(f[8..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn lowest_frequency_has_max_period() {
        let dim = 16;
        let t = 0.37;
        let a = timestep_features(t, dim, MAX_PERIOD);
        let b = timestep_features(t + 2.0 * std::f64::consts::PI * MAX_PERIOD, dim, MAX_PERIOD);
        let last = dim / 2 - 1;
        assert!((a[last] - b[last]).abs() < 1e-9);
        assert!((a[dim - 1] - b[dim - 1]).abs() < 1e-9);
    }

    #[test]
    fn distinct_times_distinct_features() {
        assert_ne!(timestep_features(0.1, 32, MAX_PERIOD), timestep_features(0.2, 32, MAX_PERIOD));
    }

    #[test]
    fn pos_embed_shape() {
        let p = sincos_pos_embed_2d(8, 4, 4);
        assert_eq!(p.len(), 16 * 8);
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
