use crate::error::{Error, Result};
use crate::foundation::{Graph, ParamSet, Real, RngStream, Tensor, Var};
use crate::interpolant::BranchTimes;
use crate::network::layers::{
    modulate, sincos_pos_embed_2d, Attention, DitBlock, Init, Layout, Linear, OutputHead, TimeEmbedder,
};
use crate::network::{DataGeometry, ModelConfig, VeraVariant};

/// Refiner inserted between consecutive branches.
#[derive(Clone, Debug)]
pub struct VeraBlock {
    pub acc_mlp: Vec<Linear>,
    pub gap_embed: TimeEmbedder,
    pub adaln: Linear,
    pub mlp: Option<(Linear, Linear)>,
    pub cross_attn: Option<Attention>,
    pub acc_head: OutputHead,
    variant: VeraVariant,
    residual: bool,
}

/// Graph handles produced by [`DeepFlowModel::forward`].
#[derive(Clone, Debug)]
pub struct BranchOutputs {
    /// Embedded input tokens `(B, N, D)`.
    pub tokens: Var,
    /// Hidden velocity features per branch.
    pub vstar: Vec<Var>,
    /// Data-space velocity per branch.
    pub v: Vec<Var>,
    /// Hidden acceleration features per refiner site.
    pub astar: Vec<Var>,
    /// Data-space acceleration per refiner site.
    pub a: Vec<Var>,
    /// Refiner output fed to the next branch.
    pub refined: Vec<Var>,
    /// Per-site, per-sample time gaps `t_{i+1} − t_i` used for modulation.
    pub gaps: Vec<Vec<f64>>,
}

/// DeepFlow-{k}T network layout. Weights live in a separate [`ParamSet`] so the
/// same layout runs in `f32` for training and `f64` for verification.
#[derive(Clone, Debug)]
pub struct DeepFlowModel {
    cfg: ModelConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    embed: Linear,
    t_embed: TimeEmbedder,
    class_embed: Option<usize>,
    branches: Vec<Vec<DitBlock>>,
    heads: Vec<OutputHead>,
    veras: Vec<VeraBlock>,
    pos_embed: Option<Vec<f64>>,
}

impl DeepFlowModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let p = cfg.geometry.patch_dim();
        let mut l = Layout::default();
        let embed = l.xavier("embed", p, d);
        let t_embed = TimeEmbedder::new(&mut l, "t_embed", cfg.freq_dim, d);
        let class_embed = (cfg.num_classes > 0)
            .then(|| l.tensor("class_embed".into(), vec![cfg.num_classes + 1, d], Init::Normal(0.02)));
        let mut branches = Vec::with_capacity(cfg.k);
        let mut heads = Vec::with_capacity(cfg.k);
        let mut veras = Vec::new();
        for i in 0..cfg.k {
            let blocks = (0..cfg.depth_per_branch)
                .map(|j| DitBlock::new(&mut l, &format!("branch{i}.block{j}"), d, cfg.heads, cfg.mlp_hidden()))
                .collect();
            branches.push(blocks);
            heads.push(OutputHead::new(&mut l, &format!("branch{i}.head"), d, p));
            if i + 1 < cfg.k && cfg.has_vera() {
                veras.push(VeraBlock::new(&mut l, &format!("vera{i}"), cfg));
            }
        }
        let pos_embed = match cfg.geometry {
            DataGeometry::Point { .. } => None,
            DataGeometry::Image {
                height, width, patch, ..
            } => Some(sincos_pos_embed_2d(d, height / patch, width / patch)),
        };
        Ok(Self {
            cfg: cfg.clone(),
            names: l.names,
            shapes: l.shapes,
            inits: l.inits,
            embed,
            t_embed,
            class_embed,
            branches,
            heads,
            veras,
            pos_embed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn num_params(&self) -> usize {
        self.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Fresh weights: Xavier for projections, N(0, 0.02) for embedders, zeros
    /// for every modulation and output layer.
    pub fn init_params<T: Real>(&self, stream: &mut RngStream) -> ParamSet<T> {
        let mut ps = ParamSet::new();
        for ((name, shape), init) in self.names.iter().zip(&self.shapes).zip(&self.inits) {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match *init {
                Init::Zeros => vec![T::zero(); n],
                Init::Normal(std) => (0..n).map(|_| T::of(std * stream.normal_f64())).collect(),
                Init::Xavier { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| T::of(bound * (2.0 * stream.uniform_f64() - 1.0))).collect()
                }
            };
            ps.push(name.clone(), Tensor::from_vec(shape, data).expect("layout shape"));
        }
        ps
    }

    /// Errors unless `params` has exactly this model's names and shapes.
    pub fn check_params<T: Real>(&self, params: &ParamSet<T>) -> Result<()> {
        let ok = params.names() == self.names.as_slice()
            && params.tensors().iter().zip(&self.shapes).all(|(t, s)| t.shape() == s.as_slice());
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint("parameter layout does not match the model configuration".into()))
        }
    }

    /// Index of the null (unconditional) class.
    pub fn null_class(&self) -> usize {
        self.cfg.num_classes
    }

    /// Patchify (or wrap a point as one token) and project to the hidden width,
    /// adding fixed positional embeddings for images.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, x: &Tensor<T>) -> Result<Var> {
        let geo = self.cfg.geometry;
        let expected = geo.batch_shape(x.rows());
        if x.shape() != expected.as_slice() {
            return Err(Error::shape("embed", x.shape(), &expected));
        }
        let b = x.rows();
        let (n, p) = (geo.tokens(), geo.patch_dim());
        let patches = match geo {
            DataGeometry::Point { .. } => x.clone().reshape(&[b, 1, p])?,
            DataGeometry::Image { .. } => {
                let idx = patchify_index(&geo, b);
                let src = x.data();
                Tensor::from_vec(&[b, n, p], idx.iter().map(|&i| src[i]).collect())?
            }
        };
        let xv = g.constant(patches);
        let tokens = self.embed.forward(g, xv)?;
        match &self.pos_embed {
            None => Ok(tokens),
            Some(pe) => {
                let d = self.cfg.hidden;
                let tiled: Vec<T> = (0..b).flat_map(|_| pe.iter().map(|&v| T::of(v))).collect();
                let pos = g.constant(Tensor::from_vec(&[b, n, d], tiled)?);
                g.add(tokens, pos)
            }
        }
    }

    /// SiLU of time embedding plus class embedding, `(B, D)`.
    fn condition<T: Real>(&self, g: &mut Graph<T>, ts: &[f64], classes: Option<&[usize]>) -> Result<Var> {
        let c = self.t_embed.forward(g, ts)?;
        let c = match (self.class_embed, classes) {
            (Some(table), Some(ids)) => {
                if ids.len() != ts.len() {
                    return Err(Error::shape("class ids", &[ids.len()], &[ts.len()]));
                }
                if let Some(bad) = ids.iter().find(|&&y| y > self.cfg.num_classes) {
                    return Err(Error::InvalidArgument(format!(
                        "class id {bad} out of range for {} classes",
                        self.cfg.num_classes
                    )));
                }
                let tv = g.param(table);
                let e = g.gather_rows(tv, ids)?;
                g.add(c, e)?
            }
            (Some(table), None) => {
                let tv = g.param(table);
                let e = g.gather_rows(tv, &vec![self.null_class(); ts.len()])?;
                g.add(c, e)?
            }
            (None, Some(_)) => {
                return Err(Error::InvalidArgument(
                    "class conditioning requested on an unconditional model".into(),
                ))
            }
            (None, None) => c,
        };
        Ok(g.silu(c))
    }

    /// The raw time embedding (without class) for each entry of `ts`.
    pub fn time_embed<T: Real>(&self, g: &mut Graph<T>, ts: &[f64]) -> Result<Var> {
        self.t_embed.forward(g, ts)
    }

    /// Run the transformer blocks of branch `i`.
    pub fn branch_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        i: usize,
        tokens: Var,
        ts: &[f64],
        classes: Option<&[usize]>,
    ) -> Result<Var> {
        let cond = self.condition(g, ts, classes)?;
        self.run_blocks(g, i, tokens, cond)
    }

    fn run_blocks<T: Real>(&self, g: &mut Graph<T>, i: usize, tokens: Var, cond: Var) -> Result<Var> {
        let mut x = tokens;
        for block in &self.branches[i] {
            x = block.forward(g, x, cond)?;
        }
        Ok(x)
    }

    /// Velocity head of branch `i`, returning data-shaped output.
    pub fn velocity_head<T: Real>(
        &self,
        g: &mut Graph<T>,
        i: usize,
        vstar: Var,
        ts: &[f64],
        classes: Option<&[usize]>,
    ) -> Result<Var> {
        let cond = self.condition(g, ts, classes)?;
        let out = self.heads[i].forward(g, vstar, cond)?;
        self.unpatchify(g, out)
    }

    /// Token outputs `(B, N, P)` back to data shape.
    pub fn unpatchify<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let b = g.shape(x)[0];
        let geo = self.cfg.geometry;
        match geo {
            DataGeometry::Point { dim } => g.reshape(x, &[b, dim]),
            DataGeometry::Image { .. } => {
                // inverse of the patchify map
                let fwd = patchify_index(&geo, b);
                let mut inv = vec![0; fwd.len()];
                for (dst, &src) in fwd.iter().enumerate() {
                    inv[src] = dst;
                }
                g.gather(x, inv, &geo.batch_shape(b))
            }
        }
    }

    pub fn vera(&self, site: usize) -> Option<&VeraBlock> {
        self.veras.get(site)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        x_t: &Tensor<T>,
        times: &[BranchTimes],
        classes: Option<&[usize]>,
    ) -> Result<BranchOutputs> {
        let per_branch = branch_major(times, self.cfg.k, x_t.rows())?;
        self.forward_branch_major(g, x_t, &per_branch, classes)
    }

    /// Full forward pass; `times[i][b]` is the time of branch `i` for sample `b`.
    pub fn forward_branch_major<T: Real>(
        &self,
        g: &mut Graph<T>,
        x_t: &Tensor<T>,
        times: &[Vec<f64>],
        classes: Option<&[usize]>,
    ) -> Result<BranchOutputs> {
        let k = self.cfg.k;
        if times.len() != k {
            return Err(Error::InvalidArgument(format!("expected {k} branch times, got {}", times.len())));
        }
        let tokens = self.embed(g, x_t)?;
        let mut out = BranchOutputs {
            tokens,
            vstar: Vec::with_capacity(k),
            v: Vec::with_capacity(k),
            astar: Vec::new(),
            a: Vec::new(),
            refined: Vec::new(),
            gaps: Vec::new(),
        };
        let mut input = tokens;
        for i in 0..k {
            let cond = self.condition(g, &times[i], classes)?;
            let vstar = self.run_blocks(g, i, input, cond)?;
            let v = self.heads[i].forward(g, vstar, cond)?;
            let v = self.unpatchify(g, v)?;
            out.vstar.push(vstar);
            out.v.push(v);
            if i + 1 == k {
                break;
            }
            input = match self.veras.get(i) {
                None => vstar,
                Some(vera) => {
                    let gaps: Vec<f64> = times[i].iter().zip(&times[i + 1]).map(|(a, b)| b - a).collect();
                    let src = if self.cfg.detach_vera_input {
                        let val = g.value(vstar).clone();
                        g.constant(val)
                    } else {
                        vstar
                    };
                    let (refined, astar) = vera.forward(g, src, &gaps, tokens)?;
                    let a = vera.acc_head.forward(g, astar, cond)?;
                    let a = self.unpatchify(g, a)?;
                    out.astar.push(astar);
                    out.a.push(a);
                    out.refined.push(refined);
                    out.gaps.push(gaps);
                    refined
                }
            };
        }
        Ok(out)
    }
}

impl VeraBlock {
    fn new(l: &mut Layout, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        let mut acc_mlp = Vec::new();
        let mut prev = d;
        for (j, c) in cfg.accmlp_channels().into_iter().enumerate() {
            acc_mlp.push(l.xavier(&format!("{name}.acc_mlp.{j}"), prev, c));
            prev = c;
        }
        let gap_embed = TimeEmbedder::new(l, &format!("{name}.gap_embed"), cfg.freq_dim, d);
        let width = match cfg.vera_variant {
            VeraVariant::Concat => 2 * d,
            _ => d,
        };
        let adaln = l.zeroed(&format!("{name}.adaln"), d, 2 * width);
        let mlp = (cfg.vera_variant == VeraVariant::Concat).then(|| {
            (
                l.xavier(&format!("{name}.mlp.fc1"), 2 * d, 2 * d),
                l.xavier(&format!("{name}.mlp.fc2"), 2 * d, d),
            )
        });
        let cross_attn = cfg
            .cross_attention
            .then(|| Attention::new(l, &format!("{name}.cross_attn"), d, cfg.heads));
        let acc_head = OutputHead::new(l, &format!("{name}.acc_head"), d, cfg.geometry.patch_dim());
        Self {
            acc_mlp,
            gap_embed,
            adaln,
            mlp,
            cross_attn,
            acc_head,
            variant: cfg.vera_variant,
            residual: cfg.cross_attn_residual,
        }
    }

    /// Acceleration features: linear layers with SiLU between them.
    pub fn acc_mlp<T: Real>(&self, g: &mut Graph<T>, vstar: Var) -> Result<Var> {
        let mut h = vstar;
        let last = self.acc_mlp.len() - 1;
        for (j, layer) in self.acc_mlp.iter().enumerate() {
            h = layer.forward(g, h)?;
            if j < last {
                h = g.silu(h);
            }
        }
        Ok(h)
    }

    /// Time-gap-conditioned adaptive layer norm of `features`, scale and shift
    /// from a zero-initialized projection of the gap embedding.
    pub fn gap_adaln<T: Real>(&self, g: &mut Graph<T>, features: Var, gaps: &[f64]) -> Result<Var> {
        let e = self.gap_embed.forward(g, gaps)?;
        let e = g.silu(e);
        let m = self.adaln.forward(g, e)?;
        let parts = g.chunk_last(m, 2)?;
        modulate(g, features, parts[0], parts[1])
    }

    /// Concat variant: `MLP(AdaLN(concat(v*, a*), d))`. Additive variant:
    /// `v* + AdaLN(a*, d)`.
    pub fn modulate<T: Real>(&self, g: &mut Graph<T>, vstar: Var, astar: Var, gaps: &[f64]) -> Result<Var> {
        match self.variant {
            VeraVariant::Concat => {
                let h = g.concat(vstar, astar)?;
                let y = self.gap_adaln(g, h, gaps)?;
                let (fc1, fc2) = self.mlp.as_ref().expect("concat variant has an MLP");
                let y = fc1.forward(g, y)?;
                let y = g.gelu(y);
                fc2.forward(g, y)
            }
            _ => {
                let m = self.gap_adaln(g, astar, gaps)?;
                g.add(vstar, m)
            }
        }
    }

    /// Queries from the normalized input tokens, keys and values from the
    /// normalized modulated features, optional residual.
    pub fn cross_space_attention<T: Real>(&self, g: &mut Graph<T>, modulated: Var, x_tokens: Var) -> Result<Var> {
        let Some(attn) = &self.cross_attn else {
            return Ok(modulated);
        };
        let (ms, xs) = (g.shape(modulated).to_vec(), g.shape(x_tokens).to_vec());
        if ms.len() != 3 || xs.len() != 3 || ms[1] != xs[1] || ms[0] != xs[0] {
            return Err(Error::shape("cross_space_attention", &ms, &xs));
        }
        let q = g.layer_norm(x_tokens);
        let kv = g.layer_norm(modulated);
        let out = attn.forward(g, q, kv)?;
        if self.residual {
            g.add(out, modulated)
        } else {
            Ok(out)
        }
    }

    /// Returns `(refined, astar)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, vstar: Var, gaps: &[f64], x_tokens: Var) -> Result<(Var, Var)> {
        let astar = self.acc_mlp(g, vstar)?;
        let m = self.modulate(g, vstar, astar, gaps)?;
        let refined = self.cross_space_attention(g, m, x_tokens)?;
        Ok((refined, astar))
    }
}

/// Transpose per-sample branch times into per-branch lists.
pub fn branch_major(times: &[BranchTimes], k: usize, batch: usize) -> Result<Vec<Vec<f64>>> {
    if times.len() != batch {
        return Err(Error::InvalidArgument(format!("{} branch time sets for batch {batch}", times.len())));
    }
    if let Some(bad) = times.iter().find(|t| t.k() != k) {
        return Err(Error::InvalidArgument(format!("branch times of length {} for k = {k}", bad.k())));
    }
    Ok((0..k).map(|i| times.iter().map(|t| t.times()[i]).collect()).collect())
}

/// Source offsets into a `(B, C, H, W)` buffer for the `(B, N, p·p·C)` patch
/// layout; patch vectors are ordered `(row-in-patch, col-in-patch, channel)`.
fn patchify_index(geo: &DataGeometry, batch: usize) -> Vec<usize> {
    let DataGeometry::Image {
        channels: c,
        height: h,
        width: w,
        patch: p,
    } = *geo
    else {
        unreachable!("patchify on point data")
    };
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(batch * c * h * w);
    for b in 0..batch {
        for hi in 0..gh {
            for wi in 0..gw {
                for pi in 0..p {
                    for pj in 0..p {
                        for ci in 0..c {
                            idx.push(((b * c + ci) * h + hi * p + pi) * w + wi * p + pj);
                        }
                    }
                }
            }
        }
    }
    idx
}
