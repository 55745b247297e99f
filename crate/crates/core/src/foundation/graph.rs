//! Reverse-mode differentiation over a dynamically recorded computation.
//!
//! A [`Graph`] is built fresh for each forward pass. Every operation appends a
//! node holding its value; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every node that depends on a parameter or a
//! gradient-tracked input. Only the operation set the model needs is
//! provided.

use crate::error::{Error, Result};
use crate::foundation::{ParamSet, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Silu(Var),
    Gelu(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Softmax(Var),
    Concat(Var, Var),
    SliceLast { x: Var, start: usize },
    RepeatTokens { x: Var, n: usize },
    Bmm { a: Var, b: Var, trans_b: bool },
    Permute0213(Var),
    Gather { x: Var, index: Vec<usize> },
    Reshape(Var),
    MeanAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

const LN_EPS: f64 = 1e-6;

pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamSet<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_nodes: Vec<Option<Var>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for each parameter of the bound [`ParamSet`]; zeros for
    /// parameters the output does not depend on.
    pub fn params(&self, params: &ParamSet<T>) -> Vec<Tensor<T>> {
        (0..params.len())
            .map(|i| {
                self.param_nodes
                    .get(i)
                    .copied()
                    .flatten()
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(params.get(i).shape()))
            })
            .collect()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamSet<T>) -> Self {
        Self {
            nodes: Vec::with_capacity(512),
            params: Some(params),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows to it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for parameter `id` of the bound set, created once per graph.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let params = self.params.expect("graph has no bound parameters");
        let v = self.push(params.get(id).clone(), Op::Param, true);
        self.param_vars[id] = Some(v);
        v
    }

    /// `x (.., K) · w (K, N)`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::shape("matmul", &xs, &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(x).data(),
            (k as isize, 1),
            self.value(w).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let tracked = self.tracked(x) || self.tracked(w);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::MatMul(x, w), tracked))
    }

    /// `x (.., N) + b (N)`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(b).numel();
        if self.value(x).last_dim() != n || self.value(b).rank() != 1 {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let tracked = self.tracked(x) || self.tracked(b);
        Ok(self.push(out, Op::AddBias(x, b), tracked))
    }

    /// Dense layer `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), name, f)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        let tracked = self.tracked(a);
        self.push(out, Op::Scale(a, c), tracked)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v + c);
        let tracked = self.tracked(a);
        self.push(out, Op::AddScalar(a), tracked)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        let tracked = self.tracked(a);
        self.push(out, Op::Square(a), tracked)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * sigmoid(v));
        let tracked = self.tracked(a);
        self.push(out, Op::Silu(a), tracked)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| gelu_tanh(v).0);
        let tracked = self.tracked(a);
        self.push(out, Op::Gelu(a), tracked)
    }

    /// Layer normalization over the last dimension, without affine terms.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let eps = T::of(LN_EPS);
        let inv_d = T::of(1.0 / d as f64);
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(xv.numel() / d.max(1));
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = (var + eps).sqrt().recip();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let tracked = self.tracked(x);
        self.push(out, Op::LayerNorm { x, rstd }, tracked)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let tracked = self.tracked(x);
        self.push(out, Op::Softmax(x), tracked)
    }

    /// Concatenate along the last dimension.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for (ra, rb) in va.chunks(da).zip(vb.chunks(db)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Concat(a, b), tracked))
    }

    /// Columns `start..start+len` of the last dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if start + len > d {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} of last dim {d}",
                start + len
            )));
        }
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut s = shape;
        *s.last_mut().unwrap() = len;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_vec(&s, out)?, Op::SliceLast { x, start }, tracked))
    }

    /// Split the last dimension into `parts` equal chunks.
    pub fn chunk_last(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let d = self.value(x).last_dim();
        if d % parts != 0 {
            return Err(Error::InvalidArgument(format!("cannot split {d} into {parts}")));
        }
        let len = d / parts;
        (0..parts).map(|i| self.slice_last(x, i * len, len)).collect()
    }

    /// `(B, F) → (B, n, F)`: repeat every row `n` times.
    pub fn repeat_tokens(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("repeat_tokens", &s, &[0, 0]));
        }
        let (b, f) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * n * f);
        for row in src.chunks(f) {
            for _ in 0..n {
                out.extend_from_slice(row);
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_vec(&[b, n, f], out)?, Op::RepeatTokens { x, n }, tracked))
    }

    /// Batched matrix product over the leading dimension:
    /// `a (G, M, K) · b (G, K, N)`, or `a · bᵀ` with `b (G, N, K)` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); g * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for gi in 0..g {
            T::gemm(
                m,
                k,
                n,
                &va[gi * m * k..(gi + 1) * m * k],
                (k as isize, 1),
                &vb[gi * k * n..(gi + 1) * k * n],
                b_strides,
                T::zero(),
                &mut out[gi * m * n..(gi + 1) * m * n],
                (n as isize, 1),
            );
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_vec(&[g, m, n], out)?, Op::Bmm { a, b, trans_b }, tracked))
    }

    /// `(A, B, C, D) → (A, C, B, D)`; its own inverse.
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("permute_0213", &s, &[0, 0, 0, 0]));
        }
        let out = permute_0213_data(self.value(x).data(), &s);
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::from_vec(&[s[0], s[2], s[1], s[3]], out)?,
            Op::Permute0213(x),
            tracked,
        ))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::InvalidArgument(format!("gather index {bad} out of range")));
        }
        let out: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::from_vec(shape, out)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::Gather { x, index }, tracked))
    }

    /// Rows of a `(R, F)` table selected by `rows`, shape `(rows.len(), F)`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let f = self.value(table).last_dim();
        let index = rows.iter().flat_map(|&r| (r * f)..(r * f + f)).collect();
        self.gather(table, index, &[rows.len(), f])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::Reshape(x), tracked))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), tracked)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean_all(sq))
    }

    /// Reverse sweep from scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::ones(self.value(output).shape()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients {
            grads,
            param_nodes: self.param_vars.clone(),
        }
    }

    fn propagate(&self, i: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.numel() / k.max(1);
                if self.tracked(*x) {
                    let mut dx = vec![T::zero(); m * k];
                    T::gemm(m, n, k, dy.data(), (n as isize, 1), wv.data(), (1, n as isize), T::zero(), &mut dx, (k as isize, 1));
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if self.tracked(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    T::gemm(k, m, n, xv.data(), (1, k as isize), dy.data(), (n as isize, 1), T::zero(), &mut dw, (n as isize, 1));
                    accumulate(grads, *w, wv.shape(), dw);
                }
            }
            Op::AddBias(x, b) => {
                if self.tracked(*x) {
                    accumulate(grads, *x, dy.shape(), dy.data().to_vec());
                }
                if self.tracked(*b) {
                    let n = self.value(*b).numel();
                    let mut db = vec![T::zero(); n];
                    for row in dy.data().chunks(n) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(grads, *b, &[n], db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.tracked(*v) {
                        accumulate(grads, *v, dy.shape(), dy.data().to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.tracked(*a) {
                    accumulate(grads, *a, dy.shape(), dy.data().to_vec());
                }
                if self.tracked(*b) {
                    accumulate(grads, *b, dy.shape(), dy.data().iter().map(|&g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.tracked(*a) {
                    let d = dy.data().iter().zip(vb).map(|(&g, &v)| g * v).collect();
                    accumulate(grads, *a, dy.shape(), d);
                }
                if self.tracked(*b) {
                    let d = dy.data().iter().zip(va).map(|(&g, &v)| g * v).collect();
                    accumulate(grads, *b, dy.shape(), d);
                }
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, dy.shape(), dy.data().iter().map(|&g| g * *c).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                accumulate(grads, *a, &shape, dy.data().to_vec());
            }
            Op::Square(a) => {
                let va = self.value(*a).data();
                let two = T::of(2.0);
                let d = dy.data().iter().zip(va).map(|(&g, &v)| two * g * v).collect();
                accumulate(grads, *a, dy.shape(), d);
            }
            Op::Silu(a) => {
                let va = self.value(*a).data();
                let d = dy
                    .data()
                    .iter()
                    .zip(va)
                    .map(|(&g, &v)| {
                        let s = sigmoid(v);
                        g * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                accumulate(grads, *a, dy.shape(), d);
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                let d = dy.data().iter().zip(va).map(|(&g, &v)| g * gelu_tanh(v).1).collect();
                accumulate(grads, *a, dy.shape(), d);
            }
            Op::LayerNorm { x, rstd } => {
                let d = y.last_dim();
                let inv_d = T::of(1.0 / d as f64);
                let mut dx = Vec::with_capacity(y.numel());
                for ((yr, gr), &r) in y.data().chunks(d).zip(dy.data().chunks(d)).zip(rstd) {
                    let mean_g = gr.iter().copied().sum::<T>() * inv_d;
                    let mean_gy = gr.iter().zip(yr).map(|(&g, &yy)| g * yy).sum::<T>() * inv_d;
                    dx.extend(gr.iter().zip(yr).map(|(&g, &yy)| r * (g - mean_g - yy * mean_gy)));
                }
                accumulate(grads, *x, y.shape(), dx);
            }
            Op::Softmax(x) => {
                let d = y.last_dim();
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(d).zip(dy.data().chunks(d)) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    dx.extend(yr.iter().zip(gr).map(|(&yy, &g)| yy * (g - dot)));
                }
                accumulate(grads, *x, y.shape(), dx);
            }
            Op::Concat(a, b) => {
                let da = self.value(*a).last_dim();
                let db = self.value(*b).last_dim();
                if self.tracked(*a) {
                    let g = dy.data().chunks(da + db).flat_map(|r| r[..da].iter().copied()).collect();
                    let shape = self.shape(*a).to_vec();
                    accumulate(grads, *a, &shape, g);
                }
                if self.tracked(*b) {
                    let g = dy.data().chunks(da + db).flat_map(|r| r[da..].iter().copied()).collect();
                    let shape = self.shape(*b).to_vec();
                    accumulate(grads, *b, &shape, g);
                }
            }
            Op::SliceLast { x, start } => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let len = y.last_dim();
                let mut dx = vec![T::zero(); xv.numel()];
                for (row, g) in dx.chunks_mut(d).zip(dy.data().chunks(len)) {
                    row[*start..*start + len].copy_from_slice(g);
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::RepeatTokens { x, n } => {
                let xs = self.shape(*x).to_vec();
                let f = xs[1];
                let mut dx = vec![T::zero(); xs[0] * f];
                for (row, block) in dx.chunks_mut(f).zip(dy.data().chunks(n * f)) {
                    for tok in block.chunks(f) {
                        for (r, &g) in row.iter_mut().zip(tok) {
                            *r += g;
                        }
                    }
                }
                accumulate(grads, *x, &xs, dx);
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (g, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = y.shape()[2];
                if self.tracked(*a) {
                    // dA = dC · Bᵀ (or dC · B when b is stored transposed)
                    let b_strides = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    let mut da = vec![T::zero(); g * m * k];
                    for gi in 0..g {
                        T::gemm(
                            m,
                            n,
                            k,
                            &dy.data()[gi * m * n..(gi + 1) * m * n],
                            (n as isize, 1),
                            &bv.data()[gi * k * n..(gi + 1) * k * n],
                            b_strides,
                            T::zero(),
                            &mut da[gi * m * k..(gi + 1) * m * k],
                            (k as isize, 1),
                        );
                    }
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.tracked(*b) {
                    let mut db = vec![T::zero(); g * k * n];
                    for gi in 0..g {
                        let a_blk = &av.data()[gi * m * k..(gi + 1) * m * k];
                        let dy_blk = &dy.data()[gi * m * n..(gi + 1) * m * n];
                        let out = &mut db[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // dB (N, K) = dCᵀ · A
                            T::gemm(n, m, k, dy_blk, (1, n as isize), a_blk, (k as isize, 1), T::zero(), out, (k as isize, 1));
                        } else {
                            // dB (K, N) = Aᵀ · dC
                            T::gemm(k, m, n, a_blk, (1, k as isize), dy_blk, (n as isize, 1), T::zero(), out, (n as isize, 1));
                        }
                    }
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Permute0213(x) => {
                let dx = permute_0213_data(dy.data(), y.shape());
                let shape = self.shape(*x).to_vec();
                accumulate(grads, *x, &shape, dx);
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); xv.numel()];
                for (&src, &g) in index.iter().zip(dy.data()) {
                    dx[src] += g;
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let g = dy.item() / T::of(xv.numel() as f64);
                accumulate(grads, *x, xv.shape(), vec![g; xv.numel()]);
            }
        }
    }
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::from_vec(shape, g).expect("gradient shape"));
        }
    }
}

fn permute_0213_data<T: Copy>(src: &[T], s: &[usize]) -> Vec<T> {
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(src.len());
    for ai in 0..a {
        for ci in 0..c {
            for bi in 0..b {
                let base = ((ai * b + bi) * c + ci) * d;
                out.extend_from_slice(&src[base..base + d]);
            }
        }
    }
    out
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Tanh-approximated GELU and its derivative.
fn gelu_tanh<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let value = half * x * (T::one() + th);
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    let deriv = half * (T::one() + th) + half * x * (T::one() - th * th) * du;
    (value, deriv)
}
