//! Finite-difference checks of every network block and of the full training
//! objective, in f64 with randomized weights.

use deepflow::foundation::{grad_check_with, GradCheckReport, Graph, ParamSet, RngStream, Tensor, Var};
use deepflow::interpolant::assign_branch_times;
use deepflow::network::{branch_major, DataGeometry, DeepFlowModel, ModelConfig, VeraVariant};
use deepflow::training::{objective_with, StepDraws, TrainConfig};
use deepflow::Result;

/// Parameter noise for the body and the output heads, and the difference step.
struct Point {
    noise: f64,
    head_noise: f64,
    eps: f64,
}

// Tiny parameter gradients on paths through a layer norm are limited by
// roundoff, so parameters take a larger step than inputs.
const BLOCK: Point = Point { noise: 0.2, head_noise: 0.2, eps: 1e-4 };
const BLOCK_INPUT_EPS: f64 = 1e-5;
// The full objective is checked near a small-residual point: sinusoidal
// features with tiny frequencies give gradients near 1e-9, which central
// differences only resolve when the loss itself is small.
const OBJECTIVE: Point = Point { noise: 0.1, head_noise: 0.02, eps: 3e-5 };
const DATA_SCALE: f64 = 0.1;
const TOL: f64 = 1e-4;
const BATCH: usize = 4;

fn model(k: usize, variant: VeraVariant, geometry: DataGeometry, num_classes: usize) -> DeepFlowModel {
    DeepFlowModel::new(&ModelConfig {
        k,
        depth_per_branch: 1,
        hidden: 16,
        heads: 2,
        mlp_ratio: 2.0,
        num_classes,
        geometry,
        vera_variant: variant,
        accmlp_multipliers: vec![2.0, 1.0],
        freq_dim: 16,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn image() -> DataGeometry {
    DataGeometry::Image {
        channels: 1,
        height: 4,
        width: 4,
        patch: 2,
    }
}

/// Initial weights plus noise, so zero-initialized layers are exercised.
fn random_params(model: &DeepFlowModel, seed: u64, at: &Point) -> ParamSet<f64> {
    let mut ps = model.init_params::<f64>(&mut RngStream::new(seed, 0));
    let mut r = RngStream::new(seed, 1);
    for i in 0..ps.len() {
        let scale = if ps.name(i).contains("head") { at.head_noise } else { at.noise };
        for v in ps.get_mut(i).data_mut() {
            *v += scale * r.normal_f64();
        }
    }
    ps
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Scalar `mean(w ⊙ block(inputs))` for a fixed random `w`.
struct Block<'a> {
    params: &'a ParamSet<f64>,
    inputs: Vec<Tensor<f64>>,
    weight: Tensor<f64>,
    build: Box<Build<'a>>,
}

impl<'a> Block<'a> {
    fn new(params: &'a ParamSet<f64>, inputs: Vec<Tensor<f64>>, build: Box<Build<'a>>) -> Self {
        let mut g = Graph::with_params(params);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        let shape = g.shape(out).to_vec();
        let weight = RngStream::new(77, 0).normal::<f64>(&shape);
        Self {
            params,
            inputs,
            weight,
            build,
        }
    }

    fn eval(&self, params: &ParamSet<f64>, inputs: &[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
        let mut g = Graph::with_params(params);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = (self.build)(&mut g, &vars).unwrap();
        let w = g.constant(self.weight.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.mean_all(prod);
        let value = g.value(loss).item();
        let grads = g.backward(loss);
        let input_grads = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (value, input_grads, grads.params(params))
    }

    fn check_input(&self, i: usize) -> GradCheckReport {
        let with = |x: &Tensor<f64>| {
            let mut inputs = self.inputs.clone();
            inputs[i] = x.clone();
            inputs
        };
        grad_check_with(
            |x| self.eval(self.params, &with(x)).0,
            |x| {
                let (v, g, _) = self.eval(self.params, &with(x));
                (v, g[i].clone())
            },
            &self.inputs[i],
            BLOCK_INPUT_EPS,
            TOL,
        )
        .unwrap()
    }

    /// Check the parameter tensors whose names start with one of `prefixes`;
    /// the block does not read the others.
    fn check_params(&self, prefixes: &[&str]) -> GradCheckReport {
        let picked: Vec<usize> = (0..self.params.len())
            .filter(|&i| prefixes.iter().any(|p| self.params.name(i).starts_with(p)))
            .collect();
        assert!(!picked.is_empty(), "no parameters match {prefixes:?}");
        let flat: Vec<f64> = picked.iter().flat_map(|&i| self.params.get(i).data().to_vec()).collect();
        let with = |x: &Tensor<f64>| {
            let mut ps = self.params.clone();
            let mut off = 0;
            for &i in &picked {
                let t = ps.get_mut(i);
                let n = t.numel();
                t.data_mut().copy_from_slice(&x.data()[off..off + n]);
                off += n;
            }
            ps
        };
        grad_check_with(
            |x| self.eval(&with(x), &self.inputs).0,
            |x| {
                let ps = with(x);
                let (v, _, g) = self.eval(&ps, &self.inputs);
                let flat: Vec<f64> = picked.iter().flat_map(|&i| g[i].data().to_vec()).collect();
                (v, Tensor::from_vec(&[flat.len()], flat).unwrap())
            },
            &Tensor::from_vec(&[flat.len()], flat).unwrap(),
            BLOCK.eps,
            TOL,
        )
        .unwrap()
    }

    fn assert_all(&self, name: &str, prefixes: &[&str]) {
        for i in 0..self.inputs.len() {
            let r = self.check_input(i);
            assert!(r.passed, "{name}: input {i}: {r:?}");
        }
        let r = self.check_params(prefixes);
        assert!(r.passed, "{name}: params: {r:?}");
    }
}

fn tokens(seed: u64) -> Tensor<f64> {
    RngStream::new(seed, 5).normal::<f64>(&[BATCH, 4, 16]).scale(DATA_SCALE)
}

fn wide_tokens(seed: u64) -> Tensor<f64> {
    RngStream::new(seed, 5).normal::<f64>(&[BATCH, 4, 32]).scale(DATA_SCALE)
}

const TS: [f64; BATCH] = [0.97, 0.8, 0.66, 0.52];
const GAPS: [f64; BATCH] = [-0.81, -0.45, -0.93, -0.62];
const CLASSES: [usize; BATCH] = [0, 2, 1, 3];

pub fn embedding_and_time_embedder() {
    let m = model(2, VeraVariant::Concat, image(), 3);
    let ps = random_params(&m, 1, &BLOCK);
    let x = RngStream::new(1, 9).normal::<f64>(&[BATCH, 1, 4, 4]);
    let mm = &m;
    Block::new(&ps, vec![], Box::new(move |g, _| mm.embed(g, &x))).assert_all("embed", &["embed"]);
    Block::new(&ps, vec![], Box::new(move |g, _| mm.time_embed(g, &TS))).assert_all("time_embed", &["t_embed"]);
}

pub fn transformer_branch() {
    let m = model(2, VeraVariant::Concat, image(), 3);
    let ps = random_params(&m, 2, &BLOCK);
    let mm = &m;
    Block::new(
        &ps,
        vec![tokens(2)],
        Box::new(move |g, v| mm.branch_forward(g, 0, v[0], &TS, Some(&CLASSES[..]))),
    )
    .assert_all("branch", &["branch0.", "t_embed", "class_embed"]);
    Block::new(&ps, vec![tokens(3)], Box::new(move |g, v| mm.branch_forward(g, 1, v[0], &TS, None)))
        .assert_all("branch (null class)", &["branch1.", "t_embed", "class_embed"]);
}

pub fn velocity_head_and_unpatchify() {
    let m = model(2, VeraVariant::Concat, image(), 3);
    let ps = random_params(&m, 3, &BLOCK);
    let mm = &m;
    Block::new(
        &ps,
        vec![tokens(4)],
        Box::new(move |g, v| mm.velocity_head(g, 1, v[0], &TS, Some(&CLASSES[..]))),
    )
    .assert_all("velocity head", &["branch1.head", "t_embed", "class_embed"]);
}

pub fn refiner_parts_concat() {
    let m = model(2, VeraVariant::Concat, image(), 0);
    let ps = random_params(&m, 4, &BLOCK);
    let vera = m.vera(0).unwrap();
    Block::new(&ps, vec![tokens(5)], Box::new(move |g, v| vera.acc_mlp(g, v[0]))).assert_all("acc mlp", &["vera0.acc_mlp"]);
    Block::new(&ps, vec![wide_tokens(6)], Box::new(move |g, v| vera.gap_adaln(g, v[0], &GAPS))).assert_all("gap adaln", &["vera0.gap_embed", "vera0.adaln"]);
    Block::new(&ps, vec![tokens(7), tokens(8)], Box::new(move |g, v| vera.modulate(g, v[0], v[1], &GAPS)))
        .assert_all("modulate concat", &["vera0.gap_embed", "vera0.adaln", "vera0.mlp"]);
    Block::new(
        &ps,
        vec![tokens(9), tokens(10)],
        Box::new(move |g, v| vera.cross_space_attention(g, v[0], v[1])),
    )
    .assert_all("cross attention", &["vera0.cross_attn"]);
    Block::new(
        &ps,
        vec![tokens(11), tokens(12)],
        Box::new(move |g, v| Ok(vera.forward(g, v[0], &GAPS, v[1])?.0)),
    )
    .assert_all("refiner", &["vera0."]);
}

pub fn refiner_parts_additive() {
    let m = model(2, VeraVariant::Additive, image(), 0);
    let ps = random_params(&m, 5, &BLOCK);
    let vera = m.vera(0).unwrap();
    Block::new(&ps, vec![tokens(13), tokens(14)], Box::new(move |g, v| vera.modulate(g, v[0], v[1], &GAPS)))
        .assert_all("modulate additive", &["vera0.gap_embed", "vera0.adaln"]);
    Block::new(
        &ps,
        vec![tokens(15), tokens(16)],
        Box::new(move |g, v| Ok(vera.forward(g, v[0], &GAPS, v[1])?.0)),
    )
    .assert_all("refiner additive", &["vera0."]);
}

pub fn check_objective(k: usize, variant: VeraVariant, geometry: DataGeometry, seed: u64) -> GradCheckReport {
    let m = model(k, variant, geometry, 4);
    let ps = random_params(&m, seed, &OBJECTIVE);
    let cfg = TrainConfig {
        alpha: 0.25,
        lambda: 0.7,
        ..TrainConfig::default()
    };
    let shape = geometry.batch_shape(BATCH);
    let mut r = RngStream::new(seed, 3);
    let x0 = r.normal::<f64>(&shape).scale(DATA_SCALE);
    let x1 = r.normal::<f64>(&shape).scale(DATA_SCALE);
    let sets: Vec<_> = TS
        .iter()
        .map(|&t| assign_branch_times(t, k, cfg.alpha, &mut r).unwrap())
        .collect();
    let draws = StepDraws {
        x1,
        times: branch_major(&sets, k, BATCH).unwrap(),
        classes: Some(vec![0, 4, 2, 3]),
    };
    let flat = Tensor::from_vec(&[ps.numel()], ps.flatten()).unwrap();
    let with = |x: &Tensor<f64>| {
        let mut p = ps.clone();
        p.assign_flat(x.data()).unwrap();
        p
    };
    let eval = |x: &Tensor<f64>| {
        let (b, g) = objective_with(&m, &with(x), &x0, &draws, &cfg).unwrap();
        let flat: Vec<f64> = g.into_iter().flat_map(Tensor::into_data).collect();
        (b.total, Tensor::from_vec(&[flat.len()], flat).unwrap())
    };
    grad_check_with(
        |x| objective_with(&m, &with(x), &x0, &draws, &cfg).unwrap().0.total,
        eval,
        &flat,
        OBJECTIVE.eps,
        TOL,
    )
    .unwrap()
}

pub fn full_objective_k2_concat() {
    let r = check_objective(2, VeraVariant::Concat, DataGeometry::Point { dim: 2 }, 21);
    assert!(r.passed, "{r:?}");
}

pub fn full_objective_k2_additive() {
    let r = check_objective(2, VeraVariant::Additive, DataGeometry::Point { dim: 2 }, 22);
    assert!(r.passed, "{r:?}");
}

pub fn full_objective_k3_concat() {
    let r = check_objective(3, VeraVariant::Concat, DataGeometry::Point { dim: 2 }, 23);
    assert!(r.passed, "{r:?}");
}

pub fn full_objective_k3_additive() {
    let r = check_objective(3, VeraVariant::Additive, DataGeometry::Point { dim: 2 }, 24);
    assert!(r.passed, "{r:?}");
}

pub fn full_objective_images() {
    let r = check_objective(2, VeraVariant::Concat, image(), 25);
    assert!(r.passed, "{r:?}");
}

/// Every check by name; each panics on failure.
#[allow(dead_code)]
pub const SUITE: &[(&str, fn())] = &[
    ("embedding_and_time_embedder", embedding_and_time_embedder),
    ("transformer_branch", transformer_branch),
    ("velocity_head_and_unpatchify", velocity_head_and_unpatchify),
    ("refiner_parts_concat", refiner_parts_concat),
    ("refiner_parts_additive", refiner_parts_additive),
    ("full_objective_k2_concat", full_objective_k2_concat),
    ("full_objective_k2_additive", full_objective_k2_additive),
    ("full_objective_k3_concat", full_objective_k3_concat),
    ("full_objective_k3_additive", full_objective_k3_additive),
    ("full_objective_images", full_objective_images),
];
