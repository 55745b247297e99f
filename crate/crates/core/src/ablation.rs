//! Ablation grids: cartesian products of configuration axes, trained and
//! evaluated cell by cell with shared data and evaluation seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, EvalProtocol, MetricReport, DEFAULT_PROJECTIONS};
use crate::interpolant::TimeSamplingScheme;
use crate::io::{ensure_dir, write_text, RunConfig};
use crate::network::{ModelConfig, VeraVariant};
use crate::training::{train_loop, MetricsRow, Trainer};

/// Rungs of the component ladder, each adding one ingredient to the last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    /// Single branch, plain flow matching.
    #[serde(rename = "baseline")]
    Baseline,
    /// Two branches with per-branch supervision, shared time, no refiner.
    #[serde(rename = "+deep-sup", alias = "deep_sup")]
    DeepSup,
    /// Per-branch times with gaps up to alpha.
    #[serde(rename = "+time-gap", alias = "time_gap")]
    TimeGap,
    /// Refiner with acceleration loss, no cross attention.
    #[serde(rename = "+acc", alias = "acc")]
    Acc,
    /// Full refiner with cross-space attention.
    #[serde(rename = "+cross-attn", alias = "cross_attn")]
    CrossAttn,
}

impl Component {
    pub const LADDER: [Component; 5] = [
        Component::Baseline,
        Component::DeepSup,
        Component::TimeGap,
        Component::Acc,
        Component::CrossAttn,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Component::Baseline => "baseline",
            Component::DeepSup => "+deep-sup",
            Component::TimeGap => "+time-gap",
            Component::Acc => "+acc",
            Component::CrossAttn => "+cross-attn",
        }
    }

    /// Apply this rung to `base`, which describes the full model. Total depth
    /// is `base.model.k · depth_per_branch` throughout.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut run = base.clone();
        let k = base.model.k.max(2);
        let total_depth = base.model.k * base.model.depth_per_branch;
        let m = &mut run.model;
        match self {
            Component::Baseline => {
                m.k = 1;
                m.depth_per_branch = total_depth;
                m.vera_variant = VeraVariant::None;
                run.train.betas = vec![1.0];
            }
            Component::DeepSup | Component::TimeGap => {
                m.k = k;
                m.depth_per_branch = total_depth / k;
                m.vera_variant = VeraVariant::None;
                run.train.betas = Vec::new();
                if self == Component::DeepSup {
                    run.train.alpha = 0.0;
                }
            }
            Component::Acc | Component::CrossAttn => {
                m.k = k;
                m.depth_per_branch = total_depth / k;
                if m.vera_variant == VeraVariant::None {
                    m.vera_variant = VeraVariant::Concat;
                }
                m.cross_attention = self == Component::CrossAttn;
                run.train.betas = Vec::new();
            }
        }
        run
    }
}

/// `mlp_ratio` whose parameter count is closest to `target`, keeping every
/// other field of `cfg`.
pub fn matched_mlp_ratio(cfg: &ModelConfig, target: usize) -> f64 {
    let d = cfg.hidden as f64;
    let at = |h: usize| {
        ModelConfig {
            mlp_ratio: h as f64 / d,
            ..cfg.clone()
        }
        .param_count() as f64
    };
    let (c1, c2) = (at(cfg.hidden), at(2 * cfg.hidden));
    let slope = (c2 - c1) / d;
    let h = (cfg.hidden as f64 + (target as f64 - c1) / slope).round().max(1.0);
    h / d
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub n: usize,
    pub n_projections: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n: 2000,
            n_projections: DEFAULT_PROJECTIONS,
        }
    }
}

/// Grid description: every non-empty axis is crossed with the others.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub base: RunConfig,
    pub components: Vec<Component>,
    pub alpha: Vec<f64>,
    pub lambda: Vec<f64>,
    pub betas: Vec<Vec<f64>>,
    pub vera_variant: Vec<VeraVariant>,
    pub accmlp_multipliers: Vec<Vec<f64>>,
    pub k: Vec<usize>,
    pub time_scheme: Vec<TimeSamplingScheme>,
    /// Model seeds; empty means the base seed.
    pub seeds: Vec<u64>,
    /// Match every cell's parameter count to the full base model by scaling
    /// the transformer MLP width.
    pub match_params: bool,
    pub eval: EvalSettings,
}

/// One configured grid cell.
#[derive(Clone, Debug)]
pub struct Cell {
    pub index: usize,
    pub label: String,
    pub seed: u64,
    pub run: RunConfig,
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

impl GridConfig {
    pub fn cells(&self) -> Result<Vec<Cell>> {
        type Edit = Box<dyn Fn(&mut RunConfig)>;
        let mut axes: Vec<Vec<(String, Edit)>> = Vec::new();
        if !self.components.is_empty() {
            axes.push(
                self.components
                    .iter()
                    .map(|&c| (format!("components={}", c.label()), Box::new(move |r: &mut RunConfig| *r = c.apply(r)) as Edit))
                    .collect(),
            );
        }
        macro_rules! axis {
            ($field:ident, $name:literal, $fmt:expr, $apply:expr) => {
                if !self.$field.is_empty() {
                    axes.push(
                        self.$field
                            .iter()
                            .cloned()
                            .map(|v| {
                                let label = format!("{}={}", $name, $fmt(&v));
                                let f: Edit = Box::new(move |r: &mut RunConfig| $apply(r, v.clone()));
                                (label, f)
                            })
                            .collect(),
                    );
                }
            };
        }
        axis!(alpha, "alpha", |v: &f64| v.to_string(), |r: &mut RunConfig, v| r.train.alpha = v);
        axis!(lambda, "lambda", |v: &f64| v.to_string(), |r: &mut RunConfig, v| r.train.lambda = v);
        axis!(betas, "betas", |v: &Vec<f64>| fmt_list(v), |r: &mut RunConfig, v| r.train.betas = v);
        axis!(vera_variant, "vera_variant", |v: &VeraVariant| format!("{v:?}").to_lowercase(), |r: &mut RunConfig, v| r
            .model
            .vera_variant = v);
        axis!(accmlp_multipliers, "accmlp_multipliers", |v: &Vec<f64>| fmt_list(v), |r: &mut RunConfig, v| r
            .model
            .accmlp_multipliers = v);
        axis!(k, "k", |v: &usize| v.to_string(), |r: &mut RunConfig, v| r.model.k = v);
        axis!(time_scheme, "time_scheme", |v: &TimeSamplingScheme| format!("{v:?}").to_lowercase(), |r: &mut RunConfig, v| r
            .train
            .time_scheme = v);
        if axes.is_empty() {
            return Err(Error::Config("empty grid: no axis lists any values".into()));
        }

        let seeds = if self.seeds.is_empty() {
            vec![self.base.seed]
        } else {
            self.seeds.clone()
        };
        let target = self.base.model.param_count();
        let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
        for axis in &axes {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    (0..axis.len()).map(move |i| {
                        let mut c = c.clone();
                        c.push(i);
                        c
                    })
                })
                .collect();
        }
        let mut cells = Vec::new();
        for (index, combo) in combos.iter().enumerate() {
            let mut run = self.base.clone();
            let mut labels = Vec::new();
            for (axis, &i) in axes.iter().zip(combo) {
                labels.push(axis[i].0.clone());
                (axis[i].1)(&mut run);
            }
            if run.train.betas.len() > run.model.k {
                run.train.betas.clear();
            }
            if self.match_params {
                run.model.mlp_ratio = self.base.model.mlp_ratio;
                if run.model.param_count() != target {
                    run.model.mlp_ratio = matched_mlp_ratio(&run.model, target);
                }
            }
            run.validate()
                .map_err(|e| Error::Config(format!("grid cell {} ({}): {e}", index, labels.join(" "))))?;
            for &seed in &seeds {
                let mut r = run.clone();
                r.seed = seed;
                cells.push(Cell {
                    index,
                    label: labels.join(" "),
                    seed,
                    run: r,
                });
            }
        }
        Ok(cells)
    }
}

/// Outcome of training and evaluating one cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub params: usize,
    pub final_loss: f64,
    pub report: MetricReport,
    pub metrics: Vec<MetricsRow>,
    pub trainer: Trainer,
}

/// Train a run to completion, then evaluate its EMA weights.
pub fn train_and_evaluate(run: &RunConfig, run_id: &str, eval: &EvalSettings, out_dir: Option<&Path>) -> Result<(Trainer, Vec<MetricsRow>, MetricReport)> {
    let mut trainer = Trainer::new(run)?;
    let metrics = train_loop(&mut trainer, out_dir)?;
    let protocol = EvalProtocol {
        n: eval.n,
        n_projections: eval.n_projections,
        seed: run.seed,
    };
    let report = evaluate_run(run_id, &trainer.model, &trainer.ema, &run.sampler, &run.data, &protocol)?;
    Ok((trainer, metrics, report))
}

pub fn run_cell(cell: &Cell, eval: &EvalSettings, out_dir: Option<&Path>) -> Result<CellResult> {
    let dir: Option<PathBuf> = out_dir.map(|d| d.join(format!("cell{:03}_seed{}", cell.index, cell.seed)));
    if let Some(d) = &dir {
        ensure_dir(d)?;
        write_text(&d.join("config.json"), &cell.run.to_json())?;
    }
    let run_id = format!("cell{}:{}", cell.index, cell.label);
    let (trainer, metrics, report) = train_and_evaluate(&cell.run, &run_id, eval, dir.as_deref())?;
    Ok(CellResult {
        params: trainer.model.num_params(),
        final_loss: metrics.last().map_or(f64::NAN, |r| r.loss.total),
        cell: cell.clone(),
        report,
        metrics,
        trainer,
    })
}

/// Run every cell, at most `workers` at a time; results come back in cell order.
pub fn run_grid(grid: &GridConfig, out_dir: Option<&Path>, workers: usize) -> Result<Vec<CellResult>> {
    let cells = grid.cells()?;
    let workers = workers.clamp(1, cells.len());
    let mut results: Vec<Option<Result<CellResult>>> = (0..cells.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, cell) in results.iter_mut().zip(&cells) {
            *slot = Some(run_cell(cell, &grid.eval, out_dir));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let done = std::sync::Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= cells.len() {
                        break;
                    }
                    let r = run_cell(&cells[i], &grid.eval, out_dir);
                    done.lock().expect("no worker panicked")[i] = Some(r);
                });
            }
        });
    }
    results.into_iter().map(|r| r.expect("every cell ran")).collect()
}

pub const GRID_HEADER: &str =
    "cell,label,seed,params,final_loss,sliced_w2,mean_err,cov_err,feat_dist_pre,feat_dist_post";

pub fn grid_csv(results: &[CellResult]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut s = String::from(GRID_HEADER);
    s.push('\n');
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.cell.index,
            r.cell.label,
            r.cell.seed,
            r.params,
            r.final_loss,
            r.report.sliced_w2,
            r.report.mean_err,
            r.report.cov_err,
            opt(r.report.feat_dist_pre),
            opt(r.report.feat_dist_post)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_grid_is_rejected() {
        assert!(GridConfig::default().cells().is_err());
    }

    #[test]
    fn alpha_grid_has_three_cells() {
        let g = GridConfig {
            alpha: vec![0.005, 0.01, 0.02],
            ..GridConfig::default()
        };
        let cells = g.cells().unwrap();
        assert_eq!(cells.len(), 3);
        assert_eq!(cells[2].run.train.alpha, 0.02);
    }

    #[test]
    fn ladder_matches_depth_and_parameters() {
        let g = GridConfig {
            components: Component::LADDER.to_vec(),
            match_params: true,
            ..GridConfig::default()
        };
        let cells = g.cells().unwrap();
        assert_eq!(cells.len(), 5);
        let full = g.base.model.param_count() as f64;
        for c in &cells {
            let m = &c.run.model;
            assert_eq!(m.k * m.depth_per_branch, 4, "{}", c.label);
            let p = m.param_count() as f64;
            assert!((p - full).abs() / full < 0.1, "{}: {p} vs {full}", c.label);
        }
        assert_eq!(cells[0].run.model.k, 1);
        assert_eq!(cells[1].run.train.alpha, 0.0);
        assert_eq!(cells[2].run.model.vera_variant, VeraVariant::None);
        assert!(!cells[3].run.model.cross_attention);
        assert!(cells[4].run.model.cross_attention);
    }

    #[test]
    fn components_parse_from_labels() {
        let c: Vec<Component> = serde_json::from_str(r#"["baseline", "+deep-sup", "+time-gap", "+acc", "+cross-attn"]"#).unwrap();
        assert_eq!(c, Component::LADDER.to_vec());
    }
}
