//! Command implementations behind the `deepflow` binary. Every command writes
//! a resolved configuration snapshot next to its outputs.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::ablation::{grid_csv, run_grid, GridConfig};
use crate::datasets::TINY_BARS_SIZE;
use crate::error::{Error, Result};
use crate::evaluation::{feature_distance_traces, metrics_csv, DistanceNorm, EvalProtocol};
use crate::foundation::RngStream;
use crate::io::plot::{image_grid_png, line_png, scatter_png};
use crate::io::{
    ensure_dir, load_json, load_run_config, points_csv, with_overrides, write_tensor_file, write_text, Checkpoint,
    RunConfig,
};
use crate::network::{DataGeometry, DeepFlowModel};
use crate::sampling::{sample, ModelField, SamplerKind};
use crate::training::{train_loop, Trainer, FINAL_CHECKPOINT, METRICS_FILE};

pub const SAMPLE_STREAM: u64 = 3;

/// Options shared by every command.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Config file (or defaults), then `--set` overrides, then `--seed`/`--out`.
pub fn resolve_run_config(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => load_run_config(p)?,
        None => RunConfig::default(),
    };
    let mut run = base.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    if let Some(out) = &common.out {
        run.out_dir = out.display().to_string();
    }
    run.validate()?;
    Ok(run)
}

fn snapshot<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_text(&dir.join(name), &text)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainArgs {
    pub common: Common,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub steps: u64,
    pub final_total: Option<f64>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let run = resolve_run_config(&args.common)?;
    let out = PathBuf::from(&run.out_dir);
    ensure_dir(&out)?;
    write_text(&out.join("config.json"), &run.to_json())?;
    let mut trainer = match &args.resume {
        None => Trainer::new(&run)?,
        Some(p) => Trainer::from_checkpoint(Checkpoint::load(p)?, &run)?,
    };
    let rows = train_loop(&mut trainer, Some(&out))?;
    Ok(TrainSummary {
        out_dir: out,
        steps: trainer.step,
        final_total: rows.last().map(|r| r.loss.total),
    })
}

/// Checkpoint plus its configuration with sampler overrides applied.
pub struct Loaded {
    pub run: RunConfig,
    pub model: DeepFlowModel,
    pub ckpt: Checkpoint,
}

pub fn load_checkpoint(path: &Path, common: &Common) -> Result<Loaded> {
    let ckpt = Checkpoint::load(path)?;
    let mut run = ckpt.run_config.clone();
    if let Some(p) = &common.config {
        run = load_run_config(p)?;
    }
    run = run.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    if run.model != ckpt.run_config.model {
        return Err(Error::Config("model settings cannot be changed for an existing checkpoint".into()));
    }
    run.validate()?;
    let model = DeepFlowModel::new(&run.model)?;
    model.check_params(&ckpt.ema)?;
    Ok(Loaded { run, model, ckpt })
}

fn out_dir(common: &Common, fallback: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SampleArgs {
    pub common: Common,
    pub ckpt: PathBuf,
    pub kind: Option<SamplerKind>,
    pub steps: Option<usize>,
    pub n: usize,
    pub class: Option<usize>,
    pub cfg_scale: Option<f64>,
    pub png: bool,
}

/// Class ids for `n` samples: the requested class, or classes in rotation
/// for a conditional model.
pub fn sample_classes(model: &DeepFlowModel, n: usize, class: Option<usize>) -> Result<Option<Vec<usize>>> {
    let c = model.config().num_classes;
    match (c, class) {
        (0, Some(_)) => Err(Error::InvalidArgument(
            "class conditioning requested on an unconditional model".into(),
        )),
        (0, None) => Ok(None),
        (c, Some(y)) if y >= c => Err(Error::InvalidArgument(format!("class {y} out of range for {c} classes"))),
        (_, Some(y)) => Ok(Some(vec![y; n])),
        (c, None) => Ok(Some((0..n).map(|i| i % c).collect())),
    }
}

pub fn cmd_sample(args: &SampleArgs) -> Result<PathBuf> {
    let Loaded { mut run, model, ckpt } = load_checkpoint(&args.ckpt, &args.common)?;
    if let Some(k) = args.kind {
        run.sampler.kind = k;
    }
    if let Some(s) = args.steps {
        run.sampler.steps = s;
    }
    if let Some(c) = args.cfg_scale {
        run.sampler.cfg_scale = c;
    }
    run.sampler.validate()?;
    let out = out_dir(&args.common, "samples");
    ensure_dir(&out)?;
    snapshot(&out, "command.json", args)?;
    write_text(&out.join("config.json"), &run.to_json())?;

    let classes = sample_classes(&model, args.n, args.class)?;
    let mut field = ModelField::new(&model, &ckpt.ema, run.sampler.cfg_scale);
    let stream = RngStream::new(run.seed, SAMPLE_STREAM);
    let samples = sample(&mut field, &run.sampler, args.n, classes.as_deref(), &stream)?.samples;
    match model.config().geometry {
        DataGeometry::Point { .. } => {
            let path = out.join("samples.csv");
            write_text(&path, &points_csv(&samples, classes.as_deref())?)?;
            if args.png && samples.last_dim() == 2 {
                let pts: Vec<[f64; 2]> = (0..samples.rows()).map(|i| [samples.row(i)[0], samples.row(i)[1]]).collect();
                scatter_png(&out.join("samples.png"), &pts, classes.as_deref(), 4.5)?;
            }
            Ok(path)
        }
        DataGeometry::Image { height, width, .. } => {
            let path = out.join("samples.bin");
            write_tensor_file(&path, &samples)?;
            if args.png && height == width {
                let data: Vec<f32> = samples.cast::<f32>().into_data();
                let side = if height == TINY_BARS_SIZE { TINY_BARS_SIZE } else { height };
                image_grid_png(&out.join("samples.png"), &data, side, 8)?;
            }
            Ok(path)
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EvalArgs {
    pub common: Common,
    pub ckpt: PathBuf,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub projections: usize,
}

/// One metric row per seed, then the reference-vs-reference floor.
pub fn cmd_eval(args: &EvalArgs) -> Result<PathBuf> {
    let Loaded { run, model, ckpt } = load_checkpoint(&args.ckpt, &args.common)?;
    if args.seeds.is_empty() {
        return Err(Error::Config("eval needs at least one seed".into()));
    }
    let out = out_dir(&args.common, "eval");
    ensure_dir(&out)?;
    snapshot(&out, "command.json", args)?;
    write_text(&out.join("config.json"), &run.to_json())?;
    let run_id = args.ckpt.display().to_string().replace(',', "_");
    let mut reports = Vec::new();
    for &seed in &args.seeds {
        let protocol = EvalProtocol {
            n: args.n,
            n_projections: args.projections,
            seed,
        };
        reports.push(crate::evaluation::evaluate_run(
            &run_id,
            &model,
            &ckpt.ema,
            &run.sampler,
            &run.data,
            &protocol,
        )?);
    }
    let floor = EvalProtocol {
        n: args.n,
        n_projections: args.projections,
        seed: args.seeds[0],
    }
    .floor(&run.data)?;
    reports.push(floor);
    let path = out.join("eval.csv");
    write_text(&path, &metrics_csv(&reports))?;
    Ok(path)
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnoseArgs {
    pub common: Common,
    pub ckpt: PathBuf,
    pub pair: Option<(usize, usize)>,
    pub n: usize,
    pub norm: DistanceNorm,
}

#[derive(Clone, Debug)]
pub struct DiagnoseSummary {
    pub csv: PathBuf,
    pub pre_mean: f64,
    pub post_mean: Option<f64>,
    pub steps: usize,
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<DiagnoseSummary> {
    let Loaded { run, model, ckpt } = load_checkpoint(&args.ckpt, &args.common)?;
    let k = model.config().k;
    if k < 2 {
        return Err(Error::InvalidArgument("diagnose requires k ≥ 2".into()));
    }
    let pair = args.pair.unwrap_or((1, k));
    let out = out_dir(&args.common, "diagnose");
    ensure_dir(&out)?;
    snapshot(&out, "command.json", args)?;
    write_text(&out.join("config.json"), &run.to_json())?;
    let classes = sample_classes(&model, args.n, None)?;
    let stream = RngStream::new(run.seed, SAMPLE_STREAM);
    let (pre, post) = feature_distance_traces(
        &model,
        &ckpt.ema,
        &run.sampler,
        args.n,
        classes.as_deref(),
        pair,
        args.norm,
        &stream,
    )?;
    let mut csv = String::from("step,t,pre,post\n");
    for (j, (t, d)) in pre.per_timestep.iter().enumerate() {
        let p = post.as_ref().map_or(String::new(), |p| p.per_timestep[j].1.to_string());
        csv.push_str(&format!("{j},{t},{d},{p}\n"));
    }
    let path = out.join("feature_distance.csv");
    write_text(&path, &csv)?;
    let mut series = vec![pre.per_timestep.clone()];
    if let Some(p) = &post {
        series.push(p.per_timestep.clone());
    }
    line_png(&out.join("feature_distance.png"), &series)?;
    Ok(DiagnoseSummary {
        csv: path,
        pre_mean: pre.overall_mean,
        post_mean: post.map(|p| p.overall_mean),
        steps: pre.per_timestep.len(),
    })
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AblateArgs {
    pub common: Common,
    pub workers: usize,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<PathBuf> {
    let grid: GridConfig = match &args.common.config {
        Some(p) => load_json(p)?,
        None => GridConfig::default(),
    };
    let mut grid = with_overrides(&grid, &args.common.overrides)?;
    if let Some(seed) = args.common.seed {
        grid.base.seed = seed;
    }
    let out = out_dir(&args.common, &grid.base.out_dir);
    ensure_dir(&out)?;
    snapshot(&out, "grid.json", &grid)?;
    let results = run_grid(&grid, Some(&out), args.workers)?;
    let path = out.join("grid.csv");
    write_text(&path, &grid_csv(&results))?;
    Ok(path)
}

/// Worker cap from `DEEPFLOW_THREADS`, default 1.
pub fn worker_count() -> usize {
    std::env::var("DEEPFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

pub use crate::training::checkpoint_name;

/// Files a finished training run leaves in its output directory.
pub fn train_outputs(dir: &Path) -> [PathBuf; 3] {
    [dir.join(METRICS_FILE), dir.join(FINAL_CHECKPOINT), dir.join("config.json")]
}
