use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use deepflow::cli::{
    cmd_ablate, cmd_diagnose, cmd_eval, cmd_sample, cmd_train, worker_count, AblateArgs, Common, DiagnoseArgs,
    EvalArgs, SampleArgs, TrainArgs,
};
use deepflow::evaluation::DistanceNorm;
use deepflow::sampling::SamplerKind;
use deepflow::Error;

#[derive(Parser)]
#[command(name = "deepflow", version, about = "Deeply supervised flow matching on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `train.steps=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl From<CommonArgs> for Common {
    fn from(a: CommonArgs) -> Self {
        Common {
            config: a.config,
            overrides: a.set,
            seed: a.seed,
            out: a.out,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from a checkpoint.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint's EMA weights.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        #[arg(long)]
        kind: Option<SamplerKind>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(short = 'n', long = "num", default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long = "cfg-scale")]
        cfg_scale: Option<f64>,
        /// Also write a PNG.
        #[arg(long)]
        png: bool,
    },
    /// Score a checkpoint against fresh reference data.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        #[arg(short = 'n', long = "num", default_value_t = 2000)]
        n: usize,
        /// Comma-separated evaluation seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 128)]
        projections: usize,
    },
    /// Trace feature distances between two branches during sampling.
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Branch pair as `i,j` (1-based); defaults to `1,k`.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        pair: Option<Vec<usize>>,
        #[arg(short = 'n', long = "num", default_value_t = 256)]
        n: usize,
        #[arg(long, default_value = "frobenius", value_parser = parse_norm)]
        norm: DistanceNorm,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn parse_norm(s: &str) -> Result<DistanceNorm, String> {
    match s {
        "frobenius" => Ok(DistanceNorm::Frobenius),
        "per_token" | "per-token" => Ok(DistanceNorm::PerToken),
        other => Err(format!("unknown norm `{other}`")),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { common, resume } => {
            let s = cmd_train(&TrainArgs {
                common: common.into(),
                resume,
            })?;
            match s.final_total {
                Some(l) => println!("trained to step {} (loss {l:.5}), outputs in {}", s.steps, s.out_dir.display()),
                None => println!("trained to step {}, outputs in {}", s.steps, s.out_dir.display()),
            }
        }
        Command::Sample {
            common,
            ckpt,
            kind,
            steps,
            n,
            class,
            cfg_scale,
            png,
        } => {
            let path = cmd_sample(&SampleArgs {
                common: common.into(),
                ckpt,
                kind,
                steps,
                n,
                class,
                cfg_scale,
                png,
            })?;
            println!("wrote {}", path.display());
        }
        Command::Eval {
            common,
            ckpt,
            n,
            seeds,
            projections,
        } => {
            let path = cmd_eval(&EvalArgs {
                common: common.into(),
                ckpt,
                n,
                seeds,
                projections,
            })?;
            println!("wrote {}", path.display());
        }
        Command::Diagnose {
            common,
            ckpt,
            pair,
            n,
            norm,
        } => {
            let pair = match pair.as_deref() {
                None => None,
                Some(&[i, j]) => Some((i, j)),
                Some(_) => bail!("--pair takes two branch indices"),
            };
            let s = cmd_diagnose(&DiagnoseArgs {
                common: common.into(),
                ckpt,
                pair,
                n,
                norm,
            })?;
            match s.post_mean {
                Some(p) => println!("mean distance pre {:.5} post {p:.5} over {} steps", s.pre_mean, s.steps),
                None => println!("mean distance {:.5} over {} steps", s.pre_mean, s.steps),
            }
            println!("wrote {}", s.csv.display());
        }
        Command::Ablate { common } => {
            let path = cmd_ablate(&AblateArgs {
                common: common.into(),
                workers: worker_count(),
            })
            .context("ablation failed")?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_) | Error::Json(_))));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
