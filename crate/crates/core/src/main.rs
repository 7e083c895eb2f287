use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use orthcaps::checkpoint;
use orthcaps::error::{Error, Result};
use orthcaps::gradcheck;
use orthcaps::model::Model;
use orthcaps::train::{
    analysis::{available_tags, sweep_csv},
    bench::bench_csv,
    bench_routing, evaluate, histogram_similarity, load_data, sweep_theta, train, BenchShape, RunConfig,
};

#[derive(Parser)]
#[command(name = "orthcaps", version, about = "Orthogonal capsule network trainer and analysis tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value file with model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the dataset files.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes report.csv, params.csv and model.ckpt.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Time attention, simplified and dynamic routing; writes bench.csv.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Shapes as BxNxD, comma separated.
        #[arg(long, default_value = "128x16x16")]
        shapes: String,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
    /// Capsule-similarity histograms; writes hist_<tag>.csv.
    Hist {
        #[command(flatten)]
        common: Common,
        /// Model to analyse; a fresh model from the config when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated layer tags (pcl, pruned, c<k>, block<k>).
        #[arg(long, default_value = "pcl,pruned")]
        tags: String,
    },
    /// One short run per threshold; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "0.3,0.5,0.7,0.9,1.0")]
        thetas: String,
    },
    /// Finite-difference checks of every differentiable component.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<&Path> {
    fs::create_dir_all(&c.out)?;
    Ok(&c.out)
}

fn parse_csv<V: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<V>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Error::Config(format!("bad {what} '{p}'"))))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let (tr, te) = load_data(&cfg.train, c.data_root.as_deref())?;
            let out = train::<f64>(&cfg, &tr, &te, Some(out_dir(&c)?))?;
            let last = out.report.rows.last();
            println!(
                "trained {} epochs: best test accuracy {:.4}, retained capsules {}, params {} (unpruned {})",
                out.report.rows.len(),
                out.report.best_test_acc,
                last.map_or(0, |r| r.retained),
                last.map_or(0, |r| r.params),
                out.report.params_full
            );
        }
        Command::Eval { common, checkpoint } => {
            let mut cfg = load_config(&common)?;
            let model: Model<f64> = checkpoint::load(&checkpoint)?;
            cfg.model = model.cfg.clone();
            let (_, te) = load_data(&cfg.train, common.data_root.as_deref())?;
            let acc = evaluate(&model, &te, cfg.train.eval_batch)?;
            println!("accuracy {acc:.4} on {} samples, retained capsules {}", te.len(), model.ema.retained());
        }
        Command::Bench { common, shapes, repeats, warmup } => {
            let cfg = load_config(&common)?;
            let shapes = shapes
                .split(',')
                .map(|s| {
                    let v: Vec<usize> = parse_csv(&s.replace('x', ","), "shape")?;
                    match v[..] {
                        [batch, n, d] => Ok(BenchShape { batch, n, d }),
                        _ => Err(Error::Config(format!("shape '{s}' must be BxNxD"))),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let rows = bench_routing(&shapes, repeats, warmup, cfg.model.alpha, cfg.train.seed)?;
            let csv = bench_csv(&rows);
            fs::write(out_dir(&common)?.join("bench.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Hist { common, checkpoint, tags } => {
            let mut cfg = load_config(&common)?;
            let model: Model<f64> = match &checkpoint {
                Some(p) => checkpoint::load(p)?,
                None => Model::new(cfg.model.clone(), cfg.train.seed)?,
            };
            cfg.model = model.cfg.clone();
            let tags: Vec<String> = if tags == "all" { available_tags(&model) } else { parse_csv(&tags, "tag")? };
            let (_, te) = load_data(&cfg.train, common.data_root.as_deref())?;
            let hists = histogram_similarity(&model, &te, &tags, cfg.train.eval_batch)?;
            let dir = out_dir(&common)?;
            for (tag, h) in &hists {
                fs::write(dir.join(format!("hist_{tag}.csv")), h.to_csv())?;
                println!("{tag}: {} pairs, {:.4} above 0.65", h.total(), h.fraction_above(0.65));
            }
        }
        Command::Sweep { common, thetas } => {
            let cfg = load_config(&common)?;
            let thetas: Vec<f64> = parse_csv(&thetas, "threshold")?;
            let (tr, te) = load_data(&cfg.train, common.data_root.as_deref())?;
            let rows = sweep_theta::<f64>(&thetas, &cfg, &tr, &te)?;
            let csv = sweep_csv(&rows);
            fs::write(out_dir(&common)?.join("sweep.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Gradcheck { common } => {
            let cfg = load_config(&common)?;
            let results = gradcheck::run_all(cfg.train.seed)?;
            let mut ok = true;
            for r in &results {
                println!("{:<20} rel err {:.3e} (tol {:.0e}) {}", r.name, r.error, r.tolerance, if r.passed() { "ok" } else { "FAIL" });
                ok &= r.passed();
            }
            if !ok {
                return Err(Error::Numeric { msg: "gradient check failed".into(), residual: results.iter().map(|r| r.error).fold(0.0, f64::max) });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Contract(_) => 2,
                Error::Format(_) | Error::Length { .. } => 3,
                _ => 1,
            })
        }
    }
}
