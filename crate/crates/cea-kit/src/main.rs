use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cea_kit::harness::ablate::{cmd_ablate, render_table as render_ablation, AblationAxis};
use cea_kit::harness::bench::{cmd_bench, default_grid, render_table, BENCH_RUNS, BENCH_WARMUPS};
use cea_kit::harness::boot::{cmd_bootstrap, render_report as render_bootstrap};
use cea_kit::harness::props::{cmd_props, render_report as render_props, InjectedFault};
use cea_kit::harness::{cmd_eval, cmd_train, RunConfig};
use cea_kit::CeaError;

#[derive(Parser)]
#[command(name = "cea-kit", version, about = "Instance-conditioned low-rank residual assembly: data generation, training, evaluation, and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    FactorRouting,
    Generator,
    Rank,
    Targets,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    SkipRankNorm,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a paired clean/degraded dataset.
    Generate {
        /// Dataset config JSON; defaults cover the 11-category mix.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Override dataset config fields, e.g. --set image_size=16.
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Train a restorer and write run artifacts.
    Train {
        /// Run config JSON; defaults to the built-in desk-scale config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override config fields with dotted paths, e.g. --set optim.lr=1e-3.
        #[arg(long = "set")]
        sets: Vec<String>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the machine-checkable property suites.
    Props {
        /// Deliberately break an invariant to demonstrate suite sensitivity.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Microbenchmark low-rank vs materialized dense assembly.
    Bench {
        #[arg(long, default_value_t = BENCH_WARMUPS)]
        warmups: usize,
        #[arg(long, default_value_t = BENCH_RUNS)]
        runs: usize,
        /// Extra grid point as N,d,r (repeatable); defaults used when absent.
        #[arg(long = "point")]
        points: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a matched variant grid along one axis and compare.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated seed list, e.g. --seeds 1,2,3.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        /// Ranks for --axis rank, e.g. --ranks 4,8,16.
        #[arg(long, default_value = "4,8,16")]
        ranks: String,
        /// Target sets for --axis targets, each a JSON list (repeatable).
        #[arg(long = "targets")]
        targets: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Paired-bootstrap comparison of two per-image metric CSVs.
    Bootstrap {
        csv_a: PathBuf,
        csv_b: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        resamples: usize,
        #[arg(long, default_value_t = 0.95)]
        ci: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_run_config(
    config: &Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    sets: &[String],
    threads: Option<usize>,
) -> Result<RunConfig, CeaError> {
    let base = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.apply_overrides(sets)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CeaError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| CeaError::Config(format!("bad {what} entry {p:?}")))
        })
        .collect()
}

fn write_json<T: serde::Serialize>(out: &Option<PathBuf>, value: &T) -> Result<(), CeaError> {
    if let Some(p) = out {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(p, serde_json::to_string_pretty(value)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8, CeaError> {
    match cli.command {
        Command::Generate {
            config,
            seed,
            out,
            sets,
        } => {
            let mut value = match &config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => serde_json::to_value(cea_kit::degrade::DatasetConfig::default())?,
            };
            for s in &sets {
                let (k, raw) = s
                    .split_once('=')
                    .ok_or_else(|| CeaError::Config(format!("override {s:?} is not key=value")))?;
                let obj = value.as_object_mut().unwrap();
                if !obj.contains_key(k) {
                    return Err(CeaError::Config(format!("unknown dataset field {k:?}")));
                }
                let v = serde_json::from_str(raw)
                    .unwrap_or(serde_json::Value::String(raw.to_string()));
                obj.insert(k.to_string(), v);
            }
            let cfg: cea_kit::degrade::DatasetConfig = serde_json::from_value(value)?;
            let manifest = cea_kit::degrade::generate_dataset(&cfg, seed, &out)?;
            println!(
                "wrote {} items to {} (hash {})",
                manifest.items.len(),
                out.display(),
                cea_kit::degrade::hash_dir(&out)?
            );
            Ok(0)
        }
        Command::Train {
            config,
            seed,
            out,
            sets,
            threads,
        } => {
            let cfg = load_run_config(&config, seed, out, &sets, threads)?;
            let art = cmd_train(&cfg)?;
            println!(
                "trained {} steps: loss {:.6} -> {:.6}, test PSNR {:.3} dB, SSIM {:.4}\nartifacts in {}",
                art.steps_run,
                art.initial_loss,
                art.final_loss,
                art.test_mean_psnr,
                art.test_mean_ssim,
                art.out_dir.display()
            );
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            out,
        } => {
            let s = cmd_eval(&checkpoint, &dataset, &split, &out)?;
            println!(
                "{split}: Single {:.3} / Double {:.3} / Triple {:.3} / Avg {:.3} dB (SSIM avg {:.4})",
                s.single_psnr, s.double_psnr, s.triple_psnr, s.avg_psnr, s.avg_ssim
            );
            Ok(0)
        }
        Command::Props { inject_fault, out } => {
            let fault = match inject_fault {
                Some(FaultArg::SkipRankNorm) => InjectedFault::SkipRankNorm,
                None => InjectedFault::None,
            };
            let report = cmd_props(fault)?;
            print!("{}", render_props(&report));
            write_json(&out, &report)?;
            Ok(if report.all_passed { 0 } else { 1 })
        }
        Command::Bench {
            warmups,
            runs,
            points,
            out,
        } => {
            let grid = if points.is_empty() {
                default_grid()
            } else {
                points
                    .iter()
                    .map(|p| {
                        let v: Vec<usize> = parse_list(p, "grid point")?;
                        if v.len() != 3 {
                            return Err(CeaError::Config(format!(
                                "grid point {p:?} must be N,d,r"
                            )));
                        }
                        Ok((v[0], v[1], v[2]))
                    })
                    .collect::<Result<Vec<_>, _>>()?
            };
            let report = cmd_bench(&grid, warmups, runs)?;
            print!("{}", render_table(&report));
            write_json(&out, &report)?;
            Ok(0)
        }
        Command::Ablate {
            config,
            axis,
            seeds,
            ranks,
            targets,
            out,
            sets,
            threads,
        } => {
            let cfg = load_run_config(&config, None, out, &sets, threads)?;
            let axis = match axis {
                AxisArg::FactorRouting => AblationAxis::FactorRouting,
                AxisArg::Generator => AblationAxis::Generator,
                AxisArg::Rank => AblationAxis::Rank(parse_list(&ranks, "rank")?),
                AxisArg::Targets => {
                    if targets.is_empty() {
                        AblationAxis::Targets(vec![
                            r#"["Q","K"]"#.into(),
                            r#"["Q"]"#.into(),
                            r#"["V"]"#.into(),
                            r#"["FfnIn"]"#.into(),
                        ])
                    } else {
                        AblationAxis::Targets(targets)
                    }
                }
            };
            let seed_list: Vec<u64> = parse_list(&seeds, "seed")?;
            let report = cmd_ablate(&cfg, &axis, &seed_list)?;
            print!("{}", render_ablation(&report));
            std::fs::create_dir_all(&cfg.out_dir)?;
            std::fs::write(
                cfg.out_dir.join("ablation.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            Ok(0)
        }
        Command::Bootstrap {
            csv_a,
            csv_b,
            resamples,
            ci,
            seed,
            out,
        } => {
            let report = cmd_bootstrap(&csv_a, &csv_b, resamples, ci, seed)?;
            print!("{}", render_bootstrap(&report));
            write_json(&out, &report)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
