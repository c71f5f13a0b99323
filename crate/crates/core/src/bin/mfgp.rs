//! Batch CLI: design sampling, benchmark datasets, input-space reduction,
//! pipeline training, prediction, sweep studies, and cross-validation.
//! Exit codes: 0 success, 2 configuration or validation error, 3 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;

use mfgp_core::benchmarks::Benchmark;
use mfgp_core::data::{read_inputs_csv, write_inputs_csv, Dataset};
use mfgp_core::error::{Error, Result};
use mfgp_core::gp::NoisePolicy;
use mfgp_core::harness::{cross_validate, run_study, StudyConfig};
use mfgp_core::pipeline::{self, PipelineConfig, PipelineModel};
use mfgp_core::reducer::{LevelSetConfig, RankChoice, ReducedSurface, ReducerKind, SurfaceConfig};
use mfgp_core::sampling::{design, DesignKind};
use mfgp_core::Bounds;

#[derive(Parser)]
#[command(name = "mfgp", version, about = "Multi-fidelity surrogate toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Emit a design CSV on a benchmark box or the unit cube.
    Sample {
        #[arg(long, default_value = "lhs")]
        kind: DesignKind,
        #[arg(long)]
        n: usize,
        /// Unit-cube dimension; mutually exclusive with --benchmark.
        #[arg(long)]
        dim: Option<usize>,
        /// Sample inside this benchmark's box instead of the unit cube.
        #[arg(long)]
        benchmark: Option<Benchmark>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a benchmark on a sampled design and write the dataset CSV.
    Bench {
        #[arg(long)]
        benchmark: Benchmark,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "lhs")]
        kind: DesignKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Drop the analytic gradient columns.
        #[arg(long)]
        no_gradients: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit an input-space reduction plus response surface on a dataset CSV;
    /// writes the surface JSON and a summary-plot CSV (reduced coordinates
    /// against the output).
    Reduce {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "linear")]
        reducer: ReducerKind,
        /// Reduced dimension, or "auto" for the spectral-gap choice.
        #[arg(long, default_value = "1")]
        rank: String,
        #[arg(long, default_value_t = 10)]
        restarts: usize,
        #[arg(long, default_value_t = 20000)]
        epochs: usize,
        #[arg(long, default_value_t = 10)]
        layers: usize,
        #[arg(long, default_value_t = 0.03)]
        learning_rate: f64,
        /// Optimize a noise variance instead of pinning it to zero.
        #[arg(long)]
        free_noise: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Summary CSV path; defaults to the model path with a .summary.csv
        /// extension.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Train the two-level pipeline on a high-fidelity dataset CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "linear")]
        reducer: ReducerKind,
        #[arg(long, default_value = "1")]
        rank: String,
        #[arg(long, default_value_t = 0)]
        n_lf_extra: usize,
        #[arg(long, default_value = "lhs")]
        extra_design: DesignKind,
        #[arg(long, default_value_t = 10)]
        surface_restarts: usize,
        #[arg(long, default_value_t = 20)]
        mf_restarts: usize,
        /// Synthetic points are sampled in this benchmark's box instead of
        /// the data hull.
        #[arg(long)]
        benchmark: Option<Benchmark>,
        #[arg(long)]
        free_noise: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict with a trained pipeline model on an inputs CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, default_value_t = 200)]
        particles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a sweep study described by a StudyConfig JSON file.
    Study {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override the sampled test-set size (e.g. the full 10000).
        #[arg(long)]
        test_size: Option<usize>,
    },
    /// Cross-validate the study's models with leave-k-out batches.
    Cv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        test_size: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_rank(s: &str) -> Result<RankChoice> {
    if s == "auto" {
        return Ok(RankChoice::SpectralGap);
    }
    s.parse::<usize>()
        .map(RankChoice::Fixed)
        .map_err(|_| Error::Config(format!("rank must be a positive integer or \"auto\", got {s:?}")))
}

fn noise_policy(free: bool) -> NoisePolicy {
    if free {
        NoisePolicy::Free
    } else {
        NoisePolicy::FixedZero
    }
}

fn load_study_config(
    path: &Path,
    out_dir: Option<PathBuf>,
    test_size: Option<usize>,
) -> Result<StudyConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg: StudyConfig = serde_json::from_str(&text)?;
    if let Some(dir) = out_dir {
        cfg.output_dir = Some(dir);
    }
    if let Some(size) = test_size {
        cfg.test.size = size;
    }
    Ok(cfg)
}

fn write_summary_csv(path: &Path, reduced: &DMatrix<f64>, outputs: &[f64]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::CsvFormat(e.to_string()))?;
    let r = reduced.ncols();
    let mut header: Vec<String> = (1..=r).map(|j| format!("z{j}")).collect();
    header.push("y".into());
    w.write_record(&header)
        .map_err(|e| Error::CsvFormat(e.to_string()))?;
    for i in 0..reduced.nrows() {
        let mut rec: Vec<String> = (0..r).map(|j| reduced[(i, j)].to_string()).collect();
        rec.push(outputs[i].to_string());
        w.write_record(&rec)
            .map_err(|e| Error::CsvFormat(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_prediction_csv(
    path: &Path,
    inputs: &DMatrix<f64>,
    mean: &[f64],
    variance: &[f64],
) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::CsvFormat(e.to_string()))?;
    let m = inputs.ncols();
    let mut header: Vec<String> = (1..=m).map(|j| format!("x{j}")).collect();
    header.push("mean".into());
    header.push("variance".into());
    w.write_record(&header)
        .map_err(|e| Error::CsvFormat(e.to_string()))?;
    for i in 0..inputs.nrows() {
        let mut rec: Vec<String> = (0..m).map(|j| inputs[(i, j)].to_string()).collect();
        rec.push(mean[i].to_string());
        rec.push(variance[i].to_string());
        w.write_record(&rec)
            .map_err(|e| Error::CsvFormat(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn print_study(result: &mfgp_core::harness::StudyResult) {
    for (g, cell) in &result.cells {
        let mut line = format!("{}={g}:", result.sweep.name());
        for (name, scores) in cell.models() {
            match (scores.mean, scores.min, scores.max) {
                (Some(mean), Some(min), Some(max)) => {
                    line.push_str(&format!(
                        " {name} mean={mean:.4} min={min:.4} max={max:.4}"
                    ));
                }
                _ => line.push_str(&format!(" {name} failed")),
            }
            if !scores.failures.is_empty() {
                line.push_str(&format!(" ({} failed restarts)", scores.failures.len()));
            }
        }
        println!("{line}");
        if let Some(cv) = &cell.cv {
            for (name, stats) in cv {
                println!(
                    "  cv {name}: {} batches, mean={:.4}, 95% [{:.4}, {:.4}]",
                    stats.batches, stats.mean, stats.ci_lower, stats.ci_upper
                );
            }
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Sample {
            kind,
            n,
            dim,
            benchmark,
            seed,
            out,
        } => {
            let bounds = match (dim, benchmark) {
                (Some(_), Some(_)) => {
                    return Err(Error::Config(
                        "pass either --dim or --benchmark, not both".into(),
                    ))
                }
                (None, None) => {
                    return Err(Error::Config("pass --dim or --benchmark".into()))
                }
                (Some(d), None) => Bounds::new(vec![0.0; d], vec![1.0; d])?,
                (None, Some(b)) => b.bounds(),
            };
            let points = design(kind, n, &bounds, seed)?;
            write_inputs_csv(&out, &points)?;
            println!("wrote {n} points of dimension {} to {}", bounds.dim(), out.display());
            Ok(())
        }
        Cmd::Bench {
            benchmark,
            n,
            kind,
            seed,
            no_gradients,
            out,
        } => {
            let ds = benchmark.dataset(kind, n, seed)?;
            let ds = if no_gradients {
                Dataset::new(ds.inputs().clone(), ds.outputs().clone(), None)?
            } else {
                ds
            };
            ds.write_csv(&out)?;
            println!(
                "wrote {} {} samples to {}",
                ds.n_samples(),
                benchmark.name(),
                out.display()
            );
            Ok(())
        }
        Cmd::Reduce {
            data,
            reducer,
            rank,
            restarts,
            epochs,
            layers,
            learning_rate,
            free_noise,
            seed,
            out,
            summary,
        } => {
            let ds = Dataset::read_csv(&data)?;
            let cfg = SurfaceConfig {
                kind: reducer,
                rank: parse_rank(&rank)?,
                restarts,
                noise: noise_policy(free_noise),
                levelset: LevelSetConfig {
                    n_layers: layers,
                    epochs,
                    learning_rate,
                    ..LevelSetConfig::default()
                },
                seed,
            };
            let surface =
                ReducedSurface::train(ds.inputs(), ds.outputs(), ds.gradients(), &cfg)?;
            std::fs::write(&out, surface.to_json()?)?;
            let summary = summary.unwrap_or_else(|| out.with_extension("summary.csv"));
            let reduced = surface.reducer().reduce(ds.inputs())?;
            write_summary_csv(&summary, &reduced, ds.outputs().as_slice())?;
            print!(
                "reduced {} inputs to rank {}; model {}, summary {}",
                ds.dim(),
                surface.rank(),
                out.display(),
                summary.display()
            );
            if let Some(ev) = surface.reducer().eigenvalues() {
                let head: Vec<String> = ev.iter().take(4).map(|v| format!("{v:.3e}")).collect();
                print!("; leading eigenvalues [{}]", head.join(", "));
            }
            println!();
            Ok(())
        }
        Cmd::Train {
            data,
            reducer,
            rank,
            n_lf_extra,
            extra_design,
            surface_restarts,
            mf_restarts,
            benchmark,
            free_noise,
            seed,
            out,
        } => {
            let ds = Dataset::read_csv(&data)?;
            let cfg = PipelineConfig {
                reducer,
                rank: parse_rank(&rank)?,
                n_lf_extra,
                extra_design,
                surface_restarts,
                mf_restarts,
                noise: noise_policy(free_noise),
                bounds: benchmark.map(|b| b.bounds()),
                seed,
                ..PipelineConfig::default()
            };
            let model = pipeline::run(&ds, &cfg)?;
            std::fs::write(&out, model.to_json()?)?;
            println!(
                "trained on {} high-fidelity samples (+{} synthetic), model {}",
                ds.n_samples(),
                n_lf_extra,
                out.display()
            );
            Ok(())
        }
        Cmd::Predict {
            model,
            inputs,
            particles,
            seed,
            out,
        } => {
            let model = PipelineModel::from_json(&std::fs::read_to_string(&model)?)?;
            let points = read_inputs_csv(&inputs)?;
            let pred = model.predict(&points, particles, seed)?;
            write_prediction_csv(&out, &points, pred.mean.as_slice(), pred.variance.as_slice())?;
            println!("wrote {} predictions to {}", points.nrows(), out.display());
            Ok(())
        }
        Cmd::Study {
            config,
            out_dir,
            test_size,
        } => {
            let cfg = load_study_config(&config, out_dir, test_size)?;
            let result = run_study(&cfg)?;
            print_study(&result);
            if let Some(dir) = &cfg.output_dir {
                println!("results written to {}", dir.display());
            }
            Ok(())
        }
        Cmd::Cv {
            config,
            k,
            out_dir,
            test_size,
        } => {
            let cfg = load_study_config(&config, out_dir, test_size)?;
            let result = cross_validate(&cfg, k)?;
            print_study(&result);
            if let Some(dir) = &cfg.output_dir {
                println!("results written to {}", dir.display());
            }
            Ok(())
        }
    }
}
