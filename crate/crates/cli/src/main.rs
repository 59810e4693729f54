use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dyntomo::bench::{metrics, Dataset};
use dyntomo::experiment::{
    compare, read_metrics_csv, run_baseline, run_reconstruction, run_simulation, write_baseline,
    write_comparison_csv, write_metrics_csv, write_solution, ExperimentConfig, MetricRow,
};
use dyntomo::io::read_field;
use dyntomo::Error;

#[derive(Parser)]
#[command(name = "dyntomo", version, about = "Gated tomographic reconstruction with mass-preserving motion")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the phantom sequence and write the (noisy) gated data.
    Simulate(RunArgs),
    /// Reconstruct template, velocity and gate images.
    Reconstruct {
        #[command(flatten)]
        run: RunArgs,
        /// Dataset written by `simulate`; simulated in-process when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-gate and pooled static TV reconstructions.
    BaselineTv {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Tabulate metrics.csv of several run directories.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for comparison.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the gate images of a run directory against a dataset's truth.
    Metrics {
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 1,
        _ => 3,
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&args.config).map_err(|e| match e {
        Error::Io { .. } => Error::Config(e.to_string()),
        e => e,
    })?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Keeps the effective configuration next to the outputs.
fn save_config(dir: &Path, cfg: &ExperimentConfig) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::Io { path, source: e })
}

fn dataset(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Dataset, Error> {
    match data {
        Some(dir) => Dataset::load(dir),
        None => run_simulation(cfg),
    }
}

fn print_rows(rows: &[MetricRow]) {
    println!("{:<10} {:>4} {:>8} {:>8} {:>8} {:>10}", "method", "gate", "ssim", "psnr", "nrmse", "mass");
    for r in rows {
        println!("{:<10} {:>4} {:>8.4} {:>8.2} {:>8.4} {:>10.4}", r.method, r.gate, r.ssim, r.psnr, r.nrmse, r.mass);
    }
}

/// Gate images `<prefix>_gateNN.raw` in `dir`, grouped by prefix.
fn gate_images(dir: &Path) -> Result<Vec<(String, Vec<PathBuf>)>, Error> {
    let mut found: Vec<(String, usize, PathBuf)> = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    for entry in entries {
        let path = entry.map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(stem) = name.strip_suffix(".raw") else { continue };
        let Some((prefix, gate)) = stem.rsplit_once("_gate") else { continue };
        if let Ok(g) = gate.parse::<usize>() {
            found.push((prefix.to_string(), g, path.clone()));
        }
    }
    found.sort();
    let mut groups: Vec<(String, Vec<PathBuf>)> = Vec::new();
    for (prefix, _, path) in found {
        match groups.last_mut() {
            Some((p, paths)) if *p == prefix => paths.push(path),
            _ => groups.push((prefix, vec![path])),
        }
    }
    Ok(groups)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate(args) => {
            let cfg = load_config(&args)?;
            let data = run_simulation(&cfg)?;
            data.save(&args.out)?;
            save_config(&args.out, &cfg)?;
            log::info!("wrote {} gates to {}", data.gates.len(), args.out.display());
        }
        Command::Reconstruct { run, data } => {
            let cfg = load_config(&run)?;
            let data = dataset(&cfg, data.as_deref())?;
            let sol = run_reconstruction(&cfg, &data)?;
            let rows = write_solution(&run.out, &cfg, &data, &sol)?;
            save_config(&run.out, &cfg)?;
            log::info!(
                "{} iterations, J {:.6e} -> {:.6e}",
                sol.diagnostics.iterations,
                sol.objective_history().first().copied().unwrap_or(f64::NAN),
                sol.objective_history().last().copied().unwrap_or(f64::NAN)
            );
            if !cli.quiet {
                print_rows(&rows);
            }
        }
        Command::BaselineTv { run, data } => {
            let cfg = load_config(&run)?;
            let data = dataset(&cfg, data.as_deref())?;
            let b = run_baseline(&cfg, &data)?;
            let rows = write_baseline(&run.out, &data, &b)?;
            save_config(&run.out, &cfg)?;
            if !cli.quiet {
                print_rows(&rows);
            }
        }
        Command::Compare { runs, out } => {
            let mut tables = Vec::new();
            for dir in &runs {
                let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
                tables.push((name, read_metrics_csv(&dir.join("metrics.csv"))?));
            }
            let rows = compare(&tables);
            if let Some(out) = out {
                fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
                write_comparison_csv(&out.join("comparison.csv"), &rows)?;
            }
            if !cli.quiet {
                println!(
                    "{:<16} {:<10} {:>4} {:>8} {:>8} {:>8} {:>10} {:>9}",
                    "run", "method", "gate", "ssim", "psnr", "nrmse", "mass", "d_ssim"
                );
                for r in &rows {
                    println!(
                        "{:<16} {:<10} {:>4} {:>8.4} {:>8.2} {:>8.4} {:>10.4} {:>+9.4}",
                        r.run, r.method, r.gate, r.ssim, r.psnr, r.nrmse, r.mass, r.delta_ssim
                    );
                }
            }
        }
        Command::Metrics { run, data } => {
            let data = Dataset::load(&data)?;
            let mut rows = Vec::new();
            for (prefix, paths) in gate_images(&run)? {
                // Registration datasets carry the template as an extra leading frame.
                let truth = &data.ground_truth[data.ground_truth.len().saturating_sub(paths.len())..];
                if truth.len() != paths.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} {prefix} images but {} truth frames",
                        paths.len(),
                        data.ground_truth.len()
                    )));
                }
                for (k, (path, gt)) in paths.iter().zip(truth).enumerate() {
                    rows.push(MetricRow::new(&prefix, k + 1, metrics(&read_field(path)?, gt)?));
                }
            }
            write_metrics_csv(&run.join("metrics_recomputed.csv"), &rows)?;
            if !cli.quiet {
                print_rows(&rows);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
