use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparse_lpv::artifacts::{self, load_dataset, read_json};
use sparse_lpv::pipeline::{self, OrderReport, RunConfig, SchedReport};
use sparse_lpv::simulator::SampledDataset;
use sparse_lpv::structure::{detect_groups, input_name, StructureReport};
use sparse_lpv::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "sparse-lpv", version, about = "Sparse LPV estimation and additive structure detection")]
struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Noise seed; for `mc` the first seed of the sweep.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for `mc`.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override a configuration key by dotted path, e.g. `estimator.gamma_ord=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Simulate the experiment and write the dataset.
    Simulate,
    /// Model-order selection on the dataset.
    Order,
    /// Scheduling selection on the inputs retained by `order`.
    Sched,
    /// Additive structure from the scheduling support.
    Detect,
    /// Re-estimate the reduced model found by `detect`.
    Refit,
    /// Monte Carlo sweep of the full pipeline over noise seeds.
    Mc,
    /// Every stage in sequence on one dataset.
    All,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Numerical => 3,
        ErrorKind::Io => 4,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut overrides = Vec::new();
    for item in &cli.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{item}' is not KEY=VALUE")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = cli.seed {
        let key = if cli.command == Command::Mc { "monte_carlo.base_seed" } else { "experiment.seed" };
        overrides.push((key.into(), seed.to_string()));
    }
    if let Some(out) = &cli.out {
        overrides.push(("output_dir".into(), quoted(out)));
    }
    if overrides.is_empty() {
        Ok(base)
    } else {
        base.with_overrides(&overrides)
    }
}

fn quoted(p: &Path) -> String {
    format!("{:?}", p.display().to_string())
}

fn simulate(cfg: &RunConfig, dir: &Path) -> Result<SampledDataset> {
    let ds = pipeline::simulate(cfg)?;
    ds.save(&artifacts::dataset_path(dir))?;
    let [t0, t1] = cfg.experiment.estimation_window;
    println!("dataset: {} samples over [{t0}, {t1}) s", ds.len());
    println!("small-input rms: {:.3e}", cfg.experiment.epsilon_rms);
    match ds.realized_snr_db {
        Some(snr) => println!("realized SNR: {snr:.2} dB"),
        None => println!("realized SNR: noise-free"),
    }
    Ok(ds)
}

fn order(cfg: &RunConfig, dir: &Path, ds: &SampledDataset) -> Result<OrderReport> {
    let op = pipeline::build_operator(cfg, ds)?;
    let r = pipeline::run_order(cfg, ds, &op)?;
    artifacts::write_order(dir, cfg, &r)?;
    println!("{:<6} {:>12} {:>12}  retained", "coef", "score", "max");
    for (j, name) in r.names.iter().enumerate() {
        println!(
            "{name:<6} {:>12.5} {:>12.5}  {}",
            r.order.scores[j], r.coefficient_max[j], r.order.retained[j]
        );
    }
    Ok(r)
}

fn sched(cfg: &RunConfig, dir: &Path, ds: &SampledDataset, order: &OrderReport) -> Result<SchedReport> {
    let op = pipeline::build_operator(cfg, ds)?;
    let r = pipeline::run_sched(cfg, ds, &op, &order.order.retained_indices())?;
    artifacts::write_sched(dir, cfg, &r)?;
    let names: Vec<String> = r.retained.iter().map(|&j| input_name(j)).collect();
    println!("{} scheduling scores over {}", r.n_tau, names.join(", "));
    let edges: Vec<String> = r.support.edges().iter().map(|(a, b)| format!("({},{})", a + 1, b + 1)).collect();
    println!("support: {}", edges.join(" "));
    Ok(r)
}

fn detect(cfg: &RunConfig, dir: &Path, sched: &SchedReport) -> Result<StructureReport> {
    let r = detect_groups(&sched.support);
    artifacts::write_structure(dir, cfg, &r)?;
    println!("M = {}: {}", r.m, r.decomposition);
    Ok(r)
}

fn refit(cfg: &RunConfig, dir: &Path, ds: &SampledDataset, structure: &StructureReport) -> Result<()> {
    let op = pipeline::build_operator(cfg, ds)?;
    let r = pipeline::run_refit(cfg, ds, &op, structure)?;
    artifacts::write_refit(dir, cfg, ds, &r)?;
    for c in &r.stage.solution.constants {
        println!("constant {}: {:.5}", r.names[c.index], c.value);
    }
    if let Some(rms) = &r.rms_error {
        for (name, e) in r.names.iter().zip(rms) {
            println!("rms error {name}: {e:.5}");
        }
    }
    Ok(())
}

fn mc(cfg: &RunConfig, dir: &Path, workers: Option<usize>) -> Result<()> {
    let s = pipeline::monte_carlo(cfg, workers)?;
    artifacts::write_mc(dir, cfg, &s)?;
    println!("{} runs, {} failed", s.n_runs, s.n_failed);
    for c in &s.coefficients {
        println!(
            "{:<6} max {:.5} ± {:.5}  retained {:.0}%",
            c.name,
            c.max_mean,
            c.max_std,
            100.0 * c.retained_rate
        );
    }
    for (d, rate) in &s.decompositions {
        println!("{:>5.1}%  {d}", 100.0 * rate);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    match cli.command {
        Command::Simulate => {
            simulate(&cfg, &dir)?;
        }
        Command::Order => {
            order(&cfg, &dir, &load_dataset(&dir)?)?;
        }
        Command::Sched => {
            let o: OrderReport = read_json(&dir.join(artifacts::ORDER_JSON))?;
            sched(&cfg, &dir, &load_dataset(&dir)?, &o)?;
        }
        Command::Detect => {
            let s: SchedReport = read_json(&dir.join(artifacts::SCHED_JSON))?;
            detect(&cfg, &dir, &s)?;
        }
        Command::Refit => {
            let s: StructureReport = read_json(&dir.join(artifacts::STRUCTURE_JSON))?;
            refit(&cfg, &dir, &load_dataset(&dir)?, &s)?;
        }
        Command::Mc => mc(&cfg, &dir, cli.workers)?,
        Command::All => {
            let ds = simulate(&cfg, &dir)?;
            let o = order(&cfg, &dir, &ds)?;
            let s = sched(&cfg, &dir, &ds, &o)?;
            let st = detect(&cfg, &dir, &s)?;
            refit(&cfg, &dir, &ds, &st)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
