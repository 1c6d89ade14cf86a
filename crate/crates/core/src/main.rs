use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semra::em_basis::BasisSet;
use semra::error::Error;
use semra::harness::{
    emit_outputs, evaluate, run_ce, run_ce_sweep, run_sweep, CsiMode, Realization, ResultTable, Scheme, SweepSpec,
};
use semra::estimation::CeScheme;
use semra::precoder::{Init, Problem, RunOptions};
use semra::scenario::SystemConfig;
use semra::wmmse::run_wmmse_tridomain;
use semra::zf::run_zf_tridomain;

/// Tri-domain precoding and movement-aided channel estimation simulator.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Spectral-efficiency sweep described by a sweep file.
    Sweep(SweepArgs),
    /// NMSE-S / NMSE-E sweep of the CE pipelines only.
    CeEval(SweepArgs),
    /// One realization with per-iteration traces.
    Single(SingleArgs),
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Base seed; defaults to `system.rng_seed` of the sweep file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the realization count of the sweep file.
    #[arg(long)]
    realizations: Option<usize>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SingleArgs {
    /// System configuration (TOML); defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the trace CSV; stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Sweep(args) => sweep(args, false),
        Command::CeEval(args) => sweep(args, true),
        Command::Single(args) => single(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn sweep(args: SweepArgs, ce_only: bool) -> Result<(), Failure> {
    let mut spec = SweepSpec::load(&args.config).map_err(Failure::Config)?;
    if let Some(n) = args.realizations {
        spec.realizations = n;
        spec.validate().map_err(Failure::Config)?;
    }
    let seed = args.seed.unwrap_or(spec.system.rng_seed);
    let run = if ce_only { run_ce_sweep } else { run_sweep };
    let table = run(&spec, seed, args.jobs).map_err(Failure::Runtime)?;
    let stem = args
        .config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sweep".into());
    let files = emit_outputs(&table, &args.out, &stem).map_err(Failure::Runtime)?;
    print_table(&table);
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn print_table(table: &ResultTable) {
    println!("{:<24} {:<10} {:>8} {:<7} {:>10} {:>8} {:>5}", "scheme", "csi", "value", "metric", "mean", "stderr", "n");
    for r in &table.rows {
        println!(
            "{:<24} {:<10} {:>8} {:<7} {:>10.3} {:>8.3} {:>5}",
            r.scheme, r.csi, r.value, r.metric, r.mean, r.stderr, r.n
        );
    }
    if !table.quarantined.is_empty() {
        println!("{} realization(s) quarantined", table.quarantined.len());
    }
}

fn single(args: SingleArgs) -> Result<(), Failure> {
    let config = match &args.config {
        Some(path) => SystemConfig::load(path).map_err(Failure::Config)?,
        None => SystemConfig::default(),
    };
    config.validate().map_err(Failure::Config)?;
    let seed = args.seed.unwrap_or(config.rng_seed);
    let basis = BasisSet::new(config.num_basis).map_err(Failure::Runtime)?;
    let real = Realization::new(&config, basis, seed).map_err(Failure::Runtime)?;

    for ce in [CeScheme::Semra, CeScheme::Emra] {
        match run_ce(&real, ce) {
            Ok(o) => println!("CE {ce:?}: NMSE-S {:.2} dB, NMSE-E {:.2} dB", o.nmse_s, o.nmse_e),
            Err(e) => println!("CE {ce:?}: failed: {e}"),
        }
    }

    let problem = Problem::new(&real.truth, &real.geometry, &config);
    let options = RunOptions::from_config(&config);
    let init = || Init::reference(&real.geometry, config.num_basis);
    let wmmse = run_wmmse_tridomain(&problem, init(), &options).map_err(Failure::Runtime)?;
    let zf = run_zf_tridomain(&problem, init(), &options).map_err(Failure::Runtime)?;
    let g = config.num_subcarriers as f64;
    let mut trace = String::from("scheme,iteration,objective,se\n");
    for (name, records) in [("SEMRA-WMMSE", &wmmse.trace), ("SEMRA-ZF", &zf.trace)] {
        println!("{name} trace (perfect CSI):");
        for r in records {
            println!("  it {:>2}: objective {:>12.5e}  SE {:.3} bps/Hz", r.iteration, r.objective, r.sum_se / g);
            trace.push_str(&format!("{name},{},{},{}\n", r.iteration, r.objective, r.sum_se / g));
        }
    }

    let schemes = [Scheme::SemraWmmse, Scheme::SemraZf, Scheme::Emra];
    for (scheme, mode, se) in evaluate(&real, &schemes, &[CsiMode::Perfect, CsiMode::Estimated], 3) {
        match se {
            Ok(se) => println!("{scheme:<12} {mode:<9}: SE {se:.3} bps/Hz"),
            Err(e) => println!("{scheme:<12} {mode:<9}: failed: {e}"),
        }
    }

    if let Some(dir) = &args.out {
        write_trace(dir, &trace).map_err(Failure::Runtime)?;
    }
    Ok(())
}

fn write_trace(dir: &Path, text: &str) -> Result<(), Error> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let path = dir.join("single_trace.csv");
    std::fs::write(&path, text).map_err(io(&path))?;
    println!("wrote {}", path.display());
    Ok(())
}
