use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arzdelay::io::config::RunConfig;
use arzdelay::io::run::execute;
use arzdelay::io::sweep::{parse_values, sweep};
use arzdelay::io::verify::{verify_kernels, verify_transform, KernelReport, TransformReport};
use arzdelay::Error;
use clap::{Parser, Subcommand};

/// Environment variable naming the output directory when neither `--out` nor
/// the config sets one.
const OUT_DIR_VAR: &str = "ARZDELAY_OUT_DIR";
const FALLBACK_OUT_DIR: &str = "out";

#[derive(Parser)]
#[command(name = "arzdelay", version, about = "Delay-compensated time-gap control of mixed traffic")]
struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write its traces.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per value of a numeric key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Key such as `d_actual` or `model.alpha`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, optionally with units.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        /// Concurrent runs; defaults to the number of cores.
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form kernels against successive approximations.
    VerifyKernels {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seam continuity and round trip of the transformation.
    VerifyTransform {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.output.dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_VAR).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR))
}

fn run(config: &Path, out: Option<PathBuf>) -> Result<i32, Error> {
    let cfg = RunConfig::load(config)?;
    let root = out_dir(out, &cfg);
    let m = execute(&cfg, &root)?;
    println!("run `{}` ok ({:.1} s), digest {}", m.label, m.finished - m.started, m.config_digest);
    if let Some(s) = &m.summary {
        println!(
            "  final norms: rho {:.4e} veh/m  v {:.4e} m/s  h_acc {:.4e} s; h_acc in [{:.3}, {:.3}] s",
            s.final_l2_rho, s.final_l2_v, s.final_l2_hacc, s.h_acc_min, s.h_acc_max
        );
        if let (Some(t), Some(f), Some(c)) = (s.ttt, s.fuel, s.comfort) {
            println!("  improvement over open loop: ttt {t:.2}%  fuel {f:.2}%  comfort {c:.2}%");
        }
        if let Some(rate) = s.lyapunov_decay_rate {
            println!("  fitted Lyapunov decay rate {rate:.4e} 1/s");
        }
    }
    for p in &m.outputs {
        println!("  wrote {}", p.display());
    }
    Ok(0)
}

fn run_sweep(
    config: &Path,
    axis: &str,
    values: &str,
    parallelism: Option<usize>,
    out: Option<PathBuf>,
) -> Result<i32, Error> {
    let cfg = RunConfig::load(config)?;
    let values = parse_values(axis, values)?;
    let threads = parallelism.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let report = sweep(&cfg, axis, &values, threads, &out_dir(out, &cfg))?;
    for e in &report.entries {
        match &e.error {
            None => println!("  {} = {}: ok ({})", report.axis, e.value, e.label),
            Some(msg) => println!("  {} = {}: FAILED: {msg}", report.axis, e.value),
        }
    }
    println!("summary: {}", report.summary.display());
    Ok(report.entries.iter().map(|e| e.exit_code).find(|&c| c != 0).unwrap_or(0))
}

fn print_kernel_report(r: &KernelReport) {
    for c in &r.regions {
        println!(
            "  {} region {:<9} {:>5} points, max |closed form - oracle| {:.3e}",
            c.kernel, c.region, c.points, c.max_error
        );
    }
    println!("  transport residual {:.3e} over {} points", r.max_pde_residual, r.pde_points);
}

fn print_transform_report(r: &TransformReport) {
    println!("  max seam jump {:.3e} of field scale over {} states", r.max_seam, r.states);
    for l in &r.levels {
        println!(
            "  round trip on {} nodes, ds {} s: {:.3e} of |psi|, {:.3e} of max(|psi|, |beta|)",
            l.nodes, l.ds, l.relative_to_input, l.relative_to_larger
        );
    }
    if let Some(p) = r.order() {
        println!("  observed order {p:.2}");
    }
}

fn run_verify_kernels(config: &Path, out: Option<PathBuf>) -> Result<i32, Error> {
    let cfg = RunConfig::load(config)?;
    let (report, paths) = verify_kernels(&cfg, &out_dir(out, &cfg))?;
    print_kernel_report(&report);
    for p in paths {
        println!("  wrote {}", p.display());
    }
    if !report.passed() {
        return Err(Error::Validation("kernel checks failed".into()));
    }
    Ok(0)
}

fn run_verify_transform(config: &Path, out: Option<PathBuf>) -> Result<i32, Error> {
    let cfg = RunConfig::load(config)?;
    let (report, paths) = verify_transform(&cfg, &out_dir(out, &cfg))?;
    print_transform_report(&report);
    for p in paths {
        println!("  wrote {}", p.display());
    }
    if !report.passed() {
        return Err(Error::Validation("transform checks failed".into()));
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let outcome = match cli.command {
        Command::Run { config, out } => run(&config, out),
        Command::Sweep { config, axis, values, parallelism, out } => {
            run_sweep(&config, &axis, &values, parallelism, out)
        }
        Command::VerifyKernels { config, out } => run_verify_kernels(&config, out),
        Command::VerifyTransform { config, out } => run_verify_transform(&config, out),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
