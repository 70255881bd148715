use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ionsync::ramsey::Engine;
use ionsync_cli::{load_config, parse_sweep, run_pipeline, CliError, Format, RunConfig, Stage};

/// Steady-state spin synchronization pipeline: crystal, cooling, Raman
/// couplings, spin model and Ramsey experiments.
#[derive(Parser, Debug)]
#[command(name = "ionsync", version)]
struct Args {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Last stage to run: modes, couplings or experiment.
    #[arg(long, default_value = "experiment")]
    stage: Stage,
    /// Engine for the Ramsey experiment: langevin, minimal or dense.
    #[arg(long)]
    engine: Option<Engine>,
    /// Repump sweep `w=a:b:n` in units of N_sigma Gamma_c.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Table format: csv or json.
    #[arg(long)]
    format: Option<Format>,
}

fn resolve(args: &Args) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(e) = args.engine {
        cfg.experiment.engine = e;
    }
    if let Some(s) = &args.sweep {
        cfg.experiment.w_over_n_gamma_c = parse_sweep(s)?;
    }
    if let Some(seed) = args.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    if let Some(f) = args.format {
        cfg.output.format = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let result = resolve(&args).and_then(|cfg| run_pipeline(&cfg, args.stage));
    match result {
        Ok(report) => {
            for c in &report.checks {
                let mark = if c.pass { "ok  " } else { "MISS" };
                println!("{mark} {:<14} {:>12.5e} (reference {:.4e} ± {:.0}%)", c.name, c.value, c.target, 100.0 * c.rel_tol);
            }
            for p in &report.sweep {
                let rate = p.decay_rate_per_s.map_or("n/a".to_string(), |r| format!("{r:.4e} 1/s"));
                println!(
                    "w = {:.3} N Gamma_c: decay {rate}, <sz> = {:.4}, V = {:.3} ± {:.3}",
                    p.w_over_n_gamma_c, p.steady_sz, p.normalized_variance, p.normalized_variance_se
                );
            }
            println!("artifacts in {}", report.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
