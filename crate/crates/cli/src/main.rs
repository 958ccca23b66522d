use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lot_cli::commands::{
    cmd_classify, cmd_gen_gaussians, cmd_gradcheck, cmd_invert, cmd_lot, cmd_metrics, cmd_warp,
};
use lot_cli::{with_workers, CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "lot", version, about = "Optimal transport maps and LOT embeddings for 2-D densities")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key=value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Number of pyramid levels.
    #[arg(long, global = true, value_name = "N")]
    levels: Option<usize>,
    /// Basis widths per scale in pixels, coarsest first, comma separated.
    #[arg(long, global = true, value_name = "LIST")]
    sigma: Option<String>,
    /// Adam step sizes per scale, coarsest first, comma separated.
    #[arg(long, global = true, value_name = "LIST")]
    eta: Option<String>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the map warping SOURCE onto TARGET.
    Warp { source: PathBuf, target: PathBuf },
    /// Forward LOT embedding of INPUT relative to the configured reference.
    Lot { input: PathBuf },
    /// Reconstruct a density from an embedding.
    Invert {
        embedding: PathBuf,
        /// Potential written by `lot`, used to check the Jacobian.
        #[arg(long)]
        potential: Option<PathBuf>,
    },
    /// Generate the synthetic peak-count dataset.
    GenGaussians,
    /// Solve every dataset image and cross-validate linear classifiers.
    Classify { dataset: PathBuf },
    /// Compare the analytic gradient with finite differences.
    Gradcheck,
    /// Metrics of a stored potential for a source/target pair.
    Metrics {
        source: PathBuf,
        target: PathBuf,
        #[arg(long)]
        potential: PathBuf,
    },
}

fn overrides(c: &Common) -> CliResult<Vec<(String, String)>> {
    let mut kv = Vec::new();
    for s in &c.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::bad(format!("--set expects KEY=VALUE, got `{s}`")))?;
        kv.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.push((k.to_string(), v));
        }
    };
    flag("seed", c.seed.map(|v| v.to_string()));
    flag("out", c.out.as_ref().map(|p| p.display().to_string()));
    flag("levels", c.levels.map(|v| v.to_string()));
    flag("sigma", c.sigma.clone());
    flag("eta", c.eta.clone());
    flag("workers", c.workers.map(|v| v.to_string()));
    Ok(kv)
}

fn run(cli: Cli) -> CliResult<String> {
    let cfg = RunConfig::resolve(cli.common.config.as_deref(), &overrides(&cli.common)?)?;
    let out = cfg.out.display().to_string();
    with_workers(cfg.workers, move || -> CliResult<String> {
        Ok(match &cli.command {
            Command::Warp { source, target } => {
                let o = cmd_warp(&cfg, source, target)?;
                format!(
                    "relative_mse={} mass_transported={} mean_abs_curl={} converged={}",
                    o.metrics.relative_mse, o.metrics.mass_transported, o.metrics.mean_abs_curl, o.converged
                )
            }
            Command::Lot { input } => {
                let e = cmd_lot(&cfg, input)?;
                format!("embedding norm^2={}", e.hat.weighted_norm_sq())
            }
            Command::Invert { embedding, potential } => {
                let r = cmd_invert(&cfg, embedding, potential.as_deref())?;
                format!("reconstructed mass={}", r.total_mass())
            }
            Command::GenGaussians => {
                let d = cmd_gen_gaussians(&cfg)?;
                format!("{} images", d.len())
            }
            Command::Classify { dataset } => {
                let o = cmd_classify(&cfg, dataset)?;
                let mut s = format!("solved={} cached={}", o.solved, o.cached);
                for (kind, r) in &o.results {
                    s.push_str(&format!("\n{} {} {:.3} ± {:.3}", kind.as_str(), r.classifier, r.mean, r.std));
                }
                s
            }
            Command::Gradcheck => {
                let r = cmd_gradcheck(&cfg)?;
                format!(
                    "{} entries, max relative error {:e}, {} kink-straddling draws skipped",
                    r.rows.len(),
                    r.max_relative_error,
                    r.redrawn
                )
            }
            Command::Metrics { source, target, potential } => {
                let m = cmd_metrics(&cfg, source, target, potential)?;
                format!(
                    "relative_mse={} mass_transported={} mean_abs_curl={}",
                    m.relative_mse, m.mass_transported, m.mean_abs_curl
                )
            }
        })
    })?
    .map(|s| format!("{s}\noutputs in {out}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
