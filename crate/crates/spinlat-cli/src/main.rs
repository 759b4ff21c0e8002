use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spinlat::config::{self, EnsembleParam, ResolvedConfig};
use spinlat::ensemble::{self, Backend, EnsembleContext};
use spinlat::experiments::{self, defaults, ExperimentContext, ExperimentReport};
use spinlat::samplers::{self, SamplerConfig};
use spinlat::transfer;

/// Simulation and verification engine for 1d lattices of real-valued spins:
/// grand canonical and canonical ensembles, four backends, and a registry of
/// scaling experiments.
#[derive(Parser)]
#[command(name = "spinlat", version, about)]
struct Cli {
    /// Model configuration file (TOML); the built-in default model is used
    /// when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV tables, JSON reports, and traces.
    #[arg(long, global = true, default_value = "spinlat-out")]
    out: PathBuf,
    /// Base seed for stochastic backends.
    #[arg(long, global = true, default_value_t = 0x0114_0d92)]
    seed: u64,
    /// Rayon worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Also write per-xi characteristic-function diagnostics.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the model configuration and print the validation report.
    Validate,
    /// Run an MCMC chain for the configured ensemble and write a binary
    /// trace of thinned configurations.
    Sample {
        #[arg(long, default_value_t = 20_000)]
        sweeps: u64,
        #[arg(long, default_value_t = 10)]
        thin: u64,
    },
    /// Solve sigma(m) on the best applicable backend.
    MatchSigma {
        /// Target mean spin; defaults to the config's [ensemble] m.
        #[arg(long)]
        m: Option<f64>,
    },
    /// Cross-backend agreement check on the Gaussian model.
    OracleCheck,
    /// E1: power-law scaling of the ce/gce one-site expectation gap.
    ExpObservableScaling,
    /// E2: power-law scaling of the ce/gce covariance gap.
    ExpCorrelationScaling,
    /// E3: ce spin-spin decay and its 1/N plateau.
    ExpCeSpinDecay,
    /// E4: gce spin-spin exponential decay.
    ExpGceDecay,
    /// E5: stability of the local density g(0) across N.
    ExpG0Stability,
    /// E6: centered block-sum moment scalings from gce MCMC.
    ExpMomentScaling {
        #[arg(long, default_value_t = defaults::MOMENT_SWEEPS)]
        sweeps: u64,
    },
    /// Summarize previously written report JSON files.
    Report { paths: Vec<PathBuf> },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("failed to configure {t} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load(cli: &Cli) -> Result<(config::ConfigFile, ResolvedConfig), Box<dyn std::error::Error>> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?,
        None => config::DEFAULT_CONFIG.to_string(),
    };
    let file = config::parse_config(&text)?;
    let resolved = file.resolve()?;
    Ok((file, resolved))
}

fn experiment_ctx(cli: &Cli) -> ExperimentContext {
    ExperimentContext {
        out_dir: Some(cli.out.clone()),
        seed: cli.seed,
        verbose: cli.verbose,
        ..ExperimentContext::default()
    }
}

fn report_outcome(report: &ExperimentReport, ctx: &ExperimentContext) -> ExitCode {
    for line in report.verdict_lines() {
        println!("{line}");
    }
    for note in &report.notes {
        println!("note: {note}");
    }
    if let Some(csv) = &report.csv_path {
        println!("csv: {csv}");
    }
    let _ = ctx;
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn write_cf_diagnostics(
    cli: &Cli,
    resolved: &ResolvedConfig,
) -> Result<(), Box<dyn std::error::Error>> {
    let grid = spinlat::transfer::TransferGrid::default();
    let fq = spinlat::transfer::FourierQuadrature::default();
    let sigma = match resolved.ensemble {
        EnsembleParam::Sigma(s) => s,
        EnsembleParam::MeanSpin(m) => transfer::sigma_of_m_transfer(&resolved.spec, m, &grid)?,
    };
    let table = transfer::characteristic_function_table(&resolved.spec, sigma, &grid, &fq)?;
    std::fs::create_dir_all(&cli.out)?;
    let mut body = String::from("xi,re_cf,im_cf\n");
    for (xi, re, im) in table {
        body.push_str(&format!(
            "{},{},{}\n",
            experiments::fmt_f64(xi),
            experiments::fmt_f64(re),
            experiments::fmt_f64(im)
        ));
    }
    std::fs::write(cli.out.join("cf_diagnostics.csv"), body)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let ctx = experiment_ctx(cli);
    match &cli.command {
        Command::Validate => {
            let (_, resolved) = load(cli)?;
            let report = resolved.spec.validation_report();
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Sample { sweeps, thin } => {
            let (_, resolved) = load(cli)?;
            let spec = &resolved.spec;
            let mut records = Vec::new();
            let trace_path = cli.out.join("trace.bin");
            match resolved.ensemble {
                EnsembleParam::Sigma(sigma) => {
                    let cfg = SamplerConfig {
                        thin: *thin,
                        ..SamplerConfig::gce(cli.seed, *sweeps)
                    };
                    let mut state = samplers::initialize_gce(spec);
                    while state.sweep_index() < cfg.n_sweeps {
                        samplers::gce_sweep(spec, sigma, &mut state, &cfg);
                        if state.sweep_index() > cfg.burn_in_sweeps
                            && state.sweep_index().is_multiple_of(cfg.thin)
                        {
                            records.push(state.config.as_slice().to_vec());
                        }
                    }
                    println!(
                        "gce chain: {} sweeps, acceptance {:.3}, {} records",
                        sweeps,
                        state.acceptance_rate(),
                        records.len()
                    );
                }
                EnsembleParam::MeanSpin(m) => {
                    let cfg = SamplerConfig {
                        thin: *thin,
                        ..SamplerConfig::ce(cli.seed, *sweeps)
                    };
                    let mut state = samplers::initialize_ce(spec, m)?;
                    while state.sweep_index() < cfg.n_sweeps {
                        samplers::ce_sweep(spec, m, &mut state, &cfg)?;
                        if state.sweep_index() > cfg.burn_in_sweeps
                            && state.sweep_index() % cfg.thin == 0
                        {
                            records.push(state.config.as_slice().to_vec());
                        }
                    }
                    println!(
                        "ce chain at m = {m}: {} sweeps, acceptance {:.3}, {} records, max reprojection {:.2e}",
                        sweeps,
                        state.acceptance_rate(),
                        records.len(),
                        state.max_reproject_displacement
                    );
                }
            }
            experiments::write_trace(&trace_path, spec.n() as u64, *thin, &records)?;
            println!("trace: {}", trace_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::MatchSigma { m } => {
            let (_, resolved) = load(cli)?;
            let m = match (m, resolved.ensemble) {
                (Some(m), _) => *m,
                (None, EnsembleParam::MeanSpin(m)) => m,
                (None, EnsembleParam::Sigma(_)) => {
                    return Err("no target mean spin: pass --m or set [ensemble] m".into())
                }
            };
            let backend = if resolved.spec.potential().is_zero() {
                Backend::ClosedForm
            } else if resolved.spec.range() <= 1 {
                Backend::Transfer
            } else {
                Backend::StochasticApproximation
            };
            let ectx = EnsembleContext::default();
            let result = ensemble::sigma_of_m(&resolved.spec, m, backend, &ectx)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::OracleCheck => {
            let report = experiments::oracle_check(&ctx)?;
            Ok(report_outcome(&report, &ctx))
        }
        Command::ExpObservableScaling => {
            let (file, resolved) = load(cli)?;
            if cli.verbose {
                write_cf_diagnostics(cli, &resolved)?;
            }
            let report = experiments::exp_observable_scaling(&file, defaults::OBSERVABLE_NS, &ctx)?;
            Ok(report_outcome(&report, &ctx))
        }
        Command::ExpCorrelationScaling => {
            let (file, _) = load(cli)?;
            let report = experiments::exp_correlation_scaling(
                &file,
                defaults::CORRELATION_COSINE_NS,
                defaults::CORRELATION_GAUSSIAN_NS,
                &ctx,
            )?;
            Ok(report_outcome(&report, &ctx))
        }
        Command::ExpCeSpinDecay => {
            let (file, _) = load(cli)?;
            let report = experiments::exp_ce_spin_decay(&file, defaults::CE_DECAY_N_BASE, &ctx)?;
            Ok(report_outcome(&report, &ctx))
        }
        Command::ExpGceDecay => {
            let (file, _) = load(cli)?;
            let report = experiments::exp_gce_decay(
                &file,
                defaults::GCE_DECAY_N,
                defaults::GCE_DECAY_D_MAX,
                &ctx,
            )?;
            Ok(report_outcome(&report, &ctx))
        }
        Command::ExpG0Stability => {
            let (file, resolved) = load(cli)?;
            if cli.verbose {
                write_cf_diagnostics(cli, &resolved)?;
            }
            let report = experiments::exp_g0_stability(&file, defaults::G0_NS, &ctx)?;
            Ok(report_outcome(&report, &ctx))
        }
        Command::ExpMomentScaling { sweeps } => {
            let (file, _) = load(cli)?;
            let report = experiments::exp_moment_scaling(
                &file,
                defaults::MOMENT_N,
                defaults::MOMENT_BLOCKS,
                *sweeps,
                &ctx,
            )?;
            Ok(report_outcome(&report, &ctx))
        }
        Command::Report { paths } => {
            let mut all_pass = true;
            for path in paths {
                let body = std::fs::read_to_string(path)?;
                let report: serde_json::Value = serde_json::from_str(&body)?;
                let id = report["id"].as_str().unwrap_or("?");
                for v in report["verdicts"].as_array().into_iter().flatten() {
                    let pass = v["pass"].as_bool().unwrap_or(false);
                    all_pass &= pass;
                    println!(
                        "[{}] {} / {}: observed {} (needs {})",
                        if pass { "PASS" } else { "FAIL" },
                        id,
                        v["criterion"].as_str().unwrap_or("?"),
                        v["observed"],
                        v["threshold"].as_str().unwrap_or("?")
                    );
                }
            }
            Ok(if all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}
