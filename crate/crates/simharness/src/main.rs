use bcse_core::matio;
use bcse_sim::config::{parse_scenario, render_scenario, Scenario};
use bcse_sim::runner::{
    self, phase_transition_scan, reinit_compare, render_csv, render_phase_csv, run_trial_full,
    snr_sweep,
};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "bcse-sim", about = "Monte-Carlo harness for blind and semi-blind GSM estimation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario config file (key=value sections)
    #[arg(long)]
    config: PathBuf,
    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the master seed from the config
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread count (defaults to all cores)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single trial
    Trial {
        #[command(flatten)]
        common: Common,
        /// Trial index
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// Directory for matrix dumps (Y, X, H and the estimates)
        #[arg(long)]
        dump_matrices: Option<PathBuf>,
    },
    /// Run all trials per SNR point of run.snr_list
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Success-fraction grid over the run.pt_axis1/pt_axis2 values
    PhaseTransition {
        #[command(flatten)]
        common: Common,
    },
    /// Paired-seed comparison of the five re-initialization methods
    ReinitCompare {
        #[command(flatten)]
        common: Common,
    },
}

fn load_scenario(common: &Common) -> Result<Scenario, String> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| format!("cannot read {}: {e}", common.config.display()))?;
    let mut scenario = parse_scenario(&text).map_err(|e| e.to_string())?;
    if let Some(seed) = common.seed {
        scenario.master_seed = seed;
    }
    Ok(scenario)
}

fn emit(common: &Common, body: &str, scenario: &Scenario) -> Result<(), String> {
    match &common.out {
        None => {
            print!("{body}");
            Ok(())
        }
        Some(path) => {
            std::fs::write(path, body).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
            let meta = format!(
                "version={}\n# resolved scenario\n{}",
                env!("CARGO_PKG_VERSION"),
                render_scenario(scenario)
            );
            let meta_path = path.with_extension(format!(
                "{}.meta",
                path.extension().and_then(|e| e.to_str()).unwrap_or("out")
            ));
            std::fs::write(&meta_path, meta)
                .map_err(|e| format!("cannot write {}: {e}", meta_path.display()))
        }
    }
}

fn dump_matrices(dir: &Path, artifacts: &runner::TrialArtifacts) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let items = [
        ("y.mat", &artifacts.y),
        ("x.mat", &artifacts.x),
        ("h.mat", &artifacts.h),
        ("x_hat.mat", &artifacts.x_hat),
        ("h_hat.mat", &artifacts.h_hat),
        ("s_hat.mat", &artifacts.s_hat),
    ];
    for (name, m) in items {
        matio::write_matrix(&dir.join(name), m).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn in_pool<F: FnOnce() -> Result<(), String> + Send>(
    threads: Option<usize>,
    f: F,
) -> Result<(), String> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| e.to_string())?
            .install(f),
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Trial {
            common,
            trial,
            dump_matrices: dump_dir,
        } => {
            let scenario = load_scenario(&common)?;
            in_pool(common.threads, || {
                let (result, artifacts) = run_trial_full(&scenario, trial);
                if let (Some(dir), Some(artifacts)) = (&dump_dir, &artifacts) {
                    dump_matrices(dir, artifacts)?;
                }
                let body = render_csv(std::slice::from_ref(&result));
                emit(&common, &body, &scenario)?;
                if !result.is_ok() {
                    return Err(format!("trial failed: {}", result.status));
                }
                Ok(())
            })
        }
        Command::Sweep { common } => {
            let scenario = load_scenario(&common)?;
            if scenario.snr_list.is_empty() {
                return Err("sweep requires run.snr_list".to_string());
            }
            in_pool(common.threads, || {
                let rows = snr_sweep(&scenario, &scenario.snr_list)?;
                for a in runner::aggregate(&rows) {
                    eprintln!(
                        "snr {} dB: mean ber {} mean nmse {} dB ({} ok, {} failed)",
                        a.snr_db, a.mean_ber, a.mean_nmse_db, a.ok_trials, a.failed_trials
                    );
                }
                emit(&common, &render_csv(&rows), &scenario)
            })
        }
        Command::PhaseTransition { common } => {
            let scenario = load_scenario(&common)?;
            let (a1, a2) = match (&scenario.pt_axis1, &scenario.pt_axis2) {
                (Some(a1), Some(a2)) => (a1.clone(), a2.clone()),
                _ => {
                    return Err(
                        "phase-transition requires run.pt_axis1 and run.pt_axis2".to_string()
                    )
                }
            };
            in_pool(common.threads, || {
                let cells = phase_transition_scan(&scenario, (&a1.0, &a1.1), (&a2.0, &a2.1))?;
                emit(&common, &render_phase_csv(&a1.0, &a2.0, &cells), &scenario)
            })
        }
        Command::ReinitCompare { common } => {
            let scenario = load_scenario(&common)?;
            in_pool(common.threads, || {
                let rows = reinit_compare(&scenario);
                emit(&common, &render_csv(&rows), &scenario)
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
