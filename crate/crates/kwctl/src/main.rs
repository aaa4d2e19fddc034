use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kwctl::idx::{load_split, Split};
use kwctl::{checkpoint::Checkpoint, eval, gradcheck, model, stats, synth, train};

#[derive(Parser)]
#[command(name = "kwctl", version, about = "KernelWarehouse convolution toolkit: plan warehouses, train desk-scale models, evaluate checkpoints, export attention statistics, and verify gradients")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Plan warehouses for an architecture spec at a budget.
    Plan {
        /// Spec path, or `builtin:resnet18`.
        spec: String,
        /// Budget `b` as `p/q` or a number; defaults to the spec's own.
        #[arg(long)]
        b: Option<String>,
        /// Override the divisor policy of every group: `gcd` or `gcd_half`.
        #[arg(long)]
        policy: Option<String>,
        /// Write the JSON report here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Train per config, writing metrics and a checkpoint into a run dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Evaluate a checkpoint (tau = 0).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which IDX pair to read: `test` or `train`.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Export per-warehouse mean attention CSVs.
    AttnStats {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Temperature to collect at (0 = fully learned attentions).
        #[arg(long, default_value_t = 0.0)]
        tau: f64,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Finite-difference check of every parameter family.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a synthetic IDX dataset (MNIST byte layout).
    Synth {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        train: usize,
        #[arg(long, default_value_t = 128)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_split(s: &str) -> kwctl::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(kwctl::CliError::Config(format!(
            "unknown split '{other}' (expected train or test)"
        ))),
    }
}

fn init_thread_pool() {
    let threads = std::env::var("KW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1);
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

fn run(cli: Cli) -> kwctl::Result<ExitCode> {
    match cli.cmd {
        Cmd::Plan { spec, b, policy, output } => {
            let text = kwctl::read_spec_text(&spec)?;
            let arch = kw_core::planner::parse_arch_spec(&text)?;
            let budget = match b {
                Some(s) => kw_core::planner::BudgetRatio::from_str_ratio(&s)?,
                None => arch.budget_b.ok_or_else(|| {
                    kwctl::CliError::Config(
                        "no budget: pass --b or set budget_b in the spec".into(),
                    )
                })?,
            };
            let policy = policy.as_deref().map(model::policy_from_str).transpose()?;
            let plan = kw_core::planner::plan_warehouses(&arch, budget, policy)?;
            let report = plan.report(&arch);
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| kwctl::CliError::Config(format!("report encode: {e}")))?;
            match output {
                Some(path) => std::fs::write(&path, json + "\n")
                    .map_err(|e| kwctl::CliError::io(path.display().to_string(), e))?,
                None => println!("{json}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train { config, output } => {
            let cfg = train::TrainConfig::from_file(&config)?;
            let outcome = train::train(&cfg, &output)?;
            println!(
                "{}",
                serde_json::json!({
                    "epochs": outcome.records.len(),
                    "initial_loss": outcome.initial_loss,
                    "final_loss": outcome.final_loss,
                    "checkpoint": outcome.checkpoint_path,
                    "metrics": outcome.metrics_path,
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { ckpt, data, split, limit, batch } => {
            let (net, _) = Checkpoint::load(&ckpt)?.restore()?;
            let mut ds = load_split(&data, parse_split(&split)?)?;
            if let Some(l) = limit {
                ds.truncate(l);
            }
            let result = eval::evaluate(&net, &ds, batch)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&result)
                    .map_err(|e| kwctl::CliError::Config(format!("encode: {e}")))?
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::AttnStats { ckpt, data, output, tau, split, limit, batch } => {
            let (net, _) = Checkpoint::load(&ckpt)?.restore()?;
            let mut ds = load_split(&data, parse_split(&split)?)?;
            if let Some(l) = limit {
                ds.truncate(l);
            }
            let stats = stats::collect_attention_stats(&net, &ds, tau, batch)?;
            let paths = stats::write_stats_csv(&stats, &output)?;
            for (g, p) in stats.groups.iter().zip(&paths) {
                match g.diag_agreement {
                    Some((hits, total)) => println!(
                        "{}: {} rows -> {} (diagonal agreement {hits}/{total})",
                        g.name,
                        g.rows,
                        p.display()
                    ),
                    None => println!("{}: {} rows -> {}", g.name, g.rows, p.display()),
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck { config } => {
            let cfg = train::TrainConfig::from_file(&config)?;
            let report = gradcheck::run_gradcheck(&cfg)?;
            for run in &report.runs {
                println!("tau = {}", run.tau);
                for f in &run.families {
                    println!(
                        "  {:<24} max rel error {:.3e} ({} coords)",
                        f.family, f.max_rel_error, f.coords_checked
                    );
                }
            }
            println!(
                "gradcheck {}: max rel error {:.3e} (tolerance {:.0e}); beta tables are frozen metadata and not checked",
                if report.passed { "PASS" } else { "FAIL" },
                report.max_rel_error,
                gradcheck::TOLERANCE
            );
            Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Synth { out, train, test, seed } => {
            synth::write_synthetic_dataset(&out, train, test, seed)?;
            println!(
                "wrote {train} train / {test} test samples to {}",
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    init_thread_pool();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
