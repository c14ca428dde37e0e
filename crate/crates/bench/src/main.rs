use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use minidisc::scheduler::Selection;
use minidisc_bench::config::{ExperimentConfig, Method};
use minidisc_bench::report::{self, LedgerRow, LEDGER_CSV, RESULTS_CSV};
use minidisc_bench::run::{self, run_dir};
use minidisc_bench::{plot, tasks::make_task};

#[derive(Parser)]
#[command(name = "minidisc", version, about = "Teacher-assistant scheduling experiments on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or reuse) the teacher of every run.
    TrainTeacher(Common),
    /// Print the candidate grid of every run's teacher.
    Grid(Common),
    /// Run MiniDisc only.
    Minidisc(Common),
    /// Run MaxiDisc only.
    Maxidisc(Common),
    /// Run the KD, fixed-assistant and finetune baselines.
    Baselines(Common),
    /// Run every configured method and write results and plots.
    Run(Common),
    /// Summarize steps and trials per method from an output directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Redraw all charts from the CSVs in an output directory.
    Plot {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the default capacity-gap config as JSON.
    DefaultConfig {
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Runs only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Runs only these methods (repeatable).
    #[arg(long)]
    method: Vec<Method>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta: Option<usize>,
    /// Grid size n.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    selection: Option<Selection>,
    #[arg(long)]
    residual: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if !self.method.is_empty() {
            cfg.methods = self.method.clone();
        }
        if let Some(l) = self.lambda {
            cfg.plan.lambda = l;
        }
        if let Some(e) = self.eta {
            cfg.distill.eta = e;
        }
        if let Some(n) = self.grid {
            cfg.plan.grid_n = n;
        }
        if let Some(s) = self.selection {
            cfg.plan.selection = s;
        }
        if self.residual {
            cfg.plan.residual = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run_methods(common: &Common, methods: &[Method]) -> Result<()> {
    let mut cfg = common.load()?;
    if common.method.is_empty() {
        cfg.methods = methods.to_vec();
    }
    let results = run::run_experiment(&cfg)?;
    print!("{}", std::fs::read_to_string(cfg.out_dir.join(RESULTS_CSV))?);
    for f in &results.failures {
        eprintln!("failed: {} seed {}: {}", f.task, f.seed, f.error);
    }
    if !results.failures.is_empty() && results.runs.is_empty() {
        bail!("every run failed");
    }
    Ok(())
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::TrainTeacher(c) => {
            let cfg = c.load()?;
            for spec in &cfg.tasks {
                for &seed in &cfg.seeds {
                    let data = make_task(&run::run_task_spec(spec, seed))?;
                    let dir = run_dir(&cfg.out_dir, spec, seed);
                    let (_, metric) = run::load_or_train_teacher(&cfg, &data, seed, &dir)?;
                    println!("{} seed {seed}: teacher dev accuracy {metric:.4} ({})", spec.kind.name(), dir.display());
                }
            }
        }
        Command::Grid(c) => {
            let cfg = c.load()?;
            for spec in &cfg.tasks {
                for &seed in &cfg.seeds {
                    let grid = run::grid_only(&cfg, spec, seed)?;
                    println!("{} seed {seed}", spec.kind.name());
                    for (i, e) in grid.entries.iter().enumerate() {
                        let counts: Vec<String> = e.mask.per_layer_counts().iter().map(|(h, n)| format!("{h}/{n}")).collect();
                        println!("  {i:>2} target {:.4} achieved {:.4} heads/neurons {}", e.target_scale, e.achieved_scale, counts.join(" "));
                    }
                }
            }
        }
        Command::Minidisc(c) => run_methods(&c, &[Method::Minidisc])?,
        Command::Maxidisc(c) => run_methods(&c, &[Method::Maxidisc])?,
        Command::Baselines(c) => run_methods(&c, &Method::BASELINES)?,
        Command::Run(c) => {
            let cfg = c.load()?;
            run_methods(&c, &cfg.methods)?
        }
        Command::Report { out } => {
            let rows: Vec<LedgerRow> = report::read_csv(&out.join(LEDGER_CSV))?;
            let summary = report::report_ledger(&report::ledgers_from_rows(&rows)?);
            report::write_csv(&out.join(report::LEDGER_REPORT_CSV), &summary, &[])?;
            print!("{}", report::format_ledger_table(&summary));
        }
        Command::Plot { out } => {
            let n = plot::plot_dir(&out).with_context(|| format!("plotting {}", out.display()))?;
            println!("wrote {n} charts under {}", out.display());
        }
        Command::DefaultConfig { out } => {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::capacity_gap(out))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
