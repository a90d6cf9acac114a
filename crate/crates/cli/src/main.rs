//! `synthweaver` — run the pipeline stages against a TOML run configuration.
//!
//! Exit status: 0 on success, 2 for usage or configuration errors, 1 for
//! failures while running.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use synthweaver::dataset::{SiteStats, MANIFEST_FILE};
use synthweaver::pipeline::{Pipeline, PipelineError, RunConfig, StageReport};

#[derive(Debug, Parser)]
#[command(name = "synthweaver", version, about = "Synthesize web-agent training data")]
struct Cli {
    #[command(flatten)]
    run: RunArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration file.
    #[arg(long, short, global = true, default_value = "synthweaver.toml")]
    config: PathBuf,
    /// Run directory name under `run_root` (default `run-{seed}`).
    #[arg(long, global = true)]
    run: Option<String>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the configured worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Answer oracle calls from a mock script instead of the endpoint.
    #[arg(long, global = true)]
    mock: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Explore sites and propose tasks.
    Explore,
    /// Collect trajectories for proposed tasks.
    Collect,
    /// Judge and refine collected trajectories.
    Refine,
    /// Write windowed training examples.
    Export(ExportArgs),
    /// Print corpus statistics.
    Stats {
        /// Print the statistics as JSON.
        #[arg(long)]
        json: bool,
    },
    /// All stages in order.
    Run,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// History pairs per example (default from the config).
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, value_enum, default_value = "jsonl")]
    format: Format,
    /// Export only this site.
    #[arg(long, conflicts_with = "merge")]
    site: Option<String>,
    /// Merge all sites into one dataset (the default).
    #[arg(long)]
    merge: bool,
    /// Output directory (default: the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(args: &RunArgs) -> Result<Pipeline, PipelineError> {
    let mut cfg = RunConfig::load(&args.config).map_err(PipelineError::Config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(run) = &args.run {
        cfg.run_id = Some(run.clone());
    }
    if let Some(mock) = &args.mock {
        cfg.oracle.mock_script = Some(mock.clone());
    }
    Pipeline::new(cfg)
}

fn print_report(r: &StageReport) {
    println!(
        "{}: {} written, {} skipped, {} dropped, {} diagnostics",
        r.stage, r.written, r.skipped, r.dropped, r.diagnostics
    );
}

fn stats_row(name: &str, s: &SiteStats) -> String {
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    format!(
        "{name:<12} {:>5} {:>5} {:>6.1} {:>6.1} {:>6.1} {:>6.2} {:>7.2} {:>5} {:>5} {:>6} {:>10} {:>7} {:>5}",
        s.n_tasks,
        s.n_trajectories,
        s.completed_pct,
        s.failed_pct,
        s.exceeded_pct,
        s.mean_steps,
        s.mean_refines,
        s.n_refined,
        s.n_dropped,
        s.n_examples,
        s.total_cost_usd.round_dp(4),
        opt(s.mean_quality_score.map(|q| format!("{q:.1}"))),
        opt(s.diversity_score.map(|d| d.to_string())),
    )
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let p = load(&cli.run)?;
    match cli.command {
        Command::Explore => print_report(&p.explore()?),
        Command::Collect => print_report(&p.collect()?),
        Command::Refine => print_report(&p.refine()?),
        Command::Export(a) => {
            let Format::Jsonl = a.format;
            let dir = a.out.unwrap_or_else(|| p.run_dir().root().to_path_buf());
            let m = p.export_to(a.window, a.site.as_deref(), &dir)?;
            println!(
                "export: {} examples, {} observations -> {}",
                m.n_records,
                m.n_observations,
                dir.join(MANIFEST_FILE).display()
            );
            println!("content_hash: {}", m.content_hash);
        }
        Command::Stats { json } => {
            let s = p.stats()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&s).expect("stats serialize"));
            } else {
                println!(
                    "{:<12} {:>5} {:>5} {:>6} {:>6} {:>6} {:>6} {:>7} {:>5} {:>5} {:>6} {:>10} {:>7} {:>5}",
                    "site", "tasks", "trajs", "done%", "fail%", "over%", "steps", "refines", "kept", "drop",
                    "exmpl", "cost_usd", "quality", "div"
                );
                for (name, site) in &s.sites {
                    println!("{}", stats_row(name, site));
                }
                println!("{}", stats_row("overall", &s.overall));
            }
        }
        Command::Run => {
            for r in [p.explore()?, p.collect()?, p.refine()?] {
                print_report(&r);
            }
            let m = p.export(None, None)?;
            println!("export: {} examples, content_hash {}", m.n_records, m.content_hash);
            p.stats()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
