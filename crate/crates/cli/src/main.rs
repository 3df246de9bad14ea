use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use xdr_core::evaluation::{aggregate_ratings, read_ratings_csv};
use xdr_core::experiments::{
    collect_records, emit_tables, evaluate_run, run_ablation_suite, run_stages, ExperimentConfig, StageCache, StopAfter,
    Variant, METRICS_JSON,
};

#[derive(Parser)]
#[command(name = "xdr", about = "Synthetic fundus report generation: data, training, evaluation, ablations")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat key = value config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (run directory, or root for ablations and tables).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// full, no_medical_encoder, no_multitask_prompts or no_multistage.
    #[arg(long, global = true)]
    variant: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and split the synthetic dataset.
    GenData,
    /// Data, encoder initialisation and contrastive alignment.
    TrainAlign,
    /// Everything up to and including instruction tuning.
    TrainInstruct,
    /// The full pipeline with evaluation on the test split.
    Run,
    /// All four variants for each seed.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Re-evaluate a finished run directory.
    Eval {
        /// Run directory; defaults to --out.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Per-axis means of a rater CSV.
    AggregateRatings {
        #[arg(long)]
        ratings: PathBuf,
    },
    /// Result tables from finished runs.
    EmitTables {
        /// Directory holding run_record.json files (itself or one level down).
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        ratings: Option<PathBuf>,
        /// Add the published scores as a labelled reference column.
        #[arg(long)]
        reference: bool,
    },
}

fn config(g: &Global) -> Result<ExperimentConfig> {
    let mut c = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(o) = &g.out {
        c.out = o.to_string_lossy().into_owned();
    }
    if let Some(v) = &g.variant {
        c.variant = v.parse::<Variant>().map_err(|e| anyhow!("[config] {e}"))?;
    }
    c.validate().map_err(|e| anyhow!("[config] {e}"))?;
    Ok(c)
}

fn stages(g: &Global, stop: StopAfter) -> Result<()> {
    let c = config(g)?;
    let record = run_stages(&c, stop, &mut StageCache::new())?;
    println!("wrote {} (content hash {})", c.out, record.content_hash);
    for (stage, secs) in &record.stage_seconds {
        println!("  {stage:<9} {secs:>8.1} s");
    }
    if let Some(m) = &record.metrics {
        print!("\n{}", m.to_text());
    }
    Ok(())
}

fn ratings(path: &Path) -> Result<xdr_core::evaluation::RatingSummary> {
    let file = fs::File::open(path).with_context(|| format!("[ratings] opening {}", path.display()))?;
    let records = read_ratings_csv(file).map_err(|e| anyhow!("[ratings] {e}"))?;
    aggregate_ratings(&records).map_err(|e| anyhow!("[ratings] {e}"))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::GenData => stages(g, StopAfter::Data),
        Command::TrainAlign => stages(g, StopAfter::Align),
        Command::TrainInstruct => stages(g, StopAfter::Instruct),
        Command::Run => stages(g, StopAfter::Evaluate),
        Command::Ablate { seeds } => {
            let c = config(g)?;
            let suite = run_ablation_suite(&c, &seeds, Path::new(&c.out))?;
            print!("{}", suite.table);
            Ok(())
        }
        Command::Eval { run, sequential } => {
            let dir = run
                .or_else(|| g.out.clone())
                .ok_or_else(|| anyhow!("[config] eval needs --run or --out"))?;
            let report = evaluate_run(&dir, !sequential)?;
            print!("{}", report.to_text());
            match fs::read_to_string(dir.join(METRICS_JSON)) {
                Ok(stored) if stored == report.to_json() => println!("\nmatches stored {METRICS_JSON}"),
                Ok(_) => return Err(anyhow!("[evaluate] metrics differ from stored {METRICS_JSON}")),
                Err(_) => println!("\nno stored {METRICS_JSON} to compare"),
            }
            Ok(())
        }
        Command::AggregateRatings { ratings: path } => {
            let summary = ratings(&path)?;
            let json = serde_json::to_string_pretty(&summary)?;
            if let Some(out) = &g.out {
                fs::create_dir_all(out).context("[persist] creating output directory")?;
                fs::write(out.join("ratings_summary.json"), format!("{json}\n")).context("[persist] writing summary")?;
            }
            println!("{json}");
            Ok(())
        }
        Command::EmitTables {
            runs,
            ratings: rating_path,
            reference,
        } => {
            let records = collect_records(&runs).with_context(|| format!("[tables] reading runs under {}", runs.display()))?;
            let summary = rating_path.as_deref().map(ratings).transpose()?;
            let tables = emit_tables(&records, summary.as_ref(), reference).map_err(|e| anyhow!("[tables] {e}"))?;
            let out = g.out.clone().unwrap_or_else(|| runs.join("tables"));
            fs::create_dir_all(&out).context("[persist] creating table directory")?;
            for (name, body) in tables {
                fs::write(out.join(&name), &body).with_context(|| format!("[persist] writing {name}"))?;
                if name.ends_with(".txt") {
                    println!("{name}\n{body}");
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
