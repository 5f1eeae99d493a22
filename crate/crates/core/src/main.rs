use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use circuit_dynamics::analysis::{self, AnalysisConfig, Analyses};
use circuit_dynamics::ingest::{load_dataset, write_dataset, Dataset, GroupFilter};
use circuit_dynamics::model::{ActivationRecord, SnapshotId};
use circuit_dynamics::par::{self, Execution};
use circuit_dynamics::report::{self, build_tables, write_tables, Format, Table};
use circuit_dynamics::roles::{Thresholds, DEFAULT_THETA_FFN, DEFAULT_THETA_HEAD};
use circuit_dynamics::synth::{generate_synthetic, SyntheticConfig};
use circuit_dynamics::tracer::{self, ToyModel, ToyModelConfig, DEFAULT_THETA_IFR};
use circuit_dynamics::{Error, Result};

#[derive(Parser)]
#[command(name = "circdyn", version, about = "Circuit role classification and training-dynamics analysis")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset directory and report every problem found.
    Validate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate a synthetic dataset with known role dynamics.
    Synth(SynthArgs),
    /// Trace facts (or a token list) through toy decoders and extract routes.
    TraceToy(TraceArgs),
    /// Role assignments and role counts per snapshot.
    Classify(AnalysisArgs),
    /// IoU of each role set against MAIN.
    Iou(AnalysisArgs),
    /// Role switches over the selected snapshots.
    Switches(AnalysisArgs),
    /// Pooled Markov transition estimates.
    Markov(AnalysisArgs),
    /// Answer reliability, template scores and top-k accuracy.
    Probe(AnalysisArgs),
    /// Every report table.
    Report(AnalysisArgs),
    /// Synthesize, analyze and report in one go.
    RunAll(RunAllArgs),
}

#[derive(Args, Clone)]
struct ThresholdArgs {
    /// Role threshold for attention heads.
    #[arg(long, default_value_t = DEFAULT_THETA_HEAD)]
    theta_role: f64,
    /// Role threshold for FFN blocks.
    #[arg(long, default_value_t = DEFAULT_THETA_FFN)]
    theta_role_ffn: f64,
    /// Snapshots used for switch counting, e.g. s1,s10,s20,s40,main.
    #[arg(long, value_delimiter = ',')]
    snapshots: Option<Vec<SnapshotId>>,
    /// Relation group to analyze; all three when omitted.
    #[arg(long)]
    group: Option<GroupFilter>,
}

#[derive(Args, Clone)]
struct AnalysisArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Output directory; tables go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    layers: u32,
    #[arg(long, default_value_t = 20)]
    heads: u32,
    /// Snapshot count including MAIN.
    #[arg(long, default_value_t = 10)]
    num_snapshots: u32,
    #[arg(long, default_value_t = 6)]
    facts_per_relation: usize,
}

impl SynthArgs {
    fn config(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.seed,
            num_layers: self.layers,
            num_heads: self.heads,
            num_snapshots: self.num_snapshots,
            facts_per_relation: self.facts_per_relation,
            ..SyntheticConfig::default()
        }
    }
}

#[derive(Args, Clone)]
struct TraceArgs {
    /// Dataset whose facts are traced; its circuits are replaced by toy routes.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Token ids to trace when no dataset is given.
    #[arg(long, value_delimiter = ',', default_value = "3,1,4,1")]
    tokens: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_THETA_IFR)]
    theta_ifr: f64,
    /// Base weight seed; snapshot i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Layers of the toy model when tracing a token list.
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Heads per layer of the toy model when tracing a token list.
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Width per head.
    #[arg(long, default_value_t = 4)]
    head_dim: usize,
    #[arg(long, default_value_t = 16)]
    d_ff: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct RunAllArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[arg(long, default_value_t = DEFAULT_THETA_IFR)]
    theta_ifr: f64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

fn execution(cli: &Cli) -> Execution {
    if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn analysis_config(t: &ThresholdArgs, execution: Execution) -> AnalysisConfig {
    AnalysisConfig {
        thresholds: Thresholds {
            head: t.theta_role,
            ffn: t.theta_role_ffn,
        },
        selected: t.snapshots.clone(),
        execution,
    }
}

fn groups(t: &ThresholdArgs) -> Vec<GroupFilter> {
    match t.group {
        Some(g) => vec![g],
        None => vec![GroupFilter::All, GroupFilter::Loc, GroupFilter::Name],
    }
}

fn emit(tables: &[Table], out: Option<&Path>, format: Format) -> Result<()> {
    match out {
        Some(dir) => {
            for p in write_tables(tables, dir, format)? {
                log::info!("wrote {}", p.display());
            }
        }
        None => {
            for t in tables {
                println!("# {}", t.name);
                print!("{}", t.render(format)?);
            }
        }
    }
    Ok(())
}

fn analyze(args: &AnalysisArgs, execution: Execution) -> Result<Analyses> {
    let dataset = load_dataset(&args.data)?;
    analysis::analyze(&dataset, &groups(&args.thresholds), &analysis_config(&args.thresholds, execution))
}

fn run_tables(args: &AnalysisArgs, execution: Execution, names: &[&str]) -> Result<()> {
    let analyses = analyze(args, execution)?;
    emit(&build_tables(&analyses, names)?, args.out.as_deref(), args.format)
}

/// Replaces a dataset's circuits with routes traced through one toy model per snapshot.
fn trace_dataset(dataset: &Dataset, args: &TraceArgs, execution: Execution) -> Result<Dataset> {
    let g = dataset.geometry();
    let base = ToyModelConfig {
        num_layers: g.num_layers as usize,
        num_heads: g.num_heads as usize,
        d_model: g.num_heads as usize * args.head_dim,
        d_ff: args.d_ff,
        vocab_size: args.vocab,
        weight_seed: args.seed,
    };
    let snapshots = dataset.snapshots();
    let facts: Vec<_> = dataset.manifest.facts().collect();
    let jobs: Vec<(usize, usize)> = (0..snapshots.len())
        .flat_map(|s| (0..facts.len()).map(move |f| (s, f)))
        .collect();
    let models = snapshots
        .iter()
        .enumerate()
        .map(|(i, _)| {
            ToyModel::new(ToyModelConfig {
                weight_seed: args.seed.wrapping_add(i as u64),
                ..base.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<Vec<ActivationRecord>> = par::try_map(execution, &jobs, |&(s, f)| {
        tracer::trace_fact(&models[s], facts[f], snapshots[s], args.theta_ifr)
    })?;
    let mut manifest = dataset.manifest.clone();
    manifest
        .provenance
        .insert("tracer".into(), format!("toy theta_ifr={} seed={}", args.theta_ifr, args.seed));
    Dataset::new(manifest, records.into_iter().flatten().collect(), dataset.logits.clone())
}

fn trace_tokens(args: &TraceArgs) -> Result<String> {
    let model = ToyModel::new(ToyModelConfig {
        num_layers: args.layers,
        num_heads: args.heads,
        d_model: args.heads * args.head_dim,
        d_ff: args.d_ff,
        vocab_size: args.vocab,
        weight_seed: args.seed,
    })?;
    if let Some(&bad) = args.tokens.iter().find(|&&t| t >= args.vocab) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", args.vocab)));
    }
    let graph = model.trace(&args.tokens)?;
    Ok(tracer::prune_routes(&graph, args.theta_ifr)?.to_table())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn trace_toy(args: &TraceArgs, execution: Execution) -> Result<()> {
    match &args.data {
        Some(data) => {
            let out = args
                .out
                .as_ref()
                .ok_or_else(|| Error::Input("--out is required when tracing a dataset".into()))?;
            let traced = trace_dataset(&load_dataset(data)?, args, execution)?;
            write_dataset(&traced, out)?;
            println!("traced {} records into {}", traced.circuits.len(), out.display());
        }
        None => {
            let table = trace_tokens(args)?;
            match &args.out {
                Some(out) => write_file(&out.join("route.txt"), &table)?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn run_all(args: &RunAllArgs, execution: Execution) -> Result<()> {
    let synth = generate_synthetic(&SyntheticConfig {
        seed: args.seed,
        thresholds: Thresholds {
            head: args.thresholds.theta_role,
            ffn: args.thresholds.theta_role_ffn,
        },
        ..SyntheticConfig::default()
    })?;
    let data_dir = args.out.join("data");
    write_dataset(&synth.dataset, &data_dir)?;
    write_file(&data_dir.join("ground_truth.csv"), &synth.truth_csv())?;

    let analyses = analysis::analyze(
        &synth.dataset,
        &groups(&args.thresholds),
        &analysis_config(&args.thresholds, execution),
    )?;
    report::emit_report(&analyses, &args.out.join("report"), args.format)?;

    let route = trace_tokens(&TraceArgs {
        data: None,
        tokens: vec![3, 1, 4, 1, 5],
        theta_ifr: args.theta_ifr,
        seed: args.seed,
        layers: 2,
        heads: 2,
        head_dim: 4,
        d_ff: 16,
        vocab: 64,
        out: None,
    })?;
    write_file(&args.out.join("trace").join("route.txt"), &route)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let exec = execution(cli);
    match &cli.command {
        Command::Validate { data } => {
            let d = load_dataset(data)?;
            println!(
                "ok: {} snapshots, {} relations, {} facts, {} circuit records, {} logit records",
                d.manifest.snapshots.len(),
                d.manifest.relations.len(),
                d.manifest.facts().count(),
                d.circuits.len(),
                d.logits.len()
            );
            Ok(())
        }
        Command::Synth(args) => {
            let s = generate_synthetic(&args.config())?;
            write_dataset(&s.dataset, &args.out)?;
            write_file(&args.out.join("ground_truth.csv"), &s.truth_csv())?;
            println!("wrote {}", args.out.display());
            Ok(())
        }
        Command::TraceToy(args) => trace_toy(args, exec),
        Command::Classify(a) => run_tables(a, exec, &[report::ROLE_COUNTS, report::ROLE_ASSIGNMENTS]),
        Command::Iou(a) => run_tables(a, exec, &[report::IOU]),
        Command::Switches(a) => run_tables(
            a,
            exec,
            &[
                report::SWITCHES,
                report::SWITCHES_PER_PAIR,
                report::SWITCHES_CUMULATIVE,
                report::SWITCHES_PER_LAYER,
            ],
        ),
        Command::Markov(a) => run_tables(a, exec, &[report::MARKOV]),
        Command::Probe(a) => run_tables(a, exec, &[report::ACCURACY, report::TEMPLATE_SCORES, report::FACT_VALIDITY]),
        Command::Report(a) => run_tables(a, exec, &report::ALL_TABLES),
        Command::RunAll(args) => run_all(args, exec),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
