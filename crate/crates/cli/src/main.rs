use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Args, Parser, Subcommand};
use reluattn::bench::{run_bench, BenchReport, BenchSpec};
use reluattn::data::{self, resolve_data_dir, Split, DATA_DIR_ENV};
use reluattn::gradcheck::{self, CellReport};
use reluattn::init_stats::{run_stats, write_stats_csv, StatsSpec};
use reluattn::sweep::{run_sweep, CellOutcome, SweepCell, SweepSpec};
use reluattn::train::{train, EpochRecord, Outputs, TrainConfig, TrainData};
use reluattn::{Activation, Error, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_IO: u8 = 3;

/// Scaled point-wise attention experiments: training, sweeps, benchmarks and checks.
#[derive(Parser, Debug)]
#[command(name = "reluattn", version, after_help = after_help())]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

fn after_help() -> String {
    format!(
        "Environment:\n  {DATA_DIR_ENV}  dataset root used when --data-dir is absent\n\n\
         Exit codes: 0 success, 1 usage, 2 numerical failure, 3 I/O"
    )
}

#[derive(Args, Debug)]
struct Global {
    /// Dataset root holding the MNIST IDX files or the CIFAR-10 binary batches
    #[arg(long, global = true, value_name = "DIR")]
    data_dir: Option<PathBuf>,
    /// Directory that receives records, checkpoints and reports
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out_dir: PathBuf,
    /// Overrides the seed of the config (train), of every cell (sweep) or of the random draws
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweep cells, evaluation and chunked kernels
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model from a JSON config
    Train(TrainArgs),
    /// Run a grid of trainings from a JSON sweep spec and collect a CSV
    Sweep(SweepArgs),
    /// Time chunked attention and the reassociated linear kernel
    Bench(BenchArgs),
    /// Compare reverse-mode gradients with central differences
    Gradcheck(GradcheckArgs),
    /// Monte-Carlo mean attention weight at initialization
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Print the resolved config and step counts, then exit
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_name = "FILE")]
    spec: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
    seq_lens: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    #[arg(long, value_delimiter = ',', default_value = "softmax,relu")]
    activations: Vec<Activation>,
    #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
    chunk_sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, value_delimiter = ',', default_value = "64,256,1024,4096")]
    linear_seq_lens: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    linear_head_dim: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Restrict to matching cells, e.g. `relu`, `relu/ln1` or `softmax/ln0/g1`
    #[arg(long, value_name = "FILTER")]
    config: Option<String>,
    /// Test hook: perturb one analytic derivative so the check must fail
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long, value_delimiter = ',', default_value = "64")]
    head_dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    seq_lens: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "softmax,relu,identity")]
    activations: Vec<Activation>,
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    alphas: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else if e.is_io() {
        EXIT_IO
    } else {
        EXIT_USAGE
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn print_epoch(r: &EpochRecord) {
    eprintln!(
        "epoch {:>3}  loss {:.4}  eval acc {:.4}  {:.1}s",
        r.epoch, r.train_loss, r.eval_accuracy, r.seconds
    );
}

fn cmd_train(g: &Global, args: &TrainArgs) -> Result<u8> {
    let mut cfg = TrainConfig::from_json(&read_text(&args.config)?)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if args.dry_run {
        let full = cfg.dataset.split_len(Split::Train);
        let examples = cfg.train_subset.map_or(full, |n| n.min(full));
        cfg.check_steps(examples)?;
        let total = cfg.total_steps(examples);
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        println!("parameters:      {}", cfg.vit.param_count());
        println!("train examples:  {examples}");
        println!("steps per epoch: {}", cfg.steps_per_epoch(examples));
        println!("total steps:     {total}");
        println!("warmup steps:    {}", cfg.warmup(total));
        return Ok(0);
    }
    let data_dir = resolve_data_dir(g.data_dir.as_deref())?;
    let data = TrainData::load(&cfg, &data_dir)?;
    let out = g.out_dir.join(stem(&args.config));
    eprintln!(
        "training {} on {} ({} examples, {} steps) into {}",
        cfg.vit.attention.label(),
        cfg.dataset,
        data.train.len(),
        cfg.total_steps(data.train.len()),
        out.display()
    );
    let record = train(
        &cfg,
        &data,
        &Outputs {
            dir: Some(out.clone()),
            on_epoch: Some(print_epoch),
        },
    )?;
    println!(
        "final accuracy {:.4}  core seconds {:.1}  record {}",
        record.final_accuracy,
        record.core_seconds,
        out.join(reluattn::train::RECORD_FILE).display()
    );
    Ok(0)
}

fn cmd_sweep(g: &Global, args: &SweepArgs) -> Result<u8> {
    let mut spec = SweepSpec::from_json(&read_text(&args.spec)?)?;
    if let Some(seed) = g.seed {
        spec.seeds = vec![seed];
    }
    let data_dir = resolve_data_dir(g.data_dir.as_deref())?;
    let train_split = data::load(spec.base.dataset, &data_dir, Split::Train)?;
    let test = data::load(spec.base.dataset, &data_dir, Split::Test)?;
    let out = g.out_dir.join(stem(&args.spec));
    let total = spec.cardinality();
    eprintln!("sweep of {total} cells into {}", out.display());
    let done = AtomicUsize::new(0);
    let progress = |cell: &SweepCell, outcome: &CellOutcome| {
        let n = done.fetch_add(1, Ordering::SeqCst) + 1;
        let status = match outcome {
            CellOutcome::Trained(r) => format!("accuracy {:.4} in {:.0} core s", r.final_accuracy, r.core_seconds),
            CellOutcome::Skipped(r) => format!("accuracy {:.4} (already recorded)", r.final_accuracy),
            CellOutcome::Failed(e) => format!("FAILED: {e}"),
        };
        eprintln!("[{n}/{total}] {}: {status}", cell.key());
    };
    let result = run_sweep(&spec, &train_split, &test, &out, &progress)?;
    println!("{}", result.csv_path.display());
    let mut code = 0;
    for (cell, e) in result.failures() {
        eprintln!("cell {} failed: {e}", cell.key());
        code = code.max(exit_code(e));
    }
    Ok(code)
}

fn print_bench(report: &BenchReport) {
    println!(
        "{:<10} {:>6} {:>6} {:>7} {:>4} {:>4} {:>4} {:>12} {:>12} {:>10}",
        "activation", "L", "chunk", "chunks", "add", "max", "sum", "median_s", "mono_s", "max_dev"
    );
    for e in &report.chunked {
        println!(
            "{:<10} {:>6} {:>6} {:>7} {:>4} {:>4} {:>4} {:>12.3e} {:>12.3e} {:>10.2e}",
            e.activation.to_string(),
            e.seq_len,
            e.chunk_size,
            e.stats.chunks,
            e.stats.cross_chunk_additive_reductions,
            e.stats.cross_chunk_max_reductions,
            e.stats.cross_chunk_sum_reductions,
            e.median_seconds,
            e.monolithic_median_seconds,
            e.max_deviation
        );
    }
    println!();
    println!(
        "{:>6} {:>4} {:>14} {:>14} {:>10}",
        "L", "d", "q(kᵀv)_s", "(qkᵀ)v_s", "max_dev"
    );
    for e in &report.linear {
        println!(
            "{:>6} {:>4} {:>14.3e} {:>14.3e} {:>10.2e}",
            e.seq_len, e.head_dim, e.reordered_median_seconds, e.unreordered_median_seconds, e.max_deviation
        );
    }
}

fn cmd_bench(g: &Global, args: &BenchArgs) -> Result<u8> {
    let spec = BenchSpec {
        seq_lens: args.seq_lens.clone(),
        head_dim: args.head_dim,
        activations: args.activations.clone(),
        chunk_sizes: args.chunk_sizes.clone(),
        reps: args.reps,
        linear_seq_lens: args.linear_seq_lens.clone(),
        linear_head_dim: args.linear_head_dim,
        seed: g.seed.unwrap_or(0),
    };
    let report = run_bench(&spec)?;
    print_bench(&report);
    create_dir(&g.out_dir)?;
    let path = g.out_dir.join("bench.json");
    write_text(&path, &serde_json::to_string_pretty(&report)?)?;
    eprintln!("wrote {}", path.display());
    Ok(0)
}

fn print_gradcheck(reports: &[CellReport]) {
    println!(
        "{:<22} {:>5} {:>10} {:>12}  {:<24} result",
        "cell", "draw", "margin", "max_rel_err", "worst parameter"
    );
    for r in reports {
        println!(
            "{:<22} {:>5} {:>10} {:>12.3e}  {:<24} {}",
            r.cell,
            r.draw,
            r.kink_margin.map_or("-".into(), |m| format!("{m:.3e}")),
            r.max_relative_error,
            r.worst_param,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
}

fn cmd_gradcheck(g: &Global, args: &GradcheckArgs) -> Result<u8> {
    let all = gradcheck::full_matrix();
    let cells = match &args.config {
        Some(f) => gradcheck::filter_cells(&all, f)?,
        None => all,
    };
    let opts = gradcheck::Options {
        corrupt: args.corrupt,
        first_draw: g.seed.unwrap_or(0),
    };
    let reports = gradcheck::run(&cells, opts)?;
    print_gradcheck(&reports);
    create_dir(&g.out_dir)?;
    write_text(
        &g.out_dir.join("gradcheck.json"),
        &serde_json::to_string_pretty(&reports)?,
    )?;
    let failed: Vec<&CellReport> = reports.iter().filter(|r| !r.passed).collect();
    if failed.is_empty() {
        println!("all {} cells below {:e}", reports.len(), gradcheck::TOLERANCE);
        return Ok(0);
    }
    for r in &failed {
        eprintln!(
            "gradcheck failed for {}: parameter {} has relative error {:.3e}",
            r.cell, r.worst_param, r.max_relative_error
        );
    }
    Ok(EXIT_NUMERICAL)
}

fn cmd_stats(g: &Global, args: &StatsArgs) -> Result<u8> {
    let spec = StatsSpec {
        head_dims: args.head_dims.clone(),
        seq_lens: args.seq_lens.clone(),
        activations: args.activations.clone(),
        alphas: args.alphas.clone(),
        trials: args.trials,
        seed: g.seed.unwrap_or(0),
    };
    let rows = run_stats(&spec)?;
    println!(
        "{:<10} {:>5} {:>4} {:>6} {:>13} {:>11} {:>13}",
        "activation", "alpha", "d", "L", "mean", "std_err", "gaussian_ref"
    );
    for r in &rows {
        println!(
            "{:<10} {:>5} {:>4} {:>6} {:>13.6e} {:>11.3e} {:>13}",
            r.activation.to_string(),
            r.alpha.map_or("-".into(), |a| a.to_string()),
            r.d,
            r.seq_len,
            r.mean,
            r.std_error,
            r.gaussian_reference.map_or("-".into(), |v| format!("{v:.6e}"))
        );
    }
    create_dir(&g.out_dir)?;
    let path = g.out_dir.join("stats.csv");
    write_stats_csv(&rows, &path)?;
    eprintln!("wrote {}", path.display());
    Ok(0)
}

fn run(cli: &Cli) -> Result<u8> {
    if let Some(jobs) = cli.global.jobs {
        if jobs == 0 {
            return Err(Error::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot size the worker pool: {e}")))?;
    }
    match &cli.command {
        Command::Train(a) => cmd_train(&cli.global, a),
        Command::Sweep(a) => cmd_sweep(&cli.global, a),
        Command::Bench(a) => cmd_bench(&cli.global, a),
        Command::Gradcheck(a) => cmd_gradcheck(&cli.global, a),
        Command::Stats(a) => cmd_stats(&cli.global, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
