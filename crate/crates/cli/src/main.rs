//! Command-line frontend over the blockworld library: corpus generation,
//! training, evaluation, operation sweeps, interpolation plots, phrase
//! clustering, and an interactive REPL.
//!
//! Every subcommand exits zero on success and nonzero on any error.

mod repl;

use blockworld::analysis::{cluster_phrases, interpolate_sweep, sweep, ClusterTable};
use blockworld::checkpoint;
use blockworld::config::{Config, Precision};
use blockworld::data::{
    corpus_vocabulary, generate_corpus, read_dataset, to_samples, InstructionExample,
};
use blockworld::eval::{evaluate, EvalMode, EvalReport, Sample, THETA_HIST_EDGES};
use blockworld::model::Model;
use blockworld::real::Real;
use blockworld::train::train;
use clap::{Parser, Subcommand};
use rand::rngs::StdRng;
use rand::SeedableRng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

type CliError = Box<dyn std::error::Error>;

#[derive(Parser)]
#[command(
    name = "blockworld",
    about = "Train and probe a grounded spatial-instruction model."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic instruction corpus split by scene.
    GenData {
        /// Config file (flat key = value text); defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output prefix; writes <out>.train.txt, <out>.val.txt, <out>.test.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and save the best-validation checkpoint.
    Train {
        /// Dataset prefix produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for model.bwck.
        #[arg(long)]
        checkpoint_dir: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A dataset file (for example <prefix>.test.txt).
        #[arg(long)]
        data: PathBuf,
        /// end-to-end (model picks the source) or gold-source (gold
        /// attention injected).
        #[arg(long, default_value = "end-to-end")]
        mode: String,
    },
    /// Probe one operation over a grid of single-block worlds.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 0-based operation index.
        #[arg(long)]
        op: usize,
        /// Probes per side.
        #[arg(long, default_value_t = 9)]
        grid: usize,
        /// Output prefix; writes <out>.csv and <out>.svg.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep mixtures of two operations and overlay the fields.
    Interp {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Operation at alpha = 1.
        #[arg(long)]
        k1: usize,
        /// Operation at alpha = 0.
        #[arg(long)]
        k2: usize,
        /// Comma-separated mixing weights.
        #[arg(long, value_delimiter = ',', default_value = "0.0,0.25,0.5,0.75,1.0")]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 9)]
        grid: usize,
        /// Output prefix; writes <out>.svg.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster low-entropy utterances by their argmax operation.
    Cluster {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A dataset file with generator metadata.
        #[arg(long)]
        data: PathBuf,
        /// Entropy gate in nats; "inf" admits everything.
        #[arg(long)]
        threshold: f64,
    },
    /// Interactive prediction session over a checkpoint.
    Repl {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), seed, &out),
        Command::Train {
            data,
            config,
            checkpoint_dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            match cfg.precision {
                Precision::F32 => train_cmd::<f32>(cfg, &data, &checkpoint_dir),
                Precision::F64 => train_cmd::<f64>(cfg, &data, &checkpoint_dir),
            }
        }
        Command::Eval {
            checkpoint,
            data,
            mode,
        } => {
            let mode = parse_mode(&mode)?;
            match checkpoint::peek_config(&checkpoint)?.precision {
                Precision::F32 => eval_cmd::<f32>(&checkpoint, &data, mode),
                Precision::F64 => eval_cmd::<f64>(&checkpoint, &data, mode),
            }
        }
        Command::Sweep {
            checkpoint,
            op,
            grid,
            out,
        } => match checkpoint::peek_config(&checkpoint)?.precision {
            Precision::F32 => sweep_cmd::<f32>(&checkpoint, op, grid, &out),
            Precision::F64 => sweep_cmd::<f64>(&checkpoint, op, grid, &out),
        },
        Command::Interp {
            checkpoint,
            k1,
            k2,
            alphas,
            grid,
            out,
        } => match checkpoint::peek_config(&checkpoint)?.precision {
            Precision::F32 => interp_cmd::<f32>(&checkpoint, k1, k2, &alphas, grid, &out),
            Precision::F64 => interp_cmd::<f64>(&checkpoint, k1, k2, &alphas, grid, &out),
        },
        Command::Cluster {
            checkpoint,
            data,
            threshold,
        } => match checkpoint::peek_config(&checkpoint)?.precision {
            Precision::F32 => cluster_cmd::<f32>(&checkpoint, &data, threshold),
            Precision::F64 => cluster_cmd::<f64>(&checkpoint, &data, threshold),
        },
        Command::Repl { checkpoint } => match checkpoint::peek_config(&checkpoint)?.precision {
            Precision::F32 => repl_cmd::<f32>(&checkpoint),
            Precision::F64 => repl_cmd::<f64>(&checkpoint),
        },
    }
}

// ── Shared helpers ──────────────────────────────────────────────────────

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            Ok(Config::parse(&text)?)
        }
        None => Ok(Config::default()),
    }
}

fn parse_mode(raw: &str) -> Result<EvalMode, CliError> {
    match raw {
        "end-to-end" => Ok(EvalMode::EndToEnd),
        "gold-source" => Ok(EvalMode::GoldSource),
        other => Err(format!(
            "unknown mode \"{other}\"; use end-to-end or gold-source"
        )
        .into()),
    }
}

fn dataset_or_error(path: &Path) -> Result<Vec<InstructionExample>, CliError> {
    let examples =
        read_dataset(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if examples.is_empty() {
        return Err(format!("{}: dataset is empty", path.display()).into());
    }
    Ok(examples)
}

const EVAL_BATCH: usize = 64;

fn print_report(report: &EvalReport) {
    println!("examples            {}", report.count);
    println!("source accuracy     {:.4}", report.source_accuracy);
    println!("mean xyz error      {:.4}", report.mean_xyz);
    println!("median xyz error    {:.4}", report.median_xyz);
    println!("mean |theta| error  {:.4}", report.mean_abs_theta);
    println!("median |theta|      {:.4}", report.median_abs_theta);
    let mut hist = String::from("theta histogram    ");
    for (edge, n) in THETA_HIST_EDGES.iter().zip(&report.theta_hist) {
        hist.push_str(&format!(" <{edge}: {n}"));
    }
    if let Some(overflow) = report.theta_hist.last() {
        hist.push_str(&format!(
            " >={}: {overflow}",
            THETA_HIST_EDGES[THETA_HIST_EDGES.len() - 1]
        ));
    }
    println!("{hist}");
}

// ── gen-data ────────────────────────────────────────────────────────────

fn gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let corpus = generate_corpus(&cfg)?;
    let splits = [
        ("train", &corpus.train),
        ("val", &corpus.val),
        ("test", &corpus.test),
    ];
    for (name, examples) in splits {
        let path = split_path(out, name);
        blockworld::data::write_dataset(&path, examples)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        println!("wrote {} ({} examples)", path.display(), examples.len());
    }
    Ok(())
}

fn split_path(prefix: &Path, split: &str) -> PathBuf {
    let mut name = prefix
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".to_string());
    name.push('.');
    name.push_str(split);
    name.push_str(".txt");
    prefix.with_file_name(name)
}

// ── train ───────────────────────────────────────────────────────────────

fn train_cmd<R: Real>(
    cfg: Config,
    data_prefix: &Path,
    checkpoint_dir: &Path,
) -> Result<(), CliError> {
    let train_examples = dataset_or_error(&split_path(data_prefix, "train"))?;
    let val_path = split_path(data_prefix, "val");
    let val_examples = if val_path.exists() {
        read_dataset(&val_path).map_err(|e| format!("{}: {e}", val_path.display()))?
    } else {
        println!("note: {} missing; training without validation", val_path.display());
        Vec::new()
    };
    let vocab = corpus_vocabulary(train_examples.iter());
    let train_set: Vec<Sample> = to_samples(&train_examples, &vocab);
    let val_set: Vec<Sample> = to_samples(&val_examples, &vocab);

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut model: Model<R> = Model::init(cfg, vocab, &mut rng);
    let outcome = train(&mut model, &train_set, &val_set, &mut |line| {
        println!("{line}");
    })?;

    std::fs::create_dir_all(checkpoint_dir)
        .map_err(|e| format!("{}: {e}", checkpoint_dir.display()))?;
    let ckpt = checkpoint_dir.join("model.bwck");
    checkpoint::save(&ckpt, &model)?;
    println!(
        "trained {} steps over {} epochs{}{}",
        outcome.steps,
        outcome.epochs,
        if outcome.early_stopped { " (early stop)" } else { "" },
        if outcome.aborted { " (aborted on non-finite loss)" } else { "" },
    );
    if let Some(best) = outcome.best_val_xyz {
        println!("best validation mean xyz error {best:.4}");
    }
    println!("saved {}", ckpt.display());
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

fn eval_cmd<R: Real>(ckpt: &Path, data: &Path, mode: EvalMode) -> Result<(), CliError> {
    let mut model: Model<R> = checkpoint::load(ckpt)?;
    let examples = dataset_or_error(data)?;
    let samples = to_samples(&examples, &model.vocab);
    let report = evaluate(&mut model, &samples, mode, EVAL_BATCH)?;
    println!(
        "mode                {}",
        match mode {
            EvalMode::EndToEnd => "end-to-end",
            EvalMode::GoldSource => "gold-source",
        }
    );
    print_report(&report);
    Ok(())
}

// ── sweep / interp ──────────────────────────────────────────────────────

fn sweep_cmd<R: Real>(
    ckpt: &Path,
    op: usize,
    grid: usize,
    out: &Path,
) -> Result<(), CliError> {
    let mut model: Model<R> = checkpoint::load(ckpt)?;
    let field = sweep(&mut model, op, grid)?;
    let csv_path = out.with_extension("csv");
    let svg_path = out.with_extension("svg");
    std::fs::write(&csv_path, blockworld::plot::sweep_csv(&field))?;
    std::fs::write(&svg_path, blockworld::plot::sweep_svg(&field))?;
    let n = field.probes.len() as f64;
    let (mdx, mdy, mdz, mdt) = field.probes.iter().fold((0.0, 0.0, 0.0, 0.0), |acc, p| {
        (acc.0 + p.dx / n, acc.1 + p.dy / n, acc.2 + p.dz / n, acc.3 + p.dtheta / n)
    });
    println!("operation {op}: {} probes", field.probes.len());
    println!("mean displacement dx={mdx:.4} dy={mdy:.4} dz={mdz:.4} dtheta={mdt:.4}");
    println!("wrote {}", csv_path.display());
    println!("wrote {}", svg_path.display());
    Ok(())
}

fn interp_cmd<R: Real>(
    ckpt: &Path,
    k1: usize,
    k2: usize,
    alphas: &[f64],
    grid: usize,
    out: &Path,
) -> Result<(), CliError> {
    let mut model: Model<R> = checkpoint::load(ckpt)?;
    let result = interpolate_sweep(&mut model, k1, k2, alphas, grid)?;
    let svg_path = out.with_extension("svg");
    std::fs::write(&svg_path, blockworld::plot::interpolation_svg(&result))?;
    println!(
        "interpolated operations {k1} (alpha=1) and {k2} (alpha=0) over {} alphas",
        result.fields.len()
    );
    println!(
        "rotation monotonicity: {} of {} interior probes violated (informational)",
        result.rotation_violations, result.rotation_checked
    );
    println!("wrote {}", svg_path.display());
    Ok(())
}

// ── cluster ─────────────────────────────────────────────────────────────

fn cluster_cmd<R: Real>(ckpt: &Path, data: &Path, threshold: f64) -> Result<(), CliError> {
    let mut model: Model<R> = checkpoint::load(ckpt)?;
    let examples = dataset_or_error(data)?;
    let table = cluster_phrases(&mut model, &examples, threshold)?;
    print_cluster_table(&table, threshold);
    Ok(())
}

fn print_cluster_table(table: &ClusterTable, threshold: f64) {
    if table.clusters.is_empty() {
        println!(
            "no utterances at or below entropy threshold {threshold} \
             (0 of {} selected); nothing to cluster",
            table.total
        );
        return;
    }
    println!("{:>4} {:>6} {:>7} {:<20} {:>7}  samples", "op", "count", "purity", "majority", "mean-H");
    for c in &table.clusters {
        println!(
            "{:>4} {:>6} {:>7.3} {:<20} {:>7.3}  {}",
            c.op_index,
            c.count,
            c.purity,
            c.majority_relation,
            c.mean_entropy,
            c.sample_phrases
                .iter()
                .map(|p| format!("\"{p}\""))
                .collect::<Vec<_>>()
                .join(" | ")
        );
    }
    println!(
        "selected {} of {} utterances at entropy <= {threshold}; mean purity {:.3}",
        table.selected, table.total, table.mean_purity
    );
}

// ── repl ────────────────────────────────────────────────────────────────

fn repl_cmd<R: Real>(ckpt: &Path) -> Result<(), CliError> {
    let model: Model<R> = checkpoint::load(ckpt)?;
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    repl::run(model, stdin.lock(), &mut stdout)?;
    Ok(())
}
