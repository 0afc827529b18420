use std::path::PathBuf;
use std::process::ExitCode;

use caupsi::chain::Task;
use caupsi::checkpoint::Checkpoint;
use caupsi::config::RunConfig;
use caupsi::data::generate::{empirical_marginals, CLASS_COUNTS};
use caupsi::data::{der_dbr_mutual_information, generate, mutual_information, Dataset, GeneratorConfig, Split};
use caupsi::model::Ablation;
use caupsi::run::{self, max_pairwise_linf, psi_class_means};
use caupsi::{CaupsiError, Result};
use clap::{Args, Parser, Subcommand};

/// Samples drawn for the label-model mutual information diagnostic.
const MI_SAMPLES: usize = 10_000;

#[derive(Parser)]
#[command(name = "caupsi", version, about = "Multi-view driver state recognition with a causal task chain")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-view dataset.
    GenData(GenArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Export the conditioning signal per sample and per class.
    PsiExport(EvalArgs),
    /// Print parameter counts per module.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2898)]
    n: usize,
    #[arg(long = "causal-strength", default_value_t = 1.0)]
    causal_strength: f64,
    #[arg(long, default_value_t = 1.0)]
    difficulty: f64,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Mechanisms to remove: ctpc, crossview, chain, facebody.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    batch: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn gen_data(a: GenArgs) -> Result<()> {
    let cfg = GeneratorConfig {
        n_samples: a.n,
        seed: a.seed,
        causal_strength: a.causal_strength,
        difficulty: a.difficulty,
        separation: a.separation,
        ..Default::default()
    };
    cfg.validate()?;
    run::prepare_out_dir(&a.out, a.force)?;
    let manifest = generate(&cfg, &a.out)?;
    let labels: Vec<[usize; 4]> = manifest.rows.iter().map(|r| r.labels).collect();
    let splits = [Split::Train, Split::Val, Split::Test].map(|s| manifest.rows.iter().filter(|r| r.split == s).count());
    println!("samples = {}", labels.len());
    println!("split_sizes = train {} val {} test {}", splits[0], splits[1], splits[2]);
    println!("marginals (empirical / target):");
    let emp = empirical_marginals(&labels);
    for t in Task::ALL {
        let total: usize = CLASS_COUNTS[t.index()].iter().sum();
        let cells: Vec<String> = t
            .class_names()
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let target = CLASS_COUNTS[t.index()][k] as f64 / total as f64;
                format!("{name} {:.3}/{:.3}", emp[t.index()][k], target)
            })
            .collect();
        println!("  {}: {}", t.name(), cells.join("  "));
    }
    let der: Vec<usize> = labels.iter().map(|l| l[2]).collect();
    let dbr: Vec<usize> = labels.iter().map(|l| l[3]).collect();
    println!("mi_der_dbr_dataset = {:.6} nats", mutual_information(&der, &dbr, 5, 7));
    println!(
        "mi_der_dbr_{}k = {:.6} nats",
        MI_SAMPLES / 1000,
        der_dbr_mutual_information(&cfg, MI_SAMPLES)
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    if let Some(e) = a.epochs {
        rc.train.max_epochs = e;
    }
    if !a.ablate.is_empty() {
        let items: Vec<&str> = a.ablate.iter().map(String::as_str).collect();
        rc.ablation = Ablation::parse_list(&items)?;
    }
    for kv in &a.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CaupsiError::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        rc.set(k.trim(), v)?;
    }
    rc.validate()?;
    run::prepare_out_dir(&a.out, a.force)?;
    let outcome = run::train_run(&rc, &a.data, &a.out, |line| println!("{line}"))?;
    println!(
        "best_epoch = {} val_mean_acc = {:.6} domain_k = {} run_dir = {}",
        outcome.best_epoch,
        outcome.best_val.mean_accuracy,
        outcome.domains.k,
        a.out.display()
    );
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).ok_or_else(|| CaupsiError::Config(format!("unknown split '{s}' (expected train, val or test)")))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let ev = run::evaluate_checkpoint(&ck, &data, split, a.batch.max(1))?;
    std::fs::create_dir_all(&a.out).map_err(|e| CaupsiError::io(&a.out, e))?;
    run::write_eval_reports(&ev.report, &a.out)?;
    print!("{}", ev.report.to_text());
    Ok(())
}

fn psi_cmd(a: EvalArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    if ck.ablation.psi_forced_zero() {
        // refuse before touching the dataset
        return Err(CaupsiError::Contract(format!(
            "checkpoint was trained with ablation '{}'; there is no conditioning signal to export",
            ck.ablation
        )));
    }
    let data = Dataset::load(&a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CaupsiError::io(&a.out, e))?;
    let ev = run::psi_export(&ck, &data, split, &a.out, a.batch.max(1))?;
    let means = psi_class_means(&ev.encoded.labels, &ev.predictions.psi, ev.model.cfg.d_psi);
    println!("samples = {}", ev.encoded.len());
    for t in Task::ALL {
        println!("max_class_mean_linf_{} = {:.6}", t.name(), max_pairwise_linf(&means[t.index()]));
    }
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    print!("{}", run::report_text(&ck));
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CAUPSI_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CaupsiError::Config(format!("CAUPSI_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CaupsiError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = init_threads().and_then(|_| match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::PsiExport(a) => psi_cmd(a),
        Cmd::Report(a) => report_cmd(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
