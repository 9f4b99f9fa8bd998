use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmgc::checkpoint::Checkpoint;
use mmgc::config::{RunConfig, Variant};
use mmgc::data::{self, GenParams, Modality, SplitPart};
use mmgc::error::{Error, Result};
use mmgc::gradcheck;
use mmgc::metrics::MetricsReport;
use mmgc::scalar::Scalar;
use mmgc::text::Vocabulary;
use mmgc::train::{self, AblationResults, Dataset, TrainOptions};

/// Multimodal image+text fusion classifier: data generation, training,
/// ablation, evaluation, and gradient verification.
#[derive(Parser)]
#[command(name = "mmgc", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset and print its Bayes-oracle accuracies.
    GenData(GenDataArgs),
    /// Train one variant on a dataset directory.
    Train(TrainArgs),
    /// Run the full m1/m2/m3 ablation with multi-seed trials.
    Ablate(AblateArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Run the 64-bit finite-difference verification suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for manifest, images, split file, and vocabulary.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Fraction of samples with a class-uninformative image.
    #[arg(long = "a-img", default_value_t = 0.3)]
    a_img: f64,
    /// Fraction of samples with a class-uninformative report.
    #[arg(long = "a-txt", default_value_t = 0.3)]
    a_txt: f64,
    /// Pixel noise standard deviation.
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    /// Generation seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Class prior P(GC).
    #[arg(long, default_value_t = 0.5)]
    prior: f64,
    /// Seed for the 8:1:1 split (defaults to the generation seed; the
    /// shuffle stream is independent of per-sample generation either way).
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Optional key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model variant: m1 (image only), m2 (text only), m3 (fusion).
    #[arg(long, default_value = "m3")]
    variant: String,
    /// Trial seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pin the peak learning rate to 1e-5.
    #[arg(long = "paper-lr", default_value_t = false)]
    paper_lr: bool,
    /// Resume from an existing checkpoint's weights.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trials per variant.
    #[arg(long)]
    trials: Option<usize>,
    /// Base seed; trial i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for JSON/CSV tables.
    #[arg(long, default_value = "ablation_out")]
    out: PathBuf,
    /// Worker threads for fanning out trials (results are merged in
    /// (variant, seed) order regardless).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long = "paper-lr", default_value_t = false)]
    paper_lr: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Pass threshold on the max relative error.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn precision_is_f64() -> bool {
    std::env::var("MMGC_PRECISION").map(|v| v == "f64").unwrap_or(false)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => {
            if precision_is_f64() {
                cmd_train::<f64>(args)
            } else {
                cmd_train::<f32>(args)
            }
        }
        Command::Ablate(args) => {
            if precision_is_f64() {
                cmd_ablate::<f64>(args)
            } else {
                cmd_ablate::<f32>(args)
            }
        }
        Command::Eval(args) => {
            if precision_is_f64() {
                cmd_eval::<f64>(args)
            } else {
                cmd_eval::<f32>(args)
            }
        }
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn load_config(path: &Option<PathBuf>, paper_lr: bool) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::io(format!("reading config {}", p.display()), e))?;
            RunConfig::parse_str(&text)?
        }
        None => RunConfig::default(),
    };
    if paper_lr {
        cfg.train.peak_lr = 1e-5;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.effective.txt");
    fs::write(&path, cfg.to_key_values())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, body + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let params = GenParams {
        n_samples: args.n,
        class_prior_gc: args.prior,
        ambiguous_image_frac: args.a_img,
        ambiguous_text_frac: args.a_txt,
        noise_sigma: args.sigma,
        seed: args.seed,
    };
    let samples = data::generate(&params)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = data::split_ids(&ids, args.split_seed.unwrap_or(args.seed))?;
    fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    data::save_dataset(&samples, &split, &args.out)?;
    let vocab =
        Vocabulary::build(&samples.iter().map(|s| s.report.as_str()).collect::<Vec<_>>())?;
    vocab.save(&args.out.join("vocab.txt"))?;

    #[derive(serde::Serialize)]
    struct BayesOut {
        image: f64,
        text: f64,
        fused: f64,
    }
    #[derive(serde::Serialize)]
    struct GenOut {
        n: usize,
        out: String,
        train: usize,
        val: usize,
        test: usize,
        vocab_size: usize,
        bayes_accuracy: BayesOut,
    }
    let out = GenOut {
        n: samples.len(),
        out: args.out.display().to_string(),
        train: split.train.len(),
        val: split.val.len(),
        test: split.test.len(),
        vocab_size: vocab.len(),
        bayes_accuracy: BayesOut {
            image: data::bayes_accuracy(&params, Modality::Image)?,
            text: data::bayes_accuracy(&params, Modality::Text)?,
            fused: data::bayes_accuracy(&params, Modality::Fused)?,
        },
    };
    println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
    Ok(())
}

#[derive(serde::Serialize)]
struct TrainReport {
    variant: Variant,
    seed: u64,
    precision: &'static str,
    best_epoch: usize,
    epochs_run: usize,
    epoch_val: Vec<MetricsReport>,
    test: MetricsReport,
}

fn cmd_train<T: Scalar>(args: TrainArgs) -> Result<()> {
    let variant = Variant::parse(&args.variant)?;
    let cfg = load_config(&args.config, args.paper_lr)?;
    let ds = Dataset::load_dir(&args.data)?;
    let resume = match &args.resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    echo_config(&cfg, &args.out)?;

    let outcome = train::train_with_options::<T>(
        &cfg,
        variant,
        &ds,
        args.seed,
        TrainOptions { resume_from: resume.as_ref(), ..TrainOptions::default() },
    )?;
    outcome.checkpoint.save(&args.out.join("model.ckpt"))?;

    let report = TrainReport {
        variant,
        seed: args.seed,
        precision: T::NAME,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        epoch_val: outcome.epoch_val,
        test: outcome.test,
    };
    write_json(&args.out.join("metrics.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(())
}

fn csv_row(fields: &[String]) -> String {
    let mut row = fields.join(",");
    row.push_str("\r\n");
    row
}

fn ablation_summary_csv(results: &AblationResults) -> String {
    let mut out = csv_row(&[
        "variant".into(),
        "accuracy_mean".into(),
        "accuracy_std".into(),
        "precision_mean".into(),
        "precision_std".into(),
        "recall_mean".into(),
        "recall_std".into(),
        "f1_mean".into(),
        "f1_std".into(),
    ]);
    for row in &results.rows {
        let m = &row.summary.mean;
        let s = &row.summary.std;
        out.push_str(&csv_row(&[
            row.variant.label().to_uppercase(),
            format!("{:.6}", m.accuracy),
            format!("{:.6}", s.accuracy),
            format!("{:.6}", m.precision),
            format!("{:.6}", s.precision),
            format!("{:.6}", m.recall),
            format!("{:.6}", s.recall),
            format!("{:.6}", m.f1),
            format!("{:.6}", s.f1),
        ]));
    }
    out
}

fn ablation_trials_csv(results: &AblationResults) -> String {
    let header = [
        "variant", "trial", "seed", "accuracy", "precision", "recall", "f1", "recall_vcd",
        "recall_gc",
    ];
    let mut out = csv_row(&header.map(String::from));
    let metric_fields = |m: &MetricsReport| {
        [
            format!("{:.6}", m.accuracy),
            format!("{:.6}", m.precision),
            format!("{:.6}", m.recall),
            format!("{:.6}", m.f1),
            format!("{:.6}", m.recall_per_class.vcd),
            format!("{:.6}", m.recall_per_class.gc),
        ]
    };
    for row in &results.rows {
        for (i, (seed, report)) in row.seeds.iter().zip(&row.reports).enumerate() {
            let mut fields =
                vec![row.variant.label().to_uppercase(), i.to_string(), seed.to_string()];
            fields.extend(metric_fields(report));
            out.push_str(&csv_row(&fields));
        }
        for (tag, m) in [("mean", &row.summary.mean), ("std", &row.summary.std)] {
            let mut fields = vec![row.variant.label().to_uppercase(), tag.to_string(), String::new()];
            fields.extend(metric_fields(m));
            out.push_str(&csv_row(&fields));
        }
    }
    out
}

fn cmd_ablate<T: Scalar>(args: AblateArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.paper_lr)?;
    let trials = args.trials.unwrap_or(cfg.train.trials);
    let jobs = args.jobs.unwrap_or_else(|| {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    });
    let ds = Dataset::load_dir(&args.data)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    echo_config(&cfg, &args.out)?;

    let results = train::run_ablation::<T>(&cfg, &ds, trials, args.seed, jobs)?;
    write_json(&args.out.join("ablation.json"), &results)?;
    let summary_path = args.out.join("ablation_summary.csv");
    fs::write(&summary_path, ablation_summary_csv(&results))
        .map_err(|e| Error::io(format!("writing {}", summary_path.display()), e))?;
    let trials_path = args.out.join("ablation_trials.csv");
    fs::write(&trials_path, ablation_trials_csv(&results))
        .map_err(|e| Error::io(format!("writing {}", trials_path.display()), e))?;
    println!("{}", serde_json::to_string_pretty(&results).expect("serializable"));
    Ok(())
}

fn cmd_eval<T: Scalar>(args: EvalArgs) -> Result<()> {
    let part = SplitPart::parse(&args.split)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let ds = Dataset::load_dir(&args.data)?;
    let report = train::evaluate::<T>(&ckpt, &ds, part)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let rows = gradcheck::run_component_suite()?;
    let mut failing = Vec::new();
    for row in &rows {
        let status = if row.max_rel_err <= args.tol { "pass" } else { "FAIL" };
        println!("{:<20} {:>12.3e}  {status}", row.name, row.max_rel_err);
        if row.max_rel_err > args.tol {
            failing.push(row.name);
        }
    }
    let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max);
    if failing.is_empty() {
        println!(
            "gradcheck: {} components, max rel err {worst:.3e}, tol {:.1e} -> PASS",
            rows.len(),
            args.tol
        );
        Ok(())
    } else {
        println!(
            "gradcheck: max rel err {worst:.3e} exceeds tol {:.1e} -> FAIL ({})",
            args.tol,
            failing.join(", ")
        );
        Err(Error::numeric(format!("gradient check failed: {}", failing.join(", "))))
    }
}
