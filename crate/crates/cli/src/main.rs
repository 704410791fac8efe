//! `tbvlm`: data generation, training, evaluation and report generation.
//!
//! Exit status is 0 on success, 1 when the work itself fails and 2 for
//! usage errors (clap's own convention). Every random choice is driven by
//! an explicit seed; an absent `--seed` means 0.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use tbvlm_core::corpus::{generate_case, load_dataset, read_pgm, write_dataset, CorpusConfig};
use tbvlm_core::eval::{report_coverage, DEFAULT_THRESHOLD};
use tbvlm_core::fusion::generate_report;
use tbvlm_core::gradcheck::{run_suite, DEFAULT_TRIALS, TOLERANCE};
use tbvlm_core::trainer::{retrieval_accuracy, StepRecord};
use tbvlm_core::{
    describe_model, evaluate_model, finetune, load_checkpoint, pretrain, save_checkpoint, Case, Error, ModelConfig,
    Strategy, TrainConfig, N_PATHOLOGIES,
};

#[derive(Parser)]
#[command(name = "tbvlm", version, about = "Synthetic chest X-ray vision-language model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset: PGM images plus manifest.jsonl.
    GenData(GenData),
    /// Train a fresh model on alignment, masked-image and masked-token objectives.
    Pretrain(Train),
    /// Continue from a checkpoint on captioning, VQA and detection.
    Finetune(Train),
    /// Score a checkpoint on a dataset; writes the metric CSV and ROC JSON.
    Evaluate(Evaluate),
    /// Generate a findings report for one image and note.
    Report(Report),
    /// Run the finite-difference gradient suite.
    Gradcheck(Gradcheck),
    /// Print the shape manifest of a preset.
    Describe(Describe),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// One value for every pathology, or six values in pathology order.
    #[arg(long, num_args = 1..=N_PATHOLOGIES, value_delimiter = ',')]
    prevalence: Option<Vec<f64>>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Starting checkpoint; required for finetune.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Held-out dataset for periodic evaluation (overrides `eval_dir`).
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Write every step record here as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    out_roc: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Also generate a greedy report per case and count pathology coverage.
    #[arg(long)]
    reports: bool,
    /// Also report image/text retrieval over the first N cases.
    #[arg(long)]
    retrieval: Option<usize>,
}

#[derive(Args)]
struct Report {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    note: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Sample among the K most likely tokens instead of decoding greedily.
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Describe {
    #[arg(long, value_parser = ["paper", "desk"])]
    preset: String,
}

/// A failure with the flag or file it concerns.
struct Failure(String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(e.to_string())
    }
}

fn context(flag: &str) -> impl Fn(Error) -> Failure + '_ {
    move |e| Failure(format!("{flag}: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => train(a, false),
        Command::Finetune(a) => train(a, true),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Describe(a) => describe(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn gen_data(a: GenData) -> Result<(), Failure> {
    let mut cfg = CorpusConfig {
        image_size: a.size,
        ..CorpusConfig::default()
    };
    match a.prevalence.as_deref() {
        None => {}
        Some(&[p]) => cfg.prevalence = [p; N_PATHOLOGIES],
        Some(ps) if ps.len() == N_PATHOLOGIES => cfg.prevalence.copy_from_slice(ps),
        Some(ps) => {
            return Err(Failure(format!(
                "--prevalence: expected 1 or {N_PATHOLOGIES} values, got {}",
                ps.len()
            )))
        }
    }
    cfg.validate().map_err(context("--size/--prevalence"))?;
    let cases: Vec<Case> = (0..a.count as u64)
        .map(|i| generate_case(a.seed.wrapping_add(i), &cfg))
        .collect::<Result<_, _>>()?;
    let manifest = write_dataset(&cases, &a.out).map_err(context("--out"))?;
    let positives: Vec<usize> = (0..N_PATHOLOGIES)
        .map(|p| cases.iter().filter(|c| c.labels[p] == 1).count())
        .collect();
    println!("wrote {} cases to {}", cases.len(), manifest.display());
    println!("positives per pathology: {positives:?}");
    Ok(())
}

fn load_cases(flag: &str, dir: &Path) -> Result<Vec<Case>, Failure> {
    let cases = load_dataset(dir).map_err(context(flag))?;
    if cases.is_empty() {
        return Err(Failure(format!("{flag}: {} holds no cases", dir.display())));
    }
    Ok(cases)
}

fn train(a: Train, fine: bool) -> Result<(), Failure> {
    let cfg = TrainConfig::from_json_file(&a.config).map_err(context("--config"))?;
    let cases = load_cases("--data", &a.data)?;
    let eval_dir = a.eval_data.clone().or_else(|| cfg.eval_dir.clone());
    let heldout = match &eval_dir {
        Some(dir) => Some(load_cases("--eval-data", dir)?),
        None => None,
    };
    let mut log_file = match &a.log {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| Failure(format!("--log: {}: {e}", p.display())))?,
        )),
        None => None,
    };
    let mut log_err = None;
    let every = (cfg.steps / 20).max(1);
    let mut log = |r: &StepRecord| {
        if r.step % every == 0 || r.step + 1 == cfg.steps || r.eval.is_some() {
            let parts: Vec<String> = r.components.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
            let mut line = format!("step {:>5}  loss {:.4}  ({})", r.step, r.loss, parts.join(", "));
            if let Some(ev) = &r.eval {
                let parts: Vec<String> = ev.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
                line.push_str(&format!("  eval: {}", parts.join(", ")));
            }
            println!("{line}");
        }
        if let Some(f) = log_file.as_mut() {
            let res = serde_json::to_writer(&mut *f, r)
                .map_err(std::io::Error::from)
                .and_then(|()| f.write_all(b"\n"));
            if let Err(e) = res {
                log_err.get_or_insert(e);
            }
        }
    };
    let started = Instant::now();
    let outcome = if fine {
        let init = a
            .init
            .as_ref()
            .ok_or_else(|| Failure("--init: finetune needs a starting checkpoint".into()))?;
        let model = load_checkpoint(init).map_err(context("--init"))?;
        finetune(&cfg, model, &cases, heldout.as_deref(), &mut log)?
    } else {
        if a.init.is_some() {
            return Err(Failure("--init: pretrain always starts from a fresh model".into()));
        }
        pretrain(&cfg, &cases, heldout.as_deref(), &mut log)?
    };
    if let Some(e) = log_err {
        return Err(Failure(format!("--log: {e}")));
    }
    if let Some(mut f) = log_file {
        f.flush().map_err(|e| Failure(format!("--log: {e}")))?;
    }
    save_checkpoint(&outcome.model, &a.out).map_err(context("--out"))?;
    println!(
        "{} steps in {:.1}s; checkpoint written to {}",
        outcome.history.len(),
        started.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

fn evaluate(a: Evaluate) -> Result<(), Failure> {
    let model = load_checkpoint(&a.ckpt).map_err(context("--ckpt"))?;
    let cases = load_cases("--data", &a.data)?;
    let report = evaluate_model(&model, &cases, a.threshold)?;
    fs::write(&a.out_csv, report.to_csv()).map_err(|e| Failure(format!("--out-csv: {}: {e}", a.out_csv.display())))?;
    fs::write(&a.out_roc, report.roc_json()).map_err(|e| Failure(format!("--out-roc: {}: {e}", a.out_roc.display())))?;
    print!("{report}");
    if let Some(n) = a.retrieval {
        let n = n.min(cases.len());
        let r = retrieval_accuracy(&model, &cases[..n])?;
        println!(
            "retrieval over {} pairs: image->text {:.4}, text->image {:.4} (exact partner {:.4} / {:.4})",
            r.pairs, r.image_to_text, r.text_to_image, r.image_to_text_exact, r.text_to_image_exact
        );
    }
    if a.reports {
        let cov = report_coverage(&model, &cases)?;
        println!(
            "reports naming every present pathology: {}/{} ({:.4}); verbatim findings: {}/{}",
            cov.fully_named,
            cov.cases_with_findings,
            cov.rate(),
            cov.exact,
            cov.cases
        );
    }
    Ok(())
}

fn report(a: Report) -> Result<(), Failure> {
    let model = load_checkpoint(&a.ckpt).map_err(context("--ckpt"))?;
    let image = read_pgm(&a.image).map_err(context("--image"))?;
    let note = fs::read_to_string(&a.note).map_err(|e| Failure(format!("--note: {}: {e}", a.note.display())))?;
    // Condition on the opening sentence, as in training.
    let prompt_text = match note.find('.') {
        Some(i) => &note[..=i],
        None => note.trim(),
    };
    let prompt = model.vocab.tokenize(prompt_text, model.config.l_max);
    let strategy = match a.topk {
        Some(0) => return Err(Failure("--topk: K must be at least 1".into())),
        Some(k) => Strategy::TopK { k, seed: a.seed },
        None => Strategy::Greedy,
    };
    let ids = generate_report(&model, &image, &prompt, model.config.l_max - 1, strategy).map_err(context("--image"))?;
    println!("{}", model.vocab.detokenize(&ids));
    Ok(())
}

fn gradcheck(a: Gradcheck) -> Result<(), Failure> {
    if a.trials == 0 {
        return Err(Failure("--trials: must be at least 1".into()));
    }
    let started = Instant::now();
    let results = run_suite(a.trials, a.seed, |r| {
        println!(
            "{:<22} {:>3} trials  max rel err {:.3e}  {}",
            r.name,
            r.trials,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    })?;
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!(
        "{} checks, {failed} failed (tolerance {TOLERANCE:e}) in {:.1}s",
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure(format!("{failed} gradient checks exceeded tolerance")));
    }
    Ok(())
}

fn describe(a: Describe) -> Result<(), Failure> {
    let cfg = ModelConfig::preset(&a.preset).ok_or_else(|| Failure(format!("--preset: unknown preset {}", a.preset)))?;
    // A closed pipe (e.g. `| head`) is not a failure.
    let _ = write!(std::io::stdout(), "{}", describe_model(&cfg)?);
    Ok(())
}
