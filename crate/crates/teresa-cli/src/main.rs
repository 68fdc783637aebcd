//! One binary, seven subcommands: dataset construction, (two-stage)
//! training, stdin rewriting, evaluation, keyword inspection, gradient
//! verification, and the annotated-fraction sweep.
//!
//! Exit codes: 0 success, 1 I/O, 2 schema or configuration, 3 numeric.
//! `TERESA_LOG` (debug|info|warn) controls log verbosity.

use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use teresa_core::autodiff::{
    finite_difference_check, AdamState, Tape, Tensor, DEFAULT_EPS, DEFAULT_MAX_COORDS,
};
use teresa_core::beam::{beam_search, BeamOptions, DEFAULT_BEAM_SIZE};
use teresa_core::checkpoint::{load_checkpoint, load_optimizer, save_checkpoint, save_optimizer};
use teresa_core::model::{encode, Model, TeresaConfig};
use teresa_core::sakd::keyword_scores;
use teresa_core::ssl::io::{read_triplets, write_triplets};
use teresa_core::ssl::{build_dataset, ConstructorConfig, CqrTriplet};
use teresa_core::text::io::{read_lexicon, read_sessions};
use teresa_core::text::pack_input;
use teresa_core::train::{
    evaluate, fraction_sweep, integrated_loss, sweep_csv, train, triplet_vocab, LossOptions,
    TrainConfig, TrainEvent,
};
use teresa_core::{Result, TeresaError};

/// Gradient checks pass below this relative error.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "teresa",
    version,
    about = "Conversational query rewriting: dataset construction, training, decoding, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Construct a triplet dataset from a dialogue corpus
    Construct(ConstructArgs),
    /// Train a model, optionally pre-training on auto-constructed data first
    Train(TrainArgs),
    /// Rewrite line-delimited {"context": [...], "query": "..."} from stdin
    Rewrite(RewriteArgs),
    /// Evaluate a checkpoint on a triplet file
    Eval(EvalArgs),
    /// Dump keyword scores for packed inputs
    Keywords(KeywordsArgs),
    /// Check tape gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Train at several annotated-data fractions and emit CSV
    Sweep(SweepArgs),
}

/// Top-level config file: three optional sections, all keys optional,
/// unknown keys rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CliConfig {
    model: TeresaConfig,
    train: TrainConfig,
    constructor: ConstructorConfig,
}

#[derive(Args)]
struct ConstructArgs {
    /// Dialogue corpus, one session JSON per line
    #[arg(long)]
    corpus: PathBuf,
    /// Part-of-speech lexicon, one "surface TAB TAG[,TAG...]" per line
    #[arg(long)]
    lexicon: PathBuf,
    /// Output triplet file (JSON lines)
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; the constructor section applies
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the constructor seed from the config file
    #[arg(long)]
    seed: Option<u64>,
    /// Construction threads; output is identical for any value
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Annotated triplets to fine-tune on (or train on, single-stage)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Auto-constructed triplets for the pre-training stage
    #[arg(long)]
    pretrain: Option<PathBuf>,
    /// Output directory for checkpoints and logs
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; the model and train sections apply
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dev triplets evaluated at every milestone
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Checkpoint directory to resume from (single-stage only)
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides the train seed from the config file
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides max_steps from the config file
    #[arg(long)]
    max_steps: Option<usize>,
    /// Overrides train_fraction from the config file
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Dev-evaluation threads
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Beam width for dev evaluation
    #[arg(long, default_value_t = DEFAULT_BEAM_SIZE)]
    beam: usize,
    /// Train without the keyword-detection loss and attention bias
    #[arg(long)]
    no_sakd: bool,
    /// Train without the intent-consistency loss
    #[arg(long)]
    no_icc: bool,
}

#[derive(Args)]
struct RewriteArgs {
    /// Checkpoint directory
    #[arg(long)]
    model: PathBuf,
    /// Beam width
    #[arg(long, default_value_t = DEFAULT_BEAM_SIZE)]
    beam: usize,
    /// Longest rewrite, in tokens
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Decode without the keyword attention bias
    #[arg(long)]
    no_sakd: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory
    #[arg(long)]
    model: PathBuf,
    /// Triplet file to score
    #[arg(long)]
    test: PathBuf,
    /// Per-example JSON lines are written here when given
    #[arg(long)]
    out: Option<PathBuf>,
    /// Decoding threads; output is identical for any value
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Beam width
    #[arg(long, default_value_t = DEFAULT_BEAM_SIZE)]
    beam: usize,
    /// Longest rewrite, in tokens
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Decode without the keyword attention bias
    #[arg(long)]
    no_sakd: bool,
}

#[derive(Args)]
struct KeywordsArgs {
    /// Checkpoint directory
    #[arg(long)]
    model: PathBuf,
    /// Input file of {"context": [...], "query": "..."} JSON lines
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// JSON config file; the model section applies. Without it a tiny
    /// 2-layer model (d_model 32, 2 heads, 4 intents) is checked.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the model, the probe batch, and coordinate sampling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    /// Parameter coordinates sampled
    #[arg(long, default_value_t = DEFAULT_MAX_COORDS)]
    max_coords: usize,
}

#[derive(Args)]
struct SweepArgs {
    /// Annotated triplets to subsample and train on
    #[arg(long)]
    data: PathBuf,
    /// Triplet file each trained model is scored on
    #[arg(long)]
    test: PathBuf,
    /// Comma-separated fractions in (0, 1]
    #[arg(long, default_value = "0.1,0.2,0.5,1.0")]
    fractions: String,
    /// JSON config file; the model and train sections apply
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV is written here when given, otherwise to stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluation threads
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Beam width for evaluation
    #[arg(long, default_value_t = DEFAULT_BEAM_SIZE)]
    beam: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TERESA_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Construct(a) => cmd_construct(a),
        Command::Train(a) => cmd_train(a),
        Command::Rewrite(a) => cmd_rewrite(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Keywords(a) => cmd_keywords(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                TeresaError::Io(_) => 1,
                TeresaError::Schema { .. }
                | TeresaError::Config(_)
                | TeresaError::InvalidInput(_)
                | TeresaError::UncopyableTarget { .. } => 2,
                TeresaError::Numeric(_) | TeresaError::Shape { .. } => 3,
            })
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<CliConfig> {
    let Some(path) = path else {
        return Ok(CliConfig::default());
    };
    let raw = fs::read_to_string(path)?;
    serde_json::from_str(&raw).map_err(|e| TeresaError::Schema {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

/// Prints the post-override configuration; the printed JSON re-loads to the
/// same configuration.
fn echo_config(cfg: &CliConfig) {
    eprintln!("effective config: {}", to_json(cfg));
}

fn cmd_construct(a: ConstructArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    if let Some(seed) = a.seed {
        cfg.constructor.seed = seed;
    }
    echo_config(&cfg);
    let corpus = read_sessions(&a.corpus)?;
    let lexicon = read_lexicon(&a.lexicon)?;
    let (triplets, stats) = build_dataset(&corpus, &cfg.constructor, &lexicon, a.workers)?;
    write_triplets(&a.out, &triplets)?;
    println!("{}", to_json(&stats));
    Ok(())
}

/// One training stage into `dir`: a JSONL step log, a checkpoint directory
/// plus optimizer state at every milestone, and optional dev metrics in
/// eval.log.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &Model,
    data: &[CqrTriplet],
    tcfg: &TrainConfig,
    loss_opts: &LossOptions,
    adam: Option<AdamState>,
    dir: &Path,
    dev: Option<&[CqrTriplet]>,
    beam_opts: &BeamOptions,
    workers: usize,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut step_log = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("train.log"))?,
    );
    let mut eval_log: Option<BufWriter<fs::File>> = None;
    let mut last_ckpt: Option<PathBuf> = None;
    let result = train(model, data, tcfg, loss_opts, adam, &mut |event| {
        match event {
            TrainEvent::Step(record) => {
                writeln!(
                    step_log,
                    "{}",
                    serde_json::to_string(record).expect("plain data serializes")
                )?;
            }
            TrainEvent::Milestone { step, adam } => {
                step_log.flush()?;
                let ckpt = dir.join(format!("step-{step:06}"));
                save_checkpoint(&ckpt, model, step)?;
                save_optimizer(&ckpt, model, adam)?;
                last_ckpt = Some(ckpt);
                if let Some(dev) = dev {
                    let (report, _) = evaluate(model, dev, beam_opts, workers)?;
                    log::info!("step {step} dev metrics: {report:?}");
                    let log = match &mut eval_log {
                        Some(l) => l,
                        None => eval_log.insert(BufWriter::new(
                            fs::OpenOptions::new()
                                .create(true)
                                .append(true)
                                .open(dir.join("eval.log"))?,
                        )),
                    };
                    writeln!(
                        log,
                        "{}",
                        serde_json::to_string(&serde_json::json!({
                            "step": step,
                            "report": report,
                        }))
                        .expect("plain data serializes")
                    )?;
                    log.flush()?;
                }
            }
        }
        Ok(())
    });
    step_log.flush()?;
    match result {
        Ok((report, _)) => {
            println!("{}", to_json(&report));
            Ok(())
        }
        Err(e) => {
            if let Some(ckpt) = last_ckpt {
                eprintln!("last good checkpoint: {}", ckpt.display());
            }
            Err(e)
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = a.max_steps {
        cfg.train.max_steps = steps;
    }
    if let Some(fraction) = a.train_fraction {
        cfg.train.train_fraction = fraction;
    }
    if let Some(path) = &a.data {
        cfg.train.finetune_path = Some(path.clone());
    }
    if let Some(path) = &a.pretrain {
        cfg.train.pretrain_path = Some(path.clone());
    }
    cfg.model.validate()?;
    cfg.train.validate()?;

    let finetune_path = cfg.train.finetune_path.clone().ok_or_else(|| {
        TeresaError::Config("no training data: pass --data or set train.finetune_path".into())
    })?;
    let finetune = read_triplets(&finetune_path)?;
    let pretrain = match &cfg.train.pretrain_path {
        Some(path) => Some(read_triplets(path)?),
        None => None,
    };
    let dev = match &a.dev {
        Some(path) => Some(read_triplets(path)?),
        None => None,
    };

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("effective-config.json"), to_json(&cfg) + "\n")?;
    echo_config(&cfg);

    let loss_opts = LossOptions {
        use_sakd: !a.no_sakd,
        use_icc: !a.no_icc,
    };
    let beam_opts = BeamOptions {
        beam_size: a.beam,
        use_sakd: !a.no_sakd,
        ..BeamOptions::default()
    };

    if let Some(resume) = &a.resume {
        if pretrain.is_some() {
            return Err(TeresaError::Config(
                "--resume continues a single stage; drop --pretrain".into(),
            ));
        }
        let (model, step) = load_checkpoint(resume)?;
        let adam = load_optimizer(resume, &model)?.ok_or_else(|| {
            TeresaError::Config(format!(
                "{} has no optimizer.bin; cannot resume",
                resume.display()
            ))
        })?;
        log::info!("resuming from {} at step {step}", resume.display());
        return run_stage(
            &model, &finetune, &cfg.train, &loss_opts, Some(adam), &a.out,
            dev.as_deref(), &beam_opts, a.workers,
        );
    }

    let mut slices: Vec<&[CqrTriplet]> = vec![&finetune];
    if let Some(p) = &pretrain {
        slices.push(p);
    }
    if let Some(d) = &dev {
        slices.push(d);
    }
    let vocab = triplet_vocab(&slices, 1)?;
    let model = Model::new(cfg.model.clone(), vocab, cfg.train.seed)?;

    match &pretrain {
        Some(pre) => {
            log::info!("pre-training on {} triplets", pre.len());
            run_stage(
                &model, pre, &cfg.train, &loss_opts, None, &a.out.join("pretrain"),
                dev.as_deref(), &beam_opts, a.workers,
            )?;
            log::info!("fine-tuning on {} triplets", finetune.len());
            run_stage(
                &model, &finetune, &cfg.train, &loss_opts, None, &a.out.join("finetune"),
                dev.as_deref(), &beam_opts, a.workers,
            )
        }
        None => run_stage(
            &model, &finetune, &cfg.train, &loss_opts, None, &a.out,
            dev.as_deref(), &beam_opts, a.workers,
        ),
    }
}

/// One line of rewrite/keywords input.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RewriteRequest {
    context: Vec<String>,
    query: String,
}

fn cmd_rewrite(a: RewriteArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.model)?;
    let opts = BeamOptions {
        beam_size: a.beam,
        max_len: a.max_len,
        use_sakd: !a.no_sakd,
    };
    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout().lock();
    let mut out = BufWriter::new(stdout);
    for (i, line) in stdin.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request: RewriteRequest = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("line {}: {e}", i + 1);
                continue;
            }
        };
        match beam_search(&model, &request.context, &request.query, &opts) {
            Ok(result) => {
                if result.truncated {
                    log::warn!("line {}: length budget hit before the terminator", i + 1);
                }
                writeln!(out, "{}", result.rewrite)?;
                out.flush()?;
            }
            Err(e) => eprintln!("line {}: {e}", i + 1),
        }
    }
    out.flush()?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.model)?;
    let testset = read_triplets(&a.test)?;
    let opts = BeamOptions {
        beam_size: a.beam,
        max_len: a.max_len,
        use_sakd: !a.no_sakd,
    };
    let (report, examples) = evaluate(&model, &testset, &opts, a.workers)?;
    if let Some(path) = &a.out {
        let mut f = BufWriter::new(fs::File::create(path)?);
        for e in &examples {
            writeln!(f, "{}", serde_json::to_string(e).expect("plain data serializes"))?;
        }
        f.flush()?;
    }
    println!("{}", to_json(&report));
    Ok(())
}

fn cmd_keywords(a: KeywordsArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.model)?;
    let raw = fs::read_to_string(&a.input)?;
    let mut out = BufWriter::new(std::io::stdout().lock());
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let request: RewriteRequest =
            serde_json::from_str(line).map_err(|e| TeresaError::Schema {
                path: a.input.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        let packed = pack_input(&request.context, &request.query, &model.vocab)?;
        let tape = Tape::inference();
        let enc = encode(&tape, &packed, &model.params, &model.config, &mut None)?;
        let score = keyword_scores(&tape, &enc.h_c, &model.params)?;
        let tokens: Vec<&String> = packed.surfaces[packed.context_range.clone()].iter().collect();
        let scores = score.values().clone();
        let mut ranked: Vec<(&String, f64)> =
            tokens.iter().copied().zip(scores.iter().copied()).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        writeln!(
            out,
            "{}",
            serde_json::to_string(&serde_json::json!({
                "tokens": tokens,
                "scores": scores,
                "ranked": ranked,
            }))
            .expect("plain data serializes")
        )?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut model_cfg = match &a.config {
        Some(_) => load_config(a.config.as_ref())?.model,
        None => TeresaConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            max_len: 64,
            n_intents: 4,
            dropout: 0.0,
        },
    };
    // The check compares against the deterministic loss.
    model_cfg.dropout = 0.0;
    model_cfg.validate()?;
    let (triplets, _) = teresa_core::synth::synth_dataset(8, a.seed, 1)?;
    let batch: Vec<CqrTriplet> = triplets.into_iter().take(4).collect();
    let vocab = triplet_vocab(&[&batch], 1)?;
    let model = Model::new(model_cfg, vocab, a.seed)?;
    let params = model.params.all();
    let loss_opts = LossOptions::default();
    let f = |tape: &Tape| -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for t in &batch {
            let lb = integrated_loss(tape, t, &model, &loss_opts, &mut None)?;
            acc = Some(match acc {
                Some(prev) => tape.add(&prev, &lb.total)?,
                None => lb.total,
            });
        }
        Ok(tape.mul_scalar(&acc.expect("non-empty batch"), 1.0 / batch.len() as f64))
    };
    let report = finite_difference_check(f, &params, a.eps, a.max_coords, a.seed)?;
    let worst = &model.params.named()[report.worst_param].0;
    let pass = report.max_rel_err < GRADCHECK_TOL;
    println!(
        "{}",
        to_json(&serde_json::json!({
            "max_rel_err": report.max_rel_err,
            "coords_checked": report.coords_checked,
            "worst_param": worst,
            "worst_coord": report.worst_coord,
            "analytic": report.analytic,
            "numeric": report.numeric,
            "pass": pass,
        }))
    );
    if pass {
        Ok(())
    } else {
        Err(TeresaError::Numeric(format!(
            "max relative error {:.3e} at {worst}[{}] exceeds {GRADCHECK_TOL:e}",
            report.max_rel_err, report.worst_coord
        )))
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let cfg = load_config(a.config.as_ref())?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    echo_config(&cfg);
    let fractions: Vec<f64> = a
        .fractions
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| TeresaError::Config(format!("bad fraction {s:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    let data = read_triplets(&a.data)?;
    let testset = read_triplets(&a.test)?;
    let vocab = triplet_vocab(&[&data, &testset], 1)?;
    let model = Model::new(cfg.model.clone(), vocab, cfg.train.seed)?;
    let beam_opts = BeamOptions {
        beam_size: a.beam,
        ..BeamOptions::default()
    };
    let rows = fraction_sweep(
        &model,
        &data,
        &testset,
        &fractions,
        &cfg.train,
        &LossOptions::default(),
        &beam_opts,
        a.workers,
    )?;
    let csv = sweep_csv(&rows);
    match &a.out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
