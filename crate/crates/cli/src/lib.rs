//! Command-line driver: ingestion, training, evaluation, grading,
//! cross-validation, paraphrase robustness and verification.

mod config;

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cdln::checkpoint::{checkpoint_load, checkpoint_save};
use cdln::data::{
    asap_prompt_specs, find_spec, load_asap_tsv, load_essay_texts, prompt_stats, split_train_test,
    Essay, PromptSpec,
};
use cdln::metrics::{bucket_average, denormalize_and_round, fmt_real, robustness_delta, GradePair};
use cdln::model::{Body, GradingModel, ModelKind, Network};
use cdln::text::{build_vocab, TokenizedEssay};
use cdln::training::{cross_validate, evaluate, fit_model};
use cdln::verify::gradcheck_suite;
use cdln::Tensor;

use config::usage;
pub use config::{RunConfig, Usage};

#[derive(Args, Debug)]
struct Common {
    /// Config file of key=value lines ('#' starts a comment).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restrict to one prompt (essay set).
    #[arg(long, global = true)]
    prompt: Option<u8>,
    /// Use at most this many essays, in file order.
    #[arg(long, global = true)]
    limit: Option<usize>,
    /// Log progress to stderr (-vv for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Args, Debug)]
struct TrainFlags {
    /// ASAP-format TSV file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// cdln, svm, rnn, ann or lstm.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    /// Text-format word vectors used to initialize the embeddings.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a TSV file and print per-prompt statistics.
    Ingest {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one model on a stratified split and save a checkpoint.
    Train {
        #[command(flatten)]
        flags: TrainFlags,
        /// Checkpoint to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a TSV file with a checkpoint.
    Evaluate {
        /// Checkpoint file.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Grade a single essay text file.
    Grade {
        /// Checkpoint file.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        essay: Option<PathBuf>,
    },
    /// K-fold cross-validation.
    Crossval {
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        k_folds: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Grade aligned original and paraphrased essays and compare.
    Robustness {
        /// Checkpoint file.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        original: Option<PathBuf>,
        #[arg(long)]
        modified: Option<PathBuf>,
        #[arg(long)]
        bucket: Option<usize>,
        /// Write the bucket averages as two-column text.
        #[arg(long)]
        buckets_out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient checks.
    Gradcheck,
    /// Print the best bracketing and span scores for one sentence.
    ParseDebug {
        sentence: String,
        /// Take the composition network from this cdln checkpoint instead
        /// of a fresh one drawn from the seed.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Parser, Debug)]
#[command(
    name = "cdln",
    version,
    about = "Essay grading with a collaborative deep learning network"
)]
struct Invocation {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Runs the tool on `argv` (program name first) and returns the exit status:
/// 0 on success, 1 on runtime or data failures, 2 on usage errors.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let inv = match Invocation::try_parse_from(argv) {
        Ok(inv) => inv,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match inv.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::new()
        .parse_filters(level)
        .format_timestamp(None)
        .is_test(cfg!(test))
        .try_init();
    match run(inv) {
        Ok(code) => code,
        Err(e) => {
            if e.downcast_ref::<Usage>().is_some() {
                eprintln!("error: {e:#}");
                eprintln!("run with --help for usage");
                2
            } else {
                eprintln!("error: {e:#}");
                1
            }
        }
    }
}

fn resolve(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.load_file(path)?;
    }
    for s in &common.set {
        cfg.assign(s)?;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    let path = |key: &'static str, p: &Option<PathBuf>, flags: &mut Vec<(&str, String)>| {
        if let Some(p) = p {
            flags.push((key, p.display().to_string()));
        }
    };
    match command {
        Command::Ingest { data } => path("data", data, &mut flags),
        Command::Train { flags: t, out } => {
            train_flags(t, &mut flags);
            path("out", out, &mut flags);
        }
        Command::Crossval {
            flags: t,
            k_folds,
            report,
        } => {
            train_flags(t, &mut flags);
            if let Some(k) = k_folds {
                flags.push(("k_folds", k.to_string()));
            }
            path("report", report, &mut flags);
        }
        Command::Evaluate {
            model,
            data,
            report,
        } => {
            path("checkpoint", model, &mut flags);
            path("data", data, &mut flags);
            path("report", report, &mut flags);
        }
        Command::Grade { model, essay } => {
            path("checkpoint", model, &mut flags);
            path("essay", essay, &mut flags);
        }
        Command::Robustness {
            model,
            original,
            modified,
            bucket,
            buckets_out,
        } => {
            path("checkpoint", model, &mut flags);
            path("original", original, &mut flags);
            path("modified", modified, &mut flags);
            path("buckets_out", buckets_out, &mut flags);
            if let Some(b) = bucket {
                flags.push(("bucket", b.to_string()));
            }
        }
        Command::ParseDebug { model, .. } => path("checkpoint", model, &mut flags),
        Command::Gradcheck => {}
    }
    if let Some(seed) = common.seed {
        flags.push(("seed", seed.to_string()));
    }
    if let Some(p) = common.prompt {
        flags.push(("prompt", p.to_string()));
    }
    if let Some(l) = common.limit {
        flags.push(("limit", l.to_string()));
    }
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_flags(t: &TrainFlags, out: &mut Vec<(&'static str, String)>) {
    if let Some(d) = &t.data {
        out.push(("data", d.display().to_string()));
    }
    if let Some(m) = &t.model {
        out.push(("model", m.clone()));
    }
    if let Some(e) = t.epochs {
        out.push(("epochs", e.to_string()));
    }
    if let Some(v) = t.learning_rate {
        out.push(("learning_rate", v.to_string()));
    }
    if let Some(v) = t.batch_size {
        out.push(("batch_size", v.to_string()));
    }
    if let Some(v) = t.dropout_rate {
        out.push(("dropout_rate", v.to_string()));
    }
    if let Some(p) = &t.embeddings {
        out.push(("embeddings_path", p.display().to_string()));
    }
}

fn run(inv: Invocation) -> Result<i32> {
    let cfg = resolve(&inv.common, &inv.command)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "# resolved configuration")?;
    for (k, v) in cfg.entries() {
        writeln!(out, "{k}={v}")?;
    }
    writeln!(out, "# end configuration")?;
    let specs = asap_prompt_specs();
    match inv.command {
        Command::Ingest { .. } => ingest(&cfg, &specs, &mut out),
        Command::Train { .. } => train(&cfg, &specs, &mut out),
        Command::Evaluate { .. } => evaluate_cmd(&cfg, &specs, &mut out),
        Command::Grade { .. } => grade(&cfg, &specs, &mut out),
        Command::Crossval { .. } => crossval(&cfg, &specs, &mut out),
        Command::Robustness { .. } => robustness(&cfg, &specs, &mut out),
        Command::Gradcheck => gradcheck(&mut out),
        Command::ParseDebug { sentence, .. } => parse_debug(&cfg, &sentence, &mut out),
    }
}

fn load_essays(cfg: &RunConfig, specs: &[PromptSpec]) -> Result<Vec<Essay>> {
    let path = cfg.require_path("data")?;
    let load = load_asap_tsv(path, specs).with_context(|| format!("loading {}", path.display()))?;
    let mut essays = load.essays;
    if let Some(p) = cfg.prompt {
        find_spec(specs, p).map_err(|e| usage!("{e}"))?;
        essays.retain(|e| e.prompt_id == p);
    }
    if let Some(limit) = cfg.limit {
        essays.truncate(limit);
    }
    if essays.is_empty() {
        bail!("{}: no usable essays", path.display());
    }
    Ok(essays)
}

fn ingest(cfg: &RunConfig, specs: &[PromptSpec], out: &mut impl Write) -> Result<i32> {
    let path = cfg.require_path("data")?;
    let load = load_asap_tsv(path, specs).with_context(|| format!("loading {}", path.display()))?;
    writeln!(
        out,
        "essays={} skipped_rows={} clamped_rows={}",
        load.essays.len(),
        load.skipped_rows,
        load.clamped_rows
    )?;
    for s in prompt_stats(&load.essays) {
        if cfg.prompt.is_some_and(|p| p != s.prompt_id) {
            continue;
        }
        writeln!(
            out,
            "prompt={} essays={} mean_words={:.2} min_score={} max_score={} mean_score={:.4}",
            s.prompt_id, s.essays, s.mean_words, s.min_score, s.max_score, s.mean_score
        )?;
    }
    Ok(0)
}

fn train(cfg: &RunConfig, specs: &[PromptSpec], out: &mut impl Write) -> Result<i32> {
    let out_path = cfg.require_path("out")?.to_path_buf();
    let essays = load_essays(cfg, specs)?;
    let split = split_train_test(&essays, cfg.split_ratio, cfg.seed)?;
    writeln!(
        out,
        "train_essays={} heldout_essays={}",
        split.train.len(),
        split.test.len()
    )?;
    let tc = cfg.train_config(cfg.model);
    let mut epoch_err = None;
    let (model, _) = fit_model(
        cfg.model,
        &cfg.settings,
        &split.train,
        &tc,
        &mut |epoch, loss| {
            if let Err(e) = writeln!(out, "epoch={epoch} loss={}", fmt_real(Some(loss))) {
                epoch_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = epoch_err {
        return Err(e.into());
    }
    if !split.test.is_empty() {
        let (report, _) = evaluate(&model, &split.test, specs)?;
        writeln!(out, "heldout {}", report.record())?;
    }
    checkpoint_save(&model, &out_path)?;
    writeln!(out, "checkpoint={}", out_path.display())?;
    Ok(0)
}

fn evaluate_cmd(cfg: &RunConfig, specs: &[PromptSpec], out: &mut impl Write) -> Result<i32> {
    let model = checkpoint_load(cfg.require_path("checkpoint")?)?;
    let essays = load_essays(cfg, specs)?;
    let (report, _) = evaluate(&model, &essays, specs)?;
    let text = format!("model={}\n{report}\n", model.kind);
    write!(out, "{text}")?;
    if let Some(path) = cfg.path("report") {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(0)
}

fn grade(cfg: &RunConfig, specs: &[PromptSpec], out: &mut impl Write) -> Result<i32> {
    let model = checkpoint_load(cfg.require_path("checkpoint")?)?;
    let prompt = cfg
        .prompt
        .ok_or_else(|| usage!("missing required --prompt"))?;
    let spec = find_spec(specs, prompt).map_err(|e| usage!("{e}"))?;
    let path = cfg.require_path("essay")?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let tokens = TokenizedEssay::from_text(&String::from_utf8_lossy(&bytes));
    if tokens.is_empty() {
        bail!("{}: essay has no words", path.display());
    }
    let normalized = model.predict(&tokens, spec)?;
    writeln!(
        out,
        "score={} normalized={}",
        denormalize_and_round(normalized, spec),
        fmt_real(Some(normalized))
    )?;
    Ok(0)
}

fn crossval(cfg: &RunConfig, specs: &[PromptSpec], out: &mut impl Write) -> Result<i32> {
    let essays = load_essays(cfg, specs)?;
    let tc = cfg.train_config(cfg.model);
    let mut epoch_err = None;
    let cv = cross_validate(
        cfg.model,
        &cfg.settings,
        &essays,
        &tc,
        specs,
        &mut |fold, epoch, loss| {
            if let Err(e) = writeln!(
                out,
                "fold={} epoch={epoch} loss={}",
                fold + 1,
                fmt_real(Some(loss))
            ) {
                epoch_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = epoch_err {
        return Err(e.into());
    }
    let mut text = String::new();
    for f in &cv.folds {
        text.push_str(&format!(
            "fold={} train={} test={} {}\n",
            f.fold + 1,
            f.train_size,
            f.test_size,
            f.report.record()
        ));
    }
    text.push_str(&format!("mean {}\n", cv.mean.record()));
    write!(out, "{text}")?;
    if let Some(path) = cfg.path("report") {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(0)
}

fn robustness(cfg: &RunConfig, specs: &[PromptSpec], out: &mut impl Write) -> Result<i32> {
    let model = checkpoint_load(cfg.require_path("checkpoint")?)?;
    let original = load_essay_texts(cfg.require_path("original")?)?;
    let modified = load_essay_texts(cfg.require_path("modified")?)?;
    if original.len() != modified.len() {
        bail!(
            "original has {} essays but modified has {}",
            original.len(),
            modified.len()
        );
    }
    if original.is_empty() {
        bail!("no essays to compare");
    }
    let grade = |text: &str, prompt: u8| -> Result<f64> {
        let spec = find_spec(specs, prompt)?;
        let tokens = TokenizedEssay::from_text(text);
        if tokens.is_empty() {
            bail!("an essay of prompt {prompt} has no words");
        }
        Ok(f64::from(denormalize_and_round(
            model.predict(&tokens, spec)?,
            spec,
        )))
    };
    let mut pairs = Vec::with_capacity(original.len());
    for (row, (o, m)) in original.iter().zip(&modified).enumerate() {
        if o.essay_id != m.essay_id || o.prompt_id != m.prompt_id {
            bail!(
                "row {}: files are not aligned (original essay {} of prompt {}, modified essay {} of prompt {})",
                row + 1,
                o.essay_id,
                o.prompt_id,
                m.essay_id,
                m.prompt_id
            );
        }
        let pair = GradePair {
            original: grade(&o.text, o.prompt_id)
                .with_context(|| format!("essay {}", o.essay_id))?,
            modified: grade(&m.text, m.prompt_id)
                .with_context(|| format!("essay {}", m.essay_id))?,
        };
        writeln!(
            out,
            "essay_id={} original={} modified={}",
            o.essay_id, pair.original, pair.modified
        )?;
        pairs.push(pair);
    }
    writeln!(
        out,
        "pairs={} delta={}",
        pairs.len(),
        fmt_real(Some(robustness_delta(&pairs)?))
    )?;
    let orig: Vec<f64> = pairs.iter().map(|p| p.original).collect();
    let modi: Vec<f64> = pairs.iter().map(|p| p.modified).collect();
    let mut table = String::new();
    for (a, b) in bucket_average(&orig, cfg.bucket)?
        .iter()
        .zip(bucket_average(&modi, cfg.bucket)?)
    {
        table.push_str(&format!("{a:.6} {b:.6}\n"));
    }
    writeln!(
        out,
        "# bucket averages of {} essays: original modified",
        cfg.bucket
    )?;
    write!(out, "{table}")?;
    if let Some(path) = cfg.path("buckets_out") {
        fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(0)
}

fn gradcheck(out: &mut impl Write) -> Result<i32> {
    let reports = gradcheck_suite(Default::default())?;
    let mut failed = 0;
    for r in &reports {
        writeln!(out, "{}", r.summary())?;
        failed += usize::from(!r.passed);
    }
    writeln!(out, "checks={} failed={failed}", reports.len())?;
    Ok(if failed == 0 { 0 } else { 1 })
}

fn parse_debug(cfg: &RunConfig, sentence: &str, out: &mut impl Write) -> Result<i32> {
    let tokens = TokenizedEssay::from_text(sentence);
    if tokens.is_empty() {
        return Err(usage!("the sentence has no words"));
    }
    let model = match cfg.path("checkpoint") {
        Some(path) => checkpoint_load(path)?,
        None => {
            let vocab = build_vocab(std::slice::from_ref(&tokens), 1)?;
            GradingModel::build(ModelKind::Cdln, cfg.settings.clone(), vocab, cfg.seed)?
        }
    };
    let (net, params) = match &model.body {
        Body::Neural {
            network: Network::Cdln(net),
            params,
        } => (net, params),
        _ => bail!("parse-debug needs a cdln model, found {}", model.kind),
    };
    let ids = model.encode(&tokens).ids;
    let rows: Vec<Vec<f64>> = ids
        .iter()
        .map(|&i| net.embeddings.row(params, i).to_vec())
        .collect();
    let parse = net
        .rvnn
        .parse_sentence(params, &Tensor::from_rows(&rows)?)?;
    let words = &tokens.tokens[..parse.chart.len()];
    writeln!(out, "tokens={}", words.join(" "))?;
    writeln!(out, "tree={}", parse.chart.tree().render(words))?;
    writeln!(out, "root_score={:+.6}", parse.root_score)?;
    write!(out, "{}", parse.chart.describe(words))?;
    Ok(0)
}
