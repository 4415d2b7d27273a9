//! The `rcnn` command line: train / eval / tag / nn / gradcheck / schedule.
//!
//! All reports go to stdout with fixed 6-decimal formatting, so identical
//! seeds, flags, and inputs produce byte-identical output; progress streams
//! and warnings go to stderr. Exit codes: 0 success, 1 input/data error,
//! 2 numerical failure, 3 gradient-check failure.

use std::fs;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::corpus::{
    build_lexicon, describe_label, encode_dialogues, parse_swda, summary_report, synth_corpus,
    tokenize, Agent, ColumnMap, Dialogue, EncodedDialogue, LabelSet,
};
use crate::discourse::{
    discourse_vector, greedy_decode, nearest_neighbours, Metric, Recurrence,
};
use crate::error::{Error, Result};
use crate::hcnn::schedule_for;
use crate::model_file;
use crate::numerics::Sigmoid;
use crate::training::{
    evaluate_with, grad_check, init_model, micro_fixture, train, EvalReport, Hyperparams, Model,
    OptimizerKind, Predictor,
};

#[derive(Parser, Debug)]
#[command(
    name = "rcnn",
    version,
    about = "Dialogue-act tagging with a hierarchical convolutional sentence model \
             and a speaker-conditioned recurrent discourse model"
)]
struct Cli {
    /// Worker threads (0 = all available cores). Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write it to a model file.
    Train(TrainArgs),
    /// Evaluate a model: accuracy, baselines, per-label table.
    Eval(EvalArgs),
    /// Tag a transcript (`A<TAB>text` lines) with dialogue acts.
    Tag(TagArgs),
    /// Nearest neighbours of a dialogue in discourse-vector space.
    Nn(NnArgs),
    /// Check analytic gradients against finite differences on a micro model.
    Gradcheck(GradcheckArgs),
    /// Print the kernel-size schedule for a sentence length.
    Schedule(ScheduleArgs),
}

/// Where dialogues come from: a corpus directory or the synthetic generator.
#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Directory of conversation CSVs (searched recursively).
    #[arg(long, conflicts_with = "synthetic")]
    corpus: Option<PathBuf>,
    /// Test-split manifest: one conversation id per line, `#` comments.
    /// Defaults to the bundled 19-conversation split.
    #[arg(long, requires = "corpus")]
    manifest: Option<PathBuf>,
    /// Column-name mapping file with `field=column` lines
    /// (fields: conversation, caller, act, text).
    #[arg(long, requires = "corpus")]
    colmap: Option<PathBuf>,
    /// Generate the synthetic keyword corpus instead of reading one.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 200)]
    synth_dialogues: usize,
    #[arg(long, default_value_t = 5)]
    synth_acts: usize,
    #[arg(long, default_value_t = 30)]
    synth_vocab: usize,
}

impl DataArgs {
    fn load(&self, seed: u64) -> Result<(Vec<Dialogue>, Vec<Dialogue>, LabelSet)> {
        if self.synthetic {
            let (train, test, labels) =
                synth_corpus(self.synth_dialogues, self.synth_acts, self.synth_vocab, seed);
            Ok((train, test, labels))
        } else {
            let dir = self
                .corpus
                .as_deref()
                .ok_or_else(|| Error::invalid("one of --corpus or --synthetic is required"))?;
            let columns = match &self.colmap {
                Some(path) => ColumnMap::from_file(path)?,
                None => ColumnMap::default(),
            };
            let parsed = parse_swda(dir, self.manifest.as_deref(), &columns)?;
            if parsed.skipped_rows > 0 {
                eprintln!("warning: skipped {} malformed corpus rows", parsed.skipped_rows);
            }
            Ok((parsed.train, parsed.test, parsed.labels))
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output model path.
    #[arg(long, short = 'o')]
    out: PathBuf,
    #[arg(long, default_value_t = 25)]
    embed_dim: usize,
    #[arg(long, default_value_t = 100)]
    hidden_dim: usize,
    /// Truncation depth d.
    #[arg(long, default_value_t = 2)]
    depth: usize,
    /// L2 regularisation strength λ.
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    /// One of adam, lbfgs, sgd. For lbfgs prefer full batch:
    /// `--batch-size 0 --lbfgs-steps 150`.
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 10)]
    lbfgs_history: usize,
    /// Quasi-Newton iterations per mini-batch.
    #[arg(long, default_value_t = 20)]
    lbfgs_steps: usize,
    /// Learning rate for adam (default 0.05) or sgd (default 0.5).
    #[arg(long)]
    lr: Option<f64>,
    /// Dialogues per mini-batch (0 = full batch).
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    max_epochs: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    max_sentence_len: usize,
    /// Tokens seen fewer times than this map to UNK.
    #[arg(long, default_value_t = 2)]
    min_count: usize,
    /// One of logistic, tanh.
    #[arg(long, default_value = "logistic")]
    sigmoid: String,
    /// One of windowed, full.
    #[arg(long, default_value = "windowed")]
    recurrence: String,
    /// Epochs without held-out improvement before stopping.
    #[arg(long, default_value_t = 8)]
    patience: usize,
}

impl TrainArgs {
    fn hyperparams(&self) -> Result<Hyperparams> {
        let optimizer = match self.optimizer.as_str() {
            "lbfgs" => OptimizerKind::Lbfgs {
                history: self.lbfgs_history,
                steps_per_batch: self.lbfgs_steps,
            },
            "adam" => OptimizerKind::Adam {
                lr: self.lr.unwrap_or(0.05),
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            "sgd" => OptimizerKind::Sgd { lr: self.lr.unwrap_or(0.5) },
            other => return Err(Error::invalid(format!("unknown optimizer `{other}`"))),
        };
        Ok(Hyperparams {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            depth: self.depth,
            l2_lambda: self.l2,
            optimizer,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            seed: self.seed,
            max_sentence_len: self.max_sentence_len,
            min_count: self.min_count,
            sigmoid: Sigmoid::parse(&self.sigmoid)?,
            recurrence: Recurrence::parse(&self.recurrence)?,
            patience: self.patience,
        })
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, short = 'm')]
    model: PathBuf,
    /// One of model, majority, oracle.
    #[arg(long, default_value = "model")]
    predictor: String,
    /// Seed used to regenerate a synthetic corpus.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TagArgs {
    #[arg(long, short = 'm')]
    model: PathBuf,
    /// Transcript file; stdin when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct NnArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, short = 'm')]
    model: PathBuf,
    /// Dialogue id to query (self excluded from the ranking).
    #[arg(long, conflicts_with = "query_file")]
    query: Option<String>,
    /// Transcript file to use as the query dialogue.
    #[arg(long)]
    query_file: Option<PathBuf>,
    #[arg(long, short = 'k', default_value_t = 4)]
    k: usize,
    /// One of cosine, euclidean.
    #[arg(long, default_value = "cosine")]
    metric: String,
    /// Condition discourse vectors on predicted labels instead of gold ones.
    #[arg(long)]
    predicted: bool,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    /// Sentence length to print the schedule for.
    #[arg(long, short = 'l', conflicts_with = "table")]
    length: Option<usize>,
    /// Print a table of schedules for lengths 1..=N.
    #[arg(long)]
    table: Option<usize>,
}

/// Parses arguments and runs the selected command, returning the process
/// exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage problems are input errors; --help/--version are not.
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if cli.threads > 0 {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()
        {
            eprintln!("warning: could not configure {} threads: {e}", cli.threads);
        }
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let outcome: Result<i32> = match cli.command {
        Command::Train(args) => cmd_train(&args, &mut out).map(|_| 0),
        Command::Eval(args) => cmd_eval(&args, &mut out).map(|_| 0),
        Command::Tag(args) => cmd_tag(&args, &mut out).map(|_| 0),
        Command::Nn(args) => cmd_nn(&args, &mut out).map(|_| 0),
        Command::Gradcheck(args) => cmd_gradcheck(&args, &mut out),
        Command::Schedule(args) => cmd_schedule(&args, &mut out).map(|_| 0),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let hp = args.hyperparams()?;
    let (train_dialogues, test_dialogues, labels) = args.data.load(args.seed)?;
    if train_dialogues.is_empty() {
        return Err(Error::data("no training dialogues".to_string()));
    }
    write!(out, "{}", summary_report(&train_dialogues, &test_dialogues, &labels)).ok();

    let lexicon = build_lexicon(&train_dialogues, hp.embed_dim, hp.min_count, hp.seed)?;
    let model = init_model(&hp, lexicon, labels, 2, hp.seed.wrapping_add(1))?;
    let (encoded_train, truncated) =
        encode_dialogues(&train_dialogues, &model.lexicon, hp.max_sentence_len);
    if truncated > 0 {
        eprintln!(
            "warning: truncated {truncated} utterances to {} words",
            hp.max_sentence_len
        );
    }
    let (encoded_test, _) =
        encode_dialogues(&test_dialogues, &model.lexicon, hp.max_sentence_len);

    eprintln!("epoch\tmean_loss\theld_out_loss\twall_secs");
    let trained = train(model, &encoded_train, &mut |e| {
        eprintln!(
            "{}\t{:.6}\t{:.6}\t{:.3}",
            e.epoch, e.mean_loss, e.held_out_loss, e.wall_secs
        );
    })?;
    model_file::save(&trained, &args.out)?;

    writeln!(out, "model_path\t{}", args.out.display()).ok();
    writeln!(out, "n_params\t{}", trained.n_params()).ok();
    writeln!(out, "vocab_size\t{}", trained.lexicon.vocab_size()).ok();
    writeln!(out, "train_dialogues\t{}", train_dialogues.len()).ok();
    writeln!(out, "test_dialogues\t{}", test_dialogues.len()).ok();
    writeln!(out, "epochs_trained\t{}", trained.meta.epochs_trained).ok();
    writeln!(out, "final_loss\t{:.6}", trained.meta.final_loss).ok();
    if !encoded_test.iter().all(|d| d.is_empty()) {
        let report = evaluate_with(&trained, &encoded_test, Predictor::Model)?;
        writeln!(out, "test_accuracy\t{:.6}", report.accuracy_pct).ok();
        writeln!(out, "majority_baseline\t{:.6}", report.majority_pct).ok();
        writeln!(out, "random_baseline\t{:.6}", report.random_pct).ok();
    }
    Ok(())
}

fn check_label_compatibility(model: &Model, labels: &LabelSet) -> Result<()> {
    if model.labels.names() != labels.names() {
        return Err(Error::data(
            "label set of the data does not match the model's label set".to_string(),
        ));
    }
    Ok(())
}

fn write_eval_report(
    out: &mut dyn Write,
    model: &Model,
    predictor: &str,
    report: &EvalReport,
) -> Result<()> {
    writeln!(out, "predictor\t{predictor}").ok();
    writeln!(out, "total\t{}", report.total).ok();
    writeln!(out, "correct\t{}", report.correct).ok();
    writeln!(out, "accuracy\t{:.6}", report.accuracy_pct).ok();
    writeln!(out, "majority_baseline\t{:.6}", report.majority_pct).ok();
    writeln!(out, "random_baseline\t{:.6}", report.random_pct).ok();
    writeln!(out, "label\tname\tgold\tgold_pct\tpredicted\tcorrect").ok();
    let mut order: Vec<usize> = (0..report.per_label.len()).collect();
    order.sort_by(|&a, &b| {
        report.per_label[b].gold.cmp(&report.per_label[a].gold).then(a.cmp(&b))
    });
    for id in order {
        let counts = &report.per_label[id];
        let name = model.labels.name(id);
        writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{}\t{}",
            name,
            describe_label(name),
            counts.gold,
            100.0 * counts.gold as f64 / report.total as f64,
            counts.predicted,
            counts.correct,
        )
        .ok();
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let model = model_file::load(&args.model)?;
    let predictor = Predictor::parse(&args.predictor)?;
    let (_, test_dialogues, labels) = args.data.load(args.seed)?;
    check_label_compatibility(&model, &labels)?;
    if test_dialogues.is_empty() {
        return Err(Error::data("the split has no test dialogues to evaluate".to_string()));
    }
    let (encoded_test, _) =
        encode_dialogues(&test_dialogues, &model.lexicon, model.hp.max_sentence_len);
    let report = evaluate_with(&model, &encoded_test, predictor)?;
    write_eval_report(out, &model, &args.predictor, &report)
}

/// Parses `A<TAB>text` transcript lines into (tokens, agent) pairs.
fn parse_transcript(reader: impl BufRead) -> Result<Vec<(Vec<String>, usize)>> {
    let mut utterances = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::data(format!("line {}: {e}", lineno + 1)))?;
        if line.is_empty() {
            continue;
        }
        let (agent, text) = line.split_once('\t').ok_or_else(|| {
            Error::data(format!("line {}: expected AGENT<TAB>TEXT", lineno + 1))
        })?;
        let agent = Agent::parse(agent).ok_or_else(|| {
            Error::data(format!("line {}: agent must be A or B, got `{agent}`", lineno + 1))
        })?;
        utterances.push((tokenize(text), agent.index()));
    }
    Ok(utterances)
}

fn cmd_tag(args: &TagArgs, out: &mut dyn Write) -> Result<()> {
    let model = model_file::load(&args.model)?;
    let utterances = match &args.input {
        Some(path) => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            parse_transcript(std::io::BufReader::new(file))?
        }
        None => parse_transcript(std::io::stdin().lock())?,
    };
    if utterances.is_empty() {
        return Ok(());
    }
    let dialogue: Vec<(Vec<usize>, usize)> = utterances
        .iter()
        .map(|(tokens, agent)| (model.lexicon.encode(tokens), *agent))
        .collect();
    let decoded = greedy_decode(
        &model.rcnn,
        &model.hcnn,
        &model.lexicon.embeddings,
        &dialogue,
        model.hp.depth,
        model.hp.recurrence,
    )?;
    for label in decoded.labels {
        writeln!(out, "{}", model.labels.name(label)).ok();
    }
    Ok(())
}

/// Discourse vector of a whole encoded dialogue (hidden state at its final
/// step), conditioned on gold or predicted labels.
fn dialogue_vector(model: &Model, d: &EncodedDialogue, predicted: bool) -> Result<Vec<f64>> {
    let pairs: Vec<(Vec<usize>, usize)> =
        d.utterances.iter().map(|u| (u.tokens.clone(), u.agent)).collect();
    if predicted {
        let decoded = greedy_decode(
            &model.rcnn,
            &model.hcnn,
            &model.lexicon.embeddings,
            &pairs,
            model.hp.depth,
            model.hp.recurrence,
        )?;
        Ok(decoded.hiddens.into_iter().next_back().unwrap())
    } else {
        let sentences = crate::discourse::sentence_vectors(
            &model.hcnn,
            &model.lexicon.embeddings,
            &pairs,
        )?;
        let agents: Vec<usize> = d.utterances.iter().map(|u| u.agent).collect();
        let labels: Vec<usize> = d.utterances.iter().map(|u| u.act).collect();
        let dv = discourse_vector(
            &model.rcnn,
            &sentences,
            &agents,
            &labels,
            d.len() - 1,
            model.hp.depth,
            model.hp.recurrence,
        )?;
        Ok(dv.values)
    }
}

fn cmd_nn(args: &NnArgs, out: &mut dyn Write) -> Result<()> {
    let model = model_file::load(&args.model)?;
    let metric = Metric::parse(&args.metric)?;
    let (train_dialogues, test_dialogues, labels) = args.data.load(args.seed)?;
    check_label_compatibility(&model, &labels)?;
    let mut pool = train_dialogues;
    pool.extend(test_dialogues);
    pool.retain(|d| !d.utterances.is_empty());
    if pool.is_empty() {
        return Err(Error::data("no dialogues in the corpus".to_string()));
    }
    let (encoded, _) = encode_dialogues(&pool, &model.lexicon, model.hp.max_sentence_len);

    let vectors: Vec<Vec<f64>> = encoded
        .iter()
        .map(|d| dialogue_vector(&model, d, args.predicted))
        .collect::<Result<_>>()?;

    let (query_vector, exclude, query_name) = if let Some(id) = &args.query {
        let idx = pool
            .iter()
            .position(|d| &d.id == id)
            .ok_or_else(|| Error::data(format!("unknown dialogue id `{id}`")))?;
        (vectors[idx].clone(), Some(idx), id.clone())
    } else if let Some(path) = &args.query_file {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let utterances = parse_transcript(std::io::BufReader::new(file))?;
        if utterances.is_empty() {
            return Err(Error::data(format!("query file {} is empty", path.display())));
        }
        let query = EncodedDialogue {
            id: path.display().to_string(),
            utterances: utterances
                .iter()
                .map(|(tokens, agent)| crate::corpus::EncodedUtterance {
                    tokens: model.lexicon.encode(tokens),
                    agent: *agent,
                    act: 0,
                })
                .collect(),
        };
        // A fresh transcript has no gold labels; condition on predicted ones.
        (dialogue_vector(&model, &query, true)?, None, path.display().to_string())
    } else {
        return Err(Error::invalid("one of --query or --query-file is required"));
    };

    let hits = nearest_neighbours(&query_vector, &vectors, args.k, metric, exclude)?;
    writeln!(out, "query\t{query_name}").ok();
    writeln!(out, "metric\t{}", metric.name()).ok();
    for (rank, (idx, dist)) in hits.iter().enumerate() {
        writeln!(out, "{}\t{}\t{:.6}", rank + 1, pool[*idx].id, dist).ok();
        for u in &pool[*idx].utterances {
            writeln!(out, "  {}: {}", u.agent.name(), u.tokens.join(" ")).ok();
        }
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    if args.eps <= 0.0 {
        return Err(Error::invalid("--eps must be positive"));
    }
    let (model, sample) = micro_fixture(args.seed, 2, 1e-4);
    let report = grad_check(&model, &sample, args.eps)?;
    writeln!(out, "group\tmax_rel_error\tanalytic\tnumeric").ok();
    for g in &report.groups {
        writeln!(
            out,
            "{}\t{:.6e}\t{:.6e}\t{:.6e}",
            g.name, g.max_rel_error, g.analytic, g.numeric
        )
        .ok();
    }
    writeln!(out, "worst\t{:.6e}", report.worst()).ok();
    let pass = report.all_below(1e-6);
    writeln!(out, "result\t{}", if pass { "pass" } else { "fail" }).ok();
    Ok(if pass { 0 } else { 3 })
}

fn cmd_schedule(args: &ScheduleArgs, out: &mut dyn Write) -> Result<()> {
    let print_one = |out: &mut dyn Write, l: usize, prefix: bool| -> Result<()> {
        let s = schedule_for(l)?;
        let sizes =
            s.sizes().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        let lengths =
            s.lengths().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        if prefix {
            writeln!(out, "{l}\t{sizes}\t{lengths}").ok();
        } else {
            writeln!(out, "sizes\t{sizes}").ok();
            writeln!(out, "lengths\t{lengths}").ok();
        }
        Ok(())
    };
    match (args.length, args.table) {
        (Some(l), None) => print_one(out, l, false),
        (None, Some(n)) => {
            if n == 0 {
                return Err(Error::invalid("--table needs a length of at least 1"));
            }
            writeln!(out, "l\tsizes\tlengths").ok();
            for l in 1..=n {
                print_one(out, l, true)?;
            }
            Ok(())
        }
        _ => Err(Error::invalid("exactly one of --length or --table is required")),
    }
}
