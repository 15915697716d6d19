//! `regressformer`: tokenize corpora, train, predict properties, generate
//! primed sequences, and run evaluation protocols.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use regressformer::config::RunConfig;
use regressformer::data::{self, build_vocabulary, dataset_hash, Example, Format, SynthKind, SEGMENT_DELIMITER};
use regressformer::decoding::{apply_primers, generate_conditional_batch, mask_property, predict_properties, Primer};
use regressformer::evaluation::{
    constrained_optimization, decoration_eval, knn_baseline, primer_sweep, reconstruction_eval, regression_eval,
    regression_metrics, seeded_plans, self_oracle, synthetic_oracle, tanimoto_similarity, Distance,
    MetricsReport, Oracle, SegmentedSeq,
};
use regressformer::model::{load_checkpoint, save_checkpoint, Adam, Checkpoint, Model};
use regressformer::objectives::{train, TrainState};
use regressformer::tokenizer::{parse_ids, parse_line, parse_raw_line, render_line, TokenizedSequence, Vocabulary};
use regressformer::{Error, Result};

const SEED_VAR: &str = "REGRESSFORMER_SEED";

#[derive(Parser)]
#[command(name = "regressformer", version, about = "Regression and property-conditioned generation with one sequence model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a corpus to id sequences, building the vocabulary if absent.
    Tokenize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fractional digits of property values when building a vocabulary.
        #[arg(long, default_value_t = 3)]
        decimals: u32,
        /// Read id lines and print record lines instead.
        #[arg(long)]
        decode: bool,
    },
    /// Train a model from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Predict a property for each input record.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Defaults to the first property of the vocabulary.
        #[arg(long)]
        property: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prime, mask and refill each input record.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// `name=value`; repeatable.
        #[arg(long = "primer", required = true)]
        primers: Vec<String>,
        #[arg(long, default_value_t = 0.4)]
        mask_fraction: f64,
        #[arg(long, default_value_t = 7)]
        max_span: usize,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an evaluation protocol and write a metrics report.
    Evaluate {
        #[arg(long)]
        protocol: Protocol,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluation records; defaults to the configured test split.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Training records for novelty and baselines; defaults to the
        /// configured train split.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OracleKind::Model)]
        oracle: OracleKind,
        #[arg(long, value_enum, default_value_t = DistanceArg::Levenshtein)]
        distance: DistanceArg,
        /// Segment index for reconstruction and decoration.
        #[arg(long, default_value_t = 0)]
        segment: usize,
        /// Evaluate at most this many records.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-item rows for plotting.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Protocol {
    Regression,
    Sweep,
    Reconstruct,
    Decorate,
    Constrained,
    Knn,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OracleKind {
    /// The checkpoint's own property prediction.
    Model,
    FractionOfA,
    WeightedSum,
    SegmentedYield,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DistanceArg {
    Levenshtein,
    Tanimoto,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Tokenize { input, vocab, out, decimals, decode } => cmd_tokenize(&input, &vocab, out.as_deref(), decimals, decode),
        Command::Train { config, resume, steps, seed, output_dir } => {
            cmd_train(&config, resume.as_deref(), steps, seed, output_dir)
        }
        Command::Predict { ckpt, input, property, out } => cmd_predict(&ckpt, &input, property, out.as_deref()),
        Command::Generate { ckpt, input, primers, mask_fraction, max_span, beam, seed, out } => {
            let primers = primers.iter().map(|p| Primer::parse(p)).collect::<Result<Vec<_>>>().map_err(usage)?;
            let seed = resolve_seed(seed)?.unwrap_or(0);
            cmd_generate(&ckpt, &input, &primers, mask_fraction, max_span, beam, seed, out.as_deref())
        }
        Command::Evaluate { protocol, ckpt, config, input, train, oracle, distance, segment, limit, seed, out, csv } => {
            let opts = EvalOpts { protocol, oracle, distance, segment, limit };
            cmd_evaluate(opts, ckpt.as_deref(), config.as_deref(), input.as_deref(), train.as_deref(), seed, out.as_deref(), csv.as_deref())
        }
    }
}

/// Malformed flag values are usage errors.
fn usage(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Explicit flag, else the environment fallback.
fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_VAR) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::Config(format!("{SEED_VAR}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

/// Output file, or stdout.
fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_err(p))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn write_line(w: &mut dyn Write, line: &str, path: Option<&Path>) -> Result<()> {
    writeln!(w, "{line}").map_err(|e| Error::Io { path: path.map_or_else(|| "<stdout>".into(), Path::to_path_buf), source: e })
}

fn is_dataset(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "csv"))
}

fn record_error(path: &Path, line: usize, e: Error) -> Error {
    match e {
        Error::Record { .. } | Error::Io { .. } => e,
        other => Error::Record { path: path.display().to_string(), line, message: other.to_string() },
    }
}

/// Non-blank lines with their 1-based numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// Encoded records and, for datasets, the source examples.
fn read_records(path: &Path, vocab: &Vocabulary) -> Result<(Vec<TokenizedSequence>, Option<Vec<Example>>)> {
    if is_dataset(path) {
        let examples = data::load(path, Format::from_path(path))?;
        let seqs = examples
            .iter()
            .enumerate()
            .map(|(i, e)| e.encode(vocab).map_err(|err| record_error(path, i + 1, err)))
            .collect::<Result<Vec<_>>>()?;
        return Ok((seqs, Some(examples)));
    }
    let seqs = read_lines(path)?
        .into_iter()
        .map(|(n, l)| parse_line(&l, vocab).map_err(|e| record_error(path, n, e)))
        .collect::<Result<Vec<_>>>()?;
    Ok((seqs, None))
}

fn cmd_tokenize(input: &Path, vocab_path: &Path, out: Option<&Path>, decimals: u32, decode: bool) -> Result<()> {
    let vocab = if vocab_path.exists() {
        Vocabulary::load(vocab_path)?
    } else if decode {
        return Err(Error::Config(format!("vocabulary {} does not exist", vocab_path.display())));
    } else {
        let examples = if is_dataset(input) {
            data::load(input, Format::from_path(input))?
        } else {
            read_lines(input)?
                .into_iter()
                .map(|(n, l)| raw_example(&l).map_err(|e| record_error(input, n, e)))
                .collect::<Result<Vec<_>>>()?
        };
        let vocab = build_vocabulary(&examples, decimals)?;
        vocab.save(vocab_path)?;
        vocab
    };
    let mut w = sink(out)?;
    if decode {
        for (n, line) in read_lines(input)? {
            let ids = line
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| Error::MalformedSequence(format!("bad id {t:?}"))))
                .collect::<Result<Vec<_>>>()
                .and_then(|ids| parse_ids(&ids, &vocab))
                .and_then(|s| render_line(&s, &vocab))
                .map_err(|e| record_error(input, n, e))?;
            write_line(&mut w, &ids, out)?;
        }
    } else {
        let (seqs, _) = read_records(input, &vocab)?;
        for s in seqs {
            let line: Vec<String> = s.ids.iter().map(usize::to_string).collect();
            write_line(&mut w, &line.join(" "), out)?;
        }
    }
    w.flush().map_err(io_err(out.unwrap_or(Path::new("<stdout>"))))
}

fn raw_example(line: &str) -> Result<Example> {
    let raw = parse_raw_line(line)?;
    let mut props = std::collections::BTreeMap::new();
    for (name, value) in raw.props {
        let v: f64 = value.parse().map_err(|_| Error::MalformedNumber(value.clone()))?;
        props.insert(name, v);
    }
    Ok(Example::new(raw.text, props))
}

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

fn cmd_train(
    config: &Path,
    resume: Option<&Path>,
    steps: Option<u64>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config, resolve_seed(None)?)?;
    if let Some(s) = seed {
        cfg.trainer.seed = s;
    }
    if let Some(s) = steps {
        cfg.trainer.steps = s;
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    cfg.validate()?;
    let splits = cfg.data.load()?;
    let data_hash = dataset_hash(&splits.all());
    let dir = cfg.output_dir.join(&cfg.run_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let (mut ts, vocab) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let model = Model::from_params(ck.model.clone(), ck.params, &ck.vocab)?;
            let optimizer = ck.optimizer.unwrap_or_else(|| Adam::new(cfg.trainer.optimizer, &ck.model));
            (TrainState { model, optimizer, step: ck.step }, ck.vocab)
        }
        None => {
            let vocab = build_vocabulary(&splits.all(), cfg.data.decimals)?;
            let model = Model::<f32>::new(cfg.model.clone(), &vocab, cfg.trainer.seed)?;
            (TrainState::new(model, cfg.trainer.optimizer), vocab)
        }
    };
    let encode = |xs: &[Example]| xs.iter().map(|e| e.encode(&vocab)).collect::<Result<Vec<_>>>();
    let (train_seqs, valid_seqs, test_seqs) = (encode(&splits.train)?, encode(&splits.valid)?, encode(&splits.test)?);
    let resolved = RunConfig { model: ts.model.config.clone(), ..cfg.clone() };
    fs::write(dir.join("config.toml"), resolved.to_toml()).map_err(io_err(&dir))?;
    vocab.save(dir.join("vocab.json"))?;

    let log_path = dir.join("train.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let extra = json!({
        "run_id": cfg.run_id,
        "config_hash": hex(cfg.hash()),
        "dataset_hash": hex(data_hash),
        "trainer": cfg.trainer,
    });
    let checkpoint = |st: &TrainState<f32>| Checkpoint {
        model: st.model.config.clone(),
        vocab: vocab.clone(),
        step: st.step,
        params: st.model.params.clone(),
        optimizer: Some(st.optimizer.clone()),
        extra: extra.clone(),
    };
    let tc = cfg.trainer.clone();
    let property = 0;
    train(&mut ts, &vocab, &train_seqs, &tc, |rec, st| {
        let mut line = serde_json::to_value(rec)?;
        let done = st.step;
        if tc.eval_every > 0 && done % tc.eval_every == 0 && !valid_seqs.is_empty() {
            line["valid"] = serde_json::to_value(regression_eval(&st.model, &vocab, &valid_seqs, property)?.report)?;
        }
        writeln!(log, "{line}").map_err(io_err(&log_path))?;
        if tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 {
            save_checkpoint(dir.join(format!("step_{done}.ckpt")), &checkpoint(st))?;
        }
        Ok(true)
    })?;
    let final_path = dir.join("final.ckpt");
    save_checkpoint(&final_path, &checkpoint(&ts))?;

    let mut report = json!({
        "run_id": cfg.run_id,
        "steps": ts.step,
        "config_hash": hex(cfg.hash()),
        "dataset_hash": hex(data_hash),
        "vocab_hash": hex(vocab.hash()),
    });
    if !test_seqs.is_empty() {
        report["test"] = serde_json::to_value(regression_eval(&ts.model, &vocab, &test_seqs, property)?.report)?;
    }
    let report_path = dir.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?).map_err(io_err(&report_path))?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model<f32>, Vocabulary, u64)> {
    let ck = load_checkpoint(path)?;
    let model = Model::from_params(ck.model, ck.params, &ck.vocab)?;
    Ok((model, ck.vocab, ck.step))
}

fn property_index(vocab: &Vocabulary, name: Option<&str>) -> Result<usize> {
    match name {
        Some(n) => vocab.schema().index_of(n).ok_or_else(|| Error::Config(format!("unknown property {n:?}"))),
        None if vocab.schema().properties.is_empty() => Err(Error::Config("vocabulary has no properties".into())),
        None => Ok(0),
    }
}

fn cmd_predict(ckpt: &Path, input: &Path, property: Option<String>, out: Option<&Path>) -> Result<()> {
    let (model, vocab, _) = load_model(ckpt)?;
    let prop = property_index(&vocab, property.as_deref())?;
    let name = vocab.schema().properties[prop].name.clone();
    let (seqs, _) = read_records(input, &vocab)?;
    let mut golds = Vec::new();
    let mut masked = Vec::with_capacity(seqs.len());
    for s in &seqs {
        let gold = s.blocks.iter().position(|b| b.property == prop).map(|b| {
            regressformer::tokenizer::block_values(s, &vocab).map(|v| v[b].to_f64())
        });
        golds.push(gold.transpose()?);
        let primed = if gold_missing(s, prop) { apply_primers(s, &[Primer::new(name.clone(), 0.0)], &vocab)? } else { s.clone() };
        masked.push(mask_property(&primed, &vocab, prop)?);
    }
    let preds = predict_properties(&model, &vocab, &masked)?;
    let mut w = sink(out)?;
    let mut pairs = (Vec::new(), Vec::new());
    for (i, ((_, p), gold)) in preds.iter().zip(&golds).enumerate() {
        let value = p[0].value.to_f64();
        let mut row = json!({"index": i, "property": name, "value": value, "entropy": p[0].slot_entropies()});
        if let Some(g) = gold {
            row["gold"] = json!(g);
            pairs.0.push(value);
            pairs.1.push(*g);
        }
        write_line(&mut w, &row.to_string(), out)?;
    }
    w.flush().map_err(io_err(out.unwrap_or(Path::new("<stdout>"))))?;
    if !pairs.0.is_empty() && pairs.0.len() == preds.len() {
        eprintln!("{}", serde_json::to_string(&regression_metrics(&pairs.0, &pairs.1))?);
    }
    Ok(())
}

fn gold_missing(seq: &TokenizedSequence, prop: usize) -> bool {
    !seq.blocks.iter().any(|b| b.property == prop)
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    ckpt: &Path,
    input: &Path,
    primers: &[Primer],
    mask_fraction: f64,
    max_span: usize,
    beam: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    if beam == 0 || !(mask_fraction > 0.0 && mask_fraction <= 1.0) || max_span == 0 {
        return Err(Error::Config("need beam >= 1, max_span >= 1 and mask_fraction in (0, 1]".into()));
    }
    let (model, vocab, _) = load_model(ckpt)?;
    for p in primers {
        if vocab.schema().index_of(&p.property).is_none() {
            return Err(Error::Config(format!("unknown property {:?}", p.property)));
        }
    }
    let (seqs, _) = read_records(input, &vocab)?;
    let lens: Vec<usize> = seqs.iter().map(TokenizedSequence::text_len).collect();
    let plans = seeded_plans(&lens, mask_fraction, max_span, seed)?;
    let jobs: Vec<_> = seqs.into_iter().zip(plans).map(|(s, p)| (s, primers.to_vec(), p)).collect();
    let results = generate_conditional_batch(&model, &vocab, &jobs, beam)?;
    let mut w = sink(out)?;
    for (i, r) in results.iter().enumerate() {
        let seqs = r
            .sequences
            .iter()
            .map(|(s, score)| Ok(json!({"line": render_line(s, &vocab)?, "score": score})))
            .collect::<Result<Vec<Value>>>()?;
        write_line(&mut w, &json!({"index": i, "sequences": seqs}).to_string(), out)?;
    }
    w.flush().map_err(io_err(out.unwrap_or(Path::new("<stdout>"))))
}

struct EvalOpts {
    protocol: Protocol,
    oracle: OracleKind,
    distance: DistanceArg,
    segment: usize,
    limit: Option<usize>,
}

/// Evaluation and training examples from flags or the configured splits.
/// Without a training source the training set is empty.
fn eval_data(input: Option<&Path>, train: Option<&Path>, cfg: &RunConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    let load = |p: &Path| -> Result<Vec<Example>> {
        if is_dataset(p) {
            data::load(p, Format::from_path(p))
        } else {
            read_lines(p)?.into_iter().map(|(n, l)| raw_example(&l).map_err(|e| record_error(p, n, e))).collect()
        }
    };
    let splits = match (input, train) {
        (None, _) => Some(cfg.data.load()?),
        (Some(_), None) => cfg.data.load().ok(),
        _ => None,
    };
    let eval = match input {
        Some(p) => load(p)?,
        None => splits.as_ref().map(|s| s.test.clone()).unwrap_or_default(),
    };
    let train = match train {
        Some(p) => load(p)?,
        None => splits.map(|s| s.train).unwrap_or_default(),
    };
    if eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((eval, train))
}

fn oracle_alphabet(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Vec<String>> {
    if let Some(spec) = &cfg.data.synthetic {
        return Ok(spec.alphabet.clone());
    }
    vocab
        .text_ids()
        .iter()
        .map(|&id| vocab.token(id).map(ToString::to_string))
        .filter(|t| t.as_ref().map_or(true, |t| t != SEGMENT_DELIMITER))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    opts: EvalOpts,
    ckpt: Option<&Path>,
    config: Option<&Path>,
    input: Option<&Path>,
    train_path: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
    csv: Option<&Path>,
) -> Result<()> {
    let env_seed = resolve_seed(None)?;
    let mut cfg = match config {
        Some(p) => RunConfig::load(p, env_seed)?,
        None => RunConfig::from_toml_with_seed("", env_seed)?,
    };
    if let Some(s) = seed {
        cfg.eval.sweep.seed = s;
        cfg.eval.optimization.seed = s;
    }
    let (mut eval, train_ex) = eval_data(input, train_path, &cfg)?;
    if let Some(n) = opts.limit {
        eval.truncate(n);
    }
    let mut rows: Vec<Value> = Vec::new();
    let mut provenance = json!({
        "config_hash": hex(cfg.hash()),
        "dataset_hash": hex(dataset_hash(&eval)),
        "train_hash": hex(dataset_hash(&train_ex)),
    });

    let metrics: MetricsReport = if opts.protocol == Protocol::Knn {
        let pname = cfg.eval.sweep.property.clone();
        let pairs = |xs: &[Example]| -> Result<Vec<(Vec<String>, f64)>> {
            xs.iter()
                .map(|e| {
                    let y = e.props.get(&pname).ok_or_else(|| Error::UnknownProperty(pname.clone()))?;
                    Ok((e.tokens.clone(), *y))
                })
                .collect()
        };
        let train = pairs(&train_ex)?;
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let test = pairs(&eval)?;
        let queries: Vec<Vec<String>> = test.iter().map(|(t, _)| t.clone()).collect();
        let distance = match opts.distance {
            DistanceArg::Levenshtein => Distance::Levenshtein,
            DistanceArg::Tanimoto => Distance::Tanimoto,
        };
        let preds = knn_baseline(&train, &queries, cfg.eval.knn_k, distance);
        let golds: Vec<f64> = test.iter().map(|(_, y)| *y).collect();
        for (i, (p, g)) in preds.iter().zip(&golds).enumerate() {
            rows.push(json!({"index": i, "pred": p, "gold": g}));
        }
        regression_metrics(&preds, &golds)
    } else {
        let ckpt = ckpt.ok_or_else(|| Error::Config("--ckpt is required for this protocol".into()))?;
        let (model, vocab, step) = load_model(ckpt)?;
        provenance["checkpoint_step"] = json!(step);
        provenance["vocab_hash"] = json!(hex(vocab.hash()));
        let encode = |xs: &[Example]| xs.iter().map(|e| e.encode(&vocab)).collect::<Result<Vec<_>>>();
        let seqs = encode(&eval)?;
        let alphabet = oracle_alphabet(&cfg, &vocab)?;
        let prop = property_index(&vocab, Some(&cfg.eval.sweep.property))?;
        let mut oracle: Box<Oracle<'_>> = match opts.oracle {
            OracleKind::Model => Box::new(self_oracle(&model, &vocab, prop)),
            OracleKind::FractionOfA => Box::new(synthetic_oracle(SynthKind::FractionOfA, alphabet, None, &vocab)),
            OracleKind::WeightedSum => Box::new(synthetic_oracle(SynthKind::WeightedSum, alphabet, None, &vocab)),
            OracleKind::SegmentedYield => Box::new(synthetic_oracle(SynthKind::SegmentedYield, alphabet, None, &vocab)),
        };
        let segmented = |xs: &[Example], seqs: &[TokenizedSequence]| -> Result<Vec<SegmentedSeq>> {
            xs.iter()
                .zip(seqs)
                .enumerate()
                .map(|(i, (e, s))| {
                    let seg = e.segments.as_ref().and_then(|g| g.get(opts.segment)).copied().ok_or_else(|| {
                        Error::Record { path: "evaluation data".into(), line: i + 1, message: format!("no segment {}", opts.segment) }
                    })?;
                    Ok(SegmentedSeq { seq: s.clone(), segment: seg })
                })
                .collect()
        };
        match opts.protocol {
            Protocol::Regression => {
                let r = regression_eval(&model, &vocab, &seqs, prop)?;
                for (i, (p, g)) in r.preds.iter().zip(&r.golds).enumerate() {
                    rows.push(json!({"index": i, "pred": p, "gold": g}));
                }
                r.report
            }
            Protocol::Sweep => {
                let train_texts: HashSet<Vec<usize>> =
                    encode(&train_ex)?.iter().map(|s| s.text_ids().to_vec()).collect();
                let (rep, _) = primer_sweep(&model, &vocab, &seqs, &cfg.eval.sweep, &mut oracle, &train_texts)?;
                rows.extend(rep.rows.iter().map(|r| serde_json::to_value(r).expect("row serializes")));
                rep.metrics()
            }
            Protocol::Reconstruct => {
                let items = segmented(&eval, &seqs)?;
                reconstruction_eval(&model, &vocab, &items, cfg.eval.decoration.top_k, true)?
            }
            Protocol::Decorate => {
                let items = segmented(&eval, &seqs)?;
                let train_seqs = encode(&train_ex)?;
                let train_segments: HashSet<Vec<usize>> = segmented(&train_ex, &train_seqs)?
                    .iter()
                    .map(|s| s.seq.text_ids()[s.segment.0..s.segment.1].to_vec())
                    .collect();
                let rep = decoration_eval(&model, &vocab, &items, &cfg.eval.decoration, &train_segments, &mut oracle)?;
                for (i, d) in rep.per_seed.iter().enumerate() {
                    rows.push(json!({"index": i, "seed_value": d.seed_value, "candidates": d.candidates, "success": d.success}));
                }
                rep.metrics()
            }
            Protocol::Constrained => {
                let mut sim = tanimoto_similarity(&vocab);
                let (mut wins, mut gain, mut sims) = (0usize, 0.0, 0.0);
                for (i, s) in seqs.iter().enumerate() {
                    let r = constrained_optimization(&model, &vocab, s, &cfg.eval.optimization, &mut oracle, &mut sim)?;
                    wins += (r.improvement() > 0.0) as usize;
                    gain += r.improvement();
                    sims += r.best_similarity;
                    rows.push(json!({
                        "index": i,
                        "seed_value": r.seed_value,
                        "best_value": r.best_value,
                        "similarity": r.best_similarity,
                        "best": render_line(&r.best, &vocab)?,
                    }));
                }
                let n = seqs.len() as f64;
                MetricsReport {
                    n: seqs.len(),
                    success_rate: Some(wins as f64 / n),
                    mean_improvement: Some(gain / n),
                    mean_similarity: Some(sims / n),
                    ..Default::default()
                }
            }
            Protocol::Knn => unreachable!("handled above"),
        }
    };

    let protocol = opts.protocol.to_possible_value().expect("named variant").get_name().to_string();
    let report = json!({"protocol": protocol, "metrics": metrics, "provenance": provenance});
    let mut w = sink(out)?;
    write_line(&mut w, &serde_json::to_string_pretty(&report)?, out)?;
    w.flush().map_err(io_err(out.unwrap_or(Path::new("<stdout>"))))?;
    if let Some(path) = csv {
        write_csv(path, &rows)?;
    }
    Ok(())
}

/// Rows share the keys of the first row.
fn write_csv(path: &Path, rows: &[Value]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Io { path: path.to_path_buf(), source: e.into() };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let Some(first) = rows.first().and_then(Value::as_object) else {
        return Ok(());
    };
    let keys: Vec<&String> = first.keys().collect();
    w.write_record(&keys).map_err(csv_err)?;
    for r in rows {
        let cells = keys.iter().map(|k| match r.get(k.as_str()) {
            Some(Value::String(s)) => s.clone(),
            Some(v) => v.to_string(),
            None => String::new(),
        });
        w.write_record(cells).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}
