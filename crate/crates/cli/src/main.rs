//! `sessml`: preprocess event logs, train metric-learning recommenders,
//! evaluate them against baselines and serve recommendations.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sessml::baselines::{fit_baseline, BaselineKind};
use sessml::data::{
    self, ingest, preprocess, read_sessions_jsonl, read_vocab_tsv, split_train_test, Dataset, InputFormat,
    PreprocessConfig,
};
use sessml::encoders::{EncoderKind, Model, ModelConfig};
use sessml::eval::{evaluate, EvalConfig, EvalReport, Recommender, RelevantSet};
use sessml::index::{model_name, ModelArtifact, SmlRecommender};
use sessml::losses::{KldDirection, LossConfig, LossKind};
use sessml::sampling::{SamplerConfig, SamplerKind};
use sessml::trainer::{train, write_history_csv, TrainConfig};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] sessml::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(sessml::Error::InvalidArgument(_)) => 1,
            CliError::Core(sessml::Error::Diverged { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(sessml::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Parser)]
#[command(
    name = "sessml",
    version,
    about = "Session-based recommendation in a learned metric space"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest raw events, filter them and write a chronological train/test split.
    Preprocess(PreprocessArgs),
    /// Session-length histogram and repeated-item fractions of a session file.
    Stats(StatsArgs),
    /// Train a model and write the model file and a per-epoch history CSV.
    Train(TrainArgs),
    /// Evaluate a trained model or a baseline with the no-look-ahead protocol.
    Evaluate(EvaluateArgs),
    /// Print the top-n items for a session prefix.
    Recommend(RecommendArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Jsonl,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Raw event file with `session_id`, `timestamp`, `item_id`.
    #[arg(long)]
    input: PathBuf,
    /// Input format; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Output directory for train.jsonl, test.jsonl, vocab.tsv and summary.json.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    min_item_count: u64,
    #[arg(long, default_value_t = 2)]
    min_session_length: usize,
    #[arg(long, default_value_t = 15)]
    max_session_length: usize,
    /// Fraction of the latest sessions used for testing.
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
}

#[derive(Args)]
struct StatsArgs {
    /// Session file written by `preprocess`.
    #[arg(long)]
    sessions: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Directory for lengths.tsv and repeats.tsv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Maxpool,
    Avgpool,
    Rnn,
    Textcnn,
}

impl From<EncoderArg> for EncoderKind {
    fn from(e: EncoderArg) -> Self {
        match e {
            EncoderArg::Maxpool => EncoderKind::MaxPool,
            EncoderArg::Avgpool => EncoderKind::AvgPool,
            EncoderArg::Rnn => EncoderKind::Gru,
            EncoderArg::Textcnn => EncoderKind::TextCnn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Triplet,
    Ncas,
    Contrastive,
    Bpr,
    Top1,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Triplet => LossKind::Triplet,
            LossArg::Ncas => LossKind::Ncas,
            LossArg::Contrastive => LossKind::Contrastive,
            LossArg::Bpr => LossKind::Bpr,
            LossArg::Top1 => LossKind::Top1,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    PosNeg,
    SlidingWindow,
}

#[derive(Clone, Copy, ValueEnum)]
enum KldArg {
    /// KLD(target ‖ model)
    TargetModel,
    /// KLD(model ‖ target)
    ModelTarget,
}

#[derive(Args)]
struct TrainArgs {
    /// Training sessions written by `preprocess`.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Output model file.
    #[arg(long)]
    model: PathBuf,
    /// Output history CSV (epoch, train_loss, val_rec20, lr).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "maxpool")]
    encoder: EncoderArg,
    #[arg(long, value_enum, default_value = "triplet")]
    loss: LossArg,
    #[arg(long, default_value_t = 400)]
    dim: usize,
    /// Give the session encoder its own item embedding table.
    #[arg(long)]
    no_common_embedding: bool,
    /// Skip L2 normalization of the encoder outputs.
    #[arg(long)]
    no_normalize: bool,
    #[arg(long, default_value_t = 15)]
    max_session_length: usize,
    /// TextCNN filter sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    conv_filters: Vec<usize>,
    /// Dense tanh layers after the session encoder.
    #[arg(long, default_value_t = 1)]
    session_ff_layers: usize,
    /// Triplet/contrastive margin.
    #[arg(long, default_value_t = 0.3)]
    margin: f64,
    /// Triplet hinge without the margin term.
    #[arg(long)]
    no_margin: bool,
    /// Use min(d_kn, d_pn) as the negative distance.
    #[arg(long)]
    swap: bool,
    /// Weight every positive equally instead of √(1/(1+j)).
    #[arg(long)]
    no_position_weighting: bool,
    /// NCAS label smoothing ε.
    #[arg(long, default_value_t = 0.3)]
    smoothing: f64,
    #[arg(long, value_enum, default_value = "target-model")]
    kld_direction: KldArg,
    #[arg(long, value_enum, default_value = "pos-neg")]
    sampler: SamplerArg,
    /// Positive/negative samples per session.
    #[arg(long, default_value_t = 8)]
    samples_per_session: usize,
    /// Prefix length for the sliding-window sampler.
    #[arg(long, default_value_t = 5)]
    window_size: usize,
    /// Top up short positive lists with nearest items.
    #[arg(long)]
    knn_augment: bool,
    #[arg(long, default_value_t = 10)]
    knn_k: usize,
    /// Keep prefix items out of the sampled negatives.
    #[arg(long)]
    exclude_prefix_negatives: bool,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 150)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Learning-rate multiplier applied when validation stalls.
    #[arg(long, default_value_t = 0.1)]
    lr_decay: f64,
    /// Fraction of the latest training sessions held out for validation.
    #[arg(long, default_value_t = 0.05)]
    validation_fraction: f64,
    #[arg(long, env = "SML_SEED", default_value_t = 42)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum RelevantArg {
    Remaining,
    Next,
}

#[derive(Args)]
struct EvaluateArgs {
    /// `SML:<model file>` or one of POP, SPOP, MARKOV1, SKNN, VSKNN.
    #[arg(long)]
    method: String,
    #[arg(long)]
    test: PathBuf,
    /// Training sessions; required for baselines.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Vocabulary; required for baselines, taken from the model file otherwise.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    cutoff: usize,
    /// Ground truth for precision, recall and MAP.
    #[arg(long, value_enum, default_value = "remaining")]
    relevant: RelevantArg,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long)]
    model: PathBuf,
    /// Prefix item ids, oldest first.
    #[arg(required = true)]
    items: Vec<String>,
    #[arg(short, long, default_value_t = 20)]
    n: usize,
    /// Leave prefix items out of the list.
    #[arg(long)]
    exclude_prefix: bool,
}

#[derive(Serialize)]
struct Counts {
    events: usize,
    sessions: usize,
    items: usize,
}

impl Counts {
    fn of(ds: &Dataset) -> Self {
        Self {
            events: ds.num_events(),
            sessions: ds.sessions.len(),
            items: ds.vocab.len(),
        }
    }
}

#[derive(Serialize)]
struct Summary {
    rows: usize,
    skipped_rows: usize,
    bad_timestamps: usize,
    raw: Counts,
    preprocessed: Counts,
    train: Counts,
    test: Counts,
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> CliResult<()> {
    w.flush().map_err(|e| io_err(path, e))
}

fn cmd_preprocess(a: PreprocessArgs) -> CliResult<()> {
    if !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
        return Err(CliError::Usage("--test-fraction must be in (0, 1)".into()));
    }
    let format = match a.format {
        Some(FormatArg::Csv) => InputFormat::Csv,
        Some(FormatArg::Jsonl) => InputFormat::Jsonl,
        None => InputFormat::from_path(&a.input),
    };
    let report = ingest(&a.input, format)?;
    if report.events.is_empty() {
        return Err(sessml::Error::EmptyDataset.into());
    }
    let raw = {
        let sessions: std::collections::HashSet<&str> = report.events.iter().map(|e| e.session_id.as_str()).collect();
        let items: std::collections::HashSet<&str> = report.events.iter().map(|e| e.item_id.as_str()).collect();
        Counts {
            events: report.events.len(),
            sessions: sessions.len(),
            items: items.len(),
        }
    };
    let cfg = PreprocessConfig {
        min_item_count: a.min_item_count,
        min_session_length: a.min_session_length,
        max_session_length: a.max_session_length,
    };
    let ds = preprocess(&report.events, &cfg)?;
    let split = split_train_test(&ds, a.test_fraction)?;

    fs::create_dir_all(&a.out_dir).map_err(|e| io_err(&a.out_dir, e))?;
    for (name, part) in [("train.jsonl", &split.train), ("test.jsonl", &split.test)] {
        let p = a.out_dir.join(name);
        let mut w = create(&p)?;
        data::write_sessions_jsonl(part, &mut w).map_err(|e| io_err(&p, e))?;
        finish(w, &p)?;
    }
    let p = a.out_dir.join("vocab.tsv");
    let mut w = create(&p)?;
    data::write_vocab_tsv(&split.train.vocab, &mut w).map_err(|e| io_err(&p, e))?;
    finish(w, &p)?;

    let summary = Summary {
        rows: report.rows,
        skipped_rows: report.skipped,
        bad_timestamps: report.bad_timestamps,
        raw,
        preprocessed: Counts::of(&ds),
        train: Counts::of(&split.train),
        test: Counts::of(&split.test),
    };
    let p = a.out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(sessml::Error::from)?;
    fs::write(&p, text + "\n").map_err(|e| io_err(&p, e))?;
    println!(
        "{} events in {} sessions → train {} sessions, test {} sessions, {} items",
        summary.raw.events, summary.raw.sessions, summary.train.sessions, summary.test.sessions, summary.train.items
    );
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> CliResult<()> {
    let vocab = read_vocab_tsv(&a.vocab)?;
    let ds = read_sessions_jsonl(&a.sessions, &vocab, usize::MAX)?;
    let st = data::stats(&ds);
    fs::create_dir_all(&a.out_dir).map_err(|e| io_err(&a.out_dir, e))?;
    let p = a.out_dir.join("lengths.tsv");
    let mut w = create(&p)?;
    st.write_lengths_tsv(&mut w).map_err(|e| io_err(&p, e))?;
    finish(w, &p)?;
    let p = a.out_dir.join("repeats.tsv");
    let mut w = create(&p)?;
    st.write_repeats_tsv(&mut w).map_err(|e| io_err(&p, e))?;
    finish(w, &p)?;
    let with_repeats = st.repeat_fractions.iter().filter(|(_, f)| *f > 0.0).count();
    println!("sessions\t{}", ds.sessions.len());
    println!("events\t{}", ds.num_events());
    println!("sessions_with_repeats\t{with_repeats}");
    for (len, count) in &st.length_histogram {
        println!("length {len}\t{count}");
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let vocab = read_vocab_tsv(&a.vocab)?;
    let ds = read_sessions_jsonl(&a.train, &vocab, a.max_session_length)?;
    let model_cfg = ModelConfig {
        embedding_dim: a.dim,
        encoder_kind: a.encoder.into(),
        common_embedding: !a.no_common_embedding,
        normalize_outputs: !a.no_normalize,
        max_session_length: a.max_session_length,
        conv_filter_sizes: a.conv_filters.clone(),
        vocab_size: vocab.len(),
        session_ff_layers: a.session_ff_layers,
    };
    let loss_cfg = LossConfig {
        kind: a.loss.into(),
        margin: a.margin,
        use_margin: !a.no_margin,
        use_swap: a.swap,
        position_weighting: !a.no_position_weighting,
        smoothing: a.smoothing,
        kld_direction: match a.kld_direction {
            KldArg::TargetModel => KldDirection::TargetModel,
            KldArg::ModelTarget => KldDirection::ModelTarget,
        },
    };
    let sampler_cfg = SamplerConfig {
        kind: match a.sampler {
            SamplerArg::PosNeg => SamplerKind::PosNeg,
            SamplerArg::SlidingWindow => SamplerKind::SlidingWindow,
        },
        samples_per_session: a.samples_per_session,
        window_size: a.window_size,
        knn_augment: a.knn_augment,
        knn_k: a.knn_k,
        seed: a.seed,
        exclude_prefix_from_negatives: a.exclude_prefix_negatives,
    };
    let train_cfg = TrainConfig {
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        lr: a.lr,
        lr_decay_factor: a.lr_decay,
        validation_fraction: a.validation_fraction,
        ..TrainConfig::default()
    };
    // reject bad combinations before touching the data further
    model_cfg.validate()?;
    loss_cfg.validate()?;
    sampler_cfg.validate()?;
    train_cfg.validate()?;

    let name = model_name(model_cfg.encoder_kind, loss_cfg.kind);
    let model = Model::with_seed(model_cfg, a.seed)?;
    eprintln!("training {name} ({} parameters)", model.num_trainable());
    let out = train(&ds, model, &loss_cfg, &sampler_cfg, &train_cfg)?;
    let artifact = ModelArtifact::new(name.clone(), out.model, vocab)?;
    artifact.save(&a.model)?;
    if let Some(p) = &a.history {
        let w = create(p)?;
        write_history_csv(&out.history, w)?;
    }
    match out.best_epoch {
        Some(e) => println!(
            "{name}: best epoch {e} of {}, validation REC@20 {:.4}",
            out.history.len(),
            out.best_val_rec
        ),
        None => println!("{name}: no epochs run"),
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult<()> {
    let cfg = EvalConfig {
        cutoff: a.cutoff,
        relevant: match a.relevant {
            RelevantArg::Remaining => RelevantSet::Remaining,
            RelevantArg::Next => RelevantSet::NextItem,
        },
    };
    let report: EvalReport = if let Some(path) = a.method.strip_prefix("SML:") {
        let artifact = ModelArtifact::load(Path::new(path))?;
        let test = read_sessions_jsonl(&a.test, &artifact.vocab, usize::MAX)?;
        let rec = SmlRecommender::new(artifact.model)?;
        evaluate(&rec, &test, &cfg, &artifact.name)?
    } else {
        let kind: BaselineKind = a
            .method
            .parse()
            .map_err(|_| CliError::Usage(format!("unknown method `{}`", a.method)))?;
        let (train_path, vocab_path) = match (&a.train, &a.vocab) {
            (Some(t), Some(v)) => (t, v),
            _ => return Err(CliError::Usage("baselines need --train and --vocab".into())),
        };
        let vocab = read_vocab_tsv(vocab_path)?;
        let train = read_sessions_jsonl(train_path, &vocab, usize::MAX)?;
        let test = read_sessions_jsonl(&a.test, &vocab, usize::MAX)?;
        let rec: Box<dyn Recommender + Send> = fit_baseline(kind, &train)?;
        evaluate(&rec, &test, &cfg, kind.label())?
    };
    let json = serde_json::to_string_pretty(&report).map_err(sessml::Error::from)?;
    if let Some(p) = &a.report {
        fs::write(p, json.clone() + "\n").map_err(|e| io_err(p, e))?;
    }
    if a.json {
        println!("{json}");
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn cmd_recommend(a: RecommendArgs) -> CliResult<()> {
    if a.n == 0 {
        return Err(CliError::Usage("-n must be ≥ 1".into()));
    }
    let artifact = ModelArtifact::load(&a.model)?;
    let mut prefix = Vec::new();
    let mut unknown = BTreeMap::new();
    for id in &a.items {
        match artifact.vocab.index_of(id) {
            Some(i) => prefix.push(i),
            None => *unknown.entry(id.as_str()).or_insert(0) += 1,
        }
    }
    for id in unknown.keys() {
        eprintln!("warning: unknown item `{id}` skipped");
    }
    if prefix.is_empty() {
        return Err(sessml::Error::Malformed("none of the given items is known to the model".into()).into());
    }
    let rec = SmlRecommender::new(artifact.model)?.exclude_prefix(a.exclude_prefix);
    let out = std::io::stdout();
    let mut out = out.lock();
    for (rank, (item, score)) in rec.recommend_scored(&prefix, a.n)?.into_iter().enumerate() {
        let _ = writeln!(out, "{}\t{}\t{score:.6}", rank + 1, artifact.vocab.id(item));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Recommend(a) => cmd_recommend(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
