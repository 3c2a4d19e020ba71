//! Command-line front end.
//!
//! Every subcommand's options can also come from a TOML config file, one
//! table per subcommand (`[train]`, `[train-tagger]`, ...) plus top-level
//! `seed` and `threads`. Flags override the file, the file overrides the
//! built-in defaults.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::codec;
use crate::corpus::{
    coverage_stats, encode_sentence, split_corpus, CorpusError, LineReader, RawSentence, SplitSpec, TokenCounts,
    Vocabulary,
};
use crate::embeddings::{EmbeddingStore, EmbeddingsError};
use crate::model::{ModelConfig, ModelError, EMBEDDING_INIT_RANGE};
use crate::tagger::{
    self, evaluate, load_conll, random_embeddings, tag_sentence, train_tagger, TagMap, TaggedSentence, TaggerConfig,
    TaggerError, TaggerParams, Tagset,
};
use crate::trainer::{write_curve_csv, TrainConfig, TrainError, TrainState, Trainer, TrainingData};

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "WORDRANK_CONFIG";

/// Seeds the corpus split independently of the trainer's own streams.
const SPLIT_STREAM: u64 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }

    fn in_file(self, path: &Path) -> Self {
        let p = path.display();
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{p}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{p}: {m}")),
            CliError::Divergence(m) => CliError::Divergence(format!("{p}: {m}")),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            TrainError::Corpus(c) => c.into(),
            TrainError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EmbeddingsError> for CliError {
    fn from(e: EmbeddingsError) -> Self {
        match e {
            EmbeddingsError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TaggerError> for CliError {
    fn from(e: TaggerError) -> Self {
        match e {
            TaggerError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TaggerError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            TaggerError::Embeddings(e) => e.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "wordrank", version, about = "Ranking-trained word embeddings and a window-based PoS tagger")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file (defaults < file < flags)
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Worker threads; 1 is bitwise reproducible
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Structured output on stdout
    #[arg(long, global = true)]
    pub json: bool,
    /// Where to write the run manifest; defaults to `<output>.manifest.json`
    /// for commands that write files
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count normalized tokens and keep the most frequent
    BuildVocab(BuildVocabArgs),
    /// Train embeddings with the window-ranking objective
    Train(TrainArgs),
    /// Nearest neighbors of a word by Euclidean distance
    Nn(NnArgs),
    /// Token and word coverage of a text by an embedding vocabulary
    Coverage(CoverageArgs),
    /// Train a PoS tagger on top of embeddings
    TrainTagger(TrainTaggerArgs),
    /// Tag plain text with a trained tagger
    Tag(TagArgs),
    /// Accuracy of a tagger on known and unknown words
    Eval(EvalArgs),
    /// Corpus size and vocabulary coverage
    Stats(StatsArgs),
}

// Fills unset options from the config file, then from the defaults.
macro_rules! layered {
    ($ty:ident { $($field:ident $(= $default:expr)?),* $(,)? } flags { $($flag:ident),* $(,)? }) => {
        impl $ty {
            fn layer(self, file: Self) -> Self {
                $ty {
                    $($field: self.$field.or(file.$field)$(.or(Some($default)))?,)*
                    $($flag: self.$flag || file.$flag,)*
                }
            }
        }
    };
}

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Regular entries kept, not counting the four reserved tokens
    #[arg(long)]
    pub max_size: Option<usize>,
    /// Whitespace-separated fields are final tokens
    #[arg(long)]
    pub pretokenized: bool,
    #[arg(long)]
    pub no_normalize: bool,
}
layered!(BuildVocabArgs { corpus, out, max_size = 100_000 } flags { pretokenized, no_normalize });

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Training checkpoint, rewritten at every evaluation
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Learning curve CSV [default: <out>.curve.csv]
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Embedding text export of the best parameters [default: <out>.embeddings.txt]
    #[arg(long)]
    pub embeddings_out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Half window; windows hold 2n+1 tokens
    #[arg(long = "n")]
    pub n: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Embeddings start uniform on [-r, r]
    #[arg(long)]
    pub init_range: Option<f64>,
    /// Minibatches sampled for each loss estimate
    #[arg(long)]
    pub dev_batches: Option<usize>,
    #[arg(long)]
    pub max_examples: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<u64>,
    /// Evaluations without improvement before stopping; 0 disables
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub min_delta: Option<f64>,
    /// Examples between evaluations
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Train, dev and test fractions
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub split: Option<Vec<f64>>,
    #[arg(long)]
    pub allow_unk_centers: bool,
    #[arg(long)]
    pub pretokenized: bool,
    #[arg(long)]
    pub no_normalize: bool,
}
layered!(TrainArgs {
    corpus,
    vocab,
    out,
    curve,
    embeddings_out,
    resume,
    n = 2,
    embed_dim = 64,
    hidden = 32,
    batch = 16,
    lr = 0.1,
    init_range = EMBEDDING_INIT_RANGE,
    dev_batches = 10_000,
    max_examples,
    max_epochs,
    patience = 5,
    min_delta = 1e-4,
    eval_every = 100_000,
    split = vec![0.9, 0.05, 0.05],
} flags { allow_unk_centers, pretokenized, no_normalize });

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct NnArgs {
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub word: Option<String>,
    #[arg(short = 'k', long = "k")]
    pub k: Option<usize>,
}
layered!(NnArgs { embeddings, word, k = 5 } flags {});

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct CoverageArgs {
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub text: Option<PathBuf>,
    #[arg(long)]
    pub pretokenized: bool,
    #[arg(long)]
    pub no_normalize: bool,
}
layered!(CoverageArgs { embeddings, text } flags { pretokenized, no_normalize });

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainTaggerArgs {
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Labeled training data, `token<TAB>tag` per line
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Labeled data for model selection; training accuracy is used without it
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// `original<TAB>coarse` tag map; tags are taken as-is without it
    #[arg(long)]
    pub tagmap: Option<PathBuf>,
    /// One tag per line [default: the twelve universal tags]
    #[arg(long)]
    pub tagset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "n")]
    pub n: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without improvement before stopping; 0 disables
    #[arg(long)]
    pub patience: Option<usize>,
    /// Replace the embedding vectors with random ones
    #[arg(long)]
    pub random_init: bool,
    /// Keep the embedding matrix fixed
    #[arg(long)]
    pub freeze_embeddings: bool,
    /// Same learning rate for every layer
    #[arg(long)]
    pub no_fanin: bool,
}
layered!(TrainTaggerArgs {
    embeddings,
    train,
    dev,
    tagmap,
    tagset,
    out,
    n = 2,
    hidden = 300,
    lr = 0.3,
    batch = 16,
    epochs = 20,
    patience = 3,
} flags { random_init, freeze_embeddings, no_fanin });

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TagArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Plain text, one sentence per line
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Write `token<TAB>tag` lines here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub pretokenized: bool,
}
layered!(TagArgs { model, input, out } flags { pretokenized });

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub tagmap: Option<PathBuf>,
}
layered!(EvalArgs { model, test, tagmap } flags {});

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub pretokenized: bool,
    #[arg(long)]
    pub no_normalize: bool,
}
layered!(StatsArgs { corpus, vocab } flags { pretokenized, no_normalize });

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct ConfigFile {
    seed: Option<u64>,
    threads: Option<usize>,
    build_vocab: BuildVocabArgs,
    train: TrainArgs,
    nn: NnArgs,
    coverage: CoverageArgs,
    train_tagger: TrainTaggerArgs,
    tag: TagArgs,
    eval: EvalArgs,
    stats: StatsArgs,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// What a subcommand did, for printing and for the manifest.
struct Run {
    command: &'static str,
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    text: String,
    json: Value,
}

fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| CliError::Usage(format!("missing required option {flag}")))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
fn write_atomic<E, F>(path: &Path, f: F) -> std::result::Result<(), E>
where
    E: From<io::Error>,
    F: FnOnce(&mut BufWriter<File>) -> std::result::Result<(), E>,
{
    let located = |e: io::Error| io::Error::new(e.kind(), format!("{}: {e}", path.display()));
    let tmp = with_suffix(path, ".tmp");
    let mut w = BufWriter::new(File::create(&tmp).map_err(located)?);
    f(&mut w)?;
    w.flush().map_err(located)?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(located)?;
    Ok(())
}

fn file_digest(path: &Path) -> Result<String> {
    let data = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(codec::to_hex(&codec::digest(&data)))
}

fn line_reader(pretokenized: bool, no_normalize: bool) -> LineReader {
    LineReader {
        pretokenized,
        normalize: !no_normalize,
    }
}

fn read_sentences(path: &Path, reader: LineReader) -> Result<Vec<RawSentence>> {
    reader
        .read_all(open(path)?)
        .map_err(|e| CliError::from(e).in_file(path))
}

fn read_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::read(open(path)?).map_err(|e| CliError::from(e).in_file(path))
}

fn read_embeddings(path: &Path) -> Result<EmbeddingStore> {
    EmbeddingStore::read_text(open(path)?).map_err(|e| CliError::from(e).in_file(path))
}

fn read_tagger(path: &Path) -> Result<TaggerParams> {
    TaggerParams::read(open(path)?).map_err(|e| CliError::from(e).in_file(path))
}

fn read_tagmap(path: Option<&Path>, tagset: &Tagset) -> Result<TagMap> {
    match path {
        Some(p) => TagMap::read(open(p)?).map_err(|e| CliError::from(e).in_file(p)),
        None => Ok(TagMap::identity(tagset)),
    }
}

fn read_labeled(path: &Path, tagmap: &TagMap, tagset: &Tagset) -> Result<Vec<TaggedSentence>> {
    load_conll(open(path)?, tagmap, tagset).map_err(|e| CliError::from(e).in_file(path))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

fn build_vocab(args: BuildVocabArgs, threads: usize) -> Result<Run> {
    let corpus = required(&args.corpus, "--corpus")?;
    let out = required(&args.out, "--out")?;
    let max_size = args.max_size.unwrap_or_default();
    let sentences = read_sentences(&corpus, line_reader(args.pretokenized, args.no_normalize))?;

    let chunk = sentences.len().div_ceil(threads.max(1)).max(1);
    let count = || {
        sentences
            .par_chunks(chunk)
            .map(|part| {
                let mut c = TokenCounts::new();
                part.iter().for_each(|s| c.add_sentence(s));
                c
            })
            .reduce(TokenCounts::new, |mut a, b| {
                a.merge(b);
                a
            })
    };
    let counts = thread_pool(threads)?.install(count);
    let vocab = Vocabulary::from_counts(counts, max_size)?;
    write_atomic(&out, |w| -> Result<()> { Ok(vocab.write(w)?) })?;

    let tokens: usize = sentences.iter().map(RawSentence::len).sum();
    Ok(Run {
        command: "build-vocab",
        config: to_value(&args),
        inputs: vec![corpus],
        outputs: vec![out.clone()],
        text: format!(
            "{} sentences, {tokens} tokens, vocabulary {} ({} regular) -> {}",
            sentences.len(),
            vocab.len(),
            vocab.num_regular(),
            out.display()
        ),
        json: json!({
            "sentences": sentences.len(),
            "tokens": tokens,
            "vocab_size": vocab.len(),
            "regular_entries": vocab.num_regular(),
        }),
    })
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn train(mut args: TrainArgs, seed: u64, threads: usize) -> Result<Run> {
    let corpus = required(&args.corpus, "--corpus")?;
    let vocab_path = required(&args.vocab, "--vocab")?;
    let out = required(&args.out, "--out")?;
    let curve = args.curve.get_or_insert_with(|| with_suffix(&out, ".curve.csv")).clone();
    let emb_out = args
        .embeddings_out
        .get_or_insert_with(|| with_suffix(&out, ".embeddings.txt"))
        .clone();
    let split = args.split.clone().unwrap_or_default();
    let spec = SplitSpec::new(split[0], split[1], split[2])?;
    let init_range = args.init_range.unwrap_or_default();
    if !(init_range > 0.0 && init_range.is_finite()) {
        return Err(CliError::Usage("--init-range must be positive".into()));
    }

    let vocab = read_vocab(&vocab_path)?;
    let sentences = read_sentences(&corpus, line_reader(args.pretokenized, args.no_normalize))?;
    let encoded: Vec<_> = sentences.iter().map(|s| encode_sentence(s, &vocab)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    let splits = split_corpus(encoded, spec, &mut rng);

    let model_config = ModelConfig::new(
        args.n.unwrap_or_default(),
        args.embed_dim.unwrap_or_default(),
        args.hidden.unwrap_or_default(),
        vocab.len(),
    )?;
    let config = TrainConfig {
        batch_size: args.batch.unwrap_or_default(),
        base_lr: args.lr.unwrap_or_default(),
        dev_sample_batches: args.dev_batches.unwrap_or_default(),
        max_examples: args.max_examples,
        max_epochs: args.max_epochs,
        plateau_patience: args.patience.filter(|&p| p > 0),
        plateau_min_delta: args.min_delta.unwrap_or_default(),
        eval_every: args.eval_every.unwrap_or_default(),
        seed,
        allow_unk_centers: args.allow_unk_centers,
        threads,
    };
    let data = TrainingData {
        vocab: &vocab,
        train: &splits.train,
        dev: &splits.dev,
    };
    let trainer = Trainer::new(data, &model_config, config)?;

    let mut inputs = vec![corpus, vocab_path];
    let mut state = match &args.resume {
        Some(path) => {
            let state = TrainState::load(open(path)?).map_err(|e| CliError::from(e).in_file(path))?;
            if state.params.config != model_config {
                return Err(CliError::Usage(format!(
                    "{}: checkpoint model {:?} does not match the requested {:?}",
                    path.display(),
                    state.params.config,
                    model_config
                )));
            }
            inputs.push(path.clone());
            state
        }
        None => TrainState::with_init_range(model_config, seed, init_range),
    };
    let stop = trainer.run(&mut state, |s| {
        if let Some(p) = s.history.last() {
            log::info!(
                "examples {} train loss {:.6} dev loss {:.6}",
                p.examples_seen,
                p.train_loss,
                p.dev_loss
            );
        }
        write_atomic(&out, |w| s.save(w))
    })?;

    write_atomic(&curve, |w| write_curve_csv(&state.history, w))?;
    let store = EmbeddingStore::from_params(vocab, state.best_params())?;
    write_atomic(&emb_out, |w| -> Result<()> { Ok(store.write_text(w)?) })?;

    let first = state.history.first().copied();
    let last = state.history.last().copied();
    let best = state.best.as_ref();
    let json = json!({
        "examples_seen": state.examples_seen,
        "epochs_completed": state.epoch,
        "stop_reason": stop,
        "train_sentences": splits.train.len(),
        "dev_sentences": splits.dev.len(),
        "test_sentences": splits.test.len(),
        "initial_dev_loss": first.map(|p| p.dev_loss),
        "final_dev_loss": last.map(|p| p.dev_loss),
        "final_train_loss": last.map(|p| p.train_loss),
        "best_dev_loss": best.map(|b| b.dev_loss),
        "best_examples_seen": best.map(|b| b.examples_seen),
    });
    let text = format!(
        "stopped ({stop:?}) after {} examples; dev loss {:.6} -> {:.6}, best {:.6}\ncheckpoint {}, curve {}, embeddings {}",
        state.examples_seen,
        first.map_or(f64::NAN, |p| p.dev_loss),
        last.map_or(f64::NAN, |p| p.dev_loss),
        best.map_or(f64::NAN, |b| b.dev_loss),
        out.display(),
        curve.display(),
        emb_out.display(),
    );
    Ok(Run {
        command: "train",
        config: to_value(&args),
        inputs,
        outputs: vec![out, curve, emb_out],
        text,
        json,
    })
}

fn nn(args: NnArgs) -> Result<Run> {
    let path = required(&args.embeddings, "--embeddings")?;
    let word = required(&args.word, "--word")?;
    let store = read_embeddings(&path)?;
    let list = store.nearest_neighbors(&word, args.k.unwrap_or_default())?;
    let json = json!({
        "query": list.query,
        "neighbors": list
            .neighbors
            .iter()
            .map(|(t, d)| json!({"token": t, "distance": d}))
            .collect::<Vec<_>>(),
    });
    Ok(Run {
        command: "nn",
        config: to_value(&args),
        inputs: vec![path],
        outputs: Vec::new(),
        text: list.to_table().trim_end().to_string(),
        json,
    })
}

fn coverage(args: CoverageArgs) -> Result<Run> {
    let emb = required(&args.embeddings, "--embeddings")?;
    let text_path = required(&args.text, "--text")?;
    let store = read_embeddings(&emb)?;
    let sentences = read_sentences(&text_path, line_reader(args.pretokenized, args.no_normalize))?;
    let stats = store.coverage(&sentences);
    let mut json = to_value(&stats);
    json["token_coverage"] = json!(stats.token_coverage());
    json["word_coverage"] = json!(stats.word_coverage());
    Ok(Run {
        command: "coverage",
        config: to_value(&args),
        inputs: vec![emb, text_path],
        outputs: Vec::new(),
        text: stats.to_string(),
        json,
    })
}

fn stats(args: StatsArgs) -> Result<Run> {
    let corpus = required(&args.corpus, "--corpus")?;
    let vocab_path = required(&args.vocab, "--vocab")?;
    let vocab = read_vocab(&vocab_path)?;
    let sentences = read_sentences(&corpus, line_reader(args.pretokenized, args.no_normalize))?;
    let stats = coverage_stats(&sentences, &vocab);
    let text = format!(
        "{:>12} {:>12} {:>9}\n{:>12} {:>12} {:>8.2}%",
        "Tokens",
        "Words",
        "Coverage",
        stats.total_tokens,
        stats.total_word_types,
        100.0 * stats.token_coverage()
    );
    let json = json!({
        "tokens": stats.total_tokens,
        "words": stats.total_word_types,
        "covered_tokens": stats.covered_tokens,
        "covered_words": stats.covered_word_types,
        "coverage": stats.token_coverage(),
        "word_coverage": stats.word_coverage(),
    });
    Ok(Run {
        command: "stats",
        config: to_value(&args),
        inputs: vec![corpus, vocab_path],
        outputs: Vec::new(),
        text,
        json,
    })
}

fn read_tagset(path: Option<&Path>) -> Result<Tagset> {
    let Some(path) = path else {
        return Ok(Tagset::universal());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let tags = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    Tagset::new(tags).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn train_tagger_cmd(args: TrainTaggerArgs, seed: u64) -> Result<Run> {
    let emb = required(&args.embeddings, "--embeddings")?;
    let train_path = required(&args.train, "--train")?;
    let out = required(&args.out, "--out")?;
    let tagset = read_tagset(args.tagset.as_deref())?;
    let tagmap = read_tagmap(args.tagmap.as_deref(), &tagset)?;
    let mut store = read_embeddings(&emb)?;
    if args.random_init {
        store = random_embeddings(&store, seed);
    }
    let train = read_labeled(&train_path, &tagmap, &tagset)?;
    let dev = match &args.dev {
        Some(p) => Some(read_labeled(p, &tagmap, &tagset)?),
        None => None,
    };
    let config = TaggerConfig {
        half_window: args.n.unwrap_or_default(),
        hidden: args.hidden.unwrap_or_default(),
        lr: args.lr.unwrap_or_default(),
        batch_size: args.batch.unwrap_or_default(),
        fine_tune_embeddings: !args.freeze_embeddings,
        fan_in: !args.no_fanin,
        max_epochs: args.epochs.unwrap_or_default(),
        patience: args.patience.filter(|&p| p > 0),
        seed,
    };
    let result = train_tagger(&store, &tagset, &train, dev.as_deref(), &config)?;
    write_atomic(&out, |w| -> Result<()> { Ok(result.params.write(w)?) })?;

    let best = result.history.iter().find(|h| h.epoch == result.best_epoch).copied();
    let text = format!(
        "{} epochs, best epoch {} (selection accuracy {:.4}) -> {}",
        result.history.len(),
        result.best_epoch,
        best.map_or(f64::NAN, |b| b.selection_accuracy),
        out.display()
    );
    let mut inputs = vec![emb, train_path];
    inputs.extend(args.dev.iter().chain(&args.tagmap).chain(&args.tagset).cloned());
    Ok(Run {
        command: "train-tagger",
        config: to_value(&args),
        inputs,
        outputs: vec![out],
        text,
        json: json!({
            "best_epoch": result.best_epoch,
            "history": result.history,
        }),
    })
}

fn tag(args: TagArgs) -> Result<Run> {
    let model = required(&args.model, "--model")?;
    let input = required(&args.input, "--input")?;
    let params = read_tagger(&model)?;
    // Tokens are printed as written; lookup normalizes on its own.
    let sentences = read_sentences(&input, line_reader(args.pretokenized, true))?;
    let tagged: Vec<TaggedSentence> = sentences
        .into_iter()
        .map(|tokens| {
            let tags = tag_sentence(&params, &tokens);
            TaggedSentence { tokens, tags }
        })
        .collect();
    let mut conll = Vec::new();
    tagger::write_conll(&tagged, &params.tagset, &mut conll)?;
    let conll = String::from_utf8(conll).expect("tokens are UTF-8");
    let json = Value::Array(
        tagged
            .iter()
            .map(|s| {
                json!({
                    "tokens": s.tokens.tokens(),
                    "tags": s.tags.iter().map(|&t| params.tagset.tag(t)).collect::<Vec<_>>(),
                })
            })
            .collect(),
    );
    let (text, outputs) = match &args.out {
        Some(path) => {
            write_atomic(path, |w| w.write_all(conll.as_bytes()))?;
            (format!("{} sentences -> {}", tagged.len(), path.display()), vec![path.clone()])
        }
        None => (conll.trim_end().to_string(), Vec::new()),
    };
    Ok(Run {
        command: "tag",
        config: to_value(&args),
        inputs: vec![model, input],
        outputs,
        text,
        json,
    })
}

fn eval(args: EvalArgs) -> Result<Run> {
    let model = required(&args.model, "--model")?;
    let test = required(&args.test, "--test")?;
    let params = read_tagger(&model)?;
    let tagmap = read_tagmap(args.tagmap.as_deref(), &params.tagset)?;
    let sentences = read_labeled(&test, &tagmap, &params.tagset)?;
    let report = evaluate(&params, &sentences)?;
    let mut json = to_value(&report);
    json["accuracy_all"] = json!(report.accuracy_all());
    json["accuracy_known"] = json!(report.accuracy_known());
    json["accuracy_unknown"] = json!(report.accuracy_unknown());
    let mut inputs = vec![model, test];
    inputs.extend(args.tagmap.iter().cloned());
    Ok(Run {
        command: "eval",
        config: to_value(&args),
        inputs,
        outputs: Vec::new(),
        text: report.to_string(),
        json,
    })
}

fn manifest(run: &Run, seed: u64, threads: usize) -> Result<Value> {
    let files = |paths: &[PathBuf]| -> Result<Vec<Value>> {
        paths
            .iter()
            .map(|p| Ok(json!({"path": p, "sha256": file_digest(p)?})))
            .collect()
    };
    Ok(json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": run.command,
        "seed": seed,
        "threads": threads,
        "config": run.config,
        "inputs": files(&run.inputs)?,
        "outputs": files(&run.outputs)?,
    }))
}

/// Runs a parsed command line, printing results to stdout.
pub fn execute(cli: Cli) -> Result<()> {
    let file = load_config(cli.global.config.as_deref())?;
    let seed = cli.global.seed.or(file.seed).unwrap_or(1);
    let threads = cli.global.threads.or(file.threads).unwrap_or(1);
    if threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let run = match cli.command {
        Command::BuildVocab(a) => build_vocab(a.layer(file.build_vocab), threads)?,
        Command::Train(a) => train(a.layer(file.train), seed, threads)?,
        Command::Nn(a) => nn(a.layer(file.nn))?,
        Command::Coverage(a) => coverage(a.layer(file.coverage))?,
        Command::TrainTagger(a) => train_tagger_cmd(a.layer(file.train_tagger), seed)?,
        Command::Tag(a) => tag(a.layer(file.tag))?,
        Command::Eval(a) => eval(a.layer(file.eval))?,
        Command::Stats(a) => stats(a.layer(file.stats))?,
    };

    let manifest_path = cli
        .global
        .manifest
        .clone()
        .or_else(|| run.outputs.first().map(|o| with_suffix(o, ".manifest.json")));
    if let Some(path) = manifest_path {
        let m = manifest(&run, seed, threads)?;
        write_atomic(&path, |w| -> io::Result<()> {
            serde_json::to_writer_pretty(&mut *w, &m)?;
            writeln!(w)
        })?;
    }

    let stdout = io::stdout();
    let mut out = stdout.lock();
    if cli.global.json {
        serde_json::to_writer_pretty(&mut out, &run.json).map_err(|e| CliError::Data(e.to_string()))?;
        writeln!(out)?;
    } else if !run.text.is_empty() {
        writeln!(out, "{}", run.text)?;
    }
    Ok(())
}

/// Parses `args`, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
