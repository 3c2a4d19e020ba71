//! Window-based neural part-of-speech tagger.
//!
//! Each token is tagged from the concatenated embeddings of the `2n+1` tokens
//! around it, fed through a tanh hidden layer and a softmax over tags. Training
//! minimizes negative log likelihood and, unless frozen, pushes the error back
//! into the embedding rows. Tokens missing from the embedding vocabulary share
//! the single UNK row; they are never added.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{self, Decoder, Encoder, FormatError};
use crate::corpus::{context_window, normalize_token, RawSentence, TokenId, Vocabulary, UNK_ID};
use crate::embeddings::{EmbeddingStore, EmbeddingsError};
use crate::model::EMBEDDING_INIT_RANGE;
use crate::tensor::{axpy, Matrix};

pub const TAGGER_MAGIC: &[u8; 4] = b"PGTG";
pub const TAGGER_VERSION: u32 = 1;

/// The twelve coarse tags of the universal tagset.
pub const UNIVERSAL_TAGS: [&str; 12] = [
    "NOUN", "VERB", "ADJ", "ADV", "PRON", "DET", "ADP", "NUM", "CONJ", "PRT", ".", "X",
];

#[derive(Debug, Error)]
pub enum TaggerError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("unmapped tag {tag} at line {line}")]
    UnmappedTag { tag: String, line: usize },
    #[error("empty data: {0}")]
    EmptyData(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("divergence in epoch {epoch}: non-finite {what}")]
    Divergence { epoch: usize, what: &'static str },
    #[error(transparent)]
    Embeddings(#[from] EmbeddingsError),
    #[error(transparent)]
    Model(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TaggerError>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tagset {
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tagset {
    pub fn new(tags: Vec<String>) -> Result<Self> {
        if tags.is_empty() {
            return Err(TaggerError::InvalidArgument("empty tagset".into()));
        }
        let mut index = HashMap::with_capacity(tags.len());
        for (i, t) in tags.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(TaggerError::InvalidArgument(format!("duplicate tag {t:?}")));
            }
        }
        Ok(Tagset { tags, index })
    }

    pub fn universal() -> Self {
        Self::new(UNIVERSAL_TAGS.iter().map(|s| s.to_string()).collect()).expect("unique tags")
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn tag(&self, id: usize) -> &str {
        &self.tags[id]
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }
}

impl Default for Tagset {
    fn default() -> Self {
        Self::universal()
    }
}

/// Treebank tag → coarse tag.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TagMap {
    map: HashMap<String, String>,
}

impl TagMap {
    /// Maps every tag of `tagset` to itself.
    pub fn identity(tagset: &Tagset) -> Self {
        TagMap {
            map: tagset.tags().iter().map(|t| (t.clone(), t.clone())).collect(),
        }
    }

    pub fn get(&self, original: &str) -> Option<&str> {
        self.map.get(original).map(String::as_str)
    }

    pub fn insert(&mut self, original: impl Into<String>, coarse: impl Into<String>) {
        self.map.insert(original.into(), coarse.into());
    }

    /// Reads `original<TAB>coarse` lines. Blank lines and `#` comments are
    /// skipped.
    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut map = HashMap::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            let [original, coarse] = fields[..] else {
                return Err(TaggerError::Format {
                    line: i + 1,
                    message: format!("expected `original<TAB>universal`, found {} fields", fields.len()),
                });
            };
            map.insert(original.to_string(), coarse.to_string());
        }
        if map.is_empty() {
            return Err(TaggerError::EmptyData("tag map"));
        }
        Ok(TagMap { map })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedSentence {
    pub tokens: RawSentence,
    pub tags: Vec<usize>,
}

/// Reads `token<TAB>tag` lines with blank lines between sentences, mapping
/// each tag through `tagmap` into `tagset`.
pub fn load_conll<R: BufRead>(r: R, tagmap: &TagMap, tagset: &Tagset) -> Result<Vec<TaggedSentence>> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let flush = |tokens: &mut Vec<String>, tags: &mut Vec<usize>, out: &mut Vec<TaggedSentence>| {
        if !tokens.is_empty() {
            out.push(TaggedSentence {
                tokens: std::mem::take(tokens).into_iter().collect(),
                tags: std::mem::take(tags),
            });
        }
    };
    for (i, line) in r.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags, &mut out);
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [token, tag] = fields[..] else {
            return Err(TaggerError::Format {
                line: lineno,
                message: format!("expected `token<TAB>tag`, found {} fields", fields.len()),
            });
        };
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(TaggerError::Format {
                line: lineno,
                message: format!("bad token {token:?}"),
            });
        }
        let coarse = tagmap.get(tag).ok_or_else(|| TaggerError::UnmappedTag {
            tag: tag.to_string(),
            line: lineno,
        })?;
        let id = tagset.id(coarse).ok_or_else(|| TaggerError::Format {
            line: lineno,
            message: format!("tag {tag} maps to {coarse:?}, which is not in the tagset"),
        })?;
        tokens.push(token.to_string());
        tags.push(id);
    }
    flush(&mut tokens, &mut tags, &mut out);
    if out.is_empty() {
        return Err(TaggerError::EmptyData("labeled file has no sentences"));
    }
    Ok(out)
}

/// Writes sentences back in the `token<TAB>tag` layout.
pub fn write_conll<W: Write>(sentences: &[TaggedSentence], tagset: &Tagset, mut w: W) -> std::io::Result<()> {
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            writeln!(w)?;
        }
        for (t, &tag) in s.tokens.tokens().iter().zip(&s.tags) {
            writeln!(w, "{t}\t{}", tagset.tag(tag))?;
        }
    }
    w.flush()
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaggerConfig {
    pub half_window: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub fine_tune_embeddings: bool,
    /// Divide each layer's rate by its fan-in.
    pub fan_in: bool,
    pub max_epochs: usize,
    /// Stop after this many epochs without a better selection accuracy.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            half_window: 2,
            hidden: 300,
            lr: 0.3,
            batch_size: 16,
            fine_tune_embeddings: true,
            fan_in: true,
            max_epochs: 20,
            patience: Some(3),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggerParams {
    pub embeddings: EmbeddingStore,
    pub tagset: Tagset,
    pub half_window: usize,
    /// `hidden × (2n+1)·M`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `tags × hidden`
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl TaggerParams {
    pub fn init<R: Rng + ?Sized>(
        embeddings: EmbeddingStore,
        tagset: Tagset,
        half_window: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(TaggerError::InvalidArgument("hidden size must be positive".into()));
        }
        let input = (2 * half_window + 1) * embeddings.dim();
        let w1 = Matrix::uniform(hidden, input, 1.0 / (input as f64).sqrt(), rng);
        let w2 = Matrix::uniform(tagset.len(), hidden, 1.0 / (hidden as f64).sqrt(), rng);
        Ok(TaggerParams {
            b2: vec![0.0; tagset.len()],
            embeddings,
            tagset,
            half_window,
            w1,
            b1: vec![0.0; hidden],
            w2,
        })
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn feature_len(&self) -> usize {
        (2 * self.half_window + 1) * self.embeddings.dim()
    }

    /// Vocabulary id for a surface token, with OOV mapped to UNK.
    pub fn encode_token(&self, token: &str) -> TokenId {
        encode_token(self.embeddings.vocab(), token)
    }

    fn encode(&self, sentence: &RawSentence) -> Vec<TokenId> {
        sentence.tokens().iter().map(|t| self.encode_token(t)).collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut enc = Encoder::new(Vec::new());
        enc.u64(self.half_window as u64)?;
        enc.u64(self.tagset.len() as u64)?;
        for t in self.tagset.tags() {
            enc.str(t)?;
        }
        let vocab = self.embeddings.vocab();
        enc.u64(vocab.len() as u64)?;
        for (t, c) in vocab.entries() {
            enc.str(t)?;
            enc.u64(*c)?;
        }
        enc.u64(self.embeddings.dim() as u64)?;
        enc.f64s(self.embeddings.matrix().as_slice())?;
        enc.u64(self.hidden() as u64)?;
        enc.f64s(self.w1.as_slice())?;
        enc.f64s(&self.b1)?;
        enc.f64s(self.w2.as_slice())?;
        enc.f64s(&self.b2)?;
        let payload = enc.into_inner();

        let mut out = Encoder::new(&mut w);
        out.bytes(TAGGER_MAGIC)?;
        out.u32(TAGGER_VERSION)?;
        out.bytes(&codec::seal(payload))?;
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let mut header = Decoder::new(&data[..]);
        header.magic(TAGGER_MAGIC)?;
        header.version(TAGGER_VERSION)?;
        let payload = codec::unseal(&data[8..])?;

        let mut dec = Decoder::new(payload);
        let half_window = dec.usize()?;
        let ntags = dec.usize()?;
        let tags = (0..ntags).map(|_| dec.string()).collect::<std::result::Result<Vec<_>, _>>()?;
        let tagset = Tagset::new(tags)?;
        let nvocab = dec.usize()?;
        let mut entries = Vec::with_capacity(nvocab.min(1 << 20));
        for _ in 0..nvocab {
            let t = dec.string()?;
            let c = dec.u64()?;
            entries.push((t, c));
        }
        let vocab = Vocabulary::from_entries(entries).map_err(|e| FormatError::Invalid(e.to_string()))?;
        let dim = dec.usize()?;
        let matrix = Matrix::from_vec(nvocab, dim, dec.f64s(nvocab * dim)?);
        let embeddings = EmbeddingStore::new(vocab, matrix)?;
        let hidden = dec.usize()?;
        let input = (2 * half_window + 1) * dim;
        let w1 = Matrix::from_vec(hidden, input, dec.f64s(hidden * input)?);
        let b1 = dec.f64s(hidden)?;
        let w2 = Matrix::from_vec(ntags, hidden, dec.f64s(ntags * hidden)?);
        let b2 = dec.f64s(ntags)?;
        dec.finish()?;
        Ok(TaggerParams {
            embeddings,
            tagset,
            half_window,
            w1,
            b1,
            w2,
            b2,
        })
    }
}

/// Normalized lookup; reserved and unknown tokens become UNK.
pub fn encode_token(vocab: &Vocabulary, token: &str) -> TokenId {
    let Ok(normalized) = normalize_token(token) else {
        return UNK_ID;
    };
    match vocab.id(&normalized) {
        Some(id) if !Vocabulary::is_special(id) => id,
        _ => UNK_ID,
    }
}

/// Whether a surface token has its own embedding row.
pub fn is_known(vocab: &Vocabulary, token: &str) -> bool {
    encode_token(vocab, token) != UNK_ID
}

/// Same vocabulary, fresh uniform vectors.
pub fn random_embeddings(store: &EmbeddingStore, seed: u64) -> EmbeddingStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Matrix::uniform(store.vocab().len(), store.dim(), EMBEDDING_INIT_RANGE, &mut rng);
    EmbeddingStore::new(store.vocab().clone(), m).expect("finite values")
}

/// Concatenated embedding rows of a window.
pub fn build_features(embeddings: &Matrix, window: &[TokenId], half_window: usize) -> Result<Vec<f64>> {
    if window.len() != 2 * half_window + 1 {
        return Err(TaggerError::InvalidArgument(format!(
            "window has {} ids, expected {}",
            window.len(),
            2 * half_window + 1
        )));
    }
    let mut f = Vec::with_capacity(window.len() * embeddings.cols());
    for &id in window {
        if id as usize >= embeddings.rows() {
            return Err(TaggerError::InvalidArgument(format!(
                "token id {id} out of range for {} rows",
                embeddings.rows()
            )));
        }
        f.extend_from_slice(embeddings.row(id as usize));
    }
    Ok(f)
}

struct Trace {
    activation: Vec<f64>,
    probs: Vec<f64>,
}

fn forward_trace(params: &TaggerParams, features: &[f64]) -> Trace {
    let mut activation = vec![0.0; params.hidden()];
    params.w1.affine(features, &params.b1, &mut activation);
    activation.iter_mut().for_each(|a| *a = a.tanh());
    let mut logits = vec![0.0; params.tagset.len()];
    params.w2.affine(&activation, &params.b2, &mut logits);
    Trace {
        activation,
        probs: softmax(&logits),
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Tag distribution for one feature vector.
pub fn tagger_forward(params: &TaggerParams, features: &[f64]) -> Result<Vec<f64>> {
    if features.len() != params.feature_len() {
        return Err(TaggerError::InvalidArgument(format!(
            "feature length {} does not match the network input {}",
            features.len(),
            params.feature_len()
        )));
    }
    Ok(forward_trace(params, features).probs)
}

/// `−ln p[gold]`
pub fn nll_loss(probs: &[f64], gold: usize) -> f64 {
    -probs[gold].ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggerGradients {
    pub embeddings: BTreeMap<TokenId, Vec<f64>>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl TaggerGradients {
    pub fn zeros(params: &TaggerParams) -> Self {
        TaggerGradients {
            embeddings: BTreeMap::new(),
            w1: Matrix::zeros(params.w1.rows(), params.w1.cols()),
            b1: vec![0.0; params.b1.len()],
            w2: Matrix::zeros(params.w2.rows(), params.w2.cols()),
            b2: vec![0.0; params.b2.len()],
        }
    }

    fn is_finite(&self) -> bool {
        self.embeddings.values().flatten().all(|x| x.is_finite())
            && self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().chain(&self.b2).all(|x| x.is_finite())
    }
}

/// NLL of one window and its gradients, added into `grads`.
pub fn accumulate_tagger_backward(
    params: &TaggerParams,
    window: &[TokenId],
    gold: usize,
    grads: &mut TaggerGradients,
) -> Result<f64> {
    if gold >= params.tagset.len() {
        return Err(TaggerError::InvalidArgument(format!("tag id {gold} out of range")));
    }
    let features = build_features(params.embeddings.matrix(), window, params.half_window)?;
    let trace = forward_trace(params, &features);
    let loss = nll_loss(&trace.probs, gold);

    let mut dlogits = trace.probs.clone();
    dlogits[gold] -= 1.0;
    axpy(1.0, &dlogits, &mut grads.b2);
    grads.w2.add_outer(1.0, &dlogits, &trace.activation);

    let mut da = vec![0.0; params.hidden()];
    params.w2.add_transposed_product(&dlogits, &mut da);
    let dz: Vec<f64> = da
        .iter()
        .zip(&trace.activation)
        .map(|(d, a)| d * (1.0 - a * a))
        .collect();
    axpy(1.0, &dz, &mut grads.b1);
    grads.w1.add_outer(1.0, &dz, &features);

    let m = params.embeddings.dim();
    let mut df = vec![0.0; features.len()];
    params.w1.add_transposed_product(&dz, &mut df);
    for (k, &id) in window.iter().enumerate() {
        let row = grads.embeddings.entry(id).or_insert_with(|| vec![0.0; m]);
        axpy(1.0, &df[k * m..(k + 1) * m], row);
    }
    Ok(loss)
}

pub fn tagger_backward(params: &TaggerParams, window: &[TokenId], gold: usize) -> Result<(f64, TaggerGradients)> {
    let mut g = TaggerGradients::zeros(params);
    let loss = accumulate_tagger_backward(params, window, gold, &mut g)?;
    Ok((loss, g))
}

fn argmax(probs: &[f64]) -> usize {
    // First maximum wins, so ties go to the lowest tag id.
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

fn tag_ids(params: &TaggerParams, ids: &[TokenId]) -> Vec<usize> {
    (0..ids.len())
        .map(|pos| {
            let window = context_window(ids, pos, params.half_window);
            let f = build_features(params.embeddings.matrix(), &window, params.half_window)
                .expect("window ids come from the vocabulary");
            argmax(&forward_trace(params, &f).probs)
        })
        .collect()
}

/// Most probable tag id for every token.
pub fn tag_sentence(params: &TaggerParams, sentence: &RawSentence) -> Vec<usize> {
    if sentence.is_empty() {
        return Vec::new();
    }
    tag_ids(params, &params.encode(sentence))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub known_correct: u64,
    pub known_total: u64,
    pub unknown_correct: u64,
    pub unknown_total: u64,
}

impl EvalReport {
    fn ratio(a: u64, b: u64) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    pub fn total(&self) -> u64 {
        self.known_total + self.unknown_total
    }

    pub fn accuracy_all(&self) -> f64 {
        Self::ratio(self.known_correct + self.unknown_correct, self.total())
    }

    pub fn accuracy_known(&self) -> f64 {
        Self::ratio(self.known_correct, self.known_total)
    }

    pub fn accuracy_unknown(&self) -> f64 {
        Self::ratio(self.unknown_correct, self.unknown_total)
    }

    pub fn record(&mut self, known: bool, correct: bool) {
        if known {
            self.known_total += 1;
            self.known_correct += correct as u64;
        } else {
            self.unknown_total += 1;
            self.unknown_correct += correct as u64;
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>10} {:>10} {:>10}", "Unknown", "Known", "All")?;
        write!(
            f,
            "{:>9.2}% {:>9.2}% {:>9.2}%",
            100.0 * self.accuracy_unknown(),
            100.0 * self.accuracy_known(),
            100.0 * self.accuracy_all()
        )
    }
}

/// Accuracy split by whether the token has its own embedding row.
pub fn evaluate(params: &TaggerParams, sentences: &[TaggedSentence]) -> Result<EvalReport> {
    if sentences.iter().all(|s| s.tokens.is_empty()) {
        return Err(TaggerError::EmptyData("no test tokens"));
    }
    let mut report = EvalReport::default();
    for s in sentences {
        let ids = params.encode(&s.tokens);
        let predicted = tag_ids(params, &ids);
        for ((&id, &gold), &pred) in ids.iter().zip(&s.tags).zip(&predicted) {
            report.record(id != UNK_ID, gold == pred);
        }
    }
    Ok(report)
}

/// Per-epoch training record.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Accuracy used for model selection: dev when given, else train.
    pub selection_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TaggerTraining {
    pub params: TaggerParams,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

struct Encoded {
    ids: Vec<TokenId>,
    tags: Vec<usize>,
}

fn layer_rates(config: &TaggerConfig, feature_len: usize) -> (f64, f64, f64) {
    if config.fan_in {
        (config.lr, config.lr / feature_len as f64, config.lr / config.hidden as f64)
    } else {
        (config.lr, config.lr, config.lr)
    }
}

fn apply(
    params: &mut TaggerParams,
    grads: &TaggerGradients,
    scale: f64,
    rates: (f64, f64, f64),
    fine_tune: bool,
) {
    let (emb, hidden, output) = rates;
    if fine_tune {
        let m = params.embeddings.matrix_mut();
        for (&id, g) in &grads.embeddings {
            axpy(-emb * scale, g, m.row_mut(id as usize));
        }
    }
    axpy(-hidden * scale, grads.w1.as_slice(), params.w1.as_mut_slice());
    axpy(-hidden * scale, &grads.b1, &mut params.b1);
    axpy(-output * scale, grads.w2.as_slice(), params.w2.as_mut_slice());
    axpy(-output * scale, &grads.b2, &mut params.b2);
}

fn accuracy_of(params: &TaggerParams, data: &[Encoded]) -> f64 {
    let mut correct = 0u64;
    let mut total = 0u64;
    for s in data {
        for (p, g) in tag_ids(params, &s.ids).into_iter().zip(&s.tags) {
            correct += (p == *g) as u64;
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Minibatch SGD on mean NLL. Returns the parameters with the best
/// selection accuracy.
pub fn train_tagger(
    embeddings: &EmbeddingStore,
    tagset: &Tagset,
    train: &[TaggedSentence],
    dev: Option<&[TaggedSentence]>,
    config: &TaggerConfig,
) -> Result<TaggerTraining> {
    if config.batch_size == 0 || config.hidden == 0 || !(config.lr > 0.0) || config.half_window == 0 {
        return Err(TaggerError::InvalidArgument(
            "batch size, hidden size, half window and learning rate must be positive".into(),
        ));
    }
    let vocab = embeddings.vocab();
    let encode = |s: &TaggedSentence| Encoded {
        ids: s.tokens.tokens().iter().map(|t| encode_token(vocab, t)).collect(),
        tags: s.tags.clone(),
    };
    let train_enc: Vec<Encoded> = train.iter().filter(|s| !s.tokens.is_empty()).map(encode).collect();
    if train_enc.is_empty() {
        return Err(TaggerError::EmptyData("no training sentences"));
    }
    for s in train.iter().chain(dev.unwrap_or_default()) {
        if s.tags.len() != s.tokens.len() || s.tags.iter().any(|&t| t >= tagset.len()) {
            return Err(TaggerError::InvalidArgument("tags do not match tokens or tagset".into()));
        }
    }
    let dev_enc: Option<Vec<Encoded>> = dev.map(|d| d.iter().map(encode).collect());

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = TaggerParams::init(
        embeddings.clone(),
        tagset.clone(),
        config.half_window,
        config.hidden,
        &mut rng,
    )?;
    let rates = layer_rates(config, params.feature_len());

    let mut positions: Vec<(usize, usize)> = train_enc
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.ids.len()).map(move |p| (si, p)))
        .collect();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, TaggerParams)> = None;
    let mut stale = 0usize;

    for epoch in 1..=config.max_epochs {
        positions.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in positions.chunks(config.batch_size) {
            let mut grads = TaggerGradients::zeros(&params);
            for &(si, pos) in batch {
                let s = &train_enc[si];
                let window = context_window(&s.ids, pos, config.half_window);
                loss_sum += accumulate_tagger_backward(&params, &window, s.tags[pos], &mut grads)?;
            }
            if !loss_sum.is_finite() {
                return Err(TaggerError::Divergence { epoch, what: "loss" });
            }
            if !grads.is_finite() {
                return Err(TaggerError::Divergence { epoch, what: "gradient" });
            }
            apply(
                &mut params,
                &grads,
                1.0 / batch.len() as f64,
                rates,
                config.fine_tune_embeddings,
            );
        }
        let train_accuracy = accuracy_of(&params, &train_enc);
        let selection_accuracy = match &dev_enc {
            Some(d) if !d.is_empty() => accuracy_of(&params, d),
            _ => train_accuracy,
        };
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / positions.len() as f64,
            train_accuracy,
            selection_accuracy,
        };
        log::info!(
            "tagger epoch {epoch}: loss {:.5} train acc {:.4} selection acc {:.4}",
            stats.train_loss,
            train_accuracy,
            selection_accuracy
        );
        history.push(stats);
        if best.as_ref().is_none_or(|(acc, _, _)| selection_accuracy > *acc) {
            best = Some((selection_accuracy, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if config.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (params, 0),
    };
    Ok(TaggerTraining {
        params,
        history,
        best_epoch,
    })
}
