//! Text normalization, vocabulary construction, window generation and
//! coverage statistics.
//!
//! Sentences arrive one per line. Tokens keep their case; digits are folded to
//! `#` and separators inside a token are dropped so that `co-operate` and
//! `cooperate` share a vocabulary entry.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;
use thiserror::Error;
use unicode_properties::{GeneralCategory, GeneralCategoryGroup, UnicodeGeneralCategory};

/// Token id into a [`Vocabulary`].
pub type TokenId = u32;

pub const UNK: &str = "⟨UNK⟩";
pub const S_OPEN: &str = "⟨S⟩";
pub const S_CLOSE: &str = "⟨/S⟩";
pub const PAD: &str = "⟨PAD⟩";

pub const UNK_ID: TokenId = 0;
pub const S_OPEN_ID: TokenId = 1;
pub const S_CLOSE_ID: TokenId = 2;
pub const PAD_ID: TokenId = 3;

/// Number of reserved ids at the start of every vocabulary.
pub const NUM_SPECIALS: usize = 4;

pub const SPECIALS: [&str; NUM_SPECIALS] = [UNK, S_OPEN, S_CLOSE, PAD];

/// Separators removed when they occur strictly inside a token.
const MID_TOKEN_SEPARATORS: [char; 5] = ['-', '(', ')', '[', ']'];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("cannot corrupt: vocabulary has {0} non-special entries, need at least 2")]
    CannotCorrupt(usize),
    #[error("vocabulary file line {line}: {message}")]
    VocabFormat { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Folds digits to `#` and drops separators that sit inside the token.
///
/// ```
/// assert_eq!(wordrank::corpus::normalize_token("1999").unwrap(), "####");
/// assert_eq!(wordrank::corpus::normalize_token("co-operate").unwrap(), "cooperate");
/// ```
pub fn normalize_token(token: &str) -> Result<String> {
    if token.is_empty() {
        return Err(CorpusError::InvalidArgument("empty token".into()));
    }
    if token.chars().any(char::is_whitespace) {
        return Err(CorpusError::InvalidArgument(format!(
            "token {token:?} contains whitespace"
        )));
    }

    let folded: Vec<char> = token
        .chars()
        .map(|c| {
            if c.general_category() == GeneralCategory::DecimalNumber {
                '#'
            } else {
                c
            }
        })
        .collect();

    let last = folded.len() - 1;
    let stripped: String = folded
        .iter()
        .enumerate()
        .filter(|&(i, c)| i == 0 || i == last || !MID_TOKEN_SEPARATORS.contains(c))
        .map(|(_, &c)| c)
        .collect();

    if stripped.is_empty() {
        Ok(token.to_string())
    } else {
        Ok(stripped)
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || c.general_category_group() == GeneralCategoryGroup::Punctuation
}

/// A sentence as a list of surface tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawSentence {
    tokens: Vec<String>,
}

impl RawSentence {
    /// Builds a sentence, rejecting empty tokens or tokens with whitespace.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        for t in &tokens {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(CorpusError::InvalidArgument(format!("bad token {t:?}")));
            }
        }
        Ok(RawSentence { tokens })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.tokens
    }
}

impl<S: Into<String>> FromIterator<S> for RawSentence {
    /// Collects without validation; callers are expected to pass clean tokens.
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        RawSentence {
            tokens: iter.into_iter().map(Into::into).collect(),
        }
    }
}

/// Splits on whitespace, peels leading and trailing punctuation into their own
/// tokens and normalizes each resulting token.
pub fn tokenize_line(line: &str) -> RawSentence {
    split_punctuation(line)
        .into_iter()
        .map(|t| normalize_token(&t).expect("non-empty token without whitespace"))
        .collect()
}

/// Splits on whitespace only; each field is a final token.
pub fn split_pretokenized(line: &str, normalize: bool) -> RawSentence {
    line.split_whitespace()
        .map(|t| {
            if normalize {
                normalize_token(t).expect("whitespace-free field")
            } else {
                t.to_string()
            }
        })
        .collect()
}

/// How corpus lines are turned into sentences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LineReader {
    pub pretokenized: bool,
    pub normalize: bool,
}

impl Default for LineReader {
    fn default() -> Self {
        LineReader {
            pretokenized: false,
            normalize: true,
        }
    }
}

impl LineReader {
    pub fn sentence(&self, line: &str) -> RawSentence {
        if self.pretokenized {
            split_pretokenized(line, self.normalize)
        } else if self.normalize {
            tokenize_line(line)
        } else {
            split_punctuation(line).into_iter().collect()
        }
    }

    /// Reads every non-empty sentence from a line-oriented source.
    pub fn read_all<R: BufRead>(&self, reader: R) -> Result<Vec<RawSentence>> {
        let mut out = Vec::new();
        for line in reader.lines() {
            let s = self.sentence(&line?);
            if !s.is_empty() {
                out.push(s);
            }
        }
        Ok(out)
    }
}

fn split_punctuation(line: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in line.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && is_punctuation(chars[start]) {
            start += 1;
        }
        while end > start && is_punctuation(chars[end - 1]) {
            end -= 1;
        }
        tokens.extend(chars[..start].iter().map(|c| c.to_string()));
        if start < end {
            tokens.push(chars[start..end].iter().collect());
        }
        tokens.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    tokens
}

/// Token frequency table. Shards can be counted independently and merged.
#[derive(Clone, Debug, Default)]
pub struct TokenCounts {
    counts: HashMap<String, u64>,
}

impl TokenCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_sentence(&mut self, sentence: &RawSentence) {
        for t in sentence.tokens() {
            *self.counts.entry(t.clone()).or_insert(0) += 1;
        }
    }

    pub fn merge(&mut self, other: TokenCounts) {
        for (t, c) in other.counts {
            *self.counts.entry(t).or_insert(0) += c;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Ordered token/id mapping with the four reserved entries at ids 0..3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<(String, u64)>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Counts tokens and keeps the `max_size` most frequent. Ties go to the
    /// lexicographically smaller token.
    pub fn build<'a, I>(sentences: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a RawSentence>,
    {
        let mut counts = TokenCounts::new();
        for s in sentences {
            counts.add_sentence(s);
        }
        Self::from_counts(counts, max_size)
    }

    pub fn from_counts(counts: TokenCounts, max_size: usize) -> Result<Self> {
        if max_size == 0 {
            return Err(CorpusError::InvalidArgument("max_size must be ≥ 1".into()));
        }
        if counts.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts
            .counts
            .into_iter()
            .filter(|(t, _)| {
                let special = SPECIALS.contains(&t.as_str());
                if special {
                    log::warn!("dropping corpus token {t:?}: collides with a reserved token");
                }
                !special
            })
            .collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.as_bytes().cmp(b.0.as_bytes())));
        ranked.truncate(max_size);

        let entries = SPECIALS
            .iter()
            .map(|s| (s.to_string(), 0))
            .chain(ranked)
            .collect();
        Ok(Self::from_entries_unchecked(entries))
    }

    /// Builds a vocabulary from entries already in id order. The first four
    /// must be the reserved tokens and no token may repeat.
    pub fn from_entries(entries: Vec<(String, u64)>) -> Result<Self> {
        if entries.len() < NUM_SPECIALS {
            return Err(CorpusError::InvalidArgument(format!(
                "vocabulary has {} entries, the reserved tokens alone need {NUM_SPECIALS}",
                entries.len()
            )));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if entries[i].0 != *s {
                return Err(CorpusError::InvalidArgument(format!(
                    "id {i} must be {s}, found {:?}",
                    entries[i].0
                )));
            }
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for (t, _) in &entries {
            if !seen.insert(t.as_str()) {
                return Err(CorpusError::InvalidArgument(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self::from_entries_unchecked(entries))
    }

    fn from_entries_unchecked(entries: Vec<(String, u64)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { entries, index }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of entries excluding the reserved tokens.
    pub fn num_regular(&self) -> usize {
        self.entries.len() - NUM_SPECIALS
    }

    pub fn entries(&self) -> &[(String, u64)] {
        &self.entries
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id for a token, falling back to UNK.
    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.entries.get(id as usize).map(|(t, _)| t.as_str())
    }

    pub fn count(&self, id: TokenId) -> Option<u64> {
        self.entries.get(id as usize).map(|&(_, c)| c)
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Whether a surface token is a regular (non-reserved) entry.
    pub fn contains_regular(&self, token: &str) -> bool {
        self.id(token).is_some_and(|id| !Self::is_special(id))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#vocab {}", self.entries.len())?;
        for (t, c) in &self.entries {
            writeln!(w, "{t}\t{c}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let err = |line: usize, message: String| CorpusError::VocabFormat { line, message };
        let mut lines = r.lines();
        let header = match lines.next() {
            Some(l) => l?,
            None => return Err(err(1, "empty vocabulary file".into())),
        };
        let size: usize = header
            .strip_prefix("#vocab ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| err(1, format!("expected `#vocab <size>`, found {header:?}")))?;

        let mut entries = Vec::with_capacity(size);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.is_empty() {
                continue;
            }
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| err(lineno, "expected `token<TAB>count`".into()))?;
            let count: u64 = count
                .parse()
                .map_err(|_| err(lineno, format!("bad count {count:?}")))?;
            entries.push((tok.to_string(), count));
        }
        if entries.len() != size {
            return Err(err(
                1,
                format!("header declares {size} entries, file has {}", entries.len()),
            ));
        }
        Self::from_entries(entries).map_err(|e| err(2, e.to_string()))
    }
}

/// Sentence as vocabulary ids, OOV tokens already mapped to UNK.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncodedSentence {
    pub ids: Vec<TokenId>,
}

pub fn encode_sentence(sentence: &RawSentence, vocab: &Vocabulary) -> EncodedSentence {
    EncodedSentence {
        ids: sentence
            .tokens()
            .iter()
            .map(|t| {
                // A corpus token spelled like a reserved token is OOV.
                match vocab.id(t) {
                    Some(id) if !Vocabulary::is_special(id) => id,
                    _ => UNK_ID,
                }
            })
            .collect(),
    }
}

/// Window of `2n+1` ids around `position` of the bracketed sentence
/// `⟨S⟩ ids ⟨/S⟩`, padded with PAD past either end. `position` indexes the
/// unbracketed `ids`.
pub fn context_window(ids: &[TokenId], position: usize, n: usize) -> Vec<TokenId> {
    debug_assert!(position < ids.len());
    let bracketed_len = ids.len() + 2;
    let center = position + 1;
    (0..2 * n + 1)
        .map(|k| {
            let j = center as isize + k as isize - n as isize;
            if j < 0 || j as usize >= bracketed_len {
                PAD_ID
            } else if j == 0 {
                S_OPEN_ID
            } else if j as usize == bracketed_len - 1 {
                S_CLOSE_ID
            } else {
                ids[j as usize - 1]
            }
        })
        .collect()
}

/// An original window and a copy whose center word was swapped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowExample {
    pub original: Vec<TokenId>,
    pub corrupted: Vec<TokenId>,
}

impl WindowExample {
    pub fn center_index(&self) -> usize {
        self.original.len() / 2
    }

    pub fn half_window(&self) -> usize {
        self.original.len() / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowOptions {
    pub half_window: usize,
    /// Also emit windows centered on UNK.
    pub allow_unk_centers: bool,
}

impl WindowOptions {
    pub fn new(half_window: usize) -> Self {
        WindowOptions {
            half_window,
            allow_unk_centers: false,
        }
    }
}

/// Uniform draw over regular ids, redrawn until it differs from `avoid`.
pub fn sample_corruption<R: Rng + ?Sized>(vocab_size: usize, avoid: TokenId, rng: &mut R) -> TokenId {
    loop {
        let c = rng.gen_range(NUM_SPECIALS..vocab_size) as TokenId;
        if c != avoid {
            return c;
        }
    }
}

/// One (original, corrupted) pair per real token of the sentence.
pub fn generate_windows<R: Rng + ?Sized>(
    sentence: &EncodedSentence,
    opts: WindowOptions,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Vec<WindowExample>> {
    let mut out = Vec::with_capacity(sentence.ids.len());
    extend_windows(sentence, opts, vocab.len(), rng, &mut out)?;
    Ok(out)
}

/// Like [`generate_windows`] but appends to `out` and takes only the
/// vocabulary size.
pub fn extend_windows<R: Rng + ?Sized>(
    sentence: &EncodedSentence,
    opts: WindowOptions,
    vocab_size: usize,
    rng: &mut R,
    out: &mut Vec<WindowExample>,
) -> Result<()> {
    if opts.half_window == 0 {
        return Err(CorpusError::InvalidArgument("half window must be ≥ 1".into()));
    }
    let regular = vocab_size.saturating_sub(NUM_SPECIALS);
    if regular < 2 {
        return Err(CorpusError::CannotCorrupt(regular));
    }
    let n = opts.half_window;
    for (pos, &id) in sentence.ids.iter().enumerate() {
        if id == UNK_ID && !opts.allow_unk_centers {
            continue;
        }
        if Vocabulary::is_special(id) && id != UNK_ID {
            continue;
        }
        let original = context_window(&sentence.ids, pos, n);
        let mut corrupted = original.clone();
        corrupted[n] = sample_corruption(vocab_size, id, rng);
        out.push(WindowExample {
            original,
            corrupted,
        });
    }
    Ok(())
}

/// Train/dev/test fractions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    train: f64,
    dev: f64,
    test: f64,
}

impl SplitSpec {
    pub fn new(train: f64, dev: f64, test: f64) -> Result<Self> {
        let ok = [train, dev, test].iter().all(|f| f.is_finite() && *f >= 0.0)
            && ((train + dev + test) - 1.0).abs() < 1e-9;
        if !ok {
            return Err(CorpusError::InvalidArgument(format!(
                "split fractions ({train}, {dev}, {test}) must be non-negative and sum to 1"
            )));
        }
        Ok(SplitSpec { train, dev, test })
    }

    pub fn train(&self) -> f64 {
        self.train
    }

    pub fn dev(&self) -> f64 {
        self.dev
    }

    pub fn test(&self) -> f64 {
        self.test
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.90,
            dev: 0.05,
            test: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

/// Assigns each item independently with one uniform draw.
pub fn split_corpus<T, I, R>(items: I, spec: SplitSpec, rng: &mut R) -> Splits<T>
where
    I: IntoIterator<Item = T>,
    R: Rng + ?Sized,
{
    let mut splits = Splits {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for item in items {
        let u: f64 = rng.gen();
        if u < spec.train {
            splits.train.push(item);
        } else if u < spec.train + spec.dev {
            splits.dev.push(item);
        } else {
            splits.test.push(item);
        }
    }
    splits
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CoverageStats {
    pub total_tokens: u64,
    pub covered_tokens: u64,
    pub total_word_types: u64,
    pub covered_word_types: u64,
}

impl CoverageStats {
    /// Fraction of token occurrences found in the vocabulary; 0 when empty.
    pub fn token_coverage(&self) -> f64 {
        ratio(self.covered_tokens, self.total_tokens)
    }

    /// Fraction of distinct word types found in the vocabulary; 0 when empty.
    pub fn word_coverage(&self) -> f64 {
        ratio(self.covered_word_types, self.total_word_types)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl fmt::Display for CoverageStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tokens {}/{} ({:.2}%), words {}/{} ({:.2}%)",
            self.covered_tokens,
            self.total_tokens,
            100.0 * self.token_coverage(),
            self.covered_word_types,
            self.total_word_types,
            100.0 * self.word_coverage()
        )
    }
}

pub fn coverage_stats<'a, I>(sentences: I, vocab: &Vocabulary) -> CoverageStats
where
    I: IntoIterator<Item = &'a RawSentence>,
{
    let mut stats = CoverageStats::default();
    let mut types: HashSet<&'a str> = HashSet::new();
    for s in sentences {
        for t in s.tokens() {
            stats.total_tokens += 1;
            let known = vocab.contains_regular(t);
            if known {
                stats.covered_tokens += 1;
            }
            if types.insert(t.as_str()) {
                stats.total_word_types += 1;
                if known {
                    stats.covered_word_types += 1;
                }
            }
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sent(tokens: &[&str]) -> RawSentence {
        RawSentence::new(tokens.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn regular(v: &Vocabulary) -> Vec<(&str, u64)> {
        v.entries()[NUM_SPECIALS..]
            .iter()
            .map(|(t, c)| (t.as_str(), *c))
            .collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_token("1999").unwrap(), "####");
        assert_eq!(normalize_token("co-operate").unwrap(), "cooperate");
        assert_eq!(normalize_token("apple").unwrap(), "apple");
        assert_eq!(normalize_token("-abc-").unwrap(), "-abc-");
        assert_eq!(normalize_token("f(x)y").unwrap(), "fxy");
        assert_eq!(normalize_token("a[b]").unwrap(), "ab]");
        // Arabic-Indic digits are decimal digits too.
        assert_eq!(normalize_token("١٩").unwrap(), "##");
        assert_eq!(normalize_token("-").unwrap(), "-");
        assert_eq!(normalize_token("--").unwrap(), "--");
        assert_eq!(normalize_token("---").unwrap(), "--");
    }

    #[test]
    fn normalize_rejects_bad_input() {
        assert!(matches!(normalize_token(""), Err(CorpusError::InvalidArgument(_))));
        assert!(normalize_token("a b").is_err());
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize_line("Hello, world.").tokens(), ["Hello", ",", "world", "."]);
        assert_eq!(tokenize_line("born in 1999.").tokens(), ["born", "in", "####", "."]);
        assert!(tokenize_line("").is_empty());
        assert!(tokenize_line("   \t ").is_empty());
        assert_eq!(tokenize_line("(co-operate)").tokens(), ["(", "cooperate", ")"]);
        assert_eq!(tokenize_line("Apple apple").tokens(), ["Apple", "apple"]);
    }

    #[test]
    fn pretokenized_mode() {
        assert_eq!(split_pretokenized("a-b 12 ,", true).tokens(), ["ab", "##", ","]);
        assert_eq!(split_pretokenized("a-b 12 ,", false).tokens(), ["a-b", "12", ","]);
    }

    #[test]
    fn vocabulary_examples() {
        let v = Vocabulary::build(&[sent(&["a", "b", "a"]), sent(&["a", "c"])], 2).unwrap();
        assert_eq!(regular(&v), [("a", 3), ("b", 1)]);
        let v = Vocabulary::build(&[sent(&["x"])], 10).unwrap();
        assert_eq!(regular(&v), [("x", 1)]);
        let v = Vocabulary::build(&[sent(&["a", "b"]), sent(&["b"])], 1).unwrap();
        assert_eq!(regular(&v), [("b", 2)]);
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.entries()[i], (s.to_string(), 0));
        }
    }

    #[test]
    fn vocabulary_errors_and_collisions() {
        assert!(matches!(
            Vocabulary::build(std::iter::empty::<&RawSentence>(), 5),
            Err(CorpusError::EmptyCorpus)
        ));
        assert!(Vocabulary::build(&[sent(&["a"])], 0).is_err());
        let v = Vocabulary::build(&[sent(&[PAD, "a", PAD])], 5).unwrap();
        assert_eq!(regular(&v), [("a", 1)]);
        assert_eq!(v.count(PAD_ID), Some(0));
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = Vocabulary::build(&[sent(&["b", "a", "b", "ü"])], 10).unwrap();
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("#vocab 7\n⟨UNK⟩\t0\n⟨S⟩\t0\n⟨/S⟩\t0\n⟨PAD⟩\t0\nb\t2\n"));
        assert_eq!(Vocabulary::read(&buf[..]).unwrap(), v);

        assert!(Vocabulary::read(&b""[..]).is_err());
        assert!(Vocabulary::read(&b"#vocab 5\n"[..]).is_err());
        assert!(Vocabulary::read(&b"vocab 1\nx\t1\n"[..]).is_err());
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::build(&[sent(&["a"])], 10).unwrap();
        let a = v.id("a").unwrap();
        assert_eq!(encode_sentence(&sent(&["a", "zzz"]), &v).ids, [a, UNK_ID]);
        assert!(encode_sentence(&RawSentence::default(), &v).ids.is_empty());
        assert_eq!(encode_sentence(&sent(&["a", "a"]), &v).ids, [a, a]);
        assert_eq!(encode_sentence(&sent(&[PAD]), &v).ids, [UNK_ID]);
    }

    fn vocab_abc() -> Vocabulary {
        Vocabulary::build(&[sent(&["w1", "w2", "w3", "w4"])], 10).unwrap()
    }

    #[test]
    fn single_token_window() {
        let v = vocab_abc();
        let w = v.id("w1").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ws = generate_windows(&EncodedSentence { ids: vec![w] }, WindowOptions::new(2), &v, &mut rng)
            .unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!(ws[0].original, [PAD_ID, S_OPEN_ID, w, S_CLOSE_ID, PAD_ID]);
        assert_eq!(ws[0].center_index(), 2);
    }

    #[test]
    fn one_window_per_token() {
        let v = vocab_abc();
        let ids: Vec<_> = ["w1", "w2", "w3"].iter().map(|t| v.id(t).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ws = generate_windows(&EncodedSentence { ids: ids.clone() }, WindowOptions::new(2), &v, &mut rng)
            .unwrap();
        let centers: Vec<_> = ws.iter().map(|w| w.original[2]).collect();
        assert_eq!(centers, ids);
    }

    #[test]
    fn unk_centers_are_skipped_unless_allowed() {
        let v = vocab_abc();
        let w = v.id("w1").unwrap();
        let s = EncodedSentence { ids: vec![w, UNK_ID, w] };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(generate_windows(&s, WindowOptions::new(1), &v, &mut rng).unwrap().len(), 2);
        let opts = WindowOptions {
            half_window: 1,
            allow_unk_centers: true,
        };
        let ws = generate_windows(&s, opts, &v, &mut rng).unwrap();
        assert_eq!(ws.len(), 3);
        assert_eq!(ws[1].original, [w, UNK_ID, w]);
        assert!(!Vocabulary::is_special(ws[1].corrupted[1]));
    }

    #[test]
    fn window_errors() {
        let v = Vocabulary::build(&[sent(&["only"])], 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = EncodedSentence { ids: vec![4] };
        assert!(matches!(
            generate_windows(&s, WindowOptions::new(2), &v, &mut rng),
            Err(CorpusError::CannotCorrupt(1))
        ));
        let v = vocab_abc();
        assert!(generate_windows(&s, WindowOptions::new(0), &v, &mut rng).is_err());
    }

    #[test]
    fn split_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = split_corpus(0..100, SplitSpec::new(1.0, 0.0, 0.0).unwrap(), &mut rng);
        assert_eq!(s.train.len(), 100);
        assert!(s.dev.is_empty() && s.test.is_empty());

        let a = split_corpus(0..1000, SplitSpec::default(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = split_corpus(0..1000, SplitSpec::default(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);

        assert!(SplitSpec::new(0.5, 0.5, 0.5).is_err());
        assert!(SplitSpec::new(1.2, -0.2, 0.0).is_err());
    }

    #[test]
    fn coverage_examples() {
        let v = Vocabulary::build(&[sent(&["a"])], 10).unwrap();
        let c = coverage_stats(&[sent(&["a", "a", "b"])], &v);
        assert_eq!(
            c,
            CoverageStats {
                total_tokens: 3,
                covered_tokens: 2,
                total_word_types: 2,
                covered_word_types: 1
            }
        );
        assert!((c.token_coverage() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.word_coverage(), 0.5);

        let full = coverage_stats(&[sent(&["a"])], &v);
        assert_eq!(full.token_coverage(), 1.0);
        assert_eq!(full.word_coverage(), 1.0);

        let empty = coverage_stats(std::iter::empty::<&RawSentence>(), &v);
        assert_eq!(empty, CoverageStats::default());
        assert_eq!(empty.token_coverage(), 0.0);
    }

    fn token_strategy() -> impl Strategy<Value = String> {
        "[a-c0-9()\\[\\]\\-]{1,8}"
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(t in token_strategy()) {
            let once = normalize_token(&t).unwrap();
            prop_assert_eq!(normalize_token(&once).unwrap(), once);
        }

        #[test]
        fn normalize_is_idempotent_unicode(t in "\\PZ{1,6}") {
            prop_assume!(!t.chars().any(char::is_whitespace));
            let once = normalize_token(&t).unwrap();
            prop_assert_eq!(normalize_token(&once).unwrap(), once);
        }

        #[test]
        fn vocabulary_is_order_free(
            sents in prop::collection::vec(prop::collection::vec("[a-e]{1,2}", 1..6), 1..8),
            max in 1usize..12,
        ) {
            let sentences: Vec<RawSentence> = sents.into_iter().map(RawSentence::from_iter).collect();
            let v1 = Vocabulary::build(&sentences, max).unwrap();
            let mut rev = sentences.clone();
            rev.reverse();
            let v2 = Vocabulary::build(&rev, max).unwrap();
            prop_assert_eq!(&v1, &v2);
            for (i, (t, _)) in v1.entries().iter().enumerate() {
                prop_assert_eq!(v1.id(t), Some(i as TokenId));
            }
            let counts: Vec<u64> = v1.entries()[NUM_SPECIALS..].iter().map(|e| e.1).collect();
            prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(v1.num_regular() <= max);
        }
    }
}
