//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wordrank::corpus::{RawSentence, TokenId, Vocabulary, PAD_ID, SPECIALS, S_CLOSE_ID, S_OPEN_ID};
use wordrank::embeddings::EmbeddingStore;
use wordrank::corpus::WindowExample;
use wordrank::model::{backward, forward_score, pair_loss, ModelConfig, PairGradients, RankingParams};
use wordrank::tagger::{self, nll_loss, tagger_backward, TaggerGradients, TaggerParams, Tagset};
use wordrank::tensor::Matrix;

pub const FD_EPS: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Differences below this are finite-difference roundoff (about
/// ε_mach·|loss|/ε ≈ 1e-11), not gradient error.
pub const FD_ABS_FLOOR: f64 = 1e-9;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < FD_ABS_FLOOR {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Worst discrepancies seen while comparing a gradient against central
/// differences.
#[derive(Clone, Copy, Debug, Default)]
pub struct Tally {
    pub relative: f64,
    pub absolute: f64,
}

impl Tally {
    fn add(&mut self, analytic: f64, numeric: f64) {
        self.relative = self.relative.max(relative_error(analytic, numeric));
        self.absolute = self.absolute.max((analytic - numeric).abs());
    }

    pub fn merge(&mut self, other: Tally) {
        self.relative = self.relative.max(other.relative);
        self.absolute = self.absolute.max(other.absolute);
    }
}

/// Central difference of `loss` with respect to the scalar picked by `slot`.
fn central<P>(p: &mut P, slot: &dyn Fn(&mut P) -> &mut f64, loss: &dyn Fn(&P) -> f64) -> f64 {
    let orig = *slot(p);
    *slot(p) = orig + FD_EPS;
    let plus = loss(p);
    *slot(p) = orig - FD_EPS;
    let minus = loss(p);
    *slot(p) = orig;
    (plus - minus) / (2.0 * FD_EPS)
}

pub fn ranking_loss(p: &RankingParams, ex: &WindowExample) -> f64 {
    let o = forward_score(p, &ex.original).unwrap().score;
    let c = forward_score(p, &ex.corrupted).unwrap().score;
    pair_loss(o, c)
}

/// Distance of the hinge argument from its kink.
pub fn hinge_margin(p: &RankingParams, ex: &WindowExample) -> f64 {
    let o = forward_score(p, &ex.original).unwrap().score;
    let c = forward_score(p, &ex.corrupted).unwrap().score;
    (1.0 - o + c).abs()
}

/// Largest relative error between the analytic gradient and central
/// differences over every scalar parameter.
pub fn ranking_gradient_error(params: &RankingParams, ex: &WindowExample) -> f64 {
    ranking_gradient_check(params, ex).relative
}

pub fn ranking_gradient_check(params: &RankingParams, ex: &WindowExample) -> Tally {
    let (_, g) = backward(params, ex).unwrap();
    ranking_tally(params, ex, &g)
}

/// As [`ranking_gradient_error`] for a supplied gradient.
pub fn ranking_gradient_error_of(params: &RankingParams, ex: &WindowExample, g: &PairGradients) -> f64 {
    ranking_tally(params, ex, g).relative
}

fn ranking_tally(params: &RankingParams, ex: &WindowExample, g: &PairGradients) -> Tally {
    let mut p = params.clone();
    let loss = |p: &RankingParams| ranking_loss(p, ex);
    let mut worst = Tally::default();
    let (v, m) = (p.embeddings.rows(), p.embeddings.cols());
    for r in 0..v {
        for c in 0..m {
            let analytic = g.embeddings.get(&(r as TokenId)).map_or(0.0, |row| row[c]);
            let numeric = central(&mut p, &|p: &mut RankingParams| &mut p.embeddings.as_mut_slice()[r * m + c], &loss);
            worst.add(analytic, numeric);
        }
    }
    for i in 0..p.w1.as_slice().len() {
        let numeric = central(&mut p, &|p: &mut RankingParams| &mut p.w1.as_mut_slice()[i], &loss);
        worst.add(g.w1.as_slice()[i], numeric);
    }
    for i in 0..p.b1.len() {
        let numeric = central(&mut p, &|p: &mut RankingParams| &mut p.b1[i], &loss);
        worst.add(g.b1[i], numeric);
    }
    for i in 0..p.w2.len() {
        let numeric = central(&mut p, &|p: &mut RankingParams| &mut p.w2[i], &loss);
        worst.add(g.w2[i], numeric);
    }
    let numeric = central(&mut p, &|p: &mut RankingParams| &mut p.b2, &loss);
    worst.add(g.b2, numeric);
    worst
}

pub fn tagger_loss(p: &TaggerParams, window: &[TokenId], gold: usize) -> f64 {
    let f = tagger::build_features(p.embeddings.matrix(), window, p.half_window).unwrap();
    nll_loss(&tagger::tagger_forward(p, &f).unwrap(), gold)
}

pub fn tagger_gradient_error(params: &TaggerParams, window: &[TokenId], gold: usize) -> f64 {
    tagger_gradient_check(params, window, gold).relative
}

pub fn tagger_gradient_check(params: &TaggerParams, window: &[TokenId], gold: usize) -> Tally {
    let (_, g) = tagger_backward(params, window, gold).unwrap();
    tagger_tally(params, window, gold, &g)
}

pub fn tagger_gradient_error_of(params: &TaggerParams, window: &[TokenId], gold: usize, g: &TaggerGradients) -> f64 {
    tagger_tally(params, window, gold, g).relative
}

fn tagger_tally(params: &TaggerParams, window: &[TokenId], gold: usize, g: &TaggerGradients) -> Tally {
    let mut p = params.clone();
    let loss = |p: &TaggerParams| tagger_loss(p, window, gold);
    let mut worst = Tally::default();
    let (v, m) = (p.embeddings.matrix().rows(), p.embeddings.dim());
    for r in 0..v {
        for c in 0..m {
            let analytic = g.embeddings.get(&(r as TokenId)).map_or(0.0, |row| row[c]);
            let numeric = central(
                &mut p,
                &|p: &mut TaggerParams| &mut p.embeddings.matrix_mut().as_mut_slice()[r * m + c],
                &loss,
            );
            worst.add(analytic, numeric);
        }
    }
    for i in 0..p.w1.as_slice().len() {
        let numeric = central(&mut p, &|p: &mut TaggerParams| &mut p.w1.as_mut_slice()[i], &loss);
        worst.add(g.w1.as_slice()[i], numeric);
    }
    for i in 0..p.b1.len() {
        let numeric = central(&mut p, &|p: &mut TaggerParams| &mut p.b1[i], &loss);
        worst.add(g.b1[i], numeric);
    }
    for i in 0..p.w2.as_slice().len() {
        let numeric = central(&mut p, &|p: &mut TaggerParams| &mut p.w2.as_mut_slice()[i], &loss);
        worst.add(g.w2.as_slice()[i], numeric);
    }
    for i in 0..p.b2.len() {
        let numeric = central(&mut p, &|p: &mut TaggerParams| &mut p.b2[i], &loss);
        worst.add(g.b2[i], numeric);
    }
    worst
}

/// Small random ranking problem: V ≤ 50, M ≤ 8, H ≤ 4, n ≤ 2. Biases are
/// randomized too so their gradients are exercised away from zero.
pub fn random_ranking_case<R: Rng>(rng: &mut R) -> (RankingParams, WindowExample) {
    let n = rng.gen_range(1..=2);
    let m = rng.gen_range(1..=8);
    let h = rng.gen_range(1..=4);
    let v = rng.gen_range(6..=50);
    let config = ModelConfig::new(n, m, h, v).unwrap();
    let mut p = RankingParams::init(config, rng);
    p.b1.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    p.b2 = rng.gen_range(-0.5..0.5);
    let original: Vec<TokenId> = (0..2 * n + 1).map(|_| rng.gen_range(0..v) as TokenId).collect();
    let mut corrupted = original.clone();
    corrupted[n] = loop {
        let c = rng.gen_range(4..v) as TokenId;
        if c != original[n] {
            break c;
        }
    };
    (p, WindowExample { original, corrupted })
}

pub fn vocab_of(tokens: &[String]) -> Vocabulary {
    let entries = SPECIALS
        .iter()
        .map(|s| (s.to_string(), 0))
        .chain(tokens.iter().map(|t| (t.clone(), 1)))
        .collect();
    Vocabulary::from_entries(entries).unwrap()
}

/// Digit-free synthetic word for index `i`, so normalization leaves it alone.
pub fn word(i: usize) -> String {
    let mut s = String::from("w");
    let mut k = i;
    loop {
        s.push((b'a' + (k % 26) as u8) as char);
        k /= 26;
        if k == 0 {
            return s;
        }
    }
}

pub fn random_store<R: Rng>(rng: &mut R, regular: usize, dim: usize) -> EmbeddingStore {
    let tokens: Vec<String> = (0..regular).map(word).collect();
    let vocab = vocab_of(&tokens);
    let m = Matrix::uniform(vocab.len(), dim, 1.0, rng);
    EmbeddingStore::new(vocab, m).unwrap()
}

pub fn random_tagger_case<R: Rng>(rng: &mut R) -> (TaggerParams, Vec<TokenId>, usize) {
    let n = rng.gen_range(1..=2);
    let m = rng.gen_range(1..=8);
    let h = rng.gen_range(1..=4);
    let v = rng.gen_range(2..=46);
    let ntags = rng.gen_range(2..=12);
    let store = random_store(rng, v, m);
    let tagset = Tagset::new((0..ntags).map(|i| format!("T{i}")).collect()).unwrap();
    let mut p = TaggerParams::init(store, tagset, n, h, rng).unwrap();
    p.b1.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    p.b2.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    let window = (0..2 * n + 1).map(|_| rng.gen_range(0..v + 4) as TokenId).collect();
    let gold = rng.gen_range(0..ntags);
    (p, window, gold)
}

/// All windows of a sentence, read off an explicitly padded copy.
pub fn expected_windows(ids: &[TokenId], n: usize) -> Vec<Vec<TokenId>> {
    let mut padded = vec![PAD_ID; n];
    padded.push(S_OPEN_ID);
    padded.extend_from_slice(ids);
    padded.push(S_CLOSE_ID);
    padded.extend(std::iter::repeat(PAD_ID).take(n));
    (0..ids.len()).map(|p| padded[p + 1..p + 2 * n + 2].to_vec()).collect()
}

/// Nearest neighbors by scanning every pair.
pub fn brute_neighbors(store: &EmbeddingStore, query: TokenId, k: usize) -> Vec<(TokenId, f64)> {
    let m = store.matrix();
    let q = m.row(query as usize);
    let mut all: Vec<(TokenId, f64)> = (4..m.rows())
        .filter(|&i| i != query as usize)
        .map(|i| {
            let d: f64 = m.row(i).iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum();
            (i as TokenId, d.sqrt())
        })
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// (total tokens, covered tokens, types, covered types) by hash-map recount.
pub fn recount_coverage(sentences: &[RawSentence], known: &HashSet<String>) -> (u64, u64, u64, u64) {
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for s in sentences {
        for t in s.tokens() {
            *freq.entry(t).or_default() += 1;
        }
    }
    let total = freq.values().sum();
    let covered = freq.iter().filter(|(t, _)| known.contains(**t)).map(|(_, c)| c).sum();
    let types = freq.len() as u64;
    let covered_types = freq.keys().filter(|t| known.contains(**t)).count() as u64;
    (total, covered, types, covered_types)
}

pub const COLORS: [&str; 20] = [
    "red", "blue", "green", "yellow", "purple", "orange", "pink", "brown", "black", "white", "gray", "violet",
    "indigo", "cyan", "magenta", "teal", "maroon", "olive", "navy", "beige",
];

pub const CITIES: [&str; 20] = [
    "paris", "london", "rome", "berlin", "madrid", "vienna", "prague", "oslo", "lisbon", "dublin", "athens",
    "warsaw", "budapest", "helsinki", "stockholm", "brussels", "amsterdam", "zurich", "copenhagen", "geneva",
];

const COLOR_TEMPLATES: [&str; 6] = [
    "the C car was parked outside",
    "she painted the wall C yesterday",
    "a C shirt and a C hat",
    "his favourite colour is C",
    "they bought a C sofa for the room",
    "the sky turned C at dusk",
];

const CITY_TEMPLATES: [&str; 6] = [
    "we flew from X to X last week",
    "the museum in X opens at nine",
    "she moved to X after college",
    "the train to X leaves at noon",
    "he was born in X",
    "our hotel in X was near the station",
];

/// Template sentences with one word class per template family.
pub fn toy_corpus<R: Rng>(rng: &mut R, sentences: usize) -> Vec<String> {
    (0..sentences)
        .map(|_| {
            if rng.gen_bool(0.5) {
                let t = COLOR_TEMPLATES[rng.gen_range(0..COLOR_TEMPLATES.len())];
                fill(t, "C", &COLORS, rng)
            } else {
                let t = CITY_TEMPLATES[rng.gen_range(0..CITY_TEMPLATES.len())];
                fill(t, "X", &CITIES, rng)
            }
        })
        .collect()
}

fn fill<R: Rng>(template: &str, slot: &str, words: &[&str], rng: &mut R) -> String {
    template
        .split(' ')
        .map(|w| if w == slot { words[rng.gen_range(0..words.len())] } else { w })
        .collect::<Vec<_>>()
        .join(" ")
}

pub const BIN: &str = env!("CARGO_BIN_EXE_wordrank");

/// Runs the binary in `dir` and returns stdout, failing on a non-zero exit.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove(wordrank::cli::CONFIG_ENV)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A small corpus and a tagged corpus built from the same templates.
pub fn write_pipeline_inputs(dir: &Path) {
    let mut r = rng(11);
    let corpus = toy_corpus(&mut r, 1500);
    fs::write(dir.join("corpus.txt"), corpus.join("\n") + "\n").unwrap();
    let mut conll = String::new();
    for i in 0..120 {
        let c = COLORS[r.gen_range(0..20)];
        let t = CITIES[r.gen_range(0..20)];
        if i % 2 == 0 {
            conll += &format!("the\tDT\n{c}\tJJ\ncar\tNN\nwas\tVBD\nparked\tVBN\nin\tIN\n{t}\tNNP\n\n");
        } else {
            conll += &format!("she\tPRP\nmoved\tVBD\nto\tTO\n{t}\tNNP\n\n");
        }
    }
    fs::write(dir.join("tagged.conll"), conll).unwrap();
    fs::write(
        dir.join("tagmap.tsv"),
        "DT\tDET\nJJ\tADJ\nNN\tNOUN\nNNP\tNOUN\nVBD\tVERB\nVBN\tVERB\nIN\tADP\nPRP\tPRON\nTO\tPRT\n",
    )
    .unwrap();
    fs::write(dir.join("text.txt"), "the red car was parked in oslo.\nshe moved to tokyo\n").unwrap();
}

/// build-vocab → train → train-tagger → eval → tag → nn, all with relative
/// paths inside `dir`.
pub fn run_pipeline(dir: &Path) {
    let steps: [&[&str]; 6] = [
        &["build-vocab", "--corpus", "corpus.txt", "--out", "vocab.tsv"],
        &[
            "train", "--corpus", "corpus.txt", "--vocab", "vocab.tsv", "--embed-dim", "8", "--hidden", "4",
            "--dev-batches", "20", "--max-examples", "6000", "--eval-every", "2000", "--out", "emb.ckpt",
        ],
        &[
            "train-tagger", "--embeddings", "emb.ckpt.embeddings.txt", "--train", "tagged.conll", "--tagmap",
            "tagmap.tsv", "--hidden", "10", "--epochs", "3", "--out", "tagger.bin",
        ],
        &["eval", "--model", "tagger.bin", "--test", "tagged.conll", "--tagmap", "tagmap.tsv", "--manifest", "eval.manifest.json"],
        &["tag", "--model", "tagger.bin", "--input", "text.txt", "--out", "tagged.txt"],
        &["nn", "--embeddings", "emb.ckpt.embeddings.txt", "--word", "red", "--manifest", "nn.manifest.json"],
    ];
    for step in steps {
        ok(dir, &[&["--threads", "1", "--seed", "5"], step].concat());
    }
}

