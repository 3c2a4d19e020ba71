//! The window-scoring network and its pairwise ranking loss.
//!
//! A window of `2n+1` ids is mapped to embedding rows, concatenated into a
//! projection vector `p`, passed through `a = tanh(W1·p + b1)` and scored as
//! `w2·a + b2`. Training pairs each genuine window with a copy whose center word
//! was replaced; the loss `max(0, 1 − score(original) + score(corrupted))` asks
//! the genuine window to win by a margin of one.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use thiserror::Error;

use crate::codec::{Decoder, Encoder, FormatError};
use crate::corpus::{TokenId, WindowExample};
use crate::tensor::{axpy, dot, Matrix};

pub const PARAMS_MAGIC: &[u8; 4] = b"PGEM";
pub const PARAMS_VERSION: u32 = 1;

/// Half-width of the embedding range used at initialization.
pub const EMBEDDING_INIT_RANGE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Context words on each side of the center.
    pub half_window: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn new(half_window: usize, embed_dim: usize, hidden: usize, vocab_size: usize) -> Result<Self> {
        if embed_dim == 0 || hidden == 0 || vocab_size == 0 {
            return Err(ModelError::InvalidArgument(format!(
                "embedding width, hidden width and vocabulary size must be positive \
                 (got M={embed_dim}, H={hidden}, V={vocab_size})"
            )));
        }
        Ok(ModelConfig {
            half_window,
            embed_dim,
            hidden,
            vocab_size,
        })
    }

    pub fn window_len(&self) -> usize {
        2 * self.half_window + 1
    }

    pub fn projection_len(&self) -> usize {
        self.window_len() * self.embed_dim
    }
}

/// `(2n+1)·M·H + H + H + 1 + V·M`
pub fn parameter_count(config: &ModelConfig) -> u64 {
    let (w, m, h, v) = (
        config.window_len() as u64,
        config.embed_dim as u64,
        config.hidden as u64,
        config.vocab_size as u64,
    );
    w * m * h + h + h + 1 + v * m
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingParams {
    pub config: ModelConfig,
    /// `V × M`
    pub embeddings: Matrix,
    /// `H × (2n+1)·M`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl RankingParams {
    /// Embeddings uniform on `[-0.5, 0.5]`, weights uniform on
    /// `±1/√fan_in`, biases zero.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        Self::init_with_range(config, EMBEDDING_INIT_RANGE, rng)
    }

    /// As [`RankingParams::init`] with embeddings uniform on `[-range, range]`.
    pub fn init_with_range<R: Rng + ?Sized>(config: ModelConfig, range: f64, rng: &mut R) -> Self {
        let embeddings = Matrix::uniform(config.vocab_size, config.embed_dim, range, rng);
        let w1 = Matrix::uniform(
            config.hidden,
            config.projection_len(),
            1.0 / (config.projection_len() as f64).sqrt(),
            rng,
        );
        let w2_bound = 1.0 / (config.hidden as f64).sqrt();
        let w2 = (0..config.hidden).map(|_| rng.gen_range(-w2_bound..=w2_bound)).collect();
        RankingParams {
            config,
            embeddings,
            w1,
            b1: vec![0.0; config.hidden],
            w2,
            b2: 0.0,
        }
    }

    /// All-zero parameters of the right shape.
    pub fn zeros(config: ModelConfig) -> Self {
        RankingParams {
            config,
            embeddings: Matrix::zeros(config.vocab_size, config.embed_dim),
            w1: Matrix::zeros(config.hidden, config.projection_len()),
            b1: vec![0.0; config.hidden],
            w2: vec![0.0; config.hidden],
            b2: 0.0,
        }
    }

    /// Number of scalars actually held.
    pub fn scalar_count(&self) -> u64 {
        (self.embeddings.as_slice().len() + self.w1.as_slice().len() + self.b1.len() + self.w2.len() + 1)
            as u64
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings.is_finite()
            && self.w1.is_finite()
            && self.b1.iter().chain(&self.w2).all(|x| x.is_finite())
            && self.b2.is_finite()
    }

    fn check_window(&self, window: &[TokenId]) -> Result<()> {
        if window.len() != self.config.window_len() {
            return Err(ModelError::InvalidArgument(format!(
                "window has {} ids, expected {}",
                window.len(),
                self.config.window_len()
            )));
        }
        if let Some(&bad) = window.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::InvalidArgument(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Writes the `PGEM` parameter file.
    pub fn write<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut enc = Encoder::new(w);
        enc.bytes(PARAMS_MAGIC)?;
        enc.u32(PARAMS_VERSION)?;
        let c = &self.config;
        for v in [c.half_window, c.embed_dim, c.hidden, c.vocab_size] {
            enc.u64(v as u64)?;
        }
        enc.f64s(self.embeddings.as_slice())?;
        enc.f64s(self.w1.as_slice())?;
        enc.f64s(&self.b1)?;
        enc.f64s(&self.w2)?;
        enc.f64(self.b2)?;
        enc.into_inner().flush()
    }

    /// Reads a whole `PGEM` parameter file; trailing bytes are an error.
    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut dec = Decoder::new(r);
        let params = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(params)
    }

    pub(crate) fn decode<R: Read>(dec: &mut Decoder<R>) -> Result<Self> {
        dec.magic(PARAMS_MAGIC)?;
        dec.version(PARAMS_VERSION)?;
        let half_window = dec.usize()?;
        let embed_dim = dec.usize()?;
        let hidden = dec.usize()?;
        let vocab_size = dec.usize()?;
        let config = ModelConfig::new(half_window, embed_dim, hidden, vocab_size)
            .map_err(|e| FormatError::Invalid(e.to_string()))?;
        let embeddings = Matrix::from_vec(vocab_size, embed_dim, dec.f64s(vocab_size * embed_dim)?);
        let w1 = Matrix::from_vec(
            hidden,
            config.projection_len(),
            dec.f64s(hidden * config.projection_len())?,
        );
        let b1 = dec.f64s(hidden)?;
        let w2 = dec.f64s(hidden)?;
        let b2 = dec.f64()?;
        Ok(RankingParams {
            config,
            embeddings,
            w1,
            b1,
            w2,
            b2,
        })
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTrace {
    pub projection: Vec<f64>,
    pub activation: Vec<f64>,
    pub score: f64,
}

pub fn forward_score(params: &RankingParams, window: &[TokenId]) -> Result<ScoreTrace> {
    params.check_window(window)?;
    Ok(forward_unchecked(params, window))
}

fn forward_unchecked(params: &RankingParams, window: &[TokenId]) -> ScoreTrace {
    let mut projection = Vec::with_capacity(params.config.projection_len());
    for &id in window {
        projection.extend_from_slice(params.embeddings.row(id as usize));
    }
    let mut activation = vec![0.0; params.config.hidden];
    params.w1.affine(&projection, &params.b1, &mut activation);
    activation.iter_mut().for_each(|a| *a = a.tanh());
    let score = dot(&params.w2, &activation) + params.b2;
    ScoreTrace {
        projection,
        activation,
        score,
    }
}

/// `max(0, 1 − original + corrupted)`. NaN propagates.
pub fn pair_loss(score_original: f64, score_corrupted: f64) -> f64 {
    let margin = 1.0 - score_original + score_corrupted;
    if margin.is_nan() {
        margin
    } else {
        margin.max(0.0)
    }
}

/// Gradients for every parameter group. Embedding rows are sparse.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGradients {
    pub embeddings: BTreeMap<TokenId, Vec<f64>>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl PairGradients {
    pub fn zeros(config: &ModelConfig) -> Self {
        PairGradients {
            embeddings: BTreeMap::new(),
            w1: Matrix::zeros(config.hidden, config.projection_len()),
            b1: vec![0.0; config.hidden],
            w2: vec![0.0; config.hidden],
            b2: 0.0,
        }
    }

    pub fn clear(&mut self) {
        self.embeddings.clear();
        self.w1.fill(0.0);
        self.b1.iter_mut().for_each(|x| *x = 0.0);
        self.w2.iter_mut().for_each(|x| *x = 0.0);
        self.b2 = 0.0;
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: &PairGradients) {
        for (&id, row) in &other.embeddings {
            let dst = self
                .embeddings
                .entry(id)
                .or_insert_with(|| vec![0.0; row.len()]);
            axpy(1.0, row, dst);
        }
        axpy(1.0, other.w1.as_slice(), self.w1.as_mut_slice());
        axpy(1.0, &other.b1, &mut self.b1);
        axpy(1.0, &other.w2, &mut self.w2);
        self.b2 += other.b2;
    }

    pub fn is_zero(&self) -> bool {
        self.embeddings.values().flatten().all(|&x| x == 0.0)
            && self.w1.as_slice().iter().all(|&x| x == 0.0)
            && self.b1.iter().chain(&self.w2).all(|&x| x == 0.0)
            && self.b2 == 0.0
    }

    /// Name of the first parameter group holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        if !self.embeddings.values().flatten().all(|x| x.is_finite()) {
            Some("embeddings")
        } else if !self.w1.is_finite() {
            Some("W1")
        } else if !self.b1.iter().all(|x| x.is_finite()) {
            Some("b1")
        } else if !self.w2.iter().all(|x| x.is_finite()) {
            Some("W2")
        } else if !self.b2.is_finite() {
            Some("b2")
        } else {
            None
        }
    }
}

/// Loss and exact gradients for one (original, corrupted) pair.
pub fn backward(params: &RankingParams, example: &WindowExample) -> Result<(f64, PairGradients)> {
    let mut grads = PairGradients::zeros(&params.config);
    let loss = accumulate_backward(params, example, &mut grads)?;
    Ok((loss, grads))
}

/// Adds the pair's gradients into `grads` and returns its loss. Nothing is
/// added when the margin is satisfied.
pub fn accumulate_backward(
    params: &RankingParams,
    example: &WindowExample,
    grads: &mut PairGradients,
) -> Result<f64> {
    params.check_window(&example.original)?;
    params.check_window(&example.corrupted)?;
    let original = forward_unchecked(params, &example.original);
    let corrupted = forward_unchecked(params, &example.corrupted);
    let loss = pair_loss(original.score, corrupted.score);
    if loss <= 0.0 {
        return Ok(0.0);
    }
    // d loss / d score is −1 for the genuine window and +1 for the corrupted one.
    backprop_window(params, &example.original, &original, -1.0, grads);
    backprop_window(params, &example.corrupted, &corrupted, 1.0, grads);
    Ok(loss)
}

fn backprop_window(
    params: &RankingParams,
    window: &[TokenId],
    trace: &ScoreTrace,
    dscore: f64,
    grads: &mut PairGradients,
) {
    let m = params.config.embed_dim;
    axpy(dscore, &trace.activation, &mut grads.w2);
    grads.b2 += dscore;

    let dz: Vec<f64> = params
        .w2
        .iter()
        .zip(&trace.activation)
        .map(|(w, a)| dscore * w * (1.0 - a * a))
        .collect();
    axpy(1.0, &dz, &mut grads.b1);
    grads.w1.add_outer(1.0, &dz, &trace.projection);

    let mut dp = vec![0.0; params.config.projection_len()];
    params.w1.add_transposed_product(&dz, &mut dp);
    for (k, &id) in window.iter().enumerate() {
        let row = grads.embeddings.entry(id).or_insert_with(|| vec![0.0; m]);
        axpy(1.0, &dp[k * m..(k + 1) * m], row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(w: f64, c: f64) -> RankingParams {
        let config = ModelConfig::new(0, 1, 1, 6).unwrap();
        let mut p = RankingParams::zeros(config);
        p.embeddings.set(5, 0, c);
        p.w1.set(0, 0, w);
        p.w2[0] = 1.0;
        p
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let cfg = ModelConfig::new(2, 8, 4, 30).unwrap();
        let a = RankingParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(11));
        let b = RankingParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
        assert!(a.b1.iter().all(|&x| x == 0.0));
        assert_eq!(a.b2, 0.0);
        assert!(a.embeddings.as_slice().iter().all(|x| x.abs() <= 0.5));
        let bound = 1.0 / (cfg.projection_len() as f64).sqrt();
        assert!(a.w1.as_slice().iter().all(|x| x.abs() <= bound));
        assert!(a.w2.iter().all(|x| x.abs() <= 0.5));
    }

    #[test]
    fn parameter_count_examples() {
        let full_size = ModelConfig::new(2, 64, 32, 100_000).unwrap();
        // 320·32 + 32 + 32 + 1 + 100_000·64
        assert_eq!(parameter_count(&full_size), 6_410_305);
        assert_eq!(RankingParams::zeros(full_size).scalar_count(), 6_410_305);
        let unit = ModelConfig::new(0, 1, 1, 1).unwrap();
        assert_eq!(parameter_count(&unit), 5);
        assert_eq!(RankingParams::zeros(unit).scalar_count(), 5);
    }

    #[test]
    fn zero_weights_score_is_bias() {
        let cfg = ModelConfig::new(1, 3, 2, 10).unwrap();
        let mut p = RankingParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(1));
        p.w1.fill(0.0);
        p.b1.fill(0.0);
        p.b2 = 0.7;
        let t = forward_score(&p, &[4, 5, 6]).unwrap();
        assert_eq!(t.score, 0.7);
        assert!(t.activation.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn hand_computed_score() {
        let t = forward_score(&tiny(2.0, 0.5), &[5]).unwrap();
        assert!((t.score - 1.0f64.tanh()).abs() < 1e-15);
        assert!((t.score - 0.76159).abs() < 1e-5);
        assert_eq!(t.projection, [0.5]);
    }

    #[test]
    fn projection_is_position_sensitive() {
        let cfg = ModelConfig::new(1, 2, 2, 8).unwrap();
        let p = RankingParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let a = forward_score(&p, &[4, 5, 6]).unwrap();
        let b = forward_score(&p, &[6, 5, 4]).unwrap();
        assert_ne!(a.projection, b.projection);
    }

    #[test]
    fn forward_rejects_bad_windows() {
        let cfg = ModelConfig::new(1, 2, 2, 8).unwrap();
        let p = RankingParams::zeros(cfg);
        assert!(matches!(forward_score(&p, &[4, 8, 6]), Err(ModelError::InvalidArgument(_))));
        assert!(forward_score(&p, &[4, 5]).is_err());
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(pair_loss(0.0, 0.0), 1.0);
        assert_eq!(pair_loss(2.0, 0.0), 0.0);
        assert_eq!(pair_loss(0.0, 0.5), 1.5);
    }

    #[test]
    fn satisfied_margin_gives_zero_gradients() {
        // Score rises with the center embedding, so 5 beats 4 by 2·tanh(1).
        let mut p = tiny(2.0, 0.5);
        p.w2[0] = 3.0;
        p.embeddings.set(4, 0, -0.5);
        let ex = WindowExample {
            original: vec![5],
            corrupted: vec![4],
        };
        let (loss, g) = backward(&p, &ex).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.is_zero());
        assert!(g.embeddings.is_empty());
    }

    #[test]
    fn b2_gradient_cancels() {
        let cfg = ModelConfig::new(2, 4, 3, 20).unwrap();
        let p = RankingParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(8));
        let ex = WindowExample {
            original: vec![3, 1, 7, 2, 3],
            corrupted: vec![3, 1, 9, 2, 3],
        };
        let (loss, g) = backward(&p, &ex).unwrap();
        assert!(loss > 0.0);
        assert_eq!(g.b2, 0.0);
        let mut shifted = p.clone();
        shifted.b2 += 123.25;
        let (loss2, _) = backward(&shifted, &ex).unwrap();
        assert!((loss - loss2).abs() < 1e-12);
    }

    #[test]
    fn params_file_round_trip_and_layout() {
        let cfg = ModelConfig::new(1, 2, 3, 7).unwrap();
        let p = RankingParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let mut buf = Vec::new();
        p.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PGEM");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), PARAMS_VERSION);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[32..40].try_into().unwrap()), 7);
        assert_eq!(buf.len(), 40 + 8 * parameter_count(&cfg) as usize);
        let first = f64::from_le_bytes(buf[40..48].try_into().unwrap());
        assert_eq!(first.to_bits(), p.embeddings.get(0, 0).to_bits());
        assert_eq!(RankingParams::read(&buf[..]).unwrap(), p);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            RankingParams::read(&bad[..]),
            Err(ModelError::Format(FormatError::BadMagic { .. }))
        ));
        assert!(matches!(
            RankingParams::read(&buf[..buf.len() - 3]),
            Err(ModelError::Format(FormatError::Truncated))
        ));
        let mut v2 = buf.clone();
        v2[4] = 9;
        assert!(matches!(
            RankingParams::read(&v2[..]),
            Err(ModelError::Format(FormatError::VersionMismatch { found: 9, .. }))
        ));
    }
}
