//! Minibatch SGD over (original, corrupted) window pairs.
//!
//! Each layer's learning rate is the base rate divided by its fan-in; the
//! embedding layer counts as fan-in 1. Corruptions are redrawn every epoch and
//! the development loss is estimated from a fixed random sample of dev batches
//! so that successive curve points are comparable.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{self, Decoder, Encoder, FormatError};
use crate::corpus::{extend_windows, CorpusError, EncodedSentence, Vocabulary, WindowExample, WindowOptions};
use crate::model::{
    self, accumulate_backward, ModelConfig, ModelError, PairGradients, RankingParams, EMBEDDING_INIT_RANGE,
};
use crate::tensor::axpy;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PGTS";
pub const CHECKPOINT_VERSION: u32 = 1;

// ChaCha stream ids; the window/shuffle stream is 0.
const DEV_POOL_STREAM: u64 = 1;
const TRAIN_PROBE_STREAM: u64 = 2;
const DEV_EVAL_STREAM: u64 = 3;
const TRAIN_EVAL_STREAM: u64 = 4;
const PROBE_SENTENCES: usize = 5_000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("divergence after {examples_seen} examples: non-finite {group} (batch loss {loss})")]
    Divergence {
        examples_seen: u64,
        group: &'static str,
        loss: f64,
    },
    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    /// Minibatches drawn (with replacement) for each loss estimate.
    pub dev_sample_batches: usize,
    pub max_examples: Option<u64>,
    pub max_epochs: Option<u64>,
    /// Stop after this many evaluations without an improvement of at least
    /// `plateau_min_delta`. `None` disables the rule.
    pub plateau_patience: Option<usize>,
    pub plateau_min_delta: f64,
    pub eval_every: u64,
    pub seed: u64,
    pub allow_unk_centers: bool,
    /// Worker threads for gradient computation; 1 is bitwise reproducible.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            base_lr: 0.1,
            dev_sample_batches: 10_000,
            max_examples: None,
            max_epochs: None,
            plateau_patience: Some(5),
            plateau_min_delta: 1e-4,
            eval_every: 100_000,
            seed: 1,
            allow_unk_centers: false,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be ≥ 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.plateau_min_delta >= 0.0) {
            return bad("plateau min delta must be ≥ 0");
        }
        if self.eval_every == 0 {
            return bad("eval interval must be ≥ 1");
        }
        if self.dev_sample_batches == 0 {
            return bad("dev sample batches must be ≥ 1");
        }
        if self.threads == 0 {
            return bad("thread count must be ≥ 1");
        }
        if self.max_examples.is_none() && self.max_epochs.is_none() && self.plateau_patience.is_none() {
            return bad("no stopping rule: set max examples, max epochs or plateau patience");
        }
        Ok(())
    }
}

/// Per-group learning rates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerRates {
    pub embeddings: f64,
    /// W1 and b1.
    pub hidden: f64,
    /// W2 and b2.
    pub output: f64,
}

impl LayerRates {
    /// `base_lr / fan_in` per layer, with the embedding layer at fan-in 1.
    pub fn fan_in(config: &ModelConfig, base_lr: f64) -> Self {
        LayerRates {
            embeddings: base_lr,
            hidden: base_lr / config.projection_len() as f64,
            output: base_lr / config.hidden as f64,
        }
    }

    pub fn uniform(lr: f64) -> Self {
        LayerRates {
            embeddings: lr,
            hidden: lr,
            output: lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct CurvePoint {
    pub examples_seen: u64,
    pub train_loss: f64,
    pub dev_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestCheckpoint {
    pub examples_seen: u64,
    pub dev_loss: f64,
    pub params: RankingParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: RankingParams,
    pub examples_seen: u64,
    pub history: Vec<CurvePoint>,
    /// Generator as it stood at the start of the current epoch.
    pub epoch_rng: ChaCha8Rng,
    pub epoch: u64,
    /// Examples already consumed from the current epoch's stream.
    pub epoch_offset: u64,
    pub best: Option<BestCheckpoint>,
    pub evals_without_improvement: usize,
}

impl TrainState {
    pub fn new(model_config: ModelConfig, seed: u64) -> Self {
        Self::with_init_range(model_config, seed, EMBEDDING_INIT_RANGE)
    }

    pub fn with_init_range(model_config: ModelConfig, seed: u64, range: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = RankingParams::init_with_range(model_config, range, &mut rng);
        TrainState {
            params,
            examples_seen: 0,
            history: Vec::new(),
            epoch_rng: rng,
            epoch: 0,
            epoch_offset: 0,
            best: None,
            evals_without_improvement: 0,
        }
    }

    /// Parameters with the lowest development loss seen, or the current ones.
    pub fn best_params(&self) -> &RankingParams {
        self.best.as_ref().map_or(&self.params, |b| &b.params)
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let mut payload = Encoder::new(Vec::new());
        encode_params(&mut payload, &self.params)?;
        payload.u64(self.examples_seen)?;
        payload.u64(self.epoch)?;
        payload.u64(self.epoch_offset)?;
        payload.u64(self.evals_without_improvement as u64)?;
        payload.bytes(&self.epoch_rng.get_seed())?;
        payload.u64(self.epoch_rng.get_stream())?;
        payload.u128(self.epoch_rng.get_word_pos())?;
        payload.u64(self.history.len() as u64)?;
        for p in &self.history {
            payload.u64(p.examples_seen)?;
            payload.f64(p.train_loss)?;
            payload.f64(p.dev_loss)?;
        }
        match &self.best {
            None => payload.u32(0)?,
            Some(b) => {
                payload.u32(1)?;
                payload.u64(b.examples_seen)?;
                payload.f64(b.dev_loss)?;
                encode_params(&mut payload, &b.params)?;
            }
        }
        let payload = payload.into_inner();

        let mut enc = Encoder::new(&mut w);
        enc.bytes(CHECKPOINT_MAGIC)?;
        enc.u32(CHECKPOINT_VERSION)?;
        enc.u64(payload.len() as u64)?;
        enc.bytes(&payload)?;
        enc.bytes(&codec::digest(&payload))?;
        w.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let mut header = Decoder::new(&data[..]);
        header.magic(CHECKPOINT_MAGIC)?;
        header.version(CHECKPOINT_VERSION)?;
        let len = header.usize()?;
        let sealed = &data[16..];
        if sealed.len() < len.saturating_add(32) {
            return Err(FormatError::Truncated.into());
        }
        if sealed.len() > len + 32 {
            return Err(FormatError::Invalid("trailing bytes".into()).into());
        }
        let payload = codec::unseal(sealed)?;

        let mut dec = Decoder::new(payload);
        let params = RankingParams::decode(&mut dec)?;
        let examples_seen = dec.u64()?;
        let epoch = dec.u64()?;
        let epoch_offset = dec.u64()?;
        let evals_without_improvement = dec.usize()?;
        let seed: [u8; 32] = dec.array()?;
        let stream = dec.u64()?;
        let word_pos = dec.u128()?;
        let mut epoch_rng = ChaCha8Rng::from_seed(seed);
        epoch_rng.set_stream(stream);
        epoch_rng.set_word_pos(word_pos);
        let n = dec.usize()?;
        let mut history = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            history.push(CurvePoint {
                examples_seen: dec.u64()?,
                train_loss: dec.f64()?,
                dev_loss: dec.f64()?,
            });
        }
        let best = match dec.u32()? {
            0 => None,
            1 => Some(BestCheckpoint {
                examples_seen: dec.u64()?,
                dev_loss: dec.f64()?,
                params: RankingParams::decode(&mut dec)?,
            }),
            other => return Err(FormatError::Invalid(format!("best-checkpoint flag {other}")).into()),
        };
        dec.finish()?;
        Ok(TrainState {
            params,
            examples_seen,
            history,
            epoch_rng,
            epoch,
            epoch_offset,
            best,
            evals_without_improvement,
        })
    }
}

fn encode_params(enc: &mut Encoder<Vec<u8>>, params: &RankingParams) -> Result<()> {
    let mut blob = Vec::new();
    params.write(&mut blob)?;
    enc.bytes(&blob)?;
    Ok(())
}

/// Writes `examples,train_loss,dev_loss` rows.
pub fn write_curve_csv<W: Write>(history: &[CurvePoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "examples,train_loss,dev_loss")?;
    for p in history {
        writeln!(w, "{},{},{}", p.examples_seen, p.train_loss, p.dev_loss)?;
    }
    w.flush()
}

/// Sums the batch gradients. With a pool the batch is split into one chunk
/// per worker and the chunk sums are merged in order.
fn batch_gradients(
    params: &RankingParams,
    batch: &[WindowExample],
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, PairGradients)> {
    match pool {
        Some(pool) if batch.len() > 1 => {
            let chunk = batch.len().div_ceil(pool.current_num_threads());
            let parts: Vec<model::Result<(f64, PairGradients)>> = pool.install(|| {
                batch
                    .par_chunks(chunk)
                    .map(|examples| {
                        let mut g = PairGradients::zeros(&params.config);
                        let mut loss = 0.0;
                        for ex in examples {
                            loss += accumulate_backward(params, ex, &mut g)?;
                        }
                        Ok((loss, g))
                    })
                    .collect()
            });
            let mut total = PairGradients::zeros(&params.config);
            let mut loss = 0.0;
            for part in parts {
                let (l, g) = part?;
                loss += l;
                total.merge(&g);
            }
            Ok((loss, total))
        }
        _ => {
            let mut g = PairGradients::zeros(&params.config);
            let mut loss = 0.0;
            for ex in batch {
                loss += accumulate_backward(params, ex, &mut g)?;
            }
            Ok((loss, g))
        }
    }
}

/// One SGD update on the mean batch loss. Returns that mean loss.
pub fn sgd_step(state: &mut TrainState, batch: &[WindowExample], rates: &LayerRates) -> Result<f64> {
    step_with(state, batch, rates, None)
}

fn step_with(
    state: &mut TrainState,
    batch: &[WindowExample],
    rates: &LayerRates,
    pool: Option<&rayon::ThreadPool>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(TrainError::InvalidConfig("empty batch".into()));
    }
    let (loss_sum, grads) = batch_gradients(&state.params, batch, pool)?;
    let mean_loss = loss_sum / batch.len() as f64;
    let diverged = |group| TrainError::Divergence {
        examples_seen: state.examples_seen,
        group,
        loss: mean_loss,
    };
    if !mean_loss.is_finite() {
        return Err(diverged("loss"));
    }
    if let Some(group) = grads.first_non_finite() {
        return Err(diverged(group));
    }

    if loss_sum > 0.0 {
        let inv = 1.0 / batch.len() as f64;
        let p = &mut state.params;
        for (&id, g) in &grads.embeddings {
            axpy(-rates.embeddings * inv, g, p.embeddings.row_mut(id as usize));
        }
        axpy(-rates.hidden * inv, grads.w1.as_slice(), p.w1.as_mut_slice());
        axpy(-rates.hidden * inv, &grads.b1, &mut p.b1);
        axpy(-rates.output * inv, &grads.w2, &mut p.w2);
        p.b2 -= rates.output * inv * grads.b2;
    }
    state.examples_seen += batch.len() as u64;
    Ok(mean_loss)
}

/// Mean pair loss over `sample_batches` minibatches drawn with replacement.
pub fn estimate_dev_loss<R: Rng + ?Sized>(
    params: &RankingParams,
    pool: &[WindowExample],
    sample_batches: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<f64> {
    if pool.is_empty() {
        return Err(TrainError::EmptyCorpus("no development examples"));
    }
    let draws = sample_batches * batch_size;
    let mut total = 0.0;
    for _ in 0..draws {
        let ex = &pool[rng.gen_range(0..pool.len())];
        let o = model::forward_score(params, &ex.original)?;
        let c = model::forward_score(params, &ex.corrupted)?;
        total += model::pair_loss(o.score, c.score);
    }
    Ok(total / draws as f64)
}

/// Encoded training material.
#[derive(Clone, Copy, Debug)]
pub struct TrainingData<'a> {
    pub vocab: &'a Vocabulary,
    pub train: &'a [EncodedSentence],
    pub dev: &'a [EncodedSentence],
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum StopReason {
    MaxExamples,
    MaxEpochs,
    Plateau,
}

/// Runs training loops over one corpus.
pub struct Trainer<'a> {
    data: TrainingData<'a>,
    config: TrainConfig,
    window_opts: WindowOptions,
    rates: LayerRates,
    dev_pool: Vec<WindowExample>,
    train_probe: Vec<WindowExample>,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: TrainingData<'a>, model_config: &ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.train.iter().all(|s| s.ids.is_empty()) {
            return Err(TrainError::EmptyCorpus("no training sentences"));
        }
        if data.dev.iter().all(|s| s.ids.is_empty()) {
            return Err(TrainError::EmptyCorpus("no development sentences"));
        }
        if model_config.vocab_size != data.vocab.len() {
            return Err(TrainError::InvalidConfig(format!(
                "model vocabulary size {} differs from vocabulary ({})",
                model_config.vocab_size,
                data.vocab.len()
            )));
        }
        let window_opts = WindowOptions {
            half_window: model_config.half_window,
            allow_unk_centers: config.allow_unk_centers,
        };

        let mut rng = stream_rng(config.seed, DEV_POOL_STREAM);
        let mut dev_pool = Vec::new();
        for s in data.dev {
            extend_windows(s, window_opts, data.vocab.len(), &mut rng, &mut dev_pool)?;
        }
        if dev_pool.is_empty() {
            return Err(TrainError::EmptyCorpus("development set yields no windows"));
        }

        let mut rng = stream_rng(config.seed, TRAIN_PROBE_STREAM);
        let mut probe_ids: Vec<usize> = (0..data.train.len()).collect();
        probe_ids.shuffle(&mut rng);
        probe_ids.truncate(PROBE_SENTENCES);
        probe_ids.sort_unstable();
        let mut train_probe = Vec::new();
        for i in probe_ids {
            extend_windows(&data.train[i], window_opts, data.vocab.len(), &mut rng, &mut train_probe)?;
        }
        if train_probe.is_empty() {
            return Err(TrainError::EmptyCorpus("training set yields no windows"));
        }

        let pool = if config.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.threads)
                    .build()
                    .map_err(|e| TrainError::InvalidConfig(e.to_string()))?,
            )
        } else {
            None
        };
        let rates = LayerRates::fan_in(model_config, config.base_lr);
        Ok(Trainer {
            data,
            config,
            window_opts,
            rates,
            dev_pool,
            train_probe,
            pool,
        })
    }

    pub fn rates(&self) -> &LayerRates {
        &self.rates
    }

    pub fn dev_pool(&self) -> &[WindowExample] {
        &self.dev_pool
    }

    /// Dev-loss estimate with the fixed evaluation sample.
    pub fn dev_loss(&self, params: &RankingParams) -> Result<f64> {
        estimate_dev_loss(
            params,
            &self.dev_pool,
            self.config.dev_sample_batches,
            self.config.batch_size,
            &mut stream_rng(self.config.seed, DEV_EVAL_STREAM),
        )
    }

    fn train_loss(&self, params: &RankingParams) -> Result<f64> {
        estimate_dev_loss(
            params,
            &self.train_probe,
            self.config.dev_sample_batches,
            self.config.batch_size,
            &mut stream_rng(self.config.seed, TRAIN_EVAL_STREAM),
        )
    }

    fn evaluate(&self, state: &mut TrainState) -> Result<()> {
        if state.history.last().is_some_and(|p| p.examples_seen == state.examples_seen) {
            return Ok(());
        }
        let dev_loss = self.dev_loss(&state.params)?;
        let train_loss = self.train_loss(&state.params)?;
        log::info!(
            "examples {} epoch {} train {:.5} dev {:.5}",
            state.examples_seen,
            state.epoch,
            train_loss,
            dev_loss
        );
        state.history.push(CurvePoint {
            examples_seen: state.examples_seen,
            train_loss,
            dev_loss,
        });
        let best_loss = state.best.as_ref().map(|b| b.dev_loss);
        match best_loss {
            Some(best) if dev_loss >= best - self.config.plateau_min_delta => {
                state.evals_without_improvement += 1;
            }
            _ => state.evals_without_improvement = 0,
        }
        if best_loss.is_none_or(|best| dev_loss < best) {
            state.best = Some(BestCheckpoint {
                examples_seen: state.examples_seen,
                dev_loss,
                params: state.params.clone(),
            });
        }
        Ok(())
    }

    fn stop_reason(&self, state: &TrainState) -> Option<StopReason> {
        if self.config.max_examples.is_some_and(|m| state.examples_seen >= m) {
            return Some(StopReason::MaxExamples);
        }
        if self.config.max_epochs.is_some_and(|m| state.epoch >= m) {
            return Some(StopReason::MaxEpochs);
        }
        if self
            .config
            .plateau_patience
            .is_some_and(|p| state.evals_without_improvement >= p)
        {
            return Some(StopReason::Plateau);
        }
        None
    }

    fn due_for_eval(&self, before: u64, after: u64) -> bool {
        after / self.config.eval_every > before / self.config.eval_every
    }

    /// Trains until a stopping rule fires. `on_eval` sees the state after
    /// every evaluation, e.g. to write periodic checkpoints.
    pub fn run<F>(&self, state: &mut TrainState, mut on_eval: F) -> Result<StopReason>
    where
        F: FnMut(&TrainState) -> Result<()>,
    {
        if state.history.is_empty() {
            self.evaluate(state)?;
            on_eval(state)?;
        }
        let bs = self.config.batch_size;
        loop {
            if let Some(reason) = self.stop_reason(state) {
                self.evaluate(state)?;
                on_eval(state)?;
                return Ok(reason);
            }

            let mut rng = state.epoch_rng.clone();
            let mut order: Vec<usize> = (0..self.data.train.len()).collect();
            order.shuffle(&mut rng);

            let mut consumed: u64 = 0;
            let mut windows = Vec::new();
            let mut batch: Vec<WindowExample> = Vec::with_capacity(bs);
            for idx in order {
                windows.clear();
                extend_windows(
                    &self.data.train[idx],
                    self.window_opts,
                    self.data.vocab.len(),
                    &mut rng,
                    &mut windows,
                )?;
                for w in windows.drain(..) {
                    consumed += 1;
                    if consumed <= state.epoch_offset {
                        continue;
                    }
                    batch.push(w);
                    let cap = self
                        .config
                        .max_examples
                        .map(|m| m.saturating_sub(state.examples_seen));
                    if batch.len() == bs || cap.is_some_and(|c| batch.len() as u64 >= c) {
                        self.apply(state, &mut batch, consumed)?;
                        if let Some(reason) = self.after_step(state, &mut on_eval)? {
                            return Ok(reason);
                        }
                    }
                }
            }
            if !batch.is_empty() {
                self.apply(state, &mut batch, consumed)?;
                if let Some(reason) = self.after_step(state, &mut on_eval)? {
                    return Ok(reason);
                }
            }
            state.epoch += 1;
            state.epoch_offset = 0;
            state.epoch_rng = rng;
        }
    }

    fn apply(&self, state: &mut TrainState, batch: &mut Vec<WindowExample>, consumed: u64) -> Result<()> {
        step_with(state, batch, &self.rates, self.pool.as_ref())?;
        state.epoch_offset = consumed;
        batch.clear();
        Ok(())
    }

    fn after_step<F>(&self, state: &mut TrainState, on_eval: &mut F) -> Result<Option<StopReason>>
    where
        F: FnMut(&TrainState) -> Result<()>,
    {
        let last_eval = state.history.last().map_or(0, |p| p.examples_seen);
        if self.due_for_eval(last_eval, state.examples_seen) {
            self.evaluate(state)?;
            on_eval(state)?;
        }
        match self.stop_reason(state) {
            Some(StopReason::MaxEpochs) | None => Ok(None),
            Some(reason) => {
                self.evaluate(state)?;
                on_eval(state)?;
                Ok(Some(reason))
            }
        }
    }
}

/// Trains from a fresh initialization.
pub fn train(data: TrainingData<'_>, model_config: ModelConfig, config: TrainConfig) -> Result<TrainState> {
    let trainer = Trainer::new(data, &model_config, config.clone())?;
    let mut state = TrainState::new(model_config, config.seed);
    trainer.run(&mut state, |_| Ok(()))?;
    Ok(state)
}
