//! Sequence-to-sequence autoencoder producing fixed-size embeddings.
//!
//! A shared token embedding feeds a bidirectional GRU encoder; the final
//! forward and backward states concatenate into the embedding vector. The
//! decoder is a pair of GRU cells (one per direction) whose inputs are the
//! previous token's embedding concatenated with half of the attention
//! context computed at the previous step. A dense predictor consumes the
//! decoder step output concatenated with the attention-weighted context and
//! emits a distribution over the vocabulary. Training reconstructs the
//! input sequence under scheduled sampling, i.e. randomly switching between
//! teacher forcing and auto-regression.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::checkpoint::{Checkpoint, RngState};
use crate::nn::dense::{tanh_backward, tanh_vec, Dense};
use crate::nn::embedding::EmbeddingTable;
use crate::nn::gru::{GruCache, GruCell};
use crate::nn::loss::{softmax, softmax_cross_entropy};
use crate::nn::schedule::LrSchedule;
use crate::nn::sgd::sgd_step;
use crate::nn::tensor::{Param, ParamVisitor};
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum AeError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite loss at epoch {0}; training aborted at the last checkpoint")]
    NonFiniteLoss(u64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint does not hold a model of kind '{0}'")]
    WrongKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Censor2SeqConfig {
    /// Token range V; every input token must be < V.
    pub vocab_size: usize,
    /// Token embedding width (shared by encoder and decoder inputs).
    pub embed_dim: usize,
    /// Per-direction GRU hidden size; states and embeddings are twice this.
    pub hidden_dim: usize,
    /// First decoder input token.
    pub bos_token: usize,
}

impl Censor2SeqConfig {
    /// Full-size configuration matching the published architecture tables.
    pub fn full_size(vocab_size: usize, bos_token: usize) -> Self {
        Censor2SeqConfig { vocab_size, embed_dim: 96, hidden_dim: 128, bos_token }
    }

    pub fn state_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

/// Scaled dot-product attention weights: softmax of `states[k] . context /
/// sqrt(scale_dim)` over the steps.
pub fn attention_weights(states: &[Vec<f64>], context: &[f64], scale_dim: usize) -> Vec<f64> {
    let scale = (scale_dim as f64).sqrt();
    let scores: Vec<f64> = states
        .iter()
        .map(|h| h.iter().zip(context).map(|(a, b)| a * b).sum::<f64>() / scale)
        .collect();
    softmax(&scores)
}

/// Context vector sum_k w_k * states[k].
pub fn weighted_sum(states: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let dim = states.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for (h, &w) in states.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(h) {
            *o += w * v;
        }
    }
    out
}

pub struct Censor2Seq {
    pub cfg: Censor2SeqConfig,
    pub emb: EmbeddingTable,
    pub enc_f: GruCell,
    pub enc_b: GruCell,
    pub dec_f: GruCell,
    pub dec_b: GruCell,
    pub pred_hidden: Dense,
    pub pred_out: Dense,
}

/// Decoder recurrence state: per-direction hidden vectors plus the
/// attention context fed into the next step's cell inputs.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub fwd: Vec<f64>,
    pub bwd: Vec<f64>,
    pub context: Vec<f64>,
}

struct EncCache {
    f: Vec<GruCache>,
    b: Vec<GruCache>,
    states: Vec<Vec<f64>>,
}

struct StepCache {
    input_token: usize,
    cache_f: GruCache,
    cache_b: GruCache,
    output: Vec<f64>,
    weights: Vec<f64>,
    pred_in: Vec<f64>,
    hidden_act: Vec<f64>,
    dlogits: Vec<f64>,
}

/// Per-step decoder trace captured on demand for instrumented runs.
#[derive(Debug, Clone, Default)]
pub struct DecodeTrace {
    pub decoder_inputs: Vec<usize>,
    pub step_probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingGranularity {
    /// One teacher-forcing coin per sequence.
    PerSequence,
    /// One coin per decoding step.
    PerStep,
}

impl Censor2Seq {
    pub fn new(cfg: Censor2SeqConfig, rng: &mut ChaCha20Rng) -> Self {
        let (v, e, h) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim);
        Censor2Seq {
            cfg,
            emb: EmbeddingTable::new(v, e, rng),
            enc_f: GruCell::new(e, h, rng),
            enc_b: GruCell::new(e, h, rng),
            dec_f: GruCell::new(e + h, h, rng),
            dec_b: GruCell::new(e + h, h, rng),
            pred_hidden: Dense::new(4 * h, 2 * h, rng),
            pred_out: Dense::new(2 * h, v, rng),
        }
    }

    pub fn embedding_params(&self) -> usize {
        self.emb.vocab_size() * self.emb.dim()
    }

    pub fn encoder_params(&self) -> usize {
        self.enc_f.n_params() + self.enc_b.n_params()
    }

    pub fn decoder_params(&self) -> usize {
        self.dec_f.n_params() + self.dec_b.n_params()
    }

    pub fn predictor_params(&self) -> usize {
        self.pred_hidden.n_params() + self.pred_out.n_params()
    }

    fn encode_cached(&self, tokens: &[usize]) -> Result<EncCache, NnError> {
        let h = self.cfg.hidden_dim;
        let t_len = tokens.len();
        let mut embedded = Vec::with_capacity(t_len);
        for &t in tokens {
            embedded.push(self.emb.lookup(t)?.to_vec());
        }

        let mut f_caches = Vec::with_capacity(t_len);
        let mut f_states = Vec::with_capacity(t_len);
        let mut state = vec![0.0; h];
        for e in &embedded {
            let (next, cache) = self.enc_f.forward(e, &state)?;
            f_caches.push(cache);
            f_states.push(next.clone());
            state = next;
        }

        let mut b_caches = vec![None; t_len];
        let mut b_states = vec![Vec::new(); t_len];
        let mut state = vec![0.0; h];
        for t in (0..t_len).rev() {
            let (next, cache) = self.enc_b.forward(&embedded[t], &state)?;
            b_caches[t] = Some(cache);
            b_states[t] = next.clone();
            state = next;
        }

        let states: Vec<Vec<f64>> = f_states
            .iter()
            .zip(&b_states)
            .map(|(f, b)| {
                let mut s = f.clone();
                s.extend_from_slice(b);
                s
            })
            .collect();
        Ok(EncCache {
            f: f_caches,
            b: b_caches.into_iter().map(Option::unwrap).collect(),
            states,
        })
    }

    /// Runs the encoder over a token sequence. Returns the per-step states
    /// (forward and backward halves concatenated) and the embedding, which
    /// is the concatenation of the two directions' final hidden states.
    pub fn encode(&self, tokens: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<f64>), NnError> {
        let cache = self.encode_cached(tokens)?;
        let embedding = self.embedding_of(&cache.states);
        Ok((cache.states, embedding))
    }

    fn embedding_of(&self, states: &[Vec<f64>]) -> Vec<f64> {
        let h = self.cfg.hidden_dim;
        let mut out = Vec::with_capacity(2 * h);
        out.extend_from_slice(&states[states.len() - 1][..h]);
        out.extend_from_slice(&states[0][h..]);
        out
    }

    /// Decoder state seeded by the encoder: the final forward state feeds
    /// the forward cell, the final backward state feeds the backward cell,
    /// and the input-fed context starts at zero.
    pub fn initial_decoder_state(&self, encoder_states: &[Vec<f64>]) -> DecoderState {
        let h = self.cfg.hidden_dim;
        DecoderState {
            fwd: encoder_states[encoder_states.len() - 1][..h].to_vec(),
            bwd: encoder_states[0][h..].to_vec(),
            context: vec![0.0; 2 * h],
        }
    }

    fn step_cached(
        &self,
        prev_token: usize,
        state: &DecoderState,
        encoder_states: &[Vec<f64>],
    ) -> Result<(Vec<f64>, DecoderState, StepCache), NnError> {
        let h = self.cfg.hidden_dim;
        let embedded = self.emb.lookup(prev_token)?.to_vec();

        let mut a = embedded.clone();
        a.extend_from_slice(&state.context[..h]);
        let mut b = embedded;
        b.extend_from_slice(&state.context[h..]);

        let (fwd, cache_f) = self.dec_f.forward(&a, &state.fwd)?;
        let (bwd, cache_b) = self.dec_b.forward(&b, &state.bwd)?;
        let mut output = fwd.clone();
        output.extend_from_slice(&bwd);

        let weights = attention_weights(encoder_states, &output, self.cfg.embed_dim);
        let context = weighted_sum(encoder_states, &weights);

        let mut pred_in = output.clone();
        pred_in.extend_from_slice(&context);
        let hidden_act = tanh_vec(&self.pred_hidden.forward(&pred_in)?);
        let logits = self.pred_out.forward(&hidden_act)?;

        let next = DecoderState { fwd, bwd, context };
        let cache = StepCache {
            input_token: prev_token,
            cache_f,
            cache_b,
            output,
            weights,
            pred_in,
            hidden_act,
            dlogits: Vec::new(),
        };
        Ok((logits, next, cache))
    }

    /// One decoding step: token probabilities over the vocabulary and the
    /// next decoder state.
    pub fn decode_step(
        &self,
        prev_token: usize,
        state: &DecoderState,
        encoder_states: &[Vec<f64>],
    ) -> Result<(Vec<f64>, DecoderState), NnError> {
        let (logits, next, _) = self.step_cached(prev_token, state, encoder_states)?;
        Ok((softmax(&logits), next))
    }

    /// Reconstruction loss of one sequence with backward caches. Decoding
    /// length is clamped to the input length. Inputs follow teacher forcing
    /// or auto-regressive sampling from the predicted distribution,
    /// depending on the per-sequence (or per-step) coin.
    fn forward_sequence(
        &self,
        tokens: &[usize],
        teacher_prob: f64,
        granularity: SamplingGranularity,
        rng: &mut ChaCha20Rng,
        mut trace: Option<&mut DecodeTrace>,
    ) -> Result<(f64, EncCache, Vec<StepCache>), NnError> {
        let enc = self.encode_cached(tokens)?;
        let mut state = self.initial_decoder_state(&enc.states);

        let seq_teacher = match granularity {
            SamplingGranularity::PerSequence => rng.gen_bool(teacher_prob.clamp(0.0, 1.0)),
            SamplingGranularity::PerStep => true, // decided per step below
        };

        let mut steps = Vec::with_capacity(tokens.len());
        let mut loss = 0.0;
        let mut input = self.cfg.bos_token;
        for (t, &target) in tokens.iter().enumerate() {
            let (logits, next, mut cache) = self.step_cached(input, &state, &enc.states)?;
            let (step_loss, dlogits) = softmax_cross_entropy(&logits, target)?;
            loss += step_loss;
            cache.dlogits = dlogits;

            let teacher = match granularity {
                SamplingGranularity::PerSequence => seq_teacher,
                SamplingGranularity::PerStep => rng.gen_bool(teacher_prob.clamp(0.0, 1.0)),
            };
            let probs = softmax(&logits);
            if let Some(trace) = trace.as_deref_mut() {
                trace.decoder_inputs.push(input);
                trace.step_probs.push(probs.clone());
            }
            input = if teacher { target } else { sample_index(&probs, rng) };

            steps.push(cache);
            state = next;
            let _ = t;
        }
        Ok((loss, enc, steps))
    }

    /// Accumulates gradients for one sequence's summed step loss.
    fn backward_sequence(&mut self, tokens: &[usize], enc: &EncCache, steps: &[StepCache]) {
        let h = self.cfg.hidden_dim;
        let e = self.cfg.embed_dim;
        let scale = (self.cfg.embed_dim as f64).sqrt();
        let t_len = tokens.len();

        let mut d_enc_states = vec![vec![0.0; 2 * h]; t_len];
        let mut d_fwd = vec![0.0; h];
        let mut d_bwd = vec![0.0; h];
        let mut d_ctx_next = vec![0.0; 2 * h];

        for step in steps.iter().rev() {
            // Predictor.
            let dhidden = self.pred_out.backward(&step.hidden_act, &step.dlogits);
            let dpre = tanh_backward(&step.hidden_act, &dhidden);
            let dz = self.pred_hidden.backward(&step.pred_in, &dpre);
            let mut d_output = dz[..2 * h].to_vec();
            let mut d_context = dz[2 * h..].to_vec();

            // Context fed to the next step's cell inputs.
            for (dc, dn) in d_context.iter_mut().zip(&d_ctx_next) {
                *dc += dn;
            }

            // Attention: context = sum w_k E_k, scores = E_k . output / scale.
            let dw: Vec<f64> = enc
                .states
                .iter()
                .map(|ek| ek.iter().zip(&d_context).map(|(a, b)| a * b).sum())
                .collect();
            let wdot: f64 = step.weights.iter().zip(&dw).map(|(w, g)| w * g).sum();
            for k in 0..t_len {
                let ds = step.weights[k] * (dw[k] - wdot);
                for i in 0..2 * h {
                    d_enc_states[k][i] +=
                        step.weights[k] * d_context[i] + ds * step.output[i] / scale;
                    d_output[i] += ds * enc.states[k][i] / scale;
                }
            }

            // Recurrent hidden gradient from the next step.
            for i in 0..h {
                d_output[i] += d_fwd[i];
                d_output[h + i] += d_bwd[i];
            }

            let (da, dhf) = self.dec_f.backward(&step.cache_f, &d_output[..h]);
            let (db, dhb) = self.dec_b.backward(&step.cache_b, &d_output[h..]);

            self.emb.accumulate_grad(step.input_token, &da[..e]);
            self.emb.accumulate_grad(step.input_token, &db[..e]);

            let mut d_ctx_prev = vec![0.0; 2 * h];
            d_ctx_prev[..h].copy_from_slice(&da[e..]);
            d_ctx_prev[h..].copy_from_slice(&db[e..]);
            d_ctx_next = d_ctx_prev;
            d_fwd = dhf;
            d_bwd = dhb;
        }

        // Decoder initial hiddens came from the encoder finals.
        for i in 0..h {
            d_enc_states[t_len - 1][i] += d_fwd[i];
            d_enc_states[0][h + i] += d_bwd[i];
        }

        // Encoder BPTT, forward direction.
        let mut carry = vec![0.0; h];
        for t in (0..t_len).rev() {
            let mut dh = d_enc_states[t][..h].to_vec();
            for (a, b) in dh.iter_mut().zip(&carry) {
                *a += b;
            }
            let (dx, dh_prev) = self.enc_f.backward(&enc.f[t], &dh);
            self.emb.accumulate_grad(tokens[t], &dx);
            carry = dh_prev;
        }

        // Backward direction: state flows from t+1 to t, so gradients flow
        // forward in t.
        let mut carry = vec![0.0; h];
        for t in 0..t_len {
            let mut dh = d_enc_states[t][h..].to_vec();
            for (a, b) in dh.iter_mut().zip(&carry) {
                *a += b;
            }
            let (dx, dh_next) = self.enc_b.backward(&enc.b[t], &dh);
            self.emb.accumulate_grad(tokens[t], &dx);
            carry = dh_next;
        }
    }

    /// Summed step loss plus gradient accumulation for one sequence.
    pub fn train_sequence(
        &mut self,
        tokens: &[usize],
        teacher_prob: f64,
        granularity: SamplingGranularity,
        rng: &mut ChaCha20Rng,
        trace: Option<&mut DecodeTrace>,
    ) -> Result<f64, NnError> {
        let (loss, enc, steps) = self.forward_sequence(tokens, teacher_prob, granularity, rng, trace)?;
        self.backward_sequence(tokens, &enc, &steps);
        Ok(loss)
    }

    /// Teacher-forced reconstruction loss without gradient bookkeeping.
    pub fn sequence_loss(&self, tokens: &[usize]) -> Result<f64, NnError> {
        let enc = self.encode_cached(tokens)?;
        let mut state = self.initial_decoder_state(&enc.states);
        let mut loss = 0.0;
        let mut input = self.cfg.bos_token;
        for &target in tokens {
            let (logits, next, _) = self.step_cached(input, &state, &enc.states)?;
            let (l, _) = softmax_cross_entropy(&logits, target)?;
            loss += l;
            input = target;
            state = next;
        }
        Ok(loss)
    }

    /// Greedy auto-regressive reconstruction clamped to the input length.
    pub fn greedy_decode(&self, tokens: &[usize]) -> Result<Vec<usize>, NnError> {
        let (states, _) = self.encode(tokens)?;
        let mut state = self.initial_decoder_state(&states);
        let mut out = Vec::with_capacity(tokens.len());
        let mut input = self.cfg.bos_token;
        for _ in 0..tokens.len() {
            let (probs, next) = self.decode_step(input, &state, &states)?;
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            out.push(argmax);
            input = argmax;
            state = next;
        }
        Ok(out)
    }

    /// One embedding per input vector, order preserving.
    pub fn embed_corpus(&self, vectors: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, NnError> {
        vectors.iter().map(|v| self.encode(v).map(|(_, e)| e)).collect()
    }

    pub fn to_checkpoint(&mut self, rng: Option<&ChaCha20Rng>, epoch: u64) -> Checkpoint {
        let meta = serde_json::json!({
            "vocab_size": self.cfg.vocab_size,
            "embed_dim": self.cfg.embed_dim,
            "hidden_dim": self.cfg.hidden_dim,
            "bos_token": self.cfg.bos_token,
        });
        let mut params = Vec::new();
        self.for_each_param(&mut |name, p| params.push((name.to_string(), p.value.clone())));
        Checkpoint {
            model_kind: "censor2seq".into(),
            meta_json: meta.to_string(),
            params,
            optimizer: Vec::new(),
            rng: rng.map(RngState::capture),
            epoch,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, AeError> {
        if ck.model_kind != "censor2seq" {
            return Err(AeError::WrongKind(ck.model_kind.clone()));
        }
        let meta: serde_json::Value =
            serde_json::from_str(&ck.meta_json).map_err(|_| AeError::WrongKind("meta".into()))?;
        let cfg = Censor2SeqConfig {
            vocab_size: meta["vocab_size"].as_u64().unwrap_or(0) as usize,
            embed_dim: meta["embed_dim"].as_u64().unwrap_or(0) as usize,
            hidden_dim: meta["hidden_dim"].as_u64().unwrap_or(0) as usize,
            bos_token: meta["bos_token"].as_u64().unwrap_or(0) as usize,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut model = Censor2Seq::new(cfg, &mut rng);
        let mut missing = false;
        model.for_each_param(&mut |name, p| match ck.params.iter().find(|(n, _)| n == name) {
            Some((_, t)) if t.shape() == p.value.shape() => p.value = t.clone(),
            _ => missing = true,
        });
        if missing {
            return Err(AeError::WrongKind("parameter table mismatch".into()));
        }
        Ok(model)
    }
}

use rand::SeedableRng;

fn sample_index(probs: &[f64], rng: &mut ChaCha20Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl ParamVisitor for Censor2Seq {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        let groups: [(&str, &mut dyn ParamVisitor); 7] = [
            ("emb", &mut self.emb),
            ("enc_f", &mut self.enc_f),
            ("enc_b", &mut self.enc_b),
            ("dec_f", &mut self.dec_f),
            ("dec_b", &mut self.dec_b),
            ("pred_hidden", &mut self.pred_hidden),
            ("pred_out", &mut self.pred_out),
        ];
        for (prefix, group) in groups {
            group.for_each_param(&mut |name, p| f(&format!("{prefix}.{name}"), p));
        }
    }
}

/// Training knobs for the autoencoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AeTrainConfig {
    pub seed: u64,
    pub max_epochs: u64,
    /// Micro-batch size; gradients accumulate across micro-batches.
    pub batch_size: usize,
    /// Sequences accumulated into one parameter update.
    pub effective_batch: usize,
    /// Fraction of the training set sampled fresh each epoch.
    pub sample_fraction: f64,
    pub teacher_forcing_prob: f64,
    pub granularity: SamplingGranularity,
    pub lr: LrSchedule,
    /// Stop when validation loss dips below this ratio of its initial value
    /// for the `early_stop_dips`-th time.
    pub early_stop_ratio: f64,
    pub early_stop_dips: u32,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            seed: 0,
            max_epochs: 100,
            batch_size: 2,
            effective_batch: 16,
            sample_fraction: 0.1,
            teacher_forcing_prob: 0.5,
            granularity: SamplingGranularity::PerSequence,
            lr: LrSchedule::new(0.003, 0.0001, 10),
            early_stop_ratio: 0.2,
            early_stop_dips: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub lr: f64,
    /// Mean per-sequence training loss; absent for the pre-training row.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub epochs_run: u64,
}

/// Mean per-sequence reconstruction loss over a dataset.
pub fn validation_loss(model: &Censor2Seq, data: &[Vec<usize>]) -> Result<f64, NnError> {
    let mut total = 0.0;
    for v in data {
        total += model.sequence_loss(v)?;
    }
    Ok(total / data.len() as f64)
}

/// Trains the autoencoder in place. Each epoch samples a seeded fraction of
/// the training vectors, accumulates gradients to the effective batch size,
/// and records the validation loss. Training halts the second time the
/// validation loss drops below `early_stop_ratio` times its initial value,
/// or at `max_epochs`.
pub fn train_autoencoder(
    model: &mut Censor2Seq,
    train: &[Vec<usize>],
    val: &[Vec<usize>],
    cfg: &AeTrainConfig,
) -> Result<TrainOutcome, AeError> {
    if train.is_empty() || val.is_empty() {
        return Err(AeError::EmptyDataset);
    }
    let mut sched_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    sched_rng.set_stream(1);
    let mut data_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(2);

    let initial = validation_loss(model, val)?;
    let mut history =
        vec![EpochRecord { epoch: 0, lr: cfg.lr.lr(0), train_loss: None, val_loss: initial }];

    let per_epoch = ((train.len() as f64 * cfg.sample_fraction).floor() as usize)
        .clamp(1, train.len());
    let mut dips = 0u32;
    let mut stopped_early = false;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr.lr(epoch - 1);

        let mut idx: Vec<usize> = (0..train.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut data_rng);
        idx.truncate(per_epoch);

        let mut epoch_loss = 0.0;
        let mut pending = 0usize;
        for &i in &idx {
            let loss = model.train_sequence(
                &train[i],
                cfg.teacher_forcing_prob,
                cfg.granularity,
                &mut sched_rng,
                None,
            )?;
            if !loss.is_finite() {
                return Err(AeError::NonFiniteLoss(epoch));
            }
            epoch_loss += loss;
            pending += 1;
            if pending == cfg.effective_batch {
                sgd_step(model, lr, pending as f64)?;
                model.zero_grads();
                pending = 0;
            }
        }
        if pending > 0 {
            sgd_step(model, lr, pending as f64)?;
            model.zero_grads();
        }

        let val_loss = validation_loss(model, val)?;
        if !val_loss.is_finite() {
            return Err(AeError::NonFiniteLoss(epoch));
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: Some(epoch_loss / per_epoch as f64),
            val_loss,
        });
        epochs_run = epoch;

        if val_loss < cfg.early_stop_ratio * initial {
            dips += 1;
            if dips >= cfg.early_stop_dips {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(TrainOutcome { history, stopped_early, epochs_run })
}
