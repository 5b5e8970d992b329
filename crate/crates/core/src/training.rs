//! MSE regression training with hand-built AdamW, plus a finite-difference
//! gradient check.

use std::fmt::Write as _;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Corpus, ScoreVector, COMPETENCIES, MAX_SCORE};
use crate::error::{AesError, Result};
use crate::metrics::evaluate;
use crate::model::{backward, forward, is_bias, is_layer_norm, ModelConfig, Mode};
use crate::seed::stream_seed;
use crate::tensor::{ParamStore, Scalar};
use crate::tokenizer::{encode_pair, TokenizedInput, Vocab};

/// Scores in points → [0, 1].
pub fn normalize(s: &ScoreVector) -> [f64; COMPETENCIES] {
    s.as_array().map(|x| x as f64 / MAX_SCORE as f64)
}

/// [0, 1] → points.
pub fn denormalize(v: &[f64; COMPETENCIES]) -> [f64; COMPETENCIES] {
    v.map(|x| x * MAX_SCORE as f64)
}

/// Mean squared error over all `batch × 5` entries and its gradient with
/// respect to the predictions.
pub fn mse_loss<T: Scalar>(
    pred: &[[T; COMPETENCIES]],
    target: &[[T; COMPETENCIES]],
) -> Result<(T, Vec<[T; COMPETENCIES]>)> {
    if pred.len() != target.len() {
        return Err(AesError::ShapeMismatch(format!(
            "{} prediction rows vs {} target rows",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(AesError::EmptyInput);
    }
    let count = T::lit((pred.len() * COMPETENCIES) as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let mut g = [T::zero(); COMPETENCIES];
        for k in 0..COMPETENCIES {
            let diff = p[k] - t[k];
            loss += diff * diff;
            g[k] = T::lit(2.0) * diff / count;
        }
        grad.push(g);
    }
    Ok((loss / count, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub shuffle_seed: u64,
    pub dropout_seed: u64,
    pub grad_clip_norm: Option<f64>,
    /// Linear warmup length in optimizer steps; 0 disables warmup.
    pub warmup_steps: usize,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 16,
            learning_rate: 2e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            shuffle_seed: 0,
            dropout_seed: 0,
            grad_clip_norm: None,
            warmup_steps: 0,
            max_len: 512,
        }
    }
}

impl TrainConfig {
    /// Defaults for the small randomly initialized desk model.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_len: 64,
            ..Self::default()
        }
    }
}

/// AdamW moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Biases and layer-norm parameters are not decayed.
pub fn decays(name: &str) -> bool {
    !(is_bias(name) || is_layer_norm(name))
}

/// One AdamW update. Weight decay is applied as a multiplicative shrink of
/// the parameter, separate from the moment-normalized gradient step.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    params.check_same_layout(grads)?;
    params.check_same_layout(&state.m)?;
    state.t += 1;
    let t = state.t as f64;
    let mut lr = cfg.learning_rate;
    if cfg.warmup_steps > 0 {
        lr *= (t / cfg.warmup_steps as f64).min(1.0);
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::lit(1.0 - cfg.beta1.powf(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powf(t));
    let eps = T::lit(cfg.epsilon);
    let lr_t = T::lit(lr);
    let shrink_decay = T::lit(1.0 - lr * cfg.weight_decay);

    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((name, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let shrink = if decays(name) { shrink_decay } else { T::one() };
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (T::one() - b1) * gi;
            v.data[i] = b2 * v.data[i] + (T::one() - b2) * gi * gi;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            p.data[i] = p.data[i] * shrink - lr_t * (m_hat / (v_hat.sqrt() + eps));
        }
    }
    Ok(())
}

fn clip_gradients<T: Scalar>(grads: &mut ParamStore<T>, max_norm: f64) {
    let norm = grads.global_norm().as_f64();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for (_, t) in grads.iter_mut() {
            for x in &mut t.data {
                *x *= s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: [f64; COMPETENCIES],
    pub val_rmse_total: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,train_loss,val_rmse_c1,val_rmse_c2,val_rmse_c3,val_rmse_c4,val_rmse_c5,val_rmse_total,seconds\n",
        );
        for e in &self.epochs {
            write!(out, "{},{:.8}", e.epoch, e.train_loss).unwrap();
            for r in e.val_rmse {
                write!(out, ",{r:.6}").unwrap();
            }
            writeln!(out, ",{:.6},{:.3}", e.val_rmse_total, e.seconds).unwrap();
        }
        out
    }
}

/// Tokenized input and normalized target for one essay.
pub type Example<T> = (TokenizedInput, [T; COMPETENCIES]);

/// Encodes every record up front. Encoding runs in parallel; output order
/// follows the corpus.
pub fn prepare_examples<T: Scalar>(
    corpus: &Corpus,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<Example<T>>> {
    corpus
        .records()
        .par_iter()
        .map(|r| {
            let (a, b) = r.compose_pair();
            let input = encode_pair(a, b, vocab, max_len)?;
            Ok((input, normalize(&r.scores).map(T::lit)))
        })
        .collect()
}

/// Forward, loss and backward for one batch. Returns the loss and gradients.
pub fn loss_and_grads<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    batch: &[&TokenizedInput],
    targets: &[[T; COMPETENCIES]],
    dropout_seed: u64,
) -> Result<(T, ParamStore<T>)> {
    let out = forward(params, cfg, batch, Mode::Train, dropout_seed)?;
    let (loss, dpred) = mse_loss(&out.predictions, targets)?;
    let grads = backward(params, cfg, &out, &dpred)?;
    Ok((loss, grads))
}

/// Mini-batch training: per epoch a seeded shuffle, then forward, MSE,
/// backward and AdamW for each batch (the final short batch included),
/// followed by an eval-mode validation pass.
pub fn train<T: Scalar>(
    mut params: ParamStore<T>,
    train_set: &Corpus,
    val_set: &Corpus,
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ParamStore<T>, TrainHistory)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(AesError::EmptyCorpus);
    }
    if vocab.len() != model_cfg.vocab_size {
        return Err(AesError::InvalidConfig(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model_cfg.vocab_size
        )));
    }
    if cfg.batch_size == 0 {
        return Err(AesError::InvalidConfig("batch_size must be positive".into()));
    }
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((params, history));
    }
    let examples = prepare_examples::<T>(train_set, vocab, cfg.max_len)?;
    let mut state = OptimizerState::new(&params);
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.shuffle_seed, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TokenizedInput> = chunk.iter().map(|&i| &examples[i].0).collect();
            let targets: Vec<[T; COMPETENCIES]> = chunk.iter().map(|&i| examples[i].1).collect();
            let seed = stream_seed(cfg.dropout_seed, state.t);
            let (loss, mut grads) = loss_and_grads(&params, model_cfg, &batch, &targets, seed)?;
            if let Some(max_norm) = cfg.grad_clip_norm {
                clip_gradients(&mut grads, max_norm);
            }
            adamw_step(&mut params, &grads, &mut state, cfg)?;
            loss_sum += loss.as_f64() * chunk.len() as f64;
        }

        let report = evaluate(&params, vocab, model_cfg, val_set, cfg.max_len)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / examples.len() as f64,
            val_rmse: report.rmse,
            val_rmse_total: report.rmse_total,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}/{}: train_loss={:.6} val_rmse_total={:.3} ({:.1}s)",
            cfg.epochs, record.train_loss, record.val_rmse_total, record.seconds
        );
        history.epochs.push(record);
    }
    Ok((params, history))
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub sample: usize,
    pub seed: u64,
    /// Restrict sampling to parameters whose name starts with one of these.
    pub only: Option<Vec<String>>,
    /// Never sample parameters whose name contains one of these.
    pub exclude: Vec<String>,
    /// Precision of the finite-difference loss evaluations.
    pub reference: FdPrecision,
}

/// Arithmetic used for the perturbed loss evaluations in [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FdPrecision {
    /// Same element type as the model.
    #[default]
    Native,
    /// Parameters are widened to f64 for the perturbed evaluations, so the
    /// difference quotient is not swamped by single-precision rounding.
    F64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            sample: 200,
            seed: 0,
            only: None,
            exclude: Vec::new(),
            reference: FdPrecision::Native,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares analytic gradients with central differences on `sample`
/// randomly chosen scalar parameters. Train-mode dropout uses one fixed mask
/// for the analytic pass and every perturbed evaluation.
pub fn grad_check<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    batch: &[&TokenizedInput],
    targets: &[[T; COMPETENCIES]],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let dropout_seed = stream_seed(opts.seed, u64::MAX);
    let (_, grads) = loss_and_grads(params, cfg, batch, targets, dropout_seed)?;

    let candidates: Vec<&str> = params
        .names()
        .filter(|n| match &opts.only {
            Some(prefixes) => prefixes.iter().any(|p| n.starts_with(p.as_str())),
            None => true,
        })
        .filter(|n| !opts.exclude.iter().any(|e| n.contains(e.as_str())))
        .collect();
    if candidates.is_empty() {
        return Err(AesError::InvalidConfig("no parameters selected for grad_check".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let picks: Vec<(String, usize)> = (0..opts.sample)
        .map(|_| {
            let name = candidates[rng.random_range(0..candidates.len())];
            let index = rng.random_range(0..params.get(name).numel());
            (name.to_string(), index)
        })
        .collect();

    let numeric = match opts.reference {
        FdPrecision::Native => {
            central_differences(params, cfg, batch, targets, dropout_seed, opts.epsilon, &picks)?
        }
        FdPrecision::F64 => {
            let mut wide = ParamStore::<f64>::new();
            for (name, t) in params.iter() {
                let data = t.data.iter().map(|x| x.as_f64()).collect();
                wide.insert(name, crate::tensor::Tensor { shape: t.shape.clone(), data });
            }
            let wide_targets: Vec<[f64; COMPETENCIES]> =
                targets.iter().map(|r| r.map(T::as_f64)).collect();
            central_differences(&wide, cfg, batch, &wide_targets, dropout_seed, opts.epsilon, &picks)?
        }
    };

    let entries: Vec<GradCheckEntry> = picks
        .into_iter()
        .zip(numeric)
        .map(|((name, index), numeric)| {
            let analytic = grads.get(&name).data[index].as_f64();
            let rel_error =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
            GradCheckEntry {
                name,
                index,
                analytic,
                numeric,
                rel_error,
            }
        })
        .collect();
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        entries,
    })
}

fn central_differences<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    batch: &[&TokenizedInput],
    targets: &[[T; COMPETENCIES]],
    dropout_seed: u64,
    epsilon: f64,
    picks: &[(String, usize)],
) -> Result<Vec<f64>> {
    let loss_at = |p: &ParamStore<T>| -> Result<T> {
        let out = forward(p, cfg, batch, Mode::Train, dropout_seed)?;
        Ok(mse_loss(&out.predictions, targets)?.0)
    };
    let eps = T::lit(epsilon);
    let mut work = params.clone();
    picks
        .iter()
        .map(|(name, index)| {
            let original = params.get(name).data[*index];
            work.get_mut(name).data[*index] = original + eps;
            let plus = loss_at(&work)?;
            work.get_mut(name).data[*index] = original - eps;
            let minus = loss_at(&work)?;
            work.get_mut(name).data[*index] = original;
            Ok(((plus - minus) / (T::lit(2.0) * eps)).as_f64())
        })
        .collect()
}
