//! Loss, metrics, optimizer, the training loop with early stopping, masked
//! token warm-up of encoders, and the ablation harness.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::aggregation::PerModality;
use crate::config::{ConfigError, KeyValues};
use crate::data::{normalize_records, split_by_gene, DataError, DatasetSplit, NormalizationStats, TargetScale, TranscriptRecord};
use crate::encoder::{EncoderError, EncoderParams};
use crate::modality::{Modality, ModalitySet};
use crate::model::{init_model, IsoFormerModel, ModelConfig, ModelError, ModelInput};
use crate::nn::{join, Linear, Params};
use crate::rng::{self, SeededRng};
use crate::tensor::{lit, Matrix, Real};
use crate::tokenization::{tokenize_nucleotide, tokenize_protein, TokenSequence, TokenizeError, Vocabulary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error("expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("degenerate targets: {0}")]
    DegenerateTargets(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// `Σ_t (pred_t − target_t)²` and its gradient `2(pred − target)`.
pub fn mse_loss<T: Real>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>), TrainError> {
    if pred.len() != target.len() {
        return Err(TrainError::ShapeMismatch {
            expected: target.len(),
            found: pred.len(),
        });
    }
    let two = lit::<T>(2.0);
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d * d;
            two * d
        })
        .collect();
    Ok((loss, grad))
}

/// Coefficient of determination `1 − SS_res/SS_tot`.
pub fn r2(preds: &[f64], targets: &[f64]) -> Result<f64, TrainError> {
    if preds.len() != targets.len() {
        return Err(TrainError::ShapeMismatch {
            expected: targets.len(),
            found: preds.len(),
        });
    }
    if targets.len() < 2 {
        return Err(TrainError::DegenerateTargets("need at least two values".into()));
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(TrainError::DegenerateTargets("targets are constant".into()));
    }
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// 1-based ranks; ties share the mean of their rank range.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Pearson correlation of average ranks. Constant predictions carry no
/// ranking information and score 0.
pub fn spearman(preds: &[f64], targets: &[f64]) -> Result<f64, TrainError> {
    if preds.len() != targets.len() {
        return Err(TrainError::ShapeMismatch {
            expected: targets.len(),
            found: preds.len(),
        });
    }
    if targets.len() < 2 {
        return Err(TrainError::DegenerateTargets("need at least two values".into()));
    }
    if targets.iter().all(|&t| t == targets[0]) {
        return Err(TrainError::DegenerateTargets("targets are constant".into()));
    }
    Ok(pearson(&average_ranks(preds), &average_ranks(targets)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub tissues: Vec<String>,
    pub r2: Vec<f64>,
    pub spearman: Vec<f64>,
    pub mean_r2: f64,
    pub mean_spearman: f64,
}

impl MetricsReport {
    /// Per-tissue metrics over rows of `preds`/`targets` (one row per sample).
    pub fn compute(tissues: &[String], preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self, TrainError> {
        let nt = tissues.len();
        let column = |rows: &[Vec<f64>], t: usize| rows.iter().map(|r| r[t]).collect::<Vec<f64>>();
        if preds.iter().chain(targets).any(|r| r.len() != nt) {
            return Err(TrainError::ShapeMismatch { expected: nt, found: 0 });
        }
        let mut r2s = Vec::with_capacity(nt);
        let mut sps = Vec::with_capacity(nt);
        for t in 0..nt {
            let (p, y) = (column(preds, t), column(targets, t));
            r2s.push(r2(&p, &y)?);
            sps.push(spearman(&p, &y)?);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        Ok(Self {
            tissues: tissues.to_vec(),
            mean_r2: mean(&r2s),
            mean_spearman: mean(&sps),
            r2: r2s,
            spearman: sps,
        })
    }

    /// Rows `condition, seed, tissue, r2, spearman`, then a `macro_mean` row.
    pub fn tsv_rows(&self, condition: &str, seed: u64) -> String {
        let mut out = String::new();
        for ((t, r), s) in self.tissues.iter().zip(&self.r2).zip(&self.spearman) {
            out.push_str(&format!("{condition}\t{seed}\t{t}\t{r}\t{s}\n"));
        }
        out.push_str(&format!("{condition}\t{seed}\tmacro_mean\t{}\t{}\n", self.mean_r2, self.mean_spearman));
        out
    }
}

pub const METRICS_HEADER: &str = "condition\tseed\ttissue\tr2\tspearman\n";

/// Adam with bias correction; moment buffers share the parameter layout.
#[derive(Clone, Debug)]
pub struct Adam<P> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: P,
    v: P,
}

impl<P: Clone> Adam<P> {
    pub fn new<T: Real>(params: &P, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self
    where
        P: Params<T>,
    {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            step_count: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut P, grad: &P)
    where
        P: Params<T>,
    {
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (lit::<T>(self.beta1), lit::<T>(self.beta2));
        let c1 = lit::<T>(1.0 - self.beta1.powi(t));
        let c2 = lit::<T>(1.0 - self.beta2.powi(t));
        let (lr, eps) = (lit::<T>(self.learning_rate), lit::<T>(self.eps));
        let one = T::one();
        let grads = grad.named_tensors();
        let ms = self.m.named_tensors_mut();
        let vs = self.v.named_tensors_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params.named_tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
            let it = p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut()));
            for ((p, &g), (m, v)) in it {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Outcome of observing one validation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly lower
/// validation loss and remembers the best parameters.
#[derive(Clone, Debug)]
pub struct EarlyStopping<P> {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub best: Option<P>,
    bad_epochs: usize,
}

impl<P: Clone> EarlyStopping<P> {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64, params: &P) -> StopDecision {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.best = Some(params.clone());
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Seed of the gene split, kept apart from the run seed so that every
    /// seed of an ablation sees the same train/test genes.
    pub split_seed: u64,
    pub seed: u64,
    /// Train only the projections, aggregation and head.
    pub freeze_encoders: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 100,
            patience: 3,
            val_fraction: 0.05,
            test_fraction: 0.2,
            split_seed: 0,
            seed: 0,
            freeze_encoders: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be a non-negative number");
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return fail("batch_size, patience and max_epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return fail("adam betas must lie in [0,1) and eps must be positive");
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("training.learning_rate", self.learning_rate);
        kv.set("training.batch_size", self.batch_size);
        kv.set("training.adam_beta1", self.beta1);
        kv.set("training.adam_beta2", self.beta2);
        kv.set("training.adam_eps", self.eps);
        kv.set("training.max_epochs", self.max_epochs);
        kv.set("training.patience", self.patience);
        kv.set("training.val_fraction", self.val_fraction);
        kv.set("training.test_fraction", self.test_fraction);
        kv.set("training.split_seed", self.split_seed);
        kv.set("training.seed", self.seed);
        kv.set("training.freeze_encoders", self.freeze_encoders);
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self, TrainError> {
        Ok(Self {
            learning_rate: kv.require("training.learning_rate")?,
            batch_size: kv.require("training.batch_size")?,
            beta1: kv.require("training.adam_beta1")?,
            beta2: kv.require("training.adam_beta2")?,
            eps: kv.require("training.adam_eps")?,
            max_epochs: kv.require("training.max_epochs")?,
            patience: kv.require("training.patience")?,
            val_fraction: kv.require("training.val_fraction")?,
            test_fraction: kv.require("training.test_fraction")?,
            split_seed: kv.require("training.split_seed")?,
            seed: kv.require("training.seed")?,
            freeze_encoders: kv.require("training.freeze_encoders")?,
        })
    }
}

/// Masked-token warm-up settings.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmupConfig {
    pub modalities: ModalitySet,
    pub mask_fraction: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            modalities: ModalitySet::EMPTY,
            mask_fraction: 0.15,
            steps: 200,
            batch_size: 16,
            learning_rate: 1e-3,
        }
    }
}

/// `none` or a modality set.
pub fn parse_optional_set(s: &str) -> Result<ModalitySet, String> {
    if s.trim().is_empty() || s.trim().eq_ignore_ascii_case("none") {
        Ok(ModalitySet::EMPTY)
    } else {
        s.parse()
    }
}

fn display_optional_set(s: ModalitySet) -> String {
    if s.is_empty() {
        "none".into()
    } else {
        s.to_string()
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(TrainError::InvalidConfig("mask_fraction must lie in (0,1)".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig("warm-up batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("warmup.modalities", display_optional_set(self.modalities));
        kv.set("warmup.mask_fraction", self.mask_fraction);
        kv.set("warmup.steps", self.steps);
        kv.set("warmup.batch_size", self.batch_size);
        kv.set("warmup.learning_rate", self.learning_rate);
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self, TrainError> {
        let text: String = kv.require("warmup.modalities")?;
        let modalities = parse_optional_set(&text).map_err(|reason| ConfigError::InvalidValue {
            key: "warmup.modalities".into(),
            value: text.clone(),
            reason,
        })?;
        Ok(Self {
            modalities,
            mask_fraction: kv.require("warmup.mask_fraction")?,
            steps: kv.require("warmup.steps")?,
            batch_size: kv.require("warmup.batch_size")?,
            learning_rate: kv.require("warmup.learning_rate")?,
        })
    }
}

/// A tokenized training example with normalized targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: ModelInput,
    pub targets: Vec<f32>,
}

/// Tokenized sequence of modality `m` for `record`, truncated to the
/// encoder limit; `None` for a missing protein.
pub fn tokenize_record(record: &TranscriptRecord, m: Modality, vocab: &Vocabulary, max_tokens: usize) -> Result<Option<TokenSequence>, TokenizeError> {
    let seq = match m {
        Modality::Dna => Some(tokenize_nucleotide(&record.dna_window, vocab, false)?),
        Modality::Rna => Some(tokenize_nucleotide(&record.rna_seq, vocab, true)?),
        Modality::Protein => record.protein_seq.as_deref().map(|p| tokenize_protein(p, vocab)).transpose()?,
    };
    Ok(seq.map(|s| if s.len() > max_tokens { s.truncated(max_tokens) } else { s }))
}

/// Tokenizes the modalities enabled in `config`.
pub fn prepare_samples(records: &[TranscriptRecord], config: &ModelConfig) -> Result<Vec<Sample>, TrainError> {
    let vocabs: Vec<(Modality, Vocabulary, usize)> = config
        .modalities
        .iter()
        .map(|m| Ok((m, config.vocabulary(m)?, config.modality(m).max_tokens)))
        .collect::<Result<_, ModelError>>()?;
    records
        .iter()
        .map(|r| {
            if r.scale != TargetScale::Normalized {
                return Err(TrainError::InvalidConfig(format!("{} has raw targets; normalize first", r.transcript_id)));
            }
            if r.targets.len() != config.num_tissues {
                return Err(TrainError::ShapeMismatch {
                    expected: config.num_tissues,
                    found: r.targets.len(),
                });
            }
            let mut input = PerModality::default();
            for (m, vocab, max) in &vocabs {
                if let Some(seq) = tokenize_record(r, *m, vocab, *max)? {
                    input.set(*m, seq);
                }
            }
            Ok(Sample {
                id: r.transcript_id.clone(),
                input,
                targets: r.targets.iter().map(|&v| v as f32).collect(),
            })
        })
        .collect()
}

fn sample_gradient(
    model: &IsoFormerModel<f32>,
    sample: &Sample,
    dropout: Option<SeededRng>,
) -> Result<(f64, IsoFormerModel<f32>), TrainError> {
    let mut rng = dropout;
    let (out, cache) = model.forward(&sample.input, false, rng.as_mut())?;
    let (loss, d) = mse_loss(&out.prediction, &sample.targets)?;
    let mut grad = model.zeros_like();
    model.backward(&cache, &d, &mut grad)?;
    Ok((f64::from(loss), grad))
}

/// Mean per-sample loss in eval mode.
pub fn mean_loss(model: &IsoFormerModel<f32>, samples: &[Sample]) -> Result<f64, TrainError> {
    let preds = predict_all(model, samples)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        total += p.iter().zip(&s.targets).map(|(a, &b)| (a - f64::from(b)).powi(2)).sum::<f64>();
    }
    Ok(total / samples.len().max(1) as f64)
}

pub fn predict_all(model: &IsoFormerModel<f32>, samples: &[Sample]) -> Result<Vec<Vec<f64>>, TrainError> {
    samples
        .par_iter()
        .map(|s| Ok(model.predict(&s.input)?.into_iter().map(f64::from).collect()))
        .collect()
}

pub fn evaluate(model: &IsoFormerModel<f32>, samples: &[Sample], tissues: &[String]) -> Result<MetricsReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation set".into()));
    }
    let preds = predict_all(model, samples)?;
    let targets: Vec<Vec<f64>> = samples.iter().map(|s| s.targets.iter().map(|&v| f64::from(v)).collect()).collect();
    MetricsReport::compute(tissues, &preds, &targets)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for h in history {
        out.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, h.val_loss));
    }
    out
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: IsoFormerModel<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Mini-batch Adam on the mean over samples of the per-sample tissue-sum
/// squared error. Per-sample gradients may be computed in parallel; they
/// are summed in sample order, so results do not depend on thread count.
pub fn train(
    model: IsoFormerModel<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("training split".into()));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation split".into()));
    }
    let mut model = model;
    let mut adam = Adam::new::<f32>(&model, config.learning_rate, config.beta1, config.beta2, config.eps);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut shuffle = rng::stream(config.seed, rng::SHUFFLE);
    let use_dropout = config_has_dropout(&model.config);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<Result<(f64, IsoFormerModel<f32>), TrainError>> = batch
                .par_iter()
                .map(|&i| {
                    let dropout = use_dropout.then(|| rng::stream(config.seed, &format!("{}/{epoch}/{i}", rng::DROPOUT)));
                    sample_gradient(&model, &train_set[i], dropout)
                })
                .collect();
            let mut grad: Option<IsoFormerModel<f32>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                match grad.as_mut() {
                    Some(acc) => acc.accumulate(&g),
                    None => grad = Some(g),
                }
            }
            let mut grad = grad.expect("non-empty batch");
            let n = batch.len() as f32;
            grad.scale_all(1.0 / n);
            let mean = batch_loss / batch.len() as f64;
            if !mean.is_finite() || !grad.all_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step: step + 1,
                    loss: mean,
                });
            }
            if config.freeze_encoders {
                grad.encoders.scale_all(0.0);
            }
            adam.step::<f32>(&mut model, &grad);
            epoch_loss += batch_loss;
        }
        let val_loss = mean_loss(&model, val_set)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                step: 0,
                loss: val_loss,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_loss,
        };
        log::info!("epoch {epoch}: train {:.5} val {:.5}", record.train_loss, val_loss);
        history.push(record);
        if stopper.observe(epoch, val_loss, &model) == StopDecision::Stop {
            break;
        }
    }
    let best_epoch = stopper.best_epoch;
    let best_val_loss = stopper.best_loss;
    Ok(TrainOutcome {
        model: stopper.best.unwrap_or(model),
        history,
        best_epoch,
        best_val_loss,
    })
}

fn config_has_dropout(config: &ModelConfig) -> bool {
    config.modalities.iter().any(|m| config.modality(m).dropout_rate > 0.0)
}

/// Encoder plus the token-prediction head used only during warm-up.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmParams<T> {
    pub encoder: EncoderParams<T>,
    pub head: Linear<T>,
}

impl<T: Real> Params<T> for MlmParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.encoder.collect(&join(prefix, "encoder"), out);
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        self.encoder.collect_mut(&join(prefix, "encoder"), out);
        self.head.collect_mut(&join(prefix, "head"), out);
    }
}

/// Positions to mask: each real token independently with probability
/// `fraction`, at least one per sequence.
pub fn sample_mask_positions<R: Rng>(tokens: &TokenSequence, fraction: f64, rng: &mut R) -> Vec<usize> {
    let real: Vec<usize> = tokens.attention_mask().iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    let mut picked: Vec<usize> = real.iter().copied().filter(|_| rng.random_bool(fraction)).collect();
    if picked.is_empty() && !real.is_empty() {
        picked.push(real[rng.random_range(0..real.len())]);
    }
    picked
}

/// Masked-token cross-entropy (mean over masked positions) and its
/// gradients for one sequence.
pub fn mlm_loss<T: Real>(
    params: &MlmParams<T>,
    tokens: &TokenSequence,
    positions: &[usize],
    mask_id: u32,
    grad: Option<&mut MlmParams<T>>,
) -> Result<f64, TrainError> {
    let mut masked = tokens.clone();
    for &p in positions {
        masked.ids[p] = mask_id;
    }
    let (emb, _, cache) = params.encoder.forward(&masked, false, None)?;
    let rows: Vec<Vec<T>> = positions.iter().map(|&p| emb.values.row(p).to_vec()).collect();
    let h = Matrix::from_rows(&rows);
    let mut probs = params.head.forward(&h);
    crate::tensor::softmax_rows(&mut probs, None);
    let n = positions.len() as f64;
    let mut loss = 0.0;
    for (r, &p) in positions.iter().enumerate() {
        let target = tokens.ids[p] as usize;
        loss -= probs.get(r, target).to_f64().unwrap_or(f64::NAN).max(1e-300).ln();
    }
    if let Some(g) = grad {
        let inv = lit::<T>(1.0 / n);
        for (r, &p) in positions.iter().enumerate() {
            let target = tokens.ids[p] as usize;
            probs.set(r, target, probs.get(r, target) - T::one());
        }
        probs.scale(inv);
        let dh = params.head.backward(&h, &probs, &mut g.head);
        let mut upstream = Matrix::zeros(emb.len(), emb.dim());
        for (r, &p) in positions.iter().enumerate() {
            upstream.row_mut(p).iter_mut().zip(dh.row(r)).for_each(|(a, &b)| *a += b);
        }
        params.encoder.backward(&cache, &upstream, &mut g.encoder)?;
    }
    Ok(loss / n)
}

/// Warms up `encoder` by masked-token prediction on `sequences`. Random
/// streams are named after `tag` so encoders warmed under one seed draw
/// independent masks. Returns the updated encoder and the mean loss of
/// every step.
pub fn mlm_warmup(
    encoder: &EncoderParams<f32>,
    sequences: &[TokenSequence],
    vocab: &Vocabulary,
    config: &WarmupConfig,
    seed: u64,
    tag: &str,
) -> Result<(EncoderParams<f32>, Vec<f64>), TrainError> {
    config.validate()?;
    let mask_id = vocab
        .mask_id()
        .ok_or_else(|| TrainError::InvalidConfig("vocabulary has no MASK token".into()))?;
    if config.steps == 0 {
        return Ok((encoder.clone(), Vec::new()));
    }
    if sequences.is_empty() {
        return Err(TrainError::EmptyDataset("warm-up sequences".into()));
    }
    if vocab.len() != encoder.config.vocab_size {
        return Err(TrainError::ShapeMismatch {
            expected: encoder.config.vocab_size,
            found: vocab.len(),
        });
    }
    let head_rng = &mut rng::stream(seed, &format!("{}/mlm_head/{tag}", rng::INIT));
    let mut params = MlmParams {
        encoder: encoder.clone(),
        head: Linear::new(encoder.config.embed_dim, vocab.len(), head_rng),
    };
    let mut adam = Adam::new::<f32>(&params, config.learning_rate, 0.9, 0.999, 1e-8);
    let mut order_rng = rng::stream(seed, &format!("{}/warmup/{tag}", rng::SHUFFLE));
    let mut mask_rng = rng::stream(seed, &format!("{}/{tag}", rng::MASK));
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let seq = &sequences[order[cursor]];
            cursor += 1;
            batch.push((seq, sample_mask_positions(seq, config.mask_fraction, &mut mask_rng)));
        }
        let results: Vec<Result<(f64, MlmParams<f32>), TrainError>> = batch
            .par_iter()
            .map(|(seq, pos)| {
                let mut g = params.zeros_like();
                let l = mlm_loss(&params, seq, pos, mask_id, Some(&mut g))?;
                Ok((l, g))
            })
            .collect();
        let mut grad = params.zeros_like();
        let mut total = 0.0;
        for r in results {
            let (l, g) = r?;
            total += l;
            grad.accumulate(&g);
        }
        grad.scale_all(1.0 / batch.len() as f32);
        let mean = total / batch.len() as f64;
        if !mean.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: 0,
                step: step + 1,
                loss: mean,
            });
        }
        adam.step::<f32>(&mut params, &grad);
        losses.push(mean);
    }
    Ok((params.encoder, losses))
}

/// Model, training and warm-up settings of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub warmup: WarmupConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            warmup: WarmupConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = self.model.to_key_values();
        kv.merge(&self.train.to_key_values());
        kv.merge(&self.warmup.to_key_values());
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self, TrainError> {
        Ok(Self {
            model: ModelConfig::from_key_values(kv)?,
            train: TrainConfig::from_key_values(kv)?,
            warmup: WarmupConfig::from_key_values(kv)?,
        })
    }
}

pub struct RunOutput {
    pub model: IsoFormerModel<f32>,
    pub stats: NormalizationStats,
    pub split: DatasetSplit,
    pub history: Vec<EpochRecord>,
    pub warmup_losses: PerModality<Vec<f64>>,
    pub test_report: MetricsReport,
    pub best_epoch: usize,
}

/// The three partitions of `records`, with targets normalized by train-split statistics.
pub struct PreparedData {
    pub split: DatasetSplit,
    pub stats: NormalizationStats,
    pub train: Vec<TranscriptRecord>,
    pub validation: Vec<TranscriptRecord>,
    pub test: Vec<TranscriptRecord>,
}

pub fn prepare_data(records: &[TranscriptRecord], tissues: &[String], config: &TrainConfig) -> Result<PreparedData, TrainError> {
    let split = split_by_gene(records, config.test_fraction, config.val_fraction, config.split_seed)?;
    let part = split.partition_of();
    let pick = |p: crate::data::Partition| -> Vec<TranscriptRecord> {
        records.iter().filter(|r| part[r.transcript_id.as_str()] == p).cloned().collect()
    };
    let (mut train, mut validation, mut test) = (
        pick(crate::data::Partition::Train),
        pick(crate::data::Partition::Validation),
        pick(crate::data::Partition::Test),
    );
    let stats = normalize_records(&mut train, tissues, None)?;
    normalize_records(&mut validation, tissues, Some(&stats))?;
    normalize_records(&mut test, tissues, Some(&stats))?;
    Ok(PreparedData {
        split,
        stats,
        train,
        validation,
        test,
    })
}

/// Split, normalize, initialize, optionally warm up, train and evaluate on
/// the test split. `records` carry raw TPM targets. Warm-up reads the
/// sequences of `warmup_corpus` when given, otherwise the train split.
pub fn run_experiment(
    records: &[TranscriptRecord],
    tissues: &[String],
    run: &RunConfig,
    warmup_corpus: Option<&[TranscriptRecord]>,
) -> Result<RunOutput, TrainError> {
    let data = prepare_data(records, tissues, &run.train)?;
    let seed = run.train.seed;
    let mut model: IsoFormerModel<f32> = init_model(&run.model, seed)?;
    let mut warmup_losses = PerModality::default();
    for m in run.warmup.modalities.iter().filter(|&m| run.model.modalities.contains(m)) {
        let vocab = run.model.vocabulary(m)?;
        let max = run.model.modality(m).max_tokens;
        let seqs: Vec<TokenSequence> = warmup_corpus
            .unwrap_or(&data.train)
            .iter()
            .map(|r| tokenize_record(r, m, &vocab, max))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .flatten()
            .collect();
        let enc = model.encoders.get(m).expect("encoder of an enabled modality");
        let (warmed, losses) = mlm_warmup(enc, &seqs, &vocab, &run.warmup, seed, m.name())?;
        model.encoders.set(m, warmed);
        warmup_losses.set(m, losses);
    }
    let train_samples = prepare_samples(&data.train, &run.model)?;
    let val_samples = prepare_samples(&data.validation, &run.model)?;
    let test_samples = prepare_samples(&data.test, &run.model)?;
    let outcome = train(model, &train_samples, &val_samples, &run.train)?;
    let test_report = evaluate(&outcome.model, &test_samples, tissues)?;
    Ok(RunOutput {
        model: outcome.model,
        stats: data.stats,
        split: data.split,
        history: outcome.history,
        warmup_losses,
        test_report,
        best_epoch: outcome.best_epoch,
    })
}

/// One ablation row: which pathways exist and which encoders are warmed up.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Condition {
    pub name: String,
    pub modalities: ModalitySet,
    pub warmup: ModalitySet,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

fn set(ms: &[Modality]) -> ModalitySet {
    ModalitySet::of(ms)
}

/// Input combinations: three single modalities, DNA+protein, DNA+RNA, all three.
pub fn table2_conditions() -> Vec<Condition> {
    use Modality::*;
    [
        set(&[Dna]),
        set(&[Rna]),
        set(&[Protein]),
        set(&[Dna, Protein]),
        set(&[Dna, Rna]),
        ModalitySet::ALL,
    ]
    .into_iter()
    .map(|m| Condition {
        name: m.to_string(),
        modalities: m,
        warmup: ModalitySet::EMPTY,
    })
    .collect()
}

/// Warm-up toggles over the three-modality model: none warmed, all but
/// DNA, all but RNA, all warmed.
pub fn table5_conditions() -> Vec<Condition> {
    use Modality::*;
    [
        ("none_warmed", ModalitySet::EMPTY),
        ("dna_cold", set(&[Rna, Protein])),
        ("rna_cold", set(&[Dna, Protein])),
        ("all_warmed", ModalitySet::ALL),
    ]
    .into_iter()
    .map(|(name, warmup)| Condition {
        name: name.to_string(),
        modalities: ModalitySet::ALL,
        warmup,
    })
    .collect()
}

/// Parses `table2`, `table5`, or a `;`-separated list of
/// `modalities[@warmup]` items such as `dna+rna;all@rna+protein`.
pub fn parse_conditions(s: &str) -> Result<Vec<Condition>, String> {
    match s.trim() {
        "table2" => return Ok(table2_conditions()),
        "table5" => return Ok(table5_conditions()),
        _ => {}
    }
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|item| {
            let (mods, warm) = item.split_once('@').unwrap_or((item, "none"));
            let modalities: ModalitySet = mods.trim().parse()?;
            let warmup = parse_optional_set(warm)?;
            let name = if warmup.is_empty() {
                modalities.to_string()
            } else {
                format!("{modalities}@{warmup}")
            };
            Ok(Condition { name, modalities, warmup })
        })
        .collect::<Result<Vec<_>, String>>()
        .and_then(|v| if v.is_empty() { Err("no conditions".into()) } else { Ok(v) })
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub condition: Condition,
    pub seed: u64,
    pub report: MetricsReport,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSummary {
    pub condition: String,
    pub runs: usize,
    pub mean_r2: f64,
    pub std_r2: f64,
    pub mean_spearman: f64,
    pub std_spearman: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(runs: &[AblationRun]) -> Vec<AblationSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in runs {
        if !names.contains(&r.condition.name.as_str()) {
            names.push(&r.condition.name);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rs: Vec<&AblationRun> = runs.iter().filter(|r| r.condition.name == name).collect();
            let (mean_r2, std_r2) = mean_std(&rs.iter().map(|r| r.report.mean_r2).collect::<Vec<_>>());
            let (mean_spearman, std_spearman) = mean_std(&rs.iter().map(|r| r.report.mean_spearman).collect::<Vec<_>>());
            AblationSummary {
                condition: name.to_string(),
                runs: rs.len(),
                mean_r2,
                std_r2,
                mean_spearman,
                std_spearman,
            }
        })
        .collect()
}

pub fn summary_tsv(summary: &[AblationSummary]) -> String {
    let mut out = String::from("condition\truns\tr2_mean\tr2_std\tspearman_mean\tspearman_std\n");
    for s in summary {
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            s.condition, s.runs, s.mean_r2, s.std_r2, s.mean_spearman, s.std_spearman
        ));
    }
    out
}

/// Every (condition, seed) pair in condition-major order.
pub fn enumerate_runs(conditions: &[Condition], seeds: &[u64]) -> Vec<(Condition, u64)> {
    conditions
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c.clone(), s)))
        .collect()
}

/// The run configuration of one condition: its pathways and warm-up set on
/// top of `base`. When any condition warms up an encoder, every condition
/// reserves a MASK token so that warm and cold models share a vocabulary.
pub fn condition_config(base: &RunConfig, condition: &Condition, seed: u64, any_warmup: bool) -> RunConfig {
    let mut run = base.clone();
    run.model.modalities = condition.modalities;
    run.warmup.modalities = condition.warmup;
    run.train.seed = seed;
    if any_warmup {
        for m in Modality::ALL {
            run.model.modality_mut(m).mask_token = true;
        }
    }
    run
}

pub fn run_ablation(
    records: &[TranscriptRecord],
    tissues: &[String],
    base: &RunConfig,
    conditions: &[Condition],
    seeds: &[u64],
    warmup_corpus: Option<&[TranscriptRecord]>,
    mut on_run: impl FnMut(&AblationRun),
) -> Result<Vec<AblationRun>, TrainError> {
    let any_warmup = conditions.iter().any(|c| !c.warmup.is_empty());
    let mut runs = Vec::new();
    for (condition, seed) in enumerate_runs(conditions, seeds) {
        let run = condition_config(base, &condition, seed, any_warmup);
        let out = run_experiment(records, tissues, &run, warmup_corpus)?;
        let r = AblationRun {
            condition,
            seed,
            report: out.test_report,
            history: out.history,
        };
        on_run(&r);
        runs.push(r);
    }
    Ok(runs)
}
