//! The end-to-end model: per-modality encoders, projection and aggregation,
//! mean pooling over the multi-modal sequence, and a linear expression head.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::aggregation::{init_aggregation, AggregateCache, AggregationConfig, AggregationError, AggregationParams, PerModality, Strategy};
use crate::config::{ConfigError, KeyValues};
use crate::encoder::{init_encoder_with, AttentionRecord, EncoderCache, EncoderConfig, EncoderError, EncoderParams, Positional};
use crate::modality::{Modality, ModalitySet};
use crate::nn::{Linear, Params};
use crate::rng::{self, SeededRng};
use crate::tensor::{lit, Matrix, Real};
use crate::tokenization::{AlphabetKind, TokenSequence, TokenizeError, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ISOF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("no modality present")]
    NoModalityPresent,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("i/o failure on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Tokenizer and encoder settings of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityConfig {
    pub k: usize,
    /// Reserve a MASK token (needed for masked-token warm-up).
    pub mask_token: bool,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_tokens: usize,
    pub dropout_rate: f64,
    pub positional: Positional,
}

impl ModalityConfig {
    fn default_for(m: Modality) -> Self {
        Self {
            k: if m == Modality::Protein { 1 } else { 6 },
            mask_token: false,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            max_tokens: 512,
            dropout_rate: 0.0,
            positional: Positional::Learned,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Modalities with a pathway in the model.
    pub modalities: ModalitySet,
    /// Indexed by `Modality::index`; kept for every modality, used only for
    /// those in `modalities`.
    pub per_modality: [ModalityConfig; 3],
    pub aggregation: AggregationConfig,
    pub num_tissues: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: ModalitySet::ALL,
            per_modality: Modality::ALL.map(ModalityConfig::default_for),
            aggregation: AggregationConfig::default(),
            num_tissues: 30,
        }
    }
}

impl ModelConfig {
    pub fn modality(&self, m: Modality) -> &ModalityConfig {
        &self.per_modality[m.index()]
    }

    pub fn modality_mut(&mut self, m: Modality) -> &mut ModalityConfig {
        &mut self.per_modality[m.index()]
    }

    pub fn vocabulary(&self, m: Modality) -> Result<Vocabulary, ModelError> {
        let mc = self.modality(m);
        let kind = match m {
            Modality::Protein => AlphabetKind::AminoAcid,
            _ => AlphabetKind::Nucleotide,
        };
        let v = Vocabulary::build(kind, mc.k)?;
        Ok(if mc.mask_token { v.with_mask_token() } else { v })
    }

    pub fn encoder_config(&self, m: Modality) -> Result<EncoderConfig, ModelError> {
        let mc = self.modality(m);
        Ok(EncoderConfig {
            vocab_size: self.vocabulary(m)?.len(),
            embed_dim: mc.embed_dim,
            num_layers: mc.num_layers,
            num_heads: mc.num_heads,
            ffn_dim: mc.ffn_dim,
            max_tokens: mc.max_tokens,
            dropout_rate: mc.dropout_rate,
            positional: mc.positional,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_tissues == 0 {
            return Err(ModelError::InvalidConfig("num_tissues must be at least 1".into()));
        }
        if self.modalities.is_empty() {
            return Err(ModelError::NoModalityPresent);
        }
        for m in self.modalities.iter() {
            self.encoder_config(m)?.validate()?;
        }
        self.aggregation.validate()?;
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("model.modalities", self.modalities);
        kv.set("model.num_tissues", self.num_tissues);
        for m in Modality::ALL {
            let c = self.modality(m);
            kv.set(&format!("tokenizer.{m}.k"), c.k);
            kv.set(&format!("tokenizer.{m}.mask_token"), c.mask_token);
            kv.set(&format!("encoder.{m}.embed_dim"), c.embed_dim);
            kv.set(&format!("encoder.{m}.num_layers"), c.num_layers);
            kv.set(&format!("encoder.{m}.num_heads"), c.num_heads);
            kv.set(&format!("encoder.{m}.ffn_dim"), c.ffn_dim);
            kv.set(&format!("encoder.{m}.max_tokens"), c.max_tokens);
            kv.set(&format!("encoder.{m}.dropout"), c.dropout_rate);
            kv.set(&format!("encoder.{m}.positional"), c.positional);
        }
        let a = &self.aggregation;
        kv.set("aggregation.strategy", a.strategy);
        kv.set("aggregation.shared_dim", a.shared_dim);
        kv.set("aggregation.num_heads", a.num_heads);
        kv.set("aggregation.resampler_layers", a.resampler_layers);
        kv.set("aggregation.resampled_tokens", a.resampled_tokens);
        kv.set("aggregation.cabstractor_kernel", a.cabstractor_kernel);
        kv.set("aggregation.cabstractor_residual_layers", a.cabstractor_residual_layers);
        kv.set("aggregation.ffn_multiplier", a.ffn_multiplier);
        let order: Vec<&str> = a.context_order.iter().map(|m| m.name()).collect();
        kv.set("aggregation.context_order", order.join(","));
        kv
    }

    /// Reads every model key from `kv`; keys outside the model namespace are ignored.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self, ModelError> {
        let mut per_modality = Modality::ALL.map(ModalityConfig::default_for);
        for m in Modality::ALL {
            let c = &mut per_modality[m.index()];
            c.k = kv.require(&format!("tokenizer.{m}.k"))?;
            c.mask_token = kv.require(&format!("tokenizer.{m}.mask_token"))?;
            c.embed_dim = kv.require(&format!("encoder.{m}.embed_dim"))?;
            c.num_layers = kv.require(&format!("encoder.{m}.num_layers"))?;
            c.num_heads = kv.require(&format!("encoder.{m}.num_heads"))?;
            c.ffn_dim = kv.require(&format!("encoder.{m}.ffn_dim"))?;
            c.max_tokens = kv.require(&format!("encoder.{m}.max_tokens"))?;
            c.dropout_rate = kv.require(&format!("encoder.{m}.dropout"))?;
            c.positional = kv.require(&format!("encoder.{m}.positional"))?;
        }
        let order_text: String = kv.require("aggregation.context_order")?;
        let order: Vec<Modality> = order_text
            .split(',')
            .map(|s| s.trim().parse::<Modality>())
            .collect::<Result<_, _>>()
            .map_err(|e| invalid("aggregation.context_order", &order_text, e))?;
        let context_order: [Modality; 3] = order
            .try_into()
            .map_err(|_| invalid("aggregation.context_order", &order_text, "expected three modalities"))?;
        let aggregation = AggregationConfig {
            strategy: kv.require::<Strategy>("aggregation.strategy")?,
            shared_dim: kv.require("aggregation.shared_dim")?,
            num_heads: kv.require("aggregation.num_heads")?,
            resampler_layers: kv.require("aggregation.resampler_layers")?,
            resampled_tokens: kv.require("aggregation.resampled_tokens")?,
            cabstractor_kernel: kv.require("aggregation.cabstractor_kernel")?,
            cabstractor_residual_layers: kv.require("aggregation.cabstractor_residual_layers")?,
            ffn_multiplier: kv.require("aggregation.ffn_multiplier")?,
            context_order,
        };
        Ok(Self {
            modalities: kv.require("model.modalities")?,
            per_modality,
            aggregation,
            num_tissues: kv.require("model.num_tissues")?,
        })
    }

    /// Upper bound on the parameter count, computed without allocating.
    fn parameter_bound(&self) -> u128 {
        let mut total: u128 = 0;
        let s = self.aggregation.shared_dim as u128;
        let fs = s * self.aggregation.ffn_multiplier as u128;
        let block = 6 * s * s + 8 * s + 2 * s * fs + fs;
        for m in self.modalities.iter() {
            let c = self.modality(m);
            let (d, f) = (c.embed_dim as u128, c.ffn_dim as u128);
            let vocab = 4u128.saturating_pow(c.k.min(16) as u32) + 8 + 22;
            total = total
                .saturating_add((vocab + c.max_tokens as u128) * d)
                .saturating_add(c.num_layers as u128 * (4 * d * d + 8 * d + 2 * d * f + f))
                .saturating_add(2 * d + d * s + s);
        }
        let n = self.modalities.len() as u128;
        let a = &self.aggregation;
        let resampler = a.resampled_tokens as u128 * s + a.resampler_layers as u128 * (block + 2 * s);
        let abstractor = 2 * a.cabstractor_residual_layers as u128 * (a.cabstractor_kernel as u128 * s * s + 3 * s);
        total
            .saturating_add(n * n * block)
            .saturating_add((n + 1).saturating_mul(resampler.saturating_add(abstractor)))
            .saturating_add((s + 1) * self.num_tissues as u128)
    }
}

fn invalid(key: &str, value: &str, reason: impl std::fmt::Display) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

/// Tokenized inputs for one transcript; absent modalities are `None`.
pub type ModelInput = PerModality<TokenSequence>;

#[derive(Clone, Debug, PartialEq)]
pub struct IsoFormerModel<T> {
    pub config: ModelConfig,
    pub encoders: PerModality<EncoderParams<T>>,
    /// Projections into the shared width plus all aggregation blocks.
    pub aggregation: AggregationParams<T>,
    /// `shared_dim → num_tissues`.
    pub head: Linear<T>,
}

impl<T: Real> Params<T> for IsoFormerModel<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.encoders.collect(&crate::nn::join(prefix, "encoder"), out);
        self.aggregation.collect(&crate::nn::join(prefix, "aggregation"), out);
        self.head.collect(&crate::nn::join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        self.encoders.collect_mut(&crate::nn::join(prefix, "encoder"), out);
        self.aggregation.collect_mut(&crate::nn::join(prefix, "aggregation"), out);
        self.head.collect_mut(&crate::nn::join(prefix, "head"), out);
    }
}

/// Prediction plus, when requested, the self-attention weights of each encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub prediction: Vec<T>,
    pub attention: PerModality<AttentionRecord>,
}

pub struct ModelCache<T> {
    encoders: PerModality<(EncoderCache<T>, Matrix<T>)>,
    aggregation: AggregateCache<T>,
    mask: Vec<bool>,
    pooled: Matrix<T>,
}

/// Builds a model; every component draws from its own named stream.
pub fn init_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<IsoFormerModel<T>, ModelError> {
    config.validate()?;
    let mut encoders = PerModality::default();
    let mut dims = PerModality::default();
    for m in config.modalities.iter() {
        let mut r = rng::stream(seed, &format!("{}/encoder/{m}", rng::INIT));
        encoders.set(m, init_encoder_with(&config.encoder_config(m)?, &mut r)?);
        dims.set(m, config.modality(m).embed_dim);
    }
    let aggregation = init_aggregation(&config.aggregation, &dims, seed)?;
    let head = Linear::new(
        config.aggregation.shared_dim,
        config.num_tissues,
        &mut rng::stream(seed, &format!("{}/head", rng::INIT)),
    );
    Ok(IsoFormerModel {
        config: config.clone(),
        encoders,
        aggregation,
        head,
    })
}

/// Mean of the rows where `mask` is set, as a `1 × cols` matrix.
pub fn mean_pool<T: Real>(x: &Matrix<T>, mask: &[bool]) -> Option<Matrix<T>> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return None;
    }
    let mut out = Matrix::zeros(1, x.cols());
    for r in (0..x.rows()).filter(|&r| mask[r]) {
        out.row_mut(0).iter_mut().zip(x.row(r)).for_each(|(a, &b)| *a += b);
    }
    out.scale(T::one() / lit::<T>(n as f64));
    Some(out)
}

impl<T: Real> IsoFormerModel<T> {
    pub fn num_tissues(&self) -> usize {
        self.head.out_dim()
    }

    /// Forward pass. Dropout is active only when `dropout_rng` is given.
    pub fn forward(
        &self,
        input: &ModelInput,
        capture_attention: bool,
        mut dropout_rng: Option<&mut SeededRng>,
    ) -> Result<(ForwardOutput<T>, ModelCache<T>), ModelError> {
        if input.present().is_empty() {
            return Err(ModelError::NoModalityPresent);
        }
        let mut caches = PerModality::default();
        let mut projected = PerModality::default();
        let mut attention = PerModality::default();
        for (m, tokens) in input.iter() {
            let enc = self
                .encoders
                .get(m)
                .ok_or(AggregationError::ModalityNotInModel(m))?;
            let (emb, record, cache) = enc.forward(tokens, capture_attention, dropout_rng.as_deref_mut())?;
            let proj = self.aggregation.projections.get(m).ok_or(AggregationError::ModalityNotInModel(m))?;
            projected.set(m, crate::aggregation::project_to_shared(&emb, proj)?);
            if let Some(r) = record {
                attention.set(m, r);
            }
            caches.set(m, (cache, emb.values));
        }
        let (multi, agg_cache) = self.aggregation.forward(&projected)?;
        let pooled = mean_pool(&multi.concatenated, &multi.mask).ok_or(AggregationError::EmptyInput)?;
        let prediction = self.head.forward(&pooled).into_vec();
        Ok((
            ForwardOutput { prediction, attention },
            ModelCache {
                encoders: caches,
                aggregation: agg_cache,
                mask: multi.mask,
                pooled,
            },
        ))
    }

    /// Eval-mode prediction.
    pub fn predict(&self, input: &ModelInput) -> Result<Vec<T>, ModelError> {
        Ok(self.forward(input, false, None)?.0.prediction)
    }

    /// Accumulates into `grad` the parameter gradients for the upstream
    /// gradient `d_prediction` of the prediction vector.
    pub fn backward(&self, cache: &ModelCache<T>, d_prediction: &[T], grad: &mut Self) -> Result<(), ModelError> {
        if d_prediction.len() != self.num_tissues() {
            return Err(ModelError::ShapeMismatch {
                expected: self.num_tissues(),
                found: d_prediction.len(),
            });
        }
        let dy = Matrix::from_vec(1, d_prediction.len(), d_prediction.to_vec());
        let d_pooled = self.head.backward(&cache.pooled, &dy, &mut grad.head);
        let n_valid = cache.mask.iter().filter(|&&m| m).count();
        let inv = T::one() / lit::<T>(n_valid as f64);
        let mut d_concat = Matrix::zeros(cache.mask.len(), d_pooled.cols());
        for (r, &keep) in cache.mask.iter().enumerate() {
            if keep {
                d_concat.row_mut(r).iter_mut().zip(d_pooled.row(0)).for_each(|(a, &b)| *a = b * inv);
            }
        }
        let d_inputs = self.aggregation.backward(&cache.aggregation, &d_concat, &mut grad.aggregation);
        for (m, (enc_cache, enc_out)) in cache.encoders.iter() {
            let (Some(d_in), Some(proj), Some(enc)) =
                (d_inputs.get(m), self.aggregation.projections.get(m), self.encoders.get(m))
            else {
                continue;
            };
            let g_proj = grad.aggregation.projections.get_mut(m).expect("projection gradient");
            let d_enc = proj.backward(enc_out, d_in, g_proj);
            let g_enc = grad.encoders.get_mut(m).expect("encoder gradient");
            enc.backward(enc_cache, &d_enc, g_enc)?;
        }
        Ok(())
    }

    /// A copy without the pathways of modalities outside `keep`. Shared
    /// tensors are copied unchanged.
    pub fn restricted_to(&self, keep: ModalitySet) -> Self {
        let mut out = self.clone();
        for m in Modality::ALL {
            if !keep.contains(m) {
                out.encoders.take(m);
                out.config.modalities.remove(m);
            }
        }
        out.aggregation = self.aggregation.restricted_to(keep);
        out
    }

    pub fn count_parameters(&self) -> ParameterCounts {
        let mut components: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.named_tensors() {
            let parts: Vec<&str> = name.split('.').collect();
            let depth = match parts[0] {
                "encoder" => 3,
                "aggregation" => 2,
                _ => 1,
            };
            let key = parts[..depth.min(parts.len())].join(".");
            match components.last_mut() {
                Some((k, n)) if *k == key => *n += t.len(),
                _ => components.push((key, t.len())),
            }
        }
        let total = components.iter().map(|(_, n)| n).sum();
        ParameterCounts { components, total }
    }

    pub fn cast<U: Real>(&self) -> IsoFormerModel<U> {
        let mut out: IsoFormerModel<U> =
            init_model(&self.config, 0).expect("a valid model has a valid config");
        for ((_, dst), (_, src)) in out.named_tensors_mut().into_iter().zip(self.named_tensors()) {
            *dst = src.cast();
        }
        out
    }
}

/// Parameter counts grouped by component, in parameter order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterCounts {
    pub components: Vec<(String, usize)>,
    pub total: usize,
}

impl ParameterCounts {
    pub fn get(&self, component: &str) -> Option<usize> {
        self.components.iter().find(|(k, _)| k == component).map(|(_, n)| *n)
    }

    /// Sum over components whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> usize {
        self.components
            .iter()
            .filter(|(k, _)| k == prefix || k.starts_with(&format!("{prefix}.")))
            .map(|(_, n)| n)
            .sum()
    }
}

pub fn checkpoint_bytes<T: Real>(model: &IsoFormerModel<T>) -> Vec<u8> {
    let tensors = model.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for &v in t.as_slice() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    let text = model.config.to_key_values().to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelError::CorruptCheckpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint. Every tensor name and shape must match the model
/// described by the embedded config.
pub fn model_from_checkpoint_bytes<T: Real>(bytes: &[u8]) -> Result<IsoFormerModel<T>, ModelError> {
    let corrupt = |m: String| ModelError::CorruptCheckpoint(m);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors: Vec<(String, usize, usize, &[u8])> = Vec::new();
    let mut total_values: u128 = 0;
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| corrupt(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.take(1, "rank")?[0];
        if rank != 2 {
            return Err(corrupt(format!("tensor {name}: rank {rank}, expected 2")));
        }
        let rows = r.u64("dims")?;
        let cols = r.u64("dims")?;
        let n = u128::from(rows) * u128::from(cols);
        if n * 4 > (bytes.len() - r.pos) as u128 {
            return Err(corrupt(format!("tensor {name}: payload exceeds file size")));
        }
        let payload = r.take(n as usize * 4, "payload")?;
        total_values += n;
        tensors.push((name, rows as usize, cols as usize, payload));
    }
    let text_len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(text_len, "config")?).map_err(|_| corrupt("config is not UTF-8".into()))?;
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes after config".into()));
    }
    let kv = KeyValues::parse(text).map_err(|e| corrupt(format!("config: {e}")))?;
    let config = ModelConfig::from_key_values(&kv).map_err(|e| corrupt(format!("config: {e}")))?;
    config.validate().map_err(|e| corrupt(format!("config: {e}")))?;
    if config.parameter_bound() > total_values.saturating_mul(4).saturating_add(1 << 20) {
        return Err(corrupt("config describes a model larger than the stored tensors".into()));
    }
    let mut model: IsoFormerModel<T> = init_model(&config, 0).map_err(|e| corrupt(format!("config: {e}")))?;
    let mut slots = model.named_tensors_mut();
    if slots.len() != tensors.len() {
        return Err(corrupt(format!("expected {} tensors, found {}", slots.len(), tensors.len())));
    }
    for ((name, dst), (stored, rows, cols, payload)) in slots.iter_mut().zip(&tensors) {
        if name != stored {
            return Err(corrupt(format!("expected tensor {name}, found {stored}")));
        }
        if dst.shape() != (*rows, *cols) {
            return Err(corrupt(format!("tensor {name}: expected shape {:?}, found ({rows}, {cols})", dst.shape())));
        }
        for (v, chunk) in dst.as_mut_slice().iter_mut().zip(payload.chunks_exact(4)) {
            let x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            *v = T::from_f32(x).unwrap_or_else(T::nan);
        }
    }
    drop(slots);
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &IsoFormerModel<T>, path: &Path) -> Result<(), ModelError> {
    fs::write(path, checkpoint_bytes(model)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<IsoFormerModel<T>, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    model_from_checkpoint_bytes(&bytes)
}
