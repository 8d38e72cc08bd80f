//! Pre-LN transformer encoder with attention capture and a full backward pass.

use rand::Rng;
use thiserror::Error;

use crate::modality::Modality;
use crate::nn::{dropout_mask, hadamard, join, normal, FeedForward, LayerNorm, LayerNormCache, MultiHeadAttention, Params};
use crate::nn::{AttentionCache, FeedForwardCache};
use crate::rng::{self, SeededRng};
use crate::tensor::{lit, Matrix, Real};
use crate::tokenization::TokenSequence;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_tokens {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: (usize, usize), found: (usize, usize) },
    #[error("empty token sequence")]
    EmptySequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positional {
    Learned,
    Sinusoidal,
}

impl std::str::FromStr for Positional {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "learned" => Ok(Self::Learned),
            "sinusoidal" => Ok(Self::Sinusoidal),
            _ => Err(format!("unknown positional encoding '{s}'")),
        }
    }
}

impl std::fmt::Display for Positional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Learned => "learned",
            Self::Sinusoidal => "sinusoidal",
        })
    }
}

/// Shape of one modality encoder. Reference scales of the published
/// foundation encoders (768-dim/24 layers for nucleotides, 640-dim/30 layers
/// for proteins) are far beyond desk scale; nothing here defaults to them.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_tokens: usize,
    pub dropout_rate: f64,
    pub positional: Positional,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |m: &str| Err(EncoderError::InvalidConfig(m.to_string()));
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive");
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail("embed_dim must be a positive multiple of num_heads");
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be positive");
        }
        if self.max_tokens == 0 {
            return fail("max_tokens must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub attn_norm: LayerNorm<T>,
    pub attention: MultiHeadAttention<T>,
    pub ffn_norm: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Real> Params<T> for EncoderLayer<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.attn_norm.collect(&join(prefix, "attn_norm"), out);
        self.attention.collect(&join(prefix, "attention"), out);
        self.ffn_norm.collect(&join(prefix, "ffn_norm"), out);
        self.ffn.collect(&join(prefix, "ffn"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        self.attn_norm.collect_mut(&join(prefix, "attn_norm"), out);
        self.attention.collect_mut(&join(prefix, "attention"), out);
        self.ffn_norm.collect_mut(&join(prefix, "ffn_norm"), out);
        self.ffn.collect_mut(&join(prefix, "ffn"), out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub token_embedding: Matrix<T>,
    /// Present only for learned positions.
    pub position_embedding: Option<Matrix<T>>,
    pub layers: Vec<EncoderLayer<T>>,
    pub final_norm: LayerNorm<T>,
}

impl<T: Real> Params<T> for EncoderParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        out.push((join(prefix, "token_embedding"), &self.token_embedding));
        if let Some(p) = &self.position_embedding {
            out.push((join(prefix, "position_embedding"), p));
        }
        self.layers.collect(&join(prefix, "layers"), out);
        self.final_norm.collect(&join(prefix, "final_norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        out.push((join(prefix, "token_embedding"), &mut self.token_embedding));
        if let Some(p) = &mut self.position_embedding {
            out.push((join(prefix, "position_embedding"), p));
        }
        self.layers.collect_mut(&join(prefix, "layers"), out);
        self.final_norm.collect_mut(&join(prefix, "final_norm"), out);
    }
}

/// Glorot projections, N(0, 0.02) embeddings, unit layer-norm scales.
pub fn init_encoder<T: Real>(config: &EncoderConfig, seed: u64) -> Result<EncoderParams<T>, EncoderError> {
    let mut rng = rng::stream(seed, rng::INIT);
    init_encoder_with(config, &mut rng)
}

pub fn init_encoder_with<T: Real, R: Rng + ?Sized>(
    config: &EncoderConfig,
    rng: &mut R,
) -> Result<EncoderParams<T>, EncoderError> {
    config.validate()?;
    let d = config.embed_dim;
    let token_embedding = normal(config.vocab_size, d, 0.02, rng);
    let position_embedding = match config.positional {
        Positional::Learned => Some(normal(config.max_tokens, d, 0.02, rng)),
        Positional::Sinusoidal => None,
    };
    let layers = (0..config.num_layers)
        .map(|_| EncoderLayer {
            attn_norm: LayerNorm::new(d),
            attention: MultiHeadAttention::new(d, config.num_heads, rng),
            ffn_norm: LayerNorm::new(d),
            ffn: FeedForward::new(d, config.ffn_dim, rng),
        })
        .collect();
    Ok(EncoderParams {
        config: config.clone(),
        token_embedding,
        position_embedding,
        layers,
        final_norm: LayerNorm::new(d),
    })
}

pub fn sinusoidal_row<T: Real>(pos: usize, dim: usize) -> Vec<T> {
    (0..dim)
        .map(|i| {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
        })
        .collect()
}

/// Per-token activations of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings<T> {
    /// `num_tokens × dim`
    pub values: Matrix<T>,
    pub modality: Modality,
    /// `false` marks PAD rows.
    pub mask: Vec<bool>,
}

impl<T: Real> Embeddings<T> {
    pub fn new(values: Matrix<T>, modality: Modality) -> Self {
        let mask = vec![true; values.rows()];
        Self { values, modality, mask }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn has_padding(&self) -> bool {
        self.mask.iter().any(|m| !m)
    }
}

/// Post-softmax self-attention weights: `weights[layer][head]` is `L × L`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub weights: Vec<Vec<Matrix<f64>>>,
}

impl AttentionRecord {
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_heads(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }
}

struct LayerCache<T> {
    attn_norm: LayerNormCache<T>,
    attention: AttentionCache<T>,
    attn_dropout: Option<Matrix<T>>,
    ffn_norm: LayerNormCache<T>,
    ffn: FeedForwardCache<T>,
    ffn_dropout: Option<Matrix<T>>,
}

/// Everything `backward` needs from one forward pass.
pub struct EncoderCache<T> {
    ids: Vec<u32>,
    mask: Vec<bool>,
    input_dropout: Option<Matrix<T>>,
    layers: Vec<LayerCache<T>>,
    final_norm: LayerNormCache<T>,
}

fn check_tokens<T: Real>(tokens: &TokenSequence, params: &EncoderParams<T>) -> Result<(), EncoderError> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(EncoderError::EmptySequence);
    }
    if tokens.len() > cfg.max_tokens {
        return Err(EncoderError::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_tokens,
        });
    }
    if let Some(&id) = tokens.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(EncoderError::IdOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

impl<T: Real> EncoderParams<T> {
    /// Forward pass. Dropout is applied only when `dropout_rng` is given.
    pub fn forward(
        &self,
        tokens: &TokenSequence,
        capture_attention: bool,
        mut dropout_rng: Option<&mut SeededRng>,
    ) -> Result<(Embeddings<T>, Option<AttentionRecord>, EncoderCache<T>), EncoderError> {
        check_tokens(tokens, self)?;
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let len = tokens.len();
        let mask = tokens.attention_mask();
        let mut x = Matrix::zeros(len, d);
        for (r, &id) in tokens.ids.iter().enumerate() {
            let emb = self.token_embedding.row(id as usize);
            let row = x.row_mut(r);
            row.copy_from_slice(emb);
            match &self.position_embedding {
                Some(p) => row.iter_mut().zip(p.row(r)).for_each(|(a, &b)| *a += b),
                None => row
                    .iter_mut()
                    .zip(sinusoidal_row::<T>(r, d))
                    .for_each(|(a, b)| *a += b),
            }
        }
        let rate = cfg.dropout_rate;
        let mut draw = |rows: usize| -> Option<Matrix<T>> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => Some(dropout_mask(rows, d, rate, rng)),
                _ => None,
            }
        };
        let input_dropout = draw(len);
        if let Some(m) = &input_dropout {
            x = hadamard(&x, m);
        }
        let key_mask = if mask.iter().all(|&m| m) { None } else { Some(mask.as_slice()) };
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut record = capture_attention.then(|| AttentionRecord { weights: Vec::new() });
        for layer in &self.layers {
            let (n1, attn_norm) = layer.attn_norm.forward(&x);
            let (mut a, attention) = layer.attention.forward(&n1, &n1, key_mask);
            let attn_dropout = draw(len);
            if let Some(m) = &attn_dropout {
                a = hadamard(&a, m);
            }
            x.add_assign(&a);
            let (n2, ffn_norm) = layer.ffn_norm.forward(&x);
            let (mut f, ffn) = layer.ffn.forward(&n2);
            let ffn_dropout = draw(len);
            if let Some(m) = &ffn_dropout {
                f = hadamard(&f, m);
            }
            x.add_assign(&f);
            if let Some(rec) = record.as_mut() {
                rec.weights
                    .push(attention.probs.iter().map(|p| p.cast::<f64>()).collect());
            }
            caches.push(LayerCache {
                attn_norm,
                attention,
                attn_dropout,
                ffn_norm,
                ffn,
                ffn_dropout,
            });
        }
        let (out, final_norm) = self.final_norm.forward(&x);
        let embeddings = Embeddings {
            values: out,
            modality: tokens.modality,
            mask: mask.clone(),
        };
        let cache = EncoderCache {
            ids: tokens.ids.clone(),
            mask,
            input_dropout,
            layers: caches,
            final_norm,
        };
        Ok((embeddings, record, cache))
    }

    /// Accumulates parameter gradients for upstream gradient `upstream`
    /// (`L × embed_dim`) into `grad`. Upstream rows at PAD positions are ignored.
    pub fn backward(
        &self,
        cache: &EncoderCache<T>,
        upstream: &Matrix<T>,
        grad: &mut Self,
    ) -> Result<(), EncoderError> {
        let expected = (cache.ids.len(), self.config.embed_dim);
        if upstream.shape() != expected {
            return Err(EncoderError::ShapeMismatch {
                expected,
                found: upstream.shape(),
            });
        }
        let mut g = upstream.clone();
        for (r, &keep) in cache.mask.iter().enumerate() {
            if !keep {
                g.row_mut(r).fill(T::zero());
            }
        }
        let mut g = self.final_norm.backward(&cache.final_norm, &g, &mut grad.final_norm);
        for ((layer, lc), lg) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            let df = match &lc.ffn_dropout {
                Some(m) => hadamard(&g, m),
                None => g.clone(),
            };
            let dn2 = layer.ffn.backward(&lc.ffn, &df, &mut lg.ffn);
            g.add_assign(&layer.ffn_norm.backward(&lc.ffn_norm, &dn2, &mut lg.ffn_norm));
            let da = match &lc.attn_dropout {
                Some(m) => hadamard(&g, m),
                None => g.clone(),
            };
            let (dq, dkv) = layer.attention.backward(&lc.attention, &da, &mut lg.attention);
            let dn1 = dq.add(&dkv);
            g.add_assign(&layer.attn_norm.backward(&lc.attn_norm, &dn1, &mut lg.attn_norm));
        }
        if let Some(m) = &cache.input_dropout {
            g = hadamard(&g, m);
        }
        for (r, &id) in cache.ids.iter().enumerate() {
            let src = g.row(r);
            grad.token_embedding
                .row_mut(id as usize)
                .iter_mut()
                .zip(src)
                .for_each(|(a, &b)| *a += b);
            if let Some(p) = grad.position_embedding.as_mut() {
                p.row_mut(r).iter_mut().zip(src).for_each(|(a, &b)| *a += b);
            }
        }
        Ok(())
    }
}

/// Eval-mode forward returning embeddings and, when asked, attention weights.
pub fn encode<T: Real>(
    tokens: &TokenSequence,
    params: &EncoderParams<T>,
    capture_attention: bool,
    dropout_rng: Option<&mut SeededRng>,
) -> Result<(Embeddings<T>, Option<AttentionRecord>), EncoderError> {
    let (e, a, _) = params.forward(tokens, capture_attention, dropout_rng)?;
    Ok((e, a))
}

/// Parameter gradients of `⟨encode(tokens), upstream⟩` in eval mode.
pub fn encode_backward<T: Real>(
    tokens: &TokenSequence,
    params: &EncoderParams<T>,
    upstream: &Matrix<T>,
) -> Result<EncoderParams<T>, EncoderError> {
    let (_, _, cache) = params.forward(tokens, false, None)?;
    let mut grad = params.zeros_like();
    params.backward(&cache, upstream, &mut grad)?;
    Ok(grad)
}
