//! Cross-modal aggregation.
//!
//! Each present modality keeps its own token sequence and is refined by
//! cross-attending, in a fixed order, to every other present modality. The
//! refined sequences are stacked along the token axis into one multi-modal
//! embedding. An absent modality is skipped structurally: no block that
//! would read it runs, so its absence cannot perturb the other pathways.
//!
//! Three alternative strategies swap the context pathway: Perceiver
//! resampling of each context, a single resampler over all tokens, or a
//! 1-D C-Abstractor per context.

mod abstractor;
mod resampler;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::encoder::Embeddings;
use crate::modality::{Modality, ModalitySet};
use crate::nn::{join, AttentionCache, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache, Linear, MultiHeadAttention, Params};
use crate::rng;
use crate::tensor::{Matrix, Real};

pub use abstractor::{adaptive_mean_pool, adaptive_pool_windows, AbstractorCache, CAbstractor, Conv1d, ConvResidualBlock};
pub use resampler::{PerceiverResampler, ResamplerCache, ResamplerLayer};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AggregationError {
    #[error("no modality present")]
    NoModalityPresent,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("modality {0} is not part of this model")]
    ModalityNotInModel(Modality),
    #[error("empty input sequence")]
    EmptyInput,
    #[error("invalid aggregation config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    CrossAttention,
    ResamplerCrossAttention,
    LinearProjectionResampler,
    CAbstractor,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::CrossAttention,
        Strategy::ResamplerCrossAttention,
        Strategy::LinearProjectionResampler,
        Strategy::CAbstractor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::CrossAttention => "cross_attention",
            Strategy::ResamplerCrossAttention => "resampler_cross_attention",
            Strategy::LinearProjectionResampler => "linear_projection_resampler",
            Strategy::CAbstractor => "c_abstractor",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| format!("unknown aggregation strategy '{s}'"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationConfig {
    pub strategy: Strategy,
    pub shared_dim: usize,
    pub num_heads: usize,
    pub resampler_layers: usize,
    pub resampled_tokens: usize,
    pub cabstractor_kernel: usize,
    pub cabstractor_residual_layers: usize,
    /// Hidden width of every feed-forward block, as a multiple of `shared_dim`.
    pub ffn_multiplier: usize,
    /// Order in which a pathway visits its contexts.
    pub context_order: [Modality; 3],
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::CrossAttention,
            shared_dim: 32,
            num_heads: 8,
            resampler_layers: 1,
            resampled_tokens: 8,
            cabstractor_kernel: 3,
            cabstractor_residual_layers: 2,
            ffn_multiplier: 4,
            context_order: Modality::ALL,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<(), AggregationError> {
        let fail = |m: &str| Err(AggregationError::InvalidConfig(m.to_string()));
        if self.shared_dim == 0 || self.num_heads == 0 || self.shared_dim % self.num_heads != 0 {
            return fail("shared_dim must be a positive multiple of num_heads");
        }
        if self.resampled_tokens == 0 {
            return fail("resampled_tokens must be at least 1");
        }
        if self.resampler_layers == 0 {
            return fail("resampler_layers must be at least 1");
        }
        if self.cabstractor_kernel % 2 == 0 {
            return fail("cabstractor_kernel must be odd for same padding");
        }
        if self.ffn_multiplier == 0 {
            return fail("ffn_multiplier must be positive");
        }
        let mut seen = ModalitySet::EMPTY;
        for m in self.context_order {
            seen.insert(m);
        }
        if seen != ModalitySet::ALL {
            return fail("context_order must list each modality once");
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.shared_dim * self.ffn_multiplier
    }
}

/// One optional value per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct PerModality<P> {
    pub dna: Option<P>,
    pub rna: Option<P>,
    pub protein: Option<P>,
}

impl<P> Default for PerModality<P> {
    fn default() -> Self {
        Self {
            dna: None,
            rna: None,
            protein: None,
        }
    }
}

impl<P> PerModality<P> {
    pub fn get(&self, m: Modality) -> Option<&P> {
        match m {
            Modality::Dna => self.dna.as_ref(),
            Modality::Rna => self.rna.as_ref(),
            Modality::Protein => self.protein.as_ref(),
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> Option<&mut P> {
        match m {
            Modality::Dna => self.dna.as_mut(),
            Modality::Rna => self.rna.as_mut(),
            Modality::Protein => self.protein.as_mut(),
        }
    }

    pub fn slot(&mut self, m: Modality) -> &mut Option<P> {
        match m {
            Modality::Dna => &mut self.dna,
            Modality::Rna => &mut self.rna,
            Modality::Protein => &mut self.protein,
        }
    }

    pub fn set(&mut self, m: Modality, value: P) {
        *self.slot(m) = Some(value);
    }

    pub fn take(&mut self, m: Modality) -> Option<P> {
        self.slot(m).take()
    }

    pub fn present(&self) -> ModalitySet {
        ModalitySet::of(&Modality::ALL.into_iter().filter(|&m| self.get(m).is_some()).collect::<Vec<_>>())
    }

    /// Present entries in `dna, rna, protein` order.
    pub fn iter(&self) -> impl Iterator<Item = (Modality, &P)> {
        Modality::ALL.into_iter().filter_map(move |m| self.get(m).map(|p| (m, p)))
    }

    pub fn map<Q>(&self, mut f: impl FnMut(Modality, &P) -> Q) -> PerModality<Q> {
        let mut out = PerModality::default();
        for (m, p) in self.iter() {
            out.set(m, f(m, p));
        }
        out
    }
}

impl<T: Real, P: Params<T>> Params<T> for PerModality<P> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        for (m, p) in self.iter() {
            p.collect(&join(prefix, m.name()), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        let PerModality { dna, rna, protein } = self;
        for (m, slot) in [(Modality::Dna, dna), (Modality::Rna, rna), (Modality::Protein, protein)] {
            if let Some(p) = slot {
                p.collect_mut(&join(prefix, m.name()), out);
            }
        }
    }
}

/// `y = q + MHA(LN(q) → context)` followed by `y = y + FFN(LN(y))`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossBlock<T> {
    pub query_norm: LayerNorm<T>,
    pub attention: MultiHeadAttention<T>,
    pub ffn_norm: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Real> Params<T> for CrossBlock<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.query_norm.collect(&join(prefix, "query_norm"), out);
        self.attention.collect(&join(prefix, "attention"), out);
        self.ffn_norm.collect(&join(prefix, "ffn_norm"), out);
        self.ffn.collect(&join(prefix, "ffn"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        self.query_norm.collect_mut(&join(prefix, "query_norm"), out);
        self.attention.collect_mut(&join(prefix, "attention"), out);
        self.ffn_norm.collect_mut(&join(prefix, "ffn_norm"), out);
        self.ffn.collect_mut(&join(prefix, "ffn"), out);
    }
}

pub struct CrossBlockCache<T> {
    attention: Option<(LayerNormCache<T>, AttentionCache<T>)>,
    ffn_norm: LayerNormCache<T>,
    ffn: FeedForwardCache<T>,
}

impl<T: Real> CrossBlock<T> {
    pub fn new<R: rand::Rng + ?Sized>(dim: usize, num_heads: usize, ffn_dim: usize, rng: &mut R) -> Self {
        Self {
            query_norm: LayerNorm::new(dim),
            attention: MultiHeadAttention::new(dim, num_heads, rng),
            ffn_norm: LayerNorm::new(dim),
            ffn: FeedForward::new(dim, ffn_dim, rng),
        }
    }

    /// Output after the attention residual only (the FFN stage is not applied).
    pub fn attention_stage(&self, query: &Matrix<T>, context: Option<(&Matrix<T>, Option<&[bool]>)>) -> Matrix<T> {
        match context {
            None => query.clone(),
            Some((ctx, mask)) => {
                let (n, _) = self.query_norm.forward(query);
                let (a, _) = self.attention.forward(&n, ctx, mask);
                query.add(&a)
            }
        }
    }

    pub fn forward(
        &self,
        query: &Matrix<T>,
        context: Option<(&Matrix<T>, Option<&[bool]>)>,
    ) -> (Matrix<T>, CrossBlockCache<T>) {
        let mut x = query.clone();
        let attention = context.map(|(ctx, mask)| {
            let (n, ln) = self.query_norm.forward(query);
            let (a, ac) = self.attention.forward(&n, ctx, mask);
            x.add_assign(&a);
            (ln, ac)
        });
        let (n2, ffn_norm) = self.ffn_norm.forward(&x);
        let (f, ffn) = self.ffn.forward(&n2);
        x.add_assign(&f);
        (x, CrossBlockCache { attention, ffn_norm, ffn })
    }

    /// Returns `(d query, d context)`; the context gradient is `None` when
    /// the block ran without a context.
    pub fn backward(&self, cache: &CrossBlockCache<T>, dy: &Matrix<T>, grad: &mut Self) -> (Matrix<T>, Option<Matrix<T>>) {
        let mut g = dy.clone();
        let dn2 = self.ffn.backward(&cache.ffn, dy, &mut grad.ffn);
        g.add_assign(&self.ffn_norm.backward(&cache.ffn_norm, &dn2, &mut grad.ffn_norm));
        let dcontext = cache.attention.as_ref().map(|(ln, ac)| {
            let (dn, dctx) = self.attention.backward(ac, &g, &mut grad.attention);
            let dq = self.query_norm.backward(ln, &dn, &mut grad.query_norm);
            g.add_assign(&dq);
            dctx
        });
        (g, dcontext)
    }
}

/// Cross-attention block for the pathway of `query` reading `context`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBlock<T> {
    pub query: Modality,
    pub context: Modality,
    pub block: CrossBlock<T>,
}

impl<T: Real> Params<T> for PairBlock<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.block
            .collect(&join(prefix, &format!("{}.{}", self.query, self.context)), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        let name = join(prefix, &format!("{}.{}", self.query, self.context));
        self.block.collect_mut(&name, out);
    }
}

struct PairBlocks<'a, T>(&'a [PairBlock<T>]);

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationParams<T> {
    pub config: AggregationConfig,
    /// Modalities this aggregator was built for.
    pub modalities: ModalitySet,
    /// Per-modality linear maps from encoder width to `shared_dim`.
    pub projections: PerModality<Linear<T>>,
    /// Cross-attention blocks, one per ordered pair of distinct modalities
    /// (unused by `linear_projection_resampler`).
    pub cross: Vec<PairBlock<T>>,
    pub resamplers: PerModality<PerceiverResampler<T>>,
    pub abstractors: PerModality<CAbstractor<T>>,
    pub joint_resampler: Option<PerceiverResampler<T>>,
}

impl<T: Real> Params<T> for AggregationParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.projections.collect(&join(prefix, "projection"), out);
        for b in &self.cross {
            b.collect(&join(prefix, "cross"), out);
        }
        self.resamplers.collect(&join(prefix, "resampler"), out);
        self.abstractors.collect(&join(prefix, "abstractor"), out);
        self.joint_resampler.collect(&join(prefix, "joint_resampler"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        self.projections.collect_mut(&join(prefix, "projection"), out);
        for b in &mut self.cross {
            b.collect_mut(&join(prefix, "cross"), out);
        }
        self.resamplers.collect_mut(&join(prefix, "resampler"), out);
        self.abstractors.collect_mut(&join(prefix, "abstractor"), out);
        self.joint_resampler.collect_mut(&join(prefix, "joint_resampler"), out);
    }
}

impl<T> PairBlocks<'_, T> {
    fn find(&self, query: Modality, context: Modality) -> Option<usize> {
        self.0.iter().position(|b| b.query == query && b.context == context)
    }
}

/// Builds aggregation parameters for the modalities in `encoder_dims`
/// (modality → encoder width). Each component draws from its own named
/// stream, so dropping a modality leaves every other tensor unchanged.
pub fn init_aggregation<T: Real>(
    config: &AggregationConfig,
    encoder_dims: &PerModality<usize>,
    seed: u64,
) -> Result<AggregationParams<T>, AggregationError> {
    config.validate()?;
    let modalities = encoder_dims.present();
    if modalities.is_empty() {
        return Err(AggregationError::NoModalityPresent);
    }
    let d = config.shared_dim;
    let init = |name: String| rng::stream(seed, &format!("{}/aggregation/{name}", rng::INIT));
    let projections = encoder_dims.map(|m, &in_dim| Linear::new(in_dim, d, &mut init(format!("projection/{m}"))));
    let mut cross = Vec::new();
    let mut resamplers = PerModality::default();
    let mut abstractors = PerModality::default();
    let mut joint_resampler = None;
    let pairwise = config.strategy != Strategy::LinearProjectionResampler;
    if pairwise {
        for q in modalities.iter() {
            for c in modalities.iter().filter(|&c| c != q) {
                let block = CrossBlock::new(d, config.num_heads, config.ffn_dim(), &mut init(format!("cross/{q}/{c}")));
                cross.push(PairBlock { query: q, context: c, block });
            }
        }
    }
    match config.strategy {
        Strategy::CrossAttention => {}
        Strategy::ResamplerCrossAttention => {
            for m in modalities.iter() {
                let r = PerceiverResampler::new(
                    d,
                    config.resampled_tokens,
                    config.resampler_layers,
                    config.num_heads,
                    config.ffn_dim(),
                    &mut init(format!("resampler/{m}")),
                );
                resamplers.set(m, r);
            }
        }
        Strategy::CAbstractor => {
            for m in modalities.iter() {
                let a = CAbstractor::new(
                    d,
                    config.cabstractor_kernel,
                    config.cabstractor_residual_layers,
                    config.resampled_tokens,
                    &mut init(format!("abstractor/{m}")),
                );
                abstractors.set(m, a);
            }
        }
        Strategy::LinearProjectionResampler => {
            joint_resampler = Some(PerceiverResampler::new(
                d,
                config.resampled_tokens,
                config.resampler_layers,
                config.num_heads,
                config.ffn_dim(),
                &mut init("joint_resampler".to_string()),
            ));
        }
    }
    Ok(AggregationParams {
        config: config.clone(),
        modalities,
        projections,
        cross,
        resamplers,
        abstractors,
        joint_resampler,
    })
}

/// Linear map of one modality's encoder output into the shared width.
pub fn project_to_shared<T: Real>(emb: &Embeddings<T>, projection: &Linear<T>) -> Result<Embeddings<T>, AggregationError> {
    if emb.dim() != projection.in_dim() {
        return Err(AggregationError::ShapeMismatch {
            expected: projection.in_dim(),
            found: emb.dim(),
        });
    }
    Ok(Embeddings {
        values: projection.forward(&emb.values),
        modality: emb.modality,
        mask: emb.mask.clone(),
    })
}

/// Applies one cross-attention block to `query`, reading `context` when present.
pub fn cross_attend<T: Real>(
    query: &Embeddings<T>,
    context: Option<&Embeddings<T>>,
    block: &CrossBlock<T>,
) -> Result<Embeddings<T>, AggregationError> {
    let d = block.attention.dim();
    for e in std::iter::once(query).chain(context) {
        if e.dim() != d {
            return Err(AggregationError::ShapeMismatch { expected: d, found: e.dim() });
        }
    }
    let ctx = context.map(|c| (&c.values, key_mask(&c.mask)));
    let (values, _) = block.forward(&query.values, ctx);
    Ok(Embeddings {
        values,
        modality: query.modality,
        mask: query.mask.clone(),
    })
}

pub fn perceiver_resample<T: Real>(emb: &Embeddings<T>, resampler: &PerceiverResampler<T>) -> Result<Embeddings<T>, AggregationError> {
    let (values, _) = resampler.forward(&emb.values, key_mask(&emb.mask))?;
    Ok(Embeddings::new(values, emb.modality))
}

pub fn c_abstract<T: Real>(emb: &Embeddings<T>, abstractor: &CAbstractor<T>) -> Result<Embeddings<T>, AggregationError> {
    let (compact, _) = compact_rows(emb);
    let (values, _) = abstractor.forward(&compact)?;
    Ok(Embeddings::new(values, emb.modality))
}

fn key_mask(mask: &[bool]) -> Option<&[bool]> {
    if mask.iter().all(|&m| m) {
        None
    } else {
        Some(mask)
    }
}

/// Non-PAD rows and their original indices.
fn compact_rows<T: Real>(emb: &Embeddings<T>) -> (Matrix<T>, Vec<usize>) {
    let keep: Vec<usize> = (0..emb.len()).filter(|&r| emb.mask[r]).collect();
    if keep.len() == emb.len() {
        return (emb.values.clone(), keep);
    }
    let rows: Vec<Vec<T>> = keep.iter().map(|&r| emb.values.row(r).to_vec()).collect();
    let m = if rows.is_empty() {
        Matrix::zeros(0, emb.dim())
    } else {
        Matrix::from_rows(&rows)
    };
    (m, keep)
}

/// Per-modality multi-modal embeddings and their token-axis concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalEmbedding<T> {
    /// Refined sequence of each present modality (all `None` for
    /// `linear_projection_resampler`, which has no per-modality output).
    pub per_modality: PerModality<Embeddings<T>>,
    /// Rows stacked in `dna, rna, protein` order.
    pub concatenated: Matrix<T>,
    pub mask: Vec<bool>,
    /// Row count contributed by each modality, in stacking order.
    pub segments: Vec<(Modality, usize)>,
}

enum ContextCache<T> {
    Raw,
    Resampled(ResamplerCache<T>),
    Abstracted(AbstractorCache<T>, Vec<usize>, usize),
}

struct PreparedContext<T> {
    values: Matrix<T>,
    mask: Option<Vec<bool>>,
    cache: ContextCache<T>,
}

pub struct AggregateCache<T> {
    inputs: PerModality<(usize, Vec<bool>)>,
    contexts: PerModality<PreparedContext<T>>,
    /// `(query, [(block index, context, cache)])` in forward order.
    pathways: Vec<(Modality, Vec<(usize, Modality, CrossBlockCache<T>)>)>,
    joint: Option<(ResamplerCache<T>, Vec<(Modality, usize)>)>,
}

impl<T: Real> AggregationParams<T> {
    fn check_inputs(&self, inputs: &PerModality<Embeddings<T>>) -> Result<ModalitySet, AggregationError> {
        let present = inputs.present();
        if present.is_empty() {
            return Err(AggregationError::NoModalityPresent);
        }
        for (m, e) in inputs.iter() {
            if !self.modalities.contains(m) {
                return Err(AggregationError::ModalityNotInModel(m));
            }
            if e.dim() != self.config.shared_dim {
                return Err(AggregationError::ShapeMismatch {
                    expected: self.config.shared_dim,
                    found: e.dim(),
                });
            }
            if e.is_empty() {
                return Err(AggregationError::EmptyInput);
            }
        }
        Ok(present)
    }

    fn prepare_context(&self, m: Modality, e: &Embeddings<T>) -> Result<PreparedContext<T>, AggregationError> {
        Ok(match self.config.strategy {
            Strategy::ResamplerCrossAttention => {
                let r = self.resamplers.get(m).ok_or(AggregationError::ModalityNotInModel(m))?;
                let (values, cache) = r.forward(&e.values, key_mask(&e.mask))?;
                PreparedContext {
                    values,
                    mask: None,
                    cache: ContextCache::Resampled(cache),
                }
            }
            Strategy::CAbstractor => {
                let a = self.abstractors.get(m).ok_or(AggregationError::ModalityNotInModel(m))?;
                let (compact, keep) = compact_rows(e);
                let (values, cache) = a.forward(&compact)?;
                PreparedContext {
                    values,
                    mask: None,
                    cache: ContextCache::Abstracted(cache, keep, e.len()),
                }
            }
            _ => PreparedContext {
                values: e.values.clone(),
                mask: key_mask(&e.mask).map(<[bool]>::to_vec),
                cache: ContextCache::Raw,
            },
        })
    }

    /// Combines projected embeddings of the present modalities.
    pub fn forward(
        &self,
        inputs: &PerModality<Embeddings<T>>,
    ) -> Result<(MultiModalEmbedding<T>, AggregateCache<T>), AggregationError> {
        let present = self.check_inputs(inputs)?;
        let input_shapes = inputs.map(|_, e| (e.len(), e.mask.clone()));

        if self.config.strategy == Strategy::LinearProjectionResampler {
            let r = self.joint_resampler.as_ref().expect("joint resampler for linear_projection_resampler");
            let parts: Vec<&Matrix<T>> = inputs.iter().map(|(_, e)| &e.values).collect();
            let stacked = Matrix::vstack(&parts);
            let mask: Vec<bool> = inputs.iter().flat_map(|(_, e)| e.mask.iter().copied()).collect();
            let (values, cache) = r.forward(&stacked, key_mask(&mask))?;
            let segments: Vec<(Modality, usize)> = inputs.iter().map(|(m, e)| (m, e.len())).collect();
            let n = values.rows();
            return Ok((
                MultiModalEmbedding {
                    per_modality: PerModality::default(),
                    concatenated: values,
                    mask: vec![true; n],
                    segments: Vec::new(),
                },
                AggregateCache {
                    inputs: input_shapes,
                    contexts: PerModality::default(),
                    pathways: Vec::new(),
                    joint: Some((cache, segments)),
                },
            ));
        }

        let mut contexts = PerModality::default();
        if present.len() > 1 {
            for (m, e) in inputs.iter() {
                contexts.set(m, self.prepare_context(m, e)?);
            }
        }
        let blocks = PairBlocks(&self.cross);
        let mut per_modality = PerModality::default();
        let mut pathways = Vec::new();
        for (q, e) in inputs.iter() {
            let mut x = e.values.clone();
            let mut steps = Vec::new();
            for c in self.config.context_order {
                if c == q {
                    continue;
                }
                let Some(ctx) = contexts.get(c) else { continue };
                let idx = blocks.find(q, c).ok_or(AggregationError::ModalityNotInModel(c))?;
                let (y, cache) = self.cross[idx].block.forward(&x, Some((&ctx.values, ctx.mask.as_deref())));
                x = y;
                steps.push((idx, c, cache));
            }
            per_modality.set(
                q,
                Embeddings {
                    values: x,
                    modality: q,
                    mask: e.mask.clone(),
                },
            );
            pathways.push((q, steps));
        }
        let parts: Vec<&Matrix<T>> = per_modality.iter().map(|(_, e)| &e.values).collect();
        let concatenated = Matrix::vstack(&parts);
        let mask = per_modality.iter().flat_map(|(_, e)| e.mask.iter().copied()).collect();
        let segments = per_modality.iter().map(|(m, e)| (m, e.len())).collect();
        Ok((
            MultiModalEmbedding {
                per_modality,
                concatenated,
                mask,
                segments,
            },
            AggregateCache {
                inputs: input_shapes,
                contexts,
                pathways,
                joint: None,
            },
        ))
    }

    /// Backward pass from the gradient of the concatenated embedding to the
    /// gradients of each projected input. Parameter gradients accumulate
    /// into `grad`.
    pub fn backward(
        &self,
        cache: &AggregateCache<T>,
        d_concat: &Matrix<T>,
        grad: &mut Self,
    ) -> PerModality<Matrix<T>> {
        let d = self.config.shared_dim;
        let mut d_inputs: PerModality<Matrix<T>> = cache.inputs.map(|_, (len, _)| Matrix::zeros(*len, d));

        if let Some((rc, segments)) = &cache.joint {
            let r = self.joint_resampler.as_ref().expect("joint resampler");
            let gr = grad.joint_resampler.as_mut().expect("joint resampler grad");
            let d_stacked = r.backward(rc, d_concat, gr);
            let mut offset = 0;
            for &(m, len) in segments {
                d_inputs.set(m, d_stacked.row_range(offset, len));
                offset += len;
            }
            return d_inputs;
        }

        let mut d_contexts: PerModality<Matrix<T>> = cache.contexts.map(|_, c| Matrix::zeros(c.values.rows(), d));
        let mut offset = 0;
        for (q, steps) in &cache.pathways {
            let len = cache.inputs.get(*q).map_or(0, |(l, _)| *l);
            let mut g = d_concat.row_range(offset, len);
            offset += len;
            for (idx, c, bc) in steps.iter().rev() {
                let (dq, dctx) = self.cross[*idx].block.backward(bc, &g, &mut grad.cross[*idx].block);
                g = dq;
                if let (Some(dc), Some(acc)) = (dctx, d_contexts.get_mut(*c)) {
                    acc.add_assign(&dc);
                }
            }
            if let Some(acc) = d_inputs.get_mut(*q) {
                acc.add_assign(&g);
            }
        }
        for (m, ctx) in cache.contexts.iter() {
            let Some(dc) = d_contexts.get(m) else { continue };
            let d_in = match &ctx.cache {
                ContextCache::Raw => dc.clone(),
                ContextCache::Resampled(rc) => {
                    let r = self.resamplers.get(m).expect("resampler");
                    r.backward(rc, dc, grad.resamplers.get_mut(m).expect("resampler grad"))
                }
                ContextCache::Abstracted(ac, keep, full_len) => {
                    let a = self.abstractors.get(m).expect("abstractor");
                    let dcompact = a.backward(ac, dc, grad.abstractors.get_mut(m).expect("abstractor grad"));
                    let mut full = Matrix::zeros(*full_len, d);
                    for (i, &r) in keep.iter().enumerate() {
                        full.row_mut(r).copy_from_slice(dcompact.row(i));
                    }
                    full
                }
            };
            if let Some(acc) = d_inputs.get_mut(m) {
                acc.add_assign(&d_in);
            }
        }
        d_inputs
    }

    /// A copy restricted to `keep`: every projection and block that touches
    /// a dropped modality is removed, the rest is copied bit-for-bit.
    pub fn restricted_to(&self, keep: ModalitySet) -> Self {
        let mut out = self.clone();
        for m in Modality::ALL {
            if !keep.contains(m) {
                out.projections.take(m);
                out.resamplers.take(m);
                out.abstractors.take(m);
                out.modalities.remove(m);
            }
        }
        out.cross.retain(|b| keep.contains(b.query) && keep.contains(b.context));
        out
    }
}

/// Aggregates already-projected embeddings; absent modalities are `None`.
pub fn aggregate<T: Real>(
    h_dna: Option<&Embeddings<T>>,
    h_rna: Option<&Embeddings<T>>,
    h_prot: Option<&Embeddings<T>>,
    params: &AggregationParams<T>,
) -> Result<MultiModalEmbedding<T>, AggregationError> {
    let inputs = PerModality {
        dna: h_dna.cloned(),
        rna: h_rna.cloned(),
        protein: h_prot.cloned(),
    };
    params.forward(&inputs).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::normal;
    use crate::tensor::dot;

    fn dims(d: usize) -> PerModality<usize> {
        PerModality {
            dna: Some(d),
            rna: Some(d),
            protein: Some(d),
        }
    }

    fn config(strategy: Strategy, d: usize, heads: usize) -> AggregationConfig {
        AggregationConfig {
            strategy,
            shared_dim: d,
            num_heads: heads,
            resampled_tokens: 4,
            ffn_multiplier: 2,
            ..AggregationConfig::default()
        }
    }

    fn emb(len: usize, d: usize, m: Modality, seed: u64) -> Embeddings<f64> {
        let mut r = rng::stream(seed, "emb");
        Embeddings::new(normal(len, d, 1.0, &mut r), m)
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("perceiver".parse::<Strategy>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = AggregationConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!((c.num_heads, c.resampler_layers, c.resampled_tokens, c.cabstractor_kernel), (8, 1, 8, 3));
        c.shared_dim = 30;
        assert!(c.validate().is_err());
        let mut c = AggregationConfig::default();
        c.context_order = [Modality::Dna, Modality::Dna, Modality::Rna];
        assert!(c.validate().is_err());
    }

    #[test]
    fn projection_identity_and_shape() {
        let e = emb(5, 8, Modality::Dna, 1);
        let out = project_to_shared(&e, &Linear::identity(8)).unwrap();
        assert_eq!(out.values, e.values);
        let mut r = rng::stream(2, "p");
        let p = emb(7, 640, Modality::Protein, 2);
        let proj = Linear::new(640, 128, &mut r);
        assert_eq!(project_to_shared(&p, &proj).unwrap().values.shape(), (7, 128));
        assert!(project_to_shared(&e, &proj).is_err());
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let mut r = rng::stream(3, "p");
        let proj: Linear<f64> = Linear::new(6, 4, &mut r);
        let x: Matrix<f64> = normal(5, 6, 1.0, &mut r);
        let up: Matrix<f64> = normal(5, 4, 1.0, &mut r);
        let mut g = proj.zeros_like();
        proj.backward(&x, &up, &mut g);
        let (worst, at) = gradcheck::check(&proj, &g, 1e-5, |p| dot(p.forward(&x).as_slice(), up.as_slice()));
        assert!(worst < 1e-4, "{worst} {at}");
    }

    #[test]
    fn absent_context_leaves_stage_one_unchanged() {
        let mut r = rng::stream(4, "b");
        let block: CrossBlock<f64> = CrossBlock::new(8, 2, 16, &mut r);
        let q = emb(6, 8, Modality::Rna, 5);
        assert_eq!(block.attention_stage(&q.values, None), q.values);
        let c = emb(3, 8, Modality::Dna, 6);
        let out = cross_attend(&q, Some(&c), &block).unwrap();
        assert_eq!(out.values.shape(), (6, 8));
        let bad = emb(3, 4, Modality::Dna, 6);
        assert!(cross_attend(&q, Some(&bad), &block).is_err());
    }

    #[test]
    fn identical_keys_average_values() {
        let mut r = rng::stream(5, "b");
        let mut block: CrossBlock<f64> = CrossBlock::new(4, 1, 8, &mut r);
        block.attention.query = Linear::identity(4);
        block.attention.key = Linear::identity(4);
        block.attention.value = Linear::identity(4);
        block.attention.output = Linear::identity(4);
        let v = [0.3, -1.0, 2.5, 0.0];
        let ctx = Matrix::from_rows(&vec![v.to_vec(); 5]);
        let q = emb(3, 4, Modality::Dna, 7).values;
        let out = block.attention_stage(&q, Some((&ctx, None)));
        for row in 0..3 {
            for c in 0..4 {
                assert!((out.get(row, c) - (q.get(row, c) + v[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_modality_passes_through() {
        let p = init_aggregation::<f64>(&config(Strategy::CrossAttention, 8, 2), &dims(8), 1).unwrap();
        let h = emb(7, 8, Modality::Rna, 1);
        let out = aggregate(None, Some(&h), None, &p).unwrap();
        assert_eq!(out.per_modality.rna.as_ref().unwrap().values, h.values);
        assert_eq!(out.concatenated, h.values);
        assert!(matches!(aggregate::<f64>(None, None, None, &p), Err(AggregationError::NoModalityPresent)));
    }

    #[test]
    fn concatenation_lengths() {
        for s in [Strategy::CrossAttention, Strategy::ResamplerCrossAttention, Strategy::CAbstractor] {
            let p = init_aggregation::<f64>(&config(s, 8, 2), &dims(8), 1).unwrap();
            let (a, b, c) = (emb(10, 8, Modality::Dna, 1), emb(20, 8, Modality::Rna, 2), emb(5, 8, Modality::Protein, 3));
            let out = aggregate(Some(&a), Some(&b), Some(&c), &p).unwrap();
            assert_eq!(out.concatenated.rows(), 35, "{s}");
            assert_eq!(out.segments, vec![(Modality::Dna, 10), (Modality::Rna, 20), (Modality::Protein, 5)]);
            for (m, e) in out.per_modality.iter() {
                let n = [10, 20, 5][m.index()];
                assert_eq!(e.len(), n);
            }
        }
        let p = init_aggregation::<f64>(&config(Strategy::LinearProjectionResampler, 8, 2), &dims(8), 1).unwrap();
        let (a, b) = (emb(10, 8, Modality::Dna, 1), emb(20, 8, Modality::Rna, 2));
        assert_eq!(aggregate(Some(&a), Some(&b), None, &p).unwrap().concatenated.shape(), (4, 8));
    }

    #[test]
    fn zero_output_projection_decouples_modalities() {
        let mut p = init_aggregation::<f64>(&config(Strategy::CrossAttention, 8, 2), &dims(8), 9).unwrap();
        for b in &mut p.cross {
            b.block.attention.output.weight.fill(0.0);
        }
        let (a, b, c) = (emb(4, 8, Modality::Dna, 1), emb(6, 8, Modality::Rna, 2), emb(3, 8, Modality::Protein, 3));
        let run1 = aggregate(Some(&a), Some(&b), Some(&c), &p).unwrap();
        let (b2, c2) = (emb(9, 8, Modality::Rna, 20), emb(2, 8, Modality::Protein, 30));
        let run2 = aggregate(Some(&a), Some(&b2), Some(&c2), &p).unwrap();
        assert_eq!(run1.per_modality.dna, run2.per_modality.dna);
        // Equals applying only the FFN residual stages in order.
        let mut x = a.values.clone();
        for ctx in [Modality::Rna, Modality::Protein] {
            let blk = &p.cross.iter().find(|pb| pb.query == Modality::Dna && pb.context == ctx).unwrap().block;
            let (n, _) = blk.ffn_norm.forward(&x);
            let (f, _) = blk.ffn.forward(&n);
            x.add_assign(&f);
        }
        let got = &run1.per_modality.dna.as_ref().unwrap().values;
        for (u, v) in got.as_slice().iter().zip(x.as_slice()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn absence_is_structural() {
        for s in Strategy::ALL {
            let full = init_aggregation::<f64>(&config(s, 8, 2), &dims(8), 4).unwrap();
            let reduced = full.restricted_to(ModalitySet::of(&[Modality::Dna, Modality::Rna]));
            let mut two = dims(8);
            two.protein = None;
            let fresh = init_aggregation::<f64>(&config(s, 8, 2), &two, 4).unwrap();
            assert_eq!(reduced, fresh, "{s}: restricting equals building without protein");
            let (a, b) = (emb(4, 8, Modality::Dna, 1), emb(6, 8, Modality::Rna, 2));
            let x = aggregate(Some(&a), Some(&b), None, &full).unwrap();
            let y = aggregate(Some(&a), Some(&b), None, &reduced).unwrap();
            assert_eq!(x, y, "{s}");
        }
    }

    #[test]
    fn context_permutation_with_zero_key_value_weights() {
        let mut p = init_aggregation::<f64>(&config(Strategy::CrossAttention, 8, 2), &dims(8), 2).unwrap();
        for b in &mut p.cross {
            b.block.attention.key.weight.fill(0.0);
            b.block.attention.value.weight.fill(0.0);
            b.block.attention.value.bias = normal(1, 8, 1.0, &mut rng::stream(1, "vb"));
        }
        let a = emb(4, 8, Modality::Dna, 1);
        let b = emb(6, 8, Modality::Rna, 2);
        let mut shuffled = b.clone();
        let order = [3usize, 0, 5, 1, 4, 2];
        shuffled.values = Matrix::from_rows(&order.iter().map(|&r| b.values.row(r).to_vec()).collect::<Vec<_>>());
        let x = aggregate(Some(&a), Some(&b), None, &p).unwrap();
        let y = aggregate(Some(&a), Some(&shuffled), None, &p).unwrap();
        let (u, v) = (x.per_modality.dna.unwrap().values, y.per_modality.dna.unwrap().values);
        for (s, t) in u.as_slice().iter().zip(v.as_slice()) {
            assert!((s - t).abs() < 1e-12);
        }
    }

    #[test]
    fn context_permutation_general() {
        // Without positional terms in cross-attention, permuting context rows
        // permutes the softmax terms of a sum: results agree to rounding.
        let p = init_aggregation::<f64>(&config(Strategy::CrossAttention, 8, 2), &dims(8), 3).unwrap();
        let a = emb(4, 8, Modality::Dna, 1);
        let b = emb(6, 8, Modality::Rna, 2);
        let mut rev = b.clone();
        rev.values = Matrix::from_rows(&(0..6).rev().map(|r| b.values.row(r).to_vec()).collect::<Vec<_>>());
        let x = aggregate(Some(&a), Some(&b), None, &p).unwrap().per_modality.dna.unwrap();
        let y = aggregate(Some(&a), Some(&rev), None, &p).unwrap().per_modality.dna.unwrap();
        for (s, t) in x.values.as_slice().iter().zip(y.values.as_slice()) {
            assert!((s - t).abs() < 1e-10);
        }
    }

    #[test]
    fn modality_outside_model_rejected() {
        let mut two = dims(8);
        two.protein = None;
        let p = init_aggregation::<f64>(&config(Strategy::CrossAttention, 8, 2), &two, 1).unwrap();
        let c = emb(3, 8, Modality::Protein, 1);
        assert_eq!(
            aggregate(None, None, Some(&c), &p),
            Err(AggregationError::ModalityNotInModel(Modality::Protein))
        );
    }

    #[test]
    fn gradients_for_every_strategy() {
        for s in Strategy::ALL {
            let p = init_aggregation::<f64>(&config(s, 8, 2), &dims(8), 6).unwrap();
            let mut a = emb(5, 8, Modality::Dna, 1);
            a.mask = vec![true, true, true, true, false];
            let inputs = PerModality {
                dna: Some(a),
                rna: Some(emb(4, 8, Modality::Rna, 2)),
                protein: Some(emb(3, 8, Modality::Protein, 3)),
            };
            let (out, cache) = p.forward(&inputs).unwrap();
            let up: Matrix<f64> = normal(out.concatenated.rows(), 8, 1.0, &mut rng::stream(7, "up"));
            let mut g = p.zeros_like();
            let d_in = p.backward(&cache, &up, &mut g);
            let loss = |q: &AggregationParams<f64>, x: &PerModality<Embeddings<f64>>| {
                dot(q.forward(x).unwrap().0.concatenated.as_slice(), up.as_slice())
            };
            let (worst, at) = gradcheck::check(&p, &g, 1e-5, |q| loss(q, &inputs));
            assert!(worst < 1e-4, "{s}: worst {worst} at {at}");
            for m in Modality::ALL {
                let analytic = d_in.get(m).unwrap();
                for i in 0..analytic.len() {
                    let mut plus = inputs.clone();
                    plus.get_mut(m).unwrap().values.as_mut_slice()[i] += 1e-5;
                    let mut minus = inputs.clone();
                    minus.get_mut(m).unwrap().values.as_mut_slice()[i] -= 1e-5;
                    let fd = (loss(&p, &plus) - loss(&p, &minus)) / 2e-5;
                    let e = gradcheck::rel_error(analytic.as_slice()[i], fd);
                    assert!(e < 1e-4, "{s} {m}[{i}]: {} vs {fd}", analytic.as_slice()[i]);
                }
            }
        }
    }
}
