//! Perceiver Resampler: a fixed set of learned latent queries cross-attends
//! to a variable-length sequence, producing exactly `n` output tokens.

use rand::Rng;

use crate::nn::{join, normal, AttentionCache, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache, MultiHeadAttention, Params};
use crate::tensor::{Matrix, Real};

use super::AggregationError;

#[derive(Clone, Debug, PartialEq)]
pub struct ResamplerLayer<T> {
    pub latent_norm: LayerNorm<T>,
    pub context_norm: LayerNorm<T>,
    pub attention: MultiHeadAttention<T>,
    pub ffn_norm: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Real> Params<T> for ResamplerLayer<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.latent_norm.collect(&join(prefix, "latent_norm"), out);
        self.context_norm.collect(&join(prefix, "context_norm"), out);
        self.attention.collect(&join(prefix, "attention"), out);
        self.ffn_norm.collect(&join(prefix, "ffn_norm"), out);
        self.ffn.collect(&join(prefix, "ffn"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        self.latent_norm.collect_mut(&join(prefix, "latent_norm"), out);
        self.context_norm.collect_mut(&join(prefix, "context_norm"), out);
        self.attention.collect_mut(&join(prefix, "attention"), out);
        self.ffn_norm.collect_mut(&join(prefix, "ffn_norm"), out);
        self.ffn.collect_mut(&join(prefix, "ffn"), out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerceiverResampler<T> {
    /// `n × dim` learned queries.
    pub latents: Matrix<T>,
    pub layers: Vec<ResamplerLayer<T>>,
}

impl<T: Real> Params<T> for PerceiverResampler<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        out.push((join(prefix, "latents"), &self.latents));
        self.layers.collect(&join(prefix, "layers"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        out.push((join(prefix, "latents"), &mut self.latents));
        self.layers.collect_mut(&join(prefix, "layers"), out);
    }
}

struct LayerCache<T> {
    latent_norm: LayerNormCache<T>,
    context_norm: LayerNormCache<T>,
    attention: AttentionCache<T>,
    ffn_norm: LayerNormCache<T>,
    ffn: FeedForwardCache<T>,
}

pub struct ResamplerCache<T> {
    layers: Vec<LayerCache<T>>,
}

impl<T: Real> PerceiverResampler<T> {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        num_tokens: usize,
        num_layers: usize,
        num_heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            latents: normal(num_tokens, dim, 0.02, rng),
            layers: (0..num_layers)
                .map(|_| ResamplerLayer {
                    latent_norm: LayerNorm::new(dim),
                    context_norm: LayerNorm::new(dim),
                    attention: MultiHeadAttention::new(dim, num_heads, rng),
                    ffn_norm: LayerNorm::new(dim),
                    ffn: FeedForward::new(dim, ffn_dim, rng),
                })
                .collect(),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.latents.rows()
    }

    pub fn dim(&self) -> usize {
        self.latents.cols()
    }

    pub fn forward(
        &self,
        context: &Matrix<T>,
        key_mask: Option<&[bool]>,
    ) -> Result<(Matrix<T>, ResamplerCache<T>), AggregationError> {
        if context.cols() != self.dim() {
            return Err(AggregationError::ShapeMismatch {
                expected: self.dim(),
                found: context.cols(),
            });
        }
        let mut x = self.latents.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (q, latent_norm) = layer.latent_norm.forward(&x);
            let (kv, context_norm) = layer.context_norm.forward(context);
            let (a, attention) = layer.attention.forward(&q, &kv, key_mask);
            x.add_assign(&a);
            let (n, ffn_norm) = layer.ffn_norm.forward(&x);
            let (f, ffn) = layer.ffn.forward(&n);
            x.add_assign(&f);
            layers.push(LayerCache {
                latent_norm,
                context_norm,
                attention,
                ffn_norm,
                ffn,
            });
        }
        Ok((x, ResamplerCache { layers }))
    }

    /// Returns the gradient with respect to the context.
    pub fn backward(&self, cache: &ResamplerCache<T>, dy: &Matrix<T>, grad: &mut Self) -> Matrix<T> {
        let mut g = dy.clone();
        let mut dcontext: Option<Matrix<T>> = None;
        for ((layer, lc), lg) in self.layers.iter().zip(&cache.layers).zip(grad.layers.iter_mut()).rev() {
            let dn = layer.ffn.backward(&lc.ffn, &g, &mut lg.ffn);
            g.add_assign(&layer.ffn_norm.backward(&lc.ffn_norm, &dn, &mut lg.ffn_norm));
            let (dq, dkv) = layer.attention.backward(&lc.attention, &g, &mut lg.attention);
            g.add_assign(&layer.latent_norm.backward(&lc.latent_norm, &dq, &mut lg.latent_norm));
            let dc = layer.context_norm.backward(&lc.context_norm, &dkv, &mut lg.context_norm);
            match dcontext.as_mut() {
                Some(acc) => acc.add_assign(&dc),
                None => dcontext = Some(dc),
            }
        }
        grad.latents.add_assign(&g);
        dcontext.expect("resampler has at least one layer")
    }
}
