//! Cross-attention token resampler.
//!
//! A fixed set of `N` learned latent queries attends over an arbitrary number
//! `M` of input tokens; each layer adds the attended values back onto the
//! latents. Single head, no normalization layers.

use rand::Rng;

use super::tensor::{softmax_rows, TokenMatrix};
use super::AlignError;

/// Projection weights of one cross-attention layer, each `d × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: TokenMatrix,
    pub wk: TokenMatrix,
    pub wv: TokenMatrix,
    pub wo: TokenMatrix,
}

impl AttentionWeights {
    fn zeros(d: usize) -> Self {
        Self {
            wq: TokenMatrix::zeros(d, d),
            wk: TokenMatrix::zeros(d, d),
            wv: TokenMatrix::zeros(d, d),
            wo: TokenMatrix::zeros(d, d),
        }
    }

    fn matrices(&self) -> [&TokenMatrix; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    fn matrices_mut(&mut self) -> [&mut TokenMatrix; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }
}

/// Latent queries plus per-layer projections.
#[derive(Debug, Clone, PartialEq)]
pub struct ResamplerParams {
    pub latents: TokenMatrix,
    pub layers: Vec<AttentionWeights>,
}

impl ResamplerParams {
    /// Validates that every projection is `d × d` for the latent width `d`.
    pub fn new(latents: TokenMatrix, layers: Vec<AttentionWeights>) -> Result<Self, AlignError> {
        if layers.is_empty() {
            return Err(AlignError::NoLayers);
        }
        let d = latents.cols();
        for (l, layer) in layers.iter().enumerate() {
            for m in layer.matrices() {
                if m.shape() != (d, d) {
                    return Err(AlignError::ShapeMismatch {
                        what: format!("layer {l} projection"),
                        expected: (d, d),
                        actual: m.shape(),
                    });
                }
                if !m.is_finite() {
                    return Err(AlignError::NonFiniteParams);
                }
            }
        }
        if !latents.is_finite() {
            return Err(AlignError::NonFiniteParams);
        }
        Ok(Self { latents, layers })
    }

    /// Gaussian initialization with `1/√d` weight scale.
    pub fn random<R: Rng + ?Sized>(n_latents: usize, dim: usize, n_layers: usize, rng: &mut R) -> Self {
        let w = 1.0 / (dim as f64).sqrt();
        let latents = TokenMatrix::random_normal(n_latents, dim, 0.5, rng);
        let layers = (0..n_layers.max(1))
            .map(|_| AttentionWeights {
                wq: TokenMatrix::random_normal(dim, dim, w, rng),
                wk: TokenMatrix::random_normal(dim, dim, w, rng),
                wv: TokenMatrix::random_normal(dim, dim, w, rng),
                wo: TokenMatrix::random_normal(dim, dim, w, rng),
            })
            .collect();
        Self { latents, layers }
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            latents: TokenMatrix::zeros(self.latents.rows(), self.latents.cols()),
            layers: self.layers.iter().map(|_| AttentionWeights::zeros(self.dim())).collect(),
        }
    }

    pub fn n_latents(&self) -> usize {
        self.latents.rows()
    }

    pub fn dim(&self) -> usize {
        self.latents.cols()
    }

    /// Every parameter tensor in a fixed order: latents, then `wq, wk, wv, wo` per layer.
    pub fn tensors(&self) -> Vec<&TokenMatrix> {
        let mut out = vec![&self.latents];
        for layer in &self.layers {
            out.extend(layer.matrices());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut TokenMatrix> {
        let mut out = vec![&mut self.latents];
        for layer in &mut self.layers {
            out.extend(layer.matrices_mut());
        }
        out
    }

    pub fn axpy(&mut self, alpha: f64, grad: &Self) {
        for (p, g) in self.tensors_mut().into_iter().zip(grad.tensors()) {
            p.axpy(alpha, g);
        }
    }
}

/// Intermediate values of one layer, kept for the backward pass.
#[derive(Debug, Clone)]
struct LayerCache {
    latents_in: TokenMatrix,
    queries: TokenMatrix,
    keys: TokenMatrix,
    values: TokenMatrix,
    attn: TokenMatrix,
    mixed: TokenMatrix,
}

/// Forward result with everything needed for [`ResamplerTrace::backward`].
#[derive(Debug, Clone)]
pub struct ResamplerTrace {
    pub output: TokenMatrix,
    inputs: TokenMatrix,
    caches: Vec<LayerCache>,
}

/// Resample `inputs` (`M × d`) into `N × d` latent tokens.
pub fn resample(params: &ResamplerParams, inputs: &TokenMatrix) -> Result<TokenMatrix, AlignError> {
    resample_traced(params, inputs).map(|t| t.output)
}

pub fn resample_traced(params: &ResamplerParams, inputs: &TokenMatrix) -> Result<ResamplerTrace, AlignError> {
    let d = params.dim();
    if inputs.cols() != d {
        return Err(AlignError::ShapeMismatch {
            what: "resampler inputs".into(),
            expected: (inputs.rows(), d),
            actual: inputs.shape(),
        });
    }
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut latents = params.latents.clone();
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let queries = latents.matmul(&layer.wq);
        let keys = inputs.matmul(&layer.wk);
        let values = inputs.matmul(&layer.wv);
        let scores = queries.matmul_t(&keys).scaled(inv_sqrt_d);
        let attn = softmax_rows(&scores);
        let mixed = attn.matmul(&values);
        let mut next = latents.clone();
        next.add_assign(&mixed.matmul(&layer.wo));
        caches.push(LayerCache {
            latents_in: latents,
            queries,
            keys,
            values,
            attn,
            mixed,
        });
        latents = next;
    }
    Ok(ResamplerTrace {
        output: latents,
        inputs: inputs.clone(),
        caches,
    })
}

impl ResamplerTrace {
    /// Back-propagates `grad_output` (`N × d`). Returns parameter and input gradients.
    pub fn backward(&self, params: &ResamplerParams, grad_output: &TokenMatrix) -> (ResamplerParams, TokenMatrix) {
        assert_eq!(grad_output.shape(), self.output.shape());
        let d = params.dim();
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut grads = params.zeros_like();
        let mut grad_inputs = TokenMatrix::zeros(self.inputs.rows(), self.inputs.cols());
        let mut grad_latents = grad_output.clone();

        for (l, (layer, cache)) in params.layers.iter().zip(&self.caches).enumerate().rev() {
            let g = &mut grads.layers[l];
            // out = latents_in + mixed·Wo
            g.wo = cache.mixed.t_matmul(&grad_latents);
            let grad_mixed = grad_latents.matmul_t(&layer.wo);
            // mixed = attn·values
            let grad_attn = grad_mixed.matmul_t(&cache.values);
            let grad_values = cache.attn.t_matmul(&grad_mixed);
            // softmax rows
            let mut grad_scores = TokenMatrix::zeros(cache.attn.rows(), cache.attn.cols());
            for i in 0..cache.attn.rows() {
                let a = cache.attn.row(i);
                let ga = grad_attn.row(i);
                let inner: f64 = a.iter().zip(ga).map(|(x, y)| x * y).sum();
                for (gs, (x, y)) in grad_scores.row_mut(i).iter_mut().zip(a.iter().zip(ga)) {
                    *gs = x * (y - inner) * inv_sqrt_d;
                }
            }
            let grad_queries = grad_scores.matmul(&cache.keys);
            let grad_keys = grad_scores.t_matmul(&cache.queries);

            g.wq = cache.latents_in.t_matmul(&grad_queries);
            g.wk = self.inputs.t_matmul(&grad_keys);
            g.wv = self.inputs.t_matmul(&grad_values);
            grad_inputs.add_assign(&grad_keys.matmul_t(&layer.wk));
            grad_inputs.add_assign(&grad_values.matmul_t(&layer.wv));
            // residual path plus the query projection
            grad_latents.add_assign(&grad_queries.matmul_t(&layer.wq));
        }
        grads.latents = grad_latents;
        (grads, grad_inputs)
    }
}
