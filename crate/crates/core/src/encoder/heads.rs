use crate::numerics::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear, Rng, Scalar, Tensor};
use crate::params::{join, Gradients, ParamKind, Parameters};

/// Masked-token prediction head: dense + GELU + LayerNorm, then projection to the vocabulary.
#[derive(Clone, Debug)]
pub struct MlmHead<T> {
    pub dense: Linear<T>,
    pub norm: LayerNorm<T>,
    pub decoder: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct MlmHeadCache<T> {
    x: Vec<T>,
    pre: Vec<T>,
    norm: LayerNormCache<T>,
    normed: Vec<T>,
}

impl<T: Scalar> MlmHead<T> {
    pub fn new(d: usize, vocab: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            dense: Linear::new(d, d, std, rng),
            norm: LayerNorm::new(d),
            decoder: Linear::new(d, vocab, std, rng),
        }
    }

    /// `x` is `[P × d]`, one row per predicted position.
    pub fn forward(&self, x: &[T]) -> (Vec<T>, MlmHeadCache<T>) {
        let pre = self.dense.forward(x);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let (normed, norm) = self.norm.forward(&act);
        let logits = self.decoder.forward(&normed);
        (
            logits,
            MlmHeadCache {
                x: x.to_vec(),
                pre,
                norm,
                normed,
            },
        )
    }

    pub fn backward(&self, cache: &MlmHeadCache<T>, dlogits: &[T], prefix: &str, grads: &mut Gradients<T>) -> Vec<T> {
        let (dnormed, dw, db) = self.decoder.backward(&cache.normed, dlogits);
        grads.insert(prefix, "decoder.weight", dw);
        grads.insert(prefix, "decoder.bias", db);
        let (mut dact, dg, dbn) = self.norm.backward(&cache.norm, &dnormed);
        grads.insert(prefix, "norm.gain", dg);
        grads.insert(prefix, "norm.bias", dbn);
        for (g, &p) in dact.iter_mut().zip(&cache.pre) {
            *g *= gelu_grad(p);
        }
        let (dx, dw, db) = self.dense.backward(&cache.x, &dact);
        grads.insert(prefix, "dense.weight", dw);
        grads.insert(prefix, "dense.bias", db);
        dx
    }
}

impl<T: Scalar> Parameters<T> for MlmHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&join(prefix, "dense.weight"), ParamKind::Dense, &self.dense.weight);
        f(&join(prefix, "dense.bias"), ParamKind::Dense, &self.dense.bias);
        f(&join(prefix, "norm.gain"), ParamKind::Dense, &self.norm.gain);
        f(&join(prefix, "norm.bias"), ParamKind::Dense, &self.norm.bias);
        f(&join(prefix, "decoder.weight"), ParamKind::Dense, &self.decoder.weight);
        f(&join(prefix, "decoder.bias"), ParamKind::Dense, &self.decoder.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "dense.weight"), ParamKind::Dense, &mut self.dense.weight);
        f(&join(prefix, "dense.bias"), ParamKind::Dense, &mut self.dense.bias);
        f(&join(prefix, "norm.gain"), ParamKind::Dense, &mut self.norm.gain);
        f(&join(prefix, "norm.bias"), ParamKind::Dense, &mut self.norm.bias);
        f(&join(prefix, "decoder.weight"), ParamKind::Dense, &mut self.decoder.weight);
        f(&join(prefix, "decoder.bias"), ParamKind::Dense, &mut self.decoder.bias);
    }
}

/// Sequence classifier: tanh pooler over the first position, then a linear layer.
#[derive(Clone, Debug)]
pub struct ClassifierHead<T> {
    pub pool: Linear<T>,
    pub out: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct ClassifierCache<T> {
    x: Vec<T>,
    pooled: Vec<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(d: usize, classes: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            pool: Linear::new(d, d, std, rng),
            out: Linear::new(d, classes, std, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.out.output_dim()
    }

    /// `first` holds the first-position hidden state of each sequence, `[B × d]`.
    pub fn forward(&self, first: &[T]) -> (Vec<T>, ClassifierCache<T>) {
        let pooled: Vec<T> = self.pool.forward(first).into_iter().map(|v| v.tanh()).collect();
        let logits = self.out.forward(&pooled);
        (
            logits,
            ClassifierCache {
                x: first.to_vec(),
                pooled,
            },
        )
    }

    pub fn backward(&self, cache: &ClassifierCache<T>, dlogits: &[T], prefix: &str, grads: &mut Gradients<T>) -> Vec<T> {
        let (mut dpooled, dw, db) = self.out.backward(&cache.pooled, dlogits);
        grads.insert(prefix, "out.weight", dw);
        grads.insert(prefix, "out.bias", db);
        for (g, &p) in dpooled.iter_mut().zip(&cache.pooled) {
            *g *= T::one() - p * p;
        }
        let (dx, dw, db) = self.pool.backward(&cache.x, &dpooled);
        grads.insert(prefix, "pool.weight", dw);
        grads.insert(prefix, "pool.bias", db);
        dx
    }
}

impl<T: Scalar> Parameters<T> for ClassifierHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&join(prefix, "pool.weight"), ParamKind::Dense, &self.pool.weight);
        f(&join(prefix, "pool.bias"), ParamKind::Dense, &self.pool.bias);
        f(&join(prefix, "out.weight"), ParamKind::Dense, &self.out.weight);
        f(&join(prefix, "out.bias"), ParamKind::Dense, &self.out.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "pool.weight"), ParamKind::Dense, &mut self.pool.weight);
        f(&join(prefix, "pool.bias"), ParamKind::Dense, &mut self.pool.bias);
        f(&join(prefix, "out.weight"), ParamKind::Dense, &mut self.out.weight);
        f(&join(prefix, "out.bias"), ParamKind::Dense, &mut self.out.bias);
    }
}
