use crate::numerics::{gemm, softmax_in_place, Linear, Rng, Scalar, Tensor};
use crate::params::{join, Gradients, ParamKind, Parameters};

/// Bidirectional multi-head self-attention with a key padding mask.
#[derive(Clone, Debug)]
pub struct SelfAttention<T> {
    /// Fused query/key/value projection `[d × 3d]`.
    pub qkv: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    x: Vec<T>,
    qkv: Vec<T>,
    /// `[B × H × T × T]`
    probs: Vec<T>,
    /// Concatenated head outputs `[B·T × d]`.
    ctx: Vec<T>,
    batch: usize,
    seq: usize,
}

impl<T: Scalar> SelfAttention<T> {
    pub fn new(d: usize, heads: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            qkv: Linear::new(d, 3 * d, std, rng),
            out: Linear::new(d, d, std, rng),
            heads,
        }
    }

    fn dim(&self) -> usize {
        self.out.input_dim()
    }

    /// Copies head `h` of part `part` (0 = q, 1 = k, 2 = v) of sequence `b` into `dst` (`[T × dh]`).
    fn gather(&self, qkv: &[T], b: usize, seq: usize, part: usize, h: usize, dst: &mut [T]) {
        let d = self.dim();
        let dh = d / self.heads;
        for t in 0..seq {
            let off = (b * seq + t) * 3 * d + part * d + h * dh;
            dst[t * dh..(t + 1) * dh].copy_from_slice(&qkv[off..off + dh]);
        }
    }

    /// `x` is `[B·T × d]`; `key_mask[b·T + t]` hides key `t` of sequence `b`.
    pub fn forward(&self, x: &[T], batch: usize, seq: usize, key_mask: &[bool]) -> (Vec<T>, AttentionCache<T>) {
        let d = self.dim();
        let (nh, dh) = (self.heads, d / self.heads);
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let qkv = self.qkv.forward(x);
        let mut probs = vec![T::zero(); batch * nh * seq * seq];
        let mut ctx = vec![T::zero(); batch * seq * d];
        let mut q = vec![T::zero(); seq * dh];
        let mut k = vec![T::zero(); seq * dh];
        let mut v = vec![T::zero(); seq * dh];
        let mut o = vec![T::zero(); seq * dh];
        for b in 0..batch {
            for h in 0..nh {
                self.gather(&qkv, b, seq, 0, h, &mut q);
                self.gather(&qkv, b, seq, 1, h, &mut k);
                self.gather(&qkv, b, seq, 2, h, &mut v);
                let p = &mut probs[(b * nh + h) * seq * seq..(b * nh + h + 1) * seq * seq];
                gemm(false, true, seq, dh, seq, &q, &k, T::zero(), p);
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = if key_mask[b * seq + j] { T::neg_infinity() } else { *s * scale };
                    }
                    if row.iter().all(|s| *s == T::neg_infinity()) {
                        row.iter_mut().for_each(|s| *s = T::zero());
                    }
                    softmax_in_place(row);
                }
                gemm(false, false, seq, seq, dh, p, &v, T::zero(), &mut o);
                for t in 0..seq {
                    let off = (b * seq + t) * d + h * dh;
                    ctx[off..off + dh].copy_from_slice(&o[t * dh..(t + 1) * dh]);
                }
            }
        }
        let y = self.out.forward(&ctx);
        (
            y,
            AttentionCache {
                x: x.to_vec(),
                qkv,
                probs,
                ctx,
                batch,
                seq,
            },
        )
    }

    pub fn backward(&self, cache: &AttentionCache<T>, dy: &[T], prefix: &str, grads: &mut Gradients<T>) -> Vec<T> {
        let d = self.dim();
        let (nh, dh) = (self.heads, d / self.heads);
        let (batch, seq) = (cache.batch, cache.seq);
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let (dctx, dwo, dbo) = self.out.backward(&cache.ctx, dy);
        grads.insert(prefix, "out.weight", dwo);
        grads.insert(prefix, "out.bias", dbo);

        let mut dqkv = vec![T::zero(); batch * seq * 3 * d];
        let mut q = vec![T::zero(); seq * dh];
        let mut k = vec![T::zero(); seq * dh];
        let mut v = vec![T::zero(); seq * dh];
        let mut d_o = vec![T::zero(); seq * dh];
        let mut dp = vec![T::zero(); seq * seq];
        let mut dq = vec![T::zero(); seq * dh];
        let mut dk = vec![T::zero(); seq * dh];
        let mut dv = vec![T::zero(); seq * dh];
        for b in 0..batch {
            for h in 0..nh {
                self.gather(&cache.qkv, b, seq, 0, h, &mut q);
                self.gather(&cache.qkv, b, seq, 1, h, &mut k);
                self.gather(&cache.qkv, b, seq, 2, h, &mut v);
                for t in 0..seq {
                    let off = (b * seq + t) * d + h * dh;
                    d_o[t * dh..(t + 1) * dh].copy_from_slice(&dctx[off..off + dh]);
                }
                let p = &cache.probs[(b * nh + h) * seq * seq..(b * nh + h + 1) * seq * seq];
                // dV = Pᵀ dO, dP = dO Vᵀ
                gemm(true, false, seq, seq, dh, p, &d_o, T::zero(), &mut dv);
                gemm(false, true, seq, dh, seq, &d_o, &v, T::zero(), &mut dp);
                // softmax backward, folded with the score scale
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (g, &pj) in dr.iter_mut().zip(pr) {
                        *g = pj * (*g - dot) * scale;
                    }
                }
                gemm(false, false, seq, seq, dh, &dp, &k, T::zero(), &mut dq);
                gemm(true, false, seq, seq, dh, &dp, &q, T::zero(), &mut dk);
                for t in 0..seq {
                    let base = (b * seq + t) * 3 * d + h * dh;
                    dqkv[base..base + dh].copy_from_slice(&dq[t * dh..(t + 1) * dh]);
                    dqkv[base + d..base + d + dh].copy_from_slice(&dk[t * dh..(t + 1) * dh]);
                    dqkv[base + 2 * d..base + 2 * d + dh].copy_from_slice(&dv[t * dh..(t + 1) * dh]);
                }
            }
        }
        let (dx, dw, db) = self.qkv.backward(&cache.x, &dqkv);
        grads.insert(prefix, "qkv.weight", dw);
        grads.insert(prefix, "qkv.bias", db);
        dx
    }
}

impl<T: Scalar> Parameters<T> for SelfAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&join(prefix, "qkv.weight"), ParamKind::Dense, &self.qkv.weight);
        f(&join(prefix, "qkv.bias"), ParamKind::Dense, &self.qkv.bias);
        f(&join(prefix, "out.weight"), ParamKind::Dense, &self.out.weight);
        f(&join(prefix, "out.bias"), ParamKind::Dense, &self.out.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "qkv.weight"), ParamKind::Dense, &mut self.qkv.weight);
        f(&join(prefix, "qkv.bias"), ParamKind::Dense, &mut self.qkv.bias);
        f(&join(prefix, "out.weight"), ParamKind::Dense, &mut self.out.weight);
        f(&join(prefix, "out.bias"), ParamKind::Dense, &mut self.out.bias);
    }
}
