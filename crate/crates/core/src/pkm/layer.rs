use super::search::{combine_candidates, topk_of_scores, TopK};
use super::{MemoryConfig, SparseRows, ValueInit};
use crate::error::{Error, Result};
use crate::numerics::{check_finite, gemm, Linear, Rng, Scalar, Tensor};
use crate::params::{join, Gradients, ParamKind, Parameters};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Which statistics the query batch norm uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch (training).
    Batch,
    /// Running statistics (evaluation, or training with frozen statistics).
    Running,
}

/// Keys selected by one forward pass.
///
/// Entry `(n, h, i)` lives at `(n * heads + h) * knn + i`; within a head the
/// entries are sorted by score.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryAccess {
    pub positions: usize,
    pub heads: usize,
    pub knn: usize,
    pub slots: usize,
    pub indices: Vec<u32>,
    pub weights: Vec<f32>,
}

impl MemoryAccess {
    pub fn empty(heads: usize, knn: usize, slots: usize) -> Self {
        Self {
            positions: 0,
            heads,
            knn,
            slots,
            indices: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn head(&self, position: usize, head: usize) -> (&[u32], &[f32]) {
        let start = (position * self.heads + head) * self.knn;
        (
            &self.indices[start..start + self.knn],
            &self.weights[start..start + self.knn],
        )
    }

    /// Per-slot weight `w(x)_i` of one position, summed over heads, sorted by slot.
    pub fn aggregated(&self, position: usize) -> Vec<(usize, f64)> {
        let start = position * self.heads * self.knn;
        let end = start + self.heads * self.knn;
        let mut pairs: Vec<(usize, f64)> = self.indices[start..end]
            .iter()
            .zip(&self.weights[start..end])
            .map(|(&i, &w)| (i as usize, w as f64))
            .collect();
        pairs.sort_by_key(|p| p.0);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(pairs.len());
        for (i, w) in pairs {
            match out.last_mut() {
                Some(last) if last.0 == i => last.1 += w,
                _ => out.push((i, w)),
            }
        }
        out
    }

    /// Concatenates accesses of two batches.
    pub fn extend(&mut self, other: &MemoryAccess) {
        debug_assert_eq!((self.heads, self.knn, self.slots), (other.heads, other.knn, other.slots));
        self.positions += other.positions;
        self.indices.extend_from_slice(&other.indices);
        self.weights.extend_from_slice(&other.weights);
    }
}

/// Forward state needed by [`ProductKeyMemory::backward`].
#[derive(Clone, Debug)]
pub struct MemoryCache<T> {
    positions: usize,
    x: Vec<T>,
    /// Normalized query before the affine map, `[N × H × d_k]` (empty without batch norm).
    qhat: Vec<T>,
    /// Query used for search, `[N × H × d_k]`.
    q: Vec<T>,
    /// Per-dimension `1/sqrt(var + eps)` of the statistics used.
    inv_std: Vec<T>,
    mode: NormMode,
    /// Batch mean and unbiased batch variance, for the running-stat update.
    batch_stats: Option<(Vec<T>, Vec<T>)>,
    indices: Vec<usize>,
    weights: Vec<T>,
}

impl<T> MemoryCache<T> {
    pub fn selected_rows(&self) -> &[usize] {
        &self.indices
    }
}

pub struct MemoryForward<T> {
    /// `[N × d_v]`
    pub output: Vec<T>,
    pub access: MemoryAccess,
    pub cache: MemoryCache<T>,
}

#[derive(Clone, Debug)]
pub struct MemoryGrads<T> {
    pub query: (Tensor<T>, Tensor<T>),
    pub bn_gamma: Tensor<T>,
    pub bn_beta: Tensor<T>,
    pub keys1: Tensor<T>,
    pub keys2: Tensor<T>,
    pub values: SparseRows<T>,
}

impl<T: Scalar> MemoryGrads<T> {
    pub fn into_named(self, prefix: &str, grads: &mut Gradients<T>) {
        grads.insert(prefix, "query.weight", self.query.0);
        grads.insert(prefix, "query.bias", self.query.1);
        grads.insert(prefix, "bn.gamma", self.bn_gamma);
        grads.insert(prefix, "bn.beta", self.bn_beta);
        grads.insert(prefix, "keys1", self.keys1);
        grads.insert(prefix, "keys2", self.keys2);
        grads.sparse.insert(join(prefix, "values"), self.values);
    }
}

/// Product-key memory layer.
///
/// Every head owns a query projection (packed as column block `h` of
/// `query`), batch-norm affine parameters and two sub-key codebooks. All heads
/// read the one shared value table. Batch-norm statistics are pooled over
/// positions and heads.
#[derive(Clone, Debug)]
pub struct ProductKeyMemory<T> {
    pub config: MemoryConfig,
    /// `[d_model × H·d_k]`
    pub query: Linear<T>,
    /// `[H × d_k]`
    pub bn_gamma: Tensor<T>,
    pub bn_beta: Tensor<T>,
    /// `[d_k]`
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// `[H × C × d_k/2]`
    pub keys1: Tensor<T>,
    pub keys2: Tensor<T>,
    /// `[C² × d_v]`
    pub values: Tensor<T>,
}

impl<T: Scalar> ProductKeyMemory<T> {
    pub fn new(input_dim: usize, config: MemoryConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (h, c, dk, half) = (config.heads, config.n_keys, config.k_dim, config.half_dim());
        let key_std = (half as f64).powf(-0.5);
        let query = Linear::new(input_dim, h * dk, key_std, rng);
        let keys1 = Tensor::randn(&[h, c, half], key_std, rng);
        let keys2 = Tensor::randn(&[h, c, half], key_std, rng);
        let values = match config.value_init {
            ValueInit::Gaussian => Tensor::randn(&[c * c, config.v_dim], (config.v_dim as f64).powf(-0.5), rng),
            ValueInit::Zeros => Tensor::zeros(&[c * c, config.v_dim]),
        };
        Ok(Self {
            query,
            bn_gamma: Tensor::full(&[h, dk], T::one()),
            bn_beta: Tensor::zeros(&[h, dk]),
            running_mean: Tensor::zeros(&[dk]),
            running_var: Tensor::full(&[dk], T::one()),
            keys1,
            keys2,
            values,
            config,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.query.input_dim()
    }

    fn codebook(keys: &Tensor<T>, head: usize, c: usize, half: usize) -> &[T] {
        &keys.data()[head * c * half..(head + 1) * c * half]
    }

    pub fn forward(&self, x: &[T], mode: NormMode) -> Result<MemoryForward<T>> {
        let cfg = &self.config;
        let (heads, c, dk, half, knn, dv) = (cfg.heads, cfg.n_keys, cfg.k_dim, cfg.half_dim(), cfg.knn, cfg.v_dim);
        let d_in = self.input_dim();
        if x.len() % d_in != 0 {
            return Err(Error::shape("memory_forward", &[d_in], &[x.len()]));
        }
        let n = x.len() / d_in;
        let width = heads * dk;

        // query network
        let z = self.query.forward(x);
        let samples = n * heads;
        let eps = T::c(BATCH_NORM_EPS);
        let (q, qhat, inv_std, batch_stats) = if !cfg.batch_norm {
            (z, Vec::new(), Vec::new(), None)
        } else {
            let (mean, var, batch_stats) = match mode {
                NormMode::Batch if samples > 0 => {
                    let inv = T::c(1.0 / samples as f64);
                    let mut mean = vec![T::zero(); dk];
                    for s in 0..samples {
                        for (m, &v) in mean.iter_mut().zip(&z[s * dk..(s + 1) * dk]) {
                            *m += v;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m *= inv);
                    let mut var = vec![T::zero(); dk];
                    for s in 0..samples {
                        for j in 0..dk {
                            let d = z[s * dk + j] - mean[j];
                            var[j] += d * d;
                        }
                    }
                    var.iter_mut().for_each(|v| *v *= inv);
                    let unbias = if samples > 1 {
                        T::c(samples as f64 / (samples - 1) as f64)
                    } else {
                        T::one()
                    };
                    let unbiased: Vec<T> = var.iter().map(|&v| v * unbias).collect();
                    (mean.clone(), var, Some((mean, unbiased)))
                }
                _ => (self.running_mean.data().to_vec(), self.running_var.data().to_vec(), None),
            };
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut qhat = vec![T::zero(); n * width];
            let mut q = vec![T::zero(); n * width];
            let (g, b) = (self.bn_gamma.data(), self.bn_beta.data());
            for s in 0..samples {
                let h = s % heads;
                for j in 0..dk {
                    let xh = (z[s * dk + j] - mean[j]) * inv_std[j];
                    qhat[s * dk + j] = xh;
                    q[s * dk + j] = g[h * dk + j] * xh + b[h * dk + j];
                }
            }
            (q, qhat, inv_std, batch_stats)
        };

        // sub-key scores for every position and head: [H][N × C] per half
        let mut scores1 = vec![T::zero(); heads * n * c];
        let mut scores2 = vec![T::zero(); heads * n * c];
        let mut sub = vec![T::zero(); n * half];
        for h in 0..heads {
            for (part, keys, scores) in [(0, &self.keys1, &mut scores1), (1, &self.keys2, &mut scores2)] {
                for p in 0..n {
                    let off = p * width + h * dk + part * half;
                    sub[p * half..(p + 1) * half].copy_from_slice(&q[off..off + half]);
                }
                gemm(
                    false,
                    true,
                    n,
                    half,
                    c,
                    &sub,
                    Self::codebook(keys, h, c, half),
                    T::zero(),
                    &mut scores[h * n * c..(h + 1) * n * c],
                );
            }
        }

        let mut indices = Vec::with_capacity(n * heads * knn);
        let mut weights = Vec::with_capacity(n * heads * knn);
        let mut output = vec![T::zero(); n * dv];
        let mut first = TopK::new(knn);
        let mut second = TopK::new(knn);
        let mut best = TopK::new(knn);
        let vals = self.values.data();
        for p in 0..n {
            let out = &mut output[p * dv..(p + 1) * dv];
            for h in 0..heads {
                let row = (h * n + p) * c;
                topk_of_scores(&scores1[row..row + c], &mut first);
                topk_of_scores(&scores2[row..row + c], &mut second);
                combine_candidates(&first, &second, c, &mut best);
                let max = best.val[0];
                let mut sum = T::zero();
                let w0 = weights.len();
                for &s in &best.val {
                    let e = (s - max).exp();
                    weights.push(e);
                    sum += e;
                }
                for (w, &slot) in weights[w0..].iter_mut().zip(&best.idx) {
                    *w /= sum;
                    let v = &vals[slot * dv..(slot + 1) * dv];
                    for (o, &vj) in out.iter_mut().zip(v) {
                        *o += *w * vj;
                    }
                }
                indices.extend_from_slice(&best.idx);
            }
        }
        check_finite(&output, "memory output")?;

        let access = MemoryAccess {
            positions: n,
            heads,
            knn,
            slots: c * c,
            indices: indices.iter().map(|&i| i as u32).collect(),
            weights: weights.iter().map(|w| w.to_f32().unwrap_or(f32::NAN)).collect(),
        };
        let cache = MemoryCache {
            positions: n,
            x: x.to_vec(),
            qhat,
            q,
            inv_std,
            mode,
            batch_stats,
            indices,
            weights,
        };
        Ok(MemoryForward { output, access, cache })
    }

    /// Gradients for an upstream gradient `dy` (`[N × d_v]`).
    ///
    /// The value gradient only contains rows selected in the forward pass.
    pub fn backward(&self, cache: &MemoryCache<T>, dy: &[T]) -> Result<(Vec<T>, MemoryGrads<T>)> {
        let cfg = &self.config;
        let (heads, c, dk, half, knn, dv) = (cfg.heads, cfg.n_keys, cfg.k_dim, cfg.half_dim(), cfg.knn, cfg.v_dim);
        let n = cache.positions;
        if dy.len() != n * dv {
            return Err(Error::shape("memory_backward", &[n * dv], &[dy.len()]));
        }
        let width = heads * dk;
        let vals = self.values.data();

        // values: gather touched rows in first-touch order, then sort
        let mut slot_pos = vec![usize::MAX; c * c];
        let mut rows: Vec<usize> = Vec::new();
        let mut vgrad: Vec<T> = Vec::new();
        // score gradients per head and half: [H][N × C]
        let mut dscores1 = vec![T::zero(); heads * n * c];
        let mut dscores2 = vec![T::zero(); heads * n * c];
        let mut dw = vec![T::zero(); knn];
        for p in 0..n {
            let g = &dy[p * dv..(p + 1) * dv];
            for h in 0..heads {
                let base = (p * heads + h) * knn;
                let idx = &cache.indices[base..base + knn];
                let w = &cache.weights[base..base + knn];
                let mut wdw = T::zero();
                for i in 0..knn {
                    let slot = idx[i];
                    let pos = if slot_pos[slot] == usize::MAX {
                        slot_pos[slot] = rows.len();
                        rows.push(slot);
                        vgrad.extend(std::iter::repeat_n(T::zero(), dv));
                        rows.len() - 1
                    } else {
                        slot_pos[slot]
                    };
                    let vg = &mut vgrad[pos * dv..(pos + 1) * dv];
                    for (a, &gj) in vg.iter_mut().zip(g) {
                        *a += w[i] * gj;
                    }
                    dw[i] = crate::numerics::dot(g, &vals[slot * dv..(slot + 1) * dv]);
                    wdw += w[i] * dw[i];
                }
                let row = (h * n + p) * c;
                for i in 0..knn {
                    let ds = w[i] * (dw[i] - wdw);
                    dscores1[row + idx[i] / c] += ds;
                    dscores2[row + idx[i] % c] += ds;
                }
            }
        }
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by_key(|&i| rows[i]);
        let mut sorted_grad = Vec::with_capacity(vgrad.len());
        for &i in &order {
            sorted_grad.extend_from_slice(&vgrad[i * dv..(i + 1) * dv]);
        }
        let values = SparseRows {
            rows: order.iter().map(|&i| rows[i]).collect(),
            grads: sorted_grad,
            dim: dv,
        };

        // keys and query halves
        let mut dq = vec![T::zero(); n * width];
        let mut dkeys1 = Tensor::zeros(&[heads, c, half]);
        let mut dkeys2 = Tensor::zeros(&[heads, c, half]);
        let mut sub = vec![T::zero(); n * half];
        let mut dsub = vec![T::zero(); n * half];
        for h in 0..heads {
            for (part, keys, dscores, dkeys) in [
                (0, &self.keys1, &dscores1, &mut dkeys1),
                (1, &self.keys2, &dscores2, &mut dkeys2),
            ] {
                let ds = &dscores[h * n * c..(h + 1) * n * c];
                for p in 0..n {
                    let off = p * width + h * dk + part * half;
                    sub[p * half..(p + 1) * half].copy_from_slice(&cache.q[off..off + half]);
                }
                gemm(false, false, n, c, half, ds, Self::codebook(keys, h, c, half), T::zero(), &mut dsub);
                gemm(
                    true,
                    false,
                    c,
                    n,
                    half,
                    ds,
                    &sub,
                    T::zero(),
                    &mut dkeys.data_mut()[h * c * half..(h + 1) * c * half],
                );
                for p in 0..n {
                    let off = p * width + h * dk + part * half;
                    dq[off..off + half].copy_from_slice(&dsub[p * half..(p + 1) * half]);
                }
            }
        }

        // batch norm
        let mut dgamma = Tensor::zeros(&[heads, dk]);
        let mut dbeta = Tensor::zeros(&[heads, dk]);
        let dz = if !cfg.batch_norm {
            dq
        } else {
            let samples = n * heads;
            let g = self.bn_gamma.data();
            let mut dxhat = vec![T::zero(); n * width];
            {
                let (dg, db) = (dgamma.data_mut(), dbeta.data_mut());
                for s in 0..samples {
                    let h = s % heads;
                    for j in 0..dk {
                        let i = s * dk + j;
                        dg[h * dk + j] += dq[i] * cache.qhat[i];
                        db[h * dk + j] += dq[i];
                        dxhat[i] = dq[i] * g[h * dk + j];
                    }
                }
            }
            match cache.mode {
                NormMode::Batch if samples > 0 => {
                    let inv = T::c(1.0 / samples as f64);
                    let mut mean_a = vec![T::zero(); dk];
                    let mut mean_b = vec![T::zero(); dk];
                    for s in 0..samples {
                        for j in 0..dk {
                            let i = s * dk + j;
                            mean_a[j] += dxhat[i];
                            mean_b[j] += dxhat[i] * cache.qhat[i];
                        }
                    }
                    mean_a.iter_mut().for_each(|v| *v *= inv);
                    mean_b.iter_mut().for_each(|v| *v *= inv);
                    for s in 0..samples {
                        for j in 0..dk {
                            let i = s * dk + j;
                            dxhat[i] = cache.inv_std[j] * (dxhat[i] - mean_a[j] - cache.qhat[i] * mean_b[j]);
                        }
                    }
                }
                _ => {
                    for s in 0..samples {
                        for j in 0..dk {
                            dxhat[s * dk + j] *= cache.inv_std[j];
                        }
                    }
                }
            }
            dxhat
        };

        let (dx, dwq, dbq) = self.query.backward(&cache.x, &dz);
        Ok((
            dx,
            MemoryGrads {
                query: (dwq, dbq),
                bn_gamma: dgamma,
                bn_beta: dbeta,
                keys1: dkeys1,
                keys2: dkeys2,
                values,
            },
        ))
    }

    /// Folds the batch statistics of a training forward pass into the running statistics.
    pub fn update_running_stats(&mut self, cache: &MemoryCache<T>) {
        if let Some((mean, var)) = &cache.batch_stats {
            let m = T::c(BATCH_NORM_MOMENTUM);
            let keep = T::one() - m;
            for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.running_var.data_mut().iter_mut().zip(var) {
                *r = keep * *r + m * b;
            }
        }
    }
}

impl<T: Scalar> Parameters<T> for ProductKeyMemory<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&join(prefix, "query.weight"), ParamKind::Dense, &self.query.weight);
        f(&join(prefix, "query.bias"), ParamKind::Dense, &self.query.bias);
        f(&join(prefix, "bn.gamma"), ParamKind::Dense, &self.bn_gamma);
        f(&join(prefix, "bn.beta"), ParamKind::Dense, &self.bn_beta);
        f(&join(prefix, "bn.running_mean"), ParamKind::Buffer, &self.running_mean);
        f(&join(prefix, "bn.running_var"), ParamKind::Buffer, &self.running_var);
        f(&join(prefix, "keys1"), ParamKind::Dense, &self.keys1);
        f(&join(prefix, "keys2"), ParamKind::Dense, &self.keys2);
        f(&join(prefix, "values"), ParamKind::MemoryValues, &self.values);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "query.weight"), ParamKind::Dense, &mut self.query.weight);
        f(&join(prefix, "query.bias"), ParamKind::Dense, &mut self.query.bias);
        f(&join(prefix, "bn.gamma"), ParamKind::Dense, &mut self.bn_gamma);
        f(&join(prefix, "bn.beta"), ParamKind::Dense, &mut self.bn_beta);
        f(&join(prefix, "bn.running_mean"), ParamKind::Buffer, &mut self.running_mean);
        f(&join(prefix, "bn.running_var"), ParamKind::Buffer, &mut self.running_var);
        f(&join(prefix, "keys1"), ParamKind::Dense, &mut self.keys1);
        f(&join(prefix, "keys2"), ParamKind::Dense, &mut self.keys2);
        f(&join(prefix, "values"), ParamKind::MemoryValues, &mut self.values);
    }
}
