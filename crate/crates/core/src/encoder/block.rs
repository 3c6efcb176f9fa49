use serde::{Deserialize, Serialize};

use super::dropout::Dropout;
use crate::error::{Error, Result};
use crate::numerics::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear, Rng, Scalar, Tensor};
use crate::params::{join, Gradients, ParamKind, Parameters};
use crate::pkm::{MemoryAccess, MemoryCache, MemoryConfig, NormMode, ProductKeyMemory};

/// Coefficients `(α, β)` of `x' = LN(x + α·FFN(x) + β·PKM(x))`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    /// (1, 0)
    #[default]
    Ffn,
    /// (0, 1)
    Pkm,
    /// (1, 1)
    Resm,
}

impl BlockVariant {
    pub fn from_coefficients(alpha: u8, beta: u8) -> Result<Self> {
        match (alpha, beta) {
            (1, 0) => Ok(Self::Ffn),
            (0, 1) => Ok(Self::Pkm),
            (1, 1) => Ok(Self::Resm),
            _ => Err(Error::InvalidConfig(format!("block coefficients ({alpha}, {beta}) not in {{(1,0), (0,1), (1,1)}}"))),
        }
    }

    pub fn alpha(self) -> u8 {
        matches!(self, Self::Ffn | Self::Resm) as u8
    }

    pub fn beta(self) -> u8 {
        matches!(self, Self::Pkm | Self::Resm) as u8
    }

    pub fn has_memory(self) -> bool {
        self.beta() == 1
    }
}

/// Position-wise `GELU(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache<T> {
    x: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(d: usize, inner: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(d, inner, std, rng),
            fc2: Linear::new(inner, d, std, rng),
        }
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, FeedForwardCache<T>) {
        let pre = self.fc1.forward(x);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let y = self.fc2.forward(&act);
        (
            y,
            FeedForwardCache {
                x: x.to_vec(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &FeedForwardCache<T>, dy: &[T], prefix: &str, grads: &mut Gradients<T>) -> Vec<T> {
        let (mut dact, dw2, db2) = self.fc2.backward(&cache.act, dy);
        for (g, &p) in dact.iter_mut().zip(&cache.pre) {
            *g *= gelu_grad(p);
        }
        let (dx, dw1, db1) = self.fc1.backward(&cache.x, &dact);
        grads.insert(prefix, "fc1.weight", dw1);
        grads.insert(prefix, "fc1.bias", db1);
        grads.insert(prefix, "fc2.weight", dw2);
        grads.insert(prefix, "fc2.bias", db2);
        dx
    }
}

impl<T: Scalar> Parameters<T> for FeedForward<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&join(prefix, "fc1.weight"), ParamKind::Dense, &self.fc1.weight);
        f(&join(prefix, "fc1.bias"), ParamKind::Dense, &self.fc1.bias);
        f(&join(prefix, "fc2.weight"), ParamKind::Dense, &self.fc2.weight);
        f(&join(prefix, "fc2.bias"), ParamKind::Dense, &self.fc2.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "fc1.weight"), ParamKind::Dense, &mut self.fc1.weight);
        f(&join(prefix, "fc1.bias"), ParamKind::Dense, &mut self.fc1.bias);
        f(&join(prefix, "fc2.weight"), ParamKind::Dense, &mut self.fc2.weight);
        f(&join(prefix, "fc2.bias"), ParamKind::Dense, &mut self.fc2.bias);
    }
}

/// The second sub-layer of an encoder layer: FFN, PKM or both, then add & norm.
#[derive(Clone, Debug)]
pub struct MemoryBlock<T> {
    pub variant: BlockVariant,
    pub ffn: Option<FeedForward<T>>,
    pub memory: Option<ProductKeyMemory<T>>,
    pub norm: LayerNorm<T>,
}

#[derive(Clone, Debug)]
pub struct MemoryBlockCache<T> {
    ffn: Option<FeedForwardCache<T>>,
    pub(crate) memory: Option<MemoryCache<T>>,
    dropout: Dropout<T>,
    norm: LayerNormCache<T>,
}

pub struct BlockOutput<T> {
    pub output: Vec<T>,
    pub access: Option<MemoryAccess>,
    pub cache: MemoryBlockCache<T>,
}

impl<T: Scalar> MemoryBlock<T> {
    pub fn new(d: usize, ffn_dim: usize, variant: BlockVariant, memory: &MemoryConfig, std: f64, rng: &mut Rng) -> Result<Self> {
        let ffn = (variant.alpha() == 1).then(|| FeedForward::new(d, ffn_dim, std, rng));
        let memory = if variant.has_memory() {
            if memory.v_dim != d {
                return Err(Error::InvalidConfig(format!(
                    "memory v_dim {} must equal model width {d}",
                    memory.v_dim
                )));
            }
            Some(ProductKeyMemory::new(d, memory.clone(), rng)?)
        } else {
            None
        };
        Ok(Self {
            variant,
            ffn,
            memory,
            norm: LayerNorm::new(d),
        })
    }

    pub fn forward(&self, x: &[T], norm_mode: NormMode, dropout_p: f64, rng: Option<&mut Rng>) -> Result<BlockOutput<T>> {
        let mut branch = vec![T::zero(); x.len()];
        let ffn = self.ffn.as_ref().map(|f| {
            let (y, c) = f.forward(x);
            for (b, v) in branch.iter_mut().zip(y) {
                *b += v;
            }
            c
        });
        let (memory, access) = match &self.memory {
            Some(m) => {
                let out = m.forward(x, norm_mode)?;
                for (b, &v) in branch.iter_mut().zip(&out.output) {
                    *b += v;
                }
                (Some(out.cache), Some(out.access))
            }
            None => (None, None),
        };
        let dropout = Dropout::sample(branch.len(), dropout_p, rng);
        dropout.apply(&mut branch);
        for (b, &xv) in branch.iter_mut().zip(x) {
            *b = xv + *b;
        }
        let (output, norm) = self.norm.forward(&branch);
        Ok(BlockOutput {
            output,
            access,
            cache: MemoryBlockCache {
                ffn,
                memory,
                dropout,
                norm,
            },
        })
    }

    pub fn backward(&self, cache: &MemoryBlockCache<T>, dy: &[T], prefix: &str, grads: &mut Gradients<T>) -> Result<Vec<T>> {
        let (ds, dgain, dbias) = self.norm.backward(&cache.norm, dy);
        grads.insert(prefix, "norm.gain", dgain);
        grads.insert(prefix, "norm.bias", dbias);
        let mut dbranch = ds.clone();
        cache.dropout.apply(&mut dbranch);
        let mut dx = ds;
        if let (Some(f), Some(c)) = (&self.ffn, &cache.ffn) {
            let g = f.backward(c, &dbranch, &join(prefix, "ffn"), grads);
            for (a, b) in dx.iter_mut().zip(g) {
                *a += b;
            }
        }
        if let Some(m) = &self.memory {
            let c = cache.memory.as_ref().ok_or(Error::MissingCache)?;
            let (g, mg) = m.backward(c, &dbranch)?;
            mg.into_named(&join(prefix, "memory"), grads);
            for (a, b) in dx.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(dx)
    }
}

impl<T: Scalar> Parameters<T> for MemoryBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        if let Some(ffn) = &self.ffn {
            ffn.visit(&join(prefix, "ffn"), f);
        }
        if let Some(m) = &self.memory {
            m.visit(&join(prefix, "memory"), f);
        }
        f(&join(prefix, "norm.gain"), ParamKind::Dense, &self.norm.gain);
        f(&join(prefix, "norm.bias"), ParamKind::Dense, &self.norm.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        if let Some(ffn) = &mut self.ffn {
            ffn.visit_mut(&join(prefix, "ffn"), f);
        }
        if let Some(m) = &mut self.memory {
            m.visit_mut(&join(prefix, "memory"), f);
        }
        f(&join(prefix, "norm.gain"), ParamKind::Dense, &mut self.norm.gain);
        f(&join(prefix, "norm.bias"), ParamKind::Dense, &mut self.norm.bias);
    }
}
