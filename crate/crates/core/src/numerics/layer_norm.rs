use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalization over the last axis followed by a learned affine map.
#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    d: usize,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], T::one()),
            bias: Tensor::zeros(&[d]),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    /// `x` is a flat `[rows × d]` buffer.
    pub fn forward(&self, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.dim();
        let rows = if d == 0 { 0 } else { x.len() / d };
        let eps = T::c(self.eps);
        let inv_d = T::c(1.0 / d as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut y = vec![T::zero(); x.len()];
        let (g, b) = (self.gain.data(), self.bias.data());
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let hr = &mut xhat[r * d..(r + 1) * d];
            let yr = &mut y[r * d..(r + 1) * d];
            for j in 0..d {
                hr[j] = (xr[j] - mean) * is;
                yr[j] = hr[j] * g[j] + b[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std, d })
    }

    /// Returns `(dx, dgain, dbias)`.
    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &[T]) -> (Vec<T>, Tensor<T>, Tensor<T>) {
        let d = cache.d;
        let g = self.gain.data();
        let mut dgain = Tensor::zeros(&[d]);
        let mut dbias = Tensor::zeros(&[d]);
        let mut dx = vec![T::zero(); dy.len()];
        let inv_d = T::c(1.0 / d.max(1) as f64);
        let mut dxhat = vec![T::zero(); d];
        for (r, &is) in cache.inv_std.iter().enumerate() {
            let dyr = &dy[r * d..(r + 1) * d];
            let hr = &cache.xhat[r * d..(r + 1) * d];
            {
                let (dg, db) = (dgain.data_mut(), dbias.data_mut());
                for j in 0..d {
                    dg[j] += dyr[j] * hr[j];
                    db[j] += dyr[j];
                    dxhat[j] = dyr[j] * g[j];
                }
            }
            let mean_dxhat = dxhat.iter().copied().sum::<T>() * inv_d;
            let mean_dxhat_xhat = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
            let dxr = &mut dx[r * d..(r + 1) * d];
            for j in 0..d {
                dxr[j] = is * (dxhat[j] - mean_dxhat - hr[j] * mean_dxhat_xhat);
            }
        }
        (dx, dgain, dbias)
    }
}

/// Layer normalization of `x` over its last axis.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = x.cols();
    if d == 0 || x.shape().is_empty() {
        return Err(Error::InvalidConfig("layer_norm over an empty axis".into()));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape("layer_norm", &[d], &[gain.len(), bias.len()]));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidConfig("layer_norm eps must be positive".into()));
    }
    let ln = LayerNorm {
        gain: gain.clone(),
        bias: bias.clone(),
        eps,
    };
    let (y, _) = ln.forward(x.data());
    Tensor::new(x.shape().to_vec(), y)
}
