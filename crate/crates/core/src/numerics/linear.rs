use super::{gemm, Rng, Scalar, Tensor};

/// Affine map `y = x·W + b` with `W` stored `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(input: usize, output: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            weight: Tensor::randn(&[input, output], std, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `x` is a flat `[rows × in]` buffer.
    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let (i, o) = (self.input_dim(), self.output_dim());
        let rows = if i == 0 { 0 } else { x.len() / i };
        let mut y = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            y.extend_from_slice(self.bias.data());
        }
        gemm(false, false, rows, i, o, x, self.weight.data(), T::one(), &mut y);
        y
    }

    /// Returns `(dx, dweight, dbias)` for the input `x` seen in forward.
    pub fn backward(&self, x: &[T], dy: &[T]) -> (Vec<T>, Tensor<T>, Tensor<T>) {
        let (i, o) = (self.input_dim(), self.output_dim());
        let rows = if o == 0 { 0 } else { dy.len() / o };
        let mut dx = vec![T::zero(); rows * i];
        gemm(false, true, rows, o, i, dy, self.weight.data(), T::zero(), &mut dx);
        let mut dw = Tensor::zeros(&[i, o]);
        gemm(true, false, i, rows, o, x, dy, T::zero(), dw.data_mut());
        let mut db = Tensor::zeros(&[o]);
        {
            let d = db.data_mut();
            for r in 0..rows {
                for (acc, &g) in d.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
                    *acc += g;
                }
            }
        }
        (dx, dw, db)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from_seed;

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_from_seed(11);
        let mut lin = Linear::<f64>::new(4, 3, 1.0, &mut rng);
        lin.bias = Tensor::randn(&[3], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let f = |l: &Linear<f64>, xs: &[f64]| -> f64 {
            l.forward(xs).iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (dx, dw, db) = lin.backward(x.data(), w.data());
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.data().to_vec();
            p[i] += h;
            let mut m = x.data().to_vec();
            m[i] -= h;
            let fd = (f(&lin, &p) - f(&lin, &m)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7);
        }
        for i in 0..lin.weight.len() {
            let mut lp = lin.clone();
            lp.weight.data_mut()[i] += h;
            let mut lm = lin.clone();
            lm.weight.data_mut()[i] -= h;
            let fd = (f(&lp, x.data()) - f(&lm, x.data())) / (2.0 * h);
            assert!((fd - dw.data()[i]).abs() < 1e-7);
        }
        for j in 0..3 {
            let want = w.data()[j] + w.data()[3 + j];
            assert!((want - db.data()[j]).abs() < 1e-12);
        }
    }
}
