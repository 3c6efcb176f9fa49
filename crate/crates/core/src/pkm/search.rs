//! Exact top-k search over product keys.
//!
//! A product key `(i, j)` has flat index `i·C + j` and score
//! `q1·K1[i] + q2·K2[j]`. The best `k` product keys are always formed from the
//! best `k` sub-keys of each half (score addition is monotone, also under
//! floating-point rounding), so scanning `2C` sub-keys and then `k²` candidate
//! pairs gives the same result as scoring all `C²` keys.
//!
//! Ordering everywhere is score descending, ties to the lower index.

use super::super::numerics::{dot, Scalar, Tensor};
use crate::error::{Error, Result};

#[inline]
fn better<T: Scalar>(s: T, i: usize, than_s: T, than_i: usize) -> bool {
    s > than_s || (s == than_s && i < than_i)
}

/// Bounded buffer keeping the best `k` `(index, score)` pairs, sorted.
#[derive(Clone, Debug)]
pub(crate) struct TopK<T> {
    k: usize,
    pub(crate) idx: Vec<usize>,
    pub(crate) val: Vec<T>,
}

impl<T: Scalar> TopK<T> {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            idx: Vec::with_capacity(k + 1),
            val: Vec::with_capacity(k + 1),
        }
    }

    pub(crate) fn clear(&mut self) {
        self.idx.clear();
        self.val.clear();
    }

    #[inline]
    pub(crate) fn push(&mut self, i: usize, s: T) {
        let n = self.idx.len();
        if n == self.k && !better(s, i, self.val[n - 1], self.idx[n - 1]) {
            return;
        }
        let mut pos = n;
        while pos > 0 && better(s, i, self.val[pos - 1], self.idx[pos - 1]) {
            pos -= 1;
        }
        self.idx.insert(pos, i);
        self.val.insert(pos, s);
        if self.idx.len() > self.k {
            self.idx.pop();
            self.val.pop();
        }
    }
}

/// Best `k` entries of a score vector.
pub(crate) fn topk_of_scores<T: Scalar>(scores: &[T], out: &mut TopK<T>) {
    out.clear();
    for (i, &s) in scores.iter().enumerate() {
        out.push(i, s);
    }
}

/// Best `k` product keys from the per-half candidates.
pub(crate) fn combine_candidates<T: Scalar>(first: &TopK<T>, second: &TopK<T>, n_keys: usize, out: &mut TopK<T>) {
    out.clear();
    for (&i, &si) in first.idx.iter().zip(&first.val) {
        for (&j, &sj) in second.idx.iter().zip(&second.val) {
            out.push(i * n_keys + j, si + sj);
        }
    }
}

/// Splits a query into its two halves.
pub fn split_query<T>(q: &[T]) -> Result<(&[T], &[T])> {
    if q.len() % 2 != 0 {
        return Err(Error::OddQueryDim(q.len()));
    }
    Ok(q.split_at(q.len() / 2))
}

fn check_codebook<T: Scalar>(sub_q: &[T], codebook: &Tensor<T>, k: usize) -> Result<usize> {
    if codebook.shape().len() != 2 || codebook.shape()[1] != sub_q.len() {
        return Err(Error::shape("subkey_topk", &[sub_q.len()], codebook.shape()));
    }
    let c = codebook.shape()[0];
    if k > c {
        return Err(Error::KTooLarge { k, c });
    }
    Ok(c)
}

/// The `k` sub-keys with the largest dot product against `sub_q`.
pub fn subkey_topk<T: Scalar>(sub_q: &[T], codebook: &Tensor<T>, k: usize) -> Result<(Vec<usize>, Vec<T>)> {
    let c = check_codebook(sub_q, codebook, k)?;
    let mut top = TopK::new(k);
    for i in 0..c {
        top.push(i, dot(sub_q, codebook.row(i)));
    }
    Ok((top.idx, top.val))
}

/// Exact top-`k` product keys for the query halves `q1`, `q2`.
///
/// Returns flat indices `i·C + j` and their scores. `k` may exceed `C` (up to
/// `C²`); each half then keeps all of its `C` sub-keys.
pub fn product_topk<T: Scalar>(
    q1: &[T],
    q2: &[T],
    keys1: &Tensor<T>,
    keys2: &Tensor<T>,
    k: usize,
) -> Result<(Vec<usize>, Vec<T>)> {
    let c = check_codebook(q1, keys1, 0)?;
    let c2 = check_codebook(q2, keys2, 0)?;
    if c != c2 {
        return Err(Error::shape("product_topk", keys1.shape(), keys2.shape()));
    }
    if k > c * c {
        return Err(Error::KTooLarge { k, c: c * c });
    }
    let sub_k = k.min(c);
    let mut first = TopK::new(sub_k);
    let mut second = TopK::new(sub_k);
    for i in 0..c {
        first.push(i, dot(q1, keys1.row(i)));
        second.push(i, dot(q2, keys2.row(i)));
    }
    let mut out = TopK::new(k);
    combine_candidates(&first, &second, c, &mut out);
    Ok((out.idx, out.val))
}

/// Brute-force top-`k` scoring every one of the `C²` full keys `[K1[i]; K2[j]]`
/// against the whole query. Used as the exhaustive baseline when benchmarking.
pub fn exhaustive_topk<T: Scalar>(
    q: &[T],
    keys1: &Tensor<T>,
    keys2: &Tensor<T>,
    k: usize,
) -> Result<(Vec<usize>, Vec<T>)> {
    let (q1, q2) = split_query(q)?;
    let c = check_codebook(q1, keys1, 0)?;
    check_codebook(q2, keys2, 0)?;
    if k > c * c {
        return Err(Error::KTooLarge { k, c: c * c });
    }
    let mut full = vec![T::zero(); q.len()];
    let mut top = TopK::new(k);
    for i in 0..c {
        full[..q1.len()].copy_from_slice(keys1.row(i));
        for j in 0..c {
            full[q1.len()..].copy_from_slice(keys2.row(j));
            top.push(i * c + j, dot(q, &full));
        }
    }
    Ok((top.idx, top.val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from_seed;

    #[test]
    fn split_halves() {
        let q = [1.0f32, 2.0, 3.0, 4.0];
        let (a, b) = split_query(&q).unwrap();
        assert_eq!(a, &[1.0, 2.0]);
        assert_eq!(b, &[3.0, 4.0]);
        let z = [0.0f32; 6];
        let (a, b) = split_query(&z).unwrap();
        assert!(a.iter().chain(b).all(|&v| v == 0.0));
        assert!(matches!(split_query(&[1.0f32; 3]), Err(Error::OddQueryDim(3))));
    }

    #[test]
    fn basis_selector() {
        let eye = Tensor::<f32>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (i, s) = subkey_topk(&[0.0, 5.0], &eye, 1).unwrap();
        assert_eq!(i, vec![1]);
        assert_eq!(s, vec![5.0]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let cb = Tensor::<f32>::full(&[4, 2], 1.0);
        let (i, _) = subkey_topk(&[1.0, 1.0], &cb, 2).unwrap();
        assert_eq!(i, vec![0, 1]);
    }

    #[test]
    fn k_larger_than_codebook_rejected() {
        let cb = Tensor::<f32>::zeros(&[3, 2]);
        assert!(matches!(subkey_topk(&[0.0, 0.0], &cb, 4), Err(Error::KTooLarge { k: 4, c: 3 })));
    }

    #[test]
    fn two_by_two_product_keys() {
        let k1 = Tensor::<f32>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let k2 = k1.clone();
        let (i, s) = product_topk(&[2.0, 0.0], &[0.0, 3.0], &k1, &k2, 1).unwrap();
        assert_eq!((i, s), (vec![1], vec![5.0]));
    }

    #[test]
    fn all_product_keys_when_k_is_c_squared() {
        // scores by flat index are (2, 5, 0, 3)
        let k1 = Tensor::<f32>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (i, s) = product_topk(&[2.0, 0.0], &[0.0, 3.0], &k1, &k1, 4).unwrap();
        assert_eq!(i, vec![1, 3, 0, 2]);
        assert_eq!(s, vec![5.0, 3.0, 2.0, 0.0]);
        let (i, s) = product_topk(&[2.0, 0.0], &[0.0, 3.0], &k1, &k1, 2).unwrap();
        assert_eq!((i, s), (vec![1, 3], vec![5.0, 3.0]));
        let (i, s) = exhaustive_topk(&[2.0, 0.0, 0.0, 3.0], &k1, &k1, 4).unwrap();
        assert_eq!(i, vec![1, 3, 0, 2]);
        assert_eq!(s, vec![5.0, 3.0, 2.0, 0.0]);
        assert!(product_topk(&[2.0, 0.0], &[0.0, 3.0], &k1, &k1, 5).is_err());
    }

    #[test]
    fn subkey_matches_full_sort() {
        let mut rng = rng_from_seed(21);
        let cb = Tensor::<f64>::randn(&[16, 3], 1.0, &mut rng);
        let q = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
        let (idx, val) = subkey_topk(q.data(), &cb, 4).unwrap();
        let mut all: Vec<(usize, f64)> = (0..16).map(|i| (i, dot(q.data(), cb.row(i)))).collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(idx, all[..4].iter().map(|p| p.0).collect::<Vec<_>>());
        assert_eq!(val, all[..4].iter().map(|p| p.1).collect::<Vec<_>>());
    }
}
