//! Dense row-major `f32` arrays and the few kernels the forward pass needs.
//!
//! All reductions run in a fixed index order and accumulate in `f64`, so
//! results are bit-reproducible across runs and thread counts.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!("shape {shape:?} needs {expected} elements, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| v * factor).collect() }
    }

    fn expect_2d(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("{what}: expected 2-D, got shape {s:?}"))),
        }
    }
}

/// `c[i][j] = Σ_p a[i][p]·b[p][j]`, summed in ascending `p`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_2d("matmul lhs")?;
    let (k2, n) = b.expect_2d("matmul rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!("matmul inner dimensions disagree: {m}x{k} by {k2}x{n}")));
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let a_ip = a_ip as f64;
            let b_row = &b.data[p * n..(p + 1) * n];
            for (slot, &b_pj) in acc.iter_mut().zip(b_row) {
                *slot += a_ip * b_pj as f64;
            }
        }
        for (dst, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *dst = v as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax of a square score matrix. With `causal`, entries above the
/// diagonal are excluded and come out as exactly zero.
pub fn masked_softmax_rows(scores: &Tensor, causal: bool) -> Result<Tensor> {
    let (t, t2) = scores.expect_2d("softmax")?;
    if t != t2 {
        return Err(Error::Dimension(format!("softmax needs a square matrix, got {t}x{t2}")));
    }
    let mut out = Tensor::zeros(&[t, t]);
    for row in 0..t {
        let width = if causal { row + 1 } else { t };
        softmax_prefix(scores.row(row), width, out.row_mut(row));
    }
    Ok(out)
}

/// Softmax over `src[..width]` written into `dst[..width]`; `dst[width..]` is zeroed.
pub(crate) fn softmax_prefix(src: &[f32], width: usize, dst: &mut [f32]) {
    let live = &src[..width];
    let max = live.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    let mut exps = Vec::with_capacity(width);
    for &s in live {
        let e = if s == f32::NEG_INFINITY { 0.0 } else { ((s - max) as f64).exp() };
        sum += e;
        exps.push(e);
    }
    for (d, e) in dst[..width].iter_mut().zip(exps) {
        *d = (e / sum) as f32;
    }
    dst[width..].iter_mut().for_each(|v| *v = 0.0);
}

/// `y[i] = x[i] / sqrt(mean(x²) + eps) · gamma[i]`.
pub fn rmsnorm(x: &[f32], gamma: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != gamma.len() {
        return Err(Error::Dimension(format!("rmsnorm: input has {} elements, gamma has {}", x.len(), gamma.len())));
    }
    let mut out = vec![0.0; x.len()];
    rmsnorm_into(x, gamma, eps, &mut out);
    Ok(out)
}

pub(crate) fn rmsnorm_into(x: &[f32], gamma: &[f32], eps: f32, out: &mut [f32]) {
    let mean_sq = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len().max(1) as f64;
    let inv = 1.0 / (mean_sq + eps as f64).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gamma) {
        // 0 / sqrt(0 + 0) would be NaN; a zero input normalizes to zero.
        *o = if v == 0.0 { 0.0 } else { (v as f64 * inv * g as f64) as f32 };
    }
}

/// Rotates adjacent pairs `(v[2i], v[2i+1])` by `position · theta_base^(-2i/d)`.
pub fn rope_rotate(vec: &[f32], position: usize, theta_base: f32) -> Result<Vec<f32>> {
    let mut out = vec.to_vec();
    rope_in_place(&mut out, position, theta_base)?;
    Ok(out)
}

pub(crate) fn rope_in_place(vec: &mut [f32], position: usize, theta_base: f32) -> Result<()> {
    let d = vec.len();
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("rotary embedding needs an even head width, got {d}")));
    }
    for (i, pair) in vec.chunks_exact_mut(2).enumerate() {
        let angle = position as f64 * rope_frequency(i, d, theta_base);
        let (sin, cos) = angle.sin_cos();
        let (x0, x1) = (pair[0] as f64, pair[1] as f64);
        pair[0] = (x0 * cos - x1 * sin) as f32;
        pair[1] = (x0 * sin + x1 * cos) as f32;
    }
    Ok(())
}

/// Angular frequency of rotary pair `pair` in a head of width `d_head`.
pub fn rope_frequency(pair: usize, d_head: usize, theta_base: f32) -> f64 {
    (theta_base as f64).powf(-2.0 * pair as f64 / d_head as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity_and_zeros() {
        let m = t2(&[&[1.0, -2.0, 3.5], &[0.25, 7.0, -1.0], &[4.0, 0.0, 2.0]]);
        assert_eq!(matmul(&Tensor::identity(3), &m).unwrap(), m);
        let z = matmul(&m, &Tensor::zeros(&[3, 2])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.shape(), &[3, 2]);
    }

    #[test]
    fn matmul_hand_example() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t2(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = masked_softmax_rows(&Tensor::zeros(&[3, 3]), false).unwrap();
        for &v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        // Causal row 0 only sees itself.
        let c = masked_softmax_rows(&t2(&[&[5.0, 9.0, 1.0], &[0.0; 3], &[0.0; 3]]), true).unwrap();
        assert_eq!(c.row(0), &[1.0, 0.0, 0.0]);
        let l = [1f32.ln(), 2f32.ln(), 3f32.ln()];
        let s = masked_softmax_rows(&t2(&[&l, &l, &l]), false).unwrap();
        for (v, want) in s.row(2).iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - want).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_explicit_neg_infinity() {
        let inf = f32::NEG_INFINITY;
        let s = masked_softmax_rows(&t2(&[&[0.3, inf, inf], &[0.0; 3], &[0.0; 3]]), false).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn rmsnorm_examples() {
        let ones = vec![1.0; 4];
        let y = rmsnorm(&ones, &ones, 1e-12).unwrap();
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-6));
        assert_eq!(rmsnorm(&[0.0; 4], &ones, 1e-6).unwrap(), vec![0.0; 4]);
        let y = rmsnorm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert!((y[0] as f64 - 3.0 / r).abs() < 1e-6);
        assert!((y[1] as f64 - 4.0 / r).abs() < 1e-6);
        assert!(rmsnorm(&[1.0], &[1.0, 1.0], 1e-6).is_err());
    }

    #[test]
    fn rope_examples() {
        let v = [0.3, -1.2, 4.0, 0.5];
        assert_eq!(rope_rotate(&v, 0, 10_000.0).unwrap(), v.to_vec());
        // Pair 1 of a width-4 head spins at theta^(-1/2); theta = 4/π² makes
        // that exactly π/2 per position.
        let theta = (4.0 / std::f64::consts::PI.powi(2)) as f32;
        let r = rope_rotate(&[0.0, 0.0, 1.0, 0.0], 1, theta).unwrap();
        assert!(r[2].abs() < 1e-6 && (r[3] - 1.0).abs() < 1e-6, "{r:?}");
        assert!(matches!(rope_rotate(&[1.0, 2.0, 3.0], 1, 10.0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30f32..30.0, 36), causal: bool) {
            let s = masked_softmax_rows(&Tensor::new(vec![6, 6], vals).unwrap(), causal).unwrap();
            for t in 0..6 {
                let sum: f64 = s.row(t).iter().map(|&v| v as f64).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                if causal {
                    prop_assert!(s.row(t)[t + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }

        #[test]
        fn matmul_is_associative(vals in prop::collection::vec(-1f32..1.0, 192)) {
            let a = Tensor::new(vec![8, 8], vals[..64].to_vec()).unwrap();
            let b = Tensor::new(vec![8, 8], vals[64..128].to_vec()).unwrap();
            let c = Tensor::new(vec![8, 8], vals[128..].to_vec()).unwrap();
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.data().iter().map(|v| v.abs()).fold(1e-3f32, f32::max);
            for (l, r) in left.data().iter().zip(right.data()) {
                prop_assert!((l - r).abs() / scale < 1e-4);
            }
        }

        #[test]
        fn rope_preserves_norm(v in prop::collection::vec(-1f32..1.0, 16), pos in 0usize..4096) {
            let r = rope_rotate(&v, pos, 10_000.0).unwrap();
            let n0: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let n1: f64 = r.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((n0 - n1).abs() < 1e-6);
        }
    }
}
