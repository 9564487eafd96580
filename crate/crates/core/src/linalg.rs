//! Dense 64-bit linear algebra and the sphere-normalization calculus.
//!
//! Vectors are plain `[f64]` slices; matrices are row-major [`Mat64`].
//! Every product checks its shapes and reports [`VoltaError::ShapeMismatch`]
//! instead of panicking.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VoltaError};

/// Norms below this are treated as degenerate by [`l2_normalize`] and
/// [`normalize_vjp`].
pub const MIN_NORM: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatRepr")]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct MatRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatRepr> for Mat64 {
    type Error = VoltaError;

    fn try_from(m: MatRepr) -> Result<Self> {
        Mat64::from_vec(m.rows, m.cols, m.data)
    }
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat64 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat64::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(VoltaError::shape(format!(
                "{rows}x{cols} matrix cannot hold {} values",
                data.len()
            )));
        }
        Ok(Mat64 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(VoltaError::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Mat64 {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so an empty-column matrix yields nothing.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies the selected rows, in the given order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Mat64 {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat64 {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat64 {
        let mut t = Mat64::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(VoltaError::shape(format!(
                "matvec: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok(self.row_iter().map(|row| dot(row, v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(VoltaError::shape(format!(
                "matvec_t: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (row, &s) in self.row_iter().zip(v) {
            axpy(s, row, &mut out);
        }
        Ok(out)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat64) -> Result<Mat64> {
        if self.cols != other.rows {
            return Err(VoltaError::shape(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat64::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), dst);
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`; rows of both operands must have equal length.
    pub fn matmul_t(&self, other: &Mat64) -> Result<Mat64> {
        if self.cols != other.cols {
            return Err(VoltaError::shape(format!(
                "matmul_t: {}x{} times ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat64::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for c in 0..other.rows {
                out.data[r * other.rows + c] = dot(a, other.row(c));
            }
        }
        Ok(out)
    }

    /// Adds `scale · u vᵀ` in place.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(VoltaError::shape(format!(
                "add_outer: {}x{} target with {}x{} outer product",
                self.rows,
                self.cols,
                u.len(),
                v.len()
            )));
        }
        for (r, &ur) in u.iter().enumerate() {
            let s = scale * ur;
            if s != 0.0 {
                axpy(s, v, self.row_mut(r));
            }
        }
        Ok(())
    }
}

/// `u vᵀ` as a new matrix.
pub fn outer(u: &[f64], v: &[f64]) -> Mat64 {
    let mut m = Mat64::zeros(u.len(), v.len());
    for (r, &ur) in u.iter().enumerate() {
        for (c, &vc) in v.iter().enumerate() {
            m.data[r * v.len() + c] = ur * vc;
        }
    }
    m
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a·x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Index of the first maximum; ties go to the smallest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn max_of(x: &[f64]) -> f64 {
    x.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `log Σ exp(x_k)` with the maximum factored out.
pub fn log_sum_exp(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(VoltaError::invalid("log_sum_exp of an empty vector"));
    }
    let m = max_of(x);
    if !m.is_finite() {
        return Err(VoltaError::invalid("log_sum_exp of a non-finite vector"));
    }
    let s: f64 = x.iter().map(|&v| (v - m).exp()).sum();
    Ok(m + s.ln())
}

/// Numerically stable softmax. An empty input gives an empty output.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let m = max_of(x);
    let mut s = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = 1.0 / s;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

/// `v / ‖v‖₂`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n >= MIN_NORM) {
        return Err(VoltaError::Degenerate(format!(
            "cannot normalize a vector of norm {n:e}"
        )));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Vector-Jacobian product of `v ↦ v/‖v‖₂`: `(I − z zᵀ) g / ‖v‖₂`.
pub fn normalize_vjp(v: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    if v.len() != g.len() {
        return Err(VoltaError::shape(format!(
            "normalize_vjp: vector of length {} with cotangent of length {}",
            v.len(),
            g.len()
        )));
    }
    let n = norm(v);
    if !(n >= MIN_NORM) {
        return Err(VoltaError::Degenerate(format!(
            "normalize_vjp at a vector of norm {n:e}"
        )));
    }
    let z: Vec<f64> = v.iter().map(|x| x / n).collect();
    let radial = dot(&z, g);
    Ok(g.iter()
        .zip(&z)
        .map(|(gi, zi)| (gi - radial * zi) / n)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_lse(x: &[f64]) -> f64 {
        // compensated plain Σ exp, no max shift
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for &v in x {
            let t = s + v.exp();
            if s.abs() >= v.exp().abs() {
                c += (s - t) + v.exp();
            } else {
                c += (v.exp() - t) + s;
            }
            s = t;
        }
        (s + c).ln()
    }

    #[test]
    fn lse_examples() {
        assert!((log_sum_exp(&[0.0; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[-3.25]).unwrap(), -3.25);
        assert!(log_sum_exp(&[]).is_err());
        assert!((log_sum_exp(&[700.0, 700.0]).unwrap() - (700.0 + 2f64.ln())).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x: Vec<f64> = (0..32).map(|_| rng.random_range(-50.0..50.0)).collect();
            let a = log_sum_exp(&x).unwrap();
            let b = naive_lse(&x);
            assert!(((a - b) / b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0; 10]);
        assert!(p.iter().all(|&v| (v - 0.1).abs() < 1e-16));

        let p = softmax(&[1.0, 2.0, 3.0]);
        // e^{x - lse(x)} with lse = 3 + ln(1 + e^-1 + e^-2)
        let lse = 3.0 + (1.0 + (-1f64).exp() + (-2f64).exp()).ln();
        for (i, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((p[i] - (x - lse).exp()).abs() < 1e-15);
        }
        assert!((p[0] - 0.09003057).abs() < 1e-8);
        assert!((p[1] - 0.24472847).abs() < 1e-8);
        assert!((p[2] - 0.66524096).abs() < 1e-8);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let u = l2_normalize(&[0.6, 0.8]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-16 && (u[1] - 0.8).abs() < 1e-16);
        assert!(matches!(
            l2_normalize(&[1e-13, 0.0]),
            Err(VoltaError::Degenerate(_))
        ));
        assert!(normalize_vjp(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(normalize_vjp(&[1.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn vjp_kills_radial_and_keeps_tangent() {
        let v = [1.0, -2.0, 0.5];
        let g: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        assert!(normalize_vjp(&v, &g).unwrap().iter().all(|x| x.abs() < 1e-15));

        let v = [0.6, 0.8, 0.0];
        let g = [0.8, -0.6, 2.0];
        let out = normalize_vjp(&v, &g).unwrap();
        for (a, b) in out.iter().zip(g) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..30 {
            let n = rng.random_range(2..7);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic = normalize_vjp(&v, &g).unwrap();
            for j in 0..n {
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[j] += h;
                vm[j] -= h;
                let fp = dot(&l2_normalize(&vp).unwrap(), &g);
                let fm = dot(&l2_normalize(&vm).unwrap(), &g);
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - analytic[j]).abs() < 1e-6, "{fd} vs {}", analytic[j]);
            }
        }
    }

    #[test]
    fn dense_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        assert_eq!(Mat64::identity(6).matvec(&v).unwrap(), v);

        let rand_mat = |rng: &mut ChaCha8Rng, r, c| {
            Mat64::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 5, 4);
        let abt = a.matmul(&b.transpose()).unwrap();
        let bat = b.matmul(&a.transpose()).unwrap();
        assert_eq!(abt.transpose(), bat);
        assert_eq!(a.matmul_t(&b).unwrap(), abt);

        let x = rand_mat(&mut rng, 8, 8);
        let y = rand_mat(&mut rng, 8, 8);
        let xy = x.matmul(&y).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0;
                for k in 0..8 {
                    s += x.get(i, k) * y.get(k, j);
                }
                assert!((xy.get(i, j) - s).abs() < 1e-13);
            }
        }

        assert!(a.matmul(&b).is_err());
        assert!(a.matvec(&[1.0; 3]).is_err());
        assert!(Mat64::from_vec(2, 2, vec![0.0; 3]).is_err());

        let o = outer(&[1.0, 2.0], &[3.0, 4.0, 5.0]);
        assert_eq!(o.as_slice(), &[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]);
        let mut z = Mat64::zeros(2, 3);
        z.add_outer(1.0, &[1.0, 2.0], &[3.0, 4.0, 5.0]).unwrap();
        assert_eq!(z, o);
        assert_eq!(a.matvec_t(&[1.0, 0.0, 0.0]).unwrap(), a.row(0));
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(x in proptest::collection::vec(-300.0f64..300.0, 1..40)) {
            let p = softmax(&x);
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(x in proptest::collection::vec(-5.0f64..5.0, 1..20), c in -4.0f64..4.0) {
            let a = softmax(&x);
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let b = softmax(&shifted);
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= 1e-15);
            }
        }

        #[test]
        fn lse_bounds(x in proptest::collection::vec(-700.0f64..700.0, 1..50)) {
            let l = log_sum_exp(&x).unwrap();
            let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(l >= m - 1e-12);
            prop_assert!(l <= m + (x.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn normalize_gives_unit_norm(v in proptest::collection::vec(-1e3f64..1e3, 1..30)) {
            prop_assume!(norm(&v) >= 1e-6);
            let u = l2_normalize(&v).unwrap();
            prop_assert!((norm(&u) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn vjp_is_tangent(
            v in proptest::collection::vec(-10.0f64..10.0, 2..12),
            seed in 0u64..1000,
        ) {
            prop_assume!(norm(&v) >= 1e-3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f64> = (0..v.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
            let out = normalize_vjp(&v, &g).unwrap();
            let z = l2_normalize(&v).unwrap();
            prop_assert!(dot(&out, &z).abs() <= 1e-10);
        }

        #[test]
        fn pure_functions_are_bitwise_repeatable(x in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            prop_assert_eq!(softmax(&x), softmax(&x));
            prop_assert_eq!(log_sum_exp(&x).unwrap().to_bits(), log_sum_exp(&x).unwrap().to_bits());
        }
    }
}
