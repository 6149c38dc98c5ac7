//! Dense row-major f64 matrices and the handful of products the pipeline needs.
//!
//! Everything here is deterministic regardless of thread count: parallel
//! kernels split work by output row, and every output element is reduced
//! sequentially by exactly one thread.

use rayon::prelude::*;

/// Work threshold (in multiply-adds) below which kernels stay serial.
const PAR_CUTOFF: usize = 1 << 21;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Transposed copy.
    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for (j, &v) in self.row(i).iter().enumerate() {
                out.data[j * self.rows + i] = v;
            }
        }
        out
    }

    /// self += alpha * other (same shape).
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        axpy(alpha, &other.data, &mut self.data);
    }
}

/// Dot product with fixed-order lane accumulation; vectorizes without
/// changing the summation result across runs.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    let (a8, a_tail) = a.split_at(chunks * 8);
    let (b8, b_tail) = b.split_at(chunks * 8);
    for (ca, cb) in a8.chunks_exact(8).zip(b8.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in a_tail.iter().zip(b_tail) {
        s += x * y;
    }
    s
}

/// y += alpha * x
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Mean of a slice.
pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Cosine similarity; 0.0 when either vector is all-zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// C = A · Bᵀ  (a: n×k, b: m×k → n×m). Parallel over rows of A.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "inner dimension mismatch");
    let (n, m, k) = (a.rows, b.rows, a.cols);
    let mut c = Matrix::zeros(n, m);
    let work = n * m * k;
    let body = |i: usize, crow: &mut [f64]| {
        let arow = a.row(i);
        for j in 0..m {
            crow[j] = dot(arow, b.row(j));
        }
    };
    if work < PAR_CUTOFF {
        let mut data = std::mem::take(&mut c.data);
        for i in 0..n {
            body(i, &mut data[i * m..(i + 1) * m]);
        }
        c.data = data;
    } else {
        c.data
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, crow)| body(i, crow));
    }
    c
}

/// C = A · B  (a: n×k, b: k×m → n×m). Parallel over rows of A; each output
/// row is accumulated with an in-cache axpy sweep over B's rows.
pub fn matmul_nn(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "inner dimension mismatch");
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut c = Matrix::zeros(n, m);
    let body = |i: usize, crow: &mut [f64]| {
        let arow = a.row(i);
        for (t, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(av, b.row(t), crow);
            }
        }
    };
    if n * m * k < PAR_CUTOFF {
        let mut data = std::mem::take(&mut c.data);
        for i in 0..n {
            body(i, &mut data[i * m..(i + 1) * m]);
        }
        c.data = data;
    } else {
        c.data
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, crow)| body(i, crow));
    }
    c
}

/// C += Aᵀ · B  (a: p×n, b: p×m, c: n×m). Blocked over p with a per-block
/// transpose of A so every inner loop runs over contiguous memory; parallel
/// over rows of C, sequential over blocks (deterministic).
pub fn add_matmul_tn(a: &Matrix, b: &Matrix, c: &mut Matrix) {
    assert_eq!(a.rows, b.rows, "outer dimension mismatch");
    assert_eq!(c.rows, a.cols);
    assert_eq!(c.cols, b.cols);
    let (p, n, m) = (a.rows, a.cols, b.cols);
    const BLOCK: usize = 128;

    let mut at_block = vec![0.0f64; n * BLOCK];
    for t0 in (0..p).step_by(BLOCK) {
        let bs = BLOCK.min(p - t0);
        // Transpose A[t0..t0+bs, :] into at_block (n×bs).
        for (dt, t) in (t0..t0 + bs).enumerate() {
            for (i, &v) in a.row(t).iter().enumerate() {
                at_block[i * bs + dt] = v;
            }
        }
        let bslab = &b.data[t0 * m..(t0 + bs) * m];
        let body = |i: usize, crow: &mut [f64]| {
            let arow = &at_block[i * bs..(i + 1) * bs];
            for (dt, &av) in arow.iter().enumerate() {
                if av != 0.0 {
                    axpy(av, &bslab[dt * m..(dt + 1) * m], crow);
                }
            }
        };
        if n * m * bs < PAR_CUTOFF {
            for i in 0..n {
                body(i, &mut c.data[i * m..(i + 1) * m]);
            }
        } else {
            c.data
                .par_chunks_mut(m)
                .enumerate()
                .for_each(|(i, crow)| body(i, crow));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for t in 0..a.cols() {
                    s += a.get(i, t) * b.get(t, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn products_match_naive_loops() {
        let mut rng = crate::rng::rng_from_seed(7);
        for &(n, k, m) in &[(3, 5, 4), (17, 33, 9), (64, 64, 64), (1, 1, 1)] {
            let a = random_matrix(n, k, &mut rng);
            let b = random_matrix(k, m, &mut rng);
            let c = matmul_nn(&a, &b);
            let c_ref = naive_matmul(&a, &b);
            for (x, y) in c.data().iter().zip(c_ref.data()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }

            let bt = b.transposed();
            let c2 = matmul_nt(&a, &bt);
            for (x, y) in c2.data().iter().zip(c_ref.data()) {
                assert!((x - y).abs() < 1e-12);
            }

            let at = a.transposed();
            let mut c3 = Matrix::zeros(n, m);
            add_matmul_tn(&at, &b, &mut c3);
            for (x, y) in c3.data().iter().zip(c_ref.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dot_matches_reference() {
        let mut rng = crate::rng::rng_from_seed(11);
        for len in [0, 1, 7, 8, 9, 63, 64, 200] {
            let a: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let expect: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let mut rng = crate::rng::rng_from_seed(3);
        let a = random_matrix(5, 9, &mut rng);
        assert_eq!(a, a.transposed().transposed());
    }
}
