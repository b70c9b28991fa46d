//! Dense row-major `f64` matrix.
//!
//! Sizes here are desk-scale (hundreds of rows, tens of columns), so the
//! implementation favors clarity and determinism over cache tricks. Shape
//! mismatches are programmer error and panic.

/// Dense matrix with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a flat row-major buffer. Panics if the length is wrong.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "Mat::from_vec: {rows}x{cols} needs {} entries, got {}",
            rows * cols,
            data.len()
        );
        Mat { rows, cols, data }
    }

    /// Build from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "Mat::from_rows: ragged row");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    /// `self * other`, the classic triple loop in i-k-j order.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    dst[j] += a * src[j];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self += scale * other`.
    pub fn scaled_add(&mut self, scale: f64, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "scaled_add: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Add a 1xC row vector to every row (bias broadcast).
    pub fn add_row_vector(&mut self, bias: &Mat) {
        assert_eq!(bias.rows, 1, "add_row_vector: bias must be a row vector");
        assert_eq!(bias.cols, self.cols, "add_row_vector: width mismatch");
        for r in 0..self.rows {
            for c in 0..self.cols {
                self.data[r * self.cols + c] += bias.data[c];
            }
        }
    }

    /// Column sums as a 1xC row vector.
    pub fn col_sums(&self) -> Mat {
        let mut out = Mat::zeros(1, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c] += self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy the listed rows into a new matrix, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Mat {
        let mut out = Mat::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            assert!(src < self.rows, "gather_rows: index {src} out of {}", self.rows);
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Scatter-add rows of `src` back into `self` at the listed positions.
    pub fn scatter_add_rows(&mut self, indices: &[usize], src: &Mat) {
        assert_eq!(indices.len(), src.rows, "scatter_add_rows: row count mismatch");
        assert_eq!(self.cols, src.cols, "scatter_add_rows: width mismatch");
        for (i, &dst) in indices.iter().enumerate() {
            let row = &mut self.data[dst * self.cols..(dst + 1) * self.cols];
            for (a, b) in row.iter_mut().zip(src.row(i)) {
                *a += b;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Squared Euclidean distance between two equal-length rows.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn matmul_against_naive_triple_loop() {
        let mut rng = Rng::new(11);
        let a = Mat::from_fn(3, 4, |_, _| rng.next_uniform(-1.0, 1.0));
        let b = Mat::from_fn(4, 5, |_, _| rng.next_uniform(-1.0, 1.0));
        let fast = a.matmul(&b);
        // independent j-inner ordering
        let mut naive = Mat::zeros(3, 5);
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                naive.set(i, j, acc);
            }
        }
        assert!(fast.max_abs_diff(&naive) <= 1e-12);
    }

    #[test]
    fn matmul_associative_to_tolerance() {
        let mut rng = Rng::new(7);
        for _ in 0..20 {
            let a = Mat::from_fn(8, 8, |_, _| rng.next_uniform(-1.0, 1.0));
            let b = Mat::from_fn(8, 8, |_, _| rng.next_uniform(-1.0, 1.0));
            let c = Mat::from_fn(8, 8, |_, _| rng.next_uniform(-1.0, 1.0));
            let left = a.matmul(&b).matmul(&c);
            let right = a.matmul(&b.matmul(&c));
            assert!(left.max_abs_diff(&right) <= 1e-9);
        }
    }

    #[test]
    fn transpose_involution() {
        let mut rng = Rng::new(3);
        let a = Mat::from_fn(5, 3, |_, _| rng.next_uniform(-2.0, 2.0));
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn gather_then_scatter_round_trips() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let picked = a.gather_rows(&[2, 0]);
        assert_eq!(picked.row(0), &[5.0, 6.0]);
        assert_eq!(picked.row(1), &[1.0, 2.0]);

        let mut acc = Mat::zeros(3, 2);
        acc.scatter_add_rows(&[2, 0], &picked);
        assert_eq!(acc.row(2), &[5.0, 6.0]);
        assert_eq!(acc.row(1), &[0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "matmul")]
    fn matmul_shape_mismatch_panics() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(2, 3);
        let _ = a.matmul(&b);
    }
}
