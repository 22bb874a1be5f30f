//! Symmetric positive-definite matrices in profile (skyline) storage and
//! their in-place Cholesky factorization.
//!
//! Row `i` stores the lower-triangle entries from column `first[i]` to the
//! diagonal. Cholesky produces no fill outside this envelope, so a pose chain
//! with a handful of landmark rows ordered last factors in time linear in the
//! chain length.

#[derive(Clone, Debug)]
pub struct Skyline {
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl Skyline {
    /// Zero matrix with the given per-row first stored column.
    pub fn zeros(first: Vec<usize>) -> Self {
        let mut start = Vec::with_capacity(first.len() + 1);
        let mut len = 0;
        for (i, &f) in first.iter().enumerate() {
            assert!(f <= i, "profile start beyond diagonal");
            start.push(len);
            len += i - f + 1;
        }
        start.push(len);
        Self {
            first,
            start,
            data: vec![0.0; len],
        }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && j >= self.first[i]);
        self.start[i] + j - self.first[i]
    }

    /// Adds `v` at `(i, j)` with `j <= i`.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if j < self.first[i] {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.data[self.idx(i, i)]).collect()
    }

    pub fn add_diagonal(&mut self, d: &[f64]) {
        for (i, v) in d.iter().enumerate() {
            self.add(i, i, *v);
        }
    }

    /// Replaces the stored matrix by its lower Cholesky factor. On failure
    /// returns the row whose pivot was not positive.
    pub fn factorize(&mut self) -> Result<(), usize> {
        let n = self.dim();
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            for j in fi..=i {
                let fj = self.first[j];
                let sj = self.start[j];
                let k0 = fi.max(fj);
                let row_i = &self.data[si + k0 - fi..si + j - fi];
                let row_j = &self.data[sj + k0 - fj..sj + j - fj];
                let dot: f64 = row_i.iter().zip(row_j).map(|(a, b)| a * b).sum();
                let s = self.data[si + j - fi] - dot;
                if j < i {
                    let djj = self.data[sj + j - fj];
                    self.data[si + j - fi] = s / djj;
                } else {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(i);
                    }
                    self.data[si + j - fi] = s.sqrt();
                }
            }
        }
        Ok(())
    }

    /// Solves `L L^T x = b` in place, assuming [`Skyline::factorize`] succeeded.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        assert_eq!(b.len(), n);
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            let row = &self.data[si..si + i - fi];
            let dot: f64 = row.iter().zip(&b[fi..i]).map(|(a, x)| a * x).sum();
            b[i] = (b[i] - dot) / self.data[si + i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let si = self.start[i];
            b[i] /= self.data[si + i - fi];
            let xi = b[i];
            for (k, l) in (fi..i).zip(&self.data[si..si + i - fi]) {
                b[k] -= l * xi;
            }
        }
    }
}
