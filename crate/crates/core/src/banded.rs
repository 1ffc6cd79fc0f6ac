//! Band LU factorisation for the horizontal operators.

use crate::error::{QgError, Result};

/// General band matrix with `bw` sub- and super-diagonals, stored by rows:
/// `data[i * (2bw + 1) + bw + (j - i)]` holds `A[i][j]`.
#[derive(Clone, Debug)]
pub struct GeneralBand {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl GeneralBand {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (2 * bw + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn pos(&self, i: usize, j: usize) -> usize {
        debug_assert!(i.abs_diff(j) <= self.bw);
        i * (2 * self.bw + 1) + self.bw + j - i
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let p = self.pos(i, j);
        self.data[p] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i.abs_diff(j) > self.bw {
            0.0
        } else {
            self.data[self.pos(i, j)]
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let w = 2 * self.bw + 1;
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.bw);
            let j1 = (i + self.bw + 1).min(self.n);
            let base = i * w + self.bw - i;
            y[i] = (j0..j1).map(|j| self.data[base + j] * x[j]).sum();
        }
    }

    /// LU factorisation without pivoting. Intended for diagonally dominant
    /// M-matrices, where it is stable.
    pub fn lu(mut self) -> Result<BandLu> {
        let (n, bw) = (self.n, self.bw);
        let w = 2 * bw + 1;
        for k in 0..n {
            let pivot = self.data[k * w + bw];
            if pivot.abs() < 1e-300 || !pivot.is_finite() {
                return Err(QgError::Solver {
                    message: format!("zero pivot at row {k}"),
                    residual: pivot,
                });
            }
            let i1 = (k + bw + 1).min(n);
            let j1 = i1;
            for i in (k + 1)..i1 {
                let bi = i * w + bw - i;
                let f = self.data[bi + k] / pivot;
                if f == 0.0 {
                    continue;
                }
                self.data[bi + k] = f;
                let bk = k * w + bw - k;
                for j in (k + 1)..j1 {
                    self.data[bi + j] -= f * self.data[bk + j];
                }
            }
        }
        Ok(BandLu { m: self })
    }
}

/// Unit lower / upper factors of a [`GeneralBand`], stored in place.
#[derive(Clone, Debug)]
pub struct BandLu {
    m: GeneralBand,
}

impl BandLu {
    pub fn n(&self) -> usize {
        self.m.n
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw) = (self.m.n, self.m.bw);
        let w = 2 * bw + 1;
        let d = &self.m.data;
        for i in 0..n {
            let base = i * w + bw - i;
            let mut s = x[i];
            for j in i.saturating_sub(bw)..i {
                s -= d[base + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let base = i * w + bw - i;
            let mut s = x[i];
            for j in (i + 1)..(i + bw + 1).min(n) {
                s -= d[base + j] * x[j];
            }
            x[i] = s / d[base + i];
        }
    }
}
