//! Vertical cosine transform on the levels `z_j = j / (nz - 1)`.
//!
//! A column `f_j` is expanded as `f_j = Σ_k a_k cos(kπ z_j)` for
//! `k = 0..nz-1` (a type-I discrete cosine transform). Each mode satisfies the
//! Neumann condition at both ends and is an eigenfunction of `∂²/∂z²` with
//! eigenvalue `-(kπ)²`.

use std::f64::consts::PI;

#[derive(Clone, Debug)]
pub struct CosineBasis {
    nz: usize,
    /// `cos(kπ z_j)` stored as `table[k * nz + j]`.
    table: Vec<f64>,
}

impl CosineBasis {
    pub fn new(nz: usize) -> Self {
        assert!(nz >= 2, "need at least two levels");
        let n = (nz - 1) as f64;
        let mut table = vec![0.0; nz * nz];
        for k in 0..nz {
            for j in 0..nz {
                // exact reduction of kj mod 2N keeps symmetric values bitwise equal
                let m = (k * j) % (2 * (nz - 1));
                table[k * nz + j] = (PI * m as f64 / n).cos();
            }
        }
        Self { nz, table }
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    #[inline]
    pub fn cos(&self, k: usize, j: usize) -> f64 {
        self.table[k * self.nz + j]
    }

    /// Eigenvalue of `∂²/∂z²` for mode `k`.
    pub fn eigenvalue(k: usize) -> f64 {
        -(k as f64 * PI).powi(2)
    }

    /// Trapezoid weight of level `j` on `[0, 1]`.
    pub fn level_weight(&self, j: usize) -> f64 {
        let n = (self.nz - 1) as f64;
        if j == 0 || j == self.nz - 1 {
            0.5 / n
        } else {
            1.0 / n
        }
    }

    /// Weight of mode `k` such that `Σ_k w_k a_k b_k` equals the trapezoid
    /// rule for `∫₀¹ f g dz`.
    pub fn mode_weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.nz - 1 {
            1.0
        } else {
            0.5
        }
    }

    pub fn forward(&self, f: &[f64], a: &mut [f64]) {
        let nz = self.nz;
        let n = (nz - 1) as f64;
        for k in 0..nz {
            let row = &self.table[k * nz..(k + 1) * nz];
            let mut s = 0.5 * (f[0] * row[0] + f[nz - 1] * row[nz - 1]);
            for j in 1..nz - 1 {
                s += f[j] * row[j];
            }
            let scale = if k == 0 || k == nz - 1 {
                1.0 / n
            } else {
                2.0 / n
            };
            a[k] = s * scale;
        }
    }

    pub fn inverse(&self, a: &[f64], f: &mut [f64]) {
        let nz = self.nz;
        for j in 0..nz {
            f[j] = (0..nz).map(|k| a[k] * self.table[k * nz + j]).sum();
        }
    }

    /// Evaluate the cosine series at an arbitrary height.
    pub fn eval(a: &[f64], z: f64) -> f64 {
        a.iter()
            .enumerate()
            .map(|(k, &ak)| ak * (k as f64 * PI * z).cos())
            .sum()
    }

    /// Evaluate `∂/∂z` of the cosine series at an arbitrary height.
    pub fn eval_dz(a: &[f64], z: f64) -> f64 {
        a.iter()
            .enumerate()
            .map(|(k, &ak)| -ak * k as f64 * PI * (k as f64 * PI * z).sin())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_is_mode_zero() {
        let b = CosineBasis::new(9);
        let mut a = vec![0.0; 9];
        b.forward(&[1.0; 9], &mut a);
        assert!((a[0] - 1.0).abs() < 1e-15);
        assert!(a[1..].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn cos_pi_z_is_mode_one() {
        let b = CosineBasis::new(7);
        let f: Vec<f64> = (0..7).map(|j| (PI * j as f64 / 6.0).cos()).collect();
        let mut a = vec![0.0; 7];
        b.forward(&f, &mut a);
        for (k, v) in a.iter().enumerate() {
            let expect = if k == 1 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-14, "k={k} {v}");
        }
    }

    #[test]
    fn neumann_at_ends() {
        let a = [0.3, -1.2, 0.5, 2.0];
        assert!(CosineBasis::eval_dz(&a, 0.0).abs() < 1e-15);
        assert!(CosineBasis::eval_dz(&a, 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigenvalues() {
        assert_eq!(CosineBasis::eigenvalue(0), 0.0);
        assert!((CosineBasis::eigenvalue(2) + 4.0 * PI * PI).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn roundtrip(nz in 2usize..20, vals in proptest::collection::vec(-10.0f64..10.0, 20)) {
            let b = CosineBasis::new(nz);
            let f = &vals[..nz];
            let mut a = vec![0.0; nz];
            let mut g = vec![0.0; nz];
            b.forward(f, &mut a);
            b.inverse(&a, &mut g);
            let scale = f.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
            for (x, y) in f.iter().zip(&g) {
                prop_assert!((x - y).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn parseval_matches_trapezoid(nz in 2usize..16, vals in proptest::collection::vec(-1.0f64..1.0, 32)) {
            let b = CosineBasis::new(nz);
            let f = &vals[..nz];
            let g = &vals[16..16 + nz];
            let (mut a, mut c) = (vec![0.0; nz], vec![0.0; nz]);
            b.forward(f, &mut a);
            b.forward(g, &mut c);
            let trap: f64 = (0..nz).map(|j| b.level_weight(j) * f[j] * g[j]).sum();
            let modal: f64 = (0..nz).map(|k| b.mode_weight(k) * a[k] * c[k]).sum();
            prop_assert!((trap - modal).abs() < 1e-12);
        }
    }
}
