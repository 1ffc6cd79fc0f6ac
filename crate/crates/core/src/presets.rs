//! Built-in initial PV fields.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::field::ScalarField3;
use crate::geometry::Grid;

/// Subtract the mean of every level over the interior nodes, then
/// refresh the ghost values.
pub fn remove_level_means(q: &mut ScalarField3) {
    let g = q.grid().clone();
    for k in 0..g.nz {
        let m = q.level_mean(k);
        for &n in g.interior() {
            let v = q.get(n, k);
            q.set(n, k, v - m);
        }
    }
    q.fill_ghosts_extrapolated();
}

fn normalise(mut q: ScalarField3, amplitude: f64) -> ScalarField3 {
    remove_level_means(&mut q);
    let m = q.max_abs();
    if m > 0.0 {
        q = q.scale(amplitude / m);
    }
    q
}

/// Opposite-signed Gaussian pair centred at a quarter and three quarters of
/// the bounding box width, tilted gently in `z`; zero mean on every level.
pub fn dipole(grid: &Arc<Grid>, amplitude: f64) -> ScalarField3 {
    let bb = grid.cross_section().bbox();
    let (w, hgt) = (bb[2] - bb[0], bb[3] - bb[1]);
    let yc = bb[1] + 0.5 * hgt;
    let a = [bb[0] + 0.25 * w, yc];
    let b = [bb[0] + 0.75 * w, yc];
    let s2 = (0.1 * w.max(hgt)).powi(2);
    let q = ScalarField3::from_fn(grid, |x, y, z| {
        let ga = (-((x - a[0]).powi(2) + (y - a[1]).powi(2)) / s2).exp();
        let gb = (-((x - b[0]).powi(2) + (y - b[1]).powi(2)) / s2).exp();
        (ga - gb) * (1.0 + 0.25 * (PI * z).cos())
    });
    normalise(q, amplitude)
}

/// Function of the distance to the bounding box centre only.
pub fn radial(grid: &Arc<Grid>, amplitude: f64) -> ScalarField3 {
    let bb = grid.cross_section().bbox();
    let c = [0.5 * (bb[0] + bb[2]), 0.5 * (bb[1] + bb[3])];
    let r_max = 0.5 * (bb[2] - bb[0]).max(bb[3] - bb[1]);
    let q = ScalarField3::from_fn(grid, |x, y, z| {
        let r = (x - c[0]).hypot(y - c[1]) / r_max;
        (2.0 * PI * r).cos() * (1.0 + 0.25 * (PI * z).cos())
    });
    normalise(q, amplitude)
}

/// Independent uniform values in `[-amplitude, amplitude]` with the level
/// means removed.
pub fn random_bounded(grid: &Arc<Grid>, amplitude: f64, seed: u64) -> ScalarField3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = ScalarField3::zeros(grid);
    for k in 0..grid.nz {
        for &n in grid.interior() {
            q.set(n, k, rng.gen_range(-amplitude..=amplitude));
        }
    }
    remove_level_means(&mut q);
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_domain, discretize, DomainSpec};

    fn grid(spec: DomainSpec) -> Arc<Grid> {
        Arc::new(discretize(&build_domain(&spec).unwrap(), 24, 24, 4).unwrap())
    }

    #[test]
    fn presets_have_zero_level_means() {
        for spec in [
            DomainSpec::annulus(1.0, 2.0),
            DomainSpec::square_with_hole(),
        ] {
            let g = grid(spec);
            for q in [dipole(&g, 1.0), radial(&g, 1.0), random_bounded(&g, 1.0, 3)] {
                for k in 0..g.nz {
                    assert!(q.level_mean(k).abs() < 1e-14);
                }
                assert!(q.max_abs() <= 2.0 + 1e-12);
            }
            assert!((dipole(&g, 1.0).max_abs() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn random_preset_is_reproducible() {
        let g = grid(DomainSpec::annulus(1.0, 2.0));
        assert_eq!(
            random_bounded(&g, 1.0, 9).values(),
            random_bounded(&g, 1.0, 9).values()
        );
        assert_ne!(
            random_bounded(&g, 1.0, 9).values(),
            random_bounded(&g, 1.0, 10).values()
        );
    }
}
