//! Pullback of the initial potential vorticity along backward flow maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QgError, Result};
use crate::field::ScalarField3;
use crate::flowmap::FlowMap;
use crate::geometry::{Grid, NodeTag, Point};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// Convex bilinear weights; never leaves the range of the stencil.
    #[default]
    Bilinear,
    /// Cubic convolution where the full 4×4 stencil exists, else bilinear.
    Bicubic,
}

/// Initial PV with its sup norm. Ghost nodes are re-extrapolated and clamped
/// so that interpolation cannot exceed the interior range.
#[derive(Clone, Debug)]
pub struct InitialPV {
    q0: ScalarField3,
    bound: f64,
}

impl InitialPV {
    /// `homogeneous` demands a zero horizontal mean on every level.
    pub fn new(q0: ScalarField3, homogeneous: bool) -> Result<Self> {
        let mut q0 = q0.to_physical();
        q0.fill_ghosts_extrapolated();
        let bound = q0.max_abs();
        if !bound.is_finite() {
            return Err(QgError::Domain("initial PV is not finite".into()));
        }
        if homogeneous {
            for k in 0..q0.grid().nz {
                let m = q0.level_mean(k);
                if m.abs() > 1e-10 * bound.max(1.0) {
                    return Err(QgError::Domain(format!(
                        "initial PV has horizontal mean {m:.3e} on level {k}"
                    )));
                }
            }
        }
        Ok(Self { q0, bound })
    }

    pub fn field(&self) -> &ScalarField3 {
        &self.q0
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }
}

fn check_inside(grid: &Grid, p: Point) -> Result<()> {
    if grid.contains(p) {
        return Ok(());
    }
    let (b, _) = grid.nearest_boundary_point(p);
    if (b[0] - p[0]).hypot(b[1] - p[1]) > grid.h {
        return Err(QgError::OutOfDomain(p[0], p[1]));
    }
    Ok(())
}

/// Bilinear interpolation of one level at `p`, skipping exterior corners
/// and renormalising the remaining weights.
pub fn interpolate(grid: &Grid, level: &[f64], p: Point) -> Result<f64> {
    Ok(apply(&interpolation_stencil(grid, p)?, level))
}

/// Nodes and weights of [`interpolate`] at `p`, reusable across fields on
/// the same grid.
pub fn interpolation_stencil(grid: &Grid, p: Point) -> Result<[(usize, f64); 4]> {
    check_inside(grid, p)?;
    bilinear_stencil(grid, p)
}

pub fn apply(stencil: &[(usize, f64); 4], level: &[f64]) -> f64 {
    stencil
        .iter()
        .map(|&(n, w)| if w == 0.0 { 0.0 } else { w * level[n] })
        .sum()
}

fn bilinear_stencil(grid: &Grid, p: Point) -> Result<[(usize, f64); 4]> {
    let (mut i, mut j, mut fx, mut fy) = grid.cell_of(p).ok_or(QgError::OutOfDomain(p[0], p[1]))?;
    // snap to nodes so that nodal values are reproduced bit for bit
    const SNAP: f64 = 1e-9;
    if fx < SNAP {
        fx = 0.0;
    } else if fx > 1.0 - SNAP && i + 2 < grid.nx {
        i += 1;
        fx = 0.0;
    }
    if fy < SNAP {
        fy = 0.0;
    } else if fy > 1.0 - SNAP && j + 2 < grid.ny {
        j += 1;
        fy = 0.0;
    }
    let mut corners = [
        (grid.idx(i, j), (1.0 - fx) * (1.0 - fy)),
        (grid.idx(i + 1, j), fx * (1.0 - fy)),
        (grid.idx(i, j + 1), (1.0 - fx) * fy),
        (grid.idx(i + 1, j + 1), fx * fy),
    ];
    let mut w = 0.0;
    for c in corners.iter_mut() {
        if !usable(grid, c.0) {
            c.1 = 0.0;
        }
        w += c.1;
    }
    if w > 1e-12 {
        for c in corners.iter_mut() {
            c.1 /= w;
        }
        return Ok(corners);
    }
    // only exterior corners carry weight: use the nearest usable corner
    let n = corners
        .iter()
        .filter(|(n, _)| usable(grid, *n))
        .min_by(|a, b| {
            let da = dist2(grid.node_xy(a.0), p);
            let db = dist2(grid.node_xy(b.0), p);
            da.total_cmp(&db)
        })
        .map(|&(n, _)| n)
        .ok_or(QgError::OutOfDomain(p[0], p[1]))?;
    Ok([(n, 1.0), (n, 0.0), (n, 0.0), (n, 0.0)])
}

fn usable(grid: &Grid, n: usize) -> bool {
    grid.tags[n] == NodeTag::Interior || grid.in_halo(n)
}

fn dist2(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn keys(t: f64) -> [f64; 4] {
    // cubic convolution kernel with a = -1/2 at offsets -1, 0, 1, 2
    let a = -0.5;
    let w = |x: f64| {
        let x = x.abs();
        if x <= 1.0 {
            (a + 2.0) * x.powi(3) - (a + 3.0) * x * x + 1.0
        } else if x < 2.0 {
            a * x.powi(3) - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
        } else {
            0.0
        }
    };
    [w(t + 1.0), w(t), w(1.0 - t), w(2.0 - t)]
}

pub fn interpolate_with(grid: &Grid, level: &[f64], p: Point, order: Interpolation) -> Result<f64> {
    check_inside(grid, p)?;
    if order == Interpolation::Bilinear {
        return Ok(apply(&bilinear_stencil(grid, p)?, level));
    }
    let (i, j, fx, fy) = grid.cell_of(p).ok_or(QgError::OutOfDomain(p[0], p[1]))?;
    if i == 0 || j == 0 || i + 2 >= grid.nx || j + 2 >= grid.ny {
        return Ok(apply(&bilinear_stencil(grid, p)?, level));
    }
    let (wx, wy) = (keys(fx), keys(fy));
    let mut s = 0.0;
    for (b, wyb) in wy.iter().enumerate() {
        for (a, wxa) in wx.iter().enumerate() {
            let n = grid.idx(i + a - 1, j + b - 1);
            if grid.tags[n] != NodeTag::Interior {
                return Ok(apply(&bilinear_stencil(grid, p)?, level));
            }
            s += wxa * wyb * level[n];
        }
    }
    Ok(s)
}

/// `q(x, z, t) = q₀(Φ_{z,-t}(x), z)` on every interior node; ghost nodes are
/// extrapolated as in [`InitialPV::new`].
pub fn pullback(q0: &InitialPV, back: &FlowMap, order: Interpolation) -> Result<ScalarField3> {
    let src = q0.field();
    let grid = src.grid().clone();
    if grid.plane_len() != back.grid().plane_len() || grid.nz != back.grid().nz {
        return Err(QgError::Seed(
            "flow map and PV live on different grids".into(),
        ));
    }
    let seeds = back.seeds();
    if seeds.len() != grid.num_interior() {
        return Err(QgError::Seed(
            "backward map must cover every interior node".into(),
        ));
    }
    let mut out = ScalarField3::zeros(&grid);
    let plane = grid.plane_len();
    let vals: Vec<Vec<f64>> = (0..grid.nz)
        .into_par_iter()
        .map(|k| {
            let level = src.level(k);
            seeds
                .iter()
                .enumerate()
                .map(|(s, _)| interpolate_with(&grid, level, back.position(k, s), order))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let data = out.values_mut();
    for (k, row) in vals.iter().enumerate() {
        for (s, &n) in seeds.iter().enumerate() {
            data[k * plane + n] = row[s];
        }
    }
    out.fill_ghosts_extrapolated();
    Ok(out)
}

/// Per-level horizontal mean of `q` minus that of `q0`.
pub fn level_mean_drift(q: &ScalarField3, q0: &ScalarField3) -> Vec<f64> {
    (0..q.grid().nz)
        .map(|k| q.level_mean(k) - q0.level_mean(k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_domain, discretize, DomainSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn square(n: usize) -> Arc<Grid> {
        let cyl = build_domain(&DomainSpec::unit_square()).unwrap();
        Arc::new(discretize(&cyl, n, n, 3).unwrap())
    }

    #[test]
    fn constants_and_linears_are_reproduced() {
        let g = square(20);
        let c = ScalarField3::from_fn(&g, |_, _, _| 2.5);
        let lin = ScalarField3::from_fn(&g, |x, y, _| 2.0 * x + 3.0 * y);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            assert!((interpolate(&g, c.level(0), p).unwrap() - 2.5).abs() < 1e-14);
            let v = interpolate(&g, lin.level(1), p).unwrap();
            assert!((v - (2.0 * p[0] + 3.0 * p[1])).abs() < 1e-12);
        }
    }

    fn sine_error(n: usize, order: Interpolation) -> f64 {
        let g = square(n);
        let f = ScalarField3::from_fn(&g, |x, y, _| (PI * x).sin() * (PI * y).sin());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..400)
            .map(|_| {
                let p = [rng.gen_range(0.02..0.98), rng.gen_range(0.02..0.98)];
                let v = interpolate_with(&g, f.level(0), p, order).unwrap();
                (v - (PI * p[0]).sin() * (PI * p[1]).sin()).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn bilinear_error_is_second_order() {
        let (a, b) = (
            sine_error(20, Interpolation::Bilinear),
            sine_error(40, Interpolation::Bilinear),
        );
        let order = (a / b).ln() / ((40.0 - 2.0) / (20.0 - 2.0) as f64).ln();
        assert!(order > 1.8, "{a} {b} {order}");
    }

    #[test]
    fn bicubic_is_more_accurate_in_the_interior() {
        assert!(sine_error(40, Interpolation::Bicubic) < sine_error(40, Interpolation::Bilinear));
    }

    #[test]
    fn far_outside_is_rejected() {
        let g = square(20);
        let f = ScalarField3::zeros(&g);
        assert!(matches!(
            interpolate(&g, f.level(0), [1.5, 0.5]),
            Err(QgError::OutOfDomain(..))
        ));
        assert!(interpolate(&g, f.level(0), [1.0 + 0.5 * g.h, 0.5]).is_ok());
    }

    #[test]
    fn initial_pv_mean_check() {
        let g = square(20);
        let bad = ScalarField3::from_fn(&g, |x, _, _| x);
        assert!(InitialPV::new(bad.clone(), true).is_err());
        assert!(InitialPV::new(bad, false).is_ok());
    }

    fn annulus(n: usize) -> Arc<Grid> {
        let cyl = build_domain(&DomainSpec::annulus(1.0, 2.0)).unwrap();
        Arc::new(discretize(&cyl, n, n, 3).unwrap())
    }

    fn radial(g: &Arc<Grid>) -> ScalarField3 {
        ScalarField3::from_fn(g, |x, y, z| {
            (2.0 * PI * (x.hypot(y) - 1.0)).sin() * (1.0 + z)
        })
    }

    #[test]
    fn pullback_at_time_zero_is_exact() {
        use crate::flowmap::{Direction, FlowMap};
        let g = annulus(24);
        let q0 = InitialPV::new(radial(&g), false).unwrap();
        let id = FlowMap::identity(&g, 0.0, Direction::Backward);
        let q = pullback(&q0, &id, Interpolation::Bilinear).unwrap();
        for k in 0..g.nz {
            for &n in g.interior() {
                assert_eq!(q.get(n, k), q0.field().get(n, k));
            }
        }
    }

    fn rotation_error(n: usize) -> (f64, f64, f64) {
        use crate::flowmap::{backward_map, AnalyticVelocity};
        let g = annulus(n);
        let q0 = InitialPV::new(radial(&g), false).unwrap();
        let u = AnalyticVelocity(|_, p: Point, _| [-p[1], p[0]]);
        let back = backward_map(&g, &u, 1.0, 0.05).unwrap();
        let q = pullback(&q0, &back, Interpolation::Bilinear).unwrap();
        let mut err = 0.0f64;
        for k in 0..g.nz {
            for &n in g.interior() {
                let e = (q.get(n, k) - q0.field().get(n, k)).abs();
                err = err.max(e);
            }
        }
        let lo = (0..g.nz).flat_map(|k| g.interior().iter().map(move |&n| (n, k)));
        let qmin = lo
            .clone()
            .map(|(n, k)| q.get(n, k))
            .fold(f64::INFINITY, f64::min);
        let q0min = lo
            .map(|(n, k)| q0.field().get(n, k))
            .fold(f64::INFINITY, f64::min);
        (err, q.max_abs() - q0.bound(), qmin - q0min)
    }

    #[test]
    fn rotation_preserves_radial_pv() {
        let (a, grow, fall) = rotation_error(48);
        let (b, _, _) = rotation_error(96);
        assert!(grow <= 0.0 && fall >= 0.0);
        assert!(a < 0.1 && b < a / 2.5, "{a} {b}");
    }

    proptest! {
        #[test]
        fn bilinear_stays_in_stencil_range(
            vals in proptest::collection::vec(-5.0f64..5.0, 400),
            px in 0.0f64..1.0, py in 0.0f64..1.0,
        ) {
            let g = square(20);
            let mut f = ScalarField3::zeros(&g);
            for (i, v) in f.values_mut().iter_mut().take(400).enumerate() {
                if g.tags[i] != NodeTag::Exterior {
                    *v = vals[i];
                }
            }
            let v = interpolate(&g, f.level(0), [px, py]).unwrap();
            let (i, j, _, _) = g.cell_of([px, py]).unwrap();
            let corners: Vec<f64> = [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)]
                .iter()
                .map(|&(a, b)| g.idx(a, b))
                .filter(|&n| g.tags[n] != NodeTag::Exterior)
                .map(|n| f.level(0)[n])
                .collect();
            let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo && v <= hi);
        }
    }
}
