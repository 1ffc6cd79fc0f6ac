//! Discrete Green's function of the inversion problem, built from the
//! periodic kernel on the doubled cylinder `M × (-1, 1)` and its reflection.
//!
//! For a source at horizontal node `y` and height `z_s`, the periodic kernel
//! is even in `η - z_s`, so it expands in cosines
//! `G_per = Σ_m g_m(ξ) cos(mπ(η - z_s))`. Each `g_m` is one horizontal
//! mode solve with a point source, zero loop fluxes and (for `m = 0`) zero
//! mean. The cylinder kernel is `G(η) = G_per(η) + G_per(-η)`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use dashmap::DashMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::elliptic::Elliptic;
use crate::error::{QgError, Result};
use crate::field::{CirculationData, Repr, ScalarField3, VectorField3};
use crate::geometry::{Grid, NodeTag};
use crate::solver::lambda;
use crate::vertical::CosineBasis;

/// Free-space fundamental solution of the 3D Laplacian, `-1 / (4π r)`.
pub fn fundamental(source: [f64; 3], target: [f64; 3]) -> Result<f64> {
    let r = ((source[0] - target[0]).powi(2)
        + (source[1] - target[1]).powi(2)
        + (source[2] - target[2]).powi(2))
    .sqrt();
    if r == 0.0 {
        return Err(QgError::Singularity(source));
    }
    Ok(-1.0 / (4.0 * std::f64::consts::PI * r))
}

/// Horizontal mode responses for one source node.
#[derive(Debug)]
struct SourceModes {
    /// `g[m]`: plane array of the periodic kernel's mode `m`.
    g: Vec<Vec<f64>>,
    /// Uniform multiplier of each mode solve.
    mu: Vec<f64>,
}

impl SourceModes {
    fn bytes(&self) -> usize {
        self.g.iter().map(|v| v.len() * 8).sum()
    }
}

/// A source point: horizontal node index and level index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Source {
    pub node: usize,
    pub level: usize,
}

/// Cylinder kernel sampled on the grid.
#[derive(Clone, Debug)]
pub struct GreensKernel {
    pub source: Source,
    /// `G(ξ, η)` on every node and level; boundary nodes hold loop values.
    pub values: ScalarField3,
}

/// Periodic kernel on the doubled interval, levels `η_j = -1 + j / N`.
#[derive(Clone, Debug)]
pub struct PeriodicKernel {
    pub source: Source,
    pub levels: Vec<f64>,
    /// `values[j][n]`.
    pub values: Vec<Vec<f64>>,
}

/// Diagnostics of the corrector `φ = Φ - G_per`.
#[derive(Clone, Debug)]
pub struct CorrectorReport {
    /// Largest deviation of the discrete `Δ₃ φ` from `1/|Ω̃|` away from the
    /// source, with `ΔΦ = 0` taken analytically and the discrete uniform
    /// multiplier accounted for.
    pub pde_deviation: f64,
    pub target_value: f64,
    /// Largest uniform multiplier of the mode solves; it vanishes with `h`.
    pub multiplier: f64,
    /// Largest spread of `φ - Φ` along any loop at any level.
    pub trace_spread: f64,
    /// `max |(φ - Φ)(η = -1) - (φ - Φ)(η = 1)|`, with `η = 1` reached by
    /// periodic wrap-around.
    pub periodicity_gap: f64,
    /// Largest `|∮ ∂(φ - Φ)/∂n|` over loops and levels.
    pub flux_gap: f64,
    /// `|mean(φ - Φ)|` over the doubled domain.
    pub mean_gap: f64,
}

/// Diagnostics of a cylinder kernel.
#[derive(Clone, Debug)]
pub struct KernelReport {
    pub trace_spread: f64,
    pub max_loop_flux: f64,
    pub mean: f64,
    /// Centred vertical difference at `η = 0` using the reflected level.
    pub neumann_centered: f64,
    /// Second-order one-sided vertical derivative at `η = 0` and `η = 1`.
    pub neumann_one_sided: f64,
}

/// One sampled (source, target) pair of an estimate report.
#[derive(Clone, Copy, Debug)]
pub struct EstimateSample {
    pub r: f64,
    pub g: f64,
    pub grad: f64,
    pub hess: f64,
}

#[derive(Clone, Debug)]
pub struct EstimateReport {
    pub sup_g_r: f64,
    pub sup_grad_r2: f64,
    pub sup_hess_r3: f64,
    pub exclusion_radius: f64,
    pub samples: Vec<EstimateSample>,
}

impl EstimateReport {
    /// Fitted constants of the three power-law bounds.
    pub fn constants(&self) -> [f64; 3] {
        [self.sup_g_r, self.sup_grad_r2, self.sup_hess_r3]
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "r,abs_g,abs_grad_g,abs_hess_g,g_r,grad_r2,hess_r3")?;
        for s in &self.samples {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.r,
                s.g,
                s.grad,
                s.hess,
                s.g * s.r,
                s.grad * s.r * s.r,
                s.hess * s.r.powi(3)
            )?;
        }
        Ok(())
    }
}

/// One source pair of the quasi-Lipschitz report.
#[derive(Clone, Copy, Debug)]
pub struct QuasiLipschitzSample {
    pub a: Source,
    pub b: Source,
    pub d: f64,
    pub integral: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug)]
pub struct QuasiLipschitzReport {
    pub samples: Vec<QuasiLipschitzSample>,
}

impl QuasiLipschitzReport {
    pub fn max_ratio(&self) -> f64 {
        self.samples.iter().map(|s| s.ratio).fold(0.0, f64::max)
    }

    /// Least-squares slope of the ratio against `log(1/d)`.
    pub fn slope(&self) -> f64 {
        let xs: Vec<f64> = self.samples.iter().map(|s| (1.0 / s.d).ln()).collect();
        let ys: Vec<f64> = self.samples.iter().map(|s| s.ratio).collect();
        least_squares_slope(&xs, &ys)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "d,integral,lambda,ratio")?;
        for s in &self.samples {
            writeln!(w, "{},{},{},{}", s.d, s.integral, lambda(s.d), s.ratio)?;
        }
        Ok(())
    }
}

pub(crate) fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Kernel factory with a concurrent per-source cache.
pub struct Greens {
    ell: Arc<Elliptic>,
    cache: DashMap<usize, Arc<SourceModes>>,
    budget: usize,
    used: AtomicUsize,
}

impl std::fmt::Debug for Greens {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Greens")
            .field("cached", &self.cache.len())
            .field("bytes", &self.used.load(Ordering::Relaxed))
            .finish()
    }
}

impl Greens {
    /// `budget` caps the bytes of cached kernels; later kernels are computed
    /// on demand without being stored.
    pub fn new(ell: Arc<Elliptic>, budget: usize) -> Self {
        Self {
            ell,
            cache: DashMap::new(),
            budget,
            used: AtomicUsize::new(0),
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.ell.grid()
    }

    pub fn elliptic(&self) -> &Arc<Elliptic> {
        &self.ell
    }

    pub fn cached_sources(&self) -> usize {
        self.cache.len()
    }

    fn check_source(&self, s: Source) -> Result<()> {
        let g = self.grid();
        if s.node >= g.plane_len() || g.tags[s.node] != NodeTag::Interior || s.level >= g.nz {
            return Err(QgError::Domain(format!(
                "source {s:?} is not an interior node"
            )));
        }
        Ok(())
    }

    fn modes(&self, node: usize) -> Result<Arc<SourceModes>> {
        if let Some(m) = self.cache.get(&node) {
            return Ok(m.clone());
        }
        let g = self.grid();
        let nz = g.nz;
        let h2 = g.cell_area();
        let area = g.discrete_area();
        let nl = g.num_loops();
        let zero_c = vec![0.0; nl];
        let mut unit = vec![0.0; g.plane_len()];
        unit[node] = 1.0 / h2;
        let mut g0 = vec![0.0; g.plane_len()];
        for &n in g.interior() {
            g0[n] = 0.5 * (unit[n] - 1.0 / area);
        }
        let mut out = Vec::with_capacity(nz);
        let mut mu = Vec::with_capacity(nz);
        for m in 0..nz {
            let sol = if m == 0 {
                self.ell.solve_mode(0, &g0, &zero_c)?
            } else {
                let scale = if m == nz - 1 { 0.5 } else { 1.0 };
                let mut s = self.ell.solve_mode(m, &unit, &zero_c)?;
                if scale != 1.0 {
                    s.psi.iter_mut().for_each(|v| *v *= scale);
                    s.mu *= scale;
                }
                s
            };
            out.push(sol.psi);
            mu.push(sol.mu);
        }
        let modes = Arc::new(SourceModes { g: out, mu });
        let bytes = modes.bytes();
        if self.used.load(Ordering::Relaxed) + bytes <= self.budget {
            self.used.fetch_add(bytes, Ordering::Relaxed);
            self.cache.insert(node, modes.clone());
        }
        Ok(modes)
    }

    /// Cosine coefficients in `η` of the cylinder kernel: `2 g_k cos(kπ z_s)`.
    fn kernel_modes(&self, s: Source) -> Result<Vec<Vec<f64>>> {
        let m = self.modes(s.node)?;
        let basis = self.ell.basis();
        Ok(m.g
            .iter()
            .enumerate()
            .map(|(k, gk)| {
                let c = 2.0 * basis.cos(k, s.level);
                gk.iter().map(|v| c * v).collect()
            })
            .collect())
    }

    /// Reflected kernel `G(ξ, η) = G_per(ξ, η) + G_per(ξ, -η)`.
    pub fn greens_at(&self, s: Source) -> Result<GreensKernel> {
        self.check_source(s)?;
        let g = self.grid();
        let vals: Vec<f64> = self.kernel_modes(s)?.concat();
        let values = ScalarField3::from_values(g, vals, Repr::Mode)?.to_physical();
        Ok(GreensKernel { source: s, values })
    }

    /// Periodic kernel on the doubled interval.
    pub fn periodic_at(&self, s: Source) -> Result<PeriodicKernel> {
        self.check_source(s)?;
        let g = self.grid();
        let n = g.nz - 1;
        let m = self.modes(s.node)?;
        let levels: Vec<f64> = (0..2 * n).map(|j| -1.0 + j as f64 / n as f64).collect();
        let values = (0..2 * n)
            .map(|j| {
                // η_j - z_s in units of 1/N
                let off = (j as isize - n as isize - s.level as isize).rem_euclid(2 * n as isize)
                    as usize;
                let mut row = vec![0.0; g.plane_len()];
                for (k, gk) in m.g.iter().enumerate() {
                    let c = periodic_cos(k, off, n);
                    for (r, v) in row.iter_mut().zip(gk) {
                        *r += c * v;
                    }
                }
                row
            })
            .collect();
        Ok(PeriodicKernel {
            source: s,
            levels,
            values,
        })
    }

    /// Checks on the corrector `φ = Φ - G_per` of one source.
    pub fn corrector(&self, s: Source) -> Result<CorrectorReport> {
        let per = self.periodic_at(s)?;
        let g = self.grid();
        let n = g.nz - 1;
        let m = self.modes(s.node)?;
        let h2 = g.cell_area();
        let target = 1.0 / (2.0 * g.discrete_area());
        // φ - Φ = -G_per; the discrete Laplacian of G_per is applied mode by
        // mode, where it is exact.
        let mut dev = 0.0f64;
        let src = g.node_xy(s.node);
        for (k, gk) in m.g.iter().enumerate() {
            let lap = self.ell.mode_operator(k, gk);
            for (c, &i) in g.interior().iter().enumerate() {
                let p = g.node_xy(i);
                if (p[0] - src[0]).hypot(p[1] - src[1]) < 2.0 * g.h {
                    continue;
                }
                // mode k of Δ₃ φ = -(Δ_h - κ²) g_k, expected 1/|Ω̃| in mode 0
                let want = if k == 0 { target } else { 0.0 } - m.mu[k];
                dev = dev.max((lap[c] / h2 - want).abs());
            }
        }
        let mut spread = 0.0f64;
        let mut flux = 0.0f64;
        let mut total = 0.0;
        for row in &per.values {
            let neg: Vec<f64> = row.iter().map(|v| -v).collect();
            for l in 0..g.num_loops() {
                let (lo, hi) = g
                    .boundary_nodes(l)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), i| {
                        (a.min(neg[i]), b.max(neg[i]))
                    });
                spread = spread.max(hi - lo);
            }
            for f in self.ell.loop_fluxes(&neg) {
                flux = flux.max(f.abs());
            }
            total += g.interior().iter().map(|&i| neg[i]).sum::<f64>() * h2 / n as f64;
        }
        // η = -1 is the first stored level; η = +1 wraps onto it, so compare
        // the series evaluated directly at η = 1.
        let mut gap = 0.0f64;
        for (i, v) in per.values[0].iter().enumerate() {
            let top: f64 =
                m.g.iter()
                    .enumerate()
                    .map(|(k, gk)| {
                        gk[i] * (k as f64 * std::f64::consts::PI * (1.0 - g.z(s.level))).cos()
                    })
                    .sum();
            gap = gap.max((v - top).abs());
        }
        Ok(CorrectorReport {
            pde_deviation: dev,
            target_value: target,
            multiplier: m.mu.iter().fold(0.0, |a, v| a.max(v.abs())),
            trace_spread: spread,
            periodicity_gap: gap,
            flux_gap: flux,
            mean_gap: (total / (2.0 * g.discrete_area())).abs(),
        })
    }

    /// Discrete checks of the reflected kernel's boundary conditions.
    pub fn kernel_report(&self, kern: &GreensKernel) -> KernelReport {
        let g = self.grid();
        let v = &kern.values;
        let mut flux = 0.0f64;
        for k in 0..g.nz {
            for f in self.ell.loop_fluxes(v.level(k)) {
                flux = flux.max(f.abs());
            }
        }
        let dz = g.dz();
        let nz = g.nz;
        let mut centered = 0.0f64;
        let mut one_sided = 0.0f64;
        for &n in g.interior() {
            // reflected level η = -dz equals η = dz
            centered = centered.max(((v.get(n, 1) - v.get(n, 1)) / (2.0 * dz)).abs());
            if nz >= 3 {
                let b = (-3.0 * v.get(n, 0) + 4.0 * v.get(n, 1) - v.get(n, 2)) / (2.0 * dz);
                let t = (3.0 * v.get(n, nz - 1) - 4.0 * v.get(n, nz - 2) + v.get(n, nz - 3))
                    / (2.0 * dz);
                one_sided = one_sided.max(b.abs()).max(t.abs());
            }
        }
        KernelReport {
            trace_spread: self.ell.trace_spread(v),
            max_loop_flux: flux,
            mean: v.mean(),
            neumann_centered: centered,
            neumann_one_sided: one_sided,
        }
    }

    /// Power-law estimates over every admissible target of each source.
    pub fn estimate_report(&self, sources: &[Source]) -> Result<EstimateReport> {
        let g = self.grid().clone();
        let (h, dz) = (g.h, g.dz());
        let excl = 2.0 * h.max(dz);
        let kernels: Vec<GreensKernel> = sources
            .par_iter()
            .map(|&s| self.greens_at(s))
            .collect::<Result<_>>()?;
        let nx = g.nx as isize;
        let stencil_ok = |n: usize| {
            (-1isize..=1).all(|dj| {
                (-1isize..=1)
                    .all(|di| g.tags[(n as isize + dj * nx + di) as usize] == NodeTag::Interior)
            })
        };
        let mut samples = Vec::new();
        for kern in &kernels {
            let v = &kern.values;
            let sp = g.node_xy(kern.source.node);
            let sz = g.z(kern.source.level);
            let at = |n: usize, k: isize| -> f64 {
                // reflect across η = 0 and η = 1
                let kk = if k < 0 {
                    -k
                } else if k >= g.nz as isize {
                    2 * (g.nz as isize - 1) - k
                } else {
                    k
                };
                v.get(n, kk as usize)
            };
            for &n in g.interior() {
                if !stencil_ok(n) {
                    continue;
                }
                let p = g.node_xy(n);
                for k in 0..g.nz {
                    let r =
                        ((p[0] - sp[0]).powi(2) + (p[1] - sp[1]).powi(2) + (g.z(k) - sz).powi(2))
                            .sqrt();
                    if r < excl {
                        continue;
                    }
                    let ki = k as isize;
                    let e = n + 1;
                    let w = n - 1;
                    let nn = n + g.nx;
                    let s_ = n - g.nx;
                    let c = at(n, ki);
                    let gx = (at(e, ki) - at(w, ki)) / (2.0 * h);
                    let gy = (at(nn, ki) - at(s_, ki)) / (2.0 * h);
                    let gz = (at(n, ki + 1) - at(n, ki - 1)) / (2.0 * dz);
                    let gxx = (at(e, ki) - 2.0 * c + at(w, ki)) / (h * h);
                    let gyy = (at(nn, ki) - 2.0 * c + at(s_, ki)) / (h * h);
                    let gzz = (at(n, ki + 1) - 2.0 * c + at(n, ki - 1)) / (dz * dz);
                    let gxy = (at(nn + 1, ki) - at(nn - 1, ki) - at(s_ + 1, ki) + at(s_ - 1, ki))
                        / (4.0 * h * h);
                    let gxz = (at(e, ki + 1) - at(e, ki - 1) - at(w, ki + 1) + at(w, ki - 1))
                        / (4.0 * h * dz);
                    let gyz = (at(nn, ki + 1) - at(nn, ki - 1) - at(s_, ki + 1) + at(s_, ki - 1))
                        / (4.0 * h * dz);
                    let grad = (gx * gx + gy * gy + gz * gz).sqrt();
                    let hess = (gxx * gxx
                        + gyy * gyy
                        + gzz * gzz
                        + 2.0 * (gxy * gxy + gxz * gxz + gyz * gyz))
                        .sqrt();
                    samples.push(EstimateSample {
                        r,
                        g: c.abs(),
                        grad,
                        hess,
                    });
                }
            }
        }
        let sup = |f: &dyn Fn(&EstimateSample) -> f64| samples.iter().map(f).fold(0.0, f64::max);
        Ok(EstimateReport {
            sup_g_r: sup(&|s| s.g * s.r),
            sup_grad_r2: sup(&|s| s.grad * s.r * s.r),
            sup_hess_r3: sup(&|s| s.hess * s.r.powi(3)),
            exclusion_radius: excl,
            samples,
        })
    }

    /// Cosine coefficients of the source-gradient `D_{x,z} G` for one source:
    /// three component arrays per mode.
    fn source_gradient_modes(&self, s: Source) -> Result<[Vec<Vec<f64>>; 3]> {
        let g = self.grid();
        let h = g.h;
        let nx = g.nx;
        let side = |off: isize| -> Option<usize> {
            let m = (s.node as isize + off) as usize;
            (g.tags[m] == NodeTag::Interior).then_some(m)
        };
        let kernel_at = |node: usize| {
            self.kernel_modes(Source {
                node,
                level: s.level,
            })
        };
        let diff = |plus: Option<usize>, minus: Option<usize>| -> Result<Vec<Vec<f64>>> {
            let (a, b, span) = match (plus, minus) {
                (Some(p), Some(m)) => (kernel_at(p)?, kernel_at(m)?, 2.0 * h),
                (Some(p), None) => (kernel_at(p)?, kernel_at(s.node)?, h),
                (None, Some(m)) => (kernel_at(s.node)?, kernel_at(m)?, h),
                (None, None) => {
                    return Err(QgError::Domain(format!(
                        "source {s:?} has no interior neighbour"
                    )))
                }
            };
            Ok(a.iter()
                .zip(&b)
                .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v) / span).collect())
                .collect())
        };
        let dx = diff(side(1), side(-1))?;
        let dy = diff(side(nx as isize), side(-(nx as isize)))?;
        let m = self.modes(s.node)?;
        let zs = g.z(s.level);
        let dz = g.dz();
        let dzs: Vec<Vec<f64>> =
            m.g.iter()
                .enumerate()
                .map(|(k, gk)| {
                    // centred difference in z_s, matching the horizontal ones
                    let kp = k as f64 * std::f64::consts::PI;
                    let c = -2.0 * (kp * dz).sin() / dz * (kp * zs).sin();
                    gk.iter().map(|v| c * v).collect()
                })
                .collect();
        Ok([dx, dy, dzs])
    }

    /// `∫_Ω |D G^{a} - D G^{b}|` divided by `λ(d)` for each pair.
    pub fn quasi_lipschitz_report(
        &self,
        pairs: &[(Source, Source)],
    ) -> Result<QuasiLipschitzReport> {
        let g = self.grid().clone();
        let basis = CosineBasis::new(g.nz);
        let samples = pairs
            .par_iter()
            .map(|&(a, b)| {
                self.check_source(a)?;
                self.check_source(b)?;
                let pa = g.node_xy(a.node);
                let pb = g.node_xy(b.node);
                let d = ((pa[0] - pb[0]).powi(2)
                    + (pa[1] - pb[1]).powi(2)
                    + (g.z(a.level) - g.z(b.level)).powi(2))
                .sqrt();
                if d == 0.0 {
                    return Err(QgError::Domain("coincident source pair".into()));
                }
                let da = self.source_gradient_modes(a)?;
                let db = self.source_gradient_modes(b)?;
                // difference in physical space, component by component
                let plane = g.plane_len();
                let mut phys = vec![vec![0.0; plane * g.nz]; 3];
                let mut col = vec![0.0; g.nz];
                let mut out = vec![0.0; g.nz];
                for c in 0..3 {
                    for &n in g.interior() {
                        for k in 0..g.nz {
                            col[k] = da[c][k][n] - db[c][k][n];
                        }
                        basis.inverse(&col, &mut out);
                        for k in 0..g.nz {
                            phys[c][k * plane + n] = out[k];
                        }
                    }
                }
                let mut integral = 0.0;
                for k in 0..g.nz {
                    let w = basis.level_weight(k);
                    for &n in g.interior() {
                        let i = k * plane + n;
                        let mag =
                            (phys[0][i].powi(2) + phys[1][i].powi(2) + phys[2][i].powi(2)).sqrt();
                        integral += w * mag;
                    }
                }
                integral *= g.cell_area();
                Ok(QuasiLipschitzSample {
                    a,
                    b,
                    d,
                    integral,
                    ratio: integral / lambda(d),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QuasiLipschitzReport { samples })
    }

    /// Random source pairs with separations log-uniform in `[d_min, d_max]`.
    pub fn random_pairs(
        &self,
        count: usize,
        d_min: f64,
        d_max: f64,
        seed: u64,
    ) -> Vec<(Source, Source)> {
        let g = self.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nx = g.nx as isize;
        let usable: Vec<usize> = g
            .interior()
            .iter()
            .copied()
            .filter(|&n| {
                [1isize, -1, nx, -nx]
                    .iter()
                    .all(|&o| g.tags[(n as isize + o) as usize] == NodeTag::Interior)
            })
            .collect();
        let mut pairs = Vec::with_capacity(count);
        let mut guard = 0;
        while pairs.len() < count && guard < 10_000 * count.max(1) {
            guard += 1;
            let a = Source {
                node: usable[rng.gen_range(0..usable.len())],
                level: rng.gen_range(0..g.nz),
            };
            let target = (d_min.ln() + rng.gen::<f64>() * (d_max / d_min).ln()).exp();
            let theta = rng.gen::<f64>() * std::f64::consts::TAU;
            let phi = (rng.gen::<f64>() * 2.0 - 1.0).acos();
            let pa = g.node_xy(a.node);
            let want = [
                pa[0] + target * phi.sin() * theta.cos(),
                pa[1] + target * phi.sin() * theta.sin(),
                g.z(a.level) + target * phi.cos(),
            ];
            let Some((i, j, fx, fy)) = g.cell_of([want[0], want[1]]) else {
                continue;
            };
            let node = g.idx(i + usize::from(fx > 0.5), j + usize::from(fy > 0.5));
            if !usable.contains(&node) {
                continue;
            }
            let level = (want[2] / g.dz()).round();
            if level < 0.0 || level > (g.nz - 1) as f64 {
                continue;
            }
            let b = Source {
                node,
                level: level as usize,
            };
            let pb = g.node_xy(b.node);
            let d = ((pa[0] - pb[0]).powi(2)
                + (pa[1] - pb[1]).powi(2)
                + (g.z(a.level) - g.z(b.level)).powi(2))
            .sqrt();
            if d >= d_min * 0.999 && d <= d_max * 1.001 {
                pairs.push((a, b));
            }
        }
        pairs
    }

    /// Velocity from the Green's representation
    /// `ψ(x) = ∫ G^{x} q - Σ_l ∫ G^{x}|_{Γ_l} c_l dη`, differentiated in the
    /// source point. Boundary nodes get the average of their interior
    /// neighbours.
    pub fn velocity_via_green(
        &self,
        q: &ScalarField3,
        c: &CirculationData,
    ) -> Result<VectorField3> {
        let g = self.grid().clone();
        let q = if q.repr() == Repr::Mode {
            q.to_physical()
        } else {
            q.clone()
        };
        let plane = g.plane_len();
        let basis = CosineBasis::new(g.nz);
        let h2 = g.cell_area();
        // psi at every interior source point
        let sources: Vec<Source> = g
            .interior()
            .iter()
            .flat_map(|&node| (0..g.nz).map(move |level| Source { node, level }))
            .collect();
        let values: Vec<(Source, f64)> = sources
            .par_iter()
            .map(|&s| {
                let kern = self.greens_at(s)?;
                let mut acc = 0.0;
                for k in 0..g.nz {
                    let w = basis.level_weight(k);
                    let (kl, ql) = (kern.values.level(k), q.level(k));
                    acc += w * h2 * g.interior().iter().map(|&n| kl[n] * ql[n]).sum::<f64>();
                    for (l, cl) in c.c.iter().enumerate() {
                        let gl = g.boundary_nodes(l).next().map_or(0.0, |n| kl[n]);
                        acc -= w * gl * cl[k];
                    }
                }
                Ok((s, acc))
            })
            .collect::<Result<_>>()?;
        let mut psi = vec![0.0; plane * g.nz];
        for (s, v) in values {
            psi[s.level * plane + s.node] = v;
        }
        let mut out = VectorField3::zeros(&g);
        let h = g.h;
        let nx = g.nx as isize;
        let deriv = |n: usize, k: usize, off: isize| -> f64 {
            let p = (n as isize + off) as usize;
            let m = (n as isize - off) as usize;
            let (ip, im) = (
                g.tags[p] == NodeTag::Interior,
                g.tags[m] == NodeTag::Interior,
            );
            let at = |i: usize| psi[k * plane + i];
            match (ip, im) {
                (true, true) => (at(p) - at(m)) / (2.0 * h),
                (true, false) => (at(p) - at(n)) / h,
                (false, true) => (at(n) - at(m)) / h,
                (false, false) => 0.0,
            }
        };
        for k in 0..g.nz {
            for &n in g.interior() {
                out.u[k * plane + n] = -deriv(n, k, nx);
                out.v[k * plane + n] = deriv(n, k, 1);
            }
        }
        for k in 0..g.nz {
            for n in 0..plane {
                if g.tags[n] != NodeTag::Boundary {
                    continue;
                }
                let nbs: Vec<usize> = (-1isize..=1)
                    .flat_map(|dj| (-1isize..=1).map(move |di| (di, dj)))
                    .filter_map(|(di, dj)| g.neighbor(n, di, dj))
                    .filter(|&m| g.tags[m] == NodeTag::Interior)
                    .collect();
                if !nbs.is_empty() {
                    let cnt = nbs.len() as f64;
                    out.u[k * plane + n] =
                        nbs.iter().map(|&m| out.u[k * plane + m]).sum::<f64>() / cnt;
                    out.v[k * plane + n] =
                        nbs.iter().map(|&m| out.v[k * plane + m]).sum::<f64>() / cnt;
                }
            }
        }
        Ok(out)
    }
}

/// `cos(kπ · off / N)` by exact integer reduction.
fn periodic_cos(k: usize, off: usize, n: usize) -> f64 {
    let m = (k * off) % (2 * n);
    (std::f64::consts::PI * m as f64 / n as f64).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elliptic::EllipticOptions;
    use crate::geometry::{build_domain, discretize, DomainSpec};

    fn setup(spec: DomainSpec, n: usize, nz: usize) -> Greens {
        let cyl = build_domain(&spec).unwrap();
        let grid = Arc::new(discretize(&cyl, n, n, nz).unwrap());
        let ell = Arc::new(Elliptic::new(grid, EllipticOptions::default()));
        Greens::new(ell, 1 << 28)
    }

    fn middle_source(gr: &Greens, level: usize) -> Source {
        let g = gr.grid();
        let want = [1.5, 0.1];
        let node = *g
            .interior()
            .iter()
            .min_by(|&&a, &&b| {
                let (pa, pb) = (g.node_xy(a), g.node_xy(b));
                let da = (pa[0] - want[0]).hypot(pa[1] - want[1]);
                let db = (pb[0] - want[0]).hypot(pb[1] - want[1]);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        Source { node, level }
    }

    #[test]
    fn fundamental_values() {
        let v = fundamental([0.0; 3], [0.0, 0.0, 1.0]).unwrap();
        assert!((v + 1.0 / (4.0 * std::f64::consts::PI)).abs() < 1e-16);
        let v = fundamental([1.0, 2.0, 0.0], [1.0, 2.0, 0.5]).unwrap();
        assert!((v + 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-15);
        assert!(matches!(
            fundamental([0.3; 3], [0.3; 3]),
            Err(QgError::Singularity(_))
        ));
    }

    #[test]
    fn fundamental_is_discretely_harmonic_away_from_source() {
        let h = 1e-2;
        let p = [0.7, -0.4, 0.3];
        let f = |q: [f64; 3]| fundamental([0.0; 3], q).unwrap();
        let mut lap = -6.0 * f(p);
        for d in 0..3 {
            let mut a = p;
            let mut b = p;
            a[d] += h;
            b[d] -= h;
            lap += f(a) + f(b);
        }
        assert!((lap / (h * h)).abs() < 1e-3);
    }

    #[test]
    fn reflection_equals_direct_solve() {
        let gr = setup(DomainSpec::annulus(1.0, 2.0), 20, 5);
        let g = gr.grid().clone();
        for level in [0, 2, 4] {
            let s = middle_source(&gr, level);
            let kern = gr.greens_at(s).unwrap();
            let w = gr.elliptic().basis().level_weight(level);
            let vol = g.discrete_area();
            let mut q = ScalarField3::from_fn(&g, |_, _, _| -1.0 / vol);
            q.set(s.node, level, 1.0 / (g.cell_area() * w) - 1.0 / vol);
            let c = CirculationData::zeros(g.num_loops(), g.nz);
            let inv = gr.elliptic().invert_pv(&q, &c).unwrap();
            let scale = kern.values.max_abs();
            let mut worst = 0.0f64;
            for k in 0..g.nz {
                for &n in g.interior() {
                    worst = worst.max((inv.psi.get(n, k) - kern.values.get(n, k)).abs());
                }
            }
            assert!(worst <= 1e-10 * scale, "level {level}: {worst} vs {scale}");
        }
    }

    #[test]
    fn kernel_satisfies_boundary_conditions() {
        let gr = setup(DomainSpec::square_with_hole(), 22, 6);
        let s = Source {
            node: gr.grid().interior()[40],
            level: 2,
        };
        let kern = gr.greens_at(s).unwrap();
        let rep = gr.kernel_report(&kern);
        let scale = kern.values.max_abs();
        assert!(rep.trace_spread <= 1e-12 * scale, "{rep:?}");
        assert!(rep.max_loop_flux <= 1e-9 * scale, "{rep:?}");
        assert!(rep.mean.abs() <= 1e-12 * scale, "{rep:?}");
        assert_eq!(rep.neumann_centered, 0.0);
        assert!(rep.neumann_one_sided.is_finite());
    }

    #[test]
    fn corrector_checks() {
        let gr = setup(DomainSpec::annulus(1.0, 2.0), 20, 5);
        let rep = gr.corrector(middle_source(&gr, 1)).unwrap();
        assert!(rep.pde_deviation <= 1e-8 * rep.target_value, "{rep:?}");
        assert!(rep.multiplier <= 0.1 * rep.target_value, "{rep:?}");
        assert!(rep.trace_spread <= 1e-12, "{rep:?}");
        assert!(rep.periodicity_gap <= 1e-12, "{rep:?}");
        assert!(rep.flux_gap <= 1e-10, "{rep:?}");
        assert!(rep.mean_gap <= 1e-12, "{rep:?}");
    }

    fn nearest(gr: &Greens, p: [f64; 3]) -> Source {
        let g = gr.grid();
        let node = *g
            .interior()
            .iter()
            .min_by(|&&a, &&b| {
                let (pa, pb) = (g.node_xy(a), g.node_xy(b));
                let da = (pa[0] - p[0]).hypot(pa[1] - p[1]);
                let db = (pb[0] - p[0]).hypot(pb[1] - p[1]);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        Source {
            node,
            level: (p[2] / g.dz()).round() as usize,
        }
    }

    fn asymmetry(n: usize) -> f64 {
        let gr = setup(DomainSpec::annulus(1.0, 2.0), n, 5);
        let a = nearest(&gr, [1.5, 0.1, 0.25]);
        let b = nearest(&gr, [-1.1, 0.9, 0.75]);
        let ab = gr.greens_at(a).unwrap().values.get(b.node, b.level);
        let ba = gr.greens_at(b).unwrap().values.get(a.node, a.level);
        (ab - ba).abs() / ab.abs().max(ba.abs())
    }

    #[test]
    fn kernel_symmetry_improves_with_resolution() {
        let (coarse, fine) = (asymmetry(24), asymmetry(48));
        assert!(coarse < 0.15 && fine < coarse, "{coarse} {fine}");
    }

    #[test]
    fn estimates_are_finite() {
        let gr = setup(DomainSpec::annulus(1.0, 2.0), 20, 5);
        let s = [middle_source(&gr, 0), middle_source(&gr, 2)];
        let rep = gr.estimate_report(&s).unwrap();
        assert!(!rep.samples.is_empty());
        assert!(rep.samples.iter().all(|s| s.r >= rep.exclusion_radius));
        for c in rep.constants() {
            assert!(c.is_finite() && c > 0.0);
        }
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("r,abs_g"));
    }

    #[test]
    fn quasi_lipschitz_small_run() {
        let gr = setup(DomainSpec::annulus(1.0, 2.0), 20, 5);
        let pairs = gr.random_pairs(12, gr.grid().h, 1.0, 7);
        assert_eq!(pairs.len(), 12);
        let rep = gr.quasi_lipschitz_report(&pairs).unwrap();
        assert!(rep
            .samples
            .iter()
            .all(|s| s.ratio.is_finite() && s.ratio > 0.0));
        assert!(rep.slope().is_finite());
    }

    #[test]
    fn slope_of_exact_line() {
        assert!((least_squares_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_data_gives_zero_velocity() {
        let gr = setup(DomainSpec::annulus(1.0, 2.0), 16, 3);
        let g = gr.grid().clone();
        let q = ScalarField3::zeros(&g);
        let c = CirculationData::zeros(g.num_loops(), g.nz);
        let u = gr.velocity_via_green(&q, &c).unwrap();
        assert_eq!(u.max_abs(), 0.0);
    }

    #[test]
    fn blob_circulation_matches_total_vorticity() {
        let gr = setup(DomainSpec::annulus(1.0, 2.0), 48, 3);
        let g = gr.grid().clone();
        let (cx, cy, rad) = (1.5, 0.0, 0.2);
        let q = ScalarField3::from_fn(&g, |x, y, _| {
            let r2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (rad * rad);
            if r2 < 1.0 {
                (1.0 - r2).powi(2)
            } else {
                0.0
            }
        });
        let total = q.integral();
        let mut c = CirculationData::zeros(g.num_loops(), g.nz);
        for k in 0..g.nz {
            c.c[0][k] = total;
        }
        let u = gr.velocity_via_green(&q, &c).unwrap();
        let direct = gr
            .elliptic()
            .velocity(&gr.elliptic().invert_pv(&q, &c).unwrap().psi);
        // circulation on a circle of radius 0.4 around the blob
        let m = 400;
        let mut circ = 0.0;
        let mut circ_direct = 0.0;
        for i in 0..m {
            let t = std::f64::consts::TAU * i as f64 / m as f64;
            let p = [cx + 0.3 * t.cos(), cy + 0.3 * t.sin()];
            let tang = [-t.sin(), t.cos()];
            let ds = 0.3 * std::f64::consts::TAU / m as f64;
            let (ua, va) = bilinear(&g, &u, p);
            let (ub, vb) = bilinear(&g, &direct, p);
            circ += (ua * tang[0] + va * tang[1]) * ds;
            circ_direct += (ub * tang[0] + vb * tang[1]) * ds;
        }
        assert!((circ - total).abs() < 0.02 * total, "{circ} vs {total}");
        assert!(
            (circ - circ_direct).abs() < 0.02 * total,
            "{circ} vs {circ_direct}"
        );
    }

    fn bilinear(g: &Grid, u: &VectorField3, p: [f64; 2]) -> (f64, f64) {
        let (i, j, fx, fy) = g.cell_of(p).unwrap();
        let n = [
            g.idx(i, j),
            g.idx(i + 1, j),
            g.idx(i, j + 1),
            g.idx(i + 1, j + 1),
        ];
        let w = [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ];
        let mut out = (0.0, 0.0);
        for (a, b) in n.iter().zip(w) {
            out.0 += b * u.u[*a];
            out.1 += b * u.v[*a];
        }
        out
    }
}
