//! Potential-vorticity inversion on the cylinder.
//!
//! The vertical direction is diagonalised by the cosine basis, leaving one
//! horizontal problem `(Δ - (kπ)²) ψ_k = q_k` per mode. Each is discretised
//! with the Shortley–Weller stencil, where links that leave the fluid end on
//! the loop at distance `theta * h` and take the unknown loop constant as their
//! value. The system is bordered by one circulation row per loop and, for
//! mode 0, a zero-mean row together with a uniform source multiplier `mu` that
//! absorbs the quadrature mismatch between the circulation rows and the
//! interior sum of `q`.
//!
//! Circulation rows integrate the normal derivative along each loop with the
//! trapezoid rule in arclength. The derivative at each crossing point comes
//! from a one-sided quadratic through the loop value and the two nodes behind
//! it on the same lattice line.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::banded::{BandLu, GeneralBand};
use crate::error::{QgError, Result};
use crate::field::{CirculationData, Repr, ScalarField3, VectorField3};
use crate::geometry::{Grid, Link, NodeTag, DIRS};
use crate::vertical::CosineBasis;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EllipticOptions {
    /// Relative residual accepted from the linear solve.
    pub solver_tol: f64,
    /// Relative factor of the compatibility tolerance `f (1 + |q|∞ |Ω|)`.
    pub compat_tol: f64,
    /// Normalise every level to zero mean instead of the volume only.
    pub per_level_mean: bool,
}

impl Default for EllipticOptions {
    fn default() -> Self {
        Self {
            solver_tol: 1e-10,
            compat_tol: 1e-8,
            per_level_mean: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompatibilityReport {
    pub compatible: bool,
    pub defect: f64,
    pub tolerance: f64,
}

/// Compare total circulation with the volume integral of `q`.
pub fn check_compatibility(
    q: &ScalarField3,
    c: &CirculationData,
    opts: &EllipticOptions,
) -> CompatibilityReport {
    let defect = (c.total() - q.integral()).abs();
    let tolerance = opts.compat_tol * (1.0 + q.max_abs() * q.grid().discrete_area());
    CompatibilityReport {
        compatible: defect <= tolerance,
        defect,
        tolerance,
    }
}

/// Split `q` into its volume mean and a zero-mean remainder.
pub fn split_pv(q: &ScalarField3) -> (f64, ScalarField3) {
    let q = if q.repr() == Repr::Mode {
        q.to_physical()
    } else {
        q.clone()
    };
    let m = q.mean();
    (m, q.map(|v| v - m))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Nb {
    Node(usize),
    Loop(usize),
}

/// One horizontal mode solution.
#[derive(Clone, Debug)]
pub struct ModeSolution {
    /// Values on the horizontal plane; boundary nodes carry their loop value.
    pub psi: Vec<f64>,
    /// Loop constants `C_l` for this mode.
    pub consts: Vec<f64>,
    /// Uniform source multiplier (zero unless the mode carries a mean row).
    pub mu: f64,
    /// Relative residual of the stencil rows.
    pub residual: f64,
}

/// Result of a full inversion.
#[derive(Clone, Debug)]
pub struct Inversion {
    pub psi: ScalarField3,
    /// `loop_values[l][k]`: value of ψ on loop `l` at level `k`.
    pub loop_values: Vec<Vec<f64>>,
    /// Multiplier per mode.
    pub mu: Vec<f64>,
    pub max_residual: f64,
}

#[derive(Clone, Debug)]
struct FluxRow {
    loops: Vec<f64>,
    psi: Vec<(usize, f64)>,
}

struct ModeFactor {
    lu: BandLu,
    z: Vec<Vec<f64>>,
    zmu: Option<Vec<f64>>,
    small: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

/// Reusable inversion operator bound to one grid.
pub struct Elliptic {
    grid: Arc<Grid>,
    basis: CosineBasis,
    opts: EllipticOptions,
    stencil: Vec<[(Nb, f64); 4]>,
    diag: Vec<f64>,
    bandwidth: usize,
    flux: Vec<FluxRow>,
    ghost_normal: Vec<Option<[f64; 2]>>,
    /// Extrapolation stencils for the velocity at ghost nodes.
    ghost_fit: Vec<Option<(Vec<usize>, Vec<f64>)>>,
    factors: Vec<OnceLock<std::result::Result<Arc<ModeFactor>, String>>>,
}

impl std::fmt::Debug for Elliptic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Elliptic")
            .field("nz", &self.grid.nz)
            .field("interior", &self.grid.num_interior())
            .field("bandwidth", &self.bandwidth)
            .finish()
    }
}

fn opposite(d: usize) -> usize {
    [1, 0, 3, 2][d]
}

impl Elliptic {
    pub fn new(grid: Arc<Grid>, opts: EllipticOptions) -> Self {
        let n = grid.num_interior();
        let mut stencil = Vec::with_capacity(n);
        let mut diag = Vec::with_capacity(n);
        let mut bandwidth = 0;
        for c in 0..n {
            let links = grid.links(c);
            let mut row = [(Nb::Node(0), 0.0); 4];
            let mut d0 = 0.0;
            for axis in 0..2 {
                let (p, m) = (links[2 * axis], links[2 * axis + 1]);
                let (tp, tm) = (p.distance(), m.distance());
                let cp = 2.0 / (tp * (tp + tm));
                let cm = 2.0 / (tm * (tp + tm));
                for (slot, link, coef) in [(2 * axis, p, cp), (2 * axis + 1, m, cm)] {
                    let nb = match link {
                        Link::Interior(j) => {
                            bandwidth = bandwidth.max(j.abs_diff(c));
                            Nb::Node(j)
                        }
                        Link::Boundary { loop_id, .. } => Nb::Loop(loop_id),
                    };
                    row[slot] = (nb, coef);
                    d0 += coef;
                }
            }
            stencil.push(row);
            diag.push(d0);
        }
        let flux = build_flux_rows(&grid);
        let ghost_normal = ghost_normals(&grid);
        let ghost_fit = (0..grid.plane_len())
            .map(|n| {
                if grid.in_halo(n) {
                    ghost_stencil(&grid, n)
                } else {
                    None
                }
            })
            .collect();
        let factors = (0..grid.nz).map(|_| OnceLock::new()).collect();
        Self {
            basis: CosineBasis::new(grid.nz),
            grid,
            opts,
            stencil,
            diag,
            bandwidth,
            flux,
            ghost_normal,
            ghost_fit,
            factors,
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn options(&self) -> &EllipticOptions {
        &self.opts
    }

    pub fn basis(&self) -> &CosineBasis {
        &self.basis
    }

    fn kappa2(k: usize) -> f64 {
        -CosineBasis::eigenvalue(k)
    }

    fn has_mean_row(&self, k: usize) -> bool {
        k == 0 || self.opts.per_level_mean
    }

    /// Rows of `-h² (Δ_h - κ²)` applied to compact values and loop constants.
    fn apply(&self, k: usize, psi: &[f64], consts: &[f64], out: &mut [f64]) {
        let s = Self::kappa2(k) * self.grid.cell_area();
        for c in 0..psi.len() {
            let mut acc = (self.diag[c] + s) * psi[c];
            for &(nb, coef) in &self.stencil[c] {
                acc -= coef
                    * match nb {
                        Nb::Node(j) => psi[j],
                        Nb::Loop(l) => consts[l],
                    };
            }
            out[c] = acc;
        }
    }

    /// `-h² (Δ_h - κ²)` of a plane array whose boundary nodes hold the loop
    /// values, returned on the interior nodes in compact order.
    pub fn mode_operator(&self, k: usize, plane: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let psi: Vec<f64> = g.interior().iter().map(|&n| plane[n]).collect();
        let consts = self.loop_traces(plane);
        let mut out = vec![0.0; psi.len()];
        self.apply(k, &psi, &consts, &mut out);
        out
    }

    fn flux_of(&self, l: usize, psi: &[f64], consts: &[f64]) -> f64 {
        let row = &self.flux[l];
        row.loops
            .iter()
            .zip(consts)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + row.psi.iter().map(|&(j, w)| w * psi[j]).sum::<f64>()
    }

    fn factor(&self, k: usize) -> Result<Arc<ModeFactor>> {
        self.factors[k]
            .get_or_init(|| {
                self.build_factor(k)
                    .map(Arc::new)
                    .map_err(|e| e.to_string())
            })
            .clone()
            .map_err(|message| QgError::Solver {
                message,
                residual: f64::NAN,
            })
    }

    fn build_factor(&self, k: usize) -> Result<ModeFactor> {
        let n = self.grid.num_interior();
        let nl = self.grid.num_loops();
        let s = Self::kappa2(k) * self.grid.cell_area();
        let mut a = GeneralBand::zeros(n, self.bandwidth.max(1));
        let mut bcols = vec![vec![0.0; n]; nl];
        for c in 0..n {
            a.add(c, c, self.diag[c] + s);
            for &(nb, coef) in &self.stencil[c] {
                match nb {
                    Nb::Node(j) => a.add(c, j, -coef),
                    Nb::Loop(l) => bcols[l][c] -= coef,
                }
            }
        }
        let lu = a.lu()?;
        let z: Vec<Vec<f64>> = bcols
            .into_iter()
            .map(|mut b| {
                lu.solve_in_place(&mut b);
                b
            })
            .collect();
        let with_mu = self.has_mean_row(k);
        let zmu = with_mu.then(|| {
            let mut one = vec![1.0; n];
            lu.solve_in_place(&mut one);
            one
        });
        let dim = nl + usize::from(with_mu);
        let mut m = DMatrix::<f64>::zeros(dim, dim);
        for l in 0..nl {
            let row = &self.flux[l];
            for mm in 0..nl {
                let rz: f64 = row.psi.iter().map(|&(j, w)| w * z[mm][j]).sum();
                m[(l, mm)] = row.loops[mm] - rz;
            }
            if let Some(zm) = &zmu {
                m[(l, nl)] = -row.psi.iter().map(|&(j, w)| w * zm[j]).sum::<f64>();
            }
        }
        if let Some(zm) = &zmu {
            for mm in 0..nl {
                m[(nl, mm)] = -z[mm].iter().sum::<f64>();
            }
            m[(nl, nl)] = -zm.iter().sum::<f64>();
        }
        let small = m.lu();
        if !small.is_invertible() {
            return Err(QgError::Solver {
                message: format!("bordered system for mode {k} is singular"),
                residual: f64::NAN,
            });
        }
        Ok(ModeFactor { lu, z, zmu, small })
    }

    /// Solve one horizontal mode. `q_k` and the returned `psi` are plane
    /// arrays; `c_k` holds one circulation per loop.
    pub fn solve_mode(&self, k: usize, q_k: &[f64], c_k: &[f64]) -> Result<ModeSolution> {
        let g = &self.grid;
        let nl = g.num_loops();
        if c_k.len() != nl {
            return Err(QgError::Domain(format!(
                "expected {nl} circulations, got {}",
                c_k.len()
            )));
        }
        let h2 = g.cell_area();
        let interior = g.interior();
        if k == 0 {
            let total_q: f64 = h2 * interior.iter().map(|&n| q_k[n]).sum::<f64>();
            let qmax = interior.iter().map(|&n| q_k[n].abs()).fold(0.0, f64::max);
            let defect = (c_k.iter().sum::<f64>() - total_q).abs();
            let tolerance = self.opts.compat_tol * (1.0 + qmax * g.discrete_area());
            if defect > tolerance {
                return Err(QgError::Compatibility { defect, tolerance });
            }
        }
        let f = self.factor(k)?;
        let mut y0: Vec<f64> = interior.iter().map(|&n| -h2 * q_k[n]).collect();
        f.lu.solve_in_place(&mut y0);

        let with_mu = f.zmu.is_some();
        let dim = nl + usize::from(with_mu);
        let mut rhs = DVector::<f64>::zeros(dim);
        for l in 0..nl {
            rhs[l] = c_k[l]
                - self.flux[l]
                    .psi
                    .iter()
                    .map(|&(j, w)| w * y0[j])
                    .sum::<f64>();
        }
        if with_mu {
            rhs[nl] = -y0.iter().sum::<f64>();
        }
        let x = f.small.solve(&rhs).ok_or_else(|| QgError::Solver {
            message: format!("bordered system for mode {k} is singular"),
            residual: f64::NAN,
        })?;
        let consts: Vec<f64> = (0..nl).map(|l| x[l]).collect();
        let mu_s = if with_mu { x[nl] } else { 0.0 };
        let mut psi_c = y0;
        for (l, zl) in f.z.iter().enumerate() {
            for (p, zv) in psi_c.iter_mut().zip(zl) {
                *p -= consts[l] * zv;
            }
        }
        if let Some(zm) = &f.zmu {
            for (p, zv) in psi_c.iter_mut().zip(zm) {
                *p -= mu_s * zv;
            }
        }
        let mu = mu_s / h2;

        // residual of the stencil rows and of the circulation rows
        let mut r = vec![0.0; psi_c.len()];
        self.apply(k, &psi_c, &consts, &mut r);
        let mut num = 0.0f64;
        let mut scale = 0.0f64;
        for (c, &n) in interior.iter().enumerate() {
            num = num.max((r[c] + h2 * (q_k[n] + mu)).abs());
            scale = scale
                .max((h2 * q_k[n]).abs())
                .max((self.diag[c] * psi_c[c]).abs());
        }
        for l in 0..nl {
            let fl = self.flux_of(l, &psi_c, &consts);
            num = num.max((fl - c_k[l]).abs());
            scale = scale.max(c_k[l].abs());
        }
        let residual = if scale > 0.0 { num / scale } else { num };
        if !(residual <= self.opts.solver_tol) {
            return Err(QgError::Solver {
                message: format!(
                    "mode {k} residual above tolerance {:.1e}",
                    self.opts.solver_tol
                ),
                residual,
            });
        }

        let mut psi = vec![0.0; g.plane_len()];
        for (c, &n) in interior.iter().enumerate() {
            psi[n] = psi_c[c];
        }
        for n in 0..g.plane_len() {
            if g.tags[n] == NodeTag::Boundary {
                psi[n] = consts[g.loop_id[n].unwrap_or(0)];
            }
        }
        Ok(ModeSolution {
            psi,
            consts,
            mu,
            residual,
        })
    }

    /// Solve the full three-dimensional problem for ψ.
    pub fn invert_pv(&self, q: &ScalarField3, c: &CirculationData) -> Result<Inversion> {
        let g = &self.grid;
        if c.num_loops() != g.num_loops() || c.nz() != g.nz {
            return Err(QgError::Domain(format!(
                "circulation data is {}x{}, grid needs {}x{}",
                c.num_loops(),
                c.nz(),
                g.num_loops(),
                g.nz
            )));
        }
        let report = check_compatibility(q, c, &self.opts);
        if !report.compatible {
            return Err(QgError::Compatibility {
                defect: report.defect,
                tolerance: report.tolerance,
            });
        }
        let qm = if q.repr() == Repr::Mode {
            q.clone()
        } else {
            q.to_modes()
        };
        let cm = c.modes();
        let sols: Vec<ModeSolution> = (0..g.nz)
            .into_par_iter()
            .map(|k| {
                let ck: Vec<f64> = cm.iter().map(|col| col[k]).collect();
                self.solve_mode(k, qm.level(k), &ck)
            })
            .collect::<Result<_>>()?;
        let mut vals = Vec::with_capacity(g.plane_len() * g.nz);
        for s in &sols {
            vals.extend_from_slice(&s.psi);
        }
        let psi = ScalarField3::from_values(g, vals, Repr::Mode)?.to_physical();
        let nl = g.num_loops();
        let loop_values = (0..nl)
            .map(|l| {
                let a: Vec<f64> = sols.iter().map(|s| s.consts[l]).collect();
                let mut v = vec![0.0; g.nz];
                self.basis.inverse(&a, &mut v);
                v
            })
            .collect();
        Ok(Inversion {
            psi,
            loop_values,
            mu: sols.iter().map(|s| s.mu).collect(),
            max_residual: sols.iter().map(|s| s.residual).fold(0.0, f64::max),
        })
    }

    /// Discrete circulation of every loop on one level of a physical field
    /// whose boundary nodes carry the loop values.
    pub fn loop_fluxes(&self, psi_level: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let psi_c: Vec<f64> = g.interior().iter().map(|&n| psi_level[n]).collect();
        let consts = self.loop_traces(psi_level);
        (0..g.num_loops())
            .map(|l| self.flux_of(l, &psi_c, &consts))
            .collect()
    }

    /// Mean of the boundary-node values of each loop.
    fn loop_traces(&self, level: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        (0..g.num_loops())
            .map(|l| {
                let (s, n) = g
                    .boundary_nodes(l)
                    .fold((0.0, 0usize), |(s, n), m| (s + level[m], n + 1));
                s / n.max(1) as f64
            })
            .collect()
    }

    /// Largest spread of boundary-node values within any loop and level.
    pub fn trace_spread(&self, f: &ScalarField3) -> f64 {
        let g = &self.grid;
        let mut worst = 0.0f64;
        for k in 0..g.nz {
            let lvl = f.level(k);
            for l in 0..g.num_loops() {
                let (lo, hi) = g
                    .boundary_nodes(l)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), m| {
                        (a.min(lvl[m]), b.max(lvl[m]))
                    });
                if hi >= lo {
                    worst = worst.max(hi - lo);
                }
            }
        }
        worst
    }

    /// Residual of the discrete operator `Δ_h ψ + ∂_zz ψ - q` on interior
    /// nodes, evaluated in the cosine representation.
    pub fn pde_residual(&self, psi: &ScalarField3, q: &ScalarField3) -> f64 {
        let g = &self.grid;
        let (pm, qm) = (psi.to_modes(), q.to_modes());
        let h2 = g.cell_area();
        let mut out = vec![0.0; g.num_interior()];
        let mut worst = 0.0f64;
        for k in 0..g.nz {
            let lvl = pm.level(k);
            let pc: Vec<f64> = g.interior().iter().map(|&n| lvl[n]).collect();
            let consts = self.loop_traces(lvl);
            self.apply(k, &pc, &consts, &mut out);
            for (c, &n) in g.interior().iter().enumerate() {
                worst = worst.max((-out[c] / h2 - qm.get(n, k)).abs());
            }
        }
        worst
    }

    /// Horizontal skew gradient `(-ψ_y, ψ_x)`.
    ///
    /// On loops where the field is constant (as every inversion output is)
    /// the loop value sits at the crossing point and the boundary velocity is
    /// made tangential. Elsewhere boundary nodes are ordinary samples and the
    /// differences are centred.
    pub fn velocity(&self, psi: &ScalarField3) -> VectorField3 {
        let g = &self.grid;
        let psi = if psi.repr() == Repr::Mode {
            psi.to_physical()
        } else {
            psi.clone()
        };
        let plane = g.plane_len();
        let h = g.h;
        let nl = g.num_loops();
        let mut out = VectorField3::zeros(g);
        for k in 0..g.nz {
            let lvl = psi.level(k);
            let traces = self.loop_traces(lvl);
            let scale = g
                .interior()
                .iter()
                .map(|&n| lvl[n].abs())
                .fold(1e-300, f64::max);
            let constant: Vec<bool> = (0..nl)
                .map(|l| {
                    g.boundary_nodes(l)
                        .all(|m| (lvl[m] - traces[l]).abs() <= 1e-12 * scale)
                })
                .collect();
            let base = k * plane;
            for (c, &n) in g.interior().iter().enumerate() {
                let links = g.links(c);
                let f0 = lvl[n];
                let mut grad = [0.0; 2];
                for axis in 0..2 {
                    let val = |d: usize| match links[d] {
                        Link::Interior(j) => (lvl[g.interior()[j]], 1.0),
                        Link::Boundary { loop_id, theta } if constant[loop_id] => {
                            (traces[loop_id], theta)
                        }
                        Link::Boundary { .. } => {
                            let (di, dj) = DIRS[d];
                            (lvl[g.neighbor(n, di, dj).unwrap_or(n)], 1.0)
                        }
                    };
                    let (fp, tp) = val(2 * axis);
                    let (fm, tm) = val(2 * axis + 1);
                    let (a, b) = (tp * h, tm * h);
                    grad[axis] = (b * b * (fp - f0) - a * a * (fm - f0)) / (a * b * (a + b));
                }
                out.u[base + n] = -grad[1];
                out.v[base + n] = grad[0];
            }
            for n in 0..plane {
                if let Some((nbs, w)) = &self.ghost_fit[n] {
                    out.u[base + n] = nbs.iter().zip(w).map(|(&m, w)| w * out.u[base + m]).sum();
                    out.v[base + n] = nbs.iter().zip(w).map(|(&m, w)| w * out.v[base + m]).sum();
                    continue;
                }
                let Some(nrm) = self.ghost_normal[n] else {
                    continue;
                };
                let (mut su, mut sv, mut cnt) = (0.0, 0.0, 0);
                for dj in -1isize..=1 {
                    for di in -1isize..=1 {
                        if let Some(m) = g.neighbor(n, di, dj) {
                            if g.tags[m] == NodeTag::Interior {
                                su += out.u[base + m];
                                sv += out.v[base + m];
                                cnt += 1;
                            }
                        }
                    }
                }
                if cnt > 0 {
                    let (mut u, mut v) = (su / cnt as f64, sv / cnt as f64);
                    if constant[g.loop_id[n].unwrap_or(0)] {
                        let un = u * nrm[0] + v * nrm[1];
                        u -= un * nrm[0];
                        v -= un * nrm[1];
                    }
                    out.u[base + n] = u;
                    out.v[base + n] = v;
                }
            }
        }
        out
    }

    /// Check that `phi` is an admissible test function: constant on each
    /// loop at every level and of zero volume mean.
    pub fn check_test_function(&self, phi: &ScalarField3) -> Result<()> {
        let scale = phi.max_abs().max(1e-300);
        let spread = self.trace_spread(phi);
        if spread > 1e-12 * scale {
            return Err(QgError::InvalidTestFunction(format!(
                "boundary trace varies by {spread:.3e} along a loop"
            )));
        }
        let mean = phi.mean();
        if mean.abs() > 1e-10 * scale {
            return Err(QgError::InvalidTestFunction(format!(
                "volume mean {mean:.3e} is not zero"
            )));
        }
        Ok(())
    }

    /// Discrete bilinear form `∫ ∇ψ·∇φ + ψ_z φ_z`.
    pub fn bilinear(&self, psi: &ScalarField3, phi: &ScalarField3) -> f64 {
        let g = &self.grid;
        let (pm, fm) = (psi.to_modes(), phi.to_modes());
        let h2 = g.cell_area();
        (0..g.nz)
            .map(|k| {
                let (a, b) = (pm.level(k), fm.level(k));
                let (ta, tb) = (self.loop_traces(a), self.loop_traces(b));
                let mut horiz = 0.0;
                let mut vert = 0.0;
                for (c, &n) in g.interior().iter().enumerate() {
                    vert += a[n] * b[n];
                    for link in g.links(c) {
                        match *link {
                            Link::Interior(j) if j > c => {
                                let m = g.interior()[j];
                                horiz += (a[m] - a[n]) * (b[m] - b[n]);
                            }
                            Link::Interior(_) => {}
                            Link::Boundary { loop_id, theta } => {
                                horiz += (ta[loop_id] - a[n]) * (tb[loop_id] - b[n]) / theta;
                            }
                        }
                    }
                }
                self.basis.mode_weight(k) * (horiz + Self::kappa2(k) * h2 * vert)
            })
            .sum()
    }

    /// Right-hand side `-∫ q φ + Σ_l ∫ c_l φ_l dz`.
    pub fn load(&self, q: &ScalarField3, c: &CirculationData, phi: &ScalarField3) -> f64 {
        let g = &self.grid;
        let phys = if phi.repr() == Repr::Mode {
            phi.to_physical()
        } else {
            phi.clone()
        };
        let mut boundary = 0.0;
        for k in 0..g.nz {
            let tr = self.loop_traces(phys.level(k));
            for (l, cl) in c.c.iter().enumerate() {
                boundary += self.basis.level_weight(k) * cl[k] * tr[l];
            }
        }
        -q.inner(&phys) + boundary
    }

    /// `|B(ψ, φ) - l(φ)|` for an admissible test function.
    pub fn weak_residual(
        &self,
        psi: &ScalarField3,
        q: &ScalarField3,
        c: &CirculationData,
        phi: &ScalarField3,
    ) -> Result<f64> {
        self.check_test_function(phi)?;
        Ok((self.bilinear(psi, phi) - self.load(q, c, phi)).abs())
    }
}

/// Outward normals at boundary nodes, taken from the nearest point of their
/// loop.
/// Quadratic least-squares extrapolation from the interior nodes within
/// two cells of ghost node `n`.
fn ghost_stencil(g: &Grid, n: usize) -> Option<(Vec<usize>, Vec<f64>)> {
    let pts: Vec<(usize, f64, f64)> = (-2isize..=2)
        .flat_map(|dj| (-2isize..=2).map(move |di| (di, dj)))
        .filter_map(|(di, dj)| g.neighbor(n, di, dj).map(|m| (m, di as f64, dj as f64)))
        .filter(|&(m, _, _)| g.tags[m] == NodeTag::Interior)
        .collect();
    let w = crate::field::extrapolation_weights(&pts)?;
    Some((pts.into_iter().map(|p| p.0).collect(), w))
}

fn ghost_normals(g: &Grid) -> Vec<Option<[f64; 2]>> {
    let cs = g.cross_section();
    (0..g.plane_len())
        .map(|n| {
            if g.tags[n] != NodeTag::Boundary {
                return None;
            }
            let p = g.node_xy(n);
            let lp = &cs.loops()[g.loop_id[n].unwrap_or(0)];
            let mut best = (f64::INFINITY, 0usize, p);
            for (k, (a, b)) in lp.segments().enumerate() {
                let ab = [b[0] - a[0], b[1] - a[1]];
                let len2 = ab[0] * ab[0] + ab[1] * ab[1];
                let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
                let c = [a[0] + t * ab[0], a[1] + t * ab[1]];
                let d = (c[0] - p[0]).hypot(c[1] - p[1]);
                if d < best.0 {
                    best = (d, k, c);
                }
            }
            Some(lp.locate(best.1, best.2).1)
        })
        .collect()
}

/// Circulation rows: trapezoid rule in arclength over the crossing points
/// whose link direction is closest to the normal.
fn build_flux_rows(g: &Grid) -> Vec<FluxRow> {
    let nl = g.num_loops();
    let h = g.h;
    (0..nl)
        .map(|l| {
            let perim = g.cross_section().loops()[l].perimeter();
            let mut pts: Vec<_> = g
                .loop_links(l)
                .iter()
                .filter(|ll| {
                    let (dx, dy) = DIRS[ll.dir];
                    let along = (ll.normal[0] * dx as f64 + ll.normal[1] * dy as f64).abs();
                    let across = (ll.normal[0] * dy as f64 - ll.normal[1] * dx as f64).abs();
                    if dx != 0 {
                        along >= across
                    } else {
                        along > across
                    }
                })
                .copied()
                .collect();
            pts.sort_by(|a, b| a.s.total_cmp(&b.s));
            let mut row = FluxRow {
                loops: vec![0.0; nl],
                psi: Vec::new(),
            };
            let m = pts.len();
            for (i, ll) in pts.iter().enumerate() {
                let prev = pts[(i + m - 1) % m].s;
                let next = pts[(i + 1) % m].s;
                let mut span = next - prev;
                if span <= 0.0 {
                    span += perim;
                }
                if m == 1 {
                    span = 2.0 * perim;
                }
                let w = 0.5 * span;
                let (dx, dy) = DIRS[ll.dir];
                let ndot = ll.normal[0] * dx as f64 + ll.normal[1] * dy as f64;
                let a = ll.theta * h;
                // inward derivative f'(0) along -e_d, from values at 0, a, b
                let scale = -w / ndot;
                // samples along -e_d: the crossing, the node, then up to two more
                let mut ts = vec![0.0, a];
                let mut who = vec![Nb::Loop(l), Nb::Node(ll.node)];
                let mut cur = ll.node;
                while ts.len() < FLUX_POINTS {
                    let last = ts[ts.len() - 1];
                    match g.links(cur)[opposite(ll.dir)] {
                        Link::Interior(j) => {
                            ts.push(last + h);
                            who.push(Nb::Node(j));
                            cur = j;
                        }
                        Link::Boundary { loop_id, theta } => {
                            ts.push(last + theta * h);
                            who.push(Nb::Loop(loop_id));
                            break;
                        }
                    }
                }
                for (nb, wgt) in who.into_iter().zip(lagrange_d0(&ts)) {
                    match nb {
                        Nb::Node(j) => row.psi.push((j, scale * wgt)),
                        Nb::Loop(m) => row.loops[m] += scale * wgt,
                    }
                }
            }
            row
        })
        .collect()
}

/// Samples per one-sided normal derivative, counting the crossing point.
const FLUX_POINTS: usize = 4;

/// Weights of the derivative at `ts[0] = 0` of the interpolating polynomial
/// through the nodes `ts`.
fn lagrange_d0(ts: &[f64]) -> Vec<f64> {
    (0..ts.len())
        .map(|i| {
            if i == 0 {
                return -ts[1..].iter().map(|t| 1.0 / t).sum::<f64>();
            }
            let mut num = 1.0;
            let mut den = 1.0;
            for (j, &tj) in ts.iter().enumerate() {
                if j != i {
                    den *= ts[i] - tj;
                    if j != 0 {
                        num *= -tj;
                    }
                }
            }
            num / den
        })
        .collect()
}
