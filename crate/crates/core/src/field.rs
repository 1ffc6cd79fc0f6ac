//! Gridded fields on the cylinder and their export formats.
//!
//! Values are stored level by level: node `n` of level `k` lives at
//! `k * plane_len + n`. Exterior nodes hold zero.

use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::error::{QgError, Result};
use crate::geometry::{Grid, NodeTag};
use crate::vertical::CosineBasis;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Repr {
    Physical,
    Mode,
}

#[derive(Clone, Debug)]
pub struct ScalarField3 {
    grid: Arc<Grid>,
    values: Vec<f64>,
    repr: Repr,
}

impl ScalarField3 {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![0.0; grid.plane_len() * grid.nz],
            repr: Repr::Physical,
        }
    }

    /// Sample `f(x, y, z)` on interior and boundary nodes.
    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let mut s = Self::zeros(grid);
        let plane = grid.plane_len();
        for k in 0..grid.nz {
            let z = grid.z(k);
            for n in 0..plane {
                if grid.tags[n] != NodeTag::Exterior {
                    let [x, y] = grid.node_xy(n);
                    s.values[k * plane + n] = f(x, y, z);
                }
            }
        }
        s
    }

    pub fn from_values(grid: &Arc<Grid>, values: Vec<f64>, repr: Repr) -> Result<Self> {
        if values.len() != grid.plane_len() * grid.nz {
            return Err(QgError::Domain(format!(
                "field has {} values, grid needs {}",
                values.len(),
                grid.plane_len() * grid.nz
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            values,
            repr,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn repr(&self) -> Repr {
        self.repr
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, n: usize, k: usize) -> f64 {
        self.values[k * self.grid.plane_len() + n]
    }

    #[inline]
    pub fn set(&mut self, n: usize, k: usize, v: f64) {
        let p = self.grid.plane_len();
        self.values[k * p + n] = v;
    }

    pub fn level(&self, k: usize) -> &[f64] {
        let p = self.grid.plane_len();
        &self.values[k * p..(k + 1) * p]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        let p = self.grid.plane_len();
        &mut self.values[k * p..(k + 1) * p]
    }

    fn transform(&self, to: Repr) -> Self {
        if self.repr == to {
            return self.clone();
        }
        let g = &self.grid;
        let (plane, nz) = (g.plane_len(), g.nz);
        let basis = CosineBasis::new(nz);
        let mut out = vec![0.0; self.values.len()];
        let mut col = vec![0.0; nz];
        let mut res = vec![0.0; nz];
        for n in 0..plane {
            if g.tags[n] == NodeTag::Exterior {
                continue;
            }
            for k in 0..nz {
                col[k] = self.values[k * plane + n];
            }
            match to {
                Repr::Mode => basis.forward(&col, &mut res),
                Repr::Physical => basis.inverse(&col, &mut res),
            }
            for k in 0..nz {
                out[k * plane + n] = res[k];
            }
        }
        Self {
            grid: g.clone(),
            values: out,
            repr: to,
        }
    }

    /// Vertical cosine transform: level `k` of the result holds mode `k`.
    pub fn to_modes(&self) -> Self {
        self.transform(Repr::Mode)
    }

    pub fn to_physical(&self) -> Self {
        self.transform(Repr::Physical)
    }

    fn physical(&self) -> std::borrow::Cow<'_, Self> {
        match self.repr {
            Repr::Physical => std::borrow::Cow::Borrowed(self),
            Repr::Mode => std::borrow::Cow::Owned(self.to_physical()),
        }
    }

    /// `Σ_interior h² f` on one level.
    pub fn level_integral(&self, k: usize) -> f64 {
        let f = self.physical();
        let lvl = f.level(k);
        self.grid.cell_area() * self.grid.interior().iter().map(|&n| lvl[n]).sum::<f64>()
    }

    pub fn level_mean(&self, k: usize) -> f64 {
        self.level_integral(k) / self.grid.discrete_area()
    }

    /// Volume integral: interior node sum horizontally, trapezoid vertically.
    pub fn integral(&self) -> f64 {
        let basis = CosineBasis::new(self.grid.nz);
        (0..self.grid.nz)
            .map(|k| basis.level_weight(k) * self.level_integral(k))
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.integral() / self.grid.discrete_area()
    }

    /// Volume integral of the product of two fields.
    pub fn inner(&self, other: &Self) -> f64 {
        let (a, b) = (self.physical(), other.physical());
        let g = &self.grid;
        let basis = CosineBasis::new(g.nz);
        let plane = g.plane_len();
        (0..g.nz)
            .map(|k| {
                basis.level_weight(k)
                    * g.interior()
                        .iter()
                        .map(|&n| a.values[k * plane + n] * b.values[k * plane + n])
                        .sum::<f64>()
            })
            .sum::<f64>()
            * g.cell_area()
    }

    /// Max |f| over interior nodes.
    pub fn max_abs(&self) -> f64 {
        let f = self.physical();
        let plane = self.grid.plane_len();
        (0..self.grid.nz)
            .flat_map(|k| self.grid.interior().iter().map(move |&n| k * plane + n))
            .map(|i| f.values[i].abs())
            .fold(0.0, f64::max)
    }

    /// Volume-weighted L¹ distance between two fields.
    pub fn l1_distance(&self, other: &Self) -> f64 {
        let d = self
            .physical()
            .combine(&other.physical(), |a, b| (a - b).abs());
        d.integral()
    }

    pub fn combine(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.repr, other.repr, "mixed representations");
        Self {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            repr: self.repr,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let g = &self.grid;
        let plane = g.plane_len();
        let mut out = self.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            if g.tags[i % plane] != NodeTag::Exterior {
                *v = f(*v);
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        self.combine(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.combine(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// Set every non-interior node of every level to the average of its
    /// interior 8-neighbours (zero if it has none).
    pub fn fill_ghosts_average(&mut self) {
        let g = self.grid.clone();
        let plane = g.plane_len();
        for n in 0..plane {
            if g.tags[n] == NodeTag::Interior {
                continue;
            }
            let nbs: Vec<usize> = (-1isize..=1)
                .flat_map(|dj| (-1isize..=1).map(move |di| (di, dj)))
                .filter_map(|(di, dj)| g.neighbor(n, di, dj))
                .filter(|&m| g.tags[m] == NodeTag::Interior)
                .collect();
            for k in 0..g.nz {
                let v = if nbs.is_empty() {
                    0.0
                } else {
                    nbs.iter().map(|&m| self.values[k * plane + m]).sum::<f64>() / nbs.len() as f64
                };
                self.values[k * plane + n] = v;
            }
        }
    }

    /// Set every non-interior node to a least-squares quadratic (or, with
    /// too few neighbours, linear) extrapolation from interior nodes within
    /// two cells, clamped to the interior range of its level. Falls back to
    /// [`Self::fill_ghosts_average`] where the fit is degenerate.
    pub fn fill_ghosts_extrapolated(&mut self) {
        self.fill_ghosts_average();
        let g = self.grid.clone();
        let plane = g.plane_len();
        let ranges: Vec<(f64, f64)> = (0..g.nz)
            .map(|k| {
                g.interior()
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &n| {
                        let v = self.values[k * plane + n];
                        (lo.min(v), hi.max(v))
                    })
            })
            .collect();
        for n in 0..plane {
            if g.tags[n] == NodeTag::Interior {
                continue;
            }
            let nbs: Vec<(usize, f64, f64)> = (-2isize..=2)
                .flat_map(|dj| (-2isize..=2).map(move |di| (di, dj)))
                .filter_map(|(di, dj)| g.neighbor(n, di, dj).map(|m| (m, di as f64, dj as f64)))
                .filter(|&(m, _, _)| g.tags[m] == NodeTag::Interior)
                .collect();
            let Some(weights) = extrapolation_weights(&nbs) else {
                continue;
            };
            for k in 0..g.nz {
                let v: f64 = nbs
                    .iter()
                    .zip(&weights)
                    .map(|(&(m, _, _), w)| w * self.values[k * plane + m])
                    .sum();
                let (lo, hi) = ranges[k];
                self.values[k * plane + n] = v.clamp(lo, hi);
            }
        }
    }

    /// CSV with columns `x,y,z,value` over interior and boundary nodes.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let f = self.physical();
        let g = &self.grid;
        writeln!(w, "x,y,z,value")?;
        for k in 0..g.nz {
            let z = g.z(k);
            for n in 0..g.plane_len() {
                if g.tags[n] != NodeTag::Exterior {
                    let [x, y] = g.node_xy(n);
                    writeln!(w, "{x},{y},{z},{}", f.get(n, k))?;
                }
            }
        }
        Ok(())
    }

    /// Read the format of [`Self::write_csv`]. Rows are matched to the
    /// nearest node and level; every interior node must be present. Ghost
    /// values are re-extrapolated.
    pub fn read_csv<R: BufRead>(grid: &Arc<Grid>, r: R) -> Result<Self> {
        let mut f = Self::zeros(grid);
        let mut seen = vec![false; grid.plane_len() * grid.nz];
        let bad = |line: usize, m: &str| QgError::Config(format!("field CSV line {line}: {m}"));
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if i == 0 || line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(i + 1, &e.to_string()))?;
            let [x, y, z, v] = vals[..] else {
                return Err(bad(i + 1, "expected four columns x,y,z,value"));
            };
            let (ci, cj, fx, fy) = grid
                .cell_of([x, y])
                .ok_or_else(|| bad(i + 1, "point lies outside the grid"))?;
            let n = grid.idx(ci + usize::from(fx > 0.5), cj + usize::from(fy > 0.5));
            let k = (z * (grid.nz - 1) as f64).round();
            if !(0.0..grid.nz as f64).contains(&k) {
                return Err(bad(i + 1, "z lies outside [0, 1]"));
            }
            let k = k as usize;
            f.values[k * grid.plane_len() + n] = v;
            seen[k * grid.plane_len() + n] = true;
        }
        for k in 0..grid.nz {
            if let Some(&n) = grid
                .interior()
                .iter()
                .find(|&&n| !seen[k * grid.plane_len() + n])
            {
                let [x, y] = grid.node_xy(n);
                return Err(QgError::Config(format!(
                    "field CSV has no value at ({x}, {y}), level {k}"
                )));
            }
        }
        f.fill_ghosts_extrapolated();
        Ok(f)
    }

    /// Legacy ASCII VTK structured points.
    pub fn write_vtk<W: Write>(&self, mut w: W, name: &str) -> Result<()> {
        let f = self.physical();
        write_vtk_header(&mut w, &self.grid, name)?;
        writeln!(w, "SCALARS {name} double 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for v in &f.values {
            writeln!(w, "{v}")?;
        }
        Ok(())
    }
}

fn write_vtk_header<W: Write>(w: &mut W, g: &Grid, title: &str) -> Result<()> {
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "{title}")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_POINTS")?;
    writeln!(w, "DIMENSIONS {} {} {}", g.nx, g.ny, g.nz)?;
    writeln!(w, "ORIGIN {} {} 0", g.origin[0], g.origin[1])?;
    writeln!(w, "SPACING {} {} {}", g.h, g.h, g.dz())?;
    writeln!(w, "POINT_DATA {}", g.plane_len() * g.nz)?;
    Ok(())
}

/// Horizontal velocity on every node and level.
#[derive(Clone, Debug)]
pub struct VectorField3 {
    grid: Arc<Grid>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl VectorField3 {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        let len = grid.plane_len() * grid.nz;
        Self {
            grid: grid.clone(),
            u: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    #[inline]
    pub fn at(&self, n: usize, k: usize) -> [f64; 2] {
        let i = k * self.grid.plane_len() + n;
        [self.u[i], self.v[i]]
    }

    pub fn max_abs(&self) -> f64 {
        let plane = self.grid.plane_len();
        let mut m = 0.0f64;
        for k in 0..self.grid.nz {
            for &n in self.grid.interior() {
                let i = k * plane + n;
                m = m.max(self.u[i].hypot(self.v[i]));
            }
        }
        m
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let g = &self.grid;
        writeln!(w, "x,y,z,u,v")?;
        for k in 0..g.nz {
            let z = g.z(k);
            for n in 0..g.plane_len() {
                if g.tags[n] != NodeTag::Exterior {
                    let [x, y] = g.node_xy(n);
                    let [u, v] = self.at(n, k);
                    writeln!(w, "{x},{y},{z},{u},{v}")?;
                }
            }
        }
        Ok(())
    }

    pub fn write_vtk<W: Write>(&self, mut w: W, name: &str) -> Result<()> {
        write_vtk_header(&mut w, &self.grid, name)?;
        writeln!(w, "VECTORS {name} double")?;
        for (u, v) in self.u.iter().zip(&self.v) {
            writeln!(w, "{u} {v} 0")?;
        }
        Ok(())
    }
}

/// Prescribed circulations `c_l(z)` sampled at the grid levels.
#[derive(Clone, Debug, PartialEq)]
pub struct CirculationData {
    /// `c[l][k]`: circulation around loop `l` at level `k`.
    pub c: Vec<Vec<f64>>,
}

impl CirculationData {
    pub fn zeros(num_loops: usize, nz: usize) -> Self {
        Self {
            c: vec![vec![0.0; nz]; num_loops],
        }
    }

    pub fn constant(values: &[f64], nz: usize) -> Self {
        Self {
            c: values.iter().map(|&v| vec![v; nz]).collect(),
        }
    }

    pub fn from_fn(num_loops: usize, nz: usize, f: impl Fn(usize, f64) -> f64) -> Self {
        let dz = 1.0 / (nz - 1) as f64;
        Self {
            c: (0..num_loops)
                .map(|l| (0..nz).map(|k| f(l, k as f64 * dz)).collect())
                .collect(),
        }
    }

    pub fn num_loops(&self) -> usize {
        self.c.len()
    }

    pub fn nz(&self) -> usize {
        self.c.first().map_or(0, Vec::len)
    }

    /// Trapezoid integral of `c_l` over `(0, 1)`.
    pub fn integral(&self, l: usize) -> f64 {
        let basis = CosineBasis::new(self.nz());
        self.c[l]
            .iter()
            .enumerate()
            .map(|(k, v)| basis.level_weight(k) * v)
            .sum()
    }

    pub fn total(&self) -> f64 {
        (0..self.num_loops()).map(|l| self.integral(l)).sum()
    }

    /// Cosine coefficients of each loop's circulation.
    pub fn modes(&self) -> Vec<Vec<f64>> {
        let nz = self.nz();
        let basis = CosineBasis::new(nz);
        self.c
            .iter()
            .map(|col| {
                let mut a = vec![0.0; nz];
                basis.forward(col, &mut a);
                a
            })
            .collect()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            c: self
                .c
                .iter()
                .map(|r| r.iter().map(|v| v * s).collect())
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            c: self
                .c
                .iter()
                .zip(&other.c)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.c.iter().flatten().all(|&v| v == 0.0)
    }

    /// Largest vertical slope of any `c_l` at `z = 0` or `z = 1`, by one-sided
    /// differences. Zero when the edge compatibility holds exactly.
    pub fn edge_slope(&self) -> f64 {
        let nz = self.nz();
        let dz = 1.0 / (nz - 1) as f64;
        self.c
            .iter()
            .map(|r| {
                ((r[1] - r[0]) / dz)
                    .abs()
                    .max(((r[nz - 1] - r[nz - 2]) / dz).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Weights giving the value at the origin of a least-squares polynomial fit
/// through points at offsets `(x, y)`; quadratic when there are enough
/// points, else linear.
pub(crate) fn extrapolation_weights(pts: &[(usize, f64, f64)]) -> Option<Vec<f64>> {
    use nalgebra::{DMatrix, DVector};
    for degree in [2usize, 1] {
        let cols = if degree == 2 { 6 } else { 3 };
        if pts.len() < cols + 2 {
            continue;
        }
        let a = DMatrix::from_fn(pts.len(), cols, |r, c| {
            let (_, x, y) = pts[r];
            [1.0, x, y, x * x, x * y, y * y][c]
        });
        let ata = a.transpose() * &a;
        let Some(inv) = ata.try_inverse() else {
            continue;
        };
        if !(inv.norm() < 1e6) {
            continue;
        }
        // value at the origin is the first coefficient
        let row: DVector<f64> = (inv.row(0) * a.transpose()).transpose();
        return Some(row.iter().copied().collect());
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_domain, discretize, DomainSpec};
    use std::f64::consts::PI;

    fn grid() -> Arc<Grid> {
        let cyl = build_domain(&DomainSpec::square_with_hole()).unwrap();
        Arc::new(discretize(&cyl, 20, 20, 5).unwrap())
    }

    #[test]
    fn constant_integral_is_volume() {
        let g = grid();
        let f = ScalarField3::from_fn(&g, |_, _, _| 2.0);
        assert!((f.integral() - 16.0).abs() < 1e-12);
        assert!((f.mean() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn modes_roundtrip() {
        let g = grid();
        let f = ScalarField3::from_fn(&g, |x, y, z| x * y + (PI * z).cos() * x);
        let back = f.to_modes().to_physical();
        for (a, b) in f.values().iter().zip(back.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn circulation_total() {
        let c = CirculationData::constant(&[16.0, 0.0], 5);
        assert!((c.total() - 16.0).abs() < 1e-14);
        assert_eq!(c.edge_slope(), 0.0);
    }

    #[test]
    fn vtk_header_shape() {
        let g = grid();
        let f = ScalarField3::from_fn(&g, |x, _, _| x);
        let mut buf = Vec::new();
        f.write_vtk(&mut buf, "q").unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.contains("DIMENSIONS 20 20 5"));
        assert_eq!(s.lines().count(), 10 + 20 * 20 * 5);
    }

    #[test]
    fn csv_skips_exterior() {
        let g = grid();
        let f = ScalarField3::from_fn(&g, |_, _, _| 1.0);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let rows = String::from_utf8(buf).unwrap().lines().count() - 1;
        let live = g.tags.iter().filter(|t| **t != NodeTag::Exterior).count();
        assert_eq!(rows, live * 5);
    }

    #[test]
    fn csv_read_round_trip() {
        let g = grid();
        let f = ScalarField3::from_fn(&g, |x, y, z| x * y - z + 0.1);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let back = ScalarField3::read_csv(&g, &buf[..]).unwrap();
        for k in 0..g.nz {
            for &n in g.interior() {
                assert_eq!(back.get(n, k), f.get(n, k));
            }
        }
        let short: Vec<u8> = buf
            .split(|&b| b == b'\n')
            .take(20)
            .collect::<Vec<_>>()
            .join(&b'\n');
        assert!(ScalarField3::read_csv(&g, &short[..]).is_err());
        assert!(ScalarField3::read_csv(&g, &b"x,y,z,value\n1,2\n"[..]).is_err());
    }
}
