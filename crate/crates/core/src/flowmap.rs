//! Per-level Lagrangian flow maps: Runge–Kutta and Picard integrators,
//! inverse maps, area distortion and Hölder diagnostics.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QgError, Result};
use crate::field::VectorField3;
use crate::geometry::{Grid, Point};
use crate::transport::{apply, interpolation_stencil};

/// Horizontal velocity as a function of level, position and time.
pub trait VelocityProvider: Sync {
    fn velocity(&self, level: usize, p: Point, t: f64) -> Result<[f64; 2]>;
}

/// Closed-form velocity, mostly for tests.
pub struct AnalyticVelocity<F>(pub F);

impl<F> VelocityProvider for AnalyticVelocity<F>
where
    F: Fn(usize, Point, f64) -> [f64; 2] + Sync,
{
    fn velocity(&self, level: usize, p: Point, t: f64) -> Result<[f64; 2]> {
        Ok((self.0)(level, p, t))
    }
}

/// Gridded velocity frames, bilinear in space and linear in time. Times
/// outside the frame range use the nearest frame.
#[derive(Clone, Debug)]
pub struct GridVelocity {
    frames: Vec<(f64, Arc<VectorField3>)>,
}

impl GridVelocity {
    pub fn new(mut frames: Vec<(f64, Arc<VectorField3>)>) -> Result<Self> {
        if frames.is_empty() {
            return Err(QgError::Domain(
                "velocity provider needs at least one frame".into(),
            ));
        }
        frames.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self { frames })
    }

    pub fn steady(u: VectorField3) -> Self {
        Self {
            frames: vec![(0.0, Arc::new(u))],
        }
    }

    fn sample(u: &VectorField3, st: &[(usize, f64); 4], level: usize) -> [f64; 2] {
        let plane = u.grid().plane_len();
        let r = level * plane..(level + 1) * plane;
        [apply(st, &u.u[r.clone()]), apply(st, &u.v[r])]
    }
}

impl VelocityProvider for GridVelocity {
    fn velocity(&self, level: usize, p: Point, t: f64) -> Result<[f64; 2]> {
        let f = &self.frames;
        let st = interpolation_stencil(f[0].1.grid(), p)?;
        let i = f.partition_point(|(s, _)| *s <= t);
        let v = if i == 0 {
            Self::sample(&f[0].1, &st, level)
        } else if i == f.len() {
            Self::sample(&f[i - 1].1, &st, level)
        } else {
            let (t0, a) = &f[i - 1];
            let (t1, b) = &f[i];
            let w = (t - t0) / (t1 - t0);
            let (va, vb) = (Self::sample(a, &st, level), Self::sample(b, &st, level));
            [(1.0 - w) * va[0] + w * vb[0], (1.0 - w) * va[1] + w * vb[1]]
        };
        if !(v[0].is_finite() && v[1].is_finite()) {
            return Err(QgError::Integration(format!(
                "non-finite velocity at {p:?}, t = {t}"
            )));
        }
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Particle positions seeded at the interior nodes of every level.
#[derive(Clone, Debug)]
pub struct FlowMap {
    grid: Arc<Grid>,
    seeds: Arc<Vec<usize>>,
    /// Level-major: `positions[k * seeds.len() + s]`.
    positions: Vec<Point>,
    pub t: f64,
    pub direction: Direction,
    /// Particles projected back onto `∂M` so far.
    pub projected: usize,
}

impl FlowMap {
    pub fn identity(grid: &Arc<Grid>, t: f64, direction: Direction) -> Self {
        let seeds: Vec<usize> = grid.interior().to_vec();
        let mut positions = Vec::with_capacity(seeds.len() * grid.nz);
        for _ in 0..grid.nz {
            positions.extend(seeds.iter().map(|&n| grid.node_xy(n)));
        }
        Self {
            grid: grid.clone(),
            seeds: Arc::new(seeds),
            positions,
            t,
            direction,
            projected: 0,
        }
    }

    /// A map sharing this one's seeds with explicit positions.
    pub fn with_positions(
        &self,
        positions: Vec<Point>,
        t: f64,
        direction: Direction,
    ) -> Result<Self> {
        if positions.len() != self.positions.len() {
            return Err(QgError::Seed(format!(
                "expected {} positions, got {}",
                self.positions.len(),
                positions.len()
            )));
        }
        Ok(Self {
            grid: self.grid.clone(),
            seeds: self.seeds.clone(),
            positions,
            t,
            direction,
            projected: 0,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn seeds(&self) -> &[usize] {
        &self.seeds
    }

    pub fn num_seeds(&self) -> usize {
        self.seeds.len()
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    #[inline]
    pub fn position(&self, level: usize, seed: usize) -> Point {
        self.positions[level * self.seeds.len() + seed]
    }

    pub fn seed_point(&self, seed: usize) -> Point {
        self.grid.node_xy(self.seeds[seed])
    }

    fn same_seeds(&self, other: &FlowMap) -> bool {
        Arc::ptr_eq(&self.seeds, &other.seeds) || self.seeds == other.seeds
    }

    /// Largest `|Φ(a) - a|` over all seeds and levels.
    pub fn max_displacement(&self) -> f64 {
        let ns = self.seeds.len();
        self.positions
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let a = self.seed_point(i % ns);
                (p[0] - a[0]).hypot(p[1] - a[1])
            })
            .fold(0.0, f64::max)
    }

    /// Largest distance between matching particles of two maps.
    pub fn sup_distance(&self, other: &FlowMap) -> Result<f64> {
        if !self.same_seeds(other) {
            return Err(QgError::Seed("flow maps have different seeds".into()));
        }
        Ok(self
            .positions
            .iter()
            .zip(&other.positions)
            .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
            .fold(0.0, f64::max))
    }

    /// Pairs of particles on one level closer than `h / 4`.
    pub fn collapsed_pairs(&self) -> usize {
        let r = self.grid.h / 4.0;
        let ns = self.seeds.len();
        let mut count = 0;
        for k in 0..self.grid.nz {
            let pts = &self.positions[k * ns..(k + 1) * ns];
            let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
            for (i, p) in pts.iter().enumerate() {
                cells
                    .entry(((p[0] / r).floor() as i64, (p[1] / r).floor() as i64))
                    .or_default()
                    .push(i);
            }
            for (i, p) in pts.iter().enumerate() {
                let (cx, cy) = ((p[0] / r).floor() as i64, (p[1] / r).floor() as i64);
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        if let Some(list) = cells.get(&(cx + dx, cy + dy)) {
                            count += list
                                .iter()
                                .filter(|&&j| {
                                    j > i && (pts[j][0] - p[0]).hypot(pts[j][1] - p[1]) < r
                                })
                                .count();
                        }
                    }
                }
            }
        }
        count
    }

    /// One classical RK4 step of signed length `dt`.
    pub fn advance(&self, u: &dyn VelocityProvider, dt: f64) -> Result<FlowMap> {
        let ns = self.seeds.len();
        let grid = &self.grid;
        let t = self.t;
        let results: Vec<(Point, bool)> = self
            .positions
            .par_iter()
            .enumerate()
            .map(|(i, &p)| rk4(grid, u, i / ns, p, t, dt))
            .collect::<Result<_>>()?;
        let projected = results.iter().filter(|r| r.1).count();
        Ok(FlowMap {
            grid: grid.clone(),
            seeds: self.seeds.clone(),
            positions: results.into_iter().map(|r| r.0).collect(),
            t: t + dt,
            direction: self.direction,
            projected: self.projected + projected,
        })
    }

    /// RK4 steps of size at most `max_dt` until time `t_target`.
    pub fn integrate_to(
        &self,
        u: &dyn VelocityProvider,
        t_target: f64,
        max_dt: f64,
    ) -> Result<FlowMap> {
        let span = t_target - self.t;
        let steps = (span.abs() / max_dt).ceil().max(0.0) as usize;
        let mut m = self.clone();
        if steps == 0 {
            m.t = t_target;
            return Ok(m);
        }
        let dt = span / steps as f64;
        for s in 0..steps {
            m = m.advance(u, dt)?;
            if s + 1 == steps {
                m.t = t_target;
            }
        }
        Ok(m)
    }
}

fn project(grid: &Grid, p: Point) -> (Point, bool) {
    if grid.contains(p) {
        (p, false)
    } else {
        (grid.nearest_boundary_point(p).0, true)
    }
}

fn rk4(
    grid: &Grid,
    u: &dyn VelocityProvider,
    level: usize,
    p: Point,
    t: f64,
    dt: f64,
) -> Result<(Point, bool)> {
    if dt == 0.0 {
        return Ok((p, false));
    }
    let eval = |q: Point, s: f64| u.velocity(level, project(grid, q).0, s);
    let k1 = eval(p, t)?;
    let k2 = eval(
        [p[0] + 0.5 * dt * k1[0], p[1] + 0.5 * dt * k1[1]],
        t + 0.5 * dt,
    )?;
    let k3 = eval(
        [p[0] + 0.5 * dt * k2[0], p[1] + 0.5 * dt * k2[1]],
        t + 0.5 * dt,
    )?;
    let k4 = eval([p[0] + dt * k3[0], p[1] + dt * k3[1]], t + dt)?;
    let q = [
        p[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        p[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ];
    if !(q[0].is_finite() && q[1].is_finite()) {
        return Err(QgError::Integration(format!(
            "particle left the plane from {p:?}"
        )));
    }
    Ok(project(grid, q))
}

/// Backward map `Φ_{z,-t}` at the grid nodes: identity at time `t`,
/// integrated back to time 0.
pub fn backward_map(
    grid: &Arc<Grid>,
    u: &dyn VelocityProvider,
    t: f64,
    max_dt: f64,
) -> Result<FlowMap> {
    let start = FlowMap::identity(grid, t, Direction::Backward);
    let mut m = start.integrate_to(u, 0.0, max_dt)?;
    m.t = t;
    Ok(m)
}

/// Inverse of a forward map: particles start at `Φ_t(a)` and are integrated
/// back to time 0, so the result should return every seed to itself.
pub fn inverse(forward: &FlowMap, u: &dyn VelocityProvider, max_dt: f64) -> Result<FlowMap> {
    let start =
        forward.with_positions(forward.positions.clone(), forward.t, Direction::Backward)?;
    start.integrate_to(u, 0.0, max_dt)
}

/// Largest `|Φ_{-t}(Φ_t(a)) - a|`.
pub fn round_trip_error(back_of_forward: &FlowMap) -> f64 {
    let ns = back_of_forward.num_seeds();
    back_of_forward
        .positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let a = back_of_forward.seed_point(i % ns);
            (p[0] - a[0]).hypot(p[1] - a[1])
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PicardSeed {
    /// `X⁰(t) = a`.
    #[default]
    Identity,
    /// `X⁰(t) = a + t u(a, 0)`.
    LinearDrift,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PicardSchedule {
    /// Every time node of an iterate uses the previous iterate only.
    #[default]
    Jacobi,
    /// Sweep forward in time, reusing the nodes already updated.
    Sweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: PicardSeed,
    pub schedule: PicardSchedule,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 60,
            seed: PicardSeed::Identity,
            schedule: PicardSchedule::Jacobi,
        }
    }
}

/// Fixed point of `X(t) = a + ∫₀ᵗ u(X(τ), τ) dτ` on a uniform time grid.
#[derive(Clone, Debug)]
pub struct PicardTrajectory {
    pub times: Vec<f64>,
    pub maps: Vec<FlowMap>,
    /// Sup distance between successive iterates.
    pub distances: Vec<f64>,
}

impl PicardTrajectory {
    pub fn iterations(&self) -> usize {
        self.distances.len()
    }

    pub fn last(&self) -> &FlowMap {
        self.maps.last().expect("trajectory has at least one time")
    }

    /// `d_{k+1} / d_k` for successive iterates.
    pub fn ratios(&self) -> Vec<f64> {
        self.distances
            .windows(2)
            .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
            .collect()
    }
}

/// Picard iteration with trapezoid quadrature in time over `[0, t_end]`
/// split into `steps` intervals.
pub fn picard_solve(
    grid: &Arc<Grid>,
    u: &dyn VelocityProvider,
    t_end: f64,
    steps: usize,
    opts: &PicardOptions,
) -> Result<PicardTrajectory> {
    picard_between(grid, u, 0.0, t_end, steps, opts)
}

/// Picard iteration for `X(t) = a + ∫_{t0}^t u(X(τ), τ) dτ`, with `t1`
/// possibly before `t0`; the maps are then backward maps.
pub fn picard_between(
    grid: &Arc<Grid>,
    u: &dyn VelocityProvider,
    t0: f64,
    t1: f64,
    steps: usize,
    opts: &PicardOptions,
) -> Result<PicardTrajectory> {
    let steps = steps.max(1);
    let dt = (t1 - t0) / steps as f64;
    let times: Vec<f64> = (0..=steps).map(|i| t0 + i as f64 * dt).collect();
    let direction = if t1 < t0 {
        Direction::Backward
    } else {
        Direction::Forward
    };
    let base = FlowMap::identity(grid, t0, direction);
    let np = base.positions.len();
    let ns = base.seeds.len();
    let level_of = |i: usize| i / ns;

    let mut cur: Vec<Vec<Point>> = match opts.seed {
        PicardSeed::Identity => vec![base.positions.clone(); steps + 1],
        PicardSeed::LinearDrift => {
            let v0: Vec<[f64; 2]> = base
                .positions
                .par_iter()
                .enumerate()
                .map(|(i, &p)| u.velocity(level_of(i), p, t0))
                .collect::<Result<_>>()?;
            times
                .iter()
                .map(|&t| {
                    base.positions
                        .iter()
                        .zip(&v0)
                        .map(|(p, v)| {
                            project(grid, [p[0] + (t - t0) * v[0], p[1] + (t - t0) * v[1]]).0
                        })
                        .collect()
                })
                .collect()
        }
    };
    let vel = |pos: &[Point], t: f64| -> Result<Vec<[f64; 2]>> {
        pos.par_iter()
            .enumerate()
            .map(|(i, &p)| u.velocity(level_of(i), p, t))
            .collect()
    };

    let mut distances = Vec::new();
    let mut above_one = 0;
    let mut projected;
    loop {
        let mut next: Vec<Vec<Point>> = Vec::with_capacity(steps + 1);
        next.push(base.positions.clone());
        projected = 0;
        match opts.schedule {
            PicardSchedule::Jacobi => {
                let vs: Vec<Vec<[f64; 2]>> = times
                    .iter()
                    .zip(&cur)
                    .map(|(&t, pos)| vel(pos, t))
                    .collect::<Result<_>>()?;
                let mut acc = vec![[0.0; 2]; np];
                for i in 1..=steps {
                    let row: Vec<Point> = (0..np)
                        .map(|p| {
                            acc[p][0] += 0.5 * dt * (vs[i - 1][p][0] + vs[i][p][0]);
                            acc[p][1] += 0.5 * dt * (vs[i - 1][p][1] + vs[i][p][1]);
                            let a = base.positions[p];
                            let (q, out) = project(grid, [a[0] + acc[p][0], a[1] + acc[p][1]]);
                            projected += usize::from(out);
                            q
                        })
                        .collect();
                    next.push(row);
                }
            }
            PicardSchedule::Sweep => {
                let mut v_prev = vel(&next[0], times[0])?;
                for i in 1..=steps {
                    let v_old = vel(&cur[i], times[i])?;
                    let prev = &next[i - 1];
                    let row: Vec<Point> = (0..np)
                        .map(|p| {
                            let q = [
                                prev[p][0] + 0.5 * dt * (v_prev[p][0] + v_old[p][0]),
                                prev[p][1] + 0.5 * dt * (v_prev[p][1] + v_old[p][1]),
                            ];
                            let (q, out) = project(grid, q);
                            projected += usize::from(out);
                            q
                        })
                        .collect();
                    v_prev = vel(&row, times[i])?;
                    next.push(row);
                }
            }
        }
        let d = next
            .iter()
            .zip(&cur)
            .flat_map(|(a, b)| a.iter().zip(b))
            .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
            .fold(0.0, f64::max);
        if let Some(&last) = distances.last() {
            if last > 0.0 && d / last >= 1.0 {
                above_one += 1;
            } else {
                above_one = 0;
            }
        }
        distances.push(d);
        cur = next;
        if d <= opts.tol {
            break;
        }
        if above_one >= 5 || distances.len() >= opts.max_iter {
            let ratios = distances
                .windows(2)
                .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
                .collect();
            return Err(QgError::Contraction { ratios });
        }
    }
    let maps = times
        .iter()
        .zip(cur)
        .map(|(&t, pos)| FlowMap {
            grid: grid.clone(),
            seeds: base.seeds.clone(),
            positions: pos,
            t,
            direction,
            projected,
        })
        .collect();
    Ok(PicardTrajectory {
        times,
        maps,
        distances,
    })
}

/// Per-level `|det ∂Φ/∂a - 1|` from centred differences in seed space.
#[derive(Clone, Debug)]
pub struct AreaDistortion {
    pub max: f64,
    /// `(max, mean)` per level.
    pub per_level: Vec<(f64, f64)>,
    /// Seeds without a full centred stencil, per level.
    pub skipped: usize,
}

pub fn area_distortion(map: &FlowMap) -> AreaDistortion {
    let g = &map.grid;
    let mut slot = vec![usize::MAX; g.plane_len()];
    for (s, &n) in map.seeds.iter().enumerate() {
        slot[n] = s;
    }
    let h = g.h;
    let mut per_level = Vec::with_capacity(g.nz);
    let mut skipped = 0;
    for k in 0..g.nz {
        let (mut mx, mut sum, mut cnt) = (0.0f64, 0.0, 0usize);
        skipped = 0;
        for &n in map.seeds.iter() {
            let nb = |di: isize, dj: isize| {
                g.neighbor(n, di, dj)
                    .map(|m| slot[m])
                    .filter(|&s| s != usize::MAX)
            };
            let (Some(e), Some(w), Some(nn), Some(ss)) = (nb(1, 0), nb(-1, 0), nb(0, 1), nb(0, -1))
            else {
                skipped += 1;
                continue;
            };
            let (pe, pw, pn, ps) = (
                map.position(k, e),
                map.position(k, w),
                map.position(k, nn),
                map.position(k, ss),
            );
            let j11 = (pe[0] - pw[0]) / (2.0 * h);
            let j21 = (pe[1] - pw[1]) / (2.0 * h);
            let j12 = (pn[0] - ps[0]) / (2.0 * h);
            let j22 = (pn[1] - ps[1]) / (2.0 * h);
            let dev = (j11 * j22 - j12 * j21 - 1.0).abs();
            mx = mx.max(dev);
            sum += dev;
            cnt += 1;
        }
        per_level.push((mx, if cnt > 0 { sum / cnt as f64 } else { 0.0 }));
    }
    AreaDistortion {
        max: per_level.iter().map(|p| p.0).fold(0.0, f64::max),
        per_level,
        skipped,
    }
}

/// A pair of (level, seed) samples.
pub type SeedPair = ((usize, usize), (usize, usize));

/// Random seed pairs with `|a₁ - a₂| + |z₁ - z₂|` in `(0, max_sep)`.
pub fn random_seed_pairs(map: &FlowMap, count: usize, max_sep: f64, seed: u64) -> Vec<SeedPair> {
    let g = &map.grid;
    let ns = map.num_seeds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut guard = 0;
    while out.len() < count && guard < 1000 * count.max(1) {
        guard += 1;
        let a = (rng.gen_range(0..g.nz), rng.gen_range(0..ns));
        let b = (rng.gen_range(0..g.nz), rng.gen_range(0..ns));
        let (pa, pb) = (map.seed_point(a.1), map.seed_point(b.1));
        let s = (pa[0] - pb[0]).hypot(pa[1] - pb[1]) + (g.z(a.0) - g.z(b.0)).abs();
        if s > 0.0 && s < max_sep {
            out.push((a, b));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct HolderReport {
    /// Slope of `log` image separation against `log` seed separation.
    pub exponent: f64,
    /// The exponent `e^{-Ct}` of the bound.
    pub bound_exponent: f64,
    /// Pairs violating `s' ≤ s^{e^{-Ct}} e^{1 - e^{-Ct}}`.
    pub violations: usize,
    /// Largest `s' / bound` over the pairs.
    pub worst_ratio: f64,
}

/// Two-regime Hölder check of a map at time `t` with constant `c`.
pub fn holder_probe(map: &FlowMap, pairs: &[SeedPair], c: f64, t: f64) -> HolderReport {
    let g = &map.grid;
    let beta = (-c * t).exp();
    let mut xs = Vec::with_capacity(pairs.len());
    let mut ys = Vec::with_capacity(pairs.len());
    let mut violations = 0;
    let mut worst = 0.0f64;
    for &(a, b) in pairs {
        let (sa, sb) = (map.seed_point(a.1), map.seed_point(b.1));
        let dz = (g.z(a.0) - g.z(b.0)).abs();
        let s = (sa[0] - sb[0]).hypot(sa[1] - sb[1]) + dz;
        let (pa, pb) = (map.position(a.0, a.1), map.position(b.0, b.1));
        let sp = (pa[0] - pb[0]).hypot(pa[1] - pb[1]) + dz;
        let bound = s.powf(beta) * (1.0 - beta).exp();
        if sp > bound * (1.0 + 1e-12) {
            violations += 1;
        }
        worst = worst.max(sp / bound);
        if sp > 0.0 {
            xs.push(s.ln());
            ys.push(sp.ln());
        }
    }
    HolderReport {
        exponent: crate::greens::least_squares_slope(&xs, &ys),
        bound_exponent: beta,
        violations,
        worst_ratio: worst,
    }
}

/// Trajectory CSV: `level,seed_x,seed_y,t,x,y`.
pub fn write_trajectory_csv<W: Write>(mut w: W, maps: &[FlowMap]) -> Result<()> {
    writeln!(w, "level,seed_x,seed_y,t,x,y")?;
    for m in maps {
        let ns = m.num_seeds();
        for k in 0..m.grid.nz {
            for s in 0..ns {
                let a = m.seed_point(s);
                let p = m.position(k, s);
                writeln!(w, "{k},{},{},{},{},{}", a[0], a[1], m.t, p[0], p[1])?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_domain, discretize, DomainSpec};
    use std::f64::consts::FRAC_PI_2;

    fn annulus(n: usize, nz: usize) -> Arc<Grid> {
        let cyl = build_domain(&DomainSpec::annulus(1.0, 2.0)).unwrap();
        Arc::new(discretize(&cyl, n, n, nz).unwrap())
    }

    fn big_square() -> Arc<Grid> {
        let spec = DomainSpec::Rectangle {
            outer: [-5.0, -5.0, 5.0, 5.0],
            holes: vec![],
        };
        Arc::new(discretize(&build_domain(&spec).unwrap(), 16, 16, 2).unwrap())
    }

    fn rotation() -> AnalyticVelocity<impl Fn(usize, Point, f64) -> [f64; 2] + Sync> {
        AnalyticVelocity(|_, p: Point, _| [-p[1], p[0]])
    }

    fn rotated(p: Point, t: f64) -> Point {
        [
            p[0] * t.cos() - p[1] * t.sin(),
            p[0] * t.sin() + p[1] * t.cos(),
        ]
    }

    #[test]
    fn constant_velocity_translates_exactly() {
        let g = big_square();
        let u = AnalyticVelocity(|_, _, _| [1.0, 0.0]);
        let m = FlowMap::identity(&g, 0.0, Direction::Forward)
            .advance(&u, 0.3)
            .unwrap();
        for s in 0..m.num_seeds() {
            let a = m.seed_point(s);
            if a[0] < 4.5 {
                let p = m.position(1, s);
                assert_eq!(p[1], a[1]);
                assert!((p[0] - (a[0] + 0.3)).abs() < 1e-15);
            }
        }
        assert!((m.t - 0.3).abs() < 1e-15);
    }

    #[test]
    fn zero_step_is_identity() {
        let g = annulus(16, 3);
        let id = FlowMap::identity(&g, 0.0, Direction::Forward);
        let m = id.advance(&rotation(), 0.0).unwrap();
        assert_eq!(m.positions(), id.positions());
    }

    #[test]
    fn rk4_rotation_quarter_turn() {
        let g = annulus(16, 2);
        let m = FlowMap::identity(&g, 0.0, Direction::Forward)
            .integrate_to(&rotation(), FRAC_PI_2, FRAC_PI_2 / 50.0)
            .unwrap();
        let mut worst = 0.0f64;
        for s in 0..m.num_seeds() {
            let want = rotated(m.seed_point(s), FRAC_PI_2);
            let p = m.position(0, s);
            worst = worst.max((p[0] - want[0]).hypot(p[1] - want[1]));
        }
        assert!(worst < 1e-7, "{worst}");
        assert_eq!(m.projected, 0);
        assert_eq!(m.collapsed_pairs(), 0);
    }

    #[test]
    fn two_half_steps_match_one_step() {
        let g = annulus(16, 2);
        let u = AnalyticVelocity(|_, p: Point, _| [-p[1] * (1.0 + 0.1 * p[0]), p[0]]);
        let id = FlowMap::identity(&g, 0.0, Direction::Forward);
        let a = id.advance(&u, 0.02).unwrap().advance(&u, 0.02).unwrap();
        let b = id.advance(&u, 0.04).unwrap();
        assert!(a.sup_distance(&b).unwrap() < 1e-7);
    }

    #[test]
    fn picard_zero_velocity_converges_at_once() {
        let g = annulus(16, 2);
        let u = AnalyticVelocity(|_, _, _| [0.0, 0.0]);
        let tr = picard_solve(&g, &u, 0.2, 10, &PicardOptions::default()).unwrap();
        assert_eq!(tr.iterations(), 1);
        assert_eq!(tr.last().max_displacement(), 0.0);
    }

    #[test]
    fn admissible_window_for_unit_constant() {
        let t = (-1.5f64).exp();
        assert!((t - 0.223_130_160_148_429_8).abs() < 1e-15);
    }

    #[test]
    fn picard_matches_rk_on_rotation() {
        let g = annulus(16, 2);
        let u = rotation();
        for schedule in [PicardSchedule::Jacobi, PicardSchedule::Sweep] {
            for seed in [PicardSeed::Identity, PicardSeed::LinearDrift] {
                let opts = PicardOptions {
                    schedule,
                    seed,
                    ..Default::default()
                };
                let tr = picard_solve(&g, &u, 0.2, 400, &opts).unwrap();
                let rk = FlowMap::identity(&g, 0.0, Direction::Forward)
                    .integrate_to(&u, 0.2, 1e-3)
                    .unwrap();
                let d = tr.last().sup_distance(&rk).unwrap();
                assert!(d < 1e-6, "{schedule:?} {seed:?}: {d}");
                assert!(tr.ratios().iter().skip(2).all(|&r| r < 0.7));
            }
        }
    }

    #[test]
    fn backward_picard_matches_backward_map() {
        let g = annulus(16, 2);
        let u = rotation();
        let opts = PicardOptions {
            seed: PicardSeed::LinearDrift,
            ..Default::default()
        };
        let tr = picard_between(&g, &u, 0.3, 0.0, 600, &opts).unwrap();
        assert_eq!(tr.last().direction, Direction::Backward);
        let rk = backward_map(&g, &u, 0.3, 1e-3).unwrap();
        assert!(tr.last().sup_distance(&rk).unwrap() < 1e-6);
    }

    #[test]
    fn picard_reports_non_contraction() {
        let g = big_square();
        let u = AnalyticVelocity(|_, p: Point, _| [-20.0 * p[1], 20.0 * p[0]]);
        let opts = PicardOptions {
            max_iter: 200,
            ..Default::default()
        };
        match picard_solve(&g, &u, 1.0, 50, &opts) {
            Err(QgError::Contraction { ratios }) => {
                assert!(ratios.iter().filter(|&&r| r >= 1.0).count() >= 5)
            }
            other => panic!("expected contraction failure, got {other:?}"),
        }
    }

    #[test]
    fn inverse_round_trip() {
        let g = annulus(16, 2);
        let u = rotation();
        let f = FlowMap::identity(&g, 0.0, Direction::Forward)
            .integrate_to(&u, 0.5, 1e-3)
            .unwrap();
        let back = inverse(&f, &u, 1e-3).unwrap();
        assert!(round_trip_error(&back) < 1e-6);
        let id = FlowMap::identity(&g, 0.0, Direction::Forward);
        assert_eq!(round_trip_error(&inverse(&id, &u, 1e-3).unwrap()), 0.0);
    }

    #[test]
    fn constant_field_inverse_is_translation() {
        let g = big_square();
        let u = AnalyticVelocity(|_, _, _| [0.5, -0.25]);
        let back = backward_map(&g, &u, 0.4, 0.1).unwrap();
        for s in 0..back.num_seeds() {
            let a = back.seed_point(s);
            if a[0] > -4.5 && a[1] < 4.5 {
                let p = back.position(0, s);
                assert!((p[0] - (a[0] - 0.2)).abs() < 1e-14 && (p[1] - (a[1] + 0.1)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn area_distortion_of_isometries() {
        let g = annulus(24, 2);
        let id = FlowMap::identity(&g, 0.0, Direction::Forward);
        let d = area_distortion(&id);
        assert!(d.max < 1e-13);
        assert!(d.skipped > 0);
        let r = id.integrate_to(&rotation(), 0.7, 0.01).unwrap();
        assert!(area_distortion(&r).max < 1e-8);
    }

    #[test]
    fn holder_identity_and_rotation() {
        let g = annulus(24, 3);
        let id = FlowMap::identity(&g, 0.0, Direction::Forward);
        let pairs = random_seed_pairs(&id, 300, 1.0, 9);
        let rep = holder_probe(&id, &pairs, 3.0, 0.0);
        assert_eq!(rep.bound_exponent, 1.0);
        assert!((rep.exponent - 1.0).abs() < 1e-12);
        assert_eq!(rep.violations, 0);
        let r = id.integrate_to(&rotation(), 0.5, 0.01).unwrap();
        let rep = holder_probe(&r, &pairs, 0.0, 0.5);
        assert_eq!(rep.violations, 0);
        assert!((rep.exponent - 1.0).abs() < 1e-6);
    }

    #[test]
    fn grid_velocity_interpolates_in_time() {
        let g = annulus(16, 2);
        let mut a = VectorField3::zeros(&g);
        let mut b = VectorField3::zeros(&g);
        a.u.iter_mut().for_each(|v| *v = 1.0);
        b.u.iter_mut().for_each(|v| *v = 3.0);
        let gv = GridVelocity::new(vec![(0.0, Arc::new(a)), (1.0, Arc::new(b))]).unwrap();
        let v = gv.velocity(0, [1.5, 0.0], 0.25).unwrap();
        assert!((v[0] - 1.5).abs() < 1e-14);
        assert_eq!(gv.velocity(1, [1.5, 0.0], 7.0).unwrap()[0], 3.0);
    }

    #[test]
    fn trajectory_csv_header() {
        let g = annulus(16, 2);
        let id = FlowMap::identity(&g, 0.0, Direction::Forward);
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &[id]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("level,seed_x,seed_y,t,x,y\n0,"));
    }
}
