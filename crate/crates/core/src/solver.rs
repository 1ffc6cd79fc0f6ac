//! Time-window fixed-point solver and the scalar utilities it relies on.
//!
//! On each window the iterate `qⁿ` is sampled at a few frame times, inverted
//! for the velocity, the forward flow map is found by Picard iteration, and
//! the next iterate is the pullback of the window's initial PV through the
//! backward maps. Iterates stop when successive forward maps agree to
//! `outer_tol`; the window's final PV then starts the next window.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::elliptic::Elliptic;
use crate::error::{QgError, Result};
use crate::field::{CirculationData, ScalarField3, VectorField3};
use crate::flowmap::{
    area_distortion, picard_between, FlowMap, GridVelocity, PicardOptions, PicardTrajectory,
};
use crate::greens::Greens;
use crate::transport::{pullback, InitialPV, Interpolation};

/// Quasi-Lipschitz modulus: `(1 - ln d) d` for `0 < d < 1`, else 1.
pub fn lambda(d: f64) -> f64 {
    if d <= 0.0 {
        0.0
    } else if d < 1.0 {
        (1.0 - d.ln()) * d
    } else {
        1.0
    }
}

/// Linear majorant `-ln(ε) d + ε` of [`lambda`].
pub fn majorant(d: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(QgError::Domain(format!(
            "majorant needs 0 < eps < 1, got {eps}"
        )));
    }
    Ok(-eps.ln() * d + eps)
}

/// Coefficient of the integral inequality `f(t) ≤ α(t) + ∫_a^t β f`.
#[derive(Clone, Copy)]
pub enum Coefficient<'a> {
    Constant(f64),
    Function(&'a dyn Fn(f64) -> f64),
}

impl Coefficient<'_> {
    fn at(&self, t: f64) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Function(f) => f(t),
        }
    }
}

const GRONWALL_PANELS: usize = 2048;

/// Bound on `f(t)` from the integral inequality, for non-decreasing `α`:
/// `α(t) exp(∫_a^t β)`. Constant `β` uses the closed form; otherwise the
/// integral uses composite Simpson quadrature.
pub fn gronwall_bound(
    alpha: Coefficient<'_>,
    beta: Coefficient<'_>,
    a: f64,
    t: f64,
) -> Result<f64> {
    if t < a {
        return Err(QgError::Domain(format!(
            "gronwall interval [{a}, {t}] is empty"
        )));
    }
    let integral = match beta {
        Coefficient::Constant(b) => {
            if b < 0.0 {
                return Err(QgError::Domain(format!("beta = {b} is negative")));
            }
            b * (t - a)
        }
        Coefficient::Function(f) => {
            let n = GRONWALL_PANELS;
            let h = (t - a) / n as f64;
            let mut s = 0.0;
            for i in 0..=n {
                let x = a + h * i as f64;
                let v = f(x);
                if v < 0.0 || !v.is_finite() {
                    return Err(QgError::Domain(format!(
                        "beta({x}) = {v} is not a non-negative number"
                    )));
                }
                let w = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                s += w * v;
            }
            s * h / 3.0
        }
    };
    Ok(alpha.at(t) * integral.exp())
}

/// Volume-averaged L¹ distance between two maps on the same seed lattice:
/// the mean over seeds of `|Φ_a - Φ_b|` with trapezoid weights in `z`.
pub fn delta_metric(a: &FlowMap, b: &FlowMap) -> Result<f64> {
    if a.grid().plane_len() != b.grid().plane_len()
        || a.grid().nz != b.grid().nz
        || a.seeds() != b.seeds()
    {
        return Err(QgError::Seed(
            "maps are built on different seed lattices".into(),
        ));
    }
    let g = a.grid();
    let ns = a.num_seeds();
    if ns == 0 {
        return Ok(0.0);
    }
    let basis = crate::vertical::CosineBasis::new(g.nz);
    let mut total = 0.0;
    for k in 0..g.nz {
        let w = if g.nz == 1 {
            1.0
        } else {
            basis.level_weight(k)
        };
        let s: f64 = (0..ns)
            .map(|i| {
                let (p, q) = (a.position(k, i), b.position(k, i));
                (p[0] - q[0]).hypot(p[1] - q[1])
            })
            .sum();
        total += w * s / ns as f64;
    }
    Ok(total)
}

/// Window length `σ e^{-3/2} / (Ĉ (1 + |q₀|∞))`.
pub fn window_length(sigma: f64, c_hat: f64, q_bound: f64) -> f64 {
    sigma * (-1.5f64).exp() / (c_hat * (1.0 + q_bound))
}

/// Empirical constant of the quasi-Lipschitz bound: the largest ratio
/// `∫|DG₁ - DG₂| / λ(d)` over random source pairs on the grid.
pub fn estimate_c_hat(ell: &Arc<Elliptic>, pairs: usize, seed: u64) -> Result<f64> {
    let greens = Greens::new(ell.clone(), 256 << 20);
    let h = ell.grid().h;
    let sample = greens.random_pairs(pairs, h, 1.0, seed);
    if sample.is_empty() {
        return Err(QgError::Resolution(
            "no admissible source pairs for the constant estimate".into(),
        ));
    }
    let c = greens.quasi_lipschitz_report(&sample)?.max_ratio();
    if !(c.is_finite() && c > 0.0) {
        return Err(QgError::Solver {
            message: "quasi-Lipschitz constant estimate is not positive".into(),
            residual: c,
        });
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Outer tolerance on `δⁿ`; `None` means `1e-8 · diam(M)`.
    pub outer_tol: Option<f64>,
    pub outer_max_iter: usize,
    pub picard: PicardOptions,
    /// Largest Picard time step.
    pub dt: f64,
    pub interpolation: Interpolation,
    /// Window safety factor σ.
    pub sigma: f64,
    /// Velocity frames per window (intervals, so `frames + 1` samples).
    pub frames: usize,
    /// Fixed quasi-Lipschitz constant; estimated from the grid when absent.
    pub c_hat: Option<f64>,
    /// Source pairs used when estimating the constant.
    pub c_hat_pairs: usize,
    pub c_hat_seed: u64,
    /// Explicit window length overriding the rule.
    pub window: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            outer_tol: None,
            outer_max_iter: 40,
            picard: PicardOptions::default(),
            dt: 0.01,
            interpolation: Interpolation::Bilinear,
            sigma: 0.5,
            frames: 4,
            c_hat: None,
            c_hat_pairs: 64,
            c_hat_seed: 7,
            window: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(QgError::Config(m.into()));
        if let Some(t) = self.outer_tol {
            if !(t > 0.0) {
                return bad("outer_tol must be positive");
            }
        }
        if self.outer_max_iter == 0 {
            return bad("outer_max_iter must be positive");
        }
        if !(self.picard.tol > 0.0) || self.picard.max_iter == 0 {
            return bad("picard tolerance and iteration cap must be positive");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return bad("sigma must lie in (0, 1]");
        }
        if self.frames == 0 {
            return bad("frames must be positive");
        }
        if let Some(c) = self.c_hat {
            if !(c > 0.0) {
                return bad("c_hat must be positive");
            }
        }
        if let Some(w) = self.window {
            if !(w > 0.0) {
                return bad("window must be positive");
            }
        }
        if self.c_hat.is_none() && self.window.is_none() && self.c_hat_pairs == 0 {
            return bad("c_hat_pairs must be positive when c_hat is estimated");
        }
        Ok(())
    }
}

/// Iterate `(qⁿ, ψⁿ, uⁿ, Φⁿ)` on one window.
#[derive(Clone, Debug)]
pub struct SolverState {
    /// Window start time.
    pub t0: f64,
    /// Window length T.
    pub window: f64,
    /// Outer iterate index.
    pub n: usize,
    /// Frame times in the window.
    pub times: Vec<f64>,
    /// PV at the frame times; the first is the window's initial PV.
    pub q: Vec<ScalarField3>,
    /// Stream function inverted from the previous iterate's PV per frame.
    pub psi: Vec<ScalarField3>,
    pub u: Vec<Arc<VectorField3>>,
    /// Forward maps at the frame times.
    pub phi: Vec<FlowMap>,
    pub delta_history: Vec<f64>,
    /// Successive-iterate ratios of every forward Picard solve.
    pub picard_ratios: Vec<Vec<f64>>,
    pub windows_completed: usize,
}

impl SolverState {
    /// PV at the end of the window.
    pub fn q_end(&self) -> &ScalarField3 {
        self.q.last().expect("state has frames")
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + self.window
    }

    pub fn last_delta(&self) -> Option<f64> {
        self.delta_history.last().copied()
    }
}

/// `ρᴺ = sup_{n ≥ N} δⁿ` for every `N`.
pub fn rho_envelope(deltas: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; deltas.len()];
    let mut m = 0.0f64;
    for (i, &d) in deltas.iter().enumerate().rev() {
        m = m.max(d);
        out[i] = m;
    }
    out
}

/// One row of the per-iterate diagnostics log.
#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticsRow {
    pub window: usize,
    pub n: usize,
    pub t0: f64,
    pub delta: f64,
    pub q_max: f64,
    pub energy: f64,
    pub level_means: Vec<f64>,
}

pub fn write_diagnostics_csv<W: Write>(mut w: W, rows: &[DiagnosticsRow]) -> Result<()> {
    let nz = rows.first().map_or(0, |r| r.level_means.len());
    write!(w, "window,n,t0,delta,q_max,energy")?;
    for k in 0..nz {
        write!(w, ",mean_{k}")?;
    }
    writeln!(w)?;
    for r in rows {
        write!(
            w,
            "{},{},{},{:e},{:e},{:e}",
            r.window, r.n, r.t0, r.delta, r.q_max, r.energy
        )?;
        for m in &r.level_means {
            write!(w, ",{m:e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Drift of the conserved quantities between two snapshots, relative to the
/// first where it is nonzero.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Conservation {
    /// Largest per-level mean change, absolute.
    pub level_mean: f64,
    /// Largest per-level `∫q²` change, relative.
    pub enstrophy: f64,
    /// Energy change, relative.
    pub energy: f64,
}

/// Time-window solver bound to an elliptic operator and circulation data.
pub struct Solver {
    ell: Arc<Elliptic>,
    c: CirculationData,
    cfg: SolverConfig,
    outer_tol: f64,
}

/// Converged run: one state per window plus the iterate log.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub q0: ScalarField3,
    pub snapshots: Vec<SolverState>,
    pub diagnostics: Vec<DiagnosticsRow>,
    pub c_hat: f64,
    pub window: f64,
    pub outer_tol: f64,
    /// Backward map from the final time to 0 used for the final PV.
    pub backward: Option<FlowMap>,
}

impl RunOutput {
    pub fn final_q(&self) -> &ScalarField3 {
        self.snapshots.last().map_or(&self.q0, |s| s.q_end())
    }

    pub fn t_end(&self) -> f64 {
        self.snapshots.last().map_or(0.0, |s| s.t_end())
    }

    /// Converged velocity frames of the whole run, in time order.
    pub fn velocity(&self) -> Result<GridVelocity> {
        let mut frames = Vec::new();
        for (w, s) in self.snapshots.iter().enumerate() {
            for (j, (&t, u)) in s.times.iter().zip(&s.u).enumerate() {
                if w > 0 && j == 0 {
                    continue;
                }
                frames.push((t, u.clone()));
            }
        }
        GridVelocity::new(frames)
    }

    /// Forward map from time 0 to `t` through the converged velocity.
    pub fn flow_map(&self, t: f64, max_dt: f64) -> Result<FlowMap> {
        let g = self.q0.grid();
        let u = self.velocity()?;
        FlowMap::identity(g, 0.0, crate::flowmap::Direction::Forward).integrate_to(&u, t, max_dt)
    }

    /// Every δ in the run, window by window.
    pub fn deltas(&self) -> Vec<Vec<f64>> {
        self.snapshots
            .iter()
            .map(|s| s.delta_history.clone())
            .collect()
    }

    /// Largest area distortion of the converged forward maps.
    pub fn max_area_distortion(&self) -> f64 {
        self.snapshots
            .iter()
            .flat_map(|s| s.phi.iter())
            .map(|m| area_distortion(m).max)
            .fold(0.0, f64::max)
    }
}

fn level_square(q: &ScalarField3, k: usize) -> f64 {
    let g = q.grid();
    g.interior()
        .iter()
        .map(|&n| q.get(n, k).powi(2))
        .sum::<f64>()
        * g.cell_area()
}

/// Invert after removing the uniform part of `q` that the circulations do
/// not balance. A uniform source is absorbed by the mode-0 multiplier, so the
/// stream function is unchanged; transport only conserves `∫q` up to the
/// interpolation error, which would otherwise trip the compatibility check.
fn invert_compatible(
    ell: &Elliptic,
    q: &ScalarField3,
    c: &CirculationData,
) -> Result<ScalarField3> {
    let g = ell.grid();
    let vol = g.discrete_area();
    let shift = (q.integral() - c.total()) / vol;
    let q = q.map(|v| v - shift);
    Ok(ell.invert_pv(&q, c)?.psi)
}

impl Solver {
    pub fn new(ell: Arc<Elliptic>, c: CirculationData, cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let outer_tol = cfg
            .outer_tol
            .unwrap_or_else(|| 1e-8 * ell.grid().cross_section().diameter());
        Ok(Self {
            ell,
            c,
            cfg,
            outer_tol,
        })
    }

    pub fn elliptic(&self) -> &Arc<Elliptic> {
        &self.ell
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn outer_tol(&self) -> f64 {
        self.outer_tol
    }

    /// Initial iterate on `[t0, t0 + window]`: the PV is frozen at its
    /// window-start value and the maps are the identity.
    pub fn start_window(
        &self,
        q: &InitialPV,
        t0: f64,
        window: f64,
        windows_completed: usize,
    ) -> SolverState {
        let nf = self.cfg.frames;
        let times: Vec<f64> = (0..=nf)
            .map(|j| t0 + window * j as f64 / nf as f64)
            .collect();
        let g = self.ell.grid();
        SolverState {
            t0,
            window,
            n: 0,
            q: vec![q.field().clone(); nf + 1],
            psi: Vec::new(),
            u: Vec::new(),
            phi: times
                .iter()
                .map(|&t| FlowMap::identity(g, t, crate::flowmap::Direction::Forward))
                .collect(),
            times,
            delta_history: Vec::new(),
            picard_ratios: Vec::new(),
            windows_completed,
        }
    }

    fn steps_per_frame(&self, window: f64) -> usize {
        ((window / self.cfg.frames as f64) / self.cfg.dt)
            .ceil()
            .max(1.0) as usize
    }

    /// One outer iterate: invert every frame of `qⁿ`, solve for the forward
    /// maps, and pull the window's initial PV back through the backward maps.
    pub fn outer_step(&self, q_init: &InitialPV, state: &SolverState) -> Result<SolverState> {
        let step = |i: usize| move |e: QgError| QgError::at_step(i, e);
        let psi: Vec<ScalarField3> = state
            .q
            .iter()
            .map(|q| invert_compatible(&self.ell, q, &self.c))
            .collect::<Result<_>>()
            .map_err(step(1))?;
        let u: Vec<Arc<VectorField3>> =
            psi.iter().map(|p| Arc::new(self.ell.velocity(p))).collect();
        let vel = GridVelocity::new(state.times.iter().copied().zip(u.iter().cloned()).collect())
            .map_err(step(2))?;

        let g = self.ell.grid();
        let spf = self.steps_per_frame(state.window);
        let nf = self.cfg.frames;
        let fwd: PicardTrajectory =
            picard_between(g, &vel, state.t0, state.t_end(), spf * nf, &self.cfg.picard)
                .map_err(step(3))?;
        let phi: Vec<FlowMap> = (0..=nf).map(|j| fwd.maps[j * spf].clone()).collect();
        let delta = phi
            .iter()
            .zip(&state.phi)
            .map(|(a, b)| delta_metric(a, b))
            .try_fold(0.0f64, |m, d| d.map(|d| m.max(d)))
            .map_err(step(3))?;

        let mut q = Vec::with_capacity(nf + 1);
        q.push(q_init.field().clone());
        for j in 1..=nf {
            let back = picard_between(g, &vel, state.times[j], state.t0, spf * j, &self.cfg.picard)
                .map_err(step(4))?;
            q.push(pullback(q_init, back.last(), self.cfg.interpolation).map_err(step(4))?);
        }

        let mut delta_history = state.delta_history.clone();
        delta_history.push(delta);
        let mut picard_ratios = state.picard_ratios.clone();
        picard_ratios.push(fwd.ratios());
        Ok(SolverState {
            t0: state.t0,
            window: state.window,
            n: state.n + 1,
            times: state.times.clone(),
            q,
            psi,
            u,
            phi,
            delta_history,
            picard_ratios,
            windows_completed: state.windows_completed,
        })
    }

    /// Iterate on one window until `δⁿ ≤ outer_tol`.
    pub fn solve_window(
        &self,
        q_init: &InitialPV,
        t0: f64,
        window: f64,
        windows_completed: usize,
        log: &mut Vec<DiagnosticsRow>,
    ) -> Result<SolverState> {
        let mut state = self.start_window(q_init, t0, window, windows_completed);
        loop {
            state = self.outer_step(q_init, &state)?;
            let delta = state.last_delta().unwrap_or(0.0);
            let last = state.psi.last().expect("frames inverted");
            log.push(DiagnosticsRow {
                window: windows_completed,
                n: state.n,
                t0,
                delta,
                q_max: state.q_end().max_abs(),
                energy: self.ell.bilinear(last, last),
                level_means: (0..self.ell.grid().nz)
                    .map(|k| state.q_end().level_mean(k))
                    .collect(),
            });
            if delta <= self.outer_tol {
                return Ok(state);
            }
            let h = &state.delta_history;
            let stalled = h.len() >= 3 && h[h.len() - 3..].windows(2).all(|w| w[1] >= w[0]);
            if state.n >= self.cfg.outer_max_iter || stalled {
                let ratios = h
                    .windows(2)
                    .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
                    .collect();
                return Err(QgError::Contraction { ratios });
            }
        }
    }

    /// Window length for this configuration and initial bound.
    pub fn window_for(&self, q_bound: f64) -> Result<(f64, f64)> {
        if let Some(w) = self.cfg.window {
            return Ok((w, self.cfg.c_hat.unwrap_or(f64::NAN)));
        }
        let c_hat = match self.cfg.c_hat {
            Some(c) => c,
            None => estimate_c_hat(&self.ell, self.cfg.c_hat_pairs, self.cfg.c_hat_seed)?,
        };
        Ok((window_length(self.cfg.sigma, c_hat, q_bound), c_hat))
    }

    /// Solve on `[0, t_end]` by window continuation.
    pub fn run(&self, q0: &InitialPV, t_end: f64) -> Result<RunOutput> {
        if !(t_end >= 0.0) {
            return Err(QgError::Domain(format!(
                "t_end = {t_end} must be non-negative"
            )));
        }
        let report = crate::elliptic::check_compatibility(q0.field(), &self.c, self.ell.options());
        if !report.compatible {
            return Err(QgError::Compatibility {
                defect: report.defect,
                tolerance: report.tolerance,
            });
        }
        let mut out = RunOutput {
            q0: q0.field().clone(),
            snapshots: Vec::new(),
            diagnostics: Vec::new(),
            c_hat: f64::NAN,
            window: 0.0,
            outer_tol: self.outer_tol,
            backward: None,
        };
        if t_end == 0.0 {
            return Ok(out);
        }
        let (window, c_hat) = self.window_for(q0.bound())?;
        out.window = window;
        out.c_hat = c_hat;
        let g = self.ell.grid();
        let mut q_init = q0.clone();
        let mut history: Vec<(f64, Arc<VectorField3>)> = Vec::new();
        let mut t = 0.0;
        let mut w = 0;
        while t < t_end * (1.0 - 1e-12) {
            let len = window.min(t_end - t);
            let mut state = self.solve_window(&q_init, t, len, w, &mut out.diagnostics)?;
            for (j, (&s, u)) in state.times.iter().zip(&state.u).enumerate() {
                if j > 0 || history.is_empty() {
                    history.push((s, u.clone()));
                }
            }
            t = state.t_end();
            w += 1;
            // the window's end PV is rebuilt from q₀ through the whole
            // backward trajectory, so interpolation errors do not pile up
            // from window to window
            let vel = GridVelocity::new(history.clone())?;
            let mut back = FlowMap::identity(g, t, crate::flowmap::Direction::Backward)
                .integrate_to(&vel, 0.0, self.cfg.dt)
                .map_err(|e| QgError::at_step(4, e))?;
            back.t = t;
            let q_end =
                pullback(q0, &back, self.cfg.interpolation).map_err(|e| QgError::at_step(4, e))?;
            *state.q.last_mut().expect("state has frames") = q_end.clone();
            q_init = InitialPV::new(q_end, false)?;
            out.snapshots.push(state);
            out.backward = Some(back);
        }
        Ok(out)
    }

    /// Drift from the initial PV to the final state of a run.
    pub fn conservation(&self, run: &RunOutput) -> Result<Conservation> {
        let (q0, q1) = (&run.q0, run.final_q());
        let g = q0.grid();
        let mut out = Conservation::default();
        for k in 0..g.nz {
            out.level_mean = out
                .level_mean
                .max((q1.level_mean(k) - q0.level_mean(k)).abs());
            let (e0, e1) = (level_square(q0, k), level_square(q1, k));
            if e0 > 0.0 {
                out.enstrophy = out.enstrophy.max((e1 - e0).abs() / e0);
            }
        }
        let (p0, p1) = (self.invert(q0)?, self.invert(q1)?);
        let (b0, b1) = (self.ell.bilinear(&p0, &p0), self.ell.bilinear(&p1, &p1));
        if b0 > 0.0 {
            out.energy = (b1 - b0).abs() / b0;
        }
        Ok(out)
    }

    /// Stream function of `q` with this solver's circulations.
    pub fn invert(&self, q: &ScalarField3) -> Result<ScalarField3> {
        invert_compatible(&self.ell, q, &self.c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Grid;
    use proptest::prelude::*;

    fn small_solver(n: usize, sigma: f64) -> (Arc<Grid>, Solver) {
        let spec = crate::geometry::DomainSpec::annulus(1.0, 2.0);
        let g = Arc::new(
            crate::geometry::discretize(&crate::geometry::build_domain(&spec).unwrap(), n, n, 3)
                .unwrap(),
        );
        let ell = Arc::new(Elliptic::new(g.clone(), Default::default()));
        let cfg = SolverConfig {
            c_hat: Some(2.0),
            sigma,
            ..Default::default()
        };
        (
            g.clone(),
            Solver::new(ell, CirculationData::zeros(2, g.nz), cfg).unwrap(),
        )
    }

    #[test]
    fn delta_metric_of_shifted_maps() {
        let spec = crate::geometry::DomainSpec::unit_square();
        let g = Arc::new(
            crate::geometry::discretize(&crate::geometry::build_domain(&spec).unwrap(), 16, 16, 3)
                .unwrap(),
        );
        let id = FlowMap::identity(&g, 0.0, crate::flowmap::Direction::Forward);
        assert_eq!(delta_metric(&id, &id).unwrap(), 0.0);
        let shifted: Vec<_> = id.positions().iter().map(|p| [p[0] + 1e-3, p[1]]).collect();
        let b = id.with_positions(shifted, 0.0, id.direction).unwrap();
        assert!((delta_metric(&id, &b).unwrap() - 1e-3).abs() < 1e-15);
        let other = Arc::new(
            crate::geometry::discretize(&crate::geometry::build_domain(&spec).unwrap(), 12, 12, 3)
                .unwrap(),
        );
        let c = FlowMap::identity(&other, 0.0, crate::flowmap::Direction::Forward);
        assert!(matches!(delta_metric(&id, &c), Err(QgError::Seed(_))));
    }

    #[test]
    fn rho_envelope_is_the_running_tail_max() {
        assert_eq!(
            rho_envelope(&[1.0, 0.1, 0.3, 0.01]),
            vec![1.0, 0.3, 0.3, 0.01]
        );
        assert!(rho_envelope(&[]).is_empty());
    }

    #[test]
    fn zero_pv_is_a_fixed_point() {
        let (g, solver) = small_solver(16, 0.5);
        let q0 = InitialPV::new(ScalarField3::zeros(&g), true).unwrap();
        let out = solver.run(&q0, 0.05).unwrap();
        assert!(!out.snapshots.is_empty());
        assert_eq!(out.final_q().max_abs(), 0.0);
        assert!(out.deltas().iter().flatten().all(|&d| d == 0.0));
    }

    #[test]
    fn zero_end_time_returns_no_windows() {
        let (g, solver) = small_solver(16, 0.5);
        let q0 = InitialPV::new(crate::presets::dipole(&g, 1.0), true).unwrap();
        let out = solver.run(&q0, 0.0).unwrap();
        assert!(out.snapshots.is_empty());
        assert_eq!(out.final_q().values(), q0.field().values());
    }

    #[test]
    fn uniform_pv_without_circulation_is_rejected() {
        let (g, solver) = small_solver(16, 0.5);
        let q0 = InitialPV::new(ScalarField3::from_fn(&g, |_, _, _| 1.0), false).unwrap();
        assert!(matches!(
            solver.run(&q0, 0.1),
            Err(QgError::Compatibility { .. })
        ));
    }

    #[test]
    fn max_principle_and_contraction_on_a_short_run() {
        let (g, solver) = small_solver(24, 0.5);
        let q0 = InitialPV::new(crate::presets::dipole(&g, 1.0), true).unwrap();
        let out = solver.run(&q0, 0.06).unwrap();
        for s in &out.snapshots {
            assert!(s.q.iter().all(|q| q.max_abs() <= q0.bound()));
            assert!(s.last_delta().unwrap() <= out.outer_tol);
            let env = rho_envelope(&s.delta_history);
            assert!(env.windows(2).all(|w| w[1] <= w[0]));
        }
        assert_eq!(
            out.diagnostics.len(),
            out.snapshots.iter().map(|s| s.n).sum::<usize>()
        );
    }

    #[test]
    fn halving_sigma_barely_changes_the_result() {
        let finals: Vec<RunOutput> = [0.5, 0.25]
            .iter()
            .map(|&sigma| {
                let (g, solver) = small_solver(24, sigma);
                let q0 = InitialPV::new(crate::presets::dipole(&g, 1.0), true).unwrap();
                solver.run(&q0, 0.1).unwrap()
            })
            .collect();
        assert!(finals[1].snapshots.len() > finals[0].snapshots.len());
        let d = finals[0].final_q().l1_distance(finals[1].final_q());
        assert!(d <= 5.0 * finals[0].outer_tol, "{d:e}");
    }

    #[test]
    fn conservation_drift_shrinks_under_refinement() {
        let drift: Vec<Conservation> = [16, 32]
            .iter()
            .map(|&n| {
                let (g, solver) = small_solver(n, 0.5);
                let q0 = InitialPV::new(crate::presets::dipole(&g, 1.0), true).unwrap();
                solver.conservation(&solver.run(&q0, 0.1).unwrap()).unwrap()
            })
            .collect();
        assert!(drift[1].level_mean < 1e-12);
        assert!(
            drift[1].enstrophy < drift[0].enstrophy && drift[1].energy < drift[0].energy,
            "{drift:?}"
        );
    }

    #[test]
    fn lambda_values() {
        assert_eq!(lambda(1.0), 1.0);
        assert_eq!(lambda(2.0), 1.0);
        // (1 + ln 2) / 2
        assert!((lambda(0.5) - 0.846_573_590_279_972_6).abs() < 1e-15);
    }

    #[test]
    fn majorant_equality_case() {
        for d in [0.01, 0.2, 0.7] {
            assert!((majorant(d, d).unwrap() - lambda(d)).abs() < 1e-15);
        }
        assert!(majorant(0.5, 0.0).is_err());
        assert!(majorant(0.5, 1.0).is_err());
    }

    #[test]
    fn gronwall_closed_forms() {
        let b = gronwall_bound(
            Coefficient::Constant(1.0),
            Coefficient::Constant(1.0),
            0.0,
            1.3,
        )
        .unwrap();
        assert!((b - 1.3f64.exp()).abs() <= 1e-15 * b);
        let b = gronwall_bound(
            Coefficient::Constant(2.5),
            Coefficient::Constant(0.0),
            0.0,
            4.0,
        )
        .unwrap();
        assert_eq!(b, 2.5);
        let (c, eps, t) = (1.7, 0.05f64, 0.4);
        let alpha = move |s: f64| c * eps * s;
        let b = gronwall_bound(
            Coefficient::Function(&alpha),
            Coefficient::Constant(-c * eps.ln()),
            0.0,
            t,
        )
        .unwrap();
        let want = c * eps * t * (-c * eps.ln() * t).exp();
        assert!((b - want).abs() <= 4.0 * f64::EPSILON * want);
    }

    #[test]
    fn gronwall_rejects_negative_beta() {
        assert!(gronwall_bound(
            Coefficient::Constant(1.0),
            Coefficient::Constant(-0.1),
            0.0,
            1.0
        )
        .is_err());
        let f = |s: f64| s - 0.5;
        assert!(gronwall_bound(
            Coefficient::Constant(1.0),
            Coefficient::Function(&f),
            0.0,
            1.0
        )
        .is_err());
    }

    #[test]
    fn gronwall_function_beta_matches_closed_form() {
        let f = |s: f64| 2.0 * s;
        let b = gronwall_bound(
            Coefficient::Constant(1.0),
            Coefficient::Function(&f),
            0.0,
            1.5,
        )
        .unwrap();
        assert!((b - 2.25f64.exp()).abs() < 1e-12 * b);
    }

    proptest! {
        #[test]
        fn lambda_below_majorant(d in 1e-6f64..3.0, eps in 1e-4f64..0.9999) {
            prop_assert!(lambda(d) <= majorant(d, eps).unwrap() + 1e-12);
        }
    }
}
