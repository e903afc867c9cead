//! Explicit finite-difference solver for the scalar convection-diffusion
//! equation on a rectangle with homogeneous Neumann boundaries:
//!
//! ```text
//!     du/dt = lap(u) - v(t) . grad(u) + S(x, y),      u(x, y, 0) = 0
//! ```
//!
//! Diffusion uses second-order central differences, advection first-order
//! upwinding, time integration forward Euler. Boundary ghosts mirror the
//! first interior node, which makes the discrete diffusion operator conserve
//! trapezoid-rule mass exactly.
//!
//! Each time step applies a linear operator `A_k = I + dt_k (L - Adv(t_k))`
//! followed by the source injection `dt_k S`. Because the initial condition
//! is zero and the source enters additively, a point observation of the
//! solution is a fixed linear functional of the nodal source values; the
//! adjoint pass below materializes that functional as an "influence field"
//! by marching transposed steps backwards, which is what all source-parameter
//! gradients in this crate are built from.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldSeries, Grid2D};

/// Time-linear velocity field v(t) = (coeff * t, coeff * t).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Velocity {
    pub coeff: f64,
}

impl Velocity {
    pub fn at(&self, t: f64) -> (f64, f64) {
        (self.coeff * t, self.coeff * t)
    }

    fn max_speed(&self, t_end: f64) -> f64 {
        let (vx, vy) = self.at(t_end);
        vx.abs().max(vy.abs())
    }
}

/// Stability and robustness knobs for the explicit scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    /// Safety factor applied to the stability-limited step.
    pub dt_factor: f64,
    /// Hard override of the step size; bypasses the stability heuristic.
    pub dt_override: Option<f64>,
    /// Field magnitude beyond which the march aborts as unstable.
    pub blowup: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self { dt_factor: 0.4, dt_override: None, blowup: 1e6 }
    }
}

/// Time steps taken by the march: `(t_k, dt_k)` per step, with snapshot
/// times landing exactly on step boundaries.
#[derive(Debug, Clone)]
pub struct StepSchedule {
    pub steps: Vec<(f64, f64)>,
    /// Cumulative step count at which each snapshot is taken.
    pub snapshot_steps: Vec<usize>,
    pub snapshot_times: Vec<f64>,
}

fn build_schedule(snapshot_times: &[f64], dt_max: f64) -> Result<StepSchedule> {
    if snapshot_times.is_empty() {
        return Err(Error::Config("at least one snapshot time is required".into()));
    }
    let mut prev = 0.0;
    let mut steps = Vec::new();
    let mut snapshot_steps = Vec::new();
    for &t in snapshot_times {
        if t <= prev {
            return Err(Error::Config(format!(
                "snapshot times must be strictly increasing and positive, got {t} after {prev}"
            )));
        }
        let span = t - prev;
        let n = (span / dt_max).ceil().max(1.0) as usize;
        let dt = span / n as f64;
        for k in 0..n {
            steps.push((prev + k as f64 * dt, dt));
        }
        snapshot_steps.push(steps.len());
        prev = t;
    }
    Ok(StepSchedule { steps, snapshot_steps, snapshot_times: snapshot_times.to_vec() })
}

/// Immutable solve setup: grid, velocity, schedule. One context serves any
/// number of source fields, forward or adjoint, from any thread.
#[derive(Debug, Clone)]
pub struct SolveContext {
    pub grid: Grid2D,
    pub velocity: Velocity,
    pub params: SolverParams,
    pub schedule: StepSchedule,
}

impl SolveContext {
    pub fn new(
        grid: Grid2D,
        velocity: Velocity,
        snapshot_times: &[f64],
        params: SolverParams,
    ) -> Result<Self> {
        let h = grid.hx().min(grid.hy());
        let t_end = *snapshot_times.last().ok_or_else(|| {
            Error::Config("at least one snapshot time is required".into())
        })?;
        let dt_max = match params.dt_override {
            Some(dt) => dt,
            None => {
                let diff_limit = h * h / 4.0;
                let vmax = velocity.max_speed(t_end);
                let adv_limit = if vmax > 0.0 { h / vmax } else { f64::INFINITY };
                params.dt_factor * diff_limit.min(adv_limit)
            }
        };
        if dt_max <= 0.0 || dt_max.is_nan() {
            return Err(Error::Config(format!("step size must be positive, got {dt_max}")));
        }
        let schedule = build_schedule(snapshot_times, dt_max)?;
        Ok(Self { grid, velocity, params, schedule })
    }

    /// March the field from zero initial condition, returning snapshots at
    /// the scheduled times.
    pub fn solve(&self, source: &ArrayView2<f64>) -> Result<FieldSeries> {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        assert_eq!(source.dim(), (nx, ny), "source field shape must match the grid");
        let mut u = Array2::<f64>::zeros((nx, ny));
        let mut next = Array2::<f64>::zeros((nx, ny));
        let mut fields = Vec::with_capacity(self.schedule.snapshot_times.len());
        let mut snap_iter = self.schedule.snapshot_steps.iter().peekable();
        if let Some(&&0) = snap_iter.peek() {
            unreachable!("snapshots start after at least one step");
        }
        for (k, &(t, dt)) in self.schedule.steps.iter().enumerate() {
            let (vx, vy) = self.velocity.at(t);
            let mut maxabs = 0.0f64;
            step_forward(&u.view(), source, &mut next, &self.grid, vx, vy, dt, &mut maxabs);
            std::mem::swap(&mut u, &mut next);
            if maxabs > self.params.blowup {
                return Err(Error::Instability { max: maxabs, bound: self.params.blowup, t: t + dt });
            }
            while let Some(&&s) = snap_iter.peek() {
                if s == k + 1 {
                    fields.push(u.clone());
                    snap_iter.next();
                } else {
                    break;
                }
            }
        }
        Ok(FieldSeries { grid: self.grid.clone(), times: self.schedule.snapshot_times.clone(), fields })
    }

    /// Influence field of a linear observation functional taken at snapshot
    /// index `snap`: the nodal weights `w` such that observing any solve of
    /// this context equals `sum_ij w[i,j] * S[i,j]`.
    ///
    /// `terminal` holds the observation's weights on the snapshot field
    /// (for a point probe: the four bilinear weights of its cell).
    pub fn influence_field(&self, snap: usize, terminal: &[(usize, usize, f64)]) -> Result<Array2<f64>> {
        let n_steps = *self
            .schedule
            .snapshot_steps
            .get(snap)
            .ok_or(Error::MissingSnapshot { t: f64::NAN })?;
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let mut lambda = Array2::<f64>::zeros((nx, ny));
        for &(i, j, w) in terminal {
            lambda[[i, j]] += w;
        }
        let mut acc = Array2::<f64>::zeros((nx, ny));
        let mut scratch = Array2::<f64>::zeros((nx, ny));
        for k in (0..n_steps).rev() {
            let (t, dt) = self.schedule.steps[k];
            acc.scaled_add(dt, &lambda);
            let (vx, vy) = self.velocity.at(t);
            step_transpose(&lambda.view(), &mut scratch, &self.grid, vx, vy, dt);
            std::mem::swap(&mut lambda, &mut scratch);
        }
        Ok(acc)
    }

    /// Gradient of a point-probe observation with respect to source
    /// parameters, given the nodal fields dS/dtheta_p. The observation is
    /// `sum w_ij u[i,j]` at snapshot `snap` with weights `terminal`.
    pub fn adjoint_point_sensitivity(
        &self,
        snap: usize,
        terminal: &[(usize, usize, f64)],
        jacobian_fields: &[ArrayView2<f64>],
    ) -> Result<Vec<f64>> {
        let influence = self.influence_field(snap, terminal)?;
        Ok(jacobian_fields
            .iter()
            .map(|f| {
                assert_eq!(f.dim(), influence.dim(), "jacobian field shape must match the grid");
                influence.iter().zip(f.iter()).map(|(a, b)| a * b).sum()
            })
            .collect())
    }
}

/// One row of the step operator `A = I + dt (L - Adv)` at node (i, j):
/// emits `(i', j', weight)` for each stencil neighbor, with Neumann ghosts
/// folded back onto interior nodes. Forward steps gather with these weights;
/// transposed steps scatter with the same ones, so the adjoint is the exact
/// transpose by construction.
#[inline]
fn stencil_row<F: FnMut(usize, usize, f64)>(
    i: usize,
    j: usize,
    grid: &Grid2D,
    vx: f64,
    vy: f64,
    dt: f64,
    mut emit: F,
) {
    let (nx, ny) = (grid.nx, grid.ny);
    let cx = dt / (grid.hx() * grid.hx());
    let cy = dt / (grid.hy() * grid.hy());
    let ax = dt * vx / grid.hx();
    let ay = dt * vy / grid.hy();
    let im = if i == 0 { 1 } else { i - 1 };
    let ip = if i == nx - 1 { nx - 2 } else { i + 1 };
    let jm = if j == 0 { 1 } else { j - 1 };
    let jp = if j == ny - 1 { ny - 2 } else { j + 1 };
    let mut center = 1.0 - 2.0 * cx - 2.0 * cy;
    let mut wl = cx;
    let mut wr = cx;
    let mut wd = cy;
    let mut wu = cy;
    if vx >= 0.0 {
        center -= ax;
        wl += ax;
    } else {
        center += ax;
        wr -= ax;
    }
    if vy >= 0.0 {
        center -= ay;
        wd += ay;
    } else {
        center += ay;
        wu -= ay;
    }
    emit(i, j, center);
    emit(im, j, wl);
    emit(ip, j, wr);
    emit(i, jm, wd);
    emit(i, jp, wu);
}

#[allow(clippy::too_many_arguments)]
fn step_forward(
    u: &ArrayView2<f64>,
    source: &ArrayView2<f64>,
    out: &mut Array2<f64>,
    grid: &Grid2D,
    vx: f64,
    vy: f64,
    dt: f64,
    maxabs: &mut f64,
) {
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            let mut acc = dt * source[[i, j]];
            stencil_row(i, j, grid, vx, vy, dt, |ii, jj, w| {
                acc += w * u[[ii, jj]];
            });
            out[[i, j]] = acc;
            let a = acc.abs();
            if a > *maxabs {
                *maxabs = a;
            }
        }
    }
}

fn step_transpose(
    lambda: &ArrayView2<f64>,
    out: &mut Array2<f64>,
    grid: &Grid2D,
    vx: f64,
    vy: f64,
    dt: f64,
) {
    out.fill(0.0);
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            let l = lambda[[i, j]];
            if l == 0.0 {
                continue;
            }
            stencil_row(i, j, grid, vx, vy, dt, |ii, jj, w| {
                out[[ii, jj]] += w * l;
            });
        }
    }
}

/// Gaussian source bump centered at (sx, sy) with width `h` and total
/// strength `s`: s / (2 pi h^2) * exp(-r^2 / (2 h^2)).
pub fn gaussian_source(x: f64, y: f64, sx: f64, sy: f64, h: f64, s: f64) -> f64 {
    let r2 = (sx - x) * (sx - x) + (sy - y) * (sy - y);
    s / (2.0 * std::f64::consts::PI * h * h) * (-r2 / (2.0 * h * h)).exp()
}

/// Partial derivatives of `gaussian_source` in (sx, sy, h, s).
pub fn gaussian_source_grad(x: f64, y: f64, sx: f64, sy: f64, h: f64, s: f64) -> [f64; 4] {
    let v = gaussian_source(x, y, sx, sy, h, s);
    let r2 = (sx - x) * (sx - x) + (sy - y) * (sy - y);
    [
        v * (x - sx) / (h * h),
        v * (y - sy) / (h * h),
        v * (r2 / (h * h * h) - 2.0 / h),
        v / s,
    ]
}

/// Rational source bump with the same center/width parameters but a
/// polynomially decaying tail: 3 s / (pi (r^2 / (2 h^2) + 2 h^2)).
pub fn cauchy_source(x: f64, y: f64, sx: f64, sy: f64, h: f64, s: f64) -> f64 {
    let r2 = (sx - x) * (sx - x) + (sy - y) * (sy - y);
    3.0 * s / (std::f64::consts::PI * (r2 / (2.0 * h * h) + 2.0 * h * h))
}

/// Partial derivatives of `cauchy_source` in (sx, sy, h, s).
pub fn cauchy_source_grad(x: f64, y: f64, sx: f64, sy: f64, h: f64, s: f64) -> [f64; 4] {
    let r2 = (sx - x) * (sx - x) + (sy - y) * (sy - y);
    let denom = r2 / (2.0 * h * h) + 2.0 * h * h;
    let v = 3.0 * s / (std::f64::consts::PI * denom);
    let dv_ddenom = -v / denom;
    [
        dv_ddenom * (sx - x) / (h * h),
        dv_ddenom * (sy - y) / (h * h),
        dv_ddenom * (-r2 / (h * h * h) + 4.0 * h),
        v / s,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_ctx(n: usize, coeff: f64, times: &[f64]) -> SolveContext {
        let grid = Grid2D::testbed(n).unwrap();
        SolveContext::new(grid, Velocity { coeff }, times, SolverParams::default()).unwrap()
    }

    #[test]
    fn zero_source_stays_zero() {
        let ctx = small_ctx(21, 50.0, &[0.05]);
        let source = ctx.grid.sample(|_, _| 0.0);
        let series = ctx.solve(&source.view()).unwrap();
        assert!(series.fields[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn schedule_hits_snapshots_and_respects_bound() {
        let ctx = small_ctx(21, 50.0, &[0.03, 0.035, 0.055]);
        let dt_bound = ctx.schedule.steps.iter().map(|&(_, dt)| dt).fold(0.0, f64::max);
        let h = ctx.grid.hx();
        assert!(dt_bound <= 0.4 * (h * h / 4.0) + 1e-15);
        let mut t = 0.0;
        for &(tk, dt) in &ctx.schedule.steps {
            assert_relative_eq!(tk, t, epsilon = 1e-12);
            t += dt;
        }
        assert_relative_eq!(t, 0.055, epsilon = 1e-12);
        for (s, &t) in ctx.schedule.snapshot_times.iter().enumerate() {
            let k = ctx.schedule.snapshot_steps[s];
            let reached: f64 = ctx.schedule.steps[..k].iter().map(|&(_, dt)| dt).sum();
            assert_relative_eq!(reached, t, epsilon = 1e-12);
        }
    }

    #[test]
    fn pure_diffusion_conserves_injected_mass() {
        let ctx = small_ctx(21, 0.0, &[0.02, 0.05]);
        let source = ctx
            .grid
            .sample(|x, y| gaussian_source(x, y, 0.3, -0.2, 0.4, 2.0));
        let series = ctx.solve(&source.view()).unwrap();
        let injected_rate = ctx.grid.integrate(&source);
        for (field, &t) in series.fields.iter().zip(&series.times) {
            let mass = ctx.grid.integrate(field);
            assert_relative_eq!(mass, t * injected_rate, max_relative = 1e-6);
        }
    }

    #[test]
    fn solution_scales_linearly_with_source_strength() {
        let ctx = small_ctx(17, 50.0, &[0.04]);
        let s1 = ctx.grid.sample(|x, y| gaussian_source(x, y, 0.25, 0.25, 0.05, 1.0));
        let s2 = ctx.grid.sample(|x, y| 2.0 * gaussian_source(x, y, 0.25, 0.25, 0.05, 1.0));
        let u1 = ctx.solve(&s1.view()).unwrap();
        let u2 = ctx.solve(&s2.view()).unwrap();
        for (a, b) in u1.fields[0].iter().zip(u2.fields[0].iter()) {
            let scaled = 2.0 * a;
            assert!(
                (scaled - b).abs() <= 1e-12 * b.abs().max(1e-30),
                "doubling the source must double the field: {scaled} vs {b}"
            );
        }
    }

    #[test]
    fn oversized_step_reports_instability() {
        let grid = Grid2D::testbed(21).unwrap();
        let params = SolverParams { dt_override: Some(0.05), ..Default::default() };
        let ctx = SolveContext::new(grid, Velocity { coeff: 0.0 }, &[1.0], params).unwrap();
        let source = ctx.grid.sample(|x, y| gaussian_source(x, y, 0.0, 0.0, 0.3, 5.0));
        match ctx.solve(&source.view()) {
            Err(Error::Instability { max, bound, .. }) => {
                assert!(max > bound);
            }
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn plume_advects_downwind_and_keeps_growing() {
        let ctx = small_ctx(41, 50.0, &[0.03, 0.15]);
        let source = ctx
            .grid
            .sample(|x, y| gaussian_source(x, y, 0.25, 0.25, 0.05, 2.0));
        let series = ctx.solve(&source.view()).unwrap();
        let centroid = |f: &Array2<f64>| {
            let mut m = 0.0;
            let mut cx = 0.0;
            let mut cy = 0.0;
            for i in 0..ctx.grid.nx {
                for j in 0..ctx.grid.ny {
                    let w = f[[i, j]].max(0.0);
                    m += w;
                    cx += w * ctx.grid.x(i);
                    cy += w * ctx.grid.y(j);
                }
            }
            (cx / m, cy / m)
        };
        let (x0, y0) = centroid(&series.fields[0]);
        let (x1, y1) = centroid(&series.fields[1]);
        assert!(x1 > x0 && y1 > y0, "plume should drift toward +x, +y");
        // the ever-stronger wind flattens the near-source peak at late times,
        // but injected mass keeps accumulating while the plume is inside
        let m0 = ctx.grid.integrate(&series.fields[0]);
        let m1 = ctx.grid.integrate(&series.fields[1]);
        assert!(
            m1 > 3.0 * m0,
            "five times the injection span should hold several times the mass: {m0} -> {m1}"
        );
    }

    #[test]
    fn transpose_step_is_exact_adjoint() {
        let ctx = small_ctx(13, 50.0, &[0.05]);
        let mut rng = crate::rngutil::SeedTree::new(42).rng();
        use rand::Rng;
        let u = ctx.grid.sample(|_, _| rng.random_range(-1.0..1.0));
        let lam = ctx.grid.sample(|_, _| rng.random_range(-1.0..1.0));
        let (vx, vy) = ctx.velocity.at(0.03);
        let dt = 1e-3;
        let mut au = Array2::zeros(u.dim());
        let mut dummy = 0.0;
        let zero = ctx.grid.sample(|_, _| 0.0);
        step_forward(&u.view(), &zero.view(), &mut au, &ctx.grid, vx, vy, dt, &mut dummy);
        let mut atl = Array2::zeros(u.dim());
        step_transpose(&lam.view(), &mut atl, &ctx.grid, vx, vy, dt);
        let lhs: f64 = lam.iter().zip(au.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = atl.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-13);
    }

    #[test]
    fn influence_field_reproduces_observation() {
        // <w, S> must equal the probed forward solve for any source.
        let ctx = small_ctx(15, 30.0, &[0.04]);
        let source = ctx.grid.sample(|x, y| gaussian_source(x, y, 0.3, 0.2, 0.3, 1.5));
        let series = ctx.solve(&source.view()).unwrap();
        // probe a single node
        let (pi, pj) = (9, 8);
        let w = ctx.influence_field(0, &[(pi, pj, 1.0)]).unwrap();
        let via_adjoint: f64 = w.iter().zip(source.iter()).map(|(a, b)| a * b).sum();
        assert_relative_eq!(via_adjoint, series.fields[0][[pi, pj]], max_relative = 1e-12);
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let ctx = small_ctx(11, 20.0, &[0.03]);
        let (pi, pj) = (7, 6);
        let theta = (0.45, 0.25, 0.3, 2.0);
        let probe = |sx: f64, sy: f64, h: f64, s: f64| -> f64 {
            let src = ctx.grid.sample(|x, y| gaussian_source(x, y, sx, sy, h, s));
            ctx.solve(&src.view()).unwrap().fields[0][[pi, pj]]
        };
        let jac: Vec<Array2<f64>> = (0..4)
            .map(|p| {
                ctx.grid
                    .sample(|x, y| gaussian_source_grad(x, y, theta.0, theta.1, theta.2, theta.3)[p])
            })
            .collect();
        let jac_views: Vec<_> = jac.iter().map(|a| a.view()).collect();
        let grad = ctx
            .adjoint_point_sensitivity(0, &[(pi, pj, 1.0)], &jac_views)
            .unwrap();
        let h = 1e-5;
        let fd = [
            (probe(theta.0 + h, theta.1, theta.2, theta.3)
                - probe(theta.0 - h, theta.1, theta.2, theta.3))
                / (2.0 * h),
            (probe(theta.0, theta.1 + h, theta.2, theta.3)
                - probe(theta.0, theta.1 - h, theta.2, theta.3))
                / (2.0 * h),
            (probe(theta.0, theta.1, theta.2 + h, theta.3)
                - probe(theta.0, theta.1, theta.2 - h, theta.3))
                / (2.0 * h),
            (probe(theta.0, theta.1, theta.2, theta.3 + h)
                - probe(theta.0, theta.1, theta.2, theta.3 - h))
                / (2.0 * h),
        ];
        for p in 0..4 {
            assert_relative_eq!(grad[p], fd[p], max_relative = 1e-6);
        }
    }

    #[test]
    fn source_shapes_match_hand_values() {
        // peak values at the center, from the closed forms
        let g = gaussian_source(0.25, 0.25, 0.25, 0.25, 2.0, 0.05);
        assert_relative_eq!(g, 0.05 / (8.0 * std::f64::consts::PI), epsilon = 1e-15);
        let c = cauchy_source(0.25, 0.25, 0.25, 0.25, 0.05, 2.0);
        assert_relative_eq!(c, 6.0 / (std::f64::consts::PI * 0.005), epsilon = 1e-10);
        // polynomial tail dominates the exponential one far from the center
        let far_g = gaussian_source(1.25, 0.25, 0.25, 0.25, 0.05, 2.0);
        let far_c = cauchy_source(1.25, 0.25, 0.25, 0.25, 0.05, 2.0);
        assert!(far_c > 1e3 * far_g, "rational tail must be heavier");
    }

    #[test]
    fn source_grads_match_finite_differences() {
        let (x, y) = (0.4, -0.3);
        let (sx, sy, hh, s) = (0.25, 0.2, 0.31, 1.7);
        let h = 1e-6;
        let g = gaussian_source_grad(x, y, sx, sy, hh, s);
        let c = cauchy_source_grad(x, y, sx, sy, hh, s);
        let fd_g = [
            (gaussian_source(x, y, sx + h, sy, hh, s) - gaussian_source(x, y, sx - h, sy, hh, s)) / (2.0 * h),
            (gaussian_source(x, y, sx, sy + h, hh, s) - gaussian_source(x, y, sx, sy - h, hh, s)) / (2.0 * h),
            (gaussian_source(x, y, sx, sy, hh + h, s) - gaussian_source(x, y, sx, sy, hh - h, s)) / (2.0 * h),
            (gaussian_source(x, y, sx, sy, hh, s + h) - gaussian_source(x, y, sx, sy, hh, s - h)) / (2.0 * h),
        ];
        let fd_c = [
            (cauchy_source(x, y, sx + h, sy, hh, s) - cauchy_source(x, y, sx - h, sy, hh, s)) / (2.0 * h),
            (cauchy_source(x, y, sx, sy + h, hh, s) - cauchy_source(x, y, sx, sy - h, hh, s)) / (2.0 * h),
            (cauchy_source(x, y, sx, sy, hh + h, s) - cauchy_source(x, y, sx, sy, hh - h, s)) / (2.0 * h),
            (cauchy_source(x, y, sx, sy, hh, s + h) - cauchy_source(x, y, sx, sy, hh, s - h)) / (2.0 * h),
        ];
        for p in 0..4 {
            assert_relative_eq!(g[p], fd_g[p], max_relative = 1e-7);
            assert_relative_eq!(c[p], fd_c[p], max_relative = 1e-7);
        }
    }
}
