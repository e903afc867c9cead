//! Point observations of solution fields: bilinear probes with spatial
//! gradients, measurement noise, and the sensor-placement box constraints.
//! Designs live in the [0, 1]^2 sub-window of the simulation domain and may
//! move at most 0.2 per axis between consecutive placements.

use ndarray::ArrayView2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldSeries, Grid2D};
use crate::solver::SolveContext;

/// Lower corner of the admissible sensor window.
pub const DESIGN_LO: f64 = 0.0;
/// Upper corner of the admissible sensor window.
pub const DESIGN_HI: f64 = 1.0;
/// Largest per-axis move between consecutive sensor placements.
pub const MAX_STEP: f64 = 0.2;

/// Sensor location in the admissible window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub x: f64,
    pub y: f64,
}

impl Design {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn in_window(&self) -> bool {
        self.x >= DESIGN_LO && self.x <= DESIGN_HI && self.y >= DESIGN_LO && self.y <= DESIGN_HI
    }

    /// Clamp a proposal into the step box around `prev` intersected with the
    /// sensor window. Applying it twice changes nothing.
    pub fn constrain_to(self, prev: Design) -> Design {
        let clamp = |v: f64, c: f64| -> f64 {
            v.max(c - MAX_STEP).min(c + MAX_STEP).clamp(DESIGN_LO, DESIGN_HI)
        };
        Design { x: clamp(self.x, prev.x), y: clamp(self.y, prev.y), }
    }

    /// Push coordinates sitting exactly on grid lines slightly into the cell
    /// so that bilinear gradients are well defined on one side.
    pub fn nudged_off_grid(self, grid: &Grid2D) -> Design {
        let nudge = |v: f64, v0: f64, h: f64, hi: f64| -> f64 {
            let s = (v - v0) / h;
            if (s - s.round()).abs() < 1e-9 {
                if v + 1e-9 <= hi {
                    v + 1e-9
                } else {
                    v - 1e-9
                }
            } else {
                v
            }
        };
        Design {
            x: nudge(self.x, grid.x0, grid.hx(), grid.x1),
            y: nudge(self.y, grid.y0, grid.hy(), grid.y1),
        }
    }
}

/// The four nodal weights of the bilinear probe at (x, y).
pub fn interp_weights(grid: &Grid2D, x: f64, y: f64) -> Result<[(usize, usize, f64); 4]> {
    if !grid.contains(x, y) {
        return Err(Error::OutOfDomain { x, y });
    }
    let cell = |v: f64, v0: f64, h: f64, n: usize| -> (usize, f64) {
        let mut i = ((v - v0) / h).floor() as isize;
        if i < 0 {
            i = 0;
        }
        let max = n as isize - 2;
        if i > max {
            i = max;
        }
        let frac = (v - (v0 + i as f64 * h)) / h;
        (i as usize, frac)
    };
    let (i, tx) = cell(x, grid.x0, grid.hx(), grid.nx);
    let (j, ty) = cell(y, grid.y0, grid.hy(), grid.ny);
    Ok([
        (i, j, (1.0 - tx) * (1.0 - ty)),
        (i + 1, j, tx * (1.0 - ty)),
        (i, j + 1, (1.0 - tx) * ty),
        (i + 1, j + 1, tx * ty),
    ])
}

/// Bilinear probe of a nodal field.
pub fn interpolate(grid: &Grid2D, field: &ArrayView2<f64>, x: f64, y: f64) -> Result<f64> {
    let w = interp_weights(grid, x, y)?;
    Ok(w.iter().map(|&(i, j, wk)| wk * field[[i, j]]).sum())
}

/// Bilinear probe together with its spatial gradient (d/dx, d/dy).
pub fn interpolate_with_grad(
    grid: &Grid2D,
    field: &ArrayView2<f64>,
    x: f64,
    y: f64,
) -> Result<(f64, f64, f64)> {
    if !grid.contains(x, y) {
        return Err(Error::OutOfDomain { x, y });
    }
    let cell = |v: f64, v0: f64, h: f64, n: usize| -> (usize, f64) {
        let mut i = ((v - v0) / h).floor() as isize;
        i = i.clamp(0, n as isize - 2);
        let frac = (v - (v0 + i as f64 * h)) / h;
        (i as usize, frac)
    };
    let (i, tx) = cell(x, grid.x0, grid.hx(), grid.nx);
    let (j, ty) = cell(y, grid.y0, grid.hy(), grid.ny);
    let f00 = field[[i, j]];
    let f10 = field[[i + 1, j]];
    let f01 = field[[i, j + 1]];
    let f11 = field[[i + 1, j + 1]];
    let value = (1.0 - tx) * (1.0 - ty) * f00 + tx * (1.0 - ty) * f10 + (1.0 - tx) * ty * f01 + tx * ty * f11;
    let dx = ((1.0 - ty) * (f10 - f00) + ty * (f11 - f01)) / grid.hx();
    let dy = ((1.0 - tx) * (f01 - f00) + tx * (f11 - f10)) / grid.hy();
    Ok((value, dx, dy))
}

/// One noisy sensor reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub design: Design,
    pub time: f64,
    pub value: f64,
}

/// Probe a solved series at a design and add Gaussian sensor noise.
pub fn measure<R: Rng>(
    series: &FieldSeries,
    design: Design,
    t: f64,
    noise_std: f64,
    rng: &mut R,
) -> Result<Measurement> {
    let field = series.at(t)?;
    let clean = interpolate(&series.grid, &field.view(), design.x, design.y)?;
    let noise = if noise_std > 0.0 {
        Normal::new(0.0, noise_std)
            .map_err(|e| Error::Config(format!("bad noise model: {e}")))?
            .sample(rng)
    } else {
        0.0
    };
    Ok(Measurement { design, time: t, value: clean + noise })
}

/// Solve under a given source field and probe the snapshot at (design, t).
/// This is the scalar forward map every inference layer composes with a
/// parameter-to-source binding.
pub fn forward_map(
    ctx: &SolveContext,
    source: &ArrayView2<f64>,
    design: Design,
    t: f64,
) -> Result<f64> {
    let series = ctx.solve(source)?;
    let field = series.at(t)?;
    interpolate(&ctx.grid, &field.view(), design.x, design.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil::SeedTree;
    use approx::assert_relative_eq;

    #[test]
    fn probe_matches_independent_bilinear_form() {
        let grid = Grid2D::new(0.0, 1.0, 0.0, 1.0, 5, 5).unwrap();
        let field = grid.sample(|x, y| 1.5 * x - 0.75 * y + 2.0 * x * y + 0.25);
        // product-form oracle evaluated from nodal corners
        let (x, y) = (0.31, 0.62);
        let h = grid.hx();
        let (i, j) = ((x / h).floor() as usize, (y / h).floor() as usize);
        let (tx, ty) = ((x - grid.x(i)) / h, (y - grid.y(j)) / h);
        let oracle = field[[i, j]] * (1.0 - tx) * (1.0 - ty)
            + field[[i + 1, j]] * tx * (1.0 - ty)
            + field[[i, j + 1]] * (1.0 - tx) * ty
            + field[[i + 1, j + 1]] * tx * ty;
        let got = interpolate(&grid, &field.view(), x, y).unwrap();
        assert!((got - oracle).abs() < 1e-14);
        // a bilinear function is reproduced exactly anywhere
        assert_relative_eq!(got, 1.5 * x - 0.75 * y + 2.0 * x * y + 0.25, epsilon = 1e-14);
    }

    #[test]
    fn probe_on_a_node_returns_the_nodal_value() {
        let grid = Grid2D::testbed(11).unwrap();
        let field = grid.sample(|x, y| x * x + 3.0 * y);
        let got = interpolate(&grid, &field.view(), grid.x(4), grid.y(7)).unwrap();
        assert_eq!(got, field[[4, 7]]);
    }

    #[test]
    fn probe_outside_domain_fails() {
        let grid = Grid2D::testbed(11).unwrap();
        let field = grid.sample(|_, _| 0.0);
        assert!(matches!(
            interpolate(&grid, &field.view(), 3.5, 0.0),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences_inside_a_cell() {
        let grid = Grid2D::testbed(21).unwrap();
        let field = grid.sample(|x, y| (1.3 * x).sin() + 0.7 * y * y);
        let (x, y) = (0.37, 0.81);
        let (_, dx, dy) = interpolate_with_grad(&grid, &field.view(), x, y).unwrap();
        let h = 1e-7;
        let fx = (interpolate(&grid, &field.view(), x + h, y).unwrap()
            - interpolate(&grid, &field.view(), x - h, y).unwrap())
            / (2.0 * h);
        let fy = (interpolate(&grid, &field.view(), x, y + h).unwrap()
            - interpolate(&grid, &field.view(), x, y - h).unwrap())
            / (2.0 * h);
        assert_relative_eq!(dx, fx, max_relative = 1e-6);
        assert_relative_eq!(dy, fy, max_relative = 1e-6);
    }

    #[test]
    fn constraint_projection_is_idempotent_and_boxed() {
        let prev = Design::new(0.9, 0.15);
        let wild = Design::new(1.7, -0.4);
        let once = wild.constrain_to(prev);
        let twice = once.constrain_to(prev);
        assert_eq!(once, twice);
        assert!(once.in_window());
        assert!((once.x - prev.x).abs() <= MAX_STEP + 1e-15);
        assert!((once.y - prev.y).abs() <= MAX_STEP + 1e-15);
    }

    #[test]
    fn nudging_moves_points_off_grid_lines_only() {
        let grid = Grid2D::testbed(21).unwrap();
        let on_line = Design::new(0.5, 0.33).nudged_off_grid(&grid); // x=0.5 is a node at h=0.25
        assert!(on_line.x > 0.5 && on_line.x < 0.5 + 1e-8);
        assert_eq!(on_line.y, 0.33);
        let interior = Design::new(0.37, 0.33).nudged_off_grid(&grid);
        assert_eq!(interior, Design::new(0.37, 0.33));
    }

    #[test]
    fn measurement_noise_has_requested_moments() {
        let grid = Grid2D::testbed(11).unwrap();
        let field = grid.sample(|_, _| 2.0);
        let series = FieldSeries { grid: grid.clone(), times: vec![0.1], fields: vec![field] };
        let mut rng = SeedTree::new(5).rng();
        let n = 10_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| measure(&series, Design::new(0.5, 0.5), 0.1, 0.05, &mut rng).unwrap().value)
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 2.0).abs() < 0.002, "sample mean {mean}");
        assert!((var / 0.0025 - 1.0).abs() < 0.05, "sample variance {var}");
    }

    #[test]
    fn forward_map_solves_then_probes() {
        let grid = Grid2D::testbed(15).unwrap();
        let ctx = SolveContext::new(
            grid,
            crate::solver::Velocity { coeff: 20.0 },
            &[0.05],
            Default::default(),
        )
        .unwrap();
        let source = ctx.grid.sample(|x, y| crate::solver::gaussian_source(x, y, 0.25, 0.25, 0.3, 2.0));
        let series = ctx.solve(&source.view()).unwrap();
        // probing exactly on a node must match the stored snapshot value
        let d = Design::new(ctx.grid.x(8) , ctx.grid.y(8));
        let via_map = forward_map(&ctx, &source.view(), d, 0.05).unwrap();
        assert_eq!(via_map, series.fields[0][[8, 8]]);
    }
}
