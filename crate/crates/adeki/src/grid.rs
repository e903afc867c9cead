//! Uniform node-centered grid over a rectangular domain, plus the snapshot
//! container produced by the solver. Fields are stored as `Array2<f64>` with
//! shape `(nx, ny)`, so `field[[i, j]]` lives at `(x0 + i*hx, y0 + j*hy)`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform rectangular grid including both boundary nodes per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Grid2D {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64, nx: usize, ny: usize) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::Config(format!(
                "grid needs at least 3 nodes per axis, got {nx} x {ny}"
            )));
        }
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::Config("grid extents must be increasing".into()));
        }
        Ok(Self { x0, y0, x1, y1, nx, ny })
    }

    /// Default simulation domain for the testbed: [-2, 3]^2.
    pub fn testbed(n: usize) -> Result<Self> {
        Self::new(-2.0, 3.0, -2.0, 3.0, n, n)
    }

    pub fn hx(&self) -> f64 {
        (self.x1 - self.x0) / (self.nx - 1) as f64
    }

    pub fn hy(&self) -> f64 {
        (self.y1 - self.y0) / (self.ny - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.hx()
    }

    pub fn y(&self, j: usize) -> f64 {
        self.y0 + j as f64 * self.hy()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// Evaluate a scalar function of position at every node.
    pub fn sample<F: FnMut(f64, f64) -> f64>(&self, mut f: F) -> Array2<f64> {
        Array2::from_shape_fn((self.nx, self.ny), |(i, j)| f(self.x(i), self.y(j)))
    }

    /// Trapezoid quadrature of a nodal field over the whole domain.
    ///
    /// Boundary nodes carry weight 1/2 per axis (1/4 at corners); this is the
    /// quadrature under which the discrete diffusion operator conserves mass.
    pub fn integrate(&self, field: &Array2<f64>) -> f64 {
        let (nx, ny) = (self.nx, self.ny);
        let mut acc = 0.0;
        for i in 0..nx {
            let wi = if i == 0 || i == nx - 1 { 0.5 } else { 1.0 };
            for j in 0..ny {
                let wj = if j == 0 || j == ny - 1 { 0.5 } else { 1.0 };
                acc += wi * wj * field[[i, j]];
            }
        }
        acc * self.hx() * self.hy()
    }
}

/// Solution snapshots at requested times, in schedule order.
#[derive(Debug, Clone)]
pub struct FieldSeries {
    pub grid: Grid2D,
    pub times: Vec<f64>,
    pub fields: Vec<Array2<f64>>,
}

impl FieldSeries {
    /// Snapshot whose time matches `t` within a scheduling tolerance.
    pub fn at(&self, t: f64) -> Result<&Array2<f64>> {
        self.index_of(t).map(|k| &self.fields[k])
    }

    pub fn index_of(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-12 * t.abs().max(1.0))
            .ok_or(Error::MissingSnapshot { t })
    }
}
