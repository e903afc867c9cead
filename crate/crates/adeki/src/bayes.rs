//! Dense Bayesian inference over the source location. The unknown (x, y)
//! lives on a regular lattice over the unit design window; the posterior is
//! a probability table updated in log space (shifting by the running
//! maximum, which the Bayes normalization makes exact) so far-off models
//! cannot underflow the whole table to zero.
//!
//! Likelihood evaluations need the model's predicted reading at every
//! lattice node, so a cache solves the PDE once per node — for the current
//! discrepancy — and stores only the sub-window of the stage snapshot that
//! covers the design window. An optional node subsampling solves a coarser
//! lattice and fills the rest by bilinear interpolation in the unknowns.
//!
//! Design selection maximizes expected information gain over a candidate
//! lattice inside the step box: data are simulated from the current
//! posterior with common random numbers across candidates, and each
//! candidate is scored by the mean divergence of its hypothetical
//! posteriors from the current one.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::metrics::{equivalent_std, log_normal_pdf, symmetrize};
use crate::model::{Discrepancy, SourceModel};
use crate::observe::{interpolate, Design, DESIGN_HI, DESIGN_LO, MAX_STEP};
use crate::solver::SolveContext;

pub const DEFAULT_POSTERIOR_NODES: usize = 51;
pub const DESIGN_CANDIDATES_PER_AXIS: usize = 9;

/// Probability table over source locations on a regular lattice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPosterior {
    pub xs: Array1<f64>,
    pub ys: Array1<f64>,
    /// Normalized probabilities, row index over xs, column over ys.
    pub prob: Array2<f64>,
}

fn lattice(n: usize) -> (Array1<f64>, Array1<f64>) {
    let step = (DESIGN_HI - DESIGN_LO) / (n - 1) as f64;
    let xs = Array1::from_iter((0..n).map(|i| DESIGN_LO + i as f64 * step));
    (xs.clone(), xs)
}

impl GridPosterior {
    pub fn uniform(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config("the location lattice needs at least 2 nodes".into()));
        }
        let (xs, ys) = lattice(n);
        let prob = Array2::from_elem((n, n), 1.0 / (n * n) as f64);
        Ok(Self { xs, ys, prob })
    }

    pub fn from_weights(xs: Array1<f64>, ys: Array1<f64>, weights: Array2<f64>) -> Result<Self> {
        if weights.shape() != [xs.len(), ys.len()] {
            return Err(Error::Config("weight table does not match the lattice".into()));
        }
        let total: f64 = weights.sum();
        if total <= 0.0
            || !total.is_finite()
            || weights.iter().any(|&w| w < 0.0 || !w.is_finite())
        {
            return Err(Error::DegenerateUpdate);
        }
        Ok(Self { xs, ys, prob: weights / total })
    }

    /// Bayes update against log-likelihoods on the same lattice. The running
    /// maximum is subtracted before exponentiation; normalization restores
    /// the exact posterior.
    pub fn updated(&self, loglik: &ArrayView2<f64>) -> Result<GridPosterior> {
        if loglik.shape() != self.prob.shape() {
            return Err(Error::Config("log-likelihood table does not match the lattice".into()));
        }
        let mut shift = f64::NEG_INFINITY;
        for (&p, &l) in self.prob.iter().zip(loglik.iter()) {
            if p > 0.0 && l > shift {
                shift = l;
            }
        }
        if !shift.is_finite() {
            return Err(Error::DegenerateUpdate);
        }
        let mut weights = self.prob.clone();
        for (w, &l) in weights.iter_mut().zip(loglik.iter()) {
            *w *= (l - shift).exp();
        }
        GridPosterior::from_weights(self.xs.clone(), self.ys.clone(), weights)
    }

    /// Highest-probability node; exact ties keep the lowest linear index.
    pub fn map_estimate(&self) -> (f64, f64) {
        let mut best = (0, 0);
        let mut best_p = f64::NEG_INFINITY;
        for i in 0..self.xs.len() {
            for j in 0..self.ys.len() {
                if self.prob[[i, j]] > best_p {
                    best_p = self.prob[[i, j]];
                    best = (i, j);
                }
            }
        }
        (self.xs[best.0], self.ys[best.1])
    }

    pub fn mean(&self) -> (f64, f64) {
        let mut mx = 0.0;
        let mut my = 0.0;
        for i in 0..self.xs.len() {
            for j in 0..self.ys.len() {
                mx += self.prob[[i, j]] * self.xs[i];
                my += self.prob[[i, j]] * self.ys[j];
            }
        }
        (mx, my)
    }

    pub fn covariance(&self) -> Array2<f64> {
        let (mx, my) = self.mean();
        let mut cov = Array2::zeros((2, 2));
        for i in 0..self.xs.len() {
            for j in 0..self.ys.len() {
                let p = self.prob[[i, j]];
                let dx = self.xs[i] - mx;
                let dy = self.ys[j] - my;
                cov[[0, 0]] += p * dx * dx;
                cov[[0, 1]] += p * dx * dy;
                cov[[1, 1]] += p * dy * dy;
            }
        }
        cov[[1, 0]] = cov[[0, 1]];
        symmetrize(&mut cov);
        cov
    }

    /// Raise every probability to `exponent` and renormalize — exponents
    /// below one flatten a peaked table back toward uniform.
    pub fn flattened(&self, exponent: f64) -> Result<GridPosterior> {
        let weights = self.prob.mapv(|p| p.powf(exponent));
        GridPosterior::from_weights(self.xs.clone(), self.ys.clone(), weights)
    }

    /// Draw a lattice node with the table's probabilities.
    pub fn sample_node<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let (n, m) = (self.xs.len(), self.ys.len());
        for i in 0..n {
            for j in 0..m {
                acc += self.prob[[i, j]];
                if u < acc {
                    return (i, j);
                }
            }
        }
        (n - 1, m - 1)
    }
}

/// Divergence sum p ln(p/q) over the lattice, with 0 ln 0 = 0.
pub fn grid_kl(p: &GridPosterior, q: &GridPosterior) -> Result<f64> {
    if p.prob.shape() != q.prob.shape() {
        return Err(Error::Config("divergence needs matching lattices".into()));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.prob.iter().zip(q.prob.iter()) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::DegenerateUpdate);
            }
            acc += pi * (pi / qi).ln();
        }
    }
    Ok(acc)
}

/// Location-accuracy summary of a posterior against the true source.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PosteriorMetrics {
    pub map_x: f64,
    pub map_y: f64,
    /// Euclidean distance from the highest-probability node to the truth.
    pub distance: f64,
    /// Fourth root of the covariance determinant: the standard deviation of
    /// the isotropic Gaussian with the same generalized variance.
    pub sigma_eq: f64,
}

pub fn posterior_metrics(post: &GridPosterior, truth: (f64, f64)) -> Result<PosteriorMetrics> {
    let (mx, my) = post.map_estimate();
    let distance = ((mx - truth.0).powi(2) + (my - truth.1).powi(2)).sqrt();
    let sigma_eq = equivalent_std(&post.covariance().view())?;
    Ok(PosteriorMetrics { map_x: mx, map_y: my, distance, sigma_eq })
}

/// Model predictions at every lattice node for one stage time and one
/// discrepancy, stored as probe-ready sub-windows of the stage snapshot.
pub struct PredictionCache {
    pub xs: Array1<f64>,
    pub ys: Array1<f64>,
    window: Grid2D,
    fields: Vec<Array2<f64>>,
}

impl PredictionCache {
    /// Solve the PDE for every lattice node (every `subsample`-th node when
    /// subsample > 1, bilinear in the unknowns for the rest) and keep the
    /// design-window cutout of the snapshot at `time`.
    pub fn build(
        ctx: &SolveContext,
        time: f64,
        model: &SourceModel,
        disc: &Discrepancy,
        n_nodes: usize,
        subsample: usize,
    ) -> Result<Self> {
        if n_nodes < 2 {
            return Err(Error::Config("the location lattice needs at least 2 nodes".into()));
        }
        let subsample = subsample.max(1);
        let (xs, ys) = lattice(n_nodes);
        let (window, i0, j0) = design_window(&ctx.grid)?;

        // which lattice indices get a real solve
        let solved: Vec<usize> = {
            let mut v: Vec<usize> = (0..n_nodes).step_by(subsample).collect();
            if *v.last().unwrap() != n_nodes - 1 {
                v.push(n_nodes - 1);
            }
            v
        };
        let pairs: Vec<(usize, usize)> = solved
            .iter()
            .flat_map(|&i| solved.iter().map(move |&j| (i, j)))
            .collect();
        type NodeField = ((usize, usize), Array2<f64>);
        let computed: Result<Vec<NodeField>> = pairs
            .par_iter()
            .map(|&(i, j)| {
                let source = model.field(&ctx.grid, (xs[i], ys[j]), disc)?;
                let series = ctx.solve(&source.view())?;
                let snap = series.at(time)?;
                let cut = snap.slice(ndarray::s![i0..i0 + window.nx, j0..j0 + window.ny]);
                Ok(((i, j), cut.to_owned()))
            })
            .collect();
        let computed = computed?;

        let mut slots: Vec<Option<Array2<f64>>> = vec![None; n_nodes * n_nodes];
        for ((i, j), f) in computed {
            slots[i * n_nodes + j] = Some(f);
        }
        // fill skipped columns along the unknown-y axis, then skipped rows
        for &i in &solved {
            fill_axis(&mut slots, &solved, |k| i * n_nodes + k, &ys);
        }
        for j in 0..n_nodes {
            fill_axis(&mut slots, &solved, |k| k * n_nodes + j, &xs);
        }
        let fields: Vec<Array2<f64>> = slots
            .into_iter()
            .map(|s| s.expect("lattice fill left a hole"))
            .collect();
        Ok(Self { xs, ys, window, fields })
    }

    pub fn n_nodes(&self) -> usize {
        self.xs.len()
    }

    /// Predicted reading for lattice node (ix, iy) at a design.
    pub fn predict(&self, ix: usize, iy: usize, d: &Design) -> Result<f64> {
        let field = &self.fields[ix * self.ys.len() + iy];
        interpolate(&self.window, &field.view(), d.x, d.y)
    }

    /// Memory held by the cached windows, in bytes.
    pub fn bytes(&self) -> usize {
        self.fields.iter().map(|f| f.len() * std::mem::size_of::<f64>()).sum()
    }
}

/// The solver-grid cutout that covers the design window with one spare cell
/// on each side; returns the cutout grid and its index offsets.
fn design_window(grid: &Grid2D) -> Result<(Grid2D, usize, usize)> {
    let cover = |v0: f64, h: f64, n: usize| -> (usize, usize) {
        let lo = (((DESIGN_LO - v0) / h).floor() as isize - 1).max(0) as usize;
        let hi = (((DESIGN_HI - v0) / h).ceil() as isize + 1).min(n as isize - 1) as usize;
        (lo, hi)
    };
    let (i0, i1) = cover(grid.x0, grid.hx(), grid.nx);
    let (j0, j1) = cover(grid.y0, grid.hy(), grid.ny);
    let window = Grid2D::new(
        grid.x0 + i0 as f64 * grid.hx(),
        grid.x0 + i1 as f64 * grid.hx(),
        grid.y0 + j0 as f64 * grid.hy(),
        grid.y0 + j1 as f64 * grid.hy(),
        i1 - i0 + 1,
        j1 - j0 + 1,
    )?;
    Ok((window, i0, j0))
}

/// Linear fill between solved lattice indices along one axis.
fn fill_axis<F: Fn(usize) -> usize>(
    slots: &mut [Option<Array2<f64>>],
    solved: &[usize],
    slot_of: F,
    coords: &Array1<f64>,
) {
    for w in solved.windows(2) {
        let (a, b) = (w[0], w[1]);
        for k in a + 1..b {
            if slots[slot_of(k)].is_some() {
                continue;
            }
            let t = (coords[k] - coords[a]) / (coords[b] - coords[a]);
            let fa = slots[slot_of(a)].as_ref().expect("left anchor solved").clone();
            let fb = slots[slot_of(b)].as_ref().expect("right anchor solved");
            slots[slot_of(k)] = Some(&fa * (1.0 - t) + fb * t);
        }
    }
}

/// Log-likelihood of one reading at every lattice node.
pub fn log_likelihood_grid(
    cache: &PredictionCache,
    d: &Design,
    y: f64,
    noise_std: f64,
) -> Result<Array2<f64>> {
    let n = cache.xs.len();
    let m = cache.ys.len();
    let var = noise_std * noise_std;
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            out[[i, j]] = log_normal_pdf(y, cache.predict(i, j, d)?, var);
        }
    }
    Ok(out)
}

/// Likelihood densities of one reading at every lattice node. Far-off models
/// may underflow to zero here; inference goes through the log-space update.
pub fn likelihood_grid(
    cache: &PredictionCache,
    d: &Design,
    y: f64,
    noise_std: f64,
) -> Result<Array2<f64>> {
    Ok(log_likelihood_grid(cache, d, y, noise_std)?.mapv(f64::exp))
}

/// One log-space Bayes update from a measurement.
pub fn posterior_update(
    prior: &GridPosterior,
    cache: &PredictionCache,
    d: &Design,
    y: f64,
    noise_std: f64,
) -> Result<GridPosterior> {
    let loglik = log_likelihood_grid(cache, d, y, noise_std)?;
    prior.updated(&loglik.view())
}

/// One simulated data scenario for design scoring: a location node drawn
/// from the current posterior and a standard normal noise draw.
#[derive(Debug, Clone, Copy)]
pub struct DataDraw {
    pub node: (usize, usize),
    pub z: f64,
}

/// Freeze the Monte Carlo scenarios once so every candidate design is
/// scored against identical draws.
pub fn draw_data_samples<R: Rng>(
    prior: &GridPosterior,
    n_samples: usize,
    rng: &mut R,
) -> Vec<DataDraw> {
    (0..n_samples)
        .map(|_| {
            let node = prior.sample_node(rng);
            let z: f64 = StandardNormal.sample(rng);
            DataDraw { node, z }
        })
        .collect()
}

/// Expected information gain of measuring at `d`: the mean divergence of
/// hypothetical posteriors from the current one over the frozen scenarios.
pub fn eig_physical(
    cache: &PredictionCache,
    prior: &GridPosterior,
    d: &Design,
    noise_std: f64,
    draws: &[DataDraw],
) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Config("design scoring needs at least one data sample".into()));
    }
    let mut acc = 0.0;
    for &DataDraw { node: (ix, iy), z } in draws {
        let y = cache.predict(ix, iy, d)? + noise_std * z;
        let post = posterior_update(prior, cache, d, y, noise_std)?;
        acc += grid_kl(&post, prior)?;
    }
    Ok(acc / draws.len() as f64)
}

#[derive(Debug, Clone)]
pub struct PhysicalDesignOutcome {
    pub design: Design,
    pub eig: f64,
    /// Expected information gain of keeping the previous design.
    pub eig_stay: f64,
    pub candidates: usize,
}

/// Pick the next measurement location on a candidate lattice spanning the
/// step box around `prev`, scoring each candidate by simulated information
/// gain. The draws (posterior nodes and noise) are shared by all candidates;
/// `prev` itself is always a candidate and is only replaced by a strictly
/// better one.
pub fn optimize_design_physical<R: Rng>(
    cache: &PredictionCache,
    prior: &GridPosterior,
    prev: Design,
    noise_std: f64,
    n_data_samples: usize,
    per_axis: usize,
    rng: &mut R,
) -> Result<PhysicalDesignOutcome> {
    if n_data_samples == 0 {
        return Err(Error::Config("design scoring needs at least one data sample".into()));
    }
    if prior.prob.shape() != [cache.xs.len(), cache.ys.len()] {
        return Err(Error::Config("posterior and prediction cache lattices differ".into()));
    }
    let draws = draw_data_samples(prior, n_data_samples, rng);

    let axis = |c: f64| -> Vec<f64> {
        let lo = (c - MAX_STEP).max(DESIGN_LO);
        let hi = (c + MAX_STEP).min(DESIGN_HI);
        (0..per_axis)
            .map(|k| lo + (hi - lo) * k as f64 / (per_axis - 1) as f64)
            .collect()
    };
    let mut candidates = vec![prev];
    for &x in &axis(prev.x) {
        for &y in &axis(prev.y) {
            candidates.push(Design::new(x, y));
        }
    }

    let scores: Result<Vec<f64>> = candidates
        .par_iter()
        .map(|d| eig_physical(cache, prior, d, noise_std, &draws))
        .collect();
    let scores = scores?;

    let mut best = 0;
    for k in 1..candidates.len() {
        if scores[k] > scores[best] {
            best = k;
        }
    }
    Ok(PhysicalDesignOutcome {
        design: candidates[best],
        eig: scores[best],
        eig_stay: scores[0],
        candidates: candidates.len(),
    })
}
