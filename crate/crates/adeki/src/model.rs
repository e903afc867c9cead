//! Concrete experiment models on the convection-diffusion testbed: point
//! sources, the two calibration modes, and their differentiable prediction
//! maps.
//!
//! Both modes exploit the linearity of the transport operator. A sensor
//! reading of a statically forced solve is the inner product of the source
//! field with an influence field obtained from one transpose sweep, so
//! parameter Jacobians never need extra solves. The amplitude-only map goes
//! further: its predictions scale one precomputed unit-amplitude plume, so
//! the whole inversion loop runs without touching the PDE again. The
//! correction-network map solves once per member prediction and probes the
//! member's own field, which keeps the design sensitivity exact.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::ad::DesignMap;
use crate::error::{Error, Result};
use crate::grid::{FieldSeries, Grid2D};
use crate::net::{self, PredictionModel, N_PARAMS};
use crate::observe::{interp_weights, interpolate_with_grad, Design};
use crate::solver::{
    cauchy_source, cauchy_source_grad, gaussian_source, gaussian_source_grad, SolveContext,
    SolverParams, Velocity,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceShape {
    Gaussian,
    Cauchy,
}

impl SourceShape {
    pub fn value(&self, x: f64, y: f64, sx: f64, sy: f64, width: f64, strength: f64) -> f64 {
        match self {
            SourceShape::Gaussian => gaussian_source(x, y, sx, sy, width, strength),
            SourceShape::Cauchy => cauchy_source(x, y, sx, sy, width, strength),
        }
    }

    /// d value / d (sx, sy, width, strength).
    pub fn grad(&self, x: f64, y: f64, sx: f64, sy: f64, width: f64, strength: f64) -> [f64; 4] {
        match self {
            SourceShape::Gaussian => gaussian_source_grad(x, y, sx, sy, width, strength),
            SourceShape::Cauchy => cauchy_source_grad(x, y, sx, sy, width, strength),
        }
    }
}

/// A fixed point source: the ground truth that generates measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointSource {
    pub shape: SourceShape,
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub strength: f64,
}

impl PointSource {
    pub fn field(&self, grid: &Grid2D) -> Array2<f64> {
        grid.sample(|x, y| self.shape.value(x, y, self.x, self.y, self.width, self.strength))
    }
}

/// The adjustable part of the modeled source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Discrepancy {
    /// Unknown amplitude of a correctly shaped source.
    Scalar(f64),
    /// Correction-network parameters added on top of a misspecified shape.
    Net(Array1<f64>),
}

impl Discrepancy {
    pub fn dim(&self) -> usize {
        match self {
            Discrepancy::Scalar(_) => 1,
            Discrepancy::Net(p) => p.len(),
        }
    }

    pub fn to_vector(&self) -> Array1<f64> {
        match self {
            Discrepancy::Scalar(s) => Array1::from_elem(1, *s),
            Discrepancy::Net(p) => p.clone(),
        }
    }
}

/// How the model parameterizes the source at an estimated location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Right shape, unknown amplitude (the scalar discrepancy).
    ScaledGaussian,
    /// Wrong shape at fixed amplitude, plus the correction network.
    CauchyPlusNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    pub kind: ModelKind,
    pub width: f64,
    /// Fixed base amplitude (CauchyPlusNet); ignored by ScaledGaussian,
    /// whose amplitude is the scalar discrepancy.
    pub strength: f64,
}

impl SourceModel {
    /// The modeled source field for a location estimate and discrepancy.
    pub fn field(&self, grid: &Grid2D, loc: (f64, f64), disc: &Discrepancy) -> Result<Array2<f64>> {
        match (self.kind, disc) {
            (ModelKind::ScaledGaussian, Discrepancy::Scalar(s)) => Ok(grid
                .sample(|x, y| gaussian_source(x, y, loc.0, loc.1, self.width, 1.0) * s)),
            (ModelKind::CauchyPlusNet, Discrepancy::Net(p)) => {
                if p.len() != N_PARAMS {
                    return Err(Error::Config(format!(
                        "correction network takes {N_PARAMS} parameters, got {}",
                        p.len()
                    )));
                }
                let pv = p.view();
                Ok(grid.sample(|x, y| {
                    cauchy_source(x, y, loc.0, loc.1, self.width, self.strength)
                        + net::nn_forward(&pv, x - loc.0, y - loc.1)
                }))
            }
            _ => Err(Error::Config(
                "discrepancy variant does not match the model kind".into(),
            )),
        }
    }

    pub fn initial_discrepancy(&self, scalar0: f64) -> Discrepancy {
        match self.kind {
            ModelKind::ScaledGaussian => Discrepancy::Scalar(scalar0),
            ModelKind::CauchyPlusNet => Discrepancy::Net(Array1::zeros(N_PARAMS)),
        }
    }
}

/// The ground truth solved over the full stage schedule, ready to measure.
#[derive(Debug, Clone)]
pub struct TruthWorld {
    pub ctx: SolveContext,
    pub series: FieldSeries,
}

pub fn truth_world(
    grid: Grid2D,
    velocity: Velocity,
    params: SolverParams,
    truth: &PointSource,
    stage_times: &[f64],
) -> Result<TruthWorld> {
    let ctx = SolveContext::new(grid, velocity, stage_times, params)?;
    let source = truth.field(&ctx.grid);
    let series = ctx.solve(&source.view())?;
    Ok(TruthWorld { ctx, series })
}

/// Amplitude-only prediction map: one unit-amplitude solve at construction,
/// then every prediction is theta times a bilinear probe of that plume.
pub struct ScaledFieldMap {
    grid: Grid2D,
    field: Array2<f64>,
}

impl ScaledFieldMap {
    pub fn new(
        grid: Grid2D,
        velocity: Velocity,
        params: SolverParams,
        loc: (f64, f64),
        width: f64,
        time: f64,
    ) -> Result<Self> {
        let ctx = SolveContext::new(grid, velocity, &[time], params)?;
        let unit = ctx.grid.sample(|x, y| gaussian_source(x, y, loc.0, loc.1, width, 1.0));
        let series = ctx.solve(&unit.view())?;
        let field = series.at(time)?.clone();
        Ok(Self { grid: ctx.grid, field })
    }
}

impl DesignMap for ScaledFieldMap {
    /// (probe, d probe/dx, d probe/dy) of the unit plume.
    type Prep = (f64, f64, f64);

    fn obs_dim(&self) -> usize {
        1
    }

    fn theta_dim(&self) -> usize {
        1
    }

    fn prepare(&self, d: &Design) -> Result<Self::Prep> {
        interpolate_with_grad(&self.grid, &self.field.view(), d.x, d.y)
    }

    fn predict(
        &self,
        prep: &Self::Prep,
        theta: &ArrayView1<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let s = theta[0];
        Ok((
            Array1::from_elem(1, s * prep.0),
            ndarray::array![[s * prep.1, s * prep.2]],
        ))
    }

    fn theta_jacobian(&self, prep: &Self::Prep, _theta: &ArrayView1<f64>) -> Result<Array2<f64>> {
        Ok(ndarray::array![[prep.0]])
    }

    fn snap(&self, d: Design) -> Design {
        d.nudged_off_grid(&self.grid)
    }
}

/// Correction-network prediction map: each member's source is the fixed
/// misspecified base plus its own network field. Predictions solve the PDE
/// for the member and probe the solution, so design sensitivities are the
/// probe gradients of the member's own plume; parameter Jacobians contract
/// the design's influence field against the network's parameter gradients.
pub struct NnCorrectedMap {
    ctx: SolveContext,
    base: Array2<f64>,
    loc: (f64, f64),
    time: f64,
}

impl NnCorrectedMap {
    pub fn new(
        grid: Grid2D,
        velocity: Velocity,
        params: SolverParams,
        loc: (f64, f64),
        width: f64,
        strength: f64,
        time: f64,
    ) -> Result<Self> {
        let ctx = SolveContext::new(grid, velocity, &[time], params)?;
        let base = ctx
            .grid
            .sample(|x, y| cauchy_source(x, y, loc.0, loc.1, width, strength));
        Ok(Self { ctx, base, loc, time })
    }

    fn member_source(&self, theta: &ArrayView1<f64>) -> Array2<f64> {
        let mut source = self.base.clone();
        for i in 0..self.ctx.grid.nx {
            for j in 0..self.ctx.grid.ny {
                source[[i, j]] += net::nn_forward(
                    theta,
                    self.ctx.grid.x(i) - self.loc.0,
                    self.ctx.grid.y(j) - self.loc.1,
                );
            }
        }
        source
    }
}

pub struct NnPrep {
    design: Design,
    influence: Array2<f64>,
}

impl DesignMap for NnCorrectedMap {
    type Prep = NnPrep;

    fn obs_dim(&self) -> usize {
        1
    }

    fn theta_dim(&self) -> usize {
        N_PARAMS
    }

    fn prepare(&self, d: &Design) -> Result<Self::Prep> {
        let terminal = interp_weights(&self.ctx.grid, d.x, d.y)?;
        let influence = self.ctx.influence_field(0, &terminal)?;
        Ok(NnPrep { design: *d, influence })
    }

    fn predict(
        &self,
        prep: &Self::Prep,
        theta: &ArrayView1<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        if theta.len() != N_PARAMS {
            return Err(Error::Config(format!(
                "correction network takes {N_PARAMS} parameters, got {}",
                theta.len()
            )));
        }
        let source = self.member_source(theta);
        let series = self.ctx.solve(&source.view())?;
        let field = series.at(self.time)?;
        let (v, gx, gy) =
            interpolate_with_grad(&self.ctx.grid, &field.view(), prep.design.x, prep.design.y)?;
        Ok((Array1::from_elem(1, v), ndarray::array![[gx, gy]]))
    }

    fn theta_jacobian(&self, prep: &Self::Prep, theta: &ArrayView1<f64>) -> Result<Array2<f64>> {
        let mut jac = Array2::zeros((1, N_PARAMS));
        for i in 0..self.ctx.grid.nx {
            for j in 0..self.ctx.grid.ny {
                let w = prep.influence[[i, j]];
                if w == 0.0 {
                    continue;
                }
                let (_, g) = net::nn_param_grad(
                    theta,
                    self.ctx.grid.x(i) - self.loc.0,
                    self.ctx.grid.y(j) - self.loc.1,
                );
                let mut row = jac.row_mut(0);
                row.scaled_add(w, &g);
            }
        }
        Ok(jac)
    }

    fn snap(&self, d: Design) -> Design {
        d.nudged_off_grid(&self.ctx.grid)
    }
}

/// One assimilated sensor reading.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainRecord {
    pub design: Design,
    pub time: f64,
    pub value: f64,
}

/// Accumulated training data for the correction network, with one influence
/// field cached per record. The fields depend only on each record's design
/// and time, never on the evolving source estimate, so they are computed
/// once when the record is added and reused at every stage.
pub struct TrainingSet {
    ctx: SolveContext,
    records: Vec<TrainRecord>,
    influence: Vec<Array2<f64>>,
}

impl TrainingSet {
    /// `ctx` must carry every stage time in its snapshot schedule.
    pub fn new(ctx: SolveContext) -> Self {
        Self { ctx, records: Vec::new(), influence: Vec::new() }
    }

    pub fn push(&mut self, design: Design, time: f64, value: f64) -> Result<()> {
        let snap = self
            .ctx
            .schedule
            .snapshot_times
            .iter()
            .position(|&s| (s - time).abs() <= 1e-12 * time.abs().max(1.0))
            .ok_or(Error::MissingSnapshot { t: time })?;
        let terminal = interp_weights(&self.ctx.grid, design.x, design.y)?;
        let influence = self.ctx.influence_field(snap, &terminal)?;
        self.records.push(TrainRecord { design, time, value });
        self.influence.push(influence);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TrainRecord] {
        &self.records
    }

    /// Bind the current source-location estimate, producing the residual
    /// model the trainer descends on. The base readings (misspecified source
    /// alone) are contracted here; network readings are contracted per epoch.
    pub fn problem(&self, model: &SourceModel, loc: (f64, f64)) -> Result<NetProblem<'_>> {
        if model.kind != ModelKind::CauchyPlusNet {
            return Err(Error::Config("only the correction-network model trains".into()));
        }
        let base_field = self
            .ctx
            .grid
            .sample(|x, y| cauchy_source(x, y, loc.0, loc.1, model.width, model.strength));
        let base = self
            .influence
            .iter()
            .map(|w| (w * &base_field).sum())
            .collect();
        Ok(NetProblem { set: self, base, loc })
    }

    /// Scalar-amplitude variant: the whole model field scales with one
    /// parameter, so each record reduces to a precomputed unit reading.
    pub fn scalar_problem(&self, model: &SourceModel, loc: (f64, f64)) -> Result<ScalarProblem> {
        if model.kind != ModelKind::ScaledGaussian {
            return Err(Error::Config("the scalar amplitude fits the scaled-source model".into()));
        }
        let unit_field = model.field(&self.ctx.grid, loc, &Discrepancy::Scalar(1.0))?;
        let unit = self.influence.iter().map(|w| (w * &unit_field).sum()).collect();
        let targets = self.records.iter().map(|r| r.value).collect();
        Ok(ScalarProblem { unit, targets })
    }
}

/// One-parameter model for the trainer: prediction r is the amplitude times
/// the record's unit-amplitude reading.
pub struct ScalarProblem {
    unit: Vec<f64>,
    targets: Vec<f64>,
}

impl PredictionModel for ScalarProblem {
    fn param_dim(&self) -> usize {
        1
    }

    fn n_records(&self) -> usize {
        self.targets.len()
    }

    fn target(&self, rec: usize) -> f64 {
        self.targets[rec]
    }

    fn predict(&self, p: &ArrayView1<f64>, rec: usize) -> f64 {
        p[0] * self.unit[rec]
    }

    fn predict_grad(&self, p: &ArrayView1<f64>, rec: usize) -> (f64, Array1<f64>) {
        (p[0] * self.unit[rec], Array1::from_elem(1, self.unit[rec]))
    }
}

/// Residual model for the trainer: prediction r is the base reading plus the
/// influence-weighted sum of the network field.
pub struct NetProblem<'a> {
    set: &'a TrainingSet,
    base: Vec<f64>,
    loc: (f64, f64),
}

impl PredictionModel for NetProblem<'_> {
    fn param_dim(&self) -> usize {
        N_PARAMS
    }

    fn n_records(&self) -> usize {
        self.set.records.len()
    }

    fn target(&self, rec: usize) -> f64 {
        self.set.records[rec].value
    }

    fn predict(&self, p: &ArrayView1<f64>, rec: usize) -> f64 {
        let grid = &self.set.ctx.grid;
        let w = &self.set.influence[rec];
        let mut acc = self.base[rec];
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                let wij = w[[i, j]];
                if wij == 0.0 {
                    continue;
                }
                acc += wij * net::nn_forward(p, grid.x(i) - self.loc.0, grid.y(j) - self.loc.1);
            }
        }
        acc
    }

    fn predict_grad(&self, p: &ArrayView1<f64>, rec: usize) -> (f64, Array1<f64>) {
        let grid = &self.set.ctx.grid;
        let w = &self.set.influence[rec];
        let mut acc = self.base[rec];
        let mut grad = Array1::zeros(N_PARAMS);
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                let wij = w[[i, j]];
                if wij == 0.0 {
                    continue;
                }
                let (v, g) =
                    net::nn_param_grad(p, grid.x(i) - self.loc.0, grid.y(j) - self.loc.1);
                acc += wij * v;
                grad.scaled_add(wij, &g);
            }
        }
        (acc, grad)
    }
}
