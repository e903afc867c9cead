//! Sequential experiment orchestration. Each stage, in order: pick a
//! measurement location for the source-location inference by scored lattice
//! search, measure, update the location posterior under the current
//! discrepancy, take the highest-probability location, pick a second
//! location for the discrepancy by differentiable ensemble ascent (skipped
//! at stage one and in baseline mode), measure there, retrain the
//! discrepancy on every record gathered so far, and redo the stage's
//! Bayes update under the retrained discrepancy so the posterior handed to
//! the next stage is conditioned on the newest model.
//!
//! Designs form one chain across the whole run: every committed location is
//! constrained to the step box around the location committed immediately
//! before it, alternating between the two design kinds in corrected runs.
//!
//! All randomness derives from one seed through labeled stream splits, so a
//! rerun with the same configuration and seed reproduces every record bit
//! for bit.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::ad::{
    grad_eig_wrt_design, optimize_design, AdEkiOptions, AscentOptions, DataSource, DesignMap,
};
use crate::bayes::{
    optimize_design_physical, posterior_metrics, posterior_update, GridPosterior,
    PosteriorMetrics, PredictionCache,
};
use crate::eki::{draw_perturbations, ensemble_stats, run_eki, sample_gaussian};
use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::mem::AllocMeter;
use crate::model::{
    truth_world, Discrepancy, ModelKind, NnCorrectedMap, PointSource, ScaledFieldMap,
    SourceModel, TrainingSet, TruthWorld,
};
use crate::net::{train, PredictionModel, TrainOptions};
use crate::observe::{interpolate, measure, Design};
use crate::rngutil::SeedTree;
use crate::solver::{SolverParams, Velocity};

/// How the differentiable design step simulates its data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignDataSource {
    /// Push discrepancy samples through the model (no truth access needed).
    Predicted,
    /// Probe the true system with frozen sensor noise.
    Measured,
}

/// How the retrained discrepancy is committed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Deterministic descent on the accumulated misfit.
    Gradient,
    /// Mean of an ensemble inversion against the accumulated records.
    EkiMean,
}

/// Full description of a sequential run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridConfig {
    /// Solver nodes per axis on the simulation domain.
    pub grid_n: usize,
    pub velocity: Velocity,
    pub solver: SolverParams,
    pub stage_times: Vec<f64>,
    /// Sensor noise standard deviation, shared by measuring and scoring.
    pub noise_std: f64,
    /// The true source that generates all measurements.
    pub truth: PointSource,
    /// The modeled source family.
    pub model: SourceModel,
    /// Starting amplitude for the scalar-discrepancy model.
    pub initial_scalar: f64,
    /// Per-coordinate variance of the ensemble prior around the current
    /// discrepancy.
    pub prior_var: f64,
    /// Ensemble size J of the differentiable inversion.
    pub ensemble_size: usize,
    /// Inversion iterations K.
    pub eki_iterations: usize,
    /// Simulated data draws M of the differentiable design objective.
    pub eig_samples: usize,
    /// Simulated data draws of the lattice design search.
    pub physical_eig_samples: usize,
    /// Location-posterior lattice nodes per axis.
    pub posterior_nodes: usize,
    /// Prediction-cache node subsampling (1 = solve every node).
    pub cache_subsample: usize,
    /// Candidate lattice size per axis for the physical design search.
    pub candidates_per_axis: usize,
    pub design_data_source: DesignDataSource,
    /// When false, the discrepancy steps are skipped entirely (baseline).
    pub correction: bool,
    pub ascent: AscentOptions,
    pub train: TrainOptions,
    /// Training options for the last stage only. Intermediate stages may
    /// bound how far one round moves the discrepancy, because their fit
    /// feeds the next stage's designs; the final round only reports, so it
    /// usually commits the unconstrained all-records fit. None reuses
    /// `train` everywhere.
    #[serde(default)]
    pub train_final: Option<TrainOptions>,
    pub train_mode: TrainMode,
    /// Ablation: drop the prediction-Jacobian closure in the reverse sweep.
    pub truncate_theta_chain: bool,
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_times.is_empty() {
            return Err(Error::Config("at least one stage time is required".into()));
        }
        if self.stage_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("stage times must increase strictly".into()));
        }
        if self.noise_std <= 0.0 || self.noise_std.is_nan() {
            return Err(Error::Config("noise_std must be positive".into()));
        }
        if self.ensemble_size < 2 {
            return Err(Error::Config("ensemble_size must be at least 2".into()));
        }
        if self.eig_samples == 0 || self.physical_eig_samples == 0 {
            return Err(Error::Config("information-gain sample counts must be positive".into()));
        }
        if self.posterior_nodes < 2 {
            return Err(Error::Config("posterior_nodes must be at least 2".into()));
        }
        if self.candidates_per_axis < 2 {
            return Err(Error::Config("candidates_per_axis must be at least 2".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid2D> {
        Grid2D::testbed(self.grid_n)
    }

    pub fn initial_discrepancy(&self) -> Discrepancy {
        self.model.initial_discrepancy(self.initial_scalar)
    }
}

/// Everything produced by one stage, sufficient to replay it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    /// 1-based stage index.
    pub stage: usize,
    pub time: f64,
    /// Committed location for the source-location measurement.
    pub d_g: Design,
    pub y_g: f64,
    /// Expected information gain of the committed location.
    pub eig_g: f64,
    /// Posterior summary right after the physical update.
    pub map_mid: [f64; 2],
    pub metrics_mid: PosteriorMetrics,
    /// Committed location for the discrepancy measurement, when that step ran.
    pub d_nn: Option<Design>,
    pub y_nn: Option<f64>,
    /// Ensemble information gain at the start and the committed design of
    /// the differentiable ascent.
    pub eig_nn_start: Option<f64>,
    pub eig_nn: Option<f64>,
    /// Objective after each accepted ascent step, including the start.
    pub ascent_objectives: Option<Vec<f64>>,
    pub ascent_evaluations: Option<usize>,
    /// Work-buffer high-water mark of one reverse sweep at the committed
    /// design.
    pub reverse_peak_bytes: Option<usize>,
    pub disc_before: Vec<f64>,
    pub disc_after: Vec<f64>,
    pub train_initial_loss: Option<f64>,
    pub train_final_loss: Option<f64>,
    pub train_epochs: Option<usize>,
    /// Posterior summary after the reconditioned update (equals the mid
    /// summary when the discrepancy step was skipped).
    pub map_final: [f64; 2],
    pub metrics_final: PosteriorMetrics,
    /// Set when the discrepancy step failed; the discrepancy was left as-is.
    pub network_flag: Option<String>,
    pub wall_secs: f64,
}

/// Mutable state threaded across stages.
pub struct HybridState {
    pub posterior: GridPosterior,
    pub disc: Discrepancy,
    /// Last committed design of the chain.
    pub last_design: Design,
    pub training: TrainingSet,
    /// Stages completed so far.
    pub stage_done: usize,
}

/// Build the starting state: the given location prior, the configured
/// initial discrepancy, and a design chain anchored at the window center.
pub fn initial_state(cfg: &HybridConfig, prior: GridPosterior) -> Result<HybridState> {
    cfg.validate()?;
    if prior.xs.len() != cfg.posterior_nodes || prior.ys.len() != cfg.posterior_nodes {
        return Err(Error::Config("prior lattice does not match posterior_nodes".into()));
    }
    let ctx = crate::solver::SolveContext::new(
        cfg.grid()?,
        cfg.velocity,
        &cfg.stage_times,
        cfg.solver,
    )?;
    Ok(HybridState {
        posterior: prior,
        disc: cfg.initial_discrepancy(),
        last_design: Design::new(0.5, 0.5),
        training: TrainingSet::new(ctx),
        stage_done: 0,
    })
}

/// Solve the true system once over the whole schedule.
pub fn build_truth(cfg: &HybridConfig) -> Result<TruthWorld> {
    truth_world(cfg.grid()?, cfg.velocity, cfg.solver, &cfg.truth, &cfg.stage_times)
}

fn stage_cache(
    cfg: &HybridConfig,
    time: f64,
    disc: &Discrepancy,
) -> Result<PredictionCache> {
    let ctx =
        crate::solver::SolveContext::new(cfg.grid()?, cfg.velocity, &[time], cfg.solver)?;
    PredictionCache::build(
        &ctx,
        time,
        &cfg.model,
        disc,
        cfg.posterior_nodes,
        cfg.cache_subsample,
    )
}

/// Outcome of the differentiable design step.
struct NetworkDesign {
    design: Design,
    eig_start: f64,
    eig: f64,
    objectives: Vec<f64>,
    evaluations: usize,
    reverse_peak_bytes: Option<usize>,
}

/// Run the frozen-draw ensemble ascent for one map implementation.
#[allow(clippy::too_many_arguments)]
fn network_design<M: DesignMap>(
    map: &M,
    cfg: &HybridConfig,
    world: &TruthWorld,
    time: f64,
    disc_vec: &Array1<f64>,
    start: Design,
    tree: &SeedTree,
) -> Result<NetworkDesign> {
    let dim = disc_vec.len();
    let prior_cov = Array2::eye(dim) * cfg.prior_var;
    let gamma = Array2::from_elem((1, 1), cfg.noise_std * cfg.noise_std);

    let mut rng_ens = tree.child("design-ensemble", 0).rng();
    let theta0 =
        sample_gaussian(&disc_vec.view(), &prior_cov.view(), cfg.ensemble_size, &mut rng_ens)?;

    let mut rng_pert = tree.child("design-perturbations", 0).rng();
    let mut perts = Vec::with_capacity(cfg.eig_samples);
    for _ in 0..cfg.eig_samples {
        let mut per_iter = Vec::with_capacity(cfg.eki_iterations);
        for _ in 0..cfg.eki_iterations {
            per_iter.push(draw_perturbations(cfg.ensemble_size, &gamma.view(), &mut rng_pert)?);
        }
        perts.push(per_iter);
    }

    let mut rng_data = tree.child("design-data", 0).rng();
    let noise = {
        let mut n = Array2::zeros((cfg.eig_samples, 1));
        for v in n.iter_mut() {
            let z: f64 = rand_distr::Distribution::sample(
                &rand_distr::StandardNormal,
                &mut rng_data,
            );
            *v = cfg.noise_std * z;
        }
        n
    };
    let source = match cfg.design_data_source {
        DesignDataSource::Measured => DataSource::Measured {
            series: world.series.clone(),
            time,
            noise,
        },
        DesignDataSource::Predicted => {
            let thetas =
                sample_gaussian(&disc_vec.view(), &prior_cov.view(), cfg.eig_samples, &mut rng_data)?;
            DataSource::Predicted { thetas, noise }
        }
    };

    let eki_opts = AdEkiOptions {
        iterations: cfg.eki_iterations,
        truncate_theta_chain: cfg.truncate_theta_chain,
        verify_checkpoints: true,
    };
    let (committed, trace) = optimize_design(
        map,
        start,
        &start,
        &theta0.view(),
        &source,
        &gamma.view(),
        &perts,
        &eki_opts,
        &cfg.ascent,
    )?;

    // one metered evaluation at the committed design for the record
    let meter = AllocMeter::new();
    let eg = grad_eig_wrt_design(
        map,
        &committed,
        &theta0.view(),
        &source,
        &gamma.view(),
        &perts,
        &eki_opts,
        Some(&meter),
    )?;

    let objectives: Vec<f64> = trace.steps.iter().map(|s| s.objective).collect();
    Ok(NetworkDesign {
        design: committed,
        eig_start: objectives.first().copied().unwrap_or(eg.value),
        eig: eg.value,
        objectives,
        evaluations: trace.evaluations + 1,
        reverse_peak_bytes: eg.reverse_peak_bytes,
    })
}

/// Fit the discrepancy to every accumulated record, starting from the
/// current values.
fn retrain(
    cfg: &HybridConfig,
    state: &HybridState,
    map_loc: (f64, f64),
    topts: &TrainOptions,
    tree: &SeedTree,
) -> Result<(Array1<f64>, f64, f64, usize)> {
    let p0 = state.disc.to_vector();
    match cfg.model.kind {
        ModelKind::ScaledGaussian => {
            let problem = state.training.scalar_problem(&cfg.model, map_loc)?;
            fit(cfg, &problem, &p0, topts, tree)
        }
        ModelKind::CauchyPlusNet => {
            let problem = state.training.problem(&cfg.model, map_loc)?;
            fit(cfg, &problem, &p0, topts, tree)
        }
    }
}

fn fit<M: PredictionModel>(
    cfg: &HybridConfig,
    problem: &M,
    p0: &Array1<f64>,
    topts: &TrainOptions,
    tree: &SeedTree,
) -> Result<(Array1<f64>, f64, f64, usize)> {
    match cfg.train_mode {
        TrainMode::Gradient => {
            let mut rng = tree.child("train", 0).rng();
            let out = train(&p0.view(), problem, topts, &mut rng)?;
            Ok((out.params, out.initial_loss, out.final_loss, out.epochs))
        }
        TrainMode::EkiMean => {
            let q = problem.n_records();
            let y = Array1::from_iter((0..q).map(|r| problem.target(r)));
            let gamma = Array2::eye(q) * (cfg.noise_std * cfg.noise_std);
            let mut rng = tree.child("train", 0).rng();
            let prior_cov = Array2::eye(p0.len()) * cfg.prior_var;
            let theta0 =
                sample_gaussian(&p0.view(), &prior_cov.view(), cfg.ensemble_size, &mut rng)?;
            let mse = |p: &Array1<f64>| -> f64 {
                (0..q)
                    .map(|r| (problem.predict(&p.view(), r) - y[r]).powi(2))
                    .sum::<f64>()
                    / q as f64
            };
            let initial = mse(p0);
            let run = run_eki(
                &theta0.view(),
                |ens| {
                    let mut g = Array2::zeros((ens.nrows(), q));
                    for (j, row) in ens.rows().into_iter().enumerate() {
                        for r in 0..q {
                            g[[j, r]] = problem.predict(&row, r);
                        }
                    }
                    Ok(g)
                },
                &y.view(),
                &gamma.view(),
                cfg.eki_iterations,
                &mut rng,
            )?;
            let mut fitted = ensemble_stats(&run.final_ensemble.view())?.mean;
            // Same per-stage movement bound as the gradient trainer.
            if let Some(r) = topts.trust_radius {
                for (v, &anchor) in fitted.iter_mut().zip(p0.iter()) {
                    *v = v.clamp(anchor - r, anchor + r);
                }
            }
            let final_loss = mse(&fitted);
            if !fitted.iter().all(|v| v.is_finite()) {
                return Err(Error::TrainingFailure(
                    "ensemble mean is not finite".into(),
                ));
            }
            Ok((fitted, initial, final_loss, cfg.eki_iterations))
        }
    }
}

/// Execute one stage, mutating `state` and returning its record.
pub fn run_stage(
    cfg: &HybridConfig,
    world: &TruthWorld,
    state: &mut HybridState,
    root: &SeedTree,
) -> Result<StageRecord> {
    let begun = Instant::now();
    let index = state.stage_done; // 0-based
    let time = *cfg
        .stage_times
        .get(index)
        .ok_or_else(|| Error::Config(format!("no stage time for stage {}", index + 1)))?;
    let tree = root.child("stage", index as u64);
    let stage_prior = state.posterior.clone();
    let disc_before = state.disc.to_vector().to_vec();

    // location design, measurement, and the conditioned update
    let cache = stage_cache(cfg, time, &state.disc)?;
    let mut rng_phys = tree.child("physical-design", 0).rng();
    let phys = optimize_design_physical(
        &cache,
        &stage_prior,
        state.last_design,
        cfg.noise_std,
        cfg.physical_eig_samples,
        cfg.candidates_per_axis,
        &mut rng_phys,
    )?;
    let d_g = phys.design;
    state.last_design = d_g;

    let mut rng_yg = tree.child("measure-location", 0).rng();
    let y_g = measure(&world.series, d_g, time, cfg.noise_std, &mut rng_yg)?.value;

    state.posterior = posterior_update(&stage_prior, &cache, &d_g, y_g, cfg.noise_std)?;
    let truth_loc = (cfg.truth.x, cfg.truth.y);
    let metrics_mid = posterior_metrics(&state.posterior, truth_loc)?;
    let map_mid = state.posterior.map_estimate();

    let mut record = StageRecord {
        stage: index + 1,
        time,
        d_g,
        y_g,
        eig_g: phys.eig,
        map_mid: [map_mid.0, map_mid.1],
        metrics_mid,
        d_nn: None,
        y_nn: None,
        eig_nn_start: None,
        eig_nn: None,
        ascent_objectives: None,
        ascent_evaluations: None,
        reverse_peak_bytes: None,
        disc_before,
        disc_after: state.disc.to_vector().to_vec(),
        train_initial_loss: None,
        train_final_loss: None,
        train_epochs: None,
        map_final: [map_mid.0, map_mid.1],
        metrics_final: metrics_mid,
        network_flag: None,
        wall_secs: 0.0,
    };

    // discrepancy design, measurement, retraining, reconditioned update;
    // the first stage has no discrepancy data yet and skips all of it
    if cfg.correction && index >= 1 {
        let last_stage = index + 1 == cfg.stage_times.len();
        let topts = match (&cfg.train_final, last_stage) {
            (Some(t), true) => t,
            _ => &cfg.train,
        };
        match discrepancy_steps(cfg, world, state, &stage_prior, map_mid, d_g, y_g, time, topts, &tree)
        {
            Ok(nd) => {
                record.d_nn = Some(nd.0.design);
                record.y_nn = Some(nd.1);
                record.eig_nn_start = Some(nd.0.eig_start);
                record.eig_nn = Some(nd.0.eig);
                record.ascent_objectives = Some(nd.0.objectives);
                record.ascent_evaluations = Some(nd.0.evaluations);
                record.reverse_peak_bytes = nd.0.reverse_peak_bytes;
                record.train_initial_loss = Some(nd.2);
                record.train_final_loss = Some(nd.3);
                record.train_epochs = Some(nd.4);
                record.disc_after = state.disc.to_vector().to_vec();
                let metrics_final = posterior_metrics(&state.posterior, truth_loc)?;
                let map_final = state.posterior.map_estimate();
                record.map_final = [map_final.0, map_final.1];
                record.metrics_final = metrics_final;
            }
            Err(e) => {
                // the discrepancy and the step-3 posterior stay as they are
                record.network_flag = Some(e.to_string());
            }
        }
    }

    record.wall_secs = begun.elapsed().as_secs_f64();
    state.stage_done += 1;
    Ok(record)
}

/// Steps five through eight of a stage. Any error leaves `state.disc` and
/// the already-updated posterior untouched (the caller flags the record).
#[allow(clippy::too_many_arguments)]
fn discrepancy_steps(
    cfg: &HybridConfig,
    world: &TruthWorld,
    state: &mut HybridState,
    stage_prior: &GridPosterior,
    map_loc: (f64, f64),
    d_g: Design,
    y_g: f64,
    time: f64,
    topts: &TrainOptions,
    tree: &SeedTree,
) -> Result<(NetworkDesign, f64, f64, f64, usize)> {
    let disc_vec = state.disc.to_vector();
    let nd = match cfg.model.kind {
        ModelKind::ScaledGaussian => {
            let map = ScaledFieldMap::new(
                cfg.grid()?,
                cfg.velocity,
                cfg.solver,
                map_loc,
                cfg.model.width,
                time,
            )?;
            network_design(&map, cfg, world, time, &disc_vec, d_g, tree)?
        }
        ModelKind::CauchyPlusNet => {
            let map = NnCorrectedMap::new(
                cfg.grid()?,
                cfg.velocity,
                cfg.solver,
                map_loc,
                cfg.model.width,
                cfg.model.strength,
                time,
            )?;
            network_design(&map, cfg, world, time, &disc_vec, d_g, tree)?
        }
    };

    let mut rng_ynn = tree.child("measure-discrepancy", 0).rng();
    let y_nn = measure(&world.series, nd.design, time, cfg.noise_std, &mut rng_ynn)?.value;

    // the chain and the training set move only once measuring succeeded
    state.training.push(nd.design, time, y_nn)?;
    state.last_design = nd.design;

    let (fitted, initial_loss, final_loss, epochs) = retrain(cfg, state, map_loc, topts, tree)?;
    state.disc = match cfg.model.kind {
        ModelKind::ScaledGaussian => Discrepancy::Scalar(fitted[0]),
        ModelKind::CauchyPlusNet => Discrepancy::Net(fitted),
    };

    // redo this stage's update under the retrained discrepancy
    let cache = stage_cache(cfg, time, &state.disc)?;
    state.posterior = posterior_update(stage_prior, &cache, &d_g, y_g, cfg.noise_std)?;

    Ok((nd, y_nn, initial_loss, final_loss, epochs))
}

/// Records plus the final threaded state.
pub struct RunOutcome {
    pub records: Vec<StageRecord>,
    pub state: HybridState,
}

/// Run `n_stages` stages from the given prior under one root seed.
pub fn run_sequential(
    cfg: &HybridConfig,
    prior: GridPosterior,
    n_stages: usize,
    seed: u64,
) -> Result<RunOutcome> {
    if n_stages == 0 || n_stages > cfg.stage_times.len() {
        return Err(Error::Config(format!(
            "n_stages must be in 1..={}, got {n_stages}",
            cfg.stage_times.len()
        )));
    }
    let world = build_truth(cfg)?;
    let mut state = initial_state(cfg, prior)?;
    let root = SeedTree::new(seed);
    let mut records = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        records.push(run_stage(cfg, &world, &mut state, &root)?);
    }
    Ok(RunOutcome { records, state })
}

/// Squared-error and relative-error pair over matched samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub mse: f64,
    pub re: f64,
}

/// Mean squared difference and total-variation-relative error of matched
/// sample pairs; the reference must not be identically zero.
pub fn mse_re(model: &[f64], reference: &[f64]) -> Result<ErrorRow> {
    if model.len() != reference.len() || model.is_empty() {
        return Err(Error::Config("error metrics need matched, nonempty samples".into()));
    }
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut den = 0.0;
    for (&m, &r) in model.iter().zip(reference.iter()) {
        let d = m - r;
        sq += d * d;
        abs += d.abs();
        den += r.abs();
    }
    if den == 0.0 {
        return Err(Error::UndefinedReference);
    }
    Ok(ErrorRow { mse: sq / model.len() as f64, re: abs / den })
}

/// Errors of one model snapshot against the truth: over every solver node
/// in the reporting window, and over a dense probe lattice around a design.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FieldErrorRows {
    pub total: ErrorRow,
    pub local: ErrorRow,
    /// Same discrepancy carried to the next stage's time and design.
    pub next_local: Option<ErrorRow>,
}

/// Per-stage field-error comparison of the trained and untrained models.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageFieldErrors {
    pub stage: usize,
    pub corrected: FieldErrorRows,
    pub uncorrected: FieldErrorRows,
}

pub const REPORT_LO: f64 = 0.0;
pub const REPORT_HI: f64 = 1.0;
/// Half-width of the local probe window around a design.
pub const LOCAL_HALF_WIDTH: f64 = 0.04;
/// Probe lattice size per axis for the local window.
pub const LOCAL_NODES: usize = 9;

fn total_samples(grid: &Grid2D, model: &Array2<f64>, truth: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut m = Vec::new();
    let mut t = Vec::new();
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            let (x, y) = (grid.x(i), grid.y(j));
            if (REPORT_LO..=REPORT_HI).contains(&x) && (REPORT_LO..=REPORT_HI).contains(&y) {
                m.push(model[[i, j]]);
                t.push(truth[[i, j]]);
            }
        }
    }
    (m, t)
}

fn local_samples(
    grid: &Grid2D,
    model: &Array2<f64>,
    truth: &Array2<f64>,
    d: &Design,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut m = Vec::with_capacity(LOCAL_NODES * LOCAL_NODES);
    let mut t = Vec::with_capacity(LOCAL_NODES * LOCAL_NODES);
    for a in 0..LOCAL_NODES {
        for b in 0..LOCAL_NODES {
            let fx = 2.0 * a as f64 / (LOCAL_NODES - 1) as f64 - 1.0;
            let fy = 2.0 * b as f64 / (LOCAL_NODES - 1) as f64 - 1.0;
            let x = d.x + fx * LOCAL_HALF_WIDTH;
            let y = d.y + fy * LOCAL_HALF_WIDTH;
            m.push(interpolate(grid, &model.view(), x, y)?);
            t.push(interpolate(grid, &truth.view(), x, y)?);
        }
    }
    Ok((m, t))
}

fn rows_for(
    cfg: &HybridConfig,
    world: &TruthWorld,
    loc: (f64, f64),
    disc: &Discrepancy,
    time: f64,
    design: &Design,
    next: Option<(f64, Design)>,
) -> Result<FieldErrorRows> {
    let mut times = vec![time];
    if let Some((nt, _)) = next {
        times.push(nt);
    }
    let ctx = crate::solver::SolveContext::new(cfg.grid()?, cfg.velocity, &times, cfg.solver)?;
    let source = cfg.model.field(&ctx.grid, loc, disc)?;
    let series = ctx.solve(&source.view())?;

    let model_now = series.at(time)?;
    let truth_now = world.series.at(time)?;
    let (tm, tt) = total_samples(&ctx.grid, model_now, truth_now);
    let total = mse_re(&tm, &tt)?;
    let (lm, lt) = local_samples(&ctx.grid, model_now, truth_now, design)?;
    let local = mse_re(&lm, &lt)?;

    let next_local = match next {
        Some((nt, nd)) => {
            let model_next = series.at(nt)?;
            let truth_next = world.series.at(nt)?;
            let (nm, ntr) = local_samples(&ctx.grid, model_next, truth_next, &nd)?;
            Some(mse_re(&nm, &ntr)?)
        }
        None => None,
    };
    Ok(FieldErrorRows { total, local, next_local })
}

/// Field-error rows for every recorded stage: the trained discrepancy
/// against the truth, and the untrained one at the same location estimate,
/// each at the stage's own time and design and carried one stage ahead.
pub fn field_error_report(
    cfg: &HybridConfig,
    world: &TruthWorld,
    records: &[StageRecord],
) -> Result<Vec<StageFieldErrors>> {
    let base_disc = cfg.initial_discrepancy();
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let loc = (rec.map_final[0], rec.map_final[1]);
        let disc = match cfg.model.kind {
            ModelKind::ScaledGaussian => Discrepancy::Scalar(rec.disc_after[0]),
            ModelKind::CauchyPlusNet => {
                Discrepancy::Net(Array1::from(rec.disc_after.clone()))
            }
        };
        let next = records.get(i + 1).map(|r| (r.time, r.d_g));
        let corrected = rows_for(cfg, world, loc, &disc, rec.time, &rec.d_g, next)?;
        let uncorrected = rows_for(cfg, world, loc, &base_disc, rec.time, &rec.d_g, next)?;
        out.push(StageFieldErrors { stage: rec.stage, corrected, uncorrected });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SourceShape;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn tiny_config(kind: ModelKind, correction: bool) -> HybridConfig {
        let (truth_shape, model_width, truth_strength) = match kind {
            ModelKind::ScaledGaussian => (SourceShape::Gaussian, 0.15, 2.0),
            ModelKind::CauchyPlusNet => (SourceShape::Gaussian, 0.15, 2.0),
        };
        HybridConfig {
            grid_n: 21,
            velocity: Velocity { coeff: 20.0 },
            solver: SolverParams::default(),
            stage_times: vec![0.03, 0.035, 0.04],
            noise_std: 0.05,
            truth: PointSource {
                shape: truth_shape,
                x: 0.45,
                y: 0.25,
                width: 0.15,
                strength: truth_strength,
            },
            model: SourceModel { kind, width: model_width, strength: 2.0 },
            initial_scalar: 3.0,
            prior_var: match kind {
                ModelKind::ScaledGaussian => 1.0,
                ModelKind::CauchyPlusNet => 0.09,
            },
            ensemble_size: 8,
            eki_iterations: 7,
            eig_samples: 2,
            physical_eig_samples: 4,
            posterior_nodes: 11,
            cache_subsample: 1,
            candidates_per_axis: 3,
            design_data_source: DesignDataSource::Predicted,
            correction,
            ascent: AscentOptions { max_updates: 3, ..Default::default() },
            train: TrainOptions { max_epochs: 40, ..Default::default() },
            train_final: None,
            train_mode: TrainMode::Gradient,
            truncate_theta_chain: false,
        }
    }

    #[test]
    fn error_rows_match_hand_arithmetic() {
        let model = [1.0, 2.0, 4.0];
        let truth = [1.0, 1.0, 2.0];
        let row = mse_re(&model, &truth).unwrap();
        // squared differences 0, 1, 4 -> mean 5/3; |diffs| 0+1+2 over |truth| 4
        assert_relative_eq!(row.mse, 5.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(row.re, 3.0 / 4.0, max_relative = 1e-14);
        let zero = mse_re(&model, &[0.0, 0.0, 0.0]);
        assert!(matches!(zero, Err(Error::UndefinedReference)));
        let same = mse_re(&truth, &truth).unwrap();
        assert_abs_diff_eq!(same.mse, 0.0);
        assert_abs_diff_eq!(same.re, 0.0);
    }

    #[test]
    fn single_stage_runs_and_skips_the_discrepancy_step() {
        let cfg = tiny_config(ModelKind::ScaledGaussian, true);
        let prior = GridPosterior::uniform(cfg.posterior_nodes).unwrap();
        let out = run_sequential(&cfg, prior, 1, 7).unwrap();
        assert_eq!(out.records.len(), 1);
        let rec = &out.records[0];
        assert_eq!(rec.stage, 1);
        assert!(rec.d_nn.is_none(), "stage one must skip the discrepancy design");
        assert!(rec.network_flag.is_none());
        assert_eq!(rec.disc_before, rec.disc_after);
        assert_eq!(rec.map_mid, rec.map_final);
        assert!(rec.d_g.in_window());
        assert!((rec.d_g.x - 0.5).abs() <= 0.2 + 1e-12, "chain starts at the center");
        assert!((rec.d_g.y - 0.5).abs() <= 0.2 + 1e-12);
        assert!(out.state.training.is_empty());
    }

    #[test]
    fn corrected_run_chains_designs_and_retrains() {
        let cfg = tiny_config(ModelKind::ScaledGaussian, true);
        let prior = GridPosterior::uniform(cfg.posterior_nodes).unwrap();
        let out = run_sequential(&cfg, prior, 3, 7).unwrap();
        assert_eq!(out.records.len(), 3);
        let (r1, r2, r3) = (&out.records[0], &out.records[1], &out.records[2]);
        for (rec, expect_nn) in [(r1, false), (r2, true), (r3, true)] {
            assert!(rec.d_nn.is_some() == expect_nn, "stage {}", rec.stage);
            assert!(rec.network_flag.is_none(), "stage {} flagged", rec.stage);
        }
        // the chain: d_g2 within the box around d_g1 (stage 1 committed no
        // second design), d_nn2 around d_g2, d_g3 around d_nn2
        let step = |a: Design, b: Design| (a.x - b.x).abs().max((a.y - b.y).abs());
        assert!(step(r2.d_g, r1.d_g) <= 0.2 + 1e-12);
        assert!(step(r2.d_nn.unwrap(), r2.d_g) <= 0.2 + 1e-12);
        assert!(step(r3.d_g, r2.d_nn.unwrap()) <= 0.2 + 1e-12);
        // training accumulated one record per discrepancy stage
        assert_eq!(out.state.training.len(), 2);
        // the amplitude moved off its initial value once training began
        assert_ne!(r2.disc_before, r2.disc_after);
        assert_eq!(r2.disc_after, r3.disc_before, "state threads between stages");
        // the committed fit never worsens the accumulated misfit
        for rec in [r2, r3] {
            let (li, lf) = (rec.train_initial_loss.unwrap(), rec.train_final_loss.unwrap());
            assert!(lf <= li, "stage {} training went uphill: {li} -> {lf}", rec.stage);
        }
        let fitted = out.state.disc.to_vector()[0];
        assert!(fitted.is_finite(), "fitted amplitude must be finite, got {fitted}");
    }

    #[test]
    fn network_mode_trains_the_correction_and_reconditions() {
        let mut cfg = tiny_config(ModelKind::CauchyPlusNet, true);
        cfg.eki_iterations = 3;
        cfg.ensemble_size = 6;
        let prior = GridPosterior::uniform(cfg.posterior_nodes).unwrap();
        let out = run_sequential(&cfg, prior, 2, 13).unwrap();
        let r2 = &out.records[1];
        assert!(r2.network_flag.is_none(), "flagged: {:?}", r2.network_flag);
        assert!(r2.d_nn.is_some());
        assert_eq!(r2.disc_before.len(), 37);
        assert_eq!(r2.disc_before, vec![0.0; 37], "stage one leaves the net at zero");
        assert_ne!(r2.disc_after, r2.disc_before, "training must move the net");
        assert!(
            r2.train_final_loss.unwrap() <= r2.train_initial_loss.unwrap(),
            "training went uphill"
        );
        assert_eq!(out.state.training.len(), 1);
        // the reconditioned posterior replaced the mid-stage one
        assert!(r2.metrics_final.sigma_eq.is_finite());
    }

    #[test]
    fn ensemble_mean_training_mode_also_fits() {
        let mut cfg = tiny_config(ModelKind::ScaledGaussian, true);
        cfg.train_mode = TrainMode::EkiMean;
        let prior = GridPosterior::uniform(cfg.posterior_nodes).unwrap();
        let out = run_sequential(&cfg, prior, 2, 17).unwrap();
        let r2 = &out.records[1];
        assert!(r2.network_flag.is_none(), "flagged: {:?}", r2.network_flag);
        assert_ne!(r2.disc_before, r2.disc_after, "the ensemble mean must move");
        assert!(out.state.disc.to_vector()[0].is_finite());
    }

    #[test]
    fn baseline_mode_never_touches_the_discrepancy() {
        let cfg = tiny_config(ModelKind::ScaledGaussian, false);
        let prior = GridPosterior::uniform(cfg.posterior_nodes).unwrap();
        let out = run_sequential(&cfg, prior, 3, 7).unwrap();
        for rec in &out.records {
            assert!(rec.d_nn.is_none());
            assert_eq!(rec.disc_before, vec![3.0]);
            assert_eq!(rec.disc_after, vec![3.0]);
        }
        assert!(out.state.training.is_empty());
    }

    /// Drop the only wall-clock field so replays compare bit for bit.
    fn stripped(records: &[StageRecord]) -> String {
        let cleaned: Vec<StageRecord> = records
            .iter()
            .map(|r| StageRecord { wall_secs: 0.0, ..r.clone() })
            .collect();
        serde_json::to_string(&cleaned).unwrap()
    }

    #[test]
    fn same_seed_reproduces_every_record() {
        let cfg = tiny_config(ModelKind::ScaledGaussian, true);
        let prior = GridPosterior::uniform(cfg.posterior_nodes).unwrap();
        let a = run_sequential(&cfg, prior.clone(), 2, 99).unwrap();
        let b = run_sequential(&cfg, prior, 2, 99).unwrap();
        assert_eq!(stripped(&a.records), stripped(&b.records), "replay must be bit-identical");
        for (pa, pb) in a.state.posterior.prob.iter().zip(b.state.posterior.prob.iter()) {
            assert_eq!(pa.to_bits(), pb.to_bits());
        }
    }

    #[test]
    fn stage_by_stage_equals_one_sequential_run() {
        let cfg = tiny_config(ModelKind::ScaledGaussian, true);
        let prior = GridPosterior::uniform(cfg.posterior_nodes).unwrap();
        let all = run_sequential(&cfg, prior.clone(), 2, 31).unwrap();

        let world = build_truth(&cfg).unwrap();
        let mut state = initial_state(&cfg, prior).unwrap();
        let root = SeedTree::new(31);
        let r1 = run_stage(&cfg, &world, &mut state, &root).unwrap();
        let r2 = run_stage(&cfg, &world, &mut state, &root).unwrap();
        assert_eq!(
            stripped(&[r1, r2]),
            stripped(&all.records),
            "threading state by hand must match the sequential driver"
        );
    }

    #[test]
    fn field_report_flags_nothing_for_a_perfect_model() {
        // model family identical to the truth, amplitude already right:
        // the corrected rows must be exactly zero
        let mut cfg = tiny_config(ModelKind::ScaledGaussian, false);
        cfg.initial_scalar = 2.0;
        let world = build_truth(&cfg).unwrap();
        let rec = StageRecord {
            stage: 1,
            time: 0.03,
            d_g: Design::new(0.5, 0.5),
            y_g: 0.0,
            eig_g: 0.0,
            map_mid: [0.45, 0.25],
            metrics_mid: PosteriorMetrics {
                map_x: 0.45,
                map_y: 0.25,
                distance: 0.0,
                sigma_eq: 0.0,
            },
            d_nn: None,
            y_nn: None,
            eig_nn_start: None,
            eig_nn: None,
            ascent_objectives: None,
            ascent_evaluations: None,
            reverse_peak_bytes: None,
            disc_before: vec![2.0],
            disc_after: vec![2.0],
            train_initial_loss: None,
            train_final_loss: None,
            train_epochs: None,
            map_final: [0.45, 0.25],
            metrics_final: PosteriorMetrics {
                map_x: 0.45,
                map_y: 0.25,
                distance: 0.0,
                sigma_eq: 0.0,
            },
            network_flag: None,
            wall_secs: 0.0,
        };
        let report = field_error_report(&cfg, &world, &[rec]).unwrap();
        assert_eq!(report.len(), 1);
        let rows = &report[0].corrected;
        assert_abs_diff_eq!(rows.total.mse, 0.0, epsilon = 1e-28);
        assert_abs_diff_eq!(rows.total.re, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(rows.local.mse, 0.0, epsilon = 1e-28);
        assert!(rows.next_local.is_none(), "a single stage has no next row");
    }

    #[test]
    fn field_report_produces_next_rows_and_positive_errors() {
        let cfg = tiny_config(ModelKind::ScaledGaussian, true);
        let prior = GridPosterior::uniform(cfg.posterior_nodes).unwrap();
        let out = run_sequential(&cfg, prior, 2, 5).unwrap();
        let world = build_truth(&cfg).unwrap();
        let report = field_error_report(&cfg, &world, &out.records).unwrap();
        assert_eq!(report.len(), 2);
        assert!(report[0].corrected.next_local.is_some());
        assert!(report[1].corrected.next_local.is_none());
        // the model starts at amplitude 3 against truth 2: the untrained
        // rows must show real error
        assert!(report[0].uncorrected.total.mse > 0.0);
        assert!(report[0].uncorrected.total.re > 0.0);
    }

    #[test]
    fn rejects_invalid_configurations() {
        let mut cfg = tiny_config(ModelKind::ScaledGaussian, true);
        cfg.stage_times = vec![0.04, 0.03];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(ModelKind::ScaledGaussian, true);
        cfg.noise_std = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = tiny_config(ModelKind::ScaledGaussian, true);
        let prior = GridPosterior::uniform(7).unwrap(); // wrong lattice size
        assert!(initial_state(&cfg, prior).is_err());
        let prior = GridPosterior::uniform(cfg.posterior_nodes).unwrap();
        assert!(run_sequential(&cfg, prior, 9, 1).is_err(), "more stages than times");
    }
}
