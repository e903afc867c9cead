//! Run configuration: one JSON document that fully determines a run, plus
//! the two built-in experiment presets at desk scale.

use adeki::ad::AscentOptions;
use adeki::bayes::GridPosterior;
use adeki::error::{Error, Result};
use adeki::hybrid::{DesignDataSource, HybridConfig, TrainMode};
use adeki::model::{ModelKind, PointSource, SourceModel, SourceShape};
use adeki::net::TrainOptions;
use adeki::solver::{SolverParams, Velocity};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Starting belief over the source location.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    Uniform,
    /// Gaussian-shaped table centered at (x, y) with the given spread.
    Peaked { x: f64, y: f64, std: f64 },
}

impl PriorSpec {
    pub fn build(&self, n: usize) -> Result<GridPosterior> {
        let uniform = GridPosterior::uniform(n)?;
        match *self {
            PriorSpec::Uniform => Ok(uniform),
            PriorSpec::Peaked { x, y, std } => {
                if std <= 0.0 {
                    return Err(Error::Config("prior spread must be positive".into()));
                }
                let var = std * std;
                let w = Array2::from_shape_fn((n, n), |(i, j)| {
                    let dx = uniform.xs[i] - x;
                    let dy = uniform.ys[j] - y;
                    (-0.5 * (dx * dx + dy * dy) / var).exp()
                });
                GridPosterior::from_weights(uniform.xs, uniform.ys, w)
            }
        }
    }
}

/// Everything a run needs; the serialized copy doubles as the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Human-readable run name, used in log lines only.
    pub label: String,
    pub seed: u64,
    pub n_stages: usize,
    pub prior: PriorSpec,
    /// Exponent applied to the initial prior before stage one (values below
    /// one flatten a peaked prior).
    pub flatten_exponent: Option<f64>,
    pub hybrid: HybridConfig,
}

impl RunConfig {
    pub fn initial_prior(&self) -> Result<GridPosterior> {
        let prior = self.prior.build(self.hybrid.posterior_nodes)?;
        match self.flatten_exponent {
            Some(e) => {
                if e <= 0.0 {
                    return Err(Error::Config("flatten_exponent must be positive".into()));
                }
                prior.flattened(e)
            }
            None => Ok(prior),
        }
    }
}

pub const STAGE_TIMES: [f64; 6] = [0.030, 0.035, 0.040, 0.045, 0.050, 0.055];
pub const NOISE_STD: f64 = 0.05;
/// Desk-scale solver resolution; the experiment trends survive it.
pub const COARSE_GRID: usize = 41;
/// Full-scale solver resolution.
pub const PAPER_GRID: usize = 101;

/// Wrong-amplitude experiment: the model family matches the truth but
/// starts at amplitude 3 against a true amplitude of 2.
pub fn parametric_preset(paper_scale: bool) -> RunConfig {
    RunConfig {
        label: "parametric".into(),
        seed: 0,
        n_stages: 6,
        prior: PriorSpec::Uniform,
        flatten_exponent: None,
        hybrid: HybridConfig {
            grid_n: if paper_scale { PAPER_GRID } else { COARSE_GRID },
            velocity: Velocity { coeff: 20.0 },
            solver: SolverParams::default(),
            stage_times: STAGE_TIMES.to_vec(),
            noise_std: NOISE_STD,
            truth: PointSource {
                shape: SourceShape::Gaussian,
                x: 0.45,
                y: 0.25,
                width: 0.05,
                strength: 2.0,
            },
            model: SourceModel { kind: ModelKind::ScaledGaussian, width: 0.05, strength: 1.0 },
            initial_scalar: 3.0,
            prior_var: 1.0,
            ensemble_size: 30,
            eki_iterations: 5,
            eig_samples: 8,
            physical_eig_samples: 30,
            posterior_nodes: 51,
            cache_subsample: 1,
            candidates_per_axis: 9,
            design_data_source: DesignDataSource::Predicted,
            correction: true,
            ascent: AscentOptions { max_updates: 70, probe_grid: 3, ..Default::default() },
            train: TrainOptions { trust_radius: Some(0.3), ..Default::default() },
            train_final: None,
            train_mode: TrainMode::Gradient,
            truncate_theta_chain: false,
        },
    }
}

/// Wrong-family experiment: a Cauchy-shaped model source plus a trainable
/// 37-parameter correction against a Gaussian truth.
pub fn structural_preset(paper_scale: bool) -> RunConfig {
    RunConfig {
        label: "structural".into(),
        seed: 0,
        n_stages: 6,
        prior: PriorSpec::Uniform,
        flatten_exponent: None,
        hybrid: HybridConfig {
            grid_n: if paper_scale { PAPER_GRID } else { COARSE_GRID },
            velocity: Velocity { coeff: 50.0 },
            solver: SolverParams::default(),
            stage_times: STAGE_TIMES.to_vec(),
            noise_std: NOISE_STD,
            truth: PointSource {
                shape: SourceShape::Gaussian,
                x: 0.25,
                y: 0.25,
                width: 0.05,
                strength: 2.0,
            },
            model: SourceModel { kind: ModelKind::CauchyPlusNet, width: 0.05, strength: 2.0 },
            initial_scalar: 0.0,
            prior_var: 0.09,
            ensemble_size: 40,
            eki_iterations: 3,
            eig_samples: 4,
            physical_eig_samples: 30,
            posterior_nodes: 51,
            cache_subsample: 1,
            candidates_per_axis: 9,
            design_data_source: DesignDataSource::Predicted,
            correction: true,
            ascent: AscentOptions { max_updates: 70, probe_grid: 3, ..Default::default() },
            train: TrainOptions { trust_radius: Some(0.5), ..Default::default() },
            train_final: None,
            train_mode: TrainMode::Gradient,
            truncate_theta_chain: false,
        },
    }
}

/// Small setup for gradient verification: coarse grid, scalar unknown.
pub fn gradcheck_preset() -> RunConfig {
    let mut cfg = parametric_preset(false);
    cfg.label = "gradcheck".into();
    cfg.hybrid.grid_n = 21;
    cfg.hybrid.ensemble_size = 20;
    cfg.hybrid.eki_iterations = 3;
    cfg.hybrid.eig_samples = 2;
    cfg
}

pub fn load(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    cfg.hybrid.validate()?;
    if cfg.n_stages == 0 || cfg.n_stages > cfg.hybrid.stage_times.len() {
        return Err(Error::Config(format!(
            "n_stages must be in 1..={}",
            cfg.hybrid.stage_times.len()
        )));
    }
    Ok(cfg)
}
