//! Source-correction network and its trainer. The network is a fixed
//! 2-4-4-1 perceptron with tanh hidden layers and a linear output; it takes
//! the offset (dx, dy) from a grid point to the current source-location
//! estimate and returns an additive correction to the modeled source there.
//! Parameters are a flat vector of length 37 laid out as
//! `[W1 (4x2), b1 (4), W2 (4x4), b2 (4), W3 (1x4), b3 (1)]`, row-major.

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const N_PARAMS: usize = 37;
const H: usize = 4;
const OFF_W1: usize = 0;
const OFF_B1: usize = 8;
const OFF_W2: usize = 12;
const OFF_B2: usize = 28;
const OFF_W3: usize = 32;
const OFF_B3: usize = 36;

#[inline]
fn hidden(p: &ArrayView1<f64>, dx: f64, dy: f64) -> ([f64; H], [f64; H]) {
    let mut h1 = [0.0; H];
    for k in 0..H {
        let z = p[OFF_W1 + 2 * k] * dx + p[OFF_W1 + 2 * k + 1] * dy + p[OFF_B1 + k];
        h1[k] = z.tanh();
    }
    let mut h2 = [0.0; H];
    for m in 0..H {
        let mut z = p[OFF_B2 + m];
        for k in 0..H {
            z += p[OFF_W2 + H * m + k] * h1[k];
        }
        h2[m] = z.tanh();
    }
    (h1, h2)
}

/// Network output at input offset (dx, dy).
pub fn nn_forward(p: &ArrayView1<f64>, dx: f64, dy: f64) -> f64 {
    debug_assert_eq!(p.len(), N_PARAMS);
    let (_, h2) = hidden(p, dx, dy);
    let mut out = p[OFF_B3];
    for m in 0..H {
        out += p[OFF_W3 + m] * h2[m];
    }
    out
}

/// Output together with its gradient in all 37 parameters.
pub fn nn_param_grad(p: &ArrayView1<f64>, dx: f64, dy: f64) -> (f64, Array1<f64>) {
    let (h1, h2) = hidden(p, dx, dy);
    let mut out = p[OFF_B3];
    for m in 0..H {
        out += p[OFF_W3 + m] * h2[m];
    }
    let mut g = Array1::zeros(N_PARAMS);
    g[OFF_B3] = 1.0;
    let mut delta2 = [0.0; H];
    for m in 0..H {
        g[OFF_W3 + m] = h2[m];
        delta2[m] = p[OFF_W3 + m] * (1.0 - h2[m] * h2[m]);
        g[OFF_B2 + m] = delta2[m];
        for k in 0..H {
            g[OFF_W2 + H * m + k] = delta2[m] * h1[k];
        }
    }
    for k in 0..H {
        let mut back = 0.0;
        for m in 0..H {
            back += delta2[m] * p[OFF_W2 + H * m + k];
        }
        let delta1 = back * (1.0 - h1[k] * h1[k]);
        g[OFF_B1 + k] = delta1;
        g[OFF_W1 + 2 * k] = delta1 * dx;
        g[OFF_W1 + 2 * k + 1] = delta1 * dy;
    }
    (out, g)
}

/// Output together with its gradient in the two inputs.
pub fn nn_input_grad(p: &ArrayView1<f64>, dx: f64, dy: f64) -> (f64, f64, f64) {
    let (h1, h2) = hidden(p, dx, dy);
    let mut out = p[OFF_B3];
    for m in 0..H {
        out += p[OFF_W3 + m] * h2[m];
    }
    let mut delta1 = [0.0; H];
    for k in 0..H {
        let mut back = 0.0;
        for m in 0..H {
            back += p[OFF_W3 + m] * (1.0 - h2[m] * h2[m]) * p[OFF_W2 + H * m + k];
        }
        delta1[k] = back * (1.0 - h1[k] * h1[k]);
    }
    let mut gx = 0.0;
    let mut gy = 0.0;
    for k in 0..H {
        gx += delta1[k] * p[OFF_W1 + 2 * k];
        gy += delta1[k] * p[OFF_W1 + 2 * k + 1];
    }
    (out, gx, gy)
}

/// Residual model a trainer can descend on: predictions and their parameter
/// gradients for each assimilated record.
pub trait PredictionModel: Sync {
    fn param_dim(&self) -> usize;
    fn n_records(&self) -> usize;
    fn target(&self, rec: usize) -> f64;
    fn predict(&self, p: &ArrayView1<f64>, rec: usize) -> f64;
    /// (prediction, d prediction / d params).
    fn predict_grad(&self, p: &ArrayView1<f64>, rec: usize) -> (f64, Array1<f64>);
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TrainOptions {
    pub max_epochs: usize,
    /// Initial descent step; halved on any loss increase.
    pub step: f64,
    /// Growth applied to the step after each accepted epoch, so the descent
    /// adapts to badly scaled losses in both directions.
    pub step_growth: f64,
    /// Stop when the loss improvement falls below this.
    pub plateau_tol: f64,
    /// Scale of the seeded symmetry-breaking offset applied to the start point.
    pub init_jitter: f64,
    /// Per-coordinate trust region around the start point: every iterate is
    /// projected into the box start +- radius. Bounds how far one training
    /// round can move the parameters, so a stage trained against a poor
    /// intermediate location estimate cannot drag them off a cliff.
    #[serde(default)]
    pub trust_radius: Option<f64>,
    /// Coefficient on the squared distance from the start point, added to the
    /// mean-squared misfit. Acts as a Gaussian prior centered at the current
    /// parameters: ambiguous records cannot drag the fit far from where it
    /// stands, while strongly informative records override the pull. For
    /// residuals with noise variance s_n^2 over q records and a prior
    /// variance s_p^2 per coordinate, the posterior-consistent value is
    /// s_n^2 / (q * s_p^2).
    #[serde(default)]
    pub anchor_weight: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            step: 0.05,
            step_growth: 1.5,
            plateau_tol: 1e-8,
            init_jitter: 1e-2,
            trust_radius: None,
            anchor_weight: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Array1<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
}

fn mse<M: PredictionModel>(model: &M, p: &ArrayView1<f64>) -> f64 {
    let n = model.n_records();
    let mut acc = 0.0;
    for r in 0..n {
        let d = model.predict(p, r) - model.target(r);
        acc += d * d;
    }
    acc / n as f64
}

fn mse_grad<M: PredictionModel>(model: &M, p: &ArrayView1<f64>) -> (f64, Array1<f64>) {
    let n = model.n_records();
    let mut loss = 0.0;
    let mut g = Array1::zeros(p.len());
    for r in 0..n {
        let (pred, pg) = model.predict_grad(p, r);
        let d = pred - model.target(r);
        loss += d * d;
        g.scaled_add(2.0 * d, &pg);
    }
    (loss / n as f64, g / n as f64)
}

/// Mean-squared-error descent with backtracking halving. The returned
/// parameters are whichever iterate achieved the lowest observed loss,
/// with the unperturbed start always in the candidate set.
pub fn train<M: PredictionModel, R: Rng>(
    p0: &ArrayView1<f64>,
    model: &M,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<TrainOutcome> {
    if model.n_records() == 0 {
        return Err(Error::TrainingFailure("no records to fit".into()));
    }
    if p0.len() != model.param_dim() {
        return Err(Error::TrainingFailure(format!(
            "parameter length {} does not match model dimension {}",
            p0.len(),
            model.param_dim()
        )));
    }
    if let Some(r) = opts.trust_radius {
        if r <= 0.0 || r.is_nan() {
            return Err(Error::TrainingFailure("trust radius must be positive".into()));
        }
    }
    let weight = match opts.anchor_weight {
        Some(w) if w < 0.0 || !w.is_finite() => {
            return Err(Error::TrainingFailure("anchor weight must be finite and >= 0".into()));
        }
        Some(w) => w,
        None => 0.0,
    };
    let objective = |p: &ArrayView1<f64>| -> f64 {
        let pull: f64 = p.iter().zip(p0.iter()).map(|(v, a)| (v - a) * (v - a)).sum();
        mse(model, p) + weight * pull
    };
    let objective_grad = |p: &ArrayView1<f64>| -> (f64, Array1<f64>) {
        let (l, mut g) = mse_grad(model, p);
        let mut pull = 0.0;
        for (gi, (v, a)) in g.iter_mut().zip(p.iter().zip(p0.iter())) {
            pull += (v - a) * (v - a);
            *gi += 2.0 * weight * (v - a);
        }
        (l + weight * pull, g)
    };
    let initial_loss = objective(p0);
    if !initial_loss.is_finite() {
        return Err(Error::TrainingFailure("non-finite loss at start".into()));
    }
    let project = |q: &mut Array1<f64>| {
        if let Some(r) = opts.trust_radius {
            for (v, &anchor) in q.iter_mut().zip(p0.iter()) {
                *v = v.clamp(anchor - r, anchor + r);
            }
        }
    };
    let mut best = (p0.to_owned(), initial_loss);
    let mut p = if opts.init_jitter > 0.0 {
        let dist = Normal::new(0.0, opts.init_jitter)
            .map_err(|e| Error::TrainingFailure(format!("bad jitter scale: {e}")))?;
        let mut q = p0.to_owned();
        for v in q.iter_mut() {
            *v += dist.sample(rng);
        }
        project(&mut q);
        q
    } else {
        p0.to_owned()
    };
    let mut loss = objective(&p.view());
    if loss < best.1 {
        best = (p.clone(), loss);
    }
    let mut step = opts.step;
    let mut epochs = 0;
    for _ in 0..opts.max_epochs {
        epochs += 1;
        let (l, g) = objective_grad(&p.view());
        loss = l;
        let gnorm2: f64 = g.iter().map(|v| v * v).sum();
        if gnorm2 == 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let mut trial = p.clone();
            trial.scaled_add(-step, &g);
            project(&mut trial);
            let tl = objective(&trial.view());
            if tl.is_finite() && tl <= loss {
                let improvement = loss - tl;
                p = trial;
                loss = tl;
                if loss < best.1 {
                    best = (p.clone(), loss);
                }
                accepted = true;
                if improvement < opts.plateau_tol * loss.max(1.0) {
                    return Ok(TrainOutcome {
                        params: best.0,
                        initial_loss,
                        final_loss: best.1,
                        epochs,
                    });
                }
                step *= opts.step_growth;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !best.0.iter().all(|v| v.is_finite()) {
        return Err(Error::TrainingFailure("non-finite parameters after descent".into()));
    }
    Ok(TrainOutcome { params: best.0, initial_loss, final_loss: best.1, epochs })
}
