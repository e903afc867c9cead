//! Reverse-mode design gradients through ensemble Kalman inversion.
//!
//! The objective is the expected information gain of a sensor location d:
//! the mean, over frozen data samples, of the Gaussian divergence between
//! the final and initial ensembles of a K-step inversion run. Every random
//! draw (initial ensemble, per-iteration data perturbations, data samples
//! and their noise) is frozen before optimization starts, so the objective
//! is a deterministic, almost-everywhere differentiable function of d and
//! the same draws serve every candidate the optimizer visits.
//!
//! The forward sweep stores one checkpoint per iteration: the ensemble and
//! its prediction block. The reverse sweep walks the iterations backwards,
//! replays the member predictions from the checkpointed ensemble (verifying
//! they reproduce the stored block bit for bit), and pushes one adjoint row
//! per member through the update
//!
//!   theta' = theta + K (y + eps - g),  K = S_tg (S_gg + Gamma)^-1.
//!
//! Design sensitivity enters through the predictions g(theta; d) and the
//! data y(d); the chain through the evolving members theta_n(d) can be cut
//! with `truncate_theta_chain`, which drops only the prediction-Jacobian
//! closure while still carrying member adjoints across iterations. The
//! reverse sweep allocates a bounded set of work buffers regardless of K;
//! an optional meter records those bytes so the bound is testable.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::eki::ensemble_stats;
use crate::error::{Error, Result};
use crate::grid::FieldSeries;
use crate::mem::{f64_bytes, AllocMeter};
use crate::metrics::{chol_solve_mat, cholesky, covariance_floor, symmetrize, SpdView};
use crate::observe::{interpolate_with_grad, Design, MAX_STEP};

/// A differentiable map from source parameters and a sensor location to the
/// predicted reading, with exact sensitivities to both.
pub trait DesignMap: Sync {
    /// Whatever can be computed once per design and shared by all members.
    type Prep: Send + Sync;

    fn obs_dim(&self) -> usize;
    fn theta_dim(&self) -> usize;
    fn prepare(&self, d: &Design) -> Result<Self::Prep>;
    /// Predicted reading for one member and its design sensitivity
    /// (length q, and q x 2 for d/dx, d/dy).
    fn predict(&self, prep: &Self::Prep, theta: &ArrayView1<f64>) -> Result<(Array1<f64>, Array2<f64>)>;
    /// d prediction / d theta for one member (q x theta_dim).
    fn theta_jacobian(&self, prep: &Self::Prep, theta: &ArrayView1<f64>) -> Result<Array2<f64>>;
    /// Adjust a candidate so the map is smooth there, e.g. off mesh lines.
    fn snap(&self, d: Design) -> Design {
        d
    }
}

/// Where the data samples of the information-gain estimate come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Probe a fixed truth field at the design, adding frozen noise rows.
    Measured { series: FieldSeries, time: f64, noise: Array2<f64> },
    /// Push frozen parameter samples through the map, adding frozen noise.
    Predicted { thetas: Array2<f64>, noise: Array2<f64> },
}

impl DataSource {
    pub fn n_samples(&self) -> usize {
        match self {
            DataSource::Measured { noise, .. } => noise.nrows(),
            DataSource::Predicted { thetas, .. } => thetas.nrows(),
        }
    }

    /// Sample m of the data, and its design sensitivity (q, q x 2).
    fn sample<M: DesignMap>(
        &self,
        map: &M,
        prep: &M::Prep,
        d: &Design,
        m: usize,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        match self {
            DataSource::Measured { series, time, noise } => {
                if map.obs_dim() != 1 {
                    return Err(Error::Config(
                        "measured data supplies a single probe per design".into(),
                    ));
                }
                let field = series.at(*time)?;
                let (v, gx, gy) = interpolate_with_grad(&series.grid, &field.view(), d.x, d.y)?;
                let y = Array1::from_elem(1, v + noise[[m, 0]]);
                let mut dy = Array2::zeros((1, 2));
                dy[[0, 0]] = gx;
                dy[[0, 1]] = gy;
                Ok((y, dy))
            }
            DataSource::Predicted { thetas, noise } => {
                let (g, dg) = map.predict(prep, &thetas.row(m))?;
                Ok((g + noise.row(m), dg))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdEkiOptions {
    /// Inversion iterations K.
    pub iterations: usize,
    /// Drop the prediction-Jacobian closure in the reverse sweep.
    pub truncate_theta_chain: bool,
    /// Compare replayed predictions against checkpoints bit for bit.
    pub verify_checkpoints: bool,
}

impl Default for AdEkiOptions {
    fn default() -> Self {
        Self { iterations: 5, truncate_theta_chain: false, verify_checkpoints: true }
    }
}

#[derive(Debug, Clone)]
pub struct EigGradient {
    pub value: f64,
    pub grad: [f64; 2],
    /// High-water mark of reverse-sweep work buffers, when a meter was given.
    pub reverse_peak_bytes: Option<usize>,
}

struct PredBlock {
    g: Array2<f64>,
    dgx: Array2<f64>,
    dgy: Array2<f64>,
}

fn predict_block<M: DesignMap>(
    map: &M,
    prep: &M::Prep,
    thetas: &ArrayView2<f64>,
) -> Result<PredBlock> {
    let j = thetas.nrows();
    let q = map.obs_dim();
    let rows: Result<Vec<_>> =
        (0..j).into_par_iter().map(|jj| map.predict(prep, &thetas.row(jj))).collect();
    let rows = rows?;
    let mut g = Array2::zeros((j, q));
    let mut dgx = Array2::zeros((j, q));
    let mut dgy = Array2::zeros((j, q));
    for (jj, (gv, dg)) in rows.into_iter().enumerate() {
        if gv.len() != q || dg.shape() != [q, 2] {
            return Err(Error::Config(format!(
                "prediction returned shapes {:?}/{:?}, expected ({q},)/({q}, 2)",
                gv.len(),
                dg.shape()
            )));
        }
        for qq in 0..q {
            g[[jj, qq]] = gv[qq];
            dgx[[jj, qq]] = dg[[qq, 0]];
            dgy[[jj, qq]] = dg[[qq, 1]];
        }
    }
    Ok(PredBlock { g, dgx, dgy })
}

fn jacobian_block<M: DesignMap>(
    map: &M,
    prep: &M::Prep,
    thetas: &ArrayView2<f64>,
) -> Result<Vec<Array2<f64>>> {
    let q = map.obs_dim();
    let dt = map.theta_dim();
    let jacs: Result<Vec<_>> = (0..thetas.nrows())
        .into_par_iter()
        .map(|jj| map.theta_jacobian(prep, &thetas.row(jj)))
        .collect();
    let jacs = jacs?;
    for jac in &jacs {
        if jac.shape() != [q, dt] {
            return Err(Error::Config(format!(
                "parameter Jacobian has shape {:?}, expected ({q}, {dt})",
                jac.shape()
            )));
        }
    }
    Ok(jacs)
}

/// Everything one update computes from (theta, g, y, eps); recomputed in the
/// reverse sweep from the checkpointed inputs so both sweeps agree exactly.
struct UpdatePieces {
    tc: Array2<f64>,
    gc: Array2<f64>,
    l: Array2<f64>,
    /// K' (q x d), so theta' = theta + innovation . kt.
    kt: Array2<f64>,
    innovation: Array2<f64>,
}

fn update_pieces(
    theta: &ArrayView2<f64>,
    g: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    gamma: &ArrayView2<f64>,
    pert: &ArrayView2<f64>,
) -> Result<UpdatePieces> {
    let j = theta.nrows();
    if j < 2 {
        return Err(Error::EnsembleTooSmall { got: j });
    }
    let q = y.len();
    let theta_mean = theta.mean_axis(Axis(0)).expect("nonempty");
    let g_mean = g.mean_axis(Axis(0)).expect("nonempty");
    let tc = theta.to_owned() - &theta_mean;
    let gc = g.to_owned() - &g_mean;
    let denom = j as f64 - 1.0;
    let sig_tg = tc.t().dot(&gc) / denom;
    let mut c = gc.t().dot(&gc) / denom + gamma;
    symmetrize(&mut c);
    let l = cholesky(&c.view(), "innovation covariance")?;
    let kt = chol_solve_mat(&l.view(), &sig_tg.t());
    let mut innovation = Array2::zeros((j, q));
    for jj in 0..j {
        for qq in 0..q {
            innovation[[jj, qq]] = y[qq] + pert[[jj, qq]] - g[[jj, qq]];
        }
    }
    Ok(UpdatePieces { tc, gc, l, kt, innovation })
}

/// Divergence of the final ensemble from the initial one, with the spectral
/// views kept for seeding the reverse sweep.
struct KlPieces {
    kl: f64,
    v0: SpdView,
    vk: SpdView,
    mean0: Array1<f64>,
    meank: Array1<f64>,
}

fn kl_pieces(theta0: &ArrayView2<f64>, thetak: &ArrayView2<f64>) -> Result<KlPieces> {
    let s0 = ensemble_stats(theta0)?;
    let sk = ensemble_stats(thetak)?;
    let d = s0.mean.len() as f64;
    let v0 = SpdView::new(&s0.cov.view(), covariance_floor(&s0.cov.view()))?;
    let vk = SpdView::new(&sk.cov.view(), covariance_floor(&sk.cov.view()))?;
    let dm = &sk.mean - &s0.mean;
    let kl = 0.5
        * (v0.trace_solve(&sk.cov.view()) - d + v0.logdet() - vk.logdet()
            + dm.dot(&v0.solve(&dm.view())));
    Ok(KlPieces { kl, v0, vk, mean0: s0.mean, meank: sk.mean })
}

/// Forward-only divergence of one frozen run; shares every numerical step
/// with the gradient path so finite differences of this value are the
/// reference for the reverse sweep.
fn kl_value_one_sample<M: DesignMap>(
    map: &M,
    prep: &M::Prep,
    theta0: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    gamma: &ArrayView2<f64>,
    perts: &[Array2<f64>],
) -> Result<f64> {
    let mut theta = theta0.to_owned();
    for pert in perts {
        let pb = predict_block(map, prep, &theta.view())?;
        let up = update_pieces(&theta.view(), &pb.g.view(), y, gamma, &pert.view())?;
        theta = &theta + &up.innovation.dot(&up.kt);
    }
    Ok(kl_pieces(theta0, &theta.view())?.kl)
}

/// Divergence and its design gradient for one frozen data sample.
#[allow(clippy::too_many_arguments)]
fn kl_grad_one_sample<M: DesignMap>(
    map: &M,
    prep: &M::Prep,
    theta0: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    dy_dd: &ArrayView2<f64>,
    gamma: &ArrayView2<f64>,
    perts: &[Array2<f64>],
    opts: &AdEkiOptions,
    meter: Option<&AllocMeter>,
) -> Result<(f64, [f64; 2], Option<usize>)> {
    let j = theta0.nrows();
    let dth = theta0.ncols();
    let q = y.len();
    let k = perts.len();

    // forward sweep with one (ensemble, predictions) checkpoint per iteration
    let mut thetas = Vec::with_capacity(k + 1);
    let mut preds = Vec::with_capacity(k);
    thetas.push(theta0.to_owned());
    for pert in perts {
        let pb = predict_block(map, prep, &thetas.last().unwrap().view())?;
        let up = update_pieces(&thetas.last().unwrap().view(), &pb.g.view(), y, gamma, &pert.view())?;
        let next = thetas.last().unwrap() + &up.innovation.dot(&up.kt);
        preds.push(pb.g);
        thetas.push(next);
    }
    let checkpoint_bytes: usize = thetas.iter().map(|t| f64_bytes(t.len())).sum::<usize>()
        + preds.iter().map(|p| f64_bytes(p.len())).sum::<usize>();
    let _ck_guard = meter.map(|m| m.scoped(checkpoint_bytes));

    let klp = kl_pieces(theta0, &thetas[k].view())?;

    // reverse sweep: everything below is bounded work space, independent of K
    let mark = meter.map(|m| m.mark());

    let dm = &klp.meank - &klp.mean0;
    let a = klp.v0.solve(&dm.view());
    let b = (klp.v0.inverse() - klp.vk.inverse()) * 0.5;
    let mut p = Array2::zeros((j, dth));
    {
        let coef = 2.0 / (j as f64 - 1.0);
        let thk = &thetas[k];
        for jj in 0..j {
            let centered = &thk.row(jj) - &klp.meank;
            let row = &a / j as f64 + &(b.dot(&centered) * coef);
            p.row_mut(jj).assign(&row);
        }
    }
    let _p_guard = meter.map(|m| m.scoped(f64_bytes(p.len()) + f64_bytes(b.len())));

    let mut y_hat = Array1::<f64>::zeros(q);
    let mut gd = [0.0_f64; 2];
    for n in (0..k).rev() {
        let theta_n = &thetas[n];
        let pb = predict_block(map, prep, &theta_n.view())?;
        if opts.verify_checkpoints {
            for jj in 0..j {
                for qq in 0..q {
                    if pb.g[[jj, qq]].to_bits() != preds[n][[jj, qq]].to_bits() {
                        return Err(Error::CheckpointMismatch { iteration: n, member: jj });
                    }
                }
            }
        }
        let up = update_pieces(&theta_n.view(), &pb.g.view(), y, gamma, &perts[n].view())?;
        let _work_guard = meter.map(|m| {
            let bytes = f64_bytes(pb.g.len() + pb.dgx.len() + pb.dgy.len())
                + f64_bytes(up.tc.len() + up.gc.len() + up.l.len() + up.kt.len() + up.innovation.len());
            m.scoped(bytes)
        });

        // theta' = theta + R K', with K = S_tg C^-1 and R the innovations
        let khat = p.t().dot(&up.innovation); // dKL/dK, d x q
        let rhat = p.dot(&up.kt.t()); // dKL/dR, J x q
        y_hat += &rhat.sum_axis(Axis(0));
        let mut ghat = -&rhat;
        let sig_tg_hat = chol_solve_mat(&up.l.view(), &khat.t()).t().to_owned(); // d x q
        let chat = -up.kt.dot(&sig_tg_hat); // q x q
        let denom = j as f64 - 1.0;
        let tchat = up.gc.dot(&sig_tg_hat.t()) / denom; // J x d
        ghat += &(up.tc.dot(&sig_tg_hat) / denom);
        let csym = &chat + &chat.t();
        ghat += &(up.gc.dot(&csym) / denom);

        gd[0] += (&ghat * &pb.dgx).sum();
        gd[1] += (&ghat * &pb.dgy).sum();

        if n > 0 {
            let mut p_next = &p + &tchat;
            if !opts.truncate_theta_chain {
                let jacs = jacobian_block(map, prep, &theta_n.view())?;
                for (jj, jac) in jacs.iter().enumerate() {
                    let push = jac.t().dot(&ghat.row(jj));
                    let updated = &p_next.row(jj) + &push;
                    p_next.row_mut(jj).assign(&updated);
                }
            }
            p = p_next;
        }
    }
    gd[0] += y_hat.dot(&dy_dd.column(0));
    gd[1] += y_hat.dot(&dy_dd.column(1));

    let reverse_peak = match (meter, mark) {
        (Some(m), Some(mk)) => Some(m.peak_above(mk)),
        _ => None,
    };
    Ok((klp.kl, gd, reverse_peak))
}

fn check_perts(
    perts: &[Vec<Array2<f64>>],
    n_samples: usize,
    iterations: usize,
    j: usize,
    q: usize,
) -> Result<()> {
    if perts.len() != n_samples {
        return Err(Error::Config(format!(
            "{} perturbation sets for {} data samples",
            perts.len(),
            n_samples
        )));
    }
    for set in perts {
        if set.len() != iterations {
            return Err(Error::Config(format!(
                "{} perturbation blocks for {} iterations",
                set.len(),
                iterations
            )));
        }
        for block in set {
            if block.nrows() != j || block.ncols() != q {
                return Err(Error::Config(format!(
                    "perturbation block is {:?}, expected ({j}, {q})",
                    block.shape()
                )));
            }
        }
    }
    Ok(())
}

/// Information-gain estimate at a design: mean divergence over the frozen
/// data samples. Shares its numerics with `grad_eig_wrt_design`.
pub fn eig_value<M: DesignMap>(
    map: &M,
    d: &Design,
    theta0: &ArrayView2<f64>,
    source: &DataSource,
    gamma: &ArrayView2<f64>,
    perts: &[Vec<Array2<f64>>],
    iterations: usize,
) -> Result<f64> {
    let m_samples = source.n_samples();
    check_perts(perts, m_samples, iterations, theta0.nrows(), map.obs_dim())?;
    let prep = map.prepare(d)?;
    let mut acc = 0.0;
    for (m, pert) in perts.iter().enumerate() {
        let (y, _) = source.sample(map, &prep, d, m)?;
        acc += kl_value_one_sample(map, &prep, theta0, &y.view(), gamma, pert)?;
    }
    Ok(acc / m_samples as f64)
}

/// Information gain and its gradient in the design coordinates.
#[allow(clippy::too_many_arguments)]
pub fn grad_eig_wrt_design<M: DesignMap>(
    map: &M,
    d: &Design,
    theta0: &ArrayView2<f64>,
    source: &DataSource,
    gamma: &ArrayView2<f64>,
    perts: &[Vec<Array2<f64>>],
    opts: &AdEkiOptions,
    meter: Option<&AllocMeter>,
) -> Result<EigGradient> {
    let m_samples = source.n_samples();
    check_perts(perts, m_samples, opts.iterations, theta0.nrows(), map.obs_dim())?;
    let prep = map.prepare(d)?;
    let mut value = 0.0;
    let mut grad = [0.0_f64; 2];
    let mut reverse_peak: Option<usize> = None;
    for (m, pert) in perts.iter().enumerate() {
        let (y, dy_dd) = source.sample(map, &prep, d, m)?;
        let (kl, g, peak) = kl_grad_one_sample(
            map,
            &prep,
            theta0,
            &y.view(),
            &dy_dd.view(),
            gamma,
            pert,
            opts,
            meter,
        )?;
        value += kl;
        grad[0] += g[0];
        grad[1] += g[1];
        reverse_peak = match (reverse_peak, peak) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (None, b) => b,
            (a, None) => a,
        };
    }
    let scale = 1.0 / m_samples as f64;
    Ok(EigGradient {
        value: value * scale,
        grad: [grad[0] * scale, grad[1] * scale],
        reverse_peak_bytes: reverse_peak,
    })
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AscentOptions {
    pub max_updates: usize,
    pub step0: f64,
    pub min_step: f64,
    pub max_backtracks: usize,
    /// Stop once an accepted step improves the objective by less than this
    /// (relative to max(1, |objective|)).
    pub plateau_tol: f64,
    /// Per-axis count of probe points spread over the feasible box before the
    /// climb. The start location always competes; the ascent begins from the
    /// best probe. Guards against starts on flat stretches of the objective,
    /// where a pure gradient climb stalls at once. 0 or 1 disables probing.
    #[serde(default = "default_probe_grid")]
    pub probe_grid: usize,
}

fn default_probe_grid() -> usize {
    1
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            max_updates: 40,
            step0: 0.05,
            min_step: 1e-6,
            max_backtracks: 30,
            plateau_tol: 1e-7,
            probe_grid: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxUpdates,
    Plateau,
    StepFloor,
    /// The projected step could not move the design.
    Pinned,
}

#[derive(Debug, Clone)]
pub struct DesignStep {
    pub design: Design,
    pub objective: f64,
    pub grad: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct DesignOptTrace {
    /// Accepted iterates in order, including the start.
    pub steps: Vec<DesignStep>,
    /// Objective / gradient evaluations spent.
    pub evaluations: usize,
    pub stop: StopReason,
}

/// Projected gradient ascent on the information gain, constrained to the
/// design window intersected with the step box around `box_center`. Monotone:
/// a candidate is accepted only if it strictly improves the frozen objective.
#[allow(clippy::too_many_arguments)]
pub fn optimize_design<M: DesignMap>(
    map: &M,
    start: Design,
    box_center: &Design,
    theta0: &ArrayView2<f64>,
    source: &DataSource,
    gamma: &ArrayView2<f64>,
    perts: &[Vec<Array2<f64>>],
    eki_opts: &AdEkiOptions,
    opts: &AscentOptions,
) -> Result<(Design, DesignOptTrace)> {
    let project = |d: Design| map.snap(d.constrain_to(*box_center));
    let mut cur = project(start);
    let mut evaluations = 0;
    if opts.probe_grid >= 2 {
        // Sample the feasible box on a small lattice and hop to the best
        // point before climbing. Ties keep the earliest candidate, and the
        // start is probed first, so a flat landscape leaves the start alone.
        let n = opts.probe_grid;
        let mut seen: Vec<Design> = Vec::new();
        let mut best = (f64::NEG_INFINITY, cur);
        for idx in 0..=(n * n) {
            let cand = if idx == 0 {
                cur
            } else {
                let fx = ((idx - 1) / n) as f64 / (n - 1) as f64;
                let fy = ((idx - 1) % n) as f64 / (n - 1) as f64;
                project(Design::new(
                    box_center.x - MAX_STEP + 2.0 * MAX_STEP * fx,
                    box_center.y - MAX_STEP + 2.0 * MAX_STEP * fy,
                ))
            };
            if seen.iter().any(|s| (s.x - cand.x).abs() + (s.y - cand.y).abs() < 1e-9) {
                continue;
            }
            seen.push(cand);
            let val = eig_value(map, &cand, theta0, source, gamma, perts, eki_opts.iterations)?;
            evaluations += 1;
            if val.is_finite() && val > best.0 {
                best = (val, cand);
            }
        }
        cur = best.1;
    }
    evaluations += 1;
    let eg = grad_eig_wrt_design(map, &cur, theta0, source, gamma, perts, eki_opts, None)?;
    let mut cur_val = eg.value;
    let mut cur_grad = eg.grad;
    let mut steps = vec![DesignStep { design: cur, objective: cur_val, grad: cur_grad }];
    let mut step = opts.step0;
    let mut stop = StopReason::MaxUpdates;

    'outer: for _ in 0..opts.max_updates {
        let mut accepted = false;
        for _ in 0..=opts.max_backtracks {
            if step < opts.min_step {
                stop = StopReason::StepFloor;
                break 'outer;
            }
            let cand = project(Design::new(cur.x + step * cur_grad[0], cur.y + step * cur_grad[1]));
            if (cand.x - cur.x).abs() + (cand.y - cur.y).abs() < 1e-12 {
                stop = StopReason::Pinned;
                break 'outer;
            }
            let val = eig_value(map, &cand, theta0, source, gamma, perts, eki_opts.iterations)?;
            evaluations += 1;
            if val.is_finite() && val > cur_val {
                let improvement = val - cur_val;
                cur = cand;
                let eg =
                    grad_eig_wrt_design(map, &cur, theta0, source, gamma, perts, eki_opts, None)?;
                evaluations += 1;
                cur_grad = eg.grad;
                // the gradient evaluation recomputes the objective at the
                // accepted point; keep that freshest value
                cur_val = eg.value;
                steps.push(DesignStep { design: cur, objective: cur_val, grad: cur_grad });
                accepted = true;
                step *= 1.5;
                if improvement < opts.plateau_tol * cur_val.abs().max(1.0) {
                    stop = StopReason::Plateau;
                    break 'outer;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            stop = StopReason::StepFloor;
            break;
        }
    }
    Ok((cur, DesignOptTrace { steps, evaluations, stop }))
}
