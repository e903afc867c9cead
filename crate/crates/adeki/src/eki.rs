//! Ensemble Kalman inversion. Members are rows of a (J x d) array. One
//! update forms the empirical cross- and output-covariances
//!
//!   S_tg = Tc' Gc / (J-1),   S_gg = Gc' Gc / (J-1)
//!
//! from the mean-centered members Tc and predictions Gc, builds the gain
//! K = S_tg (S_gg + Gamma)^-1, and moves every member by
//! K (y + eps_j - g_j) with its own perturbed copy of the data. Information
//! gain of a run is measured as the Gaussian divergence of the final
//! ensemble from the initial one, with eigenvalue flooring guarding the
//! collapsed directions an ensemble of finite size produces.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::metrics::{chol_solve_mat, cholesky, covariance_floor, symmetrize, SpdView};

#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub mean: Array1<f64>,
    /// Unbiased (1/(J-1)) covariance.
    pub cov: Array2<f64>,
}

pub fn ensemble_stats(members: &ArrayView2<f64>) -> Result<EnsembleStats> {
    let j = members.nrows();
    if j < 2 {
        return Err(Error::EnsembleTooSmall { got: j });
    }
    let mean = members.mean_axis(Axis(0)).expect("at least one member");
    let centered = members.to_owned() - &mean;
    let mut cov = centered.t().dot(&centered) / (j as f64 - 1.0);
    symmetrize(&mut cov);
    Ok(EnsembleStats { mean, cov })
}

/// Draw J members from N(mean, cov), one row each.
pub fn sample_gaussian<R: Rng>(
    mean: &ArrayView1<f64>,
    cov: &ArrayView2<f64>,
    j: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let d = mean.len();
    let l = cholesky(cov, "ensemble prior covariance")?;
    let mut out = Array2::zeros((j, d));
    for mut row in out.rows_mut() {
        let z = Array1::from_iter((0..d).map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v
        }));
        row.assign(&(l.dot(&z) + mean));
    }
    Ok(out)
}

/// Draw a (J x q) matrix whose rows are independent N(0, gamma) samples.
pub fn draw_perturbations<R: Rng>(
    j: usize,
    gamma: &ArrayView2<f64>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let q = gamma.nrows();
    let l = cholesky(gamma, "observation noise covariance")?;
    let mut out = Array2::zeros((j, q));
    for mut row in out.rows_mut() {
        let z = Array1::from_iter((0..q).map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v
        }));
        row.assign(&l.dot(&z));
    }
    Ok(out)
}

/// Intermediates of one update, kept for the reverse-mode engine.
#[derive(Debug, Clone)]
pub struct EkiUpdateParts {
    /// Gain K (d x q).
    pub kalman: Array2<f64>,
    /// Lower Cholesky factor of S_gg + Gamma (q x q).
    pub c_chol: Array2<f64>,
    /// Rows y + eps_j - g_j (J x q).
    pub innovation: Array2<f64>,
}

/// One update with externally supplied perturbations; the same inputs always
/// produce the same output.
pub fn eki_update_frozen(
    theta: &ArrayView2<f64>,
    g: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    gamma: &ArrayView2<f64>,
    pert: &ArrayView2<f64>,
) -> Result<(Array2<f64>, EkiUpdateParts)> {
    let j = theta.nrows();
    if j < 2 {
        return Err(Error::EnsembleTooSmall { got: j });
    }
    let q = y.len();
    if g.nrows() != j || g.ncols() != q {
        return Err(Error::Config(format!(
            "prediction block is {:?}, expected ({j}, {q})",
            g.shape()
        )));
    }
    if pert.nrows() != j || pert.ncols() != q {
        return Err(Error::Config(format!(
            "perturbation block is {:?}, expected ({j}, {q})",
            pert.shape()
        )));
    }
    if gamma.nrows() != q || gamma.ncols() != q {
        return Err(Error::Config(format!(
            "noise covariance is {:?}, expected ({q}, {q})",
            gamma.shape()
        )));
    }
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
    let theta_new = theta.to_owned() + innovation.dot(&kt);
    Ok((theta_new, EkiUpdateParts { kalman: kt.t().to_owned(), c_chol: l, innovation }))
}

/// One update that draws fresh N(0, gamma) perturbations from `rng`.
pub fn eki_step<R: Rng>(
    theta: &ArrayView2<f64>,
    g: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    gamma: &ArrayView2<f64>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let pert = draw_perturbations(theta.nrows(), gamma, rng)?;
    let (next, _) = eki_update_frozen(theta, g, y, gamma, &pert.view())?;
    Ok(next)
}

#[derive(Debug, Clone, Copy)]
pub struct KlDiagnostics {
    pub kl: f64,
    /// Floored eigenvalue counts in the initial / final ensemble covariances.
    pub clipped_initial: usize,
    pub clipped_final: usize,
}

/// Gaussian divergence of the final ensemble from the initial one:
/// 0.5 [tr(S0^-1 Sk) - d + ln det S0 - ln det Sk + dm' S0^-1 dm].
pub fn ensemble_kl_diag(
    initial: &ArrayView2<f64>,
    finals: &ArrayView2<f64>,
) -> Result<KlDiagnostics> {
    let s0 = ensemble_stats(initial)?;
    let sk = ensemble_stats(finals)?;
    if s0.mean.len() != sk.mean.len() {
        return Err(Error::Config(format!(
            "ensembles have dimensions {} and {}",
            s0.mean.len(),
            sk.mean.len()
        )));
    }
    let d = s0.mean.len() as f64;
    let v0 = SpdView::new(&s0.cov.view(), covariance_floor(&s0.cov.view()))?;
    let vk = SpdView::new(&sk.cov.view(), covariance_floor(&sk.cov.view()))?;
    let dm = &sk.mean - &s0.mean;
    let trace = v0.trace_solve(&sk.cov.view());
    let quad = dm.dot(&v0.solve(&dm.view()));
    let kl = 0.5 * (trace - d + v0.logdet() - vk.logdet() + quad);
    Ok(KlDiagnostics { kl, clipped_initial: v0.clipped, clipped_final: vk.clipped })
}

pub fn ensemble_kl(initial: &ArrayView2<f64>, finals: &ArrayView2<f64>) -> Result<f64> {
    Ok(ensemble_kl_diag(initial, finals)?.kl)
}

#[derive(Debug, Clone)]
pub struct EkiRun {
    pub final_ensemble: Array2<f64>,
    /// Divergence from the initial ensemble after each iteration, length K.
    pub kl_trace: Vec<f64>,
}

/// K updates from `theta0`, drawing fresh perturbations each iteration and
/// recording the divergence from the initial ensemble after every one.
pub fn run_eki<R: Rng, F>(
    theta0: &ArrayView2<f64>,
    mut predict: F,
    y: &ArrayView1<f64>,
    gamma: &ArrayView2<f64>,
    iterations: usize,
    rng: &mut R,
) -> Result<EkiRun>
where
    F: FnMut(&ArrayView2<f64>) -> Result<Array2<f64>>,
{
    let mut theta = theta0.to_owned();
    let mut kl_trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let g = predict(&theta.view())?;
        theta = eki_step(&theta.view(), &g.view(), y, gamma, rng)?;
        kl_trace.push(ensemble_kl(theta0, &theta.view())?);
    }
    Ok(EkiRun { final_ensemble: theta, kl_trace })
}

/// Mean divergence over data samples drawn from the prior predictive —
/// the Monte Carlo estimate of expected information gain.
pub fn eig_estimate<F>(n_samples: usize, mut kl_for_sample: F) -> Result<f64>
where
    F: FnMut(usize) -> Result<f64>,
{
    if n_samples == 0 {
        return Err(Error::Config("information-gain estimate needs at least one data sample".into()));
    }
    let mut acc = 0.0;
    for m in 0..n_samples {
        acc += kl_for_sample(m)?;
    }
    Ok(acc / n_samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil::SeedTree;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn stats_match_hand_arithmetic() {
        let members = array![[1.0, 2.0], [3.0, 4.0], [5.0, 0.0]];
        let s = ensemble_stats(&members.view()).unwrap();
        assert_eq!(s.mean, array![3.0, 2.0]);
        assert_eq!(s.cov, array![[4.0, -2.0], [-2.0, 4.0]]);
    }

    #[test]
    fn single_member_is_too_small() {
        let members = array![[1.0, 2.0]];
        assert!(matches!(
            ensemble_stats(&members.view()),
            Err(Error::EnsembleTooSmall { got: 1 })
        ));
    }

    #[test]
    fn scalar_update_matches_closed_form() {
        // members {0, 2}: variance 2; identity map; noise 1 -> gain 2/3
        let theta = array![[0.0], [2.0]];
        let g = theta.clone();
        let y = array![3.0];
        let gamma = array![[1.0]];
        let pert = Array2::zeros((2, 1));
        let (next, parts) =
            eki_update_frozen(&theta.view(), &g.view(), &y.view(), &gamma.view(), &pert.view())
                .unwrap();
        assert_abs_diff_eq!(parts.kalman[[0, 0]], 2.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(next[[0, 0]], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(next[[1, 0]], 2.0 + 2.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn updates_stay_in_the_ensemble_span() {
        // with two members every shift must be parallel to their difference
        let mut rng = SeedTree::new(11).rng();
        let theta = sample_gaussian(
            &array![0.0, 0.0, 0.0].view(),
            &(Array2::eye(3) * 0.5).view(),
            2,
            &mut rng,
        )
        .unwrap();
        let g = theta.map_axis(Axis(1), |row| row.sum()).insert_axis(Axis(1));
        let y = array![1.0];
        let gamma = array![[0.3]];
        let pert = draw_perturbations(2, &gamma.view(), &mut rng).unwrap();
        let (next, _) =
            eki_update_frozen(&theta.view(), &g.view(), &y.view(), &gamma.view(), &pert.view())
                .unwrap();
        let span = &theta.row(1).to_owned() - &theta.row(0).to_owned();
        for j in 0..2 {
            let shift = &next.row(j).to_owned() - &theta.row(j).to_owned();
            let cross0 = shift[0] * span[1] - shift[1] * span[0];
            let cross1 = shift[0] * span[2] - shift[2] * span[0];
            assert!(
                cross0.abs() < 1e-12 && cross1.abs() < 1e-12,
                "member {j} left the ensemble span: {shift:?} vs {span:?}"
            );
        }
    }

    #[test]
    fn divergence_of_an_ensemble_from_itself_vanishes() {
        let mut rng = SeedTree::new(3).rng();
        let ens = sample_gaussian(
            &array![1.0, -1.0].view(),
            &array![[2.0, 0.3], [0.3, 1.0]].view(),
            40,
            &mut rng,
        )
        .unwrap();
        let kl = ensemble_kl(&ens.view(), &ens.view()).unwrap();
        assert_abs_diff_eq!(kl, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn divergence_of_a_pure_shift_is_half_squared_distance() {
        // shifting every member by mu leaves the covariance untouched, so the
        // divergence reduces to the Mahalanobis term
        let mut rng = SeedTree::new(8).rng();
        let ens0 = sample_gaussian(
            &array![0.0, 0.0].view(),
            &Array2::eye(2).view(),
            2000,
            &mut rng,
        )
        .unwrap();
        let shifted = ens0.clone() + &array![1.0, 0.0];
        let kl = ensemble_kl(&ens0.view(), &shifted.view()).unwrap();
        assert!((kl - 0.5).abs() < 0.05, "expected about 0.5, got {kl}");
    }

    #[test]
    fn runs_with_the_same_seed_coincide() {
        let y = array![0.7];
        let gamma = array![[0.01]];
        let run = |seed: u64| {
            let mut rng = SeedTree::new(seed).rng();
            let theta0 = sample_gaussian(
                &array![0.0].view(),
                &array![[1.0]].view(),
                12,
                &mut rng,
            )
            .unwrap();
            run_eki(
                &theta0.view(),
                |t| Ok(t.to_owned()),
                &y.view(),
                &gamma.view(),
                4,
                &mut rng,
            )
            .unwrap()
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(a.final_ensemble, b.final_ensemble, "same seed must replay exactly");
        assert_eq!(a.kl_trace, b.kl_trace);
        assert_eq!(a.kl_trace.len(), 4);
        let c = run(43);
        assert_ne!(a.final_ensemble, c.final_ensemble, "different seeds should differ");
    }

    #[test]
    fn iterating_contracts_the_ensemble_toward_the_data() {
        let mut rng = SeedTree::new(21).rng();
        let theta0 = sample_gaussian(
            &array![0.0].view(),
            &array![[1.0]].view(),
            60,
            &mut rng,
        )
        .unwrap();
        let y = array![2.0];
        let gamma = array![[0.05]];
        let run = run_eki(
            &theta0.view(),
            |t| Ok(t.to_owned()),
            &y.view(),
            &gamma.view(),
            6,
            &mut rng,
        )
        .unwrap();
        let s = ensemble_stats(&run.final_ensemble.view()).unwrap();
        assert!((s.mean[0] - 2.0).abs() < 0.2, "mean should approach the data, got {}", s.mean[0]);
        assert!(s.cov[[0, 0]] < 0.5, "spread should contract, got {}", s.cov[[0, 0]]);
        assert!(
            run.kl_trace.last().unwrap() > run.kl_trace.first().unwrap(),
            "divergence should grow across iterations: {:?}",
            run.kl_trace
        );
    }

    #[test]
    fn perturbation_draws_have_the_requested_spread() {
        let mut rng = SeedTree::new(14).rng();
        let gamma = array![[0.04]];
        let pert = draw_perturbations(20000, &gamma.view(), &mut rng).unwrap();
        let var = pert.column(0).mapv(|v| v * v).sum() / 19999.0;
        assert!((var / 0.04 - 1.0).abs() < 0.1, "sample variance {var} vs 0.04");
    }

    #[test]
    fn mismatched_blocks_are_rejected() {
        let theta = array![[0.0], [1.0]];
        let g = array![[0.0, 1.0], [1.0, 0.0]];
        let y = array![0.5];
        let gamma = array![[1.0]];
        let pert = Array2::zeros((2, 1));
        assert!(eki_update_frozen(&theta.view(), &g.view(), &y.view(), &gamma.view(), &pert.view())
            .is_err());
    }

    #[test]
    fn information_gain_estimate_averages_samples() {
        let vals = [1.0, 2.0, 6.0];
        let eig = eig_estimate(3, |m| Ok(vals[m])).unwrap();
        assert_abs_diff_eq!(eig, 3.0, epsilon = 1e-15);
        assert!(eig_estimate(0, |_| Ok(0.0)).is_err());
    }
}
