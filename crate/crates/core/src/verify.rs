//! Self-checks of the numerical core: backprop against finite differences,
//! the simplex QP against a lattice oracle, and the exact statements of the
//! linear-model analysis on random finite worlds.

use std::fmt;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::data::Dataset;
use crate::error::Result;
use crate::model::theory::{
    chi2_distance, decompose_test_loss, fit_classifier_closed_form, kl_chi2_relation_check, model_joint, variance_term,
    DiscreteWorld, LinearClassifier,
};
use crate::model::{loss_and_grads, Extractor, ModelDims, ModelParams};
use crate::numerics::{finite_diff_grad, keyed_rng, Matrix};
use crate::qpsolve::{brute_force_oracle, solve, SimplexQP, DEFAULT_TOL};
use crate::server::testing_loss_analytic;
use crate::stats::CentroidSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

impl Level {
    pub fn resamples(self) -> usize {
        match self {
            Level::Fast => 1_000,
            Level::Full => 10_000,
        }
    }

    /// Monte-Carlo tolerance; the fast level's error bar is `√10` wider.
    pub fn mc_tolerance(self) -> f64 {
        match self {
            Level::Fast => 0.02 * 10f64.sqrt(),
            Level::Full => 0.02,
        }
    }
}

impl std::str::FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            other => Err(format!("unknown level `{other}` (fast | full)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst error seen.
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn below(name: &'static str, measured: f64, threshold: f64, detail: String) -> Self {
        Self {
            name,
            passed: measured.is_finite() && measured < threshold,
            measured,
            threshold,
            detail,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<14} measured {:.3e}  threshold {:.3e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.threshold,
            self.detail
        )
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Options {
    /// Perturbs the analytic gradient before comparison; the gradient check
    /// must then fail.
    pub corrupt_gradient: bool,
}

/// Every check, in a fixed order.
pub fn run_suite(level: Level, opts: Options) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_gradients(20, opts.corrupt_gradient)?,
        check_qp(50)?,
        check_closed_form(10)?,
        check_bias_variance(20, level.resamples(), level.mc_tolerance())?,
        check_decomposition(20)?,
        check_kl_chi2()?,
    ])
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-5))
        .fold(0.0, f64::max)
}

/// Backprop of cross-entropy plus alignment penalty against central
/// differences (step 1e-6), `λ` cycling through 0, 1, 5. Relative error is
/// `|a − n| / max(|a|, |n|, 1e-5)`.
pub fn check_gradients(draws: usize, corrupt: bool) -> Result<CheckResult> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for draw in 0..draws {
        let mut rng = keyed_rng(0x6a7d, &[draw as u64]);
        let dims = ModelDims {
            input: rng.random_range(2..6),
            hidden: rng.random_range(3..8),
            depth: draw % 3,
            feature: rng.random_range(2..5),
            classes: rng.random_range(2..5),
        };
        let lambda = [0.0, 1.0, 5.0][draw % 3];
        let params = ModelParams::init(dims, draw as u64)?;
        let b = rng.random_range(3..9);
        let xs = (0..b * dims.input).map(|_| rng.random_range(-1.5..1.5)).collect();
        let ys = (0..b).map(|_| rng.random_range(0..dims.classes)).collect();
        let batch = Dataset::new(dims.input, xs, ys)?;
        let vectors = (0..dims.classes * dims.feature)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut present = vec![true; dims.classes];
        present[draw % dims.classes] = draw % 2 == 0;
        let centroids = CentroidSet::from_parts(
            Matrix::new(dims.classes, dims.feature, vectors)?,
            vec![1; dims.classes],
            present,
            vec![false; dims.classes],
        )?;

        let mut grads = loss_and_grads(&params, &batch, &centroids, lambda)?;
        if corrupt {
            grads.grad_theta[0] = grads.grad_theta[0] * 1.01 + 1e-3;
        }
        let theta0 = params.theta().as_slice().to_vec();
        let fd_theta = finite_diff_grad(
            |t| {
                let mut q = params.clone();
                let loss = Extractor::from_flat(&dims, t.to_vec())
                    .and_then(|e| q.set_theta(e))
                    .and_then(|_| loss_and_grads(&q, &batch, &centroids, lambda));
                loss.map_or(f64::NAN, |l| l.loss)
            },
            &theta0,
            1e-6,
        );
        let phi0 = params.phi().as_slice().to_vec();
        let fd_phi = finite_diff_grad(
            |f| {
                let mut q = params.clone();
                let loss = Matrix::new(dims.classes, dims.feature, f.to_vec())
                    .and_then(|m| q.set_phi(m))
                    .and_then(|_| loss_and_grads(&q, &batch, &centroids, lambda));
                loss.map_or(f64::NAN, |l| l.loss)
            },
            &phi0,
            1e-6,
        );
        worst = worst
            .max(rel_err(&grads.grad_theta, &fd_theta))
            .max(rel_err(grads.grad_phi.as_slice(), &fd_phi));
    }
    Ok(CheckResult::below(
        "gradient",
        worst,
        1e-4,
        format!("{draws} draws, {:.2}s", start.elapsed().as_secs_f64()),
    ))
}

/// Random PSD `AᵀA` (half of them rank-deficient), `m` in 2..=4, against the
/// 1e-3 lattice oracle, plus two hand-solved cases.
pub fn check_qp(instances: usize) -> Result<CheckResult> {
    let start = Instant::now();
    let mut worst = f64::NEG_INFINITY;
    for i in 0..instances {
        let mut rng = keyed_rng(0x9b, &[i as u64]);
        let m = 2 + i % 3;
        let rank = if i % 2 == 0 { m } else { 1.max(m - 1) };
        let a: Vec<f64> = (0..rank * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = Matrix::new(rank, m, a)?;
        let q = a.transpose().matmul(&a)?;
        let qp = SimplexQP::new(q)?;
        let ours = qp.objective(solve(&qp, DEFAULT_TOL)?.as_slice());
        let oracle = qp.objective(brute_force_oracle(&qp, 1e-3)?.as_slice());
        worst = worst.max(ours - oracle);
    }
    let mut analytic: f64 = 0.0;
    for (diag, want) in [([1.0, 1.0], [0.5, 0.5]), ([1.0, 2.0], [2.0 / 3.0, 1.0 / 3.0])] {
        let sol = solve(&SimplexQP::new(Matrix::diag(&diag)?)?, DEFAULT_TOL)?;
        for (a, b) in sol.as_slice().iter().zip(want) {
            analytic = analytic.max((a - b).abs());
        }
    }
    let passed = worst <= 1e-5 && analytic < 1e-4;
    Ok(CheckResult {
        name: "qp-oracle",
        passed,
        measured: worst,
        threshold: 1e-5,
        detail: format!(
            "objective excess over oracle on {instances} instances; hand cases off by {analytic:.1e}; {:.2}s",
            start.elapsed().as_secs_f64()
        ),
    })
}

/// Finite-difference gradient of the χ² objective at the closed-form
/// classifier of a sampled empirical joint.
pub fn check_closed_form(worlds: usize) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for seed in 0..worlds as u64 {
        let mut rng = keyed_rng(0xc1, &[seed]);
        let (s, k, d) = (rng.random_range(4..10), rng.random_range(2..5), rng.random_range(1..4));
        let world = DiscreteWorld::random(s, k, d, 1, seed)?;
        let p_hat = world.sample_empirical(0, 60, &mut rng);
        let g = fit_classifier_closed_form(&world, &p_hat)?;
        let grad = finite_diff_grad(
            |flat| {
                let g = Matrix::new(k, d, flat.to_vec()).and_then(LinearClassifier::new);
                g.and_then(|g| chi2_distance(&world, &p_hat, &model_joint(&world, &g)))
                    .unwrap_or(f64::NAN)
            },
            g.table().as_slice(),
            1e-6,
        );
        worst = grad.iter().fold(worst, |acc, v| acc.max(v.abs()));
    }
    Ok(CheckResult::below(
        "closed-form",
        worst,
        1e-6,
        format!("max |∇χ²| at the fit over {worlds} worlds"),
    ))
}

/// Expected testing loss of the combined classifier, by resampling every
/// client's data, against bias + variance + irreducible error. World:
/// `S = 8, K = 3, d = 2`, three clients with `n = (20, 40, 40)`; each of
/// `points` weight vectors is drawn from the flat Dirichlet and scored for
/// every target client. Resamples are shared across points.
pub fn check_bias_variance(points: usize, resamples: usize, tolerance: f64) -> Result<CheckResult> {
    let start = Instant::now();
    let n = [20usize, 40, 40];
    let m = n.len();
    let world = DiscreteWorld::random(8, 3, 2, m, 2024)?;
    let means: Vec<LinearClassifier> = (0..m)
        .map(|j| fit_classifier_closed_form(&world, world.joint(j)))
        .collect::<Result<_>>()?;
    let variances: Vec<f64> = (0..m).map(|j| variance_term(&world, j)).collect::<Result<_>>()?;

    let mut rng = keyed_rng(0x7e, &[points as u64]);
    let gamma = Gamma::new(1.0, 1.0).expect("valid shape");
    let alphas: Vec<Vec<f64>> = (0..points)
        .map(|_| {
            let raw: Vec<f64> = (0..m).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|v| v / total).collect()
        })
        .collect();
    let combined_models = |fits: &[LinearClassifier]| -> Result<Vec<Matrix>> {
        alphas
            .iter()
            .map(|a| LinearClassifier::combine(a, fits).map(|g| model_joint(&world, &g)))
            .collect()
    };

    let mut sums = vec![0.0; m * points];
    for r in 0..resamples {
        let mut rng = keyed_rng(0x7e, &[points as u64, r as u64 + 1]);
        let fits: Vec<LinearClassifier> = (0..m)
            .map(|j| fit_classifier_closed_form(&world, &world.sample_empirical(j, n[j], &mut rng)))
            .collect::<Result<_>>()?;
        let models = combined_models(&fits)?;
        for target in 0..m {
            for (p, model) in models.iter().enumerate() {
                sums[target * points + p] += chi2_distance(&world, world.joint(target), model)?;
            }
        }
    }
    let mut worst: f64 = 0.0;
    for target in 0..m {
        for (p, alpha) in alphas.iter().enumerate() {
            let mc = sums[target * points + p] / resamples as f64;
            let analytic = testing_loss_analytic(&world, alpha, &means, &variances, &n, target)?;
            worst = worst.max((mc - analytic).abs() / analytic);
        }
    }
    Ok(CheckResult::below(
        "bias-variance",
        worst,
        tolerance,
        format!(
            "max relative error over {points} weights x {m} targets, {resamples} resamples, {:.2}s",
            start.elapsed().as_secs_f64()
        ),
    ))
}

/// `χ²(P, model) = empirical + gap + constant` on random worlds, empirical
/// joints and classifiers.
pub fn check_decomposition(instances: usize) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for seed in 0..instances as u64 {
        let mut rng = keyed_rng(0xdec, &[seed]);
        let (s, k, d) = (rng.random_range(3..10), rng.random_range(2..5), rng.random_range(1..4));
        let world = DiscreteWorld::random(s, k, d, 1, seed + 100)?;
        let p_hat = world.sample_empirical(0, rng.random_range(10..200), &mut rng);
        let g = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = LinearClassifier::new(Matrix::new(k, d, g)?)?;
        let dec = decompose_test_loss(&world, world.joint(0), &p_hat, &g)?;
        let direct = chi2_distance(&world, world.joint(0), &model_joint(&world, &g))?;
        worst = worst.max((direct - dec.total()).abs());
    }
    Ok(CheckResult::below(
        "decomposition",
        worst,
        1e-10,
        format!("max |χ² − parts| over {instances} instances"),
    ))
}

/// `|KL − χ²/2| / χ²` must shrink at least by 0.6 when `ε` halves, for
/// `ε` in {0.1, 0.05, 0.025}. The gap is `−Σ δ³/3 + O(δ⁴)` relative to
/// `Σ δ²`, so the fixture uses skewed features whose cubic term dominates
/// over this range. The classifier sums to zero over classes so the perturbed
/// model stays a distribution, and `|f(x)ᵀg(y)| ≤ 1`.
pub fn check_kl_chi2() -> Result<CheckResult> {
    let features = Matrix::new(4, 1, vec![3.0, -1.0, -1.0, -1.0])?;
    let uniform = Matrix::new(4, 3, vec![1.0 / 3.0; 12])?;
    let world = DiscreteWorld::new(features, vec![0.25; 4], vec![uniform])?;
    let g = LinearClassifier::new(Matrix::new(3, 1, vec![1.0 / 3.0, -1.0 / 6.0, -1.0 / 6.0])?)?;

    let gap = |eps: f64| -> Result<f64> {
        let (kl, chi2) = kl_chi2_relation_check(&world, &g, eps)?;
        Ok((kl - chi2 / 2.0).abs() / chi2)
    };
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for eps in [0.1, 0.05, 0.025] {
        let ratio = gap(eps / 2.0)? / gap(eps)?;
        parts.push(format!("{eps}: {ratio:.3}"));
        worst = worst.max(ratio);
    }
    Ok(CheckResult {
        name: "kl-chi2",
        passed: worst <= 0.6,
        measured: worst,
        threshold: 0.6,
        detail: format!("gap ratio at ε/2 vs ε ({})", parts.join(", ")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_checks_pass() {
        assert!(check_gradients(3, false).unwrap().passed);
        assert!(check_qp(6).unwrap().passed);
        assert!(check_closed_form(3).unwrap().passed);
        assert!(check_decomposition(5).unwrap().passed);
        let kl = check_kl_chi2().unwrap();
        assert!(kl.passed, "{kl}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        assert!(!check_gradients(1, true).unwrap().passed);
    }

    #[test]
    fn bias_variance_small_run() {
        let r = check_bias_variance(4, 400, 0.1).unwrap();
        assert!(r.passed, "{r}");
    }
}
