use ddrkit::ddr::{estimate, DdrConfig, NuisancePredictions, ObservedDataset, OutcomeSpec};
use ddrkit::inference::{
    confidence_intervals, desparsify, infer, precision_auto, precision_direct, precision_nodewise, variance_estimates,
    NodewiseRule, PrecisionEstimate, PrecisionMethod,
};
use ddrkit::nuisance::{BasisKind, BasisSpec, LambdaRule};
use ddrkit::numkit::{Matrix, RngStream};
use ddrkit::simulate::{CovKind, Dgp, DgpKind, DgpSpec};
use ddrkit::solvers::{fit_lasso, fit_lasso_with, DesignProblem, LossKind, SolverOptions, SparseFit};
use ddrkit::Execution;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

const SEQ: Execution = Execution::Sequential;
const NO_INTERCEPT: BasisSpec = BasisSpec { kind: BasisKind::Linear, intercept: false };

fn gaussian(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::new(seed, 0);
    Matrix::from_fn(n, d, |_, _| rng.standard_normal())
}

/// Fully observed data with `y = x β + ε` and trivial nuisances.
fn full_data(n: usize, d: usize, seed: u64) -> (ObservedDataset, NuisancePredictions) {
    let x = gaussian(n, d, seed);
    let mut rng = RngStream::new(seed, 1);
    let y = (0..n).map(|i| x[(i, 0)] - 0.5 * x[(i, 1)] + rng.standard_normal()).collect();
    let m = (0..n).map(|_| rng.standard_normal()).collect();
    let data = ObservedDataset::new(vec![true; n], y, x).unwrap();
    (data, NuisancePredictions::new(vec![1.0; n], m, None).unwrap())
}

fn plain_problem(data: &ObservedDataset) -> DesignProblem {
    let y = (0..data.n()).map(|i| data.observed_y(i).unwrap()).collect();
    DesignProblem::new(data.x().clone(), y, LossKind::Squared).unwrap()
}

fn fixed_omega(omega: Matrix) -> PrecisionEstimate {
    PrecisionEstimate {
        omega,
        method: PrecisionMethod::DirectInverse,
        lambdas: vec![],
        residual_variances: vec![],
        diagnostic: 0.0,
    }
}

#[test]
fn direct_inverse_round_trip() {
    let x = gaussian(200, 15, 1);
    let sigma = x.weighted_gram(None);
    let p = precision_direct(&sigma).unwrap();
    assert!(p.omega.matmul(&sigma).unwrap().max_abs_diff(&Matrix::identity(15)) <= 1e-8);
    assert!(p.diagnostic <= 1e-8);
    assert_eq!(
        precision_auto(&x, NodewiseRule::default(), &mut RngStream::new(1, 0), SEQ).unwrap().method,
        PrecisionMethod::DirectInverse
    );
    let wide = gaussian(20, 15, 2);
    assert_eq!(
        precision_auto(&wide, NodewiseRule::default(), &mut RngStream::new(1, 0), SEQ).unwrap().method,
        PrecisionMethod::Nodewise
    );
}

#[test]
fn unpenalized_fit_needs_no_correction() {
    let (data, preds) = full_data(100, 6, 3);
    let fit =
        fit_lasso_with(&plain_problem(&data), 0.0, None, SolverOptions { tol: 1e-13, max_sweeps: 100_000 }).unwrap();
    let omega = precision_direct(&data.x().weighted_gram(None)).unwrap();
    let theta = desparsify(&data, &preds, &fit, &omega, &NO_INTERCEPT).unwrap();
    for (a, b) in theta.iter().zip(&fit.coefficients) {
        assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn one_step_from_zero_is_ols() {
    let (data, preds) = full_data(100, 6, 4);
    let zero = SparseFit { coefficients: vec![0.0; 6], lambda: 0.0, iterations: 0, converged: true, objective: 0.0 };
    let omega = precision_direct(&data.x().weighted_gram(None)).unwrap();
    let theta = desparsify(&data, &preds, &zero, &omega, &NO_INTERCEPT).unwrap();
    let ols =
        fit_lasso_with(&plain_problem(&data), 0.0, None, SolverOptions { tol: 1e-14, max_sweeps: 100_000 }).unwrap();
    for (a, b) in theta.iter().zip(&ols.coefficients) {
        assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn full_data_matches_classical_debiased_lasso() {
    let (data, preds) = full_data(80, 120, 5);
    let problem = plain_problem(&data);
    let fit = fit_lasso(&problem, 0.1, None).unwrap();
    let (result, omega) =
        infer(&data, &preds, &fit, &NO_INTERCEPT, 0.05, NodewiseRule::default(), &mut RngStream::new(1, 0), SEQ)
            .unwrap();
    assert_eq!(omega.method, PrecisionMethod::Nodewise);
    let (n, d) = (80, 120);
    let x = data.x();
    let resid: Vec<f64> =
        (0..n).map(|i| problem.response()[i] - ddrkit::numkit::dot(x.row(i), &fit.coefficients)).collect();
    let score: Vec<f64> = (0..d).map(|j| (0..n).map(|i| resid[i] * x[(i, j)]).sum::<f64>() / n as f64).collect();
    let z = ddrkit::numkit::normal_quantile(0.975);
    for j in 0..d {
        let row = omega.omega.row(j);
        let classical = fit.coefficients[j] + ddrkit::numkit::dot(row, &score);
        let var = (0..n).map(|i| (resid[i] * ddrkit::numkit::dot(row, x.row(i))).powi(2)).sum::<f64>() / n as f64;
        let half = z * var.sqrt() / (n as f64).sqrt();
        assert!((result.theta_tilde[j] - classical).abs() <= 1e-10);
        assert!((result.ci_lower[j] - (classical - half)).abs() <= 1e-10);
        assert!((result.ci_upper[j] - (classical + half)).abs() <= 1e-10);
    }
}

#[test]
fn intercept_only_variance_is_biased_sample_variance() {
    let mut rng = RngStream::new(6, 0);
    let y: Vec<f64> = (0..50).map(|_| 2.0 + rng.standard_normal()).collect();
    let ybar = y.iter().sum::<f64>() / 50.0;
    let var = y.iter().map(|v| (v - ybar).powi(2)).sum::<f64>() / 50.0;
    let data = ObservedDataset::new(vec![true; 50], y, Matrix::from_fn(50, 1, |_, _| 1.0)).unwrap();
    let preds = NuisancePredictions::new(vec![1.0; 50], vec![0.0; 50], None).unwrap();
    let fit = SparseFit { coefficients: vec![ybar], lambda: 0.0, iterations: 0, converged: true, objective: 0.0 };
    let sigma = variance_estimates(&data, &preds, &fit, &fixed_omega(Matrix::identity(1)), &NO_INTERCEPT).unwrap();
    assert!((sigma[0] * sigma[0] - var).abs() <= 1e-12);
}

#[test]
fn zero_residuals_give_zero_sigma() {
    let x = gaussian(30, 3, 7);
    let beta = [1.0, -2.0, 0.5];
    let y = (0..30).map(|i| ddrkit::numkit::dot(x.row(i), &beta)).collect();
    let data = ObservedDataset::new(vec![true; 30], y, x).unwrap();
    let preds = NuisancePredictions::new(vec![1.0; 30], vec![0.0; 30], None).unwrap();
    let fit = SparseFit { coefficients: beta.to_vec(), lambda: 0.0, iterations: 0, converged: true, objective: 0.0 };
    let sigma = variance_estimates(&data, &preds, &fit, &fixed_omega(Matrix::identity(3)), &NO_INTERCEPT).unwrap();
    assert!(sigma.iter().all(|s| *s == 0.0));
}

#[test]
fn rescaling_leaves_standardized_statistic_unchanged() {
    let (data, preds) = full_data(120, 5, 8);
    let c = 3.7;
    let fit = fit_lasso(&plain_problem(&data), 0.05, None).unwrap();
    let omega = precision_direct(&data.x().weighted_gram(None)).unwrap();
    let y: Vec<f64> = (0..120).map(|i| data.observed_y(i).unwrap()).collect();
    let scaled = ObservedDataset::new(vec![true; 120], y, data.x().scale(c)).unwrap();
    let scaled_fit = SparseFit { coefficients: fit.coefficients.iter().map(|v| v / c).collect(), ..fit.clone() };
    let scaled_omega = fixed_omega(omega.omega.scale(1.0 / (c * c)));
    let s1 = variance_estimates(&data, &preds, &fit, &omega, &NO_INTERCEPT).unwrap();
    let s2 = variance_estimates(&scaled, &preds, &scaled_fit, &scaled_omega, &NO_INTERCEPT).unwrap();
    let t1 = desparsify(&data, &preds, &fit, &omega, &NO_INTERCEPT).unwrap();
    let t2 = desparsify(&scaled, &preds, &scaled_fit, &scaled_omega, &NO_INTERCEPT).unwrap();
    let theta0 = [1.0, -0.5, 0.0, 0.0, 0.0];
    for j in 0..5 {
        assert!((s2[j] - s1[j] / c).abs() <= 1e-10 * s1[j]);
        let a = (t1[j] - theta0[j]) / s1[j];
        let b = (t2[j] - theta0[j] / c) / s2[j];
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
}

#[test]
fn nodewise_identity_recovery() {
    let x = gaussian(2000, 100, 9);
    let p = precision_nodewise(&x, NodewiseRule::default(), &mut RngStream::new(1, 0), SEQ).unwrap();
    let gap = p.omega.max_abs_diff(&Matrix::identity(100));
    assert!(gap <= 0.15, "max gap {gap}");
}

#[test]
fn nodewise_gap_shrinks_with_lambda() {
    let x = gaussian(150, 20, 10);
    let mut previous = f64::INFINITY;
    for lambda in [0.4, 0.2, 0.1, 0.05, 0.02] {
        let p = precision_nodewise(&x, NodewiseRule::Fixed(lambda), &mut RngStream::new(1, 0), SEQ).unwrap();
        assert!(p.omega.rows() == 20 && p.omega.is_finite());
        assert!(p.diagnostic <= previous + 1e-12, "gap {} after {previous}", p.diagnostic);
        previous = p.diagnostic;
    }
}

#[test]
fn standardized_statistic_is_normal() {
    let dgp = Dgp::new(DgpSpec::new(DgpKind::LinearLinear, 50, CovKind::Identity)).unwrap();
    let theta0 = dgp.theta0_exact();
    let coord = 30;
    assert_eq!(theta0[coord], 0.0);
    let basis = BasisSpec::linear();
    let cfg = DdrConfig::new(basis, OutcomeSpec::Lasso { basis, rule: LambdaRule::default_cv() });
    let stats: Vec<f64> = ddrkit::par::map_indexed(Execution::available(), 500, |r| {
        let rng = RngStream::new(2024, r as u64);
        let (data, _) = dgp.generate(1000, &mut rng.substream(0)).unwrap();
        let est = estimate(&data, &cfg, &rng.substream(10), SEQ).unwrap();
        let (res, _) =
            infer(&data, &est.preds, &est.fit, &basis, 0.05, NodewiseRule::default(), &mut rng.substream(2), SEQ)
                .unwrap();
        res.standardized(coord, theta0[coord])
    });
    let mut sorted = stats.clone();
    sorted.sort_by(f64::total_cmp);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = sorted.len() as f64;
    let d = sorted.iter().enumerate().fold(0.0_f64, |m, (k, &v)| {
        let f = normal.cdf(v);
        m.max((f - k as f64 / n).abs()).max(((k + 1) as f64 / n - f).abs())
    });
    // Asymptotic Kolmogorov critical value at level 0.01.
    let critical = 1.627_6 / n.sqrt();
    assert!(d < critical, "KS statistic {d} >= {critical}");
}

proptest! {
    #[test]
    fn narrower_level_nests(theta in -5.0f64..5.0, sigma in 1e-3f64..10.0, n in 1usize..5000) {
        let wide = confidence_intervals(vec![theta], vec![sigma], n, 0.05).unwrap();
        let narrow = confidence_intervals(vec![theta], vec![sigma], n, 0.1).unwrap();
        prop_assert!(wide.ci_lower[0] < narrow.ci_lower[0] && narrow.ci_upper[0] < wide.ci_upper[0]);
        prop_assert!(narrow.covers(0, theta));
        let z = 1.959_963_984_540_054;
        prop_assert!((wide.lengths()[0] - 2.0 * z * sigma / (n as f64).sqrt()).abs() <= 1e-9 * wide.lengths()[0]);
    }
}
