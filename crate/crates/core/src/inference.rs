//! Desparsified estimator and coordinatewise confidence intervals for the squared loss.

use crate::ddr::{pseudo_outcomes, NuisancePredictions, ObservedDataset};
use crate::error::{Error, Result};
use crate::nuisance::BasisSpec;
use crate::numkit::{dot, normal_quantile, spd_inverse, Matrix, RngStream};
use crate::par::{map_indexed, Execution};
use crate::solvers::{fit_cv, lasso_gram, DesignProblem, LossKind, SolverOptions, SparseFit};

/// Condition estimate above which the direct inverse is refused.
pub const MAX_CONDITION: f64 = 1e12;
/// Nodewise residual variance at or below which a column counts as degenerate.
pub const MIN_TAU2: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrecisionMethod {
    DirectInverse,
    Nodewise,
}

#[derive(Debug, Clone)]
pub struct PrecisionEstimate {
    pub omega: Matrix,
    pub method: PrecisionMethod,
    /// Nodewise penalty per column (empty for the direct inverse).
    pub lambdas: Vec<f64>,
    /// Nodewise `τ̂ⱼ²` (empty for the direct inverse).
    pub residual_variances: Vec<f64>,
    /// `‖I − Ω̂Σ̂‖_max`.
    pub diagnostic: f64,
}

fn identity_gap(omega: &Matrix, sigma: &Matrix) -> f64 {
    let prod = omega.matmul(sigma).expect("square matrices of equal size");
    prod.max_abs_diff(&Matrix::identity(sigma.rows()))
}

/// `Σ̂⁻¹` via Cholesky.
pub fn precision_direct(sigma_hat: &Matrix) -> Result<PrecisionEstimate> {
    let (omega, condition) = match spd_inverse(sigma_hat) {
        Ok(v) => v,
        Err(Error::NotPositiveDefinite { .. }) => return Err(Error::Singular { condition: f64::INFINITY }),
        Err(e) => return Err(e),
    };
    if condition > MAX_CONDITION {
        return Err(Error::Singular { condition });
    }
    let diagnostic = identity_gap(&omega, sigma_hat);
    Ok(PrecisionEstimate {
        omega,
        method: PrecisionMethod::DirectInverse,
        lambdas: Vec::new(),
        residual_variances: Vec::new(),
        diagnostic,
    })
}

/// Penalty for the nodewise regressions, on the halved squared-loss scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodewiseRule {
    Fixed(f64),
    /// `c · √(ln d / n)`.
    Scaled {
        c: f64,
    },
    /// Per-column K-fold CV over a 30-point path.
    CrossValidation {
        folds: usize,
    },
}

impl Default for NodewiseRule {
    fn default() -> Self {
        NodewiseRule::Scaled { c: 0.5 }
    }
}

fn sub_problem(sigma: &Matrix, j: usize) -> (Matrix, Vec<f64>) {
    let d = sigma.rows();
    let others: Vec<usize> = (0..d).filter(|&k| k != j).collect();
    let gram = Matrix::from_fn(d - 1, d - 1, |a, b| sigma[(others[a], others[b])]);
    let c = others.iter().map(|&k| sigma[(k, j)]).collect();
    (gram, c)
}

/// Nodewise lasso precision estimate from the design rows `Ψ(xᵢ)`.
///
/// Every coordinate of each nodewise regression is penalized and no centering
/// is applied, so an intercept column is treated like any other column.
pub fn precision_nodewise(
    design: &Matrix,
    rule: NodewiseRule,
    rng: &mut RngStream,
    exec: Execution,
) -> Result<PrecisionEstimate> {
    let (n, d) = (design.rows(), design.cols());
    if n < 2 || d < 2 {
        return Err(Error::InsufficientData(format!("nodewise lasso needs n >= 2 and d >= 2, got {n} x {d}")));
    }
    let sigma = design.weighted_gram(None);
    let lambdas: Vec<f64> = match rule {
        NodewiseRule::Fixed(l) => vec![l; d],
        NodewiseRule::Scaled { c } => vec![c * ((d as f64).ln() / n as f64).sqrt(); d],
        NodewiseRule::CrossValidation { folds } => {
            let streams: Vec<RngStream> = (0..d).map(|j| rng.substream(j as u64)).collect();
            map_indexed(exec, d, |j| {
                let others: Vec<usize> = (0..d).filter(|&k| k != j).collect();
                let x = Matrix::from_fn(n, d - 1, |i, a| design[(i, others[a])]);
                let problem = DesignProblem::new(x, design.column(j), LossKind::Squared)?;
                let mut r = streams[j].clone();
                fit_cv(&problem, folds.min(n), 30, 1e-3, &mut r, Execution::Sequential).map(|(f, _)| f.lambda)
            })
            .into_iter()
            .collect::<Result<Vec<f64>>>()?
        }
    };
    if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::InvalidArgument("nodewise lambda must be finite and >= 0".into()));
    }
    let opts = SolverOptions::for_loss(LossKind::Squared);
    let rows: Vec<Result<(Vec<f64>, f64)>> = map_indexed(exec, d, |j| {
        let (gram, c) = sub_problem(&sigma, j);
        let mut gamma = vec![0.0; d - 1];
        let (iterations, converged) = lasso_gram(&gram, &c, &vec![true; d - 1], lambdas[j], &mut gamma, opts);
        if !converged {
            return Err(Error::MaxIterations { iterations });
        }
        let tau2 = sigma[(j, j)] - dot(&c, &gamma);
        if tau2 <= MIN_TAU2 {
            return Err(Error::DegenerateColumn { column: j, tau2 });
        }
        let mut row = Vec::with_capacity(d);
        row.extend(gamma[..j].iter().map(|g| -g / tau2));
        row.push(1.0 / tau2);
        row.extend(gamma[j..].iter().map(|g| -g / tau2));
        Ok((row, tau2))
    });
    let mut data = Vec::with_capacity(d * d);
    let mut residual_variances = Vec::with_capacity(d);
    for r in rows {
        let (row, tau2) = r?;
        data.extend(row);
        residual_variances.push(tau2);
    }
    let omega = Matrix::from_vec(d, d, data)?;
    let diagnostic = identity_gap(&omega, &sigma);
    Ok(PrecisionEstimate { omega, method: PrecisionMethod::Nodewise, lambdas, residual_variances, diagnostic })
}

/// Direct inverse when `d ≤ n/2`, nodewise lasso otherwise.
pub fn precision_auto(
    design: &Matrix,
    rule: NodewiseRule,
    rng: &mut RngStream,
    exec: Execution,
) -> Result<PrecisionEstimate> {
    if 2 * design.cols() <= design.rows() {
        precision_direct(&design.weighted_gram(None))
    } else {
        precision_nodewise(design, rule, rng, exec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub theta_tilde: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub alpha: f64,
    pub n: usize,
}

impl InferenceResult {
    pub fn lengths(&self) -> Vec<f64> {
        self.ci_upper.iter().zip(&self.ci_lower).map(|(u, l)| u - l).collect()
    }

    pub fn covers(&self, j: usize, value: f64) -> bool {
        self.ci_lower[j] <= value && value <= self.ci_upper[j]
    }

    /// `√n (θ̃ⱼ − value) / σ̂ⱼ`.
    pub fn standardized(&self, j: usize, value: f64) -> f64 {
        (self.n as f64).sqrt() * (self.theta_tilde[j] - value) / self.sigma_hat[j]
    }
}

/// Residual scores `ψ̂ᵢ = (ỹᵢ − Ψᵢᵀθ̂) Ψᵢ`, one row per observation.
fn scores(data: &ObservedDataset, preds: &NuisancePredictions, fit: &SparseFit, basis: &BasisSpec) -> Result<Matrix> {
    let design = basis.expand(data.x());
    if design.cols() != fit.coefficients.len() {
        return Err(Error::Dimension(format!(
            "basis has {} features, fit has {} coefficients",
            design.cols(),
            fit.coefficients.len()
        )));
    }
    let y = pseudo_outcomes(data, preds)?.y_tilde;
    Ok(Matrix::from_fn(design.rows(), design.cols(), |i, j| {
        (y[i] - dot(design.row(i), &fit.coefficients)) * design[(i, j)]
    }))
}

fn check_omega(omega: &PrecisionEstimate, d: usize) -> Result<()> {
    if omega.omega.rows() != d || omega.omega.cols() != d {
        return Err(Error::Dimension(format!(
            "precision is {}x{}, expected {d}x{d}",
            omega.omega.rows(),
            omega.omega.cols()
        )));
    }
    Ok(())
}

/// One-step correction `θ̃ = θ̂ + Ω̂ (1/n) Σ (ỹᵢ − Ψᵢᵀθ̂) Ψᵢ`.
pub fn desparsify(
    data: &ObservedDataset,
    preds: &NuisancePredictions,
    fit: &SparseFit,
    omega: &PrecisionEstimate,
    basis: &BasisSpec,
) -> Result<Vec<f64>> {
    let psi = scores(data, preds, fit, basis)?;
    check_omega(omega, psi.cols())?;
    let n = psi.rows() as f64;
    let mut avg = vec![0.0; psi.cols()];
    for i in 0..psi.rows() {
        avg.iter_mut().zip(psi.row(i)).for_each(|(a, v)| *a += v / n);
    }
    let corr = omega.omega.matvec(&avg);
    Ok(fit.coefficients.iter().zip(corr).map(|(t, c)| t + c).collect())
}

/// `σ̂ⱼ = √((1/n) Σᵢ (Ω̂ⱼ·ψ̂ᵢ)²)`.
pub fn variance_estimates(
    data: &ObservedDataset,
    preds: &NuisancePredictions,
    fit: &SparseFit,
    omega: &PrecisionEstimate,
    basis: &BasisSpec,
) -> Result<Vec<f64>> {
    let psi = scores(data, preds, fit, basis)?;
    check_omega(omega, psi.cols())?;
    let n = psi.rows() as f64;
    let mut acc = vec![0.0; psi.cols()];
    for i in 0..psi.rows() {
        let g = omega.omega.matvec(psi.row(i));
        acc.iter_mut().zip(g).for_each(|(a, v)| *a += v * v);
    }
    Ok(acc.into_iter().map(|a| (a / n).sqrt()).collect())
}

/// `θ̃ⱼ ± z_{α/2} σ̂ⱼ / √n`.
pub fn confidence_intervals(
    theta_tilde: Vec<f64>,
    sigma_hat: Vec<f64>,
    n: usize,
    alpha: f64,
) -> Result<InferenceResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if theta_tilde.len() != sigma_hat.len() {
        return Err(Error::Dimension("theta and sigma lengths differ".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let z = normal_quantile(1.0 - alpha / 2.0);
    let half: Vec<f64> = sigma_hat.iter().map(|s| z * s / (n as f64).sqrt()).collect();
    let ci_lower = theta_tilde.iter().zip(&half).map(|(t, h)| t - h).collect();
    let ci_upper = theta_tilde.iter().zip(&half).map(|(t, h)| t + h).collect();
    Ok(InferenceResult { theta_tilde, sigma_hat, ci_lower, ci_upper, alpha, n })
}

/// Precision estimate, desparsified coefficients and intervals in one call.
pub fn infer(
    data: &ObservedDataset,
    preds: &NuisancePredictions,
    fit: &SparseFit,
    basis: &BasisSpec,
    alpha: f64,
    rule: NodewiseRule,
    rng: &mut RngStream,
    exec: Execution,
) -> Result<(InferenceResult, PrecisionEstimate)> {
    let omega = precision_auto(&basis.expand(data.x()), rule, rng, exec)?;
    let theta_tilde = desparsify(data, preds, fit, &omega, basis)?;
    let sigma = variance_estimates(data, preds, fit, &omega, basis)?;
    Ok((confidence_intervals(theta_tilde, sigma, data.n(), alpha)?, omega))
}
