//! L1-penalized empirical risk minimizers.
//!
//! Both solvers minimize
//!
//! ```text
//! (1/n) Σ wᵢ l(yᵢ, xᵢᵀθ) + λ Σ_{j penalized} |θⱼ|
//! ```
//!
//! where `l(y, v) = ½(y − v)²` for the squared loss and `l(y, v) = −yv + log(1 + eᵛ)`
//! for the logistic loss. Logistic responses are not restricted to `{0, 1}`.
//!
//! The squared-loss solver runs cyclic coordinate descent on the weighted
//! Gram matrix (covariance updates), so a sweep costs `O(d)` per coordinate
//! that moves. The logistic solver majorizes the loss with the `1/4` curvature
//! bound and solves each quadratic surrogate with the same Gram-level
//! routine; the bound never changes, so the Gram matrix is formed once.

use crate::error::{Error, Result};
use crate::numkit::{dot, expit, norm_inf, Matrix, RngStream};
use crate::par::{map_indexed, Execution};

/// Coefficients beyond this magnitude mark a logistic fit as divergent.
pub const DIVERGENCE_BOUND: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Squared,
    Logistic,
    /// Reserved; no solver is provided.
    Poisson,
}

/// Design, response and observation weights for one penalized fit.
#[derive(Debug, Clone)]
pub struct DesignProblem {
    design: Matrix,
    response: Vec<f64>,
    weights: Vec<f64>,
    loss: LossKind,
    intercept: bool,
}

impl DesignProblem {
    /// Unit weights, no intercept column.
    pub fn new(design: Matrix, response: Vec<f64>, loss: LossKind) -> Result<Self> {
        if design.rows() != response.len() {
            return Err(Error::Dimension(format!(
                "design has {} rows but response has {} entries",
                design.rows(),
                response.len()
            )));
        }
        if design.rows() == 0 {
            return Err(Error::InsufficientData("empty design".into()));
        }
        if !design.is_finite() || response.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("design and response must be finite".into()));
        }
        let n = design.rows();
        Ok(Self { design, response, weights: vec![1.0; n], loss, intercept: false })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n() {
            return Err(Error::Dimension("weights length differs from row count".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        self.weights = weights;
        Ok(self)
    }

    /// Declare column 0 a constant intercept column; it is never penalized.
    pub fn with_intercept(mut self, intercept: bool) -> Self {
        self.intercept = intercept && self.design.cols() > 0;
        self
    }

    pub fn n(&self) -> usize {
        self.design.rows()
    }

    pub fn d(&self) -> usize {
        self.design.cols()
    }

    pub fn design(&self) -> &Matrix {
        &self.design
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    pub fn penalized(&self) -> Vec<bool> {
        (0..self.d()).map(|j| !(self.intercept && j == 0)).collect()
    }

    /// Sub-problem on the listed rows.
    pub fn select_rows(&self, idx: &[usize]) -> DesignProblem {
        DesignProblem {
            design: self.design.select_rows(idx),
            response: idx.iter().map(|&i| self.response[i]).collect(),
            weights: idx.iter().map(|&i| self.weights[i]).collect(),
            loss: self.loss,
            intercept: self.intercept,
        }
    }

    /// Same design and weights, new response.
    pub fn with_response(&self, response: Vec<f64>) -> Result<DesignProblem> {
        if response.len() != self.n() {
            return Err(Error::Dimension("response length differs from row count".into()));
        }
        Ok(DesignProblem { response, ..self.clone() })
    }

    /// Linear predictor `Xθ`.
    pub fn linear_predictor(&self, coef: &[f64]) -> Vec<f64> {
        self.design.matvec(coef)
    }

    /// Gradient of the smooth part `(1/n) Σ wᵢ l(yᵢ, xᵢᵀθ)`.
    pub fn loss_gradient(&self, coef: &[f64]) -> Vec<f64> {
        let eta = self.linear_predictor(coef);
        let n = self.n() as f64;
        let mut g = vec![0.0; self.d()];
        for i in 0..self.n() {
            let r = match self.loss {
                LossKind::Squared => eta[i] - self.response[i],
                LossKind::Logistic => expit(eta[i]) - self.response[i],
                LossKind::Poisson => eta[i].exp() - self.response[i],
            };
            let wr = self.weights[i] * r;
            if wr == 0.0 {
                continue;
            }
            for (gj, xj) in g.iter_mut().zip(self.design.row(i)) {
                *gj += wr * xj;
            }
        }
        g.iter_mut().for_each(|v| *v /= n);
        g
    }

    /// `(1/n) Σ wᵢ l(yᵢ, xᵢᵀθ)`.
    pub fn loss_value(&self, coef: &[f64]) -> f64 {
        let eta = self.linear_predictor(coef);
        let total: f64 =
            (0..self.n()).map(|i| self.weights[i] * pointwise_loss(self.loss, self.response[i], eta[i])).sum();
        total / self.n() as f64
    }

    /// Penalized objective at `coef`.
    pub fn objective(&self, coef: &[f64], lambda: f64) -> f64 {
        let pen: f64 = coef.iter().zip(self.penalized()).filter(|(_, p)| *p).map(|(c, _)| c.abs()).sum();
        self.loss_value(coef) + lambda * pen
    }
}

/// Loss of one observation with linear predictor `eta`.
pub fn pointwise_loss(loss: LossKind, y: f64, eta: f64) -> f64 {
    match loss {
        LossKind::Squared => 0.5 * (y - eta).powi(2),
        LossKind::Logistic => -y * eta + log1p_exp(eta),
        LossKind::Poisson => -y * eta + eta.exp(),
    }
}

fn log1p_exp(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Result of one penalized fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFit {
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

impl SparseFit {
    pub fn nonzeros(&self) -> usize {
        self.coefficients.iter().filter(|c| **c != 0.0).count()
    }

    /// Turn a non-converged fit into [`Error::MaxIterations`].
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::MaxIterations { iterations: self.iterations })
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Stop when the largest coefficient change over a sweep is at most `tol`.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl SolverOptions {
    pub fn for_loss(loss: LossKind) -> Self {
        match loss {
            LossKind::Squared => Self { tol: 1e-7, max_sweeps: 10_000 },
            _ => Self { tol: 1e-6, max_sweeps: 10_000 },
        }
    }
}

/// `sign(z) · max(|z| − t, 0)`.
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Coordinate descent for `½ θᵀGθ − cᵀθ + λ Σ_{penalized} |θⱼ|`.
///
/// `theta` is the warm start and receives the solution. Returns the number of
/// sweeps and whether the sweep-change criterion was met.
pub fn lasso_gram(
    gram: &Matrix,
    c: &[f64],
    penalized: &[bool],
    lambda: f64,
    theta: &mut [f64],
    opts: SolverOptions,
) -> (usize, bool) {
    let d = c.len();
    debug_assert_eq!(gram.rows(), d);
    // q = Gθ, kept in sync with θ.
    let mut q = gram.matvec(theta);
    for sweep in 1..=opts.max_sweeps {
        let mut max_change = 0.0_f64;
        for j in 0..d {
            let gjj = gram[(j, j)];
            let old = theta[j];
            let new = if gjj <= 0.0 {
                0.0
            } else {
                let z = c[j] - q[j] + gjj * old;
                let t = if penalized[j] { lambda } else { 0.0 };
                soft_threshold(z, t) / gjj
            };
            let delta = new - old;
            if delta != 0.0 {
                theta[j] = new;
                for (qk, gk) in q.iter_mut().zip(gram.row(j)) {
                    *qk += gk * delta;
                }
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change <= opts.tol {
            return (sweep, true);
        }
    }
    (opts.max_sweeps, false)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

fn initial(problem: &DesignProblem, init: Option<&[f64]>) -> Result<Vec<f64>> {
    match init {
        Some(v) if v.len() != problem.d() => Err(Error::Dimension("warm start has the wrong length".into())),
        Some(v) => Ok(v.to_vec()),
        None => Ok(vec![0.0; problem.d()]),
    }
}

/// Weighted lasso for the squared loss with default options.
pub fn fit_lasso(problem: &DesignProblem, lambda: f64, init: Option<&[f64]>) -> Result<SparseFit> {
    fit_lasso_with(problem, lambda, init, SolverOptions::for_loss(LossKind::Squared))
}

pub fn fit_lasso_with(
    problem: &DesignProblem,
    lambda: f64,
    init: Option<&[f64]>,
    opts: SolverOptions,
) -> Result<SparseFit> {
    if problem.loss != LossKind::Squared {
        return Err(Error::InvalidArgument("fit_lasso needs a squared-loss problem".into()));
    }
    check_lambda(lambda)?;
    let gram = problem.design.weighted_gram(Some(&problem.weights));
    squared_with_gram(problem, &gram, &weighted_cross(problem), lambda, init, opts)
}

fn squared_with_gram(
    problem: &DesignProblem,
    gram: &Matrix,
    c: &[f64],
    lambda: f64,
    init: Option<&[f64]>,
    opts: SolverOptions,
) -> Result<SparseFit> {
    let mut theta = initial(problem, init)?;
    let (iterations, converged) = lasso_gram(gram, c, &problem.penalized(), lambda, &mut theta, opts);
    let objective = problem.objective(&theta, lambda);
    Ok(SparseFit { coefficients: theta, lambda, iterations, converged, objective })
}

/// `(1/n) Xᵀ W y`.
fn weighted_cross(problem: &DesignProblem) -> Vec<f64> {
    let n = problem.n();
    let mut c = vec![0.0; problem.d()];
    for i in 0..n {
        let wy = problem.weights[i] * problem.response[i];
        if wy == 0.0 {
            continue;
        }
        for (cj, xj) in c.iter_mut().zip(problem.design.row(i)) {
            *cj += wy * xj;
        }
    }
    c.iter_mut().for_each(|v| *v /= n as f64);
    c
}

/// L1-penalized logistic regression with default options.
pub fn fit_logistic_lasso(problem: &DesignProblem, lambda: f64, init: Option<&[f64]>) -> Result<SparseFit> {
    fit_logistic_lasso_with(problem, lambda, init, SolverOptions::for_loss(LossKind::Logistic))
}

pub fn fit_logistic_lasso_with(
    problem: &DesignProblem,
    lambda: f64,
    init: Option<&[f64]>,
    opts: SolverOptions,
) -> Result<SparseFit> {
    if problem.loss != LossKind::Logistic {
        return Err(Error::InvalidArgument("fit_logistic_lasso needs a logistic-loss problem".into()));
    }
    check_lambda(lambda)?;
    // Curvature bound: ∇²l ≤ ¼ xxᵀ.
    let h = problem.design.weighted_gram(Some(&problem.weights)).scale(0.25);
    logistic_with_bound(problem, &h, lambda, init, opts)
}

fn logistic_with_bound(
    problem: &DesignProblem,
    h: &Matrix,
    lambda: f64,
    init: Option<&[f64]>,
    opts: SolverOptions,
) -> Result<SparseFit> {
    let penalized = problem.penalized();
    let inner = SolverOptions { tol: opts.tol * 0.1, max_sweeps: opts.max_sweeps };
    let mut theta = initial(problem, init)?;
    let mut converged = false;
    let mut iterations = opts.max_sweeps;
    for outer in 1..=opts.max_sweeps {
        let g = problem.loss_gradient(&theta);
        let h_theta = h.matvec(&theta);
        let c: Vec<f64> = h_theta.iter().zip(&g).map(|(a, b)| a - b).collect();
        let previous = theta.clone();
        lasso_gram(h, &c, &penalized, lambda, &mut theta, inner);
        let max_abs = norm_inf(&theta);
        if max_abs > DIVERGENCE_BOUND || !max_abs.is_finite() {
            return Err(Error::Diverged { max_abs });
        }
        let change = theta.iter().zip(&previous).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        if change <= opts.tol {
            converged = true;
            iterations = outer;
            break;
        }
    }
    let objective = problem.objective(&theta, lambda);
    Ok(SparseFit { coefficients: theta, lambda, iterations, converged, objective })
}

/// Dispatch on the problem's loss.
pub fn fit(problem: &DesignProblem, lambda: f64, init: Option<&[f64]>) -> Result<SparseFit> {
    match problem.loss {
        LossKind::Squared => fit_lasso(problem, lambda, init),
        LossKind::Logistic => fit_logistic_lasso(problem, lambda, init),
        LossKind::Poisson => Err(Error::InvalidArgument("the Poisson loss has no solver".into())),
    }
}

/// Outcome of a KKT check.
#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    /// Largest violation over all coordinates.
    pub max_violation: f64,
    pub worst_coordinate: Option<usize>,
    pub satisfied: bool,
}

/// Default KKT tolerance per loss.
pub fn kkt_tolerance(loss: LossKind) -> f64 {
    match loss {
        LossKind::Squared => 1e-6,
        _ => 1e-5,
    }
}

/// Verify the subgradient optimality conditions of `fit` on `problem`.
///
/// For a penalized coordinate, `|gⱼ| ≤ λ` when `θⱼ = 0` and `gⱼ = −λ sign(θⱼ)`
/// otherwise; unpenalized coordinates need `gⱼ = 0`. The gradient is recomputed
/// from the raw data.
pub fn check_kkt(problem: &DesignProblem, fit: &SparseFit, tol: f64) -> KktReport {
    let g = problem.loss_gradient(&fit.coefficients);
    let lambda = fit.lambda;
    let mut worst = (0.0_f64, None);
    for (j, pen) in problem.penalized().into_iter().enumerate() {
        let theta = fit.coefficients[j];
        let violation = if !pen {
            g[j].abs()
        } else if theta == 0.0 {
            (g[j].abs() - lambda).max(0.0)
        } else {
            (g[j] + lambda * theta.signum()).abs()
        };
        if violation > worst.0 {
            worst = (violation, Some(j));
        }
    }
    KktReport { max_violation: worst.0, worst_coordinate: worst.1, satisfied: worst.0 <= tol }
}

/// Smallest λ for which every penalized coefficient is zero.
pub fn lambda_max(problem: &DesignProblem) -> f64 {
    let n = problem.n() as f64;
    let wsum: f64 = problem.weights.iter().sum();
    let center = if problem.intercept && wsum > 0.0 {
        dot(&problem.weights, &problem.response) / wsum
    } else {
        match problem.loss {
            LossKind::Logistic => 0.5,
            _ => 0.0,
        }
    };
    let mut best = 0.0_f64;
    let penalized = problem.penalized();
    let mut g = vec![0.0; problem.d()];
    for i in 0..problem.n() {
        let wr = problem.weights[i] * (problem.response[i] - center);
        for (gj, xj) in g.iter_mut().zip(problem.design.row(i)) {
            *gj += wr * xj;
        }
    }
    for (j, pen) in penalized.into_iter().enumerate() {
        if pen {
            best = best.max((g[j] / n).abs());
        }
    }
    best
}

/// Geometric grid of `n_lambdas` values from λ_max down to `ratio · λ_max`.
pub fn lambda_path(problem: &DesignProblem, n_lambdas: usize, ratio: f64) -> Result<Vec<f64>> {
    if n_lambdas < 2 {
        return Err(Error::InvalidArgument("a lambda path needs at least two points".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument("lambda ratio must lie in (0, 1)".into()));
    }
    let top = lambda_max(problem);
    let step = ratio.ln() / (n_lambdas - 1) as f64;
    Ok((0..n_lambdas)
        .map(|k| {
            if k == 0 {
                top
            } else if k == n_lambdas - 1 {
                top * ratio
            } else {
                top * (step * k as f64).exp()
            }
        })
        .collect())
}

/// Fit every λ of a descending path with warm starts.
///
/// Stops at the first failing λ and returns the fits obtained so far along with
/// the error, if any.
pub fn fit_path(problem: &DesignProblem, path: &[f64]) -> (Vec<SparseFit>, Option<Error>) {
    let mut fits: Vec<SparseFit> = Vec::with_capacity(path.len());
    if let Some(e) = path.iter().find_map(|&l| check_lambda(l).err()) {
        return (fits, Some(e));
    }
    let gram = match problem.loss {
        LossKind::Squared => problem.design.weighted_gram(Some(&problem.weights)),
        LossKind::Logistic => problem.design.weighted_gram(Some(&problem.weights)).scale(0.25),
        LossKind::Poisson => return (fits, Some(Error::InvalidArgument("the Poisson loss has no solver".into()))),
    };
    let c = weighted_cross(problem);
    for &lambda in path {
        let warm = fits.last().map(|f| f.coefficients.as_slice());
        let result = match problem.loss {
            LossKind::Squared => {
                squared_with_gram(problem, &gram, &c, lambda, warm, SolverOptions::for_loss(LossKind::Squared))
            }
            _ => logistic_with_bound(problem, &gram, lambda, warm, SolverOptions::for_loss(LossKind::Logistic)),
        };
        match result {
            Ok(f) => fits.push(f),
            Err(e) => return (fits, Some(e)),
        }
    }
    (fits, None)
}

/// Output of [`cross_validate_lambda`].
#[derive(Debug, Clone)]
pub struct CvResult {
    pub lambda: f64,
    pub index: usize,
    /// Mean held-out loss per path entry (infinite where a fold failed).
    pub losses: Vec<f64>,
}

/// Random partition of `0..n` into `folds` near-equal groups.
pub fn fold_assignment(n: usize, folds: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let mut fold_of = vec![0; n];
    for (k, &i) in perm.iter().enumerate() {
        fold_of[i] = k % folds;
    }
    fold_of
}

/// K-fold cross-validation of the held-out loss over `path`.
///
/// Ties are broken toward the largest λ.
pub fn cross_validate_lambda(
    problem: &DesignProblem,
    folds: usize,
    path: &[f64],
    rng: &mut RngStream,
    exec: Execution,
) -> Result<CvResult> {
    if folds < 2 || problem.n() < folds {
        return Err(Error::InvalidArgument(format!("need 2 <= folds <= n, got folds={folds}, n={}", problem.n())));
    }
    if path.is_empty() {
        return Err(Error::InvalidArgument("empty lambda path".into()));
    }
    if path.len() == 1 {
        return Ok(CvResult { lambda: path[0], index: 0, losses: vec![f64::NAN] });
    }
    let fold_of = fold_assignment(problem.n(), folds, rng);
    let per_fold: Vec<Vec<f64>> = map_indexed(exec, folds, |k| {
        let train: Vec<usize> = (0..problem.n()).filter(|&i| fold_of[i] != k).collect();
        let test: Vec<usize> = (0..problem.n()).filter(|&i| fold_of[i] == k).collect();
        let sub = problem.select_rows(&train);
        let (fits, _) = fit_path(&sub, path);
        let mut losses = vec![f64::INFINITY; path.len()];
        for (l, f) in losses.iter_mut().zip(&fits) {
            *l = held_out_loss(problem, &test, &f.coefficients);
        }
        losses
    });
    let losses: Vec<f64> = (0..path.len()).map(|l| per_fold.iter().map(|f| f[l]).sum::<f64>() / folds as f64).collect();
    let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::InvalidArgument("every lambda failed in cross-validation".into()));
    }
    let slack = 1e-12 * best.abs().max(1e-300);
    let index = losses.iter().position(|&l| l <= best + slack).unwrap_or(0);
    Ok(CvResult { lambda: path[index], index, losses })
}

fn held_out_loss(problem: &DesignProblem, rows: &[usize], coef: &[f64]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let total: f64 = rows
        .iter()
        .map(|&i| {
            let eta = dot(problem.design.row(i), coef);
            problem.weights[i] * pointwise_loss(problem.loss, problem.response[i], eta)
        })
        .sum();
    total / rows.len() as f64
}

/// Select λ by BIC, `2 n · loss + df · ln n`, over a path; df counts nonzeros.
///
/// λ values past a divergent fit are skipped.
pub fn select_lambda_bic(problem: &DesignProblem, path: &[f64]) -> Result<(SparseFit, Vec<f64>)> {
    let (fits, err) = fit_path(problem, path);
    if fits.is_empty() {
        return Err(err.unwrap_or_else(|| Error::InvalidArgument("empty lambda path".into())));
    }
    let n = problem.n() as f64;
    let bic: Vec<f64> =
        fits.iter().map(|f| 2.0 * n * problem.loss_value(&f.coefficients) + f.nonzeros() as f64 * n.ln()).collect();
    let best = bic.iter().copied().fold(f64::INFINITY, f64::min);
    let index = bic.iter().position(|&b| b <= best).unwrap_or(0);
    Ok((fits[index].clone(), bic))
}

/// Select λ by K-fold CV and refit on the full problem.
pub fn fit_cv(
    problem: &DesignProblem,
    folds: usize,
    n_lambdas: usize,
    ratio: f64,
    rng: &mut RngStream,
    exec: Execution,
) -> Result<(SparseFit, CvResult)> {
    let path = lambda_path(problem, n_lambdas, ratio)?;
    let cv = cross_validate_lambda(problem, folds, &path, rng, exec)?;
    let (fits, err) = fit_path(problem, &path[..=cv.index]);
    match fits.into_iter().last() {
        Some(f) if err.is_none() => Ok((f, cv)),
        _ => Err(err.unwrap_or_else(|| Error::InvalidArgument("refit failed".into()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, d: usize, seed: u64) -> DesignProblem {
        let mut rng = RngStream::new(seed, 0);
        let x = Matrix::from_fn(n, d, |_, j| if j == 0 { 1.0 } else { rng.standard_normal() });
        let y: Vec<f64> = (0..n).map(|i| 1.0 + 2.0 * x[(i, 1)] - x[(i, 2)] + rng.standard_normal()).collect();
        DesignProblem::new(x, y, LossKind::Squared).unwrap().with_intercept(true)
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.4, 1.0), 0.0);
        assert_eq!(soft_threshold(-3.0, 0.0), -3.0);
    }

    #[test]
    fn zero_fit_at_lambda_max() {
        let p = toy(80, 6, 1);
        let lmax = lambda_max(&p);
        let f = fit_lasso(&p, lmax, None).unwrap();
        assert!(f.coefficients[1..].iter().all(|c| c.abs() < 1e-12));
        let ybar = p.response().iter().sum::<f64>() / 80.0;
        assert!((f.coefficients[0] - ybar).abs() < 1e-8);
        assert!(check_kkt(&p, &f, 1e-6).satisfied);
    }

    #[test]
    fn path_endpoints() {
        let p = toy(50, 5, 2);
        let path = lambda_path(&p, 2, 0.1).unwrap();
        assert_eq!(path[0], lambda_max(&p));
        assert!((path[1] - 0.1 * path[0]).abs() < 1e-15);
        let zero =
            DesignProblem::new(p.design().clone(), vec![0.0; 50], LossKind::Squared).unwrap().with_intercept(true);
        assert_eq!(lambda_path(&zero, 4, 0.5).unwrap(), vec![0.0; 4]);
        assert!(lambda_path(&p, 1, 0.5).is_err());
    }

    #[test]
    fn poisson_has_no_solver() {
        let p = toy(20, 3, 3);
        let pois = DesignProblem::new(p.design().clone(), vec![1.0; 20], LossKind::Poisson).unwrap();
        assert!(fit(&pois, 0.1, None).is_err());
    }

    #[test]
    fn cv_single_point_path() {
        let p = toy(40, 4, 4);
        let mut rng = RngStream::new(1, 1);
        let cv = cross_validate_lambda(&p, 5, &[0.3], &mut rng, Execution::Sequential).unwrap();
        assert_eq!(cv.lambda, 0.3);
    }

    #[test]
    fn cv_constant_response_picks_largest() {
        let p = toy(40, 4, 5);
        let c = DesignProblem::new(p.design().clone(), vec![2.5; 40], LossKind::Squared).unwrap().with_intercept(true);
        let path = vec![0.5, 0.2, 0.1, 0.01];
        let mut rng = RngStream::new(1, 2);
        let cv = cross_validate_lambda(&c, 4, &path, &mut rng, Execution::Sequential).unwrap();
        assert_eq!(cv.index, 0);
    }

    #[test]
    fn folds_are_balanced() {
        let mut rng = RngStream::new(9, 0);
        let f = fold_assignment(23, 10, &mut rng);
        let mut counts = [0usize; 10];
        f.iter().for_each(|&k| counts[k] += 1);
        assert!(counts.iter().all(|&c| c == 2 || c == 3));
    }

    #[test]
    fn weights_validated() {
        let p = toy(10, 3, 6);
        assert!(p.clone().with_weights(vec![-1.0; 10]).is_err());
        assert!(p.with_weights(vec![1.0; 9]).is_err());
    }
}
