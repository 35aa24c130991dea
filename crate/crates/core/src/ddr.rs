//! The doubly-robust pseudo-outcome estimator.
//!
//! Given a propensity estimate π̂ fitted on all rows and an outcome model
//! cross-fitted over a two-fold split, each row gets the pseudo outcome
//!
//! ```text
//! ỹᵢ = m̃(xᵢ) + tᵢ / π̂(xᵢ) · (yᵢ − m̃(xᵢ))
//! ```
//!
//! and the estimator is an ordinary L1-penalized fit of ỹ on Ψ(x). For the
//! squared loss `(y − Ψ(x)ᵀθ)²` the pseudo loss has the same gradient as the
//! full doubly-robust loss, which [`ddr_loss`] and [`pseudo_loss_gradient`]
//! expose for checking.

use crate::error::{Error, Result};
use crate::nuisance::{
    fit_outcome_parametric, fit_outcome_sim, fit_propensity, BasisSpec, LambdaRule, OutcomeModel, PropensityModel,
    SimOptions, Truncation,
};
use crate::numkit::{dot, norm1, norm2, sub_vec, Matrix, RngStream};
use crate::par::Execution;
use crate::solvers::{self, DesignProblem, LossKind, SparseFit};

/// Observed data `(t, t·y, x)`.
///
/// Outcomes of rows with `t = 0` are stored but never handed out: the only
/// accessor is [`ObservedDataset::observed_y`], which returns `None` for them.
#[derive(Debug, Clone)]
pub struct ObservedDataset {
    t: Vec<bool>,
    y: Vec<f64>,
    x: Matrix,
}

impl ObservedDataset {
    /// `y[i]` is ignored whenever `t[i]` is false and may hold any value, NaN included.
    pub fn new(t: Vec<bool>, y: Vec<f64>, x: Matrix) -> Result<Self> {
        let n = t.len();
        if y.len() != n || x.rows() != n {
            return Err(Error::Dimension(format!("t has {n} rows, y {}, x {}", y.len(), x.rows())));
        }
        if n < 2 {
            return Err(Error::InsufficientData("a dataset needs at least two rows".into()));
        }
        if x.cols() < 1 {
            return Err(Error::InsufficientData("a dataset needs at least one covariate".into()));
        }
        if !x.is_finite() {
            return Err(Error::InvalidArgument("covariates must be finite".into()));
        }
        if let Some(i) = (0..n).find(|&i| t[i] && !y[i].is_finite()) {
            return Err(Error::InvalidArgument(format!("observed outcome at row {i} is not finite")));
        }
        Ok(Self { t, y, x })
    }

    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn t(&self, i: usize) -> bool {
        self.t[i]
    }

    pub fn treatment(&self) -> &[bool] {
        &self.t
    }

    pub fn observed_y(&self, i: usize) -> Option<f64> {
        self.t[i].then(|| self.y[i])
    }

    pub fn complete_cases(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.t[i]).collect()
    }

    pub fn missing_fraction(&self) -> f64 {
        self.t.iter().filter(|t| !**t).count() as f64 / self.n() as f64
    }

    /// Rows `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> ObservedDataset {
        ObservedDataset {
            t: idx.iter().map(|&i| self.t[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            x: self.x.select_rows(idx),
        }
    }

    /// Overwrite every masked outcome with `value`.
    pub fn with_masked_outcomes(mut self, value: f64) -> Self {
        for (y, t) in self.y.iter_mut().zip(&self.t) {
            if !*t {
                *y = value;
            }
        }
        self
    }
}

/// Balanced random two-fold partition of the rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossFitPlan {
    fold_of: Vec<u8>,
    seed: u64,
}

impl CrossFitPlan {
    pub fn from_folds(fold_of: Vec<u8>) -> Result<Self> {
        if fold_of.iter().any(|f| *f != 1 && *f != 2) {
            return Err(Error::InvalidArgument("fold labels must be 1 or 2".into()));
        }
        Ok(Self { fold_of, seed: 0 })
    }

    /// Fold label (1 or 2) of row `i`.
    pub fn fold(&self, i: usize) -> u8 {
        self.fold_of[i]
    }

    pub fn folds(&self) -> &[u8] {
        &self.fold_of
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn indices(&self, fold: u8) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    /// Same partition with the labels exchanged.
    pub fn swapped(&self) -> CrossFitPlan {
        CrossFitPlan { fold_of: self.fold_of.iter().map(|f| 3 - f).collect(), seed: self.seed }
    }
}

/// Uniformly random partition with fold sizes `⌈n/2⌉` and `⌊n/2⌋`.
pub fn split(n: usize, rng: &mut RngStream) -> Result<CrossFitPlan> {
    if n < 2 {
        return Err(Error::InsufficientData("cross-fitting needs at least two rows".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let mut fold_of = vec![2u8; n];
    for &i in &perm[..n.div_ceil(2)] {
        fold_of[i] = 1;
    }
    Ok(CrossFitPlan { fold_of, seed: rng.seed() })
}

/// How the outcome regression is estimated inside each fold.
#[derive(Debug, Clone)]
pub enum OutcomeSpec {
    Lasso { basis: BasisSpec, rule: LambdaRule },
    Sim(SimOptions),
}

/// Per-row nuisance values used by the estimator.
#[derive(Debug, Clone)]
pub struct NuisancePredictions {
    pub pi_hat: Vec<f64>,
    pub m_tilde: Vec<f64>,
    /// `None` when the outcome values did not come from cross-fitting (e.g. known truth).
    pub plan: Option<CrossFitPlan>,
}

impl NuisancePredictions {
    pub fn new(pi_hat: Vec<f64>, m_tilde: Vec<f64>, plan: Option<CrossFitPlan>) -> Result<Self> {
        if pi_hat.len() != m_tilde.len() {
            return Err(Error::Dimension("pi_hat and m_tilde differ in length".into()));
        }
        if let Some(i) = pi_hat.iter().position(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::InvalidArgument(format!("pi_hat[{i}] = {} is outside (0, 1]", pi_hat[i])));
        }
        if m_tilde.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("m_tilde must be finite".into()));
        }
        Ok(Self { pi_hat, m_tilde, plan })
    }

    fn check(&self, data: &ObservedDataset) -> Result<()> {
        if self.pi_hat.len() != data.n() {
            return Err(Error::Dimension(format!("{} nuisance rows for a dataset of {}", self.pi_hat.len(), data.n())));
        }
        Ok(())
    }
}

fn fit_outcome(
    data: &ObservedDataset,
    spec: &OutcomeSpec,
    pi: &PropensityModel,
    rng: &mut RngStream,
    exec: Execution,
) -> Result<OutcomeModel> {
    match spec {
        OutcomeSpec::Lasso { basis, rule } => fit_outcome_parametric(data, basis, rule, rng, exec),
        OutcomeSpec::Sim(opts) => fit_outcome_sim(data, pi, opts, rng, exec),
    }
}

/// Cross-fitted outcome predictions: rows of one fold are predicted by the
/// model trained on the other fold's complete cases.
pub fn crossfit_outcome(
    data: &ObservedDataset,
    plan: &CrossFitPlan,
    spec: &OutcomeSpec,
    pi: &PropensityModel,
    rng: &mut RngStream,
    exec: Execution,
) -> Result<Vec<f64>> {
    if plan.folds().len() != data.n() {
        return Err(Error::Dimension("cross-fit plan does not match the dataset".into()));
    }
    let mut m_tilde = vec![0.0; data.n()];
    for train_fold in [1u8, 2] {
        let train = plan.indices(train_fold);
        let sub = data.subset(&train);
        if sub.complete_cases().len() < 2 {
            return Err(Error::InsufficientCompleteCases { fold: train_fold as usize, required: 2 });
        }
        let mut fold_rng = rng.substream(u64::from(train_fold));
        let model = fit_outcome(&sub, spec, pi, &mut fold_rng, exec)?;
        for i in plan.indices(3 - train_fold) {
            m_tilde[i] = model.predict(data.x().row(i));
        }
    }
    Ok(m_tilde)
}

/// Pseudo outcomes `ỹᵢ`; rows with `t = 0` get `m̃(xᵢ)` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOutcomes {
    pub y_tilde: Vec<f64>,
}

pub fn pseudo_outcomes(data: &ObservedDataset, preds: &NuisancePredictions) -> Result<PseudoOutcomes> {
    preds.check(data)?;
    let y_tilde = (0..data.n())
        .map(|i| {
            let m = preds.m_tilde[i];
            match data.observed_y(i) {
                Some(y) => m + (y - m) / preds.pi_hat[i],
                None => m,
            }
        })
        .collect();
    Ok(PseudoOutcomes { y_tilde })
}

/// The pseudo dataset `(ỹ, Ψ(x))` as a solver problem.
pub fn pseudo_problem(
    data: &ObservedDataset,
    preds: &NuisancePredictions,
    loss: LossKind,
    basis: &BasisSpec,
) -> Result<DesignProblem> {
    let y = pseudo_outcomes(data, preds)?.y_tilde;
    Ok(DesignProblem::new(basis.expand(data.x()), y, loss)?.with_intercept(basis.intercept))
}

/// L1-penalized fit on the pseudo dataset.
///
/// Nuisance predictions are held fixed while λ is tuned.
pub fn fit_ddr(
    data: &ObservedDataset,
    preds: &NuisancePredictions,
    loss: LossKind,
    basis: &BasisSpec,
    rule: &LambdaRule,
    rng: &mut RngStream,
    exec: Execution,
) -> Result<SparseFit> {
    let problem = pseudo_problem(data, preds, loss, basis)?;
    rule.fit(&problem, rng, exec)
}

/// Everything needed to run the estimator end to end on one dataset.
#[derive(Debug, Clone)]
pub struct DdrConfig {
    pub pi_basis: BasisSpec,
    pub pi_rule: LambdaRule,
    pub truncation: Truncation,
    pub outcome: OutcomeSpec,
    pub target_basis: BasisSpec,
    pub loss: LossKind,
    pub lambda_rule: LambdaRule,
    /// Number of independent splits whose coefficients are averaged.
    pub repeats: usize,
}

impl DdrConfig {
    /// Linear target with intercept, squared loss, 10-fold CV for λ.
    pub fn new(pi_basis: BasisSpec, outcome: OutcomeSpec) -> Self {
        Self {
            pi_basis,
            pi_rule: LambdaRule::default_bic(),
            truncation: Truncation::default(),
            outcome,
            target_basis: BasisSpec::linear(),
            loss: LossKind::Squared,
            lambda_rule: LambdaRule::default_cv(),
            repeats: 1,
        }
    }
}

/// Output of [`estimate`].
#[derive(Debug, Clone)]
pub struct DdrEstimate {
    /// Fit from the first split; its coefficients are replaced by the average when `repeats > 1`.
    pub fit: SparseFit,
    pub propensity: PropensityModel,
    /// Nuisance values of the first split.
    pub preds: NuisancePredictions,
}

/// Fit π̂ on all rows, cross-fit m̃, and fit the pseudo problem.
pub fn estimate(data: &ObservedDataset, cfg: &DdrConfig, rng: &RngStream, exec: Execution) -> Result<DdrEstimate> {
    let mut pi_rng = rng.substream(1);
    let propensity = fit_propensity(data, &cfg.pi_basis, cfg.truncation, &cfg.pi_rule, &mut pi_rng, exec)?;
    let pi_hat = propensity.predict_all(data.x());
    let repeats = cfg.repeats.max(1);
    let mut first: Option<(SparseFit, NuisancePredictions)> = None;
    let mut sum = vec![0.0; cfg.target_basis.n_features(data.p())];
    for r in 0..repeats {
        let base = rng.substream(100 + r as u64);
        let plan = split(data.n(), &mut base.substream(1))?;
        let m_tilde = crossfit_outcome(data, &plan, &cfg.outcome, &propensity, &mut base.substream(2), exec)?;
        let preds = NuisancePredictions::new(pi_hat.clone(), m_tilde, Some(plan))?;
        let fit = fit_ddr(data, &preds, cfg.loss, &cfg.target_basis, &cfg.lambda_rule, &mut base.substream(3), exec)?;
        sum.iter_mut().zip(&fit.coefficients).for_each(|(s, c)| *s += c);
        if first.is_none() {
            first = Some((fit, preds));
        }
    }
    let (mut fit, preds) = first.expect("at least one repeat");
    if repeats > 1 {
        fit.coefficients = sum.into_iter().map(|s| s / repeats as f64).collect();
    }
    Ok(DdrEstimate { fit, propensity, preds })
}

/// Gradient of the pseudo loss `(1/n) Σ (ỹᵢ − Ψ(xᵢ)ᵀθ)²`, i.e. `−(2/n) Σ (ỹᵢ − Ψᵢᵀθ) Ψᵢ`.
pub fn pseudo_loss_gradient(
    data: &ObservedDataset,
    preds: &NuisancePredictions,
    basis: &BasisSpec,
    theta: &[f64],
) -> Result<Vec<f64>> {
    let y = pseudo_outcomes(data, preds)?.y_tilde;
    let n = data.n() as f64;
    let mut g = vec![0.0; theta.len()];
    for (i, yi) in y.iter().enumerate() {
        let psi = basis.expand_row(data.x().row(i));
        let r = yi - dot(&psi, theta);
        for (gj, pj) in g.iter_mut().zip(&psi) {
            *gj -= 2.0 * r * pj / n;
        }
    }
    Ok(g)
}

/// Empirical doubly-robust loss for the squared loss,
/// `(1/n) Σ φ̃ᵢ(θ) + tᵢ/π̂ᵢ · {(yᵢ − Ψᵢᵀθ)² − φ̃ᵢ(θ)}` with `φ̃ᵢ(θ) = (m̃ᵢ − Ψᵢᵀθ)²`.
pub fn ddr_loss(data: &ObservedDataset, preds: &NuisancePredictions, basis: &BasisSpec, theta: &[f64]) -> Result<f64> {
    preds.check(data)?;
    let mut total = 0.0;
    for i in 0..data.n() {
        let fitted = dot(&basis.expand_row(data.x().row(i)), theta);
        let phi = (preds.m_tilde[i] - fitted).powi(2);
        total += phi;
        if let Some(y) = data.observed_y(i) {
            total += ((y - fitted).powi(2) - phi) / preds.pi_hat[i];
        }
    }
    Ok(total / data.n() as f64)
}

/// The four sample averages whose signed sum is the gradient of the DDR loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDecomposition {
    pub t0: Vec<f64>,
    pub t_pi: Vec<f64>,
    pub t_m: Vec<f64>,
    pub r_pi_m: Vec<f64>,
}

impl GradientDecomposition {
    /// `T0 + Tπ − Tm − Rπm`.
    pub fn total(&self) -> Vec<f64> {
        (0..self.t0.len()).map(|j| self.t0[j] + self.t_pi[j] - self.t_m[j] - self.r_pi_m[j]).collect()
    }
}

/// Split the squared-loss DDR gradient at `theta` into the leading term and the
/// nuisance error terms, using `h(x) = −2Ψ(x)` and `g(x, θ) = Ψ(x)ᵀθ`.
///
/// `true_pi` and `true_m` are the true nuisance values at each row.
pub fn gradient_decomposition(
    data: &ObservedDataset,
    preds: &NuisancePredictions,
    true_pi: &[f64],
    true_m: &[f64],
    theta: &[f64],
    basis: &BasisSpec,
) -> Result<GradientDecomposition> {
    preds.check(data)?;
    if true_pi.len() != data.n() || true_m.len() != data.n() {
        return Err(Error::Dimension("true nuisance vectors must have one entry per row".into()));
    }
    let d = theta.len();
    let n = data.n() as f64;
    let mut out =
        GradientDecomposition { t0: vec![0.0; d], t_pi: vec![0.0; d], t_m: vec![0.0; d], r_pi_m: vec![0.0; d] };
    for i in 0..data.n() {
        let psi = basis.expand_row(data.x().row(i));
        let g = dot(&psi, theta);
        let (pi, m) = (true_pi[i], true_m[i]);
        let (pi_hat, m_tilde) = (preds.pi_hat[i], preds.m_tilde[i]);
        let observed = data.observed_y(i);
        let t = if observed.is_some() { 1.0 } else { 0.0 };
        // Products with t vanish on masked rows; the masked y is never touched.
        let y_minus_m = observed.map_or(0.0, |y| y - m);
        let ipw_gap = t / pi_hat - t / pi;
        let c0 = (m - g) + t / pi * y_minus_m;
        let c_pi = ipw_gap * y_minus_m;
        let c_m = (t / pi - 1.0) * (m_tilde - m);
        let c_r = ipw_gap * (m_tilde - m);
        for j in 0..d {
            let h = -2.0 * psi[j] / n;
            out.t0[j] += c0 * h;
            out.t_pi[j] += c_pi * h;
            out.t_m[j] += c_m * h;
            out.r_pi_m[j] += c_r * h;
        }
    }
    Ok(out)
}

/// Deterministic deviation-bound check for a penalized fit.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationReport {
    /// λ on the scale of the unhalved squared loss.
    pub lambda: f64,
    pub sparsity: usize,
    pub lambda_condition: bool,
    pub l2_error: f64,
    pub l1_error: f64,
    pub l2_bound: f64,
    pub l1_bound: f64,
    pub l2_holds: bool,
    pub l1_holds: bool,
    /// `bound − error`.
    pub l2_slack: f64,
    pub l1_slack: f64,
}

/// Compare `‖θ̂ − θ₀‖₂` and `‖θ̂ − θ₀‖₁` with `3√s λ/κ` and `12 s λ/κ`.
///
/// The solvers minimize the halved squared loss, so the λ entering the bound is
/// `2 · fit.lambda`. `grad_inf` is `‖∇Lₙ(θ₀)‖∞` for the unhalved loss and `s`
/// counts the nonzeros of `theta0`. The bounds are asserted only when
/// `λ ≥ 2 grad_inf`; otherwise both flags are false.
pub fn deviation_diagnostic(fit: &SparseFit, theta0: &[f64], grad_inf: f64, kappa: f64) -> Result<DeviationReport> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidArgument("kappa must be positive".into()));
    }
    if theta0.len() != fit.coefficients.len() {
        return Err(Error::Dimension("theta0 and coefficient lengths differ".into()));
    }
    let lambda = 2.0 * fit.lambda;
    let sparsity = theta0.iter().filter(|v| **v != 0.0).count();
    let diff = sub_vec(&fit.coefficients, theta0);
    let (l2_error, l1_error) = (norm2(&diff), norm1(&diff));
    let s = sparsity as f64;
    let l2_bound = 3.0 * s.sqrt() * lambda / kappa;
    let l1_bound = 12.0 * s * lambda / kappa;
    let lambda_condition = lambda >= 2.0 * grad_inf;
    Ok(DeviationReport {
        lambda,
        sparsity,
        lambda_condition,
        l2_error,
        l1_error,
        l2_bound,
        l1_bound,
        l2_holds: lambda_condition && l2_error <= l2_bound,
        l1_holds: lambda_condition && l1_error <= l1_bound,
        l2_slack: l2_bound - l2_error,
        l1_slack: l1_bound - l1_error,
    })
}

/// Fit the squared-loss pseudo problem at a fixed λ given on the unhalved-loss
/// scale, penalizing every coordinate including the intercept.
pub fn fit_ddr_at(
    data: &ObservedDataset,
    preds: &NuisancePredictions,
    basis: &BasisSpec,
    lambda_unhalved: f64,
) -> Result<SparseFit> {
    let problem = pseudo_problem(data, preds, LossKind::Squared, basis)?.with_intercept(false);
    solvers::fit_lasso(&problem, lambda_unhalved / 2.0, None)
}
