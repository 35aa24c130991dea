//! Propensity and outcome regression models.

use std::fmt;
use std::sync::Arc;

use crate::ddr::ObservedDataset;
use crate::error::{Error, Result};
use crate::kernel::{bandwidth_lscv, bandwidth_rot, log_grid_around, KernelSmoother};
use crate::numkit::{dot, expit, mean, Matrix, RngStream};
use crate::par::Execution;
use crate::solvers::{self, fit_cv, lambda_path, select_lambda_bic, DesignProblem, LossKind, SparseFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    Linear,
    Quadratic,
    /// Pure powers `x_j^k` for `k = 1..=degree`.
    Polynomial(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub intercept: bool,
}

impl BasisSpec {
    pub fn linear() -> Self {
        Self { kind: BasisKind::Linear, intercept: true }
    }

    pub fn quadratic() -> Self {
        Self { kind: BasisKind::Quadratic, intercept: true }
    }

    pub fn polynomial(degree: u32) -> Self {
        Self { kind: BasisKind::Polynomial(degree), intercept: true }
    }

    pub fn degree(&self) -> u32 {
        match self.kind {
            BasisKind::Linear => 1,
            BasisKind::Quadratic => 2,
            BasisKind::Polynomial(d) => d,
        }
    }

    pub fn n_features(&self, p: usize) -> usize {
        usize::from(self.intercept) + p * self.degree() as usize
    }

    /// `[1, x₁..x_p, x₁²..x_p², ...]`.
    pub fn expand_row(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_features(x.len()));
        if self.intercept {
            out.push(1.0);
        }
        let mut power = x.to_vec();
        for k in 1..=self.degree() {
            if k > 1 {
                power.iter_mut().zip(x).for_each(|(p, v)| *p *= v);
            }
            out.extend_from_slice(&power);
        }
        out
    }

    pub fn expand(&self, x: &Matrix) -> Matrix {
        let d = self.n_features(x.cols());
        let mut data = Vec::with_capacity(x.rows() * d);
        for i in 0..x.rows() {
            data.extend(self.expand_row(x.row(i)));
        }
        Matrix::from_vec(x.rows(), d, data).expect("basis expansion has consistent shape")
    }

    fn validate(&self) -> Result<()> {
        if self.degree() == 0 {
            return Err(Error::InvalidArgument("basis degree must be at least 1".into()));
        }
        Ok(())
    }
}

/// Free-function form of [`BasisSpec::expand_row`].
pub fn expand_basis(x: &[f64], spec: &BasisSpec) -> Vec<f64> {
    spec.expand_row(x)
}

/// How the penalty level of a lasso fit is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaRule {
    Fixed(f64),
    Bic { n_lambdas: usize, ratio: f64 },
    CrossValidation { folds: usize, n_lambdas: usize, ratio: f64 },
}

impl LambdaRule {
    pub fn default_bic() -> Self {
        LambdaRule::Bic { n_lambdas: 40, ratio: 0.01 }
    }

    pub fn default_cv() -> Self {
        LambdaRule::CrossValidation { folds: 10, n_lambdas: 50, ratio: 1e-3 }
    }

    /// Fit `problem` at the λ this rule selects. CV folds are capped at `n`.
    pub fn fit(&self, problem: &DesignProblem, rng: &mut RngStream, exec: Execution) -> Result<SparseFit> {
        match *self {
            LambdaRule::Fixed(lambda) => solvers::fit(problem, lambda, None),
            LambdaRule::Bic { n_lambdas, ratio } => {
                let path = lambda_path(problem, n_lambdas, ratio)?;
                select_lambda_bic(problem, &path).map(|(f, _)| f)
            }
            LambdaRule::CrossValidation { folds, n_lambdas, ratio } => {
                let folds = folds.min(problem.n());
                fit_cv(problem, folds, n_lambdas, ratio, rng, exec).map(|(f, _)| f)
            }
        }
    }
}

/// Clamp bounds applied to every propensity prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truncation {
    pub lo: f64,
    pub hi: f64,
}

impl Truncation {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::InvalidArgument(format!("truncation [{lo}, {hi}] must satisfy 0 < lo <= hi < 1")));
        }
        Ok(Self { lo, hi })
    }

    pub fn apply(&self, p: f64) -> f64 {
        p.clamp(self.lo, self.hi)
    }
}

impl Default for Truncation {
    fn default() -> Self {
        Self { lo: 0.1, hi: 0.9 }
    }
}

/// A function of one covariate row.
pub type RowFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum PropensityKind {
    Known(RowFn),
    ConstantMcar(f64),
    LogisticBasis { basis: BasisSpec, coefficients: Vec<f64> },
}

impl fmt::Debug for PropensityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PropensityKind::Known(_) => f.write_str("Known(..)"),
            PropensityKind::ConstantMcar(p) => f.debug_tuple("ConstantMcar").field(p).finish(),
            PropensityKind::LogisticBasis { basis, coefficients } => {
                f.debug_struct("LogisticBasis").field("basis", basis).field("coefficients", coefficients).finish()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub kind: PropensityKind,
    pub truncation: Truncation,
}

impl PropensityModel {
    pub fn known(f: RowFn, truncation: Truncation) -> Self {
        Self { kind: PropensityKind::Known(f), truncation }
    }

    /// Truncated prediction at one covariate row.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let raw = match &self.kind {
            PropensityKind::Known(f) => f(x),
            PropensityKind::ConstantMcar(p) => *p,
            PropensityKind::LogisticBasis { basis, coefficients } => expit(dot(&basis.expand_row(x), coefficients)),
        };
        self.truncation.apply(raw)
    }

    pub fn predict_all(&self, x: &Matrix) -> Vec<f64> {
        (0..x.rows()).map(|i| self.predict(x.row(i))).collect()
    }
}

fn check_treatment(data: &ObservedDataset) -> Result<()> {
    let treated = data.treatment().iter().filter(|t| **t).count();
    if treated == 0 || treated == data.n() {
        return Err(Error::DegenerateTreatment);
    }
    Ok(())
}

/// L1-penalized logistic regression of `t` on `Ψ(x)` using every row.
pub fn fit_propensity(
    data: &ObservedDataset,
    spec: &BasisSpec,
    truncation: Truncation,
    rule: &LambdaRule,
    rng: &mut RngStream,
    exec: Execution,
) -> Result<PropensityModel> {
    spec.validate()?;
    check_treatment(data)?;
    let t: Vec<f64> = data.treatment().iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let problem = DesignProblem::new(spec.expand(data.x()), t, LossKind::Logistic)?.with_intercept(spec.intercept);
    let fit = rule.fit(&problem, rng, exec)?;
    Ok(PropensityModel {
        kind: PropensityKind::LogisticBasis { basis: *spec, coefficients: fit.coefficients },
        truncation,
    })
}

/// Missing-completely-at-random propensity: the sample mean of `t`.
pub fn fit_propensity_mcar(data: &ObservedDataset, truncation: Truncation) -> Result<PropensityModel> {
    check_treatment(data)?;
    Ok(PropensityModel { kind: PropensityKind::ConstantMcar(1.0 - data.missing_fraction()), truncation })
}

#[derive(Clone)]
pub enum OutcomeKind {
    Known(RowFn),
    Lasso {
        basis: BasisSpec,
        coefficients: Vec<f64>,
    },
    Sim {
        index: Vec<f64>,
        smoother: KernelSmoother,
    },
    /// Degenerate single-index fit: the complete-case mean everywhere.
    Constant(f64),
}

impl fmt::Debug for OutcomeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutcomeKind::Known(_) => f.write_str("Known(..)"),
            OutcomeKind::Lasso { basis, coefficients } => {
                f.debug_struct("Lasso").field("basis", basis).field("coefficients", coefficients).finish()
            }
            OutcomeKind::Sim { index, smoother } => {
                f.debug_struct("Sim").field("index", index).field("bandwidth", &smoother.bandwidth()).finish()
            }
            OutcomeKind::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OutcomeModel {
    pub kind: OutcomeKind,
    pub degenerate_index: bool,
}

impl OutcomeModel {
    pub fn known(f: RowFn) -> Self {
        Self { kind: OutcomeKind::Known(f), degenerate_index: false }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match &self.kind {
            OutcomeKind::Known(f) => f(x),
            OutcomeKind::Lasso { basis, coefficients } => dot(&basis.expand_row(x), coefficients),
            OutcomeKind::Sim { index, smoother } => smoother.predict(dot(index, x)),
            OutcomeKind::Constant(c) => *c,
        }
    }

    pub fn predict_all(&self, x: &Matrix) -> Vec<f64> {
        (0..x.rows()).map(|i| self.predict(x.row(i))).collect()
    }
}

/// Complete-case rows as `(x, y)`.
fn complete_case_arrays(data: &ObservedDataset) -> (Vec<usize>, Matrix, Vec<f64>) {
    let rows = data.complete_cases();
    let x = data.x().select_rows(&rows);
    let y = rows.iter().map(|&i| data.observed_y(i).expect("complete case")).collect();
    (rows, x, y)
}

/// Lasso regression of `y` on `Ψ(x)` over complete cases.
pub fn fit_outcome_parametric(
    data: &ObservedDataset,
    spec: &BasisSpec,
    rule: &LambdaRule,
    rng: &mut RngStream,
    exec: Execution,
) -> Result<OutcomeModel> {
    spec.validate()?;
    let (rows, x, y) = complete_case_arrays(data);
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!("{} complete cases, need 2", rows.len())));
    }
    let problem = DesignProblem::new(spec.expand(&x), y, LossKind::Squared)?.with_intercept(spec.intercept);
    let fit = rule.fit(&problem, rng, exec)?;
    Ok(OutcomeModel {
        kind: OutcomeKind::Lasso { basis: *spec, coefficients: fit.coefficients },
        degenerate_index: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthRule {
    Fixed(f64),
    RuleOfThumb,
    /// Least-squares CV over a log grid of `points` values in `[h/10, 10h]` around the rule-of-thumb `h`.
    Lscv {
        points: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexWeighting {
    /// Complete cases weighted by `1/π̂(x)`.
    Ipw,
    Unweighted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub index_rule: LambdaRule,
    pub bandwidth: BandwidthRule,
    pub weighting: IndexWeighting,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            index_rule: LambdaRule::default_cv(),
            bandwidth: BandwidthRule::RuleOfThumb,
            weighting: IndexWeighting::Ipw,
        }
    }
}

/// Single-index outcome model: lasso index direction, then kernel smoothing of `y` over the scores.
pub fn fit_outcome_sim(
    data: &ObservedDataset,
    pi: &PropensityModel,
    opts: &SimOptions,
    rng: &mut RngStream,
    exec: Execution,
) -> Result<OutcomeModel> {
    let (rows, x, y) = complete_case_arrays(data);
    if rows.len() < 10 {
        return Err(Error::InsufficientData(format!("{} complete cases, need 10", rows.len())));
    }
    let fallback = || OutcomeModel { kind: OutcomeKind::Constant(mean(&y)), degenerate_index: true };
    let mut problem =
        DesignProblem::new(BasisSpec::linear().expand(&x), y.clone(), LossKind::Squared)?.with_intercept(true);
    if opts.weighting == IndexWeighting::Ipw {
        let w = (0..x.rows()).map(|i| 1.0 / pi.predict(x.row(i))).collect();
        problem = problem.with_weights(w)?;
    }
    let fit = opts.index_rule.fit(&problem, rng, exec)?;
    let index = fit.coefficients[1..].to_vec();
    if index.iter().all(|c| *c == 0.0) {
        return Ok(fallback());
    }
    let scores: Vec<f64> = (0..x.rows()).map(|i| dot(&index, x.row(i))).collect();
    let bandwidth = match opts.bandwidth {
        BandwidthRule::Fixed(h) => Ok(h),
        BandwidthRule::RuleOfThumb => bandwidth_rot(&scores),
        BandwidthRule::Lscv { points } => {
            bandwidth_rot(&scores).and_then(|h| bandwidth_lscv(&scores, &y, &log_grid_around(h, points)))
        }
    };
    let bandwidth = match bandwidth {
        Ok(h) => h,
        Err(Error::DegenerateScores) => return Ok(fallback()),
        Err(e) => return Err(e),
    };
    let smoother = KernelSmoother::new(scores, y, bandwidth)?;
    Ok(OutcomeModel { kind: OutcomeKind::Sim { index, smoother }, degenerate_index: false })
}
