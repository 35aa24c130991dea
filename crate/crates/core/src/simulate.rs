//! Simulation designs, the projection target θ₀ and the comparator estimators.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ddr::{fit_ddr, NuisancePredictions, ObservedDataset};
use crate::error::{Error, Result};
use crate::nuisance::{BasisSpec, LambdaRule, RowFn, Truncation};
use crate::numkit::{cholesky, cholesky_solve, dot, expit, gaussian_vector, max_eigenvalue_psd, Matrix, RngStream};
use crate::par::{map_indexed, Execution};
use crate::solvers::{DesignProblem, LossKind, SparseFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpKind {
    LinearLinear,
    QuadQuad,
    SimSim,
}

impl fmt::Display for DgpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DgpKind::LinearLinear => "linear-linear",
            DgpKind::QuadQuad => "quad-quad",
            DgpKind::SimSim => "sim-sim",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovKind {
    Identity,
    Ar1,
    Cs,
}

impl fmt::Display for CovKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CovKind::Identity => "identity",
            CovKind::Ar1 => "ar1",
            CovKind::Cs => "cs",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub p: usize,
    pub cov: CovKind,
    pub rho: f64,
    pub truncation: Truncation,
}

impl DgpSpec {
    pub fn new(kind: DgpKind, p: usize, cov: CovKind) -> Self {
        Self { kind, p, cov, rho: 0.2, truncation: Truncation::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.p < 10 {
            return Err(Error::InvalidArgument(format!("p must be at least 10, got {}", self.p)));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!("rho must satisfy |rho| < 1, got {}", self.rho)));
        }
        Ok(())
    }
}

/// `Σ` for the requested structure.
pub fn build_covariance(kind: CovKind, p: usize, rho: f64) -> Result<Matrix> {
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("rho must satisfy |rho| < 1, got {rho}")));
    }
    Ok(match kind {
        CovKind::Identity => Matrix::identity(p),
        CovKind::Ar1 => Matrix::from_fn(p, p, |i, j| rho.powi(i.abs_diff(j) as i32)),
        CovKind::Cs => Matrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { rho }),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgpParams {
    pub alpha0: f64,
    pub alpha: Vec<f64>,
    pub alpha_star: Vec<f64>,
    pub gamma0: f64,
    pub gamma: Vec<f64>,
    pub gamma_star: Vec<f64>,
    pub c_t: f64,
    pub c_y: f64,
    /// False when `p` is not one of the published presets and the p = 50 pattern was padded.
    pub preset: bool,
}

fn pattern(blocks: &[(f64, usize)], p: usize) -> Vec<f64> {
    let mut v: Vec<f64> = blocks.iter().flat_map(|&(a, k)| std::iter::repeat_n(a, k)).collect();
    v.resize(p, 0.0);
    v
}

/// Coefficient vectors for `spec.p`; `c_Y` uses the largest eigenvalue of `Σ`.
pub fn default_params(spec: &DgpSpec) -> Result<DgpParams> {
    spec.validate()?;
    let p = spec.p;
    let big = p == 500;
    let alpha_raw = if big {
        pattern(&[(1.0, 3), (-1.0, 2), (0.5, 2), (-0.5, 3)], p)
    } else {
        pattern(&[(1.0, 1), (-1.0, 1), (0.5, 1), (-0.5, 1), (0.5, 1)], p)
    };
    let norm = (alpha_raw.iter().filter(|a| **a != 0.0).count() as f64).sqrt();
    let alpha = alpha_raw.iter().map(|a| a / norm).collect();
    let alpha_star = if big { pattern(&[(0.25, 2), (-0.25, 2)], p) } else { pattern(&[(0.25, 1), (-0.25, 1)], p) };
    let gamma = if big {
        pattern(&[(1.0, 3), (-1.0, 2), (0.5, 5), (-0.5, 5), (0.25, 2), (-0.25, 3)], p)
    } else {
        pattern(&[(1.0, 3), (-1.0, 2), (0.5, 2), (-0.5, 3)], p)
    };
    let gamma_star = pattern(&[(1.0, 1), (-1.0, 1), (0.5, 2), (-0.5, 1)], p);
    let sigma = build_covariance(spec.cov, p, spec.rho)?;
    let c_y = 0.3 / max_eigenvalue_psd(&sigma).sqrt();
    Ok(DgpParams {
        alpha0: 0.5,
        alpha,
        alpha_star,
        gamma0: 1.0,
        gamma,
        gamma_star,
        c_t: 0.2,
        c_y,
        preset: p == 50 || p == 500,
    })
}

/// Values only the simulator knows.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTruth {
    pub y_full: Vec<f64>,
    /// Truncated propensity used to draw `t`.
    pub pi: Vec<f64>,
    /// Untruncated propensity.
    pub pi_raw: Vec<f64>,
    pub m: Vec<f64>,
}

impl HiddenTruth {
    pub fn truncated_fraction(&self) -> f64 {
        let k = self.pi.iter().zip(&self.pi_raw).filter(|(a, b)| a != b).count();
        k as f64 / self.pi.len().max(1) as f64
    }
}

/// A fully specified data-generating process.
#[derive(Debug, Clone)]
pub struct Dgp {
    pub spec: DgpSpec,
    pub params: DgpParams,
    sigma: Matrix,
    chol: Matrix,
}

impl Dgp {
    pub fn new(spec: DgpSpec) -> Result<Self> {
        let params = default_params(&spec)?;
        Self::with_params(spec, params)
    }

    pub fn with_params(spec: DgpSpec, params: DgpParams) -> Result<Self> {
        spec.validate()?;
        let p = spec.p;
        for v in [&params.alpha, &params.alpha_star, &params.gamma, &params.gamma_star] {
            if v.len() != p {
                return Err(Error::Dimension(format!("parameter vector of length {} for p = {p}", v.len())));
            }
        }
        let sigma = build_covariance(spec.cov, p, spec.rho)?;
        let chol = cholesky(&sigma)?;
        Ok(Self { spec, params, sigma, chol })
    }

    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        let q = &self.params;
        let lin = q.alpha0 + dot(&q.alpha, x);
        match self.spec.kind {
            DgpKind::LinearLinear => lin,
            DgpKind::QuadQuad => lin + x.iter().zip(&q.alpha_star).map(|(v, a)| a * v * v).sum::<f64>(),
            DgpKind::SimSim => {
                let idx = dot(&q.alpha, x);
                lin + q.c_t * idx * idx
            }
        }
    }

    /// Untruncated `π(x)`.
    pub fn pi_raw(&self, x: &[f64]) -> f64 {
        expit(self.logit(x))
    }

    pub fn pi(&self, x: &[f64]) -> f64 {
        self.spec.truncation.apply(self.pi_raw(x))
    }

    /// `E(Y | X = x)`.
    pub fn mean_y(&self, x: &[f64]) -> f64 {
        let q = &self.params;
        let lin = q.gamma0 + dot(&q.gamma, x);
        match self.spec.kind {
            DgpKind::LinearLinear => lin,
            DgpKind::QuadQuad => lin + x.iter().zip(&q.gamma_star).map(|(v, g)| g * v * v).sum::<f64>(),
            DgpKind::SimSim => {
                let idx = dot(&q.gamma, x);
                lin + q.c_y * idx * idx
            }
        }
    }

    pub fn sample_x(&self, rng: &mut RngStream) -> Vec<f64> {
        gaussian_vector(rng, &self.chol)
    }

    /// `n` rows; masked outcomes are stored as NaN.
    pub fn generate(&self, n: usize, rng: &mut RngStream) -> Result<(ObservedDataset, HiddenTruth)> {
        if n < 2 {
            return Err(Error::InsufficientData("generate needs n >= 2".into()));
        }
        let p = self.spec.p;
        let mut xs = Vec::with_capacity(n * p);
        let mut truth = HiddenTruth {
            y_full: Vec::with_capacity(n),
            pi: Vec::with_capacity(n),
            pi_raw: Vec::with_capacity(n),
            m: Vec::with_capacity(n),
        };
        let mut t = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let x = self.sample_x(rng);
            let m = self.mean_y(&x);
            let yi = m + rng.standard_normal();
            let raw = self.pi_raw(&x);
            let pi = self.spec.truncation.apply(raw);
            let ti = rng.bernoulli(pi);
            t.push(ti);
            y.push(if ti { yi } else { f64::NAN });
            truth.y_full.push(yi);
            truth.pi.push(pi);
            truth.pi_raw.push(raw);
            truth.m.push(m);
            xs.extend(x);
        }
        let data = ObservedDataset::new(t, y, Matrix::from_vec(n, p, xs)?)?;
        Ok((data, truth))
    }

    /// True propensity as a shareable function.
    pub fn pi_fn(&self) -> RowFn {
        let me = self.clone();
        Arc::new(move |x| me.pi(x))
    }

    pub fn mean_fn(&self) -> RowFn {
        let me = self.clone();
        Arc::new(move |x| me.mean_y(x))
    }

    /// Intercept and slopes of the linear projection, from Gaussian moments.
    ///
    /// Odd moments of the centered Gaussian vanish, so the slopes equal `γ`
    /// for every design and only the intercept absorbs the quadratic terms.
    pub fn theta0_exact(&self) -> Vec<f64> {
        let q = &self.params;
        let shift = match self.spec.kind {
            DgpKind::LinearLinear => 0.0,
            DgpKind::QuadQuad => (0..self.spec.p).map(|j| q.gamma_star[j] * self.sigma[(j, j)]).sum(),
            DgpKind::SimSim => q.c_y * dot(&q.gamma, &self.sigma.matvec(&q.gamma)),
        };
        let mut theta = vec![q.gamma0 + shift];
        theta.extend_from_slice(&q.gamma);
        theta
    }

    /// Zero pattern of θ₀: the intercept is always active, slopes follow `γ`.
    pub fn structural_support(&self) -> Vec<bool> {
        let mut s = vec![true];
        s.extend(self.params.gamma.iter().map(|g| *g != 0.0));
        s
    }
}

/// Rows per independent chunk in [`compute_theta0`].
pub const THETA0_CHUNK: usize = 10_000;

/// Monte-Carlo linear projection of `Y` on `(1, X)` from `m` full-data draws.
///
/// Draws are split into fixed chunks with their own streams and summed in
/// chunk order, so the result does not depend on the execution mode.
pub fn compute_theta0(dgp: &Dgp, m: usize, seed: u64, exec: Execution) -> Result<Vec<f64>> {
    if m < 10_000 {
        return Err(Error::InvalidArgument(format!("theta0 needs at least 10000 draws, got {m}")));
    }
    let d = dgp.spec.p + 1;
    let chunks = m.div_ceil(THETA0_CHUNK);
    let partial = map_indexed(exec, chunks, |c| {
        let rows = THETA0_CHUNK.min(m - c * THETA0_CHUNK);
        let mut rng = RngStream::new(seed, 1 << 32 | c as u64);
        let mut xtx = vec![0.0; d * d];
        let mut xty = vec![0.0; d];
        let mut z = vec![0.0; d];
        for _ in 0..rows {
            let x = dgp.sample_x(&mut rng);
            let y = dgp.mean_y(&x) + rng.standard_normal();
            z[0] = 1.0;
            z[1..].copy_from_slice(&x);
            for a in 0..d {
                xty[a] += z[a] * y;
                for b in a..d {
                    xtx[a * d + b] += z[a] * z[b];
                }
            }
        }
        (xtx, xty)
    });
    let mut xtx = vec![0.0; d * d];
    let mut xty = vec![0.0; d];
    for (a, b) in partial {
        xtx.iter_mut().zip(a).for_each(|(s, v)| *s += v);
        xty.iter_mut().zip(b).for_each(|(s, v)| *s += v);
    }
    let gram = Matrix::from_fn(d, d, |a, b| if a <= b { xtx[a * d + b] } else { xtx[b * d + a] } / m as f64);
    let rhs: Vec<f64> = xty.iter().map(|v| v / m as f64).collect();
    Ok(cholesky_solve(&cholesky(&gram)?, &rhs))
}

/// Identity of a cached θ₀.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta0Key {
    pub p: usize,
    pub kind: DgpKind,
    pub cov: CovKind,
    pub rho: f64,
    pub seed: u64,
    pub m: usize,
}

impl Theta0Key {
    pub fn new(spec: &DgpSpec, seed: u64, m: usize) -> Self {
        Self { p: spec.p, kind: spec.kind, cov: spec.cov, rho: spec.rho, seed, m }
    }

    fn header(&self) -> String {
        format!(
            "# ddrkit-theta0 p={} dgp={} cov={} rho={} seed={} m={}",
            self.p, self.kind, self.cov, self.rho, self.seed, self.m
        )
    }

    /// File name unique to this key.
    pub fn file_name(&self) -> String {
        format!("theta0_{}_{}_p{}_rho{}_seed{}_m{}.txt", self.kind, self.cov, self.p, self.rho, self.seed, self.m)
    }
}

/// Text format: a header line followed by one coefficient per line.
pub fn write_theta0(path: &Path, key: &Theta0Key, theta: &[f64]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&key.header());
    out.push('\n');
    for v in theta {
        out.push_str(&format!("{v:e}\n"));
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(out.as_bytes())?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// `Ok(None)` when the file is absent or was written for a different key.
pub fn read_theta0(path: &Path, key: &Theta0Key) -> Result<Option<Vec<f64>>> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == key.header() => {}
        _ => return Ok(None),
    }
    let theta = lines
        .map(|l| {
            let l = l?;
            l.trim().parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad theta0 entry {l:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if theta.len() != key.p + 1 {
        return Ok(None);
    }
    Ok(Some(theta))
}

/// Read θ₀ from `dir` or compute and store it.
pub fn theta0_cached(dgp: &Dgp, m: usize, seed: u64, dir: &Path, exec: Execution) -> Result<Vec<f64>> {
    let key = Theta0Key::new(&dgp.spec, seed, m);
    let path = dir.join(key.file_name());
    if let Some(theta) = read_theta0(&path, &key)? {
        return Ok(theta);
    }
    let theta = compute_theta0(dgp, m, seed, exec)?;
    fs::create_dir_all(dir)?;
    write_theta0(&path, &key, &theta)?;
    Ok(theta)
}

/// Oracle, full-data and complete-case fits.
#[derive(Debug, Clone)]
pub struct Comparators {
    pub oracle: SparseFit,
    pub full: SparseFit,
    pub cc: SparseFit,
}

/// Fit the three benchmark estimators on the linear basis with intercept.
///
/// Each fit receives a clone of `rng`, so all three see identical CV folds.
pub fn comparator_fits(
    data: &ObservedDataset,
    truth: &HiddenTruth,
    rule: &LambdaRule,
    rng: &RngStream,
    exec: Execution,
) -> Result<Comparators> {
    let basis = BasisSpec::linear();
    let preds = NuisancePredictions::new(truth.pi.clone(), truth.m.clone(), None)?;
    let oracle = fit_ddr(data, &preds, LossKind::Squared, &basis, rule, &mut rng.clone(), exec)?;
    let design = basis.expand(data.x());
    let full_problem =
        DesignProblem::new(design.clone(), truth.y_full.clone(), LossKind::Squared)?.with_intercept(true);
    let full = rule.fit(&full_problem, &mut rng.clone(), exec)?;
    let rows = data.complete_cases();
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!("{} complete cases", rows.len())));
    }
    let y_cc = rows.iter().map(|&i| data.observed_y(i).expect("complete case")).collect();
    let cc_problem = DesignProblem::new(design.select_rows(&rows), y_cc, LossKind::Squared)?.with_intercept(true);
    let cc = rule.fit(&cc_problem, &mut rng.clone(), exec)?;
    Ok(Comparators { oracle, full, cc })
}
