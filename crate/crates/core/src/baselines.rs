//! l2 reference solvers: orthogonal matching pursuit and Lasso by ISTA.
//!
//! A basis-pursuit style estimate is the Lasso with a small `λ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::ProblemInstance;

/// Columns whose orthogonal remainder drops below this fraction of their
/// norm are treated as linearly dependent on the current support.
const DEPENDENT_COLUMN: f64 = 1e-10;
const RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct OmpConfig {
    pub max_atoms: usize,
    /// Stop once `‖r − Φŝ‖₂` is at or below this value.
    pub residual_threshold: f64,
}

impl OmpConfig {
    pub fn new(max_atoms: usize) -> Self {
        Self {
            max_atoms,
            residual_threshold: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_atoms == 0 {
            return Err(Error::InvalidConfiguration(
                "omp max_atoms must be ≥ 1".into(),
            ));
        }
        if self.residual_threshold.is_nan() || self.residual_threshold < 0.0 {
            return Err(Error::InvalidConfiguration(format!(
                "omp residual_threshold = {} must be ≥ 0",
                self.residual_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OmpResult {
    pub estimate: DVector<f64>,
    /// Atoms in the order they were selected.
    pub support: Vec<usize>,
    pub residual_norm: f64,
}

impl OmpResult {
    pub fn iterations(&self) -> usize {
        self.support.len()
    }
}

/// Orthogonal matching pursuit.
///
/// Each round adds the atom with the largest normalized correlation
/// `|⟨residual, φⱼ⟩| / ‖φⱼ‖` and refits all selected coefficients by least
/// squares. The refit keeps a thin QR factorization of the selected columns
/// that is extended by one Gram–Schmidt step (with re-orthogonalization)
/// per round.
pub fn omp(problem: &ProblemInstance, config: &OmpConfig) -> Result<OmpResult> {
    config.validate()?;
    let phi = problem.dictionary().matrix();
    let (m, n) = phi.shape();
    let r = problem.observation();

    let norms: Vec<f64> = phi.column_iter().map(|c| c.norm()).collect();
    if let Some(j) = norms.iter().position(|&x| x == 0.0) {
        return Err(Error::InvalidInput(format!(
            "dictionary column {j} is zero"
        )));
    }

    let max_atoms = config.max_atoms.min(m).min(n);
    let mut support: Vec<usize> = Vec::with_capacity(max_atoms);
    let mut selected = vec![false; n];
    // orthonormal basis of the selected columns and the triangular factor
    let mut q: Vec<DVector<f64>> = Vec::with_capacity(max_atoms);
    let mut rfac = DMatrix::<f64>::zeros(max_atoms, max_atoms);
    // Qᵀ r, which also gives the coefficients by back substitution
    let mut qtr: Vec<f64> = Vec::with_capacity(max_atoms);
    let mut ridge_fallback = false;
    let mut residual = r.clone();

    while support.len() < max_atoms && residual.norm() > config.residual_threshold {
        let corr = phi.tr_mul(&residual);
        let pick = (0..n)
            .filter(|&j| !selected[j])
            .map(|j| (j, corr[j].abs() / norms[j]))
            .fold(None, |best: Option<(usize, f64)>, (j, c)| match best {
                Some((_, b)) if b >= c => best,
                _ => Some((j, c)),
            });
        let Some((j, c)) = pick else { break };
        if c == 0.0 {
            break;
        }

        let k = support.len();
        let col = phi.column(j).into_owned();
        let mut w = col.clone();
        for _pass in 0..2 {
            for (p, qp) in q.iter().enumerate() {
                let proj = qp.dot(&w);
                rfac[(p, k)] += proj;
                w.axpy(-proj, qp, 1.0);
            }
        }
        let wn = w.norm();
        selected[j] = true;
        support.push(j);
        if wn <= DEPENDENT_COLUMN * norms[j] {
            ridge_fallback = true;
            break;
        }
        rfac[(k, k)] = wn;
        let qk = w / wn;
        qtr.push(qk.dot(r));
        residual.axpy(-qtr[k], &qk, 1.0);
        q.push(qk);
    }

    let mut estimate = DVector::zeros(n);
    if ridge_fallback {
        log::debug!("omp: dependent atom selected, refitting with ridge {RIDGE:e}");
        let sub = phi.select_columns(support.iter());
        let gram = sub.tr_mul(&sub) + DMatrix::identity(support.len(), support.len()) * RIDGE;
        let rhs = sub.tr_mul(r);
        let coef = gram
            .cholesky()
            .ok_or_else(|| Error::NumericalFailure("singular least-squares refit".into()))?
            .solve(&rhs);
        for (&j, &c) in support.iter().zip(coef.iter()) {
            estimate[j] = c;
        }
        residual = r - phi * &estimate;
    } else {
        let k = support.len();
        let mut coef = vec![0.0; k];
        for row in (0..k).rev() {
            let tail: f64 = (row + 1..k).map(|c| rfac[(row, c)] * coef[c]).sum();
            coef[row] = (qtr[row] - tail) / rfac[(row, row)];
        }
        for (&j, &c) in support.iter().zip(&coef) {
            estimate[j] = c;
        }
    }

    Ok(OmpResult {
        estimate,
        residual_norm: residual.norm(),
        support,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoConfig {
    pub lambda: f64,
    pub max_iter: usize,
    /// Stop once the l2 displacement between iterates is at or below this.
    pub tol: f64,
}

impl LassoConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            max_iter: 10_000,
            tol: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfiguration(format!(
                "lasso lambda = {} must be positive",
                self.lambda
            )));
        }
        if self.tol.is_nan() || self.tol <= 0.0 || self.max_iter == 0 {
            return Err(Error::InvalidConfiguration(
                "lasso tol and max_iter must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LassoResult {
    pub estimate: DVector<f64>,
    /// `g(s⁽⁰⁾), g(s⁽¹⁾), …` with `g(s) = ½‖r − Φs‖₂² + λ‖s‖₁`.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

impl LassoResult {
    pub fn iterations(&self) -> usize {
        self.objective_trace.len() - 1
    }
}

pub fn soft_threshold(x: f64, threshold: f64) -> f64 {
    if x > threshold {
        x - threshold
    } else if x < -threshold {
        x + threshold
    } else {
        0.0
    }
}

/// `½‖r − Φs‖₂² + λ‖s‖₁`
pub fn lasso_objective(problem: &ProblemInstance, s: &DVector<f64>, lambda: f64) -> Result<f64> {
    let residual = problem.residual(s)?;
    Ok(0.5 * residual.norm_squared() + lambda * s.lp_norm(1))
}

/// Upper bound on `‖Φ‖₂²` from power iteration on `ΦᵀΦ`, padded by 1%
/// and capped by the Frobenius bound.
pub fn lipschitz_bound(phi: &DMatrix<f64>) -> f64 {
    let frobenius = phi.norm_squared();
    let mut x = DVector::from_element(phi.ncols(), 1.0 / (phi.ncols() as f64).sqrt());
    let mut estimate = 0.0;
    for _ in 0..500 {
        let y = phi.tr_mul(&(phi * &x));
        let next = y.norm();
        if next == 0.0 {
            return frobenius.max(f64::MIN_POSITIVE);
        }
        x = y / next;
        let done = (next - estimate).abs() <= 1e-12 * next;
        estimate = next;
        if done {
            break;
        }
    }
    (1.01 * estimate).min(frobenius)
}

/// Lasso by iterative shrinkage-thresholding with step `1/L`.
pub fn lasso_ista(problem: &ProblemInstance, config: &LassoConfig) -> Result<LassoResult> {
    config.validate()?;
    let phi = problem.dictionary().matrix();
    let r = problem.observation();
    let lipschitz = lipschitz_bound(phi);
    let step = 1.0 / lipschitz;
    let threshold = step * config.lambda;

    let mut s = DVector::zeros(phi.ncols());
    let mut residual = r.clone();
    let mut objective_trace = vec![0.5 * residual.norm_squared()];
    let mut converged = false;

    for _ in 0..config.max_iter {
        let grad = phi.tr_mul(&residual);
        let next = s.zip_map(&grad, |si, gi| soft_threshold(si + step * gi, threshold));
        let displacement = (&next - &s).norm();
        s = next;
        residual = r - phi * &s;
        objective_trace.push(0.5 * residual.norm_squared() + config.lambda * s.lp_norm(1));
        if displacement <= config.tol {
            converged = true;
            break;
        }
    }

    Ok(LassoResult {
        estimate: s,
        objective_trace,
        converged,
    })
}

/// Largest coordinate of the proximal-gradient fixed-point residual,
/// `max |s − prox(s + Φᵀ(r − Φs)/L)|`; zero exactly at a Lasso minimizer.
pub fn lasso_optimality_residual(
    problem: &ProblemInstance,
    s: &DVector<f64>,
    lambda: f64,
) -> Result<f64> {
    let phi = problem.dictionary().matrix();
    let step = 1.0 / lipschitz_bound(phi);
    let grad = phi.tr_mul(&problem.residual(s)?);
    Ok(s.iter()
        .zip(grad.iter())
        .map(|(si, gi)| (si - soft_threshold(si + step * gi, step * lambda)).abs())
        .fold(0.0, f64::max))
}
