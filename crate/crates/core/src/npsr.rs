//! Nonparametric sparse recovery (NPSR).
//!
//! Minimizes
//!
//! ```text
//! f(s) = ‖r − Φs‖_φ + λ‖s‖₁
//! ```
//!
//! by coordinate steepest descent. Each iteration computes the descent vector
//!
//! ```text
//! v = Φᵀ a(R(r − Φs)) − λ u(s)
//! ```
//!
//! picks the coordinate with the largest `|vᵢ|`, and moves along
//! `sign(vᵢ) eᵢ` by an exact line search. Starting from `s = 0`, the support
//! grows one coordinate at a time while `‖s‖₁` grows and the rank dispersion
//! of the residual shrinks.
//!
//! The l1 subgradient `u(s)` takes `sgn(sᵢ)` on nonzero coordinates. At zero
//! coordinates it takes the element of `[−1, 1]` that makes `vᵢ` the
//! minimal-norm element of the subdifferential, i.e. `vᵢ` is the soft
//! threshold of the rank gradient at `λ`. So a zero coordinate only becomes
//! eligible once its rank correlation exceeds `λ`, and `v = 0` certifies
//! optimality.
//!
//! Along a coordinate line `h(t) = f(s + t·dir·eᵢ)` is convex and piecewise
//! linear. The line search brackets the minimizer by doubling and then
//! bisects on the sign of the right derivative `h′₊`.

use std::cmp::Ordering;
use std::fmt;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};
use crate::model::{Dictionary, ProblemInstance};
use crate::scores::{rank_pseudo_norm, rank_scores, score_vector, ScoreFunction};

/// Fraction of `max |Φᵀ a(R(r))|` used for the default `λ`.
pub const DEFAULT_LAMBDA_RATIO: f64 = 0.1;
/// Fraction of `‖r‖_φ` used for the default stopping threshold `ξ`.
pub const DEFAULT_XI_RATIO: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 5_000;
pub const DEFAULT_LINE_SEARCH_TOL: f64 = 1e-10;
pub const DEFAULT_STALL_TOL: f64 = 1e-9;

/// Upper limit for the bracketing phase of the line search.
const MAX_BRACKET: f64 = 1e12;
/// Smallest relative decrease of `f` for which a fallback step is taken.
const FALLBACK_MIN_DECREASE: f64 = 1e-7;
/// The residual is recomputed from scratch this often to bound drift.
const RESIDUAL_REFRESH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct NpsrConfig {
    /// Weight of the l1 penalty.
    pub lambda: f64,
    /// Stop once the objective is at or below this value.
    pub xi: f64,
    pub max_iter: usize,
    pub score: ScoreFunction,
    /// Final bracket width of the line search.
    pub line_search_tol: f64,
    /// Steps shorter than this end the run as stalled.
    pub stall_tol: f64,
}

impl NpsrConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            xi: 0.0,
            max_iter: DEFAULT_MAX_ITER,
            score: ScoreFunction::Wilcoxon,
            line_search_tol: DEFAULT_LINE_SEARCH_TOL,
            stall_tol: DEFAULT_STALL_TOL,
        }
    }

    /// Data-driven defaults: `λ = 0.1 · max|Φᵀ a(R(r))|`, `ξ = 10⁻⁶ · ‖r‖_φ`.
    pub fn for_problem(problem: &ProblemInstance, score: ScoreFunction) -> Result<Self> {
        Self::with_lambda_ratio(problem, score, DEFAULT_LAMBDA_RATIO)
    }

    pub fn with_lambda_ratio(
        problem: &ProblemInstance,
        score: ScoreFunction,
        ratio: f64,
    ) -> Result<Self> {
        let lambda = ratio * lambda_max(problem, score)?;
        let xi = DEFAULT_XI_RATIO * rank_pseudo_norm(problem.observation().as_slice(), score)?;
        Ok(Self {
            lambda,
            xi,
            score,
            ..Self::new(lambda)
        })
    }

    pub fn score(mut self, score: ScoreFunction) -> Self {
        self.score = score;
        self
    }

    pub fn xi(mut self, xi: f64) -> Self {
        self.xi = xi;
        self
    }

    pub fn max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, value: f64| {
            Err(Error::InvalidConfiguration(format!(
                "npsr {what} = {value} is out of range"
            )))
        };
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda", self.lambda);
        }
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return bad("xi", self.xi);
        }
        if !(self.line_search_tol > 0.0 && self.line_search_tol.is_finite()) {
            return bad("line_search_tol", self.line_search_tol);
        }
        if !(self.stall_tol > 0.0 && self.stall_tol.is_finite()) {
            return bad("stall_tol", self.stall_tol);
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfiguration(
                "npsr max_iter must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// `max |Φᵀ a(R(r))|`, the rank correlation of the strongest atom at `s = 0`.
pub fn lambda_max(problem: &ProblemInstance, score: ScoreFunction) -> Result<f64> {
    let a = DVector::from_vec(rank_scores(problem.observation().as_slice(), score)?);
    Ok(problem.dictionary().apply_transpose(&a).amax())
}

/// Mean of `max |Φᵀ a_π|` over `draws` random permutations `π` of the
/// score vector.
///
/// When the residual is pure i.i.d. noise its ranks are a uniform random
/// permutation whatever the noise law, so this is the typical size of the
/// rank gradient at the true signal. It depends only on `Φ` and the score
/// function, which makes multiples of it noise-agnostic choices of `λ`.
pub fn pivotal_lambda(
    dictionary: &Dictionary,
    score: ScoreFunction,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if draws == 0 {
        return Err(Error::InvalidConfiguration(
            "pivotal lambda needs ≥ 1 draw".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = DVector::from_vec(score_vector(dictionary.m(), score)?);
    let mut total = 0.0;
    for _ in 0..draws {
        a.as_mut_slice().shuffle(&mut rng);
        total += dictionary.apply_transpose(&a).amax();
    }
    Ok(total / draws as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Termination {
    ThresholdMet,
    MaxIter,
    Stalled,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::ThresholdMet => "threshold_met",
            Termination::MaxIter => "max_iter",
            Termination::Stalled => "stalled",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub estimate: DVector<f64>,
    /// `f(s⁽⁰⁾), f(s⁽¹⁾), …`; one entry longer than the number of iterations.
    pub objective_trace: Vec<f64>,
    pub chosen_indices: Vec<usize>,
    pub step_sizes: Vec<f64>,
    pub termination: Termination,
}

impl SolveResult {
    pub fn iterations(&self) -> usize {
        self.step_sizes.len()
    }

    pub fn final_objective(&self) -> f64 {
        *self
            .objective_trace
            .last()
            .expect("trace holds the starting objective")
    }
}

fn check_problem(problem: &ProblemInstance, s: &DVector<f64>) -> Result<()> {
    check_len("coefficient vector", problem.n(), s.len())
}

/// `f(s) = ‖r − Φs‖_φ + λ‖s‖₁`
pub fn objective(problem: &ProblemInstance, s: &DVector<f64>, config: &NpsrConfig) -> Result<f64> {
    let residual = problem.residual(s)?;
    Ok(rank_pseudo_norm(residual.as_slice(), config.score)? + config.lambda * s.lp_norm(1))
}

/// `a(R(r − Φs))`, the midrank score of every residual component.
pub fn score_of_residual(
    problem: &ProblemInstance,
    s: &DVector<f64>,
    score: ScoreFunction,
) -> Result<DVector<f64>> {
    let residual = problem.residual(s)?;
    Ok(DVector::from_vec(rank_scores(residual.as_slice(), score)?))
}

/// l1 subgradient `u(s)`; at zero coordinates the free choice in `[−1, 1]`
/// is `clamp(g_hintᵢ / λ)`.
pub fn l1_subgradient(
    s: &DVector<f64>,
    g_hint: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    check_len("gradient hint", s.len(), g_hint.len())?;
    Ok(s.zip_map(g_hint, |si, gi| subgradient_component(si, gi, lambda)))
}

fn subgradient_component(si: f64, gi: f64, lambda: f64) -> f64 {
    if si > 0.0 {
        1.0
    } else if si < 0.0 {
        -1.0
    } else {
        (gi / lambda).clamp(-1.0, 1.0)
    }
}

fn descent_from_gradient(g: &DVector<f64>, s: &DVector<f64>, lambda: f64) -> DVector<f64> {
    g.zip_map(s, |gi, si| {
        if si == 0.0 {
            // exact soft threshold; gi − λ·clamp(gi/λ) can leave rounding residue
            if gi > lambda {
                gi - lambda
            } else if gi < -lambda {
                gi + lambda
            } else {
                0.0
            }
        } else {
            gi - lambda * subgradient_component(si, gi, lambda)
        }
    })
}

/// `v = Φᵀ a(R(r − Φs)) − λ u(s)`, the steepest descent direction of `f`.
pub fn descent_vector(
    problem: &ProblemInstance,
    s: &DVector<f64>,
    config: &NpsrConfig,
) -> Result<DVector<f64>> {
    check_problem(problem, s)?;
    let a = score_of_residual(problem, s, config.score)?;
    let g = problem.dictionary().apply_transpose(&a);
    Ok(descent_from_gradient(&g, s, config.lambda))
}

/// Index of the largest `|vᵢ|` (smallest index on ties) and the sign of
/// `vᵢ`. `None` when `v` is zero.
pub fn select_direction(v: &DVector<f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        if x != 0.0 && best.is_none_or(|(_, b)| x.abs() > b.abs()) {
            best = Some((i, x));
        }
    }
    best.map(|(i, x)| (i, x.signum()))
}

/// Convex piecewise-linear restriction of `f` to one coordinate line,
/// `h(t) = ‖ρ − t·d‖_φ + λ|sᵢ + t·dir| + λ·rest`, with `d = dir · Φ[:, i]`.
struct CoordinateLine<'a> {
    residual: &'a [f64],
    direction: Vec<f64>,
    coefficient: f64,
    sign: f64,
    lambda: f64,
    rest_l1: f64,
    score: ScoreFunction,
    sorted_scores: &'a [f64],
    order: Vec<usize>,
    shifted: Vec<f64>,
}

impl<'a> CoordinateLine<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        residual: &'a [f64],
        column: impl Iterator<Item = f64>,
        coefficient: f64,
        sign: f64,
        lambda: f64,
        rest_l1: f64,
        score: ScoreFunction,
        sorted_scores: &'a [f64],
    ) -> Self {
        let direction: Vec<f64> = column.map(|c| sign * c).collect();
        let m = residual.len();
        Self {
            residual,
            direction,
            coefficient,
            sign,
            lambda,
            rest_l1,
            score,
            sorted_scores,
            order: (0..m).collect(),
            shifted: vec![0.0; m],
        }
    }

    fn fill_shifted(&mut self, t: f64) {
        for ((x, r), d) in self
            .shifted
            .iter_mut()
            .zip(self.residual)
            .zip(&self.direction)
        {
            *x = r - t * d;
        }
    }

    fn value(&mut self, t: f64) -> Result<f64> {
        self.fill_shifted(t);
        let norm = rank_pseudo_norm(&self.shifted, self.score)?;
        Ok(norm + self.lambda * ((self.coefficient + t * self.sign).abs() + self.rest_l1))
    }

    /// Right derivative `h′₊(t)`.
    ///
    /// Just right of `t` the residual is ordered by value and, among equal
    /// values, by decreasing `d`; the rank term is linear on that piece.
    fn right_slope(&mut self, t: f64) -> Result<f64> {
        self.fill_shifted(t);
        if let Some(x) = self.shifted.iter().find(|x| !x.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "non-finite residual {x} at step {t} during line search"
            )));
        }
        let x = &self.shifted;
        let d = &self.direction;
        self.order.sort_unstable_by(|&a, &b| {
            x[a].partial_cmp(&x[b])
                .unwrap_or(Ordering::Equal)
                .then_with(|| d[b].partial_cmp(&d[a]).unwrap_or(Ordering::Equal))
        });
        let rank_slope: f64 = self
            .order
            .iter()
            .zip(self.sorted_scores)
            .map(|(&j, a)| -a * d[j])
            .sum();

        let c = self.coefficient + t * self.sign;
        let l1_slope = if c == 0.0 {
            1.0
        } else {
            c.signum() * self.sign
        };
        Ok(rank_slope + self.lambda * l1_slope)
    }

    fn minimize(&mut self, tol: f64) -> Result<f64> {
        if self.right_slope(0.0)? >= 0.0 {
            return Ok(0.0);
        }
        let mut lo = 0.0;
        let mut hi = 1.0;
        while self.right_slope(hi)? < 0.0 {
            lo = hi;
            hi *= 2.0;
            if hi > MAX_BRACKET {
                // unbounded descent cannot happen for λ > 0; treat as stalled
                log::warn!("line search bracket exceeded {MAX_BRACKET:e}");
                return Ok(0.0);
            }
        }
        // invariant: h′₊(lo) < 0 ≤ h′₊(hi), so the minimizer lies in (lo, hi]
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.right_slope(mid)? >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }

        let mut candidates = vec![0.5 * (lo + hi), hi, lo];
        // the l1 kink, where the coordinate returns exactly to zero
        let kink = -self.coefficient * self.sign;
        if kink > 0.0 && kink >= lo && kink <= hi {
            candidates.insert(0, kink);
        }
        let mut best = (f64::INFINITY, 0.0);
        for t in candidates {
            let h = self.value(t)?;
            if !h.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "objective is {h} at step {t}"
                )));
            }
            if h < best.0 {
                best = (h, t);
            }
        }
        Ok(best.1)
    }
}

/// Exact line search along `direction_sign · eᵢ` from `s`; returns the step
/// `t ≥ 0` minimizing `f(s + t · direction_sign · eᵢ)`.
pub fn exact_line_search(
    problem: &ProblemInstance,
    s: &DVector<f64>,
    i: usize,
    direction_sign: f64,
    config: &NpsrConfig,
) -> Result<f64> {
    config.validate()?;
    check_problem(problem, s)?;
    if i >= problem.n() {
        return Err(Error::InvalidInput(format!(
            "coordinate {i} out of range for N = {}",
            problem.n()
        )));
    }
    if direction_sign != 1.0 && direction_sign != -1.0 {
        return Err(Error::InvalidInput(format!(
            "direction sign must be ±1, got {direction_sign}"
        )));
    }
    let residual = problem.residual(s)?;
    let sorted_scores = score_vector(problem.m(), config.score)?;
    let mut line = CoordinateLine::new(
        residual.as_slice(),
        problem.dictionary().matrix().column(i).iter().copied(),
        s[i],
        direction_sign,
        config.lambda,
        s.lp_norm(1) - s[i].abs(),
        config.score,
        &sorted_scores,
    );
    line.minimize(config.line_search_tol)
}

/// Runs NPSR from `s = 0`.
pub fn solve(problem: &ProblemInstance, config: &NpsrConfig) -> Result<SolveResult> {
    config.validate()?;
    let m = problem.m();
    if m < 2 {
        return Err(Error::InvalidDimension(
            "rank scores are degenerate for a single measurement; need M ≥ 2".into(),
        ));
    }
    let phi = problem.dictionary().matrix();
    let lambda = config.lambda;
    let sorted_scores = score_vector(m, config.score)?;

    let mut s = DVector::zeros(problem.n());
    let mut residual = problem.observation().clone();
    let mut l1 = 0.0;
    let mut f = rank_pseudo_norm(residual.as_slice(), config.score)?;

    let mut objective_trace = vec![f];
    let mut chosen_indices = Vec::new();
    let mut step_sizes = Vec::new();

    let termination = loop {
        if f <= config.xi {
            break Termination::ThresholdMet;
        }
        if step_sizes.len() >= config.max_iter {
            break Termination::MaxIter;
        }

        let a = DVector::from_vec(rank_scores(residual.as_slice(), config.score)?);
        let g = phi.tr_mul(&a);
        let v = descent_from_gradient(&g, &s, lambda);
        let line = |i: usize, sign: f64| {
            CoordinateLine::new(
                residual.as_slice(),
                phi.column(i).iter().copied(),
                s[i],
                sign,
                lambda,
                l1 - s[i].abs(),
                config.score,
                &sorted_scores,
            )
        };

        let mut step = match select_direction(&v) {
            Some((i, sign)) => Some((i, sign, line(i, sign).minimize(config.line_search_tol)?)),
            None => None,
        };
        if step.is_none_or(|(_, _, t)| t < config.stall_tol) {
            // Near the tie set the midrank gradient is only one element of
            // the subdifferential, and the selected coordinate may not descend
            // or may only zig-zag along a ridge. Fall back to the exact
            // one-sided slopes and take the steepest coordinate that still
            // yields a real step.
            step = None;
            let mut descending = Vec::new();
            for i in 0..problem.n() {
                for sign in [1.0, -1.0] {
                    let slope = line(i, sign).right_slope(0.0)?;
                    if slope < 0.0 {
                        descending.push((slope, i, sign));
                    }
                }
            }
            descending.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (_, i, sign) in descending {
                let mut candidate = line(i, sign);
                let t = candidate.minimize(config.line_search_tol)?;
                if t >= config.stall_tol && f - candidate.value(t)? >= FALLBACK_MIN_DECREASE * f {
                    step = Some((i, sign, t));
                    break;
                }
            }
        }
        let Some((i, sign, t)) = step else {
            break Termination::Stalled;
        };

        s[i] += t * sign;
        if step_sizes.len() % RESIDUAL_REFRESH == RESIDUAL_REFRESH - 1 {
            residual = problem.observation() - phi * &s;
        } else {
            residual.axpy(-t * sign, &phi.column(i), 1.0);
        }
        l1 = s.lp_norm(1);
        f = rank_pseudo_norm(residual.as_slice(), config.score)? + lambda * l1;

        chosen_indices.push(i);
        step_sizes.push(t);
        objective_trace.push(f);
    };

    log::debug!(
        "npsr finished after {} iterations ({termination}), f = {f:.6e}",
        step_sizes.len()
    );
    Ok(SolveResult {
        estimate: s,
        objective_trace,
        chosen_indices,
        step_sizes,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dictionary, NoiseModel};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(m: usize, n: usize, seed: u64) -> ProblemInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let r = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
        ProblemInstance::new(Dictionary::new(phi).unwrap(), r).unwrap()
    }

    #[test]
    fn objective_at_zero_is_pseudo_norm() {
        let p = random_problem(5, 8, 1);
        let cfg = NpsrConfig::new(0.3);
        let f = objective(&p, &DVector::zeros(8), &cfg).unwrap();
        let expected =
            rank_pseudo_norm(p.observation().as_slice(), ScoreFunction::Wilcoxon).unwrap();
        assert_eq!(f, expected);
    }

    #[test]
    fn objective_of_exact_fit_is_penalty() {
        let phi = DMatrix::from_row_slice(
            3,
            4,
            &[1.0, 0.0, 2.0, -1.0, 0.5, 1.0, 0.0, 0.0, -1.0, 0.0, 1.0, 3.0],
        );
        let s = DVector::from_vec(vec![1.0, 0.0, -2.0, 0.5]);
        let r = &phi * &s;
        let p = ProblemInstance::new(Dictionary::new(phi).unwrap(), r).unwrap();
        let cfg = NpsrConfig::new(0.7);
        assert_abs_diff_eq!(objective(&p, &s, &cfg).unwrap(), 0.7 * 3.5, epsilon = 1e-12);
    }

    #[test]
    fn objective_matches_composition() {
        let p = random_problem(5, 8, 2);
        let s = DVector::from_vec(vec![0.0, 1.0, -0.5, 0.0, 0.0, 2.0, 0.0, 0.1]);
        for score in [ScoreFunction::Wilcoxon, ScoreFunction::Sign] {
            let cfg = NpsrConfig::new(0.25).score(score);
            let rho: Vec<f64> = (0..5)
                .map(|j| {
                    p.observation()[j]
                        - (0..8)
                            .map(|k| p.dictionary().matrix()[(j, k)] * s[k])
                            .sum::<f64>()
                })
                .collect();
            let ranks = crate::scores::ranks_midrank(&rho).unwrap();
            let norm: f64 = ranks
                .ranks()
                .iter()
                .zip(&rho)
                .map(|(r, x)| score.phi(r / 6.0) * x)
                .sum();
            let expected = norm + 0.25 * s.iter().map(|x| x.abs()).sum::<f64>();
            assert_abs_diff_eq!(objective(&p, &s, &cfg).unwrap(), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn objective_dimension_mismatch() {
        let p = random_problem(5, 8, 3);
        assert!(matches!(
            objective(&p, &DVector::zeros(7), &NpsrConfig::new(1.0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn residual_scores() {
        let phi = DMatrix::from_row_slice(3, 4, &[0.0; 12]);
        let p = ProblemInstance::new(
            Dictionary::new(phi).unwrap(),
            DVector::from_vec(vec![3.0, 1.0, 2.0]),
        )
        .unwrap();
        let a = score_of_residual(&p, &DVector::zeros(4), ScoreFunction::Wilcoxon).unwrap();
        let h = 3f64.sqrt() / 2.0;
        assert_abs_diff_eq!(a[0], h, epsilon = 1e-15);
        assert_abs_diff_eq!(a[1], -h, epsilon = 1e-15);
        assert_eq!(a[2], 0.0);

        let p = ProblemInstance::new(
            Dictionary::new(DMatrix::zeros(4, 5)).unwrap(),
            DVector::from_element(4, 2.5),
        )
        .unwrap();
        for score in [ScoreFunction::Wilcoxon, ScoreFunction::Sign] {
            let a = score_of_residual(&p, &DVector::zeros(5), score).unwrap();
            assert!(a.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn residual_scores_are_permutation_equivariant() {
        let p = random_problem(6, 4, 4);
        let s = DVector::from_vec(vec![0.3, 0.0, -1.0, 0.0]);
        let a = score_of_residual(&p, &s, ScoreFunction::Wilcoxon).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let phi = p.dictionary().matrix();
        let phi_p = DMatrix::from_fn(6, 4, |j, k| phi[(perm[j], k)]);
        let r_p = DVector::from_fn(6, |j, _| p.observation()[perm[j]]);
        let q = ProblemInstance::new(Dictionary::new(phi_p).unwrap(), r_p).unwrap();
        let b = score_of_residual(&q, &s, ScoreFunction::Wilcoxon).unwrap();
        for j in 0..6 {
            assert_eq!(b[j], a[perm[j]]);
        }
    }

    #[test]
    fn subgradient_branches() {
        let u = l1_subgradient(
            &DVector::from_vec(vec![2.0, -3.0]),
            &DVector::from_vec(vec![9.0, 9.0]),
            1.0,
        )
        .unwrap();
        assert_eq!(u.as_slice(), &[1.0, -1.0]);

        let s0 = DVector::from_vec(vec![0.0]);
        let u = l1_subgradient(&s0, &DVector::from_vec(vec![0.4]), 1.0).unwrap();
        assert_abs_diff_eq!(u[0], 0.4, epsilon = 1e-15);
        let v = descent_from_gradient(&DVector::from_vec(vec![0.4]), &s0, 1.0);
        assert_eq!(v[0], 0.0);

        let u = l1_subgradient(&s0, &DVector::from_vec(vec![2.5]), 1.0).unwrap();
        assert_eq!(u[0], 1.0);
        let v = descent_from_gradient(&DVector::from_vec(vec![2.5]), &s0, 1.0);
        assert_abs_diff_eq!(v[0], 1.5, epsilon = 1e-15);

        assert!(l1_subgradient(&s0, &DVector::zeros(2), 1.0).is_err());
    }

    #[test]
    fn direction_selection() {
        assert_eq!(
            select_direction(&DVector::from_vec(vec![0.1, -0.9, 0.3])),
            Some((1, -1.0))
        );
        assert_eq!(
            select_direction(&DVector::from_vec(vec![0.5, -0.5])),
            Some((0, 1.0))
        );
        assert_eq!(select_direction(&DVector::zeros(3)), None);
    }

    #[test]
    fn constant_observation_has_zero_descent() {
        let p = ProblemInstance::new(
            Dictionary::new(DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 - 5.0)).unwrap(),
            DVector::from_element(4, 1.7),
        )
        .unwrap();
        let v = descent_vector(&p, &DVector::zeros(3), &NpsrConfig::new(0.5)).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
        let result = solve(&p, &NpsrConfig::new(0.5)).unwrap();
        assert_eq!(result.termination, Termination::ThresholdMet);
        assert_eq!(result.iterations(), 0);
    }

    #[test]
    fn single_measurement_is_degenerate() {
        // with M = 1 the lone residual always has score φ(1/2) = 0
        let p = ProblemInstance::new(
            Dictionary::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap(),
            DVector::from_vec(vec![3.0]),
        )
        .unwrap();
        let cfg = NpsrConfig::new(1.0);
        let v = descent_vector(&p, &DVector::zeros(2), &cfg).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
        let v = descent_vector(&p, &DVector::from_vec(vec![2.0, 0.0]), &cfg).unwrap();
        assert_eq!(v.as_slice(), &[-1.0, 0.0]);
        assert!(matches!(solve(&p, &cfg), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn zero_observation_returns_immediately() {
        let p = ProblemInstance::new(
            Dictionary::new(DMatrix::from_fn(5, 8, |i, j| ((i + 2 * j) % 5) as f64)).unwrap(),
            DVector::zeros(5),
        )
        .unwrap();
        let result = solve(&p, &NpsrConfig::new(0.1)).unwrap();
        assert_eq!(result.termination, Termination::ThresholdMet);
        assert_eq!(result.iterations(), 0);
        assert_eq!(result.estimate, DVector::zeros(8));
        assert_eq!(result.objective_trace, vec![0.0]);
    }

    #[test]
    fn line_search_returns_zero_without_descent() {
        let p = random_problem(6, 3, 5);
        let s = DVector::zeros(3);
        // a huge λ makes every move uphill
        let cfg = NpsrConfig::new(1e6);
        for i in 0..3 {
            for sign in [-1.0, 1.0] {
                assert_eq!(exact_line_search(&p, &s, i, sign, &cfg).unwrap(), 0.0);
            }
        }
        assert!(exact_line_search(&p, &s, 3, 1.0, &cfg).is_err());
        assert!(exact_line_search(&p, &s, 0, 0.5, &cfg).is_err());
    }

    #[test]
    fn line_search_recovers_single_atom() {
        let phi = DMatrix::from_row_slice(
            4,
            3,
            &[
                0.5, -1.0, 0.2, -0.3, 0.4, 1.0, 1.2, 0.1, -0.7, 0.8, 0.6, 0.3,
            ],
        );
        let c = 2.75;
        let r = phi.column(1) * c;
        let p = ProblemInstance::new(Dictionary::new(phi).unwrap(), r).unwrap();
        let cfg = NpsrConfig::new(1e-9);
        let t = exact_line_search(&p, &DVector::zeros(3), 1, 1.0, &cfg).unwrap();
        assert_abs_diff_eq!(t, c, epsilon = 1e-9);
    }

    #[test]
    fn line_search_can_return_coordinate_to_zero() {
        // the data say nothing about atom 0, so the optimal move from s₀ = 1.3
        // lands exactly on the l1 kink
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, -1.0, 1.0, 0.5]);
        let r = DVector::from_vec(vec![1.3 + 2.0, 1.3 - 1.0, 1.3 + 0.5]);
        let p = ProblemInstance::new(Dictionary::new(phi).unwrap(), r).unwrap();
        let s = DVector::from_vec(vec![1.3, 1.0]);
        let t = exact_line_search(&p, &s, 0, -1.0, &NpsrConfig::new(0.5)).unwrap();
        assert_eq!(1.3 - t, 0.0);
    }

    #[test]
    fn solve_descends_monotonically() {
        let p = ProblemInstance::generate(
            30,
            60,
            3,
            Some(NoiseModel::DoubleExponential { scale: 0.05 }),
            17,
        )
        .unwrap();
        let cfg = NpsrConfig::for_problem(&p, ScoreFunction::Wilcoxon).unwrap();
        let result = solve(&p, &cfg).unwrap();
        assert!(result.iterations() > 0);
        for w in result.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} > {}", w[1], w[0]);
        }
        assert!(result.step_sizes.iter().all(|t| *t >= 0.0));
        assert_eq!(result.chosen_indices.len(), result.iterations());
        assert_eq!(result.objective_trace.len(), result.iterations() + 1);
        let f = objective(&p, &result.estimate, &cfg).unwrap();
        assert_abs_diff_eq!(f, result.final_objective(), epsilon = 1e-9);
    }

    #[test]
    fn solve_respects_max_iter() {
        let p = ProblemInstance::generate(20, 40, 4, Some(NoiseModel::Gaussian { sigma: 0.1 }), 3)
            .unwrap();
        let cfg = NpsrConfig::for_problem(&p, ScoreFunction::Sign)
            .unwrap()
            .max_iter(3);
        let result = solve(&p, &cfg).unwrap();
        assert!(result.iterations() <= 3);
    }

    #[test]
    fn config_validation() {
        assert!(NpsrConfig::new(0.0).validate().is_err());
        assert!(NpsrConfig::new(f64::NAN).validate().is_err());
        assert!(NpsrConfig::new(1.0).xi(-1.0).validate().is_err());
        assert!(NpsrConfig::new(1.0).max_iter(0).validate().is_err());
        assert!(NpsrConfig::new(1.0).validate().is_ok());
    }
}
