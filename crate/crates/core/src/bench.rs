//! Monte-Carlo harness: sweep noise levels, run every solver on identical
//! instances, and aggregate mean reconstruction error.
//!
//! Experiments are described by a plain-text key-value spec (see
//! [`ExperimentSpec::parse`]) and produce one [`TrialRecord`] per
//! (solver, noise level, trial). Each trial draws a fresh dictionary, signal
//! and noise vector from a child seed derived from
//! `(master_seed, level, trial)`, so the record set does not depend on the
//! order in which trials are executed.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::baselines::{lasso_ista, omp, LassoConfig, OmpConfig};
use crate::error::{Error, Result};
use crate::model::{reconstruction_error, snr_db, sub_seed, NoiseModel, ProblemInstance};
use crate::npsr::{self, NpsrConfig};
use crate::scores::ScoreFunction;

pub const RESULTS_HEADER: [&str; 8] = [
    "solver_id",
    "noise_level",
    "snr_db",
    "rel_error",
    "iterations",
    "wall_time_s",
    "trial_index",
    "seed",
];

pub const SUMMARY_HEADER: [&str; 7] = [
    "solver_id",
    "noise_level",
    "mean_snr_db",
    "mean_rel_error",
    "std_rel_error",
    "trials",
    "failed",
];

/// Default NPSR `λ` as a multiple of [`npsr::pivotal_lambda`].
pub const DEFAULT_NPSR_PIVOTAL: f64 = 0.5;
const PIVOTAL_DRAWS: usize = 64;
const PIVOTAL_STREAM: u64 = 0x0070_6976_6f74_616c;

/// Contamination probability and variance ratio of the impulsive mixture.
pub const DEFAULT_MIXTURE_EPSILON: f64 = 0.01;
pub const DEFAULT_MIXTURE_KAPPA: f64 = 1000.0;

/// Formats a float with 9 significant digits.
pub fn format_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.8e}")
    } else {
        x.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    Gaussian,
    Laplace,
    Mixture { epsilon: f64, kappa: f64 },
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Laplace => "laplace",
            NoiseKind::Mixture { .. } => "mixture",
        }
    }

    /// The noise model of this kind whose per-sample variance is `variance`.
    pub fn model_for_variance(&self, variance: f64) -> Result<NoiseModel> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidConfiguration(format!(
                "noise level (variance) must be positive, got {variance}"
            )));
        }
        let model = match *self {
            NoiseKind::Gaussian => NoiseModel::Gaussian {
                sigma: variance.sqrt(),
            },
            NoiseKind::Laplace => NoiseModel::DoubleExponential {
                scale: (variance / 2.0).sqrt(),
            },
            NoiseKind::Mixture { epsilon, kappa } => NoiseModel::ImpulsiveMixture {
                sigma: (variance / ((1.0 - epsilon) + epsilon * kappa)).sqrt(),
                epsilon,
                kappa,
            },
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SolverKind {
    Npsr,
    Omp,
    Lasso,
    /// Lasso with a small `λ`, standing in for basis pursuit.
    Bp,
}

impl SolverKind {
    pub const ALL: [SolverKind; 4] = [
        SolverKind::Npsr,
        SolverKind::Omp,
        SolverKind::Lasso,
        SolverKind::Bp,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            SolverKind::Npsr => "npsr",
            SolverKind::Omp => "omp",
            SolverKind::Lasso => "lasso",
            SolverKind::Bp => "bp",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.id() == s.trim())
            .ok_or_else(|| Error::InvalidValue(format!("unknown solver `{}`", s.trim())))
    }
}

pub fn parse_solver_list(s: &str) -> Result<Vec<SolverKind>> {
    let mut solvers: Vec<SolverKind> = s
        .split(',')
        .filter(|x| !x.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    solvers.sort();
    solvers.dedup();
    if solvers.is_empty() {
        return Err(Error::InvalidValue("solver list is empty".into()));
    }
    Ok(solvers)
}

/// How a solver's `λ` is chosen for each instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaRule {
    Absolute(f64),
    /// Fraction of the smallest `λ` for which the zero vector is optimal.
    Ratio(f64),
    /// Multiple of [`npsr::pivotal_lambda`]; NPSR only.
    Pivotal(f64),
}

impl LambdaRule {
    fn resolve(
        &self,
        lambda_max: impl FnOnce() -> Result<f64>,
        pivotal: impl FnOnce() -> Result<f64>,
    ) -> Result<f64> {
        match *self {
            LambdaRule::Absolute(l) => Ok(l),
            LambdaRule::Ratio(ratio) => Ok(ratio * lambda_max()?),
            LambdaRule::Pivotal(c) => Ok(c * pivotal()?),
        }
    }

    fn validate(&self, solver: &str) -> Result<()> {
        let value = match *self {
            LambdaRule::Absolute(l) | LambdaRule::Ratio(l) | LambdaRule::Pivotal(l) => l,
        };
        if value > 0.0 && value.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfiguration(format!(
                "{solver} lambda must be positive"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpsrSettings {
    pub lambda: LambdaRule,
    pub score: ScoreFunction,
    pub max_iter: usize,
    /// `ξ` as a fraction of `‖r‖_φ`.
    pub xi_ratio: f64,
    pub line_search_tol: f64,
    pub stall_tol: f64,
}

impl Default for NpsrSettings {
    fn default() -> Self {
        Self {
            lambda: LambdaRule::Pivotal(DEFAULT_NPSR_PIVOTAL),
            score: ScoreFunction::Wilcoxon,
            max_iter: npsr::DEFAULT_MAX_ITER,
            xi_ratio: npsr::DEFAULT_XI_RATIO,
            line_search_tol: npsr::DEFAULT_LINE_SEARCH_TOL,
            stall_tol: npsr::DEFAULT_STALL_TOL,
        }
    }
}

impl NpsrSettings {
    pub fn config_for(&self, problem: &ProblemInstance) -> Result<NpsrConfig> {
        let lambda = self.lambda.resolve(
            || npsr::lambda_max(problem, self.score),
            || {
                npsr::pivotal_lambda(
                    problem.dictionary(),
                    self.score,
                    PIVOTAL_DRAWS,
                    sub_seed(problem.seed(), PIVOTAL_STREAM),
                )
            },
        )?;
        let norm = crate::scores::rank_pseudo_norm(problem.observation().as_slice(), self.score)?;
        Ok(NpsrConfig {
            lambda,
            xi: self.xi_ratio * norm,
            max_iter: self.max_iter,
            score: self.score,
            line_search_tol: self.line_search_tol,
            stall_tol: self.stall_tol,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoSettings {
    pub lambda: LambdaRule,
    pub max_iter: usize,
    pub tol: f64,
}

impl LassoSettings {
    fn lasso() -> Self {
        Self {
            lambda: LambdaRule::Ratio(0.1),
            max_iter: 10_000,
            tol: 1e-7,
        }
    }

    fn basis_pursuit() -> Self {
        Self {
            lambda: LambdaRule::Ratio(1e-3),
            max_iter: 20_000,
            tol: 1e-7,
        }
    }

    pub fn config_for(&self, problem: &ProblemInstance) -> Result<LassoConfig> {
        let lambda = self.lambda.resolve(
            || {
                Ok(problem
                    .dictionary()
                    .apply_transpose(problem.observation())
                    .amax())
            },
            || {
                Err(Error::InvalidConfiguration(
                    "the pivotal lambda rule applies to npsr only".into(),
                ))
            },
        )?;
        Ok(LassoConfig {
            lambda,
            max_iter: self.max_iter,
            tol: self.tol,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OmpSettings {
    /// Defaults to the true sparsity `K`.
    pub max_atoms: Option<usize>,
    pub residual_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// `M=100, N=300, K=10`, 50 trials.
    Desk,
    /// `M=300, N=1000, K=20`, 1000 trials.
    Paper,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::InvalidValue(format!("unknown scale `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub noise_kind: NoiseKind,
    /// Noise variances; `None` selects [`default_noise_levels`].
    pub noise_levels: Option<Vec<f64>>,
    pub trials: usize,
    pub master_seed: u64,
    pub solvers: Vec<SolverKind>,
    pub npsr: NpsrSettings,
    pub lasso: LassoSettings,
    pub bp: LassoSettings,
    pub omp: OmpSettings,
}

/// Ten variances, log-spaced so that the expected SNR runs from −5 dB to
/// +25 dB for a `K`-sparse, unit-variance signal of length `N`.
pub fn default_noise_levels(n: usize, k: usize) -> Vec<f64> {
    noise_levels_for_snr(
        n,
        k,
        &(0..10)
            .map(|i| -5.0 + 30.0 * i as f64 / 9.0)
            .collect::<Vec<_>>(),
    )
}

/// Noise variances whose expected SNR equals each of `snr_db`.
///
/// With `E‖s‖² = K`, `SNR = (K/N) / σ²`.
pub fn noise_levels_for_snr(n: usize, k: usize, snr_db: &[f64]) -> Vec<f64> {
    let signal_power = k as f64 / n as f64;
    snr_db
        .iter()
        .map(|db| signal_power * 10f64.powf(-db / 10.0))
        .collect()
}

impl ExperimentSpec {
    pub fn preset(scale: Scale) -> Self {
        let (m, n, k, trials) = match scale {
            Scale::Desk => (100, 300, 10, 50),
            Scale::Paper => (300, 1000, 20, 1000),
        };
        Self {
            m,
            n,
            k,
            noise_kind: NoiseKind::Laplace,
            noise_levels: None,
            trials,
            master_seed: 0,
            solvers: vec![SolverKind::Npsr, SolverKind::Omp, SolverKind::Lasso],
            npsr: NpsrSettings::default(),
            lasso: LassoSettings::lasso(),
            bp: LassoSettings::basis_pursuit(),
            omp: OmpSettings::default(),
        }
    }

    pub fn desk() -> Self {
        Self::preset(Scale::Desk)
    }

    pub fn paper() -> Self {
        Self::preset(Scale::Paper)
    }

    pub fn levels(&self) -> Vec<f64> {
        self.noise_levels
            .clone()
            .unwrap_or_else(|| default_noise_levels(self.n, self.k))
    }

    pub fn record_count(&self) -> usize {
        self.solvers.len() * self.levels().len() * self.trials
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidConfiguration(msg));
        if self.m == 0 || self.m >= self.n {
            return invalid(format!("need 1 ≤ M < N, got M={}, N={}", self.m, self.n));
        }
        if self.k == 0 || 4 * self.k > self.n {
            return invalid(format!("need 1 ≤ K ≤ N/4, got K={}, N={}", self.k, self.n));
        }
        if self.trials == 0 {
            return invalid("trials must be ≥ 1".into());
        }
        if self.solvers.is_empty() {
            return invalid("no solvers selected".into());
        }
        let levels = self.levels();
        if levels.is_empty() {
            return invalid("noise level grid is empty".into());
        }
        for &level in &levels {
            self.noise_kind.model_for_variance(level)?;
        }
        self.npsr.lambda.validate("npsr")?;
        self.lasso.lambda.validate("lasso")?;
        self.bp.lambda.validate("bp")?;
        if self.npsr.max_iter == 0 || self.lasso.max_iter == 0 || self.bp.max_iter == 0 {
            return invalid("max_iter must be ≥ 1".into());
        }
        if self.npsr.xi_ratio.is_nan() || self.npsr.xi_ratio < 0.0 {
            return invalid("npsr.xi_ratio must be ≥ 0".into());
        }
        if !(self.npsr.line_search_tol > 0.0 && self.npsr.stall_tol > 0.0) {
            return invalid("npsr tolerances must be positive".into());
        }
        if !(self.lasso.tol > 0.0 && self.bp.tol > 0.0) {
            return invalid("lasso tolerances must be positive".into());
        }
        if self.omp.max_atoms == Some(0)
            || self.omp.residual_threshold.is_nan()
            || self.omp.residual_threshold < 0.0
        {
            return invalid("omp.max_atoms must be ≥ 1 and omp.residual_threshold ≥ 0".into());
        }
        Ok(())
    }

    /// Parses a spec file on top of the desk preset.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_base(text, Self::desk())
    }

    /// Parses `key = value` lines over `base`. Blank lines and `#` comments
    /// are ignored; unknown keys are errors.
    pub fn parse_with_base(text: &str, base: Self) -> Result<Self> {
        let mut spec = base;
        let mut epsilon = None;
        let mut kappa = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            let fail = |e: Error| Error::Parse {
                line: line_no,
                message: format!("{key}: {e}"),
            };
            match key {
                "noise.epsilon" => epsilon = Some(parse_value(value).map_err(fail)?),
                "noise.kappa" => kappa = Some(parse_value(value).map_err(fail)?),
                _ => spec.set(key, value).map_err(fail)?,
            }
        }
        if epsilon.is_some() || kappa.is_some() {
            match &mut spec.noise_kind {
                NoiseKind::Mixture {
                    epsilon: e,
                    kappa: k,
                } => {
                    *e = epsilon.unwrap_or(*e);
                    *k = kappa.unwrap_or(*k);
                }
                _ => {
                    return Err(Error::InvalidConfiguration(
                        "noise.epsilon / noise.kappa require noise_kind = mixture".into(),
                    ))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "m" => self.m = parse_value(value)?,
            "n" => self.n = parse_value(value)?,
            "k" => self.k = parse_value(value)?,
            "trials" => self.trials = parse_value(value)?,
            "master_seed" => self.master_seed = parse_value(value)?,
            "noise_kind" => {
                self.noise_kind = match value {
                    "gaussian" => NoiseKind::Gaussian,
                    "laplace" => NoiseKind::Laplace,
                    "mixture" => NoiseKind::Mixture {
                        epsilon: DEFAULT_MIXTURE_EPSILON,
                        kappa: DEFAULT_MIXTURE_KAPPA,
                    },
                    other => {
                        return Err(Error::InvalidValue(format!(
                            "noise_kind must be gaussian, laplace or mixture, got `{other}`"
                        )))
                    }
                }
            }
            "noise_levels" => {
                self.noise_levels = Some(
                    value
                        .split(',')
                        .map(|x| parse_value(x.trim()))
                        .collect::<Result<_>>()?,
                )
            }
            "solvers" => self.solvers = parse_solver_list(value)?,
            "npsr.lambda" => self.npsr.lambda = LambdaRule::Absolute(parse_value(value)?),
            "npsr.lambda_ratio" => self.npsr.lambda = LambdaRule::Ratio(parse_value(value)?),
            "npsr.lambda_pivotal" => self.npsr.lambda = LambdaRule::Pivotal(parse_value(value)?),
            "npsr.score" => self.npsr.score = value.parse()?,
            "npsr.max_iter" => self.npsr.max_iter = parse_value(value)?,
            "npsr.xi_ratio" => self.npsr.xi_ratio = parse_value(value)?,
            "npsr.line_search_tol" => self.npsr.line_search_tol = parse_value(value)?,
            "npsr.stall_tol" => self.npsr.stall_tol = parse_value(value)?,
            "lasso.lambda" => self.lasso.lambda = LambdaRule::Absolute(parse_value(value)?),
            "lasso.lambda_ratio" => self.lasso.lambda = LambdaRule::Ratio(parse_value(value)?),
            "lasso.max_iter" => self.lasso.max_iter = parse_value(value)?,
            "lasso.tol" => self.lasso.tol = parse_value(value)?,
            "bp.lambda" => self.bp.lambda = LambdaRule::Absolute(parse_value(value)?),
            "bp.lambda_ratio" => self.bp.lambda = LambdaRule::Ratio(parse_value(value)?),
            "bp.max_iter" => self.bp.max_iter = parse_value(value)?,
            "bp.tol" => self.bp.tol = parse_value(value)?,
            "omp.max_atoms" => self.omp.max_atoms = Some(parse_value(value)?),
            "omp.residual_threshold" => self.omp.residual_threshold = parse_value(value)?,
            other => return Err(Error::InvalidValue(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Renders the spec in the format accepted by [`ExperimentSpec::parse`].
    pub fn to_spec_text(&self) -> String {
        let mut out = String::new();
        let lambda = |out: &mut String, prefix: &str, rule: LambdaRule| match rule {
            LambdaRule::Absolute(l) => writeln!(out, "{prefix}.lambda = {l}"),
            LambdaRule::Ratio(r) => writeln!(out, "{prefix}.lambda_ratio = {r}"),
            LambdaRule::Pivotal(c) => writeln!(out, "{prefix}.lambda_pivotal = {c}"),
        };
        let levels: Vec<String> = self.levels().iter().map(|x| format!("{x:e}")).collect();
        let solvers: Vec<&str> = self.solvers.iter().map(SolverKind::id).collect();
        // writing to a String cannot fail
        let _ = (|| -> fmt::Result {
            writeln!(out, "m = {}", self.m)?;
            writeln!(out, "n = {}", self.n)?;
            writeln!(out, "k = {}", self.k)?;
            writeln!(out, "noise_kind = {}", self.noise_kind.name())?;
            if let NoiseKind::Mixture { epsilon, kappa } = self.noise_kind {
                writeln!(out, "noise.epsilon = {epsilon}")?;
                writeln!(out, "noise.kappa = {kappa}")?;
            }
            writeln!(out, "noise_levels = {}", levels.join(","))?;
            writeln!(out, "trials = {}", self.trials)?;
            writeln!(out, "master_seed = {}", self.master_seed)?;
            writeln!(out, "solvers = {}", solvers.join(","))?;
            lambda(&mut out, "npsr", self.npsr.lambda)?;
            writeln!(out, "npsr.score = {}", self.npsr.score)?;
            writeln!(out, "npsr.max_iter = {}", self.npsr.max_iter)?;
            writeln!(out, "npsr.xi_ratio = {}", self.npsr.xi_ratio)?;
            writeln!(out, "npsr.line_search_tol = {}", self.npsr.line_search_tol)?;
            writeln!(out, "npsr.stall_tol = {}", self.npsr.stall_tol)?;
            lambda(&mut out, "lasso", self.lasso.lambda)?;
            writeln!(out, "lasso.max_iter = {}", self.lasso.max_iter)?;
            writeln!(out, "lasso.tol = {}", self.lasso.tol)?;
            lambda(&mut out, "bp", self.bp.lambda)?;
            writeln!(out, "bp.max_iter = {}", self.bp.max_iter)?;
            writeln!(out, "bp.tol = {}", self.bp.tol)?;
            if let Some(atoms) = self.omp.max_atoms {
                writeln!(out, "omp.max_atoms = {atoms}")?;
            }
            writeln!(
                out,
                "omp.residual_threshold = {}",
                self.omp.residual_threshold
            )
        })();
        out
    }
}

fn parse_value<T: FromStr>(value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::InvalidValue(format!("`{value}`: {e}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub solver_id: String,
    /// Noise variance of this sweep point.
    pub noise_level: f64,
    pub snr_db: f64,
    /// `NaN` when the solver failed on this instance.
    pub rel_error: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub trial_index: usize,
    pub seed: u64,
}

impl TrialRecord {
    pub fn failed(&self) -> bool {
        self.rel_error.is_nan()
    }
}

/// Child seed of one (level, trial) cell; injective over the cells of an
/// experiment.
pub fn trial_seed(master_seed: u64, level_index: usize, trial_index: usize, trials: usize) -> u64 {
    sub_seed(master_seed, (level_index * trials + trial_index) as u64)
}

struct SolverOutput {
    estimate: nalgebra::DVector<f64>,
    iterations: usize,
}

fn run_solver(
    spec: &ExperimentSpec,
    solver: SolverKind,
    problem: &ProblemInstance,
) -> Result<SolverOutput> {
    match solver {
        SolverKind::Npsr => {
            let result = npsr::solve(problem, &spec.npsr.config_for(problem)?)?;
            Ok(SolverOutput {
                iterations: result.iterations(),
                estimate: result.estimate,
            })
        }
        SolverKind::Omp => {
            let config = OmpConfig {
                max_atoms: spec.omp.max_atoms.unwrap_or(spec.k),
                residual_threshold: spec.omp.residual_threshold,
            };
            let result = omp(problem, &config)?;
            Ok(SolverOutput {
                iterations: result.iterations(),
                estimate: result.estimate,
            })
        }
        SolverKind::Lasso | SolverKind::Bp => {
            let settings = if solver == SolverKind::Lasso {
                &spec.lasso
            } else {
                &spec.bp
            };
            let result = lasso_ista(problem, &settings.config_for(problem)?)?;
            Ok(SolverOutput {
                iterations: result.iterations(),
                estimate: result.estimate,
            })
        }
    }
}

/// Runs every solver on the instance of one (level, trial) cell.
pub fn run_trial(
    spec: &ExperimentSpec,
    level_index: usize,
    trial_index: usize,
) -> Result<Vec<TrialRecord>> {
    let levels = spec.levels();
    let noise_level = *levels
        .get(level_index)
        .ok_or_else(|| Error::InvalidInput(format!("level index {level_index} out of range")))?;
    let seed = trial_seed(spec.master_seed, level_index, trial_index, spec.trials);
    let model = spec.noise_kind.model_for_variance(noise_level)?;
    let problem = ProblemInstance::generate(spec.m, spec.n, spec.k, Some(model), seed)?;
    let truth = problem
        .truth()
        .expect("generated instances carry their truth");
    let snr = match snr_db(truth, problem.noise().expect("noise was requested")) {
        Ok(x) => x,
        Err(Error::DivisionByZero(_)) => f64::INFINITY,
        Err(e) => return Err(e),
    };

    let records = spec
        .solvers
        .iter()
        .map(|&solver| {
            let start = Instant::now();
            let outcome = run_solver(spec, solver, &problem)
                .and_then(|out| Ok((reconstruction_error(truth, &out.estimate)?, out.iterations)));
            let wall_time_s = start.elapsed().as_secs_f64();
            let (rel_error, iterations) = outcome.unwrap_or_else(|e| {
                log::warn!(
                    "{solver} failed on level {level_index}, trial {trial_index} (seed {seed}): {e}"
                );
                (f64::NAN, 0)
            });
            TrialRecord {
                solver_id: solver.id().to_string(),
                noise_level,
                snr_db: snr,
                rel_error,
                iterations,
                wall_time_s,
                trial_index,
                seed,
            }
        })
        .collect();
    Ok(records)
}

/// Runs the full sweep and returns canonically sorted records.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<TrialRecord>> {
    spec.validate()?;
    let levels = spec.levels().len();
    let cells: Vec<(usize, usize)> = (0..levels)
        .flat_map(|l| (0..spec.trials).map(move |t| (l, t)))
        .collect();
    let nested: Vec<Vec<TrialRecord>> = cells
        .par_iter()
        .map(|&(l, t)| run_trial(spec, l, t))
        .collect::<Result<_>>()?;
    let mut records: Vec<TrialRecord> = nested.into_iter().flatten().collect();
    canonical_sort(&mut records);
    Ok(records)
}

/// Orders records by `(solver_id, noise_level, trial_index)`.
pub fn canonical_sort(records: &mut [TrialRecord]) {
    records.sort_by(|a, b| {
        a.solver_id
            .cmp(&b.solver_id)
            .then(a.noise_level.total_cmp(&b.noise_level))
            .then(a.trial_index.cmp(&b.trial_index))
    });
}

/// Whether measured wall times are written or replaced by zero.
///
/// Zeroed timing makes the CSV a pure function of the spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timing {
    Measured,
    Zeroed,
}

pub fn write_records<W: Write>(records: &[TrialRecord], writer: W, timing: Timing) -> Result<()> {
    let mut sorted = records.to_vec();
    canonical_sort(&mut sorted);
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(RESULTS_HEADER)?;
    for r in &sorted {
        let wall = match timing {
            Timing::Measured => r.wall_time_s,
            Timing::Zeroed => 0.0,
        };
        csv.write_record([
            r.solver_id.clone(),
            format_float(r.noise_level),
            format_float(r.snr_db),
            format_float(r.rel_error),
            r.iterations.to_string(),
            format_float(wall),
            r.trial_index.to_string(),
            r.seed.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    for (i, want) in expected.iter().enumerate() {
        match found.get(i) {
            Some(got) if got == *want => {}
            Some(got) => {
                return Err(Error::Schema(format!(
                    "column {} should be `{want}`, found `{got}`",
                    i + 1
                )))
            }
            None => return Err(Error::Schema(format!("missing column `{want}`"))),
        }
    }
    if found.len() > expected.len() {
        return Err(Error::Schema(format!(
            "unexpected extra column `{}`",
            &found[expected.len()]
        )));
    }
    Ok(())
}

pub fn read_records<R: Read>(reader: R) -> Result<Vec<TrialRecord>> {
    let mut csv = csv::Reader::from_reader(reader);
    check_header(csv.headers()?, &RESULTS_HEADER)?;
    let mut records = Vec::new();
    for (row, rec) in csv.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let field = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing `{}`", RESULTS_HEADER[i]),
            })
        };
        let num = |i: usize| -> Result<f64> {
            parse_value(field(i)?).map_err(|e| Error::Parse {
                line,
                message: format!("{}: {e}", RESULTS_HEADER[i]),
            })
        };
        let int = |i: usize| -> Result<u64> {
            parse_value(field(i)?).map_err(|e| Error::Parse {
                line,
                message: format!("{}: {e}", RESULTS_HEADER[i]),
            })
        };
        records.push(TrialRecord {
            solver_id: field(0)?.to_string(),
            noise_level: num(1)?,
            snr_db: num(2)?,
            rel_error: num(3)?,
            iterations: int(4)? as usize,
            wall_time_s: num(5)?,
            trial_index: int(6)? as usize,
            seed: int(7)?,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub solver_id: String,
    pub noise_level: f64,
    pub mean_snr_db: f64,
    pub mean_rel_error: f64,
    /// Sample standard deviation; zero for a single trial.
    pub std_rel_error: f64,
    /// Records that entered the means.
    pub trials: usize,
    /// Records carrying the failure sentinel.
    pub failed: usize,
}

/// Groups records by `(solver_id, noise_level)` and averages them.
///
/// Members of a group are accumulated in `trial_index` order, so the output
/// does not depend on the order of `records`.
pub fn summarize(records: &[TrialRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no records to summarize".into()));
    }
    let mut groups: BTreeMap<(String, u64), Vec<&TrialRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.solver_id.clone(), r.noise_level.to_bits()))
            .or_default()
            .push(r);
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((solver_id, level_bits), mut members)| {
            members.sort_by(|a, b| {
                a.trial_index
                    .cmp(&b.trial_index)
                    .then(a.seed.cmp(&b.seed))
                    .then(a.rel_error.total_cmp(&b.rel_error))
            });
            let ok: Vec<&TrialRecord> = members.iter().copied().filter(|r| !r.failed()).collect();
            let count = ok.len();
            let mean = |f: fn(&TrialRecord) -> f64| {
                if count == 0 {
                    f64::NAN
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / count as f64
                }
            };
            let mean_rel_error = mean(|r| r.rel_error);
            let std_rel_error = if count < 2 {
                0.0
            } else {
                (ok.iter()
                    .map(|r| (r.rel_error - mean_rel_error).powi(2))
                    .sum::<f64>()
                    / (count - 1) as f64)
                    .sqrt()
            };
            SummaryRow {
                solver_id,
                noise_level: f64::from_bits(level_bits),
                mean_snr_db: mean(|r| r.snr_db),
                mean_rel_error,
                std_rel_error,
                trials: count,
                failed: members.len() - count,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.solver_id
            .cmp(&b.solver_id)
            .then(a.noise_level.total_cmp(&b.noise_level))
    });
    Ok(rows)
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(SUMMARY_HEADER)?;
    for r in rows {
        csv.write_record([
            r.solver_id.clone(),
            format_float(r.noise_level),
            format!("{:e}", r.mean_snr_db),
            format!("{:e}", r.mean_rel_error),
            format!("{:e}", r.std_rel_error),
            r.trials.to_string(),
            r.failed.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}
