//! Synthetic sparse-recovery problems, noise models and evaluation metrics.
//!
//! Every generator is a pure function of its parameters and a `u64` seed.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::error::{check_len, Error, Result};

/// Measurement matrix `Φ` with `M` rows (measurements) and `N` columns (atoms).
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    matrix: DMatrix<f64>,
}

impl Dictionary {
    /// Wraps a matrix; requires finite entries and at least one row and column.
    ///
    /// The `M < N` regime is only enforced by [`gen_dictionary`]; square and
    /// tall dictionaries are accepted here so solvers can be tested on them.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::InvalidDimension(
                "dictionary must be non-empty".into(),
            ));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidValue(
                "dictionary has non-finite entries".into(),
            ));
        }
        Ok(Self { matrix })
    }

    pub fn from_row_slice(m: usize, n: usize, data: &[f64]) -> Result<Self> {
        check_len("dictionary data", m * n, data.len())?;
        Self::new(DMatrix::from_row_slice(m, n, data))
    }

    pub fn m(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `Φ s`
    pub fn apply(&self, s: &DVector<f64>) -> DVector<f64> {
        &self.matrix * s
    }

    /// `Φᵀ y`
    pub fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
        self.matrix.tr_mul(y)
    }
}

/// Draws an `M × N` dictionary with i.i.d. `N(0, 1/M)` entries.
pub fn gen_dictionary(m: usize, n: usize, seed: u64) -> Result<Dictionary> {
    if m == 0 || m >= n {
        return Err(Error::InvalidConfiguration(format!(
            "dictionary needs 1 ≤ M < N, got M={m}, N={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (m as f64).sqrt()).expect("positive std-dev");
    Dictionary::new(DMatrix::from_fn(m, n, |_, _| normal.sample(&mut rng)))
}

/// A length-`N` signal with `K` nonzero coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSignal {
    values: DVector<f64>,
    support: Vec<usize>,
}

impl SparseSignal {
    /// Builds a signal from dense values; the support is the set of nonzeros.
    pub fn from_dense(values: DVector<f64>) -> Self {
        let support = values
            .iter()
            .enumerate()
            .filter(|(_, x)| **x != 0.0)
            .map(|(i, _)| i)
            .collect();
        Self { values, support }
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    /// Sorted indices of the nonzero coefficients.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn sparsity(&self) -> usize {
        self.support.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Draws a `K`-sparse signal: uniform support without replacement, `N(0, 1)` values.
pub fn gen_signal(n: usize, k: usize, seed: u64) -> Result<SparseSignal> {
    if k == 0 || 4 * k > n {
        return Err(Error::InvalidConfiguration(format!(
            "signal needs 1 ≤ K ≤ N/4, got N={n}, K={k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = index::sample(&mut rng, n, k).into_vec();
    support.sort_unstable();

    let mut values = DVector::zeros(n);
    for &i in &support {
        // a standard normal draw is exactly zero with probability zero, but
        // the support invariant must hold regardless
        let mut x: f64 = rng.sample(rand_distr::StandardNormal);
        while x == 0.0 {
            x = rng.sample(rand_distr::StandardNormal);
        }
        values[i] = x;
    }
    Ok(SparseSignal { values, support })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    Gaussian {
        sigma: f64,
    },
    /// Laplace(0, b), variance `2b²`.
    DoubleExponential {
        scale: f64,
    },
    /// `N(0, σ²)` with probability `1 − ε`, `N(0, κσ²)` with probability `ε`.
    ImpulsiveMixture {
        sigma: f64,
        epsilon: f64,
        kappa: f64,
    },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseModel::Gaussian { sigma } => sigma > 0.0 && sigma.is_finite(),
            NoiseModel::DoubleExponential { scale } => scale > 0.0 && scale.is_finite(),
            NoiseModel::ImpulsiveMixture {
                sigma,
                epsilon,
                kappa,
            } => {
                sigma > 0.0
                    && sigma.is_finite()
                    && epsilon > 0.0
                    && epsilon < 1.0
                    && kappa >= 1.0
                    && kappa.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfiguration(format!(
                "invalid noise parameters: {self}"
            )))
        }
    }

    /// Variance of a single noise sample.
    pub fn variance(&self) -> f64 {
        match *self {
            NoiseModel::Gaussian { sigma } => sigma * sigma,
            NoiseModel::DoubleExponential { scale } => 2.0 * scale * scale,
            NoiseModel::ImpulsiveMixture {
                sigma,
                epsilon,
                kappa,
            } => ((1.0 - epsilon) + epsilon * kappa) * sigma * sigma,
        }
    }
}

impl fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseModel::Gaussian { sigma } => write!(f, "gaussian(σ={sigma})"),
            NoiseModel::DoubleExponential { scale } => write!(f, "laplace(b={scale})"),
            NoiseModel::ImpulsiveMixture {
                sigma,
                epsilon,
                kappa,
            } => write!(f, "mixture(σ={sigma}, ε={epsilon}, κ={kappa})"),
        }
    }
}

/// Draws `M` i.i.d. noise samples.
pub fn sample_noise(model: NoiseModel, m: usize, seed: u64) -> Result<DVector<f64>> {
    model.validate()?;
    if m == 0 {
        return Err(Error::InvalidDimension("noise length must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = match model {
        NoiseModel::Gaussian { sigma } => {
            let normal = Normal::new(0.0, sigma).expect("validated");
            DVector::from_fn(m, |_, _| normal.sample(&mut rng))
        }
        NoiseModel::DoubleExponential { scale } => {
            // difference of two i.i.d. exponentials with mean b is Laplace(0, b)
            let exp = Exp::new(1.0 / scale).expect("validated");
            DVector::from_fn(m, |_, _| exp.sample(&mut rng) - exp.sample(&mut rng))
        }
        NoiseModel::ImpulsiveMixture {
            sigma,
            epsilon,
            kappa,
        } => {
            let background = Normal::new(0.0, sigma).expect("validated");
            let impulse = Normal::new(0.0, sigma * kappa.sqrt()).expect("validated");
            DVector::from_fn(m, |_, _| {
                if rng.random_bool(epsilon) {
                    impulse.sample(&mut rng)
                } else {
                    background.sample(&mut rng)
                }
            })
        }
    };
    Ok(noise)
}

/// Observation `r` of an unknown signal through a dictionary, optionally
/// carrying the ground truth and noise that produced it.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    dictionary: Dictionary,
    observation: DVector<f64>,
    truth: Option<SparseSignal>,
    noise: Option<DVector<f64>>,
    seed: u64,
}

impl ProblemInstance {
    pub fn new(dictionary: Dictionary, observation: DVector<f64>) -> Result<Self> {
        check_len("observation", dictionary.m(), observation.len())?;
        if observation.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidValue(
                "observation has non-finite entries".into(),
            ));
        }
        Ok(Self {
            dictionary,
            observation,
            truth: None,
            noise: None,
            seed: 0,
        })
    }

    /// Forms `r = Φ s + n` (noiseless when `noise` is `None`).
    pub fn synthesize(
        dictionary: Dictionary,
        truth: SparseSignal,
        noise: Option<DVector<f64>>,
        seed: u64,
    ) -> Result<Self> {
        check_len("signal", dictionary.n(), truth.len())?;
        let mut observation = dictionary.apply(truth.values());
        if let Some(n) = &noise {
            check_len("noise", dictionary.m(), n.len())?;
            observation += n;
        }
        Ok(Self {
            dictionary,
            observation,
            truth: Some(truth),
            noise,
            seed,
        })
    }

    /// Draws `Φ`, `s` and (optionally) `n` from sub-seeds of `seed`.
    pub fn generate(
        m: usize,
        n: usize,
        k: usize,
        noise: Option<NoiseModel>,
        seed: u64,
    ) -> Result<Self> {
        let dictionary = gen_dictionary(m, n, sub_seed(seed, 0))?;
        let truth = gen_signal(n, k, sub_seed(seed, 1))?;
        let noise = noise
            .map(|model| sample_noise(model, m, sub_seed(seed, 2)))
            .transpose()?;
        Self::synthesize(dictionary, truth, noise, seed)
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dictionary
    }

    pub fn observation(&self) -> &DVector<f64> {
        &self.observation
    }

    pub fn truth(&self) -> Option<&SparseSignal> {
        self.truth.as_ref()
    }

    pub fn noise(&self) -> Option<&DVector<f64>> {
        self.noise.as_ref()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn m(&self) -> usize {
        self.dictionary.m()
    }

    pub fn n(&self) -> usize {
        self.dictionary.n()
    }

    /// `r − Φ s`
    pub fn residual(&self, s: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("coefficient vector", self.n(), s.len())?;
        Ok(&self.observation - self.dictionary.apply(s))
    }
}

/// SplitMix64 finalizer; a bijection on `u64`.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a parent seed.
///
/// Injective in `stream` for a fixed parent.
pub fn sub_seed(parent: u64, stream: u64) -> u64 {
    mix64(
        parent
            .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
            .wrapping_add(0x9e37_79b9_7f4a_7c15),
    )
}

/// Signal-to-noise ratio `(‖s‖²/N) / (‖n‖²/M)` as a plain ratio.
pub fn snr(signal: &SparseSignal, noise: &DVector<f64>) -> Result<f64> {
    if signal.is_empty() || noise.is_empty() {
        return Err(Error::InvalidDimension(
            "snr needs non-empty vectors".into(),
        ));
    }
    let noise_power = noise.norm_squared() / noise.len() as f64;
    if noise_power == 0.0 {
        return Err(Error::DivisionByZero(
            "noise vector is identically zero".into(),
        ));
    }
    Ok((signal.values().norm_squared() / signal.len() as f64) / noise_power)
}

/// [`snr`] in decibels.
pub fn snr_db(signal: &SparseSignal, noise: &DVector<f64>) -> Result<f64> {
    Ok(10.0 * snr(signal, noise)?.log10())
}

/// Relative l2 error `‖s − ŝ‖₂ / ‖s‖₂`.
pub fn reconstruction_error(truth: &SparseSignal, estimate: &DVector<f64>) -> Result<f64> {
    check_len("estimate", truth.len(), estimate.len())?;
    let norm = truth.values().norm();
    if norm == 0.0 {
        return Err(Error::InvalidInput(
            "ground truth is the zero vector".into(),
        ));
    }
    Ok((truth.values() - estimate).norm() / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sample_variance(v: &DVector<f64>) -> f64 {
        let mean = v.mean();
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    }

    #[test]
    fn dictionary_variance_is_one_over_m() {
        let d = gen_dictionary(300, 1000, 1).unwrap();
        let var = d.matrix().iter().map(|x| x * x).sum::<f64>() / (300.0 * 1000.0);
        assert!(var > 0.8 / 300.0 && var < 1.2 / 300.0, "variance {var}");
    }

    #[test]
    fn dictionary_is_seeded() {
        assert_eq!(
            gen_dictionary(2, 4, 7).unwrap(),
            gen_dictionary(2, 4, 7).unwrap()
        );
        assert_ne!(
            gen_dictionary(2, 4, 7).unwrap(),
            gen_dictionary(2, 4, 8).unwrap()
        );
    }

    #[test]
    fn square_dictionary_is_rejected() {
        assert!(matches!(
            gen_dictionary(5, 5, 0),
            Err(Error::InvalidConfiguration(_))
        ));
        assert!(matches!(
            gen_dictionary(0, 5, 0),
            Err(Error::InvalidConfiguration(_))
        ));
    }

    #[test]
    fn signal_sparsity() {
        let s = gen_signal(1000, 20, 3).unwrap();
        assert_eq!(s.sparsity(), 20);
        assert_eq!(s.values().iter().filter(|x| **x != 0.0).count(), 20);

        let s = gen_signal(10, 1, 5).unwrap();
        assert_eq!(s.values().iter().filter(|x| **x == 0.0).count(), 9);
        assert_eq!(s, gen_signal(10, 1, 5).unwrap());
    }

    #[test]
    fn signal_sparsity_bounds() {
        assert!(gen_signal(10, 0, 1).is_err());
        assert!(gen_signal(10, 3, 1).is_err());
        assert!(gen_signal(12, 3, 1).is_ok());
    }

    #[test]
    fn support_is_uniform() {
        let mut counts = [0usize; 10];
        for seed in 0..2000 {
            let s = gen_signal(10, 1, seed).unwrap();
            counts[s.support()[0]] += 1;
        }
        for c in counts {
            let freq = c as f64 / 2000.0;
            assert!((freq - 0.1).abs() <= 0.03, "frequency {freq}");
        }
    }

    #[test]
    fn laplace_variance() {
        let n = sample_noise(NoiseModel::DoubleExponential { scale: 1.0 }, 100_000, 11).unwrap();
        let var = sample_variance(&n);
        assert!((var - 2.0).abs() <= 0.1, "variance {var}");
    }

    #[test]
    fn mixture_variance() {
        let model = NoiseModel::ImpulsiveMixture {
            sigma: 1.0,
            epsilon: 0.01,
            kappa: 1000.0,
        };
        assert_abs_diff_eq!(model.variance(), 10.99, epsilon = 1e-12);
        let n = sample_noise(model, 1_000_000, 12).unwrap();
        let var = sample_variance(&n);
        assert!((var - 10.99).abs() <= 0.5, "variance {var}");
    }

    #[test]
    fn gaussian_variance() {
        let n = sample_noise(NoiseModel::Gaussian { sigma: 0.5 }, 200_000, 13).unwrap();
        assert!((sample_variance(&n) - 0.25).abs() < 0.01);
    }

    #[test]
    fn invalid_noise_parameters() {
        for model in [
            NoiseModel::Gaussian { sigma: 0.0 },
            NoiseModel::DoubleExponential { scale: -1.0 },
            NoiseModel::ImpulsiveMixture {
                sigma: 1.0,
                epsilon: 1.0,
                kappa: 10.0,
            },
            NoiseModel::ImpulsiveMixture {
                sigma: 1.0,
                epsilon: 0.1,
                kappa: 0.5,
            },
        ] {
            assert!(sample_noise(model, 4, 0).is_err(), "{model}");
        }
    }

    #[test]
    fn instance_is_consistent() {
        let p = ProblemInstance::generate(20, 50, 3, Some(NoiseModel::Gaussian { sigma: 0.1 }), 99)
            .unwrap();
        let rebuilt = p.dictionary().apply(p.truth().unwrap().values()) + p.noise().unwrap();
        for (a, b) in rebuilt.iter().zip(p.observation().iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let q = ProblemInstance::generate(20, 50, 3, Some(NoiseModel::Gaussian { sigma: 0.1 }), 99)
            .unwrap();
        assert_eq!(p.observation(), q.observation());
    }

    #[test]
    fn snr_values() {
        let s = SparseSignal::from_dense(DVector::from_vec(vec![1.0, 1.0]));
        let n = DVector::from_vec(vec![2.0]);
        assert_abs_diff_eq!(snr(&s, &n).unwrap(), 0.25, epsilon = 1e-15);

        // ‖s‖² = N, ‖n‖² = M
        let s = SparseSignal::from_dense(DVector::from_vec(vec![
            1.0,
            -1.0,
            0.0,
            std::f64::consts::SQRT_2,
        ]));
        let n = DVector::from_vec(vec![1.0, -1.0, 1.0]);
        assert_abs_diff_eq!(snr(&s, &n).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(snr_db(&s, &n).unwrap(), 0.0, epsilon = 1e-10);

        let s4 = SparseSignal::from_dense(s.values() * 2.0);
        assert_abs_diff_eq!(snr(&s4, &n).unwrap(), 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            snr_db(&s4, &n).unwrap(),
            6.020_599_913_279_624,
            epsilon = 1e-9
        );

        assert!(matches!(
            snr(&s, &DVector::zeros(3)),
            Err(Error::DivisionByZero(_))
        ));
    }

    #[test]
    fn relative_error() {
        let s = SparseSignal::from_dense(DVector::from_vec(vec![3.0, 4.0, 0.0]));
        assert_eq!(reconstruction_error(&s, s.values()).unwrap(), 0.0);
        assert_eq!(reconstruction_error(&s, &DVector::zeros(3)).unwrap(), 1.0);
        let est = DVector::from_vec(vec![0.0, 4.0, 0.0]);
        assert_abs_diff_eq!(
            reconstruction_error(&s, &est).unwrap(),
            0.6,
            epsilon = 1e-15
        );

        let zero = SparseSignal::from_dense(DVector::zeros(3));
        assert!(matches!(
            reconstruction_error(&zero, &est),
            Err(Error::InvalidInput(_))
        ));
        assert!(reconstruction_error(&s, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn sub_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for stream in 0..10_000 {
            assert!(seen.insert(sub_seed(42, stream)));
        }
    }
}
