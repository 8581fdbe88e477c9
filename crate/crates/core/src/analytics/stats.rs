//! Exact and asymptotic tests.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("observed has {observed} categories, expected has {expected}")]
    DimensionMismatch { observed: usize, expected: usize },
    #[error("at least two categories are required")]
    TooFewCategories,
    #[error("expected counts must be positive")]
    NonpositiveExpected,
    #[error("both samples must be nonempty")]
    EmptySample,
    #[error("resample count must be positive")]
    NoResamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    FisherExactTwoSided,
    ChiSquareGof,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult<F> {
    /// Chi-square statistic; absent for Fisher.
    pub statistic: Option<F>,
    pub df: Option<u32>,
    pub p_value: F,
    pub method: TestMethod,
    /// Set when a zero margin made the test undefined and p = 1 was reported.
    pub degenerate: bool,
}

/// Rows are groups, columns are present / absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContingencyTable2x2 {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable2x2 {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Self { a, b, c, d }
    }

    pub fn from_rows(rows: [[u64; 2]; 2]) -> Self {
        Self::new(rows[0][0], rows[0][1], rows[1][0], rows[1][1])
    }

    /// Counts of a binary feature in two groups of the given sizes.
    pub fn from_counts(count_1: u64, n_1: u64, count_2: u64, n_2: u64) -> Self {
        Self::new(count_1, n_1 - count_1, count_2, n_2 - count_2)
    }

    pub fn n(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    /// Swap both rows and columns.
    pub fn transposed_swap(&self) -> Self {
        Self::new(self.d, self.c, self.b, self.a)
    }
}

/// ln(k!) for k = 0..=n.
fn log_factorials<F: Scalar>(n: u64) -> Vec<F> {
    let mut table = Vec::with_capacity(n as usize + 1);
    table.push(F::zero());
    let mut acc = F::zero();
    for k in 1..=n {
        acc = acc + F::of(k as f64).ln();
        table.push(acc);
    }
    table
}

const FISHER_REL_TOL: f64 = 1e-7;

/// Two-sided Fisher exact test: sum of the hypergeometric probabilities of
/// all tables with the observed margins that are no more likely than the
/// observed one.
pub fn fisher_exact<F: Scalar>(table: ContingencyTable2x2) -> TestResult<F> {
    let ContingencyTable2x2 { a, b, c, d } = table;
    let (r1, r2, c1, c2) = (a + b, c + d, a + c, b + d);
    let n = r1 + r2;
    if r1 == 0 || r2 == 0 || c1 == 0 || c2 == 0 {
        return TestResult {
            statistic: None,
            df: None,
            p_value: F::one(),
            method: TestMethod::FisherExactTwoSided,
            degenerate: true,
        };
    }
    let lf = log_factorials::<F>(n);
    let fixed = lf[r1 as usize] + lf[r2 as usize] + lf[c1 as usize] + lf[c2 as usize] - lf[n as usize];
    let log_p = |x: u64| {
        fixed - lf[x as usize] - lf[(r1 - x) as usize] - lf[(c1 - x) as usize] - lf[(r2 + x - c1) as usize]
    };
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let observed = log_p(a);
    let cutoff = observed + F::of(FISHER_REL_TOL).ln_1p();
    let mut p = F::zero();
    for x in lo..=hi {
        let lp = log_p(x);
        if lp <= cutoff {
            p = p + lp.exp();
        }
    }
    TestResult {
        statistic: None,
        df: None,
        p_value: p.min(F::one()),
        method: TestMethod::FisherExactTwoSided,
        degenerate: false,
    }
}

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    if x < half {
        // reflection
        let pi = F::of(std::f64::consts::PI);
        return (pi / (pi * x).sin()).ln() - ln_gamma(F::one() - x);
    }
    let x = x - F::one();
    let mut sum = F::of(LANCZOS[0]);
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        sum = sum + F::of(c) / (x + F::of_usize(i));
    }
    let t = x + F::of(7.5);
    F::of(0.5 * (2.0 * std::f64::consts::PI).ln()) + (x + half) * t.ln() - t + sum.ln()
}

const GAMMA_EPS: f64 = 1e-15;
const GAMMA_MAX_ITER: usize = 10_000;

/// Regularized upper incomplete gamma Q(s, x).
pub fn gamma_q<F: Scalar>(s: F, x: F) -> F {
    if x <= F::zero() {
        return F::one();
    }
    let eps = F::of(GAMMA_EPS).max(F::epsilon());
    let prefactor = (s * x.ln() - x - ln_gamma(s)).exp();
    if x < s + F::one() {
        // series for P
        let mut term = F::one() / s;
        let mut sum = term;
        let mut k = s;
        for _ in 0..GAMMA_MAX_ITER {
            k = k + F::one();
            term = term * x / k;
            sum = sum + term;
            if term.abs() < sum.abs() * eps {
                break;
            }
        }
        (F::one() - sum * prefactor).max(F::zero())
    } else {
        // modified Lentz continued fraction for Q
        let tiny = F::min_positive_value() / eps;
        let mut b = x + F::one() - s;
        let mut c = F::one() / tiny;
        let mut d = F::one() / b;
        let mut h = d;
        for i in 1..GAMMA_MAX_ITER {
            let i = F::of_usize(i);
            let an = -i * (i - s);
            b = b + F::of(2.0);
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = F::one() / d;
            let delta = d * c;
            h = h * delta;
            if (delta - F::one()).abs() < eps {
                break;
            }
        }
        (prefactor * h).min(F::one())
    }
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf<F: Scalar>(statistic: F, df: u32) -> F {
    gamma_q(F::of(df as f64) / F::of(2.0), statistic / F::of(2.0))
}

/// Pearson goodness-of-fit test.
pub fn chi_square_gof<F: Scalar>(observed: &[u64], expected: &[F]) -> Result<TestResult<F>, StatsError> {
    if observed.len() != expected.len() {
        return Err(StatsError::DimensionMismatch { observed: observed.len(), expected: expected.len() });
    }
    if observed.len() < 2 {
        return Err(StatsError::TooFewCategories);
    }
    if expected.iter().any(|&e| e <= F::zero() || !e.is_finite()) {
        return Err(StatsError::NonpositiveExpected);
    }
    let statistic = observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| {
            let diff = F::of(o as f64) - e;
            diff * diff / e
        })
        .fold(F::zero(), |a, b| a + b);
    let df = observed.len() as u32 - 1;
    Ok(TestResult {
        statistic: Some(statistic),
        df: Some(df),
        p_value: chi_square_sf(statistic, df),
        method: TestMethod::ChiSquareGof,
        degenerate: false,
    })
}

/// Goodness of fit against equal expected shares.
pub fn chi_square_uniform<F: Scalar>(observed: &[u64]) -> Result<TestResult<F>, StatsError> {
    let total: u64 = observed.iter().sum();
    let k = observed.len().max(1);
    let e = F::of(total as f64) / F::of_usize(k);
    chi_square_gof(observed, &vec![e; observed.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult<F> {
    /// mean(x) - mean(y)
    pub observed_diff: F,
    pub p_value: F,
    pub resamples: usize,
    pub seed: u64,
}

pub const DEFAULT_RESAMPLES: usize = 10_000;

pub fn mean<F: Scalar>(xs: &[F]) -> Option<F> {
    (!xs.is_empty()).then(|| xs.iter().fold(F::zero(), |a, &b| a + b) / F::of_usize(xs.len()))
}

/// Two-sided permutation test on the difference of means.
/// p = (hits + 1) / (resamples + 1).
pub fn permutation_test_means<F: Scalar>(
    x: &[F],
    y: &[F],
    resamples: usize,
    seed: u64,
) -> Result<PermutationResult<F>, StatsError> {
    if x.is_empty() || y.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if resamples == 0 {
        return Err(StatsError::NoResamples);
    }
    let observed_diff = mean(x).unwrap() - mean(y).unwrap();
    let mut pooled: Vec<F> = x.iter().chain(y).copied().collect();
    let total = pooled.iter().fold(F::zero(), |a, &b| a + b);
    let (nx, ny) = (F::of_usize(x.len()), F::of_usize(y.len()));
    let slack = F::of(1e-9) * (F::one() + observed_diff.abs());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..resamples {
        pooled.shuffle(&mut rng);
        let sx = pooled[..x.len()].iter().fold(F::zero(), |a, &b| a + b);
        let diff = sx / nx - (total - sx) / ny;
        if diff.abs() >= observed_diff.abs() - slack {
            hits += 1;
        }
    }
    Ok(PermutationResult {
        observed_diff,
        p_value: F::of_usize(hits + 1) / F::of_usize(resamples + 1),
        resamples,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fisher_examples() {
        let p = |t: [[u64; 2]; 2]| fisher_exact::<f64>(ContingencyTable2x2::from_rows(t)).p_value;
        assert!((p([[10, 90], [10, 90]]) - 1.0).abs() < 1e-12);
        assert!((p([[5, 0], [0, 5]]) - 2.0 / 252.0).abs() < 1e-12);
        let reported = p([[33, 67], [12, 83]]);
        assert!((0.0005..=0.002).contains(&reported), "{reported}");
    }

    #[test]
    fn fisher_degenerate() {
        let r = fisher_exact::<f64>(ContingencyTable2x2::new(0, 0, 3, 4));
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn fisher_in_f32() {
        let r = fisher_exact::<f32>(ContingencyTable2x2::new(5, 0, 0, 5));
        assert!((r.p_value - 2.0 / 252.0).abs() < 1e-5);
    }

    #[test]
    fn chi_square_examples() {
        let r = chi_square_gof::<f64>(&[10, 20, 30], &[20.0, 20.0, 20.0]).unwrap();
        assert_eq!(r.statistic, Some(10.0));
        assert_eq!(r.df, Some(2));
        assert!((r.p_value - (-5.0f64).exp()).abs() < 1e-12);
        let same = chi_square_gof::<f64>(&[5, 5], &[5.0, 5.0]).unwrap();
        assert_eq!(same.p_value, 1.0);
        let table1 = chi_square_uniform::<f64>(&[149, 34, 12]).unwrap();
        assert!(table1.p_value < 1e-6);
    }

    #[test]
    fn chi_square_errors() {
        assert_eq!(
            chi_square_gof::<f64>(&[1, 2], &[1.0]).unwrap_err(),
            StatsError::DimensionMismatch { observed: 2, expected: 1 }
        );
        assert_eq!(chi_square_gof::<f64>(&[1, 2], &[1.0, 0.0]).unwrap_err(), StatsError::NonpositiveExpected);
        assert_eq!(chi_square_gof::<f64>(&[1], &[1.0]).unwrap_err(), StatsError::TooFewCategories);
    }

    #[test]
    fn ln_gamma_integers() {
        let mut fact = 1.0f64;
        for n in 1..20u32 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12, "{n}");
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5f64) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn gamma_q_branches_meet() {
        // df = 4 closed form: exp(-x/2) (1 + x/2)
        for x in [0.5f64, 4.9, 5.0, 5.1, 12.0, 40.0] {
            let want = (-x / 2.0).exp() * (1.0 + x / 2.0);
            assert!((chi_square_sf(x, 4) - want).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn permutation_basics() {
        let x = [5.0f64, 6.0, 7.0, 8.0, 9.0];
        let y = [1.0f64, 2.0, 3.0, 4.0, 5.0];
        let r = permutation_test_means(&x, &y, 2_000, 3).unwrap();
        assert_eq!(r.observed_diff, 4.0);
        assert!(r.p_value < 0.05);
        assert_eq!(r, permutation_test_means(&x, &y, 2_000, 3).unwrap());
        let same = permutation_test_means(&x, &x, 500, 3).unwrap();
        assert!(same.p_value > 0.9);
        assert_eq!(permutation_test_means::<f64>(&[], &y, 10, 1).unwrap_err(), StatsError::EmptySample);
    }
}
