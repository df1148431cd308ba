//! Sample moments, normality tests and histograms.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::bsde::BsdeSolution;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Critical value of the Jarque–Bera test (χ² with 2 degrees of freedom, 5%).
pub const JB_CRITICAL: f64 = 5.99;
/// Critical value of the Kolmogorov–Smirnov test at 5%.
pub const KS_CRITICAL: f64 = 1.36;

/// Arithmetic mean and variance with the `1/M` convention.
pub fn sample_moments<S: Scalar>(samples: &[S]) -> Result<(S, S)> {
    if samples.len() < 2 {
        return invalid(format!("need at least 2 samples, got {}", samples.len()));
    }
    let m = S::of_usize(samples.len());
    let mean = samples.iter().copied().sum::<S>() / m;
    let var = samples.iter().map(|x| (*x - mean) * (*x - mean)).sum::<S>() / m;
    Ok((mean, var))
}

fn nondegenerate<S: Scalar>(samples: &[S], min_len: usize) -> Result<(S, S)> {
    if samples.len() < min_len {
        return invalid(format!("need at least {min_len} samples, got {}", samples.len()));
    }
    let (mean, var) = sample_moments(samples)?;
    if !(var > S::zero()) {
        return Err(Error::DegenerateSample("sample variance is zero".into()));
    }
    Ok((mean, var))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JarqueBera<S> {
    pub skewness: S,
    pub kurtosis: S,
    pub jb: S,
    pub reject: bool,
}

/// `JB = M (S²/6 + (K-3)²/24)`, rejecting normality when `JB > 5.99`.
pub fn jarque_bera<S: Scalar>(samples: &[S]) -> Result<JarqueBera<S>> {
    let (mean, var) = nondegenerate(samples, 4)?;
    let m = S::of_usize(samples.len());
    let (mut m3, mut m4) = (S::zero(), S::zero());
    for &x in samples {
        let d = x - mean;
        let d2 = d * d;
        m3 = m3 + d2 * d;
        m4 = m4 + d2 * d2;
    }
    let skewness = m3 / m / var.powf(S::of(1.5));
    let kurtosis = m4 / m / (var * var);
    let excess = kurtosis - S::of(3.0);
    let jb = m * (skewness * skewness / S::of(6.0) + excess * excess / S::of(24.0));
    Ok(JarqueBera { skewness, kurtosis, jb, reject: jb > S::of(JB_CRITICAL) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KolmogorovSmirnov<S> {
    /// `√M sup_x (F_M(x) - F(x))`.
    pub ks: S,
    /// `√M sup_x |F_M(x) - F(x)|`.
    pub ks_two_sided: S,
    pub reject: bool,
}

/// Kolmogorov–Smirnov statistic against the normal law fitted by the sample
/// mean and variance; rejects when the one-sided statistic exceeds 1.36.
pub fn ks_normal<S: Scalar>(samples: &[S]) -> Result<KolmogorovSmirnov<S>> {
    let (mean, var) = nondegenerate(samples, 2)?;
    let fitted = Normal::new(mean.as_f64(), var.as_f64().sqrt())
        .map_err(|e| Error::DegenerateSample(format!("cannot fit a normal law: {e}")))?;
    let mut sorted: Vec<f64> = samples.iter().map(|x| x.as_f64()).collect();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let (mut above, mut below) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut i = 0;
    while i < m {
        // ties: the empirical CDF jumps once past the whole run
        let mut j = i;
        while j + 1 < m && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let f = fitted.cdf(sorted[i]);
        above = above.max((j + 1) as f64 / m as f64 - f);
        below = below.max(f - i as f64 / m as f64);
        i = j + 1;
    }
    let root = (m as f64).sqrt();
    let ks = root * above.max(0.0);
    let ks_two_sided = root * above.max(below).max(0.0);
    Ok(KolmogorovSmirnov { ks: S::of(ks), ks_two_sided: S::of(ks_two_sided), reject: ks > KS_CRITICAL })
}

/// Both normality tests and the moments of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestReport<S> {
    pub m: usize,
    pub s_skew: S,
    pub k_kurt: S,
    pub jb: S,
    pub jb_reject: bool,
    pub ks: S,
    pub ks_two_sided: S,
    pub ks_reject: bool,
    pub mean: S,
    pub var: S,
}

pub fn normality_report<S: Scalar>(samples: &[S]) -> Result<TestReport<S>> {
    let jb = jarque_bera(samples)?;
    let ks = ks_normal(samples)?;
    let (mean, var) = sample_moments(samples)?;
    Ok(TestReport {
        m: samples.len(),
        s_skew: jb.skewness,
        k_kurt: jb.kurtosis,
        jb: jb.jb,
        jb_reject: jb.reject,
        ks: ks.ks,
        ks_two_sided: ks.ks_two_sided,
        ks_reject: ks.reject,
        mean,
        var,
    })
}

/// Normality reports of `Y_t` at the requested grid times, one row per time.
pub fn validation_table<S: Scalar>(solution: &BsdeSolution<S>, times: &[S]) -> Result<Vec<(S, TestReport<S>)>> {
    times
        .iter()
        .map(|&t| {
            let i = solution.grid.index_of(t)?;
            Ok((t, normality_report(&solution.y_at(i))?))
        })
        .collect()
}

/// Normalized histogram with per-bin standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram<S> {
    /// `bins + 1` edges.
    pub edges: Vec<S>,
    pub counts: Vec<usize>,
    /// Density heights; `Σ height · width = 1` over the in-range samples.
    pub heights: Vec<S>,
    /// `√(p(1-p)/M) / width` per bin.
    pub std_errors: Vec<S>,
    /// Number of samples that fell in the range.
    pub in_range: usize,
}

impl<S: Scalar> Histogram<S> {
    pub fn width(&self) -> S {
        self.edges[1] - self.edges[0]
    }

    pub fn center(&self, k: usize) -> S {
        (self.edges[k] + self.edges[k + 1]) * S::of(0.5)
    }
}

/// Histogram of `samples` over `range` (default: sample minimum to maximum).
/// Samples outside the range are ignored; the right edge is inclusive.
pub fn histogram_density<S: Scalar>(samples: &[S], bins: usize, range: Option<(S, S)>) -> Result<Histogram<S>> {
    if bins == 0 {
        return invalid("need at least one bin");
    }
    let (lo, hi) = match range {
        Some(r) => r,
        None => {
            let lo = samples.iter().copied().fold(S::infinity(), S::min);
            let hi = samples.iter().copied().fold(S::neg_infinity(), S::max);
            (lo, hi)
        }
    };
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return invalid(format!("empty histogram range [{lo}, {hi}]"));
    }
    let width = (hi - lo) / S::of_usize(bins);
    let mut counts = vec![0usize; bins];
    for &x in samples {
        if x < lo || x > hi {
            continue;
        }
        let k = ((x - lo) / width).floor().to_usize().unwrap_or(0).min(bins - 1);
        counts[k] += 1;
    }
    let in_range: usize = counts.iter().sum();
    if in_range == 0 {
        return Err(Error::DegenerateSample("no sample falls in the histogram range".into()));
    }
    let m = S::of_usize(in_range);
    let edges = (0..=bins).map(|k| lo + width * S::of_usize(k)).collect();
    let heights = counts.iter().map(|&c| S::of_usize(c) / m / width).collect();
    let std_errors = counts
        .iter()
        .map(|&c| {
            let p = S::of_usize(c) / m;
            (p * (S::one() - p) / m).sqrt() / width
        })
        .collect();
    Ok(Histogram { edges, counts, heights, std_errors, in_range })
}
