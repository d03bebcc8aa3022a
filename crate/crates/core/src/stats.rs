//! Small statistical toolkit for the Monte Carlo verdicts.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compensated (Neumaier) summation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = NeumaierSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// A Bernoulli frequency with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub successes: usize,
    pub n: usize,
    pub estimate: f64,
    pub se: f64,
}

impl Proportion {
    pub fn new(successes: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InsufficientEnsemble { needed: 1, got: 0 });
        }
        if successes > n {
            return Err(Error::domain(format!("{successes} successes out of {n} trials")));
        }
        let p = successes as f64 / n as f64;
        Ok(Proportion {
            successes,
            n,
            estimate: p,
            se: (p * (1.0 - p) / n as f64).sqrt(),
        })
    }

    pub fn from_flags(flags: impl IntoIterator<Item = bool>) -> Result<Self> {
        let (mut k, mut n) = (0, 0);
        for f in flags {
            n += 1;
            k += usize::from(f);
        }
        Proportion::new(k, n)
    }

    /// The estimate, or the rule-of-three bound `3 / n` when nothing was observed.
    pub fn upper_or_rule_of_three(&self) -> f64 {
        if self.successes == 0 {
            rule_of_three(self.n)
        } else {
            self.estimate
        }
    }
}

/// One-sided 95% upper confidence bound for a proportion with zero successes.
pub fn rule_of_three(n: usize) -> f64 {
    3.0 / n as f64
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample mean and its standard error (unbiased variance).
pub fn mean_se(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientEnsemble { needed: 2, got: n });
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((m, (var / n as f64).sqrt()))
}

pub fn sample_variance(values: &[f64]) -> Result<f64> {
    let (_, se) = mean_se(values)?;
    Ok(se * se * values.len() as f64)
}

pub fn correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape(format!("correlation of {} and {} samples", a.len(), b.len())));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientEnsemble { needed: 1, got: 0 });
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::domain(format!("quantile level {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn median(values: &[f64]) -> Result<f64> {
    quantile(values, 0.5)
}

/// Ordinary least-squares fit `y = intercept + slope x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; `NaN` with only two points.
    pub slope_se: f64,
}

pub fn ols(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::Shape(format!("{n} abscissae and {} ordinates", y.len())));
    }
    if n < 2 {
        return Err(Error::InsufficientEnsemble { needed: 2, got: n });
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("regression abscissae are all equal"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if n > 2 {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(LinearFit {
        slope,
        intercept,
        slope_se,
    })
}

/// Bootstrap standard deviation of `statistic` over `n_boot` resamples.
pub fn bootstrap_sd<T: Clone>(
    items: &[T],
    n_boot: usize,
    seed: u64,
    mut statistic: impl FnMut(&[T]) -> Result<f64>,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InsufficientEnsemble { needed: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(n_boot);
    let mut sample = Vec::with_capacity(items.len());
    for _ in 0..n_boot {
        sample.clear();
        sample.extend((0..items.len()).map(|_| items.choose(&mut rng).expect("nonempty").clone()));
        let s = statistic(&sample)?;
        if s.is_finite() {
            stats.push(s);
        }
    }
    if stats.len() < 2 {
        return Ok(f64::INFINITY);
    }
    let (_, se) = mean_se(&stats)?;
    Ok(se * (stats.len() as f64).sqrt())
}

/// `P(K > x)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.2 {
        // the alternating series converges slowly here, and the value is 1 to double precision
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..200 {
        let term = (-2.0 * (k as f64 * x).powi(2)).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Asymptotic critical value `c(alpha)` with `P(K > c) = alpha`.
pub fn kolmogorov_critical(alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsOutcome {
    pub statistic: f64,
    pub p_value: f64,
    /// `statistic` rescaled to the Kolmogorov limit.
    pub scaled: f64,
}

impl KsOutcome {
    pub fn passes(&self, alpha: f64) -> bool {
        self.p_value >= alpha
    }
}

/// One-sample KS test against a continuous CDF.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsOutcome> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::InsufficientEnsemble { needed: 1, got: 0 });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let d = sorted.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / nf).max((i + 1) as f64 / nf - f)
    });
    let sn = nf.sqrt();
    // Stephens' small-sample correction
    let scaled = d * (sn + 0.12 + 0.11 / sn);
    Ok(KsOutcome {
        statistic: d,
        p_value: kolmogorov_survival(scaled),
        scaled,
    })
}

/// Two-sample KS test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsOutcome> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientEnsemble { needed: 1, got: 0 });
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let en = (na * nb / (na + nb)).sqrt();
    let scaled = d * (en + 0.12 + 0.11 / en);
    Ok(KsOutcome {
        statistic: d,
        p_value: kolmogorov_survival(scaled),
        scaled,
    })
}

pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neumaier_recovers_cancellation() {
        let s: NeumaierSum = [1.0, 1e100, 1.0, -1e100].into_iter().collect();
        assert_eq!(s.value(), 2.0);
    }

    #[test]
    fn proportion_se() {
        let p = Proportion::new(25, 100).unwrap();
        assert_eq!(p.estimate, 0.25);
        assert!((p.se - (0.25f64 * 0.75 / 100.0).sqrt()).abs() < 1e-15);
        assert_eq!(Proportion::new(0, 2000).unwrap().upper_or_rule_of_three(), 0.0015);
        assert!(Proportion::new(3, 2).is_err());
    }

    #[test]
    fn ols_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 3.0 * v).collect();
        let fit = ols(&x, &y).unwrap();
        assert!((fit.slope + 3.0).abs() < 1e-14);
        assert!((fit.intercept - 2.0).abs() < 1e-14);
        assert!(fit.slope_se < 1e-7);
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(median(&v).unwrap(), 2.5);
        assert_eq!(quantile(&v, 1.0).unwrap(), 4.0);
        assert_eq!(quantile(&v, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn kolmogorov_distribution_values() {
        // P(K > 1.3581) = 0.05 is the textbook 5% point
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_critical(1e-3) - 1.9495).abs() < 1e-4);
        assert!((kolmogorov_survival(kolmogorov_critical(1e-3)) - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn ks_two_sample_detects_shift() {
        let a: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
        let same: Vec<f64> = (0..400).map(|i| (i as f64 + 0.5) / 400.0).collect();
        let shifted: Vec<f64> = same.iter().map(|v| v + 0.3).collect();
        assert!(ks_two_sample(&a, &same).unwrap().passes(1e-3));
        assert!(!ks_two_sample(&a, &shifted).unwrap().passes(1e-3));
    }

    #[test]
    fn normal_cdf() {
        assert!((standard_normal_cdf(0.0) - 0.5).abs() < 1e-15);
        let v = standard_normal_cdf(1.959963984540054);
        assert!((v - 0.975).abs() < 1e-11, "{v}");
    }
}
