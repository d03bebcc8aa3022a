//! Scalar functionals along trajectories: mass, extremes, log-decay slopes,
//! the quadratic variation of `log M`, mass-decay events, excursion times
//! and moment Lyapunov exponents.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::noise::RngSeed;
use crate::solver::SolverConfig;
use crate::stats::{self, ols};

/// Recorded observables of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub seed: RngSeed,
    pub n_space: usize,
    pub dt: f64,
    pub lambda: f64,
    pub diffusion: f64,
    pub test_mode: bool,
    pub times: Vec<f64>,
    pub mass: Vec<f64>,
    pub sup: Vec<f64>,
    pub inf: Vec<f64>,
    pub log_mass: Vec<f64>,
    /// Running sum of `(dM / M)^2` over every step.
    pub qv_n: Vec<f64>,
    /// Cumulative count of negative cell values.
    pub negativity_count: Vec<u64>,
    /// Running `lambda sum sigma(u) dW`; equals `M_t - M_0` exactly in exact arithmetic.
    pub noise_integral: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshots: Vec<(f64, GridFunction)>,
}

/// Which recorded functional to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Functional {
    Mass,
    Sup,
    Inf,
}

/// Provenance stamped into the CSV comment line.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvMeta<'a> {
    pub tool: &'a str,
    pub version: &'a str,
    pub config_digest: &'a str,
}

impl TrajectoryRecord {
    pub fn empty(config: &SolverConfig) -> Self {
        TrajectoryRecord {
            seed: config.rng_seed(),
            n_space: config.n_space,
            dt: config.effective_dt(),
            lambda: config.lambda,
            diffusion: config.diffusion,
            test_mode: config.test_mode,
            times: Vec::new(),
            mass: Vec::new(),
            sup: Vec::new(),
            inf: Vec::new(),
            log_mass: Vec::new(),
            qv_n: Vec::new(),
            negativity_count: Vec::new(),
            noise_integral: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn series(&self, which: Functional) -> &[f64] {
        match which {
            Functional::Mass => &self.mass,
            Functional::Sup => &self.sup,
            Functional::Inf => &self.inf,
        }
    }

    /// Index of the recorded time nearest to `t`.
    pub fn index_at(&self, t: f64) -> Result<usize> {
        let horizon = self.horizon();
        let cadence = if self.len() > 1 { self.times[1] - self.times[0] } else { 0.0 };
        if self.is_empty() || !(t >= 0.0) || t > horizon + 0.5 * cadence {
            return Err(Error::Horizon { time: t, horizon });
        }
        let k = self.times.partition_point(|&s| s < t);
        Ok(match k {
            0 => 0,
            k if k == self.len() => k - 1,
            k if (self.times[k] - t) < (t - self.times[k - 1]) => k,
            k => k - 1,
        })
    }

    pub fn negativity_total(&self) -> u64 {
        self.negativity_count.last().copied().unwrap_or(0)
    }

    pub fn snapshot_at(&self, t: f64) -> Option<&GridFunction> {
        self.snapshots
            .iter()
            .find(|(s, _)| (s - t).abs() <= 1e-9 * t.abs().max(1.0))
            .map(|(_, g)| g)
    }

    /// CSV with one row per recorded time and a leading `#` provenance line.
    pub fn to_csv(&self, meta: &CsvMeta<'_>) -> String {
        let mut out = String::with_capacity(64 + self.len() * 140);
        let _ = writeln!(
            out,
            "# tool={} version={} config_digest={} master_seed={} stream={} nu={} lambda={} dt={} n_space={}",
            meta.tool,
            meta.version,
            meta.config_digest,
            self.seed.master_seed,
            self.seed.stream_index,
            self.diffusion,
            self.lambda,
            self.dt,
            self.n_space
        );
        out.push_str("t,mass,sup,inf,log_mass,qv_n,negativity_count\n");
        for i in 0..self.len() {
            let _ = writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                self.times[i],
                self.mass[i],
                self.sup[i],
                self.inf[i],
                self.log_mass[i],
                self.qv_n[i],
                self.negativity_count[i]
            );
        }
        out
    }
}

/// `dx sum u_j`, the periodic trapezoid rule.
pub fn total_mass(u: &GridFunction) -> f64 {
    u.integral()
}

/// `A(t; lambda) = {M_t < M_0 exp(-lambda^2 L^2 t / 8)}` at the recorded time
/// nearest `t`. Ties count as false, so `A(0)` is false.
pub fn mass_event_indicator(record: &TrajectoryRecord, t: f64, lambda: f64, l_sigma: f64) -> Result<bool> {
    let i = record.index_at(t)?;
    let threshold = record.mass[0] * (-(lambda * l_sigma).powi(2) * t / 8.0).exp();
    Ok(record.mass[i] < threshold)
}

/// Least-squares slope of `log values` against `times` over `[t_a, t_b]`.
pub fn log_slope(times: &[f64], values: &[f64], window: (f64, f64)) -> Result<f64> {
    let (ta, tb) = window;
    if !(tb > ta && ta >= 0.0) {
        return Err(Error::domain(format!("window [{ta}, {tb}] must satisfy 0 <= t_a < t_b")));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, (&t, &v)) in times.iter().zip(values).enumerate() {
        if t < ta - 1e-12 || t > tb + 1e-12 {
            continue;
        }
        if !(v > 0.0) {
            return Err(Error::NonPositive { index: i, value: v });
        }
        xs.push(t);
        ys.push(v.ln());
    }
    Ok(ols(&xs, &ys)?.slope)
}

pub fn log_decay_slope(record: &TrajectoryRecord, window: (f64, f64), which: Functional) -> Result<f64> {
    log_slope(&record.times, record.series(which), window)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QvCheck {
    pub holds: bool,
    /// Smallest `<N>_t / t` over the checked times.
    pub min_rate: f64,
    pub threshold: f64,
    /// Zero-noise record: the check is vacuous.
    pub test_mode: bool,
}

/// `<N>_t / t >= lambda^2 L^2 / 2 (1 - slack)` for every recorded `t >= 0.1`.
pub fn qv_lower_bound_check(record: &TrajectoryRecord, lambda: f64, l_sigma: f64, slack: f64) -> QvCheck {
    let threshold = 0.5 * (lambda * l_sigma).powi(2) * (1.0 - slack);
    if record.test_mode && record.lambda == 0.0 {
        return QvCheck {
            holds: true,
            min_rate: 0.0,
            threshold,
            test_mode: true,
        };
    }
    let min_rate = record
        .times
        .iter()
        .zip(&record.qv_n)
        .filter(|(&t, _)| t >= 0.1)
        .map(|(&t, &q)| q / t)
        .fold(f64::INFINITY, f64::min);
    QvCheck {
        holds: min_rate >= threshold,
        min_rate,
        threshold,
        test_mode: false,
    }
}

/// First-passage times of the infimum through successive `1/e` levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excursions {
    /// `T_1 < T_2 < ...`; `T_0 = 0` is implicit.
    pub times: Vec<f64>,
    /// True when the next passage was not reached within the horizon.
    pub open: bool,
    /// Passages are only resolved to the recording cadence.
    pub resolution: f64,
}

impl Excursions {
    /// Gaps `T_{n+1} - T_n`, including `T_1 - 0`.
    pub fn gaps(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.times
            .iter()
            .map(|&t| {
                let g = t - prev;
                prev = t;
                g
            })
            .collect()
    }
}

/// `T_{n+1} = inf{t > T_n : inf_x u(t) < inf_x u(T_n) / e}`, on the recorded series.
pub fn excursion_times(record: &TrajectoryRecord, max_n: usize) -> Excursions {
    excursion_times_of(&record.times, &record.inf, max_n)
}

pub fn excursion_times_of(times: &[f64], inf: &[f64], max_n: usize) -> Excursions {
    let resolution = if times.len() > 1 { times[1] - times[0] } else { 0.0 };
    let mut out = Vec::new();
    let mut level_index = 0;
    let mut i = 1;
    let mut open = false;
    while out.len() < max_n {
        let base = inf.get(level_index).copied().unwrap_or(f64::NAN);
        if !(base > 0.0) {
            open = true;
            break;
        }
        let target = base / std::f64::consts::E;
        match (i..times.len()).find(|&k| inf[k] < target) {
            Some(k) => {
                out.push(times[k]);
                level_index = k;
                i = k + 1;
            }
            None => {
                open = true;
                break;
            }
        }
    }
    Excursions {
        times: out,
        open,
        resolution,
    }
}

pub const LYAPUNOV_MIN_ENSEMBLE: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub k: f64,
    /// Slope of `log inf_x E|u(t,x)|^k`.
    pub lower: f64,
    /// Slope of `log sup_x E|u(t,x)|^k`.
    pub upper: f64,
    pub lower_half_width: f64,
    pub upper_half_width: f64,
    pub n: usize,
    pub caveat: String,
}

const LYAPUNOV_CAVEAT: &str =
    "log of empirical moments; heavy tails bias these low at small ensemble sizes";

fn moment_slopes(snaps: &[Vec<&GridFunction>], times: &[f64], k: f64, sample: &[usize]) -> Result<(f64, f64)> {
    let mut log_inf = Vec::with_capacity(times.len());
    let mut log_sup = Vec::with_capacity(times.len());
    for per_time in snaps {
        let n_space = per_time[0].len();
        let mut moment = vec![0.0; n_space];
        for &i in sample {
            for (m, v) in moment.iter_mut().zip(per_time[i].values()) {
                *m += v.abs().powf(k);
            }
        }
        let norm = sample.len() as f64;
        let (lo, hi) = moment
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &m| (lo.min(m / norm), hi.max(m / norm)));
        log_inf.push(lo.ln());
        log_sup.push(hi.ln());
    }
    Ok((ols(times, &log_inf)?.slope, ols(times, &log_sup)?.slope))
}

/// Moment Lyapunov slopes from snapshots at the window's snapshot times,
/// with bootstrap half-widths (1.96 bootstrap standard deviations).
pub fn moment_lyapunov_estimate(
    records: &[TrajectoryRecord],
    k: f64,
    window: (f64, f64),
    n_boot: usize,
    seed: u64,
) -> Result<LyapunovEstimate> {
    if records.len() < LYAPUNOV_MIN_ENSEMBLE {
        return Err(Error::InsufficientEnsemble {
            needed: LYAPUNOV_MIN_ENSEMBLE,
            got: records.len(),
        });
    }
    if !(k > 0.0) {
        return Err(Error::domain(format!("moment order must be positive, got {k}")));
    }
    let times: Vec<f64> = records[0]
        .snapshots
        .iter()
        .map(|(t, _)| *t)
        .filter(|&t| t >= window.0 - 1e-12 && t <= window.1 + 1e-12)
        .collect();
    if times.len() < 2 {
        return Err(Error::domain(format!(
            "need snapshots at two or more times inside [{}, {}]",
            window.0, window.1
        )));
    }
    let snaps: Vec<Vec<&GridFunction>> = times
        .iter()
        .map(|&t| {
            records
                .iter()
                .map(|r| {
                    r.snapshot_at(t)
                        .ok_or_else(|| Error::domain(format!("trajectory {} has no snapshot at {t}", r.seed.stream_index)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let all: Vec<usize> = (0..records.len()).collect();
    let (lower, upper) = moment_slopes(&snaps, &times, k, &all)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = records.len();
    let mut lows = Vec::with_capacity(n_boot);
    let mut highs = Vec::with_capacity(n_boot);
    let mut sample = vec![0; n];
    for _ in 0..n_boot {
        for s in sample.iter_mut() {
            *s = rng.random_range(0..n);
        }
        let (lo, hi) = moment_slopes(&snaps, &times, k, &sample)?;
        lows.push(lo);
        highs.push(hi);
    }
    let hw = |v: &[f64]| -> f64 {
        if v.len() < 2 {
            return f64::INFINITY;
        }
        1.96 * stats::sample_variance(v).map(f64::sqrt).unwrap_or(f64::INFINITY)
    };
    Ok(LyapunovEstimate {
        k,
        lower,
        upper,
        lower_half_width: hw(&lows),
        upper_half_width: hw(&highs),
        n,
        caveat: LYAPUNOV_CAVEAT.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(times: Vec<f64>, inf: Vec<f64>) -> TrajectoryRecord {
        let mut r = TrajectoryRecord::empty(&SolverConfig::new(8, 1.0, 1.0));
        let n = times.len();
        r.mass = inf.iter().map(|v| 2.0 * v).collect();
        r.sup = inf.clone();
        r.log_mass = r.mass.iter().map(|m| m.ln()).collect();
        r.inf = inf;
        r.times = times;
        r.qv_n = vec![0.0; n];
        r.negativity_count = vec![0; n];
        r.noise_integral = vec![0.0; n];
        r
    }

    #[test]
    fn mass_examples() {
        assert_eq!(total_mass(&GridFunction::constant(64, 1.0).unwrap()), 2.0);
        assert_eq!(total_mass(&GridFunction::constant(64, 0.0).unwrap()), 0.0);
        let c = GridFunction::from_fn(64, |x| 1.0 + (std::f64::consts::PI * x).cos()).unwrap();
        assert!((total_mass(&c) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn exact_exponential_slope() {
        let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.05).collect();
        let r = synthetic(times.clone(), times.iter().map(|t| (-3.0 * t).exp()).collect());
        let s = log_decay_slope(&r, (0.0, 5.0), Functional::Inf).unwrap();
        assert!((s + 3.0).abs() < 1e-10);
        let mut bad = r.clone();
        bad.inf[7] = 0.0;
        assert!(matches!(
            log_decay_slope(&bad, (0.0, 5.0), Functional::Inf),
            Err(Error::NonPositive { index: 7, .. })
        ));
    }

    #[test]
    fn excursions_of_exponential_inf() {
        let times: Vec<f64> = (0..=500).map(|i| i as f64 * 0.01).collect();
        let r = synthetic(times.clone(), times.iter().map(|t| (-t).exp()).collect());
        let ex = excursion_times(&r, 10);
        assert_eq!(ex.times.len(), 4);
        for (n, t) in ex.times.iter().enumerate() {
            assert!((t - (n + 1) as f64).abs() <= ex.resolution * (n + 1) as f64 + 1e-12, "{t}");
        }
        assert!(ex.open);
        let flat = synthetic(times.clone(), vec![1.0; times.len()]);
        assert!(excursion_times(&flat, 10).times.is_empty());
    }

    #[test]
    fn event_indicator_ties_are_false() {
        let times: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        let r = synthetic(times.clone(), vec![1.0; 11]);
        assert!(!mass_event_indicator(&r, 0.0, 2.0, 1.0).unwrap());
        assert!(!mass_event_indicator(&r, 4.0, 2.0, 1.0).unwrap());
        assert!(mass_event_indicator(&r, 11.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn nearest_index() {
        let r = synthetic(vec![0.0, 0.5, 1.0], vec![1.0; 3]);
        assert_eq!(r.index_at(0.2).unwrap(), 0);
        assert_eq!(r.index_at(0.3).unwrap(), 1);
        assert_eq!(r.index_at(1.0).unwrap(), 2);
        assert!(r.index_at(-0.1).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = synthetic(vec![0.0, 0.5], vec![1.0, 0.5]);
        let csv = r.to_csv(&CsvMeta {
            tool: "she",
            version: "0",
            config_digest: "abc",
        });
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# tool=she"));
        assert_eq!(lines[1], "t,mass,sup,inf,log_mass,qv_n,negativity_count");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("0.0000000000000000e0,2.0000000000000000e0,"));
        assert!(!csv.contains('\r'));
    }
}
