//! Monte Carlo probes over ensembles of trajectories and over synthetic
//! martingales and Bernoulli sequences, plus the plan runner that persists
//! their verdicts.
//!
//! Every probe reports rows of `(estimate, se, bound, bound_kind)`; the verdict
//! is a pure function of those four numbers (see [`BoundKind::verdict`]) so it
//! can be recomputed from the persisted JSONL alone.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::noise::RngSeed;
use crate::observables::{
    excursion_times, log_decay_slope, mass_event_indicator, moment_lyapunov_estimate, qv_lower_bound_check,
    CsvMeta, Functional, TrajectoryRecord,
};
use crate::sigma::Sigma;
use crate::solver::{run_trajectory, SolverConfig};
use crate::stats::{self, bootstrap_sd, kolmogorov_critical, ks_two_sample, ols, Proportion};
use crate::util::{config_digest, derive_seed};

pub const TOOL_NAME: &str = "she";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Noise-resolution heuristic: one step's relative noise `lambda sqrt(dt / dx)`
/// is kept below `sqrt(NOISE_RESOLUTION)`, i.e. `lambda^2 dt / dx <= NOISE_RESOLUTION`.
pub const NOISE_RESOLUTION: f64 = 0.02;

/// Largest `dt` satisfying both `nu dt <= dx^2 / 4` and the noise heuristic.
pub fn resolution_dt(n_space: usize, lambda: f64, diffusion: f64) -> f64 {
    let dx = crate::grid::TORUS_LENGTH / n_space as f64;
    let diffusive = dx * dx / (4.0 * diffusion);
    if lambda == 0.0 {
        diffusive
    } else {
        diffusive.min(NOISE_RESOLUTION * dx / (lambda * lambda))
    }
}

fn resolution_warning(config: &SolverConfig) -> Option<String> {
    let ratio = config.lambda.powi(2) * config.effective_dt() / config.dx();
    (ratio > NOISE_RESOLUTION * (1.0 + 1e-9)).then(|| {
        format!(
            "lambda^2 dt / dx = {ratio:.3e} exceeds {NOISE_RESOLUTION}; steps are noise dominated at lambda = {}",
            config.lambda
        )
    })
}

pub const PROBE_NAMES: &[&str] = &[
    "mass_decay",
    "martingale_tail",
    "large_lambda",
    "void_event",
    "pathwise_decay",
    "excursion_gaps",
    "bernoulli_ld",
    "mass_martingale",
    "lyapunov",
];

fn half() -> f64 {
    0.5
}
fn one() -> f64 {
    1.0
}
fn default_paths() -> usize {
    5000
}
fn default_ks_paths() -> usize {
    10_000
}
fn default_horizon_factor() -> f64 {
    100.0
}
fn default_mg_dt() -> f64 {
    0.02
}
fn default_terminal_slack() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_moments() -> Vec<f64> {
    vec![2.0, 4.0]
}
fn default_lyapunov_moments() -> Vec<f64> {
    vec![2.0, 3.0, 4.0]
}
fn default_delta() -> f64 {
    0.1
}
fn default_boot() -> usize {
    200
}
fn default_final_probability() -> f64 {
    0.9
}
fn default_fraction() -> f64 {
    0.95
}
fn default_quantile() -> f64 {
    0.9
}
fn default_max_n() -> usize {
    1000
}
fn default_dependence() -> f64 {
    0.9
}
fn default_identity_tol() -> f64 {
    1e-12
}
fn default_qv_slack() -> f64 {
    0.15
}
fn default_qv_fraction() -> f64 {
    0.99
}
fn default_points() -> usize {
    5
}

/// One probe and its parameters. `n_trajectories`, where present, uses only
/// the first that many members of the plan's ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "probe", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbeSpec {
    /// `P{M_s >= M_0 exp(-(1 - eps) lambda^2 L^2 s / 4) for some s >= t} <= exp(-eps^2 lambda^2 L^2 t / 16)`.
    MassDecay {
        t: f64,
        #[serde(default = "half")]
        eps: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_trajectories: Option<usize>,
    },
    /// `P{X_s >= eps <X>_s for some s >= T} <= exp(-c T eps^2 / 2)` for synthetic martingales.
    MartingaleTail {
        t: f64,
        #[serde(default = "one")]
        c: f64,
        #[serde(default = "one")]
        eps: f64,
        #[serde(default = "default_paths")]
        n_paths: usize,
        /// Paths are followed on `[T, horizon_factor T]`.
        #[serde(default = "default_horizon_factor")]
        horizon_factor: f64,
        #[serde(default = "default_mg_dt")]
        dt: f64,
        /// Paths per side of the time-inversion comparison; 0 skips it.
        #[serde(default = "default_ks_paths")]
        ks_paths: usize,
    },
    /// `p(lambda) = P{sup_x u(t) > exp(-L^2 lambda^2 t / 64)}` over a sweep.
    LargeLambda {
        lambdas: Vec<f64>,
        t: f64,
        /// Shrink `dt` per lambda to satisfy the noise-resolution heuristic.
        #[serde(default = "default_true")]
        auto_dt: bool,
        #[serde(default = "default_terminal_slack")]
        slack: f64,
    },
    /// `B(t) = A(t - 1/2) and {inf_{s <= t} inf_x u(s) >= exp(-4t/tau) inf u0}`.
    VoidEvent {
        t_grid: Vec<f64>,
        #[serde(default = "default_moments")]
        moments: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tau: Option<f64>,
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default = "default_final_probability")]
        min_final_probability: f64,
        #[serde(default = "default_boot")]
        n_boot: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_trajectories: Option<usize>,
    },
    /// Ensemble proxies for almost-sure decay of `sup_x u`.
    PathwiseDecay {
        window: [f64; 2],
        #[serde(default = "default_quantile")]
        upper_quantile: f64,
        #[serde(default = "default_fraction")]
        min_fraction: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_trajectories: Option<usize>,
    },
    /// Frequency of `T_{n+1} - T_n > tau` over excursion gaps with `n >= 1`.
    ExcursionGaps {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tau: Option<f64>,
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default = "default_max_n")]
        max_n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_trajectories: Option<usize>,
    },
    /// `P{J_1 + ... + J_n <= n q (1 - eps)} <= exp(-n q eps^2 / 2)`.
    BernoulliLd {
        q: f64,
        eps: f64,
        n: usize,
        trials: usize,
        /// The dependent construction draws `J_{k+1} ~ Bernoulli(max(q, dependence J_k))`.
        #[serde(default = "default_dependence")]
        dependence: f64,
    },
    /// Martingale property of the total mass and the discrete mass identity.
    MassMartingale {
        #[serde(default = "default_identity_tol")]
        identity_tol: f64,
        #[serde(default = "default_qv_slack")]
        qv_slack: f64,
        #[serde(default = "default_qv_fraction")]
        qv_min_fraction: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_trajectories: Option<usize>,
    },
    /// Moment Lyapunov slopes and the monotonicity of `gamma(k) / k`.
    Lyapunov {
        #[serde(default = "default_lyapunov_moments")]
        moments: Vec<f64>,
        window: [f64; 2],
        #[serde(default = "default_points")]
        n_points: usize,
        #[serde(default = "default_boot")]
        n_boot: usize,
    },
}

impl ProbeSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeSpec::MassDecay { .. } => "mass_decay",
            ProbeSpec::MartingaleTail { .. } => "martingale_tail",
            ProbeSpec::LargeLambda { .. } => "large_lambda",
            ProbeSpec::VoidEvent { .. } => "void_event",
            ProbeSpec::PathwiseDecay { .. } => "pathwise_decay",
            ProbeSpec::ExcursionGaps { .. } => "excursion_gaps",
            ProbeSpec::BernoulliLd { .. } => "bernoulli_ld",
            ProbeSpec::MassMartingale { .. } => "mass_martingale",
            ProbeSpec::Lyapunov { .. } => "lyapunov",
        }
    }

    /// Parameters as a JSON object, without the `probe` tag.
    pub fn params(&self) -> Value {
        let mut v = serde_json::to_value(self).unwrap_or(Value::Null);
        if let Some(map) = v.as_object_mut() {
            map.remove("probe");
        }
        v
    }

    fn uses_ensemble(&self) -> bool {
        !matches!(
            self,
            ProbeSpec::MartingaleTail { .. } | ProbeSpec::BernoulliLd { .. } | ProbeSpec::LargeLambda { .. }
        )
    }

    fn snapshot_times(&self) -> Vec<f64> {
        match self {
            ProbeSpec::Lyapunov { window, n_points, .. } => lyapunov_times(*window, *n_points),
            _ => Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(format!("{}: {msg}", self.name())));
        let unit = |x: f64| x > 0.0 && x < 1.0;
        match self {
            ProbeSpec::MassDecay { t, eps, .. } => {
                if !(*t > 0.0) || !unit(*eps) {
                    return bad(format!("need t > 0 and eps in (0, 1), got t = {t}, eps = {eps}"));
                }
            }
            ProbeSpec::MartingaleTail {
                t,
                c,
                eps,
                n_paths,
                horizon_factor,
                dt,
                ..
            } => {
                if !(*t > 0.0 && *c > 0.0 && *eps > 0.0 && *horizon_factor > 1.0 && *dt > 0.0) || *n_paths < 2 {
                    return bad("need T, c, eps, dt > 0, horizon_factor > 1 and n_paths >= 2".into());
                }
            }
            ProbeSpec::LargeLambda { lambdas, t, slack, .. } => {
                if !(*t > 0.0) {
                    return bad(format!(
                        "t must be positive; at t = 0 the threshold is 1 and sup u0 may already exceed it (got {t})"
                    ));
                }
                if lambdas.len() < 2 || lambdas.windows(2).any(|w| !(w[1] > w[0])) || lambdas[0] <= 0.0 {
                    return bad(format!("lambdas must be positive and strictly increasing, got {lambdas:?}"));
                }
                if !(0.0..1.0).contains(slack) {
                    return bad(format!("slack must lie in [0, 1), got {slack}"));
                }
            }
            ProbeSpec::VoidEvent {
                t_grid,
                moments,
                tau,
                delta,
                min_final_probability,
                ..
            } => {
                if t_grid.len() < 2 || t_grid[0] < 0.5 || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
                    return bad(format!("t_grid must be increasing with entries >= 1/2, got {t_grid:?}"));
                }
                if moments.iter().any(|&k| !(k > 0.0)) || tau.is_some_and(|v| !(v > 0.0)) || !(*delta > 0.0) {
                    return bad("moments, tau and delta must be positive".into());
                }
                if !(0.0..=1.0).contains(min_final_probability) {
                    return bad(format!("min_final_probability must lie in [0, 1], got {min_final_probability}"));
                }
            }
            ProbeSpec::PathwiseDecay {
                window,
                upper_quantile,
                min_fraction,
                ..
            } => {
                if !(window[1] > window[0] && window[0] >= 0.0) || !unit(*upper_quantile) {
                    return bad(format!("need 0 <= window[0] < window[1] and a quantile in (0, 1), got {window:?}"));
                }
                if !(0.0..=1.0).contains(min_fraction) {
                    return bad(format!("min_fraction must lie in [0, 1], got {min_fraction}"));
                }
            }
            ProbeSpec::ExcursionGaps { tau, delta, max_n, .. } => {
                if tau.is_some_and(|v| !(v > 0.0)) || !(*delta > 0.0) || *max_n < 2 {
                    return bad("tau and delta must be positive and max_n >= 2".into());
                }
            }
            ProbeSpec::BernoulliLd {
                q,
                eps,
                n,
                trials,
                dependence,
            } => {
                if !(*q > 0.0 && *q <= 1.0) {
                    return bad(format!("q must lie in (0, 1], got {q}"));
                }
                if !unit(*eps) {
                    return bad(format!("eps must lie in (0, 1), got {eps}"));
                }
                if *n == 0 || *trials < 2 || !(0.0..=1.0).contains(dependence) {
                    return bad("need n >= 1, trials >= 2 and dependence in [0, 1]".into());
                }
            }
            ProbeSpec::MassMartingale {
                identity_tol,
                qv_slack,
                qv_min_fraction,
                ..
            } => {
                if !(*identity_tol > 0.0) || !(0.0..1.0).contains(qv_slack) || !(0.0..=1.0).contains(qv_min_fraction) {
                    return bad("identity_tol > 0, qv_slack in [0, 1) and qv_min_fraction in [0, 1] required".into());
                }
            }
            ProbeSpec::Lyapunov {
                moments,
                window,
                n_points,
                ..
            } => {
                if moments.len() < 2 || moments.windows(2).any(|w| !(w[1] > w[0])) || moments[0] <= 0.0 {
                    return bad(format!("moments must be positive and increasing, got {moments:?}"));
                }
                if !(window[1] > window[0] && window[0] >= 0.0) || *n_points < 2 {
                    return bad(format!("need 0 <= window[0] < window[1] and n_points >= 2, got {window:?}"));
                }
            }
        }
        Ok(())
    }
}

fn lyapunov_times(window: [f64; 2], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| window[0] + (window[1] - window[0]) * i as f64 / (n - 1) as f64)
        .collect()
}

/// A sweep of probes over one solver configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    /// Template for every trajectory; trajectory `i` uses stream `i` of
    /// `solver.seed.master_seed`.
    pub solver: SolverConfig,
    pub n_trajectories: usize,
    #[serde(default)]
    pub probes: Vec<ProbeSpec>,
    /// Also write one CSV per ensemble trajectory.
    #[serde(default)]
    pub write_trajectories: bool,
    /// Stamp `wall_ms` into result rows. Off by default so reruns are byte-identical.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentPlan {
    pub fn new(name: impl Into<String>, solver: SolverConfig, n_trajectories: usize) -> Self {
        ExperimentPlan {
            name: name.into(),
            solver,
            n_trajectories,
            probes: Vec::new(),
            write_trajectories: false,
            record_wall_time: false,
        }
    }

    pub fn with_probe(mut self, probe: ProbeSpec) -> Self {
        self.probes.push(probe);
        self
    }

    pub fn validate(&self) -> Result<Sigma> {
        if self.n_trajectories < 2 {
            return Err(Error::config(format!(
                "n_trajectories must be at least 2, got {}",
                self.n_trajectories
            )));
        }
        let sigma = self.solver.validate()?;
        for p in &self.probes {
            p.validate()?;
        }
        Ok(sigma)
    }

    pub fn digest(&self) -> Result<String> {
        config_digest(self)
    }

    /// The solver template with every snapshot time the probes need.
    fn ensemble_template(&self) -> SolverConfig {
        let mut c = self.solver.clone();
        let mut times = c.snapshot_times.clone();
        times.extend(self.probes.iter().flat_map(ProbeSpec::snapshot_times));
        times.sort_by(f64::total_cmp);
        times.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        c.snapshot_times = times;
        c
    }
}

/// Runs trajectories `0..n` of `template` on the current rayon pool.
/// Results come back in stream order whatever the pool size.
pub fn run_ensemble(template: &SolverConfig, n: usize) -> Result<Vec<TrajectoryRecord>> {
    template.validate()?;
    let u0 = template.initial.sample(template.n_space)?;
    let results: Vec<Result<TrajectoryRecord>> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut c = template.clone();
            c.seed.stream_index = i;
            run_trajectory(&u0, &c)
        })
        .collect();
    results.into_iter().collect()
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot build a pool of {workers} workers: {e}")))
}

/// How the bound is compared with the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    /// `estimate <= bound + 3 se`.
    Upper,
    /// `estimate >= bound - 3 se`.
    Lower,
    /// `estimate <= bound`.
    AtMost,
    /// `estimate >= bound`.
    AtLeast,
    /// `estimate < bound`.
    Below,
    /// `estimate + 1.96 se < bound`: a one-sided 95% interval sits below the bound.
    CiBelow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Indeterminate,
    NotApplicable,
}

impl BoundKind {
    pub fn verdict(self, estimate: f64, se: f64, bound: f64) -> Verdict {
        if !estimate.is_finite() || !se.is_finite() || !bound.is_finite() {
            return Verdict::Indeterminate;
        }
        let ok = match self {
            BoundKind::Upper => estimate <= bound + 3.0 * se,
            BoundKind::Lower => estimate >= bound - 3.0 * se,
            BoundKind::AtMost => estimate <= bound,
            BoundKind::AtLeast => estimate >= bound,
            BoundKind::Below => estimate < bound,
            BoundKind::CiBelow => estimate + 1.96 * se < bound,
        };
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

/// One JSONL result record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub probe: String,
    pub params: Value,
    pub estimate: f64,
    pub se: f64,
    pub bound: f64,
    pub bound_kind: BoundKind,
    pub verdict: Verdict,
    pub n: usize,
    pub seed: u64,
    pub wall_ms: Option<u64>,
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub detail: Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ResultRow {
    /// The verdict implied by the persisted numbers; differs from `verdict`
    /// only for rows overridden to not-applicable or indeterminate.
    pub fn recomputed_verdict(&self) -> Verdict {
        self.bound_kind.verdict(self.estimate, self.se, self.bound)
    }
}

/// A probe that raised an error instead of producing rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeFailure {
    pub probe: String,
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMetadata {
    pub tool: String,
    pub version: String,
    pub plan: String,
    pub config_digest: String,
    pub master_seed: u64,
    pub n_trajectories: usize,
    pub probes: Vec<String>,
    pub notes: Vec<String>,
}

/// Everything `run_plan` produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub metadata: PlanMetadata,
    pub rows: Vec<ResultRow>,
    pub failures: Vec<ProbeFailure>,
}

impl PlanOutcome {
    pub fn any_fail(&self) -> bool {
        self.rows.iter().any(|r| r.verdict == Verdict::Fail)
    }

    pub fn rows_for(&self, probe: &str) -> impl Iterator<Item = &ResultRow> + '_ {
        let probe = probe.to_string();
        self.rows.iter().filter(move |r| r.probe == probe)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Metadata plus failures as pretty JSON.
    pub fn bundle_json(&self) -> Result<String> {
        let v = json!({ "metadata": self.metadata, "failures": self.failures });
        Ok(serde_json::to_string_pretty(&v)? + "\n")
    }

    /// A fixed-width verdict table for terminals.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16} {:<22} {:>13} {:>11} {:>13} {:<9} {}\n",
            "probe", "case", "estimate", "se", "bound", "kind", "verdict"
        );
        for r in &self.rows {
            let case = r.detail.get("case").and_then(Value::as_str).unwrap_or("-");
            out.push_str(&format!(
                "{:<16} {:<22} {:>13.5e} {:>11.3e} {:>13.5e} {:<9} {:?}\n",
                r.probe,
                case,
                r.estimate,
                r.se,
                r.bound,
                serde_json::to_value(r.bound_kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
                r.verdict
            ));
        }
        for f in &self.failures {
            out.push_str(&format!("{:<16} error: {}\n", f.probe, f.error));
        }
        out
    }
}

pub const RESULTS_FILE: &str = "results.jsonl";
pub const BUNDLE_FILE: &str = "bundle.json";
pub const TRAJECTORY_DIR: &str = "trajectories";

/// Shared state while a plan runs: the lazily built ensemble.
struct Runner<'p> {
    plan: &'p ExperimentPlan,
    sigma: Sigma,
    digest: String,
    ensemble: Option<Vec<TrajectoryRecord>>,
}

struct Row {
    estimate: f64,
    se: f64,
    bound: f64,
    kind: BoundKind,
    n: usize,
    seed: u64,
    detail: Value,
    notes: Vec<String>,
    verdict: Option<Verdict>,
}

impl Row {
    fn new(estimate: f64, se: f64, bound: f64, kind: BoundKind, n: usize, seed: u64) -> Self {
        Row {
            estimate,
            se,
            bound,
            kind,
            n,
            seed,
            detail: Value::Null,
            notes: Vec::new(),
            verdict: None,
        }
    }

    fn detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    fn force(mut self, verdict: Verdict) -> Self {
        self.verdict = Some(verdict);
        self
    }
}

impl<'p> Runner<'p> {
    fn ensemble(&mut self, n: Option<usize>) -> Result<&[TrajectoryRecord]> {
        let total = self.plan.n_trajectories;
        let n = n.unwrap_or(total);
        if n > total || n < 2 {
            return Err(Error::config(format!(
                "probe asks for {n} trajectories; the plan has {total}"
            )));
        }
        if self.ensemble.is_none() {
            self.ensemble = Some(run_ensemble(&self.plan.ensemble_template(), total)?);
        }
        Ok(&self.ensemble.as_ref().expect("just built")[..n])
    }

    fn master_seed(&self) -> u64 {
        self.plan.solver.seed.master_seed
    }

    fn test_mode(&self) -> bool {
        self.plan.solver.lambda == 0.0
    }

    fn run_probe(&mut self, probe: &ProbeSpec) -> Result<Vec<Row>> {
        let mut rows = match probe {
            ProbeSpec::MassDecay { t, eps, n_trajectories } => self.mass_decay(*t, *eps, *n_trajectories)?,
            ProbeSpec::MartingaleTail {
                t,
                c,
                eps,
                n_paths,
                horizon_factor,
                dt,
                ks_paths,
            } => martingale_tail(
                derive_seed(self.master_seed(), "martingale_tail"),
                *t,
                *c,
                *eps,
                *n_paths,
                *horizon_factor,
                *dt,
                *ks_paths,
            )?,
            ProbeSpec::LargeLambda {
                lambdas,
                t,
                auto_dt,
                slack,
            } => self.large_lambda(lambdas, *t, *auto_dt, *slack)?,
            ProbeSpec::VoidEvent {
                t_grid,
                moments,
                tau,
                delta,
                min_final_probability,
                n_boot,
                n_trajectories,
            } => self.void_event(t_grid, moments, *tau, *delta, *min_final_probability, *n_boot, *n_trajectories)?,
            ProbeSpec::PathwiseDecay {
                window,
                upper_quantile,
                min_fraction,
                n_trajectories,
            } => self.pathwise_decay(*window, *upper_quantile, *min_fraction, *n_trajectories)?,
            ProbeSpec::ExcursionGaps {
                tau,
                delta,
                max_n,
                n_trajectories,
            } => self.excursion_gaps(*tau, *delta, *max_n, *n_trajectories)?,
            ProbeSpec::BernoulliLd {
                q,
                eps,
                n,
                trials,
                dependence,
            } => bernoulli_ld(derive_seed(self.master_seed(), "bernoulli_ld"), *q, *eps, *n, *trials, *dependence)?,
            ProbeSpec::MassMartingale {
                identity_tol,
                qv_slack,
                qv_min_fraction,
                n_trajectories,
            } => self.mass_martingale(*identity_tol, *qv_slack, *qv_min_fraction, *n_trajectories)?,
            ProbeSpec::Lyapunov {
                moments, window, n_boot, ..
            } => self.lyapunov(moments, *window, *n_boot)?,
        };
        if probe.uses_ensemble() {
            if let Some(w) = resolution_warning(&self.plan.solver) {
                for r in &mut rows {
                    r.notes.push(w.clone());
                }
            }
        }
        Ok(rows)
    }

    fn mass_decay(&mut self, t: f64, eps: f64, n: Option<usize>) -> Result<Vec<Row>> {
        let horizon = self.plan.solver.horizon;
        if horizon < 2.0 * t {
            return Err(Error::Horizon { time: 2.0 * t, horizon });
        }
        let lambda = self.plan.solver.lambda;
        let l = self.sigma.l_sigma();
        let rate = (lambda * l).powi(2);
        let seed = self.master_seed();
        let test_mode = self.test_mode();
        let recs = self.ensemble(n)?;
        let violated = |r: &TrajectoryRecord| {
            r.times
                .iter()
                .zip(&r.mass)
                .filter(|(&s, _)| s >= t - 1e-12)
                .any(|(&s, &m)| m >= r.mass[0] * (-(1.0 - eps) * rate * s / 4.0).exp())
        };
        let p = Proportion::from_flags(recs.iter().map(violated))?;
        let bound = (-eps * eps * rate * t / 16.0).exp();
        let mut tail = Row::new(p.estimate, p.se, bound, BoundKind::Upper, p.n, seed)
            .detail(json!({ "case": "tail", "violations": p.successes, "t": t, "eps": eps, "l_sigma": l }));

        let flags = recs
            .iter()
            .map(|r| mass_event_indicator(r, t, lambda, l))
            .collect::<Result<Vec<_>>>()?;
        let a = Proportion::from_flags(flags)?;
        let mut event = Row::new(a.estimate, a.se, 1.0 - (-rate * t / 64.0).exp(), BoundKind::Lower, a.n, seed)
            .detail(json!({ "case": "event_a", "hits": a.successes, "t": t, "l_sigma": l }));
        if test_mode {
            tail = tail
                .force(Verdict::NotApplicable)
                .note("lambda = 0: the mass is constant and the bound requires lambda > 0");
            event = event.force(Verdict::NotApplicable).note("lambda = 0: no decay to detect");
        }
        Ok(vec![tail, event])
    }

    fn large_lambda(&mut self, lambdas: &[f64], t: f64, auto_dt: bool, slack: f64) -> Result<Vec<Row>> {
        let l = self.sigma.l_sigma();
        let n = self.plan.n_trajectories;
        let mut per = Vec::new();
        let mut notes = Vec::new();
        let mut values = Vec::new();
        let mut zero_counts = Vec::new();
        for &lambda in lambdas {
            let mut c = self.plan.solver.clone();
            c.lambda = lambda;
            c.horizon = t;
            c.snapshot_times.clear();
            c.seed.master_seed = derive_seed(self.master_seed(), &format!("large_lambda:{lambda}"));
            if auto_dt {
                c.dt = c.dt.min(resolution_dt(c.n_space, lambda, c.diffusion));
            }
            c.output_every = Some(c.n_steps().max(1));
            if let Some(w) = resolution_warning(&c) {
                notes.push(w);
            }
            let threshold = (-(l * lambda).powi(2) * t / 64.0).exp();
            let recs = run_ensemble(&c, n)?;
            let p = Proportion::from_flags(recs.iter().map(|r| *r.sup.last().expect("nonempty record") > threshold))?;
            let upper = p.upper_or_rule_of_three();
            let value = upper.ln() / (lambda * lambda);
            values.push(value);
            zero_counts.push(p.successes == 0);
            per.push(json!({
                "lambda": lambda,
                "dt": c.effective_dt(),
                "threshold": threshold,
                "exceedances": p.successes,
                "p_hat": p.estimate,
                "se": p.se,
                "p_used": upper,
                "rule_of_three": p.successes == 0,
                "log_p_over_lambda2": value,
            }));
        }
        let max_step = values.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        let seed = self.master_seed();
        let mut mono = Row::new(max_step, 0.0, 0.0, BoundKind::Below, n, seed)
            .detail(json!({ "case": "monotone", "sweep": per.clone(), "t": t, "l_sigma": l }))
            .note("the limit in lambda is asymptotic and not desk-verifiable; finite-lambda verdicts are heuristic");
        if zero_counts[..zero_counts.len() - 1].iter().any(|&z| z) {
            mono = mono
                .force(Verdict::Indeterminate)
                .note("a zero count before the largest lambda makes the comparison one-sided in the wrong direction");
        }
        let last = values[values.len() - 1];
        let target = -l * l * t / 64.0 * (1.0 - slack);
        let mut terminal = Row::new(last, 0.0, target, BoundKind::AtMost, n, seed)
            .detail(json!({ "case": "terminal", "lambda": lambdas[lambdas.len() - 1], "zero_count": zero_counts[zero_counts.len() - 1] }));
        if zero_counts[zero_counts.len() - 1] {
            terminal = terminal
                .force(Verdict::Pass)
                .note(format!("no exceedances at the largest lambda; p <= {:.3e} by the rule of three", stats::rule_of_three(n)));
        }
        for w in notes {
            mono = mono.note(w.clone());
            terminal = terminal.note(w);
        }
        if self.test_mode() {
            mono = mono.force(Verdict::NotApplicable);
        }
        Ok(vec![mono, terminal])
    }

    #[allow(clippy::too_many_arguments)]
    fn void_event(
        &mut self,
        t_grid: &[f64],
        moments: &[f64],
        tau: Option<f64>,
        delta: f64,
        min_final: f64,
        n_boot: usize,
        n: Option<usize>,
    ) -> Result<Vec<Row>> {
        let horizon = self.plan.solver.horizon;
        let t_max = t_grid[t_grid.len() - 1];
        if t_max > horizon + 1e-12 {
            return Err(Error::Horizon { time: t_max, horizon });
        }
        let lambda = self.plan.solver.lambda;
        let (l, lip) = (self.sigma.l_sigma(), self.sigma.lip_sigma());
        let tau = tau.unwrap_or_else(|| tau_surrogate(delta, lambda, lip));
        let seed = self.master_seed();
        let test_mode = self.test_mode();
        let recs = self.ensemble(n)?;
        let n = recs.len();

        // flags[t][i] and sup(t)[i]
        let mut flags = Vec::with_capacity(t_grid.len());
        let mut sups = Vec::with_capacity(t_grid.len());
        for &t in t_grid {
            let mut f = Vec::with_capacity(n);
            let mut s = Vec::with_capacity(n);
            for r in recs {
                let a1 = mass_event_indicator(r, t - 0.5, lambda, l)?;
                let it = r.index_at(t)?;
                let floor = (-4.0 * t / tau).exp() * r.inf[0];
                let a2 = r.inf[..=it].iter().all(|&v| v >= floor);
                f.push(a1 && a2);
                s.push(r.sup[it]);
            }
            flags.push(f);
            sups.push(s);
        }

        let mut rows = Vec::new();
        let mut probs = Vec::new();
        let rate = (lambda * l).powi(2);
        for (k, &t) in t_grid.iter().enumerate() {
            let p = Proportion::from_flags(flags[k].iter().copied())?;
            probs.push(p.estimate);
            let bound = 1.0 - (-t / (4.0 * tau)).exp() - (rate / 128.0).exp() * (-rate * t / 64.0).exp();
            rows.push(
                Row::new(p.estimate, p.se, bound, BoundKind::Lower, n, seed)
                    .detail(json!({ "case": format!("probability_t{t}"), "t": t, "hits": p.successes, "tau": tau })),
            );
        }
        let min_step = probs.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        rows.push(
            Row::new(min_step, 0.0, 0.0, BoundKind::AtLeast, n, seed)
                .detail(json!({ "case": "nondecreasing", "t_grid": t_grid, "p_hat": probs })),
        );
        let last = probs[probs.len() - 1];
        let last_se = (last * (1.0 - last) / n as f64).sqrt();
        rows.push(
            Row::new(last, last_se, min_final, BoundKind::AtLeast, n, seed)
                .detail(json!({ "case": "final_probability", "t": t_max })),
        );

        for (ki, &kk) in moments.iter().enumerate() {
            let statistic = |sample: &[usize]| -> Result<(f64, f64, Vec<f64>)> {
                let mut logs = Vec::with_capacity(t_grid.len());
                for k in 0..t_grid.len() {
                    let m = sample
                        .iter()
                        .map(|&i| if flags[k][i] { sups[k][i].abs().powf(kk) } else { 0.0 })
                        .sum::<f64>()
                        / sample.len() as f64;
                    logs.push(m.ln());
                }
                let fit = ols(t_grid, &logs)?;
                Ok((fit.slope, fit.intercept, logs))
            };
            let all: Vec<usize> = (0..n).collect();
            let (slope, intercept, logs) = statistic(&all)?;
            let sd = bootstrap_sd(&all, n_boot, derive_seed(seed, &format!("void_event:boot:{ki}")), |s| {
                statistic(s).map(|v| v.0)
            })?;
            rows.push(
                Row::new(slope, sd, 0.0, BoundKind::CiBelow, n, seed).detail(json!({
                    "case": format!("moment_k{kk}"),
                    "k": kk,
                    "log_moment": logs,
                    "intercept": intercept,
                    "n_boot": n_boot,
                })),
            );
        }
        if test_mode {
            for r in &mut rows {
                r.verdict = Some(Verdict::NotApplicable);
                r.notes.push("lambda = 0: A(t) never occurs, so P(B) = 0 trivially".into());
            }
        }
        for r in &mut rows {
            r.notes.push(format!(
                "tau = {tau:.4e} is a surrogate (delta = {delta}); its constant is not known explicitly"
            ));
        }
        Ok(rows)
    }

    fn pathwise_decay(&mut self, window: [f64; 2], q: f64, min_fraction: f64, n: Option<usize>) -> Result<Vec<Row>> {
        let horizon = self.plan.solver.horizon;
        if window[1] > horizon + 1e-12 {
            return Err(Error::Horizon { time: window[1], horizon });
        }
        let seed = self.master_seed();
        let recs = self.ensemble(n)?;
        let n = recs.len();
        let rates = recs
            .iter()
            .map(|r| {
                let s = *r.sup.last().expect("nonempty record");
                if s > 0.0 {
                    Ok(s.ln() / r.horizon())
                } else {
                    Err(Error::NonPositive { index: r.len() - 1, value: s })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let slopes = recs
            .iter()
            .map(|r| log_decay_slope(r, (window[0], window[1]), Functional::Sup))
            .collect::<Result<Vec<_>>>()?;
        let med = stats::median(&rates)?;
        let upper = stats::quantile(&rates, q)?;
        let neg = Proportion::from_flags(slopes.iter().map(|&s| s < 0.0))?;
        Ok(vec![
            Row::new(med, 0.0, 0.0, BoundKind::Below, n, seed)
                .detail(json!({ "case": "median_rate", "horizon": horizon })),
            Row::new(upper, 0.0, 0.0, BoundKind::Below, n, seed)
                .detail(json!({ "case": format!("quantile_{q}_rate"), "horizon": horizon })),
            Row::new(neg.estimate, neg.se, min_fraction, BoundKind::AtLeast, n, seed).detail(json!({
                "case": "negative_slope_fraction",
                "window": window,
                "median_slope": stats::median(&slopes)?,
            })),
        ])
    }

    fn excursion_gaps(&mut self, tau: Option<f64>, delta: f64, max_n: usize, n: Option<usize>) -> Result<Vec<Row>> {
        let lambda = self.plan.solver.lambda;
        let lip = self.sigma.lip_sigma();
        let tau = tau.unwrap_or_else(|| tau_surrogate(delta, lambda, lip));
        let seed = self.master_seed();
        let recs = self.ensemble(n)?;
        let n = recs.len();
        let mut resolution = 0.0f64;
        let mut flags = Vec::new();
        let mut counts = Vec::with_capacity(n);
        for r in recs {
            let ex = excursion_times(r, max_n);
            resolution = resolution.max(ex.resolution);
            let gaps = ex.gaps();
            counts.push(gaps.len());
            flags.extend(gaps.iter().skip(1).map(|&g| g > tau));
        }
        if flags.is_empty() {
            return Err(Error::InsufficientEnsemble { needed: 1, got: 0 });
        }
        let p = Proportion::from_flags(flags)?;
        let mut row = Row::new(p.estimate, p.se, 0.5, BoundKind::Lower, p.n, seed)
            .detail(json!({
                "case": "gap_exceeds_tau",
                "tau": tau,
                "resolution": resolution,
                "trajectories": n,
                "mean_passages": stats::mean(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>()),
            }))
            .note(format!("passage times resolved to the recording cadence {resolution:.3e}"))
            .note("gaps are pooled across n; the binomial SE treats them as independent")
            .note(format!("tau = {tau:.4e} is a surrogate (delta = {delta})"));
        if tau < resolution {
            row = row
                .force(Verdict::Indeterminate)
                .note("tau is below the recording cadence, so every resolved gap exceeds it");
        }
        if self.test_mode() {
            row = row.force(Verdict::NotApplicable);
        }
        Ok(vec![row])
    }

    fn mass_martingale(&mut self, tol: f64, qv_slack: f64, qv_min: f64, n: Option<usize>) -> Result<Vec<Row>> {
        let lambda = self.plan.solver.lambda;
        let l = self.sigma.l_sigma();
        let seed = self.master_seed();
        let test_mode = self.test_mode();
        let recs = self.ensemble(n)?;
        let n = recs.len();
        let len = recs.iter().map(TrajectoryRecord::len).min().unwrap_or(0);
        let m0 = recs[0].mass[0];

        let mut worst_z = 0.0f64;
        let mut worst_time = 0.0;
        for i in 0..len {
            let col: Vec<f64> = recs.iter().map(|r| r.mass[i]).collect();
            let (m, se) = stats::mean_se(&col)?;
            let z = if se > 0.0 {
                (m - m0).abs() / se
            } else if (m - m0).abs() <= 1e-12 * m0 {
                0.0
            } else {
                f64::INFINITY
            };
            if z > worst_z {
                worst_z = z;
                worst_time = recs[0].times[i];
            }
        }

        let defect = recs
            .iter()
            .flat_map(|r| r.mass.iter().zip(&r.noise_integral).map(move |(m, ni)| (m - r.mass[0] - ni).abs() / r.mass[0]))
            .fold(0.0f64, f64::max);

        let mid = len / 2;
        let first: Vec<f64> = recs.iter().map(|r| r.mass[mid] - r.mass[0]).collect();
        let second: Vec<f64> = recs.iter().map(|r| r.mass[len - 1] - r.mass[mid]).collect();
        let corr = if test_mode { 0.0 } else { stats::correlation(&first, &second)? };

        let qv = Proportion::from_flags(recs.iter().map(|r| qv_lower_bound_check(r, lambda, l, qv_slack).holds))?;
        let mut rows = vec![
            Row::new(worst_z, 0.0, 3.0, BoundKind::AtMost, n, seed)
                .detail(json!({ "case": "mean_within_3se", "worst_time": worst_time, "recorded_times": len })),
            Row::new(defect, 0.0, tol, BoundKind::AtMost, n, seed).detail(json!({ "case": "discrete_identity" })),
            Row::new(corr.abs(), 1.0 / (n as f64).sqrt(), 0.0, BoundKind::Upper, n, seed).detail(json!({
                "case": "increment_correlation",
                "split_time": recs[0].times[mid],
                "correlation": corr,
            })),
            Row::new(qv.estimate, qv.se, qv_min, BoundKind::AtLeast, n, seed)
                .detail(json!({ "case": "qv_rate", "slack": qv_slack, "l_sigma": l })),
        ];
        if test_mode {
            rows[2] = Row::new(0.0, 0.0, 0.0, BoundKind::Upper, n, seed)
                .detail(json!({ "case": "increment_correlation" }))
                .force(Verdict::NotApplicable)
                .note("lambda = 0: increments vanish");
        }
        Ok(rows)
    }

    fn lyapunov(&mut self, moments: &[f64], window: [f64; 2], n_boot: usize) -> Result<Vec<Row>> {
        let horizon = self.plan.solver.horizon;
        if window[1] > horizon + 1e-12 {
            return Err(Error::Horizon { time: window[1], horizon });
        }
        let seed = self.master_seed();
        let recs = self.ensemble(None)?;
        let n = recs.len();
        let boot = |rs: &[TrajectoryRecord], tag: &str, k: f64| {
            moment_lyapunov_estimate(rs, k, (window[0], window[1]), n_boot, derive_seed(seed, &format!("lyapunov:{tag}:{k}")))
        };
        let full = moments.iter().map(|&k| boot(recs, "all", k)).collect::<Result<Vec<_>>>()?;
        let mono = full
            .windows(2)
            .map(|w| {
                let (a, b) = (&w[0], &w[1]);
                a.upper / a.k - b.upper / b.k - (a.upper_half_width / a.k + b.upper_half_width / b.k)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let half = n / 2;
        let (left, right) = recs.split_at(half);
        let mut split = f64::NEG_INFINITY;
        let mut halves = Vec::new();
        for &k in moments {
            let a = boot(left, "first_half", k)?;
            let b = boot(right, "second_half", k)?;
            split = split.max((a.upper - b.upper).abs() - (a.upper_half_width + b.upper_half_width));
            halves.push(json!({ "k": k, "first": a.upper, "second": b.upper, "first_hw": a.upper_half_width, "second_hw": b.upper_half_width }));
        }
        let caveat = full[0].caveat.clone();
        Ok(vec![
            Row::new(mono, 0.0, 0.0, BoundKind::AtMost, n, seed)
                .detail(json!({ "case": "gamma_over_k_nondecreasing", "estimates": full }))
                .note(caveat.clone()),
            Row::new(split, 0.0, 0.0, BoundKind::AtMost, n, seed)
                .detail(json!({ "case": "halves_agree", "halves": halves }))
                .note(caveat),
        ])
    }
}

/// `delta^2 / (lambda Lip)^4`, capped at 1.
pub fn tau_surrogate(delta: f64, lambda: f64, lip_sigma: f64) -> f64 {
    let denom = (lambda * lip_sigma).powi(4);
    if denom == 0.0 {
        1.0
    } else {
        (delta * delta / denom).min(1.0)
    }
}

/// Simulates `dX = s(X) dB` with `s^2 = c` (Brownian) or `s^2 = c (1 + 1 / (1 + X^2))`
/// and reports whether `X_t >= eps <X>_t` at some grid time `t >= T`.
fn martingale_exceeds(seed: RngSeed, time_changed: bool, t: f64, c: f64, eps: f64, end: f64, dt: f64) -> bool {
    let mut rng = seed.rng();
    let steps = (end / dt).ceil() as usize;
    let sdt = dt.sqrt();
    let (mut x, mut qv) = (0.0f64, 0.0f64);
    for k in 1..=steps {
        let s2 = if time_changed { c * (1.0 + 1.0 / (1.0 + x * x)) } else { c };
        let z: f64 = rng.sample(StandardNormal);
        x += s2.sqrt() * sdt * z;
        qv += s2 * dt;
        if k as f64 * dt >= t - 1e-12 && x >= eps * qv {
            return true;
        }
    }
    false
}

/// `max(0, max_k B(s_k) / s_k)` on a geometric grid `s_0 = a < ... < s_K = a * span`
/// (`inverted = false`), or `max(0, max_k B(1 / s_k))` on the reciprocal grid.
/// The two have the same law by Brownian time inversion.
fn inversion_sample(seed: RngSeed, a: f64, span: f64, k: usize, inverted: bool) -> f64 {
    let mut rng = seed.rng();
    let grid: Vec<f64> = (0..=k).map(|i| a * span.powf(i as f64 / k as f64)).collect();
    let points: Vec<f64> = if inverted {
        grid.iter().rev().map(|s| 1.0 / s).collect()
    } else {
        grid.clone()
    };
    let mut b = 0.0f64;
    let mut prev = 0.0f64;
    let mut best = 0.0f64;
    for &p in &points {
        let z: f64 = rng.sample(StandardNormal);
        b += (p - prev).sqrt() * z;
        prev = p;
        let v = if inverted { b } else { b / p };
        best = best.max(v);
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn martingale_tail(
    seed: u64,
    t: f64,
    c: f64,
    eps: f64,
    n_paths: usize,
    factor: f64,
    dt: f64,
    ks_paths: usize,
) -> Result<Vec<Row>> {
    let bound = (-c * t * eps * eps / 2.0).exp();
    let mut rows = Vec::new();
    for (case, changed) in [("brownian", false), ("time_changed", true)] {
        let case_seed = derive_seed(seed, case);
        let flags: Vec<bool> = (0..n_paths as u64)
            .into_par_iter()
            .map(|i| martingale_exceeds(RngSeed::new(case_seed, i), changed, t, c, eps, factor * t, dt))
            .collect();
        let p = Proportion::from_flags(flags)?;
        rows.push(
            Row::new(p.estimate, p.se, bound, BoundKind::Upper, p.n, case_seed).detail(json!({
                "case": case,
                "exceedances": p.successes,
                "window": [t, factor * t],
            })),
        );
    }
    if ks_paths > 0 {
        let a = c * t;
        let (span, k) = (1e4, 2000);
        let ks_seed = derive_seed(seed, "time_inversion");
        let left_seed = derive_seed(ks_seed, "direct");
        let right_seed = derive_seed(ks_seed, "inverted");
        let left: Vec<f64> = (0..ks_paths as u64)
            .into_par_iter()
            .map(|i| inversion_sample(RngSeed::new(left_seed, i), a, span, k, false))
            .collect();
        let right: Vec<f64> = (0..ks_paths as u64)
            .into_par_iter()
            .map(|i| inversion_sample(RngSeed::new(right_seed, i), a, span, k, true))
            .collect();
        let ks = ks_two_sample(&left, &right)?;
        rows.push(
            Row::new(ks.scaled, 0.0, kolmogorov_critical(1e-3), BoundKind::Below, ks_paths, ks_seed).detail(json!({
                "case": "time_inversion",
                "statistic": ks.statistic,
                "p_value": ks.p_value,
                "level": 1e-3,
                "grid_points": k + 1,
                "span": [a, a * span],
            })),
        );
    }
    Ok(rows)
}

fn bernoulli_ld(seed: u64, q: f64, eps: f64, n: usize, trials: usize, dependence: f64) -> Result<Vec<Row>> {
    let threshold = n as f64 * q * (1.0 - eps);
    let bound = (-(n as f64) * q * eps * eps / 2.0).exp();
    let mut rows = Vec::new();
    for (case, dependent) in [("iid", false), ("dependent", true)] {
        let case_seed = derive_seed(seed, case);
        let flags: Vec<bool> = (0..trials as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = RngSeed::new(case_seed, i).rng();
                let mut sum = 0usize;
                let mut last = 0.0;
                for _ in 0..n {
                    let p = if dependent { q.max(dependence * last) } else { q };
                    let j = rng.random::<f64>() < p;
                    last = if j { 1.0 } else { 0.0 };
                    sum += usize::from(j);
                }
                sum as f64 <= threshold
            })
            .collect();
        let p = Proportion::from_flags(flags)?;
        rows.push(
            Row::new(p.estimate, p.se, bound, BoundKind::Upper, p.n, case_seed)
                .detail(json!({ "case": case, "threshold": threshold, "hits": p.successes })),
        );
    }
    Ok(rows)
}

/// Runs every probe of `plan` on the current rayon pool. Probe errors are
/// collected into `failures` without discarding completed probes. When
/// `out_dir` is given, writes `results.jsonl`, `bundle.json` and, if asked
/// for, per-trajectory CSVs.
pub fn run_plan(plan: &ExperimentPlan, out_dir: Option<&Path>) -> Result<PlanOutcome> {
    let sigma = plan.validate()?;
    let digest = plan.digest()?;
    let mut runner = Runner {
        plan,
        sigma,
        digest: digest.clone(),
        ensemble: None,
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (index, probe) in plan.probes.iter().enumerate() {
        let started = Instant::now();
        match runner.run_probe(probe) {
            Ok(found) => {
                let wall = plan.record_wall_time.then(|| started.elapsed().as_millis() as u64);
                for r in found {
                    let verdict = r.verdict.unwrap_or_else(|| r.kind.verdict(r.estimate, r.se, r.bound));
                    rows.push(ResultRow {
                        probe: probe.name().to_string(),
                        params: probe.params(),
                        estimate: r.estimate,
                        se: r.se,
                        bound: r.bound,
                        bound_kind: r.kind,
                        verdict,
                        n: r.n,
                        seed: r.seed,
                        wall_ms: wall,
                        config_digest: runner.digest.clone(),
                        detail: r.detail,
                        notes: r.notes,
                    });
                }
            }
            Err(e) => failures.push(ProbeFailure {
                probe: probe.name().to_string(),
                index,
                error: e.to_string(),
            }),
        }
    }
    let mut notes = Vec::new();
    if plan.probes.iter().any(|p| matches!(p, ProbeSpec::LargeLambda { .. })) {
        notes.push("large_lambda probes an asymptotic statement on a finite sweep; not desk-verifiable".to_string());
    }
    let outcome = PlanOutcome {
        metadata: PlanMetadata {
            tool: TOOL_NAME.to_string(),
            version: VERSION.to_string(),
            plan: plan.name.clone(),
            config_digest: digest.clone(),
            master_seed: plan.solver.seed.master_seed,
            n_trajectories: plan.n_trajectories,
            probes: plan.probes.iter().map(|p| p.name().to_string()).collect(),
            notes,
        },
        rows,
        failures,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESULTS_FILE), outcome.to_jsonl()?)?;
        fs::write(dir.join(BUNDLE_FILE), outcome.bundle_json()?)?;
        if plan.write_trajectories {
            let recs = match runner.ensemble.take() {
                Some(r) => r,
                None => run_ensemble(&plan.ensemble_template(), plan.n_trajectories)?,
            };
            let tdir = dir.join(TRAJECTORY_DIR);
            fs::create_dir_all(&tdir)?;
            let meta = CsvMeta {
                tool: TOOL_NAME,
                version: VERSION,
                config_digest: &digest,
            };
            for r in &recs {
                fs::write(tdir.join(format!("traj_{:05}.csv", r.seed.stream_index)), r.to_csv(&meta))?;
            }
        }
    }
    Ok(outcome)
}
