//! Numerical verification of the heat-kernel inequalities.
//!
//! Some of the bounds carry explicit constants and are checked as stated.
//! Others only assert that *some* finite constant exists; for those the
//! constant is fitted once over [`KernelGrid`], frozen in a fixture file, and
//! the suite then checks the inequality against the frozen value.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GridFunction, TorusPoint};
use crate::kernel::{
    self, apply_semigroup, image_sum, kernel_l2_diff_space, kernel_l2_diff_time, semigroup_at,
    KernelParams,
};
use crate::util::logspace;

/// Frozen constants shipped with the crate.
pub const DEFAULT_FIXTURE: &str = include_str!("../fixtures/kernel_constants.toml");

/// Additive slack on the sandwich bounds.
pub const SANDWICH_SLACK: f64 = 1e-10;
/// Tolerance on `|int p_t(x, .) - 1|`.
pub const CONSERVATION_TOL: f64 = 1e-8;
/// Tolerance on semigroup composition and on closed-form/quadrature agreement.
pub const COMPOSITION_TOL: f64 = 1e-6;

/// The deterministic grid over which the suite quantifies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelGrid {
    pub t_min: f64,
    pub t_max: f64,
    pub n_times: usize,
    /// Torus points; every ordered pair is used.
    pub points: Vec<f64>,
    pub n_space: usize,
    pub eps: Vec<f64>,
}

impl Default for KernelGrid {
    fn default() -> Self {
        KernelGrid {
            t_min: 1e-3,
            t_max: 1e2,
            n_times: 40,
            points: vec![-0.9, -0.4, 0.0, 0.35, 0.8],
            n_space: 512,
            eps: vec![0.1, 0.3, 0.5, 0.7, 0.9],
        }
    }
}

impl KernelGrid {
    pub fn times(&self) -> Vec<f64> {
        logspace(self.t_min, self.t_max, self.n_times)
    }

    pub fn pairs(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.points.len().pow(2));
        for &x in &self.points {
            for &y in &self.points {
                out.push((x, y));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HolderConstant {
    pub delta: f64,
    pub c: f64,
}

/// Fitted constants for the existential kernel bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConstants {
    /// `int |p_t(x,.) - p_t(y,.)|^2 <= C |x - y| / (t ^ sqrt t)`.
    pub space_lipschitz: f64,
    /// `int |p_t(x,.) - p_t(y,.)|^2 <= C_d |x - y|^d / (t^{(d+1)/2} ^ t^{d/2})`.
    pub holder: Vec<HolderConstant>,
    /// `|P_t h(x) - P_t h(y)| <= C (1 v t^{-1/2}) |x - y|^{e/2} ||h||_inf^e ||h||_1^{1-e}`.
    pub semigroup_space: f64,
    pub grid: KernelGrid,
}

impl KernelConstants {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("kernel fixture: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        KernelConstants::from_toml(&text)
    }

    pub fn builtin() -> Self {
        KernelConstants::from_toml(DEFAULT_FIXTURE).expect("bundled kernel fixture parses")
    }

    pub fn to_toml(&self) -> String {
        let body = toml::to_string_pretty(self).expect("kernel constants serialize");
        format!(
            "# Fitted constants for the heat-kernel bounds that only assert existence.\n\
             # Regenerate with `she verify kernel --write-fixture <path>`.\n\n{body}"
        )
    }
}

/// Outcome of one family of checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub cases: usize,
    /// Largest value of `lhs / rhs` (or of the error, for tolerance checks).
    pub worst: f64,
    pub pass: bool,
    /// First failing tuple, rendered for humans.
    pub failure: Option<String>,
}

struct Tally {
    name: &'static str,
    cases: usize,
    worst: f64,
    failure: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally {
            name,
            cases: 0,
            worst: f64::NEG_INFINITY,
            failure: None,
        }
    }

    fn record(&mut self, worst: f64, ok: bool, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if worst > self.worst || worst.is_nan() {
            self.worst = worst;
        }
        if !ok && self.failure.is_none() {
            self.failure = Some(describe());
        }
    }

    fn finish(self) -> CheckOutcome {
        CheckOutcome {
            name: self.name.to_string(),
            cases: self.cases,
            worst: self.worst,
            pass: self.failure.is_none(),
            failure: self.failure,
        }
    }
}

fn time_scale(t: f64) -> f64 {
    t.sqrt().recip().max(1.0)
}

fn params_for(t: f64) -> Result<KernelParams> {
    KernelParams::for_time(t, 1e-13)
}

/// Test functions for the semigroup bounds. The first four are nonnegative.
pub fn test_functions(n_space: usize) -> Result<Vec<(&'static str, GridFunction)>> {
    Ok(vec![
        ("constant", GridFunction::constant(n_space, 1.0)?),
        ("narrow_bump", GridFunction::from_fn(n_space, |x| (-2000.0 * x * x).exp())?),
        (
            "two_bumps",
            GridFunction::from_fn(n_space, |x| {
                (-200.0 * (x - 0.5).powi(2)).exp() + 3.0 * (-200.0 * (x + 0.4).powi(2)).exp()
            })?,
        ),
        (
            "indicator",
            GridFunction::from_fn(n_space, |x| if (-0.3..0.2).contains(&x) { 1.0 } else { 0.0 })?,
        ),
        ("sine", GridFunction::from_fn(n_space, |x| (PI * x).sin())?),
    ])
}

/// `p_t(x, y)` sandwiched between `G_t(x - y)` and `2 max(t^{-1/2}, 1)`.
pub fn check_sandwich(grid: &KernelGrid) -> Result<CheckOutcome> {
    let mut tally = Tally::new("sandwich");
    for t in grid.times() {
        let params = params_for(t)?;
        let upper = 2.0 * time_scale(t);
        for (x, y) in grid.pairs() {
            let p = kernel::periodic_kernel(t, x.into(), y.into(), &params)?;
            let g = kernel::free_kernel(t, x - y)?;
            let ok = g - SANDWICH_SLACK <= p && p <= upper + SANDWICH_SLACK;
            tally.record(p / upper, ok, || format!("t={t:e} x={x} y={y}: G={g:e} p={p:e} upper={upper:e}"));
        }
    }
    Ok(tally.finish())
}

/// `sup_{x,y} p_t(x, y) >= max(t^{-1/2}, 1) / 4`.
pub fn check_sup_lower_bound(grid: &KernelGrid) -> Result<CheckOutcome> {
    let mut tally = Tally::new("sup_lower_bound");
    for t in grid.times() {
        let params = params_for(t)?;
        let mut sup = f64::NEG_INFINITY;
        for (x, y) in grid.pairs() {
            sup = sup.max(kernel::periodic_kernel(t, x.into(), y.into(), &params)?);
        }
        let lower = 0.25 * time_scale(t);
        tally.record(lower / sup, sup >= lower, || format!("t={t:e}: sup={sup:e} < {lower:e}"));
    }
    Ok(tally.finish())
}

/// `|int p_t(x, .) - 1| < 1e-8` by the periodic trapezoid rule.
pub fn check_conservation(grid: &KernelGrid) -> Result<CheckOutcome> {
    let mut tally = Tally::new("conservation");
    let n = grid.n_space;
    let ones = GridFunction::constant(n, 1.0)?;
    for t in grid.times() {
        let params = params_for(t)?;
        for &x in &grid.points {
            let mass = semigroup_at(t, &ones, x.into(), &params)?;
            let err = (mass - 1.0).abs();
            tally.record(err, err < CONSERVATION_TOL, || format!("t={t:e} x={x}: integral={mass}"));
        }
    }
    Ok(tally.finish())
}

/// `P_t P_t f = P_2t f` on the grid, up to quadrature error.
pub fn check_chapman_kolmogorov(grid: &KernelGrid) -> Result<CheckOutcome> {
    let mut tally = Tally::new("chapman_kolmogorov");
    let f = GridFunction::from_fn(grid.n_space, |x| {
        1.0 + 0.5 * (PI * x).cos() + (-30.0 * x * x).exp()
    })?;
    for t in grid.times() {
        let params = params_for(2.0 * t)?;
        let twice = apply_semigroup(t, &apply_semigroup(t, &f, &params)?, &params)?;
        let direct = apply_semigroup(2.0 * t, &f, &params)?;
        let err = twice.sup_distance(&direct)?;
        tally.record(err, err < COMPOSITION_TOL, || format!("t={t:e}: composition error {err:e}"));
    }
    Ok(tally.finish())
}

fn quadrature_l2(n: usize, t_a: f64, x_a: f64, t_b: f64, x_b: f64) -> Result<f64> {
    let pa = params_for(t_a.max(t_b))?;
    let order = pa.truncation_order();
    let dw = 2.0 / n as f64;
    Ok((0..n)
        .map(|j| {
            let w = TorusPoint::new(-1.0 + j as f64 * dw);
            let a = image_sum(t_a, TorusPoint::new(x_a).displacement(w), order)
                - image_sum(t_b, TorusPoint::new(x_b).displacement(w), order);
            a * a
        })
        .sum::<f64>()
        * dw)
}

/// Closed form of the spatial `L^2` difference against direct quadrature.
pub fn check_space_closed_form(grid: &KernelGrid) -> Result<CheckOutcome> {
    const NODES: usize = 4096;
    let mut tally = Tally::new("space_difference_closed_form");
    let dw = 2.0 / NODES as f64;
    for t in grid.times() {
        let order = params_for(t)?.truncation_order();
        let rows: Vec<Vec<f64>> = grid
            .points
            .iter()
            .map(|&x| {
                (0..NODES)
                    .map(|j| {
                        let w = TorusPoint::new(-1.0 + j as f64 * dw);
                        image_sum(t, TorusPoint::new(x).displacement(w), order)
                    })
                    .collect()
            })
            .collect();
        for (i, &x) in grid.points.iter().enumerate() {
            for (j, &y) in grid.points.iter().enumerate() {
                let closed = kernel_l2_diff_space(t, x.into(), y.into())?;
                let quad = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * dw;
                let err = (closed - quad).abs();
                tally.record(err, err < COMPOSITION_TOL, || {
                    format!("t={t:e} x={x} y={y}: closed={closed:e} quadrature={quad:e}")
                });
            }
        }
    }
    Ok(tally.finish())
}

fn space_lipschitz_ratio(t: f64, x: f64, y: f64) -> Result<f64> {
    let v = kernel_l2_diff_space(t, x.into(), y.into())?;
    Ok(v * t.min(t.sqrt()) / (x - y).abs())
}

fn holder_ratio(t: f64, x: f64, y: f64, delta: f64) -> Result<f64> {
    let v = kernel_l2_diff_space(t, x.into(), y.into())?;
    let scale = t.powf(0.5 * (delta + 1.0)).min(t.powf(0.5 * delta));
    Ok(v * scale / (x - y).abs().powf(delta))
}

pub fn check_space_lipschitz(grid: &KernelGrid, c: f64) -> Result<CheckOutcome> {
    let mut tally = Tally::new("space_lipschitz");
    for t in grid.times() {
        for (x, y) in grid.pairs().into_iter().filter(|(x, y)| x != y) {
            let r = space_lipschitz_ratio(t, x, y)?;
            tally.record(r / c, r <= c, || format!("t={t:e} x={x} y={y}: ratio {r:e} > C={c:e}"));
        }
    }
    Ok(tally.finish())
}

pub fn check_holder(grid: &KernelGrid, constants: &[HolderConstant]) -> Result<CheckOutcome> {
    let mut tally = Tally::new("space_holder");
    for hc in constants {
        for t in grid.times() {
            for (x, y) in grid.pairs().into_iter().filter(|(x, y)| x != y) {
                let r = holder_ratio(t, x, y, hc.delta)?;
                tally.record(r / hc.c, r <= hc.c, || {
                    format!("delta={} t={t:e} x={x} y={y}: ratio {r:e} > C={:e}", hc.delta, hc.c)
                });
            }
        }
    }
    Ok(tally.finish())
}

/// Time-difference bound `<= sqrt(pi / 2t) min(1, delta / 4t)` and closed-form
/// agreement with quadrature.
pub fn check_time_difference() -> Result<CheckOutcome> {
    let mut tally = Tally::new("time_difference");
    let xs: Vec<f64> = (0..9).map(|i| -0.8 + 0.2 * i as f64).collect();
    for &t in &[0.1, 0.5, 2.0] {
        for &delta in &[0.01, 0.1, 0.5] {
            let bound = (PI / (2.0 * t)).sqrt() * (delta / (4.0 * t)).min(1.0);
            for &x in &xs {
                let closed = kernel_l2_diff_time(t, delta, x.into())?;
                let quad = quadrature_l2(4096, t + delta, x, t, x)?;
                let err = (closed - quad).abs();
                tally.record(closed / bound, closed <= bound && err < COMPOSITION_TOL, || {
                    format!(
                        "t={t} delta={delta} x={x}: closed={closed:e} bound={bound:e} quadrature={quad:e}"
                    )
                });
            }
        }
    }
    Ok(tally.finish())
}

fn interpolation_norm(h: &GridFunction, eps: f64) -> f64 {
    h.sup_abs().powf(eps) * h.l1_norm().powf(1.0 - eps)
}

/// `sup_x |P_{t+d} h - P_t h| <= 4 (1 + t^{-1/2}) min(1, (d/4t)^{e/2}) ||h||_inf^e ||h||_1^{1-e}`.
pub fn check_semigroup_time(grid: &KernelGrid) -> Result<CheckOutcome> {
    let mut tally = Tally::new("semigroup_time_difference");
    let fns = test_functions(grid.n_space)?;
    for t in grid.times() {
        for &delta in &[0.01, 0.1, 0.5] {
            let params = params_for(t + delta)?;
            for (name, h) in &fns {
                let a = apply_semigroup(t + delta, h, &params)?;
                let b = apply_semigroup(t, h, &params)?;
                let lhs = a.sup_distance(&b)?;
                for &eps in &grid.eps {
                    let rhs = 4.0
                        * (1.0 + t.sqrt().recip())
                        * (delta / (4.0 * t)).powf(0.5 * eps).min(1.0)
                        * interpolation_norm(h, eps);
                    tally.record(lhs / rhs, lhs <= rhs, || {
                        format!("t={t:e} delta={delta} eps={eps} h={name}: {lhs:e} > {rhs:e}")
                    });
                }
            }
        }
    }
    Ok(tally.finish())
}

fn semigroup_space_ratios(grid: &KernelGrid, mut visit: impl FnMut(f64, String)) -> Result<()> {
    let fns = test_functions(grid.n_space)?;
    for t in grid.times() {
        let params = params_for(t)?;
        for (name, h) in &fns {
            let values: Vec<f64> = grid
                .points
                .iter()
                .map(|&x| semigroup_at(t, h, x.into(), &params))
                .collect::<Result<_>>()?;
            for (i, &x) in grid.points.iter().enumerate() {
                for (j, &y) in grid.points.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let lhs = (values[i] - values[j]).abs();
                    for &eps in &grid.eps {
                        let rhs = time_scale(t) * (x - y).abs().powf(0.5 * eps) * interpolation_norm(h, eps);
                        visit(lhs / rhs, format!("t={t:e} x={x} y={y} eps={eps} h={name}"));
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn check_semigroup_space(grid: &KernelGrid, c: f64) -> Result<CheckOutcome> {
    let mut tally = Tally::new("semigroup_space_difference");
    semigroup_space_ratios(grid, |r, what| {
        tally.record(r / c, r <= c, || format!("{what}: ratio {r:e} > C={c:e}"));
    })?;
    Ok(tally.finish())
}

/// `||P_t u0||_inf <= 2 (t^{-1/2} v 1)^{1-e} ||u0||_inf^e ||u0||_1^{1-e}` for `u0 >= 0`.
pub fn check_interpolation(grid: &KernelGrid) -> Result<CheckOutcome> {
    let mut tally = Tally::new("interpolation");
    let fns = test_functions(grid.n_space)?;
    for t in grid.times() {
        let params = params_for(t)?;
        for (name, h) in fns.iter().take(4) {
            for &eps in &grid.eps {
                let c = kernel::interpolation_bound_check(t, eps, h, &params)?;
                tally.record(c.lhs / c.rhs, c.holds, || {
                    format!("t={t:e} eps={eps} u0={name}: {:e} > {:e}", c.lhs, c.rhs)
                });
            }
        }
    }
    Ok(tally.finish())
}

/// Runs every kernel check; the existential ones against `constants`.
pub fn verify_kernel_suite(constants: &KernelConstants) -> Result<Vec<CheckOutcome>> {
    let grid = &constants.grid;
    Ok(vec![
        check_sandwich(grid)?,
        check_sup_lower_bound(grid)?,
        check_conservation(grid)?,
        check_chapman_kolmogorov(grid)?,
        check_space_closed_form(grid)?,
        check_space_lipschitz(grid, constants.space_lipschitz)?,
        check_holder(grid, &constants.holder)?,
        check_time_difference()?,
        check_semigroup_time(grid)?,
        check_semigroup_space(grid, constants.semigroup_space)?,
        check_interpolation(grid)?,
    ])
}

/// Round up to four significant digits.
fn round_up(x: f64) -> f64 {
    if x <= 0.0 {
        return x;
    }
    let scale = 10f64.powi(3 - x.log10().floor() as i32);
    (x * scale).ceil() / scale
}

/// Fits the existential constants as the supremum of the relevant ratio over
/// `grid`, rounded up to four significant digits.
pub fn fit_kernel_constants(grid: &KernelGrid) -> Result<KernelConstants> {
    let off_diagonal: Vec<(f64, f64)> = grid.pairs().into_iter().filter(|(x, y)| x != y).collect();
    let times = grid.times();

    let mut lipschitz = 0.0f64;
    for &t in &times {
        for &(x, y) in &off_diagonal {
            lipschitz = lipschitz.max(space_lipschitz_ratio(t, x, y)?);
        }
    }

    let mut holder = Vec::new();
    for delta in [0.25, 0.5, 0.75] {
        let mut c = 0.0f64;
        for &t in &times {
            for &(x, y) in &off_diagonal {
                c = c.max(holder_ratio(t, x, y, delta)?);
            }
        }
        holder.push(HolderConstant { delta, c: round_up(c) });
    }

    let mut semigroup = 0.0f64;
    semigroup_space_ratios(grid, |r, _| semigroup = semigroup.max(r))?;

    Ok(KernelConstants {
        space_lipschitz: round_up(lipschitz),
        holder,
        semigroup_space: round_up(semigroup),
        grid: grid.clone(),
    })
}
