//! Quadrature checks of the gamma-function bound on
//! `J(t) = int_0^t (t/s)^{1-eps} e^{-beta (t-s)} (t-s)^{-alpha} ds`
//! and of the beta-integral inequality it rests on.

use serde::{Deserialize, Serialize};
use statrs::function::{beta::beta, gamma::gamma};

use crate::error::{Error, Result};
use crate::quadrature::{integrate, QuadratureOptions};
use crate::util::logspace;

/// Relative change allowed between the working and refined quadratures.
pub const SELF_CONSISTENCY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IjQuery {
    pub eps: f64,
    pub alpha: f64,
    pub beta: f64,
    pub t_grid: Vec<f64>,
    pub rel_tol: f64,
}

impl IjQuery {
    /// Default 40-point log grid on `[1e-3, 1e3]`.
    pub fn new(eps: f64, alpha: f64, beta: f64) -> Result<Self> {
        let q = IjQuery {
            eps,
            alpha,
            beta,
            t_grid: logspace(1e-3, 1e3, 40),
            rel_tol: 1e-10,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::domain(format!("eps must lie in (0, 1), got {}", self.eps)));
        }
        if !(self.alpha >= 0.0 && self.alpha < 1.0) {
            return Err(Error::domain(format!("alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return Err(Error::domain(format!("beta must be at least 1, got {}", self.beta)));
        }
        if self.t_grid.is_empty() || self.t_grid.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::domain("t grid must be nonempty and positive"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::domain("quadrature tolerance must be positive"));
        }
        Ok(())
    }

    /// `(2 Gamma(1 - alpha) + 1) / ((1 - alpha) eps beta^{1 - alpha})`.
    pub fn bound(&self) -> f64 {
        (2.0 * gamma(1.0 - self.alpha) + 1.0) / ((1.0 - self.alpha) * self.eps * self.beta.powf(1.0 - self.alpha))
    }
}

fn options(rel_tol: f64, initial_panels: usize) -> QuadratureOptions {
    QuadratureOptions {
        abs_tol: 1e-300,
        rel_tol,
        max_panels: 50_000,
        initial_panels,
    }
}

/// `int_0^1 r^{-alpha} (1 - r)^{eps - 1} e^{-c r} dr`, split at `r = 1/2`.
/// The left half uses `r = v^{1/(1-alpha)}`, the right `1 - r = w^{1/eps}`;
/// both substitutions remove the endpoint singularity.
fn split_integral(eps: f64, alpha: f64, c: f64, opts: &QuadratureOptions) -> Result<f64> {
    let p = 1.0 / (1.0 - alpha);
    let q = 1.0 / eps;
    let left = integrate(
        |v: f64| {
            let r = v.powf(p);
            (1.0 - r).powf(eps - 1.0) * (-c * r).exp()
        },
        0.0,
        0.5f64.powf(1.0 - alpha),
        opts,
    )?;
    let right = integrate(
        |w: f64| {
            let s = w.powf(q);
            (1.0 - s).powf(-alpha) * (-c * (1.0 - s)).exp()
        },
        0.0,
        0.5f64.powf(eps),
        opts,
    )?;
    Ok(p * left.value + q * right.value)
}

fn ij_integral_with(eps: f64, alpha: f64, beta: f64, t: f64, opts: &QuadratureOptions) -> Result<f64> {
    if t == 0.0 {
        return Ok(0.0);
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::domain(format!("t must be positive, got {t}")));
    }
    // s = t (1 - r)
    Ok(t.powf(1.0 - alpha) * split_integral(eps, alpha, beta * t, opts)?)
}

/// `J(t)` for the given parameters.
pub fn ij_integral(eps: f64, alpha: f64, beta: f64, t: f64) -> Result<f64> {
    ij_integral_with(eps, alpha, beta, t, &options(1e-10, 4))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IjCertificate {
    pub eps: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sup_value: f64,
    pub argmax_t: f64,
    pub bound: f64,
    pub margin: f64,
    pub pass: bool,
    /// Relative change of the supremum under a tighter quadrature.
    pub self_consistency: f64,
}

/// Maximizes `J` over the grid, then refines an interior maximum by golden
/// section in `log t`.
pub fn verify_lemma_ij(q: &IjQuery) -> Result<IjCertificate> {
    q.validate()?;
    let opts = options(q.rel_tol, 4);
    let f = |t: f64| ij_integral_with(q.eps, q.alpha, q.beta, t, &opts);
    let values: Vec<f64> = q.t_grid.iter().map(|&t| f(t)).collect::<Result<_>>()?;
    let (mut k, mut best) = (0, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best {
            k = i;
            best = v;
        }
    }
    let mut argmax = q.t_grid[k];
    if k > 0 && k + 1 < q.t_grid.len() {
        let (t, v) = golden_max(&f, q.t_grid[k - 1].ln(), q.t_grid[k + 1].ln())?;
        if v > best {
            best = v;
            argmax = t;
        }
    }
    let refined = ij_integral_with(q.eps, q.alpha, q.beta, argmax, &options(q.rel_tol * 1e-2, 8))?;
    let self_consistency = ((refined - best) / refined).abs();
    if self_consistency >= SELF_CONSISTENCY_TOL {
        return Err(Error::Quadrature(format!(
            "refinement moved sup J by {self_consistency:e} at eps={} alpha={} beta={}",
            q.eps, q.alpha, q.beta
        )));
    }
    let bound = q.bound();
    Ok(IjCertificate {
        eps: q.eps,
        alpha: q.alpha,
        beta: q.beta,
        sup_value: best,
        argmax_t: argmax,
        bound,
        margin: bound - best,
        pass: best <= bound,
        self_consistency,
    })
}

fn golden_max(f: &impl Fn(f64) -> Result<f64>, mut a: f64, mut b: f64) -> Result<(f64, f64)> {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c.exp())?;
    let mut fd = f(d.exp())?;
    while b - a > 1e-6 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c.exp())?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d.exp())?;
        }
    }
    Ok(if fc > fd { (c.exp(), fc) } else { (d.exp(), fd) })
}

/// Relative deviation from `J_beta(t) = beta^{alpha - 1} J_1(beta t)`.
pub fn scaling_deviation(eps: f64, alpha: f64, beta: f64, t: f64) -> Result<f64> {
    let lhs = ij_integral(eps, alpha, beta, t)?;
    let rhs = beta.powf(alpha - 1.0) * ij_integral(eps, alpha, 1.0, beta * t)?;
    Ok(((lhs - rhs) / rhs).abs())
}

/// The default lattice: eps in {0.1, ..., 0.9}, alpha in {0, .25, .5, .75},
/// beta in {1, 2, 8, 64}.
pub fn default_lattice() -> Vec<(f64, f64, f64)> {
    let mut out = Vec::with_capacity(144);
    for i in 1..=9 {
        for &alpha in &[0.0, 0.25, 0.5, 0.75] {
            for &beta in &[1.0, 2.0, 8.0, 64.0] {
                out.push((i as f64 / 10.0, alpha, beta));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaCertificate {
    pub eps: f64,
    pub alpha: f64,
    pub value: f64,
    pub quadrature: f64,
    pub bound: f64,
    pub pass: bool,
}

/// `B(eps, 1 - alpha) <= 1 / (eps (1 - alpha))`.
pub fn verify_beta_bound(eps: f64, alpha: f64) -> Result<BetaCertificate> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::domain(format!("eps must lie in (0, 1), got {eps}")));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::domain(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    let value = beta(eps, 1.0 - alpha);
    let quadrature = split_integral(eps, alpha, 0.0, &options(1e-12, 4))?;
    let bound = 1.0 / (eps * (1.0 - alpha));
    Ok(BetaCertificate {
        eps,
        alpha,
        value,
        quadrature,
        bound,
        // B(eps, 1) = 1/eps is an equality case
        pass: value <= bound * (1.0 + 1e-12),
    })
}
