//! The periodic heat kernel on the torus `[-1, 1]`.
//!
//! `p_t(x, y)` is the fundamental solution of `d/dt - d^2/dx^2` with periodic
//! boundary conditions, evaluated as a truncated sum of free-space Gaussians
//! over the image points `x - y + 2n`. The truncation is certified: every
//! evaluation checks a closed-form Gaussian tail bound against the requested
//! absolute tolerance.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{GridFunction, TorusPoint};

/// Default absolute error budget of a truncated image sum.
pub const DEFAULT_ABS_TOLERANCE: f64 = 1e-12;

const MAX_TRUNCATION_ORDER: usize = 1 << 20;

/// Truncation order and error budget for the image sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    truncation_order: usize,
    abs_tolerance: f64,
}

impl KernelParams {
    pub fn new(truncation_order: usize, abs_tolerance: f64) -> Result<Self> {
        if truncation_order < 1 {
            return Err(Error::domain("truncation order must be at least 1"));
        }
        if !(abs_tolerance >= 0.0) {
            return Err(Error::domain(format!(
                "absolute tolerance must be nonnegative, got {abs_tolerance}"
            )));
        }
        Ok(KernelParams {
            truncation_order,
            abs_tolerance,
        })
    }

    /// Smallest truncation order whose certified tail at time `t` is within
    /// `abs_tolerance`. The tail grows with `t`, so the result also covers
    /// every smaller time.
    pub fn for_time(t: f64, abs_tolerance: f64) -> Result<Self> {
        check_time(t)?;
        if !(abs_tolerance >= 0.0) {
            return Err(Error::domain(format!(
                "absolute tolerance must be nonnegative, got {abs_tolerance}"
            )));
        }
        let mut order = 1;
        while image_tail_bound(t, order) > abs_tolerance {
            order += 1;
            if order > MAX_TRUNCATION_ORDER {
                return Err(Error::TruncationInsufficient {
                    order,
                    tail: image_tail_bound(t, order),
                    tolerance: abs_tolerance,
                });
            }
        }
        KernelParams::new(order, abs_tolerance)
    }

    pub fn truncation_order(&self) -> usize {
        self.truncation_order
    }

    pub fn abs_tolerance(&self) -> f64 {
        self.abs_tolerance
    }

    /// Errors unless the truncation is certified at time `t`.
    pub fn certify(&self, t: f64) -> Result<()> {
        let tail = image_tail_bound(t, self.truncation_order);
        if tail > self.abs_tolerance {
            return Err(Error::TruncationInsufficient {
                order: self.truncation_order,
                tail,
                tolerance: self.abs_tolerance,
            });
        }
        Ok(())
    }
}

fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("time must be positive and finite, got {t}")))
    }
}

#[inline]
pub(crate) fn gaussian(t: f64, a: f64) -> f64 {
    (4.0 * PI * t).sqrt().recip() * (-a * a / (4.0 * t)).exp()
}

/// Free-space heat kernel `G_t(a) = (4 pi t)^{-1/2} exp(-a^2 / 4t)`.
pub fn free_kernel(t: f64, a: f64) -> Result<f64> {
    check_time(t)?;
    Ok(gaussian(t, a))
}

/// Upper bound on `sum_{|n| > order} G_t(d + 2n)`, uniform over `|d| <= 1`.
///
/// Every omitted image sits at distance at least `2|n| - 1`, so the tail is
/// at most `2 sum_{m > order} G_t(2m - 1)`, which a monotone integral
/// comparison bounds by `2 G_t(2N + 1) + erfc((2N + 1) / 2 sqrt t) / 2`.
pub fn image_tail_bound(t: f64, order: usize) -> f64 {
    let a = 2.0 * order as f64 + 1.0;
    2.0 * gaussian(t, a) + 0.5 * erfc(a / (2.0 * t.sqrt()))
}

/// Truncated image sum for a wrapped displacement `d`; no certification.
#[inline]
pub(crate) fn image_sum(t: f64, d: f64, order: usize) -> f64 {
    let prefactor = (4.0 * PI * t).sqrt().recip();
    let inv = 1.0 / (4.0 * t);
    let mut sum = (-d * d * inv).exp();
    for n in 1..=order {
        let shift = 2.0 * n as f64;
        let a = d + shift;
        let b = d - shift;
        let terms = (-a * a * inv).exp() + (-b * b * inv).exp();
        sum += terms;
        if terms == 0.0 {
            break;
        }
    }
    prefactor * sum
}

/// `p_t(x, y)` with the truncation certified by `params`.
pub fn periodic_kernel(t: f64, x: TorusPoint, y: TorusPoint, params: &KernelParams) -> Result<f64> {
    check_time(t)?;
    params.certify(t)?;
    Ok(image_sum(t, x.displacement(y), params.truncation_order))
}

/// `p_t(x, y)` at the default tolerance, choosing the truncation order.
pub fn periodic_kernel_auto(t: f64, x: TorusPoint, y: TorusPoint) -> Result<f64> {
    let params = KernelParams::for_time(t, DEFAULT_ABS_TOLERANCE)?;
    periodic_kernel(t, x, y, &params)
}

/// `p_t` as a function of the displacement on an `n_space` grid:
/// entry `m` is `p_t(m dx)`. The kernel matrix is circulant in this vector.
pub fn kernel_row(t: f64, n_space: usize, params: &KernelParams) -> Result<Vec<f64>> {
    check_time(t)?;
    params.certify(t)?;
    let dx = crate::grid::TORUS_LENGTH / n_space as f64;
    Ok((0..n_space)
        .map(|m| image_sum(t, crate::grid::wrap(m as f64 * dx), params.truncation_order))
        .collect())
}

/// Circulant product `out_i = scale * sum_j row[(i - j) mod n] f_j`.
pub(crate) fn circulant_apply(row: &[f64], f: &[f64], scale: f64, out: &mut [f64]) {
    let n = row.len();
    debug_assert_eq!(f.len(), n);
    debug_assert_eq!(out.len(), n);
    for (i, o) in out.iter_mut().enumerate() {
        // j <= i uses row[i - j]; j > i uses row[n + i - j]
        let head: f64 = row[..=i].iter().rev().zip(&f[..=i]).map(|(k, v)| k * v).sum();
        let tail: f64 = row[i + 1..].iter().rev().zip(&f[i + 1..]).map(|(k, v)| k * v).sum();
        *o = scale * (head + tail);
    }
}

/// The heat semigroup `(P_t f)(x_i) = int p_t(x_i, y) f(y) dy` on the grid of `f`,
/// by the periodic trapezoid rule. `P_0` is the identity.
pub fn apply_semigroup(t: f64, f: &GridFunction, params: &KernelParams) -> Result<GridFunction> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::domain(format!("semigroup time must be nonnegative, got {t}")));
    }
    if t == 0.0 {
        return Ok(f.clone());
    }
    let row = kernel_row(t, f.len(), params)?;
    let mut out = vec![0.0; f.len()];
    circulant_apply(&row, f.values(), f.dx(), &mut out);
    GridFunction::new(out)
}

/// `(P_t f)(x)` at an arbitrary torus point, by quadrature over the grid of `f`.
pub fn semigroup_at(t: f64, f: &GridFunction, x: TorusPoint, params: &KernelParams) -> Result<f64> {
    if t == 0.0 {
        // nearest-node value; P_0 is only defined pointwise on the grid
        let j = (((x.coordinate() + 1.0) / f.dx()).round() as usize) % f.len();
        return Ok(f.values()[j]);
    }
    check_time(t)?;
    params.certify(t)?;
    let order = params.truncation_order;
    Ok(f.dx()
        * f.values()
            .iter()
            .enumerate()
            .map(|(j, v)| image_sum(t, x.displacement(TorusPoint::new(f.node(j))), order) * v)
            .sum::<f64>())
}

/// `int |p_t(x, w) - p_t(y, w)|^2 dw`, via Chapman-Kolmogorov and symmetry:
/// `p_2t(x, x) + p_2t(y, y) - 2 p_2t(x, y)`.
pub fn kernel_l2_diff_space(t: f64, x: TorusPoint, y: TorusPoint) -> Result<f64> {
    check_time(t)?;
    let params = KernelParams::for_time(2.0 * t, DEFAULT_ABS_TOLERANCE)?;
    let order = params.truncation_order;
    let on_diag = image_sum(2.0 * t, 0.0, order);
    let off_diag = image_sum(2.0 * t, x.displacement(y), order);
    Ok((2.0 * (on_diag - off_diag)).max(0.0))
}

/// `int |p_{t+delta}(x, w) - p_t(x, w)|^2 dw`, via
/// `p_{2(t+delta)}(x, x) + p_2t(x, x) - 2 p_{2t+delta}(x, x)`. Independent of `x`.
pub fn kernel_l2_diff_time(t: f64, delta: f64, _x: TorusPoint) -> Result<f64> {
    check_time(t)?;
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::domain(format!("time increment must be nonnegative, got {delta}")));
    }
    if delta == 0.0 {
        return Ok(0.0);
    }
    let params = KernelParams::for_time(2.0 * (t + delta), DEFAULT_ABS_TOLERANCE)?;
    let order = params.truncation_order;
    let value = image_sum(2.0 * (t + delta), 0.0, order) + image_sum(2.0 * t, 0.0, order)
        - 2.0 * image_sum(2.0 * t + delta, 0.0, order);
    Ok(value.max(0.0))
}

/// Both sides of the `L^1 / L^infinity` interpolation bound for `P_t u0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolationCertificate {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Checks `||P_t u0||_inf <= 2 (t^{-1/2} v 1)^{1-eps} ||u0||_inf^eps ||u0||_1^{1-eps}`.
pub fn interpolation_bound_check(
    t: f64,
    eps: f64,
    u0: &GridFunction,
    params: &KernelParams,
) -> Result<InterpolationCertificate> {
    check_time(t)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::domain(format!("eps must lie in (0, 1), got {eps}")));
    }
    if u0.values().iter().any(|&v| v < 0.0) {
        return Err(Error::domain("initial profile must be nonnegative"));
    }
    if u0.values().iter().all(|&v| v == 0.0) {
        return Err(Error::domain("initial profile must not vanish identically"));
    }
    let smoothed = apply_semigroup(t, u0, params)?;
    let lhs = smoothed.sup_abs();
    let rhs = 2.0
        * t.sqrt().recip().max(1.0).powf(1.0 - eps)
        * u0.sup_abs().powf(eps)
        * u0.l1_norm().powf(1.0 - eps);
    // quadrature slack
    let holds = lhs <= rhs * (1.0 + 1e-9) + 1e-12;
    Ok(InterpolationCertificate { lhs, rhs, holds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Eigenfunction expansion `1/2 + sum_k exp(-pi^2 k^2 t) cos(pi k d)`,
    /// an independent route to the same kernel.
    fn theta_kernel(t: f64, d: f64) -> f64 {
        let mut s = 0.5;
        for k in 1..2000 {
            let w = (-(PI * k as f64).powi(2) * t).exp();
            if w == 0.0 {
                break;
            }
            s += w * (PI * k as f64 * d).cos();
        }
        s
    }

    #[test]
    fn free_kernel_examples() {
        assert_relative_eq!(free_kernel(1.0 / (4.0 * PI), 0.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(free_kernel(1.0, 0.0).unwrap(), 0.28209479177387814, epsilon = 1e-15);
        // pi^{-1/2} e^{-1}, written out independently
        let expected = (-1.0f64).exp() / PI.sqrt();
        assert_relative_eq!(free_kernel(0.25, 1.0).unwrap(), expected, epsilon = 1e-15);
        assert_relative_eq!(expected, 0.20755374871029736, epsilon = 1e-12);
        assert!(free_kernel(0.0, 1.0).is_err());
        assert!(free_kernel(-1.0, 1.0).is_err());
    }

    #[test]
    fn kernel_long_time_limit_is_uniform_density() {
        let v = periodic_kernel_auto(100.0, 0.3.into(), (-0.7).into()).unwrap();
        assert!((v - 0.5).abs() < 1e-8, "{v}");
    }

    #[test]
    fn kernel_short_time_is_free_gaussian() {
        let v = periodic_kernel_auto(0.01, 0.0.into(), 0.0.into()).unwrap();
        let oracle = image_sum(0.01, 0.0, 10_000);
        assert!((v - oracle).abs() < 1e-10);
        assert!((v - (0.04 * PI).sqrt().recip()).abs() < 1e-10);
        assert!((v - 2.82094792).abs() < 1e-8);
    }

    #[test]
    fn kernel_is_symmetric() {
        let a = periodic_kernel_auto(0.5, 0.2.into(), 0.9.into()).unwrap();
        let b = periodic_kernel_auto(0.5, 0.9.into(), 0.2.into()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn image_sum_matches_eigenfunction_expansion() {
        for &t in &[1e-3, 0.01, 0.1, 0.5, 2.0, 20.0] {
            let params = KernelParams::for_time(t, 1e-13).unwrap();
            for &d in &[0.0, 0.1, 0.5, -0.77, 0.999] {
                let a = image_sum(t, d, params.truncation_order());
                let b = theta_kernel(t, d);
                assert!((a - b).abs() < 1e-10 * a.max(1.0), "t={t} d={d}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn insufficient_truncation_is_reported() {
        let params = KernelParams::new(1, 1e-12).unwrap();
        let err = periodic_kernel(10.0, 0.0.into(), 0.5.into(), &params).unwrap_err();
        assert!(matches!(err, Error::TruncationInsufficient { .. }));
        assert!(periodic_kernel(0.01, 0.0.into(), 0.5.into(), &params).is_ok());
    }

    #[test]
    fn tail_bound_dominates_actual_tail() {
        for &t in &[0.05, 1.0, 10.0] {
            for order in 1..6 {
                for &d in &[0.0, 0.5, 1.0, -1.0] {
                    let full = image_sum(t, d, 50_000);
                    let trunc = image_sum(t, d, order);
                    assert!(full - trunc <= image_tail_bound(t, order) * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn semigroup_fixes_constants_and_is_identity_at_zero() {
        let f = GridFunction::constant(128, 3.0).unwrap();
        let params = KernelParams::for_time(3.7, 1e-12).unwrap();
        let g = apply_semigroup(3.7, &f, &params).unwrap();
        assert!(g.values().iter().all(|v| (v - 3.0).abs() < 1e-8));
        let h = GridFunction::from_fn(64, |x| 1.0 + x.sin()).unwrap();
        assert_eq!(apply_semigroup(0.0, &h, &params).unwrap(), h);
        assert!(apply_semigroup(-1.0, &h, &params).is_err());
    }

    #[test]
    fn semigroup_relaxes_to_spatial_mean() {
        let f = GridFunction::from_fn(128, |x| (-40.0 * x * x).exp()).unwrap();
        let params = KernelParams::for_time(50.0, 1e-12).unwrap();
        let g = apply_semigroup(50.0, &f, &params).unwrap();
        let mean = 0.5 * f.integral();
        assert!(g.values().iter().all(|v| (v - mean).abs() < 1e-6));
        assert!(g.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn chapman_kolmogorov_on_grid() {
        let f = GridFunction::from_fn(256, |x| 1.0 + 0.5 * (PI * x).cos() + (-30.0 * x * x).exp()).unwrap();
        let params = KernelParams::for_time(1.0, 1e-13).unwrap();
        let st = apply_semigroup(0.2, &apply_semigroup(0.3, &f, &params).unwrap(), &params).unwrap();
        let direct = apply_semigroup(0.5, &f, &params).unwrap();
        assert!(st.sup_distance(&direct).unwrap() < 1e-10);
    }

    #[test]
    fn l2_space_difference_matches_quadrature() {
        assert_eq!(kernel_l2_diff_space(1.0, 0.4.into(), 0.4.into()).unwrap(), 0.0);
        let (t, x, y) = (0.2, 0.0, 0.1);
        let closed = kernel_l2_diff_space(t, x.into(), y.into()).unwrap();
        let n = 10_000;
        let dw = 2.0 / n as f64;
        let quad: f64 = (0..n)
            .map(|j| {
                let w = -1.0 + j as f64 * dw;
                let a = theta_kernel(t, x - w) - theta_kernel(t, y - w);
                a * a
            })
            .sum::<f64>()
            * dw;
        assert!(closed > 0.0);
        assert!((closed - quad).abs() < 1e-6, "{closed} vs {quad}");
    }

    #[test]
    fn l2_time_difference_matches_quadrature_and_bound() {
        assert_eq!(kernel_l2_diff_time(1.0, 0.0, 0.0.into()).unwrap(), 0.0);
        let (t, delta, x) = (0.5, 0.1, 0.3);
        let closed = kernel_l2_diff_time(t, delta, x.into()).unwrap();
        let bound = (PI / (2.0 * t)).sqrt() * (delta / (4.0 * t)).min(1.0);
        assert!(closed <= bound && bound < 0.0887);
        let n = 10_000;
        let dw = 2.0 / n as f64;
        let quad: f64 = (0..n)
            .map(|j| {
                let w = -1.0 + j as f64 * dw;
                let a = theta_kernel(t + delta, x - w) - theta_kernel(t, x - w);
                a * a
            })
            .sum::<f64>()
            * dw;
        assert!((closed - quad).abs() < 1e-6, "{closed} vs {quad}");
        assert!(kernel_l2_diff_time(1.0, -0.1, 0.0.into()).is_err());
        assert!(kernel_l2_diff_time(0.0, 0.1, 0.0.into()).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let params = KernelParams::for_time(10.0, 1e-12).unwrap();
        let ones = GridFunction::constant(256, 1.0).unwrap();
        let c = interpolation_bound_check(1.0, 0.5, &ones, &params).unwrap();
        assert!(c.holds);
        assert!((c.lhs - 1.0).abs() < 1e-9);
        assert!((c.rhs - 2.0 * 2f64.sqrt()).abs() < 1e-9);

        let bump = GridFunction::from_fn(512, |x| (-2000.0 * x * x).exp()).unwrap();
        assert!(interpolation_bound_check(0.01, 0.1, &bump, &params).unwrap().holds);

        let two = GridFunction::from_fn(512, |x| {
            (-200.0 * (x - 0.5).powi(2)).exp() + 3.0 * (-200.0 * (x + 0.4).powi(2)).exp()
        })
        .unwrap();
        assert!(interpolation_bound_check(10.0, 0.9, &two, &params).unwrap().holds);

        assert!(interpolation_bound_check(1.0, 1.0, &ones, &params).is_err());
        let neg = GridFunction::constant(8, -1.0).unwrap();
        assert!(interpolation_bound_check(1.0, 0.5, &neg, &params).is_err());
    }
}
