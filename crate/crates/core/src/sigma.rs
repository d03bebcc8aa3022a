//! The nonlinearity `sigma` and its cone constants
//! `L_sigma <= |sigma(a) / a| <= Lip_sigma`.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::util::logspace;

/// `min_a sin(a) / a`, attained at the first positive root of `tan a = a`.
const SINC_MIN: f64 = -0.217_233_628_211_221_66;

/// Relative slack on the declared constants in the cone scan.
const CONE_SLACK: f64 = 1e-12;

/// Magnitudes per sign in the cone scan.
pub const CONE_GRID_POINTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaKind {
    /// `sigma(a) = c a`.
    Linear,
    /// `sigma(a) = a + c sin(a)`.
    ShiftedSine,
    /// A user expression in `a`.
    Expression,
}

/// Serialized description of `sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaSpec {
    pub kind: SigmaKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<String>,
    /// Declared lower cone constant; derived for the built-in kinds if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lip_sigma: Option<f64>,
}

impl SigmaSpec {
    pub fn linear(c: f64) -> Self {
        SigmaSpec {
            kind: SigmaKind::Linear,
            c: Some(c),
            expr: None,
            l_sigma: None,
            lip_sigma: None,
        }
    }

    pub fn shifted_sine(c: f64) -> Self {
        SigmaSpec {
            kind: SigmaKind::ShiftedSine,
            c: Some(c),
            ..SigmaSpec::linear(1.0)
        }
    }

    pub fn expression(expr: impl Into<String>, l_sigma: f64, lip_sigma: f64) -> Self {
        SigmaSpec {
            kind: SigmaKind::Expression,
            c: None,
            expr: Some(expr.into()),
            l_sigma: Some(l_sigma),
            lip_sigma: Some(lip_sigma),
        }
    }

    pub fn with_constants(mut self, l_sigma: f64, lip_sigma: f64) -> Self {
        self.l_sigma = Some(l_sigma);
        self.lip_sigma = Some(lip_sigma);
        self
    }

    pub fn compile(&self) -> Result<Sigma> {
        Sigma::compile(self)
    }
}

impl Default for SigmaSpec {
    fn default() -> Self {
        SigmaSpec::linear(1.0)
    }
}

#[derive(Clone, PartialEq)]
enum Form {
    Linear(f64),
    ShiftedSine(f64),
    Expression(Expr, String),
}

/// A validated, evaluable `sigma` with its cone constants.
#[derive(Clone, PartialEq)]
pub struct Sigma {
    form: Form,
    l_sigma: f64,
    lip_sigma: f64,
}

impl fmt::Debug for Sigma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let form = match &self.form {
            Form::Linear(c) => format!("linear({c})"),
            Form::ShiftedSine(c) => format!("shifted_sine({c})"),
            Form::Expression(_, src) => format!("expression({src:?})"),
        };
        f.debug_struct("Sigma")
            .field("form", &form)
            .field("l_sigma", &self.l_sigma)
            .field("lip_sigma", &self.lip_sigma)
            .finish()
    }
}

impl Sigma {
    pub fn compile(spec: &SigmaSpec) -> Result<Self> {
        let c = spec.c;
        let (form, derived) = match spec.kind {
            SigmaKind::Linear => {
                let c = c.unwrap_or(1.0);
                if c == 0.0 || !c.is_finite() {
                    return Err(Error::Sigma(format!("linear coefficient must be nonzero, got {c}")));
                }
                (Form::Linear(c), Some((c.abs(), c.abs())))
            }
            SigmaKind::ShiftedSine => {
                let c = c.ok_or_else(|| Error::Sigma("shifted_sine needs a coefficient c".into()))?;
                // |sigma(a)/a| = |1 + c sinc(a)| with sinc ranging over [SINC_MIN, 1]
                let (lo, hi) = (1.0 + c * SINC_MIN, 1.0 + c);
                let (lo, hi) = (lo.min(hi), lo.max(hi));
                if !(lo > 0.0) {
                    return Err(Error::Sigma(format!("shifted_sine({c}) violates the cone condition")));
                }
                (Form::ShiftedSine(c), Some((lo, hi)))
            }
            SigmaKind::Expression => {
                let src = spec
                    .expr
                    .clone()
                    .ok_or_else(|| Error::Sigma("expression kind needs an expr".into()))?;
                let e = Expr::parse(&src)?;
                let zero = e.eval(0.0);
                if zero != 0.0 {
                    return Err(Error::Sigma(format!("sigma(0) = {zero}, but the cone condition forces 0")));
                }
                (Form::Expression(e, src), None)
            }
        };
        let l_sigma = spec
            .l_sigma
            .or(derived.map(|d| d.0))
            .ok_or_else(|| Error::Sigma("l_sigma must be declared for expressions".into()))?;
        let lip_sigma = spec
            .lip_sigma
            .or(derived.map(|d| d.1))
            .ok_or_else(|| Error::Sigma("lip_sigma must be declared for expressions".into()))?;
        if !(l_sigma > 0.0 && lip_sigma >= l_sigma && lip_sigma.is_finite()) {
            return Err(Error::Sigma(format!(
                "need 0 < l_sigma <= lip_sigma, got {l_sigma} and {lip_sigma}"
            )));
        }
        Ok(Sigma {
            form,
            l_sigma,
            lip_sigma,
        })
    }

    #[inline]
    pub fn eval(&self, a: f64) -> f64 {
        match &self.form {
            Form::Linear(c) => c * a,
            Form::ShiftedSine(c) => a + c * a.sin(),
            Form::Expression(e, _) => e.eval(a),
        }
    }

    /// `sigma(a) = a`, for which the solver uses a branch-free fast path.
    pub fn is_identity(&self) -> bool {
        self.form == Form::Linear(1.0)
    }

    pub fn linear_coefficient(&self) -> Option<f64> {
        match self.form {
            Form::Linear(c) => Some(c),
            _ => None,
        }
    }

    pub fn l_sigma(&self) -> f64 {
        self.l_sigma
    }

    pub fn lip_sigma(&self) -> f64 {
        self.lip_sigma
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeReport {
    pub l_sigma: f64,
    pub lip_sigma: f64,
    /// Smallest and largest `|sigma(a) / a|` seen on the grid.
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub holds: bool,
    /// Up to 16 grid points where a declared constant fails.
    pub violations: Vec<f64>,
    pub n_violations: usize,
}

/// The validation grid: log-spaced magnitudes in `[1e-8, 1e8]`, both signs.
pub fn cone_grid() -> Vec<f64> {
    let pos = logspace(1e-8, 1e8, CONE_GRID_POINTS);
    pos.iter().map(|a| -a).chain(pos.iter().copied()).collect()
}

pub fn validate_cone(spec: &SigmaSpec) -> Result<ConeReport> {
    let sigma = Sigma::compile(spec)?;
    let (l, lip) = (sigma.l_sigma, sigma.lip_sigma);
    let mut report = ConeReport {
        l_sigma: l,
        lip_sigma: lip,
        min_ratio: f64::INFINITY,
        max_ratio: 0.0,
        holds: true,
        violations: Vec::new(),
        n_violations: 0,
    };
    for a in cone_grid() {
        let r = (sigma.eval(a) / a).abs();
        report.min_ratio = report.min_ratio.min(r);
        report.max_ratio = report.max_ratio.max(r);
        let ok = r >= l * (1.0 - CONE_SLACK) && r <= lip * (1.0 + CONE_SLACK);
        if !ok {
            report.holds = false;
            report.n_violations += 1;
            if report.violations.len() < 16 {
                report.violations.push(a);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_examples() {
        let s = SigmaSpec::linear(1.0).compile().unwrap();
        assert_eq!(s.eval(3.5), 3.5);
        assert_eq!((s.l_sigma(), s.lip_sigma()), (1.0, 1.0));
        assert!(s.is_identity());
        assert!(validate_cone(&SigmaSpec::linear(2.0).with_constants(2.0, 2.0)).unwrap().holds);
        let bad = validate_cone(&SigmaSpec::linear(2.0).with_constants(1.0, 1.9)).unwrap();
        assert!(!bad.holds);
        assert_eq!(bad.n_violations, 2 * CONE_GRID_POINTS);
    }

    #[test]
    fn shifted_sine_constants() {
        let s = SigmaSpec::shifted_sine(0.25).compile().unwrap();
        assert!((s.l_sigma() - 0.9457).abs() < 1e-4);
        assert_eq!(s.lip_sigma(), 1.25);
        assert_eq!(s.eval(0.0), 0.0);
        assert!(validate_cone(&SigmaSpec::shifted_sine(0.25).with_constants(0.94, 1.26)).unwrap().holds);
        assert!(validate_cone(&SigmaSpec::shifted_sine(0.25)).unwrap().holds);
    }

    #[test]
    fn sinc_minimum_constant() {
        // tan a = a near 4.4934 by Newton on a cos a - sin a
        let mut a = 4.5f64;
        for _ in 0..50 {
            let f = a * a.cos() - a.sin();
            let df = -a * a.sin();
            a -= f / df;
        }
        assert!((a.sin() / a - SINC_MIN).abs() < 1e-15);
    }

    #[test]
    fn expression_sigma() {
        let spec = SigmaSpec::expression("a + 0.25*sin(a)", 0.9456, 1.25);
        let s = spec.compile().unwrap();
        assert_eq!(s.eval(1.0), 1.0 + 0.25 * 1f64.sin());
        assert!(validate_cone(&spec).unwrap().holds);
        assert!(SigmaSpec::expression("a + 1", 1.0, 1.0).compile().is_err());
        let mut missing = SigmaSpec::expression("a", 1.0, 1.0);
        missing.l_sigma = None;
        assert!(missing.compile().is_err());
    }

    #[test]
    fn rejects_bad_constants() {
        assert!(SigmaSpec::linear(0.0).compile().is_err());
        assert!(SigmaSpec::linear(1.0).with_constants(2.0, 1.0).compile().is_err());
        assert!(SigmaSpec::shifted_sine(-1.5).compile().is_err());
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = SigmaSpec::shifted_sine(0.25);
        let text = toml::to_string(&spec).unwrap();
        assert_eq!(toml::from_str::<SigmaSpec>(&text).unwrap(), spec);
        assert!(toml::from_str::<SigmaSpec>("kind = \"linear\"\nbogus = 1").is_err());
    }
}
