//! Uniform grids on the torus `[-1, 1]` with endpoints identified.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of the torus.
pub const TORUS_LENGTH: f64 = 2.0;

/// A point of the torus, stored canonically in `[-1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct TorusPoint(f64);

impl TorusPoint {
    pub fn new(x: f64) -> Self {
        TorusPoint(wrap(x))
    }

    pub fn coordinate(self) -> f64 {
        self.0
    }

    /// Signed displacement `self - other`, wrapped into `[-1, 1)`.
    pub fn displacement(self, other: TorusPoint) -> f64 {
        wrap(self.0 - other.0)
    }
}

impl From<f64> for TorusPoint {
    fn from(x: f64) -> Self {
        TorusPoint::new(x)
    }
}

/// Reduce `x` modulo 2 into `[-1, 1)`.
pub fn wrap(x: f64) -> f64 {
    if (-1.0..1.0).contains(&x) {
        return x;
    }
    let r = (x + 1.0).rem_euclid(TORUS_LENGTH) - 1.0;
    // rem_euclid can round up to exactly 2.0 for tiny negative inputs
    if r >= 1.0 {
        r - TORUS_LENGTH
    } else {
        r
    }
}

/// One spatial snapshot `u(t, .)` sampled at `x_j = -1 + j dx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    values: Vec<f64>,
    dx: f64,
}

impl GridFunction {
    /// Wraps samples on a uniform grid; `dx` is `2 / len`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("grid function needs at least one node".into()));
        }
        if let Some(cell) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { time: f64::NAN, cell });
        }
        let dx = TORUS_LENGTH / values.len() as f64;
        Ok(GridFunction { values, dx })
    }

    pub fn from_fn(n_space: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let dx = TORUS_LENGTH / n_space as f64;
        GridFunction::new((0..n_space).map(|j| f(-1.0 + j as f64 * dx)).collect())
    }

    pub fn constant(n_space: usize, c: f64) -> Result<Self> {
        GridFunction::new(vec![c; n_space])
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        let dx = TORUS_LENGTH / values.len() as f64;
        GridFunction { values, dx }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn node(&self, j: usize) -> f64 {
        -1.0 + j as f64 * self.dx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn inf(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Periodic trapezoid rule, which on a uniform periodic grid is `dx * sum`.
    pub fn integral(&self) -> f64 {
        self.dx * self.values.iter().sum::<f64>()
    }

    pub fn l1_norm(&self) -> f64 {
        self.dx * self.values.iter().map(|v| v.abs()).sum::<f64>()
    }

    pub fn sup_distance(&self, other: &GridFunction) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "grids of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `a * self + b * other`.
    pub fn linear_combination(&self, a: f64, other: &GridFunction, b: f64) -> Result<GridFunction> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "grids of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        GridFunction::new(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(u, v)| a * u + b * v)
                .collect(),
        )
    }
}
