//! Discretized space-time white noise.
//!
//! Each trajectory owns one ChaCha8 stream selected by `(master_seed,
//! stream_index)`, so realization `j` is the same however many trajectories
//! run and in whatever order. Cell increments are `N(0, dt dx)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grid::TORUS_LENGTH;

const MAGIC: &[u8; 8] = b"SHENOISE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed {
    pub master_seed: u64,
    pub stream_index: u64,
}

impl RngSeed {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        RngSeed {
            master_seed,
            stream_index,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_index);
        rng
    }
}

/// Something that supplies one time-slice of noise increments per step.
pub trait NoiseSource {
    /// Fills `row` with the increments of time step `step`.
    fn fill_row(&mut self, step: usize, row: &mut [f64]) -> Result<()>;
}

/// Lazily generated increments for one trajectory.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    scale: f64,
}

impl NoiseStream {
    pub fn new(seed: RngSeed, dt: f64, dx: f64) -> Result<Self> {
        check_cell(dt, dx)?;
        Ok(NoiseStream {
            rng: seed.rng(),
            scale: (dt * dx).sqrt(),
        })
    }

    #[inline]
    pub fn next_row(&mut self, row: &mut [f64]) {
        for v in row.iter_mut() {
            let z: f64 = self.rng.sample(StandardNormal);
            *v = self.scale * z;
        }
    }
}

impl NoiseSource for NoiseStream {
    fn fill_row(&mut self, _step: usize, row: &mut [f64]) -> Result<()> {
        self.next_row(row);
        Ok(())
    }
}

fn check_cell(dt: f64, dx: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite() && dx > 0.0 && dx.is_finite()) {
        return Err(Error::Shape(format!("cell sizes must be positive, got dt={dt} dx={dx}")));
    }
    Ok(())
}

/// A fully materialized increment field, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseGrid {
    dt: f64,
    dx: f64,
    n_time: usize,
    n_space: usize,
    increments: Vec<f64>,
}

impl NoiseGrid {
    pub fn from_increments(dt: f64, n_time: usize, n_space: usize, increments: Vec<f64>) -> Result<Self> {
        if n_space == 0 {
            return Err(Error::Shape("noise grid needs at least one spatial cell".into()));
        }
        let dx = TORUS_LENGTH / n_space as f64;
        check_cell(dt, dx)?;
        if increments.len() != n_time * n_space {
            return Err(Error::Shape(format!(
                "{} increments for a {n_time} x {n_space} grid",
                increments.len()
            )));
        }
        Ok(NoiseGrid {
            dt,
            dx,
            n_time,
            n_space,
            increments,
        })
    }

    pub fn zeros(dt: f64, n_time: usize, n_space: usize) -> Result<Self> {
        NoiseGrid::from_increments(dt, n_time, n_space, vec![0.0; n_time * n_space])
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn n_space(&self) -> usize {
        self.n_space
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn row(&self, step: usize) -> &[f64] {
        &self.increments[step * self.n_space..(step + 1) * self.n_space]
    }

    /// Coarsens by summing blocks of `time_factor x space_factor` cells; the
    /// coarse field is the same Brownian sheet seen at the coarser resolution.
    pub fn aggregate(&self, time_factor: usize, space_factor: usize) -> Result<NoiseGrid> {
        if time_factor == 0
            || space_factor == 0
            || self.n_time % time_factor != 0
            || self.n_space % space_factor != 0
        {
            return Err(Error::Shape(format!(
                "cannot coarsen {} x {} by {time_factor} x {space_factor}",
                self.n_time, self.n_space
            )));
        }
        let (nt, nx) = (self.n_time / time_factor, self.n_space / space_factor);
        let mut out = vec![0.0; nt * nx];
        for i in 0..self.n_time {
            for j in 0..self.n_space {
                out[(i / time_factor) * nx + j / space_factor] += self.increments[i * self.n_space + j];
            }
        }
        NoiseGrid::from_increments(self.dt * time_factor as f64, nt, nx, out)
    }

    /// Shape header (`n_time`, `n_space` as u64, `dt` as f64) after a magic
    /// tag, then every increment as little-endian f64, time-major.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.n_time as u64).to_le_bytes())?;
        w.write_all(&(self.n_space as u64).to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        for v in &self.increments {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Shape("not a noise dump".into()));
        }
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let n_time = u64::from_le_bytes(buf) as usize;
        r.read_exact(&mut buf)?;
        let n_space = u64::from_le_bytes(buf) as usize;
        r.read_exact(&mut buf)?;
        let dt = f64::from_le_bytes(buf);
        let total = n_time
            .checked_mul(n_space)
            .ok_or_else(|| Error::Shape("noise dump shape overflows".into()))?;
        let mut increments = Vec::with_capacity(total);
        for _ in 0..total {
            r.read_exact(&mut buf)?;
            increments.push(f64::from_le_bytes(buf));
        }
        NoiseGrid::from_increments(dt, n_time, n_space, increments)
    }
}

impl NoiseSource for &NoiseGrid {
    fn fill_row(&mut self, step: usize, row: &mut [f64]) -> Result<()> {
        if step >= self.n_time {
            return Err(Error::Horizon {
                time: (step + 1) as f64 * self.dt,
                horizon: self.n_time as f64 * self.dt,
            });
        }
        if row.len() != self.n_space {
            return Err(Error::Shape(format!(
                "noise grid has {} cells, solver has {}",
                self.n_space,
                row.len()
            )));
        }
        row.copy_from_slice(NoiseGrid::row(self, step));
        Ok(())
    }
}

/// Samples the full `n_time x n_space` grid for one stream. The rows are the
/// ones a [`NoiseStream`] with the same seed would produce.
pub fn sample_noise(seed: RngSeed, dt: f64, n_time: usize, n_space: usize) -> Result<NoiseGrid> {
    if n_space == 0 {
        return Err(Error::Shape("noise grid needs at least one spatial cell".into()));
    }
    let dx = TORUS_LENGTH / n_space as f64;
    let mut stream = NoiseStream::new(seed, dt, dx)?;
    let mut increments = vec![0.0; n_time * n_space];
    for row in increments.chunks_exact_mut(n_space) {
        stream.next_row(row);
    }
    NoiseGrid::from_increments(dt, n_time, n_space, increments)
}
