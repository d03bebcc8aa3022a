//! Finite-difference Euler-Maruyama schemes for
//! `du = nu u_xx dt + lambda sigma(u) W(dt dx)` on the torus.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::grid::{GridFunction, TORUS_LENGTH};
use crate::noise::{NoiseSource, NoiseStream, RngSeed};
use crate::observables::TrajectoryRecord;
use crate::sigma::{Sigma, SigmaSpec};
use crate::stats::NeumaierSum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    ExplicitEm,
    SemiImplicitEm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativityPolicy {
    /// Count negative cells but leave them alone; keeps the mass identity exact.
    #[default]
    RecordOnly,
    ClampToZero,
}

/// Initial profile `u0`, sampled on the solver grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialProfile {
    Constant {
        value: f64,
    },
    /// `mean + amplitude cos(mode pi x)`.
    Cosine {
        mean: f64,
        amplitude: f64,
        #[serde(default = "one")]
        mode: u32,
    },
    /// Explicit nodal values; the length must equal `n_space`.
    Values {
        values: Vec<f64>,
    },
}

fn one() -> u32 {
    1
}

impl Default for InitialProfile {
    fn default() -> Self {
        InitialProfile::Constant { value: 1.0 }
    }
}

impl InitialProfile {
    pub fn sample(&self, n_space: usize) -> Result<GridFunction> {
        match self {
            InitialProfile::Constant { value } => GridFunction::constant(n_space, *value),
            InitialProfile::Cosine {
                mean,
                amplitude,
                mode,
            } => {
                let k = f64::from(*mode) * std::f64::consts::PI;
                GridFunction::from_fn(n_space, |x| mean + amplitude * (k * x).cos())
            }
            InitialProfile::Values { values } => {
                if values.len() != n_space {
                    return Err(Error::Shape(format!(
                        "initial profile has {} values for {n_space} cells",
                        values.len()
                    )));
                }
                GridFunction::new(values.clone())
            }
        }
    }
}

fn default_diffusion() -> f64 {
    1.0
}

/// Discretization, noise level, nonlinearity and seed of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub n_space: usize,
    pub dt: f64,
    pub horizon: f64,
    pub lambda: f64,
    #[serde(default)]
    pub sigma: SigmaSpec,
    #[serde(default)]
    pub seed: SeedConfig,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub negativity_policy: NegativityPolicy,
    /// Diffusion coefficient `nu` in front of `u_xx`.
    #[serde(default = "default_diffusion")]
    pub diffusion: f64,
    /// Record every this many steps; defaults to `ceil(0.01 / dt)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_every: Option<usize>,
    /// Admits `lambda = 0` for deterministic checks.
    #[serde(default)]
    pub test_mode: bool,
    /// Times at which full spatial snapshots are kept in the record.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshot_times: Vec<f64>,
    #[serde(default)]
    pub initial: InitialProfile,
}

/// The serialized form of [`RngSeed`]; `stream_index` is the trajectory index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub master_seed: u64,
    #[serde(default)]
    pub stream_index: u64,
}

impl From<SeedConfig> for RngSeed {
    fn from(s: SeedConfig) -> Self {
        RngSeed::new(s.master_seed, s.stream_index)
    }
}

impl SolverConfig {
    /// Explicit scheme, linear `sigma`, `dt = dx^2 / 4`, constant `u0 = 1`.
    pub fn new(n_space: usize, horizon: f64, lambda: f64) -> Self {
        let dx = TORUS_LENGTH / n_space as f64;
        SolverConfig {
            n_space,
            dt: dx * dx / 4.0,
            horizon,
            lambda,
            sigma: SigmaSpec::default(),
            seed: SeedConfig::default(),
            scheme: Scheme::ExplicitEm,
            negativity_policy: NegativityPolicy::RecordOnly,
            diffusion: 1.0,
            output_every: None,
            test_mode: false,
            snapshot_times: Vec::new(),
            initial: InitialProfile::default(),
        }
    }

    pub fn dx(&self) -> f64 {
        TORUS_LENGTH / self.n_space as f64
    }

    pub fn rng_seed(&self) -> RngSeed {
        self.seed.into()
    }

    /// Number of steps; the horizon is reached exactly by shrinking `dt`
    /// when it does not divide the horizon.
    pub fn n_steps(&self) -> usize {
        if self.horizon == 0.0 {
            return 0;
        }
        (self.horizon / self.dt - 1e-9).ceil().max(1.0) as usize
    }

    /// The step actually taken.
    pub fn effective_dt(&self) -> f64 {
        match self.n_steps() {
            0 => self.dt,
            n => self.horizon / n as f64,
        }
    }

    pub fn output_every(&self) -> usize {
        self.output_every
            .unwrap_or_else(|| (0.01 / self.effective_dt()).ceil() as usize)
            .max(1)
    }

    pub fn validate(&self) -> Result<Sigma> {
        if self.n_space < 3 {
            return Err(Error::config(format!("n_space must be at least 3, got {}", self.n_space)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::config(format!("horizon must be nonnegative, got {}", self.horizon)));
        }
        if !(self.diffusion > 0.0 && self.diffusion.is_finite()) {
            return Err(Error::config(format!("diffusion must be positive, got {}", self.diffusion)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.lambda == 0.0 && !self.test_mode {
            return Err(Error::config("lambda = 0 is only admitted with test_mode = true"));
        }
        if self.scheme == Scheme::ExplicitEm {
            let dx = self.dx();
            let limit = dx * dx / (2.0 * self.diffusion);
            if self.effective_dt() > limit * (1.0 + 1e-12) {
                return Err(Error::config(format!(
                    "explicit scheme violates the stability rule dt <= dx^2 / (2 nu): dt = {} > {limit:e}",
                    self.dt
                )));
            }
        }
        if let Some(t) = self.snapshot_times.iter().find(|&&t| !(0.0..=self.horizon).contains(&t)) {
            return Err(Error::config(format!("snapshot time {t} outside [0, {}]", self.horizon)));
        }
        self.sigma.compile().map_err(|e| Error::config(e.to_string()))
    }
}

/// Constant-coefficient cyclic tridiagonal solver for `(1 + 2r) x_j - r (x_{j-1} + x_{j+1}) = d_j`,
/// by Thomas elimination plus a Sherman-Morrison correction for the corners.
#[derive(Debug, Clone)]
struct CyclicTridiagonal {
    r: f64,
    gamma: f64,
    cp: Vec<f64>,
    inv: Vec<f64>,
    z: Vec<f64>,
    factor_denominator: f64,
}

impl CyclicTridiagonal {
    fn new(n: usize, r: f64) -> Self {
        let (a, b) = (-r, 1.0 + 2.0 * r);
        let gamma = -b;
        let mut diag = vec![b; n];
        diag[0] = b - gamma;
        diag[n - 1] = b - a * a / gamma;
        let mut cp = vec![0.0; n];
        let mut inv = vec![0.0; n];
        inv[0] = 1.0 / diag[0];
        cp[0] = a * inv[0];
        for i in 1..n {
            inv[i] = 1.0 / (diag[i] - a * cp[i - 1]);
            cp[i] = a * inv[i];
        }
        let mut solver = CyclicTridiagonal {
            r,
            gamma,
            cp,
            inv,
            z: vec![0.0; n],
            factor_denominator: 0.0,
        };
        let mut rhs = vec![0.0; n];
        rhs[0] = gamma;
        rhs[n - 1] = a;
        let mut z = vec![0.0; n];
        solver.thomas(&rhs, &mut z);
        solver.factor_denominator = 1.0 + z[0] + a * z[n - 1] / gamma;
        solver.z = z;
        solver
    }

    fn thomas(&self, d: &[f64], x: &mut [f64]) {
        let n = d.len();
        let a = -self.r;
        x[0] = d[0] * self.inv[0];
        for i in 1..n {
            x[i] = (d[i] - a * x[i - 1]) * self.inv[i];
        }
        for i in (0..n - 1).rev() {
            x[i] -= self.cp[i] * x[i + 1];
        }
    }

    fn solve(&self, d: &[f64], x: &mut [f64]) {
        self.thomas(d, x);
        let n = d.len();
        let a = -self.r;
        let f = (x[0] + a * x[n - 1] / self.gamma) / self.factor_denominator;
        for (xi, zi) in x.iter_mut().zip(&self.z) {
            *xi -= f * zi;
        }
    }
}

/// What one step did besides updating `u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// `lambda sum_j sigma(u_j) dW_j`, the exact mass increment.
    pub noise_increment: f64,
    pub negative_cells: usize,
}

/// Advances a grid function one step at a time.
#[derive(Debug, Clone)]
pub struct Stepper {
    dt: f64,
    dx: f64,
    lambda: f64,
    sigma: Sigma,
    scheme: Scheme,
    policy: NegativityPolicy,
    r: f64,
    tridiagonal: Option<CyclicTridiagonal>,
    work: Vec<f64>,
    rhs: Vec<f64>,
}

impl Stepper {
    pub fn new(config: &SolverConfig) -> Result<Self> {
        let sigma = config.validate()?;
        let dt = config.effective_dt();
        let dx = config.dx();
        let r = config.diffusion * dt / (dx * dx);
        let n = config.n_space;
        Ok(Stepper {
            dt,
            dx,
            lambda: config.lambda,
            sigma,
            scheme: config.scheme,
            policy: config.negativity_policy,
            r,
            tridiagonal: (config.scheme == Scheme::SemiImplicitEm).then(|| CyclicTridiagonal::new(n, r)),
            work: vec![0.0; n],
            rhs: vec![0.0; n],
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sigma(&self) -> &Sigma {
        &self.sigma
    }

    /// One step of `u` under the increments `dw`. `time` is the time after
    /// the step and only labels errors.
    pub fn step(&mut self, u: &mut [f64], dw: &[f64], time: f64) -> Result<StepInfo> {
        let n = u.len();
        if n != self.work.len() || dw.len() != n {
            return Err(Error::Shape(format!(
                "state has {n} cells, noise row {}, stepper {}",
                dw.len(),
                self.work.len()
            )));
        }
        let coef = self.lambda / self.dx;
        // the noise forcing, evaluated at the pre-step state
        let mut increment = 0.0;
        if self.lambda != 0.0 {
            if self.sigma.is_identity() {
                for ((f, &v), &w) in self.rhs.iter_mut().zip(u.iter()).zip(dw) {
                    let s = v * w;
                    increment += s;
                    *f = coef * s;
                }
            } else {
                for ((f, &v), &w) in self.rhs.iter_mut().zip(u.iter()).zip(dw) {
                    let s = self.sigma.eval(v) * w;
                    increment += s;
                    *f = coef * s;
                }
            }
        } else {
            self.rhs.fill(0.0);
        }
        let r = self.r;
        match self.scheme {
            Scheme::ExplicitEm => {
                let w = &mut self.work;
                w[0] = u[0] + r * (u[n - 1] - 2.0 * u[0] + u[1]) + self.rhs[0];
                for j in 1..n - 1 {
                    w[j] = u[j] + r * (u[j - 1] - 2.0 * u[j] + u[j + 1]) + self.rhs[j];
                }
                w[n - 1] = u[n - 1] + r * (u[n - 2] - 2.0 * u[n - 1] + u[0]) + self.rhs[n - 1];
            }
            Scheme::SemiImplicitEm => {
                for (f, &v) in self.rhs.iter_mut().zip(u.iter()) {
                    *f += v;
                }
                self.tridiagonal
                    .as_ref()
                    .expect("semi-implicit stepper has a factorization")
                    .solve(&self.rhs, &mut self.work);
            }
        }
        let mut negative_cells = 0;
        for (j, (dst, &v)) in u.iter_mut().zip(&self.work).enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { time, cell: j });
            }
            if v < 0.0 {
                negative_cells += 1;
                *dst = match self.policy {
                    NegativityPolicy::RecordOnly => v,
                    NegativityPolicy::ClampToZero => 0.0,
                };
            } else {
                *dst = v;
            }
        }
        Ok(StepInfo {
            noise_increment: self.lambda * increment,
            negative_cells,
        })
    }
}

/// Receives full spatial frames during a run.
pub trait SnapshotSink {
    fn frame(&mut self, time: f64, u: &[f64]) -> Result<()>;
}

/// Binary snapshot stream: magic, then `n_space` (u64) and `dx, dt, nu,
/// lambda` (f64), then frames of `time` followed by `n_space` values, all
/// little-endian.
pub struct SnapshotWriter<W: Write> {
    out: W,
}

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"SHESNAP1";

impl<W: Write> SnapshotWriter<W> {
    pub fn new(mut out: W, config: &SolverConfig) -> Result<Self> {
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&(config.n_space as u64).to_le_bytes())?;
        for v in [config.dx(), config.effective_dt(), config.diffusion, config.lambda] {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(SnapshotWriter { out })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> SnapshotSink for SnapshotWriter<W> {
    fn frame(&mut self, time: f64, u: &[f64]) -> Result<()> {
        self.out.write_all(&time.to_le_bytes())?;
        for v in u {
            self.out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Reads a snapshot stream back as `(header, frames)`; the header is
/// `(n_space, dx, dt, nu, lambda)`.
#[allow(clippy::type_complexity)]
pub fn read_snapshots(bytes: &[u8]) -> Result<((usize, f64, f64, f64, f64), Vec<(f64, Vec<f64>)>)> {
    let bad = || Error::Shape("malformed snapshot stream".into());
    if bytes.len() < 48 || &bytes[..8] != SNAPSHOT_MAGIC {
        return Err(bad());
    }
    let word = |i: usize| -> [u8; 8] { bytes[i..i + 8].try_into().expect("eight bytes") };
    let n = u64::from_le_bytes(word(8)) as usize;
    let f = |i: usize| f64::from_le_bytes(word(i));
    let header = (n, f(16), f(24), f(32), f(40));
    let frame_len = 8 * (n + 1);
    let body = &bytes[48..];
    if n == 0 || body.len() % frame_len != 0 {
        return Err(bad());
    }
    let frames = body
        .chunks_exact(frame_len)
        .map(|c| {
            let g = |i: usize| f64::from_le_bytes(c[8 * i..8 * i + 8].try_into().expect("eight bytes"));
            (g(0), (1..=n).map(g).collect())
        })
        .collect();
    Ok((header, frames))
}

struct Recorder {
    record: TrajectoryRecord,
    dx: f64,
}

impl Recorder {
    fn push(&mut self, time: f64, u: &[f64], qv: f64, negatives: u64, noise_integral: f64) {
        let mass: NeumaierSum = u.iter().copied().collect();
        let mass = self.dx * mass.value();
        let (mut sup, mut inf) = (f64::NEG_INFINITY, f64::INFINITY);
        for &v in u {
            sup = sup.max(v);
            inf = inf.min(v);
        }
        let r = &mut self.record;
        r.times.push(time);
        r.mass.push(mass);
        r.sup.push(sup);
        r.inf.push(inf);
        r.log_mass.push(if mass > 0.0 { mass.ln() } else { f64::NAN });
        r.qv_n.push(qv);
        r.negativity_count.push(negatives);
        r.noise_integral.push(noise_integral);
    }
}

fn check_initial(u0: &GridFunction, config: &SolverConfig) -> Result<()> {
    if u0.len() != config.n_space {
        return Err(Error::Shape(format!(
            "initial profile has {} cells, config has {}",
            u0.len(),
            config.n_space
        )));
    }
    let inf = u0.inf();
    // test mode admits profiles that touch zero, like 1 + cos(pi x)
    let ok = if config.test_mode { inf >= 0.0 } else { inf > 0.0 };
    if !ok || u0.integral() <= 0.0 {
        return Err(Error::domain(format!(
            "initial profile must be strictly positive (inf u0 = {inf})"
        )));
    }
    Ok(())
}

/// Runs one trajectory with the noise stream selected by `config.seed`.
pub fn run_trajectory(u0: &GridFunction, config: &SolverConfig) -> Result<TrajectoryRecord> {
    let stream = NoiseStream::new(config.rng_seed(), config.effective_dt(), config.dx())?;
    run_trajectory_with(u0, config, stream, None)
}

/// Runs one trajectory against an arbitrary noise source, optionally
/// streaming every recorded frame to `sink`.
pub fn run_trajectory_with(
    u0: &GridFunction,
    config: &SolverConfig,
    mut noise: impl NoiseSource,
    mut sink: Option<&mut dyn SnapshotSink>,
) -> Result<TrajectoryRecord> {
    let mut stepper = Stepper::new(config)?;
    check_initial(u0, config)?;
    let n_steps = config.n_steps();
    let dt = stepper.dt();
    let every = config.output_every();
    let snapshot_steps: Vec<usize> = config
        .snapshot_times
        .iter()
        .map(|&t| (t / dt).round() as usize)
        .collect();

    let mut recorder = Recorder {
        record: TrajectoryRecord::empty(config),
        dx: config.dx(),
    };
    let mut u = u0.values().to_vec();
    let mut dw = vec![0.0; config.n_space];
    let mut qv = NeumaierSum::new();
    let mut noise_integral = NeumaierSum::new();
    let mut negatives: u64 = u.iter().filter(|&&v| v < 0.0).count() as u64;
    let mut mass_prev = u0.integral();

    let mut observe = |step: usize, u: &[f64], rec: &mut Recorder, qv: f64, neg: u64, ni: f64| -> Result<()> {
        let time = step as f64 * dt;
        if step % every == 0 || step == n_steps {
            rec.push(time, u, qv, neg, ni);
            if let Some(s) = sink.as_deref_mut() {
                s.frame(time, u)?;
            }
        }
        for (k, _) in snapshot_steps.iter().enumerate().filter(|(_, &s)| s == step) {
            rec.record
                .snapshots
                .push((config.snapshot_times[k], GridFunction::from_vec_unchecked(u.to_vec())));
        }
        Ok(())
    };

    observe(0, &u, &mut recorder, 0.0, negatives, 0.0)?;
    for step in 1..=n_steps {
        let time = step as f64 * dt;
        if config.lambda != 0.0 {
            noise.fill_row(step - 1, &mut dw)?;
        }
        let info = stepper
            .step(&mut u, &dw, time)
            .map_err(|e| e.context(format!("stream {}", config.seed.stream_index)))?;
        noise_integral.add(info.noise_increment);
        qv.add((info.noise_increment / mass_prev).powi(2));
        mass_prev += info.noise_increment;
        negatives += info.negative_cells as u64;
        observe(step, &u, &mut recorder, qv.value(), negatives, noise_integral.value())?;
    }
    Ok(recorder.record)
}
