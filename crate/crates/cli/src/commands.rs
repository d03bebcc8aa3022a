use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};

use she_core::experiments::{run_ensemble, run_plan, thread_pool, TOOL_NAME, TRAJECTORY_DIR, VERSION};
use she_core::inequalities::{default_lattice, verify_beta_bound, verify_lemma_ij, IjQuery};
use she_core::kernel::{free_kernel, image_tail_bound, kernel_l2_diff_space, periodic_kernel};
use she_core::kernel_bounds::{fit_kernel_constants, verify_kernel_suite, KernelConstants};
use she_core::observables::CsvMeta;
use she_core::util::{config_digest, sha256_hex};
use she_core::TorusPoint;

use crate::config::{resolve_output_dir, KernelSettings, RunConfig};
use crate::exit::CliError;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const KERNEL_CERTIFICATE: &str = "kernel_certificate.json";
pub const INEQUALITIES_CERTIFICATE: &str = "inequalities_certificate.json";

fn init_logging(level: &str) {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Worker pool sized by `--workers`, else by the machine.
fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let n = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    Ok(thread_pool(n)?)
}

fn write_lines(path: &Path, lines: &[Value]) -> Result<(), CliError> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::failed(format!("writing {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::failed(format!("creating {}: {e}", dir.display())))
}

pub fn simulate(config: &Path, overrides: &[String], out: Option<&Path>, workers: Option<usize>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config, overrides)?;
    init_logging(&cfg.log_level);
    cfg.solver.validate()?;
    if cfg.n_trajectories == 0 {
        return Err(CliError::config("n_trajectories must be at least 1"));
    }
    let digest = cfg.digest()?;
    let dir = cfg.output_dir(out);
    let pool = pool(workers.or(cfg.workers))?;
    log::info!("simulating {} trajectories into {}", cfg.n_trajectories, dir.display());
    let records = pool.install(|| run_ensemble(&cfg.solver, cfg.n_trajectories))?;

    let tdir = dir.join(TRAJECTORY_DIR);
    create_dir(&tdir)?;
    let meta = CsvMeta {
        tool: TOOL_NAME,
        version: VERSION,
        config_digest: &digest,
    };
    let mut lines = vec![json!({
        "record": "run",
        "command": "simulate",
        "tool": TOOL_NAME,
        "version": VERSION,
        "config_digest": digest,
        "master_seed": cfg.solver.seed.master_seed,
        "n_trajectories": cfg.n_trajectories,
        "effective_dt": cfg.solver.effective_dt(),
        "n_steps": cfg.solver.n_steps(),
        "config": cfg.effective(),
    })];
    for r in &records {
        let name = format!("traj_{:05}.csv", r.seed.stream_index);
        let csv = r.to_csv(&meta);
        let path = tdir.join(&name);
        fs::write(&path, &csv).map_err(|e| CliError::failed(format!("writing {}: {e}", path.display())))?;
        lines.push(json!({
            "record": "trajectory",
            "stream": r.seed.stream_index,
            "file": format!("{TRAJECTORY_DIR}/{name}"),
            "sha256": sha256_hex(csv.as_bytes()),
            "final_mass": r.mass.last(),
            "final_sup": r.sup.last(),
            "final_inf": r.inf.last(),
            "negativity_count": r.negativity_total(),
            "config_digest": digest,
        }));
    }
    write_lines(&dir.join(MANIFEST_FILE), &lines)?;
    println!(
        "wrote {} trajectories and {} to {} (config digest {})",
        records.len(),
        MANIFEST_FILE,
        dir.display(),
        &digest[..12]
    );
    Ok(())
}

pub fn probe(config: &Path, overrides: &[String], out: Option<&Path>, workers: Option<usize>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config, overrides)?;
    init_logging(&cfg.log_level);
    if cfg.probes.is_empty() {
        return Err(CliError::config("the plan lists no probes"));
    }
    let plan = cfg.plan();
    plan.validate()?;
    let digest = plan.digest()?;
    let dir = cfg.output_dir(out);
    let pool = pool(workers.or(cfg.workers))?;
    log::info!("running {} probes into {}", plan.probes.len(), dir.display());
    let outcome = pool.install(|| run_plan(&plan, Some(&dir)))?;
    write_lines(
        &dir.join(MANIFEST_FILE),
        &[json!({
            "record": "run",
            "command": "probe",
            "tool": TOOL_NAME,
            "version": VERSION,
            "config_digest": digest,
            "master_seed": plan.solver.seed.master_seed,
            "n_trajectories": plan.n_trajectories,
            "config": cfg.effective(),
        })],
    )?;
    print!("{}", outcome.table());
    for note in &outcome.metadata.notes {
        println!("note: {note}");
    }
    let fails = outcome.rows.iter().filter(|r| r.verdict == she_core::Verdict::Fail).count();
    if fails > 0 || !outcome.failures.is_empty() {
        return Err(CliError::failed(format!(
            "{fails} failing verdicts and {} probe errors",
            outcome.failures.len()
        )));
    }
    Ok(())
}

fn certificate_dir(out: Option<&Path>) -> PathBuf {
    resolve_output_dir(out, None)
}

pub fn verify_kernel(fixture: Option<&Path>, write_fixture: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let mut constants = match fixture {
        Some(p) => KernelConstants::load(p)?,
        None => KernelConstants::builtin(),
    };
    if let Some(path) = write_fixture {
        constants = fit_kernel_constants(&constants.grid)?;
        fs::write(path, constants.to_toml())
            .map_err(|e| CliError::failed(format!("writing {}: {e}", path.display())))?;
        println!("fitted constants written to {}", path.display());
    }
    let checks = verify_kernel_suite(&constants)?;
    let digest = config_digest(&constants)?;
    let pass = checks.iter().all(|c| c.pass);
    println!("{:<28} {:>7} {:>13} verdict", "check", "cases", "worst");
    for c in &checks {
        println!(
            "{:<28} {:>7} {:>13.5e} {}",
            c.name,
            c.cases,
            c.worst,
            if c.pass { "pass" } else { "FAIL" }
        );
        if let Some(f) = &c.failure {
            println!("    first failure: {f}");
        }
    }
    let dir = certificate_dir(out);
    create_dir(&dir)?;
    let cert = json!({
        "tool": TOOL_NAME,
        "version": VERSION,
        "config_digest": digest,
        "master_seed": Value::Null,
        "constants": constants,
        "checks": checks,
        "pass": pass,
    });
    let path = dir.join(KERNEL_CERTIFICATE);
    fs::write(&path, serde_json::to_string_pretty(&cert)? + "\n")
        .map_err(|e| CliError::failed(format!("writing {}: {e}", path.display())))?;
    if pass {
        Ok(())
    } else {
        let failing: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        Err(CliError::failed(format!("kernel checks failed: {}", failing.join(", "))))
    }
}

pub fn verify_inequalities(
    eps: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let tuples: Vec<(f64, f64, f64)> = match (eps, alpha, beta) {
        (Some(e), Some(a), Some(b)) => vec![(e, a, b)],
        _ => default_lattice()
            .into_iter()
            .filter(|&(e, a, b)| eps.is_none_or(|v| v == e) && alpha.is_none_or(|v| v == a) && beta.is_none_or(|v| v == b))
            .collect(),
    };
    if tuples.is_empty() {
        return Err(CliError::config("no lattice tuple matches the given eps, alpha and beta"));
    }
    let mut ij = Vec::new();
    println!("{:>5} {:>5} {:>6} {:>13} {:>13} {:>11} verdict", "eps", "alpha", "beta", "sup J", "bound", "margin");
    for &(e, a, b) in &tuples {
        let cert = verify_lemma_ij(&IjQuery::new(e, a, b)?)?;
        println!(
            "{:>5} {:>5} {:>6} {:>13.6e} {:>13.6e} {:>11.3e} {}",
            e,
            a,
            b,
            cert.sup_value,
            cert.bound,
            cert.margin,
            if cert.pass { "pass" } else { "FAIL" }
        );
        ij.push(cert);
    }
    let mut pairs: Vec<(f64, f64)> = tuples.iter().map(|&(e, a, _)| (e, a)).collect();
    pairs.dedup();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
    pairs.dedup();
    let betas = pairs
        .iter()
        .map(|&(e, a)| verify_beta_bound(e, a))
        .collect::<Result<Vec<_>, _>>()?;
    let pass = ij.iter().all(|c| c.pass) && betas.iter().all(|c| c.pass);
    let digest = config_digest(&tuples)?;
    let dir = certificate_dir(out);
    create_dir(&dir)?;
    let cert = json!({
        "tool": TOOL_NAME,
        "version": VERSION,
        "config_digest": digest,
        "master_seed": Value::Null,
        "ij": ij,
        "beta": betas,
        "pass": pass,
    });
    let path = dir.join(INEQUALITIES_CERTIFICATE);
    fs::write(&path, serde_json::to_string_pretty(&cert)? + "\n")
        .map_err(|e| CliError::failed(format!("writing {}: {e}", path.display())))?;
    if pass {
        Ok(())
    } else {
        let bad = ij.iter().find(|c| !c.pass).map(|c| format!("eps={} alpha={} beta={}", c.eps, c.alpha, c.beta));
        Err(CliError::failed(format!(
            "inequality check failed{}",
            bad.map(|b| format!(" at {b}")).unwrap_or_default()
        )))
    }
}

pub fn kernel_eval(t: f64, x: f64, y: f64, order: Option<usize>, tol: f64) -> Result<(), CliError> {
    let settings = KernelSettings {
        truncation_order: order,
        abs_tolerance: tol,
    };
    let params = settings.params_for(t)?;
    let (px, py) = (TorusPoint::new(x), TorusPoint::new(y));
    let value = periodic_kernel(t, px, py, &params)?;
    let out = json!({
        "t": t,
        "x": px.coordinate(),
        "y": py.coordinate(),
        "p_t": value,
        "free_kernel": free_kernel(t, px.displacement(py))?,
        "l2_diff_space": kernel_l2_diff_space(t, px, py)?,
        "truncation_order": params.truncation_order(),
        "tail_bound": image_tail_bound(t, params.truncation_order()),
    });
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}
