//! Executes a prepared configuration and writes its CSV outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rareopt::buffered::{minimize_buffered, BufferedOptions};
use rareopt::estimators::{is_on_u, is_on_x, plain_mc};
use rareopt::objective::g_limit;
use rareopt::optimize::{ascend_g_n, solve_limit, AscentOptions, LimitOptions};
use rareopt::subsolution::{build_u_scheme, build_x_scheme};
use rareopt::{EstimateSummary, MgfConfig, Parallelism, SimulationSpec};

use crate::config::{Prepared, RunKind, SchemeName};
use crate::CliError;

/// Long-form table written as one CSV file.
pub struct Table {
    pub name: &'static str,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &'static str, header: Vec<String>) -> Self {
        Self { name, header, rows: Vec::new() }
    }

    fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(format!("{}.csv", self.name));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(path)
    }
}

fn cols(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("{prefix}_{i}")).collect()
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn fmts(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| fmt(*x)).collect()
}

/// Standard error of `log_mean` by the delta method.
fn log_mean_se(s: &EstimateSummary) -> f64 {
    (s.log_se - s.log_mean).exp()
}

pub struct RunOutcome {
    pub files: Vec<(PathBuf, usize)>,
    pub seconds: f64,
}

pub fn execute(p: &Prepared, jobs: Option<usize>, out_dir: &Path) -> Result<RunOutcome, CliError> {
    let start = Instant::now();
    let par = Parallelism(jobs.unwrap_or(0));
    let cfg = &p.config;
    let d = p.model.dims().d;
    let mgf = MgfConfig::default();
    let spec_for = |seed: u64| {
        let sim = cfg.simulation.as_ref().expect("validated");
        SimulationSpec::new(sim.n, sim.replications, seed).with_parallelism(par)
    };

    let mut tables = Vec::new();
    match cfg.kind {
        RunKind::Estimate => {
            let sim = cfg.simulation.as_ref().expect("validated");
            let mut header: Vec<String> =
                ["experiment", "scheme", "n", "replications", "seed"].map(String::from).to_vec();
            header.extend(cols("theta", d));
            header.extend(
                ["log_mean", "log_mean_se", "log_std", "log_se", "log_second_moment", "hit_proportion", "wall_seconds"]
                    .map(String::from),
            );
            let mut t = Table::new("estimates", header);
            for theta in cfg.theta.as_ref().expect("validated") {
                let control = match sim.scheme {
                    SchemeName::Plain => None,
                    SchemeName::IsX => Some(build_x_scheme(&p.model, &p.dist, theta, &p.phi, &mgf)?),
                    SchemeName::IsU => Some(build_u_scheme(&p.model, &p.dist, theta, &p.phi, &mgf)?),
                };
                for &seed in &sim.seeds {
                    let spec = spec_for(seed);
                    let s = match (&control, sim.scheme) {
                        (Some(c), SchemeName::IsX) => is_on_x(&p.model, &p.dist, theta, &p.phi, c, &spec)?,
                        (Some(c), _) => is_on_u(&p.model, &p.dist, theta, &p.phi, c, &spec)?,
                        (None, _) => plain_mc(&p.model, &p.dist, theta, &p.phi, &spec)?,
                    };
                    log::info!("θ = {theta:?}, seed {seed}: log mean {:.4}", s.log_mean);
                    let mut row = vec![
                        cfg.experiment.clone(),
                        sim.scheme.label().to_string(),
                        s.n.to_string(),
                        s.replications.to_string(),
                        seed.to_string(),
                    ];
                    row.extend(fmts(theta));
                    row.extend(fmts(&[
                        s.log_mean,
                        log_mean_se(&s),
                        s.log_std,
                        s.log_se,
                        s.log_second_moment,
                        s.hit_proportion,
                        s.seconds,
                    ]));
                    t.rows.push(row);
                }
            }
            tables.push(t);
        }
        RunKind::DecayTable => {
            let mut header = vec!["experiment".to_string()];
            header.extend(cols("theta", d));
            header.extend(["w_bar_origin", "two_gamma"].map(String::from));
            let mut t = Table::new("decay_rates", header);
            for theta in cfg.theta.as_ref().expect("validated") {
                let lower = build_x_scheme(&p.model, &p.dist, theta, &p.phi, &mgf)?.w_bar_origin();
                let upper = 2.0 * g_limit(&p.model, &p.dist, theta, &p.phi, &mgf)?.g;
                let mut row = vec![cfg.experiment.clone()];
                row.extend(fmts(theta));
                row.extend(fmts(&[lower, upper]));
                t.rows.push(row);
            }
            tables.push(t);
        }
        RunKind::Ascent => {
            let sim = cfg.simulation.as_ref().expect("validated");
            let o = cfg.optimizer.as_ref().expect("validated");
            let mut opts = AscentOptions::new(
                sim.scheme.kind(),
                cfg.step_rule(),
                o.delta.unwrap_or(1e-4),
                o.max_iters.unwrap_or(100),
            );
            opts.crn = o.crn;
            if o.rebuild_every.is_some() {
                opts.rebuild_every = o.rebuild_every;
            }
            let mut header: Vec<String> = ["experiment", "seed", "iter"].map(String::from).to_vec();
            header.extend(cols("theta", d));
            header.extend(["g_estimate", "g_estimate_se"].map(String::from));
            header.extend(cols("gradient", d));
            header.extend(["grad_norm", "nc_distance", "hit_proportion", "wall_seconds"].map(String::from));
            let mut t = Table::new("ascent_trace", header);
            let start_theta = o.start.as_ref().expect("validated");
            for &seed in &sim.seeds {
                let trace = ascend_g_n(&p.model, &p.dist, &p.phi, &spec_for(seed), start_theta, &opts)?;
                for it in &trace.iterates {
                    let mut row = vec![cfg.experiment.clone(), seed.to_string(), it.iter.to_string()];
                    row.extend(fmts(&it.theta));
                    row.extend(fmts(&[it.g_estimate, it.g_se]));
                    row.extend(fmts(&it.gradient));
                    row.extend(fmts(&[it.grad_norm, it.nc_distance, it.hit_proportion, it.seconds]));
                    t.rows.push(row);
                }
            }
            tables.push(t);
        }
        RunKind::Limit => {
            let mut opts = LimitOptions { mgf, ..LimitOptions::default() };
            if let Some(o) = &cfg.optimizer {
                if let Some(s) = &o.start {
                    opts.starts.push(s.clone());
                }
                if let Some(r) = o.random_starts {
                    opts.random_starts = r;
                }
                if let Some(m) = o.max_iters {
                    opts.max_iters = m;
                }
                if let Some(tol) = o.delta {
                    opts.tol = tol;
                }
            }
            if let Some(seed) = cfg.simulation.as_ref().and_then(|s| s.seeds.first()) {
                opts.seed = *seed;
            }
            let sol = solve_limit(&p.model, &p.dist, &p.phi, &opts)?;
            let mut header = vec!["experiment".to_string(), "run".to_string()];
            header.extend(cols("start", d));
            header.extend(cols("theta", d));
            header.extend(["g", "best"].map(String::from));
            let mut t = Table::new("limit_runs", header);
            for (i, (s, theta, g)) in sol.runs.iter().enumerate() {
                let mut row = vec![cfg.experiment.clone(), i.to_string()];
                row.extend(fmts(s));
                row.extend(fmts(theta));
                row.push(fmt(*g));
                row.push(u8::from(*theta == sol.theta && *g == sol.g).to_string());
                t.rows.push(row);
            }
            let mut header = vec!["experiment".to_string()];
            header.extend(cols("theta", d));
            header.extend(["g", "projected_gradient", "iterations"].map(String::from));
            let mut best = Table::new("limit", header);
            let mut row = vec![cfg.experiment.clone()];
            row.extend(fmts(&sol.theta));
            row.extend(fmts(&[sol.g, sol.projected_gradient]));
            row.push(sol.iterations.to_string());
            best.rows.push(row);
            tables.push(best);
            tables.push(t);
        }
        RunKind::Buffered => {
            let sim = cfg.simulation.as_ref().expect("validated");
            let b = cfg.buffered.as_ref().expect("validated");
            let mut opts = BufferedOptions::new(b.theta_bar0.clone(), b.lambda0, b.max_iters);
            if let Some(s) = b.step_length {
                opts.step_length = s;
            }
            if let Some(r) = b.rebuild_every {
                opts.rebuild_every = r;
            }
            let mut header: Vec<String> = ["experiment", "seed", "iter", "lambda"].map(String::from).to_vec();
            header.extend(cols("theta", d));
            header.extend(
                ["value", "ordinary_prob", "buffered_value", "subgradient_norm", "best"].map(String::from),
            );
            let mut t = Table::new("buffered_trace", header);
            for &seed in &sim.seeds {
                let r = minimize_buffered(&p.model, &p.dist, &spec_for(seed), &opts)?;
                if r.degenerate {
                    log::warn!("seed {seed}: λ collapsed to 0");
                }
                let mut marked = false;
                for it in &r.trace {
                    let best = !marked && it.value == r.value && it.theta == r.theta;
                    marked |= best;
                    let mut row =
                        vec![cfg.experiment.clone(), seed.to_string(), it.iter.to_string(), fmt(it.lambda)];
                    row.extend(fmts(&it.theta));
                    row.extend(fmts(&[it.value, it.ordinary_prob, it.buffered_value, it.subgradient_norm]));
                    row.push(u8::from(best).to_string());
                    t.rows.push(row);
                }
            }
            tables.push(t);
        }
    }

    let files = tables
        .iter()
        .map(|t| Ok((t.write(out_dir)?, t.rows.len())))
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(RunOutcome { files, seconds: start.elapsed().as_secs_f64() })
}

/// Appends the run to `run_record.csv` in `out_dir`.
pub fn write_record(
    p: &Prepared,
    hash: &str,
    outcome: &RunOutcome,
    jobs: Option<usize>,
    out_dir: &Path,
) -> Result<PathBuf, CliError> {
    let path = out_dir.join("run_record.csv");
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(["experiment", "kind", "config_hash", "version", "jobs", "output", "rows", "wall_seconds"])?;
    }
    for (file, rows) in &outcome.files {
        let name = file.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        w.write_record([
            p.config.experiment.clone(),
            p.config.kind_label().to_string(),
            hash.to_string(),
            env!("CARGO_PKG_VERSION").to_string(),
            jobs.map(|j| j.to_string()).unwrap_or_else(|| "auto".into()),
            name,
            rows.to_string(),
            fmt(outcome.seconds),
        ])?;
    }
    w.flush()?;
    Ok(path)
}
