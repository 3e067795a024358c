//! Monte-Carlo estimators of `E[exp(−n φ(Ȳ_n))]`: plain sampling and dynamic
//! importance sampling with tilts of `X` or of `U = G(X, θ)`, aggregated in
//! the log domain.
//!
//! Replication `r` always draws from `RandomStream::new(seed, r)` and results
//! are collected in replication order, so every summary is bitwise identical
//! for any number of worker threads.

use std::time::Instant;

use rayon::prelude::*;

use crate::distributions::{TiltableDistribution, UTiltSampler, XTiltSampler};
use crate::error::{check_len, Error, Result};
use crate::model::Model;
use crate::numeric::{dot, log_sum_exp};
use crate::objective::SmoothingPhi;
use crate::rng::RandomStream;
use crate::subsolution::{GeneralizedControl, Scheme};

/// Number of worker threads; `0` uses the global rayon pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Parallelism(pub usize);

impl Parallelism {
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> Result<R> {
        if self.0 == 0 {
            return Ok(f());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.0)
            .build()
            .map_err(|e| Error::NumericFailure(format!("cannot start worker pool: {e}")))?;
        Ok(pool.install(f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationSpec {
    /// Summands per replication.
    pub n: usize,
    /// Replications.
    pub replications: usize,
    pub seed: u64,
    pub parallelism: Parallelism,
}

impl SimulationSpec {
    pub fn new(n: usize, replications: usize, seed: u64) -> Self {
        Self {
            n,
            replications,
            seed,
            parallelism: Parallelism::default(),
        }
    }

    pub fn with_parallelism(mut self, p: Parallelism) -> Self {
        self.parallelism = p;
        self
    }

    pub fn with_replications(mut self, replications: usize) -> Self {
        self.replications = replications;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("n must be positive".into()));
        }
        if self.replications < 2 {
            return Err(Error::InvalidParameter("at least two replications are required".into()));
        }
        Ok(())
    }
}

/// Summary of `N` replications in the log domain.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSummary {
    /// `log` of the sample mean.
    pub log_mean: f64,
    /// `log` of the sample standard deviation of the replications.
    pub log_std: f64,
    /// `log` of the standard error of the mean, `log_std − ½ log N`.
    pub log_se: f64,
    /// `log` of the sample second moment.
    pub log_second_moment: f64,
    /// Fraction of replications ending in `A = {y ≥ 0}`.
    pub hit_proportion: f64,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub seconds: f64,
}

impl EstimateSummary {
    pub fn from_log_values(log_values: &[f64], hits: usize, n: usize, seed: u64, seconds: f64) -> Self {
        let count = log_values.len();
        let nf = count as f64;
        let max = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (log_mean, log_std) = if max == f64::NEG_INFINITY {
            (f64::NEG_INFINITY, f64::NEG_INFINITY)
        } else {
            let scaled: Vec<f64> = log_values.iter().map(|v| (v - max).exp()).collect();
            let mean = scaled.iter().sum::<f64>() / nf;
            let ss: f64 = scaled.iter().map(|s| (s - mean) * (s - mean)).sum();
            let var = ss / (nf - 1.0);
            (max + mean.ln(), max + 0.5 * var.ln())
        };
        let doubled: Vec<f64> = log_values.iter().map(|v| 2.0 * v).collect();
        Self {
            log_mean,
            log_std,
            log_se: log_std - 0.5 * nf.ln(),
            log_second_moment: log_sum_exp(&doubled) - nf.ln(),
            hit_proportion: hits as f64 / nf,
            n,
            replications: count,
            seed,
            seconds,
        }
    }

    /// Standard error of `log_mean` by the delta method.
    pub fn log_mean_se(&self) -> f64 {
        (self.log_se - self.log_mean).exp()
    }
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub y_terminal: Vec<f64>,
    /// `log` of the product of likelihood ratios along the path.
    pub log_weight: f64,
    /// `−n φ(Ȳ_n) + log_weight`.
    pub log_value: f64,
}

/// State handed to observers at the end of a path.
pub struct PathState<'a> {
    pub y: &'a [f64],
    pub log_weight: f64,
    /// `(1/n) Σ_j ∂G/∂θ(X̄_j, θ)`, row-major `m × d`, when requested.
    pub jac_mean: Option<&'a [f64]>,
}

enum Kernel {
    Plain(XTiltSampler),
    XTilt {
        control: GeneralizedControl,
        samplers: Vec<XTiltSampler>,
    },
    UTilt {
        control: GeneralizedControl,
        samplers: Vec<UTiltSampler>,
    },
}

/// Simulates paths `Ȳ_{j+1} = Ȳ_j + G(X̄_{j+1}, θ)/n` under a fixed sampling rule.
pub struct PathSimulator<'a> {
    model: &'a Model,
    theta: Vec<f64>,
    kernel: Kernel,
}

struct Workspace {
    y: Vec<f64>,
    x: Vec<f64>,
    g: Vec<f64>,
    log_rho: Vec<f64>,
    terms: Vec<f64>,
    jac: Vec<f64>,
    jac_sum: Vec<f64>,
    /// Inputs `X̄_1, …, X̄_n` of the current path when recording.
    path: Option<Vec<f64>>,
}

impl<'a> PathSimulator<'a> {
    pub fn plain(model: &'a Model, dist: &TiltableDistribution, theta: &[f64]) -> Result<Self> {
        Self::check(model, dist, theta)?;
        Ok(Self {
            model,
            theta: theta.to_vec(),
            kernel: Kernel::Plain(dist.tilt_sampler(&vec![0.0; dist.dim()])?),
        })
    }

    /// Dynamic importance sampling driven by `control` (X or U tilts).
    pub fn with_control(
        model: &'a Model,
        dist: &TiltableDistribution,
        theta: &[f64],
        control: &GeneralizedControl,
    ) -> Result<Self> {
        Self::check(model, dist, theta)?;
        let dims = model.dims();
        check_len("control state dimension", dims.m, control.state_dim())?;
        let kernel = match control.scheme() {
            Scheme::X => {
                check_len("X-tilt dimension", dims.h, control.control_dim())?;
                let samplers = control
                    .members()
                    .iter()
                    .map(|w| dist.tilt_sampler(&w.control))
                    .collect::<Result<_>>()?;
                Kernel::XTilt {
                    control: control.clone(),
                    samplers,
                }
            }
            Scheme::U => {
                check_len("U-tilt dimension", dims.m, control.control_dim())?;
                let samplers = control
                    .members()
                    .iter()
                    .map(|w| UTiltSampler::new(model, dist, theta, &w.control))
                    .collect::<Result<_>>()?;
                Kernel::UTilt {
                    control: control.clone(),
                    samplers,
                }
            }
        };
        Ok(Self {
            model,
            theta: theta.to_vec(),
            kernel,
        })
    }

    fn check(model: &Model, dist: &TiltableDistribution, theta: &[f64]) -> Result<()> {
        check_len("distribution dimension", model.dims().h, dist.dim())?;
        model.check_theta(theta)
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    fn workspace(&self) -> Workspace {
        let dims = self.model.dims();
        let k = match &self.kernel {
            Kernel::Plain(_) => 1,
            Kernel::XTilt { control, .. } | Kernel::UTilt { control, .. } => control.members().len(),
        };
        Workspace {
            y: vec![0.0; dims.m],
            x: vec![0.0; dims.h],
            g: vec![0.0; dims.m],
            log_rho: vec![0.0; k],
            terms: vec![0.0; k],
            jac: vec![0.0; dims.m * dims.d],
            jac_sum: vec![0.0; dims.m * dims.d],
            path: None,
        }
    }

    /// Runs replication `rep`; leaves `Ȳ_n` and the Jacobian sum in `ws` and
    /// returns the log-weight.
    fn run_path(&self, rep: u64, n: usize, seed: u64, want_jac: bool, ws: &mut Workspace) -> Result<f64> {
        let mut stream = RandomStream::new(seed, rep);
        let inv_n = 1.0 / n as f64;
        ws.y.fill(0.0);
        ws.jac_sum.fill(0.0);
        let mut log_weight = 0.0;
        for j in 0..n {
            let t = j as f64 * inv_n;
            match &self.kernel {
                Kernel::Plain(s) => {
                    s.sample(&mut stream, &mut ws.x)?;
                    self.model.eval_g_into(&ws.x, &self.theta, &mut ws.g);
                }
                Kernel::XTilt { control, samplers } => {
                    let idx = pick_member(control, &ws.y, t, &mut stream, &mut ws.log_rho);
                    samplers[idx].sample(&mut stream, &mut ws.x)?;
                    self.model.eval_g_into(&ws.x, &self.theta, &mut ws.g);
                    log_weight -= mixture_log_ratio(
                        control,
                        &ws.log_rho,
                        &mut ws.terms,
                        |k| dot(&control.members()[k].control, &ws.x) - samplers[k].log_mgf(),
                    );
                }
                Kernel::UTilt { control, samplers } => {
                    let idx = pick_member(control, &ws.y, t, &mut stream, &mut ws.log_rho);
                    let (x, u) = samplers[idx].sample(&mut stream)?;
                    ws.x[0] = x;
                    ws.g[0] = u;
                    log_weight -= mixture_log_ratio(
                        control,
                        &ws.log_rho,
                        &mut ws.terms,
                        |k| control.members()[k].control[0] * u - samplers[k].log_mgf(),
                    );
                }
            }
            if let Some(path) = &mut ws.path {
                let h = ws.x.len();
                path[j * h..(j + 1) * h].copy_from_slice(&ws.x);
            }
            for (y, g) in ws.y.iter_mut().zip(&ws.g) {
                *y += g * inv_n;
            }
            if want_jac {
                self.model.jacobian_into(&ws.x, &self.theta, &mut ws.jac);
                for (s, v) in ws.jac_sum.iter_mut().zip(&ws.jac) {
                    *s += v;
                }
            }
        }
        if want_jac {
            for s in &mut ws.jac_sum {
                *s *= inv_n;
            }
        }
        Ok(log_weight)
    }

    /// Simulates `spec.replications` paths and maps each through `observe`,
    /// returning results in replication order.
    pub fn simulate<T, F>(&self, spec: &SimulationSpec, want_jac: bool, observe: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&PathState) -> T + Sync,
    {
        spec.validate()?;
        spec.parallelism.install(|| {
            (0..spec.replications)
                .into_par_iter()
                .map_init(
                    || self.workspace(),
                    |ws, r| {
                        let log_weight = self.run_path(r as u64, spec.n, spec.seed, want_jac, ws)?;
                        Ok(observe(&PathState {
                            y: &ws.y,
                            log_weight,
                            jac_mean: want_jac.then_some(&ws.jac_sum[..]),
                        }))
                    },
                )
                .collect::<Result<Vec<T>>>()
        })?
    }

    /// Simulates paths and returns each input sequence (`n × h`, row-major)
    /// with its log-weight.
    pub fn simulate_paths(&self, spec: &SimulationSpec) -> Result<Vec<(Vec<f64>, f64)>> {
        spec.validate()?;
        let h = self.model.dims().h;
        spec.parallelism.install(|| {
            (0..spec.replications)
                .into_par_iter()
                .map_init(
                    || {
                        let mut ws = self.workspace();
                        ws.path = Some(vec![0.0; spec.n * h]);
                        ws
                    },
                    |ws, r| {
                        let lw = self.run_path(r as u64, spec.n, spec.seed, false, ws)?;
                        Ok((ws.path.clone().unwrap(), lw))
                    },
                )
                .collect::<Result<Vec<_>>>()
        })?
    }

    pub fn replications(&self, phi: &SmoothingPhi, spec: &SimulationSpec) -> Result<Vec<Replication>> {
        let n = spec.n as f64;
        self.simulate(spec, false, |s| Replication {
            y_terminal: s.y.to_vec(),
            log_weight: s.log_weight,
            log_value: -n * phi.phi(s.y) + s.log_weight,
        })
    }

    pub fn estimate(&self, phi: &SmoothingPhi, spec: &SimulationSpec) -> Result<EstimateSummary> {
        let start = Instant::now();
        let n = spec.n as f64;
        let out = self.simulate(spec, false, |s| {
            let hit = s.y.iter().all(|v| *v >= 0.0);
            (-n * phi.phi(s.y) + s.log_weight, hit)
        })?;
        let hits = out.iter().filter(|o| o.1).count();
        let values: Vec<f64> = out.into_iter().map(|o| o.0).collect();
        Ok(EstimateSummary::from_log_values(
            &values,
            hits,
            spec.n,
            spec.seed,
            start.elapsed().as_secs_f64(),
        ))
    }
}

fn pick_member(
    control: &GeneralizedControl,
    y: &[f64],
    t: f64,
    stream: &mut RandomStream,
    log_rho: &mut [f64],
) -> usize {
    if log_rho.len() == 1 {
        log_rho[0] = 0.0;
        return 0;
    }
    control.log_rho_into(y, t, log_rho);
    let u = stream.uniform();
    let mut acc = 0.0;
    for (k, l) in log_rho.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return k;
        }
    }
    log_rho.len() - 1
}

/// `log Σ_k ρ_k exp(ℓ_k)` where `ℓ_k` is the log-likelihood ratio of tilt `k`.
fn mixture_log_ratio(
    control: &GeneralizedControl,
    log_rho: &[f64],
    terms: &mut [f64],
    log_ratio: impl Fn(usize) -> f64,
) -> f64 {
    if control.members().len() == 1 {
        return log_ratio(0);
    }
    for k in 0..terms.len() {
        terms[k] = log_rho[k] + log_ratio(k);
    }
    log_sum_exp(terms)
}

// ---------------------------------------------------------------------------
// Estimator entry points
// ---------------------------------------------------------------------------

pub fn plain_mc(
    model: &Model,
    dist: &TiltableDistribution,
    theta: &[f64],
    phi: &SmoothingPhi,
    spec: &SimulationSpec,
) -> Result<EstimateSummary> {
    PathSimulator::plain(model, dist, theta)?.estimate(phi, spec)
}

pub fn is_on_x(
    model: &Model,
    dist: &TiltableDistribution,
    theta: &[f64],
    phi: &SmoothingPhi,
    control: &GeneralizedControl,
    spec: &SimulationSpec,
) -> Result<EstimateSummary> {
    if control.scheme() != Scheme::X {
        return Err(Error::InvalidParameter("is_on_x needs an X-tilt control".into()));
    }
    PathSimulator::with_control(model, dist, theta, control)?.estimate(phi, spec)
}

pub fn is_on_u(
    model: &Model,
    dist: &TiltableDistribution,
    theta: &[f64],
    phi: &SmoothingPhi,
    control: &GeneralizedControl,
    spec: &SimulationSpec,
) -> Result<EstimateSummary> {
    if control.scheme() != Scheme::U {
        return Err(Error::InvalidParameter("is_on_u needs a U-tilt control".into()));
    }
    PathSimulator::with_control(model, dist, theta, control)?.estimate(phi, spec)
}

/// Second-moment decay rates `−(1/n) log E[(Z^n)²]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayRate {
    /// `(n, −(1/n) log m₂(n))` for each grid point.
    pub per_n: Vec<(usize, f64)>,
    /// Rate at the largest `n`.
    pub at_largest_n: f64,
    /// Negated least-squares slope of `log m₂(n)` against `n`.
    pub slope_rate: f64,
}

pub fn second_moment_rate(summaries: &[EstimateSummary]) -> Result<DecayRate> {
    if summaries.len() < 3 {
        return Err(Error::InvalidParameter(
            "decay-rate fit needs at least three values of n".into(),
        ));
    }
    if let Some(s) = summaries.iter().find(|s| !s.log_second_moment.is_finite()) {
        return Err(Error::Underflow(format!(
            "second moment at n = {} is zero to working precision",
            s.n
        )));
    }
    let mut pts: Vec<(usize, f64)> = summaries.iter().map(|s| (s.n, s.log_second_moment)).collect();
    pts.sort_by_key(|p| p.0);
    let per_n: Vec<(usize, f64)> = pts.iter().map(|(n, m2)| (*n, -m2 / *n as f64)).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0 as f64).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 as f64 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    Ok(DecayRate {
        at_largest_n: per_n.last().unwrap().1,
        slope_rate: -sxy / sxx,
        per_n,
    })
}
