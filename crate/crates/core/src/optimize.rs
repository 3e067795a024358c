//! Projected stochastic gradient ascent on `g^n` and the deterministic
//! multistart solver for the limiting problem `max_θ g(θ)`.

use std::time::Instant;

use rayon::prelude::*;

use crate::distributions::TiltableDistribution;
use crate::error::{check_len, Error, Result};
use crate::estimators::SimulationSpec;
use crate::model::{MgfConfig, Model, ThetaBox};
use crate::numeric::{dot, norm};
use crate::objective::{g_limit, g_limit_with_gradient, grad_g_n, Estimator, EstimatorKind, SmoothingPhi};
use crate::rng::{iteration_seed, RandomStream};

pub fn project_box(theta: &[f64], bx: &ThetaBox) -> Vec<f64> {
    bx.project(theta)
}

/// Distance from the ascent direction `grad` to the normal cone of the box at
/// `theta`; zero exactly at first-order stationary points for maximization.
pub fn normal_cone_distance(grad: &[f64], theta: &[f64], bx: &ThetaBox) -> f64 {
    let mut s = 0.0;
    for i in 0..grad.len() {
        let (lo, hi, g) = (bx.lo[i], bx.hi[i], grad[i]);
        let r = if lo == hi {
            0.0
        } else if theta[i] <= lo {
            g.max(0.0)
        } else if theta[i] >= hi {
            (-g).max(0.0)
        } else {
            g.abs()
        };
        s += r * r;
    }
    s.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// `o_l = s₀ / √(l + 1)`.
    Diminishing { s0: f64 },
    /// `o_l = len / ‖∇̂‖`.
    FixedLength { len: f64 },
}

impl StepRule {
    fn step(&self, l: usize, grad_norm: f64) -> f64 {
        match *self {
            StepRule::Diminishing { s0 } => s0 / ((l + 1) as f64).sqrt(),
            StepRule::FixedLength { len } => {
                if grad_norm > 0.0 {
                    len / grad_norm
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentOptions {
    pub estimator: EstimatorKind,
    pub step: StepRule,
    /// Stop once the normal-cone distance falls to `delta`.
    pub delta: f64,
    pub max_iters: usize,
    /// Rebuild the control every this many iterations (default 1 for
    /// `d ≤ 2`, else 5).
    pub rebuild_every: Option<usize>,
    /// Reuse the base seed at every iterate (common random numbers).
    pub crn: bool,
    pub mgf: MgfConfig,
}

impl AscentOptions {
    pub fn new(estimator: EstimatorKind, step: StepRule, delta: f64, max_iters: usize) -> Self {
        Self {
            estimator,
            step,
            delta,
            max_iters,
            rebuild_every: None,
            crn: false,
            mgf: MgfConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentIterate {
    pub iter: usize,
    pub theta: Vec<f64>,
    pub g_estimate: f64,
    /// Standard error of `g_estimate` by the delta method.
    pub g_se: f64,
    pub gradient: Vec<f64>,
    pub gradient_se: Vec<f64>,
    pub grad_norm: f64,
    pub nc_distance: f64,
    pub hit_proportion: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentTrace {
    pub iterates: Vec<AscentIterate>,
    /// The stopping rule fired before `max_iters`.
    pub converged: bool,
}

impl AscentTrace {
    pub fn last(&self) -> &AscentIterate {
        self.iterates.last().expect("non-empty trace")
    }
}

/// `θ^{l+1} = Π_Θ(θ^l + o_l ∇̂g^n(θ^l))` with a fresh seed `base ⊕ l` per
/// iterate unless `crn` is set.
pub fn ascend_g_n(
    model: &Model,
    dist: &TiltableDistribution,
    phi: &SmoothingPhi,
    spec: &SimulationSpec,
    theta0: &[f64],
    opts: &AscentOptions,
) -> Result<AscentTrace> {
    model.check_theta(theta0)?;
    if opts.max_iters == 0 {
        return Err(Error::InvalidParameter("max_iters must be positive".into()));
    }
    let bx = model.theta_box();
    let d = model.dims().d;
    let rebuild = opts.rebuild_every.unwrap_or(if d <= 2 { 1 } else { 5 }).max(1);
    let mut theta = theta0.to_vec();
    let mut estimator: Option<Estimator> = None;
    let mut iterates = Vec::new();
    for l in 0..opts.max_iters {
        let start = Instant::now();
        let at = |e: Error, theta: &[f64]| Error::AtIterate {
            iteration: l,
            theta: theta.to_vec(),
            source: Box::new(e),
        };
        if estimator.is_none() || l % rebuild == 0 {
            estimator = Some(
                Estimator::build(opts.estimator, model, dist, &theta, phi, &opts.mgf)
                    .map_err(|e| at(e, &theta))?,
            );
        }
        let seed = if opts.crn {
            spec.seed
        } else {
            iteration_seed(spec.seed, l as u64)
        };
        let est = grad_g_n(
            model,
            dist,
            &theta,
            phi,
            estimator.as_ref().unwrap(),
            &spec.with_seed(seed),
        )
        .map_err(|e| at(e, &theta))?;
        let grad_norm = norm(&est.gradient);
        let nc = normal_cone_distance(&est.gradient, &theta, bx);
        iterates.push(AscentIterate {
            iter: l,
            theta: theta.clone(),
            g_estimate: est.g,
            g_se: (est.summary.log_se - est.summary.log_mean).exp() / spec.n as f64,
            gradient: est.gradient.clone(),
            gradient_se: est.se.clone(),
            grad_norm,
            nc_distance: nc,
            hit_proportion: est.summary.hit_proportion,
            seconds: start.elapsed().as_secs_f64(),
        });
        log::debug!("ascent iter {l}: θ = {theta:?}, g = {:.5}, nc = {nc:.3e}", est.g);
        if nc <= opts.delta {
            return Ok(AscentTrace {
                iterates,
                converged: true,
            });
        }
        let o = opts.step.step(l, grad_norm);
        let next: Vec<f64> = (0..d).map(|k| theta[k] + o * est.gradient[k]).collect();
        theta = bx.project(&next);
    }
    Ok(AscentTrace {
        iterates,
        converged: false,
    })
}

// ---------------------------------------------------------------------------
// Limiting problem
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitGradient {
    /// Differentiation through the saddle point.
    Danskin,
    /// Central differences of `g` with step `1e-5`, one-sided at the bounds.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitOptions {
    /// Explicit starting points; the box centre and `random_starts` uniform
    /// points are added.
    pub starts: Vec<Vec<f64>>,
    pub random_starts: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Projected-gradient tolerance.
    pub tol: f64,
    pub gradient: LimitGradient,
    pub mgf: MgfConfig,
}

impl Default for LimitOptions {
    fn default() -> Self {
        Self {
            starts: Vec::new(),
            random_starts: 4,
            seed: 0x11_317,
            max_iters: 200,
            tol: 1e-6,
            gradient: LimitGradient::Danskin,
            mgf: MgfConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitSolution {
    pub theta: Vec<f64>,
    pub g: f64,
    /// `‖θ − Π_Θ(θ + ∇g(θ))‖` at the returned point.
    pub projected_gradient: f64,
    pub iterations: usize,
    /// `(start, θ, g)` for every start that finished.
    pub runs: Vec<(Vec<f64>, Vec<f64>, f64)>,
}

struct LimitProblem<'a> {
    model: &'a Model,
    dist: &'a TiltableDistribution,
    phi: &'a SmoothingPhi,
    opts: &'a LimitOptions,
}

impl LimitProblem<'_> {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(g_limit(self.model, self.dist, theta, self.phi, &self.opts.mgf)?.g)
    }

    fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self.opts.gradient {
            LimitGradient::Danskin => {
                let (v, g) =
                    g_limit_with_gradient(self.model, self.dist, theta, self.phi, &self.opts.mgf)?;
                Ok((v.g, g))
            }
            LimitGradient::FiniteDifference => {
                let bx = self.model.theta_box();
                let v = self.value(theta)?;
                let h = 1e-5;
                let mut grad = vec![0.0; theta.len()];
                for k in 0..theta.len() {
                    let mut up = theta.to_vec();
                    let mut dn = theta.to_vec();
                    up[k] = (theta[k] + h).min(bx.hi[k]);
                    dn[k] = (theta[k] - h).max(bx.lo[k]);
                    if up[k] > dn[k] {
                        let fu = if up[k] == theta[k] { v } else { self.value(&up)? };
                        let fd = if dn[k] == theta[k] { v } else { self.value(&dn)? };
                        grad[k] = (fu - fd) / (up[k] - dn[k]);
                    }
                }
                Ok((v, grad))
            }
        }
    }

    /// Projected gradient ascent with Barzilai–Borwein steps and Armijo
    /// backtracking along the projection arc.
    fn ascend(&self, start: &[f64]) -> Result<(Vec<f64>, f64, f64, usize)> {
        let bx = self.model.theta_box();
        let mut x = bx.project(start);
        let (mut fx, mut gx) = self.value_and_gradient(&x)?;
        let mut step = 1.0;
        let mut pg = projected_gradient_norm(&x, &gx, bx);
        for it in 0..self.opts.max_iters {
            if pg <= self.opts.tol {
                return Ok((x, fx, pg, it));
            }
            let mut t = step;
            let mut accepted = None;
            for _ in 0..50 {
                let trial = bx.project(&add_scaled(&x, t, &gx));
                let dx: Vec<f64> = (0..x.len()).map(|i| trial[i] - x[i]).collect();
                if norm(&dx) == 0.0 {
                    break;
                }
                let ft = self.value(&trial)?;
                if ft >= fx + 1e-4 * dot(&gx, &dx) {
                    accepted = Some(trial);
                    break;
                }
                t *= 0.5;
            }
            let Some(next) = accepted else {
                return Ok((x, fx, pg, it));
            };
            let (fn_, gn) = self.value_and_gradient(&next)?;
            let s: Vec<f64> = (0..x.len()).map(|i| next[i] - x[i]).collect();
            let y: Vec<f64> = (0..x.len()).map(|i| gx[i] - gn[i]).collect();
            let sy = dot(&s, &y);
            step = if sy > 0.0 { (dot(&s, &s) / sy).clamp(1e-4, 1e4) } else { 1.0 };
            x = next;
            fx = fn_;
            gx = gn;
            pg = projected_gradient_norm(&x, &gx, bx);
        }
        Ok((x, fx, pg, self.opts.max_iters))
    }
}

fn add_scaled(x: &[f64], t: f64, g: &[f64]) -> Vec<f64> {
    x.iter().zip(g).map(|(a, b)| a + t * b).collect()
}

fn projected_gradient_norm(x: &[f64], g: &[f64], bx: &ThetaBox) -> f64 {
    let p = bx.project(&add_scaled(x, 1.0, g));
    norm(&(0..x.len()).map(|i| p[i] - x[i]).collect::<Vec<_>>())
}

/// Multistart maximization of the limiting objective `g(θ)` over the box.
pub fn solve_limit(
    model: &Model,
    dist: &TiltableDistribution,
    phi: &SmoothingPhi,
    opts: &LimitOptions,
) -> Result<LimitSolution> {
    let bx = model.theta_box();
    let d = bx.dim();
    let mut starts = opts.starts.clone();
    for s in &starts {
        check_len("limit start", d, s.len())?;
    }
    starts.push(bx.center());
    let mut stream = RandomStream::new(opts.seed, 0);
    for _ in 0..opts.random_starts {
        starts.push(
            (0..d)
                .map(|i| bx.lo[i] + stream.uniform() * (bx.hi[i] - bx.lo[i]))
                .collect(),
        );
    }
    let problem = LimitProblem {
        model,
        dist,
        phi,
        opts,
    };
    let results: Vec<Result<(Vec<f64>, f64, f64, usize)>> =
        starts.par_iter().map(|s| problem.ascend(s)).collect();
    let mut runs = Vec::new();
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    let mut iterations = 0;
    let mut last_err = None;
    for (s, r) in starts.iter().zip(results) {
        match r {
            Ok((x, f, pg, it)) => {
                iterations += it;
                if best.as_ref().is_none_or(|b| f > b.1) {
                    best = Some((x.clone(), f, pg));
                }
                runs.push((s.clone(), x, f));
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some((theta, g, pg)) => Ok(LimitSolution {
            theta,
            g,
            projected_gradient: pg,
            iterations,
            runs,
        }),
        None => Err(last_err.unwrap_or_else(|| Error::NumericFailure("no start succeeded".into()))),
    }
}
