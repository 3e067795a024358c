//! Buffered probability of exceedance: `p̄_c(X) = min_{λ ≥ 0} E[λ(X − c) + 1]⁺`,
//! its importance-sampling estimator for `Ȳ_n`, and the convex reformulation
//! used to minimize it over `θ` for positively homogeneous hinge aggregates.

use crate::distributions::TiltableDistribution;
use crate::error::{check_len, Error, Result};
use crate::estimators::SimulationSpec;
use crate::model::{MgfConfig, Model, ModelFamily};
use crate::numeric::{log_sum_exp, norm, std_normal_log_pdf, std_normal_sf};
use crate::objective::{Estimator, SmoothingPhi};
use crate::rng::iteration_seed;
use crate::subsolution::build_x_scheme;

/// Scalar law handed to [`buffered_prob_1d`].
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarLaw {
    Gaussian { mean: f64, sd: f64 },
    /// Equally weighted sample.
    Empirical(Vec<f64>),
}

/// Inverse Mills ratio `φ(z) / P[Z > z]`.
fn inverse_mills(z: f64) -> f64 {
    if z < 30.0 {
        (std_normal_log_pdf(z) - std_normal_sf(z).ln()).exp()
    } else {
        // Laplace continued fraction, evaluated bottom-up.
        let mut t = z;
        for k in (1..=60).rev() {
            t = z + k as f64 / t;
        }
        t
    }
}

/// Buffered probability `P[X > q]` with `E[X | X > q] = c`; `1` for `c ≤ E[X]`
/// and `0` for `c` at or above the essential supremum.
pub fn buffered_prob_1d(law: &ScalarLaw, c: f64) -> Result<f64> {
    if !c.is_finite() {
        return if c > 0.0 {
            Ok(0.0)
        } else {
            Err(Error::InvalidParameter("threshold must not be −∞ or NaN".into()))
        };
    }
    match law {
        ScalarLaw::Gaussian { mean, sd } => {
            if !(sd.is_finite() && *sd > 0.0 && mean.is_finite()) {
                return Err(Error::InvalidDistribution(format!(
                    "Gaussian law needs finite mean and sd > 0, got ({mean}, {sd})"
                )));
            }
            let z = (c - mean) / sd;
            if z <= 0.0 {
                return Ok(1.0);
            }
            // Solve φ(q)/P[Z > q] = z; the Mills ratio increases from 0 to ∞ and
            // exceeds q, so the root lies in (−40, z).
            let (mut lo, mut hi) = (-40.0, z);
            if inverse_mills(lo) >= z {
                return Ok(1.0);
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if inverse_mills(mid) < z {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-15 * (1.0 + hi.abs()) {
                    break;
                }
            }
            Ok(std_normal_sf(0.5 * (lo + hi)))
        }
        ScalarLaw::Empirical(xs) => {
            if xs.is_empty() || xs.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDistribution("empirical law needs finite samples".into()));
            }
            Ok(empirical_min_lambda(xs, c))
        }
    }
}

/// Exact `min_{λ ≥ 0} (1/N) Σ [λ(x_i − c) + 1]⁺`: the objective is convex and
/// piecewise linear with breakpoints `λ = 1/(c − x_i)`.
fn empirical_min_lambda(xs: &[f64], c: f64) -> f64 {
    let nf = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    if c <= mean {
        return 1.0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    if c >= *sorted.last().unwrap() {
        return 0.0;
    }
    // Suffix counts and sums of (x − c) over x_i > x_k.
    let mut best = 1.0f64;
    let mut count = 0.0;
    let mut excess = 0.0;
    for k in (0..sorted.len()).rev() {
        let x = sorted[k];
        if x < c {
            let lambda = 1.0 / (c - x);
            // Terms with x_i > x contribute λ(x_i − c) + 1; ties contribute 0.
            best = best.min((lambda * excess + count) / nf);
        }
        count += 1.0;
        excess += x - c;
    }
    best.max(0.0)
}

// ---------------------------------------------------------------------------
// Estimation of min_λ E[λ(Ȳ_n − c) + 1]⁺
// ---------------------------------------------------------------------------

/// One grid point of the λ search.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub log_value: f64,
    pub log_second_moment: f64,
    /// Every payload was zero; the point is excluded from the minimum.
    pub underflow: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferedEstimate {
    pub lambda_star: f64,
    pub value: f64,
    pub log_value: f64,
    /// Standard error of `value`.
    pub se: f64,
    /// Companion estimate of `P[Ȳ_n > c]` from the same replications.
    pub ordinary_prob: f64,
    pub log_ordinary_prob: f64,
    pub ordinary_se: f64,
    pub grid: Vec<LambdaPoint>,
}

/// `{0} ∪ {2^j : j = −6, …, 12}`.
pub fn default_lambda_grid() -> Vec<f64> {
    std::iter::once(0.0)
        .chain((-6..=12).map(|j| 2f64.powi(j)))
        .collect()
}

/// Terminal values and log-weights of simulated replications.
#[derive(Debug, Clone)]
pub struct TerminalSample {
    pub y: Vec<f64>,
    pub log_w: Vec<f64>,
}

impl TerminalSample {
    pub fn simulate(
        model: &Model,
        dist: &TiltableDistribution,
        theta: &[f64],
        estimator: &Estimator,
        spec: &SimulationSpec,
    ) -> Result<Self> {
        if model.dims().m != 1 {
            return Err(Error::UnsupportedDimension(
                "buffered probabilities need a scalar G".into(),
            ));
        }
        let out = estimator
            .simulator(model, dist, theta)?
            .simulate(spec, false, |s| (s.y[0], s.log_weight))?;
        Ok(Self {
            y: out.iter().map(|o| o.0).collect(),
            log_w: out.iter().map(|o| o.1).collect(),
        })
    }

    fn log_terms(&self, lambda: f64, c: f64) -> Vec<f64> {
        self.y
            .iter()
            .zip(&self.log_w)
            .map(|(y, lw)| {
                let s = lambda * (y - c) + 1.0;
                if s > 0.0 {
                    s.ln() + lw
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }

    /// `log` of the IS estimate of `E[λ(Ȳ_n − c) + 1]⁺`.
    pub fn log_objective(&self, lambda: f64, c: f64) -> f64 {
        log_sum_exp(&self.log_terms(lambda, c)) - (self.y.len() as f64).ln()
    }

    fn point(&self, lambda: f64, c: f64) -> LambdaPoint {
        let nf = (self.y.len() as f64).ln();
        let terms = self.log_terms(lambda, c);
        let log_value = log_sum_exp(&terms) - nf;
        let doubled: Vec<f64> = terms.iter().map(|t| 2.0 * t).collect();
        LambdaPoint {
            lambda,
            log_value,
            log_second_moment: log_sum_exp(&doubled) - nf,
            underflow: log_value == f64::NEG_INFINITY,
        }
    }

    fn standard_error(&self, log_terms: &[f64], log_mean: f64) -> f64 {
        if log_mean == f64::NEG_INFINITY {
            return 0.0;
        }
        let nf = log_terms.len() as f64;
        let mean = 1.0;
        let ss: f64 = log_terms
            .iter()
            .map(|t| ((t - log_mean).exp() - mean).powi(2))
            .sum();
        log_mean.exp() * (ss / (nf - 1.0) / nf).sqrt()
    }

    /// Grid search over `lambdas` followed by golden-section refinement on the
    /// bracket around the best grid point.
    pub fn minimize_lambda(&self, c: f64, lambdas: &[f64]) -> Result<BufferedEstimate> {
        if lambdas.is_empty() || lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidParameter("λ grid must be non-empty, finite and ≥ 0".into()));
        }
        let mut grid_l = lambdas.to_vec();
        grid_l.sort_by(f64::total_cmp);
        grid_l.dedup();
        let grid: Vec<LambdaPoint> = grid_l
            .iter()
            .map(|&l| {
                if l == 0.0 {
                    // E[1]⁺ = 1 is known exactly.
                    LambdaPoint {
                        lambda: 0.0,
                        log_value: 0.0,
                        log_second_moment: self.point(0.0, c).log_second_moment,
                        underflow: false,
                    }
                } else {
                    self.point(l, c)
                }
            })
            .collect();
        let (best_idx, _) = grid
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.underflow)
            .min_by(|a, b| a.1.log_value.total_cmp(&b.1.log_value))
            .ok_or_else(|| Error::Underflow("every λ on the grid underflowed".into()))?;
        let mut lambda_star = grid[best_idx].lambda;
        let mut log_value = grid[best_idx].log_value;
        if best_idx > 0 {
            let lo = grid[best_idx - 1].lambda;
            let hi = grid.get(best_idx + 1).map_or(grid[best_idx].lambda, |p| p.lambda);
            let (l, v) = golden_section(|l| self.log_objective(l, c), lo, hi);
            if v < log_value {
                lambda_star = l;
                log_value = v;
            }
        }
        let value = log_value.exp();
        let se = if lambda_star == 0.0 {
            0.0
        } else {
            self.standard_error(&self.log_terms(lambda_star, c), log_value)
        };
        let ind: Vec<f64> = self
            .y
            .iter()
            .zip(&self.log_w)
            .map(|(y, lw)| if *y > c { *lw } else { f64::NEG_INFINITY })
            .collect();
        let log_ordinary_prob = log_sum_exp(&ind) - (self.y.len() as f64).ln();
        Ok(BufferedEstimate {
            lambda_star,
            value,
            log_value,
            se,
            ordinary_prob: log_ordinary_prob.exp(),
            log_ordinary_prob,
            ordinary_se: self.standard_error(&ind, log_ordinary_prob),
            grid,
        })
    }
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..120 {
        if (b - a) <= 1e-12 * (1.0 + b.abs()) {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// IS estimate of `min_λ E[λ(Ȳ_n − c) + 1]⁺` with `λ` over `lambdas`
/// (default [`default_lambda_grid`]) and golden-section refinement.
pub fn estimate_min_lambda(
    model: &Model,
    dist: &TiltableDistribution,
    theta: &[f64],
    c: f64,
    estimator: &Estimator,
    spec: &SimulationSpec,
    lambdas: Option<&[f64]>,
) -> Result<BufferedEstimate> {
    let sample = TerminalSample::simulate(model, dist, theta, estimator, spec)?;
    let grid = lambdas.map_or_else(default_lambda_grid, <[f64]>::to_vec);
    sample.minimize_lambda(c, &grid)
}

// ---------------------------------------------------------------------------
// Convex reformulation in (θ̄, λ)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
struct HingeParams {
    f: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

fn hinge_params(model: &Model) -> Result<HingeParams> {
    match model.family() {
        ModelFamily::HingeAggregate { f, b, c } => Ok(HingeParams {
            f: f.clone(),
            b: b.clone(),
            c: c.clone(),
        }),
        _ => Err(Error::InvalidModel(
            "buffered minimization needs the hinge-aggregate family".into(),
        )),
    }
}

/// Sample-average objective `(1/N) Σ_r w_r [ (1/n) Σ_i fᵀ(λx_{ri} − θ̄)⁺ − bᵀ(λc − θ̄) + 1 ]⁺`
/// on a fixed set of stored paths.
#[derive(Debug, Clone)]
pub struct BufferedSaa {
    params: HingeParams,
    n: usize,
    h: usize,
    /// Paths, `replications × n × h`.
    x: Vec<f64>,
    log_w: Vec<f64>,
}

impl BufferedSaa {
    /// Draws `spec.replications` paths from the sampling rule of `estimator` at `theta`.
    pub fn sample(
        model: &Model,
        dist: &TiltableDistribution,
        theta: &[f64],
        estimator: &Estimator,
        spec: &SimulationSpec,
    ) -> Result<Self> {
        let params = hinge_params(model)?;
        let h = model.dims().h;
        let n = spec.n;
        // Paths are recovered by replaying each replication and recording X̄_j.
        let sim = estimator.simulator(model, dist, theta)?;
        let recorded = sim.simulate_paths(spec)?;
        let mut x = Vec::with_capacity(spec.replications * n * h);
        let mut log_w = Vec::with_capacity(spec.replications);
        for (path, lw) in recorded {
            x.extend_from_slice(&path);
            log_w.push(lw);
        }
        Ok(Self {
            params,
            n,
            h,
            x,
            log_w,
        })
    }

    pub fn replications(&self) -> usize {
        self.log_w.len()
    }

    /// `S_r = (1/n) Σ_i fᵀ(λx_{ri} − θ̄)⁺ − bᵀ(λc − θ̄) + 1`.
    fn slack(&self, r: usize, theta_bar: &[f64], lambda: f64) -> f64 {
        let HingeParams { f, b, c } = &self.params;
        let mut acc = 0.0;
        for i in 0..self.n {
            let xi = &self.x[(r * self.n + i) * self.h..(r * self.n + i + 1) * self.h];
            for k in 0..self.h {
                acc += f[k] * (lambda * xi[k] - theta_bar[k]).max(0.0);
            }
        }
        let lin: f64 = (0..self.h).map(|k| b[k] * (lambda * c[k] - theta_bar[k])).sum();
        acc / self.n as f64 - lin + 1.0
    }

    pub fn value(&self, theta_bar: &[f64], lambda: f64) -> f64 {
        let max_w = self.log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = (0..self.replications())
            .map(|r| self.slack(r, theta_bar, lambda).max(0.0) * (self.log_w[r] - max_w).exp())
            .sum();
        total / self.replications() as f64 * max_w.exp()
    }
}

/// Step rule and budget for [`minimize_buffered`].
#[derive(Debug, Clone, PartialEq)]
pub struct BufferedOptions {
    pub theta_bar0: Vec<f64>,
    pub lambda0: f64,
    /// Fixed step length `‖(θ̄, λ)^{l+1} − (θ̄, λ)^l‖`.
    pub step_length: f64,
    pub max_iters: usize,
    /// Rebuild the X-tilt control every this many iterations.
    pub rebuild_every: usize,
    pub mgf: MgfConfig,
}

impl BufferedOptions {
    pub fn new(theta_bar0: Vec<f64>, lambda0: f64, max_iters: usize) -> Self {
        let rebuild_every = if theta_bar0.len() <= 2 { 1 } else { 5 };
        Self {
            theta_bar0,
            lambda0,
            step_length: 0.1,
            max_iters,
            rebuild_every,
            mgf: MgfConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferedIterate {
    pub iter: usize,
    pub lambda: f64,
    pub theta: Vec<f64>,
    /// `E[λ^l Ȳ_n(θ^l) + 1]⁺` at the iterate.
    pub value: f64,
    /// `P[Ȳ_n(θ^l) > 0]` from the same replications.
    pub ordinary_prob: f64,
    /// Buffered probability at `θ^l` after re-minimizing over `λ`.
    pub buffered_value: f64,
    pub subgradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferedResult {
    pub theta: Vec<f64>,
    pub lambda: f64,
    pub value: f64,
    pub trace: Vec<BufferedIterate>,
    /// `λ` collapsed to 0 and the run stopped in the `value = 1` regime.
    pub degenerate: bool,
}

/// Projected fixed-length subgradient descent on the convex reformulation
/// `min_{λ ≥ 0, θ̄ ∈ λΘ} E[λ Ȳ_n(θ̄/λ) + 1]⁺` with the X-tilt control built
/// for the indicator target at the current `θ = θ̄/λ`.
pub fn minimize_buffered(
    model: &Model,
    dist: &TiltableDistribution,
    spec: &SimulationSpec,
    opts: &BufferedOptions,
) -> Result<BufferedResult> {
    hinge_params(model)?;
    let d = model.dims().d;
    check_len("theta_bar0", d, opts.theta_bar0.len())?;
    if !(opts.lambda0 > 0.0) || !(opts.step_length > 0.0) {
        return Err(Error::InvalidParameter("λ⁰ and the step length must be positive".into()));
    }
    let bx = model.theta_box();
    let mut lambda = opts.lambda0;
    let mut theta_bar = opts.theta_bar0.clone();
    clamp_scaled(&mut theta_bar, lambda, &bx.lo, &bx.hi);
    let indicator = SmoothingPhi::indicator();
    let mut estimator = None;
    let mut trace = Vec::new();
    let mut degenerate = false;
    for iter in 0..opts.max_iters {
        if lambda <= 0.0 {
            degenerate = true;
            break;
        }
        let theta: Vec<f64> = theta_bar.iter().map(|t| t / lambda).collect();
        let theta = bx.project(&theta);
        if estimator.is_none() || iter % opts.rebuild_every.max(1) == 0 {
            estimator = Some(Estimator::IsX(build_x_scheme(
                model, dist, &theta, &indicator, &opts.mgf,
            )?));
        }
        let it_spec = spec.with_seed(iteration_seed(spec.seed, iter as u64));
        let sim = estimator.as_ref().unwrap().simulator(model, dist, &theta)?;
        let out = sim.simulate(&it_spec, true, |s| {
            (s.y[0], s.log_weight, s.jac_mean.unwrap().to_vec())
        })?;
        let max_w = out.iter().map(|o| o.1).fold(f64::NEG_INFINITY, f64::max);
        let nf = out.len() as f64;
        let mut value = 0.0;
        let mut grad = vec![0.0; d + 1];
        for (y, lw, jac) in &out {
            let s = lambda * y + 1.0;
            if s <= 0.0 {
                continue;
            }
            let w = (lw - max_w).exp();
            value += w * s;
            let mut dl = *y;
            for k in 0..d {
                grad[k] += w * jac[k];
                dl -= theta[k] * jac[k];
            }
            grad[d] += w * dl;
        }
        let scale = max_w.exp() / nf;
        value *= scale;
        for g in &mut grad {
            *g *= scale;
        }
        let sample = TerminalSample {
            y: out.iter().map(|o| o.0).collect(),
            log_w: out.iter().map(|o| o.1).collect(),
        };
        let reminimized = sample.minimize_lambda(0.0, &default_lambda_grid())?;
        let gnorm = norm(&grad);
        trace.push(BufferedIterate {
            iter,
            lambda,
            theta: theta.clone(),
            value,
            ordinary_prob: reminimized.ordinary_prob,
            buffered_value: reminimized.value,
            subgradient_norm: gnorm,
        });
        log::debug!("buffered iter {iter}: λ = {lambda:.4}, value = {value:.4e}");
        if gnorm == 0.0 {
            break;
        }
        let step = opts.step_length / gnorm;
        for k in 0..d {
            theta_bar[k] -= step * grad[k];
        }
        lambda = (lambda - step * grad[d]).max(0.0);
        clamp_scaled(&mut theta_bar, lambda, &bx.lo, &bx.hi);
    }
    let best = trace
        .iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .ok_or_else(|| Error::InvalidParameter("buffered minimization ran no iterations".into()))?;
    Ok(BufferedResult {
        theta: best.theta.clone(),
        lambda: best.lambda,
        value: best.value,
        degenerate: degenerate || best.lambda <= 0.0,
        trace,
    })
}

fn clamp_scaled(theta_bar: &mut [f64], lambda: f64, lo: &[f64], hi: &[f64]) {
    for k in 0..theta_bar.len() {
        theta_bar[k] = theta_bar[k].clamp(lambda * lo[k], lambda * hi[k]);
    }
}
