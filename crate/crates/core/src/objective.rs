//! The smoothing functional `φ`, the objective `g^n(θ) = −(1/n) log E[e^{−nφ(Ȳ_n)}]`
//! with its gradient estimator, and the limiting objective `g(θ)`.

use crate::convex::{solve_saddle, SaddlePoint};
use crate::distributions::TiltableDistribution;
use crate::error::{check_len, Error, Result};
use crate::estimators::{EstimateSummary, PathSimulator, SimulationSpec};
use crate::model::{MgfConfig, Model, PushForwardLaw};
use crate::subsolution::{build_u_scheme, build_x_scheme, GeneralizedControl, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiMode {
    /// `φ(y) = Λ min(‖min(y, 0)‖², ε²)`.
    Smooth,
    /// `φ = ∞·1_{A^c}`, so `e^{−nφ}` is the indicator of `A = {y ≥ 0}`.
    Indicator,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingPhi {
    pub lambda: f64,
    pub eps: f64,
    pub mode: PhiMode,
}

impl SmoothingPhi {
    pub fn new(lambda: f64, eps: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite() && eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "smoothing needs finite Λ > 0 and ε > 0, got Λ = {lambda}, ε = {eps}"
            )));
        }
        Ok(Self {
            lambda,
            eps,
            mode: PhiMode::Smooth,
        })
    }

    pub fn indicator() -> Self {
        Self {
            lambda: f64::INFINITY,
            eps: 0.0,
            mode: PhiMode::Indicator,
        }
    }

    /// The constant branch `φ₁ ≡ Λε²` (infinite in indicator mode).
    pub fn cap(&self) -> f64 {
        match self.mode {
            PhiMode::Smooth => self.lambda * self.eps * self.eps,
            PhiMode::Indicator => f64::INFINITY,
        }
    }

    /// Weight `Λ` of the quadratic branch `φ₂`.
    pub fn quadratic_weight(&self) -> f64 {
        match self.mode {
            PhiMode::Smooth => self.lambda,
            PhiMode::Indicator => f64::INFINITY,
        }
    }

    pub fn phi1(&self) -> f64 {
        self.cap()
    }

    pub fn phi2(&self, y: &[f64]) -> f64 {
        crate::convex::phi2(self.quadratic_weight(), y)
    }

    pub fn phi(&self, y: &[f64]) -> f64 {
        let s = shortfall_sq(y);
        match self.mode {
            PhiMode::Smooth => self.lambda * s.min(self.eps * self.eps),
            PhiMode::Indicator => {
                if s > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
        }
    }

    /// `2Λ min(y, 0)` below the cap, zero on the flat branch and at the kink.
    pub fn grad_phi_into(&self, y: &[f64], out: &mut [f64]) {
        let active = self.mode == PhiMode::Smooth && shortfall_sq(y) < self.eps * self.eps;
        for (o, v) in out.iter_mut().zip(y) {
            *o = if active { 2.0 * self.lambda * v.min(0.0) } else { 0.0 };
        }
    }

    pub fn grad_phi(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        self.grad_phi_into(y, &mut out);
        out
    }
}

fn shortfall_sq(y: &[f64]) -> f64 {
    y.iter().map(|v| v.min(0.0).powi(2)).sum()
}

// ---------------------------------------------------------------------------
// g^n and its gradient
// ---------------------------------------------------------------------------

/// Sampling rule used to estimate `E[e^{−nφ(Ȳ_n)}]`.
#[derive(Debug, Clone)]
pub enum Estimator {
    Plain,
    IsX(GeneralizedControl),
    IsU(GeneralizedControl),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Plain,
    IsX,
    IsU,
}

impl Estimator {
    /// Builds the estimator of the given kind with its control at `θ`.
    pub fn build(
        kind: EstimatorKind,
        model: &Model,
        dist: &TiltableDistribution,
        theta: &[f64],
        phi: &SmoothingPhi,
        cfg: &MgfConfig,
    ) -> Result<Self> {
        Ok(match kind {
            EstimatorKind::Plain => Estimator::Plain,
            EstimatorKind::IsX => Estimator::IsX(build_x_scheme(model, dist, theta, phi, cfg)?),
            EstimatorKind::IsU => Estimator::IsU(build_u_scheme(model, dist, theta, phi, cfg)?),
        })
    }

    pub fn kind(&self) -> EstimatorKind {
        match self {
            Estimator::Plain => EstimatorKind::Plain,
            Estimator::IsX(_) => EstimatorKind::IsX,
            Estimator::IsU(_) => EstimatorKind::IsU,
        }
    }

    pub fn control(&self) -> Option<&GeneralizedControl> {
        match self {
            Estimator::Plain => None,
            Estimator::IsX(c) | Estimator::IsU(c) => Some(c),
        }
    }

    pub fn simulator<'a>(
        &self,
        model: &'a Model,
        dist: &TiltableDistribution,
        theta: &[f64],
    ) -> Result<PathSimulator<'a>> {
        match self {
            Estimator::Plain => PathSimulator::plain(model, dist, theta),
            Estimator::IsX(c) | Estimator::IsU(c) => {
                let want = if matches!(self, Estimator::IsX(_)) {
                    Scheme::X
                } else {
                    Scheme::U
                };
                if c.scheme() != want {
                    return Err(Error::InvalidParameter(
                        "control scheme does not match the estimator".into(),
                    ));
                }
                PathSimulator::with_control(model, dist, theta, c)
            }
        }
    }
}

pub fn estimate(
    model: &Model,
    dist: &TiltableDistribution,
    theta: &[f64],
    phi: &SmoothingPhi,
    estimator: &Estimator,
    spec: &SimulationSpec,
) -> Result<EstimateSummary> {
    estimator.simulator(model, dist, theta)?.estimate(phi, spec)
}

/// `g^n(θ) = −(1/n) log p̂`.
pub fn g_n(
    model: &Model,
    dist: &TiltableDistribution,
    theta: &[f64],
    phi: &SmoothingPhi,
    estimator: &Estimator,
    spec: &SimulationSpec,
) -> Result<f64> {
    let s = estimate(model, dist, theta, phi, estimator, spec)?;
    Ok(-s.log_mean / spec.n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    /// Estimate of `∇g^n(θ)`.
    pub gradient: Vec<f64>,
    /// Per-coordinate standard errors (delta method for the ratio).
    pub se: Vec<f64>,
    /// `g^n(θ)` from the same replications.
    pub g: f64,
    pub summary: EstimateSummary,
}

/// Ratio estimator `∇g^n = E[e^{−nφ(Ȳ)} J̄ᵀ∇φ(Ȳ) w] / E[e^{−nφ(Ȳ)} w]`,
/// `J̄ = (1/n) Σ_j ∂G/∂θ(X̄_j, θ)`, with numerator and denominator sharing paths.
pub fn grad_g_n(
    model: &Model,
    dist: &TiltableDistribution,
    theta: &[f64],
    phi: &SmoothingPhi,
    estimator: &Estimator,
    spec: &SimulationSpec,
) -> Result<GradientEstimate> {
    if phi.mode == PhiMode::Indicator {
        return Err(Error::InvalidParameter(
            "the gradient of g^n needs smooth φ; the indicator objective is piecewise constant".into(),
        ));
    }
    let start = std::time::Instant::now();
    let dims = model.dims();
    let (m, d) = (dims.m, dims.d);
    let n = spec.n as f64;
    let sim = estimator.simulator(model, dist, theta)?;
    let out = sim.simulate(spec, true, |s| {
        let lv = -n * phi.phi(s.y) + s.log_weight;
        let gp = phi.grad_phi(s.y);
        let jac = s.jac_mean.expect("Jacobian requested");
        let q: Vec<f64> = (0..d)
            .map(|k| (0..m).map(|i| jac[i * d + k] * gp[i]).sum())
            .collect();
        (lv, q, s.y.iter().all(|v| *v >= 0.0))
    })?;
    let log_values: Vec<f64> = out.iter().map(|o| o.0).collect();
    let hits = out.iter().filter(|o| o.2).count();
    let summary = EstimateSummary::from_log_values(
        &log_values,
        hits,
        spec.n,
        spec.seed,
        start.elapsed().as_secs_f64(),
    );
    if summary.log_mean == f64::NEG_INFINITY {
        return Err(Error::Underflow(format!(
            "every replication of e^(-n phi) underflowed at theta = {theta:?}; use a stronger control"
        )));
    }
    let max = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_values.iter().map(|v| (v - max).exp()).collect();
    let count = w.len() as f64;
    let den = w.iter().sum::<f64>() / count;
    let mut gradient = vec![0.0; d];
    for (wi, o) in w.iter().zip(&out) {
        for k in 0..d {
            gradient[k] += wi * o.1[k];
        }
    }
    for g in &mut gradient {
        *g /= count * den;
    }
    let se = (0..d)
        .map(|k| {
            let ss: f64 = w
                .iter()
                .zip(&out)
                .map(|(wi, o)| (wi * (o.1[k] - gradient[k])).powi(2))
                .sum();
            (ss / (count - 1.0)).sqrt() / (den * count.sqrt())
        })
        .collect();
    Ok(GradientEstimate {
        gradient,
        se,
        g: -summary.log_mean / n,
        summary,
    })
}

// ---------------------------------------------------------------------------
// Limiting objective
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LimitValue {
    /// `g(θ) = inf_β [φ(β) + L₂^θ(β)]`.
    pub g: f64,
    /// Saddle point of the quadratic branch.
    pub saddle: SaddlePoint,
    /// True when the cap `Λε²` is below the quadratic-branch value.
    pub cap_binding: bool,
}

/// `g(θ) = min(Λε², inf_β [φ₂(β) + L₂^θ(β)])`.
pub fn g_limit(
    model: &Model,
    dist: &TiltableDistribution,
    theta: &[f64],
    phi: &SmoothingPhi,
    cfg: &MgfConfig,
) -> Result<LimitValue> {
    let law = model.push_forward(dist, theta, cfg)?;
    g_limit_from_law(&law, phi)
}

pub fn g_limit_from_law(law: &PushForwardLaw, phi: &SmoothingPhi) -> Result<LimitValue> {
    let saddle = solve_saddle(law, phi.quadratic_weight(), None)?;
    let cap = phi.cap();
    if phi.mode == PhiMode::Smooth {
        let gamma = solve_saddle(law, f64::INFINITY, Some(&saddle.alpha))?.value;
        if cap < gamma {
            log::warn!(
                "cap Λε² = {cap} is below inf_(β≥0) L₂ = {gamma}; the smoothed target differs from the rare event"
            );
        }
    }
    let cap_binding = cap < saddle.value;
    Ok(LimitValue {
        g: saddle.value.min(cap),
        saddle,
        cap_binding,
    })
}

/// `g(θ)` and its Danskin gradient `−Σ_i p̂_i ∂_θG(x_i, θ)ᵀ α` under the
/// `α`-tilted discretized law; zero when the cap binds.
pub fn g_limit_with_gradient(
    model: &Model,
    dist: &TiltableDistribution,
    theta: &[f64],
    phi: &SmoothingPhi,
    cfg: &MgfConfig,
) -> Result<(LimitValue, Vec<f64>)> {
    let law = model.push_forward(dist, theta, cfg)?;
    let value = g_limit_from_law(&law, phi)?;
    let dims = model.dims();
    let mut grad = vec![0.0; dims.d];
    if value.cap_binding {
        return Ok((value, grad));
    }
    let alpha = &value.saddle.alpha;
    check_len("saddle alpha", dims.m, alpha.len())?;
    if alpha.iter().all(|a| *a == 0.0) {
        return Ok((value, grad));
    }
    let (_, p) = law.tilted_probabilities(None, alpha);
    let mut jac = vec![0.0; dims.m * dims.d];
    for (i, pi) in p.iter().enumerate() {
        if *pi == 0.0 {
            continue;
        }
        model.jacobian_into(law.x(i), theta, &mut jac);
        for k in 0..dims.d {
            let jt: f64 = (0..dims.m).map(|r| jac[r * dims.d + k] * alpha[r]).sum();
            grad[k] -= pi * jt;
        }
    }
    Ok((value, grad))
}
