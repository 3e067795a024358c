//! Convex conjugates of log-MGFs, dual points, and the saddle-point solver
//! for the limiting rate `inf_β [φ₂(β) + L₂^θ(β)]`.

use crate::error::{check_len, Error, Result};
use crate::model::PushForwardLaw;
use crate::numeric::{dot, norm, solve_spd};
use crate::rng::RandomStream;

/// Value, gradient and row-major Hessian at a point.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<f64>,
}

pub trait ConvexFunction {
    fn dim(&self) -> usize;
    fn derivatives(&self, x: &[f64]) -> Derivatives;
    fn value(&self, x: &[f64]) -> f64 {
        self.derivatives(x).value
    }
}

/// `H₂^θ` of a discretized push-forward law.
pub struct LogMgfU<'a>(pub &'a PushForwardLaw);

impl ConvexFunction for LogMgfU<'_> {
    fn dim(&self) -> usize {
        self.0.dims().1
    }

    fn derivatives(&self, alpha: &[f64]) -> Derivatives {
        let m = self.0.moments(None, alpha);
        Derivatives {
            value: m.log_mgf,
            gradient: m.mean,
            hessian: m.cov,
        }
    }

    fn value(&self, alpha: &[f64]) -> f64 {
        self.0.log_mgf_u(alpha)
    }
}

/// A convex function known only through its values; derivatives come from
/// central differences.
pub struct NumericConvex<F> {
    pub dim: usize,
    pub f: F,
    pub step: f64,
}

impl<F: Fn(&[f64]) -> f64> NumericConvex<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f, step: 1e-4 }
    }
}

impl<F: Fn(&[f64]) -> f64> ConvexFunction for NumericConvex<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    fn derivatives(&self, x: &[f64]) -> Derivatives {
        let n = self.dim;
        let h = self.step;
        let f0 = (self.f)(x);
        let mut p = x.to_vec();
        let eval = |p: &mut Vec<f64>, i: usize, di: f64, j: usize, dj: f64| {
            p[i] += di;
            p[j] += dj;
            let v = (self.f)(p);
            p[i] -= di;
            p[j] -= dj;
            v
        };
        let mut gradient = vec![0.0; n];
        let mut hessian = vec![0.0; n * n];
        for i in 0..n {
            let fp = eval(&mut p, i, h, i, 0.0);
            let fm = eval(&mut p, i, -h, i, 0.0);
            gradient[i] = (fp - fm) / (2.0 * h);
            hessian[i * n + i] = (fp - 2.0 * f0 + fm) / (h * h);
            for j in 0..i {
                let v = (eval(&mut p, i, h, j, h) - eval(&mut p, i, h, j, -h)
                    - eval(&mut p, i, -h, j, h)
                    + eval(&mut p, i, -h, j, -h))
                    / (4.0 * h * h);
                hessian[i * n + j] = v;
                hessian[j * n + i] = v;
            }
        }
        Derivatives {
            value: f0,
            gradient,
            hessian,
        }
    }
}

// ---------------------------------------------------------------------------
// Legendre transform
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConjugateResult {
    /// `sup_α <α, β> − H(α)`; `+∞` when the supremum is not attained.
    pub value: f64,
    pub maximizer: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl ConjugateResult {
    pub fn diverged(&self) -> bool {
        self.value == f64::INFINITY
    }
}

const MAX_HALVINGS: usize = 40;
const DIVERGENCE_NORM: f64 = 1e6;

enum NewtonOutcome {
    Converged(Vec<f64>, usize),
    Diverged(Vec<f64>, usize),
    Stalled(f64, usize),
}

/// Damped Newton ascent on `ψ(α) = <α, β> − H(α)`.
fn newton_conjugate(h: &dyn ConvexFunction, beta: &[f64], start: &[f64]) -> NewtonOutcome {
    let n = beta.len();
    let scale = 1.0 + norm(beta);
    let mut alpha = start.to_vec();
    let mut d = h.derivatives(&alpha);
    let mut last_residual = f64::INFINITY;
    for it in 0..200 {
        let g: Vec<f64> = (0..n).map(|i| beta[i] - d.gradient[i]).collect();
        let residual = norm(&g);
        last_residual = residual;
        if residual <= 1e-12 * scale {
            return NewtonOutcome::Converged(alpha, it);
        }
        let psi = dot(&alpha, beta) - d.value;
        let step = solve_spd(&d.hessian, &g)
            .filter(|s| s.iter().all(|v| v.is_finite()) && dot(s, &g) > 0.0)
            .unwrap_or_else(|| g.clone());
        let slope = dot(&step, &g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = (0..n).map(|i| alpha[i] + t * step[i]).collect();
            let v = h.value(&trial);
            let psi_t = dot(&trial, beta) - v;
            if v.is_finite() && psi_t >= psi + 1e-4 * t * slope {
                accepted = Some(trial);
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some(next) => {
                alpha = next;
                if norm(&alpha) > DIVERGENCE_NORM {
                    return NewtonOutcome::Diverged(alpha, it + 1);
                }
                d = h.derivatives(&alpha);
            }
            None => {
                // No ascent possible: we are at the numerical noise floor.
                if residual <= 1e-7 * scale {
                    return NewtonOutcome::Converged(alpha, it);
                }
                return NewtonOutcome::Stalled(residual, it);
            }
        }
    }
    if norm(&alpha) > 1e3 {
        NewtonOutcome::Diverged(alpha, 200)
    } else if last_residual <= 1e-7 * scale {
        NewtonOutcome::Converged(alpha, 200)
    } else {
        NewtonOutcome::Stalled(last_residual, 200)
    }
}

/// `L(β) = sup_α <α, β> − H(α)`.
///
/// Newton starts from `alpha0`; if it stalls, `0` and `±e_i` are tried. A run
/// whose iterates escape to infinity marks `β` as outside the closure of the
/// range of `∇H`, reported as `value = +∞`.
pub fn legendre(h: &dyn ConvexFunction, beta: &[f64], alpha0: &[f64]) -> Result<ConjugateResult> {
    let n = h.dim();
    check_len("beta", n, beta.len())?;
    check_len("alpha0", n, alpha0.len())?;
    let mut starts = vec![alpha0.to_vec(), vec![0.0; n]];
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; n];
            e[i] = s;
            starts.push(e);
        }
    }
    let mut best_residual = f64::INFINITY;
    let mut total = 0;
    let mut diverged = None;
    for start in &starts {
        match newton_conjugate(h, beta, start) {
            NewtonOutcome::Converged(alpha, it) => {
                let value = dot(&alpha, beta) - h.value(&alpha);
                return Ok(ConjugateResult {
                    value,
                    maximizer: alpha,
                    converged: true,
                    iterations: total + it,
                });
            }
            NewtonOutcome::Diverged(alpha, it) => {
                total += it;
                diverged.get_or_insert(alpha);
            }
            NewtonOutcome::Stalled(r, it) => {
                total += it;
                best_residual = best_residual.min(r);
            }
        }
    }
    match diverged {
        Some(alpha) => Ok(ConjugateResult {
            value: f64::INFINITY,
            maximizer: alpha,
            converged: false,
            iterations: total,
        }),
        None => Err(Error::NonConvergence {
            op: "legendre",
            iterations: total,
            residual: best_residual,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualPoint {
    pub alpha_star: f64,
    /// `L(c) = α* c − H(α*)`.
    pub rate: f64,
}

/// The tilt `α* ≥ 0` with `H'(α*) = c` for a univariate log-MGF.
pub fn dual_point(h: &dyn ConvexFunction, c: f64) -> Result<DualPoint> {
    if h.dim() != 1 {
        return Err(Error::UnsupportedDimension(
            "dual point is defined for univariate log-MGFs".into(),
        ));
    }
    let mean = h.derivatives(&[0.0]).gradient[0];
    if c < mean - 1e-12 * (1.0 + mean.abs()) {
        return Err(Error::InvalidParameter(format!(
            "threshold {c} lies below the mean {mean}"
        )));
    }
    if c <= mean {
        return Ok(DualPoint {
            alpha_star: 0.0,
            rate: 0.0,
        });
    }
    let r = legendre(h, &[c], &[0.0])?;
    if r.diverged() {
        return Err(Error::NumericFailure(format!(
            "threshold {c} exceeds the range of the log-MGF gradient"
        )));
    }
    Ok(DualPoint {
        alpha_star: r.maximizer[0].max(0.0),
        rate: r.value,
    })
}

// ---------------------------------------------------------------------------
// Saddle point of the limiting problem
// ---------------------------------------------------------------------------

/// Solution of `inf_β sup_α Φ(α, β)`, `Φ = φ₂(β) + <α, β> − H₂^θ(α)`.
#[derive(Debug, Clone)]
pub struct SaddlePoint {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub value: f64,
    /// `‖β − ∇H₂^θ(α)‖`.
    pub residual_beta: f64,
    /// `‖α + 2Λ min(β, 0)‖`; for `Λ = ∞` the complementarity residual
    /// `‖min(β, 0)‖ + |<α, β>|`.
    pub residual_alpha: f64,
    pub iterations: usize,
}

/// `φ₂(β) = Λ‖min(β, 0)‖²`; with `Λ = ∞` the indicator of `β ≥ 0`.
pub fn phi2(lambda: f64, beta: &[f64]) -> f64 {
    let s: f64 = beta.iter().map(|b| b.min(0.0).powi(2)).sum();
    if lambda.is_infinite() {
        if s > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        lambda * s
    }
}

pub const SADDLE_TOL: f64 = 1e-7;

/// Solves the stationarity system `β = ∇H₂^θ(α)`, `α = −2Λ min(β, 0)`.
///
/// Eliminating `β` leaves the concave dual `max_{α ≥ 0} −H₂^θ(α) − ‖α‖²/(4Λ)`,
/// solved by projected Newton. `lambda = ∞` gives the indicator target.
pub fn solve_saddle(law: &PushForwardLaw, lambda: f64, start: Option<&[f64]>) -> Result<SaddlePoint> {
    let m = law.dims().1;
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter("Λ must be positive".into()));
    }
    if let Some(s) = start {
        check_len("saddle start", m, s.len())?;
    }
    let mut starts: Vec<Vec<f64>> = Vec::new();
    starts.push(start.map_or_else(|| vec![0.0; m], |s| s.iter().map(|v| v.max(0.0)).collect()));
    starts.push(vec![0.0; m]);
    let base = law.moments(None, &vec![0.0; m]);
    starts.push(
        (0..m)
            .map(|i| (-base.mean[i] / base.cov[i * m + i].max(1e-12)).max(0.0))
            .collect(),
    );
    let mut stream = RandomStream::new(0x5add1e, 0);
    for _ in 0..4 {
        starts.push((0..m).map(|_| stream.normal().abs()).collect());
    }

    let mut best: Option<SaddlePoint> = None;
    let mut total = 0;
    for s in &starts {
        let point = projected_newton(law, lambda, s);
        total += point.iterations;
        let ok = point.residual_alpha <= SADDLE_TOL && point.residual_beta <= SADDLE_TOL;
        if ok {
            return Ok(SaddlePoint {
                iterations: total,
                ..point
            });
        }
        if best
            .as_ref()
            .is_none_or(|b| point.residual_alpha < b.residual_alpha)
        {
            best = Some(point);
        }
    }
    let best = best.expect("at least one start");
    Err(Error::NonConvergence {
        op: "solve_saddle",
        iterations: total,
        residual: best.residual_alpha.max(best.residual_beta),
    })
}

/// Value, gradient and negated (positive definite) Hessian of a concave
/// objective.
pub(crate) struct ConcaveEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub neg_hessian: Vec<f64>,
}

/// Projected Newton ascent for a smooth concave objective where the
/// coordinates flagged in `nonneg` are constrained to be `≥ 0`.
/// Returns the final point, the iteration count and the projected-gradient norm.
pub(crate) fn maximize_concave(
    eval: &dyn Fn(&[f64]) -> ConcaveEval,
    value: &dyn Fn(&[f64]) -> f64,
    start: &[f64],
    nonneg: &[bool],
) -> (Vec<f64>, usize, f64) {
    let n = start.len();
    let project = |x: &mut [f64]| {
        for i in 0..n {
            if nonneg[i] {
                x[i] = x[i].max(0.0);
            }
        }
    };
    let mut x = start.to_vec();
    project(&mut x);
    let mut cur = eval(&x);
    let mut iterations = 0;
    let free_of = |x: &[f64], g: &[f64]| -> Vec<usize> {
        (0..n).filter(|&i| !nonneg[i] || x[i] > 0.0 || g[i] > 0.0).collect()
    };
    let mut pg_norm = f64::INFINITY;
    for it in 0..300 {
        iterations = it;
        let free = free_of(&x, &cur.gradient);
        pg_norm = norm(&free.iter().map(|&i| cur.gradient[i]).collect::<Vec<_>>());
        if pg_norm <= 1e-15 {
            break;
        }
        let nf = free.len();
        let mut hf = vec![0.0; nf * nf];
        for (r, &i) in free.iter().enumerate() {
            for (c, &j) in free.iter().enumerate() {
                hf[r * nf + c] = cur.neg_hessian[i * n + j];
            }
        }
        let gf: Vec<f64> = free.iter().map(|&i| cur.gradient[i]).collect();
        let sf = solve_spd(&hf, &gf)
            .filter(|s| s.iter().all(|v| v.is_finite()) && dot(s, &gf) > 0.0)
            .unwrap_or_else(|| gf.clone());
        let mut dir = vec![0.0; n];
        for (r, &i) in free.iter().enumerate() {
            dir[i] = sf[r];
        }
        let mut t = 1.0;
        let mut moved = false;
        // At the round-off floor of the objective, Armijo cannot certify
        // progress; a full step that shrinks the projected gradient is kept.
        {
            let mut trial: Vec<f64> = (0..n).map(|i| x[i] + dir[i]).collect();
            project(&mut trial);
            let ft = value(&trial);
            let floor = 1e-12 * (1.0 + cur.value.abs());
            if ft.is_finite() && ft < cur.value + 1e-4 * dot(&cur.gradient, &dir) && ft >= cur.value - floor {
                let next = eval(&trial);
                let pg = norm(&free_of(&trial, &next.gradient).iter().map(|&i| next.gradient[i]).collect::<Vec<_>>());
                if pg < 0.5 * pg_norm {
                    x = trial;
                    cur = next;
                    continue;
                }
            }
        }
        for _ in 0..=MAX_HALVINGS {
            let mut trial: Vec<f64> = (0..n).map(|i| x[i] + t * dir[i]).collect();
            project(&mut trial);
            let delta: Vec<f64> = (0..n).map(|i| trial[i] - x[i]).collect();
            let ft = value(&trial);
            if ft.is_finite() && ft >= cur.value + 1e-4 * dot(&cur.gradient, &delta) {
                moved = delta.iter().any(|d| *d != 0.0);
                x = trial;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
        cur = eval(&x);
    }
    let free = free_of(&x, &cur.gradient);
    pg_norm = pg_norm.min(norm(&free.iter().map(|&i| cur.gradient[i]).collect::<Vec<_>>()));
    (x, iterations, pg_norm)
}

fn projected_newton(law: &PushForwardLaw, lambda: f64, start: &[f64]) -> SaddlePoint {
    let m = start.len();
    let ridge = if lambda.is_infinite() {
        0.0
    } else {
        1.0 / (2.0 * lambda)
    };
    let eval = |alpha: &[f64]| {
        let mom = law.moments(None, alpha);
        let mut neg_hessian = mom.cov;
        for i in 0..m {
            neg_hessian[i * m + i] += ridge;
        }
        ConcaveEval {
            value: -mom.log_mgf - 0.5 * ridge * dot(alpha, alpha),
            gradient: (0..m).map(|i| -mom.mean[i] - ridge * alpha[i]).collect(),
            neg_hessian,
        }
    };
    let value = |alpha: &[f64]| -law.log_mgf_u(alpha) - 0.5 * ridge * dot(alpha, alpha);
    let (alpha, iterations, _) = maximize_concave(&eval, &value, start, &vec![true; m]);
    let mom = law.moments(None, &alpha);
    let beta = mom.mean;
    let residual_alpha = if lambda.is_infinite() {
        norm(&beta.iter().map(|b| b.min(0.0)).collect::<Vec<_>>()) + dot(&alpha, &beta).abs()
    } else {
        norm(
            &(0..m)
                .map(|i| alpha[i] + 2.0 * lambda * beta[i].min(0.0))
                .collect::<Vec<_>>(),
        )
    };
    let value = if lambda.is_infinite() {
        dot(&alpha, &beta) - mom.log_mgf
    } else {
        phi2(lambda, &beta) + dot(&alpha, &beta) - mom.log_mgf
    };
    SaddlePoint {
        residual_beta: 0.0,
        alpha,
        beta,
        value,
        residual_alpha,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct HalfSquare;
    impl ConvexFunction for HalfSquare {
        fn dim(&self) -> usize {
            1
        }
        fn derivatives(&self, x: &[f64]) -> Derivatives {
            Derivatives {
                value: 0.5 * x[0] * x[0],
                gradient: vec![x[0]],
                hessian: vec![1.0],
            }
        }
    }

    /// `log(1 + e^α)`, whose gradient ranges over (0, 1).
    struct Softplus;
    impl ConvexFunction for Softplus {
        fn dim(&self) -> usize {
            1
        }
        fn derivatives(&self, x: &[f64]) -> Derivatives {
            let s = 1.0 / (1.0 + (-x[0]).exp());
            Derivatives {
                value: x[0].max(0.0) + (-x[0].abs()).exp().ln_1p(),
                gradient: vec![s],
                hessian: vec![s * (1.0 - s)],
            }
        }
    }

    #[test]
    fn legendre_of_half_square() {
        let r = legendre(&HalfSquare, &[1.0], &[0.0]).unwrap();
        assert!((r.value - 0.5).abs() < 1e-12);
        assert!((r.maximizer[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn legendre_outside_range_is_infinite() {
        let r = legendre(&Softplus, &[1.5], &[0.0]).unwrap();
        assert!(r.diverged());
        let r = legendre(&Softplus, &[0.25], &[0.0]).unwrap();
        let p: f64 = 0.25;
        let exact = p * p.ln() + (1.0 - p) * (1.0 - p).ln();
        assert!((r.value - exact).abs() < 1e-10);
    }

    #[test]
    fn dual_point_of_standard_normal() {
        let d = dual_point(&HalfSquare, 0.5).unwrap();
        assert!((d.alpha_star - 0.5).abs() < 1e-12);
        assert!((d.rate - 0.125).abs() < 1e-12);
        let d = dual_point(&HalfSquare, 0.0).unwrap();
        assert_eq!(d.alpha_star, 0.0);
        assert!(dual_point(&HalfSquare, -1.0).is_err());
        assert!(dual_point(&Softplus, 2.0).is_err());
    }

    #[test]
    fn numeric_derivatives_match_analytic() {
        let f = NumericConvex::new(2, |x: &[f64]| x[0].exp() + x[0] * x[1] + x[1] * x[1]);
        let d = f.derivatives(&[0.3, -0.2]);
        assert!((d.gradient[0] - (0.3f64.exp() - 0.2)).abs() < 1e-7);
        assert!((d.gradient[1] - (0.3 - 0.4)).abs() < 1e-7);
        assert!((d.hessian[1] - 1.0).abs() < 1e-5);
    }
}
