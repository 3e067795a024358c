//! Base laws of the random input `X` and their exponential tilts.
//!
//! Two families are supported: multivariate normal (closed-form tilting, any
//! dimension) and a generic univariate law given by a log-density on a
//! bounded interval (tilting by quadrature and inverse-CDF sampling).

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{check_finite, check_len, Error, Result};
use crate::numeric::dot;
use crate::quadrature::{gauss_legendre, integrate_adaptive, panel_edges, AdaptiveOptions};
use crate::rng::RandomStream;

/// An unnormalized or normalized log-density on the real line.
pub type LogDensityFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Tolerance on `log ∫ exp(log_density)` for a generic law to count as normalized.
pub const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Clone)]
pub struct TiltableDistribution {
    kind: Kind,
}

#[derive(Clone)]
enum Kind {
    Normal(MvNormal),
    Generic(Generic1d),
}

#[derive(Debug, Clone)]
struct MvNormal {
    mean: Vec<f64>,
    /// Row-major covariance.
    cov: Vec<f64>,
    /// Row-major lower Cholesky factor.
    chol: Vec<f64>,
}

#[derive(Clone)]
struct Generic1d {
    log_density: LogDensityFn,
    lo: f64,
    hi: f64,
    mean: f64,
    var: f64,
    base: Arc<TabulatedLaw>,
}

impl std::fmt::Debug for TiltableDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.kind {
            Kind::Normal(n) => f
                .debug_struct("MvNormal")
                .field("mean", &n.mean)
                .field("cov", &n.cov)
                .finish(),
            Kind::Generic(g) => f
                .debug_struct("Generic1d")
                .field("support", &(g.lo, g.hi))
                .field("mean", &g.mean)
                .finish(),
        }
    }
}

impl TiltableDistribution {
    pub fn mv_normal(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let h = mean.len();
        if h == 0 {
            return Err(Error::InvalidDistribution("empty mean vector".into()));
        }
        check_len("covariance rows", h, cov.len())?;
        for row in &cov {
            check_len("covariance columns", h, row.len())?;
        }
        check_finite("mean", &mean)?;
        let flat: Vec<f64> = cov.iter().flatten().copied().collect();
        check_finite("covariance", &flat)?;
        let scale = flat.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..h {
            for j in 0..i {
                if (flat[i * h + j] - flat[j * h + i]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidDistribution(
                        "covariance is not symmetric".into(),
                    ));
                }
            }
        }
        let chol = DMatrix::from_row_slice(h, h, &flat)
            .cholesky()
            .ok_or_else(|| {
                Error::InvalidDistribution("covariance is not positive definite".into())
            })?
            .l();
        let chol = (0..h)
            .flat_map(|i| (0..h).map(move |j| (i, j)))
            .map(|(i, j)| chol[(i, j)])
            .collect();
        Ok(Self {
            kind: Kind::Normal(MvNormal {
                mean,
                cov: flat,
                chol,
            }),
        })
    }

    pub fn standard_normal(h: usize) -> Self {
        let cov = (0..h)
            .map(|i| (0..h).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::mv_normal(vec![0.0; h], cov).expect("identity covariance is valid")
    }

    /// A univariate law with the given normalized log-density on `[lo, hi]`.
    pub fn generic_1d(
        log_density: impl Fn(f64) -> f64 + Send + Sync + 'static,
        lo: f64,
        hi: f64,
    ) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidDistribution(
                "generic support must be a bounded interval".into(),
            ));
        }
        let log_density: LogDensityFn = Arc::new(log_density);
        let log_mass = log_integral(&*log_density, lo, hi)?;
        if log_mass.abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidDistribution(format!(
                "log-density integrates to exp({log_mass:.3e}), not 1"
            )));
        }
        let ld = log_density.clone();
        let moment = |k: i32| {
            integrate_adaptive(
                |x| x.powi(k) * ld(x).exp(),
                lo,
                hi,
                &[],
                AdaptiveOptions::default(),
            )
            .map(|r| r.value)
        };
        let mean = moment(1)?;
        let var = (moment(2)? - mean * mean).max(0.0);
        let base = Arc::new(TabulatedLaw::new(log_density.clone(), lo, hi, &[], 400)?);
        Ok(Self {
            kind: Kind::Generic(Generic1d {
                log_density,
                lo,
                hi,
                mean,
                var,
                base,
            }),
        })
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            Kind::Normal(n) => n.mean.len(),
            Kind::Generic(_) => 1,
        }
    }

    pub fn is_normal(&self) -> bool {
        matches!(self.kind, Kind::Normal(_))
    }

    pub fn mean(&self) -> Vec<f64> {
        match &self.kind {
            Kind::Normal(n) => n.mean.clone(),
            Kind::Generic(g) => vec![g.mean],
        }
    }

    /// Row-major covariance matrix.
    pub fn covariance(&self) -> Vec<f64> {
        match &self.kind {
            Kind::Normal(n) => n.cov.clone(),
            Kind::Generic(g) => vec![g.var],
        }
    }

    /// Support bounds of a univariate law, `None` for the normal family.
    pub fn support(&self) -> Option<(f64, f64)> {
        match &self.kind {
            Kind::Normal(_) => None,
            Kind::Generic(g) => Some((g.lo, g.hi)),
        }
    }

    /// Normalized log-density of a univariate law at `x`.
    pub fn log_density_1d(&self, x: f64) -> Result<f64> {
        match &self.kind {
            Kind::Normal(n) if n.mean.len() == 1 => {
                let sd = n.cov[0].sqrt();
                Ok(crate::numeric::std_normal_log_pdf((x - n.mean[0]) / sd) - sd.ln())
            }
            Kind::Normal(n) => Err(Error::UnsupportedDimension(format!(
                "univariate density requested for a {}-dimensional law",
                n.mean.len()
            ))),
            Kind::Generic(g) => Ok(if x < g.lo || x > g.hi {
                f64::NEG_INFINITY
            } else {
                (g.log_density)(x)
            }),
        }
    }

    /// Effective integration window of a univariate law.
    pub(crate) fn window_1d(&self, half_width_sd: f64) -> (f64, f64) {
        match &self.kind {
            Kind::Normal(n) => {
                let sd = n.cov[0].sqrt();
                (n.mean[0] - half_width_sd * sd, n.mean[0] + half_width_sd * sd)
            }
            Kind::Generic(g) => (g.lo, g.hi),
        }
    }

    /// `H1(a) = log E[exp(<a, X>)]`.
    pub fn log_mgf_x(&self, a: &[f64]) -> Result<f64> {
        check_len("tilt", self.dim(), a.len())?;
        match &self.kind {
            Kind::Normal(n) => Ok(dot(a, &n.mean) + 0.5 * quad_form(&n.cov, a)),
            Kind::Generic(g) => {
                let a = a[0];
                let ld = g.log_density.clone();
                log_integral(&move |x| a * x + ld(x), g.lo, g.hi)
            }
        }
    }

    /// Gradient of `H1`, i.e. the mean of the tilted law.
    pub fn grad_log_mgf_x(&self, a: &[f64]) -> Result<Vec<f64>> {
        check_len("tilt", self.dim(), a.len())?;
        match &self.kind {
            Kind::Normal(n) => Ok(tilted_mean(n, a)),
            Kind::Generic(g) => {
                let a = a[0];
                let h1 = self.log_mgf_x(&[a])?;
                let ld = g.log_density.clone();
                let m = integrate_adaptive(
                    |x| x * (a * x + ld(x) - h1).exp(),
                    g.lo,
                    g.hi,
                    &[],
                    AdaptiveOptions::default(),
                )?;
                Ok(vec![m.value])
            }
        }
    }

    /// `log(dP/dP_a)(x) = H1(a) - <a, x>`.
    pub fn log_density_ratio_x(&self, a: &[f64], x: &[f64]) -> Result<f64> {
        check_len("point", self.dim(), x.len())?;
        Ok(self.log_mgf_x(a)? - dot(a, x))
    }

    /// Sampler for the law tilted by `a`. The tilt `a = 0` gives the base law.
    pub fn tilt_sampler(&self, a: &[f64]) -> Result<XTiltSampler> {
        check_len("tilt", self.dim(), a.len())?;
        check_finite("tilt", a)?;
        match &self.kind {
            Kind::Normal(n) => Ok(XTiltSampler::Gaussian {
                mean: tilted_mean(n, a),
                chol: n.chol.clone(),
                log_mgf: dot(a, &n.mean) + 0.5 * quad_form(&n.cov, a),
            }),
            Kind::Generic(g) => {
                if a[0] == 0.0 {
                    return Ok(XTiltSampler::Tabulated {
                        law: g.base.clone(),
                        log_mgf: 0.0,
                    });
                }
                let a = a[0];
                let ld = g.log_density.clone();
                let law = TabulatedLaw::new(Arc::new(move |x| a * x + ld(x)), g.lo, g.hi, &[], 400)?;
                let log_mgf = law.log_mass();
                Ok(XTiltSampler::Tabulated {
                    law: Arc::new(law),
                    log_mgf,
                })
            }
        }
    }

    pub fn sample(&self, stream: &mut RandomStream) -> Result<Vec<f64>> {
        self.sample_tilted_x(&vec![0.0; self.dim()], stream)
    }

    pub fn sample_tilted_x(&self, a: &[f64], stream: &mut RandomStream) -> Result<Vec<f64>> {
        let sampler = self.tilt_sampler(a)?;
        let mut out = vec![0.0; self.dim()];
        sampler.sample(stream, &mut out)?;
        Ok(out)
    }
}

fn quad_form(m: &[f64], a: &[f64]) -> f64 {
    let h = a.len();
    (0..h)
        .map(|i| a[i] * (0..h).map(|j| m[i * h + j] * a[j]).sum::<f64>())
        .sum()
}

fn tilted_mean(n: &MvNormal, a: &[f64]) -> Vec<f64> {
    let h = a.len();
    (0..h)
        .map(|i| n.mean[i] + (0..h).map(|j| n.cov[i * h + j] * a[j]).sum::<f64>())
        .collect()
}

/// `log ∫_lo^hi exp(f(x)) dx`, stabilized by the maximum of `f` on a grid.
fn log_integral(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> Result<f64> {
    let grid = 2000;
    let (mut shift, mut argmax) = (f64::NEG_INFINITY, lo);
    for i in 0..=grid {
        let x = lo + (hi - lo) * i as f64 / grid as f64;
        let v = f(x);
        if v > shift {
            shift = v;
            argmax = x;
        }
    }
    if !shift.is_finite() {
        return Err(Error::NumericFailure(
            "log-density is not finite anywhere on the support".into(),
        ));
    }
    let r = integrate_adaptive(
        |x| (f(x) - shift).exp(),
        lo,
        hi,
        &[argmax],
        AdaptiveOptions {
            abs_tol: 1e-15,
            rel_tol: 1e-12,
            max_intervals: 4000,
        },
    )?;
    Ok(shift + r.value.ln())
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

/// A ready-to-draw exponential tilt of the input law.
#[derive(Debug, Clone)]
pub enum XTiltSampler {
    Gaussian {
        mean: Vec<f64>,
        chol: Vec<f64>,
        log_mgf: f64,
    },
    Tabulated {
        law: Arc<TabulatedLaw>,
        log_mgf: f64,
    },
}

impl XTiltSampler {
    /// `H1(a)` for the tilt this sampler draws from.
    pub fn log_mgf(&self) -> f64 {
        match self {
            Self::Gaussian { log_mgf, .. } | Self::Tabulated { log_mgf, .. } => *log_mgf,
        }
    }

    pub fn sample(&self, stream: &mut RandomStream, out: &mut [f64]) -> Result<()> {
        match self {
            Self::Gaussian { mean, chol, .. } => {
                let h = mean.len();
                stream.fill_normal(&mut out[..h]);
                // In place: row i of L only touches z_0..z_i.
                for i in (0..h).rev() {
                    let mut acc = mean[i];
                    for j in 0..=i {
                        acc += chol[i * h + j] * out[j];
                    }
                    out[i] = acc;
                }
                Ok(())
            }
            Self::Tabulated { law, .. } => {
                out[0] = law.quantile(stream.open_uniform())?;
                Ok(())
            }
        }
    }
}

/// A univariate law given by an unnormalized log-density, tabulated on panels
/// for inverse-CDF sampling.
pub struct TabulatedLaw {
    log_density: LogDensityFn,
    shift: f64,
    edges: Vec<f64>,
    /// Normalized cumulative mass at each edge.
    cum: Vec<f64>,
    /// Total shifted mass.
    mass: f64,
    gl_x: Vec<f64>,
    gl_w: Vec<f64>,
}

impl std::fmt::Debug for TabulatedLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TabulatedLaw")
            .field("range", &(self.edges[0], self.edges[self.edges.len() - 1]))
            .field("panels", &(self.edges.len() - 1))
            .field("log_mass", &self.log_mass())
            .finish()
    }
}

const QUANTILE_TOL: f64 = 1e-12;

impl TabulatedLaw {
    /// Tabulates `exp(log_density)` on `[lo, hi]`, trimmed to where the
    /// density is within `exp(-50)` of its peak, with extra panel edges at
    /// `breakpoints` (kinks of the density).
    pub fn new(
        log_density: LogDensityFn,
        lo: f64,
        hi: f64,
        breakpoints: &[f64],
        panels: usize,
    ) -> Result<Self> {
        let grid = 4000;
        let step = (hi - lo) / grid as f64;
        let values: Vec<f64> = (0..=grid)
            .map(|i| log_density(lo + step * i as f64))
            .collect();
        let shift = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !shift.is_finite() {
            return Err(Error::NumericFailure(
                "tabulated density is not finite on its range".into(),
            ));
        }
        let first = values.iter().position(|v| *v - shift > -50.0).unwrap();
        let last = values.iter().rposition(|v| *v - shift > -50.0).unwrap();
        let a = (lo + step * first as f64 - step).max(lo);
        let b = (lo + step * last as f64 + step).min(hi);
        let mut kinks: Vec<f64> = breakpoints.to_vec();
        kinks.push(lo + step * values.iter().position(|v| *v == shift).unwrap() as f64);
        let edges = panel_edges(a, b, &kinks, panels);
        let (gl_x, gl_w) = gauss_legendre(16);
        let mut law = Self {
            log_density,
            shift,
            edges,
            cum: Vec::new(),
            mass: 0.0,
            gl_x,
            gl_w,
        };
        let mut cum = Vec::with_capacity(law.edges.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for k in 0..law.edges.len() - 1 {
            acc += law.partial_mass(law.edges[k], law.edges[k + 1]);
            cum.push(acc);
        }
        if !(acc > 0.0 && acc.is_finite()) {
            return Err(Error::NumericFailure(
                "tabulated density has no finite positive mass".into(),
            ));
        }
        law.mass = acc;
        law.cum = cum.into_iter().map(|c| c / acc).collect();
        Ok(law)
    }

    /// `log ∫ exp(log_density)` over the tabulated range.
    pub fn log_mass(&self) -> f64 {
        self.shift + self.mass.ln()
    }

    fn partial_mass(&self, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let s: f64 = self
            .gl_x
            .iter()
            .zip(&self.gl_w)
            .map(|(x, w)| w * ((self.log_density)(mid + half * x) - self.shift).exp())
            .sum();
        s * half
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let n = self.edges.len();
        if x <= self.edges[0] {
            return 0.0;
        }
        if x >= self.edges[n - 1] {
            return 1.0;
        }
        let k = self.edges.partition_point(|e| *e <= x) - 1;
        self.cum[k] + self.partial_mass(self.edges[k], x) / self.mass
    }

    /// Inverse CDF, accurate to `1e-12` in probability.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        let n = self.edges.len();
        let k = (self.cum.partition_point(|c| *c <= u).max(1) - 1).min(n - 2);
        let (mut a, mut b) = (self.edges[k], self.edges[k + 1]);
        let target = (u - self.cum[k]) * self.mass;
        let left = self.edges[k];
        let panel_mass = (self.cum[k + 1] - self.cum[k]) * self.mass;
        let mut x = if panel_mass > 0.0 {
            a + (b - a) * (target / panel_mass).clamp(0.0, 1.0)
        } else {
            0.5 * (a + b)
        };
        for _ in 0..100 {
            let resid = self.partial_mass(left, x) - target;
            if resid.abs() <= QUANTILE_TOL * self.mass {
                return Ok(x);
            }
            if resid > 0.0 {
                b = x;
            } else {
                a = x;
            }
            let dens = ((self.log_density)(x) - self.shift).exp();
            let newton = x - resid / dens;
            x = if dens > 0.0 && newton > a && newton < b {
                newton
            } else {
                0.5 * (a + b)
            };
            if b - a <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
                return Ok(x);
            }
        }
        Err(Error::NumericFailure(format!(
            "inverse CDF did not converge at u = {u}"
        )))
    }
}

/// Sampler for `U = G(X, θ)` tilted by `α`, i.e. the law
/// `exp(αu − H₂^θ(α)) ξ(du)`. The tilt is tabulated in `x`-space and pushed
/// through `G`, so the sampled input is available as well.
#[derive(Debug, Clone)]
pub struct UTiltSampler {
    law: Arc<TabulatedLaw>,
    log_mgf: f64,
    model: crate::model::Model,
    theta: Vec<f64>,
}

impl UTiltSampler {
    pub fn new(
        model: &crate::model::Model,
        dist: &TiltableDistribution,
        theta: &[f64],
        alpha: &[f64],
    ) -> Result<Self> {
        let dims = model.dims();
        if dims.m != 1 || dims.h != 1 {
            return Err(Error::UnsupportedDimension(format!(
                "tilted-U sampling needs h = m = 1, got h = {}, m = {}",
                dims.h, dims.m
            )));
        }
        check_len("alpha", 1, alpha.len())?;
        check_finite("alpha", alpha)?;
        model.check_theta(theta)?;
        let (lo, hi) = dist.window_1d(14.0);
        let a = alpha[0];
        let (m, t, d) = (model.clone(), theta.to_vec(), dist.clone());
        let log_density: LogDensityFn = Arc::new(move |x: f64| {
            let mut g = [0.0];
            m.eval_g_into(&[x], &t, &mut g);
            a * g[0] + d.log_density_1d(x).unwrap_or(f64::NEG_INFINITY)
        });
        let kinks = model.kinks(theta).swap_remove(0);
        let law = TabulatedLaw::new(log_density, lo, hi, &kinks, 400)?;
        // H₂ relative to the base law tabulated on the same grid.
        let d = dist.clone();
        let base: LogDensityFn =
            Arc::new(move |x: f64| d.log_density_1d(x).unwrap_or(f64::NEG_INFINITY));
        let log_mgf = law.log_mass() - TabulatedLaw::new(base, lo, hi, &kinks, 400)?.log_mass();
        Ok(Self {
            law: Arc::new(law),
            log_mgf,
            model: model.clone(),
            theta: theta.to_vec(),
        })
    }

    /// `H₂^θ(α)` for the tilt this sampler draws from.
    pub fn log_mgf(&self) -> f64 {
        self.log_mgf
    }

    /// Draws `(x, u)` with `u = G(x, θ)`.
    pub fn sample(&self, stream: &mut RandomStream) -> Result<(f64, f64)> {
        let x = self.law.quantile(stream.open_uniform())?;
        let mut g = [0.0];
        self.model.eval_g_into(&[x], &self.theta, &mut g);
        Ok((x, g[0]))
    }
}

/// One draw of `U` from its `α`-tilted law.
pub fn sample_tilted_u(
    model: &crate::model::Model,
    dist: &TiltableDistribution,
    theta: &[f64],
    alpha: &[f64],
    stream: &mut RandomStream,
) -> Result<f64> {
    Ok(UTiltSampler::new(model, dist, theta, alpha)?.sample(stream)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_covariances() {
        assert!(TiltableDistribution::mv_normal(vec![0.0, 0.0], vec![vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
        assert!(TiltableDistribution::mv_normal(vec![0.0, 0.0], vec![vec![1.0, 0.1], vec![0.2, 1.0]]).is_err());
        assert!(matches!(
            TiltableDistribution::mv_normal(vec![0.0], vec![vec![1.0, 0.0]]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gaussian_log_mgf_closed_form() {
        let d = TiltableDistribution::mv_normal(vec![1.0, -1.0], vec![vec![2.0, 0.5], vec![0.5, 1.0]])
            .unwrap();
        let a = [0.3, -0.2];
        let expect = 0.3 + 0.2 + 0.5 * (2.0 * 0.09 + 2.0 * 0.5 * 0.3 * -0.2 + 0.04);
        assert!((d.log_mgf_x(&a).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn generic_rejects_unnormalized_density() {
        let r = TiltableDistribution::generic_1d(|_| 0.0, 0.0, 2.0);
        assert!(matches!(r, Err(Error::InvalidDistribution(_))));
    }

    #[test]
    fn tabulated_quantile_inverts_cdf() {
        let law = TabulatedLaw::new(
            Arc::new(|x: f64| -0.5 * x * x),
            -14.0,
            14.0,
            &[],
            200,
        )
        .unwrap();
        assert!((law.log_mass() - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        for u in [1e-9, 0.01, 0.3, 0.5, 0.77, 0.999999] {
            let x = law.quantile(u).unwrap();
            assert!((law.cdf(x) - u).abs() < 1e-11, "u = {u}");
            assert!((crate::numeric::std_normal_cdf(x) - u).abs() < 1e-11);
        }
    }
}
