//! The design map `G(x, θ)`, its θ-Jacobian, and the discretized joint law
//! of `(X, G(X, θ))` used for every log-MGF evaluation.

use std::sync::Arc;

use crate::distributions::TiltableDistribution;
use crate::error::{check_finite, check_len, Error, Result};
use crate::numeric::{dot, std_normal_log_pdf};
use crate::quadrature::CompositeRule;
use crate::rng::RandomStream;

/// `G(x, θ)` written into `out` (length `m`).
pub type MapFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `∂G/∂θ (x, θ)` written row-major into `out` (length `m·d`).
pub type JacobianFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Kink locations of `G(·, θ)` along each input coordinate.
pub type KinkFn = Arc<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync>;

#[derive(Clone)]
pub struct CustomMap {
    pub h: usize,
    pub m: usize,
    pub d: usize,
    pub g: MapFn,
    pub jacobian: JacobianFn,
    pub kinks: Option<KinkFn>,
}

#[derive(Clone)]
pub enum ModelFamily {
    /// `G_i(x, θ) = (x_i − θ_i)⁺ − b_i (c_i − θ_i)`, with `h = m = d`.
    HingeComponentwise { b: Vec<f64>, c: Vec<f64> },
    /// `G(x, θ) = fᵀ(x − θ)⁺ − bᵀ(c − θ)`, with `m = 1` and `h = d`.
    HingeAggregate { f: Vec<f64>, b: Vec<f64>, c: Vec<f64> },
    /// `G(x, θ) = x − θ`.
    Linear { dim: usize },
    Custom(CustomMap),
}

impl std::fmt::Debug for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::HingeComponentwise { b, c } => f
                .debug_struct("HingeComponentwise")
                .field("b", b)
                .field("c", c)
                .finish(),
            Self::HingeAggregate { f: w, b, c } => f
                .debug_struct("HingeAggregate")
                .field("f", w)
                .field("b", b)
                .field("c", c)
                .finish(),
            Self::Linear { dim } => f.debug_struct("Linear").field("dim", dim).finish(),
            Self::Custom(c) => write!(f, "Custom(h={}, m={}, d={})", c.h, c.m, c.d),
        }
    }
}

/// Box-shaped feasible set `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ThetaBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_len("box upper bound", lo.len(), hi.len())?;
        check_finite("box bounds", &lo)?;
        check_finite("box bounds", &hi)?;
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(Error::InvalidModel("box has lo > hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(t, (l, h))| *t >= *l && *t <= *h)
    }

    pub fn project(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(t, (l, h))| t.clamp(*l, *h))
            .collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub h: usize,
    pub m: usize,
    pub d: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    family: ModelFamily,
    theta_box: ThetaBox,
    dims: Dims,
}

impl Model {
    pub fn new(family: ModelFamily, theta_box: ThetaBox) -> Result<Self> {
        let dims = match &family {
            ModelFamily::HingeComponentwise { b, c } => {
                check_len("hinge parameter c", b.len(), c.len())?;
                check_finite("b", b)?;
                check_finite("c", c)?;
                Dims {
                    h: b.len(),
                    m: b.len(),
                    d: b.len(),
                }
            }
            ModelFamily::HingeAggregate { f, b, c } => {
                check_len("hinge parameter b", f.len(), b.len())?;
                check_len("hinge parameter c", f.len(), c.len())?;
                check_finite("f", f)?;
                check_finite("b", b)?;
                check_finite("c", c)?;
                Dims {
                    h: f.len(),
                    m: 1,
                    d: f.len(),
                }
            }
            ModelFamily::Linear { dim } => Dims {
                h: *dim,
                m: *dim,
                d: *dim,
            },
            ModelFamily::Custom(c) => Dims {
                h: c.h,
                m: c.m,
                d: c.d,
            },
        };
        if dims.h == 0 || dims.m == 0 || dims.d == 0 {
            return Err(Error::InvalidModel("dimensions must be positive".into()));
        }
        check_len("box dimension", dims.d, theta_box.dim())?;
        Ok(Self {
            family,
            theta_box,
            dims,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn family(&self) -> &ModelFamily {
        &self.family
    }

    pub fn theta_box(&self) -> &ThetaBox {
        &self.theta_box
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        check_len("theta", self.dims.d, theta.len())?;
        if !self.theta_box.contains(theta) {
            return Err(Error::InvalidParameter(format!(
                "theta {theta:?} lies outside the feasible box"
            )));
        }
        Ok(())
    }

    pub fn eval_g(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        check_len("x", self.dims.h, x.len())?;
        self.check_theta(theta)?;
        let mut out = vec![0.0; self.dims.m];
        self.eval_g_into(x, theta, &mut out);
        Ok(out)
    }

    /// Unchecked `G(x, θ)` for hot loops.
    pub fn eval_g_into(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        match &self.family {
            ModelFamily::HingeComponentwise { b, c } => {
                for i in 0..b.len() {
                    out[i] = (x[i] - theta[i]).max(0.0) - b[i] * (c[i] - theta[i]);
                }
            }
            ModelFamily::HingeAggregate { f, b, c } => {
                let mut acc = 0.0;
                for i in 0..f.len() {
                    acc += f[i] * (x[i] - theta[i]).max(0.0) - b[i] * (c[i] - theta[i]);
                }
                out[0] = acc;
            }
            ModelFamily::Linear { dim } => {
                for i in 0..*dim {
                    out[i] = x[i] - theta[i];
                }
            }
            ModelFamily::Custom(c) => (c.g)(x, theta, out),
        }
    }

    /// θ-Jacobian (row-major `m × d`); the hinge derivative at `x_i = θ_i` is 0.
    pub fn grad_theta_g(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        check_len("x", self.dims.h, x.len())?;
        self.check_theta(theta)?;
        let mut out = vec![0.0; self.dims.m * self.dims.d];
        self.jacobian_into(x, theta, &mut out);
        Ok(out)
    }

    /// Unchecked Jacobian for hot loops; overwrites `out`.
    pub fn jacobian_into(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        match &self.family {
            ModelFamily::HingeComponentwise { b, .. } => {
                let d = b.len();
                out.fill(0.0);
                for i in 0..d {
                    let active = if x[i] > theta[i] { -1.0 } else { 0.0 };
                    out[i * d + i] = active + b[i];
                }
            }
            ModelFamily::HingeAggregate { f, b, .. } => {
                for i in 0..f.len() {
                    let active = if x[i] > theta[i] { -f[i] } else { 0.0 };
                    out[i] = active + b[i];
                }
            }
            ModelFamily::Linear { dim } => {
                out.fill(0.0);
                for i in 0..*dim {
                    out[i * dim + i] = -1.0;
                }
            }
            ModelFamily::Custom(c) => (c.jacobian)(x, theta, out),
        }
    }

    /// Kinks of `G(·, θ)` along each input coordinate, used as quadrature
    /// breakpoints.
    pub fn kinks(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        match &self.family {
            ModelFamily::HingeComponentwise { .. } | ModelFamily::HingeAggregate { .. } => {
                theta.iter().map(|t| vec![*t]).collect()
            }
            ModelFamily::Linear { dim } => vec![Vec::new(); *dim],
            ModelFamily::Custom(c) => match &c.kinks {
                Some(k) => k(theta),
                None => vec![Vec::new(); c.h],
            },
        }
    }

    /// Discretized joint law of `(X, G(X, θ))`.
    pub fn push_forward(
        &self,
        dist: &TiltableDistribution,
        theta: &[f64],
        cfg: &MgfConfig,
    ) -> Result<PushForwardLaw> {
        check_len("distribution dimension", self.dims.h, dist.dim())?;
        self.check_theta(theta)?;
        let (x, log_w) = input_cloud(dist, &self.kinks(theta), cfg)?;
        let (h, m) = (self.dims.h, self.dims.m);
        let points = log_w.len();
        let mut u = vec![0.0; points * m];
        for i in 0..points {
            self.eval_g_into(&x[i * h..(i + 1) * h], theta, &mut u[i * m..(i + 1) * m]);
        }
        Ok(PushForwardLaw { h, m, x, u, log_w })
    }

    /// `H₂^θ(α) = log E[exp(<α, G(X, θ)>)]`.
    pub fn log_mgf_u(
        &self,
        dist: &TiltableDistribution,
        theta: &[f64],
        alpha: &[f64],
        cfg: &MgfConfig,
    ) -> Result<f64> {
        check_len("alpha", self.dims.m, alpha.len())?;
        Ok(self.push_forward(dist, theta, cfg)?.log_mgf_u(alpha))
    }

    /// `H(a, α) = log E[exp(<a, X> + <α, G(X, θ)>)]`.
    pub fn joint_log_mgf(
        &self,
        dist: &TiltableDistribution,
        theta: &[f64],
        a: &[f64],
        alpha: &[f64],
        cfg: &MgfConfig,
    ) -> Result<f64> {
        check_len("a", self.dims.h, a.len())?;
        check_len("alpha", self.dims.m, alpha.len())?;
        Ok(self.push_forward(dist, theta, cfg)?.log_mgf(Some(a), alpha))
    }
}

// ---------------------------------------------------------------------------
// MGF backends
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MgfBackend {
    /// Quadrature for `h ≤ 2`, sample average otherwise.
    Auto,
    Quadrature,
    SampleAverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MgfConfig {
    pub backend: MgfBackend,
    /// Half-width of the quadrature window in standard deviations.
    pub quad_half_width: f64,
    pub quad_panels: usize,
    pub quad_order: usize,
    pub saa_samples: usize,
    pub saa_seed: u64,
}

pub const DEFAULT_SAA_SEED: u64 = 0x5eed_5aa0_0000_0001;

impl Default for MgfConfig {
    fn default() -> Self {
        Self {
            backend: MgfBackend::Auto,
            quad_half_width: 12.0,
            quad_panels: 24,
            quad_order: 12,
            saa_samples: 200_000,
            saa_seed: DEFAULT_SAA_SEED,
        }
    }
}

fn input_cloud(
    dist: &TiltableDistribution,
    kinks: &[Vec<f64>],
    cfg: &MgfConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = dist.dim();
    let quadrature = match cfg.backend {
        MgfBackend::Auto => h <= 2,
        MgfBackend::Quadrature => {
            if h > 2 {
                return Err(Error::UnsupportedDimension(format!(
                    "quadrature backend supports h <= 2, got h = {h}"
                )));
            }
            true
        }
        MgfBackend::SampleAverage => false,
    };
    let (x, mut log_w) = if quadrature {
        if h == 1 {
            let (lo, hi) = dist.window_1d(cfg.quad_half_width);
            let rule = CompositeRule::new(lo, hi, &kinks[0], cfg.quad_panels, cfg.quad_order);
            let mut lw = Vec::with_capacity(rule.nodes.len());
            for (x, w) in rule.nodes.iter().zip(&rule.weights) {
                lw.push(w.ln() + dist.log_density_1d(*x)?);
            }
            (rule.nodes, lw)
        } else {
            bivariate_normal_cloud(dist, kinks, cfg)?
        }
    } else {
        if !dist.is_normal() {
            return Err(Error::UnsupportedDimension(
                "sample-average backend requires a normal input law".into(),
            ));
        }
        let n = cfg.saa_samples.max(1);
        let mut stream = RandomStream::new(cfg.saa_seed, 0);
        let sampler = dist.tilt_sampler(&vec![0.0; h])?;
        let mut x = vec![0.0; n * h];
        for i in 0..n {
            sampler.sample(&mut stream, &mut x[i * h..(i + 1) * h])?;
        }
        (x, vec![-(n as f64).ln(); n])
    };
    let total = crate::numeric::log_sum_exp(&log_w);
    if !total.is_finite() {
        return Err(Error::NumericFailure("input cloud has no mass".into()));
    }
    for w in &mut log_w {
        *w -= total;
    }
    Ok((x, log_w))
}

/// Iterated conditional quadrature for a bivariate normal input.
fn bivariate_normal_cloud(
    dist: &TiltableDistribution,
    kinks: &[Vec<f64>],
    cfg: &MgfConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !dist.is_normal() {
        return Err(Error::UnsupportedDimension(
            "bivariate quadrature requires a normal input law".into(),
        ));
    }
    let mu = dist.mean();
    let s = dist.covariance();
    let sd1 = s[0].sqrt();
    let slope = s[1] / s[0];
    let sd2 = (s[3] - s[1] * s[1] / s[0]).sqrt();
    let k = cfg.quad_half_width;
    let outer = CompositeRule::new(mu[0] - k * sd1, mu[0] + k * sd1, &kinks[0], cfg.quad_panels, cfg.quad_order);
    let mut x = Vec::new();
    let mut lw = Vec::new();
    for (x1, w1) in outer.nodes.iter().zip(&outer.weights) {
        let lw1 = w1.ln() + std_normal_log_pdf((x1 - mu[0]) / sd1) - sd1.ln();
        let m2 = mu[1] + slope * (x1 - mu[0]);
        let inner = CompositeRule::new(m2 - k * sd2, m2 + k * sd2, &kinks[1], cfg.quad_panels, cfg.quad_order);
        for (x2, w2) in inner.nodes.iter().zip(&inner.weights) {
            x.push(*x1);
            x.push(*x2);
            lw.push(lw1 + w2.ln() + std_normal_log_pdf((x2 - m2) / sd2) - sd2.ln());
        }
    }
    Ok((x, lw))
}

// ---------------------------------------------------------------------------
// Push-forward law
// ---------------------------------------------------------------------------

/// Weighted point cloud representing the joint law of `(X, U = G(X, θ))`.
#[derive(Debug, Clone)]
pub struct PushForwardLaw {
    h: usize,
    m: usize,
    x: Vec<f64>,
    u: Vec<f64>,
    /// Normalized log-weights (log-sum-exp is 0).
    log_w: Vec<f64>,
}

/// Value, mean and covariance of the tilted law of the stacked vector
/// `(X, U)` (or `U` alone).
#[derive(Debug, Clone)]
pub struct TiltedMoments {
    pub log_mgf: f64,
    pub mean: Vec<f64>,
    /// Row-major covariance.
    pub cov: Vec<f64>,
}

impl PushForwardLaw {
    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.m)
    }

    pub fn len(&self) -> usize {
        self.log_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_w.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.h..(i + 1) * self.h]
    }

    pub fn u(&self, i: usize) -> &[f64] {
        &self.u[i * self.m..(i + 1) * self.m]
    }

    fn exponents(&self, a: Option<&[f64]>, alpha: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let mut e = self.log_w[i] + dot(alpha, self.u(i));
                if let Some(a) = a {
                    e += dot(a, self.x(i));
                }
                e
            })
            .collect()
    }

    /// `H(a, α)`, or `H₂(α)` when `a` is `None`.
    pub fn log_mgf(&self, a: Option<&[f64]>, alpha: &[f64]) -> f64 {
        crate::numeric::log_sum_exp(&self.exponents(a, alpha))
    }

    pub fn log_mgf_u(&self, alpha: &[f64]) -> f64 {
        self.log_mgf(None, alpha)
    }

    /// Normalized probabilities of the cloud points under the tilt.
    pub fn tilted_probabilities(&self, a: Option<&[f64]>, alpha: &[f64]) -> (f64, Vec<f64>) {
        let e = self.exponents(a, alpha);
        let value = crate::numeric::log_sum_exp(&e);
        (value, e.iter().map(|v| (v - value).exp()).collect())
    }

    pub fn mean_u(&self) -> Vec<f64> {
        self.moments(None, &vec![0.0; self.m]).mean
    }

    /// Moments of `U` (when `a` is `None`) or of `(X, U)` under the tilt.
    pub fn moments(&self, a: Option<&[f64]>, alpha: &[f64]) -> TiltedMoments {
        let with_x = a.is_some();
        let dim = if with_x { self.h + self.m } else { self.m };
        let (log_mgf, p) = self.tilted_probabilities(a, alpha);
        let mut v = vec![0.0; dim];
        let fill = |i: usize, v: &mut [f64]| {
            if with_x {
                v[..self.h].copy_from_slice(self.x(i));
                v[self.h..].copy_from_slice(self.u(i));
            } else {
                v.copy_from_slice(self.u(i));
            }
        };
        let mut mean = vec![0.0; dim];
        for (i, pi) in p.iter().enumerate() {
            fill(i, &mut v);
            for k in 0..dim {
                mean[k] += pi * v[k];
            }
        }
        let mut cov = vec![0.0; dim * dim];
        for (i, pi) in p.iter().enumerate() {
            fill(i, &mut v);
            for k in 0..dim {
                v[k] -= mean[k];
            }
            for r in 0..dim {
                let pr = pi * v[r];
                for c in r..dim {
                    cov[r * dim + c] += pr * v[c];
                }
            }
        }
        for r in 0..dim {
            for c in 0..r {
                cov[r * dim + c] = cov[c * dim + r];
            }
        }
        TiltedMoments { log_mgf, mean, cov }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example1() -> Model {
        Model::new(
            ModelFamily::HingeComponentwise {
                b: vec![0.4],
                c: vec![1.5],
            },
            ThetaBox::new(vec![0.0], vec![1.5]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn hinge_values_and_jacobian() {
        let m = example1();
        assert!((m.eval_g(&[1.0], &[0.6]).unwrap()[0] - 0.04).abs() < 1e-15);
        assert!((m.grad_theta_g(&[1.0], &[0.6]).unwrap()[0] + 0.6).abs() < 1e-15);
        assert!((m.grad_theta_g(&[0.1], &[0.6]).unwrap()[0] - 0.4).abs() < 1e-15);
        assert!((m.grad_theta_g(&[0.6], &[0.6]).unwrap()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn rejects_theta_outside_box() {
        let m = example1();
        assert!(m.eval_g(&[0.0], &[2.0]).is_err());
        assert!(matches!(
            m.eval_g(&[0.0, 1.0], &[0.5]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn example1_log_mgf_matches_closed_form() {
        // E exp(α (X − θ)⁺) = Φ(θ) + exp(−αθ + α²/2) Φ(α − θ) for X ~ N(0, 1).
        use crate::numeric::std_normal_cdf as cdf;
        let m = example1();
        let d = TiltableDistribution::standard_normal(1);
        for (theta, alpha) in [(0.0, 1.0), (0.6, 0.8), (1.4, -2.0), (0.3, 3.0)] {
            let shift = -alpha * 0.4 * (1.5 - theta);
            let exact = shift
                + (cdf(theta) + (-alpha * theta + 0.5 * alpha * alpha).exp() * cdf(alpha - theta)).ln();
            let v = m
                .log_mgf_u(&d, &[theta], &[alpha], &MgfConfig::default())
                .unwrap();
            assert!((v - exact).abs() < 1e-12, "θ={theta} α={alpha}: {v} vs {exact}");
        }
    }
}
