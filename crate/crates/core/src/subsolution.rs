//! Affine subsolutions of the Isaacs equations, their mollified mixtures,
//! and numerical verification of the subsolution inequalities.

use std::io::Write;

use crate::convex::{maximize_concave, phi2, solve_saddle, ConcaveEval};
use crate::distributions::TiltableDistribution;
use crate::error::{check_len, Error, Result};
use crate::model::{MgfConfig, Model, PushForwardLaw};
use crate::numeric::{dot, norm};
use crate::objective::{PhiMode, SmoothingPhi};

/// Which input receives the change of measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Tilts of `X` by `a ∈ R^h`.
    X,
    /// Tilts of `U = G(X, θ)` by `α ∈ R^m`.
    U,
}

/// The part of `φ = min(φ₁, φ₂)` a member must stay below at `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalPart {
    /// `φ₁ ≡ Λε²`.
    Cap,
    /// `φ₂(y) = Λ‖min(y, 0)‖²`, or the indicator of `A^c` in indicator mode.
    Quadratic,
    /// The full `φ`.
    Full,
}

/// `W(y, t) = c̄ + <u, y> − (1 − t) v` together with its control.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSubsolution {
    pub cbar: f64,
    pub u: Vec<f64>,
    pub v: f64,
    pub control: Vec<f64>,
    pub scheme: Scheme,
    pub terminal: TerminalPart,
}

impl AffineSubsolution {
    pub fn value(&self, y: &[f64], t: f64) -> f64 {
        self.cbar + dot(&self.u, y) - (1.0 - t) * self.v
    }

    /// A member that applies the static tilt `control` everywhere.
    pub fn static_tilt(scheme: Scheme, control: Vec<f64>, m: usize) -> Self {
        Self {
            cbar: 0.0,
            u: vec![0.0; m],
            v: 0.0,
            control,
            scheme,
            terminal: TerminalPart::Full,
        }
    }
}

/// Mollified generalized subsolution/control built from `K` affine members.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedControl {
    members: Vec<AffineSubsolution>,
    delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlEval {
    pub w_delta: f64,
    pub rho: Vec<f64>,
}

impl GeneralizedControl {
    pub fn new(members: Vec<AffineSubsolution>, delta: f64) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidParameter("control needs at least one member".into()))?;
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidParameter("δ must be positive".into()));
        }
        for w in &members {
            if w.scheme != first.scheme {
                return Err(Error::InvalidParameter("members mix X and U tilts".into()));
            }
            check_len("member slope", first.u.len(), w.u.len())?;
            check_len("member control", first.control.len(), w.control.len())?;
        }
        Ok(Self { members, delta })
    }

    /// A single static tilt.
    pub fn static_tilt(scheme: Scheme, control: Vec<f64>, m: usize) -> Self {
        Self {
            members: vec![AffineSubsolution::static_tilt(scheme, control, m)],
            delta: 1.0,
        }
    }

    pub fn members(&self) -> &[AffineSubsolution] {
        &self.members
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn scheme(&self) -> Scheme {
        self.members[0].scheme
    }

    /// Dimension of the state `y`.
    pub fn state_dim(&self) -> usize {
        self.members[0].u.len()
    }

    pub fn control_dim(&self) -> usize {
        self.members[0].control.len()
    }

    /// `W̄(0, 0) = min_k W_k(0, 0)`.
    pub fn w_bar_origin(&self) -> f64 {
        self.members
            .iter()
            .map(|w| w.cbar - w.v)
            .fold(f64::INFINITY, f64::min)
    }

    /// Writes `log ρ^δ_k(y, t)` into `out` and returns `W^δ(y, t)`.
    pub fn log_rho_into(&self, y: &[f64], t: f64, out: &mut [f64]) -> f64 {
        let mut wmin = f64::INFINITY;
        for (k, w) in self.members.iter().enumerate() {
            out[k] = w.value(y, t);
            wmin = wmin.min(out[k]);
        }
        let mut s = 0.0;
        for o in out.iter_mut() {
            *o = -(*o - wmin) / self.delta;
            s += o.exp();
        }
        let ls = s.ln();
        for o in out.iter_mut() {
            *o -= ls;
        }
        wmin - self.delta * ls
    }

    pub fn evaluate(&self, y: &[f64], t: f64) -> ControlEval {
        let mut log_rho = vec![0.0; self.members.len()];
        let w_delta = self.log_rho_into(y, t, &mut log_rho);
        ControlEval {
            w_delta,
            rho: log_rho.iter().map(|l| l.exp()).collect(),
        }
    }

    /// CSV dump with columns `k, cbar, u..., v, control...`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let m = self.state_dim();
        let c = self.control_dim();
        let mut header = vec!["k".to_string(), "cbar".to_string()];
        header.extend((0..m).map(|i| format!("u{i}")));
        header.push("v".into());
        header.extend((0..c).map(|i| format!("control{i}")));
        writeln!(w, "{}", header.join(","))?;
        for (k, mem) in self.members.iter().enumerate() {
            let mut row = vec![k.to_string(), mem.cbar.to_string()];
            row.extend(mem.u.iter().map(f64::to_string));
            row.push(mem.v.to_string());
            row.extend(mem.control.iter().map(f64::to_string));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// `δ = max(0.01, 0.01 · W̄(0, 0))`.
pub fn default_delta(w_bar_origin: f64) -> f64 {
    (0.01 * w_bar_origin).max(0.01)
}

// ---------------------------------------------------------------------------
// Constructors
// ---------------------------------------------------------------------------

/// Optimal affine member for the X-tilt scheme.
///
/// With `σ = −u ≥ 0` and `c̄` at its largest feasible value
/// `−‖σ‖²/(8Λ)`, the program becomes the concave problem
/// `max_{a, σ ≥ 0} −‖σ‖²/(8Λ) − H(−a, σ) − H₁(a)`.
pub fn optimal_x_member(
    law: &PushForwardLaw,
    dist: &TiltableDistribution,
    phi: &SmoothingPhi,
) -> Result<AffineSubsolution> {
    let (h, m) = law.dims();
    check_len("distribution dimension", h, dist.dim())?;
    let q = match phi.mode {
        PhiMode::Smooth => 1.0 / (4.0 * phi.lambda),
        PhiMode::Indicator => 0.0,
    };
    let normal = dist.is_normal();
    let cov = dist.covariance();
    let mean = dist.mean();
    // H₁ and its derivatives: closed form for normal laws, cloud moments otherwise.
    let h1 = |a: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        if normal {
            let sa: Vec<f64> = (0..h).map(|i| dot(&cov[i * h..(i + 1) * h], a)).collect();
            let grad = (0..h).map(|i| mean[i] + sa[i]).collect();
            (dot(a, &mean) + 0.5 * dot(a, &sa), grad, cov.clone())
        } else {
            let mom = law.moments(Some(a), &vec![0.0; m]);
            let n = h + m;
            let hess = (0..h)
                .flat_map(|r| (0..h).map(move |c| (r, c)))
                .map(|(r, c)| mom.cov[r * n + c])
                .collect();
            (mom.log_mgf, mom.mean[..h].to_vec(), hess)
        }
    };
    let n = h + m;
    let split = |z: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let neg_a: Vec<f64> = z[..h].iter().map(|v| -v).collect();
        (neg_a, z[h..].to_vec())
    };
    let eval = |z: &[f64]| -> ConcaveEval {
        let (neg_a, sigma) = split(z);
        let mom = law.moments(Some(&neg_a), &sigma);
        let (h1v, h1g, h1h) = h1(&z[..h]);
        let mut gradient = vec![0.0; n];
        for i in 0..h {
            gradient[i] = mom.mean[i] - h1g[i];
        }
        for j in 0..m {
            gradient[h + j] = -mom.mean[h + j] - q * sigma[j];
        }
        let mut neg_hessian = mom.cov.clone();
        for r in 0..n {
            for c in 0..n {
                let cross = (r < h) != (c < h);
                if cross {
                    neg_hessian[r * n + c] = -neg_hessian[r * n + c];
                }
            }
        }
        for r in 0..h {
            for c in 0..h {
                neg_hessian[r * n + c] += h1h[r * h + c];
            }
        }
        for j in 0..m {
            neg_hessian[(h + j) * n + h + j] += q;
        }
        ConcaveEval {
            value: -0.5 * q * dot(&sigma, &sigma) - mom.log_mgf - h1v,
            gradient,
            neg_hessian,
        }
    };
    let value = |z: &[f64]| {
        let (neg_a, sigma) = split(z);
        -0.5 * q * dot(&sigma, &sigma) - law.log_mgf(Some(&neg_a), &sigma) - h1(&z[..h]).0
    };
    let nonneg: Vec<bool> = (0..n).map(|i| i >= h).collect();
    let (z, iterations, pg) = maximize_concave(&eval, &value, &vec![0.0; n], &nonneg);
    if !(pg <= 1e-8) {
        return Err(Error::NonConvergence {
            op: "X-scheme program",
            iterations,
            residual: pg,
        });
    }
    let (neg_a, sigma) = split(&z);
    let cbar = -0.5 * q * dot(&sigma, &sigma);
    let v = law.log_mgf(Some(&neg_a), &sigma) + h1(&z[..h]).0;
    Ok(AffineSubsolution {
        cbar,
        u: sigma.iter().map(|s| -s).collect(),
        v,
        control: z[..h].to_vec(),
        scheme: Scheme::X,
        terminal: TerminalPart::Quadratic,
    })
}

/// Generalized control for X-tilts: the constant cap member `W₁ ≡ 2Λε²`
/// (smooth mode only) plus the optimal affine member.
pub fn build_x_scheme(
    model: &Model,
    dist: &TiltableDistribution,
    theta: &[f64],
    phi: &SmoothingPhi,
    cfg: &MgfConfig,
) -> Result<GeneralizedControl> {
    let law = model.push_forward(dist, theta, cfg)?;
    build_x_scheme_from_law(&law, dist, phi)
}

pub fn build_x_scheme_from_law(
    law: &PushForwardLaw,
    dist: &TiltableDistribution,
    phi: &SmoothingPhi,
) -> Result<GeneralizedControl> {
    let (h, m) = law.dims();
    let mut members = Vec::new();
    if phi.mode == PhiMode::Smooth {
        members.push(AffineSubsolution {
            cbar: 2.0 * phi.cap(),
            u: vec![0.0; m],
            v: 0.0,
            control: vec![0.0; h],
            scheme: Scheme::X,
            terminal: TerminalPart::Cap,
        });
    }
    members.push(optimal_x_member(law, dist, phi)?);
    let w0 = members
        .iter()
        .map(|w| w.cbar - w.v)
        .fold(f64::INFINITY, f64::min);
    GeneralizedControl::new(members, default_delta(w0))
}

/// Generalized control for U-tilts built from the saddle points of
/// `inf_β [φ_k(β) + L₂^θ(β)]`.
pub fn build_u_scheme(
    model: &Model,
    dist: &TiltableDistribution,
    theta: &[f64],
    phi: &SmoothingPhi,
    cfg: &MgfConfig,
) -> Result<GeneralizedControl> {
    let law = model.push_forward(dist, theta, cfg)?;
    build_u_scheme_from_law(&law, phi)
}

pub fn build_u_scheme_from_law(law: &PushForwardLaw, phi: &SmoothingPhi) -> Result<GeneralizedControl> {
    let m = law.dims().1;
    let mut members = Vec::new();
    if phi.mode == PhiMode::Smooth {
        // β₁ = E[U] minimizes L₂, so α₁ = 0 and H₂(0) = 0.
        members.push(AffineSubsolution {
            cbar: 2.0 * phi.cap(),
            u: vec![0.0; m],
            v: 0.0,
            control: vec![0.0; m],
            scheme: Scheme::U,
            terminal: TerminalPart::Cap,
        });
    }
    let saddle = solve_saddle(law, phi.quadratic_weight(), None)?;
    let h2 = law.log_mgf_u(&saddle.alpha);
    members.push(AffineSubsolution {
        // 2[φ₂(β) + <α, β>] = 2[Φ + H₂(α)].
        cbar: 2.0 * (saddle.value + h2),
        u: saddle.alpha.iter().map(|a| -2.0 * a).collect(),
        v: 2.0 * h2,
        control: saddle.alpha.clone(),
        scheme: Scheme::U,
        terminal: TerminalPart::Quadratic,
    });
    let w0 = members
        .iter()
        .map(|w| w.cbar - w.v)
        .fold(f64::INFINITY, f64::min);
    GeneralizedControl::new(members, default_delta(w0))
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/// Grid of states `y` (and times `t`) on which inequalities are checked.
#[derive(Debug, Clone)]
pub struct SubsolutionGrid {
    pub y: Vec<Vec<f64>>,
    pub t: Vec<f64>,
}

impl SubsolutionGrid {
    /// Tensor grid with `per_axis` points on `[lo, hi]` per coordinate.
    pub fn regular(m: usize, lo: f64, hi: f64, per_axis: usize, t_points: usize) -> Self {
        let axis: Vec<f64> = (0..per_axis)
            .map(|i| lo + (hi - lo) * i as f64 / (per_axis.max(2) - 1) as f64)
            .collect();
        let mut y = vec![Vec::new()];
        for _ in 0..m {
            y = y
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |a| {
                        let mut q = p.clone();
                        q.push(*a);
                        q
                    })
                })
                .collect();
        }
        let t = (0..t_points)
            .map(|i| i as f64 / (t_points.max(2) - 1) as f64)
            .collect();
        Self { y, t }
    }
}

#[derive(Debug, Clone)]
pub struct SubsolutionReport {
    /// `v + inf ℍ`; must be `≥ −1e-6`. It does not depend on `(y, t)` for
    /// affine members.
    pub hamiltonian_slack: f64,
    /// Grid states where `W(y, 1) > 2φ_k(y)`, with the excess.
    pub terminal_violations: Vec<(Vec<f64>, f64)>,
    /// Global domination certificate from the affine/quadratic structure.
    pub analytic_tail: bool,
}

pub const SUBSOLUTION_TOL: f64 = 1e-6;

impl SubsolutionReport {
    pub fn passed(&self) -> bool {
        self.hamiltonian_slack >= -SUBSOLUTION_TOL && self.terminal_violations.is_empty()
    }
}

/// Checks the subsolution inequality and terminal domination for one member.
///
/// X-tilts: `v − H(−a, −u) − H₁(a) ≥ 0`, the closed form of
/// `v + inf_{b, β} ℍ(u, a, b, β)`. U-tilts: `v − H₂(−u − α) − H₂(α) ≥ 0`,
/// the closed form of `v + inf_β ℍ₂(u; α, β)`.
pub fn verify_subsolution(
    member: &AffineSubsolution,
    law: &PushForwardLaw,
    dist: &TiltableDistribution,
    phi: &SmoothingPhi,
    grid: &SubsolutionGrid,
) -> Result<SubsolutionReport> {
    let (h, m) = law.dims();
    check_len("member slope", m, member.u.len())?;
    let neg_u: Vec<f64> = member.u.iter().map(|v| -v).collect();
    let hamiltonian_slack = match member.scheme {
        Scheme::X => {
            check_len("member control", h, member.control.len())?;
            let neg_a: Vec<f64> = member.control.iter().map(|v| -v).collect();
            member.v - law.log_mgf(Some(&neg_a), &neg_u) - dist.log_mgf_x(&member.control)?
        }
        Scheme::U => {
            check_len("member control", m, member.control.len())?;
            let shifted: Vec<f64> = (0..m).map(|i| neg_u[i] - member.control[i]).collect();
            member.v - law.log_mgf_u(&shifted) - law.log_mgf_u(&member.control)
        }
    };
    let bound = |y: &[f64]| -> f64 {
        match (member.terminal, phi.mode) {
            (TerminalPart::Cap, _) => 2.0 * phi.cap(),
            (TerminalPart::Quadratic, PhiMode::Smooth) => 2.0 * phi2(phi.lambda, y),
            (TerminalPart::Quadratic, PhiMode::Indicator) => 2.0 * phi2(f64::INFINITY, y),
            (TerminalPart::Full, _) => 2.0 * phi.phi(y),
        }
    };
    let terminal_violations = grid
        .y
        .iter()
        .filter_map(|y| {
            let excess = member.value(y, 1.0) - bound(y);
            (excess > 1e-9).then(|| (y.clone(), excess))
        })
        .collect();
    let nonpos_u = member.u.iter().all(|v| *v <= 0.0);
    let analytic_tail = match (member.terminal, phi.mode) {
        (TerminalPart::Cap, _) => norm(&member.u) == 0.0 && member.cbar <= 2.0 * phi.cap(),
        (TerminalPart::Quadratic, PhiMode::Smooth) => {
            nonpos_u
                && member.cbar <= 0.0
                && member.cbar + dot(&member.u, &member.u) / (8.0 * phi.lambda) <= 1e-12
        }
        (TerminalPart::Quadratic, PhiMode::Indicator) => nonpos_u && member.cbar <= 0.0,
        (TerminalPart::Full, _) => false,
    };
    Ok(SubsolutionReport {
        hamiltonian_slack,
        terminal_violations,
        analytic_tail,
    })
}
