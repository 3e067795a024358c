//! Independent numerical oracles shared by the integration tests. Nothing here
//! calls into the library's quadrature or log-MGF code.

#![allow(dead_code)]

use std::f64::consts::{PI, SQRT_2};

pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

pub fn norm_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / SQRT_2)
}

pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// `Φ(b) − Φ(a)` without cancellation in either tail.
pub fn norm_mass(a: f64, b: f64) -> f64 {
    if a >= b {
        return 0.0;
    }
    if a > 0.0 {
        norm_sf(a) - norm_sf(b)
    } else {
        norm_cdf(b) - norm_cdf(a)
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration on `P_n`.
pub fn legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        loop {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                let (mut q0, mut q1) = (1.0, z);
                for k in 2..=n {
                    let q2 = ((2 * k - 1) as f64 * z * q1 - (k - 1) as f64 * q0) / k as f64;
                    q0 = q1;
                    q1 = q2;
                }
                let d = n as f64 * (z * q1 - q0) / (z * z - 1.0);
                x[i] = z;
                w[i] = 2.0 / ((1.0 - z * z) * d * d);
                break;
            }
        }
    }
    (x, w)
}

/// Composite Gauss–Legendre over `[a, b]` split at `breaks`, each piece cut
/// into `panels` panels of the given order.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, breaks: &[f64], panels: usize, order: usize) -> f64 {
    let (x, w) = legendre_rule(order);
    let mut edges: Vec<f64> = std::iter::once(a)
        .chain(breaks.iter().copied().filter(|t| *t > a && *t < b))
        .chain(std::iter::once(b))
        .collect();
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    let mut total = 0.0;
    for e in edges.windows(2) {
        let h = (e[1] - e[0]) / panels as f64;
        for p in 0..panels {
            let lo = e[0] + p as f64 * h;
            let (mid, half) = (lo + 0.5 * h, 0.5 * h);
            for (xi, wi) in x.iter().zip(&w) {
                total += wi * half * f(mid + half * xi);
            }
        }
    }
    total
}

/// Example-1 smoothing for the `n = 4` oracle; `lambda = None` is the
/// indicator of `{y ≥ 0}`.
#[derive(Clone, Copy)]
pub struct Smoothing {
    pub lambda: Option<f64>,
    pub eps: f64,
}

/// `E[exp(−4 φ(Y₄))]` for `Y₄ = (1/4) Σ (X_i − θ)⁺ − 0.4(1.5 − θ)`, `X_i ~ N(0, 1)`.
///
/// With `S = Σ (X_i − θ)⁺`, the number `k` of non-zero terms is binomial with
/// success probability `q = P(X > θ)` and the non-zero terms are normal
/// excesses over `θ`. The innermost excess is integrated in closed form and
/// the remaining `k − 1` by nested composite Gauss–Legendre.
pub fn example1_n4_truth(theta: f64, sm: Smoothing) -> f64 {
    let kappa = 0.4 * (1.5 - theta);
    let t2 = 4.0 * kappa;
    let t1 = 4.0 * (kappa - sm.eps);
    let q = norm_sf(theta);
    // f(t) for S = t.
    let f = |t: f64| -> f64 {
        match sm.lambda {
            None => {
                if t >= t2 {
                    1.0
                } else {
                    0.0
                }
            }
            Some(l) => {
                let y = (t / 4.0 - kappa).min(0.0);
                (-4.0 * l * (y * y).min(sm.eps * sm.eps)).exp()
            }
        }
    };
    // q · E[f(s + W)] for a single excess W, in closed form.
    let inner = |s: f64| -> f64 {
        let x2 = (t2 - s + theta).max(theta);
        let upper = norm_sf(x2);
        match sm.lambda {
            None => upper,
            Some(l) => {
                let x1 = (t1 - s + theta).max(theta);
                let low = (-4.0 * l * sm.eps * sm.eps).exp() * norm_mass(theta, x1);
                let c = l / 4.0;
                let m = t2 - s + theta;
                let r = (1.0 + 2.0 * c).sqrt();
                let mu = 2.0 * c * m / (1.0 + 2.0 * c);
                let mid = (-c * m * m / (1.0 + 2.0 * c)).exp() / r * norm_mass(r * (x1 - mu), r * (x2 - mu));
                upper + low + mid
            }
        }
    };
    let breaks_for = |s: f64| -> Vec<f64> {
        let mut b: Vec<f64> = [0.0, 0.02, 0.05, 0.1, 0.2, 0.4, 0.7, 1.0]
            .iter()
            .map(|r| t2 - r * (t2 - t1) - s)
            .collect();
        b.push(t2 - s - 0.5);
        b.push(t2 - s + 0.5);
        b
    };
    let excess_pdf = |w: f64| norm_pdf(theta + w);
    const HI: f64 = 12.0;
    // J_k(s) = q^k E[f(s + W_1 + … + W_k)].
    fn nest(
        k: usize,
        s: f64,
        inner: &dyn Fn(f64) -> f64,
        pdf: &dyn Fn(f64) -> f64,
        breaks_for: &dyn Fn(f64) -> Vec<f64>,
    ) -> f64 {
        if k == 1 {
            return inner(s);
        }
        integrate(
            &|w| pdf(w) * nest(k - 1, s + w, inner, pdf, breaks_for),
            0.0,
            HI,
            &breaks_for(s),
            6,
            10,
        )
    }
    let p0 = 1.0 - q;
    let binom = [1.0, 4.0, 6.0, 4.0, 1.0];
    let mut total = binom[0] * p0.powi(4) * f(0.0);
    for k in 1..=4 {
        total += binom[k] * p0.powi(4 - k as i32) * nest(k, 0.0, &inner, &excess_pdf, &breaks_for);
    }
    total
}

/// `(p, ∂p/∂θ, g^n, ∇g^n)` for `G(x, θ) = x − θ`, `X ~ N(0, 1)`, where
/// `Ȳ_n ~ N(−θ, 1/n)` and `p = E[exp(−nφ(Ȳ_n))]`.
pub fn linear_gradient_truth(theta: f64, n: usize, lambda: f64, eps: f64) -> (f64, f64, f64, f64) {
    let nf = n as f64;
    let sd = 1.0 / nf.sqrt();
    let phi = |y: f64| lambda * (y.min(0.0).powi(2)).min(eps * eps);
    let dphi = |y: f64| {
        if y < 0.0 && y * y < eps * eps {
            2.0 * lambda * y
        } else {
            0.0
        }
    };
    let dens = |y: f64| norm_pdf((y + theta) / sd) / sd;
    let lo = -theta - 12.0 * sd;
    let hi = -theta + 12.0 * sd;
    let br = [-eps, 0.0];
    let p = integrate(&|y| dens(y) * (-nf * phi(y)).exp(), lo, hi, &br, 40, 12);
    // ∂/∂θ E[e^{−nφ(Y)}] = E[e^{−nφ(Y)} · (−n φ'(Y)) · ∂Y/∂θ], ∂Y/∂θ = −1.
    let dp = integrate(&|y| dens(y) * (-nf * phi(y)).exp() * nf * dphi(y), lo, hi, &br, 40, 12);
    let g = -p.ln() / nf;
    (p, dp, g, -dp / (nf * p))
}
