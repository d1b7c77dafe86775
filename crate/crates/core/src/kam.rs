//! Quantitative KAM smallness condition, derived scales and measure budgets.

use std::f64::consts::PI;

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KamInput {
    pub n: u32,
    /// Sup of the Hessian operator norm over the widened domain.
    pub m_hess: f64,
    /// Inf of `|det h_yy|` over the domain.
    pub d_det: f64,
    /// Sup of the perturbation.
    pub eps0: f64,
    pub r: f64,
    pub s: f64,
    pub tau: f64,
    pub diam: f64,
    /// Placeholder for the theorem's constant; the ratio is reported so any
    /// other value can be applied afterwards.
    pub c_kam: f64,
}

impl KamInput {
    pub fn new(m_hess: f64, d_det: f64, eps0: f64, r: f64, s: f64, diam: f64) -> Self {
        Self {
            n: 2,
            m_hess,
            d_det,
            eps0,
            r,
            s,
            tau: 1.5,
            diam,
            c_kam: 1e-3,
        }
    }

    pub fn mu(&self) -> f64 {
        self.d_det / self.m_hess.powi(self.n as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KamCertificate {
    pub mu: f64,
    pub epsilon: f64,
    /// `epsilon / (mu^8 s^{4 tau + 8})`; the condition reads `ratio <= c`.
    pub ratio: f64,
    pub satisfied: bool,
    pub alpha: f64,
    pub r_hat: f64,
    pub r_eps: f64,
    pub measure_constant: f64,
    pub measure_bound: f64,
}

pub fn evaluate(input: &KamInput) -> Result<KamCertificate> {
    let KamInput {
        n,
        m_hess,
        d_det,
        eps0,
        r,
        s,
        tau,
        diam,
        c_kam,
    } = *input;
    if n < 2 {
        return Err(invalid("dimension must be at least 2"));
    }
    if !(m_hess > 0.0 && m_hess.is_finite()) {
        return Err(invalid(format!("Hessian bound M = {m_hess} must be positive and finite")));
    }
    if !(d_det > 0.0 && d_det.is_finite()) {
        return Err(invalid(format!("determinant bound d = {d_det} must be positive")));
    }
    if !(eps0 >= 0.0 && eps0.is_finite()) {
        return Err(invalid(format!("perturbation size {eps0} must be finite and nonnegative")));
    }
    if !(r > 0.0 && s > 0.0) {
        return Err(invalid("widths r and s must be positive"));
    }
    if !(tau > (n - 1) as f64) {
        return Err(invalid(format!("tau = {tau} must exceed n - 1")));
    }
    if !(c_kam > 0.0 && c_kam < 1.0) {
        return Err(invalid("the KAM constant must lie in (0, 1)"));
    }
    if !(diam >= 0.0) {
        return Err(invalid("domain diameter must be nonnegative"));
    }
    let mu = input.mu();
    if mu > 1.0 + 1e-12 {
        return Err(invalid(format!("mu = d/M^n = {mu} exceeds 1")));
    }
    let mu = mu.min(1.0);
    let nf = n as f64;
    let epsilon = eps0 / (m_hess * r * r);
    let ratio = epsilon / (mu.powi(8) * s.powf(4.0 * tau + 8.0));
    let s_pow = s.powf(3.0 * tau + 6.0);
    let measure_constant =
        (mu * mu * r).max(diam).powf(nf) / (c_kam * mu.powf(nf + 5.0) * s_pow);
    Ok(KamCertificate {
        mu,
        epsilon,
        ratio,
        satisfied: ratio <= c_kam,
        alpha: m_hess * r / (mu * s_pow) * epsilon.sqrt(),
        r_hat: mu * mu * r,
        r_eps: epsilon.sqrt() * r / (c_kam * mu),
        measure_constant,
        measure_bound: measure_constant * epsilon.sqrt(),
    })
}

/// `(M, d)`: sup of operator norms and inf of `|det|` over symmetric Hessian
/// samples.
pub fn hessian_bounds(samples: &[Matrix2<f64>]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(invalid("no Hessian samples"));
    }
    let mut m: f64 = 0.0;
    let mut d = f64::INFINITY;
    for h in samples {
        let eig = h.symmetric_eigenvalues();
        m = m.max(eig[0].abs()).max(eig[1].abs());
        d = d.min(h.determinant().abs());
    }
    Ok((m, d))
}

/// Relative non-torus bound on the non-resonant zone, `exp(-s/(6 eps^a))`.
pub fn budget_d0(s: f64, eps: f64, a: f64) -> Result<f64> {
    check_exponent(a)?;
    if !(s > 0.0 && eps > 0.0) {
        return Err(invalid("s and eps must be positive"));
    }
    Ok((-s / (6.0 * eps.powf(a))).exp())
}

fn check_exponent(a: f64) -> Result<()> {
    if !(a > 0.0 && a < 1.0 / 6.0) {
        return Err(invalid(format!("exponent a = {a} must lie in (0, 1/6)")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    /// Twist threshold `exp(-c2/eps^a)` used on the resonant zones.
    pub theta: f64,
    /// Phase-space volume of the annulus times the 2-torus.
    pub volume: f64,
    pub non_resonant: f64,
    pub resonant: f64,
    pub total: f64,
}

/// Non-torus measure bound on `D x T^2`: the non-resonant budget plus `2 theta`
/// per unit volume on the resonant zones.
pub fn budget_total(eps: f64, a: f64, r: f64, r_outer: f64, s: f64, c2: f64) -> Result<Budget> {
    check_exponent(a)?;
    if !(0.0 < r && r < r_outer) {
        return Err(invalid("annulus radii must satisfy 0 < r < R"));
    }
    if !(c2 > 0.0) {
        return Err(invalid("c2 must be positive"));
    }
    let volume = PI * (r_outer * r_outer - r * r) * 4.0 * PI * PI;
    let theta = (-c2 / eps.powf(a)).exp();
    let non_resonant = volume * budget_d0(s, eps, a)?;
    let resonant = volume * 2.0 * theta;
    Ok(Budget {
        theta,
        volume,
        non_resonant,
        resonant,
        total: non_resonant + resonant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_hamiltonian_certifies_trivially() {
        let c = evaluate(&KamInput::new(1.0, 1.0, 0.0, 1.0, 1.0, 2.0)).unwrap();
        assert_eq!(c.epsilon, 0.0);
        assert!(c.satisfied);
        assert_eq!(c.measure_bound, 0.0);
        assert_eq!(c.mu, 1.0);
    }

    #[test]
    fn doubling_r_quarters_epsilon() {
        let a = evaluate(&KamInput::new(1.3, 1.0, 1e-6, 1.0, 1.0, 2.0)).unwrap();
        let b = evaluate(&KamInput::new(1.3, 1.0, 1e-6, 2.0, 1.0, 2.0)).unwrap();
        assert!((a.epsilon / b.epsilon - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_inconsistent_inputs() {
        assert!(evaluate(&KamInput::new(1.0, 2.0, 1e-6, 1.0, 1.0, 1.0)).is_err());
        assert!(evaluate(&KamInput::new(1.0, 1.0, 1e-6, 0.0, 1.0, 1.0)).is_err());
        let mut i = KamInput::new(1.0, 1.0, 1e-6, 1.0, 1.0, 1.0);
        i.tau = 1.0;
        assert!(evaluate(&i).is_err());
    }

    #[test]
    fn derived_scales_match_formulas() {
        let mut i = KamInput::new(2.0, 1.0, 1e-8, 0.5, 0.8, 3.0);
        i.tau = 2.0;
        let c = evaluate(&i).unwrap();
        let mu: f64 = 0.25;
        let eps = 1e-8 / (2.0 * 0.25);
        assert!((c.epsilon - eps).abs() < 1e-22);
        assert!((c.alpha - 2.0 * 0.5 / (mu * 0.8f64.powf(12.0)) * eps.sqrt()).abs() < 1e-15);
        assert!((c.r_hat - mu * mu * 0.5).abs() < 1e-15);
        let cc = 3.0f64.powi(2) / (1e-3 * mu.powi(7) * 0.8f64.powf(12.0));
        assert!((c.measure_constant / cc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn d0_budget_value() {
        let b = budget_d0(1.0, 1e-3, 0.1).unwrap();
        let oracle = (-(10f64.powf(0.3)) / 6.0).exp();
        assert!((b - oracle).abs() <= f64::EPSILON * oracle);
        assert!((b - 0.7170).abs() < 1e-4);
        assert!(budget_d0(2.0, 1e-3, 0.1).unwrap() < b);
        assert!(budget_d0(1.0, 1e-3, 0.2).is_err());
    }

    #[test]
    fn total_budget_shrinks_with_c2() {
        let a = budget_total(1e-4, 0.1, 0.5, 2.0, 1.0, 0.1).unwrap();
        let b = budget_total(1e-4, 0.1, 0.5, 2.0, 1.0, 0.3).unwrap();
        assert!(b.total < a.total);
        assert!((a.volume - PI * 3.75 * 4.0 * PI * PI).abs() < 1e-12);
    }
}
