//! Effective pendulum at a simple resonance.
//!
//! Near `y.k = 0` the averaged Hamiltonian `|y|^2/2 + eps G0(y) + eps G(y, k.x)`
//! is rescaled by `lambda = sqrt(2 |f_k| eps)` and written in a unimodular
//! frame whose second angle is `k.x`. With the transverse momentum `p1` as a
//! parameter this is a one degree of freedom system
//! `|k|^2 p2^2 / 2 + U(q2; p1)` with `U = W + cos(q2 + theta_k) + V`, whose
//! action-angle charts and twist are computed here.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fourier::{critical_points, GenericityConfig, OneDimProfile};
use crate::quadrature::integrate;
use crate::resonance::{extended_gcd, Generator, Vec2};

/// `kbar` with `kbar1 k2 - kbar2 k1 = 1`, shifted along `k` so that
/// `|kbar.k|` is minimal.
pub fn bezout_complement(k: Generator) -> [i64; 2] {
    let (k1, k2) = (k.k1(), k.k2());
    let (g, x, y) = extended_gcd(k2, -k1);
    debug_assert_eq!(g, 1);
    let t = (-((x * k1 + y * k2) as f64) / k.norm_sq() as f64).round() as i64;
    [x + t * k1, y + t * k2]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BezoutFrame {
    pub k: Generator,
    pub kbar: [i64; 2],
}

impl BezoutFrame {
    pub fn new(k: Generator) -> Self {
        Self {
            k,
            kbar: bezout_complement(k),
        }
    }

    /// Rows `kbar` and `k`.
    pub fn a_matrix(&self) -> [[i64; 2]; 2] {
        [self.kbar, self.k.as_array()]
    }

    pub fn det(&self) -> i64 {
        self.kbar[0] * self.k.k2() - self.kbar[1] * self.k.k1()
    }

    /// Off-diagonal entry `-kbar.k / |k|^2` of the shear `U = [[1, 0], [u, 1]]`.
    pub fn shear(&self) -> f64 {
        -((self.kbar[0] * self.k.k1() + self.kbar[1] * self.k.k2()) as f64) / self.k.norm_sq() as f64
    }

    /// Component of `kbar` orthogonal to `k`.
    pub fn perp_kbar(&self) -> Vec2 {
        let c = self.det() as f64 / self.k.norm_sq() as f64;
        [c * self.k.k2() as f64, -c * self.k.k1() as f64]
    }

    pub fn perp_sq(&self) -> f64 {
        let p = self.perp_kbar();
        p[0] * p[0] + p[1] * p[1]
    }

    /// `A^T U p = p1 perp(kbar) + p2 k`.
    pub fn actions(&self, p: Vec2) -> Vec2 {
        let v = self.perp_kbar();
        [
            p[0] * v[0] + p[1] * self.k.k1() as f64,
            p[0] * v[1] + p[1] * self.k.k2() as f64,
        ]
    }

    /// `q = U^T A x`; the second component is `k.x`.
    pub fn angles(&self, x: Vec2) -> Vec2 {
        let q1 = self.kbar[0] as f64 * x[0] + self.kbar[1] as f64 * x[1];
        let q2 = self.k.k1() as f64 * x[0] + self.k.k2() as f64 * x[1];
        [q1 + self.shear() * q2, q2]
    }
}

/// Averaged resonant potential in the original action variables.
pub trait ResonantModel: Send + Sync {
    /// Mean over the resonant angle.
    fn mean(&self, y: Vec2) -> f64;
    /// Harmonics `j >= 1` in the resonant angle; the function is real, so
    /// `c_{-j} = conj(c_j)`.
    fn harmonics(&self, y: Vec2) -> Vec<(i64, Complex64)>;
}

/// Action-independent resonant potential, e.g. the bare projection of `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenProfile {
    pub mean: f64,
    pub harmonics: Vec<(i64, Complex64)>,
}

impl FrozenProfile {
    pub fn from_profile(p: &OneDimProfile) -> Self {
        Self {
            mean: 0.0,
            harmonics: p.coeffs.iter().filter(|(j, _)| **j > 0).map(|(j, c)| (*j, *c)).collect(),
        }
    }
}

impl ResonantModel for FrozenProfile {
    fn mean(&self, _y: Vec2) -> f64 {
        self.mean
    }
    fn harmonics(&self, _y: Vec2) -> Vec<(i64, Complex64)> {
        self.harmonics.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Rotation with `p2 > 0`.
    Plus,
    /// Rotation with `p2 < 0`.
    Minus,
    Libration,
}

impl Region {
    pub fn is_rotation(self) -> bool {
        self != Region::Libration
    }

    fn name(self) -> &'static str {
        match self {
            Region::Plus => "plus",
            Region::Minus => "minus",
            Region::Libration => "libration",
        }
    }
}

const QUAD_TOL: f64 = 1e-13;

/// One degree of freedom system `kk p^2/2 + U(q)` at fixed `p1`.
#[derive(Debug, Clone)]
pub struct Reduced {
    pub kk: f64,
    pub w: f64,
    /// `(j, 2 c_j)` for `j >= 1`.
    terms: Vec<(f64, Complex64)>,
    /// Critical points sorted in `[0, 2 pi)` with their potential values.
    crit: Vec<(f64, f64)>,
    pub q_hyperbolic: f64,
    pub e_sep: f64,
    pub q_min: f64,
    pub e_min: f64,
}

impl Reduced {
    pub fn new(k: Generator, kk: f64, w: f64, harmonics: &[(i64, Complex64)]) -> Result<Self> {
        let mut coeffs = std::collections::BTreeMap::new();
        for &(j, c) in harmonics {
            if j <= 0 {
                return Err(invalid("resonant harmonics must have j >= 1"));
            }
            coeffs.insert(j, c);
            coeffs.insert(-j, c.conj());
        }
        let profile = OneDimProfile { k, coeffs };
        let terms: Vec<(f64, Complex64)> = harmonics.iter().map(|&(j, c)| (j as f64, 2.0 * c)).collect();
        let roots = critical_points(&profile, &GenericityConfig::default())
            .ok_or_else(|| Error::Numerical("critical points of the effective potential unresolved".into()))?;
        let mut red = Self {
            kk,
            w,
            terms,
            crit: vec![],
            q_hyperbolic: 0.0,
            e_sep: 0.0,
            q_min: 0.0,
            e_min: 0.0,
        };
        red.crit = roots.iter().map(|&q| (q, red.potential(q))).collect();
        let hyp = red
            .crit
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .ok_or(Error::NoHyperbolicPoint)?;
        let min = red
            .crit
            .iter()
            .copied()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .ok_or(Error::NoHyperbolicPoint)?;
        if !(red.d2potential(hyp.0) < 0.0) || hyp.1 - min.1 <= 0.0 {
            return Err(Error::NoHyperbolicPoint);
        }
        (red.q_hyperbolic, red.e_sep) = hyp;
        (red.q_min, red.e_min) = min;
        Ok(red)
    }

    pub fn potential(&self, q: f64) -> f64 {
        self.w
            + self
                .terms
                .iter()
                .map(|&(j, c)| (c * Complex64::from_polar(1.0, j * q)).re)
                .sum::<f64>()
    }

    pub fn dpotential(&self, q: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(j, c)| (c * Complex64::new(0.0, j) * Complex64::from_polar(1.0, j * q)).re)
            .sum()
    }

    pub fn d2potential(&self, q: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(j, c)| -(c * Complex64::from_polar(j * j, j * q)).re)
            .sum()
    }

    fn check_energy(&self, region: Region, e: f64) -> Result<()> {
        let ok = match region {
            Region::Libration => e > self.e_min && e <= self.e_sep,
            _ => e >= self.e_sep,
        };
        if ok && e.is_finite() {
            Ok(())
        } else {
            Err(Error::EnergyOutOfRange {
                energy: e,
                region: region.name().into(),
            })
        }
    }

    /// Turning points `a < q_min < b` of the librational loop at energy `e`.
    fn turning_points(&self, e: f64) -> Result<(f64, f64)> {
        let n = self.crit.len();
        let start = self
            .crit
            .iter()
            .position(|c| c.0 == self.q_min)
            .expect("minimum is a critical point");
        let find = |dir: i64| -> Result<f64> {
            let mut prev = self.q_min;
            for step in 1..=n as i64 {
                let idx = (start as i64 + dir * step).rem_euclid(n as i64) as usize;
                let wraps = (start as i64 + dir * step).div_euclid(n as i64);
                let q = self.crit[idx].0 + 2.0 * PI * wraps as f64;
                if self.crit[idx].1 >= e {
                    // U - e changes sign monotonically between prev and q
                    let (mut lo, mut hi) = if dir > 0 { (prev, q) } else { (q, prev) };
                    let inside_lo = dir > 0;
                    for _ in 0..200 {
                        let mid = 0.5 * (lo + hi);
                        if mid <= lo || mid >= hi {
                            break;
                        }
                        let below = self.potential(mid) < e;
                        if below == inside_lo {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    return Ok(if dir > 0 { lo } else { hi });
                }
                prev = q;
            }
            Err(Error::EnergyOutOfRange {
                energy: e,
                region: "libration".into(),
            })
        };
        Ok((find(-1)?, find(1)?))
    }

    /// `U(q0 + d) - U(q0)` without cancellation for small `d`.
    pub fn increment(&self, q0: f64, d: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(j, c)| {
                let h = 0.5 * j * d;
                let step = Complex64::new(-2.0 * h.sin().powi(2), (j * d).sin());
                (c * Complex64::from_polar(1.0, j * q0) * step).re
            })
            .sum()
    }

    /// `E - U(q_h + d)` on a rotational level.
    fn rotation_gap(&self, e: f64, d: f64) -> f64 {
        (e - self.e_sep) - self.increment(self.q_hyperbolic, d)
    }

    /// Librational loop in the variable `phi in [0, pi]`, with
    /// `q = a + (b - a)(1 - cos phi)/2`: returns `(dq/dphi, E - U(q))`.
    fn libration_gap(&self, e: f64, a: f64, b: f64, phi: f64) -> (f64, f64) {
        let jac = 0.5 * (b - a) * phi.sin();
        let gap = if phi <= 0.5 * PI {
            let d = (b - a) * (0.5 * phi).sin().powi(2);
            (e - self.potential(a)) - self.increment(a, d)
        } else {
            let d = (b - a) * (0.5 * (PI - phi)).sin().powi(2);
            (e - self.potential(b)) - self.increment(b, -d)
        };
        (jac, gap)
    }

    /// `(1/2 pi) oint p2 dq2` on the level set `e`, taken positive in all regions.
    pub fn action(&self, region: Region, e: f64) -> Result<f64> {
        self.check_energy(region, e)?;
        let k = self.kk.sqrt();
        if region.is_rotation() {
            let g = |d: f64| (2.0 * self.rotation_gap(e, d).max(0.0)).sqrt();
            let (v, _) = integrate(&g, 0.0, 2.0 * PI, QUAD_TOL)?;
            Ok(v / (2.0 * PI * k))
        } else {
            let (a, b) = self.turning_points(e)?;
            let g = |phi: f64| {
                let (jac, gap) = self.libration_gap(e, a, b, phi);
                (2.0 * gap.max(0.0)).sqrt() * jac
            };
            let (v, _) = integrate(&g, 0.0, PI, QUAD_TOL)?;
            Ok(v / (PI * k))
        }
    }

    /// Period of the motion in `q2`; `d action / d e = period / 2 pi`.
    pub fn period(&self, region: Region, e: f64) -> Result<f64> {
        self.check_energy(region, e)?;
        if e == self.e_sep {
            return Err(Error::EnergyOutOfRange {
                energy: e,
                region: "separatrix".into(),
            });
        }
        let k = self.kk.sqrt();
        if region.is_rotation() {
            let g = |d: f64| 1.0 / (2.0 * self.rotation_gap(e, d)).sqrt();
            let (v, _) = integrate(&g, 0.0, 2.0 * PI, QUAD_TOL)?;
            Ok(v / k)
        } else {
            let (a, b) = self.turning_points(e)?;
            let g = |phi: f64| {
                let (jac, gap) = self.libration_gap(e, a, b, phi);
                if gap <= 0.0 {
                    0.0
                } else {
                    jac / (2.0 * gap).sqrt()
                }
            };
            let (v, _) = integrate(&g, 0.0, PI, QUAD_TOL)?;
            Ok(2.0 * v / k)
        }
    }

    /// Inverse of [`Reduced::action`] on the region.
    pub fn energy_of_action(&self, region: Region, action: f64) -> Result<f64> {
        if !(action > 0.0 && action.is_finite()) {
            return Err(invalid(format!("action {action} must be positive")));
        }
        let sep_action = self.action(region, self.e_sep)?;
        let (mut lo, mut hi) = match region {
            Region::Libration => {
                if action >= sep_action {
                    return Err(Error::EnergyOutOfRange {
                        energy: f64::NAN,
                        region: "libration".into(),
                    });
                }
                (self.e_min, self.e_sep)
            }
            _ => {
                if action <= sep_action {
                    return Err(Error::EnergyOutOfRange {
                        energy: f64::NAN,
                        region: region.name().into(),
                    });
                }
                let mut gap = 1.0;
                while self.action(region, self.e_sep + gap)? < action {
                    gap *= 2.0;
                }
                (self.e_sep, self.e_sep + gap)
            }
        };
        let mut e = 0.5 * (lo + hi);
        for _ in 0..200 {
            let i = self.action(region, e)?;
            if i < action {
                lo = e;
            } else {
                hi = e;
            }
            let slope = self.period(region, e)? / (2.0 * PI);
            let mut next = e - (i - action) / slope;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - e).abs() <= 4.0 * f64::EPSILON * e.abs().max(1.0) {
                return Ok(next);
            }
            e = next;
        }
        Ok(e)
    }

    /// Integral of `weight(q) dt` along the rotational orbit of energy `e`
    /// from `q_hyperbolic` to `q`, and over one full lap.
    fn rotation_integral(&self, e: f64, q: f64, weight: &dyn Fn(f64) -> f64) -> Result<(f64, f64)> {
        let k = self.kk.sqrt();
        let qh = self.q_hyperbolic;
        let g = |d: f64| weight(qh + d) / (k * (2.0 * self.rotation_gap(e, d)).sqrt());
        let laps = ((q - qh) / (2.0 * PI)).floor();
        let rest = q - qh - 2.0 * PI * laps;
        let (full, _) = integrate(&g, 0.0, 2.0 * PI, QUAD_TOL)?;
        let (part, _) = integrate(&g, 0.0, rest, QUAD_TOL)?;
        Ok((laps * full + part, full))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartParams {
    pub eps: f64,
    /// Inner radius of the action annulus.
    pub r: f64,
    pub r_outer: f64,
    pub cutoff: usize,
    /// Genericity floor for `|f_k|`; charts are refused below it.
    pub p1_floor: Option<f64>,
}

pub struct PendulumChart {
    pub frame: BezoutFrame,
    pub eps: f64,
    pub fk_abs: f64,
    pub theta_k: f64,
    pub lambda: f64,
    pub p1_center: f64,
    pub p1_halfwidth: f64,
    /// `r_k / (4 lambda |k|)`; the chart is valid only when it is at least 1.
    pub width_ratio: f64,
    pub eta: f64,
    /// Largest change of the rescaled potential when `p2` moves across the
    /// chart instead of being frozen at 0.
    pub frozen_p2_error: f64,
    model: Box<dyn ResonantModel>,
}

impl std::fmt::Debug for PendulumChart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PendulumChart")
            .field("frame", &self.frame)
            .field("lambda", &self.lambda)
            .field("theta_k", &self.theta_k)
            .field("eta", &self.eta)
            .finish_non_exhaustive()
    }
}

impl PendulumChart {
    /// `|k|^2 p2^2/2 + |perp kbar|^2 p1^2/2 + cos(q2 + theta_k)`.
    pub fn exact(k: Generator, theta_k: f64) -> Self {
        let model = FrozenProfile {
            mean: 0.0,
            harmonics: vec![(1, Complex64::from_polar(0.5, theta_k))],
        };
        Self {
            frame: BezoutFrame::new(k),
            eps: 0.0,
            fk_abs: 0.5,
            theta_k,
            lambda: 1.0,
            p1_center: 0.0,
            p1_halfwidth: 1.0,
            width_ratio: f64::INFINITY,
            eta: 0.0,
            frozen_p2_error: 0.0,
            model: Box::new(model),
        }
    }

    /// Chart from an averaged resonant model; `fk` is the coefficient of the
    /// potential at the generator.
    pub fn build(k: Generator, fk: Complex64, model: Box<dyn ResonantModel>, params: &ChartParams) -> Result<Self> {
        let fk_abs = fk.norm();
        if let Some(floor) = params.p1_floor {
            if fk_abs < floor {
                return Err(Error::BelowGenericFloor { k, found: fk_abs, floor });
            }
        }
        if !(params.eps > 0.0) || fk_abs == 0.0 {
            return Err(invalid("chart needs eps > 0 and a nonzero resonant coefficient"));
        }
        if !(0.0 < params.r && params.r < params.r_outer) || params.cutoff == 0 {
            return Err(invalid("chart needs 0 < r < R and K >= 1"));
        }
        let frame = BezoutFrame::new(k);
        let kn = k.euclid();
        let lambda = (2.0 * fk_abs * params.eps).sqrt();
        let r_k = params.r / (32.0 * kn * params.cutoff as f64);
        let width_ratio = r_k / (4.0 * lambda * kn);
        if width_ratio < 1.0 {
            return Err(Error::RescaledWidth(width_ratio));
        }
        let t = 0.5 * (params.r + params.r_outer);
        let mut chart = Self {
            frame,
            eps: params.eps,
            fk_abs,
            theta_k: fk.arg(),
            lambda,
            p1_center: t * kn / lambda,
            p1_halfwidth: r_k * kn / lambda,
            width_ratio,
            eta: 0.0,
            frozen_p2_error: 0.0,
            model,
        };
        chart.measure_perturbation(r_k);
        Ok(chart)
    }

    fn y_of(&self, p: Vec2) -> Vec2 {
        let a = self.frame.actions(p);
        [self.lambda * a[0], self.lambda * a[1]]
    }

    /// Rescaled `W` and harmonics of `cos(q + theta_k) + V` at `p`.
    fn rescaled(&self, p: Vec2) -> (f64, Vec<(i64, Complex64)>) {
        let y = self.y_of(p);
        let s = 1.0 / (2.0 * self.fk_abs);
        let h = self.model.harmonics(y).into_iter().map(|(j, c)| (j, c * s)).collect();
        (self.model.mean(y) * s, h)
    }

    fn measure_perturbation(&mut self, r_k: f64) {
        let main = Complex64::from_polar(0.5, self.theta_k);
        let hy = 1e-3 * r_k;
        let cols = [self.frame.perp_kbar(), self.frame.k.as_vec2()];
        let p2_span = r_k / (self.lambda * self.frame.k.euclid());
        let (mut w_hess, mut v_sup, mut frozen) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..9 {
            let p1 = self.p1_center + self.p1_halfwidth * (i as f64 / 4.0 - 1.0);
            let y = self.y_of([p1, 0.0]);
            let g = |d: Vec2| self.model.mean([y[0] + d[0], y[1] + d[1]]);
            let mut hess = [[0.0; 2]; 2];
            for a in 0..2 {
                for b in 0..2 {
                    let (u, v) = (cols[a], cols[b]);
                    let sh = |su: f64, sv: f64| [hy * (su * u[0] + sv * v[0]), hy * (su * u[1] + sv * v[1])];
                    let d2 = (g(sh(1.0, 1.0)) - g(sh(1.0, -1.0)) - g(sh(-1.0, 1.0)) + g(sh(-1.0, -1.0))) / (4.0 * hy * hy);
                    hess[a][b] = d2 * self.lambda * self.lambda / (2.0 * self.fk_abs);
                }
            }
            w_hess = w_hess.max(sym_norm(hess));
            let (w0, h0) = self.rescaled([p1, 0.0]);
            let v: f64 = h0
                .iter()
                .map(|&(j, c)| 2.0 * if j == 1 { (c - main).norm() } else { c.norm() })
                .sum();
            v_sup = v_sup.max(v);
            for p2 in [-p2_span, p2_span] {
                let (w1, h1) = self.rescaled([p1, p2]);
                let mut diff = (w1 - w0).abs();
                for &(j, c) in &h1 {
                    let c0 = h0.iter().find(|x| x.0 == j).map_or(Complex64::default(), |x| x.1);
                    diff += 2.0 * (c - c0).norm();
                }
                frozen = frozen.max(diff);
            }
        }
        self.eta = w_hess.max(v_sup);
        self.frozen_p2_error = frozen;
    }

    /// Reduced one degree of freedom system at transverse momentum `p1`
    /// (with `p2` frozen at the resonance centre).
    pub fn reduced(&self, p1: f64) -> Result<Reduced> {
        let (w, h) = self.rescaled([p1, 0.0]);
        Reduced::new(self.frame.k, self.frame.k.norm_sq() as f64, w, &h)
    }

    pub fn separatrix_energy(&self, p1: f64) -> Result<f64> {
        Ok(self.reduced(p1)?.e_sep)
    }

    pub fn action_of_energy(&self, region: Region, e: f64, p1: f64) -> Result<f64> {
        self.reduced(p1)?.action(region, e)
    }

    pub fn energy_of_action(&self, region: Region, action: f64, p1: f64) -> Result<f64> {
        self.reduced(p1)?.energy_of_action(region, action)
    }

    /// Angles of the rotational chart pulled back to the unimodular frame:
    /// `U^{-T} (phi1, phi2)` for the orbit of energy `e` through `x`.
    /// Shifting `x` by `2 pi` along a coordinate changes the result by integer
    /// multiples of `2 pi`.
    pub fn rotation_angles(&self, e: f64, p1: f64, x: Vec2) -> Result<Vec2> {
        let red = self.reduced(p1)?;
        red.check_energy(Region::Plus, e)?;
        let q = self.frame.angles(x);
        let (t, period) = red.rotation_integral(e, q[1], &|_| 1.0)?;
        let phi2 = 2.0 * PI * t / period;
        // d phi1 = (E_p1 - dU/dp1) dt along the orbit
        let hp = 1e-5 * p1.abs().max(1.0);
        let (rp, rm) = (self.reduced(p1 + hp)?, self.reduced(p1 - hp)?);
        let du = |s: f64| -(rp.potential(s) - rm.potential(s)) / (2.0 * hp);
        let (part, full) = red.rotation_integral(e, q[1], &du)?;
        // E_p1 makes the drift over a full lap vanish
        let e_p1 = -full / period;
        let phi1 = q[0] + e_p1 * t + part;
        let u = self.frame.shear();
        Ok([phi1 - u * phi2, phi2])
    }
}

fn sym_norm(h: [[f64; 2]; 2]) -> f64 {
    let tr = 0.5 * (h[0][0] + h[1][1]);
    let d = (0.25 * (h[0][0] - h[1][1]).powi(2) + h[0][1] * h[1][0]).max(0.0).sqrt();
    (tr + d).abs().max((tr - d).abs())
}

/// Least-squares fit `I(z) = phi(z) + chi(z) z log z` in the scaled variable
/// `u = z / z_scale`: `I = sum a_n u^n + sum b_n u^{n+1} log u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSplitFit {
    pub z_scale: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `chi(0) = b_0 / z_scale`.
    pub chi0: f64,
    pub residual: f64,
}

impl LogSplitFit {
    /// Value and first two `z`-derivatives.
    pub fn eval(&self, z: f64) -> [f64; 3] {
        let zs = self.z_scale;
        let u = z / zs;
        let lu = u.ln();
        let mut out = [0.0; 3];
        for (n, &a) in self.a.iter().enumerate() {
            let n = n as f64;
            out[0] += a * u.powf(n);
            if n >= 1.0 {
                out[1] += a * n * u.powf(n - 1.0);
            }
            if n >= 2.0 {
                out[2] += a * n * (n - 1.0) * u.powf(n - 2.0);
            }
        }
        for (n, &b) in self.b.iter().enumerate() {
            let m = n as f64 + 1.0;
            out[0] += b * u.powf(m) * lu;
            out[1] += b * (m * u.powf(m - 1.0) * lu + u.powf(m - 1.0));
            out[2] += b * (m * (m - 1.0) * u.powf(m - 2.0) * lu + (2.0 * m - 1.0) * u.powf(m - 2.0));
        }
        [out[0], out[1] / zs, out[2] / (zs * zs)]
    }
}

pub fn fit_log_split(z: &[f64], values: &[f64], deg_phi: usize, deg_chi: usize) -> Result<LogSplitFit> {
    let ncol = deg_phi + deg_chi + 2;
    if z.len() != values.len() || z.len() < ncol + 2 {
        return Err(Error::IllConditioned(format!("{} samples for {ncol} unknowns", z.len())));
    }
    if z.iter().any(|&v| !(v > 0.0)) {
        return Err(invalid("log-split samples need z > 0"));
    }
    let zmax = z.iter().copied().fold(0.0, f64::max);
    let zmin = z.iter().copied().fold(f64::INFINITY, f64::min);
    if zmax / zmin < 10.0 {
        return Err(Error::IllConditioned(format!("z range [{zmin:e}, {zmax:e}] spans less than a decade")));
    }
    let mut m = DMatrix::<f64>::zeros(z.len(), ncol);
    for (i, &zi) in z.iter().enumerate() {
        let u = zi / zmax;
        for n in 0..=deg_phi {
            m[(i, n)] = u.powi(n as i32);
        }
        for n in 0..=deg_chi {
            m[(i, deg_phi + 1 + n)] = u.powi(n as i32 + 1) * u.ln();
        }
    }
    let scale: Vec<f64> = (0..ncol)
        .map(|j| m.column(j).iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE))
        .collect();
    for j in 0..ncol {
        m.column_mut(j).scale_mut(1.0 / scale[j]);
    }
    let rhs = DVector::from_column_slice(values);
    let svd = m.clone().svd(true, true);
    let sv = &svd.singular_values;
    let cond = sv.max() / sv.min();
    if !(cond < 1e13) {
        return Err(Error::IllConditioned(format!("condition number {cond:e}")));
    }
    let sol = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::IllConditioned(e.to_string()))?;
    let coef: Vec<f64> = (0..ncol).map(|j| sol[j] / scale[j]).collect();
    let a = coef[..=deg_phi].to_vec();
    let b = coef[deg_phi + 1..].to_vec();
    let mut fit = LogSplitFit {
        z_scale: zmax,
        chi0: b[0] / zmax,
        a,
        b,
        residual: 0.0,
    };
    fit.residual = z
        .iter()
        .zip(values)
        .map(|(&zi, &v)| (fit.eval(zi)[0] - v).abs())
        .fold(0.0, f64::max);
    Ok(fit)
}

/// Energy at distance `z > 0` from the separatrix, on the side of `region`.
fn energy_at(red: &Reduced, region: Region, z: f64) -> f64 {
    if region.is_rotation() {
        red.e_sep + z
    } else {
        red.e_sep - z
    }
}

/// Fits the action near the separatrix; `z` is `|E - E0|`.
pub fn log_split_fit(
    chart: &PendulumChart,
    region: Region,
    p1: f64,
    z: &[f64],
    deg_phi: usize,
    deg_chi: usize,
) -> Result<LogSplitFit> {
    let red = chart.reduced(p1)?;
    let values = z
        .iter()
        .map(|&zi| red.action(region, energy_at(&red, region, zi)))
        .collect::<Result<Vec<f64>>>()?;
    fit_log_split(z, &values, deg_phi, deg_chi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwistPoint {
    pub p1: f64,
    pub z: f64,
    pub region: Region,
    pub energy: f64,
    pub action: f64,
    pub period: f64,
    /// Hessian of `|perp kbar|^2 I1^2/2 + E(I1, I2)` in `(I1, I2)`.
    pub hessian: [[f64; 2]; 2],
    pub det: f64,
    pub norm: f64,
}

/// `log|y| = intercept + exponent log z + log_exponent log|dI/dE|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub exponent: f64,
    pub log_exponent: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwistReport {
    pub k: Generator,
    pub perp_sq: f64,
    pub points: Vec<TwistPoint>,
    /// Constant of `d^2E/dI2^2 ~ c0 / z` (log factor fitted, exponent fixed).
    pub c0: Option<f64>,
    /// Constant of `det ~ c1 / z`, same model.
    pub c1: Option<f64>,
}

fn twist_point(chart: &PendulumChart, red: &Reduced, region: Region, p1: f64, z: f64) -> Result<TwistPoint> {
    let e = energy_at(red, region, z);
    let action = red.action(region, e)?;
    let period = red.period(region, e)?;
    let i_e = period / (2.0 * PI);
    let slope = |h: f64| -> Result<f64> {
        Ok((red.period(region, e + h)? - red.period(region, e - h)?) / (2.0 * h) / (2.0 * PI))
    };
    let h = 0.05 * z.min(1.0);
    let i_ee = (4.0 * slope(0.5 * h)? - slope(h)?) / 3.0;
    // derivatives in p1 at fixed energy; the step keeps E0 well inside z
    let mut hp = 1e-4 * p1.abs().max(1.0);
    let (mut rp, mut rm);
    loop {
        rp = chart.reduced(p1 + hp)?;
        rm = chart.reduced(p1 - hp)?;
        if (rp.e_sep - red.e_sep).abs().max((rm.e_sep - red.e_sep).abs()) < 0.1 * z || hp < 1e-12 {
            break;
        }
        hp *= 0.5;
    }
    let (ip, im) = (rp.action(region, e)?, rm.action(region, e)?);
    let (tp, tm) = (rp.period(region, e)?, rm.period(region, e)?);
    let i_p = (ip - im) / (2.0 * hp);
    let i_pp = (ip - 2.0 * action + im) / (hp * hp);
    let i_ep = (tp - tm) / (2.0 * hp) / (2.0 * PI);
    let e_p = -i_p / i_e;
    let e_pp = -(i_pp + 2.0 * i_ep * e_p + i_ee * e_p * e_p) / i_e;
    let e_pi = -(i_ep + i_ee * e_p) / (i_e * i_e);
    let e_ii = -i_ee / i_e.powi(3);
    let hessian = [[chart.frame.perp_sq() + e_pp, e_pi], [e_pi, e_ii]];
    Ok(TwistPoint {
        p1,
        z,
        region,
        energy: e,
        action,
        period,
        det: hessian[0][0] * hessian[1][1] - hessian[0][1] * hessian[1][0],
        norm: sym_norm(hessian),
        hessian,
    })
}

/// Twist Hessian on a `(p1, z)` grid for each listed region.
pub fn twist_hessian(chart: &PendulumChart, p1s: &[f64], zs: &[f64], regions: &[Region]) -> Result<TwistReport> {
    use rayon::prelude::*;
    let jobs: Vec<(f64, Region, f64)> = p1s
        .iter()
        .flat_map(|&p1| regions.iter().flat_map(move |&r| zs.iter().map(move |&z| (p1, r, z))))
        .collect();
    let reduced: Vec<Reduced> = p1s.iter().map(|&p| chart.reduced(p)).collect::<Result<_>>()?;
    let points = jobs
        .par_iter()
        .map(|&(p1, region, z)| {
            let idx = p1s.iter().position(|&p| p == p1).expect("p1 from grid");
            twist_point(chart, &reduced[idx], region, p1, z)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = TwistReport {
        k: chart.frame.k,
        perp_sq: chart.frame.perp_sq(),
        points,
        c0: None,
        c1: None,
    };
    let rot: Vec<&TwistPoint> = report.points.iter().filter(|p| p.region == Region::Plus).collect();
    if rot.len() >= 3 {
        let fixed = |f: &dyn Fn(&TwistPoint) -> f64| -> Option<f64> {
            let rows: Vec<(f64, f64)> = rot
                .iter()
                .map(|p| ((p.period / (2.0 * PI)).ln(), f(p).abs().ln() + p.z.ln()))
                .collect();
            let x = DMatrix::from_fn(rows.len(), 2, |i, j| if j == 0 { 1.0 } else { rows[i].0 });
            let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
            let sol = x.svd(true, true).solve(&y, 0.0).ok()?;
            Some(sol[0].exp())
        };
        report.c0 = fixed(&|p| p.hessian[1][1]);
        report.c1 = fixed(&|p| p.det);
    }
    Ok(report)
}

/// Regresses `log|det|` on `log z` and `log|dI/dE|` over points of `region`
/// with `z` inside `window`.
pub fn fit_twist_exponent(report: &TwistReport, region: Region, window: (f64, f64)) -> Result<PowerFit> {
    let pts: Vec<&TwistPoint> = report
        .points
        .iter()
        .filter(|p| p.region == region && p.z >= window.0 && p.z <= window.1 && p.det != 0.0)
        .collect();
    if pts.len() < 4 {
        return Err(Error::IllConditioned(format!("{} points in the fit window", pts.len())));
    }
    let x = DMatrix::from_fn(pts.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => pts[i].z.ln(),
        _ => (pts[i].period / (2.0 * PI)).abs().ln(),
    });
    let y = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.det.abs().ln()));
    let sol = x
        .clone()
        .svd(true, true)
        .solve(&y, 0.0)
        .map_err(|e| Error::IllConditioned(e.to_string()))?;
    let pred = &x * &sol;
    let mean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(pred.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(PowerFit {
        intercept: sol[0],
        exponent: sol[1],
        log_exponent: sol[2],
        r2: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 },
        n: pts.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleRegion {
    pub theta: f64,
    /// Action measure (`I2` length, weighted over `p1`) where the twist bounds fail.
    pub excluded_measure: f64,
    pub total_measure: f64,
    /// Measure between the separatrix and the first grid point, not resolved.
    pub unresolved_measure: f64,
    pub admissible_points: usize,
    pub points: usize,
}

/// Part of the twist grid where `||Hess|| <= 1/theta` and `|det| >= theta`.
pub fn admissible_region(report: &TwistReport, theta: f64) -> Result<AdmissibleRegion> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(invalid(format!("theta = {theta} must lie in (0, 1)")));
    }
    let margin = |p: &TwistPoint| (1.0 / theta).ln() - p.norm.ln();
    let margin = |p: &TwistPoint| margin(p).min(p.det.abs().ln() - theta.ln());
    let mut p1s: Vec<f64> = report.points.iter().map(|p| p.p1).collect();
    p1s.sort_by(f64::total_cmp);
    p1s.dedup();
    let weights: Vec<f64> = if p1s.len() == 1 {
        vec![1.0]
    } else {
        (0..p1s.len())
            .map(|i| {
                let lo = if i == 0 { p1s[0] } else { 0.5 * (p1s[i - 1] + p1s[i]) };
                let hi = if i + 1 == p1s.len() { p1s[i] } else { 0.5 * (p1s[i] + p1s[i + 1]) };
                hi - lo
            })
            .collect()
    };
    let mut out = AdmissibleRegion {
        theta,
        excluded_measure: 0.0,
        total_measure: 0.0,
        unresolved_measure: 0.0,
        admissible_points: report.points.iter().filter(|p| margin(p) >= 0.0).count(),
        points: report.points.len(),
    };
    for (&p1, &wt) in p1s.iter().zip(&weights) {
        for region in [Region::Plus, Region::Minus, Region::Libration] {
            let mut row: Vec<&TwistPoint> = report
                .points
                .iter()
                .filter(|p| p.p1 == p1 && p.region == region)
                .collect();
            if row.is_empty() {
                continue;
            }
            row.sort_by(|a, b| a.z.total_cmp(&b.z));
            for w in row.windows(2) {
                let (ga, gb) = (margin(w[0]), margin(w[1]));
                let len = (w[1].action - w[0].action).abs();
                let frac = if ga >= 0.0 && gb >= 0.0 {
                    0.0
                } else if ga < 0.0 && gb < 0.0 {
                    1.0
                } else if ga < 0.0 {
                    ga / (ga - gb)
                } else {
                    gb / (gb - ga)
                };
                out.excluded_measure += wt * frac * len;
                out.total_measure += wt * len;
            }
        }
    }
    Ok(out)
}

/// Adds the measure between the separatrix and the closest grid point of each
/// row to `region.unresolved_measure`.
pub fn unresolved_band(chart: &PendulumChart, report: &TwistReport, region: &mut AdmissibleRegion) -> Result<()> {
    let mut p1s: Vec<f64> = report.points.iter().map(|p| p.p1).collect();
    p1s.sort_by(f64::total_cmp);
    p1s.dedup();
    for p1 in p1s {
        let red = chart.reduced(p1)?;
        for reg in [Region::Plus, Region::Minus, Region::Libration] {
            if let Some(first) = report
                .points
                .iter()
                .filter(|p| p.p1 == p1 && p.region == reg)
                .min_by(|a, b| a.z.total_cmp(&b.z))
            {
                let sep = red.action(reg, red.e_sep)?;
                region.unresolved_measure += (first.action - sep).abs();
            }
        }
    }
    Ok(())
}

/// `n` points log-spaced on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}
