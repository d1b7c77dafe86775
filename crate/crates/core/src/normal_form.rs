//! Lie-series averaging of `|y|^2/2 + f(y, x)` on a small action patch.
//!
//! Fourier coefficients `f_k(y)` are sampled on a tensor Chebyshev-Lobatto
//! grid; `y`-derivatives use the spectral differentiation matrix and products
//! are taken pointwise. Norms are suprema over the nodes.

use std::collections::{BTreeMap, BTreeSet};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fourier::{l1, FourierSeries2};
use crate::pendulum::ResonantModel;
use crate::resonance::{dot, norm, Generator, Vec2, ZoneDecomposition, ZoneLabel};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Square `center + half_width [-1, 1]^2` with `n x n` Chebyshev-Lobatto nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodalPatch {
    pub center: Vec2,
    pub half_width: f64,
    pub n: usize,
    #[serde(skip)]
    nodes: Vec<f64>,
    #[serde(skip)]
    diff: Vec<f64>,
}

impl NodalPatch {
    pub fn new(center: Vec2, half_width: f64, n: usize) -> Result<Self> {
        if n < 2 || !(half_width > 0.0 && half_width.is_finite()) {
            return Err(invalid("nodal patch needs n >= 2 nodes and a positive half-width"));
        }
        let m = (n - 1) as f64;
        let nodes: Vec<f64> = (0..n).map(|j| (std::f64::consts::PI * j as f64 / m).cos()).collect();
        let c = |i: usize| if i == 0 || i == n - 1 { 2.0 } else { 1.0 };
        let mut diff = vec![0.0; n * n];
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                if i != j {
                    let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                    let d = c(i) / c(j) * sign / (nodes[i] - nodes[j]);
                    diff[i * n + j] = d;
                    row += d;
                }
            }
            diff[i * n + i] = -row;
        }
        Ok(Self {
            center,
            half_width,
            n,
            nodes,
            diff,
        })
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Action point of flat node index `i1 n + i2`.
    pub fn point(&self, idx: usize) -> Vec2 {
        let (i1, i2) = (idx / self.n, idx % self.n);
        [
            self.center[0] + self.half_width * self.nodes[i1],
            self.center[1] + self.half_width * self.nodes[i2],
        ]
    }

    pub fn points(&self) -> Vec<Vec2> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Flat index of the node closest to the centre.
    pub fn center_index(&self) -> usize {
        let h = self.n / 2;
        h * self.n + h
    }

    pub fn gradient(&self, v: &[Complex64]) -> [Vec<Complex64>; 2] {
        let n = self.n;
        let scale = 1.0 / self.half_width;
        let mut g0 = vec![Complex64::default(); n * n];
        let mut g1 = vec![Complex64::default(); n * n];
        for i1 in 0..n {
            for i2 in 0..n {
                let (mut a, mut b) = (Complex64::default(), Complex64::default());
                for j in 0..n {
                    a += self.diff[i1 * n + j] * v[j * n + i2];
                    b += self.diff[i2 * n + j] * v[i1 * n + j];
                }
                g0[i1 * n + i2] = a * scale;
                g1[i1 * n + i2] = b * scale;
            }
        }
        [g0, g1]
    }

    fn bary(&self, u: f64) -> Vec<f64> {
        let n = self.n;
        if let Some(j) = self.nodes.iter().position(|&x| x == u) {
            let mut w = vec![0.0; n];
            w[j] = 1.0;
            return w;
        }
        let mut w: Vec<f64> = (0..n)
            .map(|j| {
                let end = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * end / (u - self.nodes[j])
            })
            .collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        w
    }

    /// Interpolation weights of `y` over the flat node grid.
    pub fn weights(&self, y: Vec2) -> Vec<f64> {
        let w0 = self.bary((y[0] - self.center[0]) / self.half_width);
        let w1 = self.bary((y[1] - self.center[1]) / self.half_width);
        let mut w = Vec::with_capacity(self.len());
        for a in &w0 {
            for b in &w1 {
                w.push(a * b);
            }
        }
        w
    }
}

fn apply(w: &[f64], v: &[Complex64]) -> Complex64 {
    w.iter().zip(v).map(|(a, b)| b * a).sum()
}

/// Projection lattice of a normal form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "generator")]
pub enum Lattice {
    /// Only `k = 0`.
    Trivial,
    /// `k Z` for a generator `k`.
    Line(Generator),
}

impl Lattice {
    pub fn contains(&self, k: [i64; 2]) -> bool {
        match self {
            Lattice::Trivial => k == [0, 0],
            Lattice::Line(g) => g.cross(k) == 0,
        }
    }
}

/// Fourier series in `x` whose coefficients are nodal functions of `y`;
/// both `k` and `-k` are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalSeries {
    pub patch: NodalPatch,
    pub modes: BTreeMap<[i64; 2], Vec<Complex64>>,
}

/// How brackets are truncated: modes beyond `cap` in `l1` norm are not
/// formed, and modes whose weighted sup at width `s` is below `floor` are
/// dropped.
#[derive(Debug, Clone, Copy)]
struct Truncation {
    cap: i64,
    s: f64,
    floor: f64,
}

impl NodalSeries {
    pub fn zero(patch: NodalPatch) -> Self {
        Self {
            patch,
            modes: BTreeMap::new(),
        }
    }

    /// `scale f(x)` with `y`-independent coefficients.
    pub fn from_fourier(f: &FourierSeries2, scale: f64, patch: NodalPatch) -> Self {
        let m = patch.len();
        let modes = f.modes().map(|(k, c)| (k, vec![c * scale; m])).collect();
        Self { patch, modes }
    }

    pub fn mode(&self, k: [i64; 2]) -> Option<&[Complex64]> {
        self.modes.get(&k).map(Vec::as_slice)
    }

    /// `sup_y sum_k |f_k(y)| e^{|k|_1 s}` over the nodes.
    pub fn weighted_norm(&self, s: f64) -> f64 {
        let weights: Vec<(f64, &Vec<Complex64>)> =
            self.modes.iter().map(|(k, v)| ((l1(*k) as f64 * s).exp(), v)).collect();
        (0..self.patch.len())
            .map(|i| weights.iter().fold(0.0, |a, (w, v)| a + w * v[i].norm()))
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.modes
            .values()
            .flat_map(|v| v.iter().map(|c| c.norm()))
            .fold(0.0, f64::max)
    }

    pub fn filter(&self, keep: impl Fn([i64; 2]) -> bool) -> Self {
        Self {
            patch: self.patch.clone(),
            modes: self
                .modes
                .iter()
                .filter(|(k, _)| keep(**k))
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
        }
    }

    pub fn project(&self, lattice: Lattice) -> Self {
        self.filter(|k| lattice.contains(k))
    }

    pub fn project_perp(&self, lattice: Lattice) -> Self {
        self.filter(|k| !lattice.contains(k))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            patch: self.patch.clone(),
            modes: self
                .modes
                .iter()
                .map(|(k, v)| (*k, v.iter().map(|c| c * factor).collect()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NodalSeries) {
        for (k, v) in &other.modes {
            let e = self
                .modes
                .entry(*k)
                .or_insert_with(|| vec![Complex64::default(); v.len()]);
            e.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
    }

    pub fn difference(&self, other: &NodalSeries) -> NodalSeries {
        let mut out = self.clone();
        out.add_assign(&other.scaled(-1.0));
        out
    }

    fn prune(&mut self, t: &Truncation) {
        self.modes
            .retain(|k, v| v.iter().map(|c| c.norm()).fold(0.0, f64::max) * (l1(*k) as f64 * t.s).exp() >= t.floor);
    }

    /// Value at `(y, x)`, interpolating the coefficients.
    pub fn eval(&self, y: Vec2, x: Vec2) -> f64 {
        let w = self.patch.weights(y);
        self.modes
            .iter()
            .map(|(k, v)| (apply(&w, v) * Complex64::from_polar(1.0, k[0] as f64 * x[0] + k[1] as f64 * x[1])).re)
            .sum()
    }

    /// Coefficient table at action `y`, half-plane modes only.
    pub fn table_at(&self, y: Vec2) -> Vec<ModeValue> {
        let w = self.patch.weights(y);
        self.modes
            .iter()
            .filter(|(k, _)| **k == [0, 0] || crate::fourier::is_positive_mode(**k))
            .map(|(k, v)| {
                let c = apply(&w, v);
                ModeValue {
                    k: *k,
                    re: c.re,
                    im: c.im,
                }
            })
            .collect()
    }

    fn gradients(&self) -> BTreeMap<[i64; 2], [Vec<Complex64>; 2]> {
        let keys: Vec<[i64; 2]> = self.modes.keys().copied().collect();
        let grads: Vec<[Vec<Complex64>; 2]> = keys.par_iter().map(|k| self.patch.gradient(&self.modes[k])).collect();
        keys.into_iter().zip(grads).collect()
    }

    /// `{self, g}` with `{F, G} = F_x . G_y - F_y . G_x`.
    fn bracket(&self, g: &NodalSeries, t: &Truncation) -> NodalSeries {
        let ga = self.gradients();
        let gb = g.gradients();
        let mut keys = BTreeSet::new();
        for k in self.modes.keys() {
            for l in g.modes.keys() {
                let m = [k[0] + l[0], k[1] + l[1]];
                if l1(m) <= t.cap {
                    keys.insert(m);
                }
            }
        }
        let keys: Vec<[i64; 2]> = keys.into_iter().collect();
        let nn = self.patch.len();
        let values: Vec<Vec<Complex64>> = keys
            .par_iter()
            .map(|m| {
                let mut acc = vec![Complex64::default(); nn];
                for (l, bl) in &g.modes {
                    let k = [m[0] - l[0], m[1] - l[1]];
                    let Some(ak) = self.modes.get(&k) else { continue };
                    let (dk, dl) = (&ga[&k], &gb[l]);
                    let (k0, k1, l0, l1_) = (k[0] as f64, k[1] as f64, l[0] as f64, l[1] as f64);
                    for n in 0..nn {
                        let kgb = dl[0][n] * k0 + dl[1][n] * k1;
                        let lga = dk[0][n] * l0 + dk[1][n] * l1_;
                        acc[n] += I * (ak[n] * kgb - bl[n] * lga);
                    }
                }
                acc
            })
            .collect();
        let mut out = NodalSeries {
            patch: self.patch.clone(),
            modes: keys.into_iter().zip(values).collect(),
        };
        out.prune(t);
        out
    }

    /// `{|y|^2/2, chi} = -sum_k i (y.k) chi_k e^{ikx}`.
    fn kinetic_bracket(chi: &NodalSeries) -> NodalSeries {
        let pts = chi.patch.points();
        NodalSeries {
            patch: chi.patch.clone(),
            modes: chi
                .modes
                .iter()
                .map(|(k, v)| {
                    let kv = [k[0] as f64, k[1] as f64];
                    (*k, v.iter().zip(&pts).map(|(c, y)| -I * dot(*y, kv) * c).collect())
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeValue {
    pub k: [i64; 2],
    pub re: f64,
    pub im: f64,
}

/// `|y|^2/2 + f(y, x)` on the nodal patch, with analyticity widths `r`
/// (actions) and `s` (angles).
#[derive(Debug, Clone)]
pub struct ActionAngleHamiltonian {
    pub f: NodalSeries,
    pub r: f64,
    pub s: f64,
}

impl ActionAngleHamiltonian {
    /// Frequencies `y + grad f_0(y)` at the nodes.
    pub fn frequencies(&self) -> Vec<Vec2> {
        frequencies(&self.f)
    }
}

fn frequencies(f: &NodalSeries) -> Vec<Vec2> {
    let pts = f.patch.points();
    match f.mode([0, 0]) {
        Some(v) => {
            let g = f.patch.gradient(v);
            pts.iter()
                .enumerate()
                .map(|(i, y)| [y[0] + g[0][i].re, y[1] + g[1][i].re])
                .collect()
        }
        None => pts,
    }
}

/// `sup_y sum_k |f_k(y)| e^{|k|_1 s}` over the nodes.
pub fn weighted_l1_norm(f: &NodalSeries, s: f64) -> f64 {
    f.weighted_norm(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonResonanceCertificate {
    pub holds: bool,
    /// `min |omega(y).k| - alpha` over the sample and `k` outside the
    /// lattice with `0 < |k|_1 <= K`.
    pub worst_margin: f64,
    pub worst_k: [i64; 2],
}

pub fn nonresonance_certificate(
    omegas: &[Vec2],
    lattice: Lattice,
    alpha: f64,
    cutoff: usize,
) -> Result<NonResonanceCertificate> {
    if omegas.is_empty() {
        return Err(invalid("non-resonance check on an empty sample"));
    }
    let c = cutoff as i64;
    let mut worst = (f64::INFINITY, [0, 0]);
    for k1 in -c..=c {
        for k2 in -c..=c {
            let k = [k1, k2];
            if l1(k) > c || l1(k) == 0 || lattice.contains(k) {
                continue;
            }
            for w in omegas {
                let m = (w[0] * k1 as f64 + w[1] * k2 as f64).abs() - alpha;
                if m < worst.0 {
                    worst = (m, k);
                }
            }
        }
    }
    Ok(NonResonanceCertificate {
        holds: worst.0 >= 0.0,
        worst_margin: worst.0,
        worst_k: worst.1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalFormConfig {
    pub nodes: usize,
    pub steps: usize,
    /// Highest power of the Lie derivative kept in each step.
    pub max_order: usize,
    /// Modes below `prune * |||f|||` (weighted at the output width) are dropped.
    pub prune: f64,
    /// Largest `|k|_1` formed in brackets; defaults to `max(2K, |f|_max)`.
    pub mode_cap: Option<usize>,
    /// Treat `theta_* >= 1` as an error instead of a recorded diagnostic.
    pub strict_smallness: bool,
    /// Constant in front of the proximity bounds whose constant is unknown.
    pub constant: f64,
    /// Cutoff of the resonant normal forms; defaults to the zone cutoff `K`.
    pub resonant_cutoff: Option<usize>,
}

impl Default for NormalFormConfig {
    fn default() -> Self {
        Self {
            nodes: 16,
            steps: 2,
            max_order: 8,
            prune: 1e-18,
            mode_cap: None,
            strict_smallness: false,
            constant: 10.0,
            resonant_cutoff: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Weighted norm of the cut-off non-lattice part before the step.
    pub nonresonant_before: f64,
    pub nonresonant_after: f64,
    pub generator_norm: f64,
    /// Lie-series terms used.
    pub order: usize,
    pub modes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub input: f64,
    /// `|||g - P f|||` at the output angle width.
    pub averaged_deviation: f64,
    pub averaged_bound: f64,
    pub averaged_bound_holds: bool,
    /// Remainder at half the angle width.
    pub remainder: f64,
    pub remainder_bound: f64,
    pub remainder_bound_holds: bool,
}

#[derive(Debug, Clone)]
pub struct NormalFormResult {
    pub lattice: Lattice,
    pub alpha: f64,
    pub cutoff: usize,
    pub r: f64,
    pub s: f64,
    pub s_out: f64,
    pub theta_star: f64,
    pub s_bar: f64,
    pub certificate: NonResonanceCertificate,
    pub steps: Vec<StepRecord>,
    /// `P_lattice` of the transformed perturbation.
    pub averaged: NodalSeries,
    pub remainder: NodalSeries,
    /// Generating functions in order of application.
    pub generators: Vec<NodalSeries>,
    pub input: NodalSeries,
    pub norms: NormRecord,
    pub mode_cap: usize,
}

/// Serializable view of a normal form: tables at the patch centre plus norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalFormSummary {
    pub lattice: Lattice,
    pub alpha: f64,
    pub cutoff: usize,
    pub patch: NodalPatch,
    pub r: f64,
    pub s: f64,
    pub s_out: f64,
    pub theta_star: f64,
    pub s_bar: f64,
    pub certificate: NonResonanceCertificate,
    pub steps: Vec<StepRecord>,
    pub norms: NormRecord,
    pub mode_cap: usize,
    pub averaged_at_center: Vec<ModeValue>,
    pub remainder_modes: usize,
}

impl NormalFormResult {
    pub fn summary(&self) -> NormalFormSummary {
        let c = self.averaged.patch.center;
        NormalFormSummary {
            lattice: self.lattice,
            alpha: self.alpha,
            cutoff: self.cutoff,
            patch: self.averaged.patch.clone(),
            r: self.r,
            s: self.s,
            s_out: self.s_out,
            theta_star: self.theta_star,
            s_bar: self.s_bar,
            certificate: self.certificate,
            steps: self.steps.clone(),
            norms: self.norms,
            mode_cap: self.mode_cap,
            averaged_at_center: self.averaged.table_at(c),
            remainder_modes: self.remainder.modes.len(),
        }
    }

    /// Image `Psi(y', x')` of the composed change of variables, each
    /// generator's time-one flow integrated with `rk_steps` RK4 steps.
    pub fn transform(&self, y: Vec2, x: Vec2, rk_steps: usize) -> (Vec2, Vec2) {
        // H o Phi_1 o Phi_2 ...: the last generator acts first
        let mut state = [y[0], y[1], x[0], x[1]];
        for chi in self.generators.iter().rev() {
            state = flow(chi, state, 1.0, rk_steps);
        }
        ([state[0], state[1]], [state[2], state[3]])
    }

    /// Jacobian determinant of `transform` by central differences.
    pub fn jacobian_det(&self, y: Vec2, x: Vec2, rk_steps: usize) -> f64 {
        let hy = 1e-4 * self.averaged.patch.half_width;
        let hx = 1e-4;
        let base = [y[0], y[1], x[0], x[1]];
        let mut jac = nalgebra::Matrix4::<f64>::zeros();
        for c in 0..4 {
            let h = if c < 2 { hy } else { hx };
            let image = |sign: f64| {
                let mut p = base;
                p[c] += sign * h;
                let (a, b) = self.transform([p[0], p[1]], [p[2], p[3]], rk_steps);
                [a[0], a[1], b[0], b[1]]
            };
            let (plus, minus) = (image(1.0), image(-1.0));
            for r in 0..4 {
                jac[(r, c)] = (plus[r] - minus[r]) / (2.0 * h);
            }
        }
        jac.determinant()
    }

    /// `|H o Psi - (|y|^2/2 + averaged + remainder)|` at one point.
    pub fn energy_defect(&self, y: Vec2, x: Vec2, rk_steps: usize) -> f64 {
        let (yy, xx) = self.transform(y, x, rk_steps);
        let before = 0.5 * (yy[0] * yy[0] + yy[1] * yy[1]) + self.input.eval(yy, xx);
        let after = 0.5 * (y[0] * y[0] + y[1] * y[1]) + self.averaged.eval(y, x) + self.remainder.eval(y, x);
        (before - after).abs()
    }
}

/// Gradient of a nodal series at `(y, x)`: `(chi_y, chi_x)`.
fn series_gradient(chi: &NodalSeries, grads: &BTreeMap<[i64; 2], [Vec<Complex64>; 2]>, y: Vec2, x: Vec2) -> (Vec2, Vec2) {
    let w = chi.patch.weights(y);
    let (mut gy, mut gx) = ([0.0; 2], [0.0; 2]);
    for (k, v) in &chi.modes {
        let e = Complex64::from_polar(1.0, k[0] as f64 * x[0] + k[1] as f64 * x[1]);
        let c = apply(&w, v) * e;
        let g = &grads[k];
        gy[0] += (apply(&w, &g[0]) * e).re;
        gy[1] += (apply(&w, &g[1]) * e).re;
        gx[0] -= k[0] as f64 * c.im;
        gx[1] -= k[1] as f64 * c.im;
    }
    (gy, gx)
}

/// Time-`t` flow of `y' = -chi_x`, `x' = chi_y` by RK4.
fn flow(chi: &NodalSeries, state: [f64; 4], t: f64, steps: usize) -> [f64; 4] {
    let grads = chi.gradients();
    let field = |s: [f64; 4]| {
        let (gy, gx) = series_gradient(chi, &grads, [s[0], s[1]], [s[2], s[3]]);
        [-gx[0], -gx[1], gy[0], gy[1]]
    };
    let h = t / steps as f64;
    let mut s = state;
    let add = |a: [f64; 4], b: [f64; 4], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2], a[3] + c * b[3]];
    for _ in 0..steps {
        let k1 = field(s);
        let k2 = field(add(s, k1, 0.5 * h));
        let k3 = field(add(s, k2, 0.5 * h));
        let k4 = field(add(s, k3, h));
        for i in 0..4 {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    s
}

/// Solves `{|y|^2/2 + f_0, chi} + N = 0` for the cut-off non-lattice part `N`.
fn homological(f: &NodalSeries, lattice: Lattice, cutoff: usize) -> NodalSeries {
    let omegas = frequencies(f);
    let modes = f
        .modes
        .iter()
        .filter(|(k, _)| l1(**k) > 0 && l1(**k) <= cutoff as i64 && !lattice.contains(**k))
        .map(|(k, v)| {
            let kv = [k[0] as f64, k[1] as f64];
            (*k, v.iter().zip(&omegas).map(|(c, w)| -I * c / dot(*w, kv)).collect())
        })
        .collect();
    NodalSeries {
        patch: f.patch.clone(),
        modes,
    }
}

/// `exp(L_chi)(|y|^2/2 + f) - |y|^2/2` with `L_chi F = {F, chi}`.
fn lie_transform(f: &NodalSeries, chi: &NodalSeries, order: usize, t: &Truncation) -> (NodalSeries, usize) {
    let mut term = NodalSeries::kinetic_bracket(chi);
    term.add_assign(&f.bracket(chi, t));
    term.prune(t);
    let mut out = f.clone();
    out.add_assign(&term);
    let mut used = 1;
    for j in 2..=order {
        if term.modes.is_empty() {
            break;
        }
        term = term.bracket(chi, t).scaled(1.0 / j as f64);
        out.add_assign(&term);
        used = j;
    }
    out.prune(t);
    (out, used)
}

/// Lie-series normal form modulo `lattice` with small-divisor threshold
/// `alpha` and Fourier cutoff `K`.
pub fn normalize(
    h: &ActionAngleHamiltonian,
    lattice: Lattice,
    alpha: f64,
    cutoff: usize,
    cfg: &NormalFormConfig,
) -> Result<NormalFormResult> {
    if cutoff < 2 {
        return Err(invalid("normal form needs K >= 2"));
    }
    if !(alpha > 0.0 && h.r > 0.0 && h.s > 0.0) {
        return Err(invalid("normal form needs alpha, r, s > 0"));
    }
    let certificate = nonresonance_certificate(&h.frequencies(), lattice, alpha, cutoff)?;
    if !certificate.holds {
        return Err(Error::Resonant(certificate.worst_margin));
    }
    let input_norm = h.f.weighted_norm(h.s);
    let theta_star = 2048.0 * (cutoff * cutoff) as f64 * input_norm / (alpha * h.r * h.s);
    if cfg.strict_smallness && theta_star >= 1.0 {
        return Err(Error::SmallnessCondition(theta_star));
    }
    let s_out = h.s * (1.0 - 1.0 / cutoff as f64);
    let max_l1 = h.f.modes.keys().map(|k| l1(*k)).max().unwrap_or(0);
    let cap = cfg.mode_cap.map_or((2 * cutoff as i64).max(max_l1), |c| c as i64);
    let t = Truncation {
        cap,
        s: 0.5 * s_out,
        floor: cfg.prune * input_norm,
    };
    let nonres = |f: &NodalSeries| {
        f.filter(|k| l1(k) > 0 && l1(k) <= cutoff as i64 && !lattice.contains(k))
            .weighted_norm(h.s)
    };
    let mut f = h.f.clone();
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut generators = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let before = nonres(&f);
        let chi = homological(&f, lattice, cutoff);
        if chi.modes.is_empty() {
            break;
        }
        let (next, order) = lie_transform(&f, &chi, cfg.max_order, &t);
        f = next;
        steps.push(StepRecord {
            nonresonant_before: before,
            nonresonant_after: nonres(&f),
            generator_norm: chi.weighted_norm(h.s),
            order,
            modes: f.modes.len(),
        });
        generators.push(chi);
    }
    let averaged = f.project(lattice);
    let remainder = f.project_perp(lattice);
    let s_bar = (0.5 * h.s).min((8.0 / theta_star).ln());
    let averaged_deviation = averaged.difference(&h.f.project(lattice)).weighted_norm(s_out);
    let averaged_bound = theta_star / cutoff as f64 * input_norm;
    let remainder_norm = remainder.weighted_norm(0.5 * h.s);
    let remainder_bound = 2.0 * (-(cutoff as f64 - 2.0) * s_bar).exp() * input_norm;
    Ok(NormalFormResult {
        lattice,
        alpha,
        cutoff,
        r: h.r,
        s: h.s,
        s_out,
        theta_star,
        s_bar,
        certificate,
        steps,
        averaged,
        remainder,
        generators,
        input: h.f.clone(),
        norms: NormRecord {
            input: input_norm,
            averaged_deviation,
            averaged_bound,
            averaged_bound_holds: averaged_deviation <= averaged_bound,
            remainder: remainder_norm,
            remainder_bound,
            remainder_bound_holds: remainder_norm <= remainder_bound,
        },
        mode_cap: cap as usize,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonResonantBounds {
    pub r0: f64,
    /// Angle width `s(1 - 2/K)/2` at which the remainder is measured.
    pub s_measured: f64,
    /// `sup |g0 - <f>|` over the nodes.
    pub mean_deviation: f64,
    /// `c eps K^2 / alpha^2`.
    pub mean_bound: f64,
    /// Weighted norm of the remainder `f0`.
    pub remainder: f64,
    /// `e^{-Ks/3} |||f|||_s`, times the configured constant.
    pub remainder_bound: f64,
    pub potential_norm: f64,
    pub holds: bool,
}

#[derive(Debug, Clone)]
pub struct NonResonantAverage {
    pub result: NormalFormResult,
    /// Averaged potential `g0(y)` in units of `eps` (mode 0 only).
    pub g0: NodalSeries,
    /// Remainder `f0` in units of `eps`.
    pub f0: NodalSeries,
    pub bounds: NonResonantBounds,
}

/// Averages `|y|^2/2 + eps f` over all angles on a patch of half-width
/// `r0/2 = alpha/(4K)` around `center`, which must lie in `D0`.
pub fn average_nonresonant(
    f: &FourierSeries2,
    eps: f64,
    zones: &ZoneDecomposition,
    center: Vec2,
    cfg: &NormalFormConfig,
) -> Result<NonResonantAverage> {
    if !(eps > 0.0) {
        return Err(invalid("eps must be positive"));
    }
    if zones.classify(center)? != ZoneLabel::NonResonant {
        return Err(invalid(format!("patch centre {center:?} is not in D0")));
    }
    let (alpha, k) = (zones.alpha, zones.cutoff);
    let r0 = alpha / (2.0 * k as f64);
    let patch = NodalPatch::new(center, 0.5 * r0, cfg.nodes)?;
    let h = ActionAngleHamiltonian {
        f: NodalSeries::from_fourier(f, eps, patch),
        r: r0,
        s: f.s(),
    };
    let result = normalize(&h, Lattice::Trivial, alpha, k, cfg)?;
    let g0 = result.averaged.scaled(1.0 / eps);
    let f0 = result.remainder.scaled(1.0 / eps);
    let s = f.s();
    let s_measured = s * (1.0 - 2.0 / k as f64) / 2.0;
    let mean = f.coeff([0, 0]).re;
    let mean_deviation = g0
        .mode([0, 0])
        .map_or(mean.abs(), |v| v.iter().map(|c| (c.re - mean).abs()).fold(0.0, f64::max));
    let potential_norm = f.norm_s(s)?;
    let mean_bound = cfg.constant * eps * (k * k) as f64 / (alpha * alpha);
    let remainder = f0.weighted_norm(s_measured);
    let remainder_bound = cfg.constant * (-(k as f64) * s / 3.0).exp() * potential_norm;
    Ok(NonResonantAverage {
        result,
        g0,
        f0,
        bounds: NonResonantBounds {
            r0,
            s_measured,
            mean_deviation,
            mean_bound,
            remainder,
            remainder_bound,
            potential_norm,
            holds: remainder <= remainder_bound,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonantBounds {
    pub r_k: f64,
    pub alpha: f64,
    pub cutoff: usize,
    /// `sup |G0|` over the nodes.
    pub mean_sup: f64,
    /// `|||G - F|||` at width `s(1 - 1/K)`.
    pub proximity: f64,
    /// `c eps |k|_1^2 K^2`.
    pub proximity_bound: f64,
    /// Remainder at width `s(1 - 1/K)/2`.
    pub remainder: f64,
    /// `2 e^{-(4K-1)s}`.
    pub remainder_bound: f64,
    /// Largest `|coefficient|` of the remainder on `kZ`; zero by construction.
    pub lattice_leak: f64,
}

#[derive(Debug, Clone)]
pub struct ResonantAverage {
    pub k: Generator,
    pub result: NormalFormResult,
    /// Mean `G0(y)` in units of `eps`.
    pub mean: NodalSeries,
    /// Zero-mean effective potential `G(y, k.x)` in units of `eps`.
    pub effective: NodalSeries,
    /// Remainder `f^k` in units of `eps`.
    pub remainder: NodalSeries,
    pub bounds: ResonantBounds,
}

/// Point of the resonance line `y.k = 0` at mid radius of the annulus.
pub fn resonance_center(zones: &ZoneDecomposition, k: Generator) -> Vec2 {
    let t = 0.5 * (zones.annulus.r_inner + zones.annulus.r_outer);
    let n = k.euclid();
    [-t * k.k2() as f64 / n, t * k.k1() as f64 / n]
}

/// Averages over the angles transverse to `k` on a patch of half-width
/// `r_k = r/(32|k|K)` around `center` (default: [`resonance_center`]); the lattice
/// modes are kept and split into mean and effective potential.
pub fn average_simple_resonance(
    f: &FourierSeries2,
    eps: f64,
    k: Generator,
    zones: &ZoneDecomposition,
    center: Option<Vec2>,
    cfg: &NormalFormConfig,
) -> Result<ResonantAverage> {
    if !(eps > 0.0) {
        return Err(invalid("eps must be positive"));
    }
    let big_k = zones.cutoff;
    if k.euclid() > big_k as f64 {
        return Err(Error::GeneratorTooLong {
            norm: k.euclid(),
            cutoff: big_k,
        });
    }
    let center = center.unwrap_or_else(|| resonance_center(zones, k));
    match zones.classify(center)? {
        ZoneLabel::Resonant(ks) if ks == vec![k] => {}
        _ => return Err(Error::NotInResonantZone(k)),
    }
    let r = zones.annulus.r_inner;
    let r_k = r / (32.0 * k.euclid() * big_k as f64);
    let alpha = r / (4.0 * k.euclid());
    let cutoff = cfg.resonant_cutoff.unwrap_or(big_k);
    let patch = NodalPatch::new(center, r_k, cfg.nodes)?;
    let h = ActionAngleHamiltonian {
        f: NodalSeries::from_fourier(f, eps, patch),
        r: r_k,
        s: f.s(),
    };
    let lattice = Lattice::Line(k);
    let result = normalize(&h, lattice, alpha, cutoff, cfg)?;
    let g = result.averaged.scaled(1.0 / eps);
    let mean = g.filter(|m| m == [0, 0]);
    let effective = g.filter(|m| m != [0, 0]);
    let remainder = result.remainder.scaled(1.0 / eps);
    let bare = NodalSeries::from_fourier(f, 1.0, g.patch.clone()).filter(|m| m != [0, 0] && lattice.contains(m));
    let s = f.s();
    let s_star = s * (1.0 - 1.0 / big_k as f64);
    let lattice_leak = remainder
        .modes
        .iter()
        .filter(|(m, _)| lattice.contains(**m))
        .flat_map(|(_, v)| v.iter().map(|c| c.norm()))
        .fold(0.0, f64::max);
    let l1k = k.l1() as f64;
    let bounds = ResonantBounds {
        r_k,
        alpha,
        cutoff,
        mean_sup: mean.max_abs(),
        proximity: effective.difference(&bare).weighted_norm(s_star),
        proximity_bound: cfg.constant * eps * l1k * l1k * (big_k * big_k) as f64,
        remainder: remainder.weighted_norm(0.5 * s_star),
        remainder_bound: 2.0 * (-(4.0 * big_k as f64 - 1.0) * s).exp(),
        lattice_leak,
    };
    Ok(ResonantAverage {
        k,
        result,
        mean,
        effective,
        remainder,
        bounds,
    })
}

impl ResonantModel for ResonantAverage {
    fn mean(&self, y: Vec2) -> f64 {
        let w = self.mean.patch.weights(y);
        self.mean.mode([0, 0]).map_or(0.0, |v| apply(&w, v).re)
    }

    fn harmonics(&self, y: Vec2) -> Vec<(i64, Complex64)> {
        let w = self.effective.patch.weights(y);
        self.effective
            .modes
            .iter()
            .filter_map(|(m, v)| {
                let (g, j) = Generator::line_of(*m)?;
                (g == self.k && j > 0).then(|| (j, apply(&w, v)))
            })
            .collect()
    }
}

/// Second-order mean `eps/2 sum_k |f_k|^2 |k|^2 / (y.k)^2` produced by
/// averaging a `y`-independent potential without resonant modes, in units
/// of `eps`.
pub fn second_order_mean(f: &FourierSeries2, eps: f64, y: Vec2) -> f64 {
    0.5 * eps
        * f.modes()
            .filter(|(k, _)| *k != [0, 0])
            .map(|(k, c)| {
                let kv = [k[0] as f64, k[1] as f64];
                c.norm_sqr() * dot(kv, kv) / dot(y, kv).powi(2)
            })
            .sum::<f64>()
}

/// Distance of a patch centre from the resonance lines of the zones, in units
/// of `alpha`: useful to pick well-separated `D0` centres.
pub fn nonresonant_margin(zones: &ZoneDecomposition, y: Vec2) -> f64 {
    zones
        .generators
        .iter()
        .map(|g| dot(y, g.as_vec2()).abs() / zones.alpha)
        .fold(f64::INFINITY, f64::min)
}

/// Deterministic `D0` patch centres: points of a polar grid of the annulus
/// with the largest non-resonance margin, `count` of them.
pub fn nonresonant_centers(zones: &ZoneDecomposition, count: usize) -> Vec<Vec2> {
    let a = zones.annulus;
    let mut pts: Vec<(f64, Vec2)> = Vec::new();
    for i in 0..8 {
        let rad = a.r_inner + (a.r_outer - a.r_inner) * (i as f64 + 0.5) / 8.0;
        for j in 0..64 {
            let th = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / 64.0;
            let y = [rad * th.cos(), rad * th.sin()];
            if zones.is_non_resonant(y) {
                pts.push((nonresonant_margin(zones, y), y));
            }
        }
    }
    pts.sort_by(|p, q| q.0.total_cmp(&p.0).then(norm(p.1).total_cmp(&norm(q.1))));
    pts.into_iter().take(count).map(|p| p.1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::make_example_potential;
    use crate::resonance::Annulus;

    fn cosines(entries: &[([i64; 2], f64)]) -> FourierSeries2 {
        let e: Vec<([i64; 2], Complex64)> = entries.iter().map(|&(k, a)| (k, Complex64::new(0.5 * a, 0.0))).collect();
        FourierSeries2::from_entries(1.0, &e).unwrap()
    }

    #[test]
    fn chebyshev_derivative_of_polynomial() {
        let p = NodalPatch::new([1.0, -2.0], 0.3, 12).unwrap();
        let v: Vec<Complex64> = p
            .points()
            .iter()
            .map(|y| Complex64::new(y[0].powi(3) * y[1] + y[1] * y[1], 0.0))
            .collect();
        let g = p.gradient(&v);
        for (i, y) in p.points().iter().enumerate() {
            assert!((g[0][i].re - 3.0 * y[0] * y[0] * y[1]).abs() < 1e-11);
            assert!((g[1][i].re - (y[0].powi(3) + 2.0 * y[1])).abs() < 1e-11);
        }
        let w = p.weights([1.1, -2.05]);
        let val = apply(&w, &v).re;
        assert!((val - (1.1f64.powi(3) * -2.05 + 2.05 * 2.05)).abs() < 1e-12);
    }

    #[test]
    fn weighted_norm_of_single_and_double_modes() {
        let p = NodalPatch::new([1.0, 1.0], 0.1, 4).unwrap();
        let f = cosines(&[([2, 1], 0.4)]);
        let n = NodalSeries::from_fourier(&f, 1.0, p.clone());
        // A at |k|_1 = 3 stored at +-k: each 0.2
        assert!((weighted_l1_norm(&n, 0.5) - 0.4 * (1.5f64).exp()).abs() < 1e-14);
        let f = cosines(&[([2, 1], 0.4), ([1, 0], 1.0)]);
        let n = NodalSeries::from_fourier(&f, 1.0, p);
        let want = 0.4 * (1.5f64).exp() + 1.0 * (0.5f64).exp();
        assert!((weighted_l1_norm(&n, 0.5) - want).abs() < 1e-14);
    }

    #[test]
    fn weighted_norm_dominates_sup_and_is_controlled() {
        // ||f||_s <= |||f|||_s <= (coth^2(sigma/2) - 1) ||f||_{s + sigma}
        let f = make_example_potential(1.0, 0.5, 6).unwrap();
        let p = NodalPatch::new([1.0, 1.0], 0.1, 2).unwrap();
        let n = NodalSeries::from_fourier(&f, 1.0, p);
        let (s, sigma) = (0.3, 0.4);
        let sup_complex = |w: f64| {
            let mut best: f64 = 0.0;
            for a in 0..64 {
                for b in 0..64 {
                    for (u, v) in [(w, w), (w, -w), (-w, w), (-w, -w)] {
                        let x = [
                            Complex64::new(a as f64 * 0.098, u),
                            Complex64::new(b as f64 * 0.098, v),
                        ];
                        let val: Complex64 = f.modes().map(|(k, c)| c * (I * (x[0] * k[0] as f64 + x[1] * k[1] as f64)).exp()).sum();
                        best = best.max(val.norm());
                    }
                }
            }
            best
        };
        let wn = weighted_l1_norm(&n, s);
        assert!(sup_complex(s) <= wn * (1.0 + 1e-12));
        let c = 1.0 / (sigma / 2.0f64).tanh();
        assert!(wn <= (c * c - 1.0) * sup_complex(s + sigma) * 1.05);
    }

    #[test]
    fn certificate_excludes_lattice_modes() {
        let omegas = vec![[1.0, 0.0]];
        let c = nonresonance_certificate(&omegas, Lattice::Line(Generator::new(0, 1).unwrap()), 0.5, 3).unwrap();
        assert!(c.holds);
        let c = nonresonance_certificate(&omegas, Lattice::Trivial, 0.5, 3).unwrap();
        assert!(!c.holds);
        assert_eq!(c.worst_k[0], 0);
        assert!(nonresonance_certificate(&[], Lattice::Trivial, 0.5, 3).is_err());
    }

    #[test]
    fn lattice_supported_input_is_fixed() {
        let f = cosines(&[([1, 0], 1.0), ([2, 0], 0.1)]);
        let ann = Annulus::new(1.0, 2.0).unwrap();
        let zones = ZoneDecomposition::new(ann, 1.0 / 64.0, 2).unwrap();
        let k = Generator::new(1, 0).unwrap();
        let out = average_simple_resonance(&f, 1e-3, k, &zones, None, &NormalFormConfig::default()).unwrap();
        assert!(out.result.generators.is_empty());
        assert!(out.remainder.modes.is_empty());
        assert_eq!(out.bounds.proximity, 0.0);
        assert_eq!(out.bounds.mean_sup, 0.0);
        let h = out.harmonics(out.mean.patch.center);
        assert_eq!(h.len(), 2);
        assert!((h[0].1 - 0.5).norm() < 1e-15 && (h[1].1 - 0.05).norm() < 1e-15);
    }

    #[test]
    fn second_order_mean_matches_oracle() {
        let f = cosines(&[([1, 0], 1.0), ([1, 1], 0.5)]);
        let ann = Annulus::new(1.0, 2.0).unwrap();
        let zones = ZoneDecomposition::new(ann, 0.05, 2).unwrap();
        let y = [0.9, 1.2];
        let eps = 1e-4;
        let out = average_nonresonant(&f, eps, &zones, y, &NormalFormConfig::default()).unwrap();
        let g0 = out.g0.mode([0, 0]).unwrap();
        let w = out.g0.patch.weights(y);
        let got = apply(&w, g0).re;
        let want = second_order_mean(&f, eps, y);
        // next order is eps^2 relative
        assert!((got - want).abs() < 1e-3 * want.abs(), "{got} {want}");
        assert!(out.bounds.mean_deviation <= out.bounds.mean_bound);
    }

    #[test]
    fn remainder_decays_with_steps() {
        let f = cosines(&[([1, 0], 1.0), ([1, 1], 1.0)]);
        let ann = Annulus::new(1.0, 2.0).unwrap();
        let zones = ZoneDecomposition::new(ann, 0.05, 3).unwrap();
        let y = [0.9, 1.2];
        let mut last = f64::INFINITY;
        for steps in 1..=3 {
            let cfg = NormalFormConfig {
                steps,
                ..Default::default()
            };
            let out = average_nonresonant(&f, 1e-3, &zones, y, &cfg).unwrap();
            let r = out.result.steps.last().unwrap().nonresonant_after;
            assert!(r < 0.1 * last, "{steps}: {r} vs {last}");
            last = r;
            assert!(out.bounds.holds);
        }
    }

    #[test]
    fn transformation_is_symplectic_and_consistent() {
        let f = cosines(&[([1, 0], 1.0), ([1, 1], 0.5)]);
        let ann = Annulus::new(1.0, 2.0).unwrap();
        let zones = ZoneDecomposition::new(ann, 0.05, 3).unwrap();
        let y = [0.9, 1.2];
        let out = average_nonresonant(&f, 1e-3, &zones, y, &NormalFormConfig::default()).unwrap();
        let hw = out.g0.patch.half_width;
        for (dy, x) in [([0.0, 0.0], [0.3, 1.0]), ([0.3 * hw, -0.2 * hw], [4.0, 2.0])] {
            let yy = [y[0] + dy[0], y[1] + dy[1]];
            let det = out.result.jacobian_det(yy, x, 16);
            assert!((det - 1.0).abs() < 1e-8, "{det}");
            assert!(out.result.energy_defect(yy, x, 16) < 1e-12);
        }
    }

    #[test]
    fn projection_algebra() {
        let f = make_example_potential(1.0, 0.5, 5).unwrap();
        let p = NodalPatch::new([1.0, 1.0], 0.1, 3).unwrap();
        let n = NodalSeries::from_fourier(&f, 1.0, p);
        let lat = Lattice::Line(Generator::new(1, 1).unwrap());
        let mut sum = n.project(lat);
        sum.add_assign(&n.project_perp(lat));
        assert_eq!(sum, n);
        assert_eq!(n.project(lat).project(lat), n.project(lat));
        assert!(n.project(lat).modes.keys().all(|k| k[0] == k[1]));
    }
}
