//! Zero-average real-analytic potentials on the 2-torus.
//!
//! Coefficients are stored sparsely, both `k` and `-k`, with the reality
//! condition `f_{-k} = conj(f_k)` maintained on every insertion.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::resonance::{enumerate_generators, Generator};

/// Canonical half-plane representative: `k1 > 0`, or `k1 = 0` and `k2 > 0`.
#[inline]
pub fn is_positive_mode(k: [i64; 2]) -> bool {
    k[0] > 0 || (k[0] == 0 && k[1] > 0)
}

#[inline]
pub fn l1(k: [i64; 2]) -> i64 {
    k[0].abs() + k[1].abs()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourierSeries2 {
    s: f64,
    coeffs: BTreeMap<[i64; 2], Complex64>,
}

impl FourierSeries2 {
    pub fn new(s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(invalid(format!("analyticity width s = {s} must be positive")));
        }
        Ok(Self {
            s,
            coeffs: BTreeMap::new(),
        })
    }

    /// Builds a series from half-plane entries; the conjugate partner of
    /// each entry is implied.
    pub fn from_entries(s: f64, entries: &[([i64; 2], Complex64)]) -> Result<Self> {
        let mut f = Self::new(s)?;
        for &(k, c) in entries {
            if f.coeffs.contains_key(&k) {
                return Err(Error::DuplicateMode(k));
            }
            f.insert(k, c)?;
        }
        Ok(f)
    }

    /// Sets `f_k = c` and `f_{-k} = conj(c)`. Zero amplitudes remove the mode.
    pub fn insert(&mut self, k: [i64; 2], c: Complex64) -> Result<()> {
        if k == [0, 0] {
            return Err(Error::NonZeroAverage);
        }
        let nk = [-k[0], -k[1]];
        if c == Complex64::new(0.0, 0.0) {
            self.coeffs.remove(&k);
            self.coeffs.remove(&nk);
        } else {
            self.coeffs.insert(k, c);
            self.coeffs.insert(nk, c.conj());
        }
        Ok(())
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn coeff(&self, k: [i64; 2]) -> Complex64 {
        self.coeffs.get(&k).copied().unwrap_or_default()
    }

    /// All stored modes, both signs.
    pub fn modes(&self) -> impl Iterator<Item = ([i64; 2], Complex64)> + '_ {
        self.coeffs.iter().map(|(k, c)| (*k, *c))
    }

    /// One representative of each `±k` pair.
    pub fn half_modes(&self) -> impl Iterator<Item = ([i64; 2], Complex64)> + '_ {
        self.modes().filter(|(k, _)| is_positive_mode(*k))
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn max_l1(&self) -> i64 {
        self.coeffs.keys().map(|&k| l1(k)).max().unwrap_or(0)
    }

    /// Multiplies every coefficient by a real factor.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = Self {
            s: self.s,
            coeffs: BTreeMap::new(),
        };
        if factor != 0.0 {
            out.coeffs = self.coeffs.iter().map(|(k, c)| (*k, c * factor)).collect();
        }
        out
    }

    /// `sup_k |f_k| e^{|k|_1 s}`.
    pub fn norm_s(&self, s: f64) -> Result<f64> {
        if !(s > 0.0) {
            return Err(invalid("norm width must be positive"));
        }
        if self.coeffs.contains_key(&[0, 0]) {
            return Err(Error::NonZeroAverage);
        }
        Ok(self
            .coeffs
            .iter()
            .map(|(k, c)| c.norm() * (l1(*k) as f64 * s).exp())
            .fold(0.0, f64::max))
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        self.half_modes()
            .map(|(k, c)| {
                let ph = k[0] as f64 * x[0] + k[1] as f64 * x[1];
                2.0 * (c * Complex64::from_polar(1.0, ph)).re
            })
            .sum()
    }

    pub fn gradient(&self, x: [f64; 2]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for (k, c) in self.half_modes() {
            let ph = k[0] as f64 * x[0] + k[1] as f64 * x[1];
            let im = (c * Complex64::from_polar(1.0, ph)).im;
            g[0] -= 2.0 * k[0] as f64 * im;
            g[1] -= 2.0 * k[1] as f64 * im;
        }
        g
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: PotentialFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn to_file(&self) -> PotentialFile {
        PotentialFile {
            s: self.s,
            entries: self
                .half_modes()
                .map(|(k, c)| (k[0], k[1], c.re, c.im))
                .collect(),
        }
    }
}

/// On-disk form: `{"s": .., "entries": [[k1, k2, re, im], ..]}` with only one
/// of each `±k` pair stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PotentialFile {
    pub s: f64,
    pub entries: Vec<(i64, i64, f64, f64)>,
}

impl TryFrom<PotentialFile> for FourierSeries2 {
    type Error = Error;
    fn try_from(file: PotentialFile) -> Result<Self> {
        let mut f = FourierSeries2::new(file.s)?;
        for (k1, k2, re, im) in file.entries {
            let k = [k1, k2];
            if k == [0, 0] {
                return Err(Error::NonZeroAverage);
            }
            if f.coeffs.contains_key(&k) {
                return Err(Error::DuplicateMode(k));
            }
            if !(re.is_finite() && im.is_finite()) {
                return Err(invalid(format!("non-finite coefficient at {k:?}")));
            }
            f.insert(k, Complex64::new(re, im))?;
        }
        Ok(f)
    }
}

/// Potential restricted to one lattice line: `F(theta) = sum_j F_j e^{i j theta}`
/// with `F_j = f_{jk}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneDimProfile {
    pub k: Generator,
    pub coeffs: BTreeMap<i64, Complex64>,
}

/// Values and first two derivatives of a profile on a uniform grid.
#[derive(Debug, Clone)]
pub struct ProfileGrid {
    pub theta: Vec<f64>,
    pub value: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl OneDimProfile {
    pub fn coeff(&self, j: i64) -> Complex64 {
        self.coeffs.get(&j).copied().unwrap_or_default()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.values().all(|c| c.norm() == 0.0)
    }

    /// `d`-th derivative at `theta`.
    pub fn derivative(&self, theta: f64, d: u32) -> f64 {
        let mut acc = 0.0;
        for (&j, c) in &self.coeffs {
            if j <= 0 {
                continue;
            }
            let w = Complex64::new(0.0, j as f64).powu(d);
            acc += 2.0 * (c * w * Complex64::from_polar(1.0, j as f64 * theta)).re;
        }
        acc
    }

    pub fn eval(&self, theta: f64) -> f64 {
        self.derivative(theta, 0)
    }

    /// `sum_j |j|^d |F_j|`, a bound for `sup |F^(d)|`.
    pub fn derivative_bound(&self, d: i32) -> f64 {
        self.coeffs
            .iter()
            .map(|(&j, c)| (j.abs() as f64).powi(d) * c.norm())
            .sum()
    }

    /// Drops harmonics whose analytic weight `e^{-|j||k|_1 s}` is below `1e-16`
    /// of the leading one.
    pub fn truncated(&self, s: f64) -> OneDimProfile {
        let rate = self.k.l1() as f64 * s;
        let jmax = 1 + (16.0 * std::f64::consts::LN_10 / rate).ceil() as i64;
        OneDimProfile {
            k: self.k,
            coeffs: self
                .coeffs
                .iter()
                .filter(|(j, _)| j.abs() <= jmax)
                .map(|(j, c)| (*j, *c))
                .collect(),
        }
    }

    pub fn sample(&self, n: usize) -> ProfileGrid {
        let theta: Vec<f64> = (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).collect();
        ProfileGrid {
            value: theta.iter().map(|&t| self.derivative(t, 0)).collect(),
            d1: theta.iter().map(|&t| self.derivative(t, 1)).collect(),
            d2: theta.iter().map(|&t| self.derivative(t, 2)).collect(),
            theta,
        }
    }
}

/// Fourier projection of `f` on the line `Zk`.
pub fn project_to_lattice(f: &FourierSeries2, k: Generator) -> OneDimProfile {
    let mut coeffs = BTreeMap::new();
    for (m, c) in f.modes() {
        if k.cross(m) == 0 {
            let j = if k.k1() != 0 { m[0] / k.k1() } else { m[1] / k.k2() };
            coeffs.insert(j, c);
        }
    }
    OneDimProfile { k, coeffs }
}

/// Splits `f` (modes with `|k|_1 <= kmax`) into one profile per generator line.
pub fn decompose(f: &FourierSeries2, kmax: usize) -> BTreeMap<Generator, OneDimProfile> {
    let mut out: BTreeMap<Generator, OneDimProfile> = BTreeMap::new();
    for (m, c) in f.modes() {
        if l1(m) > kmax as i64 {
            continue;
        }
        let (g, j) = Generator::line_of(m).expect("stored modes are nonzero");
        out.entry(g)
            .or_insert_with(|| OneDimProfile {
                k: g,
                coeffs: BTreeMap::new(),
            })
            .coeffs
            .insert(j, c);
    }
    out
}

/// Threshold separating low modes (critical-point checks) from the
/// pendulum-like tail: `ceil(c max{1, 1/s, log(1/(s delta))/s})`.
pub fn threshold_k(s: f64, delta: f64, c_universal: f64) -> Result<usize> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(invalid(format!("delta = {delta} must lie in (0, 1]")));
    }
    if !(s > 0.0) {
        return Err(invalid("s must be positive"));
    }
    if !(c_universal > 1.0) {
        return Err(invalid("the universal constant must exceed 1"));
    }
    let m = 1.0f64.max(1.0 / s).max((1.0 / (s * delta)).ln() / s);
    Ok((c_universal * m).ceil() as usize)
}

/// Lower bound `delta |k|_1^-2 e^{-|k|_1 s}` required of tail coefficients.
pub fn p1_floor(delta: f64, s: f64, l1: i64) -> f64 {
    let m = l1 as f64;
    delta / (m * m) * (-m * s).exp()
}

/// Example member of the generic class: amplitude `p1_floor` on every generator.
pub fn make_example_potential(s: f64, delta: f64, kmax: usize) -> Result<FourierSeries2> {
    if kmax == 0 {
        return Err(invalid("Kmax must be at least 1"));
    }
    let mut f = FourierSeries2::new(s)?;
    for g in enumerate_generators(kmax) {
        f.insert(g.as_array(), Complex64::new(p1_floor(delta, s, g.l1()), 0.0))?;
    }
    Ok(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenericityConfig {
    pub c_universal: f64,
    pub grid_points: usize,
    pub polish_tol: f64,
    /// Maximum number of interval bisections when certifying a grid cell.
    pub max_depth: u32,
}

impl Default for GenericityConfig {
    fn default() -> Self {
        Self {
            c_universal: 2.0,
            grid_points: 4096,
            polish_tol: 1e-12,
            max_depth: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckFailure {
    pub k: Generator,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    P1,
    P2,
    P3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inconclusive {
    pub k: Generator,
    pub condition: Condition,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenericityReport {
    pub delta: f64,
    pub threshold: usize,
    pub kmax: usize,
    pub examined: usize,
    pub p1_failures: Vec<CheckFailure>,
    pub p2_failures: Vec<CheckFailure>,
    pub p3_failures: Vec<CheckFailure>,
    pub inconclusive: Vec<Inconclusive>,
    /// Smallest P1 margin seen over examined tail generators.
    pub p1_min_margin: Option<f64>,
}

impl GenericityReport {
    fn empty(delta: f64, threshold: usize, kmax: usize) -> Self {
        Self {
            delta,
            threshold,
            kmax,
            examined: 0,
            p1_failures: vec![],
            p2_failures: vec![],
            p3_failures: vec![],
            inconclusive: vec![],
            p1_min_margin: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.p1_failures.is_empty()
            && self.p2_failures.is_empty()
            && self.p3_failures.is_empty()
            && self.inconclusive.is_empty()
    }

    pub fn merge(mut self, other: GenericityReport) -> Self {
        self.examined += other.examined;
        self.p1_failures.extend(other.p1_failures);
        self.p2_failures.extend(other.p2_failures);
        self.p3_failures.extend(other.p3_failures);
        self.inconclusive.extend(other.inconclusive);
        self.p1_min_margin = match (self.p1_min_margin, other.p1_min_margin) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        self
    }
}

/// Tail condition on generators with `threshold < |k|_1 <= kmax`.
pub fn check_p1(
    f: &FourierSeries2,
    s: f64,
    delta: f64,
    kmax: usize,
    cfg: &GenericityConfig,
) -> Result<GenericityReport> {
    let threshold = threshold_k(s, delta, cfg.c_universal)?;
    let mut report = GenericityReport::empty(delta, threshold, kmax);
    for g in enumerate_generators(kmax) {
        if g.l1() as usize <= threshold {
            continue;
        }
        report.examined += 1;
        let margin = f.coeff(g.as_array()).norm() - p1_floor(delta, s, g.l1());
        report.p1_min_margin = Some(report.p1_min_margin.map_or(margin, |m: f64| m.min(margin)));
        if margin < 0.0 {
            report.p1_failures.push(CheckFailure { k: g, margin });
        }
    }
    Ok(report)
}

enum CellOutcome {
    Certified,
    Zero(f64),
    Unresolved,
}

/// Certifies `min g > 0` on `[a, b]` for `g` Lipschitz with constant `lip`,
/// bisecting until the bound closes or `g` is found numerically zero.
fn certify_positive(
    g: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    ga: f64,
    gb: f64,
    lip: f64,
    zero_tol: f64,
    depth: u32,
) -> CellOutcome {
    if 0.5 * (ga + gb) - 0.5 * lip * (b - a) > 0.0 {
        return CellOutcome::Certified;
    }
    if ga.min(gb) <= zero_tol {
        return CellOutcome::Zero(ga.min(gb));
    }
    if depth == 0 {
        return CellOutcome::Unresolved;
    }
    let m = 0.5 * (a + b);
    let gm = g(m);
    let left = certify_positive(g, a, m, ga, gm, lip, zero_tol, depth - 1);
    if !matches!(left, CellOutcome::Certified) {
        return left;
    }
    certify_positive(g, m, b, gm, gb, lip, zero_tol, depth - 1)
}

fn p2_profile(profile: &OneDimProfile, cfg: &GenericityConfig) -> std::result::Result<f64, Option<f64>> {
    // Ok(certified grid minimum) / Err(Some(zero found)) / Err(None) unresolved
    if profile.is_zero() {
        return Err(Some(0.0));
    }
    let g = |t: f64| profile.derivative(t, 1).abs() + profile.derivative(t, 2).abs();
    let lip = profile.derivative_bound(2) + profile.derivative_bound(3);
    let scale = profile.derivative_bound(1) + profile.derivative_bound(2);
    let zero_tol = cfg.polish_tol * scale;
    let n = cfg.grid_points;
    let h = 2.0 * PI / n as f64;
    let vals: Vec<f64> = (0..=n).map(|i| g(i as f64 * h)).collect();
    let mut unresolved = false;
    for i in 0..n {
        match certify_positive(&g, i as f64 * h, (i + 1) as f64 * h, vals[i], vals[i + 1], lip, zero_tol, cfg.max_depth) {
            CellOutcome::Certified => {}
            CellOutcome::Zero(v) => return Err(Some(v)),
            CellOutcome::Unresolved => unresolved = true,
        }
    }
    if unresolved {
        Err(None)
    } else {
        Ok(vals.iter().copied().fold(f64::INFINITY, f64::min))
    }
}

/// Critical points of a profile: roots of `F'` located by sign changes on the
/// grid (cells that could hide a root pair are bisected) and polished.
/// Returns `None` when some cell could not be resolved.
pub fn critical_points(profile: &OneDimProfile, cfg: &GenericityConfig) -> Option<Vec<f64>> {
    let d1 = |t: f64| profile.derivative(t, 1);
    let lip = profile.derivative_bound(2);
    let n = cfg.grid_points;
    let h = 2.0 * PI / n as f64;
    let vals: Vec<f64> = (0..=n).map(|i| d1(i as f64 * h)).collect();
    let mut roots = Vec::new();
    let mut ok = true;

    fn scan(
        d1: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fb: f64,
        lip: f64,
        tol: f64,
        depth: u32,
        roots: &mut Vec<f64>,
        ok: &mut bool,
    ) {
        if fa == 0.0 {
            roots.push(a);
            return;
        }
        if fa.signum() != fb.signum() && fb != 0.0 {
            roots.push(bisect(d1, a, b, fa, tol));
            return;
        }
        // no sign change: a root pair is possible only if the slope allows it
        if fa.abs() + fb.abs() > lip * (b - a) {
            return;
        }
        if b - a < tol {
            // tangential zero of F' (degenerate critical point)
            roots.push(0.5 * (a + b));
            return;
        }
        if depth == 0 {
            *ok = false;
            return;
        }
        let m = 0.5 * (a + b);
        let fm = d1(m);
        scan(d1, a, m, fa, fm, lip, tol, depth - 1, roots, ok);
        scan(d1, m, b, fm, fb, lip, tol, depth - 1, roots, ok);
    }

    for i in 0..n {
        scan(
            &d1,
            i as f64 * h,
            (i + 1) as f64 * h,
            vals[i],
            vals[i + 1],
            lip,
            cfg.polish_tol,
            cfg.max_depth,
            &mut roots,
            &mut ok,
        );
    }
    // a root at theta = 2 pi duplicates theta = 0
    roots.retain(|&t| t < 2.0 * PI - 0.5 * cfg.polish_tol);
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() < 10.0 * cfg.polish_tol);
    ok.then_some(roots)
}

fn bisect(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, mut fa: f64, tol: f64) -> f64 {
    while b - a > tol {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

fn low_generators(f: &FourierSeries2, s: f64, delta: f64, cfg: &GenericityConfig) -> Result<(usize, Vec<OneDimProfile>)> {
    let threshold = threshold_k(s, delta, cfg.c_universal)?;
    let profiles = enumerate_generators(threshold)
        .into_iter()
        .map(|g| project_to_lattice(f, g).truncated(s))
        .collect();
    Ok((threshold, profiles))
}

/// Non-degeneracy of the critical points of every low-mode profile.
pub fn check_p2(f: &FourierSeries2, s: f64, delta: f64, cfg: &GenericityConfig) -> Result<GenericityReport> {
    let (threshold, profiles) = low_generators(f, s, delta, cfg)?;
    let outcomes: Vec<_> = profiles.par_iter().map(|p| (p.k, p2_profile(p, cfg))).collect();
    let mut report = GenericityReport::empty(delta, threshold, threshold);
    for (k, out) in outcomes {
        report.examined += 1;
        match out {
            Ok(_) => {}
            Err(Some(margin)) => report.p2_failures.push(CheckFailure { k, margin }),
            Err(None) => report.inconclusive.push(Inconclusive {
                k,
                condition: Condition::P2,
                detail: "grid certification could not separate the minimum from zero".into(),
            }),
        }
    }
    Ok(report)
}

/// Smallest gap between critical values of a profile, `None` if unresolved.
/// A profile with a single critical value pair has gap `+inf` only when it
/// has fewer than two critical points.
pub fn critical_value_gap(profile: &OneDimProfile, cfg: &GenericityConfig) -> Option<f64> {
    if profile.is_zero() {
        return Some(0.0);
    }
    let roots = critical_points(profile, cfg)?;
    let mut values: Vec<f64> = roots.iter().map(|&t| profile.eval(t)).collect();
    values.sort_by(f64::total_cmp);
    Some(
        values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min),
    )
}

/// Distinct critical values for every low-mode profile.
pub fn check_p3(f: &FourierSeries2, s: f64, delta: f64, cfg: &GenericityConfig) -> Result<GenericityReport> {
    let (threshold, profiles) = low_generators(f, s, delta, cfg)?;
    let outcomes: Vec<_> = profiles
        .par_iter()
        .map(|p| {
            let scale = p.derivative_bound(0);
            (p.k, critical_value_gap(p, cfg), scale)
        })
        .collect();
    let mut report = GenericityReport::empty(delta, threshold, threshold);
    for (k, gap, scale) in outcomes {
        report.examined += 1;
        match gap {
            Some(g) if g <= 1e3 * cfg.polish_tol * scale.max(f64::MIN_POSITIVE) => {
                report.p3_failures.push(CheckFailure { k, margin: g })
            }
            Some(_) => {}
            None => report.inconclusive.push(Inconclusive {
                k,
                condition: Condition::P3,
                detail: "critical point search did not resolve every grid cell".into(),
            }),
        }
    }
    Ok(report)
}

/// All three conditions: low modes through P2 and P3, the tail up to `kmax`
/// through P1.
pub fn check_genericity(
    f: &FourierSeries2,
    s: f64,
    delta: f64,
    kmax: usize,
    cfg: &GenericityConfig,
) -> Result<GenericityReport> {
    let p1 = check_p1(f, s, delta, kmax, cfg)?;
    let p2 = check_p2(f, s, delta, cfg)?;
    let p3 = check_p3(f, s, delta, cfg)?;
    let mut r = p1.merge(p2).merge(p3);
    r.kmax = kmax;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn single_mode_norm() {
        let f = FourierSeries2::from_entries(1.0, &[([1, 0], c(0.5))]).unwrap();
        assert!((f.norm_s(1.0).unwrap() - 0.5 * 1f64.exp()).abs() < 1e-15);
        assert!((f.norm_s(1.0).unwrap() - 1.35914).abs() < 1e-5);
        assert_eq!(FourierSeries2::new(1.0).unwrap().norm_s(1.0).unwrap(), 0.0);
    }

    #[test]
    fn example_norm_is_delta() {
        let (s, delta) = (1.0, 0.5);
        let f = make_example_potential(s, delta, 30).unwrap();
        // oracle: max over generators of delta |k|^-2, attained at |k|_1 = 1
        let oracle = enumerate_generators(30)
            .iter()
            .map(|g| delta / (g.l1() as f64).powi(2))
            .fold(0.0, f64::max);
        assert!((f.norm_s(s).unwrap() - oracle).abs() < 1e-15);
        assert!((oracle - delta).abs() < 1e-15);
    }

    #[test]
    fn reality_and_zero_average() {
        let f = FourierSeries2::from_entries(1.0, &[([1, 2], Complex64::new(0.3, -0.2))]).unwrap();
        assert_eq!(f.coeff([-1, -2]), Complex64::new(0.3, 0.2));
        assert!(FourierSeries2::from_entries(1.0, &[([0, 0], c(1.0))]).is_err());
        assert!(FourierSeries2::from_entries(1.0, &[([1, 0], c(1.0)), ([-1, 0], c(1.0))]).is_err());
        let x = [0.3, -1.1];
        let direct = 2.0 * (Complex64::new(0.3, -0.2) * Complex64::from_polar(1.0, 0.3 - 2.2)).re;
        assert!((f.eval(x) - direct).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = make_example_potential(0.7, 0.4, 5).unwrap();
        let x = [0.4, 2.1];
        let g = f.gradient(x);
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (f.eval(xp) - f.eval(xm)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn projections_of_simple_potentials() {
        let f = FourierSeries2::from_entries(1.0, &[([1, 1], c(0.5))]).unwrap();
        let p = project_to_lattice(&f, Generator::new(1, 1).unwrap());
        for t in [0.0, 0.7, 2.0] {
            assert!((p.eval(t) - t.cos()).abs() < 1e-15);
        }
        let f = FourierSeries2::from_entries(1.0, &[([1, 0], c(0.5)), ([2, 0], c(0.5))]).unwrap();
        let p = project_to_lattice(&f, Generator::new(1, 0).unwrap());
        assert_eq!(p.coeffs.len(), 4);
        for t in [0.0, 0.7, 2.0] {
            assert!((p.eval(t) - t.cos() - (2.0 * t).cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn example_profiles_are_cosines() {
        let (s, delta) = (1.0, 0.5);
        let f = make_example_potential(s, delta, 12).unwrap();
        for g in enumerate_generators(12) {
            let p = project_to_lattice(&f, g);
            let amp = delta / (g.l1() as f64).powi(2) * (-(g.l1() as f64) * s).exp();
            assert_eq!(p.coeffs.len(), 2);
            for t in [0.1, 1.3, 4.0] {
                assert!((p.eval(t) - 2.0 * amp * t.cos()).abs() < 1e-15 * amp);
            }
        }
    }

    #[test]
    fn decompose_examples() {
        let f = FourierSeries2::from_entries(1.0, &[([1, 0], c(0.5)), ([2, 0], c(0.25))]).unwrap();
        let d = decompose(&f, 5);
        assert_eq!(d.len(), 1);
        let p = &d[&Generator::new(1, 0).unwrap()];
        assert_eq!(p.coeff(1), c(0.5));
        assert_eq!(p.coeff(2), c(0.25));
        let f = FourierSeries2::from_entries(1.0, &[([1, 1], c(0.5)), ([1, -1], c(0.5))]).unwrap();
        assert_eq!(decompose(&f, 5).len(), 2);
    }

    #[test]
    fn threshold_values() {
        assert_eq!(threshold_k(1.0, 1.0, 2.0).unwrap(), 2);
        assert_eq!(threshold_k(0.1, 0.1, 2.0).unwrap(), 93);
        assert_eq!(threshold_k(10.0, 1.0, 2.0).unwrap(), 2);
        assert!(threshold_k(1.0, 1.5, 2.0).is_err());
        assert!(threshold_k(1.0, 0.0, 2.0).is_err());
    }

    #[test]
    fn example_potential_small() {
        let f = make_example_potential(1.0, 0.5, 1).unwrap();
        assert_eq!(f.len(), 4);
        let a = 0.5 * (-1f64).exp();
        assert_eq!(f.coeff([1, 0]), c(a));
        assert_eq!(f.coeff([0, -1]), c(a));
        assert!((f.eval([0.0, 0.0]) - 4.0 * a).abs() < 1e-15);
    }

    #[test]
    fn example_potential_is_generic_with_zero_margin() {
        let cfg = GenericityConfig::default();
        let (s, delta) = (1.0, 0.5);
        let f = make_example_potential(s, delta, 25).unwrap();
        let r = check_genericity(&f, s, delta, 25, &cfg).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.p1_min_margin, Some(0.0));
        let p1 = check_p1(&f, s, delta, 25, &cfg).unwrap();
        assert!(p1.examined > 0);
    }

    #[test]
    fn single_cosine_fails_p1_everywhere_else() {
        let cfg = GenericityConfig::default();
        let f = FourierSeries2::from_entries(1.0, &[([1, 0], c(0.5))]).unwrap();
        let r = check_p1(&f, 1.0, 0.5, 10, &cfg).unwrap();
        let tail: Vec<_> = enumerate_generators(10)
            .into_iter()
            .filter(|g| g.l1() as usize > r.threshold)
            .collect();
        assert_eq!(r.p1_failures.len(), tail.len());
        // low generators other than (1,0) have vanishing profiles
        let r2 = check_p2(&f, 1.0, 0.5, &cfg).unwrap();
        assert!(r2.p2_failures.iter().all(|x| x.k != Generator::new(1, 0).unwrap()));
        assert!(!r2.p2_failures.is_empty());
    }

    fn profile(coeffs: &[(i64, Complex64)]) -> OneDimProfile {
        let mut m = BTreeMap::new();
        for &(j, c) in coeffs {
            m.insert(j, c);
            m.insert(-j, c.conj());
        }
        OneDimProfile {
            k: Generator::new(1, 0).unwrap(),
            coeffs: m,
        }
    }

    /// Brute-force critical points: dense sign-change scan of F'.
    fn dense_critical_values(p: &OneDimProfile, n: usize) -> Vec<f64> {
        let h = 2.0 * PI / n as f64;
        let mut out = vec![];
        for i in 0..n {
            let (a, b) = (i as f64 * h, (i + 1) as f64 * h);
            if p.derivative(a, 1).signum() != p.derivative(b, 1).signum() {
                out.push(p.eval(0.5 * (a + b)));
            }
        }
        out.sort_by(f64::total_cmp);
        out
    }

    #[test]
    fn symmetric_two_harmonic_profile_fails_p3() {
        let cfg = GenericityConfig::default();
        // cos t + cos 2t: the pair with cos t = -1/4 shares the value -9/8
        let p = profile(&[(1, c(0.5)), (2, c(0.5))]);
        let values = dense_critical_values(&p, 1 << 20);
        assert_eq!(values.len(), 4);
        assert!((values[0] - values[1]).abs() < 1e-10);
        assert!((values[0] + 1.125).abs() < 1e-9);
        let gap = critical_value_gap(&p, &cfg).unwrap();
        assert!(gap < 1e-10);
        // a small sine shift breaks the reflection symmetry
        let q = profile(&[(1, Complex64::new(0.5, -0.05)), (2, c(0.5))]);
        let values = dense_critical_values(&q, 1 << 20);
        let oracle_gap = values.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let gap = critical_value_gap(&q, &cfg).unwrap();
        assert!(gap > 1e-3);
        assert!((gap - oracle_gap).abs() < 1e-6);
    }

    #[test]
    fn degenerate_critical_point_fails_p2() {
        let cfg = GenericityConfig::default();
        // F = sin t - sin(2t)/2 has F' = F'' = 0 at t = 0
        let p = profile(&[(1, Complex64::new(0.0, -0.5)), (2, Complex64::new(0.0, 0.25))]);
        assert!((p.derivative(0.0, 1)).abs() < 1e-15);
        assert!((p.derivative(0.0, 2)).abs() < 1e-15);
        assert!(matches!(p2_profile(&p, &cfg), Err(Some(_))));
        let q = profile(&[(1, c(0.5))]);
        assert!(p2_profile(&q, &cfg).is_ok());
    }

    #[test]
    fn p2_pass_is_stable_under_refinement() {
        let p = profile(&[(1, Complex64::new(0.5, 0.1)), (3, c(0.05))]);
        let coarse = GenericityConfig { grid_points: 512, ..Default::default() };
        let fine = GenericityConfig { grid_points: 16384, ..Default::default() };
        let a = p2_profile(&p, &coarse).unwrap();
        let b = p2_profile(&p, &fine).unwrap();
        assert!(a > 0.0 && b > 0.0);
        assert!(b <= a + 1e-12);
        // grid minima differ by at most the Lipschitz slack of the coarse grid
        let lip = p.derivative_bound(2) + p.derivative_bound(3);
        assert!(a - b <= lip * 2.0 * PI / 512.0);
    }

    #[test]
    fn json_roundtrip_keeps_coefficients() {
        let f = make_example_potential(1.0, 0.5, 6).unwrap();
        let text = serde_json::to_string(&f.to_file()).unwrap();
        let g = FourierSeries2::from_json_str(&text).unwrap();
        assert_eq!(f, g);
        assert!(FourierSeries2::from_json_str(r#"{"s":1.0,"entries":[[1,0,0.5,0.0],[-1,0,0.5,0.0]]}"#).is_err());
        assert!(FourierSeries2::from_json_str(r#"{"s":1.0,"entries":[[0,0,0.5,0.0]]}"#).is_err());
    }

    fn arb_series() -> impl Strategy<Value = FourierSeries2> {
        proptest::collection::vec(((-12i64..=12), (-12i64..=12), -1.0f64..1.0, -1.0f64..1.0), 1..30).prop_map(|v| {
            let mut f = FourierSeries2::new(0.8).unwrap();
            for (a, b, re, im) in v {
                if (a, b) != (0, 0) {
                    f.insert([a, b], Complex64::new(re, im)).unwrap();
                }
            }
            f
        })
    }

    proptest! {
        #[test]
        fn decompose_resums_exactly(f in arb_series()) {
            let d = decompose(&f, 24);
            let mut g = FourierSeries2::new(f.s()).unwrap();
            for (k, p) in &d {
                for (&j, &c) in &p.coeffs {
                    if j > 0 {
                        g.insert(k.times(j), c).unwrap();
                    }
                }
            }
            prop_assert_eq!(f, g);
        }

        #[test]
        fn norm_monotone_in_width(f in arb_series(), a in 0.01f64..2.0, b in 0.01f64..2.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(f.norm_s(lo).unwrap() <= f.norm_s(hi).unwrap());
        }
    }
}
