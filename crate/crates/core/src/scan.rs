//! Orbit integration, frequency analysis and torus classification.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fourier::FourierSeries2;
use crate::pendulum::bezout_complement;
use crate::resonance::{Annulus, Generator, Vec2};

/// Potential and gradient evaluation through powers of `e^{i x1}`, `e^{i x2}`.
#[derive(Debug, Clone)]
pub struct ForceField {
    /// Half-plane modes with doubled coefficients.
    modes: Vec<(usize, i64, Complex64)>,
    max1: usize,
    max2: usize,
    sup: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ForceScratch {
    p1: Vec<Complex64>,
    p2: Vec<Complex64>,
}

impl ForceField {
    pub fn new(f: &FourierSeries2) -> Self {
        let modes: Vec<(usize, i64, Complex64)> = f
            .half_modes()
            .map(|(k, c)| (k[0] as usize, k[1], 2.0 * c))
            .collect();
        let max1 = modes.iter().map(|m| m.0).max().unwrap_or(0);
        let max2 = modes.iter().map(|m| m.1.unsigned_abs() as usize).max().unwrap_or(0);
        let sup = modes.iter().map(|m| m.2.norm()).sum();
        Self { modes, max1, max2, sup }
    }

    /// `sum |f_k|` over all modes, a bound for `sup |f|`.
    pub fn sup_bound(&self) -> f64 {
        self.sup
    }

    pub fn scratch(&self) -> ForceScratch {
        ForceScratch {
            p1: vec![Complex64::default(); self.max1 + 1],
            p2: vec![Complex64::default(); 2 * self.max2 + 1],
        }
    }

    fn powers(&self, x: Vec2, s: &mut ForceScratch) {
        let e1 = Complex64::from_polar(1.0, x[0]);
        let e2 = Complex64::from_polar(1.0, x[1]);
        s.p1[0] = Complex64::new(1.0, 0.0);
        for n in 1..=self.max1 {
            s.p1[n] = s.p1[n - 1] * e1;
        }
        let m = self.max2;
        s.p2[m] = Complex64::new(1.0, 0.0);
        for n in 1..=m {
            s.p2[m + n] = s.p2[m + n - 1] * e2;
            s.p2[m - n] = s.p2[m + n].conj();
        }
    }

    /// `(f(x), grad f(x))`.
    pub fn eval(&self, x: Vec2, s: &mut ForceScratch) -> (f64, Vec2) {
        self.powers(x, s);
        let m = self.max2 as i64;
        let (mut v, mut g) = (0.0, [0.0; 2]);
        for &(k1, k2, c) in &self.modes {
            let z = c * s.p1[k1] * s.p2[(m + k2) as usize];
            v += z.re;
            g[0] -= k1 as f64 * z.im;
            g[1] -= k2 as f64 * z.im;
        }
        (v, g)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub stride: usize,
    pub t: Vec<f64>,
    pub y: Vec<Vec2>,
    /// Angles, not reduced modulo `2 pi`.
    pub x: Vec<Vec2>,
    pub energy_drift: f64,
}

/// Leapfrog (kick-drift-kick) integration of `|y|^2/2 + eps f(x)`, sampled
/// every `stride` steps. A negative `dt` runs the flow backwards.
pub fn integrate(
    field: &ForceField,
    eps: f64,
    y0: Vec2,
    x0: Vec2,
    dt: f64,
    steps: usize,
    stride: usize,
) -> Result<Trajectory> {
    if dt == 0.0 || !dt.is_finite() || stride == 0 {
        return Err(invalid("integration needs finite dt != 0 and stride >= 1"));
    }
    let mut s = field.scratch();
    let (mut y, mut x) = (y0, x0);
    let energy = |y: Vec2, f: f64| 0.5 * (y[0] * y[0] + y[1] * y[1]) + eps * f;
    let (f0, mut g) = field.eval(x, &mut s);
    let h0 = energy(y, f0);
    let n_samples = steps / stride + 1;
    let mut traj = Trajectory {
        dt,
        stride,
        t: Vec::with_capacity(n_samples),
        y: Vec::with_capacity(n_samples),
        x: Vec::with_capacity(n_samples),
        energy_drift: 0.0,
    };
    traj.t.push(0.0);
    traj.y.push(y);
    traj.x.push(x);
    let half = 0.5 * eps * dt;
    for n in 1..=steps {
        y[0] -= half * g[0];
        y[1] -= half * g[1];
        x[0] += dt * y[0];
        x[1] += dt * y[1];
        let (f, gn) = field.eval(x, &mut s);
        g = gn;
        y[0] -= half * g[0];
        y[1] -= half * g[1];
        if n % stride == 0 {
            traj.t.push(n as f64 * dt);
            traj.y.push(y);
            traj.x.push(x);
            traj.energy_drift = traj.energy_drift.max((energy(y, f) - h0).abs());
        }
    }
    Ok(traj)
}

/// Peak of the windowed spectrum of `signal` near `guess`, located by
/// Newton iteration on `d|S|^2/d omega`. Samples are uniform with spacing `h`.
fn refine_peak(signal: &[Complex64], h: f64, weights: &[f64], guess: f64) -> Option<f64> {
    let n = signal.len();
    let tc = 0.5 * (n - 1) as f64 * h;
    let z: Vec<Complex64> = signal.iter().zip(weights).map(|(&v, &w)| v * w).collect();
    let span = n as f64 * h;
    let (lo, hi) = (guess - 2.0 * PI / span, guess + 2.0 * PI / span);
    let mut omega = guess;
    for _ in 0..50 {
        let rot = Complex64::from_polar(1.0, -omega * h);
        let mut ph = Complex64::from_polar(1.0, omega * tc);
        let (mut s0, mut s1, mut s2) = (Complex64::default(), Complex64::default(), Complex64::default());
        for (i, zi) in z.iter().enumerate() {
            let t = i as f64 * h - tc;
            let term = zi * ph;
            s0 += term;
            s1 += term * t;
            s2 += term * (t * t);
            ph *= rot;
        }
        // S' = -i s1, S'' = -s2
        let d1 = 2.0 * (s0.conj() * s1 * Complex64::new(0.0, -1.0)).re;
        let d2 = 2.0 * (s1.norm_sqr() - (s0.conj() * s2).re);
        if !(d2 < 0.0) {
            return None;
        }
        let step = -d1 / d2;
        omega += step;
        if !(omega > lo && omega < hi) {
            return None;
        }
        if step.abs() < 1e-15 * omega.abs().max(1.0) {
            break;
        }
    }
    Some(omega)
}

fn hanning(n: usize, power: u32) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let s = (PI * i as f64 / (n - 1) as f64).sin();
            s.powi(2 * power as i32)
        })
        .collect()
}

/// Per-window fundamental frequencies of both angles. `None` marks a window
/// without a resolvable peak.
pub fn fundamental_frequencies(traj: &Trajectory, windows: usize, hanning_power: u32) -> Result<Vec<Option<Vec2>>> {
    if windows < 2 {
        return Err(invalid("frequency analysis needs at least two windows"));
    }
    let len = (traj.x.len() - 1) / windows;
    if len < 16 {
        return Err(invalid("too few samples per window"));
    }
    let h = traj.dt.abs() * traj.stride as f64;
    let w = hanning(len, hanning_power);
    Ok((0..windows)
        .map(|win| {
            let seg = &traj.x[win * len..win * len + len];
            let mut out = [0.0; 2];
            for j in 0..2 {
                let xs: Vec<f64> = seg.iter().map(|x| x[j]).collect();
                let guess = (xs[len - 1] - xs[0]) / ((len - 1) as f64 * h);
                let z: Vec<Complex64> = xs.iter().map(|&v| Complex64::from_polar(1.0, v)).collect();
                out[j] = refine_peak(&z, h, &w, guess)?;
            }
            Some(out)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrbitClass {
    Primary,
    Secondary,
    NonTorus,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Largest inter-window frequency change accepted for a torus.
    pub tol_freq: f64,
    /// Drifts in `[tol_freq, factor tol_freq)` are inconclusive.
    pub inconclusive_factor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            tol_freq: 1e-7,
            inconclusive_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitSample {
    pub y0: Vec2,
    pub x0: Vec2,
    pub dt: f64,
    pub t_final: f64,
    pub class: OrbitClass,
    pub omegas: Vec<Option<Vec2>>,
    pub drift: f64,
    pub energy_drift: f64,
    pub librating: Option<Generator>,
}

/// Per-window frequencies of a librating orbit in the frame of `k`: the
/// libration frequency of `k.x`, read off the phase-plane signal
/// `(k.x - c) - i (k.y)/nu`, and the rotation frequency of `kbar.x`.
pub fn libration_frequencies(
    traj: &Trajectory,
    k: Generator,
    windows: usize,
    hanning_power: u32,
) -> Result<Vec<Option<Vec2>>> {
    if windows < 2 {
        return Err(invalid("frequency analysis needs at least two windows"));
    }
    let len = (traj.x.len() - 1) / windows;
    if len < 16 {
        return Err(invalid("too few samples per window"));
    }
    let h = traj.dt.abs() * traj.stride as f64;
    let w = hanning(len, hanning_power);
    let kv = k.as_vec2();
    let kb = bezout_complement(k);
    let kb = [kb[0] as f64, kb[1] as f64];
    Ok((0..windows)
        .map(|win| {
            let range = win * len..win * len + len;
            let phi: Vec<f64> = traj.x[range.clone()].iter().map(|x| kv[0] * x[0] + kv[1] * x[1]).collect();
            let dphi: Vec<f64> = traj.y[range.clone()].iter().map(|y| kv[0] * y[0] + kv[1] * y[1]).collect();
            let c = phi.iter().sum::<f64>() / len as f64;
            let crossings = phi.windows(2).filter(|p| (p[0] - c) * (p[1] - c) < 0.0).count();
            if crossings < 4 {
                return None;
            }
            let nu = PI * crossings as f64 / ((len - 1) as f64 * h);
            let z: Vec<Complex64> = phi.iter().zip(&dphi).map(|(&p, &d)| Complex64::new(p - c, -d / nu)).collect();
            let nu = refine_peak(&z, h, &w, nu)?;
            let psi: Vec<Complex64> = traj.x[range]
                .iter()
                .map(|x| Complex64::from_polar(1.0, kb[0] * x[0] + kb[1] * x[1]))
                .collect();
            let arg = |z: &Complex64| z.arg();
            let guess = unwrapped_rate(&psi.iter().map(arg).collect::<Vec<_>>(), h);
            Some([nu, refine_peak(&psi, h, &w, guess)?])
        })
        .collect())
}

/// Mean rate of an angle sampled modulo `2 pi` with spacing `h`.
fn unwrapped_rate(a: &[f64], h: f64) -> f64 {
    let mut total = 0.0;
    for p in a.windows(2) {
        let mut d = p[1] - p[0];
        d -= 2.0 * PI * (d / (2.0 * PI)).round();
        total += d;
    }
    total / ((a.len() - 1) as f64 * h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub class: OrbitClass,
    /// Largest inter-window change of any frequency component.
    pub drift: f64,
    /// Per-window frequencies: angle frequencies for rotating orbits,
    /// `(libration, transverse)` in the resonant frame for librating ones.
    pub omegas: Vec<Option<Vec2>>,
    /// Resonant combination whose angle stayed bounded, if any.
    pub librating: Option<Generator>,
}

fn max_drift(omegas: &[Option<Vec2>]) -> f64 {
    let Some(ws) = omegas.iter().copied().collect::<Option<Vec<Vec2>>>() else {
        return f64::INFINITY;
    };
    let mut drift: f64 = 0.0;
    for a in &ws {
        for b in &ws {
            drift = drift.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
        }
    }
    drift
}

/// Torus test on inter-window frequency drift. An orbit on which some
/// candidate angle `k.x` never winds a full turn is analysed in the frame of
/// `k` and, if it passes, counted as secondary.
pub fn classify_orbit(
    traj: &Trajectory,
    candidates: &[Generator],
    windows: usize,
    hanning_power: u32,
    tol: &Tolerances,
) -> Result<Classification> {
    let candidate = candidates.iter().copied().find(|k| {
        let kv = k.as_vec2();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in &traj.x {
            let a = kv[0] * x[0] + kv[1] * x[1];
            lo = lo.min(a);
            hi = hi.max(a);
        }
        hi - lo < 2.0 * PI
    });
    // a bounded angle without oscillation (slow drift) is a rotating orbit
    let mut bounded = candidate;
    let mut omegas = match bounded {
        Some(k) => libration_frequencies(traj, k, windows, hanning_power)?,
        None => vec![],
    };
    if omegas.iter().any(Option::is_none) || bounded.is_none() {
        bounded = None;
        omegas = fundamental_frequencies(traj, windows, hanning_power)?;
    }
    let drift = max_drift(&omegas);
    let class = if drift >= tol.inconclusive_factor * tol.tol_freq {
        OrbitClass::NonTorus
    } else if drift >= tol.tol_freq {
        OrbitClass::Inconclusive
    } else if bounded.is_some() {
        OrbitClass::Secondary
    } else {
        OrbitClass::Primary
    };
    Ok(Classification {
        class,
        drift,
        omegas,
        librating: bounded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "points")]
pub enum AngleSampling {
    /// One uniformly random angle per action point.
    Uniform,
    /// Every action point is started on each of the listed angle sections.
    Sections(Vec<Vec2>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanDomain {
    Annulus,
    /// The square `[-R, R]^2` without the inner disk removed.
    Square,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    /// Points per side of the action grid over `[-R, R]^2`.
    pub grid: usize,
    pub jitter: bool,
    pub domain: ScanDomain,
    pub sampling: AngleSampling,
    pub dt: f64,
    pub t_final: f64,
    pub stride: usize,
    pub windows: usize,
    pub hanning_power: u32,
    pub tolerances: Tolerances,
    /// How many times an orbit classified non-torus or inconclusive is
    /// integrated again over twice the previous time.
    pub escalations: u32,
    /// Candidate resonances for the libration test: generators up to this
    /// `l1` norm whose resonant profile is nonzero.
    pub candidate_cutoff: usize,
    /// Accepted energy drift in units of `eps sup|f|`.
    pub max_energy_drift: f64,
    pub max_orbits: usize,
    pub seed: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            grid: 170,
            jitter: true,
            domain: ScanDomain::Annulus,
            sampling: AngleSampling::Uniform,
            dt: 0.1,
            t_final: 8000.0,
            stride: 4,
            windows: 2,
            hanning_power: 2,
            tolerances: Tolerances::default(),
            escalations: 2,
            candidate_cutoff: 6,
            max_energy_drift: 0.1,
            max_orbits: 2_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Wilson score interval at 95% confidence.
pub fn wilson_interval(successes: usize, n: usize) -> Interval {
    if n == 0 {
        return Interval {
            estimate: 0.0,
            lo: 0.0,
            hi: 1.0,
        };
    }
    let z = 1.959_963_984_540_054;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let centre = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    Interval {
        estimate: p,
        lo: (centre - half).max(0.0),
        hi: (centre + half).min(1.0),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub primary: usize,
    pub secondary: usize,
    pub non_torus: usize,
    pub inconclusive: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.primary + self.secondary + self.non_torus + self.inconclusive
    }

    fn add(&mut self, c: OrbitClass) {
        match c {
            OrbitClass::Primary => self.primary += 1,
            OrbitClass::Secondary => self.secondary += 1,
            OrbitClass::NonTorus => self.non_torus += 1,
            OrbitClass::Inconclusive => self.inconclusive += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionCounts {
    pub x0: Vec2,
    pub counts: ClassCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub eps: f64,
    pub annulus: Annulus,
    pub config: ScanConfig,
    pub candidates: Vec<Generator>,
    pub counts: ClassCounts,
    pub primary_fraction: Interval,
    pub secondary_fraction: Interval,
    pub torus_fraction: Interval,
    pub non_torus_fraction: Interval,
    pub inconclusive_fraction: f64,
    pub max_energy_drift: f64,
    pub total_steps: u64,
    /// Per-section counts when several angle sections are used.
    pub sections: Vec<SectionCounts>,
}

/// Generators up to `l1` norm `cutoff` carrying a resonance of first or
/// second order: a multiple of the generator is a mode of `f` or a sum of
/// two modes of `f`.
pub fn resonance_candidates(f: &FourierSeries2, cutoff: usize) -> Vec<Generator> {
    let modes: Vec<[i64; 2]> = f.modes().filter(|(_, c)| *c != Complex64::default()).map(|(k, _)| k).collect();
    let mut found = BTreeSet::new();
    let mut add = |k: [i64; 2]| {
        if let Some((g, _)) = Generator::line_of(k) {
            if g.l1() <= cutoff as i64 {
                found.insert(g);
            }
        }
    };
    for (i, &a) in modes.iter().enumerate() {
        add(a);
        for &b in &modes[i..] {
            add([a[0] + b[0], a[1] + b[1]]);
        }
    }
    found.into_iter().collect()
}

/// Initial conditions of a scan in deterministic order.
pub fn initial_conditions(annulus: &Annulus, cfg: &ScanConfig) -> Vec<(Vec2, Vec2, usize)> {
    let n = cfg.grid;
    let big_r = annulus.r_outer;
    let h = 2.0 * big_r / n as f64;
    let mut out = Vec::new();
    for idx in 0..n * n {
        let (i, j) = (idx / n, idx % n);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(idx as u64);
        let mut y = [-big_r + (j as f64 + 0.5) * h, -big_r + (i as f64 + 0.5) * h];
        if cfg.jitter {
            y[0] += h * (rng.gen::<f64>() - 0.5);
            y[1] += h * (rng.gen::<f64>() - 0.5);
        }
        let inside = match cfg.domain {
            ScanDomain::Annulus => annulus.contains(y),
            ScanDomain::Square => y[0].abs() <= big_r && y[1].abs() <= big_r,
        };
        if !inside {
            continue;
        }
        match &cfg.sampling {
            AngleSampling::Uniform => {
                let x = [2.0 * PI * rng.gen::<f64>(), 2.0 * PI * rng.gen::<f64>()];
                out.push((y, x, 0));
            }
            AngleSampling::Sections(xs) => {
                for (s, &x) in xs.iter().enumerate() {
                    out.push((y, x, s));
                }
            }
        }
    }
    out
}

/// Integrates and classifies one orbit, halving `dt` (at most three times)
/// when the energy drift exceeds the configured limit. Orbits that look
/// non-toroidal are integrated again over doubled times, up to
/// `cfg.escalations` times; the first torus verdict stands.
pub fn run_orbit(
    field: &ForceField,
    eps: f64,
    y0: Vec2,
    x0: Vec2,
    cfg: &ScanConfig,
    candidates: &[Generator],
) -> Result<(OrbitSample, u64)> {
    let mut t_final = cfg.t_final;
    let mut total = 0;
    loop {
        let (sample, steps) = orbit_at(field, eps, y0, x0, cfg, t_final, candidates)?;
        total += steps;
        let settled = matches!(sample.class, OrbitClass::Primary | OrbitClass::Secondary);
        if settled || t_final >= cfg.t_final * 2f64.powi(cfg.escalations as i32) {
            return Ok((sample, total));
        }
        t_final *= 2.0;
    }
}

fn orbit_at(
    field: &ForceField,
    eps: f64,
    y0: Vec2,
    x0: Vec2,
    cfg: &ScanConfig,
    t_final: f64,
    candidates: &[Generator],
) -> Result<(OrbitSample, u64)> {
    let limit = cfg.max_energy_drift * eps * field.sup_bound();
    let mut dt = cfg.dt;
    let mut stride = cfg.stride;
    for attempt in 0..4 {
        let steps = (t_final / dt).round() as usize;
        let traj = integrate(field, eps, y0, x0, dt, steps, stride)?;
        if traj.energy_drift > limit && eps > 0.0 {
            if attempt == 3 {
                return Err(Error::EnergyDrift {
                    drift: traj.energy_drift,
                    limit,
                });
            }
            dt *= 0.5;
            stride *= 2;
            continue;
        }
        let c = classify_orbit(&traj, candidates, cfg.windows, cfg.hanning_power, &cfg.tolerances)?;
        return Ok((
            OrbitSample {
                y0,
                x0,
                dt,
                t_final,
                class: c.class,
                omegas: c.omegas,
                drift: c.drift,
                energy_drift: traj.energy_drift,
                librating: c.librating,
            },
            steps as u64,
        ));
    }
    unreachable!("loop returns on the last attempt")
}

/// Classifies every orbit of the grid; returns the report and the per-orbit
/// samples in grid order.
pub fn measure_scan(
    f: &FourierSeries2,
    eps: f64,
    annulus: &Annulus,
    cfg: &ScanConfig,
) -> Result<(ScanReport, Vec<OrbitSample>)> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(invalid(format!("eps = {eps} must be finite and nonnegative")));
    }
    if cfg.grid == 0 || !(cfg.dt > 0.0) || !(cfg.t_final > 0.0) {
        return Err(invalid("scan needs grid >= 1, dt > 0 and t_final > 0"));
    }
    if let AngleSampling::Sections(xs) = &cfg.sampling {
        if xs.is_empty() {
            return Err(invalid("section sampling needs at least one section"));
        }
    }
    let ics = initial_conditions(annulus, cfg);
    if ics.len() > cfg.max_orbits {
        return Err(Error::Budget {
            requested: ics.len(),
            limit: cfg.max_orbits,
        });
    }
    let field = ForceField::new(f);
    let candidates = resonance_candidates(f, cfg.candidate_cutoff);
    let results = ics
        .par_iter()
        .map(|&(y, x, _)| run_orbit(&field, eps, y, x, cfg, &candidates))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = ClassCounts::default();
    let n_sections = match &cfg.sampling {
        AngleSampling::Uniform => 0,
        AngleSampling::Sections(xs) => xs.len(),
    };
    let mut sections: Vec<SectionCounts> = match &cfg.sampling {
        AngleSampling::Uniform => vec![],
        AngleSampling::Sections(xs) => xs
            .iter()
            .map(|&x0| SectionCounts {
                x0,
                counts: ClassCounts::default(),
            })
            .collect(),
    };
    let mut total_steps = 0u64;
    let mut max_drift: f64 = 0.0;
    for ((_, _, s), (sample, steps)) in ics.iter().zip(&results) {
        counts.add(sample.class);
        if n_sections > 0 {
            sections[*s].counts.add(sample.class);
        }
        total_steps += steps;
        max_drift = max_drift.max(sample.energy_drift);
    }
    let n = counts.total();
    let report = ScanReport {
        eps,
        annulus: *annulus,
        config: cfg.clone(),
        candidates,
        primary_fraction: wilson_interval(counts.primary, n),
        secondary_fraction: wilson_interval(counts.secondary, n),
        torus_fraction: wilson_interval(counts.primary + counts.secondary, n),
        non_torus_fraction: wilson_interval(counts.non_torus, n),
        inconclusive_fraction: if n > 0 { counts.inconclusive as f64 / n as f64 } else { 0.0 },
        counts,
        max_energy_drift: max_drift,
        total_steps,
        sections,
    };
    Ok((report, results.into_iter().map(|r| r.0).collect()))
}

pub fn write_orbits_csv<W: std::io::Write>(samples: &[OrbitSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["y1", "y2", "x1", "x2", "class", "omega1", "omega2", "drift", "energy_drift", "t_final"])?;
    for s in samples {
        let class = match s.class {
            OrbitClass::Primary => "primary",
            OrbitClass::Secondary => "secondary",
            OrbitClass::NonTorus => "non_torus",
            OrbitClass::Inconclusive => "inconclusive",
        };
        let (w1, w2) = s.omegas.first().copied().flatten().map_or((String::new(), String::new()), |o| (format!("{:.15e}", o[0]), format!("{:.15e}", o[1])));
        w.write_record([
            format!("{:.15e}", s.y0[0]),
            format!("{:.15e}", s.y0[1]),
            format!("{:.15e}", s.x0[0]),
            format!("{:.15e}", s.x0[1]),
            class.to_string(),
            w1,
            w2,
            format!("{:.6e}", s.drift),
            format!("{:.6e}", s.energy_drift),
            format!("{}", s.t_final),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ScalingFit {
    /// Best fit of `log m = log C - c eps^-a`.
    Fitted {
        a: f64,
        c: f64,
        /// `log C`; `C` itself overflows when `a` is small.
        log_prefactor: f64,
        r2: f64,
        points: usize,
    },
    /// Fewer than three nonzero measures: nothing to fit.
    BelowResolution { nonzero: usize },
}

fn regress(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, intercept, r2)
}

/// Fits `m(eps) = C exp(-c / eps^a)` by scanning `a` over `(0, 1/6)` in
/// steps of 0.001, then refining the best `R^2` by golden-section search.
pub fn scaling_fit(data: &[(f64, f64)]) -> Result<ScalingFit> {
    if data.iter().any(|&(e, m)| !(e > 0.0) || !(m >= 0.0)) {
        return Err(invalid("scaling fit needs eps > 0 and m >= 0"));
    }
    let pts: Vec<(f64, f64)> = data.iter().copied().filter(|&(_, m)| m > 0.0).collect();
    if pts.len() < 3 {
        return Ok(ScalingFit::BelowResolution { nonzero: pts.len() });
    }
    let logm: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let r2_at = |a: f64| {
        let x: Vec<f64> = pts.iter().map(|p| p.0.powf(-a)).collect();
        regress(&x, &logm).2
    };
    let mut best = 0.001;
    for i in 1..=166 {
        let a = i as f64 * 0.001;
        if r2_at(a) > r2_at(best) {
            best = a;
        }
    }
    let (mut lo, mut hi) = ((best - 0.001).max(0.0005), (best + 0.001).min(1.0 / 6.0 - 1e-9));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let c1 = hi - g * (hi - lo);
        let c2 = lo + g * (hi - lo);
        if r2_at(c1) >= r2_at(c2) {
            hi = c2;
        } else {
            lo = c1;
        }
    }
    let a = 0.5 * (lo + hi);
    let x: Vec<f64> = pts.iter().map(|p| p.0.powf(-a)).collect();
    let (slope, intercept, r2) = regress(&x, &logm);
    Ok(ScalingFit::Fitted {
        a,
        c: -slope,
        log_prefactor: intercept,
        r2,
        points: pts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pendulum_rotator() -> FourierSeries2 {
        FourierSeries2::from_entries(1.0, &[([1, 0], Complex64::new(0.5, 0.0))]).unwrap()
    }

    #[test]
    fn force_field_matches_direct_evaluation() {
        let f = crate::fourier::make_example_potential(1.0, 0.5, 6).unwrap();
        let field = ForceField::new(&f);
        let mut s = field.scratch();
        for x in [[0.3, -1.2], [4.0, 2.5]] {
            let (v, g) = field.eval(x, &mut s);
            assert!((v - f.eval(x)).abs() < 1e-13);
            let gd = f.gradient(x);
            assert!((g[0] - gd[0]).abs() < 1e-13 && (g[1] - gd[1]).abs() < 1e-13);
        }
    }

    #[test]
    fn free_flow_is_exact() {
        let field = ForceField::new(&pendulum_rotator());
        let tr = integrate(&field, 0.0, [0.3, -0.7], [1.0, 2.0], 0.1, 1000, 10).unwrap();
        let last = tr.x.len() - 1;
        assert_eq!(tr.y[last], [0.3, -0.7]);
        assert!((tr.x[last][0] - (1.0 + 0.3 * 100.0)).abs() < 1e-12);
        assert!((tr.x[last][1] - (2.0 - 0.7 * 100.0)).abs() < 1e-12);
    }

    #[test]
    fn time_reversal_returns_to_start() {
        let f = crate::fourier::make_example_potential(1.0, 0.5, 4).unwrap();
        let field = ForceField::new(&f);
        let steps = 20_000;
        let fw = integrate(&field, 0.01, [0.4, 0.9], [0.1, 0.2], 0.05, steps, steps).unwrap();
        let (y, x) = (fw.y[1], fw.x[1]);
        let bw = integrate(&field, 0.01, y, x, -0.05, steps, steps).unwrap();
        let tol = 10.0 * f64::EPSILON * steps as f64 * 100.0;
        assert!((bw.x[1][0] - 0.1).abs() < tol && (bw.x[1][1] - 0.2).abs() < tol);
        assert!((bw.y[1][0] - 0.4).abs() < tol && (bw.y[1][1] - 0.9).abs() < tol);
    }

    #[test]
    fn libration_keeps_rotator_constant() {
        let field = ForceField::new(&pendulum_rotator());
        let eps = 1e-3;
        let tr = integrate(&field, eps, [0.01, 0.8], [PI, 0.0], 0.1, 50_000, 10).unwrap();
        assert!(tr.y.iter().all(|y| y[1] == 0.8));
        let (lo, hi) = tr.x.iter().fold((f64::MAX, f64::MIN), |a, x| (a.0.min(x[0]), a.1.max(x[0])));
        assert!(hi - lo < 2.0 * PI);
        assert!(tr.energy_drift < 1e-3 * eps);
    }

    #[test]
    fn energy_error_does_not_grow() {
        let field = ForceField::new(&pendulum_rotator());
        let eps = 1e-3;
        let a = integrate(&field, eps, [0.05, 0.8], [0.0, 0.0], 0.1, 100_000, 100).unwrap();
        let b = integrate(&field, eps, [0.05, 0.8], [0.0, 0.0], 0.1, 1_000_000, 100).unwrap();
        assert!(b.energy_drift < 1.5 * a.energy_drift + 1e-15);
    }

    #[test]
    fn linear_flow_frequencies() {
        let field = ForceField::new(&pendulum_rotator());
        let y0 = [0.61803, 1.0];
        let tr = integrate(&field, 0.0, y0, [0.0, 0.0], 0.5, 2 * 16384, 1).unwrap();
        let w = fundamental_frequencies(&tr, 2, 2).unwrap();
        for om in w {
            let om = om.unwrap();
            assert!((om[0] - y0[0]).abs() < 1e-10 && (om[1] - y0[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn rotation_frequency_matches_period_oracle() {
        // y1 rotation of y1^2/2 + eps cos x1 with energy E: frequency 2 pi / T(E)
        let eps = 1e-3;
        let field = ForceField::new(&pendulum_rotator());
        let y1 = 0.08;
        let tr = integrate(&field, eps, [y1, 0.5], [PI, 0.0], 0.05, 400_000, 4).unwrap();
        let w = fundamental_frequencies(&tr, 2, 2).unwrap();
        let e = 0.5 * y1 * y1 - eps;
        let g = |q: f64| 1.0 / (2.0 * (e - eps * q.cos())).sqrt();
        let (period, _) = crate::quadrature::integrate(&g, 0.0, 2.0 * PI, 1e-13).unwrap();
        let omega = 2.0 * PI / period;
        // leapfrog shifts the frequency by O(dt^2 eps)
        assert!((w[0].unwrap()[0] - omega).abs() < 1e-6, "{:?} {omega}", w[0]);
    }

    #[test]
    fn classification_of_simple_orbits() {
        let f = pendulum_rotator();
        let field = ForceField::new(&f);
        let cfg = ScanConfig::default();
        let cands = resonance_candidates(&f, 4);
        let expect: Vec<Generator> = vec![Generator::new(1, 0).unwrap()];
        assert_eq!(cands, expect);
        let two = FourierSeries2::from_entries(1.0, &[([1, 0], Complex64::new(0.5, 0.0)), ([1, 1], Complex64::new(0.1, 0.0))]).unwrap();
        let got: Vec<[i64; 2]> = resonance_candidates(&two, 4).iter().map(|g| g.as_array()).collect();
        assert_eq!(got, vec![[0, 1], [1, 0], [1, 1], [2, 1]]);
        let (s, _) = run_orbit(&field, 0.0, [0.7, 0.3], [0.0, 0.0], &cfg, &cands).unwrap();
        assert_eq!(s.class, OrbitClass::Primary);
        let (s, _) = run_orbit(&field, 1e-3, [0.01, 0.8], [PI, 0.0], &cfg, &cands).unwrap();
        assert_eq!(s.class, OrbitClass::Secondary);
        let (s, _) = run_orbit(&field, 1e-3, [0.2, 0.8], [0.0, 0.0], &cfg, &cands).unwrap();
        assert_eq!(s.class, OrbitClass::Primary);
    }

    #[test]
    fn wilson_interval_basics() {
        let i = wilson_interval(0, 100);
        assert_eq!(i.estimate, 0.0);
        assert!(i.lo < 1e-12 && i.hi > 0.0 && i.hi < 0.05);
        let i = wilson_interval(50, 100);
        assert!((i.lo - 0.4038).abs() < 1e-3 && (i.hi - 0.5962).abs() < 1e-3);
    }

    #[test]
    fn scaling_fit_recovers_synthetic_law() {
        let eps: [f64; 5] = [0.02, 0.01, 0.005, 0.0025, 0.00125];
        let data: Vec<(f64, f64)> = eps.iter().map(|&e| (e, 0.3 * (-2.0 / e.powf(0.1)).exp())).collect();
        match scaling_fit(&data).unwrap() {
            ScalingFit::Fitted { a, c, log_prefactor, r2, .. } => {
                assert!((a - 0.1).abs() < 0.02);
                assert!((c / 2.0 - 1.0).abs() < 0.05);
                assert!((log_prefactor.exp() / 0.3 - 1.0).abs() < 0.05);
                assert!(r2 > 0.999);
            }
            other => panic!("{other:?}"),
        }
        let zeros = [(0.02, 0.0), (0.01, 0.0), (0.005, 1e-4)];
        assert_eq!(scaling_fit(&zeros).unwrap(), ScalingFit::BelowResolution { nonzero: 1 });
    }

    #[test]
    fn initial_conditions_are_deterministic() {
        let ann = Annulus::new(0.5, 2.0).unwrap();
        let cfg = ScanConfig {
            grid: 20,
            ..Default::default()
        };
        let a = initial_conditions(&ann, &cfg);
        let b = initial_conditions(&ann, &cfg);
        assert_eq!(a, b);
        assert!(a.iter().all(|(y, _, _)| ann.contains(*y)));
    }

    #[test]
    fn zero_coupling_scan_has_no_non_tori() {
        let ann = Annulus::new(0.5, 2.0).unwrap();
        let cfg = ScanConfig {
            grid: 12,
            t_final: 400.0,
            ..Default::default()
        };
        let (r, samples) = measure_scan(&pendulum_rotator(), 0.0, &ann, &cfg).unwrap();
        assert_eq!(r.counts.non_torus, 0);
        assert_eq!(r.counts.inconclusive, 0);
        assert_eq!(r.counts.total(), samples.len());
    }
}
