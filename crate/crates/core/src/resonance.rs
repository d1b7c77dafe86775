//! Resonance geometry of the action annulus.
//!
//! Lattice generators, orthogonal projections along a resonance direction,
//! the splitting of the annulus into the non-resonant zone `D0` and the
//! simple-resonance strips `D1[k]`, and the numerical check that two
//! independent resonances never meet away from the origin.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Vec2 = [f64; 2];

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

pub fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Extended Euclid: returns `(g, x, y)` with `a x + b y = g = gcd(a, b) >= 0`.
pub fn extended_gcd(a: i64, b: i64) -> (i64, i64, i64) {
    let (mut old_r, mut r) = (a, b);
    let (mut old_s, mut s) = (1i64, 0i64);
    let (mut old_t, mut t) = (0i64, 1i64);
    while r != 0 {
        let q = old_r / r;
        (old_r, r) = (r, old_r - q * r);
        (old_s, s) = (s, old_s - q * s);
        (old_t, t) = (t, old_t - q * t);
    }
    if old_r < 0 {
        (-old_r, -old_s, -old_t)
    } else {
        (old_r, old_s, old_t)
    }
}

/// Generator of a maximal one-dimensional sublattice of Z²:
/// `k1 > 0` with `gcd(k1, k2) = 1`, or `k = (0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[i64; 2]", into = "[i64; 2]")]
pub struct Generator {
    k1: i64,
    k2: i64,
}

impl Generator {
    pub fn new(k1: i64, k2: i64) -> Result<Self> {
        if Self::is_valid(k1, k2) {
            Ok(Self { k1, k2 })
        } else {
            Err(Error::NotAGenerator(k1, k2))
        }
    }

    pub fn is_valid(k1: i64, k2: i64) -> bool {
        (k1 > 0 && gcd(k1, k2) == 1) || (k1 == 0 && k2 == 1)
    }

    /// Splits a nonzero lattice vector as `k = j * g` with `g` a generator.
    pub fn line_of(k: [i64; 2]) -> Option<(Generator, i64)> {
        let d = gcd(k[0], k[1]);
        if d == 0 {
            return None;
        }
        let (p1, p2) = (k[0] / d, k[1] / d);
        let (g, j) = if p1 > 0 || (p1 == 0 && p2 > 0) {
            ((p1, p2), d)
        } else {
            ((-p1, -p2), -d)
        };
        Some((Generator { k1: g.0, k2: g.1 }, j))
    }

    pub fn k1(&self) -> i64 {
        self.k1
    }

    pub fn k2(&self) -> i64 {
        self.k2
    }

    pub fn as_array(&self) -> [i64; 2] {
        [self.k1, self.k2]
    }

    pub fn as_vec2(&self) -> Vec2 {
        [self.k1 as f64, self.k2 as f64]
    }

    pub fn l1(&self) -> i64 {
        self.k1.abs() + self.k2.abs()
    }

    pub fn linf(&self) -> i64 {
        self.k1.abs().max(self.k2.abs())
    }

    pub fn euclid(&self) -> f64 {
        norm(self.as_vec2())
    }

    pub fn norm_sq(&self) -> i64 {
        self.k1 * self.k1 + self.k2 * self.k2
    }

    /// `j * k` as a lattice vector.
    pub fn times(&self, j: i64) -> [i64; 2] {
        [j * self.k1, j * self.k2]
    }

    /// Cross product `k2 l1 - k1 l2`; zero iff `l` lies on the line `Zk`.
    pub fn cross(&self, l: [i64; 2]) -> i64 {
        self.k2 * l[0] - self.k1 * l[1]
    }
}

impl TryFrom<[i64; 2]> for Generator {
    type Error = Error;
    fn try_from(k: [i64; 2]) -> Result<Self> {
        Generator::new(k[0], k[1])
    }
}

impl From<Generator> for [i64; 2] {
    fn from(g: Generator) -> Self {
        g.as_array()
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.k1, self.k2)
    }
}

/// All generators with `|k|_1 <= kmax`, sorted lexicographically.
pub fn enumerate_generators(kmax: usize) -> Vec<Generator> {
    let kmax = kmax as i64;
    let mut out = Vec::new();
    if kmax >= 1 {
        out.push(Generator { k1: 0, k2: 1 });
    }
    for k1 in 1..=kmax {
        let rest = kmax - k1;
        for k2 in -rest..=rest {
            if gcd(k1, k2) == 1 {
                out.push(Generator { k1, k2 });
            }
        }
    }
    out
}

/// Orthogonal projection of `y` on the line spanned by `k`.
pub fn proj_parallel(y: Vec2, k: Vec2) -> Result<Vec2> {
    let n2 = dot(k, k);
    if n2 == 0.0 {
        return Err(invalid("projection along k = 0"));
    }
    let c = dot(y, k) / n2;
    Ok([c * k[0], c * k[1]])
}

/// Orthogonal projection of `y` on the line orthogonal to `k`.
pub fn proj_perp(y: Vec2, k: Vec2) -> Result<Vec2> {
    let n2 = dot(k, k);
    if n2 == 0.0 {
        return Err(invalid("projection along k = 0"));
    }
    let c = (y[0] * k[1] - y[1] * k[0]) / n2;
    Ok([c * k[1], -c * k[0]])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annulus {
    pub r_inner: f64,
    pub r_outer: f64,
}

impl Annulus {
    pub fn new(r_inner: f64, r_outer: f64) -> Result<Self> {
        if !(r_inner > 0.0 && r_inner < r_outer && r_outer.is_finite()) {
            return Err(invalid(format!(
                "annulus needs 0 < r < R, got r = {r_inner}, R = {r_outer}"
            )));
        }
        Ok(Self { r_inner, r_outer })
    }

    pub fn contains(&self, y: Vec2) -> bool {
        let n = norm(y);
        n >= self.r_inner && n <= self.r_outer
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * (self.r_outer.powi(2) - self.r_inner.powi(2))
    }
}

/// How the small-divisor threshold is tied to the inner radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    /// `alpha = r / (32 K)`, the hypothesis of the no-double-resonance lemma.
    #[default]
    Lemma,
    /// `alpha = r / 2`, kept as an alternative configuration.
    HalfRadius,
}

/// `K = ceil(eps^-a)` and the matching small-divisor threshold.
pub fn choose_parameters(r: f64, eps: f64, a: f64, rule: AlphaRule) -> Result<(f64, usize)> {
    if !(a > 0.0 && a < 1.0 / 6.0) {
        return Err(invalid(format!("exponent a = {a} must lie in (0, 1/6)")));
    }
    if !(eps > 0.0) || !(r > 0.0) {
        return Err(invalid("choose_parameters needs eps > 0 and r > 0"));
    }
    let k = eps.powf(-a).ceil().max(1.0) as usize;
    let alpha = match rule {
        AlphaRule::Lemma => r / (32.0 * k as f64),
        AlphaRule::HalfRadius => r / 2.0,
    };
    Ok((alpha, k))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "zone", content = "generators", rename_all = "snake_case")]
pub enum ZoneLabel {
    NonResonant,
    Resonant(Vec<Generator>),
}

impl fmt::Display for ZoneLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ZoneLabel::NonResonant => write!(f, "D0"),
            ZoneLabel::Resonant(ks) => {
                write!(f, "D1")?;
                for k in ks {
                    write!(f, "{k}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneDecomposition {
    pub annulus: Annulus,
    pub alpha: f64,
    pub cutoff: usize,
    pub generators: Vec<Generator>,
}

impl ZoneDecomposition {
    pub fn new(annulus: Annulus, alpha: f64, cutoff: usize) -> Result<Self> {
        if !(alpha > 0.0) || cutoff == 0 {
            return Err(invalid("zones need alpha > 0 and K >= 1"));
        }
        Ok(Self {
            annulus,
            alpha,
            cutoff,
            generators: enumerate_generators(cutoff),
        })
    }

    /// Zone label of `y`; a point with `|y.k| = alpha` belongs to `D1[k]`.
    pub fn classify(&self, y: Vec2) -> Result<ZoneLabel> {
        if !self.annulus.contains(y) {
            return Err(Error::OutsideAnnulus(y[0], y[1]));
        }
        Ok(self.label(y))
    }

    fn label(&self, y: Vec2) -> ZoneLabel {
        let hits: Vec<Generator> = self
            .generators
            .iter()
            .copied()
            .filter(|g| dot(y, g.as_vec2()).abs() <= self.alpha)
            .collect();
        if hits.is_empty() {
            ZoneLabel::NonResonant
        } else {
            ZoneLabel::Resonant(hits)
        }
    }

    pub fn is_non_resonant(&self, y: Vec2) -> bool {
        self.annulus.contains(y)
            && self
                .generators
                .iter()
                .all(|g| dot(y, g.as_vec2()).abs() > self.alpha)
    }

    /// Classifies the points of an `n x n` grid over the bounding square that
    /// fall inside the annulus, in row-major order.
    pub fn classify_grid(&self, n: usize) -> Vec<(Vec2, ZoneLabel)> {
        let big_r = self.annulus.r_outer;
        let step = if n > 1 { 2.0 * big_r / (n - 1) as f64 } else { 0.0 };
        let points: Vec<Vec2> = (0..n * n)
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                [-big_r + j as f64 * step, -big_r + i as f64 * step]
            })
            .filter(|&y| self.annulus.contains(y))
            .collect();
        points
            .par_iter()
            .map(|&y| (y, self.label(y)))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, n: usize, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["y1", "y2", "label"])?;
        for (y, label) in self.classify_grid(n) {
            w.write_record([format!("{:.12e}", y[0]), format!("{:.12e}", y[1]), label.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Margin `|y.l| - r/(4|k|)` of the no-double-resonance inequality, after
/// checking every hypothesis of the lemma.
pub fn double_resonance_gap(
    y: Vec2,
    k: Generator,
    l: [i64; 2],
    r: f64,
    alpha: f64,
    cutoff: usize,
) -> Result<f64> {
    let limit = r / (32.0 * cutoff as f64);
    if alpha > limit {
        return Err(Error::AlphaTooLarge { alpha, limit });
    }
    if k.euclid() > cutoff as f64 {
        return Err(Error::GeneratorTooLong {
            norm: k.euclid(),
            cutoff,
        });
    }
    if k.cross(l) == 0 {
        return Err(Error::ParallelToGenerator { k, l });
    }
    let l_norm = norm([l[0] as f64, l[1] as f64]);
    if l_norm > 8.0 * cutoff as f64 {
        return Err(Error::LatticeVectorTooLong {
            norm: l_norm,
            limit: 8.0 * cutoff as f64,
        });
    }
    if norm(y) < r {
        return Err(Error::OutsideAnnulus(y[0], y[1]));
    }
    if dot(y, k.as_vec2()).abs() > alpha {
        return Err(Error::NotInResonantZone(k));
    }
    let yl = (y[0] * l[0] as f64 + y[1] * l[1] as f64).abs();
    Ok(yl - r / (4.0 * k.euclid()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_generators(kmax: i64) -> Vec<Generator> {
        let mut v = Vec::new();
        for k1 in -kmax..=kmax {
            for k2 in -kmax..=kmax {
                if k1.abs() + k2.abs() <= kmax && Generator::is_valid(k1, k2) {
                    v.push(Generator { k1, k2 });
                }
            }
        }
        v.sort();
        v
    }

    #[test]
    fn small_generator_sets() {
        let g1 = enumerate_generators(1);
        assert_eq!(g1, vec![Generator::new(0, 1).unwrap(), Generator::new(1, 0).unwrap()]);
        let mut g2: Vec<[i64; 2]> = enumerate_generators(2).iter().map(|g| g.as_array()).collect();
        g2.sort();
        assert_eq!(g2, vec![[0, 1], [1, -1], [1, 0], [1, 1]]);
        assert_eq!(enumerate_generators(10), brute_generators(10));
    }

    #[test]
    fn generator_validation() {
        assert!(Generator::new(2, 4).is_err());
        assert!(Generator::new(-1, 0).is_err());
        assert!(Generator::new(0, -1).is_err());
        assert!(Generator::new(3, -2).is_ok());
    }

    #[test]
    fn lines_partition_the_lattice() {
        let kmax = 100i64;
        let gens: std::collections::HashSet<Generator> =
            enumerate_generators(kmax as usize).into_iter().collect();
        for k1 in -kmax..=kmax {
            let rest = kmax - k1.abs();
            for k2 in -rest..=rest {
                if k1 == 0 && k2 == 0 {
                    continue;
                }
                let (g, j) = Generator::line_of([k1, k2]).unwrap();
                assert_eq!(g.times(j), [k1, k2]);
                assert!(gens.contains(&g));
            }
        }
        // every k lies on exactly one generator line
        let small = enumerate_generators(20);
        for k1 in -20i64..=20 {
            for k2 in -20i64..=20 {
                if (k1, k2) == (0, 0) || k1.abs() + k2.abs() > 20 {
                    continue;
                }
                let hits = small.iter().filter(|g| g.cross([k1, k2]) == 0).count();
                assert_eq!(hits, 1);
            }
        }
    }

    #[test]
    fn projections() {
        let p = proj_parallel([1.0, 0.0], [0.0, 1.0]).unwrap();
        let q = proj_perp([1.0, 0.0], [0.0, 1.0]).unwrap();
        assert_eq!(p, [0.0, 0.0]);
        assert_eq!(q, [1.0, 0.0]);
        let p = proj_parallel([1.0, 1.0], [1.0, 1.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15);
        assert_eq!(proj_perp([1.0, 1.0], [1.0, 1.0]).unwrap(), [0.0, 0.0]);
        // (y1 k2 - y2 k1)/|k|^2 = (-2 - 1)/2 times (k2, -k1) = (-1, -1)
        let q = proj_perp([2.0, 1.0], [1.0, -1.0]).unwrap();
        assert_eq!(q, [1.5, 1.5]);
        assert!(proj_perp([1.0, 1.0], [0.0, 0.0]).is_err());
    }

    #[test]
    fn boundary_is_resonant() {
        let zones = ZoneDecomposition::new(Annulus::new(0.5, 2.0).unwrap(), 0.1, 1).unwrap();
        let label = zones.classify([1.0, 0.1]).unwrap();
        assert_eq!(label, ZoneLabel::Resonant(vec![Generator::new(0, 1).unwrap()]));
        assert_eq!(zones.classify([1.0, 0.0]).unwrap().to_string(), "D1(0,1)");
        assert_eq!(zones.classify([1.0, 0.5]).unwrap(), ZoneLabel::NonResonant);
        assert!(zones.classify([0.1, 0.1]).is_err());
    }

    #[test]
    fn lemma_example_and_rejections() {
        let alpha = 1.0 / 128.0;
        let k = Generator::new(1, 0).unwrap();
        let m = double_resonance_gap([alpha / 2.0, 1.0], k, [0, 1], 1.0, alpha, 4).unwrap();
        assert!((m - 0.75).abs() < 1e-15);
        assert!(matches!(
            double_resonance_gap([alpha / 2.0, 1.0], k, [2, 0], 1.0, alpha, 4),
            Err(Error::ParallelToGenerator { .. })
        ));
        assert!(matches!(
            double_resonance_gap([alpha / 2.0, 1.0], k, [0, 1], 1.0, 0.1, 4),
            Err(Error::AlphaTooLarge { .. })
        ));
        assert!(matches!(
            double_resonance_gap([alpha / 2.0, 1.0], k, [0, 40], 1.0, alpha, 4),
            Err(Error::LatticeVectorTooLong { .. })
        ));
    }

    #[test]
    fn parameter_choice() {
        let (alpha, k) = choose_parameters(1.0, 1e-6, 0.1, AlphaRule::Lemma).unwrap();
        assert_eq!(k, 4);
        assert!(alpha * 32.0 * k as f64 <= 1.0 + 1e-15);
        let (alpha, _) = choose_parameters(1.0, 1e-6, 0.1, AlphaRule::HalfRadius).unwrap();
        assert_eq!(alpha, 0.5);
        assert!(choose_parameters(1.0, 1e-6, 0.2, AlphaRule::Lemma).is_err());
        let mut last = 0;
        for e in 1..12 {
            let (_, k) = choose_parameters(1.0, 10f64.powi(-e), 0.15, AlphaRule::Lemma).unwrap();
            assert!(k >= last);
            last = k;
        }
    }

    #[test]
    fn extended_gcd_identity() {
        for a in -30i64..30 {
            for b in -30i64..30 {
                let (g, x, y) = extended_gcd(a, b);
                assert_eq!(g, gcd(a, b));
                assert_eq!(a * x + b * y, g);
            }
        }
    }
}
