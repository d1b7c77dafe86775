//! Experiment driver: one JSON configuration, one function per stage, and
//! artifacts (JSON envelopes and CSV tables) written to an output directory.
//!
//! Every JSON artifact has the shape `{subcommand, config, result, meta}`.
//! Everything outside `meta` is a function of the configuration alone, so
//! runs with different worker counts produce byte-identical payloads.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::Matrix2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{invalid, Error, Result};
use crate::fourier::{check_genericity, make_example_potential, p1_floor, FourierSeries2, GenericityConfig, GenericityReport};
use crate::kam::{self, Budget, KamCertificate, KamInput};
use crate::normal_form::{
    average_nonresonant, average_simple_resonance, nonresonant_centers, NonResonantBounds, NormalFormConfig,
    NormalFormSummary, ResonantBounds,
};
use crate::pendulum::{
    admissible_region, fit_twist_exponent, log_grid, log_split_fit, twist_hessian, unresolved_band, AdmissibleRegion,
    ChartParams, LogSplitFit, PendulumChart, PowerFit, Region, TwistPoint,
};
use crate::resonance::{choose_parameters, enumerate_generators, AlphaRule, Annulus, Generator, Vec2, ZoneDecomposition, ZoneLabel};
use crate::scan::{measure_scan, scaling_fit, write_orbits_csv, Interval, ScalingFit, ScanConfig, ScanReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSource {
    /// Amplitude `delta |k|_1^-2 e^{-|k|_1 s}` on every generator up to `kmax`.
    Example,
    /// `cos x1`.
    PendulumRotator,
    /// Potential file, relative to the configuration file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChartConfig {
    /// `|E - E0|` range of the log-split fit.
    pub z_min: f64,
    pub z_max: f64,
    pub z_points: usize,
    pub deg_phi: usize,
    pub deg_chi: usize,
    /// `|E - E0|` range of the twist grid.
    pub twist_z_min: f64,
    pub twist_z_max: f64,
    pub twist_points: usize,
    /// Transverse momenta sampled across the chart.
    pub p1_points: usize,
    /// Twist threshold; defaults to `exp(-c2 / eps^a)`.
    pub theta: Option<f64>,
}

impl Default for ChartConfig {
    fn default() -> Self {
        Self {
            z_min: 1e-6,
            z_max: 1e-2,
            z_points: 40,
            deg_phi: 5,
            deg_chi: 4,
            twist_z_min: 1e-6,
            twist_z_max: 1e-2,
            twist_points: 12,
            p1_points: 3,
            theta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub potential: PotentialSource,
    /// Analyticity width of the potential.
    pub s: f64,
    pub delta: f64,
    /// Largest `|k|_1` of the builtin example and of the genericity check.
    pub kmax: usize,
    /// Exponent of `K = ceil(eps^-a)`.
    pub a: f64,
    pub c_universal: f64,
    pub c_kam: f64,
    pub c2: f64,
    pub tau: f64,
    pub alpha_rule: AlphaRule,
    pub r: f64,
    pub r_outer: f64,
    pub eps: Vec<f64>,
    /// Points per side of the exported zone map.
    pub zone_grid: usize,
    pub genericity: GenericityConfig,
    pub normal_form: NormalFormConfig,
    /// Number of `D0` patches normalized per `eps`.
    pub nonresonant_patches: usize,
    /// Resonant normal forms and charts are built for generators up to this `|k|_1`.
    pub resonant_l1: usize,
    pub chart: ChartConfig,
    pub scan: ScanConfig,
    pub seed: u64,
    /// Thread count (0: all cores). Kept out of the payload; reported in `meta`.
    #[serde(skip_serializing)]
    pub workers: usize,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            potential: PotentialSource::Example,
            s: 1.0,
            delta: 0.5,
            kmax: 10,
            a: 0.1,
            c_universal: 2.0,
            c_kam: 1e-3,
            c2: 1.0,
            tau: 1.5,
            alpha_rule: AlphaRule::Lemma,
            r: 0.5,
            r_outer: 2.0,
            eps: vec![1e-3],
            zone_grid: 200,
            genericity: GenericityConfig::default(),
            normal_form: NormalFormConfig::default(),
            nonresonant_patches: 2,
            resonant_l1: 2,
            chart: ChartConfig::default(),
            scan: ScanConfig::default(),
            seed: 0,
            workers: 0,
            base_dir: PathBuf::new(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a configuration; relative potential paths are
    /// resolved against `base_dir`.
    pub fn from_json_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json_str(&text, &base)
    }

    /// Serialized configuration with every default expanded.
    pub fn effective(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("configuration serializes");
        v["scan"]["seed"] = json!(self.seed);
        v
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn set_base_dir(&mut self, dir: &Path) {
        self.base_dir = dir.to_path_buf();
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a < 1.0 / 6.0) {
            return Err(invalid(format!("a = {} must lie in (0, 1/6)", self.a)));
        }
        if !(0.0 < self.r && self.r < self.r_outer && self.r_outer.is_finite()) {
            return Err(invalid("annulus radii must satisfy 0 < r < R"));
        }
        if !(self.s > 0.0 && self.delta > 0.0) || self.kmax == 0 {
            return Err(invalid("s, delta and kmax must be positive"));
        }
        if self.eps.is_empty() || self.eps.iter().any(|e| !(*e >= 0.0 && *e < 1.0)) {
            return Err(invalid("eps list must be nonempty with values in [0, 1)"));
        }
        if !(self.c_kam > 0.0 && self.c_kam < 1.0) || !(self.c2 > 0.0) || !(self.tau > 1.0) {
            return Err(invalid("need 0 < c_kam < 1, c2 > 0 and tau > 1"));
        }
        if let Some(t) = self.chart.theta {
            if !(t > 0.0 && t < 1.0) {
                return Err(invalid("chart theta must lie in (0, 1)"));
            }
        }
        if let PotentialSource::File { path } = &self.potential {
            let p = self.base_dir.join(path);
            if !p.is_file() {
                return Err(invalid(format!("potential file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn potential(&self) -> Result<FourierSeries2> {
        match &self.potential {
            PotentialSource::Example => make_example_potential(self.s, self.delta, self.kmax),
            PotentialSource::PendulumRotator => FourierSeries2::from_entries(self.s, &[([1, 0], Complex64::new(0.5, 0.0))]),
            PotentialSource::File { path } => {
                let f = FourierSeries2::load_json(&self.base_dir.join(path))?;
                if f.s() != self.s {
                    return Err(invalid(format!("potential file has s = {}, configuration has s = {}", f.s(), self.s)));
                }
                Ok(f)
            }
        }
    }

    pub fn annulus(&self) -> Result<Annulus> {
        Annulus::new(self.r, self.r_outer)
    }

    fn scan_config(&self) -> ScanConfig {
        ScanConfig {
            seed: self.seed,
            ..self.scan.clone()
        }
    }

    fn positive_eps(&self) -> Vec<f64> {
        self.eps.iter().copied().filter(|&e| e > 0.0).collect()
    }

    fn zones(&self, eps: f64) -> Result<ZoneDecomposition> {
        let (alpha, k) = choose_parameters(self.r, eps, self.a, self.alpha_rule)?;
        ZoneDecomposition::new(self.annulus()?, alpha, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    CheckPotential,
    Zones,
    NormalForm,
    Chart,
    Kam,
    Scan,
    Fit,
    All,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::CheckPotential,
        Stage::Zones,
        Stage::NormalForm,
        Stage::Chart,
        Stage::Kam,
        Stage::Scan,
        Stage::Fit,
        Stage::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::CheckPotential => "check-potential",
            Stage::Zones => "zones",
            Stage::NormalForm => "normal-form",
            Stage::Chart => "chart",
            Stage::Kam => "kam",
            Stage::Scan => "scan",
            Stage::Fit => "fit",
            Stage::All => "all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| invalid(format!("unknown subcommand {s}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    /// Stage result; wrapped in the envelope when written.
    Json(Value),
    Csv(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub stage: Stage,
    pub artifacts: Vec<Artifact>,
    /// An inconclusive genericity check or orbit classification occurred.
    pub inconclusive: bool,
    pub elapsed: f64,
    pub workers: usize,
}

impl RunOutput {
    pub fn exit_code(&self) -> i32 {
        if self.inconclusive {
            4
        } else {
            0
        }
    }

    pub fn json(&self, name: &str) -> Option<&Value> {
        self.artifacts.iter().find_map(|a| match &a.body {
            Body::Json(v) if a.name == name => Some(v),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ZoneSummary {
    pub eps: f64,
    pub alpha: f64,
    pub cutoff: usize,
    pub generators: usize,
    pub grid_points: usize,
    /// Fraction of the grid points of the annulus lying in `D0`.
    pub non_resonant_fraction: f64,
    pub csv: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct NonResonantPatch {
    pub center: Vec2,
    pub bounds: NonResonantBounds,
    pub summary: NormalFormSummary,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ResonantOutcome {
    Ok {
        k: Generator,
        bounds: ResonantBounds,
        summary: Box<NormalFormSummary>,
    },
    Failed {
        k: Generator,
        kind: String,
        message: String,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct NormalFormEntry {
    pub eps: f64,
    pub alpha: f64,
    pub cutoff: usize,
    pub non_resonant: Vec<NonResonantPatch>,
    pub resonant: Vec<ResonantOutcome>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChartSummary {
    pub lambda: f64,
    pub theta_k: f64,
    pub width_ratio: f64,
    pub eta: f64,
    pub frozen_p2_error: f64,
    pub p1_center: f64,
    pub p1_halfwidth: f64,
    pub separatrix_energy: f64,
    pub log_split: Vec<(Region, LogSplitFit)>,
    pub twist_exponent: Option<PowerFit>,
    pub c0: Option<f64>,
    pub c1: Option<f64>,
    pub admissible: AdmissibleRegion,
    pub csv: String,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ChartOutcome {
    Built {
        eps: f64,
        k: Generator,
        chart: Box<ChartSummary>,
    },
    Refused {
        eps: f64,
        k: Generator,
        kind: String,
        message: String,
    },
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum KamPatch {
    Evaluated {
        center: Vec2,
        input: KamInput,
        certificate: KamCertificate,
    },
    /// The inputs are outside the range of the certificate (for instance a
    /// zero remainder width when `K <= 2`).
    Rejected {
        center: Vec2,
        input: KamInput,
        message: String,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct KamEntry {
    pub eps: f64,
    pub patches: Vec<KamPatch>,
    pub budget_d0: f64,
    pub budget: Budget,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitPoint {
    pub eps: f64,
    pub non_torus: Interval,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub points: Vec<FitPoint>,
    pub strictly_decreasing: bool,
    pub fit: ScalingFit,
}

/// Runs one stage in a pool of `cfg.workers` threads.
pub fn run(stage: Stage, cfg: &ExperimentConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let workers = pool.current_num_threads();
    let mut runner = Runner {
        cfg,
        f: cfg.potential()?,
        artifacts: vec![],
        inconclusive: false,
        scans: None,
    };
    pool.install(|| runner.stage(stage))?;
    Ok(RunOutput {
        stage,
        artifacts: runner.artifacts,
        inconclusive: runner.inconclusive,
        elapsed: start.elapsed().as_secs_f64(),
        workers,
    })
}

/// Writes the artifacts of `out` into `dir`; returns the written paths.
pub fn write_artifacts(out: &RunOutput, cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = vec![];
    for a in &out.artifacts {
        let path = dir.join(&a.name);
        match &a.body {
            Body::Json(result) => {
                let env = envelope(out, cfg, result);
                std::fs::write(&path, serde_json::to_string_pretty(&env)? + "\n")?;
            }
            Body::Csv(bytes) => std::fs::write(&path, bytes)?,
        }
        written.push(path);
    }
    Ok(written)
}

pub fn envelope(out: &RunOutput, cfg: &ExperimentConfig, result: &Value) -> Value {
    json!({
        "subcommand": out.stage.name(),
        "config": cfg.effective(),
        "result": result,
        "meta": {
            "elapsed_seconds": out.elapsed,
            "workers": out.workers,
            "version": env!("CARGO_PKG_VERSION"),
        },
    })
}

/// Machine-readable error report.
pub fn error_json(err: &Error) -> Value {
    json!({
        "error": {
            "kind": err.kind(),
            "message": err.to_string(),
            "exit_code": err.exit_code(),
        }
    })
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    f: FourierSeries2,
    artifacts: Vec<Artifact>,
    inconclusive: bool,
    scans: Option<Vec<ScanReport>>,
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

impl Runner<'_> {
    fn push_json(&mut self, name: &str, v: Value) {
        self.artifacts.push(Artifact {
            name: name.to_string(),
            body: Body::Json(v),
        });
    }

    fn push_csv(&mut self, name: String, bytes: Vec<u8>) {
        self.artifacts.push(Artifact {
            name,
            body: Body::Csv(bytes),
        });
    }

    fn stage(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::CheckPotential => self.check_potential(),
            Stage::Zones => self.zones(),
            Stage::NormalForm => self.normal_form(),
            Stage::Chart => self.chart(),
            Stage::Kam => self.kam(),
            Stage::Scan => self.scan(),
            Stage::Fit => self.fit(),
            Stage::All => {
                for st in &Stage::ALL[..7] {
                    self.stage(*st)?;
                }
                Ok(())
            }
        }
    }

    fn check_potential(&mut self) -> Result<()> {
        let c = self.cfg;
        let gcfg = GenericityConfig {
            c_universal: c.c_universal,
            ..c.genericity
        };
        let report: GenericityReport = check_genericity(&self.f, c.s, c.delta, c.kmax, &gcfg)?;
        self.inconclusive |= !report.inconclusive.is_empty();
        let v = json!({ "passed": report.passed(), "report": report });
        self.push_json("genericity.json", v);
        Ok(())
    }

    fn zones(&mut self) -> Result<()> {
        let mut summaries = vec![];
        for (i, eps) in self.cfg.positive_eps().into_iter().enumerate() {
            let zones = self.cfg.zones(eps)?;
            let grid = zones.classify_grid(self.cfg.zone_grid);
            let d0 = grid.iter().filter(|(_, l)| *l == ZoneLabel::NonResonant).count();
            let mut bytes = vec![];
            zones.write_csv(self.cfg.zone_grid, &mut bytes)?;
            let name = format!("zones_{i}.csv");
            self.push_csv(name.clone(), bytes);
            summaries.push(ZoneSummary {
                eps,
                alpha: zones.alpha,
                cutoff: zones.cutoff,
                generators: zones.generators.len(),
                grid_points: grid.len(),
                non_resonant_fraction: if grid.is_empty() { 0.0 } else { d0 as f64 / grid.len() as f64 },
                csv: name,
            });
        }
        let v = to_value(&summaries)?;
        self.push_json("zones.json", v);
        Ok(())
    }

    fn resonant_generators(&self, zones: &ZoneDecomposition) -> Vec<Generator> {
        enumerate_generators(self.cfg.resonant_l1)
            .into_iter()
            .filter(|k| k.euclid() <= zones.cutoff as f64)
            .collect()
    }

    fn normal_form(&mut self) -> Result<()> {
        let c = self.cfg;
        let mut entries = vec![];
        for eps in c.positive_eps() {
            let zones = c.zones(eps)?;
            let mut non_resonant = vec![];
            for center in nonresonant_centers(&zones, c.nonresonant_patches) {
                let avg = average_nonresonant(&self.f, eps, &zones, center, &c.normal_form)?;
                non_resonant.push(NonResonantPatch {
                    center,
                    bounds: avg.bounds,
                    summary: avg.result.summary(),
                });
            }
            let resonant = self
                .resonant_generators(&zones)
                .into_iter()
                .map(|k| match average_simple_resonance(&self.f, eps, k, &zones, None, &c.normal_form) {
                    Ok(avg) => ResonantOutcome::Ok {
                        k,
                        bounds: avg.bounds,
                        summary: Box::new(avg.result.summary()),
                    },
                    Err(e) => ResonantOutcome::Failed {
                        k,
                        kind: e.kind().to_string(),
                        message: e.to_string(),
                    },
                })
                .collect();
            entries.push(NormalFormEntry {
                eps,
                alpha: zones.alpha,
                cutoff: zones.cutoff,
                non_resonant,
                resonant,
            });
        }
        let v = to_value(&entries)?;
        self.push_json("normal_form.json", v);
        Ok(())
    }

    fn chart(&mut self) -> Result<()> {
        let c = self.cfg;
        let mut outcomes = vec![];
        for (i, eps) in c.positive_eps().into_iter().enumerate() {
            let zones = c.zones(eps)?;
            for k in self.resonant_generators(&zones) {
                match self.build_chart(eps, k, &zones) {
                    Ok((summary, table)) => {
                        let name = format!("chart_{i}_{}_{}.csv", k.k1(), k.k2());
                        self.push_csv(name.clone(), table);
                        outcomes.push(ChartOutcome::Built {
                            eps,
                            k,
                            chart: Box::new(ChartSummary { csv: name, ..summary }),
                        });
                    }
                    Err(e) if e.exit_code() == 3 => outcomes.push(ChartOutcome::Refused {
                        eps,
                        k,
                        kind: e.kind().to_string(),
                        message: e.to_string(),
                    }),
                    Err(e) => return Err(e),
                }
            }
        }
        let v = to_value(&outcomes)?;
        self.push_json("chart.json", v);
        Ok(())
    }

    fn build_chart(&self, eps: f64, k: Generator, zones: &ZoneDecomposition) -> Result<(ChartSummary, Vec<u8>)> {
        let c = self.cfg;
        let cc = &c.chart;
        let avg = average_simple_resonance(&self.f, eps, k, zones, None, &c.normal_form)?;
        let params = ChartParams {
            eps,
            r: c.r,
            r_outer: c.r_outer,
            cutoff: zones.cutoff,
            p1_floor: Some(p1_floor(c.delta, c.s, k.l1())),
        };
        let chart = PendulumChart::build(k, self.f.coeff(k.as_array()), Box::new(avg), &params)?;
        let p0 = chart.p1_center;
        let zs = log_grid(cc.z_min, cc.z_max, cc.z_points);
        let log_split = [Region::Plus, Region::Libration]
            .into_iter()
            .map(|r| Ok((r, log_split_fit(&chart, r, p0, &zs, cc.deg_phi, cc.deg_chi)?)))
            .collect::<Result<Vec<_>>>()?;
        let p1s: Vec<f64> = if cc.p1_points <= 1 {
            vec![p0]
        } else {
            (0..cc.p1_points)
                .map(|i| p0 + 0.5 * chart.p1_halfwidth * (2.0 * i as f64 / (cc.p1_points - 1) as f64 - 1.0))
                .collect()
        };
        let tz = log_grid(cc.twist_z_min, cc.twist_z_max, cc.twist_points);
        let report = twist_hessian(&chart, &p1s, &tz, &[Region::Plus, Region::Minus, Region::Libration])?;
        let theta = cc.theta.unwrap_or_else(|| (-c.c2 / eps.powf(c.a)).exp());
        let mut admissible = admissible_region(&report, theta)?;
        unresolved_band(&chart, &report, &mut admissible)?;
        let summary = ChartSummary {
            lambda: chart.lambda,
            theta_k: chart.theta_k,
            width_ratio: chart.width_ratio,
            eta: chart.eta,
            frozen_p2_error: chart.frozen_p2_error,
            p1_center: p0,
            p1_halfwidth: chart.p1_halfwidth,
            separatrix_energy: chart.separatrix_energy(p0)?,
            log_split,
            twist_exponent: fit_twist_exponent(&report, Region::Plus, (cc.twist_z_min, cc.twist_z_max)).ok(),
            c0: report.c0,
            c1: report.c1,
            admissible,
            csv: String::new(),
        };
        Ok((summary, twist_csv(&report.points)?))
    }

    fn kam(&mut self) -> Result<()> {
        let c = self.cfg;
        let mut entries = vec![];
        for eps in c.positive_eps() {
            let zones = c.zones(eps)?;
            let mut patches = vec![];
            for center in nonresonant_centers(&zones, c.nonresonant_patches) {
                let avg = average_nonresonant(&self.f, eps, &zones, center, &c.normal_form)?;
                let patch = &avg.g0.patch;
                let zero = vec![Complex64::default(); patch.len()];
                let g = avg.g0.mode([0, 0]).map_or(zero, <[Complex64]>::to_vec);
                let [gx, gy] = patch.gradient(&g);
                let [gxx, gxy] = patch.gradient(&gx);
                let [_, gyy] = patch.gradient(&gy);
                let samples: Vec<Matrix2<f64>> = (0..patch.len())
                    .map(|i| {
                        let h = Matrix2::new(gxx[i].re, gxy[i].re, gxy[i].re, gyy[i].re) * eps;
                        Matrix2::identity() + h
                    })
                    .collect();
                let (m_hess, d_det) = kam::hessian_bounds(&samples)?;
                let input = KamInput {
                    tau: c.tau,
                    c_kam: c.c_kam,
                    ..KamInput::new(
                        m_hess,
                        d_det,
                        eps * avg.bounds.remainder,
                        patch.half_width,
                        avg.bounds.s_measured,
                        2.0 * c.r_outer,
                    )
                };
                patches.push(match kam::evaluate(&input) {
                    Ok(certificate) => KamPatch::Evaluated {
                        center,
                        input,
                        certificate,
                    },
                    Err(e) => KamPatch::Rejected {
                        center,
                        input,
                        message: e.to_string(),
                    },
                });
            }
            entries.push(KamEntry {
                eps,
                patches,
                budget_d0: kam::budget_d0(c.s, eps, c.a)?,
                budget: kam::budget_total(eps, c.a, c.r, c.r_outer, c.s, c.c2)?,
            });
        }
        let v = to_value(&entries)?;
        self.push_json("kam.json", v);
        Ok(())
    }

    fn run_scans(&mut self) -> Result<Vec<ScanReport>> {
        if let Some(s) = &self.scans {
            return Ok(s.clone());
        }
        let c = self.cfg;
        let ann = c.annulus()?;
        let scfg = c.scan_config();
        let mut reports = vec![];
        for (i, &eps) in c.eps.iter().enumerate() {
            let (report, samples) = measure_scan(&self.f, eps, &ann, &scfg)?;
            let mut bytes = vec![];
            write_orbits_csv(&samples, &mut bytes)?;
            self.push_csv(format!("orbits_{i}.csv"), bytes);
            self.inconclusive |= report.counts.inconclusive > 0;
            reports.push(report);
        }
        self.scans = Some(reports.clone());
        Ok(reports)
    }

    fn scan(&mut self) -> Result<()> {
        let reports = self.run_scans()?;
        let v = to_value(&reports)?;
        self.push_json("scan.json", v);
        Ok(())
    }

    fn fit(&mut self) -> Result<()> {
        let reports = self.run_scans()?;
        let points: Vec<FitPoint> = reports
            .iter()
            .filter(|r| r.eps > 0.0)
            .map(|r| FitPoint {
                eps: r.eps,
                non_torus: r.non_torus_fraction,
            })
            .collect();
        let data: Vec<(f64, f64)> = points.iter().map(|p| (p.eps, p.non_torus.estimate)).collect();
        let mut by_eps = data.clone();
        by_eps.sort_by(|a, b| b.0.total_cmp(&a.0));
        let result = FitResult {
            strictly_decreasing: by_eps.windows(2).all(|w| w[1].1 < w[0].1),
            fit: scaling_fit(&data)?,
            points,
        };
        let v = to_value(&result)?;
        self.push_json("fit.json", v);
        Ok(())
    }
}

fn twist_csv(points: &[TwistPoint]) -> Result<Vec<u8>> {
    let mut bytes = vec![];
    {
        let mut w = csv::Writer::from_writer(&mut bytes);
        w.write_record(["p1", "z", "region", "energy", "action", "period", "det", "norm"])?;
        for p in points {
            let region = serde_json::to_value(p.region)?;
            w.write_record([
                format!("{:.15e}", p.p1),
                format!("{:.15e}", p.z),
                region.as_str().unwrap_or_default().to_string(),
                format!("{:.15e}", p.energy),
                format!("{:.15e}", p.action),
                format!("{:.15e}", p.period),
                format!("{:.15e}", p.det),
                format!("{:.15e}", p.norm),
            ])?;
        }
        w.flush()?;
    }
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let text = r#"{
            "potential": {"kind": "pendulum_rotator"},
            "kmax": 3,
            "eps": [0.0, 1e-3],
            "zone_grid": 20,
            "nonresonant_patches": 1,
            "resonant_l1": 1,
            "normal_form": {"nodes": 6},
            "chart": {"p1_points": 1, "twist_points": 5, "z_points": 16},
            "scan": {"grid": 8, "t_final": 400.0}
        }"#;
        ExperimentConfig::from_json_str(text, Path::new(".")).unwrap()
    }

    #[test]
    fn defaults_expand_and_round_trip() {
        let cfg = small();
        let v = cfg.effective();
        assert_eq!(v["scan"]["dt"], json!(0.1));
        assert!(v.get("workers").is_none());
        let back = ExperimentConfig::from_json_str(&v.to_string(), Path::new(".")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let bad = [
            r#"{"a": 0.2}"#,
            r#"{"r": 3.0}"#,
            r#"{"eps": []}"#,
            r#"{"unknown_field": 1}"#,
            r#"{"potential": {"kind": "file", "path": "missing.json"}}"#,
        ];
        for text in bad {
            let err = ExperimentConfig::from_json_str(text, Path::new("/nonexistent")).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn stage_names_parse() {
        for st in Stage::ALL {
            assert_eq!(st.name().parse::<Stage>().unwrap(), st);
        }
        assert!("plot".parse::<Stage>().is_err());
    }

    #[test]
    fn zero_coupling_scan_has_no_non_torus_orbits() {
        let mut cfg = small();
        cfg.eps = vec![0.0];
        let out = run(Stage::Scan, &cfg).unwrap();
        let scan = out.json("scan.json").unwrap();
        assert_eq!(scan[0]["counts"]["non_torus"], json!(0));
        assert_eq!(out.exit_code(), 0);
    }

    #[test]
    fn charts_are_refused_at_desk_coupling() {
        let out = run(Stage::Chart, &small()).unwrap();
        let charts = out.json("chart.json").unwrap().as_array().unwrap().clone();
        assert!(!charts.is_empty());
        for ch in charts {
            assert_eq!(ch["status"], json!("refused"));
        }
    }

    #[test]
    fn error_json_carries_exit_code() {
        let v = error_json(&Error::RescaledWidth(0.5));
        assert_eq!(v["error"]["exit_code"], json!(3));
        assert_eq!(v["error"]["kind"], json!("rescaled_width"));
    }
}
