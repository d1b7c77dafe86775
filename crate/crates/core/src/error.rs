use thiserror::Error;

use crate::resonance::Generator;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("({0}, {1}) is not a lattice generator")]
    NotAGenerator(i64, i64),

    #[error("Fourier series has an entry at k = (0, 0)")]
    NonZeroAverage,

    #[error("coefficients at {0:?} and its negative are both stored")]
    DuplicateMode([i64; 2]),

    #[error("action point ({0}, {1}) lies outside the annulus")]
    OutsideAnnulus(f64, f64),

    #[error("alpha = {alpha} exceeds r/(32K) = {limit}")]
    AlphaTooLarge { alpha: f64, limit: f64 },

    #[error("lattice vector {l:?} is parallel to generator {k}")]
    ParallelToGenerator { k: Generator, l: [i64; 2] },

    #[error("|l| = {norm} exceeds 8K = {limit}")]
    LatticeVectorTooLong { norm: f64, limit: f64 },

    #[error("|k| = {norm} exceeds the Fourier cutoff K = {cutoff}")]
    GeneratorTooLong { norm: f64, cutoff: usize },

    #[error("action point is not in the resonant zone of {0}")]
    NotInResonantZone(Generator),

    #[error("non-resonance fails: worst margin {0:e}")]
    Resonant(f64),

    #[error("smallness condition fails: theta_* = {0} >= 1")]
    SmallnessCondition(f64),

    #[error("potential coefficient {found:e} at {k} is below the genericity floor {floor:e}")]
    BelowGenericFloor { k: Generator, found: f64, floor: f64 },

    #[error("rescaled width {0} is below 1")]
    RescaledWidth(f64),

    #[error("no hyperbolic point found for the effective pendulum")]
    NoHyperbolicPoint,

    #[error("energy {energy} outside the range of region {region}")]
    EnergyOutOfRange { energy: f64, region: String },

    #[error("quadrature did not converge (estimated error {0:e})")]
    Quadrature(f64),

    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),

    #[error("energy drift {drift:e} exceeds threshold {limit:e}")]
    EnergyDrift { drift: f64, limit: f64 },

    #[error("orbit budget exceeded: {requested} > {limit}")]
    Budget { requested: usize, limit: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the experiment driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_)
            | Error::NotAGenerator(..)
            | Error::NonZeroAverage
            | Error::DuplicateMode(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 2,
            _ => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::NotAGenerator(..) => "not_a_generator",
            Error::NonZeroAverage => "nonzero_average",
            Error::DuplicateMode(_) => "duplicate_mode",
            Error::OutsideAnnulus(..) => "outside_annulus",
            Error::AlphaTooLarge { .. } => "alpha_too_large",
            Error::ParallelToGenerator { .. } => "parallel_to_generator",
            Error::LatticeVectorTooLong { .. } => "lattice_vector_too_long",
            Error::GeneratorTooLong { .. } => "generator_too_long",
            Error::NotInResonantZone(_) => "not_in_resonant_zone",
            Error::Resonant(_) => "resonant",
            Error::SmallnessCondition(_) => "smallness_condition",
            Error::BelowGenericFloor { .. } => "below_generic_floor",
            Error::RescaledWidth(_) => "rescaled_width",
            Error::NoHyperbolicPoint => "no_hyperbolic_point",
            Error::EnergyOutOfRange { .. } => "energy_out_of_range",
            Error::Quadrature(_) => "quadrature",
            Error::IllConditioned(_) => "ill_conditioned",
            Error::EnergyDrift { .. } => "energy_drift",
            Error::Budget { .. } => "budget",
            Error::Numerical(_) => "numerical",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
