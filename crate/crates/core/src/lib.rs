//! Numerical toolkit for nearly integrable Hamiltonians
//! `H = |y|^2/2 + eps f(x)` on an annulus times the 2-torus.

pub mod error;
pub mod experiment;
pub mod fourier;
pub mod kam;
pub mod normal_form;
pub mod pendulum;
pub mod quadrature;
pub mod resonance;
pub mod scan;

pub use error::{Error, Result};
pub use fourier::{FourierSeries2, GenericityConfig, GenericityReport, OneDimProfile};
pub use resonance::{Annulus, Generator, ZoneDecomposition, ZoneLabel};
