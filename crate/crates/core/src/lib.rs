//! Floquet spectra, biorthogonal eigenfunctions, spectral singularities and
//! Gelfand-transform expansions for periodic matrix differential operators
//! `y^(n) + P₂(x)y^(n-2) + ... + P_n(x)y` on the real line.

pub mod asymptotics;
pub mod characteristic;
pub mod eigen;
pub mod error;
pub mod expansion;
pub mod linalg;
pub mod ode;
pub mod operator;
pub mod singularities;

pub use error::{Result, SpectralError};
pub use operator::{mean_matrix, validate_spec, FourierMatrixPotential, MeanMatrixData, OperatorSpec};
