//! Exact certification of slowly converging square-window Birkhoff
//! averages for `Z^n` actions on the dyadic odometer.
//!
//! Observables, averages and defect bounds are generic over [`Scalar`];
//! the construction itself runs in exact [`Rational`] arithmetic.

pub mod averaging;
pub mod config;
pub mod cylinder;
pub mod error;
pub mod harness;
pub mod lattice;
pub mod observables;
pub mod scalar;
pub mod slowdown;
pub mod towers;
pub mod window;

pub use error::{Error, Result};
pub use scalar::{Rational, Scalar};

/// Observable with exact rational values.
pub type ExactObservable = observables::MaskedObservable<Rational>;
/// Observable with double-precision values.
pub type FloatObservable = observables::MaskedObservable<f64>;
/// Single-precision variant.
pub type F32Observable = observables::MaskedObservable<f32>;
/// Defect bounds in exact arithmetic.
pub type ExactDefectBounds = towers::DefectBounds<Rational>;
/// Defect bounds in double precision.
pub type FloatDefectBounds = towers::DefectBounds<f64>;
