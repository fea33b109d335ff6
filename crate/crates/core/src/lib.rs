//! Variational tools for the Newtonian N-body problem: action minimizers,
//! free-time action potentials, Jacobi–Maupertuis lengths, asymptotic
//! classification of motions and Busemann-function constructions of
//! parabolic and hyperbolic geodesic rays.

pub mod action;
pub mod asymptotics;
pub mod dynamics;
pub mod error;
pub mod jm;
pub mod model;
pub mod optim;
pub mod path;
pub mod weak_kam;

pub use error::{Error, Result};
pub use model::{Configuration, MassSystem, VelocityState};
pub use path::DiscretePath;
