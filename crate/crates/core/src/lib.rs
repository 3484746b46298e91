//! Numerical laboratory for immiscible incompressible two-phase flow in
//! double-porosity media with thin fissures.
//!
//! The crate covers three model levels and the machinery connecting them:
//!
//! * [`constitutive`]: capillary/mobility laws and the Kirchhoff,
//!   global-pressure and matching transforms;
//! * [`cell_problems`]: periodic correctors on the Warren–Root cell and the
//!   effective permeability tensor;
//! * [`matrix_block`]: imbibition in a single matrix block, its Laplace-domain
//!   counterpart and sub-grid exchange sources;
//! * [`memory_kernel`]: product-integration quadrature for the `t^-1/2`
//!   memory term;
//! * [`macro_solver`]: the finite-volume solver shared by the delta-model and
//!   the fully homogenized limit model;
//! * [`harness`]: configuration, experiments and result persistence.

pub mod cell_problems;
pub mod constitutive;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod macro_solver;
pub mod matrix_block;
pub mod memory_kernel;
pub mod reference;

pub use error::{Error, Result};
