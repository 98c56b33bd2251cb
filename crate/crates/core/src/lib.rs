//! Reaction-diffusion glioma growth on a periodic voxel grid, with inversion
//! of the tumor initial condition and the anisotropic diffusion coefficient
//! from partial, noisy observations at two time points.
//!
//! The forward model couples tissue-dependent anisotropic diffusion with
//! logistic proliferation, integrated by Strang splitting: an analytic
//! logistic flow between two Crank-Nicolson diffusion half-steps solved
//! pseudo-spectrally on a periodic cube (the brain's no-flux boundary is
//! realized by a small penalty diffusivity outside tissue). The inverse
//! problem is solved by a reduced-space Newton-CG method whose gradients and
//! Hessian-vector products are exact discrete transposes of the forward
//! sub-steps.
//!
//! Module map:
//! - [`field`]: grids, scalar/vector/tensor fields, spectral operators, GLF1 I/O
//! - [`anatomy`]: tissue maps, DTI tensor processing, diffusion coefficient assembly
//! - [`forward`]: Strang-split time integration and its linearization
//! - [`adjoint`]: backward sweeps (first-order and incremental)
//! - [`inversion`]: Gaussian basis, objective/gradient, Hessian matvecs, Newton loop, L-curve
//! - [`experiments`]: synthetic test cases, noise/threshold protocol, metrics, reports

pub mod adjoint;
pub mod anatomy;
pub mod error;
pub mod experiments;
pub mod field;
pub mod forward;
pub mod inversion;

pub use error::{Error, Result};
