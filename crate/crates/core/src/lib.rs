//! Flow and mass-transfer surrogate for packed-column internals with
//! adjoint-based, CAD-free shape optimization of the packing surface.
//!
//! The crate solves the steady incompressible Navier-Stokes equations and a
//! convection-diffusion equation on a simplicial mesh with equal-order P1
//! elements and residual-based stabilization, evaluates the logarithmic
//! mass-transfer coefficient of the packing, and maximizes it by moving
//! mesh vertices along a smoothed adjoint shape gradient under mesh-quality
//! and boundary constraints.

// index-based loops over small fixed-size element arrays are the local
// idiom in the assembly kernels
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

pub mod adjoint;
pub mod casegen;
pub mod config;
pub mod error;
pub mod fem;
pub mod flow;
pub mod integrals;
pub mod io;
pub mod mesh;
pub mod metrics;
pub mod rng;
pub mod shape;
pub mod transport;

pub use adjoint::{solve_adjoint, AdjointState};
pub use config::CaseConfig;
pub use error::{Error, Result};
pub use flow::{solve_flow, FlowSolution, FlowState, FluidProps, InletProfile, InletSpec};
pub use mesh::{BoundaryTag, DisplacementOutcome, Mesh, VertexDisplacement};
pub use metrics::{evaluate_case, CaseMetrics, CaseSetup, CaseSolution};
pub use shape::{
    gradient_fd_check, optimize, optimize_with_callback, OptimizationRecord, OptimizeResult,
    OptimizerConfig, RoleMap, ShapeGradient, StopReason, TagRole,
};
pub use transport::{solve_transport, ScalarField, TransportProps, TransportStab};
