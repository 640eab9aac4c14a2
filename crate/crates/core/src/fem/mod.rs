//! Finite-element infrastructure shared by the flow, transport and shape
//! gradient solves: P1 spaces, quadrature, sparse assembly, Dirichlet
//! handling, and linear/nonlinear solvers.

pub mod assemble;
pub mod bc;
pub mod newton;
pub mod quadrature;
pub mod solver;
pub mod space;
pub mod sparse;

pub use bc::{apply_dirichlet, constrained_dofs, BcValue, DirichletBC};
pub use newton::{newton_solve, NewtonConfig, NewtonTrace};
pub use solver::{solve_linear, LinearMethod, LinearSolverConfig, Preconditioner, SolveReport};
pub use space::{ElementGeom, FunctionSpace};
pub use sparse::{CooBuilder, CsrMatrix};
