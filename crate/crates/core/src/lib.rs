//! Discrete variational calculus for Hamiltonian diffeomorphisms of C^d and CP^d.
//!
//! The toolkit represents a Hamiltonian diffeomorphism as a tuple of small
//! symplectomorphisms, each encoded by an elementary generating function
//! f_k through the relation
//!
//! ```text
//!     w = (z + sigma(z))/2,      grad f(w) = i (z - sigma(z)).
//! ```
//!
//! Composing n such steps yields a finite-dimensional action functional
//! F(v_1, ..., v_n) whose critical points are the discrete closed orbits and
//! whose Hessian eigenvalue counts produce Maslov-type indices.  On top of
//! this calculus the crate builds:
//!
//! * [`symplin`] — realified complex-linear algebra: the tau map, quadratic
//!   form index/nullity, Cayley generating functions of linear maps;
//! * [`genfun`] — elementary steps, step tuples, the composed functional with
//!   exact gradient and sparse Hessian, and its algebraic reductions;
//! * [`hamdiff`] — implicit-midpoint tuples from Hamiltonian fields, exact
//!   rotation tuples, and the named fixtures (pseudo-rotations, a hyperbolic
//!   example on CP^1);
//! * [`maslov`] — the Maslov index of symplectic paths via piecewise-Cayley
//!   generating families, mean index, Bott-type inequalities, iterated-index
//!   identities, and the augmented action;
//! * [`cpaction`] — the CP^d variational principle: conical families, the
//!   critical-point eigenproblem, action spectra, kernel correspondence and
//!   the recapping index shift;
//! * [`crossing`] — product-ball neighborhoods of a trajectory, the
//!   pseudo-gradient field on the zero level, constrained flow lines and the
//!   crossing-energy experiment;
//! * [`report`] — CSV/JSON serialization of records and experiment tables.
//!
//! All state is immutable after construction and every operation is pure, so
//! values can be shared freely across threads.

pub mod cpaction;
pub mod crossing;
pub mod error;
pub mod genfun;
pub mod hamdiff;
pub mod maslov;
pub mod report;
pub mod symplin;

pub use error::{GfError, Result};
