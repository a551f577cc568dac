//! Error taxonomy shared by every module.
//!
//! Numerical failure modes are first-class: a Newton solve that does not
//! contract, a Cayley transform at an eigenvalue -1, or an index inequality
//! that fails all carry enough context to diagnose which identity broke.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum GfError {
    /// Operands have incompatible sizes.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The symmetric eigensolver did not converge.
    #[error("eigensolver failure: {0}")]
    Eigensolver(String),

    /// -1 is (numerically) an eigenvalue of the symplectic factor, so the
    /// Cayley generating function does not exist.
    #[error("Cayley transform singular: |(I+M)^-1| ~ {inv_norm:.3e} exceeds {limit:.1e}")]
    CayleySingular { inv_norm: f64, limit: f64 },

    /// A matrix claimed symplectic fails t(M) J M = J beyond tolerance.
    #[error("matrix is not symplectic: residual {0:.3e}")]
    NotSymplectic(f64),

    /// Newton iteration for a step map failed to contract; the step is not
    /// C^1-small enough for the working region.
    #[error("step-map Newton diverged after {iters} iterations (residual {residual:.3e})")]
    NewtonDivergence { iters: usize, residual: f64 },

    /// The fiber block of a quadratic form is singular, so it does not
    /// generate the zero section.
    #[error("fiber block singular (smallest singular value {0:.3e}); form does not generate the 0-section")]
    CBlockSingular(f64),

    /// A tuple has the wrong parity or size for the requested operation.
    #[error("parity violation: {0}")]
    Parity(String),

    /// Mesh refinement could not avoid the Cayley singularity.
    #[error("subdivision failure after {refinements} refinements: {detail}")]
    SubdivisionFailure { refinements: usize, detail: String },

    /// Continuation of a critical point along a family broke down.
    #[error("critical-point continuation failed: {0}")]
    ContinuationFailure(String),

    /// Sampled smallness certificate failed: some sampled point refused the
    /// Newton inversion of the step equation.
    #[error("smallness certificate failed: {0}")]
    SmallnessCertificate(String),

    /// A conical family produced no critical points, contradicting the
    /// guaranteed lower bound of d+1.
    #[error("no critical points found where at least {expected} were guaranteed")]
    EmptySpectrum { expected: usize },

    /// Operation requires a nondegenerate record.
    #[error("degenerate record rejected: {0}")]
    DegenerateRecord(String),

    /// A mathematical identity that must hold failed numerically; this means
    /// an index-computation bug, not bad input.
    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    /// Problem size exceeds the configured cap.
    #[error("resource cap exceeded: {0}")]
    ResourceCap(String),

    /// Invalid configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input point is not on the constraint manifold.
    #[error("off-manifold input: |f| = {0:.3e}")]
    OffManifold(f64),

    /// Post-step projection back onto the constraint set failed.
    #[error("projection failure during flow integration: {0}")]
    ProjectionFailure(String),

    /// I/O failure while writing reports.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, GfError>;
