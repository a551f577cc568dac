//! Hamiltonian fields, implicit-midpoint step tuples, and named fixtures.
//!
//! The normative scaling ties the quadratic family together: the Hamiltonian
//! H(z) = -pi |z|^2 generates the flow z -> e^{-2 i pi t} z, matching the
//! rotation generating function q_t(w) = -tan(pi t) |w|^2 in the small-t
//! limit.  A field H is discretized over [0, 1] into n steps with
//! f_k(w) = (1/n) H(t_k + 1/(2n), w); the induced step map is then exactly
//! the implicit-midpoint update of the flow, second-order accurate.
//!
//! Fixtures package a field, its step tuple, and independently known fixed
//! points (coordinate axes of diagonal rotations, the poles of a hyperbolic
//! example) for the solvers to verify against.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GfError, Result};
use crate::genfun::{
    sample_ball, ElementaryGen, QuadGen, StepTuple, ZeroGen, DEFAULT_CERT_SAMPLES,
    DEFAULT_WORK_RADIUS,
};
pub use crate::genfun::apply_tuple;
use crate::symplin::{hermitian_inner, j_matrix, mul_complex_scalar};

/// A time-dependent Hamiltonian on realified C^m.
pub trait HamiltonianField: Send + Sync {
    /// Realified dimension 2m.
    fn real_dim(&self) -> usize;

    /// H(t, z).
    fn value(&self, t: f64, z: &DVector<f64>) -> f64;

    /// Real gradient of H(t, .) at z.
    fn gradient(&self, t: f64, z: &DVector<f64>) -> DVector<f64>;

    /// Second derivative of H(t, .); default central differences of the
    /// gradient, symmetrized.
    fn hessian(&self, t: f64, z: &DVector<f64>) -> DMatrix<f64> {
        let n = z.len();
        let h = 1e-5 * (1.0 + z.norm());
        let mut m = DMatrix::zeros(n, n);
        for c in 0..n {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[c] += h;
            zm[c] -= h;
            let col = (self.gradient(t, &zp) - self.gradient(t, &zm)).scale(1.0 / (2.0 * h));
            m.set_column(c, &col);
        }
        (&m + m.transpose()).scale(0.5)
    }

    /// True when H does not depend on t.
    fn is_autonomous(&self) -> bool;

    /// True when H(t, lambda z) = |lambda|^2 H(t, z).
    fn is_two_homogeneous(&self) -> bool;

    /// True when H(t, e^{i theta} z) = H(t, z).
    fn is_s1_invariant(&self) -> bool;

    /// For autonomous quadratic H(z) = z^T S z, the coefficient matrix.
    fn quadratic_matrix(&self) -> Option<&DMatrix<f64>> {
        None
    }
}

/// H identically zero.
#[derive(Debug, Clone)]
pub struct ZeroHamiltonian {
    zero: DMatrix<f64>,
}

impl ZeroHamiltonian {
    pub fn new(real_dim: usize) -> Self {
        Self {
            zero: DMatrix::zeros(real_dim, real_dim),
        }
    }
}

impl HamiltonianField for ZeroHamiltonian {
    fn real_dim(&self) -> usize {
        self.zero.nrows()
    }
    fn value(&self, _t: f64, _z: &DVector<f64>) -> f64 {
        0.0
    }
    fn gradient(&self, _t: f64, z: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(z.len())
    }
    fn hessian(&self, _t: f64, _z: &DVector<f64>) -> DMatrix<f64> {
        self.zero.clone()
    }
    fn is_autonomous(&self) -> bool {
        true
    }
    fn is_two_homogeneous(&self) -> bool {
        true
    }
    fn is_s1_invariant(&self) -> bool {
        true
    }
    fn quadratic_matrix(&self) -> Option<&DMatrix<f64>> {
        Some(&self.zero)
    }
}

/// Autonomous quadratic Hamiltonian H(z) = z^T S z.
#[derive(Debug, Clone)]
pub struct QuadraticHamiltonian {
    s: DMatrix<f64>,
    s1: bool,
}

impl QuadraticHamiltonian {
    pub fn new(s: DMatrix<f64>) -> Result<Self> {
        if !s.is_square() || s.nrows() % 2 != 0 {
            return Err(GfError::DimensionMismatch(
                "quadratic Hamiltonian needs an even square matrix".into(),
            ));
        }
        let s = (&s + s.transpose()).scale(0.5);
        let j = j_matrix(s.nrows());
        let s1 = (&j * &s - &s * &j).amax() <= 1e-12 * (1.0 + s.amax());
        Ok(Self { s, s1 })
    }

    /// H = sum_j pi a_j |z_j|^2, whose time-1 flow is diag(e^{2 i pi a_j}).
    pub fn rotation(angles: &[f64]) -> Result<Self> {
        let mut diag = DVector::zeros(2 * angles.len());
        for (j, &a) in angles.iter().enumerate() {
            diag[2 * j] = std::f64::consts::PI * a;
            diag[2 * j + 1] = std::f64::consts::PI * a;
        }
        Self::new(DMatrix::from_diagonal(&diag))
    }

    /// Time-1 flow as a matrix: exp(2 J S).
    pub fn flow_matrix(&self) -> DMatrix<f64> {
        matrix_exp(&(j_matrix(self.s.nrows()) * self.s.scale(2.0)))
    }
}

impl HamiltonianField for QuadraticHamiltonian {
    fn real_dim(&self) -> usize {
        self.s.nrows()
    }
    fn value(&self, _t: f64, z: &DVector<f64>) -> f64 {
        (&self.s * z).dot(z)
    }
    fn gradient(&self, _t: f64, z: &DVector<f64>) -> DVector<f64> {
        (&self.s * z).scale(2.0)
    }
    fn hessian(&self, _t: f64, _z: &DVector<f64>) -> DMatrix<f64> {
        self.s.scale(2.0)
    }
    fn is_autonomous(&self) -> bool {
        true
    }
    fn is_two_homogeneous(&self) -> bool {
        true
    }
    fn is_s1_invariant(&self) -> bool {
        self.s1
    }
    fn quadratic_matrix(&self) -> Option<&DMatrix<f64>> {
        Some(&self.s)
    }
}

/// A conical Hamiltonian on C^2 with hyperbolic projectivized dynamics at
/// the coordinate axes:
///
/// ```text
///     H(z) = c (|z_1|^2 - |z_2|^2) + b Im(z_1^2 conj(z_2)^2) / |z|^2.
/// ```
///
/// Both terms are 2-homogeneous and S^1-invariant.  On either axis the
/// quartic term and its gradient vanish, so the axes stay invariant and
/// rotate with speed set by c; transversally the quartic term mixes the
/// angular directions and, for b > 2c, turns the projectivized rotation
/// into a saddle with chart exponents +-2 sqrt(b^2 - 4c^2).
#[derive(Debug, Clone)]
pub struct HyperbolicHamiltonian {
    pub c: f64,
    pub b: f64,
}

impl HyperbolicHamiltonian {
    pub fn new(c: f64, b: f64) -> Self {
        Self { c, b }
    }
}

fn split_c2(z: &DVector<f64>) -> (num_complex::Complex64, num_complex::Complex64) {
    (
        num_complex::Complex64::new(z[0], z[1]),
        num_complex::Complex64::new(z[2], z[3]),
    )
}

impl HamiltonianField for HyperbolicHamiltonian {
    fn real_dim(&self) -> usize {
        4
    }

    fn value(&self, _t: f64, z: &DVector<f64>) -> f64 {
        let (z1, z2) = split_c2(z);
        let n = z1.norm_sqr() + z2.norm_sqr();
        if n < 1e-300 {
            return 0.0;
        }
        let f = (z1 * z1 * (z2 * z2).conj()).im;
        self.c * (z1.norm_sqr() - z2.norm_sqr()) + self.b * f / n
    }

    fn gradient(&self, _t: f64, z: &DVector<f64>) -> DVector<f64> {
        let (z1, z2) = split_c2(z);
        let n = z1.norm_sqr() + z2.norm_sqr();
        let mut out = DVector::zeros(4);
        if n < 1e-300 {
            return out;
        }
        let i = num_complex::Complex64::i();
        let f = (z1 * z1 * (z2 * z2).conj()).im;
        // Wirtinger derivatives d/d conj(z_j); the real gradient pair is
        // (2 Re, 2 Im) of each.
        let dz1 = self.c * z1 + self.b * (i * z1.conj() * z2 * z2 / n - f * z1 / (n * n));
        let dz2 = -self.c * z2 + self.b * (-i * z1 * z1 * z2.conj() / n - f * z2 / (n * n));
        out[0] = 2.0 * dz1.re;
        out[1] = 2.0 * dz1.im;
        out[2] = 2.0 * dz2.re;
        out[3] = 2.0 * dz2.im;
        out
    }

    fn is_autonomous(&self) -> bool {
        true
    }
    fn is_two_homogeneous(&self) -> bool {
        true
    }
    fn is_s1_invariant(&self) -> bool {
        true
    }
}

/// Ad-hoc field from closures, used for one-off Hamiltonians.
#[derive(Clone)]
pub struct ClosureHamiltonian {
    pub real_dim: usize,
    pub autonomous: bool,
    pub two_homogeneous: bool,
    pub s1_invariant: bool,
    pub value: Arc<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>,
    pub gradient: Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>,
}

impl HamiltonianField for ClosureHamiltonian {
    fn real_dim(&self) -> usize {
        self.real_dim
    }
    fn value(&self, t: f64, z: &DVector<f64>) -> f64 {
        (self.value)(t, z)
    }
    fn gradient(&self, t: f64, z: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(t, z)
    }
    fn is_autonomous(&self) -> bool {
        self.autonomous
    }
    fn is_two_homogeneous(&self) -> bool {
        self.two_homogeneous
    }
    fn is_s1_invariant(&self) -> bool {
        self.s1_invariant
    }
}

/// One implicit-midpoint step: f(w) = weight * H(t_mid, w).
pub struct HamStepGen {
    field: Arc<dyn HamiltonianField>,
    t_mid: f64,
    weight: f64,
}

impl HamStepGen {
    pub fn new(field: Arc<dyn HamiltonianField>, t_mid: f64, weight: f64) -> Self {
        Self {
            field,
            t_mid,
            weight,
        }
    }
}

impl ElementaryGen for HamStepGen {
    fn real_dim(&self) -> usize {
        self.field.real_dim()
    }
    fn value(&self, w: &DVector<f64>) -> f64 {
        self.weight * self.field.value(self.t_mid, w)
    }
    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        self.field.gradient(self.t_mid, w).scale(self.weight)
    }
    fn hessian(&self, w: &DVector<f64>) -> DMatrix<f64> {
        self.field.hessian(self.t_mid, w).scale(self.weight)
    }
    fn is_conical(&self) -> bool {
        self.field.is_two_homogeneous() && self.field.is_s1_invariant()
    }
}

/// Discretizes the time-1 flow of H into n implicit-midpoint steps,
/// f_k(w) = (1/n) H((k - 1/2)/n, w), and certifies Newton convergence on
/// the working ball.
pub fn tuple_from_flow(field: &Arc<dyn HamiltonianField>, n: usize) -> Result<StepTuple> {
    if n == 0 {
        return Err(GfError::Config("tuple_from_flow needs n >= 1".into()));
    }
    let weight = 1.0 / n as f64;
    let mut steps: Vec<Arc<dyn ElementaryGen>> = Vec::with_capacity(n);
    for k in 0..n {
        let t_mid = (k as f64 + 0.5) * weight;
        if let Some(s) = field.quadratic_matrix() {
            if field.is_autonomous() {
                steps.push(Arc::new(QuadGen::new(s.scale(weight))?));
                continue;
            }
        }
        steps.push(Arc::new(HamStepGen::new(
            Arc::clone(field),
            t_mid,
            weight,
        )));
    }
    let tuple = StepTuple::new(steps)?;
    tuple.smallness_certificate(DEFAULT_WORK_RADIUS, DEFAULT_CERT_SAMPLES, 0x5eed)?;
    Ok(tuple)
}

/// The unitary m-tuple (q_{t/(m-1)}, ..., q_{t/(m-1)}, 0) on C^complex_dim,
/// composing to e^{-2 i pi t} times the identity.  Requires m >= 5 odd and
/// |t/(m-1)| < 1/2.
pub fn rotation_tuple(t: f64, m: usize, complex_dim: usize) -> Result<StepTuple> {
    if m < 5 || m % 2 == 0 {
        return Err(GfError::Parity(format!(
            "rotation tuple needs odd m >= 5, got {m}"
        )));
    }
    let frac = t / (m as f64 - 1.0);
    if frac.abs() >= 0.5 {
        return Err(GfError::Config(format!(
            "rotation tuple needs |t/(m-1)| < 1/2, got {frac}"
        )));
    }
    let factor: Arc<dyn ElementaryGen> = Arc::new(QuadGen::rotation(frac, complex_dim)?);
    let mut steps = vec![factor; m - 1];
    steps.push(Arc::new(ZeroGen::new(2 * complex_dim)));
    StepTuple::new(steps)
}

/// Sampled certificate for the conical-lift hypotheses.
#[derive(Debug, Clone, Serialize)]
pub struct LiftCertificate {
    /// Worst relative |H(lambda z) - |lambda|^2 H(z)|.
    pub worst_homogeneity: f64,
    /// Worst relative Euler defect |<grad H, z> - 2 H|.
    pub worst_euler: f64,
    /// Worst relative |H(e^{i theta} z) - H(z)|.
    pub worst_s1: f64,
    /// True when all claimed flags hold within tolerance.
    pub pass: bool,
}

/// Checks 2-homogeneity (with the Euler identity) and S^1-invariance of a
/// field by sampling; tolerances 1e-10 for values, 1e-9 for Euler.
pub fn lift_validate(field: &dyn HamiltonianField) -> LiftCertificate {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DE);
    let dim = field.real_dim();
    let mut worst_homog = 0.0_f64;
    let mut worst_euler = 0.0_f64;
    let mut worst_s1 = 0.0_f64;
    for _ in 0..100 {
        let mut z = sample_ball(dim, 2.0, &mut rng);
        if z.norm() < 0.1 {
            z = z.add_scalar(0.5);
        }
        let t = rng.gen_range(0.0..1.0);
        let h = field.value(t, &z);
        let scale = 1.0 + h.abs();

        let lam = num_complex::Complex64::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
        if lam.norm() > 0.2 {
            let hz = field.value(t, &mul_complex_scalar(lam, &z));
            worst_homog = worst_homog.max((hz - lam.norm_sqr() * h).abs() / scale);
        }

        let euler = field.gradient(t, &z).dot(&z) - 2.0 * h;
        worst_euler = worst_euler.max(euler.abs() / scale);

        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let rot = num_complex::Complex64::from_polar(1.0, theta);
        let hrot = field.value(t, &mul_complex_scalar(rot, &z));
        worst_s1 = worst_s1.max((hrot - h).abs() / scale);
    }
    let mut pass = true;
    if field.is_two_homogeneous() {
        pass &= worst_homog < 1e-10 && worst_euler < 1e-9;
    }
    if field.is_s1_invariant() {
        pass &= worst_s1 < 1e-10;
    }
    LiftCertificate {
        worst_homogeneity: worst_homog,
        worst_euler,
        worst_s1,
        pass,
    }
}

/// Symbolic description of a fixture Hamiltonian, stable across JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HamiltonianSpec {
    /// H = 0 on C^{d+1}.
    Zero { d: usize },
    /// Diagonal rotation lift with the given d+1 angles.
    PseudoRotation { angles: Vec<f64> },
    /// The saddle example on C^2.
    Hyperbolic { c: f64, b: f64 },
}

impl HamiltonianSpec {
    /// Builds the field this table describes.
    pub fn build(&self) -> Result<Arc<dyn HamiltonianField>> {
        Ok(match self {
            HamiltonianSpec::Zero { d } => Arc::new(ZeroHamiltonian::new(2 * (d + 1))),
            HamiltonianSpec::PseudoRotation { angles } => {
                Arc::new(QuadraticHamiltonian::rotation(angles)?)
            }
            HamiltonianSpec::Hyperbolic { c, b } => Arc::new(HyperbolicHamiltonian::new(*c, *b)),
        })
    }

    /// Ambient complex dimension d+1.
    pub fn ambient_dim(&self) -> usize {
        match self {
            HamiltonianSpec::Zero { d } => d + 1,
            HamiltonianSpec::PseudoRotation { angles } => angles.len(),
            HamiltonianSpec::Hyperbolic { .. } => 2,
        }
    }
}

/// A known fixed axis of a fixture, with its expected action value and,
/// when precomputed, the ambient Hessian index of the critical point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnownFixedPoint {
    /// Coordinate axis number, 0-based.
    pub axis: usize,
    /// Expected t-value (action) of the fixed point, in [0, 1).
    pub action: f64,
    /// Ambient Hessian index, when known.
    pub index: Option<usize>,
}

/// JSON document form of a fixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureDoc {
    pub name: String,
    pub d: usize,
    pub n: usize,
    pub hamiltonian: HamiltonianSpec,
    pub known_fixed_points: Vec<KnownFixedPoint>,
}

/// A verified dynamical test bed: field, step tuple, known fixed points.
pub struct Fixture {
    pub name: String,
    /// Base dimension d; the ambient space is C^{d+1}.
    pub base_dim: usize,
    /// Steps of the sigma-tuple (even; ends with an identity step).
    pub n1: usize,
    pub hamiltonian: HamiltonianSpec,
    pub field: Arc<dyn HamiltonianField>,
    pub tuple: StepTuple,
    pub known_fixed_points: Vec<KnownFixedPoint>,
}

impl std::fmt::Debug for Fixture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fixture")
            .field("name", &self.name)
            .field("base_dim", &self.base_dim)
            .field("n1", &self.n1)
            .field("known_fixed_points", &self.known_fixed_points.len())
            .finish()
    }
}

impl Fixture {
    /// Rebuilds a fixture from its document form.
    pub fn from_doc(doc: &FixtureDoc) -> Result<Fixture> {
        match &doc.hamiltonian {
            HamiltonianSpec::Zero { d } => {
                let mut fx = zero_fixture(*d, doc.n)?;
                fx.name = doc.name.clone();
                fx.known_fixed_points = doc.known_fixed_points.clone();
                Ok(fx)
            }
            HamiltonianSpec::PseudoRotation { angles } => {
                let mut fx = pseudo_rotation_fixture_with_steps(angles, doc.n)?;
                fx.name = doc.name.clone();
                fx.known_fixed_points = doc.known_fixed_points.clone();
                fx.verify_axes()?;
                Ok(fx)
            }
            HamiltonianSpec::Hyperbolic { c, b } => {
                let mut fx = hyperbolic_fixture_with(*c, *b, doc.n)?;
                fx.name = doc.name.clone();
                fx.known_fixed_points = doc.known_fixed_points.clone();
                fx.verify_axes()?;
                Ok(fx)
            }
        }
    }

    /// Document form for serialization.
    pub fn to_doc(&self) -> FixtureDoc {
        FixtureDoc {
            name: self.name.clone(),
            d: self.base_dim,
            n: self.n1,
            hamiltonian: self.hamiltonian.clone(),
            known_fixed_points: self.known_fixed_points.clone(),
        }
    }

    /// Ambient realified dimension 2(d+1).
    pub fn real_dim(&self) -> usize {
        2 * (self.base_dim + 1)
    }

    /// Checks that each recorded axis is invariant under the tuple and that
    /// its recorded action matches the axis rotation angle.
    pub fn verify_axes(&self) -> Result<()> {
        for kf in &self.known_fixed_points {
            let (t, off_axis) = axis_rotation(&self.tuple, kf.axis)?;
            if off_axis > 1e-9 {
                return Err(GfError::InvariantViolation(format!(
                    "axis {} of fixture {} is not invariant (off-axis {off_axis:.3e})",
                    kf.axis, self.name
                )));
            }
            let diff = wrapped_distance(t, kf.action);
            if diff > 1e-9 {
                return Err(GfError::InvariantViolation(format!(
                    "axis {} of fixture {}: recorded action {} vs computed {t} (gap {diff:.3e})",
                    kf.axis, self.name, kf.action
                )));
            }
        }
        Ok(())
    }
}

/// Distance between two action values mod 1.
pub fn wrapped_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Realified j-th coordinate axis vector of unit length.
pub fn axis_vector(axis: usize, ambient_dim: usize) -> DVector<f64> {
    let mut v = DVector::zeros(2 * ambient_dim);
    v[2 * axis] = 1.0;
    v
}

/// Applies the tuple to the given axis and reads off the rotation: returns
/// (t in [0,1) with image = e^{2 i pi t} axis, off-axis residual norm).
pub fn axis_rotation(tuple: &StepTuple, axis: usize) -> Result<(f64, f64)> {
    let dim = tuple.complex_dim();
    if axis >= dim {
        return Err(GfError::Config(format!(
            "axis {axis} out of range for C^{dim}"
        )));
    }
    let e = axis_vector(axis, dim);
    let image = apply_tuple(tuple, &e)?;
    let c = hermitian_inner(&e, &image);
    let mut off = 0.0_f64;
    for j in 0..dim {
        if j != axis {
            off += image[2 * j].powi(2) + image[2 * j + 1].powi(2);
        }
    }
    let t = (c.arg() / std::f64::consts::TAU).rem_euclid(1.0);
    Ok((t, off.sqrt()))
}

/// H = 0 fixture on C^{d+1}: the identity tuple, every axis fixed at t = 0.
pub fn zero_fixture(d: usize, n1: usize) -> Result<Fixture> {
    check_n1(n1)?;
    let spec = HamiltonianSpec::Zero { d };
    let field = spec.build()?;
    let tuple = StepTuple::identity(n1, 2 * (d + 1))?;
    let known = (0..=d)
        .map(|axis| KnownFixedPoint {
            axis,
            action: 0.0,
            index: None,
        })
        .collect();
    Ok(Fixture {
        name: format!("zero-d{d}"),
        base_dim: d,
        n1,
        hamiltonian: spec,
        field,
        tuple,
        known_fixed_points: known,
    })
}

fn check_n1(n1: usize) -> Result<()> {
    if n1 < 6 || n1 % 2 != 0 {
        return Err(GfError::Parity(format!(
            "fixture tuples need even n1 >= 6 (n1 - 1 rotation factors plus one identity step), got {n1}"
        )));
    }
    Ok(())
}

/// Diagonal rotation fixture: the lift diag(e^{2 i pi a_j}) on C^{d+1},
/// built from n1 - 1 exact quadratic factors (each rotating coordinate j by
/// a_j/(n1-1)) and a final identity step.  The d+1 coordinate axes are fixed
/// with actions a_j mod 1, exactly.
pub fn pseudo_rotation_fixture(angles: &[f64]) -> Result<Fixture> {
    pseudo_rotation_fixture_with_steps(angles, 6)
}

/// Same with an explicit step count n1 (even, >= 6).
pub fn pseudo_rotation_fixture_with_steps(angles: &[f64], n1: usize) -> Result<Fixture> {
    check_n1(n1)?;
    if angles.is_empty() {
        return Err(GfError::Config("need at least one rotation angle".into()));
    }
    let factors = n1 - 1;
    let per_step: Vec<f64> = angles.iter().map(|a| -a / factors as f64).collect();
    let factor: Arc<dyn ElementaryGen> = Arc::new(QuadGen::diagonal_rotation(&per_step)?);
    let mut steps = vec![factor; factors];
    steps.push(Arc::new(ZeroGen::new(2 * angles.len())));
    let tuple = StepTuple::new(steps)?;

    let known = angles
        .iter()
        .enumerate()
        .map(|(axis, &a)| KnownFixedPoint {
            axis,
            action: a.rem_euclid(1.0),
            index: None,
        })
        .collect();
    let spec = HamiltonianSpec::PseudoRotation {
        angles: angles.to_vec(),
    };
    let field = spec.build()?;
    let fx = Fixture {
        name: format!("pseudo-rotation-d{}", angles.len() - 1),
        base_dim: angles.len() - 1,
        n1,
        hamiltonian: spec,
        field,
        tuple,
        known_fixed_points: known,
    };
    fx.verify_axes()?;
    Ok(fx)
}

/// The default hyperbolic fixture (c = 0.1, b = 0.25, n1 = 6): a conical
/// Hamiltonian on C^2 whose projectivized time-1 map has saddle fixed
/// points at both poles of CP^1.
pub fn hyperbolic_fixture() -> Result<Fixture> {
    hyperbolic_fixture_with(0.1, 0.25, 6)
}

/// Hyperbolic fixture with explicit parameters; requires b > 2c > 0 so the
/// transverse exponents +-2 sqrt(b^2 - 4c^2) are real, and verifies that the
/// discrete multipliers stay at distance >= 0.05 from the unit circle.
pub fn hyperbolic_fixture_with(c: f64, b: f64, n1: usize) -> Result<Fixture> {
    check_n1(n1)?;
    if !(c > 0.0 && b > 2.0 * c) {
        return Err(GfError::Config(format!(
            "hyperbolic fixture needs b > 2c > 0, got c = {c}, b = {b}"
        )));
    }
    let spec = HamiltonianSpec::Hyperbolic { c, b };
    let field = spec.build()?;
    let flow_steps = tuple_from_flow(&field, n1 - 1)?;
    let id_tail = StepTuple::identity(1, 4)?;
    let tuple = flow_steps.concat(&id_tail)?;

    let mut known = Vec::new();
    for axis in 0..2 {
        let (t, off) = axis_rotation(&tuple, axis)?;
        if off > 1e-10 {
            return Err(GfError::InvariantViolation(format!(
                "hyperbolic fixture: axis {axis} not invariant (off-axis {off:.3e})"
            )));
        }
        let mults = transverse_multipliers(&tuple, axis, t)?;
        for m in &mults {
            let gap = (m.norm() - 1.0).abs();
            if gap < 0.05 {
                return Err(GfError::InvariantViolation(format!(
                    "hyperbolic fixture: axis {axis} multiplier {m} too close to the unit circle"
                )));
            }
        }
        known.push(KnownFixedPoint {
            axis,
            action: t,
            index: None,
        });
    }

    Ok(Fixture {
        name: "hyperbolic".into(),
        base_dim: 1,
        n1,
        hamiltonian: spec,
        field,
        tuple,
        known_fixed_points: known,
    })
}

/// Eigenvalues of the twisted linearization e^{-2 i pi t} dPhi at the given
/// axis, with the two unit eigenvalues along the orbit directions removed.
pub fn transverse_multipliers(
    tuple: &StepTuple,
    axis: usize,
    t: f64,
) -> Result<Vec<num_complex::Complex64>> {
    let dim = tuple.complex_dim();
    let e = axis_vector(axis, dim);
    let dphi = crate::genfun::tuple_jacobian(tuple, &e)?;
    let phase = num_complex::Complex64::from_polar(1.0, -std::f64::consts::TAU * t);
    let twisted = complex_phase_times(phase, &dphi);
    let eigs = twisted.complex_eigenvalues();
    // Drop the two eigenvalues closest to 1 (orbit and phase directions).
    let mut idx: Vec<usize> = (0..eigs.len()).collect();
    idx.sort_by(|&a, &b| {
        let da = (eigs[a] - num_complex::Complex64::new(1.0, 0.0)).norm();
        let db = (eigs[b] - num_complex::Complex64::new(1.0, 0.0)).norm();
        da.partial_cmp(&db).unwrap()
    });
    Ok(idx[2..].iter().map(|&k| eigs[k]).collect())
}

/// Left-multiplies a realified matrix by the scalar phase e^{i theta}
/// (a rotation acting diagonally on each complex coordinate pair).
pub fn complex_phase_times(
    phase: num_complex::Complex64,
    m: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = m.nrows();
    let mut rot = DMatrix::zeros(n, n);
    for j in 0..n / 2 {
        rot[(2 * j, 2 * j)] = phase.re;
        rot[(2 * j, 2 * j + 1)] = -phase.im;
        rot[(2 * j + 1, 2 * j)] = phase.im;
        rot[(2 * j + 1, 2 * j + 1)] = phase.re;
    }
    rot * m
}

/// Dense matrix exponential by scaling and squaring with a Taylor core.
pub fn matrix_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = a.amax() * a.nrows() as f64;
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a.scale(1.0 / 2f64.powi(squarings as i32));
    let n = a.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..=16 {
        term = (&term * &scaled).scale(1.0 / k as f64);
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}
