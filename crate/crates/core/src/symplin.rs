//! Realified complex-symplectic linear algebra.
//!
//! A point of C^n is stored as 2n reals, interleaved (re, im) per complex
//! coordinate.  Multiplication by i is the block-diagonal matrix J with
//! 2x2 blocks [[0,-1],[1,0]]; the real inner product is the plain dot
//! product over the 2n coordinates, and the symplectic form is
//! omega(v, w) = <i v, w>.  The sign conventions here are pinned end to end
//! by the rotation generating function q_t(w) = -tan(pi t) |w|^2, which must
//! come out of [`cayley_genfn`] applied to e^{-2 i pi t} I.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{GfError, Result};

/// Default relative eigenvalue zero-threshold for [`QuadForm`].
pub const DEFAULT_EIGEN_TOL: f64 = 1e-8;

/// Default symplecticity tolerance for [`SymplecticMatrix`].
pub const SYMPLECTIC_TOL: f64 = 1e-10;

/// Cayley transforms are rejected when |(I+M)^-1| exceeds this.
pub const CAYLEY_INV_LIMIT: f64 = 1e6;

/// A point of C^n as 2n interleaved reals.
///
/// Thin newtype over a dense vector; most internal code passes the raw
/// `DVector<f64>` around and this wrapper exists to make the complex
/// dimension explicit at API boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct RealifiedVector(pub DVector<f64>);

impl RealifiedVector {
    /// Wraps a realified coordinate vector; the length must be even.
    pub fn new(coords: DVector<f64>) -> Result<Self> {
        if coords.len() % 2 != 0 {
            return Err(GfError::DimensionMismatch(format!(
                "realified vector needs an even length, got {}",
                coords.len()
            )));
        }
        Ok(Self(coords))
    }

    /// Complex dimension n.
    pub fn complex_dim(&self) -> usize {
        self.0.len() / 2
    }

    /// Borrows the underlying real coordinates.
    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    /// Converts to a complex coordinate vector.
    pub fn to_complex(&self) -> Vec<Complex64> {
        to_complex(&self.0)
    }

    /// Builds from complex coordinates.
    pub fn from_complex(z: &[Complex64]) -> Self {
        Self(from_complex(z))
    }
}

/// Converts a realified vector to complex coordinates.
pub fn to_complex(v: &DVector<f64>) -> Vec<Complex64> {
    v.as_slice()
        .chunks_exact(2)
        .map(|c| Complex64::new(c[0], c[1]))
        .collect()
}

/// Converts complex coordinates to the realified layout.
pub fn from_complex(z: &[Complex64]) -> DVector<f64> {
    let mut out = DVector::zeros(2 * z.len());
    for (j, c) in z.iter().enumerate() {
        out[2 * j] = c.re;
        out[2 * j + 1] = c.im;
    }
    out
}

/// Multiplies by i in place: each pair (x, y) becomes (-y, x).
pub fn mul_i_mut(v: &mut DVector<f64>) {
    for j in 0..v.len() / 2 {
        let x = v[2 * j];
        let y = v[2 * j + 1];
        v[2 * j] = -y;
        v[2 * j + 1] = x;
    }
}

/// Returns i*v.
pub fn mul_i(v: &DVector<f64>) -> DVector<f64> {
    let mut out = v.clone();
    mul_i_mut(&mut out);
    out
}

/// Returns -i*v.
pub fn mul_neg_i(v: &DVector<f64>) -> DVector<f64> {
    let mut out = v.clone();
    for j in 0..out.len() / 2 {
        let x = out[2 * j];
        let y = out[2 * j + 1];
        out[2 * j] = y;
        out[2 * j + 1] = -x;
    }
    out
}

/// Multiplies by the complex scalar c = (re, im), coordinatewise.
pub fn mul_complex_scalar(c: Complex64, v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(v.len());
    for j in 0..v.len() / 2 {
        let x = v[2 * j];
        let y = v[2 * j + 1];
        out[2 * j] = c.re * x - c.im * y;
        out[2 * j + 1] = c.im * x + c.re * y;
    }
    out
}

/// The symplectic pairing omega(v, w) = <i v, w>.
pub fn omega(v: &DVector<f64>, w: &DVector<f64>) -> f64 {
    mul_i(v).dot(w)
}

/// Complex Hermitian inner product <v, w> = sum conj(v_j) w_j.
pub fn hermitian_inner(v: &DVector<f64>, w: &DVector<f64>) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..v.len() / 2 {
        let a = Complex64::new(v[2 * j], v[2 * j + 1]);
        let b = Complex64::new(w[2 * j], w[2 * j + 1]);
        acc += a.conj() * b;
    }
    acc
}

/// The matrix of multiplication by i on R^{2n}.
pub fn j_matrix(two_n: usize) -> DMatrix<f64> {
    assert!(two_n % 2 == 0, "realified size must be even");
    let mut j = DMatrix::zeros(two_n, two_n);
    for k in 0..two_n / 2 {
        j[(2 * k, 2 * k + 1)] = -1.0;
        j[(2 * k + 1, 2 * k)] = 1.0;
    }
    j
}

/// The realified matrix of the diagonal unitary diag(e^{i theta_j}).
pub fn unitary_diagonal(phases: &[f64]) -> DMatrix<f64> {
    let two_n = 2 * phases.len();
    let mut m = DMatrix::zeros(two_n, two_n);
    for (j, th) in phases.iter().enumerate() {
        let (s, c) = th.sin_cos();
        m[(2 * j, 2 * j)] = c;
        m[(2 * j, 2 * j + 1)] = -s;
        m[(2 * j + 1, 2 * j)] = s;
        m[(2 * j + 1, 2 * j + 1)] = c;
    }
    m
}

/// The map tau(z, Z) = ((z+Z)/2, i(z-Z)).
pub fn tau(z: &DVector<f64>, big_z: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if z.len() != big_z.len() {
        return Err(GfError::DimensionMismatch(format!(
            "tau: {} vs {}",
            z.len(),
            big_z.len()
        )));
    }
    let w = (z + big_z).scale(0.5);
    let dual = mul_i(&(z - big_z));
    Ok((w, dual))
}

/// Inverse of [`tau`]: recovers (z, Z) from (w, W) via z - Z = -i W.
pub fn tau_inv(w: &DVector<f64>, dual: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if w.len() != dual.len() {
        return Err(GfError::DimensionMismatch(format!(
            "tau_inv: {} vs {}",
            w.len(),
            dual.len()
        )));
    }
    let half_diff = mul_neg_i(dual).scale(0.5);
    Ok((w + &half_diff, w - &half_diff))
}

/// A real quadratic form q(v) = v^T M v with a symmetric matrix and an
/// eigenvalue zero-threshold.
///
/// The matrix is symmetrized on construction; floating-point Hessians are
/// never exactly symmetric, and the symmetrization residual is the caller's
/// concern where it matters (see [`cayley_genfn`]).
#[derive(Debug, Clone)]
pub struct QuadForm {
    matrix: DMatrix<f64>,
    zero_tol: f64,
}

impl QuadForm {
    /// Builds a quadratic form, symmetrizing the input matrix.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        Self::with_tol(matrix, DEFAULT_EIGEN_TOL)
    }

    /// Builds with an explicit relative zero-threshold.
    pub fn with_tol(matrix: DMatrix<f64>, zero_tol: f64) -> Result<Self> {
        if !matrix.is_square() {
            return Err(GfError::DimensionMismatch(format!(
                "quadratic form matrix must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let sym = (&matrix + matrix.transpose()).scale(0.5);
        Ok(Self {
            matrix: sym,
            zero_tol,
        })
    }

    /// The symmetrized matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Ambient real dimension.
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// The relative zero-threshold knob.
    pub fn zero_tol(&self) -> f64 {
        self.zero_tol
    }

    /// Evaluates q(v) = v^T M v.
    pub fn value(&self, v: &DVector<f64>) -> f64 {
        (&self.matrix * v).dot(v)
    }

    /// Eigenvalues of the symmetric matrix, ascending.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let eig = self
            .matrix
            .clone()
            .try_symmetric_eigen(f64::EPSILON, 0)
            .ok_or_else(|| {
                GfError::Eigensolver(format!("symmetric eigen failed at dim {}", self.dim()))
            })?;
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(vals)
    }

    /// The effective absolute threshold: zero_tol * (1 + spectral radius).
    pub fn effective_threshold(&self, eigenvalues: &[f64]) -> f64 {
        let radius = eigenvalues
            .iter()
            .fold(0.0_f64, |acc, &x| acc.max(x.abs()));
        self.zero_tol * (1.0 + radius)
    }

    /// Restricts the form to the column span of `basis` (columns assumed
    /// linearly independent): returns B^T M B.
    pub fn restrict(&self, basis: &DMatrix<f64>) -> Result<QuadForm> {
        if basis.nrows() != self.dim() {
            return Err(GfError::DimensionMismatch(format!(
                "restriction basis has {} rows, form has dim {}",
                basis.nrows(),
                self.dim()
            )));
        }
        QuadForm::with_tol(basis.transpose() * &self.matrix * basis, self.zero_tol)
    }
}

/// Index and nullity of a quadratic form: the count of eigenvalues below
/// -tol and within [-tol, tol], with tol = zero_tol * (1 + spectral radius).
pub fn quad_index(q: &QuadForm) -> Result<(usize, usize)> {
    let vals = q.eigenvalues()?;
    let tol = q.effective_threshold(&vals);
    let index = vals.iter().filter(|&&x| x < -tol).count();
    let nullity = vals.iter().filter(|&&x| x.abs() <= tol).count();
    Ok((index, nullity))
}

/// A real 2d x 2d matrix verified to satisfy t(M) J M = J.
#[derive(Debug, Clone)]
pub struct SymplecticMatrix {
    matrix: DMatrix<f64>,
}

impl SymplecticMatrix {
    /// Validates and wraps a symplectic matrix.
    ///
    /// The residual |t(M) J M - J| is measured entrywise and scaled by
    /// 1 + |M|^2 so that products of large hyperbolic factors are judged
    /// fairly.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if !matrix.is_square() || n % 2 != 0 {
            return Err(GfError::DimensionMismatch(format!(
                "symplectic matrix must be square with even size, got {}x{}",
                n,
                matrix.ncols()
            )));
        }
        let j = j_matrix(n);
        let resid = matrix.transpose() * &j * &matrix - &j;
        let scale = 1.0 + matrix.norm_squared();
        let rel = resid.amax() / scale;
        if rel > SYMPLECTIC_TOL {
            return Err(GfError::NotSymplectic(rel));
        }
        Ok(Self { matrix })
    }

    /// The underlying matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Realified size 2d.
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// The exact symplectic inverse M^-1 = -J M^T J.
    pub fn inverse(&self) -> SymplecticMatrix {
        let j = j_matrix(self.dim());
        let inv = -(&j * self.matrix.transpose() * &j);
        SymplecticMatrix { matrix: inv }
    }

    /// Matrix product, revalidated.
    pub fn compose(&self, rhs: &SymplecticMatrix) -> Result<SymplecticMatrix> {
        SymplecticMatrix::new(&self.matrix * &rhs.matrix)
    }
}

/// The elementary generating function of a linear symplectic map M without
/// eigenvalue -1: the quadratic form f(w) = <K w, w> with
/// K = J (I - M)(I + M)^-1, so that grad f(w) = 2 K w and the step relation
/// holds exactly: for every z, with w = (z + M z)/2, grad f(w) = i (z - M z).
pub fn cayley_genfn(m: &SymplecticMatrix) -> Result<QuadForm> {
    let n = m.dim();
    let id = DMatrix::identity(n, n);
    let i_plus = &id + m.matrix();

    let svd = i_plus.clone().svd(false, false);
    let smin = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |acc, &s| acc.min(s));
    let inv_norm = if smin > 0.0 { 1.0 / smin } else { f64::INFINITY };
    if inv_norm > CAYLEY_INV_LIMIT {
        return Err(GfError::CayleySingular {
            inv_norm,
            limit: CAYLEY_INV_LIMIT,
        });
    }

    let lu = i_plus.lu();
    let x = lu.solve(&(&id - m.matrix())).ok_or(GfError::CayleySingular {
        inv_norm: f64::INFINITY,
        limit: CAYLEY_INV_LIMIT,
    })?;
    let k = j_matrix(n) * x;

    let asym = (&k - k.transpose()).amax();
    let scale = 1.0 + k.amax();
    if asym > 1e-10 * scale {
        return Err(GfError::InvariantViolation(format!(
            "Cayley form not symmetric: residual {:.3e} (matrix likely not symplectic)",
            asym
        )));
    }
    QuadForm::new(k)
}

/// Smallest singular value of (I + M), the reciprocal of the norm that
/// [`cayley_genfn`] guards on.  Used by mesh refinement to test factors
/// before committing to a subdivision.
pub fn cayley_margin(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let i_plus = DMatrix::identity(n, n) + m;
    let svd = i_plus.svd(false, false);
    svd.singular_values
        .iter()
        .fold(f64::INFINITY, |acc, &s| acc.min(s))
}

/// Random symmetric matrix with entries uniform in [-scale, scale].
pub fn random_symmetric(n: usize, scale: f64, rng: &mut impl rand::Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let x = rng.gen_range(-scale..scale);
            m[(i, j)] = x;
            m[(j, i)] = x;
        }
    }
    m
}

/// Random symplectic matrix near the identity: the step map
/// (I + J S)(I - J S)^-1 of a random small quadratic generating function
/// w^T S w.  Exactly symplectic up to roundoff for any symmetric S.
pub fn random_symplectic_near_identity(
    two_d: usize,
    scale: f64,
    rng: &mut impl rand::Rng,
) -> Result<SymplecticMatrix> {
    let s = random_symmetric(two_d, scale, rng);
    let j = j_matrix(two_d);
    let js = &j * &s;
    let id = DMatrix::identity(two_d, two_d);
    let lu = (&id - &js).lu();
    let m = lu
        .solve(&(&id + &js))
        .ok_or_else(|| GfError::Config("random symplectic: I - JS singular".into()))?;
    SymplecticMatrix::new(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rvec(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn mul_i_is_isometry_and_squares_to_minus_one() {
        let v = rvec(&[1.0, 2.0, -3.0, 0.5]);
        let iv = mul_i(&v);
        assert_abs_diff_eq!(iv.norm(), v.norm(), epsilon = 1e-15);
        let iiv = mul_i(&iv);
        assert_abs_diff_eq!((iiv + &v).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v.dot(&iv), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn tau_diagonal_maps_to_zero_section() {
        let z = rvec(&[0.3, -1.2, 2.0, 0.7]);
        let (w, dual) = tau(&z, &z).unwrap();
        assert_abs_diff_eq!((w - &z).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(dual.norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn tau_unit_example() {
        let z = rvec(&[1.0, 0.0]);
        let zero = rvec(&[0.0, 0.0]);
        let (w, dual) = tau(&z, &zero).unwrap();
        assert_abs_diff_eq!((w - rvec(&[0.5, 0.0])).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!((dual - rvec(&[0.0, 1.0])).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn tau_round_trip_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let z = DVector::from_fn(6, |_, _| rng.gen_range(-2.0..2.0));
            let big_z = DVector::from_fn(6, |_, _| rng.gen_range(-2.0..2.0));
            let (w, dual) = tau(&z, &big_z).unwrap();
            let (z2, big_z2) = tau_inv(&w, &dual).unwrap();
            assert!((z2 - &z).norm() < 1e-12);
            assert!((big_z2 - &big_z).norm() < 1e-12);

            let lam = Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let (wl, dl) = tau(&mul_complex_scalar(lam, &z), &mul_complex_scalar(lam, &big_z))
                .unwrap();
            assert!((wl - mul_complex_scalar(lam, &w)).norm() < 1e-12);
            assert!((dl - mul_complex_scalar(lam, &dual)).norm() < 1e-12);
        }
    }

    #[test]
    fn quad_index_small_examples() {
        let q = QuadForm::new(DMatrix::from_diagonal(&rvec(&[1.0, -1.0]))).unwrap();
        assert_eq!(quad_index(&q).unwrap(), (1, 0));

        let q = QuadForm::new(DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(quad_index(&q).unwrap(), (0, 4));

        // Hessian of the quarter-turn rotation generating function on C^1.
        let q = QuadForm::new(DMatrix::from_diagonal(&rvec(&[-2.0, -2.0]))).unwrap();
        assert_eq!(quad_index(&q).unwrap(), (2, 0));
    }

    #[test]
    fn quad_index_congruence_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let m = random_symmetric(6, 1.0, &mut rng)
                + DMatrix::from_diagonal(&rvec(&[2.0, -2.0, 2.0, -2.0, 2.0, -2.0]));
            let q = QuadForm::new(m.clone()).unwrap();
            let (ind, nul) = quad_index(&q).unwrap();
            if nul != 0 {
                continue;
            }
            // Well-conditioned congruence: identity plus a small perturbation.
            let a = DMatrix::identity(6, 6) + random_symmetric(6, 0.2, &mut rng);
            let qa = QuadForm::new(a.transpose() * &m * &a).unwrap();
            assert_eq!(quad_index(&qa).unwrap().0, ind);
        }
    }

    #[test]
    fn cayley_of_identity_is_zero() {
        let m = SymplecticMatrix::new(DMatrix::identity(4, 4)).unwrap();
        let q = cayley_genfn(&m).unwrap();
        assert!(q.matrix().amax() < 1e-14);
    }

    #[test]
    fn cayley_reproduces_rotation_generating_function() {
        // e^{-2 i pi t} I must give f(w) = -tan(pi t) |w|^2.
        for &t in &[-0.4, -0.25, 0.1, 0.25, 0.4] {
            for d in 1..=3usize {
                let phases = vec![-2.0 * std::f64::consts::PI * t; d];
                let m = SymplecticMatrix::new(unitary_diagonal(&phases)).unwrap();
                let q = cayley_genfn(&m).unwrap();
                let expected = -(std::f64::consts::PI * t).tan();
                let resid = (q.matrix() - DMatrix::identity(2 * d, 2 * d).scale(expected)).amax();
                assert!(
                    resid < 1e-12,
                    "t={t}, d={d}: coefficient residual {resid:.3e}"
                );
            }
        }
    }

    #[test]
    fn cayley_step_relation_on_random_symplectic() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let m = random_symplectic_near_identity(2, 0.3, &mut rng).unwrap();
            let q = cayley_genfn(&m).unwrap();
            let z = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let mz = m.matrix() * &z;
            let w = (&z + &mz).scale(0.5);
            let grad = (q.matrix() * &w).scale(2.0);
            let target = mul_i(&(&z - &mz));
            assert!((grad - target).norm() < 1e-10);
        }
    }

    #[test]
    fn cayley_negates_under_unitary_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let phases: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let m = SymplecticMatrix::new(unitary_diagonal(&phases)).unwrap();
            let q = cayley_genfn(&m).unwrap();
            let q_inv = cayley_genfn(&m.inverse()).unwrap();
            assert!((q.matrix() + q_inv.matrix()).amax() < 1e-12);
        }
    }

    #[test]
    fn cayley_rejects_minus_one_eigenvalue() {
        let m = SymplecticMatrix::new(unitary_diagonal(&[std::f64::consts::PI])).unwrap();
        match cayley_genfn(&m) {
            Err(GfError::CayleySingular { .. }) => {}
            other => panic!("expected CayleySingular, got {other:?}"),
        }
    }

    #[test]
    fn symplectic_validation_rejects_non_symplectic() {
        let mut m = DMatrix::identity(4, 4);
        m[(0, 0)] = 2.0;
        assert!(SymplecticMatrix::new(m).is_err());
    }

    #[test]
    fn symplectic_inverse_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_symplectic_near_identity(6, 0.4, &mut rng).unwrap();
        let prod = m.matrix() * m.inverse().matrix();
        assert!((prod - DMatrix::identity(6, 6)).amax() < 1e-12);
    }

    #[test]
    fn omega_is_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let v = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let w = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            assert_abs_diff_eq!(omega(&v, &w), -omega(&w, &v), epsilon = 1e-14);
        }
    }
}
