//! Maslov indices of symplectic paths through quadratic generating families.
//!
//! A path (Gamma_t) in Sp(2d) is subdivided on a fixed mesh; each transition
//! factor Gamma_s Gamma_{t_j}^{-1} stays away from eigenvalue -1 (refining
//! the mesh otherwise), so its Cayley generating function exists and the
//! whole path is encoded by a continuous family of quadratic step tuples
//! with constant auxiliary dimension.  The index is
//!
//! ```text
//!     mas(Gamma) = ind(Q_1) - ind(Q_0),
//! ```
//!
//! the Hessian index difference of the family's endpoints.  On top of this
//! sit the mean index mas(Gamma_{Kt})/K with its K-truncation error bar, the
//! iterate inequalities relating mas_k, the kernel of Gamma_1^k - I and the
//! mean, fixed-point indices of step-tuple families through critical-point
//! continuation, and the augmented action built from the mean index.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GfError, Result};
use crate::genfun::{
    broken_gradient, broken_hessian, coordinates_from_closed_z, flatten, step_jacobian,
    trajectory, unflatten, ElementaryGen, QuadGen, StepTuple, ZeroGen,
};
use crate::hamdiff::complex_phase_times;
use crate::symplin::{
    cayley_genfn, cayley_margin, j_matrix, quad_index, unitary_diagonal, SymplecticMatrix,
};

/// Margin below which a transition factor counts as Cayley-singular,
/// matching the 1e6 bound on the norm of (I + M)^-1.
pub const CAYLEY_MARGIN_MIN: f64 = 1e-6;

/// Hard cap on mesh-refinement rounds.
pub const MAX_REFINEMENTS: usize = 22;

/// A continuous path [0, 1] -> Sp(2d), sampled through a callback.
#[derive(Clone)]
pub struct SymplecticPath {
    sample: Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>,
    dim: usize,
}

impl std::fmt::Debug for SymplecticPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SymplecticPath")
            .field("dim", &self.dim)
            .finish()
    }
}

fn symp_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let j = j_matrix(m.nrows());
    -(&j * m.transpose() * &j)
}

impl SymplecticPath {
    /// Wraps a sampling callback; `dim` is the realified dimension 2d.
    pub fn from_fn<F>(dim: usize, f: F) -> Result<Self>
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        if dim == 0 || dim % 2 != 0 {
            return Err(GfError::DimensionMismatch(format!(
                "path dimension must be even and positive, got {dim}"
            )));
        }
        let path = Self {
            sample: Arc::new(f),
            dim,
        };
        for &t in &[0.0, 0.37, 1.0] {
            path.checked_sample(t)?;
        }
        Ok(path)
    }

    /// Realified dimension 2d.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Complex dimension d.
    pub fn complex_dim(&self) -> usize {
        self.dim / 2
    }

    /// Raw sample.
    pub fn sample(&self, t: f64) -> DMatrix<f64> {
        (self.sample)(t)
    }

    /// Sample with the symplecticity invariant enforced to 1e-8.
    pub fn checked_sample(&self, t: f64) -> Result<DMatrix<f64>> {
        let m = self.sample(t);
        if m.nrows() != self.dim || m.ncols() != self.dim {
            return Err(GfError::DimensionMismatch(format!(
                "path sample at t = {t} has shape {}x{}, expected {}",
                m.nrows(),
                m.ncols(),
                self.dim
            )));
        }
        let j = j_matrix(self.dim);
        let resid = (m.transpose() * &j * &m - &j).amax() / (1.0 + m.amax().powi(2));
        if resid > 1e-8 {
            return Err(GfError::NotSymplectic(resid));
        }
        Ok(m)
    }

    /// True when Gamma_0 = I to 1e-8.
    pub fn is_based(&self) -> bool {
        let m = self.sample(0.0);
        (m - DMatrix::identity(self.dim, self.dim)).amax() <= 1e-8
    }

    /// The constant path at a fixed symplectic matrix.
    pub fn constant(m: SymplecticMatrix) -> Result<Self> {
        let dim = m.dim();
        let mat = m.matrix().clone();
        Self::from_fn(dim, move |_| mat.clone())
    }

    /// The identity-constant path.
    pub fn identity(dim: usize) -> Result<Self> {
        Self::from_fn(dim, move |_| DMatrix::identity(dim, dim))
    }

    /// t -> diag(e^{2 i pi b_j t}) over the complex coordinates.
    pub fn unitary_diagonal_path(speeds: &[f64]) -> Result<Self> {
        let speeds = speeds.to_vec();
        Self::from_fn(2 * speeds.len(), move |t| {
            let phases: Vec<f64> =
                speeds.iter().map(|b| std::f64::consts::TAU * b * t).collect();
            unitary_diagonal(&phases)
        })
    }

    /// t -> diag(e^{lambda t}, e^{-lambda t}) on Sp(2).
    pub fn hyperbolic(lambda: f64) -> Result<Self> {
        Self::from_fn(2, move |t| {
            let mut m = DMatrix::zeros(2, 2);
            m[(0, 0)] = (lambda * t).exp();
            m[(1, 1)] = (-lambda * t).exp();
            m
        })
    }

    /// Concatenation: self on [0, 1/2], then other on [1/2, 1].  The caller
    /// is responsible for endpoint compatibility other(0) = self(1).
    pub fn concat(&self, other: &SymplecticPath) -> Result<Self> {
        if other.dim != self.dim {
            return Err(GfError::DimensionMismatch(
                "concatenated paths must share dimension".into(),
            ));
        }
        let gap = (other.sample(0.0) - self.sample(1.0)).amax();
        if gap > 1e-8 {
            return Err(GfError::Config(format!(
                "concatenation endpoints differ by {gap:.3e}"
            )));
        }
        let a = self.clone();
        let b = other.clone();
        Self::from_fn(self.dim, move |t| {
            if t <= 0.5 {
                a.sample(2.0 * t)
            } else {
                b.sample(2.0 * t - 1.0)
            }
        })
    }

    /// Time reversal t -> Gamma_{1-t}.
    pub fn reverse(&self) -> Result<Self> {
        let p = self.clone();
        Self::from_fn(self.dim, move |t| p.sample(1.0 - t))
    }

    /// Block direct sum with another path.
    pub fn direct_sum(&self, other: &SymplecticPath) -> Result<Self> {
        let a = self.clone();
        let b = other.clone();
        let da = self.dim;
        let db = other.dim;
        Self::from_fn(da + db, move |t| {
            let ma = a.sample(t);
            let mb = b.sample(t);
            let mut m = DMatrix::zeros(da + db, da + db);
            m.view_mut((0, 0), (da, da)).copy_from(&ma);
            m.view_mut((da, da), (db, db)).copy_from(&mb);
            m
        })
    }

    /// Conjugation t -> C Gamma_t C^-1 by a constant symplectic matrix.
    pub fn conjugate(&self, c: &SymplecticMatrix) -> Result<Self> {
        if c.dim() != self.dim {
            return Err(GfError::DimensionMismatch(
                "conjugating matrix dimension mismatch".into(),
            ));
        }
        let p = self.clone();
        let cm = c.matrix().clone();
        let ci = c.inverse().matrix().clone();
        Self::from_fn(self.dim, move |t| &cm * p.sample(t) * &ci)
    }

    /// Monotone reparametrization t -> Gamma_{phi(t)}; phi must fix 0 and 1.
    pub fn reparametrize<F>(&self, phi: F) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let p = self.clone();
        Self::from_fn(self.dim, move |t| p.sample(phi(t).clamp(0.0, 1.0)))
    }

    /// Right translation t -> Gamma_t M by a constant symplectic matrix.
    pub fn right_translate(&self, m: &SymplecticMatrix) -> Result<Self> {
        if m.dim() != self.dim {
            return Err(GfError::DimensionMismatch(
                "translation matrix dimension mismatch".into(),
            ));
        }
        let p = self.clone();
        let mm = m.matrix().clone();
        Self::from_fn(self.dim, move |t| p.sample(t) * &mm)
    }

    /// The k-fold iterate path s -> Gamma_{frac(ks)} Gamma_1^{floor(ks)},
    /// using the rule Gamma_{t+j} = Gamma_t Gamma_1^j.  Requires a based
    /// path.
    pub fn iterate(&self, k: usize) -> Result<Self> {
        if !self.is_based() {
            return Err(GfError::Config(
                "iterate is defined for based paths (Gamma_0 = I)".into(),
            ));
        }
        if k == 0 {
            return Self::identity(self.dim);
        }
        let g1 = self.sample(1.0);
        let mut powers = Vec::with_capacity(k + 1);
        powers.push(DMatrix::identity(self.dim, self.dim));
        for j in 1..=k {
            let next = &g1 * &powers[j - 1];
            powers.push(next);
        }
        let p = self.clone();
        Self::from_fn(self.dim, move |s| {
            let u = (k as f64 * s).clamp(0.0, k as f64);
            let mut j = u.floor() as usize;
            let mut frac = u - j as f64;
            if j == k {
                j = k - 1;
                frac = 1.0;
            }
            p.sample(frac) * &powers[j]
        })
    }

    /// Twists by the scalar phase: s -> e^{-2 i pi t s} Gamma_s.
    pub fn twist(&self, t: f64) -> Result<Self> {
        let p = self.clone();
        Self::from_fn(self.dim, move |s| {
            let phase =
                num_complex::Complex64::from_polar(1.0, -std::f64::consts::TAU * t * s);
            complex_phase_times(phase, &p.sample(s))
        })
    }
}

/// The discrete based path through a step tuple linearized along the open
/// trajectory of z: within step k the factor interpolates from I to the
/// step Jacobian through Cayley transforms of the scaled Hessian, and whole
/// steps compose by prefix products.  Gamma(1) is the full linearization.
pub fn linearized_tuple_path(tuple: &StepTuple, z: &DVector<f64>) -> Result<SymplecticPath> {
    let n = tuple.len();
    let dim = tuple.real_dim();
    let mut hessians = Vec::with_capacity(n);
    let mut prefixes = Vec::with_capacity(n + 1);
    prefixes.push(DMatrix::identity(dim, dim));
    let mut cur = z.clone();
    for k in 0..n {
        let (jac, image) = step_jacobian(tuple.step(k), &cur)?;
        hessians.push(tuple.step(k).hessian(&image.w));
        let next_prefix = &jac * prefixes.last().unwrap();
        prefixes.push(next_prefix);
        cur = image.sigma_z;
    }
    let j = j_matrix(dim);
    SymplecticPath::from_fn(dim, move |s| {
        let u = (s.clamp(0.0, 1.0)) * n as f64;
        let mut k = u.floor() as usize;
        let mut frac = u - k as f64;
        if k == n {
            k = n - 1;
            frac = 1.0;
        }
        // d sigma for the scaled function frac * f_k, at the step's own w:
        // (I - (frac/2) J H)^-1 (I + (frac/2) J H).
        let a = (&j * &hessians[k]).scale(0.5 * frac);
        let id = DMatrix::identity(a.nrows(), a.ncols());
        let m = (&id - &a)
            .lu()
            .solve(&(&id + &a))
            .expect("scaled step factor singular");
        m * &prefixes[k]
    })
}

struct FamilySetup {
    prefix: Vec<DMatrix<f64>>,
    mesh_factors: Vec<DMatrix<f64>>,
    dim: usize,
}

impl FamilySetup {
    fn total_factors(&self) -> usize {
        let n = self.prefix.len() + self.mesh_factors.len();
        if n % 2 == 0 {
            n + 1
        } else {
            n
        }
    }
}

/// Constant factors composing to Gamma_0 with Cayley margins, for paths
/// that do not start at the identity.  A single factor suffices unless
/// Gamma_0 itself is near eigenvalue -1, in which case it is split through
/// a scalar rotation.
fn prefix_factors(g0: &DMatrix<f64>, dim: usize) -> Result<Vec<DMatrix<f64>>> {
    let id = DMatrix::identity(dim, dim);
    if (g0 - &id).amax() < 1e-12 {
        return Ok(Vec::new());
    }
    if cayley_margin(g0) >= CAYLEY_MARGIN_MIN {
        return Ok(vec![g0.clone()]);
    }
    for i in 1..=16 {
        let theta = 0.19 * i as f64;
        let rot = unitary_diagonal(&vec![theta; dim / 2]);
        let rest = g0 * symp_inverse(&rot);
        if cayley_margin(&rot) >= CAYLEY_MARGIN_MIN
            && cayley_margin(&rest) >= CAYLEY_MARGIN_MIN
        {
            return Ok(vec![rot, rest]);
        }
    }
    Err(GfError::SubdivisionFailure {
        refinements: 0,
        detail: "could not factor the starting matrix away from eigenvalue -1".into(),
    })
}

/// Builds the mesh factors for one subdivision count, or None when some
/// transition factor gets too close to the Cayley singularity.
fn try_mesh(path: &SymplecticPath, n_sub: usize) -> Result<Option<FamilySetup>> {
    let dim = path.dim();
    let samples: Vec<DMatrix<f64>> = (0..=n_sub)
        .map(|j| path.sample(j as f64 / n_sub as f64))
        .collect();
    // Spot-check the symplecticity invariant.
    for &j in &[0, n_sub / 2, n_sub] {
        path.checked_sample(j as f64 / n_sub as f64)?;
    }
    let prefix = prefix_factors(&samples[0], dim)?;

    let h = 1.0 / n_sub as f64;
    let mut mesh_factors = Vec::with_capacity(n_sub);
    for j in 0..n_sub {
        let inv_j = symp_inverse(&samples[j]);
        for i in 0..=8 {
            let u = (j as f64 + i as f64 / 8.0) * h;
            let m = path.sample(u) * &inv_j;
            if cayley_margin(&m) < CAYLEY_MARGIN_MIN {
                return Ok(None);
            }
        }
        mesh_factors.push(&samples[j + 1] * &inv_j);
    }
    Ok(Some(FamilySetup {
        prefix,
        mesh_factors,
        dim,
    }))
}

/// Index of the broken Hessian of the quadratic tuple whose steps generate
/// the given symplectic factors (padded with identity factors to odd size).
fn factor_family_index(setup: &FamilySetup, at_end: bool) -> Result<usize> {
    let total = setup.total_factors();
    let dim = setup.dim;
    let mut factor_list: Vec<&DMatrix<f64>> = Vec::with_capacity(total);
    for f in &setup.prefix {
        factor_list.push(f);
    }
    let id = DMatrix::identity(dim, dim);
    if at_end {
        for f in &setup.mesh_factors {
            factor_list.push(f);
        }
    } else {
        for _ in 0..setup.mesh_factors.len() {
            factor_list.push(&id);
        }
    }
    while factor_list.len() < total {
        factor_list.push(&id);
    }

    // All-identity families reduce to the pure coupling form, whose index
    // on an odd number of blocks is (dim/2) * (blocks - 1).
    let all_identity = factor_list.iter().all(|f| (*f - &id).amax() < 1e-13);
    if all_identity {
        return Ok((dim / 2) * (total - 1));
    }

    let mut steps: Vec<Arc<dyn ElementaryGen>> = Vec::with_capacity(total);
    for f in factor_list {
        if (f - &id).amax() < 1e-13 {
            steps.push(Arc::new(ZeroGen::new(dim)));
        } else {
            let sym = SymplecticMatrix::new(f.clone())?;
            let k = cayley_genfn(&sym)?;
            steps.push(Arc::new(QuadGen::new(k.matrix().clone())?));
        }
    }
    let tuple = StepTuple::new(steps)?;
    let zeros = vec![DVector::zeros(dim); tuple.len()];
    let hess = broken_hessian(&tuple, &zeros)?;
    let (ind, _null) = quad_index(&hess)?;
    Ok(ind)
}

fn mesh_index_difference(path: &SymplecticPath, n_sub: usize) -> Result<Option<i64>> {
    let setup = match try_mesh(path, n_sub)? {
        Some(s) => s,
        None => return Ok(None),
    };
    let ind1 = factor_family_index(&setup, true)? as i64;
    let ind0 = factor_family_index(&setup, false)? as i64;
    Ok(Some(ind1 - ind0))
}

/// The Maslov index of a symplectic path: the Hessian index difference of
/// the endpoint quadratic generating families on a common mesh, refined
/// until a doubled mesh reproduces the same integer.
pub fn maslov_index(path: &SymplecticPath, subdivisions: usize) -> Result<i64> {
    let mut n_sub = subdivisions.max(2);
    let mut prev: Option<i64> = None;
    for round in 0..MAX_REFINEMENTS {
        match mesh_index_difference(path, n_sub)? {
            Some(mas) => {
                if prev == Some(mas) {
                    return Ok(mas);
                }
                prev = Some(mas);
            }
            None => {
                prev = None;
                let _ = round;
            }
        }
        n_sub *= 2;
    }
    Err(GfError::SubdivisionFailure {
        refinements: MAX_REFINEMENTS,
        detail: "mesh refinement did not stabilize the index".into(),
    })
}

/// Mean index data for a based path.
#[derive(Debug, Clone, Serialize)]
pub struct MeanIndex {
    /// mas(Gamma_{Kt})/K.
    pub mean: f64,
    /// K-truncation error bar d/K.
    pub error_bar: f64,
    /// The truncation order actually used.
    pub k: usize,
    /// Table of iterate indices k -> mas_k for k = 1..=K.
    pub table: Vec<(usize, i64)>,
}

/// Estimates the mean index by the K-th iterate: mas_K / K, with the whole
/// iterate table.  Requires K >= 4 and a based path.
pub fn mean_index(path: &SymplecticPath, big_k: usize) -> Result<MeanIndex> {
    if big_k < 4 {
        return Err(GfError::Config(format!(
            "mean index needs K >= 4, got {big_k}"
        )));
    }
    let mut table = Vec::with_capacity(big_k);
    for k in 1..=big_k {
        let mas_k = maslov_index(&path.iterate(k)?, (2 * k).max(4))?;
        table.push((k, mas_k));
    }
    let mas_big = table[big_k - 1].1;
    Ok(MeanIndex {
        mean: mas_big as f64 / big_k as f64,
        error_bar: path.complex_dim() as f64 / big_k as f64,
        k: big_k,
        table,
    })
}

/// One row of an iterate table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterateRow {
    pub k: usize,
    pub mas: i64,
    pub nullity: usize,
    /// Slack of the sharper of the two iterate inequalities at this k.
    pub margin: f64,
}

/// Index report for a based path: Maslov index, mean index, iterate table
/// and the inequality slack per iterate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexReport {
    pub mas: i64,
    pub mean: f64,
    pub mean_error_bar: f64,
    pub iterates: Vec<IterateRow>,
    pub bott_margin: Vec<f64>,
}

/// dim ker(Gamma_1^k - I) through singular values.
pub fn iterate_nullity(g1: &DMatrix<f64>, k: usize) -> usize {
    let n = g1.nrows();
    let mut p = DMatrix::identity(n, n);
    for _ in 0..k {
        p = g1 * p;
    }
    let m = p - DMatrix::identity(n, n);
    let scale = 1.0 + m.amax();
    let svd = m.svd(false, false);
    svd.singular_values
        .iter()
        .filter(|&&s| s <= 1e-7 * scale)
        .count()
}

/// Verifies the iterate inequalities
///
/// ```text
///     k mean - 2d k/K  <=  mas_k        (lower)
///     mas_k + nullity_k <= k mean + 2d  (upper)
/// ```
///
/// for k = 1..=kmax, where mean = mas_K/K is the internal high-K estimate
/// (K = max(64, 4 kmax)) and the lower bound carries the K-truncation
/// allowance 2d k/K.  Violation is a hard error.
pub fn bott_check(path: &SymplecticPath, kmax: usize) -> Result<IndexReport> {
    if kmax < 1 {
        return Err(GfError::Config("bott_check needs kmax >= 1".into()));
    }
    let d = path.complex_dim() as f64;
    let big_k = (4 * kmax).max(64);
    let mas_big = maslov_index(&path.iterate(big_k)?, (2 * big_k).max(8))?;
    let mean = mas_big as f64 / big_k as f64;
    let trunc = 2.0 * d / big_k as f64;

    let g1 = path.checked_sample(1.0)?;
    let mut iterates = Vec::with_capacity(kmax);
    let mut margins = Vec::with_capacity(kmax);
    for k in 1..=kmax {
        let mas_k = maslov_index(&path.iterate(k)?, (2 * k).max(4))?;
        let nullity = iterate_nullity(&g1, k);
        let lower_slack = mas_k as f64 - (k as f64 * mean - trunc * k as f64) + 1e-9;
        let upper_slack = (k as f64 * mean + 2.0 * d) - (mas_k as f64 + nullity as f64) + 1e-9;
        if lower_slack < 0.0 || upper_slack < 0.0 {
            return Err(GfError::InvariantViolation(format!(
                "iterate inequality violated at k = {k}: mas_k = {mas_k}, nullity = {nullity}, \
                 mean = {mean:.6} (lower slack {lower_slack:.3e}, upper slack {upper_slack:.3e})"
            )));
        }
        let margin = lower_slack.min(upper_slack);
        margins.push(margin);
        iterates.push(IterateRow {
            k,
            mas: mas_k,
            nullity,
            margin,
        });
    }
    Ok(IndexReport {
        mas: iterates[0].mas,
        mean,
        mean_error_bar: d / big_k as f64,
        iterates,
        bott_margin: margins,
    })
}

/// Both sides of one path-algebra identity.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IdentityCheck {
    pub lhs: i64,
    pub rhs: i64,
}

impl IdentityCheck {
    pub fn pass(&self) -> bool {
        self.lhs == self.rhs
    }
}

/// Results of the five path-algebra identities.
#[derive(Debug, Clone, Serialize)]
pub struct PathPropertiesReport {
    /// mas(R then S') = mas(R) + mas(S') with S' = S right-translated to
    /// start at R(1).
    pub concatenation: IdentityCheck,
    /// mas(reverse R) = -mas(R).
    pub reverse: IdentityCheck,
    /// mas(R + S block sum) = mas(R) + mas(S).
    pub direct_sum: IdentityCheck,
    /// mas(C R C^-1) = mas(R) for constant symplectic C.
    pub conjugation: IdentityCheck,
    /// mas(R o phi) = mas(R) for monotone phi fixing 0 and 1.
    pub reparametrization: IdentityCheck,
}

impl PathPropertiesReport {
    pub fn all_pass(&self) -> bool {
        self.concatenation.pass()
            && self.reverse.pass()
            && self.direct_sum.pass()
            && self.conjugation.pass()
            && self.reparametrization.pass()
    }
}

/// Runs the five identities on the supplied pair of paths.
pub fn path_properties_suite(
    r: &SymplecticPath,
    s: &SymplecticPath,
) -> Result<PathPropertiesReport> {
    let mas_r = maslov_index(r, 4)?;
    let mas_s = maslov_index(s, 4)?;

    // Concatenation needs S to start at R(1); right-translate S there.
    let shift = SymplecticMatrix::new(symp_inverse(&s.sample(0.0)) * r.sample(1.0))?;
    let s_compat = s.right_translate(&shift)?;
    let mas_s_compat = maslov_index(&s_compat, 4)?;
    let concatenated = r.concat(&s_compat)?;
    let concatenation = IdentityCheck {
        lhs: maslov_index(&concatenated, 8)?,
        rhs: mas_r + mas_s_compat,
    };

    let reverse = IdentityCheck {
        lhs: maslov_index(&r.reverse()?, 4)?,
        rhs: -mas_r,
    };

    let direct_sum = IdentityCheck {
        lhs: maslov_index(&r.direct_sum(s)?, 4)?,
        rhs: mas_r + mas_s,
    };

    let c = SymplecticMatrix::new(s.sample(1.0))?;
    let conjugation = IdentityCheck {
        lhs: maslov_index(&r.conjugate(&c)?, 4)?,
        rhs: mas_r,
    };

    let reparametrization = IdentityCheck {
        lhs: maslov_index(&r.reparametrize(|t| t * t * (3.0 - 2.0 * t))?, 4)?,
        rhs: mas_r,
    };

    Ok(PathPropertiesReport {
        concatenation,
        reverse,
        direct_sum,
        conjugation,
        reparametrization,
    })
}

/// The Maslov index of a fixed point through a family of step tuples:
/// the critical point of F_1 lifting z (whose trajectory must close) is
/// continued down to s = 0 by Newton steps on a refining mesh, and the
/// result is ind(Hess F_1 at zeta_1) - ind(Hess F_0 at zeta_0).
pub fn fixed_point_maslov<F>(family: F, z: &DVector<f64>) -> Result<i64>
where
    F: Fn(f64) -> Result<StepTuple>,
{
    let tuple1 = family(1.0)?;
    if !tuple1.is_odd() {
        return Err(GfError::Parity(format!(
            "fixed-point families need odd tuples, got size {}",
            tuple1.len()
        )));
    }
    let n = tuple1.len();
    let dim = tuple1.real_dim();
    let traj = trajectory(&tuple1, z)?;
    let closure_gap = (traj[n].clone() - z).norm();
    if closure_gap > 1e-9 * (1.0 + z.norm()) {
        return Err(GfError::Config(format!(
            "z is not fixed at s = 1 (trajectory gap {closure_gap:.3e})"
        )));
    }
    let coords = coordinates_from_closed_z(&tuple1, &traj[..n])?;
    let zeta1 = flatten(&coords.v);

    let mut mesh = 8usize;
    for _ in 0..8 {
        match continue_critical_point(&family, &zeta1, n, dim, mesh)? {
            Some(answer) => return Ok(answer),
            None => mesh *= 2,
        }
    }
    Err(GfError::ContinuationFailure(
        "critical-point continuation did not stabilize (possible bifurcation)".into(),
    ))
}

/// One continuation sweep from s = 1 to s = 0; None asks for a finer mesh.
fn continue_critical_point<F>(
    family: &F,
    zeta1: &DVector<f64>,
    n: usize,
    dim: usize,
    mesh: usize,
) -> Result<Option<i64>>
where
    F: Fn(f64) -> Result<StepTuple>,
{
    let mut zeta = zeta1.clone();
    let mut prev_zeta: Option<DVector<f64>> = None;
    let mut ind1: Option<usize> = None;
    let mut last_ind = 0usize;
    for i in 0..=mesh {
        let s = 1.0 - i as f64 / mesh as f64;
        let tuple = family(s)?;
        if tuple.len() != n || tuple.real_dim() != dim {
            return Err(GfError::DimensionMismatch(
                "family tuples must share size and dimension".into(),
            ));
        }
        if !newton_refine(&tuple, &mut zeta)? {
            return Ok(None);
        }
        if let Some(prev) = &prev_zeta {
            // Branch control: between mesh points the continued critical
            // point must not jump to a different orbit.  A displacement of
            // order one signals a branch switch or bifurcation, which a
            // finer mesh either resolves or confirms.
            let jump = (&zeta - prev).norm();
            if jump > 0.25 * (1.0 + prev.norm()) {
                return Ok(None);
            }
        }
        prev_zeta = Some(zeta.clone());
        let hess = broken_hessian(&tuple, &unflatten(&zeta, dim))?;
        let (ind, _null) = quad_index(&hess)?;
        if ind1.is_none() {
            ind1 = Some(ind);
        }
        last_ind = ind;
    }
    Ok(Some(ind1.unwrap() as i64 - last_ind as i64))
}

fn newton_refine(tuple: &StepTuple, zeta: &mut DVector<f64>) -> Result<bool> {
    let dim = tuple.real_dim();
    for _ in 0..30 {
        let v = unflatten(zeta, dim);
        let grad = flatten(&broken_gradient(tuple, &v)?);
        let scale = 1.0 + zeta.norm();
        if grad.norm() <= 1e-11 * scale {
            return Ok(true);
        }
        let hess = broken_hessian(tuple, &v)?;
        let step = match hess.matrix().clone().lu().solve(&grad) {
            Some(s) => s,
            None => return Ok(false),
        };
        if step.norm() > 0.5 * scale {
            return Ok(false);
        }
        *zeta -= step;
    }
    let v = unflatten(zeta, dim);
    let grad = flatten(&broken_gradient(tuple, &v)?);
    Ok(grad.norm() <= 1e-11 * (1.0 + zeta.norm()))
}

/// The index of a tuple's fixed point via its linearized path, twisted by
/// the given action phase.  Cross-checks `fixed_point_maslov`.
pub fn linearized_fixed_point_index(
    tuple: &StepTuple,
    z: &DVector<f64>,
    twist: f64,
) -> Result<i64> {
    let base = linearized_tuple_path(tuple, z)?;
    let path = base.twist(twist)?;
    maslov_index(&path, 2 * tuple.len())
}

/// A fixed-point class for iterate bookkeeping: the action value t and the
/// based linearized path of the time-1 return map at the point.
pub struct FixedPointClass {
    /// Action t(y) in [0, 1).
    pub t: f64,
    /// Based linearized path s -> dPhi_s at the fixed point.
    pub lin: SymplecticPath,
}

impl FixedPointClass {
    /// Builds from a tuple with a genuine fixed point z of its composition
    /// twisted by e^{-2 i pi t}: checks e^{-2 i pi t} Phi(z) = z.
    pub fn new(tuple: &StepTuple, z: &DVector<f64>, t: f64) -> Result<Self> {
        let image = crate::genfun::apply_tuple(tuple, z)?;
        let phase = num_complex::Complex64::from_polar(1.0, -std::f64::consts::TAU * t);
        let back = crate::symplin::mul_complex_scalar(phase, &image);
        let gap = (back - z).norm();
        if gap > 1e-8 * (1.0 + z.norm()) {
            return Err(GfError::Config(format!(
                "(t, z) is not a twisted fixed point (gap {gap:.3e})"
            )));
        }
        Ok(Self {
            t,
            lin: linearized_tuple_path(tuple, z)?,
        })
    }

    /// The action of the m-th iterate: t(y^m) = frac(m t(y)).
    pub fn iterate_action(&self, m: usize) -> f64 {
        (m as f64 * self.t).rem_euclid(1.0)
    }

    /// The twisted linearized path of the m-th iterate:
    /// s -> e^{-2 i pi t(y^m) s} dPhi_{ms}.
    pub fn twisted_iterate_path(&self, m: usize) -> Result<SymplecticPath> {
        self.lin.iterate(m)?.twist(self.iterate_action(m))
    }

    /// Mean index of the m-th iterate's twisted path.
    pub fn iterate_mean_index(&self, m: usize, big_k: usize) -> Result<MeanIndex> {
        mean_index(&self.twisted_iterate_path(m)?, big_k)
    }
}

/// One tabulated row of the iterate identity.
#[derive(Debug, Clone, Serialize)]
pub struct IterateIdentityRow {
    pub m: usize,
    /// Mean index of the m-th iterate's twisted path.
    pub lhs: f64,
    /// m * (mean index at m = 1) - 2(d+1) floor(m t(y)).
    pub rhs: f64,
    /// Truncation tolerance for the comparison.
    pub tol: f64,
}

/// Tabulates both sides of the iterate identity
/// mind(y^m) = m mind(y) - 2(d+1) floor(m t(y)) for m = 1..=mmax.
///
/// The m = 1 mean on the right is measured at truncation order m K, so
/// that both sides sample the same mK-fold iterate: the K-iterate of the
/// m-th twisted path is the mK-iterate of the base path up to an integer
/// number of scalar turns, which shift the index exactly.  The residual is
/// then pure rounding, and the tolerance only needs the transverse
/// truncation bar.
pub fn iterated_index_identity(
    y: &FixedPointClass,
    mmax: usize,
    big_k: usize,
) -> Result<Vec<IterateIdentityRow>> {
    let ambient = y.lin.complex_dim() as f64;
    let mut rows = Vec::with_capacity(mmax);
    for m in 1..=mmax {
        let lhs = y.iterate_mean_index(m, big_k)?;
        let base = y.iterate_mean_index(1, m * big_k)?;
        let floor_term = (m as f64 * y.t).floor();
        let rhs = m as f64 * base.mean - 2.0 * ambient * floor_term;
        let tol = (ambient - 1.0).max(1.0) / big_k as f64 + 1e-9;
        let row = IterateIdentityRow {
            m,
            lhs: lhs.mean,
            rhs,
            tol,
        };
        if (row.lhs - row.rhs).abs() > row.tol {
            return Err(GfError::InvariantViolation(format!(
                "iterate identity failed at m = {m}: lhs {:.6} vs rhs {:.6} (tol {:.6})",
                row.lhs, row.rhs, row.tol
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// The augmented action of an iterate, with its truncation error bar.
#[derive(Debug, Clone, Serialize)]
pub struct AugmentedAction {
    pub value: f64,
    pub error_bar: f64,
    /// |value - m * (m=1 value)|, checked against the combined error bars.
    pub homogeneity_gap: f64,
}

/// Computes a(y^m) = m t(y) - mind(y^m) / (2(d+1)) and verifies the
/// homogeneity a(y^m) = m a(y) to the mean-index error bars.
pub fn augmented_action(y: &FixedPointClass, m: usize, big_k: usize) -> Result<AugmentedAction> {
    let two_dp1 = 2.0 * y.lin.complex_dim() as f64;
    let mean_m = y.iterate_mean_index(m, big_k)?;
    let value = m as f64 * y.t - mean_m.mean / two_dp1;
    let base = y.iterate_mean_index(1, big_k)?;
    let base_value = y.t - base.mean / two_dp1;
    let gap = (value - m as f64 * base_value).abs();
    let tol = (mean_m.error_bar + m as f64 * base.error_bar) / two_dp1 + 1e-9;
    if gap > tol {
        return Err(GfError::InvariantViolation(format!(
            "augmented action homogeneity failed at m = {m}: gap {gap:.3e} > tol {tol:.3e}"
        )));
    }
    Ok(AugmentedAction {
        value,
        error_bar: mean_m.error_bar / two_dp1,
        homogeneity_gap: gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamdiff::matrix_exp;
    use crate::symplin::random_symmetric;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rotation_path(b: f64) -> SymplecticPath {
        SymplecticPath::unitary_diagonal_path(&[b]).unwrap()
    }

    #[test]
    fn constant_path_has_zero_index() {
        let path = SymplecticPath::identity(2).unwrap();
        assert_eq!(maslov_index(&path, 4).unwrap(), 0);
        let m = SymplecticMatrix::new(unitary_diagonal(&[0.9])).unwrap();
        let path = SymplecticPath::constant(m).unwrap();
        assert_eq!(maslov_index(&path, 4).unwrap(), 0);
    }

    #[test]
    fn positive_full_rotation_scores_minus_two() {
        assert_eq!(maslov_index(&rotation_path(1.0), 4).unwrap(), -2);
    }

    #[test]
    fn negative_full_turn_scores_two_per_complex_dim() {
        for d1 in 1..=3usize {
            let speeds = vec![-1.0; d1];
            let path = SymplecticPath::unitary_diagonal_path(&speeds).unwrap();
            assert_eq!(
                maslov_index(&path, 4).unwrap(),
                2 * d1 as i64,
                "dimension {d1}"
            );
        }
    }

    #[test]
    fn rotation_staircase_calibration() {
        // Positive speeds jump by -2 when leaving integers; negative speeds
        // jump by +2 immediately.
        for (b, want) in [(0.3, 0i64), (1.0, -2), (1.7, -2), (2.5, -4)] {
            assert_eq!(maslov_index(&rotation_path(b), 8).unwrap(), want, "b = {b}");
        }
        for (b, want) in [(-0.3, 2i64), (-1.0, 2), (-1.7, 4)] {
            assert_eq!(maslov_index(&rotation_path(b), 8).unwrap(), want, "b = {b}");
        }
    }

    #[test]
    fn hyperbolic_path_scores_one() {
        let path = SymplecticPath::hyperbolic(0.3).unwrap();
        assert_eq!(maslov_index(&path, 4).unwrap(), 1);
    }

    #[test]
    fn subdivision_doubling_is_stable() {
        let path = rotation_path(1.7);
        let coarse = maslov_index(&path, 4).unwrap();
        let fine = maslov_index(&path, 32).unwrap();
        assert_eq!(coarse, fine);
    }

    #[test]
    fn iterate_staircase_matches_floor_law() {
        let path = rotation_path(0.3);
        for k in 1..=7usize {
            let mas_k = maslov_index(&path.iterate(k).unwrap(), 2 * k).unwrap();
            let want = -2 * (0.3 * k as f64).floor() as i64;
            assert_eq!(mas_k, want, "k = {k}");
        }
    }

    #[test]
    fn mean_index_of_full_turn_is_exact() {
        let report = mean_index(&rotation_path(1.0), 8).unwrap();
        assert!((report.mean + 2.0).abs() < 1e-12);
        for (k, mas_k) in &report.table {
            assert_eq!(*mas_k, -2 * *k as i64);
        }
    }

    #[test]
    fn mean_index_tracks_slope() {
        let report = mean_index(&rotation_path(0.3), 40).unwrap();
        // True mean is -0.6; the K-truncated estimate sits within 2/K.
        assert!(
            (report.mean + 0.6).abs() <= 2.0 / 40.0 + 1e-12,
            "mean {}",
            report.mean
        );
    }

    #[test]
    fn bott_constant_identity_is_tight() {
        let path = SymplecticPath::identity(2).unwrap();
        let report = bott_check(&path, 5).unwrap();
        assert_eq!(report.mean, 0.0);
        for row in &report.iterates {
            assert_eq!(row.mas, 0);
            assert_eq!(row.nullity, 2);
        }
    }

    #[test]
    fn bott_elliptic_and_hyperbolic_paths_pass() {
        let elliptic = rotation_path(0.37);
        let report = bott_check(&elliptic, 10).unwrap();
        assert!(report.iterates.iter().all(|r| r.margin >= 0.0));

        let hyper = SymplecticPath::hyperbolic(0.4).unwrap();
        let report = bott_check(&hyper, 10).unwrap();
        for row in &report.iterates {
            assert_eq!(row.nullity, 0, "hyperbolic iterates are nondegenerate");
        }
    }

    #[test]
    fn path_suite_on_random_unitary_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..5 {
            let br: f64 = rng.gen_range(-2.0..2.0);
            let bs: f64 = rng.gen_range(-2.0..2.0);
            let r = rotation_path(br);
            let s = rotation_path(bs);
            let report = path_properties_suite(&r, &s).unwrap();
            assert!(
                report.all_pass(),
                "trial {trial} (br = {br:.3}, bs = {bs:.3}): {report:?}"
            );
        }
    }

    #[test]
    fn path_suite_on_constant_paths() {
        let r = SymplecticPath::identity(2).unwrap();
        let s = SymplecticPath::identity(2).unwrap();
        let report = path_properties_suite(&r, &s).unwrap();
        assert!(report.all_pass());
        assert_eq!(report.concatenation.lhs, 0);
    }

    #[test]
    fn linearized_tuple_path_hits_full_jacobian() {
        let tuple = crate::hamdiff::rotation_tuple(0.3, 5, 1).unwrap();
        let z = DVector::from_row_slice(&[0.8, -0.1]);
        let path = linearized_tuple_path(&tuple, &z).unwrap();
        assert!(path.is_based());
        let end = path.sample(1.0);
        let jac = crate::genfun::tuple_jacobian(&tuple, &z).unwrap();
        assert!((end - jac).amax() < 1e-10);
    }

    #[test]
    fn fixed_point_maslov_identity_family_is_zero() {
        let family = |_s: f64| StepTuple::identity(3, 2);
        let z = DVector::from_row_slice(&[0.4, 0.2]);
        assert_eq!(fixed_point_maslov(family, &z).unwrap(), 0);
    }

    #[test]
    fn fixed_point_maslov_full_turn_family() {
        // Family s -> rotation tuple of e^{-2 i pi s}; fixed point only at
        // the origin once s > 0, and the index gain over the identity
        // family is 2 per complex dimension.
        for d1 in 1..=2usize {
            let family =
                |s: f64| crate::hamdiff::rotation_tuple(s, 5, d1);
            let z = DVector::zeros(2 * d1);
            assert_eq!(
                fixed_point_maslov(family, &z).unwrap(),
                2 * d1 as i64,
                "dimension {d1}"
            );
        }
    }

    #[test]
    fn fixed_point_maslov_agrees_with_linearized_path() {
        // Small random quadratic flows: the fixed point 0 persists for the
        // whole family and the tuple-family index must equal the Maslov
        // index of the linearized path.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..3 {
            let s_mat = random_symmetric(2, 0.6, &mut rng);
            let sm = s_mat.clone();
            let family = move |s: f64| -> Result<StepTuple> {
                let steps: Vec<Arc<dyn ElementaryGen>> = (0..5)
                    .map(|_| {
                        Arc::new(QuadGen::new(sm.scale(s / 5.0)).unwrap())
                            as Arc<dyn ElementaryGen>
                    })
                    .collect();
                StepTuple::new(steps)
            };
            let z = DVector::zeros(2);
            let by_family = fixed_point_maslov(&family, &z).unwrap();

            let tuple1 = family(1.0).unwrap();
            let lin = linearized_tuple_path(&tuple1, &z).unwrap();
            let by_path = maslov_index(&lin, 8).unwrap();
            assert_eq!(by_family, by_path, "trial {trial}");
        }
    }

    #[test]
    fn exponential_paths_match_their_generators() {
        // Sanity: the unitary diagonal path agrees with matrix_exp of the
        // realified generator, so calibrations transfer to flow paths.
        let b = 0.7;
        let path = rotation_path(b);
        let gen = j_matrix(2).scale(std::f64::consts::TAU * b);
        for &t in &[0.25, 0.6, 1.0] {
            let direct = path.sample(t);
            let viaexp = matrix_exp(&gen.scale(t));
            assert!((direct - viaexp).amax() < 1e-10);
        }
    }

    #[test]
    fn twisted_iterate_paths_have_linear_mean() {
        // e^{2 i pi a s} twisted by t = a: constant path, mean 0; twisted
        // by t = a + 1: one negative turn, mean 2.
        let a = 0.3;
        let lin = rotation_path(a);
        let y = FixedPointClass {
            t: a,
            lin: lin.clone(),
        };
        let m1 = y.iterate_mean_index(1, 8).unwrap();
        assert!(m1.mean.abs() < 1e-12);

        let shifted = FixedPointClass { t: a + 1.0, lin };
        // t is reduced mod 1 inside iterate_action only for m >= 1
        // composites; the m = 1 twist uses frac(a + 1) = a as well.
        let m1s = shifted.iterate_mean_index(1, 8).unwrap();
        assert!(m1s.mean.abs() < 1e-12);
    }

    #[test]
    fn iterate_identity_on_a_diagonal_class() {
        // Ambient C^2 linearization with speeds (0, 0.4) at action t = 0.3:
        // mind(y^m) per the floor law, tabulated against the identity.
        let lin = SymplecticPath::unitary_diagonal_path(&[0.0, 0.4]).unwrap();
        let y = FixedPointClass { t: 0.3, lin };
        let rows = iterated_index_identity(&y, 4, 40).unwrap();
        for row in &rows {
            assert!((row.lhs - row.rhs).abs() <= row.tol, "m = {}", row.m);
        }
    }

    #[test]
    fn augmented_action_is_homogeneous() {
        let lin = SymplecticPath::unitary_diagonal_path(&[0.0, 0.4]).unwrap();
        let y = FixedPointClass { t: 0.3, lin };
        let a1 = augmented_action(&y, 1, 40).unwrap();
        let a3 = augmented_action(&y, 3, 40).unwrap();
        assert!(
            (a3.value - 3.0 * a1.value).abs()
                <= 3.0 * a1.error_bar + a3.error_bar + 1e-9
        );
    }

    #[test]
    fn non_based_paths_get_prefix_factors() {
        // A path starting at a quarter rotation: reverse negation still
        // holds, which exercises the constant-prefix machinery.
        let path = SymplecticPath::from_fn(2, |t| {
            unitary_diagonal(&[std::f64::consts::TAU * (0.25 + 0.4 * t)])
        })
        .unwrap();
        let mas = maslov_index(&path, 4).unwrap();
        let rev = maslov_index(&path.reverse().unwrap(), 4).unwrap();
        assert_eq!(mas, -rev);
    }

    #[test]
    fn prefix_splits_near_minus_one() {
        // Start exactly at the half turn (eigenvalue -1): the prefix must
        // split through a scalar rotation rather than fail.
        let path = SymplecticPath::from_fn(2, |t| {
            unitary_diagonal(&[std::f64::consts::PI + 0.5 * t])
        })
        .unwrap();
        let mas = maslov_index(&path, 4).unwrap();
        let rev = maslov_index(&path.reverse().unwrap(), 4).unwrap();
        assert_eq!(mas, -rev);
    }
}
