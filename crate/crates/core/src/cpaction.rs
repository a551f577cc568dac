//! The projective variational principle: conical generating families
//! F_t = F_{(sigma, delta_t)} for the twisted maps e^{-2 i pi t} Phi,
//! critical points as a nonlinear eigenproblem on (t, Z), action spectra,
//! degeneracy bookkeeping against the projectivized monodromy, the
//! monotonicity of t -> F_t, and the index shift under recapping.
//!
//! Throughout, sigma is an even conical step tuple composing to Phi on
//! C^{d+1} (trailing identity block included), and delta_t is the odd
//! rotation tuple generating the scalar twist.  Critical points of F_t
//! correspond to fixed directions e^{-2 i pi t} Phi(Z) = Z; the complex
//! line C zeta always sits in the Hessian kernel, so reported nullities
//! are taken on the quotient.

use std::f64::consts::{PI, TAU};

use nalgebra::{Complex, DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GfError, Result};
use crate::genfun::{
    apply_tuple, averaging, broken_gradient, broken_hessian, broken_value,
    coordinates_from_closed_z, flatten, sample_sphere, trajectory, tuple_jacobian,
    StepTuple,
};
use crate::hamdiff::{complex_phase_times, rotation_tuple};
use crate::symplin::{hermitian_inner, mul_complex_scalar, mul_i, quad_index};

/// Default half-width of the parameter window I = (-epsilon, 1 + epsilon).
pub const DEFAULT_EPSILON: f64 = 0.05;

/// Default cap on the total complex auxiliary dimension of iterated
/// families.
pub const ITERATE_DIM_CAP: usize = 1200;

/// Fixed-point residual bound every accepted record must meet.
pub const RECORD_RESIDUAL_MAX: f64 = 1e-9;

const NEWTON_TOL: f64 = 1e-11;
const DUPLICATE_T_TOL: f64 = 1e-7;
const DUPLICATE_PROJ_TOL: f64 = 1e-6;
const NULLITY_TOL: f64 = 1e-7;

/// A one-parameter family of conical generating functions
/// F_t = F_{(sigma, delta_t)} over t in (-epsilon, 1 + epsilon).
#[derive(Clone)]
pub struct ConicalFamily {
    sigma: StepTuple,
    n2: usize,
    epsilon: f64,
}

impl std::fmt::Debug for ConicalFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConicalFamily")
            .field("n1", &self.sigma.len())
            .field("n2", &self.n2)
            .field("d", &self.projective_dim())
            .field("epsilon", &self.epsilon)
            .finish()
    }
}

fn is_identity_step(step: &dyn crate::genfun::ElementaryGen) -> bool {
    match step.quadratic_matrix() {
        Some(m) => m.amax() < 1e-13,
        None => false,
    }
}

impl ConicalFamily {
    /// Wraps an even conical tuple ending in an identity step, together
    /// with the rotation-block length n2 (odd, at least 5).
    pub fn new(sigma: StepTuple, n2: usize, epsilon: f64) -> Result<Self> {
        if sigma.len() % 2 != 0 || sigma.is_empty() {
            return Err(GfError::Parity(format!(
                "the map tuple must have even positive size, got {}",
                sigma.len()
            )));
        }
        if !sigma.is_conical() {
            return Err(GfError::Config(
                "the map tuple must be conical (2-homogeneous equivariant steps)".into(),
            ));
        }
        if !is_identity_step(sigma.step(sigma.len() - 1)) {
            return Err(GfError::Config(
                "the map tuple must end with an identity step".into(),
            ));
        }
        if n2 < 5 || n2 % 2 == 0 {
            return Err(GfError::Parity(format!(
                "rotation block length must be odd and at least 5, got {n2}"
            )));
        }
        if !(0.0..0.5).contains(&epsilon) {
            return Err(GfError::Config(format!(
                "epsilon must lie in [0, 1/2), got {epsilon}"
            )));
        }
        let max_angle = (1.0 + epsilon) / (n2 - 1) as f64;
        if max_angle >= 0.5 {
            return Err(GfError::Config(format!(
                "rotation block too short for the window: per-factor angle {max_angle}"
            )));
        }
        Ok(Self { sigma, n2, epsilon })
    }

    /// The map tuple (composing to Phi).
    pub fn sigma(&self) -> &StepTuple {
        &self.sigma
    }

    /// Rotation-block length.
    pub fn n2(&self) -> usize {
        self.n2
    }

    /// Window half-width.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// d, the dimension of the projective space CP^d the map acts on.
    pub fn projective_dim(&self) -> usize {
        self.sigma.complex_dim() - 1
    }

    /// Realified ambient dimension 2(d+1).
    pub fn real_dim(&self) -> usize {
        self.sigma.real_dim()
    }

    /// Total number of auxiliary blocks n1 + n2 (odd).
    pub fn total_blocks(&self) -> usize {
        self.sigma.len() + self.n2
    }

    /// True when t lies in the open window I.
    pub fn contains(&self, t: f64) -> bool {
        t > -self.epsilon && t < 1.0 + self.epsilon
    }

    /// The rotation tuple delta_t.
    pub fn delta(&self, t: f64) -> Result<StepTuple> {
        rotation_tuple(t, self.n2, self.sigma.complex_dim())
    }

    /// The full tuple (sigma, delta_t) behind F_t.
    pub fn tuple_at(&self, t: f64) -> Result<StepTuple> {
        if !self.contains(t) {
            return Err(GfError::Config(format!(
                "t = {t} outside the window (-{0}, 1 + {0})",
                self.epsilon
            )));
        }
        self.sigma.concat(&self.delta(t)?)
    }

    /// F_t(v) on broken coordinates.
    pub fn value(&self, t: f64, v: &[DVector<f64>]) -> Result<f64> {
        broken_value(&self.tuple_at(t)?, v)
    }

    /// The t-derivative of F_t(v) at fixed v.  Only the rotation factors
    /// depend on t, each contributing -tan(pi t/(n2-1)) |w_k|^2, so
    ///
    /// ```text
    ///     dF_t/dt (v) = -(pi/(n2-1)) sec^2(pi t/(n2-1)) sum_k |w_k|^2
    /// ```
    ///
    /// over the n2 - 1 rotation slots; in particular it is never positive.
    pub fn dt_value(&self, t: f64, v: &[DVector<f64>]) -> Result<f64> {
        if v.len() != self.total_blocks() {
            return Err(GfError::DimensionMismatch(format!(
                "expected {} blocks, got {}",
                self.total_blocks(),
                v.len()
            )));
        }
        if !self.contains(t) {
            return Err(GfError::Config(format!("t = {t} outside the window")));
        }
        let w = averaging(v);
        let n1 = self.sigma.len();
        let theta = PI * t / (self.n2 - 1) as f64;
        let pref = -(PI / (self.n2 - 1) as f64) / theta.cos().powi(2);
        let sum: f64 = (n1..n1 + self.n2 - 1).map(|k| w[k].norm_squared()).sum();
        Ok(pref * sum)
    }

    /// Samples the conical invariants: |F_t(lambda e^{i theta} v) -
    /// lambda^2 F_t(v)| must vanish to tolerance.  Returns the worst
    /// relative violation.
    pub fn validate(&self, samples: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.real_dim();
        let blocks = self.total_blocks();
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let t = -self.epsilon + rand::Rng::gen_range(&mut rng, 0.0..1.0)
                * (1.0 + 2.0 * self.epsilon);
            let v: Vec<DVector<f64>> =
                (0..blocks).map(|_| sample_sphere(dim, &mut rng)).collect();
            let base = self.value(t, &v)?;
            let lambda: f64 = rand::Rng::gen_range(&mut rng, 0.3..2.0);
            let theta: f64 = rand::Rng::gen_range(&mut rng, 0.0..TAU);
            let phase = Complex64::from_polar(lambda, theta);
            let scaled: Vec<DVector<f64>> =
                v.iter().map(|b| mul_complex_scalar(phase, b)).collect();
            let scaled_val = self.value(t, &scaled)?;
            let gap = (scaled_val - lambda * lambda * base).abs()
                / (1.0 + base.abs() * lambda * lambda);
            worst = worst.max(gap);
        }
        if worst > 1e-9 {
            return Err(GfError::InvariantViolation(format!(
                "family is not conical: worst homogeneity violation {worst:.3e}"
            )));
        }
        Ok(worst)
    }
}

/// A solved critical point of the family: fixed direction Z of the
/// twisted map, its broken coordinates, and index data on the quotient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticalRecord {
    /// Twist parameter in [0, 1).
    pub t: f64,
    /// Realified unit vector in C^{d+1}, phase-gauged so its largest
    /// component is real positive.
    pub z: Vec<f64>,
    /// Flattened broken coordinates of the critical point.
    pub v: Vec<f64>,
    /// Action value, the twist t itself.
    pub action: f64,
    /// Morse index of the broken Hessian (the C zeta kernel carries no
    /// index, so no correction applies).
    pub index: usize,
    /// Hessian nullity with the 2-dimensional C zeta plane removed.
    pub nullity: usize,
    /// |e^{-2 i pi t} Phi(Z) - Z|.
    pub residual_fixed_point: f64,
    /// Sup norm of the broken gradient at the critical point.
    pub residual_gradient: f64,
}

impl CriticalRecord {
    pub fn z_vector(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.z)
    }
}

/// Seeding strategy for the critical-point solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedStrategy {
    /// Include the d + 1 coordinate axes.
    pub axes: bool,
    /// Number of additional random unit seeds.
    pub random: usize,
    /// RNG seed for the random part.
    pub rng_seed: u64,
}

impl Default for SeedStrategy {
    fn default() -> Self {
        Self {
            axes: true,
            random: 32,
            rng_seed: 0x5EED5,
        }
    }
}

fn axis_seed(dim: usize, j: usize) -> DVector<f64> {
    let mut z = DVector::zeros(dim);
    z[2 * j] = 1.0;
    z
}

/// Twisted fixed-point residual e^{-2 i pi t} Phi(Z) - Z.
fn twisted_residual(family: &ConicalFamily, t: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
    let phi = apply_tuple(family.sigma(), z)?;
    let phase = Complex64::from_polar(1.0, -TAU * t);
    Ok(mul_complex_scalar(phase, &phi) - z)
}

/// One Gauss-Newton solve of the augmented system
///
/// ```text
///     e^{-2 i pi t} Phi(Z) = Z,   |Z|^2 = 1,   Im <Z_ref, Z> = 0,
/// ```
///
/// in the unknowns (t, Z).  Returns None when the iteration fails to meet
/// tolerance.
fn solve_seed(family: &ConicalFamily, z0: &DVector<f64>, t0: f64) -> Option<(f64, DVector<f64>)> {
    let dim = family.real_dim();
    let z_ref = z0.clone();
    let mut z = z0.clone();
    let mut t = t0;

    let assemble = |t: f64, z: &DVector<f64>| -> Option<(DVector<f64>, DMatrix<f64>)> {
        let phi = apply_tuple(family.sigma(), z).ok()?;
        let jac = tuple_jacobian(family.sigma(), z).ok()?;
        let phase = Complex64::from_polar(1.0, -TAU * t);
        let pz = mul_complex_scalar(phase, &phi);
        let mut g = DVector::zeros(dim + 2);
        for i in 0..dim {
            g[i] = pz[i] - z[i];
        }
        g[dim] = z.norm_squared() - 1.0;
        g[dim + 1] = mul_i(&z_ref).dot(z);

        let mut big_j = DMatrix::zeros(dim + 2, dim + 1);
        let dt_col = mul_i(&pz).scale(-TAU);
        for i in 0..dim {
            big_j[(i, 0)] = dt_col[i];
        }
        let dz = complex_phase_times(phase, &jac) - DMatrix::identity(dim, dim);
        for i in 0..dim {
            for k in 0..dim {
                big_j[(i, k + 1)] = dz[(i, k)];
            }
        }
        for k in 0..dim {
            big_j[(dim, k + 1)] = 2.0 * z[k];
        }
        let iz = mul_i(&z_ref);
        for k in 0..dim {
            big_j[(dim + 1, k + 1)] = iz[k];
        }
        Some((g, big_j))
    };

    for _ in 0..80 {
        let (g, big_j) = assemble(t, &z)?;
        let gnorm = g.norm();
        if gnorm <= NEWTON_TOL {
            break;
        }
        let svd = big_j.svd(true, true);
        let step = svd.solve(&(-&g), 1e-13).ok()?;
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha >= 1e-3 {
            let t_try = t + alpha * step[0];
            let z_try = &z + DVector::from_iterator(dim, (0..dim).map(|i| alpha * step[i + 1]));
            if family.contains(t_try.rem_euclid(1.0)) {
                if let Some((g_try, _)) = assemble(t_try, &z_try) {
                    if g_try.norm() <= (1.0 - 0.25 * alpha) * gnorm {
                        t = t_try;
                        z = z_try;
                        accepted = true;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return None;
        }
    }

    let (g, _) = assemble(t, &z)?;
    if g.norm() > NEWTON_TOL * 10.0 {
        return None;
    }
    Some((t.rem_euclid(1.0), z))
}

/// Rotates Z so that its largest-modulus complex component is real
/// positive, making records deterministic across equivalent seeds.
fn gauge_canonical(z: &DVector<f64>) -> DVector<f64> {
    let d1 = z.len() / 2;
    let mut best = 0usize;
    let mut best_mod = -1.0;
    for j in 0..d1 {
        let m = z[2 * j].hypot(z[2 * j + 1]);
        if m > best_mod {
            best_mod = m;
            best = j;
        }
    }
    let comp = Complex64::new(z[2 * best], z[2 * best + 1]);
    if comp.norm() == 0.0 {
        return z.clone();
    }
    let phase = comp.conj() / comp.norm();
    mul_complex_scalar(phase, z)
}

fn projective_distance(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let inner = hermitian_inner(a, b).norm();
    (2.0 - 2.0 * inner.min(1.0)).max(0.0).sqrt()
}

/// Completes a solved direction (t, Z) into a full record.
fn build_record(family: &ConicalFamily, t: f64, z_raw: &DVector<f64>) -> Result<CriticalRecord> {
    let z = gauge_canonical(&z_raw.unscale(z_raw.norm()));
    let resid = twisted_residual(family, t, &z)?.norm();
    if resid > RECORD_RESIDUAL_MAX {
        return Err(GfError::InvariantViolation(format!(
            "fixed-point residual {resid:.3e} exceeds {RECORD_RESIDUAL_MAX:.1e}"
        )));
    }
    let tuple = family.tuple_at(t)?;
    let n = tuple.len();
    let traj = trajectory(&tuple, &z)?;
    let coords = coordinates_from_closed_z(&tuple, &traj[..n])?;
    let grad = broken_gradient(&tuple, &coords.v)?;
    let grad_sup = grad.iter().map(|g| g.amax()).fold(0.0f64, f64::max);
    let hess = broken_hessian(&tuple, &coords.v)?;
    let (index, null_full) = quad_index(&hess)?;
    if null_full < 2 {
        return Err(GfError::InvariantViolation(format!(
            "broken Hessian lost the C zeta kernel (nullity {null_full})"
        )));
    }
    Ok(CriticalRecord {
        t,
        z: z.iter().copied().collect(),
        v: flatten(&coords.v).iter().copied().collect(),
        action: t,
        index,
        nullity: null_full - 2,
        residual_fixed_point: resid,
        residual_gradient: grad_sup,
    })
}

/// Finds critical points of the family from axis and random seeds.  Seeds
/// run in parallel; failures are dropped; duplicates (same t, same
/// projective direction) are merged.  An empty result is an error, since
/// conical families always carry fixed points.
pub fn critical_points(family: &ConicalFamily, seeds: &SeedStrategy) -> Result<Vec<CriticalRecord>> {
    let dim = family.real_dim();
    let d1 = dim / 2;
    let mut seed_list: Vec<DVector<f64>> = Vec::new();
    if seeds.axes {
        for j in 0..d1 {
            seed_list.push(axis_seed(dim, j));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.rng_seed);
    for _ in 0..seeds.random {
        seed_list.push(sample_sphere(dim, &mut rng));
    }
    if seed_list.is_empty() {
        return Err(GfError::Config("no seeds requested".into()));
    }

    let solved: Vec<Option<(f64, DVector<f64>)>> = seed_list
        .par_iter()
        .map(|z0| {
            let phi = apply_tuple(family.sigma(), z0).ok()?;
            let t0 = (hermitian_inner(z0, &phi).arg() / TAU).rem_euclid(1.0);
            solve_seed(family, z0, t0)
        })
        .collect();

    let mut records: Vec<CriticalRecord> = Vec::new();
    for item in solved.into_iter().flatten() {
        let (t, z) = item;
        let duplicate = records.iter().any(|r| {
            (r.t - t).abs() < DUPLICATE_T_TOL
                && projective_distance(&r.z_vector(), &z) < DUPLICATE_PROJ_TOL
        });
        if duplicate {
            continue;
        }
        if let Ok(rec) = build_record(family, t, &z) {
            records.push(rec);
        }
    }
    if records.is_empty() {
        return Err(GfError::EmptySpectrum {
            expected: family.projective_dim() + 1,
        });
    }
    records.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
    Ok(records)
}

/// Reduces record actions mod 1 and groups them with tolerance 1e-7,
/// returning the sorted spectrum with multiplicities.
pub fn action_spectrum(records: &[CriticalRecord]) -> Vec<(f64, usize)> {
    let mut actions: Vec<f64> = records.iter().map(|r| r.action.rem_euclid(1.0)).collect();
    actions.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut spectrum: Vec<(f64, usize)> = Vec::new();
    for a in actions {
        match spectrum.last_mut() {
            Some((value, count)) if (a - *value).abs() < DUPLICATE_T_TOL => *count += 1,
            _ => spectrum.push((a, 1)),
        }
    }
    spectrum
}

/// Monotonicity report: the extremes of dF_t/dt over random samples and
/// over the supplied critical points.
#[derive(Debug, Clone, Serialize)]
pub struct DeltaMonotonicityReport {
    /// Largest sampled derivative (must be <= 1e-12).
    pub max_dt: f64,
    /// Largest derivative over critical points (must be strictly
    /// negative); its magnitude is the reported margin.
    pub critical_margin: f64,
    /// Worst |finite difference - formula| agreement over spot checks.
    pub worst_fd_gap: f64,
    pub samples: usize,
}

/// Samples dF_t/dt over random (t, v) pairs and at the critical points,
/// verifying it never exceeds zero and stays strictly negative on the
/// critical locus.  A finite-difference probe of F_t cross-checks the
/// closed-form derivative on a subset.
pub fn delta_monotonicity(
    family: &ConicalFamily,
    records: &[CriticalRecord],
    samples: usize,
    seed: u64,
) -> Result<DeltaMonotonicityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = family.real_dim();
    let blocks = family.total_blocks();
    let mut max_dt = f64::NEG_INFINITY;
    let mut worst_fd: f64 = 0.0;
    for i in 0..samples {
        let t = -family.epsilon()
            + rand::Rng::gen_range(&mut rng, 0.0..1.0) * (1.0 + 2.0 * family.epsilon());
        let v: Vec<DVector<f64>> = (0..blocks).map(|_| sample_sphere(dim, &mut rng)).collect();
        let dt = family.dt_value(t, &v)?;
        max_dt = max_dt.max(dt);
        if i < 20 {
            let h = 1e-6;
            let fd = (family.value(t + h, &v)? - family.value(t - h, &v)?) / (2.0 * h);
            worst_fd = worst_fd.max((fd - dt).abs() / (1.0 + dt.abs()));
        }
    }
    if max_dt > 1e-12 {
        return Err(GfError::InvariantViolation(format!(
            "dF_t/dt reached {max_dt:.3e} > 1e-12 on random samples"
        )));
    }
    if worst_fd > 1e-6 {
        return Err(GfError::InvariantViolation(format!(
            "finite-difference probe disagrees with the t-derivative by {worst_fd:.3e}"
        )));
    }

    let mut critical_margin = f64::NEG_INFINITY;
    for rec in records {
        let v = crate::genfun::unflatten(&DVector::from_row_slice(&rec.v), dim);
        let dt = family.dt_value(rec.t, &v)?;
        critical_margin = critical_margin.max(dt);
    }
    if !records.is_empty() && critical_margin >= 0.0 {
        return Err(GfError::InvariantViolation(format!(
            "dF_t/dt is not strictly negative on the critical locus ({critical_margin:.3e})"
        )));
    }
    Ok(DeltaMonotonicityReport {
        max_dt,
        critical_margin,
        worst_fd_gap: worst_fd,
        samples,
    })
}

/// Strips trailing identity steps from sigma, keeping the result odd.
fn sigma_prime(family: &ConicalFamily) -> Result<StepTuple> {
    let n1 = family.sigma().len();
    let mut keep = n1;
    while keep > 1 && is_identity_step(family.sigma().step(keep - 1)) {
        keep -= 1;
    }
    if keep % 2 == 0 {
        keep += 1;
    }
    if keep > n1 {
        return Err(GfError::Parity(
            "map tuple has no trailing identity step to absorb".into(),
        ));
    }
    family.sigma().truncated(keep)
}

/// The recapping index shift.  The record is re-expressed in the retupled
/// family (sigma', delta_t, delta_s): at s = 0 this generates the same
/// twisted map, at s = 1 the twist gains a full turn.  Both indices are
/// computed at the same fixed direction Z and their gap must be exactly
/// 2(d+1); the returned pair reports the record's own index and its
/// recapped value.
pub fn recap_shift(family: &ConicalFamily, record: &CriticalRecord) -> Result<(usize, usize)> {
    if record.nullity != 0 {
        return Err(GfError::DegenerateRecord(format!(
            "recapping needs a nondegenerate record, got nullity {}",
            record.nullity
        )));
    }
    let sp = sigma_prime(family)?;
    let delta_t = family.delta(record.t)?;
    let z = record.z_vector();

    let mut indices = [0usize; 2];
    for (slot, s) in [(0usize, 0.0), (1usize, 1.0)] {
        let delta_s = family.delta(s)?;
        let tuple = sp.concat(&delta_t)?.concat(&delta_s)?;
        let n = tuple.len();
        let traj = trajectory(&tuple, &z)?;
        let gap = (traj[n].clone() - &z).norm();
        if gap > 1e-8 {
            return Err(GfError::InvariantViolation(format!(
                "retupled trajectory fails to close at s = {s} (gap {gap:.3e})"
            )));
        }
        let coords = coordinates_from_closed_z(&tuple, &traj[..n])?;
        let hess = broken_hessian(&tuple, &coords.v)?;
        let (ind, _null) = quad_index(&hess)?;
        indices[slot] = ind;
    }
    let shift = indices[1] as i64 - indices[0] as i64;
    let expected = 2 * (family.projective_dim() as i64 + 1);
    if shift != expected {
        return Err(GfError::InvariantViolation(format!(
            "recapping shifted the index by {shift}, expected {expected}"
        )));
    }
    Ok((record.index, record.index + expected as usize))
}

/// Real-orthonormal basis of the complex-orthogonal complement of Z,
/// as columns (u_1, i u_1, ..., u_d, i u_d).
fn orthocomplement_basis(z: &DVector<f64>) -> DMatrix<f64> {
    let dim = z.len();
    let d1 = dim / 2;
    let zn = z.unscale(z.norm());
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(d1 - 1);
    for j in 0..d1 {
        let mut cand = axis_seed(dim, j);
        let inner = hermitian_inner(&zn, &cand);
        cand -= mul_complex_scalar(inner, &zn);
        for u in &basis {
            let c = hermitian_inner(u, &cand);
            cand -= mul_complex_scalar(c, u);
        }
        let norm = cand.norm();
        if norm > 0.5 {
            basis.push(cand.unscale(norm));
            if basis.len() == d1 - 1 {
                break;
            }
        }
    }
    assert_eq!(basis.len(), d1 - 1, "orthocomplement basis incomplete");
    let mut b = DMatrix::zeros(dim, 2 * (d1 - 1));
    for (j, u) in basis.iter().enumerate() {
        b.set_column(2 * j, u);
        b.set_column(2 * j + 1, &mul_i(u));
    }
    b
}

/// Computes both sides of the kernel correspondence at a record: the
/// broken-Hessian nullity on the C zeta quotient versus the eigencount of
/// the projectivized twisted monodromy at Z.  Mismatch is a hard error.
pub fn kernel_correspondence(
    family: &ConicalFamily,
    record: &CriticalRecord,
) -> Result<(usize, usize)> {
    let z = record.z_vector();
    let jac = tuple_jacobian(family.sigma(), &z)?;
    let phase = Complex64::from_polar(1.0, -TAU * record.t);
    let m = complex_phase_times(phase, &jac);
    let b = orthocomplement_basis(&z);
    let q = b.transpose() * &m * &b;
    let qi = &q - DMatrix::identity(q.nrows(), q.ncols());
    let scale = 1.0 + qi.amax();
    let svd = qi.svd(false, false);
    let nullity_lin = svd
        .singular_values
        .iter()
        .filter(|&&s| s <= NULLITY_TOL * scale)
        .count();
    if nullity_lin != record.nullity {
        return Err(GfError::InvariantViolation(format!(
            "kernel correspondence failed: Hessian nullity {} vs monodromy nullity {}",
            record.nullity, nullity_lin
        )));
    }
    Ok((record.nullity, nullity_lin))
}

/// The m-fold iterate family F^m, with the map tuple concatenated m times
/// and the same rotation block.  Guards the total auxiliary dimension.
pub fn iterate_family(family: &ConicalFamily, m: usize) -> Result<ConicalFamily> {
    if m == 0 {
        return Err(GfError::Config("iterate order must be at least 1".into()));
    }
    let d1 = family.sigma().complex_dim();
    let total = d1 * (family.sigma().len() * m + family.n2());
    if total > ITERATE_DIM_CAP {
        return Err(GfError::ResourceCap(format!(
            "iterated family needs {total} complex auxiliary dimensions (cap {ITERATE_DIM_CAP})"
        )));
    }
    ConicalFamily::new(family.sigma().repeat(m)?, family.n2(), family.epsilon())
}

/// The record index recomputed on the gauge-fixed chart: the Hessian of
/// F_t restricted to the complex-orthogonal complement of zeta.  Agrees
/// with the ambient eigencount because C zeta carries no index.
pub fn chart_index(family: &ConicalFamily, record: &CriticalRecord) -> Result<(usize, usize)> {
    let tuple = family.tuple_at(record.t)?;
    let v = crate::genfun::unflatten(
        &DVector::from_row_slice(&record.v),
        family.real_dim(),
    );
    let hess = broken_hessian(&tuple, &v)?;
    let zeta = DVector::from_row_slice(&record.v);
    let b = big_orthocomplement(&zeta);
    let restricted = b.transpose() * hess.matrix() * &b;
    let q = crate::symplin::QuadForm::new(restricted)?;
    quad_index(&q)
}

/// Real-orthonormal basis of the complex-orthogonal complement of a full
/// auxiliary vector (dimension 2(N+1) - 2).
fn big_orthocomplement(zeta: &DVector<f64>) -> DMatrix<f64> {
    let dim = zeta.len();
    let d1 = dim / 2;
    let zn = zeta.unscale(zeta.norm());
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(d1 - 1);
    for j in 0..d1 {
        let mut cand = axis_seed(dim, j);
        let inner = hermitian_inner(&zn, &cand);
        cand -= mul_complex_scalar(inner, &zn);
        for u in &basis {
            let c = hermitian_inner(u, &cand);
            cand -= mul_complex_scalar(c, u);
        }
        let norm = cand.norm();
        if norm > 1e-3 {
            basis.push(cand.unscale(norm));
            if basis.len() == d1 - 1 {
                break;
            }
        }
    }
    assert_eq!(basis.len(), d1 - 1, "chart basis incomplete");
    let mut b = DMatrix::zeros(dim, 2 * (d1 - 1));
    for (j, u) in basis.iter().enumerate() {
        b.set_column(2 * j, u);
        b.set_column(2 * j + 1, &mul_i(u));
    }
    b
}

/// Serializes records to CSV with one row per record.
pub fn records_to_csv(records: &[CriticalRecord]) -> String {
    let d1 = records.first().map(|r| r.z.len() / 2).unwrap_or(0);
    let mut header = String::from("t,action_mod1,index,nullity,residual");
    for j in 0..d1 {
        header.push_str(&format!(",z{j}_re,z{j}_im"));
    }
    let mut out = header;
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{:.12},{:.12},{},{},{:.3e}",
            r.t,
            r.action.rem_euclid(1.0),
            r.index,
            r.nullity,
            r.residual_fixed_point
        ));
        for j in 0..r.z.len() / 2 {
            out.push_str(&format!(",{:.12},{:.12}", r.z[2 * j], r.z[2 * j + 1]));
        }
        out.push('\n');
    }
    out
}

/// Serializes records to pretty JSON.
pub fn records_to_json(records: &[CriticalRecord]) -> Result<String> {
    serde_json::to_string_pretty(records).map_err(GfError::from)
}

/// Complex eigenvalues of the realified matrix, paired by conjugation.
pub fn realified_spectrum(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    m.clone().complex_eigenvalues().iter().copied().collect()
}
