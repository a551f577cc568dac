//! The crossing-energy experiment: product-ball neighborhoods of a fixed
//! trajectory, the smooth p-norm sphere replacing the sup-norm boundary,
//! the pseudo-gradient of the action on the level manifold, constrained
//! flow-line integration, and the measured action drop of lines crossing
//! from the boundary of V_r into V_{r/2}.
//!
//! All of this lives in midpoint coordinates: the broken functional is
//! composed with the inverse averaging map, so each slot of the auxiliary
//! vector carries one ball of the trajectory neighborhood
//! B_r = prod_j B_r(a_j), and the twisted part of the functional becomes
//! an explicit -tan(pi t/(n2-1)) multiple of the rotation-slot mass.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cpaction::ConicalFamily;
use crate::error::{GfError, Result};
use crate::genfun::{
    apply_tuple, broken_gradient_w, broken_value_w, sample_ball, sample_sphere, trajectory,
    StepTuple,
};
use crate::symplin::{hermitian_inner, mul_complex_scalar, mul_i};

/// Drift bound maintained on |f| along flow lines.
pub const LEVEL_DRIFT_MAX: f64 = 1e-9;

/// Stall threshold on the pseudo-gradient norm.
pub const STALL_NORM: f64 = 1e-10;

const RK_TOL: f64 = 1e-10;

/// Smallest exponent p >= 2 such that every point of the p-norm sphere on
/// K slots rescales onto the sup-norm boundary with a factor in [1, 2];
/// equivalently the smallest p with 2^p >= K.
pub fn choose_pm(slots: usize) -> u32 {
    let k = slots.max(1);
    let p = usize::BITS - (k - 1).leading_zeros();
    p.max(2)
}

/// Verifies the rescaling property of `choose_pm` on random sphere
/// samples: max_j |z_j| must lie in [1/2, 1].
pub fn verify_pm(slots: usize, slot_dim: usize, samples: usize, seed: u64) -> Result<()> {
    let p = choose_pm(slots);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let mut w: Vec<DVector<f64>> = (0..slots)
            .map(|_| sample_ball(slot_dim, 1.0, &mut rng))
            .collect();
        let norm = p_norm(&w, p);
        if norm == 0.0 {
            continue;
        }
        for b in &mut w {
            *b /= norm;
        }
        let sup = w.iter().map(|b| b.norm()).fold(0.0f64, f64::max);
        if !(0.5 - 1e-12..=1.0 + 1e-12).contains(&sup) {
            return Err(GfError::InvariantViolation(format!(
                "p = {p} on {slots} slots puts a sphere point at sup norm {sup}"
            )));
        }
    }
    Ok(())
}

fn p_norm(w: &[DVector<f64>], p: u32) -> f64 {
    w.iter()
        .map(|b| b.norm().powi(p as i32))
        .sum::<f64>()
        .powf(1.0 / p as f64)
}

fn slots_of(w: &DVector<f64>, slot_dim: usize) -> Vec<DVector<f64>> {
    (0..w.len() / slot_dim)
        .map(|j| w.rows(j * slot_dim, slot_dim).into_owned())
        .collect()
}

fn flatten_slots(w: &[DVector<f64>]) -> DVector<f64> {
    let dim = w[0].len();
    let mut out = DVector::zeros(dim * w.len());
    for (j, b) in w.iter().enumerate() {
        out.rows_mut(j * dim, dim).copy_from(b);
    }
    out
}

/// Product-ball neighborhood of the closed twisted trajectory of x,
/// sup-normalized so the center tuple sits on the unit sup-norm boundary.
#[derive(Debug, Clone)]
pub struct TrajectoryNeighborhood {
    centers: Vec<DVector<f64>>,
    lambda: f64,
    radius: f64,
    t: f64,
}

impl TrajectoryNeighborhood {
    /// Builds the per-slot centers from the discrete trajectory of x
    /// through the combined tuple; the trajectory must close.
    pub fn new(tuple: &StepTuple, x: &DVector<f64>, radius: f64, t: f64) -> Result<Self> {
        if radius <= 0.0 {
            return Err(GfError::Config("radius must be positive".into()));
        }
        let n = tuple.len();
        let traj = trajectory(tuple, x)?;
        let gap = (traj[n].clone() - x).norm();
        if gap > 1e-8 * (1.0 + x.norm()) {
            return Err(GfError::Config(format!(
                "x is not fixed by the twisted tuple (gap {gap:.3e})"
            )));
        }
        let midpoints: Vec<DVector<f64>> = (0..n)
            .map(|k| (traj[k].clone() + &traj[k + 1]).scale(0.5))
            .collect();
        let sup = midpoints.iter().map(|a| a.norm()).fold(0.0f64, f64::max);
        if sup == 0.0 {
            return Err(GfError::Config("trajectory collapsed to the origin".into()));
        }
        let lambda = 1.0 / sup;
        let centers = midpoints.iter().map(|a| a.scale(lambda)).collect();
        Ok(Self {
            centers,
            lambda,
            radius,
            t,
        })
    }

    pub fn slot_count(&self) -> usize {
        self.centers.len()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn twist(&self) -> f64 {
        self.t
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn centers(&self) -> &[DVector<f64>] {
        &self.centers
    }

    /// Plain product-ball membership at radius r (no phase, no scaling).
    pub fn in_product_ball(&self, w: &[DVector<f64>], r: f64) -> bool {
        w.len() == self.centers.len()
            && w.iter()
                .zip(&self.centers)
                .all(|(b, c)| (b - c).norm() < r)
    }

    fn worst_slot_distance(&self, w: &[DVector<f64>], theta: f64) -> f64 {
        let phase = Complex64::from_polar(1.0, theta);
        w.iter()
            .zip(&self.centers)
            .map(|(b, c)| (mul_complex_scalar(phase, b) - c).norm())
            .fold(0.0f64, f64::max)
    }

    fn refine_phase(&self, w: &[DVector<f64>], mut lo: f64, mut hi: f64) -> (f64, f64) {
        for _ in 0..32 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if self.worst_slot_distance(w, m1) <= self.worst_slot_distance(w, m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let theta = 0.5 * (lo + hi);
        (self.worst_slot_distance(w, theta), theta)
    }

    /// min over the circle of the worst slot distance of e^{i theta} w to
    /// the centers, by a 64-point grid plus ternary refinement; also
    /// returns the minimizing phase.
    pub fn phase_distance_full(&self, w: &[DVector<f64>]) -> (f64, f64) {
        let grid = 64;
        let mut best_k = 0;
        let mut best = f64::INFINITY;
        for k in 0..grid {
            let v = self.worst_slot_distance(w, k as f64 / grid as f64 * std::f64::consts::TAU);
            if v < best {
                best = v;
                best_k = k;
            }
        }
        let step = std::f64::consts::TAU / grid as f64;
        let (refined, theta) =
            self.refine_phase(w, (best_k as f64 - 1.0) * step, (best_k as f64 + 1.0) * step);
        if refined < best {
            (refined, theta)
        } else {
            (best, best_k as f64 * step)
        }
    }

    /// Same minimum, searched locally around a known good phase; the
    /// optimal phase drifts slowly along a flow line, so the local basin
    /// almost always contains the global minimizer.
    pub fn phase_distance_near(&self, w: &[DVector<f64>], hint: f64) -> (f64, f64) {
        let span = std::f64::consts::TAU / 32.0;
        self.refine_phase(w, hint - span, hint + span)
    }

    pub fn phase_distance(&self, w: &[DVector<f64>]) -> f64 {
        self.phase_distance_full(w).0
    }

    /// Sup-normalized phase distance of a cone point to the centers,
    /// searched near the hint when one is supplied; returns the distance
    /// and the minimizing phase.
    pub fn scaled_distance(&self, w: &[DVector<f64>], hint: Option<f64>) -> (f64, f64) {
        let sup = w.iter().map(|b| b.norm()).fold(0.0f64, f64::max);
        if sup == 0.0 {
            return (f64::INFINITY, 0.0);
        }
        let scaled: Vec<DVector<f64>> = w.iter().map(|b| b.unscale(sup)).collect();
        match hint {
            Some(h) => self.phase_distance_near(&scaled, h),
            None => self.phase_distance_full(&scaled),
        }
    }

    /// Membership in the region V_r: rescale the cone point onto the
    /// sup-norm boundary, then phase-minimized product-ball membership.
    pub fn in_v(&self, w: &[DVector<f64>], r: f64) -> bool {
        self.scaled_distance(w, None).0 < r
    }
}

/// The functional of the combined tuple (sigma^m, delta_t) in midpoint
/// coordinates, with the t-dependence split off in closed form:
///
/// ```text
///     G_t(w) = G_0(w) - tan(pi t/(n2-1)) * sum_{rotation slots} |w_k|^2.
/// ```
pub struct CrossingFamily {
    tuple0: StepTuple,
    n_sigma: usize,
    n2: usize,
    p: u32,
    epsilon: f64,
}

impl CrossingFamily {
    /// Assembles the m-th iterate of a conical family in midpoint
    /// coordinates.
    pub fn new(family: &ConicalFamily, m: usize) -> Result<Self> {
        let iter = crate::cpaction::iterate_family(family, m)?;
        let tuple0 = iter.tuple_at(0.0)?;
        Ok(Self {
            tuple0,
            n_sigma: iter.sigma().len(),
            n2: iter.n2(),
            p: choose_pm(iter.total_blocks()),
            epsilon: iter.epsilon(),
        })
    }

    pub fn slot_count(&self) -> usize {
        self.tuple0.len()
    }

    pub fn slot_dim(&self) -> usize {
        self.tuple0.real_dim()
    }

    pub fn exponent(&self) -> u32 {
        self.p
    }

    pub fn window(&self) -> (f64, f64) {
        (-self.epsilon, 1.0 + self.epsilon)
    }

    fn rotation_slots(&self) -> std::ops::Range<usize> {
        self.n_sigma..self.n_sigma + self.n2 - 1
    }

    fn rotation_mass(&self, w: &[DVector<f64>]) -> f64 {
        self.rotation_slots().map(|k| w[k].norm_squared()).sum()
    }

    fn tangent(&self, t: f64) -> f64 {
        (PI * t / (self.n2 - 1) as f64).tan()
    }

    /// G_t(w).
    pub fn value(&self, t: f64, w: &[DVector<f64>]) -> Result<f64> {
        Ok(broken_value_w(&self.tuple0, w)? - self.tangent(t) * self.rotation_mass(w))
    }

    /// Full w-gradient of G_t.
    pub fn gradient(&self, t: f64, w: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let mut g = broken_gradient_w(&self.tuple0, w)?;
        let tan = self.tangent(t);
        for k in self.rotation_slots() {
            g[k] -= w[k].scale(2.0 * tan);
        }
        Ok(g)
    }

    /// dG_t/dt at fixed w; never positive.
    pub fn dt(&self, t: f64, w: &[DVector<f64>]) -> f64 {
        let theta = PI * t / (self.n2 - 1) as f64;
        -(PI / (self.n2 - 1) as f64) / theta.cos().powi(2) * self.rotation_mass(w)
    }

    /// Solves G_t(w) = 0 for t in closed form (the t-dependence is a
    /// monotone tangent); None when the root leaves the window or the
    /// rotation mass vanishes.
    pub fn solve_level_t(&self, w: &[DVector<f64>]) -> Result<Option<f64>> {
        let mass = self.rotation_mass(w);
        if mass <= 1e-14 {
            return Ok(None);
        }
        let base = broken_value_w(&self.tuple0, w)?;
        let t = (base / mass).atan() / PI * (self.n2 - 1) as f64;
        let (lo, hi) = self.window();
        Ok((t > lo && t < hi).then_some(t))
    }
}

/// A point of the constrained flow: parameter t and a p-normalized
/// midpoint vector on the zero level of G_t.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: f64,
    pub w: DVector<f64>,
}

impl FlowState {
    /// Normalizes onto the p-sphere and checks the level and window
    /// conditions.
    pub fn new(family: &CrossingFamily, t: f64, w: DVector<f64>) -> Result<Self> {
        let mut slots = slots_of(&w, family.slot_dim());
        let norm = p_norm(&slots, family.exponent());
        if norm == 0.0 {
            return Err(GfError::Config("zero vector cannot be normalized".into()));
        }
        for b in &mut slots {
            *b /= norm;
        }
        let level = family.value(t, &slots)?;
        if level.abs() > LEVEL_DRIFT_MAX {
            return Err(GfError::OffManifold(level.abs()));
        }
        let (lo, hi) = family.window();
        if t <= lo || t >= hi {
            return Err(GfError::Config(format!("t = {t} outside the window")));
        }
        Ok(Self {
            t,
            w: flatten_slots(&slots),
        })
    }
}

/// The pseudo-gradient X(t, w) = (dt, dw) with
/// dt = -|grad|^2 and dw = (dG/dt) grad, where grad is the w-gradient
/// projected onto the tangent space of the p-sphere and the S^1 gauge.
pub struct PseudoGradient {
    pub dt: f64,
    pub dw: DVector<f64>,
    /// Norm of the projected level gradient.
    pub grad_norm: f64,
}

fn sphere_normal(w: &[DVector<f64>], p: u32) -> DVector<f64> {
    let mut n = Vec::with_capacity(w.len());
    for b in w {
        let r = b.norm();
        let scale = if r == 0.0 {
            0.0
        } else {
            p as f64 * r.powi(p as i32 - 2)
        };
        n.push(b.scale(scale));
    }
    flatten_slots(&n)
}

impl CrossingFamily {
    /// Evaluates the pseudo-gradient at an on-manifold state.
    pub fn pseudo_gradient(&self, state: &FlowState) -> Result<PseudoGradient> {
        let slots = slots_of(&state.w, self.slot_dim());
        let level = self.value(state.t, &slots)?;
        if level.abs() > LEVEL_DRIFT_MAX {
            return Err(GfError::OffManifold(level.abs()));
        }
        let raw = flatten_slots(&self.gradient(state.t, &slots)?);
        let normal = sphere_normal(&slots, self.p);
        let n_hat = normal.unscale(normal.norm());
        let orbit = mul_i(&state.w);
        let o_hat = orbit.unscale(orbit.norm());
        let mut grad = raw;
        let a = n_hat.dot(&grad);
        grad -= n_hat.scale(a);
        let b = o_hat.dot(&grad);
        grad -= o_hat.scale(b);
        let dtf = self.dt(state.t, &slots);
        let grad_norm = grad.norm();
        Ok(PseudoGradient {
            dt: -grad_norm * grad_norm,
            dw: grad.scale(dtf),
            grad_norm,
        })
    }
}

/// Why a flow line stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    EnteredInner,
    ExitedOuter,
    Stalled,
    MaxTime,
    WindowExit,
    ProjectionFailure,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Termination::EnteredInner => "entered_inner",
            Termination::ExitedOuter => "exited_outer",
            Termination::Stalled => "stalled",
            Termination::MaxTime => "max_time",
            Termination::WindowExit => "window_exit",
            Termination::ProjectionFailure => "projection_failure",
        };
        write!(f, "{s}")
    }
}

/// One recorded sample along a flow line.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FlowSample {
    pub s: f64,
    pub t: f64,
    pub grad_norm: f64,
    /// Whether the point lay inside the inner region at this sample.
    pub in_inner: bool,
}

/// An integrated flow line with its termination and action bookkeeping.
#[derive(Debug, Clone, Serialize)]
pub struct FlowLine {
    pub samples: Vec<FlowSample>,
    pub termination: Termination,
    /// +1 follows X (action nonincreasing), -1 follows -X.
    pub direction: i8,
    pub steps: usize,
}

impl FlowLine {
    pub fn start_action(&self) -> f64 {
        self.samples.first().map(|s| s.t).unwrap_or(f64::NAN)
    }

    pub fn end_action(&self) -> f64 {
        self.samples.last().map(|s| s.t).unwrap_or(f64::NAN)
    }

    pub fn action_drop(&self) -> f64 {
        (self.start_action() - self.end_action()).abs()
    }

    /// Action variation of the crossing segment, when the line connects
    /// the outer boundary with the inner region: for an inward line the
    /// whole run, for an outward line the part after the last V_{inner}
    /// exit.
    pub fn crossing_drop(&self) -> Option<f64> {
        match self.termination {
            Termination::EnteredInner => Some(self.action_drop()),
            Termination::ExitedOuter => {
                let last_inner = self.samples.iter().rposition(|s| s.in_inner)?;
                let end = self.samples.last()?;
                Some((self.samples[last_inner].t - end.t).abs())
            }
            _ => None,
        }
    }
}

/// Stopping rules for `flow_line`.
pub struct StopSpec<'a> {
    /// Region oracle; inner entry and outer exit are tested on it.
    pub nbhd: &'a TrajectoryNeighborhood,
    /// Radius of the inner region.
    pub inner: f64,
    /// Leaving V_{outer} terminates with ExitedOuter.
    pub outer: f64,
    /// Whether entering V_{inner} terminates the line; lines seeded
    /// inside it run with this off and stop at the outer boundary.
    pub stop_on_inner: bool,
    pub max_time: f64,
    pub max_steps: usize,
}

const CASH_KARP_A: [[f64; 5]; 5] = [
    [0.2, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0],
    [0.3, -0.9, 1.2, 0.0, 0.0],
    [-11.0 / 54.0, 2.5, -70.0 / 27.0, 35.0 / 27.0, 0.0],
    [
        1631.0 / 55296.0,
        175.0 / 512.0,
        575.0 / 13824.0,
        44275.0 / 110592.0,
        253.0 / 4096.0,
    ],
];
const CASH_KARP_B5: [f64; 6] = [
    37.0 / 378.0,
    0.0,
    250.0 / 621.0,
    125.0 / 594.0,
    0.0,
    512.0 / 1771.0,
];
const CASH_KARP_B4: [f64; 6] = [
    2825.0 / 27648.0,
    0.0,
    18575.0 / 48384.0,
    13525.0 / 55296.0,
    277.0 / 14336.0,
    0.25,
];

/// Integrates du/ds = direction * X(u) from `start` until a stop rule
/// fires: adaptive embedded Runge-Kutta with post-step renormalization
/// onto the p-sphere and Newton projection back onto the zero level.
pub fn flow_line(
    family: &CrossingFamily,
    start: &FlowState,
    direction: i8,
    stop: &StopSpec,
) -> Result<FlowLine> {
    if direction != 1 && direction != -1 {
        return Err(GfError::Config("direction must be +1 or -1".into()));
    }
    let dir = direction as f64;
    let slot_dim = family.slot_dim();
    let field = |t: f64, w: &DVector<f64>| -> Result<(f64, DVector<f64>, f64)> {
        let st = FlowState {
            t,
            w: w.clone(),
        };
        let pg = family.pseudo_gradient(&st)?;
        Ok((dir * pg.dt, pg.dw.scale(dir), pg.grad_norm))
    };

    let mut state = start.clone();
    let mut s = 0.0;
    let mut h = 1e-3;
    let mut samples = Vec::new();
    let mut steps = 0usize;
    let mut stall_run = 0usize;

    let (_, _, g0) = field(state.t, &state.w)?;
    let (d0, mut phase_hint) = stop
        .nbhd
        .scaled_distance(&slots_of(&state.w, slot_dim), None);
    let mut steps_since_full = 0usize;
    samples.push(FlowSample {
        s,
        t: state.t,
        grad_norm: g0,
        in_inner: d0 < stop.inner,
    });

    loop {
        if steps >= stop.max_steps {
            return Ok(FlowLine {
                samples,
                termination: Termination::MaxTime,
                direction,
                steps,
            });
        }
        if s >= stop.max_time {
            return Ok(FlowLine {
                samples,
                termination: Termination::MaxTime,
                direction,
                steps,
            });
        }

        // Embedded Cash-Karp step on (t, w) jointly.
        let mut k_t = [0.0f64; 6];
        let mut k_w: Vec<DVector<f64>> = Vec::with_capacity(6);
        let mut grad_here = 0.0;
        let mut failed = false;
        for stage in 0..6 {
            let mut t_arg = state.t;
            let mut w_arg = state.w.clone();
            if stage > 0 {
                for j in 0..stage {
                    let a = CASH_KARP_A[stage - 1][j];
                    if a != 0.0 {
                        t_arg += h * a * k_t[j];
                        w_arg += k_w[j].scale(h * a);
                    }
                }
            }
            match field(t_arg, &w_arg) {
                Ok((dt, dw, g)) => {
                    if stage == 0 {
                        grad_here = g;
                    }
                    k_t[stage] = dt;
                    k_w.push(dw);
                }
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            h *= 0.25;
            if h < 1e-14 {
                return Ok(FlowLine {
                    samples,
                    termination: Termination::ProjectionFailure,
                    direction,
                    steps,
                });
            }
            continue;
        }

        if grad_here < STALL_NORM {
            stall_run += 1;
            if stall_run >= 3 {
                return Ok(FlowLine {
                    samples,
                    termination: Termination::Stalled,
                    direction,
                    steps,
                });
            }
        } else {
            stall_run = 0;
        }

        let mut t5 = state.t;
        let mut w5 = state.w.clone();
        let mut t4 = state.t;
        let mut w4 = state.w.clone();
        for stage in 0..6 {
            t5 += h * CASH_KARP_B5[stage] * k_t[stage];
            w5 += k_w[stage].scale(h * CASH_KARP_B5[stage]);
            t4 += h * CASH_KARP_B4[stage] * k_t[stage];
            w4 += k_w[stage].scale(h * CASH_KARP_B4[stage]);
        }
        let err = ((t5 - t4).abs().powi(2) + (&w5 - &w4).norm_squared()).sqrt();
        let scale = RK_TOL * (1.0 + state.w.norm());
        if err > scale && h > 1e-13 {
            h *= 0.9 * (scale / err).powf(0.2).clamp(0.1, 1.0);
            continue;
        }

        // Accept: renormalize and project back to the level set.
        let mut slots = slots_of(&w5, slot_dim);
        let norm = p_norm(&slots, family.exponent());
        for b in &mut slots {
            *b /= norm;
        }
        let mut projected = false;
        for _ in 0..5 {
            let level = family.value(t5, &slots)?;
            if level.abs() <= 1e-12 {
                projected = true;
                break;
            }
            let g = flatten_slots(&family.gradient(t5, &slots)?);
            let gs = g.norm_squared();
            if gs < 1e-20 {
                break;
            }
            let flat = flatten_slots(&slots) - g.scale(level / gs);
            slots = slots_of(&flat, slot_dim);
            let nn = p_norm(&slots, family.exponent());
            for b in &mut slots {
                *b /= nn;
            }
        }
        let level = family.value(t5, &slots)?;
        if !projected && level.abs() > LEVEL_DRIFT_MAX {
            return Ok(FlowLine {
                samples,
                termination: Termination::ProjectionFailure,
                direction,
                steps,
            });
        }

        state = FlowState {
            t: t5,
            w: flatten_slots(&slots),
        };
        s += h;
        steps += 1;
        steps_since_full += 1;
        let want_full = steps_since_full >= 48;
        let (mut dist, mut theta) = stop
            .nbhd
            .scaled_distance(&slots, if want_full { None } else { Some(phase_hint) });
        if want_full {
            steps_since_full = 0;
        } else {
            // The warm-started search can overestimate the distance when
            // the minimizing phase jumps basins; confirm with a full
            // search whenever a region decision is at stake.
            let near_inner = stop.inner > 0.0 && (dist - stop.inner).abs() < 0.15 * stop.inner;
            let near_outer =
                stop.outer.is_finite() && (dist - stop.outer).abs() < 0.15 * stop.outer;
            if near_inner || near_outer {
                let (df, tf) = stop.nbhd.scaled_distance(&slots, None);
                dist = df;
                theta = tf;
                steps_since_full = 0;
            }
        }
        phase_hint = theta;
        let in_inner = dist < stop.inner;
        samples.push(FlowSample {
            s,
            t: state.t,
            grad_norm: grad_here,
            in_inner,
        });
        if err > 0.0 {
            h = (h * 0.9 * (scale / err).powf(0.2).clamp(0.5, 5.0)).min(1.0);
        } else {
            h = (h * 2.0).min(1.0);
        }

        let (lo, hi) = family.window();
        if state.t <= lo + 1e-6 || state.t >= hi - 1e-6 {
            return Ok(FlowLine {
                samples,
                termination: Termination::WindowExit,
                direction,
                steps,
            });
        }
        if in_inner && stop.stop_on_inner {
            return Ok(FlowLine {
                samples,
                termination: Termination::EnteredInner,
                direction,
                steps,
            });
        }
        if dist >= stop.outer {
            return Ok(FlowLine {
                samples,
                termination: Termination::ExitedOuter,
                direction,
                steps,
            });
        }
    }
}

/// One row of the crossing experiment.
#[derive(Debug, Clone, Serialize)]
pub struct CrossingRow {
    pub m: usize,
    pub seed: usize,
    pub direction: i8,
    pub crossed: bool,
    pub delta_action: f64,
    pub steps: usize,
    pub termination: Termination,
}

/// Experiment output: all rows plus the per-m minimum crossing drop.
#[derive(Debug, Clone, Serialize)]
pub struct CrossingTable {
    pub rows: Vec<CrossingRow>,
    /// (m, c_min(m)); None when no line crossed at that m.
    pub c_min: Vec<(usize, Option<f64>)>,
    /// Running minimum over m of the available c_min values.
    pub c_inf: Option<f64>,
}

impl CrossingTable {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("m,seed,direction,crossed,delta_action,steps,termination\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.12e},{},{}\n",
                r.m, r.seed, r.direction, r.crossed, r.delta_action, r.steps, r.termination
            ));
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            c_min: &'a [(usize, Option<f64>)],
            c_inf: Option<f64>,
        }
        serde_json::to_string_pretty(&Summary {
            c_min: &self.c_min,
            c_inf: self.c_inf,
        })
        .map_err(GfError::from)
    }
}

/// Experiment controls.
#[derive(Debug, Clone, Serialize)]
pub struct CrossingConfig {
    pub r: f64,
    pub m_list: Vec<usize>,
    pub seeds_per_m: usize,
    pub rng_seed: u64,
    pub max_steps: usize,
    pub max_time: f64,
    /// Largest iterate order accepted before refusing the run; the
    /// Hessian eigenproblems behind seeding grow cubically with m.
    pub m_cap: usize,
}

impl Default for CrossingConfig {
    fn default() -> Self {
        Self {
            r: 0.2,
            m_list: vec![1, 2, 3, 4],
            seeds_per_m: 64,
            rng_seed: 0xC805517E,
            max_steps: 40_000,
            max_time: 400.0,
            m_cap: 6,
        }
    }
}

/// The twist of the invariant direction x: t with e^{-2 i pi t} Phi(x) = x.
fn direction_twist(family: &ConicalFamily, x: &DVector<f64>) -> Result<f64> {
    let phi = apply_tuple(family.sigma(), x)?;
    let inner = hermitian_inner(x, &phi);
    let t = (inner.arg() / std::f64::consts::TAU).rem_euclid(1.0);
    let phase = Complex64::from_polar(1.0, -std::f64::consts::TAU * t);
    let gap = (mul_complex_scalar(phase, &phi) - x).norm();
    if gap > 1e-8 * (1.0 + x.norm()) {
        return Err(GfError::Config(format!(
            "x does not span an invariant direction (gap {gap:.3e})"
        )));
    }
    Ok(t)
}

/// Builds one seed state on the boundary of V_r: one slot on its r-sphere,
/// the others uniform in their balls, then level-solved and normalized.
fn seed_state(
    family: &CrossingFamily,
    nbhd: &TrajectoryNeighborhood,
    seed_idx: usize,
    direction: Option<&DVector<f64>>,
    rng: &mut ChaCha8Rng,
) -> Option<FlowState> {
    let slot_dim = family.slot_dim();
    let k = nbhd.slot_count();
    let r = nbhd.radius();
    let w: Vec<DVector<f64>> = match direction {
        // A displacement along one of the orbit's Hessian eigendirections,
        // bisected so the seed lands just inside the boundary sphere.
        // Random boundary points spread their deviation over every slot,
        // which saturates the level solve for larger iterates; a one-mode
        // displacement keeps the solved t inside the window.
        Some(u) => {
            let u_slots = slots_of(u, slot_dim);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let place = |s: f64| -> Vec<DVector<f64>> {
                nbhd.centers()
                    .iter()
                    .zip(&u_slots)
                    .map(|(c, uj)| c + uj.scale(sign * s))
                    .collect()
            };
            let target = 0.97 * r;
            let mut hi = r;
            let mut guard = 0;
            while nbhd.scaled_distance(&place(hi), None).0 < target && guard < 40 {
                hi *= 2.0;
                guard += 1;
            }
            let mut lo = 0.0;
            for _ in 0..24 {
                let mid = 0.5 * (lo + hi);
                if nbhd.scaled_distance(&place(mid), None).0 < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            // The level residual grows quadratically along the mode, so a
            // full-radius displacement can solve to a t outside the window;
            // back off to the largest displacement the window accepts.
            let (win_lo, win_hi) = family.window();
            let solves_inside = |s: f64| -> bool {
                family
                    .solve_level_t(&place(s))
                    .ok()
                    .flatten()
                    .is_some_and(|t| t > win_lo + 0.05 && t < win_hi - 0.05)
            };
            let mut s_pick = 0.5 * (lo + hi);
            if !solves_inside(s_pick) {
                let mut lo_s = 0.0;
                let mut hi_s = s_pick;
                for _ in 0..24 {
                    let mid = 0.5 * (lo_s + hi_s);
                    if solves_inside(mid) {
                        lo_s = mid;
                    } else {
                        hi_s = mid;
                    }
                }
                s_pick = lo_s;
            }
            place(s_pick)
                .into_iter()
                .map(|c| c + sample_ball(slot_dim, r / 32.0, rng))
                .collect()
        }
        None => {
            let boundary_slot = seed_idx % k;
            nbhd.centers()
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    let offset = if j == boundary_slot {
                        sample_sphere(slot_dim, rng).scale(r * 0.999)
                    } else {
                        sample_ball(slot_dim, r * 0.9, rng)
                    };
                    c + offset
                })
                .collect()
        }
    };
    let t = family.solve_level_t(&w).ok()??;
    let state = FlowState::new(family, t, flatten_slots(&w)).ok()?;
    let slots = slots_of(&state.w, slot_dim);
    // Normalization must not have pushed the seed through the inner
    // region or out of the outer one.
    if nbhd.in_v(&slots, r / 2.0) || !nbhd.in_v(&slots, r * 1.02) {
        return None;
    }
    Some(state)
}

/// The w-Hessian of G_t at an on-manifold state (t frozen), compressed to
/// the tangent space of the p-sphere and the S^1 gauge: finite differences
/// of the exact gradient, then P H P with the orthoprojector P off the
/// sphere normal and the orbit direction.  Pairs sorted by eigenvalue.
fn constrained_spectrum(
    family: &CrossingFamily,
    state: &FlowState,
) -> Result<Vec<(f64, DVector<f64>)>> {
    let slot_dim = family.slot_dim();
    let n = state.w.len();
    let h = 1e-5 * (1.0 + state.w.norm());
    let mut hess = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut wp = state.w.clone();
        wp[j] += h;
        let mut wm = state.w.clone();
        wm[j] -= h;
        let gp = flatten_slots(&family.gradient(state.t, &slots_of(&wp, slot_dim))?);
        let gm = flatten_slots(&family.gradient(state.t, &slots_of(&wm, slot_dim))?);
        hess.set_column(j, &(gp - gm).unscale(2.0 * h));
    }
    let hess = (&hess + hess.transpose()).scale(0.5);

    let slots = slots_of(&state.w, slot_dim);
    let normal = sphere_normal(&slots, family.exponent());
    let n_hat = normal.unscale(normal.norm());
    let orbit = mul_i(&state.w);
    let o_hat = orbit.unscale(orbit.norm());
    let projector =
        DMatrix::identity(n, n) - &n_hat * n_hat.transpose() - &o_hat * o_hat.transpose();
    let compressed = &projector * hess * &projector;
    let compressed = (&compressed + compressed.transpose()).scale(0.5);

    let eig = compressed.symmetric_eigen();
    let mut pairs: Vec<(f64, DVector<f64>)> = (0..n)
        .map(|j| (eig.eigenvalues[j], eig.eigenvectors.column(j).clone_owned()))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(pairs)
}

/// The steepest escape directions of the constrained Hessian, up to
/// `per_side` from each end of the spectrum; near-zero eigenvalues (the
/// projector kernel and critical-manifold directions) are skipped.
fn escape_directions(spectrum: &[(f64, DVector<f64>)], per_side: usize) -> Vec<DVector<f64>> {
    let scale = spectrum
        .iter()
        .map(|(l, _)| l.abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut dirs: Vec<DVector<f64>> = spectrum
        .iter()
        .filter(|(l, _)| *l < -1e-6 * scale)
        .take(per_side)
        .map(|(_, v)| v.clone())
        .collect();
    dirs.extend(
        spectrum
            .iter()
            .rev()
            .filter(|(l, _)| *l > 1e-6 * scale)
            .take(per_side)
            .map(|(_, v)| v.clone()),
    );
    dirs
}

/// Builds one seed inside V_{r/2}, displaced off the critical orbit along
/// an escape eigendirection (plus a little noise) when one is supplied, or
/// by a plain random ball otherwise; its outward flow realizes a crossing
/// line run backwards.
fn inside_seed(
    family: &CrossingFamily,
    nbhd: &TrajectoryNeighborhood,
    base: &FlowState,
    direction: Option<&DVector<f64>>,
    rng: &mut ChaCha8Rng,
) -> Option<FlowState> {
    let slot_dim = family.slot_dim();
    let r = nbhd.radius();
    let delta = r / 8.0;
    let jitter = if direction.is_some() { delta / 6.0 } else { delta };
    let mut displacement = sample_ball(base.w.len(), jitter, rng);
    if let Some(u) = direction {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        displacement += u.scale(sign * delta);
    }
    let w = &base.w + displacement;
    let slots = slots_of(&w, slot_dim);
    let t = family.solve_level_t(&slots).ok()??;
    let state = FlowState::new(family, t, w).ok()?;
    let norm_slots = slots_of(&state.w, slot_dim);
    nbhd.in_v(&norm_slots, r / 2.0).then_some(state)
}

/// Runs the crossing experiment around the invariant direction x: for
/// each m, flow lines seeded on the boundary of V_r run in both
/// directions until they enter V_{r/2}, leave V_r, stall, or time out;
/// every line that reaches the inner region records its action drop.
pub fn crossing_experiment(
    family: &ConicalFamily,
    x: &DVector<f64>,
    config: &CrossingConfig,
) -> Result<CrossingTable> {
    let t_bar = direction_twist(family, x)?;
    if let Some(&m) = config.m_list.iter().find(|&&m| m > config.m_cap) {
        return Err(GfError::ResourceCap(format!(
            "iterate order {m} exceeds the cap {}",
            config.m_cap
        )));
    }
    let mut rows = Vec::new();
    let mut c_min = Vec::new();

    for &m in &config.m_list {
        let cf = CrossingFamily::new(family, m)?;
        let t_m = (m as f64 * t_bar).rem_euclid(1.0);
        let iter = crate::cpaction::iterate_family(family, m)?;
        let tuple_tm = iter.tuple_at(t_m)?;
        let nbhd = TrajectoryNeighborhood::new(&tuple_tm, x, config.r, t_m)?;

        // Boundary seeds probe inward flow; inside seeds displaced off the
        // critical orbit along its escape eigendirections probe the same
        // crossing lines from the other end.  Random boundary construction
        // degrades for larger iterates, so directed boundary attempts
        // alternate with it and inside seeds fill the per-m quota.
        let centers = flatten_slots(nbhd.centers());
        let orbit_state = cf
            .solve_level_t(nbhd.centers())?
            .ok_or_else(|| GfError::Config("critical orbit has no level solution".into()))
            .and_then(|t0| FlowState::new(&cf, t0, centers))?;
        let directions = escape_directions(&constrained_spectrum(&cf, &orbit_state)?, 4);

        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ (m as u64).wrapping_mul(0x9E37));
        let mut seeds: Vec<(usize, FlowState, bool)> = Vec::new();
        let boundary_target = (config.seeds_per_m * 3) / 4;
        let mut attempts = 0usize;
        while seeds.len() < boundary_target && attempts < boundary_target * 20 {
            let dir = (attempts % 2 == 1 && !directions.is_empty())
                .then(|| &directions[(attempts / 2) % directions.len()]);
            if let Some(state) = seed_state(&cf, &nbhd, attempts, dir, &mut rng) {
                seeds.push((seeds.len(), state, true));
            }
            attempts += 1;
        }

        let inside_target = config.seeds_per_m - seeds.len();
        let mut inside = 0usize;
        attempts = 0;
        while inside < inside_target && attempts < inside_target * 20 {
            let dir = (!directions.is_empty()).then(|| &directions[attempts % directions.len()]);
            if let Some(state) = inside_seed(&cf, &nbhd, &orbit_state, dir, &mut rng) {
                seeds.push((config.seeds_per_m + inside, state, false));
                inside += 1;
            }
            attempts += 1;
        }

        let m_rows: Vec<CrossingRow> = seeds
            .par_iter()
            .flat_map(|(i, state, stop_on_inner)| {
                let stop = StopSpec {
                    nbhd: &nbhd,
                    inner: config.r / 2.0,
                    outer: config.r,
                    stop_on_inner: *stop_on_inner,
                    max_time: config.max_time,
                    max_steps: config.max_steps,
                };
                [1i8, -1i8]
                    .into_iter()
                    .filter_map(|dir| {
                        let line = flow_line(&cf, state, dir, &stop).ok()?;
                        let drop = line.crossing_drop();
                        Some(CrossingRow {
                            m,
                            seed: *i,
                            direction: dir,
                            crossed: drop.is_some(),
                            delta_action: drop.unwrap_or(line.action_drop()),
                            steps: line.steps,
                            termination: line.termination,
                        })
                    })
                    .collect::<Vec<_>>()
            })
            .collect();

        let min_drop = m_rows
            .iter()
            .filter(|r| r.crossed)
            .map(|r| r.delta_action)
            .fold(f64::INFINITY, f64::min);
        c_min.push((m, (min_drop.is_finite()).then_some(min_drop)));
        rows.extend(m_rows);
    }

    let c_inf = c_min
        .iter()
        .filter_map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    Ok(CrossingTable {
        rows,
        c_min,
        c_inf: c_inf.is_finite().then_some(c_inf),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpaction::{critical_points, SeedStrategy, DEFAULT_EPSILON};
    use crate::genfun::unflatten;
    use crate::hamdiff::{hyperbolic_fixture, pseudo_rotation_fixture};

    fn hyperbolic_family() -> ConicalFamily {
        let fixture = hyperbolic_fixture().unwrap();
        ConicalFamily::new(fixture.tuple.clone(), 5, DEFAULT_EPSILON).unwrap()
    }

    fn axis(dim: usize, j: usize) -> DVector<f64> {
        let mut x = DVector::zeros(dim);
        x[2 * j] = 1.0;
        x
    }

    #[test]
    fn pm_examples() {
        assert_eq!(choose_pm(1), 2);
        assert_eq!(choose_pm(2), 2);
        assert_eq!(choose_pm(8), 3);
        assert_eq!(choose_pm(9), 4);
        verify_pm(11, 4, 200, 5).unwrap();
        verify_pm(29, 4, 200, 6).unwrap();
    }

    #[test]
    fn neighborhood_centers_match_prefix_formula() {
        let family = hyperbolic_family();
        let x = axis(4, 0);
        let t = direction_twist(&family, &x).unwrap();
        let tuple = family.tuple_at(t).unwrap();
        let nbhd = TrajectoryNeighborhood::new(&tuple, &x, 0.2, t).unwrap();
        // Rebuild centers independently from prefix applications.
        let mut z = x.clone();
        let lambda = nbhd.lambda();
        for (k, c) in nbhd.centers().iter().enumerate() {
            let next = crate::genfun::step_map(tuple.step(k), &z).unwrap().sigma_z;
            let mid = (z.clone() + &next).scale(0.5 * lambda);
            assert!((mid - c).norm() < 1e-10, "slot {k}");
            z = next;
        }
    }

    #[test]
    fn membership_predicates() {
        let family = hyperbolic_family();
        let x = axis(4, 0);
        let t = direction_twist(&family, &x).unwrap();
        let tuple = family.tuple_at(t).unwrap();
        let nbhd = TrajectoryNeighborhood::new(&tuple, &x, 0.2, t).unwrap();

        let centers: Vec<DVector<f64>> = nbhd.centers().to_vec();
        assert!(nbhd.in_product_ball(&centers, 1e-6));
        assert!(nbhd.in_v(&centers, 0.05));

        // Global phase leaves U_r membership untouched.
        let phase = Complex64::from_polar(1.0, 1.234);
        let rotated: Vec<DVector<f64>> =
            centers.iter().map(|c| mul_complex_scalar(phase, c)).collect();
        assert!(nbhd.in_v(&rotated, 0.05));

        // Displace one slot by 1.5 r.
        let mut far = centers.clone();
        far[2] += sample_sphere(4, &mut ChaCha8Rng::seed_from_u64(2)).scale(0.3);
        assert!(!nbhd.in_product_ball(&far, 0.2));
        assert!(!nbhd.in_v(&far, 0.2));
    }

    #[test]
    fn pseudo_gradient_identities_hold() {
        let family = hyperbolic_family();
        let cf = CrossingFamily::new(&family, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let total = cf.slot_count() * cf.slot_dim();
        let mut checked = 0;
        while checked < 50 {
            let w = sample_sphere(total, &mut rng);
            let slots = slots_of(&w, cf.slot_dim());
            let Some(t) = cf.solve_level_t(&slots).unwrap() else {
                continue;
            };
            let state = FlowState::new(&cf, t, w).unwrap();
            let pg = cf.pseudo_gradient(&state).unwrap();
            let slots = slots_of(&state.w, cf.slot_dim());

            // df(X) = 0: the contraction of (dt f, grad f) with X.
            let dtf = cf.dt(state.t, &slots);
            let full_grad = flatten_slots(&cf.gradient(state.t, &slots).unwrap());
            let contraction = dtf * pg.dt + full_grad.dot(&pg.dw);
            let scale = 1.0 + dtf.abs() * pg.grad_norm * pg.grad_norm;
            assert!(
                contraction.abs() <= 1e-10 * scale,
                "df(X) = {contraction:.3e}"
            );

            // <X, -d/dt> = |grad|^2 and the action derivative is its
            // negative.
            assert!((-pg.dt - pg.grad_norm.powi(2)).abs() <= 1e-12 * (1.0 + pg.dt.abs()));

            // Tangency to the p-sphere and the gauge.
            let normal = sphere_normal(&slots, cf.exponent());
            assert!(normal.unscale(normal.norm()).dot(&pg.dw).abs() < 1e-10);
            let orbit = mul_i(&state.w);
            assert!(orbit.unscale(orbit.norm()).dot(&pg.dw).abs() < 1e-10);

            // The S^1 symmetry makes the raw gradient orbit-orthogonal
            // before any projection.
            assert!(orbit.dot(&full_grad).abs() < 1e-10 * (1.0 + full_grad.norm()));
            checked += 1;
        }
    }

    #[test]
    fn split_value_matches_direct_tuple() {
        let family = hyperbolic_family();
        let cf = CrossingFamily::new(&family, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let total = cf.slot_count() * cf.slot_dim();
        for _ in 0..10 {
            let w = sample_sphere(total, &mut rng);
            let slots = slots_of(&w, cf.slot_dim());
            let t = 0.31;
            let split = cf.value(t, &slots).unwrap();
            let iter = crate::cpaction::iterate_family(&family, 2).unwrap();
            let direct =
                broken_value_w(&iter.tuple_at(t).unwrap(), &slots).unwrap();
            assert!((split - direct).abs() < 1e-12 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn critical_orbit_stalls() {
        let family = hyperbolic_family();
        let records = critical_points(
            &family,
            &SeedStrategy {
                axes: true,
                random: 8,
                rng_seed: 3,
            },
        )
        .unwrap();
        let rec = &records[0];
        let cf = CrossingFamily::new(&family, 1).unwrap();
        let tuple = family.tuple_at(rec.t).unwrap();
        let x = rec.z_vector();
        let nbhd = TrajectoryNeighborhood::new(&tuple, &x, 0.2, rec.t).unwrap();

        // The critical point in midpoint coordinates: the trajectory's own
        // midpoints (they already solve the level equation).
        let v = unflatten(&DVector::from_row_slice(&rec.v), family.real_dim());
        let w = crate::genfun::averaging(&v);
        let state = FlowState::new(&cf, rec.t, flatten_slots(&w)).unwrap();

        // The pseudo-gradient vanishes on the critical orbit.
        let pg = cf.pseudo_gradient(&state).unwrap();
        assert!(pg.grad_norm < 1e-6, "grad norm {:.3e}", pg.grad_norm);
        assert!(pg.dw.norm() < 1e-6);

        // A short flow from it goes nowhere: disable the region stops so
        // only stalling or the clock can end the line.
        let stop = StopSpec {
            nbhd: &nbhd,
            inner: 0.0,
            outer: f64::INFINITY,
            stop_on_inner: true,
            max_time: 5.0,
            max_steps: 2_000,
        };
        let line = flow_line(&cf, &state, 1, &stop).unwrap();
        assert!(
            matches!(line.termination, Termination::Stalled | Termination::MaxTime),
            "unexpected termination {:?}",
            line.termination
        );
        assert!(line.action_drop() < 1e-10);
    }

    #[test]
    fn action_monotone_along_flow() {
        let family = hyperbolic_family();
        let cf = CrossingFamily::new(&family, 1).unwrap();
        let x = axis(4, 0);
        let t = direction_twist(&family, &x).unwrap();
        let tuple = family.tuple_at(t).unwrap();
        let nbhd = TrajectoryNeighborhood::new(&tuple, &x, 0.2, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tested = 0;
        for idx in 0..40 {
            let Some(state) = seed_state(&cf, &nbhd, idx, None, &mut rng) else {
                continue;
            };
            let stop = StopSpec {
                nbhd: &nbhd,
                inner: 0.1,
                outer: 0.2,
                stop_on_inner: true,
                max_time: 3.0,
                max_steps: 500,
            };
            let line = flow_line(&cf, &state, 1, &stop).unwrap();
            for pair in line.samples.windows(2) {
                assert!(
                    pair[1].t <= pair[0].t + 1e-9,
                    "action increased along +X"
                );
            }
            let reversed = flow_line(&cf, &state, -1, &stop).unwrap();
            for pair in reversed.samples.windows(2) {
                assert!(
                    pair[1].t >= pair[0].t - 1e-9,
                    "action decreased along -X"
                );
            }
            tested += 1;
            if tested >= 10 {
                break;
            }
        }
        assert!(tested >= 5, "not enough usable seeds");
    }

    #[test]
    fn distance_floor_between_regions() {
        let family = hyperbolic_family();
        let cf = CrossingFamily::new(&family, 1).unwrap();
        let x = axis(4, 0);
        let t = direction_twist(&family, &x).unwrap();
        let tuple = family.tuple_at(t).unwrap();
        let r = 0.2;
        let nbhd = TrajectoryNeighborhood::new(&tuple, &x, r, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let slot_dim = cf.slot_dim();
        let mut min_dist = f64::INFINITY;
        for idx in 0..60 {
            // Outer point: one slot exactly at radius r.
            let mut wa: Vec<DVector<f64>> = Vec::new();
            for (j, c) in nbhd.centers().iter().enumerate() {
                let offset = if j == idx % nbhd.slot_count() {
                    sample_sphere(slot_dim, &mut rng).scale(r)
                } else {
                    sample_ball(slot_dim, 0.5 * r, &mut rng)
                };
                wa.push(c + offset);
            }
            // Inner point: all slots strictly within r/2.
            let wb: Vec<DVector<f64>> = nbhd
                .centers()
                .iter()
                .map(|c| c + sample_ball(slot_dim, 0.45 * r, &mut rng))
                .collect();
            let na = p_norm(&wa, cf.exponent());
            let nb = p_norm(&wb, cf.exponent());
            let fa = flatten_slots(&wa).unscale(na);
            let fb = flatten_slots(&wb).unscale(nb);
            let mut best = f64::INFINITY;
            for k in 0..128 {
                let phase = Complex64::from_polar(1.0, k as f64 / 128.0 * std::f64::consts::TAU);
                best = best.min((mul_complex_scalar(phase, &fb) - &fa).norm());
            }
            min_dist = min_dist.min(best);
        }
        assert!(
            min_dist >= r / 4.0 - 1e-6,
            "sampled separation {min_dist} under the floor"
        );
    }

    #[test]
    fn small_crossing_run_on_hyperbolic_axis() {
        let family = hyperbolic_family();
        let x = axis(4, 0);
        let config = CrossingConfig {
            r: 0.2,
            m_list: vec![1],
            seeds_per_m: 12,
            rng_seed: 77,
            max_steps: 20_000,
            max_time: 200.0,
            ..CrossingConfig::default()
        };
        let table = crossing_experiment(&family, &x, &config).unwrap();
        assert!(!table.rows.is_empty());
        for row in &table.rows {
            if row.crossed {
                assert!(row.delta_action > 0.0, "crossing with zero drop");
            }
        }
        let csv = table.to_csv();
        assert!(csv.starts_with("m,seed,direction,crossed"));
    }

    #[test]
    fn elliptic_axis_runs_as_diagnostic() {
        let fixture = pseudo_rotation_fixture(&[0.25, 0.75]).unwrap();
        let family = ConicalFamily::new(fixture.tuple.clone(), 5, DEFAULT_EPSILON).unwrap();
        let x = axis(4, 0);
        let config = CrossingConfig {
            r: 0.15,
            m_list: vec![1],
            seeds_per_m: 6,
            rng_seed: 5,
            max_steps: 4_000,
            max_time: 20.0,
            ..CrossingConfig::default()
        };
        let table = crossing_experiment(&family, &x, &config).unwrap();
        assert_eq!(table.c_min.len(), 1);
    }

}
