//! The four subcommands: fixed-point solves, index reports, crossing
//! runs, and the verification suite.  Each writes its artifacts plus a
//! machine-readable summary naming the tolerances actually used.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use gfdyn::cpaction::{
    action_spectrum, critical_points, delta_monotonicity, kernel_correspondence, recap_shift,
    records_to_csv, records_to_json, ConicalFamily, SeedStrategy,
};
use gfdyn::crossing::{crossing_experiment, verify_pm, CrossingConfig};
use gfdyn::genfun::sample_sphere;
use gfdyn::hamdiff::{axis_rotation, axis_vector, lift_validate, wrapped_distance, Fixture};
use gfdyn::maslov::{
    bott_check, iterated_index_identity, path_properties_suite, FixedPointClass, IndexReport,
    IterateIdentityRow, SymplecticPath,
};
use gfdyn::report::{write_json, write_text};
use gfdyn::symplin::{hermitian_inner, mul_i};
use gfdyn::{GfError, Result};

use crate::config::{ExperimentConfig, FixtureChoice};

fn out_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    Path::new(&cfg.out_dir).join(name)
}

fn family_of(cfg: &ExperimentConfig, fixture: &Fixture) -> Result<ConicalFamily> {
    ConicalFamily::new(fixture.tuple.clone(), cfg.n2, cfg.epsilon)
}

#[derive(Serialize)]
struct FixedPointsSummary<'a> {
    command: &'static str,
    fixture: String,
    d: usize,
    n1: usize,
    n2: usize,
    epsilon: f64,
    rng_seed: u64,
    tolerances: &'a BTreeMap<String, f64>,
    record_count: usize,
    spectrum: Vec<(f64, usize)>,
    max_nullity: usize,
    max_residual: f64,
}

/// Solves the critical-point problem of the configured fixture and writes
/// the record table.
pub fn cmd_fixed_points(cfg: &ExperimentConfig) -> Result<()> {
    let fixture = cfg.build_fixture()?;
    let family = family_of(cfg, &fixture)?;
    let records = critical_points(
        &family,
        &SeedStrategy {
            axes: true,
            random: cfg.seeds,
            rng_seed: cfg.rng_seed,
        },
    )?;

    let max_nullity = records.iter().map(|r| r.nullity).max().unwrap_or(0);
    if max_nullity > 0 {
        eprintln!(
            "warning: degenerate critical set (max nullity {max_nullity}); \
             records sample circle orbits of a larger critical manifold"
        );
    }

    let max_residual = records
        .iter()
        .map(|r| r.residual_gradient.max(r.residual_fixed_point))
        .fold(0.0f64, f64::max);
    if max_residual > cfg.tol("record_residual") {
        return Err(GfError::InvariantViolation(format!(
            "record residual {max_residual:.3e} exceeds the configured bound"
        )));
    }

    for kf in &fixture.known_fixed_points {
        let hit = records
            .iter()
            .any(|r| wrapped_distance(r.t, kf.action) <= cfg.tol("action_match"));
        if !hit {
            return Err(GfError::InvariantViolation(format!(
                "no record matches the known action {:.9} of axis {}",
                kf.action, kf.axis
            )));
        }
    }

    write_text(&out_path(cfg, "fixed_points.csv"), &records_to_csv(&records))?;
    write_text(&out_path(cfg, "fixed_points.json"), &records_to_json(&records)?)?;
    let summary = FixedPointsSummary {
        command: "fixed-points",
        fixture: fixture.name.clone(),
        d: fixture.base_dim,
        n1: fixture.n1,
        n2: cfg.n2,
        epsilon: cfg.epsilon,
        rng_seed: cfg.rng_seed,
        tolerances: &cfg.tolerances,
        record_count: records.len(),
        spectrum: action_spectrum(&records),
        max_nullity,
        max_residual,
    };
    write_json(&out_path(cfg, "fixed_points_summary.json"), &summary)?;
    println!(
        "fixed-points: {} records, {} spectrum values, max nullity {}",
        summary.record_count,
        summary.spectrum.len(),
        max_nullity
    );
    Ok(())
}

fn build_path(cfg: &ExperimentConfig, fixture: &Fixture) -> Result<SymplecticPath> {
    match cfg.maslov.path.as_str() {
        "full_rotation" => SymplecticPath::unitary_diagonal_path(&[1.0]),
        "negative_full_turn" => {
            SymplecticPath::unitary_diagonal_path(&vec![-1.0; fixture.base_dim + 1])
        }
        "hyperbolic" => SymplecticPath::hyperbolic(0.3),
        "axis" => {
            let (t, off) = axis_rotation(&fixture.tuple, cfg.maslov.axis)?;
            if off > 1e-9 {
                return Err(GfError::Config(format!(
                    "axis {} is not invariant (off-axis {off:.3e})",
                    cfg.maslov.axis
                )));
            }
            let x = axis_vector(cfg.maslov.axis, fixture.base_dim + 1);
            let class = FixedPointClass::new(&fixture.tuple, &x, t)?;
            class.twisted_iterate_path(1)
        }
        other => Err(GfError::Config(format!("unknown maslov path {other:?}"))),
    }
}

/// Scans the iterate table against the Bott bounds using the supplied
/// mean; `bott_check` performs the honest version internally, so this
/// extra pass only matters for the injected-fault negative control.
fn scan_iterates(report: &IndexReport, mean: f64, d: f64, slack: f64) -> Result<()> {
    for row in &report.iterates {
        let k = row.k as f64;
        let lower = k * mean - 2.0 * d - slack;
        let upper = k * mean + 2.0 * d + slack;
        if (row.mas as f64) < lower || (row.mas + row.nullity as i64) as f64 > upper {
            return Err(GfError::InvariantViolation(format!(
                "iterate inequality failed at k = {}: mas = {}, nullity = {}, mean = {mean:.6}",
                row.k, row.mas, row.nullity
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct MaslovSummary<'a> {
    command: &'static str,
    path: String,
    kmax: usize,
    mean_k: usize,
    mmax: usize,
    tolerances: &'a BTreeMap<String, f64>,
    mas: i64,
    mean: f64,
    mean_error_bar: f64,
    axis_tables: Vec<AxisTable>,
}

#[derive(Serialize)]
struct AxisTable {
    axis: usize,
    action: f64,
    rows: Vec<IterateIdentityRow>,
}

/// Index report for the configured path plus per-axis iterate-identity
/// tables of the fixture.
pub fn cmd_maslov(cfg: &ExperimentConfig) -> Result<()> {
    let fixture = cfg.build_fixture()?;
    let path = build_path(cfg, &fixture)?;
    let report = bott_check(&path, cfg.maslov.kmax)?;

    let d = path.complex_dim() as f64;
    let mean = if cfg.maslov.inject_bott_fault {
        -report.mean - 1.5
    } else {
        report.mean
    };
    scan_iterates(&report, mean, d, cfg.tol("bott_slack"))?;

    let mut axis_tables = Vec::new();
    for kf in &fixture.known_fixed_points {
        let (t, off) = axis_rotation(&fixture.tuple, kf.axis)?;
        if off > 1e-9 {
            continue;
        }
        let x = axis_vector(kf.axis, fixture.base_dim + 1);
        let class = FixedPointClass::new(&fixture.tuple, &x, t)?;
        let rows = iterated_index_identity(&class, cfg.maslov.mmax, cfg.maslov.mean_k)?;
        axis_tables.push(AxisTable {
            axis: kf.axis,
            action: t,
            rows,
        });
    }

    write_json(&out_path(cfg, "maslov_report.json"), &report)?;
    let summary = MaslovSummary {
        command: "maslov",
        path: cfg.maslov.path.clone(),
        kmax: cfg.maslov.kmax,
        mean_k: cfg.maslov.mean_k,
        mmax: cfg.maslov.mmax,
        tolerances: &cfg.tolerances,
        mas: report.mas,
        mean: report.mean,
        mean_error_bar: report.mean_error_bar,
        axis_tables,
    };
    write_json(&out_path(cfg, "maslov_summary.json"), &summary)?;
    println!(
        "maslov: mas = {}, mean = {:.6} +- {:.6}, {} axis tables",
        report.mas, report.mean, report.mean_error_bar, summary.axis_tables.len()
    );
    Ok(())
}

fn isolation_estimate(fixture: &Fixture, axis: usize) -> Option<f64> {
    let dim = fixture.base_dim + 1;
    let x = axis_vector(axis, dim);
    fixture
        .known_fixed_points
        .iter()
        .filter(|kf| kf.axis != axis)
        .map(|kf| {
            let y = axis_vector(kf.axis, dim);
            let overlap = hermitian_inner(&x, &y).norm().min(1.0);
            0.5 * (2.0 - 2.0 * overlap).max(0.0).sqrt()
        })
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.min(v)))
        })
}

#[derive(Serialize)]
struct CrossingSummary<'a> {
    command: &'static str,
    fixture: String,
    axis: usize,
    r: f64,
    m_list: &'a [usize],
    seeds_per_m: usize,
    rng_seed: u64,
    tolerances: &'a BTreeMap<String, f64>,
    c_min: Vec<(usize, Option<f64>)>,
    c_inf: Option<f64>,
    crossings: usize,
}

/// Runs the crossing experiment around the configured axis.
pub fn cmd_crossing(cfg: &ExperimentConfig) -> Result<()> {
    let fixture = cfg.build_fixture()?;
    let family = family_of(cfg, &fixture)?;

    if let Some(est) = isolation_estimate(&fixture, cfg.crossing.axis) {
        if cfg.r > est {
            eprintln!(
                "warning: r = {} exceeds the isolation estimate {est:.3} \
                 (neighborhoods of distinct orbits may overlap); running anyway",
                cfg.r
            );
        }
    }

    let x = axis_vector(cfg.crossing.axis, fixture.base_dim + 1);
    let config = CrossingConfig {
        r: cfg.r,
        m_list: cfg.m_list.clone(),
        seeds_per_m: cfg.seeds,
        rng_seed: cfg.rng_seed,
        max_steps: cfg.crossing.max_steps,
        max_time: cfg.crossing.max_time,
        ..CrossingConfig::default()
    };
    let table = crossing_experiment(&family, &x, &config)?;

    write_text(&out_path(cfg, "crossing.csv"), &table.to_csv())?;
    let crossings = table.rows.iter().filter(|r| r.crossed).count();
    let summary = CrossingSummary {
        command: "crossing",
        fixture: fixture.name.clone(),
        axis: cfg.crossing.axis,
        r: cfg.r,
        m_list: &cfg.m_list,
        seeds_per_m: cfg.seeds,
        rng_seed: cfg.rng_seed,
        tolerances: &cfg.tolerances,
        c_min: table.c_min.clone(),
        c_inf: table.c_inf,
        crossings,
    };
    write_json(&out_path(cfg, "crossing_summary.json"), &summary)?;
    println!(
        "crossing: {} rows, {} crossings, c_inf = {:?}",
        table.rows.len(),
        crossings,
        table.c_inf
    );
    Ok(())
}

#[derive(Serialize)]
struct CheckRow {
    check: String,
    fixture: String,
    pass: bool,
    detail: String,
}

#[derive(Serialize)]
struct VerifySummary<'a> {
    command: &'static str,
    tolerances: &'a BTreeMap<String, f64>,
    checks: Vec<CheckRow>,
    passed: usize,
    failed: usize,
}

fn push_check(rows: &mut Vec<CheckRow>, check: &str, fixture: &str, result: Result<String>) {
    let (pass, detail) = match result {
        Ok(detail) => (true, detail),
        Err(e) => (false, e.to_string()),
    };
    if !pass {
        eprintln!("verify: {check} failed on {fixture}: {detail}");
    }
    rows.push(CheckRow {
        check: check.into(),
        fixture: fixture.into(),
        pass,
        detail,
    });
}

fn tau_identity_check(samples: usize, seed: u64, flip: bool, tol: f64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let a = sample_sphere(6, &mut rng);
        let b = sample_sphere(6, &mut rng);
        let ja = if flip { -mul_i(&a) } else { mul_i(&a) };
        let gap = (hermitian_inner(&a, &b).im - ja.dot(&b)).abs();
        worst = worst.max(gap);
    }
    if worst > tol {
        return Err(GfError::InvariantViolation(format!(
            "tau identity: Im<a,b> differs from <i a, b> by {worst:.3e}"
        )));
    }
    Ok(format!("worst residual {worst:.3e}"))
}

fn verify_fixture(
    cfg: &ExperimentConfig,
    rows: &mut Vec<CheckRow>,
    fixture: &Fixture,
    samples: usize,
) {
    let name = fixture.name.clone();
    push_check(
        rows,
        "axis_invariance",
        &name,
        fixture.verify_axes().map(|_| "all axes invariant".into()),
    );
    let cert = lift_validate(fixture.field.as_ref());
    push_check(
        rows,
        "conical_lift",
        &name,
        if cert.pass {
            Ok(format!(
                "homogeneity {:.2e}, euler {:.2e}, s1 {:.2e}",
                cert.worst_homogeneity, cert.worst_euler, cert.worst_s1
            ))
        } else {
            Err(GfError::InvariantViolation(format!(
                "lift hypotheses fail: homogeneity {:.2e}, euler {:.2e}, s1 {:.2e}",
                cert.worst_homogeneity, cert.worst_euler, cert.worst_s1
            )))
        },
    );

    let family = match family_of(cfg, fixture) {
        Ok(f) => f,
        Err(e) => {
            push_check(rows, "family_build", &name, Err(e));
            return;
        }
    };
    push_check(
        rows,
        "conical_sampling",
        &name,
        family
            .validate(samples, cfg.rng_seed)
            .map(|worst| format!("worst relative defect {worst:.3e}")),
    );

    let records = match critical_points(
        &family,
        &SeedStrategy {
            axes: true,
            random: 8,
            rng_seed: cfg.rng_seed,
        },
    ) {
        Ok(r) => r,
        Err(e) => {
            push_check(rows, "critical_points", &name, Err(e));
            return;
        }
    };
    push_check(
        rows,
        "critical_points",
        &name,
        Ok(format!("{} records", records.len())),
    );
    push_check(
        rows,
        "deformation_monotonicity",
        &name,
        delta_monotonicity(&family, &records, samples, cfg.rng_seed).map(|rep| {
            format!(
                "max dt {:.2e}, critical margin {:.2e}",
                rep.max_dt, rep.critical_margin
            )
        }),
    );
    for rec in &records {
        push_check(
            rows,
            "kernel_correspondence",
            &name,
            kernel_correspondence(&family, rec)
                .map(|(a, b)| format!("t = {:.4}: nullities {a} = {b}", rec.t)),
        );
        if rec.nullity == 0 {
            push_check(
                rows,
                "recap_shift",
                &name,
                recap_shift(&family, rec)
                    .map(|(i0, i1)| format!("t = {:.4}: {i0} -> {i1}", rec.t)),
            );
        }
    }
}

/// Runs the verification suites over the corpus.
pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<()> {
    let corpus: Vec<FixtureChoice> = match &cfg.verify.corpus {
        Some(list) if list.is_empty() => {
            return Err(GfError::Config("verify corpus is empty".into()));
        }
        Some(list) => list.clone(),
        None => vec![
            FixtureChoice::Named("zero".into()),
            FixtureChoice::Named("pseudo_rotation".into()),
            FixtureChoice::Named("hyperbolic".into()),
        ],
    };
    let samples = cfg.verify.samples.unwrap_or(40);

    let mut rows = Vec::new();
    push_check(
        rows.as_mut(),
        "tau_identity",
        "-",
        tau_identity_check(
            200,
            cfg.rng_seed,
            cfg.verify.inject_tau_flip,
            cfg.tol("tau_identity"),
        ),
    );
    push_check(
        rows.as_mut(),
        "sphere_rescaling",
        "-",
        verify_pm(11, 4, samples, cfg.rng_seed).map(|_| "sup norms in [1/2, 1]".into()),
    );

    // Path-algebra identities on seeded random unitary pairs.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    for trial in 0..3 {
        let speeds_r: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let speeds_s: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let result = SymplecticPath::unitary_diagonal_path(&speeds_r)
            .and_then(|r| {
                let s = SymplecticPath::unitary_diagonal_path(&speeds_s)?;
                path_properties_suite(&r, &s)
            })
            .and_then(|rep| {
                if rep.all_pass() {
                    Ok("five identities hold".to_string())
                } else {
                    Err(GfError::InvariantViolation(format!(
                        "path identities failed: {rep:?}"
                    )))
                }
            });
        push_check(rows.as_mut(), "path_properties", &format!("pair {trial}"), result);
    }

    for choice in &corpus {
        let mut sub = cfg.clone();
        sub.fixture = choice.clone();
        match sub.build_fixture() {
            Ok(fixture) => verify_fixture(&sub, &mut rows, &fixture, samples),
            Err(e) => push_check(&mut rows, "fixture_build", "-", Err(e)),
        }
    }

    let passed = rows.iter().filter(|r| r.pass).count();
    let failed = rows.len() - passed;
    let summary = VerifySummary {
        command: "verify",
        tolerances: &cfg.tolerances,
        checks: rows,
        passed,
        failed,
    };
    write_json(&out_path(cfg, "verify_summary.json"), &summary)?;
    println!("verify: {passed} checks passed, {failed} failed");
    if failed > 0 {
        let first = summary
            .checks
            .iter()
            .find(|r| !r.pass)
            .map(|r| r.check.clone())
            .unwrap_or_default();
        return Err(GfError::InvariantViolation(format!(
            "{failed} verification checks failed (first: {first})"
        )));
    }
    Ok(())
}

/// Maps an error to the process exit code: usage and environment problems
/// are 2, failed mathematics is 1.
pub fn exit_code(err: &GfError) -> i32 {
    match err {
        GfError::Config(_)
        | GfError::Io(_)
        | GfError::Serde(_)
        | GfError::Parity(_)
        | GfError::ResourceCap(_)
        | GfError::DimensionMismatch(_) => 2,
        _ => 1,
    }
}
