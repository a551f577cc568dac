//! Experiment configuration: a single JSON document with defaults for
//! every field, validated on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use gfdyn::hamdiff::{
    hyperbolic_fixture_with, pseudo_rotation_fixture_with_steps, zero_fixture, Fixture,
    FixtureDoc,
};
use gfdyn::{GfError, Result};

/// Fixture selection: a named builder or an inline document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FixtureChoice {
    Named(String),
    Inline(FixtureDoc),
}

impl Default for FixtureChoice {
    fn default() -> Self {
        FixtureChoice::Named("hyperbolic".into())
    }
}

/// Index-report controls for the maslov subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MaslovSection {
    /// One of full_rotation, negative_full_turn, hyperbolic, axis.
    pub path: String,
    /// Iterates checked by the Bott inequalities.
    pub kmax: usize,
    /// Denominator for the mean-index estimate.
    pub mean_k: usize,
    /// Largest iterate in the per-axis index-identity table.
    pub mmax: usize,
    /// Axis used when path = "axis".
    pub axis: usize,
    /// Negative control: corrupt the mean before the inequality scan.
    pub inject_bott_fault: bool,
}

impl Default for MaslovSection {
    fn default() -> Self {
        Self {
            path: "full_rotation".into(),
            kmax: 12,
            mean_k: 40,
            mmax: 8,
            axis: 0,
            inject_bott_fault: false,
        }
    }
}

/// Crossing-experiment controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossingSection {
    /// Fixed axis whose neighborhood is probed.
    pub axis: usize,
    pub max_steps: usize,
    pub max_time: f64,
}

impl Default for CrossingSection {
    fn default() -> Self {
        Self {
            axis: 0,
            max_steps: 40_000,
            max_time: 400.0,
        }
    }
}

/// Verification-suite controls.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct VerifySection {
    /// Fixtures to verify; absent means the built-in corpus, an explicit
    /// empty list is a usage error.
    pub corpus: Option<Vec<FixtureChoice>>,
    /// Sample count for the sampled identities.
    pub samples: Option<usize>,
    /// Negative control: flip the sign of the complex structure in the
    /// tau identity check.
    pub inject_tau_flip: bool,
}

/// The whole configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub fixture: FixtureChoice,
    /// Base complex dimension of the projective space.
    pub d: usize,
    /// Rotation angles for the pseudo-rotation builder (d+1 entries).
    pub angles: Option<Vec<f64>>,
    /// Saddle fixture parameters.
    pub hyperbolic_c: f64,
    pub hyperbolic_b: f64,
    /// Steps in the sigma-tuple (even).
    pub n1: usize,
    /// Steps in the rotation block (odd, at least 5).
    pub n2: usize,
    pub epsilon: f64,
    pub m_list: Vec<usize>,
    /// Neighborhood radius for the crossing experiment.
    pub r: f64,
    /// Random seeds per experiment unit.
    pub seeds: usize,
    pub rng_seed: u64,
    pub out_dir: String,
    pub tolerances: BTreeMap<String, f64>,
    pub maslov: MaslovSection,
    pub crossing: CrossingSection,
    pub verify: VerifySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            fixture: FixtureChoice::default(),
            d: 1,
            angles: None,
            hyperbolic_c: 0.1,
            hyperbolic_b: 0.25,
            n1: 6,
            n2: 5,
            epsilon: 0.05,
            m_list: vec![1, 2, 3, 4],
            r: 0.2,
            seeds: 32,
            rng_seed: 0x5EED,
            out_dir: "out".into(),
            tolerances: BTreeMap::new(),
            maslov: MaslovSection::default(),
            crossing: CrossingSection::default(),
            verify: VerifySection::default(),
        }
    }
}

/// Tolerances with their defaults; the summary of every subcommand echoes
/// the merged table.
pub fn default_tolerances() -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("action_match".into(), 1e-8),
        ("bott_slack".into(), 1e-9),
        ("level_drift".into(), gfdyn::crossing::LEVEL_DRIFT_MAX),
        ("monotonicity".into(), 1e-12),
        ("record_residual".into(), gfdyn::cpaction::RECORD_RESIDUAL_MAX),
        ("tau_identity".into(), 1e-12),
    ])
}

impl ExperimentConfig {
    /// Loads and validates a config file; a missing path yields defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg: ExperimentConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text)
                    .map_err(|e| GfError::Config(format!("config parse: {e}")))?
            }
            None => ExperimentConfig::default(),
        };
        let defaults = default_tolerances();
        for key in cfg.tolerances.keys() {
            if !defaults.contains_key(key) {
                return Err(GfError::Config(format!("unknown tolerance key {key}")));
            }
        }
        let mut merged = defaults;
        merged.extend(cfg.tolerances.clone());
        cfg.tolerances = merged;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a --tol-override flag.
    pub fn override_tolerance(&mut self, key: &str, value: f64) -> Result<()> {
        if !self.tolerances.contains_key(key) {
            return Err(GfError::Config(format!("unknown tolerance key {key}")));
        }
        self.tolerances.insert(key.into(), value);
        Ok(())
    }

    pub fn tol(&self, key: &str) -> f64 {
        self.tolerances[key]
    }

    fn validate(&self) -> Result<()> {
        if self.n1 < 2 || self.n1 % 2 != 0 {
            return Err(GfError::Config(format!(
                "n1 = {} must be even and at least 2",
                self.n1
            )));
        }
        if self.n2 < 5 || self.n2 % 2 == 0 {
            return Err(GfError::Config(format!(
                "n2 = {} must be odd and at least 5",
                self.n2
            )));
        }
        if !(0.0..0.5).contains(&self.epsilon) {
            return Err(GfError::Config(format!(
                "epsilon = {} must lie in [0, 0.5)",
                self.epsilon
            )));
        }
        if self.r <= 0.0 {
            return Err(GfError::Config("r must be positive".into()));
        }
        if self.m_list.is_empty() {
            return Err(GfError::Config("m_list must not be empty".into()));
        }
        if self.m_list.iter().any(|&m| m == 0) {
            return Err(GfError::Config("m_list entries must be positive".into()));
        }
        if self.seeds == 0 {
            return Err(GfError::Config("seeds must be positive".into()));
        }
        if let Some(angles) = &self.angles {
            if angles.len() != self.d + 1 {
                return Err(GfError::Config(format!(
                    "angles has {} entries but d+1 = {}",
                    angles.len(),
                    self.d + 1
                )));
            }
        }
        let known_paths = ["full_rotation", "negative_full_turn", "hyperbolic", "axis"];
        if !known_paths.contains(&self.maslov.path.as_str()) {
            return Err(GfError::Config(format!(
                "unknown maslov path {:?}",
                self.maslov.path
            )));
        }
        Ok(())
    }

    /// Golden-ratio angle ladder used when no angles are configured:
    /// pairwise distinct and far from low rationals.
    pub fn effective_angles(&self) -> Vec<f64> {
        match &self.angles {
            Some(a) => a.clone(),
            None => {
                let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
                (1..=self.d + 1).map(|j| (j as f64 * phi) % 1.0).collect()
            }
        }
    }

    /// Builds the configured fixture.
    pub fn build_fixture(&self) -> Result<Fixture> {
        match &self.fixture {
            FixtureChoice::Named(name) => match name.as_str() {
                "zero" => zero_fixture(self.d, self.n1),
                "pseudo_rotation" => {
                    pseudo_rotation_fixture_with_steps(&self.effective_angles(), self.n1)
                }
                "hyperbolic" => {
                    hyperbolic_fixture_with(self.hyperbolic_c, self.hyperbolic_b, self.n1)
                }
                other => Err(GfError::Config(format!("unknown fixture {other:?}"))),
            },
            FixtureChoice::Inline(doc) => Fixture::from_doc(doc),
        }
    }
}

/// Parses a k=v flag value.
pub fn parse_tol_override(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let value: f64 = v.parse().map_err(|e| format!("bad value in {s:?}: {e}"))?;
    Ok((k.to_string(), value))
}
