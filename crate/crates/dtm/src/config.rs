//! Run configuration: a single JSON document shared by the CLI subcommands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::problems::Problem;
use crate::{Error, Result};

fn default_tol_pod() -> f64 {
    1e-10
}
fn default_tol_eim() -> f64 {
    1e-14
}
fn default_tol_eq() -> f64 {
    1e-10
}
fn default_tol_es() -> f64 {
    1e-4
}
fn default_n_train() -> usize {
    50
}
fn default_n_train_eq() -> usize {
    10
}
fn default_n_train_r() -> usize {
    30
}
fn default_n_test() -> usize {
    20
}
fn default_output_dir() -> String {
    "out".into()
}

/// Offline/online run configuration. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Problem id (`study-1d`, `laplace-airfoil`, `burgers-bump`).
    pub problem: String,
    /// Mesh refinement level; the problem default when absent.
    #[serde(default)]
    pub refinement: Option<usize>,
    /// POD energy tolerance for the trial basis.
    #[serde(default = "default_tol_pod")]
    pub tol_pod: f64,
    /// POD energy tolerance for the datum compression.
    #[serde(default = "default_tol_eim")]
    pub tol_eim: f64,
    /// Empirical-quadrature residual tolerance.
    #[serde(default = "default_tol_eq")]
    pub tol_eq: f64,
    /// Test-space / estimator POD tolerance.
    #[serde(default = "default_tol_es")]
    pub tol_es: f64,
    /// Estimator quadrature residual tolerance.
    #[serde(default = "default_tol_eq")]
    pub tol_eq_r: f64,
    /// Training snapshot count.
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    /// Extra quadrature-training parameters (nonlinear problems).
    #[serde(default = "default_n_train_eq")]
    pub n_train_eq: usize,
    /// Estimator training parameters.
    #[serde(default = "default_n_train_r")]
    pub n_train_r: usize,
    /// Out-of-sample test parameters for the study drivers.
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Trial dimension override (`N`); the POD rule when absent.
    #[serde(default)]
    pub n_modes: Option<usize>,
    /// Test dimension override (`J`); `2 N` when absent.
    #[serde(default)]
    pub j_test: Option<usize>,
    /// RNG seed for all sampling stages.
    #[serde(default)]
    pub seed: u64,
    /// Directory the artifacts and CSV reports are written to.
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

impl RunConfig {
    /// Minimal configuration for a problem with all defaults.
    pub fn for_problem(id: &str) -> Self {
        serde_json::from_value(serde_json::json!({ "problem": id }))
            .expect("default configuration is valid")
    }

    /// Check tolerance ranges, counts, and the problem id.
    pub fn validate(&self) -> Result<()> {
        Problem::from_id(&self.problem)?;
        for (name, tol) in [
            ("tol_pod", self.tol_pod),
            ("tol_eim", self.tol_eim),
            ("tol_eq", self.tol_eq),
            ("tol_es", self.tol_es),
            ("tol_eq_r", self.tol_eq_r),
        ] {
            if !(tol > 0.0 && tol < 1.0) {
                return Err(Error::Config(format!("config: {name} = {tol} not in (0, 1)")));
            }
        }
        for (name, count) in [
            ("n_train", self.n_train),
            ("n_train_eq", self.n_train_eq),
            ("n_train_r", self.n_train_r),
            ("n_test", self.n_test),
        ] {
            if count == 0 {
                return Err(Error::Config(format!("config: {name} must be positive")));
            }
        }
        if self.refinement == Some(0) {
            return Err(Error::Config("config: refinement must be positive".into()));
        }
        if self.n_modes == Some(0) {
            return Err(Error::Config("config: n_modes must be positive".into()));
        }
        Ok(())
    }

    /// Parse and validate a JSON configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}
