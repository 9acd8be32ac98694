//! Experiment configuration shared by the CLI and the library runner.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::solver::SolverOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    GammaFit,
    GmVerify,
    Census,
    Tail,
    GmcYm,
    GmcSpectral,
    Compare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub dim: usize,
    pub lambda: f64,
    /// Box sides `N` (one or more, depending on the experiment).
    pub sizes: Vec<i64>,
    pub replicas: usize,
    /// Truncation constant `M`; when set, level-set statistics also report
    /// how often the truncation event holds.
    pub truncation_m: Option<f64>,
    /// Dyadic depth `m` for `Y_m`.
    pub depth_m: u32,
    /// Spectral mode count; `None` means all modes.
    pub modes: Option<usize>,
    pub master_seed: u64,
    pub solver: SolverOptions,
    /// Interior margin `ε`: `D_N^ε` for the census, `[ε, 1−ε)^d` for tail fits.
    pub margin: Option<f64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Defaults for each experiment kind.
    pub fn new(kind: ExperimentKind) -> Self {
        let (sizes, replicas, lambda) = match kind {
            ExperimentKind::GammaFit => (vec![8, 12, 16, 24, 32], 1, 0.5),
            ExperimentKind::GmVerify => (vec![10], 200, 0.5),
            ExperimentKind::Census => (vec![8, 12, 16], 500, 0.5),
            ExperimentKind::Tail => (vec![16], 500, 0.3),
            ExperimentKind::GmcYm => (vec![16], 500, 0.3),
            ExperimentKind::GmcSpectral => (vec![10], 1000, 0.3),
            ExperimentKind::Compare => (vec![12], 500, 0.3),
        };
        ExperimentConfig {
            kind,
            dim: 4,
            lambda,
            sizes,
            replicas,
            truncation_m: None,
            depth_m: if kind == ExperimentKind::GmcYm { 2 } else { 1 },
            modes: None,
            master_seed: 0,
            solver: SolverOptions::default(),
            margin: None,
            out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidParameter(m));
        if self.replicas == 0 {
            return bad("replicas must be at least 1".into());
        }
        if self.sizes.is_empty() || self.sizes.iter().any(|&n| n < 2) {
            return bad(format!("sizes {:?} must be nonempty and at least 2", self.sizes));
        }
        let four_d = !matches!(self.kind, ExperimentKind::GmVerify);
        if self.dim == 0 || (four_d && self.dim != 4) {
            return bad(format!("{:?} runs in dimension 4, got {}", self.kind, self.dim));
        }
        let needs_lambda = matches!(
            self.kind,
            ExperimentKind::Census | ExperimentKind::Tail | ExperimentKind::GmcYm | ExperimentKind::Compare
        );
        if needs_lambda && !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad(format!("lambda = {} is not in (0, 1)", self.lambda));
        }
        if self.kind == ExperimentKind::GmcSpectral && !(self.lambda >= 0.0 && self.lambda < 1.0) {
            return bad(format!("lambda = {} is not in [0, 1)", self.lambda));
        }
        if let Some(eps) = self.margin {
            if !(0.0..0.5).contains(&eps) {
                return bad(format!("margin {eps} is not in [0, 1/2)"));
            }
        }
        if let Some(m) = self.truncation_m {
            if !(m > 0.0) {
                return bad(format!("truncation M = {m} must be positive"));
            }
        }
        if matches!(self.kind, ExperimentKind::GammaFit | ExperimentKind::Census) && self.sizes.len() < 3 {
            return bad(format!("{:?} needs at least 3 sizes", self.kind));
        }
        if self.kind == ExperimentKind::GmcYm && self.depth_m == 0 {
            return bad("depth m must be at least 1".into());
        }
        if !(self.solver.iterative_tol > 0.0 && self.solver.dense_tol > 0.0) {
            return bad("solver tolerances must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for k in [
            ExperimentKind::GammaFit,
            ExperimentKind::GmVerify,
            ExperimentKind::Census,
            ExperimentKind::Tail,
            ExperimentKind::GmcYm,
            ExperimentKind::GmcSpectral,
            ExperimentKind::Compare,
        ] {
            ExperimentConfig::new(k).validate().unwrap();
        }
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = ExperimentConfig::new(ExperimentKind::Census);
        c.replicas = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::new(ExperimentKind::Tail);
        c.lambda = 1.2;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::new(ExperimentKind::Census);
        c.sizes = vec![8, 12];
        assert!(c.validate().is_err());
    }
}
