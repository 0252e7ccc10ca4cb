use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dgm::{SpreadReading, CALIBRATION_TOLERANCE, SUPERPOPULATION_N};
use crate::error::{Error, Result};
use crate::model::{Anchoring, EstimatorSpec, Method};

pub const COVARIATES: [&str; 2] = ["x1", "x2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Desk-scale run: 200 iterations, 200 bootstrap replicates and a
    /// population of 2e5.
    Quick,
    /// 2000 iterations, 2000 bootstrap replicates, population of 2e6.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quick" => Ok(Preset::Quick),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Invalid(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub dgms: Vec<u8>,
    pub iterations: usize,
    pub n_per_arm: usize,
    /// Size of the population each DGM's trials are drawn from.
    pub superpop_n: usize,
    pub calibration_n: usize,
    pub calibration_tol: f64,
    /// Population size for the true effect.
    pub truth_n: usize,
    pub bootstrap: usize,
    pub methods: Vec<Method>,
    pub anchorings: Vec<Anchoring>,
    pub adjustment_sets: Vec<Vec<String>>,
    pub base_seed: u64,
    /// 0 uses every available core.
    pub workers: usize,
    pub spread: SpreadReading,
    pub dump_bootstrap: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self::preset(Preset::Paper)
    }
}

impl StudyConfig {
    pub fn preset(preset: Preset) -> Self {
        let (iterations, bootstrap, superpop_n) = match preset {
            Preset::Quick => (200, 200, 200_000),
            Preset::Paper => (2000, 2000, SUPERPOPULATION_N),
        };
        Self {
            dgms: (1..=8).collect(),
            iterations,
            n_per_arm: 250,
            superpop_n,
            calibration_n: SUPERPOPULATION_N,
            calibration_tol: CALIBRATION_TOLERANCE,
            truth_n: SUPERPOPULATION_N,
            bootstrap,
            methods: Method::ALL.to_vec(),
            anchorings: vec![Anchoring::Anchored, Anchoring::Unanchored],
            adjustment_sets: vec![vec!["x1".into()], vec!["x2".into()], vec!["x1".into(), "x2".into()]],
            base_seed: 20_240_601,
            workers: 0,
            spread: SpreadReading::default(),
            dump_bootstrap: false,
        }
    }

    /// Parses a TOML file of flat keys. Keys that are absent keep the
    /// values of `self`.
    pub fn merge_toml(&self, text: &str) -> Result<Self> {
        let mut base = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let overrides: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            base.insert(k, v);
        }
        let merged: Self = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        merged.validate()?;
        Ok(merged)
    }

    pub fn merge_toml_file(&self, path: &Path) -> Result<Self> {
        self.merge_toml(&crate::io::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("iterations", self.iterations),
            ("n_per_arm", self.n_per_arm),
            ("superpop_n", self.superpop_n),
            ("calibration_n", self.calibration_n),
            ("truth_n", self.truth_n),
            ("bootstrap", self.bootstrap),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.bootstrap < 2 {
            return Err(Error::Config("bootstrap needs at least 2 replicates".into()));
        }
        if self.calibration_tol.is_nan() || self.calibration_tol <= 0.0 {
            return Err(Error::Config("calibration_tol must be positive".into()));
        }
        if self.dgms.is_empty() || self.dgms.iter().any(|d| !(1..=8).contains(d)) {
            return Err(Error::Config(format!(
                "dgms must be a non-empty subset of 1..8, got {:?}",
                self.dgms
            )));
        }
        if self.methods.is_empty() || self.anchorings.is_empty() {
            return Err(Error::Config("methods and anchorings must be non-empty".into()));
        }
        let weighted = self.methods.iter().any(|m| m.is_weighted());
        if weighted && self.adjustment_sets.is_empty() {
            return Err(Error::Config(
                "weighted methods need at least one adjustment set".into(),
            ));
        }
        for set in &self.adjustment_sets {
            if set.is_empty() || set.iter().any(|c| !COVARIATES.contains(&c.as_str())) {
                return Err(Error::Config(format!(
                    "adjustment sets must be non-empty subsets of {{x1, x2}}, got {set:?}"
                )));
            }
        }
        Ok(())
    }

    /// Estimators run in every iteration, ordered by anchoring, then method,
    /// then adjustment set. The unweighted method appears once per anchoring.
    pub fn grid(&self) -> Vec<EstimatorSpec> {
        let mut grid = Vec::new();
        for &anchoring in &self.anchorings {
            for &method in &self.methods {
                if method.is_weighted() {
                    for set in &self.adjustment_sets {
                        grid.push(EstimatorSpec {
                            method,
                            anchoring,
                            adjustment_set: set.clone(),
                        });
                    }
                } else {
                    grid.push(EstimatorSpec {
                        method,
                        anchoring,
                        adjustment_set: Vec::new(),
                    });
                }
            }
        }
        grid
    }

    pub fn worker_count(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grid_has_twenty_cells() {
        let grid = StudyConfig::default().grid();
        assert_eq!(grid.len(), 20);
        assert!(grid.iter().all(|s| s.validate().is_ok()));
        assert_eq!(grid.iter().filter(|s| s.method == Method::Unweighted).count(), 2);
    }

    #[test]
    fn toml_overrides_only_named_keys() {
        let base = StudyConfig::preset(Preset::Quick);
        let cfg = base
            .merge_toml("iterations = 7\nmethods = [\"maic2\"]\nadjustment_sets = [[\"x2\"]]\n")
            .unwrap();
        assert_eq!(cfg.iterations, 7);
        assert_eq!(cfg.methods, vec![Method::Maic2]);
        assert_eq!(cfg.bootstrap, base.bootstrap);
        assert_eq!(cfg.grid().len(), 2);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let base = StudyConfig::preset(Preset::Quick);
        assert!(base.merge_toml("iterations = 0").is_err());
        assert!(base.merge_toml("adjustment_sets = [[\"x3\"]]").is_err());
        assert!(base.merge_toml("dgms = [9]").is_err());
        assert!(base.merge_toml("no_such_key = 1").is_err());
    }
}
