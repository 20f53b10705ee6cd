//! Experiment configuration, read from a TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use eikonal_twin::anatomy::AnatomyParams;
use eikonal_twin::eikonal::EikonalConfig;
use eikonal_twin::feasible::{ConstraintMode, ConstraintSpec};
use eikonal_twin::fem::{CgConfig, ConductivityTable};
use eikonal_twin::leads::{LeadLayout, Placement};
use eikonal_twin::optimizer::OptimizerConfig;
use eikonal_twin::pipeline::TargetSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::{config_error, Failure};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSection {
    /// Existing mesh file; when absent, `genmesh` output under the run
    /// directory is used.
    pub path: Option<PathBuf>,
    pub params: AnatomyParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeadsSection {
    pub layouts: Vec<LeadLayout>,
    pub placement: Placement,
    pub conductivities: ConductivityTable,
    pub cg: CgConfig,
}

impl Default for LeadsSection {
    fn default() -> Self {
        LeadsSection {
            layouts: vec![LeadLayout::Ecg12],
            placement: Placement::default(),
            conductivities: ConductivityTable::default(),
            cg: CgConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    /// Target fitted by `fit`, `ensemble` and `sweep`; the first configured
    /// layout if unset.
    pub layout: Option<LeadLayout>,
    /// PMJ file (`pmj_id,x,y,z,t_ms,active`) used as the starting set of
    /// `fit` instead of a random draw.
    pub initial: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub count: usize,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection { count: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub n: Vec<usize>,
    pub runs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            n: vec![1, 10, 50, 100, 300],
            runs: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mesh: MeshSection,
    pub leads: LeadsSection,
    pub target: TargetSpec,
    pub eikonal: EikonalConfig,
    pub constraint: ConstraintSpec,
    pub optimizer: OptimizerConfig,
    pub fit: FitSection,
    pub ensemble: EnsembleSection,
    pub sweep: SweepSection,
}

/// A parsed config plus what is needed to reproduce it.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// SHA-256 of the file bytes, hex encoded.
    pub hash: String,
    pub path: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| config_error(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<LoadedConfig, Failure> {
        let bytes = fs::read(path).map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| config_error(format!("config {} is not UTF-8", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(p) = config.mesh.path.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
        if let Some(p) = config.fit.initial.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
        if let Some(p) = config.out.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
        Ok(LoadedConfig {
            config,
            hash: sha256_hex(&bytes),
            path: path.to_path_buf(),
        })
    }

    /// Checks every section; the first problem is reported.
    pub fn validate(&self) -> Result<(), Failure> {
        if self.mesh.path.is_none() {
            self.mesh.params.validate()?;
        }
        if self.leads.layouts.is_empty() {
            return Err(config_error("leads.layouts must name at least one layout"));
        }
        self.leads.conductivities.validate()?;
        if !(self.leads.cg.tolerance > 0.0) || self.leads.cg.max_iters == 0 {
            return Err(config_error("leads.cg needs tolerance > 0 and max_iters >= 1"));
        }
        self.target.validate()?;
        self.constraint.validate()?;
        self.optimizer.validate()?;
        if !(self.eikonal.tolerance > 0.0) || self.eikonal.max_iters == 0 || !(self.eikonal.seed_radius >= 0.0) {
            return Err(config_error("eikonal needs tolerance > 0, max_iters >= 1 and seed_radius >= 0"));
        }
        if let Some(l) = self.fit.layout {
            if !self.leads.layouts.contains(&l) {
                return Err(config_error(format!("fit.layout {l} is not listed in leads.layouts")));
            }
        }
        if self.ensemble.count == 0 || self.sweep.runs == 0 {
            return Err(config_error("ensemble.count and sweep.runs must be at least 1"));
        }
        if self.sweep.n.is_empty() || self.sweep.n.contains(&0) {
            return Err(config_error("sweep.n must list PMJ counts of at least 1"));
        }
        Ok(())
    }

    pub fn fit_layout(&self) -> LeadLayout {
        self.fit.layout.unwrap_or(self.leads.layouts[0])
    }
}

/// Label used in directory names and reports.
pub fn constraint_label(mode: ConstraintMode) -> &'static str {
    match mode {
        ConstraintMode::Band => "restricted",
        ConstraintMode::Unrestricted => "unrestricted",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.optimizer.iterations, 400);
        c.validate().unwrap();
    }

    #[test]
    fn sections_parse() {
        let c = ExperimentConfig::from_toml(
            r#"
seed = 7
[mesh.params]
heart_h = 2.0
[leads]
layouts = ["limb4", "vest64"]
[constraint]
mode = "unrestricted"
[optimizer]
iterations = 10
n_pmj = 5
[fit]
layout = "vest64"
[sweep]
n = [1, 2]
"#,
        )
        .unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.mesh.params.heart_h, 2.0);
        assert_eq!(c.fit_layout(), LeadLayout::Vest(64));
        assert_eq!(c.constraint.mode, ConstraintMode::Unrestricted);
        assert_eq!(c.sweep.n, vec![1, 2]);
        c.validate().unwrap();
    }

    #[test]
    fn typos_and_bad_values_are_config_errors() {
        assert!(ExperimentConfig::from_toml("[optimizer]\nlearning_rat = 1.0").is_err());
        assert!(ExperimentConfig::from_toml("[leads]\nlayouts = [\"vest7\"]").is_err());
        let c = ExperimentConfig::from_toml("[optimizer]\nlearning_rate = -1.0").unwrap();
        assert_eq!(c.validate().unwrap_err().code(), 2);
        let c = ExperimentConfig::from_toml("[mesh.params]\nouter_radius = 0.0").unwrap();
        assert_eq!(c.validate().unwrap_err().code(), 2);
        let c = ExperimentConfig::from_toml("[fit]\nlayout = \"limb4\"").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_is_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
