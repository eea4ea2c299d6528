use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcs::{FcsVersion, ImputationSpec};
use crate::jm::JointModelSpec;
use crate::sim::{GenerationConfig, Hypothesis, MissingnessScenario};

/// Analysis applied to each replicated cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Joint model on the observed values, all-missing subgroup excluded.
    StandardJm,
    StandardFcsJm,
    ModifiedFcsJm,
    /// Joint model on the pre-mask values.
    FullyObservedJm,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Self::StandardJm,
        Self::StandardFcsJm,
        Self::ModifiedFcsJm,
        Self::FullyObservedJm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::StandardJm => "standard_jm",
            Self::StandardFcsJm => "standard_fcs_jm",
            Self::ModifiedFcsJm => "modified_fcs_jm",
            Self::FullyObservedJm => "fully_observed_jm",
        }
    }

    pub fn fcs_version(&self) -> Option<FcsVersion> {
        match self {
            Self::StandardFcsJm => Some(FcsVersion::Standard),
            Self::ModifiedFcsJm => Some(FcsVersion::Modified),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// n = 1000, 100 (H1) or 400 (H0) replications.
    Desk,
    /// n = 4000, 400 (H1) or 1600 (H0) replications.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub n_subjects: usize,
    pub n_replications: usize,
    pub scenario: MissingnessScenario,
    pub hypothesis: Hypothesis,
    pub methods: Vec<Method>,
    pub imputation: ImputationSpec,
    pub joint_model: JointModelSpec,
    /// Complete-data degrees of freedom for pooling; absent means the
    /// large-sample reference distribution.
    pub complete_df: Option<f64>,
    pub master_seed: u64,
    /// Not echoed: results do not depend on it.
    #[serde(skip_serializing)]
    pub n_workers: usize,
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk, MissingnessScenario::StrongNmar, Hypothesis::H1)
    }
}

impl StudyConfig {
    pub fn profile(profile: Profile, scenario: MissingnessScenario, hypothesis: Hypothesis) -> Self {
        let (n_subjects, n_replications, quadrature_order) = match (profile, hypothesis) {
            (Profile::Desk, Hypothesis::H1) => (1000, 100, 3),
            (Profile::Desk, Hypothesis::H0) => (1000, 400, 3),
            (Profile::Paper, Hypothesis::H1) => (4000, 400, 5),
            (Profile::Paper, Hypothesis::H0) => (4000, 1600, 5),
        };
        Self {
            n_subjects,
            n_replications,
            scenario,
            hypothesis,
            methods: Method::ALL.to_vec(),
            imputation: ImputationSpec {
                n_multiples: 5,
                n_iterations: 10,
                ..ImputationSpec::default()
            },
            joint_model: JointModelSpec {
                quadrature_order,
                ..JointModelSpec::default()
            },
            complete_df: None,
            master_seed: 20_140_101,
            n_workers: 1,
            output_dir: None,
        }
    }

    pub fn from_json_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Echo of every setting that affects the results.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig::preset(self.scenario, self.hypothesis)
    }

    /// True association of the generating model.
    pub fn truth(&self) -> f64 {
        self.generation().survival.assoc_alpha
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_replications == 0 {
            return Err(Error::Config("need at least one replication".into()));
        }
        if self.n_subjects == 0 {
            return Err(Error::Config("need at least one subject".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        if self.n_workers == 0 {
            return Err(Error::Config("need at least one worker".into()));
        }
        if let Some(df) = self.complete_df {
            if !(df > 0.0) {
                return Err(Error::Config("complete-data df must be positive".into()));
            }
        }
        if self.methods.iter().any(|m| m.fcs_version().is_some()) {
            self.imputation.validate()?;
        }
        self.joint_model.validate()
    }

    /// Requested methods, sorted and deduplicated.
    pub fn method_list(&self) -> Vec<Method> {
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        m
    }
}
