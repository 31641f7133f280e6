//! Scenario configuration shared by the command-line runner and tests.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::{
    CurveSpec, OverheadSpec, RateConvention, RecoveryConstants, WorkloadConstants,
};
use crate::cluster::ClusterConfig;
use crate::faults::{FaultEvent, Protection, TargetSpace};
use crate::recovery::TclsCalibration;
use crate::splitlock::{SectionScript, SplitCalibration};
use crate::workload::MatmulSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub workload: Option<WorkloadBlock>,
    /// Faults scheduled into a single run.
    #[serde(default)]
    pub faults: Vec<FaultEvent>,
    #[serde(default)]
    pub script: Option<SectionScript>,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default)]
    pub calibration: CalibrationBlock,
    #[serde(default)]
    pub campaign: Option<CampaignBlock>,
    #[serde(default)]
    pub analytics: AnalyticsBlock,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct WorkloadBlock {
    pub kind: WorkloadKind,
    #[serde(default)]
    pub matmul: MatmulSpec,
    pub protection: Protection,
    /// Cycle limit for a single run.
    #[serde(default = "default_max_cycles")]
    pub max_cycles: u64,
}

fn default_max_cycles() -> u64 {
    5_000_000
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    Matmul,
}

/// How section scripts are timed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    /// Phase latencies from the calibration table.
    #[default]
    Calibrated,
    /// Protocol programs executed on the cluster model.
    Functional,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationBlock {
    pub split: SplitCalibration,
    pub tcls: TclsCalibration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CampaignBlock {
    pub runs: usize,
    #[serde(default)]
    pub targets: TargetSpace,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ModelWorkload {
    #[default]
    Matmul,
    Cfft,
}

impl ModelWorkload {
    pub fn constants(self) -> WorkloadConstants {
        match self {
            ModelWorkload::Matmul => WorkloadConstants::matmul(),
            ModelWorkload::Cfft => WorkloadConstants::cfft(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct AnalyticsBlock {
    pub workload: ModelWorkload,
    /// Replaces the preset constants when present.
    pub constants: Option<WorkloadConstants>,
    pub recovery: RecoveryConstants,
    pub convention: RateConvention,
    pub curves: CurveSpec,
    pub overhead: OverheadSpec,
    pub validation: ValidationSpec,
}


impl AnalyticsBlock {
    pub fn constants(&self) -> WorkloadConstants {
        self.constants.unwrap_or_else(|| self.workload.constants())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationSpec {
    pub runs: usize,
    /// Expected faults per run at which each curve is sampled.
    pub faults_per_run: Vec<f64>,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        ValidationSpec {
            runs: 1000,
            faults_per_run: vec![10.0, 30.0, 100.0],
        }
    }
}

/// A check on a report value addressed by JSON pointer, e.g.
/// `/inject/outcomes/sdc`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Assertion {
    pub path: String,
    pub op: CmpOp,
    pub value: f64,
    /// Relative tolerance for `approx`.
    #[serde(default)]
    pub tol: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Eq,
    Le,
    Ge,
    Lt,
    Gt,
    Approx,
}

impl CmpOp {
    pub fn holds(self, actual: f64, want: f64, tol: f64) -> bool {
        match self {
            CmpOp::Eq => actual == want,
            CmpOp::Le => actual <= want,
            CmpOp::Ge => actual >= want,
            CmpOp::Lt => actual < want,
            CmpOp::Gt => actual > want,
            CmpOp::Approx => (actual - want).abs() <= tol * want.abs(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.cluster
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(w) = &self.workload {
            if !w.protection.mode().available(self.cluster.n_cores) {
                return bad(format!(
                    "{:?} is unavailable on {} cores",
                    w.protection, self.cluster.n_cores
                ));
            }
            if w.max_cycles == 0 {
                return bad("workload.max_cycles must be positive".into());
            }
        }
        for f in &self.faults {
            f.validate(self.cluster.n_cores)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if let Some(s) = &self.script {
            s.validate(self.cluster.n_cores)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if let Some(c) = &self.campaign {
            if c.runs == 0 {
                return bad("campaign.runs must be positive".into());
            }
            if c.targets.locations().is_empty() {
                return bad("campaign.targets selects nothing".into());
            }
        }
        let a = &self.analytics;
        a.curves
            .grid()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        a.overhead
            .rates
            .grid()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if a.validation.runs < 100 {
            return bad("analytics.validation.runs must be at least 100".into());
        }
        if a.validation.faults_per_run.iter().any(|n| !(*n >= 0.0)) {
            return bad("analytics.validation.faults_per_run must be non-negative".into());
        }
        for x in &self.assertions {
            if !x.path.starts_with('/') {
                return bad(format!("assertion path {:?} is not a JSON pointer", x.path));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical serialization of the configuration.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// JSON schema of the configuration format.
    pub fn schema() -> String {
        let mut s = serde_json::to_string_pretty(&schemars::schema_for!(ScenarioConfig))
            .expect("schema serializes");
        s.push('\n');
        s
    }

    /// Short digest used to name output directories.
    pub fn short_digest(&self) -> String {
        self.digest()[..16].to_string()
    }
}
