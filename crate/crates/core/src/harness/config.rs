// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration files.
//!
//! A config names a profile preset and overrides any part of it. Files are
//! TOML; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, LabError, Result};
use crate::geometry::DistancePositions;
use crate::harness::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::surrogate::{MapKind, TokenPolicy, NORM_BUDGET};
use crate::taskgen::{FunctionFamily, TaskSpec};
use crate::tale::PruneConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(invalid("profile", format!("unknown profile `{other}`"))),
        }
    }
}

/// Greedy pruning runs, one per validation dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneStage {
    pub datasets: Vec<String>,
    pub n_prompts: usize,
    pub epsilon_improve: f64,
}

impl PruneStage {
    pub fn config(&self) -> PruneConfig {
        PruneConfig {
            epsilon_improve: self.epsilon_improve,
        }
    }
}

/// Layerwise geometry of base and pruned models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileStage {
    /// Reference dataset for discrepancies.
    pub reference: String,
    pub datasets: Vec<String>,
    pub n_prompts: usize,
    pub positions: DistancePositions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateStage {
    pub datasets: Vec<String>,
    pub n_prompts: usize,
    pub policy: TokenPolicy,
}

/// Maps injected after a pruned layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterveneStage {
    pub dataset: String,
    /// Defaults to the first layer TALE removes on `dataset`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    pub kinds: Vec<MapKind>,
    /// Prompts the surrogate and the control calibration are fitted on.
    pub n_calibration: usize,
    pub policy: TokenPolicy,
    pub norm_budget: f64,
}

/// Residual rescaling and per-function threshold sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepStage {
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    pub alphas: Vec<f64>,
    /// Coefficient scales for the threshold sweep.
    pub sigmas: Vec<f64>,
    pub n_functions: usize,
    pub n_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalStage {
    pub datasets: Vec<String>,
    pub protocol: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub profile: Profile,
    /// Seed for all data sampling outside training.
    pub seed: u64,
    /// Start from this checkpoint instead of training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training distribution.
    pub task: TaskSpec,
    /// Named evaluation distributions.
    pub datasets: BTreeMap<String, TaskSpec>,
    pub prune: PruneStage,
    pub profile_stage: ProfileStage,
    pub surrogate: SurrogateStage,
    pub intervene: InterveneStage,
    pub sweep: SweepStage,
    pub eval: EvalStage,
}

fn default_datasets() -> BTreeMap<String, TaskSpec> {
    let lin = |s: f64| TaskSpec::linear(s).expect("positive sigma");
    let mut m = BTreeMap::new();
    m.insert("id".to_string(), lin(1.0));
    m.insert("sigma1.5".to_string(), lin(1.5));
    m.insert("sigma2".to_string(), lin(2.0));
    m.insert("sigma3".to_string(), lin(3.0));
    m.insert(
        "u12".to_string(),
        TaskSpec::linear_interval(1.0, 2.0).expect("ordered interval"),
    );
    m.insert(
        "runge".to_string(),
        TaskSpec::fixed(FunctionFamily::Runge, 1.0).expect("valid family"),
    );
    m
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl ExperimentConfig {
    pub fn preset(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Single-core scale: small model, short schedule, reduced evaluation.
    pub fn desk() -> Self {
        let train = TrainConfig::desk();
        let k = train.k_max;
        Self {
            name: "desk".into(),
            profile: Profile::Desk,
            seed: 2024,
            checkpoint: None,
            model: ModelConfig::desk(),
            train,
            task: TaskSpec::linear(1.0).expect("positive sigma"),
            datasets: default_datasets(),
            prune: PruneStage {
                datasets: names(&["id", "sigma2", "u12", "runge"]),
                n_prompts: 256,
                epsilon_improve: PruneConfig::default().epsilon_improve,
            },
            profile_stage: ProfileStage {
                reference: "id".into(),
                datasets: names(&["id", "sigma2", "sigma3", "u12"]),
                n_prompts: 200,
                positions: DistancePositions::AllPreceding,
            },
            surrogate: SurrogateStage {
                datasets: names(&["id", "sigma2"]),
                n_prompts: 200,
                policy: TokenPolicy::AllTokens,
            },
            intervene: InterveneStage {
                dataset: "sigma2".into(),
                layer: None,
                kinds: vec![
                    MapKind::InverseSurrogate,
                    MapKind::RandomRotation,
                    MapKind::RandomTriangular,
                ],
                n_calibration: 200,
                policy: TokenPolicy::AllTokens,
                norm_budget: NORM_BUDGET,
            },
            sweep: SweepStage {
                dataset: "sigma2".into(),
                layer: None,
                alphas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
                sigmas: (0..=10).map(|i| (10 + 2 * i) as f64 / 10.0).collect(),
                n_functions: 100,
                n_batches: 4,
            },
            eval: EvalStage {
                datasets: names(&["id", "sigma2"]),
                protocol: EvalConfig::desk(k + 1),
            },
        }
    }

    /// Full-size model and schedule.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.name = "paper".into();
        c.profile = Profile::Paper;
        c.model = ModelConfig::paper();
        c.train = TrainConfig::paper();
        c.prune.n_prompts = 1024;
        c.sweep.sigmas = (0..=18).map(|i| (2 + i) as f64 / 2.0).collect();
        c.sweep.n_batches = 64;
        c.eval.protocol = EvalConfig::paper();
        c.eval.datasets = names(&["id", "sigma1.5", "sigma2", "sigma3"]);
        c
    }

    /// Parses a config file. The `profile` key selects the preset that
    /// every other key overrides; `name` and `profile` are required.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        for key in ["name", "profile"] {
            if !user.contains_key(key) {
                return Err(LabError::Config(format!("missing field `{key}`")));
            }
        }
        let profile: Profile = user["profile"]
            .as_str()
            .ok_or_else(|| LabError::Config("`profile` must be a string".into()))?
            .parse()?;
        let mut base = toml::Table::try_from(Self::preset(profile))
            .map_err(|e| LabError::Config(e.to_string()))?;
        merge(&mut base, user);
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        // A run manifest carries the resolved config under `[config]`.
        if let Some(toml::Value::Table(cfg)) = table.get("config") {
            if table.contains_key("config_hash") {
                let cfg: Self = toml::Value::Table(cfg.clone())
                    .try_into()
                    .map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
                cfg.validate()?;
                return Ok(cfg);
            }
        }
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Replaces the training seed and the data seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn dataset(&self, name: &str) -> Result<&TaskSpec> {
        self.datasets
            .get(name)
            .ok_or_else(|| invalid("config", format!("unknown dataset `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(invalid("config", "name must not be empty"));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        if self.train.k_max > self.model.max_context() {
            return Err(invalid(
                "config",
                format!(
                    "train.k_max {} exceeds the model's context of {}",
                    self.train.k_max,
                    self.model.max_context()
                ),
            ));
        }
        for (name, t) in &self.datasets {
            t.validate()
                .map_err(|e| invalid("config", format!("dataset `{name}`: {e}")))?;
        }
        let referenced = self
            .prune
            .datasets
            .iter()
            .chain(&self.profile_stage.datasets)
            .chain(std::iter::once(&self.profile_stage.reference))
            .chain(&self.surrogate.datasets)
            .chain(std::iter::once(&self.intervene.dataset))
            .chain(std::iter::once(&self.sweep.dataset))
            .chain(&self.eval.datasets);
        for name in referenced {
            self.dataset(name)?;
        }
        for (what, n) in [
            ("prune.n_prompts", self.prune.n_prompts),
            ("profile_stage.n_prompts", self.profile_stage.n_prompts),
            ("surrogate.n_prompts", self.surrogate.n_prompts),
            ("intervene.n_calibration", self.intervene.n_calibration),
            ("sweep.n_functions", self.sweep.n_functions),
            ("sweep.n_batches", self.sweep.n_batches),
        ] {
            if n == 0 {
                return Err(invalid("config", format!("{what} must be positive")));
            }
        }
        if self.profile_stage.n_prompts < 2 {
            return Err(invalid("config", "profile_stage.n_prompts must be at least 2"));
        }
        for layer in [self.intervene.layer, self.sweep.layer].into_iter().flatten() {
            if layer >= self.model.n_layers {
                return Err(invalid("config", format!("layer {layer} out of range")));
            }
        }
        if let Some(a) = self.sweep.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(invalid("config", format!("sweep alpha {a} outside [0, 1]")));
        }
        if self.sweep.sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(invalid("config", "sweep sigmas must be positive"));
        }
        if !(self.intervene.norm_budget >= 0.0) {
            return Err(invalid("config", "intervene.norm_budget must be non-negative"));
        }
        self.eval.protocol.validate()?;
        if self.eval.protocol.n_points > self.model.max_context() + 1 {
            return Err(invalid("config", "eval.n_points exceeds the model's context"));
        }
        Ok(())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Recursive table merge; arrays and scalars in `over` replace `base`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !is_tagged(b) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

// Tagged enums (distributions, function families) are replaced wholesale so
// switching variants does not leave stale fields behind.
fn is_tagged(t: &toml::Table) -> bool {
    t.contains_key("kind")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in [Profile::Desk, Profile::Paper] {
            let c = ExperimentConfig::preset(p);
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let c = ExperimentConfig::from_toml_str(
            "name = \"x\"\nprofile = \"desk\"\n[train]\ntotal_steps = 200\n",
        )
        .unwrap();
        assert_eq!(c.train.total_steps, 200);
        assert_eq!(c.model, ModelConfig::desk());
    }

    #[test]
    fn missing_and_unknown_fields_are_named() {
        let e = ExperimentConfig::from_toml_str("profile = \"desk\"\n").unwrap_err();
        assert!(e.to_string().contains("name"), "{e}");
        let e = ExperimentConfig::from_toml_str("name = \"x\"\nprofile = \"desk\"\n[train]\nbogus = 1\n")
            .unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn unknown_dataset_reference_is_rejected() {
        let e = ExperimentConfig::from_toml_str(
            "name = \"x\"\nprofile = \"desk\"\n[intervene]\ndataset = \"nope\"\n",
        )
        .unwrap_err();
        assert!(e.to_string().contains("nope"), "{e}");
    }

    #[test]
    fn tagged_tables_are_replaced() {
        let c = ExperimentConfig::from_toml_str(
            "name = \"x\"\nprofile = \"desk\"\n[task.inputs]\nkind = \"interval\"\nlo = 1.0\nhi = 2.0\n",
        )
        .unwrap();
        assert_eq!(c.task.inputs, crate::taskgen::Distribution::interval(1.0, 2.0).unwrap());
    }

    #[test]
    fn added_datasets_merge_with_the_defaults() {
        let c = ExperimentConfig::from_toml_str(
            r#"
name = "x"
profile = "desk"
[prune]
datasets = ["id", "sigma4"]
[datasets.sigma4]
family = { kind = "polynomial", degree = 1 }
coefficients = { kind = "symmetric", sigma = 4.0 }
inputs = { kind = "symmetric", sigma = 1.0 }
"#,
        )
        .unwrap();
        assert_eq!(c.dataset("sigma4").unwrap(), &TaskSpec::linear(4.0).unwrap());
        assert!(c.dataset("sigma2").is_ok());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::desk();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.override_seed(7);
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
