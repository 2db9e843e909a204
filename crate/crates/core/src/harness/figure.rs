// SPDX-License-Identifier: MIT OR Apache-2.0

//! Figure specifications handed to the plotting tool.
//!
//! Rendering happens elsewhere; this side writes the spec and checks that
//! the CSVs it points at exist and carry the expected columns.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigureId {
    Profile,
    Threshold,
    Spectrum,
    Alpha,
}

impl FigureId {
    pub const ALL: [FigureId; 4] = [
        FigureId::Profile,
        FigureId::Threshold,
        FigureId::Spectrum,
        FigureId::Alpha,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FigureId::Profile => "profile",
            FigureId::Threshold => "threshold",
            FigureId::Spectrum => "spectrum",
            FigureId::Alpha => "alpha",
        }
    }

    /// Columns every input CSV of this figure must contain.
    pub fn required_columns(self) -> &'static [&'static str] {
        match self {
            FigureId::Profile => &["layer", "statistic", "value", "dataset", "model_id", "mask"],
            FigureId::Threshold => &[
                "label",
                "n",
                "both",
                "only_base",
                "only_pruned",
                "neither",
                "acc_mean_base_mse",
                "threshold",
            ],
            FigureId::Spectrum => &["layer", "dataset", "median_gain", "stable_rank", "top_5_singular_values"],
            FigureId::Alpha => &["dataset", "layer", "alpha", "metric"],
        }
    }
}

impl std::str::FromStr for FigureId {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        FigureId::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| invalid("figure id", format!("unknown figure `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FigureStyle {
    #[serde(default)]
    pub log_y: bool,
    #[serde(default)]
    pub series_labels: Vec<String>,
    /// Layer indices drawn as dotted verticals.
    #[serde(default)]
    pub markers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FigureSpec {
    pub id: FigureId,
    pub inputs: Vec<PathBuf>,
    pub output: PathBuf,
    /// Config hash of the run that produced the inputs.
    pub manifest_hash: String,
    #[serde(default)]
    pub style: FigureStyle,
}

impl FigureSpec {
    /// Inputs must exist, be non-empty and contain the required columns.
    /// Relative paths resolve against `base`.
    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(invalid("figure spec", "no input CSVs"));
        }
        for input in &self.inputs {
            let path = base.join(input);
            let mut r = csv::Reader::from_path(&path).map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(source) => LabError::Io {
                    path: path.clone(),
                    source,
                },
                other => LabError::Format {
                    kind: "csv",
                    reason: format!("{}: {other:?}", path.display()),
                },
            })?;
            let headers = r.headers()?.clone();
            for col in self.id.required_columns() {
                if !headers.iter().any(|h| h == *col) {
                    return Err(LabError::Format {
                        kind: "csv",
                        reason: format!("{} is missing column `{col}`", path.display()),
                    });
                }
            }
            if r.records().next().is_none() {
                return Err(LabError::Format {
                    kind: "csv",
                    reason: format!("{} has no rows", path.display()),
                });
            }
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| LabError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: FigureId) -> FigureSpec {
        FigureSpec {
            id,
            inputs: vec!["a.csv".into()],
            output: "a.svg".into(),
            manifest_hash: "00".into(),
            style: FigureStyle::default(),
        }
    }

    #[test]
    fn validation_names_missing_column() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "dataset,layer,alpha\nx,0,1\n").unwrap();
        let e = spec(FigureId::Alpha).validate(dir.path()).unwrap_err();
        assert!(e.to_string().contains("metric"), "{e}");
    }

    #[test]
    fn empty_and_missing_inputs_fail() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "dataset,layer,alpha,metric\n").unwrap();
        assert!(spec(FigureId::Alpha).validate(dir.path()).is_err());
        let mut s = spec(FigureId::Alpha);
        s.inputs = vec!["missing.csv".into()];
        assert!(s.validate(dir.path()).is_err());
        std::fs::write(dir.path().join("a.csv"), "dataset,layer,alpha,metric\nx,0,1,0.5\n").unwrap();
        spec(FigureId::Alpha).validate(dir.path()).unwrap();
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(FigureId::Profile);
        s.style.markers = vec![2, 5];
        let p = dir.path().join("f.toml");
        s.write(&p).unwrap();
        assert_eq!(FigureSpec::read(&p).unwrap(), s);
    }
}
