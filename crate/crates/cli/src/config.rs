//! Run configuration: one TOML file, `--set` overrides and an output-root variable.

use std::path::{Path, PathBuf};

use ctn_core::fusion::{CtnConfig, FusionMode};
use ctn_core::metrics::SkeletonScope;
use ctn_core::train::TrainConfig;
use ctn_core::volio::{PhantomSpec, Split};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable that relative `output_dir` values resolve against.
pub const OUTPUT_ROOT_ENV: &str = "CTN_OUTPUT_ROOT";

/// File name of the resolved configuration written next to every run's outputs.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Phantoms to generate.
    pub count: usize,
    /// Train, val and test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 10,
            split: [0.8, 0.1, 0.1],
        }
    }
}

impl DataConfig {
    /// Row counts per split; test takes the remainder.
    pub fn split_counts(&self) -> [usize; 3] {
        let train = (self.count as f64 * self.split[0]).round() as usize;
        let val = ((self.count as f64 * self.split[1]).round() as usize).min(self.count - train.min(self.count));
        let train = train.min(self.count);
        [train, val, self.count - train - val]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub skeleton_scope: SkeletonScope,
    /// Score label files found here instead of running a checkpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictions_dir: Option<PathBuf>,
    /// Manifest split that `evaluate` and `predict` read.
    pub split: Option<Split>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Volumes to segment; the manifest's evaluation split when empty.
    pub inputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Enabled-stage subsets of the stage sweep, in row order.
    pub stage_grid: Vec<Vec<usize>>,
    /// Fusion modes of the mode sweep, in row order.
    pub modes: Vec<FusionMode>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            stage_grid: vec![
                vec![],
                vec![1, 2, 3],
                vec![1, 2, 4],
                vec![1, 3, 4],
                vec![2, 3, 4],
                vec![1, 2, 3, 4],
            ],
            modes: vec![FusionMode::Concat, FusionMode::Add],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub phantom: PhantomSpec,
    pub model: CtnConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub predict: PredictConfig,
    pub ablate: AblateConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `section.key=value`; values parse as TOML and fall back to strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{assignment}`")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("--set key `{key}` has an empty segment")));
    }
    let (last, sections) = parts.split_last().expect("nonempty");
    let mut node = table;
    for (i, s) in sections.iter().enumerate() {
        let entry = node
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{}` is not a section", parts[..=i].join("."))))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (defaults when `None`), applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg.with_output_root(std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from)))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.phantom.validate()?;
        let s = self.data.split;
        if s.iter().any(|f| !(0.0..=1.0).contains(f)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!("data.split {s:?} must be fractions summing to 1")));
        }
        for stages in &self.ablate.stage_grid {
            let mut fusion = self.model.fusion.clone();
            fusion.enabled_stages = stages.clone();
            fusion.validate()?;
        }
        Ok(())
    }

    fn with_output_root(mut self, root: Option<PathBuf>) -> Self {
        if let (Some(root), Some(out)) = (root, &self.output_dir) {
            if out.is_relative() {
                self.output_dir = Some(root.join(out));
            }
        }
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
        value
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("`{key}` must be set for this command")))
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        Self::require(&self.output_dir, "output_dir")
    }

    pub fn manifest(&self) -> Result<&Path, CliError> {
        Self::require(&self.manifest, "manifest")
    }

    pub fn checkpoint(&self) -> Result<&Path, CliError> {
        Self::require(&self.checkpoint, "checkpoint")
    }

    /// Creates the output directory and freezes the resolved configuration in it.
    pub fn prepare_output(&self) -> Result<PathBuf, CliError> {
        let out = self.output_dir()?.to_path_buf();
        std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        let path = out.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_parse_typed_values() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "model.fusion.enabled_stages=[1,3]").unwrap();
        apply_override(&mut t, "model.fusion.mode=concat").unwrap();
        apply_override(&mut t, "train.base_lr=0.01").unwrap();
        apply_override(&mut t, "output_dir=runs/a").unwrap();
        let cfg: RunConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.model.fusion.enabled_stages, vec![1, 3]);
        assert_eq!(cfg.model.fusion.mode, FusionMode::Concat);
        assert_eq!(cfg.train.base_lr, 0.01);
        assert_eq!(cfg.output_dir, Some(PathBuf::from("runs/a")));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::load(None, &["train.learning_rate=0.1".into()]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(matches!(RunConfig::load(None, &["novalue".into()]), Err(CliError::Usage(_))));
    }

    #[test]
    fn split_counts() {
        let d = DataConfig { count: 10, split: [0.8, 0.1, 0.1] };
        assert_eq!(d.split_counts(), [8, 1, 1]);
        let d = DataConfig { count: 100, split: [0.8, 0.0, 0.2] };
        assert_eq!(d.split_counts(), [80, 0, 20]);
    }

    #[test]
    fn output_root_applies_to_relative_dirs() {
        let cfg = RunConfig { output_dir: Some("a".into()), ..Default::default() };
        assert_eq!(cfg.clone().with_output_root(Some("/r".into())).output_dir, Some(PathBuf::from("/r/a")));
        let abs = RunConfig { output_dir: Some("/x".into()), ..Default::default() };
        assert_eq!(abs.with_output_root(Some("/r".into())).output_dir, Some(PathBuf::from("/x")));
    }
}
