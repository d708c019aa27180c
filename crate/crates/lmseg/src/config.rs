//! TOML configuration for training runs.
//!
//! ```toml
//! [train]
//! class_count = 2
//! epochs = 30          # lr defaults to 0.01 (binary) / 0.005 otherwise
//! seed = 42
//!
//! [arch]
//! features = "hsv,normals"   # or a feature_spec table
//! k_hier = 20
//! ```
//!
//! The `LMSEG_SEED` environment variable overrides `train.seed`.

use std::path::Path;

use crate::dual::FeatureSpec;
use crate::error::{Error, Result};
use crate::net::ArchConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub arch: ArchConfig,
}

pub fn parse_feature_list(s: &str) -> Result<FeatureSpec> {
    let mut spec = FeatureSpec {
        use_hsv: false,
        use_normals: false,
    };
    for part in s.split([',', '+']) {
        match part.trim() {
            "hsv" => spec.use_hsv = true,
            "normals" => spec.use_normals = true,
            "" => {}
            other => {
                return Err(Error::InvalidConfig(format!("unknown feature '{other}'")));
            }
        }
    }
    if spec.feature_dim() == 0 {
        return Err(Error::InvalidFeatureSpec);
    }
    Ok(spec)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("toml: {e}")))?;
    let train_table = doc
        .get("train")
        .and_then(|v| v.as_table())
        .cloned()
        .ok_or_else(|| Error::InvalidConfig("missing [train] section".into()))?;
    let class_count = train_table
        .get("class_count")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| Error::InvalidConfig("train.class_count is required".into()))?
        as usize;

    let mut train_table = train_table;
    if !train_table.contains_key("lr") {
        train_table.insert(
            "lr".into(),
            toml::Value::Float(TrainConfig::default_lr_for_classes(class_count)),
        );
    }
    let mut train: TrainConfig = train_table
        .try_into()
        .map_err(|e| Error::InvalidConfig(format!("train section: {e}")))?;
    if let Ok(seed) = std::env::var("LMSEG_SEED") {
        train.seed = seed
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("LMSEG_SEED='{seed}' is not a number")))?;
    }
    train.validate()?;

    let mut arch_table = doc
        .remove("arch")
        .and_then(|v| v.as_table().cloned())
        .unwrap_or_default();
    if !arch_table.contains_key("num_classes") {
        arch_table.insert(
            "num_classes".into(),
            toml::Value::Integer(class_count as i64),
        );
    }
    if let Some(features) = arch_table.remove("features") {
        let list = features
            .as_str()
            .ok_or_else(|| Error::InvalidConfig("arch.features must be a string".into()))?;
        let spec = parse_feature_list(list)?;
        let mut spec_table = toml::Table::new();
        spec_table.insert("use_hsv".into(), toml::Value::Boolean(spec.use_hsv));
        spec_table.insert("use_normals".into(), toml::Value::Boolean(spec.use_normals));
        arch_table.insert("feature_spec".into(), toml::Value::Table(spec_table));
    }
    let arch: ArchConfig = arch_table
        .try_into()
        .map_err(|e| Error::InvalidConfig(format!("arch section: {e}")))?;
    arch.validate()?;
    if arch.num_classes != class_count {
        return Err(Error::InvalidConfig(format!(
            "arch.num_classes {} disagrees with train.class_count {}",
            arch.num_classes, class_count
        )));
    }
    Ok(RunConfig { train, arch })
}
