//! Config loading: JSON file, dot-path overrides, validation with field
//! paths, and the canonical config hash.

use std::path::Path;

use fkt_core::pipelines::RunConfig;
use sha2::{Digest, Sha256};

/// Error carrying the CLI exit code (2 = config, 3 = divergence,
/// 4 = checkpoint, 5 = I/O).
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<fkt_core::FktError> for CliError {
    fn from(e: fkt_core::FktError) -> Self {
        CliError {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

/// Parse `key=value`; the value is interpreted as JSON when possible and as a
/// bare string otherwise.
fn parse_override(raw: &str) -> Result<(Vec<String>, serde_json::Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {raw:?}: expected key=value")))?;
    if key.is_empty() {
        return Err(CliError::config(format!("override {raw:?}: empty key")));
    }
    let parsed = serde_json::from_str(value)
        .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
    Ok((key.split('.').map(String::from).collect(), parsed))
}

fn apply_override(
    root: &mut serde_json::Value,
    path: &[String],
    value: serde_json::Value,
) -> Result<(), CliError> {
    let mut node = root;
    for (i, part) in path.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::config(format!(
                "override {}: {} is not an object",
                path.join("."),
                path[..i].join(".")
            ))
        })?;
        if i + 1 == path.len() {
            obj.insert(part.clone(), value);
            return Ok(());
        }
        node = obj
            .entry(part.clone())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("override paths are nonempty")
}

/// Load a run config, apply overrides, deserialize (errors name the field
/// path), and validate.
pub fn load_run_config(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    for raw in overrides {
        let (key_path, v) = parse_override(raw)?;
        apply_override(&mut value, &key_path, v)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        CliError::config(format!("{}: {}: {}", path.display(), e.path(), e.inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// sha256 of the canonicalized (sorted-key, compact) resolved config; stable
/// under key reordering of the config file.
pub fn config_hash(cfg: &RunConfig) -> String {
    let value = serde_json::to_value(cfg).expect("config serializes");
    let canonical = serde_json::to_string(&value).expect("canonical form");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn minimal_config_json() -> serde_json::Value {
        serde_json::json!({
            "regime": "functional",
            "epochs": 2,
            "batch_size": 8,
            "trials": 1,
            "seeds": [1],
            "dataset": {
                "name": "synthetic_blobs",
                "num_classes": 2,
                "image_size": 16,
                "synthetic_per_class": 10
            },
            "model": {
                "backbone": "small_cnn",
                "encoder_dim": 16,
                "projector_out_dim": 8,
                "num_classes": 2,
                "small_input_stem": true
            },
            "augment": {
                "crop_scale_range": [0.2, 1.0],
                "flip_probability": 0.5,
                "jitter_strength": 0.5,
                "jitter_probability": 0.8,
                "grayscale_probability": 0.2,
                "blur_enabled": false,
                "blur_probability": 0.0,
                "output_size": 16,
                "normalization_mean": [0.5, 0.5, 0.5],
                "normalization_std": [0.5, 0.5, 0.5]
            }
        })
    }

    fn write_config(value: &serde_json::Value) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "{}", serde_json::to_string_pretty(value).unwrap()).unwrap();
        f
    }

    #[test]
    fn loads_and_validates() {
        let f = write_config(&minimal_config_json());
        let cfg = load_run_config(f.path(), &[]).unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.lambda, 1.0); // default
    }

    #[test]
    fn override_dot_paths() {
        let f = write_config(&minimal_config_json());
        let cfg = load_run_config(
            f.path(),
            &[
                "epochs=5".into(),
                "dataset.image_size=24".into(),
                "augment.output_size=24".into(),
                "lambda=0.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.dataset.image_size, 24);
        assert_eq!(cfg.lambda, 0.5);
    }

    #[test]
    fn invalid_lambda_names_field() {
        let mut v = minimal_config_json();
        v["lambda"] = serde_json::json!(-1.0);
        let f = write_config(&v);
        let err = load_run_config(f.path(), &[]).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("lambda"), "{}", err.message);
    }

    #[test]
    fn hash_stable_under_key_reordering() {
        let f = write_config(&minimal_config_json());
        let cfg1 = load_run_config(f.path(), &[]).unwrap();
        // Same content, different key order in the file.
        let text = std::fs::read_to_string(f.path()).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let reordered = serde_json::json!({
            "seeds": value["seeds"],
            "trials": value["trials"],
            "model": value["model"],
            "augment": value["augment"],
            "dataset": value["dataset"],
            "batch_size": value["batch_size"],
            "epochs": value["epochs"],
            "regime": value["regime"],
        });
        let f2 = write_config(&reordered);
        let cfg2 = load_run_config(f2.path(), &[]).unwrap();
        assert_eq!(config_hash(&cfg1), config_hash(&cfg2));
    }
}
