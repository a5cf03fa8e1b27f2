//! The operator config file: the experiment grid plus output location,
//! analysis toggles and verification settings.

use std::fmt;
use std::path::{Path, PathBuf};

use dss_lab::uda::ExperimentConfig;
use dss_lab::verify::VerifyOptions;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const BUNDLED_CONFIG: &str = include_str!("../configs/default.json");

const TOP_LEVEL_KEYS: [&str; 4] = ["experiment", "output_dir", "analysis", "verify"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyzeMode {
    Histograms,
    Ratios,
    Drift,
    Svd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisToggles {
    /// Write the generated domains as binary plus sidecar.
    pub export_datasets: bool,
    /// Write per-epoch backbone weights (needed by `drift` and `svd`).
    pub weight_snapshots: bool,
    /// Analyses to run over the output directory once training finishes.
    pub after_run: Vec<AnalyzeMode>,
}

impl Default for AnalysisToggles {
    fn default() -> Self {
        AnalysisToggles {
            export_datasets: true,
            weight_snapshots: true,
            after_run: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfigFile {
    #[serde(default)]
    pub experiment: ExperimentConfig,
    /// Relative paths are taken from the directory holding the config file.
    pub output_dir: PathBuf,
    #[serde(default)]
    pub analysis: AnalysisToggles,
    #[serde(default)]
    pub verify: VerifyOptions,
}

/// A config problem, already phrased for the operator.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A loaded config with its origin.
#[derive(Debug)]
pub struct Loaded {
    pub file: CliConfigFile,
    /// Shown in messages: the path or `<bundled>`.
    pub origin: String,
    text: String,
    base_dir: PathBuf,
}

impl Loaded {
    pub fn bundled() -> Result<Self, ConfigError> {
        Loaded::parse(BUNDLED_CONFIG.to_string(), "<bundled>".into(), PathBuf::from("."))
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: cannot read config: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        Loaded::parse(text, path.display().to_string(), base)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            Some(p) => Loaded::from_path(p),
            None => Loaded::bundled(),
        }
    }

    fn parse(text: String, origin: String, base_dir: PathBuf) -> Result<Self, ConfigError> {
        let file: CliConfigFile = serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("{origin}:{}:{}: {}", e.line(), e.column(), strip_position(&e))))?;
        Ok(Loaded {
            file,
            origin,
            text,
            base_dir,
        })
    }

    /// Applies `key=value` overrides. Keys are dotted paths from the top of
    /// the file; a path whose first segment is not a top-level key is taken
    /// relative to `experiment`. Values are parsed as JSON, falling back to a
    /// plain string.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut doc = serde_json::to_value(&self.file).map_err(|e| ConfigError(e.to_string()))?;
        for item in overrides {
            let (key, value) = split_override(item)?;
            let mut path: Vec<&str> = key.split('.').collect();
            if !TOP_LEVEL_KEYS.contains(&path[0]) {
                path.insert(0, "experiment");
            }
            set_path(&mut doc, &path, value).map_err(|m| ConfigError(format!("--set {item}: {m}")))?;
            self.file = serde_json::from_value(doc.clone()).map_err(|e| ConfigError(format!("--set {item}: {e}")))?;
        }
        Ok(())
    }

    /// Runs the semantic checks. The message points at the line of the
    /// offending key when one can be found in the file.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.file
            .experiment
            .validate()
            .map_err(|e| ConfigError(self.anchor(&e.to_string())))
    }

    fn anchor(&self, message: &str) -> String {
        let line = message
            .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .filter(|w| w.len() > 1)
            .find_map(|w| self.key_line(w))
            .or_else(|| self.key_line("experiment"))
            .unwrap_or(1);
        format!("{}:{line}: {message}", self.origin)
    }

    fn key_line(&self, key: &str) -> Option<usize> {
        let quoted = format!("\"{key}\"");
        self.text.lines().position(|l| l.contains(&quoted)).map(|i| i + 1)
    }

    pub fn output_dir(&self, out: Option<&Path>) -> PathBuf {
        match out {
            Some(p) => p.to_path_buf(),
            None if self.file.output_dir.is_absolute() => self.file.output_dir.clone(),
            None => self.base_dir.join(&self.file.output_dir),
        }
    }
}

fn strip_position(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rfind(" at line ") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}

pub fn split_override(item: &str) -> Result<(&str, Value), ConfigError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("--set {item}: expected key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError(format!("--set {item}: malformed key")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((key, value))
}

fn set_path(doc: &mut Value, path: &[&str], value: Value) -> Result<(), String> {
    let mut node = doc;
    for (i, seg) in path.iter().enumerate() {
        let map = match node {
            Value::Object(m) => m,
            _ => return Err(format!("{} is not an object", path[..i].join("."))),
        };
        if i + 1 == path.len() {
            map.insert(seg.to_string(), value);
            return Ok(());
        }
        node = map.entry(seg.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    unreachable!("override path has at least one segment")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_is_the_library_default() {
        let loaded = Loaded::bundled().unwrap();
        assert_eq!(loaded.file.experiment, ExperimentConfig::default());
        loaded.validate().unwrap();
    }

    #[test]
    fn shorthand_overrides_reach_the_experiment() {
        let mut loaded = Loaded::bundled().unwrap();
        loaded
            .apply_overrides(&["dss.lambda=0".into(), "experiment.batch_size=4".into()])
            .unwrap();
        assert_eq!(loaded.file.experiment.dss.lambda, 0.0);
        assert_eq!(loaded.file.experiment.batch_size, 4);
    }

    #[test]
    fn unknown_override_key_is_rejected() {
        let mut loaded = Loaded::bundled().unwrap();
        let err = loaded.apply_overrides(&["dss.lamda=0".into()]).unwrap_err();
        assert!(err.0.contains("lamda"), "{err}");
    }

    #[test]
    fn unknown_key_error_carries_the_line() {
        let text = "{\n  \"output_dir\": \"x\",\n  \"experiment\": {\n    \"batch_sise\": 2\n  }\n}";
        let err = Loaded::parse(text.into(), "cfg.json".into(), ".".into()).unwrap_err();
        assert!(err.0.starts_with("cfg.json:4:"), "{err}");
    }

    #[test]
    fn validation_error_points_at_the_key() {
        let text = "{\n  \"output_dir\": \"x\",\n  \"experiment\": {\n    \"batch_size\": 1\n  }\n}";
        let loaded = Loaded::parse(text.into(), "cfg.json".into(), ".".into()).unwrap();
        let err = loaded.validate().unwrap_err();
        assert!(err.0.starts_with("cfg.json:4:"), "{err}");
    }

    #[test]
    fn relative_output_dir_follows_the_config_file() {
        let text = "{\"output_dir\": \"out\"}";
        let loaded = Loaded::parse(text.into(), "c".into(), PathBuf::from("/etc/lab")).unwrap();
        assert_eq!(loaded.output_dir(None), PathBuf::from("/etc/lab/out"));
        assert_eq!(loaded.output_dir(Some(Path::new("elsewhere"))), PathBuf::from("elsewhere"));
    }
}
