//! Run configuration: one JSON document per experiment, with dotted-path
//! overrides from the command line and the environment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::channel::ChannelConfig;
use crate::codebook::CodebookConfig;
use crate::error::{Error, Result};
use crate::geometry::Scenario;
use crate::hash::Hash32;
use crate::surrogate::ModelConfig;

pub const RUN_SCHEMA_VERSION: u32 = 1;

/// Environment variables starting with this prefix override config keys;
/// `__` separates path segments, e.g. `ENVTWIN__MODEL__LEARNING_RATE=0.01`.
pub const ENV_PREFIX: &str = "ENVTWIN__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Training locations for `train`/`eval`, validation carved out of them.
    #[serde(default = "defaults::n_train")]
    pub n_train: usize,
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "defaults::sweep_sizes")]
    pub sweep_sizes: Vec<usize>,
    #[serde(default = "defaults::sweep_seeds")]
    pub sweep_seeds: Vec<u64>,
    /// Random codeword draws per location for the baseline.
    #[serde(default = "defaults::baseline_trials")]
    pub baseline_trials: usize,
}

mod defaults {
    pub fn n_train() -> usize {
        500
    }
    pub fn val_fraction() -> f64 {
        0.1
    }
    pub fn sweep_sizes() -> Vec<usize> {
        vec![50, 100, 250, 500]
    }
    pub fn sweep_seeds() -> Vec<u64> {
        vec![0, 1, 2]
    }
    pub fn baseline_trials() -> usize {
        5
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_train: defaults::n_train(),
            val_fraction: defaults::val_fraction(),
            sweep_sizes: defaults::sweep_sizes(),
            sweep_seeds: defaults::sweep_seeds(),
            baseline_trials: defaults::baseline_trials(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Drives the train/val/test split, weight initialization, dropout and
    /// the random baseline. The environment itself uses `scenario.seed`.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scenario: Scenario,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub codebook: CodebookConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn new(scenario: Scenario, output_dir: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            schema_version: RUN_SCHEMA_VERSION,
            seed,
            output_dir: output_dir.into(),
            scenario,
            channel: ChannelConfig::default(),
            codebook: CodebookConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {RUN_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.scenario.validate()?;
        self.channel.validate(&self.scenario)?;
        self.model.validate()?;
        let e = &self.eval;
        if !(e.val_fraction > 0.0 && e.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "eval.val_fraction must be in (0, 1), got {}",
                e.val_fraction
            )));
        }
        if e.n_train < 2 {
            return Err(Error::Config("eval.n_train must be at least 2".into()));
        }
        if e.baseline_trials == 0 {
            return Err(Error::Config(
                "eval.baseline_trials must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Hash of everything that influences results; the output directory is
    /// left out so identical runs in different places agree.
    pub fn hash(&self) -> Hash32 {
        let mut v = serde_json::to_value(self).expect("serializable config");
        if let Value::Object(map) = &mut v {
            map.remove("output_dir");
        }
        Hash32::of_json(&v)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable config") + "\n"
    }
}

/// Parses a config document after applying `overrides` (`path`, raw value)
/// in order. Values are read as JSON when possible, as strings otherwise.
pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut doc: Value = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
    for (path, raw) in overrides {
        set_path(&mut doc, path, parse_value(raw))?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("at `{path}`: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    parse(&text, overrides)
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Splits `a.b.c=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err(Error::Config(format!(
            "override `{s}` is not of the form key.path=value"
        ))),
    }
}

/// Overrides taken from `ENVTWIN__A__B=value` variables, sorted by name.
pub fn env_overrides<I: IntoIterator<Item = (String, String)>>(vars: I) -> Vec<(String, String)> {
    let mut out: Vec<_> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((
                rest.split("__")
                    .map(str::to_lowercase)
                    .collect::<Vec<_>>()
                    .join("."),
                v,
            ))
        })
        .filter(|(k, _)| !k.is_empty())
        .collect();
    out.sort();
    out
}

/// Replaces the value at a dotted path. Intermediate objects must exist,
/// except that a `null` parent (an unset optional block) becomes an object.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!(
            "override path `{path}` has an empty segment"
        )));
    }
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let Value::Object(map) = cur else {
            return Err(Error::Config(format!(
                "override path `{path}`: `{}` is not an object",
                parts[..i].join(".")
            )));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("path has at least one segment")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn minimal() -> String {
        RunConfig::new(presets::desk(3), "out", 1).to_json_pretty()
    }

    #[test]
    fn round_trip() {
        let cfg = parse(&minimal(), &[]).unwrap();
        assert_eq!(cfg.to_json_pretty(), minimal());
        assert_eq!(parse(&cfg.to_json_pretty(), &[]).unwrap(), cfg);
    }

    #[test]
    fn defaults_fill_optional_blocks() {
        let mut v: Value = serde_json::from_str(&minimal()).unwrap();
        for k in ["channel", "codebook", "model", "eval"] {
            v.as_object_mut().unwrap().remove(k);
        }
        let cfg = parse(&v.to_string(), &[]).unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.eval.sweep_sizes, vec![50, 100, 250, 500]);
    }

    #[test]
    fn missing_field_is_named() {
        let mut v: Value = serde_json::from_str(&minimal()).unwrap();
        v["scenario"]["rx_grid"]
            .as_object_mut()
            .unwrap()
            .remove("pitch_m");
        let msg = parse(&v.to_string(), &[]).unwrap_err().to_string();
        assert!(
            msg.contains("scenario.rx_grid") && msg.contains("pitch_m"),
            "{msg}"
        );
    }

    #[test]
    fn unknown_field_is_rejected() {
        let mut v: Value = serde_json::from_str(&minimal()).unwrap();
        v["model"]["learning_rat"] = Value::from(0.1);
        let msg = parse(&v.to_string(), &[]).unwrap_err().to_string();
        assert!(msg.contains("learning_rat"), "{msg}");
    }

    #[test]
    fn syntax_error_reports_line() {
        let msg = parse("{\n  \"seed\": 1,\n  oops\n}", &[])
            .unwrap_err()
            .to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn overrides_apply_in_order() {
        let ov = vec![
            ("model.learning_rate".to_string(), "0.01".to_string()),
            ("output_dir".to_string(), "elsewhere".to_string()),
            ("channel.delay_taps".to_string(), "8".to_string()),
            ("seed".to_string(), "5".to_string()),
            ("seed".to_string(), "6".to_string()),
        ];
        let cfg = parse(&minimal(), &ov).unwrap();
        assert_eq!(cfg.model.learning_rate, 0.01);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.channel.delay_taps, Some(8));
        assert_eq!(cfg.seed, 6);
        assert!(parse(&minimal(), &[("seed.x".into(), "1".into())]).is_err());
        assert!(parse(&minimal(), &[("model.bogus".into(), "1".into())]).is_err());
    }

    #[test]
    fn env_variables_map_to_paths() {
        let vars = vec![
            ("PATH".to_string(), "/bin".to_string()),
            ("ENVTWIN__MODEL__BATCH_SIZE".to_string(), "64".to_string()),
            ("ENVTWIN__SEED".to_string(), "9".to_string()),
        ];
        let ov = env_overrides(vars);
        assert_eq!(
            ov,
            vec![
                ("model.batch_size".into(), "64".into()),
                ("seed".into(), "9".into())
            ]
        );
        let cfg = parse(&minimal(), &ov).unwrap();
        assert_eq!((cfg.model.batch_size, cfg.seed), (64, 9));
    }

    #[test]
    fn assignment_syntax() {
        assert_eq!(
            parse_assignment("a.b=c=d").unwrap(),
            ("a.b".into(), "c=d".into())
        );
        assert!(parse_assignment("novalue").is_err());
        assert!(parse_assignment("=3").is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = parse(&minimal(), &[]).unwrap();
        let b = parse(&minimal(), &[("output_dir".into(), "x".into())]).unwrap();
        let c = parse(&minimal(), &[("seed".into(), "2".into())]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn street_config_hashes_stably() {
        let cfg = RunConfig::new(presets::street(0), "street", 0);
        let text = cfg.to_json_pretty();
        let parsed = parse(&text, &[]).unwrap();
        assert_eq!(parsed.scenario.ris.num_elements(), 256);
        assert_eq!(parsed.scenario.num_subcarriers, 512);
        assert_eq!(parsed.hash(), cfg.hash());
        assert_eq!(parsed.hash(), parse(&text, &[]).unwrap().hash());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for (k, v) in [
            ("eval.val_fraction", "1.5"),
            ("scenario.num_subcarriers", "0"),
            ("schema_version", "7"),
        ] {
            assert!(parse(&minimal(), &[(k.into(), v.into())]).is_err(), "{k}");
        }
    }
}
