//! Key-value config files: `key = value` lines, `#` comments, dotted keys
//! for grouping. Unknown keys are rejected with their line number so typos
//! surface instead of silently falling back to defaults.

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::energy::{DeviceProfile, DeviceTier};
use crate::executor::ExecMode;
use crate::train::{GridSpec, TrainConfig, TrainMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("key `{key}`: {detail}")]
    Invalid { key: String, detail: String },
}

/// Parsed raw keys with line numbers, in file order.
pub struct RawConfig {
    values: BTreeMap<String, (usize, String)>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<RawConfig, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw_line.find('#') {
                Some(p) => &raw_line[..p],
                None => raw_line,
            }
            .trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: stripped.to_string(),
                });
            };
            values.insert(
                key.trim().to_string(),
                (line, value.trim().to_string()),
            );
        }
        Ok(RawConfig {
            values,
            consumed: Default::default(),
        })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.consumed.borrow_mut().insert(key.to_string());
        self.values.get(key).map(|(_, v)| v.as_str())
    }

    fn parse_as<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                expected,
            }),
        }
    }

    fn list_f32(&self, key: &str) -> Result<Option<Vec<f32>>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse::<f32>())
                .collect::<Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    value: v.to_string(),
                    expected: "comma-separated floats",
                }),
        }
    }

    /// Error on any key that was never read by the typed extraction.
    pub fn reject_unknown(&self) -> Result<(), ConfigError> {
        let consumed = self.consumed.borrow();
        for (key, (line, _)) in &self.values {
            if !consumed.contains(key) {
                return Err(ConfigError::UnknownKey {
                    line: *line,
                    key: key.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arch {
    M1,
    M2,
}

impl Arch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::M1 => "m1",
            Arch::M2 => "m2",
        }
    }
}

#[derive(Debug, Clone)]
pub enum DatasetConfig {
    Synth {
        classes: usize,
        shape: [usize; 3],
        train_n: usize,
        test_n: usize,
        noise: f32,
    },
    Cifar10 {
        dir: PathBuf,
    },
}

#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub n_samples: usize,
    pub repetitions: usize,
    pub min_suite_ms: f64,
    pub mode: ExecMode,
    /// Profile for the single-suite `bench` subcommand.
    pub profile: DeviceProfile,
    /// Profiles the `experiment` pipeline sweeps.
    pub experiment_profiles: Vec<DeviceProfile>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub arch: Arch,
    pub train: TrainConfig,
    /// Present when grid search drives the sponge arm.
    pub grid: Option<GridSpec>,
    pub bench: BenchSettings,
    /// Calibration samples for post-training quantization.
    pub calibration_n: usize,
}

fn parse_shape(s: &str) -> Option<[usize; 3]> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>().ok())
        .collect::<Option<Vec<_>>>()?;
    match parts.as_slice() {
        [c, h, w] => Some([*c, *h, *w]),
        _ => None,
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let raw = RawConfig::parse(text)?;

        let seed: u64 = raw.parse_as("seed", "u64")?.unwrap_or(0);
        let out_dir = PathBuf::from(raw.get("out").unwrap_or("runs/out"));

        let dataset = match raw.get("dataset.kind").unwrap_or("synth") {
            "synth" => {
                let shape_str = raw.get("dataset.shape").unwrap_or("8x8x8").to_string();
                let shape = parse_shape(&shape_str).ok_or(ConfigError::BadValue {
                    key: "dataset.shape".into(),
                    value: shape_str,
                    expected: "CxHxW",
                })?;
                DatasetConfig::Synth {
                    classes: raw.parse_as("dataset.classes", "usize")?.unwrap_or(4),
                    shape,
                    train_n: raw.parse_as("dataset.train_n", "usize")?.unwrap_or(320),
                    test_n: raw.parse_as("dataset.test_n", "usize")?.unwrap_or(200),
                    noise: raw.parse_as("dataset.noise", "f32")?.unwrap_or(0.05),
                }
            }
            "cifar10" => {
                let dir = raw
                    .get("dataset.dir")
                    .ok_or(ConfigError::Missing("dataset.dir"))?;
                DatasetConfig::Cifar10 {
                    dir: PathBuf::from(dir),
                }
            }
            other => {
                return Err(ConfigError::BadValue {
                    key: "dataset.kind".into(),
                    value: other.to_string(),
                    expected: "synth | cifar10",
                })
            }
        };

        let arch = match raw.get("model.arch").unwrap_or("m1") {
            "m1" => Arch::M1,
            "m2" => Arch::M2,
            other => {
                return Err(ConfigError::BadValue {
                    key: "model.arch".into(),
                    value: other.to_string(),
                    expected: "m1 | m2",
                })
            }
        };

        let mode = match raw.get("train.mode").unwrap_or("vanilla") {
            "vanilla" => TrainMode::Vanilla,
            "sponge" => TrainMode::Sponge,
            other => {
                return Err(ConfigError::BadValue {
                    key: "train.mode".into(),
                    value: other.to_string(),
                    expected: "vanilla | sponge",
                })
            }
        };
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            mode,
            learning_rate: raw
                .parse_as("train.learning_rate", "f32")?
                .unwrap_or(defaults.learning_rate),
            epochs: raw.parse_as("train.epochs", "usize")?.unwrap_or(defaults.epochs),
            batch_size: raw
                .parse_as("train.batch_size", "usize")?
                .unwrap_or(defaults.batch_size),
            seed,
            lambda: raw.parse_as("train.lambda", "f32")?.unwrap_or(0.0),
            sigma: raw.parse_as("train.sigma", "f32")?.unwrap_or(defaults.sigma),
            delta: raw.parse_as("train.delta", "f32")?.unwrap_or(defaults.delta),
            accuracy_slack: raw
                .parse_as("train.accuracy_slack", "f64")?
                .unwrap_or(defaults.accuracy_slack),
        };

        let grid_enabled: bool = raw.parse_as("grid.enabled", "bool")?.unwrap_or(false);
        let grid_defaults = GridSpec::default();
        let grid = if grid_enabled {
            Some(GridSpec {
                lambda: raw.list_f32("grid.lambda")?.unwrap_or(grid_defaults.lambda),
                sigma: raw.list_f32("grid.sigma")?.unwrap_or(grid_defaults.sigma),
                delta: raw.list_f32("grid.delta")?.unwrap_or(grid_defaults.delta),
                learning_rate: raw
                    .list_f32("grid.learning_rate")?
                    .unwrap_or(vec![train.learning_rate]),
                max_cells: raw
                    .parse_as("grid.max_cells", "usize")?
                    .unwrap_or(grid_defaults.max_cells),
            })
        } else {
            // Consume the keys so a disabled grid section is not "unknown".
            for k in [
                "grid.lambda",
                "grid.sigma",
                "grid.delta",
                "grid.learning_rate",
                "grid.max_cells",
            ] {
                let _ = raw.get(k);
            }
            None
        };

        let profile_for = |raw: &RawConfig, key_base: &str, name: &str| -> Result<DeviceProfile, ConfigError> {
            let mut profile =
                DeviceProfile::preset(name).ok_or_else(|| ConfigError::Invalid {
                    key: key_base.to_string(),
                    detail: format!("unknown profile `{name}` (presets: s20-like, nexus5-like)"),
                })?;
            // Per-field overrides, e.g. profile.s20-like.e_mac_nj = 1.0
            let field = |f: &str| format!("profile.{name}.{f}");
            if let Some(v) = raw.parse_as::<f64>(&field("e_mac_nj"), "f64")? {
                profile.e_mac_nj = v;
            }
            if let Some(v) = raw.parse_as::<f64>(&field("e_skip_nj"), "f64")? {
                profile.e_skip_nj = v;
            }
            if let Some(v) = raw.parse_as::<f64>(&field("base_overhead_nj"), "f64")? {
                profile.base_overhead_nj = v;
            }
            if let Some(v) = raw.parse_as::<f64>(&field("battery_capacity_mah"), "f64")? {
                profile.battery_capacity_mah = v;
            }
            if let Some(v) = raw.parse_as::<f64>(&field("battery_voltage_v"), "f64")? {
                profile.battery_voltage_v = v;
            }
            if let Some(v) = raw.get(&field("tier")) {
                profile.tier = match v {
                    "high_end" => DeviceTier::HighEnd,
                    "low_end" => DeviceTier::LowEnd,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: field("tier"),
                            value: other.to_string(),
                            expected: "high_end | low_end",
                        })
                    }
                };
            }
            profile.validate().map_err(|e| ConfigError::Invalid {
                key: key_base.to_string(),
                detail: e.to_string(),
            })?;
            Ok(profile)
        };

        let bench_profile_name = raw.get("bench.profile").unwrap_or("s20-like").to_string();
        let experiment_profile_names: Vec<String> = raw
            .get("bench.experiment_profiles")
            .unwrap_or("s20-like,nexus5-like")
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let bench_mode_str = raw.get("bench.mode").unwrap_or("zero_skip").to_string();
        let bench = BenchSettings {
            n_samples: raw.parse_as("bench.n_samples", "usize")?.unwrap_or(2000),
            repetitions: raw.parse_as("bench.repetitions", "usize")?.unwrap_or(20),
            min_suite_ms: raw.parse_as("bench.min_suite_ms", "f64")?.unwrap_or(50.0),
            mode: ExecMode::parse(&bench_mode_str).ok_or(ConfigError::BadValue {
                key: "bench.mode".into(),
                value: bench_mode_str.clone(),
                expected: "dense | zero_skip",
            })?,
            profile: profile_for(&raw, "bench.profile", &bench_profile_name)?,
            experiment_profiles: experiment_profile_names
                .iter()
                .map(|n| profile_for(&raw, "bench.experiment_profiles", n))
                .collect::<Result<Vec<_>, _>>()?,
        };

        let calibration_n = raw.parse_as("quantize.calibration_n", "usize")?.unwrap_or(64);

        raw.reject_unknown()?;
        Ok(ExperimentConfig {
            seed,
            out_dir,
            dataset,
            arch,
            train,
            grid,
            bench,
            calibration_n,
        })
    }
}
