//! Experiment files: a `[federation]` table mapping onto [`FedConfig`], a
//! `[data]` block and the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use fedfm_core::data::{
    gen_gaussian_mixture, holdout_split, load_csv_dataset, partition_dirichlet, partition_dominant,
    partition_missing, ClientSplit, LabeledDataset,
};
use fedfm_core::{FedConfig, FedError, Scalar};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

mod defaults {
    use std::path::PathBuf;

    pub fn output_dir() -> PathBuf {
        PathBuf::from("fedfm-output")
    }
    pub fn num_classes() -> usize {
        10
    }
    pub fn input_dim() -> usize {
        32
    }
    pub fn train_per_class() -> usize {
        100
    }
    pub fn test_per_class() -> usize {
        100
    }
    pub fn separation() -> f64 {
        6.0
    }
    pub fn test_frac() -> f64 {
        0.2
    }
    pub fn beta() -> f64 {
        0.5
    }
    pub fn dominant_frac() -> f64 {
        0.8
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    /// Relative paths resolve against the output root when one is set.
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    pub federation: FedConfig,
    #[serde(default)]
    pub data: DataSpec,
}

/// Data source and partition. With neither `synthetic` nor `csv` given the
/// default Gaussian mixture is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Seeds data generation, the train/test split and the partition.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSpec>,
    #[serde(default)]
    pub partition: PartitionSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "defaults::num_classes")]
    pub num_classes: usize,
    #[serde(default = "defaults::input_dim")]
    pub input_dim: usize,
    #[serde(default = "defaults::train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "defaults::test_per_class")]
    pub test_per_class: usize,
    /// Distance between every pair of category means.
    #[serde(default = "defaults::separation")]
    pub separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: defaults::num_classes(),
            input_dim: defaults::input_dim(),
            train_per_class: defaults::train_per_class(),
            test_per_class: defaults::test_per_class(),
            separation: defaults::separation(),
        }
    }
}

/// `label,feat_1,...` rows without header; a stratified `test_frac` is held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSpec {
    /// Relative to the experiment file.
    pub path: PathBuf,
    pub num_classes: usize,
    #[serde(default = "defaults::test_frac")]
    pub test_frac: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Dirichlet {
        #[serde(default = "defaults::beta")]
        beta: f64,
    },
    Dominant {
        #[serde(default = "defaults::dominant_frac")]
        dominant_frac: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        client_size: Option<usize>,
    },
    Missing {
        missing: usize,
    },
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::Dirichlet { beta: defaults::beta() }
    }
}

impl ExperimentFile {
    /// Desk-scale preset: 10 clients, 40 rounds, 10-category mixture in 32
    /// dimensions, Dirichlet(0.5) label skew, `λ = 50`, `T_s = 8`.
    pub fn preset() -> Self {
        Self {
            output_dir: defaults::output_dir(),
            precision: Precision::F64,
            federation: FedConfig::default(),
            data: DataSpec {
                synthetic: Some(SyntheticSpec::default()),
                ..DataSpec::default()
            },
        }
    }

    /// Parses and validates an experiment file. Relative CSV paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut exp = Self::parse(&text).map_err(|(key, message)| CliError::Config {
            file: path.to_path_buf(),
            path: key,
            message,
        })?;
        if let Some(csv) = exp.data.csv.as_mut() {
            if csv.path.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                csv.path = base.join(&csv.path);
            }
        }
        Ok(exp)
    }

    /// Parses and validates; errors carry the dotted key path.
    pub fn parse(text: &str) -> Result<Self, (String, String)> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ("(document)".to_string(), e.message().to_string()))?;
        let mut exp: Self = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let message = e.inner().to_string();
            let mut key = e.path().to_string();
            if let Some(field) = named_field(&message).filter(|f| !key.ends_with(&format!(".{f}")) && key != *f) {
                key = if key == "." { field.to_string() } else { format!("{key}.{field}") };
            }
            (key, message)
        })?;
        exp.validate()?;
        if exp.data.csv.is_none() && exp.data.synthetic.is_none() {
            exp.data.synthetic = Some(SyntheticSpec::default());
        }
        Ok(exp)
    }

    fn validate(&self) -> Result<(), (String, String)> {
        self.federation.validate().map_err(|e| keyed("federation", e))?;
        let data = &self.data;
        if data.synthetic.is_some() && data.csv.is_some() {
            return Err(("data".into(), "give either `synthetic` or `csv`, not both".into()));
        }
        if let Some(csv) = &data.csv {
            if !(csv.test_frac > 0.0 && csv.test_frac < 1.0) {
                return Err(("data.csv.test_frac".into(), format!("must lie in (0, 1), got {}", csv.test_frac)));
            }
        }
        if let Some(s) = &data.synthetic {
            if s.train_per_class == 0 || s.test_per_class == 0 {
                return Err((
                    "data.synthetic".into(),
                    "train_per_class and test_per_class must be >= 1".into(),
                ));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the resolved experiment without its output directory.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::json!({
            "precision": self.precision,
            "federation": self.federation,
            "data": self.data,
        });
        let digest = Sha256::digest(canonical.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment files serialize to TOML")
    }

    /// Output directory, placed under `root` when relative.
    pub fn resolved_output_dir(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(root) if self.output_dir.is_relative() => root.join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Builds client data and the test set.
    pub fn build_data<T: Scalar>(&self, file: &Path) -> CliResult<(ClientSplit<T>, LabeledDataset<T>)> {
        let data = &self.data;
        let config_err = |key: &str, e: FedError| -> CliError {
            match e {
                FedError::Config(message) => CliError::Config {
                    file: file.to_path_buf(),
                    path: key.to_string(),
                    message,
                },
                other => other.into(),
            }
        };
        let (train, test) = match &data.csv {
            Some(csv) => {
                let all = load_csv_dataset::<T>(&csv.path, csv.num_classes).map_err(|e| config_err("data.csv", e))?;
                holdout_split(&all, csv.test_frac, data.seed).map_err(|e| config_err("data.csv", e))?
            }
            None => {
                let s = data.synthetic.clone().unwrap_or_default();
                let per_class = s.train_per_class + s.test_per_class;
                let all = gen_gaussian_mixture::<T>(s.num_classes, s.input_dim, per_class, s.separation, data.seed)
                    .map_err(|e| config_err("data.synthetic", e))?;
                let frac = s.test_per_class as f64 / per_class as f64;
                holdout_split(&all, frac, data.seed).map_err(|e| config_err("data.synthetic", e))?
            }
        };
        let k = self.federation.clients;
        let split = match data.partition {
            PartitionSpec::Dirichlet { beta } => partition_dirichlet(&train, k, beta, data.seed),
            PartitionSpec::Dominant {
                dominant_frac,
                client_size,
            } => partition_dominant(&train, k, dominant_frac, client_size, data.seed),
            PartitionSpec::Missing { missing } => partition_missing(&train, k, missing, data.seed),
        }
        .map_err(|e| config_err("data.partition", e))?;
        Ok((split, test))
    }
}

/// Core validation messages start with the field name.
fn keyed(table: &str, e: FedError) -> (String, String) {
    let message = match e {
        FedError::Config(m) => m,
        other => other.to_string(),
    };
    let field = message.split_whitespace().next().unwrap_or_default();
    (format!("{table}.{field}"), message)
}

/// Field named in serde's "unknown field `x`" / "missing field `x`" messages.
fn named_field(message: &str) -> Option<&str> {
    let rest = message
        .strip_prefix("unknown field `")
        .or_else(|| message.strip_prefix("missing field `"))?;
    rest.split('`').next()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[federation]
algorithm = "fedfm_cg"
lambda = 50.0
alpha = 1.0
fm_start_round = 8
lite_model_period = 1
"#;

    #[test]
    fn minimal_file_fills_defaults() {
        let exp = ExperimentFile::parse(MINIMAL).unwrap();
        assert_eq!(exp.federation.rounds, 40);
        assert_eq!(exp.data.partition, PartitionSpec::Dirichlet { beta: 0.5 });
        assert_eq!(exp.output_dir, PathBuf::from("fedfm-output"));
        assert_eq!(exp.data.synthetic, Some(SyntheticSpec::default()));
    }

    #[test]
    fn preset_round_trips_through_toml() {
        let preset = ExperimentFile::preset();
        assert_eq!(ExperimentFile::parse(&preset.to_toml()).unwrap(), preset);
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let (key, msg) = ExperimentFile::parse(&format!("{MINIMAL}lamda = 3.0\n")).unwrap_err();
        assert_eq!(key, "federation.lamda");
        assert!(msg.contains("unknown field"));
    }

    #[test]
    fn critical_fields_have_no_default() {
        let text = MINIMAL.replace("alpha = 1.0\n", "");
        assert_eq!(ExperimentFile::parse(&text).unwrap_err().0, "federation.alpha");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let text = MINIMAL.replace("lambda = 50.0", "lambda = -1.0");
        assert_eq!(ExperimentFile::parse(&text).unwrap_err().0, "federation.lambda");
        let text = format!("{MINIMAL}\n[data.partition.dirichlet]\nbeta = \"x\"\n");
        assert_eq!(ExperimentFile::parse(&text).unwrap_err().0, "data.partition.dirichlet.beta");
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentFile::parse(MINIMAL).unwrap();
        let b = ExperimentFile {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = a.clone();
        c.federation.seed = 1;
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }
}
