//! TOML config files, the shared `[data]` table, model sources and seed
//! resolution.

use std::path::{Path, PathBuf};

use edgeflow::datasets::{gen_mixture, load_dataset, LabeledDataset};
use edgeflow::nn::{zoo, ModelSpec};
use edgeflow::rng::derive_seed;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

pub const SEED_ENV: &str = "EDGEFLOW_SEED";

// stream ids under the run seed
pub(crate) const DATA_STREAM: u64 = 1;
pub(crate) const SPLIT_STREAM: u64 = 2;
pub(crate) const PARTITION_STREAM: u64 = 3;
pub(crate) const INIT_STREAM: u64 = 4;
pub(crate) const TRAIN_STREAM: u64 = 5;

/// A parsed config plus the raw bytes its hash is taken over.
pub struct Loaded<T> {
    pub path: PathBuf,
    pub bytes: Vec<u8>,
    pub value: T,
}

impl<T> Loaded<T> {
    /// Directory relative paths inside the config are resolved against.
    pub fn base(&self) -> &Path {
        self.path.parent().unwrap_or_else(|| Path::new("."))
    }
}

pub fn load_config<T: DeserializeOwned>(path: &Path) -> CliResult<Loaded<T>> {
    if !path.is_file() {
        return Err(CliError::MissingConfig(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: format!("not UTF-8: {e}"),
    })?;
    let value = toml::from_str(text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string().trim_end().to_string(),
    })?;
    Ok(Loaded {
        path: path.to_path_buf(),
        bytes,
        value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Flag,
    Env,
    Config,
    Default,
}

/// `--seed`, then `EDGEFLOW_SEED`, then the config's `seed`, then 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> CliResult<(u64, SeedSource)> {
    if let Some(s) = flag {
        return Ok((s, SeedSource::Flag));
    }
    if let Ok(raw) = std::env::var(SEED_ENV) {
        let s = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Invalid(format!("{SEED_ENV} must be an unsigned integer, got `{raw}`")))?;
        return Ok((s, SeedSource::Env));
    }
    Ok(match config {
        Some(s) => (s, SeedSource::Config),
        None => (0, SeedSource::Default),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Gaussian mixture generated from the run seed.
    Mixture,
    /// `label,f0,f1,...` CSV.
    Csv,
}

fn default_test_fraction() -> f64 {
    0.2
}

/// The `[data]` table.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub classes: Option<usize>,
    pub dims: Option<usize>,
    pub per_class: Option<usize>,
    pub separation: Option<f64>,
    pub path: Option<PathBuf>,
    /// Held-out CSV; without it `test_fraction` of the data is split off.
    pub test_path: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Per-sample shape the flat features are reshaped to, e.g. `[4, 2, 2]`.
    pub shape: Option<Vec<usize>>,
}

pub struct Splits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl DataConfig {
    /// Files this table reads.
    pub fn input_paths(&self, base: &Path) -> Vec<PathBuf> {
        match self.kind {
            DataKind::Mixture => Vec::new(),
            DataKind::Csv => self.path.iter().chain(&self.test_path).map(|p| base.join(p)).collect(),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: &str| Err(CliError::Invalid(format!("[data]: {m}")));
        match self.kind {
            DataKind::Mixture => {
                if self.classes.is_none() || self.dims.is_none() {
                    return bad("a mixture needs `classes` and `dims`");
                }
                if self.path.is_some() || self.test_path.is_some() {
                    return bad("a mixture takes no `path` or `test_path`");
                }
            }
            DataKind::Csv => {
                if self.path.is_none() {
                    return bad("csv data needs `path`");
                }
                if self.classes.is_some() || self.dims.is_some() || self.per_class.is_some() || self.separation.is_some() {
                    return bad("`classes`, `dims`, `per_class` and `separation` only apply to a mixture");
                }
            }
        }
        if self.test_path.is_none() && !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("`test_fraction` must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn load(&self, base: &Path, seed: u64) -> CliResult<Splits> {
        self.validate()?;
        let read = |p: &PathBuf| {
            let path = base.join(p);
            load_dataset(&path).map_err(|source| CliError::Input { path, source })
        };
        let all = match self.kind {
            DataKind::Mixture => gen_mixture(
                self.classes.unwrap_or_default(),
                self.dims.unwrap_or_default(),
                self.per_class.unwrap_or(200),
                self.separation.unwrap_or(3.0),
                derive_seed(seed, &[DATA_STREAM]),
            )
            .map_err(|e| CliError::Invalid(format!("[data]: {e}")))?,
            DataKind::Csv => read(self.path.as_ref().expect("validated"))?,
        };
        let (train, test) = match &self.test_path {
            Some(p) => {
                let test = read(p)?;
                if test.inputs.item_len() != all.inputs.item_len() {
                    return Err(CliError::Invalid(format!(
                        "[data]: test set has {} features, training set {}",
                        test.inputs.item_len(),
                        all.inputs.item_len()
                    )));
                }
                let classes = all.classes.max(test.classes);
                (
                    LabeledDataset { classes, ..all },
                    LabeledDataset { classes, ..test },
                )
            }
            None => all.split(self.test_fraction, derive_seed(seed, &[SPLIT_STREAM]))?,
        };
        match &self.shape {
            None => Ok(Splits { train, test }),
            Some(shape) => {
                let per: usize = shape.iter().product();
                if per != train.inputs.item_len() {
                    return Err(CliError::Invalid(format!(
                        "[data]: shape {shape:?} holds {per} values, samples have {}",
                        train.inputs.item_len()
                    )));
                }
                Ok(Splits {
                    train: train.reshaped(shape)?,
                    test: test.reshaped(shape)?,
                })
            }
        }
    }
}

/// A model spec file, or a zoo architecture sized to the data.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    File(PathBuf),
    Zoo(ZooModel),
}

fn three() -> usize {
    3
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ZooModel {
    Mlp {
        hidden: Vec<usize>,
    },
    Cnn {
        channels: Vec<usize>,
        #[serde(default = "three")]
        kernel: usize,
        #[serde(default = "one")]
        padding: usize,
    },
    Wrn {
        depth: usize,
        widen: usize,
    },
}

impl ModelSource {
    pub fn input_paths(&self, base: &Path) -> Vec<PathBuf> {
        match self {
            ModelSource::File(p) => vec![base.join(p)],
            ModelSource::Zoo(_) => Vec::new(),
        }
    }

    /// Spec taking `input_shape` samples to `classes` logits.
    pub fn build(&self, base: &Path, input_shape: &[usize], classes: usize) -> CliResult<ModelSpec> {
        let spec = match self {
            ModelSource::File(p) => {
                let path = base.join(p);
                ModelSpec::load(&path).map_err(|source| CliError::Input { path, source })?
            }
            ModelSource::Zoo(ZooModel::Mlp { hidden }) => match input_shape {
                [n] => zoo::mlp(*n, hidden, classes),
                _ => return Err(CliError::Invalid(format!("an mlp needs flat samples, data has shape {input_shape:?}"))),
            },
            ModelSource::Zoo(ZooModel::Cnn { channels, kernel, padding }) => match input_shape {
                [c, h, w] => zoo::small_cnn([*c, *h, *w], channels, *kernel, *padding, classes),
                _ => {
                    return Err(CliError::Invalid(format!(
                        "a cnn needs (channels, height, width) samples, data has shape {input_shape:?}; set [data] shape"
                    )))
                }
            },
            ModelSource::Zoo(ZooModel::Wrn { depth, widen }) => {
                if *depth < 10 || (depth - 4) % 6 != 0 || *widen == 0 {
                    return Err(CliError::Invalid(format!(
                        "wrn depth must be 6n+4 (at least 10) and widen positive, got {depth} and {widen}"
                    )));
                }
                zoo::wrn(*depth, *widen, classes)
            }
        };
        if spec.input_shape != input_shape {
            return Err(CliError::Invalid(format!(
                "model takes samples of shape {:?}, data has {:?}",
                spec.input_shape, input_shape
            )));
        }
        let out = spec.output_shape().map_err(|e| CliError::Invalid(e.to_string()))?;
        if out != [classes] {
            return Err(CliError::Invalid(format!("model outputs {out:?}, data has {classes} classes")));
        }
        Ok(spec)
    }
}

/// Rejects a missing section with the config path in the message.
pub fn section<'a, T>(cfg: &'a Loaded<impl Sized>, value: &'a Option<T>, name: &str) -> CliResult<&'a T> {
    value.as_ref().ok_or_else(|| CliError::Config {
        path: cfg.path.clone(),
        message: format!("missing [{name}] table"),
    })
}
