//! Run configuration: one JSON file plus command-line overrides.

use std::path::Path;

use nlran::data::{PhantomSpec, PreprocessConfig};
use nlran::trainer::TrainConfig;
use nlran::NetworkConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

fn default_count() -> usize {
    300
}
fn default_ratios() -> [usize; 3] {
    [8, 1, 1]
}

/// Everything a subcommand needs besides input/output paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for phantoms, split assignment, weight init and batch order.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub phantoms: PhantomSpec,
    #[serde(default = "default_count")]
    pub phantom_count: usize,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default = "default_ratios")]
    pub split_ratios: [usize; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

/// Values given on the command line; `None` leaves the file or default.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub count: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {}", path.display(), e)))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {}", path.display(), e)))
    }

    /// Defaults, then the file, then command-line flags. Seeds are
    /// propagated into the nested sections.
    pub fn resolve(path: Option<&Path>, ov: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if ov.deterministic {
            cfg.deterministic = true;
        }
        if let Some(c) = ov.count {
            cfg.phantom_count = c;
        }
        cfg.train.seed = cfg.seed;
        cfg.phantoms.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.phantoms.validate()?;
        let expect = [self.preprocess.slices, self.preprocess.crop[0], self.preprocess.crop[1]];
        if self.network.input_shape != expect {
            return Err(CliError::Usage(format!(
                "network input_shape {:?} must equal the preprocessed shape {:?}",
                self.network.input_shape, expect
            )));
        }
        if self.split_ratios.iter().any(|&r| r == 0) {
            return Err(CliError::Usage(format!("split ratios must be positive: {:?}", self.split_ratios)));
        }
        if self.phantom_count == 0 {
            return Err(CliError::Usage("phantom_count must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
