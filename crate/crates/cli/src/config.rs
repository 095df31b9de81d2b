use std::path::{Path, PathBuf};

use lrmix::gibbs::GibbsOptions;
use lrmix::model::{HyperParams, ResponseFamily};
use lrmix::selection::GridSpec;
use lrmix::vi::ViOptions;
use lrmix::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Vi,
    Gibbs,
}

/// JSON run configuration. Command-line flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub x: Option<PathBuf>,
    pub y: Option<PathBuf>,
    pub offsets: Option<PathBuf>,
    /// One entry per Y column, e.g. `gaussian`, `bernoulli`, `negbin:10`.
    pub families: Vec<String>,
    pub k: usize,
    pub r_max: usize,
    pub grid: GridSpec,
    pub hyper: Option<HyperParams>,
    pub engine: Engine,
    pub seed: u64,
    pub vi: ViOptions,
    pub gibbs: GibbsOptions,
    pub robust_scale: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            x: None,
            y: None,
            offsets: None,
            families: Vec::new(),
            k: 2,
            r_max: 2,
            grid: GridSpec { k: vec![1, 2, 3], r_max: vec![1, 2], r_nb: vec![5.0, 10.0, 20.0] },
            hyper: None,
            engine: Engine::Vi,
            seed: 1,
            vi: ViOptions::default(),
            gibbs: GibbsOptions::default(),
            robust_scale: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn families(&self) -> Result<Vec<ResponseFamily>> {
        if self.families.is_empty() {
            return Err(Error::config("no response families given (use --families or the config)"));
        }
        self.families.iter().map(|s| s.parse()).collect()
    }

    pub fn data_paths(&self) -> Result<(&Path, &Path)> {
        match (&self.x, &self.y) {
            (Some(x), Some(y)) => Ok((x, y)),
            _ => Err(Error::config("both --x and --y (or config x and y) are required")),
        }
    }
}
