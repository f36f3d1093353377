//! JSON configuration files. Unknown fields are rejected everywhere.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{scenario_grid, FamilySpec, ScenarioConfig, SimSettings};

/// Input of the `simulate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub settings: SimSettings,
    pub families: Vec<FamilySpec>,
}

impl SimulateConfig {
    pub fn scenarios(&self) -> Result<Vec<ScenarioConfig>> {
        self.settings.validate()?;
        if self.families.is_empty() {
            return Err(Error::Config("`families` is empty".into()));
        }
        scenario_grid(&self.families)
    }
}

/// Parses JSON text; syntax and schema errors become configuration errors with their location.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
