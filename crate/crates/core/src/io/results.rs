use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_with_digest;
use crate::error::{Error, Result};

/// Settings and inputs that produced a results document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub similarity: Option<String>,
    pub tl_mode: Option<String>,
    pub marginal: Option<String>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub mc_n: Option<usize>,
    pub shortlist: Option<usize>,
    #[serde(default)]
    pub k: Vec<usize>,
    /// Input file name to SHA-256.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    #[serde(default)]
    pub settings: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsDoc {
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub counts: BTreeMap<String, usize>,
    pub provenance: Provenance,
}

impl ResultsDoc {
    pub fn render(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("results serialize");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_with_digest(path.as_ref(), self.render().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&body).map_err(|e| Error::Manifest {
            path: path.display().to_string(),
            line: 1,
            detail: e.to_string(),
        })
    }
}
