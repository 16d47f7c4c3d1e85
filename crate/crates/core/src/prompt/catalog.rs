use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PromptError;

pub const DEFAULT_CATALOG: &str = include_str!("../../config/directions.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionDirection {
    pub label: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DirectionCatalog {
    directions: Vec<InterventionDirection>,
}

#[derive(Deserialize)]
struct CatalogFile {
    #[serde(default, rename = "direction")]
    directions: Vec<InterventionDirection>,
}

impl DirectionCatalog {
    pub fn new(directions: Vec<InterventionDirection>) -> Result<Self, PromptError> {
        let mut seen = HashSet::new();
        for d in &directions {
            if d.label.trim().is_empty() {
                return Err(PromptError::Catalog("empty direction label".into()));
            }
            if !seen.insert(d.label.as_str()) {
                return Err(PromptError::Catalog(format!("duplicate direction label {:?}", d.label)));
            }
        }
        Ok(Self { directions })
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let file: CatalogFile = toml::from_str(text).map_err(|e| PromptError::Catalog(e.to_string()))?;
        Self::new(file.directions)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PromptError::Catalog(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_CATALOG).expect("bundled direction catalog is valid")
    }

    pub fn directions(&self) -> &[InterventionDirection] {
        &self.directions
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}
