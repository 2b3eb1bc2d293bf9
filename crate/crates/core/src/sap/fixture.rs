//! Record-replay of attribute-source responses.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::source::{AttributeSource, Query};
use crate::attributes::AttributeOrigin;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub question: String,
    pub category: String,
    pub image_ids: Vec<String>,
    pub response: String,
}

impl FixtureRecord {
    fn matches(&self, q: &Query<'_>) -> bool {
        self.question == q.prompt && self.category == q.category && self.image_ids == q.image_ids
    }
}

pub fn load_fixtures(path: &Path) -> Result<Vec<FixtureRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "record responses first or choose another source backend".into(),
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_fixtures(records: &[FixtureRecord], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(records).map_err(|e| Error::input(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Replays recorded responses; a query with no recording is an input error.
#[derive(Debug, Clone, Default)]
pub struct FixtureSource {
    pub records: Vec<FixtureRecord>,
}

impl FixtureSource {
    pub fn new(records: Vec<FixtureRecord>) -> Self {
        Self { records }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(load_fixtures(path)?))
    }
}

impl AttributeSource for FixtureSource {
    fn origin(&self) -> AttributeOrigin {
        AttributeOrigin::Fixture
    }

    fn ask(&mut self, q: &Query<'_>) -> Result<String> {
        self.records
            .iter()
            .find(|r| r.matches(q))
            .map(|r| r.response.clone())
            .ok_or_else(|| {
                Error::input(format!(
                    "no recorded {:?} response for category '{}' (round {})",
                    q.question, q.category, q.round
                ))
            })
    }
}

/// Wraps a source and keeps every exchange for later replay.
pub struct Recorder<S> {
    pub inner: S,
    pub records: Vec<FixtureRecord>,
}

impl<S: AttributeSource> Recorder<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            records: Vec::new(),
        }
    }
}

impl<S: AttributeSource> AttributeSource for Recorder<S> {
    fn origin(&self) -> AttributeOrigin {
        self.inner.origin()
    }

    fn ask(&mut self, q: &Query<'_>) -> Result<String> {
        let response = self.inner.ask(q)?;
        self.records.push(FixtureRecord {
            question: q.prompt.clone(),
            category: q.category.to_string(),
            image_ids: q.image_ids.to_vec(),
            response: response.clone(),
        });
        Ok(response)
    }
}
