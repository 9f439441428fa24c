use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DasError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Ad,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::User => "user",
            Side::Ad => "ad",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Side {
    type Err = DasError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user" => Ok(Side::User),
            "ad" => Ok(Side::Ad),
            other => Err(DasError::Invalid(format!("side must be `user` or `ad`, got `{other}`"))),
        }
    }
}

/// Hierarchical code sequence, one index per codebook level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticId(pub Vec<usize>);

impl SemanticId {
    pub fn codes(&self) -> &[usize] {
        &self.0
    }

    pub fn levels(&self) -> usize {
        self.0.len()
    }

    /// First `k` codes joined by `_`.
    pub fn prefix(&self, k: usize) -> String {
        let parts: Vec<String> = self.0[..k].iter().map(usize::to_string).collect();
        parts.join("_")
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for SemanticId {
    type Err = DasError;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| DasError::Invalid(format!("bad code `{p}` in sid `{s}`"))))
            .collect::<Result<Vec<_>>>()
            .map(SemanticId)
    }
}

/// Bidirectional map between external string ids and dense row indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntityIndex {
    ids: Vec<String>,
    by_id: HashMap<String, usize>,
}

impl EntityIndex {
    pub fn new(ids: Vec<String>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if by_id.insert(id.clone(), i).is_some() {
                return Err(DasError::Invalid(format!("duplicate entity id `{id}`")));
            }
        }
        Ok(Self { ids, by_id })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn index(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }
}
