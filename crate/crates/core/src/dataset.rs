//! Interaction logs and the on-disk dataset layout.
//!
//! A dataset directory holds `users.dase`/`users.ids`, `ads.dase`/`ads.ids`,
//! `interactions.jsonl` and, for synthetic data, `ground_truth.json`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use das_numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::embio::{read_embeddings, EmbeddingTable};
use crate::error::{DasError, Result};

pub const USERS_FILE: &str = "users.dase";
pub const ADS_FILE: &str = "ads.dase";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionRecord {
    pub user_id: String,
    pub ad_id: String,
    pub click: u8,
    pub ts: i64,
    pub user_bias_feats: Vec<f64>,
    pub ad_bias_feats: Vec<f64>,
}

/// An interaction resolved to entity row indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub user: usize,
    pub ad: usize,
    pub click: bool,
    pub ts: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub users: EmbeddingTable,
    pub ads: EmbeddingTable,
    pub events: Vec<Event>,
    /// Per-user bias features (`n_users × user_bias_dim`); zeros for users
    /// absent from the log.
    pub user_bias: Tensor,
    pub ad_bias: Tensor,
}

/// Chronological train/test partition of event indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn from_records(users: EmbeddingTable, ads: EmbeddingTable, records: &[InteractionRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(DasError::Invalid("dataset has no interactions".into()));
        }
        let ub = records[0].user_bias_feats.len();
        let ab = records[0].ad_bias_feats.len();
        if ub == 0 || ab == 0 {
            return Err(DasError::Invalid("bias feature vectors must be non-empty".into()));
        }
        let mut user_bias = Tensor::zeros(&[users.len(), ub]);
        let mut ad_bias = Tensor::zeros(&[ads.len(), ab]);
        let mut seen_u = vec![false; users.len()];
        let mut seen_a = vec![false; ads.len()];
        let mut events = Vec::with_capacity(records.len());
        for (n, r) in records.iter().enumerate() {
            let user = users
                .index
                .index(&r.user_id)
                .ok_or_else(|| DasError::UnknownEntity { side: "user".into(), id: r.user_id.clone() })?;
            let ad = ads
                .index
                .index(&r.ad_id)
                .ok_or_else(|| DasError::UnknownEntity { side: "ad".into(), id: r.ad_id.clone() })?;
            if r.click > 1 {
                return Err(DasError::Invalid(format!("record {n}: click must be 0 or 1")));
            }
            if r.user_bias_feats.len() != ub || r.ad_bias_feats.len() != ab {
                return Err(DasError::Invalid(format!(
                    "record {n}: bias feature lengths ({}, {}) differ from ({ub}, {ab})",
                    r.user_bias_feats.len(),
                    r.ad_bias_feats.len()
                )));
            }
            if r.user_bias_feats.iter().chain(&r.ad_bias_feats).any(|v| !v.is_finite()) {
                return Err(DasError::Invalid(format!("record {n}: non-finite bias feature")));
            }
            if !seen_u[user] {
                seen_u[user] = true;
                user_bias.row_mut(user).copy_from_slice(&r.user_bias_feats);
            }
            if !seen_a[ad] {
                seen_a[ad] = true;
                ad_bias.row_mut(ad).copy_from_slice(&r.ad_bias_feats);
            }
            events.push(Event { user, ad, click: r.click == 1, ts: r.ts });
        }
        Ok(Self { users, ads, events, user_bias, ad_bias })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let users = read_embeddings(&dir.join(USERS_FILE))?;
        let ads = read_embeddings(&dir.join(ADS_FILE))?;
        let records = read_interactions(&dir.join(INTERACTIONS_FILE))?;
        Self::from_records(users, ads, &records)
    }

    /// First `train_fraction` of events by `(ts, position)` train, rest test.
    pub fn chronological_split(&self, train_fraction: f64) -> Split {
        let mut order: Vec<usize> = (0..self.events.len()).collect();
        order.sort_by_key(|&i| (self.events[i].ts, i));
        let cut = ((self.events.len() as f64) * train_fraction).floor() as usize;
        let test = order.split_off(cut);
        Split { train: order, test }
    }

    pub fn clicked_pairs(&self, indices: &[usize]) -> Vec<(usize, usize)> {
        indices.iter().map(|&i| self.events[i]).filter(|e| e.click).map(|e| (e.user, e.ad)).collect()
    }
}

pub fn read_interactions(path: &Path) -> Result<Vec<InteractionRecord>> {
    let f = fs::File::open(path).map_err(|e| DasError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| DasError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: InteractionRecord =
            serde_json::from_str(&line).map_err(|e| DasError::json(format!("{} line {}", path.display(), n + 1), e))?;
        out.push(r);
    }
    Ok(out)
}

pub fn write_interactions(path: &Path, records: &[InteractionRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| DasError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| DasError::json("interaction", e))?;
        writeln!(w, "{line}").map_err(|e| DasError::io(path, e))?;
    }
    w.flush().map_err(|e| DasError::io(path, e))
}
