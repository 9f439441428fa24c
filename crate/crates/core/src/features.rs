//! Sparse and dense features derived from semantic IDs, and a factorized
//! logistic CTR probe that measures what they are worth.
//!
//! Sparse features are plain strings. The leading token names the side a
//! feature describes (`user_`, `ad_`); anything else (cross counts) is a
//! pair-level feature. The probe hashes each string with 64-bit FNV-1a into
//! `2^hash_bits` buckets.

use std::collections::HashMap;

use das_numerics::{Optimizer, OptimizerConfig, ParamStore, SeededRng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::embio::EmbeddingTable;
use crate::error::{DasError, Result};
use crate::eval::auc;
use crate::trainer::DasModel;
use crate::types::{SemanticId, Side};

/// `{tag}_l{k}={c_1}_..._{c_k}` for k = 1..L.
pub fn prefix_ngram(side_tag: &str, sid: &SemanticId) -> Vec<String> {
    (1..=sid.levels()).map(|k| format!("{side_tag}_l{k}={}", sid.prefix(k))).collect()
}

/// Level-k list holds each history item's first k codes joined by `_`.
pub fn listwise(history: &[SemanticId], levels: usize) -> Vec<Vec<String>> {
    (1..=levels).map(|k| history.iter().map(|s| s.prefix(k)).collect()).collect()
}

/// `user_l{k}_sids=[a, b]` rendering of [`listwise`] output.
pub fn render_listwise(side_tag: &str, lists: &[Vec<String>]) -> Vec<String> {
    lists.iter().enumerate().map(|(k, items)| format!("{side_tag}_l{}_sids=[{}]", k + 1, items.join(", "))).collect()
}

/// Level-k count of history items sharing the candidate's first k codes.
pub fn cross_count(history: &[SemanticId], candidate: &SemanticId) -> Vec<usize> {
    let c = candidate.codes();
    (1..=c.len()).map(|k| history.iter().filter(|h| h.codes().len() >= k && h.codes()[..k] == c[..k]).count()).collect()
}

pub fn render_cross_count(counts: &[usize]) -> Vec<String> {
    counts.iter().enumerate().map(|(k, n)| format!("cross_cnt_l{}={n}", k + 1)).collect()
}

/// Frozen copy of an entity's sid-pooled embedding.
pub fn dense_feature(model: &DasModel, side: Side, table: &EmbeddingTable, id: &str) -> Result<Vec<f64>> {
    let s = table.get(id).ok_or_else(|| DasError::UnknownEntity { side: side.to_string(), id: id.to_string() })?;
    let q = model.quantizer(side);
    let r0 = q.encode_values(&model.store, &Tensor::matrix(1, s.len(), s.to_vec())?)?;
    let (sid, _, _) = q.quantize_latent(&model.store, r0.row(0))?;
    q.pooled_sid_embedding(&model.store, &sid)
}

/// Sids and pooled embeddings of every entity in a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SidTables {
    pub user_sids: Vec<SemanticId>,
    pub ad_sids: Vec<SemanticId>,
    pub user_dense: Vec<Vec<f64>>,
    pub ad_dense: Vec<Vec<f64>>,
}

impl SidTables {
    pub fn infer(model: &DasModel, data: &Dataset) -> Result<Self> {
        let (user_sids, user_dense) = model.infer(Side::User, &data.users.vectors)?.into_iter().unzip();
        let (ad_sids, ad_dense) = model.infer(Side::Ad, &data.ads.vectors)?.into_iter().unzip();
        Ok(Self { user_sids, ad_sids, user_dense, ad_dense })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureToggles {
    pub ids: bool,
    pub prefix_ngram: bool,
    pub listwise: bool,
    pub cross_count: bool,
    pub dense: bool,
}

impl Default for FeatureToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl FeatureToggles {
    pub fn ids_only() -> Self {
        Self { ids: true, prefix_ngram: false, listwise: false, cross_count: false, dense: false }
    }

    pub fn all() -> Self {
        Self { ids: true, prefix_ngram: true, listwise: true, cross_count: true, dense: true }
    }

    /// Ids plus prefix-ngram sids: the setting used for variant comparisons.
    pub fn prefix() -> Self {
        Self { prefix_ngram: true, ..Self::ids_only() }
    }

    fn needs_sids(&self) -> bool {
        self.prefix_ngram || self.listwise || self.cross_count || self.dense
    }
}

/// One featurized impression, as written to JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub label: u8,
    pub sparse: Vec<String>,
    pub dense: Vec<f64>,
}

/// Featurizes every event in chronological order. The history of an event is
/// the user's most recent `history_len` clicked ads strictly before it.
pub fn featurize(
    data: &Dataset,
    sids: Option<&SidTables>,
    toggles: FeatureToggles,
    history_len: usize,
) -> Result<Vec<Example>> {
    if toggles.needs_sids() && sids.is_none() {
        return Err(DasError::Invalid("sid features requested without a model".into()));
    }
    let split = data.chronological_split(1.0);
    let mut history: Vec<Vec<usize>> = vec![Vec::new(); data.users.len()];
    let mut out = Vec::with_capacity(split.train.len());
    for &i in &split.train {
        let e = data.events[i];
        let mut sparse = Vec::new();
        let mut dense = Vec::new();
        if toggles.ids {
            sparse.push(format!("user_id={}", data.users.index.id(e.user)));
            sparse.push(format!("ad_id={}", data.ads.index.id(e.ad)));
        }
        if let Some(t) = sids {
            let (us, is) = (&t.user_sids[e.user], &t.ad_sids[e.ad]);
            if toggles.prefix_ngram {
                sparse.extend(prefix_ngram("user", us));
                sparse.extend(prefix_ngram("ad", is));
            }
            let hist: Vec<SemanticId> = history[e.user].iter().map(|&a| t.ad_sids[a].clone()).collect();
            if toggles.listwise {
                for (k, items) in listwise(&hist, is.levels()).into_iter().enumerate() {
                    sparse.extend(items.into_iter().map(|s| format!("user_l{}_sids={s}", k + 1)));
                }
            }
            if toggles.cross_count {
                sparse.extend(render_cross_count(&cross_count(&hist, is)));
            }
            if toggles.dense {
                dense.extend_from_slice(&t.user_dense[e.user]);
                dense.extend_from_slice(&t.ad_dense[e.ad]);
            }
        }
        out.push(Example { label: e.click as u8, sparse, dense });
        if e.click && history_len > 0 {
            let h = &mut history[e.user];
            if h.len() == history_len {
                h.remove(0);
            }
            h.push(e.ad);
        }
    }
    Ok(out)
}

pub fn write_examples(path: &std::path::Path, examples: &[Example]) -> Result<()> {
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, ex).map_err(|e| DasError::json("example", e))?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| DasError::io(path, e))
}

pub fn read_examples(path: &std::path::Path) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path).map_err(|e| DasError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| DasError::json(format!("{}:{}", path.display(), n + 1), e)))
        .collect()
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn bucket(feature: &str, hash_bits: u32) -> u64 {
    fnv1a64(feature.as_bytes()) & ((1u64 << hash_bits) - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldSide {
    User,
    Ad,
    Pair,
}

pub fn field_side(feature: &str) -> FieldSide {
    if feature.starts_with("user_") {
        FieldSide::User
    } else if feature.starts_with("ad_") {
        FieldSide::Ad
    } else {
        FieldSide::Pair
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hash_bits: u32,
    /// Width of the user-side × ad-side factorized interaction.
    pub rank: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hash_bits: 18, rank: 8, lr: 0.01, epochs: 2, batch_size: 256, weight_decay: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub auc: f64,
    pub train_examples: usize,
    pub test_examples: usize,
    pub active_buckets: usize,
}

/// Hashed examples: bucket rows split by side, plus dense values.
struct Encoded {
    all: Vec<Vec<usize>>,
    user: Vec<Vec<usize>>,
    ad: Vec<Vec<usize>>,
    dense: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

/// Maps buckets to compact table rows. Only buckets seen in training get a
/// row; any other bucket keeps its initial zero weight, so it is dropped.
struct Buckets {
    bits: u32,
    rows: HashMap<u64, usize>,
}

impl Buckets {
    fn encode(&mut self, examples: &[Example], grow: bool) -> Encoded {
        let mut enc = Encoded {
            all: Vec::with_capacity(examples.len()),
            user: Vec::with_capacity(examples.len()),
            ad: Vec::with_capacity(examples.len()),
            dense: Vec::with_capacity(examples.len()),
            labels: Vec::with_capacity(examples.len()),
        };
        for ex in examples {
            let (mut all, mut user, mut ad) = (Vec::new(), Vec::new(), Vec::new());
            for f in &ex.sparse {
                let b = bucket(f, self.bits);
                let row = if grow {
                    let next = self.rows.len();
                    Some(*self.rows.entry(b).or_insert(next))
                } else {
                    self.rows.get(&b).copied()
                };
                let Some(row) = row else { continue };
                all.push(row);
                match field_side(f) {
                    FieldSide::User => user.push(row),
                    FieldSide::Ad => ad.push(row),
                    FieldSide::Pair => {}
                }
            }
            enc.all.push(all);
            enc.user.push(user);
            enc.ad.push(ad);
            enc.dense.push(ex.dense.clone());
            enc.labels.push(ex.label as f64);
        }
        enc
    }
}

/// `logit = b + Σ w_f + ⟨Σ_user v_f, Σ_ad v_f⟩ + w_dᵀx`.
fn probe_logits(tape: &mut Tape, store: &ParamStore, enc: &Encoded, rows: &[usize]) -> Result<Var> {
    let pick = |bags: &Vec<Vec<usize>>| -> Vec<Vec<usize>> { rows.iter().map(|&r| bags[r].clone()).collect() };
    let w = tape.param(store, "probe.linear")?;
    let b = tape.param(store, "probe.bias")?;
    let lin = tape.embedding_bag(w, &pick(&enc.all))?;
    let mut logits = tape.add_bias(lin, b)?;
    if store.contains("probe.dense") {
        let dim = enc.dense[rows[0]].len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            data.extend_from_slice(&enc.dense[r]);
        }
        let x = tape.constant(Tensor::matrix(rows.len(), dim, data)?);
        let wd = tape.param(store, "probe.dense")?;
        let d = tape.matmul(x, wd)?;
        logits = tape.add(logits, d)?;
    }
    let logits = tape.reshape(logits, &[rows.len()])?;
    let v = tape.param(store, "probe.factors")?;
    let vu = tape.embedding_bag(v, &pick(&enc.user))?;
    let vi = tape.embedding_bag(v, &pick(&enc.ad))?;
    let inter = tape.row_dot(vu, vi)?;
    Ok(tape.add(logits, inter)?)
}

/// Trains the probe on `train` and reports its AUC on `test`.
pub fn ctr_probe(train: &[Example], test: &[Example], config: ProbeConfig) -> Result<ProbeResult> {
    let test_pos = test.iter().filter(|e| e.label == 1).count();
    if test_pos == 0 || test_pos == test.len() {
        return Err(DasError::DegenerateLabels(format!(
            "probe test set has {test_pos} positives out of {}",
            test.len()
        )));
    }
    if train.is_empty() {
        return Err(DasError::Invalid("probe: empty training set".into()));
    }
    if !(1..=32).contains(&config.hash_bits) || config.rank == 0 || config.batch_size == 0 {
        return Err(DasError::Invalid("probe: hash_bits in 1..=32, rank and batch_size ≥ 1".into()));
    }
    let dense_dim = train[0].dense.len();
    if let Some(e) = train.iter().chain(test).find(|e| e.dense.len() != dense_dim) {
        return Err(DasError::Invalid(format!("probe: dense width {} differs from {dense_dim}", e.dense.len())));
    }
    let mut buckets = Buckets { bits: config.hash_bits, rows: HashMap::new() };
    let tr = buckets.encode(train, true);
    let te = buckets.encode(test, false);
    let n_rows = buckets.rows.len().max(1);

    let root = SeededRng::new(config.seed).fork("probe");
    let mut init = root.fork("init");
    let mut store = ParamStore::new();
    store.insert("probe.linear", Tensor::zeros(&[n_rows, 1]))?;
    store.insert("probe.bias", Tensor::zeros(&[1]))?;
    let factors: Vec<f64> = (0..n_rows * config.rank).map(|_| 0.01 * init.normal()).collect();
    store.insert("probe.factors", Tensor::matrix(n_rows, config.rank, factors)?)?;
    if dense_dim > 0 {
        store.insert("probe.dense", Tensor::zeros(&[dense_dim, 1]))?;
    }
    let mut opt = Optimizer::new(OptimizerConfig { weight_decay: config.weight_decay, ..OptimizerConfig::default() });
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        root.fork_indexed("shuffle", epoch as u64).shuffle(&mut order);
        for rows in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let logits = probe_logits(&mut tape, &store, &tr, rows)?;
            let labels: Vec<f64> = rows.iter().map(|&r| tr.labels[r]).collect();
            let loss = tape.sigmoid_bce(logits, &labels)?;
            tape.backward(loss)?.accumulate_into(&mut store)?;
            opt.step(&mut store, config.lr)?;
        }
    }
    let mut scores = Vec::with_capacity(test.len());
    let all: Vec<usize> = (0..test.len()).collect();
    for rows in all.chunks(4096) {
        let mut tape = Tape::new();
        let logits = probe_logits(&mut tape, &store, &te, rows)?;
        scores.extend_from_slice(tape.value(logits).data());
    }
    let labels: Vec<bool> = test.iter().map(|e| e.label == 1).collect();
    Ok(ProbeResult {
        auc: auc(&scores, &labels)?,
        train_examples: train.len(),
        test_examples: test.len(),
        active_buckets: buckets.rows.len(),
    })
}

/// Chronological train/test cut of featurized examples.
pub fn split_examples(examples: &[Example], train_fraction: f64) -> (&[Example], &[Example]) {
    let cut = ((examples.len() as f64) * train_fraction).floor() as usize;
    examples.split_at(cut.min(examples.len()))
}
