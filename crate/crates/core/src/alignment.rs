//! Contrastive alignment between quantized representations (`z_u`, `z_i`) and
//! debiased CF representations (`c_u^int`, `c_i^pro`), plus the co-occurrence
//! memory bank.

use std::collections::VecDeque;

use das_numerics::{CandidateRow, SeededRng, Tape, Tensor, Var};

use crate::error::{DasError, Result};

/// One batch of click-positive rows. `c_u`/`c_i` are whichever CF
/// representations the run aligns against (debiased by default).
#[derive(Debug, Clone)]
pub struct AlignBatch {
    pub z_u: Var,
    pub z_i: Var,
    pub c_u: Var,
    pub c_i: Var,
    pub users: Vec<usize>,
    pub ads: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignOptions {
    pub l_neg: usize,
    /// Logits are divided by this; 1 leaves bare inner products.
    pub temperature: f64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self { l_neg: 32, temperature: 1.0 }
    }
}

/// Negative rows per anchor row, and how many anchors got fewer than asked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSample {
    pub rows: Vec<Vec<usize>>,
    pub truncated: usize,
}

/// For each row `b`, up to `l_neg` distinct other rows `j` whose key differs
/// from `keys[b]`, so an anchor never meets its own positive as a negative.
pub fn sample_negatives(keys: &[usize], l_neg: usize, rng: &mut SeededRng) -> NegativeSample {
    let mut rows = Vec::with_capacity(keys.len());
    let mut truncated = 0;
    for (b, &k) in keys.iter().enumerate() {
        let pool: Vec<usize> = (0..keys.len()).filter(|&j| j != b && keys[j] != k).collect();
        if pool.len() < l_neg {
            truncated += 1;
        }
        rows.push(rng.sample_distinct(&pool, l_neg));
    }
    if truncated > 0 {
        log::warn!(
            "negative sampling: {truncated} of {} rows had fewer than {l_neg} eligible in-batch negatives",
            keys.len()
        );
    }
    NegativeSample { rows, truncated }
}

fn scaled_logits(tape: &mut Tape, a: Var, b: Var, temperature: f64) -> Result<Var> {
    let l = tape.matmul_nt(a, b)?;
    if temperature == 1.0 {
        Ok(l)
    } else {
        Ok(tape.scale(l, 1.0 / temperature)?)
    }
}

/// Cross-entropy with the diagonal as target and the given negative columns.
fn contrast_with(
    tape: &mut Tape,
    logits: Var,
    negatives: &[Vec<usize>],
    positive_col: impl Fn(usize) -> usize,
) -> Result<Option<Var>> {
    let rows: Vec<CandidateRow> = negatives
        .iter()
        .enumerate()
        .filter(|(_, n)| !n.is_empty())
        .map(|(b, n)| CandidateRow {
            row: b,
            columns: std::iter::once(positive_col(b)).chain(n.iter().copied()).collect(),
        })
        .collect();
    if rows.is_empty() {
        return Ok(None);
    }
    Ok(Some(tape.softmax_xent(logits, rows)?))
}

/// `(L_a_u2i_zu, L_a_u2i_zi)`: `z_u` against `c_i`, and `c_u` against `z_i`,
/// each with the same sampled in-batch negatives.
pub fn dual_u2i_losses(
    tape: &mut Tape,
    batch: &AlignBatch,
    opts: AlignOptions,
    rng: &mut SeededRng,
) -> Result<(Var, Var)> {
    if batch.ads.len() < 2 || opts.l_neg == 0 {
        return Err(DasError::Invalid(format!(
            "dual u2i alignment needs at least 2 positives and L_neg ≥ 1 (got {} and {})",
            batch.ads.len(),
            opts.l_neg
        )));
    }
    let neg = sample_negatives(&batch.ads, opts.l_neg, rng);
    let l5 = scaled_logits(tape, batch.z_u, batch.c_i, opts.temperature)?;
    let l6 = scaled_logits(tape, batch.c_u, batch.z_i, opts.temperature)?;
    let no_neg = || DasError::Invalid("dual u2i alignment: every row shares one ad, no negatives".into());
    let a = contrast_with(tape, l5, &neg.rows, |b| b)?.ok_or_else(no_neg)?;
    let b = contrast_with(tape, l6, &neg.rows, |b| b)?.ok_or_else(no_neg)?;
    Ok((a, b))
}

/// `(L_a_u2u_zu, L_a_i2i_zi)`: full in-batch softmax of `z` against the same
/// side's CF representation.
pub fn dual_view_losses(tape: &mut Tape, batch: &AlignBatch, temperature: f64) -> Result<(Var, Var)> {
    let b = batch.users.len();
    if b < 2 {
        return Err(DasError::Invalid(format!("dual view alignment needs B ≥ 2, got {b}")));
    }
    let rows: Vec<CandidateRow> = (0..b)
        .map(|r| CandidateRow { row: r, columns: std::iter::once(r).chain((0..b).filter(|&j| j != r)).collect() })
        .collect();
    let lu = scaled_logits(tape, batch.z_u, batch.c_u, temperature)?;
    let u = tape.softmax_xent(lu, rows.clone())?;
    let li = scaled_logits(tape, batch.z_i, batch.c_i, temperature)?;
    let i = tape.softmax_xent(li, rows)?;
    Ok((u, i))
}

/// One co-occurrence term; `loss` is `None` when no row had a stored partner.
#[derive(Debug, Clone, Copy)]
pub struct CooccurTerm {
    pub loss: Option<Var>,
    pub rows: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CooccurLosses {
    pub user: CooccurTerm,
    pub ad: CooccurTerm,
}

fn cooccur_side(
    tape: &mut Tape,
    z: Var,
    ids: &[usize],
    bank: &[VecDeque<(usize, Vec<f64>)>],
    opts: AlignOptions,
    rng: &mut SeededRng,
) -> Result<CooccurTerm> {
    let zv = tape.value(z).clone();
    let (b, d) = (zv.rows(), zv.cols());
    // Logit columns: one stored partner per contributing row, then the
    // detached batch rows, which serve as negatives.
    let mut partners: Vec<(usize, usize, &[f64])> = Vec::new(); // (row, anchor id, partner id)
    for (row, &id) in ids.iter().enumerate() {
        if let Some((pid, v)) = bank.get(id).and_then(|q| q.back()) {
            partners.push((row, *pid, v));
        }
    }
    if partners.is_empty() {
        return Ok(CooccurTerm { loss: None, rows: 0 });
    }
    let p = partners.len();
    let mut data = Vec::with_capacity(p * d);
    for &(_, _, v) in &partners {
        data.extend_from_slice(v);
    }
    let stored = tape.constant(Tensor::matrix(p, d, data)?);
    let detached = tape.stop_grad(z)?;
    let to_partners = scaled_logits(tape, z, stored, opts.temperature)?;
    let to_batch = scaled_logits(tape, z, detached, opts.temperature)?;
    let logits = tape.concat_cols(to_partners, to_batch)?;

    let mut rows = Vec::with_capacity(p);
    let mut short = 0;
    for (slot, &(row, partner, _)) in partners.iter().enumerate() {
        let id = ids[row];
        let pool: Vec<usize> = (0..b).filter(|&j| j != row && ids[j] != id && ids[j] != partner).collect();
        if pool.len() < opts.l_neg {
            short += 1;
        }
        let negs = rng.sample_distinct(&pool, opts.l_neg);
        rows.push(CandidateRow {
            row,
            columns: std::iter::once(slot).chain(negs.into_iter().map(|j| p + j)).collect(),
        });
    }
    if short > 0 {
        log::warn!("co-occurrence: {short} of {p} anchors had fewer than {} eligible negatives", opts.l_neg);
    }
    let loss = tape.softmax_xent(logits, rows)?;
    Ok(CooccurTerm { loss: Some(loss), rows: p })
}

/// `(L_a_co_u2u_zu, L_a_co_i2i_zi)`: each anchor against its most recent
/// co-occurring partner from the bank, with other rows' detached
/// representations as negatives. Rows without a partner are skipped.
pub fn dual_cooccur_losses(
    tape: &mut Tape,
    batch: &AlignBatch,
    bank: &MemoryBank,
    opts: AlignOptions,
    rng: &mut SeededRng,
) -> Result<CooccurLosses> {
    let user = cooccur_side(tape, batch.z_u, &batch.users, &bank.user_bank, opts, &mut rng.fork("user"))?;
    let ad = cooccur_side(tape, batch.z_i, &batch.ads, &bank.ad_bank, opts, &mut rng.fork("ad"))?;
    Ok(CooccurLosses { user, ad })
}

fn push_capped<T>(q: &mut VecDeque<T>, item: T, cap: usize) {
    q.push_back(item);
    while q.len() > cap {
        q.pop_front();
    }
}

/// Per-entity FIFOs of detached partner snapshots.
///
/// Users co-occur when they clicked the same ad; ads co-occur when clicked by
/// the same user. A registry of recent clickers per ad (and clicked ads per
/// user), capped at the same capacity, determines who gets paired.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub capacity: usize,
    pub user_bank: Vec<VecDeque<(usize, Vec<f64>)>>,
    pub ad_bank: Vec<VecDeque<(usize, Vec<f64>)>>,
    clickers_of_ad: Vec<VecDeque<usize>>,
    ads_of_user: Vec<VecDeque<usize>>,
    user_snapshot: Vec<Option<Vec<f64>>>,
    ad_snapshot: Vec<Option<Vec<f64>>>,
}

impl MemoryBank {
    pub fn new(n_users: usize, n_ads: usize, capacity: usize) -> Self {
        Self {
            capacity,
            user_bank: vec![VecDeque::new(); n_users],
            ad_bank: vec![VecDeque::new(); n_ads],
            clickers_of_ad: vec![VecDeque::new(); n_ads],
            ads_of_user: vec![VecDeque::new(); n_users],
            user_snapshot: vec![None; n_users],
            ad_snapshot: vec![None; n_ads],
        }
    }

    pub fn user_partners(&self, user: usize) -> impl Iterator<Item = usize> + '_ {
        self.user_bank[user].iter().map(|e| e.0)
    }

    pub fn ad_partners(&self, ad: usize) -> impl Iterator<Item = usize> + '_ {
        self.ad_bank[ad].iter().map(|e| e.0)
    }

    pub fn is_cold(&self) -> bool {
        self.user_bank.iter().all(VecDeque::is_empty) && self.ad_bank.iter().all(VecDeque::is_empty)
    }

    /// Records a batch of clicked pairs in row order. `z_u`/`z_i` are the
    /// batch's representation values; copies are stored.
    pub fn update(&mut self, users: &[usize], ads: &[usize], z_u: &Tensor, z_i: &Tensor) {
        let cap = self.capacity;
        if cap == 0 {
            return;
        }
        for (row, (&u, &i)) in users.iter().zip(ads).enumerate() {
            let zu = z_u.row(row).to_vec();
            let others: Vec<usize> = self.clickers_of_ad[i].iter().copied().filter(|&o| o != u).collect();
            for o in others {
                push_capped(&mut self.user_bank[o], (u, zu.clone()), cap);
                if let Some(snap) = self.user_snapshot[o].clone() {
                    push_capped(&mut self.user_bank[u], (o, snap), cap);
                }
            }
            let q = &mut self.clickers_of_ad[i];
            q.retain(|&o| o != u);
            push_capped(q, u, cap);
            self.user_snapshot[u] = Some(zu);

            let zi = z_i.row(row).to_vec();
            let others: Vec<usize> = self.ads_of_user[u].iter().copied().filter(|&o| o != i).collect();
            for o in others {
                push_capped(&mut self.ad_bank[o], (i, zi.clone()), cap);
                if let Some(snap) = self.ad_snapshot[o].clone() {
                    push_capped(&mut self.ad_bank[i], (o, snap), cap);
                }
            }
            let q = &mut self.ads_of_user[u];
            q.retain(|&o| o != i);
            push_capped(q, i, cap);
            self.ad_snapshot[i] = Some(zi);
        }
    }
}

/// Named values of the six alignment terms; `None` marks an ablated or
/// cold-bank term.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AlignComponents {
    pub u2i_zu: Option<f64>,
    pub u2i_zi: Option<f64>,
    pub u2u_zu: Option<f64>,
    pub i2i_zi: Option<f64>,
    pub co_u2u_zu: Option<f64>,
    pub co_i2i_zi: Option<f64>,
}

impl AlignComponents {
    pub fn as_array(&self) -> [Option<f64>; 6] {
        [self.u2i_zu, self.u2i_zi, self.u2u_zu, self.i2i_zi, self.co_u2u_zu, self.co_i2i_zi]
    }
}

/// Unweighted sum of the present terms.
pub fn align_total(c: &AlignComponents) -> f64 {
    c.as_array().iter().flatten().sum()
}
