//! Ranking metrics, vector-retrieval evaluation and codebook diagnostics.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use das_numerics::{dot, SeededRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DasError, Result};
use crate::types::SemanticId;

/// Mann–Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DasError::Invalid(format!("auc: {} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(DasError::Invalid(format!("auc: score {i} is not finite")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DasError::DegenerateLabels(format!(
            "auc needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += midrank * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupWeighting {
    /// Plain mean over groups (UAUC).
    Uniform,
    /// Weighted by each group's sample count (GAUC).
    Impressions,
}

/// Per-group AUC averaged over groups that contain both classes.
pub fn grouped_auc<G: Ord + Clone>(
    scores: &[f64],
    labels: &[bool],
    groups: &[G],
    weighting: GroupWeighting,
) -> Result<f64> {
    if scores.len() != labels.len() || scores.len() != groups.len() {
        return Err(DasError::Invalid("grouped_auc: length mismatch".into()));
    }
    let mut by_group: BTreeMap<G, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        by_group.entry(g.clone()).or_default().push(i);
    }
    let (mut acc, mut weight) = (0.0, 0.0);
    for rows in by_group.values() {
        let pos = rows.iter().filter(|&&r| labels[r]).count();
        if pos == 0 || pos == rows.len() {
            continue;
        }
        let s: Vec<f64> = rows.iter().map(|&r| scores[r]).collect();
        let l: Vec<bool> = rows.iter().map(|&r| labels[r]).collect();
        let w = match weighting {
            GroupWeighting::Uniform => 1.0,
            GroupWeighting::Impressions => rows.len() as f64,
        };
        acc += w * auc(&s, &l)?;
        weight += w;
    }
    if weight == 0.0 {
        return Err(DasError::DegenerateLabels("grouped_auc: no group contains both classes".into()));
    }
    Ok(acc / weight)
}

/// Which representation pair a retrieval task scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalDirection {
    /// Users by `c_u^int`, ads by `z_i`.
    UserCfToAdSid,
    /// Users by `z_u`, ads by `c_i^pro`.
    UserSidToAdCf,
}

impl RetrievalDirection {
    pub fn label(self) -> &'static str {
        match self {
            Self::UserCfToAdSid => "<c_u^int, z_i>",
            Self::UserSidToAdCf => "<z_u, c_i^pro>",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalOptions {
    pub k: usize,
    /// Sampled negatives per positive for AUC; `None` compares against the
    /// whole non-positive pool.
    pub negatives: Option<usize>,
    pub seed: u64,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        Self { k: 100, negatives: Some(99), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub auc: f64,
    pub recall_at_k: f64,
    pub k: usize,
    pub queries: usize,
    pub positives: usize,
    pub pool: usize,
}

/// Dot-product retrieval of `candidates` rows for `queries` rows.
///
/// Relevance is given by held-out `(query, candidate)` pairs. For each query
/// the candidates it was trained on, and its other held-out positives, are
/// removed from the competition for each positive (filtered ranking).
/// Recall@K is the fraction of a query's held-out positives ranked in the top
/// K; AUC compares each positive against sampled non-positive candidates.
/// Both are averaged per query, then across queries.
pub fn retrieval_eval(
    queries: &Tensor,
    candidates: &Tensor,
    heldout: &[(usize, usize)],
    train: &[(usize, usize)],
    opts: RetrievalOptions,
) -> Result<RetrievalReport> {
    let pool = candidates.rows();
    if pool == 0 || candidates.is_empty() {
        return Err(DasError::Invalid("retrieval: empty candidate pool".into()));
    }
    if queries.cols() != candidates.cols() {
        return Err(DasError::Invalid(format!(
            "retrieval: query dim {} != candidate dim {}",
            queries.cols(),
            candidates.cols()
        )));
    }
    if opts.k == 0 {
        return Err(DasError::Invalid("retrieval: K must be positive".into()));
    }
    let mut held: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(q, c) in heldout {
        if q >= queries.rows() || c >= pool {
            return Err(DasError::Invalid(format!("retrieval: pair ({q}, {c}) out of range")));
        }
        held.entry(q).or_default().push(c);
    }
    let mut trained: BTreeMap<usize, HashSet<usize>> = BTreeMap::new();
    for &(q, c) in train {
        trained.entry(q).or_default().insert(c);
    }
    let empty = HashSet::new();
    let root = SeededRng::new(opts.seed).fork("retrieval");
    let (mut auc_sum, mut recall_sum, mut n_queries, mut n_pos) = (0.0, 0.0, 0usize, 0usize);
    for (&q, positives) in &held {
        let mut pos: Vec<usize> = positives.clone();
        pos.sort_unstable();
        pos.dedup();
        let seen = trained.get(&q).unwrap_or(&empty);
        let pos: Vec<usize> = pos.into_iter().filter(|c| !seen.contains(c)).collect();
        if pos.is_empty() {
            continue;
        }
        let qrow = queries.row(q);
        let scores: Vec<f64> = (0..pool).map(|c| dot(qrow, candidates.row(c))).collect();
        let pos_set: HashSet<usize> = pos.iter().copied().collect();
        let negatives: Vec<usize> = (0..pool).filter(|c| !pos_set.contains(c) && !seen.contains(c)).collect();
        let mut rng = root.fork_indexed("query", q as u64);
        let (mut q_auc, mut hits) = (0.0, 0usize);
        for &p in &pos {
            let sp = scores[p];
            // Rank among non-positive candidates; ties resolve against the
            // positive so that constant scores give no credit.
            let better = negatives.iter().filter(|&&c| scores[c] >= sp).count();
            if better < opts.k {
                hits += 1;
            }
            let sample: Vec<usize> = match opts.negatives {
                Some(m) => rng.sample_distinct(&negatives, m),
                None => negatives.clone(),
            };
            q_auc += if sample.is_empty() {
                1.0
            } else {
                let wins: f64 = sample
                    .iter()
                    .map(|&c| match sp.total_cmp(&scores[c]) {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    })
                    .sum();
                wins / sample.len() as f64
            };
        }
        auc_sum += q_auc / pos.len() as f64;
        recall_sum += hits as f64 / pos.len() as f64;
        n_queries += 1;
        n_pos += pos.len();
    }
    if n_queries == 0 {
        return Err(DasError::Invalid("retrieval: no held-out positives to score".into()));
    }
    Ok(RetrievalReport {
        auc: auc_sum / n_queries as f64,
        recall_at_k: recall_sum / n_queries as f64,
        k: opts.k,
        queries: n_queries,
        positives: n_pos,
        pool,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookReport {
    pub level: usize,
    pub codebook_size: usize,
    pub assigned: usize,
    pub usage_rate: f64,
    pub perplexity: f64,
    /// Assignment mass of ten groups of codes, taken in order of decreasing
    /// frequency.
    pub group_mass: Vec<f64>,
}

/// `exp(−Σ p ln p)` over the empirical code distribution.
pub fn perplexity(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let t = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

pub const GROUPS: usize = 10;

/// Level is 1-based. Codes are ranked by frequency (ties by index) and cut
/// into ten consecutive groups at `⌊g·N/10⌋`, so every code belongs to exactly
/// one group.
pub fn codebook_stats(sids: &[SemanticId], level: usize, codebook_size: usize) -> Result<CodebookReport> {
    if sids.is_empty() {
        return Err(DasError::Invalid("codebook_stats: empty corpus".into()));
    }
    if level == 0 {
        return Err(DasError::Invalid("codebook_stats: levels are 1-based".into()));
    }
    let mut counts = vec![0usize; codebook_size];
    for sid in sids {
        let code = *sid
            .codes()
            .get(level - 1)
            .ok_or_else(|| DasError::Invalid(format!("codebook_stats: sid {sid} has no level {level}")))?;
        if code >= codebook_size {
            return Err(DasError::Invalid(format!(
                "codebook_stats: code {code} outside codebook of size {codebook_size}"
            )));
        }
        counts[code] += 1;
    }
    Ok(report_from_counts(level, &counts))
}

pub fn report_from_counts(level: usize, counts: &[usize]) -> CodebookReport {
    let n = counts.len();
    let total: usize = counts.iter().sum();
    let mut sorted = counts.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let group_mass = (0..GROUPS)
        .map(|g| {
            let (lo, hi) = (g * n / GROUPS, (g + 1) * n / GROUPS);
            sorted[lo..hi].iter().sum::<usize>() as f64 / total.max(1) as f64
        })
        .collect();
    CodebookReport {
        level,
        codebook_size: n,
        assigned: total,
        usage_rate: counts.iter().filter(|&&c| c > 0).count() as f64 / n as f64,
        perplexity: perplexity(counts),
        group_mass,
    }
}

/// Left-aligned first column, right-aligned others, two-space gutters.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in width.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        let mut s = String::new();
        for (i, cell) in cells.iter().enumerate().take(cols) {
            if i > 0 {
                s.push_str("  ");
            }
            let pad = width[i] - cell.chars().count();
            if i == 0 {
                s.push_str(cell);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str(&" ".repeat(pad));
                s.push_str(cell);
            }
        }
        let _ = writeln!(out, "{}", s.trim_end());
    };
    line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    line(&width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
    for r in rows {
        line(r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5, 0.2], &[true, false, false]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(DasError::DegenerateLabels(_))));
    }

    #[test]
    fn grouped_weighting() {
        // group a: AUC 1 over 10 rows; group b: AUC 0.5 over 30 rows
        let mut s = Vec::new();
        let mut l = Vec::new();
        let mut g = Vec::new();
        for i in 0..10 {
            s.push(if i < 5 { 1.0 } else { 0.0 });
            l.push(i < 5);
            g.push("a");
        }
        for i in 0..30 {
            s.push(0.3);
            l.push(i % 2 == 0);
            g.push("b");
        }
        let u = grouped_auc(&s, &l, &g, GroupWeighting::Uniform).unwrap();
        let w = grouped_auc(&s, &l, &g, GroupWeighting::Impressions).unwrap();
        assert!((u - 0.75).abs() < 1e-12);
        assert!((w - 0.625).abs() < 1e-12);
    }

    #[test]
    fn single_class_group_is_skipped() {
        let s = [0.9, 0.1, 0.5, 0.4];
        let l = [true, false, true, true];
        let g = [0, 0, 1, 1];
        for w in [GroupWeighting::Uniform, GroupWeighting::Impressions] {
            assert_eq!(grouped_auc(&s, &l, &g, w).unwrap(), 1.0);
        }
        assert!(grouped_auc(&s[2..], &l[2..], &g[2..], GroupWeighting::Uniform).is_err());
    }

    #[test]
    fn perplexity_examples() {
        assert!((perplexity(&vec![3; 512]) - 512.0).abs() < 1e-9);
        let mut one = vec![0; 512];
        one[7] = 100;
        let r = report_from_counts(1, &one);
        assert_eq!(r.perplexity, 1.0);
        assert_eq!(r.usage_rate, 1.0 / 512.0);
        assert!((perplexity(&[2, 1, 1]) - 2f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn group_mass_covers_every_code() {
        let counts: Vec<usize> = (0..512).map(|i| i % 7).collect();
        let r = report_from_counts(1, &counts);
        assert_eq!(r.group_mass.len(), 10);
        assert!((r.group_mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.group_mass.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn tiny_pool_retrieval() {
        let q = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let c = Tensor::matrix(2, 1, vec![2.0, 1.0]).unwrap();
        let r = retrieval_eval(&q, &c, &[(0, 0)], &[], RetrievalOptions { k: 1, ..Default::default() }).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.recall_at_k, 1.0);
    }

    #[test]
    fn table_alignment() {
        let t = text_table(&["name", "v"], &[vec!["a".into(), "10".into()], vec!["bbb".into(), "2".into()]]);
        assert_eq!(t, "name   v\n----  --\na     10\nbbb    2\n");
    }
}
