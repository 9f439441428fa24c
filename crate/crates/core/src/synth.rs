//! Deterministic synthetic world: clustered semantic embeddings, Zipf ad
//! popularity, per-user conformity and a logistic click model:
//!
//! `P(click) = σ(semantic_w·aff(u,i) + popularity_w·pop(i) + conformity_w·conf(u)·pop(i) + b)`
//!
//! where `aff` is the cosine between the user's and the ad's latent cluster
//! centers, `pop(i) = ln(n_ads·w_i) / ln(n_ads)` is log popularity relative to
//! uniform, and `b` is found by bisection so the mean click probability over
//! the sampled impressions hits `target_click_rate`.
//!
//! Embeddings are the side's projection of the cluster center (unit norm),
//! plus an optional nuisance component shared by a random grouping that has no
//! effect on clicks, plus isotropic noise with expected norm `noise_sigma`.
//! A `semantic_mismatch` fraction of entities get the center of a different,
//! uniformly drawn cluster: their content describes one cluster while their
//! clicks follow another, which only collaborative signal can reveal.

use std::fs;
use std::path::Path;

use das_numerics::{sigmoid, SeededRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    write_interactions, InteractionRecord, ADS_FILE, GROUND_TRUTH_FILE, INTERACTIONS_FILE, USERS_FILE,
};
use crate::embio::{round_to_f32, write_embeddings, EmbeddingTable};
use crate::error::{DasError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_ads: usize,
    pub n_clusters: usize,
    pub d_sem_user: usize,
    pub d_sem_ad: usize,
    pub zipf_s: f64,
    pub conformity_w: f64,
    pub semantic_w: f64,
    pub popularity_w: f64,
    pub noise_sigma: f64,
    pub n_interactions: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub nuisance_groups: usize,
    pub nuisance_scale: f64,
    /// Fraction of entities whose embedding is built from a wrong cluster.
    pub semantic_mismatch: f64,
    pub target_click_rate: f64,
    /// Bias features are counted over this leading fraction of the log.
    pub feature_window: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 5000,
            n_ads: 2000,
            n_clusters: 20,
            d_sem_user: 1024,
            d_sem_ad: 256,
            zipf_s: 1.2,
            conformity_w: 2.0,
            semantic_w: 3.0,
            popularity_w: 1.0,
            noise_sigma: 0.5,
            n_interactions: 200_000,
            seed: 0,
            latent_dim: 16,
            nuisance_groups: 0,
            nuisance_scale: 0.0,
            semantic_mismatch: 0.0,
            target_click_rate: 0.1,
            feature_window: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DasError::Invalid(format!("synth config: {m}")));
        if self.n_users == 0 || self.n_ads == 0 || self.n_clusters == 0 {
            return bad("n_users, n_ads and n_clusters must be positive".into());
        }
        if self.n_clusters > self.n_users.min(self.n_ads) {
            return bad(format!(
                "n_clusters = {} exceeds min(n_users, n_ads) = {}",
                self.n_clusters,
                self.n_users.min(self.n_ads)
            ));
        }
        for (name, v) in [
            ("zipf_s", self.zipf_s),
            ("conformity_w", self.conformity_w),
            ("semantic_w", self.semantic_w),
            ("popularity_w", self.popularity_w),
            ("noise_sigma", self.noise_sigma),
            ("nuisance_scale", self.nuisance_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.d_sem_user == 0 || self.d_sem_ad == 0 || self.latent_dim == 0 || self.n_interactions == 0 {
            return bad("dimensions and n_interactions must be positive".into());
        }
        if self.nuisance_scale > 0.0 && self.nuisance_groups == 0 {
            return bad("nuisance_scale > 0 needs nuisance_groups ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&self.semantic_mismatch) {
            return bad("semantic_mismatch must lie in [0, 1]".into());
        }
        if !(self.target_click_rate > 0.0 && self.target_click_rate < 1.0) {
            return bad("target_click_rate must lie in (0, 1)".into());
        }
        if !(self.feature_window > 0.0 && self.feature_window <= 1.0) {
            return bad("feature_window must lie in (0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub user_ids: Vec<String>,
    pub ad_ids: Vec<String>,
    pub user_cluster: Vec<usize>,
    pub ad_cluster: Vec<usize>,
    pub user_nuisance: Vec<usize>,
    pub ad_nuisance: Vec<usize>,
    /// Noiseless per-cluster embedding centers, `n_clusters × d_sem`.
    pub user_centers: Tensor,
    pub ad_centers: Tensor,
    pub user_embeddings: Tensor,
    pub ad_embeddings: Tensor,
    /// Cosine between latent cluster centers, `n_clusters × n_clusters`.
    pub affinity: Tensor,
    /// Zipf exposure weights (sum to 1) and their ranks (0 = most popular).
    pub ad_popularity: Vec<f64>,
    pub ad_rank: Vec<usize>,
    pub user_conformity: Vec<f64>,
    pub click_bias: f64,
    pub achieved_click_rate: f64,
    pub interactions: Vec<InteractionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub n_clusters: usize,
    pub user_ids: Vec<String>,
    pub user_clusters: Vec<usize>,
    pub ad_ids: Vec<String>,
    pub ad_clusters: Vec<usize>,
    pub ad_popularity: Vec<f64>,
    pub ad_popularity_rank: Vec<usize>,
    pub user_conformity: Vec<f64>,
    pub click_bias: f64,
    pub achieved_click_rate: f64,
}

fn unit_rows(t: &mut Tensor) {
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

/// Cluster ids for `n` entities: every cluster appears at least once.
fn assign_clusters(n: usize, k: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut a: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.below(k) }).collect();
    rng.shuffle(&mut a);
    a
}

struct Side<'a> {
    name: &'a str,
    n: usize,
    d_sem: usize,
}

fn side_embeddings(
    cfg: &SynthConfig,
    side: &Side,
    latent: &Tensor,
    root: &SeededRng,
) -> (Vec<usize>, Vec<usize>, Tensor, Tensor) {
    let mut rng = root.fork(&format!("assign.{}", side.name));
    let cluster = assign_clusters(side.n, cfg.n_clusters, &mut rng);
    let groups = cfg.nuisance_groups.max(1);
    let nuisance: Vec<usize> = (0..side.n).map(|_| rng.below(groups)).collect();
    let mut mrng = root.fork(&format!("mismatch.{}", side.name));
    let shown: Vec<usize> = cluster
        .iter()
        .map(|&c| {
            if cfg.n_clusters > 1 && cfg.semantic_mismatch > 0.0 && mrng.uniform() < cfg.semantic_mismatch {
                (c + 1 + mrng.below(cfg.n_clusters - 1)) % cfg.n_clusters
            } else {
                c
            }
        })
        .collect();

    let proj = gaussian(cfg.latent_dim, side.d_sem, &mut root.fork(&format!("projection.{}", side.name)));
    let mut centers = Tensor::zeros(&[cfg.n_clusters, side.d_sem]);
    for k in 0..cfg.n_clusters {
        let c = latent.row(k);
        let out = centers.row_mut(k);
        for (j, o) in out.iter_mut().enumerate() {
            *o = (0..cfg.latent_dim).map(|a| c[a] * proj.row(a)[j]).sum();
        }
    }
    unit_rows(&mut centers);
    round_to_f32(&mut centers);
    let mut nuis = gaussian(groups, side.d_sem, &mut root.fork(&format!("nuisance.{}", side.name)));
    unit_rows(&mut nuis);

    let scale = cfg.noise_sigma / (side.d_sem as f64).sqrt();
    let mut emb = Tensor::zeros(&[side.n, side.d_sem]);
    for e in 0..side.n {
        let mut r = root.fork_indexed(&format!("embedding.{}", side.name), e as u64);
        let (c, m) = (centers.row(shown[e]), nuis.row(nuisance[e]));
        for (j, o) in emb.row_mut(e).iter_mut().enumerate() {
            let mut v = c[j];
            if cfg.nuisance_scale > 0.0 {
                v += cfg.nuisance_scale * m[j];
            }
            if scale > 0.0 {
                v += scale * r.normal();
            }
            *o = v;
        }
    }
    round_to_f32(&mut emb);
    (cluster, nuisance, centers, emb)
}

fn calibrate(base: &[f64], target: f64) -> f64 {
    let mean_at = |b: f64| base.iter().map(|&x| sigmoid(x + b)).sum::<f64>() / base.len() as f64;
    let (mut lo, mut hi) = (-60.0f64, 60.0f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let mut latent = gaussian(cfg.n_clusters, cfg.latent_dim, &mut root.fork("centers"));
    unit_rows(&mut latent);
    let mut affinity = Tensor::zeros(&[cfg.n_clusters, cfg.n_clusters]);
    for a in 0..cfg.n_clusters {
        for b in 0..cfg.n_clusters {
            affinity.row_mut(a)[b] = das_numerics::dot(latent.row(a), latent.row(b));
        }
    }

    let user_side = Side { name: "user", n: cfg.n_users, d_sem: cfg.d_sem_user };
    let ad_side = Side { name: "ad", n: cfg.n_ads, d_sem: cfg.d_sem_ad };
    let (user_cluster, user_nuisance, user_centers, user_embeddings) = side_embeddings(cfg, &user_side, &latent, &root);
    let (ad_cluster, ad_nuisance, ad_centers, ad_embeddings) = side_embeddings(cfg, &ad_side, &latent, &root);

    let mut prng = root.fork("popularity");
    let mut ad_rank: Vec<usize> = (0..cfg.n_ads).collect();
    prng.shuffle(&mut ad_rank);
    let raw: Vec<f64> = ad_rank.iter().map(|&r| ((r + 1) as f64).powf(-cfg.zipf_s)).collect();
    let total: f64 = raw.iter().sum();
    let ad_popularity: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let pop_feature: Vec<f64> = if cfg.n_ads > 1 {
        let ln_n = (cfg.n_ads as f64).ln();
        ad_popularity.iter().map(|&w| (cfg.n_ads as f64 * w).ln() / ln_n).collect()
    } else {
        vec![0.0]
    };
    let mut crng = root.fork("conformity");
    let user_conformity: Vec<f64> = (0..cfg.n_users).map(|_| crng.uniform()).collect();

    // Impressions: uniform user, popularity-weighted ad.
    let mut cdf = Vec::with_capacity(cfg.n_ads);
    let mut acc = 0.0;
    for &w in &ad_popularity {
        acc += w;
        cdf.push(acc);
    }
    let mut irng = root.fork("impressions");
    let pairs: Vec<(usize, usize)> = (0..cfg.n_interactions)
        .map(|_| {
            let u = irng.below(cfg.n_users);
            let x = irng.uniform() * acc;
            let i = cdf.partition_point(|&c| c <= x).min(cfg.n_ads - 1);
            (u, i)
        })
        .collect();
    let base: Vec<f64> = pairs
        .iter()
        .map(|&(u, i)| {
            let aff = affinity.row(user_cluster[u])[ad_cluster[i]];
            cfg.semantic_w * aff
                + cfg.popularity_w * pop_feature[i]
                + cfg.conformity_w * user_conformity[u] * pop_feature[i]
        })
        .collect();
    let click_bias = calibrate(&base, cfg.target_click_rate);
    let mut krng = root.fork("clicks");
    let clicks: Vec<bool> = base.iter().map(|&x| krng.uniform() < sigmoid(x + click_bias)).collect();
    let achieved = clicks.iter().filter(|&&c| c).count() as f64 / clicks.len() as f64;
    if !(0.05..=0.2).contains(&achieved) {
        return Err(DasError::Invalid(format!(
            "click calibration infeasible: achieved mean click rate {achieved:.4} outside [0.05, 0.2]"
        )));
    }

    // Bias features over the leading window of the log.
    let window = ((cfg.n_interactions as f64) * cfg.feature_window).ceil() as usize;
    let top_decile = (cfg.n_ads / 10).max(1);
    let mut ad_impr = vec![0u64; cfg.n_ads];
    let mut ad_clicks = vec![0u64; cfg.n_ads];
    let mut user_clicks = vec![0u64; cfg.n_users];
    let mut user_top = vec![0u64; cfg.n_users];
    for t in 0..window.min(pairs.len()) {
        let (u, i) = pairs[t];
        ad_impr[i] += 1;
        if clicks[t] {
            ad_clicks[i] += 1;
            user_clicks[u] += 1;
            if ad_rank[i] < top_decile {
                user_top[u] += 1;
            }
        }
    }
    let user_feats = |u: usize| {
        let frac = if user_clicks[u] > 0 { user_top[u] as f64 / user_clicks[u] as f64 } else { 0.0 };
        vec![frac, (user_clicks[u] as f64).ln_1p()]
    };
    let ad_feats = |i: usize| vec![(ad_impr[i] as f64).ln_1p(), (ad_clicks[i] as f64).ln_1p()];

    let user_ids: Vec<String> = (0..cfg.n_users).map(|u| format!("u{u}")).collect();
    let ad_ids: Vec<String> = (0..cfg.n_ads).map(|i| format!("a{i}")).collect();
    let interactions = pairs
        .iter()
        .zip(&clicks)
        .enumerate()
        .map(|(t, (&(u, i), &c))| InteractionRecord {
            user_id: user_ids[u].clone(),
            ad_id: ad_ids[i].clone(),
            click: c as u8,
            ts: t as i64,
            user_bias_feats: user_feats(u),
            ad_bias_feats: ad_feats(i),
        })
        .collect();

    Ok(SynthWorld {
        config: cfg.clone(),
        user_ids,
        ad_ids,
        user_cluster,
        ad_cluster,
        user_nuisance,
        ad_nuisance,
        user_centers,
        ad_centers,
        user_embeddings,
        ad_embeddings,
        affinity,
        ad_popularity,
        ad_rank,
        user_conformity,
        click_bias,
        achieved_click_rate: achieved,
        interactions,
    })
}

impl SynthWorld {
    pub fn user_table(&self) -> Result<EmbeddingTable> {
        EmbeddingTable::new(self.user_ids.clone(), self.user_embeddings.clone())
    }

    pub fn ad_table(&self) -> Result<EmbeddingTable> {
        EmbeddingTable::new(self.ad_ids.clone(), self.ad_embeddings.clone())
    }

    pub fn dataset(&self) -> Result<crate::dataset::Dataset> {
        crate::dataset::Dataset::from_records(self.user_table()?, self.ad_table()?, &self.interactions)
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            n_clusters: self.config.n_clusters,
            user_ids: self.user_ids.clone(),
            user_clusters: self.user_cluster.clone(),
            ad_ids: self.ad_ids.clone(),
            ad_clusters: self.ad_cluster.clone(),
            ad_popularity: self.ad_popularity.clone(),
            ad_popularity_rank: self.ad_rank.clone(),
            user_conformity: self.user_conformity.clone(),
            click_bias: self.click_bias,
            achieved_click_rate: self.achieved_click_rate,
        }
    }

    /// Fraction of clicks that land on the top `fraction` of ads by
    /// popularity rank.
    pub fn click_share_of_top(&self, fraction: f64) -> f64 {
        let top = ((self.ad_ids.len() as f64) * fraction).round() as usize;
        let index: std::collections::HashMap<&str, usize> =
            self.ad_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let (mut hit, mut all) = (0usize, 0usize);
        for r in self.interactions.iter().filter(|r| r.click == 1) {
            all += 1;
            if self.ad_rank[index[r.ad_id.as_str()]] < top {
                hit += 1;
            }
        }
        hit as f64 / all.max(1) as f64
    }
}

pub fn write_dataset(world: &SynthWorld, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DasError::io(dir, e))?;
    write_embeddings(&dir.join(USERS_FILE), &world.user_table()?)?;
    write_embeddings(&dir.join(ADS_FILE), &world.ad_table()?)?;
    write_interactions(&dir.join(INTERACTIONS_FILE), &world.interactions)?;
    let gt = serde_json::to_string_pretty(&world.ground_truth()).map_err(|e| DasError::json("ground truth", e))?;
    let p = dir.join(GROUND_TRUTH_FILE);
    fs::write(&p, gt).map_err(|e| DasError::io(&p, e))
}
