//! One-stage co-training: `L_All = L_Sem_all + α·L_CF_all + β·L_Align_all`.

use std::collections::BTreeMap;

use das_numerics::{NumericsError, Optimizer, OptimizerConfig, ParamStore, SeededRng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::alignment::{
    align_total, dual_cooccur_losses, dual_u2i_losses, dual_view_losses, AlignBatch, AlignComponents, AlignOptions,
    MemoryBank,
};
use crate::cf::{cf_total_loss, DebiasTowers, TowerSpec};
use crate::dataset::Dataset;
use crate::error::{DasError, Result};
use crate::quantizer::{RqVae, RqVaeSpec};
use crate::types::{EntityIndex, SemanticId, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignTarget {
    /// `c_u^int` / `c_i^pro`
    Debiased,
    /// The fusion outputs `c_u` / `c_i`.
    Biased,
}

/// Which alignment views are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub dual_u2i: bool,
    pub dual_view: bool,
    pub cooccur: bool,
    pub align_target: AlignTarget,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { dual_u2i: true, dual_view: true, cooccur: true, align_target: AlignTarget::Debiased }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    #[serde(rename = "L")]
    pub levels: usize,
    #[serde(rename = "N")]
    pub codebook_size: usize,
    #[serde(rename = "d")]
    pub code_dim: usize,
    #[serde(rename = "B")]
    pub batch_size: usize,
    #[serde(rename = "L_neg")]
    pub l_neg: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub weight_decay: f64,
    pub temperature: f64,
    #[serde(rename = "K_bank")]
    pub bank_capacity: usize,
    pub encoder_hidden: Vec<usize>,
    pub id_dim: usize,
    pub tower_hidden: usize,
    pub kmeans_iters: usize,
    pub kmeans_max_samples: usize,
    pub reseed_dead_codes: bool,
    /// Learning rate overrides keyed by parameter-name prefix; the longest
    /// matching prefix wins.
    pub lr_groups: BTreeMap<String, f64>,
    /// Leading fraction of the log (by timestamp) used for training.
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.1,
            mu: 0.25,
            levels: 3,
            codebook_size: 512,
            code_dim: 32,
            batch_size: 128,
            l_neg: 32,
            lr: 1e-3,
            epochs: 10,
            seed: 0,
            ablation: Ablation::default(),
            weight_decay: 0.0,
            temperature: 1.0,
            bank_capacity: 16,
            encoder_hidden: vec![128, 128],
            id_dim: 32,
            tower_hidden: 64,
            kmeans_iters: 25,
            kmeans_max_samples: 50_000,
            reseed_dead_codes: false,
            lr_groups: BTreeMap::new(),
            train_fraction: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DasError::Invalid(format!("train config: {m}")));
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("mu", self.mu),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.levels == 0 || self.codebook_size == 0 || self.code_dim == 0 {
            return bad("L, N and d must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("B must be at least 2, got {}", self.batch_size));
        }
        if self.l_neg == 0 {
            return bad("L_neg must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive".into());
        }
        if self.id_dim == 0 || self.tower_hidden == 0 || self.encoder_hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction must lie in (0, 1]".into());
        }
        if let Some((k, v)) = self.lr_groups.iter().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
            return bad(format!("lr_groups[{k}] = {v} is not a valid learning rate"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| DasError::json("train config", e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn lr_for(&self, name: &str) -> f64 {
        self.lr_groups
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map_or(self.lr, |(_, &v)| v)
    }
}

/// The architectural pieces of a model; parameter values live in a store.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParts {
    pub user_rq: RqVae,
    pub ad_rq: RqVae,
    /// `None` for a quantizer-only model.
    pub towers: Option<DebiasTowers>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shapes {
    pub d_sem_user: usize,
    pub d_sem_ad: usize,
    pub user_bias_dim: usize,
    pub ad_bias_dim: usize,
    pub n_users: usize,
    pub n_ads: usize,
}

impl ModelParts {
    pub fn new(config: &TrainConfig, shapes: Shapes, with_towers: bool) -> Result<Self> {
        let rq = |side, d_sem| {
            RqVae::new(RqVaeSpec {
                side,
                d_sem,
                hidden: config.encoder_hidden.clone(),
                code_dim: config.code_dim,
                levels: config.levels,
                codebook_size: config.codebook_size,
                mu: config.mu,
            })
        };
        let towers = with_towers.then(|| {
            DebiasTowers::new(TowerSpec {
                n_users: shapes.n_users,
                n_ads: shapes.n_ads,
                id_dim: config.id_dim,
                hidden: config.tower_hidden,
                d_align: config.code_dim,
                user_bias_dim: shapes.user_bias_dim,
                ad_bias_dim: shapes.ad_bias_dim,
            })
        });
        Ok(Self { user_rq: rq(Side::User, shapes.d_sem_user)?, ad_rq: rq(Side::Ad, shapes.d_sem_ad)?, towers })
    }

    pub fn quantizer(&self, side: Side) -> &RqVae {
        match side {
            Side::User => &self.user_rq,
            Side::Ad => &self.ad_rq,
        }
    }

    /// Initial parameters. Every component draws from its own stream, so a
    /// quantizer-only model gets the same quantizer weights as a full one.
    pub fn init_store(&self, seed: u64) -> Result<ParamStore> {
        let root = SeededRng::new(seed).fork("init");
        let mut store = ParamStore::new();
        self.user_rq.register(&mut store, &mut root.fork("user_rq"))?;
        self.ad_rq.register(&mut store, &mut root.fork("ad_rq"))?;
        if let Some(t) = &self.towers {
            t.register(&mut store, &mut root.fork("cf"))?;
        }
        Ok(store)
    }
}

/// Inputs of one step: click-positive rows of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    pub users: Vec<usize>,
    pub ads: Vec<usize>,
    pub user_sem: Tensor,
    pub ad_sem: Tensor,
    pub user_bias: Tensor,
    pub ad_bias: Tensor,
}

impl StepInputs {
    pub fn gather(data: &Dataset, user_bias: &Tensor, ad_bias: &Tensor, pairs: &[(usize, usize)]) -> Result<Self> {
        let users: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let ads: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        Ok(Self {
            user_sem: gather(&data.users.vectors, &users)?,
            ad_sem: gather(&data.ads.vectors, &ads)?,
            user_bias: gather(user_bias, &users)?,
            ad_bias: gather(ad_bias, &ads)?,
            users,
            ads,
        })
    }
}

pub fn gather(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * t.cols());
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Ok(Tensor::matrix(rows.len(), t.cols(), data)?)
}

/// Handles to every loss node of one step's graph.
#[derive(Debug, Clone)]
pub struct StepGraph {
    pub total: Var,
    pub user_recon: Var,
    pub user_rq: Var,
    pub ad_recon: Var,
    pub ad_rq: Var,
    pub sem: Var,
    pub cf: Option<CfVars>,
    pub align: [Option<Var>; 6],
    pub align_total: Option<Var>,
    pub cooccur_rows: (usize, usize),
    pub z_u: Var,
    pub z_i: Var,
    pub r0_u: Var,
    pub r0_i: Var,
    pub user_sids: Vec<SemanticId>,
    pub ad_sids: Vec<SemanticId>,
}

#[derive(Debug, Clone, Copy)]
pub struct CfVars {
    pub bias: Var,
    pub unbias: Var,
    pub sim: Var,
    pub orth: Var,
    pub total: Var,
}

pub const ALIGN_TERMS: [&str; 6] = ["u2i_zu", "u2i_zi", "u2u_zu", "i2i_zi", "co_u2u_zu", "co_i2i_zi"];

fn tag(term: &'static str) -> impl Fn(NumericsError) -> DasError {
    move |e| match e {
        NumericsError::NonFinite { .. } => {
            DasError::NonFiniteLoss { term: term.to_string(), step: 0, breakdown: e.to_string() }
        }
        other => DasError::Numerics(other),
    }
}

fn tagged<T>(term: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        DasError::Numerics(n) => tag(term)(n),
        other => other,
    })
}

/// Records the complete step loss on `tape`. Terms with zero weight are kept
/// out of the total so they contribute nothing to any gradient.
pub fn build_step_graph(
    parts: &ModelParts,
    config: &TrainConfig,
    store: &ParamStore,
    tape: &mut Tape,
    inputs: &StepInputs,
    bank: &MemoryBank,
    rng: &SeededRng,
) -> Result<StepGraph> {
    let uf = tagged("user_sem", parts.user_rq.forward_train(tape, store, &inputs.user_sem))?;
    let af = tagged("ad_sem", parts.ad_rq.forward_train(tape, store, &inputs.ad_sem))?;
    let sem = tape
        .weighted_sum(&[(uf.recon_loss, 1.0), (uf.rq_loss, 1.0), (af.recon_loss, 1.0), (af.rq_loss, 1.0)])
        .map_err(tag("sem"))?;
    let mut terms = vec![(sem, 1.0)];
    let mut graph = StepGraph {
        total: sem,
        user_recon: uf.recon_loss,
        user_rq: uf.rq_loss,
        ad_recon: af.recon_loss,
        ad_rq: af.rq_loss,
        sem,
        cf: None,
        align: [None; 6],
        align_total: None,
        cooccur_rows: (0, 0),
        z_u: uf.z_align,
        z_i: af.z_align,
        r0_u: uf.r0,
        r0_i: af.r0,
        user_sids: uf.sids,
        ad_sids: af.sids,
    };
    if let Some(towers) = &parts.towers {
        let out = tagged(
            "cf_towers",
            towers.forward_towers(tape, store, &inputs.users, &inputs.user_bias, &inputs.ads, &inputs.ad_bias),
        )?;
        let cf = tagged("cf", cf_total_loss(tape, &out, config.gamma))?;
        graph.cf = Some(CfVars { bias: cf.bias, unbias: cf.unbias, sim: cf.sim, orth: cf.orth, total: cf.total });
        if config.alpha != 0.0 {
            terms.push((cf.total, config.alpha));
        }

        let (c_u, c_i) = match config.ablation.align_target {
            AlignTarget::Debiased => (out.u_int, out.i_pro),
            AlignTarget::Biased => (out.u, out.i),
        };
        let batch = AlignBatch {
            z_u: uf.z_align,
            z_i: af.z_align,
            c_u,
            c_i,
            users: inputs.users.clone(),
            ads: inputs.ads.clone(),
        };
        let opts = AlignOptions { l_neg: config.l_neg, temperature: config.temperature };
        if config.ablation.dual_u2i {
            let (a, b) = tagged("align_u2i", dual_u2i_losses(tape, &batch, opts, &mut rng.fork("u2i")))?;
            graph.align[0] = Some(a);
            graph.align[1] = Some(b);
        }
        if config.ablation.dual_view {
            let (a, b) = tagged("align_view", dual_view_losses(tape, &batch, config.temperature))?;
            graph.align[2] = Some(a);
            graph.align[3] = Some(b);
        }
        if config.ablation.cooccur {
            let co = tagged("align_cooccur", dual_cooccur_losses(tape, &batch, bank, opts, &mut rng.fork("cooccur")))?;
            graph.align[4] = co.user.loss;
            graph.align[5] = co.ad.loss;
            graph.cooccur_rows = (co.user.rows, co.ad.rows);
        }
        let present: Vec<(Var, f64)> = graph.align.iter().flatten().map(|&v| (v, 1.0)).collect();
        if !present.is_empty() {
            let at = tape.weighted_sum(&present).map_err(tag("align"))?;
            graph.align_total = Some(at);
            if config.beta != 0.0 {
                terms.push((at, config.beta));
            }
        }
    }
    graph.total = tape.weighted_sum(&terms).map_err(tag("total"))?;
    Ok(graph)
}

/// Every sub-loss value of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub epoch: usize,
    pub user_recon: f64,
    pub user_rq: f64,
    pub ad_recon: f64,
    pub ad_rq: f64,
    pub sem: f64,
    pub cf_bias: Option<f64>,
    pub cf_unbias: Option<f64>,
    pub cf_sim: Option<f64>,
    pub cf_orth: Option<f64>,
    pub cf_total: Option<f64>,
    pub align: AlignValues,
    pub align_total: Option<f64>,
    pub cooccur_user_rows: usize,
    pub cooccur_ad_rows: usize,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignValues {
    pub u2i_zu: Option<f64>,
    pub u2i_zi: Option<f64>,
    pub u2u_zu: Option<f64>,
    pub i2i_zi: Option<f64>,
    pub co_u2u_zu: Option<f64>,
    pub co_i2i_zi: Option<f64>,
}

impl From<AlignValues> for AlignComponents {
    fn from(a: AlignValues) -> Self {
        AlignComponents {
            u2i_zu: a.u2i_zu,
            u2i_zi: a.u2i_zi,
            u2u_zu: a.u2u_zu,
            i2i_zi: a.i2i_zi,
            co_u2u_zu: a.co_u2u_zu,
            co_i2i_zi: a.co_i2i_zi,
        }
    }
}

impl LossBreakdown {
    fn from_graph(tape: &Tape, g: &StepGraph, step: u64, epoch: usize) -> Self {
        let v = |x: Var| tape.scalar(x);
        let a = g.align.map(|o| o.map(v));
        Self {
            step,
            epoch,
            user_recon: v(g.user_recon),
            user_rq: v(g.user_rq),
            ad_recon: v(g.ad_recon),
            ad_rq: v(g.ad_rq),
            sem: v(g.sem),
            cf_bias: g.cf.map(|c| v(c.bias)),
            cf_unbias: g.cf.map(|c| v(c.unbias)),
            cf_sim: g.cf.map(|c| v(c.sim)),
            cf_orth: g.cf.map(|c| v(c.orth)),
            cf_total: g.cf.map(|c| v(c.total)),
            align: AlignValues {
                u2i_zu: a[0],
                u2i_zi: a[1],
                u2u_zu: a[2],
                i2i_zi: a[3],
                co_u2u_zu: a[4],
                co_i2i_zi: a[5],
            },
            align_total: g.align_total.map(v),
            cooccur_user_rows: g.cooccur_rows.0,
            cooccur_ad_rows: g.cooccur_rows.1,
            total: v(g.total),
        }
    }

    /// `sem + α·cf + β·align`, accumulated in the same order as the graph.
    pub fn recomposed_total(&self, alpha: f64, beta: f64) -> f64 {
        let mut acc = 0.0 + 1.0 * self.sem;
        if let Some(cf) = self.cf_total {
            if alpha != 0.0 {
                acc += alpha * cf;
            }
        }
        if let Some(at) = self.align_total {
            if beta != 0.0 {
                acc += beta * at;
            }
        }
        acc
    }
}

/// Parameters plus everything needed to run inference on known entities.
#[derive(Debug, Clone, PartialEq)]
pub struct DasModel {
    pub config: TrainConfig,
    pub shapes: Shapes,
    pub parts: ModelParts,
    pub store: ParamStore,
    pub user_index: EntityIndex,
    pub ad_index: EntityIndex,
    pub user_bias: Tensor,
    pub ad_bias: Tensor,
    pub step: u64,
}

impl DasModel {
    pub fn new(config: &TrainConfig, data: &Dataset, with_towers: bool) -> Result<Self> {
        config.validate()?;
        let shapes = Shapes {
            d_sem_user: data.users.dim(),
            d_sem_ad: data.ads.dim(),
            user_bias_dim: data.user_bias.cols(),
            ad_bias_dim: data.ad_bias.cols(),
            n_users: data.users.len(),
            n_ads: data.ads.len(),
        };
        let parts = ModelParts::new(config, shapes, with_towers)?;
        let store = parts.init_store(config.seed)?;
        Ok(Self {
            config: config.clone(),
            shapes,
            parts,
            store,
            user_index: data.users.index.clone(),
            ad_index: data.ads.index.clone(),
            user_bias: data.user_bias.clone(),
            ad_bias: data.ad_bias.clone(),
            step: 0,
        })
    }

    pub fn quantizer(&self, side: Side) -> &RqVae {
        self.parts.quantizer(side)
    }

    /// Sids and pooled embeddings for every row of a semantic-embedding matrix.
    pub fn infer(&self, side: Side, s: &Tensor) -> Result<Vec<(SemanticId, Vec<f64>)>> {
        self.quantizer(side).infer_batch(&self.store, s)
    }

    /// `c_u^int` (user) or `c_i^pro` (ad) for every known entity.
    pub fn unbiased_cf(&self, side: Side) -> Result<Tensor> {
        let towers = self.parts.towers.as_ref().ok_or_else(|| DasError::Invalid("model has no CF towers".into()))?;
        let n = match side {
            Side::User => self.shapes.n_users,
            Side::Ad => self.shapes.n_ads,
        };
        let ids: Vec<usize> = (0..n).collect();
        let mut rows = Vec::with_capacity(n * self.config.code_dim);
        for chunk in ids.chunks(4096) {
            rows.extend_from_slice(towers.unbiased_values(&self.store, side, chunk)?.data());
        }
        Ok(Tensor::matrix(n, self.config.code_dim, rows)?)
    }
}

/// Mean training losses over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub user_recon: f64,
    pub ad_recon: f64,
    pub sem: f64,
    pub total: f64,
    pub dead_codes_reseeded: usize,
}

/// Mutable training state around a model.
pub struct Trainer {
    pub model: DasModel,
    pub bank: MemoryBank,
    optimizer: Optimizer,
    rng: SeededRng,
    used: [Vec<Vec<bool>>; 2],
    last_latents: [Option<Tensor>; 2],
}

impl Trainer {
    pub fn new(model: DasModel) -> Self {
        let c = &model.config;
        let bank = MemoryBank::new(model.shapes.n_users, model.shapes.n_ads, c.bank_capacity);
        let optimizer = Optimizer::new(OptimizerConfig { weight_decay: c.weight_decay, ..OptimizerConfig::default() });
        let used = [vec![vec![false; c.codebook_size]; c.levels], vec![vec![false; c.codebook_size]; c.levels]];
        Self { rng: SeededRng::new(c.seed).fork("train"), model, bank, optimizer, used, last_latents: [None, None] }
    }

    /// k-means initialization of both codebook stacks from untrained encoder
    /// latents of up to `kmeans_max_samples` entities per side.
    pub fn warmup(&mut self, data: &Dataset) -> Result<()> {
        let c = self.model.config.clone();
        for (side, table) in [(Side::User, &data.users), (Side::Ad, &data.ads)] {
            let n = table.len();
            let mut rows: Vec<usize> = (0..n).collect();
            if n > c.kmeans_max_samples {
                let mut r = self.rng.fork(&format!("warmup.{side}"));
                rows = r.sample_distinct(&rows, c.kmeans_max_samples);
                rows.sort_unstable();
            }
            let s = gather(&table.vectors, &rows)?;
            let rq = self.model.parts.quantizer(side).clone();
            let latents = rq.encode_values(&self.model.store, &s)?;
            let mut r = self.rng.fork(&format!("kmeans.{side}"));
            rq.init_codebooks(&mut self.model.store, &latents, c.kmeans_iters, &mut r)?;
        }
        Ok(())
    }

    /// One optimizer step on a batch of clicked `(user, ad)` pairs.
    pub fn train_step(&mut self, data: &Dataset, pairs: &[(usize, usize)], epoch: usize) -> Result<LossBreakdown> {
        let step = self.model.step;
        let inputs = StepInputs::gather(data, &self.model.user_bias, &self.model.ad_bias, pairs)?;
        let mut tape = Tape::new();
        let step_rng = self.rng.fork_indexed("negatives", step);
        let graph = build_step_graph(
            &self.model.parts,
            &self.model.config,
            &self.model.store,
            &mut tape,
            &inputs,
            &self.bank,
            &step_rng,
        )
        .map_err(|e| match e {
            DasError::NonFiniteLoss { term, breakdown, .. } => DasError::NonFiniteLoss { term, step, breakdown },
            other => other,
        })?;
        let breakdown = LossBreakdown::from_graph(&tape, &graph, step, epoch);
        if !breakdown.total.is_finite() {
            return Err(DasError::NonFiniteLoss { term: "total".into(), step, breakdown: format!("{breakdown:?}") });
        }
        let grads = tape.backward(graph.total)?;
        grads.accumulate_into(&mut self.model.store)?;
        let config = self.model.config.clone();
        self.optimizer
            .step_with(&mut self.model.store, |name| config.lr_for(name))
            .map_err(|e| DasError::NonFiniteLoss { term: e.to_string(), step, breakdown: format!("{breakdown:?}") })?;

        // The bank sees this batch only after its loss is computed.
        if self.model.parts.towers.is_some() {
            self.bank.update(&inputs.users, &inputs.ads, tape.value(graph.z_u), tape.value(graph.z_i));
        }
        for (k, sids) in [&graph.user_sids, &graph.ad_sids].into_iter().enumerate() {
            for sid in sids {
                for (l, &c) in sid.codes().iter().enumerate() {
                    self.used[k][l][c] = true;
                }
            }
        }
        self.last_latents = [Some(tape.value(graph.r0_u).clone()), Some(tape.value(graph.r0_i).clone())];
        self.model.step += 1;
        Ok(breakdown)
    }

    /// Replaces codes unused since the last call with random latents (or
    /// their residuals at deeper levels) from the most recent batch.
    fn reseed_dead_codes(&mut self, epoch: usize) -> Result<usize> {
        let mut reseeded = 0;
        for (k, side) in [Side::User, Side::Ad].into_iter().enumerate() {
            let Some(latents) = self.last_latents[k].clone() else { continue };
            let rq = self.model.parts.quantizer(side).clone();
            let mut r = self.rng.fork_indexed(&format!("reseed.{side}"), epoch as u64);
            for l in 1..=rq.spec.levels {
                let dead: Vec<usize> = (0..rq.spec.codebook_size).filter(|&c| !self.used[k][l - 1][c]).collect();
                for c in dead {
                    let row = r.below(latents.rows());
                    let (_, residuals, _) = rq.quantize_latent(&self.model.store, latents.row(row))?;
                    let name = rq.codebook_name(l);
                    let p = self.model.store.get_mut(&name)?;
                    p.value.row_mut(c).copy_from_slice(&residuals[l - 1]);
                    reseeded += 1;
                }
            }
        }
        Ok(reseeded)
    }

    fn clear_usage(&mut self) {
        for side in &mut self.used {
            for level in side.iter_mut() {
                level.iter_mut().for_each(|u| *u = false);
            }
        }
    }
}

#[derive(Debug)]
pub struct FitOutput {
    pub model: DasModel,
    pub bank: MemoryBank,
    pub trace: Vec<LossBreakdown>,
    pub epochs: Vec<EpochSummary>,
}

/// Click-positive training pairs under the configured chronological split.
pub fn training_pairs(data: &Dataset, config: &TrainConfig) -> Vec<(usize, usize)> {
    let split = data.chronological_split(config.train_fraction);
    data.clicked_pairs(&split.train)
}

pub fn fit(data: &Dataset, config: &TrainConfig) -> Result<FitOutput> {
    fit_with(data, config, true)
}

/// Trains the two quantizers alone, with no CF towers or alignment.
pub fn fit_quantizers_only(data: &Dataset, config: &TrainConfig) -> Result<FitOutput> {
    fit_with(data, config, false)
}

fn fit_with(data: &Dataset, config: &TrainConfig, with_towers: bool) -> Result<FitOutput> {
    config.validate()?;
    if data.events.is_empty() {
        return Err(DasError::Invalid("dataset is empty".into()));
    }
    let pairs = training_pairs(data, config);
    if pairs.len() < 2 {
        return Err(DasError::Invalid(format!(
            "need at least 2 click-positive training interactions, found {}",
            pairs.len()
        )));
    }
    let model = DasModel::new(config, data, with_towers)?;
    let mut trainer = Trainer::new(model);
    trainer.warmup(data)?;
    let mut trace = Vec::new();
    let mut epochs = Vec::new();
    for epoch in 0..config.epochs {
        let mut order = pairs.clone();
        trainer.rng.fork_indexed("shuffle", epoch as u64).shuffle(&mut order);
        let mut sums = [0.0f64; 4];
        let mut steps = 0;
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let b = trainer.train_step(data, batch, epoch)?;
            sums[0] += b.user_recon;
            sums[1] += b.ad_recon;
            sums[2] += b.sem;
            sums[3] += b.total;
            steps += 1;
            trace.push(b);
        }
        let reseeded = if config.reseed_dead_codes { trainer.reseed_dead_codes(epoch)? } else { 0 };
        trainer.clear_usage();
        let n = steps.max(1) as f64;
        let summary = EpochSummary {
            epoch,
            steps,
            user_recon: sums[0] / n,
            ad_recon: sums[1] / n,
            sem: sums[2] / n,
            total: sums[3] / n,
            dead_codes_reseeded: reseeded,
        };
        log::info!(
            "epoch {epoch}: steps {steps} sem {:.4} total {:.4} recon(u/a) {:.4}/{:.4}",
            summary.sem,
            summary.total,
            summary.user_recon,
            summary.ad_recon
        );
        epochs.push(summary);
    }
    Ok(FitOutput { model: trainer.model, bank: trainer.bank, trace, epochs })
}

/// Plain-value alignment total of a breakdown.
pub fn breakdown_align_total(b: &LossBreakdown) -> f64 {
    align_total(&b.align.into())
}
