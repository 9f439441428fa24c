//! ID-based collaborative-filtering towers with disentangled bias branches.
//!
//! Each side has an ID embedding table feeding two encoders: the unbiased one
//! (user interest `c_u^int`, ad content `c_i^pro`) and the bias one (user
//! conformity `c_u^con`, ad popularity `c_i^pop`). A third encoder maps raw
//! bias features to the observed bias representation (`c_u^c`, `c_i^p`), and a
//! fusion network builds the biased representation from
//! `concat(unbiased, observed bias)`.

use das_numerics::{CandidateRow, ParamStore, SeededRng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{DasError, Result};
use crate::mlp::Mlp;
use crate::types::Side;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerSpec {
    pub n_users: usize,
    pub n_ads: usize,
    pub id_dim: usize,
    pub hidden: usize,
    /// Output width of every tower; equals the quantizer code dimension.
    pub d_align: usize,
    pub user_bias_dim: usize,
    pub ad_bias_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct SideTowers {
    id_table: String,
    unbiased: Mlp,
    bias: Mlp,
    observed_bias: Mlp,
    fusion: Mlp,
}

impl SideTowers {
    fn new(side: &str, unbiased: &str, bias: &str, observed: &str, spec: &TowerSpec, bias_dim: usize) -> Self {
        let p = format!("cf.{side}");
        let two = |name: &str, input: usize| Mlp::new(format!("{p}.{name}"), vec![input, spec.hidden, spec.d_align]);
        Self {
            id_table: format!("{p}.id_embedding"),
            unbiased: two(unbiased, spec.id_dim),
            bias: two(bias, spec.id_dim),
            observed_bias: two(observed, bias_dim),
            fusion: two("fusion", 2 * spec.d_align),
        }
    }

    fn register(&self, store: &mut ParamStore, rows: usize, id_dim: usize, rng: &mut SeededRng) -> Result<()> {
        let mut r = rng.fork("id_embedding");
        let data: Vec<f64> = (0..rows * id_dim).map(|_| 0.1 * r.normal()).collect();
        store.insert(self.id_table.clone(), Tensor::matrix(rows, id_dim, data)?)?;
        for m in [&self.unbiased, &self.bias, &self.observed_bias, &self.fusion] {
            m.register(store, &mut rng.fork(m.prefix()))?;
        }
        Ok(())
    }

    /// (unbiased, bias, observed bias, fused)
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        bias_feats: &Tensor,
    ) -> Result<(Var, Var, Var, Var)> {
        if bias_feats.shape().len() != 2
            || bias_feats.rows() != ids.len()
            || bias_feats.cols() != self.observed_bias.input_dim()
        {
            return Err(DasError::Invalid(format!(
                "bias features of shape {:?} for {} rows, expected width {}",
                bias_feats.shape(),
                ids.len(),
                self.observed_bias.input_dim()
            )));
        }
        let table = tape.param(store, &self.id_table)?;
        let emb = tape.gather_rows(table, ids)?;
        let unbiased = self.unbiased.forward(tape, store, emb)?;
        let bias = self.bias.forward(tape, store, emb)?;
        let feats = tape.constant(bias_feats.clone());
        let observed = self.observed_bias.forward(tape, store, feats)?;
        let cat = tape.concat_cols(unbiased, observed)?;
        let fused = self.fusion.forward(tape, store, cat)?;
        Ok((unbiased, bias, observed, fused))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DebiasTowers {
    pub spec: TowerSpec,
    user: SideTowers,
    ad: SideTowers,
}

/// Tape handles for the eight per-row representations of a batch.
#[derive(Debug, Clone, Copy)]
pub struct CfBatchOutput {
    pub u_int: Var,
    pub u_con: Var,
    pub u_c: Var,
    pub u: Var,
    pub i_pro: Var,
    pub i_pop: Var,
    pub i_p: Var,
    pub i: Var,
}

impl DebiasTowers {
    pub fn new(spec: TowerSpec) -> Self {
        Self {
            user: SideTowers::new("user", "interest", "conformity", "observed_conformity", &spec, spec.user_bias_dim),
            ad: SideTowers::new("ad", "content", "popularity", "observed_popularity", &spec, spec.ad_bias_dim),
            spec,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        self.user.register(store, self.spec.n_users, self.spec.id_dim, &mut rng.fork("user"))?;
        self.ad.register(store, self.spec.n_ads, self.spec.id_dim, &mut rng.fork("ad"))
    }

    pub fn forward_towers(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        users: &[usize],
        user_bias: &Tensor,
        ads: &[usize],
        ad_bias: &Tensor,
    ) -> Result<CfBatchOutput> {
        if users.len() != ads.len() {
            return Err(DasError::Invalid(format!("{} user rows against {} ad rows", users.len(), ads.len())));
        }
        let (u_int, u_con, u_c, u) = self.user.forward(tape, store, users, user_bias)?;
        let (i_pro, i_pop, i_p, i) = self.ad.forward(tape, store, ads, ad_bias)?;
        Ok(CfBatchOutput { u_int, u_con, u_c, u, i_pro, i_pop, i_p, i })
    }

    /// Unbiased representation (`c_u^int` or `c_i^pro`) of the given entities.
    pub fn unbiased_values(&self, store: &ParamStore, side: Side, ids: &[usize]) -> Result<Tensor> {
        let t = match side {
            Side::User => &self.user,
            Side::Ad => &self.ad,
        };
        let mut tape = Tape::new();
        let table = tape.param(store, &t.id_table)?;
        let emb = tape.gather_rows(table, ids)?;
        let out = t.unbiased.forward(&mut tape, store, emb)?;
        Ok(tape.value(out).clone())
    }

    /// Biased fusion representation (`c_u` or `c_i`) of the given entities.
    pub fn biased_values(&self, store: &ParamStore, side: Side, ids: &[usize], bias_feats: &Tensor) -> Result<Tensor> {
        let t = match side {
            Side::User => &self.user,
            Side::Ad => &self.ad,
        };
        let mut tape = Tape::new();
        let (_, _, _, fused) = t.forward(&mut tape, store, ids, bias_feats)?;
        Ok(tape.value(fused).clone())
    }
}

/// `Σ_b 1 − cos(a_b, b_b)`
pub fn cosine_penalty(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let dot = tape.row_dot(a, b)?;
    let na = tape.row_norm(a)?;
    let nb = tape.row_norm(b)?;
    let den = tape.mul(na, nb)?;
    let cos = tape.div(dot, den)?;
    let one_minus = tape.affine_scalar(cos, -1.0, 1.0)?;
    Ok(tape.sum(one_minus)?)
}

/// `Σ_b (a_b·b_b)² / (‖a_b‖·‖b_b‖)`
pub fn orthogonal_penalty(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let dot = tape.row_dot(a, b)?;
    let sq = tape.square(dot)?;
    let na = tape.row_norm(a)?;
    let nb = tape.row_norm(b)?;
    let den = tape.mul(na, nb)?;
    let q = tape.div(sq, den)?;
    Ok(tape.sum(q)?)
}

/// `(L_sim, L_orth)`, each summed over the batch and over both sides.
pub fn disentangle_loss(tape: &mut Tape, out: &CfBatchOutput) -> Result<(Var, Var)> {
    let su = cosine_penalty(tape, out.u_con, out.u_c)?;
    let si = cosine_penalty(tape, out.i_pop, out.i_p)?;
    let sim = tape.add(su, si)?;
    let ou = orthogonal_penalty(tape, out.u_con, out.u_int)?;
    let oi = orthogonal_penalty(tape, out.i_pop, out.i_pro)?;
    let orth = tape.add(ou, oi)?;
    Ok((sim, orth))
}

/// In-batch softmax: row `b` scores `anchors_b` against every positive in the
/// batch, with its own positive as the target.
pub fn sampled_softmax_loss(tape: &mut Tape, anchors: Var, positives: Var) -> Result<Var> {
    let b = tape.value(anchors).rows();
    if b < 2 {
        return Err(DasError::Invalid(format!(
            "sampled softmax needs at least 2 rows for in-batch negatives, got {b}"
        )));
    }
    let logits = tape.matmul_nt(anchors, positives)?;
    let rows = (0..b)
        .map(|r| CandidateRow { row: r, columns: std::iter::once(r).chain((0..b).filter(|&j| j != r)).collect() })
        .collect();
    Ok(tape.softmax_xent(logits, rows)?)
}

/// Tape handles of every CF loss term for one batch.
#[derive(Debug, Clone, Copy)]
pub struct CfLosses {
    pub bias: Var,
    pub unbias: Var,
    pub sim: Var,
    pub orth: Var,
    pub total: Var,
}

/// `L_cf_bias + L_cf_unbias + γ (L_sim + L_orth)`
pub fn cf_total_loss(tape: &mut Tape, out: &CfBatchOutput, gamma: f64) -> Result<CfLosses> {
    let bias = sampled_softmax_loss(tape, out.u, out.i)?;
    let unbias = sampled_softmax_loss(tape, out.u_int, out.i_pro)?;
    let (sim, orth) = disentangle_loss(tape, out)?;
    let total = if gamma == 0.0 {
        tape.weighted_sum(&[(bias, 1.0), (unbias, 1.0)])?
    } else {
        tape.weighted_sum(&[(bias, 1.0), (unbias, 1.0), (sim, gamma), (orth, gamma)])?
    };
    Ok(CfLosses { bias, unbias, sim, orth, total })
}

/// Plain-value form of the CF total.
pub fn cf_total(bias: f64, unbias: f64, disentangled: f64, gamma: f64) -> f64 {
    bias + unbias + gamma * disentangled
}
