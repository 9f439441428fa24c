//! Residual-quantized autoencoder: one per side, turning semantic embeddings
//! into hierarchical semantic ids.
//!
//! Quantization runs in the encoder's latent space: `r_0 = encoder(s)`, then
//! at each level `c_l = argmin_i ‖r_{l-1} − e_i‖²` (smallest index on ties)
//! and `r_l = r_{l-1} − e_{c_l}`. The decoder reads the straight-through
//! latent `r_0 + sg(z − r_0)`. Alignment losses read `z + (r_0 − sg(r_0))`,
//! which has the value of `z` and routes gradient to both the gathered code
//! rows and the encoder.

use das_numerics::{squared_distance, ParamStore, SeededRng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{DasError, Result};
use crate::kmeans::kmeans;
use crate::mlp::Mlp;
use crate::types::{SemanticId, Side};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqVaeSpec {
    pub side: Side,
    pub d_sem: usize,
    pub hidden: Vec<usize>,
    pub code_dim: usize,
    pub levels: usize,
    pub codebook_size: usize,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbedding {
    pub entity_id: String,
    pub side: Side,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub sid: SemanticId,
    /// `r_0 ..= r_L`
    pub residuals: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    pub reconstruction: Vec<f64>,
}

/// Tape handles produced by one training forward pass over a batch.
#[derive(Debug, Clone)]
pub struct RqForward {
    pub r0: Var,
    pub sids: Vec<SemanticId>,
    pub z: Var,
    pub z_align: Var,
    pub reconstruction: Var,
    /// `‖s − ŝ‖²`, batch mean.
    pub recon_loss: Var,
    /// `Σ_l ‖sg[r_{l-1}] − e‖² + μ‖r_{l-1} − sg[e]‖²`, batch mean.
    pub rq_loss: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqVae {
    pub spec: RqVaeSpec,
    encoder: Mlp,
    decoder: Mlp,
    prefix: String,
}

/// Index of the row of `codebook` nearest to `r` (smallest index on ties).
pub fn nearest_code(codebook: &Tensor, r: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..codebook.rows() {
        let d = squared_distance(codebook.row(i), r);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

impl RqVae {
    pub fn new(spec: RqVaeSpec) -> Result<Self> {
        if spec.levels == 0 || spec.codebook_size == 0 || spec.code_dim == 0 || spec.d_sem == 0 {
            return Err(DasError::Invalid(format!("quantizer dimensions must be positive: {spec:?}")));
        }
        let prefix = format!("{}_rq", spec.side);
        let mut enc = vec![spec.d_sem];
        enc.extend(&spec.hidden);
        enc.push(spec.code_dim);
        let mut dec = vec![spec.code_dim];
        dec.extend(spec.hidden.iter().rev());
        dec.push(spec.d_sem);
        Ok(Self {
            encoder: Mlp::new(format!("{prefix}.encoder"), enc),
            decoder: Mlp::new(format!("{prefix}.decoder"), dec),
            prefix,
            spec,
        })
    }

    pub fn side(&self) -> Side {
        self.spec.side
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    /// Parameter name of the level-`level` codebook, counting from 1.
    pub fn codebook_name(&self, level: usize) -> String {
        format!("{}.codebook.{level}", self.prefix)
    }

    /// Adds encoder, decoder and codebooks to `store`. Codebooks start as small
    /// Gaussian noise; [`init_codebooks`](Self::init_codebooks) replaces them.
    pub fn register(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        self.encoder.register(store, &mut rng.fork("encoder"))?;
        self.decoder.register(store, &mut rng.fork("decoder"))?;
        let mut cb = rng.fork("codebooks");
        let (n, d) = (self.spec.codebook_size, self.spec.code_dim);
        for l in 1..=self.spec.levels {
            let data: Vec<f64> = (0..n * d).map(|_| 0.1 * cb.normal()).collect();
            store.insert(self.codebook_name(l), Tensor::matrix(n, d, data)?)?;
        }
        Ok(())
    }

    pub fn codebook<'a>(&self, store: &'a ParamStore, level: usize) -> Result<&'a Tensor> {
        Ok(store.value(&self.codebook_name(level))?)
    }

    fn check_input(&self, s: &Tensor) -> Result<()> {
        if s.shape().len() != 2 || s.cols() != self.spec.d_sem {
            return Err(DasError::Invalid(format!(
                "{} quantizer expects d_sem = {}, got shape {:?}",
                self.spec.side,
                self.spec.d_sem,
                s.shape()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, s: Var) -> Result<Var> {
        self.encoder.forward(tape, store, s)
    }

    pub fn encode_values(&self, store: &ParamStore, s: &Tensor) -> Result<Tensor> {
        self.check_input(s)?;
        self.encoder.apply(store, s)
    }

    /// Residual quantization of one latent `r_0`.
    pub fn quantize_latent(&self, store: &ParamStore, r0: &[f64]) -> Result<(SemanticId, Vec<Vec<f64>>, Vec<f64>)> {
        if r0.len() != self.spec.code_dim {
            return Err(DasError::Invalid(format!(
                "latent has length {}, code dim is {}",
                r0.len(),
                self.spec.code_dim
            )));
        }
        let mut codes = Vec::with_capacity(self.spec.levels);
        let mut residuals = vec![r0.to_vec()];
        let mut z: Option<Vec<f64>> = None;
        for l in 1..=self.spec.levels {
            let cb = self.codebook(store, l)?;
            let prev = residuals.last().unwrap();
            let c = nearest_code(cb, prev);
            let e = cb.row(c);
            residuals.push(prev.iter().zip(e).map(|(r, e)| r - e).collect());
            z = Some(match z {
                None => e.to_vec(),
                Some(acc) => acc.iter().zip(e).map(|(a, e)| a + e).collect(),
            });
            codes.push(c);
        }
        Ok((SemanticId(codes), residuals, z.unwrap()))
    }

    /// Codes for every row of a latent matrix.
    pub fn assign(&self, store: &ParamStore, r0: &Tensor) -> Result<Vec<SemanticId>> {
        (0..r0.rows()).map(|i| self.quantize_latent(store, r0.row(i)).map(|q| q.0)).collect()
    }

    pub fn quantize(&self, store: &ParamStore, s: &SemanticEmbedding) -> Result<QuantizationResult> {
        if s.side != self.spec.side {
            return Err(DasError::SideMismatch { expected: self.spec.side.to_string(), got: s.side.to_string() });
        }
        let x = Tensor::matrix(1, s.vector.len(), s.vector.clone())
            .map_err(|_| DasError::Invalid("empty semantic embedding".into()))?;
        let r0 = self.encode_values(store, &x)?;
        let (sid, residuals, z) = self.quantize_latent(store, r0.row(0))?;
        // z_st = r_0 + (z − r_0) has the value of z up to rounding; decode
        // exactly what the training pass decodes.
        let zst: Vec<f64> = r0.row(0).iter().zip(&z).map(|(&r, &zz)| r + (zz - r)).collect();
        let rec = self.decoder.apply(store, &Tensor::matrix(1, zst.len(), zst)?)?;
        Ok(QuantizationResult { sid, residuals, z, reconstruction: rec.data().to_vec() })
    }

    /// `z = Σ_l codebook_l[sid_l]`.
    pub fn pooled_sid_embedding(&self, store: &ParamStore, sid: &SemanticId) -> Result<Vec<f64>> {
        self.check_sid(sid)?;
        let mut z = self.codebook(store, 1)?.row(sid.0[0]).to_vec();
        for l in 2..=self.spec.levels {
            let row = self.codebook(store, l)?.row(sid.0[l - 1]);
            for (a, &e) in z.iter_mut().zip(row) {
                *a += e;
            }
        }
        Ok(z)
    }

    fn check_sid(&self, sid: &SemanticId) -> Result<()> {
        if sid.levels() != self.spec.levels {
            return Err(DasError::Invalid(format!(
                "sid {sid} has {} levels, model has {}",
                sid.levels(),
                self.spec.levels
            )));
        }
        if let Some((l, &c)) = sid.0.iter().enumerate().find(|(_, &c)| c >= self.spec.codebook_size) {
            return Err(DasError::Invalid(format!(
                "code {c} at level {} is out of range for codebook size {}",
                l + 1,
                self.spec.codebook_size
            )));
        }
        Ok(())
    }

    /// Differentiable sum-pooling of code rows for a batch of sids.
    pub fn pooled_on_tape(&self, tape: &mut Tape, store: &ParamStore, sids: &[SemanticId]) -> Result<Var> {
        for sid in sids {
            self.check_sid(sid)?;
        }
        let mut z: Option<Var> = None;
        for l in 1..=self.spec.levels {
            let cb = tape.param(store, &self.codebook_name(l))?;
            let idx: Vec<usize> = sids.iter().map(|s| s.0[l - 1]).collect();
            let e = tape.gather_rows(cb, &idx)?;
            z = Some(match z {
                None => e,
                Some(acc) => tape.add(acc, e)?,
            });
        }
        Ok(z.unwrap())
    }

    pub fn infer_sid(&self, store: &ParamStore, s: &SemanticEmbedding) -> Result<(SemanticId, Vec<f64>)> {
        let q = self.quantize(store, s)?;
        Ok((q.sid, q.z))
    }

    /// Sids and pooled embeddings for every row of `s`.
    pub fn infer_batch(&self, store: &ParamStore, s: &Tensor) -> Result<Vec<(SemanticId, Vec<f64>)>> {
        let r0 = self.encode_values(store, s)?;
        (0..r0.rows())
            .map(|i| {
                let (sid, _, z) = self.quantize_latent(store, r0.row(i))?;
                Ok((sid, z))
            })
            .collect()
    }

    /// Level-by-level k-means on encoder latents: level `l` is fit to the
    /// residuals left by the already initialized levels `< l`.
    pub fn init_codebooks(
        &self,
        store: &mut ParamStore,
        latents: &Tensor,
        max_iters: usize,
        rng: &mut SeededRng,
    ) -> Result<()> {
        let mut residual = latents.clone();
        for l in 1..=self.spec.levels {
            let mut r = rng.fork_indexed("kmeans", l as u64);
            let centroids = kmeans(&residual, self.spec.codebook_size, max_iters, &mut r)?;
            for i in 0..residual.rows() {
                let c = nearest_code(&centroids, residual.row(i));
                let e = centroids.row(c).to_vec();
                for (v, e) in residual.row_mut(i).iter_mut().zip(e) {
                    *v -= e;
                }
            }
            store.set_value(&self.codebook_name(l), centroids)?;
        }
        Ok(())
    }

    /// Training forward pass over a batch of semantic embeddings (rows of `s`).
    pub fn forward_train(&self, tape: &mut Tape, store: &ParamStore, s: &Tensor) -> Result<RqForward> {
        self.check_input(s)?;
        let b = s.rows() as f64;
        let sv = tape.constant(s.clone());
        let r0 = self.encode(tape, store, sv)?;
        let sids = self.assign(store, tape.value(r0))?;

        let mut r = r0;
        let mut z: Option<Var> = None;
        let mut terms = Vec::with_capacity(2 * self.spec.levels);
        for l in 1..=self.spec.levels {
            let cb = tape.param(store, &self.codebook_name(l))?;
            let idx: Vec<usize> = sids.iter().map(|s| s.0[l - 1]).collect();
            let e = tape.gather_rows(cb, &idx)?;
            let e_sg = tape.stop_grad(e)?;
            let r_sg = tape.stop_grad(r)?;
            let d1 = tape.sub(r_sg, e)?;
            let d1 = tape.square(d1)?;
            let codebook_term = tape.sum(d1)?;
            let d2 = tape.sub(r, e_sg)?;
            let d2 = tape.square(d2)?;
            let commit_term = tape.sum(d2)?;
            terms.push((codebook_term, 1.0 / b));
            terms.push((commit_term, self.spec.mu / b));
            r = tape.sub(r, e_sg)?;
            z = Some(match z {
                None => e,
                Some(acc) => tape.add(acc, e)?,
            });
        }
        let z = z.unwrap();
        let rq_loss = tape.weighted_sum(&terms)?;

        let gap = tape.sub(z, r0)?;
        let gap = tape.stop_grad(gap)?;
        let z_st = tape.add(r0, gap)?;
        let reconstruction = self.decoder.forward(tape, store, z_st)?;
        let diff = tape.sub(sv, reconstruction)?;
        let sq = tape.square(diff)?;
        let total = tape.sum(sq)?;
        let recon_loss = tape.scale(total, 1.0 / b)?;

        let r0_sg = tape.stop_grad(r0)?;
        let zero = tape.sub(r0, r0_sg)?;
        let z_align = tape.add(z, zero)?;

        Ok(RqForward { r0, sids, z, z_align, reconstruction, recon_loss, rq_loss })
    }

    /// Values of `(L_recon, L_rqvae)` for a batch.
    pub fn semantic_loss(&self, store: &ParamStore, s: &Tensor) -> Result<(f64, f64)> {
        if s.rows() == 0 {
            return Err(DasError::Invalid("semantic_loss on an empty batch".into()));
        }
        let mut tape = Tape::new();
        let f = self.forward_train(&mut tape, store, s)?;
        Ok((tape.scalar(f.recon_loss), tape.scalar(f.rq_loss)))
    }
}
