mod common;

use das_core::quantizer::{nearest_code, RqVae, RqVaeSpec, SemanticEmbedding};
use das_core::trainer::fit_quantizers_only;
use das_core::{DasError, SemanticId, Side};
use das_numerics::{finite_diff_check, squared_distance, CheckOptions, ParamStore, SeededRng, Tape, Tensor};
use proptest::prelude::*;

fn model(d_sem: usize, code_dim: usize, levels: usize, n: usize) -> RqVae {
    RqVae::new(RqVaeSpec { side: Side::Ad, d_sem, hidden: vec![6], code_dim, levels, codebook_size: n, mu: 0.25 })
        .unwrap()
}

fn registered(q: &RqVae, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    q.register(&mut store, &mut SeededRng::new(seed)).unwrap();
    store
}

fn set_codebook(q: &RqVae, store: &mut ParamStore, level: usize, rows: &[&[f64]]) {
    store.set_value(&q.codebook_name(level), Tensor::from_rows(rows).unwrap()).unwrap();
}

/// Exhaustive scan, first minimum wins.
fn brute_argmin(codebook: &Tensor, r: &[f64]) -> usize {
    let d: Vec<f64> = (0..codebook.rows()).map(|i| squared_distance(codebook.row(i), r)).collect();
    let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
    d.iter().position(|&x| x == best).unwrap()
}

#[test]
fn nearest_of_two_codes() {
    let q = model(3, 2, 1, 2);
    let mut store = registered(&q, 0);
    set_codebook(&q, &mut store, 1, &[&[0.0, 0.0], &[1.0, 1.0]]);
    let (sid, residuals, z) = q.quantize_latent(&store, &[0.9, 1.2]).unwrap();
    assert_eq!(sid, SemanticId(vec![1]));
    assert!((residuals[1][0] + 0.1).abs() < 1e-15);
    assert!((residuals[1][1] - 0.2).abs() < 1e-15);
    assert_eq!(z, vec![1.0, 1.0]);
}

#[test]
fn exact_code_leaves_zero_residual() {
    let q = model(3, 2, 1, 5);
    let mut store = registered(&q, 0);
    let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, -(i as f64)]).collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    set_codebook(&q, &mut store, 1, &refs);
    let (sid, residuals, _) = q.quantize_latent(&store, &[3.0, -3.0]).unwrap();
    assert_eq!(sid.codes(), &[3]);
    assert_eq!(residuals[1], vec![0.0, 0.0]);
}

#[test]
fn ties_go_to_the_smallest_index() {
    let q = model(3, 2, 1, 3);
    let mut store = registered(&q, 0);
    set_codebook(&q, &mut store, 1, &[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 5.0]]);
    let (sid, _, _) = q.quantize_latent(&store, &[0.0, 0.0]).unwrap();
    assert_eq!(sid.codes(), &[0]);
}

#[test]
fn rq_loss_by_hand() {
    // Identity-free setup: make the encoder output exactly (1, 0) by zeroing
    // its weights and putting the target in the output bias.
    let q = RqVae::new(RqVaeSpec {
        side: Side::User,
        d_sem: 2,
        hidden: vec![],
        code_dim: 2,
        levels: 1,
        codebook_size: 1,
        mu: 0.25,
    })
    .unwrap();
    let mut store = registered(&q, 0);
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        let shape = store.value(&name).unwrap().shape().to_vec();
        store.set_value(&name, Tensor::zeros(&shape)).unwrap();
    }
    let enc_bias = q.encoder().bias_name(0);
    store.set_value(&enc_bias, Tensor::vector(vec![1.0, 0.0])).unwrap();
    set_codebook(&q, &mut store, 1, &[&[0.5, 0.0]]);

    let s = Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap();
    let (_, rq) = q.semantic_loss(&store, &s).unwrap();
    assert!((rq - 0.3125).abs() < 1e-15, "{rq}");

    // dL/de = 2(e − r0) from the codebook term only.
    let mut tape = Tape::new();
    let f = q.forward_train(&mut tape, &store, &s).unwrap();
    let grads = tape.backward(f.rq_loss).unwrap();
    let g = grads.get(&q.codebook_name(1)).unwrap();
    assert_eq!(g.data(), &[2.0 * (0.5 - 1.0), 0.0]);
    // the μ-term gives the encoder 2μ(r0 − e)
    let gb = grads.get(&enc_bias).unwrap();
    assert!((gb.data()[0] - 2.0 * 0.25 * 0.5).abs() < 1e-15);
}

#[test]
fn perfect_autoencoder_has_zero_losses() {
    let q = RqVae::new(RqVaeSpec {
        side: Side::User,
        d_sem: 2,
        hidden: vec![],
        code_dim: 2,
        levels: 1,
        codebook_size: 2,
        mu: 0.25,
    })
    .unwrap();
    let mut store = registered(&q, 0);
    let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    store.set_value(&q.encoder().weight_name(0), eye.clone()).unwrap();
    store.set_value(&q.decoder().weight_name(0), eye).unwrap();
    store.set_value(&q.encoder().bias_name(0), Tensor::zeros(&[2])).unwrap();
    store.set_value(&q.decoder().bias_name(0), Tensor::zeros(&[2])).unwrap();
    set_codebook(&q, &mut store, 1, &[&[1.0, 2.0], &[-3.0, 0.5]]);
    let s = Tensor::matrix(2, 2, vec![-3.0, 0.5, 1.0, 2.0]).unwrap();
    assert_eq!(q.semantic_loss(&store, &s).unwrap(), (0.0, 0.0));
}

#[test]
fn gradient_routing_of_semantic_terms() {
    let q = model(5, 3, 2, 4);
    let store = registered(&q, 3);
    let mut rng = SeededRng::new(9);
    let s = Tensor::matrix(6, 5, (0..30).map(|_| rng.normal()).collect()).unwrap();

    let mut tape = Tape::new();
    let f = q.forward_train(&mut tape, &store, &s).unwrap();
    let grads = tape.backward(f.rq_loss).unwrap();
    assert!(grads.get(&q.codebook_name(1)).is_some());
    assert!(grads.get(&q.encoder().weight_name(0)).is_some());
    assert!(grads.get(&q.decoder().weight_name(0)).is_none());

    let mut tape = Tape::new();
    let f = q.forward_train(&mut tape, &store, &s).unwrap();
    let grads = tape.backward(f.recon_loss).unwrap();
    assert!(grads.get(&q.encoder().weight_name(0)).is_some());
    assert!(grads.get(&q.decoder().weight_name(1)).is_some());
    // straight-through: no reconstruction gradient into the codebooks
    for l in 1..=2 {
        assert!(grads.get(&q.codebook_name(l)).is_none());
    }
}

#[test]
fn semantic_losses_pass_finite_differences() {
    let q = model(5, 3, 2, 4);
    let mut store = registered(&q, 4);
    let mut rng = SeededRng::new(10);
    let s = Tensor::matrix(6, 5, (0..30).map(|_| rng.normal()).collect()).unwrap();
    let latents = q.encode_values(&store, &s).unwrap();
    q.init_codebooks(&mut store, &latents, 10, &mut SeededRng::new(1)).unwrap();

    let report = finite_diff_check(
        |tape, st| {
            let f = q.forward_train(tape, st, &s).map_err(to_numerics)?;
            tape.add(f.recon_loss, f.rq_loss)
        },
        &store,
        CheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
}

fn to_numerics(e: DasError) -> das_numerics::NumericsError {
    match e {
        DasError::Numerics(n) => n,
        other => panic!("{other}"),
    }
}

#[test]
fn pooled_embedding_is_the_row_sum() {
    let q = model(3, 2, 2, 2);
    let mut store = registered(&q, 0);
    set_codebook(&q, &mut store, 1, &[&[1.0, 0.0], &[7.0, 7.0]]);
    set_codebook(&q, &mut store, 2, &[&[-1.0, -1.0], &[0.0, 2.0]]);
    let z = q.pooled_sid_embedding(&store, &SemanticId(vec![0, 1])).unwrap();
    assert_eq!(z, vec![1.0, 2.0]);

    let a = q.pooled_sid_embedding(&store, &SemanticId(vec![1, 0])).unwrap();
    let b = q.pooled_sid_embedding(&store, &SemanticId(vec![1, 1])).unwrap();
    assert_eq!(vec![b[0] - a[0], b[1] - a[1]], vec![1.0, 3.0]);

    assert!(q.pooled_sid_embedding(&store, &SemanticId(vec![0, 2])).is_err());
    assert!(q.pooled_sid_embedding(&store, &SemanticId(vec![0])).is_err());
}

#[test]
fn single_level_pool_is_the_code_row() {
    let q = model(3, 2, 1, 3);
    let store = registered(&q, 5);
    let z = q.pooled_sid_embedding(&store, &SemanticId(vec![2])).unwrap();
    assert_eq!(z, q.codebook(&store, 1).unwrap().row(2));
}

#[test]
fn inference_is_pure_and_batch_consistent() {
    let q = model(4, 3, 3, 5);
    let store = registered(&q, 6);
    let before = store.clone();
    let mut rng = SeededRng::new(2);
    let rows: Vec<Vec<f64>> = (0..7).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
    let batch = Tensor::from_rows(&rows).unwrap();
    let batched = q.infer_batch(&store, &batch).unwrap();
    for (row, expect) in rows.iter().zip(&batched) {
        let s = SemanticEmbedding { entity_id: "x".into(), side: Side::Ad, vector: row.clone() };
        let once = q.infer_sid(&store, &s).unwrap();
        let twice = q.infer_sid(&store, &s).unwrap();
        assert_eq!(once, twice);
        assert_eq!(&once, expect);
    }
    assert_eq!(store, before);
}

#[test]
fn side_and_shape_mismatches_are_rejected() {
    let q = model(4, 3, 1, 2);
    let store = registered(&q, 0);
    let wrong_side = SemanticEmbedding { entity_id: "u".into(), side: Side::User, vector: vec![0.0; 4] };
    assert!(matches!(q.infer_sid(&store, &wrong_side), Err(DasError::SideMismatch { .. })));
    let wrong_len = SemanticEmbedding { entity_id: "a".into(), side: Side::Ad, vector: vec![0.0; 5] };
    assert!(q.infer_sid(&store, &wrong_len).is_err());
}

#[test]
fn kmeans_codebooks_are_distinct() {
    let q = model(6, 3, 3, 8);
    let mut store = registered(&q, 7);
    let mut rng = SeededRng::new(8);
    let s = Tensor::matrix(64, 6, (0..384).map(|_| rng.normal()).collect()).unwrap();
    let latents = q.encode_values(&store, &s).unwrap();
    q.init_codebooks(&mut store, &latents, 20, &mut SeededRng::new(3)).unwrap();
    for l in 1..=3 {
        let cb = q.codebook(&store, l).unwrap();
        for i in 0..cb.rows() {
            for j in i + 1..cb.rows() {
                assert!(squared_distance(cb.row(i), cb.row(j)) > 0.0, "level {l} rows {i},{j}");
            }
        }
    }
}

#[test]
fn kmeans_init_needs_enough_samples() {
    let q = model(6, 3, 1, 8);
    let mut store = registered(&q, 7);
    let latents = Tensor::matrix(5, 3, vec![0.5; 15]).unwrap();
    let err = q.init_codebooks(&mut store, &latents, 5, &mut SeededRng::new(0)).unwrap_err();
    assert!(err.to_string().contains('8'), "{err}");
}

#[test]
fn trained_sids_are_reproducible() {
    let world = common::tiny_world(1);
    let data = world.dataset().unwrap();
    let cfg = common::tiny_train();
    let a = fit_quantizers_only(&data, &cfg).unwrap().model;
    let b = fit_quantizers_only(&data, &cfg).unwrap().model;
    for side in [Side::User, Side::Ad] {
        let s = match side {
            Side::User => &data.users.vectors,
            Side::Ad => &data.ads.vectors,
        };
        assert_eq!(a.infer(side, s).unwrap(), b.infer(side, s).unwrap());
    }
}

#[test]
fn short_residual_paths_reconstruct_well() {
    let world = common::tiny_world(2);
    let data = world.dataset().unwrap();
    let cfg = das_core::trainer::TrainConfig { epochs: 6, ..common::tiny_train() };
    let model = fit_quantizers_only(&data, &cfg).unwrap().model;
    let q = model.quantizer(Side::Ad);
    let (mean_recon, _) = q.semantic_loss(&model.store, &data.ads.vectors).unwrap();

    // The sample whose latent the codebooks explain best.
    let latents = q.encode_values(&model.store, &data.ads.vectors).unwrap();
    let best = (0..latents.rows())
        .min_by(|&a, &b| {
            let ra = q.quantize_latent(&model.store, latents.row(a)).unwrap().1;
            let rb = q.quantize_latent(&model.store, latents.row(b)).unwrap().1;
            let na: f64 = ra.last().unwrap().iter().map(|x| x * x).sum();
            let nb: f64 = rb.last().unwrap().iter().map(|x| x * x).sum();
            na.total_cmp(&nb)
        })
        .unwrap();
    let s = SemanticEmbedding {
        entity_id: data.ads.index.id(best).to_string(),
        side: Side::Ad,
        vector: data.ads.row(best).to_vec(),
    };
    let rec = q.quantize(&model.store, &s).unwrap().reconstruction;
    let err: f64 = rec.iter().zip(&s.vector).map(|(a, b)| (a - b) * (a - b)).sum();
    assert!(err < mean_recon, "{err} vs mean {mean_recon}");
}

fn random_model(seed: u64, levels: usize, n: usize, d: usize) -> (RqVae, ParamStore) {
    let q = model(d + 1, d, levels, n);
    let mut store = registered(&q, seed);
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    for l in 1..=levels {
        // coarse grid values make exact ties likely
        let data: Vec<f64> = (0..n * d).map(|_| (rng.below(5) as f64 - 2.0) * 0.5).collect();
        store.set_value(&q.codebook_name(l), Tensor::matrix(n, d, data).unwrap()).unwrap();
    }
    (q, store)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn argmin_matches_exhaustive_scan(seed in any::<u64>(), levels in 1usize..4, n in 1usize..9, d in 1usize..4) {
        let (q, store) = random_model(seed, levels, n, d);
        let mut rng = SeededRng::new(seed.wrapping_add(1));
        for _ in 0..16 {
            let r0: Vec<f64> = (0..d).map(|_| (rng.below(9) as f64 - 4.0) * 0.25).collect();
            let (sid, residuals, _) = q.quantize_latent(&store, &r0).unwrap();
            for l in 1..=levels {
                let cb = q.codebook(&store, l).unwrap();
                prop_assert_eq!(sid.codes()[l - 1], brute_argmin(cb, &residuals[l - 1]));
                prop_assert_eq!(nearest_code(cb, &residuals[l - 1]), sid.codes()[l - 1]);
            }
        }
    }

    #[test]
    fn residuals_telescope(seed in any::<u64>(), levels in 1usize..5) {
        let q = model(4, 3, levels, 6);
        let store = registered(&q, seed);
        let mut rng = SeededRng::new(seed);
        let r0: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let (sid, residuals, z) = q.quantize_latent(&store, &r0).unwrap();
        prop_assert_eq!(residuals.len(), levels + 1);
        let mut pooled = [0.0; 3];
        for l in 1..=levels {
            let e = q.codebook(&store, l).unwrap().row(sid.codes()[l - 1]);
            for j in 0..3 {
                // recurrence holds bit for bit
                prop_assert_eq!(residuals[l][j], residuals[l - 1][j] - e[j]);
                pooled[j] += e[j];
            }
        }
        prop_assert_eq!(&z, &q.pooled_sid_embedding(&store, &sid).unwrap());
        for j in 0..3 {
            let scale = r0[j].abs().max(pooled[j].abs()).max(1.0);
            prop_assert!((r0[j] - pooled[j] - residuals[levels][j]).abs() <= 8.0 * f64::EPSILON * scale);
        }
    }
}
