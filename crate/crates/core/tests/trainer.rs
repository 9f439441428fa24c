mod common;

use das_core::alignment::align_total;
use das_core::trainer::{
    build_step_graph, fit, fit_quantizers_only, training_pairs, Ablation, DasModel, StepInputs, TrainConfig, Trainer,
};
use das_core::{DasError, Side};
use das_numerics::{finite_diff_check, CheckOptions, CheckStatus, NumericsError, SeededRng};

#[test]
fn total_decomposes_exactly_at_every_step() {
    let data = common::tiny_world(0).dataset().unwrap();
    let cfg = TrainConfig { alpha: 0.7, beta: 0.3, ..common::tiny_train() };
    let out = fit(&data, &cfg).unwrap();
    assert!(!out.trace.is_empty());
    for b in &out.trace {
        assert_eq!(b.total, b.recomposed_total(cfg.alpha, cfg.beta), "step {}", b.step);
        let sem = 0.0 + b.user_recon + b.user_rq + b.ad_recon + b.ad_rq;
        assert_eq!(b.sem, sem);
        let at = align_total(&b.align.into());
        assert!((b.align_total.unwrap() - at).abs() <= 1e-12 * at.abs().max(1.0));
    }
    // the bank warms up after the first batch
    assert!(out.trace[0].align.co_u2u_zu.is_none());
    assert!(out.trace.iter().any(|b| b.align.co_u2u_zu.is_some()));
}

#[test]
fn zero_weights_match_quantizer_only_training() {
    let data = common::tiny_world(1).dataset().unwrap();
    let cfg = TrainConfig { alpha: 0.0, beta: 0.0, ..common::tiny_train() };
    let joint = fit(&data, &cfg).unwrap().model;
    let alone = fit_quantizers_only(&data, &cfg).unwrap().model;
    let mut compared = 0;
    for p in alone.store.iter() {
        assert_eq!(joint.store.value(&p.name).unwrap(), &p.value, "{}", p.name);
        compared += 1;
    }
    assert!(compared > 0);
    for side in [Side::User, Side::Ad] {
        let q = joint.quantizer(side);
        for l in 1..=cfg.levels {
            let name = q.codebook_name(l);
            let a = joint.store.value(&name).unwrap().data();
            let b = alone.store.value(&name).unwrap().data();
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn zero_epochs_returns_the_initialized_model() {
    let data = common::tiny_world(2).dataset().unwrap();
    let cfg = TrainConfig { epochs: 0, ..common::tiny_train() };
    let out = fit(&data, &cfg).unwrap();
    assert!(out.trace.is_empty() && out.epochs.is_empty());
    let mut fresh = Trainer::new(DasModel::new(&cfg, &data, true).unwrap());
    fresh.warmup(&data).unwrap();
    assert_eq!(out.model, fresh.model);
    assert_eq!(out.model.step, 0);
    assert!(out.bank.is_cold());
}

#[test]
fn ablated_terms_are_absent_and_the_rest_unchanged() {
    let data = common::tiny_world(3).dataset().unwrap();
    let full_cfg = TrainConfig { epochs: 1, ..common::tiny_train() };
    let no_u2i = TrainConfig { ablation: Ablation { dual_u2i: false, ..Ablation::default() }, ..full_cfg.clone() };

    // Same starting point, same batch: only the two dual u2i terms disappear.
    let pairs = training_pairs(&data, &full_cfg);
    let batch = &pairs[..full_cfg.batch_size];
    let step = |cfg: &TrainConfig| {
        let mut t = Trainer::new(DasModel::new(cfg, &data, true).unwrap());
        t.warmup(&data).unwrap();
        t.train_step(&data, batch, 0).unwrap()
    };
    let a = step(&full_cfg);
    let b = step(&no_u2i);
    assert!(a.align.u2i_zu.is_some() && a.align.u2i_zi.is_some());
    assert!(b.align.u2i_zu.is_none() && b.align.u2i_zi.is_none());
    assert_eq!(a.align.u2u_zu, b.align.u2u_zu);
    assert_eq!(a.align.i2i_zi, b.align.i2i_zi);
    assert_eq!(a.sem, b.sem);
    assert_eq!(a.cf_total, b.cf_total);
    let dropped = a.align.u2i_zu.unwrap() + a.align.u2i_zi.unwrap();
    let diff = a.align_total.unwrap() - b.align_total.unwrap();
    assert!((diff - dropped).abs() < 1e-12);

    let out = fit(&data, &no_u2i).unwrap();
    assert!(out.trace.iter().all(|s| s.align.u2i_zu.is_none()));
}

#[test]
fn runs_are_deterministic() {
    let data = common::tiny_world(4).dataset().unwrap();
    let cfg = common::tiny_train();
    let a = fit(&data, &cfg).unwrap();
    let b = fit(&data, &cfg).unwrap();
    let ja = serde_json::to_string(&a.trace).unwrap();
    let jb = serde_json::to_string(&b.trace).unwrap();
    assert_eq!(ja, jb);
    assert_eq!(a.model, b.model);
    assert_eq!(a.bank, b.bank);

    let other = fit(&data, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(serde_json::to_string(&other.trace).unwrap(), ja);
}

#[test]
fn reconstruction_improves_over_training() {
    let data = common::tiny_world(5).dataset().unwrap();
    let cfg = TrainConfig { epochs: 6, ..common::tiny_train() };
    let out = fit(&data, &cfg).unwrap();
    let first = &out.epochs[0];
    let last = out.epochs.last().unwrap();
    assert!(last.user_recon + last.ad_recon < first.user_recon + first.ad_recon, "{first:?} -> {last:?}");
}

#[test]
fn empty_and_tiny_datasets_are_rejected() {
    let mut data = common::tiny_world(6).dataset().unwrap();
    let cfg = common::tiny_train();
    data.events.clear();
    assert!(matches!(fit(&data, &cfg), Err(DasError::Invalid(_))));
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = TrainConfig { lr: 0.02, seed: 99, ..common::tiny_train() };
    assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    let parsed = TrainConfig::from_json(r#"{"L": 2, "N": 64, "d": 8, "B": 32, "L_neg": 4, "K_bank": 3}"#).unwrap();
    assert_eq!(
        (parsed.levels, parsed.codebook_size, parsed.code_dim, parsed.batch_size, parsed.l_neg, parsed.bank_capacity),
        (2, 64, 8, 32, 4, 3)
    );
    assert_eq!(parsed.alpha, 1.0);
    assert_eq!(parsed.beta, 0.5);
    assert_eq!(parsed.gamma, 0.1);
    assert!(TrainConfig::from_json(r#"{"alhpa": 1}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"beta": -1}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"N": 0}"#).is_err());
}

fn numerics(e: DasError) -> NumericsError {
    match e {
        DasError::Numerics(n) => n,
        other => panic!("{other}"),
    }
}

/// L_All on B=4, L=2, N=8, d=4 against central differences, with a warm
/// memory bank so all six alignment terms are present.
#[test]
fn full_objective_passes_finite_differences() {
    let data = common::tiny_world(7).dataset().unwrap();
    let cfg = TrainConfig {
        levels: 2,
        codebook_size: 8,
        code_dim: 4,
        batch_size: 4,
        l_neg: 2,
        encoder_hidden: vec![6],
        id_dim: 3,
        ..common::tiny_train()
    };
    let mut trainer = Trainer::new(DasModel::new(&cfg, &data, true).unwrap());
    trainer.warmup(&data).unwrap();
    let pairs = training_pairs(&data, &cfg);
    for chunk in pairs.chunks(16).take(20) {
        trainer.train_step(&data, chunk, 0).unwrap();
    }
    // four distinct ads whose rows all have stored partners
    let mut batch: Vec<(usize, usize)> = Vec::new();
    for &(u, i) in &pairs {
        let warm = trainer.bank.user_partners(u).next().is_some() && trainer.bank.ad_partners(i).next().is_some();
        if warm && batch.len() < 4 && batch.iter().all(|&(v, j)| v != u && j != i) {
            batch.push((u, i));
        }
    }
    assert_eq!(batch.len(), 4);
    let model = &trainer.model;
    let inputs = StepInputs::gather(&data, &model.user_bias, &model.ad_bias, &batch).unwrap();
    let rng = SeededRng::new(11);
    let report = finite_diff_check(
        |tape, store| {
            let g = build_step_graph(&model.parts, &model.config, store, tape, &inputs, &trainer.bank, &rng)
                .map_err(numerics)?;
            assert!(g.align.iter().all(Option::is_some));
            Ok(g.total)
        },
        &model.store,
        CheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    assert!(report.max_rel_error() < 1e-4);
    let checked = report.params.iter().filter(|p| p.status == CheckStatus::Pass).count();
    assert!(checked > 20, "only {checked} parameters checked");
}
