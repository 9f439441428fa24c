mod common;

use das_core::cf::{
    cf_total, cf_total_loss, cosine_penalty, disentangle_loss, orthogonal_penalty, sampled_softmax_loss, DebiasTowers,
    TowerSpec,
};
use das_core::trainer::{fit, TrainConfig};
use das_core::DasError;
use das_numerics::{finite_diff_check, CheckOptions, NumericsError, ParamStore, SeededRng, Tape, Tensor};
use proptest::prelude::*;

fn spec() -> TowerSpec {
    TowerSpec { n_users: 5, n_ads: 4, id_dim: 3, hidden: 8, d_align: 3, user_bias_dim: 2, ad_bias_dim: 2 }
}

fn towers(seed: u64) -> (DebiasTowers, ParamStore) {
    let t = DebiasTowers::new(spec());
    let mut store = ParamStore::new();
    t.register(&mut store, &mut SeededRng::new(seed)).unwrap();
    (t, store)
}

fn feats(rows: usize, seed: u64) -> Tensor {
    let mut r = SeededRng::new(seed);
    Tensor::matrix(rows, 2, (0..2 * rows).map(|_| r.normal()).collect()).unwrap()
}

fn das(e: DasError) -> NumericsError {
    match e {
        DasError::Numerics(n) => n,
        other => panic!("{other}"),
    }
}

#[test]
fn zero_towers_emit_zero_vectors() {
    let (t, mut store) = towers(0);
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        let shape = store.value(&name).unwrap().shape().to_vec();
        store.set_value(&name, Tensor::zeros(&shape)).unwrap();
    }
    let mut tape = Tape::new();
    let out = t.forward_towers(&mut tape, &store, &[0, 3], &feats(2, 1), &[1, 2], &feats(2, 2)).unwrap();
    for v in [out.u_int, out.u_con, out.u_c, out.u, out.i_pro, out.i_pop, out.i_p, out.i] {
        assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
        assert_eq!(tape.value(v).shape(), &[2, 3]);
    }
}

#[test]
fn identical_users_get_identical_rows() {
    let (t, store) = towers(1);
    let mut tape = Tape::new();
    let f = feats(3, 1);
    let out = t.forward_towers(&mut tape, &store, &[2, 2, 4], &f, &[0, 1, 2], &feats(3, 2)).unwrap();
    let v = tape.value(out.u_int);
    assert_eq!(v.row(0), v.row(1));
    assert_ne!(v.row(0), v.row(2));
}

#[test]
fn hand_built_scalar_tower() {
    let t = DebiasTowers::new(TowerSpec {
        n_users: 1,
        n_ads: 1,
        id_dim: 1,
        hidden: 1,
        d_align: 1,
        user_bias_dim: 1,
        ad_bias_dim: 1,
    });
    let mut store = ParamStore::new();
    t.register(&mut store, &mut SeededRng::new(0)).unwrap();
    let set = |store: &mut ParamStore, name: &str, v: f64| {
        let shape = store.value(name).unwrap().shape().to_vec();
        store.set_value(name, Tensor::full(&shape, v)).unwrap();
    };
    set(&mut store, "cf.user.id_embedding", 2.0);
    set(&mut store, "cf.user.interest.layer0.weight", 1.5);
    set(&mut store, "cf.user.interest.layer0.bias", -1.0);
    set(&mut store, "cf.user.interest.layer1.weight", -0.5);
    set(&mut store, "cf.user.interest.layer1.bias", 0.25);
    set(&mut store, "cf.user.observed_conformity.layer0.weight", -1.0);
    set(&mut store, "cf.user.observed_conformity.layer0.bias", 0.0);
    set(&mut store, "cf.user.observed_conformity.layer1.weight", 3.0);
    set(&mut store, "cf.user.observed_conformity.layer1.bias", 1.0);
    set(&mut store, "cf.user.fusion.layer0.weight", 1.0);
    set(&mut store, "cf.user.fusion.layer0.bias", 0.5);
    set(&mut store, "cf.user.fusion.layer1.weight", 2.0);
    set(&mut store, "cf.user.fusion.layer1.bias", 0.0);

    let mut tape = Tape::new();
    let out = t
        .forward_towers(
            &mut tape,
            &store,
            &[0],
            &Tensor::matrix(1, 1, vec![-0.4]).unwrap(),
            &[0],
            &Tensor::matrix(1, 1, vec![0.0]).unwrap(),
        )
        .unwrap();
    // interest: relu(1.5·2 − 1) = 2, then −0.5·2 + 0.25 = −0.75
    let int = -0.75;
    // observed: relu(−1·−0.4) = 0.4, then 3·0.4 + 1 = 2.2
    let obs = 2.2;
    // fusion over [int, obs]: relu(int + obs + 0.5) = 1.95, then 2·1.95
    let fused = 2.0 * (int + obs + 0.5);
    assert!((tape.value(out.u_int).item() - int).abs() < 1e-15);
    assert!((tape.value(out.u_c).item() - obs).abs() < 1e-15);
    assert!((tape.value(out.u).item() - fused).abs() < 1e-14);
}

#[test]
fn mismatched_feature_width_is_rejected() {
    let (t, store) = towers(0);
    let mut tape = Tape::new();
    let wide = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
    assert!(t.forward_towers(&mut tape, &store, &[0], &wide, &[0], &feats(1, 0)).is_err());
    assert!(t.forward_towers(&mut tape, &store, &[0, 1], &feats(2, 0), &[0], &feats(1, 0)).is_err());
}

fn consts(tape: &mut Tape, rows: &[&[f64]]) -> das_numerics::Var {
    tape.constant(Tensor::from_rows(rows).unwrap())
}

#[test]
fn orthogonality_penalty_by_hand() {
    let mut tape = Tape::new();
    let con = consts(&mut tape, &[&[1.0, 0.0]]);
    let int = consts(&mut tape, &[&[1.0, 1.0]]);
    let l = orthogonal_penalty(&mut tape, con, int).unwrap();
    assert!((tape.scalar(l) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
}

#[test]
fn identical_and_orthogonal_branches_zero_the_penalties() {
    let mut tape = Tape::new();
    let a = consts(&mut tape, &[&[0.3, -2.0, 1.0], &[4.0, 0.0, 0.5]]);
    let same = cosine_penalty(&mut tape, a, a).unwrap();
    assert!(tape.scalar(same).abs() < 1e-15);
    let b = consts(&mut tape, &[&[2.0, 0.3, 0.0], &[0.0, 7.0, 0.0]]);
    let orth = orthogonal_penalty(&mut tape, a, b).unwrap();
    assert_eq!(tape.scalar(orth), 0.0);
}

#[test]
fn zero_norm_operand_is_rejected() {
    let mut tape = Tape::new();
    let a = consts(&mut tape, &[&[0.0, 0.0]]);
    let b = consts(&mut tape, &[&[1.0, 0.0]]);
    assert!(cosine_penalty(&mut tape, a, b).is_err());
    assert!(orthogonal_penalty(&mut tape, b, a).is_err());
}

#[test]
fn sampled_softmax_examples() {
    let mut tape = Tape::new();
    let a = consts(&mut tape, &[&[1.0, 1.0], &[1.0, 1.0]]);
    let p = consts(&mut tape, &[&[0.5, 0.5], &[0.5, 0.5]]);
    let l = sampled_softmax_loss(&mut tape, a, p).unwrap();
    assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-15);

    let a = consts(&mut tape, &[&[2.0, 0.0], &[0.0, 2.0]]);
    let p = consts(&mut tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
    let l = sampled_softmax_loss(&mut tape, a, p).unwrap();
    let expect = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
    assert!((tape.scalar(l) - expect).abs() < 1e-15);
    assert!((expect - 0.1269).abs() < 5e-5);

    // anchors orthogonal to every positive
    let a = consts(&mut tape, &[&[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0], &[0.0, 0.0, 3.0]]);
    let p = consts(&mut tape, &[&[0.0, 1.0, 0.0], &[0.0, -4.0, 0.0], &[0.0, 0.5, 0.0]]);
    let l = sampled_softmax_loss(&mut tape, a, p).unwrap();
    assert!((tape.scalar(l) - 3f64.ln()).abs() < 1e-15);

    let a = consts(&mut tape, &[&[1.0, 0.0]]);
    assert!(sampled_softmax_loss(&mut tape, a, a).is_err());
}

#[test]
fn total_combines_terms() {
    assert!((cf_total(0.5, 0.7, 2.0, 0.1) - 1.4).abs() < 1e-15);
    assert_eq!(cf_total(0.5, 0.7, 2.0, 0.0), 1.2);
    assert_eq!(cf_total(0.5, 0.7, 0.0, 0.3), 1.2);

    let (t, store) = towers(2);
    let mut tape = Tape::new();
    let out = t.forward_towers(&mut tape, &store, &[0, 1, 2], &feats(3, 3), &[3, 2, 1], &feats(3, 4)).unwrap();
    let plain = cf_total_loss(&mut tape, &out, 0.0).unwrap();
    let expect = tape.scalar(plain.bias) + tape.scalar(plain.unbias);
    assert_eq!(tape.scalar(plain.total), expect);
    let weighted = cf_total_loss(&mut tape, &out, 0.1).unwrap();
    let d = tape.scalar(weighted.sim) + tape.scalar(weighted.orth);
    let want = cf_total(tape.scalar(weighted.bias), tape.scalar(weighted.unbias), d, 0.1);
    assert!((tape.scalar(weighted.total) - want).abs() < 1e-14);
}

#[test]
fn cf_losses_pass_finite_differences() {
    let (t, store) = towers(3);
    let (uf, af) = (feats(4, 5), feats(4, 6));
    for which in 0..3 {
        let report = finite_diff_check(
            |tape, st| {
                let out = t.forward_towers(tape, st, &[0, 1, 4, 2], &uf, &[3, 0, 1, 2], &af).map_err(das)?;
                match which {
                    0 => sampled_softmax_loss(tape, out.u, out.i).map_err(das),
                    1 => sampled_softmax_loss(tape, out.u_int, out.i_pro).map_err(das),
                    _ => {
                        let (sim, orth) = disentangle_loss(tape, &out).map_err(das)?;
                        tape.add(sim, orth)
                    }
                }
            },
            &store,
            CheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "loss {which}: {:?}", report.failures().collect::<Vec<_>>());
    }
}

/// `1 − cos` and `dot²/(‖a‖‖b‖)` from first principles.
fn oracle(a: &[f64], b: &[f64]) -> (f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (1.0 - dot / (na * nb), dot * dot / (na * nb))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn positive_multiples_minimise_similarity(v in prop::collection::vec(-5.0f64..5.0, 3), k in 0.01f64..50.0) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let w: Vec<f64> = v.iter().map(|x| k * x).collect();
        let mut tape = Tape::new();
        let a = consts(&mut tape, &[&v]);
        let b = consts(&mut tape, &[&w]);
        let l = cosine_penalty(&mut tape, a, b).unwrap();
        prop_assert!(tape.scalar(l).abs() < 1e-12);
        // a negative multiple is the maximum, 2
        let neg: Vec<f64> = v.iter().map(|x| -k * x).collect();
        let c = consts(&mut tape, &[&neg]);
        let l = cosine_penalty(&mut tape, a, c).unwrap();
        prop_assert!((tape.scalar(l) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn penalties_match_oracle(a in prop::collection::vec(-3.0f64..3.0, 4), b in prop::collection::vec(-3.0f64..3.0, 4)) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-2) && b.iter().any(|x| x.abs() > 1e-2));
        let mut tape = Tape::new();
        let va = consts(&mut tape, &[&a]);
        let vb = consts(&mut tape, &[&b]);
        let sim = cosine_penalty(&mut tape, va, vb).unwrap();
        let orth = orthogonal_penalty(&mut tape, va, vb).unwrap();
        let (s, o) = oracle(&a, &b);
        prop_assert!((tape.scalar(sim) - s).abs() < 1e-12);
        prop_assert!((tape.scalar(orth) - o).abs() < 1e-12 * (1.0 + o));
        prop_assert!(tape.scalar(sim) >= -1e-15 && tape.scalar(orth) >= 0.0);
        // zero only for orthogonal rows
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        prop_assert_eq!(tape.scalar(orth) == 0.0, dot == 0.0);
    }

    #[test]
    fn softmax_is_nonnegative_and_uniform_logits_give_ln_b(
        b in 2usize..8,
        seed in any::<u64>(),
        c in -2.0f64..2.0,
    ) {
        let mut r = SeededRng::new(seed);
        let a = Tensor::matrix(b, 3, (0..3 * b).map(|_| r.normal()).collect()).unwrap();
        let p = Tensor::matrix(b, 3, (0..3 * b).map(|_| r.normal()).collect()).unwrap();
        let mut tape = Tape::new();
        let (va, vp) = (tape.constant(a), tape.constant(p));
        let l = sampled_softmax_loss(&mut tape, va, vp).unwrap();
        prop_assert!(tape.scalar(l) >= 0.0);

        // every logit equal to c: one-hot anchors along an axis the positives share
        let anchors = Tensor::matrix(b, 2, (0..b).flat_map(|_| [1.0, 0.0]).collect()).unwrap();
        let positives = Tensor::matrix(b, 2, (0..b).flat_map(|i| [c, i as f64]).collect()).unwrap();
        let (va, vp) = (tape.constant(anchors), tape.constant(positives));
        let l = sampled_softmax_loss(&mut tape, va, vp).unwrap();
        prop_assert!((tape.scalar(l) - (b as f64).ln()).abs() < 1e-12);
    }
}

/// Mean |cos(c_u^con, c_u^int)| over every user of a trained model.
fn mean_abs_cos(gamma: f64, seed: u64) -> f64 {
    let world = common::tiny_world(seed);
    let data = world.dataset().unwrap();
    let cfg = TrainConfig { gamma, beta: 0.0, epochs: 4, seed, ..common::tiny_train() };
    let model = fit(&data, &cfg).unwrap().model;
    let towers = model.parts.towers.as_ref().unwrap();
    let users: Vec<usize> = (0..data.users.len()).collect();
    let mut tape = Tape::new();
    let ads = vec![0; users.len()];
    let ab = Tensor::zeros(&[users.len(), data.ad_bias.cols()]);
    let out = towers.forward_towers(&mut tape, &model.store, &users, &data.user_bias, &ads, &ab).unwrap();
    let (con, int) = (tape.value(out.u_con), tape.value(out.u_int));
    let total: f64 = (0..users.len()).map(|u| (1.0 - oracle(con.row(u), int.row(u)).0).abs()).sum();
    total / users.len() as f64
}

#[test]
fn disentangling_decorrelates_conformity_from_interest() {
    for seed in 0..3 {
        let with = mean_abs_cos(0.1, seed);
        let without = mean_abs_cos(0.0, seed);
        assert!(with < without, "seed {seed}: γ=0.1 gives {with:.4}, γ=0 gives {without:.4}");
    }
}
