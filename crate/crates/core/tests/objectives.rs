mod common;

use common::oracle::Oracle;
use common::{batch_of, forward, random_studies, rel_err, tiny_model};
use itemclip::batching::Batch;
use itemclip::objectives::LossWeights;
use proptest::prelude::*;

fn weights() -> LossWeights {
    LossWeights {
        p_mask: 0.3,
        key_frac: 0.5,
        ..Default::default()
    }
}

#[test]
fn vectorized_losses_match_enumeration() {
    let model = tiny_model(1);
    let studies = random_studies(4, &[2], 10);
    let batch = batch_of(&model, &studies, 3);
    let w = weights();
    let (_, out) = forward(&model, &studies, &batch, &w, 99);
    let o = Oracle::new(&model, &studies, &batch).losses(&w, 99);
    let b = &out.breakdown;
    for (name, a, e) in [("ila", b.ila, o.ila), ("iis", b.iis, o.iis), ("mps", b.mps, o.mps), ("kta", b.kta, o.kta)] {
        assert!(rel_err(a, e) <= 1e-10, "{name}: {a} vs {e}");
    }
}

#[test]
fn breakdown_total_is_weighted_sum() {
    let model = tiny_model(2);
    let studies = random_studies(3, &[], 4);
    let batch = batch_of(&model, &studies, 5);
    let w = LossWeights { lambda_iis: 0.7, lambda_mps: 0.3, lambda_kta: 2.0, ..weights() };
    let (_, out) = forward(&model, &studies, &batch, &w, 1);
    let b = out.breakdown;
    let expect = b.ila + 0.7 * b.iis + 0.3 * b.mps + 2.0 * b.kta;
    assert!((b.total - expect).abs() <= 1e-12);
    let zero = LossWeights { lambda_iis: 0.0, lambda_mps: 0.0, lambda_kta: 0.0, ..weights() };
    let (_, out) = forward(&model, &studies, &batch, &zero, 1);
    assert_eq!(out.breakdown.total, out.breakdown.ila);
}

#[test]
fn all_normal_batch_has_no_negatives() {
    let model = tiny_model(3);
    let studies = random_studies(3, &[0, 1, 2], 8);
    let batch = batch_of(&model, &studies, 1);
    let (_, out) = forward(&model, &studies, &batch, &weights(), 2);
    let d = &out.diagnostics;
    assert!(d.ila.iter().chain(&d.mps).chain(&d.kta).all(|t| t.sign > 0.0));
    assert_eq!(d.ila.len(), 3);
}

#[test]
fn iis_sign_grid() {
    let model = tiny_model(4);
    let mut studies = random_studies(2, &[], 3);
    studies[0].items = vec!["a red circle".into(), "a blue square".into(), "a green circle".into()];
    let batch = batch_of(&model, &studies, 2);
    let (_, out) = forward(&model, &studies, &batch, &weights(), 2);
    let grid: Vec<(usize, f64)> = out
        .diagnostics
        .iis
        .iter()
        .filter(|t| t.study == 0)
        .map(|t| (t.readout_item.unwrap(), t.sign))
        .collect();
    assert_eq!(grid.len(), 9);
    for (n, (j, s)) in grid.iter().enumerate() {
        assert_eq!(*j, n / 3);
        assert_eq!(*s, if n % 3 == n / 3 { 1.0 } else { -1.0 });
    }
}

#[test]
fn reduces_to_text_conditioned_siglip() {
    let model = tiny_model(5);
    let studies = random_studies(4, &[1, 3], 6);
    let batch = batch_of(&model, &studies, 7);
    let w = LossWeights {
        p_mask: 0.0,
        w_uwp: 1.0,
        lambda_iis: 0.0,
        lambda_kta: 0.0,
        lambda_mps: 0.25,
        ..Default::default()
    };
    let (_, out) = forward(&model, &studies, &batch, &w, 0);
    let oracle = Oracle::new(&model, &studies, &batch);
    let expect = oracle.tcs() + 0.25 * oracle.losses(&w, 0).mps;
    assert!(rel_err(out.breakdown.total, expect) <= 1e-12);
}

#[test]
fn full_key_set_equals_unmasked_alignment() {
    let model = tiny_model(6);
    let studies = random_studies(3, &[], 2);
    let batch = batch_of(&model, &studies, 3);
    let w = LossWeights { key_frac: 1.0, ..weights() };
    let (_, out) = forward(&model, &studies, &batch, &w, 4);
    let tcs = Oracle::new(&model, &studies, &batch).tcs();
    assert!(rel_err(out.breakdown.kta, tcs) <= 1e-12);
}

#[test]
fn total_gradient_is_sum_of_component_gradients() {
    let model = tiny_model(7);
    let studies = random_studies(3, &[0], 5);
    let batch = batch_of(&model, &studies, 9);
    let w = LossWeights { lambda_mps: 0.5, ..weights() };
    let (g, out) = forward(&model, &studies, &batch, &w, 3);
    let total = g.backward(out.total).unwrap().param_grads(&model.store);
    let parts = [(out.ila, 1.0), (out.iis, w.lambda_iis), (out.mps, w.lambda_mps), (out.kta, w.lambda_kta)];
    let comps: Vec<Vec<Vec<f64>>> = parts
        .iter()
        .map(|(v, _)| g.backward(*v).unwrap().param_grads(&model.store))
        .collect();
    for (p, grad) in total.iter().enumerate() {
        for (e, &a) in grad.iter().enumerate() {
            let s: f64 = parts.iter().zip(&comps).map(|((_, l), c)| l * c[p][e]).sum();
            assert!((a - s).abs() <= 1e-10 * a.abs().max(1.0), "param {p} entry {e}");
        }
    }
    let no_mps = LossWeights { lambda_mps: 0.0, ..w };
    let (g, out) = forward(&model, &studies, &batch, &no_mps, 3);
    let a = g.backward(out.total).unwrap().param_grads(&model.store);
    let (g2, out2) = forward(&model, &studies, &batch, &no_mps, 3);
    let mps = g2.backward(out2.mps).unwrap().param_grads(&model.store);
    let b = {
        let gi = g2.backward(out2.ila).unwrap().param_grads(&model.store);
        let gs = g2.backward(out2.iis).unwrap().param_grads(&model.store);
        let gk = g2.backward(out2.kta).unwrap().param_grads(&model.store);
        (0..gi.len())
            .map(|p| (0..gi[p].len()).map(|e| gi[p][e] + gs[p][e] + gk[p][e]).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    assert!(mps.iter().flatten().any(|v| *v != 0.0));
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
    }
}

fn reversed(batch: &Batch) -> Batch {
    let mut b = batch.clone();
    b.studies.reverse();
    b.items.reverse();
    b.item_text.reverse();
    b.negative_item.reverse();
    b.is_normal.reverse();
    b.negative_valid = itemclip::batching::validity_grid(&b.is_normal);
    b
}

#[test]
fn study_order_does_not_matter() {
    let model = tiny_model(8);
    let studies = random_studies(4, &[0, 2], 7);
    let batch = batch_of(&model, &studies, 5);
    let w = LossWeights { p_mask: 0.0, ..weights() };
    let (_, a) = forward(&model, &studies, &batch, &w, 0);
    let (_, b) = forward(&model, &studies, &reversed(&batch), &w, 0);
    assert!(rel_err(a.breakdown.total, b.breakdown.total) <= 1e-12);
}

#[test]
fn too_small_batch_is_rejected() {
    let model = tiny_model(9);
    let studies = random_studies(1, &[], 1);
    let batch = batch_of(&model, &studies, 1);
    let mut g = itemclip::numerics::Graph::new();
    let enc = model.encode_batch(&mut g, &batch, &[&studies[0].image]).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    assert!(itemclip::objectives::loss_total(&mut g, &model, &enc, &batch, &weights(), &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn losses_are_nonnegative(seed in 0u64..10_000, n in 2usize..5) {
        let model = tiny_model(seed);
        let studies = random_studies(n, &[0], seed + 1);
        let batch = batch_of(&model, &studies, seed + 2);
        let (_, out) = forward(&model, &studies, &batch, &weights(), seed + 3);
        let b = out.breakdown;
        for v in [b.ila, b.iis, b.mps, b.kta, b.total] {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
    }
}
