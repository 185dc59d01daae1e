use std::sync::Arc;

use rand::Rng;
use tsa_core::adaptation::*;
use tsa_core::adapters::{attach, AdapterConfig, TaskModel};
use tsa_core::backbone::{BackboneSpec, BackboneWeights};
use tsa_core::classifiers::HeadKind;
use tsa_core::episodes::Episode;
use tsa_core::harness::{ci95, mean};
use tsa_core::rng::rng_for;
use tsa_tensor::Tensor;

fn tiny_spec() -> BackboneSpec {
    BackboneSpec {
        in_channels: 3,
        stem_channels: 4,
        stem_kernel: 3,
        stem_stride: 1,
        stage_channels: vec![4, 6, 8, 10],
        blocks_per_stage: 1,
        input_resolution: 8,
    }
}

fn weights(seed: u64) -> Arc<BackboneWeights> {
    Arc::new(BackboneWeights::init(&tiny_spec(), &mut rng_for(seed, &[])).unwrap())
}

/// Episode whose classes are distinct random prototypes plus small noise;
/// query labels are random when `random_query` is set.
fn episode(seed: u64, way: usize, shots: usize, queries: usize, noise: f64, random_query: bool) -> Episode {
    let mut rng = rng_for(seed, &[1]);
    let len = 3 * 8 * 8;
    let protos: Vec<Vec<f64>> = (0..way).map(|_| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let draw = |k: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        protos[k].iter().map(|v| v + noise * rng.gen_range(-1.0..1.0)).collect()
    };
    let mut s = Vec::new();
    let mut sl = Vec::new();
    let mut q = Vec::new();
    let mut ql = Vec::new();
    for k in 0..way {
        for _ in 0..shots {
            s.extend(draw(k, &mut rng));
            sl.push(k);
        }
        for _ in 0..queries {
            let label = if random_query { rng.gen_range(0..way) } else { k };
            q.extend(draw(k, &mut rng));
            ql.push(label);
        }
    }
    Episode {
        support: Tensor::new([sl.len(), 3, 8, 8], s).unwrap(),
        support_labels: sl,
        query: Tensor::new([ql.len(), 3, 8, 8], q).unwrap(),
        query_labels: ql,
        way,
        shots: vec![shots; way],
        domain_id: 0,
        episode_index: seed,
        classes: (0..way).collect(),
        support_ids: Vec::new(),
        query_ids: Vec::new(),
    }
}

fn model(w: &Arc<BackboneWeights>, code: &str) -> TaskModel {
    let cfg: AdapterConfig = code.parse().unwrap();
    attach(w.clone(), &cfg, 0).unwrap()
}

fn cfg(iterations: usize, lr: f64) -> AdaptConfig {
    AdaptConfig {
        iterations,
        lr_beta: lr,
        ..Default::default()
    }
}

#[test]
fn adaptation_never_touches_phi() {
    let w = weights(1);
    let before = (*w).clone();
    let ep = episode(2, 3, 2, 2, 0.3, false);
    for code in ["Ad-R-M-PA", "Ad-S-CW", "Ad-R-M-DN2", "PA"] {
        for head in [HeadKind::Ncc, HeadKind::Md, HeadKind::Lr, HeadKind::Softmax] {
            let c = AdaptConfig { head, ..cfg(3, 1.0) };
            let (adapted, _) = adapt(model(&w, code), &ep.support, &ep.support_labels, &c).unwrap();
            assert!(adapted.model.backbone.bit_eq(&before), "{code} {head}");
            assert!(Arc::ptr_eq(&adapted.model.backbone, &w));
        }
    }
    assert!(w.bit_eq(&before));
}

#[test]
fn zero_iterations_is_a_no_op() {
    let w = weights(3);
    let ep = episode(4, 4, 2, 3, 0.3, false);
    let m = model(&w, "Ad-R-M-PA");
    let (adapted, trace) = adapt(m.clone(), &ep.support, &ep.support_labels, &cfg(0, 1.0)).unwrap();
    assert!(trace.is_empty());
    for (a, b) in adapted.model.params().iter().zip(m.params()) {
        assert!(a.bit_eq(b));
    }
    // frozen-backbone predictions (no adapters at all) agree
    let base = evaluate_episode(model(&w, "none"), &ep, &cfg(0, 1.0)).unwrap();
    let with = evaluate_episode(m, &ep, &cfg(0, 1.0)).unwrap();
    let agree = base.predictions.iter().zip(&with.predictions).filter(|(a, b)| a == b).count();
    assert!(agree as f64 >= 0.99 * base.predictions.len() as f64);
}

#[test]
fn one_shot_support_loss_does_not_increase() {
    let w = weights(5);
    let ep = episode(6, 5, 1, 2, 0.3, false);
    let (adapted, trace) = adapt(model(&w, "Ad-R-M-PA"), &ep.support, &ep.support_labels, &cfg(20, 1.0)).unwrap();
    assert_eq!(trace.len(), 20);
    assert_eq!(trace.accuracies.len(), 20);
    assert_eq!(trace.seconds.len(), 20);
    // loss of the final iterate, computed by one more zero-lr pass
    let (_, after) = adapt(adapted.model, &ep.support, &ep.support_labels, &cfg(1, 0.0)).unwrap();
    assert!(after.losses[0] <= trace.losses[0], "{} > {}", after.losses[0], trace.losses[0]);
    assert!(trace.min_loss().unwrap() <= trace.losses[0]);
}

#[test]
fn one_step_moves_theta() {
    let w = weights(7);
    let ep = episode(8, 3, 2, 2, 0.3, false);
    let m = model(&w, "Ad-R-M-PA");
    let (adapted, _) = adapt(m.clone(), &ep.support, &ep.support_labels, &cfg(1, 1.0)).unwrap();
    let changed = adapted
        .model
        .params()
        .iter()
        .zip(m.params())
        .filter(|(a, b)| !a.bit_eq(b))
        .count();
    assert!(changed > 0);
    let alpha_changed = adapted.model.sites.iter().zip(&m.sites).any(|(a, b)| a.params != b.params);
    assert!(alpha_changed);
}

#[test]
fn adaptation_is_deterministic() {
    let w = weights(9);
    let ep = episode(10, 4, 2, 3, 0.4, false);
    for head in [HeadKind::Ncc, HeadKind::Lr] {
        let c = AdaptConfig { head, seed: 3, ..cfg(4, 1.0) };
        let a = evaluate_episode(model(&w, "Ad-R-M-PA"), &ep, &c).unwrap();
        let b = evaluate_episode(model(&w, "Ad-R-M-PA"), &ep, &c).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.trace.losses, b.trace.losses);
    }
}

#[test]
fn checkpoints_share_one_run() {
    let w = weights(11);
    let ep = episode(12, 3, 2, 4, 0.3, false);
    let c = AdaptConfig { checkpoints: vec![0, 2, 5], ..cfg(5, 1.0) };
    let out = evaluate_episode(model(&w, "Ad-R-M"), &ep, &c).unwrap();
    assert_eq!(out.trace.len(), 5);
    assert_eq!(out.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 2, 5]);
    assert_eq!(out.checkpoints[2].1, out.accuracy);
    for &(t, acc) in &out.checkpoints {
        let single = evaluate_episode(model(&w, "Ad-R-M"), &ep, &cfg(t, 1.0)).unwrap();
        assert_eq!(single.accuracy, acc, "checkpoint {t}");
    }
}

#[test]
fn finetuning_changes_phi_and_trains_everything() {
    let w = weights(13);
    let ep = episode(14, 3, 2, 2, 0.3, false);
    let (adapted, _) = finetune_baseline(w.clone(), &ep.support, &ep.support_labels, &cfg(2, 1.0)).unwrap();
    assert!(!adapted.model.backbone.bit_eq(&w));
    let trainable: usize = w.trainable_names().iter().map(|n| w.tensors[n].len()).sum();
    assert!(trainable > tiny_spec().conv_params());

    let (still, _) = finetune_baseline(w.clone(), &ep.support, &ep.support_labels, &cfg(2, 0.0)).unwrap();
    assert!(still.model.backbone.bit_eq(&w));
}

#[test]
fn query_equal_to_support_is_classified_perfectly() {
    let w = weights(15);
    let mut ep = episode(16, 6, 1, 1, 0.0, false);
    ep.query = ep.support.clone();
    ep.query_labels = ep.support_labels.clone();
    let out = evaluate_episode(model(&w, "none"), &ep, &cfg(0, 1.0)).unwrap();
    assert_eq!(out.accuracy, 1.0);
}

#[test]
fn random_query_labels_score_at_chance() {
    let w = weights(17);
    let accs: Vec<f64> = (0..200)
        .map(|e| {
            let ep = episode(100 + e, 2, 3, 5, 0.5, true);
            evaluate_episode(model(&w, "none"), &ep, &cfg(0, 1.0)).unwrap().accuracy
        })
        .collect();
    let (m, ci) = (mean(&accs), ci95(&accs));
    assert!((m - 0.5).abs() <= 1.5 * ci.max(0.02), "mean {m} ci {ci}");
}

#[test]
fn diverging_adaptation_reports_the_iteration() {
    let w = weights(19);
    let ep = episode(20, 3, 2, 2, 0.3, false);
    let c = cfg(3, f64::MAX);
    match adapt(model(&w, "Ad-R-M-PA"), &ep.support, &ep.support_labels, &c) {
        Err(tsa_core::Error::NonFiniteLoss { iteration, .. }) => assert!(iteration >= 1),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("expected divergence"),
    }
}

#[test]
fn invalid_support_is_rejected() {
    let w = weights(21);
    let ep = episode(22, 3, 1, 1, 0.3, false);
    assert!(adapt(model(&w, "Ad-R-M"), &ep.support, &[0, 0, 0], &cfg(1, 1.0)).is_err());
    assert!(adapt(model(&w, "Ad-R-M"), &ep.support, &[0, 1], &cfg(1, 1.0)).is_err());
    let bad = AdaptConfig { lr_beta: -1.0, ..cfg(1, 1.0) };
    assert!(adapt(model(&w, "Ad-R-M"), &ep.support, &ep.support_labels, &bad).is_err());
}

#[test]
fn lr_preset_and_alpha_default() {
    let c = AdaptConfig::default();
    assert_eq!(c.lr_alpha(), c.lr_beta / 2.0);
    assert_eq!(c.clone().for_domain(true).lr_beta, LR_BETA_SEEN);
    assert_eq!(c.clone().for_domain(false).lr_beta, LR_BETA_UNSEEN);
    let o = AdaptConfig { lr_alpha: Some(0.3), ..c };
    assert_eq!(o.lr_alpha(), 0.3);
}
