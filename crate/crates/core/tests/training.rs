mod common;

use std::collections::HashMap;

use ckge_core::checkpoint::{load_store, save_snapshot};
use ckge_core::evaluator::evaluate_triples;
use ckge_core::trainer::{plan_for_snapshot, run_continual_with, sample_negative, TrainableModel};
use ckge_core::*;
use common::{desk_config, heavy, lattice};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn quick(mode: TrainingMode, seed: u64) -> TrainingConfig {
    TrainingConfig {
        max_epochs: 30,
        ..desk_config(mode, seed)
    }
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn old_parameters_are_bit_identical_after_later_snapshots() {
    let _g = heavy();
    let kg = lattice(3);
    let mut trainer = ContinualTrainer::new(quick(TrainingMode::FastKge, 3)).unwrap();
    trainer.train_snapshot(&kg, 0).unwrap();
    let origin = (bits(&trainer.store().origin_entities), bits(&trainer.store().origin_relations));
    let view0 = trainer.view().unwrap();
    trainer.train_snapshot(&kg, 1).unwrap();
    let group1 = trainer.store().groups[0].clone();
    assert!(group1.is_frozen());
    trainer.train_snapshot(&kg, 2).unwrap();

    let store = trainer.store();
    assert_eq!((bits(&store.origin_entities), bits(&store.origin_relations)), origin);
    assert_eq!(store.groups[0], group1);
    let view = store.view().unwrap();
    for e in 0..view0.num_entities() {
        assert_eq!(view.entities.row(e), view0.entities.row(e));
    }
    assert_eq!(store.trainable_parameter_count(1), 0);
    assert_eq!(store.trainable_parameter_count(2), 0);
}

#[test]
fn same_seed_same_run() {
    let _g = heavy();
    let kg = lattice(1);
    for mode in TrainingMode::ALL {
        let (a, sa) = run_continual(&kg, &quick(mode, 9)).unwrap();
        let (b, sb) = run_continual(&kg, &quick(mode, 9)).unwrap();
        let (c, _) = run_continual(&kg, &quick(mode, 10)).unwrap();
        let curves = |r: &RunReport| r.snapshots.iter().map(|s| s.train.loss_curve.clone()).collect::<Vec<_>>();
        assert_eq!(curves(&a), curves(&b), "{mode}");
        assert_eq!(sa.view().unwrap().checksum(), sb.view().unwrap().checksum());
        assert_eq!(a.final_eval().unwrap(), b.final_eval().unwrap());
        assert_ne!(curves(&a), curves(&c), "{mode}");
    }
}

#[test]
fn frozen_rows_get_no_gradient() {
    let kg = lattice(0);
    let cfg = quick(TrainingMode::FastKge, 0);
    let mut trainer = ContinualTrainer::new(cfg.clone()).unwrap();
    trainer.train_snapshot(&kg, 0).unwrap();
    let plan = plan_for_snapshot(&kg, 1, &cfg).unwrap();
    let ranks = ckge_core::store::allocate_ranks(&plan, cfg.r_base, cfg.dim);
    let offsets = ckge_core::store::GroupOffsets {
        entity: kg.previous_entity_count(1),
        relation: kg.previous_relation_count(1),
    };
    let group = ckge_core::store::create_group(1, &plan, &ranks, cfg.dim, cfg.relation_rank, offsets, 4).unwrap();
    let n_factors = group.factors().count();
    let model = TrainableModel::with_group(trainer.view().unwrap(), group).unwrap();

    // one buffer per factor matrix and nothing for the frozen tables
    let zero = model.zero_gradients();
    assert_eq!(zero.tensors.len(), 2 * n_factors);
    assert_eq!(zero.tensors.iter().map(Vec::len).sum::<usize>(), model.parameter_count());

    // pairs that only touch snapshot-0 rows leave every buffer at exactly zero
    let old: Vec<(Triple, Triple)> = kg.snapshot(0).train[..40]
        .iter()
        .map(|&t| (t, Triple::new(t.tail, t.relation, t.head)))
        .collect();
    let (loss, grads) = model.loss_and_gradients(&old, cfg.scorer, cfg.margin);
    assert!(loss > 0.0);
    assert!(grads.tensors.iter().flatten().all(|&g| g.to_bits() == 0));

    // while pairs on new rows do produce gradient
    let new: Vec<(Triple, Triple)> = kg.snapshot(1).train[..40]
        .iter()
        .map(|&t| (t, Triple::new(t.tail, t.relation, t.head)))
        .collect();
    let (_, grads) = model.loss_and_gradients(&new, cfg.scorer, cfg.margin);
    assert!(grads.tensors.iter().flatten().any(|&g| g != 0.0));
}

#[test]
fn negative_sampler_is_uniform() {
    let (vocab, draws) = (50usize, 100_000);
    let truth = Triple::new(7, 0, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts: HashMap<(bool, usize), u64> = HashMap::new();
    for _ in 0..draws {
        let n = sample_negative(truth, vocab, |_| false, 10, &mut rng);
        assert_ne!(n, truth);
        let head_side = n.head != truth.head;
        assert!(head_side != (n.tail != truth.tail), "exactly one side corrupted");
        let e = if head_side { n.head } else { n.tail };
        *counts.entry((head_side, e)).or_default() += 1;
    }
    // redraws of the true triple leave 49 equally likely entities per side
    let cells = 2 * (vocab - 1);
    assert_eq!(counts.len(), cells);
    let expected = draws as f64 / cells as f64;
    let stat: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((cells - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(stat < critical, "chi-square {stat:.1} >= {critical:.1}");
}

#[test]
fn sampler_skips_known_corruptions() {
    let truth = Triple::new(0, 0, 1);
    let known = |t: &Triple| t.head == 0 || t.tail == 1;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        // every corruption keeps one side of the truth, so all are known;
        // the sampler gives up after the retries and returns its last draw
        let n = sample_negative(truth, 4, known, 3, &mut rng);
        assert!(n.relation == 0);
    }
    let open = |t: &Triple| t.tail == 1 && t.head < 3;
    for _ in 0..1000 {
        let n = sample_negative(truth, 4, open, 50, &mut rng);
        assert!(!open(&n) && n != truth, "{n:?}");
    }
}

#[test]
fn early_stopping_restores_best_parameters() {
    let _g = heavy();
    let kg = lattice(2);
    for patience in [1, 4] {
        let cfg = TrainingConfig {
            early_stop_patience: patience,
            max_epochs: 400,
            ..desk_config(TrainingMode::FastKge, 2)
        };
        let mut trainer = ContinualTrainer::new(cfg.clone()).unwrap();
        for i in 0..kg.len() {
            let stats = trainer.train_snapshot(&kg, i).unwrap();
            assert!(stats.epochs < cfg.max_epochs, "patience {patience} never triggered");
            assert_eq!(stats.epochs - stats.best_epoch, patience);
            assert_eq!(stats.loss_curve.len(), stats.epochs);
            let view = trainer.view().unwrap();
            let valid = &kg.snapshot(i).valid;
            let mrr = evaluate_triples(&view, valid, cfg.scorer, RankSetting::Raw, None, view.num_entities())
                .unwrap()
                .mrr;
            assert_eq!(Some(mrr), stats.best_valid_mrr, "snapshot {i}");
        }
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let _g = heavy();
    let kg = lattice(4);
    let dir = tempfile::tempdir().unwrap();
    for mode in TrainingMode::ALL {
        let cfg = quick(mode, 4);
        let root = dir.path().join(mode.name());
        let (_, full) = run_continual_with(&kg, &cfg, |t, r| {
            save_snapshot(&root, t.store(), r.train.snapshot, cfg.seed).map(|_| ())
        })
        .unwrap();
        let partial = load_store(&root, 1).unwrap();
        let mut trainer = ContinualTrainer::resume(cfg.clone(), partial, 2).unwrap();
        trainer.train_snapshot(&kg, 2).unwrap();
        assert_eq!(trainer.store(), &full, "{mode}");
        assert_eq!(load_store(&root, 2).unwrap(), full);
    }
}

#[test]
fn trainer_refuses_out_of_order_snapshots() {
    let kg = lattice(0);
    let mut trainer = ContinualTrainer::new(quick(TrainingMode::FastKge, 0)).unwrap();
    assert!(trainer.train_snapshot(&kg, 1).is_err());
    trainer.train_snapshot(&kg, 0).unwrap();
    assert!(trainer.train_snapshot(&kg, 0).is_err());
    assert!(trainer.train_snapshot(&kg, 3).is_err());
}

#[test]
fn modes_shape_the_store() {
    let _g = heavy();
    let kg = lattice(5);
    let (_, fast) = run_continual(&kg, &quick(TrainingMode::FastKge, 5)).unwrap();
    assert_eq!(fast.groups.len(), 2);
    assert!(fast.groups.iter().all(|g| g.entity_factors.len() == 3 && g.relation_factor.is_some()));
    assert_eq!(fast.origin_entities.rows(), kg.snapshot(0).entity_count);

    let (_, no_gl) = run_continual(&kg, &quick(TrainingMode::NoGl, 5)).unwrap();
    assert!(no_gl.groups.iter().all(|g| g.entity_factors.len() == 1));

    let (report, dense) = run_continual(&kg, &quick(TrainingMode::NoIncLora, 5)).unwrap();
    assert!(dense.groups.is_empty());
    assert_eq!(dense.origin_entities.rows(), kg.snapshot(2).entity_count);
    let last = kg.snapshot(2);
    assert_eq!(report.trainable_params()[2], (last.entity_count + last.relation_count) * 16);
}

#[test]
fn single_snapshot_graph_is_plain_training() {
    let kg = lattice(0);
    let only = GrowingKg::from_snapshots(vec![kg.snapshot(0).clone()]).unwrap();
    let (report, store) = run_continual(&only, &quick(TrainingMode::FastKge, 0)).unwrap();
    assert!(store.groups.is_empty());
    assert_eq!(report.snapshots.len(), 1);
    // better than ranking at random among 180 entities
    assert!(report.final_eval().unwrap().average.mrr > 0.05);
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let kg = lattice(0);
    let cfg = TrainingConfig {
        learning_rate: 1e308,
        max_epochs: 5,
        ..desk_config(TrainingMode::FastKge, 0)
    };
    match run_continual(&kg, &cfg) {
        Err(Error::Diverged { snapshot, .. }) => assert_eq!(snapshot, 0),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.0.total_train_seconds)),
    }
}
