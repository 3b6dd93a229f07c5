//! Weight-sharing supernet: memory, extraction, locality and fairness.

mod common;

use common::*;
use nasforge_core::cost::{cost_report, TensorShape};
use nasforge_core::fair::PatternMode;
use nasforge_core::net::{predict, BnMode};
use nasforge_core::search::ArchParams;
use nasforge_core::space::SearchSpace;
use nasforge_core::supernet::{Supernet, SupernetConfig};
use nasforge_core::tensor::{OptimKind, OptimState};

fn trained_toy(mode: PatternMode, steps: usize) -> Supernet {
    let space = SearchSpace::toy();
    let mut net = Supernet::new(&space, SupernetConfig::new(mode), 3).unwrap();
    let task = toy_task(&space, 8, 0.2, 3);
    let (x, y) = first_batch(&task, 8);
    let mut opt = OptimState::for_params(OptimKind::sgd(0.05, 0.9, 0.0), net.params());
    let params = ArchParams::init(&space);
    let mut r = rng(4);
    for _ in 0..steps {
        let plan = net.activate(&params.sample(&space, &mut r).arch).unwrap();
        let e = net.forward_loss(&plan, &x, &y, true).unwrap();
        let mut bank = net.zero_grads();
        let mut mask = net.empty_mask();
        net.scatter_grads(&mut bank, &plan, &e.grads, 1.0).unwrap();
        net.mark(&mut mask, &plan).unwrap();
        net.apply(&mut opt, &bank, &mask).unwrap();
    }
    net
}

#[test]
fn memory_within_twice_the_largest_architecture() {
    let space = SearchSpace::toy();
    let net = Supernet::new(&space, SupernetConfig::new(PatternMode::Fair), 0).unwrap();
    let largest = net.extract(&space.max_arch()).unwrap().params.iter().map(|p| p.numel()).sum::<usize>();
    assert!(net.num_values() <= 2 * largest, "{} values for a {largest}-parameter max arch", net.num_values());
}

#[test]
fn extraction_matches_activated_forward() {
    let net = trained_toy(PatternMode::Fair, 5);
    let space = net.space().clone();
    let (x, _) = first_batch(&toy_task(&space, 4, 0.2, 9), 4);
    let params = ArchParams::init(&space);
    let mut r = rng(10);
    for _ in 0..10 {
        let arch = params.sample(&space, &mut r).arch;
        let plan = net.activate(&arch).unwrap();
        let shared = net.logits(&plan, &x).unwrap();
        let standalone = net.extract(&arch).unwrap();
        let own = predict(&standalone.plan, &standalone.params, &x, BnMode::Batch).unwrap();
        let diff = shared.data().iter().zip(own.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-10, "max logit difference {diff:e}");
    }
}

#[test]
fn extracted_size_matches_cost_model() {
    let space = SearchSpace::toy();
    let net = Supernet::new(&space, SupernetConfig::new(PatternMode::Fair), 1).unwrap();
    let input = TensorShape::new(space.input.c, space.input.t, space.input.s, space.input.s);
    let params = ArchParams::init(&space);
    let mut r = rng(2);
    for _ in 0..25 {
        let arch = params.sample(&space, &mut r).arch;
        let n: usize = net.extract(&arch).unwrap().params.iter().map(|p| p.numel()).sum();
        assert_eq!(n as u64, cost_report(&space, &arch, input).unwrap().total_params);
    }
}

#[test]
fn max_arch_extraction_copies_every_super_kernel() {
    let space = SearchSpace::toy_channels();
    for mode in [PatternMode::Fair, PatternMode::Naive] {
        let net = Supernet::new(&space, SupernetConfig::new(mode), 5).unwrap();
        let ext = net.extract(&space.max_arch()).unwrap();
        assert_eq!(ext.params.len(), net.params().len());
        for (a, b) in ext.params.iter().zip(net.params()) {
            assert_eq!(a.shape(), b.shape());
        }
        // Fair mode may permute channels; the multiset of values is the same.
        let mut a: Vec<f64> = ext.params.iter().flat_map(|p| p.data().to_vec()).collect();
        let mut b: Vec<f64> = net.params().iter().flat_map(|p| p.data().to_vec()).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }
}

#[test]
fn gradients_vanish_outside_the_activation() {
    let space = SearchSpace::toy();
    let net = Supernet::new(&space, SupernetConfig::new(PatternMode::Fair), 6).unwrap();
    let (x, y) = first_batch(&toy_task(&space, 4, 0.2, 6), 4);
    let params = ArchParams::init(&space);
    let mut r = rng(7);
    for _ in 0..5 {
        let plan = net.activate(&params.sample(&space, &mut r).arch).unwrap();
        let e = net.forward_loss(&plan, &x, &y, true).unwrap();
        let mut bank = net.zero_grads();
        let mut mask = net.empty_mask();
        net.scatter_grads(&mut bank, &plan, &e.grads, 1.0).unwrap();
        net.mark(&mut mask, &plan).unwrap();
        for (g, m) in bank.iter().zip(&mask) {
            assert!(g.data().iter().zip(m).all(|(v, &on)| on || *v == 0.0));
        }
    }
}

#[test]
fn one_step_changes_only_activated_slices() {
    let mut net = trained_toy(PatternMode::Fair, 3);
    let space = net.space().clone();
    let (x, y) = first_batch(&toy_task(&space, 4, 0.2, 8), 4);
    // Momentum from earlier steps must not leak into inactive elements.
    let mut opt = OptimState::for_params(OptimKind::sgd(0.1, 0.9, 1e-3), net.params());
    let params = ArchParams::init(&space);
    let mut r = rng(8);
    for _ in 0..4 {
        let plan = net.activate(&params.sample(&space, &mut r).arch).unwrap();
        let before = net.params().to_vec();
        let e = net.forward_loss(&plan, &x, &y, true).unwrap();
        let mut bank = net.zero_grads();
        let mut mask = net.empty_mask();
        net.scatter_grads(&mut bank, &plan, &e.grads, 1.0).unwrap();
        net.mark(&mut mask, &plan).unwrap();
        net.apply(&mut opt, &bank, &mask).unwrap();
        let mut moved = 0usize;
        for ((old, new), m) in before.iter().zip(net.params()).zip(&mask) {
            for ((a, b), &on) in old.data().iter().zip(new.data()).zip(m) {
                if on {
                    moved += (a != b) as usize;
                } else {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
        assert!(moved > 0);
    }
}

#[test]
fn untrained_loss_is_near_chance() {
    let space = SearchSpace::toy();
    let net = Supernet::new(&space, SupernetConfig::new(PatternMode::Fair), 11).unwrap();
    let (x, y) = first_batch(&toy_task(&space, 16, 0.2, 11), 16);
    let params = ArchParams::init(&space);
    let mut r = rng(12);
    let losses: Vec<f64> = (0..8)
        .map(|_| {
            let plan = net.activate(&params.sample(&space, &mut r).arch).unwrap();
            net.forward_loss(&plan, &x, &y, false).unwrap().loss
        })
        .collect();
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    assert!((mean - 4f64.ln()).abs() <= 0.2, "mean untrained loss {mean}");
}

#[test]
fn distinct_candidates_give_distinct_losses() {
    let net = trained_toy(PatternMode::Fair, 2);
    let space = net.space().clone();
    let (x, y) = first_batch(&toy_task(&space, 8, 0.2, 13), 8);
    let params = ArchParams::init(&space);
    let mut r = rng(14);
    for _ in 0..10 {
        let a = params.sample(&space, &mut r).arch;
        let mut b = params.sample(&space, &mut r).arch;
        while b == a {
            b = params.sample(&space, &mut r).arch;
        }
        let la = net.forward_loss(&net.activate(&a).unwrap(), &x, &y, false).unwrap().loss;
        let lb = net.forward_loss(&net.activate(&b).unwrap(), &x, &y, false).unwrap().loss;
        assert_ne!(la, lb);
    }
}

#[test]
fn fuzzed_candidates_give_finite_logits() {
    let space = SearchSpace::toy();
    let net = Supernet::new(&space, SupernetConfig::new(PatternMode::Fair), 15).unwrap();
    let (x, _) = first_batch(&toy_task(&space, 2, 0.2, 15), 2);
    let params = ArchParams::init(&space);
    let mut r = rng(16);
    for _ in 0..1000 {
        let plan = net.activate(&params.sample(&space, &mut r).arch).unwrap();
        let logits = net.logits(&plan, &x).unwrap();
        assert_eq!(logits.shape(), &[2, space.head.classes]);
        assert!(logits.all_finite());
    }
}

#[test]
fn fair_parts_update_at_three_fifths() {
    let rates = part_update_rates(PatternMode::Fair, 10_000, 21);
    for (r, e) in rates.iter().zip(expected_rates(PatternMode::Fair)) {
        assert!((r - e).abs() <= 0.02, "rates {rates:?}");
    }
}

#[test]
fn naive_parts_update_from_all_to_one_fifth() {
    let rates = part_update_rates(PatternMode::Naive, 10_000, 22);
    for (r, e) in rates.iter().zip(expected_rates(PatternMode::Naive)) {
        assert!((r - e).abs() <= 0.02, "rates {rates:?}");
    }
}

#[test]
fn checkpoint_restores_weights() {
    let net = trained_toy(PatternMode::Naive, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = net.to_checkpoint().save(&dir.path().join("supernet")).unwrap();
    let mut fresh = Supernet::new(net.space(), *net.config(), 99).unwrap();
    fresh.load_weights(&nasforge_core::tensor::Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(fresh.params(), net.params());
}
