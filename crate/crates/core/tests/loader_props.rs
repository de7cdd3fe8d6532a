use call_core::index::ClusterId;
use call_core::loader::{baseline_round_robin, plan_load, simulate_static, CostModel};
use proptest::prelude::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const UNIT: CostModel = CostModel {
    throughput: 1.0,
    per_file_overhead: 0.0,
};

/// Makespan by direct simulation: worker `w` runs items `w, w + t, ...` of
/// `order` back to back.
fn makespan(order: &[u64], t: usize) -> u64 {
    (0..t)
        .map(|w| order.iter().skip(w).step_by(t).sum::<u64>())
        .max()
        .unwrap_or(0)
}

fn pareto(rng: &mut ChaCha8Rng, alpha: f64, min: f64) -> u64 {
    let u: f64 = rng.random_range(f64::EPSILON..1.0);
    (min / u.powf(1.0 / alpha)).round() as u64
}

proptest! {
    #[test]
    fn plan_is_sorted_permutation(sizes in prop::collection::vec(0u64..1000, 0..120), t in 1usize..10) {
        let missing: Vec<(ClusterId, u64)> = sizes.iter().enumerate().map(|(i, s)| (i as ClusterId, *s)).collect();
        let plan = plan_load(&missing, t).unwrap();
        let mut ids = plan.order.clone();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..sizes.len() as ClusterId).collect::<Vec<_>>());
        prop_assert_eq!(plan.thread_groups.concat(), plan.order.clone());
        prop_assert!(plan.thread_groups.iter().all(|g| g.len() <= t && !g.is_empty()));
        for w in plan.order.windows(2) {
            let (a, b) = (sizes[w[0] as usize], sizes[w[1] as usize]);
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
        prop_assert_eq!(plan_load(&missing, t).unwrap(), plan);
    }

    #[test]
    fn round_robin_keeps_input_order(ids in prop::collection::vec(0u32..500, 0..50), t in 1usize..8) {
        let missing: Vec<(ClusterId, u64)> = ids.iter().map(|i| (*i, 1)).collect();
        prop_assert_eq!(baseline_round_robin(&missing, t).unwrap().order, ids);
    }

    #[test]
    fn simulator_agrees_with_direct_makespan(sizes in prop::collection::vec(0u64..500, 1..60), t in 1usize..9) {
        let missing: Vec<(ClusterId, u64)> = sizes.iter().enumerate().map(|(i, s)| (i as ClusterId, *s)).collect();
        let plan = plan_load(&missing, t).unwrap();
        let ordered: Vec<u64> = plan.order.iter().map(|id| sizes[*id as usize]).collect();
        let sim = simulate_static(&plan, |id| sizes[id as usize], &UNIT);
        prop_assert_eq!(sim.makespan, makespan(&ordered, t) as f64);
    }
}

#[test]
fn worked_example_makespans() {
    assert_eq!(makespan(&[10, 9, 8, 7, 6, 5, 4, 3], 2), 28);
    assert_eq!(makespan(&[3, 10, 4, 9, 5, 8, 6, 7], 2), 34);
}

#[test]
fn equal_sizes_balance_perfectly() {
    let missing: Vec<(ClusterId, u64)> = (0..12).map(|i| (i, 5)).collect();
    let plan = plan_load(&missing, 4).unwrap();
    assert_eq!(simulate_static(&plan, |_| 5, &UNIT).makespan, 15.0);
}

#[test]
fn greedy_bound_and_dominance_on_pareto_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut greedy_sum, mut rr_sum) = (0.0, 0.0);
    for _ in 0..1000 {
        let n = rng.random_range(1..=200);
        let t = *[2usize, 4, 8].choose(&mut rng).unwrap();
        let sizes: Vec<u64> = (0..n).map(|_| pareto(&mut rng, 1.2, 1000.0)).collect();
        let missing: Vec<(ClusterId, u64)> = sizes.iter().enumerate().map(|(i, s)| (i as ClusterId, *s)).collect();
        let total: u64 = sizes.iter().sum();
        let max = *sizes.iter().max().unwrap();

        let plan = plan_load(&missing, t).unwrap();
        let greedy = simulate_static(&plan, |id| sizes[id as usize], &UNIT).makespan;
        assert!(greedy <= total as f64 / t as f64 + max as f64, "n={n} t={t}");

        let mut shuffled = missing.clone();
        shuffled.shuffle(&mut rng);
        let rr = baseline_round_robin(&shuffled, t).unwrap();
        greedy_sum += greedy;
        rr_sum += simulate_static(&rr, |id| sizes[id as usize], &UNIT).makespan;
    }
    assert!(greedy_sum <= rr_sum, "greedy {greedy_sum} vs round robin {rr_sum}");
}
