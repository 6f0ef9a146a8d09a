mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::*;
use esdi_core::engine::{run_simulation, SimConfig, SimState};
use esdi_core::lp::SolverHandle;
use esdi_core::mred::{
    build_and_check_mred_dc, check_solution, solve_lexicographic, solve_max_total, solve_mred_dc, DeadlineDemand,
};
use esdi_core::protocol::{BufferState, DistributeMode, ExecutionPlan, ProtocolConfig};
use esdi_core::rng::SlotRng;
use esdi_core::scheduler::{rank_sd_pairs, Policy};
use esdi_core::topology::{canonical_pair, Network, NodePair};
use esdi_core::workload::{active_set, Commodity, Status};
use proptest::prelude::*;

fn handle() -> SolverHandle {
    SolverHandle::default()
}

/// (sd index, demand, arrival, deadline offset)
type Spec = (usize, u64, u64, Option<u64>);

fn specs(max: usize) -> impl Strategy<Value = Vec<Spec>> {
    prop::collection::vec((0usize..16, 1u64..30, 1u64..8, prop::option::of(1u64..40)), 1..max)
}

fn build_workload(net: &Network, specs: &[Spec]) -> Vec<Commodity> {
    let sd: Vec<NodePair> = net.sd_pairs().iter().copied().collect();
    specs
        .iter()
        .enumerate()
        .map(|(i, &(k, demand, arrival, dl))| {
            Commodity::new(i as u64, sd[k % sd.len()], demand, arrival, dl.map(|d| arrival + d)).unwrap()
        })
        .collect()
}

fn policy() -> impl Strategy<Value = Policy> {
    prop_oneof![Just(Policy::EsdiB), Just(Policy::EsdiO), Just(Policy::EsdiE)]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn canonical_pair_is_order_free(a in 0u32..1000, b in 0u32..1000) {
        if a == b {
            prop_assert!(canonical_pair(a, b).is_err());
        } else {
            let p = canonical_pair(a, b).unwrap();
            prop_assert_eq!(p, canonical_pair(b, a).unwrap());
            prop_assert!(p.lo() < p.hi());
            prop_assert_eq!(p.lo(), a.min(b));
        }
    }

    #[test]
    fn rank_is_scale_invariant(
        demands in prop::collection::vec((0usize..4, 1u64..100), 1..8),
        edr in prop::collection::vec(0.0f64..5.0, 4),
        scale in 0.01f64..100.0,
    ) {
        let pairs = [pair(0, 1), pair(0, 2), pair(1, 2), pair(2, 3)];
        let cs: Vec<Commodity> = demands
            .iter()
            .enumerate()
            .map(|(i, &(k, d))| Commodity::new(i as u64, pairs[k], d, 1, None).unwrap())
            .collect();
        let refs: Vec<&Commodity> = cs.iter().collect();
        let base: BTreeMap<NodePair, f64> = pairs.iter().copied().zip(edr.iter().copied()).collect();
        let scaled: BTreeMap<NodePair, f64> = base.iter().map(|(&p, &v)| (p, v * scale)).collect();
        prop_assert_eq!(rank_sd_pairs(&refs, &base), rank_sd_pairs(&refs, &scaled));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn solver_outputs_are_valid(seed in 0u64..10_000, nodes in 4usize..8, sd in 1usize..5) {
        let net = random_net(nodes, sd, seed);
        let pairs: Vec<NodePair> = net.sd_pairs().iter().copied().collect();
        let total = solve_max_total(&net, &handle()).unwrap();
        prop_assert!(max_residual(&net, &total) < 1e-6);
        prop_assert!(check_solution(&net, &total).passes(1e-6));
        let lex = solve_lexicographic(&net, &pairs[..pairs.len().min(2)], true, &handle()).unwrap();
        prop_assert!(max_residual(&net, &lex) < 1e-6);
        // priorities never raise the total
        prop_assert!(lex.total_eta() <= total.total_eta() + 1e-6 * total.total_eta().max(1.0));
    }

    #[test]
    fn switching_probabilities_sum_to_one(seed in 0u64..10_000, nodes in 4usize..8, sd in 1usize..5) {
        let net = random_net(nodes, sd, seed);
        let sol = Arc::new(solve_max_total(&net, &handle()).unwrap());
        let buffers = BufferState::new(&net, ProtocolConfig::default());
        let plan = ExecutionPlan::compile(buffers.layout(), sol);
        for i in 0..buffers.layout().pairs().len() {
            let probs = plan.switch_probabilities(i);
            let sum: f64 = probs.iter().map(|p| p.1).sum();
            prop_assert!((sum - 1.0).abs() < 1e-9, "pair {} sums to {}", i, sum);
            prop_assert!(probs.iter().all(|p| p.1 >= 0.0));
        }
    }

    #[test]
    fn mred_dc_feasibility_is_subset_closed(
        seed in 0u64..10_000,
        raw in prop::collection::vec((0usize..3, 1u64..20, 1u64..10), 1..5),
    ) {
        let net = random_net(6, 3, seed);
        let sd: Vec<NodePair> = net.sd_pairs().iter().copied().collect();
        let set: Vec<DeadlineDemand> = raw
            .iter()
            .map(|&(k, remaining, slots_left)| DeadlineDemand { sd: sd[k % sd.len()], remaining, slots_left })
            .collect();
        if build_and_check_mred_dc(&net, &set, &handle()).unwrap().is_feasible() {
            prop_assert!(solve_mred_dc(&net, &set, &handle()).unwrap().is_feasible());
            for skip in 0..set.len() {
                let mut subset = set.clone();
                subset.remove(skip);
                prop_assert!(build_and_check_mred_dc(&net, &subset, &handle()).unwrap().is_feasible());
            }
        }
    }

    #[test]
    fn runs_conserve_ebits_and_replay(
        seed in 0u64..10_000,
        specs in specs(7),
        policy in policy(),
        kappa in 1usize..3,
    ) {
        let net = random_net(5, 3, seed);
        let workload = build_workload(&net, &specs);
        let cfg = SimConfig { policy, kappa, seed, horizon: Some(400), ..SimConfig::default() };
        let a = run_simulation(&net, workload.clone(), &cfg).unwrap();
        let b = run_simulation(&net, workload.clone(), &cfg).unwrap();
        prop_assert_eq!(a.metrics.conservation_violations, 0);
        prop_assert_eq!(a.metrics.replay_json(), b.metrics.replay_json());
        prop_assert_eq!(&a.records, &b.records);
        // every distributed ebit went to some commodity's demand
        let served: u64 = a.records.iter().map(|r| r.demand - r.remaining).sum();
        prop_assert_eq!(served, a.metrics.total_distributed);
        // each commodity enters and leaves the active set once
        prop_assert!(a.metrics.resolves <= 2 * workload.len() as u64 + 1);
    }

    #[test]
    fn terminal_status_is_final(seed in 0u64..10_000, specs in specs(6), policy in policy()) {
        let net = random_net(5, 2, seed);
        let cfg = SimConfig { policy, seed, ..SimConfig::default() };
        let mut state = SimState::new(&net, build_workload(&net, &specs), &cfg).unwrap();
        let mut done: BTreeMap<u64, Status> = BTreeMap::new();
        while !state.is_drained() && state.slot() <= 400 {
            state.run_slot().unwrap();
            for c in state.commodities() {
                if let Some(s) = done.get(&c.id) {
                    prop_assert_eq!(*s, c.status());
                } else if c.is_terminal() {
                    done.insert(c.id, c.status());
                }
            }
        }
    }

    #[test]
    fn distribution_never_exceeds_receive_buffer(seed in 0u64..10_000, specs in specs(6)) {
        let net = random_net(5, 3, seed);
        let mut commodities = build_workload(&net, &specs);
        let sol = Arc::new(solve_max_total(&net, &handle()).unwrap());
        let mut buffers = BufferState::new(&net, ProtocolConfig::default());
        buffers.apply_new_solution(sol);
        let rng = SlotRng::new(seed);
        for t in 1..60 {
            let active = active_set(&mut commodities, t);
            buffers.run_phases(t, &rng);
            let before: BTreeMap<u64, u64> = commodities.iter().map(|c| (c.id, c.remaining())).collect();
            let mut available: BTreeMap<NodePair, u64> =
                net.sd_pairs().iter().map(|&p| (p, buffers.receive_count(p) as u64)).collect();
            let grants = buffers.phase_distribute(&mut commodities, &active, DistributeMode::Sjf, t);
            for (id, n) in grants {
                let c = &commodities[id as usize];
                prop_assert!(n <= before[&id]);
                let left = available.get_mut(&c.sd).unwrap();
                prop_assert!(n <= *left);
                *left -= n;
            }
            for (&p, &left) in &available {
                prop_assert_eq!(buffers.receive_count(p) as u64, left);
            }
        }
    }
}
