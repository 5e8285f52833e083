use std::collections::BTreeMap;

use nrule_core::dynamics::{step, IntegratorConfig, WaveState};
use nrule_core::ensemble::{check_invariants, run_ensemble, run_records, EnsembleConfig};
use nrule_core::hilbert::{classify, validate, GraphBuilder, Status, Violation};
use nrule_core::oracle::{
    outcome_distribution, race_refined, unitary_evolve, RaceConfig, Stage, TreeConfig,
};
use nrule_core::reduction::{
    collapse, relaunch, run_trajectory, trial_rng, CollapsePolicy, TrajectoryConfig, NO_EVENTS,
};
use nrule_core::scenarios::{self, Packet, SequenceCouplings};
use num_complex::Complex64;

fn c(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

#[test]
fn ready_without_realized_source_is_a_violation() {
    let mut b = GraphBuilder::new();
    let a = b.state("a", &[]);
    let x = b.state("x", &[]);
    let y = b.state("y", &[]);
    b.component("a", &[a], Status::Realized);
    b.component("x", &[x], Status::Dormant);
    let bad = b.component("y", &[y], Status::Ready);
    b.gap(a, x, c(1.0)).gap(x, y, c(1.0)).amplitude(a, c(1.0));
    let g = b.build().unwrap();
    let report = validate(&g);
    assert!(report
        .violations
        .contains(&Violation::ReadyNotAdjacentToRealized { component: bad }));
    assert!(report
        .to_string()
        .contains("ready not adjacent to realized"));
}

#[test]
fn counter_and_diamond_classification() {
    let counter = scenarios::series_counter(&[1.0, 1.0, 1.0]).unwrap();
    let st = classify(&counter.graph, &counter.graph.initial_statuses()).unwrap();
    assert_eq!(
        st.as_slice(),
        &[
            Status::Realized,
            Status::Ready,
            Status::Dormant,
            Status::Dormant
        ]
    );

    let d = scenarios::parallel_branch(1.0, 2.0, 1.0).unwrap();
    let st = classify(&d.graph, &d.graph.initial_statuses()).unwrap();
    let r = d.component("A_r").unwrap();
    let l = d.component("A_l").unwrap();
    let f = d.component("A_f").unwrap();
    assert_eq!(st.get(r), Status::Ready);
    assert_eq!(st.get(l), Status::Ready);
    assert_eq!(st.get(f), Status::Dormant);
}

#[test]
fn relaunch_after_first_branch_of_multi_sequence() {
    let spec = scenarios::multi_sequence(SequenceCouplings::default()).unwrap();
    let g = &spec.graph;
    let (st, gen) = relaunch(g, &WaveState::initial(g).unwrap()).unwrap();
    let state = WaveState::new(g, 0.0, g.initial_amplitudes().to_vec(), st);
    let state = step(&state, &gen, 0.3, &IntegratorConfig::default()).unwrap();
    let ab1 = spec.component("AB1").unwrap();
    let mut state = collapse(&state, g, ab1, CollapsePolicy::ZeroNonChosen).unwrap();
    let (st, _) = relaunch(g, &state).unwrap();
    state.statuses = st;
    let ready: Vec<&str> = state
        .statuses
        .with_status(Status::Ready)
        .map(|k| spec.label(k))
        .collect();
    assert_eq!(ready, ["AB1a", "AB1b"]);
    assert_eq!(state.statuses.get(ab1), Status::Realized);
    assert_eq!(
        state.statuses.get(spec.component("AB0").unwrap()),
        Status::Phantom
    );
    for other in ["AB2", "AB3"] {
        assert_eq!(
            state.statuses.get(spec.component(other).unwrap()),
            Status::Phantom
        );
    }
    for dormant in ["AB2a", "AB2b", "AB3a", "AB3b"] {
        assert_eq!(
            state.statuses.get(spec.component(dormant).unwrap()),
            Status::Dormant
        );
    }
}

#[test]
fn counter_with_blocked_second_gap_stops_after_one_hit() {
    let spec = scenarios::series_counter(&[1.0, 0.0]).unwrap();
    let cfg = TrajectoryConfig::new(50.0);
    for trial in 0..200 {
        let rec = run_trajectory(&spec.graph, &spec.id, &mut trial_rng(5, trial), &cfg).unwrap();
        assert_eq!(rec.events.len(), 1, "trial {trial}");
        assert_eq!(spec.label(rec.events[0].chosen), "A1");
    }
}

#[test]
fn single_gap_hit_fraction_at_finite_horizon() {
    // survival 1 / (1 + g^2 T^2); g = 1, T = 3 gives 0.9 hit
    let spec = scenarios::detector_capture(1.0).unwrap();
    let mut cfg = EnsembleConfig::new(&spec, 20_000, 77);
    cfg.trajectory.t_max = 3.0;
    let stats = run_ensemble(&spec, &cfg).unwrap();
    let hit = stats.outcome_counts.get("d1").copied().unwrap_or(0) as f64 / 20_000.0;
    let sd = (0.9f64 * 0.1 / 20_000.0).sqrt();
    assert!((hit - 0.9).abs() < 4.0 * sd, "hit fraction {hit}");
    assert_eq!(
        stats.outcome_counts.get(NO_EVENTS).copied().unwrap_or(0) as f64,
        20_000.0 - hit * 20_000.0
    );
}

#[test]
fn unitary_counter_populates_the_chain_simultaneously() {
    let spec = scenarios::series_counter(&[1.0, 1.0]).unwrap();
    let a = unitary_evolve(&spec.graph, 1.0).unwrap();
    assert!(a[1].norm_sqr() > 0.1 && a[2].norm_sqr() > 0.05);

    let mut cfg = spec.trajectory_config();
    cfg.sample_every = Some(0.05);
    for trial in 0..50 {
        let rec = run_trajectory(&spec.graph, &spec.id, &mut trial_rng(3, trial), &cfg).unwrap();
        let first = rec.events[0].t_sc;
        for s in rec.samples.iter().filter(|s| s.t < first) {
            let m = s.component_moduli(&spec.graph);
            assert_eq!(
                m[2], 0.0,
                "A2 populated at t = {} before the first hit",
                s.t
            );
        }
    }
}

#[test]
fn neutron_launch_keeps_the_packet_profile() {
    let spec = scenarios::neutron_decay(16, 1.0, 0.2, Packet::default_for(16)).unwrap();
    let cfg = spec.trajectory_config();
    for trial in 0..20 {
        let rec = run_trajectory(&spec.graph, &spec.id, &mut trial_rng(1, trial), &cfg).unwrap();
        assert_eq!(rec.events.len(), 1);
        let ev = &rec.events[0];
        // the decayed state carries what flowed into it, not a fresh unit amplitude
        assert!(ev.s_after > 0.0 && ev.s_after < ev.s_before);
        assert_eq!(rec.terminal_support.len(), 1);
    }
}

#[test]
fn frozen_delta_packet_decays_where_it_sits() {
    let packet = Packet {
        width: 0.0,
        center: 5.0,
        momentum: 0.0,
    };
    let spec = scenarios::neutron_decay(12, 0.0, 0.5, packet).unwrap();
    let cfg = spec.trajectory_config();
    for trial in 0..200 {
        let rec = run_trajectory(&spec.graph, &spec.id, &mut trial_rng(9, trial), &cfg).unwrap();
        assert_eq!(rec.events.len(), 1);
        assert_eq!(spec.label(rec.events[0].chosen), "epν̄@5");
    }
}

#[test]
fn race_quadrature_self_converges() {
    let spec = scenarios::parallel_branch(1.0, 2.0, 1.0).unwrap();
    let g = &spec.graph;
    let st = classify(g, &g.initial_statuses()).unwrap();
    let stage = Stage::new(g, &st, g.initial_amplitudes()).unwrap();
    let mut cfg = RaceConfig::new(spec.meta.t_max);
    cfg.n_steps = 1 << 10;
    let coarse = race_refined(&stage, &cfg, 1e-6, 1 << 14).unwrap();
    cfg.n_steps = 1 << 14;
    let fine = race_refined(&stage, &cfg, 1e-10, 1 << 20).unwrap();
    for (k, p) in &fine.probabilities {
        assert!((p - coarse.probabilities[k]).abs() < 1e-5);
    }
    let r = spec.component("A_r").unwrap();
    let hit = 1.0 - fine.no_hit;
    assert!((fine.probabilities[&r] / hit - 0.2).abs() < 1e-6);

    let tree = outcome_distribution(&spec, &TreeConfig::new(spec.meta.t_max)).unwrap();
    let total: f64 = tree.values.values().sum();
    assert!((total - 1.0).abs() < 1e-6);
}

#[test]
fn unitary_norm_is_conserved() {
    let spec = scenarios::observer_chain(1.0, 1.0, 4).unwrap();
    let a0: f64 = spec
        .graph
        .initial_amplitudes()
        .iter()
        .map(|a| a.norm_sqr())
        .sum();
    for t in [0.5, 3.0, 40.0, 900.0] {
        let a = unitary_evolve(&spec.graph, t).unwrap();
        let n: f64 = a.iter().map(|a| a.norm_sqr()).sum();
        assert!((n - a0).abs() < 1e-10, "t = {t}: {n}");
    }
}

#[test]
fn one_trial_ensemble_and_determinism() {
    let spec = scenarios::build("laser-cycle", &BTreeMap::new()).unwrap();
    let cfg = EnsembleConfig::new(&spec, 1, 123);
    let a = run_records(&spec, &cfg).unwrap();
    let b = run_records(&spec, &cfg).unwrap();
    assert_eq!(a.len(), 1);
    assert_eq!(a, b);
    assert!(check_invariants(&a, &spec).is_empty());
    let stats = run_ensemble(&spec, &cfg).unwrap();
    assert_eq!(stats.outcome_counts.values().sum::<u64>(), 1);
}
