use std::sync::Arc;

use pdsim_core::dvfs::{
    apply_safety_overrides, brute_force_freq_select, greedy_freq_select, meets_slo,
    project_batches, select_decode_freq, time_weighted_power, write_control_log_csv,
    DecodeController, DecodePolicyConfig, FrequencyAssignment, MpcConfig, MpcController,
    SafetyAction,
};
use pdsim_core::placement::SLOSpec;
use pdsim_core::simulator::{
    simulate_instance, FrequencyController, KVCacheState, PendingRequest, QueueSnapshot, Trigger,
};
use pdsim_core::workload::{gen_gamma_trace, LengthDistribution};
use pdsim_core::{
    BatchFeatures, FrequencyLadder, InstanceConfig, ModelSet, Phase, SchedulerPolicy, SimOptions,
};
use proptest::prelude::*;

fn models() -> ModelSet {
    ModelSet::synthetic(
        "compute-bound",
        "memory-bound",
        &FrequencyLadder::default_h100(),
        &[1],
    )
    .unwrap()
}

fn mpc(ttft: f64, k: usize, n: usize) -> MpcConfig {
    MpcConfig {
        horizon_k: k,
        ladder_n: n,
        slo: SLOSpec {
            ttft_ms: ttft,
            ..SLOSpec::default()
        },
        switch_latency_ms: 30.0,
        margin: 0.05,
    }
}

fn queue(lens: &[u32], now: f64) -> QueueSnapshot {
    QueueSnapshot {
        now_ms: now,
        waiting: lens
            .iter()
            .enumerate()
            .map(|(i, &l)| PendingRequest {
                id: i as u64,
                arrival_ms: now,
                input_len: l,
                remaining_tokens: l,
            })
            .collect(),
        running: None,
        current_freq_mhz: 1980.0,
    }
}

#[test]
fn defaults_match_the_controller_design() {
    let c = MpcConfig { ..mpc(600.0, 8, 7) };
    assert_eq!((c.horizon_k, c.ladder_n), (8, 7));
    assert_eq!(c.candidates(&FrequencyLadder::default_h100()).len(), 7);
    assert_eq!(SLOSpec::default().ttft_ms, 600.0);
    assert_eq!(SLOSpec::default().tpot_ms, 100.0);
    assert_eq!(SimOptions::default().safety_margin, 0.05);
}

#[test]
fn loose_bound_drops_frequency() {
    let m = models();
    let q = queue(&[800, 800, 800], 0.0);
    let cands = FrequencyLadder::default_h100().select(7);
    let out = greedy_freq_select(
        &q,
        &mpc(5000.0, 8, 7),
        &m.prefill,
        1,
        &SchedulerPolicy::default(),
        &cands,
    );
    assert!(out.feasible);
    assert!(out.assignment.freqs.iter().all(|&f| f < 1980.0));
}

#[test]
fn impossible_bound_keeps_max() {
    let m = models();
    let q = queue(&[4000, 4000, 4000, 4000], 0.0);
    let cands = FrequencyLadder::default_h100().select(7);
    let out = greedy_freq_select(
        &q,
        &mpc(20.0, 8, 7),
        &m.prefill,
        1,
        &SchedulerPolicy::default(),
        &cands,
    );
    assert!(!out.feasible);
    assert!(out.assignment.freqs.iter().all(|&f| f == 1980.0));
}

#[test]
fn projection_respects_horizon_and_budget() {
    let q = queue(&[3000, 3000, 3000, 3000], 0.0);
    let policy = SchedulerPolicy {
        max_batch_tokens: 4096,
        ..SchedulerPolicy::default()
    };
    let p = project_batches(&q, &policy, 2);
    assert_eq!(p.len(), 2);
    assert!(p.iter().all(|b| b.features.sum_len <= 4096));
    assert!(p[0].members.iter().any(|m| m.completes));
}

#[test]
fn safety_override_threshold() {
    assert_eq!(
        apply_safety_overrides(104.0, 100.0, 0.05),
        SafetyAction::None
    );
    assert_eq!(
        apply_safety_overrides(105.1, 100.0, 0.05),
        SafetyAction::SwitchToMax
    );
}

#[test]
fn decode_choice_walks_ladder() {
    let m = models();
    let cfg = DecodePolicyConfig {
        tbt_slo_ms: 95.0,
        kv_threshold: 0.9,
        ladder: FrequencyLadder::default_h100(),
    };
    let b = BatchFeatures::from_lengths(vec![600; 32]);
    let kv = KVCacheState {
        capacity_tokens: 100_000,
        used_tokens: 10_000,
        threshold: 0.9,
    };
    let c = select_decode_freq(&b, &kv, &cfg, &m.decode, 1);
    assert!(c.feasible && !c.kv_override);
    assert_eq!(c.freq_mhz, cfg.ladder.min());
    let full = KVCacheState {
        used_tokens: 95_000,
        ..kv
    };
    let c = select_decode_freq(&b, &full, &cfg, &m.decode, 1);
    assert!(c.kv_override && c.freq_mhz == cfg.ladder.max());
}

#[test]
fn controlled_prefill_saves_energy_and_logs_decisions() {
    let m = models();
    let lens = LengthDistribution::LogNormal {
        input_mean: 512.0,
        input_sigma: 0.8,
        output_mean: 8.0,
        output_sigma: 0.5,
        max_input: 4096,
        max_output: 64,
    };
    let t = gen_gamma_trace(4.0, 0.5, 30_000.0, &lens, 4).unwrap();
    let cfg = InstanceConfig::new(Phase::Prefill, 1, 1980.0);
    let opts = SimOptions::default();
    let policy = SchedulerPolicy::default();
    let base = simulate_instance(&t, &cfg, &policy, &m, &opts, None).unwrap();
    let mut ctl =
        MpcController::new(m.prefill.clone(), 1, policy, mpc(600.0, 8, 7), &opts.ladder).unwrap();
    let run = simulate_instance(
        &t,
        &cfg,
        &policy,
        &m,
        &opts,
        Some(&mut ctl as &mut dyn FrequencyController),
    )
    .unwrap();
    assert!(run.total_energy_j() < base.total_energy_j());
    assert!(!run.control_log.is_empty());
    assert!(run
        .control_log
        .iter()
        .any(|e| e.trigger == Trigger::Arrival));
    assert!(ctl.last_assignment().is_some());
    let mut buf = Vec::new();
    write_control_log_csv(&run.control_log, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("time_ms,instance,trigger,chosen_freq"));
    assert_eq!(text.lines().count(), run.control_log.len() + 1);
}

#[test]
fn decode_controller_keeps_gaps_under_bound() {
    let m = models();
    let lens = LengthDistribution::Fixed {
        input_len: 300,
        output_len: 40,
    };
    let t = gen_gamma_trace(6.0, 1.0, 20_000.0, &lens, 5).unwrap();
    let cfg = InstanceConfig::new(Phase::Decode, 1, 1980.0);
    let opts = SimOptions::default();
    let dcfg = DecodePolicyConfig {
        tbt_slo_ms: 95.0,
        kv_threshold: 0.9,
        ladder: opts.ladder.clone(),
    };
    let mut ctl = DecodeController::new(Arc::clone(&m.decode), 1, dcfg).unwrap();
    let run = simulate_instance(
        &t,
        &cfg,
        &SchedulerPolicy::default(),
        &m,
        &opts,
        Some(&mut ctl as &mut dyn FrequencyController),
    )
    .unwrap();
    let base = simulate_instance(&t, &cfg, &SchedulerPolicy::default(), &m, &opts, None).unwrap();
    assert!(run
        .requests
        .iter()
        .all(|r| r.max_tbt_ms().unwrap() <= 100.0 + 30.0));
    assert!(run.total_energy_j() <= base.total_energy_j());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn greedy_never_beats_brute_force(
        lens in proptest::collection::vec(100u32..3000, 1..6),
        ttft in 100.0f64..1500.0,
        k in 1usize..4,
    ) {
        let m = models();
        let q = queue(&lens, 0.0);
        let cands = FrequencyLadder::default_h100().select(4);
        let cfg = mpc(ttft, k, 4);
        let policy = SchedulerPolicy { max_batch_tokens: 2048, ..SchedulerPolicy::default() };
        let g = greedy_freq_select(&q, &cfg, &m.prefill, 1, &policy, &cands);
        let bf = brute_force_freq_select(&q, &cfg, &m.prefill, 1, &policy, &cands);
        prop_assert_eq!(g.feasible, bf.is_some());
        if let Some((best, obj)) = bf {
            prop_assert!(meets_slo(&g.assignment, &g.projection, &q, &m.prefill, 1, &cfg));
            prop_assert!(meets_slo(&best, &g.projection, &q, &m.prefill, 1, &cfg));
            prop_assert!(obj <= g.objective_w + 1e-9);
            let twp = time_weighted_power(&g.assignment, &g.projection, &m.prefill, 1);
            prop_assert!((twp - g.objective_w).abs() <= 1e-9 * twp.abs().max(1.0));
            let allmax = FrequencyAssignment { freqs: vec![1980.0; g.projection.len()] };
            prop_assert!(g.objective_w <= time_weighted_power(&allmax, &g.projection, &m.prefill, 1) + 1e-9);
        }
    }
}
