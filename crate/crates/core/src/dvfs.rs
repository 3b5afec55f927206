//! Per-iteration frequency control.
//!
//! Prefill uses a short-horizon model-predictive search: the waiting queue is
//! replayed through the scheduler to project the next few batches, and a
//! greedy walk down the frequency ladder picks per-batch frequencies that
//! minimise time-weighted power while keeping every projected TTFT inside
//! the bound. Decode picks, per iteration, the lowest frequency whose
//! predicted iteration latency fits the time-between-tokens bound.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::perfmodel::{
    predict_latency, predict_power, BatchFeatures, FrequencyLadder, PhaseModels,
};
use crate::placement::SLOSpec;
use crate::simulator::{
    form_prefill_batch, ControlDecision, ControlInput, ControlLogEntry, FrequencyController,
    KVCacheState, QueueSnapshot, SchedulerPolicy,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizon_k: usize,
    pub ladder_n: usize,
    pub slo: SLOSpec,
    /// Added to the projected timeline whenever consecutive frequencies differ.
    pub switch_latency_ms: f64,
    /// Fractional tightening of the TTFT bound inside the search.
    pub margin: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon_k: 8,
            ladder_n: 7,
            slo: SLOSpec::default(),
            switch_latency_ms: 30.0,
            margin: 0.05,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_k == 0 || self.ladder_n == 0 {
            return Err(param_err("horizon and ladder size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.margin) || self.switch_latency_ms < 0.0 {
            return Err(param_err(
                "margin must be in [0, 1) and switch latency >= 0",
            ));
        }
        self.slo.validate()
    }

    /// The `ladder_n` search candidates drawn from the full ladder.
    pub fn candidates(&self, ladder: &FrequencyLadder) -> FrequencyLadder {
        ladder.select(self.ladder_n)
    }

    fn ttft_bound(&self) -> f64 {
        self.slo.ttft_ms * (1.0 - self.margin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodePolicyConfig {
    pub tbt_slo_ms: f64,
    pub kv_threshold: f64,
    pub ladder: FrequencyLadder,
}

impl DecodePolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tbt_slo_ms > 0.0) {
            return Err(param_err("tbt bound must be > 0"));
        }
        if !(self.kv_threshold > 0.0 && self.kv_threshold < 1.0) {
            return Err(param_err("kv threshold must be in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProjectedMember {
    pub id: u64,
    pub arrival_ms: f64,
    /// The request's prefill finishes with this batch.
    pub completes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectedBatch {
    pub features: BatchFeatures,
    pub members: Vec<ProjectedMember>,
    /// Share of the batch's work still to do (below 1 only for the in-flight
    /// batch).
    pub remaining_fraction: f64,
}

/// One frequency per projected batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyAssignment {
    pub freqs: Vec<f64>,
}

/// Replays the scheduler over the running batch and the waiting queue,
/// assuming no further arrivals, for at most `horizon_k` batches.
pub fn project_batches(
    q: &QueueSnapshot,
    policy: &SchedulerPolicy,
    horizon_k: usize,
) -> Vec<ProjectedBatch> {
    let mut out = Vec::new();
    if let Some(run) = &q.running {
        out.push(ProjectedBatch {
            features: run.features,
            members: run
                .members
                .iter()
                .map(|m| ProjectedMember {
                    id: m.id,
                    arrival_ms: m.arrival_ms,
                    completes: m.completes,
                })
                .collect(),
            remaining_fraction: run.remaining_fraction,
        });
    }
    let mut queue = q.waiting.clone();
    while out.len() < horizon_k && !queue.is_empty() {
        let picks = form_prefill_batch(&queue, policy);
        let mut members = Vec::with_capacity(picks.len());
        let mut lens = Vec::with_capacity(picks.len());
        for &(i, take) in &picks {
            queue[i].remaining_tokens -= take;
            lens.push(take as u64);
            members.push(ProjectedMember {
                id: queue[i].id,
                arrival_ms: queue[i].arrival_ms,
                completes: queue[i].remaining_tokens == 0,
            });
        }
        queue.retain(|p| p.remaining_tokens > 0);
        out.push(ProjectedBatch {
            features: BatchFeatures::from_lengths(lens),
            members,
            remaining_fraction: 1.0,
        });
    }
    out
}

/// Latency and power of every projected batch at every candidate frequency.
struct CostTable {
    lat: Vec<Vec<f64>>,
    pow: Vec<Vec<f64>>,
}

impl CostTable {
    fn new(proj: &[ProjectedBatch], freqs: &[f64], models: &PhaseModels, tp: u32) -> Self {
        let lat = proj
            .iter()
            .map(|b| {
                freqs
                    .iter()
                    .map(|&f| {
                        b.remaining_fraction * predict_latency(&models.latency, &b.features, tp, f)
                    })
                    .collect()
            })
            .collect();
        let pow = proj
            .iter()
            .map(|b| {
                freqs
                    .iter()
                    .map(|&f| predict_power(&models.power, &b.features, tp, f))
                    .collect()
            })
            .collect();
        CostTable { lat, pow }
    }
}

fn feasible_idx(
    idx: &[usize],
    freqs: &[f64],
    proj: &[ProjectedBatch],
    costs: &CostTable,
    now_ms: f64,
    current_freq: f64,
    switch_ms: f64,
    bound: f64,
) -> bool {
    let mut t = now_ms;
    let mut prev = current_freq;
    for (k, &j) in idx.iter().enumerate() {
        if freqs[j] != prev {
            t += switch_ms;
        }
        prev = freqs[j];
        t += costs.lat[k][j];
        for m in &proj[k].members {
            if m.completes && t - m.arrival_ms > bound {
                return false;
            }
        }
    }
    true
}

fn objective_idx(idx: &[usize], costs: &CostTable) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, &j) in idx.iter().enumerate() {
        num += costs.lat[k][j] * costs.pow[k][j];
        den += costs.lat[k][j];
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn freq_index(freqs: &[f64], f: f64) -> usize {
    freqs
        .iter()
        .position(|&x| x == f)
        .expect("assignment frequency must be a candidate")
}

/// True iff every request finishing its prefill inside the projection meets
/// the (margin-tightened) TTFT bound, with switch delays on the timeline.
pub fn meets_slo(
    assignment: &FrequencyAssignment,
    projection: &[ProjectedBatch],
    q: &QueueSnapshot,
    models: &PhaseModels,
    tp: u32,
    cfg: &MpcConfig,
) -> bool {
    assert_eq!(assignment.freqs.len(), projection.len());
    let mut freqs: Vec<f64> = assignment.freqs.clone();
    freqs.sort_by(f64::total_cmp);
    freqs.dedup();
    let costs = CostTable::new(projection, &freqs, models, tp);
    let idx: Vec<usize> = assignment
        .freqs
        .iter()
        .map(|&f| freq_index(&freqs, f))
        .collect();
    feasible_idx(
        &idx,
        &freqs,
        projection,
        &costs,
        q.now_ms,
        q.current_freq_mhz,
        cfg.switch_latency_ms,
        cfg.ttft_bound(),
    )
}

/// Σ latency·power / Σ latency over the projection.
pub fn time_weighted_power(
    assignment: &FrequencyAssignment,
    projection: &[ProjectedBatch],
    models: &PhaseModels,
    tp: u32,
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (b, &f) in projection.iter().zip(&assignment.freqs) {
        let l = b.remaining_fraction * predict_latency(&models.latency, &b.features, tp, f);
        num += l * predict_power(&models.power, &b.features, tp, f);
        den += l;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreedyLevel {
    pub replaced_mhz: f64,
    /// Occurrences of the replaced frequency in the incumbent.
    pub occurrences: usize,
    pub mutations: u64,
    pub feasible_mutations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreedyOutcome {
    pub assignment: FrequencyAssignment,
    pub projection: Vec<ProjectedBatch>,
    /// False when even the all-max assignment misses the bound.
    pub feasible: bool,
    pub objective_w: f64,
    pub evaluations: u64,
    pub levels: Vec<GreedyLevel>,
}

/// Greedy frequency selection over the projected horizon.
///
/// Starting from all-max, each level takes the occurrences of one ladder
/// frequency `d[j]` (descending order) and tries every way of replacing them
/// by `d[j]`, `d[j+1]` or `d[j+2]` — `3^K' − 1` mutations. Among the feasible
/// mutations and the incumbent, the lowest time-weighted power wins (ties go
/// to the lexicographically lowest frequency vector). The walk stops at the
/// first level whose mutations are all infeasible; levels where `d[j]` does
/// not occur are skipped.
pub fn greedy_freq_select(
    q: &QueueSnapshot,
    cfg: &MpcConfig,
    models: &PhaseModels,
    tp: u32,
    policy: &SchedulerPolicy,
    candidates: &FrequencyLadder,
) -> GreedyOutcome {
    let projection = project_batches(q, policy, cfg.horizon_k);
    let asc = candidates.freqs().to_vec();
    let costs = CostTable::new(&projection, &asc, models, tp);
    let n = asc.len();
    let k = projection.len();
    // d[0] is the highest frequency; entries are indices into `asc`
    let d: Vec<usize> = (0..n).rev().collect();
    let bound = cfg.ttft_bound();
    let feasible = |idx: &[usize]| {
        feasible_idx(
            idx,
            &asc,
            &projection,
            &costs,
            q.now_ms,
            q.current_freq_mhz,
            cfg.switch_latency_ms,
            bound,
        )
    };

    let mut cur = vec![d[0]; k];
    let mut evaluations = 1u64;
    let mut levels = Vec::new();
    if !feasible(&cur) {
        return GreedyOutcome {
            assignment: FrequencyAssignment {
                freqs: cur.iter().map(|&j| asc[j]).collect(),
            },
            objective_w: objective_idx(&cur, &costs),
            projection,
            feasible: false,
            evaluations,
            levels,
        };
    }

    let level_specs: Vec<(usize, Vec<usize>)> = match n {
        1 => Vec::new(),
        2 => vec![(d[0], vec![d[0], d[1]])],
        _ => (0..=n - 3)
            .map(|j| (d[j], vec![d[j], d[j + 1], d[j + 2]]))
            .collect(),
    };

    for (replaced, choices) in level_specs {
        let positions: Vec<usize> = (0..k).filter(|&i| cur[i] == replaced).collect();
        let kp = positions.len();
        let base = choices.len() as u64;
        let total = base.pow(kp as u32);
        let mut best = cur.clone();
        let mut best_obj = objective_idx(&cur, &costs);
        let mut mutations = 0u64;
        let mut feasible_count = 0u64;
        let mut cand = cur.clone();
        // code 0 is the all-unchanged assignment, so start at 1
        for code in 1..total {
            let mut c = code;
            for &p in &positions {
                cand[p] = choices[(c % base) as usize];
                c /= base;
            }
            mutations += 1;
            evaluations += 1;
            if !feasible(&cand) {
                continue;
            }
            feasible_count += 1;
            let obj = objective_idx(&cand, &costs);
            if obj < best_obj || (obj == best_obj && lex_lower(&cand, &best, &asc)) {
                best_obj = obj;
                best.clone_from(&cand);
            }
        }
        levels.push(GreedyLevel {
            replaced_mhz: asc[replaced],
            occurrences: kp,
            mutations,
            feasible_mutations: feasible_count,
        });
        // a level with nothing to replace is vacuous rather than a dead end
        if feasible_count == 0 && kp > 0 {
            break;
        }
        cur = best;
    }

    GreedyOutcome {
        assignment: FrequencyAssignment {
            freqs: cur.iter().map(|&j| asc[j]).collect(),
        },
        objective_w: objective_idx(&cur, &costs),
        projection,
        feasible: true,
        evaluations,
        levels,
    }
}

fn lex_lower(a: &[usize], b: &[usize], freqs: &[f64]) -> bool {
    for (&x, &y) in a.iter().zip(b) {
        if freqs[x] != freqs[y] {
            return freqs[x] < freqs[y];
        }
    }
    false
}

/// Exhaustive search over all `N^K` assignments; returns the feasible
/// assignment with the lowest time-weighted power, if any.
pub fn brute_force_freq_select(
    q: &QueueSnapshot,
    cfg: &MpcConfig,
    models: &PhaseModels,
    tp: u32,
    policy: &SchedulerPolicy,
    candidates: &FrequencyLadder,
) -> Option<(FrequencyAssignment, f64)> {
    let projection = project_batches(q, policy, cfg.horizon_k);
    let asc = candidates.freqs();
    let costs = CostTable::new(&projection, asc, models, tp);
    let n = asc.len() as u64;
    let k = projection.len();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut idx = vec![0usize; k];
    for code in 0..n.pow(k as u32) {
        let mut c = code;
        for slot in idx.iter_mut() {
            *slot = (c % n) as usize;
            c /= n;
        }
        if !feasible_idx(
            &idx,
            asc,
            &projection,
            &costs,
            q.now_ms,
            q.current_freq_mhz,
            cfg.switch_latency_ms,
            cfg.ttft_bound(),
        ) {
            continue;
        }
        let obj = objective_idx(&idx, &costs);
        if best.as_ref().is_none_or(|(_, b)| obj < *b) {
            best = Some((idx.clone(), obj));
        }
    }
    best.map(|(idx, obj)| {
        (
            FrequencyAssignment {
                freqs: idx.iter().map(|&j| asc[j]).collect(),
            },
            obj,
        )
    })
}

/// Mid-batch re-plan after arrivals; same contract as
/// [`greedy_freq_select`]. The in-flight batch's remaining latency is its
/// remaining work fraction times the full latency at each candidate.
pub fn on_arrival_trigger(
    q: &QueueSnapshot,
    cfg: &MpcConfig,
    models: &PhaseModels,
    tp: u32,
    policy: &SchedulerPolicy,
    candidates: &FrequencyLadder,
) -> GreedyOutcome {
    greedy_freq_select(q, cfg, models, tp, policy, candidates)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecodeChoice {
    pub freq_mhz: f64,
    pub feasible: bool,
    pub kv_override: bool,
    pub evaluations: u64,
}

/// Lowest ladder frequency whose predicted iteration latency fits the bound;
/// max frequency when the KV cache is above threshold or nothing fits.
pub fn select_decode_freq(
    batch: &BatchFeatures,
    kv: &KVCacheState,
    cfg: &DecodePolicyConfig,
    models: &PhaseModels,
    tp: u32,
) -> DecodeChoice {
    let max = cfg.ladder.max();
    if kv.utilization() > cfg.kv_threshold {
        return DecodeChoice {
            freq_mhz: max,
            feasible: true,
            kv_override: true,
            evaluations: 0,
        };
    }
    let mut evaluations = 0;
    for &f in cfg.ladder.freqs() {
        evaluations += 1;
        if predict_latency(&models.latency, batch, tp, f) <= cfg.tbt_slo_ms {
            return DecodeChoice {
                freq_mhz: f,
                feasible: true,
                kv_override: false,
                evaluations,
            };
        }
    }
    DecodeChoice {
        freq_mhz: max,
        feasible: false,
        kv_override: false,
        evaluations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SafetyAction {
    None,
    SwitchToMax,
}

/// Reverts to max frequency once a batch has run longer than predicted by
/// more than `margin`.
pub fn apply_safety_overrides(observed_ms: f64, predicted_ms: f64, margin: f64) -> SafetyAction {
    if observed_ms > predicted_ms * (1.0 + margin) {
        SafetyAction::SwitchToMax
    } else {
        SafetyAction::None
    }
}

/// Prefill controller: greedy search on every boundary and arrival.
pub struct MpcController {
    models: Arc<PhaseModels>,
    tp: u32,
    policy: SchedulerPolicy,
    cfg: MpcConfig,
    candidates: FrequencyLadder,
    last: Option<FrequencyAssignment>,
}

impl MpcController {
    pub fn new(
        models: Arc<PhaseModels>,
        tp: u32,
        policy: SchedulerPolicy,
        cfg: MpcConfig,
        ladder: &FrequencyLadder,
    ) -> Result<Self> {
        cfg.validate()?;
        let candidates = cfg.candidates(ladder);
        Ok(MpcController {
            models,
            tp,
            policy,
            cfg,
            candidates,
            last: None,
        })
    }

    pub fn last_assignment(&self) -> Option<&FrequencyAssignment> {
        self.last.as_ref()
    }
}

impl FrequencyController for MpcController {
    fn decide(&mut self, input: ControlInput<'_>) -> ControlDecision {
        let ControlInput::Prefill { snapshot, .. } = input else {
            let ControlInput::Decode {
                current_freq_mhz, ..
            } = input
            else {
                unreachable!()
            };
            return ControlDecision {
                freq_mhz: current_freq_mhz,
                predicted_remaining_ms: None,
                feasible: true,
                eval_count: 0,
            };
        };
        let out = greedy_freq_select(
            snapshot,
            &self.cfg,
            &self.models,
            self.tp,
            &self.policy,
            &self.candidates,
        );
        let Some((&f, first)) = out.assignment.freqs.first().zip(out.projection.first()) else {
            return ControlDecision {
                freq_mhz: snapshot.current_freq_mhz,
                predicted_remaining_ms: None,
                feasible: true,
                eval_count: out.evaluations,
            };
        };
        let pred = first.remaining_fraction
            * predict_latency(&self.models.latency, &first.features, self.tp, f);
        self.last = Some(out.assignment);
        ControlDecision {
            freq_mhz: f,
            predicted_remaining_ms: Some(pred),
            feasible: out.feasible,
            eval_count: out.evaluations,
        }
    }
}

/// Decode controller: per-iteration minimum feasible frequency.
pub struct DecodeController {
    models: Arc<PhaseModels>,
    tp: u32,
    cfg: DecodePolicyConfig,
}

impl DecodeController {
    pub fn new(models: Arc<PhaseModels>, tp: u32, cfg: DecodePolicyConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(DecodeController { models, tp, cfg })
    }
}

impl FrequencyController for DecodeController {
    fn decide(&mut self, input: ControlInput<'_>) -> ControlDecision {
        let ControlInput::Decode { batch, kv, .. } = input else {
            let ControlInput::Prefill { snapshot, .. } = input else {
                unreachable!()
            };
            return ControlDecision {
                freq_mhz: snapshot.current_freq_mhz,
                predicted_remaining_ms: None,
                feasible: true,
                eval_count: 0,
            };
        };
        let c = select_decode_freq(batch, kv, &self.cfg, &self.models, self.tp);
        ControlDecision {
            freq_mhz: c.freq_mhz,
            predicted_remaining_ms: Some(predict_latency(
                &self.models.latency,
                batch,
                self.tp,
                c.freq_mhz,
            )),
            feasible: c.feasible,
            eval_count: c.evaluations,
        }
    }
}

/// Writes `time_ms,instance,trigger,chosen_freq,feasible,eval_count` rows.
pub fn write_control_log_csv<W: Write>(log: &[ControlLogEntry], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "time_ms",
        "instance",
        "trigger",
        "chosen_freq",
        "feasible",
        "eval_count",
    ])?;
    for e in log {
        out.write_record([
            e.time_ms.to_string(),
            e.instance.to_string(),
            e.trigger.as_str().to_string(),
            e.chosen_freq_mhz.to_string(),
            e.feasible.to_string(),
            e.eval_count.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perfmodel::{synth_model, Phase, SynthFamily};
    use crate::simulator::PendingRequest;

    fn ladder3() -> FrequencyLadder {
        FrequencyLadder::new(vec![990.0, 1485.0, 1980.0]).unwrap()
    }

    fn prefill_models(ladder: &FrequencyLadder) -> PhaseModels {
        let fam = SynthFamily::from_name("compute-bound", Phase::Prefill).unwrap();
        synth_model(&fam, Phase::Prefill, ladder, &[1]).unwrap()
    }

    fn pending(id: u64, at: f64, len: u32) -> PendingRequest {
        PendingRequest {
            id,
            arrival_ms: at,
            input_len: len,
            remaining_tokens: len,
        }
    }

    fn snapshot(waiting: Vec<PendingRequest>, now: f64) -> QueueSnapshot {
        QueueSnapshot {
            now_ms: now,
            waiting,
            running: None,
            current_freq_mhz: 1980.0,
        }
    }

    fn cfg(ttft: f64) -> MpcConfig {
        MpcConfig {
            horizon_k: 4,
            ladder_n: 3,
            slo: SLOSpec {
                ttft_ms: ttft,
                ..SLOSpec::default()
            },
            switch_latency_ms: 0.0,
            margin: 0.0,
        }
    }

    #[test]
    fn projection_fcfs() {
        let policy = SchedulerPolicy {
            max_batch_tokens: 100,
            max_batch_requests: 64,
            chunking: true,
        };
        assert!(project_batches(&snapshot(vec![], 0.0), &policy, 8).is_empty());
        let q = snapshot((0..3).map(|i| pending(i, 0.0, 50)).collect(), 0.0);
        let p = project_batches(&q, &policy, 8);
        assert_eq!(p.len(), 2);
        assert_eq!((p[0].features.n_requests, p[0].features.sum_len), (2, 100));
        assert_eq!((p[1].features.n_requests, p[1].features.sum_len), (1, 50));
    }

    #[test]
    fn infinite_bound_always_feasible_and_single_freq_ladder() {
        let l = ladder3();
        let m = prefill_models(&l);
        let q = snapshot((0..6).map(|i| pending(i, 0.0, 3000)).collect(), 0.0);
        let policy = SchedulerPolicy::default();
        let out = greedy_freq_select(&q, &cfg(f64::INFINITY), &m, 1, &policy, &l);
        assert!(out.feasible);
        assert!(out.assignment.freqs.iter().all(|&f| f == 990.0));
        let one = FrequencyLadder::new(vec![1485.0]).unwrap();
        let out = greedy_freq_select(&q, &cfg(f64::INFINITY), &m, 1, &policy, &one);
        assert!(out.assignment.freqs.iter().all(|&f| f == 1485.0));
    }

    #[test]
    fn two_level_ladder_picks_low_when_feasible() {
        let l = FrequencyLadder::new(vec![990.0, 1980.0]).unwrap();
        let m = prefill_models(&l);
        let q = snapshot(vec![pending(0, 0.0, 100)], 0.0);
        let out = greedy_freq_select(&q, &cfg(1e6), &m, 1, &SchedulerPolicy::default(), &l);
        assert_eq!(out.assignment.freqs, vec![990.0]);
    }

    #[test]
    fn meets_slo_straddles_bound() {
        let l = ladder3();
        let m = prefill_models(&l);
        let q = snapshot(vec![pending(0, 0.0, 500)], 0.0);
        let policy = SchedulerPolicy::default();
        let proj = project_batches(&q, &policy, 4);
        let at_mid = predict_latency(&m.latency, &proj[0].features, 1, 1485.0);
        let c = cfg(at_mid);
        let a = |f: f64| FrequencyAssignment { freqs: vec![f] };
        assert!(meets_slo(&a(1485.0), &proj, &q, &m, 1, &c));
        assert!(!meets_slo(&a(990.0), &proj, &q, &m, 1, &c));
    }

    #[test]
    fn mutation_counts_follow_occurrences() {
        let l = ladder3();
        let m = prefill_models(&l);
        let policy = SchedulerPolicy {
            max_batch_tokens: 1000,
            ..SchedulerPolicy::default()
        };
        let q = snapshot((0..4).map(|i| pending(i, 0.0, 1000)).collect(), 0.0);
        let out = greedy_freq_select(&q, &cfg(f64::INFINITY), &m, 1, &policy, &l);
        assert_eq!(out.levels[0].occurrences, 4);
        assert_eq!(out.levels[0].mutations, 80);
    }

    #[test]
    fn decode_policy_examples() {
        let l = ladder3();
        let fam = SynthFamily::from_name("compute-bound", Phase::Decode).unwrap();
        let m = synth_model(&fam, Phase::Decode, &l, &[1]).unwrap();
        let batch = BatchFeatures::from_lengths([500u64; 8]);
        let kv = KVCacheState {
            capacity_tokens: 1000,
            used_tokens: 100,
            threshold: 0.9,
        };
        let mut c = DecodePolicyConfig {
            tbt_slo_ms: f64::INFINITY,
            kv_threshold: 0.9,
            ladder: l.clone(),
        };
        assert_eq!(select_decode_freq(&batch, &kv, &c, &m, 1).freq_mhz, 990.0);
        let full = KVCacheState {
            used_tokens: 990,
            ..kv
        };
        assert_eq!(
            select_decode_freq(&batch, &full, &c, &m, 1).freq_mhz,
            1980.0
        );
        c.tbt_slo_ms = predict_latency(&m.latency, &batch, 1, 1485.0);
        assert_eq!(select_decode_freq(&batch, &kv, &c, &m, 1).freq_mhz, 1485.0);
    }

    #[test]
    fn safety_threshold() {
        assert_eq!(
            apply_safety_overrides(100.0, 100.0, 0.05),
            SafetyAction::None
        );
        assert_eq!(
            apply_safety_overrides(110.0, 100.0, 0.05),
            SafetyAction::SwitchToMax
        );
    }

    #[test]
    fn burst_raises_first_frequency() {
        let l = ladder3();
        let m = prefill_models(&l);
        let policy = SchedulerPolicy::default();
        let c = MpcConfig {
            horizon_k: 8,
            ..cfg(400.0)
        };
        let calm = snapshot(vec![pending(0, 0.0, 1000)], 0.0);
        let before = greedy_freq_select(&calm, &c, &m, 1, &policy, &l);
        let mut burst = calm.clone();
        burst.waiting.extend((1..12).map(|i| pending(i, 0.0, 4000)));
        let after = on_arrival_trigger(&burst, &c, &m, 1, &policy, &l);
        assert!(after.assignment.freqs[0] > before.assignment.freqs[0]);
        let again = greedy_freq_select(&calm, &c, &m, 1, &policy, &l);
        assert_eq!(again.assignment, before.assignment);
    }
}
