//! Deterministic iteration-level simulation of prefill and decode instances
//! and of a routed prefill/decode cluster.
//!
//! Each instance is an event loop over arrivals, batch completions,
//! frequency-switch completions and safety checks. Batch progress is tracked
//! as a fraction of work so the frequency can change mid-batch; every
//! constant-frequency stretch of a batch becomes one [`BatchRecord`].

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dvfs::{apply_safety_overrides, SafetyAction};
use crate::error::{param_err, Error, Result};
use crate::perfmodel::{
    predict_idle_power, predict_latency, predict_power, BatchFeatures, FrequencyLadder, ModelSet,
    Phase, PhaseModels,
};
use crate::workload::{Request, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub phase: Phase,
    pub tp: u32,
    pub base_freq_mhz: f64,
}

impl InstanceConfig {
    pub fn new(phase: Phase, tp: u32, base_freq_mhz: f64) -> Self {
        InstanceConfig {
            phase,
            tp,
            base_freq_mhz,
        }
    }

    pub fn validate(&self, ladder: &FrequencyLadder) -> Result<()> {
        if self.tp == 0 {
            return Err(param_err("tp must be >= 1"));
        }
        if !ladder.contains(self.base_freq_mhz) {
            return Err(param_err(format!(
                "base frequency {} MHz is not on the ladder",
                self.base_freq_mhz
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerPolicy {
    /// Token budget of one prefill batch.
    pub max_batch_tokens: u32,
    /// Cap on requests per batch (decode residency cap).
    pub max_batch_requests: u32,
    /// Split a prompt across consecutive prefill batches.
    pub chunking: bool,
}

impl Default for SchedulerPolicy {
    fn default() -> Self {
        SchedulerPolicy {
            max_batch_tokens: 4096,
            max_batch_requests: 256,
            chunking: true,
        }
    }
}

impl SchedulerPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.max_batch_tokens == 0 || self.max_batch_requests == 0 {
            return Err(param_err("scheduler budgets must be >= 1"));
        }
        Ok(())
    }
}

/// Engine knobs that are not part of the scheduling policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Delay before a requested frequency takes effect; the old frequency
    /// stays in force meanwhile.
    pub switch_latency_ms: f64,
    /// Relative slack before the safety check reverts to max frequency.
    pub safety_margin: f64,
    /// KV-cache slots per GPU on decode instances.
    pub kv_tokens_per_gpu: u64,
    pub ladder: FrequencyLadder,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            switch_latency_ms: 30.0,
            safety_margin: 0.05,
            kv_tokens_per_gpu: 200_000,
            ladder: FrequencyLadder::default_h100(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KVCacheState {
    pub capacity_tokens: u64,
    pub used_tokens: u64,
    pub threshold: f64,
}

impl KVCacheState {
    pub fn utilization(&self) -> f64 {
        if self.capacity_tokens == 0 {
            return 1.0;
        }
        self.used_tokens as f64 / self.capacity_tokens as f64
    }
}

/// One constant-frequency stretch of a batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRecord {
    pub instance: usize,
    pub phase: Phase,
    pub batch_id: u64,
    pub start_ms: f64,
    pub end_ms: f64,
    pub features: BatchFeatures,
    pub freq_mhz: f64,
    pub power_w: f64,
    pub energy_j: f64,
    pub members: Vec<u64>,
}

impl BatchRecord {
    pub fn duration_ms(&self) -> f64 {
        self.end_ms - self.start_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdleInterval {
    pub instance: usize,
    pub start_ms: f64,
    pub end_ms: f64,
    pub power_w: f64,
    pub energy_j: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Boundary,
    Arrival,
    Safety,
}

impl Trigger {
    pub fn as_str(self) -> &'static str {
        match self {
            Trigger::Boundary => "boundary",
            Trigger::Arrival => "arrival",
            Trigger::Safety => "safety",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlLogEntry {
    pub time_ms: f64,
    pub instance: usize,
    pub trigger: Trigger,
    pub chosen_freq_mhz: f64,
    pub feasible: bool,
    pub eval_count: u64,
}

/// A request waiting for (the rest of) its prefill.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PendingRequest {
    pub id: u64,
    pub arrival_ms: f64,
    pub input_len: u32,
    pub remaining_tokens: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunningMember {
    pub id: u64,
    pub arrival_ms: f64,
    pub tokens: u32,
    /// True when this batch finishes the request's prefill.
    pub completes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunningBatch {
    pub features: BatchFeatures,
    pub members: Vec<RunningMember>,
    pub elapsed_ms: f64,
    pub remaining_fraction: f64,
    pub freq_mhz: f64,
}

/// Prefill queue state handed to a controller.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueueSnapshot {
    pub now_ms: f64,
    pub waiting: Vec<PendingRequest>,
    pub running: Option<RunningBatch>,
    /// Frequency the hardware will be at (including any pending switch).
    pub current_freq_mhz: f64,
}

#[derive(Debug, Clone, Copy)]
pub enum ControlInput<'a> {
    Prefill {
        snapshot: &'a QueueSnapshot,
        trigger: Trigger,
    },
    Decode {
        now_ms: f64,
        batch: &'a BatchFeatures,
        kv: &'a KVCacheState,
        current_freq_mhz: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlDecision {
    pub freq_mhz: f64,
    /// Predicted time until the current (or about to start) batch finishes
    /// at `freq_mhz`, excluding switch delay. Arms the safety check.
    pub predicted_remaining_ms: Option<f64>,
    pub feasible: bool,
    pub eval_count: u64,
}

/// Per-instance frequency policy consulted by the simulator.
pub trait FrequencyController: Send {
    fn decide(&mut self, input: ControlInput<'_>) -> ControlDecision;
}

/// Per-request lifecycle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival_ms: f64,
    pub input_len: u32,
    pub output_len: u32,
    pub prefill_instance: Option<usize>,
    pub prefill_done_ms: Option<f64>,
    pub decode_instance: Option<usize>,
    pub decode_enqueue_ms: Option<f64>,
    pub decode_start_ms: Option<f64>,
    pub token_times_ms: Vec<f64>,
}

impl RequestRecord {
    fn new(r: &Request) -> Self {
        RequestRecord {
            id: r.id,
            arrival_ms: r.arrival_ms,
            input_len: r.input_len,
            output_len: r.output_len,
            prefill_instance: None,
            prefill_done_ms: None,
            decode_instance: None,
            decode_enqueue_ms: None,
            decode_start_ms: None,
            token_times_ms: Vec::new(),
        }
    }

    pub fn ttft_ms(&self) -> Option<f64> {
        self.prefill_done_ms.map(|d| d - self.arrival_ms)
    }

    pub fn decode_complete(&self) -> bool {
        self.token_times_ms.len() == self.output_len as usize
    }

    /// Mean decode inter-token gap; `None` for single-token outputs or
    /// unfinished requests.
    pub fn tpot_ms(&self) -> Option<f64> {
        if self.output_len < 2 || !self.decode_complete() {
            return None;
        }
        let first = self.token_times_ms[0];
        let last = *self.token_times_ms.last()?;
        Some((last - first) / (self.output_len - 1) as f64)
    }

    /// Largest single inter-token gap.
    pub fn max_tbt_ms(&self) -> Option<f64> {
        self.token_times_ms
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(None, |acc: Option<f64>, g| {
                Some(acc.map_or(g, |a| a.max(g)))
            })
    }

    /// Wait between joining the decode queue and the first decode iteration.
    pub fn decode_queue_delay_ms(&self) -> Option<f64> {
        Some(self.decode_start_ms? - self.decode_enqueue_ms?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceSummary {
    pub instance: usize,
    pub config: InstanceConfig,
    pub busy_energy_j: f64,
    pub idle_energy_j: f64,
    pub total_energy_j: f64,
    pub n_batches: u64,
    pub kv_capacity_tokens: u64,
    pub peak_kv_tokens: u64,
    /// Number of iterations each served request participated in is checked
    /// against `output_len`; this counts mismatches (always 0 when correct).
    pub requests_served: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub requests: Vec<RequestRecord>,
    pub batches: Vec<BatchRecord>,
    pub idle: Vec<IdleInterval>,
    pub instances: Vec<InstanceSummary>,
    pub control_log: Vec<ControlLogEntry>,
    pub span_ms: f64,
    pub completed_requests: u64,
    pub generated_tokens: u64,
}

impl SimResult {
    pub fn total_energy_j(&self) -> f64 {
        let mut s = CompensatedSum::default();
        self.instances.iter().for_each(|i| s.add(i.total_energy_j));
        s.value()
    }

    pub fn busy_energy_j(&self) -> f64 {
        self.instances.iter().map(|i| i.busy_energy_j).sum()
    }

    pub fn idle_energy_j(&self) -> f64 {
        self.instances.iter().map(|i| i.idle_energy_j).sum()
    }

    pub fn phase_energy_j(&self, phase: Phase) -> f64 {
        self.instances
            .iter()
            .filter(|i| i.config.phase == phase)
            .map(|i| i.total_energy_j)
            .sum()
    }

    pub fn phase_busy_energy_j(&self, phase: Phase) -> f64 {
        self.instances
            .iter()
            .filter(|i| i.config.phase == phase)
            .map(|i| i.busy_energy_j)
            .sum()
    }

    pub fn phase_gpus(&self, phase: Phase) -> u32 {
        self.instances
            .iter()
            .filter(|i| i.config.phase == phase)
            .map(|i| i.config.tp)
            .sum()
    }

    /// Writes one row per request: `id,arrival_ms,ttft_ms,tpot_ms`.
    /// Undefined values are left empty.
    pub fn write_requests_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["id", "arrival_ms", "ttft_ms", "tpot_ms"])?;
        for r in &self.requests {
            out.write_record([
                r.id.to_string(),
                r.arrival_ms.to_string(),
                opt(r.ttft_ms()),
                opt(r.tpot_ms()),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes one row per batch segment:
    /// `instance,phase,batch_id,start_ms,end_ms,freq_mhz,power_w,energy_j`.
    pub fn write_batches_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "instance", "phase", "batch_id", "start_ms", "end_ms", "freq_mhz", "power_w",
            "energy_j",
        ])?;
        for b in &self.batches {
            out.write_record([
                b.instance.to_string(),
                b.phase.to_string(),
                b.batch_id.to_string(),
                b.start_ms.to_string(),
                b.end_ms.to_string(),
                b.freq_mhz.to_string(),
                b.power_w.to_string(),
                b.energy_j.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csvs(&self, dir: &Path, prefix: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_requests_csv(std::fs::File::create(
            dir.join(format!("{prefix}requests.csv")),
        )?)?;
        self.write_batches_csv(std::fs::File::create(
            dir.join(format!("{prefix}batches.csv")),
        )?)?;
        crate::dvfs::write_control_log_csv(
            &self.control_log,
            std::fs::File::create(dir.join(format!("{prefix}control_log.csv")))?,
        )?;
        Ok(())
    }
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Piecewise-constant idle power: `initial_w` until the first change, then
/// each `(time_ms, watts)` onwards.
#[derive(Debug, Clone, PartialEq)]
pub struct IdleSchedule {
    pub initial_w: f64,
    pub changes: Vec<(f64, f64)>,
}

impl IdleSchedule {
    pub fn constant(watts: f64) -> Self {
        IdleSchedule {
            initial_w: watts,
            changes: Vec::new(),
        }
    }

    /// Joules over `[a, b]`.
    fn integrate(&self, a: f64, b: f64) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        let mut t = a;
        let mut w = self.initial_w;
        for &(ct, cw) in &self.changes {
            if ct <= t {
                w = cw;
                continue;
            }
            if ct >= b {
                break;
            }
            out.push((t, ct, w));
            t = ct;
            w = cw;
        }
        if b > t {
            out.push((t, b, w));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub busy_j: f64,
    pub idle_j: f64,
    pub total_j: f64,
}

/// Neumaier-compensated running sum, so long energy tallies do not drift
/// with the order segments are visited in.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Busy energy is the sum over records of power × duration; idle energy
/// integrates the idle schedule over the parts of `[span_start, span_end]`
/// not covered by a record.
pub fn account_energy(
    records: &[BatchRecord],
    idle: &IdleSchedule,
    span_start_ms: f64,
    span_end_ms: f64,
) -> Result<(EnergyBreakdown, Vec<IdleInterval>)> {
    let mut sorted: Vec<&BatchRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.start_ms.total_cmp(&b.start_ms));
    let eps = 1e-9 * span_end_ms.abs().max(1.0);
    let mut busy = CompensatedSum::default();
    let mut idle_j = CompensatedSum::default();
    let mut intervals = Vec::new();
    let mut cursor = span_start_ms;
    let instance = sorted.first().map(|r| r.instance).unwrap_or(0);
    let fill = |a: f64, b: f64, idle_j: &mut CompensatedSum, out: &mut Vec<IdleInterval>| {
        for (a, b, w) in idle.integrate(a, b) {
            let e = w * (b - a) / 1000.0;
            idle_j.add(e);
            out.push(IdleInterval {
                instance,
                start_ms: a,
                end_ms: b,
                power_w: w,
                energy_j: e,
            });
        }
    };
    for r in &sorted {
        if r.start_ms < span_start_ms - eps || r.end_ms > span_end_ms + eps {
            return Err(Error::Accounting(format!(
                "batch {} [{}, {}] lies outside the span",
                r.batch_id, r.start_ms, r.end_ms
            )));
        }
        if r.start_ms < cursor - eps {
            return Err(Error::Accounting(format!(
                "batch {} overlaps the previous record",
                r.batch_id
            )));
        }
        busy.add(r.power_w * (r.end_ms - r.start_ms) / 1000.0);
        if r.start_ms > cursor {
            fill(cursor, r.start_ms, &mut idle_j, &mut intervals);
        }
        cursor = cursor.max(r.end_ms);
    }
    if span_end_ms > cursor {
        fill(cursor, span_end_ms, &mut idle_j, &mut intervals);
    }
    let (busy_j, idle_j) = (busy.value(), idle_j.value());
    let mut total = CompensatedSum::default();
    total.add(busy_j);
    total.add(idle_j);
    Ok((
        EnergyBreakdown {
            busy_j,
            idle_j,
            total_j: total.value(),
        },
        intervals,
    ))
}

/// Per-instance assignment state for weighted deficit routing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RouterState {
    pub assigned: Vec<f64>,
    pub total: f64,
}

impl RouterState {
    pub fn new(n: usize) -> Self {
        RouterState {
            assigned: vec![0.0; n],
            total: 0.0,
        }
    }
}

/// Routing load of a request: prompt tokens for prefill, one unit for decode.
pub fn routing_load(r: &Request, phase: Phase) -> f64 {
    match phase {
        Phase::Prefill => r.input_len as f64,
        Phase::Decode => 1.0,
    }
}

/// Sends the request to the instance furthest behind its weighted share,
/// ties to the lowest id.
pub fn route_request(r: &Request, weights: &[f64], phase: Phase, state: &mut RouterState) -> usize {
    debug_assert_eq!(weights.len(), state.assigned.len());
    let load = routing_load(r, phase);
    state.total += load;
    let mut best = 0usize;
    let mut best_deficit = f64::NEG_INFINITY;
    for (i, (&w, &a)) in weights.iter().zip(&state.assigned).enumerate() {
        let d = w * state.total - a;
        if d > best_deficit {
            best = i;
            best_deficit = d;
        }
    }
    state.assigned[best] += load;
    best
}

/// FCFS token-budget batch formation: `(queue index, tokens taken)` pairs.
pub fn form_prefill_batch(queue: &[PendingRequest], policy: &SchedulerPolicy) -> Vec<(usize, u32)> {
    let mut out = Vec::new();
    let mut budget = policy.max_batch_tokens;
    for (i, q) in queue.iter().enumerate() {
        if out.len() as u32 >= policy.max_batch_requests {
            break;
        }
        if policy.chunking {
            let take = q.remaining_tokens.min(budget);
            if take == 0 {
                break;
            }
            out.push((i, take));
            budget -= take;
            if take < q.remaining_tokens {
                break;
            }
        } else if q.remaining_tokens <= budget {
            out.push((i, q.remaining_tokens));
            budget -= q.remaining_tokens;
        } else {
            if out.is_empty() {
                // oversized prompt runs alone
                out.push((i, q.remaining_tokens));
            }
            break;
        }
    }
    out
}

struct Active {
    batch_id: u64,
    features: BatchFeatures,
    members: Vec<RunningMember>,
    /// Request slots (prefill: record index; decode: resident index) aligned
    /// with members.
    start: f64,
    progress: f64,
    last_t: f64,
    seg_start: f64,
    safety: Option<SafetyArm>,
}

#[derive(Clone, Copy)]
struct SafetyArm {
    decided_at: f64,
    predicted_ms: f64,
    deadline: f64,
}

struct Resident {
    slot: usize,
    context: u64,
    generated: u32,
    output_len: u32,
    reserve: u64,
}

struct InstanceRun {
    records: Vec<BatchRecord>,
    freq_changes: Vec<(f64, f64)>,
    end_ms: f64,
    log: Vec<ControlLogEntry>,
    peak_kv: u64,
    kv_capacity: u64,
    n_batches: u64,
}

struct Engine<'a> {
    id: usize,
    cfg: InstanceConfig,
    policy: SchedulerPolicy,
    opts: &'a SimOptions,
    models: &'a PhaseModels,
    controller: Option<&'a mut dyn FrequencyController>,
    freq: f64,
    pending: Option<(f64, f64)>,
    active: Option<Active>,
    records: Vec<BatchRecord>,
    freq_changes: Vec<(f64, f64)>,
    log: Vec<ControlLogEntry>,
    next_batch_id: u64,
    last_event: f64,
}

impl<'a> Engine<'a> {
    fn latency(&self, f: &BatchFeatures, freq: f64) -> f64 {
        predict_latency(&self.models.latency, f, self.cfg.tp, freq)
    }

    fn power(&self, f: &BatchFeatures, freq: f64) -> f64 {
        predict_power(&self.models.power, f, self.cfg.tp, freq)
    }

    fn target_freq(&self) -> f64 {
        self.pending.map(|p| p.0).unwrap_or(self.freq)
    }

    fn batch_end(&self) -> Option<f64> {
        self.active.as_ref().map(|a| {
            let l = self.latency(&a.features, self.freq);
            a.last_t + (1.0 - a.progress).max(0.0) * l
        })
    }

    fn advance(&mut self, t: f64) {
        let freq = self.freq;
        if let Some(a) = self.active.as_ref() {
            let l = self.latency(&a.features, freq);
            let a = self.active.as_mut().unwrap();
            a.progress += (t - a.last_t) / l;
            a.last_t = t;
        }
    }

    fn close_segment(&mut self, t: f64) {
        let freq = self.freq;
        if let Some(a) = self.active.as_ref() {
            if t > a.seg_start {
                let p = self.power(&a.features, freq);
                let a = self.active.as_mut().unwrap();
                self.records.push(BatchRecord {
                    instance: self.id,
                    phase: self.cfg.phase,
                    batch_id: a.batch_id,
                    start_ms: a.seg_start,
                    end_ms: t,
                    features: a.features,
                    freq_mhz: freq,
                    power_w: p,
                    energy_j: p * (t - a.seg_start) / 1000.0,
                    members: a.members.iter().map(|m| m.id).collect(),
                });
            }
            self.active.as_mut().unwrap().seg_start = t;
        }
    }

    fn set_freq(&mut self, t: f64, f: f64) {
        if f == self.freq {
            return;
        }
        self.advance(t);
        self.close_segment(t);
        self.freq = f;
        self.freq_changes.push((t, f));
    }

    /// Returns true when a switch is now pending or applied.
    fn request_freq(&mut self, t: f64, f: f64) -> bool {
        if f == self.freq {
            self.pending = None;
            return false;
        }
        if let Some((pf, _)) = self.pending {
            if pf == f {
                return true;
            }
        }
        if self.opts.switch_latency_ms <= 0.0 {
            self.pending = None;
            self.set_freq(t, f);
        } else {
            self.pending = Some((f, t + self.opts.switch_latency_ms));
        }
        true
    }

    fn apply_decision(&mut self, t: f64, d: &ControlDecision, trigger: Trigger) {
        self.log.push(ControlLogEntry {
            time_ms: t,
            instance: self.id,
            trigger,
            chosen_freq_mhz: d.freq_mhz,
            feasible: d.feasible,
            eval_count: d.eval_count,
        });
        let switching = self.request_freq(t, d.freq_mhz) && self.pending.is_some();
        if let (Some(a), Some(pred)) = (self.active.as_mut(), d.predicted_remaining_ms) {
            let delay = if switching {
                self.opts.switch_latency_ms
            } else {
                0.0
            };
            let predicted = pred + delay;
            a.safety = Some(SafetyArm {
                decided_at: t,
                predicted_ms: predicted,
                deadline: t + predicted * (1.0 + self.opts.safety_margin),
            });
        }
    }

    fn next_control_time(&self) -> (Option<f64>, Option<f64>, Option<f64>) {
        let sw = self.pending.map(|p| p.1);
        let end = self.batch_end();
        let safe = self
            .active
            .as_ref()
            .and_then(|a| a.safety.map(|s| s.deadline));
        (sw, end, safe)
    }

    fn handle_switch(&mut self, t: f64) {
        if let Some((f, _)) = self.pending.take() {
            self.set_freq(t, f);
        }
    }

    fn handle_safety(&mut self, t: f64) {
        let Some(a) = self.active.as_mut() else {
            return;
        };
        let Some(arm) = a.safety.take() else { return };
        let end = self.batch_end().unwrap_or(t);
        let observed = end - arm.decided_at;
        if let SafetyAction::SwitchToMax =
            apply_safety_overrides(observed, arm.predicted_ms, self.opts.safety_margin)
        {
            let max = self.opts.ladder.max();
            self.log.push(ControlLogEntry {
                time_ms: t,
                instance: self.id,
                trigger: Trigger::Safety,
                chosen_freq_mhz: max,
                feasible: false,
                eval_count: 0,
            });
            self.request_freq(t, max);
        }
    }

    fn start_active(&mut self, t: f64, features: BatchFeatures, members: Vec<RunningMember>) {
        self.active = Some(Active {
            batch_id: self.next_batch_id,
            features,
            members,
            start: t,
            progress: 0.0,
            last_t: t,
            seg_start: t,
            safety: None,
        });
        self.next_batch_id += 1;
    }

    fn finish_active(&mut self, t: f64) -> Active {
        self.advance(t);
        self.close_segment(t);
        let mut a = self.active.take().expect("active batch");
        a.progress = 1.0;
        a
    }

    fn into_run(self, kv_capacity: u64, peak_kv: u64) -> InstanceRun {
        InstanceRun {
            n_batches: self.next_batch_id,
            records: self.records,
            freq_changes: self.freq_changes,
            end_ms: self.last_event,
            log: self.log,
            peak_kv,
            kv_capacity,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Switch,
    Arrival,
    End,
    Safety,
}

fn earliest(cands: &[(Option<f64>, EventKind)]) -> Option<(f64, EventKind)> {
    let mut best: Option<(f64, EventKind)> = None;
    for &(t, k) in cands {
        if let Some(t) = t {
            best = match best {
                None => Some((t, k)),
                Some((bt, bk)) if t < bt || (t == bt && k < bk) => Some((t, k)),
                b => b,
            };
        }
    }
    best
}

/// Runs one prefill instance over `arrivals` (indices into `records`).
fn run_prefill(
    engine: &mut Engine<'_>,
    arrivals: &[usize],
    records: &mut [RequestRecord],
) -> Result<()> {
    let mut queue: VecDeque<PendingRequest> = VecDeque::new();
    let mut slot_of: std::collections::HashMap<u64, usize> = std::collections::HashMap::new();
    let mut next = 0usize;
    let policy = engine.policy;

    loop {
        let t_arr = arrivals.get(next).map(|&i| records[i].arrival_ms);
        let (t_sw, t_end, t_safe) = engine.next_control_time();
        let Some((t, kind)) = earliest(&[
            (t_sw, EventKind::Switch),
            (t_arr, EventKind::Arrival),
            (t_end, EventKind::End),
            (t_safe, EventKind::Safety),
        ]) else {
            break;
        };
        engine.last_event = engine.last_event.max(t);
        match kind {
            EventKind::Switch => engine.handle_switch(t),
            EventKind::Arrival => {
                while let Some(&i) = arrivals.get(next) {
                    if records[i].arrival_ms > t {
                        break;
                    }
                    let r = &records[i];
                    slot_of.insert(r.id, i);
                    queue.push_back(PendingRequest {
                        id: r.id,
                        arrival_ms: r.arrival_ms,
                        input_len: r.input_len,
                        remaining_tokens: r.input_len,
                    });
                    next += 1;
                }
                if engine.active.is_some() && engine.controller.is_some() {
                    let snap = prefill_snapshot(engine, &queue, t);
                    let d = engine
                        .controller
                        .as_mut()
                        .unwrap()
                        .decide(ControlInput::Prefill {
                            snapshot: &snap,
                            trigger: Trigger::Arrival,
                        });
                    engine.apply_decision(t, &d, Trigger::Arrival);
                }
            }
            EventKind::End => {
                let a = engine.finish_active(t);
                for m in a.members.iter().filter(|m| m.completes) {
                    records[slot_of[&m.id]].prefill_done_ms = Some(t);
                }
            }
            EventKind::Safety => engine.handle_safety(t),
        }

        if engine.active.is_none() && !queue.is_empty() {
            let snap = engine
                .controller
                .is_some()
                .then(|| prefill_snapshot(engine, &queue, t));
            let decision = match (snap, engine.controller.as_mut()) {
                (Some(snap), Some(c)) => Some(c.decide(ControlInput::Prefill {
                    snapshot: &snap,
                    trigger: Trigger::Boundary,
                })),
                _ => None,
            };
            let q: Vec<PendingRequest> = queue.iter().copied().collect();
            let picks = form_prefill_batch(&q, &policy);
            let mut members = Vec::with_capacity(picks.len());
            for &(qi, take) in &picks {
                let item = &mut queue[qi];
                item.remaining_tokens -= take;
                members.push(RunningMember {
                    id: item.id,
                    arrival_ms: item.arrival_ms,
                    tokens: take,
                    completes: item.remaining_tokens == 0,
                });
            }
            while queue.front().is_some_and(|q| q.remaining_tokens == 0) {
                queue.pop_front();
            }
            let features = BatchFeatures::from_lengths(members.iter().map(|m| m.tokens as u64));
            engine.start_active(t, features, members);
            if let Some(d) = decision {
                engine.apply_decision(t, &d, Trigger::Boundary);
            }
        }
    }
    Ok(())
}

fn prefill_snapshot(
    engine: &Engine<'_>,
    queue: &VecDeque<PendingRequest>,
    t: f64,
) -> QueueSnapshot {
    let running = engine.active.as_ref().map(|a| {
        let l = engine.latency(&a.features, engine.freq);
        let progress = (a.progress + (t - a.last_t) / l).min(1.0);
        RunningBatch {
            features: a.features,
            members: a.members.clone(),
            elapsed_ms: t - a.start,
            remaining_fraction: (1.0 - progress).max(0.0),
            freq_mhz: engine.freq,
        }
    });
    QueueSnapshot {
        now_ms: t,
        waiting: queue.iter().copied().collect(),
        running,
        current_freq_mhz: engine.target_freq(),
    }
}

/// Runs one decode instance; `arrivals` are record indices ordered by their
/// decode enqueue time.
fn run_decode(
    engine: &mut Engine<'_>,
    arrivals: &[usize],
    records: &mut [RequestRecord],
    kv_threshold: f64,
) -> Result<(u64, u64)> {
    let capacity = engine.opts.kv_tokens_per_gpu * engine.cfg.tp as u64;
    for &i in arrivals {
        let r = &records[i];
        let need = r.input_len as u64 + r.output_len as u64;
        if need > capacity {
            return Err(Error::Simulation(format!(
                "request {} needs {} KV slots but decode instance {} holds {}",
                r.id, need, engine.id, capacity
            )));
        }
    }
    let policy = engine.policy;
    let mut waiting: VecDeque<usize> = VecDeque::new();
    let mut residents: Vec<Resident> = Vec::new();
    let mut reserved = 0u64;
    let mut peak = 0u64;
    let mut next = 0usize;

    loop {
        let t_arr = arrivals
            .get(next)
            .map(|&i| records[i].decode_enqueue_ms.expect("enqueue time set"));
        let (t_sw, t_end, t_safe) = engine.next_control_time();
        let Some((t, kind)) = earliest(&[
            (t_sw, EventKind::Switch),
            (t_arr, EventKind::Arrival),
            (t_end, EventKind::End),
            (t_safe, EventKind::Safety),
        ]) else {
            break;
        };
        engine.last_event = engine.last_event.max(t);
        match kind {
            EventKind::Switch => engine.handle_switch(t),
            EventKind::Arrival => {
                while let Some(&i) = arrivals.get(next) {
                    if records[i].decode_enqueue_ms.unwrap() > t {
                        break;
                    }
                    waiting.push_back(i);
                    next += 1;
                }
            }
            EventKind::End => {
                engine.finish_active(t);
                let mut still = Vec::with_capacity(residents.len());
                for mut r in residents.drain(..) {
                    r.generated += 1;
                    r.context += 1;
                    records[r.slot].token_times_ms.push(t);
                    if r.generated == r.output_len {
                        reserved -= r.reserve;
                    } else {
                        still.push(r);
                    }
                }
                residents = still;
            }
            EventKind::Safety => engine.handle_safety(t),
        }

        if engine.active.is_none() {
            while let Some(&i) = waiting.front() {
                let (input_len, output_len) = (records[i].input_len, records[i].output_len);
                let need = input_len as u64 + output_len as u64;
                if residents.len() as u32 >= policy.max_batch_requests || reserved + need > capacity
                {
                    break;
                }
                waiting.pop_front();
                reserved += need;
                records[i].decode_start_ms = Some(t);
                residents.push(Resident {
                    slot: i,
                    context: input_len as u64,
                    generated: 0,
                    output_len,
                    reserve: need,
                });
            }
            if residents.is_empty() {
                continue;
            }
            let used: u64 = residents.iter().map(|r| r.context).sum();
            // the iteration writes one more slot per resident
            peak = peak.max(used + residents.len() as u64);
            let features = BatchFeatures::from_lengths(residents.iter().map(|r| r.context));
            let members = residents
                .iter()
                .map(|r| RunningMember {
                    id: records[r.slot].id,
                    arrival_ms: records[r.slot].arrival_ms,
                    tokens: 1,
                    completes: r.generated + 1 == r.output_len,
                })
                .collect();
            let kv = KVCacheState {
                capacity_tokens: capacity,
                used_tokens: used,
                threshold: kv_threshold,
            };
            let current = engine.target_freq();
            let decision = engine.controller.as_mut().map(|c| {
                c.decide(ControlInput::Decode {
                    now_ms: t,
                    batch: &features,
                    kv: &kv,
                    current_freq_mhz: current,
                })
            });
            engine.start_active(t, features, members);
            if let Some(d) = decision {
                engine.apply_decision(t, &d, Trigger::Boundary);
            }
        }
    }
    Ok((capacity, peak))
}

/// KV utilization above which decode controllers are told to run flat out.
pub const DEFAULT_KV_THRESHOLD: f64 = 0.9;

#[allow(clippy::too_many_arguments)]
fn run_instance<'a>(
    id: usize,
    cfg: InstanceConfig,
    policy: &SchedulerPolicy,
    models: &'a ModelSet,
    opts: &'a SimOptions,
    controller: Option<&'a mut dyn FrequencyController>,
    arrivals: &[usize],
    records: &mut [RequestRecord],
) -> Result<InstanceRun> {
    let mut engine = Engine {
        id,
        cfg,
        policy: *policy,
        opts,
        models: models.phase(cfg.phase),
        controller,
        freq: cfg.base_freq_mhz,
        pending: None,
        active: None,
        records: Vec::new(),
        freq_changes: Vec::new(),
        log: Vec::new(),
        next_batch_id: 0,
        last_event: 0.0,
    };
    match cfg.phase {
        Phase::Prefill => {
            for &i in arrivals {
                records[i].prefill_instance = Some(id);
            }
            run_prefill(&mut engine, arrivals, records)?;
            Ok(engine.into_run(0, 0))
        }
        Phase::Decode => {
            for &i in arrivals {
                records[i].decode_instance = Some(id);
            }
            let (cap, peak) = run_decode(&mut engine, arrivals, records, DEFAULT_KV_THRESHOLD)?;
            Ok(engine.into_run(cap, peak))
        }
    }
}

fn finalize_instance(
    id: usize,
    cfg: InstanceConfig,
    models: &ModelSet,
    run: InstanceRun,
    span_ms: f64,
    out: &mut SimResult,
    served: u64,
) -> Result<()> {
    let idle_model = &models.phase(cfg.phase).idle;
    let mut schedule =
        IdleSchedule::constant(predict_idle_power(idle_model, cfg.tp, cfg.base_freq_mhz)?);
    for &(t, f) in &run.freq_changes {
        schedule
            .changes
            .push((t, predict_idle_power(idle_model, cfg.tp, f)?));
    }
    let (energy, idle) = account_energy(&run.records, &schedule, 0.0, span_ms)?;
    let idle: Vec<IdleInterval> = idle
        .into_iter()
        .map(|mut i| {
            i.instance = id;
            i
        })
        .collect();
    out.instances.push(InstanceSummary {
        instance: id,
        config: cfg,
        busy_energy_j: energy.busy_j,
        idle_energy_j: energy.idle_j,
        total_energy_j: energy.total_j,
        n_batches: run.n_batches,
        kv_capacity_tokens: run.kv_capacity,
        peak_kv_tokens: run.peak_kv,
        requests_served: served,
    });
    out.batches.extend(run.records);
    out.idle.extend(idle);
    out.control_log.extend(run.log);
    Ok(())
}

fn check_models(models: &ModelSet, cfg: &InstanceConfig, opts: &SimOptions) -> Result<()> {
    cfg.validate(&opts.ladder)?;
    models.check_coverage(cfg.phase, cfg.tp, &opts.ladder)
}

/// Simulates a single instance. For a decode instance, trace arrivals are
/// the times requests join the decode queue.
pub fn simulate_instance<'a>(
    trace: &Trace,
    cfg: &InstanceConfig,
    policy: &SchedulerPolicy,
    models: &'a ModelSet,
    opts: &'a SimOptions,
    controller: Option<&'a mut dyn FrequencyController>,
) -> Result<SimResult> {
    policy.validate()?;
    check_models(models, cfg, opts)?;
    let mut records: Vec<RequestRecord> = trace.requests.iter().map(RequestRecord::new).collect();
    if cfg.phase == Phase::Decode {
        for r in &mut records {
            r.decode_enqueue_ms = Some(r.arrival_ms);
        }
    }
    let arrivals: Vec<usize> = (0..records.len()).collect();
    let run = run_instance(
        0,
        *cfg,
        policy,
        models,
        opts,
        controller,
        &arrivals,
        &mut records,
    )?;
    let span = trace.duration_ms.max(run.end_ms);
    let mut out = SimResult {
        requests: Vec::new(),
        batches: Vec::new(),
        idle: Vec::new(),
        instances: Vec::new(),
        control_log: Vec::new(),
        span_ms: span,
        completed_requests: 0,
        generated_tokens: 0,
    };
    finalize_instance(0, *cfg, models, run, span, &mut out, records.len() as u64)?;
    out.completed_requests = match cfg.phase {
        Phase::Prefill => records
            .iter()
            .filter(|r| r.prefill_done_ms.is_some())
            .count() as u64,
        Phase::Decode => records.iter().filter(|r| r.decode_complete()).count() as u64,
    };
    out.generated_tokens = records.iter().map(|r| r.token_times_ms.len() as u64).sum();
    out.requests = records;
    Ok(out)
}

/// One instance in a cluster with its routing weight within its phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterInstance {
    pub config: InstanceConfig,
    pub weight: f64,
}

/// Builds a fresh controller for cluster instance `index`.
pub type ControllerFactory<'a> =
    dyn Fn(usize, &InstanceConfig) -> Option<Box<dyn FrequencyController>> + Sync + 'a;

/// Simulates a prefill pool feeding a decode pool. Requests are routed to
/// prefill instances in arrival order and to decode instances in order of
/// prefill completion; KV transfer is instantaneous.
pub fn simulate_cluster(
    trace: &Trace,
    instances: &[ClusterInstance],
    policy: &SchedulerPolicy,
    models: &ModelSet,
    opts: &SimOptions,
    controllers: Option<&ControllerFactory<'_>>,
) -> Result<SimResult> {
    policy.validate()?;
    let prefill: Vec<usize> = (0..instances.len())
        .filter(|&i| instances[i].config.phase == Phase::Prefill)
        .collect();
    let decode: Vec<usize> = (0..instances.len())
        .filter(|&i| instances[i].config.phase == Phase::Decode)
        .collect();
    if prefill.is_empty() || decode.is_empty() {
        return Err(Error::Configuration(
            "a cluster needs at least one prefill and one decode instance".into(),
        ));
    }
    for inst in instances {
        check_models(models, &inst.config, opts)?;
        if !(inst.weight > 0.0) {
            return Err(Error::Configuration(
                "routing weights must be positive".into(),
            ));
        }
    }
    let weights = |ids: &[usize]| -> Vec<f64> {
        let s: f64 = ids.iter().map(|&i| instances[i].weight).sum();
        ids.iter().map(|&i| instances[i].weight / s).collect()
    };

    let mut records: Vec<RequestRecord> = trace.requests.iter().map(RequestRecord::new).collect();

    let pw = weights(&prefill);
    let mut state = RouterState::new(prefill.len());
    let mut per_prefill: Vec<Vec<usize>> = vec![Vec::new(); prefill.len()];
    for (i, r) in trace.requests.iter().enumerate() {
        per_prefill[route_request(r, &pw, Phase::Prefill, &mut state)].push(i);
    }

    let mut runs: Vec<(usize, InstanceRun, u64)> = Vec::new();
    for (k, &inst) in prefill.iter().enumerate() {
        let mut ctl = controllers.and_then(|f| f(inst, &instances[inst].config));
        let run = run_instance(
            inst,
            instances[inst].config,
            policy,
            models,
            opts,
            ctl.as_deref_mut()
                .map(|c| c as &mut dyn FrequencyController),
            &per_prefill[k],
            &mut records,
        )?;
        runs.push((inst, run, per_prefill[k].len() as u64));
    }

    let mut order: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].prefill_done_ms.is_some())
        .collect();
    order.sort_by(|&a, &b| {
        records[a]
            .prefill_done_ms
            .unwrap()
            .total_cmp(&records[b].prefill_done_ms.unwrap())
            .then(records[a].id.cmp(&records[b].id))
    });
    let dw = weights(&decode);
    let mut state = RouterState::new(decode.len());
    let mut per_decode: Vec<Vec<usize>> = vec![Vec::new(); decode.len()];
    for &i in &order {
        records[i].decode_enqueue_ms = records[i].prefill_done_ms;
        let req = trace.requests[i];
        per_decode[route_request(&req, &dw, Phase::Decode, &mut state)].push(i);
    }
    for (k, &inst) in decode.iter().enumerate() {
        let mut ctl = controllers.and_then(|f| f(inst, &instances[inst].config));
        let run = run_instance(
            inst,
            instances[inst].config,
            policy,
            models,
            opts,
            ctl.as_deref_mut()
                .map(|c| c as &mut dyn FrequencyController),
            &per_decode[k],
            &mut records,
        )?;
        runs.push((inst, run, per_decode[k].len() as u64));
    }

    let span = runs
        .iter()
        .map(|(_, r, _)| r.end_ms)
        .fold(trace.duration_ms, f64::max);
    let mut out = SimResult {
        requests: Vec::new(),
        batches: Vec::new(),
        idle: Vec::new(),
        instances: Vec::new(),
        control_log: Vec::new(),
        span_ms: span,
        completed_requests: 0,
        generated_tokens: 0,
    };
    runs.sort_by_key(|(i, _, _)| *i);
    for (inst, run, served) in runs {
        finalize_instance(
            inst,
            instances[inst].config,
            models,
            run,
            span,
            &mut out,
            served,
        )?;
    }
    out.completed_requests = records.iter().filter(|r| r.decode_complete()).count() as u64;
    out.generated_tokens = records.iter().map(|r| r.token_times_ms.len() as u64).sum();
    out.requests = records;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perfmodel::{synth_model, SynthFamily};

    fn ladder() -> FrequencyLadder {
        FrequencyLadder::new(vec![990.0, 1485.0, 1980.0]).unwrap()
    }

    fn models() -> ModelSet {
        ModelSet::synthetic("compute-bound", "compute-bound", &ladder(), &[1, 2]).unwrap()
    }

    fn opts() -> SimOptions {
        SimOptions {
            ladder: ladder(),
            ..SimOptions::default()
        }
    }

    fn req(id: u64, at: f64, input: u32, output: u32) -> Request {
        Request {
            id,
            arrival_ms: at,
            input_len: input,
            output_len: output,
        }
    }

    fn prefill_cfg() -> InstanceConfig {
        InstanceConfig::new(Phase::Prefill, 1, 1980.0)
    }

    #[test]
    fn empty_trace_is_idle_only() {
        let m = models();
        let t = Trace::empty(10_000.0);
        let r = simulate_instance(
            &t,
            &prefill_cfg(),
            &SchedulerPolicy::default(),
            &m,
            &opts(),
            None,
        )
        .unwrap();
        assert!(r.batches.is_empty());
        let idle = predict_idle_power(&m.prefill.idle, 1, 1980.0).unwrap();
        assert!((r.total_energy_j() - idle * 10.0).abs() < 1e-9);
    }

    #[test]
    fn single_request_ttft_is_batch_latency() {
        let m = models();
        let t = Trace::new(vec![req(0, 5.0, 100, 4)], 1000.0).unwrap();
        let r = simulate_instance(
            &t,
            &prefill_cfg(),
            &SchedulerPolicy::default(),
            &m,
            &opts(),
            None,
        )
        .unwrap();
        let lat = predict_latency(&m.prefill.latency, &BatchFeatures::single(100), 1, 1980.0);
        assert!((r.requests[0].ttft_ms().unwrap() - lat).abs() < 1e-9);
    }

    #[test]
    fn unchunked_batches_run_sequentially() {
        let m = models();
        let t = Trace::new(vec![req(0, 0.0, 60, 4), req(1, 0.0, 60, 4)], 1000.0).unwrap();
        let policy = SchedulerPolicy {
            max_batch_tokens: 100,
            max_batch_requests: 16,
            chunking: false,
        };
        let r = simulate_instance(&t, &prefill_cfg(), &policy, &m, &opts(), None).unwrap();
        let lat = predict_latency(&m.prefill.latency, &BatchFeatures::single(60), 1, 1980.0);
        assert_eq!(r.batches.len(), 2);
        assert!((r.requests[0].ttft_ms().unwrap() - lat).abs() < 1e-9);
        assert!((r.requests[1].ttft_ms().unwrap() - 2.0 * lat).abs() < 1e-9);
    }

    #[test]
    fn chunked_prompt_spans_batches() {
        let m = models();
        let t = Trace::new(vec![req(0, 0.0, 60, 4), req(1, 0.0, 60, 4)], 1000.0).unwrap();
        let policy = SchedulerPolicy {
            max_batch_tokens: 100,
            max_batch_requests: 16,
            chunking: true,
        };
        let r = simulate_instance(&t, &prefill_cfg(), &policy, &m, &opts(), None).unwrap();
        assert_eq!(r.batches.len(), 2);
        assert_eq!(r.batches[0].features.sum_len, 100);
        assert_eq!(r.batches[1].features.sum_len, 20);
        let l1 = predict_latency(
            &m.prefill.latency,
            &BatchFeatures::from_lengths([60, 40]),
            1,
            1980.0,
        );
        let l2 = predict_latency(&m.prefill.latency, &BatchFeatures::single(20), 1, 1980.0);
        assert!((r.requests[0].ttft_ms().unwrap() - l1).abs() < 1e-9);
        assert!((r.requests[1].ttft_ms().unwrap() - (l1 + l2)).abs() < 1e-9);
    }

    #[test]
    fn form_batch_fcfs() {
        let q: Vec<PendingRequest> = (0..3)
            .map(|i| PendingRequest {
                id: i,
                arrival_ms: 0.0,
                input_len: 50,
                remaining_tokens: 50,
            })
            .collect();
        let policy = SchedulerPolicy {
            max_batch_tokens: 100,
            max_batch_requests: 16,
            chunking: true,
        };
        assert_eq!(form_prefill_batch(&q, &policy), vec![(0, 50), (1, 50)]);
        let big = [PendingRequest {
            id: 0,
            arrival_ms: 0.0,
            input_len: 500,
            remaining_tokens: 500,
        }];
        let nochunk = SchedulerPolicy {
            chunking: false,
            ..policy
        };
        assert_eq!(form_prefill_batch(&big, &nochunk), vec![(0, 500)]);
        assert_eq!(form_prefill_batch(&big, &policy), vec![(0, 100)]);
    }

    #[test]
    fn decode_emits_output_len_tokens() {
        let m = models();
        let t = Trace::new(vec![req(0, 0.0, 100, 5), req(1, 3.0, 50, 1)], 1000.0).unwrap();
        let cfg = InstanceConfig::new(Phase::Decode, 1, 1980.0);
        let r =
            simulate_instance(&t, &cfg, &SchedulerPolicy::default(), &m, &opts(), None).unwrap();
        assert_eq!(r.requests[0].token_times_ms.len(), 5);
        assert_eq!(r.requests[1].token_times_ms.len(), 1);
        assert!(r.requests[0].token_times_ms.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(r.completed_requests, 2);
        assert_eq!(r.generated_tokens, 6);
        assert!(r.requests[0].tpot_ms().is_some());
        assert!(r.requests[1].tpot_ms().is_none());
    }

    #[test]
    fn oversized_request_is_an_error() {
        let m = models();
        let t = Trace::new(vec![req(7, 0.0, 1000, 100)], 1000.0).unwrap();
        let cfg = InstanceConfig::new(Phase::Decode, 1, 1980.0);
        let o = SimOptions {
            kv_tokens_per_gpu: 500,
            ..opts()
        };
        let err =
            simulate_instance(&t, &cfg, &SchedulerPolicy::default(), &m, &o, None).unwrap_err();
        assert!(matches!(err, Error::Simulation(ref s) if s.contains("request 7")));
    }

    #[test]
    fn kv_admission_blocks_when_full() {
        let m = models();
        let reqs: Vec<Request> = (0..10).map(|i| req(i, 0.0, 400, 50)).collect();
        let t = Trace::new(reqs, 100.0).unwrap();
        let cfg = InstanceConfig::new(Phase::Decode, 1, 1980.0);
        let o = SimOptions {
            kv_tokens_per_gpu: 1000,
            ..opts()
        };
        let r = simulate_instance(&t, &cfg, &SchedulerPolicy::default(), &m, &o, None).unwrap();
        assert!(r.instances[0].peak_kv_tokens <= 1000);
        assert_eq!(r.completed_requests, 10);
        assert!(r.batches.iter().all(|b| b.features.n_requests <= 2));
    }

    #[test]
    fn routing_alternates_and_splits() {
        let r = req(0, 0.0, 10, 1);
        let mut s = RouterState::new(1);
        assert!((0..5).all(|_| route_request(&r, &[1.0], Phase::Decode, &mut s) == 0));
        let mut s = RouterState::new(2);
        let picks: Vec<usize> = (0..4)
            .map(|_| route_request(&r, &[0.5, 0.5], Phase::Decode, &mut s))
            .collect();
        assert_eq!(picks, vec![0, 1, 0, 1]);
        let mut s = RouterState::new(2);
        let mut counts = [0usize; 2];
        for _ in 0..100 {
            counts[route_request(&r, &[0.75, 0.25], Phase::Prefill, &mut s)] += 1;
        }
        assert!((counts[0] as i64 - 75).abs() <= 1);
    }

    #[test]
    fn energy_accounting_examples() {
        let (e, _) = account_energy(&[], &IdleSchedule::constant(100.0), 0.0, 10_000.0).unwrap();
        assert_eq!(e.total_j, 1000.0);
        let rec = BatchRecord {
            instance: 0,
            phase: Phase::Prefill,
            batch_id: 0,
            start_ms: 1000.0,
            end_ms: 3000.0,
            features: BatchFeatures::single(1),
            freq_mhz: 1980.0,
            power_w: 300.0,
            energy_j: 600.0,
            members: vec![0],
        };
        let (e, idle) = account_energy(
            std::slice::from_ref(&rec),
            &IdleSchedule::constant(100.0),
            0.0,
            10_000.0,
        )
        .unwrap();
        assert_eq!((e.busy_j, e.idle_j, e.total_j), (600.0, 800.0, 1400.0));
        assert_eq!(idle.len(), 2);
        let mut overlap = rec.clone();
        overlap.start_ms = 2000.0;
        overlap.end_ms = 4000.0;
        assert!(matches!(
            account_energy(&[rec, overlap], &IdleSchedule::constant(1.0), 0.0, 10_000.0),
            Err(Error::Accounting(_))
        ));
    }

    #[test]
    fn cluster_requires_both_phases() {
        let m = models();
        let t = Trace::empty(1000.0);
        let only = [ClusterInstance {
            config: prefill_cfg(),
            weight: 1.0,
        }];
        assert!(matches!(
            simulate_cluster(&t, &only, &SchedulerPolicy::default(), &m, &opts(), None),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn cluster_matches_single_prefill_instance() {
        let m = models();
        let reqs: Vec<Request> = (0..50)
            .map(|i| req(i, i as f64 * 37.0, 200 + (i as u32 * 13) % 300, 8))
            .collect();
        let t = Trace::new(reqs, 2000.0).unwrap();
        let inst = [
            ClusterInstance {
                config: prefill_cfg(),
                weight: 1.0,
            },
            ClusterInstance {
                config: InstanceConfig::new(Phase::Decode, 1, 1980.0),
                weight: 1.0,
            },
        ];
        let policy = SchedulerPolicy::default();
        let c = simulate_cluster(&t, &inst, &policy, &m, &opts(), None).unwrap();
        let single = simulate_instance(&t, &prefill_cfg(), &policy, &m, &opts(), None).unwrap();
        for (a, b) in c.requests.iter().zip(&single.requests) {
            assert_eq!(a.ttft_ms(), b.ttft_ms());
        }
        let sum: f64 = c.instances.iter().map(|i| i.total_energy_j).sum();
        assert!((c.total_energy_j() - sum).abs() < 1e-9);
        assert_eq!(c.completed_requests, 50);
    }

    #[test]
    fn lower_frequency_never_shortens_batches() {
        let fam = SynthFamily::from_name("compute-bound", Phase::Prefill).unwrap();
        let pm = synth_model(&fam, Phase::Prefill, &ladder(), &[1]).unwrap();
        for s in [1u64, 50, 4000] {
            let f = BatchFeatures::single(s);
            let lats: Vec<f64> = ladder()
                .freqs()
                .iter()
                .map(|&fr| predict_latency(&pm.latency, &f, 1, fr))
                .collect();
            assert!(lats.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    struct Flip {
        next: f64,
    }

    impl FrequencyController for Flip {
        fn decide(&mut self, _input: ControlInput<'_>) -> ControlDecision {
            let f = self.next;
            self.next = if f == 990.0 { 1980.0 } else { 990.0 };
            ControlDecision {
                freq_mhz: f,
                predicted_remaining_ms: None,
                feasible: true,
                eval_count: 1,
            }
        }
    }

    #[test]
    fn switch_delay_splits_batch_into_segments() {
        let m = models();
        let t = Trace::new(vec![req(0, 0.0, 2000, 4)], 1000.0).unwrap();
        let mut ctl = Flip { next: 990.0 };
        let r = simulate_instance(
            &t,
            &prefill_cfg(),
            &SchedulerPolicy::default(),
            &m,
            &opts(),
            Some(&mut ctl),
        )
        .unwrap();
        // 30 ms at the old (max) frequency, then the rest at 990 MHz
        assert_eq!(r.batches.len(), 2);
        assert_eq!(r.batches[0].freq_mhz, 1980.0);
        assert!((r.batches[0].duration_ms() - 30.0).abs() < 1e-9);
        assert_eq!(r.batches[1].freq_mhz, 990.0);
        let f = BatchFeatures::single(2000);
        let fast = predict_latency(&m.prefill.latency, &f, 1, 1980.0);
        let slow = predict_latency(&m.prefill.latency, &f, 1, 990.0);
        let expect = 30.0 + (1.0 - 30.0 / fast) * slow;
        assert!((r.requests[0].ttft_ms().unwrap() - expect).abs() < 1e-6);
        assert_eq!(r.control_log.len(), 1);
    }
}
