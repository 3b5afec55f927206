//! Coarse-grained provisioning: measure each candidate configuration's
//! SLO-feasible goodput and energy per request by simulation, then choose
//! integer instance counts that minimise energy under GPU and goodput
//! constraints.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{param_err, Error, Result};
use crate::perfmodel::{FrequencyLadder, ModelSet, Phase};
use crate::simulator::{
    simulate_instance, ClusterInstance, InstanceConfig, SchedulerPolicy, SimOptions, SimResult,
};
use crate::workload::{downsample_trace, predict_next_window, superpose_shifted, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SLOSpec {
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    pub percentile: f64,
}

impl Default for SLOSpec {
    fn default() -> Self {
        SLOSpec {
            ttft_ms: 600.0,
            tpot_ms: 100.0,
            percentile: 0.99,
        }
    }
}

impl SLOSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ttft_ms > 0.0 && self.tpot_ms > 0.0) {
            return Err(param_err("SLO bounds must be > 0"));
        }
        if !(self.percentile > 0.0 && self.percentile <= 1.0) {
            return Err(param_err("SLO percentile must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Binary-search settings for [`max_goodput`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoodputSearch {
    /// Smallest keep probability probed.
    pub min_keep: f64,
    /// Stop once the bracket is narrower than this many requests/s.
    pub tolerance_rps: f64,
    /// Down-sampling seed shared by every probe, so kept sets nest.
    pub seed: u64,
}

impl Default for GoodputSearch {
    fn default() -> Self {
        GoodputSearch {
            min_keep: 1.0 / 1024.0,
            tolerance_rps: 0.05,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoodputResult {
    pub r_c: f64,
    pub keep_prob: f64,
    /// Number of simulations run.
    pub probes: u32,
    /// True when even the full base trace was feasible.
    pub hit_upper_bound: bool,
}

/// Every request meets its bound: TTFT on prefill, each inter-token gap on
/// decode.
pub fn slo_satisfied(sim: &SimResult, phase: Phase, slo: &SLOSpec) -> bool {
    match phase {
        Phase::Prefill => sim
            .requests
            .iter()
            .all(|r| r.ttft_ms().is_some_and(|t| t <= slo.ttft_ms)),
        Phase::Decode => sim
            .requests
            .iter()
            .all(|r| r.decode_complete() && r.max_tbt_ms().is_none_or(|g| g <= slo.tpot_ms)),
    }
}

/// Rate of `base` in requests/s that a keep probability maps to.
pub fn keep_to_rps(base: &Trace, keep: f64) -> f64 {
    keep * base.mean_rps()
}

pub struct GoodputContext<'a> {
    pub base_trace: &'a Trace,
    pub slo: &'a SLOSpec,
    pub models: &'a ModelSet,
    pub policy: &'a SchedulerPolicy,
    pub opts: &'a SimOptions,
    pub search: &'a GoodputSearch,
}

impl GoodputContext<'_> {
    pub fn probe(&self, cfg: &InstanceConfig, keep: f64) -> Result<(bool, SimResult)> {
        let t = downsample_trace(self.base_trace, keep.min(1.0), self.search.seed)?;
        let sim = simulate_instance(&t, cfg, self.policy, self.models, self.opts, None)?;
        Ok((slo_satisfied(&sim, cfg.phase, self.slo), sim))
    }
}

/// Highest SLO-feasible rate of `cfg` at its fixed frequency, found by
/// bisecting the keep probability of the base trace. The result `r_c` is
/// feasible and `r_c + tolerance` is not (unless the full trace is feasible).
pub fn max_goodput(cfg: &InstanceConfig, ctx: &GoodputContext<'_>) -> Result<GoodputResult> {
    let base = ctx.base_trace;
    if base.is_empty() {
        return Err(param_err("goodput search needs a non-empty base trace"));
    }
    let s = ctx.search;
    if !(s.min_keep > 0.0 && s.min_keep <= 1.0 && s.tolerance_rps > 0.0) {
        return Err(param_err("invalid goodput search settings"));
    }
    let base_rps = base.mean_rps();
    let mut probes = 0u32;
    let mut check = |keep: f64| -> Result<bool> {
        probes += 1;
        Ok(ctx.probe(cfg, keep)?.0)
    };
    if check(1.0)? {
        return Ok(GoodputResult {
            r_c: base_rps,
            keep_prob: 1.0,
            probes,
            hit_upper_bound: true,
        });
    }
    if !check(s.min_keep)? {
        return Ok(GoodputResult {
            r_c: 0.0,
            keep_prob: 0.0,
            probes,
            hit_upper_bound: false,
        });
    }
    let step = s.tolerance_rps / base_rps;
    let (mut lo, mut hi) = (s.min_keep, 1.0);
    while hi - lo > step {
        let mid = 0.5 * (lo + hi);
        if check(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // feasibility need not be monotone in the keep probability; walk up
    // until the next tolerance step fails
    while lo + step < 1.0 && check(lo + step)? {
        lo += step;
    }
    Ok(GoodputResult {
        r_c: lo * base_rps,
        keep_prob: lo,
        probes,
        hit_upper_bound: false,
    })
}

/// Energy per completed request: busy plus idle energy on prefill, busy
/// energy only on decode. `None` when nothing completed.
pub fn energy_per_request(sim: &SimResult) -> Option<f64> {
    if sim.completed_requests == 0 {
        return None;
    }
    let e: f64 = sim
        .instances
        .iter()
        .map(|i| match i.config.phase {
            Phase::Prefill => i.busy_energy_j + i.idle_energy_j,
            Phase::Decode => i.busy_energy_j,
        })
        .sum();
    Some(e / sim.completed_requests as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigTableEntry {
    pub config: InstanceConfig,
    /// Max SLO-feasible goodput, requests/s.
    pub r_c: f64,
    /// Joules per request at `r_c`.
    pub e_c: Option<f64>,
    pub g_c: u32,
    pub keep_prob: f64,
    #[serde(default)]
    pub error: Option<String>,
}

impl ConfigTableEntry {
    pub fn usable(&self) -> bool {
        self.error.is_none() && self.r_c > 0.0 && self.e_c.is_some_and(|e| e > 0.0)
    }

    pub fn new(config: InstanceConfig, r_c: f64, e_c: f64) -> Self {
        ConfigTableEntry {
            config,
            r_c,
            e_c: Some(e_c),
            g_c: config.tp,
            keep_prob: 0.0,
            error: None,
        }
    }
}

fn table_entry(cfg: &InstanceConfig, ctx: &GoodputContext<'_>) -> Result<ConfigTableEntry> {
    let g = max_goodput(cfg, ctx)?;
    let e_c = if g.r_c > 0.0 {
        let (_, sim) = ctx.probe(cfg, g.keep_prob)?;
        energy_per_request(&sim)
    } else {
        None
    };
    Ok(ConfigTableEntry {
        config: *cfg,
        r_c: g.r_c,
        e_c,
        g_c: cfg.tp,
        keep_prob: g.keep_prob,
        error: None,
    })
}

/// Measures every candidate (in parallel). Candidates whose models are
/// missing come back as entries carrying the error.
pub fn build_config_table(
    candidates: &[InstanceConfig],
    ctx: &GoodputContext<'_>,
) -> Result<Vec<ConfigTableEntry>> {
    if candidates.is_empty() {
        return Err(param_err("no candidate configurations"));
    }
    ctx.slo.validate()?;
    candidates
        .par_iter()
        .map(|cfg| match table_entry(cfg, ctx) {
            Ok(e) => Ok(e),
            Err(err @ (Error::Model(_) | Error::Parameter(_))) => Ok(ConfigTableEntry {
                config: *cfg,
                r_c: 0.0,
                e_c: None,
                g_c: cfg.tp,
                keep_prob: 0.0,
                error: Some(err.to_string()),
            }),
            Err(e) => Err(e),
        })
        .collect()
}

/// Every (phase, tp, frequency) combination.
pub fn enumerate_candidates(tp_options: &[u32], ladder: &FrequencyLadder) -> Vec<InstanceConfig> {
    let mut out = Vec::new();
    for phase in [Phase::Prefill, Phase::Decode] {
        for &tp in tp_options {
            for &f in ladder.freqs() {
                out.push(InstanceConfig::new(phase, tp, f));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementProblem {
    pub table: Vec<ConfigTableEntry>,
    /// GPUs available.
    pub g: u32,
    /// Target goodput, requests/s.
    pub r: f64,
    pub alpha: f64,
}

impl PlacementProblem {
    pub fn validate(&self) -> Result<()> {
        if self.g == 0 || !(self.r > 0.0) || !(self.alpha >= 0.0) {
            return Err(param_err("placement needs G >= 1, R > 0, alpha >= 0"));
        }
        Ok(())
    }

    pub fn required(&self) -> f64 {
        (1.0 + self.alpha) * self.r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannedInstance {
    pub phase: Phase,
    pub tp: u32,
    pub freq_mhz: f64,
    pub weight: f64,
    pub r_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub counts: Vec<u32>,
    pub table: Vec<ConfigTableEntry>,
    pub instances: Vec<PlannedInstance>,
    /// Σ n_c·E_c·R_c, watts.
    pub objective: f64,
    pub gpus_used: u32,
    pub g: u32,
    pub r: f64,
    pub alpha: f64,
    pub prefill_capacity: f64,
    pub decode_capacity: f64,
}

impl PlacementPlan {
    fn from_counts(p: &PlacementProblem, counts: Vec<u32>) -> Self {
        let weights = derive_routing_weights(&counts, &p.table);
        let mut instances = Vec::new();
        for (c, e) in p.table.iter().enumerate() {
            for _ in 0..counts[c] {
                instances.push(PlannedInstance {
                    phase: e.config.phase,
                    tp: e.config.tp,
                    freq_mhz: e.config.base_freq_mhz,
                    weight: weights[instances.len()],
                    r_c: e.r_c,
                });
            }
        }
        let cap = |ph: Phase| {
            p.table
                .iter()
                .zip(&counts)
                .filter(|(e, _)| e.config.phase == ph)
                .map(|(e, &n)| n as f64 * e.r_c)
                .sum()
        };
        PlacementPlan {
            objective: plan_objective(&p.table, &counts),
            gpus_used: p.table.iter().zip(&counts).map(|(e, &n)| n * e.g_c).sum(),
            prefill_capacity: cap(Phase::Prefill),
            decode_capacity: cap(Phase::Decode),
            counts,
            table: p.table.clone(),
            instances,
            g: p.g,
            r: p.r,
            alpha: p.alpha,
        }
    }

    pub fn cluster(&self) -> Vec<ClusterInstance> {
        self.instances
            .iter()
            .map(|i| ClusterInstance {
                config: InstanceConfig::new(i.phase, i.tp, i.freq_mhz),
                weight: i.weight,
            })
            .collect()
    }

    /// Restates the constraints on the plan itself.
    pub fn check(&self) -> Result<()> {
        let need = (1.0 + self.alpha) * self.r;
        if self.gpus_used > self.g {
            return Err(Error::Infeasible(format!(
                "GPU capacity: plan uses {} of {} GPUs",
                self.gpus_used, self.g
            )));
        }
        if self.prefill_capacity < need {
            return Err(Error::Infeasible("prefill goodput below target".into()));
        }
        if self.decode_capacity < need {
            return Err(Error::Infeasible("decode goodput below target".into()));
        }
        for ph in [Phase::Prefill, Phase::Decode] {
            let s: f64 = self
                .instances
                .iter()
                .filter(|i| i.phase == ph)
                .map(|i| i.weight)
                .sum();
            if (s - 1.0).abs() > 1e-9 || self.instances.iter().any(|i| !(i.weight > 0.0)) {
                return Err(Error::Configuration(format!(
                    "{ph} routing weights do not sum to 1"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let plan: PlacementPlan = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        plan.check()?;
        Ok(plan)
    }
}

/// Σ n_c·E_c·R_c over usable entries.
pub fn plan_objective(table: &[ConfigTableEntry], counts: &[u32]) -> f64 {
    let mut obj = 0.0;
    for (e, &n) in table.iter().zip(counts) {
        if n > 0 {
            obj += n as f64 * e.e_c.unwrap_or(0.0) * e.r_c;
        }
    }
    obj
}

/// Per-instance weights (instances expanded in table order), each phase
/// proportional to R_c and summing to 1.
pub fn derive_routing_weights(counts: &[u32], table: &[ConfigTableEntry]) -> Vec<f64> {
    let total = |ph: Phase| -> f64 {
        table
            .iter()
            .zip(counts)
            .filter(|(e, _)| e.config.phase == ph)
            .map(|(e, &n)| n as f64 * e.r_c)
            .sum()
    };
    let (tp, td) = (total(Phase::Prefill), total(Phase::Decode));
    let mut out = Vec::new();
    for (e, &n) in table.iter().zip(counts) {
        let t = match e.config.phase {
            Phase::Prefill => tp,
            Phase::Decode => td,
        };
        for _ in 0..n {
            out.push(e.r_c / t);
        }
    }
    out
}

/// Largest capacity reachable per GPU budget (unbounded knapsack), for
/// diagnosing infeasibility.
fn phase_capacity_curve(table: &[ConfigTableEntry], phase: Phase, g: u32) -> Vec<f64> {
    let mut best = vec![0.0f64; g as usize + 1];
    for b in 1..=g as usize {
        best[b] = best[b - 1];
        for e in table
            .iter()
            .filter(|e| e.usable() && e.config.phase == phase)
        {
            let gc = e.g_c as usize;
            if gc <= b {
                best[b] = best[b].max(best[b - gc] + e.r_c);
            }
        }
    }
    best
}

fn infeasibility(p: &PlacementProblem) -> Error {
    let need = p.required();
    let pc = phase_capacity_curve(&p.table, Phase::Prefill, p.g);
    let dc = phase_capacity_curve(&p.table, Phase::Decode, p.g);
    let g = p.g as usize;
    if pc[g] < need {
        return Error::Infeasible(format!(
            "prefill goodput: at most {:.3} req/s with all {} GPUs, need {:.3}",
            pc[g], p.g, need
        ));
    }
    if dc[g] < need {
        return Error::Infeasible(format!(
            "decode goodput: at most {:.3} req/s with all {} GPUs, need {:.3}",
            dc[g], p.g, need
        ));
    }
    let gp = pc.iter().position(|&c| c >= need).unwrap_or(g);
    let gd = dc.iter().position(|&c| c >= need).unwrap_or(g);
    Error::Infeasible(format!(
        "GPU capacity: prefill needs {gp} GPUs and decode needs {gd}, only {} available",
        p.g
    ))
}

struct Bnb<'a> {
    p: &'a PlacementProblem,
    idx: Vec<usize>,
    need: f64,
    /// Per position in `idx`: cheapest E_c and best R_c/G_c among entries at
    /// or after it, per phase.
    min_e: Vec<[f64; 2]>,
    max_density: Vec<[f64; 2]>,
    counts: Vec<u32>,
    best: Option<(Vec<u32>, f64)>,
    nodes: u64,
}

fn ph(phase: Phase) -> usize {
    match phase {
        Phase::Prefill => 0,
        Phase::Decode => 1,
    }
}

impl Bnb<'_> {
    fn dfs(&mut self, pos: usize, gpus: u32, cap: [f64; 2], partial: f64) {
        self.nodes += 1;
        let short = [(self.need - cap[0]).max(0.0), (self.need - cap[1]).max(0.0)];
        if pos == self.idx.len() {
            if short[0] > 0.0 || short[1] > 0.0 {
                return;
            }
            let obj = plan_objective(&self.p.table, &self.counts);
            if self.best.as_ref().is_none_or(|(_, b)| obj < *b) {
                self.best = Some((self.counts.clone(), obj));
            }
            return;
        }
        // fractional covering bound, GPU budget relaxed
        let mut lb = partial;
        let mut gpu_lb = gpus as f64;
        for (k, &s) in short.iter().enumerate() {
            if s > 0.0 {
                if !self.min_e[pos][k].is_finite() {
                    return;
                }
                lb += s * self.min_e[pos][k];
                gpu_lb += s / self.max_density[pos][k];
            }
        }
        if gpu_lb > self.p.g as f64 * (1.0 + 1e-12) {
            return;
        }
        if let Some((_, b)) = &self.best {
            if lb > *b + 1e-9 * b.abs().max(1.0) {
                return;
            }
        }
        let c = self.idx[pos];
        let e = &self.p.table[c];
        let k = ph(e.config.phase);
        let max_n = (self.p.g - gpus) / e.g_c;
        let term = e.e_c.unwrap() * e.r_c;
        for n in 0..=max_n {
            self.counts[c] = n;
            let mut cap2 = cap;
            cap2[k] += n as f64 * e.r_c;
            self.dfs(pos + 1, gpus + n * e.g_c, cap2, partial + n as f64 * term);
        }
        self.counts[c] = 0;
    }
}

/// Exact minimum of Σ n_c·E_c·R_c subject to the GPU budget and both phase
/// goodput floors, by depth-first branch-and-bound in table order. Among
/// equal optima the lexicographically smallest count vector wins.
pub fn solve_placement(p: &PlacementProblem) -> Result<PlacementPlan> {
    p.validate()?;
    let idx: Vec<usize> = (0..p.table.len())
        .filter(|&c| p.table[c].usable())
        .collect();
    for phase in [Phase::Prefill, Phase::Decode] {
        if !idx.iter().any(|&c| p.table[c].config.phase == phase) {
            return Err(Error::Infeasible(format!(
                "{phase} goodput: no usable {phase} configuration"
            )));
        }
    }
    let mut min_e = vec![[f64::INFINITY; 2]; idx.len() + 1];
    let mut max_density = vec![[0.0f64; 2]; idx.len() + 1];
    for pos in (0..idx.len()).rev() {
        let e = &p.table[idx[pos]];
        let k = ph(e.config.phase);
        min_e[pos] = min_e[pos + 1];
        max_density[pos] = max_density[pos + 1];
        min_e[pos][k] = min_e[pos][k].min(e.e_c.unwrap());
        max_density[pos][k] = max_density[pos][k].max(e.r_c / e.g_c as f64);
    }
    let mut bnb = Bnb {
        p,
        idx,
        need: p.required(),
        min_e,
        max_density,
        counts: vec![0; p.table.len()],
        best: None,
        nodes: 0,
    };
    bnb.dfs(0, 0, [0.0, 0.0], 0.0);
    match bnb.best {
        Some((counts, _)) => Ok(PlacementPlan::from_counts(p, counts)),
        None => Err(infeasibility(p)),
    }
}

/// Brute-force optimum over every count vector with n_c ≤ ⌊G/G_c⌋; usable
/// as an oracle on small problems.
pub fn enumerate_placement(p: &PlacementProblem) -> Option<(Vec<u32>, f64)> {
    let need = p.required();
    let ub: Vec<u32> = p
        .table
        .iter()
        .map(|e| if e.usable() { p.g / e.g_c } else { 0 })
        .collect();
    let mut counts = vec![0u32; p.table.len()];
    let mut best: Option<(Vec<u32>, f64)> = None;
    loop {
        let gpus: u32 = p.table.iter().zip(&counts).map(|(e, &n)| n * e.g_c).sum();
        if gpus <= p.g {
            let mut cap = [0.0; 2];
            for (e, &n) in p.table.iter().zip(&counts) {
                cap[ph(e.config.phase)] += n as f64 * e.r_c;
            }
            if cap[0] >= need && cap[1] >= need {
                let obj = plan_objective(&p.table, &counts);
                if best.as_ref().is_none_or(|(_, b)| obj < *b) {
                    best = Some((counts.clone(), obj));
                }
            }
        }
        // odometer, last index fastest so vectors come out lexicographically
        let mut i = counts.len();
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if counts[i] < ub[i] {
                counts[i] += 1;
                break;
            }
            counts[i] = 0;
        }
    }
}

/// Max-frequency baseline: per phase, the fewest GPUs that reach the
/// goodput target using only ladder-max entries, ties to more capacity.
pub fn solve_max_freq_baseline(p: &PlacementProblem, max_freq_mhz: f64) -> Result<PlacementPlan> {
    p.validate()?;
    let need = p.required();
    let mut counts = vec![0u32; p.table.len()];
    let mut gpus_total = 0;
    for phase in [Phase::Prefill, Phase::Decode] {
        let idx: Vec<usize> = (0..p.table.len())
            .filter(|&c| {
                let e = &p.table[c];
                e.usable() && e.config.phase == phase && e.config.base_freq_mhz == max_freq_mhz
            })
            .collect();
        if idx.is_empty() {
            return Err(Error::Infeasible(format!(
                "{phase} goodput: no usable max-frequency {phase} configuration"
            )));
        }
        let mut best: Option<(Vec<u32>, u32, f64)> = None;
        let mut cur = vec![0u32; idx.len()];
        fn rec(
            p: &PlacementProblem,
            idx: &[usize],
            pos: usize,
            gpus: u32,
            cap: f64,
            need: f64,
            cur: &mut Vec<u32>,
            best: &mut Option<(Vec<u32>, u32, f64)>,
        ) {
            if pos == idx.len() {
                if cap >= need {
                    let better = match best {
                        None => true,
                        Some((_, bg, bc)) => gpus < *bg || (gpus == *bg && cap > *bc),
                    };
                    if better {
                        *best = Some((cur.clone(), gpus, cap));
                    }
                }
                return;
            }
            let e = &p.table[idx[pos]];
            for n in 0..=(p.g - gpus) / e.g_c {
                cur[pos] = n;
                rec(
                    p,
                    idx,
                    pos + 1,
                    gpus + n * e.g_c,
                    cap + n as f64 * e.r_c,
                    need,
                    cur,
                    best,
                );
            }
            cur[pos] = 0;
        }
        rec(p, &idx, 0, 0, 0.0, need, &mut cur, &mut best);
        let Some((c, g, _)) = best else {
            return Err(infeasibility(p));
        };
        gpus_total += g;
        for (k, &i) in idx.iter().enumerate() {
            counts[i] = c[k];
        }
    }
    if gpus_total > p.g {
        return Err(infeasibility(p));
    }
    Ok(PlacementPlan::from_counts(p, counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMode {
    /// Energy-minimising plan over every ladder frequency.
    Energy,
    /// Fewest GPUs at the highest frequency.
    MaxFreq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSettings {
    pub gpus: u32,
    pub slo: SLOSpec,
    pub alpha: f64,
    pub tp_options: Vec<u32>,
    /// Sub-window over which the peak request rate is taken.
    pub peak_window_ms: f64,
    /// Shifted copies of the predicted window superposed to form the
    /// goodput-search base trace.
    pub base_multiplier: u32,
    pub search: GoodputSearch,
}

impl Default for PlanSettings {
    fn default() -> Self {
        PlanSettings {
            gpus: 16,
            slo: SLOSpec::default(),
            alpha: 0.05,
            tp_options: vec![1, 2, 4],
            peak_window_ms: 10_000.0,
            base_multiplier: 4,
            search: GoodputSearch::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub plan: PlacementPlan,
    pub target_rps: f64,
    pub table_cache_key: String,
}

/// Stable hash of everything a configuration table depends on.
pub fn table_cache_key(
    models: &ModelSet,
    base: &Trace,
    settings: &PlanSettings,
    candidates: &[InstanceConfig],
    policy: &SchedulerPolicy,
    opts: &SimOptions,
) -> Result<String> {
    let mut h = Sha256::new();
    h.update(models.digest()?.as_bytes());
    for r in &base.requests {
        h.update(r.arrival_ms.to_le_bytes());
        h.update(r.input_len.to_le_bytes());
        h.update(r.output_len.to_le_bytes());
    }
    h.update(base.duration_ms.to_le_bytes());
    h.update(serde_json::to_vec(&(
        settings.slo,
        settings.search,
        candidates,
        policy,
        opts,
    ))?);
    Ok(hex::encode(h.finalize()))
}

/// Builds (or loads from `cache_dir`) the table for the window following
/// `history`, then solves it.
pub fn plan_window(
    history: &Trace,
    settings: &PlanSettings,
    models: &ModelSet,
    policy: &SchedulerPolicy,
    opts: &SimOptions,
    mode: PlanMode,
    cache_dir: Option<&Path>,
) -> Result<WindowPlan> {
    let predicted = predict_next_window(history)?;
    if predicted.is_empty() {
        return Err(param_err("history window has no requests"));
    }
    let target_rps = predicted.peak_rps(settings.peak_window_ms);
    let base = superpose_shifted(&predicted, settings.base_multiplier)?;
    let ladder = match mode {
        PlanMode::Energy => opts.ladder.clone(),
        PlanMode::MaxFreq => FrequencyLadder::new(vec![opts.ladder.max()])?,
    };
    let candidates = enumerate_candidates(&settings.tp_options, &ladder);
    let key = table_cache_key(models, &base, settings, &candidates, policy, opts)?;
    let cache_file = cache_dir.map(|d| d.join(format!("table-{}.json", &key[..16])));
    let table = match cache_file.as_ref().filter(|f| f.exists()) {
        Some(f) => serde_json::from_str(&std::fs::read_to_string(f)?)?,
        None => {
            let ctx = GoodputContext {
                base_trace: &base,
                slo: &settings.slo,
                models,
                policy,
                opts,
                search: &settings.search,
            };
            let t = build_config_table(&candidates, &ctx)?;
            if let Some(f) = &cache_file {
                if let Some(d) = f.parent() {
                    std::fs::create_dir_all(d)?;
                }
                std::fs::write(f, serde_json::to_string_pretty(&t)?)?;
            }
            t
        }
    };
    let problem = PlacementProblem {
        table,
        g: settings.gpus,
        r: target_rps,
        alpha: settings.alpha,
    };
    let plan = match mode {
        PlanMode::Energy => solve_placement(&problem)?,
        PlanMode::MaxFreq => solve_max_freq_baseline(&problem, opts.ladder.max())?,
    };
    Ok(WindowPlan {
        plan,
        target_rps,
        table_cache_key: key,
    })
}
