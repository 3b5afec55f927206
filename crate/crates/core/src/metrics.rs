//! Evaluation metrics over simulation results: steady-state trimming,
//! nearest-rank percentiles, normalised energy and run comparisons.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::perfmodel::Phase;
use crate::placement::SLOSpec;
use crate::simulator::{opt, RequestRecord, SimResult};

/// Requests and energy restricted to `[start_ms, end_ms]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyView {
    pub start_ms: f64,
    pub end_ms: f64,
    pub requests: Vec<RequestRecord>,
    pub prefill_energy_j: f64,
    pub decode_energy_j: f64,
    pub prefill_gpus: u32,
    pub decode_gpus: u32,
}

impl SteadyView {
    pub fn total_energy_j(&self) -> f64 {
        self.prefill_energy_j + self.decode_energy_j
    }

    pub fn span_s(&self) -> f64 {
        (self.end_ms - self.start_ms) / 1000.0
    }
}

fn clipped(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    (b.min(hi) - a.max(lo)).max(0.0)
}

/// Keeps requests that arrived in `[rampup_ms, issue_end_ms)` and integrates
/// busy and idle power over the same interval. `issue_end_ms = None` means
/// the whole simulated span.
pub fn trim_steady_state(
    sim: &SimResult,
    rampup_ms: f64,
    issue_end_ms: Option<f64>,
) -> Result<SteadyView> {
    let end = issue_end_ms.unwrap_or(sim.span_ms).min(sim.span_ms);
    if !(end > rampup_ms) {
        return Err(Error::Parameter(format!(
            "nothing retained: steady window [{rampup_ms}, {end}] is empty"
        )));
    }
    let requests = sim
        .requests
        .iter()
        .filter(|r| r.arrival_ms >= rampup_ms && (r.arrival_ms < end || issue_end_ms.is_none()))
        .cloned()
        .collect();
    let phase_of = |i: usize| {
        sim.instances
            .iter()
            .find(|s| s.instance == i)
            .map(|s| s.config.phase)
    };
    let mut energy = [0.0f64; 2];
    for b in &sim.batches {
        let k = (b.phase == Phase::Decode) as usize;
        energy[k] += b.power_w * clipped(b.start_ms, b.end_ms, rampup_ms, end) / 1000.0;
    }
    for i in &sim.idle {
        let k = (phase_of(i.instance) == Some(Phase::Decode)) as usize;
        energy[k] += i.power_w * clipped(i.start_ms, i.end_ms, rampup_ms, end) / 1000.0;
    }
    Ok(SteadyView {
        start_ms: rampup_ms,
        end_ms: end,
        requests,
        prefill_energy_j: energy[0],
        decode_energy_j: energy[1],
        prefill_gpus: sim.phase_gpus(Phase::Prefill),
        decode_gpus: sim.phase_gpus(Phase::Decode),
    })
}

/// Nearest-rank percentile: the ⌈p·n⌉-th smallest value.
pub fn nearest_rank(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(p > 0.0 && p <= 1.0) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[nearest_rank_index(v.len(), p)])
}

/// Zero-based index of the nearest-rank element among `n` sorted values.
pub fn nearest_rank_index(n: usize, p: f64) -> usize {
    // the small slack keeps e.g. 0.99·100 from rounding up to rank 100
    let rank = (p * n as f64 - 1e-9).ceil().max(1.0) as usize;
    rank.min(n) - 1
}

pub fn p99_ttft(requests: &[RequestRecord]) -> Option<f64> {
    percentile_ttft(requests, 0.99)
}

pub fn percentile_ttft(requests: &[RequestRecord], p: f64) -> Option<f64> {
    let v: Vec<f64> = requests.iter().filter_map(|r| r.ttft_ms()).collect();
    nearest_rank(&v, p)
}

pub fn p99_mean_tpot(requests: &[RequestRecord]) -> Option<f64> {
    percentile_mean_tpot(requests, 0.99)
}

pub fn percentile_mean_tpot(requests: &[RequestRecord], p: f64) -> Option<f64> {
    let v: Vec<f64> = requests.iter().filter_map(|r| r.tpot_ms()).collect();
    nearest_rank(&v, p)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub window: usize,
    pub system: String,
    pub requests: u64,
    pub p99_ttft_ms: Option<f64>,
    pub p99_mean_tpot_ms: Option<f64>,
    pub prefill_energy_j: f64,
    pub decode_energy_j: f64,
    /// Prefill energy per completed prefill.
    pub energy_per_first_token_j: Option<f64>,
    /// Decode energy per generated token.
    pub energy_per_output_token_j: Option<f64>,
    pub avg_power_prefill_w: f64,
    pub avg_power_decode_w: f64,
    pub slo_violations: u64,
    pub ttft_slo_pass: bool,
    pub tpot_slo_pass: bool,
}

impl MetricsReport {
    pub fn total_energy_j(&self) -> f64 {
        self.prefill_energy_j + self.decode_energy_j
    }

    pub fn slo_pass(&self) -> bool {
        self.ttft_slo_pass && self.tpot_slo_pass
    }
}

pub fn build_report(
    view: &SteadyView,
    slo: &SLOSpec,
    window: usize,
    system: &str,
) -> MetricsReport {
    let reqs = &view.requests;
    let p99_ttft_ms = percentile_ttft(reqs, slo.percentile);
    let p99_mean_tpot_ms = percentile_mean_tpot(reqs, slo.percentile);
    let prefilled = reqs.iter().filter(|r| r.prefill_done_ms.is_some()).count();
    let tokens: usize = reqs.iter().map(|r| r.token_times_ms.len()).sum();
    let slo_violations = reqs
        .iter()
        .filter(|r| {
            r.ttft_ms().is_some_and(|t| t > slo.ttft_ms)
                || r.tpot_ms().is_some_and(|t| t > slo.tpot_ms)
        })
        .count() as u64;
    let span = view.span_s();
    MetricsReport {
        window,
        system: system.to_string(),
        requests: reqs.len() as u64,
        p99_ttft_ms,
        p99_mean_tpot_ms,
        prefill_energy_j: view.prefill_energy_j,
        decode_energy_j: view.decode_energy_j,
        energy_per_first_token_j: (prefilled > 0).then(|| view.prefill_energy_j / prefilled as f64),
        energy_per_output_token_j: (tokens > 0).then(|| view.decode_energy_j / tokens as f64),
        avg_power_prefill_w: view.prefill_energy_j / span,
        avg_power_decode_w: view.decode_energy_j / span,
        slo_violations,
        ttft_slo_pass: p99_ttft_ms.is_none_or(|v| v <= slo.ttft_ms),
        tpot_slo_pass: p99_mean_tpot_ms.is_none_or(|v| v <= slo.tpot_ms),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub window: usize,
    pub system: String,
    pub baseline: String,
    pub prefill_delta_pct: Option<f64>,
    pub decode_delta_pct: Option<f64>,
    pub total_delta_pct: Option<f64>,
    pub slo_pass: bool,
}

pub fn pct_delta(value: f64, baseline: f64) -> Option<f64> {
    (baseline != 0.0).then(|| 100.0 * (value - baseline) / baseline)
}

/// Energy deltas of every report against the one labelled `baseline`.
pub fn compare_runs(reports: &[MetricsReport], baseline: &str) -> Result<Vec<ComparisonRow>> {
    if reports.len() < 2 {
        return Err(Error::Comparison("need at least two reports".into()));
    }
    let window = reports[0].window;
    if reports.iter().any(|r| r.window != window) {
        return Err(Error::Comparison(
            "reports come from different windows".into(),
        ));
    }
    let base = reports
        .iter()
        .find(|r| r.system == baseline)
        .ok_or_else(|| Error::Comparison(format!("no report for baseline {baseline}")))?;
    let d = |a: Option<f64>, b: Option<f64>| a.zip(b).and_then(|(a, b)| pct_delta(a, b));
    Ok(reports
        .iter()
        .map(|r| ComparisonRow {
            window,
            system: r.system.clone(),
            baseline: baseline.to_string(),
            prefill_delta_pct: d(r.energy_per_first_token_j, base.energy_per_first_token_j),
            decode_delta_pct: d(r.energy_per_output_token_j, base.energy_per_output_token_j),
            total_delta_pct: pct_delta(r.total_energy_j(), base.total_energy_j()),
            slo_pass: r.slo_pass(),
        })
        .collect())
}

/// Column order of [`write_reports_csv`].
pub const REPORT_COLUMNS: [&str; 12] = [
    "window",
    "system",
    "phase",
    "requests",
    "p99_ttft_ms",
    "p99_mean_tpot_ms",
    "energy_j",
    "energy_per_unit_j",
    "avg_power_w",
    "slo_violations",
    "ttft_slo_pass",
    "tpot_slo_pass",
];

/// One row per (window, system, phase); `energy_per_unit_j` is per first
/// token on prefill rows and per output token on decode rows.
pub fn write_reports_csv<W: Write>(reports: &[MetricsReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_COLUMNS)?;
    for r in reports {
        for phase in [Phase::Prefill, Phase::Decode] {
            let (e, unit, p) = match phase {
                Phase::Prefill => (
                    r.prefill_energy_j,
                    r.energy_per_first_token_j,
                    r.avg_power_prefill_w,
                ),
                Phase::Decode => (
                    r.decode_energy_j,
                    r.energy_per_output_token_j,
                    r.avg_power_decode_w,
                ),
            };
            out.write_record([
                r.window.to_string(),
                r.system.clone(),
                phase.to_string(),
                r.requests.to_string(),
                opt(r.p99_ttft_ms),
                opt(r.p99_mean_tpot_ms),
                e.to_string(),
                opt(unit),
                p.to_string(),
                r.slo_violations.to_string(),
                r.ttft_slo_pass.to_string(),
                r.tpot_slo_pass.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, arrival: f64, ttft: f64, tokens: &[f64]) -> RequestRecord {
        RequestRecord {
            id,
            arrival_ms: arrival,
            input_len: 10,
            output_len: tokens.len() as u32,
            prefill_instance: Some(0),
            prefill_done_ms: Some(arrival + ttft),
            decode_instance: Some(1),
            decode_enqueue_ms: Some(arrival + ttft),
            decode_start_ms: tokens.first().copied(),
            token_times_ms: tokens.to_vec(),
        }
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(nearest_rank(&[500.0; 100], 0.99), Some(500.0));
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.99), Some(99.0));
        assert_eq!(nearest_rank(&[7.0], 0.99), Some(7.0));
        assert_eq!(nearest_rank(&[], 0.99), None);
    }

    #[test]
    fn tpot_mean_of_gaps() {
        let r = rec(0, 0.0, 5.0, &[10.0, 20.0, 50.0]);
        assert_eq!(r.tpot_ms(), Some(20.0));
        assert_eq!(p99_mean_tpot(&[r]), Some(20.0));
        assert_eq!(p99_mean_tpot(&[rec(1, 0.0, 5.0, &[10.0])]), None);
    }

    #[test]
    fn comparison_arithmetic() {
        let mk = |sys: &str, e: f64| MetricsReport {
            window: 0,
            system: sys.into(),
            requests: 1,
            p99_ttft_ms: Some(1.0),
            p99_mean_tpot_ms: Some(1.0),
            prefill_energy_j: e,
            decode_energy_j: e,
            energy_per_first_token_j: Some(e),
            energy_per_output_token_j: Some(e),
            avg_power_prefill_w: 1.0,
            avg_power_decode_w: 1.0,
            slo_violations: 0,
            ttft_slo_pass: true,
            tpot_slo_pass: true,
        };
        let rows = compare_runs(&[mk("base", 100.0), mk("new", 61.0)], "base").unwrap();
        assert_eq!(rows[0].prefill_delta_pct, Some(0.0));
        assert!((rows[1].prefill_delta_pct.unwrap() + 39.0).abs() < 1e-12);
        let mut other = mk("x", 1.0);
        other.window = 3;
        assert!(matches!(
            compare_runs(&[mk("base", 1.0), other], "base"),
            Err(Error::Comparison(_))
        ));
    }
}
