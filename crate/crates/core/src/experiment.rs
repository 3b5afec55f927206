//! Windowed experiments: split a trace into provisioning windows, plan each
//! window under every policy, simulate the cluster and report metrics.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dvfs::{DecodeController, DecodePolicyConfig, MpcConfig, MpcController};
use crate::error::{param_err, Error, Result};
use crate::metrics::{
    build_report, compare_runs, trim_steady_state, write_reports_csv, MetricsReport,
};
use crate::perfmodel::{FrequencyLadder, ModelSet, Phase};
use crate::placement::{plan_window, GoodputSearch, PlanMode, PlanSettings, SLOSpec, WindowPlan};
use crate::simulator::{
    simulate_cluster, FrequencyController, InstanceConfig, SchedulerPolicy, SimOptions, SimResult,
};
use crate::workload::{gen_gamma_trace, read_trace, split_windows, LengthDistribution, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Fewest GPUs at max frequency, no frequency control.
    MaxfreqDistserve,
    /// Energy-optimal placement, frequencies fixed per instance.
    PlaceOnly,
    /// Energy-optimal placement plus per-iteration control.
    TwoTier,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::MaxfreqDistserve => "maxfreq-distserve",
            PolicyKind::PlaceOnly => "place-only",
            PolicyKind::TwoTier => "two-tier",
        }
    }

    pub fn plan_mode(self) -> PlanMode {
        match self {
            PolicyKind::MaxfreqDistserve => PlanMode::MaxFreq,
            _ => PlanMode::Energy,
        }
    }

    pub fn all() -> [PolicyKind; 3] {
        [
            PolicyKind::MaxfreqDistserve,
            PolicyKind::PlaceOnly,
            PolicyKind::TwoTier,
        ]
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::all()
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| param_err(format!("unknown policy '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TraceSource {
    Gamma {
        mean_rps: f64,
        #[serde(default = "default_shape")]
        shape: f64,
        duration_ms: f64,
        lengths: LengthDistribution,
    },
    File {
        path: PathBuf,
    },
}

fn default_shape() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSource {
    Synthetic {
        prefill_family: String,
        decode_family: String,
    },
    Dir {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSettings {
    pub switch_latency_ms: f64,
    pub safety_margin: f64,
    pub kv_tokens_per_gpu: u64,
    pub kv_threshold: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        let o = SimOptions::default();
        SimSettings {
            switch_latency_ms: o.switch_latency_ms,
            safety_margin: o.safety_margin,
            kv_tokens_per_gpu: o.kv_tokens_per_gpu,
            kv_threshold: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcSettings {
    pub horizon_k: usize,
    pub ladder_n: usize,
    pub margin: f64,
}

impl Default for MpcSettings {
    fn default() -> Self {
        let m = MpcConfig::default();
        MpcSettings {
            horizon_k: m.horizon_k,
            ladder_n: m.ladder_n,
            margin: m.margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanKnobs {
    pub alpha: f64,
    pub peak_window_ms: f64,
    pub base_multiplier: u32,
    pub search: GoodputSearch,
}

impl Default for PlanKnobs {
    fn default() -> Self {
        let p = PlanSettings::default();
        PlanKnobs {
            alpha: p.alpha,
            peak_window_ms: p.peak_window_ms,
            base_multiplier: p.base_multiplier,
            search: p.search,
        }
    }
}

fn default_window_ms() -> f64 {
    300_000.0
}

fn default_rampup_ms() -> f64 {
    30_000.0
}

fn default_policies() -> Vec<PolicyKind> {
    PolicyKind::all().to_vec()
}

fn default_tp() -> Vec<u32> {
    vec![1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub gpus: u32,
    pub trace: TraceSource,
    pub models: ModelSource,
    #[serde(default = "default_window_ms")]
    pub window_ms: f64,
    #[serde(default = "default_rampup_ms")]
    pub rampup_ms: f64,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyKind>,
    #[serde(default = "default_tp")]
    pub tp_options: Vec<u32>,
    #[serde(default = "FrequencyLadder::default_h100")]
    pub ladder: FrequencyLadder,
    #[serde(default)]
    pub slo: SLOSpec,
    #[serde(default)]
    pub scheduler: SchedulerPolicy,
    #[serde(default)]
    pub sim: SimSettings,
    #[serde(default)]
    pub mpc: MpcSettings,
    #[serde(default)]
    pub plan: PlanKnobs,
    /// Restrict the run to these window indices.
    #[serde(default)]
    pub windows: Option<Vec<usize>>,
    /// Directory for cached configuration tables.
    #[serde(default)]
    pub table_cache: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(param_err("at least one policy is required"));
        }
        if !(self.window_ms > 0.0) || !(self.rampup_ms >= 0.0) {
            return Err(param_err("window_ms must be > 0 and rampup_ms >= 0"));
        }
        if self.gpus == 0 || self.tp_options.is_empty() || self.tp_options.contains(&0) {
            return Err(param_err("gpus and tp options must be >= 1"));
        }
        self.slo.validate()?;
        self.scheduler.validate()?;
        self.mpc_config().validate()
    }

    /// Resolves relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let TraceSource::File { path } = &mut self.trace {
            fix(path);
        }
        if let ModelSource::Dir { path } = &mut self.models {
            fix(path);
        }
        if let Some(p) = &mut self.table_cache {
            fix(p);
        }
    }

    pub fn sim_options(&self) -> SimOptions {
        SimOptions {
            switch_latency_ms: self.sim.switch_latency_ms,
            safety_margin: self.sim.safety_margin,
            kv_tokens_per_gpu: self.sim.kv_tokens_per_gpu,
            ladder: self.ladder.clone(),
        }
    }

    pub fn mpc_config(&self) -> MpcConfig {
        MpcConfig {
            horizon_k: self.mpc.horizon_k,
            ladder_n: self.mpc.ladder_n,
            slo: self.slo,
            switch_latency_ms: self.sim.switch_latency_ms,
            margin: self.mpc.margin,
        }
    }

    pub fn decode_config(&self) -> DecodePolicyConfig {
        DecodePolicyConfig {
            tbt_slo_ms: self.slo.tpot_ms * (1.0 - self.mpc.margin),
            kv_threshold: self.sim.kv_threshold,
            ladder: self.ladder.clone(),
        }
    }

    pub fn plan_settings(&self) -> PlanSettings {
        PlanSettings {
            gpus: self.gpus,
            slo: self.slo,
            alpha: self.plan.alpha,
            tp_options: self.tp_options.clone(),
            peak_window_ms: self.plan.peak_window_ms,
            base_multiplier: self.plan.base_multiplier,
            search: self.plan.search,
        }
    }

    pub fn load_trace(&self) -> Result<Trace> {
        match &self.trace {
            TraceSource::Gamma {
                mean_rps,
                shape,
                duration_ms,
                lengths,
            } => gen_gamma_trace(*mean_rps, *shape, *duration_ms, lengths, self.seed),
            TraceSource::File { path } => read_trace(path, None),
        }
    }

    pub fn load_models(&self) -> Result<ModelSet> {
        match &self.models {
            ModelSource::Synthetic {
                prefill_family,
                decode_family,
            } => ModelSet::synthetic(
                prefill_family,
                decode_family,
                &self.ladder,
                &self.tp_options,
            ),
            ModelSource::Dir { path } => ModelSet::load_dir(path),
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs go.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&c)?)))
    }
}

/// Builds per-instance controllers for the two-tier policy.
pub fn two_tier_controllers(
    models: &ModelSet,
    policy: &SchedulerPolicy,
    mpc: &MpcConfig,
    decode: &DecodePolicyConfig,
    ladder: &FrequencyLadder,
) -> impl Fn(usize, &InstanceConfig) -> Option<Box<dyn FrequencyController>> + Sync {
    let prefill = Arc::clone(&models.prefill);
    let dec = Arc::clone(&models.decode);
    let (policy, mpc, decode, ladder) = (*policy, mpc.clone(), decode.clone(), ladder.clone());
    move |_, cfg| -> Option<Box<dyn FrequencyController>> {
        match cfg.phase {
            Phase::Prefill => {
                MpcController::new(Arc::clone(&prefill), cfg.tp, policy, mpc.clone(), &ladder)
                    .ok()
                    .map(|c| Box::new(c) as Box<dyn FrequencyController>)
            }
            Phase::Decode => DecodeController::new(Arc::clone(&dec), cfg.tp, decode.clone())
                .ok()
                .map(|c| Box::new(c) as Box<dyn FrequencyController>),
        }
    }
}

/// Plans `history`'s successor window under `policy`.
pub fn plan_for_policy(
    cfg: &ExperimentConfig,
    models: &ModelSet,
    history: &Trace,
    policy: PolicyKind,
) -> Result<WindowPlan> {
    plan_window(
        history,
        &cfg.plan_settings(),
        models,
        &cfg.scheduler,
        &cfg.sim_options(),
        policy.plan_mode(),
        cfg.table_cache.as_deref(),
    )
}

/// Simulates one window under an existing plan.
pub fn simulate_policy(
    cfg: &ExperimentConfig,
    models: &ModelSet,
    window: &Trace,
    plan: &WindowPlan,
    policy: PolicyKind,
) -> Result<SimResult> {
    let opts = cfg.sim_options();
    let cluster = plan.plan.cluster();
    match policy {
        PolicyKind::TwoTier => {
            let f = two_tier_controllers(
                models,
                &cfg.scheduler,
                &cfg.mpc_config(),
                &cfg.decode_config(),
                &cfg.ladder,
            );
            simulate_cluster(window, &cluster, &cfg.scheduler, models, &opts, Some(&f))
        }
        _ => simulate_cluster(window, &cluster, &cfg.scheduler, models, &opts, None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyRun {
    pub window: usize,
    pub policy: PolicyKind,
    pub report: MetricsReport,
    pub plan: Option<WindowPlan>,
    #[serde(skip)]
    pub sim: Option<SimResult>,
}

fn empty_report(window: usize, policy: PolicyKind) -> MetricsReport {
    MetricsReport {
        window,
        system: policy.as_str().to_string(),
        requests: 0,
        p99_ttft_ms: None,
        p99_mean_tpot_ms: None,
        prefill_energy_j: 0.0,
        decode_energy_j: 0.0,
        energy_per_first_token_j: None,
        energy_per_output_token_j: None,
        avg_power_prefill_w: 0.0,
        avg_power_decode_w: 0.0,
        slo_violations: 0,
        ttft_slo_pass: true,
        tpot_slo_pass: true,
    }
}

/// Simulates one window under `policy` with its plan (`None` for a window
/// without traffic, which yields a report of undefined markers).
pub fn run_window(
    cfg: &ExperimentConfig,
    models: &ModelSet,
    index: usize,
    window: &Trace,
    plan: Option<&WindowPlan>,
    policy: PolicyKind,
) -> Result<PolicyRun> {
    let Some(plan) = plan.filter(|_| !window.is_empty()) else {
        return Ok(PolicyRun {
            window: index,
            policy,
            report: empty_report(index, policy),
            plan: None,
            sim: None,
        });
    };
    let sim = simulate_policy(cfg, models, window, plan, policy)?;
    let rampup = cfg.rampup_ms.min(window.duration_ms * 0.5);
    let view = trim_steady_state(&sim, rampup, Some(window.duration_ms))?;
    let report = build_report(&view, &cfg.slo, index, policy.as_str());
    Ok(PolicyRun {
        window: index,
        policy,
        report,
        plan: Some(plan.clone()),
        sim: Some(sim),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutcome {
    pub runs: Vec<PolicyRun>,
    /// True when every two-tier window met both SLOs (vacuously true when
    /// two-tier was not run).
    pub two_tier_slo_pass: bool,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config_digest: String,
    trace_requests: usize,
    windows: Vec<usize>,
    policies: Vec<&'static str>,
    package: &'static str,
    version: &'static str,
    files: &'a [String],
}

/// Runs every selected window × policy and writes plans, per-run CSVs,
/// `reports.csv`, `comparison.csv` and finally `manifest.json` into the
/// output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let trace = cfg.load_trace()?;
    let models = cfg.load_models()?;
    let windows = split_windows(&trace, cfg.window_ms)?;
    let selected: Vec<usize> = match &cfg.windows {
        Some(w) => {
            if let Some(bad) = w.iter().find(|&&i| i >= windows.len()) {
                return Err(param_err(format!(
                    "window {bad} out of range (have {})",
                    windows.len()
                )));
            }
            w.clone()
        }
        None => (0..windows.len()).collect(),
    };
    // a window without a (non-empty) predecessor is planned from itself
    let history = |w: usize| match w.checked_sub(1).map(|p| &windows[p]) {
        Some(h) if !h.is_empty() => h,
        _ => &windows[w],
    };
    let mut plan_jobs: Vec<(usize, PlanMode)> = selected
        .iter()
        .flat_map(|&w| cfg.policies.iter().map(move |p| (w, p.plan_mode())))
        .collect();
    plan_jobs.sort_by_key(|&(w, m)| (w, m == PlanMode::MaxFreq));
    plan_jobs.dedup();
    let plans: Vec<((usize, PlanMode), Option<WindowPlan>)> = plan_jobs
        .par_iter()
        .map(|&(w, mode)| {
            let h = history(w);
            if h.is_empty() || windows[w].is_empty() {
                return Ok(((w, mode), None));
            }
            let policy = if mode == PlanMode::MaxFreq {
                PolicyKind::MaxfreqDistserve
            } else {
                PolicyKind::PlaceOnly
            };
            Ok(((w, mode), Some(plan_for_policy(cfg, &models, h, policy)?)))
        })
        .collect::<Result<_>>()?;
    let plan_of = |w: usize, p: PolicyKind| {
        plans
            .iter()
            .find(|(k, _)| *k == (w, p.plan_mode()))
            .and_then(|(_, plan)| plan.as_ref())
    };
    let jobs: Vec<(usize, PolicyKind)> = selected
        .iter()
        .flat_map(|&w| cfg.policies.iter().map(move |&p| (w, p)))
        .collect();
    let runs: Vec<PolicyRun> = jobs
        .par_iter()
        .map(|&(w, p)| run_window(cfg, &models, w, &windows[w], plan_of(w, p), p))
        .collect::<Result<_>>()?;

    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for r in &runs {
        let prefix = format!("w{:03}_{}_", r.window, r.policy.as_str());
        if let Some(sim) = &r.sim {
            sim.save_csvs(out, &prefix)?;
            files.extend(
                ["requests.csv", "batches.csv", "control_log.csv"].map(|f| format!("{prefix}{f}")),
            );
        }
        if let Some(plan) = &r.plan {
            let name = format!("{prefix}plan.json");
            plan.plan.save(&out.join(&name))?;
            files.push(name);
        }
    }
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.report.clone()).collect();
    write_reports_csv(&reports, std::fs::File::create(out.join("reports.csv"))?)?;
    files.push("reports.csv".into());
    if let Some(baseline) = cfg.policies.first() {
        let mut rows = Vec::new();
        for &w in &selected {
            let group: Vec<MetricsReport> =
                reports.iter().filter(|r| r.window == w).cloned().collect();
            if group.len() >= 2 {
                rows.extend(compare_runs(&group, baseline.as_str())?);
            }
        }
        let mut wtr = csv::Writer::from_writer(std::fs::File::create(out.join("comparison.csv"))?);
        for row in rows {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        files.push("comparison.csv".into());
    }
    let manifest = Manifest {
        config_digest: cfg.digest()?,
        trace_requests: trace.len(),
        windows: selected,
        policies: cfg.policies.iter().map(|p| p.as_str()).collect(),
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        files: &files,
    };
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    let two_tier_slo_pass = runs
        .iter()
        .filter(|r| r.policy == PolicyKind::TwoTier)
        .all(|r| r.report.slo_pass());
    Ok(ExperimentOutcome {
        runs,
        two_tier_slo_pass,
    })
}
