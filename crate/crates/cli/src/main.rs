//! `pdsim` — trace generation, synthetic models, placement planning and
//! windowed energy experiments for prefill/decode-disaggregated serving.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 usage error, 3 infeasible
//! placement, 4 two-tier run missed its SLOs, 5 I/O error, 6 invalid
//! parameters or configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use pdsim_core::experiment::{plan_for_policy, run_experiment, ExperimentConfig, PolicyKind};
use pdsim_core::perfmodel::{FrequencyLadder, ModelSet};
use pdsim_core::placement::{build_config_table, enumerate_candidates, GoodputContext};
use pdsim_core::workload::{
    downsample_trace, gen_gamma_trace, log_spaced_windows, read_trace, split_windows,
    superpose_shifted, time_dilate, variance_time_curve, write_trace, LengthDistribution,
};
use pdsim_core::Error as CoreError;

const EXIT_FAILURE: u8 = 1;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_SLO: u8 = 4;
const EXIT_IO: u8 = 5;
const EXIT_PARAM: u8 = 6;

#[derive(Parser)]
#[command(
    name = "pdsim",
    version,
    about = "Energy-aware prefill/decode serving simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Gamma-arrival trace, or rescale an existing one.
    GenTrace(GenTraceArgs),
    /// Write synthetic latency/power/idle tables for both phases.
    SynthModel(SynthModelArgs),
    /// Measure the configuration table for one window.
    BuildTable(WindowArgs),
    /// Solve the placement for one window and write the plan.
    Plan(PlanArgs),
    /// Run every window under every configured policy.
    Run(RunArgs),
    /// Variance-time analysis of a trace.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenTraceArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    mean_rps: f64,
    /// Trace length in seconds.
    #[arg(long, default_value_t = 600.0)]
    duration: f64,
    /// Gamma shape; 1 is Poisson, below 1 is burstier.
    #[arg(long, default_value_t = 0.5)]
    shape: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512.0)]
    input_mean: f64,
    #[arg(long, default_value_t = 0.8)]
    input_sigma: f64,
    #[arg(long, default_value_t = 128.0)]
    output_mean: f64,
    #[arg(long, default_value_t = 0.8)]
    output_sigma: f64,
    #[arg(long, default_value_t = 4096)]
    max_input: u32,
    #[arg(long, default_value_t = 1024)]
    max_output: u32,
    /// Sample (input, output) lengths from this trace instead.
    #[arg(long)]
    lengths_from: Option<PathBuf>,
    /// Rescale this trace instead of generating one.
    #[arg(long)]
    from: Option<PathBuf>,
    /// With --from: keep each request with this probability.
    #[arg(long)]
    keep_prob: Option<f64>,
    /// With --from: multiply all arrival times by this factor.
    #[arg(long)]
    dilate: Option<f64>,
}

#[derive(Args)]
struct SynthModelArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "compute-bound")]
    prefill_family: String,
    #[arg(long, default_value = "memory-bound")]
    decode_family: String,
    /// Comma-separated MHz values; defaults to 900..1980 in 180 MHz steps.
    #[arg(long, value_delimiter = ',')]
    ladder: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    tp: Vec<u32>,
}

#[derive(Args)]
struct WindowArgs {
    #[arg(long)]
    config: PathBuf,
    /// Window whose successor is planned.
    #[arg(long, default_value_t = 0)]
    window: usize,
    #[arg(long, default_value = "two-tier")]
    policy: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    min_window: f64,
    #[arg(long, default_value_t = 10_000.0)]
    max_window: f64,
    #[arg(long, default_value_t = 26)]
    points: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenTrace(a) => gen_trace(a),
        Command::SynthModel(a) => synth_model(a),
        Command::BuildTable(a) => build_table(a),
        Command::Plan(a) => plan(a),
        Command::Run(a) => run(a),
        Command::Analyze(a) => analyze(a),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Infeasible(_) => EXIT_INFEASIBLE,
                CoreError::Io(_) => EXIT_IO,
                CoreError::Parameter(_) | CoreError::Configuration(_) | CoreError::Model(_) => {
                    EXIT_PARAM
                }
                _ => EXIT_FAILURE,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
        if cause.is::<toml::de::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_PARAM;
        }
    }
    EXIT_FAILURE
}

fn gen_trace(a: GenTraceArgs) -> anyhow::Result<ExitCode> {
    let trace = if let Some(src) = &a.from {
        let mut t = read_trace(src, None)?;
        if let Some(p) = a.keep_prob {
            t = downsample_trace(&t, p, a.seed)?;
        }
        if let Some(f) = a.dilate {
            t = time_dilate(&t, f)?;
        }
        t
    } else {
        let lengths = match &a.lengths_from {
            Some(p) => LengthDistribution::from_sample_file(p)?,
            None => LengthDistribution::LogNormal {
                input_mean: a.input_mean,
                input_sigma: a.input_sigma,
                output_mean: a.output_mean,
                output_sigma: a.output_sigma,
                max_input: a.max_input,
                max_output: a.max_output,
            },
        };
        gen_gamma_trace(a.mean_rps, a.shape, a.duration * 1000.0, &lengths, a.seed)?
    };
    write_trace(&trace, &a.out)?;
    println!(
        "wrote {} requests ({:.2} req/s over {:.1} s) to {}",
        trace.len(),
        trace.mean_rps(),
        trace.duration_ms / 1000.0,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn synth_model(a: SynthModelArgs) -> anyhow::Result<ExitCode> {
    let ladder = match a.ladder {
        Some(f) => FrequencyLadder::new(f)?,
        None => FrequencyLadder::default_h100(),
    };
    let models = ModelSet::synthetic(&a.prefill_family, &a.decode_family, &ladder, &a.tp)?;
    models.save_dir(&a.out)?;
    println!(
        "wrote model tables to {} (digest {})",
        a.out.display(),
        models.digest()?
    );
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: ExperimentConfig =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(dir) = path.parent() {
        cfg.rebase(dir);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn window_trace(cfg: &ExperimentConfig, index: usize) -> anyhow::Result<pdsim_core::Trace> {
    let trace = cfg.load_trace()?;
    let mut windows = split_windows(&trace, cfg.window_ms)?;
    if index >= windows.len() {
        bail!(CoreError::Parameter(format!(
            "window {index} out of range (trace has {})",
            windows.len()
        )));
    }
    Ok(windows.swap_remove(index))
}

fn build_table(a: WindowArgs) -> anyhow::Result<ExitCode> {
    let cfg = load_config(&a.config)?;
    let policy: PolicyKind = a.policy.parse()?;
    let models = cfg.load_models()?;
    let history = window_trace(&cfg, a.window)?;
    let base = superpose_shifted(&history, cfg.plan.base_multiplier)?;
    let opts = cfg.sim_options();
    let ladder = match policy {
        PolicyKind::MaxfreqDistserve => FrequencyLadder::new(vec![opts.ladder.max()])?,
        _ => opts.ladder.clone(),
    };
    let ctx = GoodputContext {
        base_trace: &base,
        slo: &cfg.slo,
        models: &models,
        policy: &cfg.scheduler,
        opts: &opts,
        search: &cfg.plan.search,
    };
    let table = build_config_table(&enumerate_candidates(&cfg.tp_options, &ladder), &ctx)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&table)?)?;
    for e in &table {
        println!(
            "{:<8} tp={} f={:>6} R_c={:>8.3} E_c={}",
            e.config.phase.as_str(),
            e.config.tp,
            e.config.base_freq_mhz,
            e.r_c,
            e.e_c
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into())
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn plan(a: PlanArgs) -> anyhow::Result<ExitCode> {
    let a = a.window;
    let cfg = load_config(&a.config)?;
    let policy: PolicyKind = a.policy.parse()?;
    let models = cfg.load_models()?;
    let history = window_trace(&cfg, a.window)?;
    let wp = plan_for_policy(&cfg, &models, &history, policy)?;
    let p = &wp.plan;
    p.check()?;
    p.save(&a.out)?;
    let need = (1.0 + p.alpha) * p.r;
    println!(
        "target goodput      {:.3} req/s (x{:.2} margin)",
        p.r,
        1.0 + p.alpha
    );
    println!("objective           {:.3} W", p.objective);
    println!(
        "GPUs                {} / {} (slack {})",
        p.gpus_used,
        p.g,
        p.g - p.gpus_used
    );
    println!(
        "prefill capacity    {:.3} (slack {:.3})",
        p.prefill_capacity,
        p.prefill_capacity - need
    );
    println!(
        "decode capacity     {:.3} (slack {:.3})",
        p.decode_capacity,
        p.decode_capacity - need
    );
    for i in &p.instances {
        println!(
            "  {:<8} tp={} f={:>6} weight={:.4}",
            i.phase.as_str(),
            i.tp,
            i.freq_mhz,
            i.weight
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn run(a: RunArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    let outcome = run_experiment(&cfg)?;
    for r in &outcome.runs {
        let rep = &r.report;
        println!(
            "window {:>3} {:<18} requests={:<6} energy={:>12.1} J p99_ttft={} p99_tpot={} slo={}",
            rep.window,
            rep.system,
            rep.requests,
            rep.total_energy_j(),
            rep.p99_ttft_ms
                .map(|v| format!("{v:.1}"))
                .unwrap_or_else(|| "-".into()),
            rep.p99_mean_tpot_ms
                .map(|v| format!("{v:.1}"))
                .unwrap_or_else(|| "-".into()),
            if rep.slo_pass() { "pass" } else { "FAIL" },
        );
    }
    println!("outputs in {}", cfg.output_dir.display());
    if outcome.two_tier_slo_pass {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("two-tier policy missed its SLOs");
        Ok(ExitCode::from(EXIT_SLO))
    }
}

fn analyze(a: AnalyzeArgs) -> anyhow::Result<ExitCode> {
    let trace = read_trace(&a.trace, None)?;
    let windows = log_spaced_windows(a.min_window, a.max_window, a.points);
    let curve = variance_time_curve(&trace, &windows)?;
    let mut out = String::from("window_s,normalized_variance\n");
    for (w, v) in curve.window_sizes_s.iter().zip(&curve.normalized_variance) {
        out.push_str(&format!(
            "{w},{}\n",
            v.map(|x| x.to_string()).unwrap_or_default()
        ));
    }
    std::fs::write(&a.out, out)?;
    let missing = curve
        .normalized_variance
        .iter()
        .filter(|v| v.is_none())
        .count();
    if missing > 0 {
        eprintln!("{missing} window sizes exceed half the trace and have no value");
    }
    Ok(ExitCode::SUCCESS)
}
