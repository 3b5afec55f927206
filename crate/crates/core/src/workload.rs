//! Request traces: generation, ingestion, scaling, windowing and burstiness
//! analysis.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};

/// A single inference request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    /// Milliseconds from trace start.
    pub arrival_ms: f64,
    pub input_len: u32,
    pub output_len: u32,
}

impl Request {
    pub fn validate(&self) -> Result<()> {
        if !(self.arrival_ms >= 0.0) || !self.arrival_ms.is_finite() {
            return Err(param_err(format!(
                "request {}: arrival {} must be finite and non-negative",
                self.id, self.arrival_ms
            )));
        }
        if self.input_len == 0 || self.output_len == 0 {
            return Err(param_err(format!(
                "request {}: input_len and output_len must be >= 1",
                self.id
            )));
        }
        Ok(())
    }
}

/// Requests sorted by arrival, plus the span they cover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub requests: Vec<Request>,
    pub duration_ms: f64,
    pub seed: Option<u64>,
}

impl Trace {
    /// Builds a trace, validating every invariant. Requests must already be
    /// sorted by arrival.
    pub fn new(requests: Vec<Request>, duration_ms: f64) -> Result<Self> {
        let trace = Trace {
            requests,
            duration_ms,
            seed: None,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn empty(duration_ms: f64) -> Self {
        Trace {
            requests: Vec::new(),
            duration_ms,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_ms >= 0.0) || !self.duration_ms.is_finite() {
            return Err(param_err("trace duration must be finite and non-negative"));
        }
        let mut ids = std::collections::HashSet::with_capacity(self.requests.len());
        let mut last = 0.0f64;
        for r in &self.requests {
            r.validate()?;
            if r.arrival_ms < last {
                return Err(param_err(format!(
                    "request {} arrives before its predecessor",
                    r.id
                )));
            }
            last = r.arrival_ms;
            if !ids.insert(r.id) {
                return Err(param_err(format!("duplicate request id {}", r.id)));
            }
        }
        if last > self.duration_ms {
            return Err(param_err(format!(
                "trace duration {} ms is shorter than the last arrival {} ms",
                self.duration_ms, last
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Average requests per second over the trace span.
    pub fn mean_rps(&self) -> f64 {
        if self.duration_ms <= 0.0 {
            return 0.0;
        }
        self.requests.len() as f64 / (self.duration_ms / 1000.0)
    }

    /// Maximum request rate observed over consecutive sub-windows of the
    /// given length.
    pub fn peak_rps(&self, sub_window_ms: f64) -> f64 {
        if self.requests.is_empty() || sub_window_ms <= 0.0 {
            return 0.0;
        }
        let secs = sub_window_ms / 1000.0;
        let mut peak = 0usize;
        let mut current_idx = u64::MAX;
        let mut count = 0usize;
        for r in &self.requests {
            let idx = (r.arrival_ms / sub_window_ms).floor() as u64;
            if idx != current_idx {
                peak = peak.max(count);
                current_idx = idx;
                count = 0;
            }
            count += 1;
        }
        peak = peak.max(count);
        peak as f64 / secs
    }

    pub fn total_output_tokens(&self) -> u64 {
        self.requests.iter().map(|r| r.output_len as u64).sum()
    }
}

/// Source of (input_len, output_len) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LengthDistribution {
    Fixed {
        input_len: u32,
        output_len: u32,
    },
    /// Pairs drawn uniformly with replacement.
    Empirical {
        samples: Vec<(u32, u32)>,
    },
    /// Independent log-normals parameterized by their arithmetic mean and the
    /// sigma of the underlying normal; draws are rounded and clamped to
    /// `[1, max]`.
    LogNormal {
        input_mean: f64,
        input_sigma: f64,
        output_mean: f64,
        output_sigma: f64,
        max_input: u32,
        max_output: u32,
    },
}

impl LengthDistribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            LengthDistribution::Fixed {
                input_len,
                output_len,
            } => {
                if *input_len == 0 || *output_len == 0 {
                    return Err(param_err("fixed lengths must be >= 1"));
                }
            }
            LengthDistribution::Empirical { samples } => {
                if samples.is_empty() {
                    return Err(param_err("empirical length distribution is empty"));
                }
                if samples.iter().any(|&(i, o)| i == 0 || o == 0) {
                    return Err(param_err("empirical lengths must be >= 1"));
                }
            }
            LengthDistribution::LogNormal {
                input_mean,
                input_sigma,
                output_mean,
                output_sigma,
                max_input,
                max_output,
            } => {
                if !(*input_mean > 0.0 && *output_mean > 0.0) {
                    return Err(param_err("log-normal means must be positive"));
                }
                if !(*input_sigma >= 0.0 && *output_sigma >= 0.0) {
                    return Err(param_err("log-normal sigmas must be non-negative"));
                }
                if *max_input == 0 || *max_output == 0 {
                    return Err(param_err("log-normal caps must be >= 1"));
                }
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> (u32, u32) {
        match self {
            LengthDistribution::Fixed {
                input_len,
                output_len,
            } => (*input_len, *output_len),
            LengthDistribution::Empirical { samples } => {
                samples[rng.random_range(0..samples.len())]
            }
            LengthDistribution::LogNormal {
                input_mean,
                input_sigma,
                output_mean,
                output_sigma,
                max_input,
                max_output,
            } => {
                let i = sample_lognormal(rng, *input_mean, *input_sigma, *max_input);
                let o = sample_lognormal(rng, *output_mean, *output_sigma, *max_output);
                (i, o)
            }
        }
    }

    /// Reads `input_len,output_len` pairs (header optional) from a CSV file.
    pub fn from_sample_file(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut samples = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() < 2 {
                return Err(param_err(format!(
                    "length sample line {} has < 2 fields",
                    line + 1
                )));
            }
            match (rec[0].parse::<u32>(), rec[1].parse::<u32>()) {
                (Ok(i), Ok(o)) => samples.push((i, o)),
                _ if line == 0 => continue, // header
                _ => {
                    return Err(param_err(format!(
                        "length sample line {} is not a pair of integers",
                        line + 1
                    )))
                }
            }
        }
        let dist = LengthDistribution::Empirical { samples };
        dist.validate()?;
        Ok(dist)
    }
}

fn sample_lognormal<R: Rng>(rng: &mut R, mean: f64, sigma: f64, cap: u32) -> u32 {
    let mu = mean.ln() - sigma * sigma / 2.0;
    let v = if sigma == 0.0 {
        mean
    } else {
        LogNormal::new(mu, sigma)
            .expect("validated log-normal parameters")
            .sample(rng)
    };
    (v.round() as u64).clamp(1, cap as u64) as u32
}

/// Bursty arrivals with Gamma-distributed inter-arrival gaps.
///
/// Gaps use shape `shape` and scale `1 / (shape * mean_rps)` seconds so the
/// expected rate is `mean_rps` regardless of burstiness. The first request
/// arrives one gap after time zero; generation stops at `duration_ms`.
pub fn gen_gamma_trace(
    mean_rps: f64,
    shape: f64,
    duration_ms: f64,
    lengths: &LengthDistribution,
    seed: u64,
) -> Result<Trace> {
    if !(mean_rps > 0.0 && mean_rps.is_finite()) {
        return Err(param_err("mean_rps must be positive"));
    }
    if !(shape > 0.0 && shape.is_finite()) {
        return Err(param_err("gamma shape must be positive"));
    }
    if !(duration_ms > 0.0 && duration_ms.is_finite()) {
        return Err(param_err("duration_ms must be positive"));
    }
    lengths.validate()?;

    let scale_ms = 1000.0 / (shape * mean_rps);
    let gamma = Gamma::new(shape, scale_ms).map_err(|e| param_err(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut requests = Vec::new();
    let mut t = 0.0;
    loop {
        t += gamma.sample(&mut rng);
        if t >= duration_ms {
            break;
        }
        let (input_len, output_len) = lengths.sample(&mut rng);
        requests.push(Request {
            id: requests.len() as u64,
            arrival_ms: t,
            input_len,
            output_len,
        });
    }
    Ok(Trace {
        requests,
        duration_ms,
        seed: Some(seed),
    })
}

/// Keeps each request independently with probability `keep_prob`.
///
/// One uniform draw is taken per request in trace order, so for a fixed seed
/// the kept set grows monotonically with `keep_prob`.
pub fn downsample_trace(trace: &Trace, keep_prob: f64, seed: u64) -> Result<Trace> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(param_err(format!("keep_prob {keep_prob} not in (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let requests = trace
        .requests
        .iter()
        .filter(|_| rng.random::<f64>() < keep_prob)
        .copied()
        .collect();
    Ok(Trace {
        requests,
        duration_ms: trace.duration_ms,
        seed: trace.seed,
    })
}

/// Stretches (factor > 1) or compresses time. Only meant for scaling a whole
/// experiment to a target rate.
pub fn time_dilate(trace: &Trace, factor: f64) -> Result<Trace> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(param_err("dilation factor must be positive"));
    }
    let requests = trace
        .requests
        .iter()
        .map(|r| Request {
            arrival_ms: r.arrival_ms * factor,
            ..*r
        })
        .collect();
    Ok(Trace {
        requests,
        duration_ms: trace.duration_ms * factor,
        seed: trace.seed,
    })
}

/// Overlays `copies` circularly shifted replicas of a trace, each offset by
/// `duration / copies`. Raises the rate by `copies` while keeping the
/// arrival pattern, which gives goodput searches a dense enough base trace.
pub fn superpose_shifted(trace: &Trace, copies: u32) -> Result<Trace> {
    if copies == 0 {
        return Err(param_err("copies must be >= 1"));
    }
    if copies == 1 || trace.duration_ms <= 0.0 {
        return Ok(trace.clone());
    }
    let dur = trace.duration_ms;
    let mut requests = Vec::with_capacity(trace.len() * copies as usize);
    for c in 0..copies {
        let offset = dur * c as f64 / copies as f64;
        for r in &trace.requests {
            let mut a = r.arrival_ms + offset;
            if a >= dur {
                a -= dur;
            }
            requests.push(Request {
                arrival_ms: a,
                ..*r
            });
        }
    }
    requests.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms).then(a.id.cmp(&b.id)));
    for (i, r) in requests.iter_mut().enumerate() {
        r.id = i as u64;
    }
    Ok(Trace {
        requests,
        duration_ms: dur,
        seed: trace.seed,
    })
}

/// Normalized variance (variance / mean of per-window RPS) at each window
/// size. `None` marks sizes with fewer than two full windows or zero mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceTimeCurve {
    pub window_sizes_s: Vec<f64>,
    pub normalized_variance: Vec<Option<f64>>,
}

pub fn variance_time_curve(trace: &Trace, window_sizes_s: &[f64]) -> Result<VarianceTimeCurve> {
    for w in window_sizes_s.windows(2) {
        if !(w[1] > w[0]) {
            return Err(param_err("window sizes must be strictly increasing"));
        }
    }
    if window_sizes_s.iter().any(|&w| !(w > 0.0)) {
        return Err(param_err("window sizes must be positive"));
    }
    let duration_s = trace.duration_ms / 1000.0;
    let values = window_sizes_s
        .iter()
        .map(|&w| {
            let n = (duration_s / w + 1e-9).floor() as usize;
            if n < 2 {
                return None;
            }
            let mut counts = vec![0u64; n];
            let w_ms = w * 1000.0;
            for r in &trace.requests {
                // nudge so arrivals sitting on a boundary are not lost to rounding
                let idx = (r.arrival_ms / w_ms + 1e-9).floor() as usize;
                if idx < n {
                    counts[idx] += 1;
                }
            }
            let rps: Vec<f64> = counts.iter().map(|&c| c as f64 / w).collect();
            let mean = rps.iter().sum::<f64>() / n as f64;
            if mean <= 0.0 {
                return None;
            }
            let var = rps.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            Some(var / mean)
        })
        .collect();
    Ok(VarianceTimeCurve {
        window_sizes_s: window_sizes_s.to_vec(),
        normalized_variance: values,
    })
}

/// `count` log-spaced window sizes from `lo_s` to `hi_s` inclusive.
pub fn log_spaced_windows(lo_s: f64, hi_s: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![lo_s];
    }
    let (a, b) = (lo_s.log10(), hi_s.log10());
    (0..count)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
        .collect()
}

/// Splits a trace into consecutive half-open windows `[k*w, (k+1)*w)`,
/// re-basing arrivals to each window's start.
pub fn split_windows(trace: &Trace, window_ms: f64) -> Result<Vec<Trace>> {
    if !(window_ms > 0.0 && window_ms.is_finite()) {
        return Err(param_err("window_ms must be positive"));
    }
    if trace.duration_ms <= window_ms && trace.requests.iter().all(|r| r.arrival_ms < window_ms) {
        return Ok(vec![trace.clone()]);
    }
    let last_idx = trace
        .requests
        .last()
        .map(|r| (r.arrival_ms / window_ms).floor() as usize)
        .unwrap_or(0);
    let count = ((trace.duration_ms / window_ms).ceil() as usize)
        .max(last_idx + 1)
        .max(1);
    let mut buckets: Vec<Vec<Request>> = vec![Vec::new(); count];
    for r in &trace.requests {
        let idx = (r.arrival_ms / window_ms).floor() as usize;
        let start = idx as f64 * window_ms;
        buckets[idx].push(Request {
            arrival_ms: r.arrival_ms - start,
            ..*r
        });
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(k, requests)| {
            let start = k as f64 * window_ms;
            let span = (trace.duration_ms - start).clamp(0.0, window_ms);
            let last = requests.last().map(|r| r.arrival_ms).unwrap_or(0.0);
            Trace {
                requests,
                duration_ms: span.max(last),
                seed: trace.seed,
            }
        })
        .collect())
}

/// Forecasts the next window as a verbatim replay of the most recent one.
pub fn predict_next_window(history: &Trace) -> Result<Trace> {
    if history.is_empty() {
        return Err(param_err("cannot predict from an empty history"));
    }
    Ok(history.clone())
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    arrival_ms: f64,
    input_len: u32,
    output_len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    JsonLines,
}

impl TraceFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(TraceFormat::Csv),
            Some("jsonl") | Some("json") | Some("ndjson") => Ok(TraceFormat::JsonLines),
            _ => Err(param_err(format!(
                "cannot infer trace format from {}; use .csv or .jsonl",
                path.display()
            ))),
        }
    }
}

/// Writes `arrival_ms,input_len,output_len` records; the format follows the
/// file extension.
pub fn write_trace(trace: &Trace, path: &Path) -> Result<()> {
    let format = TraceFormat::from_path(path)?;
    let file = File::create(path)?;
    match format {
        TraceFormat::Csv => {
            let mut w = csv::Writer::from_writer(BufWriter::new(file));
            for r in &trace.requests {
                w.serialize(TraceRow {
                    arrival_ms: r.arrival_ms,
                    input_len: r.input_len,
                    output_len: r.output_len,
                })?;
            }
            if trace.requests.is_empty() {
                w.write_record(["arrival_ms", "input_len", "output_len"])?;
            }
            w.flush()?;
        }
        TraceFormat::JsonLines => {
            let mut w = BufWriter::new(file);
            for r in &trace.requests {
                serde_json::to_writer(
                    &mut w,
                    &TraceRow {
                        arrival_ms: r.arrival_ms,
                        input_len: r.input_len,
                        output_len: r.output_len,
                    },
                )?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Reads a trace file. Ids are assigned in file order; rows are sorted by
/// arrival. The duration is the last arrival unless `duration_ms` is given.
pub fn read_trace(path: &Path, duration_ms: Option<f64>) -> Result<Trace> {
    let format = TraceFormat::from_path(path)?;
    let file = File::open(path)?;
    let mut rows: Vec<TraceRow> = Vec::new();
    match format {
        TraceFormat::Csv => {
            let mut r = csv::ReaderBuilder::new()
                .trim(csv::Trim::All)
                .from_reader(file);
            for row in r.deserialize() {
                rows.push(row?);
            }
        }
        TraceFormat::JsonLines => {
            for line in BufReader::new(file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                rows.push(serde_json::from_str(&line)?);
            }
        }
    }
    let mut requests: Vec<Request> = rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| Request {
            id: i as u64,
            arrival_ms: r.arrival_ms,
            input_len: r.input_len,
            output_len: r.output_len,
        })
        .collect();
    requests.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms).then(a.id.cmp(&b.id)));
    let last = requests.last().map(|r| r.arrival_ms).unwrap_or(0.0);
    let trace = Trace {
        requests,
        duration_ms: duration_ms.unwrap_or(last).max(last),
        seed: None,
    };
    trace.validate().map_err(|e| match e {
        Error::Parameter(m) => Error::Parameter(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixed() -> LengthDistribution {
        LengthDistribution::Fixed {
            input_len: 100,
            output_len: 10,
        }
    }

    fn periodic(n: usize, period_ms: f64) -> Trace {
        let requests = (0..n)
            .map(|i| Request {
                id: i as u64,
                arrival_ms: i as f64 * period_ms,
                input_len: 10,
                output_len: 5,
            })
            .collect();
        Trace::new(requests, n as f64 * period_ms).unwrap()
    }

    #[test]
    fn gamma_trace_pooled_rate_close_to_target() {
        let mut total = 0usize;
        for seed in 0..10 {
            let t = gen_gamma_trace(10.0, 0.5, 600_000.0, &fixed(), seed).unwrap();
            total += t.len();
        }
        let rps = total as f64 / (10.0 * 600.0);
        assert!((rps - 10.0).abs() / 10.0 < 0.05, "pooled rps {rps}");
    }

    #[test]
    fn gamma_rejects_bad_parameters() {
        assert!(gen_gamma_trace(10.0, 0.5, 0.0, &fixed(), 1).is_err());
        assert!(gen_gamma_trace(0.0, 0.5, 10.0, &fixed(), 1).is_err());
        assert!(gen_gamma_trace(1.0, -1.0, 10.0, &fixed(), 1).is_err());
    }

    #[test]
    fn exponential_gaps_have_unit_cv() {
        // shape 1 is the exponential distribution; CV of gaps is 1.
        let t = gen_gamma_trace(1.0, 1.0, 1.0e9, &fixed(), 7).unwrap();
        let mut prev = 0.0;
        let gaps: Vec<f64> = t
            .requests
            .iter()
            .take(1_000_000)
            .map(|r| {
                let g = r.arrival_ms - prev;
                prev = r.arrival_ms;
                g
            })
            .collect();
        assert!(gaps.len() >= 999_000);
        let n = gaps.len() as f64;
        let mean = gaps.iter().sum::<f64>() / n;
        let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let cv = var.sqrt() / mean;
        assert!((cv - 1.0).abs() < 0.02, "cv {cv}");
    }

    #[test]
    fn downsample_identity_and_concentration() {
        let t = gen_gamma_trace(100.0, 0.5, 1_000_000.0, &fixed(), 3).unwrap();
        assert_eq!(downsample_trace(&t, 1.0, 9).unwrap(), t);

        let n = t.len() as f64;
        let kept = downsample_trace(&t, 0.5, 9).unwrap();
        let sigma = (n * 0.25).sqrt();
        assert!((kept.len() as f64 - n / 2.0).abs() <= 3.0 * sigma);
        // survivors keep their timestamps
        let by_id: std::collections::HashMap<u64, f64> =
            t.requests.iter().map(|r| (r.id, r.arrival_ms)).collect();
        assert!(kept.requests.iter().all(|r| by_id[&r.id] == r.arrival_ms));
    }

    #[test]
    fn downsample_nested_in_keep_prob() {
        let t = gen_gamma_trace(50.0, 0.5, 60_000.0, &fixed(), 4).unwrap();
        let small = downsample_trace(&t, 0.3, 11).unwrap();
        let big = downsample_trace(&t, 0.6, 11).unwrap();
        let big_ids: std::collections::HashSet<u64> = big.requests.iter().map(|r| r.id).collect();
        assert!(small.requests.iter().all(|r| big_ids.contains(&r.id)));
        assert!(downsample_trace(&t, 0.0, 1).is_err());
        assert!(downsample_trace(&t, 1.5, 1).is_err());
    }

    #[test]
    fn dilation_scales_rate() {
        let t = periodic(1000, 100.0); // 10 rps
        assert_eq!(time_dilate(&t, 1.0).unwrap(), t);
        let slow = time_dilate(&t, 2.0).unwrap();
        assert!((slow.mean_rps() - 5.0).abs() < 1e-9);
        assert!(time_dilate(&t, 0.0).is_err());
    }

    #[test]
    fn dilation_shifts_variance_time_curve() {
        let t = gen_gamma_trace(20.0, 0.5, 2_000_000.0, &fixed(), 5).unwrap();
        let fast = time_dilate(&t, 0.5).unwrap();
        let windows = [1.0, 4.0, 16.0];
        let half: Vec<f64> = windows.iter().map(|w| w * 0.5).collect();
        let orig = variance_time_curve(&t, &windows).unwrap();
        let dil = variance_time_curve(&fast, &half).unwrap();
        // Compressing time by 0.5 doubles rates, so variance/mean doubles at the
        // correspondingly shrunk window.
        for (a, b) in orig
            .normalized_variance
            .iter()
            .zip(&dil.normalized_variance)
        {
            let (a, b) = (a.unwrap(), b.unwrap());
            assert!((b / a - 2.0).abs() < 1e-6, "{a} {b}");
        }
    }

    #[test]
    fn periodic_trace_has_zero_variance_at_period_multiples() {
        let t = periodic(10_000, 100.0);
        let c = variance_time_curve(&t, &[0.1, 0.5, 1.0, 10.0]).unwrap();
        for v in c.normalized_variance {
            assert!(v.unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn variance_time_marks_too_few_windows() {
        let t = periodic(100, 100.0); // 10 s
        let c = variance_time_curve(&t, &[1.0, 6.0, 20.0]).unwrap();
        assert!(c.normalized_variance[0].is_some());
        assert!(c.normalized_variance[1].is_none());
        assert!(c.normalized_variance[2].is_none());
    }

    #[test]
    fn poisson_normalized_variance_matches_one_over_w() {
        let t = gen_gamma_trace(5.0, 1.0, 400_000_000.0, &fixed(), 21).unwrap();
        let windows = [0.1, 1.0, 10.0, 100.0];
        let c = variance_time_curve(&t, &windows).unwrap();
        for (w, v) in windows.iter().zip(c.normalized_variance) {
            let v = v.unwrap();
            let expect = 1.0 / w;
            assert!((v - expect).abs() / expect < 0.1, "w={w} v={v}");
        }
    }

    #[test]
    fn split_windows_partition_and_boundary() {
        let t = periodic(1800, 1000.0); // 30 minutes at 1 rps
        let w = split_windows(&t, 300_000.0).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(w.iter().map(Trace::len).sum::<usize>(), 1800);

        let single = split_windows(&t, 10_000_000.0).unwrap();
        assert_eq!(single, vec![t.clone()]);

        let b = Trace::new(
            vec![
                Request {
                    id: 0,
                    arrival_ms: 999.0,
                    input_len: 1,
                    output_len: 1,
                },
                Request {
                    id: 1,
                    arrival_ms: 1000.0,
                    input_len: 1,
                    output_len: 1,
                },
            ],
            2000.0,
        )
        .unwrap();
        let parts = split_windows(&b, 1000.0).unwrap();
        assert_eq!(parts[0].requests[0].id, 0);
        assert_eq!(parts[1].requests[0].id, 1);
        assert_eq!(parts[1].requests[0].arrival_ms, 0.0);
    }

    #[test]
    fn predictor_replays_history() {
        assert!(predict_next_window(&Trace::empty(10.0)).is_err());
        let t = gen_gamma_trace(5.0, 0.5, 60_000.0, &fixed(), 2).unwrap();
        let p = predict_next_window(&t).unwrap();
        assert_eq!(p, t);
        assert_eq!(p.peak_rps(10_000.0), t.peak_rps(10_000.0));
    }

    #[test]
    fn trace_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = gen_gamma_trace(5.0, 0.5, 20_000.0, &fixed(), 2).unwrap();
        for name in ["t.csv", "t.jsonl"] {
            let p = dir.path().join(name);
            write_trace(&t, &p).unwrap();
            let back = read_trace(&p, Some(t.duration_ms)).unwrap();
            assert_eq!(back.requests, t.requests);
        }
        assert!(write_trace(&t, &dir.path().join("t.txt")).is_err());
    }

    #[test]
    fn superpose_multiplies_rate() {
        let t = periodic(100, 100.0);
        let s = superpose_shifted(&t, 4).unwrap();
        assert_eq!(s.len(), 400);
        s.validate().unwrap();
    }

    proptest! {
        #[test]
        fn generation_is_deterministic(seed in any::<u64>(), rps in 0.5f64..50.0) {
            let a = gen_gamma_trace(rps, 0.5, 20_000.0, &fixed(), seed).unwrap();
            let b = gen_gamma_trace(rps, 0.5, 20_000.0, &fixed(), seed).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn split_then_concat_restores(seed in 0u64..1000, window in 500.0f64..20_000.0) {
            let t = gen_gamma_trace(20.0, 0.5, 30_000.0, &fixed(), seed).unwrap();
            let parts = split_windows(&t, window).unwrap();
            let mut restored = Vec::new();
            for (k, p) in parts.iter().enumerate() {
                for r in &p.requests {
                    restored.push((r.id, r.arrival_ms + k as f64 * window));
                }
            }
            prop_assert_eq!(restored.len(), t.len());
            for (orig, (id, a)) in t.requests.iter().zip(restored) {
                prop_assert_eq!(orig.id, id);
                prop_assert!((orig.arrival_ms - a).abs() <= 1e-9 * orig.arrival_ms.max(1.0));
            }
        }
    }
}
