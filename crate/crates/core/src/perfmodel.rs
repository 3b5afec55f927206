//! Iteration-level latency and power models backed by gridded lookup tables.
//!
//! Every table is a dense row-major grid over a subset of the axes
//! `(sum_len, n_requests, tp, freq)` and is queried by multilinear
//! interpolation. Out-of-range queries are clamped to the grid boundary and
//! counted.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Shape of one batch (prefill) or iteration (decode).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchFeatures {
    pub n_requests: u32,
    pub sum_len: u64,
    pub mean_len: f64,
    /// Population standard deviation. Not a grid axis.
    pub std_len: f64,
}

impl BatchFeatures {
    /// Features of a batch with the given per-request token counts.
    pub fn from_lengths<I: IntoIterator<Item = u64>>(lens: I) -> Self {
        let lens: Vec<u64> = lens.into_iter().collect();
        let n = lens.len();
        let sum: u64 = lens.iter().sum();
        if n == 0 {
            return BatchFeatures {
                n_requests: 0,
                sum_len: 0,
                mean_len: 0.0,
                std_len: 0.0,
            };
        }
        let mean = sum as f64 / n as f64;
        let var = lens.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        BatchFeatures {
            n_requests: n as u32,
            sum_len: sum,
            mean_len: mean,
            std_len: var.sqrt(),
        }
    }

    pub fn single(len: u64) -> Self {
        Self::from_lengths([len])
    }
}

/// Strictly increasing supported frequencies in MHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FrequencyLadder(Vec<f64>);

impl FrequencyLadder {
    pub fn new(freqs_mhz: Vec<f64>) -> Result<Self> {
        if freqs_mhz.is_empty() {
            return Err(param_err("frequency ladder is empty"));
        }
        if freqs_mhz.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(param_err("ladder frequencies must be positive"));
        }
        if freqs_mhz.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(param_err("ladder must be strictly increasing"));
        }
        Ok(FrequencyLadder(freqs_mhz))
    }

    /// Seven evenly spaced levels between 900 and 1980 MHz.
    pub fn default_h100() -> Self {
        FrequencyLadder((0..7).map(|i| 900.0 + 180.0 * i as f64).collect())
    }

    pub fn freqs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0[0]
    }

    pub fn max(&self) -> f64 {
        *self.0.last().expect("non-empty ladder")
    }

    pub fn contains(&self, f: f64) -> bool {
        self.0.iter().any(|&x| (x - f).abs() < 1e-9)
    }

    /// `n` levels picked evenly (by index) from the ladder, always keeping
    /// both ends. Returns the full ladder when `n >= len`.
    pub fn select(&self, n: usize) -> FrequencyLadder {
        let len = self.0.len();
        if n >= len || n == 0 {
            return self.clone();
        }
        if n == 1 {
            return FrequencyLadder(vec![self.max()]);
        }
        let mut picked: Vec<f64> = (0..n)
            .map(|i| {
                let idx = (i as f64 * (len - 1) as f64 / (n - 1) as f64).round() as usize;
                self.0[idx]
            })
            .collect();
        picked.dedup();
        FrequencyLadder(picked)
    }
}

impl TryFrom<Vec<f64>> for FrequencyLadder {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        FrequencyLadder::new(v)
    }
}

impl From<FrequencyLadder> for Vec<f64> {
    fn from(l: FrequencyLadder) -> Self {
        l.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    SumLen,
    NRequests,
    Tp,
    Freq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    Latency,
    Power,
    Idle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisKnots {
    pub axis: Axis,
    pub knots: Vec<f64>,
}

/// Provenance of a synthetic table, kept so tests can evaluate the closed
/// form directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMetadata {
    pub family: String,
    pub params: Option<SynthParams>,
}

/// A dense grid with multilinear interpolation. Serialized as the model
/// file format.
#[derive(Debug, Serialize, Deserialize)]
pub struct GridTable {
    pub version: u32,
    pub kind: TableKind,
    pub phase: Option<Phase>,
    pub axes: Vec<AxisKnots>,
    /// Row-major values; the last axis varies fastest.
    pub values: Vec<f64>,
    #[serde(default)]
    pub metadata: Option<TableMetadata>,
    #[serde(skip)]
    clamped: AtomicU64,
}

impl Clone for GridTable {
    fn clone(&self) -> Self {
        GridTable {
            version: self.version,
            kind: self.kind,
            phase: self.phase,
            axes: self.axes.clone(),
            values: self.values.clone(),
            metadata: self.metadata.clone(),
            clamped: AtomicU64::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for GridTable {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version
            && self.kind == other.kind
            && self.phase == other.phase
            && self.axes == other.axes
            && self.values == other.values
            && self.metadata == other.metadata
    }
}

/// Where a table breaks an invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Shape problems: empty axes, unsorted knots, wrong value count.
    Structure(String),
    /// Non-positive or non-finite value at the grid point.
    NonPositive { index: Vec<usize> },
    /// The value at `index` and its successor along the frequency axis break
    /// monotonicity (latency must not increase, power must not decrease).
    FreqMonotonicity { index: Vec<usize> },
}

impl GridTable {
    pub fn new(
        kind: TableKind,
        phase: Option<Phase>,
        axes: Vec<AxisKnots>,
        values: Vec<f64>,
        metadata: Option<TableMetadata>,
    ) -> Result<Self> {
        let table = GridTable {
            version: MODEL_FILE_VERSION,
            kind,
            phase,
            axes,
            values,
            metadata,
            clamped: AtomicU64::new(0),
        };
        table.check_structure()?;
        Ok(table)
    }

    fn structural_problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.version != MODEL_FILE_VERSION {
            out.push(format!("unsupported model version {}", self.version));
        }
        if self.axes.is_empty() {
            out.push("table has no axes".to_string());
        }
        for (i, a) in self.axes.iter().enumerate() {
            if a.knots.is_empty() {
                out.push(format!("axis {:?} has no knots", a.axis));
            }
            if a.knots.windows(2).any(|w| !(w[1] > w[0])) {
                out.push(format!("axis {:?} knots not strictly increasing", a.axis));
            }
            if self.axes[..i].iter().any(|b| b.axis == a.axis) {
                out.push(format!("axis {:?} appears twice", a.axis));
            }
        }
        let expected: usize = self.axes.iter().map(|a| a.knots.len()).product();
        if self.axes.is_empty() || self.values.len() != expected {
            out.push(format!(
                "expected {} values, found {}",
                expected,
                self.values.len()
            ));
        }
        out
    }

    fn check_structure(&self) -> Result<()> {
        let problems = self.structural_problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Model(problems.join("; ")))
        }
    }

    pub fn axis_index(&self, axis: Axis) -> Option<usize> {
        self.axes.iter().position(|a| a.axis == axis)
    }

    pub fn knots(&self, axis: Axis) -> Option<&[f64]> {
        self.axis_index(axis).map(|i| self.axes[i].knots.as_slice())
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.axes.len()];
        for i in (0..self.axes.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.axes[i + 1].knots.len();
        }
        strides
    }

    pub fn value_at(&self, index: &[usize]) -> f64 {
        let strides = self.strides();
        let flat: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.values[flat]
    }

    /// Number of queries so far that fell outside the grid on some axis.
    pub fn clamp_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    /// Multilinear interpolation at `point` (one coordinate per axis, in
    /// axis order).
    pub fn interpolate(&self, point: &[f64]) -> f64 {
        debug_assert_eq!(point.len(), self.axes.len());
        let mut clamped = false;
        // (lower index, upper weight) per axis
        let mut cell: Vec<(usize, f64)> = Vec::with_capacity(self.axes.len());
        for (a, &x) in self.axes.iter().zip(point) {
            let k = &a.knots;
            if k.len() == 1 {
                if x != k[0] {
                    clamped = true;
                }
                cell.push((0, 0.0));
                continue;
            }
            let last = k.len() - 1;
            if x <= k[0] {
                clamped |= x < k[0];
                cell.push((0, 0.0));
            } else if x >= k[last] {
                clamped |= x > k[last];
                cell.push((last - 1, 1.0));
            } else {
                let hi = k.partition_point(|&v| v <= x);
                let lo = hi - 1;
                let w = (x - k[lo]) / (k[hi] - k[lo]);
                cell.push((lo, w));
            }
        }
        if clamped {
            self.clamped.fetch_add(1, Ordering::Relaxed);
        }
        let strides = self.strides();
        let d = self.axes.len();
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut flat = 0usize;
            for (j, &(lo, w)) in cell.iter().enumerate() {
                let up = (corner >> j) & 1 == 1;
                let wj = if up { w } else { 1.0 - w };
                if wj == 0.0 {
                    weight = 0.0;
                    break;
                }
                weight *= wj;
                flat += (lo + up as usize) * strides[j];
            }
            if weight != 0.0 {
                acc += weight * self.values[flat];
            }
        }
        acc
    }

    fn point_for(&self, f: &BatchFeatures, tp: u32, freq_mhz: f64) -> Vec<f64> {
        self.axes
            .iter()
            .map(|a| match a.axis {
                Axis::SumLen => f.sum_len as f64,
                Axis::NRequests => f.n_requests as f64,
                Axis::Tp => tp as f64,
                Axis::Freq => freq_mhz,
            })
            .collect()
    }

    /// Every grid point or adjacent frequency pair that breaks positivity or
    /// monotonicity. Empty means valid.
    pub fn violations(&self) -> Vec<Violation> {
        let problems = self.structural_problems();
        if !problems.is_empty() {
            return problems.into_iter().map(Violation::Structure).collect();
        }
        let mut out = Vec::new();
        let dims: Vec<usize> = self.axes.iter().map(|a| a.knots.len()).collect();
        let freq_axis = self.axis_index(Axis::Freq);
        let strides = self.strides();
        let mut index = vec![0usize; dims.len()];
        for flat in 0..self.values.len() {
            let v = self.values[flat];
            if !(v > 0.0 && v.is_finite()) {
                out.push(Violation::NonPositive {
                    index: index.clone(),
                });
            }
            if let Some(fa) = freq_axis {
                if index[fa] + 1 < dims[fa] {
                    let next = self.values[flat + strides[fa]];
                    let bad = match self.kind {
                        TableKind::Latency => next > v,
                        TableKind::Power | TableKind::Idle => next < v,
                    };
                    if bad {
                        out.push(Violation::FreqMonotonicity {
                            index: index.clone(),
                        });
                    }
                }
            }
            for j in (0..dims.len()).rev() {
                index[j] += 1;
                if index[j] < dims[j] {
                    break;
                }
                index[j] = 0;
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: GridTable = serde_json::from_str(s)?;
        t.check_structure()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Batch latency in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyTable(GridTable);

/// Average batch power in watts for the whole instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerTable(GridTable);

/// Idle watts per (tp, freq).
#[derive(Debug, Clone, PartialEq)]
pub struct IdlePowerModel(GridTable);

fn require_axes(t: &GridTable, allowed: &[Axis], required: &[Axis]) -> Result<()> {
    for a in &t.axes {
        if !allowed.contains(&a.axis) {
            return Err(Error::Model(format!("axis {:?} not allowed here", a.axis)));
        }
    }
    for r in required {
        if t.axis_index(*r).is_none() {
            return Err(Error::Model(format!("missing required axis {r:?}")));
        }
    }
    Ok(())
}

const BATCH_AXES: [Axis; 4] = [Axis::SumLen, Axis::NRequests, Axis::Tp, Axis::Freq];

impl LatencyTable {
    pub fn new(grid: GridTable) -> Result<Self> {
        if grid.kind != TableKind::Latency {
            return Err(Error::Model("expected a latency table".into()));
        }
        if grid.phase.is_none() {
            return Err(Error::Model("latency table needs a phase".into()));
        }
        require_axes(&grid, &BATCH_AXES, &[Axis::Freq])?;
        Ok(LatencyTable(grid))
    }

    pub fn phase(&self) -> Phase {
        self.0.phase.expect("checked at construction")
    }

    pub fn grid(&self) -> &GridTable {
        &self.0
    }
}

impl PowerTable {
    pub fn new(grid: GridTable) -> Result<Self> {
        if grid.kind != TableKind::Power {
            return Err(Error::Model("expected a power table".into()));
        }
        if grid.phase.is_none() {
            return Err(Error::Model("power table needs a phase".into()));
        }
        require_axes(&grid, &BATCH_AXES, &[Axis::Freq])?;
        Ok(PowerTable(grid))
    }

    pub fn phase(&self) -> Phase {
        self.0.phase.expect("checked at construction")
    }

    pub fn grid(&self) -> &GridTable {
        &self.0
    }
}

impl IdlePowerModel {
    pub fn new(grid: GridTable) -> Result<Self> {
        if grid.kind != TableKind::Idle {
            return Err(Error::Model("expected an idle power table".into()));
        }
        require_axes(&grid, &[Axis::Tp, Axis::Freq], &[Axis::Tp, Axis::Freq])?;
        Ok(IdlePowerModel(grid))
    }

    pub fn grid(&self) -> &GridTable {
        &self.0
    }
}

pub fn predict_latency(table: &LatencyTable, f: &BatchFeatures, tp: u32, freq_mhz: f64) -> f64 {
    let g = &table.0;
    g.interpolate(&g.point_for(f, tp, freq_mhz))
}

pub fn predict_power(table: &PowerTable, f: &BatchFeatures, tp: u32, freq_mhz: f64) -> f64 {
    let g = &table.0;
    g.interpolate(&g.point_for(f, tp, freq_mhz))
}

/// Idle watts; `tp` must be one of the model's knots.
pub fn predict_idle_power(m: &IdlePowerModel, tp: u32, freq_mhz: f64) -> Result<f64> {
    let g = &m.0;
    let tps = g.knots(Axis::Tp).expect("checked at construction");
    if !tps.contains(&(tp as f64)) {
        return Err(Error::Model(format!(
            "idle power model has no entry for tp={tp}"
        )));
    }
    let dummy = BatchFeatures::single(1);
    Ok(g.interpolate(&g.point_for(&dummy, tp, freq_mhz)))
}

/// Positivity, monotone-in-frequency and structural checks.
pub fn validate_model(table: &GridTable) -> Vec<Violation> {
    table.violations()
}

/// Closed-form parameters for the synthetic model families.
///
/// Frequencies enter as the ratio `x = freq / ref_freq_mhz`; TP divides
/// work by `tp^tp_exponent` and multiplies power by `tp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub ref_freq_mhz: f64,
    pub fixed_ms: f64,
    pub per_token_ms: f64,
    pub per_request_ms: f64,
    pub tp_exponent: f64,
    /// Frequency at which the memory-bound family stops speeding up.
    pub knee_freq_mhz: f64,
    /// Per-GPU dynamic power coefficient (watts at `x = 1`).
    pub power_a_w: f64,
    /// Per-GPU static power (watts).
    pub power_b_w: f64,
    /// Per-GPU idle watts at `x = 1`; scales as `0.8 + 0.2 x`.
    pub idle_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum SynthFamily {
    /// latency ∝ work / freq, power = tp (a x³ + b).
    ComputeBound(SynthParams),
    /// latency = fixed + per_token·sum_len·max(1/x, 1/x_knee), power = tp (a x + b).
    MemoryBound(SynthParams),
}

impl SynthFamily {
    pub fn from_name(name: &str, phase: Phase) -> Result<Self> {
        match name {
            "compute-bound" => Ok(SynthFamily::ComputeBound(Self::default_params(phase))),
            "memory-bound" => Ok(SynthFamily::MemoryBound(Self::default_params(phase))),
            other => Err(param_err(format!(
                "unknown synthetic model family '{other}'"
            ))),
        }
    }

    pub fn default_params(phase: Phase) -> SynthParams {
        match phase {
            Phase::Prefill => SynthParams {
                ref_freq_mhz: 1980.0,
                fixed_ms: 8.0,
                per_token_ms: 0.08,
                per_request_ms: 0.5,
                tp_exponent: 0.9,
                knee_freq_mhz: 1260.0,
                power_a_w: 500.0,
                power_b_w: 80.0,
                idle_w: 60.0,
            },
            Phase::Decode => SynthParams {
                ref_freq_mhz: 1980.0,
                fixed_ms: 14.0,
                per_token_ms: 0.0006,
                per_request_ms: 0.08,
                tp_exponent: 0.8,
                knee_freq_mhz: 1260.0,
                power_a_w: 350.0,
                power_b_w: 90.0,
                idle_w: 60.0,
            },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SynthFamily::ComputeBound(_) => "compute-bound",
            SynthFamily::MemoryBound(_) => "memory-bound",
        }
    }

    pub fn params(&self) -> &SynthParams {
        match self {
            SynthFamily::ComputeBound(p) | SynthFamily::MemoryBound(p) => p,
        }
    }

    pub fn latency_ms(&self, sum_len: f64, n: f64, tp: f64, freq: f64) -> f64 {
        match self {
            SynthFamily::ComputeBound(p) => {
                let x = freq / p.ref_freq_mhz;
                (p.fixed_ms + p.per_token_ms * sum_len + p.per_request_ms * n)
                    / x
                    / tp.powf(p.tp_exponent)
            }
            SynthFamily::MemoryBound(p) => {
                let x = freq / p.ref_freq_mhz;
                let knee = p.knee_freq_mhz / p.ref_freq_mhz;
                let slow = (1.0 / x).max(1.0 / knee);
                (p.fixed_ms + p.per_request_ms * n + p.per_token_ms * sum_len * slow)
                    / tp.powf(p.tp_exponent)
            }
        }
    }

    pub fn power_w(&self, tp: f64, freq: f64) -> f64 {
        match self {
            SynthFamily::ComputeBound(p) => {
                let x = freq / p.ref_freq_mhz;
                tp * (p.power_a_w * x.powi(3) + p.power_b_w)
            }
            SynthFamily::MemoryBound(p) => {
                let x = freq / p.ref_freq_mhz;
                tp * (p.power_a_w * x + p.power_b_w)
            }
        }
    }

    pub fn idle_w(&self, tp: f64, freq: f64) -> f64 {
        let p = self.params();
        tp * p.idle_w * (0.8 + 0.2 * freq / p.ref_freq_mhz)
    }
}

/// Latency, power and idle tables for one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseModels {
    pub latency: LatencyTable,
    pub power: PowerTable,
    pub idle: IdlePowerModel,
}

/// Knots along the batch axes of synthetic tables. All synthetic closed
/// forms are affine in `sum_len` and `n_requests`, so interpolation is
/// exact between these knots.
pub const SYNTH_SUM_LEN_KNOTS: [f64; 6] = [1.0, 256.0, 2048.0, 16384.0, 131072.0, 2_097_152.0];
pub const SYNTH_N_KNOTS: [f64; 4] = [1.0, 16.0, 128.0, 1024.0];

/// Populates tables for one phase from a closed-form family.
pub fn synth_model(
    family: &SynthFamily,
    phase: Phase,
    ladder: &FrequencyLadder,
    tp_list: &[u32],
) -> Result<PhaseModels> {
    if tp_list.is_empty() || tp_list.contains(&0) {
        return Err(param_err("tp_list must be non-empty and positive"));
    }
    let mut tps: Vec<f64> = tp_list.iter().map(|&t| t as f64).collect();
    tps.sort_by(f64::total_cmp);
    tps.dedup();
    let freqs = ladder.freqs().to_vec();
    let meta = Some(TableMetadata {
        family: family.name().to_string(),
        params: Some(family.params().clone()),
    });

    let mut lat = Vec::new();
    for &s in &SYNTH_SUM_LEN_KNOTS {
        for &n in &SYNTH_N_KNOTS {
            for &tp in &tps {
                for &f in &freqs {
                    lat.push(family.latency_ms(s, n, tp, f));
                }
            }
        }
    }
    let latency = LatencyTable::new(GridTable::new(
        TableKind::Latency,
        Some(phase),
        vec![
            AxisKnots {
                axis: Axis::SumLen,
                knots: SYNTH_SUM_LEN_KNOTS.to_vec(),
            },
            AxisKnots {
                axis: Axis::NRequests,
                knots: SYNTH_N_KNOTS.to_vec(),
            },
            AxisKnots {
                axis: Axis::Tp,
                knots: tps.clone(),
            },
            AxisKnots {
                axis: Axis::Freq,
                knots: freqs.clone(),
            },
        ],
        lat,
        meta.clone(),
    )?)?;

    // Prefill power follows the 3D (sum_len, tp, freq) layout; decode power
    // uses the same feature axes as its latency model.
    let (power_axes, power_vals) = match phase {
        Phase::Prefill => {
            let mut v = Vec::new();
            for _ in &SYNTH_SUM_LEN_KNOTS {
                for &tp in &tps {
                    for &f in &freqs {
                        v.push(family.power_w(tp, f));
                    }
                }
            }
            (
                vec![
                    AxisKnots {
                        axis: Axis::SumLen,
                        knots: SYNTH_SUM_LEN_KNOTS.to_vec(),
                    },
                    AxisKnots {
                        axis: Axis::Tp,
                        knots: tps.clone(),
                    },
                    AxisKnots {
                        axis: Axis::Freq,
                        knots: freqs.clone(),
                    },
                ],
                v,
            )
        }
        Phase::Decode => {
            let mut v = Vec::new();
            for _ in &SYNTH_SUM_LEN_KNOTS {
                for _ in &SYNTH_N_KNOTS {
                    for &tp in &tps {
                        for &f in &freqs {
                            v.push(family.power_w(tp, f));
                        }
                    }
                }
            }
            (
                vec![
                    AxisKnots {
                        axis: Axis::SumLen,
                        knots: SYNTH_SUM_LEN_KNOTS.to_vec(),
                    },
                    AxisKnots {
                        axis: Axis::NRequests,
                        knots: SYNTH_N_KNOTS.to_vec(),
                    },
                    AxisKnots {
                        axis: Axis::Tp,
                        knots: tps.clone(),
                    },
                    AxisKnots {
                        axis: Axis::Freq,
                        knots: freqs.clone(),
                    },
                ],
                v,
            )
        }
    };
    let power = PowerTable::new(GridTable::new(
        TableKind::Power,
        Some(phase),
        power_axes,
        power_vals,
        meta.clone(),
    )?)?;

    let mut idle_vals = Vec::new();
    for &tp in &tps {
        for &f in &freqs {
            idle_vals.push(family.idle_w(tp, f));
        }
    }
    let idle = IdlePowerModel::new(GridTable::new(
        TableKind::Idle,
        Some(phase),
        vec![
            AxisKnots {
                axis: Axis::Tp,
                knots: tps,
            },
            AxisKnots {
                axis: Axis::Freq,
                knots: freqs,
            },
        ],
        idle_vals,
        meta,
    )?)?;

    Ok(PhaseModels {
        latency,
        power,
        idle,
    })
}

/// Models for both phases, shared read-only across instances.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub prefill: Arc<PhaseModels>,
    pub decode: Arc<PhaseModels>,
}

impl ModelSet {
    pub fn new(prefill: PhaseModels, decode: PhaseModels) -> Result<Self> {
        if prefill.latency.phase() != Phase::Prefill || decode.latency.phase() != Phase::Decode {
            return Err(Error::Model(
                "model phases are swapped or mislabeled".into(),
            ));
        }
        Ok(ModelSet {
            prefill: Arc::new(prefill),
            decode: Arc::new(decode),
        })
    }

    pub fn phase(&self, phase: Phase) -> &PhaseModels {
        match phase {
            Phase::Prefill => &self.prefill,
            Phase::Decode => &self.decode,
        }
    }

    /// Synthetic models for both phases from named families with default
    /// parameters.
    pub fn synthetic(
        prefill_family: &str,
        decode_family: &str,
        ladder: &FrequencyLadder,
        tp_list: &[u32],
    ) -> Result<Self> {
        let pf = SynthFamily::from_name(prefill_family, Phase::Prefill)?;
        let df = SynthFamily::from_name(decode_family, Phase::Decode)?;
        Self::new(
            synth_model(&pf, Phase::Prefill, ladder, tp_list)?,
            synth_model(&df, Phase::Decode, ladder, tp_list)?,
        )
    }

    /// Checks that every table covers the requested TP degrees and ladder.
    pub fn check_coverage(&self, phase: Phase, tp: u32, ladder: &FrequencyLadder) -> Result<()> {
        let m = self.phase(phase);
        let tps = m.idle.grid().knots(Axis::Tp).unwrap_or(&[]);
        if !tps.contains(&(tp as f64)) {
            return Err(Error::Model(format!("{phase} models do not cover tp={tp}")));
        }
        for g in [m.latency.grid(), m.power.grid(), m.idle.grid()] {
            if let Some(k) = g.knots(Axis::Freq) {
                let (lo, hi) = (k[0], k[k.len() - 1]);
                if ladder.min() < lo - 1e-9 || ladder.max() > hi + 1e-9 {
                    return Err(Error::Model(format!(
                        "{phase} {:?} table covers {lo}-{hi} MHz, ladder needs {}-{}",
                        g.kind,
                        ladder.min(),
                        ladder.max()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes `<dir>/<phase>_{latency,power,idle}.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for phase in [Phase::Prefill, Phase::Decode] {
            let m = self.phase(phase);
            m.latency
                .grid()
                .save(&dir.join(format!("{phase}_latency.json")))?;
            m.power
                .grid()
                .save(&dir.join(format!("{phase}_power.json")))?;
            m.idle
                .grid()
                .save(&dir.join(format!("{phase}_idle.json")))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let load = |phase: Phase| -> Result<PhaseModels> {
            Ok(PhaseModels {
                latency: LatencyTable::new(GridTable::load(
                    &dir.join(format!("{phase}_latency.json")),
                )?)?,
                power: PowerTable::new(GridTable::load(&dir.join(format!("{phase}_power.json")))?)?,
                idle: IdlePowerModel::new(GridTable::load(
                    &dir.join(format!("{phase}_idle.json")),
                )?)?,
            })
        };
        Self::new(load(Phase::Prefill)?, load(Phase::Decode)?)
    }

    /// Stable digest of the serialized tables, used to key caches.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for phase in [Phase::Prefill, Phase::Decode] {
            let m = self.phase(phase);
            for g in [m.latency.grid(), m.power.grid(), m.idle.grid()] {
                h.update(serde_json::to_vec(g)?);
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn freq_table(kind: TableKind, values: Vec<f64>, freqs: Vec<f64>) -> GridTable {
        GridTable::new(
            kind,
            Some(Phase::Prefill),
            vec![
                AxisKnots {
                    axis: Axis::SumLen,
                    knots: vec![100.0],
                },
                AxisKnots {
                    axis: Axis::Freq,
                    knots: freqs,
                },
            ],
            values,
            None,
        )
        .unwrap()
    }

    #[test]
    fn latency_exact_at_knots_and_linear_between() {
        let t = LatencyTable::new(freq_table(
            TableKind::Latency,
            vec![20.0, 10.0],
            vec![1000.0, 2000.0],
        ))
        .unwrap();
        let f = BatchFeatures::single(100);
        assert_eq!(predict_latency(&t, &f, 1, 1000.0), 20.0);
        assert_eq!(predict_latency(&t, &f, 1, 2000.0), 10.0);
        assert_eq!(predict_latency(&t, &f, 1, 1500.0), 15.0);
    }

    #[test]
    fn power_midpoint_and_knots() {
        let t = PowerTable::new(freq_table(
            TableKind::Power,
            vec![100.0, 200.0],
            vec![1000.0, 2000.0],
        ))
        .unwrap();
        let f = BatchFeatures::single(100);
        assert_eq!(predict_power(&t, &f, 1, 1000.0), 100.0);
        assert_eq!(predict_power(&t, &f, 1, 1500.0), 150.0);
    }

    #[test]
    fn out_of_range_queries_clamp_and_count() {
        let t = LatencyTable::new(freq_table(
            TableKind::Latency,
            vec![20.0, 10.0],
            vec![1000.0, 2000.0],
        ))
        .unwrap();
        let f = BatchFeatures::single(100);
        assert_eq!(t.grid().clamp_count(), 0);
        assert_eq!(predict_latency(&t, &f, 1, 3000.0), 10.0);
        assert_eq!(
            predict_latency(&t, &BatchFeatures::single(500), 1, 1000.0),
            20.0
        );
        assert_eq!(t.grid().clamp_count(), 2);
    }

    #[test]
    fn dense_grid_tracks_inverse_frequency() {
        let c = 20_000.0;
        let freqs: Vec<f64> = (0..=108).map(|i| 900.0 + 10.0 * i as f64).collect();
        let vals = freqs.iter().map(|f| c / f).collect();
        let t = LatencyTable::new(freq_table(TableKind::Latency, vals, freqs)).unwrap();
        let f = BatchFeatures::single(100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let q = rng.random_range(900.0..1980.0);
            let got = predict_latency(&t, &f, 1, q);
            assert!((got - c / q).abs() / (c / q) < 0.01);
        }
    }

    #[test]
    fn idle_power_lookup() {
        let ladder = FrequencyLadder::new(vec![1000.0, 2000.0]).unwrap();
        let fam = SynthFamily::from_name("compute-bound", Phase::Prefill).unwrap();
        let m = synth_model(&fam, Phase::Prefill, &ladder, &[1, 2]).unwrap();
        let at_knot = predict_idle_power(&m.idle, 2, 1000.0).unwrap();
        assert!((at_knot - fam.idle_w(2.0, 1000.0)).abs() < 1e-9);
        let mid = predict_idle_power(&m.idle, 2, 1500.0).unwrap();
        let expect = (fam.idle_w(2.0, 1000.0) + fam.idle_w(2.0, 2000.0)) / 2.0;
        assert!((mid - expect).abs() < 1e-9);
        assert!(matches!(
            predict_idle_power(&m.idle, 4, 1000.0),
            Err(Error::Model(_))
        ));
        // idle never exceeds busy power at the same point
        for tp in [1, 2] {
            for &f in ladder.freqs() {
                let idle = predict_idle_power(&m.idle, tp, f).unwrap();
                for s in [1u64, 500, 100_000] {
                    let busy = predict_power(&m.power, &BatchFeatures::single(s), tp, f);
                    assert!(idle <= busy);
                }
            }
        }
    }

    #[test]
    fn validation_reports_inverted_pair() {
        let good = freq_table(
            TableKind::Latency,
            vec![30.0, 20.0, 10.0],
            vec![1.0, 2.0, 3.0],
        );
        assert!(validate_model(&good).is_empty());
        let bad = freq_table(
            TableKind::Latency,
            vec![30.0, 10.0, 20.0],
            vec![1.0, 2.0, 3.0],
        );
        assert_eq!(
            validate_model(&bad),
            vec![Violation::FreqMonotonicity { index: vec![0, 1] }]
        );
        let p = freq_table(
            TableKind::Power,
            vec![30.0, 10.0, 40.0],
            vec![1.0, 2.0, 3.0],
        );
        assert_eq!(
            validate_model(&p),
            vec![Violation::FreqMonotonicity { index: vec![0, 0] }]
        );
        let neg = freq_table(
            TableKind::Power,
            vec![-1.0, 10.0, 40.0],
            vec![1.0, 2.0, 3.0],
        );
        assert_eq!(
            validate_model(&neg),
            vec![Violation::NonPositive { index: vec![0, 0] }]
        );
    }

    #[test]
    fn empty_grid_is_structural_violation() {
        let raw = r#"{"version":1,"kind":"latency","phase":"prefill","axes":[],"values":[]}"#;
        assert!(GridTable::from_json(raw).is_err());
        let t: GridTable = serde_json::from_str(raw).unwrap();
        let v = validate_model(&t);
        assert!(!v.is_empty());
        assert!(v.iter().all(|x| matches!(x, Violation::Structure(_))));
    }

    #[test]
    fn compute_bound_latency_halves_with_double_frequency() {
        let ladder = FrequencyLadder::new(vec![990.0, 1980.0]).unwrap();
        let fam = SynthFamily::from_name("compute-bound", Phase::Prefill).unwrap();
        let m = synth_model(&fam, Phase::Prefill, &ladder, &[1, 4]).unwrap();
        for s in [1u64, 100, 4000] {
            let f = BatchFeatures::single(s);
            let lo = predict_latency(&m.latency, &f, 4, 990.0);
            let hi = predict_latency(&m.latency, &f, 4, 1980.0);
            assert!((lo / hi - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn memory_bound_flat_above_knee() {
        let fam = SynthFamily::from_name("memory-bound", Phase::Decode).unwrap();
        let knee = fam.params().knee_freq_mhz;
        let a = fam.latency_ms(5000.0, 10.0, 1.0, knee + 100.0);
        let b = fam.latency_ms(5000.0, 10.0, 1.0, 1980.0);
        assert!((a - b).abs() < 1e-9);
        assert!(fam.latency_ms(5000.0, 10.0, 1.0, knee - 300.0) > b);
    }

    #[test]
    fn unknown_family_rejected() {
        assert!(matches!(
            SynthFamily::from_name("quantum", Phase::Prefill),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn synthetic_tables_are_valid_and_exact_between_knots() {
        let ladder = FrequencyLadder::default_h100();
        for name in ["compute-bound", "memory-bound"] {
            for phase in [Phase::Prefill, Phase::Decode] {
                let fam = SynthFamily::from_name(name, phase).unwrap();
                let m = synth_model(&fam, phase, &ladder, &[1, 2, 4]).unwrap();
                assert!(validate_model(m.latency.grid()).is_empty());
                assert!(validate_model(m.power.grid()).is_empty());
                assert!(validate_model(m.idle.grid()).is_empty());
                let f = BatchFeatures::from_lengths([300, 1234, 77]);
                for &freq in ladder.freqs() {
                    let got = predict_latency(&m.latency, &f, 2, freq);
                    let want = fam.latency_ms(f.sum_len as f64, 3.0, 2.0, freq);
                    assert!((got - want).abs() < 1e-9 * want);
                }
            }
        }
    }

    #[test]
    fn random_power_queries_monotone_in_frequency() {
        let ladder = FrequencyLadder::default_h100();
        let fam = SynthFamily::from_name("compute-bound", Phase::Decode).unwrap();
        let m = synth_model(&fam, Phase::Decode, &ladder, &[1, 2, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let f = BatchFeatures::from_lengths(
                (0..rng.random_range(1..64)).map(|_| rng.random_range(1..4000u64)),
            );
            let tp = [1, 2, 4][rng.random_range(0..3)];
            let a = rng.random_range(900.0..1980.0);
            let b = rng.random_range(900.0..1980.0);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            assert!(predict_power(&m.power, &f, tp, lo) <= predict_power(&m.power, &f, tp, hi));
            let e = predict_power(&m.power, &f, tp, lo) * predict_latency(&m.latency, &f, tp, lo);
            assert!(e.is_finite() && e > 0.0);
        }
    }

    #[test]
    fn compute_bound_energy_falls_with_frequency() {
        let ladder = FrequencyLadder::default_h100();
        let fam = SynthFamily::from_name("compute-bound", Phase::Prefill).unwrap();
        let m = synth_model(&fam, Phase::Prefill, &ladder, &[1, 2, 4]).unwrap();
        for s in [64u64, 2048, 8192] {
            let f = BatchFeatures::single(s);
            let energies: Vec<f64> = ladder
                .freqs()
                .iter()
                .map(|&fr| {
                    predict_power(&m.power, &f, 2, fr) * predict_latency(&m.latency, &f, 2, fr)
                })
                .collect();
            assert!(energies.windows(2).all(|w| w[0] <= w[1]), "{energies:?}");
        }
    }

    #[test]
    fn model_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ladder = FrequencyLadder::default_h100();
        let ms = ModelSet::synthetic("compute-bound", "memory-bound", &ladder, &[1, 2]).unwrap();
        ms.save_dir(dir.path()).unwrap();
        let back = ModelSet::load_dir(dir.path()).unwrap();
        assert_eq!(back, ms);
        assert_eq!(back.digest().unwrap(), ms.digest().unwrap());
        ms.check_coverage(Phase::Decode, 2, &ladder).unwrap();
        assert!(ms.check_coverage(Phase::Decode, 8, &ladder).is_err());
    }

    #[test]
    fn ladder_selection_keeps_ends() {
        let l = FrequencyLadder::new((1..=13).map(|i| i as f64 * 100.0).collect()).unwrap();
        let s = l.select(7);
        assert_eq!(s.len(), 7);
        assert_eq!(s.min(), 100.0);
        assert_eq!(s.max(), 1300.0);
        assert!(FrequencyLadder::new(vec![2.0, 1.0]).is_err());
        assert!(FrequencyLadder::new(vec![]).is_err());
    }
}
