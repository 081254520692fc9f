//! Charging-rate traces: CSV loading, synthetic generators, and
//! dt-resampling with linear interpolation.

use std::path::Path;

use crate::error::{Error, Result};

/// Ordered `(t seconds, rate watts)` samples; timestamps strictly
/// increasing, rates nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct HarvestTrace {
    pub samples: Vec<(f64, f64)>,
}

impl HarvestTrace {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("trace has no samples".into()));
        }
        for (i, &(t, r)) in samples.iter().enumerate() {
            if !t.is_finite() || !r.is_finite() {
                return Err(Error::Invalid(format!("non-finite trace sample at row {i}")));
            }
            if r < 0.0 {
                return Err(Error::Invalid(format!("negative charging rate at row {i}")));
            }
            if i > 0 && t <= samples[i - 1].0 {
                return Err(Error::Invalid(format!(
                    "timestamps must be strictly increasing (row {i})"
                )));
            }
        }
        Ok(HarvestTrace { samples })
    }

    pub fn duration(&self) -> f64 {
        self.samples.last().unwrap().0
    }

    /// Rate at `t`: linear between samples, clamped to the end values
    /// outside the recorded span.
    pub fn rate_at(&self, t: f64) -> f64 {
        let s = &self.samples;
        if t <= s[0].0 {
            return s[0].1;
        }
        if t >= s[s.len() - 1].0 {
            return s[s.len() - 1].1;
        }
        let idx = s.partition_point(|&(st, _)| st <= t);
        let (t0, r0) = s[idx - 1];
        let (t1, r1) = s[idx];
        r0 + (r1 - r0) * (t - t0) / (t1 - t0)
    }

    /// Rates at `0, dt, 2dt, ...` covering the trace span (inclusive of the
    /// sample at or past the last whole step).
    pub fn resample(&self, dt: f64) -> Vec<f64> {
        let n = (self.duration() / dt).floor() as usize;
        (0..=n).map(|i| self.rate_at(i as f64 * dt)).collect()
    }
}

/// Parse a `t_seconds,charge_rate_watts` CSV; a single non-numeric header
/// row is tolerated.
pub fn load_trace(path: &Path) -> Result<HarvestTrace> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_trace(&text, &path.display().to_string())
}

pub fn parse_trace(text: &str, source_name: &str) -> Result<HarvestTrace> {
    let mut samples = Vec::new();
    let mut prev_t: Option<f64> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(Error::parse(source_name, lineno + 1, "expected two comma-separated fields"))
            }
        };
        let parsed = a.parse::<f64>().and_then(|t| b.parse::<f64>().map(|r| (t, r)));
        let (t, r) = match parsed {
            Ok(pair) => pair,
            Err(_) if lineno == 0 && samples.is_empty() => continue, // header row
            Err(_) => return Err(Error::parse(source_name, lineno + 1, "fields are not numbers")),
        };
        if r < 0.0 {
            return Err(Error::parse(source_name, lineno + 1, format!("negative charging rate {r}")));
        }
        if let Some(p) = prev_t {
            if t <= p {
                return Err(Error::parse(
                    source_name,
                    lineno + 1,
                    format!("timestamp {t} not greater than previous {p}"),
                ));
            }
        }
        prev_t = Some(t);
        samples.push((t, r));
    }
    if samples.is_empty() {
        return Err(Error::parse(source_name, 0, "trace file has no data rows"));
    }
    HarvestTrace::new(samples)
}

pub fn save_trace(trace: &HarvestTrace, path: &Path) -> Result<()> {
    let mut out = String::from("t_seconds,charge_rate_watts\n");
    for &(t, r) in &trace.samples {
        out.push_str(&format!("{t},{r}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Deterministic synthetic trace shapes.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthKind {
    Constant { rate: f64 },
    /// Piecewise constant: `(start_time, rate)` levels, first at t = 0.
    Step { levels: Vec<(f64, f64)> },
    /// `offset + amplitude * sin(2*pi*t / period)`, clamped at zero.
    Sinusoid { offset: f64, amplitude: f64, period: f64 },
}

pub fn synth_trace(kind: &SynthKind, duration: f64, dt: f64) -> Result<HarvestTrace> {
    if !(duration > 0.0) {
        return Err(Error::Invalid(format!("duration must be positive, got {duration}")));
    }
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("dt must be positive, got {dt}")));
    }
    match kind {
        SynthKind::Constant { rate } => {
            if *rate < 0.0 {
                return Err(Error::Invalid(format!("rate must be nonnegative, got {rate}")));
            }
        }
        SynthKind::Step { levels } => {
            if levels.is_empty() {
                return Err(Error::Invalid("step trace needs at least one level".into()));
            }
            if levels[0].0 != 0.0 {
                return Err(Error::Invalid("first step level must start at t = 0".into()));
            }
            for w in levels.windows(2) {
                if w[1].0 <= w[0].0 {
                    return Err(Error::Invalid("step level times must increase".into()));
                }
            }
            if levels.iter().any(|&(_, r)| r < 0.0) {
                return Err(Error::Invalid("step rates must be nonnegative".into()));
            }
        }
        SynthKind::Sinusoid { period, .. } => {
            if !(*period > 0.0) {
                return Err(Error::Invalid(format!("period must be positive, got {period}")));
            }
        }
    }
    let value = |t: f64| -> f64 {
        match kind {
            SynthKind::Constant { rate } => *rate,
            SynthKind::Step { levels } => {
                let mut r = levels[0].1;
                for &(start, rate) in levels {
                    if t >= start {
                        r = rate;
                    }
                }
                r
            }
            SynthKind::Sinusoid { offset, amplitude, period } => {
                (offset + amplitude * (2.0 * std::f64::consts::PI * t / period).sin()).max(0.0)
            }
        }
    };
    let n = (duration / dt).floor() as usize;
    let mut samples: Vec<(f64, f64)> = (0..=n).map(|i| (i as f64 * dt, value(i as f64 * dt))).collect();
    // Step changes must land exactly on their own timestamps even when they
    // fall between grid points.
    if let SynthKind::Step { levels } = kind {
        for &(start, _) in levels {
            if start > 0.0 && start < duration {
                // Insert the instant just before the edge so interpolation
                // does not smear the step.
                let eps = dt * 1e-6;
                for t in [start - eps, start] {
                    if samples.iter().all(|&(st, _)| st != t) {
                        samples.push((t, value(t)));
                    }
                }
            }
        }
        samples.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    }
    HarvestTrace::new(samples)
}
