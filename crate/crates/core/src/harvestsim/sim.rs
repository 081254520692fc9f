//! Discrete-time simulation of adaptive inference under a harvested
//! charging rate.
//!
//! Time advances in `dt` ticks. The trace is resampled to the tick grid
//! and held constant within each tick. Start decisions happen at tick
//! boundaries; stage completions, exits, and depletion are resolved at
//! their exact sub-tick times. Charging continues while computing; a stage
//! draws `e_mac / delay_mac` watts at the latched precision for its whole
//! duration.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eats::{
    decide_at_exit, select_precision, start_gate, EnergyState, ExitDecision, HardwareProfile,
    SchedulerThresholds, StartDecision,
};
use crate::error::{Error, Result};
use crate::exitpolicy::{confidence, should_exit, ExitReason, ExitThresholds};
use crate::netgraph::{argmax, softmax, ExitPoint, ForwardEngine, MultiExitNetwork, WeightSet};
use crate::quantizer::BitWidth;
use crate::tensor::Tensor;

use super::trace::HarvestTrace;

pub const DEFAULT_DT: f64 = 1e-3;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Weight sets for every precision the scheduler may latch.
#[derive(Debug, Clone)]
pub struct WeightBundle {
    pub fp32: WeightSet,
    pub q8: WeightSet,
    pub q4: WeightSet,
}

impl WeightBundle {
    pub fn get(&self, bw: BitWidth) -> &WeightSet {
        match bw {
            BitWidth::Fp32 => &self.fp32,
            BitWidth::Q8 => &self.q8,
            BitWidth::Q4 => &self.q4,
        }
    }
}

/// Derive the quantized weight sets a simulation needs from fp32 weights,
/// calibrating activation ranges on the given inputs.
pub fn prepare_bundle(
    net: &MultiExitNetwork,
    fp32: WeightSet,
    calib_inputs: &[Tensor],
) -> Result<WeightBundle> {
    if calib_inputs.is_empty() {
        return Err(Error::Invalid("bundle preparation needs calibration inputs".into()));
    }
    let params = crate::trainer::params_from_weight_set(&fp32)?;
    let bank = crate::trainer::collect_activation_stats(net, &params, calib_inputs)?;
    let ranges = bank.ranges();
    let samples = bank.samples();
    let q8 = crate::netgraph::quantize_weight_set(&fp32, BitWidth::Q8, &ranges, &samples)?;
    let q4 = crate::netgraph::quantize_weight_set(&fp32, BitWidth::Q4, &ranges, &samples)?;
    Ok(WeightBundle { fp32, q8, q4 })
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub dt: f64,
    pub e_cap: f64,
    pub e_init: f64,
    /// Seed for the synthetic input stream.
    pub seed: u64,
    pub profile: HardwareProfile,
    pub thresholds: SchedulerThresholds,
    pub confidence: ExitThresholds,
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.e_cap > 0.0) || self.e_init < 0.0 || self.e_init > self.e_cap {
            return Err(Error::Invalid(format!(
                "need 0 <= e_init <= e_cap with e_cap > 0, got {} / {}",
                self.e_init, self.e_cap
            )));
        }
        self.profile.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    pub kind: SimEventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SimEventKind {
    PowerOn,
    PowerOff,
    StartInference { precision: BitWidth },
    ExitTaken { exit: ExitPoint, reason: ExitReason, class: usize },
    PrecisionLevelChange { from: BitWidth, to: BitWidth },
    EnergyDepletedMidSegment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampKind {
    Floor,
    Cap,
}

/// Ticks (inclusive interval indices) during which the capacitor hit a
/// bound, so per-tick energy conservation does not apply there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampSpan {
    pub first_tick: usize,
    pub last_tick: usize,
    pub kind: ClampKind,
}

/// The four panels plus per-tick consumption. `time`, `charging_rate` and
/// `e_sys` are instantaneous at the sample times; `precision`, `exits` and
/// `consumed` describe the tick that starts at the same index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SimSeries {
    pub time: Vec<f64>,
    pub charging_rate: Vec<f64>,
    pub precision: Vec<Option<BitWidth>>,
    pub e_sys: Vec<f64>,
    pub exits: Vec<Option<(ExitPoint, ExitReason)>>,
    pub consumed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub schema: u32,
    pub dt: f64,
    pub e_cap: f64,
    pub events: Vec<SimEvent>,
    pub series: SimSeries,
    pub clamp_spans: Vec<ClampSpan>,
}

impl SimResult {
    /// Precisions of the StartInference events, in order.
    pub fn start_precisions(&self) -> Vec<BitWidth> {
        self.events
            .iter()
            .filter_map(|e| match e.kind {
                SimEventKind::StartInference { precision } => Some(precision),
                _ => None,
            })
            .collect()
    }

    pub fn exit_events(&self) -> Vec<(ExitPoint, ExitReason)> {
        self.events
            .iter()
            .filter_map(|e| match e.kind {
                SimEventKind::ExitTaken { exit, reason, .. } => Some((exit, reason)),
                _ => None,
            })
            .collect()
    }
}

/// One explicit energy step: `e' = clamp(e + r_c*dt - consumption, 0, cap)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: EnergyState,
    pub clamped_low: bool,
    pub clamped_high: bool,
}

pub fn step_energy(state: &EnergyState, r_c: f64, consumption_j: f64, dt: f64) -> StepOutcome {
    debug_assert!(dt > 0.0 && consumption_j >= 0.0);
    let raw = state.e_sys + r_c * dt - consumption_j;
    let clamped_low = raw < 0.0;
    let clamped_high = raw > state.e_cap;
    let e_sys = raw.clamp(0.0, state.e_cap);
    StepOutcome { state: EnergyState { e_sys, r_c, e_cap: state.e_cap }, clamped_low, clamped_high }
}

struct RunState {
    precision: BitWidth,
    /// Stage currently executing, 0-based.
    stage: usize,
    /// Absolute time the stage completes.
    stage_end: f64,
    /// Activation entering the current stage's segment.
    activation: Tensor,
}

struct Recorder {
    events: Vec<SimEvent>,
    clamp_spans: Vec<ClampSpan>,
    powered: bool,
}

impl Recorder {
    fn emit(&mut self, time: f64, kind: SimEventKind) {
        self.events.push(SimEvent { time, kind });
    }

    /// Track power state transitions as energy crosses zero.
    fn track_power(&mut self, time: f64, e_sys: f64) {
        if e_sys > 0.0 && !self.powered {
            self.powered = true;
            self.emit(time, SimEventKind::PowerOn);
        } else if e_sys <= 0.0 && self.powered {
            self.powered = false;
            self.emit(time, SimEventKind::PowerOff);
        }
    }

    fn clamp(&mut self, tick: usize, kind: ClampKind) {
        if let Some(last) = self.clamp_spans.last_mut() {
            if last.kind == kind && last.last_tick + 1 >= tick {
                last.last_tick = last.last_tick.max(tick);
                return;
            }
        }
        self.clamp_spans.push(ClampSpan { first_tick: tick, last_tick: tick, kind });
    }
}

/// Run the scheduler + inference loop over a charging trace.
pub fn run_simulation(
    config: &SimConfig,
    net: &MultiExitNetwork,
    bundle: &WeightBundle,
    trace: &HarvestTrace,
) -> Result<SimResult> {
    config.validate()?;
    let dt = config.dt;
    let rates = trace.resample(dt);
    let n_ticks = rates.len() - 1;
    let stage_macs = net.stage_macs();
    let (c, h, w) = net.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut series = SimSeries::default();
    let mut rec = Recorder { events: Vec::new(), clamp_spans: Vec::new(), powered: false };
    let mut e_sys = config.e_init;
    let mut mode: Option<RunState> = None;
    let mut last_latched: Option<BitWidth> = None;

    rec.track_power(0.0, e_sys);

    for tick in 0..=n_ticks {
        let t_tick = tick as f64 * dt;
        series.time.push(t_tick);
        series.charging_rate.push(rates[tick]);
        series.e_sys.push(e_sys);

        if tick == n_ticks {
            // Final sample: no tick follows.
            series.precision.push(mode.as_ref().map(|r| r.precision));
            series.exits.push(None);
            series.consumed.push(0.0);
            break;
        }

        let r = rates[tick];
        let t_end = t_tick + dt;
        let mut t = t_tick;
        let mut consumed_this_tick = 0.0;
        let mut exit_this_tick: Option<(ExitPoint, ExitReason)> = None;
        let mut active_this_tick: Option<BitWidth> = None;

        // Start gate, evaluated at the tick boundary while idle.
        if mode.is_none() {
            let selected = select_precision(r, &config.thresholds)?;
            let e_th = config.thresholds.e_th.get(selected);
            if start_gate(e_sys, e_th) == StartDecision::Start {
                if let Some(prev) = last_latched {
                    if prev != selected {
                        rec.emit(t, SimEventKind::PrecisionLevelChange { from: prev, to: selected });
                    }
                }
                last_latched = Some(selected);
                rec.emit(t, SimEventKind::StartInference { precision: selected });
                let mut input = Tensor::zeros(vec![c, h, w]);
                for v in &mut input.data {
                    *v = rng.gen_range(-1.0..1.0);
                }
                let stage_time = stage_macs[0] as f64 * config.profile.delay_mac.get(selected);
                mode = Some(RunState {
                    precision: selected,
                    stage: 0,
                    stage_end: t + stage_time,
                    activation: input,
                });
            }
        }

        // Resolve stage completions that land inside this tick.
        while let Some(run) = mode.as_mut() {
            active_this_tick = Some(run.precision);
            if run.stage_end > t_end {
                break;
            }
            let span = run.stage_end - t;
            let draw = config.profile.compute_power(run.precision);
            let depletes_at = depletion_time(e_sys, r, draw, span);
            if let Some(dt_zero) = depletes_at {
                // The capacitor empties before the stage completes.
                let t_dead = t + dt_zero;
                consumed_this_tick += draw * dt_zero;
                e_sys = 0.0;
                rec.clamp(tick, ClampKind::Floor);
                rec.emit(t_dead, SimEventKind::EnergyDepletedMidSegment);
                rec.track_power(t_dead, e_sys);
                mode = None;
                t = t_dead;
                continue;
            }
            consumed_this_tick += draw * span;
            e_sys = (e_sys + (r - draw) * span).min(config.e_cap);
            t = run.stage_end;

            // Reached the exit at the end of this stage: run the segment
            // and its head, then apply the energy rule, then confidence.
            let weights = bundle.get(run.precision);
            let engine = ForwardEngine::new(net, weights, run.precision)?;
            let seg_out = engine.forward_segment(run.stage, &run.activation)?;
            let logits = engine.forward_exit_head(run.stage, &seg_out)?;
            let exit = ExitPoint::from_index(run.stage + 1)?;
            let e_th = config.thresholds.e_th.get(run.precision);
            let probs = softmax(&logits.data)?;
            let conf = confidence(&probs)?;
            let class = argmax(&logits.data);

            let decision = if decide_at_exit(e_sys, e_th) == ExitDecision::TerminateHere {
                Some(ExitReason::Energy)
            } else if should_exit(conf, config.confidence.for_exit(exit)) || exit == ExitPoint::Me {
                Some(ExitReason::Confidence)
            } else {
                None
            };
            match decision {
                Some(reason) => {
                    rec.emit(t, SimEventKind::ExitTaken { exit, reason, class });
                    exit_this_tick = Some((exit, reason));
                    mode = None;
                }
                None => {
                    let next = run.stage + 1;
                    let stage_time = stage_macs[next] as f64 * config.profile.delay_mac.get(run.precision);
                    run.stage = next;
                    run.stage_end = t + stage_time;
                    run.activation = seg_out;
                }
            }
        }

        // Advance the remainder of the tick.
        let span = t_end - t;
        if span > 0.0 {
            match mode.as_ref() {
                Some(run) => {
                    let draw = config.profile.compute_power(run.precision);
                    if let Some(dt_zero) = depletion_time(e_sys, r, draw, span) {
                        let t_dead = t + dt_zero;
                        consumed_this_tick += draw * dt_zero;
                        e_sys = 0.0;
                        rec.clamp(tick, ClampKind::Floor);
                        rec.emit(t_dead, SimEventKind::EnergyDepletedMidSegment);
                        rec.track_power(t_dead, e_sys);
                        mode = None;
                        // Idle charging for the rest of the tick.
                        let rest = t_end - t_dead;
                        e_sys = (e_sys + r * rest).min(config.e_cap);
                    } else {
                        consumed_this_tick += draw * span;
                        let raw = e_sys + (r - draw) * span;
                        if raw > config.e_cap {
                            rec.clamp(tick, ClampKind::Cap);
                        }
                        e_sys = raw.min(config.e_cap);
                    }
                }
                None => {
                    let raw = e_sys + r * span;
                    if raw > config.e_cap {
                        rec.clamp(tick, ClampKind::Cap);
                    }
                    e_sys = raw.min(config.e_cap);
                }
            }
        }
        rec.track_power(t_end, e_sys);

        series.precision.push(active_this_tick);
        series.exits.push(exit_this_tick);
        series.consumed.push(consumed_this_tick);
    }

    Ok(SimResult {
        schema: REPORT_SCHEMA_VERSION,
        dt,
        e_cap: config.e_cap,
        events: rec.events,
        series,
        clamp_spans: rec.clamp_spans,
    })
}

/// Time until the capacitor empties under net slope `r - draw`, if that
/// happens strictly within `span`.
fn depletion_time(e_sys: f64, r: f64, draw: f64, span: f64) -> Option<f64> {
    let net = r - draw;
    if net >= 0.0 {
        return None;
    }
    let dt_zero = e_sys / -net;
    (dt_zero < span).then_some(dt_zero)
}

pub fn export_report(result: &SimResult, path: &std::path::Path) -> Result<()> {
    let text = serde_json::to_string_pretty(result)
        .map_err(|e| Error::Invalid(format!("report serialization failed: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_report(path: &std::path::Path) -> Result<SimResult> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let report: SimResult = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))?;
    if report.schema != REPORT_SCHEMA_VERSION {
        return Err(Error::Invalid(format!(
            "unsupported report schema {} (expected {REPORT_SCHEMA_VERSION})",
            report.schema
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_energy_charges_and_clamps() {
        let state = EnergyState { e_sys: 0.0, r_c: 1.0, e_cap: 10.0 };
        let out = step_energy(&state, 1.0, 0.0, 1.0);
        assert_eq!(out.state.e_sys, 1.0);
        assert!(!out.clamped_low && !out.clamped_high);

        // Consumption beyond available energy floors at zero.
        let out = step_energy(&EnergyState { e_sys: 0.5, r_c: 0.0, e_cap: 10.0 }, 0.0, 2.0, 1.0);
        assert_eq!(out.state.e_sys, 0.0);
        assert!(out.clamped_low);

        // No inflow, no consumption: unchanged.
        let out = step_energy(&EnergyState { e_sys: 3.0, r_c: 0.0, e_cap: 10.0 }, 0.0, 0.0, 1.0);
        assert_eq!(out.state.e_sys, 3.0);

        // Overcharge clamps at capacity.
        let out = step_energy(&EnergyState { e_sys: 9.5, r_c: 0.0, e_cap: 10.0 }, 1.0, 0.0, 1.0);
        assert_eq!(out.state.e_sys, 10.0);
        assert!(out.clamped_high);
    }

    #[test]
    fn depletion_time_found_only_on_negative_slope() {
        assert_eq!(depletion_time(1.0, 2.0, 1.0, 10.0), None);
        assert_eq!(depletion_time(1.0, 0.0, 0.5, 10.0), Some(2.0));
        assert_eq!(depletion_time(1.0, 0.0, 0.5, 1.0), None); // crosses after span
    }
}
