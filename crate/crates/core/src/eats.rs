//! Energy-aware task scheduling: rate/energy thresholds, precision
//! selection from the harvested charging rate, and the per-exit
//! continue/terminate decision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::MultiExitNetwork;
use crate::quantizer::BitWidth;

/// One value per precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerPrecision<T> {
    pub fp32: T,
    pub q8: T,
    pub q4: T,
}

impl<T: Copy> PerPrecision<T> {
    pub fn get(&self, bw: BitWidth) -> T {
        match bw {
            BitWidth::Fp32 => self.fp32,
            BitWidth::Q8 => self.q8,
            BitWidth::Q4 => self.q4,
        }
    }
}

impl PerPrecision<f64> {
    fn check_ordered(&self, what: &str) -> Result<()> {
        if !(self.q4 > 0.0 && self.q8 > 0.0 && self.fp32 > 0.0) {
            return Err(Error::Invalid(format!("{what} must be strictly positive per precision")));
        }
        if !(self.q4 <= self.q8 && self.q8 <= self.fp32) {
            return Err(Error::Invalid(format!("{what} must satisfy q4 <= q8 <= fp32")));
        }
        Ok(())
    }
}

/// Per-MAC energy and delay for each precision plus frame-rate and safety
/// margins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// J per MAC.
    pub e_mac: PerPrecision<f64>,
    /// s per MAC.
    pub delay_mac: PerPrecision<f64>,
    /// Required frame rate (frames/s).
    pub f_max: f64,
    /// Margin on the rate thresholds.
    pub kappa_rate: f64,
    /// Margin on the energy threshold.
    pub kappa_energy: f64,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<()> {
        self.e_mac.check_ordered("e_mac")?;
        self.delay_mac.check_ordered("delay_mac")?;
        if !(self.f_max > 0.0) {
            return Err(Error::Invalid(format!("f_max must be positive, got {}", self.f_max)));
        }
        if self.kappa_rate < 1.0 || self.kappa_energy < 1.0 {
            return Err(Error::Invalid(format!(
                "kappa values must be >= 1, got rate {} / energy {}",
                self.kappa_rate, self.kappa_energy
            )));
        }
        Ok(())
    }

    /// Average draw while computing at `bw`.
    pub fn compute_power(&self, bw: BitWidth) -> f64 {
        self.e_mac.get(bw) / self.delay_mac.get(bw)
    }
}

/// Precision-selection rate thresholds (W) and the per-precision energy
/// floor (J) required to proceed past an exit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerThresholds {
    pub r_th1: f64,
    pub r_th2: f64,
    pub e_th: PerPrecision<f64>,
}

impl SchedulerThresholds {
    pub fn new(r_th1: f64, r_th2: f64, e_th: PerPrecision<f64>) -> Result<Self> {
        if !(r_th1 > 0.0 && r_th2 > r_th1) {
            return Err(Error::Invalid(format!(
                "rate thresholds must satisfy 0 < r_th1 < r_th2, got {r_th1} / {r_th2}"
            )));
        }
        e_th.check_ordered("e_th")?;
        Ok(SchedulerThresholds { r_th1, r_th2, e_th })
    }
}

/// Capacitor state: remaining energy, instantaneous charging rate, and
/// capacity. `0 <= e_sys <= e_cap` holds at all times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyState {
    pub e_sys: f64,
    pub r_c: f64,
    pub e_cap: f64,
}

/// Rate threshold: `kappa * f_max * n_mac * e_mac`.
pub fn compute_rate_threshold(kappa: f64, f_max: f64, n_mac: f64, e_mac: f64) -> Result<f64> {
    for (name, v) in [("kappa", kappa), ("f_max", f_max), ("n_mac", n_mac), ("e_mac", e_mac)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Invalid(format!("{name} must be positive and finite, got {v}")));
        }
    }
    Ok(kappa * f_max * n_mac * e_mac)
}

/// Energy threshold: `kappa * e_mac * max(n1, n2, n3)`, the per-precision
/// floor that guarantees the worst-case stage can finish.
pub fn compute_energy_threshold(kappa: f64, e_mac: f64, n1: f64, n2: f64, n3: f64) -> Result<f64> {
    for (name, v) in [("kappa", kappa), ("e_mac", e_mac), ("n1", n1), ("n2", n2), ("n3", n3)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Invalid(format!("{name} must be positive and finite, got {v}")));
        }
    }
    Ok(kappa * e_mac * n1.max(n2).max(n3))
}

/// Pick the precision the current charging rate can sustain.
pub fn select_precision(r_c: f64, thresholds: &SchedulerThresholds) -> Result<BitWidth> {
    if r_c < 0.0 || !r_c.is_finite() {
        return Err(Error::Invalid(format!("charging rate must be nonnegative, got {r_c}")));
    }
    Ok(if r_c >= thresholds.r_th2 {
        BitWidth::Fp32
    } else if r_c >= thresholds.r_th1 {
        BitWidth::Q8
    } else {
        BitWidth::Q4
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitDecision {
    Continue,
    TerminateHere,
}

/// At an exit point: proceed only if the remaining energy covers the
/// worst-case next stage.
pub fn decide_at_exit(e_sys: f64, e_th: f64) -> ExitDecision {
    if e_sys >= e_th {
        ExitDecision::Continue
    } else {
        ExitDecision::TerminateHere
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StartDecision {
    Start,
    Wait,
}

/// Gate before an inference begins; the selected precision is latched at
/// `Start` and held until the run terminates.
pub fn start_gate(e_sys: f64, e_th: f64) -> StartDecision {
    if e_sys >= e_th {
        StartDecision::Start
    } else {
        StartDecision::Wait
    }
}

/// Derive scheduler thresholds from a profile and a network.
///
/// The two rate thresholds bind to the precision they must sustain:
/// `r_th1` uses the Q8 per-MAC energy and `r_th2` the fp32 one, both over
/// the full cumulative workload to the main exit. The energy floor is
/// computed per precision from that precision's own per-MAC energy.
pub fn derive_thresholds(profile: &HardwareProfile, net: &MultiExitNetwork) -> Result<SchedulerThresholds> {
    profile.validate()?;
    let full = net.cumulative_macs(crate::netgraph::ExitPoint::Me) as f64;
    let [n1, n2, n3] = net.stage_macs().map(|n| n as f64);
    let r_th1 = compute_rate_threshold(profile.kappa_rate, profile.f_max, full, profile.e_mac.q8)?;
    let r_th2 = compute_rate_threshold(profile.kappa_rate, profile.f_max, full, profile.e_mac.fp32)?;
    let e_th = PerPrecision {
        fp32: compute_energy_threshold(profile.kappa_energy, profile.e_mac.fp32, n1, n2, n3)?,
        q8: compute_energy_threshold(profile.kappa_energy, profile.e_mac.q8, n1, n2, n3)?,
        q4: compute_energy_threshold(profile.kappa_energy, profile.e_mac.q4, n1, n2, n3)?,
    };
    SchedulerThresholds::new(r_th1, r_th2, e_th)
}

/// On-disk scheduler configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub e_mac: PerPrecision<f64>,
    pub delay_mac: PerPrecision<f64>,
    pub f_max: f64,
    #[serde(default = "default_kappa")]
    pub kappa_rate: f64,
    #[serde(default = "default_kappa")]
    pub kappa_energy: f64,
    #[serde(default)]
    pub overrides: ThresholdOverrides,
}

fn default_kappa() -> f64 {
    1.2
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdOverrides {
    pub r_th1: Option<f64>,
    pub r_th2: Option<f64>,
    pub e_th: Option<PerPrecision<f64>>,
}

impl SchedulerConfig {
    pub fn profile(&self) -> HardwareProfile {
        HardwareProfile {
            e_mac: self.e_mac,
            delay_mac: self.delay_mac,
            f_max: self.f_max,
            kappa_rate: self.kappa_rate,
            kappa_energy: self.kappa_energy,
        }
    }

    /// Thresholds derived from the profile and network, with any explicit
    /// overrides applied on top.
    pub fn thresholds(&self, net: &MultiExitNetwork) -> Result<SchedulerThresholds> {
        let derived = derive_thresholds(&self.profile(), net)?;
        SchedulerThresholds::new(
            self.overrides.r_th1.unwrap_or(derived.r_th1),
            self.overrides.r_th2.unwrap_or(derived.r_th2),
            self.overrides.e_th.unwrap_or(derived.e_th),
        )
    }
}

pub fn load_scheduler_config(path: &std::path::Path) -> Result<SchedulerConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let config: SchedulerConfig = toml::from_str(&text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start].lines().count()).unwrap_or(0);
        Error::parse(path.display().to_string(), line, e.message().to_string())
    })?;
    config.profile().validate()?;
    Ok(config)
}
