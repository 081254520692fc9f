//! Per-precision power/delay/PDP modeling calibrated from measured stage
//! costs, plus the DSP packing arithmetic.
//!
//! Measured tables list, per (exit, precision), the average power and the
//! stage delay. Both columns scale linearly with the stage's cumulative
//! MAC count, so calibration fits two per-MAC constants per precision:
//! `power_per_mac` (W/MAC) and `delay_per_mac` (s/MAC). The scheduler's
//! per-MAC energy is derived at the main-exit operating point,
//! `e_mac = n_me * power_per_mac * delay_per_mac`, since stage energy
//! (power x delay) grows quadratically in the stage size under this model.

use serde::{Deserialize, Serialize};

use crate::eats::{HardwareProfile, PerPrecision};
use crate::error::{Error, Result};
use crate::netgraph::{ExitPoint, MultiExitNetwork};
use crate::quantizer::BitWidth;

/// Relative mismatch tolerated between a row's `power * delay` and its
/// stated PDP before the units are declared inconsistent.
pub const PDP_UNIT_TOLERANCE: f64 = 0.02;

/// One measured stage: exit, precision, average power (W), delay (s), and
/// optionally the published power-delay product for cross-checking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalRow {
    pub exit: ExitPoint,
    pub precision: BitWidth,
    pub power: f64,
    pub delay: f64,
    pub pdp: Option<f64>,
}

impl CalRow {
    /// Relative error between `power * delay` and the stated PDP.
    pub fn pdp_relative_error(&self) -> Option<f64> {
        self.pdp.map(|p| (self.power * self.delay - p).abs() / p)
    }
}

/// Per-slice hardware characteristics at one precision. The derived
/// per-MAC figures assume `packing_factor` MACs retire per slice-cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionCost {
    pub packing_factor: u32,
    pub power_per_slice: f64,
    pub cycle_time: f64,
}

impl PrecisionCost {
    pub fn new(packing_factor: u32, power_per_slice: f64, cycle_time: f64) -> Result<Self> {
        if packing_factor == 0 || !(power_per_slice > 0.0) || !(cycle_time > 0.0) {
            return Err(Error::Invalid("precision cost fields must be positive".into()));
        }
        Ok(PrecisionCost { packing_factor, power_per_slice, cycle_time })
    }

    pub fn delay_mac(&self) -> f64 {
        self.cycle_time / self.packing_factor as f64
    }

    pub fn e_mac(&self) -> f64 {
        self.power_per_slice * self.cycle_time / self.packing_factor as f64
    }
}

/// Cost of running one stage (everything up to an exit) at one precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub exit: ExitPoint,
    pub precision: BitWidth,
    pub power: f64,
    pub delay: f64,
    pub pdp: f64,
}

/// Linear cost of a stage under a scheduler profile: delay and energy both
/// scale with the MAC count, so power is the profile's constant draw.
pub fn stage_cost(
    net: &MultiExitNetwork,
    exit: ExitPoint,
    precision: BitWidth,
    profile: &HardwareProfile,
) -> StageCost {
    let n = net.cumulative_macs(exit) as f64;
    stage_cost_for_macs(n, exit, precision, profile)
}

pub fn stage_cost_for_macs(
    n_macs: f64,
    exit: ExitPoint,
    precision: BitWidth,
    profile: &HardwareProfile,
) -> StageCost {
    let delay = n_macs * profile.delay_mac.get(precision);
    let energy = n_macs * profile.e_mac.get(precision);
    let power = if delay > 0.0 { energy / delay } else { 0.0 };
    StageCost { exit, precision, power, delay, pdp: power * delay }
}

/// Fitted per-MAC constants for one precision, with the worst relative
/// residual of each column over the rows it was fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedPrecision {
    pub power_per_mac: f64,
    pub delay_per_mac: f64,
    pub power_residual: f64,
    pub delay_residual: f64,
}

/// Calibration result across all three precisions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedModel {
    pub fp32: FittedPrecision,
    pub q8: FittedPrecision,
    pub q4: FittedPrecision,
}

impl CalibratedModel {
    pub fn get(&self, bw: BitWidth) -> &FittedPrecision {
        match bw {
            BitWidth::Fp32 => &self.fp32,
            BitWidth::Q8 => &self.q8,
            BitWidth::Q4 => &self.q4,
        }
    }

    /// Delay ratio versus fp32; the parallelism the reduced precision
    /// achieves per hardware multiplier.
    pub fn packing_ratio(&self, bw: BitWidth) -> f64 {
        self.fp32.delay_per_mac / self.get(bw).delay_per_mac
    }

    /// Re-emit the measured table from the fit: `power = n * power_per_mac`,
    /// `delay = n * delay_per_mac`.
    pub fn stage(&self, exit: ExitPoint, precision: BitWidth, n_macs: f64) -> StageCost {
        let f = self.get(precision);
        let power = n_macs * f.power_per_mac;
        let delay = n_macs * f.delay_per_mac;
        StageCost { exit, precision, power, delay, pdp: power * delay }
    }

    /// Scheduler profile fragment: linear per-MAC delay straight from the
    /// fit, per-MAC energy anchored at the main-exit workload `n_me`.
    pub fn to_hardware_profile(&self, n_me: f64, f_max: f64, kappa_rate: f64, kappa_energy: f64) -> Result<HardwareProfile> {
        if !(n_me > 0.0) {
            return Err(Error::Invalid(format!("n_me must be positive, got {n_me}")));
        }
        let e_mac = PerPrecision {
            fp32: n_me * self.fp32.power_per_mac * self.fp32.delay_per_mac,
            q8: n_me * self.q8.power_per_mac * self.q8.delay_per_mac,
            q4: n_me * self.q4.power_per_mac * self.q4.delay_per_mac,
        };
        let delay_mac = PerPrecision {
            fp32: self.fp32.delay_per_mac,
            q8: self.q8.delay_per_mac,
            q4: self.q4.delay_per_mac,
        };
        let profile = HardwareProfile { e_mac, delay_mac, f_max, kappa_rate, kappa_energy };
        profile.validate()?;
        Ok(profile)
    }
}

/// Cumulative MAC counts per exit used to fit a table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacCounts {
    pub ee1: f64,
    pub ee2: f64,
    pub me: f64,
}

impl MacCounts {
    pub fn from_network(net: &MultiExitNetwork) -> Self {
        MacCounts {
            ee1: net.cumulative_macs(ExitPoint::Ee1) as f64,
            ee2: net.cumulative_macs(ExitPoint::Ee2) as f64,
            me: net.cumulative_macs(ExitPoint::Me) as f64,
        }
    }

    pub fn get(&self, e: ExitPoint) -> f64 {
        match e {
            ExitPoint::Ee1 => self.ee1,
            ExitPoint::Ee2 => self.ee2,
            ExitPoint::Me => self.me,
        }
    }
}

/// Fit per-MAC power and delay for every precision by least squares
/// through the origin against the given MAC counts. Requires at least one
/// row per precision; rejects rows whose stated PDP disagrees with
/// `power * delay` by more than 2%.
pub fn calibrate_profile(rows: &[CalRow], macs: &MacCounts) -> Result<CalibratedModel> {
    for row in rows {
        if !(row.power > 0.0) || !(row.delay > 0.0) {
            return Err(Error::Invalid(format!(
                "nonpositive power/delay in row ({}, {})",
                row.exit, row.precision
            )));
        }
        if let Some(err) = row.pdp_relative_error() {
            if err > PDP_UNIT_TOLERANCE {
                return Err(Error::Invalid(format!(
                    "inconsistent units in row ({}, {}): power*delay differs from pdp by {:.1}%",
                    row.exit,
                    row.precision,
                    err * 100.0
                )));
            }
        }
    }
    let fit_one = |bw: BitWidth| -> Result<FittedPrecision> {
        let subset: Vec<&CalRow> = rows.iter().filter(|r| r.precision == bw).collect();
        if subset.is_empty() {
            return Err(Error::Invalid(format!("calibration table has no {bw} rows")));
        }
        let mut num_p = 0.0;
        let mut num_d = 0.0;
        let mut den = 0.0;
        for r in &subset {
            let n = macs.get(r.exit);
            num_p += n * r.power;
            num_d += n * r.delay;
            den += n * n;
        }
        let power_per_mac = num_p / den;
        let delay_per_mac = num_d / den;
        let mut power_residual = 0.0f64;
        let mut delay_residual = 0.0f64;
        for r in &subset {
            let n = macs.get(r.exit);
            power_residual = power_residual.max((n * power_per_mac - r.power).abs() / r.power);
            delay_residual = delay_residual.max((n * delay_per_mac - r.delay).abs() / r.delay);
        }
        Ok(FittedPrecision { power_per_mac, delay_per_mac, power_residual, delay_residual })
    };
    Ok(CalibratedModel { fp32: fit_one(BitWidth::Fp32)?, q8: fit_one(BitWidth::Q8)?, q4: fit_one(BitWidth::Q4)? })
}

/// Percentage reductions at one stage when dropping fp32 for a reduced
/// precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageReduction {
    pub exit: ExitPoint,
    pub precision: BitWidth,
    pub power_reduction_pct: f64,
    pub delay_reduction_pct: f64,
    pub pdp_reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub stages: Vec<StageReduction>,
}

fn pct(base: f64, reduced: f64) -> f64 {
    (1.0 - reduced / base) * 100.0
}

/// Per-stage power/delay/PDP reductions of Q8 and Q4 against fp32 under a
/// calibrated model. The percentages are workload-independent; the MAC
/// counts only set the absolute figures.
pub fn reduction_report(model: &CalibratedModel, macs: &MacCounts) -> ReductionReport {
    let mut stages = Vec::new();
    for exit in ExitPoint::ALL {
        let n = macs.get(exit);
        let base = model.stage(exit, BitWidth::Fp32, n);
        for bw in [BitWidth::Q8, BitWidth::Q4] {
            let reduced = model.stage(exit, bw, n);
            stages.push(StageReduction {
                exit,
                precision: bw,
                power_reduction_pct: pct(base.power, reduced.power),
                delay_reduction_pct: pct(base.delay, reduced.delay),
                pdp_reduction_pct: pct(base.pdp, reduced.pdp),
            });
        }
    }
    ReductionReport { stages }
}

/// Parse `exit,precision,power,delay[,pdp]` rows; a header row is
/// tolerated.
pub fn parse_cal_table(text: &str, source_name: &str) -> Result<Vec<CalRow>> {
    let mut rows = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 && fields.len() != 5 {
            return Err(Error::parse(source_name, lineno + 1, "expected 4 or 5 comma-separated fields"));
        }
        let parsed: Result<CalRow> = (|| {
            let exit: ExitPoint = fields[0].parse()?;
            let precision: BitWidth = fields[1].parse()?;
            let power: f64 = fields[2]
                .parse()
                .map_err(|_| Error::Invalid(format!("bad power '{}'", fields[2])))?;
            let delay: f64 = fields[3]
                .parse()
                .map_err(|_| Error::Invalid(format!("bad delay '{}'", fields[3])))?;
            let pdp = match fields.get(4) {
                Some(f) => Some(
                    f.parse::<f64>()
                        .map_err(|_| Error::Invalid(format!("bad pdp '{f}'")))?,
                ),
                None => None,
            };
            Ok(CalRow { exit, precision, power, delay, pdp })
        })();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if lineno == 0 && rows.is_empty() => continue, // header
            Err(e) => return Err(Error::parse(source_name, lineno + 1, e.to_string())),
        }
    }
    if rows.is_empty() {
        return Err(Error::parse(source_name, 0, "calibration table has no data rows"));
    }
    Ok(rows)
}

pub fn load_cal_table(path: &std::path::Path) -> Result<Vec<CalRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_cal_table(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> HardwareProfile {
        HardwareProfile {
            e_mac: PerPrecision { fp32: 2e-9, q8: 5e-10, q4: 2.5e-10 },
            delay_mac: PerPrecision { fp32: 2.22e-9, q8: 3.7e-10, q4: 1.85e-10 },
            f_max: 1.0,
            kappa_rate: 1.2,
            kappa_energy: 1.2,
        }
    }

    #[test]
    fn stage_cost_is_linear_in_macs() {
        let p = profile();
        let a = stage_cost_for_macs(1e6, ExitPoint::Me, BitWidth::Q8, &p);
        let b = stage_cost_for_macs(2e6, ExitPoint::Me, BitWidth::Q8, &p);
        assert!((b.delay - 2.0 * a.delay).abs() < 1e-15);
        assert!((b.pdp - 2.0 * a.pdp).abs() < 1e-12);
        assert_eq!(a.power, b.power);
    }

    #[test]
    fn zero_mac_stage_costs_nothing() {
        let c = stage_cost_for_macs(0.0, ExitPoint::Ee1, BitWidth::Fp32, &profile());
        assert_eq!((c.power, c.delay, c.pdp), (0.0, 0.0, 0.0));
    }

    #[test]
    fn pdp_identity_holds_exactly() {
        let c = stage_cost_for_macs(1.41e8, ExitPoint::Me, BitWidth::Fp32, &profile());
        assert_eq!(c.pdp, c.power * c.delay);
    }

    #[test]
    fn single_row_per_precision_fits_exactly() {
        let macs = MacCounts { ee1: 1e6, ee2: 2e6, me: 4e6 };
        let rows = [
            CalRow { exit: ExitPoint::Me, precision: BitWidth::Fp32, power: 8.0, delay: 0.4, pdp: None },
            CalRow { exit: ExitPoint::Me, precision: BitWidth::Q8, power: 2.0, delay: 0.1, pdp: None },
            CalRow { exit: ExitPoint::Me, precision: BitWidth::Q4, power: 1.0, delay: 0.05, pdp: None },
        ];
        let model = calibrate_profile(&rows, &macs).unwrap();
        assert!(model.fp32.power_residual < 1e-12);
        assert!(model.fp32.delay_residual < 1e-12);
        assert!((model.fp32.power_per_mac - 8.0 / 4e6).abs() < 1e-18);
        assert!((model.packing_ratio(BitWidth::Q4) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn missing_precision_rows_rejected() {
        let macs = MacCounts { ee1: 1.0, ee2: 2.0, me: 3.0 };
        let rows = [CalRow { exit: ExitPoint::Me, precision: BitWidth::Fp32, power: 1.0, delay: 1.0, pdp: None }];
        assert!(calibrate_profile(&rows, &macs).is_err());
    }

    #[test]
    fn inconsistent_pdp_units_rejected() {
        let macs = MacCounts { ee1: 1.0, ee2: 2.0, me: 3.0 };
        let rows = [
            CalRow { exit: ExitPoint::Me, precision: BitWidth::Fp32, power: 2.0, delay: 1.0, pdp: Some(3.0) },
            CalRow { exit: ExitPoint::Me, precision: BitWidth::Q8, power: 1.0, delay: 0.5, pdp: None },
            CalRow { exit: ExitPoint::Me, precision: BitWidth::Q4, power: 0.5, delay: 0.25, pdp: None },
        ];
        let err = calibrate_profile(&rows, &macs).unwrap_err();
        assert!(err.to_string().contains("inconsistent units"), "{err}");
    }

    #[test]
    fn reductions_of_fp32_against_itself_are_zero() {
        let model = CalibratedModel {
            fp32: FittedPrecision { power_per_mac: 1.0, delay_per_mac: 1.0, power_residual: 0.0, delay_residual: 0.0 },
            q8: FittedPrecision { power_per_mac: 0.5, delay_per_mac: 0.5, power_residual: 0.0, delay_residual: 0.0 },
            q4: FittedPrecision { power_per_mac: 0.25, delay_per_mac: 0.25, power_residual: 0.0, delay_residual: 0.0 },
        };
        let base = model.stage(ExitPoint::Me, BitWidth::Fp32, 10.0);
        assert_eq!(pct(base.power, base.power), 0.0);
        let report = reduction_report(&model, &MacCounts { ee1: 1.0, ee2: 2.0, me: 10.0 });
        let q8_me = report
            .stages
            .iter()
            .find(|s| s.exit == ExitPoint::Me && s.precision == BitWidth::Q8)
            .unwrap();
        assert!((q8_me.power_reduction_pct - 50.0).abs() < 1e-12);
        assert!((q8_me.pdp_reduction_pct - 75.0).abs() < 1e-12);
    }

    #[test]
    fn cal_table_parses_with_header_and_optional_pdp() {
        let text = "exit,precision,power,delay,pdp\nee1,fp32,9.36,8.92e-2,8.34e-1\nme,q4,4.08,2.61e-2\n";
        let rows = parse_cal_table(text, "mem").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].pdp, Some(0.834));
        assert_eq!(rows[1].pdp, None);
        assert!(parse_cal_table("ee1,fp32,bad,1.0\n", "mem").is_err());
    }

    #[test]
    fn precision_cost_derives_per_mac_figures() {
        let fp32 = PrecisionCost::new(1, 10.0, 4e-9).unwrap();
        let q4 = PrecisionCost::new(12, 5.0, 4e-9).unwrap();
        assert_eq!(fp32.delay_mac(), 4e-9);
        assert!((q4.delay_mac() - 4e-9 / 12.0).abs() < 1e-24);
        assert!(q4.e_mac() < fp32.e_mac());
        assert!(PrecisionCost::new(0, 1.0, 1.0).is_err());
    }
}
