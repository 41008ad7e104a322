//! Analytical sensing/compute energy and battery-life accounting.
//!
//! Power is in mW, time in seconds, so energies come out in mJ (1 mW·s =
//! 1 mJ). Battery capacity is in mWh.

use serde::{Deserialize, Serialize};

use crate::data::ModalitySpec;
use crate::error::{AmiError, Result};
use crate::trainer::EvalReport;

/// Which point of each sensor's power range to charge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerPoint {
    Min,
    Mid,
    Max,
}

/// How Sigma-Delta patch skipping is credited.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyMode {
    /// A skipped patch is neither sampled nor tokenized.
    SamplingAndCompute,
    /// A skipped patch is still sampled; only its tokenization is saved.
    ComputeOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub capacity_mwh: f64,
    pub power_point: PowerPoint,
    pub mode: EnergyMode,
    /// Compute cost of one tokenized patch.
    pub token_mj: f64,
    /// Fixed compute cost of one transformer layer per window.
    pub layer_mj: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        // With 4 layers and 40 tokens a dense window costs ~254.8 mJ, of
        // which ~35% scales with the number of tokens read.
        Self {
            capacity_mwh: 300.0,
            power_point: PowerPoint::Mid,
            mode: EnergyMode::SamplingAndCompute,
            token_mj: 2.2,
            layer_mj: 41.7,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.capacity_mwh > 0.0) {
            return Err(AmiError::config("energy.capacity_mwh", "must be > 0"));
        }
        if !(self.token_mj >= 0.0) || !(self.layer_mj >= 0.0) {
            return Err(AmiError::config("energy", "compute costs must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorPower {
    pub name: String,
    pub p_min: f64,
    pub p_mid: f64,
    pub p_max: f64,
}

impl SensorPower {
    pub fn new(name: impl Into<String>, p_min: f64, p_max: f64) -> Result<Self> {
        let name = name.into();
        let p_mid = (p_min + p_max) / 2.0;
        if !(p_min > 0.0 && p_min <= p_mid && p_mid <= p_max) {
            return Err(AmiError::config(
                format!("power.{name}"),
                format!("need 0 < min <= max, got [{p_min}, {p_max}]"),
            ));
        }
        Ok(Self {
            name,
            p_min,
            p_mid,
            p_max,
        })
    }

    pub fn at(&self, point: PowerPoint) -> f64 {
        match point {
            PowerPoint::Min => self.p_min,
            PowerPoint::Mid => self.p_mid,
            PowerPoint::Max => self.p_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerTable {
    pub sensors: Vec<SensorPower>,
    pub capacity_mwh: f64,
    pub point: PowerPoint,
    pub token_mj: f64,
    pub layer_mj: f64,
    pub layers: usize,
}

impl PowerTable {
    pub fn new(sensors: Vec<SensorPower>, cfg: &EnergyConfig, layers: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            sensors,
            capacity_mwh: cfg.capacity_mwh,
            point: cfg.power_point,
            token_mj: cfg.token_mj,
            layer_mj: cfg.layer_mj,
            layers,
        })
    }

    pub fn from_modalities(modalities: &[ModalitySpec], cfg: &EnergyConfig, layers: usize) -> Result<Self> {
        let sensors = modalities
            .iter()
            .map(|m| SensorPower::new(&m.name, m.power_mw[0], m.power_mw[1]))
            .collect::<Result<Vec<_>>>()?;
        Self::new(sensors, cfg, layers)
    }

    /// The four wearable sensors with their datasheet ranges.
    pub fn wearable_reference(cfg: &EnergyConfig, layers: usize) -> Result<Self> {
        let sensors = vec![
            SensorPower::new("imu", 0.3, 1.0)?,
            SensorPower::new("ecg", 1.0, 5.0)?,
            SensorPower::new("emg", 6.0, 15.0)?,
            SensorPower::new("ppg", 4.0, 10.0)?,
        ];
        Self::new(sensors, cfg, layers)
    }

    pub fn power(&self, m: usize) -> f64 {
        self.sensors[m].at(self.point)
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.sensors.len() {
            return Err(AmiError::Invalid(format!(
                "trace covers {n} modalities, power table has {}",
                self.sensors.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowEnergy {
    pub sensing_mj: f64,
    pub compute_mj: f64,
}

impl WindowEnergy {
    pub fn total(&self) -> f64 {
        self.sensing_mj + self.compute_mj
    }
}

/// Energy of one stream's window: `gates[m]` and `patches[m][l]` as in a
/// sensing trace.
pub fn window_energy(
    gates: &[bool],
    patches: &[Vec<bool>],
    table: &PowerTable,
    window_seconds: f64,
    mode: EnergyMode,
) -> Result<WindowEnergy> {
    table.check_len(gates.len())?;
    table.check_len(patches.len())?;
    let mut e = WindowEnergy {
        sensing_mj: 0.0,
        compute_mj: table.layers as f64 * table.layer_mj,
    };
    for (m, (&open, row)) in gates.iter().zip(patches).enumerate() {
        if !open || row.is_empty() {
            continue;
        }
        let active = row.iter().filter(|&&a| a).count();
        let duty = match mode {
            EnergyMode::SamplingAndCompute => active as f64 / row.len() as f64,
            EnergyMode::ComputeOnly => 1.0,
        };
        e.sensing_mj += duty * table.power(m) * window_seconds;
        e.compute_mj += active as f64 * table.token_mj;
    }
    Ok(e)
}

/// Average per-modality activity over an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DutyCycles {
    /// Fraction of windows with the gate open.
    pub gate: Vec<f64>,
    /// Fraction of patches read (gate × active-patch fraction).
    pub patch: Vec<f64>,
    pub patches_per_window: usize,
}

impl DutyCycles {
    pub fn dense(modalities: usize, patches_per_window: usize) -> Self {
        Self {
            gate: vec![1.0; modalities],
            patch: vec![1.0; modalities],
            patches_per_window,
        }
    }

    pub fn from_report(report: &EvalReport) -> Self {
        let l = report.heatmap.first().map_or(0, Vec::len);
        Self {
            gate: report.modality_rates.clone(),
            patch: report
                .heatmap
                .iter()
                .map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64)
                .collect(),
            patches_per_window: l,
        }
    }

    /// Duty cycle that the sensor is powered under `mode`.
    pub fn sensing(&self, mode: EnergyMode) -> &[f64] {
        match mode {
            EnergyMode::SamplingAndCompute => &self.patch,
            EnergyMode::ComputeOnly => &self.gate,
        }
    }
}

/// Expected per-window energy under average duty cycles.
pub fn mean_window_energy(duty: &DutyCycles, table: &PowerTable, window_seconds: f64, mode: EnergyMode) -> Result<WindowEnergy> {
    table.check_len(duty.gate.len())?;
    table.check_len(duty.patch.len())?;
    let sensing = duty.sensing(mode);
    let mut e = WindowEnergy {
        sensing_mj: 0.0,
        compute_mj: table.layers as f64 * table.layer_mj,
    };
    for m in 0..sensing.len() {
        e.sensing_mj += sensing[m] * table.power(m) * window_seconds;
        e.compute_mj += duty.patch[m] * duty.patches_per_window as f64 * table.token_mj;
    }
    Ok(e)
}

/// Hours of operation on sensing power alone. A zero total draw returns
/// `f64::INFINITY`.
pub fn battery_life(duty: &[f64], table: &PowerTable) -> Result<f64> {
    table.check_len(duty.len())?;
    if let Some(d) = duty.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(AmiError::Invalid(format!("duty cycle {d} not in [0, 1]")));
    }
    let power: f64 = duty.iter().enumerate().map(|(m, d)| d * table.power(m)).sum();
    Ok(life_hours(table.capacity_mwh, power))
}

fn life_hours(capacity_mwh: f64, power_mw: f64) -> f64 {
    if power_mw > 0.0 {
        capacity_mwh / power_mw
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub modalities: Vec<String>,
    pub window_seconds: f64,
    pub mode: EnergyMode,
    /// Modality sensing rate, percent.
    pub sensing_pct: f64,
    pub sensing_mj: f64,
    pub compute_mj: f64,
    /// Sensing plus compute, averaged over time.
    pub avg_power_mw: f64,
    pub battery_life_h: f64,
    /// Battery life counting the sensors only.
    pub sensing_life_h: f64,
}

impl EnergyReport {
    pub fn new(duty: &DutyCycles, table: &PowerTable, window_seconds: f64, mode: EnergyMode) -> Result<Self> {
        if !(window_seconds > 0.0) {
            return Err(AmiError::Invalid(format!("window length {window_seconds} s must be > 0")));
        }
        let e = mean_window_energy(duty, table, window_seconds, mode)?;
        let avg_power_mw = e.total() / window_seconds;
        let m = duty.gate.len().max(1) as f64;
        Ok(Self {
            modalities: table.sensors.iter().map(|s| s.name.clone()).collect(),
            window_seconds,
            mode,
            sensing_pct: 100.0 * duty.gate.iter().sum::<f64>() / m,
            sensing_mj: e.sensing_mj,
            compute_mj: e.compute_mj,
            avg_power_mw,
            battery_life_h: life_hours(table.capacity_mwh, avg_power_mw),
            sensing_life_h: battery_life(duty.sensing(mode), table)?,
        })
    }

    pub fn total_mj(&self) -> f64 {
        self.sensing_mj + self.compute_mj
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Savings {
    pub baseline: EnergyReport,
    pub ami: EnergyReport,
    /// Relative reduction of total (sensing + compute) energy, percent.
    pub energy_pct: f64,
    pub sensing_energy_pct: f64,
    pub compute_energy_pct: f64,
}

/// `(baseline − ami) / baseline` per metric.
pub fn savings_report(ami: &EnergyReport, baseline: &EnergyReport) -> Result<Savings> {
    if ami.modalities != baseline.modalities || ami.window_seconds != baseline.window_seconds || ami.mode != baseline.mode {
        return Err(AmiError::Invalid(
            "savings need runs with the same modalities, window length and accounting mode".into(),
        ));
    }
    let rel = |b: f64, a: f64| if b > 0.0 { 100.0 * (b - a) / b } else { 0.0 };
    Ok(Savings {
        energy_pct: rel(baseline.total_mj(), ami.total_mj()),
        sensing_energy_pct: rel(baseline.sensing_mj, ami.sensing_mj),
        compute_energy_pct: rel(baseline.compute_mj, ami.compute_mj),
        baseline: baseline.clone(),
        ami: ami.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryPoint {
    pub subset: Vec<String>,
    pub power_mw: f64,
    pub hours: f64,
}

/// Battery life of every non-empty sensor subset, always-on, singles first.
pub fn battery_curve(table: &PowerTable) -> Vec<BatteryPoint> {
    let m = table.sensors.len();
    let mut masks: Vec<u32> = (1..(1u32 << m)).collect();
    masks.sort_by_key(|s| (s.count_ones(), *s));
    masks
        .into_iter()
        .map(|mask| {
            let idx: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            let power_mw = idx.iter().map(|&i| table.power(i)).sum();
            BatteryPoint {
                subset: idx.iter().map(|&i| table.sensors[i].name.clone()).collect(),
                power_mw,
                hours: life_hours(table.capacity_mwh, power_mw),
            }
        })
        .collect()
}

pub fn battery_curve_csv(points: &[BatteryPoint]) -> String {
    let mut s = String::from("subset,power_mw,hours\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.subset.join("+"), p.power_mw, p.hours));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(point: PowerPoint) -> PowerTable {
        let cfg = EnergyConfig {
            power_point: point,
            ..EnergyConfig::default()
        };
        PowerTable::wearable_reference(&cfg, 4).unwrap()
    }

    #[test]
    fn one_sensor_one_second() {
        let t = PowerTable::new(vec![SensorPower::new("x", 10.0, 10.0).unwrap()], &EnergyConfig::default(), 0).unwrap();
        let e = window_energy(&[true], &[vec![true, true]], &t, 1.0, EnergyMode::SamplingAndCompute).unwrap();
        assert_eq!(e.sensing_mj, 10.0);
        let off = window_energy(&[false], &[vec![false, false]], &t, 1.0, EnergyMode::SamplingAndCompute).unwrap();
        assert_eq!(off.sensing_mj, 0.0);
    }

    #[test]
    fn imu_alone_midpoint() {
        let t = table(PowerPoint::Mid);
        let h = battery_life(&[1.0, 0.0, 0.0, 0.0], &t).unwrap();
        assert!((h - 300.0 / 0.65).abs() < 1e-9);
        assert!((h - 461.5).abs() < 0.05);
    }

    #[test]
    fn zero_draw_is_unbounded() {
        assert_eq!(battery_life(&[0.0; 4], &table(PowerPoint::Mid)).unwrap(), f64::INFINITY);
        assert!(battery_life(&[1.5, 0.0, 0.0, 0.0], &table(PowerPoint::Mid)).is_err());
    }

    #[test]
    fn mismatched_trace_rejected() {
        let t = table(PowerPoint::Mid);
        assert!(window_energy(&[true; 3], &vec![vec![true]; 3], &t, 1.0, EnergyMode::ComputeOnly).is_err());
    }

    #[test]
    fn identical_runs_save_nothing() {
        let t = table(PowerPoint::Mid);
        let r = EnergyReport::new(&DutyCycles::dense(4, 10), &t, 2.0, EnergyMode::SamplingAndCompute).unwrap();
        let s = savings_report(&r, &r).unwrap();
        assert_eq!((s.energy_pct, s.sensing_energy_pct, s.compute_energy_pct), (0.0, 0.0, 0.0));
        assert!((r.battery_life_h - 300.0 / r.avg_power_mw).abs() < 1e-12);
    }

    #[test]
    fn equal_power_sampling_savings_follow_sensing() {
        let sensors = (0..4).map(|i| SensorPower::new(format!("s{i}"), 2.0, 2.0).unwrap()).collect();
        let t = PowerTable::new(sensors, &EnergyConfig::default(), 4).unwrap();
        let dense = EnergyReport::new(&DutyCycles::dense(4, 10), &t, 1.0, EnergyMode::SamplingAndCompute).unwrap();
        let duty = DutyCycles {
            gate: vec![0.38; 4],
            patch: vec![0.38; 4],
            patches_per_window: 10,
        };
        let ami = EnergyReport::new(&duty, &t, 1.0, EnergyMode::SamplingAndCompute).unwrap();
        let s = savings_report(&ami, &dense).unwrap();
        assert!((s.sensing_energy_pct - 62.0).abs() < 1e-9);
    }

    #[test]
    fn default_compute_coefficients_track_reference_savings() {
        // 4 layers, 40 tokens, 38% of tokens read.
        let t = table(PowerPoint::Mid);
        let dense = 4.0 * t.layer_mj + 40.0 * t.token_mj;
        let ami = 4.0 * t.layer_mj + 0.38 * 40.0 * t.token_mj;
        assert!((dense - 254.74).abs() / 254.74 < 0.2);
        let saved = 100.0 * (dense - ami) / dense;
        assert!((saved - 21.40).abs() < 1.0, "{saved}");
    }

    #[test]
    fn curve_lists_every_subset() {
        let pts = battery_curve(&table(PowerPoint::Mid));
        assert_eq!(pts.len(), 15);
        assert_eq!(pts[0].subset, vec!["imu"]);
        assert_eq!(pts[14].subset.len(), 4);
        let csv = battery_curve_csv(&pts);
        assert_eq!(csv.lines().count(), 16);
        assert!(csv.starts_with("subset,power_mw,hours\nimu,"));
    }

    proptest! {
        #[test]
        fn random_trace_matches_direct_sum(
            gates in proptest::collection::vec(any::<bool>(), 4),
            patches in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 5), 4),
            secs in 0.5f64..4.0,
        ) {
            let t = table(PowerPoint::Mid);
            let mids = [0.65, 3.0, 10.5, 7.0];
            let patches: Vec<Vec<bool>> = patches.iter().zip(&gates).map(|(r, &g)| r.iter().map(|&a| a && g).collect()).collect();
            let e = window_energy(&gates, &patches, &t, secs, EnergyMode::SamplingAndCompute).unwrap();
            let mut sensing = 0.0;
            let mut tokens = 0usize;
            for m in 0..4 {
                let n = patches[m].iter().filter(|&&a| a).count();
                tokens += n;
                if gates[m] {
                    sensing += mids[m] * secs * n as f64 / 5.0;
                }
            }
            prop_assert!((e.sensing_mj - sensing).abs() < 1e-9);
            prop_assert!((e.compute_mj - (4.0 * 41.7 + tokens as f64 * 2.2)).abs() < 1e-9);
            let full = window_energy(&gates, &patches, &t, secs, EnergyMode::ComputeOnly).unwrap();
            prop_assert!(e.total() <= full.total() + 1e-12);
        }

        #[test]
        fn halving_duty_doubles_life(d in proptest::collection::vec(0.01f64..1.0, 4)) {
            let t = table(PowerPoint::Mid);
            let full = battery_life(&d, &t).unwrap();
            let half: Vec<f64> = d.iter().map(|x| x / 2.0).collect();
            prop_assert_eq!(battery_life(&half, &t).unwrap(), 2.0 * full);
        }
    }
}
