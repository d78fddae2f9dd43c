//! Session loading, multirate alignment and unit conversion.
//!
//! A session directory holds `manifest.json`, `labels.json` and one
//! `trial_<k>.csv` per grasp. Trial files carry full rows every 20 ms and
//! microphone-only rows in between (the microphone runs at 100 Hz).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{validation, ClampError, Result};
use crate::labels::{Compliance, Material};

pub const SCHEMA_VERSION: u32 = 1;
/// Grid period of the aligned non-microphone streams.
pub const GRID_PERIOD_MS: f64 = 20.0;
pub const MIC_PERIOD_MS: f64 = 10.0;
/// Maximum distance between a grid point and the raw sample assigned to it.
pub const ALIGN_TOLERANCE_MS: f64 = 2.0;

pub const CSV_HEADER: [&str; 17] = [
    "t_ms",
    "active_v",
    "passive_v",
    "force_v",
    "mic_v",
    "imu1_ax",
    "imu1_ay",
    "imu1_az",
    "imu1_gx",
    "imu1_gy",
    "imu1_gz",
    "imu2_ax",
    "imu2_ay",
    "imu2_az",
    "imu2_gx",
    "imu2_gy",
    "imu2_gz",
];

/// A raw stream: timestamps plus one or more value channels sampled at them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    pub t_ms: Vec<f64>,
    pub channels: Vec<Vec<f64>>,
}

impl Stream {
    pub fn new(t_ms: Vec<f64>, channels: Vec<Vec<f64>>) -> Self {
        Self { t_ms, channels }
    }

    pub fn len(&self) -> usize {
        self.t_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_ms.is_empty()
    }

    fn check(&self, name: &str) -> Result<()> {
        for c in &self.channels {
            if c.len() != self.t_ms.len() {
                return Err(ClampError::Shape {
                    expected: format!("{name} channel length {}", self.t_ms.len()),
                    got: c.len().to_string(),
                });
            }
        }
        if let Some(w) = self.t_ms.windows(2).find(|w| w[1] <= w[0]) {
            return Err(validation(format!("{name} timestamps not strictly increasing ({} then {})", w[0], w[1])));
        }
        Ok(())
    }
}

/// IMU readings: accelerometer in g, gyroscope in deg/s, three axes each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuSeries {
    pub accel: [Vec<f64>; 3],
    pub gyro: [Vec<f64>; 3],
}

impl ImuSeries {
    pub fn len(&self) -> usize {
        self.accel[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_channels(&self) -> Vec<Vec<f64>> {
        self.accel.iter().chain(self.gyro.iter()).cloned().collect()
    }

    fn from_channels(mut ch: Vec<Vec<f64>>) -> Self {
        let g: Vec<Vec<f64>> = ch.split_off(3);
        let [ax, ay, az]: [Vec<f64>; 3] = ch.try_into().expect("three accel channels");
        let [gx, gy, gz]: [Vec<f64>; 3] = g.try_into().expect("three gyro channels");
        Self { accel: [ax, ay, az], gyro: [gx, gy, gz] }
    }
}

/// Raw multirate streams of one grasp trial, volts unless noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub object_id: String,
    /// 1-based.
    pub trial_index: usize,
    /// Active and passive thermistor divider voltages.
    pub thermal: Stream,
    pub force: Stream,
    /// 100 Hz contact microphone.
    pub mic: Stream,
    pub imu1: Stream,
    pub imu2: Stream,
}

impl TrialRecord {
    /// Builds a record whose non-microphone streams share one clock.
    #[allow(clippy::too_many_arguments)]
    pub fn from_shared_clock(
        object_id: impl Into<String>,
        trial_index: usize,
        t_ms: Vec<f64>,
        active_v: Vec<f64>,
        passive_v: Vec<f64>,
        force_v: Vec<f64>,
        mic_t_ms: Vec<f64>,
        mic_v: Vec<f64>,
        imu1: ImuSeries,
        imu2: ImuSeries,
    ) -> Self {
        Self {
            object_id: object_id.into(),
            trial_index,
            thermal: Stream::new(t_ms.clone(), vec![active_v, passive_v]),
            force: Stream::new(t_ms.clone(), vec![force_v]),
            mic: Stream::new(mic_t_ms, vec![mic_v]),
            imu1: Stream::new(t_ms.clone(), imu1.to_channels()),
            imu2: Stream::new(t_ms, imu2.to_channels()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.thermal.check("thermal")?;
        self.force.check("force")?;
        self.mic.check("mic")?;
        self.imu1.check("imu1")?;
        self.imu2.check("imu2")?;
        if self.thermal.channels.len() != 2
            || self.force.channels.len() != 1
            || self.mic.channels.len() != 1
            || self.imu1.channels.len() != 6
            || self.imu2.channels.len() != 6
        {
            return Err(validation("trial record has the wrong number of channels per sensor"));
        }
        Ok(())
    }

    fn non_mic_streams(&self) -> [(&'static str, &Stream); 4] {
        [("thermal", &self.thermal), ("force", &self.force), ("imu1", &self.imu1), ("imu2", &self.imu2)]
    }

    /// Whether every non-microphone stream uses the same timestamps.
    pub fn has_shared_clock(&self) -> bool {
        let t = &self.thermal.t_ms;
        self.non_mic_streams().iter().all(|(_, s)| &s.t_ms == t)
    }

    /// Serializes in the session CSV layout. Requires a shared clock and a
    /// microphone sampled on the 10 ms grid that contains the base timestamps.
    pub fn to_csv(&self) -> Result<String> {
        self.validate()?;
        if !self.has_shared_clock() {
            return Err(validation("CSV export requires non-mic streams on one clock"));
        }
        let mut out = CSV_HEADER.join(",");
        out.push('\n');
        let base = &self.thermal.t_ms;
        let mic_t = &self.mic.t_ms;
        let mic_v = &self.mic.channels[0];
        let (mut i, mut j) = (0usize, 0usize);
        let fmt_full = |i: usize, mic: Option<f64>, out: &mut String| {
            let mut cells = vec![fmt_num(base[i])];
            cells.push(fmt_num(self.thermal.channels[0][i]));
            cells.push(fmt_num(self.thermal.channels[1][i]));
            cells.push(fmt_num(self.force.channels[0][i]));
            cells.push(mic.map(fmt_num).unwrap_or_default());
            for c in self.imu1.channels.iter().chain(self.imu2.channels.iter()) {
                cells.push(fmt_num(c[i]));
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        };
        while i < base.len() || j < mic_t.len() {
            let tb = base.get(i).copied().unwrap_or(f64::INFINITY);
            let tm = mic_t.get(j).copied().unwrap_or(f64::INFINITY);
            if tb == tm {
                fmt_full(i, Some(mic_v[j]), &mut out);
                i += 1;
                j += 1;
            } else if tb < tm {
                fmt_full(i, None, &mut out);
                i += 1;
            } else {
                out.push_str(&fmt_num(tm));
                out.push_str(",,,,");
                out.push_str(&fmt_num(mic_v[j]));
                out.push_str(&",".repeat(12));
                out.push('\n');
                j += 1;
            }
        }
        Ok(out)
    }
}

fn fmt_num(v: f64) -> String {
    // Shortest representation that parses back to the same f64.
    format!("{v}")
}

/// Parses one trial CSV. `file` is used in error messages only.
pub fn parse_trial_csv(text: &str, file: &str, object_id: &str, trial_index: usize) -> Result<TrialRecord> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(text.as_bytes());
    let header =
        reader.headers().map_err(|e| ClampError::Parse { file: file.into(), line: 1, msg: e.to_string() })?.clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != CSV_HEADER {
        return Err(ClampError::Schema {
            file: file.into(),
            msg: format!("expected header '{}', got '{}'", CSV_HEADER.join(","), got.join(",")),
        });
    }
    let mut t = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); 16];
    let mut mic_t = Vec::new();
    let mut mic_v = Vec::new();
    for (row_idx, rec) in reader.records().enumerate() {
        let line = row_idx + 2;
        let perr = |msg: String| ClampError::Parse { file: file.into(), line, msg };
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        if rec.len() != CSV_HEADER.len() {
            return Err(perr(format!("expected {} fields, found {}", CSV_HEADER.len(), rec.len())));
        }
        let cell = |k: usize| -> Result<Option<f64>> {
            let s = rec[k].trim();
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|_| perr(format!("column {}: cannot parse '{s}'", CSV_HEADER[k])))
            }
        };
        let ts = cell(0)?.ok_or_else(|| perr("missing t_ms".into()))?;
        let values: Vec<Option<f64>> = (1..17).map(cell).collect::<Result<_>>()?;
        let mic = values[3];
        let others: Vec<Option<f64>> = values.iter().enumerate().filter(|(k, _)| *k != 3).map(|(_, v)| *v).collect();
        if let Some(m) = mic {
            if let Some(&last) = mic_t.last() {
                if ts <= last {
                    return Err(perr(format!("non-monotone mic timestamp {ts} after {last}")));
                }
            }
            mic_t.push(ts);
            mic_v.push(m);
        }
        if others.iter().all(Option::is_none) {
            if mic.is_none() {
                return Err(perr("row carries no sensor values".into()));
            }
            continue;
        }
        if others.iter().any(Option::is_none) {
            return Err(perr("incomplete sensor row".into()));
        }
        if let Some(&last) = t.last() {
            if ts <= last {
                return Err(perr(format!("non-monotone timestamp {ts} after {last}")));
            }
        }
        t.push(ts);
        for (k, v) in values.iter().enumerate() {
            if k != 3 {
                cols[k].push(v.expect("checked above"));
            }
        }
    }
    if t.is_empty() {
        return Err(ClampError::Empty(format!("{file}: no sensor rows")));
    }
    let imu1 = ImuSeries::from_channels(cols[4..10].to_vec());
    let imu2 = ImuSeries::from_channels(cols[10..16].to_vec());
    let rec = TrialRecord::from_shared_clock(
        object_id,
        trial_index,
        t,
        std::mem::take(&mut cols[0]),
        std::mem::take(&mut cols[1]),
        std::mem::take(&mut cols[2]),
        mic_t,
        mic_v,
        imu1,
        imu2,
    );
    rec.validate()?;
    Ok(rec)
}

/// Ground-truth annotations of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub material: Material,
    pub heterogeneous_surfaces: bool,
    pub compliance: Compliance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub object_id: String,
    pub labels: LabelRecordJson,
    pub n_trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub embodiment: Option<String>,
}

/// Labels as stored on disk (free-text names, validated on load).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRecordJson {
    pub material: String,
    pub heterogeneous_surfaces: bool,
    pub compliance: String,
}

impl From<&LabelRecord> for LabelRecordJson {
    fn from(l: &LabelRecord) -> Self {
        Self {
            material: l.material.name().to_string(),
            heterogeneous_surfaces: l.heterogeneous_surfaces,
            compliance: l.compliance.name().to_string(),
        }
    }
}

impl LabelRecordJson {
    pub fn resolve(&self) -> Result<LabelRecord> {
        Ok(LabelRecord {
            material: self.material.parse()?,
            heterogeneous_surfaces: self.heterogeneous_surfaces,
            compliance: self.compliance.parse()?,
        })
    }
}

pub fn write_labels_json(labels: &LabelRecord) -> Result<String> {
    Ok(serde_json::to_string_pretty(&LabelRecordJson::from(labels))? + "\n")
}

#[derive(Debug, Clone)]
pub struct LoadedSession {
    pub object_id: String,
    pub labels: LabelRecord,
    pub seed: Option<u64>,
    pub embodiment: Option<String>,
    pub trials: Vec<TrialRecord>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| ClampError::io(path, e))
}

fn trial_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| ClampError::io(dir, e))? {
        let entry = entry.map_err(|e| ClampError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(k) =
            name.strip_prefix("trial_").and_then(|r| r.strip_suffix(".csv")).and_then(|k| k.parse::<usize>().ok())
        {
            out.push((k, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads a session directory. Without a manifest, a bare directory of
/// `trial_<k>.csv` files plus `labels.json` is accepted and the directory
/// name becomes the object id.
pub fn load_session(dir: impl AsRef<Path>) -> Result<LoadedSession> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let labels_path = dir.join("labels.json");
    let (object_id, labels, seed, embodiment, expected) = if manifest_path.exists() {
        let text = read_text(&manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| ClampError::Schema { file: manifest_path.display().to_string(), msg: e.to_string() })?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(ClampError::Schema {
                file: manifest_path.display().to_string(),
                msg: format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", manifest.schema_version),
            });
        }
        let labels = manifest.labels.resolve()?;
        (manifest.object_id, labels, Some(manifest.seed), manifest.embodiment, Some(manifest.n_trials))
    } else if labels_path.exists() {
        let raw: LabelRecordJson = serde_json::from_str(&read_text(&labels_path)?)
            .map_err(|e| ClampError::Schema { file: labels_path.display().to_string(), msg: e.to_string() })?;
        let object_id = dir.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_else(|| "unknown".into());
        (object_id, raw.resolve()?, None, None, None)
    } else {
        return Err(ClampError::Schema {
            file: manifest_path.display().to_string(),
            msg: "missing manifest.json (and no labels.json sidecar)".into(),
        });
    };
    let files = trial_files(dir)?;
    if let Some(n) = expected {
        if files.len() != n {
            return Err(ClampError::Schema {
                file: manifest_path.display().to_string(),
                msg: format!("manifest lists {n} trials, found {} trial files", files.len()),
            });
        }
    }
    let trials = files
        .iter()
        .map(|(k, path)| {
            let name = path.display().to_string();
            parse_trial_csv(&read_text(path)?, &name, &object_id, *k)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedSession { object_id, labels, seed, embodiment, trials })
}

/// Which leg of the voltage divider the NTC thermistor sits in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DividerTopology {
    /// NTC between the ADC node and ground: `v = vcc * r / (r + r_ref)`.
    /// Voltage falls as temperature rises.
    NtcToGround,
    /// NTC between supply and the ADC node: `v = vcc * r_ref / (r + r_ref)`.
    NtcToSupply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThermistorConfig {
    pub vcc: f64,
    pub r_ref_ohm: f64,
    pub r0_ohm: f64,
    pub t0_c: f64,
    pub beta_k: f64,
    pub topology: DividerTopology,
}

impl Default for ThermistorConfig {
    fn default() -> Self {
        Self {
            vcc: 3.3,
            r_ref_ohm: 10_000.0,
            r0_ohm: 10_000.0,
            t0_c: 25.0,
            beta_k: 3450.0,
            topology: DividerTopology::NtcToGround,
        }
    }
}

const KELVIN: f64 = 273.15;

impl ThermistorConfig {
    pub fn resistance_from_voltage(&self, v: f64) -> Result<f64> {
        if !(v > 0.0 && v < self.vcc) || !v.is_finite() {
            return Err(ClampError::Range { value: v, range: format!("(0, {}) V", self.vcc) });
        }
        Ok(match self.topology {
            DividerTopology::NtcToGround => self.r_ref_ohm * v / (self.vcc - v),
            DividerTopology::NtcToSupply => self.r_ref_ohm * (self.vcc - v) / v,
        })
    }

    pub fn voltage_from_resistance(&self, r: f64) -> f64 {
        match self.topology {
            DividerTopology::NtcToGround => self.vcc * r / (r + self.r_ref_ohm),
            DividerTopology::NtcToSupply => self.vcc * self.r_ref_ohm / (r + self.r_ref_ohm),
        }
    }

    /// Beta-model NTC resistance at `t_c`.
    pub fn resistance_at(&self, t_c: f64) -> f64 {
        let t = t_c + KELVIN;
        let t0 = self.t0_c + KELVIN;
        self.r0_ohm * (self.beta_k * (1.0 / t - 1.0 / t0)).exp()
    }

    pub fn celsius_to_voltage(&self, t_c: f64) -> f64 {
        self.voltage_from_resistance(self.resistance_at(t_c))
    }
}

/// Inverts the divider to the NTC resistance and applies the beta model
/// `T = 1 / (1/T0 + ln(R/R0)/B) - 273.15`.
pub fn thermistor_voltage_to_celsius(v: f64, cfg: &ThermistorConfig) -> Result<f64> {
    let r = cfg.resistance_from_voltage(v)?;
    let inv = 1.0 / (cfg.t0_c + KELVIN) + (r / cfg.r0_ohm).ln() / cfg.beta_k;
    let t = 1.0 / inv - KELVIN;
    if !t.is_finite() || inv <= 0.0 {
        return Err(ClampError::Range { value: v, range: "voltage maps to a non-physical temperature".into() });
    }
    Ok(t)
}

/// Exponential FSR calibration `F = a * exp(b * v)` in newtons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FsrCalibration {
    pub a: f64,
    pub b: f64,
}

pub fn fsr_voltage_to_newtons(v: f64, cal: &FsrCalibration) -> f64 {
    cal.a * (cal.b * v).exp()
}

/// Least-squares fit of `ln F = ln a + b v`.
pub fn fit_fsr_calibration(pairs: &[(f64, f64)]) -> Result<FsrCalibration> {
    if pairs.len() < 2 {
        return Err(validation("need at least two (voltage, force) pairs"));
    }
    if pairs.iter().any(|(_, f)| *f <= 0.0) {
        return Err(validation("forces must be positive for a log-space fit"));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(validation("voltages must not all be equal"));
    }
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1.ln() - my)).sum();
    let b = sxy / sxx;
    Ok(FsrCalibration { a: (my - b * mx).exp(), b })
}

/// Streams resampled onto the common 50 Hz grid, thermal channels in deg C.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedTrial {
    pub object_id: String,
    pub trial_index: usize,
    pub t_ms: Vec<f64>,
    pub active_c: Vec<f64>,
    pub passive_c: Vec<f64>,
    /// Uncalibrated FSR volts.
    pub force_v: Vec<f64>,
    /// 100 Hz, two samples per grid step.
    pub mic_v: Vec<f64>,
    pub imu1: ImuSeries,
    pub imu2: ImuSeries,
    pub gaps: GapReport,
}

impl AlignedTrial {
    pub fn len(&self) -> usize {
        self.t_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_ms.is_empty()
    }

    /// Re-serializes into a raw record (temperatures back to volts).
    pub fn to_record(&self, cfg: &ThermistorConfig) -> TrialRecord {
        let mic_t: Vec<f64> = (0..self.mic_v.len()).map(|k| self.t_ms[0] + k as f64 * MIC_PERIOD_MS).collect();
        TrialRecord::from_shared_clock(
            self.object_id.clone(),
            self.trial_index,
            self.t_ms.clone(),
            self.active_c.iter().map(|&t| cfg.celsius_to_voltage(t)).collect(),
            self.passive_c.iter().map(|&t| cfg.celsius_to_voltage(t)).collect(),
            self.force_v.clone(),
            mic_t,
            self.mic_v.clone(),
            self.imu1.clone(),
            self.imu2.clone(),
        )
    }
}

/// Fraction of grid points with no raw sample within the alignment tolerance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub thermal: f64,
    pub force: f64,
    pub mic: f64,
    pub imu1: f64,
    pub imu2: f64,
}

impl GapReport {
    pub fn max(&self) -> f64 {
        [self.thermal, self.force, self.mic, self.imu1, self.imu2].into_iter().fold(0.0, f64::max)
    }
}

/// Nearest-timestamp resampling of `stream` onto `grid`. Grid points whose
/// nearest raw sample is further than the tolerance are gaps and take the
/// previous aligned value (the nearest raw value if the gap is at the start).
fn resample(stream: &Stream, grid: &[f64]) -> (Vec<Vec<f64>>, f64) {
    let t = &stream.t_ms;
    let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(grid.len()); stream.channels.len()];
    let mut gaps = 0usize;
    let mut j = 0usize;
    for &g in grid {
        while j + 1 < t.len() && (t[j + 1] - g).abs() <= (t[j] - g).abs() {
            j += 1;
        }
        let within = (t[j] - g).abs() <= ALIGN_TOLERANCE_MS + 1e-9;
        if !within {
            gaps += 1;
        }
        for (c, col) in stream.channels.iter().zip(out.iter_mut()) {
            let v = if within || col.is_empty() { c[j] } else { *col.last().unwrap() };
            col.push(v);
        }
    }
    let frac = if grid.is_empty() { 0.0 } else { gaps as f64 / grid.len() as f64 };
    (out, frac)
}

pub fn align_streams(trial: &TrialRecord) -> Result<AlignedTrial> {
    align_streams_with(trial, &ThermistorConfig::default())
}

pub fn align_streams_with(trial: &TrialRecord, cfg: &ThermistorConfig) -> Result<AlignedTrial> {
    for (name, s) in trial.non_mic_streams().iter().chain([("mic", &trial.mic)].iter()) {
        if s.is_empty() {
            return Err(ClampError::Empty(format!("{name} stream of trial {}", trial.trial_index)));
        }
    }
    trial.validate()?;
    let streams = trial.non_mic_streams();
    let start = streams.iter().map(|(_, s)| s.t_ms[0]).fold(f64::INFINITY, f64::min);
    let end = streams.iter().map(|(_, s)| *s.t_ms.last().unwrap()).fold(f64::INFINITY, f64::min);
    if end < start {
        return Err(validation("streams do not overlap in time"));
    }
    let n = ((end - start) / GRID_PERIOD_MS + 1e-9).floor() as usize + 1;
    let grid: Vec<f64> = (0..n).map(|i| start + i as f64 * GRID_PERIOD_MS).collect();
    let mic_grid: Vec<f64> = (0..2 * n).map(|i| start + i as f64 * MIC_PERIOD_MS).collect();

    let (thermal, g_thermal) = resample(&trial.thermal, &grid);
    let (force, g_force) = resample(&trial.force, &grid);
    let (imu1, g_imu1) = resample(&trial.imu1, &grid);
    let (imu2, g_imu2) = resample(&trial.imu2, &grid);
    let (mic, g_mic) = resample(&trial.mic, &mic_grid);

    let to_c = |v: &[f64]| -> Result<Vec<f64>> { v.iter().map(|&x| thermistor_voltage_to_celsius(x, cfg)).collect() };
    let mut thermal = thermal.into_iter();
    let active_c = to_c(&thermal.next().unwrap())?;
    let passive_c = to_c(&thermal.next().unwrap())?;
    Ok(AlignedTrial {
        object_id: trial.object_id.clone(),
        trial_index: trial.trial_index,
        t_ms: grid,
        active_c,
        passive_c,
        force_v: force.into_iter().next().unwrap(),
        mic_v: mic.into_iter().next().unwrap(),
        imu1: ImuSeries::from_channels(imu1),
        imu2: ImuSeries::from_channels(imu2),
        gaps: GapReport { thermal: g_thermal, force: g_force, mic: g_mic, imu1: g_imu1, imu2: g_imu2 },
    })
}
