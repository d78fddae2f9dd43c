//! Nine-channel feature tensors: primary channels, difference channels,
//! impedance, per-cup contact detection, segmentation/padding and the
//! dataset exclusion rules.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{validation, ClampError, Result};
use crate::ingest::{AlignedTrial, LabelRecord};
use crate::labels::{Embodiment, Material};
use crate::signal::{
    butterworth_lowpass, causal_moving_average, condition_linear_acceleration, condition_mic, FilterConfig,
    BASE_RATE_HZ,
};

pub const SEGMENT_LEN: usize = 491;
pub const N_CHANNELS: usize = 9;
pub const CHANNEL_NAMES: [&str; N_CHANNELS] = [
    "active_c",
    "passive_c",
    "force_v",
    "vibration",
    "proprioception",
    "d_active",
    "d_passive",
    "d_force",
    "impedance",
];
pub const CH_ACTIVE: usize = 0;
pub const CH_PASSIVE: usize = 1;
pub const CH_FORCE: usize = 2;
pub const CH_VIBRATION: usize = 3;
pub const CH_PROPRIOCEPTION: usize = 4;
pub const CH_D_ACTIVE: usize = 5;
pub const CH_D_PASSIVE: usize = 6;
pub const CH_D_FORCE: usize = 7;
pub const CH_IMPEDANCE: usize = 8;

/// Angle between IMU-2's x axis and IMU-1's x axis, about IMU-1's z axis.
pub const IMU_MOUNT_ANGLE_DEG: f64 = -25.0;

/// State-like channels are padded with their last value, derivative-like
/// channels with zero.
pub fn pads_with_last_value(channel: usize) -> bool {
    matches!(channel, CH_ACTIVE | CH_PASSIVE | CH_FORCE | CH_PROPRIOCEPTION)
}

/// Rotation taking IMU-2 coordinates to IMU-1 coordinates (`m[row][col]`).
/// IMU-2's y axis maps to IMU-1's z axis and its x axis lies in IMU-1's xy
/// plane, rotated by `angle_deg` about z.
pub fn imu_mount_rotation(angle_deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle_deg.to_radians().sin_cos();
    // Columns: x2 = (c, s, 0), y2 = (0, 0, 1), z2 = x2 × y2 = (s, -c, 0).
    [[c, 0.0, s], [s, 0.0, -c], [0.0, 1.0, 0.0]]
}

fn check_equal_lengths(what: &str, lens: &[usize]) -> Result<()> {
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(ClampError::Shape { expected: format!("{what}: equal lengths"), got: format!("{lens:?}") });
    }
    Ok(())
}

/// `(R·ω₂ − ω₁)_z` per timestep, in °/s.
pub fn relative_angular_velocity(gyro1: &[Vec<f64>; 3], gyro2: &[Vec<f64>; 3]) -> Result<Vec<f64>> {
    let lens: Vec<usize> = gyro1.iter().chain(gyro2.iter()).map(Vec::len).collect();
    check_equal_lengths("gyro axes", &lens)?;
    let r = imu_mount_rotation(IMU_MOUNT_ANGLE_DEG);
    Ok((0..lens[0]).map(|t| (0..3).map(|k| r[2][k] * gyro2[k][t]).sum::<f64>() - gyro1[2][t]).collect())
}

/// Jaw-axis relative linear acceleration `(a₂ − Rᵀ·a₁)_z` for parallel-jaw
/// grippers, where IMU-2 rides on the moving jaw.
pub fn relative_linear_acceleration(accel1: &[Vec<f64>; 3], accel2: &[Vec<f64>; 3]) -> Result<Vec<f64>> {
    let lens: Vec<usize> = accel1.iter().chain(accel2.iter()).map(Vec::len).collect();
    check_equal_lengths("accelerometer axes", &lens)?;
    let r = imu_mount_rotation(IMU_MOUNT_ANGLE_DEG);
    Ok((0..lens[0]).map(|t| accel2[2][t] - (0..3).map(|k| r[k][2] * accel1[k][t]).sum::<f64>()).collect())
}

/// One-step difference with a leading zero.
pub fn diff_feature(x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    if let Some(&first) = x.first() {
        out.push(0.0);
        let mut prev = first;
        for &v in &x[1..] {
            out.push(v - prev);
            prev = v;
        }
    }
    out
}

/// `F'/ω` where `ω ≥ δ`, else 0.
pub fn impedance_at(force_diff: f64, omega: f64, delta: f64) -> f64 {
    if omega >= delta {
        force_diff / omega
    } else {
        0.0
    }
}

pub fn impedance(force_diff: &[f64], omega: &[f64], delta: f64) -> Result<Vec<f64>> {
    check_equal_lengths("impedance inputs", &[force_diff.len(), omega.len()])?;
    if !(delta > 0.0) {
        return Err(validation("impedance threshold delta must be > 0"));
    }
    Ok(force_diff.iter().zip(omega).map(|(&f, &w)| impedance_at(f, w, delta)).collect())
}

/// `F'/a`, with `|a| < eps` mapped to 0 as a division guard only.
pub fn impedance_linear(force_diff: &[f64], lin_acc: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_equal_lengths("impedance inputs", &[force_diff.len(), lin_acc.len()])?;
    Ok(force_diff.iter().zip(lin_acc).map(|(&f, &a)| if a.abs() < eps { 0.0 } else { f / a }).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContactThresholds {
    pub force_v: f64,
    pub active_delta_c: f64,
    pub release_temp_c: f64,
}

impl Default for ContactThresholds {
    fn default() -> Self {
        Self { force_v: 0.01, active_delta_c: -0.01, release_temp_c: 53.0 }
    }
}

/// Contact spans `[onset, release)` on one cup. A contact still open at the
/// end of the series is closed at its length.
pub type Spans = Vec<(usize, usize)>;

pub fn detect_contact_left(active_c: &[f64]) -> Spans {
    detect_contact_left_with(active_c, &ContactThresholds::default())
}

pub fn detect_contact_left_with(active_c: &[f64], th: &ContactThresholds) -> Spans {
    let delta = diff_feature(active_c);
    let mut spans = Vec::new();
    let mut onset = None;
    for (t, (&d, &temp)) in delta.iter().zip(active_c).enumerate() {
        match onset {
            None if d < th.active_delta_c => onset = Some(t),
            Some(on) if d > 0.0 && temp < th.release_temp_c => {
                spans.push((on, t));
                onset = None;
            }
            _ => {}
        }
    }
    if let Some(on) = onset {
        spans.push((on, active_c.len()));
    }
    spans
}

pub fn detect_contact_right(force_v: &[f64]) -> Spans {
    detect_contact_right_with(force_v, &ContactThresholds::default())
}

pub fn detect_contact_right_with(force_v: &[f64], th: &ContactThresholds) -> Spans {
    let mut spans = Vec::new();
    let mut onset = None;
    for (t, &f) in force_v.iter().enumerate() {
        match onset {
            None if f > th.force_v => onset = Some(t),
            Some(on) if f <= th.force_v => {
                spans.push((on, t));
                onset = None;
            }
            _ => {}
        }
    }
    if let Some(on) = onset {
        spans.push((on, force_v.len()));
    }
    spans
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactEvents {
    pub left: Spans,
    pub right: Spans,
    /// Union of both cups' spans: earliest onset to latest release.
    pub segment: Option<(usize, usize)>,
}

impl ContactEvents {
    pub fn new(left: Spans, right: Spans) -> Self {
        let all = left.iter().chain(right.iter());
        let start = all.clone().map(|s| s.0).min();
        let end = all.map(|s| s.1).max();
        let segment = start.zip(end);
        Self { left, right, segment }
    }
}

/// Fixed-size model input. Values are stored as `f32`, the on-disk precision,
/// so a serialization round trip is bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    data: Vec<f32>,
    pub embodiment: Embodiment,
    pub valid_len: usize,
}

const TENSOR_MAGIC: &[u8; 8] = b"CLMPFEAT";
const TENSOR_VERSION: u32 = 1;
const TENSOR_HEADER_LEN: usize = 8 + 4 + 1 + 4 + 4 + 4;

impl FeatureTensor {
    /// `data` is channel-major, `N_CHANNELS × SEGMENT_LEN`.
    pub fn from_data(data: Vec<f32>, embodiment: Embodiment, valid_len: usize) -> Result<Self> {
        if data.len() != N_CHANNELS * SEGMENT_LEN {
            return Err(ClampError::Shape {
                expected: format!("{N_CHANNELS}x{SEGMENT_LEN}"),
                got: format!("{} values", data.len()),
            });
        }
        if valid_len > SEGMENT_LEN {
            return Err(validation(format!("valid_len {valid_len} exceeds {SEGMENT_LEN}")));
        }
        Ok(Self { data, embodiment, valid_len })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * SEGMENT_LEN..(c + 1) * SEGMENT_LEN]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        &mut self.data[c * SEGMENT_LEN..(c + 1) * SEGMENT_LEN]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Copy with one channel set to zero (modality ablation).
    pub fn with_zeroed_channel(&self, c: usize) -> Self {
        let mut out = self.clone();
        out.channel_mut(c).fill(0.0);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TENSOR_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.push(self.embodiment.code());
        out.extend_from_slice(&(self.valid_len as u32).to_le_bytes());
        out.extend_from_slice(&(N_CHANNELS as u32).to_le_bytes());
        out.extend_from_slice(&(SEGMENT_LEN as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| ClampError::Schema { file: "feature tensor".into(), msg };
        if bytes.len() < TENSOR_HEADER_LEN || &bytes[..8] != TENSOR_MAGIC {
            return Err(bad("missing CLMPFEAT header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != TENSOR_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let embodiment =
            Embodiment::from_code(bytes[12]).ok_or_else(|| bad(format!("embodiment code {}", bytes[12])))?;
        let valid_len = u32_at(13) as usize;
        let (channels, len) = (u32_at(17) as usize, u32_at(21) as usize);
        if channels != N_CHANNELS || len != SEGMENT_LEN {
            return Err(bad(format!("shape {channels}x{len}, expected {N_CHANNELS}x{SEGMENT_LEN}")));
        }
        let body = &bytes[TENSOR_HEADER_LEN..];
        if body.len() != 4 * N_CHANNELS * SEGMENT_LEN {
            return Err(bad(format!("payload of {} bytes", body.len())));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Self::from_data(data, embodiment, valid_len)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| ClampError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| ClampError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            ClampError::Schema { msg, .. } => ClampError::Schema { file: path.display().to_string(), msg },
            other => other,
        })
    }

    /// Debug export: one row per timestep, one column per channel.
    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        let _ = writeln!(out, "t,{}", CHANNEL_NAMES.join(","));
        for t in 0..SEGMENT_LEN {
            let _ = write!(out, "{t}");
            for c in 0..N_CHANNELS {
                let _ = write!(out, ",{}", self.channel(c)[t]);
            }
            let _ = writeln!(out);
        }
        String::from_utf8(out).expect("ascii")
    }
}

/// Crops the nine channels to the contact segment, then pads or truncates to
/// [`SEGMENT_LEN`].
pub fn segment_and_pad(
    channels: &[Vec<f64>; N_CHANNELS],
    events: &ContactEvents,
    embodiment: Embodiment,
) -> Result<FeatureTensor> {
    let lens: Vec<usize> = channels.iter().map(Vec::len).collect();
    check_equal_lengths("feature channels", &lens)?;
    let (start, end) = events.segment.ok_or_else(|| ClampError::NoContact("no contact event on either cup".into()))?;
    if start >= end || end > lens[0] {
        return Err(validation(format!("segment [{start}, {end}) outside trial of {} samples", lens[0])));
    }
    let valid_len = (end - start).min(SEGMENT_LEN);
    let mut data = Vec::with_capacity(N_CHANNELS * SEGMENT_LEN);
    for (c, ch) in channels.iter().enumerate() {
        let seg = &ch[start..start + valid_len];
        data.extend(seg.iter().map(|&v| v as f32));
        let fill = if pads_with_last_value(c) { seg[valid_len - 1] as f32 } else { 0.0 };
        data.extend(std::iter::repeat_n(fill, SEGMENT_LEN - valid_len));
    }
    FeatureTensor::from_data(data, embodiment, valid_len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultConfig {
    pub min_c: f64,
    pub max_c: f64,
    /// A reading constant for this long counts as a frozen sensor.
    pub frozen_s: f64,
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self { min_c: -20.0, max_c: 120.0, frozen_s: 2.0 }
    }
}

/// Out-of-range or frozen thermal readings.
pub fn thermal_fault(series: &[f64], cfg: &FaultConfig) -> bool {
    if series.iter().any(|v| !v.is_finite() || *v < cfg.min_c || *v > cfg.max_c) {
        return true;
    }
    let frozen = (cfg.frozen_s * BASE_RATE_HZ).round().max(2.0) as usize;
    let mut run = 1;
    for w in series.windows(2) {
        run = if w[1] == w[0] { run + 1 } else { 1 };
        if run >= frozen {
            return true;
        }
    }
    false
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub filter: FilterConfig,
    /// Minimum closing rate for the angular impedance feature, °/s.
    pub impedance_delta_dps: f64,
    pub lin_acc_eps: f64,
    pub contact: ContactThresholds,
    pub fault: FaultConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            impedance_delta_dps: 3.0,
            lin_acc_eps: 1e-6,
            contact: ContactThresholds::default(),
            fault: FaultConfig::default(),
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        if !(self.impedance_delta_dps > 0.0) {
            return Err(validation("impedance_delta_dps must be > 0"));
        }
        if !(self.lin_acc_eps >= 0.0) {
            return Err(validation("lin_acc_eps must be >= 0"));
        }
        Ok(())
    }
}

/// Quantities the exclusion rules look at, taken before segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub initial_force_v: f64,
    pub initial_active_c: f64,
    pub thermal_fault: bool,
    /// Peak closing rate inside the segment; `None` for parallel-jaw
    /// embodiments, whose proprioception is an acceleration.
    pub max_proprioception: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedTrial {
    pub object_id: String,
    pub trial_index: usize,
    pub labels: LabelRecord,
    pub tensor: FeatureTensor,
    pub events: ContactEvents,
    pub summary: TrialSummary,
}

/// Full per-trial conditioning: filtering, feature construction, contact
/// detection, segmentation and padding.
pub fn featurize(
    aligned: &AlignedTrial,
    labels: &LabelRecord,
    embodiment: Embodiment,
    cfg: &FeatureConfig,
) -> Result<FeaturizedTrial> {
    cfg.validate()?;
    let n = aligned.len();
    if n < 2 {
        return Err(ClampError::Empty(format!(
            "trial {} of {} has fewer than two samples",
            aligned.trial_index, aligned.object_id
        )));
    }
    let f = &cfg.filter;
    let active = butterworth_lowpass(&aligned.active_c, f)?;
    let passive = butterworth_lowpass(&aligned.passive_c, f)?;
    let ma = |x: &[f64]| causal_moving_average(x, f.moving_avg_window);
    let smooth3 = |axes: &[Vec<f64>; 3]| -> [Vec<f64>; 3] { std::array::from_fn(|k| ma(&axes[k])) };

    let (proprio, imp) = if embodiment.is_parallel_jaw() {
        let rel = relative_linear_acceleration(&smooth3(&aligned.imu1.accel), &smooth3(&aligned.imu2.accel))?;
        let lin = condition_linear_acceleration(&rel, f)?;
        let imp = impedance_linear(&diff_feature(&aligned.force_v), &lin, cfg.lin_acc_eps)?;
        (lin, imp)
    } else {
        let omega = relative_angular_velocity(&smooth3(&aligned.imu1.gyro), &smooth3(&aligned.imu2.gyro))?;
        let imp = impedance(&diff_feature(&aligned.force_v), &omega, cfg.impedance_delta_dps)?;
        (omega, imp)
    };
    let vibration = condition_mic(&aligned.mic_v, n)?;

    let channels: [Vec<f64>; N_CHANNELS] = [
        ma(&active),
        ma(&passive),
        ma(&aligned.force_v),
        vibration,
        ma(&proprio),
        ma(&diff_feature(&active)),
        ma(&diff_feature(&passive)),
        ma(&diff_feature(&aligned.force_v)),
        ma(&imp),
    ];
    let events = ContactEvents::new(
        detect_contact_left_with(&active, &cfg.contact),
        detect_contact_right_with(&aligned.force_v, &cfg.contact),
    );
    let tensor = segment_and_pad(&channels, &events, embodiment).map_err(|e| match e {
        ClampError::NoContact(_) => ClampError::NoContact(format!(
            "object {} trial {}: no contact event on either cup",
            aligned.object_id, aligned.trial_index
        )),
        other => other,
    })?;
    let max_proprioception = (!embodiment.is_parallel_jaw()).then(|| {
        let (s, e) = events.segment.expect("segmented");
        channels[CH_PROPRIOCEPTION][s..e].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    });
    let summary = TrialSummary {
        initial_force_v: aligned.force_v[0],
        initial_active_c: aligned.active_c[0],
        thermal_fault: thermal_fault(&aligned.active_c, &cfg.fault) || thermal_fault(&aligned.passive_c, &cfg.fault),
        max_proprioception,
    };
    Ok(FeaturizedTrial {
        object_id: aligned.object_id.clone(),
        trial_index: aligned.trial_index,
        labels: labels.clone(),
        tensor,
        events,
        summary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionRule {
    SmallClass,
    InitialForce,
    InitialTemp,
    SensorFault,
    SlowGrasp,
    Heterogeneous,
}

impl ExclusionRule {
    pub const ALL: [ExclusionRule; 6] = [
        ExclusionRule::SmallClass,
        ExclusionRule::InitialForce,
        ExclusionRule::InitialTemp,
        ExclusionRule::SensorFault,
        ExclusionRule::SlowGrasp,
        ExclusionRule::Heterogeneous,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExclusionRule::SmallClass => "small_class",
            ExclusionRule::InitialForce => "initial_force",
            ExclusionRule::InitialTemp => "initial_temp",
            ExclusionRule::SensorFault => "sensor_fault",
            ExclusionRule::SlowGrasp => "slow_grasp",
            ExclusionRule::Heterogeneous => "heterogeneous",
        }
    }
}

impl fmt::Display for ExclusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    pub excluded_materials: Vec<Material>,
    pub initial_force_v: f64,
    pub min_initial_active_c: f64,
    pub min_proprioception_dps: f64,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            excluded_materials: vec![Material::Granite, Material::DryWall],
            initial_force_v: 0.01,
            min_initial_active_c: 51.0,
            min_proprioception_dps: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub object_id: String,
    pub trial_index: usize,
    pub retained: bool,
    pub rules_fired: Vec<ExclusionRule>,
}

pub fn exclusion_report(trial: &FeaturizedTrial, rules: &FilterRules) -> ExclusionReport {
    let s = &trial.summary;
    let mut fired = Vec::new();
    if rules.excluded_materials.contains(&trial.labels.material) {
        fired.push(ExclusionRule::SmallClass);
    }
    if s.initial_force_v > rules.initial_force_v {
        fired.push(ExclusionRule::InitialForce);
    }
    if s.initial_active_c < rules.min_initial_active_c {
        fired.push(ExclusionRule::InitialTemp);
    }
    if s.thermal_fault {
        fired.push(ExclusionRule::SensorFault);
    }
    if s.max_proprioception.is_some_and(|w| w < rules.min_proprioception_dps) {
        fired.push(ExclusionRule::SlowGrasp);
    }
    if trial.labels.heterogeneous_surfaces {
        fired.push(ExclusionRule::Heterogeneous);
    }
    ExclusionReport {
        object_id: trial.object_id.clone(),
        trial_index: trial.trial_index,
        retained: fired.is_empty(),
        rules_fired: fired,
    }
}

/// One report per input trial, in input order.
pub fn filter_dataset(trials: &[FeaturizedTrial], rules: &FilterRules) -> Vec<ExclusionReport> {
    trials.iter().map(|t| exclusion_report(t, rules)).collect()
}

/// Trials whose report says retained.
pub fn retained<'a>(trials: &'a [FeaturizedTrial], reports: &[ExclusionReport]) -> Vec<&'a FeaturizedTrial> {
    trials.iter().zip(reports).filter(|(_, r)| r.retained).map(|(t, _)| t).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::align_streams;
    use crate::labels::Compliance;
    use crate::synth::{generate_trial, GraspParams, MaterialArchetype};
    use proptest::prelude::*;

    fn labels(material: Material) -> LabelRecord {
        LabelRecord { material, heterogeneous_surfaces: false, compliance: Compliance::Hard }
    }

    fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|r| (0..3).map(|c| m[r][c] * v[c]).sum())
    }

    #[test]
    fn mount_rotation_is_proper() {
        let r = imu_mount_rotation(IMU_MOUNT_ANGLE_DEG);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        assert!((det - 1.0).abs() < 1e-12);
        // y2 -> z1; x2 at -25 degrees from x1 in the xy plane.
        assert_eq!(mat_vec(&r, [0.0, 1.0, 0.0]), [0.0, 0.0, 1.0]);
        let x2 = mat_vec(&r, [1.0, 0.0, 0.0]);
        assert!((x2[1].atan2(x2[0]).to_degrees() + 25.0).abs() < 1e-12);
    }

    fn gyro(v: [f64; 3]) -> [Vec<f64>; 3] {
        v.map(|x| vec![x])
    }

    #[test]
    fn relative_rate_examples() {
        let w = relative_angular_velocity(&gyro([0.0; 3]), &gyro([0.0, 10.0, 0.0])).unwrap();
        assert_eq!(w, vec![10.0]);
        // Common mode: omega1 = R omega2.
        let r = imu_mount_rotation(IMU_MOUNT_ANGLE_DEG);
        let w2 = [1.5, -2.0, 0.7];
        let w1 = mat_vec(&r, w2);
        let w = relative_angular_velocity(&gyro(w1), &gyro(w2)).unwrap();
        assert!(w[0].abs() < 1e-12);
        // Explicit matrix built from the axis description.
        let th = (-25.0f64).to_radians();
        let x2 = [th.cos(), th.sin(), 0.0];
        let y2 = [0.0, 0.0, 1.0];
        let z2 = [x2[1] * y2[2] - x2[2] * y2[1], x2[2] * y2[0] - x2[0] * y2[2], x2[0] * y2[1] - x2[1] * y2[0]];
        let (a, b) = ([3.0, 4.0, 5.0], [1.0, 1.0, 1.0]);
        let expected = x2[2] * a[0] + y2[2] * a[1] + z2[2] * a[2] - b[2];
        let w = relative_angular_velocity(&gyro(b), &gyro(a)).unwrap();
        assert!((w[0] - expected).abs() < 1e-12);
        assert_eq!(expected, 3.0);
    }

    #[test]
    fn relative_rate_length_mismatch() {
        let g1 = [vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]];
        let g2 = [vec![0.0; 3], vec![0.0; 2], vec![0.0; 3]];
        assert!(matches!(relative_angular_velocity(&g1, &g2), Err(ClampError::Shape { .. })));
    }

    #[test]
    fn relative_linear_acceleration_cancels_common_motion() {
        let r = imu_mount_rotation(IMU_MOUNT_ANGLE_DEG);
        let a1 = [0.2, -0.9, 0.3];
        // a2 = R^T a1 + jaw component along z2.
        let mut a2: [f64; 3] = std::array::from_fn(|c| (0..3).map(|k| r[k][c] * a1[k]).sum());
        a2[2] += 0.125;
        let out = relative_linear_acceleration(&gyro(a1), &gyro(a2)).unwrap();
        assert!((out[0] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn diff_examples() {
        assert_eq!(diff_feature(&[2.0, 2.0, 2.0]), vec![0.0; 3]);
        assert_eq!(diff_feature(&[0.0, 1.0, 3.0]), vec![0.0, 1.0, 2.0]);
        assert_eq!(diff_feature(&[]), Vec::<f64>::new());
    }

    #[test]
    fn impedance_examples() {
        assert_eq!(impedance(&[0.5], &[5.0], 3.0).unwrap(), vec![0.1]);
        assert_eq!(impedance(&[0.5], &[2.0], 3.0).unwrap(), vec![0.0]);
        assert_eq!(impedance(&[0.6], &[3.0], 3.0).unwrap(), vec![0.6 / 3.0]);
        assert_eq!(impedance(&[0.6], &[-5.0], 3.0).unwrap(), vec![0.0]);
        assert!(impedance(&[0.6], &[3.0], 0.0).is_err());
        assert!(impedance(&[0.6, 1.0], &[3.0], 3.0).is_err());
    }

    #[test]
    fn impedance_linear_examples() {
        assert_eq!(impedance_linear(&[0.4], &[2.0], 1e-6).unwrap(), vec![0.2]);
        assert_eq!(impedance_linear(&[0.4], &[0.0], 1e-6).unwrap(), vec![0.0]);
        let f = [0.1, -0.2, 0.3, 0.05];
        let a = [-0.5, 1e-7, 0.25, 2.0];
        let out = impedance_linear(&f, &a, 1e-6).unwrap();
        for i in 0..4 {
            let expected = if a[i].abs() < 1e-6 { 0.0 } else { f[i] / a[i] };
            assert_eq!(out[i], expected);
        }
    }

    #[test]
    fn left_contact_examples() {
        let temps = [55.0, 55.0, 54.995, 54.975, 54.0, 53.0];
        assert_eq!(detect_contact_left(&temps[1..]).first().map(|s| s.0), Some(2));
        // Reheat above 53 C is ignored; below it releases.
        assert_eq!(detect_contact_left(&[55.0, 54.0, 54.005, 53.0]), vec![(1, 4)]);
        assert_eq!(detect_contact_left(&[55.0, 53.0, 52.5, 52.505]), vec![(1, 3)]);
        assert!(detect_contact_left(&[55.0; 20]).is_empty());
    }

    #[test]
    fn right_contact_examples() {
        assert_eq!(detect_contact_right(&[0.0, 0.005, 0.02, 0.03, 0.004]), vec![(2, 4)]);
        assert!(detect_contact_right(&[0.0, 0.005, 0.01, 0.001]).is_empty());
        let mut f = vec![0.0; 30];
        f[3..8].fill(0.5);
        f[15..21].fill(0.2);
        f[27..].fill(0.9);
        assert_eq!(detect_contact_right(&f), vec![(3, 8), (15, 21), (27, 30)]);
    }

    #[test]
    fn events_union() {
        let ev = ContactEvents::new(vec![(10, 40)], vec![(12, 45)]);
        assert_eq!(ev.segment, Some((10, 45)));
        let ev = ContactEvents::new(vec![], vec![(12, 45)]);
        assert_eq!(ev.segment, Some((12, 45)));
        assert_eq!(ContactEvents::new(vec![], vec![]).segment, None);
    }

    fn ramp_channels(len: usize) -> [Vec<f64>; N_CHANNELS] {
        std::array::from_fn(|c| (0..len).map(|t| (c * 1000 + t) as f64 + 0.25).collect())
    }

    #[test]
    fn padding_rules() {
        let ch = ramp_channels(320);
        let ev = ContactEvents::new(vec![(10, 310)], vec![]);
        let t = segment_and_pad(&ch, &ev, Embodiment::ClampDevice).unwrap();
        assert_eq!(t.valid_len, 300);
        for c in 0..N_CHANNELS {
            let x = t.channel(c);
            assert_eq!(x[0], ch[c][10] as f32);
            assert_eq!(x[299], ch[c][309] as f32);
            let fill = if pads_with_last_value(c) { x[299] } else { 0.0 };
            assert!(x[300..].iter().all(|v| *v == fill), "channel {c}");
        }
    }

    #[test]
    fn exact_and_over_length_segments() {
        let ch = ramp_channels(700);
        let t = segment_and_pad(&ch, &ContactEvents::new(vec![(5, 496)], vec![]), Embodiment::FrankaPj).unwrap();
        assert_eq!(t.valid_len, 491);
        assert_eq!(t.channel(CH_FORCE)[490], ch[CH_FORCE][495] as f32);
        let t = segment_and_pad(&ch, &ContactEvents::new(vec![(50, 650)], vec![]), Embodiment::FrankaPj).unwrap();
        assert_eq!(t.valid_len, 491);
        for c in 0..N_CHANNELS {
            let expected: Vec<f32> = ch[c][50..541].iter().map(|&v| v as f32).collect();
            assert_eq!(t.channel(c), expected.as_slice());
        }
    }

    #[test]
    fn no_contact_is_an_error() {
        let ch = ramp_channels(100);
        let err = segment_and_pad(&ch, &ContactEvents::new(vec![], vec![]), Embodiment::ClampDevice).unwrap_err();
        assert!(matches!(err, ClampError::NoContact(_)));
    }

    #[test]
    fn tensor_round_trip_and_corruption() {
        let ch = ramp_channels(320);
        let t = segment_and_pad(&ch, &ContactEvents::new(vec![(0, 300)], vec![]), Embodiment::WidowxPj).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(FeatureTensor::from_bytes(&bytes).unwrap(), t);
        assert!(FeatureTensor::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FeatureTensor::from_bytes(&bad).is_err());
        let csv = t.to_csv();
        assert!(csv.starts_with(
            "t,active_c,passive_c,force_v,vibration,proprioception,d_active,d_passive,d_force,impedance\n"
        ));
        assert_eq!(csv.lines().count(), SEGMENT_LEN + 1);
    }

    #[test]
    fn fault_detection() {
        let cfg = FaultConfig::default();
        let ok: Vec<f64> = (0..300).map(|i| 30.0 + 0.01 * (i % 7) as f64).collect();
        assert!(!thermal_fault(&ok, &cfg));
        let mut hot = ok.clone();
        hot[40] = 130.0;
        assert!(thermal_fault(&hot, &cfg));
        let mut frozen = ok.clone();
        frozen[100..200].fill(31.0);
        assert!(thermal_fault(&frozen, &cfg));
        let mut short = ok;
        short[100..199].fill(31.0);
        assert!(!thermal_fault(&short, &cfg));
    }

    fn default_trial(material: Material, seed: u64) -> FeaturizedTrial {
        let rec = generate_trial(&MaterialArchetype::preset(material), &GraspParams::default(), seed).unwrap();
        let aligned = align_streams(&rec).unwrap();
        featurize(&aligned, &labels(material), Embodiment::ClampDevice, &FeatureConfig::default()).unwrap()
    }

    #[test]
    fn default_hard_plastic_trial_is_retained() {
        let t = default_trial(Material::HardPlastic, 11);
        let report = exclusion_report(&t, &FilterRules::default());
        assert!(report.retained, "{report:?} {:?}", t.summary);
        // Force gives the exact window; the thermal release may lag slightly.
        assert_eq!(t.events.right, vec![(100, 350)]);
        let (s, e) = t.events.segment.unwrap();
        assert_eq!(s, 100);
        assert!((350..=352).contains(&e), "{e}");
        assert_eq!(t.tensor.valid_len, e - s);
    }

    #[test]
    fn small_class_and_heterogeneous_rules() {
        let mut t = default_trial(Material::HardPlastic, 1);
        t.labels.material = Material::Granite;
        t.labels.heterogeneous_surfaces = true;
        let r = exclusion_report(&t, &FilterRules::default());
        assert_eq!(r.rules_fired, vec![ExclusionRule::SmallClass, ExclusionRule::Heterogeneous]);
        assert!(!r.retained);
    }

    #[test]
    fn threshold_rules() {
        let base = default_trial(Material::Steel, 2);
        let rules = FilterRules::default();
        let fire = |f: &dyn Fn(&mut TrialSummary)| {
            let mut t = base.clone();
            f(&mut t.summary);
            exclusion_report(&t, &rules).rules_fired
        };
        assert_eq!(fire(&|s| s.initial_active_c = 50.8), vec![ExclusionRule::InitialTemp]);
        assert_eq!(fire(&|s| s.initial_active_c = 51.0), vec![]);
        assert_eq!(fire(&|s| s.max_proprioception = Some(0.5)), vec![ExclusionRule::SlowGrasp]);
        assert_eq!(fire(&|s| s.max_proprioception = None), vec![]);
        assert_eq!(fire(&|s| s.initial_force_v = 0.02), vec![ExclusionRule::InitialForce]);
        assert_eq!(fire(&|s| s.thermal_fault = true), vec![ExclusionRule::SensorFault]);
    }

    #[test]
    fn parallel_jaw_featurization() {
        let cfg = crate::synth::SynthConfig::for_embodiment(Embodiment::FrankaPj);
        let rec = crate::synth::generate_trial_with(
            &MaterialArchetype::preset(Material::Glass),
            &GraspParams::default(),
            4,
            &cfg,
        )
        .unwrap();
        let aligned = align_streams(&rec).unwrap();
        let t = featurize(&aligned, &labels(Material::Glass), Embodiment::FrankaPj, &FeatureConfig::default()).unwrap();
        assert_eq!(t.tensor.embodiment, Embodiment::FrankaPj);
        assert_eq!(t.summary.max_proprioception, None);
        assert!(exclusion_report(&t, &FilterRules::default()).retained);
        assert!(t.tensor.data().iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn impedance_is_homogeneous_in_force(
            f in proptest::collection::vec(-2.0f64..2.0, 1..40),
            k in -8.0f64..8.0,
            seed in 0u64..1000,
        ) {
            let w: Vec<f64> = (0..f.len()).map(|i| ((seed + i as u64 * 7919) % 100) as f64 / 10.0).collect();
            let base = impedance(&f, &w, 3.0).unwrap();
            let scaled_f: Vec<f64> = f.iter().map(|v| v * k).collect();
            let scaled = impedance(&scaled_f, &w, 3.0).unwrap();
            for (a, b) in base.iter().zip(&scaled) {
                prop_assert!((a * k - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn diff_telescopes(x in proptest::collection::vec(-1e3f64..1e3, 1..60)) {
            let d = diff_feature(&x);
            let mut acc = x[0];
            for (i, v) in d.iter().enumerate().skip(1) {
                acc += v;
                prop_assert!((acc - x[i]).abs() <= 1e-9);
            }
        }

        #[test]
        fn contact_spans_alternate(f in proptest::collection::vec(0.0f64..0.03, 0..80)) {
            let spans = detect_contact_right(&f);
            for s in &spans {
                prop_assert!(s.0 < s.1 && s.1 <= f.len());
            }
            for w in spans.windows(2) {
                prop_assert!(w[0].1 <= w[1].0);
            }
        }

        #[test]
        fn filter_is_order_independent(perm_seed in 0u64..1000) {
            let mut trials = vec![default_trial(Material::HardPlastic, 5)];
            let mut t = trials[0].clone();
            t.summary.initial_active_c = 50.0;
            t.trial_index = 2;
            trials.push(t);
            let mut t = trials[0].clone();
            t.labels.material = Material::DryWall;
            t.trial_index = 3;
            trials.push(t);
            let rules = FilterRules::default();
            let reports = filter_dataset(&trials, &rules);
            let mut order: Vec<usize> = (0..trials.len()).collect();
            order.rotate_left((perm_seed % 3) as usize);
            if perm_seed % 2 == 1 { order.swap(0, 1); }
            let permuted: Vec<FeaturizedTrial> = order.iter().map(|&i| trials[i].clone()).collect();
            let permuted_reports = filter_dataset(&permuted, &rules);
            for (k, &i) in order.iter().enumerate() {
                prop_assert_eq!(&permuted_reports[k], &reports[i]);
            }
        }
    }
}
