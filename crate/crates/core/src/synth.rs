//! Seeded generator of plausible grasp recordings.
//!
//! Each material archetype is a small parameter set: how strongly and how
//! fast the heated thermistor cools on contact, how fast force builds up, and
//! how much texture vibration reaches the contact microphone. Noise comes
//! from one ChaCha stream per channel, so every channel is reproducible on
//! its own and equal inputs give byte-identical output.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{validation, ClampError, Result};
use crate::features::{imu_mount_rotation, IMU_MOUNT_ANGLE_DEG};
use crate::ingest::{
    write_labels_json, ImuSeries, LabelRecord, LabelRecordJson, Manifest, ThermistorConfig, TrialRecord, SCHEMA_VERSION,
};
use crate::labels::{Compliance, Embodiment, Material};
use crate::signal::{BASE_RATE_HZ, MIC_RATE_HZ};

/// Temperature the active thermistor is held at by its on-off controller.
pub const ACTIVE_SETPOINT_C: f64 = 55.0;
/// Time constant of the thermal drop for a unit-effusivity material.
const BASE_THERMAL_TAU_S: f64 = 1.5;
/// Force rise time constant of a rigid object.
const BASE_FORCE_TAU_S: f64 = 0.06;
/// FSR voltage step at first touch.
const FSR_TOUCH_V: f64 = 0.05;
const FSR_MAX_V: f64 = 3.3;
const MIC_BIAS_V: f64 = 1.65;
const GRAVITY_MPS2: f64 = 9.81;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialArchetype {
    pub name: Material,
    /// Scales the active-thermal drop, in (0, 1].
    pub effusivity_factor: f64,
    /// Scales the force rise rate, in (0, 1]; 1 is rigid.
    pub compliance_factor: f64,
    /// Scales contact-microphone band noise.
    pub texture_energy: f64,
    pub ambient_temp_c: f64,
    /// Centre frequency of the texture vibration band.
    pub texture_band_hz: f64,
}

impl MaterialArchetype {
    /// Materials with their own parameter preset.
    pub const PRESETS: [Material; 6] = [
        Material::Steel,
        Material::Aluminium,
        Material::Glass,
        Material::HardPlastic,
        Material::Foam,
        Material::Fabric,
    ];

    /// Preset parameters. Materials without a dedicated preset borrow the
    /// closest built-in one but keep their own name.
    pub fn preset(material: Material) -> Self {
        let (e, c, tex, band) = match material {
            Material::Aluminium => (1.0, 1.0, 0.25, 10.0),
            Material::Steel | Material::Brass => (0.72, 1.0, 0.25, 18.0),
            Material::Glass | Material::Porcelain | Material::Granite => (0.42, 1.0, 0.12, 13.0),
            Material::HardPlastic | Material::Wood | Material::Cardboard | Material::DryWall => (0.26, 0.7, 0.3, 12.0),
            Material::Fabric | Material::Paper => (0.16, 0.28, 0.8, 12.0),
            Material::Foam | Material::Rubber | Material::SoftPlastic | Material::VegetableMatter => {
                (0.12, 0.12, 0.8, 13.0)
            }
        };
        Self {
            name: material,
            effusivity_factor: e,
            compliance_factor: c,
            texture_energy: tex,
            ambient_temp_c: 22.0,
            texture_band_hz: band,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("effusivity_factor", self.effusivity_factor), ("compliance_factor", self.compliance_factor)]
        {
            if !(v > 0.0 && v <= 1.0) {
                return Err(validation(format!("{name} = {v} must lie in (0, 1]")));
            }
        }
        if !(self.texture_energy >= 0.0) {
            return Err(validation("texture_energy must be >= 0"));
        }
        if !(self.texture_band_hz > 0.0 && self.texture_band_hz < MIC_RATE_HZ / 2.0) {
            return Err(validation("texture_band_hz must lie below the microphone Nyquist rate"));
        }
        if !(self.ambient_temp_c > -20.0 && self.ambient_temp_c < 50.0) {
            return Err(validation("ambient_temp_c must lie in (-20, 50) C"));
        }
        Ok(())
    }

    pub fn compliance_label(&self) -> Compliance {
        if self.compliance_factor < 0.5 {
            Compliance::Soft
        } else {
            Compliance::Hard
        }
    }

    /// Per-object variation around the preset.
    pub fn jittered<R: Rng>(&self, rng: &mut R) -> Self {
        self.jittered_by(rng, &ObjectJitter::default())
    }

    /// Object-to-object variation within a material: multiplicative on the
    /// factors (capped at 1), additive on ambient and band.
    pub fn jittered_by<R: Rng>(&self, rng: &mut R, j: &ObjectJitter) -> Self {
        let mut factor = |spread: f64| 1.0 + spread * rng.random_range(-1.0..1.0);
        Self {
            name: self.name,
            effusivity_factor: (self.effusivity_factor * factor(j.effusivity)).min(1.0),
            compliance_factor: (self.compliance_factor * factor(j.compliance)).min(1.0),
            texture_energy: self.texture_energy * factor(j.texture),
            ambient_temp_c: self.ambient_temp_c + j.ambient_c * (factor(1.0) - 1.0),
            texture_band_hz: self.texture_band_hz + j.band_hz * (factor(1.0) - 1.0),
        }
    }
}

/// Half-widths of the per-object variation around a preset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectJitter {
    /// Relative spread of the effusivity factor.
    pub effusivity: f64,
    pub compliance: f64,
    pub texture: f64,
    pub ambient_c: f64,
    pub band_hz: f64,
}

impl Default for ObjectJitter {
    fn default() -> Self {
        Self { effusivity: 0.25, compliance: 0.2, texture: 0.25, ambient_c: 3.0, band_hz: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspParams {
    /// Peak closing angular rate, deg/s.
    pub approach_speed: f64,
    /// FSR plateau voltage.
    pub peak_force_v: f64,
    pub contact_onset_s: f64,
    pub contact_duration_s: f64,
    pub trial_duration_s: f64,
}

impl Default for GraspParams {
    fn default() -> Self {
        Self {
            approach_speed: 30.0,
            peak_force_v: 1.5,
            contact_onset_s: 2.0,
            contact_duration_s: 5.0,
            trial_duration_s: 10.0,
        }
    }
}

impl GraspParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.approach_speed > 0.0) {
            return Err(validation("approach_speed must be > 0"));
        }
        if !(0.0..=FSR_MAX_V).contains(&self.peak_force_v) {
            return Err(validation("peak_force_v must lie in [0, 3.3] V"));
        }
        if self.contact_onset_s < 0.0 || self.contact_duration_s < 0.0 {
            return Err(validation("contact_onset_s and contact_duration_s must be >= 0"));
        }
        if self.contact_onset_s + self.contact_duration_s > self.trial_duration_s {
            return Err(validation("contact_onset_s + contact_duration_s must not exceed trial_duration_s"));
        }
        if !(self.trial_duration_s > 0.0) {
            return Err(validation("trial_duration_s must be > 0"));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.trial_duration_s * BASE_RATE_HZ).round() as usize
    }

    /// Ground-truth contact as `[onset, release)` sample indices on the 50 Hz
    /// grid, `None` without contact.
    pub fn contact_window(&self) -> Option<(usize, usize)> {
        let first_at = |t: f64| (t * BASE_RATE_HZ - 1e-9).ceil().max(0.0) as usize;
        let onset = first_at(self.contact_onset_s);
        let release = first_at(self.contact_onset_s + self.contact_duration_s).min(self.n_samples());
        (release > onset).then_some((onset, release))
    }

    /// Random grasp within the ranges used for benchmark generation.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let onset = rng.random_range(1.0..2.5);
        let duration = rng.random_range(3.5..7.0);
        Self {
            approach_speed: rng.random_range(15.0..60.0),
            peak_force_v: rng.random_range(0.8..2.4),
            contact_onset_s: onset,
            contact_duration_s: duration,
            trial_duration_s: ((onset + duration + rng.random_range(1.5..2.5)) * 10.0).round() / 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub active_c: f64,
    pub passive_c: f64,
    pub force_v: f64,
    pub mic_v: f64,
    pub gyro_dps: f64,
    pub accel_g: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { active_c: 0.004, passive_c: 0.01, force_v: 0.001, mic_v: 0.002, gyro_dps: 0.3, accel_g: 0.004 }
    }
}

impl NoiseConfig {
    pub fn silent() -> Self {
        Self { active_c: 0.0, passive_c: 0.0, force_v: 0.0, mic_v: 0.0, gyro_dps: 0.0, accel_g: 0.0 }
    }
}

/// Per-trial ranges of quantities that vary between grasps of the same
/// object. Each factor is drawn uniformly from `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialVariability {
    /// Fraction of the ideal heat flux reaching the thermistors (partial
    /// contact, surface films). Scales the depth of the thermal drop only.
    pub contact_quality: (f64, f64),
    /// Acoustic coupling of the contact microphone.
    pub mic_coupling: (f64, f64),
}

impl Default for TrialVariability {
    fn default() -> Self {
        Self { contact_quality: (0.6, 1.0), mic_coupling: (0.2, 1.8) }
    }
}

impl TrialVariability {
    pub fn none() -> Self {
        Self { contact_quality: (1.0, 1.0), mic_coupling: (1.0, 1.0) }
    }

    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("contact_quality", self.contact_quality), ("mic_coupling", self.mic_coupling)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(validation(format!("{name} range must satisfy 0 < lo <= hi, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub noise: NoiseConfig,
    pub variability: TrialVariability,
    /// Half-amplitude of the on-off controller ripple on the active sensor.
    pub ripple_amplitude_c: f64,
    pub ripple_period_s: f64,
    /// Recovery time constant of the active sensor after release.
    pub reheat_tau_s: f64,
    /// Resting offset of the passive sensor above ambient (device warmth).
    pub passive_idle_offset_c: f64,
    pub thermistor: ThermistorConfig,
    pub embodiment: Embodiment,
    /// Parallel-jaw closing speed.
    pub jaw_speed_mps: f64,
    /// Parallel-jaw accelerometer drift and offset along the jaw axis.
    pub accel_drift_g_per_s: f64,
    pub accel_offset_g: f64,
    /// Parallel-jaw force gain relative to the hand-held device.
    pub jaw_force_gain: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            noise: NoiseConfig::default(),
            variability: TrialVariability::default(),
            ripple_amplitude_c: 0.2,
            ripple_period_s: 4.0,
            reheat_tau_s: 0.8,
            passive_idle_offset_c: 6.0,
            thermistor: ThermistorConfig::default(),
            embodiment: Embodiment::ClampDevice,
            jaw_speed_mps: 0.05,
            accel_drift_g_per_s: 0.02,
            accel_offset_g: 0.5,
            jaw_force_gain: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn for_embodiment(embodiment: Embodiment) -> Self {
        Self { embodiment, ..Self::default() }
    }
}

fn thermal_tau(effusivity: f64) -> f64 {
    BASE_THERMAL_TAU_S / effusivity.sqrt()
}

/// Active-thermistor temperature `t` seconds into contact:
/// `55 - (55 - ambient) * (1 - exp(-t / tau)) * sqrt(e)` with `tau = 1.5 s / sqrt(e)`.
/// Higher effusivity gives a deeper and faster drop.
pub fn thermal_response(effusivity_factor: f64, t_since_contact: f64, ambient: f64) -> f64 {
    thermal_response_with_quality(effusivity_factor, t_since_contact, ambient, 1.0)
}

/// [`thermal_response`] with the drop depth scaled by a contact quality in (0, 1].
pub fn thermal_response_with_quality(effusivity_factor: f64, t_since_contact: f64, ambient: f64, quality: f64) -> f64 {
    let t = t_since_contact.max(0.0);
    let scale = effusivity_factor.sqrt() * quality;
    ACTIVE_SETPOINT_C - (ACTIVE_SETPOINT_C - ambient) * (1.0 - (-t / thermal_tau(effusivity_factor)).exp()) * scale
}

// Noise stream identifiers.
const CH_ACTIVE: u64 = 1;
const CH_PASSIVE: u64 = 2;
const CH_FORCE: u64 = 3;
const CH_MIC: u64 = 4;
const CH_TEXTURE: u64 = 5;
const CH_IMU1: u64 = 10;
const CH_IMU2: u64 = 20;
const CH_NUISANCE: u64 = 100;

fn channel_rng(seed: u64, channel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(channel);
    rng
}

fn gaussian_series(seed: u64, channel: u64, n: usize, sigma: f64) -> Vec<f64> {
    let mut rng = channel_rng(seed, channel);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect()
}

fn triangle(t: f64, period: f64, phase: f64) -> f64 {
    let u = (t / period + phase).rem_euclid(1.0);
    4.0 * (u - 0.5).abs() - 1.0
}

/// Unit-variance narrow-band noise from a two-pole resonator.
fn band_noise(seed: u64, channel: u64, n: usize, centre_hz: f64, rate_hz: f64) -> Vec<f64> {
    let r: f64 = 0.85;
    let w = 2.0 * std::f64::consts::PI * centre_hz / rate_hz;
    let a1 = 2.0 * r * w.cos();
    let a2 = -r * r;
    let var = (1.0 - a2) / ((1.0 + a2) * ((1.0 - a2).powi(2) - a1 * a1));
    let norm = var.sqrt().recip();
    let e = gaussian_series(seed, channel, n, 1.0);
    let mut y = vec![0.0; n];
    let (mut y1, mut y2) = (0.0, 0.0);
    for (k, ek) in e.iter().enumerate() {
        let v = a1 * y1 + a2 * y2 + ek;
        y2 = y1;
        y1 = v;
        y[k] = v * norm;
    }
    y
}

fn smoothstep_cos(u: f64) -> f64 {
    0.5 * (1.0 - (std::f64::consts::PI * u.clamp(0.0, 1.0)).cos())
}

/// Generates one trial with the default [`SynthConfig`] (hand-held device).
pub fn generate_trial(archetype: &MaterialArchetype, grasp: &GraspParams, seed: u64) -> Result<TrialRecord> {
    generate_trial_with(archetype, grasp, seed, &SynthConfig::default())
}

pub fn generate_trial_with(
    archetype: &MaterialArchetype,
    grasp: &GraspParams,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<TrialRecord> {
    grasp.validate()?;
    archetype.validate()?;
    cfg.variability.validate()?;
    let n = grasp.n_samples();
    if n < 2 {
        return Err(validation("trial_duration_s yields fewer than two samples"));
    }
    let dt = 1.0 / BASE_RATE_HZ;
    let t_on = grasp.contact_onset_s;
    let t_off = grasp.contact_onset_s + grasp.contact_duration_s;
    let window = grasp.contact_window();
    let in_contact = |i: usize| window.is_some_and(|(a, b)| i >= a && i < b);
    let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
    let e = archetype.effusivity_factor;
    let c = archetype.compliance_factor;
    let ambient = archetype.ambient_temp_c;
    let parallel_jaw = cfg.embodiment.is_parallel_jaw();

    let mut nuisance = channel_rng(seed, CH_NUISANCE);
    let ripple_phase: f64 = nuisance.random_range(0.0..1.0);
    let body: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                nuisance.random_range(0.5..1.0) * if parallel_jaw { 0.05 } else { 2.0 },
                nuisance.random_range(0.2..0.8),
                nuisance.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
    let quality = draw(&mut nuisance, cfg.variability.contact_quality);
    let coupling = draw(&mut nuisance, cfg.variability.mic_coupling);

    // Active thermal: setpoint plus ripple, exponential drop in contact,
    // exponential reheat after release.
    let release_temp = thermal_response_with_quality(e, grasp.contact_duration_s, ambient, quality);
    let active_noise = gaussian_series(seed, CH_ACTIVE, n, cfg.noise.active_c);
    let active_c: Vec<f64> = times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let ripple = cfg.ripple_amplitude_c * triangle(t, cfg.ripple_period_s, ripple_phase);
            let base = match window {
                Some(_) if in_contact(i) => thermal_response_with_quality(e, t - t_on, ambient, quality),
                Some((_, b)) if i >= b => {
                    ACTIVE_SETPOINT_C - (ACTIVE_SETPOINT_C - release_temp) * (-(t - t_off) / cfg.reheat_tau_s).exp()
                }
                _ => ACTIVE_SETPOINT_C,
            };
            base + ripple + active_noise[i]
        })
        .collect();

    // Passive thermal: rests warm, relaxes toward the object's temperature.
    let idle = ambient + cfg.passive_idle_offset_c;
    let passive_tau = 3.0 / e.sqrt();
    let passive_depth = e.sqrt() * quality;
    let passive_release =
        idle + (ambient - idle) * (1.0 - (-grasp.contact_duration_s / passive_tau).exp()) * passive_depth;
    let passive_noise = gaussian_series(seed, CH_PASSIVE, n, cfg.noise.passive_c);
    let passive_c: Vec<f64> = times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let base = match window {
                Some(_) if in_contact(i) => {
                    idle + (ambient - idle) * (1.0 - (-(t - t_on) / passive_tau).exp()) * passive_depth
                }
                Some((_, b)) if i >= b => idle + (passive_release - idle) * (-(t - t_off) / 5.0).exp(),
                _ => idle,
            };
            base + passive_noise[i]
        })
        .collect();

    // Force: touch step then first-order rise, slower for compliant objects.
    let force_gain = if parallel_jaw { cfg.jaw_force_gain } else { 1.0 };
    let peak = (grasp.peak_force_v * force_gain).min(FSR_MAX_V);
    let touch = FSR_TOUCH_V.min(peak);
    let force_tau = BASE_FORCE_TAU_S / c;
    let force_noise = gaussian_series(seed, CH_FORCE, n, cfg.noise.force_v);
    let force_v: Vec<f64> = times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let base =
                if in_contact(i) { touch + (peak - touch) * (1.0 - (-(t - t_on) / force_tau).exp()) } else { 0.0 };
            (base + force_noise[i]).clamp(0.0, FSR_MAX_V)
        })
        .collect();

    // Contact microphone at 100 Hz: bias, texture band noise in contact and a
    // short impact burst at first touch.
    let m = 2 * n;
    let mic_dt = 1.0 / MIC_RATE_HZ;
    let mic_t: Vec<f64> = (0..m).map(|k| k as f64 * mic_dt).collect();
    let texture = band_noise(seed, CH_TEXTURE, m, archetype.texture_band_hz, MIC_RATE_HZ);
    let mic_noise = gaussian_series(seed, CH_MIC, m, cfg.noise.mic_v);
    let impact_amp = 0.15 * coupling * c * (grasp.approach_speed / 30.0).min(2.0);
    let has_contact = window.is_some();
    let mic_v: Vec<f64> = mic_t
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut v = MIC_BIAS_V + mic_noise[k];
            if has_contact && t >= t_on && t < t_off {
                let s = t - t_on;
                v += 0.05 * coupling * archetype.texture_energy * texture[k];
                v += impact_amp * (-s / 0.05).exp() * (2.0 * std::f64::consts::PI * 18.0 * s).cos();
            }
            v
        })
        .collect();

    // Finger motion relative to the body.
    let rot = imu_mount_rotation(IMU_MOUNT_ANGLE_DEG);
    let stop_tau = 0.03 + 0.35 * (1.0 - c);
    let close_s = 0.6;
    let open_s = 0.6;
    let omega_rel: Vec<f64> = times
        .iter()
        .map(|&t| {
            if parallel_jaw || !has_contact {
                return 0.0;
            }
            let v = grasp.approach_speed;
            if t < t_on && t >= t_on - close_s {
                v * smoothstep_cos((t - (t_on - close_s)) / close_s)
            } else if t >= t_on && t < t_off {
                v * (-(t - t_on) / stop_tau).exp()
            } else if t >= t_off && t < t_off + open_s {
                -0.8 * v * (std::f64::consts::PI * (t - t_off) / open_s).sin()
            } else {
                0.0
            }
        })
        .collect();
    // Parallel jaw: linear acceleration of the jaw along IMU-2's z axis, in g.
    let jaw_acc: Vec<f64> = times
        .iter()
        .map(|&t| {
            if !parallel_jaw || !has_contact {
                return 0.0;
            }
            let v = cfg.jaw_speed_mps;
            let pulse = 0.2;
            let start = t_on - close_s;
            let bump = |t0: f64| {
                let u = (t - t0) / pulse;
                if (0.0..1.0).contains(&u) {
                    (v / pulse) * (1.0 - (std::f64::consts::TAU * u).cos())
                } else {
                    0.0
                }
            };
            let mut a = bump(start);
            if t >= t_on && t < t_off {
                a -= (v / stop_tau) * (-(t - t_on) / stop_tau).exp();
            }
            a += -bump(t_off) + bump(t_off + open_s - pulse);
            a / GRAVITY_MPS2
        })
        .collect();

    let gravity = if parallel_jaw { [0.0, 0.0, -1.0] } else { [0.15, -0.96, 0.2] };
    let mut imu1 = ImuSeries {
        accel: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        gyro: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
    };
    let mut imu2 = imu1.clone();
    let noise1: Vec<Vec<f64>> = (0..6)
        .map(|k| {
            let sigma = if k < 3 { cfg.noise.accel_g } else { cfg.noise.gyro_dps };
            gaussian_series(seed, CH_IMU1 + k, n, sigma)
        })
        .collect();
    let noise2: Vec<Vec<f64>> = (0..6)
        .map(|k| {
            let sigma = if k < 3 { cfg.noise.accel_g } else { cfg.noise.gyro_dps };
            gaussian_series(seed, CH_IMU2 + k, n, sigma)
        })
        .collect();
    for (i, &t) in times.iter().enumerate() {
        let w_body: [f64; 3] = std::array::from_fn(|k| {
            let (amp, f, ph) = body[k];
            amp * (std::f64::consts::TAU * f * t + ph).sin()
        });
        let a_body: [f64; 3] = std::array::from_fn(|k| gravity[k] + 0.1 * w_body[k] / 60.0);
        // IMU-2 sees the body rotation plus the finger rotation about IMU-1's z
        // axis, expressed in its own frame (transpose of the mount rotation).
        let w_total = [w_body[0], w_body[1], w_body[2] + omega_rel[i]];
        let w2 = mat_t_vec(&rot, &w_total);
        let mut a2 = mat_t_vec(&rot, &a_body);
        if parallel_jaw {
            a2[2] += jaw_acc[i] + cfg.accel_drift_g_per_s * t + cfg.accel_offset_g;
        }
        for k in 0..3 {
            imu1.accel[k][i] = a_body[k] + noise1[k][i];
            imu1.gyro[k][i] = w_body[k] + noise1[k + 3][i];
            imu2.accel[k][i] = a2[k] + noise2[k][i];
            imu2.gyro[k][i] = w2[k] + noise2[k + 3][i];
        }
    }

    let therm = &cfg.thermistor;
    let to_v = |temps: &[f64]| temps.iter().map(|&tc| therm.celsius_to_voltage(tc)).collect::<Vec<_>>();
    let t_ms: Vec<f64> = (0..n).map(|i| i as f64 * 20.0).collect();
    let mic_t_ms: Vec<f64> = (0..m).map(|k| k as f64 * 10.0).collect();
    Ok(TrialRecord::from_shared_clock(
        "synthetic",
        1,
        t_ms,
        to_v(&active_c),
        to_v(&passive_c),
        force_v,
        mic_t_ms,
        mic_v,
        imu1,
        imu2,
    ))
}

fn mat_t_vec(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|c| (0..3).map(|r| m[r][c] * v[r]).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub object_id: String,
    pub archetype: MaterialArchetype,
    /// One entry per trial, or a single entry reused for every trial.
    pub grasps: Vec<GraspParams>,
    pub n_trials: usize,
    pub heterogeneous_surfaces: bool,
    pub compliance_label: Compliance,
    pub seed: u64,
    #[serde(default)]
    pub config: SynthConfig,
}

impl SessionSpec {
    pub fn new(object_id: impl Into<String>, archetype: MaterialArchetype, seed: u64) -> Self {
        let compliance_label = archetype.compliance_label();
        Self {
            object_id: object_id.into(),
            archetype,
            grasps: vec![GraspParams::default()],
            n_trials: 5,
            heterogeneous_surfaces: false,
            compliance_label,
            seed,
            config: SynthConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(validation("n_trials must be >= 1"));
        }
        if self.object_id.is_empty() || self.object_id.contains(['/', '\\']) {
            return Err(validation("object_id must be a non-empty path-free identifier"));
        }
        if self.grasps.is_empty() || (self.grasps.len() != 1 && self.grasps.len() != self.n_trials) {
            return Err(validation("grasps must hold one entry or one per trial"));
        }
        self.archetype.validate()?;
        self.grasps.iter().try_for_each(GraspParams::validate)
    }

    pub fn grasp(&self, trial: usize) -> &GraspParams {
        if self.grasps.len() == 1 {
            &self.grasps[0]
        } else {
            &self.grasps[trial]
        }
    }

    /// Seed of trial `k` (0-based), derived from the session seed.
    pub fn trial_seed(&self, k: usize) -> u64 {
        channel_rng(self.seed, 1_000 + k as u64).random()
    }

    pub fn labels(&self) -> LabelRecord {
        LabelRecord {
            material: self.archetype.name,
            heterogeneous_surfaces: self.heterogeneous_surfaces,
            compliance: self.compliance_label,
        }
    }

    /// All trials in memory, 1-based indices, object id filled in.
    pub fn generate_trials(&self) -> Result<Vec<TrialRecord>> {
        self.validate()?;
        (0..self.n_trials)
            .map(|k| {
                let mut rec = generate_trial_with(&self.archetype, self.grasp(k), self.trial_seed(k), &self.config)?;
                rec.object_id = self.object_id.clone();
                rec.trial_index = k + 1;
                Ok(rec)
            })
            .collect()
    }
}

/// Writes `manifest.json`, `labels.json` and `trial_<k>.csv` (1-based) into
/// `dir`, creating it if needed.
pub fn generate_session(spec: &SessionSpec, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let trials = spec.generate_trials()?;
    fs::create_dir_all(dir).map_err(|e| ClampError::io(dir, e))?;
    let labels = spec.labels();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        object_id: spec.object_id.clone(),
        labels: LabelRecordJson::from(&labels),
        n_trials: spec.n_trials,
        seed: spec.seed,
        embodiment: Some(spec.config.embodiment.name().to_string()),
    };
    let write = |name: &str, text: &str| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| ClampError::io(&path, e))
    };
    write("manifest.json", &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    write("labels.json", &write_labels_json(&labels)?)?;
    for rec in &trials {
        write(&format!("trial_{}.csv", rec.trial_index), &rec.to_csv()?)?;
    }
    Ok(dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{align_streams, load_session};

    fn active_min(rec: &TrialRecord) -> f64 {
        align_streams(rec).unwrap().active_c.iter().copied().fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn thermal_response_shape() {
        assert_eq!(thermal_response(0.4, 0.0, 22.0), 55.0);
        assert!((thermal_response(1.0, 1e4, 22.0) - 22.0).abs() < 1e-9);
        assert!(thermal_response(1.0, 1.0, 22.0) < thermal_response(0.1, 1.0, 22.0));
        let seq: Vec<f64> = (0..100).map(|i| thermal_response(0.3, i as f64 * 0.1, 20.0)).collect();
        assert!(seq.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn effusivity_orders_thermal_drop() {
        let grasp = GraspParams::default();
        let steel = MaterialArchetype { effusivity_factor: 1.0, ..MaterialArchetype::preset(Material::Steel) };
        let foam = MaterialArchetype { effusivity_factor: 0.1, ..steel.clone() };
        let drop_steel = 55.0 - active_min(&generate_trial(&steel, &grasp, 3).unwrap());
        let drop_foam = 55.0 - active_min(&generate_trial(&foam, &grasp, 3).unwrap());
        assert!(drop_steel > drop_foam, "{drop_steel} vs {drop_foam}");
        let drops: Vec<f64> = [0.1, 0.3, 0.5, 0.7, 0.9]
            .iter()
            .map(|&e| {
                let a = MaterialArchetype { effusivity_factor: e, ..steel.clone() };
                55.0 - active_min(&generate_trial(&a, &grasp, 9).unwrap())
            })
            .collect();
        assert!(drops.windows(2).all(|w| w[1] > w[0]), "{drops:?}");
    }

    #[test]
    fn compliance_orders_time_to_peak() {
        let grasp = GraspParams::default();
        let cfg = SynthConfig { noise: NoiseConfig::silent(), ..SynthConfig::default() };
        let t95 = |c: f64| {
            let a = MaterialArchetype { compliance_factor: c, ..MaterialArchetype::preset(Material::Glass) };
            let rec = generate_trial_with(&a, &grasp, 1, &cfg).unwrap();
            let f = &rec.force.channels[0];
            let max = f.iter().copied().fold(0.0, f64::max);
            f.iter().position(|v| *v >= 0.95 * max).unwrap()
        };
        let times: Vec<usize> = [0.1, 0.2, 0.4, 0.7, 1.0].iter().map(|&c| t95(c)).collect();
        assert!(times.windows(2).all(|w| w[1] < w[0]), "{times:?}");
    }

    #[test]
    fn no_contact_keeps_force_below_threshold() {
        let grasp = GraspParams { contact_duration_s: 0.0, ..GraspParams::default() };
        let rec = generate_trial(&MaterialArchetype::preset(Material::HardPlastic), &grasp, 5).unwrap();
        assert!(rec.force.channels[0].iter().all(|v| *v <= 0.01));
        assert!(grasp.contact_window().is_none());
    }

    #[test]
    fn force_confined_to_contact_window() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grasp = GraspParams::sample(&mut rng);
            let rec = generate_trial(&MaterialArchetype::preset(Material::Foam), &grasp, seed).unwrap();
            let (a, b) = grasp.contact_window().unwrap();
            for (i, v) in rec.force.channels[0].iter().enumerate() {
                if *v > 0.01 {
                    assert!(i + 1 >= a && i <= b, "seed {seed} index {i} outside [{a}, {b})");
                }
            }
        }
    }

    #[test]
    fn rates_and_timestamps() {
        let grasp = GraspParams::default();
        let rec = generate_trial(&MaterialArchetype::preset(Material::Glass), &grasp, 2).unwrap();
        assert_eq!(rec.thermal.len(), 500);
        assert_eq!(rec.mic.len(), 1000);
        assert!(rec.thermal.t_ms.windows(2).all(|w| w[1] - w[0] == 20.0));
        assert!(rec.mic.t_ms.windows(2).all(|w| w[1] - w[0] == 10.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = MaterialArchetype::preset(Material::Fabric);
        let g = GraspParams::default();
        assert_eq!(generate_trial(&a, &g, 77).unwrap(), generate_trial(&a, &g, 77).unwrap());
        assert_ne!(generate_trial(&a, &g, 77).unwrap(), generate_trial(&a, &g, 78).unwrap());
    }

    #[test]
    fn invalid_grasp_is_rejected() {
        let g = GraspParams { contact_onset_s: 8.0, ..GraspParams::default() };
        let err = generate_trial(&MaterialArchetype::preset(Material::Steel), &g, 1).unwrap_err();
        assert!(err.to_string().contains("trial_duration_s"), "{err}");
        let g = GraspParams { approach_speed: 0.0, ..GraspParams::default() };
        assert!(generate_trial(&MaterialArchetype::preset(Material::Steel), &g, 1).is_err());
    }

    #[test]
    fn session_layout_and_determinism() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SessionSpec::new("mug_01", MaterialArchetype::preset(Material::Porcelain), 42);
        let a = generate_session(&spec, tmp.path().join("a")).unwrap();
        let b = generate_session(&spec, tmp.path().join("b")).unwrap();
        let mut names: Vec<String> =
            fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().to_string()).collect();
        names.sort();
        assert_eq!(
            names,
            ["labels.json", "manifest.json", "trial_1.csv", "trial_2.csv", "trial_3.csv", "trial_4.csv", "trial_5.csv"]
        );
        for name in &names {
            assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
        }
    }

    #[test]
    fn session_round_trip_through_loader() {
        let tmp = tempfile::tempdir().unwrap();
        let mut spec = SessionSpec::new("sponge", MaterialArchetype::preset(Material::Foam), 8);
        spec.heterogeneous_surfaces = true;
        let dir = generate_session(&spec, tmp.path().join("s")).unwrap();
        let loaded = load_session(&dir).unwrap();
        assert_eq!(loaded.trials.len(), 5);
        assert!(loaded.labels.heterogeneous_surfaces);
        assert_eq!(loaded.labels.compliance, Compliance::Soft);
        let direct = spec.generate_trials().unwrap();
        for (l, d) in loaded.trials.iter().zip(&direct) {
            assert_eq!(l.object_id, "sponge");
            for (x, y) in l.thermal.channels[0].iter().zip(&d.thermal.channels[0]) {
                assert!((x - y).abs() <= 1e-9);
            }
            assert_eq!(l, d);
        }
    }

    #[test]
    fn manifest_with_unknown_material_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SessionSpec::new("cup", MaterialArchetype::preset(Material::Steel), 1);
        let dir = generate_session(&spec, tmp.path().join("s")).unwrap();
        let manifest = fs::read_to_string(dir.join("manifest.json")).unwrap();
        fs::write(dir.join("manifest.json"), manifest.replace("\"steel\"", "\"marble\"")).unwrap();
        let err = load_session(&dir).unwrap_err().to_string();
        assert!(err.contains("marble") && err.contains("vegetable_matter") && err.contains("dry_wall"), "{err}");
    }

    #[test]
    fn truncated_trial_reports_file_and_line() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SessionSpec::new("cup", MaterialArchetype::preset(Material::Steel), 1);
        let dir = generate_session(&spec, tmp.path().join("s")).unwrap();
        let path = dir.join("trial_3.csv");
        let text = fs::read_to_string(&path).unwrap();
        let cut = text[..text.len() - 25].rfind(',').unwrap();
        fs::write(&path, &text[..cut]).unwrap();
        let err = load_session(&dir).unwrap_err();
        match err {
            ClampError::Parse { file, line, .. } => {
                assert!(file.ends_with("trial_3.csv"));
                assert_eq!(line, text[..cut].lines().count());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(load_session(tmp.path()), Err(ClampError::Schema { .. })));
    }

    #[test]
    fn bare_directory_with_sidecar_labels() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SessionSpec::new("box_7", MaterialArchetype::preset(Material::Cardboard), 3);
        let dir = generate_session(&spec, tmp.path().join("box_7")).unwrap();
        fs::remove_file(dir.join("manifest.json")).unwrap();
        let loaded = load_session(&dir).unwrap();
        assert_eq!(loaded.object_id, "box_7");
        assert_eq!(loaded.labels.material, Material::Cardboard);
        assert_eq!(loaded.trials.len(), 5);
    }
}
