//! Smoothing and conditioning filters applied before featurization.
//!
//! All filters are pure functions over `&[f64]` and return a series of the same
//! length as their input (the microphone decimation is the one exception and
//! documents its own length rule).

use serde::{Deserialize, Serialize};

use crate::error::{validation, ClampError, Result};

/// Sample rate of every non-microphone stream after alignment.
pub const BASE_RATE_HZ: f64 = 50.0;
/// Sample rate of the contact microphone.
pub const MIC_RATE_HZ: f64 = 100.0;
/// Tail length used to debias linear acceleration (gripper is stationary there).
pub const LIN_ACC_TAIL: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub butterworth_order: usize,
    pub butterworth_cutoff_hz: f64,
    pub moving_avg_window: usize,
    pub sg_window: usize,
    pub sg_poly: usize,
    pub mic_target_rate_hz: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            butterworth_order: 2,
            butterworth_cutoff_hz: 5.0,
            moving_avg_window: 5,
            sg_window: 11,
            sg_poly: 3,
            mic_target_rate_hz: BASE_RATE_HZ,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.butterworth_order == 0 {
            return Err(validation("butterworth_order must be >= 1"));
        }
        let nyquist = BASE_RATE_HZ / 2.0;
        if !(self.butterworth_cutoff_hz > 0.0 && self.butterworth_cutoff_hz < nyquist) {
            return Err(validation(format!(
                "butterworth_cutoff_hz {} must lie in (0, {nyquist}) Hz",
                self.butterworth_cutoff_hz
            )));
        }
        if self.moving_avg_window == 0 {
            return Err(validation("moving_avg_window must be >= 1"));
        }
        if self.sg_window % 2 == 0 || self.sg_window <= self.sg_poly {
            return Err(validation(format!(
                "sg_window {} must be odd and greater than sg_poly {}",
                self.sg_window, self.sg_poly
            )));
        }
        if (self.mic_target_rate_hz - BASE_RATE_HZ).abs() > 1e-9 {
            return Err(validation("mic_target_rate_hz must equal the 50 Hz base rate (2:1 decimation)"));
        }
        Ok(())
    }
}

/// One second-order section, `b` numerator and `a` denominator with `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

/// Digital Butterworth low-pass as a cascade of second-order sections,
/// designed by the bilinear transform with cutoff pre-warping.
#[derive(Debug, Clone, PartialEq)]
pub struct Butterworth {
    sections: Vec<Biquad>,
}

impl Butterworth {
    pub fn lowpass(order: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Result<Self> {
        if order == 0 {
            return Err(validation("butterworth order must be >= 1"));
        }
        let nyquist = sample_rate_hz / 2.0;
        if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
            return Err(ClampError::Range {
                value: cutoff_hz,
                range: format!("(0, {nyquist}) Hz: cutoff must be below Nyquist"),
            });
        }
        let k = (std::f64::consts::PI * cutoff_hz / sample_rate_hz).tan();
        let k2 = k * k;
        let mut sections = Vec::with_capacity(order.div_ceil(2));
        // Analog prototype factors s^2 + 2 sin(theta) s + 1 for each conjugate pole pair.
        for i in 0..order / 2 {
            let theta = std::f64::consts::PI * (2 * i + 1) as f64 / (2 * order) as f64;
            let damp = 2.0 * theta.sin();
            let a0 = 1.0 + damp * k + k2;
            sections.push(Biquad {
                b: [k2 / a0, 2.0 * k2 / a0, k2 / a0],
                a: [1.0, (2.0 * k2 - 2.0) / a0, (1.0 - damp * k + k2) / a0],
            });
        }
        if order % 2 == 1 {
            let a0 = 1.0 + k;
            sections.push(Biquad { b: [k / a0, k / a0, 0.0], a: [1.0, (k - 1.0) / a0, 0.0] });
        }
        Ok(Self { sections })
    }

    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    /// Filters causally. The internal state starts at the steady state for a
    /// constant input equal to `x[0]`, so a flat signal passes unchanged from
    /// the first sample instead of ringing up from zero.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        let Some(&first) = x.first() else {
            return y;
        };
        for s in &self.sections {
            let [b0, b1, b2] = s.b;
            let [_, a1, a2] = s.a;
            // Transposed direct form II with steady-state initial conditions.
            let mut z1 = (1.0 - b0) * first;
            let mut z2 = (b2 - a2) * first;
            for v in y.iter_mut() {
                let input = *v;
                let out = b0 * input + z1;
                z1 = b1 * input - a1 * out + z2;
                z2 = b2 * input - a2 * out;
                *v = out;
            }
        }
        y
    }
}

pub fn butterworth_lowpass(x: &[f64], cfg: &FilterConfig) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(ClampError::Empty("butterworth input series".into()));
    }
    let filt = Butterworth::lowpass(cfg.butterworth_order, cfg.butterworth_cutoff_hz, BASE_RATE_HZ)?;
    Ok(filt.apply(x))
}

/// `y[t] = mean(x[max(0, t - window + 1) ..= t])`.
pub fn causal_moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..x.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            x[lo..=t].iter().sum::<f64>() / (t + 1 - lo) as f64
        })
        .collect()
}

/// Weights that evaluate, at offset 0, the least-squares polynomial of
/// degree `degree` fitted to samples at offsets `-half..=half`.
fn sg_center_weights(half: usize, degree: usize) -> Vec<f64> {
    let n = 2 * half + 1;
    let degree = degree.min(n - 1);
    if degree + 1 == n {
        // Interpolating fit reproduces the centre sample.
        let mut w = vec![0.0; n];
        w[half] = 1.0;
        return w;
    }
    let m = degree + 1;
    let scale = half.max(1) as f64;
    // Normal equations on scaled offsets u = offset / half.
    let mut gram = vec![vec![0.0; m]; m];
    let us: Vec<f64> = (0..n).map(|j| (j as f64 - half as f64) / scale).collect();
    for &u in &us {
        let mut pow = vec![1.0; m];
        for k in 1..m {
            pow[k] = pow[k - 1] * u;
        }
        for r in 0..m {
            for c in 0..m {
                gram[r][c] += pow[r] * pow[c];
            }
        }
    }
    // Solve gram * coef = e0; the centre value of the fit is sum_j (A coef)_j.
    let mut rhs = vec![0.0; m];
    rhs[0] = 1.0;
    let coef = solve_dense(gram, rhs);
    us.iter()
        .map(|&u| {
            let mut p = 1.0;
            let mut acc = 0.0;
            for c in &coef {
                acc += c * p;
                p *= u;
            }
            acc
        })
        .collect()
}

/// Gaussian elimination with partial pivoting for small dense systems.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap_or(col);
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        for row in col + 1..n {
            let f = a[row][col] / d;
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Savitzky-Golay smoothing. Near the edges the window shrinks symmetrically
/// around the sample (and the degree with it), so polynomials of degree
/// `poly` are reproduced everywhere.
pub fn savitzky_golay(x: &[f64], window: usize, poly: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 || window <= poly {
        return Err(validation(format!("savitzky-golay window {window} must be odd and greater than poly {poly}")));
    }
    if window > x.len() {
        return Err(validation(format!("savitzky-golay window {window} exceeds series length {}", x.len())));
    }
    let half = window / 2;
    let weights: Vec<Vec<f64>> = (0..=half).map(|h| sg_center_weights(h, poly)).collect();
    let n = x.len();
    Ok((0..n)
        .map(|t| {
            let h = half.min(t).min(n - 1 - t);
            weights[h].iter().enumerate().map(|(j, w)| w * x[t + j - h]).sum()
        })
        .collect())
}

/// Debiases the 100 Hz microphone, block-averages adjacent pairs down to the
/// 50 Hz grid and fits the result to `target_len` (truncating, or extending
/// with zeros).
pub fn condition_mic(mic: &[f64], target_len: usize) -> Result<Vec<f64>> {
    if mic.is_empty() {
        return Err(ClampError::Empty("microphone series".into()));
    }
    let decimated = debias_and_decimate(mic);
    let mut out = decimated;
    out.resize(target_len, 0.0);
    Ok(out)
}

/// Debias + 2:1 block-mean decimation without the final length fit.
pub fn debias_and_decimate(mic: &[f64]) -> Vec<f64> {
    let mean = mic.iter().sum::<f64>() / mic.len() as f64;
    mic.chunks(2).map(|c| c.iter().map(|v| v - mean).sum::<f64>() / c.len() as f64).collect()
}

/// Parallel-jaw proprioception conditioning: Savitzky-Golay smoothing,
/// subtraction of the mean of the final 50 samples, then removal of the
/// straight line through the first and last residual values.
pub fn condition_linear_acceleration(a: &[f64], cfg: &FilterConfig) -> Result<Vec<f64>> {
    if a.len() < LIN_ACC_TAIL {
        return Err(validation(format!(
            "linear acceleration series has {} samples, need at least {LIN_ACC_TAIL}",
            a.len()
        )));
    }
    let window = if cfg.sg_window <= a.len() {
        cfg.sg_window
    } else {
        // Largest odd window that fits.
        (a.len() - 1) | 1
    };
    let mut y = savitzky_golay(a, window, cfg.sg_poly.min(window - 1))?;
    let n = y.len();
    let tail_mean = y[n - LIN_ACC_TAIL..].iter().sum::<f64>() / LIN_ACC_TAIL as f64;
    y.iter_mut().for_each(|v| *v -= tail_mean);
    let (first, last) = (y[0], y[n - 1]);
    let span = (n - 1).max(1) as f64;
    for (t, v) in y.iter_mut().enumerate() {
        *v -= first + (last - first) * t as f64 / span;
    }
    Ok(y)
}
