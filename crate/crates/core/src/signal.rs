//! Gaze signal processing.
//!
//! Velocity estimation with a Savitzky-Golay differentiator, the sine
//! normalization used as model input, identity removal by downsampling with
//! zero-order hold, integration back to gaze angles, and the Butterworth
//! high-pass baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Velocities are clamped to this magnitude (°/s) before normalization.
pub const VELOCITY_LIMIT: f64 = 1000.0;

/// Window length of the velocity differentiator.
pub const SG_WINDOW: usize = 7;

/// Tolerance for normalized values that drift just outside [-1, 1].
const NORMALIZED_SLACK: f64 = 1e-6;

/// Gaze angles in degrees of visual angle, one `[x, y]` pair per sample.
///
/// Samples where `valid` is false hold `NaN` or a placeholder and must not
/// be trusted.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeSequence {
    pub sample_rate: f64,
    pub samples: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl GazeSequence {
    /// Builds a fully valid sequence.
    pub fn new(sample_rate: f64, samples: Vec<[f64; 2]>) -> Result<Self> {
        let valid = vec![true; samples.len()];
        Self::with_mask(sample_rate, samples, valid)
    }

    pub fn with_mask(sample_rate: f64, samples: Vec<[f64; 2]>, valid: Vec<bool>) -> Result<Self> {
        let seq = GazeSequence {
            sample_rate,
            samples,
            valid,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sample rate must be positive, got {}",
                self.sample_rate
            )));
        }
        if self.samples.len() != self.valid.len() {
            return Err(Error::Shape(format!(
                "{} samples but {} validity flags",
                self.samples.len(),
                self.valid.len()
            )));
        }
        if self.samples.len() < SG_WINDOW {
            return Err(Error::TooShort {
                len: self.samples.len(),
                min: SG_WINDOW,
            });
        }
        for (i, (s, &ok)) in self.samples.iter().zip(&self.valid).enumerate() {
            if ok && !(s[0].is_finite() && s[1].is_finite()) {
                return Err(Error::NonFinite(format!("gaze sample {i} marked valid")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Copy of samples and mask restricted to `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::Shape(format!(
                "window {}..{} exceeds sequence of length {}",
                start,
                start + len,
                self.len()
            )));
        }
        Self::with_mask(
            self.sample_rate,
            self.samples[start..start + len].to_vec(),
            self.valid[start..start + len].to_vec(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocitySpace {
    RawDegPerS,
    Normalized,
}

/// Two-channel angular velocity, either in °/s or sine-normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySequence {
    pub sample_rate: f64,
    pub channels: Vec<[f64; 2]>,
    pub space: VelocitySpace,
}

impl VelocitySequence {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Channel-major layout: all `vx` followed by all `vy`.
    pub fn to_channel_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.len());
        out.extend(self.channels.iter().map(|c| c[0]));
        out.extend(self.channels.iter().map(|c| c[1]));
        out
    }

    pub fn from_channel_major(
        sample_rate: f64,
        data: &[f64],
        space: VelocitySpace,
    ) -> Result<Self> {
        if !data.len().is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "channel-major buffer of odd length {}",
                data.len()
            )));
        }
        let n = data.len() / 2;
        let channels = (0..n).map(|i| [data[i], data[n + i]]).collect();
        Ok(VelocitySequence {
            sample_rate,
            channels,
            space,
        })
    }

    /// Number of samples with a non-finite component.
    pub fn count_non_finite(&self) -> usize {
        self.channels
            .iter()
            .filter(|c| !(c[0].is_finite() && c[1].is_finite()))
            .count()
    }

    /// Euclidean speed per sample.
    pub fn speeds(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c[0].hypot(c[1])).collect()
    }
}

/// First-derivative Savitzky-Golay weights over a symmetric window.
#[derive(Debug, Clone, PartialEq)]
pub struct SgKernel {
    pub coefficients: Vec<f64>,
}

impl SgKernel {
    /// Least-squares slope weights for a polynomial of `order` fitted over
    /// `window` unit-spaced points centred on the output sample.
    pub fn first_derivative(window: usize, order: usize) -> Result<Self> {
        if window.is_multiple_of(2) || window <= order {
            return Err(Error::InvalidArgument(format!(
                "window {window} must be odd and exceed order {order}"
            )));
        }
        let half = (window / 2) as i64;
        let terms = order + 1;
        let offsets: Vec<f64> = (-half..=half).map(|k| k as f64).collect();

        // Normal equations (VᵀV) a = Vᵀy; the slope weights are row 1 of (VᵀV)⁻¹Vᵀ.
        let mut gram = vec![vec![0.0; terms]; terms];
        for (r, row) in gram.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = offsets.iter().map(|k| k.powi((r + c) as i32)).sum();
            }
        }
        let mut unit = vec![0.0; terms];
        unit[1] = 1.0;
        // Solve (VᵀV) z = e₁; weights are then w_k = Σ_p z_p k^p.
        let z = solve_dense(gram, unit)?;
        let coefficients = offsets
            .iter()
            .map(|k| {
                z.iter()
                    .enumerate()
                    .map(|(p, zp)| zp * k.powi(p as i32))
                    .sum()
            })
            .collect();
        Ok(SgKernel { coefficients })
    }

    /// The window-7, order-2 kernel used for all velocity estimation.
    pub fn standard() -> Self {
        Self::first_derivative(SG_WINDOW, 2).expect("window 7 order 2 is well posed")
    }

    /// Applies the kernel to one channel with edge-replicated padding.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let half = (self.coefficients.len() / 2) as isize;
        let last = x.len() as isize - 1;
        (0..x.len() as isize)
            .map(|n| {
                self.coefficients
                    .iter()
                    .enumerate()
                    .map(|(j, w)| {
                        let idx = (n + j as isize - half).clamp(0, last) as usize;
                        w * x[idx]
                    })
                    .sum()
            })
            .collect()
    }
}

/// Gaussian elimination with partial pivoting for small dense systems.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::Degenerate("singular least-squares system".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Ok(x)
}

/// Velocity in °/s of each gaze channel, before NaN handling or clamping.
///
/// Invalid samples are treated as NaN, so every output whose window touches
/// one is NaN.
pub fn savgol_derivative(g: &GazeSequence) -> Result<VelocitySequence> {
    if g.len() < SG_WINDOW {
        return Err(Error::TooShort {
            len: g.len(),
            min: SG_WINDOW,
        });
    }
    let kernel = SgKernel::standard();
    let channel = |c: usize| -> Vec<f64> {
        let x: Vec<f64> = g
            .samples
            .iter()
            .zip(&g.valid)
            .map(|(s, &ok)| if ok { s[c] } else { f64::NAN })
            .collect();
        kernel
            .apply(&x)
            .into_iter()
            .map(|d| d * g.sample_rate)
            .collect()
    };
    let vx = channel(0);
    let vy = channel(1);
    Ok(VelocitySequence {
        sample_rate: g.sample_rate,
        channels: vx.into_iter().zip(vy).map(|(a, b)| [a, b]).collect(),
        space: VelocitySpace::RawDegPerS,
    })
}

/// Scalar form of [`preprocess`].
pub fn normalize_velocity(v: f64) -> f64 {
    let v = if v.is_finite() { v } else { 0.0 };
    let v = v.clamp(-VELOCITY_LIMIT, VELOCITY_LIMIT);
    (v / VELOCITY_LIMIT * 90.0).to_radians().sin()
}

/// Scalar form of [`denormalize`].
pub fn denormalize_velocity(s: f64) -> Result<f64> {
    if !s.is_finite() || s.abs() > 1.0 + NORMALIZED_SLACK {
        return Err(Error::InvalidArgument(format!(
            "normalized velocity {s} outside [-1, 1]"
        )));
    }
    Ok(s.clamp(-1.0, 1.0).asin().to_degrees() * VELOCITY_LIMIT / 90.0)
}

/// Zero-fills non-finite values, clamps to ±1000 °/s and maps through
/// `sin(v / 1000 · 90°)`.
pub fn preprocess(v: &VelocitySequence) -> VelocitySequence {
    VelocitySequence {
        sample_rate: v.sample_rate,
        channels: v
            .channels
            .iter()
            .map(|c| [normalize_velocity(c[0]), normalize_velocity(c[1])])
            .collect(),
        space: VelocitySpace::Normalized,
    }
}

/// Inverse of [`preprocess`] on (-1000, 1000) °/s.
pub fn denormalize(s: &VelocitySequence) -> Result<VelocitySequence> {
    let channels = s
        .channels
        .iter()
        .map(|c| Ok([denormalize_velocity(c[0])?, denormalize_velocity(c[1])?]))
        .collect::<Result<Vec<_>>>()?;
    Ok(VelocitySequence {
        sample_rate: s.sample_rate,
        channels,
        space: VelocitySpace::RawDegPerS,
    })
}

/// Rebuilds gaze angles from raw velocities by a running sum from `start`.
pub fn integrate(v: &VelocitySequence, start: [f64; 2]) -> Result<GazeSequence> {
    if v.space != VelocitySpace::RawDegPerS {
        return Err(Error::InvalidArgument(
            "integrate expects raw °/s velocities".into(),
        ));
    }
    let dt = 1.0 / v.sample_rate;
    let mut pos = start;
    let mut samples = Vec::with_capacity(v.len());
    for (n, c) in v.channels.iter().enumerate() {
        if n > 0 {
            pos[0] += c[0] * dt;
            pos[1] += c[1] * dt;
        }
        samples.push(pos);
    }
    GazeSequence::new(v.sample_rate, samples)
}

/// Downsamples to `low_rate` and holds each kept sample until the next one.
pub fn remove_identity(g: &GazeSequence, low_rate: f64) -> Result<GazeSequence> {
    let ratio = g.sample_rate / low_rate;
    let factor = ratio.round();
    if !(low_rate > 0.0) || factor < 1.0 || (ratio - factor).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "sample rate {} is not a multiple of {}",
            g.sample_rate, low_rate
        )));
    }
    let factor = factor as usize;
    let held = |n: usize| (n / factor) * factor;
    Ok(GazeSequence {
        sample_rate: g.sample_rate,
        samples: (0..g.len()).map(|n| g.samples[held(n)]).collect(),
        valid: (0..g.len()).map(|n| g.valid[held(n)]).collect(),
    })
}

/// Zero-order-hold upsampling of a low-rate recording to `target_rate`.
pub fn upsample_hold(g: &GazeSequence, target_rate: f64) -> Result<GazeSequence> {
    let ratio = target_rate / g.sample_rate;
    let factor = ratio.round();
    if factor < 1.0 || (ratio - factor).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "target rate {} is not a multiple of {}",
            target_rate, g.sample_rate
        )));
    }
    let factor = factor as usize;
    let n = g.len() * factor;
    GazeSequence::with_mask(
        target_rate,
        (0..n).map(|i| g.samples[i / factor]).collect(),
        (0..n).map(|i| g.valid[i / factor]).collect(),
    )
}

/// Transposed direct form II second-order section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Second-order Butterworth high-pass via the bilinear transform.
    pub fn butterworth_highpass(cutoff: f64, sample_rate: f64) -> Result<Self> {
        let nyquist = sample_rate / 2.0;
        if !(cutoff > 0.0 && cutoff < nyquist) {
            return Err(Error::InvalidArgument(format!(
                "cutoff {cutoff} Hz must lie in (0, {nyquist}) Hz"
            )));
        }
        let k = (std::f64::consts::PI * cutoff / sample_rate).tan();
        let sqrt2 = std::f64::consts::SQRT_2;
        let norm = 1.0 / (1.0 + sqrt2 * k + k * k);
        Ok(Biquad {
            b0: norm,
            b1: -2.0 * norm,
            b2: norm,
            a1: 2.0 * (k * k - 1.0) * norm,
            a2: (1.0 - sqrt2 * k + k * k) * norm,
        })
    }

    /// Magnitude of the frequency response at `freq` Hz.
    pub fn magnitude(&self, freq: f64, sample_rate: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq / sample_rate;
        let (c1, s1) = (w.cos(), -w.sin());
        let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (
            self.b0 + self.b1 * c1 + self.b2 * c2,
            self.b1 * s1 + self.b2 * s2,
        );
        let den = (
            1.0 + self.a1 * c1 + self.a2 * c2,
            self.a1 * s1 + self.a2 * s2,
        );
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }

    /// Filter state that makes a constant input of 1 a steady state.
    fn steady_state(&self) -> [f64; 2] {
        let y = (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2);
        let z2 = self.b2 - self.a2 * y;
        let z1 = self.b1 - self.a1 * y + z2;
        [z1, z2]
    }

    fn run(&self, x: &[f64], state: [f64; 2]) -> Vec<f64> {
        let [mut z1, mut z2] = state;
        x.iter()
            .map(|&xn| {
                let y = self.b0 * xn + z1;
                z1 = self.b1 * xn - self.a1 * y + z2;
                z2 = self.b2 * xn - self.a2 * y;
                y
            })
            .collect()
    }

    /// Zero-phase forward-backward filtering with odd-extension padding and
    /// steady-state initial conditions.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * 3).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let zi = self.steady_state();
        let scaled = |s: f64| [zi[0] * s, zi[1] * s];
        let mut y = self.run(&ext, scaled(ext[0]));
        y.reverse();
        let mut y = self.run(&y, scaled(y[0]));
        y.reverse();
        y[pad..pad + n].to_vec()
    }
}

/// Zero-phase second-order Butterworth high-pass applied to both channels.
///
/// Non-finite outputs are passed through; callers count them with
/// [`VelocitySequence::count_non_finite`].
pub fn butterworth_highpass(v: &VelocitySequence, cutoff: f64) -> Result<VelocitySequence> {
    let filter = Biquad::butterworth_highpass(cutoff, v.sample_rate)?;
    let vx: Vec<f64> = v.channels.iter().map(|c| c[0]).collect();
    let vy: Vec<f64> = v.channels.iter().map(|c| c[1]).collect();
    let fx = filter.filtfilt(&vx);
    let fy = filter.filtfilt(&vy);
    Ok(VelocitySequence {
        sample_rate: v.sample_rate,
        channels: fx.into_iter().zip(fy).map(|(a, b)| [a, b]).collect(),
        space: VelocitySpace::RawDegPerS,
    })
}

/// Classical baseline: base velocities plus the high-passed target velocities.
pub fn highpass_inject(
    base: &GazeSequence,
    target: &GazeSequence,
    cutoff: f64,
) -> Result<VelocitySequence> {
    if base.len() != target.len() || base.sample_rate != target.sample_rate {
        return Err(Error::Shape(format!(
            "base ({} @ {} Hz) and target ({} @ {} Hz) differ",
            base.len(),
            base.sample_rate,
            target.len(),
            target.sample_rate
        )));
    }
    let base_v = savgol_derivative(base)?;
    let high = butterworth_highpass(&savgol_derivative(target)?, cutoff)?;
    Ok(VelocitySequence {
        sample_rate: base.sample_rate,
        channels: base_v
            .channels
            .iter()
            .zip(&high.channels)
            .map(|(b, h)| [b[0] + h[0], b[1] + h[1]])
            .collect(),
        space: VelocitySpace::RawDegPerS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(xs: impl IntoIterator<Item = [f64; 2]>, rate: f64) -> GazeSequence {
        GazeSequence::new(rate, xs.into_iter().collect()).unwrap()
    }

    fn raw(channels: Vec<[f64; 2]>, rate: f64) -> VelocitySequence {
        VelocitySequence {
            sample_rate: rate,
            channels,
            space: VelocitySpace::RawDegPerS,
        }
    }

    #[test]
    fn kernel_shape_properties() {
        let k = SgKernel::standard();
        let sum: f64 = k.coefficients.iter().sum();
        assert!(sum.abs() < 1e-12);
        for j in 0..7 {
            assert!((k.coefficients[j] + k.coefficients[6 - j]).abs() < 1e-12);
        }
        let slope: f64 = k
            .coefficients
            .iter()
            .enumerate()
            .map(|(j, c)| c * j as f64)
            .sum();
        assert!((slope - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_sequence_has_zero_velocity() {
        let g = seq(std::iter::repeat_n([3.0, -1.5], 50), 1000.0);
        let v = savgol_derivative(&g).unwrap();
        assert!(v.channels.iter().all(|c| c[0] == 0.0 && c[1] == 0.0));
    }

    #[test]
    fn ramp_velocity() {
        let g = seq((0..100).map(|n| [0.002 * n as f64, 0.0]), 1000.0);
        let v = savgol_derivative(&g).unwrap();
        for c in &v.channels[3..97] {
            assert!((c[0] - 2.0).abs() < 1e-9, "{}", c[0]);
        }
        assert_eq!(v.len(), 100);
    }

    #[test]
    fn short_sequence_rejected() {
        let g = GazeSequence {
            sample_rate: 1000.0,
            samples: vec![[0.0; 2]; 6],
            valid: vec![true; 6],
        };
        assert!(matches!(savgol_derivative(&g), Err(Error::TooShort { .. })));
        assert!(GazeSequence::new(1000.0, vec![[0.0; 2]; 6]).is_err());
    }

    #[test]
    fn invalid_samples_become_nan_then_zero() {
        let mut g = seq((0..30).map(|n| [n as f64 * 0.01, 0.0]), 1000.0);
        g.valid[15] = false;
        g.samples[15] = [f64::NAN, f64::NAN];
        let v = savgol_derivative(&g).unwrap();
        assert!(v.channels[12][0].is_nan() && v.channels[18][0].is_nan());
        assert!(v.channels[11][0].is_finite() && v.channels[19][0].is_finite());
        let s = preprocess(&v);
        assert_eq!(s.channels[15][0], 0.0);
    }

    #[test]
    fn preprocess_examples() {
        assert_eq!(normalize_velocity(1500.0), 1.0);
        assert_eq!(normalize_velocity(f64::NAN), 0.0);
        assert!((normalize_velocity(500.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert_eq!(normalize_velocity(-1e9), -1.0);
    }

    #[test]
    fn denormalize_examples() {
        assert_eq!(denormalize_velocity(0.0).unwrap(), 0.0);
        assert!((denormalize_velocity(1.0).unwrap() - 1000.0).abs() < 1e-9);
        assert!((denormalize_velocity(0.5).unwrap() - 1000.0 / 3.0).abs() < 1e-9);
        assert!((denormalize_velocity(1.0 + 5e-7).unwrap() - 1000.0).abs() < 1e-9);
        assert!(denormalize_velocity(1.0 + 1e-5).is_err());
        assert!(denormalize_velocity(f64::NAN).is_err());
    }

    #[test]
    fn integrate_examples() {
        let v = raw(vec![[0.0, 0.0]; 20], 1000.0);
        let g = integrate(&v, [1.0, 2.0]).unwrap();
        assert!(g.samples.iter().all(|s| *s == [1.0, 2.0]));

        let v = raw(vec![[100.0, 0.0]; 1001], 1000.0);
        let g = integrate(&v, [0.0, 0.0]).unwrap();
        assert!((g.samples[1000][0] - 100.0).abs() < 1e-9);
        assert!(g.valid.iter().all(|&b| b));

        let norm = VelocitySequence {
            space: VelocitySpace::Normalized,
            ..v
        };
        assert!(integrate(&norm, [0.0, 0.0]).is_err());
    }

    #[test]
    fn derivative_of_integrated_sinusoid() {
        let rate = 1000.0;
        let truth: Vec<[f64; 2]> = (0..2000)
            .map(|n| {
                let t = n as f64 / rate;
                let w = 2.0 * std::f64::consts::PI * 2.0;
                [50.0 * (w * t).sin(), 30.0 * (w * t).cos()]
            })
            .collect();
        let g = integrate(&raw(truth.clone(), rate), [0.0, 0.0]).unwrap();
        let v = savgol_derivative(&g).unwrap();
        let max_err = v.channels[3..1997]
            .iter()
            .zip(&truth[3..1997])
            .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
            .fold(0.0, f64::max);
        assert!(max_err < 1.0, "max error {max_err}");
    }

    #[test]
    fn remove_identity_examples() {
        let g = seq(std::iter::repeat_n([2.0, 2.0], 200), 1000.0);
        assert_eq!(remove_identity(&g, 20.0).unwrap(), g);

        let g = seq((0..200).map(|n| [n as f64 * 0.001, 0.0]), 1000.0);
        let r = remove_identity(&g, 20.0).unwrap();
        for (n, s) in r.samples.iter().enumerate() {
            let expected = (n / 50) as f64 * 0.05;
            assert!((s[0] - expected).abs() < 1e-12);
        }
        assert!(remove_identity(&g, 30.0).is_err());
    }

    #[test]
    fn remove_identity_propagates_invalid_holds() {
        let mut g = seq((0..200).map(|n| [n as f64, 0.0]), 1000.0);
        g.valid[50] = false;
        g.samples[50] = [f64::NAN; 2];
        let r = remove_identity(&g, 20.0).unwrap();
        assert!(r.valid[..50].iter().all(|&b| b));
        assert!(r.valid[50..100].iter().all(|&b| !b));
        assert!(r.valid[100..].iter().all(|&b| b));
    }

    #[test]
    fn upsample_hold_repeats() {
        let g = seq((0..10).map(|n| [n as f64, -(n as f64)]), 20.0);
        let u = upsample_hold(&g, 1000.0).unwrap();
        assert_eq!(u.len(), 500);
        assert_eq!(u.samples[99], [1.0, -1.0]);
        assert_eq!(u.samples[100], [2.0, -2.0]);
    }

    fn amplitude(x: &[f64]) -> f64 {
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        rms * std::f64::consts::SQRT_2
    }

    fn sinusoid(freq: f64, rate: f64, n: usize) -> VelocitySequence {
        raw(
            (0..n)
                .map(|i| {
                    let s = (2.0 * std::f64::consts::PI * freq * i as f64 / rate).sin();
                    [s, 0.5 * s]
                })
                .collect(),
            rate,
        )
    }

    #[test]
    fn highpass_rejects_dc() {
        let v = raw(vec![[50.0, -20.0]; 3000], 1000.0);
        let out = butterworth_highpass(&v, 20.0).unwrap();
        assert!(out.channels[500..2500]
            .iter()
            .all(|c| c[0].abs() < 1e-3 && c[1].abs() < 1e-3));
    }

    #[test]
    fn highpass_magnitude_response() {
        let rate = 1000.0;
        let filter = Biquad::butterworth_highpass(20.0, rate).unwrap();
        // Analog prototype oracle: |H(f)|² = 1 / (1 + (fc'/f')⁴) with prewarped frequencies.
        let prewarp = |f: f64| (std::f64::consts::PI * f / rate).tan();
        let analog = |f: f64| 1.0 / (1.0 + (prewarp(20.0) / prewarp(f)).powi(4)).sqrt();
        for f in [2.0, 20.0, 100.0, 300.0] {
            assert!((filter.magnitude(f, rate) - analog(f)).abs() < 1e-9);
        }

        let fast = butterworth_highpass(&sinusoid(100.0, rate, 4000), 20.0).unwrap();
        let x: Vec<f64> = fast.channels[1000..3000].iter().map(|c| c[0]).collect();
        let ratio = amplitude(&x);
        assert!((ratio - analog(100.0).powi(2)).abs() < 0.005);
        assert!((ratio - 1.0).abs() < 0.02, "100 Hz ratio {ratio}");

        let slow = butterworth_highpass(&sinusoid(2.0, rate, 4000), 20.0).unwrap();
        let x: Vec<f64> = slow.channels[1000..3000].iter().map(|c| c[0]).collect();
        assert!(amplitude(&x) < 0.01, "2 Hz amplitude {}", amplitude(&x));
    }

    #[test]
    fn highpass_rejects_nyquist_cutoff() {
        let v = raw(vec![[0.0; 2]; 100], 1000.0);
        assert!(butterworth_highpass(&v, 500.0).is_err());
        assert!(butterworth_highpass(&v, 0.0).is_err());
    }

    #[test]
    fn highpass_reports_non_finite() {
        let mut channels = vec![[1.0, 1.0]; 100];
        channels[40] = [f64::NAN, 0.0];
        let out = butterworth_highpass(&raw(channels, 1000.0), 20.0).unwrap();
        assert!(out.count_non_finite() > 0);
    }

    #[test]
    fn inject_constant_target_returns_base() {
        let base = seq((0..300).map(|n| [(n as f64 * 0.01).sin(), 0.0]), 1000.0);
        let target = seq(std::iter::repeat_n([4.0, 4.0], 300), 1000.0);
        let out = highpass_inject(&base, &target, 20.0).unwrap();
        let base_v = savgol_derivative(&base).unwrap();
        for (a, b) in out.channels.iter().zip(&base_v.channels) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
        let short = seq(std::iter::repeat_n([4.0, 4.0], 200), 1000.0);
        assert!(highpass_inject(&base, &short, 20.0).is_err());
    }

    proptest! {
        #[test]
        fn quadratic_derivative_exact(a in -5.0..5.0f64, b in -1.0..1.0f64, c in -0.01..0.01f64) {
            let rate = 1000.0;
            let g = seq((0..40).map(|n| {
                let n = n as f64;
                [a + b * n + c * n * n, -a + 0.5 * b * n]
            }), rate);
            let v = savgol_derivative(&g).unwrap();
            for (n, vel) in v.channels.iter().enumerate().take(37).skip(3) {
                let expected = (b + 2.0 * c * n as f64) * rate;
                prop_assert!((vel[0] - expected).abs() <= 1e-9 * expected.abs().max(1.0));
                prop_assert!((vel[1] - 0.5 * b * rate).abs() <= 1e-9 * (0.5 * b * rate).abs().max(1.0));
            }
        }

        #[test]
        fn normalization_round_trips(v in -999.999..999.999f64, s in -1.0..1.0f64) {
            prop_assert!((denormalize_velocity(normalize_velocity(v)).unwrap() - v).abs() < 1e-6);
            prop_assert!((normalize_velocity(denormalize_velocity(s).unwrap()) - s).abs() < 1e-6);
        }

        #[test]
        fn normalization_monotone(a in -2000.0..2000.0f64, b in -2000.0..2000.0f64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(normalize_velocity(lo) <= normalize_velocity(hi));
        }

        #[test]
        fn remove_identity_idempotent(xs in proptest::collection::vec(-10.0..10.0f64, 100..300)) {
            let g = seq(xs.iter().map(|&x| [x, -x]), 1000.0);
            let once = remove_identity(&g, 20.0).unwrap();
            prop_assert_eq!(once.len(), g.len());
            prop_assert_eq!(once.samples[0], g.samples[0]);
            prop_assert_eq!(remove_identity(&once, 20.0).unwrap(), once);
        }

        #[test]
        fn integrate_linear_and_translation_equivariant(
            xs in proptest::collection::vec(-500.0..500.0f64, 10..60),
            k in -3.0..3.0f64,
            dx in -5.0..5.0f64,
        ) {
            let v = raw(xs.iter().map(|&x| [x, 0.3 * x]).collect(), 1000.0);
            let scaled = raw(xs.iter().map(|&x| [k * x, 0.3 * k * x]).collect(), 1000.0);
            let g = integrate(&v, [0.0, 0.0]).unwrap();
            let gs = integrate(&scaled, [0.0, 0.0]).unwrap();
            let gt = integrate(&v, [dx, -dx]).unwrap();
            for i in 0..g.len() {
                prop_assert!((gs.samples[i][0] - k * g.samples[i][0]).abs() < 1e-9);
                prop_assert!((gt.samples[i][0] - g.samples[i][0] - dx).abs() < 1e-9);
                prop_assert!((gt.samples[i][1] - g.samples[i][1] + dx).abs() < 1e-9);
            }
        }

        #[test]
        fn highpass_offset_invariant(
            xs in proptest::collection::vec(-100.0..100.0f64, 200..400),
            offset in -300.0..300.0f64,
        ) {
            let v = raw(xs.iter().map(|&x| [x, x]).collect(), 1000.0);
            let shifted = raw(xs.iter().map(|&x| [x + offset, x]).collect(), 1000.0);
            let a = butterworth_highpass(&v, 20.0).unwrap();
            let b = butterworth_highpass(&shifted, 20.0).unwrap();
            for (p, q) in a.channels.iter().zip(&b.channels) {
                prop_assert!((p[0] - q[0]).abs() < 1e-3);
            }
        }
    }
}
