//! Butterworth band-pass design and zero-phase (forward-backward) filtering.
//!
//! Design path: analog Butterworth prototype, low-pass to band-pass transform,
//! bilinear transform with pre-warped edges. Coefficients are kept as
//! second-order sections in float64.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::DspError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub order: usize,
    pub lo_hz: f64,
    pub hi_hz: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec { order: 4, lo_hz: 0.5, hi_hz: 40.0 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Complex {
    re: f64,
    im: f64,
}

impl Complex {
    fn new(re: f64, im: f64) -> Self {
        Complex { re, im }
    }
    fn add(self, o: Self) -> Self {
        Complex::new(self.re + o.re, self.im + o.im)
    }
    fn sub(self, o: Self) -> Self {
        Complex::new(self.re - o.re, self.im - o.im)
    }
    fn mul(self, o: Self) -> Self {
        Complex::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }
    fn div(self, o: Self) -> Self {
        let d = o.re * o.re + o.im * o.im;
        Complex::new(
            (self.re * o.re + self.im * o.im) / d,
            (self.im * o.re - self.re * o.im) / d,
        )
    }
    fn scale(self, s: f64) -> Self {
        Complex::new(self.re * s, self.im * s)
    }
    fn sqrt(self) -> Self {
        let r = self.re.hypot(self.im);
        let re = ((r + self.re) / 2.0).sqrt();
        let im = ((r - self.re) / 2.0).sqrt().copysign(self.im);
        Complex::new(re, im)
    }
    fn norm(self) -> f64 {
        self.re.hypot(self.im)
    }
}

/// A cascade of biquads, each `[b0, b1, b2, a1, a2]` with `a0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<[f64; 5]>,
}

impl Sos {
    /// Number of coefficients of the equivalent single transfer-function numerator/denominator.
    pub fn tf_len(&self) -> usize {
        2 * self.sections.len() + 1
    }

    /// Expands the cascade into `(b, a)` polynomial coefficients.
    pub fn to_tf(&self) -> (Vec<f64>, Vec<f64>) {
        let mut b = vec![1.0];
        let mut a = vec![1.0];
        for s in &self.sections {
            b = poly_mul(&b, &[s[0], s[1], s[2]]);
            a = poly_mul(&a, &[1.0, s[3], s[4]]);
        }
        (b, a)
    }

    /// Complex gain `H(e^{jw})` at frequency `f_hz`.
    pub fn magnitude(&self, f_hz: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f_hz / fs;
        let z1 = Complex::new(w.cos(), -w.sin());
        let z2 = z1.mul(z1);
        let mut h = Complex::new(1.0, 0.0);
        for s in &self.sections {
            let num = Complex::new(s[0], 0.0).add(z1.scale(s[1])).add(z2.scale(s[2]));
            let den = Complex::new(1.0, 0.0).add(z1.scale(s[3])).add(z2.scale(s[4]));
            h = h.mul(num.div(den));
        }
        h.norm()
    }

    /// Runs the cascade (direct form II transposed) with per-section initial state.
    pub fn filter(&self, x: &[f64], zi: &[[f64; 2]]) -> Vec<f64> {
        let mut y = x.to_vec();
        for (s, z0) in self.sections.iter().zip(zi) {
            let [b0, b1, b2, a1, a2] = *s;
            let (mut z1, mut z2) = (z0[0], z0[1]);
            for v in y.iter_mut() {
                let xn = *v;
                let out = b0 * xn + z1;
                z1 = b1 * xn - a1 * out + z2;
                z2 = b2 * xn - a2 * out;
                *v = out;
            }
        }
        y
    }

    /// Steady-state initial conditions for a unit step input.
    pub fn step_initial_state(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let [b0, b1, b2, a1, a2] = *s;
                let gain = (b0 + b1 + b2) / (1.0 + a1 + a2);
                let z2 = b2 - a2 * gain;
                let z1 = b1 - a1 * gain + z2;
                let zi = [scale * z1, scale * z2];
                scale *= gain;
                zi
            })
            .collect()
    }
}

fn poly_mul(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len() + q.len() - 1];
    for (i, a) in p.iter().enumerate() {
        for (j, b) in q.iter().enumerate() {
            out[i + j] += a * b;
        }
    }
    out
}

/// Designs the digital Butterworth band-pass for `spec` at sample rate `fs`.
pub fn design_bandpass(spec: &FilterSpec, fs: f64) -> Result<Sos, DspError> {
    let n = spec.order;
    if n == 0 || n % 2 == 1 || !(spec.lo_hz > 0.0 && spec.lo_hz < spec.hi_hz && 2.0 * spec.hi_hz < fs) {
        return Err(DspError::InvalidFilter {
            lo_hz: spec.lo_hz,
            hi_hz: spec.hi_hz,
            fs,
        });
    }
    let fs2 = 2.0 * fs;
    let w1 = fs2 * (PI * spec.lo_hz / fs).tan();
    let w2 = fs2 * (PI * spec.hi_hz / fs).tan();
    let bw = w2 - w1;
    let w0_sq = w1 * w2;

    // Upper-half-plane prototype poles (even order); their conjugates are implied.
    // Zeros: n at s = 0 (mapped to z = 1) and n at infinity (mapped to z = -1).
    let proto: Vec<Complex> = (0..n)
        .map(|k| {
            let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
            Complex::new(theta.cos(), theta.sin())
        })
        .filter(|p| p.im >= 0.0)
        .collect();

    let mut analog_poles = Vec::with_capacity(n);
    for p in &proto {
        let half = p.scale(bw / 2.0);
        let disc = half.mul(half).sub(Complex::new(w0_sq, 0.0)).sqrt();
        analog_poles.push(half.add(disc));
        analog_poles.push(half.sub(disc));
    }
    let mut gain = Complex::new(bw.powi(n as i32) * fs2.powi(n as i32), 0.0);
    let mut sections = Vec::with_capacity(analog_poles.len());
    for p in &analog_poles {
        let z = Complex::new(fs2, 0.0).add(*p).div(Complex::new(fs2, 0.0).sub(*p));
        if z.norm() >= 1.0 {
            return Err(DspError::UnstableDesign { pole_magnitude: z.norm() });
        }
        // the conjugate pole shares this section
        let conj = Complex::new(p.re, -p.im);
        gain = gain
            .div(Complex::new(fs2, 0.0).sub(*p))
            .div(Complex::new(fs2, 0.0).sub(conj));
        sections.push([1.0, 0.0, -1.0, -2.0 * z.re, z.re * z.re + z.im * z.im]);
    }
    let k = gain.re;
    for v in sections[0].iter_mut().take(3) {
        *v *= k;
    }
    Ok(Sos { sections })
}

/// Forward-backward filtering with odd-reflection padding and steady-state initial conditions.
pub fn filtfilt(sos: &Sos, x: &[f64]) -> Result<Vec<f64>, DspError> {
    let min_len = 3 * sos.sections.len();
    if x.len() < min_len.max(2) {
        return Err(DspError::TooShort { len: x.len(), min: min_len.max(2) });
    }
    let padlen = (3 * sos.tf_len()).min(x.len() - 1);
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * padlen);
    for i in (1..=padlen).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=padlen {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }

    let zi = sos.step_initial_state();
    let scaled = |v: f64| zi.iter().map(|z| [z[0] * v, z[1] * v]).collect::<Vec<_>>();

    let fwd = sos.filter(&ext, &scaled(ext[0]));
    let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
    let y0 = rev[0];
    rev = sos.filter(&rev, &scaled(y0));
    rev.reverse();
    Ok(rev[padlen..padlen + n].to_vec())
}

/// Zero-phase Butterworth band-pass of a single series.
pub fn butterworth_bandpass(signal: &[f64], fs: f64, spec: &FilterSpec) -> Result<Vec<f64>, DspError> {
    if signal.len() < 3 * spec.order {
        return Err(DspError::TooShort { len: signal.len(), min: 3 * spec.order });
    }
    let sos = design_bandpass(spec, fs)?;
    filtfilt(&sos, signal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(f: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / fs).sin()).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn matches_reference_transfer_function() {
        // butter(4, [0.5, 40], btype='band', fs=250) from an independent implementation
        let b_ref = [
            0.02196126343374193, 0.0, -0.08784505373496773, 0.0, 0.13176758060245158, 0.0,
            -0.08784505373496773, 0.0, 0.02196126343374193,
        ];
        let a_ref = [
            1.0, -5.406154514350461, 12.768907456916438, -17.41964841062876, 15.19071652785795,
            -8.716442114872699, 3.1973474109967395, -0.6803537539243671, 0.06562740718021454,
        ];
        let sos = design_bandpass(&FilterSpec::default(), 250.0).unwrap();
        let (b, a) = sos.to_tf();
        for (x, y) in b.iter().zip(b_ref) {
            assert!((x - y).abs() < 1e-12, "b {x} vs {y}");
        }
        for (x, y) in a.iter().zip(a_ref) {
            assert!((x - y).abs() < 1e-10 * y.abs().max(1.0), "a {x} vs {y}");
        }
    }

    #[test]
    fn squared_magnitude_matches_analytic_values() {
        let sos = design_bandpass(&FilterSpec::default(), 250.0).unwrap();
        let db2 = |f: f64| 20.0 * (sos.magnitude(f, 250.0).powi(2)).log10();
        // reference: -1.05e-5 dB at 10 Hz, -37.84 dB at 60 Hz, -6.02 dB at both edges
        assert!(db2(10.0).abs() < 1e-4);
        assert!((db2(60.0) + 37.842_201_554).abs() < 1e-6);
        assert!((db2(0.5) + 6.020_599_913).abs() < 1e-6);
        assert!((db2(40.0) + 6.020_599_913).abs() < 1e-6);
    }

    #[test]
    fn passband_sinusoid_keeps_amplitude_and_phase() {
        let x = sine(10.0, 250.0, 1000);
        let y = butterworth_bandpass(&x, 250.0, &FilterSpec::default()).unwrap();
        assert_eq!(y.len(), x.len());
        let core = 250..750;
        let ratio_db = 20.0 * (rms(&y[core.clone()]) / rms(&x[core.clone()])).log10();
        assert!(ratio_db.abs() < 1.0, "{ratio_db} dB");
        let xc = |lag: i64| -> f64 {
            core.clone()
                .map(|i| x[i] * y[(i as i64 + lag) as usize])
                .sum()
        };
        let best = (-10..=10).max_by(|&a, &b| xc(a).total_cmp(&xc(b))).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn sixty_hz_is_attenuated() {
        let x = sine(60.0, 250.0, 1000);
        let y = butterworth_bandpass(&x, 250.0, &FilterSpec::default()).unwrap();
        let att = 20.0 * (rms(&y[250..750]) / rms(&x[250..750])).log10();
        assert!(att <= -15.0, "{att} dB");
    }

    #[test]
    fn dc_offset_is_removed() {
        let x = vec![37.5; 2000];
        let y = butterworth_bandpass(&x, 250.0, &FilterSpec::default()).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-6 * 37.5));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(matches!(
            butterworth_bandpass(&[0.0; 5], 250.0, &FilterSpec::default()),
            Err(DspError::TooShort { .. })
        ));
        let spec = FilterSpec { order: 4, lo_hz: 0.5, hi_hz: 130.0 };
        assert!(matches!(
            butterworth_bandpass(&[0.0; 100], 250.0, &spec),
            Err(DspError::InvalidFilter { .. })
        ));
    }

    #[test]
    fn linear_in_input() {
        let x = sine(7.0, 250.0, 600);
        let z: Vec<f64> = (0..600).map(|i| ((i * 7919) % 101) as f64 - 50.0).collect();
        let (a, b) = (2.5, -0.75);
        let mix: Vec<f64> = x.iter().zip(&z).map(|(p, q)| a * p + b * q).collect();
        let spec = FilterSpec::default();
        let fx = butterworth_bandpass(&x, 250.0, &spec).unwrap();
        let fz = butterworth_bandpass(&z, 250.0, &spec).unwrap();
        let fm = butterworth_bandpass(&mix, 250.0, &spec).unwrap();
        let scale = fm.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..600 {
            assert!((fm[i] - (a * fx[i] + b * fz[i])).abs() <= 1e-9 * scale);
        }
    }
}
