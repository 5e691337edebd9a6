//! Signal-processing primitives: Butterworth sections, zero-phase filtering,
//! polyphase resampling and spectral estimates.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// One second-order section in direct form II transposed, `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn normalized(b: [f64; 3], a: [f64; 3]) -> Biquad {
        let a0 = a[0];
        Biquad { b: [b[0] / a0, b[1] / a0, b[2] / a0], a: [1.0, a[1] / a0, a[2] / a0] }
    }

    pub fn lowpass(cutoff_hz: f64, rate_hz: f64, q: f64) -> Biquad {
        let w0 = 2.0 * PI * cutoff_hz / rate_hz;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        Biquad::normalized(
            [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0],
            [1.0 + alpha, -2.0 * cos, 1.0 - alpha],
        )
    }

    pub fn highpass(cutoff_hz: f64, rate_hz: f64, q: f64) -> Biquad {
        let w0 = 2.0 * PI * cutoff_hz / rate_hz;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        Biquad::normalized(
            [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0],
            [1.0 + alpha, -2.0 * cos, 1.0 - alpha],
        )
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    /// Magnitude response at `freq_hz`.
    pub fn gain_at(&self, freq_hz: f64, rate_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / rate_hz;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b[0] + self.b[1] * z1 + self.b[2] * z2;
        let den = self.a[0] + self.a[1] * z1 + self.a[2] * z2;
        (num / den).norm()
    }

    /// Filters in place starting from the steady state for input `x0`.
    fn run(&self, x: &mut [f64], x0: f64) {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let g = self.dc_gain();
        let mut z2 = (b2 - a2 * g) * x0;
        let mut z1 = (b1 - a1 * g) * x0 + z2;
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + z1;
            z1 = b1 * xin - a1 * y + z2;
            z2 = b2 * xin - a2 * y;
            *v = y;
        }
    }
}

/// Quality factors of the biquads of an even-order Butterworth filter.
fn butterworth_qs(order: usize) -> Vec<f64> {
    (0..order / 2)
        .map(|k| {
            let theta = PI * (2 * k + 1) as f64 / (2 * order) as f64;
            1.0 / (2.0 * theta.cos())
        })
        .collect()
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    /// Band-pass built from an `order`-pole Butterworth high-pass at `lo_hz`
    /// cascaded with an `order`-pole Butterworth low-pass at `hi_hz`.
    pub fn butterworth_bandpass(order: usize, lo_hz: f64, hi_hz: f64, rate_hz: f64) -> Result<Sos> {
        if !(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < rate_hz / 2.0) || order == 0 || order % 2 != 0 {
            return Err(Error::InvalidBand { lo: lo_hz, hi: hi_hz, rate: rate_hz });
        }
        let qs = butterworth_qs(order);
        let mut sections: Vec<Biquad> = qs.iter().map(|&q| Biquad::highpass(lo_hz, rate_hz, q)).collect();
        sections.extend(qs.iter().map(|&q| Biquad::lowpass(hi_hz, rate_hz, q)));
        Ok(Sos { sections })
    }

    pub fn gain_at(&self, freq_hz: f64, rate_hz: f64) -> f64 {
        self.sections.iter().map(|s| s.gain_at(freq_hz, rate_hz)).product()
    }

    /// Single causal pass with steady-state initial conditions for `x[0]`.
    pub fn filter(&self, x: &mut [f64]) {
        let Some(&first) = x.first() else { return };
        let mut x0 = first;
        for s in &self.sections {
            s.run(x, x0);
            x0 *= s.dc_gain();
        }
    }

    /// Zero-phase forward-backward filtering with odd extension of
    /// `padlen` samples at both ends.
    pub fn filtfilt(&self, x: &[f64], padlen: usize) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = padlen.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        self.filter(&mut ext);
        ext.reverse();
        self.filter(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Best rational approximation `p/q` of `x` with `q ≤ max_den`.
pub fn rational_approx(x: f64, max_den: u64) -> Option<(u64, u64)> {
    if !(x.is_finite() && x > 0.0) {
        return None;
    }
    // continued-fraction convergents
    let (mut h0, mut h1) = (0u64, 1u64);
    let (mut k0, mut k1) = (1u64, 0u64);
    let mut r = x;
    let mut best = None;
    for _ in 0..64 {
        let a = r.floor();
        if a > u32::MAX as f64 {
            break;
        }
        let a = a as u64;
        let h2 = a.checked_mul(h1)?.checked_add(h0)?;
        let k2 = a.checked_mul(k1)?.checked_add(k0)?;
        if k2 > max_den {
            break;
        }
        best = Some((h2, k2));
        if ((h2 as f64 / k2 as f64) - x).abs() <= 1e-12 * x {
            break;
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        let frac = r - a as f64;
        if frac.abs() < 1e-15 {
            break;
        }
        r = 1.0 / frac;
    }
    best
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let y = x * x / 4.0;
    for k in 1..200 {
        term *= y / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc low-pass for a polyphase resampler with factors
/// `up`/`down`; cutoff at the Nyquist frequency of the lower rate.
fn polyphase_taps(up: usize, down: usize) -> Vec<f64> {
    let max_rate = up.max(down);
    let half_len = 10 * max_rate;
    let len = 2 * half_len + 1;
    let cutoff = 1.0 / max_rate as f64;
    let beta = 5.0;
    let i0b = bessel_i0(beta);
    let mut h: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 - half_len as f64;
            let sinc = if t == 0.0 { 1.0 } else { (PI * cutoff * t).sin() / (PI * cutoff * t) };
            let r = t / half_len as f64;
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0b;
            cutoff * sinc * w
        })
        .collect();
    // each polyphase branch gets exact unit DC gain
    for phase in 0..up {
        let s: f64 = h.iter().skip(phase).step_by(up).sum();
        if s != 0.0 {
            for v in h.iter_mut().skip(phase).step_by(up) {
                *v /= s;
            }
        }
    }
    h
}

/// Resamples by the rational factor `up/down` with an anti-aliasing
/// polyphase FIR; the signal is extended with its edge values.
pub fn resample_poly(x: &[f64], up: usize, down: usize, out_len: usize) -> Vec<f64> {
    let h = polyphase_taps(up, down);
    let half = (h.len() - 1) / 2;
    let n = x.len() as i64;
    let at = |i: i64| x[i.clamp(0, n - 1) as usize];
    (0..out_len)
        .map(|m| {
            // centre position on the upsampled grid
            let j = (m * down + half) as i64;
            let mut acc = 0.0;
            let mut k = j.rem_euclid(up as i64) as usize;
            while k < h.len() {
                acc += h[k] * at((j - k as i64).div_euclid(up as i64));
                k += up;
            }
            acc
        })
        .collect()
}

/// One-sided amplitude spectrum of a real signal; bin `k` is `k·rate/n` Hz
/// and a sinusoid of amplitude `A` on an exact bin reports `A`.
pub fn amplitude_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    (0..=n / 2)
        .map(|k| {
            let scale = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
            scale * buf[k].norm() / n as f64
        })
        .collect()
}

/// Welch power spectral density with Hann windows and 50% overlap.
/// Returns `(frequencies, psd)` with psd in units²/Hz.
pub fn welch_psd(x: &[f64], rate_hz: f64, segment: usize) -> (Vec<f64>, Vec<f64>) {
    let seg = segment.min(x.len()).max(2);
    let step = seg / 2;
    let window: Vec<f64> = (0..seg).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / seg as f64).cos()).collect();
    let wpow: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::new().plan_fft_forward(seg);
    let nbins = seg / 2 + 1;
    let mut psd = vec![0.0; nbins];
    let mut count = 0usize;
    let mut start = 0;
    let mut buf = vec![Complex64::new(0.0, 0.0); seg];
    while start + seg <= x.len() {
        let chunk = &x[start..start + seg];
        let mean = chunk.iter().sum::<f64>() / seg as f64;
        for (b, (&v, &w)) in buf.iter_mut().zip(chunk.iter().zip(&window)) {
            *b = Complex64::new((v - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..nbins {
            let scale = if k == 0 || (seg % 2 == 0 && k == seg / 2) { 1.0 } else { 2.0 };
            psd[k] += scale * buf[k].norm_sqr() / (rate_hz * wpow);
        }
        count += 1;
        start += step;
    }
    if count > 0 {
        psd.iter_mut().for_each(|p| *p /= count as f64);
    }
    let freqs = (0..nbins).map(|k| k as f64 * rate_hz / seg as f64).collect();
    (freqs, psd)
}

/// Mean PSD over `[lo, hi]` Hz.
pub fn band_power(freqs: &[f64], psd: &[f64], lo: f64, hi: f64) -> f64 {
    let sel: Vec<f64> = freqs.iter().zip(psd).filter(|(f, _)| **f >= lo && **f <= hi).map(|(_, p)| *p).collect();
    if sel.is_empty() {
        0.0
    } else {
        sel.iter().sum::<f64>() / sel.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn butterworth_section_qs() {
        let qs = butterworth_qs(4);
        assert!((qs[0] - 0.541_196_1).abs() < 1e-6);
        assert!((qs[1] - 1.306_563).abs() < 1e-6);
    }

    #[test]
    fn lowpass_is_minus_3db_at_cutoff() {
        let sos = Sos::butterworth_bandpass(4, 0.1, 45.0, 128.0).unwrap();
        let lp: f64 = sos.sections[2..].iter().map(|s| s.gain_at(45.0, 128.0)).product();
        assert!((lp - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!((sos.gain_at(10.0, 128.0) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn invalid_band_rejected() {
        assert!(Sos::butterworth_bandpass(4, 0.0, 45.0, 128.0).is_err());
        assert!(Sos::butterworth_bandpass(4, 50.0, 45.0, 128.0).is_err());
        assert!(Sos::butterworth_bandpass(4, 0.1, 64.0, 128.0).is_err());
    }

    #[test]
    fn rational_approximation() {
        assert_eq!(rational_approx(0.5, 1000), Some((1, 2)));
        assert_eq!(rational_approx(128.0 / 250.0, 1000), Some((64, 125)));
        assert_eq!(rational_approx(3.0, 1000), Some((3, 1)));
    }

    #[test]
    fn amplitude_spectrum_reports_sine_amplitude() {
        let x: Vec<f64> = (0..256).map(|i| 3.0 * (2.0 * PI * 8.0 * i as f64 / 256.0).sin()).collect();
        let a = amplitude_spectrum(&x);
        assert!((a[8] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn welch_integrates_to_variance() {
        let x: Vec<f64> = (0..4096).map(|i| (2.0 * PI * 10.0 * i as f64 / 128.0).sin()).collect();
        let (f, p) = welch_psd(&x, 128.0, 512);
        let df = f[1] - f[0];
        let total: f64 = p.iter().sum::<f64>() * df;
        assert!((total - 0.5).abs() < 0.02, "{total}");
    }
}
