//! Analysis/synthesis transforms, SNR-controlled mixing, and the segmental
//! SNR metric.
//!
//! The forward transform pads the signal with `K` zeros at both ends (plus a
//! tail fill to a whole frame count), applies a periodic Hann window, and
//! keeps the onesided spectrum of a real-input DFT. The inverse overlap-adds
//! windowed inverse frames and divides by the accumulated squared-window
//! envelope, so `istft(stft(x))` reproduces `x` after the head pad is
//! trimmed. Internals run in `f64`.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FFT_SIZE: usize = 512;
pub const HOP: usize = 256;

/// Mono 16 kHz sample sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean-square power.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }
}

/// Onesided complex spectrogram stored as interleaved `[T][F][2]` (real,
/// imaginary) values; `bins == K/2 + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub ri: Vec<f64>,
}

impl ComplexSpectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        ComplexSpectrogram {
            frames,
            bins,
            ri: vec![0.0; frames * bins * 2],
        }
    }

    #[inline]
    pub fn re(&self, t: usize, f: usize) -> f64 {
        self.ri[(t * self.bins + f) * 2]
    }

    #[inline]
    pub fn im(&self, t: usize, f: usize) -> f64 {
        self.ri[(t * self.bins + f) * 2 + 1]
    }

    pub fn scale(&self, c: f64) -> Self {
        ComplexSpectrogram {
            frames: self.frames,
            bins: self.bins,
            ri: self.ri.iter().map(|v| v * c).collect(),
        }
    }
}

/// Periodic Hann window `w[n] = 0.5 (1 - cos(2 pi n / K))`.
pub fn hann_window(k: usize) -> Vec<f64> {
    assert!(k >= 2, "hann_window: length must be >= 2, got {k}");
    (0..k)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / k as f64).cos()))
        .collect()
}

fn forward_fft(k: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(k)
}

fn inverse_fft(k: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_inverse(k)
}

/// Number of frames produced by [`stft`] for an input of `len` samples.
pub fn frame_count(len: usize, k: usize, hop: usize) -> usize {
    let padded = len + 2 * k;
    let body = padded - k;
    let body = body.div_ceil(hop) * hop;
    body / hop + 1
}

/// Hann-windowed short-time Fourier transform keeping bins `0..=K/2`.
pub fn stft(x: &Waveform, k: usize, hop: usize) -> Result<ComplexSpectrogram> {
    if x.is_empty() {
        return Err(Error::Dsp("stft: empty input".into()));
    }
    assert!(k >= 2 && hop >= 1 && hop <= k, "stft: invalid framing K={k}, hop={hop}");
    let frames = frame_count(x.len(), k, hop);
    let total = (frames - 1) * hop + k;
    let mut padded = vec![0.0f64; total];
    padded[k..k + x.len()].copy_from_slice(&x.samples);

    let window = hann_window(k);
    let bins = k / 2 + 1;
    let fft = forward_fft(k);
    let mut spec = ComplexSpectrogram::zeros(frames, bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); k];
    for t in 0..frames {
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex64::new(padded[t * hop + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..bins {
            spec.ri[(t * bins + f) * 2] = buf[f].re;
            spec.ri[(t * bins + f) * 2 + 1] = buf[f].im;
        }
    }
    Ok(spec)
}

/// Windowed overlap-add inverse of [`stft`], normalized by the accumulated
/// squared-window envelope and trimmed back to `out_len` samples.
///
/// Imaginary parts of the DC and Nyquist bins are ignored, matching the
/// symmetry of a real-input transform.
pub fn istft(spec: &ComplexSpectrogram, k: usize, hop: usize, out_len: usize) -> Result<Waveform> {
    assert!(k >= 2 && hop >= 1 && hop <= k, "istft: invalid framing K={k}, hop={hop}");
    let bins = k / 2 + 1;
    assert_eq!(spec.bins, bins, "istft: spectrogram has {} bins, expected {bins}", spec.bins);
    let total = (spec.frames - 1) * hop + k;
    if k + out_len > total {
        return Err(Error::Dsp(format!(
            "istft: out_len {out_len} exceeds synthesizable length {}",
            total - k
        )));
    }
    let window = hann_window(k);
    let fft = inverse_fft(k);
    let mut acc = vec![0.0f64; total];
    let mut env = vec![0.0f64; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); k];
    let scale = 1.0 / k as f64;
    for t in 0..spec.frames {
        buf[0] = Complex64::new(spec.re(t, 0), 0.0);
        buf[k / 2] = Complex64::new(spec.re(t, k / 2), 0.0);
        for f in 1..k / 2 {
            let c = Complex64::new(spec.re(t, f), spec.im(t, f));
            buf[f] = c;
            buf[k - f] = c.conj();
        }
        fft.process(&mut buf);
        for i in 0..k {
            let sample = buf[i].re * scale;
            acc[t * hop + i] += sample * window[i];
            env[t * hop + i] += window[i] * window[i];
        }
    }
    let mut out = vec![0.0f64; out_len];
    for (i, o) in out.iter_mut().enumerate() {
        let e = env[k + i];
        if e > 1e-12 {
            *o = acc[k + i] / e;
        }
    }
    Ok(Waveform::new(out))
}

/// Scales `noise` so that `10 log10(P_clean / P_noise) == snr_db` over the
/// clean signal's support, tiling the noise cyclically when it is shorter.
/// Returns `(clean + scaled_noise, scaled_noise)`.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, Waveform)> {
    if noise.is_empty() {
        return Err(Error::Dsp("mix_at_snr: empty noise input".into()));
    }
    let len = clean.len();
    let tiled: Vec<f64> = (0..len).map(|i| noise.samples[i % noise.len()]).collect();
    let p_clean = clean.power();
    if p_clean == 0.0 {
        return Err(Error::Dsp("mix_at_snr: clean input is silent (zero power)".into()));
    }
    let p_noise = tiled.iter().map(|s| s * s).sum::<f64>() / len as f64;
    if p_noise == 0.0 {
        return Err(Error::Dsp("mix_at_snr: noise segment is silent (zero power)".into()));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = tiled.iter().map(|s| s * gain).collect();
    let noisy: Vec<f64> = clean
        .samples
        .iter()
        .zip(&scaled)
        .map(|(&c, &n)| c + n)
        .collect();
    Ok((Waveform::new(noisy), Waveform::new(scaled)))
}

/// Measured SNR in dB between a clean signal and a noise realization.
pub fn measured_snr_db(clean: &Waveform, noise: &Waveform) -> f64 {
    10.0 * (clean.power() / noise.power()).log10()
}

pub const SSNR_FRAME: usize = 512;
pub const SSNR_HOP: usize = 256;
pub const SSNR_FLOOR_DB: f64 = -10.0;
pub const SSNR_CEIL_DB: f64 = 35.0;

/// Segmental SNR: per-frame `10 log10(sum ref^2 / sum (ref-est)^2)` clamped
/// to `[floor_db, ceil_db]`, averaged over frames with nonzero reference
/// energy. Both signals are trimmed to the shorter length.
pub fn ssnr(
    reference: &Waveform,
    estimate: &Waveform,
    frame: usize,
    hop: usize,
    floor_db: f64,
    ceil_db: f64,
) -> Result<f64> {
    let len = reference.len().min(estimate.len());
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut t = 0usize;
    while t + frame <= len {
        let r = &reference.samples[t..t + frame];
        let e = &estimate.samples[t..t + frame];
        let ref_energy: f64 = r.iter().map(|v| v * v).sum();
        if ref_energy > 0.0 {
            let err_energy: f64 = r.iter().zip(e).map(|(&a, &b)| (a - b) * (a - b)).sum();
            let snr = if err_energy == 0.0 {
                ceil_db
            } else {
                (10.0 * (ref_energy / err_energy).log10()).clamp(floor_db, ceil_db)
            };
            total += snr;
            counted += 1;
        }
        t += hop;
    }
    if counted == 0 {
        return Err(Error::Dsp("ssnr: no frames with reference energy".into()));
    }
    Ok(total / counted as f64)
}

/// Segmental SNR at the default 512/256 framing and [-10, 35] dB clamp.
pub fn ssnr_default(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    ssnr(
        reference,
        estimate,
        SSNR_FRAME,
        SSNR_HOP,
        SSNR_FLOOR_DB,
        SSNR_CEIL_DB,
    )
}
