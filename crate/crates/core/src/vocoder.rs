//! Developer-listening waveform reconstruction.
//!
//! Inverts the mel filter bank by least squares and recovers phase with
//! iterative STFT resynthesis (Griffin-Lim). Quality is deliberately modest;
//! this exists so synthesized mels can be auditioned without a neural
//! vocoder.

use crate::features::{effective_window, mel_to_power, pad_signal, FeatureConfig};
use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub const DEFAULT_GRIFFIN_LIM_ITERS: usize = 64;

fn complex_stft(samples: &[f32], cfg: &FeatureConfig) -> Array2<Complex<f64>> {
    let n_frames = cfg.frames_for_samples(samples.len());
    let n_bins = cfg.n_fft / 2 + 1;
    let padded = pad_signal(samples, cfg.n_fft / 2);
    let win = effective_window(cfg);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut out = Array2::<Complex<f64>>::zeros((n_frames, n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    for t in 0..n_frames {
        let start = t * cfg.hop_length;
        for (i, w) in win.iter().enumerate() {
            let v = padded.get(start + i).copied().unwrap_or(0.0);
            buf[i] = Complex::new(v * w, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            out[[t, k]] = buf[k];
        }
    }
    out
}

/// Window-weighted overlap-add inverse of a one-sided STFT.
fn istft(spec: &Array2<Complex<f64>>, cfg: &FeatureConfig, n_samples: usize) -> Vec<f32> {
    let n_frames = spec.nrows();
    let n_fft = cfg.n_fft;
    let win = effective_window(cfg);
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n_fft);

    let padded_len = (n_frames - 1) * cfg.hop_length + n_fft;
    let mut acc = vec![0.0f64; padded_len];
    let mut wsum = vec![0.0f64; padded_len];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..n_frames {
        // rebuild the full spectrum from the one-sided half
        for k in 0..=n_fft / 2 {
            buf[k] = spec[[t, k]];
        }
        for k in n_fft / 2 + 1..n_fft {
            buf[k] = spec[[t, n_fft - k]].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop_length;
        for i in 0..n_fft {
            let y = buf[i].re / n_fft as f64;
            acc[start + i] += y * win[i];
            wsum[start + i] += win[i] * win[i];
        }
    }
    let pad = n_fft / 2;
    (0..n_samples)
        .map(|i| {
            let j = i + pad;
            let w = wsum[j];
            if w > 1e-9 {
                (acc[j] / w) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// Recover a time signal whose STFT magnitude approximates `magnitude`.
pub fn griffin_lim(
    magnitude: &Array2<f64>,
    cfg: &FeatureConfig,
    iterations: usize,
) -> Vec<f32> {
    let n_frames = magnitude.nrows();
    let n_samples = (n_frames.saturating_sub(1)) * cfg.hop_length;
    if n_samples == 0 {
        return Vec::new();
    }
    // zero-phase start
    let mut spec = magnitude.mapv(|m| Complex::new(m, 0.0));
    let mut signal = istft(&spec, cfg, n_samples);
    for _ in 0..iterations {
        let est = complex_stft(&signal, cfg);
        for t in 0..n_frames.min(est.nrows()) {
            for k in 0..spec.ncols() {
                let phase = est[[t, k]];
                let norm = phase.norm();
                let unit = if norm > 1e-12 {
                    phase / norm
                } else {
                    Complex::new(1.0, 0.0)
                };
                spec[[t, k]] = unit * magnitude[[t, k]];
            }
        }
        signal = istft(&spec, cfg, n_samples);
    }
    signal
}

/// Log-mel frames (`[T, 80]`) to 24 kHz samples.
pub fn mel_to_waveform(
    log_mel: &Array2<f32>,
    cfg: &FeatureConfig,
    iterations: usize,
) -> Vec<f32> {
    let power = mel_to_power(log_mel, cfg);
    let magnitude = power.mapv(f64::sqrt);
    griffin_lim(&magnitude, cfg, iterations)
}
