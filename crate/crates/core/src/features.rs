//! Acoustic target computation: 80-band log-mel energies plus an endpoint
//! flag, 81 values per frame.

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const FRAME_DIM: usize = 81;
pub const N_MELS: usize = 80;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: usize,
    /// 25 ms analysis window.
    pub win_length: usize,
    /// 10 ms hop.
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 24_000,
            win_length: 600,
            hop_length: 240,
            n_fft: 1024,
            n_mels: N_MELS,
            fmin: 0.0,
            fmax: 12_000.0,
            log_floor: 1e-5,
        }
    }
}

impl FeatureConfig {
    pub fn log_floor_value(&self) -> f32 {
        (self.log_floor as f32).ln()
    }

    pub fn frames_for_samples(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop_length
    }
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("empty audio")]
    EmptyAudio,
    #[error("mel file `{path}`: {msg}")]
    MelFile { path: String, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Slaney-style mel scale (linear below 1 kHz, logarithmic above).
fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        f_sp * mel
    }
}

/// Triangular mel filter bank, area-normalized, shape `[n_mels, n_fft/2 + 1]`.
pub fn mel_filter_bank(cfg: &FeatureConfig) -> Array2<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let pts: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64)
        .collect();

    let mut fb = Array2::<f64>::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (pts[m], pts[m + 1], pts[m + 2]);
        let enorm = 2.0 / (hi - lo);
        for (k, &f) in bin_hz.iter().enumerate() {
            let lower = (f - lo) / (mid - lo);
            let upper = (hi - f) / (hi - mid);
            let w = lower.min(upper).max(0.0);
            fb[[m, k]] = w * enorm;
        }
    }
    fb
}

fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Hann window of `win_length` zero-padded symmetrically to `n_fft`.
pub(crate) fn effective_window(cfg: &FeatureConfig) -> Vec<f64> {
    let mut w = vec![0.0; cfg.n_fft];
    let off = (cfg.n_fft - cfg.win_length) / 2;
    for (i, v) in hann_window(cfg.win_length).into_iter().enumerate() {
        w[off + i] = v;
    }
    w
}

/// Reflect-pad by `pad` samples on both sides (zero padding for very short
/// signals where reflection is undefined).
pub(crate) fn pad_signal(samples: &[f32], pad: usize) -> Vec<f64> {
    let n = samples.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    if n > pad {
        for i in 0..pad {
            out.push(f64::from(samples[pad - i]));
        }
    } else {
        out.resize(pad, 0.0);
    }
    out.extend(samples.iter().map(|&s| f64::from(s)));
    if n > pad {
        for i in 0..pad {
            out.push(f64::from(samples[n - 2 - i]));
        }
    } else {
        out.resize(n + 2 * pad, 0.0);
    }
    out
}

/// Power spectrogram with centered framing, shape `[frames, n_fft/2 + 1]`.
pub fn power_spectrogram(samples: &[f32], cfg: &FeatureConfig) -> Result<Array2<f64>, FeatureError> {
    if samples.is_empty() {
        return Err(FeatureError::EmptyAudio);
    }
    let n_frames = cfg.frames_for_samples(samples.len());
    let n_bins = cfg.n_fft / 2 + 1;
    let padded = pad_signal(samples, cfg.n_fft / 2);

    // win_length window centered inside the n_fft frame
    let win = hann_window(cfg.win_length);
    let win_offset = (cfg.n_fft - cfg.win_length) / 2;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut out = Array2::<f64>::zeros((n_frames, n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];

    for t in 0..n_frames {
        let start = t * cfg.hop_length;
        for x in buf.iter_mut() {
            *x = Complex::new(0.0, 0.0);
        }
        for (i, &w) in win.iter().enumerate() {
            let idx = start + win_offset + i;
            if idx < padded.len() {
                buf[win_offset + i] = Complex::new(padded[idx] * w, 0.0);
            }
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            out[[t, k]] = buf[k].norm_sqr();
        }
    }
    Ok(out)
}

/// Compute the 81-dim acoustic targets: log-mel energies plus endpoint flag,
/// which is 1 on the final frame and 0 elsewhere.
pub fn compute_frames(samples: &[f32], cfg: &FeatureConfig) -> Result<Array2<f32>, FeatureError> {
    let power = power_spectrogram(samples, cfg)?;
    let fb = mel_filter_bank(cfg);
    let n_frames = power.nrows();
    let mut frames = Array2::<f32>::zeros((n_frames, FRAME_DIM));
    for t in 0..n_frames {
        for m in 0..cfg.n_mels {
            let mut e = 0.0f64;
            for k in 0..power.ncols() {
                e += fb[[m, k]] * power[[t, k]];
            }
            frames[[t, m]] = (e.max(cfg.log_floor)).ln() as f32;
        }
    }
    frames[[n_frames - 1, cfg.n_mels]] = 1.0;
    Ok(frames)
}

/// Invert log-mel energies back to a linear power spectrogram via the
/// normal-equations pseudo-inverse of the filter bank.
pub fn mel_to_power(log_mel: &Array2<f32>, cfg: &FeatureConfig) -> Array2<f64> {
    let fb = mel_filter_bank(cfg); // [M, K]
    let m = cfg.n_mels;
    let k = cfg.n_fft / 2 + 1;

    // G = fb * fb^T (M x M), solve G y = mel, power = fb^T y
    let mut gram = Array2::<f64>::zeros((m, m));
    for a in 0..m {
        for b in a..m {
            let mut s = 0.0;
            for j in 0..k {
                s += fb[[a, j]] * fb[[b, j]];
            }
            gram[[a, b]] = s;
            gram[[b, a]] = s;
        }
        gram[[a, a]] += 1e-10;
    }
    let chol = cholesky(&gram);

    let frames = log_mel.nrows();
    let mut power = Array2::<f64>::zeros((frames, k));
    for t in 0..frames {
        let mel: Array1<f64> =
            (0..m).map(|i| f64::from(log_mel[[t, i]]).exp()).collect();
        let y = chol_solve(&chol, &mel);
        for j in 0..k {
            let mut s = 0.0;
            for a in 0..m {
                s += fb[[a, j]] * y[a];
            }
            power[[t, j]] = s.max(0.0);
        }
    }
    power
}

fn cholesky(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                l[[i, j]] = s.max(1e-12).sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    l
}

fn chol_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Binary frame matrix: `u32` frame count, `u32` dim, then row-major `f32` LE.
pub fn write_frames_bin(path: &Path, frames: &Array2<f32>) -> Result<(), FeatureError> {
    let mut out = Vec::with_capacity(8 + frames.len() * 4);
    out.extend_from_slice(&(frames.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.ncols() as u32).to_le_bytes());
    for &v in frames.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_frames_bin(path: &Path) -> Result<Array2<f32>, FeatureError> {
    let err = |msg: &str| FeatureError::MelFile {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(err("truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + rows * cols * 4 {
        return Err(err("payload length mismatch"));
    }
    let data: Vec<f32> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|_| err("bad shape"))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive O(n^2) DFT magnitude-squared of one centered frame; independent
    /// of the fft-based pipeline.
    fn naive_frame_power(samples: &[f32], cfg: &FeatureConfig, frame: usize) -> Vec<f64> {
        let padded = pad_signal(samples, cfg.n_fft / 2);
        let win = hann_window(cfg.win_length);
        let off = (cfg.n_fft - cfg.win_length) / 2;
        let mut x = vec![0.0f64; cfg.n_fft];
        for (i, &w) in win.iter().enumerate() {
            let idx = frame * cfg.hop_length + off + i;
            if idx < padded.len() {
                x[off + i] = padded[idx] * w;
            }
        }
        (0..cfg.n_fft / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for (n, &v) in x.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * k as f64 * n as f64
                        / cfg.n_fft as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn one_second_yields_101_frames_of_dim_81() {
        let cfg = FeatureConfig::default();
        let samples: Vec<f32> = (0..24_000)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 24_000.0).sin() as f32)
            .collect();
        let frames = compute_frames(&samples, &cfg).unwrap();
        assert_eq!(frames.nrows(), 101);
        assert_eq!(frames.ncols(), 81);
    }

    #[test]
    fn fft_matches_naive_dft() {
        let cfg = FeatureConfig::default();
        let samples: Vec<f32> = (0..4800)
            .map(|i| {
                let t = i as f64 / 24_000.0;
                ((2.0 * std::f64::consts::PI * 700.0 * t).sin() * 0.4
                    + (2.0 * std::f64::consts::PI * 2500.0 * t).sin() * 0.2) as f32
            })
            .collect();
        let power = power_spectrogram(&samples, &cfg).unwrap();
        for frame in [0usize, 5, 10] {
            let oracle = naive_frame_power(&samples, &cfg, frame);
            for k in 0..oracle.len() {
                let diff = (power[[frame, k]] - oracle[k]).abs();
                assert!(
                    diff <= 1e-8 + 1e-6 * oracle[k].abs(),
                    "frame {frame} bin {k}: {} vs {}",
                    power[[frame, k]],
                    oracle[k]
                );
            }
        }
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let cfg = FeatureConfig::default();
        let frames = compute_frames(&vec![0.0f32; 12_000], &cfg).unwrap();
        let floor = cfg.log_floor_value();
        for t in 0..frames.nrows() {
            for m in 0..cfg.n_mels {
                assert_eq!(frames[[t, m]], floor);
            }
        }
    }

    #[test]
    fn endpoint_is_one_only_on_final_frame() {
        let cfg = FeatureConfig::default();
        let samples: Vec<f32> = (0..9_999).map(|i| ((i % 100) as f32 / 100.0) - 0.5).collect();
        let frames = compute_frames(&samples, &cfg).unwrap();
        let last = frames.nrows() - 1;
        for t in 0..frames.nrows() {
            let want = if t == last { 1.0 } else { 0.0 };
            assert_eq!(frames[[t, 80]], want);
        }
    }

    #[test]
    fn empty_audio_is_an_error() {
        assert!(matches!(
            compute_frames(&[], &FeatureConfig::default()),
            Err(FeatureError::EmptyAudio)
        ));
    }

    #[test]
    fn filter_bank_rows_are_nonnegative_and_peaked() {
        let fb = mel_filter_bank(&FeatureConfig::default());
        for m in 0..fb.nrows() {
            let row = fb.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().any(|&w| w > 0.0), "filter {m} is empty");
        }
    }

    #[test]
    fn mel_pseudo_inverse_roughly_reconstructs_band_energy() {
        let cfg = FeatureConfig::default();
        let samples: Vec<f32> = (0..24_000)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 24_000.0).sin() as f32)
            .collect();
        let frames = compute_frames(&samples, &cfg).unwrap();
        let mel_only = frames.slice(ndarray::s![.., ..80]).to_owned();
        let power = mel_to_power(&mel_only, &cfg);
        // peak bin should sit near 1 kHz = bin 1000/(24000/1024) ~ 42-43
        let mid = power.nrows() / 2;
        let peak = (0..power.ncols())
            .max_by(|&a, &b| power[[mid, a]].partial_cmp(&power[[mid, b]]).unwrap())
            .unwrap();
        let hz = peak as f64 * 24_000.0 / 1024.0;
        assert!((hz - 1000.0).abs() < 120.0, "peak at {hz} Hz");
    }

    #[test]
    fn frames_bin_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mel");
        let a = Array2::from_shape_fn((7, 81), |(i, j)| (i * 81 + j) as f32 * 0.5 - 3.0);
        write_frames_bin(&path, &a).unwrap();
        let b = read_frames_bin(&path).unwrap();
        assert_eq!(a, b);
    }
}
