//! Hann-windowed short-time Fourier transform producing magnitude grids.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Magnitude spectrogram: `frames` time steps × `bins` frequency bins,
/// row-major by frame, bin 0 = DC.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl Spectrogram {
    pub fn at(&self, frame: usize, bin: usize) -> f64 {
        self.data[frame * self.bins + bin]
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }
}

/// Periodic Hann window of length `len`.
pub(crate) fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / len as f64).cos()))
        .collect()
}

/// Hann-windowed magnitude STFT with `bins = window_len/2 + 1` and
/// `frames = ⌊(n − window_len)/hop⌋ + 1`.
pub fn stft(samples: &[f64], window_len: usize, hop: usize) -> Result<Spectrogram> {
    if window_len == 0 || hop == 0 {
        return Err(Error::invalid("stft: window_len and hop must be ≥ 1"));
    }
    if samples.len() < window_len {
        return Err(Error::invalid(format!(
            "stft: {} samples < window {window_len}",
            samples.len()
        )));
    }
    let frames = (samples.len() - window_len) / hop + 1;
    let bins = window_len / 2 + 1;
    let window = hann_window(window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_len);
    let mut data = vec![0.0f64; frames * bins];
    let mut buf = vec![Complex::new(0.0, 0.0); window_len];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for f in 0..frames {
        for i in 0..window_len {
            buf[i] = Complex::new(samples[f * hop + i] * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for b in 0..bins {
            data[f * bins + b] = buf[b].norm();
        }
    }
    Ok(Spectrogram { frames, bins, data })
}
