//! Time-domain synthesis of a single chirp in white Gaussian noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::chirpgen::types::ChirpSpec;
use crate::error::{Error, Result};

/// Synthesizes `fs · total_dur` samples: a windowed chirp following the
/// spec's sweep law plus additive white Gaussian noise over the whole record.
/// The chirp contributes nothing outside `[start_time, start_time+duration)`.
pub fn synth_signal(spec: &ChirpSpec, fs: f64, total_dur: f64) -> Result<Vec<f64>> {
    spec.validate(fs, total_dur)?;
    let n = (fs * total_dur).round() as usize;
    if n == 0 {
        return Err(Error::invalid("empty signal (fs·total_dur rounds to 0)"));
    }
    let mut samples = vec![0.0f64; n];
    let t_end = spec.start_time + spec.duration;
    for (i, s) in samples.iter_mut().enumerate() {
        let t = i as f64 / fs;
        if t >= spec.start_time && t < t_end {
            let tau = t - spec.start_time;
            *s = spec.amplitude * spec.phase(tau).sin();
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
        for s in samples.iter_mut() {
            *s += normal.sample(&mut rng);
        }
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chirpgen::types::ChirpShape;

    const FS: f64 = 8192.0;

    /// Naive O(n·k) DFT magnitude at one bin — the independent oracle.
    fn naive_dft_mag(frame: &[f64], bin: usize) -> f64 {
        let n = frame.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &x) in frame.iter().enumerate() {
            let ang = -std::f64::consts::TAU * bin as f64 * i as f64 / n;
            re += x * ang.cos();
            im += x * ang.sin();
        }
        (re * re + im * im).sqrt()
    }

    fn hann(len: usize) -> Vec<f64> {
        (0..len)
            .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / len as f64).cos()))
            .collect()
    }

    #[test]
    fn pure_tone_peaks_at_expected_bin_in_every_active_frame() {
        // f0 = 1024 Hz = bin 32 exactly at window 256, fs 8192.
        let spec = ChirpSpec {
            start_time: 0.0,
            duration: 1.0,
            f_start: 1024.0,
            f_end: 1024.0,
            shape: ChirpShape::Linear,
            amplitude: 1.0,
            noise_sigma: 0.0,
            seed: 3,
        };
        let samples = synth_signal(&spec, FS, 1.0).unwrap();
        let (window, hop) = (256usize, 64usize);
        let w = hann(window);
        let frames = (samples.len() - window) / hop + 1;
        let expected_bin = (1024.0 / (FS / window as f64)).round() as usize;
        assert_eq!(expected_bin, 32);
        for f in 0..frames {
            let frame: Vec<f64> = (0..window)
                .map(|i| samples[f * hop + i] * w[i])
                .collect();
            let peak = (0..=window / 2)
                .map(|b| (b, naive_dft_mag(&frame, b)))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            assert_eq!(peak, expected_bin, "frame {f} peaked at bin {peak}");
        }
    }

    #[test]
    fn zero_amplitude_leaves_pure_noise_with_matching_std() {
        let spec = ChirpSpec {
            start_time: 0.2,
            duration: 0.3,
            f_start: 1000.0,
            f_end: 2000.0,
            shape: ChirpShape::Linear,
            amplitude: 0.0,
            noise_sigma: 0.25,
            seed: 9,
        };
        let samples = synth_signal(&spec, FS, 1.0).unwrap();
        let n = samples.len() as f64;
        let mean: f64 = samples.iter().sum::<f64>() / n;
        let var: f64 = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!(
            (std - 0.25).abs() < 0.02,
            "empirical std {std} vs sigma 0.25"
        );
    }

    #[test]
    fn linear_chirp_phase_difference_gives_linear_frequency() {
        // Instantaneous frequency from the phase finite difference must be
        // linear in t to within one STFT bin (32 Hz here).
        let spec = ChirpSpec {
            start_time: 0.0,
            duration: 1.0,
            f_start: 500.0,
            f_end: 3000.0,
            shape: ChirpShape::Linear,
            amplitude: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        };
        let bin_hz = FS / 256.0;
        let delta = 1.0 / FS;
        let mut max_dev: f64 = 0.0;
        for i in 1..100 {
            let tau = i as f64 / 100.0 * spec.duration;
            let fd = (spec.phase(tau + delta) - spec.phase(tau - delta))
                / (2.0 * delta * std::f64::consts::TAU);
            // the line the sweep law promises
            let line = spec.f_start + (spec.f_end - spec.f_start) * tau / spec.duration;
            max_dev = max_dev.max((fd - line).abs());
        }
        assert!(
            max_dev <= bin_hz,
            "max deviation {max_dev} Hz exceeds one bin ({bin_hz} Hz)"
        );
    }

    #[test]
    fn chirp_is_silent_outside_its_interval() {
        let spec = ChirpSpec {
            start_time: 0.25,
            duration: 0.25,
            f_start: 1000.0,
            f_end: 2000.0,
            shape: ChirpShape::Quadratic,
            amplitude: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        };
        let samples = synth_signal(&spec, FS, 1.0).unwrap();
        let start_idx = (0.25 * FS) as usize;
        let end_idx = (0.5 * FS) as usize;
        assert!(samples[..start_idx].iter().all(|&s| s == 0.0));
        assert!(samples[end_idx..].iter().all(|&s| s == 0.0));
        assert!(samples[start_idx..end_idx].iter().any(|&s| s != 0.0));
    }

    #[test]
    fn synthesis_is_deterministic_in_seed() {
        let spec = ChirpSpec {
            start_time: 0.1,
            duration: 0.5,
            f_start: 800.0,
            f_end: 1600.0,
            shape: ChirpShape::Exponential,
            amplitude: 0.8,
            noise_sigma: 0.2,
            seed: 1234,
        };
        let a = synth_signal(&spec, FS, 1.0).unwrap();
        let b = synth_signal(&spec, FS, 1.0).unwrap();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed = 1235;
        let c = synth_signal(&other, FS, 1.0).unwrap();
        assert_ne!(a, c);
    }
}
