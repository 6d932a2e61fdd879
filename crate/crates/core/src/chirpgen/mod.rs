//! Chirp spectrogram synthesis, decorated rendering, and dataset output.

pub mod dataset;
pub mod mask;
pub mod render;
pub mod signal;
pub mod stft;
pub mod types;

pub use dataset::{
    load_manifest, make_dataset, sample_spec, DatasetHeader, Manifest, ManifestEntry,
    MANIFEST_NAME,
};
pub use mask::{chirp_patch_mask, PatchMask};
pub use render::{layout_rects, render};
pub use signal::synth_signal;
pub use stft::{stft, Spectrogram};
pub use types::{
    ChirpShape, ChirpSpec, DecoratedImage, GenConfig, GenRanges, LabelRecord, PlotGeometry,
    RenderConfig,
};

#[cfg(test)]
mod tests {
    use super::*;

    /// Noiseless chirp energy concentrates along the curve: outside the
    /// chirp's time-frequency band dilated by 2 bins / 2 frames, less than
    /// 5% of total spectral energy remains.
    #[test]
    fn noiseless_energy_concentrates_in_chirp_band() {
        let gen = GenConfig::default();
        let spec = ChirpSpec {
            start_time: 0.2,
            duration: 0.5,
            f_start: 600.0,
            f_end: 2800.0,
            shape: ChirpShape::Linear,
            amplitude: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        };
        let samples = synth_signal(&spec, gen.fs, gen.total_dur).unwrap();
        let grid = stft(&samples, gen.window, gen.hop).unwrap();
        let bin_hz = gen.fs / gen.window as f64;

        // Per-frame allowed bin interval: instantaneous-frequency range over
        // the frame's window (clamped to the sweep), ±2 bins; then dilated
        // ±2 frames.
        let chirp_end = spec.start_time + spec.duration;
        let mut band: Vec<Option<(i64, i64)>> = vec![None; grid.frames];
        for f in 0..grid.frames {
            let w_start = f as f64 * gen.hop as f64 / gen.fs;
            let w_end = w_start + gen.window as f64 / gen.fs;
            if w_end < spec.start_time || w_start > chirp_end {
                continue;
            }
            let tau0 = (w_start - spec.start_time).clamp(0.0, spec.duration);
            let tau1 = (w_end - spec.start_time).clamp(0.0, spec.duration);
            let fa = spec.instantaneous_freq(tau0);
            let fb = spec.instantaneous_freq(tau1);
            let lo = ((fa.min(fb) / bin_hz).floor() as i64) - 2;
            let hi = ((fa.max(fb) / bin_hz).ceil() as i64) + 2;
            band[f] = Some((lo, hi));
        }
        let dilated: Vec<Option<(i64, i64)>> = (0..grid.frames)
            .map(|f| {
                let lo = f.saturating_sub(2);
                let hi = (f + 2).min(grid.frames - 1);
                (lo..=hi).filter_map(|g| band[g]).reduce(|a, b| {
                    (a.0.min(b.0), a.1.max(b.1))
                })
            })
            .collect();

        let mut total = 0.0f64;
        let mut outside = 0.0f64;
        for f in 0..grid.frames {
            for b in 0..grid.bins {
                let e = grid.at(f, b).powi(2);
                total += e;
                let inside = matches!(dilated[f], Some((lo, hi)) if (b as i64) >= lo && (b as i64) <= hi);
                if !inside {
                    outside += e;
                }
            }
        }
        assert!(total > 0.0);
        let frac = outside / total;
        assert!(
            frac < 0.05,
            "out-of-band energy fraction {frac} exceeds 5%"
        );
    }
}
