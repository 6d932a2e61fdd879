//! Domain types for chirp synthesis, rendering, and dataset generation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Canvas, Rect};

/// Frequency-sweep law of a chirp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChirpShape {
    Linear,
    Quadratic,
    Exponential,
}

impl ChirpShape {
    pub const ALL: [ChirpShape; 3] = [
        ChirpShape::Linear,
        ChirpShape::Quadratic,
        ChirpShape::Exponential,
    ];
}

/// Full description of one synthetic chirp embedded in a noise floor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChirpSpec {
    /// Chirp onset, seconds from signal start.
    pub start_time: f64,
    /// Active sweep length, seconds.
    pub duration: f64,
    /// Instantaneous frequency at onset, Hz.
    pub f_start: f64,
    /// Instantaneous frequency at the end of the sweep, Hz.
    pub f_end: f64,
    pub shape: ChirpShape,
    pub amplitude: f64,
    /// Standard deviation of the additive white Gaussian noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ChirpSpec {
    /// Validates the spec against signal parameters (sample rate, length).
    pub fn validate(&self, fs: f64, total_dur: f64) -> Result<()> {
        let nyquist = fs / 2.0;
        if self.start_time < 0.0 || self.start_time + self.duration > total_dur + 1e-12 {
            return Err(Error::invalid(format!(
                "chirp interval [{}, {}] outside signal [0, {total_dur}]",
                self.start_time,
                self.start_time + self.duration
            )));
        }
        for (name, f) in [("f_start", self.f_start), ("f_end", self.f_end)] {
            if f <= 0.0 || f >= nyquist {
                return Err(Error::invalid(format!(
                    "{name} = {f} Hz outside (0, Nyquist = {nyquist})"
                )));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid(format!(
                "noise_sigma = {} is negative",
                self.noise_sigma
            )));
        }
        if self.duration < 0.0 {
            return Err(Error::invalid(format!(
                "duration = {} is negative",
                self.duration
            )));
        }
        Ok(())
    }

    /// Instantaneous frequency at `tau` seconds into the sweep (clamped to
    /// the sweep interval).
    pub fn instantaneous_freq(&self, tau: f64) -> f64 {
        let d = self.duration;
        if d <= 0.0 {
            return self.f_start;
        }
        let u = (tau / d).clamp(0.0, 1.0);
        let (f0, f1) = (self.f_start, self.f_end);
        match self.shape {
            ChirpShape::Linear => f0 + (f1 - f0) * u,
            ChirpShape::Quadratic => f0 + (f1 - f0) * u * u,
            ChirpShape::Exponential => {
                let k = f1 / f0;
                if (k - 1.0).abs() < 1e-9 {
                    f0
                } else {
                    f0 * k.powf(u)
                }
            }
        }
    }

    /// Accumulated phase at `tau` seconds into the sweep: the integral of
    /// 2π·f over [0, tau], in closed form per shape law.
    pub fn phase(&self, tau: f64) -> f64 {
        let d = self.duration;
        let (f0, f1) = (self.f_start, self.f_end);
        let two_pi = std::f64::consts::TAU;
        match self.shape {
            ChirpShape::Linear => two_pi * (f0 * tau + (f1 - f0) * tau * tau / (2.0 * d)),
            ChirpShape::Quadratic => two_pi * (f0 * tau + (f1 - f0) * tau.powi(3) / (3.0 * d * d)),
            ChirpShape::Exponential => {
                let k = f1 / f0;
                let ln_k = k.ln();
                if ln_k.abs() < 1e-9 {
                    two_pi * f0 * tau
                } else {
                    two_pi * f0 * d / ln_k * (k.powf(tau / d) - 1.0)
                }
            }
        }
    }
}

/// Normalized regression target: (start_time, f_start, f_end), each min-max
/// scaled into [0,1] by the generator's configured ranges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub y: [f64; 3],
}

impl LabelRecord {
    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.y.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::invalid(format!(
                    "label component {i} = {v} outside [0,1]"
                )));
            }
        }
        Ok(())
    }
}

/// Pixel layout of a decorated plot: where the data lives, where each
/// distractor band lives, and the affine data-coordinate extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotGeometry {
    pub canvas_w: usize,
    pub canvas_h: usize,
    pub data_rect: Rect,
    pub title_rect: Rect,
    pub xlabel_rect: Rect,
    pub ylabel_rect: Rect,
    pub colorbar_rect: Rect,
    pub colorbar_label_rect: Rect,
    /// Seconds at the left and right edges of `data_rect`.
    pub time_extent: (f64, f64),
    /// Hz at the bottom and top edges of `data_rect`.
    pub freq_extent: (f64, f64),
}

impl PlotGeometry {
    pub fn rects(&self) -> [(&'static str, &Rect); 6] {
        [
            ("data", &self.data_rect),
            ("title", &self.title_rect),
            ("xlabel", &self.xlabel_rect),
            ("ylabel", &self.ylabel_rect),
            ("colorbar", &self.colorbar_rect),
            ("colorbar_label", &self.colorbar_label_rect),
        ]
    }

    /// Checks pairwise disjointness of all non-empty rectangles.
    pub fn validate(&self) -> Result<()> {
        let rects = self.rects();
        for i in 0..rects.len() {
            for j in i + 1..rects.len() {
                if rects[i].1.intersects(rects[j].1) {
                    return Err(Error::invalid(format!(
                        "geometry rectangles {} and {} overlap",
                        rects[i].0, rects[j].0
                    )));
                }
            }
        }
        Ok(())
    }

    /// Maps a time in seconds to a fractional x pixel (centers at integers).
    pub fn time_to_x(&self, t: f64) -> f64 {
        let (t0, t1) = self.time_extent;
        let u = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
        self.data_rect.x as f64 + u * (self.data_rect.w.saturating_sub(1)) as f64
    }

    /// Maps a frequency in Hz to a fractional y pixel (top = high frequency).
    pub fn freq_to_y(&self, f: f64) -> f64 {
        let (f0, f1) = self.freq_extent;
        let u = if f1 > f0 { (f - f0) / (f1 - f0) } else { 0.0 };
        (self.data_rect.bottom() - 1) as f64 - u * (self.data_rect.h.saturating_sub(1)) as f64
    }
}

/// A rendered, decorated spectrogram plus everything needed to supervise and
/// interrogate a model on it.
#[derive(Clone, Debug)]
pub struct DecoratedImage {
    pub pixels: Canvas,
    pub geometry: PlotGeometry,
    pub label: LabelRecord,
    pub spec: ChirpSpec,
}

/// Inclusive sampling ranges for dataset generation; also the min-max
/// normalization constants for [`LabelRecord`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenRanges {
    pub start_time: (f64, f64),
    pub duration: (f64, f64),
    pub f_start: (f64, f64),
    pub f_end: (f64, f64),
    pub amplitude: (f64, f64),
    pub noise_sigma: (f64, f64),
}

impl Default for GenRanges {
    fn default() -> Self {
        // Chosen so start_time + duration ≤ 0.95 s always fits the 1 s
        // signal, and both frequencies sit well inside (0, Nyquist) at
        // fs = 8192.
        GenRanges {
            start_time: (0.05, 0.45),
            duration: (0.2, 0.5),
            f_start: (400.0, 3600.0),
            f_end: (400.0, 3600.0),
            amplitude: (0.5, 1.0),
            noise_sigma: (0.0, 0.3),
        }
    }
}

impl GenRanges {
    /// Min-max normalization of the three supervised fields.
    pub fn normalize(&self, spec: &ChirpSpec) -> LabelRecord {
        LabelRecord {
            y: [
                norm(spec.start_time, self.start_time),
                norm(spec.f_start, self.f_start),
                norm(spec.f_end, self.f_end),
            ],
        }
    }

    /// Inverse of [`GenRanges::normalize`] for the supervised fields.
    pub fn denormalize(&self, label: &LabelRecord) -> (f64, f64, f64) {
        (
            denorm(label.y[0], self.start_time),
            denorm(label.y[1], self.f_start),
            denorm(label.y[2], self.f_end),
        )
    }
}

fn norm(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

fn denorm(u: f64, (lo, hi): (f64, f64)) -> f64 {
    lo + u * (hi - lo)
}

/// Layout and color mapping knobs for [`crate::chirpgen::render`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Square canvas edge, pixels.
    pub canvas: usize,
    /// Draw distractor decorations (title, labels, colorbar). When off the
    /// data fills the whole canvas and every distractor rect is empty.
    pub decor: bool,
    /// Top title band height as a fraction of the canvas.
    pub title_frac: f64,
    /// Left y-label band width as a fraction of the canvas.
    pub left_frac: f64,
    /// Bottom x-label band height as a fraction of the canvas.
    pub bottom_frac: f64,
    /// Right colorbar band width as a fraction of the canvas.
    pub right_frac: f64,
    /// Dynamic range of the log-magnitude mapping, dB.
    pub dynamic_range_db: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            canvas: 256,
            decor: true,
            title_frac: 0.10,
            left_frac: 0.12,
            bottom_frac: 0.12,
            right_frac: 0.10,
            dynamic_range_db: 80.0,
        }
    }
}

/// Everything that determines dataset bytes besides (n, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Sample rate, Hz.
    pub fs: f64,
    /// Signal length, seconds.
    pub total_dur: f64,
    /// STFT window length, samples (Hann).
    pub window: usize,
    /// STFT hop, samples.
    pub hop: usize,
    /// Chirp-curve dilation half-width for patch masks, canvas pixels.
    pub mask_half_width_px: f64,
    pub render: RenderConfig,
    pub ranges: GenRanges,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            fs: 8192.0,
            total_dur: 1.0,
            window: 256,
            hop: 64,
            mask_half_width_px: 2.0,
            render: RenderConfig::default(),
            ranges: GenRanges::default(),
        }
    }
}
