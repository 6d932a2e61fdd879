//! Deterministic dataset generation: sampled chirp specs → decorated PNGs
//! plus a JSONL manifest.
//!
//! Layout under `out_dir`: one `img_{index:05}.png` per image and a
//! `manifest.jsonl` whose line 0 is the dataset header (generation config,
//! normalization ranges, pixel statistics) and lines 1..=n are per-image
//! records with manifest-relative paths.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chirpgen::render::render;
use crate::chirpgen::signal::synth_signal;
use crate::chirpgen::stft::stft;
use crate::chirpgen::types::{
    ChirpShape, ChirpSpec, GenConfig, GenRanges, LabelRecord, PlotGeometry,
};
use crate::error::{Error, Result};
use crate::raster::Canvas;
use crate::util::sub_seed;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Dataset-level record: everything needed to reproduce or consume the set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub n: usize,
    pub seed: u64,
    pub gen: GenConfig,
    /// Per-channel mean of all image pixels, in [0,1] units.
    pub pixel_mean: [f64; 3],
    /// Per-channel standard deviation of all image pixels, in [0,1] units.
    pub pixel_std: [f64; 3],
}

/// One manifest line: an image file plus its supervision and geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest file.
    pub path: String,
    pub y: [f64; 3],
    pub spec: ChirpSpec,
    pub geometry: PlotGeometry,
}

impl ManifestEntry {
    pub fn label(&self) -> LabelRecord {
        LabelRecord { y: self.y }
    }
}

/// In-memory view of a dataset on disk.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub header: DatasetHeader,
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
}

impl Manifest {
    pub fn load_image(&self, index: usize) -> Result<Canvas> {
        let entry = self.entries.get(index).ok_or_else(|| {
            Error::Manifest(format!(
                "image index {index} out of range ({} entries)",
                self.entries.len()
            ))
        })?;
        Canvas::read_png(&self.root.join(&entry.path))
    }
}

/// Samples a chirp spec uniformly from the configured ranges.
pub fn sample_spec(rng: &mut ChaCha8Rng, ranges: &GenRanges) -> ChirpSpec {
    fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            lo
        }
    }
    ChirpSpec {
        start_time: uniform(rng, ranges.start_time),
        duration: uniform(rng, ranges.duration),
        f_start: uniform(rng, ranges.f_start),
        f_end: uniform(rng, ranges.f_end),
        shape: ChirpShape::ALL[rng.gen_range(0..ChirpShape::ALL.len())],
        amplitude: uniform(rng, ranges.amplitude),
        noise_sigma: uniform(rng, ranges.noise_sigma),
        seed: rng.gen(),
    }
}

struct GeneratedImage {
    png: Vec<u8>,
    entry: ManifestEntry,
    /// Per-channel (sum, sum of squares) of pixel values in [0,1].
    stat_sum: [f64; 3],
    stat_sumsq: [f64; 3],
    pixel_count: usize,
}

fn generate_one(index: usize, seed: u64, gen: &GenConfig) -> Result<GeneratedImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, index as u64));
    let spec = sample_spec(&mut rng, &gen.ranges);
    let samples = synth_signal(&spec, gen.fs, gen.total_dur)?;
    let grid = stft(&samples, gen.window, gen.hop)?;
    let img = render(&grid, gen, &spec)?;
    img.label.validate()?;

    let mut stat_sum = [0.0f64; 3];
    let mut stat_sumsq = [0.0f64; 3];
    for px in img.pixels.data().chunks_exact(3) {
        for ch in 0..3 {
            let v = px[ch] as f64 / 255.0;
            stat_sum[ch] += v;
            stat_sumsq[ch] += v * v;
        }
    }
    let pixel_count = img.pixels.width() * img.pixels.height();

    Ok(GeneratedImage {
        png: img.pixels.encode_png()?,
        entry: ManifestEntry {
            path: format!("img_{index:05}.png"),
            y: img.label.y,
            spec: img.spec,
            geometry: img.geometry,
        },
        stat_sum,
        stat_sumsq,
        pixel_count,
    })
}

/// Generates `n` images under `out_dir` and writes the manifest. All bytes
/// are fully determined by `(n, seed, gen)`: each image derives its own
/// sub-seed from (seed, index), and results are assembled in index order
/// regardless of worker count.
pub fn make_dataset(n: usize, seed: u64, gen: &GenConfig, out_dir: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::invalid("make_dataset: n must be ≥ 1"));
    }
    std::fs::create_dir_all(out_dir)?;

    #[cfg(feature = "parallel")]
    let results: Vec<GeneratedImage> = (0..n)
        .into_par_iter()
        .map(|i| generate_one(i, seed, gen))
        .collect::<Result<Vec<_>>>()?;
    #[cfg(not(feature = "parallel"))]
    let results: Vec<GeneratedImage> = (0..n)
        .map(|i| generate_one(i, seed, gen))
        .collect::<Result<Vec<_>>>()?;

    // Index-ordered fold keeps the statistics bit-identical for any worker
    // count.
    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    let mut count = 0usize;
    for r in &results {
        for ch in 0..3 {
            sum[ch] += r.stat_sum[ch];
            sumsq[ch] += r.stat_sumsq[ch];
        }
        count += r.pixel_count;
    }
    let mut pixel_mean = [0.0f64; 3];
    let mut pixel_std = [0.0f64; 3];
    for ch in 0..3 {
        let m = sum[ch] / count as f64;
        pixel_mean[ch] = m;
        pixel_std[ch] = (sumsq[ch] / count as f64 - m * m).max(0.0).sqrt();
    }

    let header = DatasetHeader {
        n,
        seed,
        gen: gen.clone(),
        pixel_mean,
        pixel_std,
    };

    let mut manifest_text = String::new();
    manifest_text.push_str(&serde_json::to_string(&header)?);
    manifest_text.push('\n');
    let mut entries = Vec::with_capacity(n);
    for r in results {
        std::fs::write(out_dir.join(&r.entry.path), &r.png)?;
        manifest_text.push_str(&serde_json::to_string(&r.entry)?);
        manifest_text.push('\n');
        entries.push(r.entry);
    }
    std::fs::write(out_dir.join(MANIFEST_NAME), manifest_text)?;

    Ok(Manifest {
        header,
        entries,
        root: out_dir.to_path_buf(),
    })
}

/// Reads a manifest written by [`make_dataset`]. `path` may be the manifest
/// file itself or the dataset directory containing it.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&manifest_path)?;
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Manifest(format!("{}: empty manifest", manifest_path.display())))?;
    let header: DatasetHeader = serde_json::from_str(header_line)
        .map_err(|e| Error::Manifest(format!("{}: bad header: {e}", manifest_path.display())))?;
    let mut entries = Vec::with_capacity(header.n);
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
            Error::Manifest(format!(
                "{}: bad entry at line {}: {e}",
                manifest_path.display(),
                i + 2
            ))
        })?;
        entries.push(entry);
    }
    if entries.len() != header.n {
        return Err(Error::Manifest(format!(
            "{}: header says {} images, found {}",
            manifest_path.display(),
            header.n,
            entries.len()
        )));
    }
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(Manifest {
        header,
        entries,
        root,
    })
}
