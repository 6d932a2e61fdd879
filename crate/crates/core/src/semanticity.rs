//! Head-semanticity scoring: how much of each head's attention lands on the
//! chirp versus each plot distractor, and the resulting taxonomy —
//! monosemantic-task, monosemantic-distractor(region), or polysemantic.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chirpgen::{chirp_patch_mask, ChirpSpec, Manifest, PlotGeometry};
use crate::error::{Error, Result};
use crate::interp_attention::{extract_maps, normalize_map, overlay, Aggregation};
use crate::numerics::Tensor;
use crate::raster::viridis;
use crate::vit::{
    forward_image, patches_from_image, preprocess, AblationMask, Checkpoint,
};

/// One of the disjoint patch-grid regions an image decomposes into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Chirp,
    Title,
    Xlabel,
    Ylabel,
    Colorbar,
    ColorbarLabel,
    TopEdge,
    BottomEdge,
    LeftEdge,
    RightEdge,
    TopLeftCorner,
    TopRightCorner,
    BottomLeftCorner,
    BottomRightCorner,
    Background,
}

pub const ALL_REGIONS: [Region; 15] = [
    Region::Chirp,
    Region::Title,
    Region::Xlabel,
    Region::Ylabel,
    Region::Colorbar,
    Region::ColorbarLabel,
    Region::TopEdge,
    Region::BottomEdge,
    Region::LeftEdge,
    Region::RightEdge,
    Region::TopLeftCorner,
    Region::TopRightCorner,
    Region::BottomLeftCorner,
    Region::BottomRightCorner,
    Region::Background,
];

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Chirp => "chirp",
            Region::Title => "title",
            Region::Xlabel => "xlabel",
            Region::Ylabel => "ylabel",
            Region::Colorbar => "colorbar",
            Region::ColorbarLabel => "colorbar_label",
            Region::TopEdge => "top_edge",
            Region::BottomEdge => "bottom_edge",
            Region::LeftEdge => "left_edge",
            Region::RightEdge => "right_edge",
            Region::TopLeftCorner => "top_left_corner",
            Region::TopRightCorner => "top_right_corner",
            Region::BottomLeftCorner => "bottom_left_corner",
            Region::BottomRightCorner => "bottom_right_corner",
            Region::Background => "background",
        }
    }
}

/// Disjoint partition of the P×P patch grid into [`Region`]s: every patch
/// belongs to exactly one region, so concentrations over the full set sum
/// to 1 for any positive map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMaskSet {
    p: usize,
    assignment: Vec<Region>,
}

impl RegionMaskSet {
    pub fn grid_p(&self) -> usize {
        self.p
    }

    pub fn region_of(&self, row: usize, col: usize) -> Region {
        self.assignment[row * self.p + col]
    }

    /// Boolean mask (row-major, length P²) for one region.
    pub fn mask(&self, r: Region) -> Vec<bool> {
        self.assignment.iter().map(|&a| a == r).collect()
    }

    pub fn count(&self, r: Region) -> usize {
        self.assignment.iter().filter(|&&a| a == r).count()
    }
}

/// Pixel range `[lo, hi)` of patch index `c` along an axis of `extent`
/// pixels — the exact preimage of the pixel→patch map `px·p/extent`.
fn patch_span(c: usize, p: usize, extent: usize) -> (usize, usize) {
    let lo = (c * extent).div_ceil(p);
    let hi = ((c + 1) * extent).div_ceil(p);
    (lo, hi.min(extent))
}

/// Builds the disjoint region partition for one image.
///
/// Assignment rules, in order:
/// 1. Patches crossed by the chirp curve (via [`chirp_patch_mask`]) are
///    `Chirp`, unconditionally.
/// 2. Every other patch goes to the plot rectangle with the largest pixel
///    overlap, decor bands winning ties over the data area; patches
///    overlapping no rectangle at all are `Background`.
/// 3. Data-area patches are refined on the data patch-block's bounding box:
///    the 2×2 blocks at its corners, then the one-patch border ring split
///    into top/bottom/left/right edges, then `Background` for the interior.
pub fn region_masks(
    geometry: &PlotGeometry,
    spec: &ChirpSpec,
    grid_p: usize,
    half_width_px: f64,
) -> RegionMaskSet {
    let p = grid_p;
    let (cw, ch) = (geometry.canvas_w, geometry.canvas_h);
    let chirp = chirp_patch_mask(spec, geometry, p, half_width_px);

    // Decor bands first so they win ties against the (much larger) data rect.
    let candidates: [(Option<Region>, &crate::raster::Rect); 6] = [
        (Some(Region::Title), &geometry.title_rect),
        (Some(Region::Xlabel), &geometry.xlabel_rect),
        (Some(Region::Ylabel), &geometry.ylabel_rect),
        (Some(Region::Colorbar), &geometry.colorbar_rect),
        (Some(Region::ColorbarLabel), &geometry.colorbar_label_rect),
        (None, &geometry.data_rect), // None = data area, refined below
    ];

    // Base pass: argmax pixel overlap per patch.
    let mut base: Vec<Option<Region>> = vec![Some(Region::Background); p * p];
    let mut is_data = vec![false; p * p];
    for row in 0..p {
        let (y0, y1) = patch_span(row, p, ch);
        for col in 0..p {
            let (x0, x1) = patch_span(col, p, cw);
            if x1 <= x0 || y1 <= y0 {
                continue;
            }
            let cell = crate::raster::Rect::new(x0, y0, x1 - x0, y1 - y0);
            let mut best: Option<(usize, Option<Region>)> = None;
            for (region, rect) in &candidates {
                let a = cell.overlap_area(rect);
                if a > 0 && best.map_or(true, |(b, _)| a > b) {
                    best = Some((a, *region));
                }
            }
            if let Some((_, r)) = best {
                base[row * p + col] = r;
                is_data[row * p + col] = r.is_none();
            }
        }
    }

    // Bounding box of the data patch-block.
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for row in 0..p {
        for col in 0..p {
            if is_data[row * p + col] {
                bounds = Some(match bounds {
                    None => (row, row, col, col),
                    Some((r0, r1, c0, c1)) => {
                        (r0.min(row), r1.max(row), c0.min(col), c1.max(col))
                    }
                });
            }
        }
    }

    let mut assignment = vec![Region::Background; p * p];
    for row in 0..p {
        for col in 0..p {
            let i = row * p + col;
            assignment[i] = if chirp.get(row, col) {
                Region::Chirp
            } else {
                match base[i] {
                    Some(r) => r,
                    None => refine_data_patch(row, col, bounds.expect("data patch seen")),
                }
            };
        }
    }
    RegionMaskSet { p, assignment }
}

/// Classifies a data-area patch against the data block's bounding box
/// (r0..=r1, c0..=c1): 2×2 corner blocks, then border-ring edges, then
/// interior background.
fn refine_data_patch(row: usize, col: usize, b: (usize, usize, usize, usize)) -> Region {
    let (r0, r1, c0, c1) = b;
    let near_top = row <= r0 + 1 && row >= r0;
    let near_bottom = row + 1 >= r1 && row <= r1;
    let near_left = col <= c0 + 1 && col >= c0;
    let near_right = col + 1 >= c1 && col <= c1;
    if near_top && near_left {
        return Region::TopLeftCorner;
    }
    if near_top && near_right {
        return Region::TopRightCorner;
    }
    if near_bottom && near_left {
        return Region::BottomLeftCorner;
    }
    if near_bottom && near_right {
        return Region::BottomRightCorner;
    }
    if row == r0 {
        Region::TopEdge
    } else if row == r1 {
        Region::BottomEdge
    } else if col == c0 {
        Region::LeftEdge
    } else if col == c1 {
        Region::RightEdge
    } else {
        Region::Background
    }
}

/// Fraction of the map's mass inside the mask: Σ masked / Σ all.
/// Scale-invariant; requires a nonnegative map with positive total mass.
pub fn concentration(map: &Tensor, mask: &[bool]) -> Result<f64> {
    if map.data().len() != mask.len() {
        return Err(Error::shape(format!(
            "map has {} cells, mask {}",
            map.data().len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut inside = 0.0;
    for (&v, &m) in map.data().iter().zip(mask.iter()) {
        if v < 0.0 {
            return Err(Error::invalid(format!("negative map value {v}")));
        }
        total += v;
        if m {
            inside += v;
        }
    }
    if total <= 0.0 {
        return Err(Error::invalid("map has zero total mass"));
    }
    Ok(inside / total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLabel {
    MonosemanticTask,
    MonosemanticDistractor(Region),
    Polysemantic,
}

impl HeadLabel {
    /// Filename-safe form, e.g. `monosemantic_distractor_colorbar`.
    pub fn slug(&self) -> String {
        match self {
            HeadLabel::MonosemanticTask => "monosemantic_task".into(),
            HeadLabel::MonosemanticDistractor(r) => {
                format!("monosemantic_distractor_{}", r.name())
            }
            HeadLabel::Polysemantic => "polysemantic".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadProfile {
    pub layer: usize,
    pub head: usize,
    /// Mean concentration per region over the dataset, keyed by region name.
    pub region_means: BTreeMap<String, f64>,
    /// Shannon entropy (nats) of the dataset-mean normalized map, read as a
    /// patch distribution.
    pub entropy: f64,
    pub label: HeadLabel,
    /// Fraction of images whose per-image judgment agrees with the label:
    /// argmax region equals the labeled region for monosemantic heads; no
    /// region reaching tau for polysemantic ones.
    pub confidence: f64,
    /// Dataset index of the image with median chirp concentration — the
    /// representative shown in the gallery.
    pub representative_index: usize,
}

fn validate_tau(tau: f64) -> Result<()> {
    if !(tau > 0.5 && tau < 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0.5, 1), got {tau}")));
    }
    Ok(())
}

/// Core decision rule over already-extracted raw maps.
///
/// `per_image_maps[i][l][h]` is image i's P×P map for head (l,h);
/// `mask_sets[i]` its region partition; `image_indices[i]` its dataset index.
/// Labels: monosemantic_task if the mean chirp concentration ≥ tau, else
/// monosemantic_distractor(R) for the unique non-chirp, non-background
/// region with mean ≥ tau (unique because regions are disjoint and
/// tau > 0.5), else polysemantic.
pub fn profile_from_maps(
    per_image_maps: &[Vec<Vec<Tensor>>],
    mask_sets: &[RegionMaskSet],
    image_indices: &[usize],
    tau: f64,
) -> Result<Vec<HeadProfile>> {
    validate_tau(tau)?;
    let n = per_image_maps.len();
    if n == 0 {
        return Err(Error::invalid("profile: empty dataset"));
    }
    if mask_sets.len() != n || image_indices.len() != n {
        return Err(Error::invalid(
            "profile: maps, mask sets, and indices must have equal length",
        ));
    }
    let layers = per_image_maps[0].len();
    let heads = per_image_maps[0].first().map_or(0, |l| l.len());
    if layers == 0 || heads == 0 {
        return Err(Error::invalid("profile: no heads"));
    }

    // Per-image masks materialized once; shared across heads.
    let masks_per_image: Vec<Vec<Vec<bool>>> = mask_sets
        .iter()
        .map(|s| ALL_REGIONS.iter().map(|&r| s.mask(r)).collect())
        .collect();

    let mut profiles = Vec::with_capacity(layers * heads);
    for l in 0..layers {
        for h in 0..heads {
            let mut sums = [0.0f64; ALL_REGIONS.len()];
            let mut argmax_counts = [0usize; ALL_REGIONS.len()];
            let mut below_tau_images = 0usize;
            let mut chirp_concs: Vec<(f64, usize)> = Vec::with_capacity(n);
            let mut mean_norm: Option<Tensor> = None;

            for i in 0..n {
                let map = &per_image_maps[i][l][h];
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                let mut image_max = f64::NEG_INFINITY;
                for (k, m) in masks_per_image[i].iter().enumerate() {
                    let c = concentration(map, m)?;
                    sums[k] += c;
                    if c > best_v {
                        best_v = c;
                        best = k;
                    }
                    image_max = image_max.max(c);
                    if k == 0 {
                        chirp_concs.push((c, image_indices[i]));
                    }
                }
                argmax_counts[best] += 1;
                if image_max < tau {
                    below_tau_images += 1;
                }
                let nm = normalize_map(map);
                mean_norm = Some(match mean_norm {
                    None => nm,
                    Some(acc) => Tensor::from_parts(
                        acc.shape().to_vec(),
                        acc.data()
                            .iter()
                            .zip(nm.data().iter())
                            .map(|(a, b)| a + b)
                            .collect(),
                    ),
                });
            }

            let means: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
            let label = if means[0] >= tau {
                HeadLabel::MonosemanticTask
            } else {
                ALL_REGIONS
                    .iter()
                    .enumerate()
                    .skip(1)
                    .find(|&(k, r)| *r != Region::Background && means[k] >= tau)
                    .map(|(_, &r)| HeadLabel::MonosemanticDistractor(r))
                    .unwrap_or(HeadLabel::Polysemantic)
            };
            let confidence = match &label {
                HeadLabel::MonosemanticTask => argmax_counts[0] as f64 / n as f64,
                HeadLabel::MonosemanticDistractor(r) => {
                    let k = ALL_REGIONS.iter().position(|x| x == r).expect("region");
                    argmax_counts[k] as f64 / n as f64
                }
                HeadLabel::Polysemantic => below_tau_images as f64 / n as f64,
            };

            // Entropy of the dataset-mean normalized map as a distribution.
            let acc = mean_norm.expect("n ≥ 1");
            let total: f64 = acc.data().iter().sum();
            let entropy = if total > 0.0 {
                -acc.data()
                    .iter()
                    .filter(|&&v| v > 0.0)
                    .map(|&v| {
                        let q = v / total;
                        q * q.ln()
                    })
                    .sum::<f64>()
            } else {
                0.0
            };

            // Lower median by (concentration, dataset index).
            let mut ranked = chirp_concs.clone();
            ranked.sort_by(|a, b| a.partial_cmp(b).expect("finite concentrations"));
            let representative_index = ranked[(n - 1) / 2].1;

            let region_means: BTreeMap<String, f64> = ALL_REGIONS
                .iter()
                .zip(means.iter())
                .map(|(r, &m)| (r.name().to_string(), m))
                .collect();
            profiles.push(HeadProfile {
                layer: l,
                head: h,
                region_means,
                entropy,
                label,
                confidence,
                representative_index,
            });
        }
    }
    Ok(profiles)
}

/// Per-image model work for one dataset item: raw maps plus region masks.
fn maps_and_masks_for(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    index: usize,
) -> Result<(Vec<Vec<Tensor>>, RegionMaskSet)> {
    let cfg = &ckpt.config;
    let img = manifest.load_image(index)?;
    let x = preprocess(&img, &ckpt.norm.pixel_mean, &ckpt.norm.pixel_std, cfg)?;
    let patches = patches_from_image(&x, cfg)?;
    let mask = AblationMask::none(cfg.layers, cfg.heads);
    let (_, attn) = forward_image(&ckpt.params, cfg, &patches, &mask)?;
    let maps = extract_maps(&attn, cfg, Aggregation::ColumnMean)?;
    let entry = &manifest.entries[index];
    let regions = region_masks(
        &entry.geometry,
        &entry.spec,
        cfg.grid_p(),
        manifest.header.gen.mask_half_width_px,
    );
    Ok((maps, regions))
}

/// Runs the model over the dataset (all entries, or `indices` when given)
/// and classifies every head. See [`profile_from_maps`] for the rule.
pub fn profile_heads(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    indices: Option<&[usize]>,
    tau: f64,
) -> Result<Vec<HeadProfile>> {
    validate_tau(tau)?;
    let all: Vec<usize>;
    let idx: &[usize] = match indices {
        Some(ix) => ix,
        None => {
            all = (0..manifest.entries.len()).collect();
            &all
        }
    };
    if idx.is_empty() {
        return Err(Error::invalid("profile: empty dataset"));
    }
    let work = |&i: &usize| maps_and_masks_for(ckpt, manifest, i);
    #[cfg(feature = "parallel")]
    let rows: Vec<(Vec<Vec<Tensor>>, RegionMaskSet)> = {
        use rayon::prelude::*;
        idx.par_iter().map(work).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<(Vec<Vec<Tensor>>, RegionMaskSet)> =
        idx.iter().map(work).collect::<Result<Vec<_>>>()?;
    let (maps, masks): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    profile_from_maps(&maps, &masks, idx, tau)
}

/// Writes `profiles.json` plus one gallery overlay per head,
/// `layer{l}_head{h}_{label}.png`, rendered on that head's median-chirp-
/// concentration representative image. Deterministic.
pub fn export_profiles(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    profiles: &[HeadProfile],
    alpha: f64,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(profiles)?;
    std::fs::write(out_dir.join("profiles.json"), json.as_bytes())?;

    // One forward pass per distinct representative image.
    let mut by_image: BTreeMap<usize, Vec<&HeadProfile>> = BTreeMap::new();
    for p in profiles {
        by_image.entry(p.representative_index).or_default().push(p);
    }
    let cfg = &ckpt.config;
    for (&index, group) in &by_image {
        let img = manifest.load_image(index)?;
        let x = preprocess(&img, &ckpt.norm.pixel_mean, &ckpt.norm.pixel_std, cfg)?;
        let patches = patches_from_image(&x, cfg)?;
        let mask = AblationMask::none(cfg.layers, cfg.heads);
        let (_, attn) = forward_image(&ckpt.params, cfg, &patches, &mask)?;
        let maps = extract_maps(&attn, cfg, Aggregation::ColumnMean)?;
        for p in group {
            let normalized = normalize_map(&maps[p.layer][p.head]);
            let blended = overlay(&img, &normalized, alpha, viridis)?;
            let name = format!("layer{}_head{}_{}.png", p.layer, p.head, p.label.slug());
            blended.write_png(&out_dir.join(name))?;
        }
    }
    Ok(())
}
