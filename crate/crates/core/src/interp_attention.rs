//! Attention-map extraction and visualization: strip the CLS token,
//! aggregate each head's patch-to-patch attention to a P×P grid, min-max
//! normalize, and alpha-blend a colormapped heatmap over the source image.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::raster::{viridis, Canvas};
use crate::vit::{
    forward_image, patches_from_image, preprocess, AblationMask, AttentionTensor,
    Checkpoint, ViTConfig,
};

/// How a T×T attention matrix collapses to one scalar per patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Mean over query rows: attention *received* by each patch. The default,
    /// because the maps are read as "where does this head look".
    ColumnMean,
    /// Mean over key columns: attention *emitted* by each patch.
    RowMean,
}

impl Default for Aggregation {
    fn default() -> Aggregation {
        Aggregation::ColumnMean
    }
}

/// Collapses every head's attention to a P×P map: drop the CLS row and
/// column, aggregate the remaining P²×P² matrix per patch, reshape
/// row-major to the patch grid.
pub fn extract_maps(
    attn: &AttentionTensor,
    cfg: &ViTConfig,
    agg: Aggregation,
) -> Result<Vec<Vec<Tensor>>> {
    let p = cfg.grid_p();
    let n = p * p;
    if attn.tokens() != n + 1 {
        return Err(Error::shape(format!(
            "attention has {} tokens, config implies {}",
            attn.tokens(),
            n + 1
        )));
    }
    let mut out = Vec::with_capacity(attn.layers());
    for l in 0..attn.layers() {
        let mut layer = Vec::with_capacity(attn.heads());
        for h in 0..attn.heads() {
            let mut map = vec![0.0f64; n];
            match agg {
                Aggregation::ColumnMean => {
                    // map[j] = (1/P²)·Σ_i A[i+1, j+1]
                    for i in 0..n {
                        let row = attn.row(l, h, i + 1);
                        for (j, cell) in map.iter_mut().enumerate() {
                            *cell += row[j + 1];
                        }
                    }
                }
                Aggregation::RowMean => {
                    // map[i] = (1/P²)·Σ_j A[i+1, j+1]
                    for (i, cell) in map.iter_mut().enumerate() {
                        let row = attn.row(l, h, i + 1);
                        for j in 0..n {
                            *cell += row[j + 1];
                        }
                    }
                }
            }
            let inv = 1.0 / n as f64;
            for cell in map.iter_mut() {
                *cell *= inv;
            }
            layer.push(Tensor::from_parts(vec![p, p], map));
        }
        out.push(layer);
    }
    Ok(out)
}

/// Min-max rescale into [0,1]; a constant map becomes all zeros.
pub fn normalize_map(m: &Tensor) -> Tensor {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in m.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return Tensor::zeros(m.shape().to_vec());
    }
    let scale = 1.0 / (hi - lo);
    Tensor::from_parts(
        m.shape().to_vec(),
        m.data().iter().map(|&v| (v - lo) * scale).collect(),
    )
}

/// Upsamples `map` (nearest-neighbor) to the image size and blends:
/// out = (1−alpha)·img + alpha·colormap(map).
pub fn overlay(
    img: &Canvas,
    map: &Tensor,
    alpha: f64,
    colormap: fn(f64) -> [u8; 3],
) -> Result<Canvas> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0,1]")));
    }
    if map.shape().len() != 2 || map.rows() != map.cols() || map.rows() == 0 {
        return Err(Error::shape(format!(
            "overlay map must be square P×P, got {:?}",
            map.shape()
        )));
    }
    let p = map.rows();
    let (w, h) = (img.width(), img.height());
    let mut out = Canvas::new(w, h, [0, 0, 0]);
    for y in 0..h {
        let py = (((y as f64 + 0.5) * p as f64 / h as f64) as usize).min(p - 1);
        for x in 0..w {
            let px = (((x as f64 + 0.5) * p as f64 / w as f64) as usize).min(p - 1);
            let heat = colormap(map.at(py, px));
            let orig = img.get(x, y);
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let v = (1.0 - alpha) * orig[c] as f64 + alpha * heat[c] as f64;
                rgb[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            out.put(x, y, rgb);
        }
    }
    Ok(out)
}

/// Writes one raw-map CSV and one viridis overlay PNG per head, named
/// `layer{l}_head{h}.{csv,png}`. Deterministic: re-runs are byte-identical.
pub fn dump_all(
    ckpt: &Checkpoint,
    img: &Canvas,
    alpha: f64,
    agg: Aggregation,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let cfg = &ckpt.config;
    let x = preprocess(img, &ckpt.norm.pixel_mean, &ckpt.norm.pixel_std, cfg)?;
    let patches = patches_from_image(&x, cfg)?;
    let mask = AblationMask::none(cfg.layers, cfg.heads);
    let (_, attn) = forward_image(&ckpt.params, cfg, &patches, &mask)?;
    let maps = extract_maps(&attn, cfg, agg)?;
    for (l, layer) in maps.iter().enumerate() {
        for (h, raw) in layer.iter().enumerate() {
            write_map_csv(&out_dir.join(format!("layer{l}_head{h}.csv")), raw)?;
            let normalized = normalize_map(raw);
            let blended = overlay(img, &normalized, alpha, viridis)?;
            blended.write_png(&out_dir.join(format!("layer{l}_head{h}.png")))?;
        }
    }
    Ok(())
}

/// P rows × P comma-separated columns, 17 significant digits.
pub fn write_map_csv(path: &Path, map: &Tensor) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in 0..map.rows() {
        let row: Vec<String> = map.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}
