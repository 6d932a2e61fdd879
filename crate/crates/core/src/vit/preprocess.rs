//! Image → model-input pipeline: bilinear resize, per-channel
//! normalization, and patch flattening. All of this happens outside the
//! autodiff graph — the model only ever sees the finished patch matrix.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::raster::Canvas;

use super::config::ViTConfig;

/// Resize to `cfg.image_size`², scale to [0,1], and normalize channel `c` as
/// `(v − mean[c]) / std[c]`. Returns a `[C, S, S]` tensor. Resampling is
/// bilinear with half-pixel centers (`src = (dst + 0.5)·scale − 0.5`,
/// clamped), the same convention used by mainstream image libraries when
/// corner alignment is off.
pub fn preprocess(
    img: &Canvas,
    mean: &[f64; 3],
    std: &[f64; 3],
    cfg: &ViTConfig,
) -> Result<Tensor> {
    if cfg.channels != 3 {
        return Err(Error::invalid("preprocess expects 3-channel RGB input"));
    }
    for (c, &s) in std.iter().enumerate() {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::invalid(format!(
                "channel {c} has non-positive std {s}; cannot normalize"
            )));
        }
    }
    let s = cfg.image_size;
    let (w, h) = (img.width(), img.height());
    if w == 0 || h == 0 {
        return Err(Error::invalid("empty image"));
    }
    let scale_x = w as f64 / s as f64;
    let scale_y = h as f64 / s as f64;
    let mut data = vec![0.0f64; 3 * s * s];
    for oy in 0..s {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..s {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let p00 = img.get(x0, y0);
            let p10 = img.get(x1, y0);
            let p01 = img.get(x0, y1);
            let p11 = img.get(x1, y1);
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
                let bot = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                let v = (top * (1.0 - fy) + bot * fy) / 255.0;
                data[c * s * s + oy * s + ox] = (v - mean[c]) / std[c];
            }
        }
    }
    Tensor::new(vec![3, s, s], data)
}

/// Flatten a preprocessed `[C, S, S]` tensor into the `P² × patch_dim` patch
/// matrix. Patches are enumerated row-major over the grid; within a patch the
/// flattening order is channel-major, then row, then column.
pub fn patches_from_image(x: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let s = cfg.image_size;
    let c = cfg.channels;
    if x.shape() != [c, s, s] {
        return Err(Error::shape(format!(
            "expected [{c}, {s}, {s}] input, got {:?}",
            x.shape()
        )));
    }
    let p = cfg.patch_size;
    let grid = cfg.grid_p();
    let pd = cfg.patch_dim();
    let src = x.data();
    let mut data = Vec::with_capacity(grid * grid * pd);
    for pr in 0..grid {
        for pc in 0..grid {
            for ch in 0..c {
                for yy in 0..p {
                    let y = pr * p + yy;
                    let row = &src[ch * s * s + y * s..];
                    for xx in 0..p {
                        data.push(row[pc * p + xx]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, pd], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_canvas(w: usize, h: usize, vals: &[u8]) -> Canvas {
        let mut c = Canvas::new(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                let v = vals[y * w + x];
                c.put(x, y, [v, v, v]);
            }
        }
        c
    }

    #[test]
    fn bilinear_2x2_to_4x4_matches_closed_form() {
        // Source corners a,b,c,d. With half-pixel centers the sample
        // positions along each axis are {0, 0.25, 0.75, 1} after clamping, so
        // the 1-D weights are exactly {1, 3/4·a+1/4·b, 1/4·a+3/4·b, b} and
        // the 2-D result is their tensor product.
        let (a, b, c, d) = (10.0f64, 50.0, 90.0, 130.0);
        let img = gray_canvas(2, 2, &[10, 50, 90, 130]);
        let mut cfg = ViTConfig::desk_default();
        cfg.image_size = 4;
        cfg.patch_size = 2;
        let t = preprocess(&img, &[0.0; 3], &[1.0; 3], &cfg).unwrap();
        let wx = [0.0f64, 0.25, 0.75, 1.0];
        for oy in 0..4 {
            for ox in 0..4 {
                let top = a * (1.0 - wx[ox]) + b * wx[ox];
                let bot = c * (1.0 - wx[ox]) + d * wx[ox];
                let want = (top * (1.0 - wx[oy]) + bot * wx[oy]) / 255.0;
                let got = t.data()[oy * 4 + ox];
                assert!(
                    (got - want).abs() < 1e-12,
                    "pixel ({ox},{oy}): got {got}, want {want}"
                );
            }
        }
    }

    #[test]
    fn identity_resize_keeps_pixels_and_applies_normalization() {
        let img = gray_canvas(4, 4, &(0..16).map(|v| (v * 16) as u8).collect::<Vec<_>>());
        let mut cfg = ViTConfig::desk_default();
        cfg.image_size = 4;
        cfg.patch_size = 2;
        let mean = [0.5, 0.25, 0.0];
        let std = [2.0, 1.0, 0.5];
        let t = preprocess(&img, &mean, &std, &cfg).unwrap();
        for c in 0..3 {
            for i in 0..16 {
                let raw = ((i * 16) as u8 as f64) / 255.0;
                let want = (raw - mean[c]) / std[c];
                assert!((t.data()[c * 16 + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_std_is_rejected() {
        let img = gray_canvas(2, 2, &[0, 0, 0, 0]);
        let cfg = ViTConfig::desk_default();
        let err = preprocess(&img, &[0.0; 3], &[1.0, 0.0, 1.0], &cfg).unwrap_err();
        assert!(err.to_string().contains("std"));
    }

    #[test]
    fn patch_flattening_matches_hand_enumeration() {
        // 4×4 single-grid check: image_size 4, patch 2 → 2×2 grid of 2×2
        // patches, patch_dim = 12 (3 channels). Fill channel c with
        // c·100 + y·10 + x so every coordinate is readable in the value.
        let mut cfg = ViTConfig::desk_default();
        cfg.image_size = 4;
        cfg.patch_size = 2;
        let mut data = vec![0.0; 3 * 16];
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    data[c * 16 + y * 4 + x] = (c * 100 + y * 10 + x) as f64;
                }
            }
        }
        let x = Tensor::new(vec![3, 4, 4], data).unwrap();
        let p = patches_from_image(&x, &cfg).unwrap();
        assert_eq!(p.shape(), [4, 12]);
        // Patch index 1 is grid position (row 0, col 1): x∈{2,3}, y∈{0,1}.
        let want: Vec<f64> = (0..3)
            .flat_map(|c| {
                (0..2).flat_map(move |y| {
                    (2..4).map(move |x| (c * 100 + y * 10 + x) as f64)
                })
            })
            .collect();
        assert_eq!(p.row(1), want.as_slice());
    }

    #[test]
    fn desk_scale_shapes_line_up() {
        let img = gray_canvas(8, 8, &vec![128u8; 64]);
        let cfg = ViTConfig::desk_default();
        let t = preprocess(&img, &[0.5; 3], &[0.25; 3], &cfg).unwrap();
        assert_eq!(t.shape(), [3, 64, 64]);
        let p = patches_from_image(&t, &cfg).unwrap();
        assert_eq!(p.shape(), [64, 192]);
    }
}
