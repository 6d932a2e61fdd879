//! Head-ablation sweep: knock out one attention head at a time, re-evaluate,
//! and report percent loss increases as heatmaps, per-head prediction
//! histograms, and per-layer μ/σ summaries.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{diverging, Canvas};
use crate::train::{mse_loss, PreparedDataset};
use crate::vit::{forward_batch, AblationMask, Checkpoint};

pub use crate::vit::ablate_weights;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub baseline_loss: f64,
    /// loss[l][h] with head (l,h) ablated.
    pub loss: Vec<Vec<f64>>,
    /// 100·(loss − baseline)/baseline.
    pub pct_increase: Vec<Vec<f64>>,
    /// Per-layer mean of pct_increase.
    pub layer_mu: Vec<f64>,
    /// Per-layer population standard deviation of pct_increase.
    pub layer_sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionHistograms {
    /// bins+1 edges spanning [0,1] uniformly.
    pub edges: Vec<f64>,
    /// Baseline (no ablation) counts over prediction component 0.
    pub baseline: Vec<usize>,
    /// per_head[l][h] = counts with head (l,h) ablated.
    pub per_head: Vec<Vec<Vec<usize>>>,
}

/// Bins values into `bins` equal cells over [0,1]; out-of-range values are
/// clamped into the edge cells so counts always sum to the input length.
pub fn bin_unit_interval(values: &[f64], bins: usize) -> Result<Vec<usize>> {
    if bins < 2 {
        return Err(Error::invalid(format!("bins must be ≥ 2, got {bins}")));
    }
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = ((v * bins as f64).floor() as i64).clamp(0, bins as i64 - 1) as usize;
        counts[idx] += 1;
    }
    Ok(counts)
}

/// One evaluation pass: dataset-mean MSE plus the predicted start times
/// (component 0), under the given mask.
fn eval_with_predictions(
    ckpt: &Checkpoint,
    data: &PreparedDataset,
    mask: &AblationMask,
) -> Result<(f64, Vec<f64>)> {
    let (preds, _) = forward_batch(&ckpt.params, &ckpt.config, &data.patches, mask)?;
    let loss = mse_loss(&preds, &data.targets)?;
    let starts = (0..preds.rows()).map(|i| preds.at(i, 0)).collect();
    Ok((loss, starts))
}

fn sweep_full(
    ckpt: &Checkpoint,
    data: &PreparedDataset,
    bins: Option<usize>,
) -> Result<(AblationReport, Option<PredictionHistograms>)> {
    if data.patches.is_empty() {
        return Err(Error::invalid("ablation sweep: empty dataset"));
    }
    let (layers, heads) = (ckpt.config.layers, ckpt.config.heads);
    let none = AblationMask::none(layers, heads);
    let (baseline_loss, baseline_starts) = eval_with_predictions(ckpt, data, &none)?;
    if !baseline_loss.is_finite() {
        return Err(Error::NonFinite(format!("baseline loss {baseline_loss}")));
    }
    if baseline_loss == 0.0 {
        return Err(Error::invalid(
            "baseline loss is exactly zero; percent increase undefined",
        ));
    }

    // The L·H single-head evaluations are independent; results are folded
    // back in (l,h) order regardless of scheduling.
    let jobs: Vec<(usize, usize)> = (0..layers)
        .flat_map(|l| (0..heads).map(move |h| (l, h)))
        .collect();
    let run = |&(l, h): &(usize, usize)| -> Result<(f64, Vec<f64>)> {
        eval_with_predictions(ckpt, data, &AblationMask::single(layers, heads, l, h))
    };
    #[cfg(feature = "parallel")]
    let cells: Vec<(f64, Vec<f64>)> = {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let cells: Vec<(f64, Vec<f64>)> = jobs.iter().map(run).collect::<Result<Vec<_>>>()?;

    let mut loss = vec![vec![0.0; heads]; layers];
    let mut pct = vec![vec![0.0; heads]; layers];
    for ((l, h), (cell_loss, _)) in jobs.iter().zip(cells.iter()) {
        if !cell_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "ablated loss at ({l},{h}) is {cell_loss}"
            )));
        }
        loss[*l][*h] = *cell_loss;
        pct[*l][*h] = 100.0 * (cell_loss - baseline_loss) / baseline_loss;
    }
    let mut layer_mu = Vec::with_capacity(layers);
    let mut layer_sigma = Vec::with_capacity(layers);
    for row in &pct {
        let mu = row.iter().sum::<f64>() / heads as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / heads as f64;
        layer_mu.push(mu);
        layer_sigma.push(var.sqrt());
    }
    let report = AblationReport {
        baseline_loss,
        loss,
        pct_increase: pct,
        layer_mu,
        layer_sigma,
    };

    let hists = match bins {
        None => None,
        Some(b) => {
            let edges = (0..=b).map(|i| i as f64 / b as f64).collect();
            let baseline = bin_unit_interval(&baseline_starts, b)?;
            let mut per_head = vec![vec![Vec::new(); heads]; layers];
            for ((l, h), (_, starts)) in jobs.iter().zip(cells.iter()) {
                per_head[*l][*h] = bin_unit_interval(starts, b)?;
            }
            Some(PredictionHistograms {
                edges,
                baseline,
                per_head,
            })
        }
    };
    Ok((report, hists))
}

/// Evaluates the baseline and every single-head ablation (1 + L·H
/// evaluations) over the prepared dataset. The checkpoint is never mutated.
pub fn sweep(ckpt: &Checkpoint, data: &PreparedDataset) -> Result<AblationReport> {
    Ok(sweep_full(ckpt, data, None)?.0)
}

/// Histograms of predicted start time (component 0) for the baseline and for
/// every single-head ablation, all over identical [0,1] binning.
pub fn prediction_histograms(
    ckpt: &Checkpoint,
    data: &PreparedDataset,
    bins: usize,
) -> Result<PredictionHistograms> {
    Ok(sweep_full(ckpt, data, Some(bins))?
        .1
        .expect("bins requested"))
}

/// [`sweep`] and [`prediction_histograms`] from one shared set of forward
/// passes — half the cost of calling them separately.
pub fn sweep_with_histograms(
    ckpt: &Checkpoint,
    data: &PreparedDataset,
    bins: usize,
) -> Result<(AblationReport, PredictionHistograms)> {
    let (r, h) = sweep_full(ckpt, data, Some(bins))?;
    Ok((r, h.expect("bins requested")))
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

const HEATMAP_CELL: usize = 48;
const HEATMAP_BORDER: usize = 2;

/// Writes `heatmap.csv` (header + L rows × H percent values) and
/// `heatmap.png` (diverging blue→red cells, blue = smallest increase).
pub fn export_heatmap(report: &AblationReport, out_dir: &Path) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(out_dir)?;
    let layers = report.pct_increase.len();
    let heads = report.pct_increase.first().map_or(0, |r| r.len());

    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("heatmap.csv"))?);
    let header: Vec<String> = (0..heads).map(|h| format!("head{h}")).collect();
    writeln!(f, "{}", header.join(","))?;
    for row in &report.pct_increase {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    f.flush()?;
    drop(f);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for row in &report.pct_increase {
        for &v in row {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let w = heads * HEATMAP_CELL + (heads + 1) * HEATMAP_BORDER;
    let h = layers * HEATMAP_CELL + (layers + 1) * HEATMAP_BORDER;
    let mut png = Canvas::new(w, h, [255, 255, 255]);
    for (l, row) in report.pct_increase.iter().enumerate() {
        for (hd, &v) in row.iter().enumerate() {
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            let rgb = diverging(t);
            let x0 = HEATMAP_BORDER + hd * (HEATMAP_CELL + HEATMAP_BORDER);
            let y0 = HEATMAP_BORDER + l * (HEATMAP_CELL + HEATMAP_BORDER);
            for y in y0..y0 + HEATMAP_CELL {
                for x in x0..x0 + HEATMAP_CELL {
                    png.put(x, y, rgb);
                }
            }
        }
    }
    png.write_png(&out_dir.join("heatmap.png"))
}

const HIST_PANEL_H: usize = 64;
const HIST_BAR_W: usize = 4;
const HIST_GAP: usize = 8;

/// Writes `histograms.csv` (long format `layer,head,bin_left,count`; the
/// baseline series uses layer = -1, head = -1) and `histograms.png`
/// (one panel per head, gray baseline bars behind colored head bars).
pub fn export_histograms(hists: &PredictionHistograms, out_dir: &Path) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(out_dir)?;
    let bins = hists.baseline.len();
    let layers = hists.per_head.len();
    let heads = hists.per_head.first().map_or(0, |r| r.len());

    let mut f =
        std::io::BufWriter::new(std::fs::File::create(out_dir.join("histograms.csv"))?);
    writeln!(f, "layer,head,bin_left,count")?;
    for (b, &c) in hists.baseline.iter().enumerate() {
        writeln!(f, "-1,-1,{:.16e},{}", hists.edges[b], c)?;
    }
    for (l, row) in hists.per_head.iter().enumerate() {
        for (h, counts) in row.iter().enumerate() {
            for (b, &c) in counts.iter().enumerate() {
                writeln!(f, "{l},{h},{:.16e},{}", hists.edges[b], c)?;
            }
        }
    }
    f.flush()?;
    drop(f);

    // Shared y-scale across all panels so shapes are comparable.
    let max_count = hists
        .per_head
        .iter()
        .flatten()
        .flatten()
        .chain(hists.baseline.iter())
        .copied()
        .max()
        .unwrap_or(1)
        .max(1);
    let panel_w = bins * HIST_BAR_W;
    let w = heads * panel_w + (heads + 1) * HIST_GAP;
    let h = layers * HIST_PANEL_H + (layers + 1) * HIST_GAP;
    let mut png = Canvas::new(w, h, [255, 255, 255]);
    for (l, row) in hists.per_head.iter().enumerate() {
        for (hd, counts) in row.iter().enumerate() {
            let x0 = HIST_GAP + hd * (panel_w + HIST_GAP);
            let y0 = HIST_GAP + l * (HIST_PANEL_H + HIST_GAP);
            for b in 0..bins {
                let base_h = hists.baseline[b] * HIST_PANEL_H / max_count;
                let head_h = counts[b] * HIST_PANEL_H / max_count;
                let bx = x0 + b * HIST_BAR_W;
                // Baseline (gray, full bar width) behind the head's bars
                // (blue, narrower) — both rise from the panel floor.
                for y in 0..base_h {
                    for x in bx..bx + HIST_BAR_W {
                        png.put(x, y0 + HIST_PANEL_H - 1 - y, [176, 176, 176]);
                    }
                }
                for y in 0..head_h {
                    for x in bx..bx + HIST_BAR_W.saturating_sub(1) {
                        png.put(x, y0 + HIST_PANEL_H - 1 - y, [46, 94, 170]);
                    }
                }
            }
        }
    }
    png.write_png(&out_dir.join("histograms.png"))
}

/// Writes `summary.csv` (`layer,mu,sigma`) and `summary.txt` with one
/// human-readable `(μ=…%, σ=…%)` line per layer.
pub fn export_summary(report: &AblationReport, out_dir: &Path) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(out_dir)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out_dir.join("summary.csv"))?);
    writeln!(csv, "layer,mu,sigma")?;
    for l in 0..report.layer_mu.len() {
        writeln!(
            csv,
            "{l},{:.16e},{:.16e}",
            report.layer_mu[l], report.layer_sigma[l]
        )?;
    }
    csv.flush()?;
    drop(csv);

    let mut txt = std::io::BufWriter::new(std::fs::File::create(out_dir.join("summary.txt"))?);
    writeln!(txt, "baseline MSE: {:.6e}", report.baseline_loss)?;
    for l in 0..report.layer_mu.len() {
        writeln!(
            txt,
            "layer {l}: (μ={:.2}%, σ={:.2}%)",
            report.layer_mu[l], report.layer_sigma[l]
        )?;
    }
    txt.flush()?;
    Ok(())
}
