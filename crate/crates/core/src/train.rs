//! Training and evaluation: MSE loss, Adam/SGD, a deterministic epoch loop
//! over per-sample tapes, and exact-mean evaluation.
//!
//! Determinism contract: given (dataset, config, seed), every run visits
//! samples in the same order, folds gradients and statistics in index order
//! regardless of worker count, and therefore produces bit-identical
//! parameters and loss curves.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chirpgen::Manifest;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::util::{splitmix64, sub_seed};
use crate::vit::{
    build_forward, forward_batch, AblationMask, Checkpoint, NormStats, ViTConfig,
    ViTParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Which parameters the optimizer updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    /// LoRA adapters and the regression head; the ViT backbone stays frozen.
    LoraPlusHead,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub trainable: TrainScope,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            epochs: 6,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            trainable: TrainScope::LoraPlusHead,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be ≥ 1"));
        }
        if !(self.learning_rate > 0.0) && self.learning_rate != 0.0 {
            return Err(Error::invalid(format!(
                "learning_rate must be ≥ 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// 𝓛 = (1/N)·Σᵢ ‖yᵢ − ŷᵢ‖²: mean over batch rows of squared Euclidean
/// residual norms.
pub fn mse_loss(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() || pred.shape().len() != 2 {
        return Err(Error::shape(format!(
            "mse_loss: shapes {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let n = pred.rows();
    if n == 0 {
        return Err(Error::invalid("mse_loss: empty batch"));
    }
    let mut total = 0.0;
    for (a, b) in pred.data().iter().zip(truth.data().iter()) {
        let r = a - b;
        total += r * r;
    }
    Ok(total / n as f64)
}

/// Decides membership in the trainable set by canonical tensor name.
pub fn is_trainable(scope: TrainScope, name: &str) -> bool {
    match scope {
        TrainScope::All => true,
        TrainScope::LoraPlusHead => name.contains(".lora_") || name.starts_with("head."),
    }
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer over a fixed, ordered set of named tensors.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    /// Adam moments, per tensor, in the same order as the trainable names.
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, shapes: &[Vec<usize>]) -> Optimizer {
        Optimizer {
            kind,
            lr,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            t: 0,
        }
    }

    /// Advances the step counter. Call once per batch, before `update_one`.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies the update rule to the `i`-th trainable tensor. Tensor index
    /// and ordering must match the shapes the optimizer was built with.
    pub fn update_one(&mut self, i: usize, p: &mut Tensor, g: &Tensor) -> Result<()> {
        if i >= self.m.len() {
            return Err(Error::invalid("optimizer: tensor index out of range"));
        }
        if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
            return Err(Error::shape(format!(
                "optimizer: parameter {:?} vs gradient {:?} vs state {:?}",
                p.shape(),
                g.shape(),
                self.m[i].shape()
            )));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                let pd = p.data_mut();
                for (w, &gv) in pd.iter_mut().zip(g.data().iter()) {
                    *w -= self.lr * gv;
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                let md = self.m[i].data_mut();
                let vd = self.v[i].data_mut();
                let pd = p.data_mut();
                for j in 0..pd.len() {
                    let gv = g.data()[j];
                    md[j] = ADAM_BETA1 * md[j] + (1.0 - ADAM_BETA1) * gv;
                    vd[j] = ADAM_BETA2 * vd[j] + (1.0 - ADAM_BETA2) * gv * gv;
                    let mhat = md[j] / bc1;
                    let vhat = vd[j] / bc2;
                    pd[j] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(())
    }

    /// One full step over an ordered tensor slice.
    pub fn step(&mut self, tensors: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if tensors.len() != grads.len() || tensors.len() != self.m.len() {
            return Err(Error::invalid("optimizer: tensor/gradient arity mismatch"));
        }
        self.begin_step();
        for (i, (p, g)) in tensors.iter_mut().zip(grads.iter()).enumerate() {
            self.update_one(i, p, g)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Dataset preparation and splitting
// ---------------------------------------------------------------------------

/// Decoded, preprocessed patch matrices plus an N×3 target matrix — the form
/// every forward pass consumes. Preparing once and reusing across the many
/// evaluations of an ablation sweep avoids re-decoding PNGs 17 times.
pub struct PreparedDataset {
    pub patches: Vec<Tensor>,
    pub targets: Tensor,
    /// Manifest indices these rows came from, in row order.
    pub indices: Vec<usize>,
}

/// Loads, resizes, normalizes, and patch-flattens the manifest images at
/// `indices` (in the given order).
pub fn prepare(
    manifest: &Manifest,
    cfg: &ViTConfig,
    norm: &NormStats,
    indices: &[usize],
) -> Result<PreparedDataset> {
    let one = |&i: &usize| -> Result<(Tensor, [f64; 3])> {
        let img = manifest.load_image(i)?;
        let x = crate::vit::preprocess(&img, &norm.pixel_mean, &norm.pixel_std, cfg)?;
        let p = crate::vit::patches_from_image(&x, cfg)?;
        Ok((p, manifest.entries[i].y))
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<(Tensor, [f64; 3])> =
        indices.par_iter().map(one).collect::<Result<Vec<_>>>()?;
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<(Tensor, [f64; 3])> =
        indices.iter().map(one).collect::<Result<Vec<_>>>()?;

    let mut patches = Vec::with_capacity(rows.len());
    let mut targets = Vec::with_capacity(rows.len() * 3);
    for (p, y) in rows {
        patches.push(p);
        targets.extend_from_slice(&y);
    }
    Ok(PreparedDataset {
        patches,
        targets: Tensor::from_parts(vec![indices.len(), 3], targets),
        indices: indices.to_vec(),
    })
}

/// Deterministic 90/10 split by index hash: index i goes to validation when
/// `splitmix64(i) % 10 == 0`. The split depends only on the index, never on
/// the training seed, so different training runs compare on the same held-out
/// set. Degenerate hash outcomes are repaired so both sides are non-empty
/// whenever n ≥ 2.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::with_capacity(n);
    let mut val = Vec::new();
    for i in 0..n {
        if splitmix64(i as u64) % 10 == 0 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    if n >= 2 {
        if val.is_empty() {
            val.push(train.pop().expect("n ≥ 2"));
        }
        if train.is_empty() {
            train.push(val.pop().expect("n ≥ 2"));
        }
    }
    (train, val)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Exact dataset-mean MSE under an optional ablation mask. Per-sample losses
/// are summed in index order, so the result is independent of batching and
/// worker count, and repeated calls agree bitwise.
pub fn evaluate(
    params: &ViTParams,
    cfg: &ViTConfig,
    data: &PreparedDataset,
    mask: &AblationMask,
) -> Result<f64> {
    if data.patches.is_empty() {
        return Err(Error::invalid("evaluate: empty dataset"));
    }
    let (preds, _) = forward_batch(params, cfg, &data.patches, mask)?;
    mse_loss(&preds, &data.targets)
}

/// [`evaluate`] from a checkpoint and manifest (the whole set when `indices`
/// is None).
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    indices: Option<&[usize]>,
    mask: Option<&AblationMask>,
) -> Result<f64> {
    let all: Vec<usize>;
    let idx = match indices {
        Some(ix) => ix,
        None => {
            all = (0..manifest.entries.len()).collect();
            &all
        }
    };
    let data = prepare(manifest, &ckpt.config, &ckpt.norm, idx)?;
    let none = AblationMask::none(ckpt.config.layers, ckpt.config.heads);
    evaluate(&ckpt.params, &ckpt.config, &data, mask.unwrap_or(&none))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Number of completed epochs when this row was measured: row 0 is the
    /// untrained model, row `e` the model after `e` full epochs.
    pub epoch: usize,
    /// Full-train-split MSE evaluated at this boundary (not a running
    /// average, so "initial MSE" and "final MSE" are first-class values).
    pub train_mse: f64,
    /// Validation MSE at the same boundary; equals `train_mse` when the
    /// dataset is too small to have a validation split.
    pub val_mse: f64,
}

pub struct TrainResult {
    pub params: ViTParams,
    pub norm: NormStats,
    pub curve: Vec<EpochStats>,
    pub trainable_names: Vec<String>,
}

/// One sample's contribution: loss and gradients for the trainable set, in
/// canonical order.
fn sample_grads(
    params: &ViTParams,
    cfg: &ViTConfig,
    patches: &Tensor,
    target: &[f64],
    scope: TrainScope,
    checked: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let mask = AblationMask::none(cfg.layers, cfg.heads);
    let built = build_forward(
        &mut g,
        params,
        cfg,
        patches,
        &mask,
        &|name| is_trainable(scope, name),
        &HashMap::new(),
    )?;
    let t = g.constant(Tensor::from_parts(vec![1, 3], target.to_vec()));
    let diff = g.sub(built.pred, t)?;
    let sq = g.mul_elem(diff, diff)?;
    let loss = g.sum_all(sq)?;
    let grads = if checked {
        g.backward_checked(loss)?
    } else {
        g.backward(loss)?
    };
    let out = built
        .trainable
        .iter()
        .map(|&(_, id)| grads.dense(&g, id))
        .collect();
    Ok((g.value(loss).data()[0], out))
}

/// Fine-tunes (or trains from scratch) on the manifest's train split and
/// reports train/validation MSE at every epoch boundary: `curve` has
/// `epochs + 1` rows, row 0 measuring the untrained model and row `e` the
/// model after `e` epochs. Deterministic given the configs: initialization
/// comes from `tc.seed`, epoch shuffles from `sub_seed(tc.seed, epoch)`,
/// and every reduction is index-ordered.
pub fn train(manifest: &Manifest, cfg: &ViTConfig, tc: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    tc.validate()?;
    if manifest.entries.is_empty() {
        return Err(Error::invalid("train: empty dataset"));
    }
    let norm = NormStats {
        pixel_mean: manifest.header.pixel_mean,
        pixel_std: manifest.header.pixel_std,
    };
    let (train_idx, val_idx) = split_indices(manifest.entries.len());
    let train_data = prepare(manifest, cfg, &norm, &train_idx)?;
    let val_data = if val_idx.is_empty() {
        None
    } else {
        Some(prepare(manifest, cfg, &norm, &val_idx)?)
    };

    let mut params = ViTParams::init(cfg, tc.seed)?;
    let trainable_names: Vec<String> = ViTParams::shape_spec(cfg)
        .into_iter()
        .filter(|(n, _)| is_trainable(tc.trainable, n))
        .map(|(n, _)| n)
        .collect();
    let shapes: Vec<Vec<usize>> = ViTParams::shape_spec(cfg)
        .into_iter()
        .filter(|(n, _)| is_trainable(tc.trainable, n))
        .map(|(_, s)| s)
        .collect();
    let mut opt = Optimizer::new(tc.optimizer, tc.learning_rate, &shapes);

    let n_train = train_data.patches.len();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut curve = Vec::with_capacity(tc.epochs + 1);
    let mask = AblationMask::none(cfg.layers, cfg.heads);
    let eval_boundary = |params: &ViTParams, epoch: usize| -> Result<EpochStats> {
        let train_mse = evaluate(params, cfg, &train_data, &mask)?;
        let val_mse = match &val_data {
            Some(v) => evaluate(params, cfg, v, &mask)?,
            None => train_mse,
        };
        Ok(EpochStats {
            epoch,
            train_mse,
            val_mse,
        })
    };
    curve.push(eval_boundary(&params, 0)?);

    for epoch in 0..tc.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(tc.seed, 1000 + epoch as u64));
        order.shuffle(&mut rng);

        for (step, chunk) in order.chunks(tc.batch_size).enumerate() {
            // The tape's replay contract is exercised once per run, on the
            // very first sample; after that the cheaper unchecked backward
            // carries the loop.
            let run_one = |(k, &row): (usize, &usize)| {
                sample_grads(
                    &params,
                    cfg,
                    &train_data.patches[row],
                    train_data.targets.row(row),
                    tc.trainable,
                    epoch == 0 && step == 0 && k == 0,
                )
            };
            #[cfg(feature = "parallel")]
            let per: Vec<(f64, Vec<Tensor>)> = chunk
                .par_iter()
                .enumerate()
                .map(run_one)
                .collect::<Result<Vec<_>>>()?;
            #[cfg(not(feature = "parallel"))]
            let per: Vec<(f64, Vec<Tensor>)> = chunk
                .iter()
                .enumerate()
                .map(run_one)
                .collect::<Result<Vec<_>>>()?;

            // Index-ordered fold: batch loss and averaged gradients.
            let inv_b = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            let mut acc: Vec<Tensor> = shapes
                .iter()
                .map(|s| Tensor::zeros(s.clone()))
                .collect();
            for (loss, grads) in &per {
                batch_loss += loss;
                for (a, gt) in acc.iter_mut().zip(grads.iter()) {
                    let ad = a.data_mut();
                    for (x, &gv) in ad.iter_mut().zip(gt.data().iter()) {
                        *x += gv;
                    }
                }
            }
            batch_loss *= inv_b;
            for a in acc.iter_mut() {
                let ad = a.data_mut();
                for x in ad.iter_mut() {
                    *x *= inv_b;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }

            opt.begin_step();
            for (i, name) in trainable_names.iter().enumerate() {
                let t = params
                    .tensor_mut(name)
                    .ok_or_else(|| Error::invalid(format!("missing tensor {name:?}")))?;
                opt.update_one(i, t, &acc[i])?;
            }
        }

        curve.push(eval_boundary(&params, epoch + 1)?);
    }

    Ok(TrainResult {
        params,
        norm,
        curve,
        trainable_names,
    })
}

/// Writes the loss curve as `epoch,train_mse,val_mse` CSV.
pub fn write_loss_curve(path: &Path, curve: &[EpochStats]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_mse,val_mse")?;
    for row in curve {
        writeln!(f, "{},{:.16e},{:.16e}", row.epoch, row.train_mse, row.val_mse)?;
    }
    f.flush()?;
    Ok(())
}
