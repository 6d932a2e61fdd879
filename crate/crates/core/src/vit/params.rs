//! Model parameters: storage layout, deterministic initialization, and a
//! canonical named-tensor ordering shared by the checkpoint format, the
//! optimizer state, and gradient checks.
//!
//! Orientation conventions (all tensors row-major):
//! - `embed` is D×patch_dim (output×input); tokens are computed as
//!   `patches · embedᵀ`.
//! - Attention projections `wq/wk/wv` are D×head_dim and the output
//!   projection `wo` is D×D, used by right-multiplication (`Z · W`).
//! - FFN weights are input×output (`w1`: D×ffn, `w2`: ffn×D) with 1×dim bias
//!   rows.
//! - Regression-head weights are output×input (`w0`: hidden×D, `w1`:
//!   hidden×hidden, `w2`: 3×hidden) matching the column-vector form
//!   `y = W₂·ReLU(W₁·ReLU(W₀·h + b₀) + b₁) + b₂`; biases are 1×dim rows.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::util::sub_seed;

use super::config::ViTConfig;

/// One low-rank adapter: `ΔW = a · b` with `a`: D×r and `b`: r×head_dim.
#[derive(Clone, Debug)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    /// Per-head query/key/value projections, each D×head_dim.
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    /// Output projection D×D.
    pub wo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    /// Per-head adapters on the query and value projections.
    pub lora_q: Vec<LoraPair>,
    pub lora_v: Vec<LoraPair>,
}

#[derive(Clone, Debug)]
pub struct ViTParams {
    pub embed: Tensor,
    pub pos: Tensor,
    pub cls: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_ln_gamma: Tensor,
    pub final_ln_beta: Tensor,
    pub head_w0: Tensor,
    pub head_b0: Tensor,
    pub head_w1: Tensor,
    pub head_b1: Tensor,
    pub head_w2: Tensor,
    pub head_b2: Tensor,
}

/// Normal(0, std) truncated to ±2·std by resampling.
fn trunc_normal(rng: &mut ChaCha8Rng, std: f64, shape: &[usize]) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std > 0");
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let x = dist.sample(rng);
        if x.abs() <= 2.0 * std {
            data.push(x);
        }
    }
    Tensor::from_parts(shape.to_vec(), data)
}

fn plain_normal(rng: &mut ChaCha8Rng, std: f64, shape: &[usize]) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std > 0");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

const INIT_STD: f64 = 0.02;

impl ViTParams {
    /// Deterministic initialization: truncated normal (std 0.02) for all
    /// projection matrices, positional table, and CLS token; ones/zeros for
    /// layer-norm scales/shifts; zeros for biases; plain normal (std 0.02)
    /// for LoRA `a` and zeros for LoRA `b` so adapters start as identity.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Result<ViTParams> {
        cfg.validate()?;
        let d = cfg.width;
        let hd = cfg.head_dim();
        let r = cfg.lora_rank;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0xA11C_E5ED));

        let embed = trunc_normal(&mut rng, INIT_STD, &[d, cfg.patch_dim()]);
        let pos = trunc_normal(&mut rng, INIT_STD, &[cfg.tokens(), d]);
        let cls = trunc_normal(&mut rng, INIT_STD, &[1, d]);

        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let mut wq = Vec::with_capacity(cfg.heads);
            let mut wk = Vec::with_capacity(cfg.heads);
            let mut wv = Vec::with_capacity(cfg.heads);
            for _ in 0..cfg.heads {
                wq.push(trunc_normal(&mut rng, INIT_STD, &[d, hd]));
                wk.push(trunc_normal(&mut rng, INIT_STD, &[d, hd]));
                wv.push(trunc_normal(&mut rng, INIT_STD, &[d, hd]));
            }
            let wo = trunc_normal(&mut rng, INIT_STD, &[d, d]);
            let mut lora_q = Vec::with_capacity(cfg.heads);
            let mut lora_v = Vec::with_capacity(cfg.heads);
            for _ in 0..cfg.heads {
                lora_q.push(LoraPair {
                    a: plain_normal(&mut rng, INIT_STD, &[d, r]),
                    b: Tensor::zeros(vec![r, hd]),
                });
            }
            for _ in 0..cfg.heads {
                lora_v.push(LoraPair {
                    a: plain_normal(&mut rng, INIT_STD, &[d, r]),
                    b: Tensor::zeros(vec![r, hd]),
                });
            }
            layers.push(LayerParams {
                wq,
                wk,
                wv,
                wo,
                ln1_gamma: Tensor::filled(vec![1, d], 1.0),
                ln1_beta: Tensor::zeros(vec![1, d]),
                ln2_gamma: Tensor::filled(vec![1, d], 1.0),
                ln2_beta: Tensor::zeros(vec![1, d]),
                ffn_w1: trunc_normal(&mut rng, INIT_STD, &[d, cfg.ffn_dim]),
                ffn_b1: Tensor::zeros(vec![1, cfg.ffn_dim]),
                ffn_w2: trunc_normal(&mut rng, INIT_STD, &[cfg.ffn_dim, d]),
                ffn_b2: Tensor::zeros(vec![1, d]),
                lora_q,
                lora_v,
            });
        }

        let hh = cfg.head_hidden;
        Ok(ViTParams {
            embed,
            pos,
            cls,
            layers,
            final_ln_gamma: Tensor::filled(vec![1, d], 1.0),
            final_ln_beta: Tensor::zeros(vec![1, d]),
            head_w0: trunc_normal(&mut rng, INIT_STD, &[hh, d]),
            head_b0: Tensor::zeros(vec![1, hh]),
            head_w1: trunc_normal(&mut rng, INIT_STD, &[hh, hh]),
            head_b1: Tensor::zeros(vec![1, hh]),
            head_w2: trunc_normal(&mut rng, INIT_STD, &[cfg.out_dim, hh]),
            head_b2: Tensor::zeros(vec![1, cfg.out_dim]),
        })
    }

    /// Canonical `(name, shape)` listing derived from the config alone. The
    /// checkpoint format, optimizer state, and `named()` all follow this
    /// exact order.
    pub fn shape_spec(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.width;
        let hd = cfg.head_dim();
        let r = cfg.lora_rank;
        let mut out = vec![
            ("embed".to_string(), vec![d, cfg.patch_dim()]),
            ("pos".to_string(), vec![cfg.tokens(), d]),
            ("cls".to_string(), vec![1, d]),
        ];
        for l in 0..cfg.layers {
            for h in 0..cfg.heads {
                out.push((format!("layer{l}.wq{h}"), vec![d, hd]));
            }
            for h in 0..cfg.heads {
                out.push((format!("layer{l}.wk{h}"), vec![d, hd]));
            }
            for h in 0..cfg.heads {
                out.push((format!("layer{l}.wv{h}"), vec![d, hd]));
            }
            out.push((format!("layer{l}.wo"), vec![d, d]));
            out.push((format!("layer{l}.ln1.gamma"), vec![1, d]));
            out.push((format!("layer{l}.ln1.beta"), vec![1, d]));
            out.push((format!("layer{l}.ln2.gamma"), vec![1, d]));
            out.push((format!("layer{l}.ln2.beta"), vec![1, d]));
            out.push((format!("layer{l}.ffn.w1"), vec![d, cfg.ffn_dim]));
            out.push((format!("layer{l}.ffn.b1"), vec![1, cfg.ffn_dim]));
            out.push((format!("layer{l}.ffn.w2"), vec![cfg.ffn_dim, d]));
            out.push((format!("layer{l}.ffn.b2"), vec![1, d]));
            for h in 0..cfg.heads {
                out.push((format!("layer{l}.lora_q{h}.a"), vec![d, r]));
                out.push((format!("layer{l}.lora_q{h}.b"), vec![r, hd]));
            }
            for h in 0..cfg.heads {
                out.push((format!("layer{l}.lora_v{h}.a"), vec![d, r]));
                out.push((format!("layer{l}.lora_v{h}.b"), vec![r, hd]));
            }
        }
        out.push(("final_ln.gamma".to_string(), vec![1, d]));
        out.push(("final_ln.beta".to_string(), vec![1, d]));
        out.push(("head.w0".to_string(), vec![cfg.head_hidden, d]));
        out.push(("head.b0".to_string(), vec![1, cfg.head_hidden]));
        out.push(("head.w1".to_string(), vec![cfg.head_hidden, cfg.head_hidden]));
        out.push(("head.b1".to_string(), vec![1, cfg.head_hidden]));
        out.push(("head.w2".to_string(), vec![cfg.out_dim, cfg.head_hidden]));
        out.push(("head.b2".to_string(), vec![1, cfg.out_dim]));
        out
    }

    /// Total scalar parameter count implied by the config.
    pub fn param_count(cfg: &ViTConfig) -> usize {
        Self::shape_spec(cfg)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// All tensors in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed".to_string(), &self.embed),
            ("pos".to_string(), &self.pos),
            ("cls".to_string(), &self.cls),
        ];
        for (l, lp) in self.layers.iter().enumerate() {
            for (h, t) in lp.wq.iter().enumerate() {
                out.push((format!("layer{l}.wq{h}"), t));
            }
            for (h, t) in lp.wk.iter().enumerate() {
                out.push((format!("layer{l}.wk{h}"), t));
            }
            for (h, t) in lp.wv.iter().enumerate() {
                out.push((format!("layer{l}.wv{h}"), t));
            }
            out.push((format!("layer{l}.wo"), &lp.wo));
            out.push((format!("layer{l}.ln1.gamma"), &lp.ln1_gamma));
            out.push((format!("layer{l}.ln1.beta"), &lp.ln1_beta));
            out.push((format!("layer{l}.ln2.gamma"), &lp.ln2_gamma));
            out.push((format!("layer{l}.ln2.beta"), &lp.ln2_beta));
            out.push((format!("layer{l}.ffn.w1"), &lp.ffn_w1));
            out.push((format!("layer{l}.ffn.b1"), &lp.ffn_b1));
            out.push((format!("layer{l}.ffn.w2"), &lp.ffn_w2));
            out.push((format!("layer{l}.ffn.b2"), &lp.ffn_b2));
            for (h, p) in lp.lora_q.iter().enumerate() {
                out.push((format!("layer{l}.lora_q{h}.a"), &p.a));
                out.push((format!("layer{l}.lora_q{h}.b"), &p.b));
            }
            for (h, p) in lp.lora_v.iter().enumerate() {
                out.push((format!("layer{l}.lora_v{h}.a"), &p.a));
                out.push((format!("layer{l}.lora_v{h}.b"), &p.b));
            }
        }
        out.push(("final_ln.gamma".to_string(), &self.final_ln_gamma));
        out.push(("final_ln.beta".to_string(), &self.final_ln_beta));
        out.push(("head.w0".to_string(), &self.head_w0));
        out.push(("head.b0".to_string(), &self.head_b0));
        out.push(("head.w1".to_string(), &self.head_w1));
        out.push(("head.b1".to_string(), &self.head_b1));
        out.push(("head.w2".to_string(), &self.head_w2));
        out.push(("head.b2".to_string(), &self.head_b2));
        out
    }

    /// Mutable lookup by canonical name.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "embed" => return Some(&mut self.embed),
            "pos" => return Some(&mut self.pos),
            "cls" => return Some(&mut self.cls),
            "final_ln.gamma" => return Some(&mut self.final_ln_gamma),
            "final_ln.beta" => return Some(&mut self.final_ln_beta),
            "head.w0" => return Some(&mut self.head_w0),
            "head.b0" => return Some(&mut self.head_b0),
            "head.w1" => return Some(&mut self.head_w1),
            "head.b1" => return Some(&mut self.head_b1),
            "head.w2" => return Some(&mut self.head_w2),
            "head.b2" => return Some(&mut self.head_b2),
            _ => {}
        }
        let rest = name.strip_prefix("layer")?;
        let dot = rest.find('.')?;
        let l: usize = rest[..dot].parse().ok()?;
        let lp = self.layers.get_mut(l)?;
        let field = &rest[dot + 1..];
        if let Some(h) = field.strip_prefix("wq") {
            return lp.wq.get_mut(h.parse::<usize>().ok()?);
        }
        if let Some(h) = field.strip_prefix("wk") {
            return lp.wk.get_mut(h.parse::<usize>().ok()?);
        }
        if let Some(h) = field.strip_prefix("wv") {
            return lp.wv.get_mut(h.parse::<usize>().ok()?);
        }
        if let Some(spec) = field.strip_prefix("lora_q") {
            let (h, part) = spec.split_once('.')?;
            let pair = lp.lora_q.get_mut(h.parse::<usize>().ok()?)?;
            return match part {
                "a" => Some(&mut pair.a),
                "b" => Some(&mut pair.b),
                _ => None,
            };
        }
        if let Some(spec) = field.strip_prefix("lora_v") {
            let (h, part) = spec.split_once('.')?;
            let pair = lp.lora_v.get_mut(h.parse::<usize>().ok()?)?;
            return match part {
                "a" => Some(&mut pair.a),
                "b" => Some(&mut pair.b),
                _ => None,
            };
        }
        match field {
            "wo" => Some(&mut lp.wo),
            "ln1.gamma" => Some(&mut lp.ln1_gamma),
            "ln1.beta" => Some(&mut lp.ln1_beta),
            "ln2.gamma" => Some(&mut lp.ln2_gamma),
            "ln2.beta" => Some(&mut lp.ln2_beta),
            "ffn.w1" => Some(&mut lp.ffn_w1),
            "ffn.b1" => Some(&mut lp.ffn_b1),
            "ffn.w2" => Some(&mut lp.ffn_w2),
            "ffn.b2" => Some(&mut lp.ffn_b2),
            _ => None,
        }
    }

    /// Rebuild a parameter struct from a `(name → tensor)` map that must
    /// cover the canonical spec exactly (same names, same shapes).
    pub fn from_named(
        cfg: &ViTConfig,
        mut map: std::collections::HashMap<String, Tensor>,
    ) -> Result<ViTParams> {
        let spec = Self::shape_spec(cfg);
        let mut params = ViTParams::init(cfg, 0)?;
        if map.len() != spec.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                spec.len(),
                map.len()
            )));
        }
        for (name, shape) in &spec {
            let t = map.remove(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor {name:?}"))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            *params.tensor_mut(name).expect("spec name resolves") = t;
        }
        Ok(params)
    }
}
