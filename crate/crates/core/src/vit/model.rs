//! The transformer forward pass, built on the tape graph so the same code
//! path serves training (leaves marked trainable), inference (everything
//! constant), and gradient checking (selected tensors injected as external
//! leaves).
//!
//! Head ablation is threaded through the forward itself: an ablated head
//! contributes exact zeros to the concatenation and reports the attention it
//! would compute with zeroed projections — uniform rows — so masking a head
//! and zeroing its projection weights are bit-identical by construction.

use std::collections::HashMap;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{
    grad_check_against, GradCheckOptions, GradCheckReport, Graph, NodeId, Tensor,
};

use super::config::{BlockStyle, FfnActivation, ViTConfig};
use super::params::{LayerParams, ViTParams};

// ---------------------------------------------------------------------------
// Attention storage and ablation masks
// ---------------------------------------------------------------------------

/// Dense per-image attention: `layers × heads × tokens × tokens`, each
/// (layer, head) slice a row-stochastic matrix.
#[derive(Clone, Debug)]
pub struct AttentionTensor {
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    data: Vec<f64>,
}

impl AttentionTensor {
    pub fn zeros(layers: usize, heads: usize, tokens: usize) -> AttentionTensor {
        AttentionTensor {
            layers,
            heads,
            tokens,
            data: vec![0.0; layers * heads * tokens * tokens],
        }
    }

    fn slice_start(&self, l: usize, h: usize) -> usize {
        debug_assert!(l < self.layers && h < self.heads);
        ((l * self.heads) + h) * self.tokens * self.tokens
    }

    pub fn at(&self, l: usize, h: usize, i: usize, j: usize) -> f64 {
        self.data[self.slice_start(l, h) + i * self.tokens + j]
    }

    /// Row `i` of head (`l`, `h`)'s attention matrix.
    pub fn row(&self, l: usize, h: usize, i: usize) -> &[f64] {
        let s = self.slice_start(l, h) + i * self.tokens;
        &self.data[s..s + self.tokens]
    }

    /// The full T×T map for one head.
    pub fn map(&self, l: usize, h: usize) -> Tensor {
        let s = self.slice_start(l, h);
        Tensor::from_parts(
            vec![self.tokens, self.tokens],
            self.data[s..s + self.tokens * self.tokens].to_vec(),
        )
    }

    /// Replaces head (`l`, `h`)'s T×T map. `m` must be tokens×tokens.
    pub fn set_map(&mut self, l: usize, h: usize, m: &Tensor) {
        assert_eq!(m.shape(), [self.tokens, self.tokens]);
        let s = self.slice_start(l, h);
        self.data[s..s + self.tokens * self.tokens].copy_from_slice(m.data());
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Verifies every row is a probability distribution: entries in
    /// [0, 1] and each row summing to 1 within `tol`.
    pub fn check_row_stochastic(&self, tol: f64) -> Result<()> {
        for l in 0..self.layers {
            for h in 0..self.heads {
                for i in 0..self.tokens {
                    let row = self.row(l, h, i);
                    let mut sum = 0.0;
                    for &v in row {
                        if !(-tol..=1.0 + tol).contains(&v) {
                            return Err(Error::invalid(format!(
                                "attention ({l},{h}) row {i} has entry {v} outside [0,1]"
                            )));
                        }
                        sum += v;
                    }
                    if (sum - 1.0).abs() > tol {
                        return Err(Error::invalid(format!(
                            "attention ({l},{h}) row {i} sums to {sum}, not 1±{tol}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-(layer, head) ablation switches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationMask {
    pub layers: usize,
    pub heads: usize,
    cells: Vec<bool>,
}

impl AblationMask {
    pub fn none(layers: usize, heads: usize) -> AblationMask {
        AblationMask {
            layers,
            heads,
            cells: vec![false; layers * heads],
        }
    }

    /// Mask with exactly one head ablated.
    pub fn single(layers: usize, heads: usize, l: usize, h: usize) -> AblationMask {
        let mut m = AblationMask::none(layers, heads);
        m.set(l, h, true);
        m
    }

    pub fn set(&mut self, l: usize, h: usize, ablated: bool) {
        self.cells[l * self.heads + h] = ablated;
    }

    pub fn get(&self, l: usize, h: usize) -> bool {
        self.cells[l * self.heads + h]
    }

    pub fn layer_row(&self, l: usize) -> &[bool] {
        &self.cells[l * self.heads..(l + 1) * self.heads]
    }

    pub fn any(&self) -> bool {
        self.cells.iter().any(|&b| b)
    }
}

// ---------------------------------------------------------------------------
// LoRA
// ---------------------------------------------------------------------------

/// Effective weight `W + α·(A·B)` with `A`: d_out×r and `B`: r×d_in matching
/// `W`: d_out×d_in (here the projections are stored input×output, so d_out is
/// the model width and d_in the head width). `α = 0` skips the product
/// entirely and returns `W` unchanged — a genuinely different code path from
/// computing a zero update.
pub fn lora_apply(w: &Tensor, a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    if alpha == 0.0 {
        return Ok(w.clone());
    }
    check_lora_shapes(w, a, b)?;
    let delta = a.matmul(b)?;
    w.add(&delta.scale(alpha))
}

fn check_lora_shapes(w: &Tensor, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() != w.rows() || b.cols() != w.cols() || a.cols() != b.rows() {
        return Err(Error::shape(format!(
            "lora_apply: W {:?} with A {:?}, B {:?} not conformable",
            w.shape(),
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Graph-side parameter binding
// ---------------------------------------------------------------------------

struct LayerNodes {
    wq: Vec<NodeId>,
    wk: Vec<NodeId>,
    wv: Vec<NodeId>,
    wo: NodeId,
    ln1: (NodeId, NodeId),
    ln2: (NodeId, NodeId),
    ffn: (NodeId, NodeId, NodeId, NodeId),
    lora_q: Vec<(NodeId, NodeId)>,
    lora_v: Vec<(NodeId, NodeId)>,
}

struct ParamNodes {
    embed: NodeId,
    pos: NodeId,
    cls: NodeId,
    layers: Vec<LayerNodes>,
    final_ln: (NodeId, NodeId),
    head_w0: NodeId,
    head_b0: NodeId,
    head_w1: NodeId,
    head_b1: NodeId,
    head_w2: NodeId,
    head_b2: NodeId,
}

/// What the forward pass hands back besides values: the output node and the
/// trainable leaves in canonical order.
pub struct ForwardBuilt {
    pub pred: NodeId,
    pub attn_nodes: Vec<Vec<NodeId>>,
    pub trainable: Vec<(String, NodeId)>,
}

fn bind_layer(
    g: &mut Graph,
    lp: &LayerParams,
    l: usize,
    provide: &mut dyn FnMut(&mut Graph, &str, &Tensor) -> NodeId,
) -> LayerNodes {
    let wq = lp
        .wq
        .iter()
        .enumerate()
        .map(|(h, t)| provide(g, &format!("layer{l}.wq{h}"), t))
        .collect();
    let wk = lp
        .wk
        .iter()
        .enumerate()
        .map(|(h, t)| provide(g, &format!("layer{l}.wk{h}"), t))
        .collect();
    let wv = lp
        .wv
        .iter()
        .enumerate()
        .map(|(h, t)| provide(g, &format!("layer{l}.wv{h}"), t))
        .collect();
    let wo = provide(g, &format!("layer{l}.wo"), &lp.wo);
    let ln1 = (
        provide(g, &format!("layer{l}.ln1.gamma"), &lp.ln1_gamma),
        provide(g, &format!("layer{l}.ln1.beta"), &lp.ln1_beta),
    );
    let ln2 = (
        provide(g, &format!("layer{l}.ln2.gamma"), &lp.ln2_gamma),
        provide(g, &format!("layer{l}.ln2.beta"), &lp.ln2_beta),
    );
    let ffn = (
        provide(g, &format!("layer{l}.ffn.w1"), &lp.ffn_w1),
        provide(g, &format!("layer{l}.ffn.b1"), &lp.ffn_b1),
        provide(g, &format!("layer{l}.ffn.w2"), &lp.ffn_w2),
        provide(g, &format!("layer{l}.ffn.b2"), &lp.ffn_b2),
    );
    let lora_q = lp
        .lora_q
        .iter()
        .enumerate()
        .map(|(h, p)| {
            (
                provide(g, &format!("layer{l}.lora_q{h}.a"), &p.a),
                provide(g, &format!("layer{l}.lora_q{h}.b"), &p.b),
            )
        })
        .collect();
    let lora_v = lp
        .lora_v
        .iter()
        .enumerate()
        .map(|(h, p)| {
            (
                provide(g, &format!("layer{l}.lora_v{h}.a"), &p.a),
                provide(g, &format!("layer{l}.lora_v{h}.b"), &p.b),
            )
        })
        .collect();
    LayerNodes {
        wq,
        wk,
        wv,
        wo,
        ln1,
        ln2,
        ffn,
        lora_q,
        lora_v,
    }
}

fn bind_params(
    g: &mut Graph,
    params: &ViTParams,
    provide: &mut dyn FnMut(&mut Graph, &str, &Tensor) -> NodeId,
) -> ParamNodes {
    let embed = provide(g, "embed", &params.embed);
    let pos = provide(g, "pos", &params.pos);
    let cls = provide(g, "cls", &params.cls);
    let layers = params
        .layers
        .iter()
        .enumerate()
        .map(|(l, lp)| bind_layer(g, lp, l, provide))
        .collect();
    ParamNodes {
        embed,
        pos,
        cls,
        layers,
        final_ln: (
            provide(g, "final_ln.gamma", &params.final_ln_gamma),
            provide(g, "final_ln.beta", &params.final_ln_beta),
        ),
        head_w0: provide(g, "head.w0", &params.head_w0),
        head_b0: provide(g, "head.b0", &params.head_b0),
        head_w1: provide(g, "head.w1", &params.head_w1),
        head_b1: provide(g, "head.b1", &params.head_b1),
        head_w2: provide(g, "head.w2", &params.head_w2),
        head_b2: provide(g, "head.b2", &params.head_b2),
    }
}

// ---------------------------------------------------------------------------
// Graph builders for each stage
// ---------------------------------------------------------------------------

/// CLS + patch tokens + positional table, as graph nodes.
fn patch_embed_graph(
    g: &mut Graph,
    patches: NodeId,
    nodes: &ParamNodes,
) -> Result<NodeId> {
    let e_t = g.transpose(nodes.embed)?;
    let tokens = g.matmul(patches, e_t)?;
    let seq = g.concat_rows(&[nodes.cls, tokens])?;
    g.add(seq, nodes.pos)
}

fn mha_forward_graph(
    g: &mut Graph,
    z: NodeId,
    layer: &LayerNodes,
    cfg: &ViTConfig,
    mask_row: &[bool],
) -> Result<(NodeId, Vec<NodeId>)> {
    let t = g.value(z).rows();
    let hd = cfg.head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attn_ids = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        if mask_row[h] {
            // Zeroed projections give all-zero logits, whose softmax is the
            // exact value exp(0)/T = 1/T in every cell; the head output is
            // attn·0 = 0. Emit those values directly as constants.
            let uniform = Tensor::filled(vec![t, t], 1.0 / t as f64);
            attn_ids.push(g.constant(uniform));
            heads.push(g.constant(Tensor::zeros(vec![t, hd])));
            continue;
        }
        let wq = lora_fold(g, layer.wq[h], layer.lora_q[h], cfg.lora_alpha)?;
        let wv = lora_fold(g, layer.wv[h], layer.lora_v[h], cfg.lora_alpha)?;
        let q = g.matmul(z, wq)?;
        let k = g.matmul(z, layer.wk[h])?;
        let v = g.matmul(z, wv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let logits = g.scale(scores, inv_sqrt)?;
        let attn = g.softmax_rows(logits)?;
        let out = g.matmul(attn, v)?;
        attn_ids.push(attn);
        heads.push(out);
    }
    let concat = g.concat_cols(&heads)?;
    let out = g.matmul(concat, layer.wo)?;
    Ok((out, attn_ids))
}

fn lora_fold(
    g: &mut Graph,
    w: NodeId,
    (a, b): (NodeId, NodeId),
    alpha: f64,
) -> Result<NodeId> {
    if alpha == 0.0 || g.value(a).cols() == 0 {
        return Ok(w);
    }
    let delta = g.matmul(a, b)?;
    let scaled = g.scale(delta, alpha)?;
    g.add(w, scaled)
}

fn ffn_graph(
    g: &mut Graph,
    x: NodeId,
    layer: &LayerNodes,
    cfg: &ViTConfig,
) -> Result<NodeId> {
    let (w1, b1, w2, b2) = layer.ffn;
    let h = g.matmul(x, w1)?;
    let h = g.add_row_broadcast(h, b1)?;
    let a = match cfg.ffn_activation {
        FfnActivation::Gelu => g.gelu(h)?,
        FfnActivation::Relu => g.relu(h)?,
    };
    let o = g.matmul(a, w2)?;
    g.add_row_broadcast(o, b2)
}

fn block_forward_graph(
    g: &mut Graph,
    z: NodeId,
    layer: &LayerNodes,
    cfg: &ViTConfig,
    mask_row: &[bool],
) -> Result<(NodeId, Vec<NodeId>)> {
    match cfg.block_style {
        BlockStyle::PostNorm => {
            // Z' = FFN(LN(Z + MSA(Z))): one residual, post-norm, no FFN
            // residual. The second LN pair exists in the parameter set but
            // this style has no second normalization site, so it is unused.
            let (msa, attn) = mha_forward_graph(g, z, layer, cfg, mask_row)?;
            let s = g.add(z, msa)?;
            let n = g.layer_norm(s, layer.ln1.0, layer.ln1.1, cfg.ln_eps)?;
            let out = ffn_graph(g, n, layer, cfg)?;
            Ok((out, attn))
        }
        BlockStyle::PreNorm => {
            let n1 = g.layer_norm(z, layer.ln1.0, layer.ln1.1, cfg.ln_eps)?;
            let (msa, attn) = mha_forward_graph(g, n1, layer, cfg, mask_row)?;
            let z1 = g.add(z, msa)?;
            let n2 = g.layer_norm(z1, layer.ln2.0, layer.ln2.1, cfg.ln_eps)?;
            let f = ffn_graph(g, n2, layer, cfg)?;
            let out = g.add(z1, f)?;
            Ok((out, attn))
        }
    }
}

/// Column-convention 3-layer MLP on the CLS embedding:
/// `y = W₂·ReLU(W₁·ReLU(W₀·h + b₀) + b₁) + b₂`, computed on row vectors via
/// transposed weights.
fn regression_head_graph(
    g: &mut Graph,
    h_cls: NodeId,
    nodes: &ParamNodes,
) -> Result<NodeId> {
    let w0t = g.transpose(nodes.head_w0)?;
    let t0 = g.matmul(h_cls, w0t)?;
    let t0 = g.add(t0, nodes.head_b0)?;
    let r0 = g.relu(t0)?;
    let w1t = g.transpose(nodes.head_w1)?;
    let t1 = g.matmul(r0, w1t)?;
    let t1 = g.add(t1, nodes.head_b1)?;
    let r1 = g.relu(t1)?;
    let w2t = g.transpose(nodes.head_w2)?;
    let y = g.matmul(r1, w2t)?;
    g.add(y, nodes.head_b2)
}

fn forward_nodes(
    g: &mut Graph,
    nodes: &ParamNodes,
    cfg: &ViTConfig,
    patches: NodeId,
    mask: &AblationMask,
) -> Result<(NodeId, Vec<Vec<NodeId>>)> {
    let mut z = patch_embed_graph(g, patches, nodes)?;
    let mut attn = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let (z_next, a) =
            block_forward_graph(g, z, &nodes.layers[l], cfg, mask.layer_row(l))?;
        z = z_next;
        attn.push(a);
    }
    let n = g.layer_norm(z, nodes.final_ln.0, nodes.final_ln.1, cfg.ln_eps)?;
    let h_cls = g.row(n, 0)?;
    let pred = regression_head_graph(g, h_cls, nodes)?;
    Ok((pred, attn))
}

fn validate_inputs(cfg: &ViTConfig, patches: &Tensor, mask: &AblationMask) -> Result<()> {
    cfg.validate()?;
    let gp = cfg.grid_p();
    if patches.shape() != [gp * gp, cfg.patch_dim()] {
        return Err(Error::shape(format!(
            "patches shape {:?}, expected [{}, {}]",
            patches.shape(),
            gp * gp,
            cfg.patch_dim()
        )));
    }
    if mask.layers != cfg.layers || mask.heads != cfg.heads {
        return Err(Error::shape(format!(
            "ablation mask is {}×{}, model is {}×{}",
            mask.layers, mask.heads, cfg.layers, cfg.heads
        )));
    }
    Ok(())
}

/// Builds the full forward pass on `g`. Parameters named by `trainable`
/// become gradient-carrying leaves (returned in canonical order); everything
/// else is constant. `overrides` substitutes existing graph nodes for named
/// parameters — the hook the gradient checker uses to inject perturbed
/// leaves.
pub fn build_forward(
    g: &mut Graph,
    params: &ViTParams,
    cfg: &ViTConfig,
    patches: &Tensor,
    mask: &AblationMask,
    trainable: &dyn Fn(&str) -> bool,
    overrides: &HashMap<String, NodeId>,
) -> Result<ForwardBuilt> {
    validate_inputs(cfg, patches, mask)?;
    let mut bound: Vec<(String, NodeId)> = Vec::new();
    let nodes = bind_params(g, params, &mut |g, name, t| {
        if let Some(&id) = overrides.get(name) {
            return id;
        }
        if trainable(name) {
            let id = g.leaf(t.clone(), true);
            bound.push((name.to_string(), id));
            id
        } else {
            g.constant(t.clone())
        }
    });
    let patches_id = g.constant(patches.clone());
    let (pred, attn_nodes) = forward_nodes(g, &nodes, cfg, patches_id, mask)?;
    Ok(ForwardBuilt {
        pred,
        attn_nodes,
        trainable: bound,
    })
}

fn collect_attention(
    g: &Graph,
    cfg: &ViTConfig,
    attn_nodes: &[Vec<NodeId>],
) -> AttentionTensor {
    let mut attn = AttentionTensor::zeros(cfg.layers, cfg.heads, cfg.tokens());
    for (l, row) in attn_nodes.iter().enumerate() {
        for (h, &id) in row.iter().enumerate() {
            attn.set_map(l, h, g.value(id));
        }
    }
    attn
}

// ---------------------------------------------------------------------------
// Value-level API
// ---------------------------------------------------------------------------

/// Single-image inference: prediction (1×3) plus the full attention tensor.
pub fn forward_image(
    params: &ViTParams,
    cfg: &ViTConfig,
    patches: &Tensor,
    mask: &AblationMask,
) -> Result<(Tensor, AttentionTensor)> {
    let mut g = Graph::new();
    let built = build_forward(
        &mut g,
        params,
        cfg,
        patches,
        mask,
        &|_| false,
        &HashMap::new(),
    )?;
    let attn = collect_attention(&g, cfg, &built.attn_nodes);
    let pred = g.value(built.pred).clone();
    Ok((pred, attn))
}

/// Batched inference over independent images; returns an N×3 prediction
/// matrix and one attention tensor per image. Images are processed
/// independently (optionally in parallel) and assembled in index order, so
/// results are identical for any worker count.
pub fn forward_batch(
    params: &ViTParams,
    cfg: &ViTConfig,
    patch_list: &[Tensor],
    mask: &AblationMask,
) -> Result<(Tensor, Vec<AttentionTensor>)> {
    #[cfg(feature = "parallel")]
    let per: Vec<(Tensor, AttentionTensor)> = patch_list
        .par_iter()
        .map(|p| forward_image(params, cfg, p, mask))
        .collect::<Result<Vec<_>>>()?;
    #[cfg(not(feature = "parallel"))]
    let per: Vec<(Tensor, AttentionTensor)> = patch_list
        .iter()
        .map(|p| forward_image(params, cfg, p, mask))
        .collect::<Result<Vec<_>>>()?;

    let mut preds = Vec::with_capacity(per.len() * 3);
    let mut attns = Vec::with_capacity(per.len());
    for (p, a) in per {
        preds.extend_from_slice(p.data());
        attns.push(a);
    }
    Ok((Tensor::from_parts(vec![patch_list.len(), 3], preds), attns))
}

/// Patch embedding as a standalone tensor op (CLS prepended, positions
/// added).
pub fn patch_embed(
    patches: &Tensor,
    params: &ViTParams,
    cfg: &ViTConfig,
) -> Result<Tensor> {
    let gp = cfg.grid_p();
    if patches.shape() != [gp * gp, cfg.patch_dim()] {
        return Err(Error::shape(format!(
            "patches shape {:?}, expected [{}, {}]",
            patches.shape(),
            gp * gp,
            cfg.patch_dim()
        )));
    }
    let tokens = patches.matmul_nt(&params.embed)?;
    let seq = Tensor::concat(&[&params.cls, &tokens], 0)?;
    seq.add(&params.pos)
}

/// Multi-head attention as a standalone tensor op: `z` is T×D, `mask_row`
/// has one switch per head. Returns the mixed output (T×D) and each head's
/// attention matrix.
pub fn mha_forward(
    z: &Tensor,
    layer: &LayerParams,
    cfg: &ViTConfig,
    mask_row: &[bool],
) -> Result<(Tensor, Vec<Tensor>)> {
    if mask_row.len() != cfg.heads {
        return Err(Error::shape(format!(
            "mask row has {} entries for {} heads",
            mask_row.len(),
            cfg.heads
        )));
    }
    let mut g = Graph::new();
    let z_id = g.constant(z.clone());
    let nodes = bind_layer(&mut g, layer, 0, &mut |g, _, t| g.constant(t.clone()));
    let (out, attn_ids) = mha_forward_graph(&mut g, z_id, &nodes, cfg, mask_row)?;
    let attn = attn_ids.iter().map(|&id| g.value(id).clone()).collect();
    Ok((g.value(out).clone(), attn))
}

/// One transformer block as a standalone tensor op.
pub fn block_forward(
    z: &Tensor,
    layer: &LayerParams,
    cfg: &ViTConfig,
    mask_row: &[bool],
) -> Result<(Tensor, Vec<Tensor>)> {
    if mask_row.len() != cfg.heads {
        return Err(Error::shape(format!(
            "mask row has {} entries for {} heads",
            mask_row.len(),
            cfg.heads
        )));
    }
    let mut g = Graph::new();
    let z_id = g.constant(z.clone());
    let nodes = bind_layer(&mut g, layer, 0, &mut |g, _, t| g.constant(t.clone()));
    let (out, attn_ids) = block_forward_graph(&mut g, z_id, &nodes, cfg, mask_row)?;
    let attn = attn_ids.iter().map(|&id| g.value(id).clone()).collect();
    Ok((g.value(out).clone(), attn))
}

/// Regression head as a standalone tensor op on a 1×D CLS embedding.
pub fn regression_head(h_cls: &Tensor, params: &ViTParams) -> Result<Tensor> {
    let t0 = h_cls.matmul_nt(&params.head_w0)?.add(&params.head_b0)?;
    let r0 = t0.relu();
    let t1 = r0.matmul_nt(&params.head_w1)?.add(&params.head_b1)?;
    let r1 = t1.relu();
    let y = r1.matmul_nt(&params.head_w2)?;
    y.add(&params.head_b2)
}

/// Zero every projection belonging to head (`l`, `h`) — W^Q, W^K, W^V and
/// both LoRA factors — leaving W^O untouched. This is the weight-surgery
/// counterpart of flipping the ablation mask; the two must agree exactly.
pub fn ablate_weights(params: &ViTParams, l: usize, h: usize) -> Result<ViTParams> {
    if l >= params.layers.len() || h >= params.layers[l].wq.len() {
        return Err(Error::invalid(format!(
            "ablate_weights: no head ({l},{h}) in a {}-layer model",
            params.layers.len()
        )));
    }
    let mut out = params.clone();
    let lp = &mut out.layers[l];
    for t in [&mut lp.wq[h], &mut lp.wk[h], &mut lp.wv[h]] {
        *t = Tensor::zeros(t.shape().to_vec());
    }
    for pair in [&mut lp.lora_q[h], &mut lp.lora_v[h]] {
        pair.a = Tensor::zeros(pair.a.shape().to_vec());
        pair.b = Tensor::zeros(pair.b.shape().to_vec());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Loss plumbing for training and gradient checks
// ---------------------------------------------------------------------------

/// Builds forward + MSE loss on `g`, with `names` injected from `leaf_ids`
/// (same order). Returns the scalar loss node.
fn build_loss_with_leaves(
    g: &mut Graph,
    params: &ViTParams,
    cfg: &ViTConfig,
    patches: &Tensor,
    target: &Tensor,
    names: &[String],
    leaf_ids: &[NodeId],
) -> Result<NodeId> {
    let overrides: HashMap<String, NodeId> = names
        .iter()
        .cloned()
        .zip(leaf_ids.iter().copied())
        .collect();
    let built = build_forward(
        g,
        params,
        cfg,
        patches,
        &AblationMask::none(cfg.layers, cfg.heads),
        &|_| false,
        &overrides,
    )?;
    let t = g.constant(target.clone());
    let diff = g.sub(built.pred, t)?;
    let sq = g.mul_elem(diff, diff)?;
    let s = g.sum_all(sq)?;
    // MSE convention: mean over batch rows of squared residual norms.
    g.scale(s, 1.0 / target.rows() as f64)
}

/// MSE loss and its gradients with respect to the named parameters (returned
/// in `names` order), from one forward/backward pass.
pub fn model_loss_and_grads(
    params: &ViTParams,
    cfg: &ViTConfig,
    patches: &Tensor,
    target: &Tensor,
    names: &[String],
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let leaf_ids: Vec<NodeId> = names
        .iter()
        .map(|n| {
            let t = params
                .named()
                .into_iter()
                .find(|(name, _)| name == n)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {n:?}")))?
                .1
                .clone();
            Ok(g.leaf(t, true))
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = build_loss_with_leaves(&mut g, params, cfg, patches, target, names, &leaf_ids)?;
    let grads = g.backward(loss)?;
    let out = leaf_ids.iter().map(|&id| grads.dense(&g, id)).collect();
    Ok((g.value(loss).data()[0], out))
}

/// Central-difference check of the model's reverse-mode gradients at the
/// current parameters, over the named tensors.
pub fn model_grad_check(
    params: &ViTParams,
    cfg: &ViTConfig,
    patches: &Tensor,
    target: &Tensor,
    names: &[String],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let point: Vec<Tensor> = names
        .iter()
        .map(|n| {
            params
                .named()
                .into_iter()
                .find(|(name, _)| name == n)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::invalid(format!("unknown parameter {n:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (_, claimed) = model_loss_and_grads(params, cfg, patches, target, names)?;
    let eval = model_loss_eval(params, cfg, patches, target, names);
    grad_check_against(&eval, &claimed, &point, opts)
}

/// Value-only loss evaluator over the named tensors, for use with
/// [`grad_check_against`] (including its corrupted-gradient negative
/// control).
pub fn model_loss_eval<'a>(
    params: &'a ViTParams,
    cfg: &'a ViTConfig,
    patches: &'a Tensor,
    target: &'a Tensor,
    names: &'a [String],
) -> impl Fn(&[Tensor]) -> Result<f64> + 'a {
    move |tensors: &[Tensor]| {
        let mut p = params.clone();
        for (name, t) in names.iter().zip(tensors.iter()) {
            let slot = p
                .tensor_mut(name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
            *slot = t.clone();
        }
        let mut g = Graph::new();
        let ids: Vec<NodeId> = Vec::new();
        let loss = build_loss_with_leaves(&mut g, &p, cfg, patches, target, &[], &ids)?;
        Ok(g.value(loss).data()[0])
    }
}
