//! Central-difference verification of reverse-mode gradients.
//!
//! The checker treats the graph builder as a black box: it evaluates the
//! scalar at coordinate-perturbed points and compares the quotient against
//! whatever gradient the caller claims (usually [`Graph::backward`]'s output,
//! but anything can be injected, which is how the negative control works).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::Tensor;

/// Builder for the scalar under test: given a graph and one node per leaf
/// tensor (in `point` order), produce the scalar output node.
pub type BuildFn<'a> = &'a dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the max relative error.
    pub tol: f64,
    /// Cap on coordinates checked per leaf (`None` = every coordinate).
    /// Sampled deterministically from `seed` when capped.
    pub max_coords_per_leaf: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            max_coords_per_leaf: None,
            seed: 0x5eed,
        }
    }
}

/// Per-leaf outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct LeafCheck {
    pub leaf: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Flat coordinate, analytic value, and numeric value at the worst error.
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
    pub coords_checked: usize,
}

/// Relative error with the floor the whole workbench standardizes on.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks `f`'s reverse-mode gradient at `point` over every coordinate.
pub fn grad_check(f: BuildFn, point: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport> {
    grad_check_with(
        f,
        point,
        &GradCheckOptions {
            h,
            tol,
            ..GradCheckOptions::default()
        },
    )
}

/// [`grad_check`] with coordinate sampling control.
pub fn grad_check_with(
    f: BuildFn,
    point: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    // Analytic gradients from one recorded forward + backward.
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = point
        .iter()
        .map(|t| graph.leaf(t.clone(), true))
        .collect();
    let out = f(&mut graph, &ids)?;
    if graph.value(out).numel() != 1 {
        return Err(Error::Graph(format!(
            "grad_check: output must be scalar, got {:?}",
            graph.value(out).shape()
        )));
    }
    let grads = graph.backward(out)?;
    let claimed: Vec<Tensor> = ids.iter().map(|&id| grads.dense(&graph, id)).collect();

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).data()[0])
    };
    grad_check_against(&eval, &claimed, point, opts)
}

/// Compares caller-supplied `claimed` gradients against central differences
/// of `eval`. This is the primitive the corrupted-gradient negative control
/// exercises: feed it a wrong gradient and the report must fail.
pub fn grad_check_against(
    eval: &dyn Fn(&[Tensor]) -> Result<f64>,
    claimed: &[Tensor],
    point: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if claimed.len() != point.len() {
        return Err(Error::invalid(format!(
            "grad_check_against: {} claimed gradients for {} leaves",
            claimed.len(),
            point.len()
        )));
    }
    let mut work: Vec<Tensor> = point.to_vec();
    let mut leaves = Vec::with_capacity(point.len());
    let mut total = 0usize;
    for (l, leaf) in point.iter().enumerate() {
        if claimed[l].shape() != leaf.shape() {
            return Err(Error::shape(format!(
                "grad_check_against: leaf {l} gradient shape {:?} vs value {:?}",
                claimed[l].shape(),
                leaf.shape()
            )));
        }
        let numel = leaf.numel();
        let coords: Vec<usize> = match opts.max_coords_per_leaf {
            Some(cap) if cap < numel => {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    opts.seed ^ (l as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                );
                let mut idx = rand::seq::index::sample(&mut rng, numel, cap).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..numel).collect(),
        };
        let mut check = LeafCheck {
            leaf: l,
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &c in &coords {
            let orig = work[l].data()[c];
            work[l].data_mut()[c] = orig + opts.h;
            let fp = eval(&work)?;
            work[l].data_mut()[c] = orig - opts.h;
            let fm = eval(&work)?;
            work[l].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let analytic = claimed[l].data()[c];
            let err = rel_err(analytic, numeric);
            if err >= check.max_rel_err {
                check.max_rel_err = err;
                check.worst_coord = c;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        total += coords.len();
        leaves.push(check);
    }
    let max_rel_err = leaves.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        leaves,
        max_rel_err,
        tol: opts.tol,
        pass: max_rel_err <= opts.tol,
        coords_checked: total,
    })
}
