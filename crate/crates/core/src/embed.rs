//! Collaborative embedding distillation.
//!
//! The teacher's item embeddings `z_i` are standardized per column, mapped
//! to the student space by a two-layer projector `g` and fused with a
//! learnable per-item offset: `e_i = g(z_i) + b_i`. The hint baseline keeps
//! the free table and pulls it towards `g(z_i)` with a squared-error term.

use distillrec_autodiff::{Graph, NodeId, ParamStore, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::seed;

pub const TEACHER_Z: &str = "teacher.z";
pub const OFFSET: &str = "item.offset";
pub const W1: &str = "proj.w1";
pub const B1: &str = "proj.b1";
pub const W2: &str = "proj.w2";
pub const B2: &str = "proj.b2";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// `e = g(z) + b`
    OffsetSum,
    /// `e = g(z)`
    OffsetDisabled,
    /// Free table plus an alignment loss towards `g(z)`.
    HintAlign,
    /// Free table only.
    #[default]
    None,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "offset-sum" => Ok(Self::OffsetSum),
            "offset-disabled" => Ok(Self::OffsetDisabled),
            "hint-align" => Ok(Self::HintAlign),
            "none" => Ok(Self::None),
            _ => Err(CoreError::Config(format!(
                "embed.mode `{s}` is not one of offset-sum, offset-disabled, hint-align, none"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::OffsetSum => "offset-sum",
            Self::OffsetDisabled => "offset-disabled",
            Self::HintAlign => "hint-align",
            Self::None => "none",
        }
    }

    /// Whether the free item table is replaced by fused embeddings.
    pub fn replaces_table(self) -> bool {
        matches!(self, Self::OffsetSum | Self::OffsetDisabled)
    }

    pub fn uses_teacher(self) -> bool {
        self != Self::None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Weight of the alignment loss in hint mode.
    pub lambda_h: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::OffsetSum,
            lambda_h: 1.0,
        }
    }
}

/// Zero mean and unit variance per column; constant columns become zero.
pub fn standardize_columns(z: &Tensor) -> Tensor {
    let (n, d) = (z.rows(), z.cols());
    let mut out = z.clone();
    for c in 0..d {
        let mean = (0..n).map(|r| z.row(r)[c]).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (z.row(r)[c] - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        for r in 0..n {
            out.row_mut(r)[c] = (z.row(r)[c] - mean) * inv;
        }
    }
    out
}

/// Projector graph: `relu(z·W1 + b1)·W2 + b2`.
pub fn project_node(g: &mut Graph, z: NodeId) -> NodeId {
    let w1 = g.param(W1);
    let b1 = g.param(B1);
    let w2 = g.param(W2);
    let b2 = g.param(B2);
    let h = g.matmul(z, w1);
    let h = g.add_row(h, b1);
    let h = g.relu(h);
    let h = g.label(h, "proj.hidden");
    let out = g.matmul(h, w2);
    g.add_row(out, b2)
}

/// Projects the rows of `z` with the projector weights in `params`.
pub fn project(params: &ParamStore, z: &Tensor) -> Result<Tensor> {
    let w1 = params.require(W1)?;
    if z.rank() != 2 || z.cols() != w1.rows() {
        return Err(CoreError::invalid(format!(
            "projector expects {} input columns, got shape {:?}",
            w1.rows(),
            z.shape()
        )));
    }
    let mut g = Graph::new(false);
    let zn = g.constant(z.clone());
    let out = project_node(&mut g, zn);
    g.forward(params, &Default::default())?;
    Ok(g.value(out)?.clone())
}

/// Fused item table for the offset modes.
pub fn fused_table_node(g: &mut Graph, mode: FusionMode) -> NodeId {
    let z = g.param(TEACHER_Z);
    let zp = project_node(g, z);
    match mode {
        FusionMode::OffsetSum => {
            let b = g.param(OFFSET);
            g.add(zp, b)
        }
        _ => zp,
    }
}

/// Elementwise fusion of precomputed rows.
pub fn fuse(zp: &[f64], b: &[f64], mode: FusionMode) -> Vec<f64> {
    match mode {
        FusionMode::OffsetSum => zp.iter().zip(b).map(|(x, y)| x + y).collect(),
        _ => zp.to_vec(),
    }
}

/// Mean squared difference over `items × dims` between two tables.
pub fn hint_loss_node(g: &mut Graph, student: NodeId, projected: NodeId, items: &[usize]) -> NodeId {
    let e = g.gather(student, items.to_vec());
    let p = g.gather(projected, items.to_vec());
    let diff = g.sub(e, p);
    let sq = g.mul(diff, diff);
    let m = g.mean(sq);
    g.label(m, "hint.loss")
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

/// Adds the teacher table and projector (and offset) to `params`, removing
/// the free table in offset modes. `z` must already be standardized.
pub(crate) fn attach_params(
    params: &mut ParamStore,
    z: &Tensor,
    dim: usize,
    mode: FusionMode,
    seed_value: u64,
) -> Result<()> {
    if !mode.uses_teacher() {
        return Ok(());
    }
    let mut rng = seed::rng(seed_value, &[seed::ATTACH]);
    let dt = z.cols();
    params.insert(TEACHER_Z, z.clone())?;
    params.set_frozen(TEACHER_Z, true)?;
    params.insert(W1, normal(dt, dim, (2.0 / dt as f64).sqrt(), &mut rng))?;
    params.insert(B1, Tensor::zeros(&[dim]))?;
    params.insert(W2, normal(dim, dim, (1.0 / dim as f64).sqrt(), &mut rng))?;
    params.insert(B2, Tensor::zeros(&[dim]))?;
    if mode == FusionMode::OffsetSum {
        params.insert(OFFSET, Tensor::zeros(&[z.rows(), dim]))?;
    }
    if mode.replaces_table() {
        params.remove(crate::student::ITEM_EMB);
    }
    Ok(())
}
