//! The four input branches: global encoder with self-attention, local
//! feature encoder, text encoder, positional encoder, plus node assembly.
//!
//! Each function records onto an active tape and takes its weights as
//! `Var` handles, so the same code serves forward evaluation and
//! end-to-end training.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Weights of the global branch.
#[derive(Debug, Clone, Copy)]
pub struct GlobalEncoderVars {
    /// attention score projection, [D_g] plus scalar bias
    pub attn_w: Var,
    pub attn_b: Var,
    /// output FC, D_g x D_out plus [D_out] bias
    pub fc_w: Var,
    pub fc_b: Var,
}

/// Self-attended global descriptor.
///
/// Scores come from a 1x1 projection of each spatial position, the softmax
/// over all H*W positions gives the attention mask, the mask-weighted map
/// is added back onto the input, spatially averaged and passed through the
/// FC with Leaky ReLU. The spatial mean between the attention residual and
/// the FC is the reduction that reconciles the H x W x D input with the
/// 1 x D output.
///
/// `global_map` must be an (H*W) x D_g matrix. Returns (G_fa, attn_mask).
pub fn global_encode(t: &mut Tape, global_map: Var, p: &GlobalEncoderVars) -> Result<(Var, Var)> {
    let scores = t.matmul(global_map, p.attn_w)?;
    let scores = t.add_scalar(scores, p.attn_b)?;
    let mask = t.softmax(scores)?;
    let weighted = t.broadcast_mul(global_map, mask)?;
    let attended = t.add(global_map, weighted)?;
    let pooled = t.mean_axis(attended, 0)?;
    let fc = t.affine(pooled, p.fc_w, p.fc_b)?;
    let g_fa = t.leaky_relu(fc)?;
    Ok((g_fa, mask))
}

/// Global branch without self-attention: spatial mean straight into the FC.
pub fn global_encode_raw(t: &mut Tape, global_map: Var, fc_w: Var, fc_b: Var) -> Result<Var> {
    let pooled = t.mean_axis(global_map, 0)?;
    let fc = t.affine(pooled, fc_w, fc_b)?;
    t.leaky_relu(fc)
}

/// Row-wise projection of region features or text embeddings into the
/// shared D_p space: affine then Leaky ReLU.
pub fn modal_encode(t: &mut Tape, rows: Var, w: Var, b: Var) -> Result<Var> {
    let fc = t.affine(rows, w, b)?;
    t.leaky_relu(fc)
}

/// Encodes normalized (x1, y1, x2, y2) boxes into b-wide positional codes.
/// Rows must already be ordered region boxes first, text boxes second.
pub fn positional_encode(t: &mut Tape, bboxes: Var, w: Var, b: Var) -> Result<Var> {
    let v = t.value(bboxes);
    if v.rank() != 2 || v.cols() != 4 {
        return Err(Error::ShapeMismatch {
            op: "positional-encode",
            detail: format!("expected [*, 4] boxes, got {:?}", v.shape()),
        });
    }
    if v.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::InvalidArgument(
            "positional_encode: bbox coordinates must lie in [0,1]".into(),
        ));
    }
    let fc = t.affine(bboxes, w, b)?;
    t.leaky_relu(fc)
}

/// Stacks encoded region rows over encoded text rows and concatenates each
/// with its positional code: row i = [modal_i ; positional_i], k = n + m.
pub fn assemble_nodes(t: &mut Tape, modal_rows: Var, positional_rows: Var) -> Result<Var> {
    let (mv, pv) = (t.value(modal_rows), t.value(positional_rows));
    if mv.rank() != 2 || pv.rank() != 2 || mv.rows() != pv.rows() {
        return Err(Error::ShapeMismatch {
            op: "assemble-nodes",
            detail: format!("modal {:?} vs positional {:?}", mv.shape(), pv.shape()),
        });
    }
    t.concat_last(modal_rows, positional_rows)
}
