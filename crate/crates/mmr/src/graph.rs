//! Multi-Modal Reasoning: learned affinity matrix and the residual GCN
//! stack that produces relationship-enhanced nodes.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tape::{Tape, Var};

/// How the affinity matrix is normalized. Raw is the default; row softmax
/// is an opt-in stability mode for large node counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AffinityNorm {
    #[default]
    Raw,
    RowSoftmax,
}

/// Weights of one GCN layer.
#[derive(Debug, Clone, Copy)]
pub struct GcnLayerVars {
    /// affinity projections phi and gamma: D_node x D_a plus bias
    pub phi_w: Var,
    pub phi_b: Var,
    pub gamma_w: Var,
    pub gamma_b: Var,
    /// D_node x D_node
    pub w_g: Var,
    /// k x k residual weights
    pub w_r: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct MmrOptions {
    /// reuse the first layer's affinity matrix for every layer
    pub shared_affinity: bool,
    pub normalize: AffinityNorm,
    /// Leaky ReLU after every layer except the last
    pub activate_hidden: bool,
}

impl Default for MmrOptions {
    fn default() -> Self {
        MmrOptions { shared_affinity: false, normalize: AffinityNorm::Raw, activate_hidden: true }
    }
}

/// R_ij = phi(k_i) . gamma(k_j) with phi, gamma affine row-wise maps and
/// no activation. Row-softmax mode normalizes each row afterwards.
pub fn affinity(
    t: &mut Tape,
    nodes: Var,
    phi_w: Var,
    phi_b: Var,
    gamma_w: Var,
    gamma_b: Var,
    normalize: AffinityNorm,
) -> Result<Var> {
    let p = t.affine(nodes, phi_w, phi_b)?;
    let q = t.affine(nodes, gamma_w, gamma_b)?;
    let qt = t.transpose(q)?;
    let r = t.matmul(p, qt)?;
    match normalize {
        AffinityNorm::Raw => Ok(r),
        AffinityNorm::RowSoftmax => t.softmax(r),
    }
}

/// One residual graph convolution: W_r (R V W_g) + V, optionally followed
/// by Leaky ReLU.
pub fn gcn_layer(t: &mut Tape, v_in: Var, r: Var, w_g: Var, w_r: Var, activation: bool) -> Result<Var> {
    let vw = t.matmul(v_in, w_g)?;
    let msg = t.matmul(r, vw)?;
    let res = t.matmul(w_r, msg)?;
    let out = t.add(res, v_in)?;
    if activation {
        t.leaky_relu(out)
    } else {
        Ok(out)
    }
}

/// Runs the full stack: per layer, (re)build the affinity matrix and apply
/// the residual convolution. Hidden layers get Leaky ReLU when
/// `activate_hidden` is set; the last layer never does.
pub fn mmr_forward(t: &mut Tape, v0: Var, layers: &[GcnLayerVars], opts: &MmrOptions) -> Result<Var> {
    let mut v = v0;
    let mut shared_r: Option<Var> = None;
    for (i, layer) in layers.iter().enumerate() {
        let r = match (opts.shared_affinity, shared_r) {
            (true, Some(r)) => r,
            _ => {
                let r = affinity(t, v, layer.phi_w, layer.phi_b, layer.gamma_w, layer.gamma_b, opts.normalize)?;
                if opts.shared_affinity {
                    shared_r = Some(r);
                }
                r
            }
        };
        let act = opts.activate_hidden && i + 1 < layers.len();
        v = gcn_layer(t, v, r, layer.w_g, layer.w_r, act)?;
    }
    Ok(v)
}
