//! Node projection, late fusion and the classification objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-12;

/// How the k enriched nodes collapse to a single vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Projection {
    #[default]
    AvgPool,
    Attention,
}

/// Which vector downstream consumers (retrieval) use as the descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorMode {
    #[default]
    Probs,
    Logits,
}

/// Optional attention scorer for `Projection::Attention`.
#[derive(Debug, Clone, Copy)]
pub struct NodeScorerVars {
    /// [D_node] weights plus scalar bias
    pub w: Var,
    pub b: Var,
}

/// Collapses V_G (k x D_node) into V_Gf. Avg-pool is the column mean;
/// attention mode softmax-weights rows by a learned scalar score per node.
pub fn node_project(
    t: &mut Tape,
    v_g: Var,
    mode: Projection,
    scorer: Option<NodeScorerVars>,
) -> Result<Var> {
    match mode {
        Projection::AvgPool => t.mean_axis(v_g, 0),
        Projection::Attention => {
            let s = scorer.ok_or_else(|| {
                Error::InvalidArgument("attention projection requires a node scorer".into())
            })?;
            let scores = t.matmul(v_g, s.w)?;
            let scores = t.add_scalar(scores, s.b)?;
            let weights = t.softmax(scores)?;
            let weighted = t.broadcast_mul(v_g, weights)?;
            t.sum_axis(weighted, 0)
        }
    }
}

/// Concatenates the branch vectors into F, applies dropout in train mode,
/// then the final FC and softmax. The last layer carries no Leaky ReLU.
/// Returns (logits, probs).
pub fn fuse_classify(
    t: &mut Tape,
    parts: &[Var],
    cls_w: Var,
    cls_b: Var,
    dropout_p: f64,
    train: bool,
    rng: &mut Rng,
) -> Result<(Var, Var)> {
    let mut fused = *parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("fuse_classify: no input branches".into()))?;
    for &p in &parts[1..] {
        fused = t.concat_last(fused, p)?;
    }
    let fused = t.dropout(fused, dropout_p, train, rng)?;
    let logits = t.affine(fused, cls_w, cls_b)?;
    let probs = t.softmax(logits)?;
    Ok((logits, probs))
}

/// Tape-recorded mean cross entropy over per-sample probability vectors:
/// J = -(1/N) sum_n log p[n, label_n], probabilities clamped at 1e-12.
pub fn cross_entropy_on_tape(t: &mut Tape, probs: &[Var], labels: &[usize]) -> Result<Var> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::InvalidArgument("cross_entropy: batch and labels must match and be nonempty".into()));
    }
    let mut total: Option<Var> = None;
    for (&pv, &label) in probs.iter().zip(labels) {
        let c = t.value(pv).len();
        if label >= c {
            return Err(Error::InvalidArgument(format!("cross_entropy: label {label} >= C {c}")));
        }
        let logp = t.log_clamped(pv, PROB_CLAMP)?;
        let mut onehot = Tensor::zeros(vec![c]);
        onehot.data_mut()[label] = 1.0;
        let oh = t.constant(onehot);
        let picked = t.mul(logp, oh)?;
        let picked = t.sum_axis(picked, 0)?;
        total = Some(match total {
            Some(acc) => t.add(acc, picked)?,
            None => picked,
        });
    }
    t.scale(total.expect("nonempty batch"), -1.0 / labels.len() as f64)
}

/// Plain (non-tape) cross entropy over an N x C probability matrix.
pub fn cross_entropy_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rank() != 2 || probs.rows() != labels.len() || labels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy: probs {:?} vs {} labels",
            probs.shape(),
            labels.len()
        )));
    }
    let c = probs.cols();
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::InvalidArgument(format!("cross_entropy: label {label} >= C {c}")));
        }
        total -= probs.at(i, label).max(PROB_CLAMP).ln();
    }
    Ok(total / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn identical_rows_project_to_the_row_in_both_modes() {
        let row = vec![1.0, -2.0, 0.5];
        let data: Vec<f64> = row.iter().cloned().cycle().take(12).collect();
        let vg_t = Tensor::matrix(4, 3, data).unwrap();

        let mut t = Tape::new();
        let vg = t.leaf(vg_t.clone());
        let avg = node_project(&mut t, vg, Projection::AvgPool, None).unwrap();
        for (a, b) in t.value(avg).data().iter().zip(&row) {
            assert!((a - b).abs() < 1e-15);
        }

        let mut rng = Rng::new(1);
        let mut t = Tape::new();
        let vg = t.leaf(vg_t);
        let sw = t.leaf(randn(vec![3], &mut rng));
        let sb = t.leaf(Tensor::scalar(0.2));
        let att = node_project(&mut t, vg, Projection::Attention, Some(NodeScorerVars { w: sw, b: sb })).unwrap();
        for (a, b) in t.value(att).data().iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_scorer_attention_equals_avg_pool() {
        let mut rng = Rng::new(2);
        let vg_t = randn(vec![5, 8], &mut rng);
        let mut t = Tape::new();
        let vg = t.leaf(vg_t.clone());
        let avg = node_project(&mut t, vg, Projection::AvgPool, None).unwrap();
        let sw = t.leaf(Tensor::zeros(vec![8]));
        let sb = t.leaf(Tensor::scalar(0.0));
        let att = node_project(&mut t, vg, Projection::Attention, Some(NodeScorerVars { w: sw, b: sb })).unwrap();
        for (a, b) in t.value(att).data().iter().zip(t.value(avg).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_pool_matches_column_mean_oracle() {
        let mut rng = Rng::new(3);
        let vg_t = randn(vec![5, 8], &mut rng);
        let mut t = Tape::new();
        let vg = t.leaf(vg_t.clone());
        let out = node_project(&mut t, vg, Projection::AvgPool, None).unwrap();
        for j in 0..8 {
            let mean: f64 = (0..5).map(|i| vg_t.at(i, j)).sum::<f64>() / 5.0;
            assert!((t.value(out).data()[j] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn avg_pool_is_linear() {
        let mut rng = Rng::new(4);
        let x = randn(vec![4, 6], &mut rng);
        let y = randn(vec![4, 6], &mut rng);
        let (a, b) = (2.5, -0.75);
        let combo = Tensor::new(
            vec![4, 6],
            x.data().iter().zip(y.data()).map(|(xv, yv)| a * xv + b * yv).collect(),
        )
        .unwrap();
        let run = |m: &Tensor| -> Tensor {
            let mut t = Tape::new();
            let v = t.leaf(m.clone());
            let out = node_project(&mut t, v, Projection::AvgPool, None).unwrap();
            t.value(out).clone()
        };
        let (px, py, pc) = (run(&x), run(&y), run(&combo));
        for j in 0..6 {
            let expect = a * px.data()[j] + b * py.data()[j];
            assert!((pc.data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_mode_is_rng_independent_and_probs_sum_to_one() {
        let mut rng = Rng::new(5);
        let ga = randn(vec![6], &mut rng);
        let vgf = randn(vec![6], &mut rng);
        let w = randn(vec![12, 4], &mut rng);
        let bias = randn(vec![4], &mut rng);
        let run = |seed: u64| -> Tensor {
            let mut t = Tape::new();
            let parts = [t.leaf(ga.clone()), t.leaf(vgf.clone())];
            let cw = t.leaf(w.clone());
            let cb = t.leaf(bias.clone());
            let mut r = Rng::new(seed);
            let (_, probs) = fuse_classify(&mut t, &parts, cw, cb, 0.3, false, &mut r).unwrap();
            t.value(probs).clone()
        };
        let a = run(1);
        let b = run(999);
        assert_eq!(a, b);
        assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logit_shift_leaves_probs_unchanged() {
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::from_vec(vec![0.3, -1.2, 2.0]));
        let p1 = t.softmax(logits).unwrap();
        let shifted = t.leaf(Tensor::from_vec(vec![0.3 + 7.0, -1.2 + 7.0, 2.0 + 7.0]));
        let p2 = t.softmax(shifted).unwrap();
        for (a, b) in t.value(p1).data().iter().zip(t.value(p2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        let uniform = Tensor::matrix(1, 4, vec![0.25; 4]).unwrap();
        assert!((cross_entropy_loss(&uniform, &[2]).unwrap() - 4.0f64.ln()).abs() < 1e-12);

        let onehot = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        assert!(cross_entropy_loss(&onehot, &[1]).unwrap().abs() < 1e-10);

        let p = Tensor::matrix(1, 2, vec![0.7, 0.3]).unwrap();
        assert!((cross_entropy_loss(&p, &[0]).unwrap() - (-(0.7f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let p = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        assert!(cross_entropy_loss(&p, &[2]).is_err());
    }

    #[test]
    fn tape_cross_entropy_matches_plain() {
        let mut rng = Rng::new(9);
        let mut t = Tape::new();
        let mut prob_vars = Vec::new();
        let mut flat = Vec::new();
        let labels = [0usize, 2, 1];
        for _ in 0..3 {
            let logits = t.leaf(randn(vec![3], &mut rng));
            let p = t.softmax(logits).unwrap();
            flat.extend_from_slice(t.value(p).data());
            prob_vars.push(p);
        }
        let loss = cross_entropy_on_tape(&mut t, &prob_vars, &labels).unwrap();
        let plain = cross_entropy_loss(&Tensor::matrix(3, 3, flat).unwrap(), &labels).unwrap();
        assert!((t.value(loss).item() - plain).abs() < 1e-12);
    }

    #[test]
    fn grad_of_ce_wrt_logits_is_probs_minus_onehot_over_n() {
        let mut rng = Rng::new(11);
        let n = 4;
        let labels = [1usize, 0, 2, 2];
        let mut t = Tape::new();
        let mut logit_vars = Vec::new();
        let mut prob_vars = Vec::new();
        for _ in 0..n {
            let lv = t.leaf(randn(vec![3], &mut rng));
            let p = t.softmax(lv).unwrap();
            logit_vars.push(lv);
            prob_vars.push(p);
        }
        let loss = cross_entropy_on_tape(&mut t, &prob_vars, &labels).unwrap();
        let g = t.backward(loss).unwrap();
        for (i, (&lv, &pv)) in logit_vars.iter().zip(prob_vars.iter()).enumerate() {
            for c in 0..3 {
                let y = if labels[i] == c { 1.0 } else { 0.0 };
                let expect = (t.value(pv).data()[c] - y) / n as f64;
                assert!(
                    (g.get(lv).data()[c] - expect).abs() < 1e-12,
                    "sample {i} class {c}"
                );
            }
        }
    }
}
