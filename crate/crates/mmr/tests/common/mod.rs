//! Independent naive-loop oracles shared by the integration tests.
//!
//! Everything here is written as straight-line scalar loops over plain
//! slices, deliberately avoiding the library's tensor and tape code so a
//! bug cannot hide on both sides of a comparison.

#![allow(dead_code)]

pub type Mat = Vec<Vec<f64>>;

pub fn mat_from(rows: usize, cols: usize, data: &[f64]) -> Mat {
    assert_eq!(rows * cols, data.len());
    (0..rows).map(|i| data[i * cols..(i + 1) * cols].to_vec()).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// x (r x c) times w (c x d) plus bias (d), row-wise.
pub fn naive_affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let (c, d) = (w.len(), b.len());
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), c);
            (0..d).map(|j| b[j] + (0..c).map(|q| row[q] * w[q][j]).sum::<f64>()).collect()
        })
        .collect()
}

pub fn naive_leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        0.01 * x
    }
}

pub fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// R_ij = phi(k_i) . gamma(k_j), optional row softmax.
pub fn naive_affinity(
    nodes: &Mat,
    phi_w: &Mat,
    phi_b: &[f64],
    gamma_w: &Mat,
    gamma_b: &[f64],
    row_softmax: bool,
) -> Mat {
    let p = naive_affine(nodes, phi_w, phi_b);
    let q = naive_affine(nodes, gamma_w, gamma_b);
    let k = nodes.len();
    let mut r: Mat = (0..k)
        .map(|i| (0..k).map(|j| p[i].iter().zip(&q[j]).map(|(a, b)| a * b).sum()).collect())
        .collect();
    if row_softmax {
        r = r.iter().map(|row| naive_softmax(row)).collect();
    }
    r
}

/// W_r (R V W_g) + V, optional Leaky ReLU.
pub fn naive_gcn_layer(v: &Mat, r: &Mat, w_g: &Mat, w_r: &Mat, activation: bool) -> Mat {
    let k = v.len();
    let d = v[0].len();
    let mut vw = vec![vec![0.0; d]; k];
    for i in 0..k {
        for j in 0..d {
            for q in 0..d {
                vw[i][j] += v[i][q] * w_g[q][j];
            }
        }
    }
    let mut msg = vec![vec![0.0; d]; k];
    for i in 0..k {
        for j in 0..d {
            for q in 0..k {
                msg[i][j] += r[i][q] * vw[q][j];
            }
        }
    }
    let mut out = vec![vec![0.0; d]; k];
    for i in 0..k {
        for j in 0..d {
            for q in 0..k {
                out[i][j] += w_r[i][q] * msg[q][j];
            }
            out[i][j] += v[i][j];
            if activation {
                out[i][j] = naive_leaky(out[i][j]);
            }
        }
    }
    out
}

pub struct NaiveGcnLayer {
    pub phi_w: Mat,
    pub phi_b: Vec<f64>,
    pub gamma_w: Mat,
    pub gamma_b: Vec<f64>,
    pub w_g: Mat,
    pub w_r: Mat,
}

/// The full recurrence: per layer rebuild R (or reuse the first in shared
/// mode) and apply the residual convolution, activating hidden layers only.
pub fn naive_mmr(
    v0: &Mat,
    layers: &[NaiveGcnLayer],
    shared_affinity: bool,
    row_softmax: bool,
    activate_hidden: bool,
) -> Mat {
    let mut v = v0.clone();
    let mut shared: Option<Mat> = None;
    for (i, l) in layers.iter().enumerate() {
        let r = match (&shared, shared_affinity) {
            (Some(r), true) => r.clone(),
            _ => {
                let r = naive_affinity(&v, &l.phi_w, &l.phi_b, &l.gamma_w, &l.gamma_b, row_softmax);
                if shared_affinity {
                    shared = Some(r.clone());
                }
                r
            }
        };
        let act = activate_hidden && i + 1 < layers.len();
        v = naive_gcn_layer(&v, &r, &l.w_g, &l.w_r, act);
    }
    v
}

pub fn naive_avg_pool(v: &Mat) -> Vec<f64> {
    let k = v.len() as f64;
    let d = v[0].len();
    (0..d).map(|j| v.iter().map(|row| row[j]).sum::<f64>() / k).collect()
}

pub fn naive_attention_pool(v: &Mat, scorer_w: &[f64], scorer_b: f64) -> Vec<f64> {
    let scores: Vec<f64> =
        v.iter().map(|row| scorer_b + row.iter().zip(scorer_w).map(|(a, b)| a * b).sum::<f64>()).collect();
    let weights = naive_softmax(&scores);
    let d = v[0].len();
    (0..d).map(|j| v.iter().zip(&weights).map(|(row, w)| w * row[j]).sum()).collect()
}

/// Mean negative log-likelihood with the 1e-12 clamp.
pub fn naive_cross_entropy(probs: &Mat, labels: &[usize]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    let n = labels.len() as f64;
    -probs.iter().zip(labels).map(|(row, &l)| row[l].max(1e-12).ln()).sum::<f64>() / n
}

/// AP straight from the definition, without sorting: for each relevant
/// item, precision at its rank is computed by counting how many items are
/// ranked at or above it (higher score, or equal score with lower index).
pub fn brute_force_ap(scores: &[f64], relevance: &[bool]) -> f64 {
    let n = scores.len();
    let total: usize = relevance.iter().filter(|&&r| r).count();
    assert!(total > 0);
    let ranked_before = |i: usize| -> usize {
        (0..n)
            .filter(|&j| j != i && (scores[j] > scores[i] || (scores[j] == scores[i] && j < i)))
            .count()
    };
    // accumulate in rank order so the sum matches a sorted evaluation
    // term for term, not just up to reassociation
    let mut terms: Vec<(usize, f64)> = (0..n)
        .filter(|&i| relevance[i])
        .map(|i| {
            let rank = ranked_before(i) + 1;
            let hits = (0..n).filter(|&j| relevance[j] && ranked_before(j) < rank).count();
            (rank, hits as f64 / rank as f64)
        })
        .collect();
    terms.sort_by_key(|&(rank, _)| rank);
    terms.iter().map(|&(_, p)| p).sum::<f64>() / total as f64
}

pub fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}
