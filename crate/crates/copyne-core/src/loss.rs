//! Training losses: per-step transcription loss, CTC forward-algorithm loss,
//! copy loss, and their weighted combination.
//!
//! Each loss exists twice: a plain f64 function over materialized
//! distributions (the reference surface, also used for logging), and a graph
//! builder that composes the same computation from autodiff primitives for
//! training. The unit tests pin the two routes to each other and to
//! independent oracles.

use crate::autodiff::{Graph, NodeId, Tensor, NEG_HUGE};
use crate::error::{Error, Result};
use crate::vocab::BLANK;

/// Floor applied to supervised probabilities before the log.
pub const PROB_FLOOR: f64 = 1e-300;

/// A summed negative-log loss plus the number of probabilities that had to be
/// clamped to the floor (nonzero only for degenerate inputs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub value: f64,
    pub clamped: usize,
}

/// Negative log-likelihood of the target at each step:
/// -sum_u log P(target_u | step u). One distribution per step.
pub fn trans_loss(dists: &[Vec<f64>], targets: &[usize]) -> StepLoss {
    assert_eq!(dists.len(), targets.len(), "one distribution per target");
    let mut value = 0.0;
    let mut clamped = 0;
    for (dist, &t) in dists.iter().zip(targets.iter()) {
        let mut p = dist[t];
        if p < PROB_FLOOR {
            p = PROB_FLOOR;
            clamped += 1;
        }
        value -= p.ln();
    }
    StepLoss { value, clamped }
}

/// Negative log-likelihood of the copy target at each step. `sigma[u]` is a
/// dictionary index (0 = copy nothing) into the step's copy distribution.
pub fn copy_loss(dists: &[Vec<f64>], sigma: &[usize]) -> StepLoss {
    trans_loss(dists, sigma)
}

/// Minimum frame count CTC needs for a label sequence: one frame per label
/// plus a separating blank between equal consecutive labels.
pub fn ctc_min_frames(y: &[u32]) -> usize {
    y.len() + y.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC loss by the forward dynamic program in log space over the
/// blank-augmented label sequence. `log_probs` is one log-distribution over
/// the full vocabulary (blank included) per frame.
pub fn ctc_loss(log_probs: &[Vec<f64>], y: &[u32]) -> Result<f64> {
    let t_len = log_probs.len();
    let min = ctc_min_frames(y);
    if t_len < min {
        return Err(Error::NoValidAlignment { frames: t_len, min_frames: min });
    }
    let aug = augment_labels(y);
    let s_len = aug.len();
    let mut alpha = vec![NEG_HUGE; s_len];
    alpha[0] = log_probs[0][BLANK as usize];
    if s_len > 1 {
        alpha[1] = log_probs[0][aug[1] as usize];
    }
    for t in 1..t_len {
        let mut next = vec![NEG_HUGE; s_len];
        for s in 0..s_len {
            let mut acc = alpha[s];
            if s >= 1 {
                acc = log_add(acc, alpha[s - 1]);
            }
            if s >= 2 && aug[s] != BLANK && aug[s] != aug[s - 2] {
                acc = log_add(acc, alpha[s - 2]);
            }
            next[s] = acc + log_probs[t][aug[s] as usize];
        }
        alpha = next;
    }
    let total = if s_len == 1 { alpha[0] } else { log_add(alpha[s_len - 1], alpha[s_len - 2]) };
    Ok(-total)
}

fn augment_labels(y: &[u32]) -> Vec<u32> {
    let mut aug = Vec::with_capacity(2 * y.len() + 1);
    aug.push(BLANK);
    for &t in y {
        aug.push(t);
        aug.push(BLANK);
    }
    aug
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// The loss components and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_trans: f64,
    pub l_ctc: f64,
    pub l_copy: f64,
    pub l_total: f64,
    pub lambda: f64,
}

/// Combine the component losses: lambda * trans + (1 - lambda) * ctc + copy.
/// Pass `None` for copy in baseline mode; the identity then holds with a
/// copy term of zero.
pub fn total_loss(l_trans: f64, l_ctc: f64, l_copy: Option<f64>, lambda: f64) -> LossBreakdown {
    assert!((0.0..=1.0).contains(&lambda), "lambda must be in [0,1]");
    let l_copy = l_copy.unwrap_or(0.0);
    LossBreakdown {
        l_trans,
        l_ctc,
        l_copy,
        l_total: lambda * l_trans + (1.0 - lambda) * l_ctc + l_copy,
        lambda,
    }
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

/// One-hot matrix picking `targets[r]` from row r of a `cols`-wide matrix.
fn onehot(rows: usize, cols: usize, targets: &[usize]) -> Tensor {
    debug_assert_eq!(rows, targets.len());
    let mut data = vec![0.0; rows * cols];
    for (r, &t) in targets.iter().enumerate() {
        debug_assert!(t < cols);
        data[r * cols + t] = 1.0;
    }
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Differentiable -sum_r log(probs[r][targets[r]]), probabilities floored.
pub fn graph_nll(g: &mut Graph, probs: NodeId, targets: &[usize]) -> Result<NodeId> {
    let (rows, cols) = g.value(probs).dims2();
    if rows != targets.len() {
        return Err(Error::shape(
            "nll",
            format!("{} rows but {} targets", rows, targets.len()),
        ));
    }
    let oh = g.constant(onehot(rows, cols, targets));
    let picked = g.mul(probs, oh)?;
    let per_row = g.sum_last(picked)?;
    let floored = g.clamp_min(per_row, PROB_FLOOR)?;
    let logs = g.log(floored)?;
    let sum = g.sum_all(logs)?;
    g.scale(sum, -1.0)
}

/// Differentiable CTC forward algorithm over `log_probs` (T x V, blank
/// included). Mirrors [`ctc_loss`] exactly, composed from graph primitives.
pub fn graph_ctc_loss(g: &mut Graph, log_probs: NodeId, y: &[u32]) -> Result<NodeId> {
    let (t_len, v) = g.value(log_probs).dims2();
    let min = ctc_min_frames(y);
    if t_len < min {
        return Err(Error::NoValidAlignment { frames: t_len, min_frames: min });
    }
    let aug = augment_labels(y);
    let s_len = aug.len();

    // M[s][t] = log_probs[t][aug[s]], via a one-hot gather.
    let gather = onehot(s_len, v, &aug.iter().map(|&a| a as usize).collect::<Vec<_>>());
    let gather = g.constant(gather);
    let m = g.matmul_t(gather, log_probs, false, true)?; // S x T

    // Initial column: only states 0 and 1 are reachable.
    let mut init_mask = vec![NEG_HUGE; s_len];
    init_mask[0] = 0.0;
    if s_len > 1 {
        init_mask[1] = 0.0;
    }
    let init_mask = g.constant(Tensor::matrix(s_len, 1, init_mask)?);
    let col0 = g.slice(m, 1, 0, 1)?;
    let mut alpha = g.add(col0, init_mask)?;

    // Mask enabling the two-step transition into state s.
    let skip_mask: Option<NodeId> = if s_len >= 3 {
        let data: Vec<f64> = (0..s_len)
            .map(|s| {
                if s >= 2 && aug[s] != BLANK && aug[s] != aug[s - 2] {
                    0.0
                } else {
                    NEG_HUGE
                }
            })
            .collect();
        Some(g.constant(Tensor::matrix(s_len, 1, data)?))
    } else {
        None
    };
    let pad1 = g.constant(Tensor::matrix(1, 1, vec![NEG_HUGE])?);
    let pad2 = g.constant(Tensor::matrix(2, 1, vec![NEG_HUGE; 2])?);

    for t in 1..t_len {
        let col = g.slice(m, 1, t, t + 1)?;
        let next = if s_len == 1 {
            g.add(alpha, col)?
        } else {
            let body1 = g.slice(alpha, 0, 0, s_len - 1)?;
            let shift1 = g.concat(&[pad1, body1], 0)?;
            let mut parts = vec![alpha, shift1];
            if let Some(mask) = skip_mask {
                let body2 = g.slice(alpha, 0, 0, s_len - 2)?;
                let shift2 = g.concat(&[pad2, body2], 0)?;
                let shift2 = g.add(shift2, mask)?;
                parts.push(shift2);
            }
            let stacked = g.concat(&parts, 1)?;
            let lse = g.logsumexp_last(stacked)?;
            g.add(lse, col)?
        };
        alpha = next;
    }

    let total = if s_len == 1 {
        alpha
    } else {
        let last = g.slice(alpha, 0, s_len - 1, s_len)?;
        let prev = g.slice(alpha, 0, s_len - 2, s_len - 1)?;
        let both = g.concat(&[last, prev], 1)?;
        g.logsumexp_last(both)?
    };
    g.scale(total, -1.0)
}

/// Differentiable weighted total. `l_copy` is `None` in baseline mode.
pub fn graph_total_loss(
    g: &mut Graph,
    l_trans: NodeId,
    l_ctc: NodeId,
    l_copy: Option<NodeId>,
    lambda: f64,
) -> Result<NodeId> {
    let wt = g.scale(l_trans, lambda)?;
    let wc = g.scale(l_ctc, 1.0 - lambda)?;
    let mut total = g.add(wt, wc)?;
    if let Some(lc) = l_copy {
        total = g.add(total, lc)?;
    }
    Ok(total)
}
