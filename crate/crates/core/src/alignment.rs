//! Categorical alignment between source samples and target landmarks.
//!
//! Two interchangeable objectives pull source embeddings towards the landmarks
//! of their class:
//!
//! * prototypical: a softmax over (non-squared) Euclidean distances to the
//!   class prototypes, i.e. the per-class means of landmark embeddings, scored
//!   by negative log-likelihood;
//! * triplet: for each landmark, the farthest same-class and the nearest
//!   other-class source sample in the batch (squared distances), with a
//!   hinge on the margin.
//!
//! The strongly augmented variants are the same functions applied to
//! embeddings of strongly augmented images.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Per-class landmark means living on a tape.
#[derive(Debug, Clone)]
pub struct Prototypes {
    /// `C × d`
    pub matrix: Var,
    /// Landmarks averaged into each row.
    pub counts: Vec<usize>,
}

/// Builds prototypes as `A · E` where `A[k, i] = 1/|T_k|` for landmarks of
/// class `k`, so gradients flow back into every landmark embedding.
pub fn compute_prototypes(
    tape: &mut Tape,
    landmark_embeddings: Var,
    labels: &[usize],
    num_classes: usize,
) -> Result<Prototypes> {
    let rows = tape.value(landmark_embeddings).rows();
    if labels.len() != rows {
        return Err(Error::Shape(alloc::format!(
            "{} labels for {rows} landmark embeddings",
            labels.len()
        )));
    }
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::Parameter(alloc::format!(
                "label {y} outside 0..{num_classes}"
            )));
        }
        counts[y] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Coverage { class });
    }
    let mut avg = vec![0.0; num_classes * rows];
    for (i, &y) in labels.iter().enumerate() {
        avg[y * rows + i] = 1.0 / counts[y] as f64;
    }
    let avg = tape.constant(Tensor::matrix(num_classes, rows, avg)?);
    let matrix = tape.matmul(avg, landmark_embeddings)?;
    Ok(Prototypes { matrix, counts })
}

/// `p(y = k | f) ∝ exp(−‖f − c_k‖₂)` for each row of `features`.
pub fn proto_class_distribution(tape: &mut Tape, features: Var, protos: &Prototypes) -> Result<Var> {
    let dist = tape.euclidean_rows(features, protos.matrix)?;
    let logits = tape.neg(dist);
    tape.softmax(logits)
}

/// Mean negative log-likelihood of the true class under
/// [`proto_class_distribution`].
pub fn prototypical_loss(
    tape: &mut Tape,
    source_embeddings: Var,
    source_labels: &[usize],
    protos: &Prototypes,
) -> Result<Var> {
    let classes = protos.counts.len();
    if let Some(&y) = source_labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Parameter(alloc::format!(
            "source label {y} outside 0..{classes}"
        )));
    }
    let dist = tape.euclidean_rows(source_embeddings, protos.matrix)?;
    let logits = tape.neg(dist);
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick_per_row(logp, source_labels)?;
    let nll = tape.neg(picked);
    Ok(tape.mean(nll))
}

/// A landmark with its hardest source positive and negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    /// Row in the landmark embeddings.
    pub anchor: usize,
    /// Row in the source embeddings, same class as the anchor.
    pub positive: usize,
    /// Row in the source embeddings, different class.
    pub negative: usize,
    pub anchor_class: usize,
    pub positive_class: usize,
    pub negative_class: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Mined {
    pub triplets: Vec<Triplet>,
    /// Landmarks without a same-class or without an other-class source sample.
    pub skipped: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Batch-hard mining on detached embeddings. Ties go to the lowest index.
pub fn mine_hard_triplets(
    landmark_embeddings: &Tensor,
    landmark_labels: &[usize],
    source_embeddings: &Tensor,
    source_labels: &[usize],
) -> Result<Mined> {
    if landmark_embeddings.cols() != source_embeddings.cols() {
        return Err(Error::Dimension {
            op: "mine_hard_triplets",
            left: landmark_embeddings.shape().to_vec(),
            right: source_embeddings.shape().to_vec(),
        });
    }
    if landmark_labels.len() != landmark_embeddings.rows()
        || source_labels.len() != source_embeddings.rows()
    {
        return Err(Error::Shape("label count does not match embedding rows".into()));
    }
    let mut mined = Mined::default();
    for (a, &ya) in landmark_labels.iter().enumerate() {
        let anchor = landmark_embeddings.row(a);
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for (s, &ys) in source_labels.iter().enumerate() {
            let d = sq_dist(anchor, source_embeddings.row(s));
            if ys == ya {
                if pos.map_or(true, |(_, best)| d > best) {
                    pos = Some((s, d));
                }
            } else if neg.map_or(true, |(_, best)| d < best) {
                neg = Some((s, d));
            }
        }
        match (pos, neg) {
            (Some((p, _)), Some((n, _))) => mined.triplets.push(Triplet {
                anchor: a,
                positive: p,
                negative: n,
                anchor_class: ya,
                positive_class: source_labels[p],
                negative_class: source_labels[n],
            }),
            _ => mined.skipped += 1,
        }
    }
    Ok(mined)
}

#[derive(Debug, Clone, Copy)]
pub struct TripletLoss {
    pub loss: Var,
    /// Set when there were no triplets; `loss` is then an exact constant 0.
    pub empty: bool,
}

/// `mean_i [‖t_i − s_p‖² − ‖t_i − s_n‖² + m]₊`, differentiable in the
/// embeddings only.
pub fn triplet_loss(
    tape: &mut Tape,
    triplets: &[Triplet],
    landmark_embeddings: Var,
    source_embeddings: Var,
    margin: f64,
) -> Result<TripletLoss> {
    if !(margin >= 0.0) {
        return Err(Error::Parameter(alloc::format!("margin must be >= 0, got {margin}")));
    }
    if triplets.is_empty() {
        return Ok(TripletLoss {
            loss: tape.constant(Tensor::scalar(0.0)),
            empty: true,
        });
    }
    let anchors: Vec<usize> = triplets.iter().map(|t| t.anchor).collect();
    let positives: Vec<usize> = triplets.iter().map(|t| t.positive).collect();
    let negatives: Vec<usize> = triplets.iter().map(|t| t.negative).collect();
    let a = tape.gather_rows(landmark_embeddings, &anchors)?;
    let p = tape.gather_rows(source_embeddings, &positives)?;
    let n = tape.gather_rows(source_embeddings, &negatives)?;
    let dp = squared_row_distance(tape, a, p)?;
    let dn = squared_row_distance(tape, a, n)?;
    let gap = tape.sub(dp, dn)?;
    let m = tape.constant(Tensor::vector(vec![margin; triplets.len()])?);
    let shifted = tape.add(gap, m)?;
    let hinge = tape.relu(shifted);
    Ok(TripletLoss {
        loss: tape.mean(hinge),
        empty: false,
    })
}

fn squared_row_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.row_sum(sq))
}
