//! Consistency alignment on unlabeled target samples.
//!
//! The weak view's prediction, when confident enough, becomes a one-hot
//! pseudo-label for the strong view of the same image. Pseudo-labels are built
//! from detached values and live only for the batch they were computed on.

use alloc::format;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::tensor::{Tape, Tensor, Var};
use crate::{math, Error, Result};

/// Floor applied to strong-view probabilities before the log.
pub const PROB_FLOOR: f64 = 1e-12;

const ROW_SUM_TOL: f64 = 1e-9;

static LIVE: AtomicUsize = AtomicUsize::new(0);

/// Number of [`GatedPseudoBatch`] values currently alive in the process.
/// Pseudo-labels are discarded after every batch, so outside a training
/// step this is zero.
pub fn live_pseudo_batches() -> usize {
    LIVE.load(Ordering::SeqCst)
}

#[derive(Debug)]
struct Live;

impl Live {
    fn new() -> Self {
        LIVE.fetch_add(1, Ordering::SeqCst);
        Live
    }
}

impl Clone for Live {
    fn clone(&self) -> Self {
        Live::new()
    }
}

impl Drop for Live {
    fn drop(&mut self) {
        LIVE.fetch_sub(1, Ordering::SeqCst);
    }
}

impl PartialEq for Live {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedPseudoBatch {
    pub pseudo_labels: Vec<usize>,
    pub mask: Vec<bool>,
    pub confidences: Vec<f64>,
    pub threshold: f64,
    _live: Live,
}

impl GatedPseudoBatch {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn passed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Argmax pseudo-labels (lowest class on ties) gated by `confidence >= sigma`.
pub fn gate_pseudo_labels(p_weak: &Tensor, sigma: f64) -> Result<GatedPseudoBatch> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Parameter(format!("sigma must be in [0, 1], got {sigma}")));
    }
    let c = p_weak.cols();
    let mut out = GatedPseudoBatch {
        pseudo_labels: Vec::with_capacity(p_weak.rows()),
        mask: Vec::with_capacity(p_weak.rows()),
        confidences: Vec::with_capacity(p_weak.rows()),
        threshold: sigma,
        _live: Live::new(),
    };
    for (i, row) in p_weak.data().chunks(c).enumerate() {
        let total = math::sum(row);
        if !((total - 1.0).abs() <= ROW_SUM_TOL) || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Contract(format!(
                "weak-view row {i} is not a distribution (sums to {total})"
            )));
        }
        let label = math::argmax(row).unwrap_or(0);
        let conf = row[label];
        out.pseudo_labels.push(label);
        out.confidences.push(conf);
        out.mask.push(conf >= sigma);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct ConsistencyLoss {
    pub loss: Var,
    /// Masked-in entries whose probability was raised to [`PROB_FLOOR`].
    pub clamped: usize,
}

/// `(1/B) Σ_{i ∈ mask} −log p_s[i, ỹ_i]`, exactly 0 when nothing passes.
pub fn consistency_loss(tape: &mut Tape, gated: &GatedPseudoBatch, p_strong: Var) -> Result<ConsistencyLoss> {
    let ps = tape.value(p_strong);
    if ps.rows() != gated.len() || ps.rank() != 2 {
        return Err(Error::Shape(format!(
            "strong-view probabilities {:?} for {} gated samples",
            ps.shape(),
            gated.len()
        )));
    }
    if gated.passed() == 0 {
        return Ok(ConsistencyLoss {
            loss: tape.constant(Tensor::scalar(0.0)),
            clamped: 0,
        });
    }
    let clamped = gated
        .pseudo_labels
        .iter()
        .zip(&gated.mask)
        .enumerate()
        .filter(|(i, (&y, &m))| m && ps.get2(*i, y) < PROB_FLOOR)
        .count();
    let batch = gated.len() as f64;
    let picked = tape.pick_per_row(p_strong, &gated.pseudo_labels)?;
    let floored = tape.clamp_min(picked, PROB_FLOOR);
    let logp = tape.log(floored)?;
    let mask: Vec<f64> = gated.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mask = tape.constant(Tensor::vector(mask)?);
    let masked = tape.mul(logp, mask)?;
    let total = tape.sum(masked);
    Ok(ConsistencyLoss {
        loss: tape.scale(total, -1.0 / batch),
        clamped,
    })
}
