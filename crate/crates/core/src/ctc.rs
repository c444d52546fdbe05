//! CTC loss and gradient for encoder pre-training, plus the weighted
//! multi-depth hierarchical combination.

use crate::error::{Error, Result};
use crate::lattice::TargetSequence;
use crate::math::{logaddexp, logsumexp};
use crate::units::UnitFamily;

const NORMALIZATION_TOL: f64 = 1e-6;

/// Per-frame output log-probabilities, T x (V+1), blank at index V.
#[derive(Debug, Clone)]
pub struct CtcPosteriorGrid {
    frames: usize,
    vocab: usize,
    entries: Vec<f64>,
}

impl CtcPosteriorGrid {
    pub fn from_log_probs(frames: usize, vocab: usize, entries: Vec<f64>) -> Result<Self> {
        let grid = Self::from_raw(frames, vocab, entries)?;
        for t in 0..frames {
            let lse = logsumexp(grid.slice(t));
            if lse.abs() > NORMALIZATION_TOL {
                return Err(Error::Unnormalized {
                    context: format!("CTC frame {t}"),
                    lse,
                });
            }
        }
        Ok(grid)
    }

    pub fn from_logits(frames: usize, vocab: usize, logits: Vec<f64>) -> Result<Self> {
        let mut grid = Self::from_raw(frames, vocab, logits)?;
        let width = vocab + 1;
        for slice in grid.entries.chunks_mut(width) {
            let lse = logsumexp(slice);
            for v in slice.iter_mut() {
                *v -= lse;
            }
        }
        Ok(grid)
    }

    fn from_raw(frames: usize, vocab: usize, entries: Vec<f64>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Invalid("CTC grid needs at least one frame".into()));
        }
        if vocab == 0 {
            return Err(Error::Invalid("vocabulary must be non-empty".into()));
        }
        if entries.len() != frames * (vocab + 1) {
            return Err(Error::Shape(format!(
                "CTC grid: got {} values, expected {}x{}",
                entries.len(),
                frames,
                vocab + 1
            )));
        }
        Ok(Self {
            frames,
            vocab,
            entries,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn blank(&self) -> usize {
        self.vocab
    }

    #[inline]
    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.entries[t * (self.vocab + 1) + k]
    }

    pub fn slice(&self, t: usize) -> &[f64] {
        let o = t * (self.vocab + 1);
        &self.entries[o..o + self.vocab + 1]
    }
}

/// Outcome of a CTC evaluation. Targets that cannot be aligned in the
/// available frames are not an error, they carry infinite loss.
#[derive(Debug, Clone)]
pub enum CtcOutcome {
    Feasible {
        loss: f64,
        /// dLoss/dLogits, softmax-coupled, shape T x (V+1).
        logit_grad: Vec<f64>,
    },
    Infeasible,
}

impl CtcOutcome {
    pub fn loss(&self) -> f64 {
        match self {
            CtcOutcome::Feasible { loss, .. } => *loss,
            CtcOutcome::Infeasible => f64::INFINITY,
        }
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(self, CtcOutcome::Infeasible)
    }
}

/// CTC negative log-likelihood and its gradient with respect to the logits.
///
/// Standard collapse convention: remove blanks, merge repeats. Repeated
/// labels therefore require a separating blank frame.
pub fn ctc_loss(grid: &CtcPosteriorGrid, target: &TargetSequence) -> Result<CtcOutcome> {
    if let Some(&bad) = target.labels().iter().find(|&&l| l >= grid.vocab()) {
        return Err(Error::Invalid(format!(
            "target label {bad} out of range for CTC vocabulary {}",
            grid.vocab()
        )));
    }
    let t_len = grid.frames();
    let blank = grid.blank();

    // Extended label sequence: blank, y1, blank, y2, ..., yU, blank.
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target.labels() {
        ext.push(y);
        ext.push(blank);
    }
    let s_len = ext.len();
    let idx = |t: usize, s: usize| t * s_len + s;

    // Forward. alpha includes the emission at frame t.
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[idx(0, 0)] = grid.get(0, ext[0]);
    if s_len > 1 {
        alpha[idx(0, 1)] = grid.get(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[idx(t - 1, s)];
            if s >= 1 {
                acc = logaddexp(acc, alpha[idx(t - 1, s - 1)]);
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                acc = logaddexp(acc, alpha[idx(t - 1, s - 2)]);
            }
            alpha[idx(t, s)] = acc + grid.get(t, ext[s]);
        }
    }
    let mut log_z = alpha[idx(t_len - 1, s_len - 1)];
    if s_len > 1 {
        log_z = logaddexp(log_z, alpha[idx(t_len - 1, s_len - 2)]);
    }
    if log_z == f64::NEG_INFINITY {
        return Ok(CtcOutcome::Infeasible);
    }

    // Backward. beta includes the emission at frame t.
    let mut beta = vec![f64::NEG_INFINITY; t_len * s_len];
    beta[idx(t_len - 1, s_len - 1)] = grid.get(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[idx(t_len - 1, s_len - 2)] = grid.get(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in (0..s_len).rev() {
            let mut acc = beta[idx(t + 1, s)];
            if s + 1 < s_len {
                acc = logaddexp(acc, beta[idx(t + 1, s + 1)]);
            }
            if s + 2 < s_len && ext[s + 2] != blank && ext[s + 2] != ext[s] {
                acc = logaddexp(acc, beta[idx(t + 1, s + 2)]);
            }
            beta[idx(t, s)] = acc + grid.get(t, ext[s]);
        }
    }

    // Logit gradient: dL/dz(t,k) = p(t,k) - (1/Z) sum_{s: ext[s]=k} exp(a+b-l(t,k)).
    let width = grid.vocab() + 1;
    let mut grad = vec![0.0; t_len * width];
    for t in 0..t_len {
        let mut occupancy = vec![f64::NEG_INFINITY; width];
        for s in 0..s_len {
            let k = ext[s];
            let term = alpha[idx(t, s)] + beta[idx(t, s)] - grid.get(t, k);
            occupancy[k] = logaddexp(occupancy[k], term);
        }
        for k in 0..width {
            grad[t * width + k] = grid.get(t, k).exp() - (occupancy[k] - log_z).exp();
        }
    }

    Ok(CtcOutcome::Feasible {
        loss: -log_z,
        logit_grad: grad,
    })
}

/// One CTC head attached at a given encoder depth.
#[derive(Debug, Clone)]
pub struct CtcTap {
    pub depth: usize,
    pub units: UnitFamily,
    pub weight: f64,
}

/// Weighted multi-depth CTC combination.
#[derive(Debug, Clone)]
pub struct HierarchicalLossSpec {
    taps: Vec<CtcTap>,
}

impl HierarchicalLossSpec {
    pub fn new(taps: Vec<CtcTap>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::Invalid("hierarchical spec needs at least one tap".into()));
        }
        for w in taps.windows(2) {
            if w[1].depth <= w[0].depth {
                return Err(Error::Invalid(format!(
                    "tap depths must be strictly increasing ({} then {})",
                    w[0].depth, w[1].depth
                )));
            }
        }
        if taps.iter().any(|t| t.weight < 0.0) {
            return Err(Error::Invalid("tap weights must be non-negative".into()));
        }
        if taps.iter().map(|t| t.weight).sum::<f64>() <= 0.0 {
            return Err(Error::Invalid("tap weights must sum to a positive value".into()));
        }
        Ok(Self { taps })
    }

    pub fn taps(&self) -> &[CtcTap] {
        &self.taps
    }
}

/// Combines per-tap losses and gradients: total = sum_i w_i * loss_i,
/// each gradient scaled by its tap weight.
pub fn combine_hierarchical(
    losses: &[(f64, Vec<f64>)],
    spec: &HierarchicalLossSpec,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if losses.len() != spec.taps().len() {
        return Err(Error::Shape(format!(
            "{} losses for {} taps",
            losses.len(),
            spec.taps().len()
        )));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(losses.len());
    for ((loss, grad), tap) in losses.iter().zip(spec.taps()) {
        total += tap.weight * loss;
        grads.push(grad.iter().map(|g| g * tap.weight).collect());
    }
    Ok((total, grads))
}
