//! Transducer loss: forward-backward dynamic programming over the
//! alignment lattice and the exact gradient with respect to the logits.
//!
//! Lattice node (t, u) means "t frames consumed, u labels emitted".
//! Paths move right (next frame) on blank and up (next label) on the
//! matching target label; the terminal factor is a blank at (T-1, U).

use crate::error::{Error, Result};
use crate::math::{logaddexp, logsumexp};
use std::io::Write;

const NORMALIZATION_TOL: f64 = 1e-6;

/// T x (U+1) x (V+1) grid of output log-probabilities P(y | t, u).
/// Label index V is the blank.
#[derive(Debug, Clone)]
pub struct LogProbLattice {
    frames: usize,
    target_len: usize,
    vocab: usize,
    entries: Vec<f64>,
}

impl LogProbLattice {
    /// Builds a lattice from already-normalized log-probabilities.
    /// Every (t, u) slice must satisfy logsumexp = 0 within 1e-6.
    pub fn from_log_probs(
        frames: usize,
        target_len: usize,
        vocab: usize,
        entries: Vec<f64>,
    ) -> Result<Self> {
        let lat = Self::from_raw(frames, target_len, vocab, entries)?;
        for t in 0..frames {
            for u in 0..=target_len {
                let lse = logsumexp(lat.slice(t, u));
                if lse.abs() > NORMALIZATION_TOL {
                    return Err(Error::Unnormalized {
                        context: format!("lattice slice (t={t}, u={u})"),
                        lse,
                    });
                }
            }
        }
        Ok(lat)
    }

    /// Builds a lattice by log-softmax-normalizing raw logits per slice.
    pub fn from_logits(
        frames: usize,
        target_len: usize,
        vocab: usize,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let mut lat = Self::from_raw(frames, target_len, vocab, logits)?;
        let width = vocab + 1;
        for slice in lat.entries.chunks_mut(width) {
            let lse = logsumexp(slice);
            for v in slice.iter_mut() {
                *v -= lse;
            }
        }
        Ok(lat)
    }

    fn from_raw(frames: usize, target_len: usize, vocab: usize, entries: Vec<f64>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Invalid("lattice needs at least one frame".into()));
        }
        if vocab == 0 {
            return Err(Error::Invalid("vocabulary must be non-empty".into()));
        }
        let expected = frames * (target_len + 1) * (vocab + 1);
        if entries.len() != expected {
            return Err(Error::Shape(format!(
                "lattice entries: got {} values, expected {}x{}x{} = {}",
                entries.len(),
                frames,
                target_len + 1,
                vocab + 1,
                expected
            )));
        }
        Ok(Self {
            frames,
            target_len,
            vocab,
            entries,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn target_len(&self) -> usize {
        self.target_len
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Index of the blank label.
    pub fn blank(&self) -> usize {
        self.vocab
    }

    #[inline]
    fn offset(&self, t: usize, u: usize) -> usize {
        (t * (self.target_len + 1) + u) * (self.vocab + 1)
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize, k: usize) -> f64 {
        self.entries[self.offset(t, u) + k]
    }

    pub fn slice(&self, t: usize, u: usize) -> &[f64] {
        let o = self.offset(t, u);
        &self.entries[o..o + self.vocab + 1]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// Target label sequence y_1..y_U; never contains the blank index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSequence {
    labels: Vec<usize>,
}

impl TargetSequence {
    pub fn new(labels: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= vocab) {
            return Err(Error::Invalid(format!(
                "target label {bad} out of range for vocabulary of {vocab} (blank is excluded)"
            )));
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Forward/backward scores over the T x (U+1) node grid, log space.
#[derive(Debug, Clone)]
pub struct AlphaBetaGrid {
    frames: usize,
    target_len: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_z: f64,
}

impl AlphaBetaGrid {
    #[inline]
    fn idx(&self, t: usize, u: usize) -> usize {
        t * (self.target_len + 1) + u
    }

    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.alpha[self.idx(t, u)]
    }

    pub fn beta(&self, t: usize, u: usize) -> f64 {
        self.beta[self.idx(t, u)]
    }

    /// Total data log-likelihood.
    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    /// Debug dump: one CSV per grid, row = t, column = u, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut alpha_out: W, mut beta_out: W) -> std::io::Result<()> {
        for grid_and_out in [(&self.alpha, &mut alpha_out), (&self.beta, &mut beta_out)] {
            let (grid, out) = grid_and_out;
            for t in 0..self.frames {
                let row: Vec<String> = (0..=self.target_len)
                    .map(|u| format!("{:.16e}", grid[t * (self.target_len + 1) + u]))
                    .collect();
                writeln!(out, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

fn check_dims(lattice: &LogProbLattice, target: &TargetSequence) -> Result<()> {
    if target.len() != lattice.target_len() {
        return Err(Error::Shape(format!(
            "target length {} does not match lattice U = {}",
            target.len(),
            lattice.target_len()
        )));
    }
    Ok(())
}

/// Negative log-likelihood of the target under the transducer lattice,
/// marginalized over all blank-interleaved alignments.
pub fn rnnt_forward(
    lattice: &LogProbLattice,
    target: &TargetSequence,
) -> Result<(f64, AlphaBetaGrid)> {
    check_dims(lattice, target)?;
    let t_len = lattice.frames();
    let u_len = lattice.target_len();
    let blank = lattice.blank();
    let y = target.labels();

    let mut alpha = vec![f64::NEG_INFINITY; t_len * (u_len + 1)];
    let mut beta = vec![f64::NEG_INFINITY; t_len * (u_len + 1)];
    let idx = |t: usize, u: usize| t * (u_len + 1) + u;

    alpha[idx(0, 0)] = 0.0;
    for t in 0..t_len {
        for u in 0..=u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let from_left = if t > 0 {
                alpha[idx(t - 1, u)] + lattice.get(t - 1, u, blank)
            } else {
                f64::NEG_INFINITY
            };
            let from_below = if u > 0 {
                alpha[idx(t, u - 1)] + lattice.get(t, u - 1, y[u - 1])
            } else {
                f64::NEG_INFINITY
            };
            alpha[idx(t, u)] = logaddexp(from_left, from_below);
        }
    }

    beta[idx(t_len - 1, u_len)] = lattice.get(t_len - 1, u_len, blank);
    for t in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            if t == t_len - 1 && u == u_len {
                continue;
            }
            let right = if t + 1 < t_len {
                beta[idx(t + 1, u)] + lattice.get(t, u, blank)
            } else {
                f64::NEG_INFINITY
            };
            let up = if u < u_len {
                beta[idx(t, u + 1)] + lattice.get(t, u, y[u])
            } else {
                f64::NEG_INFINITY
            };
            beta[idx(t, u)] = logaddexp(right, up);
        }
    }

    let log_z = beta[idx(0, 0)];
    let grid = AlphaBetaGrid {
        frames: t_len,
        target_len: u_len,
        alpha,
        beta,
        log_z,
    };
    Ok((-log_z, grid))
}

/// Gradient of the loss with respect to the lattice *log-probabilities*,
/// treating each entry as a free variable (no softmax coupling).
/// Nonzero only for blank and the next target label at each node.
pub fn rnnt_gradient_wrt_log_probs(
    lattice: &LogProbLattice,
    target: &TargetSequence,
) -> Result<Vec<f64>> {
    let (_, grid) = rnnt_forward(lattice, target)?;
    Ok(log_prob_gradient(lattice, target, &grid))
}

fn log_prob_gradient(
    lattice: &LogProbLattice,
    target: &TargetSequence,
    grid: &AlphaBetaGrid,
) -> Vec<f64> {
    let t_len = lattice.frames();
    let u_len = lattice.target_len();
    let blank = lattice.blank();
    let width = lattice.vocab() + 1;
    let y = target.labels();
    let log_z = grid.log_z();

    let mut grad = vec![0.0; t_len * (u_len + 1) * width];
    for t in 0..t_len {
        for u in 0..=u_len {
            let base = (t * (u_len + 1) + u) * width;
            let a = grid.alpha(t, u);
            if a == f64::NEG_INFINITY {
                continue;
            }
            // blank transition: (t, u) -> (t+1, u), or the terminal factor.
            let after_blank = if t + 1 < t_len {
                grid.beta(t + 1, u)
            } else if u == u_len {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            if after_blank != f64::NEG_INFINITY {
                grad[base + blank] = -(a + lattice.get(t, u, blank) + after_blank - log_z).exp();
            }
            // label transition: (t, u) -> (t, u+1).
            if u < u_len {
                let k = y[u];
                grad[base + k] = -(a + lattice.get(t, u, k) + grid.beta(t, u + 1) - log_z).exp();
            }
        }
    }
    grad
}

/// Gradient of the loss with respect to the raw logits z_{t,u}, including
/// the softmax Jacobian. This is what the training loop consumes.
pub fn rnnt_gradient(lattice: &LogProbLattice, target: &TargetSequence) -> Result<Vec<f64>> {
    rnnt_loss_and_logit_grad(lattice, target).map(|(_, _, grad)| grad)
}

/// One-pass combination used by training: loss, the alpha/beta grids, and
/// the logit gradient.
pub fn rnnt_loss_and_logit_grad(
    lattice: &LogProbLattice,
    target: &TargetSequence,
) -> Result<(f64, AlphaBetaGrid, Vec<f64>)> {
    let (loss, grid) = rnnt_forward(lattice, target)?;
    let mut grad = log_prob_gradient(lattice, target, &grid);
    let t_len = lattice.frames();
    let u_len = lattice.target_len();
    let width = lattice.vocab() + 1;

    // dL/dz_k = G_k - p_k * sum_j G_j, with sum_j G_j = -exp(alpha+beta-logZ).
    for t in 0..t_len {
        for u in 0..=u_len {
            let base = (t * (u_len + 1) + u) * width;
            let g_sum: f64 = grad[base..base + width].iter().sum();
            for k in 0..width {
                grad[base + k] -= lattice.get(t, u, k).exp() * g_sum;
            }
        }
    }
    Ok((loss, grid, grad))
}
