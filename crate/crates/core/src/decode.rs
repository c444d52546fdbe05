//! Streaming greedy decoding, the modified beam search (prefix summation
//! skipped; identical hypotheses merged by log-sum), and WER scoring.

use crate::error::Result;
use crate::lattice::LogProbLattice;
use crate::math::{log_softmax_with_temperature, logaddexp};
use crate::nnet::{PredState, RnntModel};
use ndarray::Array1;

/// Beam width, softmax temperature, and the per-frame emission cap.
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam: usize,
    pub temperature: f64,
    pub max_symbols_per_frame: usize,
}

impl DecodeConfig {
    /// Defaults for grapheme models: beam 100, temperature 1.5.
    pub fn grapheme_defaults() -> Self {
        Self {
            beam: 100,
            temperature: 1.5,
            max_symbols_per_frame: 10,
        }
    }

    /// Defaults for wordpiece models: beam 25, temperature 1.5.
    pub fn wordpiece_defaults() -> Self {
        Self {
            beam: 25,
            temperature: 1.5,
            max_symbols_per_frame: 10,
        }
    }

    pub fn greedy() -> Self {
        Self {
            beam: 1,
            temperature: 1.0,
            max_symbols_per_frame: 10,
        }
    }
}

/// A transducer as the decoders see it: encoded frames are addressed by
/// index, label history lives in an opaque prediction state.
pub trait Transducer {
    type State: Clone;
    fn frames(&self) -> usize;
    fn vocab(&self) -> usize;
    fn start(&self) -> Self::State;
    fn advance(&self, state: &Self::State, label: usize) -> Self::State;
    /// Raw logits over V+1 symbols at (frame t, given state); blank last.
    fn logits(&self, t: usize, state: &Self::State) -> Vec<f64>;
}

/// An RNN-T model with its input already run through the encoder.
pub struct EncodedRnnt<'a> {
    model: &'a RnntModel,
    h_enc: Vec<Array1<f64>>,
}

impl<'a> EncodedRnnt<'a> {
    pub fn new(model: &'a RnntModel, frames: &[Array1<f64>]) -> Result<Self> {
        let (h_enc, _) = model.encoder.forward(frames)?;
        Ok(Self { model, h_enc })
    }
}

impl Transducer for EncodedRnnt<'_> {
    type State = PredState;

    fn frames(&self) -> usize {
        self.h_enc.len()
    }

    fn vocab(&self) -> usize {
        self.model.vocab()
    }

    fn start(&self) -> PredState {
        self.model.prediction.start_state().expect("valid model")
    }

    fn advance(&self, state: &PredState, label: usize) -> PredState {
        self.model.prediction.advance(state, label).expect("valid label")
    }

    fn logits(&self, t: usize, state: &PredState) -> Vec<f64> {
        let (z, _) = self
            .model
            .joint
            .forward(&self.h_enc[t], &state.h)
            .expect("consistent shapes");
        z.to_vec()
    }
}

/// A mock transducer defined directly by a lattice: the output distribution
/// depends only on (t, emitted-label count). Used by tests and oracles.
pub struct LatticeTransducer<'a> {
    pub lattice: &'a LogProbLattice,
}

impl Transducer for LatticeTransducer<'_> {
    type State = usize;

    fn frames(&self) -> usize {
        self.lattice.frames()
    }

    fn vocab(&self) -> usize {
        self.lattice.vocab()
    }

    fn start(&self) -> usize {
        0
    }

    fn advance(&self, state: &usize, _label: usize) -> usize {
        (state + 1).min(self.lattice.target_len())
    }

    fn logits(&self, t: usize, state: &usize) -> Vec<f64> {
        self.lattice.slice(t, *state).to_vec()
    }
}

/// Counters for the streaming contract: a greedy pass consumes exactly T
/// blanks and performs T + |output| joint evaluations (absent overflow).
#[derive(Debug, Clone, Default)]
pub struct GreedyStats {
    pub blanks: usize,
    pub steps: usize,
    pub overflowed_frames: usize,
}

/// Streaming greedy decode: argmax at each (t, u); non-blank advances the
/// prediction network, blank advances to the next frame. Terminates on the
/// blank emitted at the last frame. Ties break toward the lowest index.
pub fn greedy_stream_decode<M: Transducer>(
    model: &M,
    config: &DecodeConfig,
    mut on_frame_advance: Option<&mut dyn FnMut(usize, &[usize])>,
) -> (Vec<usize>, GreedyStats) {
    let blank = model.vocab();
    let mut stats = GreedyStats::default();
    let mut labels = Vec::new();
    let mut state = model.start();
    for t in 0..model.frames() {
        let mut emitted = 0;
        loop {
            stats.steps += 1;
            let log_probs =
                log_softmax_with_temperature(&model.logits(t, &state), config.temperature)
                    .expect("positive temperature");
            let best = argmax_lowest(&log_probs);
            if best == blank {
                stats.blanks += 1;
                break;
            }
            labels.push(best);
            state = model.advance(&state, best);
            emitted += 1;
            if emitted >= config.max_symbols_per_frame {
                // Forced frame advance; the frame's blank is not consumed.
                stats.overflowed_frames += 1;
                break;
            }
        }
        if let Some(cb) = on_frame_advance.as_deref_mut() {
            cb(t, &labels);
        }
    }
    (labels, stats)
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A partial output sequence with its log-score and prediction state.
#[derive(Clone)]
pub struct Hypothesis<S> {
    pub labels: Vec<usize>,
    pub score: f64,
    pub state: S,
}

fn merge_into<S: Clone>(pool: &mut Vec<Hypothesis<S>>, hyp: Hypothesis<S>) {
    // Identical label sequences merge by log-sum; their states are equal by
    // construction since the prediction network is deterministic.
    for existing in pool.iter_mut() {
        if existing.labels == hyp.labels {
            existing.score = logaddexp(existing.score, hyp.score);
            return;
        }
    }
    pool.push(hyp);
}

fn sort_hypotheses<S>(pool: &mut [Hypothesis<S>]) {
    pool.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.labels.cmp(&b.labels))
    });
}

/// Modified beam search: per-frame breadth-first expansion, blank moves a
/// hypothesis to the next frame, prefix-probability summation is skipped,
/// and live hypotheses with identical label sequences merge by log-sum.
/// Returns up to `nbest` hypotheses sorted by score descending.
pub fn beam_search<M: Transducer>(
    model: &M,
    config: &DecodeConfig,
    nbest: usize,
) -> Vec<Hypothesis<M::State>> {
    let blank = model.vocab();
    let mut live: Vec<Hypothesis<M::State>> = vec![Hypothesis {
        labels: Vec::new(),
        score: 0.0,
        state: model.start(),
    }];
    for t in 0..model.frames() {
        let mut next_frame: Vec<Hypothesis<M::State>> = Vec::new();
        let mut frontier = live;
        for _expansion in 0..=config.max_symbols_per_frame {
            let mut expanded: Vec<Hypothesis<M::State>> = Vec::new();
            for hyp in &frontier {
                let log_probs =
                    log_softmax_with_temperature(&model.logits(t, &hyp.state), config.temperature)
                        .expect("positive temperature");
                merge_into(
                    &mut next_frame,
                    Hypothesis {
                        labels: hyp.labels.clone(),
                        score: hyp.score + log_probs[blank],
                        state: hyp.state.clone(),
                    },
                );
                if _expansion < config.max_symbols_per_frame {
                    for k in 0..blank {
                        let mut labels = hyp.labels.clone();
                        labels.push(k);
                        merge_into(
                            &mut expanded,
                            Hypothesis {
                                labels,
                                score: hyp.score + log_probs[k],
                                state: model.advance(&hyp.state, k),
                            },
                        );
                    }
                }
            }
            sort_hypotheses(&mut expanded);
            expanded.truncate(config.beam);
            frontier = expanded;
            if frontier.is_empty() {
                break;
            }
        }
        sort_hypotheses(&mut next_frame);
        next_frame.truncate(config.beam);
        live = next_frame;
    }
    sort_hypotheses(&mut live);
    live.truncate(nbest);
    live
}

/// Word error rate and its substitution/insertion/deletion breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct WerReport {
    pub wer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    /// Set when the reference was empty but the hypothesis was not.
    pub empty_reference: bool,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Minimum-edit-distance alignment between token sequences.
pub fn word_error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> WerReport {
    let n = reference.len();
    let m = hypothesis.len();
    // dist[i][j]: edits aligning ref[..i] with hyp[..j].
    let mut dist = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dist.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dist[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dist[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = dist[i - 1][j] + 1;
            let ins = dist[i][j - 1] + 1;
            dist[i][j] = sub.min(del).min(ins);
        }
    }
    // Backtrace, preferring matches/substitutions for a canonical breakdown.
    let (mut i, mut j) = (n, m);
    let (mut subs, mut ins, mut dels) = (0, 0, 0);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dist[i][j] == dist[i - 1][j - 1] + sub_cost {
                subs += sub_cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[i][j] == dist[i - 1][j] + 1 {
            dels += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    WerReport {
        wer: (subs + ins + dels) as f64 / n.max(1) as f64,
        substitutions: subs,
        insertions: ins,
        deletions: dels,
        empty_reference: n == 0 && m > 0,
    }
}
