//! Model graphs assembled from the layer primitives: the LSTM encoder with
//! optional time convolution, the label-conditioned prediction network, and
//! the full transducer with exact end-to-end gradients.

use super::layers::{Embedding, Joint, TimeConv};
use super::lstm::{lstm_backward, lstm_forward, lstm_step, LstmCache, LstmParams, LstmState};
use super::Parameterized;
use crate::error::{Error, Result};
use crate::lattice::{rnnt_loss_and_logit_grad, AlphaBetaGrid, LogProbLattice, TargetSequence};
use ndarray::Array1;
use rand::Rng;

/// LSTM stack mapping feature frames to h_enc, with an optional learned
/// time reduction placed after a chosen layer.
#[derive(Debug, Clone)]
pub struct EncoderNet {
    pub layers: Vec<LstmParams>,
    /// (apply after this 1-based layer, the convolution).
    pub time_conv: Option<(usize, TimeConv)>,
}

pub struct EncoderCache {
    lstm_caches: Vec<LstmCache>,
    /// Output sequence of each LSTM layer, before any convolution.
    layer_outputs: Vec<Vec<Array1<f64>>>,
}

impl EncoderNet {
    pub fn init<R: Rng>(
        input_dim: usize,
        widths: &[usize],
        time_conv: Option<(usize, usize)>, // (after layer, factor)
        rng: &mut R,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Invalid("encoder needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut dim = input_dim;
        for &w in widths {
            layers.push(LstmParams::init(dim, w, rng));
            dim = w;
        }
        let conv = match time_conv {
            None => None,
            Some((after, factor)) => {
                if after == 0 || after > widths.len() {
                    return Err(Error::Invalid(format!(
                        "time-conv placement {after} outside 1..={}",
                        widths.len()
                    )));
                }
                // Dimension-preserving so the next layer's input width is unchanged.
                let d = widths[after - 1];
                Some((after, TimeConv::init(d, d, factor, rng)))
            }
        };
        Ok(Self {
            layers,
            time_conv: conv,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(LstmParams::zeros_like).collect(),
            time_conv: self
                .time_conv
                .as_ref()
                .map(|(after, c)| (*after, c.zeros_like())),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn output_dim(&self) -> usize {
        match &self.time_conv {
            Some((after, conv)) if *after == self.layers.len() => conv.out_dim(),
            _ => self.layers.last().expect("nonempty").hidden(),
        }
    }

    pub fn forward(&self, frames: &[Array1<f64>]) -> Result<(Vec<Array1<f64>>, EncoderCache)> {
        if frames.is_empty() {
            return Err(Error::Invalid("encoder needs at least one frame".into()));
        }
        let mut cache = EncoderCache {
            lstm_caches: Vec::with_capacity(self.layers.len()),
            layer_outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut seq: Vec<Array1<f64>> = frames.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let state0 = LstmState::zeros(layer.hidden());
            let (out, lstm_cache) = lstm_forward(layer, &seq, &state0)?;
            cache.lstm_caches.push(lstm_cache);
            cache.layer_outputs.push(out.clone());
            seq = out;
            if let Some((after, conv)) = &self.time_conv {
                if *after == i + 1 {
                    seq = conv.forward(&seq)?;
                }
            }
        }
        Ok((seq, cache))
    }

    /// Activation sequence a CTC tap at the given 1-based depth reads.
    /// Taps read the LSTM layer output before any convolution at that depth.
    pub fn tap_activations<'a>(
        &self,
        cache: &'a EncoderCache,
        depth: usize,
    ) -> Result<&'a [Array1<f64>]> {
        if depth == 0 || depth > self.layers.len() {
            return Err(Error::Invalid(format!(
                "tap depth {depth} outside 1..={}",
                self.layers.len()
            )));
        }
        Ok(&cache.layer_outputs[depth - 1])
    }

    /// Backpropagates through the stack. `d_final` is the gradient of the
    /// final encoder output; `tap_grads` inject gradients at intermediate
    /// layer outputs (depth, per-step gradient).
    pub fn backward(
        &self,
        cache: &EncoderCache,
        d_final: Vec<Array1<f64>>,
        tap_grads: &[(usize, Vec<Array1<f64>>)],
    ) -> (EncoderNet, Vec<Array1<f64>>) {
        let mut grads = self.zeros_like();
        let mut d_seq = d_final;
        for i in (0..self.layers.len()).rev() {
            if let Some((after, conv)) = &self.time_conv {
                if *after == i + 1 {
                    let (_, conv_grad) = grads.time_conv.as_mut().expect("same topology");
                    d_seq = conv.backward(conv_grad, &cache.layer_outputs[i], &d_seq);
                }
            }
            for (depth, tg) in tap_grads {
                if *depth == i + 1 {
                    for (acc, g) in d_seq.iter_mut().zip(tg) {
                        *acc += g;
                    }
                }
            }
            let (layer_grads, d_inputs) = lstm_backward(&self.layers[i], &cache.lstm_caches[i], &d_seq);
            grads.layers[i] = layer_grads;
            d_seq = d_inputs;
        }
        (grads, d_seq)
    }
}

impl Parameterized for EncoderNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}lstm{i}/"), f);
        }
        if let Some((_, conv)) = &self.time_conv {
            conv.visit(&format!("{prefix}timeconv/"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}lstm{i}/"), f);
        }
        if let Some((_, conv)) = &mut self.time_conv {
            conv.visit_mut(&format!("{prefix}timeconv/"), f);
        }
    }
}

/// Prediction network: embedding plus an LSTM stack, conditioned on the
/// history of non-blank labels. The embedding has vocab+1 rows; the extra
/// row is the learned start-of-sequence input.
#[derive(Debug, Clone)]
pub struct PredictionNet {
    pub embedding: Embedding,
    pub layers: Vec<LstmParams>,
}

pub struct PredictionCache {
    input_indices: Vec<usize>,
    lstm_caches: Vec<LstmCache>,
}

/// Recurrent state of a decode session: per-layer LSTM states plus the
/// current h_dec output.
#[derive(Debug, Clone)]
pub struct PredState {
    pub states: Vec<LstmState>,
    pub h: Array1<f64>,
}

impl PredictionNet {
    pub fn init<R: Rng>(vocab: usize, embed_dim: usize, widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Invalid("prediction net needs at least one layer".into()));
        }
        let embedding = Embedding::init(vocab + 1, embed_dim, rng);
        let mut layers = Vec::with_capacity(widths.len());
        let mut dim = embed_dim;
        for &w in widths {
            layers.push(LstmParams::init(dim, w, rng));
            dim = w;
        }
        Ok(Self { embedding, layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embedding: self.embedding.zeros_like(),
            layers: self.layers.iter().map(LstmParams::zeros_like).collect(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows() - 1
    }

    pub fn sos_index(&self) -> usize {
        self.vocab()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").hidden()
    }

    /// h_dec_0..h_dec_U for a training target: inputs are SOS, y_1..y_U.
    pub fn forward_targets(
        &self,
        labels: &[usize],
    ) -> Result<(Vec<Array1<f64>>, PredictionCache)> {
        let mut indices = Vec::with_capacity(labels.len() + 1);
        indices.push(self.sos_index());
        for &y in labels {
            if y >= self.vocab() {
                return Err(Error::Invalid(format!(
                    "prediction input label {y} out of range ({})",
                    self.vocab()
                )));
            }
            indices.push(y);
        }
        let mut seq: Vec<Array1<f64>> = indices
            .iter()
            .map(|&i| self.embedding.lookup(i))
            .collect::<Result<_>>()?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let state0 = LstmState::zeros(layer.hidden());
            let (out, cache) = lstm_forward(layer, &seq, &state0)?;
            caches.push(cache);
            seq = out;
        }
        Ok((
            seq,
            PredictionCache {
                input_indices: indices,
                lstm_caches: caches,
            },
        ))
    }

    pub fn backward(&self, cache: &PredictionCache, d_outputs: Vec<Array1<f64>>) -> PredictionNet {
        let mut grads = self.zeros_like();
        let mut d_seq = d_outputs;
        for i in (0..self.layers.len()).rev() {
            let (layer_grads, d_inputs) =
                lstm_backward(&self.layers[i], &cache.lstm_caches[i], &d_seq);
            grads.layers[i] = layer_grads;
            d_seq = d_inputs;
        }
        for (&index, d) in cache.input_indices.iter().zip(&d_seq) {
            Embedding::accumulate_grad(&mut grads.embedding, index, d);
        }
        grads
    }

    /// State after consuming the start-of-sequence input.
    pub fn start_state(&self) -> Result<PredState> {
        let states = self
            .layers
            .iter()
            .map(|l| LstmState::zeros(l.hidden()))
            .collect();
        self.advance(
            &PredState {
                states,
                h: Array1::zeros(self.output_dim()),
            },
            self.sos_index(),
        )
    }

    /// Feeds one label (or SOS) through the stack.
    pub fn advance(&self, state: &PredState, index: usize) -> Result<PredState> {
        let mut x = self.embedding.lookup(index)?;
        let mut new_states = Vec::with_capacity(self.layers.len());
        for (layer, s) in self.layers.iter().zip(&state.states) {
            let (h, ns) = lstm_step(layer, &x, s)?;
            new_states.push(ns);
            x = h;
        }
        Ok(PredState {
            states: new_states,
            h: x,
        })
    }
}

impl Parameterized for PredictionNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.embedding.visit(&format!("{prefix}embedding/"), f);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}lstm{i}/"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.embedding.visit_mut(&format!("{prefix}embedding/"), f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}lstm{i}/"), f);
        }
    }
}

/// The full transducer: encoder, prediction network, joint network.
#[derive(Debug, Clone)]
pub struct RnntModel {
    pub encoder: EncoderNet,
    pub prediction: PredictionNet,
    pub joint: Joint,
}

/// One training evaluation: loss, parameter gradients, and the gradient
/// with respect to the input frames.
pub struct RnntStep {
    pub loss: f64,
    pub grads: RnntModel,
    pub d_frames: Vec<Array1<f64>>,
    pub lattice: LogProbLattice,
    pub grid: AlphaBetaGrid,
}

impl RnntModel {
    pub fn vocab(&self) -> usize {
        self.prediction.vocab()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            prediction: self.prediction.zeros_like(),
            joint: self.joint.zeros_like(),
        }
    }

    /// Builds the output lattice for (frames, target) without gradients.
    pub fn lattice(
        &self,
        frames: &[Array1<f64>],
        target: &TargetSequence,
    ) -> Result<LogProbLattice> {
        let (h_enc, _) = self.encoder.forward(frames)?;
        let (h_dec, _) = self.prediction.forward_targets(target.labels())?;
        let vocab = self.vocab();
        let mut logits = Vec::with_capacity(h_enc.len() * h_dec.len() * (vocab + 1));
        for he in &h_enc {
            for hd in &h_dec {
                let (z, _) = self.joint.forward(he, hd)?;
                logits.extend(z.iter());
            }
        }
        LogProbLattice::from_logits(h_enc.len(), target.len(), vocab, logits)
    }

    /// Forward pass, transducer loss, and full reverse-mode gradients.
    pub fn loss_and_grads(
        &self,
        frames: &[Array1<f64>],
        target: &TargetSequence,
    ) -> Result<RnntStep> {
        let (h_enc, enc_cache) = self.encoder.forward(frames)?;
        let (h_dec, pred_cache) = self.prediction.forward_targets(target.labels())?;
        let t_len = h_enc.len();
        let u_len = h_dec.len() - 1;
        let vocab = self.vocab();
        let width = vocab + 1;

        let mut logits = Vec::with_capacity(t_len * (u_len + 1) * width);
        let mut joint_caches = Vec::with_capacity(t_len * (u_len + 1));
        for he in &h_enc {
            for hd in &h_dec {
                let (z, jc) = self.joint.forward(he, hd)?;
                logits.extend(z.iter());
                joint_caches.push(jc);
            }
        }
        let lattice = LogProbLattice::from_logits(t_len, u_len, vocab, logits)?;
        let (loss, grid, d_logits) = rnnt_loss_and_logit_grad(&lattice, target)?;

        let mut joint_grads = self.joint.zeros_like();
        let mut d_h_enc = vec![Array1::<f64>::zeros(h_enc[0].len()); t_len];
        let mut d_h_dec = vec![Array1::<f64>::zeros(h_dec[0].len()); u_len + 1];
        for t in 0..t_len {
            for u in 0..=u_len {
                let node = t * (u_len + 1) + u;
                let dz = Array1::from_vec(d_logits[node * width..(node + 1) * width].to_vec());
                let (de, dd) = self.joint.backward(
                    &mut joint_grads,
                    &h_enc[t],
                    &h_dec[u],
                    &joint_caches[node],
                    &dz,
                );
                d_h_enc[t] += &de;
                d_h_dec[u] += &dd;
            }
        }

        let (enc_grads, d_frames) = self.encoder.backward(&enc_cache, d_h_enc, &[]);
        let pred_grads = self.prediction.backward(&pred_cache, d_h_dec);
        Ok(RnntStep {
            loss,
            grads: RnntModel {
                encoder: enc_grads,
                prediction: pred_grads,
                joint: joint_grads,
            },
            d_frames,
            lattice,
            grid,
        })
    }
}

impl Parameterized for RnntModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(&format!("{prefix}encoder/"), f);
        self.prediction.visit(&format!("{prefix}prediction/"), f);
        self.joint.visit(&format!("{prefix}joint/"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.encoder.visit_mut(&format!("{prefix}encoder/"), f);
        self.prediction.visit_mut(&format!("{prefix}prediction/"), f);
        self.joint.visit_mut(&format!("{prefix}joint/"), f);
    }
}
