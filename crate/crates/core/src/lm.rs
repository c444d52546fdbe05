//! LSTM language model over grapheme or wordpiece units: next-label
//! cross-entropy training and word-level perplexity evaluation.
//!
//! The LM vocabulary is the unit inventory plus an end-of-sentence symbol
//! (output side) and a start symbol (input side); both use index `vocab`.
//! The softmax head is discarded when transferring into a prediction
//! network, and the embedding transfers only on a vocabulary hash match.

use crate::error::{Error, Result};
use crate::math::log_softmax;
use crate::nnet::{
    lstm_backward, lstm_forward, Embedding, Linear, LstmCache, LstmParams, LstmState,
    Parameterized,
};
use ndarray::Array1;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct LmModel {
    /// Optional input embedding; without it labels enter as one-hot vectors.
    pub embedding: Option<Embedding>,
    pub layers: Vec<LstmParams>,
    /// Softmax head over vocab + 1 classes (units + end-of-sentence).
    pub head: Linear,
    vocab: usize,
}

impl LmModel {
    pub fn init<R: Rng>(
        vocab: usize,
        embed_dim: Option<usize>,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Invalid("LM needs at least one LSTM layer".into()));
        }
        let embedding = embed_dim.map(|d| Embedding::init(vocab + 1, d, rng));
        let mut dim = embed_dim.unwrap_or(vocab + 1);
        let mut layers = Vec::with_capacity(widths.len());
        for &w in widths {
            layers.push(LstmParams::init(dim, w, rng));
            dim = w;
        }
        let head = Linear::init(dim, vocab + 1, rng);
        Ok(Self {
            embedding,
            layers,
            head,
            vocab,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embedding: self.embedding.as_ref().map(Embedding::zeros_like),
            layers: self.layers.iter().map(LstmParams::zeros_like).collect(),
            head: self.head.zeros_like(),
            vocab: self.vocab,
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Start-of-sentence (input) and end-of-sentence (output) index.
    pub fn boundary_index(&self) -> usize {
        self.vocab
    }

    fn input_vector(&self, index: usize) -> Result<Array1<f64>> {
        match &self.embedding {
            Some(emb) => emb.lookup(index),
            None => {
                let mut v = Array1::zeros(self.vocab + 1);
                v[index] = 1.0;
                Ok(v)
            }
        }
    }

    /// Per-position next-label log-probabilities for one sequence, plus the
    /// caches needed for the backward pass.
    fn forward(&self, labels: &[usize]) -> Result<LmForward> {
        if labels.is_empty() {
            return Err(Error::Invalid("LM sequence must be nonempty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.vocab) {
            return Err(Error::Invalid(format!(
                "label {bad} out of LM vocabulary {}",
                self.vocab
            )));
        }
        let mut inputs = Vec::with_capacity(labels.len() + 1);
        inputs.push(self.boundary_index());
        inputs.extend_from_slice(labels);
        let mut seq: Vec<Array1<f64>> = inputs
            .iter()
            .map(|&i| self.input_vector(i))
            .collect::<Result<_>>()?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = lstm_forward(layer, &seq, &LstmState::zeros(layer.hidden()))?;
            caches.push(cache);
            seq = out;
        }
        let mut targets = Vec::with_capacity(labels.len() + 1);
        targets.extend_from_slice(labels);
        targets.push(self.boundary_index());
        Ok(LmForward {
            input_indices: inputs,
            hidden: seq,
            caches,
            targets,
        })
    }
}

struct LmForward {
    input_indices: Vec<usize>,
    hidden: Vec<Array1<f64>>,
    caches: Vec<LstmCache>,
    targets: Vec<usize>,
}

impl Parameterized for LmModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        if let Some(emb) = &self.embedding {
            emb.visit(&format!("{prefix}embedding/"), f);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}lstm{i}/"), f);
        }
        self.head.visit(&format!("{prefix}softmax/"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        if let Some(emb) = &mut self.embedding {
            emb.visit_mut(&format!("{prefix}embedding/"), f);
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}lstm{i}/"), f);
        }
        self.head.visit_mut(&format!("{prefix}softmax/"), f);
    }
}

/// Cross-entropy over a batch of label sequences: the start symbol opens
/// each sequence and the final position predicts end-of-sentence.
/// Returns (mean per-label loss, parameter gradients of that mean).
pub fn lm_train_step(model: &LmModel, batch: &[Vec<usize>]) -> Result<(f64, LmModel)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty LM batch".into()));
    }
    let total_positions: usize = batch.iter().map(|s| s.len() + 1).sum();
    let scale = 1.0 / total_positions as f64;
    let mut total_loss = 0.0;
    let mut grads = model.zeros_like();

    for labels in batch {
        let fwd = model.forward(labels)?;
        let mut d_hidden = vec![Array1::<f64>::zeros(fwd.hidden[0].len()); fwd.hidden.len()];
        for (pos, (h, &target)) in fwd.hidden.iter().zip(&fwd.targets).enumerate() {
            let logits = model.head.forward(h)?;
            let log_probs = log_softmax(logits.as_slice().expect("contiguous"));
            total_loss -= log_probs[target];
            // dLoss/dlogits = softmax - onehot, scaled to the batch mean.
            let mut d_logits = Array1::from_vec(log_probs.iter().map(|lp| lp.exp()).collect());
            d_logits[target] -= 1.0;
            d_logits *= scale;
            d_hidden[pos] = model.head.backward(&mut grads.head, h, &d_logits);
        }
        let mut d_seq = d_hidden;
        for i in (0..model.layers.len()).rev() {
            let (layer_grads, d_inputs) = lstm_backward(&model.layers[i], &fwd.caches[i], &d_seq);
            crate::nnet::add_assign(&mut grads.layers[i], &layer_grads);
            d_seq = d_inputs;
        }
        if let Some(emb_grads) = &mut grads.embedding {
            for (&index, d) in fwd.input_indices.iter().zip(&d_seq) {
                Embedding::accumulate_grad(emb_grads, index, d);
            }
        }
    }
    Ok((total_loss * scale, grads))
}

/// Total label-level negative log-likelihood of a corpus (nats).
/// `corpus` pairs each segmented sentence with its word count.
pub fn corpus_nll(model: &LmModel, corpus: &[(Vec<usize>, usize)]) -> Result<(f64, usize)> {
    let mut nll = 0.0;
    let mut words = 0;
    for (labels, word_count) in corpus {
        let fwd = model.forward(labels)?;
        for (h, &target) in fwd.hidden.iter().zip(&fwd.targets) {
            let logits = model.head.forward(h)?;
            let log_probs = log_softmax(logits.as_slice().expect("contiguous"));
            nll -= log_probs[target];
        }
        words += word_count;
    }
    Ok((nll, words))
}

/// Word perplexity: exp(total label NLL / total word count). Normalizing
/// per word keeps grapheme and wordpiece models comparable.
pub fn word_perplexity(model: &LmModel, corpus: &[(Vec<usize>, usize)]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Invalid("empty evaluation corpus".into()));
    }
    let (nll, words) = corpus_nll(model, corpus)?;
    if words == 0 {
        return Err(Error::Invalid("corpus has no words".into()));
    }
    Ok((nll / words as f64).exp())
}
