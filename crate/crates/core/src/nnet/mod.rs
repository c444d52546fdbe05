//! Minimal recurrent network core with exact reverse-mode gradients.

mod checkpoint;
mod layers;
mod lstm;
mod models;

pub use checkpoint::{Checkpoint, CheckpointMeta, NameMap, TensorData, TransferReport, load_partial};
pub use layers::{Embedding, Joint, JointCache, Linear, TimeConv};
pub use lstm::{lstm_backward, lstm_forward, lstm_step, LstmCache, LstmParams, LstmState};
pub use models::{
    EncoderCache, EncoderNet, PredState, PredictionCache, PredictionNet, RnntModel,
};

use rand::Rng;
use std::collections::HashMap;

/// Anything made of named, flat f64 tensors: models and their gradient
/// containers (which share the same struct type, so names always align).
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));
}

pub fn init_uniform<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-0.05..=0.05)).collect()
}

/// Collects all tensors as (name, shape, data).
pub fn collect_named(p: &impl Parameterized) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, shape, data| {
        out.push((name.to_string(), shape.to_vec(), data.to_vec()));
    });
    out
}

pub fn global_norm(p: &impl Parameterized) -> f64 {
    let mut sq = 0.0;
    p.visit("", &mut |_, _, data| {
        sq += data.iter().map(|v| v * v).sum::<f64>();
    });
    sq.sqrt()
}

/// Scales every tensor in place.
pub fn scale(p: &mut impl Parameterized, c: f64) {
    p.visit_mut("", &mut |_, _, data| {
        for v in data {
            *v *= c;
        }
    });
}

/// dst += src, paired by tensor name.
pub fn add_assign<P: Parameterized>(dst: &mut P, src: &P) {
    let mut by_name: HashMap<String, Vec<f64>> = HashMap::new();
    src.visit("", &mut |name, _, data| {
        by_name.insert(name.to_string(), data.to_vec());
    });
    dst.visit_mut("", &mut |name, _, data| {
        let s = by_name
            .get(name)
            .unwrap_or_else(|| panic!("gradient tensor {name} missing"));
        for (d, v) in data.iter_mut().zip(s) {
            *d += v;
        }
    });
}

/// Clips the global gradient norm in place; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut impl Parameterized, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        scale(grads, max_norm / norm);
    }
    norm
}

/// params -= lr * grads, paired by tensor name.
pub fn sgd_step<P: Parameterized>(params: &mut P, grads: &P, lr: f64) {
    let mut by_name: HashMap<String, Vec<f64>> = HashMap::new();
    grads.visit("", &mut |name, _, data| {
        by_name.insert(name.to_string(), data.to_vec());
    });
    params.visit_mut("", &mut |name, _, data| {
        let g = by_name
            .get(name)
            .unwrap_or_else(|| panic!("gradient tensor {name} missing"));
        for (p, gv) in data.iter_mut().zip(g) {
            *p -= lr * gv;
        }
    });
}
