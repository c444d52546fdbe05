//! Non-recurrent building blocks: embedding table, linear head, time
//! convolution, and the joint network.

use super::{init_uniform, Parameterized};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use rand::Rng;

fn visit_matrix(
    name: String,
    m: &Array2<f64>,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    f(&name, &[m.nrows(), m.ncols()], m.as_slice().expect("standard layout"));
}

fn visit_matrix_mut(
    name: String,
    m: &mut Array2<f64>,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    let shape = [m.nrows(), m.ncols()];
    f(&name, &shape, m.as_slice_mut().expect("standard layout"));
}

fn visit_vector(name: String, v: &Array1<f64>, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    f(&name, &[v.len()], v.as_slice().expect("standard layout"));
}

fn visit_vector_mut(
    name: String,
    v: &mut Array1<f64>,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    let shape = [v.len()];
    f(&name, &shape, v.as_slice_mut().expect("standard layout"));
}

/// Label embedding table, one row per input symbol.
#[derive(Debug, Clone)]
pub struct Embedding {
    /// Shape [rows, dim].
    pub table: Array2<f64>,
}

impl Embedding {
    pub fn init<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            table: Array2::from_shape_vec((rows, dim), init_uniform(rng, rows * dim))
                .expect("shape"),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            table: Array2::zeros(self.table.raw_dim()),
        }
    }

    pub fn rows(&self) -> usize {
        self.table.nrows()
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn lookup(&self, index: usize) -> Result<Array1<f64>> {
        if index >= self.rows() {
            return Err(Error::Shape(format!(
                "embedding index {index} out of range ({} rows)",
                self.rows()
            )));
        }
        Ok(self.table.row(index).to_owned())
    }

    /// Accumulates the gradient for a looked-up row.
    pub fn accumulate_grad(grad: &mut Embedding, index: usize, d: &Array1<f64>) {
        let mut row = grad.table.row_mut(index);
        row += d;
    }
}

impl Parameterized for Embedding {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_matrix(format!("{prefix}table"), &self.table, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_matrix_mut(format!("{prefix}table"), &mut self.table, f);
    }
}

/// Affine map y = Wx + b, used for CTC tap heads and LM softmax logits.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: Array2::from_shape_vec((output, input), init_uniform(rng, output * input))
                .expect("shape"),
            b: Array1::from_vec(init_uniform(rng, output)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.w.ncols() {
            return Err(Error::Shape(format!(
                "linear input dim {} != expected {}",
                x.len(),
                self.w.ncols()
            )));
        }
        Ok(self.w.dot(x) + &self.b)
    }

    /// Returns dLoss/dx and accumulates parameter gradients.
    pub fn backward(&self, grad: &mut Linear, x: &Array1<f64>, d_out: &Array1<f64>) -> Array1<f64> {
        for (r, &dv) in d_out.iter().enumerate() {
            if dv == 0.0 {
                continue;
            }
            let mut row = grad.w.row_mut(r);
            for (c, &xv) in x.iter().enumerate() {
                row[c] += dv * xv;
            }
        }
        grad.b += d_out;
        self.w.t().dot(d_out)
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_matrix(format!("{prefix}w"), &self.w, f);
        visit_vector(format!("{prefix}b"), &self.b, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_matrix_mut(format!("{prefix}w"), &mut self.w, f);
        visit_vector_mut(format!("{prefix}b"), &mut self.b, f);
    }
}

/// Learned reduction of `factor` non-overlapping consecutive activation
/// vectors into one; the final partial window is zero-padded.
#[derive(Debug, Clone)]
pub struct TimeConv {
    pub factor: usize,
    /// Shape [out_dim, factor * in_dim].
    pub filter: Array2<f64>,
    pub bias: Array1<f64>,
}

impl TimeConv {
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, factor: usize, rng: &mut R) -> Self {
        Self {
            factor,
            filter: Array2::from_shape_vec(
                (out_dim, factor * in_dim),
                init_uniform(rng, out_dim * factor * in_dim),
            )
            .expect("shape"),
            bias: Array1::from_vec(init_uniform(rng, out_dim)),
        }
    }

    /// Identity map with factor 1, for toy configs without reduction.
    pub fn identity(dim: usize) -> Self {
        Self {
            factor: 1,
            filter: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            factor: self.factor,
            filter: Array2::zeros(self.filter.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.filter.ncols() / self.factor
    }

    pub fn out_dim(&self) -> usize {
        self.filter.nrows()
    }

    /// Output length = ceil(len / factor).
    pub fn forward(&self, inputs: &[Array1<f64>]) -> Result<Vec<Array1<f64>>> {
        if self.factor == 0 {
            return Err(Error::Invalid("time-conv factor must be >= 1".into()));
        }
        let in_dim = self.in_dim();
        let mut out = Vec::with_capacity(inputs.len().div_ceil(self.factor));
        for window in inputs.chunks(self.factor) {
            let mut stacked = Array1::<f64>::zeros(self.factor * in_dim);
            for (j, x) in window.iter().enumerate() {
                if x.len() != in_dim {
                    return Err(Error::Shape(format!(
                        "time-conv input dim {} != expected {}",
                        x.len(),
                        in_dim
                    )));
                }
                stacked
                    .slice_mut(ndarray::s![j * in_dim..(j + 1) * in_dim])
                    .assign(x);
            }
            out.push(self.filter.dot(&stacked) + &self.bias);
        }
        Ok(out)
    }

    /// Accumulates parameter gradients; returns dLoss/dinput per original step.
    pub fn backward(
        &self,
        grad: &mut TimeConv,
        inputs: &[Array1<f64>],
        d_outputs: &[Array1<f64>],
    ) -> Vec<Array1<f64>> {
        let in_dim = self.in_dim();
        let mut d_inputs = vec![Array1::<f64>::zeros(in_dim); inputs.len()];
        for (w, (window, d_out)) in inputs.chunks(self.factor).zip(d_outputs).enumerate() {
            let mut stacked = Array1::<f64>::zeros(self.factor * in_dim);
            for (j, x) in window.iter().enumerate() {
                stacked
                    .slice_mut(ndarray::s![j * in_dim..(j + 1) * in_dim])
                    .assign(x);
            }
            for (r, &dv) in d_out.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                let mut row = grad.filter.row_mut(r);
                for (c, &sv) in stacked.iter().enumerate() {
                    row[c] += dv * sv;
                }
            }
            grad.bias += d_out;
            let d_stacked = self.filter.t().dot(d_out);
            for j in 0..window.len() {
                let seg = d_stacked.slice(ndarray::s![j * in_dim..(j + 1) * in_dim]);
                d_inputs[w * self.factor + j] += &seg;
            }
        }
        d_inputs
    }
}

impl Parameterized for TimeConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_matrix(format!("{prefix}filter"), &self.filter, f);
        visit_vector(format!("{prefix}bias"), &self.bias, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_matrix_mut(format!("{prefix}filter"), &mut self.filter, f);
        visit_vector_mut(format!("{prefix}bias"), &mut self.bias, f);
    }
}

/// Joint network: logits = W_out tanh(P_enc h_enc + P_dec h_dec + b) + b_out.
#[derive(Debug, Clone)]
pub struct Joint {
    pub p_enc: Array2<f64>,
    pub p_dec: Array2<f64>,
    pub b: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

/// Forward activations the joint backward pass needs.
pub struct JointCache {
    pub hidden: Array1<f64>,
}

impl Joint {
    pub fn init<R: Rng>(
        enc_dim: usize,
        dec_dim: usize,
        hidden: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            p_enc: Array2::from_shape_vec((hidden, enc_dim), init_uniform(rng, hidden * enc_dim))
                .expect("shape"),
            p_dec: Array2::from_shape_vec((hidden, dec_dim), init_uniform(rng, hidden * dec_dim))
                .expect("shape"),
            b: Array1::from_vec(init_uniform(rng, hidden)),
            w_out: Array2::from_shape_vec((outputs, hidden), init_uniform(rng, outputs * hidden))
                .expect("shape"),
            b_out: Array1::from_vec(init_uniform(rng, outputs)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            p_enc: Array2::zeros(self.p_enc.raw_dim()),
            p_dec: Array2::zeros(self.p_dec.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            w_out: Array2::zeros(self.w_out.raw_dim()),
            b_out: Array1::zeros(self.b_out.raw_dim()),
        }
    }

    pub fn outputs(&self) -> usize {
        self.w_out.nrows()
    }

    pub fn forward(
        &self,
        h_enc: &Array1<f64>,
        h_dec: &Array1<f64>,
    ) -> Result<(Array1<f64>, JointCache)> {
        if h_enc.len() != self.p_enc.ncols() {
            return Err(Error::Shape(format!(
                "joint encoder input dim {} != expected {}",
                h_enc.len(),
                self.p_enc.ncols()
            )));
        }
        if h_dec.len() != self.p_dec.ncols() {
            return Err(Error::Shape(format!(
                "joint decoder input dim {} != expected {}",
                h_dec.len(),
                self.p_dec.ncols()
            )));
        }
        let hidden = (self.p_enc.dot(h_enc) + self.p_dec.dot(h_dec) + &self.b).mapv(f64::tanh);
        let logits = self.w_out.dot(&hidden) + &self.b_out;
        Ok((logits, JointCache { hidden }))
    }

    /// Accumulates parameter gradients; returns (dLoss/dh_enc, dLoss/dh_dec).
    pub fn backward(
        &self,
        grad: &mut Joint,
        h_enc: &Array1<f64>,
        h_dec: &Array1<f64>,
        cache: &JointCache,
        d_logits: &Array1<f64>,
    ) -> (Array1<f64>, Array1<f64>) {
        for (r, &dv) in d_logits.iter().enumerate() {
            if dv != 0.0 {
                let mut row = grad.w_out.row_mut(r);
                for (c, &hv) in cache.hidden.iter().enumerate() {
                    row[c] += dv * hv;
                }
            }
        }
        grad.b_out += d_logits;
        let d_hidden = self.w_out.t().dot(d_logits) * cache.hidden.mapv(|v| 1.0 - v * v);
        for (r, &dv) in d_hidden.iter().enumerate() {
            if dv != 0.0 {
                let mut row_e = grad.p_enc.row_mut(r);
                for (c, &xv) in h_enc.iter().enumerate() {
                    row_e[c] += dv * xv;
                }
                let mut row_d = grad.p_dec.row_mut(r);
                for (c, &xv) in h_dec.iter().enumerate() {
                    row_d[c] += dv * xv;
                }
            }
        }
        grad.b += &d_hidden;
        (self.p_enc.t().dot(&d_hidden), self.p_dec.t().dot(&d_hidden))
    }
}

impl Parameterized for Joint {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_matrix(format!("{prefix}p_enc"), &self.p_enc, f);
        visit_matrix(format!("{prefix}p_dec"), &self.p_dec, f);
        visit_vector(format!("{prefix}b"), &self.b, f);
        visit_matrix(format!("{prefix}w_out"), &self.w_out, f);
        visit_vector(format!("{prefix}b_out"), &self.b_out, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_matrix_mut(format!("{prefix}p_enc"), &mut self.p_enc, f);
        visit_matrix_mut(format!("{prefix}p_dec"), &mut self.p_dec, f);
        visit_vector_mut(format!("{prefix}b"), &mut self.b, f);
        visit_matrix_mut(format!("{prefix}w_out"), &mut self.w_out, f);
        visit_vector_mut(format!("{prefix}b_out"), &mut self.b_out, f);
    }
}
