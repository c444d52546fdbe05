//! Standard LSTM cell (no peepholes, no projection) with backpropagation
//! through time. Gate order in the stacked weight matrices: input, forget,
//! cell candidate, output.

use super::{init_uniform, Parameterized};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use rand::Rng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
pub struct LstmParams {
    /// Input weights, shape [4H, I].
    pub w_x: Array2<f64>,
    /// Recurrent weights, shape [4H, H].
    pub w_h: Array2<f64>,
    /// Bias, shape [4H].
    pub b: Array1<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: Array2::zeros((4 * hidden, input)),
            w_h: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    /// Uniform [-0.05, 0.05] init, forget-gate bias set to 1.0.
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let w_x = Array2::from_shape_vec((4 * hidden, input), init_uniform(rng, 4 * hidden * input))
            .expect("shape");
        let w_h =
            Array2::from_shape_vec((4 * hidden, hidden), init_uniform(rng, 4 * hidden * hidden))
                .expect("shape");
        let mut b = Array1::from_vec(init_uniform(rng, 4 * hidden));
        for j in hidden..2 * hidden {
            b[j] = 1.0;
        }
        Self { w_x, w_h, b }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_x: Array2::zeros(self.w_x.raw_dim()),
            w_h: Array2::zeros(self.w_h.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.ncols()
    }
}

impl Parameterized for LstmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(
            &format!("{prefix}w_x"),
            &[self.w_x.nrows(), self.w_x.ncols()],
            self.w_x.as_slice().expect("standard layout"),
        );
        f(
            &format!("{prefix}w_h"),
            &[self.w_h.nrows(), self.w_h.ncols()],
            self.w_h.as_slice().expect("standard layout"),
        );
        f(&format!("{prefix}b"), &[self.b.len()], self.b.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = [self.w_x.nrows(), self.w_x.ncols()];
        f(&format!("{prefix}w_x"), &shape, self.w_x.as_slice_mut().expect("standard layout"));
        let shape = [self.w_h.nrows(), self.w_h.ncols()];
        f(&format!("{prefix}w_h"), &shape, self.w_h.as_slice_mut().expect("standard layout"));
        let shape = [self.b.len()];
        f(&format!("{prefix}b"), &shape, self.b.as_slice_mut().expect("standard layout"));
    }
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Array1<f64>,
    pub c: Array1<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: Array1::zeros(hidden),
            c: Array1::zeros(hidden),
        }
    }
}

struct StepInternals {
    i: Array1<f64>,
    f: Array1<f64>,
    g: Array1<f64>,
    o: Array1<f64>,
    c_new: Array1<f64>,
}

fn step_internals(params: &LstmParams, x: &Array1<f64>, state: &LstmState) -> StepInternals {
    let h = params.hidden();
    let pre = params.w_x.dot(x) + params.w_h.dot(&state.h) + &params.b;
    let i = pre.slice(ndarray::s![0..h]).mapv(sigmoid);
    let f = pre.slice(ndarray::s![h..2 * h]).mapv(sigmoid);
    let g = pre.slice(ndarray::s![2 * h..3 * h]).mapv(f64::tanh);
    let o = pre.slice(ndarray::s![3 * h..4 * h]).mapv(sigmoid);
    let c_new = &f * &state.c + &i * &g;
    StepInternals { i, f, g, o, c_new }
}

/// One LSTM step: (output, new state).
pub fn lstm_step(
    params: &LstmParams,
    x: &Array1<f64>,
    state: &LstmState,
) -> Result<(Array1<f64>, LstmState)> {
    if x.len() != params.input_dim() {
        return Err(Error::Shape(format!(
            "lstm input dim {} != expected {}",
            x.len(),
            params.input_dim()
        )));
    }
    if state.h.len() != params.hidden() || state.c.len() != params.hidden() {
        return Err(Error::Shape(format!(
            "lstm state dim {} != hidden {}",
            state.h.len(),
            params.hidden()
        )));
    }
    let s = step_internals(params, x, state);
    let h_new = &s.o * &s.c_new.mapv(f64::tanh);
    Ok((
        h_new.clone(),
        LstmState {
            h: h_new,
            c: s.c_new,
        },
    ))
}

/// Everything BPTT needs, recorded during the forward pass.
pub struct LstmCache {
    xs: Vec<Array1<f64>>,
    i: Vec<Array1<f64>>,
    f: Vec<Array1<f64>>,
    g: Vec<Array1<f64>>,
    o: Vec<Array1<f64>>,
    c: Vec<Array1<f64>>,
    hs: Vec<Array1<f64>>,
    h0: Array1<f64>,
    c0: Array1<f64>,
}

/// Runs the cell over a sequence, caching per-step activations.
pub fn lstm_forward(
    params: &LstmParams,
    inputs: &[Array1<f64>],
    state0: &LstmState,
) -> Result<(Vec<Array1<f64>>, LstmCache)> {
    let mut cache = LstmCache {
        xs: Vec::with_capacity(inputs.len()),
        i: Vec::with_capacity(inputs.len()),
        f: Vec::with_capacity(inputs.len()),
        g: Vec::with_capacity(inputs.len()),
        o: Vec::with_capacity(inputs.len()),
        c: Vec::with_capacity(inputs.len()),
        hs: Vec::with_capacity(inputs.len()),
        h0: state0.h.clone(),
        c0: state0.c.clone(),
    };
    let mut state = state0.clone();
    let mut outputs = Vec::with_capacity(inputs.len());
    for x in inputs {
        if x.len() != params.input_dim() {
            return Err(Error::Shape(format!(
                "lstm input dim {} != expected {}",
                x.len(),
                params.input_dim()
            )));
        }
        let s = step_internals(params, x, &state);
        let h_new = &s.o * &s.c_new.mapv(f64::tanh);
        cache.xs.push(x.clone());
        cache.i.push(s.i);
        cache.f.push(s.f);
        cache.g.push(s.g);
        cache.o.push(s.o);
        cache.c.push(s.c_new.clone());
        cache.hs.push(h_new.clone());
        state = LstmState {
            h: h_new.clone(),
            c: s.c_new,
        };
        outputs.push(h_new);
    }
    Ok((outputs, cache))
}

fn outer_add(dst: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    for (r, &av) in a.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let mut row = dst.row_mut(r);
        for (c, &bv) in b.iter().enumerate() {
            row[c] += av * bv;
        }
    }
}

/// Backpropagation through time. `d_outputs[t]` is dLoss/dh_t.
/// Returns (parameter gradients, dLoss/dx_t per step).
pub fn lstm_backward(
    params: &LstmParams,
    cache: &LstmCache,
    d_outputs: &[Array1<f64>],
) -> (LstmParams, Vec<Array1<f64>>) {
    let steps = cache.xs.len();
    assert_eq!(d_outputs.len(), steps, "one output gradient per step");
    let hidden = params.hidden();
    let mut grads = params.zeros_like();
    let mut d_inputs = vec![Array1::zeros(params.input_dim()); steps];
    let mut dh_next = Array1::<f64>::zeros(hidden);
    let mut dc_next = Array1::<f64>::zeros(hidden);

    for t in (0..steps).rev() {
        let dh = &d_outputs[t] + &dh_next;
        let tanh_c = cache.c[t].mapv(f64::tanh);
        let d_o = &dh * &tanh_c;
        let dc = &dc_next + &(&dh * &cache.o[t] * &tanh_c.mapv(|v| 1.0 - v * v));
        let c_prev = if t == 0 { &cache.c0 } else { &cache.c[t - 1] };
        let d_i = &dc * &cache.g[t];
        let d_f = &dc * c_prev;
        let d_g = &dc * &cache.i[t];

        // Pre-activation gradients, gate order i|f|g|o.
        let mut d_pre = Array1::<f64>::zeros(4 * hidden);
        for j in 0..hidden {
            let iv = cache.i[t][j];
            let fv = cache.f[t][j];
            let gv = cache.g[t][j];
            let ov = cache.o[t][j];
            d_pre[j] = d_i[j] * iv * (1.0 - iv);
            d_pre[hidden + j] = d_f[j] * fv * (1.0 - fv);
            d_pre[2 * hidden + j] = d_g[j] * (1.0 - gv * gv);
            d_pre[3 * hidden + j] = d_o[j] * ov * (1.0 - ov);
        }

        let h_prev = if t == 0 { &cache.h0 } else { &cache.hs[t - 1] };
        outer_add(&mut grads.w_x, &d_pre, &cache.xs[t]);
        outer_add(&mut grads.w_h, &d_pre, h_prev);
        grads.b += &d_pre;

        d_inputs[t] = params.w_x.t().dot(&d_pre);
        dh_next = params.w_h.t().dot(&d_pre);
        dc_next = &dc * &cache.f[t];
    }
    (grads, d_inputs)
}
