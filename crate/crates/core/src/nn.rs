//! Dense and GRU layers with explicit backward passes.
//!
//! All layers work on row-major batches: an input of shape `B×in` holds one
//! example per row. Gradients are accumulated into a parameter struct of the
//! same type as the layer, so optimizers can treat "weights" and "gradients"
//! uniformly through [`Parameters`].

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Flat access to every trainable tensor of a model.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<(&'static str, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }
}

pub(crate) fn slice_of(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameter arrays are contiguous")
}

pub(crate) fn slice_of_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter arrays are contiguous")
}

pub(crate) fn vec_of(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameter arrays are contiguous")
}

pub(crate) fn vec_of_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter arrays are contiguous")
}

/// Uniform in ±1/√fan_in.
pub(crate) fn uniform_matrix(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut Rng,
) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

/// Zero `grad` wherever the forward output was not positive.
pub fn relu_backward(output: &Array2<f64>, grad: &mut Array2<f64>) {
    Zip::from(grad).and(output).for_each(|g, &y| {
        if y <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Affine map `y = x·Wᵀ + b` with `W` of shape `out×in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn init(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Self {
            weight: uniform_matrix(outputs, inputs, inputs, rng),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    /// `x Wᵀ + b`, always in standard layout.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = Array2::zeros((x.nrows(), self.weight.nrows()));
        general_mat_mul(1.0, x, &self.weight.t(), 0.0, &mut y);
        y += &self.bias;
        y
    }

    /// Accumulate parameter gradients into `grad`; returns `∂L/∂x`.
    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        dy: &ArrayView2<f64>,
        grad: &mut Dense,
    ) -> Array2<f64> {
        self.backward_params(x, dy, grad);
        dy.dot(&self.weight)
    }

    pub fn backward_params(&self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>, grad: &mut Dense) {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
    }

    pub(crate) fn push_tensors<'a>(
        &'a self,
        out: &mut Vec<(&'static str, &'a [f64])>,
        w: &'static str,
        b: &'static str,
    ) {
        out.push((w, slice_of(&self.weight)));
        out.push((b, vec_of(&self.bias)));
    }

    pub(crate) fn push_tensors_mut<'a>(
        &'a mut self,
        out: &mut Vec<(&'static str, &'a mut [f64])>,
        w: &'static str,
        b: &'static str,
    ) {
        out.push((w, slice_of_mut(&mut self.weight)));
        out.push((b, vec_of_mut(&mut self.bias)));
    }
}

impl Parameters for Dense {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = Vec::new();
        self.push_tensors(&mut out, "weight", "bias");
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = Vec::new();
        self.push_tensors_mut(&mut out, "weight", "bias");
        out
    }
}

/// Two dense layers with a rectifier in between: `in → hidden → out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp2 {
    pub first: Dense,
    pub second: Dense,
}

pub struct Mlp2Trace {
    input: Array2<f64>,
    hidden: Array2<f64>,
}

impl Mlp2 {
    pub fn init(inputs: usize, hidden: usize, outputs: usize, rng: &mut Rng) -> Self {
        Self {
            first: Dense::init(inputs, hidden, rng),
            second: Dense::init(hidden, outputs, rng),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, Mlp2Trace) {
        let mut hidden = self.first.forward(x);
        relu_inplace(&mut hidden);
        let y = self.second.forward(&hidden.view());
        (
            y,
            Mlp2Trace {
                input: x.to_owned(),
                hidden,
            },
        )
    }

    pub fn backward(
        &self,
        trace: &Mlp2Trace,
        dy: &ArrayView2<f64>,
        grad: &mut Mlp2,
    ) -> Array2<f64> {
        let mut dh = self
            .second
            .backward(&trace.hidden.view(), dy, &mut grad.second);
        relu_backward(&trace.hidden, &mut dh);
        self.first
            .backward(&trace.input.view(), &dh.view(), &mut grad.first)
    }

    /// Tensors named `[first.weight, first.bias, second.weight, second.bias]`.
    pub(crate) fn push_tensors<'a>(
        &'a self,
        out: &mut Vec<(&'static str, &'a [f64])>,
        names: [&'static str; 4],
    ) {
        self.first.push_tensors(out, names[0], names[1]);
        self.second.push_tensors(out, names[2], names[3]);
    }

    pub(crate) fn push_tensors_mut<'a>(
        &'a mut self,
        out: &mut Vec<(&'static str, &'a mut [f64])>,
        names: [&'static str; 4],
    ) {
        self.first.push_tensors_mut(out, names[0], names[1]);
        self.second.push_tensors_mut(out, names[2], names[3]);
    }
}

impl Parameters for Mlp2 {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = Vec::new();
        self.push_tensors(
            &mut out,
            ["first.weight", "first.bias", "second.weight", "second.bias"],
        );
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = Vec::new();
        self.push_tensors_mut(
            &mut out,
            ["first.weight", "first.bias", "second.weight", "second.bias"],
        );
        out
    }
}

/// One direction of a single-layer GRU with one bias vector per gate.
///
/// Gate rows are stacked `[reset; update; candidate]`:
///
/// ```text
/// r  = σ(W_r x + U_r h + b_r)
/// u  = σ(W_u x + U_u h + b_u)
/// n  = tanh(W_n x + b_n + r ⊙ (U_n h))
/// h' = (1 − u) ⊙ n + u ⊙ h
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    pub w_input: Array2<f64>,
    pub w_hidden: Array2<f64>,
    pub bias: Array1<f64>,
}

struct GruStep {
    h_prev: Array2<f64>,
    reset: Array2<f64>,
    update: Array2<f64>,
    cand: Array2<f64>,
    hidden_cand: Array2<f64>,
}

/// Cached activations of one pass over a sequence.
pub struct GruTrace {
    inputs: Vec<Array2<f64>>,
    steps: Vec<GruStep>,
    reverse: bool,
}

impl Gru {
    pub fn init(inputs: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w_input: uniform_matrix(3 * hidden, inputs, hidden, rng),
            w_hidden: uniform_matrix(3 * hidden, hidden, hidden, rng),
            bias: Array1::zeros(3 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.ncols()
    }

    pub fn inputs(&self) -> usize {
        self.w_input.ncols()
    }

    /// Run over `inputs` (one `B×in` matrix per step) from a zero state,
    /// back to front when `reverse`. Returns the final hidden state.
    pub fn forward(&self, inputs: Vec<Array2<f64>>, reverse: bool) -> (Array2<f64>, GruTrace) {
        let hs = self.hidden();
        let batch = inputs.first().map_or(0, |x| x.nrows());
        let mut h = Array2::zeros((batch, hs));
        let mut steps = Vec::with_capacity(inputs.len());
        let order: Vec<usize> = if reverse {
            (0..inputs.len()).rev().collect()
        } else {
            (0..inputs.len()).collect()
        };
        let bias = vec_of(&self.bias);
        for &i in &order {
            let mut gi = Array2::zeros((batch, 3 * hs));
            general_mat_mul(1.0, &inputs[i], &self.w_input.t(), 0.0, &mut gi);
            let mut gh = Array2::zeros((batch, 3 * hs));
            general_mat_mul(1.0, &h, &self.w_hidden.t(), 0.0, &mut gh);
            let mut reset = Array2::zeros((batch, hs));
            let mut update = Array2::zeros((batch, hs));
            let mut cand = Array2::zeros((batch, hs));
            let mut hidden_cand = Array2::zeros((batch, hs));
            let mut h_next = Array2::zeros((batch, hs));
            for b in 0..batch {
                let gi = &gi.as_slice().expect("fresh product")[b * 3 * hs..(b + 1) * 3 * hs];
                let gh = &gh.as_slice().expect("fresh product")[b * 3 * hs..(b + 1) * 3 * hs];
                let hp = &h.as_slice().expect("contiguous state")[b * hs..(b + 1) * hs];
                let row = b * hs..(b + 1) * hs;
                let r_out = &mut reset.as_slice_mut().unwrap()[row.clone()];
                let u_out = &mut update.as_slice_mut().unwrap()[row.clone()];
                let n_out = &mut cand.as_slice_mut().unwrap()[row.clone()];
                let hc_out = &mut hidden_cand.as_slice_mut().unwrap()[row.clone()];
                let h_out = &mut h_next.as_slice_mut().unwrap()[row];
                for j in 0..hs {
                    let r = sigmoid(gi[j] + gh[j] + bias[j]);
                    let u = sigmoid(gi[hs + j] + gh[hs + j] + bias[hs + j]);
                    let hc = gh[2 * hs + j];
                    let n = (gi[2 * hs + j] + bias[2 * hs + j] + r * hc).tanh();
                    r_out[j] = r;
                    u_out[j] = u;
                    n_out[j] = n;
                    hc_out[j] = hc;
                    h_out[j] = (1.0 - u) * n + u * hp[j];
                }
            }
            steps.push(GruStep {
                h_prev: h,
                reset,
                update,
                cand,
                hidden_cand,
            });
            h = h_next;
        }
        (
            h,
            GruTrace {
                inputs,
                steps,
                reverse,
            },
        )
    }

    /// Backpropagate `dh_final` through the pass recorded in `trace`.
    /// Returns `∂L/∂input` per step in the original (forward) order.
    pub fn backward(
        &self,
        trace: &GruTrace,
        dh_final: &Array2<f64>,
        grad: &mut Gru,
    ) -> Vec<Array2<f64>> {
        let hs = self.hidden();
        let len = trace.inputs.len();
        let batch = dh_final.nrows();
        let mut dx = vec![Array2::zeros((0, 0)); len];
        let mut dh = dh_final.as_standard_layout().into_owned();
        let order: Vec<usize> = if trace.reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for (k, &i) in order.iter().enumerate().rev() {
            let st = &trace.steps[k];
            let mut dgi = Array2::zeros((batch, 3 * hs));
            let mut dgh = Array2::zeros((batch, 3 * hs));
            let mut dh_prev = Array2::zeros((batch, hs));
            {
                let (r_all, u_all, n_all) = (
                    st.reset.as_slice().unwrap(),
                    st.update.as_slice().unwrap(),
                    st.cand.as_slice().unwrap(),
                );
                let (hp_all, hc_all) = (
                    st.h_prev.as_slice().unwrap(),
                    st.hidden_cand.as_slice().unwrap(),
                );
                let dh_all = dh.as_slice().unwrap();
                let dgi_all = dgi.as_slice_mut().unwrap();
                let dgh_all = dgh.as_slice_mut().unwrap();
                let dhp_all = dh_prev.as_slice_mut().unwrap();
                for b in 0..batch {
                    let o = b * hs;
                    let g3 = b * 3 * hs;
                    for j in 0..hs {
                        let (r, u, n) = (r_all[o + j], u_all[o + j], n_all[o + j]);
                        let g = dh_all[o + j];
                        let dn = g * (1.0 - u);
                        let du = g * (hp_all[o + j] - n);
                        dhp_all[o + j] = g * u;
                        let dan = dn * (1.0 - n * n);
                        let dr = dan * hc_all[o + j];
                        let dar = dr * r * (1.0 - r);
                        let dau = du * u * (1.0 - u);
                        dgi_all[g3 + j] = dar;
                        dgi_all[g3 + hs + j] = dau;
                        dgi_all[g3 + 2 * hs + j] = dan;
                        dgh_all[g3 + j] = dar;
                        dgh_all[g3 + hs + j] = dau;
                        dgh_all[g3 + 2 * hs + j] = dan * r;
                    }
                }
            }
            grad.bias += &dgi.sum_axis(Axis(0));
            grad.w_input += &dgi.t().dot(&trace.inputs[i]);
            grad.w_hidden += &dgh.t().dot(&st.h_prev);
            dx[i] = dgi.dot(&self.w_input);
            dh_prev += &dgh.dot(&self.w_hidden);
            dh = dh_prev;
        }
        dx
    }

    pub(crate) fn push_tensors<'a>(
        &'a self,
        out: &mut Vec<(&'static str, &'a [f64])>,
        names: [&'static str; 3],
    ) {
        out.push((names[0], slice_of(&self.w_input)));
        out.push((names[1], slice_of(&self.w_hidden)));
        out.push((names[2], vec_of(&self.bias)));
    }

    pub(crate) fn push_tensors_mut<'a>(
        &'a mut self,
        out: &mut Vec<(&'static str, &'a mut [f64])>,
        names: [&'static str; 3],
    ) {
        out.push((names[0], slice_of_mut(&mut self.w_input)));
        out.push((names[1], slice_of_mut(&mut self.w_hidden)));
        out.push((names[2], vec_of_mut(&mut self.bias)));
    }
}

impl Parameters for Gru {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = Vec::new();
        self.push_tensors(&mut out, ["w_input", "w_hidden", "bias"]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = Vec::new();
        self.push_tensors_mut(&mut out, ["w_input", "w_hidden", "bias"]);
        out
    }
}
