//! Minimal feed-forward layers with hand-written backward passes.
//!
//! Activations are batch-major matrices; convolution maps are flattened as
//! `channel, row, column` within a row.

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    /// Valid (unpadded) strided convolution.
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        in_side: usize,
    },
    Affine {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Tanh,
}

impl LayerSpec {
    pub fn input_len(&self, prev: usize) -> usize {
        match *self {
            LayerSpec::Conv { in_ch, in_side, .. } => in_ch * in_side * in_side,
            LayerSpec::Affine { inputs, .. } => inputs,
            _ => prev,
        }
    }

    pub fn output_len(&self, input: usize) -> usize {
        match *self {
            LayerSpec::Conv { out_ch, .. } => out_ch * self.out_side() * self.out_side(),
            LayerSpec::Affine { outputs, .. } => outputs,
            LayerSpec::Relu | LayerSpec::Tanh => input,
        }
    }

    pub fn out_side(&self) -> usize {
        match *self {
            LayerSpec::Conv { kernel, stride, in_side, .. } => (in_side - kernel) / stride + 1,
            _ => 0,
        }
    }

    /// `(weight_len, bias_len)`.
    pub fn param_shape(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv { in_ch, out_ch, kernel, .. } => (out_ch * in_ch * kernel * kernel, out_ch),
            LayerSpec::Affine { inputs, outputs } => (inputs * outputs, outputs),
            _ => (0, 0),
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
            LayerSpec::Affine { inputs, .. } => inputs,
            _ => 0,
        }
    }
}

/// A layer stack whose parameters live at `offset..` of a shared flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    layers: Vec<(LayerSpec, usize)>,
    param_len: usize,
}

impl Net {
    pub fn new(specs: &[LayerSpec], offset: usize) -> Self {
        let mut at = offset;
        let layers = specs
            .iter()
            .map(|&spec| {
                let (w, b) = spec.param_shape();
                let entry = (spec, at);
                at += w + b;
                entry
            })
            .collect();
        Self {
            layers,
            param_len: at - offset,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = (LayerSpec, usize)> + '_ {
        self.layers.iter().copied()
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].0.input_len(0)
    }

    pub fn output_len(&self) -> usize {
        self.layers.iter().fold(self.input_len(), |n, (l, _)| l.output_len(n))
    }

    /// He-style uniform init: weights in `+-sqrt(6 / fan_in)`, zero biases.
    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        for (spec, offset) in self.layers() {
            let (w, b) = spec.param_shape();
            if w == 0 {
                continue;
            }
            let bound = (6.0 / spec.fan_in() as f64).sqrt();
            for p in &mut params[offset..offset + w] {
                *p = rng.random_range(-bound..bound);
            }
            params[offset + w..offset + w + b].iter_mut().for_each(|p| *p = 0.0);
        }
    }

    /// Returns the output and the input to every layer (for backward).
    pub fn forward(&self, params: &[f64], x: Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for &(spec, offset) in &self.layers {
            let next = layer_forward(spec, &params[offset..], cur.view());
            inputs.push(cur);
            cur = next;
        }
        (cur, inputs)
    }

    /// Accumulates parameter gradients into `grad_params` and returns the
    /// gradient with respect to the network input.
    pub fn backward(&self, params: &[f64], inputs: &[Array2<f64>], grad_out: Array2<f64>, grad_params: &mut [f64]) -> Array2<f64> {
        let mut g = grad_out;
        for (&(spec, offset), x) in self.layers.iter().zip(inputs).rev() {
            g = layer_backward(spec, &params[offset..], x.view(), g.view(), &mut grad_params[offset..]);
        }
        g
    }
}

fn layer_forward(spec: LayerSpec, params: &[f64], x: ArrayView2<'_, f64>) -> Array2<f64> {
    match spec {
        LayerSpec::Affine { inputs, outputs } => {
            let w = ArrayView2::from_shape((outputs, inputs), &params[..inputs * outputs]).unwrap();
            let b = &params[inputs * outputs..inputs * outputs + outputs];
            let mut y = x.dot(&w.t());
            for mut row in y.rows_mut() {
                row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
            }
            y
        }
        LayerSpec::Relu => x.mapv(|v| v.max(0.0)),
        LayerSpec::Tanh => x.mapv(f64::tanh),
        LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
            let (wlen, _) = spec.param_shape();
            let w = ArrayView2::from_shape((out_ch, in_ch * kernel * kernel), &params[..wlen]).unwrap();
            let b = &params[wlen..wlen + out_ch];
            let out_len = spec.output_len(0);
            let area = spec.out_side() * spec.out_side();
            let mut y = Array2::zeros((x.nrows(), out_len));
            for (xi, mut yi) in x.rows().into_iter().zip(y.rows_mut()) {
                let col = im2col(spec, xi.as_slice().expect("contiguous rows"));
                let out = w.dot(&col);
                for c in 0..out_ch {
                    let mut dst = yi.slice_mut(s![c * area..(c + 1) * area]);
                    dst.assign(&out.row(c));
                    dst.iter_mut().for_each(|v| *v += b[c]);
                }
            }
            y
        }
    }
}

fn layer_backward(spec: LayerSpec, params: &[f64], x: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>, grad: &mut [f64]) -> Array2<f64> {
    match spec {
        LayerSpec::Affine { inputs, outputs } => {
            let wlen = inputs * outputs;
            let w = ArrayView2::from_shape((outputs, inputs), &params[..wlen]).unwrap();
            let dw = g.t().dot(&x);
            let (gw, rest) = grad.split_at_mut(wlen);
            let mut gw = ArrayViewMut2::from_shape((outputs, inputs), gw).unwrap();
            gw += &dw;
            for (gb, s) in rest[..outputs].iter_mut().zip(g.sum_axis(Axis(0))) {
                *gb += s;
            }
            g.dot(&w)
        }
        LayerSpec::Relu => {
            let mut out = g.to_owned();
            out.zip_mut_with(&x, |gi, &xi| {
                if xi <= 0.0 {
                    *gi = 0.0
                }
            });
            out
        }
        LayerSpec::Tanh => {
            let mut out = g.to_owned();
            out.zip_mut_with(&x, |gi, &xi| {
                let t = xi.tanh();
                *gi *= 1.0 - t * t
            });
            out
        }
        LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
            let (wlen, _) = spec.param_shape();
            let patch = in_ch * kernel * kernel;
            let w = ArrayView2::from_shape((out_ch, patch), &params[..wlen]).unwrap();
            let area = spec.out_side() * spec.out_side();
            let mut dx = Array2::zeros(x.raw_dim());
            let mut dw = Array2::<f64>::zeros((out_ch, patch));
            let mut db = vec![0.0; out_ch];
            for ((xi, gi), mut dxi) in x.rows().into_iter().zip(g.rows()).zip(dx.rows_mut()) {
                let col = im2col(spec, xi.as_slice().expect("contiguous rows"));
                let gmap = gi.to_owned().into_shape_with_order((out_ch, area)).unwrap();
                dw += &gmap.dot(&col.t());
                for (c, row) in gmap.rows().into_iter().enumerate() {
                    db[c] += row.sum();
                }
                let dcol = w.t().dot(&gmap);
                col2im(spec, &dcol, dxi.as_slice_mut().expect("contiguous rows"));
            }
            grad[..wlen].iter_mut().zip(dw.iter()).for_each(|(a, b)| *a += b);
            grad[wlen..wlen + out_ch].iter_mut().zip(&db).for_each(|(a, b)| *a += b);
            dx
        }
    }
}

fn im2col(spec: LayerSpec, x: &[f64]) -> Array2<f64> {
    let LayerSpec::Conv { in_ch, kernel, stride, in_side, .. } = spec else {
        unreachable!()
    };
    let out_side = spec.out_side();
    let mut col = Array2::zeros((in_ch * kernel * kernel, out_side * out_side));
    for c in 0..in_ch {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let r = (c * kernel + ky) * kernel + kx;
                let mut row = col.row_mut(r);
                for oy in 0..out_side {
                    let base = c * in_side * in_side + (oy * stride + ky) * in_side + kx;
                    for ox in 0..out_side {
                        row[oy * out_side + ox] = x[base + ox * stride];
                    }
                }
            }
        }
    }
    col
}

fn col2im(spec: LayerSpec, col: &Array2<f64>, dx: &mut [f64]) {
    let LayerSpec::Conv { in_ch, kernel, stride, in_side, .. } = spec else {
        unreachable!()
    };
    let out_side = spec.out_side();
    for c in 0..in_ch {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = col.row((c * kernel + ky) * kernel + kx);
                for oy in 0..out_side {
                    let base = c * in_side * in_side + (oy * stride + ky) * in_side + kx;
                    for ox in 0..out_side {
                        dx[base + ox * stride] += row[oy * out_side + ox];
                    }
                }
            }
        }
    }
}
