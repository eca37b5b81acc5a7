use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let sig = 1.0 / (1.0 + (-z).exp());
                sig * (1.0 + z * (1.0 - sig))
            }
        }
    }
}

/// How a network's input row is assembled: `[sample | sin/cos(t) | condition]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub sample_dim: usize,
    /// Number of sinusoidal frequencies; the embedding has twice this width.
    pub time_freqs: usize,
    pub cond_dim: usize,
}

impl InputLayout {
    pub fn plain(dim: usize) -> Self {
        Self {
            sample_dim: dim,
            time_freqs: 0,
            cond_dim: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.sample_dim + 2 * self.time_freqs + self.cond_dim
    }
}

/// Architecture description, also used as the JSON sidecar for parameter dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetShape {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub layout: InputLayout,
}

/// Feed-forward network with a flat parameter vector.
///
/// Layer `l` maps width `widths[l]` to `widths[l + 1]`; its weights are
/// stored row-major as a `(in, out)` block followed by `out` biases. Hidden
/// layers apply the activation, the final layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    shape: NetShape,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass, consumed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each applied layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each applied layer.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
    /// Whether the last applied layer is the linear output layer.
    linear_tail: bool,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }

    pub fn layers_applied(&self) -> usize {
        self.pre.len()
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Gradient with respect to the flat parameter vector. Layers that were
    /// not applied in the traced pass receive zeros.
    pub params: Option<Vec<f64>>,
    pub input: Array2<f64>,
}

impl DenseNet {
    pub fn new(widths: Vec<usize>, activation: Activation, layout: InputLayout) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!(
                "network needs at least two positive widths, got {widths:?}"
            )));
        }
        check_len("network input width", layout.width(), widths[0])?;
        let mut offsets = Vec::with_capacity(widths.len());
        let mut acc = 0;
        offsets.push(0);
        for w in widths.windows(2) {
            acc += (w[0] + 1) * w[1];
            offsets.push(acc);
        }
        Ok(Self {
            shape: NetShape {
                widths,
                activation,
                layout,
            },
            offsets,
            params: vec![0.0; acc],
        })
    }

    pub fn from_shape(shape: NetShape) -> Result<Self> {
        Self::new(shape.widths, shape.activation, shape.layout)
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, same for biases.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for l in 0..self.num_layers() {
            let fan_in = self.shape.widths[l];
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut self.params[self.offsets[l]..self.offsets[l + 1]] {
                *p = rng.random_range(-bound..bound);
            }
        }
    }

    pub fn zero_output_layer(&mut self) {
        let l = self.num_layers() - 1;
        self.params[self.offsets[l]..self.offsets[l + 1]].fill(0.0);
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn widths(&self) -> &[usize] {
        &self.shape.widths
    }

    pub fn layout(&self) -> &InputLayout {
        &self.shape.layout
    }

    pub fn num_layers(&self) -> usize {
        self.shape.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.shape.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.shape.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_len("parameter vector", self.params.len(), params.len())?;
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (w_in, w_out) = (self.shape.widths[l], self.shape.widths[l + 1]);
        let start = self.offsets[l];
        let w = ArrayView2::from_shape((w_in, w_out), &self.params[start..start + w_in * w_out])
            .expect("layer block shape");
        let b = ArrayView1::from(&self.params[start + w_in * w_out..self.offsets[l + 1]]);
        (w, b)
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len("network input", self.input_width(), input.ncols())?;
        let act = self.shape.activation;
        let last = self.num_layers() - 1;
        let mut h = input.to_owned();
        for l in 0..=last {
            let (w, b) = self.layer(l);
            let mut z = h.dot(&w);
            z += &b;
            if l < last {
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Single-point convenience wrapper around [`forward`](Self::forward).
    pub fn forward_point(&self, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass through the first `layers` layers, recording activations.
    /// With `layers < num_layers()` the output is the post-activation of a
    /// hidden layer (a feature tap).
    pub fn forward_trace(&self, input: ArrayView2<f64>, layers: usize) -> Result<Trace> {
        check_len("network input", self.input_width(), input.ncols())?;
        if layers == 0 || layers > self.num_layers() {
            return Err(Error::InvalidArgument(format!(
                "layer count {layers} outside 1..={}",
                self.num_layers()
            )));
        }
        let act = self.shape.activation;
        let linear_tail = layers == self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut h = input.to_owned();
        for l in 0..layers {
            let (w, b) = self.layer(l);
            let mut z = h.dot(&w);
            z += &b;
            let is_linear = linear_tail && l + 1 == layers;
            let next = if is_linear { z.clone() } else { z.mapv(|v| act.apply(v)) };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok(Trace {
            inputs,
            pre,
            output: h,
            linear_tail,
        })
    }

    pub fn forward_full_trace(&self, input: ArrayView2<f64>) -> Result<Trace> {
        self.forward_trace(input, self.num_layers())
    }

    /// Reverse-mode gradients of `sum(trace.output * cotangent)`.
    pub fn backward(&self, trace: &Trace, cotangent: ArrayView2<f64>, want_params: bool) -> Result<Gradients> {
        if cotangent.dim() != trace.output.dim() {
            return Err(Error::Shape {
                what: "backward cotangent",
                expected: trace.output.len(),
                got: cotangent.len(),
            });
        }
        let act = self.shape.activation;
        let applied = trace.pre.len();
        let mut grads = want_params.then(|| vec![0.0; self.params.len()]);
        let mut upstream = cotangent.to_owned();
        for l in (0..applied).rev() {
            let is_linear = trace.linear_tail && l + 1 == applied;
            let dz = if is_linear {
                upstream
            } else {
                let mut d = upstream;
                d.zip_mut_with(&trace.pre[l], |g, &z| *g *= act.derivative(z));
                d
            };
            if let Some(g) = grads.as_mut() {
                let (w_in, w_out) = (self.shape.widths[l], self.shape.widths[l + 1]);
                let start = self.offsets[l];
                let dw = trace.inputs[l].t().dot(&dz);
                let db = dz.sum_axis(Axis(0));
                let block = &mut g[start..self.offsets[l + 1]];
                for (dst, src) in block[..w_in * w_out].iter_mut().zip(dw.iter()) {
                    *dst = *src;
                }
                for (dst, src) in block[w_in * w_out..].iter_mut().zip(db.iter()) {
                    *dst = *src;
                }
            }
            let (w, _) = self.layer(l);
            upstream = dz.dot(&w.t());
        }
        Ok(Gradients {
            params: grads,
            input: upstream,
        })
    }

    /// Single-point convenience wrapper: gradients of `<f(input), cotangent>`.
    pub fn backward_point(&self, input: &[f64], cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("backward cotangent", self.output_width(), cotangent.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        let trace = self.forward_full_trace(x)?;
        let c = ArrayView2::from_shape((1, cotangent.len()), cotangent).expect("row view");
        let g = self.backward(&trace, c, true)?;
        Ok((g.params.unwrap(), g.input.into_raw_vec_and_offset().0))
    }

    /// Parameters as little-endian `f32` plus a JSON sidecar with the shape.
    pub fn save_f32(&self, bin_path: &Path, sidecar_path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.params.len() * 4);
        for p in &self.params {
            bytes.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        fs::write(bin_path, bytes).map_err(|e| Error::io(bin_path, e))?;
        let sidecar = serde_json::json!({
            "dtype": "f32-le",
            "num_params": self.params.len(),
            "shape": self.shape,
        });
        fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)
            .map_err(|e| Error::io(sidecar_path, e))
    }

    pub fn load_f32(bin_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let shape: NetShape = serde_json::from_value(value["shape"].clone())?;
        let mut net = Self::from_shape(shape)?;
        let bytes = fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
        check_len("f32 parameter blob bytes", net.num_params() * 4, bytes.len())?;
        for (p, chunk) in net.params.iter_mut().zip(bytes.chunks_exact(4)) {
            *p = f64::from(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        Ok(net)
    }
}

/// Sinusoidal features of `t / T`: `freqs` sines followed by `freqs` cosines,
/// angular frequencies geometric from 1 to 200.
pub fn time_embedding(t: usize, num_steps: usize, freqs: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), 2 * freqs);
    let u = t as f64 / num_steps as f64;
    for k in 0..freqs {
        let omega = if freqs > 1 {
            200f64.powf(k as f64 / (freqs - 1) as f64)
        } else {
            1.0
        };
        let (s, c) = (omega * u).sin_cos();
        out[k] = s;
        out[freqs + k] = c;
    }
}

/// Assemble `[sample | time embedding | condition]` rows.
pub fn build_input(
    layout: &InputLayout,
    samples: ArrayView2<f64>,
    ts: &[usize],
    num_steps: usize,
    cond: Option<ArrayView2<f64>>,
) -> Result<Array2<f64>> {
    check_len("input sample width", layout.sample_dim, samples.ncols())?;
    check_len("input timesteps", samples.nrows(), ts.len())?;
    let n = samples.nrows();
    let mut out = Array2::zeros((n, layout.width()));
    let d = layout.sample_dim;
    let e = 2 * layout.time_freqs;
    out.slice_mut(s![.., ..d]).assign(&samples);
    if e > 0 {
        for (i, &t) in ts.iter().enumerate() {
            let mut row = out.row_mut(i);
            let slot = row.slice_mut(s![d..d + e]);
            time_embedding(t, num_steps, layout.time_freqs, slot.into_slice().unwrap());
        }
    }
    match (layout.cond_dim, cond) {
        (0, None) => {}
        (0, Some(c)) if c.ncols() == 0 => {}
        (k, Some(c)) => {
            check_len("condition width", k, c.ncols())?;
            check_len("condition rows", n, c.nrows())?;
            out.slice_mut(s![.., d + e..]).assign(&c);
        }
        (k, None) => {
            return Err(Error::InvalidArgument(format!(
                "network expects a {k}-wide condition vector"
            )))
        }
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use crate::rng::stream;

    fn small_net(widths: Vec<usize>, act: Activation, seed: u64) -> DenseNet {
        let mut net = DenseNet::new(widths.clone(), act, InputLayout::plain(widths[0])).unwrap();
        net.init_uniform(&mut stream(seed, "init"));
        net
    }

    #[test]
    fn param_count_formula() {
        let net = small_net(vec![3, 8, 2], Activation::Tanh, 0);
        assert_eq!(net.num_params(), (3 + 1) * 8 + (8 + 1) * 2);
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut net = small_net(vec![3, 8, 8, 2], Activation::Silu, 1);
        net.zero_output_layer();
        let out = net.forward_point(&[0.3, -2.0, 5.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut net = DenseNet::new(vec![3, 3], Activation::Tanh, InputLayout::plain(3)).unwrap();
        let mut p = vec![0.0; 12];
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        net.set_params(&p).unwrap();
        assert_eq!(net.forward_point(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn forward_is_deterministic() {
        let a = small_net(vec![4, 16, 16, 2], Activation::Tanh, 42);
        let b = small_net(vec![4, 16, 16, 2], Activation::Tanh, 42);
        let x = [0.1, 0.2, -0.3, 0.9];
        let ya = a.forward_point(&x).unwrap();
        let yb = b.forward_point(&x).unwrap();
        assert_eq!(
            ya.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            yb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn shape_errors() {
        let net = small_net(vec![3, 4, 2], Activation::Tanh, 0);
        assert!(net.forward_point(&[1.0, 2.0]).is_err());
        assert!(net.backward_point(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn zero_cotangent_zero_gradients() {
        let net = small_net(vec![3, 8, 2], Activation::Tanh, 3);
        let (gp, gi) = net.backward_point(&[0.5, 0.1, -0.2], &[0.0, 0.0]).unwrap();
        assert!(gp.iter().chain(gi.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn backward_linear_in_cotangent() {
        let net = small_net(vec![3, 8, 2], Activation::Silu, 4);
        let x = [0.5, 0.1, -0.2];
        let (g1, i1) = net.backward_point(&x, &[0.3, -0.7]).unwrap();
        let (g2, i2) = net.backward_point(&x, &[0.6, -1.4]).unwrap();
        for (a, b) in g1.iter().chain(i1.iter()).zip(g2.iter().chain(i2.iter())) {
            assert!((2.0 * a - b).abs() <= 1e-14 * b.abs().max(1.0));
        }
    }

    fn check_fd(net: &DenseNet, x: &[f64], cot: &[f64], tol: f64) {
        let (gp, gi) = net.backward_point(x, cot).unwrap();
        let f_params = |p: &[f64]| {
            let mut n = net.clone();
            n.set_params(p).unwrap();
            let y = n.forward_point(x).unwrap();
            y.iter().zip(cot).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = finite_diff_grad(f_params, net.params(), 1e-5);
        let scale = fd.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (a, b) in gp.iter().zip(&fd) {
            assert!((a - b).abs() <= tol * scale, "param grad {a} vs fd {b}");
        }
        let f_input = |xi: &[f64]| {
            let y = net.forward_point(xi).unwrap();
            y.iter().zip(cot).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = finite_diff_grad(f_input, x, 1e-5);
        let scale = fd.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (a, b) in gi.iter().zip(&fd) {
            assert!((a - b).abs() <= tol * scale, "input grad {a} vs fd {b}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // widths 3-8-2 at h = 1e-5, relative error below 1e-5
        check_fd(&small_net(vec![3, 8, 2], Activation::Tanh, 5), &[0.3, -0.8, 1.1], &[0.4, -1.3], 1e-5);
        check_fd(&small_net(vec![3, 8, 2], Activation::Silu, 6), &[0.3, -0.8, 1.1], &[0.4, -1.3], 1e-5);
        check_fd(&small_net(vec![5, 16, 16, 3], Activation::Silu, 7), &[0.3, -0.8, 1.1, 0.0, 2.0], &[1.0, 0.5, -0.25], 1e-4);
    }

    #[test]
    fn feature_tap_backward_matches_fd() {
        let net = small_net(vec![3, 6, 5, 2], Activation::Tanh, 8);
        let x = [0.2, 0.4, -0.6];
        let xv = ArrayView2::from_shape((1, 3), &x[..]).unwrap();
        let trace = net.forward_trace(xv, 2).unwrap();
        assert_eq!(trace.output().ncols(), 5);
        let cot = ndarray::array![[0.1, -0.2, 0.3, 0.4, -0.5]];
        let g = net.backward(&trace, cot.view(), true).unwrap();
        let f = |xi: &[f64]| {
            let v = ArrayView2::from_shape((1, 3), xi).unwrap();
            let t = net.forward_trace(v, 2).unwrap();
            (t.output() * &cot).sum()
        };
        let fd = finite_diff_grad(f, &x, 1e-5);
        for (a, b) in g.input.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8);
        }
        // output layer untouched by a tapped pass
        let p = g.params.unwrap();
        let out_block = (5 + 1) * 2;
        assert!(p[p.len() - out_block..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_equals_rowwise() {
        let net = small_net(vec![2, 7, 3], Activation::Silu, 9);
        let x = ndarray::array![[0.1, 0.2], [-1.0, 0.5], [2.0, -0.3]];
        let y = net.forward(x.view()).unwrap();
        for i in 0..3 {
            let yi = net.forward_point(&x.row(i).to_vec()).unwrap();
            for j in 0..3 {
                assert!((y[[i, j]] - yi[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn f32_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = small_net(vec![2, 5, 1], Activation::Tanh, 10);
        let (b, s) = (dir.path().join("p.bin"), dir.path().join("p.json"));
        net.save_f32(&b, &s).unwrap();
        assert_eq!(std::fs::metadata(&b).unwrap().len() as usize, net.num_params() * 4);
        let back = DenseNet::load_f32(&b, &s).unwrap();
        assert_eq!(back.shape(), net.shape());
        for (a, b) in back.params().iter().zip(net.params()) {
            assert_eq!(*a, f64::from(*b as f32));
        }
    }

    #[test]
    fn input_assembly() {
        let layout = InputLayout {
            sample_dim: 2,
            time_freqs: 3,
            cond_dim: 1,
        };
        let x = ndarray::array![[1.0, 2.0]];
        let c = ndarray::array![[7.0]];
        let inp = build_input(&layout, x.view(), &[0], 100, Some(c.view())).unwrap();
        assert_eq!(inp.row(0).to_vec(), vec![1.0, 2.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 7.0]);
        assert!(build_input(&layout, x.view(), &[0], 100, None).is_err());
    }
}
