use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Smooth hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// ELU with unit scale. The derivative at 0 is taken from the right (1),
    /// and the second derivative there is 0.
    Elu,
}

impl Activation {
    /// Value, first and second derivative at `z`.
    #[inline]
    pub fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                let d1 = 1.0 - t * t;
                (t, d1, -2.0 * t * d1)
            }
            Activation::Elu => {
                if z >= 0.0 {
                    (z, 1.0, 0.0)
                } else {
                    let e = z.exp();
                    (e - 1.0, e, e)
                }
            }
        }
    }

    #[inline]
    fn value(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Elu => {
                if z >= 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
        }
    }
}

/// Fixed affine maps applied around the trainable layers: inputs are
/// standardized as `(v - shift) / scale` and outputs multiplied by
/// `output_scale`. None of these are trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub theta_shift: Vec<f64>,
    pub theta_scale: Vec<f64>,
    pub data_shift: Vec<f64>,
    pub data_scale: Vec<f64>,
    pub output_scale: Vec<f64>,
}

impl Scaling {
    pub fn identity(theta_dim: usize, data_dim: usize, output_dim: usize) -> Self {
        Self {
            theta_shift: vec![0.0; theta_dim],
            theta_scale: vec![1.0; theta_dim],
            data_shift: vec![0.0; data_dim],
            data_scale: vec![1.0; data_dim],
            output_scale: vec![1.0; output_dim],
        }
    }
}

/// Architecture of a fully connected network mapping `(theta, x)` to a
/// vector of length `output_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub theta_dim: usize,
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<Scaling>,
}

impl NetSpec {
    pub fn new(theta_dim: usize, data_dim: usize, hidden: Vec<usize>, activation: Activation) -> Self {
        Self {
            theta_dim,
            data_dim,
            hidden,
            activation,
            output_dim: theta_dim,
            scaling: None,
        }
    }

    pub fn with_scaling(mut self, scaling: Scaling) -> Self {
        self.scaling = Some(scaling);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta_dim == 0 {
            return Err(Error::Input("network needs at least one theta input".into()));
        }
        if self.output_dim == 0 {
            return Err(Error::Input("network output dimension must be positive".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Input("hidden layer widths must be at least 1".into()));
        }
        if let Some(s) = &self.scaling {
            let ok = s.theta_shift.len() == self.theta_dim
                && s.theta_scale.len() == self.theta_dim
                && s.data_shift.len() == self.data_dim
                && s.data_scale.len() == self.data_dim
                && s.output_scale.len() == self.output_dim;
            if !ok {
                return Err(Error::Input("scaling vectors do not match the network dimensions".into()));
            }
            let all = s
                .theta_shift
                .iter()
                .chain(&s.theta_scale)
                .chain(&s.data_shift)
                .chain(&s.data_scale)
                .chain(&s.output_scale);
            if all.clone().any(|v| !v.is_finite())
                || s.theta_scale.iter().chain(&s.data_scale).any(|&v| v == 0.0)
            {
                return Err(Error::Input("scaling entries must be finite with nonzero scales".into()));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.theta_dim + self.data_dim
    }

    /// Widths from input to output, inclusive.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(self.input_dim());
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.output_dim);
        sizes
    }

    pub fn num_weights(&self) -> usize {
        self.layer_sizes().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    fn layer_offsets(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.layer_sizes()
            .windows(2)
            .map(|p| {
                let shape = LayerShape {
                    inputs: p[0],
                    outputs: p[1],
                    weights: offset,
                    bias: offset + p[0] * p[1],
                };
                offset += p[0] * p[1] + p[1];
                shape
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    weights: usize,
    bias: usize,
}

/// One dense layer in unpacked form; `weights` is row-major `outputs x inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Flat parameter vector: layer by layer, weights (row-major) then bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkWeights(pub Vec<f64>);

impl NetworkWeights {
    pub fn zeros(spec: &NetSpec) -> Self {
        Self(vec![0.0; spec.num_weights()])
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &NetSpec, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut values = vec![0.0; spec.num_weights()];
        for shape in spec.layer_offsets() {
            let limit = (6.0 / (shape.inputs + shape.outputs) as f64).sqrt();
            for v in &mut values[shape.weights..shape.bias] {
                *v = rng.random_range(-limit..limit);
            }
        }
        Self(values)
    }

    pub fn pack(spec: &NetSpec, layers: &[Layer]) -> Result<Self> {
        let shapes = spec.layer_offsets();
        if layers.len() != shapes.len() {
            return Err(Error::dim("layer count", shapes.len(), layers.len()));
        }
        let mut values = Vec::with_capacity(spec.num_weights());
        for (layer, shape) in layers.iter().zip(&shapes) {
            if layer.inputs != shape.inputs || layer.outputs != shape.outputs {
                return Err(Error::Input("layer shape does not match the network spec".into()));
            }
            if layer.weights.len() != shape.inputs * shape.outputs || layer.bias.len() != shape.outputs {
                return Err(Error::Input("layer buffers have the wrong length".into()));
            }
            values.extend_from_slice(&layer.weights);
            values.extend_from_slice(&layer.bias);
        }
        Ok(Self(values))
    }

    pub fn unpack(&self, spec: &NetSpec) -> Result<Vec<Layer>> {
        self.check(spec)?;
        Ok(spec
            .layer_offsets()
            .into_iter()
            .map(|s| Layer {
                inputs: s.inputs,
                outputs: s.outputs,
                weights: self.0[s.weights..s.bias].to_vec(),
                bias: self.0[s.bias..s.bias + s.outputs].to_vec(),
            })
            .collect())
    }

    pub fn check(&self, spec: &NetSpec) -> Result<()> {
        if self.0.len() != spec.num_weights() {
            return Err(Error::dim("network weights", spec.num_weights(), self.0.len()));
        }
        if let Some(i) = self.0.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("weight[{i}]")));
        }
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Value and exact theta-Jacobian of the network output.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaDerivatives {
    /// Row-major `output_dim x theta_dim`, entry `(k, j)` is `d s_k / d theta_j`.
    pub jacobian: Vec<f64>,
    pub divergence: f64,
}

/// Reusable evaluation buffers for one network.
///
/// `eval` runs the primal pass together with one forward tangent per theta
/// coordinate; `backprop` pulls adjoints of both the output and its Jacobian
/// back onto the weights (reverse over forward), which is what the
/// divergence-bearing losses need.
pub struct Evaluator<'a> {
    spec: &'a NetSpec,
    w: &'a [f64],
    shapes: Vec<LayerShape>,
    d: usize,
    /// Layer inputs; `acts[0]` is the scaled network input.
    acts: Vec<Vec<f64>>,
    /// Tangents of the layer inputs, `d` blocks of the layer width.
    act_tans: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pre_tans: Vec<Vec<f64>>,
    d1: Vec<Vec<f64>>,
    d2: Vec<Vec<f64>>,
    theta_inv_scale: Vec<f64>,
    out: Vec<f64>,
    jac: Vec<f64>,
    // backward scratch
    bar: Vec<f64>,
    tan_bar: Vec<f64>,
    in_bar: Vec<f64>,
    in_tan_bar: Vec<f64>,
    tangents_current: bool,
}

impl<'a> Evaluator<'a> {
    pub fn new(spec: &'a NetSpec, w: &'a [f64]) -> Result<Self> {
        spec.validate()?;
        if w.len() != spec.num_weights() {
            return Err(Error::dim("network weights", spec.num_weights(), w.len()));
        }
        let shapes = spec.layer_offsets();
        let d = spec.theta_dim;
        let sizes = spec.layer_sizes();
        let max_w = *sizes.iter().max().unwrap_or(&1);
        let acts = sizes[..sizes.len() - 1].iter().map(|&n| vec![0.0; n]).collect();
        let act_tans = sizes[..sizes.len() - 1].iter().map(|&n| vec![0.0; n * d]).collect();
        let pre = sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        let pre_tans = sizes[1..].iter().map(|&n| vec![0.0; n * d]).collect();
        let d1 = sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        let d2 = sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        let theta_inv_scale = match &spec.scaling {
            Some(s) => s.theta_scale.iter().map(|v| 1.0 / v).collect(),
            None => vec![1.0; d],
        };
        Ok(Self {
            spec,
            w,
            shapes,
            d,
            acts,
            act_tans,
            pre,
            pre_tans,
            d1,
            d2,
            theta_inv_scale,
            out: vec![0.0; spec.output_dim],
            jac: vec![0.0; spec.output_dim * d],
            bar: vec![0.0; max_w],
            tan_bar: vec![0.0; max_w * d],
            in_bar: vec![0.0; max_w],
            in_tan_bar: vec![0.0; max_w * d],
            tangents_current: false,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        self.spec
    }

    fn check_inputs(&self, theta: &[f64], x: &[f64]) -> Result<()> {
        if theta.len() != self.spec.theta_dim {
            return Err(Error::dim("theta input", self.spec.theta_dim, theta.len()));
        }
        if x.len() != self.spec.data_dim {
            return Err(Error::dim("data input", self.spec.data_dim, x.len()));
        }
        Ok(())
    }

    fn load_input(&mut self, theta: &[f64], x: &[f64]) {
        let input = &mut self.acts[0];
        match &self.spec.scaling {
            Some(s) => {
                for j in 0..theta.len() {
                    input[j] = (theta[j] - s.theta_shift[j]) / s.theta_scale[j];
                }
                for i in 0..x.len() {
                    input[theta.len() + i] = (x[i] - s.data_shift[i]) / s.data_scale[i];
                }
            }
            None => {
                input[..theta.len()].copy_from_slice(theta);
                input[theta.len()..].copy_from_slice(x);
            }
        }
    }

    fn output_scale(&self, k: usize) -> f64 {
        self.spec.scaling.as_ref().map_or(1.0, |s| s.output_scale[k])
    }

    /// Primal pass only.
    pub fn forward(&mut self, theta: &[f64], x: &[f64]) -> Result<&[f64]> {
        self.check_inputs(theta, x)?;
        self.tangents_current = false;
        self.load_input(theta, x);
        let last = self.shapes.len() - 1;
        let act = self.spec.activation;
        for l in 0..self.shapes.len() {
            let sh = self.shapes[l];
            let (inputs, rest) = self.acts.split_at_mut(l + 1);
            let input = &inputs[l];
            let wts = &self.w[sh.weights..sh.bias];
            let bias = &self.w[sh.bias..sh.bias + sh.outputs];
            for o in 0..sh.outputs {
                let row = &wts[o * sh.inputs..(o + 1) * sh.inputs];
                let z = bias[o] + dot(row, input);
                if l == last {
                    self.out[o] = z;
                } else {
                    rest[0][o] = act.value(z);
                }
            }
        }
        for k in 0..self.out.len() {
            self.out[k] *= self.output_scale(k);
        }
        Ok(&self.out)
    }

    /// Primal pass plus one forward tangent per theta coordinate. Returns the
    /// output and its row-major Jacobian.
    pub fn eval(&mut self, theta: &[f64], x: &[f64]) -> Result<(&[f64], &[f64])> {
        self.check_inputs(theta, x)?;
        self.run_tangents(theta, x);
        Ok((&self.out, &self.jac))
    }

    fn run_tangents(&mut self, theta: &[f64], x: &[f64]) {
        self.tangents_current = true;
        self.load_input(theta, x);
        let d = self.d;
        let last = self.shapes.len() - 1;
        let act = self.spec.activation;
        for l in 0..self.shapes.len() {
            let sh = self.shapes[l];
            let wts = &self.w[sh.weights..sh.bias];
            let bias = &self.w[sh.bias..sh.bias + sh.outputs];
            let input = &self.acts[l];
            let pre = &mut self.pre[l];
            let pre_tan = &mut self.pre_tans[l];
            for o in 0..sh.outputs {
                let row = &wts[o * sh.inputs..(o + 1) * sh.inputs];
                pre[o] = bias[o] + dot(row, input);
            }
            if l == 0 {
                // Input tangents are scaled unit vectors on the theta slots.
                for j in 0..d {
                    let inv = self.theta_inv_scale[j];
                    let block = &mut pre_tan[j * sh.outputs..(j + 1) * sh.outputs];
                    for o in 0..sh.outputs {
                        block[o] = wts[o * sh.inputs + j] * inv;
                    }
                }
            } else {
                let in_tan = &self.act_tans[l];
                for j in 0..d {
                    let tan = &in_tan[j * sh.inputs..(j + 1) * sh.inputs];
                    let block = &mut pre_tan[j * sh.outputs..(j + 1) * sh.outputs];
                    for o in 0..sh.outputs {
                        let row = &wts[o * sh.inputs..(o + 1) * sh.inputs];
                        block[o] = dot(row, tan);
                    }
                }
            }
            if l < last {
                let n = sh.outputs;
                let (d1, d2) = (&mut self.d1[l], &mut self.d2[l]);
                let next = &mut self.acts[l + 1];
                for o in 0..n {
                    let (v, a1, a2) = act.eval(self.pre[l][o]);
                    next[o] = v;
                    d1[o] = a1;
                    d2[o] = a2;
                }
                let next_tan = &mut self.act_tans[l + 1];
                for j in 0..d {
                    for o in 0..n {
                        next_tan[j * n + o] = d1[o] * self.pre_tans[l][j * n + o];
                    }
                }
            }
        }
        let n_out = self.spec.output_dim;
        for k in 0..n_out {
            let c = self.output_scale(k);
            self.out[k] = c * self.pre[last][k];
            for j in 0..d {
                self.jac[k * d + j] = c * self.pre_tans[last][j * n_out + k];
            }
        }
    }

    /// Accumulate into `grad` the weight gradient of
    /// `adj_out . s + sum_{k,j} adj_jac[k,j] * J[k,j]` at `(theta, x)`.
    pub fn backprop(
        &mut self,
        theta: &[f64],
        x: &[f64],
        adj_out: &[f64],
        adj_jac: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        self.check_inputs(theta, x)?;
        let d = self.d;
        let n_out = self.spec.output_dim;
        if adj_out.len() != n_out {
            return Err(Error::dim("output adjoint", n_out, adj_out.len()));
        }
        if adj_jac.len() != n_out * d {
            return Err(Error::dim("jacobian adjoint", n_out * d, adj_jac.len()));
        }
        if grad.len() != self.w.len() {
            return Err(Error::dim("gradient buffer", self.w.len(), grad.len()));
        }
        self.run_tangents(theta, x);
        self.backward(adj_out, adj_jac, grad);
        Ok(())
    }

    /// [`backprop`](Self::backprop) at the input of the most recent
    /// [`eval`](Self::eval), reusing its stored pass.
    pub fn backprop_last(&mut self, adj_out: &[f64], adj_jac: &[f64], grad: &mut [f64]) -> Result<()> {
        if !self.tangents_current {
            return Err(Error::Input("backprop_last without a preceding eval".into()));
        }
        let (d, n_out) = (self.d, self.spec.output_dim);
        if adj_out.len() != n_out {
            return Err(Error::dim("output adjoint", n_out, adj_out.len()));
        }
        if adj_jac.len() != n_out * d {
            return Err(Error::dim("jacobian adjoint", n_out * d, adj_jac.len()));
        }
        if grad.len() != self.w.len() {
            return Err(Error::dim("gradient buffer", self.w.len(), grad.len()));
        }
        self.backward(adj_out, adj_jac, grad);
        Ok(())
    }

    fn backward(&mut self, adj_out: &[f64], adj_jac: &[f64], grad: &mut [f64]) {
        let d = self.d;
        let n_out = self.spec.output_dim;
        for k in 0..n_out {
            let c = self.output_scale(k);
            self.bar[k] = c * adj_out[k];
            for j in 0..d {
                self.tan_bar[j * n_out + k] = c * adj_jac[k * d + j];
            }
        }

        for l in (0..self.shapes.len()).rev() {
            let sh = self.shapes[l];
            let (ni, no) = (sh.inputs, sh.outputs);
            let wts = &self.w[sh.weights..sh.bias];
            let input = &self.acts[l];
            let in_tan = &self.act_tans[l];
            {
                let (gw, gb) = grad[sh.weights..sh.bias + no].split_at_mut(ni * no);
                for o in 0..no {
                    let zb = self.bar[o];
                    gb[o] += zb;
                    let grow = &mut gw[o * ni..(o + 1) * ni];
                    axpy(zb, input, grow);
                    if l == 0 {
                        for j in 0..d {
                            grow[j] += self.tan_bar[j * no + o] * self.theta_inv_scale[j];
                        }
                    } else {
                        for j in 0..d {
                            axpy(self.tan_bar[j * no + o], &in_tan[j * ni..(j + 1) * ni], grow);
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            // Pull adjoints back through the weights.
            self.in_bar[..ni].iter_mut().for_each(|v| *v = 0.0);
            self.in_tan_bar[..ni * d].iter_mut().for_each(|v| *v = 0.0);
            for o in 0..no {
                let row = &wts[o * ni..(o + 1) * ni];
                axpy(self.bar[o], row, &mut self.in_bar[..ni]);
                for j in 0..d {
                    let tb = self.tan_bar[j * no + o];
                    if tb != 0.0 {
                        axpy(tb, row, &mut self.in_tan_bar[j * ni..(j + 1) * ni]);
                    }
                }
            }
            // ... and through the activation feeding this layer.
            let (d1, d2) = (&self.d1[l - 1], &self.d2[l - 1]);
            let pre_tan = &self.pre_tans[l - 1];
            for i in 0..ni {
                let mut zb = self.in_bar[i] * d1[i];
                for j in 0..d {
                    zb += self.in_tan_bar[j * ni + i] * d2[i] * pre_tan[j * ni + i];
                }
                self.bar[i] = zb;
            }
            for j in 0..d {
                for i in 0..ni {
                    self.tan_bar[j * ni + i] = self.in_tan_bar[j * ni + i] * d1[i];
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Sum of the network output over a fixed block of data rows at a shared
/// `theta`. The data half of the first layer is computed once; the remaining
/// layers run as dense products over all rows.
pub struct SummedForward<'a> {
    spec: &'a NetSpec,
    w: &'a [f64],
    shapes: Vec<LayerShape>,
    rows: usize,
    data: Vec<f64>,
    /// `rows x width` first-layer bias plus data contribution.
    first: DMatrix<f64>,
    /// Transposed weights of layers after the first.
    wt: Vec<DMatrix<f64>>,
    acts: Vec<DMatrix<f64>>,
    out: Vec<f64>,
}

impl<'a> SummedForward<'a> {
    /// `data` is row-major with `spec.data_dim` columns.
    pub fn new(spec: &'a NetSpec, w: &'a [f64], data: &[f64]) -> Result<Self> {
        spec.validate()?;
        if w.len() != spec.num_weights() {
            return Err(Error::dim("network weights", spec.num_weights(), w.len()));
        }
        let p = spec.data_dim;
        if p == 0 || data.len() % p != 0 {
            return Err(Error::Input(format!("{} data values do not fill rows of {p}", data.len())));
        }
        let rows = data.len() / p;
        let shapes = spec.layer_offsets();
        let d = spec.theta_dim;
        let sh = shapes[0];
        let mut first = DMatrix::zeros(rows, sh.outputs);
        for r in 0..rows {
            let x = &data[r * p..(r + 1) * p];
            let xs: Vec<f64> = match &spec.scaling {
                Some(s) => (0..p).map(|i| (x[i] - s.data_shift[i]) / s.data_scale[i]).collect(),
                None => x.to_vec(),
            };
            for o in 0..sh.outputs {
                let row = &w[sh.weights + o * sh.inputs..sh.weights + (o + 1) * sh.inputs];
                first[(r, o)] = w[sh.bias + o] + dot(&row[d..], &xs);
            }
        }
        let wt = shapes[1..]
            .iter()
            .map(|sh| DMatrix::from_row_slice(sh.outputs, sh.inputs, &w[sh.weights..sh.bias]).transpose())
            .collect();
        let acts = shapes.iter().map(|sh| DMatrix::zeros(rows, sh.outputs)).collect();
        Ok(Self { spec, w, shapes, rows, data: data.to_vec(), first, wt, acts, out: vec![0.0; spec.output_dim] })
    }

    /// True when built from exactly these data values.
    pub fn matches(&self, data: &[f64]) -> bool {
        self.data == data
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// `sum_i f(theta, x_i)`.
    pub fn sum(&mut self, theta: &[f64]) -> Result<&[f64]> {
        let d = self.spec.theta_dim;
        if theta.len() != d {
            return Err(Error::dim("theta input", d, theta.len()));
        }
        let ts: Vec<f64> = match &self.spec.scaling {
            Some(s) => (0..d).map(|j| (theta[j] - s.theta_shift[j]) / s.theta_scale[j]).collect(),
            None => theta.to_vec(),
        };
        let act = self.spec.activation;
        let last = self.shapes.len() - 1;
        let sh = self.shapes[0];
        for o in 0..sh.outputs {
            let row = &self.w[sh.weights + o * sh.inputs..sh.weights + o * sh.inputs + d];
            let t = dot(row, &ts);
            let src = self.first.column(o);
            let mut dst = self.acts[0].column_mut(o);
            for r in 0..self.rows {
                let z = src[r] + t;
                dst[r] = if last == 0 { z } else { act.value(z) };
            }
        }
        for l in 1..=last {
            let sh = self.shapes[l];
            let bias = &self.w[sh.bias..sh.bias + sh.outputs];
            if l == last {
                // the output layer is affine, so sum the inputs first
                let total: Vec<f64> = (0..sh.inputs).map(|i| self.acts[l - 1].column(i).sum()).collect();
                let wts = &self.w[sh.weights..sh.bias];
                for o in 0..sh.outputs {
                    self.out[o] = dot(&wts[o * sh.inputs..(o + 1) * sh.inputs], &total) + self.rows as f64 * bias[o];
                }
            } else {
                let (prev, next) = self.acts.split_at_mut(l);
                prev[l - 1].mul_to(&self.wt[l - 1], &mut next[0]);
                for o in 0..sh.outputs {
                    for v in next[0].column_mut(o).iter_mut() {
                        *v = act.value(*v + bias[o]);
                    }
                }
            }
        }
        if last == 0 {
            for o in 0..sh.outputs {
                self.out[o] = self.acts[0].column(o).sum();
            }
        }
        if let Some(s) = &self.spec.scaling {
            for (v, k) in self.out.iter_mut().zip(&s.output_scale) {
                *v *= k;
            }
        }
        if let Some(i) = self.out.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("summed network output {i}")));
        }
        Ok(&self.out)
    }
}

/// Network output at `(theta, x)`.
pub fn forward(spec: &NetSpec, w: &NetworkWeights, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let mut ev = Evaluator::new(spec, w.as_slice())?;
    Ok(ev.forward(theta, x)?.to_vec())
}

/// Exact theta-Jacobian and divergence of the network output.
pub fn theta_derivatives(
    spec: &NetSpec,
    w: &NetworkWeights,
    theta: &[f64],
    x: &[f64],
) -> Result<ThetaDerivatives> {
    if spec.output_dim != spec.theta_dim {
        return Err(Error::Input("divergence needs output_dim == theta_dim".into()));
    }
    let mut ev = Evaluator::new(spec, w.as_slice())?;
    let (_, jac) = ev.eval(theta, x)?;
    let d = spec.theta_dim;
    let divergence = (0..d).map(|j| jac[j * d + j]).sum();
    Ok(ThetaDerivatives {
        jacobian: jac.to_vec(),
        divergence,
    })
}
