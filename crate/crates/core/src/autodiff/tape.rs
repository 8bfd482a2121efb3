//! Dynamic tape: every primitive appends a node holding its forward value;
//! [`Tape::backward`] walks the nodes in reverse from a scalar root.
//!
//! Tensors are dense, row-major. Spatial tensors are laid out `[C, D, H, W]`
//! (or `[C, H, W]` in 2D), matching the x-fastest volume layout.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom, Real};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvInputGrad {
        g: Var,
        w: Var,
        geom: ConvGeom,
    },
    Resize2d {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
    },
    AvgPool2(Var),
    Upsample(Var),
    GaussBlur {
        x: Var,
        outer: usize,
        dims: [usize; 3],
        sigma: f64,
        radius: usize,
    },
    ChannelNorm(Var),
    GatherRows {
        table: Var,
        idx: Arc<Vec<usize>>,
    },
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(value.len(), numel(&shape));
        if let Some(i) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite value at element {i} produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, values: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, values: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, false)
    }

    fn leaf(&mut self, values: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if values.len() != numel(shape) {
            return Err(shape_err(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        self.push(values, shape.to_vec(), Op::Leaf, requires_grad)
    }

    /// Bind a stored parameter as a leaf. Binding the same parameter twice
    /// returns the same node, so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.leaf(p.values.clone(), &p.shape, true)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    /// Use the existing node `v` for parameter `id`, so later
    /// [`param`](Self::param) calls return it instead of the stored values.
    pub fn bind_param(&mut self, store: &ParamStore<T>, id: ParamId, v: Var) -> Result<()> {
        if self.bound.contains_key(&id) {
            return Err(shape_err(format!("parameter {} is already bound", store.get(id).name)));
        }
        if store.get(id).shape != self.shape(v) {
            return Err(shape_err(format!(
                "parameter {} has shape {:?}, node has {:?}",
                store.get(id).name,
                store.get(id).shape,
                self.shape(v)
            )));
        }
        self.bound.insert(id, v);
        Ok(())
    }

    /// Input values of every relu, leaky relu, abs and sqrt node, in tape
    /// order. Two traces of the same function whose values agree in sign lie
    /// on the same smooth piece at every kink.
    pub fn kink_inputs(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let x = match node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) | Op::Abs(x) | Op::Sqrt(x) => x,
                _ => continue,
            };
            out.extend(self.value(x).iter().map(|v| v.f64()));
        }
        out
    }

    /// Parameters bound on this tape, with their nodes.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&id, &v)| (id, v))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(value, shape, op, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(value, shape, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let st = T::of(s);
        self.unary(a, move |x| x * st, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let st = T::of(s);
        self.unary(a, move |x| x + st, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let s = T::of(slope);
        self.unary(a, move |x| if x > T::zero() { x } else { x * s }, Op::LeakyRelu(a, slope))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    /// Square root; the backward pass treats `d√x/dx` at `x = 0` as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.value(a).iter().position(|&v| v < T::zero()) {
            return Err(Error::Numerical(format!("sqrt of negative value at element {i}")));
        }
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a), false, self.value(b), false, T::zero(), &mut out);
        let rg = self.rg(&[a, b]);
        self.push(out, vec![m, n], Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err(format!("transpose of rank-{} tensor", s.len())));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, vec![n, m], Op::Transpose(a), rg)
    }

    /// `x[m, n] + b[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || self.shape(b) != [s[1]] {
            return Err(shape_err(format!("row bias {:?} for {s:?}", self.shape(b))));
        }
        let n = s[1];
        let bias = self.value(b);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % n])
            .collect();
        let shape = s.to_vec();
        let rg = self.rg(&[x, b]);
        self.push(out, shape, Op::AddRowBias(x, b), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| shape_err("softmax of scalar".into()))?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, shape, Op::Softmax(a), rg)
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| shape_err("layer_norm of scalar".into()))?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(shape_err(format!("layer_norm gain/bias must be [{n}]")));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xs.len() / n;
        let mut out = vec![T::zero(); xs.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for k in 0..n {
                let xhat = T::of((row[k].f64() - mean) * rstd);
                out[r * n + k] = xhat * g[k] + b[k];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            rg,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err(format!("concat axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || (0..s.len()).any(|i| i != axis && s[i] != base[i]) {
                return Err(shape_err(format!("concat {s:?} with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        self.push(
            out,
            shape,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let base = self.shape(x).to_vec();
        if axis >= base.len() || start + len > base[axis] {
            return Err(shape_err(format!("slice {start}..{} of axis {axis} in {base:?}", start + len)));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let n = base[axis];
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = base;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(out, shape, Op::Slice { x, axis, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(shape_err(format!("reshape {:?} to {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(value, shape.to_vec(), Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = kernels::compensated_sum(self.value(x));
        let rg = self.rg(&[x]);
        self.push(vec![total], vec![], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(shape_err("mean of empty tensor".into()));
        }
        let total = kernels::compensated_sum(self.value(x));
        let rg = self.rg(&[x]);
        self.push(vec![total / T::of(n as f64)], vec![], Op::Mean(x), rg)
    }

    fn conv_geom(&self, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3], two_d: bool) -> Result<ConvGeom> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (input, kernel, c_in, c_out) = if two_d {
            if xs.len() != 3 || ws.len() != 4 {
                return Err(shape_err(format!("conv2d input {xs:?}, weight {ws:?}")));
            }
            ([1, xs[1], xs[2]], [1, ws[2], ws[3]], xs[0], ws[0])
        } else {
            if xs.len() != 4 || ws.len() != 5 {
                return Err(shape_err(format!("conv3d input {xs:?}, weight {ws:?}")));
            }
            ([xs[1], xs[2], xs[3]], [ws[2], ws[3], ws[4]], xs[0], ws[0])
        };
        if ws[1] != c_in {
            return Err(shape_err(format!("conv weight {ws:?} for {c_in} input channels")));
        }
        ConvGeom::new(c_in, c_out, input, kernel, stride, pad)
    }

    fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, out_shape: Vec<usize>) -> Result<Var> {
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(shape_err(format!("conv bias {:?} for {} outputs", self.shape(b), geom.c_out)));
            }
        }
        let out = kernels::conv_forward(
            &geom,
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(out, out_shape, Op::Conv { x, w, b, geom }, rg)
    }

    /// 2D convolution, stride 1, of `x[C, H, W]` with `w[O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(x, w, [1, 1, 1], [0, pad, pad], true)?;
        let shape = vec![geom.c_out, geom.output[1], geom.output[2]];
        self.conv(x, w, b, geom, shape)
    }

    /// 3D convolution of `x[C, D, H, W]` with `w[O, C, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(x, w, [stride; 3], [pad; 3], false)?;
        let shape = vec![geom.c_out, geom.output[0], geom.output[1], geom.output[2]];
        self.conv(x, w, b, geom, shape)
    }

    /// Input-gradient of a 3D convolution as a differentiable node: maps an
    /// output-shaped tensor `g` to `conv3dᵀ(g; w)` with the input shape.
    /// Used to build the critic's input gradient for the gradient penalty.
    pub fn conv3d_input_grad(&mut self, g: Var, w: Var, input: [usize; 4], stride: usize, pad: usize) -> Result<Var> {
        let ws = self.shape(w);
        if ws.len() != 5 || ws[1] != input[0] {
            return Err(shape_err(format!("conv weight {ws:?} for input {input:?}")));
        }
        let geom = ConvGeom::new(
            input[0],
            ws[0],
            [input[1], input[2], input[3]],
            [ws[2], ws[3], ws[4]],
            [stride; 3],
            [pad; 3],
        )?;
        let expected = [geom.c_out, geom.output[0], geom.output[1], geom.output[2]];
        if self.shape(g) != expected {
            return Err(shape_err(format!("conv gradient {:?}, expected {expected:?}", self.shape(g))));
        }
        let out = kernels::conv_input_grad(&geom, self.value(g), self.value(w));
        let rg = self.rg(&[g, w]);
        self.push(out, input.to_vec(), Op::ConvInputGrad { g, w, geom }, rg)
    }

    /// Bilinear resize of `x[C, H, W]`.
    pub fn interpolate2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(shape_err(format!("interpolate2d of {s:?} to {out_h}x{out_w}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let out = kernels::resize_bilinear(self.value(x), c, h, w, out_h, out_w);
        let rg = self.rg(&[x]);
        self.push(out, vec![c, out_h, out_w], Op::Resize2d { x, c, h, w }, rg)
    }

    /// 2×2×2 average pooling of `x[C, D, H, W]` (odd trailing planes dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err(format!("avg_pool2 of {s:?}")));
        }
        let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let src = self.value(x);
        let mut out = vec![T::zero(); c * od * oh * ow];
        let eighth = T::of(0.125);
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = T::zero();
                        for (a, b, e) in OCTANT {
                            acc = acc + src[((ch * d + 2 * z + a) * h + 2 * y + b) * w + 2 * xx + e];
                        }
                        out[((ch * od + z) * oh + y) * ow + xx] = acc * eighth;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, vec![c, od, oh, ow], Op::AvgPool2(x), rg)
    }

    /// Nearest-neighbour resize of `x[C, D, H, W]` to the given spatial size.
    pub fn upsample_nearest(&mut self, x: Var, out: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err(format!("upsample of {s:?}")));
        }
        let maps = nearest_maps([s[1], s[2], s[3]], out);
        let src = self.value(x);
        let (d, h, w) = (s[1], s[2], s[3]);
        let mut v = Vec::with_capacity(s[0] * out.iter().product::<usize>());
        for ch in 0..s[0] {
            for &z in &maps[0] {
                for &y in &maps[1] {
                    for &xx in &maps[2] {
                        v.push(src[((ch * d + z) * h + y) * w + xx]);
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(v, vec![s[0], out[0], out[1], out[2]], Op::Upsample(x), rg)
    }

    /// Separable Gaussian smoothing over the trailing three axes, with the
    /// window renormalised where it is truncated by the border.
    pub fn gaussian_blur3d(&mut self, x: Var, sigma: f64, radius: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(shape_err(format!("gaussian_blur3d of {s:?}")));
        }
        let k = s.len();
        let dims = [s[k - 3], s[k - 2], s[k - 1]];
        let outer: usize = s[..k - 3].iter().product();
        let out = kernels::gaussian_blur3d(self.value(x), outer, dims, sigma, radius, false);
        let rg = self.rg(&[x]);
        self.push(
            out,
            s,
            Op::GaussBlur {
                x,
                outer,
                dims,
                sigma,
                radius,
            },
            rg,
        )
    }

    /// `sqrt(Σ_c x_c²)` over the leading axis; output has a leading axis of 1.
    pub fn channel_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(shape_err("channel_norm of scalar".into()));
        }
        let c = s[0];
        let inner = numel(&s[1..]);
        let src = self.value(x);
        let out = (0..inner)
            .map(|i| (0..c).map(|ch| src[ch * inner + i] * src[ch * inner + i]).sum::<T>().sqrt())
            .collect();
        let mut shape = s;
        shape[0] = 1;
        let rg = self.rg(&[x]);
        self.push(out, shape, Op::ChannelNorm(x), rg)
    }

    /// Rows of `table[R, D]` picked by `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || idx.iter().any(|&i| i >= s[0]) {
            return Err(shape_err(format!("gather_rows from {s:?}")));
        }
        let d = s[1];
        let src = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let n = idx.len();
        let rg = self.rg(&[table]);
        self.push(out, vec![n, d], Op::GatherRows { table, idx }, rg)
    }

    /// Reverse sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        axpy(ga, g, T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, g, T::one());
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(gb, g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        ga[k] = ga[k] + g[k] * bv[k];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for k in 0..g.len() {
                        gb[k] = gb[k] + g[k] * av[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        ga[k] = ga[k] + g[k] / bv[k];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for k in 0..g.len() {
                        gb[k] = gb[k] - g[k] * av[k] / (bv[k] * bv[k]);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, g, T::of(*s));
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, g, T::one());
                }
            }
            Op::Relu(a) => {
                let av = val(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        if av[k] > T::zero() {
                            ga[k] = ga[k] + g[k];
                        }
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let av = val(*a);
                let s = T::of(*slope);
                if let Some(ga) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        ga[k] = ga[k] + if av[k] > T::zero() { g[k] } else { g[k] * s };
                    }
                }
            }
            Op::Abs(a) => {
                let av = val(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        if av[k] > T::zero() {
                            ga[k] = ga[k] + g[k];
                        } else if av[k] < T::zero() {
                            ga[k] = ga[k] - g[k];
                        }
                    }
                }
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    let half = T::of(0.5);
                    for k in 0..g.len() {
                        if y[k] > T::zero() {
                            ga[k] = ga[k] + g[k] * half / y[k];
                        }
                    }
                }
            }
            Op::Square(a) => {
                let av = val(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    let two = T::of(2.0);
                    for k in 0..g.len() {
                        ga[k] = ga[k] + two * av[k] * g[k];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::gemm(m, n, k, g, false, bv, true, T::one(), ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::gemm(k, m, n, av, true, g, false, T::one(), gb);
                }
            }
            Op::Transpose(a) => {
                let s = &self.nodes[a.0].shape;
                let (m, n) = (s[0], s[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = ga[i * n + j] + g[j * m + i];
                        }
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                let n = self.nodes[b.0].value.len();
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(gx, g, T::one());
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(n) {
                        for k in 0..n {
                            gb[k] = gb[k] + row[k];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = *node.shape.last().unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for k in 0..n {
                            ga[r * n + k] = ga[r * n + k] + yr[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let n = *node.shape.last().unwrap();
                let xs = val(*x);
                let gv = val(*gain);
                let rows = xs.len() / n;
                let xhat = |r: usize, k: usize| T::of((xs[r * n + k].f64() - mean[r]) * rstd[r]);
                if let Some(gb) = self.acc(grads, *bias) {
                    for r in 0..rows {
                        for k in 0..n {
                            gb[k] = gb[k] + g[r * n + k];
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for r in 0..rows {
                        for k in 0..n {
                            gg[k] = gg[k] + g[r * n + k] * xhat(r, k);
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let nt = T::of(n as f64);
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for k in 0..n {
                            let gh = g[r * n + k] * gv[k];
                            m1 = m1 + gh;
                            m2 = m2 + gh * xhat(r, k);
                        }
                        m1 = m1 / nt;
                        m2 = m2 / nt;
                        let rs = T::of(rstd[r]);
                        for k in 0..n {
                            let gh = g[r * n + k] * gv[k];
                            gx[r * n + k] = gx[r * n + k] + rs * (gh - m1 - xhat(r, k) * m2);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].shape[*axis];
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            axpy(&mut gp[o * len * inner..(o + 1) * len * inner], src, T::one());
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let base = &self.nodes[x.0].shape;
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let n = base[*axis];
                let len = node.shape[*axis];
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                        axpy(dst, &g[o * len * inner..(o + 1) * len * inner], T::one());
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for v in ga.iter_mut() {
                        *v = *v + g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / T::of(ga.len() as f64);
                    for v in ga.iter_mut() {
                        *v = *v + s;
                    }
                }
            }
            Op::Conv { x, w, b, geom } => {
                if let Some(gb) = b.and_then(|b| self.acc(grads, b)) {
                    let n = geom.out_spatial();
                    for (o, chunk) in g.chunks(n).enumerate() {
                        gb[o] = gb[o] + chunk.iter().copied().sum::<T>();
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    kernels::conv_weight_grad(geom, val(*x), g, gw);
                }
                if self.nodes[x.0].requires_grad {
                    let gi = kernels::conv_input_grad(geom, g, val(*w));
                    axpy(self.acc(grads, *x).unwrap(), &gi, T::one());
                }
            }
            Op::ConvInputGrad { g: go, w, geom } => {
                // node = Jᵀ·go, so d/dgo = J·g and d/dw pairs g (input-shaped)
                // with go (output-shaped)
                if self.nodes[go.0].requires_grad {
                    let gg = kernels::conv_forward(geom, g, val(*w), None);
                    axpy(self.acc(grads, *go).unwrap(), &gg, T::one());
                }
                if let Some(gw) = self.acc(grads, *w) {
                    kernels::conv_weight_grad(geom, g, val(*go), gw);
                }
            }
            Op::Resize2d { x, c, h, w } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let gi = kernels::resize_bilinear_adjoint(g, *c, *h, *w, node.shape[1], node.shape[2]);
                    axpy(gx, &gi, T::one());
                }
            }
            Op::AvgPool2(x) => {
                let s = &self.nodes[x.0].shape;
                let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
                let (od, oh, ow) = (node.shape[1], node.shape[2], node.shape[3]);
                if let Some(gx) = self.acc(grads, *x) {
                    let eighth = T::of(0.125);
                    for ch in 0..c {
                        for z in 0..od {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let v = g[((ch * od + z) * oh + y) * ow + xx] * eighth;
                                    for (a, b, e) in OCTANT {
                                        let i = ((ch * d + 2 * z + a) * h + 2 * y + b) * w + 2 * xx + e;
                                        gx[i] = gx[i] + v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample(x) => {
                let s = &self.nodes[x.0].shape;
                let out = [node.shape[1], node.shape[2], node.shape[3]];
                let maps = nearest_maps([s[1], s[2], s[3]], out);
                let (d, h, w) = (s[1], s[2], s[3]);
                if let Some(gx) = self.acc(grads, *x) {
                    let mut k = 0;
                    for ch in 0..s[0] {
                        for &z in &maps[0] {
                            for &y in &maps[1] {
                                for &xx in &maps[2] {
                                    let i = ((ch * d + z) * h + y) * w + xx;
                                    gx[i] = gx[i] + g[k];
                                    k += 1;
                                }
                            }
                        }
                    }
                }
            }
            Op::GaussBlur {
                x,
                outer,
                dims,
                sigma,
                radius,
            } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let gi = kernels::gaussian_blur3d(g, *outer, *dims, *sigma, *radius, true);
                    axpy(gx, &gi, T::one());
                }
            }
            Op::ChannelNorm(x) => {
                let xs = val(*x);
                let c = self.nodes[x.0].shape[0];
                let inner = node.value.len();
                let y = &node.value;
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..inner {
                        if y[i] > T::zero() {
                            let s = g[i] / y[i];
                            for ch in 0..c {
                                gx[ch * inner + i] = gx[ch * inner + i] + s * xs[ch * inner + i];
                            }
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let d = self.nodes[table.0].shape[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d], T::one());
                    }
                }
            }
        }
        Ok(())
    }
}

const OCTANT: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

fn nearest_maps(input: [usize; 3], out: [usize; 3]) -> [Vec<usize>; 3] {
    let map = |n_in: usize, n_out: usize| -> Vec<usize> {
        (0..n_out).map(|i| (i * n_in / n_out).min(n_in - 1)).collect()
    };
    [map(input[0], out[0]), map(input[1], out[1]), map(input[2], out[2])]
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Relu(..) => "relu",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Abs(..) => "abs",
        Op::Sqrt(..) => "sqrt",
        Op::Square(..) => "square",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::AddRowBias(..) => "add_row_bias",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Reshape(..) => "reshape",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Conv { .. } => "conv",
        Op::ConvInputGrad { .. } => "conv_input_grad",
        Op::Resize2d { .. } => "interpolate2d",
        Op::AvgPool2(..) => "avg_pool2",
        Op::Upsample(..) => "upsample_nearest",
        Op::GaussBlur { .. } => "gaussian_blur3d",
        Op::ChannelNorm(..) => "channel_norm",
        Op::GatherRows { .. } => "gather_rows",
    }
}

/// Result of [`Tape::backward`]. Intermediate gradients are released during
/// the sweep; leaf gradients are kept.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` if it did not influence the root.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf, zeros if it did not influence the root.
    pub fn wrt_or_zeros(&self, tape: &Tape<T>, v: Var) -> Vec<T> {
        self.wrt(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); tape.value(v).len()])
    }

    /// Gradients of every parameter bound on `tape`.
    pub fn params(&self, tape: &Tape<T>) -> Vec<(ParamId, Vec<T>)> {
        let mut out: Vec<(ParamId, Vec<T>)> = tape
            .bound_params()
            .map(|(id, v)| (id, self.wrt_or_zeros(tape, v)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
