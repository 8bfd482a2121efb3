//! Randomised finite-difference checks for every tape primitive.
//!
//! Each case reads its primitive out through a fixed random weighting,
//! `Σ w ⊙ op(inputs)`, so that every output coordinate contributes a distinct
//! gradient. Inputs to kinked primitives are drawn at least 0.1 away from the
//! kink, far outside the difference step, which is large enough that
//! summation rounding in the readout does not swamp small gradient entries.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Input, Precision, TapeFn};
use super::kernels::Real;
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Relu,
    LeakyRelu,
    Abs,
    Sqrt,
    Square,
    MatMul,
    Transpose,
    AddRowBias,
    Softmax,
    LayerNorm,
    Concat,
    Slice,
    Reshape,
    Sum,
    Mean,
    Conv2d,
    Conv3d,
    Conv3dStrided,
    Conv3dInputGrad,
    Interpolate2d,
    AvgPool2,
    UpsampleNearest,
    GaussianBlur3d,
    ChannelNorm,
    GatherRows,
}

impl Primitive {
    pub const ALL: [Primitive; 30] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Div,
        Primitive::Scale,
        Primitive::Relu,
        Primitive::LeakyRelu,
        Primitive::Abs,
        Primitive::Sqrt,
        Primitive::Square,
        Primitive::MatMul,
        Primitive::Transpose,
        Primitive::AddRowBias,
        Primitive::Softmax,
        Primitive::LayerNorm,
        Primitive::Concat,
        Primitive::Slice,
        Primitive::Reshape,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::Conv2d,
        Primitive::Conv3d,
        Primitive::Conv3dStrided,
        Primitive::Conv3dInputGrad,
        Primitive::Interpolate2d,
        Primitive::AvgPool2,
        Primitive::UpsampleNearest,
        Primitive::GaussianBlur3d,
        Primitive::ChannelNorm,
        Primitive::GatherRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Scale => "scale",
            Primitive::Relu => "relu",
            Primitive::LeakyRelu => "leaky_relu",
            Primitive::Abs => "abs",
            Primitive::Sqrt => "sqrt",
            Primitive::Square => "square",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::AddRowBias => "add_row_bias",
            Primitive::Softmax => "softmax",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Concat => "concat",
            Primitive::Slice => "slice",
            Primitive::Reshape => "reshape",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Conv2d => "conv2d",
            Primitive::Conv3d => "conv3d",
            Primitive::Conv3dStrided => "conv3d_stride2",
            Primitive::Conv3dInputGrad => "conv3d_input_grad",
            Primitive::Interpolate2d => "interpolate2d",
            Primitive::AvgPool2 => "avg_pool2",
            Primitive::UpsampleNearest => "upsample_nearest",
            Primitive::GaussianBlur3d => "gaussian_blur3d",
            Primitive::ChannelNorm => "channel_norm",
            Primitive::GatherRows => "gather_rows",
        }
    }
}

/// One randomised instance: inputs plus the readout weighting.
struct Case {
    prim: Primitive,
    dims: Vec<usize>,
    readout: Vec<f64>,
    gather: Arc<Vec<usize>>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform on [−1, 1], or on [0.1, 1] when `mixed` is false. Same-sign data
/// keeps reductions free of cancellation, so a 32-bit backward pass can be
/// judged per coordinate without tiny near-cancelled entries dominating.
fn signed(rng: &mut ChaCha8Rng, n: usize, mixed: bool) -> Vec<f64> {
    if mixed {
        uniform(rng, n, -1.0, 1.0)
    } else {
        uniform(rng, n, 0.1, 1.0)
    }
}

/// Magnitudes in [0.1, 1] with random signs.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn build(prim: Primitive, seed: u64, mixed: bool) -> (Case, Vec<Input>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (prim as u64).wrapping_mul(0x9e37_79b9));
    let mut r = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (a, b, c) = (r(2, 4), r(2, 4), r(2, 3));
    let (d, h, w) = (r(3, 5), r(3, 5), r(3, 5));
    let mut dims = vec![a, b, c, d, h, w];
    let mut gather = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17) ^ prim as u64);
    let vol = |c: usize| vec![c, d, h, w];
    let inputs: Vec<Input> = match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => vec![
            Input::new(signed(&mut rng, a * b, mixed), &[a, b]),
            Input::new(signed(&mut rng, a * b, mixed), &[a, b]),
        ],
        Primitive::Div => vec![
            Input::new(signed(&mut rng, a * b, mixed), &[a, b]),
            Input::new(uniform(&mut rng, a * b, 0.5, 2.0), &[a, b]),
        ],
        Primitive::Relu | Primitive::LeakyRelu | Primitive::Abs => {
            vec![Input::new(away_from_zero(&mut rng, a * b * c), &[a, b, c])]
        }
        Primitive::Sqrt => vec![Input::new(uniform(&mut rng, a * b, 0.5, 2.0), &[a, b])],
        Primitive::Scale
        | Primitive::Square
        | Primitive::Transpose
        | Primitive::Softmax
        | Primitive::Reshape
        | Primitive::Sum
        | Primitive::Mean => vec![Input::new(signed(&mut rng, a * b, mixed), &[a, b])],
        Primitive::MatMul => vec![
            Input::new(signed(&mut rng, a * b, mixed), &[a, b]),
            Input::new(signed(&mut rng, b * c, mixed), &[b, c]),
        ],
        Primitive::AddRowBias => vec![
            Input::new(signed(&mut rng, a * b, mixed), &[a, b]),
            Input::new(signed(&mut rng, b, mixed), &[b]),
        ],
        Primitive::LayerNorm => {
            let n = b + 2;
            dims[1] = n;
            vec![
                Input::new(signed(&mut rng, a * n, mixed), &[a, n]),
                Input::new(uniform(&mut rng, n, 0.5, 1.5), &[n]),
                Input::new(uniform(&mut rng, n, -0.5, 0.5), &[n]),
            ]
        }
        Primitive::Concat => vec![
            Input::new(signed(&mut rng, a * b * w, mixed), &[a, b, w]),
            Input::new(signed(&mut rng, a * c * w, mixed), &[a, c, w]),
        ],
        Primitive::Slice => vec![Input::new(signed(&mut rng, a * h * w, mixed), &[a, h, w])],
        Primitive::Conv2d => vec![
            Input::new(signed(&mut rng, c * h * w, mixed), &[c, h, w]),
            Input::new(signed(&mut rng, a * c * 9, mixed), &[a, c, 3, 3]),
            Input::new(signed(&mut rng, a, mixed), &[a]),
        ],
        Primitive::Conv3d | Primitive::Conv3dStrided => vec![
            Input::new(signed(&mut rng, c * d * h * w, mixed), &vol(c)),
            Input::new(signed(&mut rng, a * c * 27, mixed), &[a, c, 3, 3, 3]),
            Input::new(signed(&mut rng, a, mixed), &[a]),
        ],
        Primitive::Conv3dInputGrad => {
            let o = |n: usize| (n + 2 - 3) / 2 + 1;
            let out = [a, o(d), o(h), o(w)];
            vec![
                Input::new(signed(&mut rng, out.iter().product(), mixed), &out),
                Input::new(signed(&mut rng, a * c * 27, mixed), &[a, c, 3, 3, 3]),
            ]
        }
        Primitive::Interpolate2d => vec![Input::new(signed(&mut rng, c * h * w, mixed), &[c, h, w])],
        Primitive::AvgPool2 | Primitive::UpsampleNearest | Primitive::GaussianBlur3d | Primitive::ChannelNorm => {
            vec![Input::new(away_from_zero(&mut rng, c * d * h * w), &vol(c))]
        }
        Primitive::GatherRows => {
            gather = (0..a + 3).map(|_| rng.random_range(0..b)).collect();
            vec![Input::new(signed(&mut rng, b * c, mixed), &[b, c])]
        }
    };
    let case = Case {
        prim,
        dims,
        readout: Vec::new(),
        gather: Arc::new(gather),
    };
    let mut case = case;
    // size the readout by tracing once
    let n_out = {
        let mut t = Tape::<f64>::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|i| t.variable(i.values.clone(), &i.shape).unwrap())
            .collect();
        let y = case.apply(&mut t, &vars).expect("primitive case traces");
        t.value(y).len()
    };
    case.readout = signed(&mut rng, n_out, mixed);
    (case, inputs)
}

impl Case {
    fn apply<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        let dims = &self.dims;
        let (d, h, w) = (dims[3], dims[4], dims[5]);
        match self.prim {
            Primitive::Add => t.add(x[0], x[1]),
            Primitive::Sub => t.sub(x[0], x[1]),
            Primitive::Mul => t.mul(x[0], x[1]),
            Primitive::Div => t.div(x[0], x[1]),
            Primitive::Scale => t.scale(x[0], -1.75),
            Primitive::Relu => t.relu(x[0]),
            Primitive::LeakyRelu => t.leaky_relu(x[0], 0.2),
            Primitive::Abs => t.abs(x[0]),
            Primitive::Sqrt => t.sqrt(x[0]),
            Primitive::Square => t.square(x[0]),
            Primitive::MatMul => t.matmul(x[0], x[1]),
            Primitive::Transpose => t.transpose(x[0]),
            Primitive::AddRowBias => t.add_row_bias(x[0], x[1]),
            Primitive::Softmax => t.softmax(x[0]),
            Primitive::LayerNorm => t.layer_norm(x[0], x[1], x[2], 1e-5),
            Primitive::Concat => t.concat(&[x[0], x[1]], 1),
            Primitive::Slice => t.slice(x[0], 1, 1, h - 2),
            Primitive::Reshape => {
                let n = t.value(x[0]).len();
                t.reshape(x[0], &[n])
            }
            Primitive::Sum => t.sum(x[0]),
            Primitive::Mean => t.mean(x[0]),
            Primitive::Conv2d => t.conv2d(x[0], x[1], Some(x[2]), 1),
            Primitive::Conv3d => t.conv3d(x[0], x[1], Some(x[2]), 1, 1),
            Primitive::Conv3dStrided => t.conv3d(x[0], x[1], Some(x[2]), 2, 1),
            Primitive::Conv3dInputGrad => t.conv3d_input_grad(x[0], x[1], [dims[2], d, h, w], 2, 1),
            Primitive::Interpolate2d => t.interpolate2d(x[0], h + 3, w + 1),
            Primitive::AvgPool2 => t.avg_pool2(x[0]),
            Primitive::UpsampleNearest => t.upsample_nearest(x[0], [d + 2, h + 1, 2 * w]),
            Primitive::GaussianBlur3d => t.gaussian_blur3d(x[0], 1.5, 2),
            Primitive::ChannelNorm => t.channel_norm(x[0]),
            Primitive::GatherRows => t.gather_rows(x[0], self.gather.clone()),
        }
    }
}

impl TapeFn for Case {
    fn eval<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        let y = self.apply(t, x)?;
        let shape = t.shape(y).to_vec();
        let wts = t.constant(self.readout.iter().map(|&v| T::of(v)).collect(), &shape)?;
        let p = t.mul(y, wts)?;
        t.sum(p)
    }
}

/// Check one primitive on a randomised instance.
pub fn check_primitive(prim: Primitive, seed: u64, precision: Precision) -> Result<GradCheckReport> {
    let opts = GradCheckOptions {
        step: 1e-4,
        precision,
        max_coords_per_input: None,
        seed,
        avoid_kinks: false,
    };
    check_primitive_with(prim, seed, &opts)
}

pub fn check_primitive_with(prim: Primitive, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (case, inputs) = build(prim, seed, opts.precision == Precision::F64);
    grad_check(&case, &inputs, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences_in_f64() {
        for prim in Primitive::ALL {
            for seed in 0..3 {
                let r = check_primitive(prim, seed, Precision::F64).unwrap();
                assert!(r.max_rel_error <= 1e-5, "{} seed {seed}: {r:?}", prim.name());
            }
        }
    }

    #[test]
    fn every_primitive_matches_finite_differences_in_f32() {
        for prim in Primitive::ALL {
            let r = check_primitive(prim, 5, Precision::F32).unwrap();
            assert!(r.max_rel_error <= 1e-3, "{}: {r:?}", prim.name());
        }
    }
}
